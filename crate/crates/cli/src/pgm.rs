//! Plain-text portable graymap rendering for attention maps.
//!
//! Each map is quantized to 16 gray levels, scaled linearly from its
//! own minimum to maximum; the scale is recorded in the comment line so
//! the absolute weights can be recovered.

use vtc_core::Tensor;

/// Render one H x W map of attention weights as a P2 graymap.
pub fn render_pgm(width: usize, height: usize, values: &[f64]) -> String {
    assert_eq!(values.len(), width * height);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::new();
    out.push_str("P2\n");
    out.push_str(&format!(
        "# attention map: linear scale min={min:.6e} max={max:.6e}\n"
    ));
    out.push_str(&format!("{width} {height}\n15\n"));
    for row in 0..height {
        let line: Vec<String> = (0..width)
            .map(|col| {
                let v = values[row * width + col];
                let level = if max > min {
                    ((v - min) / (max - min) * 15.0).round() as u8
                } else {
                    0
                };
                level.to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// One global-attention query row (length H*W, row-major) as an image.
pub fn global_query_pgm(attn_row: &[f64], height: usize, width: usize) -> String {
    render_pgm(width, height, attn_row)
}

/// Tile the per-window local attention [N' x w^2] back onto the grid:
/// each cell shows its weight within its own window.
pub fn local_attention_pgm(attn: &Tensor, height: usize, width: usize, w: usize) -> String {
    let per_row = width / w;
    let mut cells = vec![0.0; height * width];
    for (wi, row) in attn.data().chunks_exact(w * w).enumerate() {
        let (wr, wc) = (wi / per_row, wi % per_row);
        for (t, &v) in row.iter().enumerate() {
            let (r, c) = (t / w, t % w);
            cells[(wr * w + r) * width + (wc * w + c)] = v;
        }
    }
    render_pgm(width, height, &cells)
}
