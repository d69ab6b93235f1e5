//! Tensor-level reverse-mode differentiation and its finite-difference
//! oracle.
//!
//! The tape records every primitive from [`crate::eval::Evaluator`]
//! during a forward build and replays exact adjoint rules backwards.
//! Gradients run in 64-bit mode only; `fast32` exists for inference,
//! not for training or certification.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::eval::{cross_entropy_mean_value, Evaluator};
use crate::nn::Activation;
use crate::tensor::{self, Precision, Tensor};

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Activation(usize, Activation),
    SoftmaxRows(usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    SumAll(usize),
    CrossEntropyMean(usize, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation; node 0..n in execution order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

/// Index of a node on the tape.
pub type NodeId = usize;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value_of(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Names of registered parameters, in registration order.
    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Reverse sweep from a scalar objective. Returns one gradient slot
    /// per node; nodes the objective does not reach keep `None`.
    fn backward(&self, out: NodeId) -> Result<Vec<Option<Tensor>>> {
        let out_val = &self.nodes[out].value;
        if out_val.len() != 1 {
            return Err(Error::contract(format!(
                "gradients require a scalar objective, got dims {:?}",
                out_val.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(Tensor::scalar(1.0));

        for id in (0..=out).rev() {
            // Leaves keep their accumulated slot so it can be read out.
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let ga = tensor::matmul(&g, &tensor::transpose(vb)?)?;
                    let gb = tensor::matmul(&tensor::transpose(va)?, &g)?;
                    accumulate(&mut grads[*a], ga)?;
                    accumulate(&mut grads[*b], gb)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[*a], tensor::transpose(&g)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone())?;
                    accumulate(&mut grads[*b], g)?;
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[*a].value.clone();
                    let vb = self.nodes[*b].value.clone();
                    accumulate(&mut grads[*a], tensor::mul(&g, &vb)?)?;
                    accumulate(&mut grads[*b], tensor::mul(&g, &va)?)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[*a], tensor::scale(&g, *c))?;
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads[*x], g.clone())?;
                    accumulate(&mut grads[*row], tensor::col_sum(&g)?)?;
                }
                Op::Activation(x, act) => {
                    let vx = &self.nodes[*x].value;
                    let dx = Tensor::new(
                        vx.dims().to_vec(),
                        vx.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gy)| gy * act.derivative(x))
                            .collect(),
                    )?;
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::SoftmaxRows(x) => {
                    // dx_j = s_j * (g_j - sum_i g_i s_i), per row
                    let s = &self.nodes[id].value;
                    let (m, n) = (s.rows(), s.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let srow = &s.data()[i * n..(i + 1) * n];
                        let grow = &g.data()[i * n..(i + 1) * n];
                        let mut dot = 0.0;
                        for (sv, gv) in srow.iter().zip(grow) {
                            dot += sv * gv;
                        }
                        for j in 0..n {
                            dx[i * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::new(vec![m, n], dx)?)?;
                }
                Op::GatherRows(x, idx) => {
                    let vx = &self.nodes[*x].value;
                    let n = vx.cols();
                    let mut dx = Tensor::zeros(vx.dims().to_vec());
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            dx.data_mut()[src * n + j] += g.data()[r * n + j];
                        }
                    }
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.rows();
                        let n = self.nodes[p].value.cols();
                        let gp = Tensor::new(
                            vec![rows, n],
                            g.data()[offset * n..(offset + rows) * n].to_vec(),
                        )?;
                        accumulate(&mut grads[p], gp)?;
                        offset += rows;
                    }
                }
                Op::Reshape(x) => {
                    let dims = self.nodes[*x].value.dims().to_vec();
                    accumulate(&mut grads[*x], g.reshape(dims)?)?;
                }
                Op::SumAll(x) => {
                    let g0 = g.data()[0];
                    let vx = &self.nodes[*x].value;
                    accumulate(&mut grads[*x], Tensor::filled(vx.dims().to_vec(), g0))?;
                }
                Op::CrossEntropyMean(logits, targets) => {
                    let g0 = g.data()[0];
                    let v = &self.nodes[*logits].value;
                    let p = tensor::softmax_rows(v)?;
                    let (m, n) = (p.rows(), p.cols());
                    let mut dx = p.into_data();
                    for (i, &t) in targets.iter().enumerate() {
                        dx[i * n + t] -= 1.0;
                    }
                    let inv_m = g0 / m as f64;
                    for d in &mut dx {
                        *d *= inv_m;
                    }
                    accumulate(&mut grads[*logits], Tensor::new(vec![m, n], dx)?)?;
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of a scalar node with respect to every registered
    /// parameter; parameters the objective does not reach get zeros.
    pub fn gradients(&self, out: NodeId) -> Result<Vec<(String, Tensor)>> {
        let mut grads = self.backward(out)?;
        Ok(self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads[*id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[*id].value.dims().to_vec()));
                (name.clone(), g)
            })
            .collect())
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) -> Result<()> {
    match slot {
        Some(g) => *slot = Some(tensor::add(g, &delta)?),
        None => *slot = Some(delta),
    }
    Ok(())
}

/// Tape-recording executor; handles are node ids.
pub struct TapeEval {
    pub tape: Tape,
}

impl TapeEval {
    pub fn new() -> Self {
        TapeEval { tape: Tape::new() }
    }
}

impl Default for TapeEval {
    fn default() -> Self {
        Self::new()
    }
}

impl Evaluator for TapeEval {
    type Handle = NodeId;

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.tape.push(t, Op::Leaf)
    }

    fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        debug_assert!(
            !self.tape.params.iter().any(|(n, _)| n == name),
            "parameter {name} bound twice"
        );
        let id = self.tape.push(t.clone(), Op::Leaf);
        self.tape.params.push((name.to_string(), id));
        id
    }

    fn dims(&self, h: &NodeId) -> Vec<usize> {
        self.tape.nodes[*h].value.dims().to_vec()
    }

    fn value(&self, h: &NodeId) -> Tensor {
        self.tape.nodes[*h].value.clone()
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::matmul(&self.tape.nodes[*a].value, &self.tape.nodes[*b].value)?;
        Ok(self.tape.push(v, Op::MatMul(*a, *b)))
    }

    fn transpose(&mut self, a: &NodeId) -> Result<NodeId> {
        let v = tensor::transpose(&self.tape.nodes[*a].value)?;
        Ok(self.tape.push(v, Op::Transpose(*a)))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::add(&self.tape.nodes[*a].value, &self.tape.nodes[*b].value)?;
        Ok(self.tape.push(v, Op::Add(*a, *b)))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::mul(&self.tape.nodes[*a].value, &self.tape.nodes[*b].value)?;
        Ok(self.tape.push(v, Op::Mul(*a, *b)))
    }

    fn scale(&mut self, a: &NodeId, c: f64) -> Result<NodeId> {
        let v = tensor::scale(&self.tape.nodes[*a].value, c);
        Ok(self.tape.push(v, Op::Scale(*a, c)))
    }

    fn add_row(&mut self, x: &NodeId, row: &NodeId) -> Result<NodeId> {
        let v = tensor::add_row(&self.tape.nodes[*x].value, &self.tape.nodes[*row].value)?;
        Ok(self.tape.push(v, Op::AddRow(*x, *row)))
    }

    fn activation(&mut self, x: &NodeId, act: Activation) -> Result<NodeId> {
        let v = self.tape.nodes[*x].value.map(|e| act.apply(e));
        Ok(self.tape.push(v, Op::Activation(*x, act)))
    }

    fn softmax_rows(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(&self.tape.nodes[*x].value)?;
        Ok(self.tape.push(v, Op::SoftmaxRows(*x)))
    }

    fn gather_rows(&mut self, x: &NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = tensor::gather_rows(&self.tape.nodes[*x].value, idx)?;
        Ok(self.tape.push(v, Op::GatherRows(*x, idx.to_vec())))
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.tape.nodes[p].value).collect();
        let v = tensor::concat_rows(&tensors)?;
        Ok(self.tape.push(v, Op::ConcatRows(parts.to_vec())))
    }

    fn reshape(&mut self, x: &NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let v = self.tape.nodes[*x].value.reshape(dims)?;
        Ok(self.tape.push(v, Op::Reshape(*x)))
    }

    fn sum_all(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(tensor::sum_all(&self.tape.nodes[*x].value));
        Ok(self.tape.push(v, Op::SumAll(*x)))
    }

    fn cross_entropy_mean(&mut self, logits: &NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = Tensor::scalar(cross_entropy_mean_value(
            &self.tape.nodes[*logits].value,
            targets,
        )?);
        Ok(self
            .tape
            .push(v, Op::CrossEntropyMean(*logits, targets.to_vec())))
    }
}

/// A scalar-valued computation over a named parameter collection,
/// buildable on any executor. Implementors must bind the given handles
/// in [`ParamSet`] order.
pub trait ScalarFn {
    fn build<E: Evaluator>(&self, ev: &mut E, params: &[E::Handle]) -> Result<E::Handle>;
}

/// Named parameter tensors, in a fixed order.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            assert!(seen.insert(name.clone()), "duplicate parameter {name}");
        }
        ParamSet { entries }
    }

    pub fn coordinate_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    fn bind<E: Evaluator>(&self, ev: &mut E) -> Vec<E::Handle> {
        self.entries
            .iter()
            .map(|(name, t)| ev.param(name, t))
            .collect()
    }
}

/// Evaluate `f` at `theta` without recording gradients (64-bit).
pub fn eval_scalar<P: ScalarFn>(f: &P, theta: &ParamSet) -> Result<f64> {
    let mut ev = crate::eval::PlainEval::new(Precision::Verify64);
    let handles = theta.bind(&mut ev);
    let out = f.build(&mut ev, &handles)?;
    if out.len() != 1 {
        return Err(Error::contract(format!(
            "scalar function produced dims {:?}",
            out.dims()
        )));
    }
    Ok(out.data()[0])
}

/// Reverse-mode value and gradient of `f` at `theta`. The returned
/// gradients follow `theta`'s entry order; parameters the objective
/// does not reach get zeros.
pub fn gradients<P: ScalarFn>(f: &P, theta: &ParamSet) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut ev = TapeEval::new();
    let handles = theta.bind(&mut ev);
    let out = f.build(&mut ev, &handles)?;
    let value = ev.tape.value_of(out).data()[0];
    let grads = ev.tape.gradients(out)?;
    Ok((value, grads))
}

/// Worst finite-difference disagreement for one named tensor.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Result of comparing reverse-mode gradients against central
/// differences.
#[derive(Clone, Debug, serde::Serialize)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub groups: Vec<GroupError>,
}

impl FiniteDiffReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference check of `gradients(f)` over every coordinate of
/// `theta`: (f(x+eps) - f(x-eps)) / 2eps, relative error against the
/// reverse-mode value with a max(|a|,|b|,1e-8) denominator.
pub fn finite_diff_check<P: ScalarFn>(
    f: &P,
    theta: &ParamSet,
    eps: f64,
) -> Result<FiniteDiffReport> {
    if eps <= 0.0 {
        return Err(Error::contract(format!("eps must be positive, got {eps}")));
    }
    let (_, analytic) = gradients(f, theta)?;
    let mut work = theta.clone();
    let mut groups = Vec::with_capacity(theta.entries.len());
    let mut max_rel = 0.0;
    let mut worst = String::new();

    for gi in 0..work.entries.len() {
        let mut group_max = 0.0;
        let mut group_worst = 0;
        for ci in 0..work.entries[gi].1.len() {
            let original = work.entries[gi].1.data()[ci];
            work.entries[gi].1.data_mut()[ci] = original + eps;
            let plus = eval_scalar(f, &work)?;
            work.entries[gi].1.data_mut()[ci] = original - eps;
            let minus = eval_scalar(f, &work)?;
            work.entries[gi].1.data_mut()[ci] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let rel = rel_error(analytic[gi].1.data()[ci], numeric);
            if rel > group_max {
                group_max = rel;
                group_worst = ci;
            }
        }
        if group_max > max_rel {
            max_rel = group_max;
            worst = work.entries[gi].0.clone();
        }
        groups.push(GroupError {
            name: work.entries[gi].0.clone(),
            max_rel_error: group_max,
            worst_index: group_worst,
        });
    }

    Ok(FiniteDiffReport {
        max_rel_error: max_rel,
        worst_param: worst,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// f(theta) = sum(theta * c) for a fixed constant c.
    struct DotWithConstant {
        c: Tensor,
    }

    impl ScalarFn for DotWithConstant {
        fn build<E: Evaluator>(&self, ev: &mut E, params: &[E::Handle]) -> Result<E::Handle> {
            let c = ev.constant(self.c.clone());
            let prod = ev.mul(&params[0], &c)?;
            ev.sum_all(&prod)
        }
    }

    /// f(theta) = sum(softmax_rows(theta))
    struct SoftmaxSum;

    impl ScalarFn for SoftmaxSum {
        fn build<E: Evaluator>(&self, ev: &mut E, params: &[E::Handle]) -> Result<E::Handle> {
            let s = ev.softmax_rows(&params[0])?;
            ev.sum_all(&s)
        }
    }

    /// f(theta) = theta^2 (scalar tensor)
    struct Square;

    impl ScalarFn for Square {
        fn build<E: Evaluator>(&self, ev: &mut E, params: &[E::Handle]) -> Result<E::Handle> {
            let sq = ev.mul(&params[0], &params[0])?;
            ev.sum_all(&sq)
        }
    }

    /// Exercises every differentiable primitive at once.
    struct Everything {
        x: Tensor,
        targets: Vec<usize>,
    }

    impl ScalarFn for Everything {
        fn build<E: Evaluator>(&self, ev: &mut E, params: &[E::Handle]) -> Result<E::Handle> {
            let [w, bias, gamma] = params else {
                panic!("expected 3 params")
            };
            let x = ev.constant(self.x.clone());
            let h = ev.linear(&x, w, bias)?;
            let h = ev.activation(&h, Activation::Gelu)?;
            let ht = ev.transpose(&h)?;
            let sim = ev.matmul(&h, &ht)?;
            let sim = ev.scale(&sim, 0.5)?;
            let attn = ev.softmax_rows(&sim)?;
            let mixed = ev.matmul(&attn, &h)?;
            let modulated = ev.mul(&mixed, gamma)?;
            let top = ev.gather_rows(&modulated, &[0, 1])?;
            let bottom = ev.gather_rows(&modulated, &[2, 3])?;
            let cat = ev.concat_rows(&[top, bottom])?;
            let wide = ev.reshape(&cat, vec![2, 2 * self.x.cols()])?;
            ev.cross_entropy_mean(&wide, &self.targets)
        }
    }

    fn param_set(entries: Vec<(&str, Tensor)>) -> ParamSet {
        ParamSet::new(
            entries
                .into_iter()
                .map(|(n, t)| (n.to_string(), t))
                .collect(),
        )
    }

    #[test]
    fn linear_function_gradient_is_exact() {
        let c = Tensor::from_rows(&[vec![2.0, -3.0, 0.5]]).unwrap();
        let theta = param_set(vec![(
            "theta",
            Tensor::from_rows(&[vec![1.0, 4.0, -2.0]]).unwrap(),
        )]);
        let f = DotWithConstant { c: c.clone() };
        let (_, grads) = gradients(&f, &theta).unwrap();
        assert_eq!(grads[0].1, c);
    }

    #[test]
    fn softmax_row_sum_gradient_vanishes() {
        let theta = param_set(vec![(
            "theta",
            Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![5.0, 5.0, 5.0]]).unwrap(),
        )]);
        let (value, grads) = gradients(&SoftmaxSum, &theta).unwrap();
        assert!((value - 2.0).abs() < 1e-12);
        for &g in grads[0].1.data() {
            assert!(g.abs() < 1e-12, "row-sum gradient should vanish, got {g}");
        }
    }

    #[test]
    fn quadratic_matches_analytic() {
        let theta = param_set(vec![("theta", Tensor::scalar(3.0))]);
        let report = finite_diff_check(&Square, &theta, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        let (_, grads) = gradients(&Square, &theta).unwrap();
        assert!((grads[0].1.data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        struct ConstFn;
        impl ScalarFn for ConstFn {
            fn build<E: Evaluator>(&self, ev: &mut E, _p: &[E::Handle]) -> Result<E::Handle> {
                Ok(ev.constant(Tensor::scalar(7.0)))
            }
        }
        let theta = param_set(vec![("theta", Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap())]);
        let (_, grads) = gradients(&ConstFn, &theta).unwrap();
        assert!(grads[0].1.data().iter().all(|&g| g == 0.0));
        let report = finite_diff_check(&ConstFn, &theta, 1e-5).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn every_primitive_passes_finite_difference() {
        let mut rng = Rng::from_seed(42);
        let x = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let theta = param_set(vec![
            ("w", Tensor::uniform(vec![3, 3], -0.7, 0.7, &mut rng)),
            ("bias", Tensor::uniform(vec![3], -0.3, 0.3, &mut rng)),
            ("gamma", Tensor::uniform(vec![4, 3], 0.5, 1.5, &mut rng)),
        ]);
        let f = Everything {
            x,
            targets: vec![1, 4],
        };
        let report = finite_diff_check(&f, &theta, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "worst {} at {:.3e}",
            report.worst_param,
            report.max_rel_error
        );
    }

    #[test]
    fn non_scalar_objective_rejected() {
        struct VectorFn;
        impl ScalarFn for VectorFn {
            fn build<E: Evaluator>(&self, _ev: &mut E, p: &[E::Handle]) -> Result<E::Handle> {
                Ok(p[0].clone())
            }
        }
        let theta = param_set(vec![("theta", Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap())]);
        assert!(gradients(&VectorFn, &theta).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let theta = param_set(vec![
            ("used", Tensor::scalar(2.0)),
            ("unused", Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()),
        ]);
        let (_, grads) = gradients(&Square, &theta).unwrap();
        assert_eq!(grads[1].0, "unused");
        assert!(grads[1].1.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn negative_eps_rejected() {
        let theta = param_set(vec![("theta", Tensor::scalar(1.0))]);
        assert!(finite_diff_check(&Square, &theta, -1e-5).is_err());
    }
}
