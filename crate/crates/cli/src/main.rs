//! Command-line surface: compress tensor files, inspect token/FLOP
//! budgets, run the verification suites, and export attention maps.
//!
//! Exit statuses: 0 success, 2 contract/shape errors, 3 file errors,
//! 4 certification failure. Reports go to standard output as JSON;
//! diagnostics go to standard error.

mod pgm;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use vtc_core::accounting::{pipeline_flops, tokens_report, CostModel};
use vtc_core::conditioning::InstructionEmbedding;
use vtc_core::ctf::{read_ctf, write_ctf};
use vtc_core::error::{Error, Result};
use vtc_core::params_io::{encode_params, load_params, save_params};
use vtc_core::pipeline::{compress, init_params, CompressionConfig};
use vtc_core::src::FeatureGrid;
use vtc_core::tensor::Precision;
use vtc_core::verify::certify::{certify_config, certify_gradients};
use vtc_core::verify::oracle::oracle_equivalence;
use vtc_core::verify::toy::{run_toy_suite, TrainerSettings};

#[derive(Parser)]
#[command(name = "vtc", about = "Instruction-conditioned visual token compressor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CertifyMode {
    /// Finite-difference gradient certification over every variant.
    Grad,
    /// Attention against the scalar-loop brute-force oracle.
    Oracle,
    /// Synthetic instruction-retrieval task across the ablations.
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Compress view tensors under an instruction and write Z (and
    /// optionally attention heatmaps).
    Compress {
        /// Parameter file (CVLA).
        #[arg(long)]
        params: PathBuf,
        /// Configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated view tensor files (CTF, each H x W x D).
        #[arg(long, value_delimiter = ',', required = true)]
        views: Vec<PathBuf>,
        /// Instruction embedding file (CTF, T x D).
        #[arg(long)]
        instruction: PathBuf,
        /// Output tensor file for Z.
        #[arg(long)]
        out: PathBuf,
        /// Directory for attention heatmaps (PGM, one per query plus a
        /// tiled local map per view).
        #[arg(long)]
        attn_dir: Option<PathBuf>,
    },
    /// Print the token budget for a configuration.
    Tokens {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the FLOPs report under a downstream cost model.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Cost model JSON: perTokenLinearCost, perTokenPairCost, fixedCost.
        #[arg(long)]
        cost_model: PathBuf,
    },
    /// Run a verification suite and report as JSON (exit 4 on failure).
    Certify {
        #[arg(long, value_enum)]
        mode: CertifyMode,
        /// Number of seeds (0..n) to run.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Configuration for grad mode; defaults to the certification
        /// config (both pathways, 8x8 grid, two views).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Initialize fresh parameters and write them to a file.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Shape { .. } | Error::Contract(_) | Error::Mismatch(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Certification(_) => 4,
    }
}

fn load_config(path: &Path) -> Result<CompressionConfig> {
    let bytes = std::fs::read(path)?;
    let mut config: CompressionConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::contract(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    if let Ok(mode) = std::env::var("COMPRESSOR_PRECISION") {
        config.precision = match mode.as_str() {
            "verify64" => Precision::Verify64,
            "fast32" => Precision::Fast32,
            other => {
                return Err(Error::contract(format!(
                    "COMPRESSOR_PRECISION must be verify64 or fast32, got {other:?}"
                )))
            }
        };
    }
    Ok(config)
}

fn read_view(path: &Path, index: usize) -> Result<FeatureGrid> {
    let raw = read_ctf(path)?;
    if raw.dims.len() != 3 {
        return Err(Error::shape(
            "view",
            format!(
                "{} has rank {}, views must be H x W x D",
                path.display(),
                raw.dims.len()
            ),
        ));
    }
    FeatureGrid::new(raw.to_tensor()?, format!("view{index}:{}", path.display()))
}

fn read_instruction(path: &Path) -> Result<InstructionEmbedding> {
    let raw = read_ctf(path)?;
    if raw.dims.len() != 2 {
        return Err(Error::shape(
            "instruction",
            format!(
                "{} has rank {}, instructions must be T x D",
                path.display(),
                raw.dims.len()
            ),
        ));
    }
    if raw.dims[0] == 0 {
        return Err(Error::contract("no valid instruction tokens"));
    }
    InstructionEmbedding::new(raw.to_tensor()?, None)
}

fn cmd_compress(
    params_path: &Path,
    config_path: &Path,
    view_paths: &[PathBuf],
    instruction_path: &Path,
    out: &Path,
    attn_dir: Option<&Path>,
) -> Result<()> {
    let config = load_config(config_path)?;
    let params = load_params(params_path)?;
    params.check_compatible(&config)?;
    let views = view_paths
        .iter()
        .enumerate()
        .map(|(i, p)| read_view(p, i))
        .collect::<Result<Vec<_>>>()?;
    let instruction = read_instruction(instruction_path)?;
    let output = compress(&params, &views, &instruction, &config)?;
    write_ctf(out, &output.z)?;

    if let Some(dir) = attn_dir {
        std::fs::create_dir_all(dir)?;
        for (v, view) in output.views.iter().enumerate() {
            if let Some(attn) = &view.global_attn {
                for q in 0..attn.rows() {
                    let row = &attn.data()[q * attn.cols()..(q + 1) * attn.cols()];
                    let pgm = pgm::global_query_pgm(row, config.height, config.width);
                    std::fs::write(dir.join(format!("view{v}_query{q}.pgm")), pgm)?;
                }
            }
            if let Some(attn) = &view.local_attn {
                let pgm = pgm::local_attention_pgm(attn, config.height, config.width, config.w);
                std::fs::write(dir.join(format!("view{v}_local.pgm")), pgm)?;
            }
        }
    }
    Ok(())
}

fn cmd_tokens(config_path: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let report = tokens_report(&config)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_flops(config_path: &Path, cost_model_path: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let bytes = std::fs::read(cost_model_path)?;
    let model: CostModel = serde_json::from_slice(&bytes).map_err(|e| {
        Error::contract(format!(
            "invalid cost model {}: {e}",
            cost_model_path.display()
        ))
    })?;
    let report = pipeline_flops(&model, &config)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_certify(mode: CertifyMode, seeds: u64, config_path: Option<&Path>) -> Result<()> {
    let seed_list: Vec<u64> = (0..seeds.max(1)).collect();
    match mode {
        CertifyMode::Grad => {
            let config = match config_path {
                Some(p) => load_config(p)?,
                None => certify_config(),
            };
            let report = certify_gradients(&config, &seed_list)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            if !report.pass {
                let names: Vec<&str> = report
                    .failing_groups()
                    .iter()
                    .map(|g| g.name.as_str())
                    .collect();
                return Err(Error::Certification(format!(
                    "gradient groups exceed {}: {}",
                    report.tolerance,
                    names.join(", ")
                )));
            }
        }
        CertifyMode::Oracle => {
            let report = oracle_equivalence(50, 1e-9, 2024)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            if !report.pass {
                return Err(Error::Certification(format!(
                    "{}/{} oracle instances matched within {}",
                    report.matched, report.instances, report.tolerance
                )));
            }
        }
        CertifyMode::Toy => {
            let report = run_toy_suite(&TrainerSettings::default(), &seed_list)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            if !report.pass {
                return Err(Error::Certification(
                    "toy retrieval suite failed; see report".to_string(),
                ));
            }
        }
    }
    Ok(())
}

fn cmd_init(config_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let params = init_params(&config, seed)?;
    let bytes = encode_params(&params);
    save_params(&params, out)?;
    println!(
        "{}",
        serde_json::json!({
            "parameter_count": params.param_count(),
            "file_size_bytes": bytes.len(),
            "path": out.display().to_string(),
        })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compress {
            params,
            config,
            views,
            instruction,
            out,
            attn_dir,
        } => cmd_compress(
            &params,
            &config,
            &views,
            &instruction,
            &out,
            attn_dir.as_deref(),
        ),
        Command::Tokens { config } => cmd_tokens(&config),
        Command::Flops { config, cost_model } => cmd_flops(&config, &cost_model),
        Command::Certify {
            mode,
            seeds,
            config,
        } => cmd_certify(mode, seeds, config.as_deref()),
        Command::Init { config, seed, out } => cmd_init(&config, seed, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
