//! `meshgen`: one binary wiring tokenization, training, sampling and
//! evaluation into reproducible, config-driven runs.

mod config;
mod ops;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use meshgen_core::error::Error;

use crate::config::RunConfig;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  invalid flags or configuration (also used by argument parsing)
  3  I/O failure (missing or unwritable files)
  4  malformed data (OBJ/PLY/MTOK/checkpoint parsing, framing, ordering)
  5  numeric failure (non-finite loss, degenerate sampling distribution)

On failure one machine-parsable line goes to stderr:
  error code=<n> kind=<kind>: <message>";

#[derive(Parser)]
#[command(
    name = "meshgen",
    version,
    about = "Mesh tokenization, order-constrained generation, training and evaluation",
    after_help = EXIT_HELP
)]
struct Cli {
    /// Worker threads for data-parallel sections (1 = deterministic
    /// sequential execution).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum, Default)]
enum EvalMode {
    /// Mean loss per within-face slot.
    #[default]
    PplProfile,
    /// Point-cloud-conditioned reconstruction Chamfer vs the grid floor.
    Chamfer,
    /// Long-context perplexity: sliding window vs unlimited attention.
    Swa,
}

#[derive(Clone, Copy, ValueEnum, Default)]
enum BenchMode {
    /// Streaming decode with the rolling cache.
    #[default]
    Rolling,
    /// Full-prefix batch forward per token (no cache).
    Recompute,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize an OBJ mesh into an MTOK stream
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Grid resolution per axis
        #[arg(long, default_value_t = 128)]
        quant_level: u32,
    },
    /// Reconstruct an OBJ mesh from an MTOK stream
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Replay MTOK files through the ordering machine; exit 0 iff all pass
    Validate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Fraction of the vocabulary the ordering machine prunes, per grid
    Stats {
        /// OBJ files or dataset directories
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Comma-separated grid resolutions
        #[arg(long, default_value = "128,1024")]
        quant_levels: String,
        /// CSV destination (stdout when omitted)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample an oriented point cloud from a mesh surface into PLY
    SamplePoints {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2048)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop points invisible from outside (ray-cast check)
        #[arg(long)]
        visibility: bool,
        /// Keep exactly K points by farthest-point sampling
        #[arg(long)]
        fps: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        noise_pos: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_normal: f64,
        #[arg(long, default_value_t = 0.0)]
        p_zero_normals: f64,
    },
    /// Write a procedural mesh corpus plus manifest.json
    GenDataset {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated family filter (box, cylinder, icosphere,
        /// extruded_polygon, union_of_boxes, torus)
        #[arg(long)]
        families: Option<String>,
    },
    /// Train a model on a dataset directory; writes model.ckpt,
    /// metrics.csv and the resolved config
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Training shuffle/batch seed
        #[arg(long)]
        seed: Option<u64>,
        /// Attach the point-cloud/scalar conditioning encoder
        #[arg(long)]
        conditioned: Option<bool>,
        #[arg(long)]
        quant_level: Option<u32>,
    },
    /// Sample a mesh from a checkpoint (point-cloud conditioned when the
    /// checkpoint was trained that way)
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Conditioning cloud (PLY with normals)
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Requested face count; generation halts at twice this value
        #[arg(long)]
        faces: Option<u64>,
        #[arg(long)]
        quad_ratio: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dataset metrics: loss profile, reconstruction Chamfer, or
    /// long-context curves
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        mode: EvalMode,
        /// Mesh cap for chamfer mode
        #[arg(long, default_value_t = 50)]
        limit: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Token length for swa mode (multiple of 9)
        #[arg(long)]
        eval_length: Option<usize>,
    },
    /// Closed-form FLOP and cache-memory comparison across depth layouts
    CostModel {
        #[arg(long, default_value_t = 9216)]
        seq_len: usize,
        /// 0 means full attention (window = seq-len)
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 256)]
        ffn_hidden: usize,
        /// Semicolon-separated label=d0,d1,d2 entries
        #[arg(
            long,
            default_value = "plain-24=24,0,0;hg-8-8-8=8,8,8;hg-4-8-12=4,8,12"
        )]
        configs: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generation throughput at several lengths, with or without the
    /// rolling cache
    Bench {
        /// Model checkpoint; a fresh random model is used when omitted
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        mode: BenchMode,
        /// Comma-separated token lengths (defaults depend on mode)
        #[arg(long)]
        lengths: Option<String>,
        /// Tokens timed at the tail of each length
        #[arg(long, default_value_t = 64)]
        probe: usize,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::ObjParse { .. } => "obj_parse",
        Error::EmptyMesh => "empty_mesh",
        Error::InvalidMesh(_) => "invalid_mesh",
        Error::CoordinateOutOfRange { .. } => "coordinate_out_of_range",
        Error::Framing(_) => "framing",
        Error::TokenRejected { .. } => "token_rejected",
        Error::DegenerateDistribution => "degenerate_distribution",
        Error::Config(_) => "config",
        Error::Shape(_) => "shape",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        Error::Checkpoint(_) => "checkpoint",
        Error::Ply(_) => "ply",
        Error::Io(_) => "io",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Io(_) => 3,
        Error::NonFiniteLoss { .. } | Error::DegenerateDistribution => 5,
        _ => 4,
    }
}

/// Record a flag override in the resolved-config flag map and apply it.
fn merge<T: Copy + ToString>(
    flags: &mut BTreeMap<String, String>,
    name: &str,
    value: Option<T>,
    slot: &mut T,
) {
    if let Some(v) = value {
        flags.insert(name.to_string(), v.to_string());
        *slot = v;
    }
}

fn parse_levels(text: &str) -> Result<Vec<u32>, Error> {
    text.split(',')
        .map(|x| x.trim().parse::<u32>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("bad quant level list: {e}")))
}

fn run(cmd: Cmd, threads: usize) -> Result<(), Error> {
    match cmd {
        Cmd::Encode {
            input,
            output,
            quant_level,
        } => ops::cmd_encode(&input, &output, quant_level),
        Cmd::Decode { input, output } => ops::cmd_decode(&input, &output),
        Cmd::Validate { inputs } => ops::cmd_validate(&inputs),
        Cmd::Stats {
            inputs,
            quant_levels,
            output,
        } => ops::cmd_stats(&inputs, &parse_levels(&quant_levels)?, output.as_deref()),
        Cmd::SamplePoints {
            input,
            output,
            count,
            seed,
            visibility,
            fps,
            noise_pos,
            noise_normal,
            p_zero_normals,
        } => ops::cmd_sample_points(
            &input,
            &output,
            count,
            seed,
            visibility,
            fps,
            noise_pos,
            noise_normal,
            p_zero_normals,
        ),
        Cmd::GenDataset {
            output_dir,
            config,
            count,
            seed,
            families,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            let mut flags = BTreeMap::new();
            merge(&mut flags, "count", count, &mut cfg.data.count);
            merge(&mut flags, "seed", seed, &mut cfg.data.seed);
            if let Some(f) = families {
                flags.insert("families".into(), f.clone());
                cfg.data.families = f.split(',').map(|s| s.trim().to_string()).collect();
            }
            ops::cmd_gen_dataset(&output_dir, &cfg, &flags)
        }
        Cmd::Train {
            data,
            output_dir,
            config,
            steps,
            seed,
            conditioned,
            quant_level,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            let mut flags = BTreeMap::new();
            merge(&mut flags, "steps", steps, &mut cfg.training.steps);
            merge(&mut flags, "seed", seed, &mut cfg.training.seed);
            merge(&mut flags, "conditioned", conditioned, &mut cfg.model.conditioned);
            merge(&mut flags, "quant-level", quant_level, &mut cfg.data.quant_level);
            ops::cmd_train(&data, &output_dir, &cfg, &flags)
        }
        Cmd::Generate {
            checkpoint,
            output,
            points,
            config,
            faces,
            quad_ratio,
            temperature,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            let mut flags = BTreeMap::new();
            merge(&mut flags, "faces", faces, &mut cfg.sampling.faces);
            merge(&mut flags, "quad-ratio", quad_ratio, &mut cfg.sampling.quad_ratio);
            merge(&mut flags, "temperature", temperature, &mut cfg.sampling.temperature);
            merge(&mut flags, "seed", seed, &mut cfg.sampling.seed);
            ops::cmd_generate(&checkpoint, &output, points.as_deref(), &cfg, &flags)
        }
        Cmd::Eval {
            checkpoint,
            data,
            output_dir,
            mode,
            limit,
            config,
            eval_length,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            let mut flags = BTreeMap::new();
            merge(&mut flags, "eval-length", eval_length, &mut cfg.eval.eval_length);
            match mode {
                EvalMode::PplProfile => {
                    ops::cmd_eval_ppl(&checkpoint, &data, &output_dir, &cfg, &flags)
                }
                EvalMode::Chamfer => {
                    ops::cmd_eval_chamfer(&checkpoint, &data, &output_dir, limit, &cfg, &flags)
                }
                EvalMode::Swa => ops::cmd_eval_swa(&checkpoint, &data, &output_dir, &cfg, &flags),
            }
        }
        Cmd::CostModel {
            seq_len,
            window,
            channels,
            ffn_hidden,
            configs,
            output,
        } => ops::cmd_cost_model(seq_len, window, channels, ffn_hidden, &configs, output.as_deref()),
        Cmd::Bench {
            checkpoint,
            mode,
            lengths,
            probe,
            output,
            config,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            ops::cmd_bench(
                checkpoint.as_deref(),
                matches!(mode, BenchMode::Rolling),
                lengths.as_deref(),
                probe,
                threads,
                output.as_deref(),
                &cfg,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let cmd = cli.cmd;
    meshgen_core::par::with_threads(threads, move || match run(cmd, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error code={} kind={}: {e}", exit_code(&e), kind(&e));
            ExitCode::from(exit_code(&e))
        }
    })
}
