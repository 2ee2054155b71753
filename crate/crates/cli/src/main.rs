use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plaindet::attention::MapFormat;
use plaindet::cost::{self, RpbShape};
use plaindet::train::{self, AblationGrid, Dataset, RunConfig, TrainState};
use plaindet::{synth, Error, Model};

#[derive(Parser, Debug)]
#[command(name = "plaindet", version, about = "Plain-backbone detection transformer on synthetic scenes")]
struct Cli {
    /// Run configuration JSON; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (annotations.jsonl, optionally PGM images).
    Generate {
        /// Number of samples.
        #[arg(long, default_value_t = 512)]
        n: u64,
        /// Also write images/NNNNNN.pgm.
        #[arg(long)]
        images: bool,
    },
    /// Train a model and write checkpoint, metrics and loss log.
    Train {
        /// Overrides optim.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        /// Path to a checkpoint.json.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every arm of an ablation grid over its seeds.
    Ablate {
        /// Grid JSON (`{"arms": [...], "seeds": [...]}`); defaults to the recipe ladder.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Overrides optim.epochs for every arm.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// BoxRPB FLOP and activation counts per shape.
    Flops {
        /// Extra shape as `K,H,W,M,hidden`; repeatable.
        #[arg(long = "shape", value_parser = parse_shape)]
        shapes: Vec<RpbShape>,
        /// Leave out the built-in reference and toy rows.
        #[arg(long)]
        no_default_shapes: bool,
    },
    /// Dump cross-attention maps of a checkpoint for one sample.
    DumpAttn {
        /// Path to a checkpoint.json.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample index in the configured synthetic stream.
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Map file format: pgm, csv or both.
        #[arg(long, default_value = "pgm")]
        format: MapFormat,
    },
}

fn parse_shape(s: &str) -> Result<RpbShape, String> {
    let v: Vec<u64> = s
        .split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [k, h, w, m, hidden] => Ok(RpbShape { k, h, w, m, hidden }),
        _ => Err("expected K,H,W,M,hidden".into()),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.out.clone().ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn write(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> CmdResult {
    write(&dir.join("config.json"), &(cfg.to_json() + "\n"))
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn run(cli: &Cli) -> CmdResult {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate { n, images } => {
            let out = require_out(&cfg)?;
            let path = synth::export(&cfg.data, *n, &out, *images)?;
            write_config(&out, &cfg)?;
            eprintln!("wrote {n} samples to {}", path.display());
        }
        Command::Train { epochs, resume } => {
            if let Some(e) = epochs {
                cfg.optim.epochs = *e;
            }
            let out = require_out(&cfg)?;
            let state = if *resume {
                TrainState::load(&out, &cfg)?
            } else {
                TrainState::fresh(&cfg)?
            };
            let outcome = train::train_from(&cfg, state)?;
            for e in &outcome.history {
                eprintln!(
                    "epoch {:>3} step {:>6} lr {:.1e} loss {:.4} AP {:.4} AP50 {:.4} AP75 {:.4}",
                    e.epoch, e.step, e.lr, e.train_loss, e.ap, e.ap50, e.ap75
                );
            }
            print!("{}", to_json(&outcome.metrics));
        }
        Command::Eval { checkpoint } => {
            let (model, _) = Model::load(checkpoint)?;
            cfg.pipeline = model.cfg.clone();
            cfg.validate()?;
            let metrics = train::evaluate(&model, &Dataset::eval(&cfg)?)?;
            if let Some(out) = &cfg.out {
                write_config(out, &cfg)?;
                write(&out.join("metrics.json"), &to_json(&metrics))?;
            }
            print!("{}", to_json(&metrics));
        }
        Command::Ablate { grid, epochs } => {
            if let Some(e) = epochs {
                cfg.optim.epochs = *e;
            }
            let out = require_out(&cfg)?;
            let grid: AblationGrid = match grid {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
                }
                None => AblationGrid::recipe_ladder(),
            };
            for arm in &grid.arms {
                arm.apply(&cfg, 0).validate()?;
            }
            write_config(&out, &cfg)?;
            write(&out.join("grid.json"), &to_json(&grid))?;
            let report = train::run_ablation(&cfg, &grid, Some(&out));
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let md = report.to_markdown();
            write(&out.join("ablation.md"), &md)?;
            write(&out.join("ablation.csv"), &report.to_csv())?;
            print!("{md}");
        }
        Command::Flops {
            shapes,
            no_default_shapes,
        } => {
            let mut rows = Vec::new();
            if !no_default_shapes {
                rows.extend([RpbShape::REFERENCE, RpbShape::TOY]);
            }
            rows.extend(shapes.iter().copied());
            let reports: Vec<_> = rows
                .into_iter()
                .flat_map(|s| {
                    let (n, d) = cost::boxrpb_flops(s);
                    [n, d]
                })
                .collect();
            let csv = cost::to_csv(&reports);
            if let Some(out) = &cfg.out {
                write_config(out, &cfg)?;
                write(&out.join("flops.csv"), &csv)?;
            }
            print!("{csv}");
        }
        Command::DumpAttn { checkpoint, index, format } => {
            let out = require_out(&cfg)?;
            let (model, _) = Model::load(checkpoint)?;
            cfg.pipeline = model.cfg.clone();
            cfg.validate()?;
            let sample = synth::generate(&cfg.data, *index)?;
            let dump = train::dump_attention(&model, &sample.image, *index, &out, *format)?;
            write_config(&out, &cfg)?;
            eprintln!(
                "wrote {} maps, mean inside-box mass {:.4}",
                dump.files.len(),
                dump.mean_inside_box_mass
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
