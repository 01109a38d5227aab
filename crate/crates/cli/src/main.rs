use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nbv_refine::config::RunConfig;
use nbv_refine::eval::{compare_reports, markdown_table, parse_ranges, MetricsReport};
use nbv_refine::io::{read_detections, read_json, resolve, write_detections, write_json};
use nbv_refine::nn::load_checkpoint;
use nbv_refine::pipeline::{evaluate_records, generate_dataset, refine_records, train_on_dataset, Dataset};
use nbv_refine::refine::Solver;
use nbv_refine::{blob::atomic_write, Error};

#[derive(Parser)]
#[command(name = "nbv-refine", version, about = "Refine 3D bounding boxes with a point-denoising diffusion model")]
struct Cli {
    /// JSON file of overrides merged over the profile preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val scenes, val detections and a split manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train the denoiser on a dataset's train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from `<out>/last.ckpt` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Refine detections with a trained checkpoint.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Detections to refine; defaults to the dataset's val detections.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        shape_weight: Option<f64>,
        #[arg(long)]
        context: Option<f64>,
        /// Target size as `w,l,h`.
        #[arg(long, value_parser = parse_triple)]
        mean_size: Option<[f64; 3]>,
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
        /// Starting noise range as `low,high`.
        #[arg(long, value_parser = parse_pair)]
        sigma_range: Option<[f64; 2]>,
        /// Directory for one trace CSV per refined box.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate detections against the val split.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Depth ranges, e.g. `0-30,30-50,50-80`.
        #[arg(long)]
        ranges: Option<String>,
        /// AP IoU thresholds, e.g. `0.5,0.7`.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Render metrics reports as a markdown table with deltas.
    Report {
        /// `metrics.json` files; the first is the baseline.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Display names, comma separated.
        #[arg(long, value_delimiter = ',')]
        names: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Heun,
    Euler,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected {N} comma-separated numbers"))
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    parse_floats(s)
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    parse_floats(s)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::OutputExists(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json_str(&text)?
        }
        None => RunConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg.resolved())
}

fn echo_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.config.json"))
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli)?;
    let root = cfg.output_root();
    match cli.command {
        Command::GenData { out, train, val, force } => {
            if let Some(n) = train {
                cfg.scenes.train = n;
            }
            if let Some(n) = val {
                cfg.scenes.val = n;
            }
            let out = resolve(&root, &out.to_string_lossy());
            let m = generate_dataset(&cfg, &out, force)?;
            log::info!("wrote {} train and {} val scenes to {}", m.train.len(), m.val.len(), out.display());
        }
        Command::Train { data, out, steps, resume } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            let out = resolve(&root, &out.to_string_lossy());
            let data = Dataset::open(&data)?;
            let res = train_on_dataset(&cfg, &data, &out, resume)?;
            if let Some(last) = res.curve.last() {
                log::info!("finished at step {} with loss {:.5}", last.step, last.loss);
            }
        }
        Command::Refine {
            checkpoint,
            data,
            detections,
            out,
            steps,
            shape_weight,
            context,
            mean_size,
            solver,
            sigma_range,
            trace,
        } => {
            let r = &mut cfg.refine;
            if let Some(v) = steps {
                r.steps = v;
            }
            if let Some(v) = shape_weight {
                r.shape_weight = v;
            }
            if let Some(v) = context {
                r.context = v;
            }
            if mean_size.is_some() {
                r.mean_size = mean_size;
            }
            if let Some(v) = solver {
                r.solver = match v {
                    SolverArg::Heun => Solver::Heun,
                    SolverArg::Euler => Solver::Euler,
                };
            }
            if let Some(v) = sigma_range {
                r.sigma_range = v;
            }
            cfg.validate()?;
            let data = Dataset::open(&data)?;
            let dets = match &detections {
                Some(p) => read_detections(p)?,
                None => data.val_detections()?,
            };
            let scenes = data.val_scenes()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let out = resolve(&root, &out.to_string_lossy());
            let trace = trace.map(|t| resolve(&root, &t.to_string_lossy()));
            let refined = refine_records(&ckpt.weights, &scenes, &dets, &cfg.refine, trace.as_deref())?;
            write_detections(&out, &refined)?;
            write_json(&echo_path(&out), &cfg)?;
            log::info!("refined {} detections into {} boxes", dets.len(), refined.len());
        }
        Command::Eval {
            pred,
            data,
            out,
            ranges,
            thresholds,
        } => {
            if let Some(r) = ranges {
                cfg.eval.ranges = parse_ranges(&r)?;
            }
            if let Some(t) = thresholds {
                cfg.eval.thresholds = t;
            }
            cfg.eval.validate()?;
            let data = Dataset::open(&data)?;
            let scenes = data.val_scenes()?;
            let records = read_detections(&pred)?;
            let report = evaluate_records(&scenes, &records, &cfg.eval)?;
            let out = resolve(&root, &out.to_string_lossy());
            write_json(&out.join("metrics.json"), &report)?;
            atomic_write(&out.join("metrics.csv"), report.to_csv().as_bytes())?;
            let md = markdown_table(&[("detections".into(), report.clone())])?;
            atomic_write(&out.join("metrics.md"), md.as_bytes())?;
            write_json(&out.join("config.json"), &cfg)?;
        }
        Command::Report { reports, names, out } => {
            let loaded = reports
                .iter()
                .map(|p| read_json::<MetricsReport>(p))
                .collect::<Result<Vec<_>, _>>()?;
            let names = names.unwrap_or_else(|| {
                reports
                    .iter()
                    .map(|p| {
                        p.parent()
                            .and_then(|d| d.file_name())
                            .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
                    })
                    .collect()
            });
            if names.len() != loaded.len() {
                return Err(Error::Config(format!("{} names for {} reports", names.len(), loaded.len())));
            }
            let named: Vec<(String, MetricsReport)> = names.into_iter().zip(loaded).collect();
            let md = markdown_table(&named)?;
            let out = resolve(&root, &out.to_string_lossy());
            atomic_write(&out.join("report.md"), md.as_bytes())?;
            if named.len() >= 2 {
                let mut csv = String::from("metric,before,after,improvement\n");
                for d in compare_reports(&named[0].1, &named[named.len() - 1].1)? {
                    csv.push_str(&format!("{},{},{},{}\n", d.metric, d.before, d.after, d.improvement));
                }
                atomic_write(&out.join("deltas.csv"), csv.as_bytes())?;
            }
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
