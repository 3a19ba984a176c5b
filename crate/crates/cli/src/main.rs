mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mame_core::bench::{estimate_flops, measure_throughput, ArchSpec};
use mame_core::data::{generate, Dataset};
use mame_core::model::{argmax, ForwardOptions, MergeSchedule};
use mame_core::train::{evaluate, finetune, sweep, train, SweepAxis, SweepOptions};
use mame_core::viz::{render, RenderKind, RenderSpec, TraceFile};
use mame_core::{oracle, Model32};
use serde::Serialize;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mame", version, about = "Δ-aware token merging lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train and validation splits into a directory.
    GenData,
    /// Train a model without merging, optionally fine-tuning with merging.
    Train {
        /// Dataset directory; defaults to `paths.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fine-tune with the merge schedule for a fifth of the epochs.
        #[arg(long)]
        finetune: bool,
    },
    /// Evaluate a checkpoint on the validation split under the schedule.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write merge traces of the first N validation samples to `--out`.
        #[arg(long, value_name = "N")]
        trace: Option<usize>,
    },
    /// Evaluate one schedule axis over a list of values; CSV output.
    Sweep {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; defaults to the axis' standard set.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Also time each variant over this many validation samples.
        #[arg(long, default_value_t = 0)]
        throughput_batch: usize,
    },
    /// Estimate FLOPs, and measure throughput when a checkpoint is given.
    Bench {
        /// `vim-tiny` or `toy` (the configured model).
        #[arg(long, default_value = "toy")]
        arch: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Render a merge map or heatmap from a trace file.
    Viz {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "merge_map")]
        kind: RenderKind,
        /// Index into the file's merge layers; defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 16)]
        cell: usize,
    },
    /// Run every oracle suite.
    Selftest,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<mame_core::Error> for Failure {
    fn from(e: mame_core::Error) -> Self {
        match e {
            mame_core::Error::Config(_) | mame_core::Error::UnknownTag { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

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

fn run(cli: Cli) -> Outcome {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    eprintln!(
        "{}",
        serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let out = cli.overrides.out.clone();
    match cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::Train { data, finetune } => train_cmd(&cfg, data, finetune, out),
        Command::Eval { model, data, trace } => eval_cmd(&cfg, model, data, trace, out),
        Command::Sweep {
            model,
            data,
            axis,
            values,
            throughput_batch,
        } => sweep_cmd(&cfg, model, data, axis, values, throughput_batch, out),
        Command::Bench {
            arch,
            model,
            data,
            batch,
            reps,
        } => bench_cmd(&cfg, &arch, cli.overrides.layers.as_deref(), model, data, batch, reps, out),
        Command::Viz {
            trace,
            kind,
            layer,
            cell,
        } => viz_cmd(&cfg, &trace, kind, layer, cell, out),
        Command::Selftest => selftest(&cfg),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => {
            fs::write(p, text)?;
            log::info!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn print_json(v: &impl Serialize) -> Outcome {
    let s = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn load_split(dir: &Path, name: &str) -> std::result::Result<Dataset, Failure> {
    let path = dir.join(format!("{name}.bin"));
    Dataset::load(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> std::result::Result<Model32, Failure> {
    Model32::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Outcome {
    let dir = out.unwrap_or_else(|| cfg.paths.data.clone());
    fs::create_dir_all(&dir)?;
    let (train, val) = generate(&cfg.data)?;
    train.save(dir.join("train.bin"))?;
    val.save(dir.join("val.bin"))?;
    let spec = serde_json::to_string_pretty(&cfg.data).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(dir.join("spec.json"), spec)?;
    log::info!("{} train / {} val samples in {}", train.len(), val.len(), dir.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, data: Option<PathBuf>, with_finetune: bool, out: Option<PathBuf>) -> Outcome {
    let dir = data.unwrap_or_else(|| cfg.paths.data.clone());
    let (train_set, val) = (load_split(&dir, "train")?, load_split(&dir, "val")?);
    let mut model = Model32::new(cfg.model.clone(), cfg.seed)?;
    let mut report = train(&mut model, &train_set, Some(&val), &cfg.train, &MergeSchedule::empty())?;
    if with_finetune {
        let ft = finetune(&mut model, &train_set, Some(&val), &cfg.train, &cfg.schedule)?;
        report.metrics.extend(ft.metrics);
    }
    let path = out.unwrap_or_else(|| cfg.paths.model.clone());
    model.save(&path)?;
    let metrics = path.with_extension("metrics.csv");
    fs::write(&metrics, report.to_csv())?;
    log::info!("saved {} and {}", path.display(), metrics.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    accuracy: f64,
    loss: f64,
    n: usize,
    tokens_removed: usize,
    gflops: f64,
    baseline_gflops: f64,
}

fn eval_cmd(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    trace: Option<usize>,
    out: Option<PathBuf>,
) -> Outcome {
    let model = load_model(&model.unwrap_or_else(|| cfg.paths.model.clone()))?;
    let val = load_split(&data.unwrap_or_else(|| cfg.paths.data.clone()), "val")?;
    let res = evaluate(&model, &val, &cfg.schedule, cfg.seed)?;
    let flops = estimate_flops(&ArchSpec::from(&model.config), &cfg.schedule)?;
    if let Some(n) = trace {
        let dir = out.ok_or_else(|| Failure::Usage("--trace needs --out DIR".into()))?;
        fs::create_dir_all(&dir)?;
        for i in 0..n.min(val.len()) {
            let opts = ForwardOptions {
                collect_trace: true,
                seed: cfg.seed,
            };
            let fwd = model.forward(&val.grid(i), &cfg.schedule, opts)?;
            let file = TraceFile {
                grid_side: model.config.grid_side,
                sample: i,
                label: val.label(i),
                predicted: argmax(fwd.logits.data()),
                traces: fwd.traces,
            };
            file.save(dir.join(format!("trace_{i:04}.json")))?;
        }
        log::info!("wrote {} traces to {}", n.min(val.len()), dir.display());
    }
    print_json(&EvalSummary {
        accuracy: res.accuracy,
        loss: res.loss,
        n: res.n,
        tokens_removed: flops.layers.iter().map(|l| l.removed).sum(),
        gflops: flops.gflops(),
        baseline_gflops: flops.baseline as f64 * 1e-9,
    })
}

fn sweep_cmd(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    axis: SweepAxis,
    values: Vec<String>,
    throughput_batch: usize,
    out: Option<PathBuf>,
) -> Outcome {
    let model = load_model(&model.unwrap_or_else(|| cfg.paths.model.clone()))?;
    let val = load_split(&data.unwrap_or_else(|| cfg.paths.data.clone()), "val")?;
    let values = if values.is_empty() { axis.default_values() } else { values };
    let opts = SweepOptions {
        seed: cfg.seed,
        throughput_batch,
        threads: cfg.threads,
        ..Default::default()
    };
    let report = sweep(&model, &val, &cfg.schedule, axis, &values, &opts)?;
    eprint!("{}", report.to_table());
    write_or_print(out.as_deref(), &report.to_csv())
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd(
    cfg: &RunConfig,
    arch: &str,
    layers: Option<&str>,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    batch: usize,
    reps: usize,
    out: Option<PathBuf>,
) -> Outcome {
    let spec = match arch {
        "vim-tiny" => ArchSpec::vim_tiny(),
        "toy" => ArchSpec::from(&cfg.model),
        other => return Err(Failure::Usage(format!("unknown arch {other:?}; use vim-tiny or toy"))),
    };
    // placement names resolve against the benchmarked depth
    let schedule = match layers {
        Some(l) => cfg.schedule.with_layers(&config::parse_layers(l, spec.depth)?)?,
        None => cfg.schedule.clone(),
    };
    let report = estimate_flops(&spec, &schedule)?;
    eprint!("{}", report.to_table());
    if let Some(path) = model {
        let model = load_model(&path)?;
        let val = load_split(&data.unwrap_or_else(|| cfg.paths.data.clone()), "val")?;
        let grids: Vec<_> = (0..batch.min(val.len())).map(|i| val.grid::<f32>(i)).collect();
        let base = measure_throughput(&model, &grids, &MergeSchedule::empty(), 1, reps, cfg.threads)?;
        let merged = measure_throughput(&model, &grids, &schedule, 1, reps, cfg.threads)?;
        eprintln!(
            "throughput {:.1} img/s vs {:.1} without merging ({:.2}x)",
            merged.images_per_sec,
            base.images_per_sec,
            merged.images_per_sec / base.images_per_sec
        );
    }
    write_or_print(out.as_deref(), &report.to_csv())
}

fn viz_cmd(
    cfg: &RunConfig,
    trace: &Path,
    kind: RenderKind,
    layer: Option<usize>,
    cell: usize,
    out: Option<PathBuf>,
) -> Outcome {
    let file = TraceFile::load(trace).map_err(|e| Failure::Runtime(format!("{}: {e}", trace.display())))?;
    if file.traces.is_empty() {
        return Err(Failure::Runtime(format!("{} holds no merge layers", trace.display())));
    }
    let idx = layer.unwrap_or(file.traces.len() - 1);
    let t = file
        .traces
        .get(idx)
        .ok_or_else(|| Failure::Usage(format!("layer index {idx} of {}", file.traces.len())))?;
    let spec = RenderSpec {
        grid_side: file.grid_side,
        cell,
        palette_seed: cfg.seed,
        kind,
    };
    let bytes = render(t, &spec)?;
    let path = out.unwrap_or_else(|| trace.with_extension(format!("{}.{}", kind.tag(), kind.extension())));
    fs::write(&path, bytes)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn selftest(cfg: &RunConfig) -> Outcome {
    let reports = oracle::selftest(cfg.seed)?;
    for r in &reports {
        println!("{}", r.line());
    }
    match reports.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!("{n} oracle suites failed"))),
    }
}
