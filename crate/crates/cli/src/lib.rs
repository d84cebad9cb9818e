//! `sff` command line: train, eval, compare, sweep and inspect.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sff_core::data::Dataset;
use sff_core::model::{peak_activation_estimate, BlockGraph, Preset, TrainMode};
use sff_core::trainer::{
    evaluate, load_data, read_checkpoint, run_experiment, DatasetFormat, Summary, TrainConfig, METRICS_HEADER,
    SWEEP_LR, SWEEP_WD,
};
use sff_core::Exec;

#[derive(Debug, Parser)]
#[command(name = "sff", version, about = "Block-local goodness training for small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration over one or more seeds.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Side-by-side table of finished runs.
    Compare(CompareArgs),
    /// Grid search over learning rates and weight decay.
    Sweep(SweepArgs),
    /// Describe a checkpoint.
    Inspect(InspectArgs),
}

/// Flags mirroring the config keys. Anything given here overrides the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with flat config keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub head_kernel: Option<usize>,
    #[arg(long)]
    pub dataset_format: Option<DatasetFormat>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long)]
    pub test_subsample: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// One or more seeds, comma separated or repeated.
    #[arg(long = "seed", alias = "seeds", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_classifier: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub plateau_patience: Option<usize>,
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    pub exclude_first_block: bool,
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub account_memory: bool,
    #[arg(long)]
    pub pipelined: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "idx")]
    pub dataset_format: DatasetFormat,
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// `test` or `train`.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub exclude_first_block: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Output directories of `train` runs.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// Also write the table here as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long = "grid-lr", value_delimiter = ',')]
    pub grid_lr: Option<Vec<f64>>,
    /// Classifier learning rates (BP); tied to the feature rate when absent.
    #[arg(long = "grid-lr-classifier", value_delimiter = ',')]
    pub grid_lr_classifier: Option<Vec<f64>>,
    #[arg(long = "grid-wd", value_delimiter = ',')]
    pub grid_wd: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    /// Batch size for the memory estimate.
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
}

impl ConfigArgs {
    /// File values (or defaults) with flags applied on top.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone().into();
                }
            )*};
        }
        set!(mode, preset, head_kernel, dataset_format, data_dir, val_fraction, seeds, epochs, batch_size, lr);
        set!(weight_decay, plateau_patience, plateau_factor, early_stop_patience, out_dir);
        set!(widths, subsample, test_subsample, lr_classifier, checkpoint_in, checkpoint_out);
        c.exclude_first_block |= self.exclude_first_block;
        c.deterministic |= self.deterministic;
        c.account_memory |= self.account_memory;
        c.pipelined |= self.pipelined;
        c.validate()?;
        Ok(c)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a).map(drop),
        Command::Sweep(a) => cmd_sweep(&a).map(drop),
        Command::Inspect(a) => cmd_inspect(&a).map(|s| print!("{s}")),
    }
}

/// Check that a run directory holds everything `train` promises.
pub fn validate_artifacts(out_dir: &Path) -> Result<Summary> {
    let summary = read_summary(out_dir)?;
    for s in &summary.seeds {
        let dir = out_dir.join(format!("seed-{}", s.seed));
        let csv = fs::read_to_string(dir.join("metrics.csv")).with_context(|| format!("{}", dir.display()))?;
        ensure!(
            csv.lines().next() == Some(METRICS_HEADER),
            "{}: unexpected metrics header",
            dir.display()
        );
        read_checkpoint(&dir.join("model.ckpt"))?;
    }
    Ok(summary)
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let p = dir.join("summary.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

pub fn cmd_train(args: &TrainArgs) -> Result<Summary> {
    let cfg = args.cfg.resolve()?;
    run_experiment(&cfg)?;
    let summary = validate_artifacts(&cfg.out_dir)?;
    let a = &summary.aggregate;
    println!(
        "{} {}: test accuracy {:.2}% ± {:.2} over {} seed(s), artifacts in {}",
        cfg.mode,
        cfg.preset,
        100.0 * a.test_accuracy.mean,
        100.0 * a.test_accuracy.std,
        summary.seeds.len(),
        cfg.out_dir.display()
    );
    Ok(summary)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let mut graph: BlockGraph<f32> = ck.build()?;
    let cfg = TrainConfig {
        dataset_format: args.dataset_format,
        data_dir: args.data_dir.clone(),
        ..TrainConfig::default()
    };
    let (train, test) = load_data(&cfg)?;
    let mut ds: Dataset = match args.split.as_str() {
        "test" => test,
        "train" => train,
        other => bail!("unknown split `{other}`"),
    };
    if let Some(n) = &ck.descriptor.input_norm {
        n.apply(&mut ds)?;
    }
    let r = evaluate(&mut graph, &ds, args.batch_size, Exec::Parallel, usize::from(args.exclude_first_block))?;
    println!("accuracy {:.4} on {} samples", r.accuracy, ds.len());
    for (b, a) in r.block_accuracy.iter().enumerate() {
        println!("block {b}: {a:.4}");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: String,
    pub mode: TrainMode,
    pub preset: Preset,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub seconds: f64,
    pub time_ratio: f64,
    pub peak_bytes: usize,
}

/// Accuracy, time relative to the first BP run (or the first run when none
/// is BP) and peak memory for each run directory.
pub fn compare_rows(runs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    ensure!(runs.len() >= 2, "compare needs at least two runs");
    let summaries = runs.iter().map(|r| read_summary(r)).collect::<Result<Vec<_>>>()?;
    let reference = summaries
        .iter()
        .position(|s| s.config.mode == TrainMode::Bp)
        .unwrap_or(0);
    let base = summaries[reference].aggregate.wall_seconds.mean;
    for (r, s) in runs.iter().zip(&summaries) {
        ensure!(
            s.config.preset == summaries[reference].config.preset,
            "{}: preset {} differs from {}",
            r.display(),
            s.config.preset,
            summaries[reference].config.preset
        );
    }
    Ok(runs
        .iter()
        .zip(&summaries)
        .map(|(r, s)| CompareRow {
            run: r.display().to_string(),
            mode: s.config.mode,
            preset: s.config.preset,
            acc_mean: s.aggregate.test_accuracy.mean,
            acc_std: s.aggregate.test_accuracy.std,
            seconds: s.aggregate.wall_seconds.mean,
            time_ratio: s.aggregate.wall_seconds.mean / base,
            peak_bytes: s.aggregate.peak_bytes,
        })
        .collect())
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("run,mode,preset,acc_mean,acc_std,seconds,time_ratio,peak_bytes\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.run, r.mode, r.preset, r.acc_mean, r.acc_std, r.seconds, r.time_ratio, r.peak_bytes
        );
    }
    s
}

pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<CompareRow>> {
    let rows = compare_rows(&args.runs)?;
    println!(
        "{:<32} {:<5} {:<12} {:>16} {:>10} {:>8} {:>12}",
        "run", "mode", "preset", "accuracy %", "seconds", "× time", "peak bytes"
    );
    for r in &rows {
        println!(
            "{:<32} {:<5} {:<12} {:>9.2} ± {:<4.2} {:>10.1} {:>8.3} {:>12}",
            r.run,
            r.mode,
            r.preset,
            100.0 * r.acc_mean,
            100.0 * r.acc_std,
            r.seconds,
            r.time_ratio,
            r.peak_bytes
        );
    }
    if let Some(p) = &args.csv {
        fs::write(p, compare_csv(&rows)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub lr_classifier: f64,
    pub weight_decay: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub dir: PathBuf,
}

/// One training run per grid point, ranked by mean best validation
/// accuracy. Writes `sweep.csv` under the output directory.
pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepPoint>> {
    let base = args.cfg.resolve()?;
    let lrs = args.grid_lr.clone().unwrap_or_else(|| SWEEP_LR.to_vec());
    let wds = args.grid_wd.clone().unwrap_or_else(|| SWEEP_WD.to_vec());
    let lrcs: Vec<Option<f64>> = match &args.grid_lr_classifier {
        Some(v) => v.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    ensure!(!lrs.is_empty() && !wds.is_empty(), "empty sweep grid");
    let mut points = Vec::new();
    for &lr in &lrs {
        for &lrc in &lrcs {
            for &wd in &wds {
                let mut name = format!("lr{lr:e}_wd{wd:e}");
                if let Some(c) = lrc {
                    let _ = write!(name, "_lrc{c:e}");
                }
                let cfg = TrainConfig {
                    lr,
                    lr_classifier: lrc,
                    weight_decay: wd,
                    out_dir: base.out_dir.join(&name),
                    ..base.clone()
                };
                cfg.validate()?;
                let (summary, _) = run_experiment(&cfg)?;
                validate_artifacts(&cfg.out_dir)?;
                points.push(SweepPoint {
                    lr,
                    lr_classifier: cfg.lr_classifier(),
                    weight_decay: wd,
                    val_accuracy: summary.aggregate.best_val_accuracy.mean,
                    test_accuracy: summary.aggregate.test_accuracy.mean,
                    dir: cfg.out_dir.clone(),
                });
            }
        }
    }
    points.sort_by(|a, b| b.val_accuracy.total_cmp(&a.val_accuracy));
    let mut csv = String::from("rank,lr,lr_classifier,weight_decay,val_accuracy,test_accuracy,dir\n");
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            i + 1,
            p.lr,
            p.lr_classifier,
            p.weight_decay,
            p.val_accuracy,
            p.test_accuracy,
            p.dir.display()
        );
    }
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(points)
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<String> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let graph: BlockGraph<f32> = ck.build()?;
    let d = &ck.descriptor;
    let mut s = String::new();
    writeln!(s, "format version {}", d.version)?;
    writeln!(s, "preset {}  mode {}  classes {}", d.spec.preset, d.spec.mode, d.spec.classes)?;
    writeln!(s, "input {:?}  widths {:?}  head kernel {}", d.spec.input, d.spec.widths, d.spec.head_kernel)?;
    writeln!(s, "init {}  seed {}  tensors {}", d.init, d.seed, d.tensors.len())?;
    for (b, block) in graph.blocks.iter().enumerate() {
        let head = block.head.as_ref().map_or(0, |h| h.param_count());
        writeln!(
            s,
            "block {b}: {} parameters ({} in head)",
            block.param_count(),
            head
        )?;
    }
    let cls: usize = graph.classifier.iter().map(|l| l.param_count()).sum();
    if cls > 0 {
        writeln!(s, "classifier: {cls} parameters")?;
    }
    writeln!(s, "total parameters {}", graph.count_params())?;
    writeln!(
        s,
        "estimated peak training bytes at batch {}: {}",
        args.batch_size,
        peak_activation_estimate(&graph, args.batch_size)?
    )?;
    Ok(s)
}
