//! `gad`: generate synthetic data, train, evaluate, dump attention and run
//! the verification suites.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gad_core::attention_dump::dump_attention;
use gad_core::backbone::PromptMode;
use gad_core::checkpoint::{load_checkpoint, Manifest};
use gad_core::config::RunConfig;
use gad_core::data::{generate_synthetic, Dataset, SampleMode, Split};
use gad_core::experiment::{prompt_ablation, render_table};
use gad_core::metrics::MetricReport;
use gad_core::model::{FrameInput, Model, ParameterCounts};
use gad_core::train::{
    evaluate_predictions, evaluate_split, read_predictions, run_training, write_predictions, DataSource,
    CHECKPOINT_DIR, PREDICTIONS_FILE,
};
use gad_core::verify::selftest;
use gad_core::Error;

const METRICS_FILE: &str = "metrics.json";
const ABLATION_TABLE: &str = "ablation.md";
const ABLATION_JSON: &str = "ablation.json";
/// Exit code when a verification suite fails.
const SELFTEST_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "gad", version, about = "Group activity detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint and per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a predictions file.
    Eval(EvalArgs),
    /// Write attention matrices and heat maps for one clip.
    DumpAttn(DumpArgs),
    /// Run gradient, assignment, metric and equivariance checks.
    Selftest,
    /// Train once per prompt mode and tabulate the results.
    PromptAblation(AblationArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptArg {
    None,
    Shallow,
    Deep,
}

impl From<PromptArg> for PromptMode {
    fn from(p: PromptArg) -> Self {
        match p {
            PromptArg::None => PromptMode::None,
            PromptArg::Shallow => PromptMode::Shallow,
            PromptArg::Deep => PromptMode::Deep,
        }
    }
}

/// Settings shared by commands that build a run configuration.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of precomputed patch grids used instead of the backbone.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Train prompts, group tokens, GCT and heads only.
    #[arg(long, conflicts_with = "full_ft")]
    frozen: bool,
    /// Train every parameter including the backbone.
    #[arg(long)]
    full_ft: bool,
    #[arg(long, value_enum)]
    prompt_mode: Option<PromptArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated IoU thresholds for evaluation.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}

impl RunArgs {
    fn base(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig, Error> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        if let Some(d) = &self.data {
            cfg.paths.dataset = d.clone();
        }
        if let Some(f) = &self.features {
            cfg.paths.features = Some(f.clone());
        }
        if self.frozen {
            cfg.model.backbone.frozen = true;
        }
        if self.full_ft {
            cfg.model.backbone.frozen = false;
        }
        if let Some(p) = self.prompt_mode {
            cfg.model.backbone.prompt_mode = p.into();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        if let Some(t) = &self.thresholds {
            cfg.thresholds = t.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML run configuration; its `data` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clips: Option<usize>,
    /// Dataset directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score this predictions file instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Run configuration, used with `--predictions` when there is no checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Directory for predictions and metrics files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::DumpAttn(a) => dump(a),
        Command::Selftest => Ok(run_selftest()),
        Command::PromptAblation(a) => ablation(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn generate(a: GenerateArgs) -> Result<ExitCode, Error> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    if let Some(c) = a.clips {
        cfg.data.clips = c;
    }
    if let Some(o) = a.out {
        cfg.paths.dataset = o;
    }
    cfg.validate()?;
    let start = Instant::now();
    let ds = generate_synthetic(&cfg.data)?;
    let root = &cfg.paths.dataset;
    create_dir(root)?;
    ds.save(root)?;
    cfg.echo(root)?;
    let train = ds.split_indices(Split::Train).len();
    println!(
        "wrote {} clips ({} train, {} val) to {} in {:.1}s",
        ds.len(),
        train,
        ds.len() - train,
        root.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode, Error> {
    let base = match (&a.run.config, &a.resume) {
        (None, Some(dir)) => load_checkpoint(dir)?.cfg,
        _ => a.run.base()?,
    };
    let cfg = a.run.apply(base)?;
    let out = cfg.paths.out.clone();
    create_dir(&out)?;
    let trainer = run_training(cfg, a.resume.as_deref(), std::io::stdout())?;
    let counts = Model::parameter_breakdown(&trainer.store);
    println!(
        "finished {} epochs; trainable {} of {} parameters; checkpoint {}",
        trainer.epoch,
        counts.trainable,
        counts.total,
        out.join(CHECKPOINT_DIR).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn print_report(report: &MetricReport) {
    for (t, m) in &report.group_map {
        println!("group mAP@{t}: {:.4}", m.map);
        let per_class: Vec<String> = m
            .per_class
            .iter()
            .enumerate()
            .map(|(c, ap)| match ap {
                Some(v) => format!("{c}={v:.4}"),
                None => format!("{c}=n/a"),
            })
            .collect();
        println!("  per-class AP@{t}: {}", per_class.join(" "));
    }
    println!("outlier mIoU: {:.4}", report.outlier_miou);
    println!("individual accuracy: {:.4}", report.individual_accuracy);
    println!("social accuracy: {:.4}", report.social_accuracy);
    println!("membership accuracy: {:.4}", report.membership_accuracy);
}

fn print_counts(c: &ParameterCounts) {
    println!(
        "parameters: trainable {} / total {} (backbone {}, prompts {}, group tokens {}, gct {}, heads {})",
        c.trainable, c.total, c.backbone, c.prompts, c.group_tokens, c.gct, c.heads
    );
}

fn eval(a: EvalArgs) -> Result<ExitCode, Error> {
    let loaded = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let mut cfg = match (&loaded, &a.config) {
        (Some(l), _) => l.cfg.clone(),
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.paths.dataset = d.clone();
    }
    if let Some(f) = &a.features {
        cfg.paths.features = Some(f.clone());
    }
    if let Some(t) = &a.thresholds {
        cfg.thresholds = t.clone();
    }
    cfg.validate()?;
    let ds = Dataset::load(&cfg.paths.dataset, cfg.model.group_tokens)?;
    let split: Split = a.split.into();
    if let Some(out) = &a.out {
        create_dir(out)?;
        cfg.echo(out)?;
    }
    let report = match (&a.predictions, &loaded) {
        (Some(path), _) => {
            let preds = read_predictions(path)?;
            evaluate_predictions(&ds, split, &preds, &cfg.thresholds, cfg.model.activities)?
        }
        (None, Some(l)) => {
            let data = DataSource::new(&ds, cfg.paths.features.as_deref());
            let evaluation = evaluate_split(&l.model, &l.store, &data, split, &cfg.thresholds)?;
            if let Some(out) = &a.out {
                write_predictions(&out.join(PREDICTIONS_FILE), &evaluation.predictions)?;
            }
            evaluation.report
        }
        (None, None) => unreachable!("clap requires a checkpoint or predictions"),
    };
    println!("clips: {}", ds.split_indices(split).len());
    print_report(&report);
    if let Some(l) = &loaded {
        let counts = Model::parameter_breakdown(&l.store);
        print_counts(&counts);
        let manifest = Manifest::load(a.checkpoint.as_deref().expect("checkpoint loaded"))?;
        if manifest.trainable_count() != counts.trainable {
            return Err(Error::Checkpoint {
                path: a.checkpoint.clone().expect("checkpoint loaded"),
                message: "manifest trainable count differs from the model".into(),
            });
        }
    }
    if let Some(out) = &a.out {
        write_json(&out.join(METRICS_FILE), &report)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn dump(a: DumpArgs) -> Result<ExitCode, Error> {
    let l = load_checkpoint(&a.checkpoint)?;
    let mut cfg = l.cfg.clone();
    if let Some(d) = &a.data {
        cfg.paths.dataset = d.clone();
    }
    let ds = Dataset::load(&cfg.paths.dataset, cfg.model.group_tokens)?;
    let clip = ds.index_of(&a.clip)?;
    let data = DataSource::new(&ds, cfg.paths.features.as_deref());
    let input = data.input(clip, cfg.model.frames, SampleMode::Eval, 0)?;
    let (pred, records) = l.model.predict_with_attention(&l.store, &input)?;
    let (h, w, patch) = match &input.frames[0] {
        FrameInput::Features(g) => (g.height, g.width, 1),
        FrameInput::Pixels(_) => {
            let side = cfg.model.backbone.grid_side();
            (side, side, cfg.model.backbone.patch_size)
        }
    };
    let summary = dump_attention(&records, h, w, patch, &a.out)?;
    cfg.echo(&a.out)?;
    write_predictions(&a.out.join(PREDICTIONS_FILE), &[pred])?;
    println!(
        "wrote {} attention matrices and {} heat maps to {}",
        summary.matrix_files.len(),
        summary.heatmaps.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_selftest() -> ExitCode {
    let start = Instant::now();
    let results = selftest();
    let mut stdout = std::io::stdout();
    for r in &results {
        let _ = writeln!(stdout, "{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} suites, {} failed, {:.1}s",
        results.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(SELFTEST_FAILED)
    }
}

fn ablation(a: AblationArgs) -> Result<ExitCode, Error> {
    let cfg = a.run.apply(a.run.base()?)?;
    let ds = Dataset::load(&cfg.paths.dataset, cfg.model.group_tokens)?;
    let rows = prompt_ablation(&cfg, &ds, a.split.into(), std::io::stderr())?;
    let table = render_table(&rows);
    print!("{table}");
    let out = &cfg.paths.out;
    create_dir(out)?;
    cfg.echo(out)?;
    fs::write(out.join(ABLATION_TABLE), &table).map_err(|e| Error::io(&out.join(ABLATION_TABLE), e))?;
    write_json(&out.join(ABLATION_JSON), &rows)?;
    Ok(ExitCode::SUCCESS)
}
