use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bdefs::convnet::{checkpoint, extract_features};
use bdefs::de::BitMask;
use bdefs::pipeline::data::{self, LabeledDataset};
use bdefs::pipeline::report::{emit_reports, verify_report};
use bdefs::pipeline::synth::{FeatureSynth, ImageSynth};
use bdefs::pipeline::{
    self, run_seed, split_data, split_stratified, PipelineConfig, RunFailure, RunOutcome,
    RunRecord, SplitIndices, WrapperFitness,
};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(
    name = "bdefs",
    version,
    about = "Wrapper feature selection with binary differential evolution"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature CSV or PGM image tree.
    Synth(SynthArgs),
    /// Train the CNN extractor on an image tree.
    TrainExtractor(WithInput),
    /// Extract feature-layer activations into a feature CSV.
    Extract(ExtractArgs),
    /// Select features with differential evolution on one split.
    Select(WithInput),
    /// Score masks from a mask file (one line per run).
    Evaluate(EvaluateArgs),
    /// Full pipeline over all runs.
    Run(WithInput),
    /// Recompute reported metrics from a report directory.
    VerifyReport { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Features,
    Images,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "features")]
    kind: Kind,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    informative: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    /// Feature noise scale, or pixel noise for images (default 1.0 / 0.1).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 28)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file for features, directory for images.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Input {
    /// Feature CSV (`f0,...,label`).
    #[arg(long, conflicts_with = "images")]
    features: Option<PathBuf>,
    /// Image root with one subdirectory of PGM files per class.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Class count for feature CSVs (default: largest label + 1).
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct Overrides {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    pop_size: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    cr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    svm_c: Option<f64>,
    #[arg(long)]
    stratified: bool,
    #[arg(long)]
    retrain_extractor: bool,
    #[arg(long, default_value = "bdefs-out")]
    out: PathBuf,
}

#[derive(Args)]
struct WithInput {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    images: PathBuf,
    /// Checkpoint written by `train-extractor`.
    #[arg(long)]
    model: PathBuf,
    /// Output feature CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    input: Input,
    /// Mask file, one line of '0'/'1' per run.
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    opts: Overrides,
}

impl Overrides {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$target = v; })*
            };
        }
        set!(seed => seed, runs => runs, pop_size => pop_size, generations => generations,
             cr => crossover_rate, epochs => epochs, batch_size => batch_size, gamma => gamma,
             svm_c => svm_c);
        cfg.stratified |= self.stratified;
        cfg.retrain_extractor |= self.retrain_extractor;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Input {
    fn load(&self) -> Result<LabeledDataset> {
        match (&self.features, &self.images) {
            (Some(f), None) => Ok(data::load_features(f, self.classes)?),
            (None, Some(d)) => Ok(data::load_images(d)?),
            _ => Err("give exactly one of --features or --images".into()),
        }
    }

    fn load_features(&self) -> Result<LabeledDataset> {
        let ds = self.load()?;
        if ds.features().is_none() {
            return Err("this command needs --features".into());
        }
        Ok(ds)
    }
}

fn make_split(cfg: &PipelineConfig, labels: &[usize], seed: u64) -> Result<SplitIndices> {
    Ok(if cfg.stratified {
        split_stratified(labels, seed)?
    } else {
        split_data(labels.len(), seed)?
    })
}

fn synth(a: &SynthArgs) -> Result<()> {
    match a.kind {
        Kind::Features => {
            let ds = FeatureSynth {
                samples: a.samples,
                dim: a.dim,
                informative: a.informative,
                classes: a.classes,
                separation: a.separation,
                noise: a.noise.unwrap_or(1.0),
                seed: a.seed,
            }
            .generate()?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            data::save_features(&ds, &a.out)?;
        }
        Kind::Images => {
            let ds = ImageSynth {
                samples: a.samples,
                height: a.size,
                width: a.size,
                classes: a.classes,
                noise: a.noise.unwrap_or(0.1),
                seed: a.seed,
            }
            .generate()?;
            data::save_images(&ds, &a.out)?;
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_extractor_cmd(a: &WithInput) -> Result<()> {
    let cfg = a.opts.config()?;
    let ds = a.input.load()?;
    let seed = run_seed(cfg.seed, 1);
    let split = make_split(&cfg, &ds.labels, seed)?;
    let (model, history) = pipeline::train_extractor(&cfg, &ds, &split, seed)?;
    fs::create_dir_all(&a.opts.out)?;
    fs::write(
        a.opts.out.join("extractor.cnn"),
        checkpoint::to_text(&model),
    )?;
    history.write_csv(fs::File::create(a.opts.out.join("train_history.csv"))?)?;
    if let Some(last) = history.last() {
        println!(
            "epochs {}: train acc {:.4}, validation acc {}",
            last.epoch,
            last.train_acc,
            last.val_acc.map_or("NA".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn extract_cmd(a: &ExtractArgs) -> Result<()> {
    let model = checkpoint::from_text(&fs::read_to_string(&a.model)?)?;
    let ds = data::load_images(&a.images)?;
    let images = ds.images().expect("image dataset");
    let x = extract_features(&model, images)?;
    let out = LabeledDataset::from_features(x, ds.labels.clone(), ds.class_names.clone())?;
    data::save_features(&out, &a.out)?;
    println!("wrote {} rows to {}", out.len(), a.out.display());
    Ok(())
}

fn select_cmd(a: &WithInput) -> Result<()> {
    let cfg = a.opts.config()?;
    let ds = a.input.load_features()?;
    let x = ds.features().expect("checked");
    let seed = run_seed(cfg.seed, 1);
    let split = make_split(&cfg, &ds.labels, seed)?;
    let fitness = WrapperFitness::new(x.view(), &ds.labels, ds.classes(), &split, cfg.svm(seed))?;
    let out = bdefs::de::run_parallel(&cfg.de(seed), x.ncols(), |m: &BitMask| fitness.evaluate(m))
        .map_err(|e| e.to_string())?;
    fs::create_dir_all(&a.opts.out)?;
    fs::write(
        a.opts.out.join("selection.txt"),
        format!("{}\n", out.best.mask),
    )?;
    out.history
        .write_csv(fs::File::create(a.opts.out.join("de_history_run1.csv"))?)?;
    println!(
        "fitness {:.6}, {} of {} features",
        out.best.fitness,
        out.best.mask.count_ones(),
        x.ncols()
    );
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let cfg = a.opts.config()?;
    let ds = a.input.load_features()?;
    let x = ds.features().expect("checked");
    let text = fs::read_to_string(&a.mask)?;
    let masks: Vec<BitMask> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse())
        .collect::<std::result::Result<_, _>>()?;
    if masks.is_empty() {
        return Err(format!("{}: no masks", a.mask.display()).into());
    }
    let outcomes: Vec<std::result::Result<RunOutcome, RunFailure>> = masks
        .iter()
        .enumerate()
        .map(|(i, mask)| {
            let run = i + 1;
            let seed = run_seed(cfg.seed, run);
            let fail = |message: String| RunFailure {
                run,
                stage: "final".into(),
                message,
            };
            if mask.len() != x.ncols() {
                return Err(fail(format!(
                    "mask has {} bits for {} features",
                    mask.len(),
                    x.ncols()
                )));
            }
            let split = make_split(&cfg, &ds.labels, seed).map_err(|e| fail(e.to_string()))?;
            let scored = pipeline::score_methods(
                x.view(),
                &ds.labels,
                ds.classes(),
                &split,
                &cfg.svm(seed),
                &[
                    (pipeline::Method::Original, (0..x.ncols()).collect()),
                    (pipeline::Method::Selected, mask.selected()),
                ],
            )
            .map_err(fail)?;
            let fitness =
                WrapperFitness::new(x.view(), &ds.labels, ds.classes(), &split, cfg.svm(seed))
                    .and_then(|w| w.evaluate(mask))
                    .map_err(|e| fail(e.to_string()))?;
            Ok(RunOutcome {
                record: RunRecord {
                    run,
                    seed,
                    mask: mask.to_string(),
                    selected: mask.count_ones(),
                    best_fitness: fitness,
                    evaluations: 1,
                },
                de_history: None,
                train_history: None,
                scored,
            })
        })
        .collect();
    let cfg = PipelineConfig {
        runs: masks.len(),
        ..cfg
    };
    let bundle = pipeline::summarize(&cfg, ds.class_names.clone(), x.ncols(), outcomes)?;
    emit_reports(&bundle, &a.opts.out)?;
    print_summary(&bundle.summary, &a.opts.out);
    Ok(())
}

fn print_summary(s: &pipeline::Summary, out: &Path) {
    for r in &s.results {
        if r.split == pipeline::SplitName::Test {
            let a = &r.metrics.aggregate.rates;
            let p = |v: Option<f64>| v.map_or("NA".into(), |v| format!("{v:.4}"));
            println!(
                "{:<8} test accuracy {} gmean {}",
                r.method.as_str(),
                p(a.accuracy),
                p(a.gmean)
            );
        }
    }
    if let Some(sel) = &s.selection {
        println!(
            "selected features: mean {:.2} (min {}, max {}) of {}",
            sel.mean, sel.min, sel.max, s.feature_count
        );
    }
    for f in &s.failures {
        eprintln!("run {} failed during {}: {}", f.run, f.stage, f.message);
    }
    println!("reports in {}", out.display());
}

fn run_cmd(a: &WithInput) -> Result<ExitCode> {
    let cfg = a.opts.config()?;
    let ds = a.input.load()?;
    let bundle = pipeline::run_pipeline(&cfg, &ds)?;
    emit_reports(&bundle, &a.opts.out)?;
    print_summary(&bundle.summary, &a.opts.out);
    Ok(if bundle.summary.runs.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn verify_cmd(dir: &Path) -> Result<ExitCode> {
    let v = verify_report(dir)?;
    for m in &v.mismatches {
        println!("MISMATCH {m}");
    }
    println!("{} checks, {} mismatches", v.checks, v.mismatches.len());
    Ok(if v.is_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }),
    )
    .init();
    let result = match &cli.command {
        Command::Synth(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Command::TrainExtractor(a) => train_extractor_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Extract(a) => extract_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Select(a) => select_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Run(a) => run_cmd(a),
        Command::VerifyReport { dir } => verify_cmd(dir),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
