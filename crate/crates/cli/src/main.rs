use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use absa_core::data::{synthetic_corpus, to_semeval_xml, write_records, SYNTHETIC_SIZE};
use absa_core::harness::{
    evaluate, ingest, load_examples, probe_layers, train, validation_split, write_probe_csv, Checkpoint, ProbeConfig,
    RunConfig,
};
use absa_core::metrics::{RunReport, SeedMetric};
use absa_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "absa", version, about = "Aspect extraction and aspect sentiment classification with multi-layer aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write checkpoints, metrics and loss curves.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write its predictions.
    Eval(EvalArgs),
    /// Fit a linear probe on every encoder layer of a checkpoint.
    Probe(ProbeArgs),
    /// Turn a run report into a seed,epoch,split,loss CSV.
    Curves(CurvesArgs),
    /// Write the synthetic corpus as SemEval-style XML.
    Synth(SynthArgs),
    /// Check SemEval files in a directory against the published counts.
    Ingest(IngestArgs),
}

/// Each flag overrides the config key of the same name.
#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    test_data: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    infer_branch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Comma-separated seeds; `a..b` ranges are allowed.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    validation_n: Option<String>,
    #[arg(long)]
    num_layers: Option<String>,
    #[arg(long)]
    hidden_size: Option<String>,
    #[arg(long)]
    num_heads: Option<String>,
    #[arg(long)]
    ff_size: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    init_std: Option<String>,
    #[arg(long)]
    min_freq: Option<String>,
    #[arg(long)]
    single_segment: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("task", &self.task),
            ("data", &self.data),
            ("test_data", &self.test_data),
            ("mode", &self.mode),
            ("infer_branch", &self.infer_branch),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("seeds", &self.seeds),
            ("validation_n", &self.validation_n),
            ("num_layers", &self.num_layers),
            ("hidden_size", &self.hidden_size),
            ("num_heads", &self.num_heads),
            ("ff_size", &self.ff_size),
            ("max_len", &self.max_len),
            ("dropout", &self.dropout),
            ("init_std", &self.init_std),
            ("min_freq", &self.min_freq),
            ("single_segment", &self.single_segment),
            ("out", &self.out),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// SemEval XML file to score.
    #[arg(long)]
    data: PathBuf,
    /// Directory for metrics.csv and predictions.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The training file the checkpoint was trained on. The validation
    /// split is recovered from the checkpoint's seed.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = ProbeConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    probe_lr: f64,
    /// Directory for probe.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// report.json written by `train`.
    #[arg(long)]
    report: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SYNTHETIC_SIZE)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory holding the SemEval XML files.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout()),
    })
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = args.resolve()?;
    let data = config
        .data
        .clone()
        .ok_or_else(|| Error::Config("no training data given (--data)".into()))?;
    let examples = load_examples(config.task, &data)?;
    let test = match &config.test_data {
        Some(p) => Some(load_examples(config.task, p)?),
        None => None,
    };
    log::info!(
        "training {} {} on {} examples, seeds {:?}",
        config.task,
        config.mode,
        examples.len(),
        config.seeds
    );
    let output = train(&config, &examples, test.as_deref(), &dataset_name(&data))?;

    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("config.txt"), config.to_text())?;
    for run in &output.runs {
        run.checkpoint.save(&config.out.join(format!("seed-{}.ckpt", run.checkpoint.seed)))?;
    }
    let report = &output.report;
    report.write_metrics_csv(File::create(config.out.join("metrics.csv"))?)?;
    report.write_curves_csv(File::create(config.out.join("curves.csv"))?)?;
    fs::write(config.out.join("report.json"), serde_json::to_string_pretty(report).map_err(Error::from)?)?;
    for s in &report.summary {
        println!("{:<22} {:.4} ± {:.4} ({} seeds)", s.metric, s.mean, s.sd, s.runs);
    }
    log::info!("wrote {}", config.out.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let examples = load_examples(checkpoint.model.config.task, &args.data)?;
    let evaluation = evaluate(&checkpoint, &examples)?;
    let mut report = RunReport {
        task: checkpoint.model.config.task.to_string(),
        dataset: dataset_name(&args.data),
        seeds: vec![checkpoint.seed],
        seed_metrics: evaluation
            .scores
            .named()
            .into_iter()
            .map(|(metric, value)| SeedMetric {
                seed: checkpoint.seed,
                metric: metric.to_string(),
                value,
            })
            .collect(),
        ..RunReport::default()
    };
    report.summarize();
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            report.write_metrics_csv(File::create(dir.join("metrics.csv"))?)?;
            write_records(&dir.join("predictions.jsonl"), &evaluation.predictions)?;
            for (metric, value) in evaluation.scores.named() {
                println!("{metric:<10} {value:.4}");
            }
        }
        None => report.write_metrics_csv(io::stdout())?,
    }
    Ok(())
}

fn run_probe(args: &ProbeArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let examples = load_examples(checkpoint.model.config.task, &args.data)?;
    let (train_set, validation) = validation_split(&checkpoint, &examples)?;
    let config = ProbeConfig {
        steps: args.steps,
        lr: args.probe_lr,
    };
    let scores = probe_layers(&checkpoint, &train_set, &validation, &config)?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_probe_csv(&scores, File::create(dir.join("probe.csv"))?)
        }
        None => write_probe_csv(&scores, io::stdout()),
    }
}

fn run_curves(args: &CurvesArgs) -> Result<()> {
    let text = fs::read_to_string(&args.report)?;
    let report: RunReport = serde_json::from_str(&text)?;
    report.write_curves_csv(sink(args.out.as_deref())?)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, to_semeval_xml(&synthetic_corpus(args.n, args.seed)))?;
    Ok(())
}

fn run_ingest(args: &IngestArgs) -> Result<()> {
    let report = ingest(&args.data)?;
    report.write_csv(sink(args.out.as_deref())?)?;
    if report.checked().next().is_none() {
        return Err(Error::Data(format!("no SemEval files found in {}", args.data.display())));
    }
    if !report.ok() {
        return Err(Error::Data("dataset statistics differ from the published counts".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Probe(a) => run_probe(a),
        Command::Curves(a) => run_curves(a),
        Command::Synth(a) => run_synth(a),
        Command::Ingest(a) => run_ingest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
