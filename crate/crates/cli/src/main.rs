use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use concord::agreement::{render_report, summarize, Grouping, Report, ReportFormat, Scope};
use concord::attribution::{write_dump, MethodId};
use concord::harness::{
    checkpoint_path, explain_instances, generate_synthetic, run_ablation, run_agreement_experiment, sample_instances, train_run,
    write_agreement_outputs, write_run, ExperimentConfig, PipelineError, SyntheticTask, DEFAULT_SAMPLE_SIZE, DUMP_FILE,
};
use concord::models::{load_checkpoint, AttentionMode, Model};

#[derive(Parser)]
#[command(name = "concord", version, about = "Train small text classifiers, explain them, and measure how much the explanations agree")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Training seed (train, ablate) or sampling seed (explain, agree).
    #[arg(long)]
    seed: Option<u64>,
    /// softmax or uniform.
    #[arg(long)]
    attention: Option<AttentionMode>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated method ids or labels.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<MethodId>>,
    #[arg(long, help = format!("Test instances to explain [default: config value, {DEFAULT_SAMPLE_SIZE}]"))]
    sample_size: Option<usize>,
    /// Model to explain; defaults to the first-seed checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write checkpoints, histories and metadata.
    Train(Common),
    /// Train with softmax and uniform attention and compare test accuracy.
    Ablate(Common),
    /// Write attribution dumps for sampled test instances.
    Explain(ExplainArgs),
    /// Explain sampled test instances and report pairwise agreement.
    Agree(ExplainArgs),
    /// Merge JSON agreement reports and render them.
    Report {
        /// `agreement.json` files written by `agree`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        /// Write `report.<ext>` here instead of printing.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset as JSON lines.
    Synth {
        /// needle-sentiment, bag-of-words-sentiment or overlap-pair.
        #[arg(long)]
        task: SyntheticTask,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads the config and applies the flags shared by every experiment command.
fn configure(common: &Common) -> Result<ExperimentConfig, PipelineError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.output = out.clone();
    }
    if let Some(mode) = common.attention {
        config.model.attention = mode;
    }
    Ok(config)
}

fn train(common: &Common) -> Result<(), PipelineError> {
    let mut config = configure(common)?;
    if let Some(seed) = common.seed {
        config.training.seeds = vec![seed];
    }
    let data = config.dataset.load()?;
    for &seed in &config.training.seeds {
        let run = train_run(&config, &data, config.model.attention, seed)?;
        let path = write_run(&config.output, &run)?;
        println!(
            "seed {seed}: validation {:.4}, test {:.4} -> {}",
            run.training.validation_accuracy,
            run.test_accuracy,
            path.display()
        );
    }
    Ok(())
}

fn ablate(common: &Common) -> Result<(), PipelineError> {
    let mut config = configure(common)?;
    if let Some(seed) = common.seed {
        config.training.seeds = vec![seed];
    }
    let data = config.dataset.load()?;
    let (report, runs) = run_ablation(&config, &data)?;
    let dir = &config.output;
    for run in &runs {
        write_run(dir, run)?;
    }
    let json = dir.join("ablation.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes") + "\n").map_err(io(&json))?;
    let md = dir.join("ablation.md");
    let text = report.to_markdown();
    std::fs::write(&md, &text).map_err(io(&md))?;
    print!("{text}");
    Ok(())
}

fn explain_setup(args: &ExplainArgs) -> Result<(ExperimentConfig, Model), PipelineError> {
    let mut config = configure(&args.common)?;
    if let Some(seed) = args.common.seed {
        config.explain.seed = seed;
    }
    if let Some(n) = args.sample_size {
        config.explain.sample_size = n;
    }
    if let Some(methods) = &args.methods {
        config.explain.methods = methods.clone();
    }
    config.validate()?;
    let ckpt = match &args.checkpoint {
        Some(p) => p.clone(),
        None => {
            let seed = config.training.seeds.first().copied().unwrap_or_default();
            checkpoint_path(&config.output, config.model.attention, seed)
        }
    };
    let (model, _) = load_checkpoint(&ckpt)?;
    Ok((config, model))
}

fn explain(args: &ExplainArgs) -> Result<(), PipelineError> {
    let (config, model) = explain_setup(args)?;
    let data = config.dataset.load()?;
    let instances = sample_instances(&data, config.explain.sample_size, config.explain.seed)?;
    let explanations = explain_instances(&model, &instances, &config.methods(), &config.explain)?;
    std::fs::create_dir_all(&config.output).map_err(io(&config.output))?;
    let dump = config.output.join(DUMP_FILE);
    write_dump(&dump, &explanations).map_err(io(&dump))?;
    println!("{} explanations -> {}", explanations.len(), dump.display());
    Ok(())
}

fn agree(args: &ExplainArgs) -> Result<(), PipelineError> {
    let (config, model) = explain_setup(args)?;
    let data = config.dataset.load()?;
    let run = run_agreement_experiment(&config, &data, &model)?;
    for path in write_agreement_outputs(&config.output, &run)? {
        println!("wrote {}", path.display());
    }
    print!("{}", render_report(&run.report(), ReportFormat::Markdown)?);
    Ok(())
}

fn report(inputs: &[PathBuf], format: ReportFormat, out: Option<&Path>) -> Result<(), PipelineError> {
    let mut matrices = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let r: Report = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Data(concord::harness::DataError::Record {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            }))?;
        matrices.extend(r.matrices);
    }
    let mut summaries = Vec::new();
    for (grouping, scope) in [
        (Grouping::Overall, Scope::NonAttention),
        (Grouping::AttentionVsRest, Scope::All),
        (Grouping::ByModel, Scope::NonAttention),
        (Grouping::ByTaskType, Scope::All),
    ] {
        match summarize(&matrices, grouping, scope) {
            Ok(s) => summaries.extend(s),
            Err(e) => log::warn!("skipping {grouping:?} summary: {e}"),
        }
    }
    let text = render_report(&Report { matrices, summaries }, format)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
            let ext = match format {
                ReportFormat::Markdown => "md",
                ReportFormat::Csv => "csv",
                ReportFormat::Json => "json",
            };
            let path = dir.join(format!("report.{ext}"));
            std::fs::write(&path, text).map_err(io(&path))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn synth(task: SyntheticTask, size: usize, seed: u64, out: &Path) -> Result<(), PipelineError> {
    let data = generate_synthetic(task, size, seed)?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let path = out.join(format!("{}.jsonl", task.name()));
    data.write_jsonl(&path)?;
    println!("{} instances -> {}", data.instances.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Ablate(c) => ablate(c),
        Command::Explain(a) => explain(a),
        Command::Agree(a) => agree(a),
        Command::Report { inputs, format, out } => report(inputs, *format, out.as_deref()),
        Command::Synth { task, size, seed, out } => synth(*task, *size, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
