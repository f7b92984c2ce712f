//! `simoap`: sample, rerank, evaluate and compare persona-dialogue response
//! systems.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use simoap_core::analysis::{candidate_stats, rank_analysis, GoodPredicate, RankInstance};
use simoap_core::dialogue::{
    load_dataset, write_dataset, DialogueInstance, PersonaAggregation, PipelineConfig,
};
use simoap_core::gateway::mock::{demo_dataset, MockBackend};
use simoap_core::gateway::{self, server, Backend, BACKEND_URL_ENV};
use simoap_core::metrics::{compare_systems, Grouping, SystemResults};
use simoap_core::pipeline::{
    evaluate_system, read_candidates, read_finals, read_timings, run_pipeline, write_run_dir,
    Backends, EvaluationBackends, PipelineOutput, RerankMode, RunOptions, CANDIDATES_FILE,
};
use simoap_core::{Error, SamplingMode};

const METRICS_FILE: &str = "metrics.json";
const REPORT_JSON: &str = "report.json";
const REPORT_TXT: &str = "report.txt";
const RANKS_FILE: &str = "ranks.json";

#[derive(Parser)]
#[command(
    name = "simoap",
    version,
    about = "Over-sample and rerank persona dialogue responses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample candidate responses only and write candidates.jsonl.
    Sample(RunArgs),
    /// Sample and rerank, writing a full run directory.
    Rerank(RerankArgs),
    /// Score a finished run directory and write metrics.json.
    Evaluate(EvaluateArgs),
    /// Build the comparison table from evaluated run directories.
    Compare(CompareArgs),
    /// Locate good candidates and selected responses in the perplexity ranking.
    AnalyzeRanks(AnalyzeArgs),
    /// Serve an in-process mock backend over HTTP.
    ServeMock(ServeArgs),
    /// Write a synthetic persona-dialogue dataset.
    MockDataset(MockDatasetArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Generation backend: an HTTP base URL or inprocess:<mock>.
    #[arg(long, env = BACKEND_URL_ENV)]
    backend: String,
    /// JSON file with pipeline settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    aggregation: Option<PersonaAggregation>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    sampling: SamplingChoice,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SamplingChoice {
    Auto,
    Stepwise,
    Batch,
}

impl From<SamplingChoice> for SamplingMode {
    fn from(c: SamplingChoice) -> Self {
        match c {
            SamplingChoice::Auto => SamplingMode::Auto,
            SamplingChoice::Stepwise => SamplingMode::Stepwise,
            SamplingChoice::Batch => SamplingMode::Batch,
        }
    }
}

#[derive(Args)]
struct RerankArgs {
    #[command(flatten)]
    run: RunArgs,
    /// simoap, simoap-q, mmi, lls or none.
    #[arg(long, default_value = "simoap")]
    rerank: RerankMode,
    #[arg(long)]
    nli_backend: Option<String>,
    /// Backward scorer for mmi.
    #[arg(long)]
    scorer_backend: Option<String>,
    /// Ablation: send every candidate to the NLI stage.
    #[arg(long)]
    skip_coherence: bool,
    /// Ablation: answer with the coherence top-1.
    #[arg(long)]
    skip_consistency: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    nli_backend: String,
    /// Large-vocabulary perplexity scorer.
    #[arg(long)]
    scorer_backend: String,
    /// Small-vocabulary perplexity scorer (filtered at 10,000); defaults to
    /// the --scorer-backend.
    #[arg(long)]
    bert_scorer_backend: Option<String>,
    /// System name; defaults to the run directory name.
    #[arg(long)]
    name: Option<String>,
    /// Normalization block, usually the backbone model.
    #[arg(long, default_value = "default")]
    block: String,
}

#[derive(Args)]
struct CompareArgs {
    /// Evaluated run directories.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "per_block")]
    grouping: Grouping,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    nli_backend: String,
    /// Perplexity scorer; without it, the sampler's token logprobs are used.
    #[arg(long)]
    scorer_backend: Option<String>,
    #[arg(long, default_value_t = 10)]
    buckets: usize,
    #[arg(long, default_value_t = 0.25)]
    sim_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    entail_threshold: f64,
    /// Defaults to ranks.json inside the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "bigram")]
    mock: String,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

#[derive(Args)]
struct MockDatasetArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Failure caused by the invocation itself (exit code 2).
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<E: Into<anyhow::Error>>(e: E) -> anyhow::Error {
    anyhow::Error::new(Usage(e.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Sample(args) => sample(args),
        Command::Rerank(args) => rerank(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Compare(args) => compare(args),
        Command::AnalyzeRanks(args) => analyze(args),
        Command::ServeMock(args) => serve_mock(args),
        Command::MockDataset(args) => mock_dataset(args),
    }
}

fn dataset(path: &Path) -> anyhow::Result<Vec<DialogueInstance>> {
    load_dataset(path)
        .with_context(|| format!("loading dataset {}", path.display()))
        .map_err(usage)
}

fn backend(addr: &str) -> anyhow::Result<Arc<dyn Backend>> {
    gateway::connect(addr)
        .with_context(|| format!("connecting to backend {addr}"))
        .map_err(usage)
}

fn resolve_config(args: &RunArgs, mode: RerankMode) -> anyhow::Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(usage)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(usage)?
        }
        None => mode.default_config(),
    };
    if let Some(v) = args.seed {
        config.master_seed = v;
    }
    if let Some(v) = args.k {
        config.k = v;
    }
    if let Some(v) = args.s {
        config.s = v;
        if args.c.is_none() {
            config.c = config.c.min(v);
        }
    }
    if let Some(v) = args.c {
        config.c = v;
    }
    if let Some(v) = args.max_tokens {
        config.max_tokens = v;
    }
    if let Some(v) = args.aggregation {
        config.persona_aggregation = v;
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

fn optional_backend(addr: &Option<String>) -> anyhow::Result<Option<Arc<dyn Backend>>> {
    addr.as_deref().map(backend).transpose()
}

/// Runs the pipeline, mapping configuration errors to usage errors.
fn execute(
    dataset: &[DialogueInstance],
    opts: &RunOptions,
    backends: &Backends,
) -> anyhow::Result<PipelineOutput> {
    run_pipeline(dataset, opts, backends).map_err(|e| match e {
        Error::Validation(_) | Error::Capability { .. } => usage(e),
        other => other.into(),
    })
}

fn report_failures(out: &PipelineOutput) -> ExitCode {
    for f in &out.failures {
        eprintln!("instance {} failed: {}", f.instance_id, f.error);
    }
    if out.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!(
            "{} of {} instances failed",
            out.failures.len(),
            out.failures.len() + out.outcomes.len()
        );
        ExitCode::from(1)
    }
}

fn run_options(args: &RunArgs, mode: RerankMode) -> anyhow::Result<RunOptions> {
    Ok(RunOptions {
        workers: args.workers,
        sampling: args.sampling.into(),
        cache_dir: args.cache_dir.clone(),
        ..RunOptions::new(mode, resolve_config(args, mode)?)
    })
}

fn sample(args: RunArgs) -> anyhow::Result<ExitCode> {
    let data = dataset(&args.dataset)?;
    let opts = run_options(&args, RerankMode::None)?;
    let backends = Backends {
        generator: backend(&args.backend)?,
        nli: None,
        backward: None,
    };
    let out = execute(&data, &opts, &backends)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join(CANDIDATES_FILE);
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    for o in &out.outcomes {
        serde_json::to_writer(&mut w, &o.run)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!(
        "wrote {} candidate sets to {}",
        out.outcomes.len(),
        path.display()
    );
    Ok(report_failures(&out))
}

fn rerank(args: RerankArgs) -> anyhow::Result<ExitCode> {
    let data = dataset(&args.run.dataset)?;
    let opts = RunOptions {
        skip_coherence: args.skip_coherence,
        skip_consistency: args.skip_consistency,
        ..run_options(&args.run, args.rerank)?
    };
    let backends = Backends {
        generator: backend(&args.run.backend)?,
        nli: optional_backend(&args.nli_backend)?,
        backward: optional_backend(&args.scorer_backend)?,
    };
    let out = execute(&data, &opts, &backends)?;
    write_run_dir(&args.run.out, &out)?;
    println!(
        "{}: {} instances reranked into {}",
        args.rerank.as_str(),
        out.outcomes.len(),
        args.run.out.display()
    );
    Ok(report_failures(&out))
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<ExitCode> {
    let data = dataset(&args.dataset)?;
    let finals = read_finals(&args.run)
        .with_context(|| format!("reading run {}", args.run.display()))
        .map_err(usage)?;
    let timings = read_timings(&args.run).ok();
    let ppl_b = backend(&args.scorer_backend)?;
    let eval = EvaluationBackends {
        nli: backend(&args.nli_backend)?,
        ppl_a: match &args.bert_scorer_backend {
            Some(addr) => backend(addr)?,
            None => ppl_b.clone(),
        },
        ppl_b,
    };
    let name = args.name.clone().unwrap_or_else(|| {
        args.run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "system".into())
    });
    let results = evaluate_system(&name, &args.block, &data, &finals, timings.as_ref(), &eval)?;
    fs::write(
        args.run.join(METRICS_FILE),
        serde_json::to_string_pretty(&results)?,
    )?;
    println!(
        "{name}: PPL_a {:.2}  PPL_b {:.2}  Dis-1 {:.2}  Dis-2 {:.2}  C {:.3}  Rep {:.2}",
        results.ppl_a,
        results.ppl_b,
        results.dis1 * 100.0,
        results.dis2 * 100.0,
        results.c_score,
        results.rep * 100.0
    );
    Ok(ExitCode::SUCCESS)
}

fn compare(args: CompareArgs) -> anyhow::Result<ExitCode> {
    let systems = args
        .runs
        .iter()
        .map(|dir| {
            let path = dir.join(METRICS_FILE);
            let text = fs::read_to_string(&path).with_context(|| {
                format!("reading {} (run `simoap evaluate` first)", path.display())
            })?;
            Ok(serde_json::from_str::<SystemResults>(&text)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(usage)?;
    let report = compare_systems(&systems, args.grouping).map_err(usage)?;
    fs::create_dir_all(&args.out)?;
    let text = report.to_text();
    fs::write(
        args.out.join(REPORT_JSON),
        serde_json::to_string_pretty(&report)?,
    )?;
    fs::write(args.out.join(REPORT_TXT), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<ExitCode> {
    let data = dataset(&args.dataset)?;
    let predicate = GoodPredicate::new(args.sim_threshold, args.entail_threshold).map_err(usage)?;
    let runs = read_candidates(&args.run)
        .with_context(|| format!("reading candidates in {}", args.run.display()))
        .map_err(usage)?;
    let finals = read_finals(&args.run)
        .with_context(|| format!("reading final responses in {}", args.run.display()))
        .map_err(usage)?;
    let nli = backend(&args.nli_backend)?;
    let scorer = optional_backend(&args.scorer_backend)?;
    let by_id: std::collections::HashMap<&str, &DialogueInstance> =
        data.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut instances = Vec::with_capacity(runs.len());
    for (run, fin) in runs.iter().zip(&finals) {
        if run.instance_id != fin.instance_id {
            bail!(
                "candidates and final responses are out of step at {}",
                run.instance_id
            );
        }
        let Some(inst) = by_id.get(run.instance_id.as_str()) else {
            return Err(usage(anyhow::anyhow!(
                "instance {} is not in the dataset",
                run.instance_id
            )));
        };
        instances.push(RankInstance {
            instance_id: run.instance_id.clone(),
            candidates: candidate_stats(inst, run, scorer.as_deref(), nli.as_ref())?,
            selected_index: fin.candidate_index,
        });
    }
    let analysis = rank_analysis(&instances, predicate, args.buckets).map_err(usage)?;
    let out = args.out.unwrap_or_else(|| args.run.join(RANKS_FILE));
    fs::write(&out, serde_json::to_string_pretty(&analysis)?)?;
    for (b, ratio) in analysis.good_ratio_per_bucket.iter().enumerate() {
        println!(
            "ranks {:>5}..{:<5} good {:.3}  mean PPL {:.2}",
            analysis.bucket_edges[b] + 1,
            analysis.bucket_edges[b + 1],
            ratio,
            analysis.mean_ppl_per_bucket[b]
        );
    }
    println!("mean selected rank {:.2}", analysis.mean_selected_rank);
    Ok(ExitCode::SUCCESS)
}

fn serve_mock(args: ServeArgs) -> anyhow::Result<ExitCode> {
    let mock = MockBackend::by_name(&args.mock).map_err(usage)?;
    let handle = server::serve(Arc::new(mock), &args.addr, args.threads)
        .with_context(|| format!("binding {}", args.addr))
        .map_err(usage)?;
    println!("{}", handle.url());
    std::io::stdout().flush()?;
    handle.join();
    Ok(ExitCode::SUCCESS)
}

fn mock_dataset(args: MockDatasetArgs) -> anyhow::Result<ExitCode> {
    let file =
        fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_dataset(std::io::BufWriter::new(file), &demo_dataset(args.n))?;
    println!("wrote {} instances to {}", args.n, args.out.display());
    Ok(ExitCode::SUCCESS)
}
