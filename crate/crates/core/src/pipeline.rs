//! End-to-end driver: over-sample, rerank, write run directories, and score
//! finished runs.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{lls_rerank, mmi_rerank};
use crate::coherence::{build_tfidf, coherence_rank};
use crate::consistency::{persona_entailment, select_final};
use crate::dialogue::{
    coherence_context, CoherenceContext, DialogueInstance, NliLabel, PersonaAggregation,
    PipelineConfig, ScoreRecord,
};
use crate::error::{Error, Result};
use crate::gateway::{self, Backend, Capability};
use crate::metrics::{self, SystemResults, BERT_PPL_FILTER};
use crate::sampling::{oversample, SamplingMode, SamplingRun};

pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const FINAL_FILE: &str = "final.jsonl";
pub const TIMINGS_FILE: &str = "timings.json";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const CACHE_FILE: &str = "candidates-cache.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RerankMode {
    #[default]
    Simoap,
    /// Coherence against the last two history utterances only.
    SimoapQ,
    Mmi,
    Lls,
    /// No reranking: the first sampled candidate is the response.
    None,
}

impl FromStr for RerankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simoap" => Ok(Self::Simoap),
            "simoap-q" => Ok(Self::SimoapQ),
            "mmi" => Ok(Self::Mmi),
            "lls" => Ok(Self::Lls),
            "none" => Ok(Self::None),
            other => Err(Error::validation(format!("unknown rerank mode {other:?}"))),
        }
    }
}

impl RerankMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RerankMode::Simoap => "simoap",
            RerankMode::SimoapQ => "simoap-q",
            RerankMode::Mmi => "mmi",
            RerankMode::Lls => "lls",
            RerankMode::None => "none",
        }
    }

    /// Sampling defaults for the mode.
    pub fn default_config(self) -> PipelineConfig {
        match self {
            RerankMode::Lls => PipelineConfig::lls_defaults(),
            RerankMode::SimoapQ => PipelineConfig {
                coherence_context: CoherenceContext::LastTwo,
                ..PipelineConfig::default()
            },
            _ => PipelineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub mode: RerankMode,
    pub config: PipelineConfig,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub sampling: SamplingMode,
    /// Ablation: pass every candidate to the consistency stage.
    pub skip_coherence: bool,
    /// Ablation: take the coherence top-1 as the response.
    pub skip_consistency: bool,
    pub cache_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(mode: RerankMode, config: PipelineConfig) -> Self {
        Self {
            mode,
            config,
            workers: 0,
            sampling: SamplingMode::Auto,
            skip_coherence: false,
            skip_consistency: false,
            cache_dir: None,
        }
    }

    fn validate(&self, backends: &Backends) -> Result<()> {
        self.config.validate()?;
        if self.skip_coherence && self.skip_consistency {
            return Err(Error::validation("cannot skip both post-evaluation stages"));
        }
        let gen = backends.generator.descriptor();
        if !gen.supports(Capability::NextTokenDist) && !gen.supports(Capability::BatchSample) {
            return Err(Error::validation(format!(
                "generation backend {:?} can neither step nor batch-sample",
                gen.backend_id
            )));
        }
        let need = |b: &Option<Arc<dyn Backend>>, cap: Capability, what: &str| match b {
            Some(b) if b.descriptor().supports(cap) => Ok(()),
            Some(b) => Err(Error::Capability {
                backend: b.descriptor().backend_id.clone(),
                capability: cap.to_string(),
            }),
            None => Err(Error::validation(format!(
                "{} requires {what} backend",
                self.mode.as_str()
            ))),
        };
        match self.mode {
            RerankMode::Simoap | RerankMode::SimoapQ if !self.skip_consistency => {
                need(&backends.nli, Capability::Nli, "an NLI")
            }
            RerankMode::Mmi => need(
                &backends.backward,
                Capability::Loglikelihood,
                "a backward scorer",
            ),
            _ => Ok(()),
        }
    }

    fn effective_context(&self) -> CoherenceContext {
        match self.mode {
            RerankMode::SimoapQ => CoherenceContext::LastTwo,
            _ => self.config.coherence_context,
        }
    }
}

#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn Backend>,
    pub nli: Option<Arc<dyn Backend>>,
    pub backward: Option<Arc<dyn Backend>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub instance_id: String,
    pub records: Vec<ScoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResponse {
    pub instance_id: String,
    pub candidate_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTiming {
    pub instance_id: String,
    pub generation_seconds: f64,
    pub evaluation_seconds: f64,
    pub total_seconds: f64,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome {
    pub run: SamplingRun,
    pub scores: InstanceScores,
    pub final_response: FinalResponse,
    pub timing: InstanceTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOutput {
    pub outcomes: Vec<InstanceOutcome>,
    pub failures: Vec<InstanceFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub instance_id: String,
    pub backend_id: String,
    pub k: usize,
    pub s: usize,
    pub master_seed: u64,
    pub max_tokens: usize,
    pub sampling: SamplingMode,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: CacheKey,
    run: SamplingRun,
}

/// Append-only JSONL store of sampling runs.
pub struct CandidateCache {
    path: PathBuf,
    entries: HashMap<CacheKey, SamplingRun>,
}

impl CandidateCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("{}: {e}", path.display()),
                })?;
                entries.insert(entry.key, entry.run);
            }
        }
        Ok(Self { path, entries })
    }

    pub fn get(&self, key: &CacheKey) -> Option<&SamplingRun> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert_all(
        &mut self,
        runs: impl IntoIterator<Item = (CacheKey, SamplingRun)>,
    ) -> Result<()> {
        let mut file = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)?,
        );
        for (key, run) in runs {
            if self.entries.contains_key(&key) {
                continue;
            }
            serde_json::to_writer(
                &mut file,
                &CacheLine {
                    key: key.clone(),
                    run: run.clone(),
                },
            )?;
            file.write_all(b"\n")?;
            self.entries.insert(key, run);
        }
        file.flush()?;
        Ok(())
    }
}

fn resolved_sampling(mode: SamplingMode, backend: &dyn Backend) -> SamplingMode {
    match mode {
        SamplingMode::Auto if backend.descriptor().supports(Capability::BatchSample) => {
            SamplingMode::Batch
        }
        SamplingMode::Auto => SamplingMode::Stepwise,
        m => m,
    }
}

fn cache_key(inst: &DialogueInstance, opts: &RunOptions, backends: &Backends) -> CacheKey {
    CacheKey {
        instance_id: inst.id.clone(),
        backend_id: backends.generator.descriptor().backend_id.clone(),
        k: opts.config.k,
        s: opts.config.s,
        master_seed: opts.config.master_seed,
        max_tokens: opts.config.max_tokens,
        sampling: resolved_sampling(opts.sampling, backends.generator.as_ref()),
    }
}

/// Runs over-sampling and reranking for every instance. Per-instance
/// failures are collected, not propagated; outputs are in dataset order
/// whatever the worker count.
pub fn run_pipeline(
    dataset: &[DialogueInstance],
    opts: &RunOptions,
    backends: &Backends,
) -> Result<PipelineOutput> {
    opts.validate(backends)?;
    let mut cache = opts
        .cache_dir
        .as_ref()
        .map(CandidateCache::open)
        .transpose()?;
    let cached: Vec<Option<SamplingRun>> = dataset
        .iter()
        .map(|inst| {
            cache
                .as_ref()
                .and_then(|c| c.get(&cache_key(inst, opts, backends)).cloned())
        })
        .collect();

    let work = || -> Vec<Result<InstanceOutcome>> {
        dataset
            .par_iter()
            .zip(cached.into_par_iter())
            .map(|(inst, hit)| run_instance(inst, hit, opts, backends))
            .collect()
    };
    let results = if opts.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?
            .install(work)
    } else {
        work()
    };

    let mut out = PipelineOutput::default();
    for (inst, r) in dataset.iter().zip(results) {
        match r {
            Ok(o) => out.outcomes.push(o),
            Err(e) => out.failures.push(InstanceFailure {
                instance_id: inst.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    if let Some(cache) = cache.as_mut() {
        // outcomes skip failed instances, so match by id rather than position
        let by_id: HashMap<&str, &InstanceOutcome> = out
            .outcomes
            .iter()
            .map(|o| (o.run.instance_id.as_str(), o))
            .collect();
        cache.insert_all(dataset.iter().filter_map(|inst| {
            by_id
                .get(inst.id.as_str())
                .filter(|o| !o.timing.cached)
                .map(|o| (cache_key(inst, opts, backends), o.run.clone()))
        }))?;
    }
    Ok(out)
}

fn run_instance(
    inst: &DialogueInstance,
    hit: Option<SamplingRun>,
    opts: &RunOptions,
    backends: &Backends,
) -> Result<InstanceOutcome> {
    let started = Instant::now();
    let cached = hit.is_some();
    let run = match hit {
        Some(run) => run,
        None => oversample(
            backends.generator.as_ref(),
            inst,
            &opts.config,
            opts.sampling,
        )?,
    };
    let generation_seconds = started.elapsed().as_secs_f64();

    let eval_started = Instant::now();
    let (records, final_index) = rerank(inst, &run, opts, backends)?;
    let evaluation_seconds = eval_started.elapsed().as_secs_f64();

    let text = run.candidates[final_index].text.clone();
    Ok(InstanceOutcome {
        scores: InstanceScores {
            instance_id: inst.id.clone(),
            records,
        },
        final_response: FinalResponse {
            instance_id: inst.id.clone(),
            candidate_index: final_index,
            text,
        },
        timing: InstanceTiming {
            instance_id: inst.id.clone(),
            generation_seconds,
            evaluation_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
            cached,
        },
        run,
    })
}

/// Post-evaluation for one instance: per-candidate records (index order) and
/// the selected candidate index.
pub fn rerank(
    inst: &DialogueInstance,
    run: &SamplingRun,
    opts: &RunOptions,
    backends: &Backends,
) -> Result<(Vec<ScoreRecord>, usize)> {
    let candidates = &run.candidates;
    let mut records: Vec<ScoreRecord> = candidates
        .iter()
        .map(|c| ScoreRecord::new(c.index))
        .collect();
    let final_index = match opts.mode {
        RerankMode::Simoap | RerankMode::SimoapQ => {
            let history = coherence_context(inst, opts.effective_context())?;
            let model = build_tfidf(&history, candidates)?;
            for (r, sim) in records.iter_mut().zip(model.similarities()) {
                r.coherence_sim = Some(sim);
            }
            let keep = if opts.skip_coherence {
                candidates.len()
            } else {
                opts.config.c.min(candidates.len())
            };
            let survivors = coherence_rank(&model, keep)?;
            if opts.skip_consistency {
                survivors[0].0
            } else {
                let nli = backends.nli.as_deref().expect("validated");
                let judged: Vec<(usize, Result<(f64, NliLabel)>)> = survivors
                    .par_iter()
                    .map(|&(i, _)| {
                        let text = &candidates[i].text;
                        (
                            i,
                            persona_entailment(
                                nli,
                                &inst.persona,
                                text,
                                opts.config.persona_aggregation,
                            ),
                        )
                    })
                    .collect();
                let mut scored = Vec::with_capacity(judged.len());
                for (i, res) in judged {
                    match res {
                        Ok((p, label)) => {
                            records[i].entailment_prob = Some(p);
                            records[i].nli_label = Some(label);
                            scored.push(records[i].clone());
                        }
                        Err(e) => records[i].error = Some(e.to_string()),
                    }
                }
                if scored.is_empty() {
                    return Err(Error::Aggregation(format!(
                        "NLI scoring failed for every surviving candidate of {:?}",
                        inst.id
                    )));
                }
                select_final(&scored)?
            }
        }
        RerankMode::Mmi => {
            let backward = backends.backward.as_deref().expect("validated");
            let ranking = mmi_rerank(backward, inst, candidates)?;
            for &(i, ll) in &ranking.ranked {
                records[i].backward_loglik = Some(ll);
            }
            for (i, e) in &ranking.failed {
                records[*i].error = Some(e.clone());
            }
            ranking.best().expect("non-empty ranking")
        }
        RerankMode::Lls => {
            let ranked = lls_rerank(candidates)?;
            for &(i, lls) in &ranked {
                records[i].lls = lls.is_finite().then_some(lls);
            }
            ranked[0].0
        }
        RerankMode::None => 0,
    };
    Ok((records, final_index))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub instances: Vec<InstanceTiming>,
    pub generation_seconds: f64,
    pub evaluation_seconds: f64,
    pub total_seconds: f64,
}

/// Writes the run directory. Timings go to their own file so that the
/// candidate, score and final files depend only on inputs.
pub fn write_run_dir(dir: impl AsRef<Path>, output: &PipelineOutput) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_jsonl(
        &dir.join(CANDIDATES_FILE),
        output.outcomes.iter().map(|o| &o.run),
    )?;
    write_jsonl(
        &dir.join(SCORES_FILE),
        output.outcomes.iter().map(|o| &o.scores),
    )?;
    write_jsonl(
        &dir.join(FINAL_FILE),
        output.outcomes.iter().map(|o| &o.final_response),
    )?;
    let instances: Vec<InstanceTiming> = output.outcomes.iter().map(|o| o.timing.clone()).collect();
    let summary = TimingSummary {
        generation_seconds: instances.iter().map(|t| t.generation_seconds).sum(),
        evaluation_seconds: instances.iter().map(|t| t.evaluation_seconds).sum(),
        total_seconds: instances.iter().map(|t| t.total_seconds).sum(),
        instances,
    };
    fs::write(
        dir.join(TIMINGS_FILE),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let failures = dir.join(FAILURES_FILE);
    if output.failures.is_empty() {
        if failures.exists() {
            fs::remove_file(failures)?;
        }
    } else {
        write_jsonl(&failures, &output.failures)?;
    }
    Ok(())
}

pub fn read_candidates(dir: impl AsRef<Path>) -> Result<Vec<SamplingRun>> {
    read_jsonl(&dir.as_ref().join(CANDIDATES_FILE))
}

pub fn read_finals(dir: impl AsRef<Path>) -> Result<Vec<FinalResponse>> {
    read_jsonl(&dir.as_ref().join(FINAL_FILE))
}

pub fn read_timings(dir: impl AsRef<Path>) -> Result<TimingSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.as_ref().join(TIMINGS_FILE),
    )?)?)
}

/// Scorers used to compute a system's metric row.
pub struct EvaluationBackends {
    pub nli: Arc<dyn Backend>,
    /// Small-vocabulary channel; responses above 10,000 PPL are dropped.
    pub ppl_a: Arc<dyn Backend>,
    pub ppl_b: Arc<dyn Backend>,
}

/// Perplexity of a response under a scoring backend, or `None` for an
/// empty response.
pub fn response_ppl(scorer: &dyn Backend, text: &str) -> Result<Option<f64>> {
    if text.trim().is_empty() {
        return Ok(None);
    }
    let (ll, t) = gateway::loglikelihood(scorer, "", text)?;
    metrics::perplexity(ll, t).map(Some)
}

/// Computes the metric row for one finished run.
pub fn evaluate_system(
    system_name: &str,
    block: &str,
    dataset: &[DialogueInstance],
    finals: &[FinalResponse],
    timings: Option<&TimingSummary>,
    backends: &EvaluationBackends,
) -> Result<SystemResults> {
    let by_id: HashMap<&str, &DialogueInstance> =
        dataset.iter().map(|d| (d.id.as_str(), d)).collect();
    let paired: Vec<(&DialogueInstance, &FinalResponse)> = finals
        .iter()
        .map(|f| {
            by_id
                .get(f.instance_id.as_str())
                .map(|d| (*d, f))
                .ok_or_else(|| {
                    Error::validation(format!("response for unknown instance {:?}", f.instance_id))
                })
        })
        .collect::<Result<_>>()?;
    if paired.is_empty() {
        return Err(Error::validation("run has no final responses"));
    }
    let texts: Vec<&str> = paired.iter().map(|(_, f)| f.text.as_str()).collect();
    let golds: Vec<&str> = paired.iter().map(|(d, _)| d.gold.as_str()).collect();

    let scored: Vec<(Option<f64>, Option<f64>, NliLabel)> = paired
        .par_iter()
        .map(|(d, f)| {
            let a = response_ppl(backends.ppl_a.as_ref(), &f.text)?;
            let b = response_ppl(backends.ppl_b.as_ref(), &f.text)?;
            let (_, label) = persona_entailment(
                backends.nli.as_ref(),
                &d.persona,
                &f.text,
                PersonaAggregation::Max,
            )?;
            Ok((a, b, label))
        })
        .collect::<Result<_>>()?;
    let ppl_a: Vec<f64> = scored.iter().filter_map(|s| s.0).collect();
    let ppl_b: Vec<f64> = scored.iter().filter_map(|s| s.1).collect();
    let labels: Vec<NliLabel> = scored.iter().map(|s| s.2).collect();

    let n = paired.len() as f64;
    let (generation_seconds, evaluation_seconds) = timings.map_or((0.0, 0.0), |t| {
        (t.generation_seconds / n, t.evaluation_seconds / n)
    });
    let results = SystemResults {
        system_name: system_name.to_owned(),
        block: block.to_owned(),
        responses: paired
            .iter()
            .map(|(d, f)| (d.id.clone(), f.text.clone()))
            .collect(),
        ppl_a: metrics::ppl_aggregate(&ppl_a, Some(BERT_PPL_FILTER))?,
        ppl_b: metrics::ppl_aggregate(&ppl_b, None)?,
        dis1: metrics::distinct_n(&texts, 1)?,
        dis2: metrics::distinct_n(&texts, 2)?,
        c_score: metrics::c_mean(&labels)?,
        rep: metrics::repetition_rate(&texts, &golds)?,
        generation_seconds,
        evaluation_seconds,
    };
    results.validate()?;
    Ok(results)
}
