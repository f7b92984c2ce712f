//! Over-sampling: top-k filtered sequence sampling against a generation
//! backend with one deterministic RNG stream per candidate.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::{Candidate, DialogueInstance, PipelineConfig};
use crate::error::{Error, Result};
use crate::gateway::{self, Backend, Capability};

/// Tolerance on `logsumexp(logprobs) == 0`.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// A normalized next-token distribution over backend-local token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    token_ids: Vec<u32>,
    logprobs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(token_ids: Vec<u32>, logprobs: Vec<f64>) -> Result<Self> {
        if token_ids.len() != logprobs.len() {
            return Err(Error::validation(format!(
                "distribution has {} token ids but {} logprobs",
                token_ids.len(),
                logprobs.len()
            )));
        }
        if token_ids.is_empty() {
            return Err(Error::validation("distribution is empty"));
        }
        if let Some(lp) = logprobs.iter().find(|lp| lp.is_nan() || **lp > 1e-12) {
            return Err(Error::validation(format!("invalid logprob {lp}")));
        }
        let mut ids = token_ids.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("distribution repeats a token id"));
        }
        let lse = logsumexp(&logprobs);
        if lse.is_nan() || lse.abs() > NORMALIZATION_TOL {
            return Err(Error::validation(format!(
                "distribution is not normalized (logsumexp = {lse})"
            )));
        }
        Ok(Self {
            token_ids,
            logprobs,
        })
    }

    pub fn from_probs(entries: &[(u32, f64)]) -> Result<Self> {
        let (ids, lps) = entries.iter().map(|&(id, p)| (id, p.ln())).unzip();
        Self::new(ids, lps)
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.token_ids
            .iter()
            .copied()
            .zip(self.logprobs.iter().copied())
    }

    pub fn prob_of(&self, token: u32) -> Option<f64> {
        self.iter()
            .find(|(id, _)| *id == token)
            .map(|(_, lp)| lp.exp())
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Keeps the `k` most probable entries and renormalizes them.
///
/// Output entries are ordered by descending probability with ties broken by
/// ascending token id; the same order decides ties at the k-th position, so
/// the result does not depend on the order of the input entries.
pub fn top_k_filter(dist: &TokenDistribution, k: usize) -> Result<TokenDistribution> {
    if k < 1 {
        return Err(Error::validation("top-k width must be >= 1"));
    }
    let mut entries: Vec<(u32, f64)> = dist.iter().collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    entries.truncate(k);
    let kept: Vec<f64> = entries.iter().map(|e| e.1).collect();
    let norm = logsumexp(&kept);
    if !norm.is_finite() {
        return Err(Error::Internal(
            "top-k set has zero probability mass".into(),
        ));
    }
    Ok(TokenDistribution {
        token_ids: entries.iter().map(|e| e.0).collect(),
        logprobs: kept.iter().map(|lp| lp - norm).collect(),
    })
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator: the draw at position `counter` is a pure
/// function of `(seed, counter)` and equals the `counter`-th output of a
/// SplitMix64 sequence seeded with `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn bits(&self, counter: u64) -> u64 {
        mix64(
            self.seed
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.bits(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Stream seed for candidate `index` of an instance.
pub fn stream_seed(master_seed: u64, instance_id: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((instance_id.len() as u64).to_le_bytes());
    h.update(instance_id.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Inverse-CDF draw over a filtered distribution, walking entries in order.
pub fn draw(dist: &TokenDistribution, u: f64) -> (u32, f64) {
    let mut cum = 0.0;
    for (id, lp) in dist.iter() {
        cum += lp.exp();
        if u < cum {
            return (id, lp);
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    let last = dist.len() - 1;
    (dist.token_ids[last], dist.logprobs[last])
}

/// Samples one response token by token. The returned candidate has index 0;
/// callers assign the position in the candidate set.
pub fn sample_sequence(
    backend: &dyn Backend,
    context: &str,
    k: usize,
    stream_seed: u64,
    max_tokens: usize,
) -> Result<Candidate> {
    if max_tokens < 1 {
        return Err(Error::validation("max_tokens must be >= 1"));
    }
    let rng = CounterRng::new(stream_seed);
    let mut tokens = Vec::new();
    let mut pieces = Vec::new();
    let mut logprobs = Vec::new();
    for step in 0..max_tokens {
        let next = gateway::next_token_dist(backend, context, &tokens)?;
        let filtered = top_k_filter(&next.dist, k)?;
        let (token, lp) = draw(&filtered, rng.uniform(step as u64));
        if token == next.eos_token_id {
            break;
        }
        pieces.push(next.piece(token)?.to_owned());
        tokens.push(token);
        logprobs.push(lp);
    }
    Ok(Candidate {
        text: pieces.concat().trim().to_owned(),
        index: 0,
        token_count: tokens.len(),
        token_logprobs: Some(logprobs),
        seed_stream: stream_seed,
    })
}

/// The context string sent to generation backends: persona sentences one per
/// line, an empty line, then history utterances one per line.
pub fn generation_context(instance: &DialogueInstance) -> String {
    let mut out = instance.persona.join("\n");
    out.push_str("\n\n");
    out.push_str(&instance.history.join("\n"));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Batch when the backend supports it, step-wise otherwise.
    #[default]
    Auto,
    Stepwise,
    Batch,
}

/// The candidate set for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRun {
    pub instance_id: String,
    pub backend_id: String,
    pub k: usize,
    pub master_seed: u64,
    pub candidates: Vec<Candidate>,
    /// Seconds spent generating; kept out of the serialized form so that
    /// candidate files are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_generation: f64,
}

impl SamplingRun {
    pub fn s(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.candidates.iter().enumerate() {
            if c.index != i {
                return Err(Error::validation(format!(
                    "run {:?}: candidate at position {i} has index {}",
                    self.instance_id, c.index
                )));
            }
            c.validate()?;
        }
        Ok(())
    }
}

pub fn oversample(
    backend: &dyn Backend,
    instance: &DialogueInstance,
    config: &PipelineConfig,
    mode: SamplingMode,
) -> Result<SamplingRun> {
    config.validate()?;
    let started = Instant::now();
    let context = generation_context(instance);
    let batch = match mode {
        SamplingMode::Stepwise => false,
        SamplingMode::Batch => true,
        SamplingMode::Auto => backend.descriptor().supports(Capability::BatchSample),
    };
    let candidates = if batch {
        let seed = stream_seed(config.master_seed, &instance.id, 0);
        gateway::batch_sample(
            backend,
            &context,
            config.k,
            config.s,
            seed,
            config.max_tokens,
        )?
    } else {
        (0..config.s)
            .into_par_iter()
            .map(|i| {
                let seed = stream_seed(config.master_seed, &instance.id, i as u64);
                sample_sequence(backend, &context, config.k, seed, config.max_tokens).map(
                    |mut c| {
                        c.index = i;
                        c
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(SamplingRun {
        instance_id: instance.id.clone(),
        backend_id: backend.descriptor().backend_id.clone(),
        k: config.k,
        master_seed: config.master_seed,
        candidates,
        wall_time_generation: started.elapsed().as_secs_f64(),
    })
}

/// Total order used for ranking by a real-valued score: descending score,
/// then ascending index.
pub(crate) fn desc_then_index(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}
