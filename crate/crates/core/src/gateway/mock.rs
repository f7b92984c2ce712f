//! Deterministic in-process backends used by the test-suite and for offline
//! runs (`inprocess:<name>` descriptors).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::coherence::tokenize;
use crate::dialogue::DialogueInstance;
use crate::error::{Error, Result};
use crate::sampling::{sample_sequence, CounterRng};

use super::{
    Backend, BackendDescriptor, BatchSampleRequest, BatchSampleResponse, Capability,
    LoglikelihoodRequest, LoglikelihoodResponse, NextTokenDistRequest, NextTokenDistResponse,
    NliRequest, NliResponse, SampledResponse,
};

pub const BOS_TERM: &str = "<s>";
pub const EOS_TERM: &str = "</s>";

/// Step-wise generator behind a mock backend.
pub trait MockGenerator: Send + Sync {
    fn step(&self, context: &str, context_tokens: &[u32]) -> Result<NextTokenDistResponse>;
}

/// Bigram language model over whitespace terms. The row for [`BOS_TERM`]
/// gives the first-token distribution and [`EOS_TERM`] ends the response.
/// Token ids index the sorted vocabulary.
#[derive(Debug, Clone)]
pub struct MockBigramLM {
    vocab: Vec<String>,
    rows: BTreeMap<String, Vec<(String, f64)>>,
}

impl MockBigramLM {
    pub fn new(rows: BTreeMap<String, Vec<(String, f64)>>) -> Result<Self> {
        if !rows.contains_key(BOS_TERM) {
            return Err(Error::validation("bigram table has no start row"));
        }
        let mut vocab = BTreeSet::new();
        vocab.insert(EOS_TERM.to_owned());
        for (term, row) in &rows {
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!(
                    "bigram row {term:?} sums to {total}"
                )));
            }
            if row.iter().any(|(_, p)| p.is_nan() || *p <= 0.0) {
                return Err(Error::validation(format!(
                    "bigram row {term:?} has a non-positive entry"
                )));
            }
            vocab.extend(row.iter().map(|(t, _)| t.clone()));
        }
        for t in &vocab {
            if t != EOS_TERM && !rows.contains_key(t) {
                return Err(Error::validation(format!("bigram term {t:?} has no row")));
            }
        }
        Ok(Self {
            vocab: vocab.into_iter().collect(),
            rows,
        })
    }

    pub fn from_rows(rows: &[(&str, &[(&str, f64)])]) -> Result<Self> {
        Self::new(
            rows.iter()
                .map(|(term, row)| {
                    (
                        term.to_string(),
                        row.iter().map(|(t, p)| (t.to_string(), *p)).collect(),
                    )
                })
                .collect(),
        )
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_id(&self, term: &str) -> Option<u32> {
        self.vocab
            .binary_search_by(|t| t.as_str().cmp(term))
            .ok()
            .map(|i| i as u32)
    }

    pub fn row(&self, term: &str) -> Option<&[(String, f64)]> {
        self.rows.get(term).map(Vec::as_slice)
    }

    /// The built-in table used by `inprocess:bigram` and friends.
    pub fn persona_chat() -> Self {
        Self::from_rows(&[
            (
                "<s>",
                &[
                    ("i", 0.35),
                    ("my", 0.2),
                    ("do", 0.1),
                    ("that", 0.1),
                    ("yes", 0.1),
                    ("what", 0.1),
                    ("hello", 0.05),
                ],
            ),
            (
                "i",
                &[
                    ("play", 0.3),
                    ("like", 0.25),
                    ("love", 0.2),
                    ("work", 0.15),
                    ("am", 0.1),
                ],
            ),
            ("my", &[("favorite", 0.4), ("dog", 0.3), ("job", 0.3)]),
            ("do", &[("you", 0.8), ("</s>", 0.2)]),
            ("you", &[("like", 0.4), ("play", 0.3), ("</s>", 0.3)]),
            ("that", &[("is", 0.7), ("</s>", 0.3)]),
            ("is", &[("great", 0.4), ("music", 0.3), ("fun", 0.3)]),
            ("yes", &[("i", 0.6), ("</s>", 0.4)]),
            ("what", &[("do", 0.6), ("is", 0.4)]),
            ("hello", &[("</s>", 0.5), ("i", 0.5)]),
            (
                "play",
                &[("the", 0.5), ("piano", 0.2), ("guitar", 0.2), ("</s>", 0.1)],
            ),
            ("the", &[("piano", 0.4), ("guitar", 0.3), ("music", 0.3)]),
            ("piano", &[("and", 0.3), ("</s>", 0.7)]),
            ("guitar", &[("and", 0.3), ("</s>", 0.7)]),
            ("and", &[("sing", 0.4), ("i", 0.3), ("guitar", 0.3)]),
            ("sing", &[("folk", 0.5), ("</s>", 0.5)]),
            ("folk", &[("music", 0.8), ("</s>", 0.2)]),
            ("music", &[("</s>", 0.6), ("and", 0.4)]),
            ("like", &[("music", 0.4), ("dogs", 0.3), ("to", 0.3)]),
            ("love", &[("music", 0.5), ("dogs", 0.3), ("to", 0.2)]),
            ("to", &[("sing", 0.5), ("play", 0.5)]),
            ("dogs", &[("</s>", 0.7), ("and", 0.3)]),
            ("work", &[("as", 0.6), ("</s>", 0.4)]),
            ("as", &[("a", 0.9), ("</s>", 0.1)]),
            ("a", &[("custodian", 0.6), ("musician", 0.4)]),
            ("custodian", &[("</s>", 1.0)]),
            ("musician", &[("</s>", 0.8), ("and", 0.2)]),
            ("am", &[("a", 0.7), ("</s>", 0.3)]),
            ("favorite", &[("music", 0.6), ("dog", 0.4)]),
            ("dog", &[("is", 0.5), ("</s>", 0.5)]),
            ("job", &[("is", 0.6), ("</s>", 0.4)]),
            ("great", &[("</s>", 1.0)]),
            ("fun", &[("</s>", 0.6), ("and", 0.4)]),
        ])
        .expect("built-in bigram table is valid")
    }
}

impl MockGenerator for MockBigramLM {
    fn step(&self, _context: &str, context_tokens: &[u32]) -> Result<NextTokenDistResponse> {
        let prev = match context_tokens.last() {
            None => BOS_TERM,
            Some(&id) => self
                .vocab
                .get(id as usize)
                .map(String::as_str)
                .ok_or_else(|| Error::validation(format!("unknown token id {id}")))?,
        };
        let row = self
            .rows
            .get(prev)
            .ok_or_else(|| Error::validation(format!("no continuation after {prev:?}")))?;
        let eos = self.token_id(EOS_TERM).expect("eos in vocab");
        Ok(NextTokenDistResponse {
            token_ids: row
                .iter()
                .map(|(t, _)| self.token_id(t).expect("row term in vocab"))
                .collect(),
            logprobs: row.iter().map(|(_, p)| p.ln()).collect(),
            eos_token_id: eos,
            pieces: row.iter().map(|(t, _)| format!(" {t}")).collect(),
        })
    }
}

/// Emits a fixed distribution per step, then end-of-sequence forever.
#[derive(Debug, Clone)]
pub struct ScriptedMock {
    vocab: Vec<String>,
    steps: Vec<Vec<(String, f64)>>,
}

impl ScriptedMock {
    pub fn new(steps: Vec<Vec<(String, f64)>>) -> Result<Self> {
        let mut vocab = BTreeSet::new();
        vocab.insert(EOS_TERM.to_owned());
        for row in &steps {
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!("scripted step sums to {total}")));
            }
            vocab.extend(row.iter().map(|(t, _)| t.clone()));
        }
        Ok(Self {
            vocab: vocab.into_iter().collect(),
            steps,
        })
    }

    /// One token per step with probability 1.
    pub fn forced(tokens: &[&str]) -> Self {
        Self::new(tokens.iter().map(|t| vec![(t.to_string(), 1.0)]).collect())
            .expect("forced script is normalized")
    }

    pub fn token_id(&self, term: &str) -> Option<u32> {
        self.vocab
            .binary_search_by(|t| t.as_str().cmp(term))
            .ok()
            .map(|i| i as u32)
    }
}

impl MockGenerator for ScriptedMock {
    fn step(&self, _context: &str, context_tokens: &[u32]) -> Result<NextTokenDistResponse> {
        let eos = self.token_id(EOS_TERM).expect("eos in vocab");
        let eos_row = [(EOS_TERM.to_owned(), 1.0)];
        let row: &[(String, f64)] = self
            .steps
            .get(context_tokens.len())
            .map(Vec::as_slice)
            .unwrap_or(&eos_row);
        Ok(NextTokenDistResponse {
            token_ids: row
                .iter()
                .map(|(t, _)| self.token_id(t).expect("term in vocab"))
                .collect(),
            logprobs: row.iter().map(|(_, p)| p.ln()).collect(),
            eos_token_id: eos,
            pieces: row.iter().map(|(t, _)| format!(" {t}")).collect(),
        })
    }
}

/// Lexical NLI: entailment is the fraction of distinct hypothesis terms that
/// also occur in the premise; the rest is split 2:1 between neutral and
/// contradiction.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalNli;

impl LexicalNli {
    pub fn judge(&self, premise: &str, hypothesis: &str) -> NliResponse {
        let premise: HashSet<String> = tokenize(premise).into_iter().collect();
        let hyp: HashSet<String> = tokenize(hypothesis).into_iter().collect();
        let entailment = if hyp.is_empty() {
            0.0
        } else {
            hyp.iter().filter(|t| premise.contains(*t)).count() as f64 / hyp.len() as f64
        };
        let rest = 1.0 - entailment;
        NliResponse {
            entailment,
            neutral: rest * 2.0 / 3.0,
            contradiction: rest / 3.0,
        }
    }
}

/// Loglikelihood scorers for the `loglikelihood` endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockScorer {
    /// `-(continuation chars) / 4`, token count = word count.
    CharLength,
    /// Per continuation term: `ln 0.5` if the term occurs in the context,
    /// `ln 0.05` otherwise.
    Overlap,
}

impl MockScorer {
    pub fn score(&self, context: &str, continuation: &str) -> LoglikelihoodResponse {
        match self {
            MockScorer::CharLength => LoglikelihoodResponse {
                total_loglik: -(continuation.chars().count() as f64) / 4.0,
                token_count: continuation.split_whitespace().count().max(1),
            },
            MockScorer::Overlap => {
                let ctx: HashSet<String> = tokenize(context).into_iter().collect();
                let terms = tokenize(continuation);
                if terms.is_empty() {
                    return LoglikelihoodResponse {
                        total_loglik: 0.05f64.ln(),
                        token_count: 1,
                    };
                }
                let total = terms
                    .iter()
                    .map(|t| {
                        if ctx.contains(t) {
                            0.5f64.ln()
                        } else {
                            0.05f64.ln()
                        }
                    })
                    .sum();
                LoglikelihoodResponse {
                    total_loglik: total,
                    token_count: terms.len(),
                }
            }
        }
    }
}

/// A mock backend assembled from optional parts. Capabilities follow the
/// parts present unless restricted explicitly.
pub struct MockBackend {
    descriptor: BackendDescriptor,
    generator: Option<Box<dyn MockGenerator>>,
    nli: Option<LexicalNli>,
    scorer: Option<MockScorer>,
}

impl MockBackend {
    pub fn builder(backend_id: &str) -> MockBackendBuilder {
        MockBackendBuilder {
            backend_id: backend_id.to_owned(),
            generator: None,
            batch: false,
            nli: None,
            scorer: None,
        }
    }

    /// Step-wise generator only.
    pub fn generator(backend_id: &str, gen: impl MockGenerator + 'static) -> Self {
        Self::builder(backend_id).generator(gen).build()
    }

    pub fn by_name(name: &str) -> Result<Self> {
        let id = format!("{}{name}", super::INPROCESS_PREFIX);
        let b = Self::builder(&id);
        Ok(match name {
            "bigram" => b
                .generator(MockBigramLM::persona_chat())
                .batch(true)
                .build(),
            "bigram-stepwise" => b.generator(MockBigramLM::persona_chat()).build(),
            "lexical-nli" => b.nli(LexicalNli).build(),
            "char-length" => b.scorer(MockScorer::CharLength).build(),
            "overlap" => b.scorer(MockScorer::Overlap).build(),
            "suite" => b
                .generator(MockBigramLM::persona_chat())
                .nli(LexicalNli)
                .scorer(MockScorer::Overlap)
                .build(),
            other => {
                return Err(Error::validation(format!(
                    "unknown in-process backend {other:?} (expected one of: {})",
                    MOCK_NAMES.join(", ")
                )))
            }
        })
    }
}

pub const MOCK_NAMES: [&str; 6] = [
    "bigram",
    "bigram-stepwise",
    "lexical-nli",
    "char-length",
    "overlap",
    "suite",
];

pub struct MockBackendBuilder {
    backend_id: String,
    generator: Option<Box<dyn MockGenerator>>,
    batch: bool,
    nli: Option<LexicalNli>,
    scorer: Option<MockScorer>,
}

impl MockBackendBuilder {
    pub fn generator(mut self, gen: impl MockGenerator + 'static) -> Self {
        self.generator = Some(Box::new(gen));
        self
    }

    /// Also advertise server-side batch sampling.
    pub fn batch(mut self, on: bool) -> Self {
        self.batch = on;
        self
    }

    pub fn nli(mut self, nli: LexicalNli) -> Self {
        self.nli = Some(nli);
        self
    }

    pub fn scorer(mut self, scorer: MockScorer) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn build(self) -> MockBackend {
        let mut caps = Vec::new();
        if self.generator.is_some() {
            caps.push(Capability::NextTokenDist);
            if self.batch {
                caps.push(Capability::BatchSample);
            }
        }
        if self.nli.is_some() {
            caps.push(Capability::Nli);
        }
        if self.scorer.is_some() {
            caps.push(Capability::Loglikelihood);
        }
        let url = if self.backend_id.starts_with(super::INPROCESS_PREFIX) {
            self.backend_id.clone()
        } else {
            format!("{}{}", super::INPROCESS_PREFIX, self.backend_id)
        };
        let descriptor = BackendDescriptor::new(self.backend_id, url, caps)
            .expect("mock backend has at least one part");
        MockBackend {
            descriptor,
            generator: self.generator,
            nli: self.nli,
            scorer: self.scorer,
        }
    }
}

/// Step-only view of a generator, used to run the in-core sampler on behalf
/// of a batch request.
struct StepOnly<'a> {
    descriptor: BackendDescriptor,
    generator: &'a dyn MockGenerator,
}

impl Backend for StepOnly<'_> {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn raw_next_token_dist(&self, req: &NextTokenDistRequest) -> Result<NextTokenDistResponse> {
        self.generator.step(&req.context, &req.context_tokens)
    }
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn raw_next_token_dist(&self, req: &NextTokenDistRequest) -> Result<NextTokenDistResponse> {
        match &self.generator {
            Some(g) => g.step(&req.context, &req.context_tokens),
            None => Err(self.unsupported(Capability::NextTokenDist)),
        }
    }

    /// Candidate `i` of the batch is sampled with stream seed `seed + i`.
    fn raw_batch_sample(&self, req: &BatchSampleRequest) -> Result<BatchSampleResponse> {
        let Some(generator) = self.generator.as_deref() else {
            return Err(self.unsupported(Capability::BatchSample));
        };
        let step_only = StepOnly {
            descriptor: BackendDescriptor::new(
                self.descriptor.backend_id.clone(),
                self.descriptor.base_url.clone(),
                [Capability::NextTokenDist],
            )?,
            generator,
        };
        let candidates = (0..req.n as u64)
            .map(|i| {
                let seed = req.seed.wrapping_add(i);
                let c = sample_sequence(&step_only, &req.context, req.k, seed, req.max_tokens)?;
                Ok(SampledResponse {
                    text: c.text,
                    token_count: c.token_count,
                    token_logprobs: c.token_logprobs,
                    seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchSampleResponse {
            request_id: req.request_id.clone(),
            candidates,
        })
    }

    fn raw_loglikelihood(&self, req: &LoglikelihoodRequest) -> Result<LoglikelihoodResponse> {
        match &self.scorer {
            Some(s) => Ok(s.score(&req.context, &req.continuation)),
            None => Err(self.unsupported(Capability::Loglikelihood)),
        }
    }

    fn raw_nli(&self, req: &NliRequest) -> Result<NliResponse> {
        match &self.nli {
            Some(n) => Ok(n.judge(&req.premise, &req.hypothesis)),
            None => Err(self.unsupported(Capability::Nli)),
        }
    }
}

const PERSONA_BANK: [&str; 8] = [
    "i play the piano and guitar and sing.",
    "my favorite type of music to sing is folk music.",
    "i also work as a custodian to help pay the bills.",
    "i am a musician and hope to make it big some day.",
    "i love dogs.",
    "i like to sing.",
    "my dog is great fun.",
    "my job is to clean the school.",
];

const HISTORY_BANK: [&str; 8] = [
    "hello! how are you today?",
    "that is interesting. what instruments do you play?",
    "do you like music?",
    "what do you do for fun?",
    "what is your job?",
    "do you have a dog?",
    "i like to play the guitar too.",
    "yes, i love folk music.",
];

const GOLD_BANK: [&str; 6] = [
    "i play the piano and the guitar.",
    "i like folk music.",
    "i work as a custodian.",
    "my dog is great fun.",
    "yes i love to sing.",
    "i am a musician.",
];

/// Small synthetic persona-dialogue dataset drawn deterministically from
/// fixed sentence banks.
pub fn demo_dataset(n: usize) -> Vec<DialogueInstance> {
    (0..n)
        .map(|i| {
            let rng = CounterRng::new(0xD1A1_06E5 ^ i as u64);
            let pick = |c: u64, len: usize| (rng.bits(c) % len as u64) as usize;
            let n_persona = 2 + pick(0, 3);
            let mut persona: Vec<String> = Vec::new();
            let mut c = 1;
            while persona.len() < n_persona {
                let s = PERSONA_BANK[pick(c, PERSONA_BANK.len())];
                if !persona.iter().any(|p| p == s) {
                    persona.push(s.to_owned());
                }
                c += 1;
            }
            let n_hist = 1 + pick(100, 4);
            let history = (0..n_hist)
                .map(|h| HISTORY_BANK[pick(200 + h as u64, HISTORY_BANK.len())].to_owned())
                .collect();
            DialogueInstance {
                id: format!("demo-{i:04}"),
                persona,
                history,
                gold: GOLD_BANK[pick(300, GOLD_BANK.len())].to_owned(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway;

    #[test]
    fn bigram_row_lookup() {
        let lm = MockBigramLM::from_rows(&[
            ("<s>", &[("a", 1.0)]),
            ("a", &[("b", 0.7), ("</s>", 0.3)]),
            ("b", &[("</s>", 1.0)]),
        ])
        .unwrap();
        let b = MockBackend::generator("m", lm.clone());
        let a = lm.token_id("a").unwrap();
        let nt = gateway::next_token_dist(&b, "", &[a]).unwrap();
        let bid = lm.token_id("b").unwrap();
        let eos = lm.token_id(EOS_TERM).unwrap();
        assert_eq!(nt.dist.len(), 2);
        assert!((nt.dist.prob_of(bid).unwrap() - 0.7).abs() < 1e-12);
        assert!((nt.dist.prob_of(eos).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(nt.eos_token_id, eos);
    }

    #[test]
    fn bigram_rows_must_normalize() {
        assert!(
            MockBigramLM::from_rows(&[("<s>", &[("a", 0.5)]), ("a", &[("</s>", 1.0)])]).is_err()
        );
        assert!(MockBigramLM::from_rows(&[("<s>", &[("a", 1.0)])]).is_err());
    }

    #[test]
    fn persona_table_is_valid() {
        let lm = MockBigramLM::persona_chat();
        assert!(lm.vocab().len() > 20);
    }

    #[test]
    fn lexical_nli_rule() {
        let n = LexicalNli;
        let full = n.judge("i play piano", "i play piano");
        assert_eq!(
            (full.entailment, full.neutral, full.contradiction),
            (1.0, 0.0, 0.0)
        );
        let none = n.judge("i play piano", "dogs bark");
        assert!((none.entailment - 0.0).abs() < 1e-12);
        assert!((none.neutral - 2.0 / 3.0).abs() < 1e-12);
        assert!((none.contradiction - 1.0 / 3.0).abs() < 1e-12);
        // hypothesis {i, sing}: one of two distinct terms in the premise
        let half = n.judge("I play piano.", "i sing");
        assert!((half.entailment - 0.5).abs() < 1e-12);
        assert!((half.neutral - 1.0 / 3.0).abs() < 1e-12);
        assert!((half.contradiction - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn char_length_scorer_formula() {
        let b = MockBackend::by_name("char-length").unwrap();
        for (ctx, cont) in [("", "i play the piano"), ("whatever", "hello there friend")] {
            let (ll, t) = gateway::loglikelihood(&b, ctx, cont).unwrap();
            assert!((ll - -(cont.len() as f64) / 4.0).abs() < 1e-12);
            assert_eq!(t, cont.split(' ').count());
        }
        assert!(matches!(
            gateway::loglikelihood(&b, "", ""),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn batch_of_one_matches_stepwise() {
        let batch = MockBackend::by_name("bigram").unwrap();
        let step = MockBackend::by_name("bigram-stepwise").unwrap();
        for seed in [0u64, 7, 12345] {
            let got = gateway::batch_sample(&batch, "ctx", 5, 1, seed, 32).unwrap();
            let want = sample_sequence(&step, "ctx", 5, seed, 32).unwrap();
            assert_eq!(got, vec![want]);
        }
    }

    #[test]
    fn batch_count_contract() {
        let batch = MockBackend::by_name("bigram").unwrap();
        let got = gateway::batch_sample(&batch, "ctx", 5, 5, 1, 32).unwrap();
        assert_eq!(
            got.iter().map(|c| c.index).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn unknown_mock_name() {
        assert!(MockBackend::by_name("nope").is_err());
    }

    #[test]
    fn demo_dataset_is_valid_and_stable() {
        let a = demo_dataset(30);
        assert_eq!(a, demo_dataset(30));
        for inst in &a {
            inst.validate().unwrap();
        }
        let ids: HashSet<_> = a.iter().map(|i| &i.id).collect();
        assert_eq!(ids.len(), 30);
    }
}
