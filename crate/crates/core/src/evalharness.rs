//! Synthetic key-value retrieval, held-out perplexity, the training-recipe ablation grid and the
//! objective comparison.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::compressor::{compress_context, DecodeMode, Session};
use crate::error::{Error, Result};
use crate::maskgen::MaskVariant;
use crate::model::Model;
use crate::numkernel::Element;
use crate::rng;
use crate::segmenter::{RatioSampler, SamplingMode, SegmentPlan};
use crate::trainer::{self, MetricsLog, Objective, Sample, SampleSource, TrainConfig};

pub const QUERY_MARK: u8 = b'?';
pub const RECORD_END: u8 = b' ';

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filler {
    /// Gaps are spaces.
    None,
    /// Gaps are uniform random lowercase letters.
    Lowercase,
}

impl FromStr for Filler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Filler::None),
            "lowercase" => Ok(Filler::Lowercase),
            _ => Err(Error::Config(format!("unknown filler {s:?}"))),
        }
    }
}

/// Which record the query asks about.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryPolicy {
    First,
    Random,
    /// Record at relative depth `d ∈ [0, 1]` of the context.
    ByDepth(f64),
}

impl FromStr for QueryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(QueryPolicy::First),
            "random" => Ok(QueryPolicy::Random),
            _ => s
                .strip_prefix("depth:")
                .and_then(|d| d.parse::<f64>().ok())
                .filter(|d| (0.0..=1.0).contains(d))
                .map(QueryPolicy::ByDepth)
                .ok_or_else(|| Error::Config(format!("unknown query policy {s:?}"))),
        }
    }
}

/// Context of `context_len` byte tokens holding `pairs` records `KEY VALUE ␠` in filler,
/// followed by a query `?KEY` whose answer is `VALUE`.
///
/// Keys are uppercase letters and pairwise distinct. Values are digits, and no digit is used
/// twice within an instance, so every value token occurs exactly once in the context.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTaskSpec {
    pub pairs: usize,
    pub key_len: usize,
    pub value_len: usize,
    pub context_len: usize,
    pub filler: Filler,
    pub query: QueryPolicy,
    /// Letters used for keys (the first `key_alphabet` of `A..Z`).
    pub key_alphabet: usize,
    /// Query/answer pairs appended after the context (the first is the evaluated one).
    pub queries: usize,
    pub seed: u64,
}

impl Default for KvTaskSpec {
    fn default() -> Self {
        Self {
            pairs: 4,
            key_len: 1,
            value_len: 2,
            context_len: 128,
            filler: Filler::Lowercase,
            query: QueryPolicy::Random,
            key_alphabet: 26,
            queries: 1,
            seed: 0,
        }
    }
}

impl KvTaskSpec {
    pub fn record_len(&self) -> usize {
        self.key_len + self.value_len + 1
    }

    pub fn query_len(&self) -> usize {
        self.key_len + 1
    }

    /// Number of possible answers (digit sequences without repeats), i.e. the inverse of the
    /// random-guess accuracy.
    pub fn value_space(&self) -> f64 {
        (0..self.value_len).map(|i| (10 - i.min(10)) as f64).product()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.key_len == 0 || self.value_len == 0 || self.queries == 0 {
            return Err(Error::Config(
                "task.pairs, task.key_len, task.value_len and task.queries must be positive".into(),
            ));
        }
        if !(1..=26).contains(&self.key_alphabet) {
            return Err(Error::Config("task.key_alphabet must be in 1..=26".into()));
        }
        if self.pairs * self.record_len() > self.context_len {
            return Err(Error::Config(format!(
                "{} records of {} tokens do not fit a context of {}",
                self.pairs,
                self.record_len(),
                self.context_len
            )));
        }
        let keys = (self.key_alphabet as f64).powi(self.key_len as i32);
        if (self.pairs as f64) > keys || self.pairs * self.value_len > 10 {
            return Err(Error::Config("not enough distinct keys or digits for task.pairs".into()));
        }
        Ok(())
    }

    /// Applies one `task.*` key. Returns `false` for keys outside this section.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        match key {
            "task.pairs" => self.pairs = value.parse().map_err(|_| bad())?,
            "task.key_len" => self.key_len = value.parse().map_err(|_| bad())?,
            "task.value_len" => self.value_len = value.parse().map_err(|_| bad())?,
            "task.context_len" => self.context_len = value.parse().map_err(|_| bad())?,
            "task.filler" => self.filler = value.parse()?,
            "task.query" => self.query = value.parse()?,
            "task.key_alphabet" => self.key_alphabet = value.parse().map_err(|_| bad())?,
            "task.queries" => self.queries = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvInstance {
    pub context: Vec<u32>,
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
    /// Further query/answer pairs, only used as training text.
    pub followups: Vec<u32>,
}

impl KvInstance {
    /// Context, query and answer as one training sample whose target is query + answer.
    pub fn to_sample(&self) -> Sample {
        let mut tokens = self.context.clone();
        tokens.extend(&self.query);
        tokens.extend(&self.answer);
        tokens.extend(&self.followups);
        Sample {
            tokens,
            target_start: self.context.len(),
        }
    }
}

fn distinct_strings(rng: &mut rng::Rng, n: usize, len: usize, alphabet: &[u8]) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::with_capacity(n);
    while out.len() < n {
        let s: Vec<u32> = (0..len).map(|_| u32::from(alphabet[rng.gen_range(0..alphabet.len())])).collect();
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

pub fn gen_kv_task(spec: &KvTaskSpec) -> Result<KvInstance> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "kvtask");
    let letters: Vec<u8> = (b'A'..b'A' + spec.key_alphabet as u8).collect();
    let keys = distinct_strings(&mut rng, spec.pairs, spec.key_len, &letters);
    let mut digits: Vec<u8> = (b'0'..=b'9').collect();
    digits.shuffle(&mut rng);
    let values: Vec<Vec<u32>> = digits[..spec.pairs * spec.value_len]
        .chunks(spec.value_len)
        .map(|c| c.iter().map(|&d| u32::from(d)).collect())
        .collect();

    // Split the filler budget into pairs + 1 gaps.
    let free = spec.context_len - spec.pairs * spec.record_len();
    let mut cuts: Vec<usize> = (0..spec.pairs).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut gaps = Vec::with_capacity(spec.pairs + 1);
    let mut prev = 0;
    for c in cuts {
        gaps.push(c - prev);
        prev = c;
    }
    gaps.push(free - prev);

    let mut filler = |n: usize, out: &mut Vec<u32>| {
        for _ in 0..n {
            out.push(match spec.filler {
                Filler::None => u32::from(RECORD_END),
                Filler::Lowercase => u32::from(rng.gen_range(b'a'..=b'z')),
            });
        }
    };
    let mut context = Vec::with_capacity(spec.context_len);
    for i in 0..spec.pairs {
        filler(gaps[i], &mut context);
        context.extend(&keys[i]);
        context.extend(&values[i]);
        context.push(u32::from(RECORD_END));
    }
    filler(gaps[spec.pairs], &mut context);

    let target = match spec.query {
        QueryPolicy::First => 0,
        QueryPolicy::Random => rng.gen_range(0..spec.pairs),
        QueryPolicy::ByDepth(d) => ((spec.pairs - 1) as f64 * d).round() as usize,
    };
    let ask = |i: usize| {
        let mut q = vec![u32::from(QUERY_MARK)];
        q.extend(&keys[i]);
        q
    };
    let mut followups = Vec::new();
    for _ in 1..spec.queries {
        let i = rng.gen_range(0..spec.pairs);
        followups.extend(ask(i));
        followups.extend(&values[i]);
    }
    Ok(KvInstance {
        context,
        query: ask(target),
        answer: values[target].clone(),
        followups,
    })
}

/// Training samples drawn from a task spec; each sample seed becomes the instance seed.
#[derive(Debug, Clone)]
pub struct KvSource {
    pub spec: KvTaskSpec,
}

impl SampleSource for KvSource {
    fn sample(&self, seed: u64) -> Result<Sample> {
        Ok(gen_kv_task(&self.spec.with_seed(seed))?.to_sample())
    }
}

/// Anything that can answer a retrieval query after compressing the context at `ratio`.
pub trait Retriever {
    fn answer(&self, inst: &KvInstance, ratio: u32) -> Result<Vec<u32>>;
}

impl<T: Element> Retriever for Model<T> {
    fn answer(&self, inst: &KvInstance, ratio: u32) -> Result<Vec<u32>> {
        let kind = self.config().mask;
        let plan = SegmentPlan::monotonous(inst.context.len(), self.config().window, ratio)?;
        let cache = compress_context(self, &inst.context, &plan, kind)?;
        let mut s = Session::new(self, cache, RatioSampler::monotonous(ratio), kind)?;
        s.generate(&inst.query, inst.answer.len(), DecodeMode::Greedy)
    }
}

/// Instance `i` of an evaluation set.
pub fn eval_instance(spec: &KvTaskSpec, i: usize) -> Result<KvInstance> {
    gen_kv_task(&spec.with_seed(rng::child(rng::subseed(spec.seed, "eval"), i as u64)))
}

/// Exact-match accuracy per ratio over the same `n` instances.
pub fn eval_retrieval(model: &dyn Retriever, spec: &KvTaskSpec, ratios: &[u32], n: usize) -> Result<Vec<(u32, f64)>> {
    if n == 0 {
        return Err(Error::Contract("need at least one instance".into()));
    }
    let instances: Vec<KvInstance> = (0..n).map(|i| eval_instance(spec, i)).collect::<Result<_>>()?;
    ratios
        .iter()
        .map(|&ratio| {
            let mut hits = 0;
            for inst in &instances {
                if model.answer(inst, ratio)? == inst.answer {
                    hits += 1;
                }
            }
            Ok((ratio, hits as f64 / n as f64))
        })
        .collect()
}

/// Perplexity of each sample's target given its input compressed at `ratio`.
pub fn eval_ppl<T: Element>(model: &Model<T>, samples: &[Sample], ratio: u32) -> Result<f64> {
    let kind = model.config().mask;
    let w = model.config().window;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let split = if s.target_start == 0 { w.min(s.tokens.len()) } else { s.target_start };
        let (input, target) = s.tokens.split_at(split);
        if input.is_empty() || target.is_empty() {
            return Err(Error::Contract("sample needs both input and target tokens".into()));
        }
        let plan = SegmentPlan::monotonous(input.len(), w, ratio)?;
        let cache = compress_context(model, input, &plan, kind)?;
        let mut session = Session::new(model, cache, RatioSampler::monotonous(ratio), kind)?;
        let nll = session.score_nll(target)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((total / count as f64).exp())
}

/// Perplexity of the same targets with the whole input kept raw (one plain causal pass).
pub fn eval_ppl_uncompressed<T: Element>(model: &Model<T>, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let split = if s.target_start == 0 { model.config().window.min(s.tokens.len()) } else { s.target_start };
        let logits = model.run_plain(&s.tokens)?;
        for p in split..s.tokens.len() {
            let row = crate::numkernel::Tensor::matrix(1, logits.cols(), logits.row(p - 1).to_vec())?;
            total += crate::numkernel::nll_rows(&row, &[s.tokens[p] as usize])?[0];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((total / count as f64).exp())
}

/// Which training phases a cell runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stages {
    Both,
    PretrainOnly,
    FinetuneOnly,
}

impl fmt::Display for Stages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stages::Both => "both",
            Stages::PretrainOnly => "pretrain-only",
            Stages::FinetuneOnly => "finetune-only",
        })
    }
}

impl FromStr for Stages {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Stages::Both),
            "pretrain-only" => Ok(Stages::PretrainOnly),
            "finetune-only" => Ok(Stages::FinetuneOnly),
            _ => Err(Error::Config(format!("unknown stages {s:?}"))),
        }
    }
}

/// One training recipe of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub mask: MaskVariant,
    pub sampling: SamplingMode,
    pub stages: Stages,
}

/// Shared settings of an ablation run. Every cell starts from `base` and sees the same data.
pub struct AblationSetup<'a, T> {
    pub base: &'a Model<T>,
    pub pretrain: (&'a dyn SampleSource, TrainConfig),
    pub finetune: (&'a dyn SampleSource, TrainConfig),
    pub val: &'a [Sample],
    pub eval_spec: KvTaskSpec,
    pub eval_ratios: Vec<u32>,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub mask: MaskVariant,
    pub sampling: SamplingMode,
    pub stages: Stages,
    pub steps: usize,
    pub eval_ratio: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const HEADER: &'static str = "cell,mask,sampling,stages,steps,eval_ratio,accuracy";

    pub fn accuracy(&self, cell: &str, ratio: u32) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.cell == cell && r.eval_ratio == ratio)
            .map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.4}\n",
                r.cell,
                r.mask.name(),
                r.sampling,
                r.stages,
                r.steps,
                r.eval_ratio,
                r.accuracy
            ));
        }
        s
    }
}

/// Trains one model per cell and evaluates retrieval at every evaluation ratio.
pub fn run_ablation<T: Element>(setup: &AblationSetup<'_, T>, cells: &[AblationCell]) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for cell in cells {
        let mut model = setup.base.clone();
        let mut cfg = model.config().clone();
        cfg.mask.variant = cell.mask;
        let params = model.params().clone();
        model = Model::from_params(cfg, params)?;
        let mut steps = 0;
        let phases = match cell.stages {
            Stages::Both => vec![&setup.pretrain, &setup.finetune],
            Stages::PretrainOnly => vec![&setup.pretrain],
            Stages::FinetuneOnly => vec![&setup.finetune],
        };
        for (source, tc) in phases {
            let tc = TrainConfig {
                sampling: cell.sampling,
                ..tc.clone()
            };
            trainer::train(&mut model, *source, setup.val, &tc)?;
            steps += tc.steps;
        }
        for (ratio, accuracy) in eval_retrieval(&model, &setup.eval_spec, &setup.eval_ratios, setup.instances)? {
            table.rows.push(AblationRow {
                cell: cell.name.clone(),
                mask: cell.mask,
                sampling: cell.sampling,
                stages: cell.stages,
                steps,
                eval_ratio: ratio,
                accuracy,
            });
        }
    }
    Ok(table)
}

/// Validation curves of the two objectives trained from the same model on the same data.
pub fn compare_objectives<T: Element>(
    model: &Model<T>,
    source: &dyn SampleSource,
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(MetricsLog, MetricsLog)> {
    let run = |objective| {
        let mut m = model.clone();
        trainer::train(&mut m, source, val, &TrainConfig { objective, ..cfg.clone() })
    };
    Ok((run(Objective::CompressionLm)?, run(Objective::EncodeDecode)?))
}

/// First validated step whose perplexity is at or below `target`.
pub fn steps_to_reach(log: &MetricsLog, target: f64) -> Option<usize> {
    log.val_curve().into_iter().find(|&(_, p)| p <= target).map(|(s, _)| s)
}

