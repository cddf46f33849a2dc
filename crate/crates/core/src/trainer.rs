//! Training of the compression parameters (and of a stand-in base model).

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::maskgen::MaskKind;
use crate::model::{names, Bound, Model, ParamSet};
use crate::numkernel::{Element, Graph, Var};
use crate::rng;
use crate::segmenter::{assign_ratios, partition, RatioSampler, SamplingMode, SegmentPlan, DEFAULT_RATIOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Next-token loss on every token after the first segment.
    CompressionLm,
    /// Loss on the target tokens only.
    EncodeDecode,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::CompressionLm => "compression-lm",
            Objective::EncodeDecode => "encode-decode",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compression-lm" => Ok(Objective::CompressionLm),
            "encode-decode" => Ok(Objective::EncodeDecode),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Plain language modelling of the base weights.
    Base,
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Phase::Base),
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Config(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub candidates: Vec<u32>,
    pub sampling: SamplingMode,
    pub seed: u64,
    /// Validate every this many steps (0 = only before and after).
    pub eval_every: usize,
    pub phase: Phase,
    /// Global gradient-norm clip (0 = off).
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::CompressionLm,
            lr: 1e-3,
            steps: 200,
            batch_size: 8,
            candidates: DEFAULT_RATIOS.to_vec(),
            sampling: SamplingMode::PerSegment,
            seed: 0,
            eval_every: 50,
            phase: Phase::Finetune,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be at least 1".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be non-negative".into()));
        }
        self.sampler().map(|_| ())
    }

    pub fn sampler(&self) -> Result<RatioSampler> {
        RatioSampler::new(self.candidates.clone(), self.sampling, rng::subseed(self.seed, "trainer.ratios"))
    }

    /// Applies one `train.*` key. Returns `false` for keys outside this section.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        match key {
            "train.objective" => self.objective = value.parse()?,
            "train.lr" => self.lr = value.parse().map_err(|_| bad())?,
            "train.steps" => self.steps = value.parse().map_err(|_| bad())?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "train.ratios" => {
                self.candidates = value
                    .split(',')
                    .map(|r| r.trim().parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            }
            "train.sampling" => self.sampling = value.parse()?,
            "train.eval_every" => self.eval_every = value.parse().map_err(|_| bad())?,
            "train.phase" => self.phase = value.parse()?,
            "train.grad_clip" => self.grad_clip = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Learning rate at `step`: linear decay from `lr` towards zero, no warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * (1.0 - step as f64 / self.steps as f64)
    }
}

/// One training or validation example.
///
/// Tokens before `target_start` are input; the rest is the target. A sample without a
/// distinguished target uses `target_start = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub target_start: usize,
}

/// Deterministic sample generator: the same seed always yields the same sample.
pub trait SampleSource {
    fn sample(&self, seed: u64) -> Result<Sample>;
}

/// Random slices of a token stream, with the last `target_len` tokens as target.
#[derive(Debug, Clone)]
pub struct StreamSource {
    pub tokens: Vec<u32>,
    pub sample_len: usize,
    pub target_len: usize,
}

impl SampleSource for StreamSource {
    fn sample(&self, seed: u64) -> Result<Sample> {
        if self.sample_len == 0 || self.tokens.len() < self.sample_len || self.target_len > self.sample_len {
            return Err(Error::EmptyInput(format!(
                "stream of {} tokens cannot supply samples of {} ({} target)",
                self.tokens.len(),
                self.sample_len,
                self.target_len
            )));
        }
        use rand::Rng as _;
        let start = rng::from_seed(seed).gen_range(0..=self.tokens.len() - self.sample_len);
        Ok(Sample {
            tokens: self.tokens[start..start + self.sample_len].to_vec(),
            target_start: self.sample_len - self.target_len,
        })
    }
}

/// Segmentation of a sample: input and target are partitioned separately, so a target never
/// shares a window with input tokens.
pub fn sample_plan(sample: &Sample, window: usize, sampler: &RatioSampler) -> Result<SegmentPlan> {
    let t = sample.tokens.len();
    let s = sample.target_start;
    if s == 0 || s >= t {
        return Ok(assign_ratios(&partition(t, window)?, sampler));
    }
    let input = partition(s, window)?;
    let target = partition(t - s, window)?;
    let ratios = sampler.draw(input.spans.len() + target.spans.len());
    let a = SegmentPlan::from_segments(window, segments(&input, &ratios[..input.spans.len()]))?;
    let b = SegmentPlan::from_segments(window, segments(&target, &ratios[input.spans.len()..]))?;
    a.concat(&b)
}

fn segments(skel: &crate::segmenter::PlanSkeleton, ratios: &[u32]) -> Vec<crate::segmenter::Segment> {
    skel.spans
        .iter()
        .zip(ratios)
        .map(|(span, &ratio)| crate::segmenter::Segment {
            span: *span,
            ratio,
            ug_count: crate::segmenter::ug_count(span.len(), ratio),
        })
        .collect()
}

/// Mean NLL of every token at 0-based position `≥ from`, in one unified pass.
pub fn supervised_loss<T: Element>(
    g: &mut Graph<T>,
    b: &Bound,
    model: &Model<T>,
    tokens: &[u32],
    plan: &SegmentPlan,
    kind: MaskKind,
    from: usize,
) -> Result<Var> {
    let out = model.unified_forward(g, b, tokens, plan, kind)?;
    let t = tokens.len();
    // Row r predicts token r + 1.
    let targets: Vec<usize> = (0..t).map(|r| if r + 1 < t { tokens[r + 1] as usize } else { 0 }).collect();
    let include: Vec<bool> = (0..t).map(|r| r + 1 < t && r + 1 >= from).collect();
    g.cross_entropy_mean(out.logits, &targets, &include)
}

/// Compression-based LM loss: all tokens outside the first segment are supervised.
pub fn compression_lm_loss_var<T: Element>(
    g: &mut Graph<T>,
    b: &Bound,
    model: &Model<T>,
    tokens: &[u32],
    plan: &SegmentPlan,
    kind: MaskKind,
) -> Result<Var> {
    if plan.len() < 2 {
        return Err(Error::NoSupervision);
    }
    let first = plan.segments()[0].len();
    supervised_loss(g, b, model, tokens, plan, kind, first)
}

pub fn compression_lm_loss<T: Element>(model: &Model<T>, tokens: &[u32], plan: &SegmentPlan, kind: MaskKind) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind_frozen(&mut g);
    let loss = compression_lm_loss_var(&mut g, &b, model, tokens, plan, kind)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Plan for an input compressed at `ratio` followed by a target (also windowed at `ratio`).
pub fn encode_decode_plan(input_len: usize, target_len: usize, window: usize, ratio: u32) -> Result<SegmentPlan> {
    if input_len == 0 {
        return Err(Error::EmptyInput("encode-decode input is empty".into()));
    }
    if target_len == 0 {
        return Err(Error::Contract("encode-decode target is empty".into()));
    }
    SegmentPlan::monotonous(input_len, window, ratio)?.concat(&SegmentPlan::monotonous(target_len, window, ratio)?)
}

/// Encode-decode loss over an arbitrary plan whose first `input_len` tokens are input.
pub fn encode_decode_loss_var<T: Element>(
    g: &mut Graph<T>,
    b: &Bound,
    model: &Model<T>,
    tokens: &[u32],
    input_len: usize,
    plan: &SegmentPlan,
    kind: MaskKind,
) -> Result<Var> {
    if input_len == 0 {
        return Err(Error::EmptyInput("encode-decode input is empty".into()));
    }
    if input_len >= tokens.len() {
        return Err(Error::Contract("encode-decode target is empty".into()));
    }
    supervised_loss(g, b, model, tokens, plan, kind, input_len)
}

pub fn encode_decode_loss<T: Element>(
    model: &Model<T>,
    input: &[u32],
    target: &[u32],
    ratio: u32,
    kind: MaskKind,
) -> Result<f64> {
    let plan = encode_decode_plan(input.len(), target.len(), model.config().window, ratio)?;
    let tokens: Vec<u32> = input.iter().chain(target).copied().collect();
    let mut g = Graph::new();
    let b = model.bind_frozen(&mut g);
    let loss = encode_decode_loss_var(&mut g, &b, model, &tokens, input.len(), &plan, kind)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Adam with bias correction; moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Starts a new step (advances the bias-correction counter).
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates parameter group `i` in place.
    pub fn update<T: Element>(&mut self, i: usize, param: &mut [T], grad: &[f64], lr: f64) {
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for j in 0..param.len() {
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
            let upd = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            param[j] = T::from_f64(param[j].as_f64() - upd);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_ppl: Option<f64>,
    pub lr: f64,
    pub objective: Objective,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,phase,train_loss,val_ppl,lr,objective";

    /// `(step, val_ppl)` for rows that were validated.
    pub fn val_curve(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.val_ppl.map(|p| (r.step, p))).collect()
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let val = r.val_ppl.map(|v| format!("{v:.6}")).unwrap_or_default();
            let loss = if r.train_loss.is_nan() { String::new() } else { format!("{:.6}", r.train_loss) };
            s.push_str(&format!("{},{},{loss},{val},{:e},{}\n", r.step, r.phase, r.lr, r.objective));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Validation perplexity: target tokens of every sample (tokens after the first segment when
/// the sample has no target), token-weighted.
pub fn val_ppl<T: Element>(model: &Model<T>, val: &[Sample], sampler: &RatioSampler) -> Result<f64> {
    let w = model.config().window;
    let kind = model.config().mask;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, s) in val.iter().enumerate() {
        let plan = sample_plan(s, w, &sampler.reseeded(rng::child(sampler.seed(), i as u64)))?;
        let from = s.target_start.max(plan.segments()[0].len());
        let n = s.tokens.len().saturating_sub(from);
        if n == 0 {
            continue;
        }
        let mut g = Graph::new();
        let b = model.bind_frozen(&mut g);
        let loss = supervised_loss(&mut g, &b, model, &s.tokens, &plan, kind, from)?;
        total += g.value(loss).data()[0].as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((total / count as f64).exp())
}

/// Plain-LM validation perplexity over all next-token positions.
pub fn plain_val_ppl<T: Element>(model: &Model<T>, val: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in val {
        if s.tokens.len() < 2 {
            continue;
        }
        let logits = model.run_plain(&s.tokens)?;
        let rows = logits.rows() - 1;
        let sub = crate::numkernel::Tensor::matrix(rows, logits.cols(), logits.data()[..rows * logits.cols()].to_vec())?;
        let targets: Vec<usize> = s.tokens[1..].iter().map(|&t| t as usize).collect();
        total += crate::numkernel::nll_rows(&sub, &targets)?.iter().sum::<f64>();
        count += rows;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((total / count as f64).exp())
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Shared optimisation loop over the parameters selected by `trainable`.
fn optimize<T: Element>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
    mut loss_fn: impl FnMut(&mut Graph<T>, &Bound, &Model<T>, u64) -> Result<Var>,
    mut validate: impl FnMut(&Model<T>) -> Result<f64>,
) -> Result<MetricsLog> {
    cfg.validate()?;
    let slots: Vec<usize> = (0..model.params().len())
        .filter(|&i| trainable(&model.params().at(i).name))
        .collect();
    if slots.is_empty() {
        return Err(Error::Contract("no trainable parameters".into()));
    }
    let mut adam = Adam::new(&slots.iter().map(|&s| model.params().at(s).tensor.numel()).collect::<Vec<_>>());
    let data_seed = rng::subseed(cfg.seed, "trainer.data");
    let mut log = MetricsLog::default();
    let row = |step, train_loss, val_ppl, lr| MetricRow {
        step,
        phase: cfg.phase,
        train_loss,
        val_ppl,
        lr,
        objective: cfg.objective,
    };
    let diverged = |step: usize| {
        move |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite values in {op}"),
            },
            e => e,
        }
    };
    log.rows.push(row(0, f64::NAN, Some(validate(model).map_err(diverged(0))?), cfg.lr_at(0)));

    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let mut acc: Vec<Vec<f64>> = slots.iter().map(|&s| vec![0.0; model.params().at(s).tensor.numel()]).collect();
        let mut loss_sum = 0.0;
        for i in 0..cfg.batch_size {
            let seed = rng::child(data_seed, (step * cfg.batch_size + i) as u64);
            let mut g = Graph::new();
            let b = model.bind_with(&mut g, |p| trainable(&p.name));
            let loss = loss_fn(&mut g, &b, model, seed).map_err(diverged(step))?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss is {value}"),
                });
            }
            loss_sum += value;
            let grads = g.backward(loss)?;
            for (a, &s) in acc.iter_mut().zip(&slots) {
                if let Some(gs) = grads.get_slice(b.var(s)) {
                    for (x, y) in a.iter_mut().zip(gs) {
                        *x += y.as_f64();
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        acc.iter_mut().flatten().for_each(|x| *x *= scale);
        if acc.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        clip(&mut acc, cfg.grad_clip);
        adam.tick();
        for (i, &s) in slots.iter().enumerate() {
            adam.update(i, model.params_mut().tensor_mut(s).data_mut(), &acc[i], lr);
        }
        let done = step + 1;
        let validate_now = done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let val = if validate_now { Some(validate(model).map_err(diverged(done))?) } else { None };
        log.rows.push(row(done, loss_sum * scale, val, lr));
    }
    Ok(log)
}

/// Trains the ug parameters with `cfg.objective`; base parameters are never touched.
pub fn train<T: Element>(
    model: &mut Model<T>,
    source: &dyn SampleSource,
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<MetricsLog> {
    let sampler = cfg.sampler()?;
    let val_sampler = sampler.reseeded(rng::subseed(cfg.seed, "trainer.val"));
    let kind = model.config().mask;
    let w = model.config().window;
    let objective = cfg.objective;
    let trainable: Vec<String> = model.params().trainable_names().into_iter().map(String::from).collect();
    optimize(
        model,
        cfg,
        |name| trainable.iter().any(|t| t == name),
        |g, b, m, seed| {
            let sample = source.sample(seed)?;
            let plan = sample_plan(&sample, w, &sampler.reseeded(seed))?;
            match objective {
                Objective::CompressionLm => compression_lm_loss_var(g, b, m, &sample.tokens, &plan, kind),
                Objective::EncodeDecode => {
                    encode_decode_loss_var(g, b, m, &sample.tokens, sample.target_start, &plan, kind)
                }
            }
        },
        |m| val_ppl(m, val, &val_sampler),
    )
}

/// Plain next-token training of the base weights, standing in for a pretrained backbone.
/// Afterwards the ug path is re-initialized from the new base.
pub fn pretrain_base<T: Element>(
    model: &mut Model<T>,
    source: &dyn SampleSource,
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<MetricsLog> {
    let cfg = TrainConfig {
        phase: Phase::Base,
        ..cfg.clone()
    };
    let log = optimize(
        model,
        &cfg,
        |name| !names::is_ug(name),
        |g, b, m, seed| {
            let sample = source.sample(seed)?;
            let toks = &sample.tokens;
            let logits = m.plain_forward(g, b, toks)?;
            let n = toks.len();
            let targets: Vec<usize> = (0..n).map(|r| if r + 1 < n { toks[r + 1] as usize } else { 0 }).collect();
            let include: Vec<bool> = (0..n).map(|r| r + 1 < n).collect();
            g.cross_entropy_mean(logits, &targets, &include)
        },
        |m| plain_val_ppl(m, val),
    )?;
    model.reinit_ug()?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeReport {
    pub checked: usize,
    pub drifted: Vec<String>,
}

impl FreezeReport {
    pub fn is_clean(&self) -> bool {
        self.drifted.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_clean() {
            Ok(())
        } else {
            Err(Error::Contract(format!("frozen tensors changed: {}", self.drifted.join(", "))))
        }
    }
}

/// Byte-level comparison of every frozen tensor of `before` against `after`.
pub fn freeze_audit<T: Element>(before: &ParamSet<T>, after: &ParamSet<T>) -> FreezeReport {
    let mut report = FreezeReport {
        checked: 0,
        drifted: Vec::new(),
    };
    for p in before.iter().filter(|p| !p.trainable) {
        report.checked += 1;
        let same = after
            .get(&p.name)
            .is_some_and(|t| t.to_le_bytes() == p.tensor.to_le_bytes());
        if !same {
            report.drifted.push(p.name.clone());
        }
    }
    report
}
