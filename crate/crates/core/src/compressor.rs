//! Progressive inference: compress windows into a growing key/value cache, then score or
//! generate against it.

use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};

use crate::error::{Error, Result};
use crate::maskgen::MaskKind;
use crate::model::{NamedTensor, TensorData, TensorFile, CACHE_MAGIC};
use crate::model::{LayerKv, Model};
use crate::numkernel::{nll_rows, Element, Tensor};
use crate::rng;
use crate::segmenter::{ug_count, RatioSampler, Segment, SegmentPlan, Span};

/// Compressed context: per-layer ug keys/values in emission order plus a log of what was
/// compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache<T> {
    layers: usize,
    dim: usize,
    kv: Vec<LayerKv<T>>,
    log: Vec<Segment>,
    total_source_tokens: usize,
    /// Logits for the token right after the last compressed segment.
    pending: Option<Vec<T>>,
}

impl<T: Element> CompressedCache<T> {
    pub fn empty(model: &Model<T>) -> Self {
        let cfg = model.config();
        Self {
            layers: cfg.layers,
            dim: cfg.dim,
            kv: Vec::new(),
            log: Vec::new(),
            total_source_tokens: 0,
            pending: None,
        }
    }

    /// `L_ca`, the number of cached compression tokens.
    pub fn len(&self) -> usize {
        self.kv.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_empty()
    }

    pub fn layer_kv(&self) -> &[LayerKv<T>] {
        &self.kv
    }

    pub fn segment_log(&self) -> &[Segment] {
        &self.log
    }

    pub fn total_source_tokens(&self) -> usize {
        self.total_source_tokens
    }

    pub fn pending_logits(&self) -> Option<&[T]> {
        self.pending.as_deref()
    }

    fn kv_option(&self) -> Option<&[LayerKv<T>]> {
        if self.kv.is_empty() {
            None
        } else {
            Some(&self.kv)
        }
    }

    fn check_model(&self, model: &Model<T>) -> Result<()> {
        let cfg = model.config();
        if cfg.layers != self.layers || cfg.dim != self.dim {
            return Err(Error::Contract(format!(
                "cache built for {} layers × {} dims, model has {} × {}",
                self.layers, self.dim, cfg.layers, cfg.dim
            )));
        }
        Ok(())
    }

    /// Compresses one segment at ratio `ratio` and appends its ug states.
    pub fn compress_append(&mut self, model: &Model<T>, tokens: &[u32], ratio: u32, kind: MaskKind) -> Result<()> {
        self.append_window(model, tokens, ratio, kind).map(|_| ())
    }

    /// Returns the window's logits (`len × V`).
    fn append_window(&mut self, model: &Model<T>, tokens: &[u32], ratio: u32, kind: MaskKind) -> Result<Tensor<T>> {
        self.check_model(model)?;
        if ratio == 0 {
            return Err(Error::Contract("ratio must be at least 1".into()));
        }
        let (logits, new_kv) = model.run_window(tokens, ratio, true, self.kv_option(), kind)?;
        self.kv = if self.kv.is_empty() {
            new_kv
        } else {
            self.kv
                .iter()
                .zip(&new_kv)
                .map(|(old, new)| {
                    Ok(LayerKv {
                        keys: Arc::new(stack_rows(&old.keys, &new.keys)?),
                        values: Arc::new(stack_rows(&old.values, &new.values)?),
                    })
                })
                .collect::<Result<_>>()?
        };
        let start = self.total_source_tokens;
        self.log.push(Segment {
            span: Span {
                start: start + 1,
                end: start + tokens.len(),
            },
            ratio,
            ug_count: ug_count(tokens.len(), ratio),
        });
        self.total_source_tokens += tokens.len();
        self.pending = Some(logits.row(logits.rows() - 1).to_vec());
        Ok(logits)
    }

    pub fn to_file(&self) -> TensorFile {
        let mut header = vec![
            ("layers".to_string(), self.layers.to_string()),
            ("dim".to_string(), self.dim.to_string()),
            ("total_source_tokens".to_string(), self.total_source_tokens.to_string()),
            ("segments".to_string(), self.log.len().to_string()),
        ];
        for (i, s) in self.log.iter().enumerate() {
            header.push((
                format!("segment.{i}"),
                format!("{},{},{},{}", s.span.start, s.span.end, s.ratio, s.ug_count),
            ));
        }
        let mut tensors = Vec::new();
        for (l, kv) in self.kv.iter().enumerate() {
            for (what, t) in [("keys", &kv.keys), ("values", &kv.values)] {
                tensors.push(NamedTensor {
                    name: format!("layers.{l}.{what}"),
                    trainable: false,
                    data: TensorData::from_tensor(t.as_ref()),
                });
            }
        }
        if let Some(p) = &self.pending {
            tensors.push(NamedTensor {
                name: "pending".into(),
                trainable: false,
                data: TensorData::from_tensor(&Tensor::new(vec![p.len()], p.clone()).expect("non-empty logits")),
            });
        }
        TensorFile {
            magic: CACHE_MAGIC.into(),
            header,
            tensors,
        }
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        if file.magic != CACHE_MAGIC {
            return Err(Error::Format(format!("not a cache file: {:?}", file.magic)));
        }
        let num = |key: &str| -> Result<usize> {
            file.header_value(key)
                .ok_or_else(|| Error::Format(format!("cache header lacks {key}")))?
                .parse()
                .map_err(|_| Error::Format(format!("cache header {key} is not a number")))
        };
        let layers = num("layers")?;
        let dim = num("dim")?;
        let total_source_tokens = num("total_source_tokens")?;
        let mut log = Vec::new();
        for i in 0..num("segments")? {
            let key = format!("segment.{i}");
            let v = file
                .header_value(&key)
                .ok_or_else(|| Error::Format(format!("cache header lacks {key}")))?;
            let f: Vec<usize> = v
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Format(format!("bad {key} entry {v:?}"))))
                .collect::<Result<_>>()?;
            if f.len() != 4 {
                return Err(Error::Format(format!("bad {key} entry {v:?}")));
            }
            log.push(Segment {
                span: Span { start: f[0], end: f[1] },
                ratio: f[2] as u32,
                ug_count: f[3],
            });
        }
        let mut kv = Vec::new();
        if !log.is_empty() {
            for l in 0..layers {
                let get = |what: &str| -> Result<Arc<Tensor<T>>> {
                    let name = format!("layers.{l}.{what}");
                    let t = file
                        .tensor(&name)
                        .ok_or_else(|| Error::Format(format!("cache lacks tensor {name}")))?;
                    Ok(Arc::new(t.data.to_tensor()))
                };
                kv.push(LayerKv {
                    keys: get("keys")?,
                    values: get("values")?,
                });
            }
        }
        let pending = file.tensor("pending").map(|t| t.data.to_tensor::<T>().into_data());
        let cache = Self {
            layers,
            dim,
            kv,
            log,
            total_source_tokens,
            pending,
        };
        let expect: usize = cache.log.iter().map(|s| s.ug_count).sum();
        if cache.kv.iter().any(|l| {
            l.len() != expect || l.values.rows() != expect || l.keys.cols() != dim || l.values.cols() != dim
        }) {
            return Err(Error::Format("cache tensors disagree with the segment log".into()));
        }
        Ok(cache)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_file().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_file(&TensorFile::from_bytes(bytes, CACHE_MAGIC)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::load(path, CACHE_MAGIC)?)
    }
}

fn stack_rows<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::dim("stack_rows", format!("{:?} over {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
}

/// Compresses `tokens` segment by segment as laid out by `plan`.
pub fn compress_context<T: Element>(
    model: &Model<T>,
    tokens: &[u32],
    plan: &SegmentPlan,
    kind: MaskKind,
) -> Result<CompressedCache<T>> {
    if tokens.is_empty() || plan.is_empty() {
        return Err(Error::EmptyInput("nothing to compress".into()));
    }
    if plan.total_len() != tokens.len() {
        return Err(Error::Contract(format!(
            "plan covers {} tokens, input has {}",
            plan.total_len(),
            tokens.len()
        )));
    }
    let mut cache = CompressedCache::empty(model);
    for seg in plan.segments() {
        cache.compress_append(model, &tokens[seg.span.range()], seg.ratio, kind)?;
    }
    Ok(cache)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// A cache plus the raw, not yet compressed tail of the stream.
///
/// Whenever the tail reaches the window size it is compressed with a ratio drawn from the
/// session's sampler (one independent draw per compressed window).
#[derive(Debug, Clone)]
pub struct Session<'m, T> {
    model: &'m Model<T>,
    cache: CompressedCache<T>,
    tail: Vec<u32>,
    next: Option<Vec<T>>,
    sampler: RatioSampler,
    kind: MaskKind,
}

impl<'m, T: Element> Session<'m, T> {
    pub fn new(model: &'m Model<T>, cache: CompressedCache<T>, sampler: RatioSampler, kind: MaskKind) -> Result<Self> {
        cache.check_model(model)?;
        let next = cache.pending.clone();
        Ok(Self {
            model,
            cache,
            tail: Vec::new(),
            next,
            sampler,
            kind,
        })
    }

    pub fn cache(&self) -> &CompressedCache<T> {
        &self.cache
    }

    pub fn into_cache(self) -> CompressedCache<T> {
        self.cache
    }

    pub fn tail(&self) -> &[u32] {
        &self.tail
    }

    /// Logits for the next token, if anything has been seen.
    pub fn next_logits(&self) -> Option<&[T]> {
        self.next.as_deref()
    }

    fn next_ratio(&self) -> u32 {
        let idx = self.cache.log.len() as u64;
        self.sampler.reseeded(rng::child(self.sampler.seed(), idx)).draw(1)[0]
    }

    /// Feeds `tokens`, returning the NLL of each one given everything before it.
    ///
    /// The first token of the whole stream has no prediction and gets `None`.
    fn advance(&mut self, tokens: &[u32]) -> Result<Vec<Option<f64>>> {
        let w = self.model.config().window;
        let mut out = Vec::with_capacity(tokens.len());
        let mut rest = tokens;
        while !rest.is_empty() {
            let take = rest.len().min(w - self.tail.len());
            let start = self.tail.len();
            let mut window = std::mem::take(&mut self.tail);
            window.extend_from_slice(&rest[..take]);
            rest = &rest[take..];

            let logits = if window.len() == w {
                let ratio = self.next_ratio();
                self.cache.append_window(self.model, &window, ratio, self.kind)?
            } else {
                self.model
                    .run_window(&window, 1, false, self.cache.kv_option(), self.kind)?
                    .0
            };
            for i in start..window.len() {
                let pred = if i == 0 { self.next.as_deref() } else { Some(logits.row(i - 1)) };
                out.push(match pred {
                    Some(row) => {
                        let t = Tensor::matrix(1, row.len(), row.to_vec())?;
                        Some(nll_rows(&t, &[window[i] as usize])?[0])
                    }
                    None => None,
                });
            }
            self.next = Some(logits.row(window.len() - 1).to_vec());
            if window.len() < w {
                self.tail = window;
            }
        }
        Ok(out)
    }

    /// Appends context without scoring it.
    pub fn extend(&mut self, tokens: &[u32]) -> Result<()> {
        self.advance(tokens).map(|_| ())
    }

    /// Teacher-forced per-token NLLs of `tokens`, which then become part of the context.
    pub fn score_nll(&mut self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty continuation".into()));
        }
        if self.next.is_none() {
            return Err(Error::Contract("no context to condition the first token on".into()));
        }
        Ok(self.advance(tokens)?.into_iter().map(|x| x.expect("context present")).collect())
    }

    /// Feeds `prompt`, then decodes `max_new` tokens.
    pub fn generate(&mut self, prompt: &[u32], max_new: usize, mode: DecodeMode) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::Contract("max_new must be at least 1".into()));
        }
        self.extend(prompt)?;
        let ug = self.model.config().ug_token() as usize;
        let mut rng = match mode {
            DecodeMode::Sample { seed, .. } => Some(rng::from_seed(seed)),
            DecodeMode::Greedy => None,
        };
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let row = self
                .next
                .as_deref()
                .ok_or_else(|| Error::Contract("nothing to decode from: empty cache and prompt".into()))?;
            let scores: Vec<f64> = row[..ug].iter().map(|x| x.as_f64()).collect();
            let tok = match (mode, rng.as_mut()) {
                (DecodeMode::Sample { temperature, .. }, Some(r)) if temperature > 0.0 => {
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
                    WeightedIndex::new(&weights)
                        .map_err(|_| Error::NonFinite { op: "sampling" })?
                        .sample(r)
                }
                _ => argmax(&scores),
            };
            out.push(tok as u32);
            self.extend(&[tok as u32])?;
        }
        Ok(out)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
