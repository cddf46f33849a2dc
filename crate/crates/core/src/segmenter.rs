//! Window partitioning and per-segment compression ratios.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Ratios sampled by default.
pub const DEFAULT_RATIOS: [u32; 5] = [2, 4, 8, 16, 32];

/// Inclusive 1-based token span `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 0-based half-open index range.
    pub fn range(&self) -> Range<usize> {
        self.start - 1..self.end
    }
}

/// Output of [`partition`]: spans without ratios yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanSkeleton {
    pub window: usize,
    pub total_len: usize,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub span: Span,
    pub ratio: u32,
    pub ug_count: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.span.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Number of compression tokens for a segment of `len` tokens at ratio `ratio`.
pub fn ug_count(len: usize, ratio: u32) -> usize {
    len.div_ceil(ratio as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentPlan {
    window: usize,
    total_len: usize,
    segments: Vec<Segment>,
}

/// Splits `t` tokens into `ceil(t/w)` windows; segment `i` covers `[(i-1)w+1, min(iw, t)]`.
pub fn partition(t: usize, w: usize) -> Result<PlanSkeleton> {
    if t == 0 {
        return Err(Error::EmptyInput("cannot partition zero tokens".into()));
    }
    if w == 0 {
        return Err(Error::Config("window size must be at least 1".into()));
    }
    let n = t.div_ceil(w);
    let spans = (1..=n)
        .map(|i| Span {
            start: (i - 1) * w + 1,
            end: (i * w).min(t),
        })
        .collect();
    Ok(PlanSkeleton {
        window: w,
        total_len: t,
        spans,
    })
}

/// Gives every span a ratio drawn by `sampler` and `k = ceil(len/α)`.
pub fn assign_ratios(skeleton: &PlanSkeleton, sampler: &RatioSampler) -> SegmentPlan {
    let ratios = sampler.draw(skeleton.spans.len());
    let segments = skeleton
        .spans
        .iter()
        .zip(ratios)
        .map(|(span, ratio)| Segment {
            span: *span,
            ratio,
            ug_count: ug_count(span.len(), ratio),
        })
        .collect();
    SegmentPlan {
        window: skeleton.window,
        total_len: skeleton.total_len,
        segments,
    }
}

impl SegmentPlan {
    /// Builds and validates a plan from explicit segments.
    ///
    /// Segments must tile `[1, t]` in order, fit the window and carry `k = ceil(len/α)`.
    /// Interior partial segments are accepted so separately partitioned pieces can be
    /// joined (see [`SegmentPlan::concat`]).
    pub fn from_segments(window: usize, segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::EmptyInput("plan has no segments".into()));
        }
        let mut next = 1;
        for (i, s) in segments.iter().enumerate() {
            if s.span.start != next || s.span.end < s.span.start {
                return Err(Error::Contract(format!(
                    "segment {i} spans [{}, {}], expected start {next}",
                    s.span.start, s.span.end
                )));
            }
            if s.len() > window {
                return Err(Error::WindowOverflow { len: s.len(), window });
            }
            if s.ratio == 0 || s.ug_count != ug_count(s.len(), s.ratio) {
                return Err(Error::Contract(format!(
                    "segment {i}: k={} inconsistent with len {} and ratio {}",
                    s.ug_count,
                    s.len(),
                    s.ratio
                )));
            }
            next = s.span.end + 1;
        }
        Ok(Self {
            window,
            total_len: next - 1,
            segments,
        })
    }

    /// Single-ratio plan over `t` tokens.
    pub fn monotonous(t: usize, w: usize, ratio: u32) -> Result<Self> {
        let skel = partition(t, w)?;
        Ok(assign_ratios(&skel, &RatioSampler::monotonous(ratio)))
    }

    /// `self` followed by `other`, with `other`'s spans shifted.
    pub fn concat(&self, other: &SegmentPlan) -> Result<Self> {
        let shift = self.total_len;
        let mut segs = self.segments.clone();
        segs.extend(other.segments.iter().map(|s| Segment {
            span: Span {
                start: s.span.start + shift,
                end: s.span.end + shift,
            },
            ..*s
        }));
        Self::from_segments(self.window.max(other.window), segs)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Σ k over all segments.
    pub fn total_ug(&self) -> usize {
        self.segments.iter().map(|s| s.ug_count).sum()
    }

    /// Line form: one `start,end,ratio,k` row per segment after a `#` header.
    pub fn to_text(&self) -> String {
        let mut out = format!("# window={} total={}\n", self.window, self.total_len);
        for s in &self.segments {
            out.push_str(&format!("{},{},{},{}\n", s.span.start, s.span.end, s.ratio, s.ug_count));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut window = None;
        let mut segments = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    if let Some(v) = kv.strip_prefix("window=") {
                        window = Some(parse_field::<usize>(v, ln)?);
                    }
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("line {}: expected 4 fields", ln + 1)));
            }
            segments.push(Segment {
                span: Span {
                    start: parse_field(f[0], ln)?,
                    end: parse_field(f[1], ln)?,
                },
                ratio: parse_field(f[2], ln)?,
                ug_count: parse_field(f[3], ln)?,
            });
        }
        let window = window
            .or_else(|| segments.iter().map(Segment::len).max())
            .ok_or_else(|| Error::Format("empty plan".into()))?;
        Self::from_segments(window, segments)
    }
}

fn parse_field<T: FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("line {}: bad field {s:?}", line + 1)))
}

/// How ratios are drawn across the segments of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    /// Independent uniform draw per segment.
    PerSegment,
    /// One uniform draw per sample, reused for all its segments.
    PerInstance,
    /// Always the given ratio.
    Monotonous(u32),
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingMode::PerSegment => f.write_str("per-segment"),
            SamplingMode::PerInstance => f.write_str("per-instance"),
            SamplingMode::Monotonous(a) => write!(f, "monotonous:{a}"),
        }
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-segment" => Ok(SamplingMode::PerSegment),
            "per-instance" => Ok(SamplingMode::PerInstance),
            _ => {
                let ratio = s
                    .strip_prefix("monotonous:")
                    .and_then(|r| r.parse::<u32>().ok())
                    .filter(|&r| r >= 1)
                    .ok_or_else(|| Error::Config(format!("unknown sampling mode {s:?}")))?;
                Ok(SamplingMode::Monotonous(ratio))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatioSampler {
    candidates: Vec<u32>,
    mode: SamplingMode,
    seed: u64,
}

impl RatioSampler {
    pub fn new(candidates: Vec<u32>, mode: SamplingMode, seed: u64) -> Result<Self> {
        if candidates.is_empty() || candidates.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("bad candidate ratios {candidates:?}")));
        }
        Ok(Self { candidates, mode, seed })
    }

    pub fn monotonous(ratio: u32) -> Self {
        Self {
            candidates: vec![ratio],
            mode: SamplingMode::Monotonous(ratio),
            seed: 0,
        }
    }

    pub fn candidates(&self) -> &[u32] {
        &self.candidates
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same candidates and mode, different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Ratios for `n` consecutive segments of one sample.
    pub fn draw(&self, n: usize) -> Vec<u32> {
        let mut rng = rng::from_seed(self.seed);
        let mut pick = || self.candidates[rng.gen_range(0..self.candidates.len())];
        match self.mode {
            SamplingMode::Monotonous(a) => vec![a; n],
            SamplingMode::PerInstance => vec![pick(); n],
            SamplingMode::PerSegment => (0..n).map(|_| pick()).collect(),
        }
    }
}
