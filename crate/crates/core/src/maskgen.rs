//! Attendability matrices for compression windows.
//!
//! Key columns are ordered `[cache | normal | current-ug]` and query rows `[normal | current-ug]`.
//! Every consumer indexes through [`AttentionLayout`] rather than re-deriving offsets.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkernel::BoolMatrix;
use crate::segmenter::{ug_count, SegmentPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MaskVariant {
    /// ug_j sees the first `j·α` normal tokens.
    #[default]
    Stepwise,
    /// ug_j sees only its own slice `((j-1)α, jα]`.
    Segmentation,
    /// every ug token sees the whole window.
    FullCoverage,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 3] = [
        MaskVariant::Stepwise,
        MaskVariant::Segmentation,
        MaskVariant::FullCoverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::Stepwise => "stepwise",
            MaskVariant::Segmentation => "segmentation",
            MaskVariant::FullCoverage => "full-coverage",
        }
    }

    /// 1-based inclusive normal-token field of ug token `j` (1-based).
    pub fn ug_field(self, j: usize, ratio: u32, normal_len: usize) -> RangeInclusive<usize> {
        let a = ratio as usize;
        let hi = (j * a).min(normal_len);
        match self {
            MaskVariant::Stepwise => 1..=hi,
            MaskVariant::Segmentation => ((j - 1) * a + 1)..=hi,
            MaskVariant::FullCoverage => 1..=normal_len,
        }
    }
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stepwise" => Ok(MaskVariant::Stepwise),
            "segmentation" => Ok(MaskVariant::Segmentation),
            "full-coverage" => Ok(MaskVariant::FullCoverage),
            _ => Err(Error::Config(format!("unknown mask variant {s:?}"))),
        }
    }
}

/// Mask variant plus the ug-to-ug rule within the current segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskKind {
    pub variant: MaskVariant,
    /// Current ug tokens attend earlier current ug tokens (otherwise only themselves).
    pub ug_causal: bool,
}

impl Default for MaskKind {
    fn default() -> Self {
        Self {
            variant: MaskVariant::Stepwise,
            ug_causal: true,
        }
    }
}

impl From<MaskVariant> for MaskKind {
    fn from(variant: MaskVariant) -> Self {
        Self {
            variant,
            ug_causal: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttentionLayout {
    pub cache_len: usize,
    pub normal_len: usize,
    pub ug_len: usize,
}

impl AttentionLayout {
    pub fn new(cache_len: usize, normal_len: usize, ug_len: usize) -> Self {
        Self {
            cache_len,
            normal_len,
            ug_len,
        }
    }

    pub fn query_rows(&self) -> usize {
        self.normal_len + self.ug_len
    }

    pub fn key_cols(&self) -> usize {
        self.cache_len + self.normal_len + self.ug_len
    }

    /// Column of normal token `j` (0-based).
    pub fn normal_col(&self, j: usize) -> usize {
        self.cache_len + j
    }

    /// Column of current ug token `j` (0-based).
    pub fn ug_col(&self, j: usize) -> usize {
        self.cache_len + self.normal_len + j
    }

    /// Row of current ug token `j` (0-based).
    pub fn ug_row(&self, j: usize) -> usize {
        self.normal_len + j
    }

    /// Checks `k = ceil(normal_len/α)` (or `k = 0` for a plain pass).
    pub fn validate(&self, ratio: u32) -> Result<()> {
        if self.normal_len == 0 {
            return Err(Error::Layout("window holds no normal tokens".into()));
        }
        if ratio == 0 {
            return Err(Error::Layout("ratio must be positive".into()));
        }
        if self.ug_len != 0 && self.ug_len != ug_count(self.normal_len, ratio) {
            return Err(Error::Layout(format!(
                "k={} but ceil({}/{ratio}) = {}",
                self.ug_len,
                self.normal_len,
                ug_count(self.normal_len, ratio)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    matrix: BoolMatrix,
    kind: MaskKind,
}

impl Mask {
    pub fn matrix(&self) -> &BoolMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> BoolMatrix {
        self.matrix
    }

    pub fn variant(&self) -> MaskVariant {
        self.kind.variant
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.matrix.get(r, c)
    }

    pub fn to_ascii(&self) -> String {
        self.matrix.to_ascii()
    }
}

/// Window mask for any variant.
pub fn window_mask(layout: AttentionLayout, ratio: u32, kind: impl Into<MaskKind>) -> Result<Mask> {
    let kind = kind.into();
    layout.validate(ratio)?;
    let mut m = BoolMatrix::new(layout.query_rows(), layout.key_cols());
    for r in 0..layout.query_rows() {
        for c in 0..layout.cache_len {
            m.set(r, c, true);
        }
    }
    for j in 0..layout.normal_len {
        for i in 0..=j {
            m.set(j, layout.normal_col(i), true);
        }
    }
    for j in 0..layout.ug_len {
        let row = layout.ug_row(j);
        for i in kind.variant.ug_field(j + 1, ratio, layout.normal_len) {
            m.set(row, layout.normal_col(i - 1), true);
        }
        let first = if kind.ug_causal { 0 } else { j };
        for i in first..=j {
            m.set(row, layout.ug_col(i), true);
        }
    }
    Ok(Mask { matrix: m, kind })
}

pub fn stepwise_mask(layout: AttentionLayout, ratio: u32) -> Result<Mask> {
    window_mask(layout, ratio, MaskVariant::Stepwise)
}

pub fn segmentation_mask(layout: AttentionLayout, ratio: u32) -> Result<Mask> {
    window_mask(layout, ratio, MaskVariant::Segmentation)
}

pub fn full_coverage_mask(layout: AttentionLayout, ratio: u32) -> Result<Mask> {
    window_mask(layout, ratio, MaskVariant::FullCoverage)
}

/// Slot kinds of the interleaved training sequence `[x₁…, ug₁…, x₂…, ug₂…, …]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Normal token `index` (0-based within its segment) of segment `segment`.
    Normal { segment: usize, index: usize },
    /// Compression token `index` (0-based) of segment `segment`.
    Ug { segment: usize, index: usize },
}

impl Slot {
    pub fn segment(&self) -> usize {
        match *self {
            Slot::Normal { segment, .. } | Slot::Ug { segment, .. } => segment,
        }
    }
}

/// Slots of the interleaved sequence in order.
pub fn interleaved_slots(plan: &SegmentPlan) -> Vec<Slot> {
    let mut slots = Vec::new();
    for (si, seg) in plan.segments().iter().enumerate() {
        slots.extend((0..seg.len()).map(|index| Slot::Normal { segment: si, index }));
        slots.extend((0..seg.ug_count).map(|index| Slot::Ug { segment: si, index }));
    }
    slots
}

/// Block mask over the interleaved sequence under which one full pass equals the
/// serial per-segment procedure: own-segment blocks follow `kind`, every slot sees all
/// earlier segments' ug slots, and no slot sees earlier segments' normal slots.
pub fn unified_training_mask(plan: &SegmentPlan, kind: impl Into<MaskKind>) -> Result<Mask> {
    let kind = kind.into();
    let slots = interleaved_slots(plan);
    let s = slots.len();
    let mut m = BoolMatrix::new(s, s);

    let mut offset = 0;
    let mut block_start = Vec::with_capacity(plan.len());
    for seg in plan.segments() {
        block_start.push(offset);
        offset += seg.len() + seg.ug_count;
    }

    for (si, seg) in plan.segments().iter().enumerate() {
        let local = window_mask(AttentionLayout::new(0, seg.len(), seg.ug_count), seg.ratio, kind)?;
        let b0 = block_start[si];
        let block = seg.len() + seg.ug_count;
        for r in 0..block {
            for c in 0..block {
                if local.get(r, c) {
                    m.set(b0 + r, b0 + c, true);
                }
            }
            for (c, slot) in slots.iter().enumerate() {
                if matches!(slot, Slot::Ug { segment, .. } if *segment < si) {
                    m.set(b0 + r, c, true);
                }
            }
        }
    }
    Ok(Mask { matrix: m, kind })
}
