//! Matmul FLOPs of compression passes, for progressive (append-only) and static (recompute the
//! whole history every turn) use. Counts follow the `2·m·k·n` convention and include exactly
//! the matmuls the model runs: projections, scores, values, output, MLP and LM head.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::segmenter::{partition, ug_count};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConfig {
    pub dim: u64,
    pub layers: u64,
    pub heads: u64,
    pub mlp_dim: u64,
    pub vocab: u64,
    pub window: usize,
    pub ratio: u32,
}

impl CostConfig {
    pub fn from_model(cfg: &ModelConfig, ratio: u32) -> Self {
        Self {
            dim: cfg.dim as u64,
            layers: cfg.layers as u64,
            heads: cfg.heads as u64,
            mlp_dim: cfg.mlp_dim as u64,
            vocab: cfg.vocab as u64,
            window: cfg.window,
            ratio,
        }
    }

    fn layer(&self, q: u64, kv: u64) -> u64 {
        let (d, m) = (self.dim, self.mlp_dim);
        // q/k/v + output projections, scores + values, gate/up + down.
        8 * q * d * d + 4 * q * d * kv + 6 * q * d * m
    }
}

/// Per-turn new-token counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnSchedule {
    turns: Vec<usize>,
}

impl TurnSchedule {
    pub fn new(turns: Vec<usize>) -> Result<Self> {
        if turns.is_empty() || turns.contains(&0) {
            return Err(Error::Config(format!("turn sizes must be positive, got {turns:?}")));
        }
        Ok(Self { turns })
    }

    pub fn constant(turns: usize, len: usize) -> Result<Self> {
        Self::new(vec![len; turns])
    }

    pub fn turns(&self) -> &[usize] {
        &self.turns
    }
}

/// Plain pass of `q_len` query rows against `kv_len` keys, LM head on every row.
pub fn flops_forward(cfg: &CostConfig, q_len: usize, kv_len: usize) -> u64 {
    let (q, kv) = (q_len as u64, kv_len as u64);
    cfg.layers * cfg.layer(q, kv) + 2 * q * cfg.dim * cfg.vocab
}

/// One compression window of `n` tokens against a cache of `cache_len` entries.
pub fn flops_window(cfg: &CostConfig, n: usize, cache_len: usize) -> u64 {
    let k = ug_count(n, cfg.ratio);
    let q = (n + k) as u64;
    let kv = (cache_len + n + k) as u64;
    cfg.layers * cfg.layer(q, kv) + 2 * n as u64 * cfg.dim * cfg.vocab
}

/// Cost of compressing `len` fresh tokens window by window onto a cache of `cache_len`;
/// returns the cost and the new cache length.
fn compress_cost(cfg: &CostConfig, len: usize, mut cache_len: usize) -> Result<(u64, usize)> {
    let mut total = 0;
    for span in partition(len, cfg.window)?.spans {
        total += flops_window(cfg, span.len(), cache_len);
        cache_len += ug_count(span.len(), cfg.ratio);
    }
    Ok((total, cache_len))
}

/// Each turn compresses only its own tokens against the cache built so far.
///
/// Every turn is windowed on its own, so a turn always starts a new segment.
pub fn flops_progressive(cfg: &CostConfig, schedule: &TurnSchedule) -> Result<Vec<u64>> {
    let mut cache = 0;
    let mut out = Vec::with_capacity(schedule.turns.len());
    for &len in &schedule.turns {
        let (cost, next) = compress_cost(cfg, len, cache)?;
        out.push(cost);
        cache = next;
    }
    Ok(out)
}

/// Each turn re-compresses the entire history from an empty cache.
pub fn flops_static(cfg: &CostConfig, schedule: &TurnSchedule) -> Result<Vec<u64>> {
    let mut history = 0;
    let mut out = Vec::with_capacity(schedule.turns.len());
    for &len in &schedule.turns {
        history += len;
        out.push(compress_cost(cfg, history, 0)?.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsRow {
    pub turn: usize,
    pub context_len: usize,
    pub progressive: u64,
    pub static_: u64,
}

pub fn flops_table(cfg: &CostConfig, schedule: &TurnSchedule) -> Result<Vec<FlopsRow>> {
    let prog = flops_progressive(cfg, schedule)?;
    let stat = flops_static(cfg, schedule)?;
    let mut ctx = 0;
    Ok(schedule
        .turns
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            ctx += len;
            FlopsRow {
                turn: i + 1,
                context_len: ctx,
                progressive: prog[i],
                static_: stat[i],
            }
        })
        .collect())
}

pub const FLOPS_HEADER: &str = "turn,context_len,progressive_flops,static_flops";

pub fn flops_csv(rows: &[FlopsRow]) -> String {
    let mut s = String::from(FLOPS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.turn, r.context_len, r.progressive, r.static_));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer() -> CostConfig {
        CostConfig {
            dim: 4,
            layers: 1,
            heads: 2,
            mlp_dim: 6,
            vocab: 10,
            window: 8,
            ratio: 2,
        }
    }

    #[test]
    fn single_row_closed_form() {
        let c = one_layer();
        // projections 3·2·4·4, scores 2·4·1, values 2·1·4, output 2·4·4, MLP 3·2·4·6, head 2·4·10
        let expect = 96 + 8 + 8 + 32 + 144 + 80;
        assert_eq!(flops_forward(&c, 1, 1), expect);
    }

    #[test]
    fn first_turn_costs_agree() {
        let c = one_layer();
        let s = TurnSchedule::constant(3, 8).unwrap();
        assert_eq!(flops_progressive(&c, &s).unwrap()[0], flops_static(&c, &s).unwrap()[0]);
    }

    #[test]
    fn schedule_rejects_empty_turns() {
        assert!(TurnSchedule::new(vec![3, 0]).is_err());
        assert!(TurnSchedule::new(vec![]).is_err());
    }
}
