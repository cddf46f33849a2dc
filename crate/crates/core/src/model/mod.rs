//! Decoder-only transformer with a second attention-projection path for compression tokens.
//!
//! Normal tokens use the base projections, compression (ug) tokens use their own copies.
//! Everything else (norms, MLP, embeddings, head) is shared. Keys are cached before rotation
//! so a window can re-assign positions each time it runs.

mod checkpoint;
mod config;
mod params;

use std::sync::Arc;

pub use checkpoint::{NamedTensor, TensorData, TensorFile, CACHE_MAGIC, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, BYTE_VOCAB, UG_TOKEN};
pub use params::{init_base_params, init_ug_params, names, Param, ParamSet};

use crate::error::{Error, Result};
use crate::maskgen::{self, interleaved_slots, AttentionLayout, MaskKind, Slot};
use crate::numkernel::{BoolMatrix, Element, Graph, Tensor, Var};
use crate::segmenter::{ug_count, SegmentPlan};

/// Pre-rotation keys and values of one layer, `rows × D` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    pub keys: Arc<Tensor<T>>,
    pub values: Arc<Tensor<T>>,
}

impl<T: Element> LayerKv<T> {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rotary positions of every slot in a window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Positions {
    pub cache: Vec<usize>,
    pub normal: Vec<usize>,
    pub ug: Vec<usize>,
}

/// Cache slots take `0..L_ca`, normal tokens follow, and ug token `j` sits on the last normal
/// token of its stepwise field: `L_ca + min(j·α, normal_len) − 1`.
pub fn positions_for(layout: AttentionLayout, ratio: u32) -> Positions {
    let l = layout.cache_len;
    let n = layout.normal_len;
    let a = ratio as usize;
    Positions {
        cache: (0..l).collect(),
        normal: (l..l + n).collect(),
        ug: (1..=layout.ug_len).map(|j| l + (j * a).min(n) - 1).collect(),
    }
}

#[derive(Debug, Clone)]
struct LayerSlots {
    attn_norm: usize,
    base: [usize; 4],
    ug: [usize; 4],
    mlp_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

#[derive(Debug, Clone)]
struct Slots {
    embed: usize,
    ug_embed: usize,
    final_norm: usize,
    lm_head: usize,
    layers: Vec<LayerSlots>,
}

impl Slots {
    fn resolve<T: Element>(cfg: &ModelConfig, set: &ParamSet<T>) -> Result<Self> {
        let need = |name: &str| {
            set.slot(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut base = [0; 4];
            let mut ug = [0; 4];
            for (i, p) in names::PROJ.iter().enumerate() {
                base[i] = need(&names::base_proj(l, p))?;
                ug[i] = need(&names::ug_proj(l, p))?;
            }
            layers.push(LayerSlots {
                attn_norm: need(&names::attn_norm(l))?,
                base,
                ug,
                mlp_norm: need(&names::mlp_norm(l))?,
                w_gate: need(&names::mlp(l, "w_gate"))?,
                w_up: need(&names::mlp(l, "w_up"))?,
                w_down: need(&names::mlp(l, "w_down"))?,
            });
        }
        Ok(Self {
            embed: need(names::EMBED)?,
            ug_embed: need(names::UG_EMBED)?,
            final_norm: need(names::FINAL_NORM)?,
            lm_head: need(names::LM_HEAD)?,
            layers,
        })
    }
}

fn check_shapes<T: Element>(cfg: &ModelConfig, set: &ParamSet<T>) -> Result<()> {
    let d = cfg.dim;
    for p in set.iter() {
        let expected: Vec<usize> = if p.name == names::EMBED {
            vec![cfg.vocab, d]
        } else if p.name == names::LM_HEAD {
            vec![d, cfg.vocab]
        } else if p.name == names::UG_EMBED || p.name.ends_with("norm") {
            vec![d]
        } else if p.name.ends_with("w_gate") || p.name.ends_with("w_up") {
            vec![d, cfg.mlp_dim]
        } else if p.name.ends_with("w_down") {
            vec![cfg.mlp_dim, d]
        } else {
            vec![d, d]
        };
        if p.tensor.shape() != expected.as_slice() {
            return Err(Error::Contract(format!(
                "parameter {} has shape {:?}, expected {expected:?}",
                p.name,
                p.tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Graph leaves for every parameter of a model, in slot order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    /// Substitutes the leaf used for `slot` (gradient checks feed their own leaves).
    pub fn replace(&mut self, slot: usize, var: Var) {
        self.vars[slot] = var;
    }
}

/// Inputs of one attention + MLP block.
///
/// Query rows are `[normal | ug]`. Key columns are `[cache | normal | ug | ug-as-cache]`, the
/// last block present only in the unified training pass, where earlier segments' ug tokens
/// must be seen at their cache positions.
pub struct LayerInput<'a> {
    pub x_nt: Var,
    pub x_ug: Option<Var>,
    pub cache: Option<(Var, Var)>,
    pub cache_pos: &'a [usize],
    pub nt_pos: &'a [usize],
    pub ug_pos: &'a [usize],
    pub ug_cache_pos: Option<&'a [usize]>,
    pub mask: &'a BoolMatrix,
}

pub struct LayerOutput {
    pub x_nt: Var,
    pub x_ug: Option<Var>,
    /// Pre-rotation keys and values of the ug rows.
    pub ug_kv: Option<(Var, Var)>,
}

pub struct WindowOutput {
    /// `normal_len × V`; row `j` scores the token after normal token `j`.
    pub logits: Var,
    /// Per layer `k × D` pre-rotation keys and values (empty when `k = 0`).
    pub ug_kv: Vec<(Var, Var)>,
}

pub struct UnifiedOutput {
    /// `t × V` over all normal tokens in order.
    pub logits: Var,
    /// Per layer `Σk × D` pre-rotation keys and values of every ug token, in emission order.
    pub ug_kv: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    slots: Slots,
}

impl<T: Element> Model<T> {
    /// Fresh random base with ug tensors initialized from it.
    pub fn new_random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let base = init_base_params(&cfg, seed)?;
        let params = init_ug_params(&base, &cfg)?;
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        check_shapes(&cfg, &params)?;
        let slots = Slots::resolve(&cfg, &params)?;
        Ok(Self { cfg, params, slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Slot of the shared ug embedding.
    pub fn ug_embed_slot(&self) -> usize {
        self.slots.ug_embed
    }

    /// Re-copies base projections into the ug path (after the base has changed).
    pub fn reinit_ug(&mut self) -> Result<()> {
        self.params = init_ug_params(&self.params, &self.cfg)?;
        self.slots = Slots::resolve(&self.cfg, &self.params)?;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, |p| p.trainable)
    }

    /// Leaves whose gradient requirement is decided per parameter.
    pub fn bind_with(&self, g: &mut Graph<T>, requires_grad: impl Fn(&Param<T>) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf_shared(Arc::clone(&p.tensor), requires_grad(p)))
            .collect();
        Bound { vars }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        let ug = self.cfg.ug_token();
        tokens
            .iter()
            .map(|&t| {
                if t >= ug {
                    Err(Error::Contract(format!("token id {t} is not a normal token")))
                } else {
                    Ok(t as usize)
                }
            })
            .collect()
    }

    /// One block: dual-path attention followed by the shared MLP.
    pub fn layer_forward(&self, g: &mut Graph<T>, b: &Bound, layer: usize, inp: &LayerInput<'_>) -> Result<LayerOutput> {
        let s = &self.slots.layers[layer];
        let eps = self.cfg.norm_eps;
        let hd = self.cfg.head_dim();
        let base = self.cfg.rope_base;
        let n = g.value(inp.x_nt).rows();

        let h_nt = g.rms_norm(inp.x_nt, b.var(s.attn_norm), eps)?;
        let q_nt = g.matmul(h_nt, b.var(s.base[0]))?;
        let k_nt = g.matmul(h_nt, b.var(s.base[1]))?;
        let v_nt = g.matmul(h_nt, b.var(s.base[2]))?;
        let ug = match inp.x_ug {
            Some(x) => {
                let h = g.rms_norm(x, b.var(s.attn_norm), eps)?;
                let q = g.matmul(h, b.var(s.ug[0]))?;
                let k = g.matmul(h, b.var(s.ug[1]))?;
                let v = g.matmul(h, b.var(s.ug[2]))?;
                Some((q, k, v))
            }
            None => None,
        };
        let k_len = ug.map_or(0, |(q, _, _)| g.value(q).rows());
        if inp.nt_pos.len() != n || inp.ug_pos.len() != k_len {
            return Err(Error::Layout(format!(
                "positions for {}+{} rows, have {n}+{k_len}",
                inp.nt_pos.len(),
                inp.ug_pos.len()
            )));
        }

        let mut q_parts = vec![q_nt];
        let mut q_pos = inp.nt_pos.to_vec();
        let mut k_parts = Vec::with_capacity(4);
        let mut v_parts = Vec::with_capacity(4);
        let mut k_pos = Vec::new();
        if let Some((ck, cv)) = inp.cache {
            k_parts.push(ck);
            v_parts.push(cv);
            k_pos.extend_from_slice(inp.cache_pos);
        }
        k_parts.push(k_nt);
        v_parts.push(v_nt);
        k_pos.extend_from_slice(inp.nt_pos);
        if let Some((q, k, v)) = ug {
            q_parts.push(q);
            q_pos.extend_from_slice(inp.ug_pos);
            k_parts.push(k);
            v_parts.push(v);
            k_pos.extend_from_slice(inp.ug_pos);
            if let Some(dup) = inp.ug_cache_pos {
                k_parts.push(k);
                v_parts.push(v);
                k_pos.extend_from_slice(dup);
            }
        }
        if inp.mask.rows() != q_pos.len() || inp.mask.cols() != k_pos.len() {
            return Err(Error::Layout(format!(
                "mask {}x{} for {} queries and {} keys",
                inp.mask.rows(),
                inp.mask.cols(),
                q_pos.len(),
                k_pos.len()
            )));
        }

        let q_all = g.concat_rows(&q_parts)?;
        let q_rot = g.rope(q_all, &q_pos, hd, base)?;
        let q_rot = g.scale(q_rot, 1.0 / (hd as f64).sqrt())?;
        let k_all = g.concat_rows(&k_parts)?;
        let k_rot = g.rope(k_all, &k_pos, hd, base)?;
        let v_all = g.concat_rows(&v_parts)?;

        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (q_rot, k_rot, v_all)
            } else {
                (
                    g.slice_cols(q_rot, h * hd, hd)?,
                    g.slice_cols(k_rot, h * hd, hd)?,
                    g.slice_cols(v_all, h * hd, hd)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let attn = g.masked_softmax_rows(scores, inp.mask)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let o = g.concat_cols(&heads)?;

        let (o_nt, o_ug) = if k_len > 0 {
            (g.slice_rows(o, 0, n)?, Some(g.slice_rows(o, n, k_len)?))
        } else {
            (o, None)
        };
        let out_nt = g.matmul(o_nt, b.var(s.base[3]))?;
        let x_nt = g.add(inp.x_nt, out_nt)?;
        let x_ug = match (inp.x_ug, o_ug) {
            (Some(x), Some(o)) => {
                let out = g.matmul(o, b.var(s.ug[3]))?;
                Some(g.add(x, out)?)
            }
            _ => None,
        };

        let x_all = match x_ug {
            Some(u) => g.concat_rows(&[x_nt, u])?,
            None => x_nt,
        };
        let h = g.rms_norm(x_all, b.var(s.mlp_norm), eps)?;
        let gate = g.matmul(h, b.var(s.w_gate))?;
        let up = g.matmul(h, b.var(s.w_up))?;
        let gate = g.silu(gate)?;
        let act = g.mul(gate, up)?;
        let down = g.matmul(act, b.var(s.w_down))?;
        let x_all = g.add(x_all, down)?;
        let (x_nt, x_ug) = if k_len > 0 {
            (g.slice_rows(x_all, 0, n)?, Some(g.slice_rows(x_all, n, k_len)?))
        } else {
            (x_all, None)
        };

        Ok(LayerOutput {
            x_nt,
            x_ug,
            ug_kv: ug.map(|(_, k, v)| (k, v)),
        })
    }

    fn head(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let h = g.rms_norm(x, b.var(self.slots.final_norm), self.cfg.norm_eps)?;
        g.matmul(h, b.var(self.slots.lm_head))
    }

    /// Plain causal pass over `tokens` (any length, no compression tokens, no cache).
    pub fn plain_forward(&self, g: &mut Graph<T>, b: &Bound, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("no tokens".into()));
        }
        let ids = self.check_tokens(tokens)?;
        let n = ids.len();
        let pos: Vec<usize> = (0..n).collect();
        let mask = BoolMatrix::from_fn(n, n, |r, c| c <= r);
        let mut x = g.gather_rows(b.var(self.slots.embed), &ids)?;
        for l in 0..self.cfg.layers {
            let out = self.layer_forward(
                g,
                b,
                l,
                &LayerInput {
                    x_nt: x,
                    x_ug: None,
                    cache: None,
                    cache_pos: &[],
                    nt_pos: &pos,
                    ug_pos: &[],
                    ug_cache_pos: None,
                    mask: &mask,
                },
            )?;
            x = out.x_nt;
        }
        self.head(g, b, x)
    }

    /// One compression window: `tokens` (≤ w) followed by `ug_len` compression tokens, attending
    /// to `cache` (one entry per layer, or `None` for an empty cache).
    #[allow(clippy::too_many_arguments)]
    pub fn window_forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        tokens: &[u32],
        ug_len: usize,
        ratio: u32,
        cache: Option<&[LayerKv<T>]>,
        kind: MaskKind,
    ) -> Result<WindowOutput> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("window has no tokens".into()));
        }
        if tokens.len() > self.cfg.window {
            return Err(Error::WindowOverflow {
                len: tokens.len(),
                window: self.cfg.window,
            });
        }
        let cache_len = match cache {
            Some(layers) => {
                if layers.len() != self.cfg.layers {
                    return Err(Error::Contract(format!(
                        "cache has {} layers, model has {}",
                        layers.len(),
                        self.cfg.layers
                    )));
                }
                let len = layers[0].len();
                if layers.iter().any(|kv| kv.len() != len || kv.values.rows() != len) {
                    return Err(Error::Contract("cache layers disagree on length".into()));
                }
                len
            }
            None => 0,
        };
        let ids = self.check_tokens(tokens)?;
        let layout = AttentionLayout::new(cache_len, ids.len(), ug_len);
        let mask = maskgen::window_mask(layout, ratio, kind)?.into_matrix();
        let pos = positions_for(layout, ratio);

        let mut x_nt = g.gather_rows(b.var(self.slots.embed), &ids)?;
        let mut x_ug = if ug_len > 0 {
            Some(g.repeat_row(b.var(self.slots.ug_embed), ug_len)?)
        } else {
            None
        };
        let mut ug_kv = Vec::new();
        for l in 0..self.cfg.layers {
            let cache_vars = cache.map(|layers| {
                (
                    g.leaf_shared(Arc::clone(&layers[l].keys), false),
                    g.leaf_shared(Arc::clone(&layers[l].values), false),
                )
            });
            let out = self.layer_forward(
                g,
                b,
                l,
                &LayerInput {
                    x_nt,
                    x_ug,
                    cache: cache_vars,
                    cache_pos: &pos.cache,
                    nt_pos: &pos.normal,
                    ug_pos: &pos.ug,
                    ug_cache_pos: None,
                    mask: &mask,
                },
            )?;
            x_nt = out.x_nt;
            x_ug = out.x_ug;
            if let Some(kv) = out.ug_kv {
                ug_kv.push(kv);
            }
        }
        let logits = self.head(g, b, x_nt)?;
        Ok(WindowOutput { logits, ug_kv })
    }

    /// Whole interleaved sample in one pass under the unified training mask.
    pub fn unified_forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        tokens: &[u32],
        plan: &SegmentPlan,
        kind: MaskKind,
    ) -> Result<UnifiedOutput> {
        if tokens.len() != plan.total_len() {
            return Err(Error::Contract(format!(
                "plan covers {} tokens, sample has {}",
                plan.total_len(),
                tokens.len()
            )));
        }
        if plan.window() > self.cfg.window {
            return Err(Error::WindowOverflow {
                len: plan.window(),
                window: self.cfg.window,
            });
        }
        let ids = self.check_tokens(tokens)?;
        let t = ids.len();
        let k_total = plan.total_ug();

        let mut nt_pos = Vec::with_capacity(t);
        let mut ug_pos = Vec::with_capacity(k_total);
        let mut dup_pos = Vec::with_capacity(k_total);
        let mut nt_off = Vec::with_capacity(plan.len());
        let mut ug_off = Vec::with_capacity(plan.len());
        let mut cache_len = 0;
        for seg in plan.segments() {
            nt_off.push(nt_pos.len());
            ug_off.push(ug_pos.len());
            let layout = AttentionLayout::new(cache_len, seg.len(), seg.ug_count);
            let p = positions_for(layout, seg.ratio);
            nt_pos.extend(p.normal);
            ug_pos.extend(p.ug);
            dup_pos.extend(cache_len..cache_len + seg.ug_count);
            cache_len += seg.ug_count;
        }

        // Logical interleaved mask -> rows [nt | ug], cols [nt | ug | ug-as-cache].
        let logical = maskgen::unified_training_mask(plan, kind)?;
        let slots = interleaved_slots(plan);
        let row_of = |s: &Slot| match *s {
            Slot::Normal { segment, index } => nt_off[segment] + index,
            Slot::Ug { segment, index } => t + ug_off[segment] + index,
        };
        let mut mask = BoolMatrix::new(t + k_total, t + 2 * k_total);
        for (ri, rs) in slots.iter().enumerate() {
            let row = row_of(rs);
            for (ci, cs) in slots.iter().enumerate() {
                if !logical.get(ri, ci) {
                    continue;
                }
                let col = if cs.segment() == rs.segment() {
                    row_of(cs)
                } else {
                    match *cs {
                        Slot::Ug { segment, index } => t + k_total + ug_off[segment] + index,
                        Slot::Normal { .. } => {
                            return Err(Error::Layout("unified mask crosses into earlier normal tokens".into()))
                        }
                    }
                };
                mask.set(row, col, true);
            }
        }

        let mut x_nt = g.gather_rows(b.var(self.slots.embed), &ids)?;
        let mut x_ug = Some(g.repeat_row(b.var(self.slots.ug_embed), k_total)?);
        let mut ug_kv = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let out = self.layer_forward(
                g,
                b,
                l,
                &LayerInput {
                    x_nt,
                    x_ug,
                    cache: None,
                    cache_pos: &[],
                    nt_pos: &nt_pos,
                    ug_pos: &ug_pos,
                    ug_cache_pos: Some(&dup_pos),
                    mask: &mask,
                },
            )?;
            x_nt = out.x_nt;
            x_ug = out.x_ug;
            ug_kv.push(out.ug_kv.expect("ug rows present"));
        }
        let logits = self.head(g, b, x_nt)?;
        Ok(UnifiedOutput { logits, ug_kv })
    }

    /// Graph-free window pass: `(logits, per-layer new ug keys/values)`.
    pub fn run_window(
        &self,
        tokens: &[u32],
        ratio: u32,
        with_ug: bool,
        cache: Option<&[LayerKv<T>]>,
        kind: MaskKind,
    ) -> Result<(Tensor<T>, Vec<LayerKv<T>>)> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let k = if with_ug { ug_count(tokens.len(), ratio) } else { 0 };
        let out = self.window_forward(&mut g, &b, tokens, k, ratio, cache, kind)?;
        let kv = out
            .ug_kv
            .iter()
            .map(|&(k, v)| LayerKv {
                keys: g.shared_value(k),
                values: g.shared_value(v),
            })
            .collect();
        Ok((g.value(out.logits).clone(), kv))
    }

    /// Graph-free plain causal pass.
    pub fn run_plain(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let logits = self.plain_forward(&mut g, &b, tokens)?;
        Ok(g.value(logits).clone())
    }

    /// Leaves that never require gradients (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, |_| false)
    }
}
