use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numkernel::{Element, Tensor};
use crate::rng;

/// One named tensor with its trainable flag.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered, name-indexed parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces `name`; returns its slot.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> usize {
        let tensor = Arc::new(tensor);
        if let Some(&i) = self.index.get(name) {
            self.params[i].tensor = tensor;
            self.params[i].trainable = trainable;
            return i;
        }
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            trainable,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.slot(name).map(|i| &*self.params[i].tensor)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn at(&self, slot: usize) -> &Param<T> {
        &self.params[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[slot].tensor)
    }

    pub fn set_trainable(&mut self, slot: usize, trainable: bool) {
        self.params[slot].trainable = trainable;
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect()
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.name.as_str()).collect()
    }

    /// Little-endian bytes of every tensor whose name passes `filter`, in slot order.
    pub fn bytes_where(&self, filter: impl Fn(&Param<T>) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&p.tensor.to_le_bytes());
        }
        out
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.insert(&p.name, p.tensor.cast(), p.trainable);
        }
        out
    }
}

/// Per-layer names, in a fixed order.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const UG_EMBED: &str = "ug_embed";
    pub const FINAL_NORM: &str = "final_norm";
    pub const LM_HEAD: &str = "lm_head";

    /// Projection suffixes shared by the base and ug attention paths.
    pub const PROJ: [&str; 4] = ["wq", "wk", "wv", "wo"];

    pub fn attn_norm(l: usize) -> String {
        format!("layers.{l}.attn_norm")
    }
    pub fn base_proj(l: usize, p: &str) -> String {
        format!("layers.{l}.attn.{p}")
    }
    pub fn ug_proj(l: usize, p: &str) -> String {
        format!("layers.{l}.attn_ug.{p}")
    }
    pub fn mlp_norm(l: usize) -> String {
        format!("layers.{l}.mlp_norm")
    }
    pub fn mlp(l: usize, p: &str) -> String {
        format!("layers.{l}.mlp.{p}")
    }

    pub fn is_ug(name: &str) -> bool {
        name == UG_EMBED || name.contains(".attn_ug.")
    }
}

/// Randomly initialized base parameters (no ug tensors), all frozen.
pub fn init_base_params<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "model.init");
    let d = cfg.dim;
    let std = cfg.init_std;
    // Residual-writing projections are scaled down with depth.
    let resid_std = std / (2.0 * cfg.layers as f64).sqrt();
    let mut set = ParamSet::new();
    let mut gauss = |rows: usize, cols: usize, std: f64| -> Tensor<T> {
        let data = (0..rows * cols).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std)).collect();
        Tensor::matrix(rows, cols, data).expect("positive extents")
    };

    set.insert(names::EMBED, gauss(cfg.vocab, d, std), false);
    for l in 0..cfg.layers {
        set.insert(&names::attn_norm(l), Tensor::full(&[d], T::one()), false);
        for p in names::PROJ {
            let s = if p == "wo" { resid_std } else { std };
            set.insert(&names::base_proj(l, p), gauss(d, d, s), false);
        }
        set.insert(&names::mlp_norm(l), Tensor::full(&[d], T::one()), false);
        set.insert(&names::mlp(l, "w_gate"), gauss(d, cfg.mlp_dim, std), false);
        set.insert(&names::mlp(l, "w_up"), gauss(d, cfg.mlp_dim, std), false);
        set.insert(&names::mlp(l, "w_down"), gauss(cfg.mlp_dim, d, resid_std), false);
    }
    set.insert(names::FINAL_NORM, Tensor::full(&[d], T::one()), false);
    set.insert(names::LM_HEAD, gauss(d, cfg.vocab, std), false);
    Ok(set)
}

/// Copies every base projection into its ug counterpart and sets the shared ug embedding
/// to the mean of the token-embedding table. Base tensors end up frozen, ug tensors trainable.
pub fn init_ug_params<T: Element>(base: &ParamSet<T>, cfg: &ModelConfig) -> Result<ParamSet<T>> {
    let mut out = ParamSet::new();
    for p in base.iter().filter(|p| !names::is_ug(&p.name)) {
        out.insert(&p.name, (*p.tensor).clone(), false);
    }
    for l in 0..cfg.layers {
        for p in names::PROJ {
            let src = base.expect(&names::base_proj(l, p))?.clone();
            out.insert(&names::ug_proj(l, p), src, true);
        }
    }
    let embed = base.expect(names::EMBED)?;
    let (rows, d) = (embed.rows(), embed.cols());
    let mut mean = vec![0.0f64; d];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(embed.row(r)) {
            *m += v.as_f64();
        }
    }
    let mean: Vec<T> = mean.into_iter().map(|m| T::from_f64(m / rows as f64)).collect();
    out.insert(names::UG_EMBED, Tensor::new(vec![d], mean)?, true);
    Ok(out)
}
