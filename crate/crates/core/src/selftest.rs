//! Built-in consistency checks run by `ugpress selftest`.

use rand::Rng as _;

use crate::compressor::compress_context;
use crate::error::Result;
use crate::maskgen::{window_mask, AttentionLayout, MaskKind, MaskVariant};
use crate::model::{Model, ModelConfig};
use crate::numkernel::{grad_check, Graph, Tensor};
use crate::rng;
use crate::segmenter::{ug_count, Segment, SegmentPlan, Span};
use crate::trainer::compression_lm_loss_var;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Expected normal-token field (1-based) of ug token `j` (1-based), written out per variant.
fn expected_field(variant: MaskVariant, j: usize, ratio: usize, n: usize) -> Vec<usize> {
    let end = (j * ratio).min(n);
    match variant {
        MaskVariant::Stepwise => (1..=end).collect(),
        MaskVariant::Segmentation => ((j - 1) * ratio + 1..=end).collect(),
        MaskVariant::FullCoverage => (1..=n).collect(),
    }
}

/// Every window mask with `normal_len ≤ 16`, `α ∈ {2,4,8,16}`, `L_ca ∈ {0,3}` against the
/// field definitions; returns the number of masks checked or the first mismatch.
pub fn mask_fields() -> std::result::Result<usize, String> {
    let mut checked = 0;
    for variant in MaskVariant::ALL {
        for ug_causal in [true, false] {
            for ratio in [2usize, 4, 8, 16] {
                for cache in [0, 3] {
                    for n in 1..=16usize {
                        let k = n.div_ceil(ratio);
                        let layout = AttentionLayout::new(cache, n, k);
                        let kind = MaskKind { variant, ug_causal };
                        let m = window_mask(layout, ratio as u32, kind).map_err(|e| e.to_string())?;
                        let tag = format!("{variant} causal={ug_causal} α={ratio} L_ca={cache} n={n}");
                        for r in 0..n + k {
                            if !(0..cache).all(|c| m.get(r, c)) {
                                return Err(format!("{tag}: row {r} misses cache"));
                            }
                        }
                        for r in 0..n {
                            let seen: Vec<usize> = (0..n).filter(|&i| m.get(r, layout.normal_col(i))).collect();
                            if seen != (0..=r).collect::<Vec<_>>() || (0..k).any(|j| m.get(r, layout.ug_col(j))) {
                                return Err(format!("{tag}: normal row {r} is not causal"));
                            }
                        }
                        let mut prev: Vec<usize> = Vec::new();
                        for j in 1..=k {
                            let row = layout.ug_row(j - 1);
                            let field: Vec<usize> = (1..=n).filter(|&i| m.get(row, layout.normal_col(i - 1))).collect();
                            if field != expected_field(variant, j, ratio, n) {
                                return Err(format!("{tag}: ug {j} field {field:?}"));
                            }
                            let ok = match variant {
                                MaskVariant::Stepwise => prev.iter().all(|i| field.contains(i)),
                                MaskVariant::Segmentation => prev.iter().all(|i| !field.contains(i)),
                                MaskVariant::FullCoverage => field.len() == n,
                            };
                            if !ok {
                                return Err(format!("{tag}: ug {j} breaks the variant's shape"));
                            }
                            let ugs: Vec<usize> = (0..k).filter(|&i| m.get(row, layout.ug_col(i))).collect();
                            let want: Vec<usize> = if ug_causal { (0..j).collect() } else { vec![j - 1] };
                            if ugs != want {
                                return Err(format!("{tag}: ug {j} sees ug slots {ugs:?}"));
                            }
                            prev = field;
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(checked)
}

fn lively_tiny(seed: u64) -> Result<Model<f64>> {
    let mut m = Model::<f64>::new_random(ModelConfig { init_std: 0.3, ..ModelConfig::tiny() }, seed)?;
    let mut r = rng::from_seed(seed);
    let slots: Vec<usize> = (0..m.params().len()).filter(|&i| m.params().at(i).trainable).collect();
    for s in slots {
        for x in m.params_mut().tensor_mut(s).data_mut() {
            *x += r.gen_range(-0.1..0.1);
        }
    }
    Ok(m)
}

fn plan(parts: &[(usize, u32)], window: usize) -> Result<SegmentPlan> {
    let mut start = 0;
    let segs = parts
        .iter()
        .map(|&(len, ratio)| {
            let s = Segment {
                span: Span { start: start + 1, end: start + len },
                ratio,
                ug_count: ug_count(len, ratio),
            };
            start += len;
            s
        })
        .collect();
    SegmentPlan::from_segments(window, segs)
}

/// Worst relative error of the compression-loss gradient over every trainable tensor.
pub fn ug_gradients() -> Result<f64> {
    let m = lively_tiny(8)?;
    let toks: Vec<u32> = (0..14).map(|i| (i * 37 % 250) as u32).collect();
    let p = plan(&[(8, 2), (6, 4)], 8)?;
    let slots: Vec<usize> = (0..m.params().len()).filter(|&i| m.params().at(i).trainable).collect();
    let tensors: Vec<Tensor<f64>> = slots.iter().map(|&s| (*m.params().at(s).tensor).clone()).collect();
    grad_check(
        |g, vars| {
            let mut b = m.bind_frozen(g);
            for (&s, &v) in slots.iter().zip(vars) {
                b.replace(s, v);
            }
            compression_lm_loss_var(g, &b, &m, &toks, &p, MaskKind::default())
        },
        &tensors,
        1e-5,
    )
}

/// Largest cached-K/V difference between window-by-window compression and one unified pass.
pub fn serial_parallel() -> Result<f64> {
    let mut worst = 0.0f64;
    for (seed, parts) in [&[(8, 2), (8, 4)][..], &[(8, 8), (8, 1), (5, 2)], &[(8, 4), (8, 2), (8, 16), (3, 2)]]
        .iter()
        .enumerate()
    {
        let m = lively_tiny(seed as u64)?;
        let p = plan(parts, 8)?;
        let toks: Vec<u32> = (0..p.total_len()).map(|i| ((i * 53 + seed) % 256) as u32).collect();
        for variant in MaskVariant::ALL {
            let kind = MaskKind::from(variant);
            let cache = compress_context(&m, &toks, &p, kind)?;
            let mut g = Graph::new();
            let b = m.bind_frozen(&mut g);
            let out = m.unified_forward(&mut g, &b, &toks, &p, kind)?;
            for (l, &(k, v)) in out.ug_kv.iter().enumerate() {
                let kv = &cache.layer_kv()[l];
                worst = worst.max(g.value(k).max_abs_diff(&kv.keys));
                worst = worst.max(g.value(v).max_abs_diff(&kv.values));
            }
        }
    }
    Ok(worst)
}

pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(match mask_fields() {
        Ok(n) => Check {
            name: "mask-fields",
            passed: true,
            detail: format!("{n} masks"),
        },
        Err(e) => Check {
            name: "mask-fields",
            passed: false,
            detail: e,
        },
    });
    let numeric = |name, r: Result<f64>, tol: f64| match r {
        Ok(x) => Check {
            name,
            passed: x <= tol,
            detail: format!("{x:.3e} (limit {tol:.0e})"),
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    };
    out.push(numeric("ug-gradients", ug_gradients(), 1e-5));
    out.push(numeric("serial-parallel", serial_parallel(), 1e-10));
    out
}
