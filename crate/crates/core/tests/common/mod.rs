//! Oracles shared by several integration-test targets.
#![allow(dead_code)]

use ugpress::model::{names, Model, ModelConfig, ParamSet};
use ugpress::numkernel::Element;
use ugpress::segmenter::{ug_count, Segment, SegmentPlan, Span};

/// Straightforward causal decoder over the base weights, written with plain loops in f64.
pub fn reference_decoder<T: Element>(cfg: &ModelConfig, p: &ParamSet<T>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let get = |name: &str| -> Vec<f64> { p.get(name).unwrap().data().iter().map(|x| x.as_f64()).collect() };
    let (d, n, hd) = (cfg.dim, tokens.len(), cfg.head_dim());
    let matvec = |x: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
        (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum()).collect()
    };
    let rms = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + cfg.norm_eps).sqrt();
        x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
    };
    let rope = |v: &mut [f64], pos: usize| {
        for h in 0..cfg.heads {
            for i in 0..hd / 2 {
                let theta = pos as f64 * cfg.rope_base.powf(-2.0 * i as f64 / hd as f64);
                let (a, b) = (v[h * hd + i], v[h * hd + i + hd / 2]);
                v[h * hd + i] = a * theta.cos() - b * theta.sin();
                v[h * hd + i + hd / 2] = a * theta.sin() + b * theta.cos();
            }
        }
    };
    let embed = get(names::EMBED);
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| embed[t as usize * d..(t as usize + 1) * d].to_vec()).collect();
    for l in 0..cfg.layers {
        let g = get(&names::attn_norm(l));
        let (wq, wk, wv, wo) = (
            get(&names::base_proj(l, "wq")),
            get(&names::base_proj(l, "wk")),
            get(&names::base_proj(l, "wv")),
            get(&names::base_proj(l, "wo")),
        );
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &g)).collect();
        let mut q: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &wq, d)).collect();
        let mut k: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &wk, d)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &wv, d)).collect();
        for i in 0..n {
            rope(&mut q[i], i);
            rope(&mut k[i], i);
        }
        for i in 0..n {
            let mut o = vec![0.0; d];
            for hh in 0..cfg.heads {
                let r = hh * hd..(hh + 1) * hd;
                let s: Vec<f64> = (0..=i)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for j in 0..=i {
                    let a = (s[j] - m).exp() / z;
                    for c in r.clone() {
                        o[c] += a * v[j][c];
                    }
                }
            }
            let out = matvec(&o, &wo, d);
            x[i].iter_mut().zip(out).for_each(|(a, b)| *a += b);
        }
        let g = get(&names::mlp_norm(l));
        let (wg, wu, wd) = (get(&names::mlp(l, "w_gate")), get(&names::mlp(l, "w_up")), get(&names::mlp(l, "w_down")));
        for row in x.iter_mut() {
            let h = rms(row, &g);
            let gate = matvec(&h, &wg, cfg.mlp_dim);
            let up = matvec(&h, &wu, cfg.mlp_dim);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = matvec(&act, &wd, d);
            row.iter_mut().zip(down).for_each(|(a, b)| *a += b);
        }
    }
    let g = get(names::FINAL_NORM);
    let head = get(names::LM_HEAD);
    x.iter().map(|r| matvec(&rms(r, &g), &head, cfg.vocab)).collect()
}

/// `-log softmax(row)[target]`, computed in f64.
pub fn neg_log_softmax(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    m + z.ln() - row[target]
}

/// Plan with the given `(length, ratio)` segments in order.
pub fn plan_with(lens_ratios: &[(usize, u32)], window: usize) -> SegmentPlan {
    let mut start = 0;
    let segs = lens_ratios
        .iter()
        .map(|&(len, ratio)| {
            let s = Segment { span: Span { start: start + 1, end: start + len }, ratio, ug_count: ug_count(len, ratio) };
            start += len;
            s
        })
        .collect();
    SegmentPlan::from_segments(window, segs).unwrap()
}

/// Tiny model whose ug projections no longer equal their base copies.
pub fn lively_model<T: Element>(cfg: ModelConfig, seed: u64) -> Model<T> {
    use rand::{Rng, SeedableRng};
    let mut m = Model::<T>::new_random(cfg, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let slots: Vec<usize> = (0..m.params().len()).filter(|&i| m.params().at(i).trainable).collect();
    for s in slots {
        for x in m.params_mut().tensor_mut(s).data_mut() {
            *x = *x + T::from_f64(rng.gen_range(-0.1..0.1));
        }
    }
    m
}
