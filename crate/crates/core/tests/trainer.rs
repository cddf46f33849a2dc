use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugpress::compressor::CompressedCache;
use ugpress::maskgen::MaskKind;
use ugpress::model::{names, Model, ModelConfig};
use ugpress::numkernel::{DType, Element};
use ugpress::segmenter::{partition, ug_count, RatioSampler, SamplingMode, Segment, SegmentPlan, Span};
use ugpress::trainer::*;
use ugpress::Error;

fn lively_model<T: Element>(seed: u64) -> Model<T> {
    let cfg = ModelConfig { init_std: 0.3, ..ModelConfig::tiny() };
    let mut m = Model::<T>::new_random(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let slots: Vec<usize> = (0..m.params().len()).filter(|&i| m.params().at(i).trainable).collect();
    for s in slots {
        for x in m.params_mut().tensor_mut(s).data_mut() {
            *x = *x + T::from_f64(rng.gen_range(-0.1..0.1));
        }
    }
    m
}

fn plan_with(lens_ratios: &[(usize, u32)], window: usize) -> SegmentPlan {
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

fn neg_log_softmax(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    m + z.ln() - row[target]
}

/// Per-token NLL (index = 0-based token position) from compressing one segment at a time
/// against the real cache; the first segment has no predictions.
fn serial_nll<T: Element>(model: &Model<T>, toks: &[u32], plan: &SegmentPlan, kind: MaskKind) -> Vec<Option<f64>> {
    let mut out = vec![None; toks.len()];
    let mut cache = CompressedCache::empty(model);
    let v = model.config().vocab;
    for (i, seg) in plan.segments().iter().enumerate() {
        let r = seg.span.range();
        let piece = &toks[r.clone()];
        if i > 0 {
            let (logits, _) = model.run_window(piece, seg.ratio, true, Some(cache.layer_kv()), kind).unwrap();
            let prev: Vec<f64> = cache.pending_logits().unwrap().iter().map(|x| x.as_f64()).collect();
            out[r.start] = Some(neg_log_softmax(&prev, piece[0] as usize));
            for j in 1..piece.len() {
                let row: Vec<f64> = (0..v).map(|c| logits.get2(j - 1, c).as_f64()).collect();
                out[r.start + j] = Some(neg_log_softmax(&row, piece[j] as usize));
            }
        }
        cache.compress_append(model, piece, seg.ratio, kind).unwrap();
    }
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn compression_loss_matches_serial_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (ci, case) in [&[(8, 2), (8, 4)][..], &[(8, 8), (8, 2), (5, 4)], &[(8, 1), (8, 32), (8, 2), (2, 2)]].iter().enumerate() {
        let model = lively_model::<f32>(ci as u64);
        let kind = model.config().mask;
        let plan = plan_with(case, 8);
        let toks: Vec<u32> = (0..plan.total_len()).map(|_| rng.gen_range(0..256)).collect();
        let got = compression_lm_loss(&model, &toks, &plan, kind).unwrap();
        let want = mean(serial_nll(&model, &toks, &plan, kind).into_iter().flatten());
        assert!((got - want).abs() <= 1e-4, "case {ci}: {got} vs {want}");
    }
}

#[test]
fn encode_decode_equals_compression_loss_on_last_segment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = lively_model::<f64>(7);
    let kind = model.config().mask;
    for case in [&[(8, 2), (8, 4), (6, 2)][..], &[(8, 4), (3, 8)]] {
        let plan = plan_with(case, 8);
        let toks: Vec<u32> = (0..plan.total_len()).map(|_| rng.gen_range(0..256)).collect();
        let last = plan.segments().last().unwrap().span.range();
        let serial = serial_nll(&model, &toks, &plan, kind);
        let want = mean(last.clone().map(|i| serial[i].unwrap()));

        let mut g = ugpress::numkernel::Graph::new();
        let b = model.bind_frozen(&mut g);
        let loss = encode_decode_loss_var(&mut g, &b, &model, &toks, last.start, &plan, kind).unwrap();
        let got = g.value(loss).data()[0];
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn encode_decode_plan_compresses_input_at_one_ratio() {
    let model = lively_model::<f64>(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input: Vec<u32> = (0..13).map(|_| rng.gen_range(0..256)).collect();
    let target: Vec<u32> = (0..5).map(|_| rng.gen_range(0..256)).collect();
    let plan = encode_decode_plan(13, 5, 8, 4).unwrap();
    let lens: Vec<usize> = plan.segments().iter().map(|s| s.len()).collect();
    assert_eq!(lens, vec![8, 5, 5]);
    assert!(plan.segments().iter().all(|s| s.ratio == 4));
    let toks: Vec<u32> = input.iter().chain(&target).copied().collect();
    let serial = serial_nll(&model, &toks, &plan, model.config().mask);
    let want = mean((13..18).map(|i| serial[i].unwrap()));
    let got = encode_decode_loss(&model, &input, &target, 4, model.config().mask).unwrap();
    assert!((got - want).abs() <= 1e-10);
}

#[test]
fn uniform_logits_give_ln_v() {
    let mut model = lively_model::<f64>(3);
    let head = model.params().slot(names::LM_HEAD).unwrap();
    model.params_mut().tensor_mut(head).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let ln_v = (model.config().vocab as f64).ln();
    let toks: Vec<u32> = (0..21).map(|i| (i * 37 % 256) as u32).collect();
    for plan in [plan_with(&[(8, 2), (8, 4), (5, 8)], 8), plan_with(&[(8, 32), (8, 1), (5, 1)], 8)] {
        let kind = model.config().mask;
        assert!((compression_lm_loss(&model, &toks, &plan, kind).unwrap() - ln_v).abs() < 1e-12);
    }
    let ed = encode_decode_loss(&model, &toks[..10], &toks[10..], 2, model.config().mask).unwrap();
    assert!((ed - ln_v).abs() < 1e-12);
}

#[test]
fn loss_contracts() {
    let model = lively_model::<f64>(1);
    let kind = model.config().mask;
    let toks = vec![5u32; 8];
    let one = SegmentPlan::monotonous(8, 8, 2).unwrap();
    assert!(matches!(compression_lm_loss(&model, &toks, &one, kind), Err(Error::NoSupervision)));
    assert!(matches!(encode_decode_loss(&model, &toks, &[], 2, kind), Err(Error::Contract(_))));
    assert!(matches!(encode_decode_loss(&model, &[], &toks, 2, kind), Err(Error::EmptyInput(_))));
}

#[test]
fn sample_plan_keeps_target_out_of_input_windows() {
    let sampler = RatioSampler::new(vec![2, 4, 8], SamplingMode::PerSegment, 3).unwrap();
    let s = Sample { tokens: vec![1; 30], target_start: 20 };
    let plan = sample_plan(&s, 8, &sampler).unwrap();
    let lens: Vec<usize> = plan.segments().iter().map(|s| s.len()).collect();
    assert_eq!(lens, vec![8, 8, 4, 8, 2]);
    let whole = sample_plan(&Sample { tokens: vec![1; 30], target_start: 0 }, 8, &sampler).unwrap();
    assert_eq!(whole.len(), partition(30, 8).unwrap().spans.len());
}

#[test]
fn per_segment_batches_mix_ratios() {
    let cfg = TrainConfig { seed: 17, ..TrainConfig::default() };
    let sampler = cfg.sampler().unwrap();
    let sample = Sample { tokens: vec![0; 4 * 32], target_start: 0 };
    let mut mixed = 0;
    for batch in 0..1000u64 {
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..cfg.batch_size as u64 {
            let plan = sample_plan(&sample, 32, &sampler.reseeded(batch * 1000 + i)).unwrap();
            seen.extend(plan.segments().iter().map(|s| s.ratio));
        }
        if seen.len() >= 2 {
            mixed += 1;
        }
    }
    assert!(mixed >= 990, "{mixed}/1000 batches mixed ratios");
}

fn corpus() -> StreamSource {
    let text = "the cat sat on the mat. the dog sat on the log. a cat and a dog met on a mat. ".repeat(20);
    StreamSource { tokens: text.bytes().map(u32::from).collect(), sample_len: 24, target_len: 8 }
}

fn tiny_f32(seed: u64) -> Model<f32> {
    Model::new_random(ModelConfig { dtype: DType::F32, ..ModelConfig::tiny() }, seed).unwrap()
}

fn val_set() -> Vec<Sample> {
    (0..4).map(|i| corpus().sample(1000 + i).unwrap()).collect()
}

#[test]
fn training_touches_only_ug_params_and_is_deterministic() {
    let cfg = TrainConfig { steps: 100, batch_size: 2, eval_every: 50, seed: 3, candidates: vec![2, 4, 8], ..TrainConfig::default() };
    let probe: Vec<u32> = b"a dog met the cat".iter().map(|&b| u32::from(b)).collect();
    let mut a = tiny_f32(1);
    let before = a.params().clone();
    let plain_before = a.run_plain(&probe).unwrap();
    let log_a = train(&mut a, &corpus(), &val_set(), &cfg).unwrap();

    let report = freeze_audit(&before, a.params());
    assert!(report.is_clean(), "{:?}", report.drifted);
    assert_eq!(report.checked, before.frozen_names().len());
    assert_eq!(a.run_plain(&probe).unwrap(), plain_before);
    let ug = |p: &ugpress::model::ParamSet<f32>| p.bytes_where(|p| p.trainable);
    assert_ne!(ug(&before), ug(a.params()));

    let mut b = tiny_f32(1);
    let log_b = train(&mut b, &corpus(), &val_set(), &cfg).unwrap();
    assert_eq!(log_a.to_csv(), log_b.to_csv());
    assert_eq!(a.params().bytes_where(|_| true), b.params().bytes_where(|_| true));
}

#[test]
fn freeze_audit_names_perturbed_tensor() {
    let model = tiny_f32(2);
    let mut other = model.params().clone();
    let slot = other.slot(&names::base_proj(1, "wv")).unwrap();
    other.tensor_mut(slot).data_mut()[3] += 1e-6;
    let report = freeze_audit(model.params(), &other);
    assert_eq!(report.drifted, vec![names::base_proj(1, "wv")]);
    assert!(matches!(report.into_result(), Err(Error::Contract(_))));
}

#[test]
fn step_zero_ppl_is_near_vocab_size() {
    let mut model = tiny_f32(5);
    let cfg = TrainConfig { steps: 1, batch_size: 1, ..TrainConfig::default() };
    let log = train(&mut model, &corpus(), &val_set(), &cfg).unwrap();
    let v = model.config().vocab as f64;
    let p0 = log.rows[0].val_ppl.unwrap();
    assert!((p0 / v - 1.0).abs() < 0.05, "{p0}");
}

#[test]
fn compression_loss_decreases_early() {
    for seed in [0, 1, 2] {
        let mut model = tiny_f32(seed);
        let cfg = TrainConfig { steps: 200, batch_size: 2, lr: 3e-3, eval_every: 0, seed, ..TrainConfig::default() };
        let log = train(&mut model, &corpus(), &val_set(), &cfg).unwrap();
        let losses: Vec<f64> = log.rows[1..].iter().map(|r| r.train_loss).collect();
        let head = mean(losses[..20].iter().copied());
        let tail = mean(losses[losses.len() - 20..].iter().copied());
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn nan_weights_abort_training() {
    let mut model = tiny_f32(6);
    let slot = model.params().slot(names::EMBED).unwrap();
    model.params_mut().tensor_mut(slot).data_mut().iter_mut().for_each(|x| *x = f32::NAN);
    let cfg = TrainConfig { steps: 3, batch_size: 1, ..TrainConfig::default() };
    let err = train(&mut model, &corpus(), &val_set(), &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err:?}");
}

#[test]
fn lr_decays_linearly_without_warmup() {
    let cfg = TrainConfig { lr: 2e-3, steps: 4, ..TrainConfig::default() };
    let lrs: Vec<f64> = (0..4).map(|s| cfg.lr_at(s)).collect();
    assert_eq!(lrs, vec![2e-3, 1.5e-3, 1e-3, 5e-4]);
}

#[test]
fn config_keys_and_validation() {
    let mut cfg = TrainConfig::default();
    assert!(cfg.apply("train.objective", "encode-decode").unwrap());
    assert!(cfg.apply("train.ratios", "2, 8").unwrap());
    assert!(!cfg.apply("model.dim", "4").unwrap());
    assert_eq!(cfg.objective, Objective::EncodeDecode);
    assert_eq!(cfg.candidates, vec![2, 8]);
    assert!(cfg.apply("train.lr", "fast").is_err());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
    assert_eq!("finetune".parse::<Phase>().unwrap().to_string(), "finetune");
}
