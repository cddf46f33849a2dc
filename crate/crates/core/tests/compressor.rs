use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugpress::compressor::{compress_context, CompressedCache, DecodeMode, Session};
use ugpress::maskgen::{MaskKind, MaskVariant};
use ugpress::model::{Model, ModelConfig};
use ugpress::numkernel::{flops, Element, Graph};
use ugpress::segmenter::{assign_ratios, partition, ug_count, RatioSampler, SamplingMode, Segment, SegmentPlan, Span};
use ugpress::Error;

fn lively_model<T: Element>(seed: u64) -> Model<T> {
    let cfg = ModelConfig { init_std: 0.3, ..ModelConfig::tiny() };
    let mut m = Model::<T>::new_random(cfg, seed).unwrap();
    // Move the ug path away from its copy of the base so the two paths are distinguishable.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let slots: Vec<usize> = (0..m.params().len()).filter(|&i| m.params().at(i).trainable).collect();
    for s in slots {
        for x in m.params_mut().tensor_mut(s).data_mut() {
            *x = *x + T::from_f64(rng.gen_range(-0.1..0.1));
        }
    }
    m
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..256)).collect()
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

fn serial_vs_unified<T: Element>(tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: [&[(usize, u32)]; 3] = [&[(8, 2), (8, 4)], &[(8, 4), (8, 2), (5, 8)], &[(8, 8), (8, 2), (8, 4), (3, 2)]];
    for (ci, case) in cases.iter().enumerate() {
        for variant in MaskVariant::ALL {
            for ug_causal in [true, false] {
                let kind = MaskKind { variant, ug_causal };
                let model = lively_model::<T>(ci as u64);
                let plan = plan_with(case, 8);
                let toks = tokens(&mut rng, plan.total_len());
                let cache = compress_context(&model, &toks, &plan, kind).unwrap();

                let mut g = Graph::new();
                let b = model.bind_frozen(&mut g);
                let out = model.unified_forward(&mut g, &b, &toks, &plan, kind).unwrap();
                for (l, &(k, v)) in out.ug_kv.iter().enumerate() {
                    let kv = &cache.layer_kv()[l];
                    let dk = g.value(k).max_abs_diff(&kv.keys);
                    let dv = g.value(v).max_abs_diff(&kv.values);
                    assert!(dk <= tol && dv <= tol, "{variant:?} case {ci} layer {l}: {dk} {dv}");
                }
            }
        }
    }
}

#[test]
fn serial_compression_matches_unified_pass_f64() {
    serial_vs_unified::<f64>(1e-10);
}

#[test]
fn serial_compression_matches_unified_pass_f32() {
    serial_vs_unified::<f32>(1e-4);
}

#[test]
fn cache_length_is_sum_of_k() {
    let model = Model::<f32>::new_random(ModelConfig { dim: 8, heads: 2, mlp_dim: 8, layers: 1, dtype: ugpress::numkernel::DType::F32, ..ModelConfig::tiny() }, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000u64 {
        let t = rng.gen_range(1..40);
        let sampler = RatioSampler::new(vec![2, 4, 8, 16, 32], SamplingMode::PerSegment, i).unwrap();
        let plan = assign_ratios(&partition(t, 8).unwrap(), &sampler);
        let toks = tokens(&mut rng, t);
        let cache = compress_context(&model, &toks, &plan, MaskKind::default()).unwrap();
        let expect: usize = plan.segments().iter().map(|s| (s.len() + s.ratio as usize - 1) / s.ratio as usize).sum();
        assert_eq!(cache.len(), expect);
        assert_eq!(cache.total_source_tokens(), t);
        assert!(cache.layer_kv().iter().all(|kv| kv.len() == expect));
    }
}

#[test]
fn append_examples_and_prefix_equality() {
    let model = lively_model::<f64>(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cache = CompressedCache::empty(&model);
    cache.compress_append(&model, &tokens(&mut rng, 8), 4, MaskKind::default()).unwrap();
    assert_eq!(cache.len(), 2);

    let mut cache = CompressedCache::empty(&model);
    let mut lens = vec![];
    for ratio in [2, 4, 2] {
        let before = cache.clone();
        cache.compress_append(&model, &tokens(&mut rng, 8), ratio, MaskKind::default()).unwrap();
        lens.push(cache.len());
        for (old, new) in before.layer_kv().iter().zip(cache.layer_kv()) {
            let n = old.keys.numel();
            assert_eq!(&new.keys.data()[..n], old.keys.data());
            assert_eq!(&new.values.data()[..n], old.values.data());
        }
    }
    assert_eq!(lens, vec![4, 6, 10]);
    assert_eq!(cache.segment_log().len(), 3);

    let err = cache.compress_append(&model, &tokens(&mut rng, 9), 2, MaskKind::default());
    assert!(matches!(err, Err(Error::WindowOverflow { .. })));
}

#[test]
fn compress_context_contracts() {
    let model = lively_model::<f64>(1);
    let plan = SegmentPlan::monotonous(16, 8, 4).unwrap();
    assert!(matches!(compress_context(&model, &[], &plan, MaskKind::default()), Err(Error::EmptyInput(_))));
    assert!(matches!(compress_context(&model, &[1; 15], &plan, MaskKind::default()), Err(Error::Contract(_))));
    let cache = compress_context(&model, &[7; 32], &SegmentPlan::monotonous(32, 8, 4).unwrap(), MaskKind::default()).unwrap();
    assert_eq!(cache.len() * 4, 32);
}

#[test]
fn random_model_scores_near_uniform() {
    let model = Model::<f32>::new_random(ModelConfig { dtype: ugpress::numkernel::DType::F32, ..ModelConfig::tiny() }, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ctx = tokens(&mut rng, 24);
    let cache = compress_context(&model, &ctx, &SegmentPlan::monotonous(24, 8, 2).unwrap(), MaskKind::default()).unwrap();
    let mut s = Session::new(&model, cache, RatioSampler::monotonous(2), MaskKind::default()).unwrap();
    let nll = s.score_nll(&tokens(&mut rng, 30)).unwrap();
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    let ln_v = (model.config().vocab as f64).ln();
    assert!((mean - ln_v).abs() < 0.1 * ln_v, "mean {mean} vs {ln_v}");
}

#[test]
fn scoring_is_chunking_invariant_and_deterministic() {
    let model = lively_model::<f64>(6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ctx = tokens(&mut rng, 13);
    let cont = tokens(&mut rng, 29);
    let cache = compress_context(&model, &ctx, &SegmentPlan::monotonous(13, 8, 2).unwrap(), MaskKind::default()).unwrap();
    let sampler = RatioSampler::new(vec![2, 4, 8], SamplingMode::PerSegment, 1).unwrap();

    let score = |chunks: &[usize]| {
        let mut s = Session::new(&model, cache.clone(), sampler.clone(), MaskKind::default()).unwrap();
        let mut out = vec![];
        let mut at = 0;
        for &c in chunks {
            out.extend(s.score_nll(&cont[at..at + c]).unwrap());
            at += c;
        }
        (out, s.into_cache())
    };
    let (whole, cache_a) = score(&[29]);
    let (ones, cache_b) = score(&[1; 29]);
    let (mixed, cache_c) = score(&[3, 7, 1, 10, 8]);
    assert_eq!(whole.len(), 29);
    for (a, b) in whole.iter().zip(&ones).chain(whole.iter().zip(&mixed)) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert_eq!(cache_a.segment_log(), cache_b.segment_log());
    assert_eq!(cache_a.segment_log(), cache_c.segment_log());
    assert_eq!(score(&[29]).0, whole);
}

#[test]
fn score_needs_context_and_tokens() {
    let model = lively_model::<f64>(6);
    let mut s = Session::new(&model, CompressedCache::empty(&model), RatioSampler::monotonous(2), MaskKind::default()).unwrap();
    assert!(matches!(s.score_nll(&[1, 2]), Err(Error::Contract(_))));
    s.extend(&[5]).unwrap();
    assert!(matches!(s.score_nll(&[]), Err(Error::Contract(_))));
    assert_eq!(s.score_nll(&[1, 2]).unwrap().len(), 2);
}

#[test]
fn generation_is_reproducible_and_compresses_on_window() {
    let model = lively_model::<f64>(7);
    let w = model.config().window;
    let run = |mode| {
        let mut s = Session::new(&model, CompressedCache::empty(&model), RatioSampler::monotonous(4), MaskKind::default()).unwrap();
        s.extend(&[]).unwrap();
        let prompt: Vec<u32> = (0..w as u32).map(|i| i * 3).collect();
        s.extend(&prompt).unwrap();
        let log_before = s.cache().segment_log().len();
        let out = s.generate(&[], w + 5, mode).unwrap();
        (out, s.cache().segment_log().len() - log_before)
    };
    let (g1, grew) = run(DecodeMode::Greedy);
    assert_eq!(grew, 1);
    assert_eq!(run(DecodeMode::Greedy).0, g1);
    let mode = DecodeMode::Sample { temperature: 1.0, seed: 42 };
    assert_eq!(run(mode).0, run(mode).0);
    assert!(g1.iter().all(|&t| t < 256));
}

#[test]
fn cache_round_trips_byte_exact() {
    let model = lively_model::<f32>(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plan = plan_with(&[(8, 2), (8, 4), (6, 8)], 8);
    let cache = compress_context(&model, &tokens(&mut rng, 22), &plan, MaskKind::default()).unwrap();
    let bytes = cache.to_bytes().unwrap();
    let back = CompressedCache::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, cache);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ugc");
    cache.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(CompressedCache::<f32>::load(&path).unwrap(), cache);
    assert!(CompressedCache::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn compression_cost_is_linear_in_segment_count() {
    let model = lively_model::<f32>(2);
    let cost = |n: usize| {
        let plan = SegmentPlan::monotonous(8 * n, 8, 8).unwrap();
        let toks = vec![3u32; 8 * n];
        flops::measure(|| compress_context(&model, &toks, &plan, MaskKind::default()).unwrap()).1 as f64
    };
    // Keys grow by one cache entry per segment, so marginal cost drifts slightly; compare slopes.
    let (c4, c8, c16) = (cost(4), cost(8), cost(16));
    let s1 = (c8 - c4) / 4.0;
    let s2 = (c16 - c8) / 8.0;
    assert!((s2 - s1).abs() / s1 < 0.10, "slopes {s1} {s2}");
}
