use ugpress::evalharness::*;
use ugpress::maskgen::MaskVariant;
use ugpress::model::{names, Model, ModelConfig};
use ugpress::numkernel::DType;
use ugpress::segmenter::SamplingMode;
use ugpress::trainer::{Sample, SampleSource, StreamSource, TrainConfig};
use ugpress::Error;

fn text(t: &[u32]) -> String {
    t.iter().map(|&c| c as u8 as char).collect()
}

/// Answers by scanning the raw context for the queried key.
struct ScanOracle;

impl Retriever for ScanOracle {
    fn answer(&self, inst: &KvInstance, _ratio: u32) -> ugpress::Result<Vec<u32>> {
        let key = &inst.query[1..];
        let ctx = &inst.context;
        let at = (0..ctx.len() - key.len())
            .find(|&i| &ctx[i..i + key.len()] == key)
            .expect("key present");
        let start = at + key.len();
        let end = ctx[start..].iter().position(|&c| c == u32::from(RECORD_END)).unwrap() + start;
        Ok(ctx[start..end].to_vec())
    }
}

#[test]
fn single_pair_without_filler_is_verbatim() {
    let spec = KvTaskSpec { pairs: 1, context_len: 4, filler: Filler::None, seed: 3, ..KvTaskSpec::default() };
    let inst = gen_kv_task(&spec).unwrap();
    let ctx = text(&inst.context);
    let q = text(&inst.query);
    let a = text(&inst.answer);
    assert_eq!(ctx, format!("{}{} ", &q[1..], a));
    assert!(q.starts_with('?'));
}

#[test]
fn answers_occur_once_and_keys_are_distinct() {
    for seed in 0..300 {
        let spec = KvTaskSpec { pairs: 5, seed, ..KvTaskSpec::default() };
        let inst = gen_kv_task(&spec).unwrap();
        assert_eq!(inst.context.len(), spec.context_len);
        let ctx = text(&inst.context);
        let ans = text(&inst.answer);
        assert_eq!(ctx.matches(&ans).count(), 1, "{ctx} / {ans}");
        let key = &text(&inst.query)[1..];
        assert_eq!(ctx.matches(key).count(), 1, "{ctx} / {key}");
        assert_eq!(ctx.find(key).unwrap() + key.len(), ctx.find(&ans).unwrap());
        let uppers: Vec<char> = ctx.chars().filter(char::is_ascii_uppercase).collect();
        let mut dedup = uppers.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(uppers.len(), dedup.len());
    }
}

#[test]
fn generation_is_seeded() {
    let spec = KvTaskSpec::default();
    assert_eq!(gen_kv_task(&spec.with_seed(9)).unwrap(), gen_kv_task(&spec.with_seed(9)).unwrap());
    assert_ne!(gen_kv_task(&spec.with_seed(9)).unwrap(), gen_kv_task(&spec.with_seed(10)).unwrap());
    let s = KvSource { spec: spec.clone() };
    assert_eq!(s.sample(4).unwrap(), s.sample(4).unwrap());
}

#[test]
fn query_policies_pick_records_by_position() {
    let base = KvTaskSpec { pairs: 3, context_len: 12, filler: Filler::None, seed: 2, ..KvTaskSpec::default() };
    let first = gen_kv_task(&KvTaskSpec { query: QueryPolicy::First, ..base.clone() }).unwrap();
    assert_eq!(text(&first.query)[1..], text(&first.context)[..1]);
    let last = gen_kv_task(&KvTaskSpec { query: QueryPolicy::ByDepth(1.0), ..base }).unwrap();
    assert_eq!(text(&last.query)[1..], text(&last.context)[8..9]);
    assert_eq!("depth:0.5".parse::<QueryPolicy>().unwrap(), QueryPolicy::ByDepth(0.5));
    assert!("depth:2".parse::<QueryPolicy>().is_err());
}

#[test]
fn oversized_specs_are_config_errors() {
    let too_long = KvTaskSpec { pairs: 5, context_len: 10, ..KvTaskSpec::default() };
    assert!(matches!(gen_kv_task(&too_long), Err(Error::Config(_))));
    let too_many_digits = KvTaskSpec { pairs: 6, value_len: 2, ..KvTaskSpec::default() };
    assert!(matches!(gen_kv_task(&too_many_digits), Err(Error::Config(_))));
    let mut spec = KvTaskSpec::default();
    assert!(spec.apply("task.filler", "none").unwrap());
    assert!(!spec.apply("train.lr", "1").unwrap());
    assert!(spec.apply("task.pairs", "x").is_err());
}

#[test]
fn training_sample_targets_the_query() {
    let inst = gen_kv_task(&KvTaskSpec { queries: 3, seed: 1, ..KvTaskSpec::default() }).unwrap();
    let s = inst.to_sample();
    assert_eq!(s.target_start, inst.context.len());
    assert_eq!(s.tokens.len(), inst.context.len() + 3 * (inst.query.len() + inst.answer.len()));
}

#[test]
fn scan_oracle_is_perfect() {
    let spec = KvTaskSpec::default();
    let acc = eval_retrieval(&ScanOracle, &spec, &[2, 8, 32], 40).unwrap();
    assert_eq!(acc, vec![(2, 1.0), (8, 1.0), (32, 1.0)]);
    assert!(eval_retrieval(&ScanOracle, &spec, &[2], 0).is_err());
}

fn small_model() -> Model<f32> {
    let cfg = ModelConfig { dim: 16, layers: 2, heads: 2, mlp_dim: 24, window: 16, dtype: DType::F32, ..ModelConfig::default() };
    Model::new_random(cfg, 1).unwrap()
}

#[test]
fn untrained_model_is_near_chance() {
    let spec = KvTaskSpec { context_len: 40, ..KvTaskSpec::default() };
    let n = 60;
    let chance = 1.0 / spec.value_space();
    // Three binomial standard deviations above chance.
    let bound = chance + 3.0 * (chance * (1.0 - chance) / n as f64).sqrt();
    for (_, acc) in eval_retrieval(&small_model(), &spec, &[2, 8], n).unwrap() {
        assert!(acc <= bound, "{acc} > {bound}");
    }
}

#[test]
fn flat_head_gives_vocab_perplexity() {
    let mut m = small_model();
    let head = m.params().slot(names::LM_HEAD).unwrap();
    m.params_mut().tensor_mut(head).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let samples: Vec<Sample> = (0..3).map(|i| KvSource { spec: KvTaskSpec { context_len: 40, ..KvTaskSpec::default() } }.sample(i).unwrap()).collect();
    let v = m.config().vocab as f64;
    for r in [2, 16] {
        assert!((eval_ppl(&m, &samples, r).unwrap() / v - 1.0).abs() < 1e-4);
    }
    assert!((eval_ppl_uncompressed(&m, &samples).unwrap() / v - 1.0).abs() < 1e-4);
}

fn stream() -> StreamSource {
    let t = "abcabd abcabd xyzxyw ".repeat(30);
    StreamSource { tokens: t.bytes().map(u32::from).collect(), sample_len: 40, target_len: 8 }
}

#[test]
fn ablation_grid_bookkeeping_and_determinism() {
    let base = small_model();
    let src = stream();
    let val: Vec<Sample> = (0..2).map(|i| src.sample(100 + i).unwrap()).collect();
    let tc = TrainConfig { steps: 3, batch_size: 1, eval_every: 0, ..TrainConfig::default() };
    let setup = AblationSetup {
        base: &base,
        pretrain: (&src, tc.clone()),
        finetune: (&src, tc),
        val: &val,
        eval_spec: KvTaskSpec { context_len: 40, ..KvTaskSpec::default() },
        eval_ratios: vec![2, 8],
        instances: 3,
    };
    let cells: Vec<AblationCell> = [MaskVariant::Segmentation, MaskVariant::FullCoverage]
        .into_iter()
        .map(|mask| AblationCell {
            name: mask.name().into(),
            mask,
            sampling: SamplingMode::Monotonous(4),
            stages: Stages::FinetuneOnly,
        })
        .collect();
    let table = run_ablation(&setup, &cells).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.steps == 3));
    let csv = table.to_csv();
    assert_eq!(csv.lines().next().unwrap(), AblationTable::HEADER);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 7 && !l.contains(",,")));
    assert_eq!(run_ablation(&setup, &cells).unwrap(), table);
    assert!(table.accuracy(MaskVariant::FullCoverage.name(), 8).is_some());
}

#[test]
fn objective_curves_start_at_vocab_and_repeat() {
    let m = small_model();
    let src = stream();
    let val: Vec<Sample> = (0..2).map(|i| src.sample(100 + i).unwrap()).collect();
    let cfg = TrainConfig { steps: 4, batch_size: 1, eval_every: 2, ..TrainConfig::default() };
    let (lm, ed) = compare_objectives(&m, &src, &val, &cfg).unwrap();
    let v = m.config().vocab as f64;
    for log in [&lm, &ed] {
        let p0 = log.val_curve()[0].1;
        assert!((p0 / v - 1.0).abs() < 0.05, "{p0}");
        assert_eq!(log.val_curve().len(), 3);
    }
    let (lm2, ed2) = compare_objectives(&m, &src, &val, &cfg).unwrap();
    assert_eq!((lm.to_csv(), ed.to_csv()), (lm2.to_csv(), ed2.to_csv()));
    assert_eq!(steps_to_reach(&lm, f64::INFINITY), Some(0));
    assert_eq!(steps_to_reach(&lm, 0.0), None);
}
