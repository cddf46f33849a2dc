use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugpress::compressor::{compress_context, CompressedCache};
use ugpress::flopsmeter::*;
use ugpress::maskgen::MaskKind;
use ugpress::model::{Model, ModelConfig};
use ugpress::numkernel::{flops, DType};
use ugpress::segmenter::{partition, SegmentPlan};

fn random_setup(rng: &mut ChaCha8Rng) -> (ModelConfig, u32, Vec<usize>) {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let cfg = ModelConfig {
        dim: heads * 2 * rng.gen_range(1..5),
        layers: rng.gen_range(1..4),
        heads,
        mlp_dim: rng.gen_range(4..24),
        window: rng.gen_range(2..12),
        dtype: DType::F32,
        ..ModelConfig::default()
    };
    let ratio = [1, 2, 4, 8, 16, 32][rng.gen_range(0..6)];
    let turns = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(1..30)).collect();
    (cfg, ratio, turns)
}

/// Measured matmul FLOPs of compressing each turn onto a persistent cache.
fn measured_progressive(model: &Model<f32>, ratio: u32, turns: &[usize], rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut cache = CompressedCache::empty(model);
    let w = model.config().window;
    turns
        .iter()
        .map(|&len| {
            let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(0..256)).collect();
            let mut total = 0;
            for span in partition(len, w).unwrap().spans {
                let piece = &toks[span.range()];
                total += flops::measure(|| cache.compress_append(model, piece, ratio, MaskKind::default()).unwrap()).1;
            }
            total
        })
        .collect()
}

fn measured_static(model: &Model<f32>, ratio: u32, turns: &[usize]) -> Vec<u64> {
    let mut history = 0;
    turns
        .iter()
        .map(|&len| {
            history += len;
            let toks = vec![7u32; history];
            let plan = SegmentPlan::monotonous(history, model.config().window, ratio).unwrap();
            flops::measure(|| compress_context(model, &toks, &plan, MaskKind::default()).unwrap()).1
        })
        .collect()
}

#[test]
fn analytic_counts_match_instrumented_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..20 {
        let (cfg, ratio, turns) = random_setup(&mut rng);
        let model = Model::<f32>::new_random(cfg.clone(), case).unwrap();
        let cost = CostConfig::from_model(&cfg, ratio);
        let sched = TurnSchedule::new(turns.clone()).unwrap();
        let prog = flops_progressive(&cost, &sched).unwrap();
        let stat = flops_static(&cost, &sched).unwrap();
        assert_eq!(prog, measured_progressive(&model, ratio, &turns, &mut rng), "case {case} {cfg:?} r={ratio} {turns:?}");
        assert_eq!(stat, measured_static(&model, ratio, &turns), "case {case} {cfg:?} r={ratio} {turns:?}");
    }
}

#[test]
fn plain_forward_count_matches_instrumented_run() {
    let cfg = ModelConfig { dim: 8, layers: 2, heads: 2, mlp_dim: 12, window: 16, ..ModelConfig::default() };
    let model = Model::<f32>::new_random(cfg.clone(), 1).unwrap();
    let toks = [1u32, 2, 3, 4, 5];
    let got = flops::measure(|| model.run_plain(&toks).unwrap()).1;
    assert_eq!(got, flops_forward(&CostConfig::from_model(&cfg, 1), 5, 5));
}

#[test]
fn progressive_is_flat_and_static_grows() {
    let cost = CostConfig::from_model(&ModelConfig::default(), 8);
    let sched = TurnSchedule::constant(16, 32).unwrap();
    let prog = flops_progressive(&cost, &sched).unwrap();
    let stat = flops_static(&cost, &sched).unwrap();
    let (lo, hi) = (*prog.iter().min().unwrap() as f64, *prog.iter().max().unwrap() as f64);
    assert!(hi / lo - 1.0 <= 0.10, "progressive spread {lo} {hi}");
    assert!(stat.windows(2).all(|p| p[1] > p[0]));
    assert!(prog.iter().zip(&stat).all(|(p, s)| p <= s));
}

#[test]
fn table_and_csv_line_up() {
    let cost = CostConfig::from_model(&ModelConfig::default(), 4);
    let sched = TurnSchedule::new(vec![10, 40, 5]).unwrap();
    let rows = flops_table(&cost, &sched).unwrap();
    assert_eq!(rows.iter().map(|r| r.context_len).collect::<Vec<_>>(), vec![10, 50, 55]);
    let csv = flops_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], FLOPS_HEADER);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2], format!("2,50,{},{}", rows[1].progressive, rows[1].static_));
}
