//! Command-line front end: flat `key = value` configuration, byte-corpus ingestion and the
//! subcommands.
//!
//! Configuration keys are `model.*`, `train.*`, `task.*`, `paths.*` and `seed`. A file given
//! with `--config` is applied first, then every `--set key=value` in order. Seeds for the
//! individual components are derived from `seed` by name (`model.init`, `train`, `task`).

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::compressor::{compress_context, CompressedCache, DecodeMode, Session};
use crate::error::{Error, Result};
use crate::evalharness::{self, AblationCell, AblationSetup, KvSource, KvTaskSpec, Stages};
use crate::flopsmeter::{flops_csv, flops_table, CostConfig, TurnSchedule};
use crate::maskgen::MaskVariant;
use crate::model::{Model, ModelConfig, TensorFile, CHECKPOINT_MAGIC};
use crate::numkernel::{DType, Element};
use crate::rng;
use crate::segmenter::{RatioSampler, SamplingMode, SegmentPlan};
use crate::selftest;
use crate::trainer::{self, MetricsLog, Phase, Sample, SampleSource, StreamSource, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ugpress", version, about = "Progressive context compression with compression-token KV caches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (same as `--set paths.out=DIR`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the compression parameters; writes model.ugckpt and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Retrieval accuracy and perplexity per ratio; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated compression ratios.
        #[arg(long, default_value = "2,8,32")]
        ratios: String,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Compress a file into a cache; writes cache.ugc.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        ratio: u32,
    },
    /// Per-token negative log-likelihood of a file given a cache.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Continue a prompt, optionally on top of a cache.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Sampling temperature; greedy when absent.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 4)]
        ratio: u32,
    },
    /// Progressive vs static compression cost per turn; writes flops.csv.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        turns: usize,
        #[arg(long, default_value_t = 32)]
        turn_len: usize,
        #[arg(long, default_value_t = 4)]
        ratio: u32,
    },
    /// Train and evaluate the recipe grid; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "4,8")]
        ratios: String,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Mask field oracle, gradient check and serial/parallel equivalence.
    Selftest,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: KvTaskSpec,
    pub paths: Paths,
    pub seed: u64,
    /// Plain-LM steps on the base weights before compression training (0 = keep the base).
    pub base_steps: usize,
    pub base_lr: f64,
    pub base_batch_size: usize,
    pub stages: Stages,
    /// Corpus samples: total length and target length.
    pub sample_len: usize,
    pub target_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: KvTaskSpec::default(),
            paths: Paths {
                out: PathBuf::from("out"),
                ..Paths::default()
            },
            seed: 0,
            base_steps: 0,
            base_lr: 1e-3,
            base_batch_size: 16,
            stages: Stages::FinetuneOnly,
            sample_len: 128,
            target_len: 32,
        }
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        let path = || Some(PathBuf::from(value));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "paths.corpus" => self.paths.corpus = path(),
            "paths.checkpoint" => self.paths.checkpoint = path(),
            "paths.cache" => self.paths.cache = path(),
            "paths.out" => self.paths.out = PathBuf::from(value),
            "train.base_steps" => self.base_steps = value.parse().map_err(|_| bad())?,
            "train.base_lr" => self.base_lr = value.parse().map_err(|_| bad())?,
            "train.base_batch_size" => self.base_batch_size = value.parse().map_err(|_| bad())?,
            "train.stages" => self.stages = value.parse()?,
            "train.sample_len" => self.sample_len = value.parse().map_err(|_| bad())?,
            "train.target_len" => self.target_len = value.parse().map_err(|_| bad())?,
            "train.seed" | "task.seed" => {
                return Err(Error::Config(format!("{key} is derived from the root seed; set `seed`")))
            }
            _ => {
                let known = self.model.apply(key, value)? || self.train.apply(key, value)? || self.task.apply(key, value)?;
                if !known {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key = value` text; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.apply(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Fills derived seeds and checks every section.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = rng::subseed(self.seed, "train");
        self.task.seed = rng::subseed(self.seed, "task");
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.base_steps > 0 && !(self.base_lr > 0.0) {
            return Err(Error::Config("train.base_lr must be positive".into()));
        }
        if self.base_batch_size == 0 {
            return Err(Error::Config("train.base_batch_size must be positive".into()));
        }
        if self.target_len == 0 || self.target_len >= self.sample_len {
            return Err(Error::Config("train.target_len must be in 1..train.sample_len".into()));
        }
        if self.stages != Stages::FinetuneOnly && self.paths.corpus.is_none() {
            return Err(Error::Config(format!("train.stages={} needs paths.corpus", self.stages)));
        }
        Ok(self)
    }

    fn from_common(c: &Common) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &c.config {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for kv in &c.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.apply(k.trim(), v.trim())?;
        }
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(o) = &c.out {
            cfg.paths.out = o.clone();
        }
        cfg.finish()
    }
}

/// Raw bytes as token ids `0..256`.
pub fn ingest_corpus(path: &Path) -> Result<Vec<u32>> {
    Ok(fs::read(path)?.into_iter().map(u32::from).collect())
}

/// Inverse of [`ingest_corpus`]; ids outside the byte range are dropped.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

fn parse_ratios(s: &str) -> Result<Vec<u32>> {
    let r: Vec<u32> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad ratio list {s:?}"))))
        .collect::<Result<_>>()?;
    if r.is_empty() || r.contains(&0) {
        return Err(Error::Config(format!("bad ratio list {s:?}")));
    }
    Ok(r)
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.paths.out)?;
    Ok(cfg.paths.out.join(name))
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let file = TensorFile::load(path, CHECKPOINT_MAGIC)?;
    Ok(match file.header_value("model.dtype") {
        Some("f64") => DType::F64,
        _ => DType::F32,
    })
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{key} is required")))
}

/// Model from `paths.checkpoint`, or a fresh one from `model.*`.
fn load_or_init<T: Element>(cfg: &RunConfig) -> Result<Model<T>> {
    match &cfg.paths.checkpoint {
        Some(p) => Model::load(p),
        None => Model::new_random(cfg.model.clone(), rng::subseed(cfg.seed, "model.init")),
    }
}

fn model_dtype(cfg: &RunConfig) -> Result<DType> {
    match &cfg.paths.checkpoint {
        Some(p) => checkpoint_dtype(p),
        None => Ok(cfg.model.dtype),
    }
}

macro_rules! with_dtype {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match model_dtype($cfg)? {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn corpus_source(cfg: &RunConfig) -> Result<Option<StreamSource>> {
    let Some(p) = &cfg.paths.corpus else { return Ok(None) };
    Ok(Some(StreamSource {
        tokens: ingest_corpus(p)?,
        sample_len: cfg.sample_len,
        target_len: cfg.target_len,
    }))
}

fn val_samples(source: &dyn SampleSource, seed: u64, n: usize) -> Result<Vec<Sample>> {
    let root = rng::subseed(seed, "validation");
    (0..n).map(|i| source.sample(rng::child(root, i as u64))).collect()
}

fn cmd_train<T: Element>(cfg: &RunConfig) -> Result<()> {
    let mut model: Model<T> = load_or_init(cfg)?;
    let corpus = corpus_source(cfg)?;
    let task = KvSource { spec: cfg.task.clone() };
    let mut log = MetricsLog::default();

    if cfg.base_steps > 0 {
        let source: &dyn SampleSource = match (&corpus, cfg.stages) {
            (Some(c), Stages::Both | Stages::PretrainOnly) => c,
            _ => &task,
        };
        let tc = TrainConfig {
            lr: cfg.base_lr,
            steps: cfg.base_steps,
            batch_size: cfg.base_batch_size,
            seed: rng::subseed(cfg.seed, "base"),
            ..cfg.train.clone()
        };
        let val = val_samples(source, cfg.seed, 8)?;
        log.extend(trainer::pretrain_base(&mut model, source, &val, &tc)?);
    }
    let mut phases: Vec<(Phase, &dyn SampleSource)> = Vec::new();
    if let (Some(c), Stages::Both | Stages::PretrainOnly) = (&corpus, cfg.stages) {
        phases.push((Phase::Pretrain, c));
    }
    if cfg.stages != Stages::PretrainOnly {
        phases.push((Phase::Finetune, &task));
    }
    for (phase, source) in phases {
        let val = val_samples(source, cfg.seed, 8)?;
        let tc = TrainConfig {
            phase,
            ..cfg.train.clone()
        };
        log.extend(trainer::train(&mut model, source, &val, &tc)?);
    }
    model.save(&out_file(cfg, "model.ugckpt")?)?;
    log.write_csv(&out_file(cfg, "metrics.csv")?)?;
    Ok(())
}

fn cmd_eval<T: Element>(cfg: &RunConfig, ratios: &[u32], instances: usize) -> Result<()> {
    let model: Model<T> = Model::load(require(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let acc = evalharness::eval_retrieval(&model, &cfg.task, ratios, instances)?;
    let samples: Vec<Sample> = (0..instances.min(32))
        .map(|i| evalharness::eval_instance(&cfg.task, i).map(|inst| inst.to_sample()))
        .collect::<Result<_>>()?;
    let mut csv = String::from("ratio,accuracy,ppl\n");
    for (ratio, a) in acc {
        let ppl = evalharness::eval_ppl(&model, &samples, ratio)?;
        csv.push_str(&format!("{ratio},{a:.4},{ppl:.4}\n"));
    }
    let raw = evalharness::eval_ppl_uncompressed(&model, &samples)?;
    csv.push_str(&format!("raw,,{raw:.4}\n"));
    print!("{csv}");
    fs::write(out_file(cfg, "eval.csv")?, csv)?;
    Ok(())
}

fn cmd_compress<T: Element>(cfg: &RunConfig, input: &Path, ratio: u32) -> Result<()> {
    let model: Model<T> = Model::load(require(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let tokens = ingest_corpus(input)?;
    let plan = SegmentPlan::monotonous(tokens.len(), model.config().window, ratio)?;
    let cache = compress_context(&model, &tokens, &plan, model.config().mask)?;
    println!("{} tokens -> {} cache entries in {} segments", tokens.len(), cache.len(), plan.len());
    cache.save(&out_file(cfg, "cache.ugc")?)
}

fn cmd_score<T: Element>(cfg: &RunConfig, input: &Path) -> Result<()> {
    let model: Model<T> = Model::load(require(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let cache = CompressedCache::load(require(&cfg.paths.cache, "paths.cache")?)?;
    let tokens = ingest_corpus(input)?;
    let mut session = Session::new(&model, cache, RatioSampler::monotonous(4), model.config().mask)?;
    let nll = session.score_nll(&tokens)?;
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    println!("tokens {} mean_nll {mean:.6} ppl {:.4}", nll.len(), mean.exp());
    Ok(())
}

fn cmd_generate<T: Element>(cfg: &RunConfig, prompt: &str, max_new: usize, temperature: Option<f64>, ratio: u32) -> Result<()> {
    let model: Model<T> = Model::load(require(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let cache = match &cfg.paths.cache {
        Some(p) => CompressedCache::load(p)?,
        None => CompressedCache::empty(&model),
    };
    let sampler = RatioSampler::monotonous(ratio);
    let mut session = Session::new(&model, cache, sampler, model.config().mask)?;
    let mode = match temperature {
        Some(t) => DecodeMode::Sample {
            temperature: t,
            seed: rng::subseed(cfg.seed, "generate"),
        },
        None => DecodeMode::Greedy,
    };
    let prompt: Vec<u32> = prompt.bytes().map(u32::from).collect();
    let out = session.generate(&prompt, max_new, mode)?;
    let mut stdout = std::io::stdout();
    stdout.write_all(&detokenize(&out))?;
    writeln!(stdout)?;
    Ok(())
}

fn cmd_flops(cfg: &RunConfig, turns: usize, turn_len: usize, ratio: u32) -> Result<()> {
    if ratio == 0 {
        return Err(Error::Config("--ratio must be positive".into()));
    }
    let sched = TurnSchedule::constant(turns, turn_len)?;
    let rows = flops_table(&CostConfig::from_model(&cfg.model, ratio), &sched)?;
    let csv = flops_csv(&rows);
    print!("{csv}");
    fs::write(out_file(cfg, "flops.csv")?, csv)?;
    Ok(())
}

/// The default recipe plus one change per cell.
pub fn ablation_cells(default_sampling: SamplingMode) -> Vec<AblationCell> {
    let cell = |name: &str, mask, sampling, stages| AblationCell {
        name: name.into(),
        mask,
        sampling,
        stages,
    };
    vec![
        cell("default", MaskVariant::Stepwise, default_sampling, Stages::Both),
        cell("segmentation", MaskVariant::Segmentation, default_sampling, Stages::Both),
        cell("full-coverage", MaskVariant::FullCoverage, default_sampling, Stages::Both),
        cell("monotonous-x4", MaskVariant::Stepwise, SamplingMode::Monotonous(4), Stages::Both),
        cell("pretrain-only", MaskVariant::Stepwise, default_sampling, Stages::PretrainOnly),
        cell("finetune-only", MaskVariant::Stepwise, default_sampling, Stages::FinetuneOnly),
    ]
}

fn cmd_ablate<T: Element>(cfg: &RunConfig, ratios: &[u32], instances: usize) -> Result<()> {
    let base: Model<T> = load_or_init(cfg)?;
    let corpus = corpus_source(cfg)?.ok_or_else(|| Error::Config("ablate needs paths.corpus".into()))?;
    let task = KvSource { spec: cfg.task.clone() };
    let val = val_samples(&task, cfg.seed, 8)?;
    let phase = |phase| TrainConfig {
        phase,
        ..cfg.train.clone()
    };
    let setup = AblationSetup {
        base: &base,
        pretrain: (&corpus, phase(Phase::Pretrain)),
        finetune: (&task, phase(Phase::Finetune)),
        val: &val,
        eval_spec: cfg.task.clone(),
        eval_ratios: ratios.to_vec(),
        instances,
    };
    let table = evalharness::run_ablation(&setup, &ablation_cells(cfg.train.sampling))?;
    let csv = table.to_csv();
    print!("{csv}");
    fs::write(out_file(cfg, "ablation.csv")?, csv)?;
    Ok(())
}

fn cmd_selftest() -> Result<bool> {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Selftest => return cmd_selftest(),
        Command::Train { common } => {
            let cfg = RunConfig::from_common(&common)?;
            with_dtype!(&cfg, cmd_train(&cfg))?
        }
        Command::Eval { common, ratios, instances } => {
            let cfg = RunConfig::from_common(&common)?;
            let ratios = parse_ratios(&ratios)?;
            require(&cfg.paths.checkpoint, "paths.checkpoint")?;
            with_dtype!(&cfg, cmd_eval(&cfg, &ratios, instances))?
        }
        Command::Compress { common, input, ratio } => {
            let cfg = RunConfig::from_common(&common)?;
            require(&cfg.paths.checkpoint, "paths.checkpoint")?;
            with_dtype!(&cfg, cmd_compress(&cfg, &input, ratio))?
        }
        Command::Score { common, input } => {
            let cfg = RunConfig::from_common(&common)?;
            require(&cfg.paths.checkpoint, "paths.checkpoint")?;
            require(&cfg.paths.cache, "paths.cache")?;
            with_dtype!(&cfg, cmd_score(&cfg, &input))?
        }
        Command::Generate {
            common,
            prompt,
            max_new,
            temperature,
            ratio,
        } => {
            let cfg = RunConfig::from_common(&common)?;
            require(&cfg.paths.checkpoint, "paths.checkpoint")?;
            with_dtype!(&cfg, cmd_generate(&cfg, &prompt, max_new, temperature, ratio))?
        }
        Command::Flops {
            common,
            turns,
            turn_len,
            ratio,
        } => cmd_flops(&RunConfig::from_common(&common)?, turns, turn_len, ratio)?,
        Command::Ablate {
            common,
            ratios,
            instances,
        } => {
            let cfg = RunConfig::from_common(&common)?;
            let ratios = parse_ratios(&ratios)?;
            with_dtype!(&cfg, cmd_ablate(&cfg, &ratios, instances))?
        }
    }
    Ok(true)
}

/// Runs one invocation and returns the process exit code: 0 success, 1 runtime failure,
/// 2 usage or configuration error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}
