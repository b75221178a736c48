//! Builds a task from a config, runs the simulation and writes CSV logs.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use fedspar_core::data::{partition_dirichlet, partition_one_class, DataError, LabeledDataset};
use fedspar_core::fl::{Executor, FlError, RoundRecord, Simulation, Upload};
use fedspar_core::linreg::LinRegTask;
use fedspar_core::mlp::{Mlp, MlpTask};
use fedspar_core::quantizer::QuantizerError;
use fedspar_core::rng::{derive_seed, tag};
use fedspar_core::task::Task;
use fedspar_core::{QuantizerBank, SeedContext};

use crate::cache::TransformCache;
use crate::config::{ChannelConfig, ConfigError, ExperimentConfig, PartitionConfig, TaskConfig};
use crate::idx::{load_mnist, IdxError};
use crate::payload::PayloadFile;

/// Matrices kept across rounds of one run.
pub const DEFAULT_CACHE_BYTES: usize = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("MNIST: {0}")]
    Dataset(#[from] IdxError),
    #[error(transparent)]
    Partition(#[from] DataError),
    #[error(transparent)]
    Codebooks(#[from] QuantizerError),
    #[error("channel model: {0}")]
    Channel(#[from] fedspar_core::capacity::CapacityError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl RunError {
    /// Whether the failure is the config's fault rather than the run's.
    pub fn is_config_error(&self) -> bool {
        matches!(self, RunError::Config(_) | RunError::Dataset(IdxError::Missing(_)) | RunError::Partition(_))
    }
}

/// Runs participants on a rayon pool. Results keep input order, so output
/// does not depend on the thread count.
pub struct RayonExecutor {
    pool: rayon::ThreadPool,
}

impl RayonExecutor {
    /// `threads = 0` uses rayon's default.
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        Ok(Self { pool: rayon::ThreadPoolBuilder::new().num_threads(threads).build()? })
    }
}

impl Executor for RayonExecutor {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        use rayon::prelude::*;
        self.pool.install(|| items.into_par_iter().map(f).collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many rounds even if the config asks for more.
    pub round_cap: Option<usize>,
    pub seed: Option<u64>,
    /// Where to write `rounds.csv`, `devices.csv` and `summary.csv`; nothing
    /// is written when unset.
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
    pub mnist_dir: Option<PathBuf>,
    /// Print one line per evaluated round to stderr.
    pub progress: bool,
    /// Save every compressed upload of this round under `payloads/`.
    pub payload_round: Option<usize>,
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub final_grad_norm_sq: Option<f64>,
    /// Mean uplink bits per participant per round.
    pub mean_bits: f64,
    pub max_bits: usize,
    pub mean_capacity_bits: f64,
    /// Mean `S / N` over participants and rounds.
    pub mean_sparsification: f64,
    pub dim: usize,
}

pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub capacities: Vec<usize>,
    pub summary: Summary,
}

type MnistPair = (Arc<LabeledDataset>, Arc<LabeledDataset>);

fn mnist_cached(dir: &Path) -> Result<MnistPair, IdxError> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, MnistPair>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
    if let Some(p) = cache.lock().unwrap().get(&key) {
        return Ok(p.clone());
    }
    let (train, test) = load_mnist(dir)?;
    let pair = (Arc::new(train), Arc::new(test));
    cache.lock().unwrap().insert(key, pair.clone());
    Ok(pair)
}

/// The learning task a config describes.
pub fn build_task(cfg: &ExperimentConfig, mnist_dir: Option<&Path>) -> Result<Box<dyn Task>, RunError> {
    match &cfg.task {
        TaskConfig::Mnist { hidden, partition, test_limit, .. } => {
            let dir = mnist_dir.map(Path::to_path_buf).or_else(|| cfg.mnist_dir()).unwrap();
            let (train, mut test) = mnist_cached(&dir)?;
            if let Some(n) = test_limit {
                test = Arc::new(test.truncated(*n));
            }
            let k = cfg.federation.devices;
            let seed = derive_seed(cfg.seed, tag::PARTITION, 0, 0, 0);
            let shards = match *partition {
                PartitionConfig::OneClass { per_device } => {
                    partition_one_class(train.labels(), train.classes(), k, per_device, seed)?
                }
                PartitionConfig::Dirichlet { alpha } => {
                    partition_dirichlet(train.labels(), train.classes(), k, alpha, seed)?
                }
            };
            let model = Mlp { input: train.dims(), hidden: *hidden, output: train.classes() };
            Ok(Box::new(MlpTask { model, train, test, shards }))
        }
        TaskConfig::Linreg { .. } => {
            let spec = cfg.linreg_spec().unwrap();
            Ok(Box::new(LinRegTask::generate(spec, derive_seed(cfg.seed, tag::SYNTHETIC_DATA, 0, 0, 0))))
        }
    }
}

/// Per-device bits per round.
pub fn capacities(cfg: &ExperimentConfig, dim: usize) -> Result<Vec<usize>, RunError> {
    let k = cfg.federation.devices;
    match cfg.channel {
        ChannelConfig::Homogeneous { bits_per_entry } => Ok(vec![(bits_per_entry * dim as f64).floor() as usize; k]),
        ChannelConfig::PathLoss { d_min_m, d_max_m, .. } => {
            let model =
                cfg.path_loss_model().ok_or(fedspar_core::capacity::CapacityError::EmptyRange(d_min_m, d_max_m))?;
            Ok(model.place_devices(k, d_min_m, d_max_m, cfg.seed)?)
        }
    }
}

fn summarize(cfg: &ExperimentConfig, records: &[RoundRecord], dim: usize) -> Summary {
    let uploads: Vec<_> = records.iter().flat_map(|r| &r.devices).collect();
    let count = uploads.len().max(1) as f64;
    let last = records.iter().rev().find_map(|r| r.evaluation);
    Summary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        rounds: records.len(),
        final_loss: last.map_or(f64::NAN, |e| e.loss),
        final_accuracy: last.and_then(|e| e.accuracy),
        final_grad_norm_sq: last.and_then(|e| e.grad_norm_sq),
        mean_bits: uploads.iter().map(|d| d.bits as f64).sum::<f64>() / count,
        max_bits: uploads.iter().map(|d| d.bits).max().unwrap_or(0),
        mean_capacity_bits: uploads.iter().map(|d| d.capacity_bits as f64).sum::<f64>() / count,
        mean_sparsification: uploads.iter().map(|d| d.kept as f64 / dim as f64).sum::<f64>() / count,
        dim,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

struct CsvOut {
    path: PathBuf,
    w: csv::Writer<fs::File>,
}

impl CsvOut {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self, RunError> {
        let mut w = csv::Writer::from_path(&path).map_err(|source| RunError::Csv { path: path.clone(), source })?;
        w.write_record(header).map_err(|source| RunError::Csv { path: path.clone(), source })?;
        Ok(Self { path, w })
    }

    fn row(&mut self, fields: &[String]) -> Result<(), RunError> {
        self.w.write_record(fields).map_err(|source| RunError::Csv { path: self.path.clone(), source })
    }

    fn finish(mut self) -> Result<(), RunError> {
        self.w.flush().map_err(|source| RunError::Io { path: self.path.clone(), source })
    }
}

pub const ROUND_HEADER: &[&str] = &[
    "round",
    "participants",
    "train_loss",
    "aggregate_norm",
    "mean_bits",
    "max_bits",
    "mean_capacity_bits",
    "mean_kept",
    "mean_nmse",
    "mean_zeta",
    "eval_loss",
    "eval_accuracy",
    "eval_grad_norm_sq",
    "shadow_gap",
];

pub const DEVICE_HEADER: &[&str] = &[
    "round",
    "device",
    "capacity_bits",
    "bits",
    "kept",
    "q_levels",
    "nmse",
    "update_norm_sq",
    "residual_norm_sq",
    "zeta",
    "loss",
    "weight",
];

pub const SUMMARY_HEADER: &[&str] = &[
    "name",
    "seed",
    "rounds",
    "dim",
    "final_loss",
    "final_accuracy",
    "final_grad_norm_sq",
    "mean_bits",
    "max_bits",
    "mean_capacity_bits",
    "mean_sparsification",
];

fn round_row(r: &RoundRecord) -> Vec<String> {
    let d = &r.devices;
    let participants: Vec<String> = r.participants().map(|k| k.to_string()).collect();
    vec![
        r.round.to_string(),
        participants.join(" "),
        r.train_loss.to_string(),
        r.aggregate_norm.to_string(),
        mean(d.iter().map(|x| x.bits as f64)).to_string(),
        d.iter().map(|x| x.bits).max().unwrap_or(0).to_string(),
        mean(d.iter().map(|x| x.capacity_bits as f64)).to_string(),
        mean(d.iter().map(|x| x.kept as f64)).to_string(),
        opt(Some(mean(d.iter().filter_map(|x| x.nmse)))),
        mean(d.iter().map(|x| x.zeta)).to_string(),
        opt(r.evaluation.map(|e| e.loss)),
        opt(r.evaluation.and_then(|e| e.accuracy)),
        opt(r.evaluation.and_then(|e| e.grad_norm_sq)),
        opt(r.shadow_gap),
    ]
}

pub fn summary_row(s: &Summary) -> Vec<String> {
    vec![
        s.name.clone(),
        s.seed.to_string(),
        s.rounds.to_string(),
        s.dim.to_string(),
        s.final_loss.to_string(),
        opt(s.final_accuracy),
        opt(s.final_grad_norm_sq),
        s.mean_bits.to_string(),
        s.max_bits.to_string(),
        s.mean_capacity_bits.to_string(),
        s.mean_sparsification.to_string(),
    ]
}

/// Runs one experiment end to end.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput, RunError> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(cap) = opts.round_cap {
        cfg.federation.rounds = cfg.federation.rounds.min(cap.max(1));
    }
    cfg.validate()?;
    let started = Instant::now();
    let task = build_task(&cfg, opts.mnist_dir.as_deref())?;
    let caps = capacities(&cfg, task.dim())?;
    let bank = codebooks(cfg.codec.q_max)?;
    let cache = TransformCache::new(DEFAULT_CACHE_BYTES);
    let exec = RayonExecutor::new(opts.threads)?;
    let mut sim = Simulation::new(task.as_ref(), cfg.fl_config(), &caps, &bank, &cache)?;

    let mut writers = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
            let rounds = CsvOut::create(dir.join("rounds.csv"), ROUND_HEADER)?;
            let devices = if cfg.output.device_log {
                Some(CsvOut::create(dir.join("devices.csv"), DEVICE_HEADER)?)
            } else {
                None
            };
            Some((rounds, devices))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(cfg.federation.rounds);
    while !sim.is_finished() {
        let capture = opts.payload_round == Some(sim.server().round);
        sim.keep_uploads(capture);
        let r = sim.step(&exec)?;
        if let (true, Some(dir)) = (capture, &opts.out_dir) {
            save_payloads(dir, &cfg, r.round, sim.last_uploads())?;
        }
        if let Some((rounds, devices)) = &mut writers {
            rounds.row(&round_row(&r))?;
            if let Some(devices) = devices {
                for d in &r.devices {
                    let q: Vec<String> = d.q_levels.iter().map(|q| q.to_string()).collect();
                    devices.row(&[
                        r.round.to_string(),
                        d.device.to_string(),
                        d.capacity_bits.to_string(),
                        d.bits.to_string(),
                        d.kept.to_string(),
                        q.join(" "),
                        opt(d.nmse),
                        d.update_norm_sq.to_string(),
                        d.residual_norm_sq.to_string(),
                        d.zeta.to_string(),
                        d.loss.to_string(),
                        d.weight.to_string(),
                    ])?;
                }
            }
        }
        if opts.progress {
            if let Some(e) = r.evaluation {
                eprintln!(
                    "[{}] round {:>4}  loss {:.4}  acc {}  ({:.1}s)",
                    cfg.name,
                    r.round + 1,
                    e.loss,
                    e.accuracy.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a)),
                    started.elapsed().as_secs_f64()
                );
            }
        }
        records.push(r);
    }
    let summary = summarize(&cfg, &records, task.dim());
    if let (Some((rounds, devices)), Some(dir)) = (writers, &opts.out_dir) {
        rounds.finish()?;
        if let Some(d) = devices {
            d.finish()?;
        }
        let mut s = CsvOut::create(dir.join("summary.csv"), SUMMARY_HEADER)?;
        s.row(&summary_row(&summary))?;
        s.finish()?;
        let path = dir.join("config.toml");
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(cfg.to_toml().as_bytes()))
            .map_err(|source| RunError::Io { path, source })?;
    }
    Ok(RunOutput { config: cfg, records, capacities: caps, summary })
}

fn save_payloads(
    dir: &Path,
    cfg: &ExperimentConfig,
    round: usize,
    uploads: &[(usize, Upload)],
) -> Result<(), RunError> {
    let dir = dir.join("payloads");
    fs::create_dir_all(&dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
    let fl = cfg.fl_config();
    for (device, upload) in uploads {
        if let Upload::Compressed { payload, .. } = upload {
            let file = PayloadFile {
                q_max: cfg.codec.q_max,
                seeds: SeedContext::new(cfg.seed, round as u64, *device as u64, fl.seed_scope),
                update: payload.clone(),
            };
            let path = dir.join(format!("round-{round}-device-{device}.fsp"));
            fs::write(&path, file.to_bytes()).map_err(|source| RunError::Io { path, source })?;
        }
    }
    Ok(())
}

/// Trained codebooks, shared across runs in the process.
pub fn codebooks(q_max: usize) -> Result<Arc<QuantizerBank>, QuantizerError> {
    static BANKS: OnceLock<Mutex<HashMap<usize, Arc<QuantizerBank>>>> = OnceLock::new();
    let banks = BANKS.get_or_init(Default::default);
    if let Some(b) = banks.lock().unwrap().get(&q_max) {
        return Ok(b.clone());
    }
    let b = Arc::new(QuantizerBank::train(q_max)?);
    banks.lock().unwrap().insert(q_max, b.clone());
    Ok(b)
}
