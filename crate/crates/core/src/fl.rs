//! Federated rounds with compressed uplink and error feedback.
//!
//! Each round the server samples `M` of the `K` devices. A participant runs
//! `E` local steps, adds its stored residual to the resulting update,
//! compresses it within its bit budget and keeps what the compression lost as
//! the new residual. Devices that sit out a round scale their residual by
//! `κ`. The server reconstructs every payload, averages with weights
//! proportional to the samples used and applies a global optimizer step.

use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{sub_len, CodecContext, CodecError, CompressedUpdate, PayloadHeader, SubvectorSpec, ValueCoding};
use crate::math::{axpy, dot};
use crate::param_opt::{choose_parameters, choose_parameters_exhaustive, s_max_float32, BudgetTable};
use crate::quantizer::QuantizerBank;
use crate::rng::{derive_seed, tag, SeedContext, SeedScope, Stream};
use crate::task::{Evaluation, Task};
use crate::transform::TransformSource;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("{got} capacities given for {expected} devices")]
    CapacityCount { expected: usize, got: usize },
    #[error("device {0} has no training samples")]
    EmptyShard(usize),
    #[error("device {device}: {source}")]
    Codec { device: usize, source: CodecError },
    #[error("device {device} sent {bits} bits over a budget of {capacity}")]
    BudgetExceeded { device: usize, bits: usize, capacity: usize },
    #[error("non-finite value in the update of device {0}")]
    NonFinite(usize),
    #[error("server reconstruction of device {0} differs from the device's own")]
    UplinkMismatch(usize),
}

/// Server-side update rule for the aggregated update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GlobalOptimizer {
    /// `w ← w - η g`.
    Gd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl GlobalOptimizer {
    pub fn adam(lr: f64) -> Self {
        GlobalOptimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// How `Q` is picked for each sub-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QChoice {
    /// `S = S_Q^max`, best `Q` by the mean-free objective.
    Optimized,
    /// Every `(S, Q)` pair with the full objective.
    Exhaustive,
    Fixed(usize),
}

/// What a participant sends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Uplink {
    /// The exact update, accounted as 32 bits per entry.
    Vanilla,
    FedSpar {
        l: usize,
        q_max: usize,
        choice: QChoice,
    },
    /// Top-`S` values as raw `f32` plus the position rank.
    TopSFloat {
        l: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    /// `M`.
    pub participants: usize,
    /// `T`.
    pub rounds: usize,
    /// `E`.
    pub local_epochs: usize,
    pub local_lr: f64,
    /// Mini-batch size; `None` uses the whole shard.
    pub batch_size: Option<usize>,
    /// Residual discount for devices that sit out a round.
    pub kappa: f64,
    pub optimizer: GlobalOptimizer,
    pub uplink: Uplink,
    pub seed: u64,
    pub seed_scope: SeedScope,
    /// Evaluate every this many rounds (and after the last); 0 means only
    /// after the last.
    pub eval_every: usize,
    /// Maintain the error-free shadow iterate (plain GD only).
    pub track_shadow: bool,
    /// Decode every payload a second time on the server side and compare.
    pub verify_uplink: bool,
}

impl FlConfig {
    pub fn validate(&self, devices: usize) -> Result<(), FlError> {
        let bad = FlError::InvalidConfig;
        if devices == 0 {
            return Err(bad("no devices"));
        }
        if self.participants == 0 || self.participants > devices {
            return Err(bad("participants must be in 1..=devices"));
        }
        if self.local_epochs == 0 {
            return Err(bad("local_epochs must be at least 1"));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(bad("local_lr must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(bad("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(bad("kappa must be in [0, 1]"));
        }
        match self.optimizer {
            GlobalOptimizer::Gd { lr } | GlobalOptimizer::Adam { lr, .. } if !(lr > 0.0 && lr.is_finite()) => {
                return Err(bad("global learning rate must be positive"));
            }
            _ => {}
        }
        match self.uplink {
            Uplink::FedSpar { l, .. } | Uplink::TopSFloat { l } if l == 0 => {
                return Err(bad("sub-vector count must be at least 1"));
            }
            Uplink::FedSpar { q_max, choice, .. } => {
                if q_max < 2 {
                    return Err(bad("q_max must be at least 2"));
                }
                if let QChoice::Fixed(q) = choice {
                    if q < 2 || q > q_max {
                        return Err(bad("fixed Q must be in 2..=q_max"));
                    }
                }
            }
            _ => {}
        }
        if self.track_shadow && !matches!(self.optimizer, GlobalOptimizer::Gd { .. }) {
            return Err(bad("the shadow iterate needs plain GD"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub id: usize,
    /// `Δ_k`.
    pub residual: Vec<f64>,
    /// `C_k N`.
    pub capacity_bits: usize,
    table: Option<BudgetTable>,
}

impl DeviceState {
    pub fn new(id: usize, dim: usize, capacity_bits: usize) -> Self {
        Self { id, residual: vec![0.0; dim], capacity_bits, table: None }
    }
}

/// `Δ_k ← κ Δ_k` for a device that did not participate.
pub fn skip_round(device: &mut DeviceState, kappa: f64) {
    if kappa != 1.0 {
        device.residual.iter_mut().for_each(|d| *d *= kappa);
    }
}

#[derive(Debug, Clone, PartialEq)]
enum OptimizerState {
    Gd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w: Vec<f64>,
    pub round: usize,
    optimizer: GlobalOptimizer,
    state: OptimizerState,
}

impl ServerState {
    pub fn new(w: Vec<f64>, optimizer: GlobalOptimizer) -> Self {
        let state = match optimizer {
            GlobalOptimizer::Gd { .. } => OptimizerState::Gd,
            GlobalOptimizer::Adam { .. } => OptimizerState::Adam { m: vec![0.0; w.len()], v: vec![0.0; w.len()], t: 0 },
        };
        Self { w, round: 0, optimizer, state }
    }

    /// One global step along the aggregated update.
    pub fn apply(&mut self, g: &[f64]) {
        match (&mut self.state, self.optimizer) {
            (OptimizerState::Gd, GlobalOptimizer::Gd { lr }) => axpy(-lr, g, &mut self.w),
            (OptimizerState::Adam { m, v, t }, GlobalOptimizer::Adam { lr, beta1, beta2, eps }) => {
                *t += 1;
                let c1 = 1.0 - libm::pow(beta1, *t as f64);
                let c2 = 1.0 - libm::pow(beta2, *t as f64);
                for i in 0..g.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    self.w[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
                }
            }
            _ => unreachable!("optimizer state built from the same rule"),
        }
        self.round += 1;
    }
}

/// `E` local steps from `w` on device `k`; returns `(w - w_E) / (γE)`, i.e.
/// the mean of the `E` mini-batch gradients, with the mean loss and the
/// number of samples used.
pub fn local_update<T: Task + ?Sized>(
    task: &T,
    w: &[f64],
    k: usize,
    round: usize,
    config: &FlConfig,
) -> Result<(Vec<f64>, f64, usize), FlError> {
    let shard = task.shard_len(k);
    if shard == 0 {
        return Err(FlError::EmptyShard(k));
    }
    let n = w.len();
    let batch_len = config.batch_size.map_or(shard, |b| b.min(shard));
    let mut local = w.to_vec();
    let mut sum = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    for e in 0..config.local_epochs {
        let batch: Vec<usize> = if batch_len == shard {
            (0..shard).collect()
        } else {
            let seed = derive_seed(config.seed, tag::MINIBATCH, round as u64, k as u64, e as u64);
            Stream::new(seed).sample_indices(shard, batch_len)
        };
        loss += task.batch_gradient(&local, k, &batch, &mut grad);
        axpy(1.0, &grad, &mut sum);
        if e + 1 < config.local_epochs {
            axpy(-config.local_lr, &grad, &mut local);
        }
    }
    let epochs = config.local_epochs as f64;
    if config.local_epochs > 1 {
        sum.iter_mut().for_each(|g| *g /= epochs);
    }
    Ok((sum, loss / epochs, batch_len * config.local_epochs))
}

/// What a participant transmits.
#[derive(Debug, Clone, PartialEq)]
pub enum Upload {
    Exact(Vec<f64>),
    Compressed {
        payload: CompressedUpdate,
        /// Values of bypassed parameters, sent without compression.
        bypass: Vec<f64>,
    },
}

impl Upload {
    /// Bits counted against the budget.
    pub fn bits(&self) -> usize {
        match self {
            Upload::Exact(g) => 32 * g.len(),
            Upload::Compressed { payload, .. } => payload.bits.len(),
        }
    }
}

/// Per-participant metrics of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRecord {
    pub device: usize,
    pub capacity_bits: usize,
    pub bits: usize,
    /// Entries kept over all sub-vectors.
    pub kept: usize,
    /// `Q` per sub-vector (empty for uncompressed uploads).
    pub q_levels: Vec<usize>,
    /// `‖g - ĝ‖² / ‖g‖²`, `None` for a zero update.
    pub nmse: Option<f64>,
    /// `‖g‖²` of the update including the carried residual.
    pub update_norm_sq: f64,
    /// `‖Δ‖²` after this round.
    pub residual_norm_sq: f64,
    /// `Σ_ℓ (γ²/ψ)_ℓ S_ℓ / N`.
    pub zeta: f64,
    pub loss: f64,
    /// Aggregation weight `ρ_k`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub devices: Vec<DeviceRecord>,
    /// Weighted mean mini-batch loss of the participants.
    pub train_loss: f64,
    /// `‖g_PS‖`.
    pub aggregate_norm: f64,
    /// Evaluation of the parameters after this round's update.
    pub evaluation: Option<Evaluation>,
    /// `max_i |(w - w̃)_i - η Σ_k Δ_k,i / M|` when the shadow iterate is kept.
    pub shadow_gap: Option<f64>,
}

impl RoundRecord {
    pub fn participants(&self) -> impl Iterator<Item = usize> + '_ {
        self.devices.iter().map(|d| d.device)
    }
}

/// Maps a function over items, possibly in parallel, preserving order.
pub trait Executor: Sync {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct Serial;

impl Executor for Serial {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        items.into_iter().map(f).collect()
    }
}

/// Shared, read-only pieces every device round needs.
#[derive(Clone, Copy)]
pub struct RoundEnv<'a, T: Task + ?Sized> {
    pub task: &'a T,
    pub config: &'a FlConfig,
    pub bank: &'a QuantizerBank,
    pub transforms: &'a dyn TransformSource,
    /// Sorted indices that go through the codec.
    pub compressible: &'a [usize],
    /// Sorted indices sent exactly.
    pub bypass: &'a [usize],
}

impl<T: Task + ?Sized> RoundEnv<'_, T> {
    pub fn codec(&self, round: usize, device: usize) -> CodecContext<'_> {
        let seeds = SeedContext::new(self.config.seed, round as u64, device as u64, self.config.seed_scope);
        CodecContext::new(self.bank, self.transforms, seeds)
    }

    /// Server side: rebuilds `ĝ` from an upload.
    pub fn reconstruct(&self, round: usize, device: usize, upload: &Upload) -> Result<Vec<f64>, FlError> {
        match upload {
            Upload::Exact(g) => Ok(g.clone()),
            Upload::Compressed { payload, bypass } => {
                let part = self
                    .codec(round, device)
                    .reconstruct(payload)
                    .map_err(|source| FlError::Codec { device, source })?;
                let mut g = vec![0.0; self.task.dim()];
                for (&i, v) in self.compressible.iter().zip(part) {
                    g[i] = v;
                }
                for (&i, &v) in self.bypass.iter().zip(bypass) {
                    g[i] = v;
                }
                Ok(g)
            }
        }
    }

    fn header(&self, device: &mut DeviceState, parts: &[Vec<f64>]) -> PayloadHeader {
        let n = self.compressible.len();
        let (l, coding) = match self.config.uplink {
            Uplink::FedSpar { l, .. } => (l, ValueCoding::Lloyd),
            Uplink::TopSFloat { l } => (l, ValueCoding::Float32),
            Uplink::Vanilla => unreachable!("exact uploads have no header"),
        };
        let n_sub = sub_len(n, l);
        let cap_sub = device.capacity_bits / l;
        let subvectors = match self.config.uplink {
            Uplink::TopSFloat { .. } => {
                let s = s_max_float32(n_sub, cap_sub);
                vec![SubvectorSpec::new(n_sub, s, 0); l]
            }
            Uplink::FedSpar { q_max, choice, .. } => {
                let table = device.table.get_or_insert_with(|| {
                    let qs: Vec<usize> = match choice {
                        QChoice::Fixed(q) => vec![q],
                        _ => (2..=q_max).collect(),
                    };
                    BudgetTable::new(n_sub, cap_sub, &qs)
                });
                parts
                    .iter()
                    .map(|p| {
                        let c = match choice {
                            QChoice::Exhaustive => choose_parameters_exhaustive(p, table, self.bank),
                            _ => choose_parameters(p, table, self.bank),
                        };
                        SubvectorSpec::new(n_sub, c.s_star, c.q_star)
                    })
                    .collect()
            }
            Uplink::Vanilla => unreachable!(),
        };
        PayloadHeader { n, coding, subvectors }
    }

    /// Compresses `g` for `device` and returns the upload with the device's
    /// own reconstruction of it.
    pub fn encode(&self, round: usize, device: &mut DeviceState, g: &[f64]) -> Result<(Upload, Vec<f64>), FlError> {
        let id = device.id;
        if let Uplink::Vanilla = self.config.uplink {
            return Ok((Upload::Exact(g.to_vec()), g.to_vec()));
        }
        let ctx = self.codec(round, id);
        let gc: Vec<f64> = self.compressible.iter().map(|&i| g[i]).collect();
        let layout = ctx.layout(
            gc.len(),
            match self.config.uplink {
                Uplink::FedSpar { l, .. } | Uplink::TopSFloat { l } => l,
                Uplink::Vanilla => 1,
            },
        );
        let parts = layout.split(&gc);
        let header = self.header(device, &parts);
        let payload =
            ctx.compress_parts(&layout, &parts, header).map_err(|source| FlError::Codec { device: id, source })?;
        if payload.bits.len() > device.capacity_bits {
            return Err(FlError::BudgetExceeded {
                device: id,
                bits: payload.bits.len(),
                capacity: device.capacity_bits,
            });
        }
        let upload = Upload::Compressed { payload, bypass: self.bypass.iter().map(|&i| g[i]).collect() };
        let g_hat = self.reconstruct(round, id, &upload)?;
        Ok((upload, g_hat))
    }

    fn zeta(&self, upload: &Upload) -> f64 {
        match upload {
            Upload::Exact(_) => 1.0,
            Upload::Compressed { payload, .. } => {
                let n = payload.header.n.max(1) as f64;
                let captured: f64 = payload
                    .header
                    .subvectors
                    .iter()
                    .map(|s| {
                        let gain = match payload.header.coding {
                            ValueCoding::Lloyd if s.s > 0 => self.bank.get(s.q).map_or(0.0, |q| q.gain()),
                            _ => 1.0,
                        };
                        gain * s.s as f64
                    })
                    .sum();
                captured / n
            }
        }
    }
}

/// Output of one participant's round.
#[derive(Debug, Clone)]
pub struct DeviceOutcome {
    pub upload: Upload,
    /// The participant's own reconstruction of its upload.
    pub g_hat: Vec<f64>,
    /// The local update before the residual was added.
    pub local: Vec<f64>,
    pub record: DeviceRecord,
    pub samples: usize,
}

/// Local update, error-feedback add, compression and residual update.
pub fn device_round<T: Task + ?Sized>(
    env: &RoundEnv<'_, T>,
    device: &mut DeviceState,
    w: &[f64],
    round: usize,
) -> Result<DeviceOutcome, FlError> {
    let (local, loss, samples) = local_update(env.task, w, device.id, round, env.config)?;
    let mut g = local.clone();
    axpy(1.0, &device.residual, &mut g);
    if g.iter().any(|x| !x.is_finite()) {
        return Err(FlError::NonFinite(device.id));
    }
    let (upload, g_hat) = env.encode(round, device, &g)?;
    for ((d, gi), hi) in device.residual.iter_mut().zip(&g).zip(&g_hat) {
        *d = gi - hi;
    }
    let update_norm_sq = dot(&g, &g);
    let residual_norm_sq = dot(&device.residual, &device.residual);
    let (kept, q_levels) = match &upload {
        Upload::Exact(g) => (g.len(), Vec::new()),
        Upload::Compressed { payload, .. } => (
            payload.header.kept(),
            match payload.header.coding {
                ValueCoding::Lloyd => payload.header.subvectors.iter().map(|s| s.q).collect(),
                ValueCoding::Float32 => Vec::new(),
            },
        ),
    };
    let record = DeviceRecord {
        device: device.id,
        capacity_bits: device.capacity_bits,
        bits: upload.bits(),
        kept,
        q_levels,
        nmse: (update_norm_sq > 0.0).then(|| residual_norm_sq / update_norm_sq),
        update_norm_sq,
        residual_norm_sq,
        zeta: env.zeta(&upload),
        loss,
        weight: 0.0,
    };
    Ok(DeviceOutcome { upload, g_hat, local, record, samples })
}

/// `g_PS = Σ_k ρ_k ĝ_k`, summed in the given order.
pub fn aggregate(updates: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let n = updates.first().map_or(0, |u| u.len());
    let mut out = vec![0.0; n];
    for (u, &w) in updates.iter().zip(weights) {
        axpy(w, u, &mut out);
    }
    out
}

/// Reconstructs every upload, aggregates and steps the server.
pub fn server_round<T: Task + ?Sized>(
    env: &RoundEnv<'_, T>,
    server: &mut ServerState,
    round: usize,
    uploads: &[(usize, &Upload)],
    weights: &[f64],
) -> Result<Vec<f64>, FlError> {
    let decoded = uploads.iter().map(|&(k, u)| env.reconstruct(round, k, u)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&[f64]> = decoded.iter().map(|v| v.as_slice()).collect();
    let g = aggregate(&refs, weights);
    server.apply(&g);
    Ok(g)
}

/// The whole training loop.
pub struct Simulation<'a, T: Task + ?Sized> {
    task: &'a T,
    config: FlConfig,
    bank: &'a QuantizerBank,
    transforms: &'a dyn TransformSource,
    server: ServerState,
    devices: Vec<DeviceState>,
    compressible: Vec<usize>,
    bypass: Vec<usize>,
    shadow: Option<Vec<f64>>,
    keep_uploads: bool,
    uploads: Vec<(usize, Upload)>,
}

impl<'a, T: Task + ?Sized> Simulation<'a, T> {
    /// `capacities[k]` is device `k`'s bit budget per round.
    pub fn new(
        task: &'a T,
        config: FlConfig,
        capacities: &[usize],
        bank: &'a QuantizerBank,
        transforms: &'a dyn TransformSource,
    ) -> Result<Self, FlError> {
        let k = task.num_devices();
        config.validate(k)?;
        if capacities.len() != k {
            return Err(FlError::CapacityCount { expected: k, got: capacities.len() });
        }
        if let Uplink::FedSpar { q_max, .. } = config.uplink {
            if q_max > bank.q_max() {
                return Err(FlError::InvalidConfig("q_max exceeds the trained codebooks"));
            }
        }
        if let Some(d) = (0..k).find(|&d| task.shard_len(d) == 0) {
            return Err(FlError::EmptyShard(d));
        }
        let n = task.dim();
        let mut bypass: Vec<usize> = task.bypass().iter().copied().filter(|&i| i < n).collect();
        bypass.sort_unstable();
        bypass.dedup();
        let compressible: Vec<usize> = (0..n).filter(|i| bypass.binary_search(i).is_err()).collect();
        let w = task.init(derive_seed(config.seed, tag::MODEL_INIT, 0, 0, 0));
        let shadow = config.track_shadow.then(|| w.clone());
        let devices = capacities.iter().enumerate().map(|(id, &c)| DeviceState::new(id, n, c)).collect();
        Ok(Self {
            task,
            server: ServerState::new(w, config.optimizer),
            config,
            bank,
            transforms,
            devices,
            compressible,
            bypass,
            shadow,
            keep_uploads: false,
            uploads: Vec::new(),
        })
    }

    pub fn config(&self) -> &FlConfig {
        &self.config
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn shadow(&self) -> Option<&[f64]> {
        self.shadow.as_deref()
    }

    /// Keep the uploads of the latest round for [`Self::last_uploads`].
    pub fn keep_uploads(&mut self, keep: bool) {
        self.keep_uploads = keep;
        if !keep {
            self.uploads.clear();
        }
    }

    /// `(device, upload)` of the latest round, when enabled.
    pub fn last_uploads(&self) -> &[(usize, Upload)] {
        &self.uploads
    }

    pub fn env(&self) -> RoundEnv<'_, T> {
        RoundEnv {
            task: self.task,
            config: &self.config,
            bank: self.bank,
            transforms: self.transforms,
            compressible: &self.compressible,
            bypass: &self.bypass,
        }
    }

    /// Participants of `round`, ascending.
    pub fn participants(&self, round: usize) -> Vec<usize> {
        let seed = derive_seed(self.config.seed, tag::PARTICIPANTS, round as u64, 0, 0);
        let mut p = Stream::new(seed).sample_indices(self.devices.len(), self.config.participants);
        p.sort_unstable();
        p
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.config.rounds
    }

    /// Runs one global round.
    pub fn step<X: Executor>(&mut self, exec: &X) -> Result<RoundRecord, FlError> {
        let round = self.server.round;
        let chosen = self.participants(round);
        let mut selected = vec![false; self.devices.len()];
        for &k in &chosen {
            selected[k] = true;
        }

        let env = RoundEnv {
            task: self.task,
            config: &self.config,
            bank: self.bank,
            transforms: self.transforms,
            compressible: &self.compressible,
            bypass: &self.bypass,
        };
        let w = &self.server.w;
        let mut active: Vec<&mut DeviceState> = Vec::with_capacity(chosen.len());
        for (d, &sel) in self.devices.iter_mut().zip(&selected) {
            if sel {
                active.push(d);
            } else {
                skip_round(d, self.config.kappa);
            }
        }
        let outcomes = exec.map(active, |d| device_round(&env, d, w, round));
        let mut outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

        if self.config.verify_uplink {
            let checks = exec.map(outcomes.iter().collect(), |o| {
                env.reconstruct(round, o.record.device, &o.upload).map(|g| g == o.g_hat)
            });
            for (o, same) in outcomes.iter().zip(checks) {
                if !same? {
                    return Err(FlError::UplinkMismatch(o.record.device));
                }
            }
        }

        // The server's decode of each payload is bit-identical to the
        // device's own reconstruction, so the latter is aggregated directly.
        let total: f64 = outcomes.iter().map(|o| o.samples as f64).sum();
        let weights: Vec<f64> = outcomes.iter().map(|o| o.samples as f64 / total).collect();
        for (o, &wt) in outcomes.iter_mut().zip(&weights) {
            o.record.weight = wt;
        }
        let refs: Vec<&[f64]> = outcomes.iter().map(|o| o.g_hat.as_slice()).collect();
        let g_ps = aggregate(&refs, &weights);
        if g_ps.iter().any(|x| !x.is_finite()) {
            return Err(FlError::NonFinite(usize::MAX));
        }
        self.server.apply(&g_ps);

        let shadow_gap = match (&mut self.shadow, self.config.optimizer) {
            (Some(shadow), GlobalOptimizer::Gd { lr }) => {
                for (o, &wt) in outcomes.iter().zip(&weights) {
                    axpy(-lr * wt, &o.local, shadow);
                }
                let m = self.config.participants as f64;
                let mut expected = vec![0.0; shadow.len()];
                for d in &self.devices {
                    axpy(lr / m, &d.residual, &mut expected);
                }
                let gap = self
                    .server
                    .w
                    .iter()
                    .zip(shadow.iter())
                    .zip(&expected)
                    .map(|((w, s), e)| libm::fabs((w - s) - e))
                    .fold(0.0, f64::max);
                Some(gap)
            }
            _ => None,
        };

        let done = self.server.round;
        let evaluate = done == self.config.rounds || (self.config.eval_every > 0 && done % self.config.eval_every == 0);
        let evaluation = evaluate.then(|| self.task.evaluate(&self.server.w));
        if self.keep_uploads {
            self.uploads = outcomes.iter().map(|o| (o.record.device, o.upload.clone())).collect();
        }
        let train_loss = outcomes.iter().zip(&weights).map(|(o, w)| o.record.loss * w).sum();
        Ok(RoundRecord {
            round,
            devices: outcomes.into_iter().map(|o| o.record).collect(),
            train_loss,
            aggregate_norm: libm::sqrt(dot(&g_ps, &g_ps)),
            evaluation,
            shadow_gap,
        })
    }

    /// Runs the remaining rounds, handing each record to `on_round`.
    pub fn run<X: Executor>(
        &mut self,
        exec: &X,
        mut on_round: impl FnMut(&RoundRecord),
    ) -> Result<Vec<RoundRecord>, FlError> {
        let mut out = Vec::with_capacity(self.config.rounds);
        while !self.is_finished() {
            let r = self.step(exec)?;
            on_round(&r);
            out.push(r);
        }
        Ok(out)
    }
}
