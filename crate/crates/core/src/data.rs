//! Labeled datasets and non-IID partitioning across devices.

use alloc::vec::Vec;

use rand_distr::{Distribution, Gamma};

use crate::rng::{derive_seed, tag, Stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("{features} feature values do not form {samples} samples of width {dims}")]
    Shape { features: usize, samples: usize, dims: usize },
    #[error("label {label} at sample {index} is not below the class count {classes}")]
    LabelOutOfRange { index: usize, label: u8, classes: usize },
    #[error("class {class} has {available} samples, {needed} needed")]
    NotEnoughSamples { class: usize, needed: usize, available: usize },
    #[error("Dirichlet concentration must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("at least one device and one class are required")]
    Empty,
    #[error("no partition without empty devices after {0} attempts")]
    Degenerate(usize),
}

/// Row-major samples with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f32>,
    labels: Vec<u8>,
    dims: usize,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f32>, labels: Vec<u8>, dims: usize, classes: usize) -> Result<Self, DataError> {
        if dims == 0 || features.len() != labels.len() * dims {
            return Err(DataError::Shape { features: features.len(), samples: labels.len(), dims });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(DataError::LabelOutOfRange { index, label, classes });
        }
        Ok(Self { features, labels, dims, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            features: self.features[..n * self.dims].to_vec(),
            labels: self.labels[..n].to_vec(),
            dims: self.dims,
            classes: self.classes,
        }
    }
}

fn indices_by_class(labels: &[u8], classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = alloc::vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if (l as usize) < classes {
            by_class[l as usize].push(i);
        }
    }
    by_class
}

/// Device `k` gets `per_device` samples of class `k mod classes`, drawn
/// without replacement. Shards are disjoint and sorted.
pub fn partition_one_class(
    labels: &[u8],
    classes: usize,
    devices: usize,
    per_device: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if devices == 0 || classes == 0 {
        return Err(DataError::Empty);
    }
    let mut by_class = indices_by_class(labels, classes);
    let mut shards = alloc::vec![Vec::new(); devices];
    for (class, pool) in by_class.iter_mut().enumerate() {
        let owners: Vec<usize> = (class..devices).step_by(classes).collect();
        let needed = owners.len() * per_device;
        if needed > pool.len() {
            return Err(DataError::NotEnoughSamples { class, needed, available: pool.len() });
        }
        let mut stream = Stream::new(derive_seed(seed, tag::PARTITION, class as u64, 0, 0));
        let chosen = stream.sample_indices(pool.len(), needed);
        for (j, &k) in owners.iter().enumerate() {
            let mut shard: Vec<usize> = chosen[j * per_device..(j + 1) * per_device].iter().map(|&c| pool[c]).collect();
            shard.sort_unstable();
            shards[k] = shard;
        }
    }
    Ok(shards)
}

/// Splits every class across devices in proportions drawn from
/// `Dirichlet(α·1)`; all samples are assigned exactly once. Draws that leave
/// a device empty are rejected and redrawn.
pub fn partition_dirichlet(
    labels: &[u8],
    classes: usize,
    devices: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    const ATTEMPTS: usize = 1000;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::InvalidAlpha(alpha));
    }
    if devices == 0 || classes == 0 {
        return Err(DataError::Empty);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| DataError::InvalidAlpha(alpha))?;
    let by_class = indices_by_class(labels, classes);
    'attempt: for attempt in 0..ATTEMPTS {
        let mut shards = alloc::vec![Vec::new(); devices];
        for (class, pool) in by_class.iter().enumerate() {
            let mut stream = Stream::new(derive_seed(seed, tag::PARTITION, class as u64, attempt as u64, 1));
            let weights: Vec<f64> = (0..devices).map(|_| gamma.sample(stream.rng())).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                continue 'attempt;
            }
            let mut order = pool.clone();
            stream.shuffle(&mut order);
            let n = order.len();
            let mut acc = 0.0;
            let mut start = 0;
            for (k, w) in weights.iter().enumerate() {
                acc += w;
                let end = if k + 1 == devices { n } else { ((acc / total) * n as f64) as usize };
                let end = end.clamp(start, n);
                shards[k].extend_from_slice(&order[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(DataError::Degenerate(ATTEMPTS))
}
