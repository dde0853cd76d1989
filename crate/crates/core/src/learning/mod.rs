//! Local training, datasets and the ideal aggregation baseline.

pub mod idx;
mod model;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::LocalUpdate;
use crate::{Error, Result};

pub use model::{evaluate, evaluate_sharded, ModelKind, ModelParams, ModelShape};

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, feature_dim: usize, num_classes: usize) -> Result<Self> {
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(Error::Dataset(format!(
                "{} feature values do not form {} rows of width {feature_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        let d = self.feature_dim;
        (&self.features[i * d..(i + 1) * d], self.labels[i])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset holding the listed rows.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let d = self.feature_dim;
        let mut features = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(&self.features[r * d..(r + 1) * d]);
            labels.push(self.labels[r]);
        }
        Dataset {
            features,
            labels,
            feature_dim: d,
            num_classes: self.num_classes,
        }
    }
}

/// Isotropic Gaussian blobs around random class centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub classes: usize,
    pub features: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Standard deviation of the class centers per coordinate.
    pub separation: f64,
    /// Within-class standard deviation.
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            features: 15,
            train_samples: 3000,
            test_samples: 1000,
            separation: 1.0,
            noise: 1.0,
        }
    }
}

/// Draw train and test sets from the same blob distribution. Labels cycle so
/// both sets are balanced.
pub fn generate_blobs<R: Rng + ?Sized>(spec: &BlobSpec, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.features == 0 {
        return Err(Error::Dataset("blobs need at least 2 classes and 1 feature".into()));
    }
    let centers: Vec<f64> = (0..spec.classes * spec.features)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            spec.separation * z
        })
        .collect();
    let draw = |n: usize, rng: &mut R| {
        let mut features = Vec::with_capacity(n * spec.features);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.classes;
            for j in 0..spec.features {
                let z: f64 = StandardNormal.sample(rng);
                features.push(centers[c * spec.features + j] + spec.noise * z);
            }
            labels.push(c);
        }
        Dataset::new(features, labels, spec.features, spec.classes)
    };
    let train = draw(spec.train_samples, rng)?;
    let test = draw(spec.test_samples, rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedDataset {
    pub shards: Vec<Dataset>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl ShardedDataset {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Dataset::len).collect()
    }
}

/// Split `data` across `k` devices.
///
/// `Iid`: shuffled, sizes differ by at most one. `Noniid`: device `i` holds
/// classes `2i mod C` and `2i+1 mod C`; each class is divided among its
/// holders with Dirichlet(`alpha`) proportions, at least one sample each, so
/// shard sizes differ. Needs `2k ≥ C` for the shards to cover every class.
pub fn partition_dataset<R: Rng + ?Sized>(
    data: &Dataset,
    k: usize,
    mode: PartitionMode,
    alpha: f64,
    rng: &mut R,
) -> Result<ShardedDataset> {
    if k == 0 {
        return Err(Error::Dataset("need at least one device".into()));
    }
    if data.len() < k {
        return Err(Error::Dataset(format!("{} samples cannot fill {k} shards", data.len())));
    }
    let rows: Vec<Vec<usize>> = match mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(rng);
            let base = data.len() / k;
            let extra = data.len() % k;
            let mut out = Vec::with_capacity(k);
            let mut start = 0;
            for i in 0..k {
                let len = base + usize::from(i < extra);
                out.push(order[start..start + len].to_vec());
                start += len;
            }
            out
        }
        PartitionMode::Noniid => noniid_rows(data, k, alpha, rng)?,
    };
    Ok(ShardedDataset {
        shards: rows.iter().map(|r| data.subset(r)).collect(),
        num_classes: data.num_classes(),
        feature_dim: data.feature_dim(),
    })
}

fn noniid_rows<R: Rng + ?Sized>(data: &Dataset, k: usize, alpha: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let c = data.num_classes();
    if 2 * k < c {
        return Err(Error::Dataset(format!(
            "non-i.i.d. split of {c} classes needs at least {} devices",
            c.div_ceil(2)
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Dataset("dirichlet alpha must be positive".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); c];
    for dev in 0..k {
        let c0 = (2 * dev) % c;
        let c1 = (2 * dev + 1) % c;
        holders[c0].push(dev);
        if c1 != c0 {
            holders[c1].push(dev);
        }
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Dataset(e.to_string()))?;
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..c {
        let mut members = std::mem::take(&mut by_class[class]);
        let devs = &holders[class];
        if members.is_empty() {
            continue;
        }
        if members.len() < devs.len() {
            return Err(Error::Dataset(format!(
                "class {class} has {} samples for {} devices",
                members.len(),
                devs.len()
            )));
        }
        members.shuffle(rng);
        let weights: Vec<f64> = devs.iter().map(|_| gamma.sample(rng)).collect();
        let counts = allocate(members.len(), &weights);
        let mut start = 0;
        for (&dev, &n) in devs.iter().zip(&counts) {
            out[dev].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    if let Some(empty) = out.iter().position(Vec::is_empty) {
        return Err(Error::Dataset(format!("device {empty} received no samples")));
    }
    Ok(out)
}

/// Split `n` items by `weights`, one guaranteed per slot, remainder by
/// largest fractional part.
fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let slots = weights.len();
    let total: f64 = weights.iter().sum();
    let spare = n - slots;
    let raw: Vec<f64> = weights.iter().map(|w| w / total * spare as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| 1 + r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..slots).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Local training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub local_steps: usize,
    pub lr: f64,
    /// `μ_t = lr / (1 + lr_decay·t)`.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub rounds: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            local_steps: 3,
            lr: 0.01,
            lr_decay: 0.0,
            batch_size: 100,
            rounds: 50,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 || self.batch_size == 0 {
            return Err(Error::config("local_steps and batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.lr_decay >= 0.0) {
            return Err(Error::config("learning rate and decay must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr / (1.0 + self.lr_decay * round as f64)
    }
}

/// `τ` mini-batch SGD steps from `start`; returns `w_τ − w_0`.
///
/// Batches of size `B` are drawn uniformly with replacement. When `B` is at
/// least the shard size every step uses the whole shard.
pub fn local_sgd_steps<R: Rng + ?Sized>(
    start: &ModelParams,
    shard: &Dataset,
    device_id: usize,
    local_steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<LocalUpdate> {
    if shard.is_empty() {
        return Err(Error::Dataset(format!("device {device_id} has an empty shard")));
    }
    let mut w = start.clone();
    let full: Vec<usize> = (0..shard.len()).collect();
    let mut batch = vec![0usize; batch_size.min(shard.len())];
    for _ in 0..local_steps {
        let idx: &[usize] = if batch_size >= shard.len() {
            &full
        } else {
            for b in batch.iter_mut() {
                *b = rng.random_range(0..shard.len());
            }
            &batch
        };
        let (_, grad) = w.shape.loss_and_grad(&w.w, shard, idx);
        for (wi, gi) in w.w.iter_mut().zip(&grad) {
            *wi -= lr * gi;
        }
    }
    Ok(LocalUpdate {
        device_id,
        delta_w: w.w.iter().zip(&start.w).map(|(a, b)| a - b).collect(),
    })
}

/// `(1/K) Σ Δw_k`.
pub fn ideal_aggregate(updates: &[LocalUpdate]) -> Result<Vec<f64>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::config("ideal_aggregate needs at least one update"))?;
    let s = first.delta_w.len();
    let mut acc = vec![0.0; s];
    for u in updates {
        if u.delta_w.len() != s {
            return Err(Error::dim("update length", s, u.delta_w.len()));
        }
        for (a, v) in acc.iter_mut().zip(&u.delta_w) {
            *a += v;
        }
    }
    let k = updates.len() as f64;
    Ok(acc.into_iter().map(|v| v / k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SimRng;
    use rand::SeedableRng;

    fn toy(n: usize, classes: usize) -> Dataset {
        let features = (0..n).map(|i| i as f64).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(features, labels, 1, classes).unwrap()
    }

    #[test]
    fn iid_sizes_equal() {
        let d = toy(100, 4);
        let mut rng = SimRng::seed_from_u64(0);
        let sh = partition_dataset(&d, 4, PartitionMode::Iid, 1.0, &mut rng).unwrap();
        assert_eq!(sh.sizes(), vec![25, 25, 25, 25]);
    }

    #[test]
    fn noniid_two_labels_and_cover() {
        let d = toy(600, 10);
        let mut rng = SimRng::seed_from_u64(5);
        let sh = partition_dataset(&d, 7, PartitionMode::Noniid, 1.0, &mut rng).unwrap();
        let mut seen: Vec<f64> = Vec::new();
        for s in &sh.shards {
            let mut labels: Vec<usize> = s.labels().to_vec();
            labels.sort_unstable();
            labels.dedup();
            assert!(labels.len() <= 2);
            for i in 0..s.len() {
                seen.push(s.sample(i).0[0]);
            }
        }
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..600).map(|i| i as f64).collect::<Vec<_>>());
        let sizes = sh.sizes();
        assert!(sizes.iter().any(|&s| s != sizes[0]));
    }

    #[test]
    fn too_few_samples() {
        let d = toy(3, 2);
        let mut rng = SimRng::seed_from_u64(0);
        assert!(partition_dataset(&d, 4, PartitionMode::Iid, 1.0, &mut rng).is_err());
        let d = toy(100, 10);
        assert!(partition_dataset(&d, 4, PartitionMode::Noniid, 1.0, &mut rng).is_err());
    }

    #[test]
    fn allocation_sums() {
        let c = allocate(10, &[0.1, 5.0, 0.2]);
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert!(c.iter().all(|&v| v >= 1));
    }

    #[test]
    fn ideal_aggregate_examples() {
        let u = |v: Vec<f64>| LocalUpdate {
            device_id: 0,
            delta_w: v,
        };
        let same = ideal_aggregate(&[u(vec![1.0, -2.0]), u(vec![1.0, -2.0])]).unwrap();
        assert_eq!(same, vec![1.0, -2.0]);
        let cancel = ideal_aggregate(&[u(vec![0.5, 3.0]), u(vec![-0.5, -3.0])]).unwrap();
        assert_eq!(cancel, vec![0.0, 0.0]);
        assert!(ideal_aggregate(&[u(vec![1.0]), u(vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn zero_lr_gives_zero_update() {
        let mut rng = SimRng::seed_from_u64(2);
        let (train, _) = generate_blobs(&BlobSpec::default(), &mut rng).unwrap();
        let shape = ModelShape::softmax(train.feature_dim(), train.num_classes());
        let w0 = shape.init(&mut rng, 0.1);
        let u = local_sgd_steps(&w0, &train, 0, 3, 10, 0.0, &mut rng).unwrap();
        assert!(u.delta_w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_shard_is_error() {
        let d = toy(4, 2).subset(&[]);
        let shape = ModelShape::softmax(1, 2);
        let mut rng = SimRng::seed_from_u64(2);
        let w0 = shape.zeros();
        assert!(local_sgd_steps(&w0, &d, 3, 1, 1, 0.1, &mut rng).is_err());
    }
}
