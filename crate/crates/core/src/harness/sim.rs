use rayon::prelude::*;

use super::{DataSource, ExperimentConfig, Scheme};
use crate::bound::round_terms;
use crate::channel::{propagate, sample_channel, stack_rows};
use crate::coeff_select::{mismatch, select_coefficients, LearningTerms, MetricInputs, SelectionConfig};
use crate::encoder::{encode, normalize_update, LocalUpdate, NormalizedUpdate};
use crate::lattice::LatticeSpec;
use crate::learning::idx::load_idx_dataset;
use crate::learning::{
    evaluate, generate_blobs, ideal_aggregate, local_sgd_steps, partition_dataset, Dataset, ModelParams,
};
use crate::receiver::{decode_combination, decoding_mse, estimate_global_update, optimal_equalizer, optimal_eta};
use crate::seed::{Purpose, SeedTree};
use crate::{Error, Result};

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub seed: u64,
    pub round: usize,
    pub dmse: f64,
    pub qmse: f64,
    pub metric: f64,
    pub decode_error: bool,
    pub block_error_rate: f64,
    pub a_sum: i64,
    pub mismatch: f64,
    pub infeasible: bool,
    pub eta: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub gap_bound: f64,
}

/// State of one realization.
pub struct Simulation {
    cfg: ExperimentConfig,
    seed: u64,
    tree: SeedTree,
    shards: Vec<Dataset>,
    test: Dataset,
    pub params: ModelParams,
    lattice: LatticeSpec,
    second_moment: f64,
    selection: SelectionConfig,
    padded_len: usize,
    gap: f64,
    round: usize,
}

impl Simulation {
    /// Build the data for `seed` from the configuration.
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let data_seed = if cfg.dataset.per_run { seed } else { cfg.dataset.seed };
        let (train, test) = load_data(cfg, &SeedTree::new(data_seed))?;
        Self::with_data(cfg, seed, &train, test)
    }

    /// Use the given train/test split; only partitioning and model
    /// initialization depend on `seed`.
    pub fn with_data(cfg: &ExperimentConfig, seed: u64, train: &Dataset, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        let tree = SeedTree::new(seed);
        let k = cfg.channel.devices;
        let sharded = partition_dataset(
            train,
            k,
            cfg.dataset.partition,
            cfg.dataset.dirichlet_alpha,
            &mut tree.rng_global(Purpose::Partition),
        )?;
        let shape = cfg.model.shape(train.feature_dim(), train.num_classes());
        let params = shape.init(&mut tree.rng_global(Purpose::ModelInit), cfg.model.init_scale);
        let mut lattice = cfg.lattice.build()?;
        let second_moment = lattice.second_moment(
            cfg.lattice.second_moment_samples,
            &mut tree.rng_global(Purpose::SecondMoment),
        )?;
        let selection = cfg.selection.resolve(&lattice);
        let n = lattice.block_dim();
        let padded_len = shape.num_params().div_ceil(n) * n;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            tree,
            shards: sharded.shards,
            test,
            params,
            gap: cfg.bound.initial_gap,
            lattice,
            second_moment,
            selection,
            padded_len,
            round: 0,
        })
    }

    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    pub fn theta(&self) -> f64 {
        self.selection.theta
    }

    pub fn padded_len(&self) -> usize {
        self.padded_len
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    /// Local training, aggregation and the global update for the next round.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.round;
        let m = self.step(t).map_err(|e| e.in_round(t))?;
        self.round += 1;
        Ok(m)
    }

    fn local_updates(&self, t: usize, lr: f64) -> Result<Vec<LocalUpdate>> {
        let tr = &self.cfg.training;
        self.shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                let mut rng = self.tree.rng_device(t, k, Purpose::Batches);
                local_sgd_steps(&self.params, shard, k, tr.local_steps, tr.batch_size, lr, &mut rng)
            })
            .collect()
    }

    fn learning_terms(&self, lr: f64) -> LearningTerms {
        LearningTerms {
            lr,
            grad_var: self.cfg.bound.grad_var,
            batch: self.cfg.training.batch_size,
            local_steps: self.cfg.training.local_steps,
        }
    }

    fn apply(&mut self, delta: &[f64]) {
        for (w, d) in self.params.w.iter_mut().zip(delta) {
            *w += d;
        }
    }

    fn step(&mut self, t: usize) -> Result<RoundMetrics> {
        let lr = self.cfg.training.lr_at(t);
        let updates = self.local_updates(t, lr)?;
        let (mut m, a) = match self.cfg.scheme {
            Scheme::IdealFedavg => self.ideal_aggregate(t, lr, &updates)?,
            Scheme::Fedcpu => self.fedcpu_aggregate(t, lr, &updates)?,
        };
        let tr = &self.cfg.training;
        let terms = round_terms(lr, tr.local_steps, &self.cfg.bound, tr.batch_size, &a, m.qmse)?;
        self.gap = terms.c * self.gap + terms.b + self.cfg.bound.smoothness / 2.0 * terms.l;
        let (loss, acc) = evaluate(&self.params, &self.test);
        m.test_loss = loss;
        m.test_accuracy = acc;
        m.gap_bound = self.gap;
        Ok(m)
    }

    fn ideal_aggregate(&mut self, t: usize, lr: f64, updates: &[LocalUpdate]) -> Result<(RoundMetrics, Vec<i64>)> {
        let delta = ideal_aggregate(updates)?;
        self.apply(&delta);
        let ones = vec![1i64; updates.len()];
        let mm = mismatch(&ones);
        let metrics = RoundMetrics {
            seed: self.seed,
            round: t,
            dmse: 0.0,
            qmse: 0.0,
            metric: self.learning_terms(lr).mismatch_weight() * mm,
            decode_error: false,
            block_error_rate: 0.0,
            a_sum: ones.len() as i64,
            mismatch: mm,
            infeasible: false,
            eta: 1.0,
            test_loss: 0.0,
            test_accuracy: 0.0,
            gap_bound: 0.0,
        };
        Ok((metrics, ones))
    }

    fn fedcpu_aggregate(&mut self, t: usize, lr: f64, updates: &[LocalUpdate]) -> Result<(RoundMetrics, Vec<i64>)> {
        let s = self.params.w.len();
        let sp = self.padded_len;
        let sq = self.second_moment;
        let power = self.cfg.channel.power;

        let mut normalized = Vec::with_capacity(updates.len());
        let mut signals = Vec::with_capacity(updates.len());
        for (k, u) in updates.iter().enumerate() {
            let mut nu = match normalize_update(u) {
                Ok(nu) => nu,
                Err(Error::DegenerateUpdate { value, .. }) => NormalizedUpdate::degenerate(value, s),
                Err(e) => return Err(e),
            };
            nu.w_hat.resize(sp, 0.0);
            let dither = self
                .lattice
                .sample_dither(sp, &mut self.tree.rng_device(t, k, Purpose::Dither))?;
            signals.push(encode(&nu, &self.lattice, dither, power, sq)?);
            normalized.push(nu);
        }
        let sigmas: Vec<f64> = normalized.iter().map(|n| n.std).collect();
        let means: Vec<f64> = normalized.iter().map(|n| n.mean).collect();

        let h = sample_channel(&self.cfg.channel, &mut self.tree.rng_round(t, Purpose::Channel))?;
        let inputs = MetricInputs {
            learning: self.learning_terms(lr),
            sigmas: sigmas.clone(),
            second_moment: sq,
            s: sp,
        };
        let snr = self.cfg.channel.snr;
        let coeffs = select_coefficients(&h, snr, sq, &self.selection, &inputs)?;
        let a = coeffs.a.clone();

        let x = stack_rows(&signals.iter().map(|sg| sg.x.clone()).collect::<Vec<_>>())?;
        let y = propagate(
            &h,
            &x,
            self.cfg.channel.noise_variance(),
            &mut self.tree.rng_round(t, Purpose::Noise),
        )?;
        let mut truth = vec![0.0; sp];
        for (&ak, sg) in a.iter().zip(&signals) {
            for (v, q) in truth.iter_mut().zip(&sg.quantized_point) {
                *v += ak as f64 * q;
            }
        }
        let eq = optimal_equalizer(&h, &a, snr)?;
        let decoded = decode_combination(&y, &eq, &self.lattice, power, sq, &a, Some(&truth))?;
        let eta = optimal_eta(&a, &sigmas, sq)?;
        let dmse = decoding_mse(&h, &a, snr, sq, sp)?;
        let dithers: Vec<_> = signals.into_iter().map(|sg| sg.dither).collect();
        let est = estimate_global_update(&decoded, &dithers, &means, &sigmas, eta, sq, dmse)?;
        if est.delta_w_g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("global update"));
        }
        self.apply(&est.delta_w_g[..s]);

        let blocks = sp / self.lattice.block_dim();
        let metrics = RoundMetrics {
            seed: self.seed,
            round: t,
            dmse,
            qmse: est.qmse,
            metric: coeffs.metric,
            decode_error: decoded.decode_error.unwrap_or(false),
            block_error_rate: decoded.block_errors.unwrap_or(0) as f64 / blocks as f64,
            a_sum: coeffs.sum(),
            mismatch: coeffs.mismatch(),
            infeasible: coeffs.infeasible,
            eta,
            test_loss: 0.0,
            test_accuracy: 0.0,
            gap_bound: 0.0,
        };
        Ok((metrics, a))
    }
}

fn load_data(cfg: &ExperimentConfig, tree: &SeedTree) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.source {
        DataSource::Blobs => generate_blobs(&cfg.dataset.blobs, &mut tree.rng_global(Purpose::Dataset)),
        DataSource::Idx => {
            let f = &cfg.dataset.idx;
            let scale = cfg.dataset.pixel_scale;
            let train = load_idx_dataset(&f.train_images, &f.train_labels, f.train_limit, scale)?;
            let test = load_idx_dataset(&f.test_images, &f.test_labels, f.test_limit, scale)?;
            Ok((train, test))
        }
    }
}

/// All rounds of one realization.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<RoundMetrics>> {
    let mut sim = Simulation::new(cfg, seed)?;
    (0..cfg.training.rounds).map(|_| sim.run_round()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config_hash: String,
    /// Ordered by seed (as listed in the configuration), then round.
    pub rounds: Vec<RoundMetrics>,
}

/// Run every seed in parallel. Fixed data (IDX, or blobs without `per_run`)
/// is built once and shared.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let shared = match (cfg.dataset.source, cfg.dataset.per_run) {
        (DataSource::Blobs, true) => None,
        _ => Some(load_data(cfg, &SeedTree::new(cfg.dataset.seed))?),
    };
    let per_seed: Vec<Vec<RoundMetrics>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut sim = match &shared {
                Some((train, test)) => Simulation::with_data(cfg, seed, train, test.clone())?,
                None => Simulation::new(cfg, seed)?,
            };
            (0..cfg.training.rounds).map(|_| sim.run_round()).collect()
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentResult {
        config_hash: cfg.hash(),
        rounds: per_seed.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            seeds: vec![3],
            ..Default::default()
        };
        c.channel.devices = 4;
        c.channel.antennas = 8;
        c.training.rounds = 3;
        c.training.lr = 0.1;
        c.dataset.blobs.train_samples = 400;
        c.dataset.blobs.test_samples = 100;
        c.lattice.second_moment_samples = 10_000;
        c
    }

    #[test]
    fn ideal_mode_is_plain_fedavg() {
        let mut c = small();
        c.scheme = Scheme::IdealFedavg;
        let mut sim = Simulation::new(&c, 3).unwrap();
        let w0 = sim.params.clone();
        let updates = sim.local_updates(0, c.training.lr).unwrap();
        let want: Vec<f64> = ideal_aggregate(&updates)
            .unwrap()
            .iter()
            .zip(&w0.w)
            .map(|(d, w)| w + d)
            .collect();
        sim.run_round().unwrap();
        assert_eq!(sim.params.w, want);
    }

    #[test]
    fn replay_is_identical() {
        let c = small();
        assert_eq!(run_seed(&c, 3).unwrap(), run_seed(&c, 3).unwrap());
    }

    #[test]
    fn padding_for_e8() {
        let mut c = small();
        c.dataset.blobs.features = 4;
        let sim = Simulation::new(&c, 1).unwrap();
        assert_eq!(sim.params.w.len(), 15);
        assert_eq!(sim.padded_len(), 16);
        let mut sim = sim;
        sim.run_round().unwrap();
    }

    #[test]
    fn zero_lr_degenerate_updates_leave_model_fixed() {
        let mut c = small();
        c.training.lr = 0.0;
        let mut sim = Simulation::new(&c, 0).unwrap();
        let w0 = sim.params.w.clone();
        let m = sim.run_round().unwrap();
        assert!(!m.decode_error);
        for (a, b) in sim.params.w.iter().zip(&w0) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rounds_gives_no_rows() {
        let mut c = small();
        c.training.rounds = 0;
        assert!(run_experiment(&c).unwrap().rounds.is_empty());
    }
}
