//! Negative-Pearson loss, HR-group oversampling and the two-phase training
//! loop.
//!
//! Phase 1 visits every training sample once per epoch in shuffled order.
//! Phase 2 switches to a lower learning rate and batches that hold a fixed
//! number of samples from each HR group. Adam state carries over between the
//! phases.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvp::BvpSignal;
use crate::error::{Error, Result};
use crate::nn::layers::{BnStats, Mode};
use crate::nn::params::ParamStore;
use crate::nn::sequential::update_running_stats;
use crate::nn::tensor::Tensor1d;
use crate::physio::bvp_to_hr;
use crate::seed::path_seed;
use crate::srrn::{prepare_input, SrrnModel};
use crate::stmap::{add_white_noise, preprocess, SpatialTemporalMap, DEFAULT_NOISE_SIGMA};

pub const HR_MIN: f64 = 40.0;
pub const HR_MAX: f64 = 240.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub map: SpatialTemporalMap,
    pub target: BvpSignal,
    pub reference_hr: f64,
}

impl TrainSample {
    pub fn new(map: SpatialTemporalMap, target: BvpSignal, reference_hr: f64) -> Result<Self> {
        if map.frames() != target.len() || map.sample_rate() != target.sample_rate {
            return Err(Error::Shape(format!(
                "map has {} frames at {} Hz, target {} samples at {} Hz",
                map.frames(),
                map.sample_rate(),
                target.len(),
                target.sample_rate
            )));
        }
        if !(HR_MIN..=HR_MAX).contains(&reference_hr) {
            return Err(Error::Data(format!(
                "reference HR {reference_hr} outside [{HR_MIN}, {HR_MAX}]"
            )));
        }
        Ok(Self {
            map,
            target,
            reference_hr,
        })
    }
}

/// `1 − r(pred, target)` and its gradient with respect to `pred`. A constant
/// prediction counts as `r = 0` with zero gradient.
pub fn neg_pearson(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} samples, target {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len();
    if n < 3 {
        return Err(Error::Shape(format!("Pearson loss needs at least 3 samples, got {n}")));
    }
    let nf = n as f64;
    let mx = pred.iter().sum::<f64>() / nf;
    let my = target.iter().sum::<f64>() / nf;
    let xc: Vec<f64> = pred.iter().map(|v| v - mx).collect();
    let yc: Vec<f64> = target.iter().map(|v| v - my).collect();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    if !(syy > 1e-24 * nf * (1.0 + my * my)) {
        return Err(Error::Data("target waveform is constant".into()));
    }
    let sxx: f64 = xc.iter().map(|v| v * v).sum();
    if !(sxx > 1e-24 * nf * (1.0 + mx * mx)) {
        return Ok((1.0, vec![0.0; n]));
    }
    let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    let denom = (sxx * syy).sqrt();
    let r = sxy / denom;
    let grad = xc
        .iter()
        .zip(&yc)
        .map(|(x, y)| -(y / denom - r * x / sxx))
        .collect();
    Ok(((1.0 - r).clamp(0.0, 2.0), grad))
}

pub fn neg_pearson_loss(pred: &BvpSignal, target: &BvpSignal) -> Result<(f64, Vec<f64>)> {
    neg_pearson(&pred.samples, &target.samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HrGroupScheme {
    /// Group `g` covers `[edges[g], edges[g+1])`; the last group also
    /// includes its upper edge.
    pub group_edges: Vec<f64>,
    pub per_group_quota: Vec<usize>,
}

impl Default for HrGroupScheme {
    fn default() -> Self {
        Self {
            group_edges: (0..=7).map(|i| 40.0 + 20.0 * i as f64).collect(),
            per_group_quota: vec![2; 7],
        }
    }
}

impl HrGroupScheme {
    pub fn uniform(group_edges: Vec<f64>, quota: usize) -> Self {
        let n = group_edges.len().saturating_sub(1);
        Self {
            group_edges,
            per_group_quota: vec![quota; n],
        }
    }

    pub fn num_groups(&self) -> usize {
        self.group_edges.len().saturating_sub(1)
    }

    pub fn batch_size(&self) -> usize {
        self.per_group_quota.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_edges.len() < 2 {
            return Err(Error::Config("an HR scheme needs at least 2 edges".into()));
        }
        if self.group_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!(
                "group edges {:?} are not strictly increasing",
                self.group_edges
            )));
        }
        if self.per_group_quota.len() != self.num_groups() {
            return Err(Error::Config(format!(
                "{} quotas for {} groups",
                self.per_group_quota.len(),
                self.num_groups()
            )));
        }
        if self.per_group_quota.iter().any(|&q| q == 0) {
            return Err(Error::Config("every group quota must be positive".into()));
        }
        Ok(())
    }

    pub fn group_of(&self, hr: f64) -> Option<usize> {
        let e = &self.group_edges;
        let last = e.len() - 1;
        if hr == e[last] {
            return Some(last - 1);
        }
        (0..last).find(|&g| hr >= e[g] && hr < e[g + 1])
    }

    fn interval(&self, g: usize) -> String {
        let close = if g + 2 == self.group_edges.len() { ']' } else { ')' };
        format!("[{}, {}{close}", self.group_edges[g], self.group_edges[g + 1])
    }

    /// Indices of `hrs` per group. Values outside every group are left out.
    pub fn assign(&self, hrs: &[f64]) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let mut groups = vec![Vec::new(); self.num_groups()];
        for (i, &hr) in hrs.iter().enumerate() {
            if let Some(g) = self.group_of(hr) {
                groups[g].push(i);
            }
        }
        let empty: Vec<String> = (0..groups.len())
            .filter(|&g| groups[g].is_empty())
            .map(|g| self.interval(g))
            .collect();
        if !empty.is_empty() {
            return Err(Error::Config(format!(
                "no training samples in HR group(s) {} bpm",
                empty.join(", ")
            )));
        }
        Ok(groups)
    }
}

/// Endless batch source with a fixed quota per HR group. Each group draws
/// from its own shuffled queue and reshuffles once the queue runs out, so a
/// small group repeats while a large one is still being traversed.
#[derive(Debug, Clone)]
pub struct OversampledBatches {
    groups: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
    quotas: Vec<usize>,
    rng: ChaCha8Rng,
}

impl OversampledBatches {
    pub fn new(hrs: &[f64], scheme: &HrGroupScheme, seed: u64) -> Result<Self> {
        let groups = scheme.assign(hrs)?;
        Ok(Self {
            queues: vec![Vec::new(); groups.len()],
            groups,
            quotas: scheme.per_group_quota.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Sample indices of the next batch, grouped in group order.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.quotas.iter().sum());
        for g in 0..self.groups.len() {
            for _ in 0..self.quotas[g] {
                if self.queues[g].is_empty() {
                    let mut q = self.groups[g].clone();
                    q.shuffle(&mut self.rng);
                    // popped from the back
                    q.reverse();
                    self.queues[g] = q;
                }
                batch.push(self.queues[g].pop().expect("groups are non-empty"));
            }
        }
        batch
    }
}

impl Iterator for OversampledBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

pub fn make_oversampled_batches(
    samples: &[TrainSample],
    scheme: &HrGroupScheme,
    seed: u64,
    count: usize,
) -> Result<Vec<Vec<usize>>> {
    let hrs: Vec<f64> = samples.iter().map(|s| s.reference_hr).collect();
    Ok(OversampledBatches::new(&hrs, scheme, seed)?.take(count).collect())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable entry that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.zeros_like_trainable();
            self.v = params.zeros_like_trainable();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            if g.data.len() != p.data.len() {
                return Err(Error::Shape(format!(
                    "{name}: gradient has {} values, parameter {}",
                    g.data.len(),
                    p.data.len()
                )));
            }
            let m = &mut self.m.get_mut(name)?.data;
            let v = &mut self.v.get_mut(name)?.data;
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Std of the white noise added to normalized maps, per batch.
    pub noise_sigma: f64,
    pub scheme: HrGroupScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 30,
            phase2_epochs: 10,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            batch_size: 14,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            scheme: HrGroupScheme::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration contract: positive epochs and rates, and a second
    /// phase rate below the first.
    pub fn validate(&self) -> Result<()> {
        self.check_runnable()?;
        if self.phase1_epochs == 0 || self.phase2_epochs == 0 {
            return Err(Error::Config("both phases need at least one epoch".into()));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_phase2 < self.lr_phase1) {
            return Err(Error::Config(format!(
                "lr_phase2 ({}) must be below lr_phase1 ({})",
                self.lr_phase2, self.lr_phase1
            )));
        }
        Ok(())
    }

    /// The weaker checks [`fit`] needs; zero rates and empty phases are
    /// allowed here.
    pub fn check_runnable(&self) -> Result<()> {
        for (name, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam moments must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.scheme.validate()?;
        if self.phase2_epochs > 0 && self.scheme.batch_size() != self.batch_size {
            return Err(Error::Config(format!(
                "group quotas sum to {}, batch_size is {}",
                self.scheme.batch_size(),
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    /// NaN when no validation set was given.
    pub val_mae: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the epoch with the lowest validation MAE, or of the
    /// last epoch when there is no validation set.
    pub best: SrrnModel,
    pub best_epoch: usize,
    pub last: SrrnModel,
    pub history: Vec<EpochRecord>,
}

struct Prepared {
    map: SpatialTemporalMap,
    target: Vec<f64>,
    hr: f64,
}

fn prepare(samples: &[TrainSample], model: &SrrnModel) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            model.config.check_frames(s.map.frames())?;
            Ok(Prepared {
                map: preprocess(&s.map)?,
                target: s.target.samples.clone(),
                hr: s.reference_hr,
            })
        })
        .collect()
}

struct BatchResult {
    loss_sum: f64,
    grads: ParamStore,
    stats: Vec<BnStats>,
}

/// Forward and backward of one batch, its items stacked as rows so BN
/// statistics pool over the batch. The gradient is that of the mean loss.
fn batch_step(model: &SrrnModel, prep: &[Prepared], batch: &[usize], sigma: f64, seeds: &[u64]) -> Result<BatchResult> {
    let inputs = batch
        .par_iter()
        .zip(seeds)
        .map(|(&i, &seed)| {
            let noisy = add_white_noise(&prep[i].map, sigma, seed)?;
            prepare_input(&noisy, &model.config)
        })
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor1d::stack_rows(&inputs)?;
    let (y, cache) = model.forward(&x, Mode::Train)?;
    let mut dy = Tensor1d::zeros(batch.len(), 1, y.len());
    let inv = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for (k, &i) in batch.iter().enumerate() {
        let (loss, g) = neg_pearson(y.signal(k, 0), &prep[i].target)?;
        loss_sum += loss;
        for (d, v) in dy.signal_mut(k, 0).iter_mut().zip(g) {
            *d = v * inv;
        }
    }
    let (_, grads) = model.backward(&cache, &dy)?;
    Ok(BatchResult {
        loss_sum,
        grads,
        stats: cache.bn_stats(),
    })
}

/// HR error of one held-out sample. A waveform without two detectable
/// peaks counts as a prediction of 0 bpm.
fn hr_error(model: &SrrnModel, p: &Prepared) -> Result<f64> {
    let bvp = model.infer(&p.map)?;
    Ok(match bvp_to_hr(&bvp) {
        Ok(hr) => (hr - p.hr).abs(),
        Err(Error::InsufficientSignal(_)) => p.hr,
        Err(e) => return Err(e),
    })
}

fn validation_mae(model: &SrrnModel, val: &[Prepared]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let errs = val
        .par_iter()
        .map(|p| hr_error(model, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Trains `model` on `train`, selecting the epoch with the lowest HR MAE on
/// `val`. Batch inputs are prepared in parallel and then stacked; every
/// reduction runs in a fixed order, so the result does not depend on the
/// thread count.
pub fn fit(train: &[TrainSample], val: &[TrainSample], model: SrrnModel, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.check_runnable()?;
    if train.len() < cfg.batch_size && cfg.phase1_epochs > 0 {
        return Err(Error::Config(format!(
            "{} training samples for batch size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let prep_train = prepare(train, &model)?;
    let prep_val = prepare(val, &model)?;
    if let Some(first) = prep_train.first() {
        let t = first.map.frames();
        if prep_train.iter().any(|p| p.map.frames() != t) {
            return Err(Error::Shape(
                "training clips must share one length to be batched".into(),
            ));
        }
    }
    let mut model = model;
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut last_finite = f64::NAN;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut oversampler = if cfg.phase2_epochs > 0 {
        let hrs: Vec<f64> = prep_train.iter().map(|p| p.hr).collect();
        Some(OversampledBatches::new(&hrs, &cfg.scheme, path_seed(cfg.seed, &[2]))?)
    } else {
        None
    };
    let total = cfg.phase1_epochs + cfg.phase2_epochs;
    for epoch in 1..=total {
        let phase: u8 = if epoch <= cfg.phase1_epochs { 1 } else { 2 };
        let (lr, batches) = if phase == 1 {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(path_seed(cfg.seed, &[1, epoch as u64])));
            let b: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
            (cfg.lr_phase1, b)
        } else {
            let src = oversampler.as_mut().expect("phase 2 sampler");
            (cfg.lr_phase2, src.take(batches_per_epoch).collect())
        };
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let seeds: Vec<u64> = (0..batch.len())
                .map(|k| path_seed(cfg.seed, &[0, epoch as u64, b as u64, k as u64]))
                .collect();
            let res = batch_step(&model, &prep_train, batch, cfg.noise_sigma, &seeds)?;
            if !res.loss_sum.is_finite() || !res.grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            adam.step(&mut model.params, &res.grads, lr)?;
            update_running_stats(&mut model.params, &[res.stats])?;
            if !model.params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = res.loss_sum / batch.len() as f64;
            loss_sum += res.loss_sum;
            count += batch.len();
        }
        let train_loss = if count > 0 { loss_sum / count as f64 } else { f64::NAN };
        let val_mae = validation_mae(&model, &prep_val)?;
        log::info!("epoch {epoch} phase {phase}: loss {train_loss:.4}, val MAE {val_mae:.3}");
        history.push(EpochRecord {
            epoch,
            phase,
            train_loss,
            val_mae,
        });
        let better = match &best {
            None => true,
            Some((m, _, _)) => val_mae < *m || (m.is_nan() && !val_mae.is_nan()),
        };
        if better || prep_val.is_empty() {
            best = Some((val_mae, epoch, model.params.clone()));
        }
    }
    let (best_params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (model.params.clone(), 0),
    };
    Ok(FitOutcome {
        best: SrrnModel::from_parts(model.config.clone(), best_params)?,
        best_epoch,
        last: model,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let t: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        assert!(neg_pearson(&t, &t).unwrap().0.abs() < 1e-12);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((neg_pearson(&neg, &t).unwrap().0 - 2.0).abs() < 1e-12);
        let c = vec![3.0; 50];
        let (l, g) = neg_pearson(&c, &t).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(matches!(neg_pearson(&t, &c), Err(Error::Data(_))));
        assert!(matches!(neg_pearson(&t[..4], &t), Err(Error::Shape(_))));
        assert!(matches!(neg_pearson(&t[..2], &t[..2]), Err(Error::Shape(_))));
    }

    #[test]
    fn groups_include_top_edge() {
        let s = HrGroupScheme::uniform(vec![50.0, 100.0, 150.0], 1);
        assert_eq!(s.group_of(50.0), Some(0));
        assert_eq!(s.group_of(100.0), Some(1));
        assert_eq!(s.group_of(150.0), Some(1));
        assert_eq!(s.group_of(150.1), None);
        assert_eq!(s.group_of(49.9), None);
    }

    #[test]
    fn adam_with_zero_rate_is_identity() {
        let mut p = ParamStore::new();
        p.insert("w", crate::nn::params::Param::filled(&[3], 0.5, true));
        let before = p.clone();
        let mut g = p.zeros_like_trainable();
        g.get_mut("w").unwrap().data = vec![1.0, -2.0, 3.0];
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..5 {
            adam.step(&mut p, &g, 0.0).unwrap();
        }
        assert_eq!(p, before);
        adam.step(&mut p, &g, 0.1).unwrap();
        // the first bias-corrected step moves every coordinate by ≈ lr
        for (a, b) in p.get("w").unwrap().data.iter().zip(&before.get("w").unwrap().data) {
            assert!(((a - b).abs() - 0.1).abs() < 1e-6);
        }
    }
}
