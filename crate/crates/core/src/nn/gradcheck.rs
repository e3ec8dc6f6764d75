//! Central finite-difference verification of analytic gradients.
//!
//! The scalar probed is `Σ w ⊙ f(x)` for a random projection `w`, so every
//! output coordinate contributes to every checked derivative.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::ParamStore;
use super::tensor::Tensor1d;
use crate::error::Result;

pub const INPUT_GROUP: &str = "input";

/// A differentiable map from one tensor to another, evaluated in train mode.
pub trait Differentiable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward_train(&self, x: &Tensor1d) -> Result<Tensor1d>;
    /// Input gradient and trainable-parameter gradients for upstream `dy`.
    fn gradients(&self, x: &Tensor1d, dy: &Tensor1d) -> Result<(Tensor1d, ParamStore)>;
    /// On/off state of every non-smooth unit. Perturbations that change it
    /// straddle a kink, where finite differences are meaningless.
    fn kink_pattern(&self, _x: &Tensor1d) -> Result<Vec<bool>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub epsilon: f64,
    /// Coordinates probed per group and trial; `None` probes all of them.
    pub coords_per_group: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            epsilon: 1e-4,
            coords_per_group: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because every probe step crossed a kink.
    pub kink_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
    /// Errors raised by the model itself; a failed check, never a panic.
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn flagged(&self, tolerance: f64) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_error <= tolerance))
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures.is_empty() && self.flagged(tolerance).is_empty()
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Relative error with a floor, so that coordinates whose true derivative is
/// ~0 are judged on absolute error.
fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

fn projected(y: &Tensor1d, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

enum Target<'a> {
    Input,
    Param(&'a str),
}

pub fn check_gradients<M, G>(model: &mut M, mut make_input: G, cfg: &GradCheckConfig) -> GradReport
where
    M: Differentiable,
    G: FnMut(&mut ChaCha8Rng) -> Tensor1d,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups: Vec<GroupReport> = Vec::new();
    let mut failures = Vec::new();
    let mut names: Vec<String> = vec![INPUT_GROUP.to_string()];
    names.extend(
        model
            .params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone()),
    );
    for n in &names {
        groups.push(GroupReport {
            name: n.clone(),
            max_rel_error: 0.0,
            checked: 0,
            kink_skipped: 0,
        });
    }
    for trial in 0..cfg.trials {
        let x = make_input(&mut rng);
        if let Err(e) = run_trial(model, &x, cfg, &mut rng, &names, &mut groups) {
            failures.push(format!("trial {trial}: {e}"));
        }
    }
    GradReport { groups, failures }
}

fn run_trial<M: Differentiable>(
    model: &mut M,
    x: &Tensor1d,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    names: &[String],
    groups: &mut [GroupReport],
) -> Result<()> {
    let y = model.forward_train(x)?;
    let w: Vec<f64> = (0..y.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dy = Tensor1d::from_vec(y.rows(), y.channels(), y.len(), w.clone())?;
    let (dx, grads) = model.gradients(x, &dy)?;
    // Floors: 1e-3 of the group's own scale, and 1e-4 of the largest
    // gradient anywhere, which covers groups whose gradient is exactly zero
    // (a bias feeding batch norm) and whose numeric estimate is pure roundoff.
    let global = dx
        .data()
        .iter()
        .chain(grads.iter().flat_map(|(_, p)| p.data.iter()))
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    for (gi, name) in names.iter().enumerate() {
        let (target, analytic): (Target, Vec<f64>) = if gi == 0 {
            (Target::Input, dx.data().to_vec())
        } else {
            let numel = model.params().get(name)?.numel();
            let a = match grads.get(name) {
                Ok(p) => p.data.clone(),
                // a parameter that never received a gradient must have none
                Err(_) => vec![0.0; numel],
            };
            (Target::Param(name), a)
        };
        let n = analytic.len();
        let coords: Vec<usize> = match cfg.coords_per_group {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut pairs = Vec::with_capacity(coords.len());
        let mut skipped = 0;
        for &i in &coords {
            match numeric_derivative(model, x, &target, i, &w, cfg.epsilon)? {
                Some(num) => pairs.push((analytic[i], num)),
                None => skipped += 1,
            }
        }
        let scale = pairs
            .iter()
            .map(|(a, n)| a.abs().max(n.abs()))
            .fold(0.0, f64::max);
        let floor = (1e-3 * scale).max(1e-4 * global).max(1e-10);
        let worst = pairs
            .iter()
            .map(|&(a, n)| rel_error(a, n, floor))
            .fold(0.0, f64::max);
        let g = &mut groups[gi];
        // NaN must dominate so that a broken gradient is never hidden
        g.max_rel_error = if worst.is_nan() || g.max_rel_error.is_nan() {
            f64::NAN
        } else {
            g.max_rel_error.max(worst)
        };
        g.checked += pairs.len();
        g.kink_skipped += skipped;
    }
    Ok(())
}

/// Fourth-order central difference along one coordinate,
/// `(f(−2h) − 8f(−h) + 8f(h) − f(2h)) / 12h`; truncation error is O(h⁴).
/// Shrinks the step while the stencil straddles a kink, giving up after a
/// few tries.
fn numeric_derivative<M: Differentiable>(
    model: &mut M,
    x: &Tensor1d,
    target: &Target,
    i: usize,
    w: &[f64],
    epsilon: f64,
) -> Result<Option<f64>> {
    let mut h = epsilon;
    for _ in 0..4 {
        let mut f = [0.0; 4];
        let mut kinks = Vec::with_capacity(4);
        for (slot, step) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
            let (v, k) = eval_shifted(model, x, target, i, step * h, w)?;
            f[slot] = v;
            kinks.push(k);
        }
        if kinks.windows(2).all(|p| p[0] == p[1]) {
            return Ok(Some((f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * h)));
        }
        h *= 0.1;
    }
    Ok(None)
}

fn eval_shifted<M: Differentiable>(
    model: &mut M,
    x: &Tensor1d,
    target: &Target,
    i: usize,
    delta: f64,
    w: &[f64],
) -> Result<(f64, Vec<bool>)> {
    match target {
        Target::Input => {
            let mut xs = x.clone();
            xs.data_mut()[i] += delta;
            let f = projected(&model.forward_train(&xs)?, w);
            Ok((f, model.kink_pattern(&xs)?))
        }
        Target::Param(name) => {
            let orig = model.params().get(name)?.data[i];
            model.params_mut().get_mut(name)?.data[i] = orig + delta;
            let out = model
                .forward_train(x)
                .and_then(|y| Ok((projected(&y, w), model.kink_pattern(x)?)));
            model.params_mut().get_mut(name)?.data[i] = orig;
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0, 1e-10), 0.0);
        assert!((rel_error(1.0, 1.1, 1e-10) - 0.1 / 1.1).abs() < 1e-12);
        assert!((rel_error(1e-12, 0.0, 1e-6) - 1e-6).abs() < 1e-15);
        assert_eq!(rel_error(0.0, 0.0, 0.0), 0.0);
    }
}
