//! Synthetic corpora: harmonic pulse waveforms with period modulation,
//! embedded in RGB spatial-temporal maps with illumination drift and noise.
//!
//! Sample `i` of a corpus uses seed `child_seed(spec.seed, i)` (see
//! [`crate::seed`]). From that seed a ChaCha8 stream draws, in order: the HR,
//! the pulse phase, the modulation phase, the drift phase, the per-region
//! pulse weights and baseline jitter, and finally the pixel noise.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvp::BvpSignal;
use crate::error::{Error, Result};
use crate::seed::child_seed;
use crate::stmap::{load_stmap, ColorSpace, SpatialTemporalMap, CHANNELS};
use crate::train::TrainSample;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_FORMAT: &str = "fastbvp-corpus";

/// Mean skin color, RGB, in pixel units.
pub const SKIN_BASELINE: [f64; 3] = [170.0, 120.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Inclusive HR interval in bpm.
    pub hr_range: [f64; 2],
    /// (frequency in Hz, depth in seconds) of the beat-period modulation.
    pub hrv_modulation: [f64; 2],
    pub pulse_harmonics: Vec<f64>,
    /// (relative amplitude, period in seconds) of the multiplicative
    /// illumination drift.
    pub illumination_drift: [f64; 2],
    /// Std of the additive pixel noise, in pixel units.
    pub noise_sigma: f64,
    pub clip_seconds: f64,
    pub sample_rate: f64,
    pub count: usize,
    pub seed: u64,
    pub regions: usize,
    /// Pulse amplitude on G, in pixel units.
    pub pulse_amplitude: f64,
    /// Relative pulse strength per channel, (R, G, B).
    pub channel_gains: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hr_range: [50.0, 150.0],
            hrv_modulation: [0.1, 0.05],
            pulse_harmonics: vec![1.0, 0.4, 0.15],
            illumination_drift: [0.01, 10.0],
            noise_sigma: 0.1,
            clip_seconds: 30.0,
            sample_rate: 30.0,
            count: 100,
            seed: 0,
            regions: 4,
            pulse_amplitude: 0.3,
            channel_gains: [0.3, 1.0, 0.6],
        }
    }
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn frames(&self) -> usize {
        (self.clip_seconds * self.sample_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.hr_range;
        if !(40.0 <= lo && lo <= hi && hi <= 240.0) {
            return Err(Error::Config(format!(
                "hr_range [{lo}, {hi}] must lie within [40, 240]"
            )));
        }
        let [fm, depth] = self.hrv_modulation;
        if !(fm >= 0.0 && depth >= 0.0 && fm.is_finite()) {
            return Err(Error::Config("hrv_modulation must be non-negative".into()));
        }
        if depth >= 60.0 / hi {
            return Err(Error::Config(format!(
                "modulation depth {depth} s must be below the shortest mean IBI {} s",
                60.0 / hi
            )));
        }
        if self.pulse_harmonics.is_empty() || self.pulse_harmonics.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("pulse_harmonics must be a non-empty list of numbers".into()));
        }
        let [da, dt] = self.illumination_drift;
        if !(da >= 0.0 && da < 1.0 && dt > 0.0) {
            return Err(Error::Config(
                "illumination_drift needs amplitude in [0, 1) and a positive timescale".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(self.sample_rate > 0.0 && self.clip_seconds > 0.0) {
            return Err(Error::Config("sample_rate and clip_seconds must be positive".into()));
        }
        if self.frames() < crate::stmap::min_frames(self.sample_rate) {
            return Err(Error::Config(format!(
                "clip of {} s is shorter than 2 s",
                self.clip_seconds
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.regions == 0 {
            return Err(Error::Config("regions must be at least 1".into()));
        }
        if !(self.pulse_amplitude >= 0.0) || self.channel_gains.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("pulse amplitude and gains must be >= 0".into()));
        }
        Ok(())
    }
}

/// Pulse waveform at rate `hr`. The beat period follows
/// `60/hr + depth · sin(2π f_m t + φ_m)`; the instantaneous frequency is then
/// rescaled so that the beats between the first and the last waveform
/// maximum occur at exactly `hr` per minute, the way a reference HR is
/// measured from beat to beat.
pub fn synth_bvp(spec: &SynthSpec, hr: f64, seed: u64) -> Result<BvpSignal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_bvp_with(spec, hr, &mut rng)
}

fn synth_bvp_with(spec: &SynthSpec, hr: f64, rng: &mut ChaCha8Rng) -> Result<BvpSignal> {
    let [lo, hi] = spec.hr_range;
    if !(hr >= lo && hr <= hi) {
        return Err(Error::Argument(format!("HR {hr} outside [{lo}, {hi}]")));
    }
    let fs = spec.sample_rate;
    let n = spec.frames();
    let phase0: f64 = rng.gen_range(0.0..1.0);
    let mod_phase: f64 = rng.gen_range(0.0..TAU);
    let [fm, depth] = spec.hrv_modulation;
    let period = 60.0 / hr;
    // cumulative phase in cycles at each sample, unscaled
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for t in 0..n {
        cum.push(acc);
        let time = (t as f64 + 0.5) / fs;
        acc += 1.0 / (period + depth * (TAU * fm * time + mod_phase).sin()) / fs;
    }
    let target = hr / 60.0;
    let mut scale = target * n as f64 / fs / acc;
    let peak = peak_phase(&spec.pulse_harmonics);
    for _ in 0..50 {
        match beat_rate(&cum, phase0, scale, peak, fs) {
            Some(rate) if (rate / target - 1.0).abs() > 1e-13 => scale *= target / rate,
            _ => break,
        }
    }
    let samples = cum
        .iter()
        .map(|c| pulse_shape(&spec.pulse_harmonics, phase0 + scale * c))
        .collect();
    BvpSignal::new(samples, fs)
}

/// Phase in [0, 1) of the waveform maximum within one cycle.
fn peak_phase(harmonics: &[f64]) -> f64 {
    const GRID: usize = 4096;
    let k = (0..GRID)
        .max_by(|&a, &b| {
            let fa = pulse_shape(harmonics, a as f64 / GRID as f64);
            let fb = pulse_shape(harmonics, b as f64 / GRID as f64);
            fa.total_cmp(&fb).then(b.cmp(&a))
        })
        .unwrap_or(0);
    let f = |j: isize| pulse_shape(harmonics, j as f64 / GRID as f64);
    let (a, b, c) = (f(k as isize - 1), f(k as isize), f(k as isize + 1));
    let curv = a - 2.0 * b + c;
    let shift = if curv < 0.0 { 0.5 * (a - c) / curv } else { 0.0 };
    ((k as f64 + shift) / GRID as f64).rem_euclid(1.0)
}

/// Beats per second between the first and last crossing of the peak phase
/// that a sampled peak detector can resolve, or `None` with fewer than two.
fn beat_rate(cum: &[f64], phase0: f64, scale: f64, peak: f64, fs: f64) -> Option<f64> {
    let ph = |i: usize| phase0 + scale * cum[i] - peak;
    let mut first = None;
    let mut last = None;
    let mut beats = 0usize;
    for i in 0..cum.len() - 1 {
        let (a, b) = (ph(i), ph(i + 1));
        let mut k = a.floor() + 1.0;
        while k <= b {
            let pos = i as f64 + (k - a) / (b - a);
            k += 1.0;
            // a sampled maximum needs a neighbour on each side
            if pos < 0.5 || pos > cum.len() as f64 - 1.5 {
                continue;
            }
            let t = pos / fs;
            if first.is_none() {
                first = Some(t);
            } else {
                beats += 1;
            }
            last = Some(t);
        }
    }
    match (first, last) {
        (Some(f), Some(l)) if beats > 0 && l > f => Some(beats as f64 / (l - f)),
        _ => None,
    }
}

/// `Σ a_h sin(2π h φ)`, with φ in cycles.
pub fn pulse_shape(harmonics: &[f64], phase: f64) -> f64 {
    harmonics
        .iter()
        .enumerate()
        .map(|(h, a)| a * (TAU * (h + 1) as f64 * phase).sin())
        .sum()
}

/// Embeds `bvp` in an RGB map. Trace `(r, c)` is
/// `b_{r,c} (1 + drift(t)) + A · g_c · w_r · bvp(t) + noise`, clamped to
/// [0, 255].
pub fn synth_stmap(bvp: &BvpSignal, spec: &SynthSpec, hr: f64, seed: u64) -> Result<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_stmap_with(bvp, spec, hr, &mut rng)
}

fn synth_stmap_with(bvp: &BvpSignal, spec: &SynthSpec, hr: f64, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let n = bvp.len();
    let fs = bvp.sample_rate;
    let [drift_amp, drift_period] = spec.illumination_drift;
    let drift_phase: f64 = rng.gen_range(0.0..TAU);
    let drift: Vec<f64> = (0..n)
        .map(|t| drift_amp * (TAU * t as f64 / fs / drift_period + drift_phase).sin())
        .collect();
    let mut region_weight = Vec::with_capacity(spec.regions);
    let mut base = Vec::with_capacity(spec.regions);
    for _ in 0..spec.regions {
        region_weight.push(rng.gen_range(0.8..1.2));
        let jitter: f64 = rng.gen_range(0.9..1.1);
        base.push(SKIN_BASELINE.map(|b| b * jitter));
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut data = Vec::with_capacity(spec.regions * CHANNELS * n);
    for r in 0..spec.regions {
        for c in 0..CHANNELS {
            let amp = spec.pulse_amplitude * spec.channel_gains[c] * region_weight[r];
            for t in 0..n {
                let mut v = base[r][c] * (1.0 + drift[t]) + amp * bvp.samples[t];
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                data.push(v.clamp(0.0, 255.0));
            }
        }
    }
    let map = SpatialTemporalMap::new(spec.regions, fs, ColorSpace::Rgb, data)?;
    TrainSample::new(map, bvp.clone(), hr)
}

/// Sample `index` of the corpus described by `spec`.
pub fn synth_sample(spec: &SynthSpec, index: usize) -> Result<(TrainSample, u64)> {
    let seed = child_seed(spec.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = spec.hr_range;
    let hr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let bvp = synth_bvp_with(spec, hr, &mut rng)?;
    Ok((synth_stmap_with(&bvp, spec, hr, &mut rng)?, seed))
}

/// All `spec.count` samples, in index order.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<TrainSample>> {
    spec.validate()?;
    (0..spec.count)
        .into_par_iter()
        .map(|i| synth_sample(spec, i).map(|(s, _)| s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub id: String,
    pub hr: f64,
    pub sample_rate: f64,
    pub bvp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub seed: u64,
    pub hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub spec: SynthSpec,
    pub samples: Vec<CorpusEntry>,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `<id>.csv`, `<id>.truth.json` per sample and `manifest.json`.
pub fn build_corpus(spec: &SynthSpec, dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<CorpusEntry> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let (sample, seed) = synth_sample(spec, i)?;
            let id = sample_id(i);
            sample.map.write_csv(&dir.join(format!("{id}.csv")))?;
            let truth = Truth {
                id: id.clone(),
                hr: sample.reference_hr,
                sample_rate: sample.target.sample_rate,
                bvp: sample.target.samples.clone(),
            };
            write_json(&dir.join(format!("{id}.truth.json")), &truth)?;
            Ok(CorpusEntry { id, seed, hr: sample.reference_hr })
        })
        .collect::<Result<_>>()?;
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        spec: spec.clone(),
        samples: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: CorpusManifest = read_json(&path)?;
    if m.format != CORPUS_FORMAT {
        return Err(Error::Schema(format!(
            "{}: format {:?}, expected {CORPUS_FORMAT:?}",
            path.display(),
            m.format
        )));
    }
    Ok(m)
}

pub fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.csv")), dir.join(format!("{id}.truth.json")))
}

/// Reads a corpus written by [`build_corpus`], in manifest order.
pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<TrainSample>)> {
    let manifest = load_manifest(dir)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let (csv, truth_path) = sample_paths(dir, &e.id);
            let truth: Truth = read_json(&truth_path)?;
            let map = load_stmap(&csv, truth.sample_rate)?;
            TrainSample::new(map, BvpSignal::new(truth.bvp, truth.sample_rate)?, truth.hr)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
