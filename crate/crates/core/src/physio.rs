//! Heart rate, HRV and error metrics from pulse waveforms, plus the classical
//! GREEN, CHROM and POS extractors.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::bvp::BvpSignal;
use crate::error::{Error, Result};
use crate::spectral::{band_filter, dct2, FrequencyBand};
use crate::stmap::{min_frames, ColorSpace, SpatialTemporalMap, CHANNELS};

/// Shortest allowed gap between beats, 240 bpm.
pub const MIN_PEAK_GAP_SECS: f64 = 0.25;
pub const THRESHOLD_WINDOW_SECS: f64 = 2.0;
pub const THRESHOLD_PERCENTILE: f64 = 60.0;
pub const PULSE_BAND: FrequencyBand = FrequencyBand { lo: 0.7, hi: 4.0 };
pub const IBI_RESAMPLE_HZ: f64 = 4.0;
pub const LF_BAND: FrequencyBand = FrequencyBand { lo: 0.04, hi: 0.15 };
pub const HF_BAND: FrequencyBand = FrequencyBand { lo: 0.15, hi: 0.40 };
pub const HRV_MIN_SECS: f64 = 30.0;
/// Beat trains whose inter-beat intervals vary more than this (coefficient
/// of variation) are reported as unstable.
pub const MAX_STABLE_IBI_CV: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakList {
    pub indices: Vec<usize>,
    /// Peak times in seconds, refined below the sample grid by a parabola
    /// through each maximum and its neighbours.
    pub times: Vec<f64>,
    pub sample_rate: f64,
    /// Length of the analysed signal in seconds.
    pub duration_secs: f64,
}

impl PeakList {
    /// Peaks at exact sample positions.
    pub fn from_indices(indices: Vec<usize>, sample_rate: f64, duration_secs: f64) -> Self {
        let times = indices.iter().map(|&i| i as f64 / sample_rate).collect();
        Self {
            indices,
            times,
            sample_rate,
            duration_secs,
        }
    }

    pub fn ibis(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn beat_times(&self) -> Vec<f64> {
        self.times.clone()
    }

    pub fn ibi_cv(&self) -> Option<f64> {
        let ibi = self.ibis();
        if ibi.len() < 2 {
            return None;
        }
        let n = ibi.len() as f64;
        let mean = ibi.iter().sum::<f64>() / n;
        let var = ibi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(var.sqrt() / mean)
    }

    pub fn is_stable(&self) -> bool {
        self.ibi_cv().is_some_and(|cv| cv <= MAX_STABLE_IBI_CV)
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Local maxima above the 60th percentile of a centred 2 s window, thinned
/// to a 0.25 s minimum spacing by keeping the larger peak. Near the clip
/// edges the window keeps its length and slides inward.
pub fn detect_peaks(bvp: &BvpSignal) -> Result<PeakList> {
    let fs = bvp.sample_rate;
    let x = &bvp.samples;
    let required = min_frames(fs);
    if x.len() < required {
        return Err(Error::TooShort {
            frames: x.len(),
            sample_rate: fs,
            required,
        });
    }
    let half = (THRESHOLD_WINDOW_SECS * fs / 2.0).round() as usize;
    let mut candidates = Vec::new();
    let mut window = Vec::with_capacity(2 * half + 1);
    for i in 1..x.len() - 1 {
        if !(x[i] > x[i - 1] && x[i] >= x[i + 1]) {
            continue;
        }
        let len = (2 * half + 1).min(x.len());
        let lo = i.saturating_sub(half).min(x.len() - len);
        let hi = lo + len;
        window.clear();
        window.extend_from_slice(&x[lo..hi]);
        window.sort_by(f64::total_cmp);
        if x[i] > percentile(&window, THRESHOLD_PERCENTILE) {
            candidates.push(i);
        }
    }
    let gap = (MIN_PEAK_GAP_SECS * fs).ceil() as usize;
    let mut by_height = candidates.clone();
    by_height.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in by_height {
        if kept.iter().all(|&k| k.abs_diff(i) >= gap) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    if kept.len() < 2 {
        return Err(Error::InsufficientSignal(format!(
            "found {} peak(s), need at least 2",
            kept.len()
        )));
    }
    let times = kept
        .iter()
        .map(|&i| {
            let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
            let curv = a - 2.0 * b + c;
            let shift = if curv < 0.0 { (0.5 * (a - c) / curv).clamp(-0.5, 0.5) } else { 0.0 };
            (i as f64 + shift) / fs
        })
        .collect();
    Ok(PeakList {
        indices: kept,
        times,
        sample_rate: fs,
        duration_secs: bvp.duration_secs(),
    })
}

/// `60 / mean IBI`, in beats per minute.
pub fn estimate_hr(peaks: &PeakList) -> Result<f64> {
    let n = peaks.indices.len();
    if n < 2 {
        return Err(Error::InsufficientSignal(format!(
            "{n} peak(s) give no inter-beat interval"
        )));
    }
    let span = peaks.times[n - 1] - peaks.times[0];
    if !(span > 0.0) {
        return Err(Error::InsufficientSignal("peaks do not span any time".into()));
    }
    Ok(60.0 * (n - 1) as f64 / span)
}

/// Peak detection followed by HR estimation.
pub fn bvp_to_hr(bvp: &BvpSignal) -> Result<f64> {
    estimate_hr(&detect_peaks(bvp)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrvReport {
    pub lf_nu: f64,
    pub hf_nu: f64,
    pub lf_hf_ratio: f64,
    pub lf_power: f64,
    pub hf_power: f64,
    /// Set when the beats cover less than 30 s.
    pub warning: bool,
}

pub fn hrv_spectral(peaks: &PeakList) -> Result<HrvReport> {
    if peaks.indices.len() < 3 {
        return Err(Error::InsufficientSignal(
            "HRV needs at least 3 beats".into(),
        ));
    }
    let times = peaks.beat_times();
    let ibi = peaks.ibis();
    let mut report = hrv_from_ibi(&times[1..], &ibi)?;
    report.warning = peaks.duration_secs < HRV_MIN_SECS - 1e-9;
    Ok(report)
}

/// LF/HF analysis of an inter-beat interval series `ibi[k]` observed at
/// `times[k]` seconds: linear resampling to 4 Hz, linear detrend, Hann
/// window, periodogram.
pub fn hrv_from_ibi(times: &[f64], ibi: &[f64]) -> Result<HrvReport> {
    if times.len() != ibi.len() || times.len() < 2 {
        return Err(Error::InsufficientSignal(
            "HRV needs at least 2 inter-beat intervals".into(),
        ));
    }
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let n = (span * IBI_RESAMPLE_HZ).floor() as usize + 1;
    if n < 4 {
        return Err(Error::InsufficientSignal("IBI series too short for HRV".into()));
    }
    let mut series = Vec::with_capacity(n);
    let mut k = 0;
    for j in 0..n {
        let t = t0 + j as f64 / IBI_RESAMPLE_HZ;
        while k + 2 < times.len() && times[k + 1] < t {
            k += 1;
        }
        let (ta, tb) = (times[k], times[k + 1]);
        let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        series.push(ibi[k] + w * (ibi[k + 1] - ibi[k]));
    }
    let level = series.iter().map(|v| v.abs()).fold(0.0, f64::max);
    detrend(&mut series);
    if series.iter().all(|v| v.abs() <= 1e-9 * level) {
        return Err(Error::Degenerate("IBI series is constant".into()));
    }
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let hann = 0.5 - 0.5 * (std::f64::consts::TAU * j as f64 / (n - 1) as f64).cos();
            Complex::new(v * hann, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut lf, mut hf) = (0.0, 0.0);
    for (u, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = u as f64 * IBI_RESAMPLE_HZ / n as f64;
        let p = c.norm_sqr();
        if LF_BAND.contains(f) {
            lf += p;
        } else if HF_BAND.contains(f) {
            hf += p;
        }
    }
    let total = lf + hf;
    if total == 0.0 {
        return Err(Error::Degenerate("IBI series has no LF or HF power".into()));
    }
    let lf_nu = lf / total;
    let hf_nu = hf / total;
    Ok(HrvReport {
        lf_nu,
        hf_nu,
        lf_hf_ratio: if hf > 0.0 { lf / hf } else { f64::INFINITY },
        lf_power: lf,
        hf_power: hf,
        warning: span < HRV_MIN_SECS - 1e-9,
    })
}

/// Removes the least-squares line, in place.
pub fn detrend(x: &mut [f64]) {
    let n = x.len();
    if n < 2 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let nf = n as f64;
    let tm = (nf - 1.0) / 2.0;
    let ym = x.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, v) in x.iter().enumerate() {
        let d = i as f64 - tm;
        sxy += d * (v - ym);
        sxx += d * d;
    }
    let slope = sxy / sxx;
    for (i, v) in x.iter_mut().enumerate() {
        *v -= ym + slope * (i as f64 - tm);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Population standard deviation of the error.
    pub std: f64,
    pub r: f64,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::CorrelationUndefined("fewer than 2 values".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::CorrelationUndefined("constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// MAE, RMSE and error Std, with `r` set to NaN when it is undefined.
pub fn error_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} references",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("no values to compare".into()));
    }
    let n = pred.len() as f64;
    let err: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let mean = err.iter().sum::<f64>() / n;
    let mae = err.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std = (err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(MetricReport {
        mae,
        rmse,
        std,
        r: pearson(pred, truth).unwrap_or(f64::NAN),
    })
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<MetricReport> {
    let m = error_metrics(pred, truth)?;
    pearson(pred, truth)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BaselineMethod {
    Green,
    Chrom,
    Pos,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 3] = [BaselineMethod::Green, BaselineMethod::Chrom, BaselineMethod::Pos];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Green => "GREEN",
            BaselineMethod::Chrom => "CHROM",
            BaselineMethod::Pos => "POS",
        }
    }
}

/// Window length shared by CHROM and POS.
pub const BASELINE_WINDOW_SECS: f64 = 1.6;

pub fn bandpass(x: &[f64], fs: f64, band: &FrequencyBand) -> Result<Vec<f64>> {
    Ok(band_filter(&dct2(x, fs)?, band)?.samples)
}

fn region_mean_rgb(map: &SpatialTemporalMap) -> [Vec<f64>; 3] {
    let t = map.frames();
    let mut out = [vec![0.0; t], vec![0.0; t], vec![0.0; t]];
    let inv = 1.0 / map.regions() as f64;
    for r in 0..map.regions() {
        for (c, acc) in out.iter_mut().enumerate().take(CHANNELS) {
            for (a, v) in acc.iter_mut().zip(map.trace(r, c)) {
                *a += v * inv;
            }
        }
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Hann window sampled at half-sample offsets, so no tap is zero.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| 0.5 - 0.5 * (std::f64::consts::TAU * (j as f64 + 0.5) / n as f64).cos())
        .collect()
}

/// Half-overlapping Hann windows; the sum is divided by the accumulated
/// window weight so the clip edges are not attenuated.
fn overlap_add(
    traces: &[Vec<f64>],
    win: usize,
    mut f: impl FnMut(&[&[f64]]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let t = traces[0].len();
    let win = win.min(t);
    let hop = (win / 2).max(1);
    let w = hann(win);
    let mut out = vec![0.0; t];
    let mut weight = vec![0.0; t];
    let mut start = 0;
    loop {
        let end = start + win;
        let slices: Vec<&[f64]> = traces.iter().map(|c| &c[start..end]).collect();
        let h = f(&slices)?;
        for (k, v) in h.iter().enumerate() {
            out[start + k] += v * w[k];
            weight[start + k] += w[k];
        }
        if end == t {
            break;
        }
        start = (start + hop).min(t - win);
    }
    for (o, w) in out.iter_mut().zip(&weight) {
        *o /= w;
    }
    Ok(out)
}

pub fn baseline_extract(map: &SpatialTemporalMap, method: BaselineMethod) -> Result<BvpSignal> {
    if map.color_space() != ColorSpace::Rgb || map.is_normalized() {
        return Err(Error::State(format!(
            "{} needs the raw RGB map",
            method.name()
        )));
    }
    let fs = map.sample_rate();
    let rgb = region_mean_rgb(map);
    let win = (BASELINE_WINDOW_SECS * fs).round() as usize;
    let raw = match method {
        BaselineMethod::Green => {
            let mut g = rgb[1].clone();
            detrend(&mut g);
            g
        }
        BaselineMethod::Chrom => {
            let n: Vec<Vec<f64>> = rgb
                .iter()
                .map(|c| {
                    let m = mean(c);
                    c.iter().map(|v| v / m).collect()
                })
                .collect();
            let x: Vec<f64> = (0..n[0].len()).map(|i| 3.0 * n[0][i] - 2.0 * n[1][i]).collect();
            let y: Vec<f64> = (0..n[0].len())
                .map(|i| 1.5 * n[0][i] + n[1][i] - 1.5 * n[2][i])
                .collect();
            let xf = bandpass(&x, fs, &PULSE_BAND)?;
            let yf = bandpass(&y, fs, &PULSE_BAND)?;
            let pair = [xf, yf];
            overlap_add(&pair, win, |w| {
                let sy = std_dev(w[1]);
                let alpha = if sy > 0.0 { std_dev(w[0]) / sy } else { 0.0 };
                Ok(w[0].iter().zip(w[1]).map(|(a, b)| a - alpha * b).collect())
            })?
        }
        BaselineMethod::Pos => overlap_add(&rgb, win, |w| {
            let n: Vec<Vec<f64>> = w.iter().map(|c| {
                let m = mean(c);
                c.iter().map(|v| v / m).collect()
            }).collect();
            let s1: Vec<f64> = (0..n[0].len()).map(|i| n[1][i] - n[2][i]).collect();
            let s2: Vec<f64> = (0..n[0].len())
                .map(|i| -2.0 * n[0][i] + n[1][i] + n[2][i])
                .collect();
            let d2 = std_dev(&s2);
            let alpha = if d2 > 0.0 { std_dev(&s1) / d2 } else { 0.0 };
            let h: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
            let m = mean(&h);
            Ok(h.into_iter().map(|v| v - m).collect())
        })?,
    };
    BvpSignal::new(bandpass(&raw, fs, &PULSE_BAND)?, fs)
}

/// Summary emitted for a reconstructed waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysioReport {
    pub hr: f64,
    pub num_peaks: usize,
    pub stable: bool,
    pub lf_nu: Option<f64>,
    pub hf_nu: Option<f64>,
    pub lf_hf_ratio: Option<f64>,
    pub hrv_warning: bool,
    pub duration_secs: f64,
}

pub fn physio_report(bvp: &BvpSignal) -> Result<PhysioReport> {
    let peaks = detect_peaks(bvp)?;
    let hr = estimate_hr(&peaks)?;
    let hrv = hrv_spectral(&peaks).ok();
    Ok(PhysioReport {
        hr,
        num_peaks: peaks.indices.len(),
        stable: peaks.is_stable(),
        lf_nu: hrv.as_ref().map(|h| h.lf_nu),
        hf_nu: hrv.as_ref().map(|h| h.hf_nu),
        lf_hf_ratio: hrv.as_ref().map(|h| h.lf_hf_ratio),
        hrv_warning: bvp.duration_secs() < HRV_MIN_SECS - 1e-9,
        duration_secs: bvp.duration_secs(),
    })
}
