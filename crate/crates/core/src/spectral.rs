//! Orthonormal DCT-II / DCT-III transforms and the multi-band decomposition
//! of a spatial-temporal map.
//!
//! Bin `u` of a length-`T` spectrum sits at `u * fs / (2T)` Hz. Bands are
//! half-open `[lo, hi)` intervals, so a set of adjacent bands partitions the
//! bins exactly and the band outputs sum back to the input.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stmap::{SpatialTemporalMap, CHANNELS};

/// DCT-II coefficients of a real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub coeffs: Vec<f64>,
    pub sample_rate: f64,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Frequency in Hz of coefficient `u`.
    pub fn bin_frequency(&self, u: usize) -> f64 {
        bin_frequency(u, self.len(), self.sample_rate)
    }
}

pub fn bin_frequency(u: usize, len: usize, sample_rate: f64) -> f64 {
    u as f64 * sample_rate / (2.0 * len as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBand {
    /// Inclusive lower edge, Hz.
    pub lo: f64,
    /// Exclusive upper edge, Hz.
    pub hi: f64,
}

impl FrequencyBand {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let nyquist = sample_rate / 2.0;
        if !(self.lo >= 0.0 && self.lo < self.hi && self.hi <= nyquist + 1e-12) {
            return Err(Error::Argument(format!(
                "band [{}, {}) must satisfy 0 <= lo < hi <= {nyquist}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, freq: f64) -> bool {
        freq >= self.lo && freq < self.hi
    }
}

/// The band layout used when no configuration file is given.
pub fn default_bands() -> Vec<FrequencyBand> {
    vec![
        FrequencyBand::new(0.0, 0.7),
        FrequencyBand::new(0.7, 1.5),
        FrequencyBand::new(1.5, 2.5),
        FrequencyBand::new(2.5, 4.0),
    ]
}

/// On-disk band configuration, `{"bands": [{"lo": 0.0, "hi": 0.7}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub bands: Vec<FrequencyBand>,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            bands: default_bands(),
        }
    }
}

impl BandConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Precomputed FFT plans for one transform length.
struct DctPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    // e^{-i pi k / 2N}
    twiddles: Vec<Complex64>,
}

impl DctPlan {
    fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        let twiddles = (0..len)
            .map(|k| Complex64::from_polar(1.0, -PI * k as f64 / (2.0 * len as f64)))
            .collect();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            twiddles,
        }
    }

    fn scale(&self, k: usize) -> f64 {
        let n = self.len as f64;
        if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        }
    }

    // Even/odd reordering followed by one complex FFT of the same length.
    fn dct2(&self, x: &[f64], out: &mut [f64]) {
        let n = self.len;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n.div_ceil(2) {
            buf[i].re = x[2 * i];
        }
        for i in 0..n / 2 {
            buf[n - 1 - i].re = x[2 * i + 1];
        }
        self.forward.process(&mut buf);
        for k in 0..n {
            out[k] = (buf[k] * self.twiddles[k]).re * self.scale(k);
        }
    }

    fn dct3(&self, c: &[f64], out: &mut [f64]) {
        let n = self.len;
        let raw = |k: usize| if k < n { c[k] / self.scale(k) } else { 0.0 };
        let mut buf: Vec<Complex64> = (0..n)
            .map(|k| Complex64::new(raw(k), -raw(n - k)) * self.twiddles[k].conj())
            .collect();
        self.inverse.process(&mut buf);
        let norm = 1.0 / n as f64;
        for i in 0..n.div_ceil(2) {
            out[2 * i] = buf[i].re * norm;
        }
        for i in 0..n / 2 {
            out[2 * i + 1] = buf[n - 1 - i].re * norm;
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<DctPlan>>> = RefCell::new(HashMap::new());
}

fn plan(len: usize) -> Rc<DctPlan> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry(len)
            .or_insert_with(|| Rc::new(DctPlan::new(len)))
            .clone()
    })
}

/// Orthonormal DCT-II of `signal`.
pub fn dct2(signal: &[f64], sample_rate: f64) -> Result<Spectrum> {
    if signal.len() < 2 {
        return Err(Error::Argument(format!(
            "DCT needs at least 2 samples, got {}",
            signal.len()
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite sample in DCT input".into()));
    }
    let mut coeffs = vec![0.0; signal.len()];
    plan(signal.len()).dct2(signal, &mut coeffs);
    Ok(Spectrum {
        coeffs,
        sample_rate,
    })
}

/// Orthonormal DCT-III, the exact inverse of [`dct2`].
pub fn idct2(spectrum: &Spectrum) -> Result<Vec<f64>> {
    if spectrum.coeffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite DCT coefficient".into()));
    }
    let n = spectrum.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(spectrum.coeffs.clone());
    }
    let mut out = vec![0.0; n];
    plan(n).dct3(&spectrum.coeffs, &mut out);
    Ok(out)
}

/// Result of keeping one band of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct BandFiltered {
    pub samples: Vec<f64>,
    /// No coefficient fell inside the band; `samples` is all zeros.
    pub empty: bool,
}

/// Range of coefficient indices whose bin frequency lies in `band`.
pub fn band_bins(band: &FrequencyBand, len: usize, sample_rate: f64) -> std::ops::Range<usize> {
    let start = (0..len)
        .find(|&u| bin_frequency(u, len, sample_rate) >= band.lo)
        .unwrap_or(len);
    let end = (start..len)
        .find(|&u| bin_frequency(u, len, sample_rate) >= band.hi)
        .unwrap_or(len);
    start..end
}

/// Zeroes every coefficient outside `band` and returns to the time domain.
pub fn band_filter(spectrum: &Spectrum, band: &FrequencyBand) -> Result<BandFiltered> {
    band.validate(spectrum.sample_rate)?;
    let bins = band_bins(band, spectrum.len(), spectrum.sample_rate);
    if bins.is_empty() {
        return Ok(BandFiltered {
            samples: vec![0.0; spectrum.len()],
            empty: true,
        });
    }
    let mut kept = vec![0.0; spectrum.len()];
    kept[bins.clone()].copy_from_slice(&spectrum.coeffs[bins]);
    let samples = idct2(&Spectrum {
        coeffs: kept,
        sample_rate: spectrum.sample_rate,
    })?;
    Ok(BandFiltered {
        samples,
        empty: false,
    })
}

/// `K` band-filtered copies of every trace of a map. Each entry shares the
/// map's `regions × 3 × frames` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBandSignal {
    pub regions: usize,
    pub frames: usize,
    pub bands: Vec<Vec<f64>>,
    pub band_defs: Vec<FrequencyBand>,
    pub empty_bands: Vec<bool>,
}

impl MultiBandSignal {
    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn trace(&self, band: usize, region: usize, channel: usize) -> &[f64] {
        let start = (region * CHANNELS + channel) * self.frames;
        &self.bands[band][start..start + self.frames]
    }
}

fn check_disjoint(bands: &[FrequencyBand]) -> Result<()> {
    let mut sorted = bands.to_vec();
    sorted.sort_by(|a, b| a.lo.total_cmp(&b.lo));
    for w in sorted.windows(2) {
        if w[1].lo < w[0].hi {
            return Err(Error::Argument(format!(
                "bands [{}, {}) and [{}, {}) overlap",
                w[0].lo, w[0].hi, w[1].lo, w[1].hi
            )));
        }
    }
    Ok(())
}

/// Splits every region/channel trace of `map` into the given frequency bands.
pub fn decompose(map: &SpatialTemporalMap, bands: &[FrequencyBand]) -> Result<MultiBandSignal> {
    let fs = map.sample_rate();
    for b in bands {
        b.validate(fs)?;
    }
    check_disjoint(bands)?;
    let t_len = map.frames();
    let bins: Vec<_> = bands.iter().map(|b| band_bins(b, t_len, fs)).collect();
    let mut out = vec![vec![0.0; map.data().len()]; bands.len()];
    let p = plan(t_len);
    let mut coeffs = vec![0.0; t_len];
    let mut kept = vec![0.0; t_len];
    for (trace_idx, trace) in map.traces().enumerate() {
        p.dct2(trace, &mut coeffs);
        let offset = trace_idx * t_len;
        for (k, range) in bins.iter().enumerate() {
            if range.is_empty() {
                continue;
            }
            kept.fill(0.0);
            kept[range.clone()].copy_from_slice(&coeffs[range.clone()]);
            p.dct3(&kept, &mut out[k][offset..offset + t_len]);
        }
    }
    Ok(MultiBandSignal {
        regions: map.regions(),
        frames: t_len,
        bands: out,
        band_defs: bands.to_vec(),
        empty_bands: bins.iter().map(|r| r.is_empty()).collect(),
    })
}

/// Orthonormal DCT-II as an explicit `n × n` matrix, used for short
/// segments where a direct product beats an FFT.
#[derive(Debug, Clone)]
pub struct DctMatrix {
    n: usize,
    // row-major, basis[k * n + t]
    basis: Vec<f64>,
}

impl DctMatrix {
    pub fn new(n: usize) -> Self {
        let mut basis = vec![0.0; n * n];
        for k in 0..n {
            let s = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for t in 0..n {
                basis[k * n + t] =
                    s * (PI * (2 * t + 1) as f64 * k as f64 / (2.0 * n as f64)).cos();
            }
        }
        Self { n, basis }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `out = D x`
    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.n) {
            let row = &self.basis[k * self.n..(k + 1) * self.n];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `out = Dᵀ y`, which is also the inverse transform.
    pub fn transpose(&self, y: &[f64], out: &mut [f64]) {
        out[..self.n].fill(0.0);
        for (k, &yk) in y.iter().enumerate().take(self.n) {
            let row = &self.basis[k * self.n..(k + 1) * self.n];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yk;
            }
        }
    }
}
