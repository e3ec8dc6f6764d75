//! Spectrum self-attention.
//!
//! For every row and channel the feature is cut into `S` segments of length
//! `Ls`. Each segment's DCT amplitude spectrum, scaled to unit norm, acts as
//! its query, key and value. A segment whose spectrum disagrees with the rest
//! (a noisy period) draws little attention and gets a low agreement score
//! `s_i = q_i · O_i`. The scores, laid out as a `rows × channels × S`
//! tensor, pass through the two-convolution global representator, which
//! yields a gain in (0, 2) per channel and segment that reweights the input.

use super::super::nn::attention::{attention_backward, attention_forward};
use super::super::nn::layers::{backward_into, forward_layer, Layer, LayerCache, LayerSpec, Mode};
use super::super::nn::params::ParamStore;
use super::super::nn::tensor::Tensor1d;
use crate::error::{Error, Result};
use crate::spectral::DctMatrix;

/// Keeps the spectrum normalization finite for an all-zero segment.
pub const SPECTRUM_DELTA: f64 = 1e-8;
/// Smoothing of the amplitude `√(z² + κ) − √κ`, which is differentiable at 0.
pub const AMPLITUDE_KAPPA: f64 = 1e-4;

fn amplitude(z: f64) -> f64 {
    (z * z + AMPLITUDE_KAPPA).sqrt() - AMPLITUDE_KAPPA.sqrt()
}

fn amplitude_slope(z: f64) -> f64 {
    z / (z * z + AMPLITUDE_KAPPA).sqrt()
}

#[derive(Debug, Clone)]
pub struct Ssa {
    pub name: String,
    pub segment: usize,
    pub conv1: Layer,
    pub act: Layer,
    pub conv2: Layer,
    dct: DctMatrix,
}

/// Attention quantities for one signal.
#[derive(Debug, Clone)]
pub struct SegmentAttention {
    pub segments: usize,
    /// DCT coefficients, `S × Ls`.
    z: Vec<f64>,
    /// Normalized amplitude spectra, `S × Ls`.
    q: Vec<f64>,
    norms: Vec<f64>,
    out: Vec<f64>,
    /// Attention matrix, `S × S`, row i = weights segment i gives to each j.
    pub weights: Vec<f64>,
    /// Agreement score per segment.
    pub score: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SsaCache {
    x: Tensor1d,
    attn: Vec<SegmentAttention>,
    conv1: LayerCache,
    act: LayerCache,
    conv2: LayerCache,
    gain: Tensor1d,
}

impl SsaCache {
    pub fn attention(&self) -> &[SegmentAttention] {
        &self.attn
    }

    pub fn gain(&self) -> &Tensor1d {
        &self.gain
    }

    pub fn kink_layers(&self) -> [&LayerCache; 1] {
        [&self.act]
    }
}

pub fn segment_attention(x: &[f64], dct: &DctMatrix) -> SegmentAttention {
    let ls = dct.len();
    let s = x.len() / ls;
    let mut z = vec![0.0; s * ls];
    let mut q = vec![0.0; s * ls];
    let mut norms = vec![0.0; s];
    for i in 0..s {
        let zi = &mut z[i * ls..(i + 1) * ls];
        dct.forward(&x[i * ls..(i + 1) * ls], zi);
        let qi = &mut q[i * ls..(i + 1) * ls];
        for (a, b) in qi.iter_mut().zip(zi.iter()) {
            *a = amplitude(*b);
        }
        let n = (qi.iter().map(|v| v * v).sum::<f64>() + SPECTRUM_DELTA).sqrt();
        qi.iter_mut().for_each(|v| *v /= n);
        norms[i] = n;
    }
    let (out, weights) = attention_forward(&q, &q, &q, s, s, ls, ls);
    let score = (0..s)
        .map(|i| {
            q[i * ls..(i + 1) * ls]
                .iter()
                .zip(&out[i * ls..(i + 1) * ls])
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    SegmentAttention {
        segments: s,
        z,
        q,
        norms,
        out,
        weights,
        score,
    }
}

/// Gradient of the input signal given the gradient of the scores.
fn segment_attention_backward(a: &SegmentAttention, dscore: &[f64], dct: &DctMatrix, dx: &mut [f64]) {
    let ls = dct.len();
    let s = a.segments;
    let mut dq = vec![0.0; s * ls];
    let mut dout = vec![0.0; s * ls];
    for i in 0..s {
        for t in 0..ls {
            let k = i * ls + t;
            dq[k] = dscore[i] * a.out[k];
            dout[k] = dscore[i] * a.q[k];
        }
    }
    let (g1, g2, g3) = attention_backward(&a.q, &a.q, &a.q, &a.weights, &dout, s, s, ls, ls);
    for k in 0..s * ls {
        dq[k] += g1[k] + g2[k] + g3[k];
    }
    let mut dz = vec![0.0; ls];
    for i in 0..s {
        let r = i * ls..(i + 1) * ls;
        let n = a.norms[i];
        // q = p / n with n = sqrt(|p|² + δ), p = amplitude(z)
        let p_dot: f64 = dq[r.clone()]
            .iter()
            .zip(&a.q[r.clone()])
            .map(|(g, qv)| g * qv * n)
            .sum();
        for (t, k) in r.clone().enumerate() {
            let p = a.q[k] * n;
            let dp = dq[k] / n - p_dot * p / (n * n * n);
            dz[t] = dp * amplitude_slope(a.z[k]);
        }
        dct.transpose(&dz, &mut dx[r]);
    }
}

impl Ssa {
    pub fn new(name: &str, channels: usize, hidden: usize, segment: usize, alpha: f64) -> Self {
        Self {
            name: name.to_string(),
            segment,
            conv1: Layer::new(format!("{name}.conv1"), LayerSpec::conv(channels, hidden, 3)),
            act: Layer::new(format!("{name}.act"), LayerSpec::Elu { alpha }),
            conv2: Layer::new(format!("{name}.conv2"), LayerSpec::conv(hidden, channels, 1)),
            dct: DctMatrix::new(segment),
        }
    }

    pub fn layers(&self) -> [&Layer; 3] {
        [&self.conv1, &self.act, &self.conv2]
    }

    pub fn check_len(&self, len: usize) -> Result<usize> {
        if len == 0 || len % self.segment != 0 {
            return Err(Error::Config(format!(
                "{}: feature length {len} is not a multiple of segment length {}",
                self.name, self.segment
            )));
        }
        Ok(len / self.segment)
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor1d, mode: Mode) -> Result<(Tensor1d, SsaCache)> {
        let s = self.check_len(x.len())?;
        let ls = self.segment;
        let (rows, ch) = (x.rows(), x.channels());
        let mut attn = Vec::with_capacity(rows * ch);
        let mut scores = Tensor1d::zeros(rows, ch, s);
        for r in 0..rows {
            for c in 0..ch {
                let a = segment_attention(x.signal(r, c), &self.dct);
                scores.signal_mut(r, c).copy_from_slice(&a.score);
                attn.push(a);
            }
        }
        let (h1, conv1) = forward_layer(&self.conv1, params, &scores, mode)?;
        let (h2, act) = forward_layer(&self.act, params, &h1, mode)?;
        let (mut gain, conv2) = forward_layer(&self.conv2, params, &h2, mode)?;
        gain.data_mut()
            .iter_mut()
            .for_each(|v| *v = 2.0 / (1.0 + (-*v).exp()));
        let mut y = x.clone();
        for r in 0..rows {
            for c in 0..ch {
                let g = gain.signal(r, c).to_vec();
                for (seg, gv) in y.signal_mut(r, c).chunks_exact_mut(ls).zip(g) {
                    seg.iter_mut().for_each(|v| *v *= gv);
                }
            }
        }
        Ok((
            y,
            SsaCache {
                x: x.clone(),
                attn,
                conv1,
                act,
                conv2,
                gain,
            },
        ))
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &SsaCache,
        dy: &Tensor1d,
        grads: &mut ParamStore,
    ) -> Result<Tensor1d> {
        let x = &cache.x;
        if dy.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "{}: upstream gradient shape {:?} vs input {:?}",
                self.name,
                dy.shape(),
                x.shape()
            )));
        }
        let ls = self.segment;
        let (rows, ch) = (x.rows(), x.channels());
        let s = x.len() / ls;
        let mut dx = dy.clone();
        let mut dpre = Tensor1d::zeros(rows, ch, s);
        for r in 0..rows {
            for c in 0..ch {
                let g = cache.gain.signal(r, c).to_vec();
                let xs = x.signal(r, c);
                let dys = dy.signal(r, c);
                let dpr = dpre.signal_mut(r, c);
                for i in 0..s {
                    let seg = i * ls..(i + 1) * ls;
                    let dg: f64 = dys[seg.clone()].iter().zip(&xs[seg]).map(|(a, b)| a * b).sum();
                    // d/dz 2σ(z) = g (1 − g/2)
                    dpr[i] = dg * g[i] * (1.0 - 0.5 * g[i]);
                }
                for (seg, gv) in dx.signal_mut(r, c).chunks_exact_mut(ls).zip(&g) {
                    seg.iter_mut().for_each(|v| *v *= gv);
                }
            }
        }
        let d2 = backward_into(&self.conv2, params, &cache.conv2, &dpre, grads)?;
        let d1 = backward_into(&self.act, params, &cache.act, &d2, grads)?;
        let dscore = backward_into(&self.conv1, params, &cache.conv1, &d1, grads)?;
        let mut tmp = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..ch {
                tmp.fill(0.0);
                let a = &cache.attn[r * ch + c];
                segment_attention_backward(a, dscore.signal(r, c), &self.dct, &mut tmp);
                for (d, t) in dx.signal_mut(r, c).iter_mut().zip(&tmp) {
                    *d += t;
                }
            }
        }
        Ok(dx)
    }

    /// Multiply-accumulates over `rows` rows of `channels × len` features:
    /// segment DCTs, the two attention products, the score dot products and
    /// the representator convolutions.
    pub fn macs(&self, rows: usize, channels: usize, len: usize) -> Result<usize> {
        let s = self.check_len(len)?;
        let ls = self.segment;
        let per_signal = s * ls * ls + 2 * s * s * ls + s * ls;
        Ok(rows * channels * per_signal
            + self.conv1.spec.macs(rows, s)?
            + self.conv2.spec.macs(rows, s)?)
    }
}
