//! Layer primitives with hand-written reverse passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention_backward, attention_forward};
use super::params::{Param, ParamStore};
use super::tensor::Tensor1d;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Cross-correlation with zero padding.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Transposed convolution; output length `(L - 1) * stride - 2 * padding + kernel`.
    Deconv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Elu {
        alpha: f64,
    },
    /// Average pooling with kernel = stride = `factor`.
    AvgPool {
        factor: usize,
    },
    /// Self-attention among the length-`segment` pieces of every signal.
    SoftmaxAttention {
        segment: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    /// Transposed convolution that multiplies the length by `stride`.
    pub fn upsample(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec::Deconv1d {
            in_channels,
            out_channels,
            kernel: stride + 2,
            stride,
            padding: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || stride == 0 {
                    return Err(Error::Config(format!("invalid conv spec {self:?}")));
                }
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
                }
            }
            LayerSpec::Deconv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || stride == 0 || kernel == 0 {
                    return Err(Error::Config(format!("invalid deconv spec {self:?}")));
                }
            }
            LayerSpec::BatchNorm { channels } if channels == 0 => {
                return Err(Error::Config("batch norm over zero channels".into()));
            }
            LayerSpec::AvgPool { factor } if factor == 0 => {
                return Err(Error::Config("pool factor must be >= 1".into()));
            }
            LayerSpec::SoftmaxAttention { segment } if segment == 0 => {
                return Err(Error::Config("attention segment must be >= 1".into()));
            }
            LayerSpec::Elu { alpha } if !(alpha > 0.0) => {
                return Err(Error::Config(format!("ELU alpha must be > 0, got {alpha}")));
            }
            _ => {}
        }
        Ok(())
    }

    /// Output channel count given the input's, or an error when it must match.
    pub fn out_channels(&self, in_channels: usize) -> Result<usize> {
        match *self {
            LayerSpec::Conv1d {
                in_channels: c,
                out_channels,
                ..
            }
            | LayerSpec::Deconv1d {
                in_channels: c,
                out_channels,
                ..
            } => {
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "layer expects {c} input channels, got {in_channels}"
                    )));
                }
                Ok(out_channels)
            }
            LayerSpec::BatchNorm { channels } => {
                if channels != in_channels {
                    return Err(Error::Shape(format!(
                        "batch norm over {channels} channels, got {in_channels}"
                    )));
                }
                Ok(channels)
            }
            _ => Ok(in_channels),
        }
    }

    pub fn out_len(&self, len: usize) -> Result<usize> {
        match *self {
            LayerSpec::Conv1d {
                kernel,
                stride,
                padding,
                ..
            } => {
                if len + 2 * padding < kernel {
                    return Err(Error::Shape(format!(
                        "length {len} too short for kernel {kernel}"
                    )));
                }
                Ok((len + 2 * padding - kernel) / stride + 1)
            }
            LayerSpec::Deconv1d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let full = (len - 1) * stride + kernel;
                if full <= 2 * padding {
                    return Err(Error::Shape(format!("deconv output empty for length {len}")));
                }
                Ok(full - 2 * padding)
            }
            LayerSpec::AvgPool { factor } => {
                if len % factor != 0 {
                    return Err(Error::Config(format!(
                        "length {len} not divisible by pool factor {factor}"
                    )));
                }
                Ok(len / factor)
            }
            LayerSpec::SoftmaxAttention { segment } => {
                if len % segment != 0 {
                    return Err(Error::Config(format!(
                        "length {len} not divisible into segments of {segment}"
                    )));
                }
                Ok(len)
            }
            _ => Ok(len),
        }
    }

    /// Learnable parameter count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerSpec::Deconv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel + out_channels,
            LayerSpec::BatchNorm { channels } => 2 * channels,
            _ => 0,
        }
    }

    /// Multiply-accumulates for one forward pass over `rows` rows of length `len`.
    pub fn macs(&self, rows: usize, len: usize) -> Result<usize> {
        Ok(match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => rows * in_channels * out_channels * kernel * self.out_len(len)?,
            LayerSpec::Deconv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => rows * in_channels * out_channels * kernel * len,
            _ => 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    pub fn param_name(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    /// Fan-in scaled uniform weights and biases; BN scale 1, shift 0.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        match self.spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
                store.insert(
                    self.param_name("weight"),
                    uniform(&[out_channels, in_channels, kernel], bound, rng),
                );
                store.insert(self.param_name("bias"), uniform(&[out_channels], bound, rng));
            }
            LayerSpec::Deconv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                // each output sample sees about in_channels * kernel / stride taps
                let fan_in = (in_channels * kernel).div_ceil(stride).max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                store.insert(
                    self.param_name("weight"),
                    uniform(&[in_channels, out_channels, kernel], bound, rng),
                );
                store.insert(self.param_name("bias"), uniform(&[out_channels], bound, rng));
            }
            LayerSpec::BatchNorm { channels } => {
                store.insert(self.param_name("gamma"), Param::filled(&[channels], 1.0, true));
                store.insert(self.param_name("beta"), Param::zeros(&[channels], true));
                store.insert(
                    self.param_name("running_mean"),
                    Param::zeros(&[channels], false),
                );
                store.insert(
                    self.param_name("running_var"),
                    Param::filled(&[channels], 1.0, false),
                );
            }
            _ => {}
        }
    }

    /// Verifies that every parameter this layer needs is present with the right shape.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        match self.spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                store.expect(&self.param_name("weight"), &[out_channels, in_channels, kernel])?;
                store.expect(&self.param_name("bias"), &[out_channels])?;
            }
            LayerSpec::Deconv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                store.expect(&self.param_name("weight"), &[in_channels, out_channels, kernel])?;
                store.expect(&self.param_name("bias"), &[out_channels])?;
            }
            LayerSpec::BatchNorm { channels } => {
                for f in ["gamma", "beta", "running_mean", "running_var"] {
                    store.expect(&self.param_name(f), &[channels])?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Param {
    let n: usize = shape.iter().product();
    Param {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        trainable: true,
    }
}

/// Per-channel batch statistics observed by a BN layer in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum CacheData {
    Conv { x: Tensor1d },
    Deconv { x: Tensor1d },
    BatchNorm { xhat: Tensor1d, inv_std: Vec<f64>, stats: BnStats },
    Relu { x: Tensor1d },
    Elu { x: Tensor1d, y: Tensor1d },
    Pool { in_len: usize },
    Attention { x: Tensor1d, weights: Vec<Vec<f64>> },
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub layer: String,
    pub mode: Mode,
    pub data: CacheData,
}

impl LayerCache {
    pub fn bn_stats(&self) -> Option<&BnStats> {
        match &self.data {
            CacheData::BatchNorm { stats, .. } => Some(stats),
            _ => None,
        }
    }
}

pub fn forward_layer(
    layer: &Layer,
    params: &ParamStore,
    x: &Tensor1d,
    mode: Mode,
) -> Result<(Tensor1d, LayerCache)> {
    let out_ch = layer.spec.out_channels(x.channels())?;
    let out_len = layer.spec.out_len(x.len())?;
    let cache = |data| LayerCache {
        layer: layer.name.clone(),
        mode,
        data,
    };
    match layer.spec {
        LayerSpec::Conv1d {
            kernel,
            stride,
            padding,
            ..
        } => {
            let w = params.expect(&layer.param_name("weight"), &[out_ch, x.channels(), kernel])?;
            let b = params.expect(&layer.param_name("bias"), &[out_ch])?;
            let y = conv_forward(x, &w.data, &b.data, out_ch, kernel, stride, padding, out_len);
            Ok((y, cache(CacheData::Conv { x: x.clone() })))
        }
        LayerSpec::Deconv1d {
            kernel,
            stride,
            padding,
            ..
        } => {
            let w = params.expect(&layer.param_name("weight"), &[x.channels(), out_ch, kernel])?;
            let b = params.expect(&layer.param_name("bias"), &[out_ch])?;
            let y = deconv_forward(x, &w.data, &b.data, out_ch, kernel, stride, padding, out_len);
            Ok((y, cache(CacheData::Deconv { x: x.clone() })))
        }
        LayerSpec::BatchNorm { channels } => {
            let gamma = &params.expect(&layer.param_name("gamma"), &[channels])?.data;
            let beta = &params.expect(&layer.param_name("beta"), &[channels])?.data;
            let (mean, var) = match mode {
                Mode::Train => channel_moments(x),
                Mode::Infer => (
                    params.expect(&layer.param_name("running_mean"), &[channels])?.data.clone(),
                    params.expect(&layer.param_name("running_var"), &[channels])?.data.clone(),
                ),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = x.clone();
            let mut y = x.clone();
            for r in 0..x.rows() {
                for c in 0..channels {
                    let xs = xhat.signal_mut(r, c);
                    for v in xs.iter_mut() {
                        *v = (*v - mean[c]) * inv_std[c];
                    }
                    let (g, bb) = (gamma[c], beta[c]);
                    for (o, h) in y.signal_mut(r, c).iter_mut().zip(xhat.signal(r, c)) {
                        *o = g * h + bb;
                    }
                }
            }
            let stats = BnStats {
                layer: layer.name.clone(),
                mean,
                var,
            };
            Ok((y, cache(CacheData::BatchNorm { xhat, inv_std, stats })))
        }
        LayerSpec::Relu => {
            let mut y = x.clone();
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            Ok((y, cache(CacheData::Relu { x: x.clone() })))
        }
        LayerSpec::Elu { alpha } => {
            let mut y = x.clone();
            y.data_mut()
                .iter_mut()
                .for_each(|v| *v = if *v > 0.0 { *v } else { alpha * v.exp_m1() });
            Ok((
                y.clone(),
                cache(CacheData::Elu { x: x.clone(), y }),
            ))
        }
        LayerSpec::AvgPool { factor } => {
            let mut y = Tensor1d::zeros(x.rows(), x.channels(), out_len);
            let inv = 1.0 / factor as f64;
            for r in 0..x.rows() {
                for c in 0..x.channels() {
                    let src = x.signal(r, c);
                    for (o, chunk) in y.signal_mut(r, c).iter_mut().zip(src.chunks_exact(factor)) {
                        *o = chunk.iter().sum::<f64>() * inv;
                    }
                }
            }
            Ok((y, cache(CacheData::Pool { in_len: x.len() })))
        }
        LayerSpec::SoftmaxAttention { segment } => {
            let s = x.len() / segment;
            let mut y = Tensor1d::zeros(x.rows(), x.channels(), x.len());
            let mut weights = Vec::with_capacity(x.rows() * x.channels());
            for r in 0..x.rows() {
                for c in 0..x.channels() {
                    let m = x.signal(r, c);
                    let (out, w) = attention_forward(m, m, m, s, s, segment, segment);
                    y.signal_mut(r, c).copy_from_slice(&out);
                    weights.push(w);
                }
            }
            Ok((y, cache(CacheData::Attention { x: x.clone(), weights })))
        }
    }
}

/// Reverse pass: returns the input gradient and the parameter gradients.
pub fn backward_layer(
    layer: &Layer,
    params: &ParamStore,
    cache: &LayerCache,
    dy: &Tensor1d,
) -> Result<(Tensor1d, ParamStore)> {
    let mut grads = ParamStore::new();
    let dx = backward_into(layer, params, cache, dy, &mut grads)?;
    Ok((dx, grads))
}

/// Like [`backward_layer`] but accumulates parameter gradients into `grads`.
pub fn backward_into(
    layer: &Layer,
    params: &ParamStore,
    cache: &LayerCache,
    dy: &Tensor1d,
    grads: &mut ParamStore,
) -> Result<Tensor1d> {
    if cache.layer != layer.name {
        return Err(Error::State(format!(
            "cache belongs to layer {}, not {}",
            cache.layer, layer.name
        )));
    }
    if cache.mode != Mode::Train {
        return Err(Error::State(format!(
            "layer {} was run in inference mode; no gradient cache",
            layer.name
        )));
    }
    let stale = || Error::State(format!("cache kind does not match layer {}", layer.name));
    match (&layer.spec, &cache.data) {
        (
            &LayerSpec::Conv1d {
                out_channels,
                kernel,
                stride,
                padding,
                in_channels,
            },
            CacheData::Conv { x },
        ) => {
            check_dy(dy, x.rows(), out_channels, layer.spec.out_len(x.len())?)?;
            let wshape = [out_channels, in_channels, kernel];
            let w = params.expect(&layer.param_name("weight"), &wshape)?;
            let mut dx = Tensor1d::zeros(x.rows(), x.channels(), x.len());
            let mut dw = vec![0.0; w.numel()];
            let mut db = vec![0.0; out_channels];
            conv_backward(x, &w.data, dy, kernel, stride, padding, &mut dx, &mut dw, &mut db);
            add_into(grads.grad_slot(&layer.param_name("weight"), &wshape), &dw);
            add_into(grads.grad_slot(&layer.param_name("bias"), &[out_channels]), &db);
            Ok(dx)
        }
        (
            &LayerSpec::Deconv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            CacheData::Deconv { x },
        ) => {
            check_dy(dy, x.rows(), out_channels, layer.spec.out_len(x.len())?)?;
            let wshape = [in_channels, out_channels, kernel];
            let w = params.expect(&layer.param_name("weight"), &wshape)?;
            let mut dx = Tensor1d::zeros(x.rows(), x.channels(), x.len());
            let mut dw = vec![0.0; w.numel()];
            let mut db = vec![0.0; out_channels];
            deconv_backward(x, &w.data, dy, kernel, stride, padding, &mut dx, &mut dw, &mut db);
            add_into(grads.grad_slot(&layer.param_name("weight"), &wshape), &dw);
            add_into(grads.grad_slot(&layer.param_name("bias"), &[out_channels]), &db);
            Ok(dx)
        }
        (&LayerSpec::BatchNorm { channels }, CacheData::BatchNorm { xhat, inv_std, .. }) => {
            check_dy(dy, xhat.rows(), channels, xhat.len())?;
            let gamma = &params.expect(&layer.param_name("gamma"), &[channels])?.data;
            let n = (xhat.rows() * xhat.len()) as f64;
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            let mut sum_dxhat = vec![0.0; channels];
            let mut sum_dxhat_xhat = vec![0.0; channels];
            for r in 0..xhat.rows() {
                for c in 0..channels {
                    for (g, h) in dy.signal(r, c).iter().zip(xhat.signal(r, c)) {
                        dgamma[c] += g * h;
                        dbeta[c] += g;
                    }
                }
            }
            for c in 0..channels {
                sum_dxhat[c] = dbeta[c] * gamma[c];
                sum_dxhat_xhat[c] = dgamma[c] * gamma[c];
            }
            let mut dx = Tensor1d::zeros(xhat.rows(), channels, xhat.len());
            for r in 0..xhat.rows() {
                for c in 0..channels {
                    let k = inv_std[c] / n;
                    let g = gamma[c];
                    let out = dx.signal_mut(r, c);
                    for ((o, d), h) in out.iter_mut().zip(dy.signal(r, c)).zip(xhat.signal(r, c)) {
                        *o = k * (n * d * g - sum_dxhat[c] - h * sum_dxhat_xhat[c]);
                    }
                }
            }
            add_into(grads.grad_slot(&layer.param_name("gamma"), &[channels]), &dgamma);
            add_into(grads.grad_slot(&layer.param_name("beta"), &[channels]), &dbeta);
            Ok(dx)
        }
        (LayerSpec::Relu, CacheData::Relu { x }) => {
            check_dy(dy, x.rows(), x.channels(), x.len())?;
            let mut dx = dy.clone();
            for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
                if *v <= 0.0 {
                    *d = 0.0;
                }
            }
            Ok(dx)
        }
        (&LayerSpec::Elu { alpha }, CacheData::Elu { x, y }) => {
            check_dy(dy, x.rows(), x.channels(), x.len())?;
            let mut dx = dy.clone();
            for ((d, v), out) in dx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                if *v <= 0.0 {
                    *d *= out + alpha;
                }
            }
            Ok(dx)
        }
        (&LayerSpec::AvgPool { factor }, CacheData::Pool { in_len }) => {
            check_dy(dy, dy.rows(), dy.channels(), in_len / factor)?;
            let mut dx = Tensor1d::zeros(dy.rows(), dy.channels(), *in_len);
            let inv = 1.0 / factor as f64;
            for r in 0..dy.rows() {
                for c in 0..dy.channels() {
                    let g = dy.signal(r, c).to_vec();
                    for (chunk, gv) in dx.signal_mut(r, c).chunks_exact_mut(factor).zip(&g) {
                        chunk.fill(gv * inv);
                    }
                }
            }
            Ok(dx)
        }
        (&LayerSpec::SoftmaxAttention { segment }, CacheData::Attention { x, weights }) => {
            check_dy(dy, x.rows(), x.channels(), x.len())?;
            let s = x.len() / segment;
            let mut dx = Tensor1d::zeros(x.rows(), x.channels(), x.len());
            for r in 0..x.rows() {
                for c in 0..x.channels() {
                    let m = x.signal(r, c);
                    let w = &weights[r * x.channels() + c];
                    let (dq, dk, dv) =
                        attention_backward(m, m, m, w, dy.signal(r, c), s, s, segment, segment);
                    for (i, o) in dx.signal_mut(r, c).iter_mut().enumerate() {
                        *o = dq[i] + dk[i] + dv[i];
                    }
                }
            }
            Ok(dx)
        }
        _ => Err(stale()),
    }
}

fn check_dy(dy: &Tensor1d, rows: usize, channels: usize, len: usize) -> Result<()> {
    if dy.shape() != (rows, channels, len) {
        return Err(Error::Shape(format!(
            "upstream gradient has shape {:?}, expected {:?}",
            dy.shape(),
            (rows, channels, len)
        )));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Per-channel mean and population variance over rows and time.
pub fn channel_moments(x: &Tensor1d) -> (Vec<f64>, Vec<f64>) {
    let n = (x.rows() * x.len()) as f64;
    let mut mean = vec![0.0; x.channels()];
    let mut var = vec![0.0; x.channels()];
    for c in 0..x.channels() {
        let mut s = 0.0;
        for r in 0..x.rows() {
            s += x.signal(r, c).iter().sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0;
        for r in 0..x.rows() {
            ss += x.signal(r, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / n;
    }
    (mean, var)
}

// Valid output range [lo, hi) for tap j of a stride-1 correlation.
#[inline]
fn tap_range(j: usize, padding: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(j);
    let hi = (in_len + padding).saturating_sub(j).min(out_len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor1d,
    w: &[f64],
    b: &[f64],
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
) -> Tensor1d {
    let in_ch = x.channels();
    let in_len = x.len();
    let mut y = Tensor1d::zeros(x.rows(), out_ch, out_len);
    for r in 0..x.rows() {
        for o in 0..out_ch {
            let yo = y.signal_mut(r, o);
            yo.fill(b[o]);
            for i in 0..in_ch {
                let xi = x.signal(r, i);
                let wrow = &w[(o * in_ch + i) * kernel..(o * in_ch + i + 1) * kernel];
                for (j, &wv) in wrow.iter().enumerate() {
                    if stride == 1 {
                        let (lo, hi) = tap_range(j, padding, in_len, out_len);
                        let src = &xi[lo + j - padding..hi + j - padding];
                        for (a, s) in yo[lo..hi].iter_mut().zip(src) {
                            *a += wv * s;
                        }
                    } else {
                        for (t, a) in yo.iter_mut().enumerate() {
                            let p = t * stride + j;
                            if p >= padding && p - padding < in_len {
                                *a += wv * xi[p - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor1d,
    w: &[f64],
    dy: &Tensor1d,
    kernel: usize,
    stride: usize,
    padding: usize,
    dx: &mut Tensor1d,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let in_ch = x.channels();
    let in_len = x.len();
    let out_len = dy.len();
    for r in 0..x.rows() {
        for o in 0..dy.channels() {
            let g = dy.signal(r, o);
            db[o] += g.iter().sum::<f64>();
            for i in 0..in_ch {
                let xi = x.signal(r, i);
                let base = (o * in_ch + i) * kernel;
                for j in 0..kernel {
                    let wv = w[base + j];
                    if stride == 1 {
                        let (lo, hi) = tap_range(j, padding, in_len, out_len);
                        let s0 = lo + j - padding;
                        let s1 = hi + j - padding;
                        dw[base + j] += g[lo..hi]
                            .iter()
                            .zip(&xi[s0..s1])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        let dxi = &mut dx.signal_mut(r, i)[s0..s1];
                        for (d, gv) in dxi.iter_mut().zip(&g[lo..hi]) {
                            *d += wv * gv;
                        }
                    } else {
                        let mut acc = 0.0;
                        for (t, gv) in g.iter().enumerate() {
                            let p = t * stride + j;
                            if p >= padding && p - padding < in_len {
                                acc += gv * xi[p - padding];
                                dx.signal_mut(r, i)[p - padding] += wv * gv;
                            }
                        }
                        dw[base + j] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn deconv_forward(
    x: &Tensor1d,
    w: &[f64],
    b: &[f64],
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
) -> Tensor1d {
    let in_ch = x.channels();
    let mut y = Tensor1d::zeros(x.rows(), out_ch, out_len);
    for r in 0..x.rows() {
        for o in 0..out_ch {
            let yo = y.signal_mut(r, o);
            yo.fill(b[o]);
            for i in 0..in_ch {
                let xi = x.signal(r, i);
                let base = (i * out_ch + o) * kernel;
                for j in 0..kernel {
                    let wv = w[base + j];
                    for (t, xv) in xi.iter().enumerate() {
                        let p = t * stride + j;
                        if p >= padding && p - padding < out_len {
                            yo[p - padding] += wv * xv;
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn deconv_backward(
    x: &Tensor1d,
    w: &[f64],
    dy: &Tensor1d,
    kernel: usize,
    stride: usize,
    padding: usize,
    dx: &mut Tensor1d,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let in_ch = x.channels();
    let out_ch = dy.channels();
    let out_len = dy.len();
    for r in 0..x.rows() {
        for o in 0..out_ch {
            let g = dy.signal(r, o);
            db[o] += g.iter().sum::<f64>();
            for i in 0..in_ch {
                let xi = x.signal(r, i);
                let base = (i * out_ch + o) * kernel;
                for j in 0..kernel {
                    let wv = w[base + j];
                    let mut acc = 0.0;
                    let dxi = dx.signal_mut(r, i);
                    for (t, xv) in xi.iter().enumerate() {
                        let p = t * stride + j;
                        if p >= padding && p - padding < out_len {
                            let gv = g[p - padding];
                            acc += xv * gv;
                            dxi[t] += wv * gv;
                        }
                    }
                    dw[base + j] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_layer(weight: Vec<f64>, kernel: usize) -> (Layer, ParamStore) {
        let layer = Layer::new("c", LayerSpec::conv(1, 1, kernel));
        let mut p = ParamStore::new();
        p.insert("c.weight", Param { shape: vec![1, 1, kernel], data: weight, trainable: true });
        p.insert("c.bias", Param::zeros(&[1], true));
        (layer, p)
    }

    fn row(v: &[f64]) -> Tensor1d {
        Tensor1d::from_vec(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let (layer, p) = conv_layer(vec![1.0], 1);
        let x = row(&[0.3, -2.0, 5.0, 1.5]);
        let (y, cache) = forward_layer(&layer, &p, &x, Mode::Train).unwrap();
        assert_eq!(y, x);
        let dy = row(&[1.0, 2.0, 3.0, 4.0]);
        let (dx, _) = backward_layer(&layer, &p, &cache, &dy).unwrap();
        assert_eq!(dx, dy);
    }

    #[test]
    fn difference_kernel_with_zero_padding() {
        let (layer, p) = conv_layer(vec![1.0, 0.0, -1.0], 3);
        let (y, _) = forward_layer(&layer, &p, &row(&[1.0, 2.0, 3.0]), Mode::Infer).unwrap();
        assert_eq!(y.data(), &[-2.0, -2.0, 2.0]);
    }

    #[test]
    fn relu_forward_and_backward() {
        let layer = Layer::new("r", LayerSpec::Relu);
        let p = ParamStore::new();
        let (y, _) = forward_layer(&layer, &p, &row(&[-1.0, 0.0, 2.0]), Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (_, cache) = forward_layer(&layer, &p, &row(&[-1.0, 2.0]), Mode::Train).unwrap();
        let (dx, _) = backward_layer(&layer, &p, &cache, &row(&[5.0, 7.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 7.0]);
    }

    #[test]
    fn conv_and_deconv_lengths() {
        let conv = LayerSpec::Conv1d { in_channels: 1, out_channels: 1, kernel: 5, stride: 2, padding: 2 };
        assert_eq!(conv.out_len(900).unwrap(), 450);
        for s in 1..=3 {
            assert_eq!(LayerSpec::upsample(2, 2, s).out_len(150).unwrap(), 150 * s);
        }
    }

    #[test]
    fn batch_norm_standardizes_in_train_mode() {
        let layer = Layer::new("bn", LayerSpec::BatchNorm { channels: 3 });
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        layer.init_params(&mut p, &mut rng);
        let data: Vec<f64> = (0..2 * 3 * 50).map(|_| rng.gen_range(-3.0..7.0)).collect();
        let x = Tensor1d::from_vec(2, 3, 50, data).unwrap();
        let (y, _) = forward_layer(&layer, &p, &x, Mode::Train).unwrap();
        let (mean, var) = channel_moments(&y);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-6);
            // eps keeps the variance just below one
            assert!((var[c] - 1.0).abs() < 1e-4, "{}", var[c]);
        }
    }

    #[test]
    fn infer_cache_cannot_be_backpropagated() {
        let layer = Layer::new("bn", LayerSpec::BatchNorm { channels: 1 });
        let mut p = ParamStore::new();
        layer.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        let x = row(&[1.0, 2.0, 3.0]);
        let (_, cache) = forward_layer(&layer, &p, &x, Mode::Infer).unwrap();
        assert!(matches!(backward_layer(&layer, &p, &cache, &x), Err(Error::State(_))));
        let other = Layer::new("other", LayerSpec::Relu);
        let (_, rc) = forward_layer(&other, &p, &x, Mode::Train).unwrap();
        assert!(matches!(backward_layer(&layer, &p, &rc, &x), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (layer, p) = conv_layer(vec![1.0], 1);
        let x = Tensor1d::zeros(1, 2, 5);
        assert!(matches!(forward_layer(&layer, &p, &x, Mode::Infer), Err(Error::Shape(_))));
    }

    #[test]
    fn even_conv_kernel_rejected() {
        let spec = LayerSpec::Conv1d { in_channels: 1, out_channels: 1, kernel: 4, stride: 1, padding: 2 };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn attention_layer_rows_sum_to_one() {
        let layer = Layer::new("a", LayerSpec::SoftmaxAttention { segment: 4 });
        let x = Tensor1d::from_vec(1, 2, 16, (0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let (_, cache) = forward_layer(&layer, &ParamStore::new(), &x, Mode::Train).unwrap();
        if let CacheData::Attention { weights, .. } = &cache.data {
            for w in weights {
                for r in w.chunks(4) {
                    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(r.iter().all(|v| *v >= 0.0));
                }
            }
        } else {
            panic!("wrong cache");
        }
    }
}
