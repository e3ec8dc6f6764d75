//! Scaled dot-product attention over small dense matrices.
//!
//! Matrices are row-major slices: `q` is `nq × d`, `k` is `nk × d`, `v` is
//! `nk × dv`. Each attention row is a softmax, so it is non-negative and
//! sums to one.

use super::tensor::Tensor1d;
use crate::error::{Error, Result};

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows(logits: &mut [f64], cols: usize) {
    for row in logits.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Returns `(output, weights)` with `weights = softmax(q kᵀ / √d)` and
/// `output = weights · v`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; nq * nk];
    for i in 0..nq {
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..nk {
            let kj = &k[j * d..(j + 1) * d];
            weights[i * nk + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    softmax_rows(&mut weights, nk);
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let oi = &mut out[i * dv..(i + 1) * dv];
        for j in 0..nk {
            let w = weights[i * nk + j];
            for (o, vv) in oi.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += w * vv;
            }
        }
    }
    (out, weights)
}

/// Gradients `(dq, dk, dv)` of the attention map given `dout`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    dout: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dvv = vec![0.0; nk * dv];
    let mut dw = vec![0.0; nk];
    for i in 0..nq {
        let doi = &dout[i * dv..(i + 1) * dv];
        let wi = &weights[i * nk..(i + 1) * nk];
        for j in 0..nk {
            let vj = &v[j * dv..(j + 1) * dv];
            dw[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
            for (g, o) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(doi) {
                *g += wi[j] * o;
            }
        }
        let dot: f64 = wi.iter().zip(&dw).map(|(a, b)| a * b).sum();
        for j in 0..nk {
            let dlogit = wi[j] * (dw[j] - dot) * scale;
            if dlogit == 0.0 {
                continue;
            }
            for t in 0..d {
                dq[i * d + t] += dlogit * k[j * d + t];
                dk[j * d + t] += dlogit * q[i * d + t];
            }
        }
    }
    (dq, dk, dvv)
}

/// `softmax(q kᵀ / √d) v` for every row of the inputs. Channels index the
/// query/key/value vectors; `len` is their dimension.
pub fn sdp_attention(q: &Tensor1d, k: &Tensor1d, v: &Tensor1d) -> Result<Tensor1d> {
    if q.len() != k.len() {
        return Err(Error::Shape(format!(
            "query dim {} differs from key dim {}",
            q.len(),
            k.len()
        )));
    }
    if k.channels() != v.channels() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.channels(),
            v.channels()
        )));
    }
    if q.rows() != k.rows() || k.rows() != v.rows() {
        return Err(Error::Shape("q, k, v disagree on rows".into()));
    }
    let (nq, nk, d, dv) = (q.channels(), k.channels(), q.len(), v.len());
    let mut data = Vec::with_capacity(q.rows() * nq * dv);
    for r in 0..q.rows() {
        let block = |t: &Tensor1d| {
            let n = t.channels() * t.len();
            t.data()[r * n..(r + 1) * n].to_vec()
        };
        let (out, _) = attention_forward(&block(q), &block(k), &block(v), nq, nk, d, dv);
        data.extend(out);
    }
    Tensor1d::from_vec(q.rows(), nq, dv, data)
}
