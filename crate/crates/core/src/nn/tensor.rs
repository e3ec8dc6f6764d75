use crate::error::{Error, Result};

/// A stack of multichannel 1-D signals, `rows × channels × len`.
///
/// Rows share weights: every layer maps each row independently, except
/// batch normalization, which pools its statistics over rows and time.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor1d {
    rows: usize,
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl Tensor1d {
    pub fn zeros(rows: usize, channels: usize, len: usize) -> Self {
        Self {
            rows,
            channels,
            len,
            data: vec![0.0; rows * channels * len],
        }
    }

    pub fn from_vec(rows: usize, channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || channels == 0 || len == 0 {
            return Err(Error::Shape(format!(
                "empty tensor shape ({rows}, {channels}, {len})"
            )));
        }
        if data.len() != rows * channels * len {
            return Err(Error::Shape(format!(
                "{} values for shape ({rows}, {channels}, {len})",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            channels,
            len,
            data,
        })
    }

    /// Single-row tensor from channel vectors of equal length.
    pub fn from_channels(channels: &[Vec<f64>]) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels of unequal length".into()));
        }
        Self::from_vec(1, channels.len(), len, channels.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.channels, self.len)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, row: usize, channel: usize, t: usize) -> f64 {
        self.data[(row * self.channels + channel) * self.len + t]
    }

    pub fn signal(&self, row: usize, channel: usize) -> &[f64] {
        let s = (row * self.channels + channel) * self.len;
        &self.data[s..s + self.len]
    }

    pub fn signal_mut(&mut self, row: usize, channel: usize) -> &mut [f64] {
        let s = (row * self.channels + channel) * self.len;
        &mut self.data[s..s + self.len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-wise concatenation of tensors sharing rows and length.
    pub fn concat_channels(parts: &[Tensor1d]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (rows, len) = (first.rows, first.len);
        if parts.iter().any(|p| p.rows != rows || p.len != len) {
            return Err(Error::Shape("concatenated tensors disagree on rows/len".into()));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut out = Self::zeros(rows, channels, len);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                for c in 0..p.channels {
                    out.signal_mut(r, c0 + c).copy_from_slice(p.signal(r, c));
                }
                c0 += p.channels;
            }
        }
        Ok(out)
    }

    /// Row-wise concatenation of tensors sharing channels and length.
    pub fn stack_rows(parts: &[Tensor1d]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let (channels, len) = (first.channels, first.len);
        if parts.iter().any(|p| p.channels != channels || p.len != len) {
            return Err(Error::Shape("stacked tensors disagree on channels/len".into()));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Self::from_vec(rows, channels, len, data)
    }

    /// Channels `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Self {
        let mut out = Self::zeros(self.rows, count, self.len);
        for r in 0..self.rows {
            for c in 0..count {
                out.signal_mut(r, c).copy_from_slice(self.signal(r, start + c));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor1d) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
