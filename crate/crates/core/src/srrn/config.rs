use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{default_bands, FrequencyBand};
use crate::stmap::{CHANNELS, DEFAULT_REGIONS};

pub const TMSC_KERNELS: [usize; 3] = [3, 5, 7];
pub const REFINEMENT_BLOCKS: usize = 4;
pub const RECONSTRUCTION_BLOCKS: usize = 3;

/// Network layout. Every region is a row processed with shared weights; the
/// input channels of a row are its 3 map channels followed by 3 channels for
/// each frequency band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrrnConfig {
    pub regions: usize,
    /// Decomposition bands fed alongside the map; empty disables decomposition.
    pub bands: Vec<FrequencyBand>,
    pub stem_kernel: usize,
    pub block_widths: Vec<usize>,
    /// Output width of each TMSC branch, per refinement block.
    pub tmsc_widths: Vec<usize>,
    pub tmsc_kernels: Vec<usize>,
    pub pool_factors: Vec<usize>,
    pub deconv_widths: Vec<usize>,
    pub deconv_strides: Vec<usize>,
    pub ssa_segment_lengths: Vec<usize>,
    pub ssa_hidden: Vec<usize>,
    pub elu_alpha: f64,
}

impl Default for SrrnConfig {
    fn default() -> Self {
        Self {
            regions: DEFAULT_REGIONS,
            bands: default_bands(),
            stem_kernel: 3,
            block_widths: vec![16; 4],
            tmsc_widths: vec![5; 4],
            tmsc_kernels: TMSC_KERNELS.to_vec(),
            pool_factors: vec![2, 1, 1, 1],
            deconv_widths: vec![16, 16, 12],
            deconv_strides: vec![1, 1, 2],
            ssa_segment_lengths: vec![15, 15, 30],
            ssa_hidden: vec![4, 4, 3],
            elu_alpha: 1.0,
        }
    }
}

impl SrrnConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same layout with the decomposition switched off.
    pub fn without_bands(&self) -> Self {
        Self {
            bands: Vec::new(),
            ..self.clone()
        }
    }

    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn input_channels(&self) -> usize {
        CHANNELS * (1 + self.bands.len())
    }

    pub fn total_pool(&self) -> usize {
        self.pool_factors.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let lens = [
            ("block_widths", self.block_widths.len(), REFINEMENT_BLOCKS),
            ("tmsc_widths", self.tmsc_widths.len(), REFINEMENT_BLOCKS),
            ("pool_factors", self.pool_factors.len(), REFINEMENT_BLOCKS),
            ("deconv_widths", self.deconv_widths.len(), RECONSTRUCTION_BLOCKS),
            ("deconv_strides", self.deconv_strides.len(), RECONSTRUCTION_BLOCKS),
            ("ssa_segment_lengths", self.ssa_segment_lengths.len(), RECONSTRUCTION_BLOCKS),
            ("ssa_hidden", self.ssa_hidden.len(), RECONSTRUCTION_BLOCKS),
        ];
        for (name, got, want) in lens {
            if got != want {
                return bad(format!("{name} needs {want} entries, got {got}"));
            }
        }
        if self.tmsc_kernels != TMSC_KERNELS {
            return bad(format!("tmsc_kernels must be {TMSC_KERNELS:?}"));
        }
        if self.regions == 0 {
            return bad("regions must be >= 1".into());
        }
        if self.stem_kernel % 2 == 0 {
            return bad(format!("stem_kernel must be odd, got {}", self.stem_kernel));
        }
        let all = [
            &self.block_widths,
            &self.tmsc_widths,
            &self.pool_factors,
            &self.deconv_widths,
            &self.deconv_strides,
            &self.ssa_segment_lengths,
            &self.ssa_hidden,
        ];
        if all.iter().any(|v| v.contains(&0)) {
            return bad("widths, factors, strides and segment lengths must be >= 1".into());
        }
        let up: usize = self.deconv_strides.iter().product();
        if up != self.total_pool() {
            return bad(format!(
                "deconv strides upsample by {up} but pooling downsamples by {}",
                self.total_pool()
            ));
        }
        if !(self.elu_alpha > 0.0) {
            return bad(format!("elu_alpha must be > 0, got {}", self.elu_alpha));
        }
        let mut sorted = self.bands.clone();
        sorted.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        for b in &sorted {
            if !(b.lo >= 0.0 && b.lo < b.hi) {
                return bad(format!("invalid band [{}, {})", b.lo, b.hi));
            }
        }
        if sorted.windows(2).any(|w| w[1].lo < w[0].hi) {
            return bad("bands overlap".into());
        }
        Ok(())
    }

    /// Feature length entering each reconstruction block's attention stage.
    pub fn ssa_lengths(&self, frames: usize) -> Vec<usize> {
        let mut len = frames / self.total_pool();
        self.deconv_strides
            .iter()
            .map(|s| {
                len *= s;
                len
            })
            .collect()
    }

    /// Checks that a clip of `frames` samples passes through every pooling
    /// and segmentation stage without remainder.
    pub fn check_frames(&self, frames: usize) -> Result<()> {
        let mut len = frames;
        for (j, f) in self.pool_factors.iter().enumerate() {
            if len == 0 || len % f != 0 {
                return Err(Error::Config(format!(
                    "{frames} frames: length {len} at refinement block {j} is not divisible by pool factor {f}"
                )));
            }
            len /= f;
        }
        for (m, (l, seg)) in self
            .ssa_lengths(frames)
            .into_iter()
            .zip(&self.ssa_segment_lengths)
            .enumerate()
        {
            if l % seg != 0 {
                return Err(Error::Config(format!(
                    "{frames} frames: length {l} at reconstruction block {m} is not divisible by segment length {seg}"
                )));
            }
        }
        Ok(())
    }

    /// Largest valid clip length not exceeding `frames`.
    pub fn fit_frames(&self, frames: usize) -> Option<usize> {
        (1..=frames).rev().find(|&t| self.check_frames(t).is_ok())
    }
}
