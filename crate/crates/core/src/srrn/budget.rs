use std::fmt::Write as _;

use serde::Serialize;

use super::config::SrrnConfig;
use super::model::{architecture, Stage};
use crate::error::Result;

/// FLOPs are counted as 2 per multiply-accumulate. Normalization, activation
/// and pooling layers carry no MACs and are listed with zero.
pub const FLOPS_PER_MAC: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetItem {
    pub layer: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub frames: usize,
    pub items: Vec<BudgetItem>,
    pub total_params: usize,
    pub total_flops: u64,
}

/// Learnable parameters, BN running statistics excluded.
pub fn count_params(cfg: &SrrnConfig) -> usize {
    architecture(cfg)
        .iter()
        .flat_map(|s| s.layers())
        .map(|l| l.spec.param_count())
        .sum()
}

/// Per-layer FLOPs of one forward pass over a `frames`-sample clip with
/// `cfg.regions` rows.
pub fn count_flops(cfg: &SrrnConfig, frames: usize) -> Result<FlopReport> {
    cfg.validate()?;
    cfg.check_frames(frames)?;
    let rows = cfg.regions;
    let mut ch = cfg.input_channels();
    let mut len = frames;
    let mut items = Vec::new();
    for st in architecture(cfg) {
        match &st {
            Stage::Layer(l) => {
                let macs = l.spec.macs(rows, len)?;
                items.push(BudgetItem {
                    layer: l.name.clone(),
                    params: l.spec.param_count(),
                    flops: FLOPS_PER_MAC * macs as u64,
                });
                ch = l.spec.out_channels(ch)?;
                len = l.spec.out_len(len)?;
            }
            Stage::Tmsc(t) => {
                for b in &t.branches {
                    items.push(BudgetItem {
                        layer: b.name.clone(),
                        params: b.spec.param_count(),
                        flops: FLOPS_PER_MAC * b.spec.macs(rows, len)? as u64,
                    });
                }
                ch = t.out_channels();
            }
            Stage::Ssa(s) => {
                let params = s.layers().iter().map(|l| l.spec.param_count()).sum();
                items.push(BudgetItem {
                    layer: s.name.clone(),
                    params,
                    flops: FLOPS_PER_MAC * s.macs(rows, ch, len)? as u64,
                });
            }
        }
    }
    let total_params = items.iter().map(|i| i.params).sum();
    let total_flops = items.iter().map(|i| i.flops).sum();
    Ok(FlopReport {
        frames,
        items,
        total_params,
        total_flops,
    })
}

impl FlopReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>8} {:>14}", "layer", "params", "flops");
        for i in &self.items {
            let _ = writeln!(s, "{:<22} {:>8} {:>14}", i.layer, i.params, i.flops);
        }
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>14}  ({:.3e} FLOPs, T = {})",
            "total", self.total_params, self.total_flops, self.total_flops as f64, self.frames
        );
        s
    }
}
