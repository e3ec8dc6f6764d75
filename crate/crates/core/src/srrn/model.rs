use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::SrrnConfig;
use super::ssa::{Ssa, SsaCache};
use crate::bvp::BvpSignal;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::gradcheck::Differentiable;
use crate::nn::layers::{
    backward_into, forward_layer, BnStats, CacheData, Layer, LayerCache, LayerSpec, Mode,
};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor1d;
use crate::spectral::{decompose, MultiBandSignal};
use crate::stmap::{SpatialTemporalMap, CHANNELS};

/// Temporal multi-scale convolution: parallel same-length convolutions with
/// kernels 3, 5 and 7 whose outputs are concatenated along channels.
#[derive(Debug, Clone)]
pub struct Tmsc {
    pub name: String,
    pub branches: Vec<Layer>,
}

impl Tmsc {
    pub fn new(name: &str, in_channels: usize, branch_width: usize, kernels: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            branches: kernels
                .iter()
                .map(|&k| Layer::new(format!("{name}.k{k}"), LayerSpec::conv(in_channels, branch_width, k)))
                .collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.branches.len() * self.branch_width()
    }

    fn branch_width(&self) -> usize {
        match self.branches[0].spec {
            LayerSpec::Conv1d { out_channels, .. } => out_channels,
            _ => unreachable!("TMSC branches are convolutions"),
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor1d, mode: Mode) -> Result<(Tensor1d, Vec<LayerCache>)> {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (y, c) = forward_layer(b, params, x, mode)?;
            outs.push(y);
            caches.push(c);
        }
        Ok((Tensor1d::concat_channels(&outs)?, caches))
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        caches: &[LayerCache],
        dy: &Tensor1d,
        grads: &mut ParamStore,
    ) -> Result<Tensor1d> {
        let w = self.branch_width();
        let mut dx: Option<Tensor1d> = None;
        for (i, (b, c)) in self.branches.iter().zip(caches).enumerate() {
            let part = dy.slice_channels(i * w, w);
            let d = backward_into(b, params, c, &part, grads)?;
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&d),
                None => dx = Some(d),
            }
        }
        dx.ok_or_else(|| Error::State(format!("{} has no branches", self.name)))
    }
}

#[derive(Debug, Clone)]
pub enum Stage {
    Layer(Layer),
    Tmsc(Tmsc),
    Ssa(Ssa),
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Layer(l) => &l.name,
            Stage::Tmsc(t) => &t.name,
            Stage::Ssa(s) => &s.name,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            Stage::Layer(l) => vec![l],
            Stage::Tmsc(t) => t.branches.iter().collect(),
            Stage::Ssa(s) => s.layers().to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum StageCache {
    Layer(LayerCache),
    Tmsc(Vec<LayerCache>),
    Ssa(Box<SsaCache>),
}

/// Everything a forward pass keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub stages: Vec<StageCache>,
    regions: usize,
    items: usize,
}

impl ForwardCache {
    /// Batch statistics of every BN layer, in network order.
    pub fn bn_stats(&self) -> Vec<BnStats> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                StageCache::Layer(c) => c.bn_stats().cloned(),
                _ => None,
            })
            .collect()
    }

    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let mut push = |c: &LayerCache| {
            if let CacheData::Relu { x } | CacheData::Elu { x, .. } = &c.data {
                out.extend(x.data().iter().map(|v| *v > 0.0));
            }
        };
        for s in &self.stages {
            match s {
                StageCache::Layer(c) => push(c),
                StageCache::Tmsc(_) => {}
                StageCache::Ssa(c) => c.kink_layers().into_iter().for_each(&mut push),
            }
        }
        out
    }

    pub fn ssa_caches(&self) -> impl Iterator<Item = &SsaCache> {
        self.stages.iter().filter_map(|s| match s {
            StageCache::Ssa(c) => Some(c.as_ref()),
            _ => None,
        })
    }
}

/// The ordered stages of the network; the final stage is the 1-channel head,
/// whose outputs are averaged over each item's regions.
pub fn architecture(cfg: &SrrnConfig) -> Vec<Stage> {
    let mut stages = Vec::new();
    let mut ch = cfg.input_channels();
    for j in 0..cfg.block_widths.len() {
        let w = cfg.block_widths[j];
        let p = format!("refine{j}");
        stages.push(Stage::Layer(Layer::new(
            format!("{p}.conv"),
            LayerSpec::conv(ch, w, cfg.stem_kernel),
        )));
        stages.push(Stage::Layer(Layer::new(format!("{p}.bn"), LayerSpec::BatchNorm { channels: w })));
        stages.push(Stage::Layer(Layer::new(format!("{p}.relu"), LayerSpec::Relu)));
        let tmsc = Tmsc::new(&format!("{p}.tmsc"), w, cfg.tmsc_widths[j], &cfg.tmsc_kernels);
        ch = cfg.tmsc_widths[j] * cfg.tmsc_kernels.len();
        stages.push(Stage::Tmsc(tmsc));
        if cfg.pool_factors[j] > 1 {
            stages.push(Stage::Layer(Layer::new(
                format!("{p}.pool"),
                LayerSpec::AvgPool { factor: cfg.pool_factors[j] },
            )));
        }
    }
    for m in 0..cfg.deconv_widths.len() {
        let w = cfg.deconv_widths[m];
        let p = format!("recon{m}");
        stages.push(Stage::Layer(Layer::new(
            format!("{p}.deconv"),
            LayerSpec::upsample(ch, w, cfg.deconv_strides[m]),
        )));
        stages.push(Stage::Layer(Layer::new(format!("{p}.bn"), LayerSpec::BatchNorm { channels: w })));
        stages.push(Stage::Layer(Layer::new(
            format!("{p}.elu"),
            LayerSpec::Elu { alpha: cfg.elu_alpha },
        )));
        stages.push(Stage::Ssa(Ssa::new(
            &format!("{p}.ssa"),
            w,
            cfg.ssa_hidden[m],
            cfg.ssa_segment_lengths[m],
            cfg.elu_alpha,
        )));
        ch = w;
    }
    stages.push(Stage::Layer(Layer::new("head", LayerSpec::conv(ch, 1, 1))));
    stages
}

#[derive(Debug, Clone)]
pub struct SrrnModel {
    pub config: SrrnConfig,
    pub params: ParamStore,
    stages: Vec<Stage>,
}

impl SrrnModel {
    pub fn new(config: SrrnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stages = architecture(&config);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for st in &stages {
            for l in st.layers() {
                l.spec.validate()?;
                l.init_params(&mut params, &mut rng);
            }
        }
        Ok(Self {
            config,
            params,
            stages,
        })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_parts(config: SrrnConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let stages = architecture(&config);
        let mut expected = 0;
        for st in &stages {
            for l in st.layers() {
                l.check_params(&params)?;
                expected += l.spec.param_count();
            }
        }
        if params.trainable_count() != expected {
            return Err(Error::Schema(format!(
                "checkpoint holds {} trainable values, layout needs {expected}",
                params.trainable_count()
            )));
        }
        Ok(Self {
            config,
            params,
            stages,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Maps a `(B · regions) × input_channels × T` tensor, B items stacked
    /// region by region, to a `B × 1 × T` tensor of waveforms. In training
    /// mode BN statistics pool over every row of the stack, that is over the
    /// whole batch.
    pub fn forward(&self, x: &Tensor1d, mode: Mode) -> Result<(Tensor1d, ForwardCache)> {
        if x.channels() != self.config.input_channels() {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.config.input_channels(),
                x.channels()
            )));
        }
        let regions = self.config.regions;
        if x.rows() == 0 || x.rows() % regions != 0 {
            return Err(Error::Shape(format!(
                "{} input rows are not a whole number of {regions}-region items",
                x.rows()
            )));
        }
        self.config.check_frames(x.len())?;
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for st in &self.stages {
            let (y, c) = match st {
                Stage::Layer(l) => {
                    let (y, c) = forward_layer(l, &self.params, &h, mode)?;
                    (y, StageCache::Layer(c))
                }
                Stage::Tmsc(t) => {
                    let (y, c) = t.forward(&self.params, &h, mode)?;
                    (y, StageCache::Tmsc(c))
                }
                Stage::Ssa(s) => {
                    let (y, c) = s.forward(&self.params, &h, mode)?;
                    (y, StageCache::Ssa(Box::new(c)))
                }
            };
            caches.push(c);
            h = y;
        }
        let items = h.rows() / regions;
        let mut out = Tensor1d::zeros(items, 1, h.len());
        let inv = 1.0 / regions as f64;
        for r in 0..h.rows() {
            for (o, v) in out.signal_mut(r / regions, 0).iter_mut().zip(h.signal(r, 0)) {
                *o += v * inv;
            }
        }
        Ok((
            out,
            ForwardCache {
                stages: caches,
                regions,
                items,
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache, dy: &Tensor1d) -> Result<(Tensor1d, ParamStore)> {
        if cache.stages.len() != self.stages.len() {
            return Err(Error::State("forward cache does not match this model".into()));
        }
        if dy.rows() != cache.items || dy.channels() != 1 {
            return Err(Error::Shape(format!(
                "output gradient must be {}×1×T, got {:?}",
                cache.items,
                dy.shape()
            )));
        }
        let inv = 1.0 / cache.regions as f64;
        let rows = cache.items * cache.regions;
        let mut g = Tensor1d::zeros(rows, 1, dy.len());
        for r in 0..rows {
            for (o, v) in g.signal_mut(r, 0).iter_mut().zip(dy.signal(r / cache.regions, 0)) {
                *o = v * inv;
            }
        }
        let mut grads = ParamStore::new();
        for (st, c) in self.stages.iter().zip(&cache.stages).rev() {
            g = match (st, c) {
                (Stage::Layer(l), StageCache::Layer(c)) => backward_into(l, &self.params, c, &g, &mut grads)?,
                (Stage::Tmsc(t), StageCache::Tmsc(c)) => t.backward(&self.params, c, &g, &mut grads)?,
                (Stage::Ssa(s), StageCache::Ssa(c)) => s.backward(&self.params, c, &g, &mut grads)?,
                _ => return Err(Error::State(format!("stale cache at stage {}", st.name()))),
            };
        }
        Ok((g, grads))
    }

    /// Writes the configuration and every parameter to `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let config = serde_json::to_value(&self.config)
            .map_err(|e| Error::Schema(format!("cannot serialize config: {e}")))?;
        save_checkpoint(dir, &config, &self.params)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (config, params) = load_checkpoint(dir)?;
        let config: SrrnConfig = serde_json::from_value(config).map_err(|e| {
            Error::Schema(format!("{}: invalid model config: {e}", dir.display()))
        })?;
        Self::from_parts(config, params)
    }

    /// Runs a preprocessed map through decomposition and the network in
    /// inference mode.
    pub fn infer(&self, map: &SpatialTemporalMap) -> Result<BvpSignal> {
        let x = prepare_input(map, &self.config)?;
        let (y, _) = self.forward(&x, Mode::Infer)?;
        BvpSignal::new(y.into_data(), map.sample_rate())
    }
}

/// Stacks map channels and band channels per region: row `r` holds the
/// map's 3 channels, then 3 channels for each band in order.
pub fn assemble_input(map: &SpatialTemporalMap, bands: Option<&MultiBandSignal>) -> Result<Tensor1d> {
    let k = bands.map_or(0, MultiBandSignal::num_bands);
    if let Some(b) = bands {
        if b.regions != map.regions() || b.frames != map.frames() {
            return Err(Error::Shape("band signals do not match the map".into()));
        }
    }
    let ch = CHANNELS * (1 + k);
    let mut x = Tensor1d::zeros(map.regions(), ch, map.frames());
    for r in 0..map.regions() {
        for c in 0..CHANNELS {
            x.signal_mut(r, c).copy_from_slice(map.trace(r, c));
            for band in 0..k {
                let src = bands.expect("k > 0 implies bands").trace(band, r, c);
                x.signal_mut(r, CHANNELS * (1 + band) + c).copy_from_slice(src);
            }
        }
    }
    Ok(x)
}

/// Decomposes a preprocessed map with the configured bands and assembles
/// the network input.
pub fn prepare_input(map: &SpatialTemporalMap, cfg: &SrrnConfig) -> Result<Tensor1d> {
    if !map.is_normalized() {
        return Err(Error::State("network input must be a preprocessed (normalized) map".into()));
    }
    if map.regions() != cfg.regions {
        return Err(Error::Shape(format!(
            "model configured for {} regions, map has {}",
            cfg.regions,
            map.regions()
        )));
    }
    if cfg.bands.is_empty() {
        return assemble_input(map, None);
    }
    let bands = decompose(map, &cfg.bands)?;
    assemble_input(map, Some(&bands))
}

/// Network forward over a preprocessed map.
pub fn srrn_forward(map: &SpatialTemporalMap, bands: Option<&MultiBandSignal>, model: &SrrnModel, mode: Mode) -> Result<BvpSignal> {
    if bands.map_or(0, MultiBandSignal::num_bands) != model.config.num_bands() {
        return Err(Error::Config(format!(
            "model expects {} bands",
            model.config.num_bands()
        )));
    }
    let x = assemble_input(map, bands)?;
    let (y, _) = model.forward(&x, mode)?;
    BvpSignal::new(y.into_data(), map.sample_rate())
}

impl Differentiable for SrrnModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward_train(&self, x: &Tensor1d) -> Result<Tensor1d> {
        Ok(self.forward(x, Mode::Train)?.0)
    }

    fn gradients(&self, x: &Tensor1d, dy: &Tensor1d) -> Result<(Tensor1d, ParamStore)> {
        let (_, cache) = self.forward(x, Mode::Train)?;
        self.backward(&cache, dy)
    }

    fn kink_pattern(&self, x: &Tensor1d) -> Result<Vec<bool>> {
        Ok(self.forward(x, Mode::Train)?.1.kink_pattern())
    }
}
