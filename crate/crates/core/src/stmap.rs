//! Spatial-temporal maps: per-region, per-channel mean color traces of a
//! face clip, plus the preprocessing chain applied before decomposition
//! (color conversion, temporal normalization, white-noise augmentation).

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of color channels per region.
pub const CHANNELS: usize = 3;

/// Default number of facial regions.
pub const DEFAULT_REGIONS: usize = 4;

/// Default augmentation noise std (normalized units).
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

/// Rows of the modified-YUV conversion, applied to column vectors (R, G, B).
pub const MODIFIED_YUV: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.169, -0.331, 0.5],
    [0.5, -0.419, -0.081],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    ModifiedYuv,
}

/// Mean pixel intensity of one region in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorTriple {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl ColorTriple {
    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.r, self.g, self.b] {
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite color value {v}")));
            }
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::Data(format!("color value {v} outside [0, 255]")));
            }
        }
        Ok(())
    }

    /// Applies the modified-YUV matrix; the result is (Y, U, V).
    pub fn to_modified_yuv(self) -> [f64; 3] {
        let x = [self.r, self.g, self.b];
        MODIFIED_YUV.map(|row| row[0] * x[0] + row[1] * x[1] + row[2] * x[2])
    }
}

/// `regions × 3 × frames` array of traces, stored region-major then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTemporalMap {
    regions: usize,
    frames: usize,
    sample_rate: f64,
    color_space: ColorSpace,
    normalized: bool,
    data: Vec<f64>,
}

impl SpatialTemporalMap {
    /// Builds a map from raw data laid out as `[region][channel][frame]`.
    pub fn new(
        regions: usize,
        sample_rate: f64,
        color_space: ColorSpace,
        data: Vec<f64>,
    ) -> Result<Self> {
        if regions == 0 {
            return Err(Error::Argument("a map needs at least one region".into()));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::Argument(format!("invalid sample rate {sample_rate}")));
        }
        if data.len() % (regions * CHANNELS) != 0 {
            return Err(Error::Shape(format!(
                "{} values do not split into {regions} regions x {CHANNELS} channels",
                data.len()
            )));
        }
        let frames = data.len() / (regions * CHANNELS);
        let required = min_frames(sample_rate);
        if frames < required || frames < 2 {
            return Err(Error::TooShort {
                frames,
                sample_rate,
                required,
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value {v} in map")));
        }
        Ok(Self {
            regions,
            frames,
            sample_rate,
            color_space,
            normalized: false,
            data,
        })
    }

    /// Builds an RGB map from per-frame color triples, `frames[t][region]`.
    pub fn from_rgb_frames(frames: &[Vec<ColorTriple>], sample_rate: f64) -> Result<Self> {
        let regions = frames.first().map_or(0, Vec::len);
        let t_len = frames.len();
        let mut data = vec![0.0; regions * CHANNELS * t_len];
        for (t, row) in frames.iter().enumerate() {
            if row.len() != regions {
                return Err(Error::Schema(format!(
                    "frame {t} has {} regions, expected {regions}",
                    row.len()
                )));
            }
            for (i, c) in row.iter().enumerate() {
                c.validate()?;
                data[(i * CHANNELS) * t_len + t] = c.r;
                data[(i * CHANNELS + 1) * t_len + t] = c.g;
                data[(i * CHANNELS + 2) * t_len + t] = c.b;
            }
        }
        Self::new(regions, sample_rate, ColorSpace::Rgb, data)
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames as f64 / self.sample_rate
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self, region: usize, channel: usize) -> &[f64] {
        let start = (region * CHANNELS + channel) * self.frames;
        &self.data[start..start + self.frames]
    }

    pub fn trace_mut(&mut self, region: usize, channel: usize) -> &mut [f64] {
        let start = (region * CHANNELS + channel) * self.frames;
        &mut self.data[start..start + self.frames]
    }

    pub fn traces(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.frames)
    }

    fn traces_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_exact_mut(self.frames)
    }

    /// The first `frames` frames of the clip.
    pub fn truncate(&self, frames: usize) -> Result<Self> {
        if frames > self.frames {
            return Err(Error::Argument(format!(
                "cannot truncate {} frames to {frames}",
                self.frames
            )));
        }
        let data = self
            .traces()
            .flat_map(|tr| tr[..frames].iter().copied())
            .collect();
        let mut out = Self::new(self.regions, self.sample_rate, self.color_space, data)?;
        out.normalized = false;
        Ok(out)
    }

    /// Writes the map in the ingestion CSV layout.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        write!(w, "frame").map_err(io)?;
        for i in 1..=self.regions {
            write!(w, ",r{i}_R,r{i}_G,r{i}_B").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for t in 0..self.frames {
            write!(w, "{t}").map_err(io)?;
            for i in 0..self.regions {
                for c in 0..CHANNELS {
                    write!(w, ",{}", self.trace(i, c)[t]).map_err(io)?;
                }
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Minimum clip length accepted at a given rate: two seconds.
pub fn min_frames(sample_rate: f64) -> usize {
    (2.0 * sample_rate).ceil() as usize
}

fn expected_header(regions: usize) -> Vec<String> {
    let mut h = vec!["frame".to_string()];
    for i in 1..=regions {
        for c in ["R", "G", "B"] {
            h.push(format!("r{i}_{c}"));
        }
    }
    h
}

/// Reads a map from CSV. Header `frame,r1_R,r1_G,r1_B,...,rI_B`, one row per
/// frame, values in [0, 255].
pub fn load_stmap(path: &Path, sample_rate: f64) -> Result<SpatialTemporalMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_stmap(file, sample_rate)
}

pub fn read_stmap<R: std::io::Read>(reader: R, sample_rate: f64) -> Result<SpatialTemporalMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 4 || (header.len() - 1) % CHANNELS != 0 {
        return Err(Error::Schema(format!(
            "header has {} columns; expected frame + 3 per region",
            header.len()
        )));
    }
    let regions = (header.len() - 1) / CHANNELS;
    if header != expected_header(regions) {
        return Err(Error::Schema(format!(
            "unexpected header {:?}",
            header.join(",")
        )));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); regions * CHANNELS];
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Schema(format!("row {}: {e}", row_idx + 1)))?;
        if rec.len() != header.len() {
            return Err(Error::Schema(format!(
                "row {} has {} fields, expected {}",
                row_idx + 1,
                rec.len(),
                header.len()
            )));
        }
        for (col, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!("row {}: cannot parse {field:?}", row_idx + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {}: non-finite value", row_idx + 1)));
            }
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::Data(format!(
                    "row {}: value {v} outside [0, 255]",
                    row_idx + 1
                )));
            }
            columns[col].push(v);
        }
    }
    let data = columns.into_iter().flatten().collect();
    SpatialTemporalMap::new(regions, sample_rate, ColorSpace::Rgb, data)
}

/// Converts an RGB map to the modified YUV space, frame by frame.
pub fn csc_modified_yuv(map: &SpatialTemporalMap) -> Result<SpatialTemporalMap> {
    if map.color_space != ColorSpace::Rgb {
        return Err(Error::State(
            "color conversion expects an RGB map".to_string(),
        ));
    }
    let mut out = map.clone();
    out.color_space = ColorSpace::ModifiedYuv;
    for i in 0..map.regions {
        let (r, g, b) = (map.trace(i, 0), map.trace(i, 1), map.trace(i, 2));
        for (c, row) in MODIFIED_YUV.iter().enumerate() {
            let dst = out.trace_mut(i, c);
            for t in 0..dst.len() {
                dst[t] = row[0] * r[t] + row[1] * g[t] + row[2] * b[t];
            }
        }
    }
    Ok(out)
}

/// Zero mean, unit sample std per trace; constant traces become zeros.
pub fn normalize_trace(trace: &mut [f64]) {
    let n = trace.len() as f64;
    let mean = trace.iter().sum::<f64>() / n;
    let var = trace.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        trace.fill(0.0);
        return;
    }
    for v in trace.iter_mut() {
        *v = (*v - mean) / std;
    }
}

pub fn temporal_normalize(map: &SpatialTemporalMap) -> SpatialTemporalMap {
    let mut out = map.clone();
    out.traces_mut().for_each(normalize_trace);
    out.normalized = true;
    out
}

/// Adds i.i.d. zero-mean Gaussian noise of std `sigma` to every sample.
/// Every channel receives the same variance.
pub fn add_white_noise(
    map: &SpatialTemporalMap,
    sigma: f64,
    seed: u64,
) -> Result<SpatialTemporalMap> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if !map.normalized {
        return Err(Error::State(
            "white noise is added after temporal normalization".into(),
        ));
    }
    let mut out = map.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for v in out.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Conversion plus normalization, the inference-time preprocessing.
pub fn preprocess(map: &SpatialTemporalMap) -> Result<SpatialTemporalMap> {
    let yuv = match map.color_space {
        ColorSpace::Rgb => csc_modified_yuv(map)?,
        ColorSpace::ModifiedYuv => map.clone(),
    };
    Ok(temporal_normalize(&yuv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csv_text(rows: usize, regions: usize) -> String {
        let mut s = String::from("frame");
        for i in 1..=regions {
            s += &format!(",r{i}_R,r{i}_G,r{i}_B");
        }
        s.push('\n');
        for t in 0..rows {
            s += &t.to_string();
            for k in 0..regions * 3 {
                s += &format!(",{}", 100.0 + ((t + k) % 7) as f64);
            }
            s.push('\n');
        }
        s
    }

    fn map_from_traces(traces: &[Vec<f64>], fs: f64, cs: ColorSpace) -> SpatialTemporalMap {
        let regions = traces.len() / 3;
        SpatialTemporalMap::new(regions, fs, cs, traces.concat()).unwrap()
    }

    #[test]
    fn loads_900_rows_four_regions() {
        let m = read_stmap(csv_text(900, 4).as_bytes(), 30.0).unwrap();
        assert_eq!(m.regions(), 4);
        assert_eq!(m.frames(), 900);
        assert_eq!(m.color_space(), ColorSpace::Rgb);
    }

    #[test]
    fn loads_fifteen_second_clip() {
        let m = read_stmap(csv_text(450, 4).as_bytes(), 30.0).unwrap();
        assert_eq!(m.frames(), 450);
        assert!((m.duration_secs() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn one_second_clip_is_too_short() {
        let err = read_stmap(csv_text(30, 4).as_bytes(), 30.0).unwrap_err();
        assert!(matches!(err, Error::TooShort { frames: 30, .. }), "{err}");
    }

    #[test]
    fn ragged_row_is_schema_error() {
        let mut s = csv_text(100, 1);
        s += "100,1,2\n";
        let err = read_stmap(s.as_bytes(), 10.0).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn bad_values_are_data_errors() {
        for bad in ["NaN", "inf", "300", "-1", "abc"] {
            let mut s = csv_text(100, 1);
            s += &format!("100,1,{bad},3\n");
            let err = read_stmap(s.as_bytes(), 10.0).unwrap_err();
            assert!(matches!(err, Error::Data(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let m = read_stmap(csv_text(64, 2).as_bytes(), 16.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        m.write_csv(&p).unwrap();
        assert_eq!(load_stmap(&p, 16.0).unwrap(), m);
    }

    #[test]
    fn modified_yuv_reference_values() {
        let white = ColorTriple::new(1.0, 1.0, 1.0).to_modified_yuv();
        assert!((white[0] - 1.0).abs() < 1e-12);
        assert!(white[1].abs() < 1e-12 && white[2].abs() < 1e-12);
        assert_eq!(ColorTriple::new(0.0, 0.0, 0.0).to_modified_yuv(), [0.0; 3]);
        // 255 * first column of the matrix
        let red = ColorTriple::new(255.0, 0.0, 0.0).to_modified_yuv();
        let expect = [76.245, -43.095, 127.5];
        for k in 0..3 {
            assert!((red[k] - expect[k]).abs() < 1e-9, "{red:?}");
        }
    }

    #[test]
    fn csc_rejects_converted_map() {
        let m = map_from_traces(&vec![vec![1.0, 2.0, 3.0, 4.0]; 3], 1.0, ColorSpace::Rgb);
        let yuv = csc_modified_yuv(&m).unwrap();
        assert_eq!(yuv.color_space(), ColorSpace::ModifiedYuv);
        assert!(matches!(csc_modified_yuv(&yuv), Err(Error::State(_))));
    }

    #[test]
    fn normalize_examples() {
        let mut t = vec![1.0, 2.0, 3.0];
        normalize_trace(&mut t);
        assert_eq!(t, vec![-1.0, 0.0, 1.0]);
        let mut c = vec![5.0; 4];
        normalize_trace(&mut c);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn noise_zero_sigma_and_determinism() {
        let traces: Vec<Vec<f64>> = (0..12)
            .map(|k| (0..900).map(|t| ((t * (k + 1)) as f64 * 0.01).sin()).collect())
            .collect();
        let m = temporal_normalize(&map_from_traces(&traces, 30.0, ColorSpace::ModifiedYuv));
        assert_eq!(add_white_noise(&m, 0.0, 7).unwrap(), m);
        let a = add_white_noise(&m, 0.1, 7).unwrap();
        let b = add_white_noise(&m, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(add_white_noise(&m, -0.1, 7), Err(Error::Argument(_))));
        // per-trace std of the added noise
        for (x, y) in a.traces().zip(m.traces()) {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64)
                .sqrt();
            assert!((0.08..=0.12).contains(&sd), "{sd}");
        }
    }

    #[test]
    fn noise_requires_normalized_map() {
        let m = map_from_traces(&vec![vec![1.0, 2.0, 3.0, 4.0]; 3], 1.0, ColorSpace::Rgb);
        assert!(matches!(add_white_noise(&m, 0.1, 1), Err(Error::State(_))));
    }

    proptest! {
        #[test]
        fn csc_is_linear(
            x in prop::array::uniform3(0.0f64..255.0),
            y in prop::array::uniform3(0.0f64..255.0),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let f = |v: [f64; 3]| ColorTriple::new(v[0], v[1], v[2]).to_modified_yuv();
            let mix = [0, 1, 2].map(|k| a * x[k] + b * y[k]);
            let (fx, fy, fm) = (f(x), f(y), f(mix));
            for k in 0..3 {
                prop_assert!((fm[k] - (a * fx[k] + b * fy[k])).abs() < 1e-9);
            }
        }

        #[test]
        fn normalize_is_idempotent(trace in prop::collection::vec(-100.0f64..100.0, 3..200)) {
            let mut once = trace.clone();
            normalize_trace(&mut once);
            let mut twice = once.clone();
            normalize_trace(&mut twice);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            if once.iter().any(|v| *v != 0.0) {
                let n = once.len() as f64;
                let mean = once.iter().sum::<f64>() / n;
                let sd = (once.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                prop_assert!(mean.abs() <= 1e-9);
                prop_assert!((sd - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn preprocessing_preserves_shape(regions in 1usize..5, frames in 4usize..40) {
            let data: Vec<f64> = (0..regions * 3 * frames).map(|k| (k % 13) as f64 * 3.0).collect();
            let m = SpatialTemporalMap::new(regions, 2.0, ColorSpace::Rgb, data).unwrap();
            let y = csc_modified_yuv(&m).unwrap();
            let n = temporal_normalize(&y);
            let w = add_white_noise(&n, 0.05, 3).unwrap();
            for out in [&y, &n, &w] {
                prop_assert_eq!(out.regions(), regions);
                prop_assert_eq!(out.frames(), frames);
            }
        }
    }
}
