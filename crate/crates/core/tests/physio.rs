use std::f64::consts::TAU;

use fastbvp_core::physio::{
    baseline_extract, bvp_to_hr, detect_peaks, error_metrics, estimate_hr, hrv_from_ibi, hrv_spectral,
    metrics, BaselineMethod, PeakList, MIN_PEAK_GAP_SECS,
};
use fastbvp_core::stmap::{ColorSpace, SpatialTemporalMap};
use fastbvp_core::synth::{synth_corpus, SynthSpec};
use fastbvp_core::{BvpSignal, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FS: f64 = 30.0;

fn sinusoid(f: f64, n: usize) -> Vec<f64> {
    (0..n).map(|t| (TAU * f * t as f64 / FS).sin()).collect()
}

fn bvp(x: Vec<f64>) -> BvpSignal {
    BvpSignal::new(x, FS).unwrap()
}

/// Sample positions of the maxima of `sin(2π f t)`.
fn true_peaks(f: f64, n: usize) -> Vec<f64> {
    let period = FS / f;
    let mut out = Vec::new();
    let mut p = 0.25 * period;
    while p < n as f64 {
        out.push(p);
        p += period;
    }
    out
}

#[test]
fn sinusoid_peaks_every_25_samples() {
    let peaks = detect_peaks(&bvp(sinusoid(1.2, 900))).unwrap();
    assert_eq!(peaks.indices.len(), 36);
    for w in peaks.indices.windows(2) {
        assert!((w[1] as i64 - w[0] as i64 - 25).abs() <= 1, "{w:?}");
    }
    for (i, p) in peaks.indices.iter().zip(true_peaks(1.2, 900)) {
        assert!((*i as f64 - p).abs() <= 1.0);
    }
}

#[test]
fn scaled_sinusoid_keeps_peak_indices() {
    let a = detect_peaks(&bvp(sinusoid(1.2, 900))).unwrap();
    let b = detect_peaks(&bvp(sinusoid(1.2, 900).iter().map(|v| 10.0 * v).collect())).unwrap();
    assert_eq!(a.indices, b.indices);
}

#[test]
fn noisy_sinusoid_peaks_are_found() {
    let truth = true_peaks(1.2, 900);
    assert_eq!(truth.len(), 36);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = sinusoid(1.2, 900)
            .into_iter()
            .map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let peaks = detect_peaks(&bvp(x)).unwrap();
        let matched = truth
            .iter()
            .filter(|p| peaks.indices.iter().any(|&i| (i as f64 - **p).abs() <= 2.0))
            .count();
        assert!(matched >= 34, "seed {seed}: {matched} of 36");
    }
}

#[test]
fn peaks_respect_minimum_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..900).map(|_| rng.sample(StandardNormal)).collect();
    let peaks = detect_peaks(&bvp(x)).unwrap();
    let min_gap = (MIN_PEAK_GAP_SECS * FS).ceil() as usize;
    for w in peaks.indices.windows(2) {
        assert!(w[1] > w[0] && w[1] - w[0] >= min_gap);
    }
}

#[test]
fn flat_signal_is_insufficient() {
    let err = detect_peaks(&bvp(vec![1.0; 300])).unwrap_err();
    assert!(matches!(err, Error::InsufficientSignal(_)), "{err}");
}

#[test]
fn hr_examples() {
    let every = |k: usize| PeakList::from_indices((0..20).map(|i| i * k).collect(), FS, 30.0);
    assert!((estimate_hr(&every(25)).unwrap() - 72.0).abs() < 1e-9);
    assert!((estimate_hr(&every(30)).unwrap() - 60.0).abs() < 1e-9);
    // alternating 0.8 s / 1.0 s intervals
    let mut idx = vec![0usize];
    for k in 0..20 {
        let step = if k % 2 == 0 { 24 } else { 30 };
        idx.push(idx.last().unwrap() + step);
    }
    let hr = estimate_hr(&PeakList::from_indices(idx, FS, 30.0)).unwrap();
    assert!((hr - 60.0 / 0.9).abs() < 1e-9, "{hr}");
    let one = PeakList::from_indices(vec![3], FS, 30.0);
    assert!(matches!(estimate_hr(&one), Err(Error::InsufficientSignal(_))));
}

#[test]
fn sinusoid_hr_at_acceptance_frequencies() {
    for f in [0.8, 1.2, 2.0, 3.0] {
        let hr = bvp_to_hr(&bvp(sinusoid(f, 900))).unwrap();
        assert!((hr / (60.0 * f) - 1.0).abs() <= 0.01, "{f} Hz: {hr}");
    }
}

/// Beat times of a train whose interval follows `ibi(t)`.
fn beat_train(secs: f64, ibi: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut times = vec![0.0];
    let mut ibis = Vec::new();
    while *times.last().unwrap() < secs {
        let t = *times.last().unwrap();
        let d = ibi(t);
        ibis.push(d);
        times.push(t + d);
    }
    // interval k ends at beat k + 1
    (times[1..].to_vec(), ibis)
}

#[test]
fn lf_modulation_is_reported_as_lf() {
    let (t, ibi) = beat_train(120.0, |t| 0.8 + 0.05 * (TAU * 0.1 * t).sin());
    let r = hrv_from_ibi(&t, &ibi).unwrap();
    assert!(r.lf_nu >= 0.95, "{r:?}");
    assert!((r.lf_nu + r.hf_nu - 1.0).abs() < 1e-6);
}

#[test]
fn hf_modulation_is_reported_as_hf() {
    let (t, ibi) = beat_train(120.0, |t| 0.8 + 0.05 * (TAU * 0.3 * t).sin());
    let r = hrv_from_ibi(&t, &ibi).unwrap();
    assert!(r.hf_nu >= 0.95, "{r:?}");
    assert!((r.lf_hf_ratio - r.lf_nu / r.hf_nu).abs() < 1e-9);
}

#[test]
fn constant_ibi_is_degenerate() {
    let (t, ibi) = beat_train(60.0, |_| 0.8);
    assert!(matches!(hrv_from_ibi(&t, &ibi), Err(Error::Degenerate(_))));
}

#[test]
fn short_beat_train_is_flagged() {
    let x = sinusoid(1.2, 450);
    let mut peaks = detect_peaks(&bvp(x)).unwrap();
    // jitter the beat times so the series is not constant
    for (k, t) in peaks.times.iter_mut().enumerate() {
        *t += 0.02 * (k as f64).sin();
    }
    let r = hrv_spectral(&peaks).unwrap();
    assert!(r.warning);
}

#[test]
fn metric_examples() {
    let truth = [60.0, 72.0, 95.0, 110.0];
    let m = metrics(&truth, &truth).unwrap();
    assert_eq!((m.mae, m.rmse, m.std), (0.0, 0.0, 0.0));
    assert!((m.r - 1.0).abs() < 1e-12);

    let shifted: Vec<f64> = truth.iter().map(|v| v + 2.0).collect();
    let m = metrics(&shifted, &truth).unwrap();
    assert!((m.mae - 2.0).abs() < 1e-12 && (m.rmse - 2.0).abs() < 1e-12);
    assert!(m.std.abs() < 1e-12 && (m.r - 1.0).abs() < 1e-12);

    let m = error_metrics(&[70.0, 80.0], &[72.0, 76.0]).unwrap();
    assert!((m.mae - 3.0).abs() < 1e-12);
    assert!((m.rmse - 10f64.sqrt()).abs() < 1e-12);

    assert!(matches!(metrics(&[70.0, 71.0], &[72.0, 72.0]), Err(Error::CorrelationUndefined(_))));
    assert!(error_metrics(&[70.0, 71.0], &[72.0, 72.0]).unwrap().r.is_nan());
    assert!(matches!(error_metrics(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
}

fn rgb_map(frames: usize, regions: usize, trace: impl Fn(usize, usize, usize) -> f64) -> SpatialTemporalMap {
    let mut data = Vec::with_capacity(regions * 3 * frames);
    for r in 0..regions {
        for c in 0..3 {
            for t in 0..frames {
                data.push(trace(r, c, t));
            }
        }
    }
    SpatialTemporalMap::new(regions, FS, ColorSpace::Rgb, data).unwrap()
}

#[test]
fn green_recovers_green_only_pulse() {
    let f = 1.3;
    let map = rgb_map(900, 4, |_, c, t| {
        let base = [170.0, 120.0, 100.0][c];
        if c == 1 {
            base + 0.5 * (TAU * f * t as f64 / FS).sin()
        } else {
            base
        }
    });
    let hr = bvp_to_hr(&baseline_extract(&map, BaselineMethod::Green).unwrap()).unwrap();
    assert!((hr - 60.0 * f).abs() <= 1.0, "{hr}");
}

#[test]
fn chrom_recovers_noiseless_skin_model_pulse() {
    let spec = SynthSpec {
        count: 20,
        noise_sigma: 0.0,
        illumination_drift: [0.0, 10.0],
        seed: 11,
        ..Default::default()
    };
    for s in synth_corpus(&spec).unwrap() {
        let hr = bvp_to_hr(&baseline_extract(&s.map, BaselineMethod::Chrom).unwrap()).unwrap();
        assert!((hr - s.reference_hr).abs() <= 1.0, "{hr} vs {}", s.reference_hr);
    }
}

#[test]
fn white_noise_map_is_flagged() {
    for method in BaselineMethod::ALL {
        let mut flagged = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..4 * 3 * 900).map(|_| rng.sample(StandardNormal)).collect();
            let map = rgb_map(900, 4, |r, c, t| 128.0 + 2.0 * noise[(r * 3 + c) * 900 + t]);
            let est = baseline_extract(&map, method).unwrap();
            match detect_peaks(&est) {
                Ok(p) if p.is_stable() => {}
                _ => flagged += 1,
            }
        }
        assert!(flagged >= 90, "{}: {flagged}", method.name());
    }
}

#[test]
fn baselines_reject_converted_maps() {
    let map = rgb_map(300, 2, |_, c, t| 100.0 + c as f64 + (t as f64 * 0.3).sin());
    let yuv = fastbvp_core::stmap::csc_modified_yuv(&map).unwrap();
    for m in BaselineMethod::ALL {
        assert!(matches!(baseline_extract(&yuv, m), Err(Error::State(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinusoid_hr_within_one_percent(f in 0.7f64..3.5) {
        let hr = bvp_to_hr(&bvp(sinusoid(f, 900))).unwrap();
        prop_assert!((hr / (60.0 * f) - 1.0).abs() <= 0.01, "{} Hz: {}", f, hr);
    }

    #[test]
    fn peaks_invariant_to_affine_amplitude(
        seed in any::<u64>(),
        scale in 0.01f64..100.0,
        offset in -100.0f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rng.gen_range(0.8..2.5);
        let x: Vec<f64> = sinusoid(f, 600)
            .into_iter()
            .map(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y: Vec<f64> = x.iter().map(|v| scale * v + offset).collect();
        let a = detect_peaks(&bvp(x)).unwrap();
        let b = detect_peaks(&bvp(y)).unwrap();
        prop_assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn lf_and_hf_sum_to_one(
        f in 0.05f64..0.35,
        depth in 0.01f64..0.1,
        g in 0.05f64..0.35,
        depth2 in 0.0f64..0.1,
    ) {
        let (t, ibi) = beat_train(90.0, |t| 0.8 + depth * (TAU * f * t).sin() + depth2 * (TAU * g * t).cos());
        let r = hrv_from_ibi(&t, &ibi).unwrap();
        prop_assert!((r.lf_nu + r.hf_nu - 1.0).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&r.lf_nu));
    }

    #[test]
    fn metric_identities(pairs in prop::collection::vec((40.0f64..200.0, -20.0f64..20.0), 1..60)) {
        let truth: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
        let m = error_metrics(&pred, &truth).unwrap();
        let bias = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
        prop_assert!(m.rmse + 1e-12 >= m.mae && m.mae >= 0.0);
        prop_assert!((m.rmse * m.rmse - (bias * bias + m.std * m.std)).abs() <= 1e-9 * (1.0 + m.rmse * m.rmse));
    }
}
