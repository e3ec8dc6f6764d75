use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fastbvp_core::nn::layers::Mode;
use fastbvp_core::physio::{
    baseline_extract, bvp_to_hr, detect_peaks, error_metrics, physio_report, BaselineMethod,
    MetricReport, PhysioReport,
};
use fastbvp_core::spectral::decompose;
use fastbvp_core::srrn::{count_flops, count_params, prepare_input, SrrnConfig, SrrnModel};
use fastbvp_core::stmap::{load_stmap, preprocess, SpatialTemporalMap};
use fastbvp_core::synth::{build_corpus, load_corpus, SynthSpec};
use fastbvp_core::train::{fit, write_history_csv, TrainConfig, TrainSample};
use fastbvp_core::{BvpSignal, Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::plot::{heatmap, line_chart, Series};
use crate::run::RunRecorder;
use crate::{Cli, Command};

/// Shortest clip `infer` accepts.
pub const MIN_INFER_SECS: f64 = 15.0;
pub const METHOD_MODEL: &str = "FastBVP";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { spec, out } => cmd_synth(cli, spec.as_deref(), out),
        Command::Train {
            corpus,
            out,
            train_config,
            val_corpus,
            val_fraction,
        } => cmd_train(cli, corpus, out, train_config.as_deref(), val_corpus.as_deref(), *val_fraction),
        Command::Infer {
            checkpoint,
            input,
            out,
            sample_rate,
        } => cmd_infer(cli, checkpoint, input, out, *sample_rate),
        Command::Eval {
            checkpoint,
            corpus,
            out,
        } => cmd_eval(cli, checkpoint, corpus, out),
        Command::Budget { frames, out } => cmd_budget(cli, frames, out.as_deref()),
        Command::Decompose {
            input,
            out,
            sample_rate,
        } => cmd_decompose(cli, input, out, *sample_rate),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &(text + "\n"))
}

fn model_config(cli: &Cli) -> Result<SrrnConfig> {
    match &cli.config {
        Some(p) => SrrnConfig::load(p),
        None => Ok(SrrnConfig::default()),
    }
}

fn cmd_synth(cli: &Cli, spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let mut rec = RunRecorder::new("synth", Some(spec.seed), cli.threads);
    rec.config(spec_path);
    let manifest = build_corpus(&spec, out)?;
    rec.output(out);
    log::info!("wrote {} samples to {}", manifest.samples.len(), out.display());
    rec.finish(out)
}

fn split_validation(samples: Vec<TrainSample>, fraction: f64) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Argument(format!("--val-fraction {fraction} must lie in [0, 1)")));
    }
    let n_val = if samples.len() < 2 {
        0
    } else {
        ((samples.len() as f64 * fraction).ceil() as usize).min(samples.len() - 1)
    };
    let mut train = samples;
    let val = train.split_off(train.len() - n_val);
    Ok((train, val))
}

fn cmd_train(
    cli: &Cli,
    corpus: &Path,
    out: &Path,
    train_config: Option<&Path>,
    val_corpus: Option<&Path>,
    val_fraction: f64,
) -> Result<()> {
    let mcfg = model_config(cli)?;
    let mut tcfg = match train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        tcfg.seed = seed;
    }
    tcfg.validate()?;
    let mut rec = RunRecorder::new("train", Some(tcfg.seed), cli.threads);
    rec.config(cli.config.as_deref());
    rec.config(train_config);
    let (_, samples) = load_corpus(corpus)?;
    rec.input(corpus);
    let (train, val) = match val_corpus {
        Some(v) => {
            rec.input(v);
            (samples, load_corpus(v)?.1)
        }
        None => split_validation(samples, val_fraction)?,
    };
    if train.is_empty() {
        return Err(Error::Argument(format!("{}: corpus is empty", corpus.display())));
    }
    create_dir(out)?;
    let ckpt = out.join("checkpoint");
    create_dir(&ckpt)?;
    let model = SrrnModel::new(mcfg, tcfg.seed)?;
    log::info!(
        "training {} parameters on {} clips, validating on {}",
        model.param_count(),
        train.len(),
        val.len()
    );
    let outcome = fit(&train, &val, model, &tcfg)?;
    outcome.best.save(&ckpt)?;
    rec.output(&ckpt);
    let hist = out.join("history.csv");
    write_history_csv(&hist, &outcome.history)?;
    rec.output(&hist);
    let epochs: Vec<f64> = outcome.history.iter().map(|h| h.epoch as f64).collect();
    let loss: Vec<f64> = outcome.history.iter().map(|h| h.train_loss).collect();
    let mae: Vec<f64> = outcome.history.iter().map(|h| h.val_mae).collect();
    let plot = out.join("history.svg");
    write_text(
        &plot,
        &line_chart(
            "training loss",
            "epoch",
            &[Series { label: "train loss", x: &epochs, y: &loss }],
            &[],
        ),
    )?;
    rec.output(&plot);
    if mae.iter().any(|v| v.is_finite()) {
        let plot = out.join("val_mae.svg");
        write_text(
            &plot,
            &line_chart(
                "validation HR MAE (bpm)",
                "epoch",
                &[Series { label: "val MAE", x: &epochs, y: &mae }],
                &[],
            ),
        )?;
        rec.output(&plot);
    }
    log::info!("best epoch {}", outcome.best_epoch);
    rec.finish(out)
}

/// Drops trailing frames so the clip passes every pooling and segmentation
/// stage of the model.
fn fit_clip(map: &SpatialTemporalMap, cfg: &SrrnConfig) -> Result<SpatialTemporalMap> {
    let frames = cfg.fit_frames(map.frames()).ok_or_else(|| {
        Error::Config(format!("no valid model length up to {} frames", map.frames()))
    })?;
    if frames == map.frames() {
        return Ok(map.clone());
    }
    log::warn!("using the first {frames} of {} frames", map.frames());
    map.truncate(frames)
}

#[derive(Debug, Serialize)]
struct InferReport {
    input: PathBuf,
    frames_used: usize,
    #[serde(flatten)]
    physio: PhysioReport,
}

fn cmd_infer(cli: &Cli, checkpoint: &Path, input: &Path, out: &Path, sample_rate: f64) -> Result<()> {
    let mut rec = RunRecorder::new("infer", cli.seed, cli.threads);
    let model = SrrnModel::load(checkpoint)?;
    rec.input(checkpoint);
    let map = load_stmap(input, sample_rate)?;
    rec.input(input);
    let required = (MIN_INFER_SECS * sample_rate).ceil() as usize;
    if map.frames() < required {
        return Err(Error::TooShort {
            frames: map.frames(),
            sample_rate,
            required,
        });
    }
    if map.regions() != model.config.regions {
        return Err(Error::Shape(format!(
            "checkpoint expects {} regions, {} has {}",
            model.config.regions,
            input.display(),
            map.regions()
        )));
    }
    let map = preprocess(&fit_clip(&map, &model.config)?)?;
    let x = prepare_input(&map, &model.config)?;
    let (y, cache) = model.forward(&x, Mode::Infer)?;
    let bvp = BvpSignal::new(y.into_data(), sample_rate)?;
    let physio = physio_report(&bvp)?;
    create_dir(out)?;

    let csv = out.join("bvp.csv");
    let mut text = String::from("frame,time,bvp\n");
    for (t, v) in bvp.samples.iter().enumerate() {
        let _ = writeln!(text, "{t},{},{v}", t as f64 / sample_rate);
    }
    write_text(&csv, &text)?;
    rec.output(&csv);

    let report = out.join("report.json");
    write_json(
        &report,
        &InferReport {
            input: input.to_path_buf(),
            frames_used: map.frames(),
            physio,
        },
    )?;
    rec.output(&report);

    let time: Vec<f64> = (0..bvp.len()).map(|t| t as f64 / sample_rate).collect();
    let peaks = detect_peaks(&bvp)?;
    let marks: Vec<(f64, f64)> = peaks
        .indices
        .iter()
        .map(|&i| (time[i], bvp.samples[i]))
        .collect();
    let wave = out.join("waveform.svg");
    write_text(
        &wave,
        &line_chart(
            "reconstructed pulse",
            "time (s)",
            &[Series { label: "BVP", x: &time, y: &bvp.samples }],
            &marks,
        ),
    )?;
    rec.output(&wave);

    if let Some(ssa) = cache.ssa_caches().last() {
        let attn = ssa.attention();
        let s = attn[0].segments;
        let mut mean = vec![0.0; s * s];
        for a in attn {
            for (m, w) in mean.iter_mut().zip(&a.weights) {
                *m += w / attn.len() as f64;
            }
        }
        let plot = out.join("attention.svg");
        write_text(
            &plot,
            &heatmap("segment attention, last reconstruction block", &mean, s, s),
        )?;
        rec.output(&plot);
    }
    rec.finish(out)
}

/// HR of a waveform; one without two detectable peaks counts as 0 bpm.
fn hr_or_zero(bvp: &BvpSignal) -> Result<f64> {
    match bvp_to_hr(bvp) {
        Ok(hr) => Ok(hr),
        Err(Error::InsufficientSignal(msg)) => {
            log::warn!("HR estimate failed ({msg}); counted as 0 bpm");
            Ok(0.0)
        }
        Err(e) => Err(e),
    }
}

struct Prediction {
    model: f64,
    baselines: [f64; 3],
}

fn predict(model: &SrrnModel, s: &TrainSample) -> Result<Prediction> {
    let map = preprocess(&fit_clip(&s.map, &model.config)?)?;
    let m = hr_or_zero(&model.infer(&map)?)?;
    let mut baselines = [0.0; 3];
    for (b, method) in baselines.iter_mut().zip(BaselineMethod::ALL) {
        *b = hr_or_zero(&baseline_extract(&s.map, method)?)?;
    }
    Ok(Prediction { model: m, baselines })
}

pub fn metrics_csv(rows: &[(&str, MetricReport)]) -> String {
    let mut s = String::from("method,mae,rmse,std,r\n");
    for (name, m) in rows {
        let _ = writeln!(s, "{name},{},{},{},{}", m.mae, m.rmse, m.std, m.r);
    }
    s
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let mut rec = RunRecorder::new("eval", cli.seed, cli.threads);
    let model = SrrnModel::load(checkpoint)?;
    rec.input(checkpoint);
    let (manifest, samples) = load_corpus(corpus)?;
    rec.input(corpus);
    if samples.is_empty() {
        return Err(Error::Argument(format!("{}: corpus is empty", corpus.display())));
    }
    let preds = samples
        .par_iter()
        .map(|s| predict(&model, s))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<f64> = samples.iter().map(|s| s.reference_hr).collect();
    let mut rows = Vec::new();
    let model_hr: Vec<f64> = preds.iter().map(|p| p.model).collect();
    rows.push((METHOD_MODEL, error_metrics(&model_hr, &truth)?));
    for (k, method) in BaselineMethod::ALL.iter().enumerate() {
        let hr: Vec<f64> = preds.iter().map(|p| p.baselines[k]).collect();
        rows.push((method.name(), error_metrics(&hr, &truth)?));
    }
    create_dir(out)?;
    let table = out.join("metrics.csv");
    write_text(&table, &metrics_csv(&rows))?;
    rec.output(&table);
    let per = out.join("predictions.csv");
    let mut text = String::from("id,true_hr,fastbvp,green,chrom,pos\n");
    for ((e, p), t) in manifest.samples.iter().zip(&preds).zip(&truth) {
        let _ = writeln!(
            text,
            "{},{t},{},{},{},{}",
            e.id, p.model, p.baselines[0], p.baselines[1], p.baselines[2]
        );
    }
    write_text(&per, &text)?;
    rec.output(&per);
    for (name, m) in &rows {
        println!("{name:<8} MAE {:.3}  RMSE {:.3}  Std {:.3}  r {:.3}", m.mae, m.rmse, m.std, m.r);
    }
    rec.finish(out)
}

fn cmd_budget(cli: &Cli, frames: &[usize], out: Option<&Path>) -> Result<()> {
    let cfg = model_config(cli)?;
    cfg.validate()?;
    let params = count_params(&cfg);
    println!("total params: {params}");
    let reports = frames
        .iter()
        .map(|&t| count_flops(&cfg, t))
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        println!("FLOPs at T = {}: {} ({:.3e})", r.frames, r.total_flops, r.total_flops as f64);
    }
    if let Some(r) = reports.last() {
        println!();
        print!("{}", r.to_table());
    }
    if let Some(dir) = out {
        let mut rec = RunRecorder::new("budget", cli.seed, cli.threads);
        rec.config(cli.config.as_deref());
        create_dir(dir)?;
        let path = dir.join("budget.json");
        write_json(&path, &reports)?;
        rec.output(&path);
        rec.finish(dir)?;
    }
    Ok(())
}

fn cmd_decompose(cli: &Cli, input: &Path, out: &Path, sample_rate: f64) -> Result<()> {
    let cfg = model_config(cli)?;
    let mut rec = RunRecorder::new("decompose", cli.seed, cli.threads);
    rec.config(cli.config.as_deref());
    let map = preprocess(&load_stmap(input, sample_rate)?)?;
    rec.input(input);
    let bands = decompose(&map, &cfg.bands)?;
    create_dir(out)?;
    for k in 0..bands.num_bands() {
        let path = out.join(format!("band{k}.csv"));
        let mut text = String::from("frame");
        for r in 1..=bands.regions {
            for c in ["Y", "U", "V"] {
                let _ = write!(text, ",r{r}_{c}");
            }
        }
        text.push('\n');
        for t in 0..bands.frames {
            let _ = write!(text, "{t}");
            for r in 0..bands.regions {
                for c in 0..3 {
                    let _ = write!(text, ",{}", bands.trace(k, r, c)[t]);
                }
            }
            text.push('\n');
        }
        write_text(&path, &text)?;
        rec.output(&path);
    }
    let path = out.join("bands.json");
    #[derive(Serialize)]
    struct BandInfo {
        lo: f64,
        hi: f64,
        empty: bool,
    }
    let info: Vec<BandInfo> = bands
        .band_defs
        .iter()
        .zip(&bands.empty_bands)
        .map(|(b, e)| BandInfo { lo: b.lo, hi: b.hi, empty: *e })
        .collect();
    write_json(&path, &info)?;
    rec.output(&path);
    rec.finish(out)
}
