//! Training, evaluation and analysis drivers plus their file formats.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assessor::{Assessor, AssessorConfig, ForwardPass};
use crate::checkpoint;
use crate::data::{center_crop, random_crop, split};
use crate::error::{config, Error, Result};
use crate::losses::{total_loss_grad, weights_at, CurriculumSchedule};
use crate::metrics::{
    deviation_bin, deviation_bin_label, range_effect_report, PredictionRecord, RangeEffectReport,
};
use crate::par::Exec;
use crate::params::{ParamGrads, ParamGroup, ParamStore};
use crate::scales::{build_micro_batches, ScoredImage, MICRO_BATCH_SIZE};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    /// L2 penalty added to the gradient of every parameter.
    pub weight_decay: f64,
    /// Epochs (0-based) from which the rates are multiplied by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Images per optimizer step; `floor(K / 5)` micro-batches.
    #[serde(rename = "batch_K")]
    pub batch_k: usize,
    pub schedule: CurriculumSchedule,
    pub seed: u64,
    /// Fraction of the dataset used for training; the rest is evaluated.
    pub train_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Random horizontal and vertical flips of training crops.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr_backbone: 2e-5,
            lr_other: 2e-4,
            weight_decay: 5e-4,
            lr_drop_epochs: vec![10, 20, 30],
            lr_drop_factor: 0.1,
            batch_k: 10,
            schedule: CurriculumSchedule::default(),
            seed: 0,
            train_ratio: 0.8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.epochs == 0 {
            return config("epochs must be at least 1");
        }
        if self.batch_k < MICRO_BATCH_SIZE {
            return config(format!("batch_K must be at least {MICRO_BATCH_SIZE}"));
        }
        for lr in [
            self.lr_backbone,
            self.lr_other,
            self.weight_decay,
            self.lr_drop_factor,
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return config(
                    "learning rates, decay and drop factor must be finite and non-negative",
                );
            }
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return config("train_ratio must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return config("Adam betas must lie in [0, 1)");
        }
        self.schedule.validate(steps)
    }

    /// Learning rate of `group` during `epoch`.
    pub fn lr_at(&self, epoch: usize, group: ParamGroup) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Other => self.lr_other,
        };
        lr_at(base, epoch, &self.lr_drop_epochs, self.lr_drop_factor)
    }
}

/// `base * factor^k` where `k` counts the drop epochs at or before `epoch`.
pub fn lr_at(base: f64, epoch: usize, drops: &[usize], factor: f64) -> f64 {
    let k = drops.iter().filter(|&&d| d <= epoch).count();
    base * factor.powi(k as i32)
}

/// Contents of a run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessor: Option<AssessorConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// First-order adaptive-moment optimizer with L2 weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with per-group learning rates.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let rate = lr(store.param(id).group);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g[i] + self.weight_decay * w[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Mixes `parts` into `seed` (SplitMix64 finalizer per part).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(x << 6)
            .wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    /// Normalized curriculum weights `w_1..w_T`.
    pub weights: Vec<f64>,
    /// Mean weighted total loss per micro-batch.
    pub total: f64,
    /// Mean unweighted coarse loss.
    pub coarse: f64,
    /// Mean unweighted fine losses for steps `2..=T`.
    pub fine: Vec<f64>,
    /// Mean absolute error per step over the images seen this epoch.
    pub mae: Vec<f64>,
    pub seconds: f64,
}

fn loss_log_header(steps: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "stage", "lr_backbone", "lr_other"]
        .map(String::from)
        .to_vec();
    h.extend((1..=steps).map(|t| format!("w_{t}")));
    h.push("total".into());
    h.push("coarse".into());
    h.extend((2..=steps).map(|t| format!("fine_{t}")));
    h.extend((1..=steps).map(|t| format!("mae_t{t}")));
    h.push("seconds".into());
    h
}

/// Float format used in every CSV artifact; exact on round trip.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn loss_log_bytes(logs: &[EpochLog], steps: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(loss_log_header(steps))?;
    for l in logs {
        let mut row = vec![l.epoch.to_string(), (l.stage + 1).to_string()];
        row.push(fmt_float(l.lr_backbone));
        row.push(fmt_float(l.lr_other));
        row.extend(l.weights.iter().copied().map(fmt_float));
        row.push(fmt_float(l.total));
        row.push(fmt_float(l.coarse));
        row.extend(l.fine.iter().copied().map(fmt_float));
        row.extend(l.mae.iter().copied().map(fmt_float));
        row.push(format!("{:.3}", l.seconds));
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Paths written by a training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join(CHECKPOINT_FILE),
            loss_log: dir.join(LOSS_LOG_FILE),
            predictions: dir.join(PREDICTIONS_FILE),
            report: dir.join(REPORT_FILE),
        }
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifacts: RunArtifacts,
    pub model: Assessor,
    pub logs: Vec<EpochLog>,
    /// Held-out predictions and their report.
    pub test_records: Vec<PredictionRecord>,
    pub report: RangeEffectReport,
    pub train_len: usize,
    pub test_len: usize,
}

/// Trains on a `train_ratio` split of `dataset` and evaluates on the rest,
/// writing all artifacts into `out_dir`.
pub fn train(
    train_cfg: &TrainConfig,
    assessor_cfg: &AssessorConfig,
    dataset: &[ScoredImage],
    out_dir: &Path,
    exec: Exec,
) -> Result<TrainOutcome> {
    train_cfg.validate(assessor_cfg.steps)?;
    assessor_cfg.validate()?;
    let (train_set, test_set) = split(dataset, train_cfg.train_ratio, train_cfg.seed)?;
    if train_set.len() < MICRO_BATCH_SIZE || test_set.is_empty() {
        return config(format!(
            "dataset of {} images is too small to split into training (>= {MICRO_BATCH_SIZE}) and test parts",
            dataset.len()
        ));
    }
    fs::create_dir_all(out_dir)?;
    let artifacts = RunArtifacts::in_dir(out_dir);
    let mut model = Assessor::new(assessor_cfg)?;
    let logs = fit(&mut model, train_cfg, &train_set, &artifacts, exec)?;

    let test_records = predict_records(&model, &test_set, exec)?;
    write_atomic(&artifacts.predictions, &predictions_csv(&test_records)?)?;
    let report = range_effect_report(&test_records)?;
    write_atomic(&artifacts.report, &report_json(&report)?)?;
    log::info!(
        "test SROCC {:?} PLCC {:?} over {} images",
        report.global.srocc,
        report.global.plcc,
        test_records.len()
    );
    Ok(TrainOutcome {
        artifacts,
        model,
        logs,
        test_records,
        report,
        train_len: train_set.len(),
        test_len: test_set.len(),
    })
}

/// The optimization loop. Writes the loss log and a checkpoint after every epoch.
pub fn fit(
    model: &mut Assessor,
    cfg: &TrainConfig,
    train_set: &[ScoredImage],
    artifacts: &RunArtifacts,
    exec: Exec,
) -> Result<Vec<EpochLog>> {
    let steps = model.steps();
    let side = model.config().backbone.input_size;
    let loss_cfg = model.config().loss.clone();
    let mut adam = Adam::new(&model.store, cfg);
    let batches_per_step = cfg.batch_k / MICRO_BATCH_SIZE;
    let opt_steps = train_set.len().div_ceil(cfg.batch_k);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let weights = weights_at(epoch, &cfg.schedule);
        let (lr_b, lr_o) = (
            cfg.lr_at(epoch, ParamGroup::Backbone),
            cfg.lr_at(epoch, ParamGroup::Other),
        );
        let mut sums = (
            0.0,
            0.0,
            vec![0.0; steps.saturating_sub(1)],
            vec![0.0; steps],
        );
        let mut seen = 0usize;
        let mut n_batches = 0usize;

        for step in 0..opt_steps {
            let mb_seed = derive_seed(cfg.seed, &[epoch as u64, step as u64]);
            let batches = build_micro_batches(train_set, cfg.batch_k, mb_seed)?;
            debug_assert_eq!(batches.len(), batches_per_step);
            let members: Vec<&ScoredImage> = batches
                .iter()
                .flat_map(|b| b.members.iter().copied())
                .collect();
            let store = &model.store;
            let m: &Assessor = model;
            let passes: Vec<ForwardPass> = exec.try_map(members.len(), |i| {
                let crop_seed = derive_seed(mb_seed, &[i as u64]);
                let mut img = random_crop(&members[i].pixels, side, crop_seed)?;
                if cfg.flip {
                    let bits = derive_seed(crop_seed, &[1]);
                    if bits & 1 == 1 {
                        img = img.flip_horizontal();
                    }
                    if bits & 2 == 2 {
                        img = img.flip_vertical();
                    }
                }
                m.forward_pass(store, &img)
            })?;

            // loss gradients per member, per step
            let mut d_scores = vec![vec![0.0; steps]; members.len()];
            let mut step_loss = 0.0;
            for (b, batch) in batches.iter().enumerate() {
                let mos = batch.mos();
                let preds: Vec<Vec<f64>> = (0..steps)
                    .map(|t| {
                        (0..MICRO_BATCH_SIZE)
                            .map(|j| passes[b * MICRO_BATCH_SIZE + j].scores().scores[t])
                            .collect()
                    })
                    .collect();
                let tl = total_loss_grad(&preds, &mos, &weights, &loss_cfg)?;
                if !tl.value.is_finite() {
                    return diverged(artifacts, &logs, steps, epoch, "non-finite loss");
                }
                step_loss += tl.value;
                sums.0 += tl.value;
                sums.1 += tl.coarse;
                sums.2.iter_mut().zip(&tl.fine).for_each(|(a, f)| *a += f);
                for t in 0..steps {
                    for j in 0..MICRO_BATCH_SIZE {
                        let k = b * MICRO_BATCH_SIZE + j;
                        d_scores[k][t] = tl.grad[t][j] / batches.len() as f64;
                        sums.3[t] += (preds[t][j] - mos[j]).abs();
                    }
                }
                seen += MICRO_BATCH_SIZE;
                n_batches += 1;
            }

            let per_member: Vec<ParamGrads> =
                exec.map(passes.len(), |i| passes[i].param_grads(store, &d_scores[i]));
            let mut grads = model.store.zero_grads();
            for g in &per_member {
                grads.add_assign(g);
            }
            if !grads.all_finite() {
                return diverged(artifacts, &logs, steps, epoch, "non-finite gradient");
            }
            log::trace!(
                "epoch {epoch} step {step} loss {:.4}",
                step_loss / batches.len() as f64
            );
            adam.step(&mut model.store, &grads, |g| match g {
                ParamGroup::Backbone => lr_b,
                ParamGroup::Other => lr_o,
            });
        }

        let nb = n_batches as f64;
        let entry = EpochLog {
            epoch,
            stage: cfg.schedule.stage_of(epoch),
            lr_backbone: lr_b,
            lr_other: lr_o,
            weights,
            total: sums.0 / nb,
            coarse: sums.1 / nb,
            fine: sums.2.iter().map(|v| v / nb).collect(),
            mae: sums.3.iter().map(|v| v / seen as f64).collect(),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {:>3} stage {} loss {:.4} coarse {:.4} mae_t1 {:.3} mae_tT {:.3} ({:.1}s)",
            epoch,
            entry.stage + 1,
            entry.total,
            entry.coarse,
            entry.mae[0],
            entry.mae[steps - 1],
            entry.seconds
        );
        if !model.store.iter().all(|(_, p)| p.value.all_finite()) {
            return diverged(artifacts, &logs, steps, epoch, "non-finite parameters");
        }
        logs.push(entry);
        write_atomic(&artifacts.loss_log, &loss_log_bytes(&logs, steps)?)?;
        checkpoint::save(model, &artifacts.checkpoint)?;
    }
    Ok(logs)
}

fn diverged<T>(
    artifacts: &RunArtifacts,
    logs: &[EpochLog],
    steps: usize,
    epoch: usize,
    message: &str,
) -> Result<T> {
    // the checkpoint on disk is the last completed epoch
    write_atomic(&artifacts.loss_log, &loss_log_bytes(logs, steps)?)?;
    Err(Error::Diverged {
        epoch,
        message: message.to_string(),
    })
}

/// Center crop to the model's input side; smaller images are refused.
pub fn eval_view(model: &Assessor, img: &ScoredImage) -> Result<crate::imaging::Image> {
    let side = model.config().backbone.input_size;
    if img.pixels.height() < side || img.pixels.width() < side {
        return config(format!(
            "image {} is {}x{}, smaller than the checkpoint's {side}x{side} crop",
            img.image_id,
            img.pixels.height(),
            img.pixels.width()
        ));
    }
    center_crop(&img.pixels, side)
}

pub fn predict_records(
    model: &Assessor,
    images: &[ScoredImage],
    exec: Exec,
) -> Result<Vec<PredictionRecord>> {
    exec.try_map(images.len(), |i| {
        let img = &images[i];
        let scores = model.predict(&eval_view(model, img)?)?;
        Ok(PredictionRecord {
            image_id: img.image_id.clone(),
            mos: img.mos,
            pmos: scores.scores,
        })
    })
}

/// Loads a checkpoint and scores every image.
pub fn evaluate(
    checkpoint_path: &Path,
    images: &[ScoredImage],
    exec: Exec,
) -> Result<Vec<PredictionRecord>> {
    let model = checkpoint::load(checkpoint_path)?;
    predict_records(&model, images, exec)
}

pub fn predictions_csv(records: &[PredictionRecord]) -> Result<Vec<u8>> {
    let steps = records.first().map_or(0, |r| r.pmos.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "mos".to_string()];
    header.extend((1..=steps).map(|t| format!("pmos_t{t}")));
    w.write_record(&header)?;
    for r in records {
        if r.pmos.len() != steps {
            return config("prediction records disagree on T");
        }
        let mut row = vec![r.image_id.clone(), fmt_float(r.mos)];
        row.extend(r.pmos.iter().copied().map(fmt_float));
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let name = path.display().to_string();
    let parse_err = |row: usize, message: String| Error::Parse {
        source_name: name.clone(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let steps = cols.len().saturating_sub(2);
    let expected: Vec<String> = ["image_id".to_string(), "mos".to_string()]
        .into_iter()
        .chain((1..=steps).map(|t| format!("pmos_t{t}")))
        .collect();
    if steps == 0 || cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(parse_err(
            0,
            format!(
                "expected header image_id,mos,pmos_t1..pmos_tT, got `{}`",
                cols.join(",")
            ),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| parse_err(row, e.to_string()))?;
        if rec.len() != steps + 2 {
            return Err(parse_err(
                row,
                format!("expected {} fields, got {}", steps + 2, rec.len()),
            ));
        }
        let num = |j: usize| -> Result<f64> {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|e| parse_err(row, format!("column {}: `{}`: {e}", cols[j], &rec[j])))?;
            if !v.is_finite() {
                return Err(parse_err(
                    row,
                    format!("column {}: non-finite value", cols[j]),
                ));
            }
            Ok(v)
        };
        let mos = num(1)?;
        if !(0.0..=100.0).contains(&mos) {
            return Err(parse_err(row, format!("mos {mos} outside [0, 100]")));
        }
        out.push(PredictionRecord {
            image_id: rec[0].to_string(),
            mos,
            pmos: (2..steps + 2).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

pub fn report_json(report: &RangeEffectReport) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(report)?;
    v.push(b'\n');
    Ok(v)
}

/// Files written by [`analyze`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisArtifacts {
    pub report: PathBuf,
    pub pairs: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Sibling of the report holding the raw `(mos, pmos_T)` pairs.
pub fn pairs_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().unwrap_or_default().to_string_lossy();
    report.with_file_name(format!("{stem}_pairs.csv"))
}

/// Range-effect report for a predictions CSV, the raw pairs, and optional SVG plots.
pub fn analyze(
    preds: &Path,
    out: &Path,
    plots: Option<&Path>,
) -> Result<(RangeEffectReport, AnalysisArtifacts)> {
    let records = read_predictions(preds)?;
    let report = range_effect_report(&records)?;
    write_atomic(out, &report_json(&report)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "mos", "pmos"])?;
    for r in &records {
        w.write_record([
            r.image_id.clone(),
            fmt_float(r.mos),
            fmt_float(r.headline()),
        ])?;
    }
    let pairs = pairs_path(out);
    write_atomic(
        &pairs,
        &w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;

    let mut plot_paths = Vec::new();
    if let Some(dir) = plots {
        fs::create_dir_all(dir)?;
        let scatter = dir.join("scatter.svg");
        write_atomic(&scatter, scatter_svg(&records).as_bytes())?;
        let hist = dir.join("deviation_histogram.svg");
        write_atomic(&hist, histogram_svg(&records).as_bytes())?;
        plot_paths = vec![scatter, hist];
    }
    Ok((
        report,
        AnalysisArtifacts {
            report: out.to_path_buf(),
            pairs,
            plots: plot_paths,
        },
    ))
}

const PLOT: f64 = 400.0;
const MARGIN: f64 = 40.0;

fn svg_open(title: &str) -> String {
    let size = PLOT + 2.0 * MARGIN;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{PLOT}\" height=\"{PLOT}\" fill=\"none\" stroke=\"black\"/>\n",
        size / 2.0
    )
}

/// Predicted (final step) against ground-truth MOS on `[0, 100]^2`.
pub fn scatter_svg(records: &[PredictionRecord]) -> String {
    let mut s = svg_open("pMOS vs MOS");
    let px = |v: f64| MARGIN + PLOT * v.clamp(0.0, 100.0) / 100.0;
    let py = |v: f64| MARGIN + PLOT * (1.0 - v.clamp(0.0, 100.0) / 100.0);
    for k in 1..5 {
        let v = 20.0 * k as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{0}\" y1=\"{MARGIN}\" x2=\"{0}\" y2=\"{1}\" stroke=\"#ddd\"/>\
             <line x1=\"{MARGIN}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"#ddd\"/>",
            px(v),
            MARGIN + PLOT,
            py(v)
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4\"/>",
        px(0.0),
        py(0.0),
        px(100.0),
        py(100.0)
    );
    for r in records {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"steelblue\" fill-opacity=\"0.7\"/>",
            px(r.mos),
            py(r.headline())
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Counts of `|pmos - mos|` in 2.5-point bins.
pub fn histogram_svg(records: &[PredictionRecord]) -> String {
    let mut counts: Vec<usize> = Vec::new();
    for r in records {
        let b = deviation_bin((r.headline() - r.mos).abs());
        if counts.len() <= b {
            counts.resize(b + 1, 0);
        }
        counts[b] += 1;
    }
    let mut s = svg_open("|pMOS - MOS| histogram");
    let max = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let bw = PLOT / counts.len().max(1) as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = PLOT * c as f64 / max;
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"><title>{}: {c}</title></rect>",
            MARGIN + i as f64 * bw,
            MARGIN + PLOT - h,
            (bw - 1.0).max(0.5),
            h,
            deviation_bin_label(i)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}
