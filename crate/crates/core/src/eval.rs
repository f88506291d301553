//! Downstream segmentation probing and forgetting measurement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::augment::substream;
use crate::error::{config_err, Error, Result};
use crate::model::{trunk_forward, Checkpoint, EncoderConfig, EncoderKind};
use crate::numerics::{self, AdamConfig, AdamState, ParamVars, ParameterVector, Tape, Tensor, Var};
use crate::taskgen::{label_fraction_view, stack_images, LabeledTile, TaskDataset};

/// Additive smoothing in the soft-IoU ratio.
pub const JACCARD_SMOOTH: f64 = 1.0;

const PROBE_TAG: u64 = 0x7072_6f62;

fn one_hot(labels: &[u8], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(Error::Data(format!("class id {l} outside 0..{k}")));
        }
        data[i * k + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Soft-Jaccard loss of `N×K` row probabilities against a one-hot `N×K`
/// target, recorded on `tape`.
pub fn jaccard_graph(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var> {
    tape.value(probs).expect_same_shape(target)?;
    let y = tape.constant(target.clone());
    let py = tape.mul(probs, y)?;
    let inter = tape.sum_rows(py)?;
    let p_sum = tape.sum_rows(probs)?;
    let y_sum = tape.constant(column_sums(target)?);
    let num = tape.add_scalar(inter, JACCARD_SMOOTH)?;
    let union = tape.add(p_sum, y_sum)?;
    let union = tape.sub(union, inter)?;
    let den = tape.add_scalar(union, JACCARD_SMOOTH)?;
    let iou = tape.div(num, den)?;
    let mean_iou = tape.mean(iou)?;
    let neg = tape.scale(mean_iou, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

fn column_sums(t: &Tensor) -> Result<Tensor> {
    let (n, k) = t.dims2()?;
    let mut out = vec![0.0; k];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(&t.data()[i * k..(i + 1) * k]) {
            *o += v;
        }
    }
    Tensor::new(vec![k], out)
}

/// Moves the class axis of a `B×K×H×W` tensor last, giving `(B·H·W)×K`.
fn class_rows(probs: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = probs.dims4()?;
    let mut data = Vec::with_capacity(probs.len());
    for bi in 0..b {
        for p in 0..h * w {
            for c in 0..k {
                data.push(probs.data()[(bi * k + c) * h * w + p]);
            }
        }
    }
    Tensor::new(vec![b * h * w, k], data)
}

/// `1 − mean_k (Σp_k·y_k + s) / (Σp_k + Σy_k − Σp_k·y_k + s)` for `B×K×H×W`
/// probabilities and a row-major `B·H·W` mask.
pub fn jaccard_loss(probs: &Tensor, mask: &[u8]) -> Result<f64> {
    let rows = class_rows(probs)?;
    let (n, k) = rows.dims2()?;
    if mask.len() != n {
        return Err(Error::Shape(format!("{} mask labels for {n} pixels", mask.len())));
    }
    let target = one_hot(mask, k)?;
    let mut tape = Tape::new();
    let p = tape.constant(rows);
    let loss = jaccard_graph(&mut tape, p, &target)?;
    tape.value(loss).item()
}

/// Confusion counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn from_labels(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<Self> {
        let mut c = Self::new(num_classes);
        c.add(pred, truth)?;
        Ok(c)
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions vs {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Data(format!("class id {} outside 0..{k}", p.max(t))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn metrics(&self) -> SegMetrics {
        let k = self.num_classes;
        let total: u64 = self.counts.iter().sum();
        let trace: u64 = (0..k).map(|c| self.get(c, c)).sum();
        let mut per_class_iou = Vec::with_capacity(k);
        let mut f1s = Vec::new();
        for c in 0..k {
            let tp = self.get(c, c);
            let truth_c: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred_c: u64 = (0..k).map(|t| self.get(t, c)).sum();
            if truth_c == 0 && pred_c == 0 {
                per_class_iou.push(None);
                continue;
            }
            let (fn_, fp) = (truth_c - tp, pred_c - tp);
            per_class_iou.push(Some(tp as f64 / (tp + fp + fn_) as f64));
            f1s.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        SegMetrics {
            oa: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            miou: mean(&present),
            f1: mean(&f1s),
            per_class_iou,
            confusion: self.clone(),
        }
    }
}

/// Scores derived from one confusion matrix. `per_class_iou` is `None` for
/// classes that appear in neither prediction nor truth; such classes are left
/// out of the mIoU and macro-F1 means.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub oa: f64,
    pub miou: f64,
    pub f1: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: Confusion,
}

pub fn compute_metrics(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<SegMetrics> {
    Ok(Confusion::from_labels(pred, truth, num_classes)?.metrics())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    Frozen,
    Finetune,
}

impl std::fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeMode::Frozen => "frozen",
            ProbeMode::Finetune => "finetune",
        })
    }
}

impl std::str::FromStr for ProbeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(ProbeMode::Frozen),
            "finetune" => Ok(ProbeMode::Finetune),
            other => config_err(format!("unknown probe mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    /// Tiles per optimizer step.
    pub batch_tiles: usize,
    pub adam: AdamConfig,
    pub mode: ProbeMode,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 20,
            batch_tiles: 8,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            mode: ProbeMode::Frozen,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_tiles == 0 {
            return config_err("probe hidden width, epochs and batch size must be positive");
        }
        self.adam.validate()
    }
}

/// Two-layer per-pixel classifier ending in a softmax. Features are first
/// standardized with fixed per-column statistics taken from the training
/// pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    pub params: ParameterVector,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl SegHead {
    pub fn init(feature_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = substream(seed, PROBE_TAG, 1, 0);
        let mut layer = |fan_in: usize, fan_out: usize| -> Result<Tensor> {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            Tensor::new(vec![fan_in, fan_out], data)
        };
        let params = ParameterVector::from_entries(vec![
            ("head.0.weight".into(), layer(feature_dim, hidden)?),
            ("head.0.bias".into(), Tensor::zeros(&[hidden])),
            ("head.1.weight".into(), layer(hidden, num_classes)?),
            ("head.1.bias".into(), Tensor::zeros(&[num_classes])),
        ])?;
        Ok(Self {
            params,
            num_classes,
            feature_dim,
            feature_mean: vec![0.0; feature_dim],
            feature_std: vec![1.0; feature_dim],
        })
    }

    /// Sets the standardization statistics from `N×F` training features.
    pub fn fit_normalization(&mut self, features: &Tensor) -> Result<()> {
        let (n, f) = features.dims2()?;
        if f != self.feature_dim {
            return Err(Error::Shape(format!(
                "{f} feature columns, head expects {}",
                self.feature_dim
            )));
        }
        let mean = column_sums(features)?
            .data()
            .iter()
            .map(|s| s / n as f64)
            .collect::<Vec<_>>();
        let mut var = vec![0.0; f];
        for row in features.data().chunks_exact(f) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        self.feature_std = var.iter().map(|v| (v / n as f64).sqrt().max(1e-6)).collect();
        self.feature_mean = mean;
        Ok(())
    }

    /// Sets the output bias to log class frequencies of the one-hot targets,
    /// so that every class starts at its prior probability.
    pub fn set_class_priors(&mut self, targets: &[Tensor]) -> Result<()> {
        let k = self.num_classes;
        let mut counts = vec![1.0; k];
        for t in targets {
            for (c, v) in counts.iter_mut().zip(column_sums(t)?.data()) {
                *c += v;
            }
        }
        let total: f64 = counts.iter().sum();
        let bias = self
            .params
            .get_mut("head.1.bias")
            .ok_or_else(|| Error::Shape("head without output bias".into()))?;
        for (b, c) in bias.data_mut().iter_mut().zip(&counts) {
            *b = (c / total).ln();
        }
        Ok(())
    }

    /// Row probabilities for `N×F` features.
    pub fn graph(&self, tape: &mut Tape, vars: &ParamVars, features: Var) -> Result<Var> {
        let f = self.feature_dim;
        let shift = tape.constant(Tensor::new(vec![f], self.feature_mean.iter().map(|m| -m).collect())?);
        let mut diag = vec![0.0; f * f];
        for (i, s) in self.feature_std.iter().enumerate() {
            diag[i * f + i] = 1.0 / s;
        }
        let scale = tape.constant(Tensor::new(vec![f, f], diag)?);
        let centered = tape.add_bias(features, shift)?;
        let features = tape.matmul(centered, scale)?;
        let h = tape.matmul(features, vars.get("head.0.weight")?)?;
        let h = tape.add_bias(h, vars.get("head.0.bias")?)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, vars.get("head.1.weight")?)?;
        let o = tape.add_bias(o, vars.get("head.1.bias")?)?;
        tape.softmax_rows(o)
    }
}

/// Number of per-pixel feature columns the encoder exposes.
pub fn pixel_feature_dim(cfg: &EncoderConfig) -> usize {
    match cfg.kind {
        EncoderKind::TinyConv => cfg.hidden_widths.iter().sum(),
        EncoderKind::Mlp => cfg.input_shape.0 + cfg.trunk_dim(),
    }
}

/// `(B·H·W)×F` per-pixel features. Convolutional maps are upsampled back to
/// input resolution and concatenated; the MLP pairs each pixel's colour with
/// its image's trunk vector.
pub fn pixel_features(tape: &mut Tape, vars: &ParamVars, cfg: &EncoderConfig, images: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(images).dims4()?;
    let (trunk, maps) = trunk_forward(tape, vars, cfg, images)?;
    match cfg.kind {
        EncoderKind::TinyConv => {
            let mut cols = Vec::with_capacity(maps.len());
            for m in maps {
                let (_, _, mh, mw) = tape.value(m).dims4()?;
                if h % mh != 0 || w % mw != 0 || h / mh != w / mw {
                    return config_err(format!("feature map {mh}x{mw} does not tile a {h}x{w} input"));
                }
                let up = tape.upsample_nearest(m, h / mh)?;
                cols.push(tape.channels_to_rows(up)?);
            }
            tape.concat_cols(&cols)
        }
        EncoderKind::Mlp => {
            let rgb = tape.channels_to_rows(images)?;
            let t = tape.repeat_rows(trunk, h * w)?;
            tape.concat_cols(&[rgb, t])
        }
    }
}

fn precompute_features(params: &ParameterVector, cfg: &EncoderConfig, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, params);
    let x = tape.constant(images.clone());
    let f = pixel_features(&mut tape, &vars, cfg, x)?;
    Ok(tape.value(f).clone())
}

fn argmax_rows(probs: &Tensor) -> Result<Vec<u8>> {
    let (n, k) = probs.dims2()?;
    Ok((0..n)
        .map(|i| {
            let row = &probs.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Result of one probe run.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub head: SegHead,
    /// Encoder parameters after probing (changed only in finetune mode).
    pub encoder: ParameterVector,
    pub metrics: SegMetrics,
    pub final_train_loss: f64,
}

/// Trains a head on the `fraction` view of `dataset` and scores it on the
/// test split.
pub fn train_probe(ckpt: &Checkpoint, dataset: &TaskDataset, fraction: f64, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let enc_cfg = &ckpt.encoder_config;
    let t = dataset.tile_size;
    if enc_cfg.input_shape != (3, t, t) {
        return config_err(format!(
            "encoder expects {:?}, tiles are 3x{t}x{t}",
            enc_cfg.input_shape
        ));
    }
    let view = label_fraction_view(dataset, fraction, cfg.seed)?;
    let train: &[LabeledTile] = &view.labeled_train;
    let images = stack_images(train.iter().map(|tile| &tile.image))?;
    let k = dataset.num_classes;
    let per_tile = t * t;
    let targets: Vec<Tensor> = train
        .iter()
        .map(|tile| one_hot(tile.mask.labels(), k))
        .collect::<Result<_>>()?;

    let feature_dim = pixel_feature_dim(enc_cfg);
    let mut head = SegHead::init(feature_dim, cfg.hidden, k, cfg.seed)?;
    let initial_features = precompute_features(&ckpt.params, enc_cfg, &images)?;
    head.fit_normalization(&initial_features)?;
    head.set_class_priors(&targets)?;
    let frozen_features = match cfg.mode {
        ProbeMode::Frozen => Some(initial_features),
        ProbeMode::Finetune => None,
    };
    let mut params = match cfg.mode {
        ProbeMode::Frozen => head.params.clone(),
        ProbeMode::Finetune => {
            let mut all = ckpt.params.clone();
            for (n, v) in head.params.entries() {
                all.push(n.clone(), v.clone())?;
            }
            all
        }
    };
    let mut adam = AdamState::new(cfg.adam, &params);
    let n = train.len();
    let batch = cfg.batch_tiles.min(n);
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, PROBE_TAG, 0, epoch as u64));
        for idx in order.chunks(batch) {
            let mut target_rows = Vec::with_capacity(idx.len() * per_tile * k);
            for &i in idx {
                target_rows.extend_from_slice(targets[i].data());
            }
            let target = Tensor::new(vec![idx.len() * per_tile, k], target_rows)?;
            let pixel_rows: Vec<usize> = idx.iter().flat_map(|&i| i * per_tile..(i + 1) * per_tile).collect();
            let (loss, grads) = match &frozen_features {
                Some(feats) => {
                    let f = feats.select_rows(&pixel_rows)?;
                    numerics::value_and_grad(&params, |tape, vars| {
                        let x = tape.constant(f.clone());
                        let p = head.graph(tape, vars, x)?;
                        jaccard_graph(tape, p, &target)
                    })?
                }
                None => {
                    let x_batch = images.select_rows(idx)?;
                    numerics::value_and_grad(&params, |tape, vars| {
                        let x = tape.constant(x_batch.clone());
                        let f = pixel_features(tape, vars, enc_cfg, x)?;
                        let p = head.graph(tape, vars, f)?;
                        jaccard_graph(tape, p, &target)
                    })?
                }
            };
            adam.step(&mut params, &grads)?;
            last_loss = loss;
        }
    }

    let (encoder, head_params) = match cfg.mode {
        ProbeMode::Frozen => (ckpt.params.clone(), params),
        ProbeMode::Finetune => {
            let mut enc = ParameterVector::new();
            let mut hp = ParameterVector::new();
            for (name, v) in params.entries() {
                if name.starts_with("head.") {
                    hp.push(name.clone(), v.clone())?;
                } else {
                    enc.push(name.clone(), v.clone())?;
                }
            }
            (enc, hp)
        }
    };
    let head = SegHead {
        params: head_params,
        ..head
    };
    let metrics = dataset
        .test()
        .evaluate(k, |imgs| predict(&encoder, enc_cfg, &head, imgs))?;
    Ok(ProbeOutcome {
        head,
        encoder,
        metrics,
        final_train_loss: last_loss,
    })
}

/// Per-pixel argmax labels for `N×3×H×W` images, row-major per image.
pub fn predict(encoder: &ParameterVector, cfg: &EncoderConfig, head: &SegHead, images: &Tensor) -> Result<Vec<u8>> {
    let feats = precompute_features(encoder, cfg, images)?;
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, &head.params);
    let x = tape.constant(feats);
    let p = head.graph(&mut tape, &vars, x)?;
    argmax_rows(tape.value(p))
}

/// One probe measurement taken after a continual step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Zero-based continual step after which the measurement was taken.
    pub step: usize,
    pub task: String,
    pub miou: f64,
    /// Barlow Twins loss on the task's validation images.
    pub val_bt_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingRow {
    pub task: String,
    pub miou_at_own_end: f64,
    pub miou_after_final: f64,
    /// `miou_at_own_end − miou_after_final`
    pub forgetting: f64,
    /// `val_bt_loss_after_final − val_bt_loss_at_own_end`
    pub bt_drift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingReport {
    pub rows: Vec<ForgettingRow>,
}

impl ForgettingReport {
    pub fn get(&self, task: &str) -> Option<&ForgettingRow> {
        self.rows.iter().find(|r| r.task == task)
    }
}

/// Forgetting of each task in `task_order` between the end of its own step and
/// the end of the last step.
pub fn forgetting_report(task_order: &[String], records: &[StepRecord]) -> Result<ForgettingReport> {
    if task_order.is_empty() {
        return Err(Error::Data("forgetting report needs at least one task".into()));
    }
    let lookup: BTreeMap<(usize, &str), &StepRecord> = records.iter().map(|r| ((r.step, r.task.as_str()), r)).collect();
    let last = task_order.len() - 1;
    let find = |step: usize, task: &str| {
        lookup
            .get(&(step, task))
            .copied()
            .ok_or_else(|| Error::Data(format!("no probe record for task `{task}` after step {step}")))
    };
    let rows = task_order
        .iter()
        .enumerate()
        .map(|(k, task)| {
            let own = find(k, task)?;
            let fin = find(last, task)?;
            Ok(ForgettingRow {
                task: task.clone(),
                miou_at_own_end: own.miou,
                miou_after_final: fin.miou,
                forgetting: own.miou - fin.miou,
                bt_drift: fin.val_bt_loss - own.val_bt_loss,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ForgettingReport { rows })
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub encoder: String,
    pub task: String,
    pub fraction: f64,
    pub seed: u64,
    pub metrics: SegMetrics,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics csv: {e}"))
}

/// Writes rows with columns `encoder, task, fraction, seed, oa, miou, f1,
/// iou_0 … iou_{K−1}, confusion`. Absent classes leave their IoU cell empty;
/// the confusion counts are space separated, truth-major.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<String> {
    let k = rows.first().map_or(0, |r| r.metrics.confusion.num_classes());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["encoder", "task", "fraction", "seed", "oa", "miou", "f1"]
        .map(String::from)
        .to_vec();
    header.extend((0..k).map(|c| format!("iou_{c}")));
    header.push("confusion".into());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let m = &r.metrics;
        if m.confusion.num_classes() != k {
            return Err(Error::Shape("metrics rows disagree on class count".into()));
        }
        let mut rec = vec![
            r.encoder.clone(),
            r.task.clone(),
            r.fraction.to_string(),
            r.seed.to_string(),
            m.oa.to_string(),
            m.miou.to_string(),
            m.f1.to_string(),
        ];
        rec.extend(
            m.per_class_iou
                .iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
        );
        rec.push(
            m.confusion
                .counts()
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Parses [`metrics_to_csv`] output, checking every score against the
/// confusion counts it was derived from.
pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    let k = header.iter().filter(|h| h.starts_with("iou_")).count();
    if header.len() != 8 + k {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    let bad = |what: &str, v: &str| Error::Format(format!("bad {what} `{v}` in metrics csv"));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize, what: &str| rec[i].parse::<f64>().map_err(|_| bad(what, &rec[i]));
        let counts = rec[7 + k]
            .split_whitespace()
            .map(|c| c.parse::<u64>().map_err(|_| bad("count", c)))
            .collect::<Result<Vec<_>>>()?;
        let metrics = Confusion::from_counts(k, counts)?.metrics();
        let per_class = (0..k)
            .map(|c| match &rec[7 + c] {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad("iou", v)),
            })
            .collect::<Result<Vec<Option<f64>>>>()?;
        if [num(4, "oa")?, num(5, "miou")?, num(6, "f1")?] != [metrics.oa, metrics.miou, metrics.f1]
            || per_class != metrics.per_class_iou
        {
            return Err(Error::Format(format!(
                "scores disagree with confusion counts in row {}",
                rows.len() + 1
            )));
        }
        rows.push(MetricsRow {
            encoder: rec[0].to_string(),
            task: rec[1].to_string(),
            fraction: num(2, "fraction")?,
            seed: rec[3].parse().map_err(|_| bad("seed", &rec[3]))?,
            metrics,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_examples() {
        // uniform probabilities over 2 classes, all 4 pixels of class 0
        let probs = Tensor::full(&[1, 2, 2, 2], 0.5);
        let loss = jaccard_loss(&probs, &[0, 0, 0, 0]).unwrap();
        assert!((loss - 8.0 / 15.0).abs() < 1e-12);

        let mut exact = vec![0.0; 8];
        let mask = [0u8, 1, 1, 0];
        for (p, &l) in mask.iter().enumerate() {
            exact[l as usize * 4 + p] = 1.0;
        }
        let exact = Tensor::new(vec![1, 2, 2, 2], exact).unwrap();
        assert!(jaccard_loss(&exact, &mask).unwrap().abs() < 1e-15);
        assert!(jaccard_loss(&exact, &[0, 1]).is_err());
    }

    #[test]
    fn metrics_worked_example() {
        let m = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.confusion.counts(), &[1, 1, 0, 2]);
        assert_eq!(m.oa, 0.75);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-12);
        assert!((m.f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_and_absent_classes() {
        let m = compute_metrics(&[0, 2, 2], &[0, 2, 2], 4).unwrap();
        assert_eq!((m.oa, m.miou, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(m.per_class_iou, vec![Some(1.0), None, Some(1.0), None]);
    }

    #[test]
    fn class_missed_entirely_counts_as_zero() {
        let m = compute_metrics(&[0, 0], &[0, 1], 2).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(0.0)]);
    }

    #[test]
    fn forgetting_single_task_is_zero() {
        let rec = StepRecord {
            step: 0,
            task: "a".into(),
            miou: 0.4,
            val_bt_loss: 3.0,
        };
        let rep = forgetting_report(&["a".into()], &[rec]).unwrap();
        assert_eq!(rep.rows[0].forgetting, 0.0);
        assert_eq!(rep.rows[0].bt_drift, 0.0);
        assert!(forgetting_report(&["a".into(), "b".into()], &[]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let rows = vec![MetricsRow {
            encoder: "cbt, λ=0.1".into(),
            task: "droneoid".into(),
            fraction: 0.5,
            seed: 7,
            metrics: compute_metrics(&[0, 1, 1, 3], &[0, 0, 1, 3], 4).unwrap(),
        }];
        let text = metrics_to_csv(&rows).unwrap();
        assert!(text.contains("\"cbt, λ=0.1\""));
        assert_eq!(metrics_from_csv(&text).unwrap(), rows);
    }
}
