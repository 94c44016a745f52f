//! Loss, AdamW, early stopping, the epoch loop, and evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, Sample, DISEASED};
use crate::error::{Error, Result};
use crate::metrics::{self, DatasetMetrics, IndexMask, MetricSet, ReportRow};
use crate::model::{checkpoint, ModelConfig, SegModel};
use crate::params::Module;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1.0;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,f1,se,sp,ac,js,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 0.5, dice: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub improvement_epsilon: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// When set, the learning rate of epoch `e` (from 0) is
    /// `learning_rate / (1 + d·e)`. Off by default.
    pub lr_decay_per_epoch: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            improvement_epsilon: 1e-4,
            loss_weights: LossWeights::default(),
            seed: 0,
            lr_decay_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.learning_rate) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be at least 1");
        }
        if !(self.improvement_epsilon.is_finite() && self.improvement_epsilon >= 0.0) {
            return bad("improvement_epsilon must be non-negative");
        }
        let w = self.loss_weights;
        if !(w.ce.is_finite() && w.dice.is_finite() && w.ce >= 0.0 && w.dice >= 0.0 && w.ce + w.dice > 0.0) {
            return bad("loss_weights must be non-negative and not both zero");
        }
        if let Some(d) = self.lr_decay_per_epoch {
            if !(d.is_finite() && d >= 0.0) {
                return bad("lr_decay_per_epoch must be non-negative");
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_per_epoch {
            Some(d) => self.learning_rate / (1.0 + d * epoch as f64),
            None => self.learning_rate,
        }
    }
}

// ------------------------------------------------------------------ run config

/// Flat JSON view of [`ModelConfig`] and [`TrainConfig`]. Keys are the
/// field names of both; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn keys_of<S: Serialize>(v: &S) -> BTreeSet<String> {
    match serde_json::to_value(v).expect("config serializes") {
        serde_json::Value::Object(m) => m.into_iter().map(|(k, _)| k).collect(),
        _ => BTreeSet::new(),
    }
}

impl RunConfig {
    pub fn from_value(value: serde_json::Value) -> std::result::Result<Self, String> {
        let serde_json::Value::Object(map) = value else {
            return Err("config must be a JSON object".into());
        };
        let model_keys = keys_of(&ModelConfig::default());
        let train_keys = keys_of(&TrainConfig::default());
        let (mut m, mut t) = (serde_json::Map::new(), serde_json::Map::new());
        for (k, v) in map {
            if model_keys.contains(&k) {
                m.insert(k, v);
            } else if train_keys.contains(&k) {
                t.insert(k, v);
            } else {
                return Err(format!("unknown config key '{k}'"));
            }
        }
        let model = serde_json::from_value(m.into()).map_err(|e| e.to_string())?;
        let train = serde_json::from_value(t.into()).map_err(|e| e.to_string())?;
        Ok(RunConfig { model, train })
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_value(value)
            .map_err(|m| Error::Config(format!("{}: {m}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> serde_json::Value {
        let mut out = serde_json::Map::new();
        for v in [
            serde_json::to_value(&self.model).expect("serializes"),
            serde_json::to_value(&self.train).expect("serializes"),
        ] {
            if let serde_json::Value::Object(m) = v {
                out.extend(m);
            }
        }
        out.into()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

// ------------------------------------------------------------------ loss

/// Handles to the loss and its two terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    /// `1 − mean_k Dice_k`.
    pub dice: Var,
}

fn per_class<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    // [N,K,H,W] → [K]
    let s = g.shape(x).to_vec();
    let summed = g.sum_axis(x, 0)?;
    let flat = g.reshape(summed, &[s[1], s[2] * s[3]])?;
    let out = g.sum_axis(flat, 1)?;
    if s[1] == 1 {
        return g.reshape(out, &[1]);
    }
    Ok(out)
}

/// Weighted sum of mean pixel cross-entropy and `1 − mean soft Dice`
/// over classes, for logits `[N,K,H,W]` against `N` index masks.
pub fn loss_terms<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    masks: &[IndexMask],
    weights: LossWeights,
) -> Result<LossTerms> {
    let s = g.shape(logits).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("loss", format!("logits must be [N,K,H,W], got {s:?}")));
    }
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    if masks.len() != n {
        return Err(Error::shape("loss", format!("{n} logit maps for {} masks", masks.len())));
    }
    let mut onehot = vec![T::zero(); n * k * h * w];
    let mut counts = vec![0usize; k];
    for (b, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(Error::shape(
                "loss",
                format!("mask {}x{} for {h}x{w} logits", m.height, m.width),
            ));
        }
        for (p, &c) in m.data.iter().enumerate() {
            let c = c as usize;
            if c >= k {
                return Err(Error::Data(format!("mask class {c} with only {k} logit channels")));
            }
            onehot[(b * k + c) * h * w + p] = T::one();
            counts[c] += 1;
        }
    }
    let t = g.constant(&s, onehot)?;

    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, t)?;
    let total = g.sum(picked)?;
    let ce = g.scale(total, -T::one() / T::c((n * h * w) as f64))?;

    let p = g.softmax(logits, 1)?;
    let pt = g.mul(p, t)?;
    let inter = per_class(g, pt)?;
    let psum = per_class(g, p)?;
    let tsum = g.constant(&[k], counts.iter().map(|&c| T::c(c as f64)).collect())?;
    let eps = T::c(DICE_EPS);
    let num = g.scale(inter, T::c(2.0))?;
    let num = g.add_scalar(num, eps)?;
    let den = g.add(psum, tsum)?;
    let den = g.add_scalar(den, eps)?;
    let ratio = g.div(num, den)?;
    let mean_dice = g.mean(ratio)?;
    let neg = g.scale(mean_dice, -T::one())?;
    let dice = g.add_scalar(neg, T::one())?;

    let a = g.scale(ce, T::c(weights.ce))?;
    let b = g.scale(dice, T::c(weights.dice))?;
    let total = g.add(a, b)?;
    Ok(LossTerms { total, ce, dice })
}

pub fn loss<T: Scalar>(g: &mut Graph<T>, logits: Var, masks: &[IndexMask], weights: LossWeights) -> Result<Var> {
    Ok(loss_terms(g, logits, masks, weights)?.total)
}

// ------------------------------------------------------------------ optimizer

/// Moment accumulators, one pair per parameter tensor in visiting order.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { step: 0, m: Vec::new(), v: Vec::new() }
    }
}

/// One AdamW update from the gradients stored on each parameter:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`.
pub fn optimizer_step<T: Scalar, M: Module<T>>(
    module: &mut M,
    state: &mut AdamState<T>,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut missing = None;
    let mut count = 0;
    module.visit_params("", &mut |name, t| {
        count += 1;
        if t.grad().is_none() && missing.is_none() {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::Contract(format!("no gradient stored for parameter {name}")));
    }
    if state.m.is_empty() {
        module.visit_params("", &mut |_, t| {
            state.m.push(vec![T::zero(); t.numel()]);
            state.v.push(vec![T::zero(); t.numel()]);
        });
    } else if state.m.len() != count {
        return Err(Error::Contract(format!(
            "optimizer state holds {} tensors, module has {count}",
            state.m.len()
        )));
    }
    state.step += 1;
    let t_step = state.step as i32;
    let (b1, b2) = (T::c(ADAM_BETA1), T::c(ADAM_BETA2));
    let c1 = T::c(1.0 - ADAM_BETA1.powi(t_step));
    let c2 = T::c(1.0 - ADAM_BETA2.powi(t_step));
    let lr = T::c(learning_rate);
    let decay = T::c(learning_rate * weight_decay);
    let eps = T::c(ADAM_EPS);
    let one = T::one();
    let mut i = 0;
    let (ms, vs) = (&mut state.m, &mut state.v);
    let mut res = Ok(());
    module.visit_params_mut("", &mut |name, t| {
        let (m, v) = (&mut ms[i], &mut vs[i]);
        i += 1;
        if m.len() != t.numel() {
            res = Err(Error::Contract(format!("optimizer state size changed for {name}")));
            return;
        }
        let g = t.grad().expect("checked above").to_vec();
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *p = *p - lr * mh / (vh.sqrt() + eps) - decay * *p;
        }
    });
    res
}

// ------------------------------------------------------------------ early stopping

/// Tracks the best validation loss; stops after `patience` consecutive
/// epochs without an improvement larger than `epsilon`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub epsilon: f64,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub stagnant: usize,
    epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, epsilon: f64) -> Self {
        EarlyStopping {
            patience,
            epsilon,
            best: f64::INFINITY,
            best_epoch: None,
            stagnant: 0,
            epochs: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        self.epochs += 1;
        let improved = val_loss < self.best - self.epsilon || (self.best_epoch.is_none() && val_loss.is_finite());
        if improved {
            self.best = val_loss;
            self.best_epoch = Some(self.epochs);
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
        }
        StopDecision {
            improved,
            stop: self.stagnant >= self.patience,
        }
    }
}

// ------------------------------------------------------------------ epoch loop

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Pooled validation metrics for the diseased class.
    pub val_metrics: MetricSet,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let m = self.val_metrics;
        format!(
            "{},{:.9e},{:.9e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.val_loss, m.f1, m.se, m.sp, m.ac, m.js, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the epoch with the best validation loss.
    pub best: SegModel<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Per-pixel argmax over the class axis of `[N,K,H,W]` logits.
pub fn argmax_masks<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<IndexMask>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] > u8::MAX as usize {
        return Err(Error::shape("argmax", format!("expected [N,K,H,W], got {s:?}")));
    }
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let d = logits.data();
    (0..n)
        .map(|b| {
            let data = (0..h * w)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(b * k + c) * h * w + p] > d[(b * k + best) * h * w + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            IndexMask::new(h, w, data)
        })
        .collect()
}

/// Loss and predicted masks over `samples` without recording gradients.
pub fn score(
    model: &SegModel<f32>,
    samples: &[&Sample],
    batch_size: usize,
    weights: LossWeights,
) -> Result<(f64, Vec<IndexMask>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = data::stack(chunk)?;
        let mut g = Graph::new();
        let shape = batch.images.shape().to_vec();
        let x = g.constant(&shape, batch.images.into_data())?;
        let y = model.forward(&mut g, x)?;
        let l = loss(&mut g, y, &batch.masks, weights)?;
        total += f64::from(g.value(l)[0]) * chunk.len() as f64;
        preds.extend(argmax_masks(&g.tensor(y))?);
    }
    Ok((total / samples.len() as f64, preds))
}

fn check_sizes(model: &ModelConfig, samples: &[&Sample]) -> Result<()> {
    for s in samples {
        let sh = s.image.shape();
        if sh[1] != model.image_size || sh[2] != model.image_size || sh[0] != model.in_channels {
            return Err(Error::Data(format!(
                "sample {} is {:?}, model expects [{}, {}, {}]",
                s.id, sh, model.in_channels, model.image_size, model.image_size
            )));
        }
    }
    Ok(())
}

/// Trains `model` in place on `train`, selecting on `val` loss. `on_epoch`
/// sees every record, the current parameters, and whether they are the
/// new best.
pub fn fit(
    mut model: SegModel<f32>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &SegModel<f32>, bool) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    check_sizes(&model.config, train)?;
    check_sizes(&model.config, val)?;
    let num_classes = model.config.num_classes as u8;
    let mut state = AdamState::new();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.improvement_epsilon);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        let mut sum = 0.0;
        for batch in data::batches(train, cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut g = Graph::new();
            let shape = batch.images.shape().to_vec();
        let x = g.constant(&shape, batch.images.into_data())?;
            let y = model.forward(&mut g, x)?;
            let l = loss(&mut g, y, &batch.masks, cfg.loss_weights)?;
            sum += f64::from(g.value(l)[0]) * batch.masks.len() as f64;
            g.backward(l)?;
            model.zero_grads();
            model.store_grads(&g)?;
            optimizer_step(&mut model, &mut state, lr, cfg.weight_decay)?;
        }
        let train_loss = sum / train.len() as f64;
        let (val_loss, preds) = score(&model, val, cfg.batch_size, cfg.loss_weights)?;
        let truths: Vec<IndexMask> = val.iter().map(|s| s.mask.clone()).collect();
        let pos = DISEASED.min(num_classes.saturating_sub(1));
        let m = metrics::evaluate_dataset(&preds, &truths, pos, num_classes)?;
        let decision = stopper.observe(val_loss);
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            val_metrics: m.pooled,
            seconds: start.elapsed().as_secs_f64(),
        };
        if decision.improved {
            best = model.clone();
        }
        on_epoch(&record, &model, decision.improved)?;
        history.push(record);
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    Ok(FitOutcome {
        best,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        history,
        stopped_early,
    })
}

/// Paths written by [`train`].
#[derive(Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
    pub split: PathBuf,
    pub outcome: FitOutcome,
}

/// Full run: load, split, fit, and write `best.ckpt`, `train_log.csv`,
/// `config.json` and `split.json` under `out_dir`.
pub fn train(cfg: &RunConfig, dataset_root: &Path, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let samples = data::load_dataset(dataset_root)?;
    let split = data::split_dataset(&samples, cfg.train.seed)?;
    let train_set = data::select(&samples, &split.train)?;
    let val_set = data::select(&samples, &split.val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "{} samples leave an empty train or validation split",
            samples.len()
        )));
    }
    check_sizes(&cfg.model, &train_set)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let split_path = data::split_manifest_path(out_dir);
    split.save(&split_path)?;
    let config_path = out_dir.join("config.json");
    let json = serde_json::to_string_pretty(&cfg.to_value()).expect("serializes");
    fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;

    let ckpt = out_dir.join("best.ckpt");
    let log_path = out_dir.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;

    let model = SegModel::<f32>::init(&cfg.model, cfg.train.seed)?;
    let outcome = fit(model, &train_set, &val_set, &cfg.train, |rec, model, improved| {
        if improved {
            checkpoint::save_checkpoint(model, &ckpt)?;
        }
        writeln!(log, "{}", rec.csv_line()).map_err(|e| Error::io(&log_path, e))
    })?;
    Ok(TrainArtifacts {
        checkpoint: ckpt,
        log: log_path,
        config: config_path,
        split: split_path,
        outcome,
    })
}

/// Argmax predictions for each sample, in order.
pub fn predict(model: &SegModel<f32>, samples: &[&Sample], batch_size: usize) -> Result<Vec<IndexMask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = data::stack(chunk)?;
        out.extend(argmax_masks(&model.predict_logits(&batch.images)?)?);
    }
    Ok(out)
}

/// Metrics of a checkpoint over the ids of one split.
pub fn evaluate(
    model: &SegModel<f32>,
    samples: &[Sample],
    ids: &[String],
    positive_class: u8,
) -> Result<DatasetMetrics> {
    let set = data::select(samples, ids)?;
    if set.is_empty() {
        return Err(Error::Data("the requested split is empty".into()));
    }
    check_sizes(&model.config, &set)?;
    let preds = predict(model, &set, 8)?;
    let truths: Vec<IndexMask> = set.iter().map(|s| s.mask.clone()).collect();
    metrics::evaluate_dataset(&preds, &truths, positive_class, model.config.num_classes as u8)
}

/// Report rows for pooled and per-image-mean metrics.
pub fn report_rows(name: &str, m: &DatasetMetrics) -> Vec<ReportRow> {
    vec![
        ReportRow::new(format!("{name} (pooled)"), &m.pooled),
        ReportRow::new(format!("{name} (per-image mean)"), &m.mean_per_image),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (8, 100, 10));
        assert_eq!((c.learning_rate, c.weight_decay), (1e-3, 1e-4));
        assert_eq!(c.loss_weights, LossWeights { ce: 0.5, dice: 0.5 });
        assert!(c.lr_decay_per_epoch.is_none());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let v = serde_json::json!({"embed_dims": [8, 16, 32, 64], "patience": 3});
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!(c.model.embed_dims, vec![8, 16, 32, 64]);
        assert_eq!(c.train.patience, 3);
        let bad = serde_json::json!({"learning_rat": 0.1});
        assert!(RunConfig::from_value(bad).unwrap_err().contains("learning_rat"));
        let round = RunConfig::from_value(c.to_value()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn lr_decay_reading() {
        let mut c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(50), 1e-3);
        c.lr_decay_per_epoch = Some(1e-4);
        assert!((c.learning_rate_at(10) - 1e-3 / 1.001).abs() < 1e-18);
    }

    #[test]
    fn stopper_first_epoch_sets_best() {
        let mut s = EarlyStopping::new(2, 1e-4);
        assert!(s.observe(1.0).improved);
        assert!(!s.observe(0.99995).improved);
        assert!(s.observe(0.5).improved);
        assert_eq!(s.best_epoch, Some(3));
    }
}
