//! End-to-end dual-branch training and evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, EvalItem, MetricsReport};
use super::sampling::{sample_frames, FrameSampling};
use crate::data::{DatasetMeta, VideoSample};
use crate::dtformer::Sampling;
use crate::error::{invalid, LairError, Result};
use crate::heads::{classify, predictions, HeadKind, LossBreakdown};
use crate::model::{ArchConfig, LairModel, ModelConfig, ObjectiveConfig, VideoGrid};
use crate::numerics::{clip_global_norm, Adam, Graph, NoiseKey, ParamStore};

const FRAME_SALT: u64 = 0x4652_414d;
const ORDER_SALT: u64 = 0x4f52_4445;
const PAIR_SALT: u64 = 0x5041_4952;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

/// Training configuration (TOML file form of `train`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Gumbel-Softmax temperature; annealed linearly to `temperature_end`
    /// over training when that is set.
    pub temperature: f64,
    pub temperature_end: Option<f64>,
    pub precision: Precision,
    pub train_split: String,
    pub eval_split: String,
    /// Stop once evaluation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub objective: ObjectiveConfig,
    pub model: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: 5.0,
            seed: 0,
            temperature: 1.0,
            temperature_end: None,
            precision: Precision::F64,
            train_split: "train".into(),
            eval_split: "test".into(),
            target_accuracy: None,
            objective: ObjectiveConfig::default(),
            model: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LairError::Parse {
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            field: "config".into(),
            message: e.message().to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid("lr and clip_norm must be positive"));
        }
        if !(self.temperature > 0.0) || self.temperature_end.is_some_and(|t| !(t > 0.0)) {
            return Err(invalid("Gumbel temperature must be positive"));
        }
        self.objective.weights.validate()
    }

    fn temperature_at(&self, step: u64, total: u64) -> f64 {
        match self.temperature_end {
            Some(end) if total > 1 => {
                let f = step as f64 / (total - 1) as f64;
                self.temperature + (end - self.temperature) * f.min(1.0)
            }
            _ => self.temperature,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    VideoOnly,
    OracleLanguage,
}

impl std::str::FromStr for EvalMode {
    type Err = LairError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video-only" => Ok(Self::VideoOnly),
            "oracle-language" => Ok(Self::OracleLanguage),
            other => Err(invalid(format!("unknown evaluation mode '{other}'"))),
        }
    }
}

/// One line of the per-epoch metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub loss: LossBreakdown,
    pub train_num: f64,
    pub eval: Option<MetricsReport>,
}

pub struct TrainOutcome {
    pub model: LairModel,
    pub history: Vec<EpochRecord>,
}

/// Uniformly sampled grid of a video (inference layout).
pub fn inference_grid(model: &LairModel, sample: &VideoSample) -> Result<VideoGrid> {
    let mut rng = NoiseKey::new(0, 0, 0).rng();
    let frames = sample_frames(sample.len(), model.config.t_frames, FrameSampling::Uniform, &mut rng)?;
    model.grid(sample, &frames)
}

/// Evaluates a frozen model with uniform frame sampling and noise-free
/// selection.
pub fn evaluate(model: &LairModel, samples: &[VideoSample], mode: EvalMode) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(invalid("evaluation split is empty"));
    }
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let grid = inference_grid(model, s)?;
        let mut g = Graph::new();
        let (branch, head) = match mode {
            EvalMode::VideoOnly => (model.visual_branch(&mut g, &grid, Sampling::Greedy, 1.0, 0)?, HeadKind::Video),
            EvalMode::OracleLanguage => {
                (model.semantic_branch(&mut g, &grid, Sampling::Greedy, 1.0, 0)?, HeadKind::Language)
            }
        };
        let p = classify(&mut g, &model.store, &model.heads, head, branch.encoded.z)?;
        let prediction = predictions(&g, p, model.config.multi_label).remove(0);
        let mask = &branch.encoded.mask;
        let key_total = grid.key.iter().zip(&grid.valid).filter(|(k, v)| **k && **v).count();
        let key_kept = (0..grid.key.len()).filter(|&i| grid.key[i] && mask.combined[i] > 0.5).count();
        items.push(EvalItem {
            prediction,
            labels: s.labels.clone(),
            retained: mask.num_retained,
            valid: grid.valid.iter().filter(|&&v| v).count(),
            key_total,
            key_kept,
        });
    }
    Ok(compute_metrics(&items, model.config.num_classes()))
}

fn mean_breakdown(acc: &[LossBreakdown]) -> LossBreakdown {
    let n = acc.len().max(1) as f64;
    let mut m = LossBreakdown {
        weights: acc.first().map(|b| b.weights).unwrap_or_default(),
        ..LossBreakdown::default()
    };
    for b in acc {
        m.l_v += b.l_v / n;
        m.l_s += b.l_s / n;
        m.l_cls += b.l_cls / n;
        m.l_sim += b.l_sim / n;
        m.l_tss += b.l_tss / n;
        m.l_xm += b.l_xm / n;
        m.total += b.total / n;
    }
    m
}

fn save_checkpoint(model: &LairModel, store: &ParamStore, config: &TrainConfig, path: &Path) -> Result<()> {
    let mut snapshot = model.clone();
    snapshot.store = store.clone();
    snapshot
        .checkpoint(config.seed, serde_json::to_value(config)?)?
        .save(path)
}

/// Trains a fresh model.
///
/// With `out_dir`, per-epoch records go to `metrics.jsonl` and the final
/// parameters to `model.ckpt`; a non-finite loss writes the parameters of
/// the last finished epoch to `last_good.ckpt` before failing.
pub fn train(
    config: &TrainConfig,
    meta: &DatasetMeta,
    train_set: &[VideoSample],
    eval_set: Option<&[VideoSample]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let mut model = LairModel::new(ModelConfig::from_meta(meta, config.model.clone()), config.seed)?;
    let mut opt = Adam::new(&model.store, config.lr);
    let mut metrics_out = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size) as u64;
    let total_steps = batches_per_epoch * config.epochs as u64;
    let mut history = Vec::new();
    let mut last_good = model.store.clone();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut NoiseKey::new(config.seed ^ ORDER_SALT, 0, epoch as u64).rng());
        let mut parts = Vec::new();
        let mut retained = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let step = opt.steps();
            let grids = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let mut rng = NoiseKey::new(config.seed ^ FRAME_SALT, i as u64, epoch as u64).rng();
                    let frames = sample_frames(s.len(), model.config.t_frames, FrameSampling::Random, &mut rng)?;
                    model.grid(s, &frames)
                })
                .collect::<Result<Vec<_>>>()?;
            let temperature = config.temperature_at(step, total_steps);
            let mut g = Graph::new();
            let fwd = model.forward_loss(
                &mut g,
                &grids,
                &config.objective,
                Sampling::Hard { seed: config.seed, step },
                temperature,
                NoiseKey::new(config.seed ^ PAIR_SALT, 0, step),
            );
            let fwd = match fwd {
                Ok(f) => f,
                Err(LairError::NonFinite(msg)) => return Err(abort(&model, &last_good, config, out_dir, epoch, msg)),
                Err(e) => return Err(e),
            };
            let mut grads = g.backward(fwd.total)?.param_grads(&model.store);
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(abort(&model, &last_good, config, out_dir, epoch, "non-finite gradient".into()));
            }
            clip_global_norm(&mut grads, config.clip_norm);
            opt.update(&mut model.store, &grads);
            retained += fwd.masks_v.iter().map(|m| m.num_retained).sum::<f64>();
            parts.push(fwd.breakdown);
        }
        last_good = model.store.clone();
        let eval = match eval_set {
            Some(e) if !e.is_empty() => Some(evaluate(&model, e, EvalMode::VideoOnly)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: opt.steps(),
            loss: mean_breakdown(&parts),
            train_num: retained / train_set.len() as f64,
            eval,
        };
        log::info!(
            "epoch {} loss {:.4} acc {}",
            record.epoch,
            record.loss.total,
            record.eval.as_ref().map_or("-".into(), |m| format!("{:.3}", m.accuracy))
        );
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        let reached = match (config.target_accuracy, &record.eval) {
            (Some(t), Some(m)) => m.accuracy >= t,
            _ => false,
        };
        history.push(record);
        if reached {
            break;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&model, &model.store, config, &dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { model, history })
}

fn abort(
    model: &LairModel,
    last_good: &ParamStore,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    epoch: usize,
    msg: String,
) -> LairError {
    let mut note = String::new();
    if let Some(dir) = out_dir {
        let path = dir.join("last_good.ckpt");
        match save_checkpoint(model, last_good, config, &path) {
            Ok(()) => note = format!("; last good parameters saved to {}", path.display()),
            Err(e) => note = format!("; saving last good parameters failed: {e}"),
        }
    }
    LairError::NonFinite(format!("training aborted in epoch {}: {msg}{note}", epoch + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SplitRatios, WorldSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            model: ArchConfig {
                d_hidden: 8,
                d_embed: 8,
                d_model: 16,
                box_resolution: 4,
                n_layers: 1,
                n_heads: 2,
                gpo_len: 8,
                selector_dim: 8,
                selector_hidden: 8,
                ..ArchConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn small_data() -> (DatasetMeta, Vec<VideoSample>) {
        let spec = WorldSpec {
            num_classes: 3,
            d_visual: 8,
            d_union: 8,
            ..WorldSpec::default()
        };
        let d = generate_dataset(&spec, 10, SplitRatios::default()).unwrap();
        (d.meta, d.samples)
    }

    #[test]
    fn config_parses_from_toml() {
        let c = TrainConfig::from_toml("epochs = 3\n[objective]\nsim = false\n[model]\nd_model = 16\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.objective.sim);
        assert_eq!(c.model.d_model, 16);
        assert!(TrainConfig::from_toml("epochs = \"x\"").is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (meta, data) = small_data();
        let a = train(&small_config(), &meta, &data, None, None).unwrap();
        let b = train(&small_config(), &meta, &data, None, None).unwrap();
        let ca = a.model.checkpoint(0, serde_json::Value::Null).unwrap().to_bytes();
        let cb = b.model.checkpoint(0, serde_json::Value::Null).unwrap().to_bytes();
        assert_eq!(ca, cb);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn disabled_scheme_terms_are_absent() {
        let (meta, data) = small_data();
        let mut c = small_config();
        c.epochs = 1;
        c.objective.sim = false;
        c.objective.tss = false;
        c.objective.xm = false;
        let out = train(&c, &meta, &data, None, None).unwrap();
        let l = out.history[0].loss;
        assert_eq!((l.l_sim, l.l_tss, l.l_xm), (0.0, 0.0, 0.0));
        assert!((l.total - l.l_cls).abs() < 1e-12);
    }
}
