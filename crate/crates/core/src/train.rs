//! Base training, novel fine-tuning under the freeze policy, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::block::{apply_freeze, Stage};
use crate::data::{seed_stream, EpisodeSet, EpisodeSpec, Split};
use crate::error::{Result, ScsmError};
use crate::model::FewShotModel;
use crate::params::{ParamGroup, Sgd};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub novel_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub base_epochs: usize,
    pub novel_steps: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            novel_lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 16,
            base_epochs: 8,
            novel_steps: 2000,
            eval_batch: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Novel-only head, evaluated on novel classes.
    Novel,
    /// Joint base+novel head on a balanced K-shot set, evaluated on both.
    Generalized,
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::Novel => "fsod",
            FinetuneMode::Generalized => "gfsod",
        }
    }
}

impl std::str::FromStr for FinetuneMode {
    type Err = ScsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fsod" | "novel" => Ok(FinetuneMode::Novel),
            "gfsod" | "generalized" => Ok(FinetuneMode::Generalized),
            _ => Err(ScsmError::arg(format!("unknown fine-tune mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseOutcome {
    pub epoch_losses: Vec<f64>,
    pub base_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NovelOutcome {
    pub shots: usize,
    pub mode: FinetuneMode,
    pub batch: usize,
    pub steps: usize,
    /// Mean loss over each pass through the K-shot set.
    pub epoch_losses: Vec<f64>,
    pub novel_accuracy: f64,
    /// Only in generalized mode.
    pub base_accuracy: Option<f64>,
    pub backbone_checksum: String,
    pub wall_seconds: f64,
}

/// Fraction of `split` classified correctly, labels indexed by `classes`.
pub fn evaluate(model: &FewShotModel, split: &Split, classes: &[usize], batch: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(ScsmError::arg("cannot evaluate on an empty split"));
    }
    let labels = split.indexed_labels(classes)?;
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let logits = model.predict(split.batch(chunk))?;
        correct += argmax_rows(logits.data(), model.n_classes())
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == labels[i])
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

pub fn argmax_rows(data: &[f64], width: usize) -> Vec<usize> {
    data.chunks(width)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One SGD step on `idx`; returns the batch loss.
fn sgd_step(model: &mut FewShotModel, opt: &mut Sgd, split: &Split, labels: &[usize], idx: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(split.batch(idx));
    let logits = model.forward(&mut g, x)?;
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let loss = g.cross_entropy(logits, &y)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?.for_params(&g);
    opt.step(&mut model.store, &grads);
    Ok(value)
}

/// Trains every parameter on the base split. Batches come from the
/// `base/epoch{e}` streams of `seed`, so equal seeds give equal batches.
pub fn train_base(
    model: &mut FewShotModel,
    data: &Split,
    eval: &Split,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BaseOutcome> {
    if let Some(l) = data.labels.iter().chain(&eval.labels).find(|l| spec.novel_classes.contains(l)) {
        return Err(ScsmError::Contamination(format!("novel class {l} in the base-stage stream")));
    }
    if model.n_classes() != spec.base_classes.len() {
        return Err(ScsmError::arg(format!(
            "{}-way head for {} base classes",
            model.n_classes(),
            spec.base_classes.len()
        )));
    }
    let start = Instant::now();
    apply_freeze(Stage::Base, &mut model.store);
    let labels = data.indexed_labels(&spec.base_classes)?;
    let mut opt = Sgd::new(cfg.base_lr, cfg.momentum, cfg.weight_decay);
    let mut epoch_losses = Vec::with_capacity(cfg.base_epochs);
    for e in 0..cfg.base_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed_stream(seed, &format!("base/epoch{e}")));
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch) {
            total += sgd_step(model, &mut opt, data, &labels, chunk)?;
            n += 1;
        }
        epoch_losses.push(total / n as f64);
    }
    let base_accuracy = evaluate(model, eval, &spec.base_classes, cfg.eval_batch)?;
    Ok(BaseOutcome { epoch_losses, base_accuracy, wall_seconds: start.elapsed().as_secs_f64() })
}

fn ensure_frozen(model: &FewShotModel, checksum: &str) -> Result<()> {
    if !model.store.group_is_frozen(ParamGroup::Backbone) {
        return Err(ScsmError::PolicyViolation("backbone is trainable during the novel stage".into()));
    }
    if model.backbone_checksum() != checksum {
        return Err(ScsmError::PolicyViolation("backbone parameters changed during the novel stage".into()));
    }
    Ok(())
}

/// Fine-tunes a base model on `k` shots. The backbone must already be frozen
/// (see [`apply_freeze`]); this is re-checked, with a checksum, every step.
pub fn finetune_novel(
    model: &mut FewShotModel,
    set: &EpisodeSet,
    k: usize,
    mode: FinetuneMode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<NovelOutcome> {
    if k == 0 || k > set.spec.shots {
        return Err(ScsmError::arg(format!("K={k} outside 1..={}", set.spec.shots)));
    }
    let checksum = model.backbone_checksum();
    ensure_frozen(model, &checksum)?;
    let start = Instant::now();
    let spec = &set.spec;
    let (train, classes, keep) = match mode {
        FinetuneMode::Novel => (set.novel_train.first_per_class(k), spec.novel_classes.clone(), 0),
        FinetuneMode::Generalized => (set.balanced_shots(k), spec.all_classes(), spec.base_classes.len()),
    };
    model.reset_head(classes.len(), keep, &mut seed_stream(seed, &format!("novel/head/k{k}")))?;
    let labels = train.indexed_labels(&classes)?;
    let batch = cfg.batch.min(train.len());
    let mut opt = Sgd::new(cfg.novel_lr, cfg.momentum, cfg.weight_decay);
    let mut shuffle = seed_stream(seed, &format!("novel/shuffle/k{k}/{}", mode.name()));
    let mut order: Vec<usize> = Vec::new();
    let mut epoch_losses = Vec::new();
    let (mut total, mut count) = (0.0, 0usize);
    for _ in 0..cfg.novel_steps {
        if order.len() < batch {
            if count > 0 {
                epoch_losses.push(total / count as f64);
                (total, count) = (0.0, 0);
            }
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut shuffle);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        total += sgd_step(model, &mut opt, &train, &labels, &idx)?;
        count += 1;
        ensure_frozen(model, &checksum)?;
    }
    if count > 0 {
        epoch_losses.push(total / count as f64);
    }
    let novel_accuracy = evaluate(model, &set.novel_eval, &classes, cfg.eval_batch)?;
    let base_accuracy = match mode {
        FinetuneMode::Novel => None,
        FinetuneMode::Generalized => Some(evaluate(model, &set.base_eval, &classes, cfg.eval_batch)?),
    };
    Ok(NovelOutcome {
        shots: k,
        mode,
        batch,
        steps: cfg.novel_steps,
        epoch_losses,
        novel_accuracy,
        base_accuracy,
        backbone_checksum: checksum,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::Variant;
    use crate::data::synthesize_dataset;
    use crate::model::ModelConfig;

    fn tiny() -> (EpisodeSet, TrainConfig) {
        let spec = EpisodeSpec { n_base: 2, shots: 2, eval_per_class: 2, ..Default::default() };
        let cfg = TrainConfig { base_epochs: 1, novel_steps: 3, batch: 8, ..Default::default() };
        (synthesize_dataset(&spec).unwrap(), cfg)
    }

    fn baseline(n: usize) -> FewShotModel {
        FewShotModel::new(ModelConfig { variant: Variant::Baseline, ..Default::default() }, n, 0).unwrap()
    }

    #[test]
    fn novel_labels_in_base_stream_are_rejected() {
        let (set, cfg) = tiny();
        let mut m = baseline(12);
        let mixed = set.base_train.concat(&set.novel_train);
        let r = train_base(&mut m, &mixed, &set.base_eval, &set.spec, &cfg, 0);
        assert!(matches!(r, Err(ScsmError::Contamination(_))));
    }

    #[test]
    fn unfrozen_backbone_is_a_policy_violation() {
        let (set, cfg) = tiny();
        let mut m = baseline(12);
        apply_freeze(Stage::Base, &mut m.store);
        let r = finetune_novel(&mut m, &set, 1, FinetuneMode::Novel, &cfg, 0);
        assert!(matches!(r, Err(ScsmError::PolicyViolation(_))));
    }

    #[test]
    fn generalized_mode_reports_both_partitions() {
        let (set, cfg) = tiny();
        let mut m = baseline(12);
        apply_freeze(Stage::Novel, &mut m.store);
        let before = m.backbone_checksum();
        let out = finetune_novel(&mut m, &set, 2, FinetuneMode::Generalized, &cfg, 0).unwrap();
        assert_eq!(m.n_classes(), 16);
        assert!(out.base_accuracy.is_some());
        assert!((0.0..=1.0).contains(&out.novel_accuracy));
        assert_eq!(before, m.backbone_checksum());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax_rows(&[0.0, 0.0, 1.0, 3.0, 3.0, 2.0], 3), vec![2, 0]);
    }
}
