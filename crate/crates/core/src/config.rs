//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::block::{Stage, Variant};
use crate::data::{EpisodeSpec, Jitter};
use crate::error::{Result, ScsmError};
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::train::{FinetuneMode, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    /// Variant for single-model commands.
    pub variant: Variant,
    /// Variants compared by the ablation.
    pub variants: Vec<Variant>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_base: usize,
    pub eval_per_class: usize,
    pub jitter: Jitter,
    pub mode: FinetuneMode,
    /// `None` probes the last stage.
    pub probe_stage: Option<usize>,
    pub q_list: Vec<f64>,
    pub probe: ProbeConfig,
    /// Shots used for the retention experiment.
    pub retention_k: usize,
    pub retention_variants: Vec<Variant>,
    pub top_k: usize,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Base,
            seeds: vec![0, 1, 2, 3, 4],
            ks: vec![1, 2, 5, 10],
            variant: Variant::SfmCsm,
            variants: vec![Variant::Baseline, Variant::Csm, Variant::SfmCsm],
            model: ModelConfig::default(),
            train: TrainConfig { base_epochs: 12, novel_steps: 200, ..TrainConfig::default() },
            n_base: 200,
            eval_per_class: 100,
            jitter: Jitter::default(),
            mode: FinetuneMode::Novel,
            probe_stage: None,
            q_list: vec![100.0, 80.0, 70.0, 60.0, 50.0],
            probe: ProbeConfig::default(),
            retention_k: 10,
            retention_variants: vec![Variant::Sfm, Variant::SfmCsm],
            top_k: 4,
            workers: 1,
            out_dir: PathBuf::from("scsm-out"),
            checkpoint: None,
        }
    }
}

/// Keys that only say where things live; they do not enter the hash.
const PATH_KEYS: [&str; 2] = ["out_dir", "checkpoint"];

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| ScsmError::arg(format!("bad entry '{s}' for {key}"))))
        .collect()
}

fn one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ScsmError::arg(format!("bad value '{v}' for {key}")))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_debug<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "stage" => self.stage = v.parse()?,
            "seeds" => self.seeds = list(key, v)?,
            "ks" => self.ks = list(key, v)?,
            "variant" => self.variant = v.parse()?,
            "variants" => self.variants = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
            "backbone_stages" => {
                self.model.backbone.stages = v
                    .split(',')
                    .map(|s| {
                        let (c, st) = s.trim().split_once(':').ok_or_else(|| ScsmError::arg(format!("bad stage '{s}'")))?;
                        Ok((one(key, c)?, one(key, st)?))
                    })
                    .collect::<Result<_>>()?
            }
            "extra_convs" => self.model.backbone.extra_convs = one(key, v)?,
            "ce_ratio" => self.model.ce_ratio = one(key, v)?,
            "heads" => self.model.heads = one(key, v)?,
            "p" => self.model.pool = one(key, v)?,
            "d" => self.model.inner = if v == "auto" { None } else { Some(one(key, v)?) },
            "conv_k" => self.model.conv_k = one(key, v)?,
            "scale_scores" => self.model.scale_scores = one(key, v)?,
            "square_input" => self.model.square_input = one(key, v)?,
            "dt_reading" => self.model.dt_reading = v.parse()?,
            "train_state" => self.model.train_state = one(key, v)?,
            "base_lr" => self.train.base_lr = one(key, v)?,
            "novel_lr" => self.train.novel_lr = one(key, v)?,
            "momentum" => self.train.momentum = one(key, v)?,
            "weight_decay" => self.train.weight_decay = one(key, v)?,
            "batch" => self.train.batch = one(key, v)?,
            "base_epochs" => self.train.base_epochs = one(key, v)?,
            "novel_steps" => self.train.novel_steps = one(key, v)?,
            "n_base" => self.n_base = one(key, v)?,
            "eval_per_class" => self.eval_per_class = one(key, v)?,
            "position_jitter" => self.jitter.position = one(key, v)?,
            "hue_jitter" => self.jitter.hue = one(key, v)?,
            "background_noise" => self.jitter.background_noise = one(key, v)?,
            "distractors" => self.jitter.distractors = one(key, v)?,
            "mode" => self.mode = v.parse()?,
            "probe_stage" => self.probe_stage = if v == "last" { None } else { Some(one(key, v)?) },
            "q_list" => self.q_list = list(key, v)?,
            "probe_reduction" => self.probe.reduction = one(key, v)?,
            "probe_steps" => self.probe.steps = one(key, v)?,
            "probe_lr" => self.probe.lr = one(key, v)?,
            "retention_k" => self.retention_k = one(key, v)?,
            "retention_variants" => {
                self.retention_variants = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?
            }
            "top_k" => self.top_k = one(key, v)?,
            "workers" => self.workers = one(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            _ => return Err(ScsmError::arg(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ScsmError::arg(format!("line {}: expected 'key = value'", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ScsmError::arg(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                ScsmError::Argument(m) => ScsmError::Argument(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScsmError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.ks.is_empty() || self.variants.is_empty() {
            return Err(ScsmError::arg("seeds, ks and variants must be non-empty"));
        }
        if self.ks.contains(&0) || self.retention_k == 0 {
            return Err(ScsmError::arg("shots K must be positive"));
        }
        if self.train.batch == 0 || self.workers == 0 {
            return Err(ScsmError::arg("batch and workers must be positive"));
        }
        self.model.backbone.validate()?;
        for (c, side) in self.model.backbone.stage_shapes() {
            self.model.block_config(c, side)?;
        }
        self.episode(0).validate()
    }

    /// Every key with its value, in a fixed order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let t = &self.train;
        let mut e = BTreeMap::new();
        e.insert("stage", self.stage.to_string());
        e.insert("seeds", join(&self.seeds));
        e.insert("ks", join(&self.ks));
        e.insert("variant", self.variant.to_string());
        e.insert("variants", join(&self.variants));
        e.insert(
            "backbone_stages",
            m.backbone.stages.iter().map(|(c, s)| format!("{c}:{s}")).collect::<Vec<_>>().join(","),
        );
        e.insert("extra_convs", m.backbone.extra_convs.to_string());
        e.insert("ce_ratio", m.ce_ratio.to_string());
        e.insert("heads", m.heads.to_string());
        e.insert("p", m.pool.to_string());
        e.insert("d", m.inner.map_or("auto".into(), |d| d.to_string()));
        e.insert("conv_k", m.conv_k.to_string());
        e.insert("scale_scores", m.scale_scores.to_string());
        e.insert("square_input", m.square_input.to_string());
        e.insert("dt_reading", m.dt_reading.to_string());
        e.insert("train_state", m.train_state.to_string());
        e.insert("base_lr", format!("{:?}", t.base_lr));
        e.insert("novel_lr", format!("{:?}", t.novel_lr));
        e.insert("momentum", format!("{:?}", t.momentum));
        e.insert("weight_decay", format!("{:?}", t.weight_decay));
        e.insert("batch", t.batch.to_string());
        e.insert("base_epochs", t.base_epochs.to_string());
        e.insert("novel_steps", t.novel_steps.to_string());
        e.insert("n_base", self.n_base.to_string());
        e.insert("eval_per_class", self.eval_per_class.to_string());
        e.insert("position_jitter", format!("{:?}", self.jitter.position));
        e.insert("hue_jitter", format!("{:?}", self.jitter.hue));
        e.insert("background_noise", format!("{:?}", self.jitter.background_noise));
        e.insert("distractors", self.jitter.distractors.to_string());
        e.insert("mode", self.mode.name().to_string());
        e.insert("probe_stage", self.probe_stage.map_or("last".into(), |s| s.to_string()));
        e.insert("q_list", join_debug(&self.q_list));
        e.insert("probe_reduction", self.probe.reduction.to_string());
        e.insert("probe_steps", self.probe.steps.to_string());
        e.insert("probe_lr", format!("{:?}", self.probe.lr));
        e.insert("retention_k", self.retention_k.to_string());
        e.insert("retention_variants", join(&self.retention_variants));
        e.insert("top_k", self.top_k.to_string());
        e.insert("workers", self.workers.to_string());
        e.insert("out_dir", self.out_dir.display().to_string());
        e.insert("checkpoint", self.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string()));
        e
    }

    /// Full serialisation; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 (first 16 hex digits) of every non-path entry. The worker
    /// count is excluded too: it never changes results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if PATH_KEYS.contains(&k) || k == "workers" {
                continue;
            }
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn model_for(&self, variant: Variant) -> ModelConfig {
        ModelConfig { variant, ..self.model.clone() }
    }

    /// Episode for `seed`, with a shot pool large enough for every K used.
    pub fn episode(&self, seed: u64) -> EpisodeSpec {
        let shots = self.ks.iter().copied().chain([self.retention_k]).max().unwrap_or(1);
        EpisodeSpec {
            n_base: self.n_base,
            eval_per_class: self.eval_per_class,
            shots,
            master_seed: seed,
            jitter: self.jitter.clone(),
            ..EpisodeSpec::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("d", "48").unwrap();
        c.set("q_list", "100,75.5").unwrap();
        c.set("checkpoint", "x/base.ckpt").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let e = RunConfig::parse("seeds = 1\nlearning_rate = 3\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"));
        assert!(RunConfig::parse("seeds = 1\nseeds = 2\n").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn paths_do_not_change_the_hash() {
        let a = RunConfig::default();
        let b = RunConfig { out_dir: "elsewhere".into(), workers: 4, ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seeds: vec![9], ..RunConfig::default() };
        assert_ne!(a.hash(), c.hash());
    }
}
