//! The variant comparison: base training, K-shot fine-tuning and channel
//! retention for every (seed, variant), summarised as medians over seeds.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::block::{apply_freeze, Stage, Variant};
use crate::config::RunConfig;
use crate::data::{load_or_synthesize, synthesize_dataset, EpisodeSet};
use crate::error::{Result, ScsmError};
use crate::ledger::{RetentionRow, RunRecord};
use crate::model::FewShotModel;
use crate::probe::{retention_curve, train_model_probe, ChannelReport};
use crate::train::{finetune_novel, train_base, BaseOutcome, FinetuneMode, NovelOutcome};

pub fn base_record(cfg: &RunConfig, variant: Variant, seed: u64, out: &BaseOutcome, checksum: &str) -> RunRecord {
    RunRecord {
        config_hash: cfg.hash(),
        stage: "base".into(),
        variant: variant.name().into(),
        seed,
        k: 0,
        mode: "base".into(),
        batch: cfg.train.batch,
        steps: cfg.train.base_epochs,
        losses: out.epoch_losses.clone(),
        accuracy: out.base_accuracy,
        base_accuracy: None,
        backbone_checksum: checksum.into(),
        wall_seconds: out.wall_seconds,
    }
}

pub fn novel_record(cfg: &RunConfig, variant: Variant, seed: u64, out: &NovelOutcome) -> RunRecord {
    RunRecord {
        config_hash: cfg.hash(),
        stage: "novel".into(),
        variant: variant.name().into(),
        seed,
        k: out.shots,
        mode: out.mode.name().into(),
        batch: out.batch,
        steps: out.steps,
        losses: out.epoch_losses.clone(),
        accuracy: out.novel_accuracy,
        base_accuracy: out.base_accuracy,
        backbone_checksum: out.backbone_checksum.clone(),
        wall_seconds: out.wall_seconds,
    }
}

/// Results of one (seed, variant) run.
#[derive(Clone, Debug)]
pub struct SeedVariantRun {
    pub seed: u64,
    pub variant: Variant,
    pub records: Vec<RunRecord>,
    pub retention: Option<ChannelReport>,
}

/// Base training, fine-tuning for each requested K, and the retention curve
/// when asked for.
pub fn run_seed_variant(
    cfg: &RunConfig,
    set: &EpisodeSet,
    variant: Variant,
    ks: &[usize],
    retention: bool,
) -> Result<SeedVariantRun> {
    let seed = set.spec.master_seed;
    let mut model = FewShotModel::new(cfg.model_for(variant), set.spec.base_classes.len(), seed)?;
    let base = train_base(&mut model, &set.base_train, &set.base_eval, &set.spec, &cfg.train, seed)?;
    let mut records = vec![base_record(cfg, variant, seed, &base, &model.backbone_checksum())];
    let mut shots: Vec<usize> = ks.to_vec();
    if retention && !shots.contains(&cfg.retention_k) {
        shots.push(cfg.retention_k);
    }
    let mut report = None;
    for k in shots {
        let mut tuned = model.clone();
        apply_freeze(Stage::Novel, &mut tuned.store);
        let out = finetune_novel(&mut tuned, set, k, cfg.mode, &cfg.train, seed)?;
        if ks.contains(&k) {
            records.push(novel_record(cfg, variant, seed, &out));
        }
        if retention && k == cfg.retention_k {
            report = Some(channel_report(cfg, &mut tuned, set, k)?);
        }
    }
    Ok(SeedVariantRun { seed, variant, records, retention: report })
}

/// Probe a fine-tuned model and measure its retention curve on novel eval data.
pub fn channel_report(cfg: &RunConfig, model: &mut FewShotModel, set: &EpisodeSet, k: usize) -> Result<ChannelReport> {
    let stage = cfg.probe_stage.unwrap_or(model.blocks.len() - 1);
    let classes = match cfg.mode {
        FinetuneMode::Novel => set.spec.novel_classes.clone(),
        FinetuneMode::Generalized => set.spec.all_classes(),
    };
    let shots = match cfg.mode {
        FinetuneMode::Novel => set.novel_train.first_per_class(k),
        FinetuneMode::Generalized => set.balanced_shots(k),
    };
    let (probe, _) = train_model_probe(model, stage, &shots, &classes, &cfg.probe, set.spec.master_seed)?;
    retention_curve(model, &probe, &set.novel_eval, &classes, &cfg.q_list, cfg.train.eval_batch)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub runs: Vec<SeedVariantRun>,
    pub ks: Vec<usize>,
    /// Median novel accuracy per variant, one entry per K.
    pub table: Vec<(Variant, Vec<f64>)>,
    /// Median degradation area per retention variant.
    pub areas: Vec<(Variant, f64)>,
}

impl AblationReport {
    pub fn records(&self) -> Vec<RunRecord> {
        self.runs.iter().flat_map(|r| r.records.clone()).collect()
    }

    pub fn retention_rows(&self, cfg: &RunConfig) -> Vec<RetentionRow> {
        self.runs
            .iter()
            .filter_map(|r| r.retention.as_ref().map(|rep| (r, rep)))
            .flat_map(|(r, rep)| {
                rep.curve.iter().map(move |&(q, accuracy)| RetentionRow {
                    variant: r.variant.name().into(),
                    seed: r.seed,
                    k: cfg.retention_k,
                    stage: rep.stage,
                    q,
                    accuracy,
                })
            })
            .collect()
    }

    pub fn median_of(&self, variant: Variant, k: usize) -> Option<f64> {
        let ki = self.ks.iter().position(|&x| x == k)?;
        self.table.iter().find(|(v, _)| *v == variant).map(|(_, row)| row[ki])
    }

    pub fn area_of(&self, variant: Variant) -> Option<f64> {
        self.areas.iter().find(|(v, _)| *v == variant).map(|a| a.1)
    }

    /// `variant,k1,k2,...` with one row per variant.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("variant");
        for k in &self.ks {
            out.push_str(&format!(",k{k}"));
        }
        out.push('\n');
        for (v, row) in &self.table {
            out.push_str(v.name());
            for a in row {
                out.push_str(&format!(",{a:?}"));
            }
            out.push('\n');
        }
        out
    }
}

fn summarise(cfg: &RunConfig, runs: Vec<SeedVariantRun>) -> AblationReport {
    let mut by_cell: BTreeMap<(Variant, usize), Vec<f64>> = BTreeMap::new();
    let mut by_area: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        for rec in r.records.iter().filter(|x| x.stage == "novel") {
            by_cell.entry((r.variant, rec.k)).or_default().push(rec.accuracy);
        }
        if let Some(area) = r.retention.as_ref().and_then(ChannelReport::degradation_area) {
            by_area.entry(r.variant).or_default().push(area);
        }
    }
    let table = cfg
        .variants
        .iter()
        .map(|&v| (v, cfg.ks.iter().map(|&k| by_cell.get(&(v, k)).map_or(f64::NAN, |xs| median(xs))).collect()))
        .collect();
    let areas = cfg
        .retention_variants
        .iter()
        .filter_map(|&v| by_area.get(&v).map(|xs| (v, median(xs))))
        .collect();
    AblationReport { runs, ks: cfg.ks.clone(), table, areas }
}

/// Runs every (seed, variant) pair on `cfg.workers` threads. Each pair reads
/// only its own seed streams, so the report does not depend on the worker count.
pub fn ablation_suite(cfg: &RunConfig, retention: bool, cache_dir: Option<&Path>) -> Result<AblationReport> {
    cfg.validate()?;
    let sets: Vec<EpisodeSet> = cfg
        .seeds
        .iter()
        .map(|&s| match cache_dir {
            Some(dir) => load_or_synthesize(&cfg.episode(s), dir),
            None => synthesize_dataset(&cfg.episode(s)),
        })
        .collect::<Result<_>>()?;
    let mut variants = cfg.variants.clone();
    if retention {
        for v in &cfg.retention_variants {
            if !variants.contains(v) {
                variants.push(*v);
            }
        }
    }
    let mut tasks = Vec::new();
    for set in &sets {
        for &v in &variants {
            let ks: Vec<usize> = if cfg.variants.contains(&v) { cfg.ks.clone() } else { Vec::new() };
            let with_retention = retention && cfg.retention_variants.contains(&v);
            tasks.push((set, v, ks, with_retention));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ScsmError::arg(format!("thread pool: {e}")))?;
    let runs: Vec<SeedVariantRun> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(set, v, ks, r)| run_seed_variant(cfg, set, *v, ks, *r))
            .collect::<Result<_>>()
    })?;
    Ok(summarise(cfg, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
