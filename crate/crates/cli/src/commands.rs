use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use scsm_core::ablation::{ablation_suite, base_record, novel_record, AblationReport};
use scsm_core::block::{apply_freeze, Stage, Variant};
use scsm_core::checkpoint::{Archive, DType};
use scsm_core::config::RunConfig;
use scsm_core::data::{load_or_synthesize, write_ppm, EpisodeSet, Split};
use scsm_core::ledger::{self, RetentionRow, RETENTION_HEADER};
use scsm_core::model::FewShotModel;
use scsm_core::probe::{export_channel_maps, retention_curve, train_model_probe, SeProbe};
use scsm_core::train::{evaluate, finetune_novel as run_finetune, train_base as run_base, FinetuneMode};
use scsm_core::bench::run_bench;
use scsm_core::{svg, verify as oracles, Result, ScsmError};

use crate::{CheckpointArg, Common, Failure};

type CmdResult = std::result::Result<(), Failure>;

/// Config file, then `--set` overrides, then `--seed` and the output root.
fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let usage = |e: ScsmError| Failure::Usage(e.to_string());
    let mut cfg = match &common.config {
        Some(p) if !p.exists() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    } else if let Some(env) = std::env::var_os("SCSM_OUT") {
        cfg.out_dir = PathBuf::from(env);
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ScsmError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| ScsmError::io(path, e))
}

/// Writes `config_<hash>.txt` next to the ledgers so every row can be traced
/// back to its full configuration.
fn write_sidecar(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.out_dir.join(format!("config_{}.txt", cfg.hash()));
    write_file(&path, &cfg.to_text())?;
    Ok(path)
}

fn runs_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("runs.csv")
}

fn dataset(cfg: &RunConfig, seed: u64) -> Result<EpisodeSet> {
    load_or_synthesize(&cfg.episode(seed), &cfg.out_dir.join("data"))
}

fn base_ckpt_path(cfg: &RunConfig, variant: Variant, seed: u64) -> PathBuf {
    cfg.out_dir.join("checkpoints").join(format!("{}_s{seed}_base.ckpt", variant.name()))
}

fn novel_ckpt_path(cfg: &RunConfig, variant: Variant, seed: u64, k: usize) -> PathBuf {
    cfg.out_dir
        .join("checkpoints")
        .join(format!("{}_s{seed}_k{k}_{}.ckpt", variant.name(), cfg.mode.name()))
}

fn save(model: &FewShotModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    Archive::from_store(&model.store, DType::F64).save(path)
}

fn single_seed(cfg: &RunConfig) -> std::result::Result<u64, Failure> {
    match cfg.seeds.as_slice() {
        [s] => Ok(*s),
        _ => Err(Failure::Usage("this command needs exactly one seed; pass --seed".into())),
    }
}

/// The explicit checkpoint, the config's, or `fallback`; it must exist.
fn resolve_ckpt(ckpt: &CheckpointArg, cfg: &RunConfig, fallback: PathBuf) -> std::result::Result<PathBuf, Failure> {
    let path = ckpt.checkpoint.clone().or_else(|| cfg.checkpoint.clone()).unwrap_or(fallback);
    if !path.is_file() {
        return Err(Failure::Usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(path)
}

/// Builds the configured variant with as many outputs as the archived head
/// and loads every tensor.
fn load_model(cfg: &RunConfig, seed: u64, path: &Path) -> Result<FewShotModel> {
    let archive = Archive::load(path)?;
    let head = archive
        .get("head.weight")
        .ok_or_else(|| ScsmError::Format(format!("{} has no head.weight", path.display())))?;
    let n = *head.shape.last().ok_or_else(|| ScsmError::Format("scalar head.weight".into()))?;
    let mut model = FewShotModel::new(cfg.model_for(cfg.variant), n, seed)?;
    let missing = archive.load_into(&mut model.store)?;
    if !missing.is_empty() {
        return Err(ScsmError::Format(format!(
            "{} does not match variant {}: missing {}",
            path.display(),
            cfg.variant,
            missing.join(" ")
        )));
    }
    Ok(model)
}

pub fn train_base(common: &Common) -> CmdResult {
    let cfg = load_config(common)?;
    write_sidecar(&cfg)?;
    for &seed in &cfg.seeds {
        let set = dataset(&cfg, seed)?;
        let mut model = FewShotModel::new(cfg.model_for(cfg.variant), set.spec.base_classes.len(), seed)?;
        let out = run_base(&mut model, &set.base_train, &set.base_eval, &set.spec, &cfg.train, seed)?;
        let path = base_ckpt_path(&cfg, cfg.variant, seed);
        save(&model, &path)?;
        ledger::append_runs(&runs_path(&cfg), &[base_record(&cfg, cfg.variant, seed, &out, &model.backbone_checksum())])?;
        println!(
            "seed {seed} {}: base accuracy {:.4} in {:.1}s -> {}",
            cfg.variant,
            out.base_accuracy,
            out.wall_seconds,
            path.display()
        );
    }
    Ok(())
}

pub fn finetune_novel(common: &Common, ckpt: &CheckpointArg) -> CmdResult {
    let cfg = load_config(common)?;
    let explicit = ckpt.checkpoint.is_some() || cfg.checkpoint.is_some();
    let seeds = if explicit { vec![single_seed(&cfg)?] } else { cfg.seeds.clone() };
    let paths = seeds
        .iter()
        .map(|&s| resolve_ckpt(ckpt, &cfg, base_ckpt_path(&cfg, cfg.variant, s)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_sidecar(&cfg)?;
    for (&seed, path) in seeds.iter().zip(paths) {
        let set = dataset(&cfg, seed)?;
        let base = load_model(&cfg, seed, &path)?;
        let mut records = Vec::new();
        for &k in &cfg.ks {
            let mut model = base.clone();
            apply_freeze(Stage::Novel, &mut model.store);
            let out = run_finetune(&mut model, &set, k, cfg.mode, &cfg.train, seed)?;
            save(&model, &novel_ckpt_path(&cfg, cfg.variant, seed, k))?;
            println!(
                "seed {seed} {} K={k} {}: novel accuracy {:.4}{}",
                cfg.variant,
                cfg.mode.name(),
                out.novel_accuracy,
                out.base_accuracy.map(|b| format!(", base accuracy {b:.4}")).unwrap_or_default()
            );
            records.push(novel_record(&cfg, cfg.variant, seed, &out));
        }
        ledger::append_runs(&runs_path(&cfg), &records)?;
    }
    Ok(())
}

fn partition_of(set: &EpisodeSet, n: usize) -> Result<Vec<(&'static str, &Split, Vec<usize>)>> {
    let spec = &set.spec;
    if n == spec.base_classes.len() {
        Ok(vec![("base", &set.base_eval, spec.base_classes.clone())])
    } else if n == spec.novel_classes.len() {
        Ok(vec![("novel", &set.novel_eval, spec.novel_classes.clone())])
    } else if n == spec.base_classes.len() + spec.novel_classes.len() {
        let all = spec.all_classes();
        Ok(vec![("novel", &set.novel_eval, all.clone()), ("base", &set.base_eval, all)])
    } else {
        Err(ScsmError::Format(format!("a {n}-way head matches no class partition")))
    }
}

pub fn eval(common: &Common, ckpt: &CheckpointArg) -> CmdResult {
    let cfg = load_config(common)?;
    let seed = single_seed(&cfg)?;
    let path = resolve_ckpt(ckpt, &cfg, base_ckpt_path(&cfg, cfg.variant, seed))?;
    let set = dataset(&cfg, seed)?;
    let model = load_model(&cfg, seed, &path)?;
    for (name, split, classes) in partition_of(&set, model.n_classes())? {
        let acc = evaluate(&model, split, &classes, cfg.train.eval_batch)?;
        println!("{name}_accuracy,{acc:?}");
    }
    Ok(())
}

fn print_table(report: &AblationReport) {
    let mut head = format!("{:<10}", "variant");
    for k in &report.ks {
        head.push_str(&format!("{:>9}", format!("K={k}")));
    }
    println!("{head}");
    for (v, row) in &report.table {
        let mut line = format!("{:<10}", v.name());
        for a in row {
            line.push_str(&format!("{a:>9.4}"));
        }
        println!("{line}");
    }
}

pub fn ablation(common: &Common) -> CmdResult {
    let cfg = load_config(common)?;
    write_sidecar(&cfg)?;
    let start = Instant::now();
    let report = ablation_suite(&cfg, false, Some(&cfg.out_dir.join("data")))?;
    ledger::append_runs(&runs_path(&cfg), &report.records())?;
    write_file(&cfg.out_dir.join("ablation_table.csv"), &report.table_csv())?;
    print_table(&report);
    println!("{} runs in {:.1}s", report.runs.len(), start.elapsed().as_secs_f64());
    Ok(())
}

/// Shots and class list the probe of a fine-tuned checkpoint trains on.
fn probe_data(cfg: &RunConfig, set: &EpisodeSet) -> (Split, Vec<usize>) {
    let k = cfg.retention_k;
    match cfg.mode {
        FinetuneMode::Novel => (set.novel_train.first_per_class(k), set.spec.novel_classes.clone()),
        FinetuneMode::Generalized => (set.balanced_shots(k), set.spec.all_classes()),
    }
}

fn fit_probe(cfg: &RunConfig, seed: u64, ckpt: &CheckpointArg) -> std::result::Result<(FewShotModel, SeProbe, EpisodeSet, Vec<f64>), Failure> {
    let path = resolve_ckpt(ckpt, cfg, novel_ckpt_path(cfg, cfg.variant, seed, cfg.retention_k))?;
    let set = dataset(cfg, seed)?;
    let mut model = load_model(cfg, seed, &path)?;
    let stage = cfg.probe_stage.unwrap_or(model.blocks.len() - 1);
    let (shots, classes) = probe_data(cfg, &set);
    let (probe, losses) = train_model_probe(&mut model, stage, &shots, &classes, &cfg.probe, seed)?;
    Ok((model, probe, set, losses))
}

pub fn probe(common: &Common, ckpt: &CheckpointArg) -> CmdResult {
    let cfg = load_config(common)?;
    let seed = single_seed(&cfg)?;
    let (model, probe, set, losses) = fit_probe(&cfg, seed, ckpt)?;
    let (_, classes) = probe_data(&cfg, &set);
    let report = retention_curve(&model, &probe, &set.novel_eval, &classes, &[100.0], cfg.train.eval_batch)?;
    let mut csv = String::from("channel,mean_weight\n");
    for (c, w) in report.mean_weights.iter().enumerate() {
        csv.push_str(&format!("{c},{w:?}\n"));
    }
    let stem = format!("{}_s{seed}_stage{}", cfg.variant.name(), probe.stage);
    let weights_path = cfg.out_dir.join("probe").join(format!("{stem}_weights.csv"));
    write_file(&weights_path, &csv)?;
    let ckpt_path = cfg.out_dir.join("probe").join(format!("{stem}.ckpt"));
    save(&model, &ckpt_path)?;
    println!(
        "probe at stage {}: loss {:.4} -> {:.4}, weights in {}",
        probe.stage,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        weights_path.display()
    );
    Ok(())
}

/// Median accuracy per (variant, q) over seeds, as chart series.
fn median_curves(rows: &[RetentionRow]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut cells: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        cells.entry(r.variant.clone()).or_default().entry(r.q.to_bits()).or_default().push(r.accuracy);
    }
    cells
        .into_iter()
        .map(|(v, by_q)| {
            let mut pts: Vec<(f64, f64)> =
                by_q.into_iter().map(|(q, xs)| (f64::from_bits(q), scsm_core::ablation::median(&xs))).collect();
            pts.sort_by(|a, b| b.0.total_cmp(&a.0));
            (v, pts)
        })
        .collect()
}

pub fn retention(common: &Common) -> CmdResult {
    let mut cfg = load_config(common)?;
    cfg.variants = cfg.retention_variants.clone();
    cfg.ks = vec![cfg.retention_k];
    write_sidecar(&cfg)?;
    let report = ablation_suite(&cfg, true, Some(&cfg.out_dir.join("data")))?;
    ledger::append_runs(&runs_path(&cfg), &report.records())?;
    let path = cfg.out_dir.join("retention.csv");
    let rows: Vec<String> = report.retention_rows(&cfg).iter().map(RetentionRow::to_csv).collect();
    ledger::append_lines(&path, RETENTION_HEADER, &rows)?;
    let all = ledger::read_retention(&path)?;
    let chart = svg::line_chart("Accuracy vs channels kept", "channels kept (%)", "accuracy", &median_curves(&all));
    write_file(&cfg.out_dir.join("retention.svg"), &chart)?;
    for (v, area) in &report.areas {
        println!("{v}: median degradation area {area:.4}");
    }
    Ok(())
}

pub fn export_maps(common: &Common, ckpt: &CheckpointArg, image: usize) -> CmdResult {
    let cfg = load_config(common)?;
    let seed = single_seed(&cfg)?;
    let (model, probe, set, _) = fit_probe(&cfg, seed, ckpt)?;
    if image >= set.novel_eval.len() {
        return Err(Failure::Usage(format!("--image {image} outside 0..{}", set.novel_eval.len())));
    }
    let f = model.stage_features(set.novel_eval.batch(&[image]), probe.stage)?;
    let w = probe.weights_of(&model.store, &f)?;
    let shape = f.shape()[1..].to_vec();
    let features = f.reshape(&shape)?;
    let dir = cfg.out_dir.join("maps").join(format!("{}_s{seed}_img{image}", cfg.variant.name()));
    let paths = export_channel_maps(&features, w.data(), probe.stage, cfg.top_k.min(shape[0]), &dir)?;
    write_ppm(&dir.join("input.ppm"), set.novel_eval.image(image))?;
    println!("wrote {} channel maps to {}", paths.len(), dir.display());
    Ok(())
}

pub fn bench_scan(
    common: &Common,
    len: usize,
    lanes: usize,
    batch: usize,
    reps: usize,
    workers: Option<usize>,
) -> CmdResult {
    let cfg = load_config(common)?;
    if len == 0 || lanes == 0 || batch == 0 {
        return Err(Failure::Usage("--len, --lanes and --batch must be positive".into()));
    }
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let rows = run_bench(len, lanes, batch, reps, workers)?;
    let elements = (len * lanes * batch) as f64;
    let mut csv = String::from("variant,L,D,batch,workers,ns_per_element,checksum\n");
    for r in &rows {
        let line = format!("{},{len},{lanes},{batch},{workers},{:.4},{}", r.kernel, r.seconds * 1e9 / elements, r.checksum);
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    write_file(&cfg.out_dir.join("bench_scan.csv"), &csv)?;
    Ok(())
}

pub fn verify(common: &Common, ledger_path: Option<&Path>) -> CmdResult {
    let cfg = load_config(common)?;
    let mut outcomes = oracles::run_all(cfg.seeds.first().copied().unwrap_or(0));
    if let Some(p) = ledger_path {
        if !p.is_file() {
            return Err(Failure::Usage(format!("ledger not found: {}", p.display())));
        }
        outcomes.push(oracles::ledger_check(&cfg, &ledger::read_runs(p)?));
    }
    for o in &outcomes {
        println!("{} {:<18} {:>7.2}s  {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.seconds, o.detail);
    }
    match outcomes.iter().find(|o| !o.passed) {
        Some(o) => Err(Failure::Verify(o.name.to_string())),
        None => Ok(()),
    }
}
