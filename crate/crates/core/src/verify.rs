//! Oracle checks run by `scsm verify` and by the acceptance harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::backbone::BackboneConfig;
use crate::block::{apply_freeze, ScsmBlock, ScsmConfig, Stage, Variant};
use crate::config::RunConfig;
use crate::csm::{channel_sequence_sensitivity, csm_forward_traced, CsmConfig, CsmWeights};
use crate::data::{synthesize_dataset, EpisodeSpec};
use crate::error::{Result, ScsmError};
use crate::gradcheck::{self, GradCheckReport};
use crate::ledger::RunRecord;
use crate::model::{FewShotModel, ModelConfig};
use crate::params::{ParamGroup, ParamStore, Sgd};
use crate::sfm::SfmConfig;
use crate::ssm::{self, DiagStateMatrix, Discretized, ZOH_SERIES_THRESHOLD};
use crate::tensor::Tensor;
use crate::train::{finetune_novel, FinetuneMode, TrainConfig};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// `(exp(z) - 1) / z` by its Taylor series for small `|z|`, `exp_m1`
/// otherwise.
fn phi_reference(z: f64) -> f64 {
    if z.abs() > 0.5 {
        return z.exp_m1() / z;
    }
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..40 {
        term *= z / (k as f64 + 1.0);
        sum += term;
    }
    sum
}

/// Random `(a, dt)` pairs, a fifth of them straddling the series threshold.
pub fn zoh_pairs(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let a = -(rng.gen_range(-8.0..4.0f64)).exp();
            let dt = if i % 5 == 0 {
                let z = ZOH_SERIES_THRESHOLD * rng.gen_range(0.5..2.0);
                z / -a
            } else {
                rng.gen_range(-6.0..2.0f64).exp()
            };
            (a, dt)
        })
        .collect()
}

/// Worst relative error of `zoh_discretize` against the closed form
/// `A_d = exp(dt a)`, `B_d = (exp(dt a) - 1)/a * b`.
pub fn zoh_oracle(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let mut worst: f64 = 0.0;
    for (a, dt) in zoh_pairs(n, seed) {
        let b: f64 = rng.gen_range(-2.0..2.0);
        let disc = ssm::zoh_discretize(&DiagStateMatrix::new(vec![a])?, &Tensor::new(&[1, 1, 1], vec![b])?, dt)?;
        let z = dt * a;
        let want_a = z.exp();
        let want_b = phi_reference(z) * dt * b;
        worst = worst.max((disc.a_d[0] - want_a).abs() / want_a.abs().max(f64::MIN_POSITIVE));
        worst = worst.max((disc.b_d.data()[0] - want_b).abs() / want_b.abs().max(1e-300));
    }
    Ok(worst)
}

fn random_disc(batch: usize, l: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Discretized> {
    let a = DiagStateMatrix::new((0..d).map(|_| -rng.gen_range(0.01..4.0)).collect())?;
    let b = Tensor::randn(&[batch, l, d], rng);
    ssm::zoh_discretize(&a, &b, rng.gen_range(0.05..1.0))
}

/// Worst absolute gap between the parallel and sequential scans. The first
/// instance is always the largest size.
pub fn scan_equivalence(instances: usize, max_l: usize, max_d: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (l, d) = if i == 0 { (max_l, max_d) } else { (rng.gen_range(1..=max_l), rng.gen_range(1..=max_d)) };
        let batch = rng.gen_range(1..=2);
        let disc = random_disc(batch, l, d, &mut rng)?;
        let c = Tensor::randn(&[batch, l, d], &mut rng);
        let x = Tensor::randn(&[batch, l, d], &mut rng);
        let seq = ssm::ssm_scan_sequential(&disc, &c, &x)?;
        let par = ssm::ssm_scan_parallel(&disc, &c, &x)?;
        worst = worst.max(seq.max_abs_diff(&par));
    }
    Ok(worst)
}

fn small_csm(rng: &mut ChaCha8Rng, pool: usize, inner: usize) -> Result<(ParamStore, CsmWeights, CsmConfig)> {
    let mut store = ParamStore::new();
    let cfg = CsmConfig { inner, ..CsmConfig::new(pool)? };
    let w = CsmWeights::new(&mut store, "csm", &cfg, rng);
    randomize(&mut store, rng);
    Ok((store, w, cfg))
}

/// Overwrites every parameter except the state matrix with random values, so
/// zero-initialised output maps stop hiding the rest of the graph.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.path.ends_with("a_log")).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.reset_value(id, Tensor::uniform(&shape, 1.0, rng));
    }
}

/// Worst gap between the scan inside `csm_forward` and an explicit sum over
/// the unrolled recurrence `y_t = c_t sum_s exp(dt a (t-s)) B_d[s] x_s`.
pub fn unroll_oracle(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (ce, d) = (rng.gen_range(1..=16), rng.gen_range(1..=8));
        let (store, w, cfg) = small_csm(&mut rng, 2, d)?;
        let batch = rng.gen_range(1..=2);
        let f = Tensor::randn(&[16, batch, ce], &mut rng);
        let mut g = Graph::new();
        let fin = g.input(f);
        let tr = csm_forward_traced(&mut g, &store, fin, &w, &cfg)?;
        let a: Vec<f64> = store.value(w.a_log).data().iter().map(|t| -t.exp()).collect();
        let (x, b, c, y) = (g.value(tr.scan_in), g.value(tr.b_t), g.value(tr.c_t), g.value(tr.scan_out));
        for bi in 0..batch {
            for t in 0..ce {
                for i in 0..d {
                    let mut acc = 0.0;
                    for s in 0..=t {
                        let z = tr.dt * a[i];
                        let bd = z.exp_m1() / a[i] * b.at(&[bi, s, i]);
                        acc += (z * (t - s) as f64).exp() * bd * x.at(&[bi, s, i]);
                    }
                    let want = c.at(&[bi, t, i]) * acc;
                    worst = worst.max((y.at(&[bi, t, i]) - want).abs() / want.abs().max(1.0));
                }
            }
        }
    }
    Ok(worst)
}

/// Small full block with every parameter randomised, input `[2, 8, 4, 4]`.
pub fn gradcheck_block(seed: u64, variant: Variant, max_per_param: usize) -> Result<GradCheckReport> {
    gradcheck_block_step(seed, variant, max_per_param, gradcheck::DEFAULT_STEP)
}

pub fn gradcheck_block_step(seed: u64, variant: Variant, max_per_param: usize, step: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = ScsmConfig { sfm: SfmConfig::new(8, 4, 2, true)?, csm: CsmConfig::new(2)?, variant };
    let block = ScsmBlock::new(&mut store, "blk", cfg, &mut rng)?;
    randomize(&mut store, &mut rng);
    let x = Tensor::randn(&[2, 8, 4, 4], &mut rng);
    let r = Tensor::randn(&[2, 8, 4, 4], &mut rng);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    gradcheck::check_params(&mut store, &ids, max_per_param, step, 1e-6, &|g, s| {
        let xi = g.input(x.clone());
        let y = block.forward(g, s, xi)?;
        gradcheck::projected_sum(g, y, &r)
    })
}

/// Largest `|y - x| / max(1, |x|)` of a fresh block, over every variant.
pub fn identity_at_init(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for variant in [Variant::Csm, Variant::Sfm, Variant::SfmCsm] {
        let mut store = ParamStore::new();
        let cfg = ScsmConfig { sfm: SfmConfig::new(16, 4, 2, true)?, csm: CsmConfig::new(4)?, variant };
        let block = ScsmBlock::new(&mut store, "blk", cfg, &mut rng)?;
        let xt = Tensor::randn(&[2, 16, 8, 8], &mut rng);
        let mut g = Graph::new();
        let x = g.input(xt.clone());
        let y = block.forward(&mut g, &store, x)?;
        for (a, b) in g.value(y).data().iter().zip(xt.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Trains a small CSM for a few steps, then returns the largest entry of the
/// sensitivity matrix above the diagonal and the smallest on it.
pub fn causality(instances: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut upper, mut diag) = (0.0f64, f64::INFINITY);
    for _ in 0..instances {
        let ce = rng.gen_range(2..=8);
        let (mut store, w, cfg) = small_csm(&mut rng, 2, 8)?;
        let target = Tensor::randn(&[16, 2, ce], &mut rng).map(|v| -v);
        let mut opt = Sgd::new(1e-3, 0.9, 0.0);
        for _ in 0..5 {
            let mut g = Graph::new();
            let f = g.input(Tensor::randn(&[16, 2, ce], &mut rng));
            let y = csm_forward_traced(&mut g, &store, f, &w, &cfg)?.output;
            let neg = g.input(target.clone());
            let err = g.add(y, neg)?;
            let sq = g.mul(err, err)?;
            let loss = g.mean(sq)?;
            let grads = g.backward(loss)?.for_params(&g);
            opt.step(&mut store, &grads);
        }
        let f = Tensor::randn(&[16, 1, ce], &mut rng);
        let m = channel_sequence_sensitivity(&store, &f, &w, &cfg)?;
        for i in 0..ce {
            diag = diag.min(m.at(&[i, i]));
            for j in i + 1..ce {
                upper = upper.max(m.at(&[i, j]).abs());
            }
        }
    }
    Ok((upper, diag))
}

/// Fine-tunes a fresh tiny model for `steps` novel steps and reports whether
/// every backbone byte survived.
pub fn freeze_contract(steps: usize, k: usize, seed: u64) -> Result<(bool, String)> {
    let spec = EpisodeSpec { n_base: 1, shots: k, eval_per_class: 2, master_seed: seed, ..EpisodeSpec::default() };
    let set = synthesize_dataset(&spec)?;
    let cfg = ModelConfig {
        backbone: BackboneConfig { stages: vec![(8, 4), (16, 2)], ..BackboneConfig::default() },
        variant: Variant::SfmCsm,
        ..ModelConfig::default()
    };
    let mut model = FewShotModel::new(cfg, spec.base_classes.len(), seed)?;
    let bytes_before = backbone_bytes(&model.store);
    let before = model.backbone_checksum();
    apply_freeze(Stage::Novel, &mut model.store);
    let train = TrainConfig { novel_steps: steps, batch: 4, eval_batch: 8, ..TrainConfig::default() };
    finetune_novel(&mut model, &set, k, FinetuneMode::Novel, &train, seed)?;
    let after = model.backbone_checksum();
    let ok = before == after && bytes_before == backbone_bytes(&model.store);
    Ok((ok, format!("{before} -> {after}")))
}

fn backbone_bytes(store: &ParamStore) -> Vec<u8> {
    store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Backbone)
        .flat_map(|(_, p)| p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
        .collect()
}

/// Rows of a ledger whose embedded hash differs from the hash of `cfg`.
pub fn hash_mismatches(cfg: &RunConfig, rows: &[RunRecord]) -> Vec<usize> {
    let h = cfg.hash();
    rows.iter().enumerate().filter(|(_, r)| r.config_hash != h).map(|(i, _)| i).collect()
}

/// The config hash survives a text round trip and ignores output paths.
pub fn config_hash_roundtrip() -> Result<bool> {
    let cfg = RunConfig::default();
    let again = RunConfig::parse(&cfg.to_text())?;
    let mut moved = cfg.clone();
    moved.out_dir = "elsewhere".into();
    let mut changed = cfg.clone();
    changed.set("seeds", "7")?;
    Ok(again.hash() == cfg.hash() && moved.hash() == cfg.hash() && changed.hash() != cfg.hash())
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error[{}]: {e}", e.class())),
    };
    CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// The full oracle list, sized to finish in well under a minute.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        timed("zoh_oracle", || {
            let w = zoh_oracle(10_000, seed)?;
            Ok((w <= 1e-12, format!("worst rel err {w:.3e} over 10000 pairs")))
        }),
        timed("scan_equivalence", || {
            let w = scan_equivalence(200, 4096, 64, seed)?;
            Ok((w <= 1e-10, format!("worst abs gap {w:.3e} over 200 instances")))
        }),
        timed("unroll_oracle", || {
            let w = unroll_oracle(20, seed)?;
            Ok((w <= 1e-10, format!("worst gap {w:.3e}")))
        }),
        timed("block_gradients", || {
            let r = gradcheck_block(seed, Variant::SfmCsm, 24)?;
            Ok((r.worst_rel < 1e-4, format!("{} entries, worst rel err {:.3e} at {}", r.checked, r.worst_rel, r.worst_at)))
        }),
        timed("identity_at_init", || {
            let w = identity_at_init(seed)?;
            Ok((w <= 1e-15, format!("max deviation {w:.3e}")))
        }),
        timed("causality", || {
            let (upper, diag) = causality(5, seed)?;
            Ok((upper == 0.0 && diag > 0.0, format!("max above diagonal {upper:e}, min diagonal {diag:.3e}")))
        }),
        timed("freeze_contract", || freeze_contract(20, 2, seed)),
        timed("config_hash", || {
            let ok = config_hash_roundtrip()?;
            Ok((ok, if ok { "round trip stable".into() } else { "hash changed across round trip".into() }))
        }),
    ]
}

/// Cross-checks ledger rows against the config they claim to come from.
pub fn ledger_check(cfg: &RunConfig, rows: &[RunRecord]) -> CheckOutcome {
    timed("ledger_hash", || {
        if rows.is_empty() {
            return Err(ScsmError::Format("ledger has no rows".into()));
        }
        let bad = hash_mismatches(cfg, rows);
        Ok((bad.is_empty(), format!("{} rows, {} with a foreign config hash", rows.len(), bad.len())))
    })
}
