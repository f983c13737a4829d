use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scsm_core::autodiff::{Graph, NodeId};
use scsm_core::backbone::{Backbone, BackboneConfig, ClassifyHead};
use scsm_core::block::Variant;
use scsm_core::gradcheck::{check_params, projected_sum, DEFAULT_STEP};
use scsm_core::params::{ParamGroup, ParamStore};
use scsm_core::ssm::DtReading;
use scsm_core::verify::gradcheck_block;
use scsm_core::{Result, Tensor};

const OP_TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Registers `inputs` as parameters, projects `f`'s output onto a fixed random
/// tensor and returns the worst relative gradient error.
fn op_error(inputs: Vec<(&str, Tensor)>, f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.into_iter().map(|(n, t)| store.add(n, t, ParamGroup::Scsm)).collect();
    let mut g = Graph::new();
    let nodes: Vec<_> = ids.iter().map(|&id| g.param(&store, id)).collect();
    let out = f(&mut g, &nodes).unwrap();
    let r = Tensor::randn(g.shape(out), &mut rng(99));
    let report = check_params(&mut store, &ids, 10_000, DEFAULT_STEP, 1e-8, &|g, s| {
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = f(g, &nodes)?;
        if g.value(out).numel() == 1 {
            return Ok(out);
        }
        projected_sum(g, out, &r)
    })
    .unwrap();
    assert!(report.nonzero > 0, "no gradient reached the inputs");
    report.worst_rel
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

#[test]
fn elementwise_and_reductions() {
    let a = randn(&[2, 3, 4], 1);
    let b = randn(&[3, 4], 2);
    assert!(op_error(vec![("a", a.clone()), ("b", b.clone())], |g, n| g.add(n[0], n[1])) < OP_TOL);
    assert!(op_error(vec![("a", a.clone()), ("b", b)], |g, n| g.mul(n[0], n[1])) < OP_TOL);
    let col = randn(&[2, 1, 4], 3);
    assert!(op_error(vec![("a", a.clone()), ("c", col)], |g, n| g.mul(n[0], n[1])) < OP_TOL);
    assert!(op_error(vec![("a", a.clone())], |g, n| g.scale(n[0], -2.5)) < OP_TOL);
    assert!(op_error(vec![("a", a.clone())], |g, n| g.sum(n[0])) < OP_TOL);
    assert!(op_error(vec![("a", a)], |g, n| g.mean(n[0])) < OP_TOL);
}

#[test]
fn activations() {
    let x = randn(&[3, 5], 4);
    assert!(op_error(vec![("x", x.clone())], |g, n| g.silu(n[0])) < OP_TOL);
    assert!(op_error(vec![("x", x.clone())], |g, n| g.sigmoid(n[0])) < OP_TOL);
    assert!(op_error(vec![("x", x.clone())], |g, n| g.softmax_lastdim(n[0])) < OP_TOL);
    // keep every entry well away from the kink
    let away = x.map(|v| v + 0.2 * v.signum());
    assert!(op_error(vec![("x", away)], |g, n| g.relu(n[0])) < OP_TOL);
}

#[test]
fn matmul_plain_and_batched() {
    let a = randn(&[2, 3, 5], 5);
    let b = randn(&[5, 4], 6);
    assert!(op_error(vec![("a", a.clone()), ("b", b)], |g, n| g.matmul(n[0], n[1])) < OP_TOL);
    let bb = randn(&[2, 5, 2], 7);
    assert!(op_error(vec![("a", a), ("b", bb)], |g, n| g.matmul(n[0], n[1])) < OP_TOL);
    // wide and narrow shapes take different kernels
    let wide = randn(&[3, 12], 8);
    let narrow = randn(&[12, 2], 9);
    assert!(op_error(vec![("a", wide), ("b", narrow)], |g, n| g.matmul(n[0], n[1])) < OP_TOL);
}

#[test]
fn convolutions() {
    let x = randn(&[2, 3, 5, 5], 10);
    let w1 = randn(&[4, 3], 11);
    let b1 = randn(&[4], 12);
    assert!(op_error(vec![("x", x.clone()), ("w", w1), ("b", b1)], |g, n| g.conv_1x1(n[0], n[1], n[2])) < OP_TOL);
    let w3 = randn(&[2, 3, 3, 3], 13);
    let b3 = randn(&[2], 14);
    for stride in [1, 2] {
        let err = op_error(vec![("x", x.clone()), ("w", w3.clone()), ("b", b3.clone())], |g, n| {
            g.conv2d(n[0], n[1], n[2], stride)
        });
        assert!(err < OP_TOL, "stride {stride}: {err}");
    }
    let seq = randn(&[2, 6, 3], 15);
    let k = randn(&[3, 4], 16);
    assert!(op_error(vec![("x", seq), ("k", k)], |g, n| g.conv1d_depthwise_seq(n[0], n[1])) < OP_TOL);
}

#[test]
fn normalisation_pooling_and_layout() {
    let x = randn(&[2, 3, 6], 17);
    let gamma = randn(&[6], 18);
    let beta = randn(&[6], 19);
    assert!(op_error(vec![("x", x.clone()), ("g", gamma), ("b", beta)], |g, n| g.layer_norm(n[0], n[1], n[2])) < OP_TOL);
    let img = randn(&[2, 2, 6, 6], 20);
    for p in [1, 2, 3, 4] {
        assert!(op_error(vec![("x", img.clone())], |g, n| g.adaptive_avg_pool2d(n[0], p)) < OP_TOL, "p={p}");
    }
    let small = randn(&[1, 2, 2, 2], 21);
    assert!(op_error(vec![("x", small)], |g, n| g.upsample_nearest(n[0], 6, 6)) < OP_TOL);
    assert!(op_error(vec![("x", x.clone())], |g, n| g.reshape(n[0], &[6, 6])) < OP_TOL);
    assert!(op_error(vec![("x", x)], |g, n| g.permute(n[0], &[2, 0, 1])) < OP_TOL);
}

#[test]
fn cross_entropy_gradient() {
    let logits = randn(&[4, 5], 22);
    assert!(op_error(vec![("l", logits)], |g, n| g.cross_entropy(n[0], &[0, 4, 2, 2])) < OP_TOL);
}

#[test]
fn scan_gradients_including_the_state_matrix() {
    let (b, l, d) = (2, 7, 3);
    let x = randn(&[b, l, d], 23);
    let bt = randn(&[b, l, d], 24);
    let ct = randn(&[b, l, d], 25);
    let a_log = Tensor::new(&[d], vec![-0.3, 0.4, 1.1]).unwrap();
    let inputs = || vec![("x", x.clone()), ("b", bt.clone()), ("c", ct.clone()), ("a", a_log.clone())];
    assert!(op_error(inputs(), |g, n| g.ssm_scan(n[0], n[1], n[2], n[3], 0.7)) < OP_TOL);
    for reading in [DtReading::SpectralRadius, DtReading::SmallestMagnitude] {
        let err = op_error(inputs(), |g, n| g.ssm_scan_read_dt(n[0], n[1], n[2], n[3], reading));
        assert!(err < OP_TOL, "{reading}: {err}");
    }
}

#[test]
fn scan_gradient_on_the_series_branch() {
    // dt * a near 1e-6 exercises the small-argument expansions
    let x = randn(&[1, 5, 2], 26);
    let bt = randn(&[1, 5, 2], 27);
    let ct = randn(&[1, 5, 2], 28);
    let a_log = Tensor::new(&[2], vec![(2e-6f64).ln(), (5e-6f64).ln()]).unwrap();
    let err = op_error(vec![("x", x), ("b", bt), ("c", ct)], |g, n| {
        let a = g.input(a_log.clone());
        g.ssm_scan(n[0], n[1], n[2], a, 0.5)
    });
    assert!(err < OP_TOL);
}

#[test]
fn every_block_parameter_matches_finite_differences() {
    for v in [Variant::Csm, Variant::Sfm, Variant::SfmCsm] {
        let r = gradcheck_block(3, v, usize::MAX).unwrap();
        assert!(r.worst_rel < 1e-4, "{v}: {} at {}", r.worst_rel, r.worst_at);
        assert_eq!(r.nonzero, r.checked, "{v}: some block parameter received no gradient");
    }
}

#[test]
fn backbone_and_head_gradients() {
    let mut store = ParamStore::new();
    let cfg = BackboneConfig { stages: vec![(4, 2), (8, 2)], extra_convs: 1, in_channels: 3, image_size: 8 };
    let bb = Backbone::new(&mut store, cfg, &mut rng(30)).unwrap();
    let head = ClassifyHead::new(&mut store, 8, 3, &mut rng(31));
    let img = randn(&[2, 3, 8, 8], 32);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let r = check_params(&mut store, &ids, 40, DEFAULT_STEP, 1e-8, &|g, s| {
        let x = g.input(img.clone());
        let feats = bb.forward(g, s, x)?;
        let logits = head.forward(g, s, *feats.last().unwrap())?;
        g.cross_entropy(logits, &[1, 2])
    })
    .unwrap();
    assert!(r.worst_rel < 1e-4, "{} at {}", r.worst_rel, r.worst_at);
}
