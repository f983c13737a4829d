//! Channel state modeling: the compressed channels are treated as a sequence
//! and passed through a gated selective state-space block.
//!
//! Stages, in order, for an input `F[S,B,C_e]` on an `H x W` grid:
//!
//! 1. permute to `[B,C_e,S]`, restore the grid, average-pool to `p x p` and
//!    flatten, giving `T[B,C_e,P]`
//! 2. layer norm over `P`
//! 3. `X = T W_x`, `Z = T W_z` (`P -> D`)
//! 4. `B = X W_B`, `C = X W_C` (`D -> D`)
//! 5. `dt` from the state matrix, zero-order-hold discretisation
//! 6. `X <- SiLU(causal_conv(X))`
//! 7. `y = scan(A_d, B_d, C)(X)` along the channel axis
//! 8. `y <- y * SiLU(Z)`, then `y W_out` (`D -> P`)
//! 9. nearest upsample back to `H x W`, flatten, permute to `[S,B,C_e]`
//! 10. residual: `F' + F`

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, ScsmError};
use crate::layers::Linear;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::ssm::{self, DiagStateMatrix, DtReading};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsmConfig {
    /// Pooled spatial side `p`; the sequence feature size is `P = p*p`.
    pub pool: usize,
    /// Inner projection width `D`.
    pub inner: usize,
    pub conv_k: usize,
    /// Feed `X*X` to the scan instead of `X`.
    pub square_input: bool,
    pub dt_reading: DtReading,
    /// Let the optimizer update the state matrix (stored as `log(-a)`).
    pub train_state: bool,
}

impl CsmConfig {
    /// Defaults: `D = 2P`, width-4 causal conv.
    pub fn new(pool: usize) -> Result<Self> {
        let cfg = Self {
            pool,
            inner: 2 * pool * pool,
            conv_k: 4,
            square_input: false,
            dt_reading: DtReading::SpectralRadius,
            train_state: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.inner == 0 || self.conv_k == 0 {
            return Err(ScsmError::arg("CSM sizes must be positive"));
        }
        Ok(())
    }

    pub fn seq_features(&self) -> usize {
        self.pool * self.pool
    }
}

#[derive(Clone, Debug)]
pub struct CsmWeights {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub w_x: Linear,
    pub w_z: Linear,
    pub linear_b: Linear,
    pub linear_c: Linear,
    pub conv_kernel: ParamId,
    /// Zero-initialised so a fresh block is the identity.
    pub w_out: Linear,
    pub a_log: ParamId,
}

impl CsmWeights {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &CsmConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Scsm;
        let (p, d) = (cfg.seq_features(), cfg.inner);
        let norm_gamma = store.add(format!("{prefix}.norm.gamma"), Tensor::ones(&[p]), g);
        let norm_beta = store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[p]), g);
        let w_x = Linear::new(store, &format!("{prefix}.w_x"), p, d, false, g, rng);
        let w_z = Linear::new(store, &format!("{prefix}.w_z"), p, d, false, g, rng);
        let linear_b = Linear::new(store, &format!("{prefix}.linear_b"), d, d, false, g, rng);
        let linear_c = Linear::new(store, &format!("{prefix}.linear_c"), d, d, false, g, rng);
        let conv_kernel = store.add_uniform(format!("{prefix}.conv1d"), &[d, cfg.conv_k], cfg.conv_k, g, rng);
        let w_out = Linear::zeros(store, &format!("{prefix}.w_out"), d, p, g);
        let a = ssm::s4d_real_init(d);
        let a_log = store.add(format!("{prefix}.a_log"), Tensor::new(&[d], a.to_log()).expect("d > 0"), g);
        if !cfg.train_state {
            store.pin(a_log);
        }
        Self { norm_gamma, norm_beta, w_x, w_z, linear_b, linear_c, conv_kernel, w_out, a_log }
    }
}

/// Intermediate nodes of one CSM evaluation.
#[derive(Clone, Debug)]
pub struct CsmTrace {
    /// Pooled channel sequence `[B,C_e,P]` (before the norm).
    pub seq: NodeId,
    /// `X` straight from `W_x`, `[B,C_e,D]`.
    pub x_proj: NodeId,
    pub z: NodeId,
    pub b_t: NodeId,
    pub c_t: NodeId,
    /// Scan input after conv + SiLU (+ square), `[B,C_e,D]`.
    pub scan_in: NodeId,
    pub dt: f64,
    /// Raw scan output `[B,C_e,D]`.
    pub scan_out: NodeId,
    pub output: NodeId,
}

fn at_line<T>(line: u32, what: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        ScsmError::Dimension { op, lhs, rhs } => ScsmError::Dimension {
            op: format!("channel-state line {line} ({what}): {op}"),
            lhs,
            rhs,
        },
        other => other,
    })
}

/// Square side of a flattened spatial sequence of length `s`.
pub fn grid_side(s: usize, p: usize) -> Result<usize> {
    let side = (s as f64).sqrt().round() as usize;
    if side * side != s || side < p {
        return Err(ScsmError::arg(format!(
            "sequence length {s} is not a square grid of side >= {p}"
        )));
    }
    Ok(side)
}

/// `F[S,B,C_e] -> T[B,C_e,P]`: restore the grid, pool to `p x p`, flatten.
pub fn channels_as_sequence(g: &mut Graph, f: NodeId, p: usize) -> Result<NodeId> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 {
        return Err(ScsmError::dim("channels_as_sequence", &s, &[0, 0, 0]));
    }
    let side = grid_side(s[0], p)?;
    let bcs = at_line(2, "permute", g.permute(f, &[1, 2, 0]))?;
    let grid = g.reshape(bcs, &[s[1], s[2], side, side])?;
    let pooled = at_line(3, "downsample", g.adaptive_avg_pool2d(grid, p))?;
    g.reshape(pooled, &[s[1], s[2], p * p])
}

pub fn csm_forward(g: &mut Graph, store: &ParamStore, f: NodeId, w: &CsmWeights, cfg: &CsmConfig) -> Result<NodeId> {
    Ok(csm_forward_traced(g, store, f, w, cfg)?.output)
}

pub fn csm_forward_traced(
    g: &mut Graph,
    store: &ParamStore,
    f: NodeId,
    w: &CsmWeights,
    cfg: &CsmConfig,
) -> Result<CsmTrace> {
    let in_shape = g.shape(f).to_vec();
    let seq = channels_as_sequence(g, f, cfg.pool)?;
    let gamma = g.param(store, w.norm_gamma);
    let beta = g.param(store, w.norm_beta);
    let t = at_line(5, "norm", g.layer_norm(seq, gamma, beta))?;
    let x_proj = at_line(6, "linear 1", w.w_x.forward(g, store, t))?;
    let z = at_line(7, "linear 2", w.w_z.forward(g, store, t))?;
    let b_t = at_line(8, "B projection", w.linear_b.forward(g, store, x_proj))?;
    let c_t = at_line(9, "C projection", w.linear_c.forward(g, store, x_proj))?;

    let a_log = g.param(store, w.a_log);
    let a = DiagStateMatrix::from_log(g.value(a_log).data())?;
    let dt = ssm::compute_dt(a.values(), cfg.dt_reading)?;

    let kernel = g.param(store, w.conv_kernel);
    let conv = at_line(13, "conv1d", g.conv1d_depthwise_seq(x_proj, kernel))?;
    let mut scan_in = g.silu(conv)?;
    if cfg.square_input {
        scan_in = g.mul(scan_in, scan_in)?;
    }
    let scan_out = at_line(14, "scan", g.ssm_scan_read_dt(scan_in, b_t, c_t, a_log, cfg.dt_reading))?;
    let gate = g.silu(z)?;
    let gated = at_line(15, "gate", g.mul(scan_out, gate))?;
    let y = at_line(16, "linear 3", w.w_out.forward(g, store, gated))?;

    let (s, bsz, ce) = (in_shape[0], in_shape[1], in_shape[2]);
    let side = grid_side(s, cfg.pool)?;
    let grid = g.reshape(y, &[bsz, ce, cfg.pool, cfg.pool])?;
    let up = at_line(18, "upsample", g.upsample_nearest(grid, side, side))?;
    let flat = g.reshape(up, &[bsz, ce, s])?;
    let back = at_line(19, "permute", g.permute(flat, &[2, 0, 1]))?;
    let output = at_line(20, "residual", g.add(back, f))?;
    Ok(CsmTrace { seq, x_proj, z, b_t, c_t, scan_in, dt, scan_out, output })
}

/// Jacobian-norm matrix `M[i][j] = || d scan_out[i] / d X[j] ||_F` over the
/// channel sequence, where `X` is the `W_x` projection and the norm runs over
/// batch and feature lanes.
pub fn channel_sequence_sensitivity(
    store: &ParamStore,
    f: &Tensor,
    w: &CsmWeights,
    cfg: &CsmConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let fin = g.input(f.clone());
    let trace = csm_forward_traced(&mut g, store, fin, w, cfg)?;
    let x_val = g.value(trace.x_proj).clone();
    let [bsz, ce, d] = [x_val.shape()[0], x_val.shape()[1], x_val.shape()[2]];

    // Re-run the scan sub-graph from a differentiable copy of X.
    let mut sub = Graph::new();
    let x = sub.leaf(x_val, true);
    let kernel = sub.param(store, w.conv_kernel);
    let conv = sub.conv1d_depthwise_seq(x, kernel)?;
    let mut scan_in = sub.silu(conv)?;
    if cfg.square_input {
        scan_in = sub.mul(scan_in, scan_in)?;
    }
    let b_t = w.linear_b.forward(&mut sub, store, x)?;
    let c_t = w.linear_c.forward(&mut sub, store, x)?;
    let a_log = sub.param(store, w.a_log);
    let y = sub.ssm_scan(scan_in, b_t, c_t, a_log, trace.dt)?;

    let mut out = Tensor::zeros(&[ce, ce]);
    for b in 0..bsz {
        for i in 0..ce {
            for k in 0..d {
                let mut sel = Tensor::zeros(&[bsz, ce, d]);
                sel.set(&[b, i, k], 1.0);
                let mask = sub.input(sel);
                let picked = sub.mul(y, mask)?;
                let loss = sub.sum(picked)?;
                let grads = sub.backward(loss)?;
                let gx = grads.get(x).expect("x requires grad");
                for bb in 0..bsz {
                    for j in 0..ce {
                        let row = &gx.data()[(bb * ce + j) * d..(bb * ce + j + 1) * d];
                        let acc = out.at(&[i, j]) + row.iter().map(|v| v * v).sum::<f64>();
                        out.set(&[i, j], acc);
                    }
                }
            }
        }
    }
    Ok(out.map(f64::sqrt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pooling_is_identity_when_grid_equals_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ft = Tensor::randn(&[4, 2, 3], &mut rng);
        let mut g = Graph::new();
        let f = g.input(ft.clone());
        let t = channels_as_sequence(&mut g, f, 2).unwrap();
        assert_eq!(g.shape(t), &[2, 3, 4]);
        for s in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(g.value(t).at(&[b, c, s]), ft.at(&[s, b, c]));
                }
            }
        }
    }

    #[test]
    fn sequence_shape_and_grid_errors() {
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(&[36, 2, 16]));
        let t = channels_as_sequence(&mut g, f, 2).unwrap();
        assert_eq!(g.shape(t), &[2, 16, 4]);
        let bad = g.input(Tensor::zeros(&[35, 2, 16]));
        assert!(matches!(channels_as_sequence(&mut g, bad, 2), Err(ScsmError::Argument(_))));
        let small = g.input(Tensor::zeros(&[4, 1, 2]));
        assert!(channels_as_sequence(&mut g, small, 3).is_err());
    }

    #[test]
    fn fresh_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CsmConfig::new(2).unwrap();
        let mut store = ParamStore::new();
        let w = CsmWeights::new(&mut store, "csm", &cfg, &mut rng);
        let ft = Tensor::randn(&[16, 2, 8], &mut rng);
        let mut g = Graph::new();
        let f = g.input(ft.clone());
        let out = csm_forward(&mut g, &store, f, &w, &cfg).unwrap();
        assert_eq!(g.value(out), &ft);
    }

    #[test]
    fn closed_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CsmConfig::new(2).unwrap();
        let mut store = ParamStore::new();
        let w = CsmWeights::new(&mut store, "csm", &cfg, &mut rng);
        store.set_value(w.w_out.weight, Tensor::randn(&[8, 4], &mut rng)).unwrap();
        store.set_value(w.w_z.weight, Tensor::zeros(&[4, 8])).unwrap();
        let ft = Tensor::randn(&[16, 1, 8], &mut rng);
        let mut g = Graph::new();
        let f = g.input(ft.clone());
        let out = csm_forward(&mut g, &store, f, &w, &cfg).unwrap();
        assert_eq!(g.value(out), &ft);
    }

    #[test]
    fn dimension_errors_name_the_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CsmConfig::new(2).unwrap();
        let mut store = ParamStore::new();
        let w = CsmWeights::new(&mut store, "csm", &cfg, &mut rng);
        let other = CsmConfig { pool: 3, ..cfg.clone() };
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(&[36, 1, 4]));
        match csm_forward(&mut g, &store, f, &w, &other) {
            Err(ScsmError::Dimension { op, .. }) => assert!(op.contains("line 5"), "{op}"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }
}
