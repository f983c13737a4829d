//! Spatial feature modeling: channel compression followed by multi-head
//! self-attention over the `H*W` patch sequence.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, ScsmError};
use crate::layers::Conv1x1;
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct SfmConfig {
    pub channels: usize,
    pub compressed: usize,
    pub heads: usize,
    /// Divide attention scores by `sqrt(head_dim)`.
    pub scale_scores: bool,
}

impl SfmConfig {
    pub fn new(channels: usize, compressed: usize, heads: usize, scale_scores: bool) -> Result<Self> {
        if channels == 0 || compressed == 0 || heads == 0 {
            return Err(ScsmError::arg("SFM sizes must be positive"));
        }
        if compressed > channels {
            return Err(ScsmError::arg(format!("compressed channels {compressed} exceed {channels}")));
        }
        if compressed % heads != 0 {
            return Err(ScsmError::arg(format!("{heads} heads do not divide {compressed} channels")));
        }
        Ok(Self { channels, compressed, heads, scale_scores })
    }

    pub fn head_dim(&self) -> usize {
        self.compressed / self.heads
    }
}

/// Query/key/value maps `C_e -> d_h` of one head plus its slice of the
/// aggregation map `d_h -> C_e`.
#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub aggregate: ParamId,
}

#[derive(Clone, Debug)]
pub struct SfmWeights {
    pub compress: Conv1x1,
    /// `None` keeps only the compression (used by the channel-only ablation).
    pub heads: Option<Vec<HeadWeights>>,
}

impl SfmWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SfmConfig,
        with_attention: bool,
        rng: &mut R,
    ) -> Self {
        let group = ParamGroup::Scsm;
        let compress = Conv1x1::new(store, &format!("{prefix}.compress"), cfg.channels, cfg.compressed, group, false, rng);
        let heads = with_attention.then(|| {
            let (ce, dh) = (cfg.compressed, cfg.head_dim());
            (0..cfg.heads)
                .map(|n| HeadWeights {
                    query: store.add_uniform(format!("{prefix}.head{n}.query"), &[ce, dh], ce, group, rng),
                    key: store.add_uniform(format!("{prefix}.head{n}.key"), &[ce, dh], ce, group, rng),
                    value: store.add_uniform(format!("{prefix}.head{n}.value"), &[ce, dh], ce, group, rng),
                    aggregate: store.add_uniform(format!("{prefix}.head{n}.aggregate"), &[dh, ce], cfg.compressed, group, rng),
                })
                .collect()
        });
        Self { compress, heads }
    }
}

/// `[B,C,H,W] -> [S,B,C]`, position `(h,w)` at sequence index `h*W + w`.
pub fn to_patch_sequence(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(ScsmError::dim("to_patch_sequence", &s, &[0, 0, 0, 0]));
    }
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(flat, &[2, 0, 1])
}

/// Inverse of [`to_patch_sequence`].
pub fn from_patch_sequence(g: &mut Graph, f: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 || s[0] != h * w {
        return Err(ScsmError::dim("from_patch_sequence", &s, &[h * w]));
    }
    let bcs = g.permute(f, &[1, 2, 0])?;
    g.reshape(bcs, &[s[1], s[2], h, w])
}

/// One head of attention on a batch-major sequence `fb[B,S,C_e]`.
/// Returns the head output `[B,S,d_h]` and the row-stochastic weights `[B,S,S]`.
fn attend(
    g: &mut Graph,
    store: &ParamStore,
    fb: NodeId,
    head: &HeadWeights,
    cfg: &SfmConfig,
) -> Result<(NodeId, NodeId)> {
    let wq = g.param(store, head.query);
    let wk = g.param(store, head.key);
    let wv = g.param(store, head.value);
    let mut q = g.matmul(fb, wq)?;
    let k = g.matmul(fb, wk)?;
    let v = g.matmul(fb, wv)?;
    if cfg.scale_scores {
        // scaling q is cheaper than scaling the S x S scores
        q = g.scale(q, 1.0 / (cfg.head_dim() as f64).sqrt())?;
    }
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let weights = g.softmax_lastdim(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Attention of head `n` over the compressed patch sequence `f[S,B,C_e]`.
/// Returns `([S,B,d_h], weights[B,S,S])`.
pub fn spatial_attention(
    g: &mut Graph,
    store: &ParamStore,
    f: NodeId,
    w: &SfmWeights,
    cfg: &SfmConfig,
    n: usize,
) -> Result<(NodeId, NodeId)> {
    let heads = w.heads.as_ref().ok_or_else(|| ScsmError::arg("SFM built without attention"))?;
    let head = heads.get(n).ok_or_else(|| ScsmError::arg(format!("head {n} out of range")))?;
    let fb = g.permute(f, &[1, 0, 2])?;
    let (out, weights) = attend(g, store, fb, head, cfg)?;
    Ok((g.permute(out, &[1, 0, 2])?, weights))
}

/// Compress channels, form the patch sequence and aggregate all heads:
/// `F = sum_m head_m(f) W_m`. Output `[S,B,C_e]`.
pub fn sfm_forward(g: &mut Graph, store: &ParamStore, x: NodeId, w: &SfmWeights, cfg: &SfmConfig) -> Result<NodeId> {
    let compressed = w.compress.forward(g, store, x)?;
    let f = to_patch_sequence(g, compressed)?;
    let Some(heads) = &w.heads else {
        return Ok(f);
    };
    let fb = g.permute(f, &[1, 0, 2])?;
    let mut acc: Option<NodeId> = None;
    for head in heads {
        let (out, _) = attend(g, store, fb, head, cfg)?;
        let wm = g.param(store, head.aggregate);
        let proj = g.matmul(out, wm)?;
        acc = Some(match acc {
            Some(a) => g.add(a, proj)?,
            None => proj,
        });
    }
    let fused = acc.expect("at least one head");
    g.permute(fused, &[1, 0, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, ce: usize, m: usize) -> (ParamStore, SfmWeights, SfmConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = SfmConfig::new(c, ce, m, true).unwrap();
        let mut store = ParamStore::new();
        let w = SfmWeights::new(&mut store, "sfm", &cfg, true, &mut rng);
        (store, w, cfg)
    }

    #[test]
    fn config_validation() {
        assert!(SfmConfig::new(8, 6, 4, true).is_err());
        assert!(SfmConfig::new(8, 16, 4, true).is_err());
        assert_eq!(SfmConfig::new(16, 4, 2, true).unwrap().head_dim(), 2);
    }

    #[test]
    fn patch_sequence_layout() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let f = to_patch_sequence(&mut g, x).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = g.input(Tensor::from_fn(&[2, 8, 5, 7], |i| i as f64));
        let f = to_patch_sequence(&mut g, x).unwrap();
        assert_eq!(g.shape(f), &[35, 2, 8]);
        let back = from_patch_sequence(&mut g, f, 5, 7).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn single_position_attention_returns_values() {
        let (store, w, cfg) = setup(4, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let f = g.input(Tensor::randn(&[1, 3, 4], &mut rng));
        let (out, weights) = spatial_attention(&mut g, &store, f, &w, &cfg, 1).unwrap();
        assert!(g.value(weights).data().iter().all(|&v| v == 1.0));
        let wv = store.value(w.heads.as_ref().unwrap()[1].value);
        let want = g.value(f).matmul(wv).unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn uniform_sequence_gives_uniform_weights() {
        let (store, w, cfg) = setup(4, 4, 2);
        let mut g = Graph::new();
        let f = g.input(Tensor::from_fn(&[5, 2, 4], |i| (i % 4) as f64 * 0.3 + ((i / 4) % 2) as f64));
        let (_, weights) = spatial_attention(&mut g, &store, f, &w, &cfg, 0).unwrap();
        for &v in g.value(weights).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let (store, w, cfg) = setup(8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let f = g.input(Tensor::randn(&[12, 3, 4], &mut rng).map(|v| v * 4.0));
        let (_, weights) = spatial_attention(&mut g, &store, f, &w, &cfg, 0).unwrap();
        for row in g.value(weights).data().chunks(12) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let (store, w, cfg) = setup(8, 4, 2);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 8, 3, 3]));
        let y = sfm_forward(&mut g, &store, x, &w, &cfg).unwrap();
        assert_eq!(g.shape(y), &[9, 2, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
