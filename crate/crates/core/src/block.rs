//! The residual spatial-channel block and the two-stage freeze policy.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::csm::{self, CsmConfig, CsmWeights};
use crate::error::{Result, ScsmError};
use crate::layers::Conv1x1;
use crate::params::{ParamGroup, ParamStore};
use crate::sfm::{self, SfmConfig, SfmWeights};

/// Which sub-modules a block carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// No block at all.
    Baseline,
    /// Compression + channel state model.
    Csm,
    /// Compression + spatial attention.
    Sfm,
    /// Full block.
    SfmCsm,
}

impl Variant {
    pub fn has_block(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Sfm | Variant::SfmCsm)
    }

    pub fn has_csm(self) -> bool {
        matches!(self, Variant::Csm | Variant::SfmCsm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Csm => "csm",
            Variant::Sfm => "sfm",
            Variant::SfmCsm => "sfm_csm",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = ScsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "csm" => Ok(Variant::Csm),
            "sfm" => Ok(Variant::Sfm),
            "sfm_csm" | "csm_sfm" => Ok(Variant::SfmCsm),
            _ => Err(ScsmError::arg(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScsmConfig {
    pub sfm: SfmConfig,
    pub csm: CsmConfig,
    pub variant: Variant,
}

#[derive(Clone, Debug)]
pub struct ScsmBlock {
    pub cfg: ScsmConfig,
    pub sfm: SfmWeights,
    pub csm: Option<CsmWeights>,
    /// `C_e -> C`, zero-initialised.
    pub expand: Conv1x1,
}

impl ScsmBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: ScsmConfig, rng: &mut R) -> Result<Self> {
        if !cfg.variant.has_block() {
            return Err(ScsmError::arg("baseline variant has no block"));
        }
        cfg.csm.validate()?;
        let sfm = SfmWeights::new(store, &format!("{prefix}.sfm"), &cfg.sfm, cfg.variant.has_attention(), rng);
        let csm = cfg
            .variant
            .has_csm()
            .then(|| CsmWeights::new(store, &format!("{prefix}.csm"), &cfg.csm, rng));
        let expand = Conv1x1::new(
            store,
            &format!("{prefix}.expand"),
            cfg.sfm.compressed,
            cfg.sfm.channels,
            ParamGroup::Scsm,
            true,
            rng,
        );
        Ok(Self { cfg, sfm, csm, expand })
    }

    /// `x + expand(grid(csm(sfm(x))))`, shape-preserving.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.sfm.channels {
            return Err(ScsmError::dim("scsm_forward", &shape, &[0, self.cfg.sfm.channels, 0, 0]));
        }
        let f = sfm::sfm_forward(g, store, x, &self.sfm, &self.cfg.sfm)?;
        let f = match &self.csm {
            Some(w) => csm::csm_forward(g, store, f, w, &self.cfg.csm)?,
            None => f,
        };
        let grid = sfm::from_patch_sequence(g, f, shape[2], shape[3])?;
        let delta = self.expand.forward(g, store, grid)?;
        g.add(x, delta)
    }
}

/// Training stage of the two-stage protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    Novel,
}

impl std::str::FromStr for Stage {
    type Err = ScsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "novel" => Ok(Stage::Novel),
            _ => Err(ScsmError::arg(format!("unknown stage '{s}'"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Novel => "novel",
        })
    }
}

/// Base: everything trains. Novel: the backbone is frozen, blocks and the
/// classifier head train. Probe parameters are never touched here.
pub fn apply_freeze(stage: Stage, store: &mut ParamStore) {
    store.set_group_trainable(ParamGroup::Backbone, stage == Stage::Base);
    store.set_group_trainable(ParamGroup::Scsm, true);
    store.set_group_trainable(ParamGroup::Head, true);
    store.set_group_trainable(ParamGroup::Probe, false);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(variant: Variant) -> (ParamStore, ScsmBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let cfg = ScsmConfig {
            sfm: SfmConfig::new(16, 4, 2, true).unwrap(),
            csm: CsmConfig::new(4).unwrap(),
            variant,
        };
        let b = ScsmBlock::new(&mut store, "blk", cfg, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn fresh_block_identity_and_shape() {
        for v in [Variant::Csm, Variant::Sfm, Variant::SfmCsm] {
            let (store, b) = block(v);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let xt = Tensor::randn(&[2, 16, 12, 12], &mut rng);
            let mut g = Graph::new();
            let x = g.input(xt.clone());
            let y = b.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.value(y), &xt, "{v}");
        }
    }

    #[test]
    fn stage_parsing_and_policy() {
        assert!("warmup".parse::<Stage>().is_err());
        let (mut store, _) = block(Variant::SfmCsm);
        store.add("bb", Tensor::ones(&[2]), ParamGroup::Backbone);
        apply_freeze(Stage::Novel, &mut store);
        assert!(store.group_is_frozen(ParamGroup::Backbone));
        let snapshot: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
        apply_freeze(Stage::Novel, &mut store);
        assert_eq!(snapshot, store.iter().map(|(_, p)| p.trainable).collect::<Vec<_>>());
        apply_freeze(Stage::Base, &mut store);
        assert!(!store.group_is_frozen(ParamGroup::Backbone));
        // the state matrix stays pinned in both stages
        let a = store.lookup("blk.csm.a_log").unwrap();
        assert!(!store.get(a).trainable);
    }
}
