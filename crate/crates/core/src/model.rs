//! Backbone with an optional block after every stage, topped by the classifier head.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{Backbone, BackboneConfig, ClassifyHead};
use crate::block::{ScsmBlock, ScsmConfig, Variant};
use crate::csm::CsmConfig;
use crate::data::seed_stream;
use crate::error::{Result, ScsmError};
use crate::params::{ParamGroup, ParamStore};
use crate::sfm::SfmConfig;
use crate::ssm::DtReading;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: Variant,
    /// `C_e = C / ce_ratio`.
    pub ce_ratio: usize,
    pub heads: usize,
    /// Requested pooled side; a stage with a smaller grid uses its own side.
    pub pool: usize,
    /// Inner width `D`; `None` means `2 * p * p` per stage.
    pub inner: Option<usize>,
    pub conv_k: usize,
    pub scale_scores: bool,
    pub square_input: bool,
    pub dt_reading: DtReading,
    pub train_state: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            variant: Variant::SfmCsm,
            ce_ratio: 4,
            heads: 2,
            pool: 8,
            inner: None,
            conv_k: 4,
            scale_scores: true,
            square_input: false,
            dt_reading: DtReading::SpectralRadius,
            train_state: false,
        }
    }
}

impl ModelConfig {
    /// Block configuration for a stage with `channels` channels on a `side x side` grid.
    pub fn block_config(&self, channels: usize, side: usize) -> Result<ScsmConfig> {
        if self.ce_ratio == 0 || channels % self.ce_ratio != 0 {
            return Err(ScsmError::arg(format!("ce_ratio {} does not divide {channels}", self.ce_ratio)));
        }
        let sfm = SfmConfig::new(channels, channels / self.ce_ratio, self.heads, self.scale_scores)?;
        let pool = self.pool.min(side);
        let mut csm = CsmConfig::new(pool)?;
        if let Some(d) = self.inner {
            csm.inner = d;
        }
        csm.conv_k = self.conv_k;
        csm.square_input = self.square_input;
        csm.dt_reading = self.dt_reading;
        csm.train_state = self.train_state;
        csm.validate()?;
        Ok(ScsmConfig { sfm, csm, variant: self.variant })
    }
}

#[derive(Clone, Debug)]
pub struct FewShotModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub blocks: Vec<Option<ScsmBlock>>,
    pub head: ClassifyHead,
}

impl FewShotModel {
    /// Backbone, blocks and head draw from separate streams of `seed`, so
    /// every variant starts from the same backbone and head.
    pub fn new(cfg: ModelConfig, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 {
            return Err(ScsmError::arg("classifier needs at least one class"));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg.backbone.clone(), &mut seed_stream(seed, "init/backbone"))?;
        let mut blocks = Vec::new();
        for (i, (c, side)) in cfg.backbone.stage_shapes().into_iter().enumerate() {
            blocks.push(if cfg.variant.has_block() {
                let bc = cfg.block_config(c, side)?;
                let mut rng = seed_stream(seed, &format!("init/scsm/{i}"));
                Some(ScsmBlock::new(&mut store, &format!("scsm.stage{i}"), bc, &mut rng)?)
            } else {
                None
            });
        }
        let c_last = cfg.backbone.stages.last().expect("validated").0;
        let head = ClassifyHead::new(&mut store, c_last, n_classes, &mut seed_stream(seed, "init/head"));
        Ok(Self { cfg, store, backbone, blocks, head })
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes
    }

    pub fn final_channels(&self) -> usize {
        self.cfg.backbone.stages.last().expect("validated").0
    }

    /// Forward pass; `hook(g, stage, features)` may rewrite each stage output
    /// (after its block) before it flows on. Returns the stage outputs and logits.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        img: NodeId,
        hook: &mut dyn FnMut(&mut Graph, usize, NodeId) -> Result<NodeId>,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        let shape = g.shape(img).to_vec();
        let bc = &self.cfg.backbone;
        if shape.len() != 4 || shape[1..] != [bc.in_channels, bc.image_size, bc.image_size] {
            return Err(ScsmError::dim(
                "backbone_forward",
                &shape,
                &[0, bc.in_channels, bc.image_size, bc.image_size],
            ));
        }
        let mut h = img;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (s, block) in self.blocks.iter().enumerate() {
            h = self.backbone.stage_forward(g, &self.store, s, h)?;
            if let Some(b) = block {
                h = b.forward(g, &self.store, h)?;
            }
            h = hook(g, s, h)?;
            outs.push(h);
        }
        let logits = self.head.forward(g, &self.store, h)?;
        Ok((outs, logits))
    }

    /// Logits from the output of stage `stage`, running only the later stages.
    pub fn forward_tail(&self, g: &mut Graph, stage: usize, features: NodeId) -> Result<NodeId> {
        self.forward_tail_in(&self.store, g, stage, features)
    }

    /// [`FewShotModel::forward_tail`] reading parameters from `store`.
    pub fn forward_tail_in(&self, store: &ParamStore, g: &mut Graph, stage: usize, features: NodeId) -> Result<NodeId> {
        if stage >= self.blocks.len() {
            return Err(ScsmError::arg(format!("stage {stage} out of range")));
        }
        let mut h = features;
        for s in stage + 1..self.blocks.len() {
            h = self.backbone.stage_forward(g, store, s, h)?;
            if let Some(b) = &self.blocks[s] {
                h = b.forward(g, store, h)?;
            }
        }
        self.head.forward(g, store, h)
    }

    /// Output of stage `stage` for a batch, without keeping the graph.
    pub fn stage_features(&self, images: Tensor, stage: usize) -> Result<Tensor> {
        if stage >= self.blocks.len() {
            return Err(ScsmError::arg(format!("stage {stage} out of range")));
        }
        let mut g = Graph::new();
        let x = g.input(images);
        let (outs, _) = self.forward_with(&mut g, x, &mut |_, _, h| Ok(h))?;
        Ok(g.value(outs[stage]).clone())
    }

    pub fn forward(&self, g: &mut Graph, img: NodeId) -> Result<NodeId> {
        Ok(self.forward_with(g, img, &mut |_, _, h| Ok(h))?.1)
    }

    /// Logits for a batch of images without keeping the graph.
    pub fn predict(&self, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images);
        let logits = self.forward(&mut g, x)?;
        Ok(g.value(logits).clone())
    }

    /// Replaces the classifier with a fresh `n_classes`-way head. With
    /// `keep_rows`, the first `keep_rows` class columns keep their trained values.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, n_classes: usize, keep_rows: usize, rng: &mut R) -> Result<()> {
        if n_classes == 0 || keep_rows > n_classes || keep_rows > self.head.n_classes {
            return Err(ScsmError::arg(format!(
                "cannot resize a {}-way head to {n_classes} keeping {keep_rows}",
                self.head.n_classes
            )));
        }
        let c = self.final_channels();
        let old_n = self.head.n_classes;
        let old_w = self.store.value(self.head.linear.weight).clone();
        let bound = 1.0 / (c as f64).sqrt();
        let mut w = Tensor::uniform(&[c, n_classes], bound, rng);
        for i in 0..c {
            for j in 0..keep_rows {
                w.data_mut()[i * n_classes + j] = old_w.data()[i * old_n + j];
            }
        }
        self.store.reset_value(self.head.linear.weight, w);
        if let Some(b) = self.head.linear.bias {
            let old_b = self.store.value(b).clone();
            let mut nb = Tensor::zeros(&[n_classes]);
            nb.data_mut()[..keep_rows].copy_from_slice(&old_b.data()[..keep_rows]);
            self.store.reset_value(b, nb);
        }
        self.head.n_classes = n_classes;
        Ok(())
    }

    pub fn backbone_checksum(&self) -> String {
        self.store.group_checksum(ParamGroup::Backbone)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blocks_leave_outputs_unchanged_at_init() {
        let img = Tensor::uniform(&[2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(3)).map(|v| v.abs());
        let mut logits = Vec::new();
        for v in [Variant::Baseline, Variant::Csm, Variant::Sfm, Variant::SfmCsm] {
            let m = FewShotModel::new(ModelConfig { variant: v, ..Default::default() }, 5, 1).unwrap();
            logits.push(m.predict(img.clone()).unwrap());
        }
        for l in &logits[1..] {
            assert_eq!(l, &logits[0]);
        }
    }

    #[test]
    fn tail_from_last_stage_matches_forward() {
        let m = FewShotModel::new(ModelConfig::default(), 4, 2).unwrap();
        let img = Tensor::uniform(&[2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(5)).map(|v| v.abs());
        for stage in 0..3 {
            let f = m.stage_features(img.clone(), stage).unwrap();
            let mut g = Graph::new();
            let x = g.input(f);
            let logits = m.forward_tail(&mut g, stage, x).unwrap();
            assert_eq!(g.value(logits), &m.predict(img.clone()).unwrap());
        }
    }

    #[test]
    fn pool_clamped_to_stage_grid() {
        let cfg = ModelConfig::default();
        let bc = cfg.block_config(64, 4).unwrap();
        assert_eq!(bc.csm.pool, 4);
        assert_eq!(bc.csm.inner, 32);
        assert_eq!(cfg.block_config(16, 16).unwrap().csm.pool, 8);
    }

    #[test]
    fn head_reset_keeps_requested_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = FewShotModel::new(ModelConfig { variant: Variant::Baseline, ..Default::default() }, 3, 4).unwrap();
        let before = m.store.value(m.head.linear.weight).clone();
        m.reset_head(5, 3, &mut rng).unwrap();
        let after = m.store.value(m.head.linear.weight);
        assert_eq!(after.shape(), &[64, 5]);
        for i in 0..64 {
            for j in 0..3 {
                assert_eq!(after.at(&[i, j]), before.at(&[i, j]));
            }
        }
        assert!(m.reset_head(2, 3, &mut rng).is_err());
    }
}
