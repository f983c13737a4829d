//! Small staged convolutional feature extractor and the linear classifier head.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, ScsmError};
use crate::layers::{ConvRelu, Linear};
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// `(out_channels, stride)` of each stage's first convolution.
    pub stages: Vec<(usize, usize)>,
    /// Extra stride-1 convolutions per stage.
    pub extra_convs: usize,
    pub in_channels: usize,
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: vec![(16, 2), (32, 2), (64, 2)],
            extra_convs: 0,
            in_channels: 3,
            image_size: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(ScsmError::arg("backbone needs at least one stage"));
        }
        if let Some((c, _)) = self.stages.iter().find(|(c, s)| c % 4 != 0 || *c == 0 || *s == 0) {
            return Err(ScsmError::arg(format!("stage channels {c} must be a positive multiple of 4")));
        }
        Ok(())
    }

    /// `(channels, spatial side)` of every stage output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        let mut side = self.image_size;
        self.stages
            .iter()
            .map(|&(c, s)| {
                side = (side - 1) / s + 1;
                (c, side)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stages: Vec<Vec<ConvRelu>>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::new();
        for (i, &(c, stride)) in cfg.stages.iter().enumerate() {
            let mut convs = vec![ConvRelu::new(store, &format!("backbone.stage{i}.conv0"), c_in, c, stride, rng)];
            for j in 0..cfg.extra_convs {
                convs.push(ConvRelu::new(store, &format!("backbone.stage{i}.conv{}", j + 1), c, c, 1, rng));
            }
            stages.push(convs);
            c_in = c;
        }
        Ok(Self { cfg, stages })
    }

    pub fn stage_forward(&self, g: &mut Graph, store: &ParamStore, stage: usize, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for conv in &self.stages[stage] {
            h = conv.forward(g, store, h)?;
        }
        Ok(h)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(ScsmError::dim("backbone_forward", shape, &[0, want[0], want[1], want[2]]));
        }
        Ok(())
    }

    /// One feature map per stage.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, img: NodeId) -> Result<Vec<NodeId>> {
        self.check_input(g.shape(img))?;
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = img;
        for s in 0..self.stages.len() {
            h = self.stage_forward(g, store, s, h)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Global average pool followed by a linear map to class logits.
#[derive(Clone, Debug)]
pub struct ClassifyHead {
    pub linear: Linear,
    pub n_classes: usize,
}

impl ClassifyHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, n_classes: usize, rng: &mut R) -> Self {
        let linear = Linear::new(store, "head.weight", channels, n_classes, true, ParamGroup::Head, rng);
        Self { linear, n_classes }
    }

    /// `[B,C,H,W] -> [B,C]`
    pub fn pool(g: &mut Graph, features: NodeId) -> Result<NodeId> {
        let s = g.shape(features).to_vec();
        let pooled = g.adaptive_avg_pool2d(features, 1)?;
        g.reshape(pooled, &[s[0], s[1]])
    }

    pub fn logits_from_pooled(&self, g: &mut Graph, store: &ParamStore, pooled: NodeId) -> Result<NodeId> {
        self.linear.forward(g, store, pooled)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> Result<NodeId> {
        let pooled = Self::pool(g, features)?;
        self.logits_from_pooled(g, store, pooled)
    }
}
