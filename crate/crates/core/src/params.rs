//! Named parameter storage and the SGD optimizer.

use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, ScsmError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Scsm,
    Head,
    Probe,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub path: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
    /// Pinned parameters stay frozen whatever the group policy says.
    pub pinned: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_path: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let path = path.into();
        assert!(!self.by_path.contains_key(&path), "duplicate parameter path {path}");
        let id = ParamId(self.params.len());
        self.by_path.insert(path.clone(), id);
        self.params.push(Param { path, value, group, trainable: true, pinned: false });
        id
    }

    /// Fan-in scaled uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(path, Tensor::uniform(shape, bound, rng), group)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(ScsmError::dim(format!("set {}", p.path), p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn lookup(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn pin(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.pinned = true;
        p.trainable = false;
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable && !p.pinned;
        }
    }

    /// Replaces a parameter value, allowing a shape change (head re-initialisation).
    pub fn reset_value(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn group_is_frozen(&self, group: ParamGroup) -> bool {
        self.params.iter().filter(|p| p.group == group).all(|p| !p.trainable)
    }

    /// SHA-256 over the paths and values of every parameter in `group`.
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.path.as_bytes());
            p.value.feed_hash(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.path.as_bytes());
            p.value.feed_hash(&mut h);
        }
        hex::encode(h.finalize())
    }
}

/// SGD with momentum and decoupled-from-loss L2 weight decay
/// (`g <- g + wd * w; v <- mu v + g; w <- w - lr v`).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Updates trainable parameters only; frozen ones are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let vel = self.velocity.entry(*id).or_insert_with(|| vec![0.0; g.numel()]);
            for ((w, &gv), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                let grad = gv + self.weight_decay * *w;
                *v = self.momentum * *v + grad;
                *w -= self.lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_untouched_by_step() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones(&[3]), ParamGroup::Backbone);
        let b = store.add("b", Tensor::ones(&[3]), ParamGroup::Head);
        store.set_group_trainable(ParamGroup::Backbone, false);
        let before = store.group_checksum(ParamGroup::Backbone);
        let mut opt = Sgd::new(0.1, 0.9, 1e-4);
        for _ in 0..5 {
            opt.step(&mut store, &[(a, Tensor::ones(&[3])), (b, Tensor::ones(&[3]))]);
        }
        assert_eq!(before, store.group_checksum(ParamGroup::Backbone));
        assert!(store.value(b).data()[0] < 1.0);
    }
}
