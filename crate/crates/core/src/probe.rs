//! Squeeze-excitation channel probe, channel-retention curves and channel map export.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, NodeId};
use crate::data::{seed_stream, Split};
use crate::error::{Result, ScsmError};
use crate::layers::Linear;
use crate::model::FewShotModel;
use crate::params::{ParamGroup, ParamStore, Sgd};
use crate::tensor::Tensor;
use crate::train::argmax_rows;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub reduction: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { reduction: 4, steps: 300, lr: 0.05, momentum: 0.9, batch: 32 }
    }
}

/// `s = sigmoid(W2 relu(W1 gap(F)))`, one weight in `(0,1)` per channel.
#[derive(Clone, Debug)]
pub struct SeProbe {
    pub stage: usize,
    pub channels: usize,
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SeProbe {
    /// Adds the probe parameters to `store` (group `Probe`, frozen).
    pub fn attach(store: &mut ParamStore, stage: usize, channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 || channels == 0 {
            return Err(ScsmError::arg("probe sizes must be positive"));
        }
        let prefix = format!("probe.stage{stage}");
        if store.lookup(&format!("{prefix}.squeeze")).is_some() {
            return Err(ScsmError::arg(format!("a probe is already attached at stage {stage}")));
        }
        let hidden = (channels / reduction).max(1);
        let mut rng = seed_stream(seed, &format!("init/{prefix}"));
        let g = ParamGroup::Probe;
        let squeeze = Linear::new(store, &format!("{prefix}.squeeze"), channels, hidden, true, g, &mut rng);
        let excite = Linear::new(store, &format!("{prefix}.excite"), hidden, channels, true, g, &mut rng);
        store.set_group_trainable(g, false);
        Ok(Self { stage, channels, squeeze, excite })
    }

    /// Channel weights `[B,C]` for features `[B,C,H,W]`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> Result<NodeId> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(ScsmError::dim("probe", &s, &[0, self.channels, 0, 0]));
        }
        let pooled = g.adaptive_avg_pool2d(features, 1)?;
        let pooled = g.reshape(pooled, &[s[0], s[1]])?;
        let h = self.squeeze.forward(g, store, pooled)?;
        let h = g.relu(h)?;
        let e = self.excite.forward(g, store, h)?;
        g.sigmoid(e)
    }

    /// Plain evaluation of [`SeProbe::weights`].
    pub fn weights_of(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.input(features.clone());
        let w = self.weights(&mut g, store, f)?;
        Ok(g.value(w).clone())
    }
}

/// `features * s[..., None, None]`.
pub fn scale_channels(g: &mut Graph, features: NodeId, s: NodeId) -> Result<NodeId> {
    let shape = g.shape(s).to_vec();
    let s4 = g.reshape(s, &[shape[0], shape[1], 1, 1])?;
    g.mul(features, s4)
}

fn host_checksums(store: &ParamStore) -> [String; 3] {
    [ParamGroup::Backbone, ParamGroup::Scsm, ParamGroup::Head].map(|g| store.group_checksum(g))
}

/// Trains the probe on fixed `features` so that `tail(features * s)` predicts
/// `labels`. Every non-probe parameter must be frozen and stays bit-identical.
pub fn train_probe(
    store: &mut ParamStore,
    probe: &SeProbe,
    features: &Tensor,
    labels: &[usize],
    tail: &dyn Fn(&mut Graph, &ParamStore, NodeId) -> Result<NodeId>,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if store.iter().any(|(_, p)| p.group != ParamGroup::Probe && p.trainable) {
        return Err(ScsmError::PolicyViolation("probe training requires a frozen host".into()));
    }
    let n = features.shape()[0];
    if labels.len() != n {
        return Err(ScsmError::dim("train_probe labels", &[labels.len()], &[n]));
    }
    let before = host_checksums(store);
    store.set_group_trainable(ParamGroup::Probe, true);
    let per = features.numel() / n;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, 0.0);
    let mut rng = seed_stream(seed, &format!("probe/stage{}", probe.stage));
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch.min(n).max(1);
    let mut order: Vec<usize> = Vec::new();
    let result = (|| {
        for _ in 0..cfg.steps {
            if order.len() < batch {
                let mut fresh: Vec<usize> = (0..n).collect();
                fresh.shuffle(&mut rng);
                order.extend(fresh);
            }
            let idx: Vec<usize> = order.drain(..batch).collect();
            let mut shape = features.shape().to_vec();
            shape[0] = idx.len();
            let mut data = Vec::with_capacity(idx.len() * per);
            for &i in &idx {
                data.extend_from_slice(&features.data()[i * per..(i + 1) * per]);
            }
            let mut g = Graph::new();
            let f = g.input(Tensor::new(&shape, data)?);
            let s = probe.weights(&mut g, store, f)?;
            let scaled = scale_channels(&mut g, f, s)?;
            let logits = tail(&mut g, store, scaled)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = g.cross_entropy(logits, &y)?;
            losses.push(g.value(loss).item());
            let grads = g.backward(loss)?.for_params(&g);
            opt.step(store, &grads);
        }
        Ok(())
    })();
    store.set_group_trainable(ParamGroup::Probe, false);
    result?;
    if host_checksums(store) != before {
        return Err(ScsmError::PolicyViolation("probe training changed host parameters".into()));
    }
    Ok(losses)
}

fn stage_features_of(model: &FewShotModel, split: &Split, stage: usize, batch: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut shape = Vec::new();
    let mut data = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        let f = model.stage_features(split.batch(chunk), stage)?;
        shape = f.shape().to_vec();
        data.extend_from_slice(f.data());
    }
    shape[0] = split.len();
    Tensor::new(&shape, data)
}

/// Freezes the host, attaches a probe at `stage` and trains it on `data`.
pub fn train_model_probe(
    model: &mut FewShotModel,
    stage: usize,
    data: &Split,
    classes: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(SeProbe, Vec<f64>)> {
    let (c, _) = *model
        .cfg
        .backbone
        .stage_shapes()
        .get(stage)
        .ok_or_else(|| ScsmError::arg(format!("stage {stage} out of range")))?;
    for g in [ParamGroup::Backbone, ParamGroup::Scsm, ParamGroup::Head] {
        model.store.set_group_trainable(g, false);
    }
    let probe = SeProbe::attach(&mut model.store, stage, c, cfg.reduction, seed)?;
    let features = stage_features_of(model, data, stage, 100)?;
    let labels = data.indexed_labels(classes)?;
    let mut store = std::mem::take(&mut model.store);
    let tail = |g: &mut Graph, st: &ParamStore, h: NodeId| model.forward_tail_in(st, g, stage, h);
    let losses = train_probe(&mut store, &probe, &features, &labels, &tail, cfg, seed);
    model.store = store;
    Ok((probe, losses?))
}

/// Channels kept at retention level `q` percent of `c`.
pub fn keep_count(q: f64, c: usize) -> usize {
    (q * c as f64 / 100.0).round() as usize
}

/// 0/1 mask keeping the `keep` highest-weight channels of each row
/// (ties go to the lower channel index).
pub fn top_channel_mask(weights: &Tensor, keep: usize) -> Tensor {
    let (b, c) = (weights.shape()[0], weights.shape()[1]);
    let mut mask = Tensor::zeros(&[b, c, 1, 1]);
    for i in 0..b {
        let row = &weights.data()[i * c..(i + 1) * c];
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        for &ch in order.iter().take(keep) {
            mask.data_mut()[i * c + ch] = 1.0;
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelReport {
    pub stage: usize,
    /// Probe weights averaged over the evaluated images.
    pub mean_weights: Vec<f64>,
    /// `(q, accuracy)` with strictly decreasing `q`.
    pub curve: Vec<(f64, f64)>,
}

impl ChannelReport {
    pub fn accuracy_at(&self, q: f64) -> Option<f64> {
        self.curve.iter().find(|(x, _)| *x == q).map(|p| p.1)
    }

    /// `sum_q [acc(100) - acc(q)]` over the curve points below 100.
    pub fn degradation_area(&self) -> Option<f64> {
        let full = self.accuracy_at(100.0)?;
        Some(self.curve.iter().filter(|(q, _)| *q < 100.0).map(|(_, a)| full - a).sum())
    }
}

/// Accuracy on `eval` when each image keeps only its top-`q`% probe-weighted
/// channels at the probe stage. `q = 100` is exactly the unmasked model.
pub fn retention_curve(
    model: &FewShotModel,
    probe: &SeProbe,
    eval: &Split,
    classes: &[usize],
    q_list: &[f64],
    batch: usize,
) -> Result<ChannelReport> {
    if q_list.is_empty() {
        return Err(ScsmError::arg("retention needs at least one q value"));
    }
    if let Some(q) = q_list.iter().find(|q| !(0.0..=100.0).contains(*q)) {
        return Err(ScsmError::arg(format!("q={q} outside [0,100]")));
    }
    let mut qs = q_list.to_vec();
    qs.sort_by(|a, b| b.total_cmp(a));
    qs.dedup();
    let labels = eval.indexed_labels(classes)?;
    let mut correct = vec![0usize; qs.len()];
    let mut weight_sum = vec![0.0; probe.channels];
    let idx: Vec<usize> = (0..eval.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let f = model.stage_features(eval.batch(chunk), probe.stage)?;
        let w = probe.weights_of(&model.store, &f)?;
        for row in w.data().chunks(probe.channels) {
            for (acc, v) in weight_sum.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for (qi, &q) in qs.iter().enumerate() {
            let mask = top_channel_mask(&w, keep_count(q, probe.channels));
            let mut g = Graph::new();
            let fx = g.input(f.clone());
            let m = g.input(mask);
            let masked = g.mul(fx, m)?;
            let logits = model.forward_tail(&mut g, probe.stage, masked)?;
            let pred = argmax_rows(g.value(logits).data(), model.n_classes());
            correct[qi] += pred.iter().zip(chunk).filter(|(p, &i)| **p == labels[i]).count();
        }
    }
    let n = eval.len() as f64;
    Ok(ChannelReport {
        stage: probe.stage,
        mean_weights: weight_sum.into_iter().map(|s| s / n).collect(),
        curve: qs.into_iter().zip(correct).map(|(q, c)| (q, c as f64 / n)).collect(),
    })
}

/// Binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(ScsmError::dim("write_pgm", &[pixels.len()], &[width * height]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| ScsmError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| ScsmError::io(path, e))?;
    let bad = || ScsmError::Format(format!("{} is not a binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..).filter(|d| d.len() == w * h).ok_or_else(bad)?;
    Ok((w, h, data.to_vec()))
}

/// Min-max normalisation to bytes; a constant map becomes mid-gray.
pub fn quantize_map(map: &[f64]) -> Vec<u8> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 || !(hi - lo).is_finite() {
        return vec![128; map.len()];
    }
    map.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes the `top_k` highest- and lowest-weight channel maps of one image
/// (`features[C,H,W]`) as PGM files named by stage, rank and channel.
pub fn export_channel_maps(
    features: &Tensor,
    weights: &[f64],
    stage: usize,
    top_k: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if features.ndim() != 3 || features.shape()[0] != weights.len() {
        return Err(ScsmError::dim("export_channel_maps", features.shape(), &[weights.len(), 0, 0]));
    }
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if top_k == 0 || top_k > c {
        return Err(ScsmError::arg(format!("top_k={top_k} outside 1..={c}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| ScsmError::io(dir, e))?;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&x, &y| weights[y].total_cmp(&weights[x]).then(x.cmp(&y)));
    let mut paths = Vec::with_capacity(2 * top_k);
    let picks = order[..top_k]
        .iter()
        .enumerate()
        .map(|(r, &ch)| ("top", r, ch))
        .chain(order.iter().rev().take(top_k).enumerate().map(|(r, &ch)| ("bottom", r, ch)));
    for (kind, rank, ch) in picks {
        let map = &features.data()[ch * h * w..(ch + 1) * h * w];
        let path = dir.join(format!("stage{stage}_{kind}{rank:02}_ch{ch:03}_w{:.4}.pgm", weights[ch]));
        write_pgm(&path, w, h, &quantize_map(map))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_counts() {
        assert_eq!(keep_count(100.0, 64), 64);
        assert_eq!(keep_count(50.0, 64), 32);
        assert_eq!(keep_count(70.0, 64), 45);
        assert_eq!(keep_count(0.0, 64), 0);
    }

    #[test]
    fn mask_prefers_lower_index_on_ties() {
        let w = Tensor::new(&[1, 4], vec![0.5, 0.9, 0.5, 0.1]).unwrap();
        assert_eq!(top_channel_mask(&w, 2).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        assert_eq!(quantize_map(&[3.0; 5]), vec![128; 5]);
        assert_eq!(quantize_map(&[0.0, 1.0, 0.5]), vec![0, 255, 128]);
    }
}
