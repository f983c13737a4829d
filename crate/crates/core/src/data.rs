//! Synthetic few-shot image tasks: a procedural renderer, base/novel episode
//! splits, named seed streams and a small on-disk cache.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, ScsmError};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

/// Independent generator for the stream `name` under `master`.
pub fn seed_stream(master: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Stripe,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] =
        [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross, ShapeKind::Ring, ShapeKind::Stripe];

    /// Membership test in shape-local coordinates scaled to unit size.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeKind::Triangle => v >= -0.6 && v <= 1.0 && u.abs() <= (1.0 - v) * 0.62,
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Stripe => v.abs() <= 0.35 && u.abs() <= 1.0,
        }
    }
}

/// Generative description of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub kind: ShapeKind,
    /// Hue in `[0,1)`.
    pub hue: f64,
    /// Cycles of the stripe texture across the shape.
    pub texture_freq: f64,
    /// Radius range in pixels.
    pub size_range: (f64, f64),
    pub seed: u64,
}

/// The 16-class catalog. The first twelve each own a hue; classes 12..16
/// form a confusable group of two shapes in two nearby hues.
pub fn class_catalog() -> Vec<ClassSpec> {
    use ShapeKind::*;
    let table = [
        (Disk, 0.0 / 12.0, 0.0),
        (Square, 1.0 / 12.0, 1.5),
        (Triangle, 2.0 / 12.0, 3.0),
        (Cross, 3.0 / 12.0, 0.0),
        (Ring, 4.0 / 12.0, 1.5),
        (Stripe, 5.0 / 12.0, 3.0),
        (Square, 6.0 / 12.0, 0.0),
        (Disk, 7.0 / 12.0, 3.0),
        (Cross, 8.0 / 12.0, 1.5),
        (Triangle, 9.0 / 12.0, 0.0),
        (Stripe, 10.0 / 12.0, 1.5),
        (Ring, 11.0 / 12.0, 3.0),
        (Disk, 0.25, 1.5),
        (Ring, 0.25, 1.5),
        (Disk, 0.40, 1.5),
        (Ring, 0.40, 1.5),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(kind, hue, texture_freq))| ClassSpec {
            kind,
            hue,
            texture_freq,
            size_range: (7.0, 12.0),
            seed: i as u64,
        })
        .collect()
}

/// Rendering noise knobs shared by every class.
#[derive(Clone, Debug, PartialEq)]
pub struct Jitter {
    pub position: f64,
    pub hue: f64,
    pub background_noise: f64,
    /// Small random shapes drawn behind the object.
    pub distractors: usize,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { position: 5.0, hue: 0.03, background_noise: 0.15, distractors: 1 }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders one `3 x 32 x 32` image (channel-major bytes).
pub fn render<R: Rng + ?Sized>(class: &ClassSpec, jitter: &Jitter, rng: &mut R) -> Vec<u8> {
    let n = IMAGE_SIZE as f64;
    let cx = n / 2.0 + rng.gen_range(-jitter.position..=jitter.position);
    let cy = n / 2.0 + rng.gen_range(-jitter.position..=jitter.position);
    let theta = rng.gen_range(0.0..2.0 * PI);
    let radius = rng.gen_range(class.size_range.0..=class.size_range.1);
    let hue = class.hue + rng.gen_range(-jitter.hue..=jitter.hue);
    let color = hsv_to_rgb(hue, rng.gen_range(0.6..0.9), rng.gen_range(0.7..1.0));
    let bg_level = rng.gen_range(0.15..0.45);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (sin, cos) = theta.sin_cos();
    let distractors: Vec<(ShapeKind, f64, f64, f64, [f64; 3])> = (0..jitter.distractors)
        .map(|_| {
            let kind = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
            let col = hsv_to_rgb(rng.gen::<f64>(), rng.gen_range(0.3..0.9), rng.gen_range(0.4..0.9));
            (kind, rng.gen_range(0.0..n), rng.gen_range(0.0..n), rng.gen_range(2.5..4.5), col)
        })
        .collect();
    let mut out = vec![0u8; IMAGE_BYTES];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (cos * dx + sin * dy) / radius;
            let v = (-sin * dx + cos * dy) / radius;
            let inside = class.kind.contains(u, v);
            let behind = distractors
                .iter()
                .find(|(k, ox, oy, r, _)| k.contains((x as f64 + 0.5 - ox) / r, (y as f64 + 0.5 - oy) / r))
                .map(|d| d.4);
            let shade = 1.0 - 0.35 * (0.5 + 0.5 * (2.0 * PI * class.texture_freq * u + phase).sin()) * f64::from(class.texture_freq > 0.0);
            for (c, &col) in color.iter().enumerate() {
                let noise = rng.gen_range(-jitter.background_noise..=jitter.background_noise);
                let val = match (inside, behind) {
                    (true, _) => col * shade + 0.3 * noise,
                    (false, Some(d)) => d[c] + 0.3 * noise,
                    (false, None) => bg_level + noise,
                };
                out[c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Base/novel task description.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub n_base: usize,
    /// Shots per novel class.
    pub shots: usize,
    pub eval_per_class: usize,
    pub master_seed: u64,
    pub jitter: Jitter,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            base_classes: (0..12).collect(),
            novel_classes: (12..16).collect(),
            n_base: 200,
            shots: 10,
            eval_per_class: 100,
            master_seed: 0,
            jitter: Jitter::default(),
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        let n = class_catalog().len();
        if self.shots == 0 {
            return Err(ScsmError::arg("shots K must be positive"));
        }
        if self.base_classes.is_empty() || self.novel_classes.is_empty() {
            return Err(ScsmError::arg("base and novel class sets must be non-empty"));
        }
        if self.n_base == 0 || self.eval_per_class == 0 {
            return Err(ScsmError::arg("sample counts must be positive"));
        }
        let base: HashSet<_> = self.base_classes.iter().collect();
        let novel: HashSet<_> = self.novel_classes.iter().collect();
        if base.len() != self.base_classes.len() || novel.len() != self.novel_classes.len() {
            return Err(ScsmError::arg("duplicate class in a class set"));
        }
        if let Some(c) = base.intersection(&novel).next() {
            return Err(ScsmError::arg(format!("class {c} is both base and novel")));
        }
        if let Some(c) = self.base_classes.iter().chain(&self.novel_classes).find(|&&c| c >= n) {
            return Err(ScsmError::arg(format!("class {c} outside the {n}-class catalog")));
        }
        Ok(())
    }

    /// Canonical text form; the basis of [`EpisodeSpec::hash`].
    pub fn canonical(&self) -> String {
        let j = &self.jitter;
        format!(
            "base={:?};novel={:?};n_base={};shots={};eval={};seed={};jitter={:?},{:?},{:?},{}",
            self.base_classes,
            self.novel_classes,
            self.n_base,
            self.shots,
            self.eval_per_class,
            self.master_seed,
            j.position,
            j.hue,
            j.background_noise,
            j.distractors
        )
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Base then novel: the label space of the joint (generalized) head.
    pub fn all_classes(&self) -> Vec<usize> {
        self.base_classes.iter().chain(&self.novel_classes).copied().collect()
    }
}

/// Images with catalog class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    fn push(&mut self, img: Vec<u8>, label: usize) {
        self.images.extend_from_slice(&img);
        self.labels.push(label);
    }

    /// `[n,3,32,32]` tensor with pixel values in `[0,1]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * IMAGE_BYTES);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&b| f64::from(b) / 255.0));
        }
        Tensor::new(&[idx.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("non-empty batch")
    }

    /// Labels mapped to their positions in `classes`.
    pub fn indexed_labels(&self, classes: &[usize]) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| {
                classes
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| ScsmError::arg(format!("label {l} not in class list {classes:?}")))
            })
            .collect()
    }

    pub fn label_counts(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut m = std::collections::BTreeMap::new();
        for &l in &self.labels {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }

    pub fn image_hashes(&self) -> Vec<[u8; 32]> {
        (0..self.len()).map(|i| Sha256::digest(self.image(i)).into()).collect()
    }

    /// The first `k` samples of every class, in original order.
    pub fn first_per_class(&self, k: usize) -> Split {
        let mut seen = std::collections::HashMap::new();
        let mut out = Split::default();
        for i in 0..self.len() {
            let n = seen.entry(self.labels[i]).or_insert(0usize);
            if *n < k {
                *n += 1;
                out.push(self.image(i).to_vec(), self.labels[i]);
            }
        }
        out
    }

    pub fn concat(&self, other: &Split) -> Split {
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSet {
    pub spec: EpisodeSpec,
    pub base_train: Split,
    pub base_eval: Split,
    pub novel_train: Split,
    pub novel_eval: Split,
}

fn render_split(spec: &EpisodeSpec, split: &str, classes: &[usize], per_class: usize) -> Split {
    let catalog = class_catalog();
    let mut out = Split::default();
    for &c in classes {
        for i in 0..per_class {
            let mut rng = seed_stream(spec.master_seed, &format!("render/{split}/{c}/{i}"));
            out.push(render(&catalog[c], &spec.jitter, &mut rng), c);
        }
    }
    out
}

/// Deterministic rendering of all four splits. Novel shots are drawn from
/// per-sample streams, so the K-shot set is a prefix of every larger K.
pub fn synthesize_dataset(spec: &EpisodeSpec) -> Result<EpisodeSet> {
    spec.validate()?;
    let set = EpisodeSet {
        spec: spec.clone(),
        base_train: render_split(spec, "base_train", &spec.base_classes, spec.n_base),
        base_eval: render_split(spec, "base_eval", &spec.base_classes, spec.eval_per_class),
        novel_train: render_split(spec, "novel_train", &spec.novel_classes, spec.shots),
        novel_eval: render_split(spec, "novel_eval", &spec.novel_classes, spec.eval_per_class),
    };
    set.check_leakage()?;
    Ok(set)
}

impl EpisodeSet {
    /// Fails if any evaluation image also occurs in a training split.
    pub fn check_leakage(&self) -> Result<()> {
        let train: HashSet<[u8; 32]> =
            self.base_train.image_hashes().into_iter().chain(self.novel_train.image_hashes()).collect();
        for (name, split) in [("base_eval", &self.base_eval), ("novel_eval", &self.novel_eval)] {
            if split.image_hashes().iter().any(|h| train.contains(h)) {
                return Err(ScsmError::Contamination(format!("{name} image found in a training split")));
            }
        }
        Ok(())
    }

    /// Balanced generalized set: `K` shots of every base and novel class.
    pub fn balanced_shots(&self, k: usize) -> Split {
        self.base_train.first_per_class(k).concat(&self.novel_train.first_per_class(k))
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"SCSMDATA");
        let canon = self.spec.canonical();
        out.extend_from_slice(&(canon.len() as u64).to_le_bytes());
        out.extend_from_slice(canon.as_bytes());
        for s in [&self.base_train, &self.base_eval, &self.novel_train, &self.novel_eval] {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            for &l in &s.labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
            out.extend_from_slice(&s.images);
        }
        out
    }

    fn from_bytes(spec: &EpisodeSpec, bytes: &[u8]) -> Result<Self> {
        let bad = || ScsmError::Format("dataset cache is corrupt".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(8)? != b"SCSMDATA" {
            return Err(bad());
        }
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if take(len)? != spec.canonical().as_bytes() {
            return Err(ScsmError::Format("dataset cache belongs to another spec".into()));
        }
        let mut splits = Vec::new();
        for _ in 0..4 {
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let labels = take(4 * n)?
                .chunks(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            let images = take(n * IMAGE_BYTES)?.to_vec();
            splits.push(Split { images, labels });
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        let novel_eval = splits.pop().unwrap();
        let novel_train = splits.pop().unwrap();
        let base_eval = splits.pop().unwrap();
        let base_train = splits.pop().unwrap();
        Ok(Self { spec: spec.clone(), base_train, base_eval, novel_train, novel_eval })
    }
}

pub fn cache_path(dir: &Path, spec: &EpisodeSpec) -> PathBuf {
    dir.join(format!("dataset-{}.bin", &spec.hash()[..16]))
}

/// Loads the dataset for `spec` from `dir`, rendering and storing it on a miss.
pub fn load_or_synthesize(spec: &EpisodeSpec, dir: &Path) -> Result<EpisodeSet> {
    let path = cache_path(dir, spec);
    if path.exists() {
        let bytes = std::fs::read(&path).map_err(|e| ScsmError::io(&path, e))?;
        let set = EpisodeSet::from_bytes(spec, &bytes)?;
        set.check_leakage()?;
        return Ok(set);
    }
    let set = synthesize_dataset(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| ScsmError::io(dir, e))?;
    std::fs::write(&path, set.to_bytes()).map_err(|e| ScsmError::io(&path, e))?;
    Ok(set)
}

/// Binary PPM (P6) of one channel-major image.
pub fn write_ppm(path: &Path, image: &[u8]) -> Result<()> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = format!("P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n").into_bytes();
    for p in 0..plane {
        out.extend([image[p], image[plane + p], image[2 * plane + p]]);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ScsmError::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| ScsmError::io(path, e))
}
