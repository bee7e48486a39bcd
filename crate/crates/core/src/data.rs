//! Labeled image datasets, poison planning and on-disk persistence.
//!
//! Pixels are stored as `f32` in `[0, 1]` (channel-major rows) so that the
//! binary format round-trips bit-exactly; computation widens them to `f64`.
//!
//! A dataset directory holds `manifest.json`, `images.bin` (little-endian
//! `f32`, row-major `[n, c, h, w]`) and `labels.bin` (one `u8` per row).
//! A poisoned dataset adds `poison.json` describing how it was produced.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const POISON_FILE: &str = "poison.json";

/// Per-pixel noise scale of synthetic images.
pub const SYNTH_NOISE_STD: f64 = 0.15;

/// Slack allowed on the l-inf budget after rounding poisons to `f32`.
pub const LINF_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl From<[usize; 3]> for ImageShape {
    fn from(v: [usize; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<ImageShape> for [usize; 3] {
    fn from(s: ImageShape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Images in `[0,1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    shape: ImageShape,
    class_count: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        shape: ImageShape,
        class_count: usize,
        images: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Config(format!("empty image shape {shape}")));
        }
        if class_count == 0 || class_count > 256 {
            return Err(Error::Config(format!("class count {class_count} outside 1..=256")));
        }
        if labels.is_empty() {
            return Err(Error::Validation("dataset has no rows".into()));
        }
        if images.len() != labels.len() * shape.len() {
            return Err(Error::Validation(format!(
                "{} pixels do not match {} rows of shape {shape}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(p) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "pixel {} of row {} is {} (outside [0,1])",
                p % shape.len(),
                p / shape.len(),
                images[p]
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= class_count) {
            return Err(Error::Validation(format!(
                "label {} at row {i} is not below class count {class_count}",
                labels[i]
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            class_count,
            images,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, row: usize) -> usize {
        self.labels[row] as usize
    }

    pub fn image(&self, row: usize) -> &[f32] {
        let d = self.dim();
        &self.images[row * d..(row + 1) * d]
    }

    pub fn image_f64(&self, row: usize) -> Vec<f64> {
        self.image(row).iter().map(|&v| v as f64).collect()
    }

    /// Widened pixels and labels of the given rows, concatenated.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let d = self.dim();
        let mut x = Vec::with_capacity(rows.len() * d);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            x.extend(self.image(r).iter().map(|&v| v as f64));
            y.push(self.label(r));
        }
        (x, y)
    }

    /// All rows as `f64` pixels and labels.
    pub fn to_f64(&self) -> (Vec<f64>, Vec<usize>) {
        (
            self.images.iter().map(|&v| v as f64).collect(),
            self.labels.iter().map(|&l| l as usize).collect(),
        )
    }

    /// Rows `[0, k)` and `[k, n)` as two datasets.
    pub fn split_at(&self, k: usize) -> Result<(Self, Self)> {
        if k == 0 || k >= self.len() {
            return Err(Error::Config(format!("cannot split {} rows at {k}", self.len())));
        }
        let d = self.dim();
        let head = Self {
            name: format!("{}-train", self.name),
            shape: self.shape,
            class_count: self.class_count,
            images: self.images[..k * d].to_vec(),
            labels: self.labels[..k].to_vec(),
        };
        let tail = Self {
            name: format!("{}-test", self.name),
            shape: self.shape,
            class_count: self.class_count,
            images: self.images[k * d..].to_vec(),
            labels: self.labels[k..].to_vec(),
        };
        Ok((head, tail))
    }

    /// A copy with the given rows' pixels replaced. Replacement pixels are
    /// rounded to `f32`; labels are never touched.
    pub fn with_rows_replaced(&self, rows: &[usize], pixels: &[f64]) -> Result<Self> {
        let d = self.dim();
        if pixels.len() != rows.len() * d {
            return Err(Error::Usage(format!(
                "{} replacement pixels for {} rows of dim {d}",
                pixels.len(),
                rows.len()
            )));
        }
        let mut out = self.clone();
        for (k, &r) in rows.iter().enumerate() {
            if r >= self.len() {
                return Err(Error::Usage(format!("row {r} out of range")));
            }
            for (dst, &src) in out.images[r * d..(r + 1) * d]
                .iter_mut()
                .zip(&pixels[k * d..(k + 1) * d])
            {
                if !(0.0..=1.0).contains(&src) {
                    return Err(Error::Internal(format!(
                        "replacement pixel {src} for row {r} outside [0,1]"
                    )));
                }
                *dst = src as f32;
            }
        }
        Ok(out)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Rows carrying the given label, in ascending order.
    pub fn rows_with_label(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.label(r) == class).collect()
    }

    pub fn images_bytes(&self) -> Vec<u8> {
        self.images.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// SHA-256 of the label file contents.
    pub fn labels_sha256(&self) -> String {
        sha256_hex(&self.labels)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Class-conditional Gaussian images.
///
/// Every class owns a smooth unit-norm template built from a few Gaussian
/// bumps; a row of class `k` is `clip(0.5 + σ·(separation·t_k + z))` with
/// `z ~ N(0, I)` and `σ = SYNTH_NOISE_STD`. Labels cycle `0, 1, .., C-1`.
/// Templates and noise use separate streams, so with zero separation the
/// images do not depend on the labels at all.
pub fn synthesize_dataset(
    n: usize,
    shape: ImageShape,
    class_count: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if shape.is_empty() {
        return Err(Error::Config(format!("invalid image shape {shape}")));
    }
    if class_count == 0 || class_count > 256 {
        return Err(Error::Config(format!("class count {class_count} outside 1..=256")));
    }
    if n < class_count {
        return Err(Error::Config(format!("{n} rows cannot cover {class_count} classes")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation {separation} must be >= 0")));
    }
    let templates: Vec<Vec<f64>> = (0..class_count)
        .map(|k| class_template(shape, seed, k as u64))
        .collect();

    let d = shape.len();
    let mut noise = rng::stream(seed, &[tag::DATA_NOISE]);
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % class_count;
        for t in &templates[k] {
            let z: f64 = StandardNormal.sample(&mut noise);
            let v = 0.5 + SYNTH_NOISE_STD * (separation * t + z);
            images.push(v.clamp(0.0, 1.0) as f32);
        }
        labels.push(k as u8);
    }
    LabeledDataset::new(format!("synthetic-s{seed}"), shape, class_count, images, labels)
}

fn class_template(shape: ImageShape, seed: u64, class: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[tag::DATA_TEMPLATE, class]);
    let (h, w) = (shape.height as f64, shape.width as f64);
    let width = (h.max(w) / 4.0).max(0.75);
    let mut t = vec![0.0; shape.len()];
    for c in 0..shape.channels {
        for _ in 0..3 {
            let cy = rng.random::<f64>() * h;
            let cx = rng.random::<f64>() * w;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for r in 0..shape.height {
                for q in 0..shape.width {
                    let dy = r as f64 + 0.5 - cy;
                    let dx = q as f64 + 0.5 - cx;
                    t[(c * shape.height + r) * shape.width + q] +=
                        sign * (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
                }
            }
        }
    }
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    t.iter_mut().for_each(|v| *v -= mean);
    let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        t.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileNames {
    pub images: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n: usize,
    pub shape: ImageShape,
    pub class_count: usize,
    pub dtype: String,
    pub files: FileNames,
    pub sha256: FileNames,
}

/// Write `manifest.json`, `images.bin` and `labels.bin` into `dir`.
pub fn save_dataset(ds: &LabeledDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let images = ds.images_bytes();
    fs::write(dir.join(IMAGES_FILE), &images)?;
    fs::write(dir.join(LABELS_FILE), &ds.labels)?;
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        n: ds.len(),
        shape: ds.shape,
        class_count: ds.class_count,
        dtype: "f32le".into(),
        files: FileNames {
            images: IMAGES_FILE.into(),
            labels: LABELS_FILE.into(),
        },
        sha256: FileNames {
            images: sha256_hex(&images),
            labels: sha256_hex(&ds.labels),
        },
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Accepts either a dataset directory or the path of its `manifest.json`.
fn manifest_location(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Load a dataset written by [`save_dataset`].
///
/// File sizes are checked first, then the pixel range and labels, then the
/// recorded checksums.
pub fn load_dataset(manifest_path: &Path) -> Result<LabeledDataset> {
    let manifest_path = manifest_location(manifest_path);
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read(&manifest_path)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(&manifest_path, format!("bad manifest: {e}")))?;
    if manifest.dtype != "f32le" {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported dtype {:?}", manifest.dtype),
        ));
    }
    let images_path = dir.join(&manifest.files.images);
    let labels_path = dir.join(&manifest.files.labels);
    let images_raw = fs::read(&images_path)?;
    let labels = fs::read(&labels_path)?;

    let d = manifest.shape.len();
    if labels.len() != manifest.n {
        return Err(Error::format(
            &labels_path,
            format!("manifest declares {} rows, found {} labels", manifest.n, labels.len()),
        ));
    }
    if images_raw.len() != manifest.n * d * 4 {
        return Err(Error::format(
            &images_path,
            format!(
                "expected {} bytes for {} rows of shape {}, found {}",
                manifest.n * d * 4,
                manifest.n,
                manifest.shape,
                images_raw.len()
            ),
        ));
    }
    let images: Vec<f32> = images_raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let ds = LabeledDataset::new(
        manifest.name.clone(),
        manifest.shape,
        manifest.class_count,
        images,
        labels,
    )?;

    if sha256_hex(&images_raw) != manifest.sha256.images {
        return Err(Error::format(&images_path, "sha256 mismatch"));
    }
    if sha256_hex(&ds.labels) != manifest.sha256.labels {
        return Err(Error::format(&labels_path, "sha256 mismatch"));
    }
    Ok(ds)
}

/// Rows chosen for poisoning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    /// `None` selects from every row (untargeted mode).
    pub base_class: Option<usize>,
    pub rho: f64,
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl PoisonPlan {
    /// A plan covering every row.
    pub fn full(n: usize, seed: u64) -> Self {
        Self {
            base_class: None,
            rho: 1.0,
            indices: (0..n).collect(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Number of poisoned rows for budget `rho` on `n` rows.
pub fn poison_count(n: usize, rho: f64) -> usize {
    (rho * n as f64).round() as usize
}

/// Draw `round(rho·n)` rows uniformly without replacement, from the base
/// class when one is given and from all rows otherwise.
pub fn select_poison_indices(
    ds: &LabeledDataset,
    base_class: Option<usize>,
    rho: f64,
    seed: u64,
) -> Result<PoisonPlan> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("poison fraction {rho} outside (0,1]")));
    }
    let eligible: Vec<usize> = match base_class {
        Some(c) if c >= ds.class_count() => {
            return Err(Error::Config(format!(
                "base class {c} not below class count {}",
                ds.class_count()
            )))
        }
        Some(c) => ds.rows_with_label(c),
        None => (0..ds.len()).collect(),
    };
    let m = poison_count(ds.len(), rho);
    if m > eligible.len() {
        return Err(Error::Budget(format!(
            "{m} poisons requested but only {} eligible rows",
            eligible.len()
        )));
    }
    let mut rng = rng::stream(seed, &[tag::SELECT]);
    let mut indices: Vec<usize> = index::sample(&mut rng, eligible.len(), m)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    indices.sort_unstable();
    Ok(PoisonPlan {
        base_class,
        rho,
        indices,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    TargetedWb,
    TargetedRobust,
    Sticker,
    Rem,
}

impl AttackKind {
    pub fn is_l0(self) -> bool {
        matches!(self, AttackKind::Sticker)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub index: usize,
    pub y_tar: usize,
    pub y_adv: usize,
}

/// How a poison set was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMeta {
    pub attack: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_area: Option<f64>,
    pub epsilon0: Option<f64>,
    pub lambda: Option<f64>,
    pub iters: usize,
    pub target: Option<TargetRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Contents of `poison.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonManifest {
    #[serde(flatten)]
    pub meta: AttackMeta,
    pub rho: f64,
    pub base_class: Option<usize>,
    pub indices: Vec<usize>,
    pub seed: u64,
    pub clean_sha256: String,
}

/// A poisoned copy of a clean dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonSet {
    pub data: LabeledDataset,
    pub plan: PoisonPlan,
    pub meta: AttackMeta,
    /// SHA-256 of the clean source's label bytes.
    pub clean_sha256: String,
}

impl PoisonSet {
    /// Build a poison set, checking every invariant against the clean source.
    pub fn new(clean: &LabeledDataset, data: LabeledDataset, plan: PoisonPlan, meta: AttackMeta) -> Result<Self> {
        let ps = Self {
            data,
            plan,
            meta,
            clean_sha256: clean.labels_sha256(),
        };
        ps.verify_against(clean)?;
        Ok(ps)
    }

    /// Check the clean-label, untouched-row and budget invariants.
    pub fn verify_against(&self, clean: &LabeledDataset) -> Result<()> {
        let data = &self.data;
        if data.len() != clean.len() || data.shape() != clean.shape() {
            return Err(Error::Internal(format!(
                "poison set has {} rows of {}, clean source {} rows of {}",
                data.len(),
                data.shape(),
                clean.len(),
                clean.shape()
            )));
        }
        if data.labels() != clean.labels() {
            return Err(Error::CleanLabelViolation("labels differ from the clean source".into()));
        }
        if self.clean_sha256 != clean.labels_sha256() {
            return Err(Error::CleanLabelViolation(
                "recorded clean hash does not match the clean source".into(),
            ));
        }
        let planned: BTreeSet<usize> = self.plan.indices.iter().copied().collect();
        if planned.len() != self.plan.indices.len() || planned.iter().next_back().is_some_and(|&m| m >= data.len()) {
            return Err(Error::Internal("plan indices not unique or out of range".into()));
        }
        for row in 0..data.len() {
            let (a, b) = (data.image(row), clean.image(row));
            if !planned.contains(&row) {
                if a.iter().zip(b).any(|(p, q)| p.to_bits() != q.to_bits()) {
                    return Err(Error::Internal(format!(
                        "row {row} is outside the plan but was modified"
                    )));
                }
                continue;
            }
            if self.meta.attack.is_l0() {
                let area = self
                    .meta
                    .mask_area
                    .ok_or_else(|| Error::Internal("l0 attack without a recorded mask area".into()))?;
                let frac = changed_pixel_fraction(a, b, data.shape());
                if frac > area + 1e-12 {
                    return Err(Error::Internal(format!(
                        "row {row} changes {frac:.4} of its pixels, budget {area}"
                    )));
                }
            } else if let Some(eps) = self.meta.epsilon {
                let dist = linf_distance(a, b);
                if dist > eps + LINF_SLACK {
                    return Err(Error::Internal(format!(
                        "row {row} moved {dist} in l-inf, budget {eps}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> PoisonManifest {
        PoisonManifest {
            meta: self.meta.clone(),
            rho: self.plan.rho,
            base_class: self.plan.base_class,
            indices: self.plan.indices.clone(),
            seed: self.plan.seed,
            clean_sha256: self.clean_sha256.clone(),
        }
    }
}

pub fn linf_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| (p as f64 - q as f64).abs())
        .fold(0.0, f64::max)
}

/// Fraction of spatial positions where any channel differs.
pub fn changed_pixel_fraction(a: &[f32], b: &[f32], shape: ImageShape) -> f64 {
    let plane = shape.pixels();
    let changed = (0..plane)
        .filter(|&p| (0..shape.channels).any(|c| a[c * plane + p].to_bits() != b[c * plane + p].to_bits()))
        .count();
    changed as f64 / plane as f64
}

/// Write the poisoned data and `poison.json` into `dir`; returns the path
/// of `poison.json`.
pub fn write_poison_set(ps: &PoisonSet, dir: &Path) -> Result<PathBuf> {
    if ps.data.labels_sha256() != ps.clean_sha256 {
        return Err(Error::CleanLabelViolation(
            "labels drifted from the recorded clean hash".into(),
        ));
    }
    save_dataset(&ps.data, dir)?;
    let path = dir.join(POISON_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&ps.manifest())?)?;
    Ok(path)
}

/// Load a poison set directory (or its `poison.json`).
///
/// The label file is checked against the recorded clean hash before
/// anything else, so label tampering surfaces as a clean-label violation.
pub fn load_poison_set(path: &Path) -> Result<PoisonSet> {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let poison_path = dir.join(POISON_FILE);
    let manifest: PoisonManifest = serde_json::from_slice(&fs::read(&poison_path)?)
        .map_err(|e| Error::format(&poison_path, format!("bad poison manifest: {e}")))?;

    let ds_manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::format(dir.join(MANIFEST_FILE), format!("bad manifest: {e}")))?;
    let labels = fs::read(dir.join(&ds_manifest.files.labels))?;
    if sha256_hex(&labels) != manifest.clean_sha256 {
        return Err(Error::CleanLabelViolation(format!(
            "labels in {} differ from the clean source",
            dir.display()
        )));
    }

    let data = load_dataset(&dir.join(MANIFEST_FILE))?;
    let mut seen = BTreeSet::new();
    for &i in &manifest.indices {
        if i >= data.len() || !seen.insert(i) {
            return Err(Error::format(&poison_path, format!("bad poison index {i}")));
        }
    }
    Ok(PoisonSet {
        data,
        plan: PoisonPlan {
            base_class: manifest.base_class,
            rho: manifest.rho,
            indices: manifest.indices,
            seed: manifest.seed,
        },
        meta: manifest.meta,
        clean_sha256: manifest.clean_sha256,
    })
}
