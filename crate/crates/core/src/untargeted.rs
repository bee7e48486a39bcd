//! Clean-label untargeted attacks: l0 stickers and robust error-minimizing
//! noise.
//!
//! The sticker attack trains a generator jointly with one shared patch
//! pasted into a fixed upper-left mask, then refines the patch per image.
//! The noise baseline trains a generator on the min-min-max problem
//! `min_g min_{x'∈B_ε[x]} max_{x̃∈B_ε0[x']} ℓ(g(x̃), y)` and writes
//! error-minimizing noise with it. Both only touch pixels, never labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adv::{check_projection, pgd_attack, sign, LrSchedule, PerturbationBall, PgdConfig, Sgd, DIVERGENCE_LOSS};
use crate::data::{sha256_hex, AttackKind, AttackMeta, ImageShape, LabeledDataset, PoisonPlan, PoisonSet};
use crate::engine::{checkpoint, Arch, Classifier, Want};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const STICKER_FILE: &str = "sticker.json";
pub const PATCH_FILE: &str = "patch.bin";
pub const GENERATOR_FILE: &str = "generator.ckpt";

fn to_f32_grid(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

/// A sticker: a binary mask over the spatial grid, shared by all channels,
/// and the patch values pasted where the mask is set.
#[derive(Debug, Clone, PartialEq)]
pub struct StickerSpec {
    pub shape: ImageShape,
    /// `h·w` entries in `{0, 1}`.
    pub mask: Vec<u8>,
    /// `c·h·w` values in `[0,1]`; only masked positions matter.
    pub patch: Vec<f64>,
    /// Top-left corner `(row, col)` of the masked block.
    pub placement: (usize, usize),
    pub mask_area: f64,
}

/// Number of masked pixels for a mask covering `area` of an `h×w` grid.
pub fn sticker_pixel_count(shape: ImageShape, area: f64) -> Result<usize> {
    if !(area > 0.0 && area < 1.0) {
        return Err(Error::Config(format!("mask area {area} outside (0,1)")));
    }
    let k = (area * shape.pixels() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "mask area {area} covers no pixel of a {}x{} image",
            shape.height, shape.width
        )));
    }
    Ok(k)
}

/// An upper-left mask of `floor(area·h·w)` pixels, filled row by row inside
/// a square of side `ceil(sqrt(k))` (wider when the image is too short).
pub fn upper_left_mask(shape: ImageShape, area: f64) -> Result<Vec<u8>> {
    let k = sticker_pixel_count(shape, area)?;
    let side = (k as f64).sqrt().ceil() as usize;
    let (h, w) = (shape.height, shape.width);
    let cols = side.min(w).max(k.div_ceil(h));
    if k.div_ceil(cols) > h {
        return Err(Error::Config(format!("mask of {k} pixels does not fit {h}x{w}")));
    }
    let mut mask = vec![0u8; h * w];
    for p in 0..k {
        mask[(p / cols) * w + p % cols] = 1;
    }
    Ok(mask)
}

impl StickerSpec {
    pub fn new(shape: ImageShape, mask_area: f64, patch: Vec<f64>) -> Result<Self> {
        let spec = Self {
            shape,
            mask: upper_left_mask(shape, mask_area)?,
            patch,
            placement: (0, 0),
            mask_area,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A sticker with a uniform random patch drawn from `(seed, PATCH_INIT)`.
    pub fn random(shape: ImageShape, mask_area: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[tag::PATCH_INIT]);
        let patch = (0..shape.len()).map(|_| to_f32_grid(r.random::<f64>())).collect();
        Self::new(shape, mask_area, patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.len() != self.shape.pixels() || self.patch.len() != self.shape.len() {
            return Err(Error::Usage("sticker mask or patch has the wrong size".into()));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::Validation("sticker mask entries must be 0 or 1".into()));
        }
        if self.patch.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("sticker patch outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn masked_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Flat indices (over `c·h·w`) covered by the mask.
    pub fn masked_indices(&self) -> Vec<usize> {
        let plane = self.shape.pixels();
        (0..self.shape.channels)
            .flat_map(|c| {
                self.mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m == 1)
                    .map(move |(p, _)| c * plane + p)
            })
            .collect()
    }
}

/// `x ⊙ (1 - mask) + patch ⊙ mask`.
pub fn apply_sticker(x: &[f64], s: &StickerSpec) -> Result<Vec<f64>> {
    if x.len() != s.shape.len() {
        return Err(Error::Usage(format!(
            "image of {} values does not match sticker shape {}",
            x.len(),
            s.shape
        )));
    }
    let plane = s.shape.pixels();
    Ok(x.iter()
        .enumerate()
        .map(|(j, &v)| if s.mask[j % plane] == 1 { s.patch[j] } else { v })
        .collect())
}

fn apply_batch(x: &[f64], s: &StickerSpec) -> Result<Vec<f64>> {
    let d = s.shape.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        out.extend(apply_sticker(row, s)?);
    }
    Ok(out)
}

fn default_patch_step() -> f64 {
    35.0 / 255.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_patch_step")]
    pub patch_step: f64,
    #[serde(default = "default_patch_iters")]
    pub patch_iters: usize,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Signed steps per image when refining the shared patch.
    #[serde(default = "default_patch_iters")]
    pub refine_iters: usize,
}

fn default_patch_iters() -> usize {
    10
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl StickerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.patch_step > 0.0 && self.patch_step.is_finite()) {
            return Err(Error::Config(format!("patch step {} must be > 0", self.patch_step)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0,1) and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// Result of the generator/patch alternating minimization.
#[derive(Debug, Clone)]
pub struct StickerOutcome {
    pub generator: Classifier,
    pub sticker: StickerSpec,
    /// The random patch training started from.
    pub initial_sticker: StickerSpec,
    /// Mean training loss per epoch, measured at the generator update.
    pub loss_curve: Vec<f64>,
    /// Forward/backward passes spent, a machine-independent cost measure.
    pub grad_evals: u64,
}

/// Mean `ℓ(g(x'), y)` over `data` with the sticker attached.
pub fn sticker_objective(g: &Classifier, data: &LabeledDataset, s: &StickerSpec) -> Result<f64> {
    let (x, y) = data.to_f64();
    Ok(g.forward_loss(&apply_batch(&x, s)?, &y)?.1)
}

fn diverged(epoch: usize, loss: f64) -> Error {
    Error::TrainingDiverged { epoch, loss }
}

fn numeric_as_divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |err| match err {
        Error::Numeric { .. } => diverged(epoch, f64::NAN),
        other => other,
    }
}

/// Alternating minimization of `ℓ(g(x'), y)` over a shared patch and the
/// generator weights.
///
/// For every batch the patch takes up to `patch_iters` signed steps of size
/// `patch_step` (clipped to `[0,1]`), keeping the lowest-loss iterate; the
/// generator then takes one SGD step at that patch.
pub fn train_sticker_generator(
    data: &LabeledDataset,
    mask_area: f64,
    arch: &Arch,
    cfg: &StickerTrainConfig,
    seed: u64,
) -> Result<StickerOutcome> {
    cfg.validate()?;
    let mut g = Classifier::init(arch, seed)?;
    if g.input_len() != data.dim() || g.class_count() != data.class_count() {
        return Err(Error::Usage("generator does not match the data shape".into()));
    }
    let initial = StickerSpec::random(data.shape(), mask_area, seed)?;
    let mut sticker = initial.clone();
    let masked = sticker.masked_indices();
    let d = data.dim();
    let mut sgd = Sgd::new(g.param_count(), cfg.momentum, cfg.weight_decay);
    let mut grad_evals = 0u64;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for e in 0..cfg.epochs {
        let as_div = numeric_as_divergence(e + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, e as u64]));
        let lr = cfg.lr.rate(e);
        let mut loss_sum = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(rows);
            let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
            for it in 0..=cfg.patch_iters {
                let xs = apply_batch(&x, &sticker)?;
                let gr = g
                    .loss_grads(
                        &xs,
                        &y,
                        Want {
                            params: true,
                            input: it < cfg.patch_iters,
                        },
                    )
                    .map_err(&as_div)?;
                grad_evals += 1;
                if !gr.loss.is_finite() || gr.loss > DIVERGENCE_LOSS {
                    return Err(diverged(e + 1, gr.loss));
                }
                if best.as_ref().is_none_or(|b| gr.loss < b.0) {
                    best = Some((gr.loss, sticker.patch.clone(), gr.params.clone().expect("params")));
                }
                if let Some(gx) = gr.input {
                    for &j in &masked {
                        let total: f64 = (0..rows.len()).map(|k| gx[k * d + j]).sum();
                        sticker.patch[j] = to_f32_grid(sticker.patch[j] - cfg.patch_step * sign(total));
                    }
                }
            }
            let (loss, patch, gp) = best.expect("at least one evaluation");
            sticker.patch = patch;
            loss_sum += loss * rows.len() as f64;
            sgd.step(g.params_mut(), &gp, lr);
        }
        loss_curve.push(loss_sum / data.len() as f64);
    }
    Ok(StickerOutcome {
        generator: g,
        sticker,
        initial_sticker: initial,
        loss_curve,
        grad_evals,
    })
}

#[derive(Debug, Clone)]
pub struct StickerPoisonOutcome {
    pub poison: PoisonSet,
    /// Loss of each planned row with the shared patch.
    pub shared_loss: Vec<f64>,
    /// Loss of each planned row with its refined patch.
    pub refined_loss: Vec<f64>,
}

fn refine_one(
    g: &Classifier,
    x: &[f64],
    y: usize,
    s: &StickerSpec,
    masked: &[usize],
    cfg: &StickerTrainConfig,
) -> Result<(Vec<f64>, f64, f64)> {
    let mut cur = apply_sticker(x, s)?;
    let mut best = cur.clone();
    let mut shared = f64::NAN;
    let mut best_loss = f64::INFINITY;
    for it in 0..=cfg.refine_iters {
        let gr = g.loss_grads(
            &cur,
            &[y],
            Want {
                params: false,
                input: it < cfg.refine_iters,
            },
        )?;
        if it == 0 {
            shared = gr.loss;
        }
        if gr.loss < best_loss {
            best_loss = gr.loss;
            best.copy_from_slice(&cur);
        }
        if let Some(gx) = gr.input {
            for &j in masked {
                cur[j] = to_f32_grid(cur[j] - cfg.patch_step * sign(gx[j]));
            }
        }
    }
    Ok((best, shared, best_loss))
}

/// Attach the sticker to every planned row, refining the patch per image
/// from the shared one (warm start) and keeping the lowest-loss iterate.
pub fn finalize_sticker_poison(
    g: &Classifier,
    data: &LabeledDataset,
    plan: &PoisonPlan,
    s: &StickerSpec,
    cfg: &StickerTrainConfig,
) -> Result<StickerPoisonOutcome> {
    s.validate()?;
    if s.shape != data.shape() {
        return Err(Error::Usage(format!(
            "sticker shape {} does not match data shape {}",
            s.shape,
            data.shape()
        )));
    }
    let masked = s.masked_indices();
    let refined: Vec<(Vec<f64>, f64, f64)> = plan
        .indices
        .par_iter()
        .map(|&row| refine_one(g, &data.image_f64(row), data.label(row), s, &masked, cfg))
        .collect::<Result<_>>()?;
    let pixels: Vec<f64> = refined.iter().flat_map(|r| r.0.iter().copied()).collect();
    let meta = AttackMeta {
        attack: AttackKind::Sticker,
        epsilon: None,
        mask_area: Some(s.mask_area),
        epsilon0: None,
        lambda: None,
        iters: cfg.refine_iters,
        target: None,
        notes: vec!["upper-left mask; per-image refinement warm-started from the shared patch".into()],
    };
    let poisoned = data.with_rows_replaced(&plan.indices, &pixels)?;
    let poison = PoisonSet::new(data, poisoned, plan.clone(), meta)?;
    Ok(StickerPoisonOutcome {
        poison,
        shared_loss: refined.iter().map(|r| r.1).collect(),
        refined_loss: refined.iter().map(|r| r.2).collect(),
    })
}

/// Contents of `sticker.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickerFile {
    pub mask_area: f64,
    pub placement: [usize; 2],
    pub shape: ImageShape,
    /// Patch values, `c·h·w` little-endian f32.
    pub patch: String,
    pub patch_sha256: String,
    pub generator: String,
    pub seed: u64,
}

/// Write `sticker.json`, the patch and the generator checkpoint into `dir`.
pub fn write_sticker(dir: &Path, s: &StickerSpec, g: &Classifier, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = s.patch.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(dir.join(PATCH_FILE), &bytes)?;
    checkpoint::save(g, &dir.join(GENERATOR_FILE))?;
    let file = StickerFile {
        mask_area: s.mask_area,
        placement: [s.placement.0, s.placement.1],
        shape: s.shape,
        patch: PATCH_FILE.into(),
        patch_sha256: sha256_hex(&bytes),
        generator: GENERATOR_FILE.into(),
        seed,
    };
    let path = dir.join(STICKER_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&file)?)?;
    Ok(path)
}

/// Load a sticker directory (or its `sticker.json`): the sticker, the
/// generator and the seed.
pub fn load_sticker(path: &Path) -> Result<(StickerSpec, Classifier, u64)> {
    let json = if path.is_dir() {
        path.join(STICKER_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = json.parent().map(Path::to_path_buf).unwrap_or_default();
    let file: StickerFile = serde_json::from_slice(&fs::read(&json)?)
        .map_err(|e| Error::format(&json, format!("bad sticker file: {e}")))?;
    let patch_path = dir.join(&file.patch);
    let bytes = fs::read(&patch_path)?;
    if bytes.len() != file.shape.len() * 4 {
        return Err(Error::format(&patch_path, "patch size does not match shape"));
    }
    if sha256_hex(&bytes) != file.patch_sha256 {
        return Err(Error::format(&patch_path, "sha256 mismatch"));
    }
    let patch = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if file.placement != [0, 0] {
        return Err(Error::format(&json, "only upper-left placement is supported"));
    }
    let spec = StickerSpec::new(file.shape, file.mask_area, patch)?;
    let g = checkpoint::load(&dir.join(&file.generator))?;
    Ok((spec, g, file.seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Inner maximization over `B_ε0[x']`.
    pub inner: PgdConfig,
    /// Signed descent steps on the noise per batch.
    pub noise_steps: usize,
    pub noise_step: f64,
}

impl RemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.noise_steps > 0 && !(self.noise_step > 0.0 && self.noise_step.is_finite()) {
            return Err(Error::Config(format!("noise step {} must be > 0", self.noise_step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RemOutcome {
    pub generator: Classifier,
    /// Mean inner-max loss per epoch at the generator update.
    pub loss_curve: Vec<f64>,
    pub grad_evals: u64,
    pub warnings: Vec<String>,
}

/// Approximate `min_{x'∈B_ε[x]} max_{x̃∈B_ε0[x']} ℓ(g(x̃), y)` for a batch:
/// the noise takes signed descent steps using the loss gradient at the
/// inner maximizer. Returns the final inner maximizer and its loss.
#[allow(clippy::too_many_arguments)]
fn min_max_batch(
    g: &Classifier,
    x: &[f64],
    y: &[usize],
    eps: f64,
    eps0: f64,
    cfg: &RemConfig,
    key: u64,
    evals: &mut u64,
) -> Result<(Vec<f64>, f64)> {
    let inner_ball = PerturbationBall::linf(eps0)?;
    let lo: Vec<f64> = x.iter().map(|&v| (v - eps).max(0.0)).collect();
    let hi: Vec<f64> = x.iter().map(|&v| (v + eps).min(1.0)).collect();
    let inner_cost = (cfg.inner.steps + 1) as u64;
    let mut noisy = x.to_vec();
    for t in 0..cfg.noise_steps {
        let worst = pgd_attack(g, &noisy, y, &inner_ball, &cfg.inner, rng::derive(key, &[t as u64]))?;
        let gx = g.grad_input(&worst, y)?;
        *evals += inner_cost + 1;
        for j in 0..noisy.len() {
            noisy[j] = (noisy[j] - cfg.noise_step * sign(gx[j])).clamp(lo[j], hi[j]);
        }
    }
    let worst = pgd_attack(
        g,
        &noisy,
        y,
        &inner_ball,
        &cfg.inner,
        rng::derive(key, &[cfg.noise_steps as u64]),
    )?;
    *evals += inner_cost;
    let loss = g.forward_loss(&worst, y)?.1;
    Ok((worst, loss))
}

/// Train a robust error-minimizing generator.
///
/// Per batch: descend the noise inside `B_ε[x]` against the worst case in
/// `B_ε0`, then take one SGD step on the generator at the final worst case.
/// No expectation over transformations and no augmentation. `ε ≤ ε0` is
/// permitted but reported in `warnings`.
pub fn train_rem_generator(
    data: &LabeledDataset,
    eps: f64,
    eps0: f64,
    arch: &Arch,
    cfg: &RemConfig,
    seed: u64,
) -> Result<RemOutcome> {
    cfg.validate()?;
    PerturbationBall::linf(eps)?;
    PerturbationBall::linf(eps0)?;
    let mut warnings = Vec::new();
    if eps <= eps0 {
        let msg = format!("noise radius {eps} is not larger than the learner radius {eps0}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut g = Classifier::init(arch, seed)?;
    if g.input_len() != data.dim() || g.class_count() != data.class_count() {
        return Err(Error::Usage("generator does not match the data shape".into()));
    }
    let mut sgd = Sgd::new(g.param_count(), cfg.momentum, cfg.weight_decay);
    let mut grad_evals = 0u64;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let as_div = numeric_as_divergence(e + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, e as u64]));
        let lr = cfg.lr.rate(e);
        let mut loss_sum = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.gather(rows);
            let key = rng::derive(seed, &[tag::REM_INNER, e as u64, b as u64]);
            let (worst, _) = min_max_batch(&g, &x, &y, eps, eps0, cfg, key, &mut grad_evals).map_err(&as_div)?;
            let gr = g
                .loss_grads(
                    &worst,
                    &y,
                    Want {
                        params: true,
                        input: false,
                    },
                )
                .map_err(&as_div)?;
            grad_evals += 1;
            if !gr.loss.is_finite() || gr.loss > DIVERGENCE_LOSS {
                return Err(diverged(e + 1, gr.loss));
            }
            loss_sum += gr.loss * rows.len() as f64;
            sgd.step(g.params_mut(), gr.params.as_deref().expect("params"), lr);
        }
        loss_curve.push(loss_sum / data.len() as f64);
    }
    Ok(RemOutcome {
        generator: g,
        loss_curve,
        grad_evals,
        warnings,
    })
}

/// Empirical min-min-max objective of a generator over `data`, using the
/// same approximation as training (batches of `cfg.batch_size` in row
/// order).
pub fn rem_objective(
    g: &Classifier,
    data: &LabeledDataset,
    eps: f64,
    eps0: f64,
    cfg: &RemConfig,
    key: u64,
) -> Result<f64> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut evals = 0;
    for (b, chunk) in rows.chunks(cfg.batch_size.max(1)).enumerate() {
        let (x, y) = data.gather(chunk);
        let (_, loss) = min_max_batch(g, &x, &y, eps, eps0, cfg, rng::derive(key, &[b as u64]), &mut evals)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct RemPoisonOutcome {
    pub poison: PoisonSet,
    pub initial_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
}

fn descend_one(g: &Classifier, x: &[f64], y: usize, eps: f64, pgd: &PgdConfig) -> Result<(Vec<f64>, f64, f64)> {
    let lo: Vec<f64> = x.iter().map(|&v| (v - eps).max(0.0)).collect();
    let hi: Vec<f64> = x.iter().map(|&v| (v + eps).min(1.0)).collect();
    let mut cur = x.to_vec();
    let mut best = cur.clone();
    let mut initial = f64::NAN;
    let mut best_loss = f64::INFINITY;
    for it in 0..=pgd.steps {
        let gr = g.loss_grads(
            &cur,
            &[y],
            Want {
                params: false,
                input: it < pgd.steps,
            },
        )?;
        if it == 0 {
            initial = gr.loss;
        }
        if gr.loss < best_loss {
            best_loss = gr.loss;
            best.copy_from_slice(&cur);
        }
        if let Some(gx) = gr.input {
            for j in 0..cur.len() {
                cur[j] = (cur[j] - pgd.step_size * sign(gx[j])).clamp(lo[j], hi[j]);
            }
        }
    }
    check_projection(x, &best, eps)?;
    Ok((best, initial, best_loss))
}

/// Error-minimizing noise: per-image signed descent of `ℓ(g(·), y)` inside
/// `B_ε[x] ∩ [0,1]` from the clean image, keeping the best iterate.
pub fn rem_poison(
    g: &Classifier,
    data: &LabeledDataset,
    plan: &PoisonPlan,
    eps: f64,
    eps0: f64,
    pgd: &PgdConfig,
) -> Result<RemPoisonOutcome> {
    PerturbationBall::linf(eps)?;
    pgd.validate()?;
    let out: Vec<(Vec<f64>, f64, f64)> = plan
        .indices
        .par_iter()
        .map(|&row| descend_one(g, &data.image_f64(row), data.label(row), eps, pgd))
        .collect::<Result<_>>()?;
    let pixels: Vec<f64> = out.iter().flat_map(|r| r.0.iter().copied()).collect();
    let meta = AttackMeta {
        attack: AttackKind::Rem,
        epsilon: Some(eps),
        mask_area: None,
        epsilon0: Some(eps0),
        lambda: None,
        iters: pgd.steps,
        target: None,
        notes: vec!["simplified: no expectation over transformations, no augmentation".into()],
    };
    let poisoned = data.with_rows_replaced(&plan.indices, &pixels)?;
    let poison = PoisonSet::new(data, poisoned, plan.clone(), meta)?;
    Ok(RemPoisonOutcome {
        poison,
        initial_loss: out.iter().map(|r| r.1).collect(),
        final_loss: out.iter().map(|r| r.2).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_size_and_position() {
        let shape = ImageShape::new(3, 10, 10);
        let m = upper_left_mask(shape, 0.03).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), 3);
        assert_eq!(&m[..2], &[1, 1]);
        assert_eq!(m[10], 1);
        let m = upper_left_mask(ImageShape::new(1, 8, 8), 0.25).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m[r * 8 + c] == 1, r < 4 && c < 4);
            }
        }
        assert!(matches!(upper_left_mask(shape, 0.005), Err(Error::Config(_))));
    }

    #[test]
    fn masked_indices_cover_every_channel() {
        let s = StickerSpec::new(ImageShape::new(2, 4, 4), 0.125, vec![0.5; 32]).unwrap();
        assert_eq!(s.masked_indices(), vec![0, 1, 16, 17]);
    }
}
