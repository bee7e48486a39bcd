use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Classifier, Want};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Allowed overshoot of the l-inf projection check.
pub const PROJECTION_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallKind {
    Linf,
    L0Mask,
}

/// An l-inf ball of radius `radius`, or an l0 budget of `radius` (fraction
/// of pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBall {
    pub kind: BallKind,
    pub radius: f64,
}

impl PerturbationBall {
    pub fn linf(eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Config(format!("l-inf radius {eps} outside [0,1]")));
        }
        Ok(Self {
            kind: BallKind::Linf,
            radius: eps,
        })
    }

    pub fn l0(mask_area: f64) -> Result<Self> {
        if !(mask_area > 0.0 && mask_area < 1.0) {
            return Err(Error::Config(format!("mask area {mask_area} outside (0,1)")));
        }
        Ok(Self {
            kind: BallKind::L0Mask,
            radius: mask_area,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
    pub random_init: bool,
}

impl PgdConfig {
    /// Ten steps of size `eps/4` from a uniform random start.
    pub fn standard(eps: f64) -> Self {
        Self {
            steps: 10,
            step_size: eps / 4.0,
            random_init: true,
        }
    }

    /// No attack at all.
    pub fn none() -> Self {
        Self {
            steps: 0,
            step_size: 0.0,
            random_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "PGD step size {} must be positive when steps > 0",
                self.step_size
            )));
        }
        Ok(())
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed-gradient ascent on the loss inside `B_ε[x] ∩ [0,1]`.
///
/// Each step moves every pixel by `step_size · sign(∂ℓ/∂x)` (`sign(0) = 0`)
/// and projects back. The iterate with the highest per-example loss is
/// returned, so without random start the loss never falls below the clean
/// loss. Example `i` of the batch draws its random start from the stream
/// `(key, i)`.
pub fn pgd_attack(
    model: &Classifier,
    x: &[f64],
    y: &[usize],
    ball: &PerturbationBall,
    cfg: &PgdConfig,
    key: u64,
) -> Result<Vec<f64>> {
    pgd_attack_traced(model, x, y, ball, cfg, key).map(|(adv, _)| adv)
}

/// [`pgd_attack`] that also returns the mean loss of every iterate
/// (`steps + 1` entries when any work is done).
pub fn pgd_attack_traced(
    model: &Classifier,
    x: &[f64],
    y: &[usize],
    ball: &PerturbationBall,
    cfg: &PgdConfig,
    key: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if ball.kind != BallKind::Linf {
        return Err(Error::Usage("PGD needs an l-inf ball".into()));
    }
    let eps = ball.radius;
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Config(format!("negative radius {eps}")));
    }
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Usage(format!("PGD input pixel {v} outside [0,1]")));
    }
    if eps == 0.0 {
        return Ok((x.to_vec(), Vec::new()));
    }
    cfg.validate()?;
    if cfg.steps == 0 && !cfg.random_init {
        return Ok((x.to_vec(), Vec::new()));
    }
    let d = model.input_len();
    let n = y.len();
    let lo: Vec<f64> = x.iter().map(|&v| (v - eps).max(0.0)).collect();
    let hi: Vec<f64> = x.iter().map(|&v| (v + eps).min(1.0)).collect();

    let mut cur = x.to_vec();
    if cfg.random_init {
        for i in 0..n {
            let mut r = rng::stream(key, &[tag::PGD_INIT, i as u64]);
            for j in i * d..(i + 1) * d {
                cur[j] = (x[j] + r.random_range(-eps..=eps)).clamp(lo[j], hi[j]);
            }
        }
    }

    let mut best = cur.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut keep_best = |cur: &[f64], losses: &[f64], best: &mut Vec<f64>| {
        for i in 0..n {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best[i * d..(i + 1) * d].copy_from_slice(&cur[i * d..(i + 1) * d]);
            }
        }
    };

    for _ in 0..cfg.steps {
        let g = model.loss_grads(
            &cur,
            y,
            Want {
                params: false,
                input: true,
            },
        )?;
        trace.push(g.loss);
        keep_best(&cur, &g.per_example_loss, &mut best);
        let gx = g.input.expect("input gradient");
        for j in 0..cur.len() {
            cur[j] = (cur[j] + cfg.step_size * sign(gx[j])).clamp(lo[j], hi[j]);
        }
    }
    let last = model.loss_grads(&cur, y, Want::default())?;
    trace.push(last.loss);
    keep_best(&cur, &last.per_example_loss, &mut best);

    check_projection(x, &best, eps)?;
    Ok((best, trace))
}

pub(crate) fn check_projection(x: &[f64], adv: &[f64], eps: f64) -> Result<()> {
    for (j, (&a, &b)) in x.iter().zip(adv).enumerate() {
        if (a - b).abs() > eps + PROJECTION_SLACK || !(0.0..=1.0).contains(&b) {
            return Err(Error::Internal(format!(
                "projection violated at pixel {j}: {b} vs clean {a}, radius {eps}"
            )));
        }
    }
    Ok(())
}
