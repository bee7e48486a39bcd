//! Clean-label targeted poisoning by gradient matching.
//!
//! Each poison `x_poi ∈ B_ε[x] ∩ [0,1]` minimizes
//!
//! ```text
//! J(x_poi) = ML(∇θ ℓ(f(x_tar), y_adv), ∇θ ℓ(f(x_poi), y)) - λ ℓ(f(x_poi), y)
//! ```
//!
//! with `ML = 1 - cos`, against a fixed surrogate `f`. The `wb` mode drops the
//! loss term and is meant for a standard-trained surrogate; the `robust` mode
//! uses an adversarially trained one. The averaged objective over all poisons
//! is what gets reported.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adv::{check_projection, pgd_attack, sign, PerturbationBall, PgdConfig};
use crate::data::{AttackKind, AttackMeta, LabeledDataset, PoisonPlan, PoisonSet, TargetRecord};
use crate::engine::{argmax, matching_loss_grad, Classifier, GradVector, Want};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub use crate::engine::matching_loss;

/// A test point and the label the attacker wants for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub target_index: usize,
    pub y_tar: usize,
    pub y_adv: usize,
}

impl TargetSpec {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.y_tar >= class_count || self.y_adv >= class_count {
            return Err(Error::Config(format!(
                "target labels {}/{} not below class count {class_count}",
                self.y_tar, self.y_adv
            )));
        }
        if self.y_adv == self.y_tar {
            return Err(Error::Config(format!(
                "adversarial label {} equals the true label",
                self.y_adv
            )));
        }
        Ok(())
    }

    pub fn record(&self) -> TargetRecord {
        TargetRecord {
            index: self.target_index,
            y_tar: self.y_tar,
            y_adv: self.y_adv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CraftMode {
    Wb,
    #[default]
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetedAttackConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub iters: usize,
    pub opt_step: f64,
    /// Poisons handled per work unit; has no effect on the result.
    pub batch: usize,
    pub mode: CraftMode,
}

impl Default for TargetedAttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            lambda: 0.01,
            iters: 250,
            opt_step: 0.01,
            batch: 512,
            mode: CraftMode::Robust,
        }
    }
}

impl TargetedAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0,1]", self.epsilon)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.iters == 0 {
            return Err(Error::Config("targeted attack needs iters >= 1".into()));
        }
        if !(self.opt_step > 0.0 && self.opt_step.is_finite()) {
            return Err(Error::Config(format!("opt_step {} must be > 0", self.opt_step)));
        }
        if self.batch == 0 {
            return Err(Error::Config("poison batch must be >= 1".into()));
        }
        Ok(())
    }

    /// The loss weight actually used; `wb` ignores λ.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            CraftMode::Wb => 0.0,
            CraftMode::Robust => self.lambda,
        }
    }

    pub fn attack_kind(&self) -> AttackKind {
        match self.mode {
            CraftMode::Wb => AttackKind::TargetedWb,
            CraftMode::Robust => AttackKind::TargetedRobust,
        }
    }
}

/// `∇θ ℓ(f(x_tar), y_adv)`, the direction the poisons imitate.
pub fn target_gradient(surrogate: &Classifier, x_tar: &[f64], y_adv: usize) -> Result<GradVector> {
    let g = surrogate.grad_params(x_tar, &[y_adv])?;
    if !(g.norm() > 0.0 && g.norm().is_finite()) {
        return Err(Error::DegenerateGradient(format!(
            "target gradient has norm {}",
            g.norm()
        )));
    }
    Ok(g)
}

/// Value and input gradient of `J` for a single poison.
pub fn poison_objective(
    surrogate: &Classifier,
    target: &GradVector,
    x: &[f64],
    y: usize,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let g = surrogate.loss_grads(
        x,
        &[y],
        Want {
            params: true,
            input: lambda != 0.0,
        },
    )?;
    let gp = g.params.expect("parameter gradient");
    let ml = matching_loss(target.values(), &gp)?;
    let outer = matching_loss_grad(target.values(), &gp)?;
    let mut grad = surrogate.input_grad_along_params(x, &[y], &outer)?;
    if lambda != 0.0 {
        let gx = g.input.expect("input gradient");
        for (a, b) in grad.iter_mut().zip(gx) {
            *a -= lambda * b;
        }
    }
    Ok((ml - lambda * g.loss, grad))
}

/// Mean of `J` over the rows of `x`.
pub fn averaged_objective(
    surrogate: &Classifier,
    target: &GradVector,
    x: &[f64],
    y: &[usize],
    lambda: f64,
) -> Result<f64> {
    let d = surrogate.input_len();
    if y.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let row = &x[i * d..(i + 1) * d];
        let gp = surrogate.grad_params(row, &[label])?;
        let ml = matching_loss(target.values(), gp.values())?;
        let loss = if lambda != 0.0 {
            surrogate.forward_loss(row, &[label])?.1
        } else {
            0.0
        };
        total += ml - lambda * loss;
    }
    Ok(total / y.len() as f64)
}

/// Diagnostic form of the unrelaxed objective: the matching loss measured at
/// the worst-case point of `B_ε0[x_poi]` for each poison, averaged. Not used
/// by the optimizer.
pub fn bilevel_reference_objective(
    surrogate: &Classifier,
    target: &GradVector,
    x: &[f64],
    y: &[usize],
    eps0: f64,
    pgd: &PgdConfig,
    key: u64,
) -> Result<f64> {
    let ball = PerturbationBall::linf(eps0)?;
    let worst = pgd_attack(surrogate, x, y, &ball, pgd, key)?;
    averaged_objective(surrogate, target, &worst, y, 0.0)
}

#[derive(Debug, Clone)]
pub struct CraftOutcome {
    pub poison: PoisonSet,
    /// Averaged objective at iterations `0..=iters` (0 is the noisy start).
    pub objective_curve: Vec<f64>,
    /// Averaged objective at the returned poisons.
    pub final_objective: f64,
}

struct Crafted {
    best: Vec<f64>,
    trace: Vec<f64>,
}

fn craft_one(
    surrogate: &Classifier,
    target: &GradVector,
    x: &[f64],
    y: usize,
    cfg: &TargetedAttackConfig,
    mut rng: ChaCha8Rng,
) -> Result<Crafted> {
    let eps = cfg.epsilon;
    let lambda = cfg.effective_lambda();
    let lo: Vec<f64> = x.iter().map(|&v| (v - eps).max(0.0)).collect();
    let hi: Vec<f64> = x.iter().map(|&v| (v + eps).min(1.0)).collect();
    let noise = Normal::new(0.0, eps / 2.0).map_err(|e| Error::Internal(e.to_string()))?;
    let mut cur: Vec<f64> = (0..x.len())
        .map(|j| (x[j] + noise.sample(&mut rng)).clamp(lo[j], hi[j]))
        .collect();

    let mut best = cur.clone();
    let mut best_val = f64::INFINITY;
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let (val, grad) = poison_objective(surrogate, target, &cur, y, lambda)?;
        trace.push(val);
        if val < best_val {
            best_val = val;
            best.copy_from_slice(&cur);
        }
        if it == cfg.iters {
            break;
        }
        for j in 0..cur.len() {
            cur[j] = (cur[j] - cfg.opt_step * sign(grad[j])).clamp(lo[j], hi[j]);
        }
    }
    check_projection(x, &best, eps)?;
    Ok(Crafted { best, trace })
}

/// Craft poisons for the rows of `plan` against `surrogate`.
///
/// Every poison starts from Gaussian noise (`σ = ε/2`, clipped to the
/// ball) drawn from its own stream, takes `iters` signed steps of size
/// `opt_step` and keeps its lowest-objective iterate. Rows outside the plan
/// and all labels are left alone.
pub fn craft_targeted_poison(
    train: &LabeledDataset,
    plan: &PoisonPlan,
    x_tar: &[f64],
    tgt: &TargetSpec,
    cfg: &TargetedAttackConfig,
    surrogate: &Classifier,
    seed: u64,
) -> Result<CraftOutcome> {
    cfg.validate()?;
    tgt.validate(train.class_count())?;
    if surrogate.input_len() != train.dim() || surrogate.class_count() != train.class_count() {
        return Err(Error::Usage("surrogate does not match the training data shape".into()));
    }
    let meta = AttackMeta {
        attack: cfg.attack_kind(),
        epsilon: Some(cfg.epsilon),
        mask_area: None,
        epsilon0: None,
        lambda: Some(cfg.effective_lambda()),
        iters: cfg.iters,
        target: Some(tgt.record()),
        notes: Vec::new(),
    };
    if cfg.epsilon == 0.0 || plan.is_empty() {
        let poison = PoisonSet::new(train, train.clone(), plan.clone(), meta)?;
        return Ok(CraftOutcome {
            poison,
            objective_curve: Vec::new(),
            final_objective: 0.0,
        });
    }
    let target = target_gradient(surrogate, x_tar, tgt.y_adv)?;

    let rows = &plan.indices;
    let crafted: Vec<Crafted> = rows
        .par_chunks(cfg.batch)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|&row| {
                let rng = rng::stream(seed, &[tag::POISON_INIT, row as u64]);
                craft_one(surrogate, &target, &train.image_f64(row), train.label(row), cfg, rng)
            })
        })
        .collect::<Result<_>>()?;

    let m = crafted.len() as f64;
    let objective_curve: Vec<f64> = (0..=cfg.iters)
        .map(|t| crafted.iter().map(|c| c.trace[t]).sum::<f64>() / m)
        .collect();
    let pixels: Vec<f64> = crafted.iter().flat_map(|c| c.best.iter().copied()).collect();
    let data = train.with_rows_replaced(rows, &pixels)?;
    let (px, py) = data.gather(rows);
    let final_objective = averaged_objective(surrogate, &target, &px, &py, cfg.effective_lambda())?;
    let poison = PoisonSet::new(train, data, plan.clone(), meta)?;
    Ok(CraftOutcome {
        poison,
        objective_curve,
        final_objective,
    })
}

/// `log p(y_adv | x) - log p(y_tar | x)` under the model's softmax; positive
/// when the attacker's label outranks the true one.
pub fn logit_difference(model: &Classifier, x: &[f64], tgt: &TargetSpec) -> Result<f64> {
    let z = model.logits(x)?;
    if z.len() != model.class_count() {
        return Err(Error::Usage("logit difference takes a single input".into()));
    }
    // The log-partition cancels in the difference.
    Ok(z[tgt.y_adv] - z[tgt.y_tar])
}

/// The worst-case variant of the target inside `B_ε0[x_tar]`, found by
/// maximizing `ℓ(f(·), y_tar)`.
pub fn adversarial_target(
    model: &Classifier,
    x_tar: &[f64],
    tgt: &TargetSpec,
    eps0: f64,
    pgd: &PgdConfig,
    key: u64,
) -> Result<Vec<f64>> {
    let ball = PerturbationBall::linf(eps0)?;
    pgd_attack(model, x_tar, &[tgt.y_tar], &ball, pgd, key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub pred_nat: usize,
    pub pred_adv: usize,
    pub target: TargetSpec,
}

impl TrialOutcome {
    pub fn measure(model: &Classifier, x_tar: &[f64], x_tar_adv: &[f64], target: TargetSpec) -> Result<Self> {
        Ok(Self {
            pred_nat: argmax(&model.logits(x_tar)?),
            pred_adv: argmax(&model.logits(x_tar_adv)?),
            target,
        })
    }
}

/// Fractions of trials whose prediction equals `y_adv`, on the clean and
/// the adversarial target respectively.
pub fn poison_success(trials: &[TrialOutcome]) -> Result<(f64, f64)> {
    if trials.is_empty() {
        return Err(Error::Usage("poison success needs at least one trial".into()));
    }
    let n = trials.len() as f64;
    let nat = trials.iter().filter(|t| t.pred_nat == t.target.y_adv).count() as f64;
    let adv = trials.iter().filter(|t| t.pred_adv == t.target.y_adv).count() as f64;
    Ok((nat / n, adv / n))
}

/// Contents of `targeted_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetedReport {
    pub seed: u64,
    pub target: TargetRecord,
    pub epsilon: f64,
    pub rho: f64,
    pub lambda: f64,
    #[serde(rename = "nat_LD")]
    pub nat_ld: f64,
    #[serde(rename = "adv_LD")]
    pub adv_ld: f64,
    pub nat_success: f64,
    pub adv_success: f64,
    pub objective_curve: Vec<f64>,
}
