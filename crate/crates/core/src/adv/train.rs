use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::Augment;
use super::pgd::{pgd_attack, PerturbationBall, PgdConfig};
use crate::data::LabeledDataset;
use crate::engine::{argmax, Classifier, Want};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Loss above which training counts as diverged.
pub(crate) const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `initial · gamma^k` after the k-th milestone has been reached.
    Step {
        initial: f64,
        gamma: f64,
        milestones: Vec<usize>,
    },
}

impl LrSchedule {
    /// Rate at a zero-based counter (epoch or iteration).
    pub fn rate(&self, at: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::Step {
                initial,
                gamma,
                milestones,
            } => {
                let k = milestones.iter().filter(|&&m| at >= m).count();
                initial * gamma.powi(k as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Constant { lr } => *lr > 0.0,
            LrSchedule::Step { initial, gamma, .. } => *initial > 0.0 && *gamma > 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: Augment,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "momentum {} / weight decay {} out of range",
                self.momentum, self.weight_decay
            )));
        }
        self.lr.validate()
    }
}

/// SGD with momentum and decoupled-from-schedule L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; params],
        }
    }

    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

/// Accuracies after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub nat_acc: f64,
    pub rob_acc: f64,
    pub train_loss: f64,
}

/// Natural and robust accuracy, with per-epoch curves when produced by
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nat_acc: f64,
    pub rob_acc: f64,
    pub curves: Vec<EpochRecord>,
    pub best_nat_epoch: Option<usize>,
    pub best_nat_acc: Option<f64>,
    pub best_rob_epoch: Option<usize>,
    pub best_rob_acc: Option<f64>,
}

impl EvalReport {
    fn snapshot(nat_acc: f64, rob_acc: f64) -> Self {
        Self {
            nat_acc,
            rob_acc,
            curves: Vec::new(),
            best_nat_epoch: None,
            best_nat_acc: None,
            best_rob_epoch: None,
            best_rob_acc: None,
        }
    }

    /// Per-epoch curves as CSV (`epoch,nat_acc,rob_acc,train_loss`).
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,nat_acc,rob_acc,train_loss\n");
        for r in &self.curves {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.nat_acc, r.rob_acc, r.train_loss));
        }
        s
    }
}

/// Natural accuracy and accuracy under PGD at `eps0`.
///
/// Predictions break ties toward the smallest class index. Example `i` of
/// the test set draws its PGD start from the stream `(seed, i)`.
pub fn evaluate(
    model: &Classifier,
    test: &LabeledDataset,
    eps0: f64,
    pgd: &PgdConfig,
    seed: u64,
) -> Result<EvalReport> {
    let (x, y) = test.to_f64();
    let c = model.class_count();
    let logits = model.logits(&x)?;
    let correct = |z: &[f64], label: usize| argmax(z) == label;
    let nat = logits.chunks(c).zip(&y).filter(|(z, &l)| correct(z, l)).count();
    let nat_acc = nat as f64 / y.len() as f64;
    if eps0 == 0.0 {
        return Ok(EvalReport::snapshot(nat_acc, nat_acc));
    }
    let ball = PerturbationBall::linf(eps0)?;
    let adv = pgd_attack(model, &x, &y, &ball, pgd, rng::derive(seed, &[tag::EVAL_PGD]))?;
    let rob = model
        .logits(&adv)?
        .chunks(c)
        .zip(&y)
        .filter(|(z, &l)| correct(z, l))
        .count();
    Ok(EvalReport::snapshot(nat_acc, rob as f64 / y.len() as f64))
}

/// Final model, report and best checkpoints of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Classifier,
    pub report: EvalReport,
    pub best_nat: Classifier,
    pub best_rob: Classifier,
}

/// Epoch-by-epoch adversarial training (`ε0 = 0` is standard training).
///
/// Each mini-batch is replaced by its PGD adversarial variant at `ε0`, then
/// one momentum-SGD step is taken on the adversarial loss. After every epoch
/// the model is evaluated on the evaluation set (the training set when none
/// is given) and the best-natural and best-robust checkpoints are kept.
pub struct AdversarialTrainer<'a> {
    model: Classifier,
    train: &'a LabeledDataset,
    eval: Option<&'a LabeledDataset>,
    eps0: f64,
    cfg: TrainConfig,
    pgd: PgdConfig,
    seed: u64,
    sgd: Sgd,
    epoch: usize,
    curves: Vec<EpochRecord>,
    best_nat: Option<(usize, f64, Classifier)>,
    best_rob: Option<(usize, f64, Classifier)>,
}

impl<'a> AdversarialTrainer<'a> {
    pub fn new(
        model: Classifier,
        train: &'a LabeledDataset,
        eval: Option<&'a LabeledDataset>,
        eps0: f64,
        cfg: &TrainConfig,
        pgd: &PgdConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        PerturbationBall::linf(eps0)?;
        if eps0 > 0.0 {
            pgd.validate()?;
        }
        if train.dim() != model.input_len() || train.class_count() > model.class_count() {
            return Err(Error::Config(format!(
                "dataset of shape {} with {} classes does not fit the model",
                train.shape(),
                train.class_count()
            )));
        }
        let sgd = Sgd::new(model.param_count(), cfg.momentum, cfg.weight_decay);
        Ok(Self {
            model,
            train,
            eval,
            eps0,
            cfg: cfg.clone(),
            pgd: *pgd,
            seed,
            sgd,
            epoch: 0,
            curves: Vec::new(),
            best_nat: None,
            best_rob: None,
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn curves(&self) -> &[EpochRecord] {
        &self.curves
    }

    /// Run one epoch and evaluate.
    pub fn step_epoch(&mut self) -> Result<EpochRecord> {
        let e = self.epoch;
        let diverged = |loss: f64| Error::TrainingDiverged { epoch: e + 1, loss };
        let as_divergence = |err: Error| match err {
            Error::Numeric { .. } => diverged(f64::NAN),
            other => other,
        };

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng::stream(self.seed, &[tag::SHUFFLE, e as u64]));
        let lr = self.cfg.lr.rate(e);
        let ball = PerturbationBall::linf(self.eps0)?;
        let shape = self.train.shape();
        let d = self.train.dim();

        let mut loss_sum = 0.0;
        for (b, rows) in order.chunks(self.cfg.batch_size).enumerate() {
            let (mut x, y) = self.train.gather(rows);
            if !self.cfg.augment.is_identity() {
                for (k, &row) in rows.iter().enumerate() {
                    self.cfg
                        .augment
                        .apply(&mut x[k * d..(k + 1) * d], shape, self.seed, e, row);
                }
            }
            let key = rng::derive(self.seed, &[tag::PGD_INIT, e as u64, b as u64]);
            let adv = pgd_attack(&self.model, &x, &y, &ball, &self.pgd, key).map_err(as_divergence)?;
            let g = self
                .model
                .loss_grads(
                    &adv,
                    &y,
                    Want {
                        params: true,
                        input: false,
                    },
                )
                .map_err(as_divergence)?;
            if !g.loss.is_finite() || g.loss > DIVERGENCE_LOSS {
                return Err(diverged(g.loss));
            }
            loss_sum += g.loss * rows.len() as f64;
            self.sgd
                .step(self.model.params_mut(), g.params.as_deref().expect("params"), lr);
        }

        let eval_set = self.eval.unwrap_or(self.train);
        let snap = evaluate(
            &self.model,
            eval_set,
            self.eps0,
            &self.pgd,
            rng::derive(self.seed, &[tag::EVAL_PGD, e as u64]),
        )
        .map_err(as_divergence)?;
        self.epoch += 1;
        let rec = EpochRecord {
            epoch: self.epoch,
            nat_acc: snap.nat_acc,
            rob_acc: snap.rob_acc,
            train_loss: loss_sum / self.train.len() as f64,
        };
        self.curves.push(rec);
        if self.best_nat.as_ref().is_none_or(|b| rec.nat_acc > b.1) {
            self.best_nat = Some((rec.epoch, rec.nat_acc, self.model.clone()));
        }
        if self.best_rob.as_ref().is_none_or(|b| rec.rob_acc > b.1) {
            self.best_rob = Some((rec.epoch, rec.rob_acc, self.model.clone()));
        }
        Ok(rec)
    }

    /// Run the configured number of epochs.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.step_epoch()?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let (nat_acc, rob_acc) = match self.curves.last() {
            Some(r) => (r.nat_acc, r.rob_acc),
            None => {
                let s = evaluate(
                    &self.model,
                    self.eval.unwrap_or(self.train),
                    self.eps0,
                    &self.pgd,
                    rng::derive(self.seed, &[tag::EVAL_PGD, u64::MAX]),
                )?;
                (s.nat_acc, s.rob_acc)
            }
        };
        let report = EvalReport {
            nat_acc,
            rob_acc,
            curves: self.curves,
            best_nat_epoch: self.best_nat.as_ref().map(|b| b.0),
            best_nat_acc: self.best_nat.as_ref().map(|b| b.1),
            best_rob_epoch: self.best_rob.as_ref().map(|b| b.0),
            best_rob_acc: self.best_rob.as_ref().map(|b| b.1),
        };
        let best_nat = self.best_nat.map_or_else(|| self.model.clone(), |b| b.2);
        let best_rob = self.best_rob.map_or_else(|| self.model.clone(), |b| b.2);
        Ok(TrainOutcome {
            model: self.model,
            report,
            best_nat,
            best_rob,
        })
    }
}

/// Adversarial training at radius `eps0` for `cfg.epochs` epochs.
pub fn adversarial_train(
    model: Classifier,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    eps0: f64,
    cfg: &TrainConfig,
    pgd: &PgdConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut t = AdversarialTrainer::new(model, train, eval, eps0, cfg, pgd, seed)?;
    t.run()?;
    t.finish()
}

/// Standard training: adversarial training with `ε0 = 0` and no PGD.
pub fn standard_train(
    model: Classifier,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    adversarial_train(model, train, eval, 0.0, cfg, &PgdConfig::none(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule_decays_at_milestones() {
        let s = LrSchedule::Step {
            initial: 0.1,
            gamma: 0.1,
            milestones: vec![2, 4],
        };
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(1), 0.1);
        assert!((s.rate(2) - 0.01).abs() < 1e-15);
        assert!((s.rate(5) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut p = vec![1.0, -2.0];
        let mut sgd = Sgd::new(2, 0.9, 0.5);
        sgd.step(&mut p, &[0.2, 0.4], 0.1);
        // v = g + 0.5·θ = [0.7, -0.6]
        assert!((p[0] - 0.93).abs() < 1e-15 && (p[1] + 1.94).abs() < 1e-15);
        sgd.step(&mut p, &[0.0, 0.0], 0.1);
        // v = 0.9·v + 0.5·θ
        assert!((p[0] - (0.93 - 0.1 * (0.63 + 0.465))).abs() < 1e-12);
    }
}
