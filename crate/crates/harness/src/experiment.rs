//! Experiment orchestration: surrogate training, crafting, paired victim
//! training and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use advpoison_core::adv::{
    adversarial_train, evaluate, pgd_attack, standard_train, AdversarialTrainer, EpochRecord, EvalReport,
    PerturbationBall,
};
use advpoison_core::data::{
    load_dataset, load_poison_set, select_poison_indices, synthesize_dataset, write_poison_set, LabeledDataset,
    PoisonPlan, PoisonSet,
};
use advpoison_core::engine::{argmax, checkpoint, Arch, Classifier, Precision};
use advpoison_core::rng::{self, tag};
use advpoison_core::targeted::{
    craft_targeted_poison, logit_difference, poison_success, CraftMode, TargetSpec, TargetedAttackConfig,
    TargetedReport, TrialOutcome,
};
use advpoison_core::untargeted::{
    finalize_sticker_poison, rem_poison, train_rem_generator, train_sticker_generator, write_sticker,
};
use advpoison_core::{Error, Result};
use rayon::prelude::*;

use crate::config::{AttackSpec, DatasetSource, ExperimentConfig, Trial};
use crate::report::{
    emit_report, median, AttackReport, LdPoint, PairedRun, PoisonSummary, TargetEval, Timing, TrialReport,
    VariantSummary, VictimRun,
};
use crate::HarnessError;

/// Loaded data and model settings shared by every stage of an experiment.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub arch: Arch,
}

pub fn load_data(source: &DatasetSource) -> Result<(LabeledDataset, LabeledDataset)> {
    match source {
        DatasetSource::Synthetic {
            n_train,
            n_test,
            shape,
            classes,
            separation,
            seed,
        } => synthesize_dataset(n_train + n_test, *shape, *classes, *separation, *seed)?.split_at(*n_train),
        DatasetSource::Files { train, test } => {
            let (a, b) = (load_dataset(train)?, load_dataset(test)?);
            if a.shape() != b.shape() || a.class_count() != b.class_count() {
                return Err(Error::Config(format!(
                    "train ({}, {} classes) and test ({}, {} classes) disagree",
                    a.shape(),
                    a.class_count(),
                    b.shape(),
                    b.class_count()
                )));
            }
            Ok((a, b))
        }
    }
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_data(&cfg.dataset)?;
        let arch = cfg.arch.build(train.shape(), train.class_count())?;
        for t in &cfg.trials {
            if let Some(b) = t.base_class.filter(|&b| b >= train.class_count()) {
                return Err(Error::Config(format!(
                    "trial {}: base class {b} outside 0..{}",
                    t.seed,
                    train.class_count()
                )));
            }
            if let Some(tg) = t.target {
                tg.validate(train.class_count())?;
                if tg.target_index >= test.len() {
                    return Err(Error::Config(format!(
                        "target index {} beyond {} test rows",
                        tg.target_index,
                        test.len()
                    )));
                }
                if test.label(tg.target_index) != tg.y_tar {
                    return Err(Error::Config(format!(
                        "target {} has label {}, config says {}",
                        tg.target_index,
                        test.label(tg.target_index),
                        tg.y_tar
                    )));
                }
            }
        }
        Ok(Self { cfg, train, test, arch })
    }

    pub fn precision(&self) -> Precision {
        self.cfg.precision
    }

    pub fn model(&self, arch: &Arch, seed: u64) -> Result<Classifier> {
        Ok(Classifier::init(arch, seed)?.with_precision(self.precision()))
    }

    fn eps0(&self) -> f64 {
        self.cfg.learner.epsilon0
    }

    /// Adversarially train a learner on `data` and evaluate it on the test
    /// set every epoch.
    pub fn train_learner(&self, data: &LabeledDataset, seed: u64) -> Result<(Classifier, EvalReport)> {
        let out = adversarial_train(
            self.model(&self.arch, seed)?,
            data,
            Some(&self.test),
            self.eps0(),
            &self.cfg.learner.train,
            &self.cfg.learner.pgd_config(),
            seed,
        )?;
        Ok((out.model, out.report))
    }

    fn target_point(
        &self,
        model: &Classifier,
        tg: &TargetSpec,
        key: u64,
        epoch: usize,
    ) -> Result<(LdPoint, usize, usize)> {
        let x = self.test.image_f64(tg.target_index);
        let x_adv = pgd_attack(
            model,
            &x,
            &[tg.y_tar],
            &PerturbationBall::linf(self.eps0())?,
            &self.cfg.learner.pgd_config(),
            key,
        )?;
        let pt = LdPoint {
            epoch,
            nat_ld: logit_difference(model, &x, tg)?,
            adv_ld: logit_difference(model, &x_adv, tg)?,
        };
        Ok((pt, argmax(&model.logits(&x)?), argmax(&model.logits(&x_adv)?)))
    }

    fn target_eval(&self, model: &Classifier, tg: &TargetSpec, seed: u64, epoch: usize) -> Result<TargetEval> {
        let key = rng::derive(seed, &[tag::TARGET_PGD, epoch as u64]);
        let (pt, pred_nat, pred_adv) = self.target_point(model, tg, key, epoch)?;
        Ok(TargetEval {
            nat_ld: pt.nat_ld,
            adv_ld: pt.adv_ld,
            pred_nat,
            pred_adv,
            nat_success: pred_nat == tg.y_adv,
            adv_success: pred_adv == tg.y_adv,
            ld_curve: Vec::new(),
            ld_at_best: None,
            ld_at_double_best: None,
        })
    }

    /// Train one victim, tracking the target after every epoch. With the
    /// probe, training continues to twice the best-robust epoch.
    fn victim(
        &self,
        data: &LabeledDataset,
        seed: u64,
        target: Option<&TargetSpec>,
        probe: bool,
    ) -> Result<(VictimRun, Option<TargetEval>, Classifier)> {
        let cfg = &self.cfg.learner.train;
        let mut trainer = AdversarialTrainer::new(
            self.model(&self.arch, seed)?,
            data,
            Some(&self.test),
            self.eps0(),
            cfg,
            &self.cfg.learner.pgd_config(),
            seed,
        )?;
        let mut ld_curve = Vec::new();
        let track = |m: &Classifier, e: usize, ld: &mut Vec<LdPoint>| -> Result<()> {
            if let Some(tg) = target {
                let key = rng::derive(seed, &[tag::TARGET_PGD, e as u64]);
                ld.push(self.target_point(m, tg, key, e)?.0);
            }
            Ok(())
        };
        for _ in 0..cfg.epochs {
            let rec = trainer.step_epoch()?;
            track(trainer.model(), rec.epoch, &mut ld_curve)?;
        }
        let run = victim_run(seed, &trainer.curves()[..cfg.epochs]);
        let final_model = trainer.model().clone();
        let mut eval = match target {
            Some(tg) => Some(self.target_eval(&final_model, tg, seed, cfg.epochs)?),
            None => None,
        };
        if let (Some(ev), Some(best)) = (eval.as_mut(), run.best_rob_epoch) {
            if probe {
                while trainer.epochs_done() < 2 * best {
                    let rec = trainer.step_epoch()?;
                    track(trainer.model(), rec.epoch, &mut ld_curve)?;
                }
                ev.ld_at_best = Some(ld_curve[best - 1]);
                ev.ld_at_double_best = Some(ld_curve[2 * best - 1]);
            }
            ev.ld_curve = ld_curve;
        }
        Ok((run, eval, final_model))
    }
}

/// Summary of a run from its curves; best epochs are the first maxima.
pub fn victim_run(seed: u64, curves: &[EpochRecord]) -> VictimRun {
    let best = |f: fn(&EpochRecord) -> f64| {
        curves
            .iter()
            .fold(None::<&EpochRecord>, |b, r| match b {
                Some(b) if f(r) <= f(b) => Some(b),
                _ => Some(r),
            })
            .map(|r| (r.epoch, f(r)))
    };
    let nat = best(|r| r.nat_acc);
    let rob = best(|r| r.rob_acc);
    let last = curves.last();
    VictimRun::from_eval(
        seed,
        &EvalReport {
            nat_acc: last.map_or(f64::NAN, |r| r.nat_acc),
            rob_acc: last.map_or(f64::NAN, |r| r.rob_acc),
            curves: curves.to_vec(),
            best_nat_epoch: nat.map(|b| b.0),
            best_nat_acc: nat.map(|b| b.1),
            best_rob_epoch: rob.map(|b| b.0),
            best_rob_acc: rob.map(|b| b.1),
        },
    )
}

/// A crafted poison set ready for victim training.
pub struct Crafted {
    pub id: String,
    pub trial: Trial,
    pub poison: PoisonSet,
    pub summary: PoisonSummary,
    sticker: Option<(advpoison_core::untargeted::StickerSpec, Classifier)>,
    probe: bool,
}

fn mode_tag(m: CraftMode) -> &'static str {
    match m {
        CraftMode::Wb => "wb",
        CraftMode::Robust => "robust",
    }
}

fn with_context(id: String) -> impl Fn(Error) -> HarnessError {
    move |e| HarnessError::in_trial(&id, e)
}

/// Train the attacker's surrogates (one per craft mode).
pub fn surrogates(lab: &Lab) -> Result<BTreeMap<&'static str, Classifier>> {
    let AttackSpec::Targeted(t) = &lab.cfg.attack else {
        return Ok(BTreeMap::new());
    };
    let mut out = BTreeMap::new();
    for &mode in &t.modes {
        let init = lab.model(&lab.arch, t.surrogate_seed)?;
        let model = match mode {
            CraftMode::Robust => {
                adversarial_train(
                    init,
                    &lab.train,
                    None,
                    lab.eps0(),
                    &t.surrogate,
                    &lab.cfg.learner.pgd_config(),
                    t.surrogate_seed,
                )?
                .model
            }
            CraftMode::Wb => standard_train(init, &lab.train, None, &t.surrogate, t.surrogate_seed)?.model,
        };
        out.insert(mode_tag(mode), model);
    }
    Ok(out)
}

/// Craft every poison set the configuration describes.
pub fn craft_all(
    lab: &Lab,
    surrogates: &BTreeMap<&'static str, Classifier>,
) -> std::result::Result<Vec<Crafted>, HarnessError> {
    let mut out = Vec::new();
    match &lab.cfg.attack {
        AttackSpec::None => {}
        AttackSpec::Targeted(t) => {
            for trial in &lab.cfg.trials {
                let tg = trial.target.expect("validated");
                for (k, &eps) in t.epsilons.iter().enumerate() {
                    for &mode in &t.modes {
                        let id = format!("s{}-{}-e{k}", trial.seed, mode_tag(mode));
                        let ctx = with_context(id.clone());
                        let cfg = TargetedAttackConfig {
                            epsilon: eps,
                            lambda: t.lambda,
                            iters: t.iters,
                            opt_step: t.opt_step,
                            batch: t.batch,
                            mode,
                        };
                        let plan =
                            select_poison_indices(&lab.train, trial.base_class(), t.rho, trial.seed).map_err(&ctx)?;
                        let x_tar = lab.test.image_f64(tg.target_index);
                        let surrogate = &surrogates[mode_tag(mode)];
                        let mut c = craft_targeted_poison(&lab.train, &plan, &x_tar, &tg, &cfg, surrogate, trial.seed)
                            .map_err(&ctx)?;
                        c.poison.meta.epsilon0 = Some(lab.eps0());
                        out.push(Crafted {
                            summary: PoisonSummary {
                                attack: "targeted".into(),
                                mode: Some(mode),
                                epsilon: Some(eps),
                                mask_area: None,
                                rho: t.rho,
                                poisoned_rows: plan.len(),
                                objective_curve: c.objective_curve,
                                final_objective: Some(c.final_objective),
                                generator_loss: Vec::new(),
                                grad_evals: None,
                                warnings: Vec::new(),
                                dir: None,
                            },
                            id,
                            trial: *trial,
                            poison: c.poison,
                            sticker: None,
                            probe: t.overfit_probe,
                        });
                    }
                }
            }
        }
        AttackSpec::Sticker(s) => {
            let gen_arch = match &s.generator {
                Some(a) => a.build(lab.train.shape(), lab.train.class_count())?,
                None => lab.arch.clone(),
            };
            for trial in &lab.cfg.trials {
                let id = format!("s{}-sticker", trial.seed);
                let ctx = with_context(id.clone());
                let plan = plan_for(&lab.train, s.rho, trial.seed).map_err(&ctx)?;
                let mut trained =
                    train_sticker_generator(&lab.train, s.mask_area, &gen_arch, &s.train, trial.seed).map_err(&ctx)?;
                trained.generator = trained.generator.with_precision(lab.precision());
                let fin = finalize_sticker_poison(&trained.generator, &lab.train, &plan, &trained.sticker, &s.train)
                    .map_err(&ctx)?;
                let mut poison = fin.poison;
                poison.meta.epsilon0 = Some(lab.eps0());
                out.push(Crafted {
                    summary: PoisonSummary {
                        attack: "sticker".into(),
                        mode: None,
                        epsilon: None,
                        mask_area: Some(s.mask_area),
                        rho: s.rho,
                        poisoned_rows: plan.len(),
                        objective_curve: Vec::new(),
                        final_objective: Some(median(&fin.refined_loss)),
                        generator_loss: trained.loss_curve,
                        grad_evals: Some(trained.grad_evals),
                        warnings: Vec::new(),
                        dir: None,
                    },
                    id,
                    trial: *trial,
                    poison,
                    sticker: Some((trained.sticker, trained.generator)),
                    probe: false,
                });
            }
        }
        AttackSpec::Rem(r) => {
            let gen_arch = match &r.generator {
                Some(a) => a.build(lab.train.shape(), lab.train.class_count())?,
                None => lab.arch.clone(),
            };
            let eps0 = r.epsilon0.unwrap_or(lab.eps0());
            for trial in &lab.cfg.trials {
                let id = format!("s{}-rem", trial.seed);
                let ctx = with_context(id.clone());
                let plan = plan_for(&lab.train, r.rho, trial.seed).map_err(&ctx)?;
                let trained =
                    train_rem_generator(&lab.train, r.epsilon, eps0, &gen_arch, &r.train, trial.seed).map_err(&ctx)?;
                let g = trained.generator.with_precision(lab.precision());
                let res = rem_poison(&g, &lab.train, &plan, r.epsilon, eps0, &r.poison).map_err(&ctx)?;
                out.push(Crafted {
                    summary: PoisonSummary {
                        attack: "rem".into(),
                        mode: None,
                        epsilon: Some(r.epsilon),
                        mask_area: None,
                        rho: r.rho,
                        poisoned_rows: plan.len(),
                        objective_curve: Vec::new(),
                        final_objective: Some(median(&res.final_loss)),
                        generator_loss: trained.loss_curve,
                        grad_evals: Some(trained.grad_evals),
                        warnings: trained.warnings,
                        dir: None,
                    },
                    id,
                    trial: *trial,
                    poison: res.poison,
                    sticker: None,
                    probe: false,
                });
            }
        }
    }
    Ok(out)
}

fn plan_for(train: &LabeledDataset, rho: f64, seed: u64) -> Result<PoisonPlan> {
    if rho == 1.0 {
        Ok(PoisonPlan::full(train.len(), seed))
    } else {
        select_poison_indices(train, None, rho, seed)
    }
}

/// Persist poison sets (and stickers) under `out/poisons/<id>`.
pub fn write_crafted(crafted: &mut [Crafted], out: &Path) -> Result<()> {
    for c in crafted {
        let dir = out.join("poisons").join(&c.id);
        write_poison_set(&c.poison, &dir)?;
        if let Some((s, g)) = &c.sticker {
            write_sticker(&dir.join("sticker"), s, g, c.trial.seed)?;
        }
        c.summary.dir = Some(format!("poisons/{}", c.id));
    }
    Ok(())
}

struct Control {
    run: VictimRun,
    model: Classifier,
}

fn clean_controls(lab: &Lab) -> Result<BTreeMap<u64, Control>> {
    let runs: Vec<(u64, Control)> = lab
        .cfg
        .victim_seeds
        .par_iter()
        .map(|&seed| {
            let (run, _, model) = lab.victim(&lab.train, seed, None, false)?;
            Ok((seed, Control { run, model }))
        })
        .collect::<Result<_>>()?;
    Ok(runs.into_iter().collect())
}

fn paired_runs(lab: &Lab, c: &Crafted, controls: &BTreeMap<u64, Control>) -> Result<Vec<PairedRun>> {
    let target = c
        .trial
        .target
        .filter(|_| matches!(lab.cfg.attack, AttackSpec::Targeted(_)));
    lab.cfg
        .victim_seeds
        .par_iter()
        .map(|&seed| {
            let (run, eval, _) = lab.victim(&c.poison.data, seed, target.as_ref(), c.probe)?;
            let control = &controls[&seed];
            let mut pair = PairedRun::new(control.run.clone(), run);
            pair.target = eval;
            if let Some(tg) = &target {
                pair.clean_target = Some(lab.target_eval(&control.model, tg, seed, lab.cfg.learner.train.epochs)?);
            }
            Ok(pair)
        })
        .collect()
}

/// Attack name, craft mode and ε bits.
type VariantKey<'a> = (String, Option<&'a str>, Option<u64>);

fn summarize(trials: &[TrialReport]) -> Result<Vec<VariantSummary>> {
    let mut groups: BTreeMap<VariantKey, Vec<&TrialReport>> = BTreeMap::new();
    for t in trials {
        let key = (
            t.poison.attack.clone(),
            t.poison.mode.map(mode_tag),
            t.poison.epsilon.map(f64::to_bits),
        );
        groups.entry(key).or_default().push(t);
    }
    let mut out = Vec::new();
    for ts in groups.values() {
        let runs: Vec<&PairedRun> = ts.iter().flat_map(|t| t.runs.iter()).collect();
        let d_nat: Vec<f64> = runs.iter().map(|r| r.delta_best_nat).collect();
        let d_rob: Vec<f64> = runs.iter().map(|r| r.delta_best_rob).collect();
        let mut v = VariantSummary {
            attack: ts[0].poison.attack.clone(),
            mode: ts[0].poison.mode,
            epsilon: ts[0].poison.epsilon,
            trials: ts.len(),
            runs: runs.len(),
            median_delta_best_nat: median(&d_nat),
            median_delta_best_rob: median(&d_rob),
            nat_success: None,
            adv_success: None,
            median_nat_ld: None,
            median_adv_ld: None,
        };
        let outcomes: Vec<TrialOutcome> = ts
            .iter()
            .flat_map(|t| {
                t.runs.iter().filter_map(move |r| {
                    let e = r.target.as_ref()?;
                    let tg = t.target?;
                    Some(TrialOutcome {
                        pred_nat: e.pred_nat,
                        pred_adv: e.pred_adv,
                        target: TargetSpec {
                            target_index: tg.index,
                            y_tar: tg.y_tar,
                            y_adv: tg.y_adv,
                        },
                    })
                })
            })
            .collect();
        if !outcomes.is_empty() {
            let (nat, adv) = poison_success(&outcomes)?;
            let lds = |f: fn(&TargetEval) -> f64| -> Vec<f64> {
                runs.iter().filter_map(|r| r.target.as_ref().map(f)).collect()
            };
            v.nat_success = Some(nat);
            v.adv_success = Some(adv);
            v.median_nat_ld = Some(median(&lds(|e| e.nat_ld)));
            v.median_adv_ld = Some(median(&lds(|e| e.adv_ld)));
        }
        out.push(v);
    }
    Ok(out)
}

fn targeted_report(t: &TrialReport) -> Option<TargetedReport> {
    let target = t.target?;
    let evals: Vec<&TargetEval> = t.runs.iter().filter_map(|r| r.target.as_ref()).collect();
    if evals.is_empty() {
        return None;
    }
    let n = evals.len() as f64;
    Some(TargetedReport {
        seed: t.seed,
        target,
        epsilon: t.poison.epsilon.unwrap_or(0.0),
        rho: t.poison.rho,
        lambda: 0.0,
        nat_ld: median(&evals.iter().map(|e| e.nat_ld).collect::<Vec<_>>()),
        adv_ld: median(&evals.iter().map(|e| e.adv_ld).collect::<Vec<_>>()),
        nat_success: evals.iter().filter(|e| e.nat_success).count() as f64 / n,
        adv_success: evals.iter().filter(|e| e.adv_success).count() as f64 / n,
        objective_curve: t.poison.objective_curve.clone(),
    })
}

fn empty_report(lab: &Lab) -> AttackReport {
    AttackReport {
        name: lab.cfg.name.clone(),
        config_hash: lab.cfg.hash(),
        attack: lab.cfg.attack.name().into(),
        epsilon0: lab.eps0(),
        precision: lab.precision().to_string(),
        clean_controls: Vec::new(),
        trials: Vec::new(),
        summary: Vec::new(),
        error: None,
        timing: Timing::default(),
    }
}

/// Run a full experiment. When `out` is given, the report, tables, plots
/// and poison sets are written there; on failure the partial report is
/// still written before the error is returned.
pub fn run_experiment(cfg: ExperimentConfig, out: Option<&Path>) -> std::result::Result<AttackReport, HarnessError> {
    if cfg.reference_only {
        return Err(Error::Config(format!(
            "profile {:?} documents reference settings and is not runnable",
            cfg.name
        ))
        .into());
    }
    let start = Instant::now();
    let lab = Lab::new(cfg)?;
    let mut report = empty_report(&lab);
    let result = run_into(&lab, out, &mut report, start);
    report.timing.total_s = start.elapsed().as_secs_f64();
    if let Err(e) = &result {
        report.error = Some(e.to_string());
    }
    if let Some(dir) = out {
        emit_report(&report, dir)?;
    }
    result.map(|_| report)
}

fn run_into(
    lab: &Lab,
    out: Option<&Path>,
    report: &mut AttackReport,
    start: Instant,
) -> std::result::Result<(), HarnessError> {
    let surrogates = surrogates(lab).map_err(|e| HarnessError::in_trial("surrogate", e))?;
    report.timing.surrogate_s = start.elapsed().as_secs_f64();

    let t_attack = Instant::now();
    log::info!("surrogates ready after {:.1}s", report.timing.surrogate_s);
    let mut crafted = craft_all(lab, &surrogates)?;
    log::info!("crafted {} poison sets", crafted.len());
    if let Some(dir) = out {
        write_crafted(&mut crafted, dir)?;
    }
    report.timing.attack_s = t_attack.elapsed().as_secs_f64();

    let t_victims = Instant::now();
    let controls = clean_controls(lab).map_err(|e| HarnessError::in_trial("clean control", e))?;
    report.clean_controls = controls.values().map(|c| c.run.clone()).collect();

    if matches!(lab.cfg.attack, AttackSpec::None) {
        let runs = controls
            .values()
            .map(|c| PairedRun::new(c.run.clone(), c.run.clone()))
            .collect();
        report.trials.push(TrialReport {
            id: "control".into(),
            seed: lab.cfg.trials.first().map_or(0, |t| t.seed),
            target: None,
            poison: PoisonSummary {
                attack: "none".into(),
                mode: None,
                epsilon: None,
                mask_area: None,
                rho: 0.0,
                poisoned_rows: 0,
                objective_curve: Vec::new(),
                final_objective: None,
                generator_loss: Vec::new(),
                grad_evals: None,
                warnings: Vec::new(),
                dir: None,
            },
            runs,
        });
    }
    for c in &crafted {
        log::info!("{}: training {} paired victims", c.id, lab.cfg.victim_seeds.len());
        let runs = paired_runs(lab, c, &controls).map_err(|e| HarnessError::in_trial(&c.id, e))?;
        let trial = TrialReport {
            id: c.id.clone(),
            seed: c.trial.seed,
            target: c.trial.target.map(|t| t.record()),
            poison: c.summary.clone(),
            runs,
        };
        if let (Some(dir), Some(mut tr)) = (out, targeted_report(&trial)) {
            if let AttackSpec::Targeted(t) = &lab.cfg.attack {
                tr.lambda = match c.summary.mode {
                    Some(CraftMode::Robust) => t.lambda,
                    _ => 0.0,
                };
            }
            fs::write(
                dir.join("poisons").join(&c.id).join("targeted_report.json"),
                serde_json::to_vec_pretty(&tr).map_err(Error::from)?,
            )
            .map_err(Error::from)?;
        }
        report.trials.push(trial);
        report.summary = summarize(&report.trials)?;
    }
    report.summary = summarize(&report.trials)?;
    report.timing.victims_s = t_victims.elapsed().as_secs_f64();
    Ok(())
}

/// `train`: adversarially train one learner on the clean set and save it.
pub fn train_command(lab: &Lab, seed: u64, out: &Path) -> Result<VictimRun> {
    let (model, rep) = lab.train_learner(&lab.train, seed)?;
    fs::create_dir_all(out)?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    fs::write(out.join("curves.csv"), rep.curves_csv())?;
    let run = victim_run(seed, &rep.curves);
    fs::write(out.join("train.json"), serde_json::to_vec_pretty(&run)?)?;
    Ok(run)
}

/// `poison-*`: craft and persist the configured poison sets.
pub fn poison_command(lab: &Lab, out: &Path) -> std::result::Result<Vec<PoisonSummary>, HarnessError> {
    let surrogates = surrogates(lab).map_err(|e| HarnessError::in_trial("surrogate", e))?;
    let mut crafted = craft_all(lab, &surrogates)?;
    log::info!("crafted {} poison sets", crafted.len());
    write_crafted(&mut crafted, out)?;
    let summaries: Vec<PoisonSummary> = crafted.into_iter().map(|c| c.summary).collect();
    fs::write(
        out.join("poisons.json"),
        serde_json::to_vec_pretty(&summaries).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    Ok(summaries)
}

/// `eval --model`: natural and robust test accuracy of a checkpoint.
pub fn eval_model(lab: &Lab, model: &Path) -> Result<EvalReport> {
    let m = checkpoint::load(model)?.with_precision(lab.precision());
    evaluate(
        &m,
        &lab.test,
        lab.eps0(),
        &lab.cfg.learner.pgd_config(),
        rng::derive(0, &[tag::EVAL_PGD]),
    )
}

/// `eval --poison`: paired victims on a persisted poison set.
pub fn eval_poison(lab: &Lab, poison_dir: &Path) -> Result<Vec<PairedRun>> {
    let poison = load_poison_set(poison_dir)?;
    poison.verify_against(&lab.train)?;
    let target = poison.meta.target.map(|t| TargetSpec {
        target_index: t.index,
        y_tar: t.y_tar,
        y_adv: t.y_adv,
    });
    let crafted = Crafted {
        id: poison_dir.display().to_string(),
        trial: Trial {
            seed: poison.plan.seed,
            target,
            base_class: poison.plan.base_class,
        },
        summary: PoisonSummary {
            attack: format!("{:?}", poison.meta.attack),
            mode: None,
            epsilon: poison.meta.epsilon,
            mask_area: poison.meta.mask_area,
            rho: poison.plan.rho,
            poisoned_rows: poison.plan.len(),
            objective_curve: Vec::new(),
            final_objective: None,
            generator_loss: Vec::new(),
            grad_evals: None,
            warnings: Vec::new(),
            dir: None,
        },
        poison,
        sticker: None,
        probe: false,
    };
    let controls = clean_controls(lab)?;
    let mut runs = paired_runs(lab, &crafted, &controls)?;
    if let Some(tg) = &target {
        // Targeted poison sets carry their target; evaluate it even when the
        // configuration describes a different attack.
        for (r, &seed) in runs.iter_mut().zip(&lab.cfg.victim_seeds) {
            if r.target.is_none() {
                let (_, ev, _) = lab.victim(&crafted.poison.data, seed, Some(tg), false)?;
                r.target = ev;
            }
        }
    }
    Ok(runs)
}

pub fn default_out(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
}
