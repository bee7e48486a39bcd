//! Experiment reports: JSON, CSV tables and SVG plots.

use std::fs;
use std::path::{Path, PathBuf};

use advpoison_core::adv::{EpochRecord, EvalReport};
use advpoison_core::data::TargetRecord;
use advpoison_core::targeted::CraftMode;
use advpoison_core::Result;
use serde::{Deserialize, Serialize};

use crate::plot::{LinePlot, Series};

pub const REPORT_FILE: &str = "report.json";

/// Robust-accuracy drop (absolute) that counts as catastrophic overfitting.
pub const OVERFIT_DROP: f64 = 0.30;

/// A robust-accuracy collapse within one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitFlag {
    /// Epoch of the best robust accuracy before the collapse.
    pub peak_epoch: usize,
    /// First epoch more than [`OVERFIT_DROP`] below that peak.
    pub collapse_epoch: usize,
    pub drop: f64,
}

/// Flag the first epoch whose robust accuracy sits more than 30 points
/// below the best seen so far.
pub fn catastrophic_overfitting(curves: &[EpochRecord]) -> Option<OverfitFlag> {
    let mut peak: Option<&EpochRecord> = None;
    for r in curves {
        if let Some(p) = peak {
            if p.rob_acc - r.rob_acc > OVERFIT_DROP {
                return Some(OverfitFlag {
                    peak_epoch: p.epoch,
                    collapse_epoch: r.epoch,
                    drop: p.rob_acc - r.rob_acc,
                });
            }
        }
        if peak.is_none_or(|p| r.rob_acc > p.rob_acc) {
            peak = Some(r);
        }
    }
    None
}

/// Summary of one victim training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimRun {
    pub seed: u64,
    pub final_nat_acc: f64,
    pub final_rob_acc: f64,
    pub best_nat_epoch: Option<usize>,
    pub best_nat_acc: Option<f64>,
    pub best_rob_epoch: Option<usize>,
    pub best_rob_acc: Option<f64>,
    pub curves: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overfitting: Option<OverfitFlag>,
}

impl VictimRun {
    pub fn from_eval(seed: u64, r: &EvalReport) -> Self {
        Self {
            seed,
            final_nat_acc: r.nat_acc,
            final_rob_acc: r.rob_acc,
            best_nat_epoch: r.best_nat_epoch,
            best_nat_acc: r.best_nat_acc,
            best_rob_epoch: r.best_rob_epoch,
            best_rob_acc: r.best_rob_acc,
            overfitting: catastrophic_overfitting(&r.curves),
            curves: r.curves.clone(),
        }
    }

    pub fn best_nat(&self) -> f64 {
        self.best_nat_acc.unwrap_or(self.final_nat_acc)
    }

    pub fn best_rob(&self) -> f64 {
        self.best_rob_acc.unwrap_or(self.final_rob_acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdPoint {
    pub epoch: usize,
    pub nat_ld: f64,
    pub adv_ld: f64,
}

/// Behaviour of a victim on the attack's target point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEval {
    pub nat_ld: f64,
    pub adv_ld: f64,
    pub pred_nat: usize,
    pub pred_adv: usize,
    pub nat_success: bool,
    pub adv_success: bool,
    /// Logit differences after every epoch (past the configured epochs when
    /// the overfitting probe extends training).
    pub ld_curve: Vec<LdPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ld_at_best: Option<LdPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ld_at_double_best: Option<LdPoint>,
}

/// A poisoned victim and its clean control with the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub clean: VictimRun,
    pub poisoned: VictimRun,
    /// Poisoned minus clean, best checkpoints (negative = degradation).
    pub delta_best_nat: f64,
    pub delta_best_rob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetEval>,
    /// Target behaviour of the clean control, for reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_target: Option<TargetEval>,
}

impl PairedRun {
    pub fn new(clean: VictimRun, poisoned: VictimRun) -> Self {
        Self {
            seed: poisoned.seed,
            delta_best_nat: poisoned.best_nat() - clean.best_nat(),
            delta_best_rob: poisoned.best_rob() - clean.best_rob(),
            clean,
            poisoned,
            target: None,
            clean_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSummary {
    pub attack: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<CraftMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_area: Option<f64>,
    pub rho: f64,
    pub poisoned_rows: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_objective: Option<f64>,
    /// Generator training loss per epoch (untargeted attacks).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generator_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_evals: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Directory of the persisted poison set, relative to the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetRecord>,
    pub poison: PoisonSummary,
    pub runs: Vec<PairedRun>,
}

/// Aggregates over all trials of one attack variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub attack: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<CraftMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub trials: usize,
    pub runs: usize,
    pub median_delta_best_nat: f64,
    pub median_delta_best_rob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nat_success: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_success: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_nat_ld: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_adv_ld: Option<f64>,
}

/// Wall-clock seconds; excluded from reproducibility comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_s: f64,
    pub surrogate_s: f64,
    pub attack_s: f64,
    pub victims_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub name: String,
    pub config_hash: String,
    pub attack: String,
    pub epsilon0: f64,
    pub precision: String,
    pub clean_controls: Vec<VictimRun>,
    pub trials: Vec<TrialReport>,
    pub summary: Vec<VariantSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timing: Timing,
}

impl AttackReport {
    /// The report as JSON with wall-clock fields removed.
    pub fn reproducible_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        v
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = if dir.is_dir() {
            dir.join(REPORT_FILE)
        } else {
            dir.to_path_buf()
        };
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mode_name(m: Option<CraftMode>) -> &'static str {
    match m {
        Some(CraftMode::Wb) => "wb",
        Some(CraftMode::Robust) => "robust",
        None => "",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn curves_csv(report: &AttackReport) -> String {
    let mut s = String::from("run,seed,epoch,nat_acc,rob_acc,train_loss\n");
    let mut push = |run: &str, v: &VictimRun| {
        for r in &v.curves {
            s.push_str(&format!(
                "{run},{},{},{},{},{}\n",
                v.seed, r.epoch, r.nat_acc, r.rob_acc, r.train_loss
            ));
        }
    };
    for v in &report.clean_controls {
        push("clean", v);
    }
    for t in &report.trials {
        for p in &t.runs {
            push(&t.id, &p.poisoned);
        }
    }
    s
}

/// Best-checkpoint comparison, signed (negative = degradation).
fn deltas_csv(report: &AttackReport) -> String {
    let mut s = String::from(
        "trial,victim_seed,clean_best_nat,poisoned_best_nat,delta_best_nat,clean_best_rob,poisoned_best_rob,delta_best_rob,overfitting_epoch\n",
    );
    for t in &report.trials {
        for p in &t.runs {
            s.push_str(&format!(
                "{},{},{},{},{:+},{},{},{:+},{}\n",
                t.id,
                p.seed,
                p.clean.best_nat(),
                p.poisoned.best_nat(),
                p.delta_best_nat,
                p.clean.best_rob(),
                p.poisoned.best_rob(),
                p.delta_best_rob,
                p.poisoned
                    .overfitting
                    .map(|f| f.collapse_epoch.to_string())
                    .unwrap_or_default()
            ));
        }
    }
    s
}

fn targeted_csv(report: &AttackReport) -> String {
    let mut s = String::from(
        "trial,mode,epsilon,target_index,y_tar,y_adv,victim_seed,nat_LD,adv_LD,pred_nat,pred_adv,nat_success,adv_success,adv_LD_at_best,adv_LD_at_double_best\n",
    );
    for t in &report.trials {
        let Some(tg) = t.target else { continue };
        for p in &t.runs {
            let Some(e) = &p.target else { continue };
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                t.id,
                mode_name(t.poison.mode),
                opt(t.poison.epsilon),
                tg.index,
                tg.y_tar,
                tg.y_adv,
                p.seed,
                e.nat_ld,
                e.adv_ld,
                e.pred_nat,
                e.pred_adv,
                e.nat_success as u8,
                e.adv_success as u8,
                opt(e.ld_at_best.map(|l| l.adv_ld)),
                opt(e.ld_at_double_best.map(|l| l.adv_ld)),
            ));
        }
    }
    s
}

fn summary_csv(report: &AttackReport) -> String {
    let mut s = String::from(
        "attack,mode,epsilon,trials,runs,median_delta_best_nat,median_delta_best_rob,nat_success,adv_success,median_nat_LD,median_adv_LD\n",
    );
    for v in &report.summary {
        s.push_str(&format!(
            "{},{},{},{},{},{:+},{:+},{},{},{},{}\n",
            v.attack,
            mode_name(v.mode),
            opt(v.epsilon),
            v.trials,
            v.runs,
            v.median_delta_best_nat,
            v.median_delta_best_rob,
            opt(v.nat_success),
            opt(v.adv_success),
            opt(v.median_nat_ld),
            opt(v.median_adv_ld),
        ));
    }
    s
}

fn accuracy_plot(report: &AttackReport, robust: bool) -> LinePlot {
    let pick = |r: &EpochRecord| if robust { r.rob_acc } else { r.nat_acc };
    let mut plot = LinePlot::new(
        &format!(
            "{} test accuracy, {}",
            if robust { "robust" } else { "natural" },
            report.name
        ),
        "epoch",
        "accuracy",
    );
    for v in &report.clean_controls {
        plot.push(Series::new(
            format!("clean s{}", v.seed),
            v.curves.iter().map(|r| (r.epoch as f64, pick(r))).collect(),
            true,
        ));
    }
    for t in &report.trials {
        for p in &t.runs {
            plot.push(Series::new(
                format!("{} s{}", t.id, p.seed),
                p.poisoned.curves.iter().map(|r| (r.epoch as f64, pick(r))).collect(),
                false,
            ));
        }
    }
    plot
}

fn ld_plot(report: &AttackReport) -> Option<LinePlot> {
    let mut plot = LinePlot::new(
        &format!("median logit difference vs epsilon, {}", report.name),
        "epsilon",
        "LD",
    );
    for mode in [Some(CraftMode::Wb), Some(CraftMode::Robust)] {
        for (label, adv) in [("nat", false), ("adv", true)] {
            let pts: Vec<(f64, f64)> = report
                .summary
                .iter()
                .filter(|v| v.mode == mode && v.epsilon.is_some())
                .filter_map(|v| {
                    let ld = if adv { v.median_adv_ld } else { v.median_nat_ld };
                    Some((v.epsilon?, ld?))
                })
                .collect();
            if !pts.is_empty() {
                plot.push(Series::new(format!("{} {label}", mode_name(mode)), pts, !adv));
            }
        }
    }
    (!plot.is_empty()).then_some(plot)
}

/// Write `report.json`, the CSV tables and the SVG plots into `dir`.
pub fn emit_report(report: &AttackReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put(REPORT_FILE, serde_json::to_vec_pretty(report)?)?;
    put("curves.csv", curves_csv(report).into_bytes())?;
    put("summary.csv", summary_csv(report).into_bytes())?;
    if !report.trials.is_empty() {
        put("deltas.csv", deltas_csv(report).into_bytes())?;
    }
    if report.trials.iter().any(|t| t.target.is_some()) {
        put("targeted.csv", targeted_csv(report).into_bytes())?;
        if let Some(p) = ld_plot(report) {
            put("ld_vs_epsilon.svg", p.to_svg().into_bytes())?;
        }
    }
    put("nat_acc.svg", accuracy_plot(report, false).to_svg().into_bytes())?;
    put("rob_acc.svg", accuracy_plot(report, true).to_svg().into_bytes())?;
    Ok(written)
}
