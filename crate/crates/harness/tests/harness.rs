use std::process::Command;

use advpoison_core::adv::EpochRecord;
use advpoison_core::Error;
use advpoison_harness::config::{profile, ExperimentConfig, PROFILE_NAMES};
use advpoison_harness::experiment::run_experiment;
use advpoison_harness::report::{catastrophic_overfitting, median, AttackReport, REPORT_FILE};
use serde_json::json;

fn small(attack: serde_json::Value, trials: serde_json::Value) -> ExperimentConfig {
    serde_json::from_value(json!({
        "name": "small",
        "precision": "f64",
        "dataset": {"kind": "synthetic", "n_train": 60, "n_test": 20, "shape": [1, 6, 6], "classes": 2, "separation": 3.0, "seed": 3},
        "arch": {"kind": "mlp", "hidden": [6]},
        "learner": {
            "epsilon0": 2.0 / 255.0,
            "pgd": {"steps": 3},
            "train": {"epochs": 3, "batch_size": 20, "lr": {"kind": "constant", "lr": 0.05}}
        },
        "attack": attack,
        "trials": trials,
        "victim_seeds": [1, 2]
    }))
    .unwrap()
}

fn targeted() -> ExperimentConfig {
    small(
        json!({
            "kind": "targeted",
            "epsilons": [16.0 / 255.0],
            "rho": 0.1,
            "iters": 5,
            "modes": ["wb", "robust"],
            "surrogate": {"epochs": 2, "batch_size": 20, "lr": {"kind": "constant", "lr": 0.05}},
            "surrogate_seed": 9,
            "overfit_probe": true
        }),
        json!([{"seed": 4, "target": {"target_index": 3, "y_tar": 1, "y_adv": 0}}]),
    )
}

fn sticker() -> ExperimentConfig {
    small(
        json!({
            "kind": "sticker",
            "mask_area": 0.1,
            "train": {"epochs": 1, "batch_size": 20, "patch_iters": 2, "refine_iters": 2, "lr": {"kind": "constant", "lr": 0.05}}
        }),
        json!([{"seed": 0}]),
    )
}

fn records(rob: &[f64]) -> Vec<EpochRecord> {
    rob.iter()
        .enumerate()
        .map(|(i, &r)| EpochRecord {
            epoch: i + 1,
            nat_acc: 0.9,
            rob_acc: r,
            train_loss: 0.1,
        })
        .collect()
}

#[test]
fn profiles_parse() {
    for name in PROFILE_NAMES {
        let p = profile(name).unwrap();
        assert_eq!(p.name, name);
        assert_eq!(p.reference_only, name == "reference");
        p.validate().unwrap();
    }
    assert!(matches!(profile("nope"), Err(Error::Config(_))));
}

#[test]
fn config_validation() {
    let mut c = targeted();
    c.learner.epsilon0 = 1.5;
    assert!(matches!(c.validate(), Err(Error::Config(_))));

    let mut c = targeted();
    c.trials.push(c.trials[0]);
    assert!(matches!(c.validate(), Err(Error::Config(_))));

    let mut c = targeted();
    c.trials[0].target = None;
    assert!(matches!(c.validate(), Err(Error::Config(_))));

    let mut c = sticker();
    c.victim_seeds.clear();
    assert!(matches!(c.validate(), Err(Error::Config(_))));

    assert!(matches!(
        ExperimentConfig::from_json("{\"name\": 1}"),
        Err(Error::Config(_))
    ));
}

#[test]
fn unresolvable_target_is_config_error() {
    let mut c = targeted();
    c.trials[0].target.as_mut().unwrap().target_index = 500;
    assert!(run_experiment(c, None).unwrap_err().source.is_config());

    // row 3 of the test split has label 1
    let mut c = targeted();
    c.trials[0].target.as_mut().unwrap().y_tar = 0;
    c.trials[0].target.as_mut().unwrap().y_adv = 1;
    let e = run_experiment(c, None).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn hash_ignores_output_dir() {
    let a = targeted();
    let mut b = a.clone();
    b.output = Some("elsewhere".into());
    assert_eq!(a.hash(), b.hash());
    b.learner.train.epochs += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn select_trial_keeps_one() {
    let mut c = targeted();
    c.select_trial(4).unwrap();
    assert_eq!(c.trials.len(), 1);
    assert!(matches!(c.select_trial(5), Err(Error::Config(_))));
}

#[test]
fn monotone_curve_is_not_flagged() {
    assert_eq!(catastrophic_overfitting(&records(&[0.1, 0.2, 0.3, 0.35, 0.4])), None);
    assert_eq!(catastrophic_overfitting(&records(&[0.5, 0.45, 0.4, 0.3])), None);
}

#[test]
fn forty_point_collapse_is_flagged() {
    let f = catastrophic_overfitting(&records(&[0.2, 0.5, 0.6, 0.2, 0.1])).unwrap();
    assert_eq!(f.peak_epoch, 3);
    assert_eq!(f.collapse_epoch, 4);
    assert!((f.drop - 0.4).abs() < 1e-12);
}

#[test]
fn median_of_even_and_odd() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
}

#[test]
fn none_attack_gives_zero_deltas() {
    let c = small(json!({"kind": "none"}), json!([]));
    let r = run_experiment(c, None).unwrap();
    assert_eq!(r.trials.len(), 1);
    assert_eq!(r.trials[0].runs.len(), 2);
    for p in &r.trials[0].runs {
        assert_eq!(p.delta_best_nat, 0.0);
        assert_eq!(p.delta_best_rob, 0.0);
        assert_eq!(p.clean, p.poisoned);
    }
    assert_eq!(r.summary[0].median_delta_best_nat, 0.0);
}

#[test]
fn targeted_run_pairs_victims_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(targeted(), Some(dir.path())).unwrap();
    assert_eq!(r.trials.len(), 2);
    assert!(r.error.is_none());
    let controls: Vec<u64> = r.clean_controls.iter().map(|c| c.seed).collect();
    assert_eq!(controls, vec![1, 2]);
    for t in &r.trials {
        assert_eq!(t.poison.poisoned_rows, 6);
        assert_eq!(t.poison.objective_curve.len(), 6);
        for (p, c) in t.runs.iter().zip(&r.clean_controls) {
            assert_eq!(p.clean, *c);
            assert_eq!(p.poisoned.seed, c.seed);
            assert_eq!(p.delta_best_nat, p.poisoned.best_nat() - p.clean.best_nat());
            let e = p.target.as_ref().unwrap();
            let best = p.poisoned.best_rob_epoch.unwrap();
            assert_eq!(e.ld_at_best.unwrap().epoch, best);
            assert_eq!(e.ld_at_double_best.unwrap().epoch, 2 * best);
            assert!(e.ld_curve.len() >= 3);
        }
        let pdir = dir.path().join(t.poison.dir.as_ref().unwrap());
        assert!(pdir.join("targeted_report.json").exists());
        assert!(pdir.join("poison.json").exists());
    }
    for f in [
        REPORT_FILE,
        "curves.csv",
        "summary.csv",
        "deltas.csv",
        "targeted.csv",
        "ld_vs_epsilon.svg",
        "nat_acc.svg",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = AttackReport::load(dir.path()).unwrap();
    assert_eq!(back.reproducible_json(), r.reproducible_json());
    let svg = std::fs::read_to_string(dir.path().join("ld_vs_epsilon.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn reruns_are_identical() {
    let a = run_experiment(sticker(), None).unwrap();
    let b = run_experiment(sticker(), None).unwrap();
    assert_eq!(a.reproducible_json(), b.reproducible_json());
    assert!(a.reproducible_json().get("timing").is_none());
    assert_eq!(a.config_hash, sticker().hash());
}

#[test]
fn failure_names_trial_and_flushes_partial_report() {
    let mut c = sticker();
    c.trials.push(serde_json::from_value(json!({"seed": 1})).unwrap());
    if let advpoison_harness::config::AttackSpec::Sticker(s) = &mut c.attack {
        s.train.lr = serde_json::from_value(json!({"kind": "constant", "lr": 1e12})).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let e = run_experiment(c, Some(dir.path())).unwrap_err();
    assert_eq!(e.context.as_deref(), Some("s0-sticker"));
    assert_eq!(e.exit_code(), 3);
    let partial = AttackReport::load(dir.path()).unwrap();
    assert!(partial.error.unwrap().contains("s0-sticker"));
}

#[test]
fn deltas_are_signed() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(sticker(), Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("deltas.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let d = line.split(',').nth(4).unwrap();
        assert!(d.starts_with('+') || d.starts_with('-'), "{d}");
    }
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_advpoison");
    let ok = Command::new(bin).arg("profiles").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("targeted-desk"));

    let refused = Command::new(bin)
        .args(["run", "--profile", "reference"])
        .output()
        .unwrap();
    assert_eq!(refused.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let mut c = sticker();
    c.learner.epsilon0 = 2.0;
    std::fs::write(&bad, serde_json::to_string(&c).unwrap()).unwrap();
    let out = Command::new(bin).args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let good = dir.path().join("good.json");
    std::fs::write(&good, serde_json::to_string(&sticker()).unwrap()).unwrap();
    let out = Command::new(bin)
        .args(["run", "--precision", "f32", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = AttackReport::load(&dir.path().join("run")).unwrap();
    assert_eq!(r.precision, "f32");
}
