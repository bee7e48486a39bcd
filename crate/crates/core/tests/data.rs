use std::fs;

use advpoison_core::data::{
    load_dataset, load_poison_set, poison_count, save_dataset, select_poison_indices, synthesize_dataset,
    write_poison_set, AttackKind, AttackMeta, ImageShape, LabeledDataset, PoisonSet, IMAGES_FILE, LABELS_FILE,
    MANIFEST_FILE,
};
use advpoison_core::Error;
use proptest::prelude::*;

/// Plain perceptron with bias; returns the number of training mistakes
/// left after `epochs` passes.
fn perceptron_mistakes(ds: &LabeledDataset, epochs: usize) -> usize {
    let d = ds.dim();
    let mut w = vec![0.0f64; d + 1];
    let mut mistakes = usize::MAX;
    for _ in 0..epochs {
        mistakes = 0;
        for i in 0..ds.len() {
            let x = ds.image(i);
            let t = if ds.label(i) == 1 { 1.0 } else { -1.0 };
            let s: f64 = w[d] + x.iter().zip(&w).map(|(&a, b)| a as f64 * b).sum::<f64>();
            if s * t <= 0.0 {
                mistakes += 1;
                for j in 0..d {
                    w[j] += t * (x[j] as f64 - 0.5);
                }
                w[d] += t;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    mistakes
}

fn meta(attack: AttackKind, eps: f64) -> AttackMeta {
    AttackMeta {
        attack,
        epsilon: Some(eps),
        mask_area: None,
        epsilon0: None,
        lambda: None,
        iters: 0,
        target: None,
        notes: Vec::new(),
    }
}

#[test]
fn synthetic_binary_data_is_linearly_separable() {
    let ds = synthesize_dataset(200, ImageShape::new(1, 8, 8), 2, 4.0, 0).unwrap();
    assert_eq!(ds.len(), 200);
    assert!(ds.labels().iter().all(|&y| y < 2));
    assert!(ds.images().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(perceptron_mistakes(&ds, 500), 0);
}

#[test]
fn synthesis_is_byte_identical_per_seed() {
    let shape = ImageShape::new(3, 4, 4);
    let a = synthesize_dataset(30, shape, 3, 2.0, 17).unwrap();
    let b = synthesize_dataset(30, shape, 3, 2.0, 17).unwrap();
    let c = synthesize_dataset(30, shape, 3, 2.0, 18).unwrap();
    assert_eq!(a.images_bytes(), b.images_bytes());
    assert_eq!(a.labels(), b.labels());
    assert_ne!(a.images_bytes(), c.images_bytes());
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(25, ImageShape::new(2, 3, 3), 5, 1.0, 4).unwrap();
    let manifest = save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), ds);
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn manifest_row_count_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(10, ImageShape::new(1, 2, 2), 2, 1.0, 0).unwrap();
    let manifest = save_dataset(&ds, dir.path()).unwrap();
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("\"n\": 10", "\"n\": 11")).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Format { .. })));
}

#[test]
fn out_of_range_label_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(10, ImageShape::new(1, 2, 2), 2, 1.0, 0).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let mut labels = fs::read(dir.path().join(LABELS_FILE)).unwrap();
    labels[3] = 7;
    fs::write(dir.path().join(LABELS_FILE), &labels).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
}

#[test]
fn truncated_images_are_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(10, ImageShape::new(1, 2, 2), 2, 1.0, 0).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let images = fs::read(dir.path().join(IMAGES_FILE)).unwrap();
    fs::write(dir.path().join(IMAGES_FILE), &images[..images.len() - 4]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    assert!(dir.path().join(MANIFEST_FILE).exists());
}

#[test]
fn poison_budget_counts() {
    let ds = synthesize_dataset(500, ImageShape::new(1, 2, 2), 10, 1.0, 0).unwrap();
    let plan = select_poison_indices(&ds, None, 0.04, 3).unwrap();
    assert_eq!(plan.len(), 20);
    assert_eq!(poison_count(500, 0.04), 20);

    let small = synthesize_dataset(10, ImageShape::new(1, 2, 2), 4, 1.0, 0).unwrap();
    // Class 1 holds rows 1, 5 and 9; a 20% budget on 10 rows needs two.
    let plan = select_poison_indices(&small, Some(1), 0.2, 0).unwrap();
    assert_eq!(plan.len(), 2);
    assert!(plan.indices.iter().all(|&i| small.label(i) == 1));
    assert!(matches!(
        select_poison_indices(&small, Some(1), 0.5, 0),
        Err(Error::Budget(_))
    ));
}

fn eps_poison(clean: &LabeledDataset, eps: f64, seed: u64) -> PoisonSet {
    let plan = select_poison_indices(clean, None, 0.3, seed).unwrap();
    let mut pixels = Vec::new();
    for &row in &plan.indices {
        for (j, &v) in clean.image(row).iter().enumerate() {
            let dir = if j % 2 == 0 { 1.0 } else { -1.0 };
            pixels.push((v as f64 + dir * eps).clamp(0.0, 1.0));
        }
    }
    let data = clean.with_rows_replaced(&plan.indices, &pixels).unwrap();
    PoisonSet::new(clean, data, plan, meta(AttackKind::TargetedRobust, eps)).unwrap()
}

#[test]
fn poison_set_round_trip_keeps_budget_and_labels() {
    let clean = synthesize_dataset(40, ImageShape::new(1, 4, 4), 2, 2.0, 1).unwrap();
    let eps = 16.0 / 255.0;
    let ps = eps_poison(&clean, eps, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = write_poison_set(&ps, dir.path()).unwrap();
    let back = load_poison_set(&path).unwrap();
    assert_eq!(back, ps);
    back.verify_against(&clean).unwrap();
    assert_eq!(back.data.labels(), clean.labels());
}

#[test]
fn tampered_labels_fail_the_clean_label_check() {
    let clean = synthesize_dataset(40, ImageShape::new(1, 4, 4), 2, 2.0, 1).unwrap();
    let ps = eps_poison(&clean, 0.05, 2);
    let dir = tempfile::tempdir().unwrap();
    write_poison_set(&ps, dir.path()).unwrap();
    let mut labels = fs::read(dir.path().join(LABELS_FILE)).unwrap();
    labels[0] ^= 1;
    fs::write(dir.path().join(LABELS_FILE), &labels).unwrap();
    assert!(matches!(
        load_poison_set(dir.path()),
        Err(Error::CleanLabelViolation(_))
    ));
}

#[test]
fn over_budget_poison_is_rejected() {
    let clean = synthesize_dataset(20, ImageShape::new(1, 2, 2), 2, 2.0, 1).unwrap();
    let plan = select_poison_indices(&clean, None, 0.1, 0).unwrap();
    let pixels: Vec<f64> = plan
        .indices
        .iter()
        .flat_map(|&r| clean.image_f64(r))
        .map(|v| if v > 0.5 { v - 0.2 } else { v + 0.2 })
        .collect();
    let data = clean.with_rows_replaced(&plan.indices, &pixels).unwrap();
    let err = PoisonSet::new(&clean, data, plan, meta(AttackKind::TargetedWb, 0.1)).unwrap_err();
    assert!(matches!(err, Error::Internal(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn selection_is_sorted_unique_and_sized(
        n in 10usize..200,
        rho in 0.01f64..1.0,
        seed in 0u64..1000,
    ) {
        let ds = synthesize_dataset(n, ImageShape::new(1, 1, 2), 2, 1.0, 0).unwrap();
        let plan = select_poison_indices(&ds, None, rho, seed).unwrap();
        prop_assert_eq!(plan.len(), (rho * n as f64).round() as usize);
        prop_assert!(plan.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.indices.iter().all(|&i| i < n));
        let again = select_poison_indices(&ds, None, rho, seed).unwrap();
        prop_assert_eq!(again, plan);
    }
}
