use advpoison_core::adv::{LrSchedule, PgdConfig};
use advpoison_core::data::{
    changed_pixel_fraction, linf_distance, select_poison_indices, synthesize_dataset, ImageShape, LabeledDataset,
    PoisonPlan,
};
use advpoison_core::engine::{Arch, Classifier};
use advpoison_core::untargeted::{
    apply_sticker, finalize_sticker_poison, load_sticker, rem_objective, rem_poison, sticker_objective,
    train_rem_generator, train_sticker_generator, upper_left_mask, write_sticker, RemConfig, StickerSpec,
    StickerTrainConfig,
};
use advpoison_core::Error;
use proptest::prelude::*;

fn data() -> LabeledDataset {
    synthesize_dataset(60, ImageShape::new(1, 8, 8), 2, 3.0, 2).unwrap()
}

fn sticker_cfg(epochs: usize, batch: usize) -> StickerTrainConfig {
    StickerTrainConfig {
        epochs,
        batch_size: batch,
        patch_step: 35.0 / 255.0,
        patch_iters: 10,
        lr: LrSchedule::Constant { lr: 0.05 },
        momentum: 0.9,
        weight_decay: 5e-4,
        refine_iters: 10,
    }
}

fn rem_cfg(epochs: usize) -> RemConfig {
    RemConfig {
        epochs,
        batch_size: 20,
        lr: LrSchedule::Constant { lr: 0.05 },
        momentum: 0.9,
        weight_decay: 5e-4,
        inner: PgdConfig::standard(2.0 / 255.0),
        noise_steps: 5,
        noise_step: 2.0 / 255.0,
    }
}

#[test]
fn sticker_application_edge_cases() {
    let shape = ImageShape::new(3, 10, 10);
    let x: Vec<f64> = (0..300).map(|i| (i % 17) as f64 / 17.0).collect();
    let patch: Vec<f64> = (0..300).map(|i| (i % 5) as f64 / 5.0).collect();

    let mut s = StickerSpec::new(shape, 0.03, patch.clone()).unwrap();
    let out = apply_sticker(&x, &s).unwrap();
    let differing = (0..100)
        .filter(|&p| (0..3).any(|c| out[c * 100 + p] != x[c * 100 + p]))
        .count();
    assert!(differing <= (0.03f64 * 100.0).ceil() as usize);

    s.mask = vec![0; 100];
    assert_eq!(apply_sticker(&x, &s).unwrap(), x);
    s.mask = vec![1; 100];
    assert_eq!(apply_sticker(&x, &s).unwrap(), patch);
    assert!(matches!(apply_sticker(&x[..10], &s), Err(Error::Usage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sticker_only_touches_the_mask(
        h in 4usize..16,
        w in 4usize..16,
        area in 0.05f64..0.6,
        seed in 0u64..100,
    ) {
        let shape = ImageShape::new(2, h, w);
        let k = (area * (h * w) as f64).floor() as usize;
        prop_assume!(k >= 1);
        let s = StickerSpec::random(shape, area, seed).unwrap();
        prop_assert_eq!(s.masked_pixels(), k);
        prop_assert!((s.masked_pixels() as f64 - area * (h * w) as f64).abs() < 1.0);
        let x: Vec<f64> = (0..shape.len()).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        let out = apply_sticker(&x, &s).unwrap();
        for (j, (&a, &b)) in x.iter().zip(&out).enumerate() {
            if s.mask[j % (h * w)] == 0 {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            } else {
                prop_assert!((0.0..=1.0).contains(&b));
            }
        }
    }
}

#[test]
fn no_training_leaves_the_random_patch() {
    let ds = data();
    let arch = Arch::linear(ds.shape(), 2);
    let out = train_sticker_generator(&ds, 0.05, &arch, &sticker_cfg(0, 10), 4).unwrap();
    assert_eq!(out.sticker, StickerSpec::random(ds.shape(), 0.05, 4).unwrap());
    assert_eq!(out.generator, Classifier::init(&arch, 4).unwrap());
    assert_eq!(out.grad_evals, 0);
}

#[test]
fn sticker_training_lowers_the_sticker_objective() {
    let ds = data();
    let arch = Arch::tiny_cnn(ds.shape(), 3, 3, 2);
    let out = train_sticker_generator(&ds, 0.05, &arch, &sticker_cfg(6, 10), 1).unwrap();
    let g0 = Classifier::init(&arch, 1).unwrap();
    let trained = sticker_objective(&out.generator, &ds, &out.sticker).unwrap();
    let with_initial_patch = sticker_objective(&out.generator, &ds, &out.initial_sticker).unwrap();
    let at_start = sticker_objective(&g0, &ds, &out.initial_sticker).unwrap();
    assert!(
        trained <= with_initial_patch + 1e-12,
        "{trained} vs {with_initial_patch}"
    );
    assert!(trained < at_start);
    assert_eq!(out.loss_curve.len(), 6);
    assert_eq!(out.grad_evals, 6 * 6 * 11);

    let again = train_sticker_generator(&ds, 0.05, &arch, &sticker_cfg(6, 10), 1).unwrap();
    assert_eq!(again.sticker, out.sticker);
    assert_eq!(again.generator, out.generator);
}

#[test]
fn full_batch_alternation_does_not_increase_the_loss() {
    let ds = data();
    let arch = Arch::linear(ds.shape(), 2);
    let cfg = StickerTrainConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        lr: LrSchedule::Constant { lr: 0.01 },
        ..sticker_cfg(8, ds.len())
    };
    let out = train_sticker_generator(&ds, 0.05, &arch, &cfg, 3).unwrap();
    for w in out.loss_curve.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{:?}", out.loss_curve);
    }
}

#[test]
fn refined_stickers_respect_the_budget_and_improve_per_image() {
    let ds = data();
    let arch = Arch::tiny_cnn(ds.shape(), 3, 3, 2);
    let cfg = sticker_cfg(2, 10);
    let trained = train_sticker_generator(&ds, 0.05, &arch, &cfg, 2).unwrap();
    let plan = select_poison_indices(&ds, None, 0.5, 1).unwrap();
    let out = finalize_sticker_poison(&trained.generator, &ds, &plan, &trained.sticker, &cfg).unwrap();
    for (r, s) in out.refined_loss.iter().zip(&out.shared_loss) {
        assert!(r <= s);
    }
    let poisoned = &out.poison.data;
    assert_eq!(poisoned.labels(), ds.labels());
    let mask = upper_left_mask(ds.shape(), 0.05).unwrap();
    for row in 0..ds.len() {
        let (a, b) = (poisoned.image(row), ds.image(row));
        if plan.indices.contains(&row) {
            assert!(changed_pixel_fraction(a, b, ds.shape()) <= 0.05);
            for p in 0..64 {
                if mask[p] == 0 {
                    assert_eq!(a[p].to_bits(), b[p].to_bits());
                }
            }
            // The stored image reproduces the reported refined loss.
            let y = ds.label(row);
            let k = plan.indices.iter().position(|&i| i == row).unwrap();
            let img: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let loss = trained.generator.forward_loss(&img, &[y]).unwrap().1;
            assert!((loss - out.refined_loss[k]).abs() < 1e-12);
        } else {
            assert_eq!(a, b);
        }
    }

    let empty = PoisonPlan {
        indices: Vec::new(),
        ..plan
    };
    let none = finalize_sticker_poison(&trained.generator, &ds, &empty, &trained.sticker, &cfg).unwrap();
    assert_eq!(none.poison.data, ds);
}

#[test]
fn sticker_files_round_trip() {
    let ds = data();
    let arch = Arch::linear(ds.shape(), 2);
    let out = train_sticker_generator(&ds, 0.05, &arch, &sticker_cfg(1, 20), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_sticker(dir.path(), &out.sticker, &out.generator, 8).unwrap();
    let (s, g, seed) = load_sticker(&path).unwrap();
    assert_eq!(s, out.sticker);
    assert_eq!(g, out.generator);
    assert_eq!(seed, 8);
}

#[test]
fn rem_with_zero_inner_radius_is_plain_error_minimization() {
    let ds = data();
    let arch = Arch::linear(ds.shape(), 2);
    let g = Classifier::init(&arch, 5).unwrap();
    let cfg = RemConfig {
        inner: PgdConfig::standard(0.0),
        ..rem_cfg(1)
    };
    // With no inner ball, the objective equals the loss after plain signed
    // descent on the batch loss.
    let eps = 8.0 / 255.0;
    let obj = rem_objective(&g, &ds, eps, 0.0, &cfg, 0).unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in rows.chunks(cfg.batch_size) {
        let (x, y) = ds.gather(chunk);
        let mut cur = x.clone();
        for _ in 0..cfg.noise_steps {
            let gx = g.grad_input(&cur, &y).unwrap();
            for j in 0..cur.len() {
                let s = if gx[j] > 0.0 {
                    1.0
                } else if gx[j] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                cur[j] = (cur[j] - cfg.noise_step * s).clamp((x[j] - eps).max(0.0), (x[j] + eps).min(1.0));
            }
        }
        total += g.forward_loss(&cur, &y).unwrap().1 * chunk.len() as f64;
    }
    assert!((obj - total / ds.len() as f64).abs() < 1e-12);
}

#[test]
fn rem_training_lowers_its_objective_and_warns_on_small_radius() {
    let ds = data();
    let arch = Arch::linear(ds.shape(), 2);
    let (eps, eps0) = (8.0 / 255.0, 2.0 / 255.0);
    let cfg = rem_cfg(5);
    let out = train_rem_generator(&ds, eps, eps0, &arch, &cfg, 6).unwrap();
    assert!(out.warnings.is_empty());
    let before = rem_objective(&Classifier::init(&arch, 6).unwrap(), &ds, eps, eps0, &cfg, 1).unwrap();
    let after = rem_objective(&out.generator, &ds, eps, eps0, &cfg, 1).unwrap();
    assert!(after < before, "{after} vs {before}");

    let flagged = train_rem_generator(&ds, eps0, eps0, &arch, &rem_cfg(0), 6).unwrap();
    assert_eq!(flagged.warnings.len(), 1);
}

#[test]
fn rem_poison_respects_budget_and_descends() {
    let ds = data();
    let arch = Arch::linear(ds.shape(), 2);
    let (eps, eps0) = (8.0 / 255.0, 2.0 / 255.0);
    let g = train_rem_generator(&ds, eps, eps0, &arch, &rem_cfg(2), 1)
        .unwrap()
        .generator;
    let plan = PoisonPlan::full(ds.len(), 0);
    let pgd = PgdConfig {
        steps: 10,
        step_size: eps / 4.0,
        random_init: false,
    };
    let out = rem_poison(&g, &ds, &plan, eps, eps0, &pgd).unwrap();
    for (f, i) in out.final_loss.iter().zip(&out.initial_loss) {
        assert!(f <= i);
    }
    for row in 0..ds.len() {
        assert!(linf_distance(out.poison.data.image(row), ds.image(row)) <= eps + 1e-6);
    }
    assert_eq!(out.poison.data.labels(), ds.labels());

    let zero = rem_poison(&g, &ds, &plan, 0.0, eps0, &pgd).unwrap();
    assert_eq!(zero.poison.data, ds);
}

#[test]
fn sticker_trainer_is_cheaper_than_rem_trainer() {
    let ds = data();
    let arch = Arch::linear(ds.shape(), 2);
    let sticker = train_sticker_generator(&ds, 0.05, &arch, &sticker_cfg(2, 20), 0).unwrap();
    let rem_cfg = RemConfig {
        inner: PgdConfig::standard(4.0 / 255.0),
        noise_steps: 10,
        ..rem_cfg(2)
    };
    let rem = train_rem_generator(&ds, 8.0 / 255.0, 4.0 / 255.0, &arch, &rem_cfg, 0).unwrap();
    assert!(sticker.grad_evals < rem.grad_evals);
}
