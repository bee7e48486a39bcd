//! Differentiation checks against independent oracles: closed forms for
//! linear models and central finite differences for everything else.

use advpoison_core::data::ImageShape;
use advpoison_core::engine::{Arch, Classifier, GradFn, Layer, Precision};
use advpoison_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let dn = f(&p);
            p[i] = orig;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> (Vec<f64>, Vec<usize>) {
    let x = (0..n * d).map(|_| rng.random_range(0.05..0.95)).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

fn small_arches(shape: ImageShape, classes: usize) -> Vec<Arch> {
    vec![
        Arch::mlp(shape, &[6], classes),
        Arch::new(
            shape,
            vec![
                Layer::Dense { out: 5 },
                Layer::Tanh,
                Layer::Dense { out: 4 },
                Layer::Relu,
                Layer::Dense { out: classes },
            ],
        ),
        Arch::tiny_cnn(shape, 2, 3, classes),
    ]
}

#[test]
fn init_is_deterministic_and_seed_dependent() {
    let arch = Arch::mlp(ImageShape::new(1, 3, 3), &[4], 2);
    let a = Classifier::init(&arch, 5).unwrap();
    let b = Classifier::init(&arch, 5).unwrap();
    let c = Classifier::init(&arch, 6).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert_eq!(
        Classifier::init(&Arch::linear(ImageShape::new(1, 4, 4), 3), 0)
            .unwrap()
            .param_count(),
        16 * 3 + 3
    );
}

#[test]
fn zero_readout_gives_log_class_count() {
    let arch = Arch::mlp(ImageShape::new(1, 2, 2), &[3], 5);
    let mut m = Classifier::init(&arch, 2).unwrap();
    let readout = m.plan().slots[2];
    m.params_mut()[readout.offset..readout.offset + readout.param_count()]
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let (_, loss) = m.forward_loss(&[0.1, 0.2, 0.3, 0.4], &[3]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-15);
}

#[test]
fn large_margin_loss_vanishes() {
    let arch = Arch::linear(ImageShape::new(1, 1, 1), 2);
    let m = Classifier::from_params(&arch, vec![100.0, -100.0, 0.0, 0.0]).unwrap();
    let (_, loss) = m.forward_loss(&[1.0], &[0]).unwrap();
    assert!(loss < 1e-80);
}

#[test]
fn loss_matches_independent_logsumexp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = ImageShape::new(1, 2, 3);
    let arch = Arch::linear(shape, 2);
    let m = Classifier::init(&arch, 9).unwrap();
    let (x, y) = random_batch(&mut rng, 7, 6, 2);
    let (logits, loss) = m.forward_loss(&x, &y).unwrap();

    let w = &m.params()[..12];
    let b = &m.params()[12..];
    let mut expect = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let xi = &x[i * 6..(i + 1) * 6];
        let z: Vec<f64> = (0..2)
            .map(|k| b[k] + (0..6).map(|j| w[k * 6 + j] * xi[j]).sum::<f64>())
            .collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        expect += lse - z[label];
        for k in 0..2 {
            assert!((z[k] - logits[i * 2 + k]).abs() < 1e-12);
        }
        let sm: f64 = z.iter().map(|v| (v - lse).exp()).sum();
        assert!((sm - 1.0).abs() < 1e-6);
    }
    expect /= y.len() as f64;
    assert!((loss - expect).abs() < 1e-10);
    assert!(loss >= 0.0);
}

#[test]
fn linear_input_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = ImageShape::new(1, 1, 4);
    let m = Classifier::init(&Arch::linear(shape, 3), 1).unwrap();
    let (x, y) = random_batch(&mut rng, 1, 4, 3);
    let got = m.grad_input(&x, &y).unwrap();

    let w = &m.params()[..12];
    let z = m.logits(&x).unwrap();
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    let r: Vec<f64> = (0..3)
        .map(|k| (z[k] - lse).exp() - if k == y[0] { 1.0 } else { 0.0 })
        .collect();
    let expect: Vec<f64> = (0..4).map(|j| (0..3).map(|k| r[k] * w[k * 4 + j]).sum()).collect();
    assert!(rel_err(&got, &expect) < 1e-12);
}

#[test]
fn first_order_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let shape = ImageShape::new(1, 4, 4);
    for (k, arch) in small_arches(shape, 3).iter().enumerate() {
        let m = Classifier::init(arch, 100 + k as u64).unwrap();
        let (mut x, mut y) = random_batch(&mut rng, 3, 16, 3);
        while m.relu_margin(&x).unwrap() < 1e-3 {
            (x, y) = random_batch(&mut rng, 3, 16, 3);
        }
        let gp = m.grad_params(&x, &y).unwrap();
        let fd = central_diff(
            |p| {
                Classifier::from_params(arch, p.to_vec())
                    .unwrap()
                    .forward_loss(&x, &y)
                    .unwrap()
                    .1
            },
            m.params(),
            1e-4,
        );
        assert!(rel_err(gp.values(), &fd) < 1e-4, "arch {k} params");

        let gx = m.grad_input(&x, &y).unwrap();
        let fd = central_diff(|xx| m.forward_loss(xx, &y).unwrap().1, &x, 1e-4);
        assert!(rel_err(&gx, &fd) < 1e-4, "arch {k} input");
    }
}

#[test]
fn gradient_vanishes_at_a_fitted_minimum() {
    // Overlapping classes keep the minimum finite.
    let shape = ImageShape::new(1, 1, 2);
    let x = [0.2, 0.8, 0.2, 0.8, 0.9, 0.1, 0.5, 0.5];
    let y = [0, 1, 1, 0];
    let mut m = Classifier::init(&Arch::linear(shape, 2), 0).unwrap();
    for _ in 0..20_000 {
        let g = m.grad_params(&x, &y).unwrap();
        for (p, gi) in m.params_mut().iter_mut().zip(g.values()) {
            *p -= 2.0 * gi;
        }
    }
    assert!(m.grad_params(&x, &y).unwrap().max_abs() < 1e-4);
}

#[test]
fn squared_gradient_norm_matches_symbolic_linear_case() {
    // z = Wx + b, r = softmax(z) - e_y, ‖∇θℓ‖² = ‖r‖²(‖x‖² + 1), so
    // ∇x = 2‖r‖² x + 2(‖x‖² + 1) Wᵀ (diag(p) - ppᵀ) r.
    let shape = ImageShape::new(1, 1, 2);
    let m = Classifier::from_params(&Arch::linear(shape, 2), vec![0.7, -0.4, -0.2, 0.9, 0.1, -0.3]).unwrap();
    let x = [0.35, 0.6];
    let y = [1];
    let (value, got) = m.grad_input_of_scalar(&GradFn::SquaredNorm, &x, &y).unwrap();

    let w = [[0.7, -0.4], [-0.2, 0.9]];
    let z: Vec<f64> = (0..2)
        .map(|k| w[k][0] * x[0] + w[k][1] * x[1] + [0.1, -0.3][k])
        .collect();
    let s: f64 = z.iter().map(|v| v.exp()).sum();
    let p: Vec<f64> = z.iter().map(|v| v.exp() / s).collect();
    let r = [p[0], p[1] - 1.0];
    let r2 = r[0] * r[0] + r[1] * r[1];
    let x2 = x[0] * x[0] + x[1] * x[1];
    let jr: Vec<f64> = (0..2)
        .map(|a| {
            (0..2)
                .map(|b| (if a == b { p[a] } else { 0.0 } - p[a] * p[b]) * r[b])
                .sum()
        })
        .collect();
    let expect: Vec<f64> = (0..2)
        .map(|j| 2.0 * r2 * x[j] + 2.0 * (x2 + 1.0) * (0..2).map(|a| w[a][j] * jr[a]).sum::<f64>())
        .collect();
    assert!((value - r2 * (x2 + 1.0)).abs() < 1e-14);
    assert!(rel_err(&got, &expect) < 1e-12, "{got:?} vs {expect:?}");
}

#[test]
fn constant_scalar_has_zero_input_gradient() {
    let shape = ImageShape::new(1, 2, 2);
    let m = Classifier::init(&Arch::mlp(shape, &[3], 2), 1).unwrap();
    let (v, g) = m
        .grad_input_of_scalar(&GradFn::Constant(4.5), &[0.1, 0.2, 0.3, 0.4], &[1])
        .unwrap();
    assert_eq!(v, 4.5);
    assert!(g.iter().all(|&e| e == 0.0));
}

#[test]
fn matching_objective_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shape = ImageShape::new(1, 3, 3);
    for (k, arch) in small_arches(shape, 3).iter().enumerate() {
        let m = Classifier::init(arch, 40 + k as u64).unwrap();
        let (xt, yt) = random_batch(&mut rng, 1, 9, 3);
        let target = m.grad_params(&xt, &yt).unwrap().0;
        let f = GradFn::Matching { target };
        let (mut x, mut y) = random_batch(&mut rng, 1, 9, 3);
        while m.relu_margin(&x).unwrap() < 1e-3 {
            (x, y) = random_batch(&mut rng, 1, 9, 3);
        }
        let (_, got) = m.grad_input_of_scalar(&f, &x, &y).unwrap();
        let fd = central_diff(|xx| f.value(m.grad_params(xx, &y).unwrap().values()).unwrap(), &x, 1e-4);
        assert!(rel_err(&got, &fd) < 1e-3, "arch {k}: {}", rel_err(&got, &fd));
    }
}

#[test]
fn opaque_scalar_is_a_capability_error() {
    let shape = ImageShape::new(1, 1, 2);
    let m = Classifier::init(&Arch::linear(shape, 2), 0).unwrap();
    let f = GradFn::Opaque {
        name: "median".into(),
        f: std::sync::Arc::new(|g: &[f64]| g[0]),
    };
    assert!(matches!(
        m.grad_input_of_scalar(&f, &[0.5, 0.5], &[0]),
        Err(Error::Capability(_))
    ));
}

#[test]
fn non_finite_forward_names_the_layer() {
    let shape = ImageShape::new(1, 1, 2);
    let arch = Arch::mlp(shape, &[2], 2);
    let mut m = Classifier::init(&arch, 0).unwrap();
    let last = m.param_count() - 1;
    m.params_mut()[last] = f64::NAN;
    match m.forward_loss(&[0.5, 0.5], &[0]) {
        Err(Error::Numeric { layer, kind }) => {
            assert_eq!(layer, 2);
            assert_eq!(kind, "dense");
        }
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn forward_is_bit_deterministic_and_f32_mode_is_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = ImageShape::new(1, 4, 4);
    let arch = Arch::tiny_cnn(shape, 3, 3, 2);
    let m = Classifier::init(&arch, 3).unwrap();
    let (x, y) = random_batch(&mut rng, 20, 16, 2);
    let a = m.forward_loss(&x, &y).unwrap();
    let b = m.forward_loss(&x, &y).unwrap();
    assert_eq!(a.1.to_bits(), b.1.to_bits());
    assert_eq!(a.0, b.0);
    let g64 = m.grad_params(&x, &y).unwrap();
    let m32 = m.clone().with_precision(Precision::F32);
    let g32 = m32.grad_params(&x, &y).unwrap();
    assert!(rel_err(g64.values(), g32.values()) < 1e-4);
    assert!((m32.forward_loss(&x, &y).unwrap().1 - a.1).abs() < 1e-5);
}

#[test]
fn batch_shape_errors_are_usage_errors() {
    let m = Classifier::init(&Arch::linear(ImageShape::new(1, 1, 2), 2), 0).unwrap();
    assert!(matches!(m.forward_loss(&[0.1], &[0]), Err(Error::Usage(_))));
    assert!(matches!(m.forward_loss(&[0.1, 0.2], &[2]), Err(Error::Usage(_))));
}
