//! Classifiers and the differentiation entry points.

use rand::Rng;
use rayon::prelude::*;

use super::arch::{Arch, Plan};
use super::kernels;
use super::objective::GradFn;
use super::scalar::{Dual, Precision, Scalar};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Gradient of the mean loss w.r.t. the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Which gradients a pass should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct Want {
    pub params: bool,
    pub input: bool,
}

/// Output of [`Classifier::loss_grads`].
#[derive(Debug, Clone)]
pub struct Grads {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub per_example_loss: Vec<f64>,
    pub params: Option<Vec<f64>>,
    /// Gradient of the mean loss w.r.t. every input pixel.
    pub input: Option<Vec<f64>>,
}

/// Examples per work chunk; fixed so results do not depend on thread count.
const CHUNK: usize = 8;

/// A differentiable classifier over a restricted layer set.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: Arch,
    plan: Plan,
    params: Vec<f64>,
    precision: Precision,
}

impl Classifier {
    /// Uniform fan-in initialisation: every weight and bias of a layer is
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        let plan = arch.plan()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let mut params = Vec::with_capacity(plan.param_count);
        for slot in &plan.slots {
            let bound = 1.0 / (slot.fan_in().max(1) as f64).sqrt();
            for _ in 0..slot.param_count() {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            plan,
            params,
            precision: Precision::F64,
        })
    }

    pub fn from_params(arch: &Arch, params: Vec<f64>) -> Result<Self> {
        let plan = arch.plan()?;
        if params.len() != plan.param_count {
            return Err(Error::Config(format!(
                "{} parameters given, architecture needs {}",
                params.len(),
                plan.param_count
            )));
        }
        Ok(Self {
            arch: arch.clone(),
            plan,
            params,
            precision: Precision::F64,
        })
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.plan.param_count
    }

    pub fn input_len(&self) -> usize {
        self.plan.input_len
    }

    pub fn class_count(&self) -> usize {
        self.plan.class_count
    }

    fn check_batch(&self, x: &[f64], y: &[usize]) -> Result<usize> {
        let d = self.input_len();
        if x.len() != y.len() * d {
            return Err(Error::Usage(format!(
                "{} inputs for {} labels of dim {d}",
                x.len(),
                y.len()
            )));
        }
        if y.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= self.class_count()) {
            return Err(Error::Usage(format!(
                "label {bad} not below class count {}",
                self.class_count()
            )));
        }
        Ok(y.len())
    }

    /// Smallest `|pre-activation|` feeding any relu, over the batch; infinite
    /// when the model has no relu. Finite-difference probes need this away
    /// from zero.
    pub fn relu_margin(&self, x: &[f64]) -> Result<f64> {
        let d = self.input_len();
        let mut margin = f64::INFINITY;
        for xi in x.chunks(d) {
            let acts = kernels::forward(&self.plan, &self.params, xi)?;
            for (i, slot) in self.plan.slots.iter().enumerate() {
                if slot.layer == super::Layer::Relu {
                    margin = acts[i].iter().fold(margin, |m, v| m.min(v.abs()));
                }
            }
        }
        Ok(margin)
    }

    /// Logits for every example, row-major `[n, C]`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_len();
        if x.is_empty() || !x.len().is_multiple_of(d) {
            return Err(Error::Usage(format!("{} inputs not a multiple of {d}", x.len())));
        }
        match self.precision {
            Precision::F64 => logits_impl::<f64>(&self.plan, &self.params, x),
            Precision::F32 => {
                let p: Vec<f32> = self.params.iter().map(|&v| v as f32).collect();
                logits_impl::<f32>(&self.plan, &p, x)
            }
        }
    }

    /// Predicted class per example; ties go to the smallest class index.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        let c = self.class_count();
        Ok(self.logits(x)?.chunks(c).map(argmax).collect())
    }

    /// Logits and mean cross-entropy.
    pub fn forward_loss(&self, x: &[f64], y: &[usize]) -> Result<(Vec<f64>, f64)> {
        let n = self.check_batch(x, y)?;
        let logits = self.logits(x)?;
        let c = self.class_count();
        let mut total = 0.0;
        for (z, &label) in logits.chunks(c).zip(y) {
            let (l, _) = kernels::softmax_xent(z, label);
            if !l.is_finite() {
                return Err(Error::Numeric {
                    layer: self.plan.slots.len(),
                    kind: "softmax-cross-entropy".into(),
                });
            }
            total += l;
        }
        Ok((logits, total / n as f64))
    }

    /// Mean loss and the requested gradients in one pass.
    pub fn loss_grads(&self, x: &[f64], y: &[usize], want: Want) -> Result<Grads> {
        self.check_batch(x, y)?;
        match self.precision {
            Precision::F64 => grads_impl::<f64>(&self.plan, &self.params, x, y, want),
            Precision::F32 => {
                let p: Vec<f32> = self.params.iter().map(|&v| v as f32).collect();
                grads_impl::<f32>(&self.plan, &p, x, y, want)
            }
        }
    }

    /// `∇θ` of the mean loss.
    pub fn grad_params(&self, x: &[f64], y: &[usize]) -> Result<GradVector> {
        let g = self.loss_grads(
            x,
            y,
            Want {
                params: true,
                input: false,
            },
        )?;
        Ok(GradVector(g.params.expect("requested")))
    }

    /// `∇x` of the mean loss, shaped like `x`.
    pub fn grad_input(&self, x: &[f64], y: &[usize]) -> Result<Vec<f64>> {
        let g = self.loss_grads(
            x,
            y,
            Want {
                params: false,
                input: true,
            },
        )?;
        Ok(g.input.expect("requested"))
    }

    /// `∇x (v · ∇θ L(θ, x))`: the mixed second derivative of the mean loss
    /// contracted with a parameter-space direction `v`.
    ///
    /// Computed exactly by running the reverse pass w.r.t. `x` on dual
    /// numbers whose tangent is `v` in parameter space.
    pub fn input_grad_along_params(&self, x: &[f64], y: &[usize], v: &[f64]) -> Result<Vec<f64>> {
        self.check_batch(x, y)?;
        if v.len() != self.param_count() {
            return Err(Error::Usage(format!(
                "direction has {} entries, model has {} parameters",
                v.len(),
                self.param_count()
            )));
        }
        match self.precision {
            Precision::F64 => mixed_impl::<f64>(&self.plan, &self.params, v, x, y),
            Precision::F32 => mixed_impl::<f32>(&self.plan, &self.params, v, x, y),
        }
    }

    /// Value of `f(∇θ L)` and its exact gradient w.r.t. `x`.
    ///
    /// `f` must be differentiable in closed form (see [`GradFn`]); opaque
    /// functions are rejected with a capability error.
    pub fn grad_input_of_scalar(&self, f: &GradFn, x: &[f64], y: &[usize]) -> Result<(f64, Vec<f64>)> {
        let g = self.grad_params(x, y)?;
        let value = f.value(g.values())?;
        let outer = f.gradient(g.values())?;
        if outer.iter().all(|&u| u == 0.0) {
            return Ok((value, vec![0.0; x.len()]));
        }
        Ok((value, self.input_grad_along_params(x, y, &outer)?))
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn cast<S: Scalar>(x: &[f64]) -> Vec<S> {
    x.iter().map(|&v| S::from_f64(v)).collect()
}

fn logits_impl<S: Scalar>(plan: &Plan, params: &[S], x: &[f64]) -> Result<Vec<f64>> {
    let d = plan.input_len;
    let rows: Vec<Result<Vec<f64>>> = x
        .par_chunks(d)
        .map(|xi| {
            let acts = kernels::forward(plan, params, &cast::<S>(xi))?;
            Ok(acts.last().expect("output").iter().map(|v| v.primal()).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(x.len() / d * plan.class_count);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

struct ChunkResult<S> {
    losses: Vec<f64>,
    dparams: Option<Vec<S>>,
    dinput: Vec<f64>,
}

fn grads_impl<S: Scalar>(plan: &Plan, params: &[S], x: &[f64], y: &[usize], want: Want) -> Result<Grads> {
    let d = plan.input_len;
    let n = y.len();
    let scale = S::from_f64(1.0 / n as f64);
    let chunks: Vec<Result<ChunkResult<S>>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut dparams = want.params.then(|| vec![S::zero(); plan.param_count]);
            let mut losses = Vec::with_capacity(hi - lo);
            let mut dinput = Vec::new();
            for i in lo..hi {
                let acts = kernels::forward(plan, params, &cast::<S>(&x[i * d..(i + 1) * d]))?;
                let (loss, mut dz) = kernels::softmax_xent(acts.last().expect("output"), y[i]);
                if !loss.is_finite() {
                    return Err(Error::Numeric {
                        layer: plan.slots.len(),
                        kind: "softmax-cross-entropy".into(),
                    });
                }
                losses.push(loss.primal());
                if !want.params && !want.input {
                    continue;
                }
                dz.iter_mut().for_each(|v| *v *= scale);
                let dx = kernels::backward(plan, params, &acts, dz, dparams.as_deref_mut(), want.input);
                if let Some(dx) = dx {
                    dinput.extend(dx.iter().map(|v| v.primal()));
                }
            }
            Ok(ChunkResult {
                losses,
                dparams,
                dinput,
            })
        })
        .collect();

    let mut per_example_loss = Vec::with_capacity(n);
    let mut params_acc = want.params.then(|| vec![0.0; plan.param_count]);
    let mut input = want.input.then(|| Vec::with_capacity(x.len()));
    for c in chunks {
        let c = c?;
        per_example_loss.extend(c.losses);
        if let (Some(acc), Some(dp)) = (params_acc.as_mut(), c.dparams) {
            for (a, v) in acc.iter_mut().zip(dp) {
                *a += v.primal();
            }
        }
        if let Some(inp) = input.as_mut() {
            inp.extend(c.dinput);
        }
    }
    let loss = per_example_loss.iter().sum::<f64>() / n as f64;
    Ok(Grads {
        loss,
        per_example_loss,
        params: params_acc,
        input,
    })
}

fn mixed_impl<S: Scalar>(plan: &Plan, params: &[f64], v: &[f64], x: &[f64], y: &[usize]) -> Result<Vec<f64>> {
    let d = plan.input_len;
    let n = y.len();
    let dual_params: Vec<Dual<S>> = params
        .iter()
        .zip(v)
        .map(|(&p, &t)| Dual::new(S::from_f64(p), S::from_f64(t)))
        .collect();
    let scale = Dual::<S>::from_f64(1.0 / n as f64);
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi: Vec<Dual<S>> = cast(&x[i * d..(i + 1) * d]);
            let acts = kernels::forward(plan, &dual_params, &xi)?;
            let (_, mut dz) = kernels::softmax_xent(acts.last().expect("output"), y[i]);
            dz.iter_mut().for_each(|g| *g *= scale);
            let dx = kernels::backward(plan, &dual_params, &acts, dz, None, true).expect("input grad");
            Ok(dx.iter().map(|g| g.eps.primal()).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(x.len());
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}
