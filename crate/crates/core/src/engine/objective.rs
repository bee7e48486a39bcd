//! Scalar functions of a parameter gradient with closed-form derivatives.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Gradient dissimilarity `1 - cos(a, b)`, in `[0, 2]`.
pub fn matching_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    check_norms(na, nb)?;
    let cos = dot(a, b) / (na * nb);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// `∂/∂b` of [`matching_loss`]`(a, b)`.
pub fn matching_loss_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let (na, nb) = (norm(a), norm(b));
    check_norms(na, nb)?;
    let ab = dot(a, b);
    let inv = 1.0 / (na * nb);
    let k = ab / (na * nb * nb * nb);
    Ok(a.iter().zip(b).map(|(&ai, &bi)| -(ai * inv - k * bi)).collect())
}

fn check_norms(na: f64, nb: f64) -> Result<()> {
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateGradient(format!(
            "matching loss needs non-zero finite vectors (norms {na}, {nb})"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A scalar function `f(g)` of a parameter gradient `g`.
#[derive(Clone)]
pub enum GradFn {
    Constant(f64),
    /// `w · g`
    Dot(Vec<f64>),
    /// `‖g‖²`
    SquaredNorm,
    /// `‖g‖`
    Norm,
    /// `1 - cos(target, g)`
    Matching {
        target: Vec<f64>,
    },
    /// `scale · inner(g) + shift`
    Affine {
        scale: f64,
        shift: f64,
        inner: Box<GradFn>,
    },
    Sum(Vec<GradFn>),
    /// Evaluable but not differentiable; differentiating it is an error.
    Opaque {
        name: String,
        f: ScalarFn,
    },
}

impl fmt::Debug for GradFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradFn::Constant(c) => write!(f, "Constant({c})"),
            GradFn::Dot(w) => write!(f, "Dot(len {})", w.len()),
            GradFn::SquaredNorm => f.write_str("SquaredNorm"),
            GradFn::Norm => f.write_str("Norm"),
            GradFn::Matching { target } => write!(f, "Matching(len {})", target.len()),
            GradFn::Affine { scale, shift, inner } => {
                write!(f, "Affine({scale}·{inner:?} + {shift})")
            }
            GradFn::Sum(terms) => f.debug_list().entries(terms).finish(),
            GradFn::Opaque { name, .. } => write!(f, "Opaque({name})"),
        }
    }
}

impl GradFn {
    fn check_len(w: &[f64], g: &[f64]) -> Result<()> {
        if w.len() != g.len() {
            return Err(Error::Usage(format!(
                "vector of length {} applied to a gradient of length {}",
                w.len(),
                g.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, g: &[f64]) -> Result<f64> {
        Ok(match self {
            GradFn::Constant(c) => *c,
            GradFn::Dot(w) => {
                Self::check_len(w, g)?;
                dot(w, g)
            }
            GradFn::SquaredNorm => dot(g, g),
            GradFn::Norm => norm(g),
            GradFn::Matching { target } => {
                Self::check_len(target, g)?;
                matching_loss(target, g)?
            }
            GradFn::Affine { scale, shift, inner } => scale * inner.value(g)? + shift,
            GradFn::Sum(terms) => terms.iter().map(|t| t.value(g)).sum::<Result<f64>>()?,
            GradFn::Opaque { f, .. } => f(g),
        })
    }

    /// `∂f/∂g`.
    pub fn gradient(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            GradFn::Constant(_) => vec![0.0; g.len()],
            GradFn::Dot(w) => {
                Self::check_len(w, g)?;
                w.clone()
            }
            GradFn::SquaredNorm => g.iter().map(|v| 2.0 * v).collect(),
            GradFn::Norm => {
                let n = norm(g);
                if n == 0.0 {
                    return Err(Error::DegenerateGradient("norm is not differentiable at zero".into()));
                }
                g.iter().map(|v| v / n).collect()
            }
            GradFn::Matching { target } => {
                Self::check_len(target, g)?;
                matching_loss_grad(target, g)?
            }
            GradFn::Affine { scale, inner, .. } => inner.gradient(g)?.into_iter().map(|v| scale * v).collect(),
            GradFn::Sum(terms) => {
                let mut acc = vec![0.0; g.len()];
                for t in terms {
                    for (a, v) in acc.iter_mut().zip(t.gradient(g)?) {
                        *a += v;
                    }
                }
                acc
            }
            GradFn::Opaque { name, .. } => {
                return Err(Error::Capability(format!("{name} has no closed-form derivative")))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_loss_landmarks() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(matching_loss(&v, &v).unwrap().abs() < 1e-12);
        assert!((matching_loss(&v, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(matching_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(
            matching_loss(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateGradient(_))
        ));
    }

    #[test]
    fn closed_form_gradients_match_differences() {
        let g = [0.4, -0.7, 1.1, 0.2];
        let fns = [
            GradFn::Matching {
                target: vec![1.0, 0.5, -0.3, 0.9],
            },
            GradFn::Norm,
            GradFn::Affine {
                scale: -0.5,
                shift: 3.0,
                inner: Box::new(GradFn::SquaredNorm),
            },
            GradFn::Sum(vec![GradFn::Dot(vec![1.0, 2.0, 3.0, 4.0]), GradFn::Constant(7.0)]),
        ];
        for f in &fns {
            let grad = f.gradient(&g).unwrap();
            for i in 0..g.len() {
                let h = 1e-6;
                let mut up = g;
                let mut dn = g;
                up[i] += h;
                dn[i] -= h;
                let fd = (f.value(&up).unwrap() - f.value(&dn).unwrap()) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-7, "{f:?} coord {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn opaque_functions_refuse_differentiation() {
        let f = GradFn::Opaque {
            name: "max-entry".into(),
            f: Arc::new(|g: &[f64]| g.iter().cloned().fold(f64::MIN, f64::max)),
        };
        assert_eq!(f.value(&[1.0, 3.0]).unwrap(), 3.0);
        assert!(matches!(f.gradient(&[1.0, 3.0]), Err(Error::Capability(_))));
    }
}
