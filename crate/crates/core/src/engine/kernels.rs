//! Per-example forward and reverse passes over a resolved [`Plan`].

use super::arch::{Layer, Plan, Shape, Slot};
use super::scalar::Scalar;
use crate::error::{Error, Result};

fn layer_name(l: &Layer) -> &'static str {
    match l {
        Layer::Dense { .. } => "dense",
        Layer::Conv { .. } => "conv",
        Layer::Relu => "relu",
        Layer::Tanh => "tanh",
        Layer::Flatten => "flatten",
    }
}

/// Activations of every layer; `acts[0]` is the input.
pub(crate) fn forward<S: Scalar>(plan: &Plan, params: &[S], x: &[S]) -> Result<Vec<Vec<S>>> {
    let mut acts: Vec<Vec<S>> = Vec::with_capacity(plan.slots.len() + 1);
    acts.push(x.to_vec());
    for (i, slot) in plan.slots.iter().enumerate() {
        let input = &acts[i];
        let out = match slot.layer {
            Layer::Dense { out } => dense_forward(slot, params, input, out),
            Layer::Conv { .. } => conv_forward(slot, params, input),
            Layer::Relu => input
                .iter()
                .map(|&v| if v.primal() > 0.0 { v } else { S::zero() })
                .collect(),
            Layer::Tanh => input.iter().map(|&v| v.tanh()).collect(),
            Layer::Flatten => input.clone(),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: i,
                kind: layer_name(&slot.layer).into(),
            });
        }
        acts.push(out);
    }
    Ok(acts)
}

fn dense_forward<S: Scalar>(slot: &Slot, params: &[S], x: &[S], out: usize) -> Vec<S> {
    let n_in = x.len();
    let w = &params[slot.offset..slot.offset + slot.weights];
    let b = &params[slot.offset + slot.weights..slot.offset + slot.param_count()];
    (0..out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o];
            for (&wi, &xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            acc
        })
        .collect()
}

struct ConvGeom {
    ic: usize,
    ih: usize,
    iw: usize,
    oc: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(slot: &Slot) -> ConvGeom {
    let (
        Shape::Spatial(i),
        Shape::Spatial(o),
        Layer::Conv {
            kernel,
            stride,
            padding,
            ..
        },
    ) = (slot.input, slot.output, slot.layer)
    else {
        unreachable!("conv slot with non-spatial shapes")
    };
    ConvGeom {
        ic: i.channels,
        ih: i.height,
        iw: i.width,
        oc: o.channels,
        oh: o.height,
        ow: o.width,
        k: kernel,
        stride,
        pad: padding,
    }
}

/// Input coordinate for output position `o` and kernel tap `t`, if inside.
#[inline]
fn tap(o: usize, t: usize, g: &ConvGeom, limit: usize) -> Option<usize> {
    let p = (o * g.stride + t).checked_sub(g.pad)?;
    (p < limit).then_some(p)
}

fn conv_forward<S: Scalar>(slot: &Slot, params: &[S], x: &[S]) -> Vec<S> {
    let g = conv_geom(slot);
    let w = &params[slot.offset..slot.offset + slot.weights];
    let b = &params[slot.offset + slot.weights..slot.offset + slot.param_count()];
    let mut out = vec![S::zero(); g.oc * g.oh * g.ow];
    for o in 0..g.oc {
        for r in 0..g.oh {
            for c in 0..g.ow {
                let mut acc = b[o];
                for ci in 0..g.ic {
                    for kr in 0..g.k {
                        let Some(ir) = tap(r, kr, &g, g.ih) else { continue };
                        for kc in 0..g.k {
                            let Some(icol) = tap(c, kc, &g, g.iw) else { continue };
                            acc += w[((o * g.ic + ci) * g.k + kr) * g.k + kc] * x[(ci * g.ih + ir) * g.iw + icol];
                        }
                    }
                }
                out[(o * g.oh + r) * g.ow + c] = acc;
            }
        }
    }
    out
}

/// Per-example softmax cross-entropy; returns `(loss, dloss/dlogits)`.
pub(crate) fn softmax_xent<S: Scalar>(z: &[S], y: usize) -> (S, Vec<S>) {
    // Shifting by a constant is exact for both value and derivative.
    let m = S::from_f64(z.iter().map(|v| v.primal()).fold(f64::NEG_INFINITY, f64::max));
    let e: Vec<S> = z.iter().map(|&v| (v - m).exp()).collect();
    let mut sum = S::zero();
    for &v in &e {
        sum += v;
    }
    let loss = m + sum.ln() - z[y];
    let mut d: Vec<S> = e.into_iter().map(|v| v / sum).collect();
    d[y] -= S::one();
    (loss, d)
}

/// Reverse pass from `dout` (gradient w.r.t. the logits).
///
/// Parameter gradients are accumulated into `dparams` when given; the input
/// gradient is returned when `want_input` is set.
pub(crate) fn backward<S: Scalar>(
    plan: &Plan,
    params: &[S],
    acts: &[Vec<S>],
    mut dout: Vec<S>,
    mut dparams: Option<&mut [S]>,
    want_input: bool,
) -> Option<Vec<S>> {
    for (i, slot) in plan.slots.iter().enumerate().rev() {
        let need_dx = i > 0 || want_input;
        let input = &acts[i];
        let output = &acts[i + 1];
        dout = match slot.layer {
            Layer::Dense { out } => dense_backward(slot, params, input, &dout, out, dparams.as_deref_mut(), need_dx),
            Layer::Conv { .. } => conv_backward(slot, params, input, &dout, dparams.as_deref_mut(), need_dx),
            // Subgradient 0 at the kink.
            Layer::Relu => input
                .iter()
                .zip(&dout)
                .map(|(&v, &g)| if v.primal() > 0.0 { g } else { S::zero() })
                .collect(),
            Layer::Tanh => output
                .iter()
                .zip(&dout)
                .map(|(&t, &g)| g * (S::one() - t * t))
                .collect(),
            Layer::Flatten => dout,
        };
        if !need_dx {
            return None;
        }
    }
    want_input.then_some(dout)
}

fn dense_backward<S: Scalar>(
    slot: &Slot,
    params: &[S],
    x: &[S],
    g: &[S],
    out: usize,
    dparams: Option<&mut [S]>,
    need_dx: bool,
) -> Vec<S> {
    let n_in = x.len();
    let w = &params[slot.offset..slot.offset + slot.weights];
    if let Some(dp) = dparams {
        let (dw, db) = dp[slot.offset..slot.offset + slot.param_count()].split_at_mut(slot.weights);
        for o in 0..out {
            let go = g[o];
            db[o] += go;
            for (dwi, &xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *dwi += go * xi;
            }
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![S::zero(); n_in];
    for o in 0..out {
        let go = g[o];
        for (dxi, &wi) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
            *dxi += wi * go;
        }
    }
    dx
}

fn conv_backward<S: Scalar>(
    slot: &Slot,
    params: &[S],
    x: &[S],
    gout: &[S],
    dparams: Option<&mut [S]>,
    need_dx: bool,
) -> Vec<S> {
    let g = conv_geom(slot);
    let w = &params[slot.offset..slot.offset + slot.weights];
    let mut dx = if need_dx {
        vec![S::zero(); g.ic * g.ih * g.iw]
    } else {
        Vec::new()
    };
    let mut grads = dparams.map(|dp| {
        let (dw, db) = dp[slot.offset..slot.offset + slot.param_count()].split_at_mut(slot.weights);
        (dw, db)
    });
    for o in 0..g.oc {
        for r in 0..g.oh {
            for c in 0..g.ow {
                let go = gout[(o * g.oh + r) * g.ow + c];
                if let Some((_, db)) = grads.as_mut() {
                    db[o] += go;
                }
                for ci in 0..g.ic {
                    for kr in 0..g.k {
                        let Some(ir) = tap(r, kr, &g, g.ih) else { continue };
                        for kc in 0..g.k {
                            let Some(icol) = tap(c, kc, &g, g.iw) else { continue };
                            let wi = ((o * g.ic + ci) * g.k + kr) * g.k + kc;
                            let xi = (ci * g.ih + ir) * g.iw + icol;
                            if let Some((dw, _)) = grads.as_mut() {
                                dw[wi] += go * x[xi];
                            }
                            if need_dx {
                                dx[xi] += w[wi] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
