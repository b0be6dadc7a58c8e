//! Adam with decoupled (or coupled) weight decay and global-norm clipping.

use std::collections::BTreeMap;

use super::schedule::TrainSchedule;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: usize,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

/// Weight decay is applied to matrices only; biases, norm parameters and
/// single learned vectors are left undecayed.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// Rejects non-finite gradients, then rescales all of them so their joint L2
/// norm is at most `max_norm` (0 disables). Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64, step: usize) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { step, param: name.clone() });
        }
        sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    Ok(norm)
}

/// One bias-corrected Adam update. Parameters without a gradient are not
/// touched (not even decayed).
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    schedule: &TrainSchedule,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { step: state.step, param: name.clone() });
        }
        let p = params.get(name).ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (schedule.beta1, schedule.beta2, schedule.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let wd = schedule.weight_decay;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let decay = wd > 0.0 && decays(p.shape());
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let mut gf = gi.as_f64();
            let wf = w.as_f64();
            if decay && !schedule.decoupled_weight_decay {
                gf += wd * wf;
            }
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let mut next = wf - lr * (mf / c1) / ((vf / c2).sqrt() + eps);
            if decay && schedule.decoupled_weight_decay {
                next -= lr * wd * wf;
            }
            *w = T::of(next);
        }
    }
    Ok(())
}
