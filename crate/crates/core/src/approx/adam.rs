//! Bias-corrected adaptive-moment optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-store optimizer state: first/second moments paired by parameter name.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(learning_rate: f64) -> Self {
        OptimState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn moments_mut(
        &mut self,
    ) -> (&mut BTreeMap<String, Tensor>, &mut BTreeMap<String, Tensor>) {
        (&mut self.first_moment, &mut self.second_moment)
    }
}

/// One descent step on the accumulated gradients; zeroes them afterwards.
///
/// Updates are applied in sorted parameter-name order so runs are
/// bit-reproducible.
pub fn adam_update(params: &mut ParamStore, opt: &mut OptimState) -> Result<()> {
    let t = params.step_count + 1;
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);

    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let shape = params.get(name).shape().to_vec();
        let m = opt
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let v = opt
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let grad = params.grad(name).data().to_vec();
        for ((mv, vv), g) in m
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(&grad)
        {
            *mv = opt.beta1 * *mv + (1.0 - opt.beta1) * g;
            *vv = opt.beta2 * *vv + (1.0 - opt.beta2) * g * g;
        }
        let (m, v) = (&opt.first_moment[name], &opt.second_moment[name]);
        let tensor = params.get_mut(name);
        for ((p, mv), vv) in tensor
            .data_mut()
            .iter_mut()
            .zip(m.data())
            .zip(v.data())
        {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *p -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.epsilon);
        }
    }
    params.step_count = t;
    params.zero_grads();
    if !params.all_finite() {
        return Err(Error::numerical(
            "non-finite parameter values after optimizer step",
        ));
    }
    Ok(())
}
