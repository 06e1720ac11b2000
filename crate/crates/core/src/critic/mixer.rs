//! Joint-value mixing: the monotonic nonlinear decomposition and its linear
//! ablation.
//!
//! The nonlinear mode is a two-layer mixing network whose weights and biases
//! are emitted by state-conditioned hypernetworks; first- and second-layer
//! mixing weights pass through an absolute-value map, which makes
//! ∂q_tot/∂q^a ≥ 0 for every agent by construction. The linear mode emits
//! strictly positive per-agent weights w^a(s) plus a bias.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::approx::{init_params, Activation, NetSpec, Network, ParamStore, StepCtx};
use crate::error::{Error, Result};

/// Keeps linear weights strictly positive after the absolute-value map.
pub const LINEAR_WEIGHT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerMode {
    Ncd,
    Linear,
}

/// Architecture of the mixer: named hypernetworks conditioned on the global
/// state (or a joint-history encoding when no state exists).
#[derive(Debug, Clone)]
pub struct Mixer {
    pub mode: MixerMode,
    pub num_agents: usize,
    pub state_dim: usize,
    pub embed_dim: usize,
    nets: BTreeMap<String, Network>,
}

/// Hypernetwork parameters ψ, one store per hypernetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    pub stores: BTreeMap<String, ParamStore>,
}

impl MixerParams {
    pub fn zero_grads(&mut self) {
        for store in self.stores.values_mut() {
            store.zero_grads();
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for store in self.stores.values_mut() {
            store.scale_grads(factor);
        }
    }

    pub fn copy_values_from(&mut self, src: &MixerParams) {
        for (name, store) in &mut self.stores {
            store.copy_values_from(&src.stores[name]);
        }
    }
}

/// Captured intermediates of one mix evaluation.
#[derive(Debug)]
pub struct MixCtx {
    local_qs: Vec<f64>,
    net_ctxs: BTreeMap<String, StepCtx>,
    raw: BTreeMap<String, Vec<f64>>,
    hidden_pre: Vec<f64>,
}

#[inline]
fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Mixer {
    /// Monotonic nonlinear mixer: hypernets with one hidden layer emit the
    /// (k×embed) first-layer weights, embed biases, embed second-layer
    /// weights, and the scalar bias.
    pub fn ncd(num_agents: usize, state_dim: usize, embed_dim: usize, hyper_hidden: usize) -> Result<Self> {
        if num_agents == 0 || state_dim == 0 || embed_dim == 0 {
            return Err(Error::config("mixer sizes must be positive"));
        }
        let mut nets = BTreeMap::new();
        let mk = |out: usize| -> Result<Network> {
            Network::new(NetSpec::mlp(
                vec![state_dim, hyper_hidden, out],
                Activation::Relu,
            ))
        };
        nets.insert("w1".to_string(), mk(num_agents * embed_dim)?);
        nets.insert("b1".to_string(), mk(embed_dim)?);
        nets.insert("w2".to_string(), mk(embed_dim)?);
        nets.insert("b2".to_string(), mk(1)?);
        Ok(Mixer {
            mode: MixerMode::Ncd,
            num_agents,
            state_dim,
            embed_dim,
            nets,
        })
    }

    /// Linear decomposition q_tot = Σ_a w^a(s)·q^a + b(s), w^a > 0.
    pub fn linear(num_agents: usize, state_dim: usize, hyper_hidden: usize) -> Result<Self> {
        if num_agents == 0 || state_dim == 0 {
            return Err(Error::config("mixer sizes must be positive"));
        }
        let mut nets = BTreeMap::new();
        nets.insert(
            "w".to_string(),
            Network::new(NetSpec::mlp(
                vec![state_dim, hyper_hidden, num_agents],
                Activation::Relu,
            ))?,
        );
        nets.insert(
            "b".to_string(),
            Network::new(NetSpec::mlp(
                vec![state_dim, hyper_hidden, 1],
                Activation::Relu,
            ))?,
        );
        Ok(Mixer {
            mode: MixerMode::Linear,
            num_agents,
            state_dim,
            embed_dim: 0,
            nets,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<MixerParams> {
        let mut stores = BTreeMap::new();
        for (offset, (name, net)) in self.nets.iter().enumerate() {
            stores.insert(
                name.clone(),
                init_params(net.spec(), seed.wrapping_add(offset as u64))?,
            );
        }
        Ok(MixerParams { stores })
    }

    fn run_hyper(
        &self,
        params: &MixerParams,
        name: &str,
        state: &[f64],
    ) -> Result<(Vec<f64>, StepCtx)> {
        let net = &self.nets[name];
        let store = params
            .stores
            .get(name)
            .ok_or_else(|| Error::config(format!("mixer params missing store {name:?}")))?;
        let (raw, _, ctx) = net.forward_ctx(store, state, None)?;
        Ok((raw, ctx))
    }

    /// q_tot from local values and the conditioning state.
    pub fn mix(&self, params: &MixerParams, local_qs: &[f64], state: &[f64]) -> Result<f64> {
        let (q_tot, _) = self.mix_ctx(params, local_qs, state)?;
        Ok(q_tot)
    }

    pub fn mix_ctx(
        &self,
        params: &MixerParams,
        local_qs: &[f64],
        state: &[f64],
    ) -> Result<(f64, MixCtx)> {
        if local_qs.len() != self.num_agents {
            return Err(Error::usage(format!(
                "{} local values for {} agents",
                local_qs.len(),
                self.num_agents
            )));
        }
        let mut net_ctxs = BTreeMap::new();
        let mut raw = BTreeMap::new();
        match self.mode {
            MixerMode::Ncd => {
                let k = self.num_agents;
                let e = self.embed_dim;
                let (a1, c1) = self.run_hyper(params, "w1", state)?;
                let (b1, cb1) = self.run_hyper(params, "b1", state)?;
                let (a2, c2) = self.run_hyper(params, "w2", state)?;
                let (b2, cb2) = self.run_hyper(params, "b2", state)?;
                let mut hidden_pre = vec![0.0; e];
                for row in 0..e {
                    let mut acc = b1[row];
                    for (a, q) in local_qs.iter().enumerate() {
                        acc += a1[row * k + a].abs() * q;
                    }
                    hidden_pre[row] = acc;
                }
                let mut q_tot = b2[0];
                for row in 0..e {
                    q_tot += a2[row].abs() * elu(hidden_pre[row]);
                }
                net_ctxs.insert("w1".to_string(), c1);
                net_ctxs.insert("b1".to_string(), cb1);
                net_ctxs.insert("w2".to_string(), c2);
                net_ctxs.insert("b2".to_string(), cb2);
                raw.insert("w1".to_string(), a1);
                raw.insert("w2".to_string(), a2);
                Ok((
                    q_tot,
                    MixCtx {
                        local_qs: local_qs.to_vec(),
                        net_ctxs,
                        raw,
                        hidden_pre,
                    },
                ))
            }
            MixerMode::Linear => {
                let (w_raw, cw) = self.run_hyper(params, "w", state)?;
                let (b, cb) = self.run_hyper(params, "b", state)?;
                let mut q_tot = b[0];
                for (wr, q) in w_raw.iter().zip(local_qs) {
                    q_tot += (wr.abs() + LINEAR_WEIGHT_EPS) * q;
                }
                net_ctxs.insert("w".to_string(), cw);
                net_ctxs.insert("b".to_string(), cb);
                raw.insert("w".to_string(), w_raw);
                Ok((
                    q_tot,
                    MixCtx {
                        local_qs: local_qs.to_vec(),
                        net_ctxs,
                        raw,
                        hidden_pre: Vec::new(),
                    },
                ))
            }
        }
    }

    /// Reverse step for one mix: accumulates hypernet gradients scaled by
    /// `upstream` and returns upstream·∂q_tot/∂local_qs.
    pub fn backward(
        &self,
        params: &mut MixerParams,
        ctx: &MixCtx,
        upstream: f64,
    ) -> Result<Vec<f64>> {
        let backprop = |name: &str,
                            grad_out: &[f64],
                            params: &mut MixerParams|
         -> Result<()> {
            let net = &self.nets[name];
            let store = params.stores.get_mut(name).expect("store exists");
            net.backward(store, &ctx.net_ctxs[name], grad_out, None)?;
            Ok(())
        };
        match self.mode {
            MixerMode::Ncd => {
                let k = self.num_agents;
                let e = self.embed_dim;
                let a1 = &ctx.raw["w1"];
                let a2 = &ctx.raw["w2"];
                // Output layer.
                backprop("b2", &[upstream], params)?;
                let mut da2 = vec![0.0; e];
                let mut dhidden_pre = vec![0.0; e];
                for row in 0..e {
                    let h = elu(ctx.hidden_pre[row]);
                    da2[row] = upstream * h * sign(a2[row]);
                    dhidden_pre[row] =
                        upstream * a2[row].abs() * elu_deriv(ctx.hidden_pre[row]);
                }
                backprop("w2", &da2, params)?;
                backprop("b1", &dhidden_pre, params)?;
                let mut da1 = vec![0.0; k * e];
                let mut dq = vec![0.0; k];
                for row in 0..e {
                    for (a, q) in ctx.local_qs.iter().enumerate() {
                        let idx = row * k + a;
                        da1[idx] = dhidden_pre[row] * q * sign(a1[idx]);
                        dq[a] += dhidden_pre[row] * a1[idx].abs();
                    }
                }
                backprop("w1", &da1, params)?;
                Ok(dq)
            }
            MixerMode::Linear => {
                let w_raw = &ctx.raw["w"];
                backprop("b", &[upstream], params)?;
                let mut dw = vec![0.0; self.num_agents];
                let mut dq = vec![0.0; self.num_agents];
                for (a, (wr, q)) in w_raw.iter().zip(&ctx.local_qs).enumerate() {
                    dw[a] = upstream * q * sign(*wr);
                    dq[a] = upstream * (wr.abs() + LINEAR_WEIGHT_EPS);
                }
                backprop("w", &dw, params)?;
                Ok(dq)
            }
        }
    }

    /// ∂q_tot/∂local_qs without touching gradients.
    pub fn local_grad(
        &self,
        params: &MixerParams,
        local_qs: &[f64],
        state: &[f64],
    ) -> Result<Vec<f64>> {
        let (_, ctx) = self.mix_ctx(params, local_qs, state)?;
        let mut scratch = params.clone();
        self.backward(&mut scratch, &ctx, 1.0)
    }

    /// The positive weights and bias of the linear mode at a given state.
    pub fn linear_weights(&self, params: &MixerParams, state: &[f64]) -> Result<(Vec<f64>, f64)> {
        if self.mode != MixerMode::Linear {
            return Err(Error::usage("linear_weights only applies to linear mode"));
        }
        let (w_raw, _) = self.run_hyper(params, "w", state)?;
        let (b, _) = self.run_hyper(params, "b", state)?;
        Ok((
            w_raw.iter().map(|w| w.abs() + LINEAR_WEIGHT_EPS).collect(),
            b[0],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn linear_mode_with_unit_weights_is_a_sum() {
        let mixer = Mixer::linear(3, 2, 8).unwrap();
        let mut params = mixer.init_params(0).unwrap();
        // Force the hypernets to constant outputs w = 1, b = 0: zero every
        // weight and set output biases.
        for (name, store) in params.stores.iter_mut() {
            let names: Vec<String> = store.names().cloned().collect();
            for p in &names {
                store.get_mut(p).fill(0.0);
            }
            if name == "w" {
                store.get_mut("b1").fill(1.0 - LINEAR_WEIGHT_EPS);
            }
        }
        let q_tot = mixer
            .mix(&params, &[1.5, -0.5, 2.0], &[0.3, 0.7])
            .unwrap();
        assert!((q_tot - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ncd_is_monotone_in_every_local_value() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for seed in 0..20 {
            let mixer = Mixer::ncd(3, 4, 8, 16).unwrap();
            let params = mixer.init_params(seed).unwrap();
            let state: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qs: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let base = mixer.mix(&params, &qs, &state).unwrap();
            for a in 0..3 {
                let mut bumped = qs.clone();
                bumped[a] += 0.37;
                let up = mixer.mix(&params, &bumped, &state).unwrap();
                assert!(up >= base - 1e-12, "agent {a}: {up} < {base}");
            }
        }
    }

    #[test]
    fn linear_mode_weights_are_strictly_positive_and_affine() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for seed in 0..10 {
            let mixer = Mixer::linear(3, 2, 8).unwrap();
            let params = mixer.init_params(seed).unwrap();
            let state: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (w, b) = mixer.linear_weights(&params, &state).unwrap();
            assert!(w.iter().all(|&wv| wv > 0.0));
            // Probe with unit vectors: q_tot − b must be linear with
            // coefficients w.
            let zero = mixer.mix(&params, &[0.0; 3], &state).unwrap();
            assert!((zero - b).abs() < 1e-12);
            for a in 0..3 {
                let mut qs = [0.0; 3];
                qs[a] = 1.0;
                let v = mixer.mix(&params, &qs, &state).unwrap();
                assert!((v - b - w[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_local_gradients_are_nonnegative_in_ncd_mode() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for seed in 0..10 {
            let mixer = Mixer::ncd(2, 3, 8, 16).unwrap();
            let params = mixer.init_params(seed + 100).unwrap();
            let state: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qs: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dq = mixer.local_grad(&params, &qs, &state).unwrap();
            assert!(dq.iter().all(|&g| g >= 0.0), "{dq:?}");
        }
    }

    #[test]
    fn wrong_local_count_is_a_usage_error() {
        let mixer = Mixer::ncd(3, 2, 4, 8).unwrap();
        let params = mixer.init_params(0).unwrap();
        assert!(mixer.mix(&params, &[1.0], &[0.0, 0.0]).is_err());
    }
}
