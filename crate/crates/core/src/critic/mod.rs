//! Per-agent critics, joint-value mixing, the off-policy return operator
//! with its coefficient variants, and the critic loss.

mod mixer;

pub use mixer::{Mixer, MixerMode, MixerParams, MixCtx, LINEAR_WEIGHT_EPS};

use serde::{Deserialize, Serialize};

use crate::approx::{Network, ParamStore, SeqRun};
use crate::envs::{AgentAction, JointAction};
use crate::error::{Error, Result};

/// Behavior log-probs below this floor are clamped before ratio computation.
pub const LOG_BETA_FLOOR: f64 = -18.420680743952367; // ln(1e-8)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    /// |U| outputs, the action indexes the output vector.
    Discrete(usize),
    /// Action of the given dimension is concatenated to the input; scalar
    /// output.
    Continuous(usize),
}

/// One agent's local action-value function Q^a.
#[derive(Debug, Clone)]
pub struct AgentCritic {
    pub kind: CriticKind,
    pub net: Network,
}

impl AgentCritic {
    pub fn new(kind: CriticKind, net: Network) -> Result<Self> {
        match kind {
            CriticKind::Discrete(n) => {
                if net.output_dim() != n {
                    return Err(Error::config(format!(
                        "discrete critic needs {n} outputs, net has {}",
                        net.output_dim()
                    )));
                }
            }
            CriticKind::Continuous(_) => {
                if net.output_dim() != 1 {
                    return Err(Error::config("continuous critic needs a scalar output"));
                }
            }
        }
        Ok(AgentCritic { kind, net })
    }

    /// The per-step network input: history encoding, plus the action for the
    /// continuous kind.
    pub fn step_input(&self, encoding: &[f64], action: &AgentAction) -> Vec<f64> {
        match (&self.kind, action) {
            (CriticKind::Discrete(_), _) => encoding.to_vec(),
            (CriticKind::Continuous(_), AgentAction::Continuous(u)) => {
                let mut input = Vec::with_capacity(encoding.len() + u.len());
                input.extend_from_slice(encoding);
                input.extend_from_slice(u);
                input
            }
            _ => panic!("continuous critic fed a discrete action"),
        }
    }

    fn pick(&self, raw: &[f64], action: &AgentAction) -> Result<f64> {
        match (&self.kind, action) {
            (CriticKind::Discrete(n), AgentAction::Discrete(a)) => {
                if a >= n {
                    return Err(Error::usage(format!("action index {a} out of range")));
                }
                Ok(raw[*a])
            }
            (CriticKind::Continuous(_), AgentAction::Continuous(_)) => Ok(raw[0]),
            _ => Err(Error::usage("action kind does not match critic")),
        }
    }

    /// Scalar local action-value.
    pub fn q_value(
        &self,
        params: &ParamStore,
        encoding: &[f64],
        hidden: Option<&[f64]>,
        action: &AgentAction,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let input = self.step_input(encoding, action);
        let (raw, new_hidden) = self.net.forward(params, &input, hidden)?;
        Ok((self.pick(&raw, action)?, new_hidden))
    }

    /// Upstream vector on the raw outputs for dL/dq = `dq`.
    pub fn upstream_for(&self, action: &AgentAction, dq: f64) -> Vec<f64> {
        match (&self.kind, action) {
            (CriticKind::Discrete(n), AgentAction::Discrete(a)) => {
                let mut up = vec![0.0; *n];
                up[*a] = dq;
                up
            }
            (CriticKind::Continuous(_), _) => vec![dq],
            _ => panic!("action kind does not match critic"),
        }
    }
}

/// Off-policy correction configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub lambda: f64,
    pub variant: TraceVariant,
    /// Window length n of the return operator.
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceVariant {
    Retrace,
    TreeBackup,
    ImportanceSampling,
}

impl TraceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1)"));
        }
        if self.horizon == 0 {
            return Err(Error::config("trace horizon must be at least 1"));
        }
        Ok(())
    }
}

/// Sarsa-form temporal-difference residual
/// δ_t = r_t + γ·q_next·(1−terminal) − q_t, where `q_next` was evaluated at a
/// joint action freshly sampled from the current policies.
pub fn td_delta(q_tot_t: f64, reward: f64, q_tot_next: f64, terminal: bool, gamma: f64) -> f64 {
    let bootstrap = if terminal { 0.0 } else { gamma * q_tot_next };
    reward + bootstrap - q_tot_t
}

/// Off-policy coefficient c_j for one stored step. Joint quantities are
/// products over agents, i.e. sums of per-agent log-probs. Returns the
/// coefficient and whether the behavior log-prob hit the underflow floor.
pub fn trace_coeff(
    spec: &TraceSpec,
    joint_pi_logprob: f64,
    joint_beta_logprob: f64,
    joint_pi_prob: f64,
) -> Result<(f64, bool)> {
    if !joint_pi_logprob.is_finite() || !joint_beta_logprob.is_finite() {
        return Err(Error::numerical("non-finite log-probability in trace coefficient"));
    }
    let clamped = joint_beta_logprob < LOG_BETA_FLOOR;
    let log_beta = joint_beta_logprob.max(LOG_BETA_FLOOR);
    let c = match spec.variant {
        TraceVariant::Retrace => spec.lambda * (joint_pi_logprob - log_beta).exp().min(1.0),
        TraceVariant::TreeBackup => spec.lambda * joint_pi_prob,
        TraceVariant::ImportanceSampling => (joint_pi_logprob - log_beta).exp(),
    };
    Ok((c, clamped))
}

/// One window step as seen by the return operator.
#[derive(Debug, Clone, Copy)]
pub struct WindowStep {
    pub reward: f64,
    pub terminal: bool,
    /// Joint behavior log-prob of the stored action at this step.
    pub behavior_logprob: f64,
}

/// Callbacks the operator needs; indices are window-relative. All joint
/// values must come from the target parameter copies, log-probs from the
/// current policies.
pub struct RetraceEval<'a> {
    /// Target q_tot(τ_{t+i}, u_{t+i}) of the stored pair at window index i.
    pub q_stored: &'a mut dyn FnMut(usize) -> Result<f64>,
    /// Target q_tot(τ_{t+i+1}, u') with u' freshly sampled from the current
    /// policies; only invoked for non-terminal steps.
    pub q_next_resampled: &'a mut dyn FnMut(usize) -> Result<f64>,
    /// Current-policy joint log-prob of the stored action at window index i.
    pub pi_logprob_stored: &'a mut dyn FnMut(usize) -> Result<f64>,
}

/// n-step λ-return operator applied to one trajectory window:
///
/// R = q(τ_t,u_t) + Σ_{i=0}^{L−1} γ^i (Π_{j=1}^{i} c_j) δ_i,
///
/// with the empty product equal to 1. `on_policy_sarsa` replaces every c_j
/// by λ (the on-policy ablation, where Retrace does not apply). Returns the
/// target and the number of behavior-probability clamps encountered.
pub fn retrace_target(
    window: &[WindowStep],
    spec: &TraceSpec,
    eval: &mut RetraceEval<'_>,
    on_policy_sarsa: bool,
) -> Result<(f64, u64)> {
    if window.is_empty() {
        return Err(Error::usage("return operator needs a nonempty window"));
    }
    spec.validate()?;
    let mut clamps = 0u64;
    let mut target = (eval.q_stored)(0)?;
    let mut discount = 1.0;
    let mut coeff_product = 1.0;
    for (i, step) in window.iter().enumerate() {
        if i > 0 {
            let c = if on_policy_sarsa {
                spec.lambda
            } else {
                let log_pi = (eval.pi_logprob_stored)(i)?;
                let (c, clamped) =
                    trace_coeff(spec, log_pi, step.behavior_logprob, log_pi.exp())?;
                if clamped {
                    clamps += 1;
                }
                c
            };
            coeff_product *= c;
            discount *= spec.gamma;
            if coeff_product == 0.0 {
                break;
            }
        }
        let q_t = (eval.q_stored)(i)?;
        let q_next = if step.terminal {
            0.0
        } else {
            (eval.q_next_resampled)(i)?
        };
        let delta = td_delta(q_t, step.reward, q_next, step.terminal, spec.gamma);
        target += discount * coeff_product * delta;
        if step.terminal {
            break;
        }
    }
    Ok((target, clamps))
}

/// Everything the critic loss needs for one episode: per-agent history
/// encodings (without the action suffix), stored joint actions, mixer
/// conditioning, and precomputed constant targets.
pub struct CriticEpisode<'a> {
    pub per_agent_encodings: &'a [Vec<Vec<f64>>],
    pub joint_actions: &'a [JointAction],
    pub mixer_states: &'a [Vec<f64>],
    pub targets: &'a [f64],
}

/// Squared-error loss over one episode with gradients accumulated through
/// the mixer and every agent critic. `upstream_scale` multiplies the raw
/// residual gradient 2(q_tot − target); callers set it to 1/batch to get
/// mean-squared-error gradients. Returns the episode's summed squared error.
pub fn critic_loss_episode(
    critics: &[AgentCritic],
    critic_params: &mut [ParamStore],
    mixer: &Mixer,
    mixer_params: &mut MixerParams,
    episode: &CriticEpisode<'_>,
    upstream_scale: f64,
) -> Result<f64> {
    let num_agents = critics.len();
    let len = episode.joint_actions.len();
    // Forward every critic over the episode's stored actions.
    let mut runs: Vec<SeqRun> = Vec::with_capacity(num_agents);
    for a in 0..num_agents {
        let inputs: Vec<Vec<f64>> = (0..len)
            .map(|t| critics[a].step_input(&episode.per_agent_encodings[a][t], &episode.joint_actions[t][a]))
            .collect();
        runs.push(critics[a].net.forward_seq(&critic_params[a], &inputs)?);
    }
    let mut loss = 0.0;
    let mut per_agent_upstreams: Vec<Vec<Vec<f64>>> = (0..num_agents)
        .map(|a| {
            (0..len)
                .map(|_| vec![0.0; critics[a].net.output_dim()])
                .collect()
        })
        .collect();
    for t in 0..len {
        let local_qs: Vec<f64> = (0..num_agents)
            .map(|a| {
                critics[a]
                    .pick(&runs[a].outputs[t], &episode.joint_actions[t][a])
                    .expect("stored action indexes critic output")
            })
            .collect();
        let (q_tot, ctx) = mixer.mix_ctx(mixer_params, &local_qs, &episode.mixer_states[t])?;
        let residual = q_tot - episode.targets[t];
        loss += residual * residual;
        let dq_tot = 2.0 * residual * upstream_scale;
        let dq_local = mixer.backward(mixer_params, &ctx, dq_tot)?;
        for a in 0..num_agents {
            per_agent_upstreams[a][t] =
                critics[a].upstream_for(&episode.joint_actions[t][a], dq_local[a]);
        }
    }
    for a in 0..num_agents {
        critics[a]
            .net
            .backward_seq(&mut critic_params[a], &runs[a], &per_agent_upstreams[a])?;
    }
    Ok(loss)
}

/// One independent training sample for the flat (feed-forward) loss form.
pub struct CriticSample {
    pub per_agent_encodings: Vec<Vec<f64>>,
    pub joint_action: JointAction,
    pub mixer_state: Vec<f64>,
    pub target: f64,
}

/// Mean squared error over a batch of independent records, gradients
/// accumulated into ψ and all φ^a. Targets are constants: no gradient flows
/// into them.
pub fn critic_loss(
    samples: &[CriticSample],
    critics: &[AgentCritic],
    critic_params: &mut [ParamStore],
    mixer: &Mixer,
    mixer_params: &mut MixerParams,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("critic loss needs a nonempty batch"));
    }
    let b = samples.len() as f64;
    let mut total = 0.0;
    for sample in samples {
        let encodings: Vec<Vec<Vec<f64>>> = sample
            .per_agent_encodings
            .iter()
            .map(|e| vec![e.clone()])
            .collect();
        let episode = CriticEpisode {
            per_agent_encodings: &encodings,
            joint_actions: std::slice::from_ref(&sample.joint_action),
            mixer_states: std::slice::from_ref(&sample.mixer_state),
            targets: std::slice::from_ref(&sample.target),
        };
        total += critic_loss_episode(
            critics,
            critic_params,
            mixer,
            mixer_params,
            &episode,
            1.0 / b,
        )?;
    }
    Ok(total / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{init_params, Activation, NetSpec};

    fn spec(variant: TraceVariant, lambda: f64) -> TraceSpec {
        TraceSpec {
            lambda,
            variant,
            horizon: 5,
            gamma: 0.9,
        }
    }

    #[test]
    fn td_delta_forms() {
        // Terminal step: δ = r − q_t.
        assert_eq!(td_delta(3.0, 1.0, 99.0, true, 0.9), -2.0);
        // Constant q, zero reward: δ = (γ−1)c.
        let c = 4.0;
        let d = td_delta(c, 0.0, c, false, 0.9);
        assert!((d - (0.9 - 1.0) * c).abs() < 1e-12);
    }

    #[test]
    fn trace_coefficients() {
        let retrace = spec(TraceVariant::Retrace, 0.8);
        // Truncation at 1 when π/β > 1.
        let (c, _) = trace_coeff(&retrace, 0.0, (1.0f64 / 1.5).ln(), 1.0).unwrap();
        assert!((c - 0.8).abs() < 1e-12);
        // Plain ratio when π/β < 1.
        let (c, _) = trace_coeff(&retrace, 0.5f64.ln(), 0.0, 0.5).unwrap();
        assert!((c - 0.4).abs() < 1e-12);
        // Tree-backup uses the plain policy probability.
        let tb = spec(TraceVariant::TreeBackup, 0.8);
        let (c, _) = trace_coeff(&tb, 0.25f64.ln(), -3.0, 0.25).unwrap();
        assert!((c - 0.2).abs() < 1e-12);
        // Importance sampling is the raw ratio.
        let is = spec(TraceVariant::ImportanceSampling, 0.8);
        let (c, _) = trace_coeff(&is, 0.5f64.ln(), 0.25f64.ln(), 0.5).unwrap();
        assert!((c - 2.0).abs() < 1e-12);
    }

    #[test]
    fn beta_underflow_is_clamped_and_flagged() {
        let retrace = spec(TraceVariant::Retrace, 1.0);
        let (c, clamped) = trace_coeff(&retrace, -30.0, -60.0, 0.0).unwrap();
        assert!(clamped);
        // Ratio uses the floored β, so it stays finite and ≤ λ.
        assert!(c.is_finite() && c <= 1.0);
    }

    fn const_window(len: usize, terminal_last: bool) -> Vec<WindowStep> {
        (0..len)
            .map(|i| WindowStep {
                reward: 1.0,
                terminal: terminal_last && i + 1 == len,
                behavior_logprob: -0.5,
            })
            .collect()
    }

    #[test]
    fn horizon_one_reduces_to_one_step_target_independent_of_lambda() {
        for lambda in [0.0, 0.3, 1.0] {
            let window = const_window(1, false);
            let ts = TraceSpec {
                lambda,
                variant: TraceVariant::Retrace,
                horizon: 1,
                gamma: 0.9,
            };
            let mut q_stored = |_: usize| Ok(2.0);
            let mut q_next = |_: usize| Ok(3.0);
            let mut pi = |_: usize| Ok(-0.5);
            let mut eval = RetraceEval {
                q_stored: &mut q_stored,
                q_next_resampled: &mut q_next,
                pi_logprob_stored: &mut pi,
            };
            let (target, _) = retrace_target(&window, &ts, &mut eval, false).unwrap();
            // R = q + δ₀ = 2 + (1 + 0.9·3 − 2) = 3.7 for every λ.
            assert!((target - 3.7).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coefficient_annihilates_later_corrections() {
        let window = const_window(2, false);
        let ts = spec(TraceVariant::TreeBackup, 0.8);
        let mut q_stored = |_: usize| Ok(0.0);
        let mut q_next = |_: usize| Ok(0.0);
        // log π(u₁|τ₁) = −745 ⇒ c₁ = λ·exp(−745) = 0 in f64.
        let mut pi = |_: usize| Ok(-745.0);
        let mut eval = RetraceEval {
            q_stored: &mut q_stored,
            q_next_resampled: &mut q_next,
            pi_logprob_stored: &mut pi,
        };
        let (target, _) = retrace_target(&window, &ts, &mut eval, false).unwrap();
        // δ₀ = 1 + 0 − 0 = 1; the second term is annihilated.
        assert!((target - 1.0).abs() < 1e-10, "{target}");
    }

    #[test]
    fn terminal_step_stops_the_sum() {
        let window = const_window(3, true);
        let truncated = &window[..3];
        let ts = spec(TraceVariant::Retrace, 1.0);
        let calls = std::cell::Cell::new(0usize);
        let mut q_stored = |_: usize| Ok(0.5);
        let mut q_next = |i: usize| {
            calls.set(calls.get() + 1);
            Ok(0.5 + i as f64)
        };
        let mut pi = |_: usize| Ok(-0.5);
        let mut eval = RetraceEval {
            q_stored: &mut q_stored,
            q_next_resampled: &mut q_next,
            pi_logprob_stored: &mut pi,
        };
        retrace_target(truncated, &ts, &mut eval, false).unwrap();
        // The terminal last step must not resample a next action.
        assert_eq!(calls.get(), 2);
    }

    #[test]
    fn on_policy_sarsa_uses_lambda_for_every_coefficient() {
        let window = const_window(3, false);
        let ts = spec(TraceVariant::Retrace, 0.7);
        let q = 1.0;
        let mut q_stored = |_: usize| Ok(q);
        let mut q_next = |_: usize| Ok(q);
        let mut pi = |_: usize| panic!("π must not be queried in on-policy mode");
        let mut eval = RetraceEval {
            q_stored: &mut q_stored,
            q_next_resampled: &mut q_next,
            pi_logprob_stored: &mut pi,
        };
        let (target, clamps) = retrace_target(&window, &ts, &mut eval, true).unwrap();
        let delta = 1.0 + 0.9 * q - q;
        let expect = q
            + delta
            + 0.9 * 0.7 * delta
            + 0.9 * 0.9 * 0.7 * 0.7 * delta;
        assert!((target - expect).abs() < 1e-12);
        assert_eq!(clamps, 0);
    }

    #[test]
    fn empty_window_is_a_usage_error() {
        let ts = spec(TraceVariant::Retrace, 0.8);
        let mut q_stored = |_: usize| Ok(0.0);
        let mut q_next = |_: usize| Ok(0.0);
        let mut pi = |_: usize| Ok(0.0);
        let mut eval = RetraceEval {
            q_stored: &mut q_stored,
            q_next_resampled: &mut q_next,
            pi_logprob_stored: &mut pi,
        };
        assert!(retrace_target(&[], &ts, &mut eval, false).is_err());
    }

    fn tiny_critics() -> (Vec<AgentCritic>, Vec<ParamStore>, Mixer, MixerParams) {
        let net_spec = NetSpec::mlp(vec![2, 6, 3], Activation::Tanh);
        let critics: Vec<AgentCritic> = (0..2)
            .map(|_| {
                AgentCritic::new(CriticKind::Discrete(3), Network::new(net_spec.clone()).unwrap())
                    .unwrap()
            })
            .collect();
        let params: Vec<ParamStore> = (0..2)
            .map(|a| init_params(&net_spec, 50 + a as u64).unwrap())
            .collect();
        let mixer = Mixer::ncd(2, 2, 8, 16).unwrap();
        let mixer_params = mixer.init_params(99).unwrap();
        (critics, params, mixer, mixer_params)
    }

    #[test]
    fn zero_residual_means_zero_loss_and_zero_gradients() {
        let (critics, mut params, mixer, mut mixer_params) = tiny_critics();
        let enc = vec![vec![0.5, -0.5], vec![0.1, 0.9]];
        let joint = vec![AgentAction::Discrete(1), AgentAction::Discrete(2)];
        let state = vec![0.3, 0.3];
        // Compute the prediction, then use it as the target.
        let q1 = critics[0]
            .q_value(&params[0], &enc[0], None, &joint[0])
            .unwrap()
            .0;
        let q2 = critics[1]
            .q_value(&params[1], &enc[1], None, &joint[1])
            .unwrap()
            .0;
        let q_tot = mixer.mix(&mixer_params, &[q1, q2], &state).unwrap();
        let samples = [CriticSample {
            per_agent_encodings: enc,
            joint_action: joint,
            mixer_state: state,
            target: q_tot,
        }];
        let loss =
            critic_loss(&samples, &critics, &mut params, &mixer, &mut mixer_params).unwrap();
        assert!(loss.abs() < 1e-24);
        for store in params.iter().chain(mixer_params.stores.values()) {
            for name in store.names() {
                assert!(store.grad(name).data().iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn squared_error_of_two_is_four() {
        let (critics, mut params, mixer, mut mixer_params) = tiny_critics();
        let enc = vec![vec![0.5, -0.5], vec![0.1, 0.9]];
        let joint = vec![AgentAction::Discrete(0), AgentAction::Discrete(0)];
        let state = vec![0.3, 0.3];
        let q1 = critics[0]
            .q_value(&params[0], &enc[0], None, &joint[0])
            .unwrap()
            .0;
        let q2 = critics[1]
            .q_value(&params[1], &enc[1], None, &joint[1])
            .unwrap()
            .0;
        let q_tot = mixer.mix(&mixer_params, &[q1, q2], &state).unwrap();
        let samples = [CriticSample {
            per_agent_encodings: enc,
            joint_action: joint,
            mixer_state: state,
            target: q_tot + 2.0,
        }];
        let loss =
            critic_loss(&samples, &critics, &mut params, &mixer, &mut mixer_params).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);
    }

    #[test]
    fn discrete_critic_indexes_the_output_vector() {
        let net_spec = NetSpec::mlp(vec![2, 4], Activation::Identity);
        let critic =
            AgentCritic::new(CriticKind::Discrete(4), Network::new(net_spec.clone()).unwrap())
                .unwrap();
        let params = init_params(&net_spec, 7).unwrap();
        let enc = vec![0.7, -0.2];
        let (raw, _) = critic.net.forward(&params, &enc, None).unwrap();
        for a in 0..4 {
            let (q, _) = critic
                .q_value(&params, &enc, None, &AgentAction::Discrete(a))
                .unwrap();
            assert_eq!(q, raw[a]);
        }
        assert!(critic
            .q_value(&params, &enc, None, &AgentAction::Discrete(4))
            .is_err());
    }

    #[test]
    fn zero_weight_critic_outputs_its_bias() {
        // Continuous critic: input = [encoding, action], scalar output.
        let net_spec = NetSpec::mlp(vec![3, 1], Activation::Identity);
        let mut params = init_params(&net_spec, 0).unwrap();
        params.get_mut("w0").fill(0.0);
        params.get_mut("b0").data_mut()[0] = 4.5;
        let critic =
            AgentCritic::new(CriticKind::Continuous(1), Network::new(net_spec).unwrap()).unwrap();
        for u in [-1.0, 0.0, 2.0] {
            let (q, _) = critic
                .q_value(&params, &[0.1, 0.2], None, &AgentAction::Continuous(vec![u]))
                .unwrap();
            assert_eq!(q, 4.5);
        }
    }
}
