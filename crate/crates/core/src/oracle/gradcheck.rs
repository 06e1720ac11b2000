//! Finite-difference verification of every trainable gradient path: the
//! elite log-likelihood update, the entropy-regularized proposal update,
//! the squared-error critic loss through the mixer, and the raw network
//! backward pass itself.
//!
//! Probes use the smooth activations (tanh, elu) so that central
//! differences at h = 1e-5 are meaningful everywhere; the rectifier's
//! piecewise-constant derivative is covered by exact unit tests instead.
//! Probes that land within h-reach of a genuine non-differentiability
//! (Gaussian σ clamp, mixing-weight absolute value at zero) are resampled.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{finite_diff_params, gradient_check_error, max_gradient_error};
use crate::approx::{init_params, Activation, NetSpec, Network, ParamStore};
use crate::critic::{AgentCritic, CriticKind, Mixer, MixerMode, MixerParams};
use crate::envs::{AgentAction, JointAction};
use crate::error::{Error, Result};
use crate::policy::{
    elite_logprob_upstream, proposal_upstream, EliteSet, HeadDist, HeadKind, JointActionSample,
    PolicyHead, PolicyPair,
};

pub const FD_STEP: f64 = 1e-5;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub probes: usize,
    pub worst_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_error < tol
    }
}

fn rand_vec(rng: &mut ChaCha12Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Raw network backward vs. central differences, feed-forward and recurrent.
pub fn check_network_gradients(
    recurrent: bool,
    activation: Activation,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let spec = if recurrent {
        NetSpec::recurrent(vec![4, 6, 3], activation, 5)
    } else {
        NetSpec::mlp(vec![4, 6, 5, 3], activation)
    };
    let net = Network::new(spec.clone())?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let steps = if recurrent { 3 } else { 1 };
    for probe in 0..probes {
        let mut params = init_params(&spec, seed.wrapping_add(probe as u64 + 1))?;
        let inputs: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(&mut rng, 4, 1.5)).collect();
        let projections: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();

        params.zero_grads();
        let run = net.forward_seq(&params, &inputs)?;
        net.backward_seq(&mut params, &run, &projections)?;

        let mut objective = |p: &ParamStore| -> Result<f64> {
            let run = net.forward_seq(p, &inputs)?;
            Ok(run
                .outputs
                .iter()
                .zip(&projections)
                .map(|(out, proj)| out.iter().zip(proj).map(|(o, v)| o * v).sum::<f64>())
                .sum())
        };
        let numeric = finite_diff_params(&mut params, &mut objective, FD_STEP)?;
        worst = worst.max(max_gradient_error(&params, &numeric));
    }
    Ok(GradCheckReport {
        probes,
        worst_error: worst,
    })
}

fn sigma_near_clamp(dist: &HeadDist) -> bool {
    match dist {
        HeadDist::Gaussian { sigma, .. } => sigma
            .iter()
            .any(|s| s - crate::policy::SIGMA_MIN < 1e-3 || crate::policy::SIGMA_MAX - s < 1e-3),
        HeadDist::Categorical { .. } => false,
    }
}

fn make_head(gaussian: bool, recurrent: bool, enc_dim: usize) -> Result<(PolicyHead, NetSpec)> {
    let (kind, out) = if gaussian {
        (HeadKind::Gaussian(2), 4)
    } else {
        (HeadKind::Categorical(3), 3)
    };
    let spec = if recurrent {
        NetSpec::recurrent(vec![enc_dim, 6, out], Activation::Tanh, 5)
    } else {
        NetSpec::mlp(vec![enc_dim, 6, out], Activation::Tanh)
    };
    Ok((PolicyHead::new(kind, Network::new(spec.clone())?)?, spec))
}

fn fixed_elites(
    head: &PolicyHead,
    dists: &[HeadDist],
    rng: &mut ChaCha12Rng,
    count: usize,
) -> EliteSet {
    let _ = head;
    let mut elites = Vec::with_capacity(count);
    for idx in 0..count {
        let mut actions = Vec::with_capacity(dists.len());
        let mut lps = Vec::with_capacity(dists.len());
        for dist in dists {
            let (a, lp) = dist.sample(rng);
            actions.push(a);
            lps.push(lp);
        }
        elites.push(JointActionSample {
            actions,
            per_agent_logprob: lps,
            q_tot: 0.0,
            sample_index: idx,
        });
    }
    EliteSet {
        elites,
        quantile: 0.8,
    }
}

/// Objective of the main-policy update for one agent over an episode:
/// Σ_t Σ_{u ∈ I(τ_t)} log π(u^a | τ_t).
fn elite_loglik(
    head: &PolicyHead,
    params: &ParamStore,
    inputs: &[Vec<f64>],
    elites_per_step: &[EliteSet],
    agent: usize,
) -> Result<f64> {
    let run = head.net.forward_seq(params, inputs)?;
    let mut total = 0.0;
    for (t, elites) in elites_per_step.iter().enumerate() {
        let dist = head.dist(&run.outputs[t])?;
        for sample in &elites.elites {
            total += dist.log_prob(&sample.actions[agent])?;
        }
    }
    Ok(total)
}

/// The same objective plus the β-weighted entropy term of the proposal
/// update (entropy counted once per elite occurrence).
fn proposal_objective(
    head: &PolicyHead,
    params: &ParamStore,
    inputs: &[Vec<f64>],
    elites_per_step: &[EliteSet],
    agent: usize,
    beta: f64,
) -> Result<f64> {
    let run = head.net.forward_seq(params, inputs)?;
    let mut total = 0.0;
    for (t, elites) in elites_per_step.iter().enumerate() {
        let dist = head.dist(&run.outputs[t])?;
        for sample in &elites.elites {
            total += dist.log_prob(&sample.actions[agent])?;
        }
        total += beta * elites.elites.len() as f64 * dist.entropy();
    }
    Ok(total)
}

/// Elite log-likelihood gradient (the main-policy path), with or without the
/// proposal's entropy term, against central differences.
pub fn check_policy_gradients(
    gaussian: bool,
    recurrent: bool,
    with_entropy: bool,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let enc_dim = 4;
    let (head, spec) = make_head(gaussian, recurrent, enc_dim)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let beta = if with_entropy { 0.05 } else { 0.0 };
    let steps = if recurrent { 3 } else { 1 };
    let mut worst = 0.0f64;
    let mut probe = 0usize;
    let mut attempts = 0usize;
    while probe < probes {
        attempts += 1;
        if attempts > probes * 20 {
            return Err(Error::numerical(
                "could not find enough clamp-free probes for the policy gradient check",
            ));
        }
        let mut params = init_params(&spec, seed.wrapping_add(attempts as u64 * 7 + 1))?;
        let inputs: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(&mut rng, enc_dim, 1.0)).collect();
        let run = head.net.forward_seq(&params, &inputs)?;
        let dists: Vec<HeadDist> = run
            .outputs
            .iter()
            .map(|raw| head.dist(raw))
            .collect::<Result<_>>()?;
        if dists.iter().any(sigma_near_clamp) {
            continue;
        }
        let elites_per_step: Vec<EliteSet> = dists
            .iter()
            .map(|d| fixed_elites(&head, std::slice::from_ref(d), &mut rng, 3))
            .collect();

        params.zero_grads();
        for t in 0..steps {
            let _ = t;
        }
        let mut upstreams = Vec::with_capacity(steps);
        for (t, elites) in elites_per_step.iter().enumerate() {
            let upstream = if with_entropy {
                proposal_upstream(&head, &dists[t], elites, 0, beta)?
            } else {
                elite_logprob_upstream(&head, &dists[t], elites, 0)?
            };
            upstreams.push(upstream);
        }
        head.net.backward_seq(&mut params, &run, &upstreams)?;

        let mut objective = |p: &ParamStore| -> Result<f64> {
            if with_entropy {
                proposal_objective(&head, p, &inputs, &elites_per_step, 0, beta)
            } else {
                elite_loglik(&head, p, &inputs, &elites_per_step, 0)
            }
        };
        let numeric = finite_diff_params(&mut params, &mut objective, FD_STEP)?;
        worst = worst.max(max_gradient_error(&params, &numeric));
        probe += 1;
    }
    Ok(GradCheckReport {
        probes,
        worst_error: worst,
    })
}

/// The centralized-gradient baseline path ∇log π(u|τ)·q_tot.
pub fn check_centralized_gradient(probes: usize, seed: u64) -> Result<GradCheckReport> {
    let spec = NetSpec::mlp(vec![1, 3], Activation::Identity);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for probe in 0..probes {
        let head = PolicyHead::new(HeadKind::Categorical(3), Network::new(spec.clone())?)?;
        let mut pairs = vec![PolicyPair::new(
            head,
            init_params(&spec, seed.wrapping_add(probe as u64 + 3))?,
            init_params(&spec, seed.wrapping_add(probe as u64 + 4))?,
            0.0,
        )];
        let q_tot = rng.gen_range(-3.0..3.0);
        let action = rng.gen_range(0..3usize);
        let joint: JointAction = vec![AgentAction::Discrete(action)];
        let inputs = vec![vec![1.0]];
        crate::policy::centralized_policy_gradient(&mut pairs, &inputs, &joint, q_tot)?;
        let head_ref = &pairs[0].head;
        let mut objective = |p: &ParamStore| -> Result<f64> {
            let (raw, _) = head_ref.net.forward(p, &[1.0], None)?;
            let dist = head_ref.dist(&raw)?;
            Ok(q_tot * dist.log_prob(&AgentAction::Discrete(action))?)
        };
        let mut main = pairs[0].main.clone();
        let numeric = finite_diff_params(&mut main, &mut objective, FD_STEP)?;
        worst = worst.max(max_gradient_error(&pairs[0].main, &numeric));
    }
    Ok(GradCheckReport {
        probes,
        worst_error: worst,
    })
}

struct CriticFixture {
    critics: Vec<AgentCritic>,
    critic_params: Vec<ParamStore>,
    mixer: Mixer,
    mixer_params: MixerParams,
    encodings: Vec<Vec<Vec<f64>>>,
    joint_actions: Vec<JointAction>,
    states: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

fn critic_fixture(
    mixer_mode: MixerMode,
    continuous: bool,
    recurrent: bool,
    seed: u64,
    rng: &mut ChaCha12Rng,
) -> Result<CriticFixture> {
    let k = 2;
    let enc_dim = 3;
    let state_dim = 2;
    let steps = if recurrent { 3 } else { 1 };
    let (kind, in_dim, out_dim) = if continuous {
        (CriticKind::Continuous(2), enc_dim + 2, 1)
    } else {
        (CriticKind::Discrete(3), enc_dim, 3)
    };
    let spec = if recurrent {
        NetSpec::recurrent(vec![in_dim, 5, out_dim], Activation::Tanh, 4)
    } else {
        NetSpec::mlp(vec![in_dim, 5, out_dim], Activation::Tanh)
    };
    let critics: Vec<AgentCritic> = (0..k)
        .map(|_| AgentCritic::new(kind, Network::new(spec.clone()).unwrap()).unwrap())
        .collect();
    let critic_params: Vec<ParamStore> = (0..k)
        .map(|a| init_params(&spec, seed.wrapping_add(a as u64 + 11)).unwrap())
        .collect();
    let mixer = match mixer_mode {
        MixerMode::Ncd => Mixer::ncd(k, state_dim, 6, 8)?,
        MixerMode::Linear => Mixer::linear(k, state_dim, 8)?,
    };
    let mixer_params = mixer.init_params(seed.wrapping_add(97))?;
    let encodings: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| (0..steps).map(|_| rand_vec(rng, enc_dim, 1.0)).collect())
        .collect();
    let joint_actions: Vec<JointAction> = (0..steps)
        .map(|_| {
            (0..k)
                .map(|_| {
                    if continuous {
                        AgentAction::Continuous(rand_vec(rng, 2, 1.0))
                    } else {
                        AgentAction::Discrete(rng.gen_range(0..3))
                    }
                })
                .collect()
        })
        .collect();
    let states: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(rng, state_dim, 1.0)).collect();
    let targets: Vec<f64> = (0..steps).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Ok(CriticFixture {
        critics,
        critic_params,
        mixer,
        mixer_params,
        encodings,
        joint_actions,
        states,
        targets,
    })
}

/// Pure (gradient-free) episode squared error, the objective for critic FD.
fn critic_sq_err(fix: &CriticFixture) -> Result<f64> {
    let k = fix.critics.len();
    let steps = fix.targets.len();
    let mut runs = Vec::with_capacity(k);
    for a in 0..k {
        let inputs: Vec<Vec<f64>> = (0..steps)
            .map(|t| fix.critics[a].step_input(&fix.encodings[a][t], &fix.joint_actions[t][a]))
            .collect();
        runs.push(fix.critics[a].net.forward_seq(&fix.critic_params[a], &inputs)?);
    }
    let mut total = 0.0;
    for t in 0..steps {
        let locals: Vec<f64> = (0..k)
            .map(|a| match fix.joint_actions[t][a] {
                AgentAction::Discrete(u) => runs[a].outputs[t][u],
                AgentAction::Continuous(_) => runs[a].outputs[t][0],
            })
            .collect();
        let q_tot = fix.mixer.mix(&fix.mixer_params, &locals, &fix.states[t])?;
        let r = q_tot - fix.targets[t];
        total += r * r;
    }
    Ok(total)
}

/// Whether any absolute-value mixing weight sits within reach of the kink.
fn mixer_near_kink(fix: &CriticFixture) -> Result<bool> {
    for state in &fix.states {
        if fix.mixer.min_abs_hyper_weight(&fix.mixer_params, state)? < 1e-3 {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Critic squared-error loss gradients (through the mixer into ψ and every
/// φ^a) against central differences.
pub fn check_critic_loss_gradients(
    mixer_mode: MixerMode,
    continuous: bool,
    recurrent: bool,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = 0usize;
    let mut attempts = 0usize;
    while probe < probes {
        attempts += 1;
        if attempts > probes * 20 {
            return Err(Error::numerical(
                "could not find enough kink-free probes for the critic gradient check",
            ));
        }
        let mut fix = critic_fixture(
            mixer_mode,
            continuous,
            recurrent,
            seed.wrapping_add(attempts as u64 * 13),
            &mut rng,
        )?;
        if mixer_near_kink(&fix)? {
            continue;
        }
        // Analytic pass over the whole episode.
        let steps = fix.targets.len();
        let episode = crate::critic::CriticEpisode {
            per_agent_encodings: &fix.encodings,
            joint_actions: &fix.joint_actions,
            mixer_states: &fix.states,
            targets: &fix.targets,
        };
        let mut critic_params = fix.critic_params.clone();
        let mut mixer_params = fix.mixer_params.clone();
        crate::critic::critic_loss_episode(
            &fix.critics,
            &mut critic_params,
            &fix.mixer,
            &mut mixer_params,
            &episode,
            1.0,
        )?;
        let _ = steps;

        // FD over one agent's critic parameters.
        {
            let mut store = fix.critic_params[0].clone();
            let critics = &fix.critics;
            let base = CriticFixture {
                critics: critics.clone(),
                critic_params: fix.critic_params.clone(),
                mixer: fix.mixer.clone(),
                mixer_params: fix.mixer_params.clone(),
                encodings: fix.encodings.clone(),
                joint_actions: fix.joint_actions.clone(),
                states: fix.states.clone(),
                targets: fix.targets.clone(),
            };
            let mut objective = |p: &ParamStore| -> Result<f64> {
                let mut probe_fix = CriticFixture {
                    critic_params: base.critic_params.clone(),
                    ..CriticFixture {
                        critics: base.critics.clone(),
                        critic_params: base.critic_params.clone(),
                        mixer: base.mixer.clone(),
                        mixer_params: base.mixer_params.clone(),
                        encodings: base.encodings.clone(),
                        joint_actions: base.joint_actions.clone(),
                        states: base.states.clone(),
                        targets: base.targets.clone(),
                    }
                };
                probe_fix.critic_params[0] = p.clone();
                critic_sq_err(&probe_fix)
            };
            let numeric = finite_diff_params(&mut store, &mut objective, FD_STEP)?;
            worst = worst.max(max_gradient_error(&critic_params[0], &numeric));
        }
        // FD over every mixer hypernet store.
        for name in fix.mixer_params.stores.keys().cloned().collect::<Vec<_>>() {
            let mut store = fix.mixer_params.stores[&name].clone();
            let base_params = fix.mixer_params.clone();
            let critics = fix.critics.clone();
            let critic_params_fd = fix.critic_params.clone();
            let mixer = fix.mixer.clone();
            let encodings = fix.encodings.clone();
            let joint_actions = fix.joint_actions.clone();
            let states = fix.states.clone();
            let targets = fix.targets.clone();
            let mut objective = |p: &ParamStore| -> Result<f64> {
                let mut mp = base_params.clone();
                mp.stores.insert(name.clone(), p.clone());
                let probe_fix = CriticFixture {
                    critics: critics.clone(),
                    critic_params: critic_params_fd.clone(),
                    mixer: mixer.clone(),
                    mixer_params: mp,
                    encodings: encodings.clone(),
                    joint_actions: joint_actions.clone(),
                    states: states.clone(),
                    targets: targets.clone(),
                };
                critic_sq_err(&probe_fix)
            };
            let numeric = finite_diff_params(&mut store, &mut objective, FD_STEP)?;
            worst = worst.max(max_gradient_error(&mixer_params.stores[&name], &numeric));
        }
        let _ = &mut fix;
        probe += 1;
    }
    Ok(GradCheckReport {
        probes,
        worst_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn network_gradients_match_fd() {
        for (recurrent, act) in [
            (false, Activation::Tanh),
            (false, Activation::Elu),
            (true, Activation::Tanh),
        ] {
            let report = check_network_gradients(recurrent, act, 8, 100).unwrap();
            assert!(
                report.passes(1e-4),
                "recurrent={recurrent} act={act:?}: {}",
                report.worst_error
            );
        }
    }

    #[test]
    fn policy_gradients_match_fd() {
        for (gaussian, recurrent, entropy) in [
            (false, false, false),
            (false, false, true),
            (true, false, false),
            (true, false, true),
            (false, true, false),
            (true, true, true),
        ] {
            let report = check_policy_gradients(gaussian, recurrent, entropy, 6, 200).unwrap();
            assert!(
                report.passes(1e-4),
                "gaussian={gaussian} recurrent={recurrent} entropy={entropy}: {}",
                report.worst_error
            );
        }
    }

    #[test]
    fn centralized_gradient_matches_fd() {
        let report = check_centralized_gradient(10, 300).unwrap();
        assert!(report.passes(1e-4), "{}", report.worst_error);
    }

    #[test]
    fn critic_loss_gradients_match_fd() {
        for (mode, continuous, recurrent) in [
            (MixerMode::Ncd, false, false),
            (MixerMode::Ncd, true, false),
            (MixerMode::Linear, false, false),
            (MixerMode::Ncd, true, true),
            (MixerMode::Linear, true, false),
            (MixerMode::Ncd, false, true),
        ] {
            let report =
                check_critic_loss_gradients(mode, continuous, recurrent, 4, 400).unwrap();
            assert!(
                report.passes(1e-4),
                "mode={mode:?} continuous={continuous} recurrent={recurrent}: {}",
                report.worst_error
            );
        }
    }
}
