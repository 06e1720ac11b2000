//! Independent brute-force reference implementations backing the test and
//! verify suites: dynamic-programming policy evaluation, exhaustive
//! argmax-consistency checks, quantile selection, finite-difference
//! gradients, and the percentile-greedy vs. centralized-gradient
//! desk-scale comparison.
//!
//! None of these share numerical kernels with the code they check; where a
//! harness composes module kernels on purpose (the exact-expectation return
//! sweep), the comparison side is computed independently.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::approx::{adam_update, init_params, Activation, NetSpec, Network, OptimState, ParamStore};
use crate::critic::{td_delta, trace_coeff, Mixer, MixerParams, TraceSpec};
use crate::envs::{joint_action_from_index, JointAction, MatrixGameConfig, TabularMdpConfig};
use crate::error::{Error, Result};
use crate::policy::{
    centralized_policy_gradient, main_policy_gradient, mcem_elites, proposal_policy_gradient,
    HeadKind, PolicyHead, PolicyPair,
};
use crate::tensor::Tensor;

/// Result of exact policy evaluation on a tabular MDP.
#[derive(Debug, Clone)]
pub struct DpResult {
    /// `q[s][j]` indexed by state and joint action.
    pub q: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

/// Exact Q^π by fixed-point iteration of the Bellman evaluation operator.
pub fn dp_policy_eval(
    mdp: &TabularMdpConfig,
    policy: &[Vec<f64>],
    tol: f64,
) -> Result<DpResult> {
    mdp.validate()?;
    let num_joint = mdp.num_joint_actions();
    if policy.len() != mdp.num_states {
        return Err(Error::config("policy table must cover every state"));
    }
    for (s, row) in policy.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.len() != num_joint || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "policy row {s} is not a distribution over joint actions"
            )));
        }
    }
    let mut q = vec![vec![0.0; num_joint]; mdp.num_states];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while residual > tol {
        iterations += 1;
        if iterations > 200_000 {
            return Err(Error::numerical("policy evaluation failed to converge"));
        }
        residual = 0.0;
        let mut next_q = vec![vec![0.0; num_joint]; mdp.num_states];
        for s in 0..mdp.num_states {
            for j in 0..num_joint {
                let mut value = mdp.rewards[s][j];
                if !mdp.terminal_states.contains(&s) {
                    for sp in 0..mdp.num_states {
                        let p = mdp.transitions[s][j][sp];
                        if p == 0.0 {
                            continue;
                        }
                        let mut ev = 0.0;
                        for jp in 0..num_joint {
                            ev += policy[sp][jp] * q[sp][jp];
                        }
                        value += mdp.gamma * p * ev;
                    }
                }
                residual = residual.max((value - q[s][j]).abs());
                next_q[s][j] = value;
            }
        }
        q = next_q;
    }
    Ok(DpResult {
        q,
        iterations,
        residual,
    })
}

/// Outcome of one exhaustive argmax-consistency check.
#[derive(Debug, Clone)]
pub struct IgmOutcome {
    pub pass: bool,
    /// On failure: (joint argmax of q_tot, tuple of per-agent argmaxes).
    pub witness: Option<(Vec<usize>, Vec<usize>)>,
}

/// Enumerates every joint action and checks that the global argmax of the
/// mixed value equals the tuple of per-agent argmaxes (ties resolved to the
/// lowest index on both sides).
pub fn igm_check(
    mixer: &Mixer,
    params: &MixerParams,
    local_q_tables: &[Vec<f64>],
    state: &[f64],
) -> Result<IgmOutcome> {
    let k = local_q_tables.len();
    let num_actions = local_q_tables
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::usage("need at least one agent table"))?;
    let total = num_actions.checked_pow(k as u32).unwrap_or(usize::MAX);
    if total > 1_000_000 {
        return Err(Error::usage(
            "joint action space too large to enumerate; use a sampled check",
        ));
    }
    let per_agent_argmax: Vec<usize> = local_q_tables
        .iter()
        .map(|table| {
            let mut best = 0;
            for (i, &v) in table.iter().enumerate() {
                if v > table[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let mut best_joint = vec![0usize; k];
    let mut best_value = f64::NEG_INFINITY;
    for idx in 0..total {
        let digits = joint_action_from_index(idx, k, num_actions);
        let locals: Vec<f64> = digits
            .iter()
            .enumerate()
            .map(|(a, &u)| local_q_tables[a][u])
            .collect();
        let q_tot = mixer.mix(params, &locals, state)?;
        if q_tot > best_value {
            best_value = q_tot;
            best_joint = digits;
        }
    }
    let pass = best_joint == per_agent_argmax;
    Ok(IgmOutcome {
        pass,
        witness: if pass {
            None
        } else {
            Some((best_joint, per_agent_argmax))
        },
    })
}

/// Indices of the top max(1, floor(N(1−ρ))) values, sorted descending with
/// earlier indices winning ties.
pub fn quantile_oracle(values: &[f64], rho: f64) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::usage("quantile oracle needs a nonempty list"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    // Same count rule (and float nudge) as the policy module's elite law.
    let keep = ((values.len() as f64 * (1.0 - rho) + 1e-9).floor() as usize).max(1);
    order.truncate(keep);
    Ok(order)
}

/// Central finite differences of a scalar objective over a flat vector.
pub fn finite_diff(
    x: &[f64],
    objective: &mut dyn FnMut(&[f64]) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = objective(&probe);
        probe[i] = x[i] - h;
        let minus = objective(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Central finite differences coordinate-by-coordinate over every tensor of
/// a parameter store. The store is restored on return.
pub fn finite_diff_params(
    params: &mut ParamStore,
    objective: &mut dyn FnMut(&ParamStore) -> Result<f64>,
    h: f64,
) -> Result<BTreeMap<String, Tensor>> {
    let names: Vec<String> = params.names().cloned().collect();
    let mut grads = BTreeMap::new();
    for name in names {
        let len = params.get(&name).len();
        let mut grad = Tensor::zeros(params.get(&name).shape());
        for i in 0..len {
            let original = params.get(&name).data()[i];
            params.get_mut(&name).data_mut()[i] = original + h;
            let plus = objective(params)?;
            params.get_mut(&name).data_mut()[i] = original - h;
            let minus = objective(params)?;
            params.get_mut(&name).data_mut()[i] = original;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grads.insert(name, grad);
    }
    Ok(grads)
}

/// Comparison metric for gradient checks: |a−n| / max(|a|, |n|, 1e-3).
/// The floor keeps finite-difference noise on near-zero coordinates from
/// registering as relative error.
pub fn gradient_check_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / scale
}

/// Worst gradient-check error across all coordinates of a store.
pub fn max_gradient_error(
    analytic: &ParamStore,
    numeric: &BTreeMap<String, Tensor>,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, tensor) in numeric {
        let a = analytic.grad(name);
        for (av, nv) in a.data().iter().zip(tensor.data()) {
            worst = worst.max(gradient_check_error(*av, *nv));
        }
    }
    worst
}

/// Exact application of the n-step λ-return operator on a tabular MDP:
/// all expectations (behavior trajectories and the resampled next action)
/// are enumerated instead of sampled. Coefficients and residuals come from
/// the module kernels under test; the expectation plumbing is this
/// function's own.
pub fn expected_trace_sweep(
    mdp: &TabularMdpConfig,
    pi: &[Vec<f64>],
    beta: &[Vec<f64>],
    spec: &TraceSpec,
    q: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let num_joint = mdp.num_joint_actions();
    let states = mdp.num_states;
    // Expected Sarsa-form residual per (s, j): the resampled next action is
    // averaged exactly under π.
    let mut delta = vec![vec![0.0; num_joint]; states];
    for s in 0..states {
        for j in 0..num_joint {
            let mut bootstrap = 0.0;
            for sp in 0..states {
                let p = mdp.transitions[s][j][sp];
                if p == 0.0 {
                    continue;
                }
                let mut ev = 0.0;
                for jp in 0..num_joint {
                    ev += pi[sp][jp] * q[sp][jp];
                }
                bootstrap += p * ev;
            }
            delta[s][j] = td_delta(q[s][j], mdp.rewards[s][j], bootstrap, false, spec.gamma);
        }
    }
    // Backward recursion over the window depth.
    let mut g = delta.clone();
    for _ in 1..spec.horizon {
        let mut next = vec![vec![0.0; num_joint]; states];
        for s in 0..states {
            for j in 0..num_joint {
                let mut carry = 0.0;
                for sp in 0..states {
                    let p = mdp.transitions[s][j][sp];
                    if p == 0.0 {
                        continue;
                    }
                    let mut inner = 0.0;
                    for jp in 0..num_joint {
                        let b = beta[sp][jp];
                        if b == 0.0 {
                            continue;
                        }
                        let (c, _) = trace_coeff(
                            spec,
                            pi[sp][jp].max(f64::MIN_POSITIVE).ln(),
                            b.max(f64::MIN_POSITIVE).ln(),
                            pi[sp][jp],
                        )?;
                        inner += b * c * g[sp][jp];
                    }
                    carry += p * inner;
                }
                next[s][j] = delta[s][j] + spec.gamma * carry;
            }
        }
        g = next;
    }
    let mut out = vec![vec![0.0; num_joint]; states];
    for s in 0..states {
        for j in 0..num_joint {
            out[s][j] = q[s][j] + g[s][j];
        }
    }
    Ok(out)
}

/// Per-seed outcome of the percentile-greedy vs. centralized-gradient
/// comparison on a matrix game.
#[derive(Debug, Clone)]
pub struct Theorem51Outcome {
    pub mcem_payoffs: Vec<f64>,
    pub centralized_payoffs: Vec<f64>,
    /// Seeds where the percentile-greedy policy's exact expected payoff is
    /// at least the centralized-gradient policy's.
    pub wins: usize,
}

fn tabular_pairs(game: &MatrixGameConfig, seed: u64, entropy_coeff: f64) -> Result<Vec<PolicyPair>> {
    let spec = NetSpec::mlp(vec![1, game.num_actions], Activation::Identity);
    (0..game.num_agents)
        .map(|a| {
            let head = PolicyHead::new(
                HeadKind::Categorical(game.num_actions),
                Network::new(spec.clone())?,
            )?;
            Ok(PolicyPair::new(
                head,
                init_params(&spec, seed.wrapping_add(a as u64 * 31 + 1))?,
                init_params(&spec, seed.wrapping_add(a as u64 * 31 + 17))?,
                entropy_coeff,
            ))
        })
        .collect()
}

/// Per-agent probability vector computed straight from the logits with an
/// inline softmax (independent of the policy module's kernels).
fn probs_from_logits(pair: &PolicyPair, store: &ParamStore) -> Result<Vec<f64>> {
    let (raw, _) = pair.head.net.forward(store, &[1.0], None)?;
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Exact expected payoff Σ_u Π_a π^a(u^a) · payoff(u).
pub fn exact_expected_payoff(game: &MatrixGameConfig, per_agent_probs: &[Vec<f64>]) -> f64 {
    let total = game.num_actions.pow(game.num_agents as u32);
    let mut expectation = 0.0;
    for idx in 0..total {
        let digits = joint_action_from_index(idx, game.num_agents, game.num_actions);
        let mut weight = 1.0;
        for (a, &u) in digits.iter().enumerate() {
            weight *= per_agent_probs[a][u];
        }
        expectation += weight * game.payoffs[idx];
    }
    expectation
}

/// Trains (a) percentile-greedy policies via elite updates and (b)
/// centralized-gradient policies with matched sampling budgets, on the exact
/// payoff as the joint value, and reports each method's exact expected
/// payoff per seed.
pub fn theorem_51_experiment(
    game: &MatrixGameConfig,
    seeds: &[u64],
    iters: usize,
) -> Result<Theorem51Outcome> {
    game.validate()?;
    let num_samples = 10;
    let rho = 0.8;
    let lr = 0.05;
    let mut mcem_payoffs = Vec::with_capacity(seeds.len());
    let mut centralized_payoffs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut mcem = tabular_pairs(game, seed, 0.03)?;
        let mut cent = tabular_pairs(game, seed.wrapping_add(5000), 0.0)?;
        let mut mcem_main_opt: Vec<OptimState> =
            (0..game.num_agents).map(|_| OptimState::new(lr)).collect();
        let mut mcem_prop_opt: Vec<OptimState> =
            (0..game.num_agents).map(|_| OptimState::new(lr)).collect();
        let mut cent_opt: Vec<OptimState> =
            (0..game.num_agents).map(|_| OptimState::new(lr)).collect();
        let inputs: Vec<Vec<f64>> = vec![vec![1.0]; game.num_agents];

        for _ in 0..iters {
            // Percentile-greedy update: sample from proposals, rank by the
            // exact payoff, reinforce the elite log-likelihoods.
            let dists: Vec<_> = mcem
                .iter()
                .map(|p| {
                    let (raw, _) = p.head.net.forward(&p.proposal, &[1.0], None)?;
                    p.head.dist(&raw)
                })
                .collect::<Result<_>>()?;
            let mut q_eval = |joint: &JointAction| -> Result<f64> {
                let digits: Vec<usize> = joint.iter().map(|a| a.discrete_index()).collect();
                Ok(game.payoff(&digits))
            };
            let elites = mcem_elites(&dists, &mut q_eval, num_samples, rho, &mut rng)?;
            main_policy_gradient(&mut mcem, &inputs, &elites)?;
            proposal_policy_gradient(&mut mcem, &inputs, &elites)?;
            for (a, pair) in mcem.iter_mut().enumerate() {
                pair.main.scale_grads(-1.0);
                adam_update(&mut pair.main, &mut mcem_main_opt[a])?;
                pair.proposal.scale_grads(-1.0);
                adam_update(&mut pair.proposal, &mut mcem_prop_opt[a])?;
            }

            // Centralized-gradient update on the same sampling budget.
            let cent_dists: Vec<_> = cent
                .iter()
                .map(|p| {
                    let (raw, _) = p.head.net.forward(&p.main, &[1.0], None)?;
                    p.head.dist(&raw)
                })
                .collect::<Result<_>>()?;
            for _ in 0..num_samples {
                let joint: JointAction = cent_dists
                    .iter()
                    .map(|d| d.sample(&mut rng).0)
                    .collect();
                let digits: Vec<usize> = joint.iter().map(|a| a.discrete_index()).collect();
                let payoff = game.payoff(&digits);
                centralized_policy_gradient(&mut cent, &inputs, &joint, payoff)?;
            }
            for (a, pair) in cent.iter_mut().enumerate() {
                pair.main.scale_grads(-1.0 / num_samples as f64);
                adam_update(&mut pair.main, &mut cent_opt[a])?;
            }
        }

        let mcem_probs: Vec<Vec<f64>> = mcem
            .iter()
            .map(|p| probs_from_logits(p, &p.main))
            .collect::<Result<_>>()?;
        let cent_probs: Vec<Vec<f64>> = cent
            .iter()
            .map(|p| probs_from_logits(p, &p.main))
            .collect::<Result<_>>()?;
        mcem_payoffs.push(exact_expected_payoff(game, &mcem_probs));
        centralized_payoffs.push(exact_expected_payoff(game, &cent_probs));
    }
    let wins = mcem_payoffs
        .iter()
        .zip(&centralized_payoffs)
        .filter(|(m, c)| m >= c)
        .count();
    Ok(Theorem51Outcome {
        mcem_payoffs,
        centralized_payoffs,
        wins,
    })
}

/// Uniform joint policy table for a tabular MDP.
pub fn uniform_joint_policy(mdp: &TabularMdpConfig) -> Vec<Vec<f64>> {
    let j = mdp.num_joint_actions();
    vec![vec![1.0 / j as f64; j]; mdp.num_states]
}

/// Random per-agent product policy expressed as a joint table.
pub fn random_product_policy(mdp: &TabularMdpConfig, rng: &mut ChaCha12Rng) -> Vec<Vec<f64>> {
    let mut per_agent = vec![vec![vec![0.0; mdp.num_actions]; mdp.num_agents]; mdp.num_states];
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_agents {
            let raw: Vec<f64> = (0..mdp.num_actions).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for (u, &v) in raw.iter().enumerate() {
                per_agent[s][a][u] = v / total;
            }
        }
    }
    let j = mdp.num_joint_actions();
    let mut joint = vec![vec![0.0; j]; mdp.num_states];
    for s in 0..mdp.num_states {
        for idx in 0..j {
            let digits = joint_action_from_index(idx, mdp.num_agents, mdp.num_actions);
            joint[s][idx] = digits
                .iter()
                .enumerate()
                .map(|(a, &u)| per_agent[s][a][u])
                .product();
        }
    }
    joint
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::AgentAction;

    #[test]
    fn dp_zero_rewards_give_zero_q() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut mdp = TabularMdpConfig::random(4, 2, 2, 0.9, &mut rng);
        for row in mdp.rewards.iter_mut() {
            row.iter_mut().for_each(|r| *r = 0.0);
        }
        let policy = uniform_joint_policy(&mdp);
        let result = dp_policy_eval(&mdp, &policy, 1e-12).unwrap();
        for row in result.q {
            for v in row {
                assert!(v.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dp_single_state_constant_reward_is_a_geometric_series() {
        let mdp = TabularMdpConfig {
            num_states: 1,
            num_agents: 2,
            num_actions: 2,
            transitions: vec![vec![vec![1.0]; 4]],
            rewards: vec![vec![1.0; 4]],
            gamma: 0.9,
            step_limit: 10,
            terminal_states: vec![],
        };
        let policy = uniform_joint_policy(&mdp);
        let result = dp_policy_eval(&mdp, &policy, 1e-12).unwrap();
        for v in &result.q[0] {
            assert!((v - 10.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn dp_residual_is_contractive() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mdp = TabularMdpConfig::random(5, 1, 3, 0.9, &mut rng);
        let policy = uniform_joint_policy(&mdp);
        // Track residuals across manual sweeps.
        let j = mdp.num_joint_actions();
        let mut q = vec![vec![0.0; j]; mdp.num_states];
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let mut next = vec![vec![0.0; j]; mdp.num_states];
            let mut residual = 0.0f64;
            for s in 0..mdp.num_states {
                for a in 0..j {
                    let mut value = mdp.rewards[s][a];
                    for sp in 0..mdp.num_states {
                        let mut ev = 0.0;
                        for ap in 0..j {
                            ev += policy[sp][ap] * q[sp][ap];
                        }
                        value += mdp.gamma * mdp.transitions[s][a][sp] * ev;
                    }
                    residual = residual.max((value - q[s][a]).abs());
                    next[s][a] = value;
                }
            }
            assert!(residual <= last * (1.0 + 1e-12) || residual < 1e-14);
            last = residual;
            q = next;
        }
    }

    #[test]
    fn dp_matches_monte_carlo_rollouts() {
        use crate::envs::{Env, TabularMdp};
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mdp_cfg = TabularMdpConfig::random(5, 1, 2, 0.9, &mut rng);
        let policy = uniform_joint_policy(&mdp_cfg);
        let dp = dp_policy_eval(&mdp_cfg, &policy, 1e-12).unwrap();

        // Monte-Carlo estimate of Q(0, 0): start in state 0, take action 0,
        // then follow the uniform policy with a γ-truncated horizon.
        let mut env = TabularMdp::new(mdp_cfg.clone()).unwrap();
        let episodes = 300_000;
        let horizon = 150; // γ^150 ≈ 1e-7
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..episodes {
            env.reset(&mut rng);
            let mut ret = 0.0;
            let mut discount = 1.0;
            for t in 0..horizon {
                let action = if t == 0 {
                    0
                } else {
                    rng.gen_range(0..mdp_cfg.num_actions)
                };
                let out = env
                    .step(&vec![AgentAction::Discrete(action)], &mut rng)
                    .unwrap();
                ret += discount * out.reward;
                discount *= mdp_cfg.gamma;
            }
            sum += ret;
            sum_sq += ret * ret;
        }
        let mean = sum / episodes as f64;
        let var = (sum_sq / episodes as f64 - mean * mean).max(0.0);
        let se = (var / episodes as f64).sqrt();
        let diff = (mean - dp.q[0][0]).abs();
        assert!(diff < 3.0 * se + 1e-6, "diff {diff}, 3se {}", 3.0 * se);
    }

    #[test]
    fn quantile_oracle_examples() {
        assert_eq!(quantile_oracle(&[3.0, 1.0, 2.0], 0.5).unwrap(), vec![0]);
        assert_eq!(
            quantile_oracle(&[5.0; 10], 0.8).unwrap(),
            vec![0, 1]
        );
        assert!(quantile_oracle(&[], 0.5).is_err());
    }

    #[test]
    fn igm_trivially_passes_for_one_agent() {
        let mixer = Mixer::ncd(1, 2, 4, 8).unwrap();
        let params = mixer.init_params(3).unwrap();
        let out = igm_check(&mixer, &params, &[vec![0.3, -0.5, 2.0]], &[0.1, 0.2]).unwrap();
        assert!(out.pass);
    }

    #[test]
    fn igm_passes_for_linear_mixers_with_positive_weights() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for seed in 0..25 {
            let mixer = Mixer::linear(2, 2, 8).unwrap();
            let params = mixer.init_params(seed).unwrap();
            let tables: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let state = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let out = igm_check(&mixer, &params, &tables, &state).unwrap();
            assert!(out.pass, "witness: {:?}", out.witness);
        }
    }

    #[test]
    fn igm_refuses_oversized_spaces() {
        let mixer = Mixer::ncd(8, 2, 4, 8).unwrap();
        let params = mixer.init_params(1).unwrap();
        let tables = vec![vec![0.0; 8]; 8]; // 8^8 = 16.7M joint actions
        assert!(igm_check(&mixer, &params, &tables, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let x = vec![1.0, -2.0, 0.5];
        let mut obj = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>();
        let grad = finite_diff(&x, &mut obj, 1e-5);
        for (g, xv) in grad.iter().zip(&x) {
            assert!((g - 2.0 * xv).abs() < 1e-8);
        }
        let mut constant = |_: &[f64]| 7.0;
        for g in finite_diff(&x, &mut constant, 1e-5) {
            assert!(g.abs() < 1e-8);
        }
    }

    #[test]
    fn degenerate_game_gives_equal_payoffs() {
        let game = MatrixGameConfig::new(2, 2, vec![3.0; 4]).unwrap();
        let outcome = theorem_51_experiment(&game, &[1, 2], 25).unwrap();
        for (m, c) in outcome.mcem_payoffs.iter().zip(&outcome.centralized_payoffs) {
            assert!((m - 3.0).abs() < 1e-9);
            assert!((c - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wide_elite_fraction_still_improves_on_a_unique_maximum_game() {
        // Nearly all samples become elites; the update degenerates toward
        // uniform reinforcement, and only the exclusion of the worst sample
        // pulls the policies anywhere. With a unique maximum that also
        // dominates marginally, that residual pull still lifts the expected
        // payoff above the uniform baseline.
        let game = MatrixGameConfig::new(2, 2, vec![1.0, 0.4, 0.4, 0.0]).unwrap();
        let uniform = 0.25 * (1.0 + 0.4 + 0.4 + 0.0);
        let mut pairs = tabular_pairs(&game, 11, 0.03).unwrap();
        // Uniform start: zero logits on both policies.
        for pair in pairs.iter_mut() {
            for store in [&mut pair.main, &mut pair.proposal] {
                let names: Vec<String> = store.names().cloned().collect();
                for n in names {
                    store.get_mut(&n).fill(0.0);
                }
            }
        }
        let inputs: Vec<Vec<f64>> = vec![vec![1.0]; 2];
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut main_opts: Vec<OptimState> = (0..2).map(|_| OptimState::new(0.05)).collect();
        let mut prop_opts: Vec<OptimState> = (0..2).map(|_| OptimState::new(0.05)).collect();
        for _ in 0..300 {
            let dists: Vec<_> = pairs
                .iter()
                .map(|p| {
                    let (raw, _) = p.head.net.forward(&p.proposal, &[1.0], None).unwrap();
                    p.head.dist(&raw).unwrap()
                })
                .collect();
            let mut q_eval = |joint: &JointAction| -> Result<f64> {
                let digits: Vec<usize> = joint.iter().map(|a| a.discrete_index()).collect();
                Ok(game.payoff(&digits))
            };
            // ρ = 0.05 keeps 9 of 10 samples as elites.
            let elites = mcem_elites(&dists, &mut q_eval, 10, 0.05, &mut rng).unwrap();
            main_policy_gradient(&mut pairs, &inputs, &elites).unwrap();
            proposal_policy_gradient(&mut pairs, &inputs, &elites).unwrap();
            for (a, pair) in pairs.iter_mut().enumerate() {
                pair.main.scale_grads(-1.0);
                adam_update(&mut pair.main, &mut main_opts[a]).unwrap();
                pair.proposal.scale_grads(-1.0);
                adam_update(&mut pair.proposal, &mut prop_opts[a]).unwrap();
            }
        }
        let probs: Vec<Vec<f64>> = pairs
            .iter()
            .map(|p| probs_from_logits(p, &p.main).unwrap())
            .collect();
        let expected = exact_expected_payoff(&game, &probs);
        assert!(
            expected >= uniform,
            "expected payoff {expected} below uniform {uniform}"
        );
    }
}
