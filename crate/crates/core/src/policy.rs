//! Stochastic per-agent policies and the multi-agent cross-entropy update.
//!
//! Each agent carries a main policy (the acting one) and an
//! entropy-regularized proposal policy used in the sampling phase. The
//! cross-entropy step draws a set of joint actions from the proposals,
//! ranks them by the mixed joint value, and reinforces the top quantile:
//! elite membership is all that enters the policy gradient, never the value
//! itself.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::approx::{Network, ParamStore};
use crate::envs::{AgentAction, JointAction};
use crate::error::{Error, Result};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.8378770664093453; // ln(2π)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Finite action set of the given size; the net emits one logit each.
    Categorical(usize),
    /// Diagonal Gaussian over the given dimension; the net emits means then
    /// pre-scale values mapped through a softplus into [σ_min, σ_max].
    Gaussian(usize),
}

/// A policy head: distribution family plus the backing network.
#[derive(Debug, Clone)]
pub struct PolicyHead {
    pub kind: HeadKind,
    pub net: Network,
}

/// Concrete distribution parameters at one history encoding.
#[derive(Debug, Clone)]
pub enum HeadDist {
    Categorical {
        probs: Vec<f64>,
    },
    Gaussian {
        mu: Vec<f64>,
        sigma: Vec<f64>,
        /// dσ/d(raw pre-scale output), zero where the clamp is active.
        dsigma: Vec<f64>,
    },
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PolicyHead {
    pub fn new(kind: HeadKind, net: Network) -> Result<Self> {
        let need = match kind {
            HeadKind::Categorical(n) => n,
            HeadKind::Gaussian(d) => 2 * d,
        };
        if net.output_dim() != need {
            return Err(Error::config(format!(
                "policy net outputs {} values, head needs {need}",
                net.output_dim()
            )));
        }
        Ok(PolicyHead { kind, net })
    }

    /// Interprets raw network outputs as distribution parameters.
    pub fn dist(&self, raw: &[f64]) -> Result<HeadDist> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite policy head outputs"));
        }
        match self.kind {
            HeadKind::Categorical(n) => {
                debug_assert_eq!(raw.len(), n);
                let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = raw.iter().map(|&l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                Ok(HeadDist::Categorical {
                    probs: exps.iter().map(|e| e / total).collect(),
                })
            }
            HeadKind::Gaussian(d) => {
                debug_assert_eq!(raw.len(), 2 * d);
                let mu = raw[..d].to_vec();
                let mut sigma = Vec::with_capacity(d);
                let mut dsigma = Vec::with_capacity(d);
                for &s in &raw[d..] {
                    let sp = softplus(s);
                    if sp <= SIGMA_MIN {
                        sigma.push(SIGMA_MIN);
                        dsigma.push(0.0);
                    } else if sp >= SIGMA_MAX {
                        sigma.push(SIGMA_MAX);
                        dsigma.push(0.0);
                    } else {
                        sigma.push(sp);
                        dsigma.push(sigmoid(s));
                    }
                }
                Ok(HeadDist::Gaussian { mu, sigma, dsigma })
            }
        }
    }

    /// Forward the backing net and interpret the outputs.
    pub fn forward_dist(
        &self,
        params: &ParamStore,
        input: &[f64],
        hidden: Option<&[f64]>,
    ) -> Result<(HeadDist, Option<Vec<f64>>)> {
        let (raw, new_hidden) = self.net.forward(params, input, hidden)?;
        Ok((self.dist(&raw)?, new_hidden))
    }

    /// d log π(action) / d raw-output. The score used by every policy
    /// gradient in this module.
    pub fn log_prob_grad(&self, dist: &HeadDist, action: &AgentAction) -> Result<Vec<f64>> {
        match (dist, action) {
            (HeadDist::Categorical { probs }, AgentAction::Discrete(a)) => {
                if *a >= probs.len() {
                    return Err(Error::usage(format!("action index {a} out of range")));
                }
                Ok(probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if i == *a { 1.0 - p } else { -p })
                    .collect())
            }
            (HeadDist::Gaussian { mu, sigma, dsigma }, AgentAction::Continuous(u)) => {
                let d = mu.len();
                let mut grad = vec![0.0; 2 * d];
                for i in 0..d {
                    let diff = u[i] - mu[i];
                    let var = sigma[i] * sigma[i];
                    grad[i] = diff / var;
                    let dlogp_dsigma = -1.0 / sigma[i] + diff * diff / (var * sigma[i]);
                    grad[d + i] = dlogp_dsigma * dsigma[i];
                }
                Ok(grad)
            }
            _ => Err(Error::usage("action kind does not match policy head")),
        }
    }

    /// d entropy / d raw-output.
    pub fn entropy_grad(&self, dist: &HeadDist) -> Vec<f64> {
        match dist {
            HeadDist::Categorical { probs } => {
                let h = dist.entropy();
                probs
                    .iter()
                    .map(|&p| {
                        if p > 0.0 {
                            -p * (p.ln() + h)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            HeadDist::Gaussian { sigma, dsigma, .. } => {
                let d = sigma.len();
                let mut grad = vec![0.0; 2 * d];
                for i in 0..d {
                    grad[d + i] = dsigma[i] / sigma[i];
                }
                grad
            }
        }
    }
}

impl HeadDist {
    /// Draws an action and returns its exact log-probability.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> (AgentAction, f64) {
        match self {
            HeadDist::Categorical { probs } => {
                let draw: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        chosen = i;
                        break;
                    }
                }
                let lp = self.log_prob(&AgentAction::Discrete(chosen)).unwrap();
                (AgentAction::Discrete(chosen), lp)
            }
            HeadDist::Gaussian { mu, sigma, .. } => {
                let u: Vec<f64> = mu
                    .iter()
                    .zip(sigma)
                    .map(|(m, s)| {
                        // Box-Muller from two uniform draws.
                        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        let z = (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos();
                        m + s * z
                    })
                    .collect();
                let action = AgentAction::Continuous(u);
                let lp = self.log_prob(&action).unwrap();
                (action, lp)
            }
        }
    }

    /// Exact log mass (categorical) or log density (Gaussian).
    pub fn log_prob(&self, action: &AgentAction) -> Result<f64> {
        match (self, action) {
            (HeadDist::Categorical { probs }, AgentAction::Discrete(a)) => {
                if *a >= probs.len() {
                    return Err(Error::usage(format!("action index {a} out of range")));
                }
                Ok(probs[*a].max(f64::MIN_POSITIVE).ln())
            }
            (HeadDist::Gaussian { mu, sigma, .. }, AgentAction::Continuous(u)) => {
                let mut lp = 0.0;
                for i in 0..mu.len() {
                    let diff = u[i] - mu[i];
                    lp += -sigma[i].ln() - 0.5 * LN_2PI - diff * diff / (2.0 * sigma[i] * sigma[i]);
                }
                Ok(lp)
            }
            _ => Err(Error::usage("action kind does not match distribution")),
        }
    }

    /// Shannon entropy (categorical) or differential entropy ½ln(2πeσ²)
    /// summed over dimensions (Gaussian).
    pub fn entropy(&self) -> f64 {
        match self {
            HeadDist::Categorical { probs } => probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum(),
            HeadDist::Gaussian { sigma, .. } => sigma
                .iter()
                .map(|s| 0.5 * (LN_2PI + 1.0 + 2.0 * s.ln()))
                .sum(),
        }
    }

    /// Deterministic action for greedy evaluation: argmax probability
    /// (lowest index on ties) or the Gaussian mean.
    pub fn greedy(&self) -> AgentAction {
        match self {
            HeadDist::Categorical { probs } => {
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                AgentAction::Discrete(best)
            }
            HeadDist::Gaussian { mu, .. } => AgentAction::Continuous(mu.clone()),
        }
    }
}

/// Main policy θ and proposal policy θ̂ of one agent. Identical
/// architecture, never-shared parameters.
#[derive(Debug, Clone)]
pub struct PolicyPair {
    pub head: PolicyHead,
    pub main: ParamStore,
    pub proposal: ParamStore,
    /// β of the proposal update's entropy regularizer.
    pub entropy_coeff: f64,
}

impl PolicyPair {
    pub fn new(head: PolicyHead, main: ParamStore, proposal: ParamStore, entropy_coeff: f64) -> Self {
        PolicyPair {
            head,
            main,
            proposal,
            entropy_coeff,
        }
    }
}

/// One sampled joint action with its evaluation.
#[derive(Debug, Clone)]
pub struct JointActionSample {
    pub actions: JointAction,
    pub per_agent_logprob: Vec<f64>,
    pub q_tot: f64,
    /// Position in the originating sample set (the tie-break key).
    pub sample_index: usize,
}

/// The elite subset of one sampling round.
#[derive(Debug, Clone)]
pub struct EliteSet {
    pub elites: Vec<JointActionSample>,
    pub quantile: f64,
}

/// Number of elites kept out of `n` samples at quantile `rho`:
/// max(1, floor(n·(1−ρ))). The nudge keeps products that are integers in
/// exact arithmetic (10·0.2) from flooring one short.
pub fn elite_count(n: usize, rho: f64) -> usize {
    ((n as f64 * (1.0 - rho) + 1e-9).floor() as usize).max(1)
}

/// The three cross-entropy phases for one record: draw `num_samples` joint
/// actions from the per-agent proposal distributions, evaluate each with
/// `q_evaluator`, and keep the top `(1-rho)` quantile (ties broken by
/// earlier sample index).
pub fn mcem_elites(
    proposal_dists: &[HeadDist],
    q_evaluator: &mut dyn FnMut(&JointAction) -> Result<f64>,
    num_samples: usize,
    rho: f64,
    rng: &mut ChaCha12Rng,
) -> Result<EliteSet> {
    if num_samples == 0 {
        return Err(Error::usage("at least one joint-action sample is required"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::usage("elite quantile must lie in (0, 1)"));
    }
    let mut samples = Vec::with_capacity(num_samples);
    for idx in 0..num_samples {
        let mut actions = Vec::with_capacity(proposal_dists.len());
        let mut lps = Vec::with_capacity(proposal_dists.len());
        for dist in proposal_dists {
            let (action, lp) = dist.sample(rng);
            actions.push(action);
            lps.push(lp);
        }
        let q_tot = q_evaluator(&actions)?;
        if !q_tot.is_finite() {
            return Err(Error::numerical("non-finite joint value during elite selection"));
        }
        samples.push(JointActionSample {
            actions,
            per_agent_logprob: lps,
            q_tot,
            sample_index: idx,
        });
    }
    // Stable sort keeps earlier sample indices first among equal values.
    samples.sort_by(|a, b| b.q_tot.partial_cmp(&a.q_tot).unwrap());
    samples.truncate(elite_count(num_samples, rho));
    Ok(EliteSet {
        elites: samples,
        quantile: rho,
    })
}

/// Upstream gradient on one agent's raw head outputs for the elite
/// log-likelihood sum Σ_{u∈I(τ)} log π^a(u^a | τ^a).
pub fn elite_logprob_upstream(
    head: &PolicyHead,
    dist: &HeadDist,
    elites: &EliteSet,
    agent: usize,
) -> Result<Vec<f64>> {
    let mut upstream = vec![0.0; head.net.output_dim()];
    for sample in &elites.elites {
        let g = head.log_prob_grad(dist, &sample.actions[agent])?;
        for (u, gv) in upstream.iter_mut().zip(g) {
            *u += gv;
        }
    }
    Ok(upstream)
}

/// Upstream gradient for the proposal update: the elite log-likelihood term
/// plus the β-weighted entropy term, counted once per elite occurrence as
/// the double sum prescribes.
pub fn proposal_upstream(
    head: &PolicyHead,
    dist: &HeadDist,
    elites: &EliteSet,
    agent: usize,
    entropy_coeff: f64,
) -> Result<Vec<f64>> {
    let mut upstream = elite_logprob_upstream(head, dist, elites, agent)?;
    let h_grad = head.entropy_grad(dist);
    let scale = entropy_coeff * elites.elites.len() as f64;
    for (u, h) in upstream.iter_mut().zip(h_grad) {
        *u += scale * h;
    }
    Ok(upstream)
}

/// Accumulates the main-policy ascent gradient for one record into each
/// agent's θ (feed-forward encodings; the trainer drives the recurrent path
/// with the same upstream builders).
pub fn main_policy_gradient(
    pairs: &mut [PolicyPair],
    inputs: &[Vec<f64>],
    elites: &EliteSet,
) -> Result<()> {
    if elites.elites.is_empty() {
        return Err(Error::usage("elite set is empty"));
    }
    for (agent, pair) in pairs.iter_mut().enumerate() {
        let (raw, _, ctx) = pair.head.net.forward_ctx(&pair.main, &inputs[agent], None)?;
        let dist = pair.head.dist(&raw)?;
        let upstream = elite_logprob_upstream(&pair.head, &dist, elites, agent)?;
        pair.head.net.backward(&mut pair.main, &ctx, &upstream, None)?;
    }
    Ok(())
}

/// Accumulates the proposal-policy ascent gradient (likelihood + β·entropy)
/// for one record into each agent's θ̂.
pub fn proposal_policy_gradient(
    pairs: &mut [PolicyPair],
    inputs: &[Vec<f64>],
    elites: &EliteSet,
) -> Result<()> {
    if elites.elites.is_empty() {
        return Err(Error::usage("elite set is empty"));
    }
    for (agent, pair) in pairs.iter_mut().enumerate() {
        let (raw, _, ctx) = pair
            .head
            .net
            .forward_ctx(&pair.proposal, &inputs[agent], None)?;
        let dist = pair.head.dist(&raw)?;
        let upstream =
            proposal_upstream(&pair.head, &dist, elites, agent, pair.entropy_coeff)?;
        pair.head
            .net
            .backward(&mut pair.proposal, &ctx, &upstream, None)?;
    }
    Ok(())
}

/// Accumulates the centralized policy gradient ∇log π^a(u^a|τ^a) · q_tot for
/// every agent — the baseline update form kept for the
/// percentile-greedy-vs-centralized comparison.
pub fn centralized_policy_gradient(
    pairs: &mut [PolicyPair],
    inputs: &[Vec<f64>],
    joint_action: &JointAction,
    q_tot: f64,
) -> Result<()> {
    for (agent, pair) in pairs.iter_mut().enumerate() {
        let (raw, _, ctx) = pair.head.net.forward_ctx(&pair.main, &inputs[agent], None)?;
        let dist = pair.head.dist(&raw)?;
        let mut upstream = pair.head.log_prob_grad(&dist, &joint_action[agent])?;
        upstream.iter_mut().for_each(|g| *g *= q_tot);
        pair.head.net.backward(&mut pair.main, &ctx, &upstream, None)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{init_params, Activation, NetSpec};
    use rand_chacha::rand_core::SeedableRng;

    fn categorical(probs: Vec<f64>) -> HeadDist {
        HeadDist::Categorical { probs }
    }

    #[test]
    fn degenerate_categorical_always_picks_its_atom() {
        let dist = categorical(vec![1.0, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (a, lp) = dist.sample(&mut rng);
            assert_eq!(a, AgentAction::Discrete(0));
            assert_eq!(lp, 0.0);
        }
    }

    #[test]
    fn uniform_categorical_log_prob_and_entropy() {
        let dist = categorical(vec![0.25; 4]);
        let lp = dist.log_prob(&AgentAction::Discrete(2)).unwrap();
        assert!((lp - (-1.3862943611198906)).abs() < 1e-12);
        assert!((dist.entropy() - 4.0_f64.ln()).abs() < 1e-12);
        assert!(dist.log_prob(&AgentAction::Discrete(4)).is_err());
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let dist = categorical(vec![0.25; 4]);
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let n = 1_000_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            if let (AgentAction::Discrete(a), _) = dist.sample(&mut rng) {
                counts[a] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.002, "frequency {f}");
        }
    }

    fn gaussian(mu: Vec<f64>, sigma: Vec<f64>) -> HeadDist {
        let d = sigma.len();
        HeadDist::Gaussian {
            mu,
            sigma,
            dsigma: vec![1.0; d],
        }
    }

    #[test]
    fn gaussian_closed_forms() {
        let dist = gaussian(vec![0.0], vec![1.0]);
        let lp = dist.log_prob(&AgentAction::Continuous(vec![0.0])).unwrap();
        assert!((lp - (-0.9189385332046727)).abs() < 1e-9);
        assert!((dist.entropy() - 1.4189385332046727).abs() < 1e-9);

        let dist = gaussian(vec![2.0], vec![0.5]);
        let lp = dist.log_prob(&AgentAction::Continuous(vec![2.0])).unwrap();
        let expect = (1.0 / (0.5 * (2.0 * std::f64::consts::PI).sqrt())).ln();
        assert!((lp - expect).abs() < 1e-12);
        assert!((lp - (-0.2257913526447274)).abs() < 1e-9);
    }

    #[test]
    fn gaussian_log_prob_symmetry_about_mean() {
        let dist = gaussian(vec![0.7, -1.2], vec![0.3, 1.4]);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..100 {
            let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mirrored = vec![2.0 * 0.7 - u[0], 2.0 * (-1.2) - u[1]];
            let a = dist.log_prob(&AgentAction::Continuous(u)).unwrap();
            let b = dist.log_prob(&AgentAction::Continuous(mirrored)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_entropy_matches_monte_carlo() {
        let dist = gaussian(vec![0.0], vec![1.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let (u, _) = dist.sample(&mut rng);
            acc -= dist.log_prob(&u).unwrap();
        }
        let mc = acc / n as f64;
        assert!((mc - dist.entropy()).abs() < 1e-2, "mc {mc}");
    }

    #[test]
    fn uniform_categorical_entropy_gradient_is_zero() {
        let spec = NetSpec::mlp(vec![1, 4], Activation::Identity);
        let head = PolicyHead::new(HeadKind::Categorical(4), Network::new(spec).unwrap()).unwrap();
        let dist = head.dist(&[0.3, 0.3, 0.3, 0.3]).unwrap();
        for g in head.entropy_grad(&dist) {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn elite_count_law() {
        assert_eq!(elite_count(10, 0.8), 2);
        assert_eq!(elite_count(20, 0.9), 2);
        assert_eq!(elite_count(1, 0.5), 1);
        assert_eq!(elite_count(3, 0.99), 1);
        assert_eq!(elite_count(100, 0.25), 75);
    }

    fn proposal_dists() -> Vec<HeadDist> {
        vec![categorical(vec![0.25; 4]), categorical(vec![0.25; 4])]
    }

    #[test]
    fn elites_dominate_non_elites_and_respect_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let dists = proposal_dists();
        let mut q = |joint: &JointAction| -> Result<f64> {
            Ok(joint[0].discrete_index() as f64 * 4.0 + joint[1].discrete_index() as f64)
        };
        let elites = mcem_elites(&dists, &mut q, 10, 0.8, &mut rng).unwrap();
        assert_eq!(elites.elites.len(), 2);
        assert!(elites.elites[0].q_tot >= elites.elites[1].q_tot);
    }

    #[test]
    fn all_equal_values_break_ties_by_sample_index() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let dists = proposal_dists();
        let mut q = |_: &JointAction| -> Result<f64> { Ok(1.0) };
        let elites = mcem_elites(&dists, &mut q, 10, 0.8, &mut rng).unwrap();
        let indices: Vec<usize> = elites.elites.iter().map(|e| e.sample_index).collect();
        assert_eq!(indices, vec![0, 1]);
    }

    #[test]
    fn zero_samples_is_a_usage_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let dists = proposal_dists();
        let mut q = |_: &JointAction| -> Result<f64> { Ok(0.0) };
        assert!(mcem_elites(&dists, &mut q, 0, 0.8, &mut rng).is_err());
    }

    fn tabular_pair(seed: u64) -> PolicyPair {
        let spec = NetSpec::mlp(vec![1, 3], Activation::Identity);
        let head = PolicyHead::new(HeadKind::Categorical(3), Network::new(spec.clone()).unwrap())
            .unwrap();
        PolicyPair::new(
            head,
            init_params(&spec, seed).unwrap(),
            init_params(&spec, seed + 1000).unwrap(),
            0.03,
        )
    }

    #[test]
    fn single_elite_gradient_is_log_softmax_score() {
        let mut pairs = vec![tabular_pair(1)];
        let inputs = vec![vec![1.0]];
        let elites = EliteSet {
            elites: vec![JointActionSample {
                actions: vec![AgentAction::Discrete(2)],
                per_agent_logprob: vec![0.0],
                q_tot: 1.0,
                sample_index: 0,
            }],
            quantile: 0.8,
        };
        let (raw, _) = pairs[0]
            .head
            .net
            .forward(&pairs[0].main, &[1.0], None)
            .unwrap();
        let dist = pairs[0].head.dist(&raw).unwrap();
        let expect = pairs[0]
            .head
            .log_prob_grad(&dist, &AgentAction::Discrete(2))
            .unwrap();
        main_policy_gradient(&mut pairs, &inputs, &elites).unwrap();
        // Bias gradient of a 1→3 linear net is exactly the head upstream.
        assert_eq!(pairs[0].main.grad("b0").data(), expect.as_slice());
    }

    #[test]
    fn duplicated_elite_doubles_the_gradient() {
        let elite = JointActionSample {
            actions: vec![AgentAction::Discrete(1)],
            per_agent_logprob: vec![0.0],
            q_tot: 1.0,
            sample_index: 0,
        };
        let single = EliteSet {
            elites: vec![elite.clone()],
            quantile: 0.8,
        };
        let double = EliteSet {
            elites: vec![elite.clone(), elite],
            quantile: 0.8,
        };
        let mut p1 = vec![tabular_pair(7)];
        let mut p2 = vec![tabular_pair(7)];
        let inputs = vec![vec![1.0]];
        main_policy_gradient(&mut p1, &inputs, &single).unwrap();
        main_policy_gradient(&mut p2, &inputs, &double).unwrap();
        for (a, b) in p1[0]
            .main
            .grad("w0")
            .data()
            .iter()
            .zip(p2[0].main.grad("w0").data())
        {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn beta_zero_proposal_equals_main_accumulation() {
        let mut p1 = vec![tabular_pair(9)];
        p1[0].entropy_coeff = 0.0;
        // Make proposal parameters equal to main so the scores coincide.
        let main = p1[0].main.clone();
        p1[0].proposal = main.clone();
        let inputs = vec![vec![1.0]];
        let elites = EliteSet {
            elites: vec![JointActionSample {
                actions: vec![AgentAction::Discrete(0)],
                per_agent_logprob: vec![0.0],
                q_tot: 2.0,
                sample_index: 0,
            }],
            quantile: 0.8,
        };
        main_policy_gradient(&mut p1, &inputs, &elites).unwrap();
        proposal_policy_gradient(&mut p1, &inputs, &elites).unwrap();
        assert_eq!(
            p1[0].main.grad("w0").data(),
            p1[0].proposal.grad("w0").data()
        );
        assert_eq!(
            p1[0].main.grad("b0").data(),
            p1[0].proposal.grad("b0").data()
        );
    }

    #[test]
    fn zero_q_tot_centralized_gradient_accumulates_nothing() {
        let mut pairs = vec![tabular_pair(21)];
        let inputs = vec![vec![1.0]];
        centralized_policy_gradient(&mut pairs, &inputs, &vec![AgentAction::Discrete(1)], 0.0)
            .unwrap();
        assert!(pairs[0].main.grad("w0").data().iter().all(|&g| g == 0.0));
        assert!(pairs[0].main.grad("b0").data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn exact_enumeration_score_has_zero_mean_under_constant_value() {
        // Σ_u π(u) ∇log π(u) = 0, so a constant q_tot gives zero expected
        // centralized gradient when every joint action is enumerated with
        // its probability weight.
        let pair = tabular_pair(31);
        let (raw, _) = pair.head.net.forward(&pair.main, &[1.0], None).unwrap();
        let dist = pair.head.dist(&raw).unwrap();
        let probs = match &dist {
            HeadDist::Categorical { probs } => probs.clone(),
            _ => unreachable!(),
        };
        let mut total = vec![0.0; 3];
        for a in 0..3 {
            let g = pair
                .head
                .log_prob_grad(&dist, &AgentAction::Discrete(a))
                .unwrap();
            for (t, gv) in total.iter_mut().zip(g) {
                *t += probs[a] * gv * 5.0; // constant q_tot = 5
            }
        }
        for t in total {
            assert!(t.abs() < 1e-12);
        }
    }

    #[test]
    fn elite_selection_is_invariant_under_positive_value_scaling() {
        let dists = proposal_dists();
        let run = |scale: f64| {
            let mut rng = ChaCha12Rng::seed_from_u64(77);
            let mut q = move |joint: &JointAction| -> Result<f64> {
                Ok(scale
                    * ((joint[0].discrete_index() * 3 + joint[1].discrete_index()) as f64).sin())
            };
            let elites = mcem_elites(&dists, &mut q, 12, 0.75, &mut rng).unwrap();
            elites
                .elites
                .iter()
                .map(|e| (e.sample_index, e.actions.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1.0), run(1000.0));
    }

    use rand::Rng;
}
