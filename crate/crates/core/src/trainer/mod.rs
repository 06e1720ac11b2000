//! The training loop: collection with behavior log-probs, the critic
//! minimization on n-step λ-return targets, the cross-entropy policy update,
//! evaluation, metrics, seeding, and checkpointing.

mod encoding;
mod state;

pub use encoding::Encoder;
pub use state::{restore_trainer, save_trainer};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{
    adam_update, init_params, Activation, NetSpec, Network, OptimState, ParamStore, SeqRun,
};
use crate::critic::{
    critic_loss_episode, retrace_target, AgentCritic, CriticEpisode, CriticKind, Mixer,
    MixerMode, MixerParams, RetraceEval, TraceSpec, TraceVariant, WindowStep,
};
use crate::envs::{ActionSpace, Env, JointAction};
use crate::error::{Error, Result};
use crate::policy::{
    elite_logprob_upstream, mcem_elites, proposal_upstream, HeadDist, HeadKind, PolicyHead,
    PolicyPair,
};
use crate::replay::{Episode, EpisodeStep, ReplayBuffer};

/// Network architecture knobs. None of these come from the paper; they are
/// artifact defaults surfaced in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub recurrent: bool,
    pub recurrent_hidden: usize,
    /// Observation stack depth for the feed-forward encoder.
    pub window: usize,
    pub activation: Activation,
    pub mix_embed: usize,
    pub hyper_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            recurrent: false,
            recurrent_hidden: 64,
            window: 1,
            activation: Activation::Relu,
            mix_embed: 32,
            hyper_hidden: 64,
        }
    }
}

/// Training-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub episodes_per_iter: usize,
    pub batch_size: usize,
    /// |E(τ)|: joint actions sampled per record.
    pub elite_samples: usize,
    /// ρ: elites are the top (1−ρ) quantile.
    pub rho: f64,
    pub entropy_coeff: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub target_sync: usize,
    pub eval_period: usize,
    pub eval_episodes: usize,
    pub buffer_capacity: usize,
    /// Joint actions averaged per δ bootstrap evaluation.
    pub target_action_samples: usize,
    pub seed: u64,
    pub trace: TraceSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 200,
            episodes_per_iter: 1,
            batch_size: 8,
            elite_samples: 10,
            rho: 0.8,
            entropy_coeff: 0.03,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            target_sync: 200,
            eval_period: 10,
            eval_episodes: 20,
            buffer_capacity: 5000,
            target_action_samples: 1,
            seed: 1,
            trace: TraceSpec {
                lambda: 0.8,
                variant: TraceVariant::Retrace,
                horizon: 5,
                gamma: 0.95,
            },
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho must lie in (0, 1)"));
        }
        if self.elite_samples == 0 {
            return Err(Error::config("elite_samples must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.target_sync == 0 || self.eval_period == 0 {
            return Err(Error::config("target_sync and eval_period must be positive"));
        }
        if self.target_action_samples == 0 {
            return Err(Error::config("target_action_samples must be at least 1"));
        }
        self.trace.validate()
    }
}

/// Ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantConfig {
    pub mixer: MixerMode,
    pub on_policy: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            mixer: MixerMode::Ncd,
            on_policy: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Stochastic,
    Greedy,
}

/// One row of the metrics stream. Greedy evaluation feeds the reported
/// columns; the stochastic companion goes to a secondary file.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub return_mean: f64,
    pub success_rate: f64,
    pub return_mean_stochastic: f64,
    pub success_rate_stochastic: f64,
    pub critic_loss: f64,
    pub entropy_main: f64,
    pub entropy_prop: f64,
    pub seconds: f64,
}

/// Everything precomputed about one sampled episode before the updates run.
struct EpisodeView {
    episode: Episode,
    /// Per-agent encodings for t = 0..=T (index T is the bootstrap slot).
    enc: Vec<Vec<Vec<f64>>>,
    /// Mixer conditioning per t = 0..=T.
    states: Vec<Vec<f64>>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub variant: VariantConfig,
    env: Box<dyn Env>,
    eval_env: Box<dyn Env>,
    encoder: Encoder,
    pub pairs: Vec<PolicyPair>,
    pub critics: Vec<AgentCritic>,
    pub critic_params: Vec<ParamStore>,
    target_critic_params: Vec<ParamStore>,
    pub mixer: Mixer,
    pub mixer_params: MixerParams,
    target_mixer_params: MixerParams,
    main_opts: Vec<OptimState>,
    prop_opts: Vec<OptimState>,
    critic_opts: Vec<OptimState>,
    mixer_opts: std::collections::BTreeMap<String, OptimState>,
    pub buffer: ReplayBuffer,
    collect_rng: ChaCha12Rng,
    train_rng: ChaCha12Rng,
    eval_rng: ChaCha12Rng,
    pub iteration: usize,
    pub env_steps: u64,
    pub beta_clamp_warnings: u64,
    last_eval: (f64, f64, f64, f64),
    phases: Vec<&'static str>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        variant: VariantConfig,
        env: Box<dyn Env>,
        eval_env: Box<dyn Env>,
    ) -> Result<Self> {
        config.validate()?;
        let spec = env.spec().clone();
        spec.validate()?;
        let k = spec.num_agents;
        let m = &config.model;
        let encoder = Encoder::new(m.recurrent, m.window, spec.obs_dim, spec.action_space.clone());
        let enc_dim = encoder.encoding_dim();

        let (head_kind, critic_kind, policy_out, critic_in, critic_out) = match spec.action_space {
            ActionSpace::Discrete(n) => {
                (HeadKind::Categorical(n), CriticKind::Discrete(n), n, enc_dim, n)
            }
            ActionSpace::Continuous { dim, .. } => (
                HeadKind::Gaussian(dim),
                CriticKind::Continuous(dim),
                2 * dim,
                enc_dim + dim,
                1,
            ),
        };
        let net_spec = |input: usize, out: usize| -> NetSpec {
            if m.recurrent {
                NetSpec::recurrent(vec![input, m.hidden, out], m.activation, m.recurrent_hidden)
            } else {
                NetSpec::mlp(vec![input, m.hidden, out], m.activation)
            }
        };
        let policy_spec = net_spec(enc_dim, policy_out);
        let critic_spec = net_spec(critic_in, critic_out);

        // One master stream hands out net seeds and stream seeds in a fixed
        // order so the whole run is a function of (config, seed).
        let mut seeder = ChaCha12Rng::seed_from_u64(config.seed);
        let mut next_seed = || seeder.gen::<u64>();

        let mut pairs = Vec::with_capacity(k);
        for _ in 0..k {
            let head = PolicyHead::new(head_kind, Network::new(policy_spec.clone())?)?;
            let main = init_params(&policy_spec, next_seed())?;
            let proposal = init_params(&policy_spec, next_seed())?;
            pairs.push(PolicyPair::new(head, main, proposal, config.entropy_coeff));
        }
        let mut critics = Vec::with_capacity(k);
        let mut critic_params = Vec::with_capacity(k);
        for _ in 0..k {
            critics.push(AgentCritic::new(
                critic_kind,
                Network::new(critic_spec.clone())?,
            )?);
            critic_params.push(init_params(&critic_spec, next_seed())?);
        }
        let state_dim = spec.state_dim.unwrap_or(k * spec.obs_dim);
        let mixer = match variant.mixer {
            MixerMode::Ncd => Mixer::ncd(k, state_dim, m.mix_embed, m.hyper_hidden)?,
            MixerMode::Linear => Mixer::linear(k, state_dim, m.hyper_hidden)?,
        };
        let mixer_params = mixer.init_params(next_seed())?;
        let target_critic_params = critic_params.clone();
        let target_mixer_params = mixer_params.clone();

        let buffer = ReplayBuffer::new(
            config.buffer_capacity,
            ChaCha12Rng::seed_from_u64(next_seed()),
        )?;
        let collect_rng = ChaCha12Rng::seed_from_u64(next_seed());
        let train_rng = ChaCha12Rng::seed_from_u64(next_seed());
        let eval_rng = ChaCha12Rng::seed_from_u64(next_seed());

        let main_opts = (0..k).map(|_| OptimState::new(config.actor_lr)).collect();
        let prop_opts = (0..k).map(|_| OptimState::new(config.actor_lr)).collect();
        let critic_opts = (0..k).map(|_| OptimState::new(config.critic_lr)).collect();
        let mixer_opts = mixer_params
            .stores
            .keys()
            .map(|name| (name.clone(), OptimState::new(config.critic_lr)))
            .collect();

        Ok(Trainer {
            config,
            variant,
            env,
            eval_env,
            encoder,
            pairs,
            critics,
            critic_params,
            target_critic_params,
            mixer,
            mixer_params,
            target_mixer_params,
            main_opts,
            prop_opts,
            critic_opts,
            mixer_opts,
            buffer,
            collect_rng,
            train_rng,
            eval_rng,
            iteration: 0,
            env_steps: 0,
            beta_clamp_warnings: 0,
            last_eval: (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
            phases: Vec::new(),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Phase order of the last `train_iteration`, for loop-order assertions.
    pub fn last_phases(&self) -> &[&'static str] {
        &self.phases
    }

    fn mixer_state(&self, state: Option<&Vec<f64>>, obs: &[Vec<f64>]) -> Vec<f64> {
        match state {
            Some(s) => s.clone(),
            None => obs.iter().flatten().copied().collect(),
        }
    }

    /// Runs `count` episodes under the current main policies and stores them
    /// with per-agent behavior log-probs. Returns environment steps taken.
    pub fn collect(&mut self, count: usize) -> Result<u64> {
        let mut steps_taken = 0u64;
        for _ in 0..count {
            let episode = self.rollout_episode()?;
            steps_taken += episode.len() as u64;
            self.buffer.append_episode(episode)?;
        }
        self.env_steps += steps_taken;
        Ok(steps_taken)
    }

    fn rollout_episode(&mut self) -> Result<Episode> {
        let k = self.env.spec().num_agents;
        let step_limit = self.env.spec().step_limit;
        let mut obs = self.env.reset(&mut self.collect_rng);
        let mut episode = Episode::default();
        let mut obs_hist: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
        let mut prev_actions: Vec<Option<crate::envs::AgentAction>> = vec![None; k];
        let mut hiddens: Vec<Option<Vec<f64>>> =
            self.pairs.iter().map(|p| p.head.net.init_hidden()).collect();
        for t in 0..step_limit {
            for a in 0..k {
                obs_hist[a].push(obs.per_agent[a].clone());
            }
            let mut joint: JointAction = Vec::with_capacity(k);
            let mut logprobs = Vec::with_capacity(k);
            for a in 0..k {
                let enc = self
                    .encoder
                    .encode(&obs_hist[a], t, prev_actions[a].as_ref());
                let (raw, new_hidden) =
                    self.pairs[a]
                        .head
                        .net
                        .forward(&self.pairs[a].main, &enc, hiddens[a].as_deref())?;
                hiddens[a] = new_hidden;
                let dist = self.pairs[a].head.dist(&raw)?;
                let (action, lp) = dist.sample(&mut self.collect_rng);
                joint.push(action);
                logprobs.push(lp);
            }
            let outcome = self.env.step(&joint, &mut self.collect_rng)?;
            for a in 0..k {
                prev_actions[a] = Some(joint[a].clone());
            }
            episode.steps.push(EpisodeStep {
                state: obs.state.clone(),
                observations: obs.per_agent.clone(),
                joint_action: joint,
                reward: outcome.reward,
                terminal: outcome.terminal,
                behavior_logprobs: logprobs,
            });
            obs = outcome.observations;
            if episode.steps.last().unwrap().terminal {
                break;
            }
            if t + 1 == step_limit {
                break;
            }
        }
        episode.final_observations = obs.per_agent;
        episode.final_state = obs.state;
        Ok(episode)
    }

    fn episode_view(&self, episode: Episode) -> EpisodeView {
        let k = self.env.spec().num_agents;
        let len = episode.len();
        let mut enc = Vec::with_capacity(k);
        for a in 0..k {
            let step_obs: Vec<Vec<f64>> = episode
                .steps
                .iter()
                .map(|s| s.observations[a].clone())
                .collect();
            let actions: Vec<crate::envs::AgentAction> = episode
                .steps
                .iter()
                .map(|s| s.joint_action[a].clone())
                .collect();
            enc.push(self.encoder.episode_encodings(
                &step_obs,
                &episode.final_observations[a],
                &actions,
            ));
        }
        let mut states = Vec::with_capacity(len + 1);
        for t in 0..len {
            states.push(self.mixer_state(
                episode.steps[t].state.as_ref(),
                &episode.steps[t].observations,
            ));
        }
        states.push(self.mixer_state(
            episode.final_state.as_ref(),
            &episode.final_observations,
        ));
        EpisodeView {
            episode,
            enc,
            states,
        }
    }

    fn critic_update(&mut self, batch: &[EpisodeView]) -> Result<f64> {
        let k = self.env.spec().num_agents;
        let total_records: usize = batch.iter().map(|v| v.episode.len()).sum();
        let upstream_scale = 1.0 / total_records as f64;
        let mut total_sq_err = 0.0;
        let m_samples = self.config.target_action_samples;
        for view in batch {
            let len = view.episode.len();
            // Current main-policy distributions at every τ (incl. bootstrap).
            let mut policy_dists: Vec<Vec<HeadDist>> = Vec::with_capacity(k);
            for a in 0..k {
                let run = self.pairs[a]
                    .head
                    .net
                    .forward_seq(&self.pairs[a].main, &view.enc[a])?;
                let dists = run
                    .outputs
                    .iter()
                    .map(|raw| self.pairs[a].head.dist(raw))
                    .collect::<Result<Vec<_>>>()?;
                policy_dists.push(dists);
            }
            // Target-critic runs over the stored actions.
            let mut target_runs: Vec<SeqRun> = Vec::with_capacity(k);
            for a in 0..k {
                let inputs: Vec<Vec<f64>> = (0..len)
                    .map(|t| {
                        self.critics[a]
                            .step_input(&view.enc[a][t], &view.episode.steps[t].joint_action[a])
                    })
                    .collect();
                target_runs.push(
                    self.critics[a]
                        .net
                        .forward_seq(&self.target_critic_params[a], &inputs)?,
                );
            }
            // Stored-pair target values and current-policy log-probs.
            let mut q_stored_all = Vec::with_capacity(len);
            let mut pi_logprob_all = Vec::with_capacity(len);
            for t in 0..len {
                let locals: Vec<f64> = (0..k)
                    .map(|a| {
                        let out = &target_runs[a].outputs[t];
                        match view.episode.steps[t].joint_action[a] {
                            crate::envs::AgentAction::Discrete(u) => out[u],
                            crate::envs::AgentAction::Continuous(_) => out[0],
                        }
                    })
                    .collect();
                q_stored_all.push(self.mixer.mix(
                    &self.target_mixer_params,
                    &locals,
                    &view.states[t],
                )?);
                let mut lp = 0.0;
                for a in 0..k {
                    lp += policy_dists[a][t]
                        .log_prob(&view.episode.steps[t].joint_action[a])?;
                }
                pi_logprob_all.push(lp);
            }
            // Per-record return targets.
            let mut targets = Vec::with_capacity(len);
            for t in 0..len {
                let window_steps: Vec<WindowStep> = (t
                    ..(t + self.config.trace.horizon).min(len))
                    .map(|s| WindowStep {
                        reward: view.episode.steps[s].reward,
                        terminal: view.episode.steps[s].terminal,
                        behavior_logprob: view.episode.steps[s]
                            .behavior_logprobs
                            .iter()
                            .sum(),
                    })
                    .collect();
                // Fresh bootstrap evaluations for this window.
                let mut q_next = Vec::with_capacity(window_steps.len());
                for (i, ws) in window_steps.iter().enumerate() {
                    if ws.terminal {
                        q_next.push(0.0);
                        continue;
                    }
                    let s_next = t + i + 1;
                    let mut acc = 0.0;
                    for _ in 0..m_samples {
                        let mut locals = Vec::with_capacity(k);
                        for a in 0..k {
                            let (u_next, _) =
                                policy_dists[a][s_next].sample(&mut self.train_rng);
                            let hidden = if self.critics[a].net.is_recurrent() {
                                Some(target_runs[a].hidden_before(
                                    s_next,
                                    self.critics[a].net.hidden_dim(),
                                ))
                            } else {
                                None
                            };
                            let (q, _) = self.critics[a].q_value(
                                &self.target_critic_params[a],
                                &view.enc[a][s_next],
                                hidden.as_deref(),
                                &u_next,
                            )?;
                            locals.push(q);
                        }
                        acc += self.mixer.mix(
                            &self.target_mixer_params,
                            &locals,
                            &view.states[s_next],
                        )?;
                    }
                    q_next.push(acc / m_samples as f64);
                }
                let mut q_stored_fn = |i: usize| Ok(q_stored_all[t + i]);
                let mut q_next_fn = |i: usize| Ok(q_next[i]);
                let mut pi_fn = |i: usize| Ok(pi_logprob_all[t + i]);
                let mut eval = RetraceEval {
                    q_stored: &mut q_stored_fn,
                    q_next_resampled: &mut q_next_fn,
                    pi_logprob_stored: &mut pi_fn,
                };
                let (target, clamps) = retrace_target(
                    &window_steps,
                    &self.config.trace,
                    &mut eval,
                    self.variant.on_policy,
                )?;
                self.beta_clamp_warnings += clamps;
                targets.push(target);
            }
            // One gradient pass through the live critics and mixer.
            let joint_actions: Vec<JointAction> = view
                .episode
                .steps
                .iter()
                .map(|s| s.joint_action.clone())
                .collect();
            let enc_steps: Vec<Vec<Vec<f64>>> = (0..k)
                .map(|a| view.enc[a][..len].to_vec())
                .collect();
            let critic_episode = CriticEpisode {
                per_agent_encodings: &enc_steps,
                joint_actions: &joint_actions,
                mixer_states: &view.states[..len],
                targets: &targets,
            };
            total_sq_err += critic_loss_episode(
                &self.critics,
                &mut self.critic_params,
                &self.mixer,
                &mut self.mixer_params,
                &critic_episode,
                upstream_scale,
            )?;
        }
        for a in 0..k {
            adam_update(&mut self.critic_params[a], &mut self.critic_opts[a])?;
        }
        for (name, store) in self.mixer_params.stores.iter_mut() {
            adam_update(store, self.mixer_opts.get_mut(name).expect("opt exists"))?;
        }
        Ok(total_sq_err / total_records as f64)
    }

    fn policy_update(&mut self, batch: &[EpisodeView]) -> Result<(f64, f64)> {
        let k = self.env.spec().num_agents;
        let total_records: usize = batch.iter().map(|v| v.episode.len()).sum();
        let mut entropy_main_sum = 0.0;
        let mut entropy_prop_sum = 0.0;
        for view in batch {
            let len = view.episode.len();
            let mut main_runs = Vec::with_capacity(k);
            let mut prop_runs = Vec::with_capacity(k);
            for a in 0..k {
                let inputs = &view.enc[a][..len];
                main_runs.push(
                    self.pairs[a]
                        .head
                        .net
                        .forward_seq(&self.pairs[a].main, inputs)?,
                );
                prop_runs.push(
                    self.pairs[a]
                        .head
                        .net
                        .forward_seq(&self.pairs[a].proposal, inputs)?,
                );
            }
            // Live critic runs over stored actions (value lookups for the
            // evaluation phase reuse their hidden states).
            let mut live_runs = Vec::with_capacity(k);
            for a in 0..k {
                let inputs: Vec<Vec<f64>> = (0..len)
                    .map(|t| {
                        self.critics[a]
                            .step_input(&view.enc[a][t], &view.episode.steps[t].joint_action[a])
                    })
                    .collect();
                live_runs.push(
                    self.critics[a]
                        .net
                        .forward_seq(&self.critic_params[a], &inputs)?,
                );
            }
            let mut main_upstreams: Vec<Vec<Vec<f64>>> = (0..k)
                .map(|a| vec![vec![0.0; self.pairs[a].head.net.output_dim()]; len])
                .collect();
            let mut prop_upstreams = main_upstreams.clone();
            for t in 0..len {
                let main_dists: Vec<HeadDist> = (0..k)
                    .map(|a| self.pairs[a].head.dist(&main_runs[a].outputs[t]))
                    .collect::<Result<_>>()?;
                let prop_dists: Vec<HeadDist> = (0..k)
                    .map(|a| self.pairs[a].head.dist(&prop_runs[a].outputs[t]))
                    .collect::<Result<_>>()?;
                entropy_main_sum += main_dists.iter().map(HeadDist::entropy).sum::<f64>()
                    / k as f64;
                entropy_prop_sum += prop_dists.iter().map(HeadDist::entropy).sum::<f64>()
                    / k as f64;
                let elites = {
                    let critics = &self.critics;
                    let critic_params = &self.critic_params;
                    let mixer = &self.mixer;
                    let mixer_params = &self.mixer_params;
                    let enc = &view.enc;
                    let states = &view.states;
                    let mut q_eval = |joint: &JointAction| -> Result<f64> {
                        let mut locals = Vec::with_capacity(k);
                        for a in 0..k {
                            let q = match joint[a] {
                                crate::envs::AgentAction::Discrete(u) => {
                                    live_runs[a].outputs[t][u]
                                }
                                crate::envs::AgentAction::Continuous(_) => {
                                    let hidden = if critics[a].net.is_recurrent() {
                                        Some(live_runs[a]
                                            .hidden_before(t, critics[a].net.hidden_dim()))
                                    } else {
                                        None
                                    };
                                    critics[a]
                                        .q_value(
                                            &critic_params[a],
                                            &enc[a][t],
                                            hidden.as_deref(),
                                            &joint[a],
                                        )?
                                        .0
                                }
                            };
                            locals.push(q);
                        }
                        mixer.mix(mixer_params, &locals, &states[t])
                    };
                    mcem_elites(
                        &prop_dists,
                        &mut q_eval,
                        self.config.elite_samples,
                        self.config.rho,
                        &mut self.train_rng,
                    )?
                };
                for a in 0..k {
                    main_upstreams[a][t] = elite_logprob_upstream(
                        &self.pairs[a].head,
                        &main_dists[a],
                        &elites,
                        a,
                    )?;
                    prop_upstreams[a][t] = proposal_upstream(
                        &self.pairs[a].head,
                        &prop_dists[a],
                        &elites,
                        a,
                        self.pairs[a].entropy_coeff,
                    )?;
                }
            }
            for a in 0..k {
                let pair = &mut self.pairs[a];
                pair.head
                    .net
                    .backward_seq(&mut pair.main, &main_runs[a], &main_upstreams[a])?;
                pair.head
                    .net
                    .backward_seq(&mut pair.proposal, &prop_runs[a], &prop_upstreams[a])?;
            }
        }
        // Ascent on the mean-over-records objective.
        let scale = -1.0 / total_records as f64;
        for a in 0..k {
            self.pairs[a].main.scale_grads(scale);
            adam_update(&mut self.pairs[a].main, &mut self.main_opts[a])?;
            self.pairs[a].proposal.scale_grads(scale);
            adam_update(&mut self.pairs[a].proposal, &mut self.prop_opts[a])?;
        }
        Ok((
            entropy_main_sum / total_records as f64,
            entropy_prop_sum / total_records as f64,
        ))
    }

    /// One full iteration: collect, critic minimization, cross-entropy
    /// policy update, scheduled target sync and evaluation.
    pub fn train_iteration(&mut self) -> Result<MetricsRow> {
        let started = std::time::Instant::now();
        self.iteration += 1;
        self.phases.clear();

        if self.variant.on_policy {
            // On-policy ablation: only this iteration's episodes are usable.
            self.buffer.clear();
        }
        self.phases.push("collect");
        self.collect(self.config.episodes_per_iter)?;

        let (critic_loss, entropy_main, entropy_prop);
        if self.buffer.is_empty() {
            log::warn!("iteration {}: empty replay buffer, update skipped", self.iteration);
            critic_loss = f64::NAN;
            entropy_main = f64::NAN;
            entropy_prop = f64::NAN;
        } else {
            let indices = self.buffer.sample_batch(self.config.batch_size)?;
            let batch: Vec<EpisodeView> = indices
                .into_iter()
                .map(|i| self.episode_view(self.buffer.episode(i).clone()))
                .collect();
            self.phases.push("critic");
            critic_loss = self.critic_update(&batch)?;
            self.phases.push("policy");
            let (em, ep) = self.policy_update(&batch)?;
            entropy_main = em;
            entropy_prop = ep;
        }

        if self.iteration % self.config.target_sync == 0 {
            self.phases.push("sync");
            self.sync_targets();
        }
        if self.iteration == 1 || self.iteration % self.config.eval_period == 0 {
            self.phases.push("eval");
            let (gr, gs) = self.evaluate(self.config.eval_episodes, EvalMode::Greedy)?;
            let (sr, ss) = self.evaluate(self.config.eval_episodes, EvalMode::Stochastic)?;
            self.last_eval = (gr, gs, sr, ss);
        }
        let (gr, gs, sr, ss) = self.last_eval;
        Ok(MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            return_mean: gr,
            success_rate: gs,
            return_mean_stochastic: sr,
            success_rate_stochastic: ss,
            critic_loss,
            entropy_main,
            entropy_prop,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    pub fn sync_targets(&mut self) {
        for (dst, src) in self
            .target_critic_params
            .iter_mut()
            .zip(&self.critic_params)
        {
            dst.copy_values_from(src);
        }
        self.target_mixer_params.copy_values_from(&self.mixer_params);
    }

    /// Runs `episodes` evaluation episodes under the main policies.
    /// Returns (mean return, success rate); the success rate is NaN for
    /// environments that define no success notion.
    pub fn evaluate(&mut self, episodes: usize, mode: EvalMode) -> Result<(f64, f64)> {
        if episodes == 0 {
            return Err(Error::usage("evaluation needs at least one episode"));
        }
        let k = self.eval_env.spec().num_agents;
        let step_limit = self.eval_env.spec().step_limit;
        let mut returns = Vec::with_capacity(episodes);
        let mut successes = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut obs = self.eval_env.reset(&mut self.eval_rng);
            let mut obs_hist: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
            let mut prev_actions: Vec<Option<crate::envs::AgentAction>> = vec![None; k];
            let mut hiddens: Vec<Option<Vec<f64>>> = self
                .pairs
                .iter()
                .map(|p| p.head.net.init_hidden())
                .collect();
            let mut rewards = Vec::with_capacity(step_limit);
            for t in 0..step_limit {
                for a in 0..k {
                    obs_hist[a].push(obs.per_agent[a].clone());
                }
                let mut joint: JointAction = Vec::with_capacity(k);
                for a in 0..k {
                    let enc = self
                        .encoder
                        .encode(&obs_hist[a], t, prev_actions[a].as_ref());
                    let (raw, new_hidden) = self.pairs[a].head.net.forward(
                        &self.pairs[a].main,
                        &enc,
                        hiddens[a].as_deref(),
                    )?;
                    hiddens[a] = new_hidden;
                    let dist = self.pairs[a].head.dist(&raw)?;
                    let action = match mode {
                        EvalMode::Greedy => dist.greedy(),
                        EvalMode::Stochastic => dist.sample(&mut self.eval_rng).0,
                    };
                    joint.push(action);
                }
                let outcome = self.eval_env.step(&joint, &mut self.eval_rng)?;
                for a in 0..k {
                    prev_actions[a] = Some(joint[a].clone());
                }
                rewards.push(outcome.reward);
                let terminal = outcome.terminal;
                obs = outcome.observations;
                if terminal {
                    break;
                }
            }
            returns.push(rewards.iter().sum::<f64>());
            successes.push(self.eval_env.episode_success(&rewards));
        }
        let mean_return = returns.iter().sum::<f64>() / episodes as f64;
        let success_rate = if successes.iter().all(Option::is_none) {
            f64::NAN
        } else {
            successes.iter().filter(|s| **s == Some(true)).count() as f64 / episodes as f64
        };
        Ok((mean_return, success_rate))
    }

}
