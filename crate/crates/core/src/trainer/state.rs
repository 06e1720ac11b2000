//! Full training-state snapshots over the checkpoint bundle framing.
//!
//! A snapshot holds every live and target parameter tensor, optimizer
//! moments, rng stream positions, the replay buffer contents, and the loop
//! counters — enough that restoring and continuing reproduces an
//! uninterrupted run bit for bit. Integers are stored as exact f64 values;
//! rng word positions are split into u32 limbs.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::Trainer;
use crate::approx::checkpoint::{load, save, Bundle};
use crate::approx::{OptimState, ParamStore};
use crate::envs::{ActionSpace, AgentAction};
use crate::error::{Error, Result};
use crate::replay::{Episode, EpisodeStep};
use crate::tensor::Tensor;

fn store_params(bundle: &mut Bundle, prefix: &str, params: &ParamStore) {
    for (name, tensor) in params.iter() {
        bundle.insert(format!("{prefix}/{name}"), tensor.clone());
    }
    bundle.insert_scalar(format!("{prefix}/step_count"), params.step_count as f64);
}

fn load_params(bundle: &Bundle, prefix: &str, params: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let tensor = bundle.get(&format!("{prefix}/{name}"))?;
        let dst = params.get_mut(&name);
        if dst.shape() != tensor.shape() {
            return Err(Error::checkpoint(format!(
                "shape mismatch restoring {prefix}/{name}"
            )));
        }
        dst.data_mut().copy_from_slice(tensor.data());
    }
    params.step_count = bundle.scalar(&format!("{prefix}/step_count"))? as u64;
    Ok(())
}

fn store_optim(bundle: &mut Bundle, prefix: &str, opt: &OptimState) {
    let (m, v) = opt.moments();
    for (name, tensor) in m {
        bundle.insert(format!("{prefix}/m/{name}"), tensor.clone());
    }
    for (name, tensor) in v {
        bundle.insert(format!("{prefix}/v/{name}"), tensor.clone());
    }
}

fn load_optim(bundle: &Bundle, prefix: &str, opt: &mut OptimState) {
    let (m, v) = opt.moments_mut();
    m.clear();
    v.clear();
    for (rest, tensor) in bundle.section(&format!("{prefix}/m")) {
        m.insert(rest, (*tensor).clone());
    }
    for (rest, tensor) in bundle.section(&format!("{prefix}/v")) {
        v.insert(rest, (*tensor).clone());
    }
}

fn store_rng(bundle: &mut Bundle, prefix: &str, rng: &ChaCha12Rng) {
    let seed = rng.get_seed();
    bundle.insert_vec(
        format!("{prefix}/seed"),
        seed.iter().map(|&b| b as f64).collect(),
    );
    let stream = rng.get_stream();
    bundle.insert_vec(
        format!("{prefix}/stream"),
        vec![(stream & 0xFFFF_FFFF) as f64, (stream >> 32) as f64],
    );
    let pos = rng.get_word_pos();
    let limbs: Vec<f64> = (0..4)
        .map(|i| ((pos >> (32 * i)) & 0xFFFF_FFFF) as f64)
        .collect();
    bundle.insert_vec(format!("{prefix}/word_pos"), limbs);
}

fn load_rng(bundle: &Bundle, prefix: &str) -> Result<ChaCha12Rng> {
    let seed_t = bundle.get(&format!("{prefix}/seed"))?;
    if seed_t.len() != 32 {
        return Err(Error::checkpoint("rng seed must have 32 bytes"));
    }
    let mut seed = [0u8; 32];
    for (b, v) in seed.iter_mut().zip(seed_t.data()) {
        *b = *v as u8;
    }
    let mut rng = ChaCha12Rng::from_seed(seed);
    let stream_t = bundle.get(&format!("{prefix}/stream"))?;
    let stream = (stream_t.data()[0] as u64) | ((stream_t.data()[1] as u64) << 32);
    rng.set_stream(stream);
    let pos_t = bundle.get(&format!("{prefix}/word_pos"))?;
    let mut pos: u128 = 0;
    for (i, v) in pos_t.data().iter().enumerate() {
        pos |= (*v as u128) << (32 * i);
    }
    rng.set_word_pos(pos);
    Ok(rng)
}

fn store_episode(bundle: &mut Bundle, prefix: &str, ep: &Episode, action_space: &ActionSpace) {
    let t_len = ep.len();
    let k = ep.steps[0].observations.len();
    bundle.insert_vec(
        format!("{prefix}/rewards"),
        ep.steps.iter().map(|s| s.reward).collect(),
    );
    bundle.insert_vec(
        format!("{prefix}/terminals"),
        ep.steps
            .iter()
            .map(|s| if s.terminal { 1.0 } else { 0.0 })
            .collect(),
    );
    let mut logprobs = Vec::with_capacity(t_len * k);
    for s in &ep.steps {
        logprobs.extend_from_slice(&s.behavior_logprobs);
    }
    bundle.insert(
        format!("{prefix}/logprobs"),
        Tensor::from_vec(&[t_len, k], logprobs).unwrap(),
    );
    for a in 0..k {
        let od = ep.steps[0].observations[a].len();
        let mut obs = Vec::with_capacity(t_len * od);
        for s in &ep.steps {
            obs.extend_from_slice(&s.observations[a]);
        }
        bundle.insert(
            format!("{prefix}/obs/a{a}"),
            Tensor::from_vec(&[t_len, od], obs).unwrap(),
        );
        bundle.insert_vec(
            format!("{prefix}/final_obs/a{a}"),
            ep.final_observations[a].clone(),
        );
    }
    if let Some(state) = &ep.steps[0].state {
        let sd = state.len();
        let mut states = Vec::with_capacity(t_len * sd);
        for s in &ep.steps {
            states.extend_from_slice(s.state.as_ref().expect("uniform state presence"));
        }
        bundle.insert(
            format!("{prefix}/states"),
            Tensor::from_vec(&[t_len, sd], states).unwrap(),
        );
        bundle.insert_vec(
            format!("{prefix}/final_state"),
            ep.final_state.clone().expect("uniform state presence"),
        );
    }
    match action_space {
        ActionSpace::Discrete(_) => {
            let mut acts = Vec::with_capacity(t_len * k);
            for s in &ep.steps {
                for a in &s.joint_action {
                    acts.push(a.discrete_index() as f64);
                }
            }
            bundle.insert(
                format!("{prefix}/actions"),
                Tensor::from_vec(&[t_len, k], acts).unwrap(),
            );
        }
        ActionSpace::Continuous { dim, .. } => {
            let mut acts = Vec::with_capacity(t_len * k * dim);
            for s in &ep.steps {
                for a in &s.joint_action {
                    acts.extend_from_slice(a.continuous_values());
                }
            }
            bundle.insert(
                format!("{prefix}/actions"),
                Tensor::from_vec(&[t_len, k, *dim], acts).unwrap(),
            );
        }
    }
}

fn load_episode(bundle: &Bundle, prefix: &str, action_space: &ActionSpace, k: usize) -> Result<Episode> {
    let rewards = bundle.get(&format!("{prefix}/rewards"))?.data().to_vec();
    let t_len = rewards.len();
    let terminals = bundle.get(&format!("{prefix}/terminals"))?.data().to_vec();
    let logprobs = bundle.get(&format!("{prefix}/logprobs"))?;
    let mut per_agent_obs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
    let mut final_obs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for a in 0..k {
        let t = bundle.get(&format!("{prefix}/obs/a{a}"))?;
        let od = t.shape()[1];
        per_agent_obs.push(
            (0..t_len)
                .map(|i| t.data()[i * od..(i + 1) * od].to_vec())
                .collect(),
        );
        final_obs.push(bundle.get(&format!("{prefix}/final_obs/a{a}"))?.data().to_vec());
    }
    let states = bundle.get(&format!("{prefix}/states")).ok().map(|t| {
        let sd = t.shape()[1];
        (0..t_len)
            .map(|i| t.data()[i * sd..(i + 1) * sd].to_vec())
            .collect::<Vec<_>>()
    });
    let final_state = bundle
        .get(&format!("{prefix}/final_state"))
        .ok()
        .map(|t| t.data().to_vec());
    let actions_t = bundle.get(&format!("{prefix}/actions"))?;
    let mut steps = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let joint_action: Vec<AgentAction> = match action_space {
            ActionSpace::Discrete(_) => (0..k)
                .map(|a| AgentAction::Discrete(actions_t.data()[i * k + a] as usize))
                .collect(),
            ActionSpace::Continuous { dim, .. } => (0..k)
                .map(|a| {
                    let base = (i * k + a) * dim;
                    AgentAction::Continuous(actions_t.data()[base..base + dim].to_vec())
                })
                .collect(),
        };
        steps.push(EpisodeStep {
            state: states.as_ref().map(|s| s[i].clone()),
            observations: per_agent_obs.iter().map(|o| o[i].clone()).collect(),
            joint_action,
            reward: rewards[i],
            terminal: terminals[i] != 0.0,
            behavior_logprobs: logprobs.data()[i * k..(i + 1) * k].to_vec(),
        });
    }
    Ok(Episode {
        steps,
        final_observations: final_obs,
        final_state,
    })
}

/// Writes the complete training state to `path`.
pub fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut bundle = Bundle::new();
    bundle.insert_scalar("meta/iteration", trainer.iteration as f64);
    bundle.insert_scalar("meta/env_steps", trainer.env_steps as f64);
    bundle.insert_scalar("meta/clamps", trainer.beta_clamp_warnings as f64);
    let (a, b, c, d) = trainer.last_eval;
    bundle.insert_vec("meta/last_eval", vec![a, b, c, d]);

    for (i, pair) in trainer.pairs.iter().enumerate() {
        store_params(&mut bundle, &format!("theta/a{i}"), &pair.main);
        store_params(&mut bundle, &format!("theta_hat/a{i}"), &pair.proposal);
    }
    for (i, params) in trainer.critic_params.iter().enumerate() {
        store_params(&mut bundle, &format!("phi/a{i}"), params);
    }
    for (i, params) in trainer.target_critic_params.iter().enumerate() {
        store_params(&mut bundle, &format!("phi_target/a{i}"), params);
    }
    for (name, store) in &trainer.mixer_params.stores {
        store_params(&mut bundle, &format!("psi/{name}"), store);
    }
    for (name, store) in &trainer.target_mixer_params.stores {
        store_params(&mut bundle, &format!("psi_target/{name}"), store);
    }
    for (i, opt) in trainer.main_opts.iter().enumerate() {
        store_optim(&mut bundle, &format!("opt/theta/a{i}"), opt);
    }
    for (i, opt) in trainer.prop_opts.iter().enumerate() {
        store_optim(&mut bundle, &format!("opt/theta_hat/a{i}"), opt);
    }
    for (i, opt) in trainer.critic_opts.iter().enumerate() {
        store_optim(&mut bundle, &format!("opt/phi/a{i}"), opt);
    }
    for (name, opt) in &trainer.mixer_opts {
        store_optim(&mut bundle, &format!("opt/psi/{name}"), opt);
    }
    store_rng(&mut bundle, "rng/collect", &trainer.collect_rng);
    store_rng(&mut bundle, "rng/train", &trainer.train_rng);
    store_rng(&mut bundle, "rng/eval", &trainer.eval_rng);
    store_rng(&mut bundle, "rng/buffer", trainer.buffer.rng_ref());

    bundle.insert_scalar("replay/count", trainer.buffer.len() as f64);
    let action_space = &trainer.env.spec().action_space;
    for i in 0..trainer.buffer.len() {
        store_episode(
            &mut bundle,
            &format!("replay/ep{i}"),
            trainer.buffer.episode(i),
            action_space,
        );
    }
    save(path, &bundle)
}

/// Restores the complete training state from `path` into a trainer built
/// from the same configuration.
pub fn restore_trainer(trainer: &mut Trainer, path: &Path) -> Result<()> {
    let bundle = load(path)?;
    trainer.iteration = bundle.scalar("meta/iteration")? as usize;
    trainer.env_steps = bundle.scalar("meta/env_steps")? as u64;
    trainer.beta_clamp_warnings = bundle.scalar("meta/clamps")? as u64;
    let last = bundle.get("meta/last_eval")?.data().to_vec();
    trainer.last_eval = (last[0], last[1], last[2], last[3]);

    for (i, pair) in trainer.pairs.iter_mut().enumerate() {
        load_params(&bundle, &format!("theta/a{i}"), &mut pair.main)?;
        load_params(&bundle, &format!("theta_hat/a{i}"), &mut pair.proposal)?;
    }
    for (i, params) in trainer.critic_params.iter_mut().enumerate() {
        load_params(&bundle, &format!("phi/a{i}"), params)?;
    }
    for (i, params) in trainer.target_critic_params.iter_mut().enumerate() {
        load_params(&bundle, &format!("phi_target/a{i}"), params)?;
    }
    let store_names: Vec<String> = trainer.mixer_params.stores.keys().cloned().collect();
    for name in &store_names {
        load_params(
            &bundle,
            &format!("psi/{name}"),
            trainer.mixer_params.stores.get_mut(name).unwrap(),
        )?;
        load_params(
            &bundle,
            &format!("psi_target/{name}"),
            trainer.target_mixer_params.stores.get_mut(name).unwrap(),
        )?;
    }
    for (i, opt) in trainer.main_opts.iter_mut().enumerate() {
        load_optim(&bundle, &format!("opt/theta/a{i}"), opt);
    }
    for (i, opt) in trainer.prop_opts.iter_mut().enumerate() {
        load_optim(&bundle, &format!("opt/theta_hat/a{i}"), opt);
    }
    for (i, opt) in trainer.critic_opts.iter_mut().enumerate() {
        load_optim(&bundle, &format!("opt/phi/a{i}"), opt);
    }
    for name in &store_names {
        load_optim(
            &bundle,
            &format!("opt/psi/{name}"),
            trainer.mixer_opts.get_mut(name).unwrap(),
        );
    }
    trainer.collect_rng = load_rng(&bundle, "rng/collect")?;
    trainer.train_rng = load_rng(&bundle, "rng/train")?;
    trainer.eval_rng = load_rng(&bundle, "rng/eval")?;
    let buffer_rng = load_rng(&bundle, "rng/buffer")?;

    let count = bundle.scalar("replay/count")? as usize;
    let action_space = trainer.env.spec().action_space.clone();
    let k = trainer.env.spec().num_agents;
    trainer.buffer.clear();
    for i in 0..count {
        let ep = load_episode(&bundle, &format!("replay/ep{i}"), &action_space, k)?;
        trainer.buffer.append_episode(ep)?;
    }
    *trainer.buffer.rng_mut() = buffer_rng;
    Ok(())
}

