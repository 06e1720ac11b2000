//! History encodings fed to policy and critic networks.
//!
//! Two realizations of the action-observation history τ^a:
//!
//! * recurrent — the per-step input is the current observation plus the
//!   previous action (one-hot or raw vector); the network's hidden state
//!   carries the rest of the history.
//! * window — the input is a stack of the last `window` observations,
//!   zero-padded at the episode start; used for tabular tests where the
//!   observation is already Markov.

use crate::envs::{ActionSpace, AgentAction};

#[derive(Debug, Clone)]
pub struct Encoder {
    pub recurrent: bool,
    pub window: usize,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
}

impl Encoder {
    pub fn new(recurrent: bool, window: usize, obs_dim: usize, action_space: ActionSpace) -> Self {
        Encoder {
            recurrent,
            window: window.max(1),
            obs_dim,
            action_space,
        }
    }

    pub fn action_vec_dim(&self) -> usize {
        match self.action_space {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Continuous { dim, .. } => dim,
        }
    }

    /// Width of one encoding vector.
    pub fn encoding_dim(&self) -> usize {
        if self.recurrent {
            self.obs_dim + self.action_vec_dim()
        } else {
            self.obs_dim * self.window
        }
    }

    fn action_vec(&self, action: Option<&AgentAction>) -> Vec<f64> {
        let mut v = vec![0.0; self.action_vec_dim()];
        if let Some(action) = action {
            match action {
                AgentAction::Discrete(i) => v[*i] = 1.0,
                AgentAction::Continuous(u) => v.copy_from_slice(u),
            }
        }
        v
    }

    /// Encoding at time `t` given the observation history `obs[0..=t]` of
    /// one agent and that agent's previous action (`None` at t = 0).
    pub fn encode(
        &self,
        obs_history: &[Vec<f64>],
        t: usize,
        prev_action: Option<&AgentAction>,
    ) -> Vec<f64> {
        if self.recurrent {
            let mut enc = Vec::with_capacity(self.encoding_dim());
            enc.extend_from_slice(&obs_history[t]);
            enc.extend(self.action_vec(prev_action));
            enc
        } else {
            let mut enc = vec![0.0; self.encoding_dim()];
            let take = self.window.min(t + 1);
            for k in 0..take {
                let slot = self.window - take + k;
                let obs = &obs_history[t + 1 - take + k];
                enc[slot * self.obs_dim..(slot + 1) * self.obs_dim].copy_from_slice(obs);
            }
            enc
        }
    }

    /// Encodings for every step of an episode plus one more for the
    /// post-episode observation (bootstrap position). `actions[t]` is the
    /// agent's action at step t.
    pub fn episode_encodings(
        &self,
        step_obs: &[Vec<f64>],
        final_obs: &[f64],
        actions: &[AgentAction],
    ) -> Vec<Vec<f64>> {
        let len = step_obs.len();
        let mut all_obs: Vec<Vec<f64>> = Vec::with_capacity(len + 1);
        all_obs.extend(step_obs.iter().cloned());
        all_obs.push(final_obs.to_vec());
        (0..=len)
            .map(|t| {
                let prev = if t == 0 { None } else { Some(&actions[t - 1]) };
                self.encode(&all_obs, t, prev)
            })
            .collect()
    }
}
