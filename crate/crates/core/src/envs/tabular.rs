//! Small tabular multi-agent MDPs: the substrate for dynamic-programming
//! oracles and fixed-point tests.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_joint_action, ActionSpace, Env, EnvSpec, JointAction, Observations, StepOutcome,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdpConfig {
    pub num_states: usize,
    pub num_agents: usize,
    pub num_actions: usize,
    /// `transitions[s][j][s']` = P(s' | s, joint action j), row-stochastic.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][j]` for joint action index j (mixed-radix).
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
    pub step_limit: usize,
    /// States with no outgoing reward/behavior (episode ends on entry).
    pub terminal_states: Vec<usize>,
}

impl TabularMdpConfig {
    pub fn num_joint_actions(&self) -> usize {
        self.num_actions.pow(self.num_agents as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_agents == 0 || self.num_actions == 0 {
            return Err(Error::config("tabular MDP needs states, agents, actions"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1)"));
        }
        let j = self.num_joint_actions();
        if self.transitions.len() != self.num_states || self.rewards.len() != self.num_states {
            return Err(Error::config("transition/reward tables must cover all states"));
        }
        for (s, per_action) in self.transitions.iter().enumerate() {
            if per_action.len() != j {
                return Err(Error::config(format!(
                    "state {s}: expected {j} transition rows"
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != self.num_states {
                    return Err(Error::config(format!(
                        "state {s} action {a}: row length mismatch"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::config(format!(
                        "state {s} action {a}: transition row is not stochastic (sum {sum})"
                    )));
                }
            }
        }
        for (s, row) in self.rewards.iter().enumerate() {
            if row.len() != j {
                return Err(Error::config(format!("state {s}: reward row length mismatch")));
            }
        }
        Ok(())
    }

    /// A deterministic 5-state, 2-agent, 2-action chain used in examples:
    /// coordinated actions advance, otherwise the chain resets.
    pub fn chain_preset() -> Self {
        let num_states = 5;
        let num_agents = 2;
        let num_actions = 2;
        let j = 4;
        let mut transitions = vec![vec![vec![0.0; num_states]; j]; num_states];
        let mut rewards = vec![vec![0.0; j]; num_states];
        for s in 0..num_states {
            for a in 0..j {
                let coordinated = a == 0b11; // both agents choose action 1
                let next = if coordinated {
                    (s + 1).min(num_states - 1)
                } else {
                    0
                };
                transitions[s][a][next] = 1.0;
                if coordinated && s == num_states - 2 {
                    rewards[s][a] = 1.0;
                }
            }
        }
        TabularMdpConfig {
            num_states,
            num_agents,
            num_actions,
            transitions,
            rewards,
            gamma: 0.9,
            step_limit: 20,
            terminal_states: vec![],
        }
    }

    /// A random stochastic MDP for fixed-point and oracle tests.
    pub fn random(
        num_states: usize,
        num_agents: usize,
        num_actions: usize,
        gamma: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let j = num_actions.pow(num_agents as u32);
        let mut transitions = vec![vec![vec![0.0; num_states]; j]; num_states];
        let mut rewards = vec![vec![0.0; j]; num_states];
        for s in 0..num_states {
            for a in 0..j {
                let raw: Vec<f64> = (0..num_states).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                for (sp, &p) in raw.iter().enumerate() {
                    transitions[s][a][sp] = p / total;
                }
                rewards[s][a] = rng.gen_range(-1.0..1.0);
            }
        }
        TabularMdpConfig {
            num_states,
            num_agents,
            num_actions,
            transitions,
            rewards,
            gamma,
            step_limit: 50,
            terminal_states: vec![],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TabularMdp {
    config: TabularMdpConfig,
    spec: EnvSpec,
    state: usize,
    steps_taken: usize,
}

impl TabularMdp {
    pub fn new(config: TabularMdpConfig) -> Result<Self> {
        config.validate()?;
        let spec = EnvSpec {
            num_agents: config.num_agents,
            action_space: ActionSpace::Discrete(config.num_actions),
            obs_dim: config.num_states,
            state_dim: Some(config.num_states),
            step_limit: config.step_limit,
            gamma: config.gamma,
        };
        Ok(TabularMdp {
            config,
            spec,
            state: 0,
            steps_taken: 0,
        })
    }

    pub fn config(&self) -> &TabularMdpConfig {
        &self.config
    }

    pub fn state(&self) -> usize {
        self.state
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.config.num_states];
        v[s] = 1.0;
        v
    }

    fn observations(&self) -> Observations {
        Observations {
            per_agent: vec![self.one_hot(self.state); self.config.num_agents],
            state: Some(self.one_hot(self.state)),
        }
    }
}

impl Env for TabularMdp {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut ChaCha12Rng) -> Observations {
        self.state = 0;
        self.steps_taken = 0;
        self.observations()
    }

    fn step(&mut self, joint_action: &JointAction, rng: &mut ChaCha12Rng) -> Result<StepOutcome> {
        check_joint_action(&self.spec, joint_action)?;
        let digits: Vec<usize> = joint_action.iter().map(|a| a.discrete_index()).collect();
        let j = super::joint_action_index(&digits, self.config.num_actions);
        let reward = self.config.rewards[self.state][j];
        let row = &self.config.transitions[self.state][j];
        let draw: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut next = self.config.num_states - 1;
        for (sp, &p) in row.iter().enumerate() {
            acc += p;
            if draw < acc {
                next = sp;
                break;
            }
        }
        self.state = next;
        self.steps_taken += 1;
        let terminal = self.config.terminal_states.contains(&next);
        Ok(StepOutcome {
            observations: self.observations(),
            reward,
            terminal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn reset_starts_in_state_zero_with_one_hot_obs() {
        let mut env = TabularMdp::new(TabularMdpConfig::chain_preset()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let obs = env.reset(&mut rng);
        assert_eq!(obs.per_agent[0], vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(obs.state.unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_config_rows_are_stochastic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let cfg = TabularMdpConfig::random(5, 2, 3, 0.9, &mut rng);
        cfg.validate().unwrap();
    }

    #[test]
    fn empirical_transitions_match_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let cfg = TabularMdpConfig::random(4, 1, 2, 0.9, &mut rng);
        let mut env = TabularMdp::new(cfg.clone()).unwrap();
        env.reset(&mut rng);
        // Hold state 0, action 0 fixed and histogram the next states.
        let n = 100_000;
        let mut counts = vec![0usize; cfg.num_states];
        for _ in 0..n {
            env.state = 0;
            let out = env
                .step(&vec![super::super::AgentAction::Discrete(0)], &mut rng)
                .unwrap();
            let next = out
                .state_index()
                .unwrap_or_else(|| panic!("state observation missing"));
            counts[next] += 1;
        }
        let mut tv = 0.0;
        for sp in 0..cfg.num_states {
            tv += (counts[sp] as f64 / n as f64 - cfg.transitions[0][0][sp]).abs();
        }
        assert!(tv / 2.0 < 0.01, "total variation {tv}");
    }

    impl StepOutcome {
        fn state_index(&self) -> Option<usize> {
            self.observations
                .state
                .as_ref()
                .map(|s| s.iter().position(|&x| x == 1.0).unwrap())
        }
    }
}
