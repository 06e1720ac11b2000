//! Cooperative one-shot (or repeated) matrix games over a shared payoff
//! tensor. The discrete testbed for elite-selection and the
//! centralized-decentralized-mismatch demonstration.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_joint_action, ActionSpace, Env, EnvSpec, JointAction, Observations, StepOutcome,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixGameConfig {
    pub num_agents: usize,
    pub num_actions: usize,
    /// Flat payoff tensor in mixed-radix joint-action order (agent 0 most
    /// significant digit), length `num_actions^num_agents`.
    pub payoffs: Vec<f64>,
    pub episode_len: usize,
}

impl MatrixGameConfig {
    pub fn new(num_agents: usize, num_actions: usize, payoffs: Vec<f64>) -> Result<Self> {
        let cfg = MatrixGameConfig {
            num_agents,
            num_actions,
            payoffs,
            episode_len: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 || self.num_actions == 0 {
            return Err(Error::config("matrix game needs agents and actions"));
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode length must be at least 1"));
        }
        let expect = self.num_actions.pow(self.num_agents as u32);
        if self.payoffs.len() != expect {
            return Err(Error::config(format!(
                "payoff tensor has {} entries, expected {}",
                self.payoffs.len(),
                expect
            )));
        }
        Ok(())
    }

    /// A 2-agent 3-action climbing-style game: the best joint action sits
    /// next to heavy miscoordination penalties, so centralized-gradient
    /// learners retreat to the safe corner.
    pub fn penalty_preset() -> Self {
        MatrixGameConfig {
            num_agents: 2,
            num_actions: 3,
            payoffs: vec![
                11.0, -30.0, 0.0, //
                -30.0, 7.0, 6.0, //
                0.0, 0.0, 5.0,
            ],
            episode_len: 1,
        }
    }

    /// Parses a payoff side file: one payoff per line, line number = joint
    /// action index in mixed-radix order.
    pub fn payoffs_from_csv(text: &str) -> Result<Vec<f64>> {
        let mut payoffs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            // Tolerate a trailing comma column.
            let field = trimmed.split(',').next().unwrap().trim();
            let value: f64 = field.parse().map_err(|_| {
                Error::config(format!(
                    "payoff file line {}: cannot parse {field:?} as a number",
                    lineno + 1
                ))
            })?;
            payoffs.push(value);
        }
        if payoffs.is_empty() {
            return Err(Error::config("payoff file contains no values"));
        }
        Ok(payoffs)
    }

    pub fn payoff(&self, actions: &[usize]) -> f64 {
        self.payoffs[super::joint_action_index(actions, self.num_actions)]
    }

    pub fn max_payoff(&self) -> f64 {
        self.payoffs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct MatrixGame {
    config: MatrixGameConfig,
    spec: EnvSpec,
    steps_taken: usize,
}

impl MatrixGame {
    pub fn new(config: MatrixGameConfig) -> Result<Self> {
        config.validate()?;
        let spec = EnvSpec {
            num_agents: config.num_agents,
            action_space: ActionSpace::Discrete(config.num_actions),
            obs_dim: 1,
            state_dim: Some(1),
            step_limit: config.episode_len,
            gamma: 0.99,
        };
        Ok(MatrixGame {
            config,
            spec,
            steps_taken: 0,
        })
    }

    pub fn config(&self) -> &MatrixGameConfig {
        &self.config
    }

    fn observations(&self) -> Observations {
        // Stateless game: every agent sees the constant start token.
        Observations {
            per_agent: vec![vec![1.0]; self.config.num_agents],
            state: Some(vec![1.0]),
        }
    }
}

impl Env for MatrixGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut ChaCha12Rng) -> Observations {
        self.steps_taken = 0;
        self.observations()
    }

    fn step(&mut self, joint_action: &JointAction, _rng: &mut ChaCha12Rng) -> Result<StepOutcome> {
        check_joint_action(&self.spec, joint_action)?;
        let actions: Vec<usize> = joint_action.iter().map(|a| a.discrete_index()).collect();
        let reward = self.config.payoff(&actions);
        self.steps_taken += 1;
        Ok(StepOutcome {
            observations: self.observations(),
            reward,
            terminal: self.steps_taken >= self.config.episode_len,
        })
    }

    fn episode_success(&self, rewards: &[f64]) -> Option<bool> {
        let best = self.config.max_payoff() * self.config.episode_len as f64;
        Some(rewards.iter().sum::<f64>() >= best - 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn payoff_lookup_and_termination() {
        let mut cfg = MatrixGameConfig::penalty_preset();
        cfg.payoffs[0] = 11.0;
        let mut game = MatrixGame::new(cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let obs = game.reset(&mut rng);
        assert_eq!(obs.per_agent, vec![vec![1.0], vec![1.0]]);
        let out = game
            .step(
                &vec![AgentAction::Discrete(0), AgentAction::Discrete(0)],
                &mut rng,
            )
            .unwrap();
        assert_eq!(out.reward, 11.0);
        assert!(out.terminal);
    }

    #[test]
    fn rejects_wrong_payoff_length() {
        assert!(MatrixGameConfig::new(2, 3, vec![0.0; 8]).is_err());
    }

    #[test]
    fn rejects_out_of_range_action() {
        let mut game = MatrixGame::new(MatrixGameConfig::penalty_preset()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        game.reset(&mut rng);
        let result = game.step(
            &vec![AgentAction::Discrete(0), AgentAction::Discrete(7)],
            &mut rng,
        );
        assert!(result.is_err());
    }

    #[test]
    fn csv_parsing() {
        let text = "11\n-30\n0\n-30, note\n7\n6\n0\n0\n5\n";
        let payoffs = MatrixGameConfig::payoffs_from_csv(text).unwrap();
        assert_eq!(payoffs.len(), 9);
        assert_eq!(payoffs[1], -30.0);
        assert!(MatrixGameConfig::payoffs_from_csv("abc\n").is_err());
    }

    use super::super::AgentAction;
}
