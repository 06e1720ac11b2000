//! Environment abstraction (a DEC-POMDP surface) and the built-in desk-scale
//! environments: continuous predator-prey, configurable cooperative matrix
//! games, and small tabular multi-agent MDPs used by the oracle tests.

mod matrix_game;
mod predator_prey;
mod tabular;

pub use matrix_game::{MatrixGame, MatrixGameConfig};
pub use predator_prey::{PredatorPrey, PredatorPreyConfig};
pub use tabular::{TabularMdp, TabularMdpConfig};

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Action space shared by all agents of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    /// Finite action set of the given size.
    Discrete(usize),
    /// Box in R^dim; actions are clipped to ±bound at execution time.
    Continuous { dim: usize, bound: f64 },
}

impl ActionSpace {
    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }
}

/// One agent's action.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentAction {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl AgentAction {
    pub fn discrete_index(&self) -> usize {
        match self {
            AgentAction::Discrete(i) => *i,
            AgentAction::Continuous(_) => panic!("expected a discrete action"),
        }
    }

    pub fn continuous_values(&self) -> &[f64] {
        match self {
            AgentAction::Continuous(v) => v,
            AgentAction::Discrete(_) => panic!("expected a continuous action"),
        }
    }
}

/// Actions of all agents at one step, indexed by agent.
pub type JointAction = Vec<AgentAction>;

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub num_agents: usize,
    pub action_space: ActionSpace,
    pub obs_dim: usize,
    pub state_dim: Option<usize>,
    pub step_limit: usize,
    /// Advisory discount for this task.
    pub gamma: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 {
            return Err(Error::config("an environment needs at least one agent"));
        }
        if self.step_limit == 0 {
            return Err(Error::config("step limit must be at least 1"));
        }
        Ok(())
    }
}

/// Observations (one per agent) plus the optional global state.
#[derive(Debug, Clone)]
pub struct Observations {
    pub per_agent: Vec<Vec<f64>>,
    pub state: Option<Vec<f64>>,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: Observations,
    pub reward: f64,
    /// True termination (goal/absorbing state), not step-limit truncation.
    pub terminal: bool,
}

/// A cooperative multi-agent environment. Instances are single-threaded;
/// run one per rollout worker with independent rng streams.
pub trait Env {
    fn spec(&self) -> &EnvSpec;

    /// Resets to an initial configuration; deterministic given the rng state.
    fn reset(&mut self, rng: &mut ChaCha12Rng) -> Observations;

    /// Advances one step under the joint action.
    fn step(&mut self, joint_action: &JointAction, rng: &mut ChaCha12Rng) -> Result<StepOutcome>;

    /// Whether an episode with the given reward sequence counts as a
    /// success; `None` when the task defines no success notion.
    fn episode_success(&self, _rewards: &[f64]) -> Option<bool> {
        None
    }
}

pub(crate) fn check_joint_action(spec: &EnvSpec, joint: &JointAction) -> Result<()> {
    if joint.len() != spec.num_agents {
        return Err(Error::usage(format!(
            "joint action has {} entries for {} agents",
            joint.len(),
            spec.num_agents
        )));
    }
    for action in joint {
        match (&spec.action_space, action) {
            (ActionSpace::Discrete(n), AgentAction::Discrete(i)) => {
                if i >= n {
                    return Err(Error::usage(format!(
                        "action index {i} out of range for {n} actions"
                    )));
                }
            }
            (ActionSpace::Continuous { dim, .. }, AgentAction::Continuous(v)) => {
                if v.len() != *dim {
                    return Err(Error::usage(format!(
                        "continuous action has dim {} (expected {dim})",
                        v.len()
                    )));
                }
            }
            _ => return Err(Error::usage("action kind does not match action space")),
        }
    }
    Ok(())
}

/// Mixed-radix encoding of a joint discrete action: agent 0 is the most
/// significant digit. Used for payoff-tensor indexing and CSV side files.
pub fn joint_action_index(actions: &[usize], num_actions: usize) -> usize {
    actions
        .iter()
        .fold(0, |acc, &a| acc * num_actions + a)
}

/// Inverse of [`joint_action_index`].
pub fn joint_action_from_index(mut index: usize, num_agents: usize, num_actions: usize) -> Vec<usize> {
    let mut digits = vec![0usize; num_agents];
    for slot in digits.iter_mut().rev() {
        *slot = index % num_actions;
        index /= num_actions;
    }
    digits
}
