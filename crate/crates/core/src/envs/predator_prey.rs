//! Continuous predator-prey on a 2D plane: N slower cooperative predators
//! pursue M faster scripted prey among circular landmark obstacles.
//!
//! Rewards follow the cooperative-capture rule: a capture with at least one
//! other predator in proximity of the prey yields +10 for the team, an
//! isolated capture costs -1, everything else is 0. Each agent observes only
//! entities within its view radius.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_joint_action, ActionSpace, Env, EnvSpec, JointAction, Observations, StepOutcome,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredatorPreyConfig {
    pub num_predators: usize,
    pub num_prey: usize,
    /// Half-extent of the square world.
    pub world_extent: f64,
    pub predator_max_speed: f64,
    pub prey_max_speed: f64,
    pub view_radius: f64,
    pub capture_radius: f64,
    pub proximity_radius: f64,
    pub num_landmarks: usize,
    pub landmark_radius: f64,
    pub damping: f64,
    pub dt: f64,
    /// Force scale applied to the clipped action.
    pub accel_gain: f64,
    pub step_limit: usize,
    /// Scripted prey flee the nearest visible predator by default; this flag
    /// switches them to uniform-random acceleration.
    pub random_prey: bool,
}

impl Default for PredatorPreyConfig {
    fn default() -> Self {
        PredatorPreyConfig {
            num_predators: 3,
            num_prey: 1,
            world_extent: 1.0,
            predator_max_speed: 1.0,
            prey_max_speed: 1.3,
            view_radius: 1.0,
            capture_radius: 0.1,
            proximity_radius: 0.3,
            num_landmarks: 2,
            landmark_radius: 0.2,
            damping: 0.25,
            dt: 0.1,
            accel_gain: 5.0,
            step_limit: 25,
            random_prey: false,
        }
    }
}

impl PredatorPreyConfig {
    /// Scenario presets: 3 predators/1 prey, 6/2, 9/3.
    pub fn preset(predators: usize, prey: usize) -> Self {
        PredatorPreyConfig {
            num_predators: predators,
            num_prey: prey,
            ..PredatorPreyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_predators == 0 || self.num_prey == 0 {
            return Err(Error::config("need at least one predator and one prey"));
        }
        if self.prey_max_speed <= self.predator_max_speed {
            return Err(Error::config("prey must be strictly faster than predators"));
        }
        if !(self.capture_radius < self.proximity_radius
            && self.proximity_radius < self.view_radius)
        {
            return Err(Error::config(
                "radii must satisfy capture < proximity < view",
            ));
        }
        if self.dt <= 0.0 || self.world_extent <= 0.0 || self.step_limit == 0 {
            return Err(Error::config("dt, world extent and step limit must be positive"));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        // own pos+vel, then [flag, rel pos, rel vel] per other predator and
        // prey, then [flag, rel pos] per landmark.
        4 + (self.num_predators - 1) * 5 + self.num_prey * 5 + self.num_landmarks * 3
    }

    pub fn state_dim(&self) -> usize {
        (self.num_predators + self.num_prey) * 4 + self.num_landmarks * 2
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Body {
    pos: [f64; 2],
    vel: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct PredatorPrey {
    config: PredatorPreyConfig,
    spec: EnvSpec,
    predators: Vec<Body>,
    prey: Vec<Body>,
    landmarks: Vec<[f64; 2]>,
    steps_taken: usize,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PredatorPrey {
    pub fn new(config: PredatorPreyConfig) -> Result<Self> {
        config.validate()?;
        let spec = EnvSpec {
            num_agents: config.num_predators,
            action_space: ActionSpace::Continuous { dim: 2, bound: 1.0 },
            obs_dim: config.obs_dim(),
            state_dim: Some(config.state_dim()),
            step_limit: config.step_limit,
            gamma: 0.9,
        };
        Ok(PredatorPrey {
            config,
            spec,
            predators: Vec::new(),
            prey: Vec::new(),
            landmarks: Vec::new(),
            steps_taken: 0,
        })
    }

    pub fn config(&self) -> &PredatorPreyConfig {
        &self.config
    }

    /// Observation of one agent: relative positions/velocities of entities
    /// inside the (closed) view ball, zero-masked outside with presence
    /// flags.
    pub fn observe(&self, agent: usize) -> Vec<f64> {
        let cfg = &self.config;
        let me = &self.predators[agent];
        let mut obs = Vec::with_capacity(cfg.obs_dim());
        obs.extend_from_slice(&me.pos);
        obs.extend_from_slice(&me.vel);
        let mut push_body = |other: &Body| {
            if dist(me.pos, other.pos) <= cfg.view_radius {
                obs.push(1.0);
                obs.push(other.pos[0] - me.pos[0]);
                obs.push(other.pos[1] - me.pos[1]);
                obs.push(other.vel[0] - me.vel[0]);
                obs.push(other.vel[1] - me.vel[1]);
            } else {
                obs.extend_from_slice(&[0.0; 5]);
            }
        };
        for (i, other) in self.predators.iter().enumerate() {
            if i != agent {
                push_body(other);
            }
        }
        for p in &self.prey {
            push_body(p);
        }
        for lm in &self.landmarks {
            if dist(me.pos, *lm) <= cfg.view_radius {
                obs.push(1.0);
                obs.push(lm[0] - me.pos[0]);
                obs.push(lm[1] - me.pos[1]);
            } else {
                obs.extend_from_slice(&[0.0; 3]);
            }
        }
        obs
    }

    fn global_state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.config.state_dim());
        for b in self.predators.iter().chain(&self.prey) {
            s.extend_from_slice(&b.pos);
            s.extend_from_slice(&b.vel);
        }
        for lm in &self.landmarks {
            s.extend_from_slice(lm);
        }
        s
    }

    fn observations(&self) -> Observations {
        Observations {
            per_agent: (0..self.config.num_predators)
                .map(|a| self.observe(a))
                .collect(),
            state: Some(self.global_state()),
        }
    }

    fn integrate(&self, body: &mut Body, accel: [f64; 2], max_speed: f64) {
        let cfg = &self.config;
        body.vel[0] = body.vel[0] * (1.0 - cfg.damping) + accel[0] * cfg.dt;
        body.vel[1] = body.vel[1] * (1.0 - cfg.damping) + accel[1] * cfg.dt;
        let speed = (body.vel[0].powi(2) + body.vel[1].powi(2)).sqrt();
        if speed > max_speed {
            let scale = max_speed / speed;
            body.vel[0] *= scale;
            body.vel[1] *= scale;
        }
        body.pos[0] += body.vel[0] * cfg.dt;
        body.pos[1] += body.vel[1] * cfg.dt;
        // Walls: clamp position, zero the outward velocity component.
        for axis in 0..2 {
            if body.pos[axis] > cfg.world_extent {
                body.pos[axis] = cfg.world_extent;
                body.vel[axis] = 0.0;
            } else if body.pos[axis] < -cfg.world_extent {
                body.pos[axis] = -cfg.world_extent;
                body.vel[axis] = 0.0;
            }
        }
        // Rigid landmarks: project out the penetration component.
        for lm in &self.landmarks {
            let d = dist(body.pos, *lm);
            if d < cfg.landmark_radius {
                if d > 1e-12 {
                    let nx = (body.pos[0] - lm[0]) / d;
                    let ny = (body.pos[1] - lm[1]) / d;
                    body.pos[0] = lm[0] + nx * cfg.landmark_radius;
                    body.pos[1] = lm[1] + ny * cfg.landmark_radius;
                    let vn = body.vel[0] * nx + body.vel[1] * ny;
                    if vn < 0.0 {
                        body.vel[0] -= vn * nx;
                        body.vel[1] -= vn * ny;
                    }
                } else {
                    body.pos[0] = lm[0] + cfg.landmark_radius;
                }
            }
        }
    }

    fn prey_accel(&self, prey_idx: usize, rng: &mut ChaCha12Rng) -> [f64; 2] {
        let cfg = &self.config;
        if cfg.random_prey {
            return [
                rng.gen_range(-1.0..=1.0) * cfg.accel_gain,
                rng.gen_range(-1.0..=1.0) * cfg.accel_gain,
            ];
        }
        let p = &self.prey[prey_idx];
        let mut nearest: Option<(f64, [f64; 2])> = None;
        for pred in &self.predators {
            let d = dist(p.pos, pred.pos);
            if d <= cfg.view_radius && nearest.map_or(true, |(nd, _)| d < nd) {
                nearest = Some((d, pred.pos));
            }
        }
        match nearest {
            Some((d, from)) if d > 1e-12 => {
                let away = [(p.pos[0] - from[0]) / d, (p.pos[1] - from[1]) / d];
                [away[0] * cfg.accel_gain, away[1] * cfg.accel_gain]
            }
            Some(_) => [cfg.accel_gain, 0.0],
            None => [0.0, 0.0],
        }
    }

    /// Step reward: +10 if any cooperative capture happened, else -1 if any
    /// isolated capture happened, else 0.
    fn capture_reward(&self) -> f64 {
        let cfg = &self.config;
        let mut isolated = false;
        for prey in &self.prey {
            let captured = self
                .predators
                .iter()
                .any(|pred| dist(pred.pos, prey.pos) <= cfg.capture_radius);
            if !captured {
                continue;
            }
            let nearby = self
                .predators
                .iter()
                .filter(|pred| dist(pred.pos, prey.pos) <= cfg.proximity_radius)
                .count();
            if nearby >= 2 {
                return 10.0;
            }
            isolated = true;
        }
        if isolated {
            -1.0
        } else {
            0.0
        }
    }
}

impl Env for PredatorPrey {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha12Rng) -> Observations {
        let cfg = self.config.clone();
        let e = cfg.world_extent;
        // Landmarks first, rejection-sampled so they never overlap.
        self.landmarks.clear();
        while self.landmarks.len() < cfg.num_landmarks {
            let candidate = [rng.gen_range(-e..=e), rng.gen_range(-e..=e)];
            let clear = self
                .landmarks
                .iter()
                .all(|lm| dist(*lm, candidate) >= 2.0 * cfg.landmark_radius);
            if clear {
                self.landmarks.push(candidate);
            }
        }
        let spawn = |rng: &mut ChaCha12Rng, landmarks: &[[f64; 2]]| -> Body {
            let mut body = Body {
                pos: [rng.gen_range(-e..=e), rng.gen_range(-e..=e)],
                vel: [0.0, 0.0],
            };
            // Push spawns out of landmark interiors.
            for lm in landmarks {
                let d = dist(body.pos, *lm);
                if d < cfg.landmark_radius && d > 1e-12 {
                    let scale = cfg.landmark_radius / d;
                    body.pos[0] = lm[0] + (body.pos[0] - lm[0]) * scale;
                    body.pos[1] = lm[1] + (body.pos[1] - lm[1]) * scale;
                }
            }
            body
        };
        self.predators = (0..cfg.num_predators)
            .map(|_| spawn(rng, &self.landmarks))
            .collect();
        self.prey = (0..cfg.num_prey)
            .map(|_| spawn(rng, &self.landmarks))
            .collect();
        self.steps_taken = 0;
        self.observations()
    }

    fn step(&mut self, joint_action: &JointAction, rng: &mut ChaCha12Rng) -> Result<StepOutcome> {
        check_joint_action(&self.spec, joint_action)?;
        let cfg = self.config.clone();
        // Predators move under their (clipped) actions.
        let mut predators = self.predators.clone();
        for (body, action) in predators.iter_mut().zip(joint_action) {
            let raw = action.continuous_values();
            let accel = [
                raw[0].clamp(-1.0, 1.0) * cfg.accel_gain,
                raw[1].clamp(-1.0, 1.0) * cfg.accel_gain,
            ];
            self.integrate(body, accel, cfg.predator_max_speed);
        }
        // Prey flee based on the pre-move predator positions.
        let mut prey = self.prey.clone();
        for (i, body) in prey.iter_mut().enumerate() {
            let accel = self.prey_accel(i, rng);
            self.integrate(body, accel, cfg.prey_max_speed);
        }
        self.predators = predators;
        self.prey = prey;
        self.steps_taken += 1;
        let reward = self.capture_reward();
        Ok(StepOutcome {
            observations: self.observations(),
            reward,
            // Continuing task: episodes end only by the step limit.
            terminal: false,
        })
    }

    fn episode_success(&self, rewards: &[f64]) -> Option<bool> {
        Some(rewards.iter().any(|&r| r == 10.0))
    }
}
