//! Episodic replay storage with behavior-policy log-probabilities.
//!
//! Episodes are stored whole (not as flat transitions) because recurrent
//! encoders and the n-step return operator need contiguous history.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::envs::JointAction;
use crate::error::{Error, Result};

/// One transition record. The behavior log-probs are the per-agent
/// log π^a(u^a | τ^a) of the policy snapshot that generated the step; they
/// are the minimal sufficient statistic for all off-policy coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub state: Option<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub joint_action: JointAction,
    pub reward: f64,
    pub terminal: bool,
    pub behavior_logprobs: Vec<f64>,
}

/// An ordered trajectory. `final_observations`/`final_state` hold the
/// post-step view after the last stored transition so bootstrapping works
/// across step-limit truncation (where `terminal` stays false).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    pub final_observations: Vec<Vec<f64>>,
    pub final_state: Option<Vec<f64>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::usage("episode has no steps"));
        }
        for (t, step) in self.steps.iter().enumerate() {
            if step.terminal && t + 1 != self.steps.len() {
                return Err(Error::usage(format!(
                    "terminal flag set at step {t} before the episode end"
                )));
            }
            if step.behavior_logprobs.iter().any(|lp| !lp.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite behavior log-prob at step {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO ring of episodes with uniform with-replacement
/// sampling from an owned rng stream.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    rng: ChaCha12Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha12Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(4096)),
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episode(&self, idx: usize) -> &Episode {
        &self.episodes[idx]
    }

    pub fn newest(&self) -> Option<&Episode> {
        self.episodes.back()
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha12Rng {
        &mut self.rng
    }

    pub fn rng_ref(&self) -> &ChaCha12Rng {
        &self.rng
    }

    /// Appends an episode, evicting the oldest when over capacity.
    pub fn append_episode(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    /// Draws `batch_size` episode indices uniformly with replacement.
    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if self.episodes.is_empty() {
            return Err(Error::usage("cannot sample from an empty replay buffer"));
        }
        let n = self.episodes.len();
        Ok((0..batch_size).map(|_| self.rng.gen_range(0..n)).collect())
    }

    /// Episode slice `[t, t+n)`, truncated at the episode end.
    pub fn window<'a>(episode: &'a Episode, t: usize, n: usize) -> Result<&'a [EpisodeStep]> {
        if t >= episode.len() {
            return Err(Error::usage(format!(
                "window start {t} out of range for episode of length {}",
                episode.len()
            )));
        }
        let end = (t + n).min(episode.len());
        Ok(&episode.steps[t..end])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::AgentAction;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    fn episode(tag: f64, len: usize) -> Episode {
        let steps = (0..len)
            .map(|t| EpisodeStep {
                state: Some(vec![tag, t as f64]),
                observations: vec![vec![tag], vec![t as f64]],
                joint_action: vec![AgentAction::Discrete(0), AgentAction::Discrete(1)],
                reward: tag,
                terminal: t + 1 == len,
                behavior_logprobs: vec![-0.5, -0.25],
            })
            .collect();
        Episode {
            steps,
            final_observations: vec![vec![tag], vec![0.0]],
            final_state: Some(vec![tag, len as f64]),
        }
    }

    fn buffer(capacity: usize) -> ReplayBuffer {
        ReplayBuffer::new(capacity, ChaCha12Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = buffer(2);
        for tag in 0..3 {
            buf.append_episode(episode(tag as f64, 2)).unwrap();
        }
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.episode(0).steps[0].reward, 1.0);
        assert_eq!(buf.episode(1).steps[0].reward, 2.0);
    }

    #[test]
    fn append_rejects_empty_and_bad_episodes() {
        let mut buf = buffer(4);
        assert!(buf.append_episode(Episode::default()).is_err());
        let mut bad = episode(1.0, 3);
        bad.steps[0].terminal = true;
        assert!(buf.append_episode(bad).is_err());
        let mut nan = episode(1.0, 2);
        nan.steps[1].behavior_logprobs[0] = f64::NAN;
        assert!(buf.append_episode(nan).is_err());
    }

    #[test]
    fn stored_fields_round_trip_bit_identically() {
        let mut buf = buffer(4);
        let ep = episode(0.12345678901234567, 3);
        buf.append_episode(ep.clone()).unwrap();
        assert_eq!(buf.episode(0), &ep);
    }

    #[test]
    fn sampling_is_deterministic_and_uniform() {
        let mut a = buffer(16);
        let mut b = buffer(16);
        for tag in 0..10 {
            a.append_episode(episode(tag as f64, 1)).unwrap();
            b.append_episode(episode(tag as f64, 1)).unwrap();
        }
        assert_eq!(a.sample_batch(32).unwrap(), b.sample_batch(32).unwrap());

        let mut counts = vec![0usize; 10];
        for idx in a.sample_batch(100_000).unwrap() {
            counts[idx] += 1;
        }
        for c in counts {
            let freq = c as f64 / 100_000.0;
            assert!((freq - 0.1).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn sampling_empty_buffer_is_a_usage_error() {
        let mut buf = buffer(2);
        assert!(matches!(buf.sample_batch(1), Err(Error::Usage(_))));
    }

    #[test]
    fn single_episode_batches_repeat_it() {
        let mut buf = buffer(2);
        buf.append_episode(episode(5.0, 1)).unwrap();
        assert_eq!(buf.sample_batch(4).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn window_edges() {
        let ep = episode(1.0, 4);
        assert_eq!(ReplayBuffer::window(&ep, 3, 10).unwrap().len(), 1);
        assert_eq!(ReplayBuffer::window(&ep, 0, 4).unwrap().len(), 4);
        assert!(ReplayBuffer::window(&ep, 4, 1).is_err());
    }

    proptest! {
        #[test]
        fn capacity_invariant_under_many_appends(lens in proptest::collection::vec(1usize..4, 1..60)) {
            let mut buf = buffer(7);
            for (i, len) in lens.iter().enumerate() {
                buf.append_episode(episode(i as f64, *len)).unwrap();
                prop_assert!(buf.len() <= 7);
                prop_assert_eq!(buf.newest().unwrap().steps[0].reward, i as f64);
            }
        }

        #[test]
        fn window_matches_slice_oracle(t in 0usize..6, n in 1usize..10) {
            let ep = episode(2.0, 6);
            let win = ReplayBuffer::window(&ep, t, n).unwrap();
            let expect: Vec<_> = ep.steps.iter().skip(t).take(n).cloned().collect();
            prop_assert_eq!(win, expect.as_slice());
        }
    }

    #[test]
    fn stress_many_appends_at_capacity() {
        let mut buf = buffer(100);
        for i in 0..10_000 {
            buf.append_episode(episode(i as f64, 1)).unwrap();
            assert_eq!(buf.len(), 100.min(i + 1));
        }
        assert_eq!(buf.newest().unwrap().steps[0].reward, 9999.0);
    }
}
