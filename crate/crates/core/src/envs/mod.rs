//! Deterministic toy pixel environments: a continuous-action point reacher
//! and a discrete falling-block catch game. Square grayscale frames, frame
//! stacking, action repeat with reward summation.

mod catch;
mod point_reach;

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use catch::Catch;
pub use point_reach::PointReach;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step() called on a finished episode")]
    StepAfterDone,
    #[error("invalid environment spec: {0}")]
    BadSpec(String),
    #[error("expected a {expected} action")]
    WrongActionKind { expected: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    PointReach,
    Catch,
}

#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub frame_size: usize,
    pub action_repeat: usize,
    pub frame_stack: usize,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.frame_size < 16 {
            return Err(EnvError::BadSpec(format!(
                "frame_size {} < 16",
                self.frame_size
            )));
        }
        if self.action_repeat < 1 || self.frame_stack < 1 {
            return Err(EnvError::BadSpec(
                "action_repeat and frame_stack must be >= 1".into(),
            ));
        }
        if self.max_episode_steps == 0 {
            return Err(EnvError::BadSpec("max_episode_steps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Action {
    Continuous(Vec<f32>),
    Discrete(usize),
}

/// Frame stack shared by both environments: newest frame last, oldest
/// dropped, reset repeats the first frame.
struct FrameStack {
    frames: VecDeque<Vec<u8>>,
    k: usize,
    size: usize,
}

impl FrameStack {
    fn new(k: usize, size: usize) -> Self {
        FrameStack {
            frames: VecDeque::with_capacity(k),
            k,
            size,
        }
    }

    fn reset(&mut self, frame: Vec<u8>) {
        self.frames.clear();
        for _ in 0..self.k {
            self.frames.push_back(frame.clone());
        }
    }

    fn push(&mut self, frame: Vec<u8>) {
        self.frames.pop_front();
        self.frames.push_back(frame);
    }

    fn observation(&self) -> Tensor<f32> {
        let hw = self.size * self.size;
        let mut data = vec![0f32; self.k * hw];
        for (i, f) in self.frames.iter().enumerate() {
            for (d, &q) in data[i * hw..(i + 1) * hw].iter_mut().zip(f) {
                *d = q as f32 / 255.0;
            }
        }
        Tensor::new(data, &[self.k, self.size, self.size])
    }
}

pub enum Env {
    PointReach(PointReach),
    Catch(Catch),
}

impl Env {
    pub fn new(spec: &EnvSpec) -> Result<Env, EnvError> {
        spec.validate()?;
        Ok(match spec.kind {
            EnvKind::PointReach => Env::PointReach(PointReach::new(spec)),
            EnvKind::Catch => Env::Catch(Catch::new(spec)),
        })
    }

    /// Begin a fresh episode; the stack is filled with the first frame.
    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        match self {
            Env::PointReach(e) => e.reset(rng),
            Env::Catch(e) => e.reset(rng),
        }
    }

    /// Apply the action `action_repeat` times, summing rewards; stops early
    /// if the episode terminates mid-repeat.
    pub fn step(&mut self, action: &Action) -> Result<(Tensor<f32>, f32, bool), EnvError> {
        match self {
            Env::PointReach(e) => e.step(action),
            Env::Catch(e) => e.step(action),
        }
    }

    pub fn observation(&self) -> Tensor<f32> {
        match self {
            Env::PointReach(e) => e.observation(),
            Env::Catch(e) => e.observation(),
        }
    }

    /// Continuous action dimensionality, if continuous.
    pub fn action_dim(&self) -> Option<usize> {
        match self {
            Env::PointReach(_) => Some(2),
            Env::Catch(_) => None,
        }
    }

    /// Discrete action count, if discrete.
    pub fn action_count(&self) -> Option<usize> {
        match self {
            Env::PointReach(_) => None,
            Env::Catch(_) => Some(3),
        }
    }

    /// Newest rendered frame as raw bytes, for the frame-dump tool.
    pub fn newest_frame(&self) -> Vec<u8> {
        match self {
            Env::PointReach(e) => e.newest_frame(),
            Env::Catch(e) => e.newest_frame(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use rand::Rng;

    fn spec(kind: EnvKind) -> EnvSpec {
        EnvSpec {
            kind,
            frame_size: 24,
            action_repeat: 4,
            frame_stack: 3,
            max_episode_steps: 50,
        }
    }

    #[test]
    fn reset_shape_and_repeat_fill() {
        for kind in [EnvKind::PointReach, EnvKind::Catch] {
            let mut env = Env::new(&spec(kind)).unwrap();
            let mut rng = derive(1, Stream::Env);
            let obs = env.reset(&mut rng);
            assert_eq!(obs.shape(), &[3, 24, 24]);
            let hw = 24 * 24;
            let d = obs.data();
            assert_eq!(&d[..hw], &d[hw..2 * hw]);
            assert_eq!(&d[..hw], &d[2 * hw..]);
        }
    }

    #[test]
    fn same_seed_same_initial_observation() {
        for kind in [EnvKind::PointReach, EnvKind::Catch] {
            let mut e1 = Env::new(&spec(kind)).unwrap();
            let mut e2 = Env::new(&spec(kind)).unwrap();
            let o1 = e1.reset(&mut derive(9, Stream::Env));
            let o2 = e2.reset(&mut derive(9, Stream::Env));
            assert_eq!(o1.data(), o2.data());
        }
    }

    #[test]
    fn step_after_done_errors() {
        let mut env = Env::new(&spec(EnvKind::Catch)).unwrap();
        let mut rng = derive(2, Stream::Env);
        env.reset(&mut rng);
        let mut done = false;
        for _ in 0..100 {
            let (_, _, d) = env.step(&Action::Discrete(1)).unwrap();
            if d {
                done = true;
                break;
            }
        }
        assert!(done);
        assert!(matches!(
            env.step(&Action::Discrete(1)),
            Err(EnvError::StepAfterDone)
        ));
    }

    #[test]
    fn done_emitted_exactly_once_and_trajectory_deterministic() {
        let run = |seed: u64| {
            let mut env = Env::new(&spec(EnvKind::PointReach)).unwrap();
            let mut rng = derive(seed, Stream::Env);
            let mut arng = derive(seed + 1, Stream::Action);
            env.reset(&mut rng);
            let mut rewards = Vec::new();
            let mut dones = 0;
            loop {
                let a = Action::Continuous(vec![
                    arng.gen_range(-1.0f32..1.0),
                    arng.gen_range(-1.0f32..1.0),
                ]);
                let (_, r, d) = env.step(&a).unwrap();
                rewards.push(r);
                if d {
                    dones += 1;
                    break;
                }
            }
            (rewards, dones)
        };
        let (r1, d1) = run(5);
        let (r2, _) = run(5);
        assert_eq!(d1, 1);
        let b1: Vec<u32> = r1.iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u32> = r2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }

    #[test]
    fn catch_return_is_plus_or_minus_one() {
        for seed in 0..20 {
            let mut env = Env::new(&spec(EnvKind::Catch)).unwrap();
            let mut rng = derive(seed, Stream::Env);
            let mut arng = derive(seed * 31 + 7, Stream::Action);
            env.reset(&mut rng);
            let mut total = 0f32;
            loop {
                let a = Action::Discrete(arng.gen_range(0..3));
                let (_, r, d) = env.step(&a).unwrap();
                total += r;
                if d {
                    break;
                }
            }
            assert!(total == 1.0 || total == -1.0, "return {total}");
        }
    }
}
