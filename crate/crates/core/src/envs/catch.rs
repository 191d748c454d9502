//! Discrete catch game: a ball falls one row per repeat, a 3-cell paddle
//! slides along the bottom row. +1 for a catch, -1 for a miss, episode ends
//! when the ball reaches the bottom.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Action, EnvError, EnvSpec, FrameStack};
use crate::tensor::Tensor;

const BALL_LEVEL: u8 = 255;
const PADDLE_LEVEL: u8 = 153;

pub struct Catch {
    size: usize,
    action_repeat: usize,
    max_steps: usize,
    paddle_x: i32,
    ball_x: i32,
    ball_y: i32,
    steps: usize,
    done: bool,
    stack: FrameStack,
}

impl Catch {
    pub fn new(spec: &EnvSpec) -> Self {
        Catch {
            size: spec.frame_size,
            action_repeat: spec.action_repeat,
            max_steps: spec.max_episode_steps,
            paddle_x: 0,
            ball_x: 0,
            ball_y: 0,
            steps: 0,
            done: false,
            stack: FrameStack::new(spec.frame_stack, spec.frame_size),
        }
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        self.ball_x = rng.gen_range(0..self.size as i32);
        self.ball_y = 0;
        self.paddle_x = self.size as i32 / 2;
        self.steps = 0;
        self.done = false;
        self.stack.reset(self.render());
        self.stack.observation()
    }

    pub fn step(&mut self, action: &Action) -> Result<(Tensor<f32>, f32, bool), EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let delta = match action {
            Action::Discrete(0) => -1,
            Action::Discrete(1) => 0,
            Action::Discrete(2) => 1,
            _ => return Err(EnvError::WrongActionKind { expected: "discrete {0,1,2}" }),
        };
        let mut reward = 0f32;
        let bottom = self.size as i32 - 1;
        for _ in 0..self.action_repeat {
            // Paddle center stays in bounds with its 1-cell wings.
            self.paddle_x = (self.paddle_x + delta).clamp(1, self.size as i32 - 2);
            self.ball_y += 1;
            if self.ball_y >= bottom {
                self.ball_y = bottom;
                let caught = (self.ball_x - self.paddle_x).abs() <= 1;
                reward += if caught { 1.0 } else { -1.0 };
                self.done = true;
                break;
            }
        }
        self.steps += 1;
        if self.steps >= self.max_steps {
            self.done = true;
        }
        self.stack.push(self.render());
        Ok((self.stack.observation(), reward, self.done))
    }

    pub fn observation(&self) -> Tensor<f32> {
        self.stack.observation()
    }

    pub fn newest_frame(&self) -> Vec<u8> {
        self.render()
    }

    fn render(&self) -> Vec<u8> {
        let s = self.size;
        let mut frame = vec![0u8; s * s];
        let bottom = s - 1;
        for dx in -1i32..=1 {
            let x = self.paddle_x + dx;
            if x >= 0 && (x as usize) < s {
                frame[bottom * s + x as usize] = PADDLE_LEVEL;
            }
        }
        frame[self.ball_y as usize * s + self.ball_x as usize] = BALL_LEVEL;
        frame
    }

    pub fn state(&self) -> (i32, i32, i32, usize) {
        (self.paddle_x, self.ball_x, self.ball_y, self.steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::rng::{derive, Stream};

    fn spec() -> EnvSpec {
        EnvSpec {
            kind: EnvKind::Catch,
            frame_size: 24,
            action_repeat: 4,
            frame_stack: 3,
            max_episode_steps: 50,
        }
    }

    #[test]
    fn forced_catch_scores_plus_one() {
        let mut env = Catch::new(&spec());
        env.reset(&mut derive(1, Stream::Env));
        // Place ball one row above the bottom, paddle directly underneath.
        env.ball_y = env.size as i32 - 2;
        env.ball_x = env.paddle_x;
        let (_, r, done) = env.step(&Action::Discrete(1)).unwrap();
        assert_eq!(r, 1.0);
        assert!(done);
    }

    #[test]
    fn forced_miss_scores_minus_one() {
        let mut env = Catch::new(&spec());
        env.reset(&mut derive(2, Stream::Env));
        env.ball_y = env.size as i32 - 2;
        env.ball_x = (env.paddle_x + 5).min(env.size as i32 - 1);
        let (_, r, done) = env.step(&Action::Discrete(1)).unwrap();
        assert_eq!(r, -1.0);
        assert!(done);
    }

    #[test]
    fn mid_episode_rewards_are_zero() {
        let mut env = Catch::new(&spec());
        env.reset(&mut derive(3, Stream::Env));
        let (_, r, done) = env.step(&Action::Discrete(2)).unwrap();
        assert_eq!(r, 0.0);
        assert!(!done);
    }

    #[test]
    fn ball_descends_one_row_per_repeat() {
        let mut env = Catch::new(&spec());
        env.reset(&mut derive(4, Stream::Env));
        let y0 = env.ball_y;
        env.step(&Action::Discrete(1)).unwrap();
        assert_eq!(env.ball_y, y0 + 4);
    }

    #[test]
    fn render_shows_ball_and_paddle_cells() {
        let mut env = Catch::new(&spec());
        env.reset(&mut derive(5, Stream::Env));
        let f = env.render();
        let s = env.size;
        assert_eq!(f[env.ball_y as usize * s + env.ball_x as usize], BALL_LEVEL);
        let bottom = s - 1;
        assert_eq!(f[bottom * s + env.paddle_x as usize], PADDLE_LEVEL);
        assert_eq!(f[bottom * s + env.paddle_x as usize - 1], PADDLE_LEVEL);
        assert_eq!(f[bottom * s + env.paddle_x as usize + 1], PADDLE_LEVEL);
    }
}
