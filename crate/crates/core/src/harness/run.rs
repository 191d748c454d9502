//! The interact-store-update loop: act, step the environment, store the
//! transition, then (once the replay is past its fill threshold) run exactly
//! one gradient update per environment step. Evaluation pauses training on
//! the same thread; checkpoints land on their configured schedule.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::Augmenter;
use crate::c51::{C51Agent, C51Error};
use crate::envs::{Action, Env, EnvError, EnvSpec};
use crate::harness::checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, OptState,
};
use crate::harness::config::{AgentKind, ConfigError, RunConfig};
use crate::harness::metrics::{AgentMetrics, MetricsWriter};
use crate::replay::{PrioritizedReplay, PushStep, ReplayBuffer, ReplayError};
use crate::rng::{self, derive, derive_indexed, RngState, Stream};
use crate::sac::{SacAgent, SacError};
use crate::tensor::serialize::NamedTensor;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    C51(#[from] C51Error),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite {what} at env_step {step}; aborting")]
    NonFinite { what: String, step: u64 },
    #[error("checkpoint restore: {0}")]
    Restore(String),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunSummary {
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub final_eval: Option<f64>,
    pub stopped_early: bool,
}

/// Agent-specific pieces of the loop, so the loop itself is written once.
pub trait Driver {
    fn act_train(&mut self, obs: &Tensor<f32>, env_step: u64) -> Result<Action, HarnessError>;
    fn act_eval(&mut self, obs: &Tensor<f32>) -> Result<Action, HarnessError>;
    fn observe(
        &mut self,
        obs: &Tensor<f32>,
        action: &Action,
        reward: f32,
        next_obs: &Tensor<f32>,
        done: bool,
    );
    fn ready(&mut self) -> bool;
    fn update(&mut self, env_step: u64, total_steps: u64) -> Result<AgentMetrics, HarnessError>;
    fn tensors(&self) -> Vec<NamedTensor>;
    fn restore_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), HarnessError>;
    fn opt_states(&self) -> Vec<OptState>;
    fn restore_opt_states(&mut self, states: Vec<OptState>) -> Result<(), HarnessError>;
    fn rng_states(&self) -> Vec<(String, RngState)>;
    fn restore_rng_states(&mut self, states: &[(String, RngState)]) -> Result<(), HarnessError>;
    fn update_count(&self) -> u64;
    fn set_update_count(&mut self, count: u64);
}

// ------------------------------------------------------------ SAC driver --

pub struct SacDriver {
    pub agent: SacAgent<f32>,
    buffer: ReplayBuffer<Vec<f32>>,
    augmenter: Augmenter,
    policy_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    min_fill: usize,
    action_dim: usize,
}

impl SacDriver {
    pub fn new(config: &RunConfig) -> Result<Self, HarnessError> {
        let mut init_rng = derive(config.run.seed, Stream::Init);
        let k = config.env.frame_stack;
        let hw = config.env.frame_size * config.env.frame_size;
        let agent = SacAgent::new(
            config.sac.clone(),
            k,
            config.env.frame_size,
            2,
            &mut init_rng,
        )?;
        let buffer = ReplayBuffer::new(config.replay.capacity, k, hw, 1, config.sac.gamma as f32);
        let augmenter = Augmenter::new(
            config.augment.clone(),
            derive(config.run.seed, Stream::Augment),
        );
        Ok(SacDriver {
            agent,
            buffer,
            augmenter,
            policy_rng: derive(config.run.seed, Stream::Action),
            replay_rng: derive(config.run.seed, Stream::Replay),
            min_fill: config.replay.min_fill,
            action_dim: 2,
        })
    }
}

impl Driver for SacDriver {
    fn act_train(&mut self, obs: &Tensor<f32>, _env_step: u64) -> Result<Action, HarnessError> {
        // Uniform random warmup until the buffer can serve samples.
        if self.buffer.len() < self.min_fill {
            let a: Vec<f32> = (0..self.action_dim)
                .map(|_| self.policy_rng.gen_range(-1.0f32..1.0))
                .collect();
            return Ok(Action::Continuous(a));
        }
        Ok(Action::Continuous(self.agent.act(obs, true, &mut self.policy_rng)?))
    }

    fn act_eval(&mut self, obs: &Tensor<f32>) -> Result<Action, HarnessError> {
        let mut unused = derive(0, Stream::Eval);
        Ok(Action::Continuous(self.agent.act(obs, false, &mut unused)?))
    }

    fn observe(
        &mut self,
        obs: &Tensor<f32>,
        action: &Action,
        reward: f32,
        next_obs: &Tensor<f32>,
        done: bool,
    ) {
        let Action::Continuous(a) = action else {
            unreachable!("continuous agent received a discrete action");
        };
        self.buffer.push(PushStep {
            state: obs,
            action: a.clone(),
            reward,
            next_state: next_obs,
            done,
        });
    }

    fn ready(&mut self) -> bool {
        self.buffer.len() >= self.min_fill
    }

    fn update(&mut self, _env_step: u64, _total: u64) -> Result<AgentMetrics, HarnessError> {
        let batch = self.buffer.sample_uniform(
            self.agent.config.batch_size,
            self.min_fill,
            &mut self.replay_rng,
        )?;
        let metrics =
            self.agent
                .train_step(&batch, &mut self.augmenter, &mut self.policy_rng)?;
        Ok(AgentMetrics::Sac(metrics))
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        self.agent
            .named_params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    fn restore_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), HarnessError> {
        restore_named(self.agent.named_params_mut(), tensors)
    }

    fn opt_states(&self) -> Vec<OptState> {
        self.agent
            .optimizer_states()
            .into_iter()
            .map(|(step_count, m, v)| OptState { step_count, m, v })
            .collect()
    }

    fn restore_opt_states(&mut self, states: Vec<OptState>) -> Result<(), HarnessError> {
        if states.len() != 3 {
            return Err(HarnessError::Restore(format!(
                "expected 3 optimizer states, found {}",
                states.len()
            )));
        }
        self.agent.restore_optimizers(
            states
                .into_iter()
                .map(|s| (s.step_count, s.m, s.v))
                .collect(),
        );
        Ok(())
    }

    fn rng_states(&self) -> Vec<(String, RngState)> {
        vec![
            ("policy".into(), rng::snapshot(&self.policy_rng)),
            ("replay".into(), rng::snapshot(&self.replay_rng)),
            ("augment".into(), rng::snapshot(&self.augmenter.rng)),
        ]
    }

    fn restore_rng_states(&mut self, states: &[(String, RngState)]) -> Result<(), HarnessError> {
        for (name, state) in states {
            match name.as_str() {
                "policy" => self.policy_rng = rng::restore(state),
                "replay" => self.replay_rng = rng::restore(state),
                "augment" => self.augmenter.rng = rng::restore(state),
                "env" => {}
                other => {
                    return Err(HarnessError::Restore(format!("unknown rng stream {other}")))
                }
            }
        }
        Ok(())
    }

    fn update_count(&self) -> u64 {
        self.agent.update_count
    }

    fn set_update_count(&mut self, count: u64) {
        self.agent.update_count = count;
    }
}

// ------------------------------------------------------------ C51 driver --

pub struct C51Driver {
    pub agent: C51Agent<f32>,
    replay: PrioritizedReplay<usize>,
    augmenter: Augmenter,
    noise_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    min_fill: usize,
    reward_clip: bool,
    beta0: f64,
}

impl C51Driver {
    pub fn new(config: &RunConfig) -> Result<Self, HarnessError> {
        let mut init_rng = derive(config.run.seed, Stream::Init);
        let k = config.env.frame_stack;
        let hw = config.env.frame_size * config.env.frame_size;
        let agent = C51Agent::new(
            config.c51.clone(),
            k,
            config.env.frame_size,
            3,
            &mut init_rng,
        )?;
        let replay = PrioritizedReplay::new(
            config.replay.capacity,
            k,
            hw,
            config.c51.n_step,
            config.c51.gamma as f32,
            config.replay.per_alpha,
            config.replay.per_beta0,
        );
        let augmenter = Augmenter::new(
            config.augment.clone(),
            derive(config.run.seed, Stream::Augment),
        );
        Ok(C51Driver {
            agent,
            replay,
            augmenter,
            noise_rng: derive(config.run.seed, Stream::Noise),
            action_rng: derive(config.run.seed, Stream::Action),
            replay_rng: derive(config.run.seed, Stream::Replay),
            min_fill: config.replay.min_fill,
            reward_clip: config.replay.reward_clip,
            beta0: config.replay.per_beta0,
        })
    }
}

impl Driver for C51Driver {
    fn act_train(&mut self, obs: &Tensor<f32>, env_step: u64) -> Result<Action, HarnessError> {
        let a = self.agent.act(
            obs,
            true,
            env_step,
            &mut self.noise_rng,
            &mut self.action_rng,
        )?;
        Ok(Action::Discrete(a))
    }

    fn act_eval(&mut self, obs: &Tensor<f32>) -> Result<Action, HarnessError> {
        let mut unused = derive(0, Stream::Eval);
        let mut unused2 = derive(0, Stream::Eval);
        let a = self.agent.act(obs, false, 0, &mut unused, &mut unused2)?;
        Ok(Action::Discrete(a))
    }

    fn observe(
        &mut self,
        obs: &Tensor<f32>,
        action: &Action,
        reward: f32,
        next_obs: &Tensor<f32>,
        done: bool,
    ) {
        let Action::Discrete(a) = action else {
            unreachable!("discrete agent received a continuous action");
        };
        // Reward clipping applies to stored (and folded) rewards only;
        // reported episode returns stay unclipped.
        let r = if self.reward_clip {
            reward.clamp(-1.0, 1.0)
        } else {
            reward
        };
        self.replay.push(PushStep {
            state: obs,
            action: *a,
            reward: r,
            next_state: next_obs,
            done,
        });
    }

    fn ready(&mut self) -> bool {
        self.replay.len() >= self.min_fill
    }

    fn update(&mut self, env_step: u64, total: u64) -> Result<AgentMetrics, HarnessError> {
        // Linear importance-correction anneal from beta0 to 1 over the run.
        let t = (env_step as f64 / total.max(1) as f64).min(1.0);
        self.replay.beta = self.beta0 + (1.0 - self.beta0) * t;
        let mut metrics = self.agent.train_step(
            &mut self.replay,
            self.min_fill,
            &mut self.augmenter,
            &mut self.noise_rng,
            &mut self.replay_rng,
        )?;
        metrics.epsilon = self.agent.config.epsilon_at(env_step);
        Ok(AgentMetrics::C51(metrics))
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        self.agent
            .named_params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    fn restore_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), HarnessError> {
        restore_named(self.agent.named_params_mut(), tensors)
    }

    fn opt_states(&self) -> Vec<OptState> {
        let (step_count, m, v) = self.agent.optimizer_state();
        vec![OptState { step_count, m, v }]
    }

    fn restore_opt_states(&mut self, states: Vec<OptState>) -> Result<(), HarnessError> {
        let mut states = states;
        if states.len() != 1 {
            return Err(HarnessError::Restore(format!(
                "expected 1 optimizer state, found {}",
                states.len()
            )));
        }
        let s = states.remove(0);
        self.agent.restore_optimizer((s.step_count, s.m, s.v));
        Ok(())
    }

    fn rng_states(&self) -> Vec<(String, RngState)> {
        vec![
            ("noise".into(), rng::snapshot(&self.noise_rng)),
            ("action".into(), rng::snapshot(&self.action_rng)),
            ("replay".into(), rng::snapshot(&self.replay_rng)),
            ("augment".into(), rng::snapshot(&self.augmenter.rng)),
        ]
    }

    fn restore_rng_states(&mut self, states: &[(String, RngState)]) -> Result<(), HarnessError> {
        for (name, state) in states {
            match name.as_str() {
                "noise" => self.noise_rng = rng::restore(state),
                "action" => self.action_rng = rng::restore(state),
                "replay" => self.replay_rng = rng::restore(state),
                "augment" => self.augmenter.rng = rng::restore(state),
                "env" => {}
                other => {
                    return Err(HarnessError::Restore(format!("unknown rng stream {other}")))
                }
            }
        }
        Ok(())
    }

    fn update_count(&self) -> u64 {
        self.agent.update_count
    }

    fn set_update_count(&mut self, count: u64) {
        self.agent.update_count = count;
    }
}

fn restore_named(
    params: Vec<&mut crate::tensor::LayerParams<f32>>,
    tensors: &[NamedTensor],
) -> Result<(), HarnessError> {
    let by_name: std::collections::HashMap<&str, &NamedTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for p in params {
        let t = by_name.get(p.name.as_str()).ok_or_else(|| {
            HarnessError::Restore(format!("checkpoint is missing parameter {}", p.name))
        })?;
        if t.shape != p.value.shape() {
            return Err(HarnessError::Restore(format!(
                "parameter {} has shape {:?} in checkpoint, expected {:?}",
                p.name,
                t.shape,
                p.value.shape()
            )));
        }
        p.set_value(Tensor::new(t.data.clone(), &t.shape));
    }
    Ok(())
}

pub fn make_driver(config: &RunConfig) -> Result<Box<dyn Driver>, HarnessError> {
    Ok(match config.run.agent {
        AgentKind::Sac => Box::new(SacDriver::new(config)?),
        AgentKind::C51 => Box::new(C51Driver::new(config)?),
    })
}

/// Run greedy evaluation episodes on fresh environments seeded from
/// (seed, episode index); deterministic for a given parameter set.
pub fn eval_policy(
    driver: &mut dyn Driver,
    env_spec: &EnvSpec,
    seed: u64,
    episodes: usize,
) -> Result<Vec<f64>, HarnessError> {
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut env = Env::new(env_spec)?;
        let mut ep_rng = derive_indexed(seed, Stream::Eval, ep as u64);
        let mut obs = env.reset(&mut ep_rng);
        let mut total = 0f64;
        loop {
            let action = driver.act_eval(&obs)?;
            let (next, reward, done) = env.step(&action)?;
            total += reward as f64;
            obs = next;
            if done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

fn build_checkpoint(
    config: &RunConfig,
    driver: &dyn Driver,
    env_rng: &ChaCha8Rng,
    env_step: u64,
    episode: u64,
) -> Checkpoint {
    let mut rngs = vec![("env".to_string(), rng::snapshot(env_rng))];
    rngs.extend(driver.rng_states());
    Checkpoint {
        agent: config.run.agent,
        env_step,
        episode,
        update_count: driver.update_count(),
        config_text: config.to_canonical_text(),
        params: driver.tensors(),
        optimizers: driver.opt_states(),
        rngs,
    }
}

pub fn checkpoint_path(dir: &Path, env_step: u64) -> PathBuf {
    dir.join(format!("ckpt_{env_step:08}.bin"))
}

/// Execute one full training run, writing metrics.csv, timings.csv and
/// checkpoints into `out_dir`.
pub fn run_training(
    config: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let mut driver = make_driver(config)?;
    let mut env = Env::new(&config.env)?;
    let mut env_rng = derive(config.run.seed, Stream::Env);
    let mut env_step: u64 = 0;
    let mut episode: u64 = 0;

    if let Some(path) = resume {
        let ck = load_checkpoint(path)?;
        if ck.agent != config.run.agent {
            return Err(CheckpointError::AgentKind {
                found: ck.agent.as_str().into(),
                expected: config.run.agent.as_str().into(),
            }
            .into());
        }
        driver.restore_tensors(&ck.params)?;
        driver.restore_opt_states(ck.optimizers)?;
        driver.restore_rng_states(&ck.rngs)?;
        driver.set_update_count(ck.update_count);
        for (name, state) in &ck.rngs {
            if name == "env" {
                env_rng = rng::restore(state);
            }
        }
        env_step = ck.env_step;
        episode = ck.episode;
    }

    let mut writer = MetricsWriter::create(out_dir, config.run.agent)?;
    if config.run.checkpoint_every > 0 {
        let ck = build_checkpoint(config, driver.as_ref(), &env_rng, env_step, episode);
        save_checkpoint(&checkpoint_path(out_dir, env_step), &ck)?;
    }

    let mut summary = RunSummary::default();
    let mut obs: Option<Tensor<f32>> = None;
    let mut episode_return = 0f64;
    let mut last_metrics: Option<AgentMetrics> = None;

    while env_step < config.run.total_env_steps {
        env_step += 1;
        let current = match obs.take() {
            Some(o) => o,
            None => {
                episode_return = 0.0;
                env.reset(&mut env_rng)
            }
        };

        let action = driver.act_train(&current, env_step)?;
        let (next_obs, reward, done) = env.step(&action)?;
        if !reward.is_finite() {
            writer.abort_row(env_step, "reward")?;
            writer.flush()?;
            return Err(HarnessError::NonFinite {
                what: "reward".into(),
                step: env_step,
            });
        }
        driver.observe(&current, &action, reward, &next_obs, done);
        episode_return += reward as f64;

        if done {
            writer.train_row(env_step, episode, episode_return, last_metrics.as_ref())?;
            episode += 1;
            summary.episodes += 1;
            obs = None;
        } else {
            obs = Some(next_obs);
        }

        if driver.ready() {
            let metrics = driver.update(env_step, config.run.total_env_steps)?;
            summary.updates += 1;
            let finite = match &metrics {
                AgentMetrics::Sac(m) => {
                    m.critic_loss.is_finite()
                        && m.rqdia_loss.is_finite()
                        && m.actor_loss.is_finite()
                        && m.alpha.is_finite()
                }
                AgentMetrics::C51(m) => m.c51_loss.is_finite() && m.rqdia_loss.is_finite(),
            };
            if !finite {
                writer.abort_row(env_step, "loss")?;
                writer.flush()?;
                return Err(HarnessError::NonFinite {
                    what: "loss".into(),
                    step: env_step,
                });
            }
            last_metrics = Some(metrics);
        }

        let mut stop = false;
        if env_step % config.run.eval_every == 0 {
            let returns = eval_policy(
                driver.as_mut(),
                &config.env,
                config.run.seed,
                config.run.eval_episodes,
            )?;
            let mean = returns.iter().sum::<f64>() / returns.len() as f64;
            writer.eval_row(env_step, mean)?;
            writer.timing_row(env_step, start.elapsed().as_secs_f64())?;
            writer.flush()?;
            summary.final_eval = Some(mean);
            if let Some(threshold) = config.run.stop_at_eval_return {
                if mean >= threshold {
                    stop = true;
                    summary.stopped_early = true;
                }
            }
        }

        if config.run.checkpoint_every > 0
            && (env_step % config.run.checkpoint_every == 0 || stop)
        {
            let ck = build_checkpoint(config, driver.as_ref(), &env_rng, env_step, episode);
            save_checkpoint(&checkpoint_path(out_dir, env_step), &ck)?;
        }

        if stop {
            break;
        }
    }

    summary.env_steps = env_step;
    writer.flush()?;
    Ok(summary)
}

/// Load a checkpoint and run greedy evaluation episodes.
pub fn evaluate(
    checkpoint: &Path,
    episodes: usize,
) -> Result<(f64, Vec<f64>), HarnessError> {
    let ck = load_checkpoint(checkpoint)?;
    let config = RunConfig::from_canonical_text(&ck.config_text)?;
    let mut driver = make_driver(&config)?;
    driver.restore_tensors(&ck.params)?;
    let returns = eval_policy(driver.as_mut(), &config.env, config.run.seed, episodes)?;
    let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
    Ok((mean, returns))
}
