//! Run configuration: a flat, sectioned key-value text format.
//!
//! Grammar (one statement per line):
//!   `# comment`            ignored, as are blank lines
//!   `[section]`            section header
//!   `key = value`          assignment in the current section
//!
//! Unknown sections or keys are errors. Any key can be overridden through
//! the environment as `RQDIA_<SECTION>_<KEY>` (upper-case).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::augment::{AugmentKind, AugmentSpec};
use crate::c51::{C51Config, RqdiaMode};
use crate::envs::{EnvKind, EnvSpec};
use crate::sac::{Regularizer, SacConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {err}")]
    Io { path: String, err: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown key [{section}] {key}")]
    UnknownKey { section: String, key: String },
    #[error("[{section}] {key}: {msg}")]
    BadValue {
        section: String,
        key: String,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment override {0} is malformed (expected RQDIA_<SECTION>_<KEY>)")]
    BadOverride(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Sac,
    C51,
}

impl AgentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::Sac => "sac",
            AgentKind::C51 => "c51",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSection {
    pub agent: AgentKind,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Stop as soon as an evaluation reaches this mean return; for
    /// budget-bounded runs. Off by default.
    pub stop_at_eval_return: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ReplaySection {
    pub capacity: usize,
    pub min_fill: usize,
    pub per_alpha: f64,
    pub per_beta0: f64,
    pub reward_clip: bool,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvSpec,
    pub augment: AugmentSpec,
    pub replay: ReplaySection,
    pub sac: SacConfig,
    pub c51: C51Config,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            err: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        Self::build(text, true)
    }

    /// Parse without environment overrides; used for the config echo stored
    /// in checkpoints, which must reconstruct the run exactly as recorded.
    pub fn from_canonical_text(text: &str) -> Result<Self, ConfigError> {
        Self::build(text, false)
    }

    fn build(text: &str, with_env: bool) -> Result<Self, ConfigError> {
        let mut kv = parse_kv(text)?;
        if with_env {
            apply_env_overrides(&mut kv)?;
        }
        let config = extract(&mut kv)?;
        if let Some(((section, key), _)) = kv.into_iter().next() {
            return Err(ConfigError::UnknownKey { section, key });
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.env
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.run.eval_every == 0 {
            return Err(ConfigError::Invalid("eval_every must be positive".into()));
        }
        if self.run.eval_episodes == 0 {
            return Err(ConfigError::Invalid("eval_episodes must be positive".into()));
        }
        if self.replay.capacity == 0 || self.replay.min_fill == 0 {
            return Err(ConfigError::Invalid(
                "replay capacity and min_fill must be positive".into(),
            ));
        }
        if self.sac.batch_size < 2 {
            return Err(ConfigError::Invalid(
                "sac batch_size must be >= 2 (cross-element actions)".into(),
            ));
        }
        if self.c51.atoms < 2 {
            return Err(ConfigError::Invalid("c51 atoms must be >= 2".into()));
        }
        if self.c51.v_min >= self.c51.v_max {
            return Err(ConfigError::Invalid("c51 needs v_min < v_max".into()));
        }
        if self.c51.n_step < 1 {
            return Err(ConfigError::Invalid("c51 n_step must be >= 1".into()));
        }
        if self.augment.kind == AugmentKind::RandomShift
            && self.augment.pad * 2 >= self.env.frame_size
        {
            return Err(ConfigError::Invalid(format!(
                "augment pad {} must be < frame_size/2 = {}",
                self.augment.pad,
                self.env.frame_size / 2
            )));
        }
        Ok(())
    }

    /// Canonical text form: stable ordering, written into checkpoints so a
    /// run can be reconstructed from its artifacts.
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "[run]").unwrap();
        writeln!(w, "agent = {}", self.run.agent.as_str()).unwrap();
        writeln!(w, "total_env_steps = {}", self.run.total_env_steps).unwrap();
        writeln!(w, "eval_every = {}", self.run.eval_every).unwrap();
        writeln!(w, "eval_episodes = {}", self.run.eval_episodes).unwrap();
        writeln!(w, "seed = {}", self.run.seed).unwrap();
        writeln!(w, "checkpoint_every = {}", self.run.checkpoint_every).unwrap();
        if let Some(v) = self.run.stop_at_eval_return {
            writeln!(w, "stop_at_eval_return = {v}").unwrap();
        }
        writeln!(w, "[env]").unwrap();
        let kind = match self.env.kind {
            EnvKind::PointReach => "point_reach",
            EnvKind::Catch => "catch",
        };
        writeln!(w, "kind = {kind}").unwrap();
        writeln!(w, "frame_size = {}", self.env.frame_size).unwrap();
        writeln!(w, "action_repeat = {}", self.env.action_repeat).unwrap();
        writeln!(w, "frame_stack = {}", self.env.frame_stack).unwrap();
        writeln!(w, "max_episode_steps = {}", self.env.max_episode_steps).unwrap();
        writeln!(w, "[augment]").unwrap();
        let akind = match self.augment.kind {
            AugmentKind::Identity => "identity",
            AugmentKind::RandomShift => "random_shift",
            AugmentKind::Intensity => "intensity",
        };
        writeln!(w, "kind = {akind}").unwrap();
        writeln!(w, "pad = {}", self.augment.pad).unwrap();
        writeln!(w, "intensity_scale = {}", self.augment.intensity_scale).unwrap();
        writeln!(w, "[replay]").unwrap();
        writeln!(w, "capacity = {}", self.replay.capacity).unwrap();
        writeln!(w, "min_fill = {}", self.replay.min_fill).unwrap();
        writeln!(w, "per_alpha = {}", self.replay.per_alpha).unwrap();
        writeln!(w, "per_beta0 = {}", self.replay.per_beta0).unwrap();
        writeln!(w, "reward_clip = {}", self.replay.reward_clip).unwrap();
        writeln!(w, "[sac]").unwrap();
        writeln!(w, "gamma = {}", self.sac.gamma).unwrap();
        writeln!(w, "critic_tau = {}", self.sac.critic_tau).unwrap();
        writeln!(w, "encoder_tau = {}", self.sac.encoder_tau).unwrap();
        writeln!(
            w,
            "critic_target_update_freq = {}",
            self.sac.critic_target_update_freq
        )
        .unwrap();
        writeln!(w, "lr = {}", self.sac.lr).unwrap();
        writeln!(w, "alpha_lr = {}", self.sac.alpha_lr).unwrap();
        writeln!(w, "batch_size = {}", self.sac.batch_size).unwrap();
        writeln!(w, "init_temperature = {}", self.sac.init_temperature).unwrap();
        writeln!(w, "hidden_dim = {}", self.sac.hidden_dim).unwrap();
        writeln!(w, "latent_dim = {}", self.sac.latent_dim).unwrap();
        writeln!(w, "num_filters = {}", self.sac.num_filters).unwrap();
        let reg = match self.sac.regularizer {
            Regularizer::None => "none",
            Regularizer::DrqAvg => "drq_avg",
            Regularizer::Rqdia => "rqdia",
        };
        writeln!(w, "regularizer = {reg}").unwrap();
        writeln!(w, "rqdia_weight = {}", self.sac.rqdia_weight).unwrap();
        writeln!(
            w,
            "rqdia_action_subset = {}",
            self.sac.rqdia_action_subset.unwrap_or(0)
        )
        .unwrap();
        writeln!(w, "[c51]").unwrap();
        writeln!(w, "atoms = {}", self.c51.atoms).unwrap();
        writeln!(w, "v_min = {}", self.c51.v_min).unwrap();
        writeln!(w, "v_max = {}", self.c51.v_max).unwrap();
        writeln!(w, "n_step = {}", self.c51.n_step).unwrap();
        writeln!(w, "gamma = {}", self.c51.gamma).unwrap();
        writeln!(w, "batch_size = {}", self.c51.batch_size).unwrap();
        writeln!(w, "lr = {}", self.c51.lr).unwrap();
        writeln!(w, "adam_eps = {}", self.c51.adam_eps).unwrap();
        writeln!(w, "max_grad_norm = {}", self.c51.max_grad_norm).unwrap();
        writeln!(w, "target_update_period = {}", self.c51.target_update_period).unwrap();
        writeln!(w, "noisy = {}", self.c51.noisy).unwrap();
        writeln!(w, "noisy_sigma0 = {}", self.c51.noisy_sigma0).unwrap();
        writeln!(w, "dueling = {}", self.c51.dueling).unwrap();
        let mode = match self.c51.rqdia_mode {
            RqdiaMode::Off => "off",
            RqdiaMode::Mse => "mse",
            RqdiaMode::Kl => "kl",
        };
        writeln!(w, "rqdia_mode = {mode}").unwrap();
        writeln!(w, "rqdia_weight = {}", self.c51.rqdia_weight).unwrap();
        writeln!(w, "hidden_dim = {}", self.c51.hidden_dim).unwrap();
        writeln!(
            w,
            "conv_channels = {},{}",
            self.c51.conv_channels.0, self.c51.conv_channels.1
        )
        .unwrap();
        writeln!(w, "eps_start = {}", self.c51.eps_start).unwrap();
        writeln!(w, "eps_end = {}", self.c51.eps_end).unwrap();
        writeln!(w, "eps_decay_steps = {}", self.c51.eps_decay_steps).unwrap();
        s
    }
}

type Kv = BTreeMap<(String, String), String>;

fn parse_kv(text: &str) -> Result<Kv, ConfigError> {
    let mut kv = Kv::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(ConfigError::Parse {
                line: i + 1,
                msg: format!("unterminated section header {line:?}"),
            })?;
            section = name.trim().to_lowercase();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        if section.is_empty() {
            return Err(ConfigError::Parse {
                line: i + 1,
                msg: "assignment before any [section] header".into(),
            });
        }
        kv.insert(
            (section.clone(), key.trim().to_lowercase()),
            value.trim().to_string(),
        );
    }
    Ok(kv)
}

const SECTIONS: [&str; 6] = ["run", "env", "augment", "replay", "sac", "c51"];

fn apply_env_overrides(kv: &mut Kv) -> Result<(), ConfigError> {
    for (name, value) in std::env::vars() {
        let Some(rest) = name.strip_prefix("RQDIA_") else {
            continue;
        };
        let lower = rest.to_lowercase();
        let mut matched = false;
        for section in SECTIONS {
            if let Some(key) = lower.strip_prefix(&format!("{section}_")) {
                kv.insert((section.to_string(), key.to_string()), value.clone());
                matched = true;
                break;
            }
        }
        if !matched {
            return Err(ConfigError::BadOverride(name));
        }
    }
    Ok(())
}

struct Section<'a> {
    name: &'static str,
    kv: &'a mut Kv,
}

impl<'a> Section<'a> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.kv.remove(&(self.name.to_string(), key.to_string()))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                section: self.name.to_string(),
                key: key.to_string(),
                msg: format!("cannot parse {v:?}"),
            }),
        }
    }

    fn parse_bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(ConfigError::BadValue {
                    section: self.name.to_string(),
                    key: key.to_string(),
                    msg: format!("expected a boolean, got {v:?}"),
                }),
            },
        }
    }

    fn bad(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            section: self.name.to_string(),
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

fn extract(kv: &mut Kv) -> Result<RunConfig, ConfigError> {
    let run = {
        let mut s = Section { name: "run", kv };
        let agent = match s.take("agent").as_deref() {
            Some("sac") | None => AgentKind::Sac,
            Some("c51") => AgentKind::C51,
            Some(other) => return Err(s.bad("agent", format!("unknown agent {other:?}"))),
        };
        let stop = match s.take("stop_at_eval_return") {
            None => None,
            Some(v) if v.is_empty() => None,
            Some(v) => Some(v.parse().map_err(|_| {
                s.bad("stop_at_eval_return", format!("cannot parse {v:?}"))
            })?),
        };
        RunSection {
            agent,
            total_env_steps: s.parse("total_env_steps", 10_000u64)?,
            eval_every: s.parse("eval_every", 1_000u64)?,
            eval_episodes: s.parse("eval_episodes", 10usize)?,
            seed: s.parse("seed", 1u64)?,
            checkpoint_every: s.parse("checkpoint_every", 0u64)?,
            stop_at_eval_return: stop,
        }
    };

    let env = {
        let mut s = Section { name: "env", kv };
        let kind = match s.take("kind").as_deref() {
            Some("point_reach") | None => EnvKind::PointReach,
            Some("catch") => EnvKind::Catch,
            Some(other) => return Err(s.bad("kind", format!("unknown env {other:?}"))),
        };
        EnvSpec {
            kind,
            frame_size: s.parse("frame_size", 32usize)?,
            action_repeat: s.parse("action_repeat", 4usize)?,
            frame_stack: s.parse("frame_stack", 3usize)?,
            max_episode_steps: s.parse("max_episode_steps", 25usize)?,
        }
    };

    let augment = {
        let mut s = Section { name: "augment", kv };
        let kind = match s.take("kind").as_deref() {
            Some("random_shift") | None => AugmentKind::RandomShift,
            Some("intensity") => AugmentKind::Intensity,
            Some("identity") => AugmentKind::Identity,
            Some(other) => return Err(s.bad("kind", format!("unknown augmentation {other:?}"))),
        };
        AugmentSpec {
            kind,
            pad: s.parse("pad", 4usize)?,
            intensity_scale: s.parse("intensity_scale", 0.05f32)?,
        }
    };

    let replay = {
        let mut s = Section { name: "replay", kv };
        ReplaySection {
            capacity: s.parse("capacity", 100_000usize)?,
            min_fill: s.parse("min_fill", if run.agent == AgentKind::Sac { 1000 } else { 1600 })?,
            per_alpha: s.parse("per_alpha", 0.5f64)?,
            per_beta0: s.parse("per_beta0", 0.4f64)?,
            reward_clip: s.parse_bool("reward_clip", true)?,
        }
    };

    let sac = {
        let mut s = Section { name: "sac", kv };
        let regularizer = match s.take("regularizer").as_deref() {
            Some("none") | None => Regularizer::None,
            Some("drq_avg") => Regularizer::DrqAvg,
            Some("rqdia") => Regularizer::Rqdia,
            Some(other) => return Err(s.bad("regularizer", format!("unknown mode {other:?}"))),
        };
        let subset = s.parse("rqdia_action_subset", 0usize)?;
        SacConfig {
            gamma: s.parse("gamma", 0.99)?,
            critic_tau: s.parse("critic_tau", 0.01)?,
            encoder_tau: s.parse("encoder_tau", 0.05)?,
            critic_target_update_freq: s.parse("critic_target_update_freq", 2u64)?,
            lr: s.parse("lr", 1e-3)?,
            alpha_lr: s.parse("alpha_lr", 1e-4)?,
            batch_size: s.parse("batch_size", 128usize)?,
            init_temperature: s.parse("init_temperature", 0.1)?,
            hidden_dim: s.parse("hidden_dim", 1024usize)?,
            latent_dim: s.parse("latent_dim", 50usize)?,
            num_filters: s.parse("num_filters", 32usize)?,
            regularizer,
            rqdia_weight: s.parse("rqdia_weight", 1.0)?,
            rqdia_action_subset: if subset == 0 { None } else { Some(subset) },
        }
    };

    let c51 = {
        let mut s = Section { name: "c51", kv };
        let rqdia_mode = match s.take("rqdia_mode").as_deref() {
            Some("off") | None => RqdiaMode::Off,
            Some("mse") => RqdiaMode::Mse,
            Some("kl") => RqdiaMode::Kl,
            Some(other) => return Err(s.bad("rqdia_mode", format!("unknown mode {other:?}"))),
        };
        let conv_channels = match s.take("conv_channels") {
            None => (32, 64),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(s.bad("conv_channels", "expected two comma-separated integers"));
                }
                let a = parts[0]
                    .parse()
                    .map_err(|_| s.bad("conv_channels", format!("cannot parse {v:?}")))?;
                let b = parts[1]
                    .parse()
                    .map_err(|_| s.bad("conv_channels", format!("cannot parse {v:?}")))?;
                (a, b)
            }
        };
        C51Config {
            atoms: s.parse("atoms", 51usize)?,
            v_min: s.parse("v_min", -10.0)?,
            v_max: s.parse("v_max", 10.0)?,
            n_step: s.parse("n_step", 20usize)?,
            gamma: s.parse("gamma", 0.99)?,
            batch_size: s.parse("batch_size", 32usize)?,
            lr: s.parse("lr", 1e-4)?,
            adam_eps: s.parse("adam_eps", 1.5e-5)?,
            max_grad_norm: s.parse("max_grad_norm", 10.0)?,
            target_update_period: s.parse("target_update_period", 2000u64)?,
            noisy: s.parse_bool("noisy", true)?,
            noisy_sigma0: s.parse("noisy_sigma0", 0.1)?,
            dueling: s.parse_bool("dueling", true)?,
            rqdia_mode,
            rqdia_weight: s.parse("rqdia_weight", 1.0)?,
            hidden_dim: s.parse("hidden_dim", 256usize)?,
            conv_channels,
            eps_start: s.parse("eps_start", 1.0)?,
            eps_end: s.parse("eps_end", 0.01)?,
            eps_decay_steps: s.parse("eps_decay_steps", 5000u64)?,
        }
    };

    Ok(RunConfig {
        run,
        env,
        augment,
        replay,
        sac,
        c51,
    })
}
