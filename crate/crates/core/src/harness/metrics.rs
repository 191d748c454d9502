//! Metrics CSV emission.
//!
//! `metrics.csv` is fully deterministic for a given (binary, config, seed):
//! floats are printed with 9 significant digits and nothing time-dependent
//! goes in. Wall-clock timings are written to a `timings.csv` sidecar
//! instead, which is excluded from reproducibility comparisons.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::c51::C51Metrics;
use crate::harness::config::AgentKind;
use crate::sac::SacMetrics;

/// 9 significant digits, scientific notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub enum AgentMetrics {
    Sac(SacMetrics),
    C51(C51Metrics),
}

pub struct MetricsWriter {
    agent: AgentKind,
    out: BufWriter<File>,
    timings: BufWriter<File>,
    last_step: u64,
}

impl MetricsWriter {
    pub fn create(dir: &Path, agent: AgentKind) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        match agent {
            AgentKind::Sac => writeln!(
                out,
                "env_step,event,episode,episode_return,eval_mean_return,critic_loss,rqdia_loss,actor_loss,alpha,mean_q"
            )?,
            AgentKind::C51 => writeln!(
                out,
                "env_step,event,episode,episode_return,eval_mean_return,c51_loss,rqdia_loss,mean_q,epsilon"
            )?,
        }
        let mut timings = BufWriter::new(File::create(dir.join("timings.csv"))?);
        writeln!(timings, "env_step,wall_clock_seconds")?;
        Ok(MetricsWriter {
            agent,
            out,
            timings,
            last_step: 0,
        })
    }

    fn check_order(&mut self, env_step: u64) {
        assert!(
            env_step >= self.last_step,
            "metrics rows must be ordered by env_step"
        );
        self.last_step = env_step;
    }

    pub fn train_row(
        &mut self,
        env_step: u64,
        episode: u64,
        episode_return: f64,
        metrics: Option<&AgentMetrics>,
    ) -> std::io::Result<()> {
        self.check_order(env_step);
        let base = format!(
            "{env_step},train,{episode},{},",
            fmt_float(episode_return)
        );
        match (self.agent, metrics) {
            (AgentKind::Sac, Some(AgentMetrics::Sac(m))) => writeln!(
                self.out,
                "{base},{},{},{},{},{}",
                fmt_float(m.critic_loss),
                fmt_float(m.rqdia_loss),
                fmt_float(m.actor_loss),
                fmt_float(m.alpha),
                fmt_float(m.mean_q)
            ),
            (AgentKind::C51, Some(AgentMetrics::C51(m))) => writeln!(
                self.out,
                "{base},{},{},{},{}",
                fmt_float(m.c51_loss),
                fmt_float(m.rqdia_loss),
                fmt_float(m.mean_q),
                fmt_float(m.epsilon)
            ),
            (AgentKind::Sac, _) => writeln!(self.out, "{base},,,,"),
            (AgentKind::C51, _) => writeln!(self.out, "{base},,,"),
        }
    }

    pub fn eval_row(&mut self, env_step: u64, eval_mean: f64) -> std::io::Result<()> {
        self.check_order(env_step);
        let cols = match self.agent {
            AgentKind::Sac => ",,,,",
            AgentKind::C51 => ",,,",
        };
        writeln!(
            self.out,
            "{env_step},eval,,,{}{cols}",
            fmt_float(eval_mean)
        )
    }

    /// Diagnostic row written right before aborting on a non-finite loss.
    pub fn abort_row(&mut self, env_step: u64, what: &str) -> std::io::Result<()> {
        self.check_order(env_step);
        let cols = match self.agent {
            AgentKind::Sac => ",,,,,",
            AgentKind::C51 => ",,,,",
        };
        writeln!(self.out, "{env_step},abort:{what},,{cols}")
    }

    pub fn timing_row(&mut self, env_step: u64, seconds: f64) -> std::io::Result<()> {
        writeln!(self.timings, "{env_step},{seconds:.3}")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()?;
        self.timings.flush()
    }
}
