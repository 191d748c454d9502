//! Checkpoint container: run metadata, the canonical config echo, every
//! network parameter, optimizer moments, and rng stream positions. Replay
//! buffers are not checkpointed; resuming mid-run re-fills the buffer (exact
//! continuation holds from step-0 checkpoints, where the buffer is empty).

use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::harness::config::AgentKind;
use crate::rng::RngState;
use crate::tensor::serialize::{self, NamedTensor, SerializeError};

pub const MAGIC: &[u8; 4] = b"RQCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic header (not a checkpoint)")]
    BadMagic,
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("checkpoint holds a {found} agent, run config expects {expected}")]
    AgentKind { found: String, expected: String },
    #[error("parameter container: {0}")]
    Params(#[from] SerializeError),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub agent: AgentKind,
    pub env_step: u64,
    pub episode: u64,
    pub update_count: u64,
    pub config_text: String,
    pub params: Vec<NamedTensor>,
    pub optimizers: Vec<OptState>,
    pub rngs: Vec<(String, RngState)>,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(match ck.agent {
        AgentKind::Sac => 0,
        AgentKind::C51 => 1,
    });
    buf.extend_from_slice(&ck.env_step.to_le_bytes());
    buf.extend_from_slice(&ck.episode.to_le_bytes());
    buf.extend_from_slice(&ck.update_count.to_le_bytes());

    let cfg = ck.config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);

    let mut params = Vec::new();
    serialize::write_container(&mut params, &ck.params)?;
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    buf.extend_from_slice(&params);

    buf.extend_from_slice(&(ck.optimizers.len() as u32).to_le_bytes());
    for opt in &ck.optimizers {
        buf.extend_from_slice(&opt.step_count.to_le_bytes());
        buf.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
        for (m, v) in opt.m.iter().zip(&opt.v) {
            buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for &x in m {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    buf.extend_from_slice(&(ck.rngs.len() as u32).to_le_bytes());
    for (name, state) in &ck.rngs {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&state.seed);
        buf.extend_from_slice(&state.stream.to_le_bytes());
        buf.extend_from_slice(&state.word_pos.to_le_bytes());
    }

    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let data = std::fs::read(path)?;
    let mut r = data.as_slice();

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    if b[0] != VERSION {
        return Err(CheckpointError::Version {
            found: b[0],
            expected: VERSION,
        });
    }
    r.read_exact(&mut b)?;
    let agent = match b[0] {
        0 => AgentKind::Sac,
        1 => AgentKind::C51,
        k => return Err(CheckpointError::Malformed(format!("agent kind byte {k}"))),
    };
    let env_step = read_u64(&mut r)?;
    let episode = read_u64(&mut r)?;
    let update_count = read_u64(&mut r)?;

    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config_text = String::from_utf8(cfg)
        .map_err(|e| CheckpointError::Malformed(format!("config not utf8: {e}")))?;

    let plen = read_u64(&mut r)? as usize;
    let mut pbuf = vec![0u8; plen];
    r.read_exact(&mut pbuf)?;
    let params = serialize::read_container(&mut pbuf.as_slice())?;

    let nopt = read_u32(&mut r)? as usize;
    let mut optimizers = Vec::with_capacity(nopt);
    for _ in 0..nopt {
        let step_count = read_u64(&mut r)?;
        let nparams = read_u32(&mut r)? as usize;
        let mut m = Vec::with_capacity(nparams);
        let mut v = Vec::with_capacity(nparams);
        for _ in 0..nparams {
            let len = read_u64(&mut r)? as usize;
            let mut mi = vec![0f64; len];
            let mut vi = vec![0f64; len];
            for x in mi.iter_mut() {
                *x = read_f64(&mut r)?;
            }
            for x in vi.iter_mut() {
                *x = read_f64(&mut r)?;
            }
            m.push(mi);
            v.push(vi);
        }
        optimizers.push(OptState { step_count, m, v });
    }

    let nrng = read_u32(&mut r)? as usize;
    let mut rngs = Vec::with_capacity(nrng);
    for _ in 0..nrng {
        let mut nlen = [0u8; 2];
        r.read_exact(&mut nlen)?;
        let mut name = vec![0u8; u16::from_le_bytes(nlen) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::Malformed(format!("rng name: {e}")))?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = read_u64(&mut r)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        rngs.push((
            name,
            RngState {
                seed,
                stream,
                word_pos: u128::from_le_bytes(wp),
            },
        ));
    }

    Ok(Checkpoint {
        agent,
        env_step,
        episode,
        update_count,
        config_text,
        params,
        optimizers,
        rngs,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
