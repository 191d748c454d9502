//! Debug frame dumper: roll an environment forward under random actions and
//! write each newest frame as a binary PGM (P5) file.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::envs::{Action, Env};
use crate::harness::config::RunConfig;
use crate::harness::run::HarnessError;
use crate::rng::{derive, Stream};

pub fn write_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> std::io::Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)
}

/// Dump `steps` frames (plus the reset frame) into `out_dir`.
pub fn dump_frames(config: &RunConfig, steps: u64, out_dir: &Path) -> Result<u64, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut env = Env::new(&config.env)?;
    let mut env_rng = derive(config.run.seed, Stream::Env);
    let mut action_rng = derive(config.run.seed, Stream::Action);
    let size = config.env.frame_size;

    env.reset(&mut env_rng);
    write_pgm(&out_dir.join("frame_00000.pgm"), &env.newest_frame(), size, size)?;
    let mut written = 1;
    for i in 1..=steps {
        let action = match env.action_dim() {
            Some(d) => Action::Continuous(
                (0..d).map(|_| action_rng.gen_range(-1.0f32..1.0)).collect(),
            ),
            None => Action::Discrete(action_rng.gen_range(0..env.action_count().unwrap())),
        };
        let (_, _, done) = env.step(&action)?;
        write_pgm(
            &out_dir.join(format!("frame_{i:05}.pgm")),
            &env.newest_frame(),
            size,
            size,
        )?;
        written += 1;
        if done {
            env.reset(&mut env_rng);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let pixels: Vec<u8> = (0..16).map(|i| i * 16).collect();
        write_pgm(&path, &pixels, 4, 4).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(&bytes[bytes.len() - 16..], &pixels[..]);
    }

    #[test]
    fn dump_writes_expected_count() {
        let config = RunConfig::from_text("[env]\nkind = catch\nframe_size = 16\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let n = dump_frames(&config, 5, dir.path()).unwrap();
        assert_eq!(n, 6);
        assert!(dir.path().join("frame_00000.pgm").exists());
        assert!(dir.path().join("frame_00005.pgm").exists());
    }
}
