//! Pixel-based deep RL stack with a Q-value-distribution equalization
//! regularizer.
//!
//! The crate contains everything the two agents need, built from scratch:
//! a reverse-mode autodiff engine (`tensor`), image augmentations
//! (`augment`), replay buffers (`replay`), deterministic toy pixel
//! environments (`envs`), a pixel Soft Actor-Critic (`sac`), a categorical
//! distributional agent (`c51`), and the training harness (`harness`).

pub mod augment;
pub mod c51;
pub mod envs;
pub mod harness;
pub mod replay;
pub mod rng;
pub mod sac;
pub mod tensor;

pub use tensor::{Element, Tensor};
