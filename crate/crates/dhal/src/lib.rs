//! Mode identification and control for small hybrid dynamical systems:
//! an unsupervised mode selector with per-mode dynamics VAEs, a multi-critic
//! PPO learner with a bounded Beta action policy, and seeded toy simulators
//! with verifiable ground-truth modes.

pub mod ckpt;
pub mod config;
pub mod dha;
pub mod dist;
pub mod envs;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod params;
pub mod ppo;
pub mod rng;
pub mod special;
pub mod tensor;

pub use error::{DhalError, Result};
