//! Deterministic, seeded simulators of small hybrid dynamical systems.

pub mod ball;
pub mod cart;
pub mod dataset;
pub mod leg;
pub mod slds;

/// One environment transition as consumed by learners and dataset writers.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_obs: Vec<f32>,
    /// (glide, push, regularization) reward groups, never pre-summed.
    pub rewards: [f32; 3],
    pub contacts: Vec<bool>,
    pub done: bool,
    /// Ground-truth mode label, for evaluation only. None when the simulator
    /// does not define one.
    pub true_mode: Option<usize>,
}
