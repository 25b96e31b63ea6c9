//! Push-glide cart: a board with a single pusher leg, driven by a cyclic
//! phase clock. The leg tip contacts the ground when swung low; contact entry
//! is a perfectly inelastic jump that zeroes the tip's tangential velocity.

use crate::envs::dataset::Transition;
use crate::envs::StepResult;
use crate::error::{DhalError, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

pub const CART_MODE_GLIDE: usize = 0;
pub const CART_MODE_AIRBORNE: usize = 1;
pub const CART_MODE_PUSH: usize = 2;
pub const CART_OBS_DIM: usize = 9;
pub const CART_ACT_DIM: usize = 1;
pub const CART_CONTACT_DIM: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartParams {
    pub dt: f64,
    pub period: f64,
    /// Torque bound h; actions live in [-h, h].
    pub action_bound: f64,
    pub command_velocity: f64,
    pub rolling_friction: f64,
    pub leg_length: f64,
    pub pivot_height: f64,
    pub torque_gain: f64,
    pub leg_damping: f64,
    pub push_gain: f64,
    pub leg_angle_limit: f64,
    pub horizon: usize,
}

impl Default for CartParams {
    fn default() -> Self {
        CartParams {
            dt: 0.02,
            period: 4.0,
            action_bound: 1.0,
            command_velocity: 1.0,
            rolling_friction: 0.2,
            leg_length: 1.0,
            pivot_height: 0.8,
            torque_gain: 8.0,
            leg_damping: 2.0,
            push_gain: 4.0,
            leg_angle_limit: 1.2,
            horizon: 200,
        }
    }
}

/// Sinusoidal task clock with low-pass-filtered glide/push indicators.
#[derive(Debug, Clone, Copy)]
pub struct PhaseClock {
    pub period: f64,
    pub t: f64,
    pub still: bool,
    pub lpf_glide: f64,
    pub lpf_push: f64,
}

impl PhaseClock {
    pub fn new(period: f64, still: bool) -> Self {
        // Filter state starts at the raw indicators for t = 0.
        let (g, p) = raw_indicators(0.0, still);
        PhaseClock { period, t: 0.0, still, lpf_glide: g, lpf_push: p }
    }

    pub fn phase(&self) -> f64 {
        (2.0 * std::f64::consts::PI * self.t / self.period).sin()
    }

    pub fn angle(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.t / self.period
    }
}

fn raw_indicators(phase: f64, still: bool) -> (f64, f64) {
    let glide = phase < 0.5 || still;
    let push = phase >= 0.5 && !still;
    (f64::from(u8::from(glide)), f64::from(u8::from(push)))
}

/// Raw indicators from the current phase, then one low-pass update
/// y <- 0.9 y + 0.1 raw. Returns the filtered pair.
pub fn phase_indicators(clock: &mut PhaseClock) -> (f64, f64) {
    debug_assert!(clock.period > 0.0);
    let (rg, rp) = raw_indicators(clock.phase(), clock.still);
    clock.lpf_glide = 0.9 * clock.lpf_glide + 0.1 * rg;
    clock.lpf_push = 0.9 * clock.lpf_push + 0.1 * rp;
    (clock.lpf_glide, clock.lpf_push)
}

#[derive(Debug, Clone, Copy)]
pub struct CartEnvState {
    pub x: f64,
    pub v: f64,
    pub theta: f64,
    pub omega: f64,
    pub contact: bool,
    pub prev_action: f64,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct CartEnv {
    pub params: CartParams,
    pub state: CartEnvState,
    pub clock: PhaseClock,
    rng: RngStream,
}

fn tip_height(p: &CartParams, theta: f64) -> f64 {
    p.pivot_height - p.leg_length * theta.cos()
}

/// Observation layout: [v, theta, omega, contact, sin, cos, glide, push, c_x].
/// The ground-truth mode never appears here.
pub fn make_observation(p: &CartParams, s: &CartEnvState, clock: &PhaseClock) -> Vec<f32> {
    let a = clock.angle();
    vec![
        s.v as f32,
        s.theta as f32,
        s.omega as f32,
        f32::from(u8::from(s.contact)),
        a.sin() as f32,
        a.cos() as f32,
        clock.lpf_glide as f32,
        clock.lpf_push as f32,
        p.command_velocity as f32,
    ]
}

impl CartEnv {
    pub fn new(params: CartParams, seed: u64) -> Self {
        let clock = PhaseClock::new(params.period, params.command_velocity == 0.0);
        let state = CartEnvState {
            x: 0.0,
            v: 0.0,
            theta: 0.9,
            omega: 0.0,
            contact: false,
            prev_action: 0.0,
            step: 0,
        };
        CartEnv { params, state, clock, rng: RngStream::new(seed) }
    }

    pub fn reset(&mut self) -> Vec<f32> {
        self.clock = PhaseClock::new(self.params.period, self.params.command_velocity == 0.0);
        self.state = CartEnvState {
            x: 0.0,
            v: 0.02 * self.rng.uniform_range(-1.0, 1.0),
            theta: 0.9 + 0.1 * self.rng.uniform_range(-1.0, 1.0),
            omega: 0.0,
            contact: false,
            prev_action: 0.0,
            step: 0,
        };
        self.state.contact = tip_height(&self.params, self.state.theta) <= 0.0;
        make_observation(&self.params, &self.state, &self.clock)
    }

    /// True mode from simulator internals: contact means push, otherwise the
    /// push half of the cycle without contact is the airborne transition.
    pub fn true_mode(&self) -> usize {
        if self.state.contact {
            CART_MODE_PUSH
        } else if self.clock.phase() >= 0.5 && !self.clock.still {
            CART_MODE_AIRBORNE
        } else {
            CART_MODE_GLIDE
        }
    }

    pub fn step(&mut self, action: f64) -> Result<StepResult> {
        let p = self.params;
        if !action.is_finite() || action.abs() > p.action_bound {
            return Err(DhalError::Contract(format!(
                "cart action {action} outside bound [{}, {}]",
                -p.action_bound, p.action_bound
            )));
        }
        let (dg, dp) = phase_indicators(&mut self.clock);
        let s = &mut self.state;

        // Leg dynamics, semi-implicit.
        s.omega += (p.torque_gain * action - p.leg_damping * s.omega) * p.dt;
        s.theta += s.omega * p.dt;

        let was_contact = s.contact;
        s.contact = tip_height(&p, s.theta) <= 0.0;
        if s.contact && !was_contact {
            // Inelastic jump: zero the tip's world-frame tangential velocity.
            s.omega = -s.v / (p.leg_length * s.theta.cos());
        }

        // Backward leg sweep under contact propels the board.
        if s.contact && s.omega < 0.0 && action < 0.0 {
            s.v += p.push_gain * (-action) * p.dt;
        }
        let decel = p.rolling_friction * p.dt;
        s.v -= s.v.signum() * decel.min(s.v.abs());
        s.x += s.v * p.dt;
        s.step += 1;

        let track = (-(s.v - p.command_velocity).powi(2) / 0.25).exp();
        let contact_f = f64::from(u8::from(s.contact));
        let glide = dg * (track + 0.1 * (1.0 - contact_f));
        let push = dp * (track + 0.3 * contact_f);
        let reg = -0.05 * (action - s.prev_action).abs() - 0.05 * action * action;
        s.prev_action = action;

        let done = s.step >= p.horizon || s.theta.abs() > p.leg_angle_limit;
        self.clock.t += p.dt;
        let mode = self.true_mode();
        Ok(StepResult {
            next_obs: make_observation(&p, &self.state, &self.clock),
            rewards: [glide as f32, push as f32, reg as f32],
            contacts: vec![self.state.contact],
            done,
            true_mode: Some(mode),
        })
    }
}

/// Scripted phase-tracking policy with exploration noise, used to generate
/// mode-diverse trajectories for unsupervised training.
pub fn cart_generate(
    params: &CartParams,
    episodes: usize,
    steps: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<Transition>> {
    if episodes == 0 || steps == 0 {
        return Err(DhalError::Config("episodes and steps must be >= 1".into()));
    }
    let root = RngStream::new(seed);
    let mut out = Vec::with_capacity(episodes * steps);
    for ep in 0..episodes {
        let mut rng = root.split(ep as u64);
        let mut env = CartEnv::new(*params, root.split(episodes as u64 + ep as u64).next_u64());
        let mut obs = env.reset();
        for _ in 0..steps {
            let drive = -0.7 * env.clock.phase();
            let a = (drive + noise_scale * rng.normal() as f64)
                .clamp(-params.action_bound, params.action_bound);
            let r = env.step(a)?;
            out.push(Transition {
                obs,
                action: vec![a as f32],
                next_obs: r.next_obs.clone(),
                contacts: r.contacts.clone(),
                done: r.done,
                true_mode: r.true_mode,
            });
            obs = r.next_obs;
            if r.done {
                obs = env.reset();
            }
        }
    }
    Ok(out)
}
