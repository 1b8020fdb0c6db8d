//! Planar block pushing on a unit-square table.
//!
//! The agent is a disc driven by a first-order velocity command. The block is
//! a square that is pushed by translation only; for contact it is treated as
//! a disc of radius `block_contact_radius`, which keeps pushing directions
//! predictable. Coverage is computed exactly on the square.

pub mod dataset;
pub mod expert;
pub mod geometry;
pub mod render;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seed;
use geometry::{clip_to_box, polygon_area, square_corners, Point};

pub use dataset::{generate_dataset, DemoDataset, Episode};
pub use expert::scripted_expert;
pub use render::{render, ScenePatch};

/// Action dimension (planar velocity command).
pub const ACTION_DIM: usize = 2;
/// Agent state dimension (position and velocity).
pub const AGENT_STATE_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub agent_radius: f64,
    pub block_half: f64,
    pub block_contact_radius: f64,
    pub goal_center: Point,
    pub goal_half: f64,
    /// Speed reached under a unit command (workspace units per step).
    pub max_speed: f64,
    /// Fraction of the gap to the commanded velocity closed each step.
    pub response: f64,
    /// Block centres are drawn from `[margin, 1 − margin]²`.
    pub spawn_margin: f64,
    pub image_size: usize,
    pub success_threshold: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            agent_radius: 0.025,
            block_half: 0.06,
            block_contact_radius: 0.07,
            goal_center: [0.5, 0.5],
            goal_half: 0.1,
            max_speed: 0.02,
            response: 0.4,
            spawn_margin: 0.15,
            image_size: 64,
            success_threshold: 0.9,
        }
    }
}

impl EnvConfig {
    /// Stable hash of the configuration, recorded in dataset metadata.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&json);
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn goal_lo(&self) -> Point {
        [self.goal_center[0] - self.goal_half, self.goal_center[1] - self.goal_half]
    }

    pub fn goal_hi(&self) -> Point {
        [self.goal_center[0] + self.goal_half, self.goal_center[1] + self.goal_half]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_pos: Point,
    pub agent_vel: Point,
    pub block_pos: Point,
    pub block_angle: f64,
    /// Seed this episode was reset from.
    pub seed: u64,
    pub steps: usize,
    /// Last applied (clamped) command; the expert's slew limit uses it.
    pub last_action: Point,
}

impl EnvState {
    pub fn agent_state(&self) -> [f64; AGENT_STATE_DIM] {
        [self.agent_pos[0], self.agent_pos[1], self.agent_vel[0], self.agent_vel[1]]
    }
}

/// Clamps a command to the unit disc. Non-finite components become 0.
pub fn clamp_action(a: [f64; 2]) -> [f64; 2] {
    let a = a.map(|x| if x.is_finite() { x } else { 0.0 });
    let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
    if n > 1.0 {
        [a[0] / n, a[1] / n]
    } else {
        a
    }
}

/// Half-extent of the axis-aligned bounding box of the rotated block.
fn block_extent(cfg: &EnvConfig, angle: f64) -> f64 {
    cfg.block_half * (angle.cos().abs() + angle.sin().abs())
}

/// Fraction of the block's area lying inside the goal square.
pub fn coverage(cfg: &EnvConfig, s: &EnvState) -> f64 {
    let sq = square_corners(s.block_pos, cfg.block_half, s.block_angle);
    let inter = clip_to_box(&sq, cfg.goal_lo(), cfg.goal_hi());
    let c = polygon_area(&inter) / (4.0 * cfg.block_half * cfg.block_half);
    c.clamp(0.0, 1.0)
}

pub fn reset(cfg: &EnvConfig, seed: u64) -> EnvState {
    use rand::Rng;
    let mut rng = seed::rng_from(seed);
    let m = cfg.spawn_margin;
    let quarter = std::f64::consts::FRAC_PI_4;
    let mut s = EnvState {
        agent_pos: [0.0; 2],
        agent_vel: [0.0; 2],
        block_pos: [0.5; 2],
        block_angle: 0.0,
        seed,
        steps: 0,
        last_action: [0.0; 2],
    };
    loop {
        s.block_pos = [rng.gen_range(m..1.0 - m), rng.gen_range(m..1.0 - m)];
        s.block_angle = rng.gen_range(-quarter..quarter);
        if coverage(cfg, &s) == 0.0 {
            break;
        }
    }
    let r = cfg.agent_radius;
    loop {
        s.agent_pos = [rng.gen_range(r..1.0 - r), rng.gen_range(r..1.0 - r)];
        if dist(s.agent_pos, s.block_pos) > cfg.block_contact_radius + r + 0.03 {
            break;
        }
    }
    s
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Advances one step and returns the new state and its coverage.
pub fn step(cfg: &EnvConfig, state: &EnvState, action: [f64; 2]) -> (EnvState, f64) {
    let u = clamp_action(action);
    let mut s = state.clone();
    let r = cfg.agent_radius;
    for i in 0..2 {
        s.agent_vel[i] += cfg.response * (u[i] * cfg.max_speed - s.agent_vel[i]);
        s.agent_pos[i] += s.agent_vel[i];
        if s.agent_pos[i] < r || s.agent_pos[i] > 1.0 - r {
            s.agent_pos[i] = s.agent_pos[i].clamp(r, 1.0 - r);
            s.agent_vel[i] = 0.0;
        }
    }

    let reach = cfg.block_contact_radius + r;
    let d = [s.block_pos[0] - s.agent_pos[0], s.block_pos[1] - s.agent_pos[1]];
    let dn = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if dn < reach {
        let n = if dn > 1e-12 { [d[0] / dn, d[1] / dn] } else { [1.0, 0.0] };
        let push = reach - dn;
        s.block_pos[0] += n[0] * push;
        s.block_pos[1] += n[1] * push;
        let e = block_extent(cfg, s.block_angle);
        let clamped = s.block_pos.map(|p| p.clamp(e, 1.0 - e));
        if clamped != s.block_pos {
            s.block_pos = clamped;
            // Block pinned at a wall: the agent yields instead.
            let d = [s.agent_pos[0] - s.block_pos[0], s.agent_pos[1] - s.block_pos[1]];
            let dn = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if dn < reach {
                let n = if dn > 1e-12 { [d[0] / dn, d[1] / dn] } else { [-1.0, 0.0] };
                for i in 0..2 {
                    s.agent_pos[i] = (s.block_pos[i] + n[i] * reach).clamp(r, 1.0 - r);
                }
                s.agent_vel = [0.0; 2];
            }
        }
    }
    s.steps += 1;
    s.last_action = u;
    let c = coverage(cfg, &s);
    (s, c)
}

/// `(max coverage over the trace, success flag)`. An empty trace scores 0.
pub fn score_episode(cfg: &EnvConfig, coverages: &[f64]) -> (f64, bool) {
    let score = coverages.iter().copied().fold(0.0, f64::max);
    (score, score >= cfg.success_threshold)
}
