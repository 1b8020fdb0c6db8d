//! Waypoint controller used to generate demonstrations.

use std::f64::consts::PI;

use super::{EnvConfig, EnvState};

/// Maximum change of the command per step.
pub const SLEW_LIMIT: f64 = 0.25;
/// Block-to-goal distance below which the expert stops.
const DONE_TOL: f64 = 0.008;
const ORBIT_MARGIN: f64 = 0.04;
const ORBIT_STEP: f64 = PI / 3.0;
const ALIGN_TOL: f64 = 0.35;
const LATERAL_GAIN: f64 = 10.0;

fn norm(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn clamp_norm(v: [f64; 2], max: f64) -> [f64; 2] {
    let n = norm(v);
    if n > max {
        [v[0] * max / n, v[1] * max / n]
    } else {
        v
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn desired(cfg: &EnvConfig, s: &EnvState) -> [f64; 2] {
    let c = s.block_pos;
    let d = [cfg.goal_center[0] - c[0], cfg.goal_center[1] - c[1]];
    let dist = norm(d);
    if dist < DONE_TOL {
        return [0.0, 0.0];
    }
    let n = [d[0] / dist, d[1] / dist];
    let perp = [-n[1], n[0]];
    let rel = [s.agent_pos[0] - c[0], s.agent_pos[1] - c[1]];
    let along = rel[0] * n[0] + rel[1] * n[1];
    let lat = rel[0] * perp[0] + rel[1] * perp[1];
    let contact = cfg.block_contact_radius + cfg.agent_radius;

    if along < -0.5 * contact && lat.abs() < ALIGN_TOL * contact {
        // Behind and roughly in line: push, steering back onto the line.
        let speed = (dist / 0.05).clamp(0.25, 1.0);
        let dir = [n[0] - LATERAL_GAIN * lat * perp[0], n[1] - LATERAL_GAIN * lat * perp[1]];
        let k = speed / norm(dir);
        return [dir[0] * k, dir[1] * k];
    }

    let radius = contact + ORBIT_MARGIN;
    let target = (-n[1]).atan2(-n[0]);
    let here = rel[1].atan2(rel[0]);
    let delta = wrap(target - here);
    let wp = if delta.abs() <= ORBIT_STEP && norm(rel) > contact {
        let r = contact + 0.01;
        [c[0] - n[0] * r, c[1] - n[1] * r]
    } else {
        let a = here + delta.clamp(-ORBIT_STEP, ORBIT_STEP);
        [c[0] + radius * a.cos(), c[1] + radius * a.sin()]
    };
    clamp_norm([(wp[0] - s.agent_pos[0]) / 0.05, (wp[1] - s.agent_pos[1]) / 0.05], 1.0)
}

/// Bounded command (norm ≤ 1) whose change from `state.last_action` is at
/// most [`SLEW_LIMIT`].
pub fn scripted_expert(cfg: &EnvConfig, state: &EnvState) -> [f64; 2] {
    let want = desired(cfg, state);
    let last = state.last_action;
    let step = clamp_norm([want[0] - last[0], want[1] - last[1]], SLEW_LIMIT);
    clamp_norm([last[0] + step[0], last[1] + step[1]], 1.0)
}
