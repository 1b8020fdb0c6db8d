//! Top-down rasterizer with 2×2 supersampling.

use rand::Rng;

use super::geometry::Point;
use super::{EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TABLE: [f64; 3] = [0.92, 0.90, 0.85];
const GOAL: [f64; 3] = [0.55, 0.80, 0.55];
const BLOCK: [f64; 3] = [0.42, 0.44, 0.50];
const AGENT: [f64; 3] = [0.25, 0.40, 0.85];
const SUB: [f64; 2] = [0.25, 0.75];

/// A printed patch lying on the table.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePatch {
    /// `[3 × h × w]` in `[0, 1]`.
    pub image: Tensor<f64>,
    pub center: Point,
    pub angle: f64,
    /// Side length in workspace units.
    pub size: f64,
}

impl ScenePatch {
    pub fn new(image: Tensor<f64>, center: Point, angle: f64, size: f64) -> Result<Self> {
        if image.ndim() != 3 || image.shape()[0] != 3 {
            return Err(Error::dim(format!("patch image must be 3×h×w, got {:?}", image.shape())));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::usage("patch pixels must lie in [0, 1]"));
        }
        Ok(Self {
            image,
            center,
            angle,
            size,
        })
    }

    /// The patch stays on the table and off the goal interior at any rotation.
    pub fn placement_ok(cfg: &EnvConfig, center: Point, size: f64) -> bool {
        let rad = size * std::f64::consts::FRAC_1_SQRT_2;
        let on_table = center.iter().all(|&c| c >= rad && c <= 1.0 - rad);
        let (lo, hi) = (cfg.goal_lo(), cfg.goal_hi());
        let dx = (lo[0] - center[0]).max(center[0] - hi[0]).max(0.0);
        let dy = (lo[1] - center[1]).max(center[1] - hi[1]).max(0.0);
        on_table && (dx * dx + dy * dy).sqrt() > rad
    }

    /// Random pose: rotation in `[−45°, 45°]`, centre in the allowed region.
    pub fn sample_pose<R: Rng + ?Sized>(cfg: &EnvConfig, size: f64, rng: &mut R) -> (Point, f64) {
        let q = std::f64::consts::FRAC_PI_4;
        let angle = rng.gen_range(-q..=q);
        loop {
            let c = [rng.gen::<f64>(), rng.gen::<f64>()];
            if Self::placement_ok(cfg, c, size) {
                return (c, angle);
            }
        }
    }

    /// Paints the patch into a stored `[3 × n × n]` frame, only over pixels
    /// showing bare table or goal, so agent and block stay on top as in
    /// [`render`]. Mixed edge pixels are left alone.
    pub fn overlay_background(&self, frame: &mut [u8], n: usize) {
        let quant = |c: [f64; 3]| c.map(|v| (v * 255.0).round() as u8);
        let (table, goal) = (quant(TABLE), quant(GOAL));
        let px = 1.0 / n as f64;
        for row in 0..n {
            for col in 0..n {
                let Some((u, v)) = self.local([(col as f64 + 0.5) * px, (row as f64 + 0.5) * px]) else {
                    continue;
                };
                let at = |c: usize| (c * n + row) * n + col;
                let here = [frame[at(0)], frame[at(1)], frame[at(2)]];
                if here == table || here == goal {
                    for (c, x) in self.sample(u, v).into_iter().enumerate() {
                        frame[at(c)] = (x.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }

    /// Patch-local pixel coordinates `(col, row)` of a world point, or `None`
    /// outside the quad.
    fn local(&self, q: Point) -> Option<(f64, f64)> {
        let (s, c) = self.angle.sin_cos();
        let d = [q[0] - self.center[0], q[1] - self.center[1]];
        let lx = c * d[0] + s * d[1];
        let ly = -s * d[0] + c * d[1];
        let h = self.size * 0.5;
        if lx.abs() > h || ly.abs() > h {
            return None;
        }
        let (ph, pw) = (self.image.shape()[1] as f64, self.image.shape()[2] as f64);
        Some(((lx / self.size + 0.5) * pw - 0.5, (ly / self.size + 0.5) * ph - 0.5))
    }

    fn sample(&self, col: f64, row: f64) -> [f64; 3] {
        let (ph, pw) = (self.image.shape()[1], self.image.shape()[2]);
        let col = col.clamp(0.0, (pw - 1) as f64);
        let row = row.clamp(0.0, (ph - 1) as f64);
        let (c0, r0) = (col.floor() as usize, row.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(pw - 1), (r0 + 1).min(ph - 1));
        let (fc, fr) = (col - c0 as f64, row - r0 as f64);
        let d = self.image.data();
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let at = |r: usize, c: usize| d[(ch * ph + r) * pw + c];
            *o = (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1))
                + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1));
        }
        out
    }
}

fn in_block(cfg: &EnvConfig, s: &EnvState, q: Point) -> bool {
    let (sn, cs) = s.block_angle.sin_cos();
    let d = [q[0] - s.block_pos[0], q[1] - s.block_pos[1]];
    let lx = cs * d[0] + sn * d[1];
    let ly = -sn * d[0] + cs * d[1];
    lx.abs() <= cfg.block_half && ly.abs() <= cfg.block_half
}

fn in_goal(cfg: &EnvConfig, q: Point) -> bool {
    let (lo, hi) = (cfg.goal_lo(), cfg.goal_hi());
    q[0] >= lo[0] && q[0] <= hi[0] && q[1] >= lo[1] && q[1] <= hi[1]
}

/// Renders `[3 × S × S]` in `[0, 1]`; column = x, row = y.
pub fn render(cfg: &EnvConfig, s: &EnvState, patch: Option<&ScenePatch>) -> Tensor<f64> {
    let n = cfg.image_size;
    let px = 1.0 / n as f64;
    let mut out = vec![0.0; 3 * n * n];
    for row in 0..n {
        for col in 0..n {
            let centre = [(col as f64 + 0.5) * px, (row as f64 + 0.5) * px];
            let patch_colour = patch.and_then(|p| p.local(centre).map(|(u, v)| p.sample(u, v)));
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let q = [(col as f64 + sx) * px, (row as f64 + sy) * px];
                    let colour = if super::dist(q, s.agent_pos) <= cfg.agent_radius {
                        AGENT
                    } else if in_block(cfg, s, q) {
                        BLOCK
                    } else if let Some(p) = patch.filter(|p| p.local(q).is_some()) {
                        // Sub-samples take the colour at the pixel centre so an
                        // axis-aligned, grid-aligned patch reproduces its pixels.
                        patch_colour.unwrap_or_else(|| {
                            let (u, v) = p.local(q).expect("inside");
                            p.sample(u, v)
                        })
                    } else if in_goal(cfg, q) {
                        GOAL
                    } else {
                        TABLE
                    };
                    for c in 0..3 {
                        acc[c] += colour[c];
                    }
                }
            }
            for c in 0..3 {
                out[(c * n + row) * n + col] = (acc[c] * 0.25).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec([3, n, n], out).expect("render buffer")
}

/// Pixels any of whose sub-samples fall inside the patch quad.
pub fn patch_footprint(cfg: &EnvConfig, patch: &ScenePatch) -> Vec<bool> {
    let n = cfg.image_size;
    let px = 1.0 / n as f64;
    let mut mask = vec![false; n * n];
    for row in 0..n {
        for col in 0..n {
            mask[row * n + col] = SUB.iter().any(|&sy| {
                SUB.iter()
                    .any(|&sx| patch.local([(col as f64 + sx) * px, (row as f64 + sy) * px]).is_some())
            });
        }
    }
    mask
}

/// 8-bit quantization used for stored and observed frames.
pub fn to_u8(img: &Tensor<f64>) -> Vec<u8> {
    img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn from_u8(bytes: &[u8], shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::from_vec(shape.to_vec(), bytes.iter().map(|&b| b as f64 / 255.0).collect())
}
