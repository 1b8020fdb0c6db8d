//! Random affine placements used to train patches that survive pose changes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ResampleMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineTransformFamily {
    /// Maximum shift as a fraction of the image size, per axis.
    pub shift: f64,
    pub rotation_deg: f64,
    pub scale: [f64; 2],
    pub shear_deg: f64,
}

impl Default for AffineTransformFamily {
    fn default() -> Self {
        Self {
            shift: 0.4,
            rotation_deg: 45.0,
            scale: [1.0, 1.0],
            shear_deg: 50.0,
        }
    }
}

/// `q = A·p + t` in pixel units, with both patch and image coordinates
/// centred on their middles.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform {
    pub shift: [f64; 2],
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: [f64; 2],
    pub image_hw: (usize, usize),
}

impl AffineTransform {
    pub fn identity(image_hw: (usize, usize)) -> Self {
        Self {
            shift: [0.0, 0.0],
            rotation_deg: 0.0,
            scale: 1.0,
            shear_deg: [0.0, 0.0],
            image_hw,
        }
    }

    /// `A = s · R(θ) · Shear_x · Shear_y`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (kx, ky) = (self.shear_deg[0].to_radians().tan(), self.shear_deg[1].to_radians().tan());
        // Shear_x · Shear_y = [[1 + kx·ky, kx], [ky, 1]]
        let sh = [[1.0 + kx * ky, kx], [ky, 1.0]];
        let r = [[c, -s], [s, c]];
        let mut a = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                a[i][j] = self.scale * (r[i][0] * sh[0][j] + r[i][1] * sh[1][j]);
            }
        }
        a
    }

    pub fn determinant(&self) -> f64 {
        let a = self.matrix();
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
    }

    /// Bilinear gather writing the transformed `patch_hw` patch into the image.
    pub fn resample_map<T: Scalar>(&self, patch_hw: (usize, usize)) -> Result<ResampleMap<T>> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::usage("affine transform is singular"));
        }
        let a = self.matrix();
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        let (h, w) = self.image_hw;
        let (ph, pw) = patch_hw;
        let (pcx, pcy) = ((pw as f64 - 1.0) / 2.0, (ph as f64 - 1.0) / 2.0);
        let (icx, icy) = ((w / 2) as f64, (h / 2) as f64);
        let shift = [self.shift[0] * w as f64, self.shift[1] * h as f64];
        let mut entries = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let qx = c as f64 - icx - shift[0];
                let qy = r as f64 - icy - shift[1];
                let u = inv[0][0] * qx + inv[0][1] * qy + pcx;
                let v = inv[1][0] * qx + inv[1][1] * qy + pcy;
                if u < -0.5 || u >= pw as f64 - 0.5 || v < -0.5 || v >= ph as f64 - 0.5 {
                    continue;
                }
                let uc = u.clamp(0.0, (pw - 1) as f64);
                let vc = v.clamp(0.0, (ph - 1) as f64);
                let (u0, v0) = (uc.floor() as usize, vc.floor() as usize);
                let (u1, v1) = ((u0 + 1).min(pw - 1), (v0 + 1).min(ph - 1));
                let (fu, fv) = (uc - u0 as f64, vc - v0 as f64);
                let taps = [
                    (v0 * pw + u0, T::lit((1.0 - fu) * (1.0 - fv))),
                    (v0 * pw + u1, T::lit(fu * (1.0 - fv))),
                    (v1 * pw + u0, T::lit((1.0 - fu) * fv)),
                    (v1 * pw + u1, T::lit(fu * fv)),
                ];
                entries.push((r * w + c, taps));
            }
        }
        Ok(ResampleMap {
            out_hw: (h, w),
            src_hw: patch_hw,
            entries,
        })
    }
}

impl AffineTransformFamily {
    pub fn sample<R: Rng + ?Sized>(&self, image_hw: (usize, usize), rng: &mut R) -> AffineTransform {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let scale = if self.scale[1] > self.scale[0] {
            rng.gen_range(self.scale[0]..=self.scale[1])
        } else {
            self.scale[0]
        };
        AffineTransform {
            shift: [sym(rng, self.shift), sym(rng, self.shift)],
            rotation_deg: sym(rng, self.rotation_deg),
            scale,
            shear_deg: [sym(rng, self.shear_deg), sym(rng, self.shear_deg)],
            image_hw,
        }
    }

    pub fn contains(&self, t: &AffineTransform) -> bool {
        t.shift.iter().all(|s| s.abs() <= self.shift)
            && t.rotation_deg.abs() <= self.rotation_deg
            && (self.scale[0]..=self.scale[1]).contains(&t.scale)
            && t.shear_deg.iter().all(|s| s.abs() <= self.shear_deg)
    }
}
