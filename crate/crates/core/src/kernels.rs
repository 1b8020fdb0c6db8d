//! Raw slice kernels used by the autodiff ops. All loops run in a fixed
//! order so results are bit-reproducible.

use crate::scalar::Scalar;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[T; LANES] = x.try_into().expect("chunk");
        let y: &[T; LANES] = y.try_into().expect("chunk");
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
    }
    let mut s = acc[0];
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Below this many columns the matrix kernels work on a transposed copy so
/// the inner loops run over the long shared dimension instead.
const NARROW: usize = 64;

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

// The wide paths walk `p` (the shared dimension) outermost so each row of the
// large operand is streamed once.

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if n < NARROW {
        let bt = transpose(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] = dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return c;
    }
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
    c
}

/// `da[m×k] += dc[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_grad_a<T: Scalar>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    if n < NARROW {
        let bt = transpose(b, k, n);
        for i in 0..m {
            let mut acc = vec![T::zero(); k];
            for j in 0..n {
                let g = dc[i * n + j];
                if g != T::zero() {
                    axpy(g, &bt[j * k..(j + 1) * k], &mut acc);
                }
            }
            for (d, v) in da[i * k..(i + 1) * k].iter_mut().zip(acc) {
                *d = *d + v;
            }
        }
        return;
    }
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            da[i * k + p] = da[i * k + p] + dot(&dc[i * n..(i + 1) * n], brow);
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · dc[m×n]`
pub(crate) fn matmul_grad_b<T: Scalar>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    if n < NARROW {
        let mut dbt = vec![T::zero(); n * k];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let g = dc[i * n + j];
                if g != T::zero() {
                    axpy(g, arow, &mut dbt[j * k..(j + 1) * k]);
                }
            }
        }
        for p in 0..k {
            for j in 0..n {
                db[p * n + j] = db[p * n + j] + dbt[j * k + p];
            }
        }
        return;
    }
    for p in 0..k {
        let drow = &mut db[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &dc[i * n..(i + 1) * n], drow);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output indices `o` with `0 ≤ o·stride + k − pad < extent`.
#[inline]
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, extent: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if extent + pad > k { (extent + pad - k - 1) / stride + 1 } else { 0 };
    lo.min(out)..hi.min(out).max(lo.min(out))
}

/// Unfolds `x[c×h×w]` into `[c·kh·kw × oh·ow]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            let ys = valid_range(g.oh, g.stride, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let xs = valid_range(g.ow, g.stride, kx, g.pad, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow][xs.clone()];
                    let first = xs.start * g.stride + kx - g.pad;
                    for (di, &si) in d.iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                        *di = si;
                    }
                }
            }
        }
    }
    cols
}

/// Folds column gradients back onto `dx[c×h×w]` (accumulating).
pub(crate) fn col2im<T: Scalar>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            let ys = valid_range(g.oh, g.stride, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let xs = valid_range(g.ow, g.stride, kx, g.pad, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &dcols[row * n..(row + 1) * n];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let d = &mut dx[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow][xs.clone()];
                    let first = xs.start * g.stride + kx - g.pad;
                    for (di, &si) in d[first..].iter_mut().step_by(g.stride).zip(s) {
                        *di = *di + si;
                    }
                }
            }
        }
    }
}
