//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Every op appends a node whose inputs precede it, so the arena order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Gradients are only computed along paths that reach a `requires_grad` leaf.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed bilinear gather used by [`Graph::replace_resampled`]: for each
/// covered output pixel, up to four weighted source taps (same for every channel).
#[derive(Clone, Debug)]
pub struct ResampleMap<T> {
    pub out_hw: (usize, usize),
    pub src_hw: (usize, usize),
    pub entries: Vec<(usize, [(usize, T); 4])>,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

/// Position of index `i` on an `n`-point grid spanning `[−1, 1]`.
fn grid_coord<T: Scalar>(i: usize, n: usize) -> T {
    if n > 1 {
        T::lit(2.0 * i as f64 / (n - 1) as f64 - 1.0)
    } else {
        T::zero()
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        k: usize,
        geom: ConvGeom,
        c_out: usize,
        cols: Option<Vec<T>>,
    },
    Binary(BinKind, usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Silu(usize),
    Clamp(usize, T, T),
    Sign(usize),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    SpatialMean(usize),
    /// Softmax weights per channel, kept for the backward pass.
    SpatialSoftmax(usize, Vec<T>),
    Resample {
        image: usize,
        patch: usize,
        map: Arc<ResampleMap<T>>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A computation graph. Single-threaded; independent graphs may live on
/// different threads.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf backed by a shared tensor (parameters are bound without copying).
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass. Populated for `requires_grad` leaves.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        // Forward-only graphs don't need to remember how values were produced.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {:?} @ {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.val(a).data(), self.val(b).data(), m, k, n);
        let t = Tensor::from_vec([m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// Cross-correlation of `x[c_in×h×w]` with `k[c_out×c_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] || stride == 0 {
            return Err(Error::dim(format!("conv2d x {:?} k {:?} stride {}", sx, sk, stride)));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::dim(format!("kernel {kh}x{kw} exceeds padded input {ph}x{pw}")));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::dim(format!(
                "non-integer conv output extent: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.val(x).data(), &geom);
        let out = kernels::matmul(self.val(k).data(), &cols, c_out, geom.rows(), geom.cols());
        let t = Tensor::from_vec([c_out, geom.oh, geom.ow], out)?;
        let keep_cols = self.nodes[k.0].requires_grad;
        Ok(self.push(
            t,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                geom,
                c_out,
                cols: keep_cols.then_some(cols),
            },
            &[x.0, k.0],
        ))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else if tb.numel() == 1 {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else if ta.numel() == 1 {
            let s = ta.data()[0];
            tb.map(|y| f(s, y))
        } else {
            return Err(Error::dim(format!(
                "elementwise {:?}: shapes {:?} and {:?} are not broadcast-compatible",
                kind,
                ta.shape(),
                tb.shape()
            )));
        };
        Ok(self.push(out, Op::Binary(kind, a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.val(a).map(|x| x * c);
        self.push(out, Op::Scale(a.0, c), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.val(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    /// `x·sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a.0), &[a.0])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.val(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a.0, lo, hi), &[a.0])
    }

    pub fn sign(&mut self, a: Var) -> Var {
        let out = self.val(a).map(sign);
        self.push(out, Op::Sign(a.0), &[a.0])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x.sin());
        self.push(out, Op::Sin(a.0), &[a.0])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x.cos());
        self.push(out, Op::Cos(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).sum());
        self.push(out, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).mean());
        self.push(out, Op::Mean(a.0), &[a.0])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = T::lit(self.val(a).numel().max(1) as f64);
        let s = self.val(a).sq_dist(self.val(b))?;
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a.0, b.0), &[a.0, b.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(shape.to_vec(), self.val(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.concat_check(parts, 1)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            rows += self.shape(p)[0];
            data.extend_from_slice(self.val(p).data());
        }
        let t = Tensor::from_vec([rows, cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(t, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.concat_check(parts, 0)?;
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.val(p).data()[r * c..(r + 1) * c]);
            }
        }
        let t = Tensor::from_vec([rows, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(t, Op::ConcatCols(ids.clone()), &ids))
    }

    fn concat_check(&self, parts: &[Var], fixed_axis: usize) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let want = self.shape(*first).get(fixed_axis).copied();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || Some(s[fixed_axis]) != want {
                return Err(Error::dim(format!("concat: incompatible shape {:?}", s)));
            }
        }
        Ok(want.unwrap_or(0))
    }

    /// `x[m×n] + b[n]` on every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, nb) = (self.shape(x).to_vec(), self.val(b).numel());
        if sx.len() != 2 || sx[1] != nb {
            return Err(Error::dim(format!("add_row_bias {:?} + [{}]", sx, nb)));
        }
        let bias = self.val(b).data().to_vec();
        let mut out = self.val(x).clone();
        for row in out.data_mut().chunks_mut(nb) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v = *v + bb;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x.0, b.0), &[x.0, b.0]))
    }

    /// `x[c×h×w] + b[c]` on every spatial position.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, nb) = (self.shape(x).to_vec(), self.val(b).numel());
        if sx.len() != 3 || sx[0] != nb {
            return Err(Error::dim(format!("add_channel_bias {:?} + [{}]", sx, nb)));
        }
        let hw = sx[1] * sx[2];
        let bias = self.val(b).data().to_vec();
        let mut out = self.val(x).clone();
        for (plane, &bb) in out.data_mut().chunks_mut(hw).zip(&bias) {
            for v in plane {
                *v = *v + bb;
            }
        }
        Ok(self.push(out, Op::AddChannelBias(x.0, b.0), &[x.0, b.0]))
    }

    /// Global average pool: `x[c×h×w]` to `[1×c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::dim(format!("spatial_mean on {:?}", sx)));
        }
        let hw = sx[1] * sx[2];
        let inv = T::lit(1.0 / hw as f64);
        let data = self
            .val(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::from_vec([1, sx[0]], data)?;
        Ok(self.push(t, Op::SpatialMean(x.0), &[x.0]))
    }

    /// Spatial softmax keypoints: `x[c×h×w]` to `[1×2c]` holding, per channel,
    /// the expected column then row coordinate (both in `[−1, 1]`) under a
    /// softmax over that channel's pixels.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::dim(format!("spatial_softmax on {:?}", sx)));
        }
        let (h, w) = (sx[1], sx[2]);
        let mut probs = Vec::with_capacity(self.val(x).numel());
        let mut data = Vec::with_capacity(2 * sx[0]);
        for plane in self.val(x).data().chunks(h * w) {
            let m = plane.iter().copied().fold(T::neg_infinity(), T::max);
            let start = probs.len();
            probs.extend(plane.iter().map(|&v| (v - m).exp()));
            let z = probs[start..].iter().copied().sum::<T>();
            let (mut ex, mut ey) = (T::zero(), T::zero());
            for (i, p) in probs[start..].iter_mut().enumerate() {
                *p = *p / z;
                ex = ex + *p * grid_coord::<T>(i % w, w);
                ey = ey + *p * grid_coord::<T>(i / w, h);
            }
            data.extend([ex, ey]);
        }
        let t = Tensor::from_vec([1, 2 * sx[0]], data)?;
        Ok(self.push(t, Op::SpatialSoftmax(x.0, probs), &[x.0]))
    }

    /// Overwrites the pixels of `image[c×H×W]` listed in `map` with bilinear
    /// samples of `patch[c×h×w]`; other pixels pass through.
    pub fn replace_resampled(&mut self, image: Var, patch: Var, map: Arc<ResampleMap<T>>) -> Result<Var> {
        let (si, sp) = (self.shape(image).to_vec(), self.shape(patch).to_vec());
        if si.len() != 3
            || sp.len() != 3
            || si[0] != sp[0]
            || (si[1], si[2]) != map.out_hw
            || (sp[1], sp[2]) != map.src_hw
        {
            return Err(Error::dim(format!("replace: image {:?} patch {:?}", si, sp)));
        }
        let (out_hw, src_hw) = (si[1] * si[2], sp[1] * sp[2]);
        let mut out = self.val(image).clone();
        let p = self.val(patch).data();
        for c in 0..si[0] {
            let (dst, src) = (c * out_hw, c * src_hw);
            for (pix, taps) in &map.entries {
                let mut v = T::zero();
                for &(idx, w) in taps {
                    v = v + w * p[src + idx];
                }
                out.data_mut()[dst + pix] = v;
            }
        }
        Ok(self.push(
            out,
            Op::Resample {
                image: image.0,
                patch: patch.0,
                map,
            },
            &[image.0, patch.0],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of every `requires_grad` leaf and consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, false)
    }

    /// Like [`backward`](Self::backward) but keeps the op records so the
    /// graph can be differentiated again after [`zero_grad`](Self::zero_grad).
    pub fn backward_retain(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, true)
    }

    fn run_backward(&mut self, loss: Var, retain: bool) -> Result<()> {
        if self.consumed {
            return Err(Error::usage("backward on a consumed graph"));
        }
        if self.val(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
            for i in (0..=loss.0).rev() {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    continue;
                }
                let Some(g) = self.nodes[i].grad.take() else { continue };
                let contributions = self.input_grads(i, &g)?;
                for (j, gj) in contributions {
                    self.accumulate(j, gj)?;
                }
                if retain {
                    self.nodes[i].grad = Some(g);
                }
            }
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape().to_vec()));
            }
        }
        if !retain {
            for n in &mut self.nodes {
                n.op = Op::Leaf;
            }
            self.consumed = true;
        }
        Ok(())
    }

    fn accumulate(&mut self, j: usize, g: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[j];
        if !node.requires_grad {
            return Ok(());
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g)?,
            None => node.grad = Some(g),
        }
        Ok(())
    }

    fn rg(&self, j: usize) -> bool {
        self.nodes[j].requires_grad
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let mut out = Vec::with_capacity(2);
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_grad_a(gd, tb.data(), &mut da, m, k, n);
                    out.push((*a, Tensor::from_vec([m, k], da)?));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_grad_b(ta.data(), gd, &mut db, m, k, n);
                    out.push((*b, Tensor::from_vec([k, n], db)?));
                }
            }
            Op::Conv2d {
                x,
                k,
                geom,
                c_out,
                cols,
            } => {
                let tk = &self.nodes[*k].value;
                let (rows, ncol) = (geom.rows(), geom.cols());
                if self.rg(*k) {
                    let cols = cols.as_ref().expect("cols saved when kernel requires grad");
                    let mut dk = vec![T::zero(); c_out * rows];
                    kernels::matmul_grad_a(gd, cols, &mut dk, *c_out, rows, ncol);
                    out.push((*k, Tensor::from_vec(tk.shape().to_vec(), dk)?));
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); rows * ncol];
                    kernels::matmul_grad_b(tk.data(), gd, &mut dcols, *c_out, rows, ncol);
                    let mut dx = vec![T::zero(); geom.c_in * geom.h * geom.w];
                    kernels::col2im(&dcols, geom, &mut dx);
                    out.push((*x, Tensor::from_vec([geom.c_in, geom.h, geom.w], dx)?));
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let sa = ta.numel() == 1 && tb.numel() != 1;
                let sb = tb.numel() == 1 && ta.numel() != 1;
                let (ga, gb): (Tensor<T>, Tensor<T>) = match kind {
                    BinKind::Add => (g.clone(), g.clone()),
                    BinKind::Sub => (g.clone(), g.map(|v| -v)),
                    BinKind::Mul => {
                        let ga = if sb {
                            let s = tb.data()[0];
                            g.map(|v| v * s)
                        } else if sa {
                            Tensor::scalar(kernels::dot(gd, tb.data()))
                        } else {
                            g.zip_map(tb, |x, y| x * y)?
                        };
                        let gb = if sa {
                            let s = ta.data()[0];
                            g.map(|v| v * s)
                        } else if sb {
                            Tensor::scalar(kernels::dot(gd, ta.data()))
                        } else {
                            g.zip_map(ta, |x, y| x * y)?
                        };
                        (ga, gb)
                    }
                };
                let reduce = |t: Tensor<T>, to: &Tensor<T>| -> Result<Tensor<T>> {
                    if t.numel() == to.numel() {
                        t.reshape(to.shape().to_vec())
                    } else {
                        Ok(Tensor::from_vec(to.shape().to_vec(), vec![t.sum()])?)
                    }
                };
                if self.rg(*a) {
                    out.push((*a, reduce(ga, ta)?));
                }
                if self.rg(*b) {
                    out.push((*b, reduce(gb, tb)?));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * *c))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                out.push((*a, g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                out.push((
                    *a,
                    g.zip_map(x, |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (T::one() + xv * (T::one() - s))
                    })?,
                ));
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].value;
                let (lo, hi) = (*lo, *hi);
                out.push((
                    *a,
                    g.zip_map(x, |gv, xv| if xv > lo && xv < hi { gv } else { T::zero() })?,
                ));
            }
            Op::Sign(a) => out.push((*a, Tensor::zeros(g.shape().to_vec()))),
            Op::Sin(a) => {
                let x = &self.nodes[*a].value;
                out.push((*a, g.zip_map(x, |gv, xv| gv * xv.cos())?));
            }
            Op::Cos(a) => {
                let x = &self.nodes[*a].value;
                out.push((*a, g.zip_map(x, |gv, xv| -gv * xv.sin())?));
            }
            Op::Sum(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                out.push((*a, Tensor::full(shape, gd[0])));
            }
            Op::Mean(a) => {
                let x = &self.nodes[*a].value;
                let v = gd[0] / T::lit(x.numel().max(1) as f64);
                out.push((*a, Tensor::full(x.shape().to_vec(), v)));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let c = T::lit(2.0) * gd[0] / T::lit(ta.numel().max(1) as f64);
                let diff = ta.zip_map(tb, |x, y| c * (x - y))?;
                if self.rg(*b) {
                    out.push((*b, diff.map(|v| -v)));
                }
                if self.rg(*a) {
                    out.push((*a, diff));
                }
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                out.push((*a, g.clone().reshape(shape)?));
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &j in ids {
                    let n = self.nodes[j].value.numel();
                    if self.rg(j) {
                        let shape = self.nodes[j].value.shape().to_vec();
                        out.push((j, Tensor::from_vec(shape, gd[off..off + n].to_vec())?));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(ids) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut off = 0;
                for &j in ids {
                    let c = self.nodes[j].value.shape()[1];
                    if self.rg(j) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                        }
                        out.push((j, Tensor::from_vec([rows, c], d)?));
                    }
                    off += c;
                }
            }
            Op::AddRowBias(x, b) => {
                if self.rg(*b) {
                    let tb = &self.nodes[*b].value;
                    let n = tb.numel();
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    out.push((*b, Tensor::from_vec(tb.shape().to_vec(), db)?));
                }
                if self.rg(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.rg(*b) {
                    let tb = &self.nodes[*b].value;
                    let hw = g.numel() / tb.numel();
                    let db = gd.chunks(hw).map(|p| p.iter().copied().sum()).collect();
                    out.push((*b, Tensor::from_vec(tb.shape().to_vec(), db)?));
                }
                if self.rg(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::SpatialMean(x) => {
                let s = self.nodes[*x].value.shape().to_vec();
                let hw = s[1] * s[2];
                let inv = T::lit(1.0 / hw as f64);
                let mut d = Vec::with_capacity(s[0] * hw);
                for &gc in gd {
                    d.extend(std::iter::repeat(gc * inv).take(hw));
                }
                out.push((*x, Tensor::from_vec(s, d)?));
            }
            Op::SpatialSoftmax(x, probs) => {
                let s = self.nodes[*x].value.shape().to_vec();
                let (h, w) = (s[1], s[2]);
                let means = self.nodes[i].value.data();
                let mut d = Vec::with_capacity(probs.len());
                for (c, plane) in probs.chunks(h * w).enumerate() {
                    let (gx, gy) = (gd[2 * c], gd[2 * c + 1]);
                    let (ex, ey) = (means[2 * c], means[2 * c + 1]);
                    d.extend(plane.iter().enumerate().map(|(j, &p)| {
                        p * (gx * (grid_coord::<T>(j % w, w) - ex) + gy * (grid_coord::<T>(j / w, h) - ey))
                    }));
                }
                out.push((*x, Tensor::from_vec(s, d)?));
            }
            Op::Resample { image, patch, map } => {
                let si = self.nodes[*image].value.shape().to_vec();
                let sp = self.nodes[*patch].value.shape().to_vec();
                let (out_hw, src_hw) = (si[1] * si[2], sp[1] * sp[2]);
                if self.rg(*patch) {
                    let mut dp = vec![T::zero(); sp[0] * src_hw];
                    for c in 0..sp[0] {
                        for (pix, taps) in &map.entries {
                            let gv = gd[c * out_hw + pix];
                            for &(idx, w) in taps {
                                dp[c * src_hw + idx] = dp[c * src_hw + idx] + w * gv;
                            }
                        }
                    }
                    out.push((*patch, Tensor::from_vec(sp, dp)?));
                }
                if self.rg(*image) {
                    let mut di = g.clone();
                    for c in 0..si[0] {
                        for (pix, _) in &map.entries {
                            di.data_mut()[c * out_hw + pix] = T::zero();
                        }
                    }
                    out.push((*image, di));
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_cases() {
        let mut g = Graph::<f64>::new();
        let i3 = g.constant(Tensor::eye(3));
        let p = g.matmul(i3, i3).unwrap();
        assert_eq!(g.value(p), &Tensor::eye(3));

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i2 = g.constant(Tensor::eye(2));
        let p = g.matmul(a, i2).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec([1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
        let one = g.constant(Tensor::ones([1, 1, 1, 1]));
        let y = g.conv2d(x, one, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let zero = g.constant(Tensor::zeros([2, 1, 3, 3]));
        let z = g.conv2d(x, zero, 1, 1).unwrap();
        assert_eq!(g.shape(z), &[2, 3, 3]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_non_integer_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 64, 64]));
        let k = g.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 2, 1), Err(Error::Dimension(_))));
        let k4 = g.constant(Tensor::zeros([1, 1, 4, 4]));
        assert_eq!(g.conv2d(x, k4, 2, 1).map(|v| g.shape(v).to_vec()).unwrap(), vec![1, 32, 32]);
    }

    #[test]
    fn clamp_and_sign_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-0.05, 0.01, 0.9]));
        let c = g.clamp(x, -0.03, 0.03);
        assert_eq!(g.value(c).data(), &[-0.03, 0.01, 0.03]);
        let y = g.constant(t(&[3], &[-2., 0., 3.]));
        let s = g.sign(y);
        assert_eq!(g.value(s).data(), &[-1., 0., 1.]);
    }

    #[test]
    fn elementwise_broadcast_rules() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let s = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::zeros([3, 2]));
        assert!(g.add(a, s).is_ok());
        assert!(g.mul(s, a).is_ok());
        assert!(matches!(g.sub(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.3, -1.0]));
        let m = g.mse(x, x).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 0.0);
        let a = g.constant(t(&[2], &[0., 0.]));
        let b = g.constant(t(&[2], &[1., 1.]));
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 1.0);
        let c = g.constant(t(&[3], &[1., 1., 1.]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn sum_grad_is_ones_and_disconnected_leaf_gets_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2, 2], &[1., -2., 3., 0.5]), true);
        let other = g.leaf(t(&[3], &[1., 2., 3.]), true);
        let l = g.sum(w);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1., 1., 1., 1.]);
        assert_eq!(g.grad(other).unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::ones([2]), true);
        let d = g.scale(w, 2.0);
        assert!(matches!(g.backward(d), Err(Error::Usage(_))));
        let l = g.sum(d);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Usage(_))));
    }

    #[test]
    fn retain_allows_second_backward() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2], &[1., 2.]), true);
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq);
        g.backward_retain(l).unwrap();
        let first = g.grad(w).unwrap().clone();
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &first);
        assert_eq!(first.data(), &[2., 4.]);
    }

    #[test]
    fn forward_only_graph_records_no_ops() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones([2, 2]));
        let b = g.matmul(a, a).unwrap();
        assert!(!g.requires_grad(b));
        let l = g.sum(b);
        g.backward(l).unwrap();
        assert!(g.grad(a).is_none());
    }
}
