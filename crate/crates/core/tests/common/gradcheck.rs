//! Central finite differences (step 1e-5) against reverse-mode gradients for
//! every differentiable op and for the full encoder + noise predictor. Errors
//! are measured relative to the largest analytic entry of each input.

use std::sync::Arc;

use dpattack_core::attacks::AffineTransformFamily;
use dpattack_core::autodiff::{Graph, Var};
use dpattack_core::diffusion::Denoiser;
use dpattack_core::policy::{ActionNormalizer, DiffusionPolicy, PolicyConfig};
use dpattack_core::seed;
use dpattack_core::tensor::Tensor;

pub const SEEDS: u64 = 25;
pub const OP_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

type Op<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

pub struct Case {
    pub name: &'static str,
    pub tol: f64,
    /// Worst relative error for one seeded draw.
    pub run: Box<dyn Fn(&mut seed::Rng) -> f64>,
}

impl Case {
    /// Worst error over every seed.
    pub fn worst(&self) -> f64 {
        (0..SEEDS)
            .map(|s| (self.run)(&mut seed::rng(s, "gradcheck", 0)))
            .fold(0.0, f64::max)
    }
}

/// Loss `Σ w ⊙ op(inputs)` with fixed random weights.
fn loss(inputs: &[Tensor<f64>], w: &Tensor<f64>, op: &Op<'_>, grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
    let y = op(&mut g, &vars);
    let wv = g.constant(w.clone());
    let prod = g.mul(y, wv).unwrap();
    let l = g.sum(prod);
    let value = g.value(l).item().unwrap();
    if !grads {
        return (value, Vec::new());
    }
    g.backward(l).unwrap();
    (value, vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect())
}

fn output_shape(inputs: &[Tensor<f64>], op: &Op<'_>) -> Vec<usize> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let y = op(&mut g, &vars);
    g.shape(y).to_vec()
}

fn max_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12)
}

/// Worst relative error over every input entry.
fn check(inputs: Vec<Tensor<f64>>, op: &Op<'_>, rng: &mut seed::Rng) -> f64 {
    let w = Tensor::uniform(output_shape(&inputs, op), -1.0, 1.0, rng);
    let (_, grads) = loss(&inputs, &w, op, true);
    let mut worst: f64 = 0.0;
    for (i, an) in grads.iter().enumerate() {
        assert_eq!(an.shape(), inputs[i].shape());
        assert!(an.data().iter().all(|v| v.is_finite()));
        let scale = max_abs(an);
        for j in 0..inputs[i].numel() {
            let at = |d: f64| {
                let mut x = inputs.clone();
                x[i].data_mut()[j] += d;
                loss(&x, &w, op, false).0
            };
            let fd = (at(H) - at(-H)) / (2.0 * H);
            worst = worst.max((fd - an.data()[j]).abs() / scale);
        }
    }
    worst
}

fn uniform(shape: &[usize], rng: &mut seed::Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Uniform values kept at least `gap` away from every kink in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut seed::Rng) -> Tensor<f64> {
    uniform(shape, rng).map(|mut v| {
        for &k in kinks {
            if (v - k).abs() < gap {
                v = k + gap.copysign(v - k);
            }
        }
        v
    })
}

fn op_case(
    name: &'static str,
    shapes: &'static [&'static [usize]],
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static,
) -> Case {
    Case {
        name,
        tol: OP_TOL,
        run: Box::new(move |r| check(shapes.iter().map(|s| uniform(s, r)).collect(), &op, r)),
    }
}

/// Single-input op evaluated away from its kinks.
fn kinked_case(name: &'static str, kinks: &'static [f64], op: impl Fn(&mut Graph<f64>, Var) -> Var + 'static) -> Case {
    Case {
        name,
        tol: OP_TOL,
        run: Box::new(move |r| check(vec![away_from(&[3, 4], kinks, 1e-3, r)], &|g, v| op(g, v[0]), r)),
    }
}

pub fn cases() -> Vec<Case> {
    const M: &[&[usize]] = &[&[2, 3], &[2, 3]];
    const MS: &[&[usize]] = &[&[2, 3], &[1]];
    const SM: &[&[usize]] = &[&[1], &[4]];
    const U: &[&[usize]] = &[&[3, 4]];
    vec![
        op_case("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap()),
        op_case("conv2d 1x5x5", &[&[1, 5, 5], &[2, 1, 3, 3]], |g, v| g.conv2d(v[0], v[1], 1, 0).unwrap()),
        op_case("conv2d stride 2 pad 1", &[&[2, 6, 6], &[3, 2, 4, 4]], |g, v| g.conv2d(v[0], v[1], 2, 1).unwrap()),
        op_case("add", M, |g, v| g.add(v[0], v[1]).unwrap()),
        op_case("add scalar rhs", MS, |g, v| g.add(v[0], v[1]).unwrap()),
        op_case("sub", M, |g, v| g.sub(v[0], v[1]).unwrap()),
        op_case("sub scalar lhs", SM, |g, v| g.sub(v[0], v[1]).unwrap()),
        op_case("mul", M, |g, v| g.mul(v[0], v[1]).unwrap()),
        op_case("mul scalar rhs", MS, |g, v| g.mul(v[0], v[1]).unwrap()),
        op_case("scale", U, |g, v| g.scale(v[0], -1.7)),
        op_case("add_scalar", U, |g, v| g.add_scalar(v[0], 0.3)),
        op_case("silu", U, |g, v| g.silu(v[0])),
        op_case("sin", U, |g, v| g.sin(v[0])),
        op_case("cos", U, |g, v| g.cos(v[0])),
        op_case("sum", U, |g, v| g.sum(v[0])),
        op_case("mean", U, |g, v| g.mean(v[0])),
        kinked_case("relu", &[0.0], |g, v| g.relu(v)),
        kinked_case("clamp", &[-0.4, 0.4], |g, v| g.clamp(v, -0.4, 0.4)),
        kinked_case("sign", &[0.0], |g, v| g.sign(v)),
        op_case("mse", &[&[2, 5], &[2, 5]], |g, v| g.mse(v[0], v[1]).unwrap()),
        op_case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]).unwrap()),
        op_case("concat_rows", &[&[1, 3], &[2, 3]], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        op_case("concat_cols", &[&[2, 1], &[2, 3]], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        op_case("spatial_mean", &[&[3, 2, 4]], |g, v| g.spatial_mean(v[0]).unwrap()),
        op_case("spatial_softmax", &[&[3, 4, 5]], |g, v| g.spatial_softmax(v[0]).unwrap()),
        op_case("add_row_bias", &[&[3, 4], &[4]], |g, v| g.add_row_bias(v[0], v[1]).unwrap()),
        op_case("add_channel_bias", &[&[2, 3, 3], &[2]], |g, v| g.add_channel_bias(v[0], v[1]).unwrap()),
        Case {
            name: "replace_resampled",
            tol: OP_TOL,
            run: Box::new(|r| {
                let t = AffineTransformFamily::default().sample((12, 12), r);
                let map = Arc::new(t.resample_map::<f64>((4, 4)).unwrap());
                let op = move |g: &mut Graph<f64>, v: &[Var]| g.replace_resampled(v[0], v[1], Arc::clone(&map)).unwrap();
                check(vec![uniform(&[3, 12, 12], r), uniform(&[3, 4, 4], r)], &op, r)
            }),
        },
        Case {
            name: "encoder + noise predictor",
            tol: COMPOSITE_TOL,
            run: Box::new(composite_case),
        },
    ]
}

fn tiny_policy(rng: &mut seed::Rng) -> DiffusionPolicy<f64> {
    let cfg = PolicyConfig {
        image_size: 16,
        encoder_channels: vec![2, 3, 3, 4],
        time_dim: 4,
        hidden: 8,
        layers: 2,
        ..PolicyConfig::default()
    };
    let mut p = DiffusionPolicy::new(cfg, ActionNormalizer::identity(2), rng).unwrap();
    // Every parameter random, including the zero-initialized output layer.
    let values = p
        .params
        .to_tensors()
        .iter()
        .map(|t| Tensor::uniform(t.shape().to_vec(), -0.6, 0.6, rng))
        .collect();
    p.params.set_all(values).unwrap();
    p
}

struct Inputs {
    frames: Tensor<f64>,
    state: Tensor<f64>,
    x: Tensor<f64>,
    w: Tensor<f64>,
}

/// `Σ w ⊙ ε(x, k, cond(frames))`, with gradients for frames then parameters.
fn composite(p: &DiffusionPolicy<f64>, a: &Inputs, grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let b = p.bind(&mut g, grads);
    let f = g.leaf(a.frames.clone(), grads);
    let cond = b.condition(&mut g, f, &a.state).unwrap();
    let xv = g.constant(a.x.clone());
    let e = b.predict(&mut g, xv, 37, cond).unwrap();
    let wv = g.constant(a.w.clone());
    let prod = g.mul(e, wv).unwrap();
    let l = g.sum(prod);
    let value = g.value(l).item().unwrap();
    if !grads {
        return (value, Vec::new());
    }
    g.backward(l).unwrap();
    let mut out = vec![g.grad(f).unwrap().clone()];
    out.extend(b.vars().iter().map(|&v| g.grad(v).unwrap().clone()));
    (value, out)
}

fn composite_case(r: &mut seed::Rng) -> f64 {
    let mut p = tiny_policy(r);
    let mut a = Inputs {
        frames: Tensor::uniform(vec![2, 3, 16, 16], 0.0, 1.0, r),
        state: Tensor::uniform(vec![4], 0.0, 1.0, r),
        x: uniform(&[1, 16], r),
        w: uniform(&[1, 16], r),
    };
    let (_, grads) = composite(&p, &a, true);
    let mut worst: f64 = 0.0;

    let gf = &grads[0];
    for j in 0..a.frames.numel() {
        let orig = a.frames.data()[j];
        let mut at = |d: f64| {
            a.frames.data_mut()[j] = orig + d;
            composite(&p, &a, false).0
        };
        let fd = (at(H) - at(-H)) / (2.0 * H);
        worst = worst.max((fd - gf.data()[j]).abs() / max_abs(gf));
        a.frames.data_mut()[j] = orig;
    }

    let params = p.params.to_tensors();
    for (i, gp) in grads[1..].iter().enumerate() {
        for j in 0..params[i].numel() {
            let mut at = |d: f64| {
                let mut v = params.clone();
                v[i].data_mut()[j] += d;
                p.params.set_all(v).unwrap();
                composite(&p, &a, false).0
            };
            let fd = (at(H) - at(-H)) / (2.0 * H);
            worst = worst.max((fd - gp.data()[j]).abs() / max_abs(gp));
        }
    }
    p.params.set_all(params).unwrap();
    worst
}
