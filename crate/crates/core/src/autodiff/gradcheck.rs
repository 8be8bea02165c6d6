//! Central-difference gradient checks for every primitive.

use rand::{Rng, RngCore};

use super::tensor::{no_grad, Tensor};
use crate::error::Result;

/// Differences below this magnitude are judged absolutely.
pub const REL_FLOOR: f64 = 1e-3;
pub const STEP: f64 = 1e-6;

pub type Func = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// A differentiable function of some trainable inputs.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: Func,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `Σ w ⊙ f(inputs)` for a random projection `w`.
pub fn check(case: &Case, rng: &mut dyn RngCore) -> Result<f64> {
    let probe = no_grad(|| (case.f)(&case.inputs))?;
    let w: Vec<f64> = (0..probe.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::new(w, probe.shape())?;
    let loss = |inputs: &[Tensor]| -> Result<Tensor> { (case.f)(inputs)?.mul(&w)?.sum() };

    case.inputs.iter().for_each(Tensor::zero_grad);
    loss(&case.inputs)?.backward()?;
    let mut worst: f64 = 0.0;
    for x in &case.inputs {
        let analytic = x.grad();
        for (i, a) in analytic.iter().enumerate() {
            let orig = x.data()[i];
            let at = |v: f64| -> Result<f64> {
                x.update_data(|d| d[i] = v);
                no_grad(|| loss(&case.inputs)).map(|t| t.item())
            };
            let up = at(orig + STEP)?;
            let down = at(orig - STEP)?;
            x.update_data(|d| d[i] = orig);
            worst = worst.max(relative_error(*a, (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

pub const PRIMITIVES: [&str; 30] = [
    "matmul",
    "matmul_batched",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "div",
    "concat",
    "transpose",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "log_softmax",
    "sum",
    "sum_last",
    "mean",
    "slice",
    "stack",
    "conv1d",
    "scale",
    "add_scalar",
    "clamp_min",
    "reshape",
    "repeat_axis",
    "tri_solve",
    "tri_solve_transpose",
    "tri_solve_batched",
];

fn dims(rng: &mut dyn RngCore, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=4)).collect()
}

fn uniform(rng: &mut dyn RngCore, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("nonempty shape")
}

fn normal(rng: &mut dyn RngCore, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.5, 1.5)
}

fn normal_rank(rng: &mut dyn RngCore, rank: usize) -> Tensor {
    let s = dims(rng, rank);
    normal(rng, &s)
}

fn uniform_rank(rng: &mut dyn RngCore, rank: usize, lo: f64, hi: f64) -> Tensor {
    let s = dims(rng, rank);
    uniform(rng, &s, lo, hi)
}

fn off_kink_rank(rng: &mut dyn RngCore, rank: usize, kink: f64, gap: f64) -> Tensor {
    let s = dims(rng, rank);
    off_kink(rng, &s, kink, gap)
}

/// Values at least `gap` away from `kink`.
fn off_kink(rng: &mut dyn RngCore, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(gap..1.5);
            if rng.random::<bool>() {
                kink + m
            } else {
                kink - m
            }
        })
        .collect();
    Tensor::param(data, shape).expect("nonempty shape")
}

fn case(inputs: Vec<Tensor>, f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> Case {
    Case { inputs, f: Box::new(f) }
}

/// A random instance of the named primitive. Panics on unknown names.
pub fn primitive_case(name: &str, rng: &mut dyn RngCore) -> Case {
    match name {
        "matmul" => {
            let d = dims(rng, 4);
            let a = normal(rng, &[d[0], d[1], d[2]]);
            let b = normal(rng, &[d[2], d[3]]);
            case(vec![a, b], |x| x[0].matmul(&x[1]))
        }
        "matmul_batched" => {
            let d = dims(rng, 4);
            let a = normal(rng, &[d[0], d[1], d[2]]);
            let b = normal(rng, &[d[0], d[2], d[3]]);
            case(vec![a, b], |x| x[0].matmul(&x[1]))
        }
        "add" | "sub" | "mul" => {
            let s = dims(rng, 2);
            let (a, b) = (normal(rng, &s), normal(rng, &s));
            match name {
                "add" => case(vec![a, b], |x| x[0].add(&x[1])),
                "sub" => case(vec![a, b], |x| x[0].sub(&x[1])),
                _ => case(vec![a, b], |x| x[0].mul(&x[1])),
            }
        }
        "add_broadcast" => {
            let s = dims(rng, 3);
            let a = normal(rng, &s);
            let b = if rng.random::<bool>() { normal(rng, &s[1..]) } else { normal(rng, &[1]) };
            case(vec![a, b], |x| x[0].add(&x[1]))
        }
        "div" => {
            let s = dims(rng, 2);
            let a = normal(rng, &s);
            let b = off_kink(rng, &s, 0.0, 0.5);
            case(vec![a, b], |x| x[0].div(&x[1]))
        }
        "concat" => {
            let s = dims(rng, 3);
            let axis = rng.random_range(0..3);
            let mut s2 = s.clone();
            s2[axis] = rng.random_range(1..=3);
            let (a, b) = (normal(rng, &s), normal(rng, &s2));
            case(vec![a, b], move |x| Tensor::concat(&[&x[0], &x[1]], axis))
        }
        "transpose" => case(vec![normal_rank(rng, 3)], |x| x[0].transpose()),
        "relu" => case(vec![off_kink_rank(rng, 2, 0.0, 1e-3)], |x| x[0].relu()),
        "tanh" => case(vec![normal_rank(rng, 2)], |x| x[0].tanh()),
        "exp" => case(vec![normal_rank(rng, 2)], |x| x[0].exp()),
        "log" => case(vec![uniform_rank(rng, 2, 0.2, 3.0)], |x| x[0].ln()),
        "sqrt" => case(vec![uniform_rank(rng, 2, 0.2, 3.0)], |x| x[0].sqrt()),
        "softmax" => case(vec![normal_rank(rng, 2)], |x| x[0].softmax()),
        "log_softmax" => case(vec![normal_rank(rng, 2)], |x| x[0].log_softmax()),
        "sum" => case(vec![normal_rank(rng, 2)], |x| x[0].sum()),
        "sum_last" => case(vec![normal_rank(rng, 3)], |x| x[0].sum_last()),
        "mean" => case(vec![normal_rank(rng, 2)], |x| x[0].mean()),
        "slice" => {
            let s = dims(rng, 3);
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..s[axis]);
            let end = rng.random_range(start + 1..=s[axis]);
            case(vec![normal(rng, &s)], move |x| x[0].slice(axis, start, end))
        }
        "stack" => {
            let s = dims(rng, 2);
            let k = rng.random_range(1..=3);
            let parts = (0..k).map(|_| normal(rng, &s)).collect();
            case(parts, |x| Tensor::stack(&x.iter().collect::<Vec<_>>()))
        }
        "conv1d" => {
            let d = dims(rng, 4);
            let kw = 2 * rng.random_range(0..=2) + 1;
            let x = normal(rng, &[d[0], d[1], d[2] + 1]);
            let w = normal(rng, &[d[3], d[1], kw]);
            let b = normal(rng, &[d[3]]);
            case(vec![x, w, b], |x| x[0].conv1d(&x[1], &x[2]))
        }
        "scale" => {
            let k = rng.random_range(-2.0..2.0);
            case(vec![normal_rank(rng, 2)], move |x| x[0].scale(k))
        }
        "add_scalar" => {
            let k = rng.random_range(-2.0..2.0);
            case(vec![normal_rank(rng, 2)], move |x| x[0].add_scalar(k))
        }
        "clamp_min" => {
            let f = rng.random_range(-0.5..0.5);
            case(vec![off_kink_rank(rng, 2, f, 1e-3)], move |x| x[0].clamp_min(f))
        }
        "reshape" => {
            let s = dims(rng, 3);
            let flat = s.iter().product::<usize>();
            case(vec![normal(rng, &s)], move |x| x[0].reshape(&[flat]))
        }
        "repeat_axis" => {
            let mut s = dims(rng, 3);
            let axis = rng.random_range(0..3);
            s[axis] = 1;
            let count = rng.random_range(1..=4);
            case(vec![normal(rng, &s)], move |x| x[0].repeat_axis(axis, count))
        }
        "tri_solve" | "tri_solve_transpose" => {
            let n = rng.random_range(1..=5);
            let k = rng.random_range(1..=3);
            let l = uniform(rng, &[n, n], -0.5, 0.5);
            let b = normal(rng, &[n, k]);
            let transpose = name == "tri_solve_transpose";
            case(vec![l, b], move |x| x[0].tri_solve(&x[1], transpose))
        }
        "tri_solve_batched" => {
            let (bsz, n, k) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=3));
            let l = uniform(rng, &[bsz, n, n], -0.5, 0.5);
            let b = normal(rng, &[bsz, n, k]);
            let transpose = rng.random::<bool>();
            case(vec![l, b], move |x| x[0].tri_solve(&x[1], transpose))
        }
        other => panic!("unknown primitive {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_primitive_passes_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in PRIMITIVES {
            let c = primitive_case(name, &mut rng);
            let err = check(&c, &mut rng).unwrap();
            assert!(err < 1e-4, "{name}: {err:e}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence, so the analytic gradient is zero
        let x = Tensor::param(vec![0.7, -0.3], &[2]).unwrap();
        let c = Case {
            inputs: vec![x],
            f: Box::new(|x| x[0].detach().mul(&x[0])),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(check(&c, &mut rng).unwrap() > 0.1);
    }
}
