//! Central finite-difference checks of every differentiable op.
//!
//! Each case builds `L = sum(R * op(inputs))` for a fixed random projection
//! `R` and compares tape gradients against central differences with step
//! `h`. Every input entry is moved by `+-h` (random sign) at once, so each
//! difference `L(x + d) - L(x - d)` should equal `<grad, 2d>`; the error is
//! the norm over several such directions of tape minus numeric, relative to
//! the larger of the two. Moving all entries together keeps the signal well
//! above the f32 rounding of scalar losses. The projection sum runs in f64
//! outside the tape.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::Tensor;

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const ADJOINT_TOLERANCE: f64 = 1e-5;
const DIRECTIONS: usize = 8;

pub const OPS: [&str; 14] = [
    "conv2d",
    "conv_transpose2d",
    "instance_norm",
    "batch_norm",
    "relu",
    "leaky_relu",
    "tanh",
    "softplus",
    "sqrt",
    "charbonnier",
    "l1",
    "lsgan",
    "bce",
    "ssim",
];

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    label: String,
    inputs: Vec<Tensor>,
    f: OpFn,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub op: String,
    pub case: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OpSummary {
    pub op: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub adjoint_rel_error: Option<f64>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed) && self.adjoint_rel_error.is_none_or(|e| e < ADJOINT_TOLERANCE)
    }

    pub fn summaries(&self) -> Vec<OpSummary> {
        let mut out: Vec<OpSummary> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|s| s.op == c.op) {
                Some(s) => {
                    s.cases += 1;
                    s.max_rel_error = s.max_rel_error.max(c.rel_error);
                    s.passed &= c.passed;
                }
                None => out.push(OpSummary {
                    op: c.op.clone(),
                    cases: 1,
                    max_rel_error: c.rel_error,
                    passed: c.passed,
                }),
            }
        }
        out
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in self.summaries() {
            writeln!(
                f,
                "{:<18} {:>2} cases  max rel err {:.3e}  {}",
                s.op,
                s.cases,
                s.max_rel_error,
                if s.passed { "ok" } else { "FAIL" }
            )?;
        }
        if let Some(e) = self.adjoint_rel_error {
            writeln!(
                f,
                "{:<18}           rel err     {e:.3e}  {}",
                "conv adjoint",
                if e < ADJOINT_TOLERANCE { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Uniform magnitudes in `[lo, hi]` with random sign; keeps kinks out of reach of the step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let t = uniform(rng, shape, lo, hi);
    let signs: Vec<f32> = (0..t.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), t.data().iter().zip(&signs).map(|(v, s)| v * s).collect())
        .expect("shape preserved")
}

fn cases(op: &str, rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let mut push = |label: String, inputs: Vec<Tensor>, f: OpFn| out.push(Case { label, inputs, f });
    match op {
        "conv2d" => {
            for (x, wt, stride, pad) in [
                ([1, 1, 5, 5], [1, 1, 3, 3], 1, 0),
                ([2, 2, 6, 6], [3, 2, 3, 3], 1, 1),
                ([1, 3, 8, 8], [2, 3, 4, 4], 2, 1),
                ([2, 1, 7, 5], [2, 1, 2, 3], 1, 0),
                ([1, 2, 9, 9], [1, 2, 4, 4], 2, 1),
            ] {
                let inputs = vec![uniform(rng, &x, -1.0, 1.0), uniform(rng, &wt, -0.5, 0.5), uniform(rng, &[wt[0]], -0.5, 0.5)];
                push(
                    format!("x{x:?} w{wt:?} s{stride} p{pad}"),
                    inputs,
                    Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
                );
            }
        }
        "conv_transpose2d" => {
            for (x, wt, stride, pad) in [
                ([1, 1, 4, 4], [1, 1, 3, 3], 1, 0),
                ([2, 2, 3, 3], [2, 3, 4, 4], 2, 1),
                ([1, 3, 4, 4], [3, 2, 4, 4], 2, 1),
                ([2, 1, 5, 3], [1, 2, 2, 3], 1, 0),
                ([1, 2, 2, 2], [2, 1, 4, 4], 2, 1),
            ] {
                let inputs = vec![uniform(rng, &x, -1.0, 1.0), uniform(rng, &wt, -0.5, 0.5), uniform(rng, &[wt[1]], -0.5, 0.5)];
                push(
                    format!("x{x:?} w{wt:?} s{stride} p{pad}"),
                    inputs,
                    Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)),
                );
            }
        }
        "instance_norm" | "batch_norm" => {
            let batch = op == "batch_norm";
            for x in [[1, 2, 3, 3], [2, 1, 4, 4], [2, 3, 2, 3], [3, 2, 2, 2], [1, 1, 5, 4]] {
                let c = x[1];
                let inputs = vec![uniform(rng, &x, -1.0, 1.0), uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -0.5, 0.5)];
                push(
                    format!("x{x:?}"),
                    inputs,
                    Box::new(move |g, v| {
                        if batch {
                            let mut stats = RunningStats::new(c);
                            g.batch_norm(v[0], v[1], v[2], &mut stats, true, 1e-5)
                        } else {
                            g.instance_norm(v[0], v[1], v[2], 1e-5)
                        }
                    }),
                );
            }
        }
        "relu" | "leaky_relu" | "tanh" | "softplus" | "sqrt" => {
            for shape in [vec![7], vec![2, 5], vec![1, 2, 3, 3], vec![3, 1, 2, 4], vec![16]] {
                let x = match op {
                    "sqrt" => uniform(rng, &shape, 0.2, 2.0),
                    "relu" | "leaky_relu" => away_from_zero(rng, &shape, 0.05, 2.0),
                    "softplus" => uniform(rng, &shape, -4.0, 4.0),
                    _ => uniform(rng, &shape, -2.0, 2.0),
                };
                let name = op.to_string();
                push(
                    format!("x{shape:?}"),
                    vec![x],
                    Box::new(move |g, v| {
                        Ok(match name.as_str() {
                            "relu" => g.relu(v[0]),
                            "leaky_relu" => g.leaky_relu(v[0], 0.2),
                            "tanh" => g.tanh(v[0]),
                            "softplus" => g.softplus(v[0]),
                            _ => g.sqrt(v[0]),
                        })
                    }),
                );
            }
        }
        "charbonnier" | "l1" => {
            let l1 = op == "l1";
            for shape in [[1, 1, 4, 4], [2, 1, 3, 3], [1, 2, 5, 2], [3, 1, 2, 2], [2, 1, 6, 6]] {
                let p = uniform(rng, &shape, -1.0, 1.0);
                // residuals bounded away from the kink of |.|
                let r = away_from_zero(rng, &shape, 0.05, 0.5);
                let t = Tensor::new(shape.to_vec(), p.data().iter().zip(r.data()).map(|(a, b)| a + b).collect())?;
                push(
                    format!("x{shape:?}"),
                    vec![p, t],
                    Box::new(move |g, v| {
                        if l1 {
                            losses::l1_loss(g, v[0], v[1])
                        } else {
                            losses::charbonnier(g, v[0], v[1], 1e-2)
                        }
                    }),
                );
            }
        }
        "lsgan" | "bce" => {
            let bce = op == "bce";
            for shape in [[1, 1, 2, 2], [2, 1, 3, 3], [4, 1, 1, 1], [1, 1, 4, 5], [3, 1, 2, 3]] {
                let inputs = vec![uniform(rng, &shape, -2.0, 2.0), uniform(rng, &shape, -2.0, 2.0)];
                push(
                    format!("d_loss x{shape:?}"),
                    inputs.clone(),
                    Box::new(move |g, v| {
                        if bce {
                            losses::bce_d_loss(g, v[0], v[1])
                        } else {
                            losses::lsgan_d_loss(g, v[0], v[1])
                        }
                    }),
                );
                push(
                    format!("g_loss x{shape:?}"),
                    vec![inputs[1].clone()],
                    Box::new(move |g, v| {
                        Ok(if bce {
                            losses::bce_g_loss(g, v[0])
                        } else {
                            losses::lsgan_g_adv_loss(g, v[0])
                        })
                    }),
                );
            }
        }
        "ssim" => {
            for shape in [[1, 1, 16, 16], [1, 1, 12, 12], [2, 1, 11, 13], [1, 2, 12, 11], [1, 1, 14, 12]] {
                let inputs = vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)];
                push(format!("x{shape:?}"), inputs, Box::new(|g, v| losses::ssim_loss(g, v[0], v[1])));
            }
        }
        other => {
            return Err(Error::Unknown {
                what: "gradcheck op",
                name: other.to_string(),
            })
        }
    }
    Ok(out)
}

fn projected(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn abs_projected(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| (a as f64 * b as f64).abs()).sum()
}

fn forward(case: &Case, inputs: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = (case.f)(&mut g, &vars)?;
    Ok(g.value(y).clone())
}

fn check_case(case: &Case, rng: &mut ChaCha8Rng, h: f32) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = (case.f)(&mut g, &vars)?;
    let r = Tensor::uniform(g.shape(y).to_vec(), -1.0, 1.0, rng);
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    let s = g.sum(p);
    g.backward(s)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for _ in 0..DIRECTIONS {
        let mut plus = case.inputs.clone();
        let mut minus = case.inputs.clone();
        let mut analytic = 0.0f64;
        for (k, grad) in grads.iter().enumerate() {
            for i in 0..grad.len() {
                let x0 = case.inputs[k].data()[i];
                let step = if rng.random::<bool>() { h } else { -h };
                let (xp, xm) = (x0 + step, x0 - step);
                plus[k].data_mut()[i] = xp;
                minus[k].data_mut()[i] = xm;
                analytic += grad.data()[i] as f64 * (xp as f64 - xm as f64);
            }
        }
        let numeric = projected(&forward(case, &plus)?, &r) - projected(&forward(case, &minus)?, &r);
        diff += (analytic - numeric).powi(2);
        norm += analytic.abs().max(numeric.abs()).powi(2);
    }
    Ok(if norm == 0.0 { diff.sqrt() } else { (diff / norm).sqrt() })
}

/// `|<conv2d(a, w), b> - <a, conv_transpose2d(b, w)>|` relative to the sum of
/// absolute products (an inner product near zero has no other usable scale),
/// worst over a few stride/pad geometries.
pub fn conv_adjoint_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let a = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let mut g = Graph::new();
        let (av, wv) = (g.constant(a.clone()), g.constant(w));
        let ya = g.conv2d(av, wv, None, stride, pad)?;
        let b = uniform(&mut rng, g.shape(ya), -1.0, 1.0);
        let bv = g.constant(b.clone());
        let xb = g.conv_transpose2d(bv, wv, None, stride, pad)?;
        if g.shape(xb) != a.shape() {
            // stride 2 without padding can drop a trailing row; compare on the overlap
            continue;
        }
        let lhs = projected(g.value(ya), &b);
        let rhs = projected(g.value(xb), &a);
        let scale = abs_projected(g.value(ya), &b).max(abs_projected(g.value(xb), &a));
        worst = worst.max((lhs - rhs).abs() / scale.max(1e-12));
    }
    Ok(worst)
}

/// Runs the suite for `ops` (all when empty).
pub fn run(ops: &[String], seed: u64) -> Result<Report> {
    let selected: Vec<String> = if ops.is_empty() || ops.iter().any(|o| o == "all") {
        OPS.iter().map(|s| s.to_string()).collect()
    } else {
        ops.to_vec()
    };
    let mut results = Vec::new();
    for (n, op) in selected.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(n as u64));
        for case in cases(op, &mut rng)? {
            let e = check_case(&case, &mut rng, STEP)?;
            results.push(CaseResult {
                op: op.clone(),
                case: case.label,
                rel_error: e,
                passed: e < TOLERANCE,
            });
        }
    }
    let adjoint = selected
        .iter()
        .any(|o| o == "conv2d" || o == "conv_transpose2d")
        .then(|| conv_adjoint_error(seed))
        .transpose()?;
    Ok(Report {
        seed,
        tolerance: TOLERANCE,
        cases: results,
        adjoint_rel_error: adjoint,
    })
}
