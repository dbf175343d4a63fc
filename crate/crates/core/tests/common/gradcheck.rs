//! Central finite-difference oracle for tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmow_core::nncore::{Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;

type Builder = dyn Fn(&mut Tape, &[Var]) -> Var;

/// One registered op under test: builds an output from its inputs and samples inputs.
pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Builder>,
    pub sample: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
}

/// Reduces an arbitrary-shaped output to a scalar via a fixed random projection.
fn scalarize(tape: &mut Tape, out: Var, proj: &[f64]) -> Var {
    let (r, c) = tape.dims(out);
    if r * c == 1 {
        return out;
    }
    let w = tape.constant_raw(r, c, proj.to_vec());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn eval(build: &Builder, inputs: &[Tensor], proj: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars);
    let loss = scalarize(&mut tape, out, proj);
    tape.scalar(loss)
}

/// Max relative error between tape gradients and central differences.
pub fn max_relative_error(case: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (case.sample)(&mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = (case.build)(&mut tape, &vars);
    let (r, c) = tape.dims(out);
    let proj: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = scalarize(&mut tape, out, &proj);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[k]).into_data();
        for idx in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[idx] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[idx] -= EPS;
            let numeric =
                (eval(&*case.build, &plus, &proj) - eval(&*case.build, &minus, &proj)) / (2.0 * EPS);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(r, c, data).unwrap()
}

/// Entries bounded away from zero so ReLU kinks are not straddled by ±ε.
fn randm_away(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::matrix(r, c, data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c).map(|_| rng.random_range(0.2..1.5)).collect();
    Tensor::matrix(r, c, data).unwrap()
}

/// Every op in the tape's fixed op set, plus the linear→sigmoid→cross-entropy composite.
pub fn all_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            build: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 3, 4), randm(r, 4, 2)]),
        },
        OpCase {
            name: "add",
            build: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 2, 3), randm(r, 2, 3)]),
        },
        OpCase {
            name: "sub",
            build: Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 2, 3), randm(r, 2, 3)]),
        },
        OpCase {
            name: "hadamard",
            build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 3, 3), randm(r, 3, 3)]),
        },
        OpCase {
            name: "add_row",
            build: Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 3, 4), randm(r, 1, 4)]),
        },
        OpCase {
            name: "mul_col",
            build: Box::new(|t, v| t.mul_col(v[0], v[1]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 3, 4), randm(r, 3, 1)]),
        },
        OpCase {
            name: "scale",
            build: Box::new(|t, v| t.scale(v[0], -0.7)),
            sample: Box::new(|r| vec![randm(r, 2, 5)]),
        },
        OpCase {
            name: "transpose",
            build: Box::new(|t, v| t.transpose(v[0])),
            sample: Box::new(|r| vec![randm(r, 2, 5)]),
        },
        OpCase {
            name: "sigmoid",
            build: Box::new(|t, v| t.sigmoid(v[0])),
            sample: Box::new(|r| vec![randm(r, 3, 3)]),
        },
        OpCase {
            name: "relu",
            build: Box::new(|t, v| t.relu(v[0])),
            sample: Box::new(|r| vec![randm_away(r, 3, 3)]),
        },
        OpCase {
            name: "softmax_rows",
            build: Box::new(|t, v| t.softmax_rows(v[0], 0.8).unwrap()),
            sample: Box::new(|r| vec![randm(r, 2, 4)]),
        },
        OpCase {
            name: "sum",
            build: Box::new(|t, v| t.sum(v[0])),
            sample: Box::new(|r| vec![randm(r, 2, 3)]),
        },
        OpCase {
            name: "mean",
            build: Box::new(|t, v| t.mean(v[0])),
            sample: Box::new(|r| vec![randm(r, 2, 3)]),
        },
        OpCase {
            name: "mean_rows",
            build: Box::new(|t, v| t.mean_rows(v[0]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 4, 3)]),
        },
        OpCase {
            name: "segment_mean",
            build: Box::new(|t, v| t.segment_mean(v[0], &[2, 1, 3]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 6, 3)]),
        },
        OpCase {
            name: "gather_rows",
            build: Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 4, 3)]),
        },
        OpCase {
            name: "stack_rows",
            build: Box::new(|t, v| t.stack_rows(&[v[0], v[1]]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 1, 3), randm(r, 2, 3)]),
        },
        OpCase {
            name: "degree_normalize",
            build: Box::new(|t, v| t.sym_normalize(v[0]).unwrap()),
            sample: Box::new(|r| vec![positive(r, 4, 4)]),
        },
        OpCase {
            name: "cosine_similarity",
            build: Box::new(|t, v| t.cosine_rows(v[0], v[1]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 3, 4), randm(r, 2, 4)]),
        },
        OpCase {
            name: "cross_entropy",
            build: Box::new(|t, v| t.cross_entropy(v[0], &[(0, 1), (1, 3), (1, 0), (2, 2)]).unwrap()),
            sample: Box::new(|r| vec![randm(r, 3, 4)]),
        },
        OpCase {
            name: "info_nce",
            build: Box::new(|t, v| {
                let mask = [true, false, true, false, true, false, true, false, true];
                t.info_nce(v[0], &mask, 0.5).unwrap()
            }),
            sample: Box::new(|r| vec![randm(r, 3, 3)]),
        },
        OpCase {
            name: "linear_sigmoid_cross_entropy",
            build: Box::new(|t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_row(h, v[2]).unwrap();
                let s = t.sigmoid(h);
                let logits = t.matmul(s, v[3]).unwrap();
                t.cross_entropy(logits, &[(0, 2), (1, 0), (2, 1)]).unwrap()
            }),
            sample: Box::new(|r| vec![randm(r, 3, 4), randm(r, 4, 5), randm(r, 1, 5), randm(r, 5, 3)]),
        },
    ]
}
