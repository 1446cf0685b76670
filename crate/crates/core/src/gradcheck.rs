//! Central finite-difference checks of the analytic gradients.
//!
//! Each check reduces an op's output to a scalar through a fixed random
//! weighting, perturbs every input element by ±h, and compares the
//! difference quotient against the tape's gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Reduction, Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::sdp_attention;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a unit-scale floor so near-zero gradients are compared
/// absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub type OpFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn weighted_loss(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn eval(inputs: &[Tensor<f64>], f: &OpFn, weights: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let l = weighted_loss(&mut tape, out, weights)?;
    Ok(tape.value(l).item())
}

/// Worst relative error between analytic and finite-difference gradients of
/// `f` over all elements of `inputs`.
pub fn check_gradient(inputs: &[Tensor<f64>], f: &OpFn, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let weights = Tensor::randn(tape.shape(out), &mut rng);
    let l = weighted_loss(&mut tape, out, &weights)?;
    tape.backward(l)?;

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("leaf tracks gradient");
        for e in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus, f, &weights)? - eval(&minus, f, &weights)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: &'static str,
    pub cases: usize,
    pub worst_rel_err: f64,
}

type CaseGen = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<OpFn>);

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

fn cases() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            (vec![randn(&[m, k], r), randn(&[k, n], r)], Box::new(|t, v| t.matmul(v[0], v[1])))
        }),
        ("add", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r), randn(&s, r)], Box::new(|t, v| t.add(v[0], v[1])))
        }),
        ("sub", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r), randn(&s, r)], Box::new(|t, v| t.sub(v[0], v[1])))
        }),
        ("mul", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r), randn(&s, r)], Box::new(|t, v| t.mul(v[0], v[1])))
        }),
        ("scale_by", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r), randn(&[1], r)], Box::new(|t, v| t.scale_by(v[0], v[1])))
        }),
        ("add_row", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![randn(&[m, n], r), randn(&[n], r)], Box::new(|t, v| t.add_row(v[0], v[1])))
        }),
        ("mul_row", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![randn(&[m, n], r), randn(&[n], r)], Box::new(|t, v| t.mul_row(v[0], v[1])))
        }),
        ("transpose", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| t.transpose(v[0])))
        }),
        ("reshape", |r| {
            let (a, b) = (dim(r), dim(r));
            (vec![randn(&[a, b], r)], Box::new(move |t, v| t.reshape(v[0], &[b * a])))
        }),
        ("softmax", |r| {
            let s = [dim(r), dim(r) + 1, dim(r)];
            let axis = r.gen_range(0..3);
            (vec![randn(&s, r)], Box::new(move |t, v| t.softmax(v[0], axis)))
        }),
        ("log_softmax", |r| {
            let s = [dim(r), dim(r) + 1];
            (vec![randn(&s, r)], Box::new(|t, v| t.log_softmax(v[0])))
        }),
        ("rmsnorm", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            (vec![randn(&[m, n], r), randn(&[n], r)], Box::new(|t, v| t.rmsnorm(v[0], v[1])))
        }),
        ("layernorm", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            (vec![randn(&[m, n], r)], Box::new(|t, v| t.layernorm(v[0])))
        }),
        ("adaln", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            (
                vec![randn(&[m, n], r), randn(&[n], r), randn(&[n], r)],
                Box::new(|t, v| t.adaln(v[0], v[1], v[2])),
            )
        }),
        ("conv1d", |r| {
            let (cin, cout, len) = (dim(r), dim(r), dim(r) + 2);
            let k = 2 * r.gen_range(0..3) + 1;
            let dil = r.gen_range(1..=3);
            (
                vec![randn(&[cin, len], r), randn(&[cout, cin, k], r)],
                Box::new(move |t, v| t.conv1d(v[0], v[1], dil)),
            )
        }),
        ("cross_entropy", |r| {
            let (n, k) = (dim(r), dim(r) + 1);
            let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let red = if r.gen_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
            (
                vec![randn(&[n, k], r)],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets, red)),
            )
        }),
        ("mse", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r), randn(&s, r)], Box::new(|t, v| t.mse(v[0], v[1])))
        }),
        ("gather", |r| {
            let (rows, w, n) = (dim(r), dim(r), dim(r));
            let idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..rows)).collect();
            (vec![randn(&[rows, w], r)], Box::new(move |t, v| t.gather_rows(v[0], &idx)))
        }),
        ("embedding_lookup", |r| {
            let (vocab, w) = (dim(r) + 1, dim(r));
            let ids: Vec<usize> = (0..dim(r)).map(|_| r.gen_range(0..vocab)).collect();
            (vec![randn(&[vocab, w], r)], Box::new(move |t, v| t.embedding(v[0], &ids)))
        }),
        ("concat", |r| {
            let axis = r.gen_range(0..2);
            let mut a = [dim(r), dim(r)];
            let mut b = a;
            a[axis] = dim(r);
            b[axis] = dim(r);
            (vec![randn(&a, r), randn(&b, r)], Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)))
        }),
        ("slice", |r| {
            let s = [dim(r) + 1, dim(r) + 1];
            let axis = r.gen_range(0..2);
            let start = r.gen_range(0..s[axis]);
            let len = r.gen_range(1..=s[axis] - start);
            (vec![randn(&s, r)], Box::new(move |t, v| t.slice(v[0], axis, start, len)))
        }),
        ("mean", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| Ok(t.mean(v[0]))))
        }),
        ("sum", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| Ok(t.sum(v[0]))))
        }),
        ("mean_axis", |r| {
            let s = [dim(r), dim(r), dim(r)];
            let axis = r.gen_range(0..3);
            (vec![randn(&s, r)], Box::new(move |t, v| t.mean_axis(v[0], axis)))
        }),
        ("silu", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| Ok(t.silu(v[0]))))
        }),
        ("tanh", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| Ok(t.tanh(v[0]))))
        }),
        ("sigmoid", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| Ok(t.sigmoid(v[0]))))
        }),
        ("exp", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| Ok(t.exp(v[0]))))
        }),
        ("log", |r| {
            let s = [dim(r), dim(r)];
            (vec![positive(&s, r)], Box::new(|t, v| Ok(t.log(v[0]))))
        }),
        ("sqrt", |r| {
            let s = [dim(r), dim(r)];
            (vec![positive(&s, r)], Box::new(|t, v| Ok(t.sqrt(v[0]))))
        }),
        ("softplus", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| Ok(t.softplus(v[0]))))
        }),
        ("square", |r| {
            let s = [dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| Ok(t.square(v[0]))))
        }),
        ("rope", |r| {
            let (n, d) = (dim(r), 2 * dim(r));
            let positions: Vec<usize> = (0..n).map(|_| r.gen_range(0..50)).collect();
            (vec![randn(&[n, d], r)], Box::new(move |t, v| t.rope(v[0], &positions)))
        }),
        ("mix_rows", |r| {
            let (u, n, d) = (dim(r), dim(r), dim(r));
            let mut inputs = vec![randn(&[u, n], r)];
            inputs.extend((0..n).map(|_| randn(&[u, d], r)));
            (inputs, Box::new(|t, v| t.mix_rows(v[0], &v[1..])))
        }),
        ("sdp_attention", |r| {
            let (tq, tk, d, dv) = (dim(r), dim(r), dim(r), dim(r));
            (
                vec![randn(&[tq, d], r), randn(&[tk, d], r), randn(&[tk, dv], r)],
                Box::new(|t, v| sdp_attention(t, v[0], v[1], v[2])),
            )
        }),
    ]
}

/// Runs every op check on `shapes` randomized shapes each.
pub fn run_suite(seed: u64, shapes: usize) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, gen) in cases() {
        let mut worst = 0.0f64;
        for _ in 0..shapes {
            let (inputs, f) = gen(&mut rng);
            let s = rng.gen();
            worst = worst.max(check_gradient(&inputs, f.as_ref(), s)?);
        }
        reports.push(GradReport {
            op: name,
            cases: shapes,
            worst_rel_err: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![randn(&[3, 4], &mut rng), randn(&[4, 2], &mut rng)];
        let err = check_gradient(&inputs, &|t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1]), 1).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_and_rmsnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = vec![randn(&[5], &mut rng)];
        let err = check_gradient(&x, &|t: &mut Tape<f64>, v: &[Var]| t.softmax(v[0], 0), 2).unwrap();
        assert!(err < 1e-6, "{err}");
        let x = vec![randn(&[3, 4], &mut rng), randn(&[4], &mut rng)];
        let err = check_gradient(&x, &|t: &mut Tape<f64>, v: &[Var]| t.rmsnorm(v[0], v[1]), 2).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = vec![randn(&[4, 6], &mut rng)];
        let f = |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy(v[0], &[0, 5, 2, 2], Reduction::Mean);
        let err = check_gradient(&x, &f, 9).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
