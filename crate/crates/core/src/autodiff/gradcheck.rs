//! Central-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward rules it audits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{AutodiffError, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for the relative error, so that gradients that are
/// exactly zero compare by absolute difference instead of dividing by zero.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| AutodiffError::NonScalarLoss(tape.shape(out).to_vec()))
}

/// Compares the tape's gradients of the scalar `f(inputs)` against central
/// differences with step `step`, over every entry of every input.
pub fn gradcheck<F>(
    name: &str,
    inputs: &[Tensor],
    step: f64,
    f: F,
) -> Result<GradcheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradcheckReport {
        name: name.to_string(),
        checked: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let up = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig - step;
            let down = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces an arbitrary output to a scalar through fixed random weights, so
/// every output entry contributes a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, AutodiffError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    out_shape: Vec<usize>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>,
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut n = |shape: &[usize]| Tensor::randn(shape, 1.0, rng);
    let positive_t = |t: Tensor| {
        let v = t.data()[0].abs() + 0.5;
        Tensor::scalar(v)
    };
    vec![
        Case {
            name: "matmul",
            inputs: vec![n(&[6, 5, 4]), n(&[4, 3])],
            out_shape: vec![6, 5, 3],
            build: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        Case {
            name: "add_broadcast",
            inputs: vec![n(&[6, 5, 4]), n(&[5, 4])],
            out_shape: vec![6, 5, 4],
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        Case {
            name: "sub",
            inputs: vec![n(&[5, 4]), n(&[5, 4])],
            out_shape: vec![5, 4],
            build: Box::new(|t, v| t.sub(v[0], v[1])),
        },
        Case {
            name: "mul_broadcast",
            inputs: vec![n(&[6, 5, 4]), n(&[4])],
            out_shape: vec![6, 5, 4],
            build: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        Case {
            name: "scale",
            inputs: vec![n(&[5, 4])],
            out_shape: vec![5, 4],
            build: Box::new(|t, v| t.scale(v[0], -1.7)),
        },
        Case {
            name: "add_scalar",
            inputs: vec![n(&[5, 4])],
            out_shape: vec![5, 4],
            build: Box::new(|t, v| t.add_scalar(v[0], 0.3)),
        },
        Case {
            name: "exp",
            inputs: vec![n(&[5, 4])],
            out_shape: vec![5, 4],
            build: Box::new(|t, v| t.exp(v[0])),
        },
        Case {
            name: "relu",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![6, 5, 4],
            build: Box::new(|t, v| t.relu(v[0])),
        },
        Case {
            name: "sigmoid",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![6, 5, 4],
            build: Box::new(|t, v| t.sigmoid(v[0])),
        },
        Case {
            name: "gelu",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![6, 5, 4],
            build: Box::new(|t, v| t.gelu(v[0])),
        },
        Case {
            name: "reshape",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![30, 4],
            build: Box::new(|t, v| t.reshape(v[0], &[30, 4])),
        },
        Case {
            name: "narrow",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![6, 2, 4],
            build: Box::new(|t, v| t.narrow(v[0], 1, 2, 2)),
        },
        Case {
            name: "concat",
            inputs: vec![n(&[6, 5, 2]), n(&[6, 5, 3])],
            out_shape: vec![6, 5, 5],
            build: Box::new(|t, v| t.concat(&[v[0], v[1]], 2)),
        },
        Case {
            name: "gather_rows",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![6, 6, 4],
            build: Box::new(|t, v| t.gather(v[0], 1, &[0, 4, 4, 2, 1, 0])),
        },
        Case {
            name: "segment_sum",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![6, 3, 4],
            build: Box::new(|t, v| t.segment_sum(v[0], 1, &[2, 0, 2, 1, 0], 3)),
        },
        Case {
            name: "mean",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![6, 4],
            build: Box::new(|t, v| t.mean(v[0], 1)),
        },
        Case {
            name: "sum",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![],
            build: Box::new(|t, v| t.sum(v[0])),
        },
        Case {
            name: "l2_normalize",
            inputs: vec![n(&[6, 5, 4])],
            out_shape: vec![6, 5, 4],
            build: Box::new(|t, v| t.l2_normalize(v[0], 2, 1e-12)),
        },
        Case {
            name: "instance_norm",
            inputs: vec![n(&[6, 5, 4]), n(&[4]), n(&[4])],
            out_shape: vec![6, 5, 4],
            build: Box::new(|t, v| t.instance_norm(v[0], v[1], v[2], 1, 1e-5)),
        },
        Case {
            name: "softmax",
            inputs: vec![n(&[6, 5, 4]), positive_t(n(&[1]))],
            out_shape: vec![6, 5, 4],
            build: Box::new(|t, v| t.softmax(v[0], 0, v[1])),
        },
        Case {
            name: "embedding_lookup",
            inputs: vec![n(&[7, 4])],
            out_shape: vec![2, 3, 4],
            build: Box::new(|t, v| t.embedding(v[0], &[0, 6, 3, 3, 1, 0], &[2, 3])),
        },
    ]
}

/// Gradchecks every primitive on random N(0, 1) inputs with shapes at most
/// 6x5x4.
pub fn op_suite(seed: u64) -> Result<Vec<GradcheckReport>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = cases(&mut rng);
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let weights = Tensor::randn(&case.out_shape, 1.0, &mut rng);
        let build = case.build;
        let report = gradcheck(case.name, &case.inputs, FD_STEP, |tape, vars| {
            let out = build(tape, vars)?;
            weighted_sum(tape, out, &weights)
        })?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let r = gradcheck("square", &[x], FD_STEP, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn chained_ops_pass() {
        let x = Tensor::from_vec(vec![0.3]);
        let ok = gradcheck("scaled", std::slice::from_ref(&x), FD_STEP, |t, v| {
            let s = t.scale(v[0], 2.0)?;
            let e = t.exp(s)?;
            t.sum(e)
        })
        .unwrap();
        assert!(ok.passes(1e-6));
    }

    #[test]
    fn every_op_passes() {
        for r in op_suite(7).unwrap() {
            assert!(r.passes(1e-5), "{} rel err {}", r.name, r.max_rel_error);
        }
    }
}
