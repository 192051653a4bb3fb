//! Central-difference gradient checking.
//!
//! An op is checked by scalarizing its output against a fixed random
//! cotangent r: f(inputs) = <r, op(inputs)>. The tape's backward with seed r
//! gives the analytic gradient of f in one pass; the numeric gradient
//! perturbs one input element at a time with step h and rebuilds the forward.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Relative disagreement |a - n| / max(1, |n|), maximised over elements.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

type BuildFn = Box<dyn Fn(&Rc<Tape>, &[Var]) -> Result<Var>>;

/// One gradcheck fixture: named inputs and a tape-graph builder. Every input
/// is treated as differentiable.
pub struct OpCheck {
    pub name: String,
    pub tol: f64,
    pub inputs: Vec<Tensor>,
    pub build: BuildFn,
}

pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

/// Fixed random tensor for fixtures and cotangents, keyed by a string so
/// results are stable run to run.
pub fn seeded_tensor(key: &str, shape: super::Shape, lo: f64, hi: f64) -> Tensor {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Checks one fixture with central differences of step `h`.
pub fn check_op(check: &OpCheck, h: f64) -> Result<CheckResult> {
    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = check
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = (check.build)(&tape, &vars)?;
    let seed = seeded_tensor(&format!("{}::cotangent", check.name), out.shape(), -1.0, 1.0);
    let grads = out.backward_seeded(seed.clone())?;

    let scalar = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = (check.build)(&tape, &vars)?;
        Ok(y
            .value()
            .data()
            .iter()
            .zip(seed.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut worst = 0.0f64;
    for (j, input) in check.inputs.iter().enumerate() {
        let analytic = match grads.get(&vars[j]) {
            Some(g) => g.clone(),
            None => Tensor::zeros(input.shape()),
        };
        let mut numeric = vec![0.0; input.shape().numel()];
        for i in 0..numeric.len() {
            let mut plus = check.inputs.to_vec();
            let mut minus = check.inputs.to_vec();
            let mut pd: Vec<f64> = input.data().to_vec();
            pd[i] += h;
            plus[j] = Tensor::from_vec(input.shape(), pd)?;
            let mut md: Vec<f64> = input.data().to_vec();
            md[i] -= h;
            minus[j] = Tensor::from_vec(input.shape(), md)?;
            numeric[i] = (scalar(&plus)? - scalar(&minus)?) / (2.0 * h);
        }
        let numeric = Tensor::from_vec(input.shape(), numeric)?;
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(CheckResult { name: check.name.clone(), max_rel_err: worst, tol: check.tol })
}

/// Adjoint identity for a linear op: <L x, y> = <x, L^T y> where L^T is the
/// VJP. Returns the absolute discrepancy.
pub fn adjoint_gap(
    build: impl Fn(&Rc<Tape>, &Var) -> Result<Var>,
    x: &Tensor,
) -> Result<f64> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let yv = build(&tape, &xv)?;
    let y = seeded_tensor("adjoint::y", yv.shape(), -1.0, 1.0);
    let lx_dot_y: f64 = yv
        .value()
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();
    let grads = yv.backward_seeded(y)?;
    let lt_y = grads
        .get(&xv)
        .ok_or_else(|| crate::error::Error::state("linear op produced no input gradient"))?;
    let x_dot_lty: f64 = x.data().iter().zip(lt_y.data()).map(|(a, b)| a * b).sum();
    Ok((lx_dot_y - x_dot_lty).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn check_op_accepts_a_correct_vjp() {
        let check = OpCheck {
            name: "sigmoid_smoke".into(),
            tol: 1e-3,
            inputs: vec![seeded_tensor("sigmoid_smoke::x", Shape::new(1, 2, 3, 3), -2.0, 2.0)],
            build: Box::new(|_, vars| Ok(vars[0].sigmoid())),
        };
        let res = check_op(&check, 1e-4).unwrap();
        assert!(res.pass(), "rel err {}", res.max_rel_err);
    }

    #[test]
    fn check_op_rejects_a_broken_vjp() {
        // Forward is 2x but the recorded VJP pretends the factor is 2.1.
        let check = OpCheck {
            name: "broken_scale".into(),
            tol: 1e-3,
            inputs: vec![seeded_tensor("broken::x", Shape::new(1, 1, 2, 2), 0.5, 1.5)],
            build: Box::new(|tape, vars| {
                let y = vars[0].value().map(|v| 2.0 * v);
                Ok(tape.push(
                    y,
                    vec![vars[0].id()],
                    Box::new(|g| vec![g.map(|v| 2.1 * v)]),
                ))
            }),
        };
        let res = check_op(&check, 1e-4).unwrap();
        assert!(!res.pass());
    }

    #[test]
    fn adjoint_gap_is_tiny_for_a_linear_op() {
        let x = seeded_tensor("adj::x", Shape::new(1, 3, 4, 4), -1.0, 1.0);
        let gap = adjoint_gap(|_, v| Ok(v.scale(3.5)), &x).unwrap();
        assert!(gap < 1e-10, "gap {gap}");
    }
}
