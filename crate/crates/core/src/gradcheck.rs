//! Finite-difference gradient checking.
//!
//! The oracle side evaluates the forward function twice per coordinate with
//! central differences and never touches the analytic backward path, so it
//! stays an independent check of the tape.

use crate::autodiff::{Tape, ValueId};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the max relative error.
    pub tol: f64,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// One aligned line per parameter, for the CLI table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>8} {:>14}\n", "parameter", "coords", "max rel err"));
        for p in &self.per_param {
            out.push_str(&format!("{:<24} {:>8} {:>14.3e}\n", p.name, p.coords, p.max_rel_err));
        }
        out.push_str(&format!(
            "overall max rel err {:.3e} (tol {:.1e}) -> {}\n",
            self.max_rel_err,
            self.tol,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely instead of amplifying finite-difference noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks the analytic gradient of `build` (a scalar-valued tape program over
/// the given named parameters) against central finite differences.
///
/// `build` is called with fresh leaves for every evaluation; the analytic pass
/// marks them as variables, the finite-difference passes as constants.
pub fn grad_check<T, F>(
    build: F,
    params: &[(&str, Matrix<T>)],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[ValueId]) -> Result<ValueId>,
{
    // Analytic gradients in one tape pass.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|(_, m)| tape.variable(m.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix<T>> = ids.iter().map(|id| tape.grad(*id).clone()).collect();

    // Forward-only evaluation at perturbed parameters.
    let eval = |working: &[Matrix<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = working.iter().map(|m| tape.constant(m.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar(loss))
    };

    let mut working: Vec<Matrix<T>> = params.iter().map(|(_, m)| m.clone()).collect();
    let step = T::c(opts.eps);
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;

    for (pi, (name, _)) in params.iter().enumerate() {
        let (rows, cols) = working[pi].shape();
        let mut worst: f64 = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let orig = working[pi][(r, c)];
                working[pi][(r, c)] = orig + step;
                let plus = eval(&working)?;
                working[pi][(r, c)] = orig - step;
                let minus = eval(&working)?;
                working[pi][(r, c)] = orig;
                let fd = (plus - minus) / (2.0 * opts.eps);
                let an = analytic[pi][(r, c)].as_f64();
                let err = rel_err(an, fd);
                if err > worst {
                    worst = err;
                }
            }
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck { name: name.to_string(), coords: rows * cols, max_rel_err: worst });
    }

    Ok(GradCheckReport { per_param, max_rel_err: overall, tol: opts.tol, pass: overall <= opts.tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_agrees() {
        // f(theta) = sum(theta^2) at [1, 2] has gradient [2, 4].
        let theta = Matrix::from_rows(&[vec![1.0f64, 2.0]]);
        let report = grad_check(
            |t, ids| {
                let sq = t.hadamard(ids[0], ids[0])?;
                t.sum_all(sq)
            },
            &[("theta", theta.clone())],
            GradCheckOptions { eps: 1e-5, tol: 1e-8 },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);

        let mut tape = Tape::new();
        let id = tape.variable(theta);
        let sq = tape.hadamard(id, id).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(id).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let theta = Matrix::from_rows(&[vec![0.3f64, -0.7]]);
        let report = grad_check(
            |t, ids| {
                let c = t.constant(Matrix::filled(1, 2, 4.0));
                let d = t.detach(ids[0]);
                let h = t.hadamard(c, d)?;
                let s = t.sum_all(h)?;
                // Loss ignores the variable entirely.
                let zero = t.scale(s, 0.0);
                Ok(zero)
            },
            &[("theta", theta)],
            GradCheckOptions { eps: 1e-5, tol: 1e-10 },
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
    }
}
