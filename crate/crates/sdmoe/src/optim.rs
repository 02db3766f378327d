//! First-order parameter updates: plain gradient descent and Adam.
//!
//! Every parameter block carries its own [`ParamState`]; moment statistics
//! are never shared or mixed across blocks. Updates are entry-wise with a
//! fixed evaluation order, so repeated runs are bitwise identical.

use crate::linalg::{LinalgError, Matrix};
use std::fmt;
use std::str::FromStr;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer '{other}' (expected sgd or adam)")),
        }
    }
}

/// Per-block optimizer state. `m`/`v` stay `None` until the first Adam step
/// so SGD-only runs allocate nothing extra.
#[derive(Debug, Clone, Default)]
pub struct ParamState {
    pub t: u64,
    pub m: Option<Matrix>,
    pub v: Option<Matrix>,
}

impl ParamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One optimizer step on a single parameter block.
///
/// SGD: `w ← w − lr·g`. Adam: standard exponential moments with bias
/// correction, `w ← w − lr·m̂ / (√v̂ + ε)`.
pub fn apply_update(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut ParamState,
    kind: OptimizerKind,
    lr: f64,
) -> Result<(), LinalgError> {
    if param.rows != grad.rows || param.cols != grad.cols {
        return Err(LinalgError::ShapeMismatch {
            context: "apply_update",
            lhs_rows: param.rows,
            lhs_cols: param.cols,
            rhs_rows: grad.rows,
            rhs_cols: grad.cols,
        });
    }
    state.t += 1;
    match kind {
        OptimizerKind::Sgd => {
            param.add_scaled(grad, -lr)?;
        }
        OptimizerKind::Adam => {
            let m = state
                .m
                .get_or_insert_with(|| Matrix::zeros(param.rows, param.cols));
            let v = state
                .v
                .get_or_insert_with(|| Matrix::zeros(param.rows, param.cols));
            let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
            for i in 0..param.data.len() {
                let g = grad.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                param.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_plain_descent() {
        let mut w = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let g = Matrix::new(1, 2, vec![0.5, -1.0]).unwrap();
        let mut st = ParamState::new();
        apply_update(&mut w, &g, &mut st, OptimizerKind::Sgd, 0.1).unwrap();
        assert_eq!(w.data, vec![1.0 - 0.05, 2.0 + 0.1]);
        assert_eq!(st.t, 1);
        assert!(st.m.is_none() && st.v.is_none());
    }

    #[test]
    fn adam_matches_scalar_recomputation() {
        // Independent scalar oracle for a 3-step trajectory on one entry.
        let grads = [2.0, -0.5, 0.25];
        let lr = 0.1;
        let mut w_oracle = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (step, &g) in grads.iter().enumerate() {
            let t = step as i32 + 1;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t));
            w_oracle -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }

        let mut w = Matrix::new(1, 1, vec![1.0]).unwrap();
        let mut st = ParamState::new();
        for &g in &grads {
            let gm = Matrix::new(1, 1, vec![g]).unwrap();
            apply_update(&mut w, &gm, &mut st, OptimizerKind::Adam, lr).unwrap();
        }
        assert!(
            (w.data[0] - w_oracle).abs() <= 1e-15,
            "{} vs {}",
            w.data[0],
            w_oracle
        );
        assert_eq!(st.t, 3);
    }

    #[test]
    fn adam_first_step_is_signlike() {
        // After one step the bias-corrected update is lr·g/(|g| + ε).
        let mut w = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let g = Matrix::new(1, 2, vec![3.0, -0.001]).unwrap();
        let mut st = ParamState::new();
        apply_update(&mut w, &g, &mut st, OptimizerKind::Adam, 0.1).unwrap();
        assert!((w.data[0] + 0.1).abs() <= 1e-8);
        assert!((w.data[1] - 0.1).abs() <= 1e-3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        let mut st = ParamState::new();
        assert!(matches!(
            apply_update(&mut w, &g, &mut st, OptimizerKind::Sgd, 0.1),
            Err(LinalgError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn optimizer_kind_round_trips_through_strings() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            assert_eq!(kind.to_string().parse::<OptimizerKind>().unwrap(), kind);
        }
        assert!("momentum".parse::<OptimizerKind>().is_err());
    }
}
