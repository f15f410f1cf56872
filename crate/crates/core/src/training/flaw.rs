//! The model `M(phi, x) = alpha * phi + beta * x1 + gamma` with
//! `phi = sin(x1)` supplied as a separate input.
//!
//! Differentiating `M` on the tape with respect to `x1` cannot see that `phi`
//! depends on `x1`, so it returns `beta` instead of
//! `alpha * cos(x1) + beta`. Recovering the derivative from the sampled
//! field on a 1-D mesh does see it.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Tensor};
use crate::fem::gradient_recovery_1d;

use super::TrainError;

pub const ALPHA: f64 = 2.0;
pub const BETA: f64 = 3.0;
pub const GAMMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FlawResolution {
    pub samples: usize,
    pub spacing: f64,
    /// `max |fe_chain - analytic|`
    pub fe_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlawReport {
    pub x: Vec<f64>,
    pub tape_derivative: Vec<f64>,
    pub analytic: Vec<f64>,
    pub fe_chain: Vec<f64>,
    /// `max |tape - beta|`
    pub tape_deviation: f64,
    /// `max |analytic - tape|`
    pub analytic_vs_tape: f64,
    /// `max |fe_chain - analytic|`
    pub fe_error: f64,
    /// The FE-chain error at `samples`, `2 * samples`, `4 * samples`.
    pub refinement: Vec<FlawResolution>,
}

impl FlawReport {
    /// Error ratio between consecutive refinement levels.
    pub fn refinement_ratios(&self) -> Vec<f64> {
        self.refinement
            .windows(2)
            .map(|w| w[0].fe_error / w[1].fe_error)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,tape_derivative,analytic,fe_chain\n");
        for i in 0..self.x.len() {
            out.push_str(&format!(
                "{:e},{:e},{:e},{:e}\n",
                self.x[i], self.tape_derivative[i], self.analytic[i], self.fe_chain[i]
            ));
        }
        out
    }
}

fn samples(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 2.0 * PI * i as f64 / (n - 1) as f64)
        .collect()
}

fn model_field(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&x| ALPHA * x.sin() + BETA * x + GAMMA).collect()
}

fn analytic(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&x| ALPHA * x.cos() + BETA).collect()
}

fn fe_chain(x: &[f64]) -> Result<Vec<f64>, TrainError> {
    Ok(gradient_recovery_1d(x)?.mul_vec(&model_field(x))?)
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Runs the demonstration on `n` uniform samples of `[0, 2 pi]`.
pub fn demo_autodiff_flaw(n: usize) -> Result<FlawReport, TrainError> {
    if n < 2 {
        return Err(TrainError::InvalidConfig(
            "the flaw demo needs at least two samples".into(),
        ));
    }
    let x = samples(n);
    let tape = Tape::new();
    let x1 = tape.leaf(Tensor::column(x.clone()));
    let phi = tape.leaf(Tensor::column(x.iter().map(|v| v.sin()).collect()));
    let m = phi.scale(ALPHA).add(x1.scale(BETA))?.add_scalar(GAMMA);
    let tape_derivative = tape.backward(m.sum(), &[x1], false)?[0]
        .value()
        .data()
        .to_vec();

    let analytic = analytic(&x);
    let fe = fe_chain(&x)?;
    let refinement = [n, 2 * n, 4 * n]
        .into_iter()
        .map(|k| {
            let xs = samples(k);
            Ok(FlawResolution {
                samples: k,
                spacing: xs[1] - xs[0],
                fe_error: max_dev(&fe_chain(&xs)?, &self::analytic(&xs)),
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    Ok(FlawReport {
        tape_deviation: tape_derivative
            .iter()
            .map(|d| (d - BETA).abs())
            .fold(0.0, f64::max),
        analytic_vs_tape: max_dev(&analytic, &tape_derivative),
        fe_error: max_dev(&fe, &analytic),
        refinement,
        x,
        tape_derivative,
        analytic,
        fe_chain: fe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_sees_only_beta() {
        let r = demo_autodiff_flaw(100).unwrap();
        assert_eq!(r.x.len(), 100);
        assert!(r.tape_derivative.iter().all(|&d| d == BETA));
        assert_eq!(r.tape_deviation, 0.0);
    }

    #[test]
    fn analytic_gap_is_alpha() {
        let r = demo_autodiff_flaw(100).unwrap();
        assert_eq!(r.analytic_vs_tape, 2.0);
    }

    #[test]
    fn fe_chain_converges() {
        let r = demo_autodiff_flaw(100).unwrap();
        assert!(r.fe_error < 0.01, "{}", r.fe_error);
        for ratio in r.refinement_ratios() {
            assert!(ratio >= 1.8, "{ratio}");
        }
        assert_eq!(r.refinement[0].fe_error, r.fe_error);
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let r = demo_autodiff_flaw(10).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x1,tape_derivative,analytic,fe_chain");
        assert_eq!(lines.len(), 11);
        assert!(demo_autodiff_flaw(1).is_err());
    }
}
