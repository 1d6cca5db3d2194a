//! Central finite-difference verification of the reverse-mode gradients.
//!
//! The harness perturbs every trainable scalar in turn and compares the
//! two-sided difference quotient against the taped gradient. It goes through
//! `evaluate` (forward only), so it is independent of the backward pass it
//! checks.

use serde::{Deserialize, Serialize};

use crate::adapter::{BaseWeight, LayerMode};
use crate::error::Result;
use crate::tensor::Matrix;

use super::{TapeConfig, ToyModel};

/// Address of one trainable scalar.
#[derive(Clone, Copy, Debug)]
enum ParamRef {
    A(usize, usize, usize),
    B(usize, usize, usize),
    Base(usize, usize, usize),
}

fn trainable_refs(model: &ToyModel) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for (li, layer) in model.layers().iter().enumerate() {
        match layer.mode() {
            LayerMode::LoraSp | LayerMode::Lora => {
                let adapter = layer.adapter();
                for i in 0..adapter.in_dim() {
                    for j in 0..adapter.rank() {
                        out.push(ParamRef::A(li, i, j));
                    }
                }
                for i in 0..adapter.out_dim() {
                    for j in 0..adapter.rank() {
                        out.push(ParamRef::B(li, i, j));
                    }
                }
            }
            LayerMode::FullFineTune => {
                for i in 0..layer.in_dim() {
                    for j in 0..layer.out_dim() {
                        out.push(ParamRef::Base(li, i, j));
                    }
                }
            }
            LayerMode::Frozen => {}
        }
    }
    out
}

fn nudge(model: &mut ToyModel, p: ParamRef, delta: f64) {
    match p {
        ParamRef::A(li, i, j) => {
            let a = model.layers_mut()[li].adapter_mut().a_mut();
            let v = a.get(i, j);
            a.set(i, j, v + delta);
        }
        ParamRef::B(li, i, j) => {
            let b = model.layers_mut()[li].adapter_mut().b_mut();
            let v = b.get(i, j);
            b.set(i, j, v + delta);
        }
        ParamRef::Base(li, i, j) => match model.layers_mut()[li].base_mut() {
            BaseWeight::Dense(w) => {
                let v = w.get(i, j);
                w.set(i, j, v + delta);
            }
            BaseWeight::Quantized(_) => unreachable!("quantized bases are never trainable"),
        },
    }
}

/// Outcome of one finite-difference sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Trainable scalars compared.
    pub checked: usize,
    /// Entries whose difference exceeded the tolerance.
    pub failures: usize,
    /// Largest relative error seen (after the absolute floor).
    pub worst_rel_err: f64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Sweep every trainable scalar: central difference with step `h`, accepted
/// when `|analytic - numeric| <= max(abs_floor, rel_tol * max(|analytic|,
/// |numeric|))`.
pub fn finite_difference_check(
    model: &ToyModel,
    x: &Matrix,
    target: &Matrix,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
    recompute: bool,
) -> Result<GradCheckReport> {
    let (_, mut tape) = model.forward_loss(x, target, TapeConfig { recompute })?;
    let analytic = model.backward(&mut tape)?.flatten();
    let refs = trainable_refs(model);
    debug_assert_eq!(analytic.len(), refs.len());

    let mut failures = 0usize;
    let mut worst = 0.0f64;
    for (&p, &a) in refs.iter().zip(&analytic) {
        let mut plus = model.clone();
        nudge(&mut plus, p, h);
        let mut minus = model.clone();
        nudge(&mut minus, p, -h);
        let numeric = (plus.evaluate(x, target)? - minus.evaluate(x, target)?) / (2.0 * h);
        let diff = (a - numeric).abs();
        let tol = abs_floor.max(rel_tol * a.abs().max(numeric.abs()));
        if diff > tol {
            failures += 1;
        }
        let rel = diff / a.abs().max(numeric.abs()).max(abs_floor);
        worst = worst.max(rel);
    }
    Ok(GradCheckReport {
        checked: refs.len(),
        failures,
        worst_rel_err: worst,
        step: h,
        rel_tol,
        abs_floor,
    })
}
