//! Masked optimizer steps: AdamW with decoupled weight decay, and plain SGD
//! behind a flag.
//!
//! Updates touch mask-one entries only. Mask-zero entries of the parameter
//! and of both moment buffers are never read or written, so they stay
//! bit-identical to initialization no matter how many steps run — that is
//! the freezing guarantee, enforced here rather than assumed from zero
//! gradients (an injected nonzero gradient at a frozen entry still must not
//! move it).

use serde::{Deserialize, Serialize};

use crate::adapter::{BaseWeight, LayerMode};
use crate::error::{Error, Result};
use crate::selection::SelectionMask;
use crate::tensor::Matrix;

use super::{Gradients, ToyModel};

/// Optimizer hyperparameters. Defaults: learning rate 2e-5, betas
/// (0.9, 0.999), epsilon 1e-8, weight decay 0.01.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptAlgo {
    AdamW,
    /// Plain gradient descent: `p -= lr * g`, no state, no decay.
    Sgd,
}

impl std::str::FromStr for OptAlgo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" | "adam-w" | "AdamW" => Ok(OptAlgo::AdamW),
            "sgd" | "SGD" => Ok(OptAlgo::Sgd),
            other => Err(Error::Param(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// First and second moment buffers for one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    m: Matrix,
    v: Matrix,
}

impl ParamState {
    pub fn zeros(rows: usize, cols: usize) -> ParamState {
        ParamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }

    pub fn first_moment(&self) -> &Matrix {
        &self.m
    }

    pub fn second_moment(&self) -> &Matrix {
        &self.v
    }
}

/// One AdamW update on a single parameter matrix. `t` is the step count
/// after incrementing (t >= 1), used for bias correction. `mask = None`
/// means every entry is trainable.
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut ParamState,
    hyper: &Hyper,
    t: u64,
    mask: Option<&SelectionMask>,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adamw step", param.shape(), grad.shape()));
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite gradient in adamw step".into()));
    }
    if t == 0 {
        return Err(Error::State(
            "step counter must be incremented before the update".into(),
        ));
    }
    let bias1 = 1.0 - hyper.beta1.powi(t as i32);
    let bias2 = 1.0 - hyper.beta2.powi(t as i32);
    let (rows, cols) = param.shape();
    for i in 0..rows {
        for j in 0..cols {
            if let Some(mask) = mask {
                if !mask.is_selected(i, j) {
                    continue;
                }
            }
            let g = grad.get(i, j);
            let mut p = param.get(i, j);
            // decoupled decay first, on trainable entries only
            p *= 1.0 - hyper.lr * hyper.weight_decay;
            let m = hyper.beta1 * state.m.get(i, j) + (1.0 - hyper.beta1) * g;
            let v = hyper.beta2 * state.v.get(i, j) + (1.0 - hyper.beta2) * g * g;
            state.m.set(i, j, m);
            state.v.set(i, j, v);
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            param.set(i, j, p);
        }
    }
    Ok(())
}

/// Plain gradient descent on mask-one entries. Weight decay and moments do
/// not apply.
pub fn sgd_step(
    param: &mut Matrix,
    grad: &Matrix,
    hyper: &Hyper,
    mask: Option<&SelectionMask>,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("sgd step", param.shape(), grad.shape()));
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite gradient in sgd step".into()));
    }
    let (rows, cols) = param.shape();
    for i in 0..rows {
        for j in 0..cols {
            if let Some(mask) = mask {
                if !mask.is_selected(i, j) {
                    continue;
                }
            }
            param.set(i, j, param.get(i, j) - hyper.lr * grad.get(i, j));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerSlots {
    a: Option<ParamState>,
    b: Option<ParamState>,
    base: Option<ParamState>,
}

/// Optimizer state for a whole model: one moment pair per trainable matrix
/// plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    algo: OptAlgo,
    hyper: Hyper,
    step: u64,
    slots: Vec<LayerSlots>,
}

impl OptState {
    pub fn new(model: &ToyModel, algo: OptAlgo, hyper: Hyper) -> OptState {
        let slots = model
            .layers()
            .iter()
            .map(|layer| match (algo, layer.mode()) {
                (OptAlgo::Sgd, _) | (_, LayerMode::Frozen) => LayerSlots::default(),
                (OptAlgo::AdamW, LayerMode::LoraSp | LayerMode::Lora) => {
                    let adapter = layer.adapter();
                    LayerSlots {
                        a: Some(ParamState::zeros(adapter.in_dim(), adapter.rank())),
                        b: Some(ParamState::zeros(adapter.out_dim(), adapter.rank())),
                        base: None,
                    }
                }
                (OptAlgo::AdamW, LayerMode::FullFineTune) => LayerSlots {
                    a: None,
                    b: None,
                    base: Some(ParamState::zeros(layer.in_dim(), layer.out_dim())),
                },
            })
            .collect();
        OptState {
            algo,
            hyper,
            step: 0,
            slots,
        }
    }

    pub fn algo(&self) -> OptAlgo {
        self.algo
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers for layer `i`'s factors, when they exist.
    pub fn adapter_moments(&self, i: usize) -> (Option<&ParamState>, Option<&ParamState>) {
        (self.slots[i].a.as_ref(), self.slots[i].b.as_ref())
    }

    /// Apply one optimizer step to every trainable matrix in the model.
    pub fn step_model(&mut self, model: &mut ToyModel, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != model.layers().len() {
            return Err(Error::State(format!(
                "{} gradient slots for {} layers",
                grads.layers.len(),
                model.layers().len()
            )));
        }
        self.step += 1;
        let t = self.step;
        let hyper = self.hyper;
        let algo = self.algo;
        for (i, layer) in model.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers[i];
            match layer.mode() {
                LayerMode::Frozen => {}
                LayerMode::LoraSp | LayerMode::Lora => {
                    let (ga, gb) = match (&g.a, &g.b) {
                        (Some(ga), Some(gb)) => (ga.clone(), gb.clone()),
                        _ => {
                            return Err(Error::State(format!("layer {i} expects factor gradients")))
                        }
                    };
                    let adapter = layer.adapter_mut();
                    let mask_a = adapter.mask_a().clone();
                    let mask_b = adapter.mask_b().clone();
                    match algo {
                        OptAlgo::AdamW => {
                            let slot = &mut self.slots[i];
                            adamw_step(
                                adapter.a_mut(),
                                &ga,
                                slot.a.as_mut().expect("adapter slot"),
                                &hyper,
                                t,
                                Some(&mask_a),
                            )?;
                            adamw_step(
                                adapter.b_mut(),
                                &gb,
                                slot.b.as_mut().expect("adapter slot"),
                                &hyper,
                                t,
                                Some(&mask_b),
                            )?;
                        }
                        OptAlgo::Sgd => {
                            sgd_step(adapter.a_mut(), &ga, &hyper, Some(&mask_a))?;
                            sgd_step(adapter.b_mut(), &gb, &hyper, Some(&mask_b))?;
                        }
                    }
                }
                LayerMode::FullFineTune => {
                    let gbase = g.base.clone().ok_or_else(|| {
                        Error::State(format!("layer {i} expects a base gradient"))
                    })?;
                    let base = match layer.base_mut() {
                        BaseWeight::Dense(m) => m,
                        BaseWeight::Quantized(_) => {
                            return Err(Error::State(
                                "full fine-tune layer has a quantized base".into(),
                            ))
                        }
                    };
                    match algo {
                        OptAlgo::AdamW => {
                            let slot = self.slots[i].base.as_mut().expect("base slot");
                            adamw_step(base, &gbase, slot, &hyper, t, None)?;
                        }
                        OptAlgo::Sgd => sgd_step(base, &gbase, &hyper, None)?,
                    }
                }
            }
        }
        Ok(())
    }
}
