//! Training: reverse-mode gradients for chains of adapted layers, masked
//! optimizer steps, and the stored-activation ledger.
//!
//! A [`ToyModel`] is an ordered chain of [`AdaptedLayer`]s, each followed by
//! a fixed element-wise nonlinearity, ending in a scalar loss. The forward
//! pass records a [`Tape`]; what the tape retains depends on
//! [`TapeConfig::recompute`]:
//!
//! - recompute off: every intermediate is kept (the factor product
//!   `x * eff_a`, the base product, the pre-activation and the activation),
//! - recompute on: only layer inputs are kept, and the backward pass rebuilds
//!   the per-layer intermediates from them.
//!
//! Both modes execute the same arithmetic in the same order, so losses and
//! gradients agree to the last bit; only the retention differs, which is what
//! the byte ledger measures.

pub mod check;
mod optim;
mod run;

pub use check::{finite_difference_check, GradCheckReport};
pub use optim::{adamw_step, sgd_step, Hyper, OptAlgo, OptState, ParamState};
pub use run::{train_run, Dataset, RunReport, TrainOptions};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedLayer, LayerMode};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Element-wise nonlinearity applied after a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            Activation::Identity => x.clone(),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(&self, z: &Matrix) -> Option<Matrix> {
        match self {
            Activation::Identity => None, // derivative is 1; skip the multiply
            Activation::Tanh => Some(z.map(|v| 1.0 - v * v)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    MeanSquaredError,
    SoftmaxCrossEntropy,
}

/// Desk-scale stand-in for a deep network: adapted layers interleaved with
/// fixed nonlinearities, ending in a loss.
#[derive(Clone, Debug)]
pub struct ToyModel {
    layers: Vec<AdaptedLayer>,
    activations: Vec<Activation>,
    loss: LossKind,
}

impl ToyModel {
    /// `activations[i]` follows `layers[i]`; adjacent layer shapes must
    /// compose.
    pub fn new(
        layers: Vec<AdaptedLayer>,
        activations: Vec<Activation>,
        loss: LossKind,
    ) -> Result<ToyModel> {
        if layers.is_empty() {
            return Err(Error::Param("model needs at least one layer".into()));
        }
        if activations.len() != layers.len() {
            return Err(Error::Param(format!(
                "{} activations for {} layers",
                activations.len(),
                layers.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "layer composition",
                    (pair[0].in_dim(), pair[0].out_dim()),
                    (pair[1].in_dim(), pair[1].out_dim()),
                ));
            }
        }
        Ok(ToyModel {
            layers,
            activations,
            loss,
        })
    }

    pub fn layers(&self) -> &[AdaptedLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [AdaptedLayer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Entries the optimizer may modify, summed over layers.
    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(|l| l.trainable_count()).sum()
    }

    /// Plain forward map without taping.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut cur = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            cur = act.apply(&layer.forward(&cur)?);
        }
        Ok(cur)
    }

    /// Loss of `predict(x)` against `target` without building a tape.
    pub fn evaluate(&self, x: &Matrix, target: &Matrix) -> Result<f64> {
        loss_value(self.loss, &self.predict(x)?, target)
    }

    /// Forward pass that returns the scalar loss and a tape for backward.
    pub fn forward_loss(
        &self,
        x: &Matrix,
        target: &Matrix,
        cfg: TapeConfig,
    ) -> Result<(f64, Tape)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "model input",
                x.shape(),
                (x.rows(), self.in_dim()),
            ));
        }
        if target.rows() != x.rows() || target.cols() != self.out_dim() {
            return Err(Error::shape(
                "model target",
                target.shape(),
                (x.rows(), self.out_dim()),
            ));
        }

        let mut inputs: Vec<Matrix> = Vec::new();
        let mut records: Vec<LayerRecord> = Vec::new();
        let mut cur = x.clone();
        for (i, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            let step = layer_forward(layer, &cur, *act)?;
            if !step.pre.all_finite() {
                return Err(Error::Numeric(format!(
                    "layer {i} produced a non-finite pre-activation"
                )));
            }
            let out = step.out.clone();
            if cfg.recompute {
                inputs.push(cur);
            } else {
                records.push(step);
            }
            cur = out;
        }

        let prediction = cur;
        let loss = loss_value(self.loss, &prediction, target)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }

        let storage = if cfg.recompute {
            TapeStorage::InputsOnly { inputs }
        } else {
            TapeStorage::Full {
                first_input: x.clone(),
                records,
            }
        };
        let ledger = storage.ledger();
        Ok((
            loss,
            Tape {
                cfg,
                storage,
                target: target.clone(),
                loss_kind: self.loss,
                consumed: false,
                ledger,
                layer_count: self.layers.len(),
            },
        ))
    }

    /// Reverse pass over a completed tape. Produces gradients for the
    /// trainable matrices only: adapter factors in the adapter modes, the
    /// dense base under full fine-tuning, nothing for frozen layers. Base
    /// weights and masks never receive gradients in the adapter modes, and
    /// with value masking the gradient at every mask-zero position is exactly
    /// 0.0.
    pub fn backward(&self, tape: &mut Tape) -> Result<Gradients> {
        if tape.consumed {
            return Err(Error::State(
                "tape already consumed by a previous backward".into(),
            ));
        }
        if tape.layer_count != self.layers.len() {
            return Err(Error::State(format!(
                "tape recorded {} layers but the model has {}",
                tape.layer_count,
                self.layers.len()
            )));
        }
        tape.consumed = true;

        let count = self.layers.len();
        let mut grads: Vec<LayerGrads> = (0..count).map(|_| LayerGrads::default()).collect();

        // Walk the chain back to front. d_out is None until the loss gradient
        // seeds it at the last layer.
        let mut d_out: Option<Matrix> = None;
        for i in (0..count).rev() {
            let layer = &self.layers[i];
            let act = self.activations[i];
            let input = tape.input(i).clone();
            let (mid, out) = match &tape.storage {
                TapeStorage::Full { records, .. } => {
                    (records[i].mid.clone(), records[i].out.clone())
                }
                TapeStorage::InputsOnly { .. } => {
                    // selective recomputation: rebuild the factor product and
                    // the base product from the stored layer input
                    let step = layer_forward(layer, &input, act)?;
                    (step.mid, step.out)
                }
            };

            let dz = match d_out.take() {
                Some(d) => d,
                None => loss_gradient(tape.loss_kind, &out, &tape.target)?,
            };
            let dy = match act.derivative_from_output(&out) {
                Some(deriv) => dz.hadamard(&deriv)?,
                None => dz,
            };

            match layer.mode() {
                LayerMode::LoraSp | LayerMode::Lora => {
                    let adapter = layer.adapter();
                    let mid = mid.expect("adapter modes record the factor product");
                    let eff_b = adapter.effective_b()?;
                    let scale = adapter.scale();
                    // pre = base_out + scale * mid * eff_b^T
                    let d_mid = dy.matmul(&eff_b)?.scale(scale);
                    let grad_b_raw = dy.transpose().matmul(&mid)?.scale(scale);
                    let grad_a_raw = input.transpose().matmul(&d_mid)?;
                    let (grad_a, grad_b) = if adapter.freeze_only_gradients() {
                        (grad_a_raw, grad_b_raw)
                    } else {
                        // value masking: frozen entries carry exact 0.0
                        (
                            adapter.mask_a().apply(&grad_a_raw)?,
                            adapter.mask_b().apply(&grad_b_raw)?,
                        )
                    };
                    grads[i].a = Some(grad_a);
                    grads[i].b = Some(grad_b);
                    if i > 0 {
                        let through_base = dy.matmul(&layer.base().to_dense().transpose())?;
                        let through_adapter = d_mid.matmul(&adapter.effective_a()?.transpose())?;
                        d_out = Some(through_base.add(&through_adapter)?);
                    }
                }
                LayerMode::FullFineTune => {
                    grads[i].base = Some(input.transpose().matmul(&dy)?);
                    if i > 0 {
                        d_out = Some(dy.matmul(&layer.base().to_dense().transpose())?);
                    }
                }
                LayerMode::Frozen => {
                    if i > 0 {
                        d_out = Some(dy.matmul(&layer.base().to_dense().transpose())?);
                    }
                }
            }
        }

        Ok(Gradients { layers: grads })
    }
}

struct LayerRecord {
    mid: Option<Matrix>,
    base_out: Matrix,
    pre: Matrix,
    out: Matrix,
}

/// One layer's forward with intermediates exposed. `mid = x * eff_a` exists
/// only in the adapter modes.
fn layer_forward(layer: &AdaptedLayer, x: &Matrix, act: Activation) -> Result<LayerRecord> {
    if x.cols() != layer.in_dim() {
        return Err(Error::shape(
            "layer forward",
            x.shape(),
            layer.base().shape(),
        ));
    }
    let base_out = x.matmul(&layer.base().to_dense())?;
    let (mid, pre) = if layer.adapter_active() {
        let adapter = layer.adapter();
        let mid = x.matmul(&adapter.effective_a()?)?;
        let update = mid
            .matmul(&adapter.effective_b()?.transpose())?
            .scale(adapter.scale());
        let pre = base_out.add(&update)?;
        (Some(mid), pre)
    } else {
        (None, base_out.clone())
    };
    let out = act.apply(&pre);
    Ok(LayerRecord {
        mid,
        base_out,
        pre,
        out,
    })
}

fn loss_value(kind: LossKind, prediction: &Matrix, target: &Matrix) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape("loss", prediction.shape(), target.shape()));
    }
    match kind {
        LossKind::MeanSquaredError => {
            let n = prediction.len() as f64;
            let sum: f64 = prediction
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            Ok(sum / n)
        }
        LossKind::SoftmaxCrossEntropy => {
            // row-wise log-sum-exp with max subtraction; targets are
            // probability rows (one-hot in the shipped tasks)
            let batch = prediction.rows() as f64;
            let mut total = 0.0;
            for i in 0..prediction.rows() {
                let row = prediction.row(i);
                let trow = target.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                let mass: f64 = trow.iter().sum();
                let dot: f64 = row.iter().zip(trow).map(|(p, t)| p * t).sum();
                total += lse * mass - dot;
            }
            Ok(total / batch)
        }
    }
}

fn loss_gradient(kind: LossKind, prediction: &Matrix, target: &Matrix) -> Result<Matrix> {
    match kind {
        LossKind::MeanSquaredError => {
            let n = prediction.len() as f64;
            Matrix::from_vec(
                prediction.rows(),
                prediction.cols(),
                prediction
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| 2.0 * (p - t) / n)
                    .collect(),
            )
        }
        LossKind::SoftmaxCrossEntropy => {
            let batch = prediction.rows() as f64;
            let mut out = Matrix::zeros(prediction.rows(), prediction.cols());
            for i in 0..prediction.rows() {
                let row = prediction.row(i);
                let trow = target.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                let mass: f64 = trow.iter().sum();
                for j in 0..prediction.cols() {
                    let soft = (row[j] - max).exp() / denom;
                    out.set(i, j, (soft * mass - trow[j]) / batch);
                }
            }
            Ok(out)
        }
    }
}

/// What the tape keeps between forward and backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeConfig {
    /// Store only layer inputs and recompute per-layer intermediates during
    /// the backward pass.
    pub recompute: bool,
}

enum TapeStorage {
    /// Recompute on: layer inputs x_0 .. x_{L-1}, nothing else.
    InputsOnly { inputs: Vec<Matrix> },
    /// Recompute off: the chain input plus every per-layer intermediate. The
    /// activation output of layer i doubles as the input of layer i + 1, so
    /// each tensor is stored (and counted) once.
    Full {
        first_input: Matrix,
        records: Vec<LayerRecord>,
    },
}

impl TapeStorage {
    fn ledger(&self) -> ActivationLedger {
        let per_layer: Vec<usize> = match self {
            TapeStorage::InputsOnly { inputs } => inputs.iter().map(Matrix::byte_size).collect(),
            TapeStorage::Full {
                first_input,
                records,
            } => records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let input_part = if i == 0 { first_input.byte_size() } else { 0 };
                    input_part
                        + r.mid.as_ref().map_or(0, Matrix::byte_size)
                        + r.base_out.byte_size()
                        + r.pre.byte_size()
                        + r.out.byte_size()
                })
                .collect(),
        };
        let total_bytes = per_layer.iter().sum();
        ActivationLedger {
            per_layer,
            total_bytes,
        }
    }
}

/// Byte counts of activations retained between forward and backward.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationLedger {
    pub per_layer: Vec<usize>,
    pub total_bytes: usize,
}

/// Everything backward needs. A tape is single-use; a second backward on the
/// same tape is a state error.
pub struct Tape {
    cfg: TapeConfig,
    storage: TapeStorage,
    target: Matrix,
    loss_kind: LossKind,
    consumed: bool,
    ledger: ActivationLedger,
    layer_count: usize,
}

impl Tape {
    pub fn config(&self) -> TapeConfig {
        self.cfg
    }

    pub fn ledger(&self) -> &ActivationLedger {
        &self.ledger
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn input(&self, i: usize) -> &Matrix {
        match &self.storage {
            TapeStorage::InputsOnly { inputs } => &inputs[i],
            TapeStorage::Full {
                first_input,
                records,
            } => {
                if i == 0 {
                    first_input
                } else {
                    &records[i - 1].out
                }
            }
        }
    }
}

/// Per-layer gradients; `None` for matrices that do not train in the layer's
/// mode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerGrads {
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
    pub base: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|g| {
            g.a.as_ref().is_none_or(Matrix::all_finite)
                && g.b.as_ref().is_none_or(Matrix::all_finite)
                && g.base.as_ref().is_none_or(Matrix::all_finite)
        })
    }

    /// Flatten trainable gradients in a fixed order (layer by layer, a then
    /// b then base); used by the finite-difference harness.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            for m in [&g.a, &g.b, &g.base].into_iter().flatten() {
                out.extend_from_slice(m.data());
            }
        }
        out
    }
}
