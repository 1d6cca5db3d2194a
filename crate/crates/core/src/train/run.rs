//! The training loop: full-batch by default, deterministic given seeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{ActivationLedger, Hyper, OptAlgo, OptState, TapeConfig, ToyModel};

/// Inputs and targets, one example per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Dataset> {
        if inputs.rows() != targets.rows() {
            return Err(Error::shape("dataset", inputs.shape(), targets.shape()));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `lo..hi` as an owned sub-dataset.
    fn slice(&self, lo: usize, hi: usize) -> Dataset {
        let take = |m: &Matrix| {
            let mut data = Vec::with_capacity((hi - lo) * m.cols());
            for i in lo..hi {
                data.extend_from_slice(m.row(i));
            }
            Matrix::from_vec(hi - lo, m.cols(), data).expect("slice of finite data")
        };
        Dataset {
            inputs: take(&self.inputs),
            targets: take(&self.targets),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub algo: OptAlgo,
    pub hyper: Hyper,
    pub recompute: bool,
    /// `None` (the default) trains full-batch: one optimizer step per epoch.
    /// `Some(b)` walks the dataset in consecutive chunks of `b` rows without
    /// shuffling, so runs stay deterministic.
    pub batch_size: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 3,
            algo: OptAlgo::AdamW,
            hyper: Hyper::default(),
            recompute: true,
            batch_size: None,
        }
    }
}

/// What a training run measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Loss before each epoch's first step, with the post-training loss
    /// appended; length `epochs + 1`.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub steps: usize,
    pub trainable_params: usize,
    /// Whether training ran with recomputation.
    pub recompute: bool,
    /// Ledger measured with recomputation on, for this model and batch.
    pub ledger_recompute_on: ActivationLedger,
    /// Ledger measured with recomputation off.
    pub ledger_recompute_off: ActivationLedger,
}

/// Train `model` in place. Deterministic: same model, data and options give
/// the same report and the same final parameters. Divergence fails fast with
/// the step index.
pub fn train_run(model: &mut ToyModel, data: &Dataset, opts: &TrainOptions) -> Result<RunReport> {
    if data.is_empty() {
        return Err(Error::Param("dataset is empty".into()));
    }
    if opts.epochs == 0 {
        return Err(Error::Param("epochs must be at least 1".into()));
    }
    if opts.batch_size == Some(0) {
        return Err(Error::Param("batch size must be positive".into()));
    }

    // Measure both retention modes once on the first batch so every report
    // can compare them.
    let probe = match opts.batch_size {
        Some(b) => data.slice(0, b.min(data.len())),
        None => data.clone(),
    };
    let ledger_on = model
        .forward_loss(
            &probe.inputs,
            &probe.targets,
            TapeConfig { recompute: true },
        )?
        .1
        .ledger()
        .clone();
    let ledger_off = model
        .forward_loss(
            &probe.inputs,
            &probe.targets,
            TapeConfig { recompute: false },
        )?
        .1
        .ledger()
        .clone();

    let cfg = TapeConfig {
        recompute: opts.recompute,
    };
    let mut opt = OptState::new(model, opts.algo, opts.hyper);
    let mut losses = Vec::with_capacity(opts.epochs + 1);
    let mut steps = 0usize;

    for epoch in 0..opts.epochs {
        let mut epoch_first_loss = None;
        let batches: Vec<(usize, usize)> = match opts.batch_size {
            None => vec![(0, data.len())],
            Some(b) => {
                let mut v = Vec::new();
                let mut lo = 0;
                while lo < data.len() {
                    v.push((lo, (lo + b).min(data.len())));
                    lo += b;
                }
                v
            }
        };
        for (lo, hi) in batches {
            let batch = if lo == 0 && hi == data.len() {
                data.clone()
            } else {
                data.slice(lo, hi)
            };
            let step_label = steps;
            let (loss, mut tape) = model
                .forward_loss(&batch.inputs, &batch.targets, cfg)
                .map_err(|e| wrap_step(e, step_label))?;
            if epoch_first_loss.is_none() {
                epoch_first_loss = Some(loss);
            }
            let grads = model
                .backward(&mut tape)
                .map_err(|e| wrap_step(e, step_label))?;
            opt.step_model(model, &grads)
                .map_err(|e| wrap_step(e, step_label))?;
            steps += 1;
        }
        losses.push(epoch_first_loss.expect("at least one batch per epoch"));
        let _ = epoch;
    }

    let final_loss = model.evaluate(&data.inputs, &data.targets)?;
    losses.push(final_loss);

    Ok(RunReport {
        initial_loss: losses[0],
        final_loss,
        epochs: opts.epochs,
        steps,
        trainable_params: model.trainable_count(),
        recompute: opts.recompute,
        ledger_recompute_on: ledger_on,
        ledger_recompute_off: ledger_off,
        losses,
    })
}

fn wrap_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
        other => other,
    }
}
