//! Configuration-driven experiment runner: synthetic tasks, single runs,
//! method comparisons, and report files.
//!
//! Everything is deterministic given the three seeds (data / init / mask),
//! and every artifact embeds the fully resolved configuration, the seeds,
//! the generator identifier and a config hash. Wall-clock timings are real
//! measurements and therefore live in a separate `timing.json`, keeping
//! `report.json` byte-reproducible.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedLayer, AdapterPair, BaseWeight, LayerMode};
use crate::costmodel::{self, ArchSpec, BasePrecision, Method, Role, RoleSpec};
use crate::error::{Error, Result};
use crate::quant::quantize;
use crate::rng::{RngState, RNG_ALGORITHM};
use crate::selection::{make_mask, MaskScheme};
use crate::tensor::Matrix;
use crate::train::{
    finite_difference_check, train_run, Activation, Dataset, GradCheckReport, Hyper, LossKind,
    OptAlgo, RunReport, ToyModel, TrainOptions,
};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// A frozen teacher equal to the student's base plus a hidden low-rank
    /// perturbation; the adapter's job is to recover the perturbation.
    LowRankRecovery,
    /// Gaussian clusters with one-hot labels and a cross-entropy head.
    ToyClassify,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low-rank-recovery" | "low_rank_recovery" | "recovery" => Ok(TaskKind::LowRankRecovery),
            "toy-classify" | "toy_classify" | "classify" => Ok(TaskKind::ToyClassify),
            other => Err(Error::Param(format!("unknown task '{other}'"))),
        }
    }
}

/// Fully explicit run configuration. Any field may be omitted in a JSON
/// config file; the persisted echo always carries every resolved value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub method: Method,
    /// Input dimension.
    pub m: usize,
    /// Output dimension (class count for the classification task).
    pub n: usize,
    /// Number of adapted layers.
    pub depth: usize,
    pub samples: usize,
    pub rank: usize,
    /// Scaling numerator; `None` resolves to `rank` (scale 1).
    pub alpha: Option<f64>,
    pub mask_scheme: MaskScheme,
    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_mask: u64,
    pub optimizer: OptAlgo,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub recompute: bool,
    pub quantize_base: bool,
    pub quant_block: usize,
    /// Standard deviation of the label noise (recovery task).
    pub noise_std: f64,
    /// Rank of the hidden perturbation; 0 means no perturbation.
    pub hidden_rank: usize,
    /// Relative magnitude of the hidden perturbation.
    pub perturb_scale: f64,
    pub freeze_only_gradients: bool,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Run a finite-difference sweep on the freshly built model and include
    /// the summary in the report.
    pub gradcheck: bool,
    /// Nonlinearity between layers (the last layer is always linear).
    pub chain_activation: Activation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::LowRankRecovery,
            method: Method::LoraSp,
            m: 32,
            n: 32,
            depth: 2,
            samples: 128,
            rank: 16,
            alpha: None,
            mask_scheme: MaskScheme::GlobalRandom,
            seed_data: 1,
            seed_init: 2,
            seed_mask: 3,
            optimizer: OptAlgo::AdamW,
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 3,
            recompute: true,
            quantize_base: true,
            quant_block: 64,
            noise_std: 0.0,
            hidden_rank: 2,
            perturb_scale: 0.5,
            freeze_only_gradients: false,
            batch_size: None,
            gradcheck: false,
            chain_activation: Activation::Tanh,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.depth == 0 || self.samples == 0 {
            return Err(Error::Param(
                "dims, depth and samples must be positive".into(),
            ));
        }
        if self.rank == 0 || self.rank > self.m.min(self.n) {
            return Err(Error::Param(format!(
                "rank {} out of range for {}x{}",
                self.rank, self.m, self.n
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if self.hidden_rank > self.rank {
            return Err(Error::Param(format!(
                "hidden rank {} exceeds adapter rank {}",
                self.hidden_rank, self.rank
            )));
        }
        if self.quant_block == 0 {
            return Err(Error::Param("quant block must be positive".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Param("noise std must be nonnegative".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Param("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Same configuration with every optional field pinned; this is what
    /// reports echo.
    pub fn resolved(&self) -> RunConfig {
        let mut out = self.clone();
        out.alpha = Some(self.resolved_alpha());
        // full fine-tuning trains the base, which must stay dense
        if out.method == Method::Ft {
            out.quantize_base = false;
        }
        out
    }

    pub fn resolved_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn with_method(&self, method: Method) -> RunConfig {
        let mut out = self.clone();
        out.method = method;
        out
    }

    /// Per-layer shapes of the chain: the first layer maps m to n, the rest
    /// n to n.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| {
                if i == 0 {
                    (self.m, self.n)
                } else {
                    (self.n, self.n)
                }
            })
            .collect()
    }

    fn activations(&self) -> Vec<Activation> {
        (0..self.depth)
            .map(|i| {
                if i + 1 == self.depth {
                    Activation::Identity
                } else {
                    self.chain_activation
                }
            })
            .collect()
    }

    fn loss_kind(&self) -> LossKind {
        match self.task {
            TaskKind::LowRankRecovery => LossKind::MeanSquaredError,
            TaskKind::ToyClassify => LossKind::SoftmaxCrossEntropy,
        }
    }
}

/// A generated task: the training data plus the frozen base weights the
/// student starts from.
#[derive(Clone, Debug)]
pub struct GeneratedTask {
    pub data: Dataset,
    pub bases: Vec<Matrix>,
    /// The frozen generator of the targets (recovery task only).
    pub teacher: Option<ToyModel>,
}

/// Build the dataset and base weights for a config. Deterministic given
/// `seed_data`; the init and mask seeds play no part here.
pub fn gen_task(cfg: &RunConfig) -> Result<GeneratedTask> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed_data);
    let mut base_rng = root.split(0);
    let mut perturb_rng = root.split(1);
    let mut input_rng = root.split(2);
    let mut noise_rng = root.split(3);
    let mut scaffold_rng = root.split(4);

    let dims = cfg.layer_dims();
    let mut bases = Vec::with_capacity(dims.len());
    for &(din, dout) in &dims {
        bases.push(Matrix::gauss(
            &mut base_rng,
            din,
            dout,
            0.0,
            (1.0 / din as f64).sqrt(),
        )?);
    }

    let inputs = Matrix::gauss(&mut input_rng, cfg.samples, cfg.m, 0.0, 1.0)?;

    match cfg.task {
        TaskKind::LowRankRecovery => {
            // teacher = base chain with one hidden low-rank perturbation on
            // the first layer; the adapters' job is to recover it
            let mut teacher_layers = Vec::with_capacity(dims.len());
            for (li, &(din, dout)) in dims.iter().enumerate() {
                let teacher_w = if cfg.hidden_rank == 0 || li != 0 {
                    bases[li].clone()
                } else {
                    let g = Matrix::gauss(&mut perturb_rng, din, cfg.hidden_rank, 0.0, 1.0)?;
                    let h = Matrix::gauss(&mut perturb_rng, dout, cfg.hidden_rank, 0.0, 1.0)?;
                    let scale =
                        cfg.perturb_scale / ((cfg.hidden_rank as f64).sqrt() * (din as f64).sqrt());
                    bases[li].add(&g.matmul(&h.transpose())?.scale(scale))?
                };
                teacher_layers.push(frozen_layer(teacher_w, &mut scaffold_rng)?);
            }
            let teacher = ToyModel::new(teacher_layers, cfg.activations(), cfg.loss_kind())?;
            let clean = teacher.predict(&inputs)?;
            let targets = if cfg.noise_std == 0.0 {
                clean
            } else {
                let noise = Matrix::gauss(&mut noise_rng, cfg.samples, cfg.n, 0.0, cfg.noise_std)?;
                clean.add(&noise)?
            };
            Ok(GeneratedTask {
                data: Dataset::new(inputs, targets)?,
                bases,
                teacher: Some(teacher),
            })
        }
        TaskKind::ToyClassify => {
            let centers = Matrix::gauss(&mut perturb_rng, cfg.n, cfg.m, 0.0, 2.0)?;
            let spread = Matrix::gauss(&mut noise_rng, cfg.samples, cfg.m, 0.0, 0.5)?;
            let mut x = Matrix::zeros(cfg.samples, cfg.m);
            let mut t = Matrix::zeros(cfg.samples, cfg.n);
            for s in 0..cfg.samples {
                let class = s % cfg.n;
                for j in 0..cfg.m {
                    x.set(s, j, centers.get(class, j) + spread.get(s, j));
                }
                t.set(s, class, 1.0);
            }
            Ok(GeneratedTask {
                data: Dataset::new(x, t)?,
                bases,
                teacher: None,
            })
        }
    }
}

/// A layer that only carries a fixed weight (teacher layers).
fn frozen_layer(w: Matrix, rng: &mut RngState) -> Result<AdaptedLayer> {
    let (din, dout) = w.shape();
    let a = Matrix::zeros(din, 1);
    let b = Matrix::zeros(dout, 1);
    let mask_a = make_mask(din, 1, MaskScheme::AllZeros, rng)?;
    let mask_b = make_mask(dout, 1, MaskScheme::AllZeros, rng)?;
    let adapter = AdapterPair::from_parts(a, b, mask_a, mask_b, 1.0, false)?;
    AdaptedLayer::new(BaseWeight::Dense(w), adapter, LayerMode::Frozen)
}

/// Build the student model for a config and task. Adapter values come from
/// `seed_init`, masks from `seed_mask`, so ablations can vary one at a time.
pub fn build_model(cfg: &RunConfig, task: &GeneratedTask) -> Result<ToyModel> {
    let cfg = cfg.resolved();
    let init_root = RngState::new(cfg.seed_init);
    let mask_root = RngState::new(cfg.seed_mask);

    let mut layers = Vec::with_capacity(cfg.depth);
    for (li, base_w) in task.bases.iter().enumerate() {
        let (din, dout) = base_w.shape();
        let mut init_rng = init_root.split(li as u64);
        let mut mask_rng_a = mask_root.split(2 * li as u64);
        let mut mask_rng_b = mask_root.split(2 * li as u64 + 1);

        let (mode, scheme) = match cfg.method {
            Method::Ft => (LayerMode::FullFineTune, MaskScheme::AllZeros),
            Method::Lora => (LayerMode::Lora, MaskScheme::AllOnes),
            Method::LoraSp => (LayerMode::LoraSp, cfg.mask_scheme),
        };

        let std = (1.0 / cfg.rank as f64).sqrt();
        let a = Matrix::gauss(&mut init_rng, din, cfg.rank, 0.0, std)?;
        let b = Matrix::zeros(dout, cfg.rank);
        let mask_a = make_mask(din, cfg.rank, scheme, &mut mask_rng_a)?;
        let mask_b = make_mask(dout, cfg.rank, scheme, &mut mask_rng_b)?;
        let mut adapter = AdapterPair::from_parts(
            a,
            b,
            mask_a,
            mask_b,
            cfg.resolved_alpha(),
            cfg.freeze_only_gradients,
        )?;
        if cfg.method == Method::Ft {
            adapter.set_freeze_only_gradients(false);
        }

        let base = if cfg.quantize_base && cfg.method != Method::Ft {
            BaseWeight::Quantized(quantize(base_w, cfg.quant_block)?)
        } else {
            BaseWeight::Dense(base_w.clone())
        };
        layers.push(AdaptedLayer::new(base, adapter, mode)?);
    }
    ToyModel::new(layers, cfg.activations(), cfg.loss_kind())
}

/// Analytic trainable count for the config's chain, from the cost model.
pub fn analytic_trainable(cfg: &RunConfig) -> Result<u64> {
    let mut total = 0u64;
    for (din, dout) in cfg.layer_dims() {
        let spec = ArchSpec {
            layers: 1,
            hidden_dim: cfg.n as u64,
            roles: vec![RoleSpec {
                role: Role::Q,
                in_dim: din as u64,
                out_dim: dout as u64,
            }],
            rank: cfg.rank as u64,
            method: cfg.method,
            base_precision: BasePrecision::F64,
            base_params: None,
        };
        total += costmodel::count_trainable(&spec)?;
    }
    Ok(total)
}

/// One method's run: the trained outcome plus its cross-checks. `wall_time`
/// is measured and deliberately excluded from serialized reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRunResult {
    pub method: Method,
    pub config: RunConfig,
    pub report: RunReport,
    pub mask_trainable: u64,
    pub costmodel_trainable: u64,
    pub gradcheck: Option<GradCheckReport>,
    #[serde(skip)]
    pub wall_time_ms: u128,
}

/// Run one config end to end: generate the task, build the model, train,
/// cross-check the trainable count against the analytic model.
pub fn run_one(cfg: &RunConfig) -> Result<MethodRunResult> {
    run_one_trained(cfg).map(|(result, _)| result)
}

/// Like [`run_one`], but hands back the trained model as well, so callers
/// can checkpoint or keep evaluating it.
pub fn run_one_trained(cfg: &RunConfig) -> Result<(MethodRunResult, ToyModel)> {
    cfg.validate()?;
    let resolved = cfg.resolved();
    let started = std::time::Instant::now();

    let task = gen_task(&resolved)?;
    let mut model = build_model(&resolved, &task)?;

    let mask_trainable = model.trainable_count() as u64;
    let costmodel_trainable = analytic_trainable(&resolved)?;
    if mask_trainable != costmodel_trainable {
        return Err(Error::CrossCheck(format!(
            "mask count {mask_trainable} != analytic count {costmodel_trainable} for {}",
            resolved.method.as_str()
        )));
    }

    let gradcheck = if resolved.gradcheck {
        Some(finite_difference_check(
            &model,
            &task.data.inputs,
            &task.data.targets,
            1e-6,
            1e-5,
            1e-8,
            resolved.recompute,
        )?)
    } else {
        None
    };

    let opts = TrainOptions {
        epochs: resolved.epochs,
        algo: resolved.optimizer,
        hyper: resolved.hyper(),
        recompute: resolved.recompute,
        batch_size: resolved.batch_size,
    };
    let report =
        train_run(&mut model, &task.data, &opts).map_err(|e| label_method(e, resolved.method))?;

    Ok((
        MethodRunResult {
            method: resolved.method,
            config: resolved,
            report,
            mask_trainable,
            costmodel_trainable,
            gradcheck,
            wall_time_ms: started.elapsed().as_millis(),
        },
        model,
    ))
}

/// Write every layer's adapter checkpoint under `dir/layer_<i>/`.
pub fn save_adapters(model: &ToyModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (i, layer) in model.layers().iter().enumerate() {
        layer.save_adapter(dir.join(format!("layer_{i}")))?;
    }
    Ok(())
}

fn label_method(e: Error, method: Method) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("[{}] {msg}", method.as_str())),
        other => other,
    }
}

/// Provenance block embedded in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub rng_algorithm: String,
    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_mask: u64,
    /// FNV-1a hash of the resolved base config JSON.
    pub config_hash: String,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Manifest for a config, as embedded in its reports.
pub fn manifest_for(cfg: &RunConfig) -> Result<Manifest> {
    let canonical = serde_json::to_vec(&cfg.resolved())?;
    Ok(Manifest {
        format_version: REPORT_FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        seed_data: cfg.seed_data,
        seed_init: cfg.seed_init,
        seed_mask: cfg.seed_mask,
        config_hash: format!("{:016x}", fnv1a64(&canonical)),
    })
}

/// Results of running the same config under several methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub manifest: Manifest,
    pub base_config: RunConfig,
    pub runs: Vec<MethodRunResult>,
}

/// Run `methods` over one base config, concurrently up to the
/// `LORASP_THREADS` cap (methods differ, seeds are shared). Results keep the
/// requested order.
pub fn run_compare(cfg: &RunConfig, methods: &[Method]) -> Result<CompareReport> {
    if methods.is_empty() {
        return Err(Error::Param("at least one method is required".into()));
    }
    cfg.validate()?;
    let cap = thread_cap().min(methods.len()).max(1);

    let mut results: Vec<Option<Result<MethodRunResult>>> = Vec::new();
    results.resize_with(methods.len(), || None);
    for chunk_start in (0..methods.len()).step_by(cap) {
        let chunk_end = (chunk_start + cap).min(methods.len());
        let chunk_results: Vec<(usize, Result<MethodRunResult>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (chunk_start..chunk_end)
                .map(|idx| {
                    let run_cfg = cfg.with_method(methods[idx]);
                    scope.spawn(move || (idx, run_one(&run_cfg)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("runner thread"))
                .collect()
        });
        for (idx, res) in chunk_results {
            results[idx] = Some(res);
        }
    }

    let mut runs = Vec::with_capacity(methods.len());
    for slot in results {
        runs.push(slot.expect("all slots filled")?);
    }

    // halving cross-check between the adapter methods, when both ran
    let lora = runs.iter().find(|r| r.method == Method::Lora);
    let sp = runs.iter().find(|r| r.method == Method::LoraSp);
    if let (Some(lora), Some(sp)) = (lora, sp) {
        let expected = sp.costmodel_trainable;
        if sp.mask_trainable != expected || sp.mask_trainable > lora.mask_trainable / 2 + 1 {
            return Err(Error::CrossCheck(format!(
                "half-selection counts disagree: lora {} vs lora-sp {}",
                lora.mask_trainable, sp.mask_trainable
            )));
        }
    }

    Ok(CompareReport {
        manifest: manifest_for(cfg)?,
        base_config: cfg.resolved(),
        runs,
    })
}

fn thread_cap() -> usize {
    match std::env::var("LORASP_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).unwrap_or(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "table" | "text" | "txt" => Ok(ReportFormat::Table),
            other => Err(Error::Param(format!("unknown report format '{other}'"))),
        }
    }
}

/// The flat metrics block shared by the CSV and table renderings. It
/// round-trips losslessly through CSV: floats print in shortest-exact form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub trainable_params: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub steps: usize,
    pub activation_bytes_recompute_on: usize,
    pub activation_bytes_recompute_off: usize,
}

pub fn metrics_rows(report: &CompareReport) -> Vec<MetricsRow> {
    report
        .runs
        .iter()
        .map(|r| MetricsRow {
            method: r.method.as_str().to_string(),
            trainable_params: r.mask_trainable,
            initial_loss: r.report.initial_loss,
            final_loss: r.report.final_loss,
            epochs: r.report.epochs,
            steps: r.report.steps,
            activation_bytes_recompute_on: r.report.ledger_recompute_on.total_bytes,
            activation_bytes_recompute_off: r.report.ledger_recompute_off.total_bytes,
        })
        .collect()
}

const CSV_HEADER: &str = "method,trainable_params,initial_loss,final_loss,epochs,steps,activation_bytes_recompute_on,activation_bytes_recompute_off";

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            r.trainable_params,
            r.initial_loss,
            r.final_loss,
            r.epochs,
            r.steps,
            r.activation_bytes_recompute_on,
            r.activation_bytes_recompute_off
        ));
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Format(format!("unexpected csv header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Format(format!(
                "csv line {} has {} fields",
                ln + 2,
                fields.len()
            )));
        }
        let parse_u = |s: &str| {
            s.parse::<u64>()
                .map_err(|e| Error::Format(format!("csv line {}: {e}", ln + 2)))
        };
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("csv line {}: {e}", ln + 2)))
        };
        rows.push(MetricsRow {
            method: fields[0].to_string(),
            trainable_params: parse_u(fields[1])?,
            initial_loss: parse_f(fields[2])?,
            final_loss: parse_f(fields[3])?,
            epochs: parse_u(fields[4])? as usize,
            steps: parse_u(fields[5])? as usize,
            activation_bytes_recompute_on: parse_u(fields[6])? as usize,
            activation_bytes_recompute_off: parse_u(fields[7])? as usize,
        });
    }
    Ok(rows)
}

/// Aligned text table of the metrics block.
pub fn rows_to_table(rows: &[MetricsRow]) -> String {
    let headers = [
        "method",
        "trainable",
        "initial loss",
        "final loss",
        "epochs",
        "steps",
        "act B (on)",
        "act B (off)",
    ];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.trainable_params.to_string(),
                format!("{:.6e}", r.initial_loss),
                format!("{:.6e}", r.final_loss),
                r.epochs.to_string(),
                r.steps.to_string(),
                r.activation_bytes_recompute_on.to_string(),
                r.activation_bytes_recompute_off.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cols: &[String]| {
        cols.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = w))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&fmt_row(
        &headers.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    ));
    out.push('\n');
    for row in &cells {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

/// Deterministic JSON rendering of a compare report.
pub fn render_json(report: &CompareReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Write the report artifacts into `out_dir`. `report.json` (or `.csv` /
/// `.txt`) is byte-deterministic for identical results; measured wall times
/// go to `timing.json` on the side.
pub fn emit_report(
    report: &CompareReport,
    format: ReportFormat,
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    match format {
        ReportFormat::Json => {
            write_bytes(&dir.join("report.json"), render_json(report)?.as_bytes())?;
        }
        ReportFormat::Csv => {
            write_bytes(
                &dir.join("report.csv"),
                rows_to_csv(&metrics_rows(report)).as_bytes(),
            )?;
        }
        ReportFormat::Table => {
            write_bytes(
                &dir.join("report.txt"),
                rows_to_table(&metrics_rows(report)).as_bytes(),
            )?;
        }
    }
    // resolved config echo doubles as the rerun recipe
    let mut cfg_json = serde_json::to_string_pretty(&report.base_config)?;
    cfg_json.push('\n');
    write_bytes(&dir.join("config.json"), cfg_json.as_bytes())?;

    let timings: Vec<serde_json::Value> = report
        .runs
        .iter()
        .map(|r| serde_json::json!({ "method": r.method.as_str(), "wall_time_ms": r.wall_time_ms }))
        .collect();
    let mut timing_json = serde_json::to_string_pretty(&serde_json::Value::Array(timings))?;
    timing_json.push('\n');
    write_bytes(&dir.join("timing.json"), timing_json.as_bytes())?;
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Finite-difference sweeps over randomly shaped small models. Model `i`
/// draws its dims from `seed + i`, builds a two-layer chain, and checks every
/// trainable gradient entry at h = 1e-6 against 1e-5 relative tolerance with
/// a 1e-8 absolute floor.
pub fn gradcheck_suite(
    seed: u64,
    models: usize,
    dim_max: usize,
    rank_max: usize,
) -> Result<Vec<(RunConfig, GradCheckReport)>> {
    let mut out = Vec::with_capacity(models);
    for i in 0..models {
        let mut shape_rng = RngState::new(seed.wrapping_add(i as u64)).split(100);
        let m = 2 + shape_rng.next_below((dim_max - 1) as u64) as usize;
        let n = 2 + shape_rng.next_below((dim_max - 1) as u64) as usize;
        let rank = 1 + shape_rng.next_below(rank_max.min(m.min(n)) as u64) as usize;
        let cfg = RunConfig {
            task: TaskKind::LowRankRecovery,
            method: Method::LoraSp,
            m,
            n,
            depth: 2,
            samples: 6,
            rank,
            hidden_rank: rank.min(2),
            seed_data: seed.wrapping_add(17 * i as u64),
            seed_init: seed.wrapping_add(31 * i as u64 + 1),
            seed_mask: seed.wrapping_add(53 * i as u64 + 2),
            noise_std: 0.1,
            ..RunConfig::default()
        };
        let resolved = cfg.resolved();
        let task = gen_task(&resolved)?;
        let mut model = build_model(&resolved, &task)?;
        // move b off its zero init so gradients flow through both factors
        let mut warm = TrainOptions {
            epochs: 2,
            algo: OptAlgo::Sgd,
            hyper: Hyper {
                lr: 0.05,
                ..Hyper::default()
            },
            recompute: resolved.recompute,
            batch_size: None,
        };
        warm.hyper.weight_decay = 0.0;
        train_run(&mut model, &task.data, &warm)?;
        let report = finite_difference_check(
            &model,
            &task.data.inputs,
            &task.data.targets,
            1e-6,
            1e-5,
            1e-8,
            resolved.recompute,
        )?;
        out.push((resolved, report));
    }
    Ok(out)
}

/// Train/validation gap comparison on an overfit-prone split, averaged over
/// seeds. This restates the regularization claim as a measurement; callers
/// treat a violation as a warning, not a failure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationReport {
    pub seeds: u64,
    pub lora_mean_gap: f64,
    pub lora_sp_mean_gap: f64,
    /// True when the half-selective gap is at most the plain-adapter gap.
    pub sp_gap_leq_lora: bool,
}

pub fn regularization_check(base: &RunConfig, seeds: u64) -> Result<RegularizationReport> {
    let mut gaps = [0.0f64; 2];
    for s in 0..seeds {
        for (slot, method) in [(0usize, Method::Lora), (1usize, Method::LoraSp)] {
            let mut cfg = base.with_method(method);
            cfg.seed_data = base.seed_data + 1000 * s;
            cfg.seed_init = base.seed_init + 1000 * s;
            cfg.seed_mask = base.seed_mask + 1000 * s;
            cfg.validate()?;
            let resolved = cfg.resolved();
            let train_task = gen_task(&resolved)?;
            // validation split: same teacher, fresh inputs drawn from a
            // stream tag gen_task never uses
            let val_task = {
                let root = RngState::new(resolved.seed_data);
                let mut input_rng = root.split(7);
                let inputs =
                    Matrix::gauss(&mut input_rng, resolved.samples * 4, resolved.m, 0.0, 1.0)?;
                let teacher = train_task.teacher.as_ref().expect("recovery task");
                let targets = teacher.predict(&inputs)?;
                Dataset::new(inputs, targets)?
            };
            let mut model = build_model(&resolved, &train_task)?;
            let opts = TrainOptions {
                epochs: resolved.epochs,
                algo: resolved.optimizer,
                hyper: resolved.hyper(),
                recompute: resolved.recompute,
                batch_size: resolved.batch_size,
            };
            let report = train_run(&mut model, &train_task.data, &opts)?;
            let val_loss = model.evaluate(&val_task.inputs, &val_task.targets)?;
            gaps[slot] += (val_loss - report.final_loss) / seeds as f64;
        }
    }
    Ok(RegularizationReport {
        seeds,
        lora_mean_gap: gaps[0],
        lora_sp_mean_gap: gaps[1],
        sp_gap_leq_lora: gaps[1] <= gaps[0],
    })
}
