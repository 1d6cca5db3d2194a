//! Masked low-rank adapters and the layers that carry them.
//!
//! An [`AdapterPair`] holds factors `a` (m x r) and `b` (n x r) with one
//! selection mask each. The weight update is
//!
//! ```text
//! delta_w = scale * (a o mask_a) * (b o mask_b)^T        scale = alpha / r
//! ```
//!
//! where `o` is the element-wise product. Frozen entries are excluded from
//! the product itself (value masking), so they receive zero gradient by
//! construction. Setting `freeze_only_gradients` switches to the alternative
//! reading: factors enter the forward unmasked and only optimizer updates are
//! gated.
//!
//! An [`AdaptedLayer`] pairs an adapter with a frozen base weight, dense or
//! quantized, and maps a batch of row vectors through
//! `y = x * (base + delta_w)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::rng::RngState;
use crate::selection::{make_mask, MaskScheme, SelectionMask};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair {
    a: Matrix,
    b: Matrix,
    mask_a: SelectionMask,
    mask_b: SelectionMask,
    rank: usize,
    alpha: f64,
    freeze_only_gradients: bool,
}

/// Initialize an adapter for an `m x n` base weight: `a` is Gaussian with
/// variance 1/r, `b` starts at zero (so `delta_w` starts at zero), and both
/// masks are drawn fresh from `rng` with the given scheme.
pub fn init_adapter(
    m: usize,
    n: usize,
    rank: usize,
    alpha: f64,
    scheme: MaskScheme,
    rng: &mut RngState,
) -> Result<AdapterPair> {
    if rank == 0 || rank > m.min(n) {
        return Err(Error::Param(format!(
            "rank {rank} out of range for a {m}x{n} base (must be 1..=min(m,n))"
        )));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Param(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    let std = (1.0 / rank as f64).sqrt();
    let a = Matrix::gauss(rng, m, rank, 0.0, std)?;
    let b = Matrix::zeros(n, rank);
    let mask_a = make_mask(m, rank, scheme, rng)?;
    let mask_b = make_mask(n, rank, scheme, rng)?;
    Ok(AdapterPair {
        a,
        b,
        mask_a,
        mask_b,
        rank,
        alpha,
        freeze_only_gradients: false,
    })
}

impl AdapterPair {
    /// Assemble from parts; used by checkpoint loading and tests.
    pub fn from_parts(
        a: Matrix,
        b: Matrix,
        mask_a: SelectionMask,
        mask_b: SelectionMask,
        alpha: f64,
        freeze_only_gradients: bool,
    ) -> Result<AdapterPair> {
        let rank = a.cols();
        if b.cols() != rank {
            return Err(Error::shape("adapter factors", a.shape(), b.shape()));
        }
        if mask_a.shape() != a.shape() {
            return Err(Error::shape("adapter mask_a", mask_a.shape(), a.shape()));
        }
        if mask_b.shape() != b.shape() {
            return Err(Error::shape("adapter mask_b", mask_b.shape(), b.shape()));
        }
        if rank == 0 || rank > a.rows().min(b.rows()) {
            return Err(Error::Param(format!("rank {rank} out of range")));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Param(format!(
                "alpha must be positive and finite, got {alpha}"
            )));
        }
        Ok(AdapterPair {
            a,
            b,
            mask_a,
            mask_b,
            rank,
            alpha,
            freeze_only_gradients,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn freeze_only_gradients(&self) -> bool {
        self.freeze_only_gradients
    }

    pub fn set_freeze_only_gradients(&mut self, on: bool) {
        self.freeze_only_gradients = on;
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub(crate) fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub(crate) fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn mask_a(&self) -> &SelectionMask {
        &self.mask_a
    }

    pub fn mask_b(&self) -> &SelectionMask {
        &self.mask_b
    }

    /// Factor `a` as it enters the forward product.
    pub fn effective_a(&self) -> Result<Matrix> {
        if self.freeze_only_gradients {
            Ok(self.a.clone())
        } else {
            self.mask_a.apply(&self.a)
        }
    }

    /// Factor `b` as it enters the forward product.
    pub fn effective_b(&self) -> Result<Matrix> {
        if self.freeze_only_gradients {
            Ok(self.b.clone())
        } else {
            self.mask_b.apply(&self.b)
        }
    }

    /// The dense weight update `scale * eff_a * eff_b^T`, shape (m, n).
    pub fn delta_w(&self) -> Result<Matrix> {
        let ea = self.effective_a()?;
        let eb = self.effective_b()?;
        Ok(ea.matmul(&eb.transpose())?.scale(self.scale()))
    }

    /// Number of entries the optimizer may touch.
    pub fn trainable_count(&self) -> usize {
        self.mask_a.ones_count() + self.mask_b.ones_count()
    }

    pub fn total_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Frozen base weight: full-precision or block-quantized.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseWeight {
    Dense(Matrix),
    Quantized(QuantizedTensor),
}

impl BaseWeight {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            BaseWeight::Dense(m) => m.shape(),
            BaseWeight::Quantized(q) => q.shape(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, BaseWeight::Quantized(_))
    }

    /// Dense view of the base weight. Quantized bases are decoded; dense
    /// bases are returned as-is (cloned).
    pub fn to_dense(&self) -> Matrix {
        match self {
            BaseWeight::Dense(m) => m.clone(),
            BaseWeight::Quantized(q) => q.dequantize(),
        }
    }
}

/// How a layer participates in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerMode {
    /// Masked adapter: only the selected half of each factor trains.
    LoraSp,
    /// Plain low-rank adapter, represented as LoraSp with all-ones masks.
    Lora,
    /// Nothing trains; the layer is base plus whatever the adapter holds.
    Frozen,
    /// The base weight itself trains; the adapter is inert. Requires a dense
    /// base.
    FullFineTune,
}

impl LayerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerMode::LoraSp => "lora-sp",
            LayerMode::Lora => "lora",
            LayerMode::Frozen => "frozen",
            LayerMode::FullFineTune => "full-fine-tune",
        }
    }
}

impl std::str::FromStr for LayerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora-sp" | "lora_sp" | "lorasp" => Ok(LayerMode::LoraSp),
            "lora" => Ok(LayerMode::Lora),
            "frozen" => Ok(LayerMode::Frozen),
            "full-fine-tune" | "ft" => Ok(LayerMode::FullFineTune),
            other => Err(Error::Param(format!("unknown layer mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLayer {
    base: BaseWeight,
    adapter: AdapterPair,
    mode: LayerMode,
}

impl AdaptedLayer {
    pub fn new(base: BaseWeight, adapter: AdapterPair, mode: LayerMode) -> Result<AdaptedLayer> {
        let (m, n) = base.shape();
        if adapter.in_dim() != m || adapter.out_dim() != n {
            return Err(Error::shape(
                "adapted layer",
                base.shape(),
                (adapter.in_dim(), adapter.out_dim()),
            ));
        }
        if mode == LayerMode::Lora {
            let all_ones = adapter.mask_a.ones_count() == adapter.mask_a.len()
                && adapter.mask_b.ones_count() == adapter.mask_b.len();
            if !all_ones {
                return Err(Error::Param(
                    "mode Lora requires all-ones masks (it is the exact all-ones reduction)".into(),
                ));
            }
        }
        if mode == LayerMode::FullFineTune && base.is_quantized() {
            return Err(Error::Param(
                "full fine-tuning requires a dense base weight; 4-bit codes cannot take gradient steps"
                    .into(),
            ));
        }
        Ok(AdaptedLayer {
            base,
            adapter,
            mode,
        })
    }

    pub fn base(&self) -> &BaseWeight {
        &self.base
    }

    pub(crate) fn base_mut(&mut self) -> &mut BaseWeight {
        &mut self.base
    }

    pub fn adapter(&self) -> &AdapterPair {
        &self.adapter
    }

    pub(crate) fn adapter_mut(&mut self) -> &mut AdapterPair {
        &mut self.adapter
    }

    pub fn mode(&self) -> LayerMode {
        self.mode
    }

    pub fn in_dim(&self) -> usize {
        self.base.shape().0
    }

    pub fn out_dim(&self) -> usize {
        self.base.shape().1
    }

    /// Whether the adapter contributes to this layer's forward map.
    pub fn adapter_active(&self) -> bool {
        matches!(self.mode, LayerMode::LoraSp | LayerMode::Lora)
    }

    pub fn trainable_count(&self) -> usize {
        match self.mode {
            LayerMode::LoraSp | LayerMode::Lora => self.adapter.trainable_count(),
            LayerMode::Frozen => 0,
            LayerMode::FullFineTune => self.in_dim() * self.out_dim(),
        }
    }

    /// Batch-major forward: one example per row of `x` (batch x m), output
    /// (batch x n). Computed in factored form, `x*base + scale*(x*ea)*eb^T`,
    /// so the dense update is never materialized.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("layer forward", x.shape(), self.base.shape()));
        }
        let base_out = x.matmul(&self.base.to_dense())?;
        if !self.adapter_active() {
            return Ok(base_out);
        }
        let mid = x.matmul(&self.adapter.effective_a()?)?;
        let update = mid
            .matmul(&self.adapter.effective_b()?.transpose())?
            .scale(self.adapter.scale());
        base_out.add(&update)
    }

    /// Fold the adapter into the base: `dense(base) + delta_w` for modes
    /// where the adapter is active, otherwise just the dense base. Forward
    /// with the merged weight reproduces `forward` up to rounding.
    pub fn merge(&self) -> Result<Matrix> {
        let dense = self.base.to_dense();
        if !self.adapter_active() {
            return Ok(dense);
        }
        dense.add(&self.adapter.delta_w()?)
    }

    /// Write the adapter checkpoint into `dir`: a JSON manifest plus binary
    /// blobs for the factors and masks. The base weight is not part of the
    /// checkpoint.
    pub fn save_adapter(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = AdapterManifest {
            format_version: 1,
            in_dim: self.in_dim(),
            out_dim: self.out_dim(),
            rank: self.adapter.rank,
            alpha: self.adapter.alpha,
            mode: self.mode,
            mask_scheme_a: self.adapter.mask_a.scheme(),
            mask_scheme_b: self.adapter.mask_b.scheme(),
            mask_seed_a: self.adapter.mask_a.seed(),
            mask_seed_b: self.adapter.mask_b.seed(),
            freeze_only_gradients: self.adapter.freeze_only_gradients,
            rng_algorithm: crate::rng::RNG_ALGORITHM.to_string(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        self.adapter.a.write_file(dir.join("a.lspm"))?;
        self.adapter.b.write_file(dir.join("b.lspm"))?;
        self.adapter.mask_a.write_file(dir.join("mask_a.lsps"))?;
        self.adapter.mask_b.write_file(dir.join("mask_b.lsps"))?;
        Ok(())
    }

    /// Rebuild a layer from a checkpoint directory plus the base weight it
    /// was trained against.
    pub fn load_adapter(dir: impl AsRef<Path>, base: BaseWeight) -> Result<AdaptedLayer> {
        let dir = dir.as_ref();
        let manifest: AdapterManifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != 1 {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let a = Matrix::read_file(dir.join("a.lspm"))?;
        let b = Matrix::read_file(dir.join("b.lspm"))?;
        let mask_a = SelectionMask::read_file(dir.join("mask_a.lsps"))?;
        let mask_b = SelectionMask::read_file(dir.join("mask_b.lsps"))?;
        if (manifest.in_dim, manifest.out_dim) != base.shape() {
            return Err(Error::shape(
                "checkpoint base",
                (manifest.in_dim, manifest.out_dim),
                base.shape(),
            ));
        }
        let adapter = AdapterPair::from_parts(
            a,
            b,
            mask_a,
            mask_b,
            manifest.alpha,
            manifest.freeze_only_gradients,
        )?;
        if adapter.rank() != manifest.rank {
            return Err(Error::Format(format!(
                "manifest rank {} does not match blob rank {}",
                manifest.rank,
                adapter.rank()
            )));
        }
        AdaptedLayer::new(base, adapter, manifest.mode)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterManifest {
    format_version: u32,
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    alpha: f64,
    mode: LayerMode,
    mask_scheme_a: MaskScheme,
    mask_scheme_b: MaskScheme,
    mask_seed_a: u64,
    mask_seed_b: u64,
    freeze_only_gradients: bool,
    rng_algorithm: String,
}
