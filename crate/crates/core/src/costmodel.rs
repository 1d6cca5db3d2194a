//! Analytic parameter and memory accounting for full fine-tuning, plain
//! low-rank adapters, and the half-selective variant.
//!
//! Counting rules per adapted matrix of shape (in, out) at rank r:
//!
//! - full fine-tuning: `in * out` (every entry trains)
//! - plain adapters: `r * (in + out)`
//! - half-selective: `floor(r*in / 2) + floor(r*out / 2)`, one floor per
//!   factor, matching the mask cardinality actually enforced in training.
//!
//! The per-factor floors sum to exactly half the plain-adapter count whenever
//! each factor's entry count is even, which holds for every even rank; with
//! an odd rank and odd dims the two can differ by the odd-count rounding.
//!
//! Totals follow the published convention of counting the trainable adapter
//! parameters into the model total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::OptAlgo;

/// Versioned preset table shipped with the crate.
const PRESETS_JSON: &str = include_str!("../data/presets.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Q,
    K,
    V,
    O,
    FfnIn,
    FfnOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub role: Role,
    pub in_dim: u64,
    pub out_dim: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ft,
    Lora,
    LoraSp,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Lora => "lora",
            Method::LoraSp => "lora-sp",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ft" | "full" => Ok(Method::Ft),
            "lora" => Ok(Method::Lora),
            "lorasp" | "lora-sp" | "lora_sp" => Ok(Method::LoraSp),
            other => Err(Error::Param(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePrecision {
    F64,
    F32,
    Nf4,
}

/// Architecture description: `layers` stacked copies of the adapted role
/// set. `base_params` optionally pins the whole-network parameter count when
/// it is known (presets); otherwise the adapted matrices are the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: u64,
    pub hidden_dim: u64,
    pub roles: Vec<RoleSpec>,
    pub rank: u64,
    pub method: Method,
    pub base_precision: BasePrecision,
    #[serde(default)]
    pub base_params: Option<u64>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.rank == 0 {
            return Err(Error::Param(
                "layers, hidden_dim and rank must be positive".into(),
            ));
        }
        if self.roles.is_empty() {
            return Err(Error::Param("at least one adapted role is required".into()));
        }
        for r in &self.roles {
            if r.in_dim == 0 || r.out_dim == 0 {
                return Err(Error::Param("role dimensions must be positive".into()));
            }
            if self.rank > r.in_dim.min(r.out_dim) {
                return Err(Error::Param(format!(
                    "rank {} exceeds the smaller dimension of a {}x{} role",
                    self.rank, r.in_dim, r.out_dim
                )));
            }
        }
        if self.method == Method::Ft && self.base_precision == BasePrecision::Nf4 {
            return Err(Error::Param(
                "full fine-tuning cannot run on 4-bit base weights".into(),
            ));
        }
        Ok(())
    }

    /// Entries across the adapted matrices (the trainable surface under FT
    /// when no whole-network count is pinned).
    fn adapted_entries(&self) -> u64 {
        self.layers * self.roles.iter().map(|r| r.in_dim * r.out_dim).sum::<u64>()
    }

    fn base_entries(&self) -> u64 {
        self.base_params.unwrap_or_else(|| self.adapted_entries())
    }
}

/// Trainable-parameter count for the architecture's method.
pub fn count_trainable(spec: &ArchSpec) -> Result<u64> {
    spec.validate()?;
    Ok(match spec.method {
        Method::Ft => spec.base_entries(),
        Method::Lora => {
            spec.layers
                * spec
                    .roles
                    .iter()
                    .map(|r| spec.rank * (r.in_dim + r.out_dim))
                    .sum::<u64>()
        }
        Method::LoraSp => {
            spec.layers
                * spec
                    .roles
                    .iter()
                    .map(|r| (spec.rank * r.in_dim) / 2 + (spec.rank * r.out_dim) / 2)
                    .sum::<u64>()
        }
    })
}

/// Counts and memory for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub trainable_params: u64,
    pub total_params: u64,
    pub optimizer_state_bytes: u64,
    pub weight_bytes: u64,
    pub activation_bytes_per_token_recompute_off: u64,
    pub activation_bytes_per_token_recompute_on: u64,
}

/// Serialized size of an nf4 block-quantized buffer: packed 4-bit codes plus
/// one f64 scale per 64-entry block.
fn nf4_bytes(entries: u64) -> u64 {
    entries.div_ceil(2) + entries.div_ceil(64) * 8
}

fn weight_bytes_at(entries: u64, precision: BasePrecision) -> u64 {
    match precision {
        BasePrecision::F64 => entries * 8,
        BasePrecision::F32 => entries * 4,
        BasePrecision::Nf4 => nf4_bytes(entries),
    }
}

/// Full memory breakdown. Activation bytes use the trainer's ledger model on
/// the adapted matrices viewed as a chain: with recomputation only each
/// matrix's input row is retained; without it the factor product, base
/// product, pre-activation and activation are all held.
pub fn memory_breakdown(spec: &ArchSpec, optimizer: OptAlgo) -> Result<CostReport> {
    spec.validate()?;
    let trainable = count_trainable(spec)?;
    let adapter_entries: u64 = match spec.method {
        Method::Ft => 0,
        // both halves of both factors exist in memory regardless of method
        Method::Lora | Method::LoraSp => {
            spec.layers
                * spec
                    .roles
                    .iter()
                    .map(|r| spec.rank * (r.in_dim + r.out_dim))
                    .sum::<u64>()
        }
    };
    let total_params = match spec.method {
        Method::Ft => spec.base_entries(),
        // published tables fold the trainable adapter count into the total
        Method::Lora | Method::LoraSp => spec.base_entries() + trainable,
    };
    let weight_bytes =
        weight_bytes_at(spec.base_entries(), spec.base_precision) + adapter_entries * 8;
    let optimizer_state_bytes = match optimizer {
        OptAlgo::AdamW => 2 * trainable * 8,
        OptAlgo::Sgd => 0,
    };

    let adapter_active = spec.method != Method::Ft;
    let mut act_on = 0u64;
    let mut act_off = 0u64;
    for (i, r) in (0..spec.layers)
        .flat_map(|_| spec.roles.iter().enumerate())
        .enumerate()
    {
        let (_, role) = r;
        act_on += role.in_dim * 8;
        let mid = if adapter_active { spec.rank } else { 0 };
        let first_input = if i == 0 { role.in_dim } else { 0 };
        act_off += (first_input + mid + 3 * role.out_dim) * 8;
    }

    Ok(CostReport {
        method: spec.method,
        trainable_params: trainable,
        total_params,
        optimizer_state_bytes,
        weight_bytes,
        activation_bytes_per_token_recompute_off: act_off,
        activation_bytes_per_token_recompute_on: act_on,
    })
}

/// One architecture preset plus the published counts to check against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub layers: u64,
    pub hidden_dim: u64,
    pub rank: u64,
    pub roles: Vec<RoleSpec>,
    pub base_params: u64,
    pub paper_ft: u64,
    pub paper_lora: u64,
    pub paper_lora_sp: u64,
    #[serde(default)]
    pub paper_total_lora: Option<u64>,
    #[serde(default)]
    pub paper_total_lora_sp: Option<u64>,
}

impl Preset {
    pub fn arch_spec(&self, method: Method, precision: BasePrecision) -> ArchSpec {
        ArchSpec {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            roles: self.roles.clone(),
            rank: self.rank,
            method,
            base_precision: precision,
            base_params: Some(self.base_params),
        }
    }
}

#[derive(Debug, Deserialize)]
struct PresetFile {
    version: u32,
    presets: Vec<Preset>,
}

/// All shipped presets.
pub fn presets() -> Vec<Preset> {
    let file: PresetFile = serde_json::from_str(PRESETS_JSON).expect("shipped presets parse");
    assert_eq!(file.version, 1, "preset table version");
    file.presets
}

pub fn preset_names() -> Vec<String> {
    presets().into_iter().map(|p| p.name).collect()
}

pub fn find_preset(name: &str) -> Result<Preset> {
    let normalized = name.to_ascii_lowercase().replace('_', "-");
    presets()
        .into_iter()
        .find(|p| p.name == normalized)
        .ok_or_else(|| {
            Error::Param(format!(
                "unknown preset '{name}' (try one of {:?})",
                preset_names()
            ))
        })
}

/// Computed counts next to the published ones, with relative gaps. Gaps are
/// reported, never used to fail: the published tables do not state which
/// matrices were adapted, so disagreement is informative, not fatal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCheck {
    pub preset: String,
    pub rank: u64,
    pub computed_ft: u64,
    pub computed_lora: u64,
    pub computed_lora_sp: u64,
    pub paper_ft: u64,
    pub paper_lora: u64,
    pub paper_lora_sp: u64,
    /// |computed - paper| / paper
    pub gap_lora: f64,
    pub gap_lora_sp: f64,
    /// lora-sp / lora, computed counts
    pub computed_ratio: f64,
    /// lora-sp / lora, published counts
    pub paper_ratio: f64,
}

pub fn table_check(name: &str) -> Result<TableCheck> {
    let preset = find_preset(name)?;
    let lora = count_trainable(&preset.arch_spec(Method::Lora, BasePrecision::F64))?;
    let sp = count_trainable(&preset.arch_spec(Method::LoraSp, BasePrecision::F64))?;
    let ft = count_trainable(&preset.arch_spec(Method::Ft, BasePrecision::F64))?;
    let gap = |computed: u64, paper: u64| (computed as f64 - paper as f64).abs() / paper as f64;
    Ok(TableCheck {
        preset: preset.name.clone(),
        rank: preset.rank,
        computed_ft: ft,
        computed_lora: lora,
        computed_lora_sp: sp,
        paper_ft: preset.paper_ft,
        paper_lora: preset.paper_lora,
        paper_lora_sp: preset.paper_lora_sp,
        gap_lora: gap(lora, preset.paper_lora),
        gap_lora_sp: gap(sp, preset.paper_lora_sp),
        computed_ratio: sp as f64 / lora as f64,
        paper_ratio: preset.paper_lora_sp as f64 / preset.paper_lora as f64,
    })
}

/// Format a count the way the tables do: millions with one decimal.
pub fn format_millions(count: u64) -> String {
    format!("{:.1}M", count as f64 / 1.0e6)
}
