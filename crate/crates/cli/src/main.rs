//! Command-line entry point: run and compare fine-tuning methods on
//! synthetic tasks, query the cost model, and verify gradients and
//! quantization from the shell.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 invariant cross-check failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use lorasp_core::costmodel::{self, BasePrecision, Method};
use lorasp_core::quant;
use lorasp_core::runner::{self, CompareReport, ReportFormat, RunConfig, TaskKind};
use lorasp_core::selection::MaskScheme;
use lorasp_core::tensor::Matrix;
use lorasp_core::train::{Activation, OptAlgo};
use lorasp_core::{Error, RngState};

#[derive(Parser)]
#[command(
    name = "lorasp",
    version,
    about = "Half-selective low-rank adapter toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one method on a synthetic task and write a report.
    Run(RunArgs),
    /// Train several methods on the same task and compare them.
    Compare(CompareArgs),
    /// Analytic parameter counts and memory for a preset or a spec file.
    Cost(CostArgs),
    /// Finite-difference check of the reverse-mode gradients on random
    /// small models.
    Gradcheck(GradcheckArgs),
    /// Round-trip and error-bound checks of the block-wise quantizer.
    Quantcheck(QuantcheckArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_mask: Option<u64>,
    /// Task override: low-rank-recovery | toy-classify.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Mask scheme: global-random | row-balanced.
    #[arg(long)]
    mask_scheme: Option<String>,
    /// Optimizer: adamw | sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Selective activation recomputation: on | off.
    #[arg(long)]
    recompute: Option<String>,
    /// Quantize the frozen base weights: on | off.
    #[arg(long)]
    quantize_base: Option<String>,
    /// Include a finite-difference sweep in the report: on | off.
    #[arg(long)]
    gradcheck: Option<String>,
    /// Keep frozen entries in the forward product and gate only the
    /// updates: on | off (off = frozen entries are excluded from the
    /// product).
    #[arg(long)]
    freeze_only_gradients: Option<String>,
    /// Nonlinearity between layers: tanh | identity.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    hidden_rank: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Method to train: ft | lora | lorasp.
    #[arg(long)]
    method: Option<String>,
    /// Output directory for report artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Report format: json | csv | table.
    #[arg(long, default_value = "json")]
    format: String,
    /// Also write per-layer adapter checkpoints under <out>/adapters/.
    #[arg(long)]
    save_adapters: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated methods to compare.
    #[arg(long, value_delimiter = ',', default_value = "ft,lora,lorasp")]
    methods: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args)]
struct CostArgs {
    /// Named preset (roberta-base, roberta-large, t5-base, t5-large,
    /// llama-7b, llama-13b).
    #[arg(long)]
    preset: Option<String>,
    /// JSON file holding an architecture spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "adamw")]
    optimizer: String,
    /// Base precision for the breakdown: f64 | f32 | nf4.
    #[arg(long, default_value = "nf4")]
    precision: String,
    /// json | table (table adds the published-count comparison).
    #[arg(long, default_value = "table")]
    format: String,
    /// Write the JSON report here as well as printing.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    models: usize,
    #[arg(long, default_value_t = 16)]
    dim_max: usize,
    #[arg(long, default_value_t = 4)]
    rank_max: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct QuantcheckArgs {
    #[arg(long, default_value_t = 64)]
    rows: usize,
    #[arg(long, default_value_t = 64)]
    cols: usize,
    #[arg(long, default_value_t = 64)]
    block: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::Cost(args) => cmd_cost(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Quantcheck(args) => cmd_quantcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Param(_)
        | Error::Format(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::Shape { .. } => 2,
        Error::Numeric(_) | Error::State(_) => 3,
        Error::CrossCheck(_) => 4,
    }
}

fn parse_switch(name: &str, value: &str) -> Result<bool, Error> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Param(format!(
            "--{name} expects on|off, got '{other}'"
        ))),
    }
}

fn load_config(common: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed_data {
        cfg.seed_data = v;
    }
    if let Some(v) = common.seed_init {
        cfg.seed_init = v;
    }
    if let Some(v) = common.seed_mask {
        cfg.seed_mask = v;
    }
    if let Some(v) = &common.task {
        cfg.task = TaskKind::from_str(v)?;
    }
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.lr {
        cfg.lr = v;
    }
    if let Some(v) = common.rank {
        cfg.rank = v;
    }
    if let Some(v) = common.alpha {
        cfg.alpha = Some(v);
    }
    if let Some(v) = &common.mask_scheme {
        cfg.mask_scheme = MaskScheme::from_str(v)?;
    }
    if let Some(v) = &common.optimizer {
        cfg.optimizer = OptAlgo::from_str(v)?;
    }
    if let Some(v) = &common.recompute {
        cfg.recompute = parse_switch("recompute", v)?;
    }
    if let Some(v) = &common.quantize_base {
        cfg.quantize_base = parse_switch("quantize-base", v)?;
    }
    if let Some(v) = &common.gradcheck {
        cfg.gradcheck = parse_switch("gradcheck", v)?;
    }
    if let Some(v) = &common.freeze_only_gradients {
        cfg.freeze_only_gradients = parse_switch("freeze-only-gradients", v)?;
    }
    if let Some(v) = &common.activation {
        cfg.chain_activation = match v.as_str() {
            "tanh" => Activation::Tanh,
            "identity" | "linear" => Activation::Identity,
            other => return Err(Error::Param(format!("unknown activation '{other}'"))),
        };
    }
    if let Some(v) = common.m {
        cfg.m = v;
    }
    if let Some(v) = common.n {
        cfg.n = v;
    }
    if let Some(v) = common.depth {
        cfg.depth = v;
    }
    if let Some(v) = common.samples {
        cfg.samples = v;
    }
    if let Some(v) = common.noise_std {
        cfg.noise_std = v;
    }
    if let Some(v) = common.hidden_rank {
        cfg.hidden_rank = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_and_print(report: &CompareReport, format: &str, out: &PathBuf) -> Result<(), Error> {
    let format = ReportFormat::from_str(format)?;
    runner::emit_report(report, format, out)?;
    print!("{}", runner::rows_to_table(&runner::metrics_rows(report)));
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Error> {
    let mut cfg = load_config(&args.common)?;
    if let Some(m) = &args.method {
        cfg.method = Method::from_str(m)?;
    }
    let report = if args.save_adapters {
        let (result, model) = runner::run_one_trained(&cfg)?;
        runner::save_adapters(&model, args.out.join("adapters"))?;
        runner::CompareReport {
            manifest: runner::manifest_for(&cfg)?,
            base_config: cfg.resolved(),
            runs: vec![result],
        }
    } else {
        runner::run_compare(&cfg, &[cfg.method])?
    };
    emit_and_print(&report, &args.format, &args.out)?;
    if let Some(gc) = &report.runs[0].gradcheck {
        println!(
            "gradcheck: {}/{} entries ok (worst rel err {:.3e})",
            gc.checked - gc.failures,
            gc.checked,
            gc.worst_rel_err
        );
        if !gc.passed() {
            return Err(Error::Numeric("gradient check failed".into()));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&args.common)?;
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| Method::from_str(m))
        .collect::<Result<_, _>>()?;
    let report = runner::run_compare(&cfg, &methods)?;
    emit_and_print(&report, &args.format, &args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_cost(args: CostArgs) -> Result<ExitCode, Error> {
    let optimizer = OptAlgo::from_str(&args.optimizer)?;
    let precision = match args.precision.as_str() {
        "f64" => BasePrecision::F64,
        "f32" => BasePrecision::F32,
        "nf4" => BasePrecision::Nf4,
        other => return Err(Error::Param(format!("unknown precision '{other}'"))),
    };

    let (reports, check) = match (&args.preset, &args.spec) {
        (Some(name), None) => {
            let preset = costmodel::find_preset(name)?;
            let mut reports = Vec::new();
            for method in [Method::Ft, Method::Lora, Method::LoraSp] {
                // full fine-tuning cannot run on 4-bit weights
                let p = if method == Method::Ft {
                    BasePrecision::F64
                } else {
                    precision
                };
                reports.push(costmodel::memory_breakdown(
                    &preset.arch_spec(method, p),
                    optimizer,
                )?);
            }
            (reports, Some(costmodel::table_check(name)?))
        }
        (None, Some(path)) => {
            let spec: costmodel::ArchSpec = serde_json::from_slice(&std::fs::read(path)?)?;
            (vec![costmodel::memory_breakdown(&spec, optimizer)?], None)
        }
        _ => {
            return Err(Error::Param(
                "cost needs exactly one of --preset or --spec".into(),
            ))
        }
    };

    let payload = serde_json::json!({ "reports": reports, "table_check": check });
    let json = serde_json::to_string_pretty(&payload)?;
    match args.format.as_str() {
        "json" => println!("{json}"),
        "table" | "text" => {
            println!(
                "{:>8}  {:>14} {:>14} {:>16} {:>14} {:>12} {:>12}",
                "method",
                "trainable",
                "total",
                "opt state B",
                "weight B",
                "act B(off)",
                "act B(on)"
            );
            for r in &reports {
                println!(
                    "{:>8}  {:>14} {:>14} {:>16} {:>14} {:>12} {:>12}",
                    r.method.as_str(),
                    r.trainable_params,
                    r.total_params,
                    r.optimizer_state_bytes,
                    r.weight_bytes,
                    r.activation_bytes_per_token_recompute_off,
                    r.activation_bytes_per_token_recompute_on
                );
            }
            if let Some(c) = &check {
                println!();
                println!(
                    "{}: computed lora {} vs published {} (gap {:.2}%); lora-sp {} vs {} (gap {:.2}%); ratio computed {:.4}, published {:.4}",
                    c.preset,
                    costmodel::format_millions(c.computed_lora),
                    costmodel::format_millions(c.paper_lora),
                    c.gap_lora * 100.0,
                    costmodel::format_millions(c.computed_lora_sp),
                    costmodel::format_millions(c.paper_lora_sp),
                    c.gap_lora_sp * 100.0,
                    c.computed_ratio,
                    c.paper_ratio
                );
            }
        }
        other => return Err(Error::Param(format!("unknown format '{other}'"))),
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cost.json"), format!("{json}\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    if args.dim_max < 2 || args.rank_max == 0 || args.models == 0 {
        return Err(Error::Param(
            "gradcheck needs models >= 1, dim-max >= 2, rank-max >= 1".into(),
        ));
    }
    let results = runner::gradcheck_suite(args.seed, args.models, args.dim_max, args.rank_max)?;
    let mut all_ok = true;
    for (i, (cfg, report)) in results.iter().enumerate() {
        let status = if report.passed() { "ok" } else { "FAIL" };
        all_ok &= report.passed();
        println!(
            "model {i:>2}: dims {}x{} depth {} rank {} -> {status} ({} entries, worst rel err {:.3e})",
            cfg.m, cfg.n, cfg.depth, cfg.rank, report.checked, report.worst_rel_err
        );
    }
    if all_ok {
        println!("gradcheck passed: {} models", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numeric("finite-difference check failed".into()))
    }
}

fn cmd_quantcheck(args: QuantcheckArgs) -> Result<ExitCode, Error> {
    if args.rows == 0 || args.cols == 0 || args.block == 0 {
        return Err(Error::Param(
            "quantcheck needs positive rows, cols, block".into(),
        ));
    }
    let mut rng = RngState::new(args.seed);
    let w = Matrix::gauss(&mut rng, args.rows, args.cols, 0.0, 1.0)?;
    let q = quant::quantize(&w, args.block)?;
    let stats = quant::quant_error(&w, args.block)?;
    println!(
        "quantize {}x{} block {}: rmse {:.6}, max abs err {:.6}",
        args.rows, args.cols, args.block, stats.rmse, stats.max_abs
    );

    // per-block bound: |err| <= scale * half the widest codebook gap
    let half_gap = quant::codebook_half_max_gap();
    let back = q.dequantize();
    let mut bound_ok = true;
    for (i, (a, b)) in w.data().iter().zip(back.data()).enumerate() {
        let scale = q.scales()[i / args.block];
        if (a - b).abs() > scale * half_gap * (1.0 + 1e-12) {
            bound_ok = false;
            break;
        }
    }
    println!(
        "per-block error bound: {}",
        if bound_ok { "ok" } else { "VIOLATED" }
    );

    let q2 = quant::quantize(&back, args.block)?;
    let idempotent = q2 == q && q2.dequantize() == back;
    println!(
        "lattice idempotence: {}",
        if idempotent { "ok" } else { "VIOLATED" }
    );

    if bound_ok && idempotent {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numeric("quantization check failed".into()))
    }
}
