//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with:
//!
//! ```text
//! cargo test -p lorasp-core --test acceptance -- --test-threads=1 --nocapture
//! ```
//!
//! Criterion 7 (convergence parity at rank 4) is a known red: the
//! half-selective masked update cannot represent a generic dense rank-2
//! perturbation at rank 4, so its training loss floors well above the plain
//! adapter's. The test prints the measured medians; the README's "known
//! red" section carries the expressivity argument.

use std::time::Instant;

use lorasp_core::costmodel::{self, ArchSpec, BasePrecision, Method, Role, RoleSpec};
use lorasp_core::quant::{codebook_half_max_gap, quant_error, quantize, CODEBOOK};
use lorasp_core::runner::{self, gradcheck_suite, RunConfig};
use lorasp_core::tensor::Matrix;
use lorasp_core::train::{Hyper, OptAlgo, OptState, TapeConfig};
use lorasp_core::RngState;

fn pass(n: u32, what: &str, detail: String) {
    println!("[PASS] criterion {n}: {what} - {detail}");
}

/// Criterion 1: exact halving across random architectures; published-table
/// reproduction for the base preset, gaps reported for the rest. Under 1 s.
#[test]
fn criterion_1_parameter_halving() {
    let start = Instant::now();
    let mut rng = RngState::new(0xC1);
    for i in 0..50 {
        let layers = 1 + rng.next_below(40);
        let rank = 2 * (1 + rng.next_below(16)); // even ranks, paper-style
        let n_roles = 1 + rng.next_below(6) as usize;
        let all_roles = [
            Role::Q,
            Role::K,
            Role::V,
            Role::O,
            Role::FfnIn,
            Role::FfnOut,
        ];
        let roles: Vec<RoleSpec> = (0..n_roles)
            .map(|r| RoleSpec {
                role: all_roles[r],
                in_dim: rank + 1 + rng.next_below(4096),
                out_dim: rank + 1 + rng.next_below(4096),
            })
            .collect();
        let mk = |method| ArchSpec {
            layers,
            hidden_dim: 64,
            roles: roles.clone(),
            rank,
            method,
            base_precision: BasePrecision::F64,
            base_params: None,
        };
        let lora = costmodel::count_trainable(&mk(Method::Lora)).unwrap();
        let sp = costmodel::count_trainable(&mk(Method::LoraSp)).unwrap();
        assert_eq!(sp, lora / 2, "spec {i}: halving must be exact");
    }

    let base = costmodel::table_check("roberta-base").unwrap();
    assert!(base.gap_lora < 0.03, "base pair gap {}", base.gap_lora);
    assert!(
        base.gap_lora_sp < 0.03,
        "base pair gap {}",
        base.gap_lora_sp
    );

    let mut reported = Vec::new();
    for name in [
        "roberta-large",
        "t5-base",
        "t5-large",
        "llama-7b",
        "llama-13b",
    ] {
        let check = costmodel::table_check(name).unwrap();
        reported.push(format!("{name} gap {:.1}%", check.gap_lora * 100.0));
        assert!(check.computed_ratio > 0.49 && check.computed_ratio <= 0.5);
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    pass(
        1,
        "parameter halving",
        format!(
            "50 random architectures exact; base pair gaps ({:.2}%, {:.2}%); reported: {}",
            base.gap_lora * 100.0,
            base.gap_lora_sp * 100.0,
            reported.join(", ")
        ),
    );
}

/// Criterion 2: finite-difference agreement on 20 random small models.
/// Under 30 s.
#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let results = gradcheck_suite(0xC2, 20, 16, 4).unwrap();
    let mut worst = 0.0f64;
    for (cfg, report) in &results {
        assert!(
            report.passed(),
            "model {}x{} rank {}: {} of {} entries outside tolerance",
            cfg.m,
            cfg.n,
            cfg.rank,
            report.failures,
            report.checked
        );
        worst = worst.max(report.worst_rel_err);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    pass(
        2,
        "gradient correctness",
        format!("20 models, every entry within 1e-5 rel / 1e-8 abs (worst rel err {worst:.3e})"),
    );
}

/// Criterion 3: after 100 optimizer steps, frozen entries of the factors,
/// their moments, and the quantized base are bit-identical to
/// initialization. Exact equality.
#[test]
fn criterion_3_freezing() {
    let cfg = RunConfig {
        lr: 0.02,
        epochs: 100,
        quantize_base: true,
        ..RunConfig::default()
    };
    let resolved = cfg.resolved();
    let task = runner::gen_task(&resolved).unwrap();
    let mut model = runner::build_model(&resolved, &task).unwrap();

    let init: Vec<_> = model
        .layers()
        .iter()
        .map(|l| {
            let q = match l.base() {
                lorasp_core::adapter::BaseWeight::Quantized(q) => q.clone(),
                _ => panic!("default config quantizes the base"),
            };
            (l.adapter().a().clone(), l.adapter().b().clone(), q)
        })
        .collect();

    let mut opt = OptState::new(
        &model,
        OptAlgo::AdamW,
        Hyper {
            lr: 0.02,
            ..Hyper::default()
        },
    );
    for _ in 0..100 {
        let (_, mut tape) = model
            .forward_loss(
                &task.data.inputs,
                &task.data.targets,
                TapeConfig { recompute: true },
            )
            .unwrap();
        let grads = model.backward(&mut tape).unwrap();
        opt.step_model(&mut model, &grads).unwrap();
    }
    assert_eq!(opt.step_count(), 100);

    let mut frozen_checked = 0usize;
    let mut moved = 0usize;
    for (li, layer) in model.layers().iter().enumerate() {
        let adapter = layer.adapter();
        let (a0, b0, q0) = &init[li];
        match layer.base() {
            lorasp_core::adapter::BaseWeight::Quantized(q) => {
                assert_eq!(q.codes(), q0.codes(), "layer {li}: codes must not move");
                assert_eq!(q.scales(), q0.scales(), "layer {li}: scales must not move");
            }
            _ => unreachable!(),
        }
        let (ma, mb) = opt.adapter_moments(li);
        let (ma, mb) = (ma.unwrap(), mb.unwrap());
        for i in 0..adapter.in_dim() {
            for j in 0..adapter.rank() {
                if adapter.mask_a().is_selected(i, j) {
                    moved += (adapter.a().get(i, j).to_bits() != a0.get(i, j).to_bits()) as usize;
                } else {
                    frozen_checked += 1;
                    assert_eq!(adapter.a().get(i, j).to_bits(), a0.get(i, j).to_bits());
                    assert_eq!(ma.first_moment().get(i, j).to_bits(), 0.0f64.to_bits());
                    assert_eq!(ma.second_moment().get(i, j).to_bits(), 0.0f64.to_bits());
                }
            }
        }
        for i in 0..adapter.out_dim() {
            for j in 0..adapter.rank() {
                if adapter.mask_b().is_selected(i, j) {
                    moved += (adapter.b().get(i, j).to_bits() != b0.get(i, j).to_bits()) as usize;
                } else {
                    frozen_checked += 1;
                    assert_eq!(adapter.b().get(i, j).to_bits(), b0.get(i, j).to_bits());
                    assert_eq!(mb.first_moment().get(i, j).to_bits(), 0.0f64.to_bits());
                    assert_eq!(mb.second_moment().get(i, j).to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }
    assert!(moved > 0, "trainable entries should have moved");
    pass(
        3,
        "freezing",
        format!(
            "100 steps: {frozen_checked} frozen entries + moments + quantized codes/scales bit-identical ({moved} trainable entries moved)"
        ),
    );
}

/// Criterion 4: with all-ones masks, forward, backward and 10 optimizer
/// steps match an independently coded plain-adapter path bit for bit.
#[test]
fn criterion_4_plain_lora_reduction() {
    // independent path: explicit dot-product loops (inner index ascending,
    // the same reduction order the library fixes) and a straight-line AdamW
    struct Oracle {
        w: Matrix,
        a: Matrix,
        b: Matrix,
        scale: f64,
        ma: Matrix,
        va: Matrix,
        mb: Matrix,
        vb: Matrix,
    }
    fn mm(x: &Matrix, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), y.cols());
        for i in 0..x.rows() {
            for j in 0..y.cols() {
                let mut acc = 0.0;
                for k in 0..x.cols() {
                    acc += x.get(i, k) * y.get(k, j);
                }
                out = set(out, i, j, acc);
            }
        }
        out
    }
    fn mm_t(x: &Matrix, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), y.rows());
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                let mut acc = 0.0;
                for k in 0..x.cols() {
                    acc += x.get(i, k) * y.get(j, k);
                }
                out = set(out, i, j, acc);
            }
        }
        out
    }
    fn t_mm(x: &Matrix, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.cols(), y.cols());
        for i in 0..x.cols() {
            for j in 0..y.cols() {
                let mut acc = 0.0;
                for k in 0..x.rows() {
                    acc += x.get(k, i) * y.get(k, j);
                }
                out = set(out, i, j, acc);
            }
        }
        out
    }
    fn set(m: Matrix, i: usize, j: usize, v: f64) -> Matrix {
        let mut data = m.data().to_vec();
        data[i * m.cols() + j] = v;
        Matrix::from_vec(m.rows(), m.cols(), data).unwrap()
    }
    fn scale_m(x: &Matrix, s: f64) -> Matrix {
        let mut out = x.clone();
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                out = set(out, i, j, x.get(i, j) * s);
            }
        }
        out
    }
    impl Oracle {
        fn forward(&self, x: &Matrix, tanh: bool) -> (Matrix, Matrix) {
            let base_out = mm(x, &self.w);
            let mid = mm(x, &self.a);
            let update = scale_m(&mm_t(&mid, &self.b), self.scale);
            let pre = base_out.add(&update).unwrap();
            let out = if tanh { pre.map(f64::tanh) } else { pre };
            (mid, out)
        }
        fn backward(
            &self,
            x: &Matrix,
            mid: &Matrix,
            out: &Matrix,
            dz: &Matrix,
            tanh: bool,
        ) -> (Matrix, Matrix, Matrix) {
            let dy = if tanh {
                let deriv = out.map(|v| 1.0 - v * v);
                dz.hadamard(&deriv).unwrap()
            } else {
                dz.clone()
            };
            let d_mid = scale_m(&mm(&dy, &self.b), self.scale);
            let grad_b = scale_m(&t_mm(&dy, mid), self.scale);
            let grad_a = t_mm(x, &d_mid);
            let dx = mm_t(&dy, &self.w).add(&mm_t(&d_mid, &self.a)).unwrap();
            (grad_a, grad_b, dx)
        }
        fn adamw(&mut self, ga: &Matrix, gb: &Matrix, h: &Hyper, t: u64) {
            let bias1 = 1.0 - h.beta1.powi(t as i32);
            let bias2 = 1.0 - h.beta2.powi(t as i32);
            let upd = |p: &Matrix, g: &Matrix, m: &Matrix, v: &Matrix| {
                let (mut p, mut m, mut v) = (p.clone(), m.clone(), v.clone());
                for i in 0..p.rows() {
                    for j in 0..p.cols() {
                        let gij = g.get(i, j);
                        let mut pij = p.get(i, j);
                        pij *= 1.0 - h.lr * h.weight_decay;
                        let mij = h.beta1 * m.get(i, j) + (1.0 - h.beta1) * gij;
                        let vij = h.beta2 * v.get(i, j) + (1.0 - h.beta2) * gij * gij;
                        m = set(m, i, j, mij);
                        v = set(v, i, j, vij);
                        pij -= h.lr * (mij / bias1) / ((vij / bias2).sqrt() + h.eps);
                        p = set(p, i, j, pij);
                    }
                }
                (p, m, v)
            };
            let (a, ma, va) = upd(&self.a, ga, &self.ma, &self.va);
            let (b, mb, vb) = upd(&self.b, gb, &self.mb, &self.vb);
            self.a = a;
            self.ma = ma;
            self.va = va;
            self.b = b;
            self.mb = mb;
            self.vb = vb;
        }
    }

    let cfg = RunConfig {
        method: Method::Lora,
        m: 8,
        n: 8,
        depth: 2,
        samples: 12,
        rank: 3,
        hidden_rank: 2,
        quantize_base: false,
        lr: 0.02,
        ..RunConfig::default()
    };
    let resolved = cfg.resolved();
    let task = runner::gen_task(&resolved).unwrap();
    let mut model = runner::build_model(&resolved, &task).unwrap();

    let mut oracles: Vec<Oracle> = model
        .layers()
        .iter()
        .map(|l| Oracle {
            w: l.base().to_dense(),
            a: l.adapter().a().clone(),
            b: l.adapter().b().clone(),
            scale: l.adapter().scale(),
            ma: Matrix::zeros(l.adapter().in_dim(), l.adapter().rank()),
            va: Matrix::zeros(l.adapter().in_dim(), l.adapter().rank()),
            mb: Matrix::zeros(l.adapter().out_dim(), l.adapter().rank()),
            vb: Matrix::zeros(l.adapter().out_dim(), l.adapter().rank()),
        })
        .collect();

    let hyper = Hyper {
        lr: 0.02,
        ..Hyper::default()
    };
    let mut opt = OptState::new(&model, OptAlgo::AdamW, hyper);
    let x = &task.data.inputs;
    let target = &task.data.targets;

    for step in 1..=10u64 {
        let (loss, mut tape) = model
            .forward_loss(x, target, TapeConfig { recompute: false })
            .unwrap();
        let grads = model.backward(&mut tape).unwrap();

        // oracle forward: tanh after layer 0, linear output layer
        let (mid0, out0) = oracles[0].forward(x, true);
        let (mid1, out1) = oracles[1].forward(&out0, false);
        let n = out1.len() as f64;
        let oracle_loss = out1
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        assert_eq!(
            loss.to_bits(),
            oracle_loss.to_bits(),
            "step {step}: forward loss"
        );

        let dz = {
            let mut d = Matrix::zeros(out1.rows(), out1.cols());
            for i in 0..out1.rows() {
                for j in 0..out1.cols() {
                    d = set(d, i, j, 2.0 * (out1.get(i, j) - target.get(i, j)) / n);
                }
            }
            d
        };
        let (ga1, gb1, dx1) = oracles[1].backward(&out0, &mid1, &out1, &dz, false);
        let (ga0, gb0, _) = oracles[0].backward(x, &mid0, &out0, &dx1, true);
        assert_eq!(
            grads.layers[0].a.as_ref().unwrap(),
            &ga0,
            "step {step}: grad a0"
        );
        assert_eq!(
            grads.layers[0].b.as_ref().unwrap(),
            &gb0,
            "step {step}: grad b0"
        );
        assert_eq!(
            grads.layers[1].a.as_ref().unwrap(),
            &ga1,
            "step {step}: grad a1"
        );
        assert_eq!(
            grads.layers[1].b.as_ref().unwrap(),
            &gb1,
            "step {step}: grad b1"
        );

        opt.step_model(&mut model, &grads).unwrap();
        oracles[1].adamw(&ga1, &gb1, &hyper, step);
        oracles[0].adamw(&ga0, &gb0, &hyper, step);
        for (li, o) in oracles.iter().enumerate() {
            assert_eq!(
                model.layers()[li].adapter().a(),
                &o.a,
                "step {step}: layer {li} a"
            );
            assert_eq!(
                model.layers()[li].adapter().b(),
                &o.b,
                "step {step}: layer {li} b"
            );
        }
    }
    pass(
        4,
        "all-ones reduction",
        "forward, backward and 10 AdamW steps bit-identical to the independent plain-adapter path"
            .to_string(),
    );
}

/// Criterion 5: recomputation changes retention, not results; its ledger is
/// strictly smaller for every model with at least two layers.
#[test]
fn criterion_5_recomputation() {
    let mut worst_diff = 0.0f64;
    let mut savings = Vec::new();
    for depth in [2usize, 3, 4] {
        let cfg = RunConfig {
            m: 12,
            n: 12,
            depth,
            samples: 10,
            rank: 4,
            hidden_rank: 2,
            quantize_base: depth % 2 == 0, // exercise dense and quantized bases
            ..RunConfig::default()
        };
        let resolved = cfg.resolved();
        let task = runner::gen_task(&resolved).unwrap();
        let model = runner::build_model(&resolved, &task).unwrap();
        let (loss_on, mut tape_on) = model
            .forward_loss(
                &task.data.inputs,
                &task.data.targets,
                TapeConfig { recompute: true },
            )
            .unwrap();
        let (loss_off, mut tape_off) = model
            .forward_loss(
                &task.data.inputs,
                &task.data.targets,
                TapeConfig { recompute: false },
            )
            .unwrap();
        assert!((loss_on - loss_off).abs() <= 1e-12);

        let g_on = model.backward(&mut tape_on).unwrap().flatten();
        let g_off = model.backward(&mut tape_off).unwrap().flatten();
        assert_eq!(g_on.len(), g_off.len());
        for (a, b) in g_on.iter().zip(&g_off) {
            let d = (a - b).abs();
            assert!(d <= 1e-12, "gradient diff {d}");
            worst_diff = worst_diff.max(d);
        }

        let on = tape_on.ledger().total_bytes;
        let off = tape_off.ledger().total_bytes;
        assert!(on < off, "depth {depth}: {on} vs {off}");
        savings.push(format!("depth {depth}: {on} < {off} bytes"));
    }
    pass(
        5,
        "recomputation equivalence",
        format!("loss and gradients agree (worst abs diff {worst_diff:.1e}); ledgers strictly smaller ({})", savings.join("; ")),
    );
}

/// Criterion 6: quantization round-trip error against an independently coded
/// scalar oracle and the frozen regression threshold; exact per-block bound
/// on 1000 random blocks; bit-exact idempotence on the quantized lattice.
#[test]
fn criterion_6_quantization() {
    // the 64x64 standard-normal round trip, library vs scalar oracle
    let mut rng = RngState::new(11);
    let w = Matrix::gauss(&mut rng, 64, 64, 0.0, 1.0).unwrap();
    let block = 64usize;

    // independent oracle: per-block absmax by linear scan, nearest level by
    // linear scan with ties to the lower index
    let mut sum_sq = 0.0f64;
    for chunk in w.data().chunks(block) {
        let mut scale = 0.0f64;
        for &v in chunk {
            if v.abs() > scale {
                scale = v.abs();
            }
        }
        for &v in chunk {
            let recon = if scale == 0.0 {
                0.0
            } else {
                let t = v / scale;
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (idx, &level) in CODEBOOK.iter().enumerate() {
                    let d = (t - level).abs();
                    if d < best_d {
                        best_d = d;
                        best = idx;
                    }
                }
                CODEBOOK[best] * scale
            };
            sum_sq += (v - recon) * (v - recon);
        }
    }
    let oracle_rmse = (sum_sq / w.len() as f64).sqrt();

    let stats = quant_error(&w, block).unwrap();
    assert!(
        (stats.rmse - oracle_rmse).abs() < 1e-12,
        "library rmse {} vs oracle {}",
        stats.rmse,
        oracle_rmse
    );
    // frozen threshold: 0.0918 measured on this matrix when the suite was
    // built, plus 20% headroom
    const FROZEN_RMSE_THRESHOLD: f64 = 0.110;
    assert!(
        stats.rmse < FROZEN_RMSE_THRESHOLD,
        "rmse {} regressed",
        stats.rmse
    );

    // exact per-block bound on 1000 random blocks of varying length
    let half_gap = codebook_half_max_gap();
    let mut bound_rng = RngState::new(0xC6);
    for trial in 0..1000 {
        let len = 1 + bound_rng.next_below(96) as usize;
        let block_w = Matrix::gauss(&mut bound_rng, 1, len, 0.0, 2.0).unwrap();
        let q = quantize(&block_w, len).unwrap();
        let back = q.dequantize();
        let scale = q.scales()[0];
        for (a, b) in block_w.data().iter().zip(back.data()) {
            assert!(
                (a - b).abs() <= scale * half_gap * (1.0 + 1e-12),
                "trial {trial}: error {} above bound {}",
                (a - b).abs(),
                scale * half_gap
            );
        }
    }

    // idempotence on the lattice, bit for bit
    let q = quantize(&w, block).unwrap();
    let once = q.dequantize();
    let q2 = quantize(&once, block).unwrap();
    assert_eq!(q, q2);
    assert_eq!(q2.dequantize(), once);

    pass(
        6,
        "quantization",
        format!(
            "round-trip rmse {:.4} (oracle {:.4}, frozen threshold {FROZEN_RMSE_THRESHOLD}); 1000 blocks within the exact bound; lattice idempotence bit-exact",
            stats.rmse, oracle_rmse
        ),
    );
}

/// Criterion 7: convergence parity at rank 4 on the noiseless recovery task.
/// Expected to fail: the value-masked update cannot represent a generic
/// dense rank-2 perturbation (a third of its entries are structurally zero
/// at rank 4), so it floors far above the plain adapter. Measurements print
/// before the assertions.
#[test]
fn criterion_7_convergence_parity() {
    let start = Instant::now();
    let base = RunConfig {
        m: 32,
        n: 32,
        depth: 2,
        samples: 128,
        rank: 4,
        hidden_rank: 2,
        noise_std: 0.0,
        quantize_base: false,
        lr: 0.02,
        epochs: 600,
        ..RunConfig::default()
    };

    let mut lora_finals = Vec::new();
    let mut sp_finals = Vec::new();
    let mut reductions: Vec<(f64, f64)> = Vec::new();
    for s in 0..5u64 {
        let mut cfg = base.clone();
        cfg.seed_data = 100 + s;
        cfg.seed_init = 200 + s;
        cfg.seed_mask = 300 + s;
        let report = runner::run_compare(&cfg, &[Method::Lora, Method::LoraSp]).unwrap();
        let lora = &report.runs[0].report;
        let sp = &report.runs[1].report;
        lora_finals.push(lora.final_loss);
        sp_finals.push(sp.final_loss);
        reductions.push((
            lora.final_loss / lora.initial_loss,
            sp.final_loss / sp.initial_loss,
        ));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let lora_median = median(&mut lora_finals);
    let sp_median = median(&mut sp_finals);
    let worst_lora_red = reductions.iter().map(|r| r.0).fold(0.0f64, f64::max);
    let worst_sp_red = reductions.iter().map(|r| r.1).fold(0.0f64, f64::max);

    println!(
        "criterion 7 measurements: median final loss lora {lora_median:.3e}, lora-sp {sp_median:.3e} \
         (ratio {:.2}); worst reduction lora {worst_lora_red:.2e}, lora-sp {worst_sp_red:.2e}; {:?} elapsed",
        sp_median / lora_median,
        start.elapsed()
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");

    // the plain adapter converges as required
    assert!(
        worst_lora_red <= 0.01,
        "plain adapter did not reach 99% reduction"
    );

    // known-red assertions: the masked mechanism floors above both bounds at
    // rank 4 (see the README for the expressivity argument)
    let ratio_ok = sp_median <= 1.10 * lora_median;
    let reduction_ok = worst_sp_red <= 0.01;
    if !(ratio_ok && reduction_ok) {
        println!(
            "[FAIL] criterion 7: convergence parity - median ratio {:.2} (required <= 1.10), \
             worst half-selective reduction {worst_sp_red:.2e} (required <= 1e-2)",
            sp_median / lora_median
        );
    }
    assert!(
        ratio_ok && reduction_ok,
        "half-selective adapter does not reach parity at rank 4 (known red, see README): median ratio {:.2}, worst reduction {:.2e}",
        sp_median / lora_median,
        worst_sp_red
    );
    pass(
        7,
        "convergence parity",
        format!(
            "median ratio {:.3} <= 1.10, both methods >= 99% reduction",
            sp_median / lora_median
        ),
    );
}

/// Criterion 8: identical configs render byte-identical reports.
#[test]
fn criterion_8_determinism() {
    let cfg = RunConfig {
        m: 16,
        n: 16,
        depth: 2,
        samples: 32,
        rank: 4,
        hidden_rank: 2,
        epochs: 20,
        lr: 0.02,
        ..RunConfig::default()
    };
    let methods = [Method::Ft, Method::Lora, Method::LoraSp];
    let r1 = runner::run_compare(&cfg, &methods).unwrap();
    let r2 = runner::run_compare(&cfg, &methods).unwrap();
    let j1 = runner::render_json(&r1).unwrap();
    let j2 = runner::render_json(&r2).unwrap();
    assert_eq!(j1, j2, "reports must be byte-identical");

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    runner::emit_report(&r1, runner::ReportFormat::Json, d1.path()).unwrap();
    runner::emit_report(&r2, runner::ReportFormat::Json, d2.path()).unwrap();
    let f1 = std::fs::read(d1.path().join("report.json")).unwrap();
    let f2 = std::fs::read(d2.path().join("report.json")).unwrap();
    assert_eq!(f1, f2);

    // mask scheme and seeds land in the manifest, so a different seed is a
    // different artifact
    let mut other = cfg.clone();
    other.seed_mask += 1;
    let r3 = runner::run_compare(&other, &methods).unwrap();
    assert_ne!(runner::render_json(&r3).unwrap(), j1);

    pass(
        8,
        "determinism",
        format!("{} bytes, byte-identical across executions", f1.len()),
    );
}
