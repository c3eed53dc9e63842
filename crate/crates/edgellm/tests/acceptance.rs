//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use edgellm::sweep::{parallel_sweep, sweep_pool};
use edgellm_core::arith::{Design, PeConfig, PeMode, TreeVariant};
use edgellm_core::compiler::{build_block_graph, compile, patch_for_token, TokenBinding};
use edgellm_core::config::{ModelConfig, Strategy};
use edgellm_core::fp16::Fp16Bits;
use edgellm_core::layout::{from_unified, head_merge, head_split, to_unified};
use edgellm_core::model::{relative_l2, synthetic_inputs, synthetic_matrix, synthetic_weights, Model, ReferenceModel};
use edgellm_core::perf::{
    block_latency, ideal_vmm_time, reference, utilization, Calibration, HwConfig, LatencyTable, MemoryKind, Phase,
    BLOCK_ROUNDING_US, TOTAL_ROUNDING_US,
};
use edgellm_core::sim::ExecState;
use edgellm_core::sparse::{pack_row, size_report, LayerSpec, PackFormat};
use proptest::strategy::{Strategy as _, ValueTree};
use proptest::test_runner::TestRunner;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn c1_bit_budgets() -> Outcome {
    let want_bits = [8448, 6400, 3840, 3328, 2304];
    let want_bw = [4.125, 3.125, 1.875, 1.625, 1.125];
    let want_ratio = [1.32, 2.2, 2.54, 3.67];
    let mut ok = true;
    let mut got = Vec::new();
    for (i, f) in PackFormat::ALL.into_iter().enumerate() {
        let spec = LayerSpec::new("row", 2048, 1, f);
        let g = match pack_row(&synthetic_matrix(&spec, 11, i as u64), f) {
            Ok(g) => g,
            Err(e) => return outcome(false, format!("{} failed to pack: {e}", f.name())),
        };
        let bits = g[0].total_bits();
        ok &= g.len() == 1 && bits == want_bits[i] && f.total_bits() == bits;
        ok &= f.effective_bitwidth() == want_bw[i];
        if i > 0 {
            ok &= close(f.enhancement_ratio(), want_ratio[i - 1], 0.01);
        }
        got.push(format!("{}={}b/{:.3}/{:.2}x", f.name(), bits, f.effective_bitwidth(), f.enhancement_ratio()));
    }
    outcome(ok, got.join(" "))
}

fn c2_size_report() -> Outcome {
    let glm = ModelConfig::glm6b();
    let reports: Vec<_> =
        Strategy::ALL.iter().map(|&s| size_report(&glm.clone().with_strategy(s).block_size_specs())).collect();
    let totals: Vec<f64> = reports.iter().map(|r| r.total_mib).collect();
    let speedups: Vec<f64> = reports[1..].iter().map(|r| r.speedup_over(&reports[0])).collect();

    let row = |s: usize, name: &str| reports[s].layers.iter().find(|l| l.name == name).map_or(f64::NAN, |l| l.mib);
    let rows_ok = [
        (row(0, "q"), 8.25, 0.005),
        (row(0, "k"), 0.516, 0.0005),
        (row(1, "o"), 6.25, 0.005),
        (row(1, "h_to_4h"), 41.8, 0.05),
        (row(2, "h_to_4h"), 25.08, 0.005),
        (row(3, "4h_to_h"), 12.54, 0.005),
    ]
    .iter()
    .all(|&(a, b, t)| close(a, b, t));
    let want_totals = [100.33, 79.22, 61.502, 53.152];
    let totals_ok = totals.iter().zip(want_totals).all(|(a, b)| close(*a, b, 0.0005));
    let speed_ok = speedups.iter().zip([1.27, 1.63, 1.89]).all(|(a, b)| close(*a, b, 0.01));
    outcome(
        rows_ok && totals_ok && speed_ok,
        format!(
            "rows at printed precision {}; totals {:.3}/{:.3}/{:.3}/{:.3} MiB vs 100.33/79.22/61.502/53.152 {}; \
             speedups {:.3}/{:.3}/{:.3} vs 1.27/1.63/1.89 {}",
            if rows_ok { "match" } else { "differ" },
            totals[0],
            totals[1],
            totals[2],
            totals[3],
            if totals_ok { "match" } else { "differ" },
            speedups[0],
            speedups[1],
            speedups[2],
            if speed_ok { "match" } else { "differ" },
        ),
    )
}

fn c3_arith_error() -> Outcome {
    let pool = match sweep_pool() {
        Ok(p) => p,
        Err(e) => return outcome(false, e.to_string()),
    };
    let pe = PeConfig::default();
    let mut mean = [[0.0; 3]; 2];
    for (mi, mode) in [PeMode::Ffn, PeMode::Mha].into_iter().enumerate() {
        for (di, d) in [Design::Proposed, Design::Tree(TreeVariant::Fp20Tree), Design::Tree(TreeVariant::Fp16Tree)]
            .into_iter()
            .enumerate()
        {
            match parallel_sweep(&pool, &pe, mode, d, 100_000, 0) {
                Ok(s) => mean[mi][di] = s.mean_relative_error_pct,
                Err(e) => return outcome(false, e.to_string()),
            }
        }
    }
    let [ffn, mha] = mean;
    let bands = ffn[0] <= 0.1 && mha[0] <= 0.02;
    let order = ffn[0] < ffn[1] && ffn[1] < ffn[2] && mha[0] < mha[1] && mha[1] < mha[2];
    let fp16_tree = ffn[2] > 1.0;
    outcome(
        bands && order && fp16_tree,
        format!(
            "ffn proposed/fp20/fp16 = {:.4}/{:.4}/{:.4}%, mha = {:.4}/{:.4}/{:.4}%; bands {}, ordering {}, \
             fp16-tree ffn > 1% {}",
            ffn[0],
            ffn[1],
            ffn[2],
            mha[0],
            mha[1],
            mha[2],
            ok(bands),
            ok(order),
            ok(fp16_tree)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "violated"
    }
}

fn c4_utilization() -> Outcome {
    let hw = HwConfig::default();
    let t = ideal_vmm_time(4096, 4096, PackFormat::DENSE, &hw) * 1e6;
    let u = utilization(29.25, 38.5).fraction * 100.0;
    outcome(
        close(t, 29.25, 0.01) && close(u, 75.97, 0.01) && hw.hbm_bits_per_cycle() == 8192.0,
        format!("ideal {t:.4} us, utilization {u:.4}%"),
    )
}

fn c5_latency() -> Outcome {
    let agg = |d: &[f64; 19]| LatencyTable::aggregate(d, reference::LAYERS);
    let (hbm, ddr) = match (agg(&reference::DECODE_HBM), agg(&reference::DECODE_DDR)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return outcome(false, "aggregation failed"),
    };
    let table_ok = close(hbm.per_block_us, 671.10, BLOCK_ROUNDING_US)
        && close(hbm.total_us, 19449.23, TOTAL_ROUNDING_US)
        && close(hbm.token_per_s, 51.42, 0.005)
        && close(ddr.token_per_s, 14.11, 0.005);

    let hw = HwConfig::default();
    let cal = Calibration::fit_reference(&hw);
    let s3 = ModelConfig::glm6b().with_strategy(Strategy::S3);
    let run = |m| block_latency(&s3, &hw, reference::TOKEN, Phase::Decode, m, cal.get(Phase::Decode, m));
    let (h, d) = match (run(MemoryKind::Hbm), run(MemoryKind::Ddr)) {
        (Ok(a), Ok(b)) => (a.token_per_s, b.token_per_s),
        _ => return outcome(false, "modeled latency failed"),
    };
    let ratio = h / d;
    let model_ok = (70.0..=100.0).contains(&h) && (3.0..=4.5).contains(&ratio);
    outcome(
        table_ok && model_ok,
        format!(
            "reference per-block {:.2} us, total {:.2} us, {:.2} token/s, ddr {:.2} token/s; \
             calibrated strategy-3 {:.2} token/s, hbm/ddr {:.2}",
            hbm.per_block_us, hbm.total_us, hbm.token_per_s, ddr.token_per_s, h, ratio
        ),
    )
}

fn c6_compiler_equivalence() -> Outcome {
    let toy = ModelConfig::toy();
    let mut checked = 0;
    for phase in [Phase::Prefill, Phase::Decode] {
        let p = match compile(&toy, phase, TokenBinding::Symbolic) {
            Ok(p) => p,
            Err(e) => return outcome(false, e.to_string()),
        };
        for t in 1..=toy.max_token {
            let same = match (patch_for_token(&p, t), compile(&toy, phase, TokenBinding::Constant(t)).and_then(|c| c.encode())) {
                (Ok(a), Ok(b)) => a == b,
                _ => false,
            };
            if !same {
                return outcome(false, format!("{} program differs at token {t}", phase.name()));
            }
            checked += 1;
        }
    }
    outcome(checked == 128, format!("{checked} (phase, token) pairs bit-identical for max_token 64"))
}

fn c7_kv_cache() -> Outcome {
    let toy = ModelConfig::toy();
    let run = || -> edgellm_core::Result<(bool, f64, usize)> {
        let w = synthetic_weights(&toy, 5)?;
        let m = Model::new(&toy, &w)?;
        let inputs = synthetic_inputs(toy.hidden, 16, 9);
        let full = m.prefill_then_decode(&inputs, 16)?;
        let mut identical = true;
        let mut sim_splits = 0;
        for n in 1..16 {
            identical &= m.prefill_then_decode(&inputs, n)?.values == full.values;
        }
        let hw = HwConfig::default();
        let cal = Calibration::fit_reference(&hw);
        for n in [1, 5, 15] {
            let mut st = ExecState::new(&toy, hw.clone(), cal.clone())?;
            for ph in [Phase::Prefill, Phase::Decode] {
                st.load_program(&compile(&toy, ph, TokenBinding::Symbolic)?)?;
            }
            st.load_weights(&w)?;
            let (outs, _) = st.run_pipelined(&inputs, n, 0.0)?;
            identical &= outs.last().map(|o| &o.logits) == Some(&full.values);
            sim_splits += 1;
        }
        let r = ReferenceModel::new(&m);
        let x: Vec<f64> = inputs.iter().map(|v| v.to_f64()).collect();
        let want = r.forward(&x);
        let got: Vec<f64> = full.values.iter().map(|v| v.to_f64()).collect();
        Ok((identical, relative_l2(&got, &want), sim_splits))
    };
    match run() {
        Ok((identical, rel, sims)) => outcome(
            identical && rel <= 0.01,
            format!(
                "splits n=1..15 + m=16-n {} prefill(16) (also {sims} splits through the simulator); \
                 relative L2 vs f64 reference {:.4}%",
                if identical { "bit-identical to" } else { "DIFFER from" },
                rel * 100.0
            ),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn c8_layout() -> Outcome {
    let mut runner = TestRunner::deterministic();
    let shapes = (1usize..48, 1usize..6, 0usize..16, 0u32..3, 1usize..4);
    let mut failures = Vec::new();
    for case in 0..200 {
        let (tokens, slabs, odd, hp, t_pow) = shapes.new_tree(&mut runner).unwrap().current();
        let t_out = 4 << t_pow;
        let ch = (slabs * t_out).saturating_sub(odd % t_out).max(1);
        let flat: Vec<Fp16Bits> = (0..tokens * ch).map(|i| Fp16Bits(((i * 7 + case) % 31000) as u16)).collect();
        let Ok(u) = to_unified(&flat, tokens, ch, t_out) else {
            failures.push(format!("to_unified {tokens}x{ch}/{t_out}"));
            continue;
        };
        let kt = u.layout().segmented_transpose_view(0, tokens).gather(u.data());
        let padded = ch.div_ceil(t_out) * t_out;
        let naive_ok = (0..padded).all(|c| {
            (0..tokens).all(|j| kt[c * tokens + j] == if c < ch { flat[j * ch + c] } else { Fp16Bits::ZERO })
        });
        let round = from_unified(&u) == flat;
        let heads = 1usize << hp;
        let split_ok = if padded % (heads * t_out) == 0 && ch == padded {
            head_split(&u, heads).and_then(|s| head_merge(&s, heads)).map(|m| m == u).unwrap_or(false)
        } else {
            true
        };
        if !(naive_ok && round && split_ok) {
            failures.push(format!("tokens {tokens} ch {ch} t_out {t_out}"));
        }
    }
    let conversions = build_block_graph(&ModelConfig::glm6b()).and_then(|g| g.validate());
    let conv_ok = matches!(conversions, Ok(0));
    outcome(
        failures.is_empty() && conv_ok,
        format!(
            "200 fuzzed shapes, {} mismatches{}; GLM graph layout conversions: {:?}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            conversions.ok()
        ),
    )
}

fn c9_latency_hiding() -> Outcome {
    let toy = ModelConfig::toy();
    let run = |update_us: f64| -> edgellm_core::Result<(Vec<f64>, edgellm_core::perf::Timeline)> {
        let w = synthetic_weights(&toy, 2)?;
        let hw = HwConfig::default();
        let cal = Calibration::fit_reference(&hw);
        let mut st = ExecState::new(&toy, hw, cal)?;
        for ph in [Phase::Prefill, Phase::Decode] {
            st.load_program(&compile(&toy, ph, TokenBinding::Symbolic)?)?;
        }
        st.load_weights(&w)?;
        let (outs, tl) = st.run_pipelined(&synthetic_inputs(toy.hidden, 12, 4), 4, update_us)?;
        Ok((outs.iter().map(|o| o.duration_ns() / 1e3).collect(), tl))
    };
    let hidden = run(1.0);
    let (compute, tl) = match hidden {
        Ok(v) => v,
        Err(e) => return outcome(false, e.to_string()),
    };
    let min_c = compute.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_c = compute.iter().cloned().fold(0.0, f64::max);
    let sum: f64 = compute.iter().sum();
    let hidden_ok = 1.0 <= min_c && close(tl.total, 1.0 + sum, 1e-6 * tl.total);
    let slow = 2.0 * max_c;
    let (period, total) = match run(slow) {
        Ok((_, t)) => (t.steady_period().unwrap_or(f64::NAN), t.total),
        Err(e) => return outcome(false, e.to_string()),
    };
    let bound_ok = close(period, slow, 1e-6 * slow) && total > slow + sum;
    outcome(
        hidden_ok && bound_ok,
        format!(
            "update 1 us <= compute: total {:.3} us = 1 + {:.3}; update {:.1} us > compute: period {:.1} us",
            tl.total, sum, slow, period
        ),
    )
}

fn c10_smoke() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, e.to_string()),
    };
    let bin = env!("CARGO_BIN_EXE_edgellm");
    let toy = concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets/toy.json");
    let w = dir.path().join("toy.elwp");
    let p = dir.path().join("toy.elpg");
    let logits = dir.path().join("logits.json");
    let events = dir.path().join("events.csv");
    let steps: [Vec<&std::ffi::OsStr>; 3] = [
        vec!["pack".as_ref(), "--config".as_ref(), toy.as_ref(), "--random-seed".as_ref(), "1".as_ref(), "-o".as_ref(), w.as_os_str()],
        vec![
            "compile".as_ref(),
            "--config".as_ref(),
            toy.as_ref(),
            "--weights".as_ref(),
            w.as_os_str(),
            "-o".as_ref(),
            p.as_os_str(),
            "--verify-patch".as_ref(),
            "1..64".as_ref(),
        ],
        vec![
            "run".as_ref(),
            "--program".as_ref(),
            p.as_os_str(),
            "--weights".as_ref(),
            w.as_os_str(),
            "--token".as_ref(),
            "16".as_ref(),
            "--logits".as_ref(),
            logits.as_os_str(),
            "--events".as_ref(),
            events.as_os_str(),
        ],
    ];
    for args in &steps {
        match Command::new(bin).args(args).output() {
            Ok(o) if o.status.success() => {}
            Ok(o) => {
                return outcome(
                    false,
                    format!("{:?} exited with {}: {}", args[0], o.status, String::from_utf8_lossy(&o.stderr).trim()),
                )
            }
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    let files = logits.exists() && events.exists();
    outcome(files, "pack, compile (patch verified 1..64) and run (simulator matches operators) exited 0")
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("packing bit budgets", c1_bit_budgets, Duration::from_secs(1)),
        ("model-size report", c2_size_report, Duration::from_secs(5)),
        ("arithmetic error bands", c3_arith_error, Duration::from_secs(30)),
        ("utilization arithmetic", c4_utilization, Duration::MAX),
        ("latency aggregation", c5_latency, Duration::MAX),
        ("compiler equivalence", c6_compiler_equivalence, Duration::from_secs(10)),
        ("kv-cache correctness", c7_kv_cache, Duration::MAX),
        ("transpose and layout", c8_layout, Duration::MAX),
        ("latency hiding", c9_latency_hiding, Duration::MAX),
        ("end-to-end smoke", c10_smoke, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let mut o = f();
        let el = t.elapsed();
        if el > *limit {
            o.pass = false;
            o.detail.push_str(&format!("; exceeded the {:.0} s limit", limit.as_secs_f64()));
        }
        failed += !o.pass as usize;
        println!(
            "criterion {:>2} {} {} ({:.2} s): {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            el.as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
