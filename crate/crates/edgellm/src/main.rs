use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use edgellm::config::ConfigFile;
use edgellm::dump::LogitsReport;
use edgellm::events::{read_csv, summarize, write_csv, EventRecord};
use edgellm::formats::{
    check_weights, decode_program, decode_weights, encode_program, encode_weights, write_file, ProgramBundle,
};
use edgellm::sweep::{parallel_sweep, sweep_pool};
use edgellm_core::arith::{Design, ErrorStats, PeConfig, PeMode};
use edgellm_core::compiler::program::schema;
use edgellm_core::compiler::{compile, patch_for_token, CompiledProgram, TokenBinding};
use edgellm_core::config::{ModelConfig, Strategy};
use edgellm_core::model::{synthetic_inputs, synthetic_weights, Model};
use edgellm_core::perf::{
    block_latency, energy_estimate, reference, sparsity_speedup, Calibration, HwConfig, LatencyTable, MemoryKind,
    Phase, PowerTable,
};
use edgellm_core::sim::{ExecState, RunOutput};
use edgellm_core::sparse::size_report;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "edgellm", version, about = "Toolchain for the edgellm accelerator model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and pack model weights.
    Pack {
        /// Config file or preset name (glm6b, qwen7b, toy).
        #[arg(long)]
        config: String,
        /// Override the config's sparse strategy (dense, 1, 2, 3).
        #[arg(long)]
        strategy: Option<String>,
        /// Seed of the synthetic Gaussian weights.
        #[arg(long, default_value_t = 0)]
        random_seed: u64,
        /// Output weight file; omit to print the size report only.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compile the prefill and decode programs of a model.
    Compile {
        #[arg(long)]
        config: String,
        #[arg(long)]
        strategy: Option<String>,
        /// Check the programs against this weight file.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Compare patched programs with constant-token recompiles over a
        /// token range such as `1..64` (inclusive).
        #[arg(long)]
        verify_patch: Option<String>,
    },
    /// Simulate one inference on the accelerator model.
    Run {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Sequence length after this inference.
        #[arg(long, default_value_t = 1)]
        token: usize,
        #[arg(long, default_value = "decode")]
        phase: String,
        #[arg(long, default_value = "hbm")]
        memory: String,
        /// Hardware overrides are taken from this config.
        #[arg(long)]
        config: Option<String>,
        /// Seed of the synthetic input rows.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the final logits as JSON.
        #[arg(long)]
        logits: Option<PathBuf>,
        /// Write every executed step as CSV.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write a JSON summary of the run.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Skip the comparison with direct operator evaluation.
        #[arg(long)]
        no_verify: bool,
        /// Also print the modeled decode throughput over a token range.
        #[arg(long)]
        sweep_token: Option<String>,
    },
    /// Modeled per-step latency, throughput and energy.
    Perf {
        /// Program file whose model is used.
        #[arg(long, conflicts_with = "config")]
        prog: Option<PathBuf>,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value = "decode")]
        phase: String,
        #[arg(long, default_value = "hbm")]
        memory: String,
        #[arg(long, default_value_t = 128)]
        token: usize,
        /// Aggregate the measured reference delays instead of modeling.
        #[arg(long)]
        reference: bool,
        /// Also print the modeled decode throughput over a token range.
        #[arg(long)]
        sweep_token: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Relative-error sweep of the dot-product unit designs.
    ArithSweep {
        /// ffn, mha or all.
        #[arg(long, default_value = "all")]
        mode: String,
        /// proposed, fp20-tree, fp16-tree or all.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Summarize an event log written by `run`.
    Report {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pack { config, strategy, random_seed, output } => pack(&config, strategy.as_deref(), random_seed, output),
        Cmd::Compile { config, strategy, weights, output, verify_patch } => {
            cmd_compile(&config, strategy.as_deref(), weights, output, verify_patch.as_deref())
        }
        Cmd::Run {
            program,
            weights,
            token,
            phase,
            memory,
            config,
            seed,
            logits,
            events,
            summary,
            no_verify,
            sweep_token,
        } => run(RunArgs {
            program,
            weights,
            token,
            phase: Phase::parse(&phase)?,
            memory: MemoryKind::parse(&memory)?,
            config,
            seed,
            logits,
            events,
            summary,
            verify: !no_verify,
            sweep_token,
        }),
        Cmd::Perf { prog, config, strategy, phase, memory, token, reference, sweep_token, json } => {
            let cfg = match (prog, config) {
                (Some(p), _) => {
                    let b = read_program(&p)?;
                    (b.cfg().clone(), HwConfig::default())
                }
                (None, Some(c)) => load_config(&c, strategy.as_deref()).map(|c| (c.model, c.hw))?,
                (None, None) => bail!("perf needs --prog or --config"),
            };
            perf(&cfg.0, &cfg.1, Phase::parse(&phase)?, MemoryKind::parse(&memory)?, token, reference, json)?;
            match sweep_token {
                Some(r) => print_sweep(&cfg.0, &cfg.1, &Calibration::fit_reference(&cfg.1), &r),
                None => Ok(()),
            }
        }
        Cmd::ArithSweep { mode, variant, trials, seed, json } => arith_sweep(&mode, &variant, trials, seed, json),
        Cmd::Report { events, json } => report(&events, json),
    }
}

fn load_config(arg: &str, strategy: Option<&str>) -> Result<ConfigFile> {
    let mut c = ConfigFile::load(arg)?;
    if let Some(s) = strategy {
        c.model.strategy = Strategy::parse(s)?;
    }
    Ok(c)
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>> {
    let (a, b) = s.split_once("..").with_context(|| format!("expected a range like 1..64, got {s:?}"))?;
    let a: usize = a.trim().parse().with_context(|| format!("bad range start in {s:?}"))?;
    let b: usize = b.trim_start_matches('=').trim().parse().with_context(|| format!("bad range end in {s:?}"))?;
    ensure!(a >= 1 && a <= b, "empty or zero-based range {s:?}");
    Ok(a..=b)
}

fn read_program(p: &Path) -> Result<ProgramBundle> {
    let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    decode_program(&bytes).with_context(|| format!("decoding {}", p.display()))
}

fn pack(config: &str, strategy: Option<&str>, seed: u64, output: Option<PathBuf>) -> Result<()> {
    let c = load_config(config, strategy)?;
    let cfg = &c.model;
    let rep = size_report(&cfg.block_size_specs());
    let dense = size_report(&cfg.clone().with_strategy(Strategy::Dense).block_size_specs());
    println!("model {} strategy {}: per-block weight sizes", cfg.name, cfg.strategy.name());
    println!("{:<10} {:>10} {:>8} {:>8} {:>12}", "layer", "format", "ch_in", "ch_out", "MiB");
    for l in &rep.layers {
        println!("{:<10} {:>10} {:>8} {:>8} {:>12.3}", l.name, l.format.name(), l.ch_in, l.ch_out, l.mib);
    }
    println!("block total {:.3} MiB, speedup over dense {:.2}", rep.total_mib, rep.speedup_over(&dense));
    if let Some(out) = output {
        let t = Instant::now();
        let w = synthetic_weights(cfg, seed)?;
        let bytes = encode_weights(cfg, Some(seed), &w)?;
        write_file(&out, &bytes)?;
        let (h, back) = decode_weights(&bytes)?;
        ensure!(back == w, "weight file does not read back identically");
        check_weights(cfg, &h)?;
        println!(
            "wrote {} ({} bytes, {} matrices, {} norm vectors) in {:.2} s",
            out.display(),
            bytes.len(),
            w.package.layers.len(),
            w.norms.len(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn print_program_stats(p: &CompiledProgram) {
    let mut by_field: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &p.residuals {
        let name = schema(p.instructions[r.instr].kind)[r.field].name;
        *by_field.entry(name).or_default() += 1;
    }
    println!(
        "{:<8} {:>6} instructions {:>7} words {:>6} residual fields of {:>6} ({:.2}%){}",
        p.phase.name(),
        p.instructions.len(),
        p.total_words(),
        p.residuals.len(),
        p.total_fields(),
        100.0 * p.residual_fraction(),
        if p.last_token { ", last-token trimmed" } else { "" }
    );
    let list: Vec<String> = by_field.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    println!("         residual fields by name: {}", list.join(" "));
}

fn cmd_compile(
    config: &str,
    strategy: Option<&str>,
    weights: Option<PathBuf>,
    output: Option<PathBuf>,
    verify: Option<&str>,
) -> Result<()> {
    let c = load_config(config, strategy)?;
    let cfg = &c.model;
    if let Some(w) = &weights {
        let bytes = std::fs::read(w).with_context(|| format!("reading {}", w.display()))?;
        let (h, _) = decode_weights(&bytes)?;
        check_weights(cfg, &h).context("weights do not fit this model")?;
    }
    let t = Instant::now();
    let programs = [Phase::Prefill, Phase::Decode]
        .into_iter()
        .map(|ph| compile(cfg, ph, TokenBinding::Symbolic))
        .collect::<edgellm_core::Result<Vec<_>>>()?;
    let m = &programs[0].memory;
    println!(
        "model {}: max_token {}, {} weight bytes per port, {} DDR bytes, compiled in {:.2} s",
        cfg.name,
        m.max_token,
        m.weight_bytes_per_port,
        m.ddr_used,
        t.elapsed().as_secs_f64()
    );
    for p in &programs {
        print_program_stats(p);
    }
    if let Some(r) = verify {
        let range = parse_range(r)?;
        ensure!(*range.end() <= cfg.max_token, "range {r} exceeds max_token {}", cfg.max_token);
        for p in &programs {
            let bad: Vec<usize> = range
                .clone()
                .into_par_iter()
                .map(|tok| -> Result<Option<usize>> {
                    let patched = patch_for_token(p, tok)?;
                    let direct = compile(cfg, p.phase, TokenBinding::Constant(tok))?.encode()?;
                    Ok((patched != direct).then_some(tok))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            println!(
                "verify-patch {:<8} tokens {}..={}: {}",
                p.phase.name(),
                range.start(),
                range.end(),
                if bad.is_empty() { "identical to recompile".to_string() } else { format!("MISMATCH at {bad:?}") }
            );
            ensure!(bad.is_empty(), "patched {} program differs from recompile", p.phase.name());
        }
    }
    let bundle = ProgramBundle::new(programs.to_vec())?;
    if let Some(out) = output {
        let bytes = encode_program(&bundle)?;
        write_file(&out, &bytes)?;
        ensure!(decode_program(&bytes)? == bundle, "program file does not read back identically");
        println!("wrote {} ({} bytes)", out.display(), bytes.len());
    }
    Ok(())
}

struct RunArgs {
    program: PathBuf,
    weights: PathBuf,
    token: usize,
    phase: Phase,
    memory: MemoryKind,
    config: Option<String>,
    seed: u64,
    logits: Option<PathBuf>,
    events: Option<PathBuf>,
    summary: Option<PathBuf>,
    verify: bool,
    sweep_token: Option<String>,
}

#[derive(Serialize)]
struct ThroughputReport {
    token: usize,
    hbm_token_per_s: f64,
    ddr_token_per_s: f64,
    hbm_over_ddr: f64,
}

#[derive(Serialize)]
struct RunReport {
    model: String,
    token: usize,
    phase: String,
    memory: String,
    argmax: usize,
    simulated_us: f64,
    verified: bool,
    runs: Vec<edgellm::events::RunSummary>,
    modeled_decode: ThroughputReport,
}

fn decode_throughput(cfg: &ModelConfig, hw: &HwConfig, cal: &Calibration, token: usize) -> Result<ThroughputReport> {
    let hbm = block_latency(cfg, hw, token, Phase::Decode, MemoryKind::Hbm, cal.get(Phase::Decode, MemoryKind::Hbm))?;
    let ddr = block_latency(cfg, hw, token, Phase::Decode, MemoryKind::Ddr, cal.get(Phase::Decode, MemoryKind::Ddr))?;
    Ok(ThroughputReport {
        token,
        hbm_token_per_s: hbm.token_per_s,
        ddr_token_per_s: ddr.token_per_s,
        hbm_over_ddr: hbm.token_per_s / ddr.token_per_s,
    })
}

fn print_sweep(cfg: &ModelConfig, hw: &HwConfig, cal: &Calibration, r: &str) -> Result<()> {
    let range = parse_range(r)?;
    ensure!(*range.end() <= cfg.max_token, "sweep range {r} exceeds max_token {}", cfg.max_token);
    let stride = ((range.end() - range.start()) / 16).max(1);
    println!("{:>7} {:>12} {:>12}", "token", "hbm tok/s", "ddr tok/s");
    let mut t = *range.start();
    loop {
        let p = decode_throughput(cfg, hw, cal, t)?;
        println!("{:>7} {:>12.2} {:>12.2}", t, p.hbm_token_per_s, p.ddr_token_per_s);
        if t == *range.end() {
            return Ok(());
        }
        t = (t + stride).min(*range.end());
    }
}

fn run(a: RunArgs) -> Result<()> {
    let t0 = Instant::now();
    let bundle = read_program(&a.program)?;
    let cfg = bundle.cfg().clone();
    let wbytes = std::fs::read(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let (header, weights) = decode_weights(&wbytes)?;
    check_weights(&cfg, &header).context("weights do not fit the program's model")?;
    let hw = match &a.config {
        Some(c) => ConfigFile::load(c)?.hw,
        None => HwConfig::default(),
    };
    let cal = Calibration::fit_reference(&hw);
    ensure!(a.token >= 1 && a.token <= cfg.max_token, "token {} outside 1..={}", a.token, cfg.max_token);

    let mut st = ExecState::new(&cfg, hw.clone(), cal.clone())?;
    st.memory = a.memory;
    for p in &bundle.programs {
        st.load_program(p)?;
    }
    st.load_weights(&weights)?;

    let h = cfg.hidden;
    let inputs = synthetic_inputs(h, a.token, a.seed);
    let mut outs: Vec<(Phase, usize, RunOutput)> = Vec::new();
    match a.phase {
        Phase::Prefill => outs.push((Phase::Prefill, a.token, st.run(a.token, Phase::Prefill, &inputs)?)),
        Phase::Decode => {
            if a.token > 1 {
                let n = a.token - 1;
                outs.push((Phase::Prefill, n, st.run(n, Phase::Prefill, &inputs[..n * h])?));
            }
            outs.push((Phase::Decode, a.token, st.run(a.token, Phase::Decode, &inputs[(a.token - 1) * h..])?));
        }
    }
    let status = st.register(edgellm_core::sim::REG_STATUS)?;
    ensure!(status & edgellm_core::sim::STATUS_DONE != 0, "accelerator did not signal completion (status {status})");
    let (last_phase, _, last) = outs.last().unwrap();

    let verified = if a.verify {
        let n = if a.phase == Phase::Prefill { a.token } else { a.token.saturating_sub(1).max(1) };
        let want = Model::new(&cfg, &weights)?.prefill_then_decode(&inputs, n)?;
        ensure!(want.values == last.logits, "simulated logits differ from direct operator evaluation");
        ensure!(want.token == last.token, "argmax register {} differs from operator argmax {}", last.token, want.token);
        println!("validator: logits identical to direct operator evaluation");
        true
    } else {
        false
    };

    let mut records = Vec::new();
    for (i, (ph, tok, o)) in outs.iter().enumerate() {
        records.extend(o.events.iter().map(|e| EventRecord::new(i, *tok, ph.name(), e)));
    }
    let sim_us: f64 = outs.iter().map(|(_, _, o)| o.duration_ns() / 1e3).sum();
    for (ph, _, o) in &outs {
        println!(
            "{:<8} {:>5} steps, simulated {:>12.2} us on {}",
            ph.name(),
            o.events.len(),
            o.duration_ns() / 1e3,
            a.memory.name()
        );
    }
    println!("token {} {}: argmax {}", a.token, last_phase.name(), last.token);

    let thr = decode_throughput(&cfg, &hw, &cal, a.token)?;
    println!(
        "modeled decode at token {}: hbm {:.2} token/s, ddr {:.2} token/s, ratio {:.2}",
        thr.token, thr.hbm_token_per_s, thr.ddr_token_per_s, thr.hbm_over_ddr
    );
    if let Some(r) = &a.sweep_token {
        print_sweep(&cfg, &hw, &cal, r)?;
    }

    if let Some(p) = &a.logits {
        let rep = LogitsReport::new(a.token, last_phase.name(), last.token, &last.logits);
        serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &rep)?;
    }
    if let Some(p) = &a.events {
        write_csv(BufWriter::new(File::create(p)?), &records)?;
    }
    if let Some(p) = &a.summary {
        let rep = RunReport {
            model: cfg.name.clone(),
            token: a.token,
            phase: a.phase.name().into(),
            memory: a.memory.name().into(),
            argmax: last.token,
            simulated_us: sim_us,
            verified,
            runs: summarize(&records),
            modeled_decode: thr,
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &rep)?;
    }
    println!("done in {:.2} s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn print_table(t: &LatencyTable) {
    println!("{:>4} {:<24} {:>12}", "step", "operation", "delay (us)");
    for s in &t.steps {
        println!("{:>4} {:<24} {:>12.2}", s.step, s.name, s.us);
    }
    println!("per block {:.2} us, total {:.2} us over {} blocks, {:.2} token/s", t.per_block_us, t.total_us, t.layers, t.token_per_s);
    let (mha, ffn, other) = t.breakdown();
    let tot = mha + ffn + other;
    println!(
        "breakdown: attention {:.1}%, matrix products {:.1}%, other {:.1}%",
        100.0 * mha / tot,
        100.0 * ffn / tot,
        100.0 * other / tot
    );
}

#[derive(Serialize)]
struct PerfReport {
    model: String,
    phase: String,
    memory: String,
    token: usize,
    table: LatencyTable,
    energy: edgellm_core::perf::Energy,
    sparsity_speedup: f64,
}

fn perf(cfg: &ModelConfig, hw: &HwConfig, phase: Phase, mem: MemoryKind, token: usize, refr: bool, json: bool) -> Result<()> {
    let table = if refr {
        let d = match (phase, mem) {
            (Phase::Decode, MemoryKind::Hbm) => &reference::DECODE_HBM,
            (Phase::Decode, MemoryKind::Ddr) => &reference::DECODE_DDR,
            (Phase::Prefill, MemoryKind::Hbm) => &reference::PREFILL_HBM,
            (Phase::Prefill, MemoryKind::Ddr) => &reference::PREFILL_DDR,
        };
        LatencyTable::aggregate(d, reference::LAYERS)?
    } else {
        let cal = Calibration::fit_reference(hw);
        block_latency(cfg, hw, token, phase, mem, cal.get(phase, mem))?
    };
    let energy = energy_estimate(&table, &PowerTable::reference())?;
    let rep = PerfReport {
        model: if refr { "reference".into() } else { cfg.name.clone() },
        phase: phase.name().into(),
        memory: mem.name().into(),
        token: if refr { reference::TOKEN } else { token },
        sparsity_speedup: sparsity_speedup(cfg),
        table,
        energy,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&rep)?);
        return Ok(());
    }
    println!("{} {} {} at token {}", rep.model, rep.phase, rep.memory, rep.token);
    print_table(&rep.table);
    println!(
        "energy: average {:.2} W, {:.3} token/J, {:.4} J/token",
        rep.energy.average_w, rep.energy.token_per_j, rep.energy.joules_per_token
    );
    if !refr {
        println!("weight-volume speedup of strategy {} over dense: {:.2}", cfg.strategy.name(), rep.sparsity_speedup);
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    mode: PeMode,
    design: &'static str,
    stats: ErrorStats,
    reference_pct: Option<f64>,
}

fn arith_sweep(mode: &str, variant: &str, trials: u64, seed: u64, json: bool) -> Result<()> {
    let modes: Vec<PeMode> = match mode {
        "ffn" => vec![PeMode::Ffn],
        "mha" => vec![PeMode::Mha],
        "all" => vec![PeMode::Ffn, PeMode::Mha],
        _ => bail!("unknown mode {mode:?} (ffn, mha, all)"),
    };
    let designs: Vec<Design> = if variant == "all" {
        Design::ALL.to_vec()
    } else {
        vec![*Design::ALL.iter().find(|d| d.name() == variant).with_context(|| format!("unknown variant {variant:?}"))?]
    };
    let pool = sweep_pool()?;
    let pe = PeConfig::default();
    let mut rows = Vec::new();
    for &m in &modes {
        for &d in &designs {
            let stats = parallel_sweep(&pool, &pe, m, d, trials, seed)?;
            let reference_pct = edgellm_core::arith::reference::ERROR_RATES
                .iter()
                .find(|r| r.0 == d.name())
                .map(|r| if m == PeMode::Ffn { r.1 } else { r.2 });
            rows.push(SweepRow { mode: m, design: d.name(), stats, reference_pct });
        }
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("{} trials per row, seed {seed}", trials);
    println!(
        "{:<5} {:<10} {:>12} {:>12} {:>10} {:>10} {:>10}",
        "mode", "design", "mean err %", "max err %", "saturated", "overflow", "ref %"
    );
    for r in &rows {
        println!(
            "{:<5} {:<10} {:>12.4} {:>12.4} {:>10} {:>10} {:>10}",
            if r.mode == PeMode::Ffn { "ffn" } else { "mha" },
            r.design,
            r.stats.mean_relative_error_pct,
            r.stats.max_relative_error_pct,
            r.stats.saturation_count,
            r.stats.overflow_count,
            r.reference_pct.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn report(path: &Path, json: bool) -> Result<()> {
    let recs = read_csv(File::open(path).with_context(|| format!("reading {}", path.display()))?)?;
    ensure!(!recs.is_empty(), "no events in {}", path.display());
    let runs = summarize(&recs);
    if json {
        println!("{}", serde_json::to_string_pretty(&runs)?);
        return Ok(());
    }
    for r in &runs {
        println!("run {} ({} at token {}): {} events, {:.2} us", r.run, r.phase, r.token, r.events, r.total_us);
        println!("{:>4} {:<24} {:>6} {:>12} {:>14} {:>14}", "step", "operation", "count", "us", "hbm bytes", "ddr bytes");
        for s in &r.steps {
            println!(
                "{:>4} {:<24} {:>6} {:>12.2} {:>14.0} {:>14.0}",
                s.step, s.name, s.count, s.total_us, s.bytes_hbm, s.bytes_ddr
            );
        }
    }
    Ok(())
}
