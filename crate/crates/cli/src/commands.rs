use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use stratum_core::budget::{ledger, BudgetInputs, BudgetLedger};
use stratum_core::placement::{
    plan_swaps, retarget_minimal, swap_cost, PlacementResult, RowLayout,
};
use stratum_core::report::{to_json, CsvStream, Format};
use stratum_core::serving::{topic_placement, usage_table, CsvTrace, NoTrace};
use stratum_core::timing::{
    build_tier_table, fit_staircase, StaircaseModel, TierTable, TierTiming,
};
use stratum_core::{run_serving, Policy, Scenario, SimOptions, SimReport};

use crate::{Command, Common, UsageError};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            common,
            policy,
            duration,
            format,
            trace,
            no_overlap,
        } => simulate(
            &common,
            policy,
            duration,
            format,
            trace.as_deref(),
            no_overlap,
        ),
        Command::Sweep {
            common,
            hit_rates,
            batch_sizes,
            layers,
            policies,
            duration,
            jobs,
        } => sweep(
            &common,
            &hit_rates,
            &batch_sizes,
            &layers,
            &policies,
            duration,
            jobs,
        ),
        Command::Place { common, topic } => place(&common, topic.as_deref()),
        Command::SwapCost { common, from, to } => swap(&common, from.as_deref(), to.as_deref()),
        Command::DeriveTiers {
            common,
            layers,
            tiers,
            json,
        } => derive_tiers(&common, layers, tiers, json),
        Command::Budget { common, macs, json } => budget(&common, macs, json),
        Command::ValidateConfig { common } => validate(&common),
    }
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

/// Table commands print the table unless `json` is set; `out` always gets
/// JSON.
fn write_table<T: Serialize>(common: &Common, json: bool, value: &T, table: &str) -> Result<()> {
    let text = to_json(value)?;
    if let Some(path) = &common.out {
        write_out(Some(path), &text)?;
    }
    match (json, &common.out) {
        (true, Some(_)) => Ok(()),
        (true, None) => write_out(None, &text),
        (false, _) => write_out(None, table),
    }
}

fn duration_override(duration: Option<f64>) -> Vec<String> {
    duration
        .map(|d| format!("workload.duration_s={d}"))
        .into_iter()
        .collect()
}

fn simulate(
    common: &Common,
    policy: Policy,
    duration: Option<f64>,
    format: Option<Format>,
    trace: Option<&Path>,
    no_overlap: bool,
) -> Result<()> {
    let sc = common.scenario(&duration_override(duration))?;
    let mut opts = SimOptions::new(policy);
    opts.overlap = !no_overlap;
    let report = match trace {
        Some(path) => {
            let mut sink =
                CsvTrace::create(path).with_context(|| format!("creating {}", path.display()))?;
            let report = run_serving(&sc, &opts, &mut sink)?;
            sink.finish()?;
            report
        }
        None => run_serving(&sc, &opts, &mut NoTrace)?,
    };
    log::info!(
        "{} requests, {:.1} tok/s, {:.3} J",
        report.requests,
        report.decode_throughput_tok_s,
        report.total_energy_j
    );
    let format = format.unwrap_or(match common.out.as_deref().and_then(|p| p.extension()) {
        Some(ext) if ext == "csv" => Format::Csv,
        _ => Format::Json,
    });
    let text = match format {
        Format::Json => to_json(&report)?,
        Format::Csv => stratum_core::report::to_csv(&report)?,
    };
    write_out(common.out.as_deref(), &text)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    target_hot_hit: f64,
    max_batch: u32,
    num_layers: u32,
    policy: Policy,
    seed: u64,
    requests: u64,
    completed: u64,
    decode_throughput_tok_s: f64,
    tokens_per_joule: f64,
    total_energy_j: f64,
    hot_hit_rate: f64,
    moe_layer_mean_us: f64,
    ttft_p50_ms: f64,
    ttft_p99_ms: f64,
    swap_time_fraction: f64,
}

impl SweepRow {
    fn new(sc: &Scenario, policy: Policy, r: &SimReport) -> Self {
        Self {
            target_hot_hit: sc.workload.usage.target_hot_hit,
            max_batch: sc.workload.max_batch,
            num_layers: sc.model.num_layers,
            policy,
            seed: sc.workload.seed,
            requests: r.requests,
            completed: r.completed,
            decode_throughput_tok_s: r.decode_throughput_tok_s,
            tokens_per_joule: r.tokens_per_joule,
            total_energy_j: r.total_energy_j,
            hot_hit_rate: r.hot_hit_rate,
            moe_layer_mean_us: r.time.moe_layer_mean_us,
            ttft_p50_ms: r.ttft_ms.p50,
            ttft_p99_ms: r.ttft_ms.p99,
            swap_time_fraction: r.swaps.time_fraction,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    common: &Common,
    hit_rates: &[f64],
    batch_sizes: &[u32],
    layers: &[u32],
    policies: &[Policy],
    duration: Option<f64>,
    jobs: Option<usize>,
) -> Result<()> {
    let base = common.scenario(&duration_override(duration))?;
    let batch_sizes = if batch_sizes.is_empty() {
        vec![base.workload.max_batch]
    } else {
        batch_sizes.to_vec()
    };
    let layers = if layers.is_empty() {
        vec![base.model.num_layers]
    } else {
        layers.to_vec()
    };
    if hit_rates.is_empty() || policies.is_empty() {
        return Err(UsageError("sweep needs at least one hit rate and one policy".into()).into());
    }

    // Every cell is validated before anything runs.
    let mut cells = Vec::new();
    for &l in &layers {
        for &b in &batch_sizes {
            for &h in hit_rates {
                let extra = [
                    format!("model.num_layers={l}"),
                    format!("workload.max_batch={b}"),
                    format!("workload.usage.target_hot_hit={h}"),
                ];
                let mut all = duration_override(duration);
                all.extend(extra);
                let sc = common.scenario(&all)?;
                for &p in policies {
                    cells.push((sc.clone(), p));
                }
            }
        }
    }

    let jobs = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    log::info!("{} cells on {jobs} threads", cells.len());

    let sink: Box<dyn std::io::Write> = match &common.out {
        Some(path) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut csv = CsvStream::new(sink);
    // Rows are written in grid order, one chunk of cells at a time.
    for chunk in cells.chunks(jobs) {
        let rows: Vec<Result<SweepRow>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|(sc, p)| {
                    let r = run_serving(sc, &SimOptions::new(*p), &mut NoTrace)?;
                    Ok(SweepRow::new(sc, *p, &r))
                })
                .collect()
        });
        for row in rows {
            csv.write(&row?)?;
        }
        csv.flush()?;
    }
    Ok(())
}

fn topic_index(sc: &Scenario, arg: Option<&str>, default: usize) -> Result<usize> {
    let topics = &sc.workload.topics;
    let idx = match arg {
        None => default.min(topics.len() - 1),
        Some(a) => match topics.iter().position(|t| t == a) {
            Some(i) => i,
            None => a
                .parse::<usize>()
                .ok()
                .filter(|&i| i < topics.len())
                .ok_or_else(|| {
                    UsageError(format!("unknown topic `{a}`; have {}", topics.join(", ")))
                })?,
        },
    };
    Ok(idx)
}

#[derive(Debug, Serialize)]
struct ExpertSlot {
    layer: u32,
    expert: u32,
    shared: bool,
    hot: bool,
    freq: f64,
    first_row: u64,
    last_row: u64,
    first_tier: usize,
    last_tier: usize,
}

#[derive(Debug, Serialize)]
struct PlacementView {
    topic: String,
    delta_rows: u64,
    tau: u64,
    phi: u64,
    hot_end: u64,
    kv_start: u64,
    kv_end: u64,
    cold_start: u64,
    experts: Vec<ExpertSlot>,
}

fn place(common: &Common, topic: Option<&str>) -> Result<()> {
    let sc = common.scenario(&[])?;
    let t = topic_index(&sc, topic, 0)?;
    let usage = usage_table(&sc)?;
    let placement = topic_placement(&sc, &usage, t)?;
    let table = build_tier_table(&sc.system)?;
    let layout = RowLayout::new(&placement, &table, sc.system.kv_tier() as usize)?;
    let routed = sc.model.experts_per_layer;
    let mut experts = Vec::with_capacity(placement.intervals.len());
    for layer in 0..placement.layers {
        for expert in 0..placement.experts {
            let (a, b) = placement.interval(layer, expert);
            let shared = expert >= routed;
            experts.push(ExpertSlot {
                layer,
                expert,
                shared,
                hot: placement.is_hot(layer, expert),
                freq: if shared {
                    1.0
                } else {
                    usage.probs[t][layer as usize][expert as usize]
                },
                first_row: a,
                last_row: b,
                first_tier: table.tier_of_row(a)?,
                last_tier: table.tier_of_row(b)?,
            });
        }
    }
    let view = PlacementView {
        topic: sc.workload.topics[t].clone(),
        delta_rows: placement.delta_rows,
        tau: placement.tau,
        phi: placement.phi,
        hot_end: layout.hot_end,
        kv_start: layout.kv_start,
        kv_end: layout.kv_end,
        cold_start: placement.cold_start(),
        experts,
    };
    write_out(common.out.as_deref(), &to_json(&view)?)
}

#[derive(Debug, Serialize)]
struct SwapSide {
    expert_swaps: usize,
    row_pairs: usize,
    rows_moved: u64,
    time_us: f64,
    energy_uj: f64,
}

#[derive(Debug, Serialize)]
struct SwapView {
    from: String,
    to: String,
    /// Only experts that change between hot and cold move.
    minimal: SwapSide,
    /// Full re-pack into the target layout.
    full_repack: SwapSide,
}

fn swap_side(
    cur: &PlacementResult,
    target: &PlacementResult,
    table: &TierTable,
    sc: &Scenario,
) -> Result<SwapSide> {
    let plan = plan_swaps(cur, target)?;
    let cost = swap_cost(&plan, table, sc.system.energy_per_bit_dram_pj)?;
    Ok(SwapSide {
        expert_swaps: plan.expert_swaps(),
        row_pairs: plan.pairs.len(),
        rows_moved: plan.rows_moved,
        time_us: cost.time_ns * 1e-3,
        energy_uj: cost.energy_pj * 1e-6,
    })
}

fn swap(common: &Common, from: Option<&str>, to: Option<&str>) -> Result<()> {
    let sc = common.scenario(&[])?;
    let a = topic_index(&sc, from, 0)?;
    let b = topic_index(&sc, to, 1)?;
    let usage = usage_table(&sc)?;
    let cur = topic_placement(&sc, &usage, a)?;
    let target = topic_placement(&sc, &usage, b)?;
    let table = build_tier_table(&sc.system)?;
    let view = SwapView {
        from: sc.workload.topics[a].clone(),
        to: sc.workload.topics[b].clone(),
        minimal: swap_side(&cur, &retarget_minimal(&cur, &target)?, &table, &sc)?,
        full_repack: swap_side(&cur, &target, &table, &sc)?,
    };
    write_out(common.out.as_deref(), &to_json(&view)?)
}

#[derive(Debug, Serialize)]
struct TierRow {
    tier: usize,
    first_row: u64,
    trcd_ns: f64,
    tras_ns: f64,
    trc_ns: f64,
    bank_bandwidth_gb_s: f64,
    chip_bandwidth_tb_s: f64,
}

#[derive(Debug, Serialize)]
struct TierView {
    dram_layers: u32,
    num_tiers: u32,
    rows_per_tier: u64,
    /// Slowest tier's tRC over the fastest's.
    trc_ratio: f64,
    /// Quadratic fitted to the profiled table; absent below three tiers.
    fit: Option<StaircaseModel>,
    tiers: Vec<TierRow>,
}

fn derive_tiers(
    common: &Common,
    layers: Option<u32>,
    tiers: Option<u32>,
    json: bool,
) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(l) = layers {
        extra.push(format!("system.dram_layers={l}"));
    }
    if let Some(t) = tiers {
        extra.push(format!("system.num_tiers={t}"));
    }
    let sc = common.scenario(&extra)?;
    let sys = &sc.system;
    let table = build_tier_table(sys)?;
    let dev = &sys.timing;
    let fit = TierTiming::new(dev.trcd_ns.clone(), dev.trp_ns, dev.tras_offset_ns)
        .and_then(|t| fit_staircase(&t, dev.profiled_layers))
        .ok();
    let n = table.num_tiers();
    let rows: Vec<TierRow> = (0..n)
        .map(|i| TierRow {
            tier: i,
            first_row: table.tier_start(i),
            trcd_ns: table.trcd(i),
            tras_ns: table.timing().tras(i),
            trc_ns: table.trc(i),
            bank_bandwidth_gb_s: table.bank_bandwidth(i) * 1e-9,
            chip_bandwidth_tb_s: table.chip_bandwidth(i) * 1e-12,
        })
        .collect();
    let view = TierView {
        dram_layers: sys.dram_layers,
        num_tiers: sys.num_tiers,
        rows_per_tier: table.rows_per_tier(),
        trc_ratio: table.trc(n - 1) / table.trc(0),
        fit,
        tiers: rows,
    };

    let mut t = String::new();
    writeln!(
        t,
        "{} layers in {} tiers, {} rows per tier",
        view.dram_layers, view.num_tiers, view.rows_per_tier
    )?;
    writeln!(
        t,
        "{:>4} {:>9} {:>8} {:>8} {:>8} {:>10} {:>10}",
        "tier", "first_row", "tRCD_ns", "tRAS_ns", "tRC_ns", "bank_GB/s", "chip_TB/s"
    )?;
    for r in &view.tiers {
        writeln!(
            t,
            "{:>4} {:>9} {:>8.3} {:>8.3} {:>8.3} {:>10.3} {:>10.3}",
            r.tier,
            r.first_row,
            r.trcd_ns,
            r.tras_ns,
            r.trc_ns,
            r.bank_bandwidth_gb_s,
            r.chip_bandwidth_tb_s
        )?;
    }
    writeln!(t, "tRC slowest/fastest: {:.4}", view.trc_ratio)?;
    if let Some(f) = &view.fit {
        writeln!(
            t,
            "fit over {} layers: tRCD(x) = {:.4} + {:.4} x + {:.4} x^2",
            f.fit_layers, f.a, f.b, f.c
        )?;
    }
    write_table(common, json, &view, &t)
}

fn budget(common: &Common, macs: Option<u64>, json: bool) -> Result<()> {
    let sc = common.scenario(&[])?;
    let mut inputs = BudgetInputs::from_system(&sc.system)?;
    if let Some(n) = macs {
        inputs = inputs.with_macs(n);
    }
    let l: BudgetLedger = ledger(&inputs)?;
    let p = &l.power;
    let a = &l.area;
    let yes = |b: bool| if b { "yes" } else { "no" };
    let mut t = String::new();
    writeln!(t, "power")?;
    writeln!(
        t,
        "  p_dram        {:>10.3} W  (core {:.3} W, periphery {:.3} W)",
        p.p_dram_w, p.p_dram_c_w, p.p_dram_p_w
    )?;
    writeln!(
        t,
        "  p_compute     {:>10.3} W  ({} MACs)",
        p.p_compute_w, l.inputs.n_mac
    )?;
    writeln!(t, "  p_misc        {:>10.3} W", p.p_misc_w)?;
    writeln!(
        t,
        "  logic         {:>10.3} W  of {:.3} W  feasible: {}",
        p.logic_w,
        l.inputs.params.p_peak_w,
        yes(p.logic_feasible)
    )?;
    match l.inputs.params.p_dram_budget_w {
        Some(cap) => writeln!(
            t,
            "  dram          {:>10.3} W  of {cap:.3} W  feasible: {}",
            p.p_dram_w,
            yes(p.dram_feasible)
        )?,
        None => writeln!(t, "  dram          {:>10.3} W  (no budget)", p.p_dram_w)?,
    }
    writeln!(t, "  total         {:>10.3} W", p.total_w)?;
    writeln!(t, "area")?;
    writeln!(t, "  power TSVs    {:>10.4} mm^2", a.a_pd_mm2)?;
    writeln!(t, "  MACs          {:>10.4} mm^2", a.a_mac_total_mm2)?;
    writeln!(
        t,
        "  total         {:>10.4} mm^2  of {:.4} mm^2  feasible: {}",
        a.total_mm2,
        a.limit_mm2,
        yes(a.feasible)
    )?;
    writeln!(t, "  utilization   {:>10.4}", a.utilization)?;
    match l.max_macs {
        Some(n) => writeln!(t, "max MACs        {n}")?,
        None => writeln!(t, "max MACs        none feasible")?,
    }
    write_table(common, json, &l, &t)
}

fn validate(common: &Common) -> Result<()> {
    // Anything that stops the scenario from being usable is a validation
    // failure here, including capacity.
    let checked = || -> Result<String> {
        let sc = common.scenario(&[])?;
        let table = build_tier_table(&sc.system)?;
        let usage = usage_table(&sc)?;
        let placement = topic_placement(&sc, &usage, 0)?;
        let layout = RowLayout::new(&placement, &table, sc.system.kv_tier() as usize)?;
        let (s, m, w) = (&sc.system, &sc.model, &sc.workload);
        let gib = |b: u64| b as f64 / (1u64 << 30) as f64;
        let mut t = String::new();
        writeln!(t, "ok: {}", common.config)?;
        writeln!(
            t,
            "system    {}: {} chips, {:.0} GiB, {} tiers over {} layers",
            s.name,
            s.num_chips,
            gib(s.total_capacity_bytes()),
            s.num_tiers,
            s.dram_layers
        )?;
        writeln!(
            t,
            "model     {}: {} layers, {} experts ({} active, {} shared), {:.1} MiB per expert",
            m.name,
            m.num_layers,
            m.experts_per_layer,
            m.active_experts,
            m.shared_experts,
            m.expert_bytes() as f64 / (1u64 << 20) as f64
        )?;
        writeln!(
            t,
            "workload  {} topics, {} req/s for {} s, {} in / {} out, max batch {}, seed {}",
            w.topics.len(),
            w.arrival_rate,
            w.duration_s,
            w.input_len,
            w.output_len,
            w.max_batch,
            w.seed
        )?;
        writeln!(
            t,
            "rows      {} per expert, hot below {}, KV {}..{}, cold from {}",
            placement.delta_rows,
            layout.hot_end,
            layout.kv_start,
            layout.kv_end,
            placement.cold_start()
        )?;
        Ok(t)
    };
    let text = checked().map_err(|e| UsageError(format!("{e:#}")))?;
    write_out(common.out.as_deref(), &text)
}
