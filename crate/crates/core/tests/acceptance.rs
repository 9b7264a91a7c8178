//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::json;

use stratum_core::attention::distributed_softmax_reference;
use stratum_core::budget::{check_area, check_power, max_macs, BudgetInputs};
use stratum_core::placement::{place_experts, PlacementProblem};
use stratum_core::report::to_json;
use stratum_core::serving::{run_serving, CsvTrace, NoTrace, Policy, SimOptions};
use stratum_core::timing::build_tier_table;
use stratum_core::{preset, Scenario, SimReport};

/// Written straight to stderr so the line shows even when the harness
/// captures output of passing tests.
fn verdict(n: u32, ok: bool, detail: &str) {
    let line = format!(
        "criterion {n}: {} {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn within_rel(x: f64, target: f64, tol: f64) -> bool {
    ((x - target) / target).abs() <= tol
}

/// Mixtral-like desk-scale serving scenario on the six-chip system.
fn mixtral_desk(extra: &[&str]) -> Scenario {
    let mut overrides: Vec<String> = [
        "model.num_layers=8",
        "workload.input_len=512",
        "workload.output_len=512",
        "workload.duration_s=20",
        "workload.arrival_rate=2",
        "workload.max_batch=1",
        // Measured hot-hit lands near 48.5% once misclassified requests
        // are counted.
        "workload.usage.target_hot_hit=0.508",
        "workload.seed=7",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    Scenario::from_value(
        json!({"system": "stratum-l", "model": "mixtral-8x7b", "workload": {}}),
        &overrides,
    )
    .expect("valid scenario")
}

fn simulate(sc: &Scenario, policy: Policy) -> SimReport {
    run_serving(sc, &SimOptions::new(policy), &mut NoTrace).expect("simulation runs")
}

fn throughput_ratio(sc: &Scenario) -> (f64, SimReport) {
    let t = simulate(sc, Policy::Tiering);
    let n = simulate(sc, Policy::NoTiering);
    (t.decode_throughput_tok_s / n.decode_throughput_tok_s, t)
}

/// Seeded so that every run checks the same cases.
fn fixed_runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check_runtime(n: u32, start: Instant, limit: Duration) -> bool {
    let took = start.elapsed();
    if took > limit {
        println!("criterion {n}: took {took:?}, limit {limit:?}");
    }
    took <= limit
}

#[test]
fn criterion_01_tier_bandwidth() {
    let start = Instant::now();
    let t = build_tier_table(&preset("stratum-l").unwrap()).unwrap();
    let (bw0, bw7) = (t.chip_bandwidth(0), t.chip_bandwidth(7));
    let ok = within_rel(bw0, 30.34e12, 0.005)
        && within_rel(bw7, 19.01e12, 0.005)
        && check_runtime(1, start, Duration::from_secs(1));
    verdict(
        1,
        ok,
        &format!(
            "tier 0 {:.2} TB/s, tier 7 {:.2} TB/s",
            bw0 / 1e12,
            bw7 / 1e12
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_02_tier_ratio() {
    let start = Instant::now();
    let t = build_tier_table(&preset("stratum-l").unwrap()).unwrap();
    let ratio = t.trc(7) / t.trc(0);
    let ok = (ratio - 1.596).abs() <= 0.01 && check_runtime(2, start, Duration::from_secs(1));
    verdict(2, ok, &format!("trc(7)/trc(0) = {ratio:.4}"));
    assert!(ok);
}

#[test]
fn criterion_03_budget() {
    let start = Instant::now();
    let sys = preset("stratum-l").unwrap();
    let b = BudgetInputs::from_system(&sys).unwrap();
    let b64k = b.with_macs(65_536);
    let power = check_power(&b64k);
    let area = check_area(&b64k).unwrap();
    let n = max_macs(&b).unwrap();
    let ok = within_rel(power.p_dram_w, 104.0, 0.01)
        && within_rel(power.p_compute_w, 39.6, 0.01)
        && within_rel(area.a_pd_mm2, 0.21, 0.05)
        && (60_000..=70_000).contains(&n)
        && check_runtime(3, start, Duration::from_secs(1));
    verdict(
        3,
        ok,
        &format!(
            "p_dram {:.2} W, p_compute {:.2} W, A_PD {:.4} mm2, max_macs {n}",
            power.p_dram_w, power.p_compute_w, area.a_pd_mm2
        ),
    );
    assert!(ok);
}

/// Brute-force reference: an expert's position is the number of experts
/// that beat it (higher frequency, or equal frequency and lower index).
fn reference_intervals(p: &PlacementProblem) -> Vec<(u64, u64)> {
    let n = p.freq.len();
    let delta = p.delta();
    let tau = p.tau();
    (0..n)
        .map(|e| {
            let rank = (0..n)
                .filter(|&o| p.freq[o] > p.freq[e] || (p.freq[o] == p.freq[e] && o < e))
                .count() as u64;
            let start = if rank < tau {
                rank * delta
            } else {
                p.phi - (n as u64 - rank) * delta
            };
            (start, start + delta - 1)
        })
        .collect()
}

fn placement_problem() -> impl Strategy<Value = PlacementProblem> {
    (1u32..=4, 1u32..=8)
        .prop_filter("KL <= 32", |(l, k)| l * k <= 32)
        .prop_flat_map(|(layers, experts)| {
            let n = (layers * experts) as usize;
            (
                Just(layers),
                Just(experts),
                1..=experts,
                prop::collection::vec(prop_oneof![Just(0.0), Just(0.5), 0.0f64..1.0], n),
                1u64..5,
                1u64..200,
            )
        })
        .prop_map(|(layers, experts, hot, freq, rows, slack)| {
            let n = (layers * experts) as u64;
            PlacementProblem {
                layers,
                experts,
                hot_per_layer: hot,
                freq,
                expert_bytes: rows * 4 * 64 - 7,
                n_bank: 4,
                row_bytes: 64,
                phi: n * rows + slack,
            }
        })
}

#[test]
fn criterion_04_placement_oracle() {
    let start = Instant::now();
    let mut runner = fixed_runner(1000);
    let result = runner.run(&placement_problem(), |p| {
        let r = place_experts(&p).unwrap();
        let delta = p.delta();
        let hot_rows = p.tau() * delta;
        let mut sorted = r.intervals.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            prop_assert!(w[0].1 < w[1].0, "overlap {:?}", w);
        }
        prop_assert!(sorted.last().unwrap().1 < p.phi);
        for (e, &(a, b)) in r.intervals.iter().enumerate() {
            prop_assert_eq!(b - a + 1, delta);
            prop_assert_eq!(r.hot[e], a < hot_rows);
        }
        let hot_starts: Vec<u64> = sorted
            .iter()
            .take(p.tau() as usize)
            .map(|iv| iv.0)
            .collect();
        prop_assert_eq!(
            hot_starts,
            (0..p.tau()).map(|i| i * delta).collect::<Vec<_>>()
        );
        for x in 0..p.freq.len() {
            for y in 0..p.freq.len() {
                if p.freq[x] > p.freq[y] {
                    prop_assert!(r.intervals[x].0 < r.intervals[y].0);
                }
            }
        }
        prop_assert_eq!(&r.intervals, &reference_intervals(&p));
        Ok(())
    });
    let ok = result.is_ok() && check_runtime(4, start, Duration::from_secs(10));
    verdict(
        4,
        ok,
        &result
            .err()
            .map_or("1000 problems".to_string(), |e| e.to_string()),
    );
    assert!(ok);
}

fn score_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
    let score = prop_oneof![
        8 => -20.0f64..20.0,
        1 => -1000.0f64..1000.0,
        1 => prop_oneof![Just(1000.0), Just(-1000.0)],
    ];
    prop::collection::vec(prop::collection::vec(score, 0..12), 1..8)
        .prop_filter("at least one score", |s| s.iter().any(|v| !v.is_empty()))
}

#[test]
fn criterion_05_distributed_softmax() {
    let start = Instant::now();
    let mut runner = fixed_runner(1000);
    let result = runner.run(&score_sets(), |scores| {
        let (weights, state) = distributed_softmax_reference(&scores).unwrap();
        prop_assert_eq!(state.exchange_rounds, 2);
        let flat: Vec<f64> = scores.iter().flatten().copied().collect();
        let m = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = flat.iter().map(|x| (x - m).exp()).sum();
        let got: Vec<f64> = weights.iter().flatten().copied().collect();
        prop_assert_eq!(got.len(), flat.len());
        for (g, x) in got.iter().zip(&flat) {
            let want = (x - m).exp() / z;
            let err = (g - want).abs();
            prop_assert!(err <= 1e-6 * want.abs() || err == 0.0, "{} vs {}", g, want);
        }
        Ok(())
    });
    let ok = result.is_ok() && check_runtime(5, start, Duration::from_secs(5));
    verdict(
        5,
        ok,
        &result
            .err()
            .map_or("1000 inputs".to_string(), |e| e.to_string()),
    );
    assert!(ok);
}

#[test]
fn criterion_06_tiering_vs_no_tiering() {
    let start = Instant::now();
    let sc = mixtral_desk(&[]);
    let (ratio, t) = throughput_ratio(&sc);
    let hit_ok = (t.hot_hit_rate - 0.485).abs() <= 0.015;
    let ok =
        hit_ok && (1.2..=1.6).contains(&ratio) && check_runtime(6, start, Duration::from_secs(120));
    verdict(
        6,
        ok,
        &format!(
            "throughput ratio {ratio:.3} at measured hot-hit {:.3} over {} requests",
            t.hot_hit_rate, t.requests
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_hit_rate_sweep() {
    let start = Instant::now();
    let mut latencies = Vec::new();
    let mut throughputs = Vec::new();
    for hit in ["0.25", "0.4", "0.6", "0.8", "1.0"] {
        let sc = mixtral_desk(&[
            &format!("workload.usage.target_hot_hit={hit}"),
            "workload.input_len=64",
            "workload.output_len=64",
        ]);
        let r = simulate(&sc, Policy::Tiering);
        latencies.push(r.time.moe_layer_mean_us);
        throughputs.push(r.decode_throughput_tok_s);
    }
    let monotone = latencies.windows(2).all(|w| w[1] <= w[0]);
    let ratio = throughputs[4] / throughputs[0];
    let ok = monotone
        && (1.2..=1.6).contains(&ratio)
        && check_runtime(7, start, Duration::from_secs(300));
    let lat: Vec<String> = latencies.iter().map(|l| format!("{l:.3}")).collect();
    verdict(
        7,
        ok,
        &format!(
            "MoE layer us [{}], 100% vs uniform throughput {ratio:.3}",
            lat.join(", ")
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_swap_overhead() {
    let start = Instant::now();
    // Batches of one request on six topics; a swap batch is one whose topic
    // differs from the previous batch.
    let sc = mixtral_desk(&["workload.input_len=256", "workload.output_len=256"]);
    let r = simulate(&sc, Policy::Tiering);
    let s = &r.swaps;
    let flips = s.batches_with_swaps.max(1) as f64;
    let swap_time = s.time_s / flips;
    let batch_time = (r.time.busy_s - s.time_s) / r.batches as f64;
    let swap_energy = s.energy_j / flips;
    let batch_energy = (r.total_energy_j - s.energy_j) / r.batches as f64;
    let time_frac = swap_time / (swap_time + batch_time);
    let energy_frac = swap_energy / (swap_energy + batch_energy);
    let ok = s.batches_with_swaps > 0
        && time_frac < 0.01
        && energy_frac < 0.001
        && check_runtime(8, start, Duration::from_secs(60));
    verdict(
        8,
        ok,
        &format!(
            "per flip: {:.1} expert swaps, time {:.3}%, energy {:.5}% ({} flips in {} batches)",
            s.expert_swaps as f64 / flips,
            time_frac * 100.0,
            energy_frac * 100.0,
            s.batches_with_swaps,
            r.batches
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_retier_512_layers() {
    let start = Instant::now();
    let mut sys = preset("stratum-l").unwrap();
    sys.dram_layers = 512;
    let t = build_tier_table(&sys).unwrap();
    let access = t.trc(t.num_tiers() - 1) / t.trc(0);
    let (gain_512, _) = throughput_ratio(&mixtral_desk(&["system.dram_layers=512"]));
    let (gain_1024, _) = throughput_ratio(&mixtral_desk(&[]));
    let ok = (access - 1.3).abs() <= 0.15
        && gain_512 > 1.0
        && gain_512 < gain_1024
        && check_runtime(9, start, Duration::from_secs(120));
    verdict(
        9,
        ok,
        &format!(
            "512-layer access ratio {access:.3}, gain {gain_512:.3} vs {gain_1024:.3} at 1024"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_determinism() {
    let run = || {
        let sc = mixtral_desk(&["workload.duration_s=5"]);
        let mut trace = CsvTrace::new(Vec::new());
        let r = run_serving(&sc, &SimOptions::new(Policy::Tiering), &mut trace).unwrap();
        let mut placement = Vec::new();
        let mut runner = TestRunner::deterministic();
        for _ in 0..50 {
            let p = placement_problem().new_tree(&mut runner).unwrap().current();
            placement.push(place_experts(&p).unwrap().intervals);
        }
        let csv = trace.finish().unwrap();
        (to_json(&r).unwrap(), csv, format!("{placement:?}"))
    };
    let (a, b) = (run(), run());
    let ok = a == b;
    verdict(
        10,
        ok,
        &format!(
            "report {} bytes, trace {} bytes, identical across runs",
            a.0.len(),
            a.1.len()
        ),
    );
    assert!(ok);
}
