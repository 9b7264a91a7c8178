//! Expert weight placement over the tiered row space.
//!
//! Each expert is sharded over every bank of every chip and occupies the
//! same Δ-row interval in each bank, so the layout is described by one
//! per-bank row map. The `τ = k·L` most used experts are packed upward from
//! row 0 (fast tiers); the rest are packed downward from `Φ`, more used
//! experts at lower rows. KV grows in the gap between the two regions and
//! rows at and above `Φ` hold xPU-only data.

use serde::Serialize;

use crate::error::{Result, SimError};
use crate::timing::TierTable;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementProblem {
    /// L
    pub layers: u32,
    /// Experts placed per layer, shared experts included.
    pub experts: u32,
    /// Hot experts per layer (k plus shared experts), so τ = hot_per_layer · L.
    pub hot_per_layer: u32,
    /// Usage frequency per (layer, expert), layer-major.
    pub freq: Vec<f64>,
    /// S_E, bytes.
    pub expert_bytes: u64,
    pub n_bank: u64,
    /// S_rb, bytes.
    pub row_bytes: u64,
    /// Φ, rows per bank available to NMP data.
    pub phi: u64,
}

impl PlacementProblem {
    /// Δ, rows each expert occupies in every bank.
    pub fn delta(&self) -> u64 {
        self.expert_bytes.div_ceil(self.n_bank * self.row_bytes)
    }

    pub fn tau(&self) -> u64 {
        self.hot_per_layer as u64 * self.layers as u64
    }

    pub fn num_experts(&self) -> usize {
        self.layers as usize * self.experts as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.experts == 0 {
            return Err(SimError::invalid("placement", "need at least one expert"));
        }
        if self.hot_per_layer == 0 || self.hot_per_layer > self.experts {
            return Err(SimError::invalid(
                "placement.hot_per_layer",
                "must be in 1..=K",
            ));
        }
        if self.freq.len() != self.num_experts() {
            return Err(SimError::invalid(
                "placement.freq",
                format!(
                    "expected {} entries, got {}",
                    self.num_experts(),
                    self.freq.len()
                ),
            ));
        }
        if self.freq.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(SimError::invalid(
                "placement.freq",
                "frequencies must be finite and >= 0",
            ));
        }
        if self.expert_bytes == 0 || self.n_bank == 0 || self.row_bytes == 0 {
            return Err(SimError::invalid("placement", "sizes must be positive"));
        }
        let need = self.num_experts() as u64 * self.delta();
        if self.phi < need {
            return Err(SimError::Capacity(format!(
                "experts need {need} rows per bank, only {} reserved",
                self.phi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementResult {
    pub layers: u32,
    pub experts: u32,
    /// Inclusive [a, b] row interval per (layer, expert), layer-major.
    pub intervals: Vec<(u64, u64)>,
    pub hot: Vec<bool>,
    pub delta_rows: u64,
    pub tau: u64,
    pub phi: u64,
}

impl PlacementResult {
    pub fn index(&self, layer: u32, expert: u32) -> usize {
        layer as usize * self.experts as usize + expert as usize
    }

    pub fn interval(&self, layer: u32, expert: u32) -> (u64, u64) {
        self.intervals[self.index(layer, expert)]
    }

    pub fn is_hot(&self, layer: u32, expert: u32) -> bool {
        self.hot[self.index(layer, expert)]
    }

    /// First row past the hot region.
    pub fn hot_end(&self) -> u64 {
        self.tau * self.delta_rows
    }

    /// First row of the cold region.
    pub fn cold_start(&self) -> u64 {
        self.phi - (self.intervals.len() as u64 - self.tau) * self.delta_rows
    }

    fn with_intervals(&self, intervals: Vec<(u64, u64)>) -> Self {
        let hot_end = self.tau * self.delta_rows;
        Self {
            hot: intervals.iter().map(|&(a, _)| a < hot_end).collect(),
            intervals,
            ..self.clone()
        }
    }
}

/// Sort by descending frequency with ties broken by (layer, expert), then
/// pack the first τ upward from row 0 and the rest downward from Φ.
pub fn place_experts(p: &PlacementProblem) -> Result<PlacementResult> {
    p.validate()?;
    let n = p.num_experts();
    let delta = p.delta();
    let tau = p.tau();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| p.freq[y].total_cmp(&p.freq[x]).then(x.cmp(&y)));
    let mut intervals = vec![(0, 0); n];
    let mut hot = vec![false; n];
    for (pos, &e) in order.iter().enumerate() {
        let i = pos as u64 + 1;
        let a = if i <= tau {
            hot[e] = true;
            (i - 1) * delta
        } else {
            p.phi - (n as u64 - i + 1) * delta
        };
        intervals[e] = (a, a + delta - 1);
    }
    Ok(PlacementResult {
        layers: p.layers,
        experts: p.experts,
        intervals,
        hot,
        delta_rows: delta,
        tau,
        phi: p.phi,
    })
}

/// Tiers touched by one expert's rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Residency {
    pub first_tier: usize,
    pub last_tier: usize,
}

impl Residency {
    pub fn is_split(&self) -> bool {
        self.first_tier != self.last_tier
    }
}

pub fn classify_hot_cold(result: &PlacementResult, table: &TierTable) -> Result<Vec<Residency>> {
    result
        .intervals
        .iter()
        .map(|&(a, b)| {
            Ok(Residency {
                first_tier: table.tier_of_row(a)?,
                last_tier: table.tier_of_row(b)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SwapPlan {
    /// Interval swaps, as starting rows of the two intervals.
    pub interval_swaps: Vec<(u64, u64)>,
    /// Per-bank row pairs exchanged, in execution order.
    pub pairs: Vec<(u64, u64)>,
    pub rows_moved: u64,
}

impl SwapPlan {
    pub fn is_empty(&self) -> bool {
        self.interval_swaps.is_empty()
    }

    pub fn expert_swaps(&self) -> usize {
        self.interval_swaps.len()
    }
}

fn same_dims(a: &PlacementResult, b: &PlacementResult) -> Result<()> {
    if a.layers != b.layers
        || a.experts != b.experts
        || a.delta_rows != b.delta_rows
        || a.tau != b.tau
        || a.phi != b.phi
    {
        return Err(SimError::invalid(
            "swap plan",
            "layouts have different dimensions",
        ));
    }
    Ok(())
}

/// Minimal swap sequence turning `current` into `target`: each cycle of
/// the slot permutation of length c costs c - 1 interval swaps.
pub fn plan_swaps(current: &PlacementResult, target: &PlacementResult) -> Result<SwapPlan> {
    same_dims(current, target)?;
    let delta = current.delta_rows;
    // Slot = interval start. occupant[slot] = expert currently there.
    let mut slots: Vec<u64> = current.intervals.iter().map(|&(a, _)| a).collect();
    slots.sort_unstable();
    let slot_index = |row: u64| slots.binary_search(&row).expect("slot exists");
    let n = slots.len();
    let mut occupant = vec![0usize; n];
    for (e, &(a, _)) in current.intervals.iter().enumerate() {
        occupant[slot_index(a)] = e;
    }
    let mut target_slot = vec![0usize; current.intervals.len()];
    for (e, &(a, _)) in target.intervals.iter().enumerate() {
        target_slot[e] = slots.binary_search(&a).map_err(|_| {
            SimError::invalid(
                "swap plan",
                "target uses a row slot the current layout lacks",
            )
        })?;
    }
    let mut interval_swaps = Vec::new();
    for s in 0..n {
        // Bring the right expert into slot s by following the cycle.
        loop {
            let e = occupant[s];
            let t = target_slot[e];
            if t == s {
                break;
            }
            interval_swaps.push((slots[s], slots[t]));
            occupant.swap(s, t);
        }
    }
    let pairs: Vec<(u64, u64)> = interval_swaps
        .iter()
        .flat_map(|&(a, b)| (0..delta).map(move |j| (a + j, b + j)))
        .collect();
    Ok(SwapPlan {
        rows_moved: 2 * pairs.len() as u64,
        interval_swaps,
        pairs,
    })
}

/// Layout with `target`'s hot set that moves as few experts as possible
/// from `current`: each expert entering the hot set trades slots with one
/// leaving it, and everything else stays put. Entering experts are taken in
/// `target` row order and get the fastest vacated slots first.
pub fn retarget_minimal(
    current: &PlacementResult,
    target: &PlacementResult,
) -> Result<PlacementResult> {
    same_dims(current, target)?;
    let n = current.intervals.len();
    let mut leaving: Vec<usize> = (0..n)
        .filter(|&e| current.hot[e] && !target.hot[e])
        .collect();
    let mut entering: Vec<usize> = (0..n)
        .filter(|&e| target.hot[e] && !current.hot[e])
        .collect();
    leaving.sort_by_key(|&e| current.intervals[e].0);
    entering.sort_by_key(|&e| target.intervals[e].0);
    let mut intervals = current.intervals.clone();
    for (&out, &inn) in leaving.iter().zip(&entering) {
        intervals.swap(out, inn);
    }
    Ok(current.with_intervals(intervals))
}

/// Layout after executing `plan` on `current`.
pub fn apply_swaps(current: &PlacementResult, plan: &SwapPlan) -> PlacementResult {
    let delta = current.delta_rows;
    let mut intervals = current.intervals.clone();
    for &(a, b) in &plan.interval_swaps {
        for iv in intervals.iter_mut() {
            if iv.0 == a {
                *iv = (b, b + delta - 1);
            } else if iv.0 == b {
                *iv = (a, a + delta - 1);
            }
        }
    }
    current.with_intervals(intervals)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SwapCost {
    pub time_ns: f64,
    pub energy_pj: f64,
}

/// Each row pair is read into the row-swap buffer and written back swapped:
/// two reads and two writes at the rows' tier timings. Banks work in
/// parallel and each bank handles one pair at a time. Energy is four row
/// transfers per listed pair.
pub fn swap_cost(plan: &SwapPlan, table: &TierTable, energy_per_bit_pj: f64) -> Result<SwapCost> {
    let mut time_ns = 0.0;
    for &(a, b) in &plan.pairs {
        let ta = table.trc(table.tier_of_row(a)?);
        let tb = table.trc(table.tier_of_row(b)?);
        time_ns += 2.0 * (ta + tb);
    }
    let row_bits = table.row_bytes() * 8;
    let energy_pj = plan.pairs.len() as f64 * 4.0 * row_bits as f64 * energy_per_bit_pj;
    Ok(SwapCost { time_ns, energy_pj })
}

/// Per-bank row map of NMP data around the expert regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RowLayout {
    pub hot_end: u64,
    pub kv_start: u64,
    /// Exclusive; equals the first cold-expert row.
    pub kv_end: u64,
    pub phi: u64,
}

impl RowLayout {
    /// KV starts at the first row of `kv_tier`, or right after the hot
    /// region if that reaches further.
    pub fn new(result: &PlacementResult, table: &TierTable, kv_tier: usize) -> Result<Self> {
        let hot_end = result.hot_end();
        let cold_start = result.cold_start();
        let kv_start = hot_end.max(table.tier_start(kv_tier)).min(cold_start);
        Ok(Self {
            hot_end,
            kv_start,
            kv_end: cold_start,
            phi: result.phi,
        })
    }

    pub fn kv_rows(&self) -> u64 {
        self.kv_end - self.kv_start
    }

    /// Tier of the deepest KV row when `rows` rows per bank are in use.
    pub fn kv_tier_for(&self, rows: u64, table: &TierTable) -> Result<usize> {
        if rows > self.kv_rows() {
            return Err(SimError::Capacity(format!(
                "KV needs {rows} rows per bank, {} available",
                self.kv_rows()
            )));
        }
        table.tier_of_row(self.kv_start + rows.max(1) - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{model_preset, preset, SystemConfig};
    use crate::timing::build_tier_table;

    fn small(freq: Vec<f64>) -> PlacementProblem {
        PlacementProblem {
            layers: 1,
            experts: freq.len() as u32,
            hot_per_layer: 1,
            freq,
            expert_bytes: 2 * 4096,
            n_bank: 1,
            row_bytes: 4096,
            phi: 100,
        }
    }

    #[test]
    fn hand_traced_example() {
        let r = place_experts(&small(vec![0.5, 0.3, 0.1, 0.1])).unwrap();
        assert_eq!(r.delta_rows, 2);
        assert_eq!(r.intervals, vec![(0, 1), (94, 95), (96, 97), (98, 99)]);
        assert_eq!(r.hot, vec![true, false, false, false]);
    }

    #[test]
    fn mixtral_delta_on_stratum_l() {
        let sys = preset("stratum-l").unwrap();
        let m = model_preset("mixtral-8x7b").unwrap();
        let p = PlacementProblem {
            layers: 1,
            experts: 8,
            hot_per_layer: 2,
            freq: vec![1.0; 8],
            expert_bytes: m.expert_bytes(),
            n_bank: sys.n_bank(),
            row_bytes: sys.row_buffer_bytes(),
            phi: sys.nmp_rows(),
        };
        assert_eq!(p.delta(), 56);
    }

    #[test]
    fn ties_follow_index_order() {
        let r = place_experts(&small(vec![0.25; 4])).unwrap();
        assert_eq!(r.hot, vec![true, false, false, false]);
        assert_eq!(r.intervals[1], (94, 95));
    }

    #[test]
    fn errors() {
        let mut p = small(vec![0.5, 0.5]);
        p.phi = 3;
        assert!(matches!(place_experts(&p), Err(SimError::Capacity(_))));
        assert!(place_experts(&small(vec![-0.1, 1.1])).is_err());
    }

    #[test]
    fn residency_split() {
        let sys = SystemConfig::default();
        let t = build_tier_table(&sys).unwrap();
        let mut p = small(vec![1.0, 0.5, 0.1]);
        p.row_bytes = 4096;
        p.expert_bytes = 3000 * 4096;
        p.phi = 32768;
        p.hot_per_layer = 2;
        let r = place_experts(&p).unwrap();
        let res = classify_hot_cold(&r, &t).unwrap();
        assert_eq!(
            res[0],
            Residency {
                first_tier: 0,
                last_tier: 0
            }
        );
        assert!(res[1].is_split());
        assert_eq!(res[2].last_tier, 7);
    }

    #[test]
    fn minimal_retarget_only_trades_class_changes() {
        let mut p = small(vec![0.5, 0.4, 0.3, 0.2, 0.1, 0.05]);
        p.hot_per_layer = 2;
        let cur = place_experts(&p).unwrap();
        p.freq = vec![0.05, 0.4, 0.1, 0.2, 0.5, 0.3];
        let target = place_experts(&p).unwrap();
        let r = retarget_minimal(&cur, &target).unwrap();
        assert_eq!(r.hot, target.hot);
        // Expert 4 takes expert 0's fast slot; the rest keep their rows.
        assert_eq!(r.intervals[4], cur.intervals[0]);
        assert_eq!(r.intervals[0], cur.intervals[4]);
        for e in [1, 2, 3, 5] {
            assert_eq!(r.intervals[e], cur.intervals[e]);
        }
        assert_eq!(plan_swaps(&cur, &r).unwrap().expert_swaps(), 1);
        assert!(plan_swaps(&cur, &target).unwrap().expert_swaps() > 1);
    }

    #[test]
    fn swaps_follow_cycles() {
        let cur = place_experts(&small(vec![0.5, 0.3, 0.1, 0.05])).unwrap();
        assert!(plan_swaps(&cur, &cur).unwrap().is_empty());

        let two = place_experts(&small(vec![0.3, 0.5, 0.1, 0.05])).unwrap();
        let plan = plan_swaps(&cur, &two).unwrap();
        assert_eq!(plan.expert_swaps(), 1);
        assert_eq!(plan.pairs.len(), 2);
        assert_eq!(apply_swaps(&cur, &plan), two);

        // 0 -> slot of 1, 1 -> slot of 2, 2 -> slot of 0.
        let three = place_experts(&small(vec![0.1, 0.5, 0.3, 0.05])).unwrap();
        let plan = plan_swaps(&cur, &three).unwrap();
        assert_eq!(plan.expert_swaps(), 2);
        assert_eq!(plan.pairs.len(), 4);
        assert_eq!(plan.rows_moved, 8);
        assert_eq!(apply_swaps(&cur, &plan), three);
    }

    #[test]
    fn swap_cost_formula() {
        let t = build_tier_table(&SystemConfig::default()).unwrap();
        let empty = SwapPlan {
            interval_swaps: vec![],
            pairs: vec![],
            rows_moved: 0,
        };
        assert_eq!(swap_cost(&empty, &t, 0.429).unwrap(), SwapCost::default());

        let pairs: Vec<(u64, u64)> = (0..56).map(|j| (j, 28672 + j)).collect();
        let plan = SwapPlan {
            interval_swaps: vec![(0, 28672)],
            rows_moved: 112,
            pairs,
        };
        let c = swap_cost(&plan, &t, 0.429).unwrap();
        let oracle = 56.0 * 2.0 * (34.56 + 55.15);
        assert!((c.time_ns - oracle).abs() < 1e-6);
        assert!(c.time_ns < 1e6);
        assert!((c.energy_pj - 56.0 * 4.0 * 32768.0 * 0.429).abs() < 1e-6);
    }

    #[test]
    fn kv_sits_between_regions() {
        let sys = preset("stratum-l").unwrap();
        let t = build_tier_table(&sys).unwrap();
        let m = model_preset("mixtral-8x7b").unwrap();
        let n = (m.num_layers * m.experts_per_layer) as usize;
        let p = PlacementProblem {
            layers: m.num_layers,
            experts: m.experts_per_layer,
            hot_per_layer: 2,
            freq: vec![1.0; n],
            expert_bytes: m.expert_bytes(),
            n_bank: sys.n_bank(),
            row_bytes: sys.row_buffer_bytes(),
            phi: sys.nmp_rows(),
        };
        let r = place_experts(&p).unwrap();
        let layout = RowLayout::new(&r, &t, 4).unwrap();
        assert_eq!(layout.hot_end, 64 * 56);
        assert_eq!(layout.kv_start, 4 * 4096);
        assert_eq!(layout.kv_end, 30720 - 192 * 56);
        assert_eq!(layout.kv_tier_for(1, &t).unwrap(), 4);
        assert!(layout.kv_tier_for(layout.kv_rows() + 1, &t).is_err());
    }
}
