//! Mono3D DRAM tier model.
//!
//! Rows of every bank are split into equal contiguous bands (tiers). Tier 0
//! holds the lowest row addresses and the shallowest wordline layers, so it
//! has the shortest activation latency. Sustained bank bandwidth is modeled
//! as one full row per `tRC` (closed-page streaming).

use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Result, SimError};

/// Measured device timing, as published for the 1024-layer array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceTiming {
    /// Worst-case tRCD of each tier, fastest first.
    pub trcd_ns: Vec<f64>,
    pub trp_ns: f64,
    /// tRAS = tRCD + this offset.
    pub tras_offset_ns: f64,
    /// Layer count the `trcd_ns` table was characterized at.
    pub profiled_layers: u32,
}

impl Default for DeviceTiming {
    fn default() -> Self {
        Self {
            trcd_ns: vec![2.29, 3.92, 5.99, 8.50, 11.44, 14.82, 18.63, 22.88],
            trp_ns: 4.77,
            tras_offset_ns: 27.50,
            profiled_layers: 1024,
        }
    }
}

/// Per-tier timing parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TierTiming {
    trcd: Vec<f64>,
    trp: f64,
    tras_offset: f64,
}

impl TierTiming {
    /// Builds a timing table; `trcd` must be strictly increasing.
    pub fn new(trcd: Vec<f64>, trp: f64, tras_offset: f64) -> Result<Self> {
        if trcd.is_empty() {
            return Err(SimError::invalid(
                "trcd_ns",
                "at least one tier is required",
            ));
        }
        if trcd.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(SimError::invalid("trcd_ns", "values must be positive"));
        }
        if trcd.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::invalid("trcd_ns", "must be strictly increasing"));
        }
        if !(trp > 0.0) || !(tras_offset >= 0.0) {
            return Err(SimError::invalid(
                "trp_ns",
                "timing offsets must be positive",
            ));
        }
        Ok(Self {
            trcd,
            trp,
            tras_offset,
        })
    }

    pub fn num_tiers(&self) -> usize {
        self.trcd.len()
    }

    pub fn trcd(&self, tier: usize) -> f64 {
        self.trcd[tier]
    }

    pub fn trcd_all(&self) -> &[f64] {
        &self.trcd
    }

    pub fn trp(&self) -> f64 {
        self.trp
    }

    pub fn tras_offset(&self) -> f64 {
        self.tras_offset
    }

    pub fn tras(&self, tier: usize) -> f64 {
        self.trcd[tier] + self.tras_offset
    }

    pub fn trc(&self, tier: usize) -> f64 {
        self.trp + self.tras(tier)
    }

    /// Collapses the table to the slowest tier only.
    pub fn worst_case(&self) -> TierTiming {
        TierTiming {
            trcd: vec![*self.trcd.last().expect("non-empty")],
            trp: self.trp,
            tras_offset: self.tras_offset,
        }
    }
}

/// Row-to-tier mapping plus per-tier bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TierTable {
    rows_per_bank: u64,
    rows_per_tier: u64,
    row_bytes: u64,
    banks_per_chip: u64,
    timing: TierTiming,
    bank_bw: Vec<f64>,
    chip_bw: Vec<f64>,
}

impl TierTable {
    pub fn new(
        timing: TierTiming,
        rows_per_bank: u64,
        row_bytes: u64,
        banks_per_chip: u64,
    ) -> Result<Self> {
        let tiers = timing.num_tiers() as u64;
        if rows_per_bank == 0 || !rows_per_bank.is_multiple_of(tiers) {
            return Err(SimError::invalid(
                "num_tiers",
                format!("{rows_per_bank} rows per bank do not split into {tiers} equal tiers"),
            ));
        }
        let bank_bw: Vec<f64> = (0..timing.num_tiers())
            .map(|t| row_bytes as f64 / (timing.trc(t) * 1e-9))
            .collect();
        let chip_bw = bank_bw
            .iter()
            .map(|bw| bw * banks_per_chip as f64)
            .collect();
        Ok(Self {
            rows_per_bank,
            rows_per_tier: rows_per_bank / tiers,
            row_bytes,
            banks_per_chip,
            timing,
            bank_bw,
            chip_bw,
        })
    }

    pub fn num_tiers(&self) -> usize {
        self.timing.num_tiers()
    }

    pub fn rows_per_bank(&self) -> u64 {
        self.rows_per_bank
    }

    pub fn rows_per_tier(&self) -> u64 {
        self.rows_per_tier
    }

    pub fn row_bytes(&self) -> u64 {
        self.row_bytes
    }

    pub fn timing(&self) -> &TierTiming {
        &self.timing
    }

    pub fn trcd(&self, tier: usize) -> f64 {
        self.timing.trcd(tier)
    }

    pub fn trc(&self, tier: usize) -> f64 {
        self.timing.trc(tier)
    }

    /// Sustained bandwidth of one bank in `tier`, bytes/s.
    pub fn bank_bandwidth(&self, tier: usize) -> f64 {
        self.bank_bw[tier]
    }

    /// Aggregate bandwidth of one chip when all banks stream from `tier`, bytes/s.
    pub fn chip_bandwidth(&self, tier: usize) -> f64 {
        self.chip_bw[tier]
    }

    pub fn tier_of_row(&self, row: u64) -> Result<usize> {
        if row >= self.rows_per_bank {
            return Err(SimError::OutOfRange(format!(
                "row {row} (bank has {} rows)",
                self.rows_per_bank
            )));
        }
        Ok((row / self.rows_per_tier) as usize)
    }

    /// First row of `tier`.
    pub fn tier_start(&self, tier: usize) -> u64 {
        tier as u64 * self.rows_per_tier
    }

    /// Same row space, every access charged at the slowest tier's timing.
    pub fn without_tiering(&self) -> TierTable {
        TierTable::new(
            self.timing.worst_case(),
            self.rows_per_bank,
            self.row_bytes,
            self.banks_per_chip,
        )
        .expect("single tier always divides the row space")
    }

    /// Time for one bank to deliver `bytes` starting at `row`: one tRCD plus
    /// one full row cycle per row touched.
    pub fn access_time(&self, row: u64, bytes: u64) -> Result<f64> {
        if bytes == 0 {
            return Err(SimError::invalid(
                "bytes",
                "access must move at least one byte",
            ));
        }
        let tier = self.tier_of_row(row)?;
        let rows = bytes.div_ceil(self.row_bytes);
        Ok(self.trcd(tier) + rows as f64 * self.trc(tier))
    }
}

/// Builds the tier table for a system. When the configured layer or tier
/// count differs from the profiled device table, the staircase curve is
/// refitted and requantized.
pub fn build_tier_table(sys: &SystemConfig) -> Result<TierTable> {
    if sys.num_tiers == 0 || !sys.dram_layers.is_multiple_of(sys.num_tiers) {
        return Err(SimError::invalid(
            "dram_layers",
            format!(
                "{} layers are not divisible into {} tiers",
                sys.dram_layers, sys.num_tiers
            ),
        ));
    }
    let dev = &sys.timing;
    let timing =
        if dev.profiled_layers == sys.dram_layers && dev.trcd_ns.len() == sys.num_tiers as usize {
            TierTiming::new(dev.trcd_ns.clone(), dev.trp_ns, dev.tras_offset_ns)?
        } else {
            let profiled = TierTiming::new(dev.trcd_ns.clone(), dev.trp_ns, dev.tras_offset_ns)?;
            let model = fit_staircase(&profiled, dev.profiled_layers)?;
            retier(&model, sys.dram_layers, sys.num_tiers)?
        };
    TierTable::new(
        timing,
        sys.rows_per_bank(),
        sys.row_buffer_bytes(),
        sys.banks_per_chip(),
    )
}

/// Quadratic tRCD-versus-depth curve fitted to a tier table.
///
/// The abscissa is the tier index of the profiled table; a layer `l` of the
/// profiled array maps to `(l + 1) * fit_tiers / fit_layers - 1`, so each
/// tier's deepest layer lands on its integer index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaircaseModel {
    /// Constant, linear and quadratic coefficients.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub fit_layers: u32,
    pub fit_tiers: u32,
    pub trp: f64,
    pub tras_offset: f64,
}

impl StaircaseModel {
    pub fn eval(&self, x: f64) -> f64 {
        self.a + self.b * x + self.c * x * x
    }

    /// Modeled tRCD of wordline layer `layer` (0 = shallowest).
    pub fn trcd_at_layer(&self, layer: u32) -> f64 {
        let x = (layer as f64 + 1.0) * self.fit_tiers as f64 / self.fit_layers as f64 - 1.0;
        self.eval(x)
    }
}

/// Least-squares quadratic over the tier points of `timing`.
pub fn fit_staircase(timing: &TierTiming, layers: u32) -> Result<StaircaseModel> {
    let ys = timing.trcd_all();
    if ys.len() < 3 {
        return Err(SimError::DegenerateFit(format!(
            "{} tier points cannot determine a quadratic",
            ys.len()
        )));
    }
    if layers == 0 {
        return Err(SimError::invalid("layers", "must be positive"));
    }
    // Normal equations for [a, b, c].
    let mut s = [0.0f64; 5];
    let mut t = [0.0f64; 3];
    for (i, &y) in ys.iter().enumerate() {
        let x = i as f64;
        let mut p = 1.0;
        for k in 0..5 {
            s[k] += p;
            if k < 3 {
                t[k] += p * y;
            }
            p *= x;
        }
    }
    let m = [[s[0], s[1], s[2]], [s[1], s[2], s[3]], [s[2], s[3], s[4]]];
    let [a, b, c] = solve3(m, t)
        .ok_or_else(|| SimError::DegenerateFit("normal equations are singular".to_string()))?;
    Ok(StaircaseModel {
        a,
        b,
        c,
        fit_layers: layers,
        fit_tiers: ys.len() as u32,
        trp: timing.trp(),
        tras_offset: timing.tras_offset(),
    })
}

fn solve3(mut m: [[f64; 3]; 3], mut v: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        v.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            v[row] -= f * v[col];
        }
    }
    let mut out = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| m[row][k] * out[k]).sum();
        out[row] = (v[row] - tail) / m[row][row];
    }
    Some(out)
}

/// Requantizes the staircase curve for an array of `layers` wordline layers
/// split into `num_tiers` equal tiers. Each tier takes the latency of its
/// deepest layer.
pub fn retier(model: &StaircaseModel, layers: u32, num_tiers: u32) -> Result<TierTiming> {
    if layers == 0 {
        return Err(SimError::invalid("layers", "must be positive"));
    }
    if num_tiers == 0 || !layers.is_multiple_of(num_tiers) {
        return Err(SimError::invalid(
            "num_tiers",
            format!("{layers} layers are not divisible into {num_tiers} tiers"),
        ));
    }
    if layers > model.fit_layers {
        return Err(SimError::invalid(
            "layers",
            format!(
                "{layers} exceeds the {} layers the curve was fitted on",
                model.fit_layers
            ),
        ));
    }
    let per_tier = layers / num_tiers;
    let trcd = (0..num_tiers)
        .map(|t| model.trcd_at_layer((t + 1) * per_tier - 1))
        .collect();
    TierTiming::new(trcd, model.trp, model.tras_offset)
}

/// DRAM array-to-logic transfer energy in pJ.
pub fn dram_energy(bits: u64, energy_per_bit_pj: f64) -> f64 {
    bits as f64 * energy_per_bit_pj
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn default_table() -> TierTable {
        build_tier_table(&SystemConfig::default()).unwrap()
    }

    #[test]
    fn default_trc_values() {
        let t = default_table();
        assert_relative_eq!(t.trc(0), 34.56, epsilon = 1e-9);
        assert_relative_eq!(t.trc(7), 55.15, epsilon = 1e-9);
        for i in 0..8 {
            let trcd = DeviceTiming::default().trcd_ns[i];
            assert_relative_eq!(t.trc(i), 4.77 + trcd + 27.50, epsilon = 1e-9);
        }
    }

    #[test]
    fn chip_bandwidth_matches_published_range() {
        let t = default_table();
        // 256 banks x 4096 B per tRC
        let oracle = |trc: f64| 256.0 * 4096.0 / (trc * 1e-9);
        assert_relative_eq!(t.chip_bandwidth(0), oracle(34.56), max_relative = 1e-12);
        assert!((t.chip_bandwidth(0) / 30.34e12 - 1.0).abs() < 0.005);
        assert!((t.chip_bandwidth(7) / 19.01e12 - 1.0).abs() < 0.005);
    }

    #[test]
    fn single_tier_uses_worst_latency() {
        let sys = SystemConfig {
            num_tiers: 1,
            ..SystemConfig::default()
        };
        let t = build_tier_table(&sys).unwrap();
        assert_eq!(t.num_tiers(), 1);
        assert!((t.trcd(0) - 22.88).abs() / 22.88 < 0.02);
        assert!((t.chip_bandwidth(0) / 19.01e12 - 1.0).abs() < 0.005);
    }

    #[test]
    fn non_divisible_layers_rejected() {
        let sys = SystemConfig {
            dram_layers: 1020,
            num_tiers: 8,
            ..SystemConfig::default()
        };
        assert!(build_tier_table(&sys).is_err());
    }

    #[test]
    fn rows_map_to_tiers_in_order() {
        let t = default_table();
        assert_eq!(t.rows_per_tier(), 4096);
        assert_eq!(t.tier_of_row(0).unwrap(), 0);
        assert_eq!(t.tier_of_row(4095).unwrap(), 0);
        assert_eq!(t.tier_of_row(4096).unwrap(), 1);
        assert_eq!(t.tier_of_row(32767).unwrap(), 7);
        assert!(t.tier_of_row(32768).is_err());
    }

    #[test]
    fn staircase_fit_matches_three_point_solution() {
        let timing = default_table().timing().clone();
        let m = fit_staircase(&timing, 1024).unwrap();
        // Exact through tiers 0, 1 and 7.
        let c = (20.59 - 7.0 * 1.63) / 42.0;
        let b = 1.63 - c;
        assert!((m.c - c).abs() < 0.005, "c = {}", m.c);
        assert!((m.b - b).abs() < 0.02, "b = {}", m.b);
        assert!((m.a - 2.29).abs() < 0.02, "a = {}", m.a);
        assert!((m.eval(2.0) - 5.99).abs() / 5.99 < 0.02);
        for (i, y) in timing.trcd_all().iter().enumerate() {
            assert!((m.eval(i as f64) - y).abs() / y < 0.02);
        }
    }

    #[test]
    fn staircase_constant_table_is_flat() {
        let timing = TierTiming {
            trcd: vec![5.0; 4],
            trp: 4.77,
            tras_offset: 27.5,
        };
        let m = fit_staircase(&timing, 1024).unwrap();
        assert!(m.b.abs() < 1e-9 && m.c.abs() < 1e-9);
        assert_relative_eq!(m.a, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn staircase_two_points_rejected() {
        let timing = TierTiming::new(vec![2.0, 3.0], 4.77, 27.5).unwrap();
        assert!(matches!(
            fit_staircase(&timing, 1024),
            Err(SimError::DegenerateFit(_))
        ));
    }

    #[test]
    fn retier_round_trip_and_half_depth() {
        let timing = default_table().timing().clone();
        let m = fit_staircase(&timing, 1024).unwrap();
        let same = retier(&m, 1024, 8).unwrap();
        for i in 0..8 {
            assert!((same.trcd(i) - timing.trcd(i)).abs() / timing.trcd(i) < 0.02);
        }
        let one = retier(&m, 1024, 1).unwrap();
        assert!((one.trcd(0) - 22.88).abs() / 22.88 < 0.02);

        let half = retier(&m, 512, 8).unwrap();
        let ratio = half.trc(7) / half.trc(0);
        assert!((1.15..=1.45).contains(&ratio), "ratio {ratio}");
        assert!(retier(&m, 0, 8).is_err());
        assert!(retier(&m, 2048, 8).is_err());
    }

    #[test]
    fn access_time_formula() {
        let t = default_table();
        let one_row = t.access_time(0, 4096).unwrap();
        assert_relative_eq!(one_row, 2.29 + 34.56, epsilon = 1e-9);
        assert_relative_eq!(
            t.access_time(0, 4097).unwrap(),
            2.29 + 2.0 * 34.56,
            epsilon = 1e-9
        );
        let big = 1u64 << 30;
        let slow = t.access_time(32767, big).unwrap();
        let fast = t.access_time(0, big).unwrap();
        assert!((slow / fast - 1.596).abs() < 0.01);
        assert!(t.access_time(1 << 20, 64).is_err());
        assert!(t.access_time(0, 0).is_err());
    }

    #[test]
    fn dram_energy_per_bit() {
        assert_relative_eq!(dram_energy(1, 0.429), 0.429);
        assert_eq!(dram_energy(0, 0.429), 0.0);
        let t = default_table();
        let bits_per_s = t.chip_bandwidth(0) * 8.0;
        let watts = bits_per_s * 0.429e-12;
        assert!((watts - 104.0).abs() / 104.0 < 0.01, "{watts}");
    }

    #[test]
    fn without_tiering_is_uniform_worst() {
        let t = default_table().without_tiering();
        assert_eq!(t.num_tiers(), 1);
        assert_eq!(t.tier_of_row(32767).unwrap(), 0);
        assert_relative_eq!(t.trc(0), 55.15, epsilon = 1e-9);
    }
}
