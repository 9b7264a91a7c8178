//! Power and area feasibility of the DRAM + logic stack.
//!
//! The logic die and the DRAM die have separate thermal envelopes: the logic
//! budget `p_peak_w` bounds compute + misc power, and the DRAM power is
//! checked against `p_dram_budget_w` only when one is configured.

use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Result, SimError};
use crate::timing::build_tier_table;

/// Independent budget parameters. Rates that follow from the hardware
/// (fast-tier bandwidth, MAC count, clock, energies) come from the system
/// config via [`BudgetInputs::from_system`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetParams {
    pub p_peak_w: f64,
    /// Static and uncore logic power: 42.67 W logic total minus MAC power.
    pub p_misc_w: f64,
    pub p_dram_budget_w: Option<f64>,
    pub a_chip_mm2: f64,
    /// Fraction of the die area usable by active logic.
    pub alpha: f64,
    /// Calibration: 65,536 MACs plus PHY, periphery, misc and power TSVs
    /// total 76.63 mm^2.
    pub a_mac_mm2: f64,
    pub a_phy_mm2: f64,
    pub a_peri_mm2: f64,
    pub a_misc_mm2: f64,
    pub a_tsv_um2: f64,
    pub i_tsv_a: f64,
    pub tsv_redundancy: f64,
    pub v_dram_c: f64,
    pub v_dram_p: f64,
    pub v_logic: f64,
    /// Share of DRAM power drawn by the core (array) rail.
    pub dram_core_fraction: f64,
}

impl Default for BudgetParams {
    fn default() -> Self {
        Self {
            p_peak_w: 45.0,
            p_misc_w: 3.0862,
            p_dram_budget_w: None,
            a_chip_mm2: 121.0,
            alpha: 1.0,
            a_mac_mm2: 3.4598e-4,
            a_phy_mm2: 23.94,
            a_peri_mm2: 14.80,
            a_misc_mm2: 15.0,
            a_tsv_um2: 25.0,
            i_tsv_a: 0.036,
            tsv_redundancy: 2.0,
            v_dram_c: 1.1,
            v_dram_p: 1.1,
            v_logic: 0.7,
            dram_core_fraction: 0.8,
        }
    }
}

impl BudgetParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("budget.p_peak_w", self.p_peak_w),
            ("budget.a_chip_mm2", self.a_chip_mm2),
            ("budget.alpha", self.alpha),
            ("budget.a_tsv_um2", self.a_tsv_um2),
            ("budget.i_tsv_a", self.i_tsv_a),
            ("budget.tsv_redundancy", self.tsv_redundancy),
            ("budget.v_dram_c", self.v_dram_c),
            ("budget.v_dram_p", self.v_dram_p),
            ("budget.v_logic", self.v_logic),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::invalid(field, "must be positive"));
            }
        }
        let non_negative = [
            ("budget.p_misc_w", self.p_misc_w),
            ("budget.a_mac_mm2", self.a_mac_mm2),
            ("budget.a_phy_mm2", self.a_phy_mm2),
            ("budget.a_peri_mm2", self.a_peri_mm2),
            ("budget.a_misc_mm2", self.a_misc_mm2),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::invalid(field, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SimError::invalid("budget.alpha", "must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dram_core_fraction) {
            return Err(SimError::invalid(
                "budget.dram_core_fraction",
                "must be in [0, 1]",
            ));
        }
        if let Some(cap) = self.p_dram_budget_w {
            if !(cap > 0.0) {
                return Err(SimError::invalid(
                    "budget.p_dram_budget_w",
                    "must be positive",
                ));
            }
        }
        Ok(())
    }
}

/// Everything the power and area equations consume.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetInputs {
    pub params: BudgetParams,
    /// One chip streaming from its fastest tier, bytes/s.
    pub bw_fast_tier: f64,
    pub e_b_pj: f64,
    pub n_mac: u64,
    pub f_logic_ghz: f64,
    pub e_mac_pj: f64,
}

impl BudgetInputs {
    pub fn from_system(sys: &SystemConfig) -> Result<Self> {
        let table = build_tier_table(sys)?;
        Ok(Self {
            params: sys.budget.clone(),
            bw_fast_tier: table.chip_bandwidth(0),
            e_b_pj: sys.energy_per_bit_dram_pj,
            n_mac: sys.nmp.total_macs(),
            f_logic_ghz: sys.nmp.frequency_ghz,
            e_mac_pj: sys.nmp.e_mac_pj,
        })
    }

    pub fn with_macs(&self, n_mac: u64) -> Self {
        Self {
            n_mac,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerCheck {
    pub p_dram_w: f64,
    pub p_dram_c_w: f64,
    pub p_dram_p_w: f64,
    pub p_compute_w: f64,
    pub p_misc_w: f64,
    /// p_dram + p_compute + p_misc.
    pub total_w: f64,
    /// p_compute + p_misc, the part bounded by the logic budget.
    pub logic_w: f64,
    pub logic_feasible: bool,
    pub dram_feasible: bool,
    pub feasible: bool,
}

pub fn check_power(b: &BudgetInputs) -> PowerCheck {
    let p = &b.params;
    let p_dram_w = b.bw_fast_tier * 8.0 * b.e_b_pj * 1e-12;
    let p_compute_w = b.n_mac as f64 * b.f_logic_ghz * 1e9 * b.e_mac_pj * 1e-12;
    let logic_w = p_compute_w + p.p_misc_w;
    let logic_feasible = logic_w <= p.p_peak_w;
    let dram_feasible = p.p_dram_budget_w.is_none_or(|cap| p_dram_w <= cap);
    PowerCheck {
        p_dram_w,
        p_dram_c_w: p_dram_w * p.dram_core_fraction,
        p_dram_p_w: p_dram_w * (1.0 - p.dram_core_fraction),
        p_compute_w,
        p_misc_w: p.p_misc_w,
        total_w: p_dram_w + logic_w,
        logic_w,
        logic_feasible,
        dram_feasible,
        feasible: logic_feasible && dram_feasible,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaCheck {
    /// Power-delivery TSV area.
    pub a_pd_mm2: f64,
    pub a_mac_total_mm2: f64,
    pub total_mm2: f64,
    pub limit_mm2: f64,
    /// total / a_chip.
    pub utilization: f64,
    pub feasible: bool,
}

pub fn check_area(b: &BudgetInputs) -> Result<AreaCheck> {
    let p = &b.params;
    for (field, v) in [
        ("budget.v_dram_c", p.v_dram_c),
        ("budget.v_dram_p", p.v_dram_p),
        ("budget.v_logic", p.v_logic),
    ] {
        if !(v > 0.0) {
            return Err(SimError::invalid(field, "voltage must be positive"));
        }
    }
    let pw = check_power(b);
    let current_a =
        pw.p_dram_c_w / p.v_dram_c + pw.p_dram_p_w / p.v_dram_p + pw.logic_w / p.v_logic;
    let a_pd_mm2 = current_a * (p.a_tsv_um2 * 1e-6 / p.i_tsv_a) * p.tsv_redundancy;
    let a_mac_total_mm2 = b.n_mac as f64 * p.a_mac_mm2;
    let total_mm2 = a_pd_mm2 + a_mac_total_mm2 + p.a_phy_mm2 + p.a_peri_mm2 + p.a_misc_mm2;
    let limit_mm2 = p.alpha * p.a_chip_mm2;
    Ok(AreaCheck {
        a_pd_mm2,
        a_mac_total_mm2,
        total_mm2,
        limit_mm2,
        utilization: total_mm2 / p.a_chip_mm2,
        feasible: total_mm2 <= limit_mm2,
    })
}

fn feasible_at(b: &BudgetInputs, n_mac: u64) -> Result<bool> {
    let b = b.with_macs(n_mac);
    Ok(check_power(&b).feasible && check_area(&b)?.feasible)
}

/// Largest MAC count that satisfies both the power and the area budget.
pub fn max_macs(b: &BudgetInputs) -> Result<u64> {
    if !(b.e_mac_pj > 0.0) || !(b.f_logic_ghz > 0.0) {
        return Err(SimError::invalid(
            "e_mac_pj",
            "MAC energy and clock must be positive",
        ));
    }
    if !feasible_at(b, 0)? {
        return Err(SimError::Infeasible(
            "budget is exceeded even with zero MACs".to_string(),
        ));
    }
    let mut hi = 1u64;
    while feasible_at(b, hi)? {
        hi *= 2;
        if hi > 1 << 50 {
            return Err(SimError::Infeasible("MAC count is unbounded".to_string()));
        }
    }
    let mut lo = hi / 2;
    // Invariant: feasible(lo), !feasible(hi).
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if feasible_at(b, mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetLedger {
    pub inputs: BudgetInputs,
    pub power: PowerCheck,
    pub area: AreaCheck,
    pub max_macs: Option<u64>,
}

pub fn ledger(b: &BudgetInputs) -> Result<BudgetLedger> {
    Ok(BudgetLedger {
        inputs: b.clone(),
        power: check_power(b),
        area: check_area(b)?,
        max_macs: max_macs(b).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn defaults() -> BudgetInputs {
        BudgetInputs::from_system(&SystemConfig::default()).unwrap()
    }

    #[test]
    fn dram_and_compute_power() {
        let pw = check_power(&defaults());
        assert!(
            (pw.p_dram_w - 104.0).abs() / 104.0 < 0.01,
            "{}",
            pw.p_dram_w
        );
        let oracle = 30.34e12 * 8.0 * 0.429e-12;
        assert!((pw.p_dram_w - oracle).abs() / oracle < 0.005);
        assert!((pw.p_compute_w - 39.6).abs() / 39.6 < 0.01);
        assert!((pw.logic_w - 42.67).abs() < 0.01);
        assert!(pw.feasible);
        assert_relative_eq!(
            pw.p_dram_c_w + pw.p_dram_p_w,
            pw.p_dram_w,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_macs_zero_misc() {
        let mut b = defaults().with_macs(0);
        b.params.p_misc_w = 0.0;
        let pw = check_power(&b);
        assert_eq!(pw.p_compute_w, 0.0);
        assert!(pw.feasible);
    }

    #[test]
    fn dram_cap_is_optional() {
        let mut b = defaults();
        b.params.p_dram_budget_w = Some(100.0);
        assert!(!check_power(&b).feasible);
        b.params.p_dram_budget_w = Some(110.0);
        assert!(check_power(&b).feasible);
    }

    #[test]
    fn power_delivery_area() {
        let b = defaults();
        let a = check_area(&b).unwrap();
        assert!((a.a_pd_mm2 - 0.21).abs() / 0.21 < 0.05, "{}", a.a_pd_mm2);
        let pw = check_power(&b);
        let oracle = (pw.p_dram_w / 1.1 + pw.logic_w / 0.7) * (25e-6 / 0.036) * 2.0;
        assert_relative_eq!(a.a_pd_mm2, oracle, max_relative = 1e-12);

        let mut single = b.clone();
        single.params.tsv_redundancy = 1.0;
        assert_relative_eq!(check_area(&single).unwrap().a_pd_mm2 * 2.0, a.a_pd_mm2);
    }

    #[test]
    fn zero_power_zero_tsv_area() {
        let mut b = defaults().with_macs(0);
        b.params.p_misc_w = 0.0;
        b.bw_fast_tier = 0.0;
        assert_eq!(check_area(&b).unwrap().a_pd_mm2, 0.0);
    }

    #[test]
    fn zero_voltage_rejected() {
        let mut b = defaults();
        b.params.v_logic = 0.0;
        assert!(check_area(&b).is_err());
    }

    #[test]
    fn area_calibration() {
        let a = check_area(&defaults()).unwrap();
        assert!(
            (a.total_mm2 - 76.63).abs() / 76.63 < 1e-3,
            "{}",
            a.total_mm2
        );
        assert!((a.utilization - 0.63).abs() / 0.63 < 0.02);
    }

    #[test]
    fn max_macs_in_range() {
        let b = defaults();
        let n = max_macs(&b).unwrap();
        assert!((60_000..=70_000).contains(&n), "{n}");
        assert!(feasible_at(&b, n).unwrap());
        assert!(!feasible_at(&b, n + 1).unwrap());

        let mut doubled = b.clone();
        doubled.e_mac_pj *= 2.0;
        let half = max_macs(&doubled).unwrap();
        assert!((half as f64 / (n as f64 / 2.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn max_macs_infeasible() {
        let mut b = defaults();
        b.params.p_peak_w = 1.0;
        assert!(matches!(max_macs(&b), Err(SimError::Infeasible(_))));
    }
}
