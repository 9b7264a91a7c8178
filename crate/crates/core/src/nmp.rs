//! Cost primitives of the logic-die processor.
//!
//! A chip has one PU per channel and one PE per bank. PEs run GeMM/GeMV on a
//! 16x16 MAC array fed directly by their bank; PUs own a SIMD special
//! function engine (SFE) and a router on a bidirectional ring.

use serde::{Deserialize, Serialize};

use crate::energy::Energy;
use crate::error::{Result, SimError};
use crate::timing::TierTable;

/// SFE cycles per element for each element-wise operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfeCycles {
    pub activation: u32,
    pub hadamard: u32,
    pub weighted_sum: u32,
    pub softmax_max: u32,
    /// exp is decomposed into several SIMD primitives.
    pub softmax_exp: u32,
    pub softmax_norm: u32,
}

impl Default for SfeCycles {
    fn default() -> Self {
        Self {
            activation: 1,
            hadamard: 1,
            weighted_sum: 1,
            softmax_max: 1,
            softmax_exp: 4,
            softmax_norm: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmpSpec {
    pub pus_per_chip: u32,
    pub pes_per_pu: u32,
    pub mac_rows: u32,
    pub mac_cols: u32,
    pub simd_width: u32,
    /// Per ring link, bytes/s.
    pub ring_link_bw: f64,
    /// Per PU.
    pub shared_mem_bytes: u64,
    /// Per PE.
    pub psum_mem_bytes: u64,
    pub row_swap_buffer_bytes: u64,
    pub e_mac_pj: f64,
    /// Per element per SFE cycle.
    pub e_sfe_pj: f64,
    /// Calibrated so that full tensor-core activity plus fast-tier
    /// streaming through SRAM, with all SFEs and links busy, draws 42.67 W.
    pub e_sram_bit_pj: f64,
    pub e_link_bit_pj: f64,
    pub frequency_ghz: f64,
    pub router_hop_ns: f64,
    pub packet_bytes: u32,
    pub sfe_cycles: SfeCycles,
}

impl Default for NmpSpec {
    fn default() -> Self {
        Self {
            pus_per_chip: 16,
            pes_per_pu: 16,
            mac_rows: 16,
            mac_cols: 16,
            simd_width: 256,
            ring_link_bw: 128e9,
            shared_mem_bytes: 1_310_720,
            psum_mem_bytes: 65_536,
            row_swap_buffer_bytes: 8192,
            e_mac_pj: 0.604,
            e_sfe_pj: 0.1,
            e_sram_bit_pj: 0.007652,
            e_link_bit_pj: 0.05,
            frequency_ghz: 1.0,
            router_hop_ns: 2.0,
            packet_bytes: 64,
            sfe_cycles: SfeCycles::default(),
        }
    }
}

impl NmpSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("nmp.pus_per_chip", self.pus_per_chip),
            ("nmp.pes_per_pu", self.pes_per_pu),
            ("nmp.mac_rows", self.mac_rows),
            ("nmp.mac_cols", self.mac_cols),
            ("nmp.simd_width", self.simd_width),
            ("nmp.packet_bytes", self.packet_bytes),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(SimError::invalid(field, "must be at least 1"));
            }
        }
        let positive = [
            ("nmp.ring_link_bw", self.ring_link_bw),
            ("nmp.frequency_ghz", self.frequency_ghz),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::invalid(field, "must be positive"));
            }
        }
        let non_negative = [
            ("nmp.e_mac_pj", self.e_mac_pj),
            ("nmp.e_sfe_pj", self.e_sfe_pj),
            ("nmp.e_sram_bit_pj", self.e_sram_bit_pj),
            ("nmp.e_link_bit_pj", self.e_link_bit_pj),
            ("nmp.router_hop_ns", self.router_hop_ns),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::invalid(field, "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn pes_per_chip(&self) -> u32 {
        self.pus_per_chip * self.pes_per_pu
    }

    pub fn macs_per_pe(&self) -> u64 {
        self.mac_rows as u64 * self.mac_cols as u64
    }

    pub fn total_macs(&self) -> u64 {
        self.pes_per_chip() as u64 * self.macs_per_pe()
    }

    /// 2 FLOP per MAC per cycle.
    pub fn peak_flops(&self) -> f64 {
        self.total_macs() as f64 * 2.0 * self.frequency_ghz * 1e9
    }

    /// Sum of all ring link bandwidths on one chip, bytes/s.
    pub fn aggregate_ring_bw(&self) -> f64 {
        self.pus_per_chip as f64 * self.ring_link_bw
    }

    fn cycle_ns(&self) -> f64 {
        1.0 / self.frequency_ghz
    }

    /// Logic-die power with every MAC, SFE lane and link busy while the
    /// chip streams `dram_bytes_per_s` through PE SRAM.
    pub fn peak_logic_power_w(&self, dram_bytes_per_s: f64) -> f64 {
        let hz = self.frequency_ghz * 1e9;
        let mac = self.total_macs() as f64 * hz * self.e_mac_pj;
        let sfe = (self.pus_per_chip as f64 * self.simd_width as f64) * hz * self.e_sfe_pj;
        let link = self.aggregate_ring_bw() * 8.0 * self.e_link_bit_pj;
        let sram = dram_bytes_per_s * 8.0 * self.e_sram_bit_pj;
        (mac + sfe + link + sram) * 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub bytes_per_elem: u64,
}

impl GemmShape {
    pub fn new(m: u64, k: u64, n: u64, bytes_per_elem: u64) -> Result<Self> {
        if m == 0 || k == 0 || n == 0 || bytes_per_elem == 0 {
            return Err(SimError::invalid(
                "gemm shape",
                "all dimensions must be at least 1",
            ));
        }
        Ok(Self {
            m,
            k,
            n,
            bytes_per_elem,
        })
    }

    pub fn weight_bytes(&self) -> u64 {
        self.k * self.n * self.bytes_per_elem
    }

    pub fn macs(&self) -> u64 {
        self.m * self.k * self.n
    }
}

/// Compute and memory components of one GeMM on a set of PEs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemmCost {
    pub compute_ns: f64,
    pub memory_ns: f64,
}

impl GemmCost {
    pub fn time_ns(&self) -> f64 {
        self.compute_ns.max(self.memory_ns)
    }
}

/// Roofline cost of `shape` split along `n` over `pes` PEs whose weights sit
/// in `tier` of their local banks.
pub fn gemm_cost(
    spec: &NmpSpec,
    shape: &GemmShape,
    pes: u32,
    tier: usize,
    table: &TierTable,
) -> Result<GemmCost> {
    if pes == 0 || pes > spec.pes_per_chip() {
        return Err(SimError::OutOfRange(format!(
            "{pes} PEs (chip has {})",
            spec.pes_per_chip()
        )));
    }
    if tier >= table.num_tiers() {
        return Err(SimError::OutOfRange(format!("tier {tier}")));
    }
    let cycles = shape.m
        * shape.k.div_ceil(spec.mac_rows as u64)
        * shape.n.div_ceil(spec.mac_cols as u64 * pes as u64);
    let compute_ns = cycles as f64 * spec.cycle_ns();
    let stream_s = shape.weight_bytes() as f64 / (pes as f64 * table.bank_bandwidth(tier));
    let memory_ns = table.trcd(tier) + stream_s * 1e9;
    Ok(GemmCost {
        compute_ns,
        memory_ns,
    })
}

pub fn gemm_time(
    spec: &NmpSpec,
    shape: &GemmShape,
    pes: u32,
    tier: usize,
    table: &TierTable,
) -> Result<f64> {
    gemm_cost(spec, shape, pes, tier, table).map(|c| c.time_ns())
}

pub fn sfe_time(spec: &NmpSpec, elems: u64, cycles_per_elem: u32) -> f64 {
    elems.div_ceil(spec.simd_width as u64) as f64 * cycles_per_elem as f64 * spec.cycle_ns()
}

fn ring_steps(spec: &NmpSpec, group: u32) -> Result<u64> {
    if group == 0 || group > spec.pus_per_chip {
        return Err(SimError::OutOfRange(format!(
            "ring group of {group} PUs (chip has {})",
            spec.pus_per_chip
        )));
    }
    Ok(((group - 1) as u64).div_ceil(2))
}

/// Bidirectional ring all-gather of one `slice_bytes` slice per PU.
pub fn all_gather_time(spec: &NmpSpec, group: u32, slice_bytes: u64) -> Result<f64> {
    let steps = ring_steps(spec, group)?;
    Ok(steps as f64 * slice_bytes as f64 / spec.ring_link_bw * 1e9)
}

/// Reduce-scatter with in-router accumulation; same step count as all-gather.
pub fn reduce_scatter_time(spec: &NmpSpec, group: u32, slice_bytes: u64) -> Result<f64> {
    all_gather_time(spec, group, slice_bytes)
}

/// Bytes that cross links during a ring all-gather or reduce-scatter.
pub fn ring_traffic_bytes(group: u32, slice_bytes: u64) -> u64 {
    let g = group as u64;
    g * g.saturating_sub(1) * slice_bytes
}

/// One circulation of a single packet around the group.
pub fn scalar_exchange_time(spec: &NmpSpec, group: u32) -> f64 {
    let hops = group.saturating_sub(1) as f64;
    hops * (spec.packet_bytes as f64 / spec.ring_link_bw * 1e9 + spec.router_hop_ns)
}

/// Dynamic logic energy; `sfe_ops` counts element-cycles.
pub fn compute_energy(
    spec: &NmpSpec,
    macs: u64,
    sfe_ops: u64,
    sram_bits: u64,
    link_bits: u64,
) -> Energy {
    Energy {
        mac: macs as f64 * spec.e_mac_pj,
        sfe: sfe_ops as f64 * spec.e_sfe_pj,
        sram: sram_bits as f64 * spec.e_sram_bit_pj,
        link: link_bits as f64 * spec.e_link_bit_pj,
        ..Energy::default()
    }
}
