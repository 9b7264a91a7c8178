//! MoE layer execution on the NMP.
//!
//! Every PU of every chip works on one expert at a time. W1/W2 are split by
//! columns and W3 by rows, so each PU streams exactly `S_E / pu_count` weight
//! bytes and sees the full token input. Within a PU the slice is split over
//! PEs along its longer dimension. Partial outputs are reduce-scattered on
//! each chip's ring; the per-chip partial sums are added by the xPU when it
//! reads the layer output back.

use std::ops::Range;

use serde::Serialize;

use crate::config::{ModelConfig, SystemConfig};
use crate::energy::Energy;
use crate::engine::{Resource, Schedule, TaskId};
use crate::error::{Result, SimError};
use crate::nmp::{self, GemmShape};
use crate::timing::TierTable;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertPartitionPlan {
    pub num_chips: u32,
    pub pus_per_chip: u32,
    pub pes_per_pu: u32,
    pub hidden_dim: u64,
    pub intermediate_dim: u64,
    pub bytes_per_param: u64,
    /// Column ranges of W1 and W2, one per PU.
    pub w12_col_slices: Vec<Range<u64>>,
    /// Row ranges of W3, one per PU.
    pub w3_row_slices: Vec<Range<u64>>,
    /// Split of the widest PU slice across its PEs, along the longer of
    /// (hidden_dim, slice width).
    pub pe_subtiles: Vec<Range<u64>>,
}

/// Splits `0..total` into `parts` contiguous ranges whose sizes differ by at
/// most one.
pub fn balanced_ranges(total: u64, parts: u64) -> Vec<Range<u64>> {
    let base = total / parts;
    let extra = total % parts;
    let mut out = Vec::with_capacity(parts as usize);
    let mut start = 0;
    for i in 0..parts {
        let len = base + u64::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

impl ExpertPartitionPlan {
    pub fn new(
        hidden_dim: u64,
        intermediate_dim: u64,
        bytes_per_param: u64,
        num_chips: u32,
        pus_per_chip: u32,
        pes_per_pu: u32,
    ) -> Result<Self> {
        let pu_count = num_chips as u64 * pus_per_chip as u64;
        if pu_count == 0 || pes_per_pu == 0 {
            return Err(SimError::invalid(
                "pus_per_chip",
                "need at least one PU and PE",
            ));
        }
        if intermediate_dim < pu_count {
            return Err(SimError::invalid(
                "model.intermediate_dim",
                format!("{intermediate_dim} columns cannot be split over {pu_count} PUs"),
            ));
        }
        let slices = balanced_ranges(intermediate_dim, pu_count);
        let widest = intermediate_dim.div_ceil(pu_count);
        let longer = widest.max(hidden_dim);
        if longer < pes_per_pu as u64 {
            return Err(SimError::invalid(
                "model.hidden_dim",
                format!("slices are too small for {pes_per_pu} PEs"),
            ));
        }
        Ok(Self {
            num_chips,
            pus_per_chip,
            pes_per_pu,
            hidden_dim,
            intermediate_dim,
            bytes_per_param,
            w12_col_slices: slices.clone(),
            w3_row_slices: slices,
            pe_subtiles: balanced_ranges(longer, pes_per_pu as u64),
        })
    }

    pub fn pu_count(&self) -> u32 {
        self.num_chips * self.pus_per_chip
    }

    /// Width of the widest W1/W2 column slice.
    pub fn slice_width(&self) -> u64 {
        self.w12_col_slices
            .iter()
            .map(|r| r.end - r.start)
            .max()
            .unwrap_or(0)
    }

    pub fn expert_bytes(&self) -> u64 {
        3 * self.hidden_dim * self.intermediate_dim * self.bytes_per_param
    }

    /// Weight bytes one PU streams for one expert.
    pub fn weight_bytes_per_pu(&self, pu: usize) -> u64 {
        let w = self.w12_col_slices[pu].end - self.w12_col_slices[pu].start;
        3 * self.hidden_dim * w * self.bytes_per_param
    }

    /// Per-PU GeMM with the longer weight dimension split across PEs.
    fn pu_gemm(&self, m: u64) -> Result<GemmShape> {
        let w = self.slice_width();
        let (k, n) = if w >= self.hidden_dim {
            (self.hidden_dim, w)
        } else {
            (w, self.hidden_dim)
        };
        GemmShape::new(m, k, n, self.bytes_per_param)
    }
}

pub fn plan_partition(model: &ModelConfig, sys: &SystemConfig) -> Result<ExpertPartitionPlan> {
    ExpertPartitionPlan::new(
        model.hidden_dim,
        model.intermediate_dim,
        model.bytes_per_param,
        sys.num_chips,
        sys.nmp.pus_per_chip,
        sys.nmp.pes_per_pu,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExpertInvocation {
    pub layer: u32,
    pub expert: u32,
    pub tokens: u64,
    /// Slowest tier holding this expert's rows.
    pub tier: usize,
}

/// Stage durations of one expert, ns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ExpertStages {
    pub gemm1: f64,
    pub gemm2: f64,
    pub activation: f64,
    pub hadamard: f64,
    pub gemm3: f64,
    pub reduce_scatter: f64,
    pub weighted_sum: f64,
}

impl ExpertStages {
    pub fn serial_sum(&self) -> f64 {
        self.gemm1
            + self.gemm2
            + self.activation
            + self.hadamard
            + self.gemm3
            + self.reduce_scatter
            + self.weighted_sum
    }
}

/// Stage durations and system-wide energy of one expert invocation.
pub fn expert_stages(
    plan: &ExpertPartitionPlan,
    tokens: u64,
    tier: usize,
    table: &TierTable,
    sys: &SystemConfig,
) -> Result<(ExpertStages, Energy)> {
    if tokens == 0 {
        return Ok((ExpertStages::default(), Energy::default()));
    }
    let spec = &sys.nmp;
    let shape = plan.pu_gemm(tokens)?;
    let gemm = nmp::gemm_time(spec, &shape, plan.pes_per_pu, tier, table)?;
    let width = plan.slice_width();
    let cyc = &spec.sfe_cycles;
    let act = nmp::sfe_time(spec, tokens * width, cyc.activation);
    let had = nmp::sfe_time(spec, tokens * width, cyc.hadamard);
    let out_bytes = tokens * plan.hidden_dim * plan.bytes_per_param;
    let rs_slice = out_bytes.div_ceil(plan.pus_per_chip as u64);
    let rs = nmp::reduce_scatter_time(spec, plan.pus_per_chip, rs_slice)?;
    let ws_elems = tokens * plan.hidden_dim.div_ceil(plan.pus_per_chip as u64);
    let ws = nmp::sfe_time(spec, ws_elems, cyc.weighted_sum);
    let stages = ExpertStages {
        gemm1: gemm,
        gemm2: gemm,
        activation: act,
        hadamard: had,
        gemm3: gemm,
        reduce_scatter: rs,
        weighted_sum: ws,
    };

    let chips = plan.num_chips as u64;
    let weight_bits = plan.expert_bytes() * 8;
    let macs = 3 * tokens * plan.hidden_dim * plan.intermediate_dim;
    let sfe_ops = tokens * plan.intermediate_dim * (cyc.activation + cyc.hadamard) as u64
        + chips * tokens * plan.hidden_dim * cyc.weighted_sum as u64;
    let link_bits = chips * nmp::ring_traffic_bytes(plan.pus_per_chip, rs_slice) * 8;
    let mut energy = nmp::compute_energy(spec, macs, sfe_ops, weight_bits, link_bits);
    energy.dram = weight_bits as f64 * sys.energy_per_bit_dram_pj;
    Ok((stages, energy))
}

/// Task ids of one expert in a schedule.
#[derive(Debug, Clone, Copy)]
pub struct ExpertTasks {
    pub gemm1: TaskId,
    pub gemm3: TaskId,
    pub weighted_sum: TaskId,
    pub last: TaskId,
}

/// Appends one expert to `sched`. With `overlap`, stages wait only for their
/// data: GeMM2 runs beside the activation and the reduce-scatter runs beside
/// the next expert's GeMM1. Without it every stage waits for the previous
/// one. `after` is the task that must finish first (previous expert or
/// layer input).
pub fn push_expert(
    sched: &mut Schedule,
    s: &ExpertStages,
    after: Option<TaskId>,
    overlap: bool,
) -> ExpertTasks {
    let dep = |t: Option<TaskId>| t.into_iter().collect::<Vec<_>>();
    if overlap {
        let base = dep(after);
        let g1 = sched.add("gemm1", Resource::TensorCore, s.gemm1, &base);
        let g2 = sched.add("gemm2", Resource::TensorCore, s.gemm2, &base);
        let act = sched.add("activation", Resource::Sfe, s.activation, &[g1]);
        let had = sched.add("hadamard", Resource::Sfe, s.hadamard, &[act, g2]);
        let g3 = sched.add("gemm3", Resource::TensorCore, s.gemm3, &[had]);
        let rs = sched.add("reduce_scatter", Resource::Ring, s.reduce_scatter, &[g3]);
        let ws = sched.add("weighted_sum", Resource::Sfe, s.weighted_sum, &[rs]);
        ExpertTasks {
            gemm1: g1,
            gemm3: g3,
            weighted_sum: ws,
            last: g3,
        }
    } else {
        let g1 = sched.add("gemm1", Resource::TensorCore, s.gemm1, &dep(after));
        let g2 = sched.add("gemm2", Resource::TensorCore, s.gemm2, &[g1]);
        let act = sched.add("activation", Resource::Sfe, s.activation, &[g2]);
        let had = sched.add("hadamard", Resource::Sfe, s.hadamard, &[act]);
        let g3 = sched.add("gemm3", Resource::TensorCore, s.gemm3, &[had]);
        let rs = sched.add("reduce_scatter", Resource::Ring, s.reduce_scatter, &[g3]);
        let ws = sched.add("weighted_sum", Resource::Sfe, s.weighted_sum, &[rs]);
        ExpertTasks {
            gemm1: g1,
            gemm3: g3,
            weighted_sum: ws,
            last: ws,
        }
    }
}

/// Latency and energy of a single expert in isolation.
pub fn expert_latency(
    plan: &ExpertPartitionPlan,
    inv: &ExpertInvocation,
    table: &TierTable,
    sys: &SystemConfig,
    overlap: bool,
) -> Result<(f64, Energy)> {
    let (stages, energy) = expert_stages(plan, inv.tokens, inv.tier, table, sys)?;
    if inv.tokens == 0 {
        return Ok((0.0, energy));
    }
    let mut sched = Schedule::new();
    push_expert(&mut sched, &stages, None, overlap);
    Ok((sched.run().makespan(), energy))
}

/// One trace row per executed expert.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertRow {
    pub layer: u32,
    pub expert: u32,
    pub tokens: u64,
    pub tier: usize,
    pub t_gemm1_ns: f64,
    pub t_gemm2_ns: f64,
    pub t_gemm3_ns: f64,
    pub t_comm_ns: f64,
    pub t_sfe_ns: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerExec {
    pub time_ns: f64,
    pub energy: Energy,
    pub rows: Vec<ExpertRow>,
}

/// Times one MoE layer: input broadcast over the xPU interface and on-chip
/// all-gather, experts in dispatch order, then readback of the per-chip
/// partial outputs.
pub fn moe_layer_exec(
    invocations: &[ExpertInvocation],
    batch_tokens: u64,
    plan: &ExpertPartitionPlan,
    table: &TierTable,
    sys: &SystemConfig,
    overlap: bool,
) -> Result<LayerExec> {
    moe_layer_exec_with(invocations, batch_tokens, plan, sys, overlap, |inv| {
        expert_stages(plan, inv.tokens, inv.tier, table, sys)
    })
}

/// Same as [`moe_layer_exec`] with a caller-supplied stage model, so that
/// callers can memoize per (tokens, tier).
pub fn moe_layer_exec_with(
    invocations: &[ExpertInvocation],
    batch_tokens: u64,
    plan: &ExpertPartitionPlan,
    sys: &SystemConfig,
    overlap: bool,
    mut stages_of: impl FnMut(&ExpertInvocation) -> Result<(ExpertStages, Energy)>,
) -> Result<LayerExec> {
    let spec = &sys.nmp;
    let chips = plan.num_chips as u64;
    let act_bytes = batch_tokens * plan.hidden_dim * plan.bytes_per_param;
    let iface_ns = act_bytes as f64 / sys.interface_bw_per_chip() * 1e9;
    let slice = act_bytes.div_ceil(plan.pus_per_chip as u64);
    let gather_ns = nmp::all_gather_time(spec, plan.pus_per_chip, slice)?;

    let mut energy = Energy {
        interface: 2.0 * (chips * act_bytes * 8) as f64 * sys.interface_energy_pj_per_bit,
        link: (chips * nmp::ring_traffic_bytes(plan.pus_per_chip, slice) * 8) as f64
            * spec.e_link_bit_pj,
        ..Energy::default()
    };

    let mut sched = Schedule::new();
    let input = sched.add("input", Resource::Interface, iface_ns, &[]);
    let gathered = sched.add("all_gather", Resource::Ring, gather_ns, &[input]);
    let mut prev = Some(gathered);
    let mut tails = vec![gathered];
    let mut rows = Vec::new();
    for inv in invocations.iter().filter(|i| i.tokens > 0) {
        let (s, e) = stages_of(inv)?;
        let tasks = push_expert(&mut sched, &s, prev, overlap);
        prev = Some(tasks.last);
        tails.push(tasks.weighted_sum);
        energy += e;
        rows.push(ExpertRow {
            layer: inv.layer,
            expert: inv.expert,
            tokens: inv.tokens,
            tier: inv.tier,
            t_gemm1_ns: s.gemm1,
            t_gemm2_ns: s.gemm2,
            t_gemm3_ns: s.gemm3,
            t_comm_ns: s.reduce_scatter,
            t_sfe_ns: s.activation + s.hadamard + s.weighted_sum,
            energy_pj: e.total(),
        });
    }
    sched.add("readback", Resource::Interface, iface_ns, &tails);
    Ok(LayerExec {
        time_ns: sched.run().makespan(),
        energy,
        rows,
    })
}
