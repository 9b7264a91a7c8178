//! Decode attention on the NMP.
//!
//! Attention work is split into (request, KV head) tasks. Tasks are spread
//! over chips, and each chip splits its PUs into ring-contiguous groups that
//! process tasks two at a time so that the softmax and reduce-scatter of one
//! head hide behind the GeMVs of the other. Within a group, K/V tokens are
//! appended round-robin across PUs, and softmax runs in three local phases
//! joined by two scalar exchanges.

use serde::Serialize;

use crate::config::{ModelConfig, SystemConfig};
use crate::energy::Energy;
use crate::engine::{Resource, Schedule, TaskId};
use crate::error::{Result, SimError};
use crate::nmp::{self, GemmShape};
use crate::timing::TierTable;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PuGroupPlan {
    pub pus_per_chip: u32,
    /// PU index ranges of one chip; every chip uses the same grouping.
    pub groups: Vec<std::ops::Range<u32>>,
    /// Tasks assigned to each group on the busiest chip.
    pub heads_per_group: Vec<u32>,
    /// Total tasks across all chips.
    pub total_heads: u64,
    /// False when some group runs a single head and cannot interleave.
    pub interleaved: bool,
}

impl PuGroupPlan {
    pub fn group_size(&self) -> u32 {
        self.groups.first().map_or(0, |g| g.end - g.start)
    }

    /// Group of task `head` on its chip, for round-robin assignment.
    pub fn group_of(&self, head_on_chip: u32) -> usize {
        head_on_chip as usize % self.groups.len()
    }
}

/// Largest divisor of `n` that does not exceed `cap`.
fn divisor_at_most(n: u32, cap: u32) -> u32 {
    (1..=cap.min(n))
        .rev()
        .find(|d| n.is_multiple_of(*d))
        .unwrap_or(1)
}

/// Groups PUs so that each group holds at least two heads when possible.
/// The group count is `floor(heads / 2)`, capped at half the PUs and rounded
/// down to a divisor of the PU count so groups are equal-sized.
pub fn form_groups_for(pus_per_chip: u32, num_chips: u32, batch_heads: u64) -> Result<PuGroupPlan> {
    if batch_heads == 0 {
        return Err(SimError::invalid("batch_heads", "must be at least 1"));
    }
    if pus_per_chip == 0 || num_chips == 0 {
        return Err(SimError::invalid("pus_per_chip", "must be at least 1"));
    }
    let per_chip = batch_heads.div_ceil(num_chips as u64);
    let want = (per_chip / 2).clamp(1, (pus_per_chip / 2).max(1) as u64) as u32;
    let count = divisor_at_most(pus_per_chip, want);
    let size = pus_per_chip / count;
    let groups = (0..count).map(|g| g * size..(g + 1) * size).collect();
    let heads_per_group: Vec<u32> = (0..count as u64)
        .map(|g| (per_chip / count as u64 + u64::from(g < per_chip % count as u64)) as u32)
        .collect();
    let interleaved = heads_per_group.iter().all(|&h| h >= 2);
    Ok(PuGroupPlan {
        pus_per_chip,
        groups,
        heads_per_group,
        total_heads: batch_heads,
        interleaved,
    })
}

pub fn form_groups(sys: &SystemConfig, model: &ModelConfig, batch: u32) -> Result<PuGroupPlan> {
    form_groups_for(
        sys.nmp.pus_per_chip,
        sys.num_chips,
        batch as u64 * model.num_kv_heads as u64,
    )
}

/// Per-PU token counts of one head's K/V within a group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KvLayout {
    pub counts: Vec<u64>,
    pub append_cursor: usize,
    pub capacity_per_pu: u64,
}

impl KvLayout {
    pub fn new(group_size: u32, capacity_per_pu: u64) -> Self {
        Self {
            counts: vec![0; group_size as usize],
            append_cursor: 0,
            capacity_per_pu,
        }
    }

    pub fn tokens(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max_per_pu(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Appends tokens round-robin starting at the cursor.
pub fn kv_append(kv: &KvLayout, new_tokens: u64) -> Result<KvLayout> {
    let g = kv.counts.len() as u64;
    if g == 0 {
        return Err(SimError::invalid("kv", "layout has no PUs"));
    }
    if kv.tokens() + new_tokens > kv.capacity_per_pu * g {
        return Err(SimError::Capacity(format!(
            "KV region holds {} tokens per head",
            kv.capacity_per_pu * g
        )));
    }
    let mut out = kv.clone();
    let full_rounds = new_tokens / g;
    let rest = (new_tokens % g) as usize;
    for c in &mut out.counts {
        *c += full_rounds;
    }
    for i in 0..rest {
        out.counts[(kv.append_cursor + i) % g as usize] += 1;
    }
    out.append_cursor = (kv.append_cursor + rest) % g as usize;
    Ok(out)
}

/// Stage durations of one head task in a group, ns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct HeadStages {
    pub q_gather: f64,
    pub qk: f64,
    pub local_max: f64,
    pub exchange_max: f64,
    pub local_expsum: f64,
    pub exchange_sum: f64,
    pub normalize: f64,
    pub av: f64,
    pub reduce_scatter: f64,
}

impl HeadStages {
    pub fn serial_sum(&self) -> f64 {
        self.q_gather
            + self.qk
            + self.local_max
            + self.exchange_max
            + self.local_expsum
            + self.exchange_sum
            + self.normalize
            + self.av
            + self.reduce_scatter
    }

    pub fn softmax(&self) -> f64 {
        self.local_max + self.exchange_max + self.local_expsum + self.exchange_sum + self.normalize
    }
}

/// Cost of one (request, KV head) task on a group of `group` PUs at
/// sequence length `seq_len`, with K/V in `kv_tier`. Energy is for the
/// whole task.
pub fn head_stages(
    group: u32,
    seq_len: u64,
    model: &ModelConfig,
    table: &TierTable,
    sys: &SystemConfig,
    kv_tier: usize,
) -> Result<(HeadStages, Energy)> {
    if seq_len == 0 {
        return Err(SimError::invalid("seq_len", "must be at least 1"));
    }
    let spec = &sys.nmp;
    let bpp = model.bytes_per_param;
    let q_per_kv = (model.num_q_heads / model.num_kv_heads) as u64;
    let d = model.head_dim;
    let local = seq_len.div_ceil(group as u64);
    let pes = spec.pes_per_pu;

    let q_bytes = q_per_kv * d * bpp;
    let q_slice = q_bytes.div_ceil(group as u64);
    let q_gather = nmp::all_gather_time(spec, group, q_slice)?;
    let qk = nmp::gemm_time(
        spec,
        &GemmShape::new(q_per_kv, d, local, bpp)?,
        pes,
        kv_tier,
        table,
    )?;
    let av = nmp::gemm_time(
        spec,
        &GemmShape::new(q_per_kv, local, d, bpp)?,
        pes,
        kv_tier,
        table,
    )?;
    let scores = q_per_kv * local;
    let cyc = &spec.sfe_cycles;
    let local_max = nmp::sfe_time(spec, scores, cyc.softmax_max);
    let local_expsum = nmp::sfe_time(spec, scores, cyc.softmax_exp);
    let normalize = nmp::sfe_time(spec, scores, cyc.softmax_norm);
    let exchange = nmp::scalar_exchange_time(spec, group);
    let rs = nmp::reduce_scatter_time(spec, group, q_slice)?;
    let stages = HeadStages {
        q_gather,
        qk,
        local_max,
        exchange_max: exchange,
        local_expsum,
        exchange_sum: exchange,
        normalize,
        av,
        reduce_scatter: rs,
    };

    let kv_bits = 2 * seq_len * d * bpp * 8;
    let macs = 2 * q_per_kv * seq_len * d;
    let sfe_ops =
        q_per_kv * seq_len * (cyc.softmax_max + cyc.softmax_exp + cyc.softmax_norm) as u64;
    let packet_bits = 2 * (group as u64).saturating_sub(1) * spec.packet_bytes as u64 * 8;
    let link_bits = 2 * nmp::ring_traffic_bytes(group, q_slice) * 8 + packet_bits;
    let mut energy = nmp::compute_energy(spec, macs, sfe_ops, kv_bits, link_bits);
    energy.dram = kv_bits as f64 * sys.energy_per_bit_dram_pj;
    Ok((stages, energy))
}

fn push_front_half(sched: &mut Schedule, s: &HeadStages, after: &[TaskId]) -> (TaskId, TaskId) {
    let ag = sched.add("q_gather", Resource::Ring, s.q_gather, after);
    let qk = sched.add("qk", Resource::TensorCore, s.qk, &[ag]);
    (ag, qk)
}

fn push_softmax(sched: &mut Schedule, s: &HeadStages, qk: TaskId) -> TaskId {
    let m = sched.add("local_max", Resource::Sfe, s.local_max, &[qk]);
    let x1 = sched.add("exchange_max", Resource::Ring, s.exchange_max, &[m]);
    let e = sched.add("local_expsum", Resource::Sfe, s.local_expsum, &[x1]);
    let x2 = sched.add("exchange_sum", Resource::Ring, s.exchange_sum, &[e]);
    sched.add("normalize", Resource::Sfe, s.normalize, &[x2])
}

/// Makespan of `heads` identical tasks on one group. Heads are taken in
/// FIFO pairs; within a pair the first head's softmax runs under the second
/// head's qK, the second head's softmax runs under the first head's
/// attn x V, and the first head's reduce-scatter runs under the second
/// head's attn x V.
pub fn group_makespan(s: &HeadStages, heads: u32, interleave: bool) -> f64 {
    let mut sched = Schedule::new();
    let mut prev: Vec<TaskId> = Vec::new();
    if !interleave {
        for _ in 0..heads {
            let ag = sched.add("q_gather", Resource::Ring, s.q_gather, &prev);
            let qk = sched.add("qk", Resource::TensorCore, s.qk, &[ag]);
            let norm = push_softmax(&mut sched, s, qk);
            let av = sched.add("av", Resource::TensorCore, s.av, &[norm]);
            let rs = sched.add("reduce_scatter", Resource::Ring, s.reduce_scatter, &[av]);
            prev = vec![rs];
        }
        return sched.run().makespan();
    }
    let mut remaining = heads;
    while remaining > 0 {
        if remaining == 1 {
            let (_, qk) = push_front_half(&mut sched, s, &[]);
            let norm = push_softmax(&mut sched, s, qk);
            let av = sched.add("av", Resource::TensorCore, s.av, &[norm]);
            sched.add("reduce_scatter", Resource::Ring, s.reduce_scatter, &[av]);
            break;
        }
        let (_, qk_a) = push_front_half(&mut sched, s, &[]);
        let (_, qk_b) = push_front_half(&mut sched, s, &[]);
        let norm_a = push_softmax(&mut sched, s, qk_a);
        let av_a = sched.add("av", Resource::TensorCore, s.av, &[norm_a]);
        let norm_b = push_softmax(&mut sched, s, qk_b);
        sched.add("reduce_scatter", Resource::Ring, s.reduce_scatter, &[av_a]);
        let av_b = sched.add("av", Resource::TensorCore, s.av, &[norm_b, av_a]);
        sched.add("reduce_scatter", Resource::Ring, s.reduce_scatter, &[av_b]);
        remaining -= 2;
    }
    sched.run().makespan()
}

/// Per-head trace row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadRow {
    pub group: usize,
    pub heads: u32,
    pub seq_len: u64,
    pub t_qk_ns: f64,
    pub t_softmax_ns: f64,
    pub t_av_ns: f64,
    pub t_comm_ns: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExec {
    pub time_ns: f64,
    pub energy: Energy,
    pub stages: HeadStages,
}

/// One layer of decode attention for every task in `plan`, all at
/// `seq_len`. Chips and groups run in parallel, so the layer time is the
/// slowest group.
pub fn attention_latency(
    plan: &PuGroupPlan,
    seq_len: u64,
    model: &ModelConfig,
    table: &TierTable,
    sys: &SystemConfig,
    kv_tier: usize,
) -> Result<AttentionExec> {
    let group = plan.group_size();
    let (stages, per_head) = head_stages(group, seq_len, model, table, sys, kv_tier)?;
    let mut time_ns: f64 = 0.0;
    let mut cache: Vec<(u32, f64)> = Vec::new();
    for &h in &plan.heads_per_group {
        let t = match cache.iter().find(|(n, _)| *n == h) {
            Some(&(_, t)) => t,
            None => {
                let t = group_makespan(&stages, h, plan.interleaved);
                cache.push((h, t));
                t
            }
        };
        time_ns = time_ns.max(t);
    }
    Ok(AttentionExec {
        time_ns,
        energy: per_head * plan.total_heads as f64,
        stages,
    })
}

/// Values exchanged by the distributed softmax protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributedSoftmaxState {
    pub local_max: Vec<f64>,
    pub global_max: f64,
    pub local_expsum: Vec<f64>,
    pub global_sum: f64,
    pub exchange_rounds: u32,
}

/// Numeric reference of the three-phase softmax over scores held by
/// several PUs: local max, exchange, local sum of exponentials, exchange,
/// local normalization.
pub fn distributed_softmax_reference(
    scores: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, DistributedSoftmaxState)> {
    if scores.iter().all(|s| s.is_empty()) {
        return Err(SimError::invalid(
            "scores",
            "at least one score is required",
        ));
    }
    let mut rounds = 0;
    let local_max: Vec<f64> = scores
        .iter()
        .map(|s| s.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let global_max = local_max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    rounds += 1;
    let local_expsum: Vec<f64> = scores
        .iter()
        .map(|s| s.iter().map(|x| (x - global_max).exp()).sum())
        .collect();
    let global_sum: f64 = local_expsum.iter().sum();
    rounds += 1;
    let weights = scores
        .iter()
        .map(|s| {
            s.iter()
                .map(|x| (x - global_max).exp() / global_sum)
                .collect()
        })
        .collect();
    Ok((
        weights,
        DistributedSoftmaxState {
            local_max,
            global_max,
            local_expsum,
            global_sum,
            exchange_rounds: rounds,
        },
    ))
}
