//! Roofline model of prefill on the xPU.

use serde::Serialize;

use crate::config::{ModelConfig, SystemConfig};
use crate::energy::Energy;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PrefillCost {
    pub time_ns: f64,
    /// Sum of per-layer compute terms.
    pub compute_ns: f64,
    /// Sum of per-layer memory terms.
    pub memory_ns: f64,
    /// KV and activations written to the DRAM reserved rows.
    pub transfer_ns: f64,
    pub energy: Energy,
}

impl PrefillCost {
    pub fn compute_bound(&self) -> bool {
        self.compute_ns > self.memory_ns
    }
}

fn attn_proj_params(m: &ModelConfig) -> u64 {
    let q = m.num_q_heads as u64 * m.head_dim;
    let kv = m.num_kv_heads as u64 * m.head_dim;
    m.hidden_dim * (q + 2 * kv) + q * m.hidden_dim
}

/// Per-layer roofline over all prompt tokens in the batch, plus the final
/// projection for each request, plus the interposer transfer of KV.
pub fn prefill_time_xpu(
    prompt_lens: &[u32],
    model: &ModelConfig,
    sys: &SystemConfig,
) -> PrefillCost {
    let tokens: u64 = prompt_lens.iter().map(|&l| l as u64).sum();
    if tokens == 0 {
        return PrefillCost::default();
    }
    let xpu = &sys.xpu;
    let peak = xpu.peak_flops * xpu.count as f64;
    let bw = xpu.hbm_bw * xpu.count as f64;
    let bpp = model.bytes_per_param as f64;

    let expert_params = 3 * model.hidden_dim * model.intermediate_dim;
    let routed_touched = (tokens * model.active_experts as u64).min(model.experts_per_layer as u64);
    let layer_params =
        attn_proj_params(model) + (routed_touched + model.shared_experts as u64) * expert_params;
    let score_flops: f64 = prompt_lens
        .iter()
        .map(|&l| 2.0 * (l as f64).powi(2) * (model.num_q_heads as u64 * model.head_dim) as f64)
        .sum();
    let layer_flops = 2.0
        * tokens as f64
        * (attn_proj_params(model) + model.experts_per_token() as u64 * expert_params) as f64
        + score_flops;
    let kv_layer_bytes = tokens * model.kv_bytes_per_token() / model.num_layers as u64;
    let layer_bytes = layer_params as f64 * bpp + kv_layer_bytes as f64;
    let layer_compute = layer_flops / peak * 1e9;
    let layer_memory = layer_bytes / bw * 1e9;
    let layers = model.num_layers as f64;

    let head_compute =
        2.0 * (prompt_lens.len() as u64 * model.hidden_dim * model.vocab_size) as f64 / peak * 1e9;
    let head_memory = (model.hidden_dim * model.vocab_size) as f64 * bpp / bw * 1e9;

    let compute_ns = layers * layer_compute + head_compute;
    let memory_ns = layers * layer_memory + head_memory;
    let roofline_ns = layers * layer_compute.max(layer_memory) + head_compute.max(head_memory);

    let moved_bytes = tokens * model.kv_bytes_per_token();
    let transfer_ns =
        moved_bytes as f64 / (sys.interface_bw_per_chip() * sys.num_chips as f64) * 1e9;

    let time_ns = roofline_ns + transfer_ns;
    let energy = Energy {
        xpu: xpu.power_w * xpu.count as f64 * roofline_ns * 1e3,
        interface: (moved_bytes * 8) as f64 * sys.interface_energy_pj_per_bit,
        dram: (moved_bytes * 8) as f64 * sys.energy_per_bit_dram_pj,
        ..Energy::default()
    };
    PrefillCost {
        time_ns,
        compute_ns,
        memory_ns,
        transfer_ns,
        energy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{model_preset, preset};

    #[test]
    fn empty_prompt_is_free() {
        let sys = preset("stratum-l").unwrap();
        let m = model_preset("mixtral-8x7b").unwrap();
        let c = prefill_time_xpu(&[], &m, &sys);
        assert_eq!(c.time_ns, 0.0);
        assert_eq!(c.energy.total(), 0.0);
    }

    #[test]
    fn compute_term_scales_with_batch() {
        let sys = preset("stratum-l").unwrap();
        let m = model_preset("mixtral-8x7b").unwrap();
        let one = prefill_time_xpu(&[512], &m, &sys);
        let two = prefill_time_xpu(&[512, 512], &m, &sys);
        assert!((two.compute_ns / one.compute_ns - 2.0).abs() < 1e-9);
    }

    #[test]
    fn long_prefill_is_compute_bound() {
        let sys = preset("stratum-xl").unwrap();
        let m = model_preset("mixtral-8x7b").unwrap();
        // FLOPs per layer grow with tokens while weight bytes saturate once
        // every expert is touched.
        let c = prefill_time_xpu(&[4096], &m, &sys);
        assert!(c.compute_bound(), "{c:?}");
        let expert_flops = 2.0 * 4096.0 * 2.0 * 3.0 * 4096.0 * 14336.0;
        let expert_bytes = 8.0 * 3.0 * 4096.0 * 14336.0 * 2.0;
        assert!(expert_flops / (2.0 * 989e12) > expert_bytes / (2.0 * 3.35e12));
    }
}
