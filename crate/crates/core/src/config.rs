//! Scenario configuration: system, model and workload.
//!
//! Files are JSON. Each section may be a preset name, an object, or an
//! object with a `"preset"` key whose remaining keys override the preset.
//! Unknown keys are rejected. Dotted-key overrides (`system.num_chips=6`)
//! are applied after presets are expanded and before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::budget::BudgetParams;
use crate::error::{Result, SimError};
use crate::nmp::NmpSpec;
use crate::timing::{build_tier_table, DeviceTiming};

pub const SYSTEM_PRESETS: [&str; 3] = ["stratum-s", "stratum-l", "stratum-xl"];
pub const MODEL_PRESETS: [&str; 4] = ["olmoe", "mixtral-8x7b", "llama-4-scout", "qwen2.5-32b"];

/// Host processor that runs prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XpuSpec {
    pub name: String,
    pub count: u32,
    /// Per device, FLOP/s.
    pub peak_flops: f64,
    /// Per device, bytes/s.
    pub hbm_bw: f64,
    /// Per device while running prefill.
    pub power_w: f64,
    /// Per device while the NMP decodes.
    pub idle_power_w: f64,
}

impl XpuSpec {
    pub fn h100(count: u32) -> Self {
        Self {
            name: "h100".into(),
            count,
            peak_flops: 989e12,
            hbm_bw: 3.35e12,
            power_w: 700.0,
            idle_power_w: 0.0,
        }
    }

    pub fn a6000() -> Self {
        Self {
            name: "a6000".into(),
            count: 1,
            peak_flops: 155e12,
            hbm_bw: 768e9,
            power_w: 300.0,
            idle_power_w: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(SimError::invalid("system.xpu.count", "must be at least 1"));
        }
        for (field, v) in [
            ("system.xpu.peak_flops", self.peak_flops),
            ("system.xpu.hbm_bw", self.hbm_bw),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::invalid(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("system.xpu.power_w", self.power_w),
            ("system.xpu.idle_power_w", self.idle_power_w),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::invalid(field, "must be non-negative"));
            }
        }
        Ok(())
    }
}

impl Default for XpuSpec {
    fn default() -> Self {
        Self::a6000()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub name: String,
    pub num_chips: u32,
    pub channels_per_chip: u32,
    pub banks_per_channel: u32,
    pub bank_capacity_bits: u64,
    pub row_buffer_bits: u64,
    pub dram_layers: u32,
    pub num_tiers: u32,
    pub energy_per_bit_dram_pj: f64,
    pub xpu_dram_io_bits: u32,
    pub xpu_dram_pin_rate_gbps: f64,
    pub interface_energy_pj_per_bit: f64,
    /// Rows per bank at the top of the row space kept for xPU-only data.
    pub non_nmp_rows: u64,
    /// Tier where the KV region starts; defaults to the middle tier.
    pub kv_tier: Option<u32>,
    pub timing: DeviceTiming,
    pub nmp: NmpSpec,
    pub budget: BudgetParams,
    pub xpu: XpuSpec,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            name: "stratum-s".into(),
            num_chips: 1,
            channels_per_chip: 16,
            banks_per_channel: 16,
            bank_capacity_bits: 1 << 30,
            row_buffer_bits: 32 * 1024,
            dram_layers: 1024,
            num_tiers: 8,
            energy_per_bit_dram_pj: 0.429,
            xpu_dram_io_bits: 1024,
            xpu_dram_pin_rate_gbps: 6.4,
            interface_energy_pj_per_bit: 2.0,
            non_nmp_rows: 2048,
            kv_tier: None,
            timing: DeviceTiming::default(),
            nmp: NmpSpec::default(),
            budget: BudgetParams::default(),
            xpu: XpuSpec::a6000(),
        }
    }
}

impl SystemConfig {
    pub fn banks_per_chip(&self) -> u64 {
        self.channels_per_chip as u64 * self.banks_per_channel as u64
    }

    /// Banks across all chips.
    pub fn n_bank(&self) -> u64 {
        self.num_chips as u64 * self.banks_per_chip()
    }

    pub fn row_buffer_bytes(&self) -> u64 {
        self.row_buffer_bits / 8
    }

    pub fn rows_per_bank(&self) -> u64 {
        self.bank_capacity_bits / self.row_buffer_bits
    }

    pub fn chip_capacity_bytes(&self) -> u64 {
        self.banks_per_chip() * self.bank_capacity_bits / 8
    }

    pub fn total_capacity_bytes(&self) -> u64 {
        self.num_chips as u64 * self.chip_capacity_bytes()
    }

    pub fn logic_frequency_ghz(&self) -> f64 {
        self.nmp.frequency_ghz
    }

    /// PUs cooperating on one operator across every chip.
    pub fn total_pus(&self) -> u32 {
        self.num_chips * self.nmp.pus_per_chip
    }

    /// xPU <-> DRAM interface bandwidth of one chip, bytes/s.
    pub fn interface_bw_per_chip(&self) -> f64 {
        self.xpu_dram_io_bits as f64 * self.xpu_dram_pin_rate_gbps * 1e9 / 8.0
    }

    pub fn kv_tier(&self) -> u32 {
        self.kv_tier.unwrap_or(self.num_tiers / 2)
    }

    /// Rows per bank available to experts and KV (Phi).
    pub fn nmp_rows(&self) -> u64 {
        self.rows_per_bank() - self.non_nmp_rows
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("system.num_chips", self.num_chips as u64),
            ("system.channels_per_chip", self.channels_per_chip as u64),
            ("system.banks_per_channel", self.banks_per_channel as u64),
            ("system.bank_capacity_bits", self.bank_capacity_bits),
            ("system.row_buffer_bits", self.row_buffer_bits),
            ("system.dram_layers", self.dram_layers as u64),
            ("system.num_tiers", self.num_tiers as u64),
            ("system.xpu_dram_io_bits", self.xpu_dram_io_bits as u64),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(SimError::invalid(field, "must be at least 1"));
            }
        }
        if !self.row_buffer_bits.is_multiple_of(8) {
            return Err(SimError::invalid(
                "system.row_buffer_bits",
                "must be whole bytes",
            ));
        }
        if !self.bank_capacity_bits.is_multiple_of(self.row_buffer_bits) {
            return Err(SimError::invalid(
                "system.bank_capacity_bits",
                "must be a multiple of row_buffer_bits",
            ));
        }
        if !self.dram_layers.is_multiple_of(self.num_tiers) {
            return Err(SimError::invalid(
                "system.dram_layers",
                format!(
                    "{} is not divisible by num_tiers {}",
                    self.dram_layers, self.num_tiers
                ),
            ));
        }
        if !self.rows_per_bank().is_multiple_of(self.num_tiers as u64) {
            return Err(SimError::invalid(
                "system.num_tiers",
                "rows per bank must split evenly into tiers",
            ));
        }
        for (field, v) in [
            ("system.energy_per_bit_dram_pj", self.energy_per_bit_dram_pj),
            (
                "system.interface_energy_pj_per_bit",
                self.interface_energy_pj_per_bit,
            ),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::invalid(field, "must be non-negative"));
            }
        }
        if !(self.xpu_dram_pin_rate_gbps > 0.0) {
            return Err(SimError::invalid(
                "system.xpu_dram_pin_rate_gbps",
                "must be positive",
            ));
        }
        if self.non_nmp_rows >= self.rows_per_bank() {
            return Err(SimError::invalid(
                "system.non_nmp_rows",
                "must leave rows for experts and KV",
            ));
        }
        if self.kv_tier() >= self.num_tiers {
            return Err(SimError::invalid(
                "system.kv_tier",
                "must be a valid tier index",
            ));
        }
        self.nmp.validate()?;
        self.budget.validate()?;
        self.xpu.validate()?;
        build_tier_table(self).map_err(|e| match e {
            SimError::Invalid { field, reason } => SimError::Invalid {
                field: format!("system.{field}"),
                reason,
            },
            other => SimError::invalid("system.timing", other.to_string()),
        })?;
        Ok(())
    }
}

/// Built-in system variants.
pub fn preset(name: &str) -> Result<SystemConfig> {
    let base = SystemConfig::default();
    let cfg = match name {
        "stratum-s" => base,
        "stratum-l" => SystemConfig {
            name: name.into(),
            num_chips: 6,
            xpu: XpuSpec::h100(1),
            ..base
        },
        "stratum-xl" => SystemConfig {
            name: name.into(),
            num_chips: 12,
            xpu: XpuSpec::h100(2),
            ..base
        },
        _ => return Err(SimError::UnknownPreset(name.to_string())),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: u32,
    pub experts_per_layer: u32,
    pub active_experts: u32,
    #[serde(default)]
    pub shared_experts: u32,
    pub hidden_dim: u64,
    pub intermediate_dim: u64,
    pub num_q_heads: u32,
    pub num_kv_heads: u32,
    pub head_dim: u64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: u64,
}

fn default_bytes_per_param() -> u64 {
    2
}

fn default_vocab() -> u64 {
    32_000
}

impl ModelConfig {
    /// Two projection-up matrices plus one projection-down matrix.
    pub fn expert_bytes(&self) -> u64 {
        3 * self.hidden_dim * self.intermediate_dim * self.bytes_per_param
    }

    /// Routed plus shared experts touched by each token in each layer.
    pub fn experts_per_token(&self) -> u32 {
        self.active_experts + self.shared_experts
    }

    /// Routed plus shared experts per layer.
    pub fn placed_experts_per_layer(&self) -> u32 {
        self.experts_per_layer + self.shared_experts
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_layers as u64 * self.num_kv_heads as u64 * self.head_dim * self.bytes_per_param
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(SimError::invalid("model.name", "must not be empty"));
        }
        let counts = [
            ("model.num_layers", self.num_layers as u64),
            ("model.experts_per_layer", self.experts_per_layer as u64),
            ("model.active_experts", self.active_experts as u64),
            ("model.hidden_dim", self.hidden_dim),
            ("model.intermediate_dim", self.intermediate_dim),
            ("model.num_q_heads", self.num_q_heads as u64),
            ("model.num_kv_heads", self.num_kv_heads as u64),
            ("model.head_dim", self.head_dim),
            ("model.bytes_per_param", self.bytes_per_param),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(SimError::invalid(field, "must be at least 1"));
            }
        }
        if self.active_experts > self.experts_per_layer {
            return Err(SimError::invalid(
                "model.active_experts",
                format!(
                    "{} exceeds experts_per_layer {}",
                    self.active_experts, self.experts_per_layer
                ),
            ));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(SimError::invalid(
                "model.num_kv_heads",
                "must divide num_q_heads",
            ));
        }
        Ok(())
    }
}

/// Built-in model descriptors. Layer counts follow the public model cards.
pub fn model_preset(name: &str) -> Result<ModelConfig> {
    let m = match name {
        "olmoe" => ModelConfig {
            name: name.into(),
            num_layers: 16,
            experts_per_layer: 64,
            active_experts: 8,
            shared_experts: 0,
            hidden_dim: 2048,
            intermediate_dim: 1024,
            num_q_heads: 16,
            num_kv_heads: 16,
            head_dim: 128,
            bytes_per_param: 2,
            vocab_size: 50_304,
        },
        "mixtral-8x7b" => ModelConfig {
            name: name.into(),
            num_layers: 32,
            experts_per_layer: 8,
            active_experts: 2,
            shared_experts: 0,
            hidden_dim: 4096,
            intermediate_dim: 14336,
            num_q_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            bytes_per_param: 2,
            vocab_size: 32_000,
        },
        "llama-4-scout" => ModelConfig {
            name: name.into(),
            num_layers: 48,
            experts_per_layer: 16,
            active_experts: 1,
            shared_experts: 1,
            hidden_dim: 5120,
            intermediate_dim: 8192,
            num_q_heads: 40,
            num_kv_heads: 8,
            head_dim: 128,
            bytes_per_param: 2,
            vocab_size: 202_048,
        },
        // Dense: one always-active expert per layer.
        "qwen2.5-32b" => ModelConfig {
            name: name.into(),
            num_layers: 64,
            experts_per_layer: 1,
            active_experts: 1,
            shared_experts: 0,
            hidden_dim: 5120,
            intermediate_dim: 27648,
            num_q_heads: 40,
            num_kv_heads: 8,
            head_dim: 128,
            bytes_per_param: 2,
            vocab_size: 152_064,
        },
        _ => return Err(SimError::UnknownPreset(name.to_string())),
    };
    Ok(m)
}

/// How synthetic per-topic expert usage tables are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UsageConfig {
    /// Expected fraction of token-expert activations (shared experts
    /// included) that hit the topic's hot experts.
    pub target_hot_hit: f64,
    /// Dirichlet concentration for per-layer noise; `None` keeps the
    /// calibrated distributions exact.
    pub concentration: Option<f64>,
    /// JSON usage table to load instead of generating one.
    pub file: Option<String>,
}

impl Default for UsageConfig {
    fn default() -> Self {
        Self {
            target_hot_hit: 0.6,
            concentration: None,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Requests per second.
    pub arrival_rate: f64,
    /// Arrival window, seconds.
    pub duration_s: f64,
    pub topics: Vec<String>,
    /// Empty means uniform; filled in by validation.
    pub topic_mix: Vec<f64>,
    pub input_len: u32,
    pub output_len: u32,
    pub max_batch: u32,
    pub ttft_slo_ms: f64,
    pub classifier_accuracy: f64,
    pub classifier_overhead_ms: f64,
    pub schedule_period_ms: f64,
    pub seed: u64,
    pub usage: UsageConfig,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            arrival_rate: 2.0,
            duration_s: 10.0,
            topics: ["legal", "humanities", "cs", "science", "math", "logic"]
                .map(String::from)
                .to_vec(),
            topic_mix: Vec::new(),
            input_len: 512,
            output_len: 512,
            max_batch: 8,
            ttft_slo_ms: 1000.0,
            classifier_accuracy: 0.85,
            classifier_overhead_ms: 10.0,
            schedule_period_ms: 10.0,
            seed: 0,
            usage: UsageConfig::default(),
        }
    }
}

impl WorkloadConfig {
    /// Validates and fills an empty `topic_mix` with a uniform mix.
    pub fn normalize(&mut self) -> Result<()> {
        if self.topics.is_empty() {
            return Err(SimError::invalid(
                "workload.topics",
                "at least one topic is required",
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.topics.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(SimError::invalid(
                "workload.topics",
                format!("duplicate topic `{dup}`"),
            ));
        }
        if self.topic_mix.is_empty() {
            let n = self.topics.len();
            self.topic_mix = vec![1.0 / n as f64; n];
        }
        if self.topic_mix.len() != self.topics.len() {
            return Err(SimError::invalid(
                "workload.topic_mix",
                "must have one entry per topic",
            ));
        }
        if self.topic_mix.iter().any(|p| !(*p >= 0.0)) {
            return Err(SimError::invalid(
                "workload.topic_mix",
                "probabilities must be >= 0",
            ));
        }
        let sum: f64 = self.topic_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SimError::invalid(
                "workload.topic_mix",
                format!("sums to {sum}, expected 1"),
            ));
        }
        if !(0.0..=1.0).contains(&self.classifier_accuracy) {
            return Err(SimError::invalid(
                "workload.classifier_accuracy",
                "must be in [0, 1]",
            ));
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err(SimError::invalid(
                "workload.arrival_rate",
                "must be non-negative",
            ));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(SimError::invalid(
                "workload.duration_s",
                "must be non-negative",
            ));
        }
        for (field, v) in [
            ("workload.input_len", self.input_len),
            ("workload.output_len", self.output_len),
            ("workload.max_batch", self.max_batch),
        ] {
            if v == 0 {
                return Err(SimError::invalid(field, "must be at least 1"));
            }
        }
        for (field, v) in [
            ("workload.ttft_slo_ms", self.ttft_slo_ms),
            ("workload.schedule_period_ms", self.schedule_period_ms),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::invalid(field, "must be positive"));
            }
        }
        if !(self.classifier_overhead_ms >= 0.0) {
            return Err(SimError::invalid(
                "workload.classifier_overhead_ms",
                "must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.usage.target_hot_hit) {
            return Err(SimError::invalid(
                "workload.usage.target_hot_hit",
                "must be in [0, 1]",
            ));
        }
        if let Some(c) = self.usage.concentration {
            if !(c > 0.0) {
                return Err(SimError::invalid(
                    "workload.usage.concentration",
                    "must be positive",
                ));
            }
        }
        Ok(())
    }
}

/// A complete, validated simulation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemConfig,
    pub model: ModelConfig,
    pub workload: WorkloadConfig,
}

impl Scenario {
    pub fn validate(&mut self) -> Result<()> {
        self.system.validate()?;
        self.model.validate()?;
        self.workload.normalize()?;
        Ok(())
    }

    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        Self::from_value(value, overrides)
    }

    pub fn from_value(value: Value, overrides: &[String]) -> Result<Self> {
        let mut root = match value {
            Value::Object(m) => m,
            _ => return Err(SimError::Parse("top level must be an object".into())),
        };
        for key in root.keys() {
            if !matches!(key.as_str(), "system" | "model" | "workload") {
                return Err(SimError::Parse(format!("unknown section `{key}`")));
            }
        }
        let system = expand_section(root.remove("system"), "system", |n| {
            preset(n).map(|s| serde_json::to_value(s).expect("serializable"))
        })?;
        let model = expand_section(root.remove("model"), "model", |n| {
            model_preset(n).map(|m| serde_json::to_value(m).expect("serializable"))
        })?;
        let workload = root
            .remove("workload")
            .unwrap_or_else(|| Value::Object(Map::new()));
        let model = match model {
            Value::Null => {
                serde_json::to_value(model_preset("mixtral-8x7b")?).expect("serializable")
            }
            v => v,
        };
        let system = match system {
            Value::Null => Value::Object(Map::new()),
            v => v,
        };
        let mut full = Value::Object(Map::from_iter([
            ("system".to_string(), system),
            ("model".to_string(), model),
            ("workload".to_string(), workload),
        ]));
        for ov in overrides {
            apply_override(&mut full, ov)?;
        }
        let mut scenario: Scenario =
            serde_json::from_value(full).map_err(|e| SimError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Resolves a section that is absent, a preset name, or an object that may
/// carry a `"preset"` key.
fn expand_section(
    section: Option<Value>,
    what: &str,
    lookup: impl Fn(&str) -> Result<Value>,
) -> Result<Value> {
    match section {
        None => Ok(Value::Null),
        Some(Value::String(name)) => lookup(&name),
        Some(Value::Object(mut obj)) => match obj.remove("preset") {
            None => Ok(Value::Object(obj)),
            Some(Value::String(name)) => {
                let mut base = lookup(&name)?;
                merge(&mut base, Value::Object(obj));
                Ok(base)
            }
            Some(_) => Err(SimError::Parse(format!("{what}.preset must be a string"))),
        },
        Some(_) => Err(SimError::Parse(format!(
            "{what} must be a preset name or an object"
        ))),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| SimError::invalid(spec, "override must look like key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(SimError::invalid(path, "empty key segment"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for key in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| SimError::invalid(path, format!("`{key}` is not inside an object")))?;
        cur = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| SimError::invalid(path, "parent is not an object"))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    Scenario::from_json_str(&text, overrides)
}
