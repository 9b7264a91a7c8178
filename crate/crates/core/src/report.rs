//! Simulation reports, run comparisons and file output.
//!
//! JSON and CSV outputs share one flattening: object keys in lexicographic
//! order and every float rounded to six significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::energy::Energy;
use crate::error::{Result, SimError};

pub const SCHEMA_VERSION: u32 = 1;

/// Inputs that identify a run for comparison purposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub system: String,
    pub model: String,
    pub policy: String,
    pub seed: u64,
    pub duration_s: f64,
    pub arrival_rate: f64,
    pub input_len: u32,
    pub output_len: u32,
    pub max_batch: u32,
    pub num_layers: u32,
    pub target_hot_hit: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: u64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Distribution {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            count: s.len() as u64,
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    /// swap + prefill + decode over all batches.
    pub busy_s: f64,
    pub swap_s: f64,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub moe_s: f64,
    pub attention_s: f64,
    /// Completion time of the last batch.
    pub makespan_s: f64,
    /// Mean latency of one MoE layer during decode.
    pub moe_layer_mean_us: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapSummary {
    pub batches_with_swaps: u64,
    pub expert_swaps: u64,
    pub row_pairs: u64,
    pub time_s: f64,
    pub energy_j: f64,
    /// Swap time over busy time.
    pub time_fraction: f64,
    /// Swap energy over total energy.
    pub energy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub run: RunInfo,
    pub requests: u64,
    pub completed: u64,
    pub batches: u64,
    pub forced_requests: u64,
    pub decode_tokens: u64,
    pub decode_throughput_tok_s: f64,
    /// Energy efficiency, decode tokens per joule of total energy.
    pub tokens_per_joule: f64,
    pub time: TimeBreakdown,
    /// Breakdown in joules.
    pub energy_j: Energy,
    pub total_energy_j: f64,
    pub ttft_ms: Distribution,
    pub ttft_slo_misses: u64,
    /// Requests dispatched later than deadline plus one scheduling period.
    pub late_dispatches: u64,
    pub hot_hits: u64,
    pub expert_accesses: u64,
    pub hot_hit_rate: f64,
    pub swaps: SwapSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunComparison {
    pub baseline: SimReport,
    pub candidate: SimReport,
    /// candidate / baseline decode throughput.
    pub throughput_ratio: f64,
    /// baseline / candidate energy per token.
    pub energy_ratio: f64,
    /// Run settings other than the policy that differ between the two.
    pub mismatches: Vec<String>,
}

pub fn compare(baseline: &SimReport, candidate: &SimReport) -> Result<RunComparison> {
    let (a, b) = (&baseline.run, &candidate.run);
    if a.seed != b.seed || a.duration_s != b.duration_s {
        return Err(SimError::Incomparable(format!(
            "seed/duration differ: ({}, {} s) vs ({}, {} s)",
            a.seed, a.duration_s, b.seed, b.duration_s
        )));
    }
    for r in [baseline, candidate] {
        if r.decode_tokens == 0 || r.decode_throughput_tok_s <= 0.0 || r.total_energy_j <= 0.0 {
            return Err(SimError::Incomparable(format!(
                "run `{}` produced no decode tokens",
                r.run.policy
            )));
        }
    }
    let mut mismatches = Vec::new();
    let mut check = |name: &str, differ: bool| {
        if differ {
            mismatches.push(name.to_string());
        }
    };
    check("system", a.system != b.system);
    check("model", a.model != b.model);
    check("arrival_rate", a.arrival_rate != b.arrival_rate);
    check("input_len", a.input_len != b.input_len);
    check("output_len", a.output_len != b.output_len);
    check("max_batch", a.max_batch != b.max_batch);
    check("num_layers", a.num_layers != b.num_layers);
    check("target_hot_hit", a.target_hot_hit != b.target_hot_hit);
    for m in &mismatches {
        log::warn!("comparing runs with different {m}");
    }
    let per_token = |r: &SimReport| r.total_energy_j / r.decode_tokens as f64;
    Ok(RunComparison {
        throughput_ratio: candidate.decode_throughput_tok_s / baseline.decode_throughput_tok_s,
        energy_ratio: per_token(baseline) / per_token(candidate),
        baseline: baseline.clone(),
        candidate: candidate.clone(),
        mismatches,
    })
}

pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x)
        .parse()
        .unwrap_or(x)
}

/// Rounds every non-integer number in `v` to six significant digits.
pub fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().unwrap_or(0.0), 6);
            if let Some(r) = serde_json::Number::from_f64(x) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Serializes with rounded floats; keys come out sorted.
pub fn to_rounded_value<T: Serialize>(item: &T) -> Result<Value> {
    let mut v = serde_json::to_value(item).map_err(|e| SimError::Parse(e.to_string()))?;
    round_value(&mut v);
    Ok(v)
}

pub fn to_json<T: Serialize>(item: &T) -> Result<String> {
    let v = to_rounded_value(item)?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| SimError::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Dotted-key columns of a JSON object, in key order.
pub fn flatten(v: &Value) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            Value::String(s) => out.push((prefix.to_string(), s.clone())),
            Value::Null => out.push((prefix.to_string(), String::new())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out
}

/// CSV column names of a report.
pub fn report_columns() -> Vec<String> {
    let probe = SimReport {
        schema_version: SCHEMA_VERSION,
        run: RunInfo {
            system: String::new(),
            model: String::new(),
            policy: String::new(),
            seed: 0,
            duration_s: 0.0,
            arrival_rate: 0.0,
            input_len: 0,
            output_len: 0,
            max_batch: 0,
            num_layers: 0,
            target_hot_hit: 0.0,
        },
        requests: 0,
        completed: 0,
        batches: 0,
        forced_requests: 0,
        decode_tokens: 0,
        decode_throughput_tok_s: 0.0,
        tokens_per_joule: 0.0,
        time: TimeBreakdown::default(),
        energy_j: Energy::default(),
        total_energy_j: 0.0,
        ttft_ms: Distribution::default(),
        ttft_slo_misses: 0,
        late_dispatches: 0,
        hot_hits: 0,
        expert_accesses: 0,
        hot_hit_rate: 0.0,
        swaps: SwapSummary::default(),
    };
    let v = serde_json::to_value(&probe).expect("report serializes");
    flatten(&v).into_iter().map(|(k, _)| k).collect()
}

pub fn to_csv(report: &SimReport) -> Result<String> {
    let cols = flatten(&to_rounded_value(report)?);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(cols.iter().map(|(k, _)| k.as_str()))?;
    w.write_record(cols.iter().map(|(_, v)| v.as_str()))?;
    let bytes = w.into_inner().map_err(|e| SimError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(SimError::invalid(
                "format",
                format!("unknown format `{other}`"),
            )),
        }
    }
}

pub fn emit(report: &SimReport, format: Format, path: &Path) -> Result<()> {
    let text = match format {
        Format::Json => to_json(report)?,
        Format::Csv => to_csv(report)?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Streams rows of flattened JSON objects to CSV. The header comes from the
/// first row; later rows must have the same columns.
pub struct CsvStream<W: Write> {
    inner: csv::Writer<W>,
    columns: Option<Vec<String>>,
    rows: u64,
}

impl<W: Write> CsvStream<W> {
    pub fn new(writer: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(writer),
            columns: None,
            rows: 0,
        }
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        let cols = flatten(&to_rounded_value(row)?);
        match &self.columns {
            None => {
                let names: Vec<String> = cols.iter().map(|(k, _)| k.clone()).collect();
                self.inner.write_record(&names)?;
                self.columns = Some(names);
            }
            Some(names) => {
                if names.len() != cols.len() || names.iter().zip(&cols).any(|(a, (b, _))| a != b) {
                    return Err(SimError::invalid("csv", "row columns differ from header"));
                }
            }
        }
        self.inner
            .write_record(cols.iter().map(|(_, v)| v.as_str()))?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| SimError::Io(e.into_error()))
    }
}

pub fn csv_file(path: &Path) -> Result<CsvStream<BufWriter<File>>> {
    Ok(CsvStream::new(BufWriter::new(File::create(path)?)))
}

/// Keeps a flat map for ad-hoc rows such as sweep cells.
pub fn object(pairs: impl IntoIterator<Item = (String, Value)>) -> Value {
    Value::Object(pairs.into_iter().collect::<Map<_, _>>())
}
