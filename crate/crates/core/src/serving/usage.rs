//! Per-topic expert usage tables.
//!
//! The synthetic generator picks `k` hot experts per (topic, layer) and
//! gives each hot expert weight `r` and each cold expert weight 1. The ratio
//! `r` is solved so that the expected fraction of top-k picks (sampled
//! without replacement) landing on hot experts matches the target.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, UsageConfig};
use crate::error::{Result, SimError};
use crate::serving::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsageTable {
    pub topics: Vec<String>,
    pub layers: u32,
    /// Routed experts per layer.
    pub experts: u32,
    /// probs[topic][layer][expert]
    pub probs: Vec<Vec<Vec<f64>>>,
    /// Hot routed experts per (topic, layer), ascending.
    pub hot: Vec<Vec<Vec<u32>>>,
}

impl ExpertUsageTable {
    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.topics.len() {
            return Err(SimError::invalid("usage", "one distribution set per topic"));
        }
        for (t, per_topic) in self.probs.iter().enumerate() {
            if per_topic.len() != self.layers as usize {
                return Err(SimError::invalid(
                    "usage",
                    format!("topic `{}` needs {} layers", self.topics[t], self.layers),
                ));
            }
            for dist in per_topic {
                if dist.len() != self.experts as usize {
                    return Err(SimError::invalid(
                        "usage",
                        format!("each layer needs {} experts", self.experts),
                    ));
                }
                if dist.iter().any(|p| !(*p >= 0.0)) {
                    return Err(SimError::invalid("usage", "probabilities must be >= 0"));
                }
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(SimError::invalid(
                        "usage",
                        format!("distribution sums to {sum}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn topic_index(&self, name: &str) -> Option<usize> {
        self.topics.iter().position(|t| t == name)
    }

    /// Fraction of activations expected on hot experts, shared included.
    pub fn expected_hot_hit(&self, topic: usize, k: u32, shared: u32) -> f64 {
        let mut total = 0.0;
        for (l, dist) in self.probs[topic].iter().enumerate() {
            let hot = &self.hot[topic][l];
            total += expected_hot_picks(dist, hot, k);
        }
        let routed = total / self.layers as f64;
        (routed + shared as f64) / (k + shared) as f64
    }
}

/// Expected hot picks when drawing `k` distinct experts proportionally to
/// `dist`, for distributions with one hot weight and one cold weight.
fn expected_hot_picks(dist: &[f64], hot: &[u32], k: u32) -> f64 {
    let h = hot.len();
    let c = dist.len() - h;
    let mut is_hot = vec![false; dist.len()];
    for &e in hot {
        is_hot[e as usize] = true;
    }
    let wh = hot.iter().map(|&e| dist[e as usize]).sum::<f64>() / h.max(1) as f64;
    let wc = dist
        .iter()
        .zip(&is_hot)
        .filter(|(_, &hh)| !hh)
        .map(|(p, _)| *p)
        .sum::<f64>()
        / c.max(1) as f64;
    expected_hot_fraction(k, dist.len() as u32, h as u32, wh, wc) * k as f64
}

/// Expected fraction of `k` draws without replacement from `total` items
/// (`hot` of weight `w_hot`, the rest of weight `w_cold`) that are hot.
pub fn expected_hot_fraction(k: u32, total: u32, hot: u32, w_hot: f64, w_cold: f64) -> f64 {
    let (k, n, h) = (k as usize, total as usize, hot as usize);
    let c = n - h;
    // p[a] = P(a hot picks so far)
    let mut p = vec![0.0; k + 1];
    p[0] = 1.0;
    for j in 0..k {
        let mut next = vec![0.0; k + 1];
        for a in 0..=j {
            if p[a] == 0.0 {
                continue;
            }
            let hot_left = h.saturating_sub(a) as f64;
            let cold_left = c.saturating_sub(j - a) as f64;
            let wh = hot_left * w_hot;
            let wc = cold_left * w_cold;
            let (ph, pc) = if wh + wc > 0.0 {
                (wh / (wh + wc), wc / (wh + wc))
            } else {
                let left = hot_left + cold_left;
                (hot_left / left, cold_left / left)
            };
            next[a + 1] += p[a] * ph;
            next[a] += p[a] * pc;
        }
        p = next;
    }
    let mean: f64 = p.iter().enumerate().map(|(a, q)| a as f64 * q).sum();
    mean / k as f64
}

/// Hot/cold weight ratio giving the requested routed hot-hit fraction.
/// Returns `f64::INFINITY` when cold experts must never be drawn.
pub fn solve_hot_ratio(k: u32, total: u32, hot: u32, target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(SimError::invalid(
            "usage.target_hot_hit",
            "must be in [0, 1]",
        ));
    }
    if hot >= total {
        return Ok(1.0);
    }
    let f = |log_r: f64| expected_hot_fraction(k, total, hot, log_r.exp(), 1.0);
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    if target >= f(hi) {
        return Ok(f64::INFINITY);
    }
    if target <= f(lo) {
        return Ok(0.0);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Routed-expert hot-hit fraction needed for an overall target that
/// counts shared-expert activations as hot.
pub fn routed_target(model: &ModelConfig, target: f64) -> Result<f64> {
    let k = model.active_experts as f64;
    let s = model.shared_experts as f64;
    let routed = (target * (k + s) - s) / k;
    if !(-1e-12..=1.0 + 1e-12).contains(&routed) {
        return Err(SimError::invalid(
            "workload.usage.target_hot_hit",
            format!("{target} is unreachable with {s} shared experts per layer"),
        ));
    }
    Ok(routed.clamp(0.0, 1.0))
}

fn weights_to_dist(hot: &[u32], experts: u32, ratio: f64) -> Vec<f64> {
    let mut w = vec![1.0; experts as usize];
    if ratio.is_infinite() {
        w.iter_mut().for_each(|x| *x = 0.0);
        hot.iter().for_each(|&e| w[e as usize] = 1.0);
    } else {
        hot.iter().for_each(|&e| w[e as usize] = ratio);
    }
    let sum: f64 = w.iter().sum();
    w.iter().map(|x| x / sum).collect()
}

fn dirichlet<R: Rng>(base: &[f64], concentration: f64, rng: &mut R) -> Vec<f64> {
    let n = base.len() as f64;
    let draws: Vec<f64> = base
        .iter()
        .map(|&p| {
            let alpha = (p * concentration * n).max(1e-6);
            Gamma::new(alpha, 1.0).expect("positive shape").sample(rng)
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.iter().map(|x| x / sum).collect()
    } else {
        base.to_vec()
    }
}

/// Synthetic per-topic usage; deterministic per seed.
pub fn generate_usage(
    model: &ModelConfig,
    topics: &[String],
    cfg: &UsageConfig,
    seed: u64,
) -> Result<ExpertUsageTable> {
    let k = model.active_experts;
    let experts = model.experts_per_layer;
    let routed = routed_target(model, cfg.target_hot_hit)?;
    let ratio = solve_hot_ratio(k, experts, k, routed)?;
    let mut rng = stream_rng(seed, crate::serving::STREAM_USAGE);
    let mut probs = Vec::with_capacity(topics.len());
    let mut hot = Vec::with_capacity(topics.len());
    for _ in topics {
        let mut tp = Vec::with_capacity(model.num_layers as usize);
        let mut th = Vec::with_capacity(model.num_layers as usize);
        for _ in 0..model.num_layers {
            let mut h: Vec<u32> = sample(&mut rng, experts as usize, k as usize)
                .into_iter()
                .map(|e| e as u32)
                .collect();
            h.sort_unstable();
            let mut dist = weights_to_dist(&h, experts, ratio);
            if let Some(c) = cfg.concentration {
                dist = dirichlet(&dist, c, &mut rng);
            }
            tp.push(dist);
            th.push(h);
        }
        probs.push(tp);
        hot.push(th);
    }
    let table = ExpertUsageTable {
        topics: topics.to_vec(),
        layers: model.num_layers,
        experts,
        probs,
        hot,
    };
    table.validate()?;
    Ok(table)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UsageFile {
    topics: BTreeMap<String, Vec<Vec<f64>>>,
}

/// Loads `{"topics": {"name": [[p_e ...] per layer]}}`. Hot experts are the
/// `k` most probable per layer, ties to the lower index.
pub fn load_usage(path: &Path, model: &ModelConfig, topics: &[String]) -> Result<ExpertUsageTable> {
    let text = std::fs::read_to_string(path)?;
    let file: UsageFile =
        serde_json::from_str(&text).map_err(|e| SimError::Parse(format!("usage table: {e}")))?;
    let mut probs = Vec::new();
    let mut hot = Vec::new();
    for t in topics {
        let layers = file
            .topics
            .get(t)
            .ok_or_else(|| SimError::invalid("usage", format!("missing topic `{t}`")))?;
        let mut th = Vec::new();
        for dist in layers {
            let mut idx: Vec<u32> = (0..dist.len() as u32).collect();
            idx.sort_by(|&a, &b| {
                dist[b as usize]
                    .total_cmp(&dist[a as usize])
                    .then(a.cmp(&b))
            });
            let mut h: Vec<u32> = idx
                .into_iter()
                .take(model.active_experts as usize)
                .collect();
            h.sort_unstable();
            th.push(h);
        }
        probs.push(layers.clone());
        hot.push(th);
    }
    let table = ExpertUsageTable {
        topics: topics.to_vec(),
        layers: model.num_layers,
        experts: model.experts_per_layer,
        probs,
        hot,
    };
    table.validate()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::model_preset;

    #[test]
    fn uniform_weights_give_k_over_k() {
        let f = expected_hot_fraction(2, 8, 2, 1.0, 1.0);
        assert!((f - 0.25).abs() < 1e-12);
        assert_eq!(expected_hot_fraction(2, 8, 2, 1.0, 0.0), 1.0);
    }

    #[test]
    fn dp_matches_enumeration() {
        // k = 2 of 4, hot = {0, 1}, weights 3, 3, 1, 1.
        let w = [3.0, 3.0, 1.0, 1.0];
        let total: f64 = w.iter().sum();
        let mut expect = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let p = w[i] / total * w[j] / (total - w[i]);
                expect += p * ((i < 2) as u32 + (j < 2) as u32) as f64;
            }
        }
        let f = expected_hot_fraction(2, 4, 2, 3.0, 1.0);
        assert!((f * 2.0 - expect).abs() < 1e-12);
    }

    #[test]
    fn solved_ratio_hits_target() {
        for target in [0.25, 0.316, 0.485, 0.689, 0.9] {
            let r = solve_hot_ratio(2, 8, 2, target).unwrap();
            let f = expected_hot_fraction(2, 8, 2, r, 1.0);
            assert!((f - target).abs() < 1e-9, "{target}: {f}");
        }
        assert!(solve_hot_ratio(2, 8, 2, 1.0).unwrap().is_infinite());
        assert_eq!(solve_hot_ratio(1, 1, 1, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn generated_table_is_calibrated() {
        let m = model_preset("mixtral-8x7b").unwrap();
        let topics: Vec<String> = ["a", "b"].map(String::from).to_vec();
        let cfg = UsageConfig {
            target_hot_hit: 0.485,
            ..UsageConfig::default()
        };
        let t = generate_usage(&m, &topics, &cfg, 5).unwrap();
        t.validate().unwrap();
        assert!((t.expected_hot_hit(0, 2, 0) - 0.485).abs() < 1e-9);
        assert_eq!(t, generate_usage(&m, &topics, &cfg, 5).unwrap());
        assert_ne!(t.hot, generate_usage(&m, &topics, &cfg, 6).unwrap().hot);
    }

    #[test]
    fn shared_experts_count_as_hot() {
        let m = model_preset("llama-4-scout").unwrap();
        assert!((routed_target(&m, 0.75).unwrap() - 0.5).abs() < 1e-12);
        assert!(routed_target(&m, 0.4).is_err());
        let cfg = UsageConfig {
            target_hot_hit: 0.689,
            ..UsageConfig::default()
        };
        let t = generate_usage(&m, &["x".to_string()], &cfg, 1).unwrap();
        assert!((t.expected_hot_hit(0, 1, 1) - 0.689).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_noise_keeps_normalization() {
        let m = model_preset("olmoe").unwrap();
        let cfg = UsageConfig {
            target_hot_hit: 0.5,
            concentration: Some(10.0),
            file: None,
        };
        generate_usage(&m, &["x".to_string()], &cfg, 2)
            .unwrap()
            .validate()
            .unwrap();
    }
}
