//! Top-k routing samples drawn from usage tables.

use rand::Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Result, SimError};
use crate::serving::usage::ExpertUsageTable;

/// Draws `k` distinct indices, each draw proportional to the remaining
/// weights. Falls back to uniform over the remainder if its weight is zero.
pub fn sample_without_replacement<R: Rng>(
    probs: &[f64],
    k: usize,
    rng: &mut R,
    out: &mut Vec<u32>,
) {
    out.clear();
    let mut taken = vec![false; probs.len()];
    for _ in 0..k.min(probs.len()) {
        let left: f64 = probs
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| !t)
            .map(|(p, _)| *p)
            .sum();
        let pick = if left > 0.0 {
            let mut u = rng.random::<f64>() * left;
            let mut pick = None;
            for (i, p) in probs.iter().enumerate() {
                if taken[i] || *p <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if u < *p {
                    break;
                }
                u -= p;
            }
            pick.expect("positive weight left")
        } else {
            let free: Vec<usize> = (0..probs.len()).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[pick] = true;
        out.push(pick as u32);
    }
}

/// Experts one token activates in one layer: `k` routed ids, then the
/// shared experts numbered after the routed ones.
pub fn route_token<R: Rng>(
    table: &ExpertUsageTable,
    model: &ModelConfig,
    topic: usize,
    layer: u32,
    rng: &mut R,
    out: &mut Vec<u32>,
) -> Result<()> {
    let dist = table
        .probs
        .get(topic)
        .and_then(|t| t.get(layer as usize))
        .ok_or_else(|| {
            SimError::invalid(
                "usage",
                format!("no distribution for topic {topic} layer {layer}"),
            )
        })?;
    sample_without_replacement(dist, model.active_experts as usize, rng, out);
    out.extend((0..model.shared_experts).map(|s| model.experts_per_layer + s));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchTrace {
    pub request_ids: Vec<u64>,
    /// experts[token][layer]
    pub experts: Vec<Vec<Vec<u32>>>,
    pub hot_hits: u64,
    pub accesses: u64,
}

/// Routes one decode token per topic in `true_topics`. An access is a hot
/// hit when `is_hot(layer, expert)` says so.
pub fn route_tokens<R: Rng>(
    request_ids: &[u64],
    true_topics: &[usize],
    table: &ExpertUsageTable,
    model: &ModelConfig,
    is_hot: impl Fn(u32, u32) -> bool,
    rng: &mut R,
) -> Result<BatchTrace> {
    let mut experts = Vec::with_capacity(true_topics.len());
    let (mut hot_hits, mut accesses) = (0, 0);
    let mut buf = Vec::new();
    for &topic in true_topics {
        let mut per_layer = Vec::with_capacity(model.num_layers as usize);
        for layer in 0..model.num_layers {
            route_token(table, model, topic, layer, rng, &mut buf)?;
            accesses += buf.len() as u64;
            hot_hits += buf.iter().filter(|&&e| is_hot(layer, e)).count() as u64;
            per_layer.push(buf.clone());
        }
        experts.push(per_layer);
    }
    Ok(BatchTrace {
        request_ids: request_ids.to_vec(),
        experts,
        hot_hits,
        accesses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::model_preset;
    use crate::serving::stream_rng;

    fn table(probs: Vec<f64>) -> ExpertUsageTable {
        let experts = probs.len() as u32;
        ExpertUsageTable {
            topics: vec!["t".into()],
            layers: 1,
            experts,
            probs: vec![vec![probs]],
            hot: vec![vec![vec![0]]],
        }
    }

    #[test]
    fn one_hot_always_selected() {
        let mut m = model_preset("mixtral-8x7b").unwrap();
        m.num_layers = 1;
        m.active_experts = 1;
        let t = table(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut rng = stream_rng(1, 0);
        let mut out = Vec::new();
        for _ in 0..100 {
            route_token(&t, &m, 0, 0, &mut rng, &mut out).unwrap();
            assert_eq!(out, vec![2]);
        }
    }

    #[test]
    fn uniform_hit_rate() {
        let mut m = model_preset("mixtral-8x7b").unwrap();
        m.num_layers = 1;
        let t = table(vec![0.125; 8]);
        let mut rng = stream_rng(2, 0);
        let mut hits = [0u32; 8];
        let mut out = Vec::new();
        let n = 10_000;
        for _ in 0..n {
            route_token(&t, &m, 0, 0, &mut rng, &mut out).unwrap();
            assert_eq!(out.len(), 2);
            assert_ne!(out[0], out[1]);
            out.iter().for_each(|&e| hits[e as usize] += 1);
        }
        for h in hits {
            assert!((h as f64 / n as f64 - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn shared_expert_every_token() {
        let mut m = model_preset("llama-4-scout").unwrap();
        m.num_layers = 1;
        let t = table(vec![1.0 / 16.0; 16]);
        let trace = route_tokens(
            &[0, 1, 2],
            &[0, 0, 0],
            &t,
            &m,
            |_, e| e == 16,
            &mut stream_rng(3, 0),
        )
        .unwrap();
        for tok in &trace.experts {
            assert_eq!(tok[0].len(), 2);
            assert_eq!(tok[0][1], 16);
        }
        assert_eq!(trace.accesses, 6);
        assert!(trace.hot_hits >= 3);
    }

    #[test]
    fn missing_topic_is_an_error() {
        let m = model_preset("mixtral-8x7b").unwrap();
        let t = table(vec![0.125; 8]);
        assert!(route_token(&t, &m, 3, 0, &mut stream_rng(1, 0), &mut Vec::new()).is_err());
    }
}
