//! Request arrivals and the topic classifier stand-in.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::config::WorkloadConfig;
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_s: f64,
    pub true_topic: usize,
    pub predicted_topic: usize,
    pub input_len: u32,
    pub output_len: u32,
    pub ttft_deadline_s: f64,
    /// Time the request enters the serving queue, after classification.
    pub ready_s: f64,
}

/// Poisson arrivals over `[0, horizon_s)` with topics drawn from the mix.
/// Predicted topics equal true topics until [`classify`] is applied.
pub fn generate_requests<R: Rng>(
    w: &WorkloadConfig,
    horizon_s: f64,
    rng: &mut R,
) -> Result<Vec<Request>> {
    if w.arrival_rate <= 0.0 || horizon_s <= 0.0 {
        return Ok(Vec::new());
    }
    let gap = Exp::new(w.arrival_rate)
        .map_err(|e| SimError::invalid("workload.arrival_rate", e.to_string()))?;
    let topics = WeightedIndex::new(&w.topic_mix)
        .map_err(|e| SimError::invalid("workload.topic_mix", e.to_string()))?;
    let slo_s = w.ttft_slo_ms * 1e-3;
    let overhead_s = w.classifier_overhead_ms * 1e-3;
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t >= horizon_s {
            break;
        }
        let topic = topics.sample(rng);
        out.push(Request {
            id: out.len() as u64,
            arrival_s: t,
            true_topic: topic,
            predicted_topic: topic,
            input_len: w.input_len,
            output_len: w.output_len,
            ttft_deadline_s: t + slo_s,
            ready_s: t + overhead_s,
        });
    }
    Ok(out)
}

/// Correct with probability `accuracy`, otherwise uniform over the other
/// topics.
pub fn classify<R: Rng>(true_topic: usize, num_topics: usize, accuracy: f64, rng: &mut R) -> usize {
    if num_topics <= 1 || rng.random::<f64>() < accuracy {
        return true_topic;
    }
    let pick = rng.random_range(0..num_topics - 1);
    if pick >= true_topic {
        pick + 1
    } else {
        pick
    }
}
