//! Topic-aware batching with a TTFT guard.

use crate::config::WorkloadConfig;
use crate::serving::requests::Request;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Predicted topic the placement is tuned for.
    pub topic: usize,
    pub requests: Vec<Request>,
    /// Requests included only because their deadline could not wait.
    pub forced: usize,
}

/// Picks the predicted topic with the most queued requests (ties to the
/// lower topic index) and fills FIFO up to `max_batch`. Requests whose
/// deadline falls within the next scheduling period go in first whatever
/// their topic. `queue` keeps arrival order; chosen requests are removed.
pub fn schedule_next_batch(
    queue: &mut Vec<Request>,
    now_s: f64,
    w: &WorkloadConfig,
    num_topics: usize,
) -> Option<Batch> {
    if queue.is_empty() {
        return None;
    }
    let max_batch = w.max_batch.max(1) as usize;
    let horizon = now_s + w.schedule_period_ms * 1e-3;

    let mut counts = vec![0usize; num_topics.max(1)];
    for r in queue.iter() {
        counts[r.predicted_topic] += 1;
    }
    let topic = (0..counts.len())
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
        .unwrap_or(0);

    let mut take = vec![false; queue.len()];
    let mut chosen = 0;
    let mut forced = 0;
    for (i, r) in queue.iter().enumerate() {
        if chosen == max_batch {
            break;
        }
        if r.ttft_deadline_s <= horizon {
            take[i] = true;
            chosen += 1;
            if r.predicted_topic != topic {
                forced += 1;
            }
        }
    }
    for (i, r) in queue.iter().enumerate() {
        if chosen == max_batch {
            break;
        }
        if !take[i] && r.predicted_topic == topic {
            take[i] = true;
            chosen += 1;
        }
    }

    let mut requests = Vec::with_capacity(chosen);
    let mut keep = Vec::with_capacity(queue.len() - chosen);
    for (r, t) in queue.drain(..).zip(take) {
        if t {
            requests.push(r);
        } else {
            keep.push(r);
        }
    }
    *queue = keep;
    Some(Batch {
        topic,
        requests,
        forced,
    })
}
