//! End-to-end serving simulation.

pub mod requests;
pub mod routing;
pub mod scheduler;
pub mod sim;
pub mod usage;
pub mod xpu;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use requests::{classify, generate_requests, Request};
pub use routing::{route_tokens, BatchTrace};
pub use scheduler::{schedule_next_batch, Batch};
pub use sim::{
    request_stream, run_serving, topic_placement, usage_table, CsvTrace, NoTrace, Policy,
    SimOptions, StepRow, TraceSink,
};
pub use usage::{generate_usage, load_usage, ExpertUsageTable};
pub use xpu::{prefill_time_xpu, PrefillCost};

pub(crate) const STREAM_ARRIVALS: u64 = 1;
pub(crate) const STREAM_CLASSIFIER: u64 = 2;
pub(crate) const STREAM_USAGE: u64 = 3;
/// Per-request routing streams start here, offset by request id.
pub(crate) const STREAM_ROUTING: u64 = 1 << 32;

/// Independent deterministic stream `stream` of the generator seeded with
/// `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
