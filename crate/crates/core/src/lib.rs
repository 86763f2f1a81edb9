//! Iterative spatio-temporal perception for multimodal chat models.
//!
//! A sample is answered over several rounds. Each round the model emits a
//! `<think>` block, a `<clue>` naming where the evidence lies (a time span,
//! a pixel box or a per-frame box track) and usually an `<answer>`. The next
//! round's visual input is re-sampled around that clue. The crate also holds
//! the verifiable rewards used to train such models, the grounding and
//! tracking metrics used to evaluate them, and the annotated record format.

pub mod dataset;
pub mod engine;
pub mod eval;
pub mod gateway;
pub mod metrics;
pub mod protocol;
pub mod rewards;
pub mod sampling;
pub mod spacetime;

pub use dataset::{MediaKind, MediaProbe, MediaRef, Record, TaskKind, Verdict, Violation};
pub use engine::{run_episode, EpisodeTrace, ItpConfig, OnMalformed, VisualPlan};
pub use eval::{run_eval, EvalOptions, EvalOutcome};
pub use gateway::{ChatModel, ChatRequest, EncodedImage, GatewayError, HttpChatModel, MockModel, MockScript, ModelEndpoint};
pub use metrics::{MetricOptions, MetricReport};
pub use protocol::{parse_response, validate_format, ParsedResponse, ResponseSchema};
pub use rewards::{RewardBreakdown, RewardOptions, RewardWeights};
pub use sampling::{Dims, FramePlan, SamplingConfig};
pub use spacetime::{BoundingBox, BoxSequence, Clue, ClueKind, Ratio, TemporalInterval};
