//! Lane geometry, the lane token codec, evaluation metrics, reward functions
//! and a procedural scene generator.

pub mod codec;
pub mod geometry;
pub mod metrics;
pub mod rewards;
pub mod synthdata;

pub use codec::{SceneCodec, SequenceFormat, Token, TokenSequence, Vocabulary};
pub use geometry::{ImageDims, Lane, Point, PolyLane, PolygonLane, PolylineLane};
pub use metrics::{EvalReport, MatchParams};
pub use rewards::{RewardBreakdown, RewardWeights};
pub use synthdata::{SceneRecord, SceneSpec};
