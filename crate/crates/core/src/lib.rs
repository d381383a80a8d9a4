//! Model-free stabilization of unstable fixed points in chaotic maps.
//!
//! The pipeline has two stages. First the fixed point is estimated from
//! close recurrences of an uncontrolled orbit and a box-shaped control region
//! is placed around it ([`region`]). Then a normalized-advantage-function
//! Q-network ([`net`], [`rl`]) learns a state-feedback policy that is only
//! active inside that region ([`harness`]).

pub mod dynamics;
pub mod error;
pub mod export;
pub mod harness;
pub mod net;
pub mod par;
pub mod pipeline;
pub mod region;
pub mod rl;
pub mod seeding;

pub use dynamics::{ControlInput, ControlledMap, GumowskiMira, GumowskiMiraParams, RawState};
pub use error::{Error, Result};
pub use harness::{Controller, TrainConfig};
pub use net::{NafOutput, NetArchitecture, NetParams};
pub use region::{Region, TransformedState};
