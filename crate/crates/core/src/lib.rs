//! Core pipeline for gateway-side IoT traffic control: parse per-device
//! packet captures, aggregate per-destination traffic statistics over fixed
//! time windows, classify each destination as essential or non-essential
//! with a random forest or a small fully connected network, and turn the
//! verdicts into IP-block and DNS-override rules.

pub mod capture;
pub mod eval;
pub mod features;
pub mod labeling;
pub mod models;
pub mod runtime;
pub mod synth;

pub use capture::{
    DestinationKey, DestinationKind, Direction, DnsTable, PacketRecord, ParsedCapture, Transport,
};
pub use features::{FeatureVector, NormalizationProfile, ProfileSet, WindowKey};
pub use labeling::{DestinationLabel, Label, LabelSet, LabeledSample, SimulatedDevice};
pub use models::{Model, ModelKind, Prediction};
pub use runtime::{BlockDecision, Blocklist, RotationConfig};
