//! Discrete-event simulator of a cloud-edge-terminal multimodal sensing
//! framework with three operation modes (global fusion, cooperative relay,
//! peer interaction).

pub mod calibration;
pub mod controller;
pub mod engine;
pub mod model;
pub mod netmodel;
pub mod protocols;
pub mod semantics;

pub use calibration::{
    compute_cost, effective_accuracy, sensing_accuracy, total_latency, total_latency_for,
    CalibrationError, CalibrationTable, ComputeCost, LatencyBreakdown,
};
pub use controller::{feasible_variants, select_mode, ControllerError, LinkState, Selection, SelectionRequest};
pub use engine::{rng_stream, Engine, Event, EventKind, RngStream, Trace};
pub use model::{
    LinkClass, LinkSpec, Message, MessageKind, Modality, ModalitySet, Mode, ModeVariant, Node,
    NodeId, NodeKind, Scenario,
};
pub use netmodel::{plan_flow, route, transmit_latency, FlowPlan, NetError, Payloads, Topology};
pub use protocols::{run_round, DefenseConfig, ProtocolError, RoundContext, RoundResult, Session};
pub use semantics::{inject_attack, AttackKind, AttackSpec, CodecSet, CodecSpec, SemanticFeature};
