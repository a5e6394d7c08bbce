//! Time Warp parallel discrete event simulation.
//!
//! Models implement [`Model`]; the engine partitions their entities over
//! logical processes ([`LogicalProcess`]) that execute optimistically and
//! roll back on causality violations. A [`GvtController`] computes global
//! virtual time to reclaim memory and end the run. LPs talk through a
//! [`Transport`], either in one process or over TCP.
//!
//! [`Phold`] is the standard synthetic benchmark, [`oracle`] a sequential
//! reference simulator, and [`runner`] the experiment driver.

pub mod event_queue;
pub mod executor;
pub mod gvt;
pub mod lp;
pub mod messages;
pub mod model;
pub mod oracle;
pub mod phold;
pub mod rng;
pub mod runner;
pub mod transport;
pub mod wire;

pub use event_queue::EventQueue;
pub use executor::{run_node, run_scheduled, NodeSettings, RunError, Schedule};
pub use gvt::{GvtController, LocalMinReport};
pub use lp::{EngineError, LogicalProcess, LpConfig, LpOutcome};
pub use messages::{
    annihilates, make_antimessage, Address, Control, EntityId, Envelope, LpId, LpSummary, Message,
    MessageKind, Timestamp,
};
pub use model::{Emitter, EntityMap, Model, ModelError};
pub use oracle::{run_sequential, TraceEntry};
pub use phold::{Phold, PholdConfig, PholdPayload, RngMode};
pub use rng::{seed_for_entity, RngState};
pub use runner::{run_experiment, speedup_table, Backend, RunConfig, RunMetrics};
pub use transport::{InProcessTransport, TcpTransport, Topology, Transport};
