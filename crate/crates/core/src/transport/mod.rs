//! Reliable delivery between LPs and the GVT controller.
//!
//! Two backends implement [`Transport`]: [`InProcessTransport`] (channels
//! between threads of one process) and [`TcpTransport`] (one persistent
//! connection per pair of nodes). The engine sees no difference between them.
//! Delivery is exactly-once; order across senders is not guaranteed, but
//! messages from one sender to one receiver arrive in send order, which the
//! controller's request/broadcast sequence relies on.

mod inproc;
mod tcp;

use std::fmt;
use std::ops::Range;
use std::time::Duration;

use thiserror::Error;

use crate::lp::Outbox;
use crate::messages::{Address, Envelope, LpId};
use crate::wire::DecodeError;

pub use inproc::InProcessTransport;
pub use tcp::{TcpOptions, TcpTransport};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no endpoint hosts {0:?}")]
    UnknownDestination(Address),
    #[error("{0:?} is not hosted on this node")]
    NotLocal(Address),
    #[error("connection to {peer} lost: {reason}")]
    Disconnected { peer: String, reason: String },
    #[error("i/o error with {peer}: {source}")]
    Io {
        peer: String,
        #[source]
        source: std::io::Error,
    },
    #[error("could not connect to {peer} after {attempts} attempts: {source}")]
    ConnectFailed {
        peer: String,
        attempts: u32,
        #[source]
        source: std::io::Error,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("malformed frame: {0}")]
    Decode(#[from] DecodeError),
    #[error("invalid topology: {0}")]
    Topology(String),
}

/// Message delivery contract shared by every backend.
pub trait Transport<P>: Send + Sync {
    /// Queues `env` for its destination. Never blocks on the receiver.
    fn send(&self, env: Envelope<P>) -> Result<(), TransportError>;

    /// Up to `max` pending envelopes for `me`, without blocking.
    fn receive_batch(&self, me: Address, max: usize) -> Result<Vec<Envelope<P>>, TransportError>;

    /// Waits up to `timeout` for one envelope.
    fn receive_timeout(
        &self,
        me: Address,
        timeout: Duration,
    ) -> Result<Option<Envelope<P>>, TransportError>;
}

/// Adapts a transport to the LP's [`Outbox`].
pub struct TransportOutbox<'a, T: ?Sized>(pub &'a T);

impl<P, T: Transport<P> + ?Sized> Outbox<P> for TransportOutbox<'_, T> {
    fn post(&mut self, env: Envelope<P>) -> Result<(), TransportError> {
        self.0.send(env)
    }
}

/// One process taking part in a run, and the LPs it hosts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Endpoint {
    pub name: String,
    /// `host:port`
    pub addr: String,
    pub lps: Range<u32>,
}

/// Static placement of LPs and the controller on nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub nodes: Vec<Endpoint>,
    /// Index into `nodes` of the node running the GVT controller.
    pub controller: usize,
}

impl Topology {
    /// Everything on one in-process node.
    pub fn local(num_lps: u32) -> Self {
        Topology {
            nodes: vec![Endpoint {
                name: "local".into(),
                addr: "127.0.0.1:0".into(),
                lps: 0..num_lps,
            }],
            controller: 0,
        }
    }

    /// Checks the nodes partition `0..num_lps` exactly.
    pub fn validate(&self, num_lps: u32) -> Result<(), TransportError> {
        if self.nodes.is_empty() {
            return Err(TransportError::Topology("no nodes".into()));
        }
        if self.controller >= self.nodes.len() {
            return Err(TransportError::Topology(
                "controller node out of range".into(),
            ));
        }
        let mut owner = vec![None; num_lps as usize];
        for (i, node) in self.nodes.iter().enumerate() {
            if self.nodes[..i].iter().any(|n| n.name == node.name) {
                return Err(TransportError::Topology(format!(
                    "duplicate node {}",
                    node.name
                )));
            }
            for lp in node.lps.clone() {
                let slot = owner.get_mut(lp as usize).ok_or_else(|| {
                    TransportError::Topology(format!(
                        "node {} hosts LP{lp} but L={num_lps}",
                        node.name
                    ))
                })?;
                if let Some(other) = slot.replace(i) {
                    return Err(TransportError::Topology(format!(
                        "LP{lp} hosted by both {} and {}",
                        self.nodes[other].name, node.name
                    )));
                }
            }
        }
        if let Some(lp) = owner.iter().position(Option::is_none) {
            return Err(TransportError::Topology(format!(
                "LP{lp} is not hosted by any node"
            )));
        }
        Ok(())
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Node hosting `addr`.
    pub fn node_of(&self, addr: Address) -> Option<usize> {
        match addr {
            Address::Controller => Some(self.controller),
            Address::Lp(LpId(lp)) => self.nodes.iter().position(|n| n.lps.contains(&lp)),
        }
    }

    pub fn num_lps(&self) -> u32 {
        self.nodes.iter().map(|n| n.lps.len() as u32).sum()
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}@{}[{}..{})", n.name, n.addr, n.lps.start, n.lps.end)?;
            if i == self.controller {
                f.write_str("*")?;
            }
        }
        Ok(())
    }
}
