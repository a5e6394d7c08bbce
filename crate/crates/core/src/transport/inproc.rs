use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::{Transport, TransportError};
use crate::messages::{Address, Envelope};

struct Mailbox<P> {
    tx: Sender<Envelope<P>>,
    rx: Receiver<Envelope<P>>,
    sent: AtomicU64,
    delivered: AtomicU64,
}

impl<P> Mailbox<P> {
    fn new() -> Self {
        let (tx, rx) = unbounded();
        Mailbox {
            tx,
            rx,
            sent: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
        }
    }
}

/// Unbounded channel per endpoint; all endpoints live in this process.
pub struct InProcessTransport<P> {
    lps: Vec<Mailbox<P>>,
    controller: Mailbox<P>,
}

impl<P: Send> InProcessTransport<P> {
    pub fn new(num_lps: u32) -> Self {
        InProcessTransport {
            lps: (0..num_lps).map(|_| Mailbox::new()).collect(),
            controller: Mailbox::new(),
        }
    }

    fn mailbox(&self, addr: Address) -> Result<&Mailbox<P>, TransportError> {
        match addr {
            Address::Controller => Ok(&self.controller),
            Address::Lp(lp) => self
                .lps
                .get(lp.index())
                .ok_or(TransportError::UnknownDestination(addr)),
        }
    }

    /// Envelopes sent to `addr` so far.
    pub fn sent_count(&self, addr: Address) -> u64 {
        self.mailbox(addr)
            .map_or(0, |m| m.sent.load(Ordering::Relaxed))
    }

    /// Envelopes handed to `addr`'s owner so far.
    pub fn delivered_count(&self, addr: Address) -> u64 {
        self.mailbox(addr)
            .map_or(0, |m| m.delivered.load(Ordering::Relaxed))
    }

    pub fn pending(&self, addr: Address) -> usize {
        self.mailbox(addr).map_or(0, |m| m.rx.len())
    }
}

impl<P: Send> Transport<P> for InProcessTransport<P> {
    fn send(&self, env: Envelope<P>) -> Result<(), TransportError> {
        let addr = env.destination();
        let mailbox = self.mailbox(addr)?;
        mailbox.sent.fetch_add(1, Ordering::Relaxed);
        // the receiver half lives in `self`, so the channel cannot be closed
        mailbox
            .tx
            .send(env)
            .map_err(|_| TransportError::Disconnected {
                peer: format!("{addr:?}"),
                reason: "channel closed".into(),
            })
    }

    fn receive_batch(&self, me: Address, max: usize) -> Result<Vec<Envelope<P>>, TransportError> {
        let mailbox = self.mailbox(me)?;
        let batch: Vec<_> = mailbox.rx.try_iter().take(max).collect();
        mailbox
            .delivered
            .fetch_add(batch.len() as u64, Ordering::Relaxed);
        Ok(batch)
    }

    fn receive_timeout(
        &self,
        me: Address,
        timeout: Duration,
    ) -> Result<Option<Envelope<P>>, TransportError> {
        let mailbox = self.mailbox(me)?;
        match mailbox.rx.recv_timeout(timeout) {
            Ok(env) => {
                mailbox.delivered.fetch_add(1, Ordering::Relaxed);
                Ok(Some(env))
            }
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Disconnected {
                peer: format!("{me:?}"),
                reason: "channel closed".into(),
            }),
        }
    }
}
