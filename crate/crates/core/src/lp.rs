//! The Time Warp logical process.
//!
//! An LP executes the events of its entities speculatively in timestamp
//! order, saving a snapshot before each one. A straggler (an event older than
//! the LP's local virtual time) or an antimessage for an already executed
//! event rolls the LP back: saved state is restored, the messages sent by the
//! undone events are cancelled with antimessages, and the undone events go
//! back into the inbox to be executed again.
//!
//! The LP is a passive state machine. An executor feeds it envelopes
//! ([`receive`](LogicalProcess::receive) + [`drain_transport`]) and calls
//! [`step`] to execute one event; everything the LP sends goes through an
//! [`Outbox`].
//!
//! [`drain_transport`]: LogicalProcess::drain_transport
//! [`step`]: LogicalProcess::step

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use log::trace;
use thiserror::Error;

use crate::event_queue::EventQueue;
use crate::gvt::LocalMinReport;
use crate::messages::{
    make_antimessage, Control, Envelope, EventIdentity, LpId, LpSummary, Message, MessageError,
    MessageKind, Timestamp,
};
use crate::model::{Emission, Emitter, EntityMap, Model, ModelError};
use crate::oracle::TraceEntry;
use crate::transport::TransportError;

pub const DEFAULT_MAX_RECEIVED_MESSAGES: usize = 64;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{lp}: {source}")]
    Model {
        lp: LpId,
        #[source]
        source: ModelError,
    },
    #[error("{lp}: {source}")]
    Message {
        lp: LpId,
        #[source]
        source: MessageError,
    },
    #[error("{lp}: transport failure: {source}")]
    Transport {
        lp: LpId,
        #[source]
        source: TransportError,
    },
    #[error("{lp}: rollback to {target} is below GVT {gvt}")]
    RollbackBelowGvt {
        lp: LpId,
        target: Timestamp,
        gvt: Timestamp,
    },
    #[error("{lp}: GVT regressed from {from} to {to}")]
    GvtRegression {
        lp: LpId,
        from: Timestamp,
        to: Timestamp,
    },
    #[error("{lp}: unexpected envelope {what}")]
    Unexpected { lp: LpId, what: String },
}

/// Destination for everything an LP sends.
pub trait Outbox<P> {
    fn post(&mut self, env: Envelope<P>) -> Result<(), TransportError>;
}

impl<P> Outbox<P> for Vec<Envelope<P>> {
    fn post(&mut self, env: Envelope<P>) -> Result<(), TransportError> {
        self.push(env);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpConfig {
    /// Events at or beyond this time are never committed.
    pub end_time: Timestamp,
    pub max_received_messages: usize,
    pub record_trace: bool,
}

impl LpConfig {
    pub fn new(end_time: Timestamp) -> Self {
        LpConfig {
            end_time,
            max_received_messages: DEFAULT_MAX_RECEIVED_MESSAGES,
            record_trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Running,
    Terminating,
}

/// One processed event: the state before it, the event, and what it sent.
#[derive(Debug)]
pub struct HistoryEntry<M: Model> {
    pub timestamp: Timestamp,
    pub snapshot: M::Snapshot,
    pub event: Message<M::Payload>,
    pub emitted: Vec<Message<M::Payload>>,
}

/// Unacknowledged sent messages, ordered by timestamp.
///
/// An event and its antimessage share a sequence number and a timestamp, so
/// both may be outstanding under the same key; acks remove one at a time.
#[derive(Debug, Default)]
struct AckLedger {
    by_time: BTreeMap<(Timestamp, u64), u8>,
    by_seq: HashMap<u64, Timestamp>,
}

impl AckLedger {
    fn insert(&mut self, seq: u64, ts: Timestamp) {
        *self.by_time.entry((ts, seq)).or_insert(0) += 1;
        self.by_seq.insert(seq, ts);
    }

    fn acknowledge(&mut self, seq: u64) -> bool {
        let Some(&ts) = self.by_seq.get(&seq) else {
            return false;
        };
        let count = self
            .by_time
            .get_mut(&(ts, seq))
            .expect("ledger indexes agree");
        *count -= 1;
        if *count == 0 {
            self.by_time.remove(&(ts, seq));
            self.by_seq.remove(&seq);
        }
        true
    }

    fn min(&self) -> Option<Timestamp> {
        self.by_time.keys().next().map(|(t, _)| *t)
    }

    fn len(&self) -> usize {
        self.by_time.values().map(|c| *c as usize).sum()
    }
}

/// Result of running an LP to completion.
#[derive(Debug)]
pub struct LpOutcome<S> {
    pub lp: LpId,
    pub summary: LpSummary,
    /// Committed events below the end time, in execution order.
    pub trace: Vec<TraceEntry>,
    pub model_summary: S,
}

pub struct LogicalProcess<M: Model> {
    model: Arc<M>,
    map: EntityMap,
    config: LpConfig,
    my_id: LpId,
    received_messages: VecDeque<Envelope<M::Payload>>,
    inbox_messages: EventQueue<M::Payload>,
    history: VecDeque<HistoryEntry<M>>,
    to_ack_messages: AckLedger,
    anti_messages: HashMap<EventIdentity, Message<M::Payload>>,
    current_event: Option<EventIdentity>,
    model_state: M::State,
    timestamp: Timestamp,
    gvt: Timestamp,
    last_gvt_round: Option<u64>,
    rollbacks: u64,
    /// Round whose report this LP has sent and whose GVT it has not yet seen.
    samadi_find_mode: Option<u64>,
    samadi_marked_messages_min: Option<Timestamp>,
    message_seq_number: u64,
    status: LpStatus,
    events_processed: u64,
    events_committed: u64,
    peak_history: usize,
    remote_sends: u64,
    trace: Vec<TraceEntry>,
}

impl<M: Model> LogicalProcess<M> {
    pub fn new(model: Arc<M>, map: EntityMap, my_id: LpId, config: LpConfig) -> Self {
        let model_state = model.init(my_id, &map);
        LogicalProcess {
            model,
            map,
            config,
            my_id,
            received_messages: VecDeque::new(),
            inbox_messages: EventQueue::new(),
            history: VecDeque::new(),
            to_ack_messages: AckLedger::default(),
            anti_messages: HashMap::new(),
            current_event: None,
            model_state,
            timestamp: Timestamp::ZERO,
            gvt: Timestamp::ZERO,
            last_gvt_round: None,
            rollbacks: 0,
            samadi_find_mode: None,
            samadi_marked_messages_min: None,
            message_seq_number: 0,
            status: LpStatus::Running,
            events_processed: 0,
            events_committed: 0,
            peak_history: 0,
            remote_sends: 0,
            trace: Vec::new(),
        }
    }

    pub fn id(&self) -> LpId {
        self.my_id
    }

    pub fn lvt(&self) -> Timestamp {
        self.timestamp
    }

    pub fn gvt(&self) -> Timestamp {
        self.gvt
    }

    pub fn rollbacks(&self) -> u64 {
        self.rollbacks
    }

    pub fn status(&self) -> LpStatus {
        self.status
    }

    pub fn model_state(&self) -> &M::State {
        &self.model_state
    }

    pub fn inbox(&self) -> &EventQueue<M::Payload> {
        &self.inbox_messages
    }

    pub fn history(&self) -> impl Iterator<Item = &HistoryEntry<M>> {
        self.history.iter()
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn peak_history(&self) -> usize {
        self.peak_history
    }

    pub fn unacked_len(&self) -> usize {
        self.to_ack_messages.len()
    }

    pub fn buffered_antimessages(&self) -> impl Iterator<Item = &Message<M::Payload>> {
        self.anti_messages.values()
    }

    pub fn in_find_mode(&self) -> bool {
        self.samadi_find_mode.is_some()
    }

    pub fn committed_trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    /// Events minus antimessages held by this LP that are still waiting to
    /// be matched or executed.
    pub fn pending_population(&self) -> i64 {
        self.inbox_messages.len() as i64 - self.anti_messages.len() as i64
    }

    pub fn summary(&self) -> LpSummary {
        LpSummary {
            rollbacks: self.rollbacks,
            events_processed: self.events_processed,
            events_committed: self.events_committed,
            peak_history: self.peak_history as u64,
            remote_sends: self.remote_sends,
        }
    }

    fn model_err(&self, source: ModelError) -> EngineError {
        EngineError::Model {
            lp: self.my_id,
            source,
        }
    }

    fn msg_err(&self, source: MessageError) -> EngineError {
        EngineError::Message {
            lp: self.my_id,
            source,
        }
    }

    fn post(
        &self,
        out: &mut impl Outbox<M::Payload>,
        env: Envelope<M::Payload>,
    ) -> Result<(), EngineError> {
        out.post(env).map_err(|source| EngineError::Transport {
            lp: self.my_id,
            source,
        })
    }

    /// Sends the model's time-zero events. Call once before anything else.
    pub fn start(&mut self, out: &mut impl Outbox<M::Payload>) -> Result<(), EngineError> {
        let mut emit = Emitter::new(Timestamp::ZERO);
        self.model.initial_events(&mut self.model_state, &mut emit);
        let emissions = emit.finish().map_err(|e| self.model_err(e))?;
        self.dispatch(emissions, out)?;
        Ok(())
    }

    /// Buffers envelopes handed over by the transport.
    pub fn receive(&mut self, batch: impl IntoIterator<Item = Envelope<M::Payload>>) {
        self.received_messages.extend(batch);
    }

    pub fn has_received(&self) -> bool {
        !self.received_messages.is_empty()
    }

    /// Classifies up to `max_received_messages` buffered envelopes. Returns
    /// how many were handled.
    pub fn drain_transport(
        &mut self,
        out: &mut impl Outbox<M::Payload>,
    ) -> Result<usize, EngineError> {
        let mut handled = 0;
        while handled < self.config.max_received_messages {
            let Some(env) = self.received_messages.pop_front() else {
                break;
            };
            self.deliver(env, out)?;
            handled += 1;
        }
        Ok(handled)
    }

    /// Classifies one envelope.
    pub fn deliver(
        &mut self,
        env: Envelope<M::Payload>,
        out: &mut impl Outbox<M::Payload>,
    ) -> Result<(), EngineError> {
        match env {
            Envelope::Sim(m) => self.deliver_sim(m, out),
            Envelope::Control(c) => self.deliver_control(c, out),
        }
    }

    fn deliver_sim(
        &mut self,
        m: Message<M::Payload>,
        out: &mut impl Outbox<M::Payload>,
    ) -> Result<(), EngineError> {
        if m.lp_receiver != self.my_id {
            return Err(EngineError::Unexpected {
                lp: self.my_id,
                what: format!("{:?} addressed to {}", m.kind, m.lp_receiver),
            });
        }
        match m.kind {
            MessageKind::Ack | MessageKind::MarkedAck => {
                if !self.to_ack_messages.acknowledge(m.seq_number) {
                    trace!("{}: ack for unknown seq {}", self.my_id, m.seq_number);
                }
                if m.kind == MessageKind::MarkedAck {
                    // The receiver has already reported for this round, so it
                    // did not count the message; it falls to us.
                    self.samadi_marked_messages_min = Some(
                        self.samadi_marked_messages_min
                            .map_or(m.timestamp, |t| t.min(m.timestamp)),
                    );
                }
                Ok(())
            }
            MessageKind::Event | MessageKind::Antimessage => {
                let ack = Message::ack_for(&m, self.samadi_find_mode.is_some());
                if m.kind == MessageKind::Event {
                    self.accept_event(m)?;
                } else {
                    self.handle_antimessage(m, out)?;
                }
                self.post(out, Envelope::Sim(ack))
            }
        }
    }

    fn accept_event(&mut self, m: Message<M::Payload>) -> Result<(), EngineError> {
        if self.anti_messages.remove(&m.identity()).is_some() {
            trace!(
                "{}: event {:?} annihilated by buffered antimessage",
                self.my_id,
                m.identity()
            );
            return Ok(());
        }
        self.inbox_messages
            .insert_ordered(m)
            .map_err(|e| self.msg_err(e))
    }

    fn deliver_control(
        &mut self,
        c: Control,
        out: &mut impl Outbox<M::Payload>,
    ) -> Result<(), EngineError> {
        match c {
            Control::GvtRequest { round, .. } => {
                let report = self.report(round);
                self.post(
                    out,
                    Envelope::Control(Control::GvtReport {
                        lp: self.my_id,
                        round,
                        local_min: report.local_min,
                    }),
                )
            }
            Control::GvtBroadcast { round, gvt, .. } => self.apply_gvt(round, gvt),
            Control::Stop { round, gvt, .. } => {
                self.apply_gvt(round, gvt.max(self.gvt))?;
                self.terminate_run();
                let summary = self.summary();
                self.post(
                    out,
                    Envelope::Control(Control::Summary {
                        lp: self.my_id,
                        summary,
                    }),
                )
            }
            other => Err(EngineError::Unexpected {
                lp: self.my_id,
                what: format!("{other:?}"),
            }),
        }
    }

    fn apply_gvt(&mut self, round: u64, gvt: Timestamp) -> Result<(), EngineError> {
        if self.last_gvt_round.is_some_and(|r| r >= round) {
            return Ok(());
        }
        self.last_gvt_round = Some(round);
        if self.samadi_find_mode.is_some_and(|r| r <= round) {
            self.samadi_find_mode = None;
        }
        self.fossil_collect(gvt)
    }

    /// True when nothing below the end time is waiting to be executed.
    pub fn at_horizon(&self) -> bool {
        self.inbox_messages
            .min_timestamp()
            .is_none_or(|t| t >= self.config.end_time)
    }

    /// Lower bound on the timestamp of anything this LP can still execute,
    /// send, or be rolled back to.
    ///
    /// An LP with nothing left to execute below the end time contributes the
    /// end time instead of its LVT: anything that could still roll it back
    /// is already counted by some inbox, unacknowledged send or marked ack.
    pub fn local_min(&self) -> Timestamp {
        let clock = if self.at_horizon() {
            self.config.end_time
        } else {
            self.timestamp
        };
        [
            Some(clock),
            self.inbox_messages.min_timestamp(),
            self.to_ack_messages.min(),
            self.samadi_marked_messages_min,
        ]
        .into_iter()
        .flatten()
        .min()
        .expect("LVT is always present")
    }

    /// Answers a GVT request: enters find mode for `round` and returns the
    /// local minimum, consuming the marked-ack minimum.
    pub fn report(&mut self, round: u64) -> LocalMinReport {
        self.samadi_find_mode = Some(round);
        let local_min = self.local_min();
        self.samadi_marked_messages_min = None;
        LocalMinReport {
            lp: self.my_id,
            local_min,
        }
    }

    /// Executes the lowest-timestamp pending event, or rolls back if it is a
    /// straggler. Returns false when there was nothing to do below the end
    /// time.
    pub fn step(&mut self, out: &mut impl Outbox<M::Payload>) -> Result<bool, EngineError> {
        if self.status != LpStatus::Running || self.at_horizon() {
            return Ok(false);
        }
        let event = self.inbox_messages.pop_min().expect("inbox is not empty");
        if event.timestamp < self.timestamp {
            let t = event.timestamp;
            trace!(
                "{}: straggler at {} (LVT {})",
                self.my_id,
                t,
                self.timestamp
            );
            // Putting the straggler back before undoing is equivalent to
            // re-enqueueing it afterwards; both end with it at the inbox head.
            self.inbox_messages
                .insert_ordered(event)
                .map_err(|e| self.msg_err(e))?;
            self.rollback(t, out)?;
            return Ok(true);
        }
        let payload = event
            .payload
            .as_ref()
            .ok_or_else(|| self.msg_err(MessageError::MissingPayload))?;
        let snapshot = self.model.snapshot(&self.model_state, payload);
        let mut emit = Emitter::new(event.timestamp);
        self.current_event = Some(event.identity());
        self.model
            .handle_event(&mut self.model_state, payload, event.timestamp, &mut emit)
            .map_err(|e| self.model_err(e))?;
        self.current_event = None;
        let emissions = emit.finish().map_err(|e| self.model_err(e))?;
        self.timestamp = event.timestamp;
        let emitted = self.dispatch(emissions, out)?;
        self.history.push_back(HistoryEntry {
            timestamp: event.timestamp,
            snapshot,
            event,
            emitted,
        });
        self.peak_history = self.peak_history.max(self.history.len());
        self.events_processed += 1;
        Ok(true)
    }

    fn dispatch(
        &mut self,
        emissions: Vec<Emission<M::Payload>>,
        out: &mut impl Outbox<M::Payload>,
    ) -> Result<Vec<Message<M::Payload>>, EngineError> {
        let mut sent = Vec::with_capacity(emissions.len());
        for em in emissions {
            let to = self.map.route(em.to).map_err(|e| self.model_err(e))?;
            let m = Message::event(
                self.message_seq_number,
                self.my_id,
                to,
                em.timestamp,
                em.payload,
            );
            self.message_seq_number += 1;
            if to == self.my_id {
                self.accept_event(m.clone())?;
            } else {
                self.remote_sends += 1;
                self.to_ack_messages.insert(m.seq_number, m.timestamp);
                self.post(out, Envelope::Sim(m.clone()))?;
            }
            sent.push(m);
        }
        Ok(sent)
    }

    /// Undoes every processed event with timestamp `>= t`.
    pub fn rollback(
        &mut self,
        t: Timestamp,
        out: &mut impl Outbox<M::Payload>,
    ) -> Result<(), EngineError> {
        if t < self.gvt {
            return Err(EngineError::RollbackBelowGvt {
                lp: self.my_id,
                target: t,
                gvt: self.gvt,
            });
        }
        let first = self.history.partition_point(|h| h.timestamp < t);
        if first == self.history.len() {
            return Ok(());
        }
        let undone: Vec<_> = self.history.drain(first..).collect();
        trace!(
            "{}: rollback to {} undoes {} events",
            self.my_id,
            t,
            undone.len()
        );
        let mut local_antis = Vec::new();
        for entry in undone.into_iter().rev() {
            self.model.restore(&mut self.model_state, entry.snapshot);
            for m in &entry.emitted {
                let anti = make_antimessage(m).map_err(|e| self.msg_err(e))?;
                if anti.lp_receiver == self.my_id {
                    local_antis.push(anti);
                } else {
                    self.to_ack_messages.insert(anti.seq_number, anti.timestamp);
                    self.post(out, Envelope::Sim(anti))?;
                }
            }
            self.inbox_messages
                .insert_ordered(entry.event)
                .map_err(|e| self.msg_err(e))?;
        }
        let last = self.history.back().map_or(Timestamp::ZERO, |h| h.timestamp);
        // The newest surviving entry may be the retained base below GVT.
        self.timestamp = last.max(self.gvt);
        self.rollbacks += 1;
        // Victims of local antimessages were executed at or after t, so they
        // are back in the inbox by now.
        for anti in local_antis {
            self.handle_antimessage(anti, out)?;
        }
        Ok(())
    }

    /// Cancels the event matching `anti`, rolling back if it was executed,
    /// or buffers `anti` until the event shows up.
    pub fn handle_antimessage(
        &mut self,
        anti: Message<M::Payload>,
        out: &mut impl Outbox<M::Payload>,
    ) -> Result<(), EngineError> {
        if anti.kind != MessageKind::Antimessage {
            return Err(self.msg_err(MessageError::NotAnAntimessage(anti.kind)));
        }
        if self.inbox_messages.remove_matching(&anti) {
            return Ok(());
        }
        let id = anti.identity();
        let from = self
            .history
            .partition_point(|h| h.timestamp < anti.timestamp);
        let processed = self
            .history
            .range(from..)
            .take_while(|h| h.timestamp == anti.timestamp)
            .any(|h| h.event.identity() == id);
        if processed {
            self.rollback(anti.timestamp, out)?;
            let removed = self.inbox_messages.remove_matching(&anti);
            debug_assert!(removed, "rolled-back victim must be back in the inbox");
        } else {
            self.anti_messages.insert(id, anti);
        }
        Ok(())
    }

    /// Adopts a new GVT and releases history below it, keeping the newest
    /// entry under GVT unless one sits exactly at GVT.
    pub fn fossil_collect(&mut self, new_gvt: Timestamp) -> Result<(), EngineError> {
        if new_gvt < self.gvt {
            return Err(EngineError::GvtRegression {
                lp: self.my_id,
                from: self.gvt,
                to: new_gvt,
            });
        }
        self.gvt = new_gvt;
        let below = self.history.partition_point(|h| h.timestamp < new_gvt);
        let exact = self
            .history
            .get(below)
            .is_some_and(|h| h.timestamp == new_gvt);
        let drop = if below > 0 && !exact {
            below - 1
        } else {
            below
        };
        for entry in self.history.drain(..drop).collect::<Vec<_>>() {
            self.commit(&entry);
        }
        self.timestamp = self.timestamp.max(new_gvt);
        Ok(())
    }

    fn commit(&mut self, entry: &HistoryEntry<M>) {
        if entry.timestamp >= self.config.end_time {
            return;
        }
        self.events_committed += 1;
        if self.config.record_trace {
            let payload = entry
                .event
                .payload
                .as_ref()
                .expect("executed events carry payloads");
            self.trace.push(TraceEntry {
                timestamp: entry.timestamp,
                entity: self.model.receiver(payload),
                digest: self.model.digest(payload),
            });
        }
    }

    /// Commits everything left below the end time and stops executing.
    /// Only valid once GVT has reached the end time.
    pub fn terminate_run(&mut self) {
        if self.status == LpStatus::Terminating {
            return;
        }
        debug_assert!(self.gvt >= self.config.end_time);
        self.status = LpStatus::Terminating;
        let remaining: Vec<_> = self.history.drain(..).collect();
        for entry in &remaining {
            self.commit(entry);
        }
    }

    pub fn finish(self) -> LpOutcome<M::Summary> {
        let summary = self.summary();
        LpOutcome {
            lp: self.my_id,
            summary,
            trace: self.trace,
            model_summary: self.model.terminate(self.model_state),
        }
    }
}

impl<M: Model> std::fmt::Debug for LogicalProcess<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogicalProcess")
            .field("id", &self.my_id)
            .field("lvt", &self.timestamp)
            .field("gvt", &self.gvt)
            .field("inbox", &self.inbox_messages.len())
            .field("history", &self.history.len())
            .field("unacked", &self.to_ack_messages.len())
            .field("rollbacks", &self.rollbacks)
            .field("status", &self.status)
            .finish()
    }
}
