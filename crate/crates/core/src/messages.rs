//! Message envelope, identifiers and antimessage pairing.
//!
//! Every interaction between logical processes is a [`Message`]. Events carry a
//! model payload; antimessages are negative copies of events and cancel them;
//! acks feed the GVT accounting. Control traffic (GVT rounds, stop) travels in
//! the same [`Envelope`] so one transport carries everything.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use thiserror::Error;

/// Simulated time. Always finite-or-infinite, never NaN, never negative.
#[derive(Clone, Copy, Default)]
pub struct Timestamp(f64);

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("invalid timestamp {0}: must be a non-negative number")]
pub struct InvalidTimestamp(pub f64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0.0);
    pub const INFINITY: Timestamp = Timestamp(f64::INFINITY);

    pub fn new(value: f64) -> Result<Self, InvalidTimestamp> {
        if value.is_nan() || value < 0.0 {
            return Err(InvalidTimestamp(value));
        }
        // -0.0 passes the check above; fold it into +0.0 so bit equality holds.
        Ok(Timestamp(value + 0.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Advances by a non-negative delta.
    pub fn offset(self, delta: f64) -> Result<Self, InvalidTimestamp> {
        Timestamp::new(self.0 + delta)
    }
}

impl PartialEq for Timestamp {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for Timestamp {}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Hash for Timestamp {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl TryFrom<f64> for Timestamp {
    type Error = InvalidTimestamp;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Timestamp::new(value)
    }
}

/// Index of a logical process, in `[0, L)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LpId(pub u32);

impl LpId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LP{}", self.0)
    }
}

/// Index of a model entity, in `[0, E)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "entity {}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Event,
    Ack,
    MarkedAck,
    Antimessage,
}

/// Key that pairs an event with its antimessage and with its acks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventIdentity {
    pub lp_sender: LpId,
    pub seq_number: u64,
}

/// A simulation message between two logical processes.
///
/// For `Event` and `Antimessage`, `lp_sender`/`seq_number` identify the event.
/// Acks travel back to the original sender: `lp_sender` is the acknowledging
/// LP, `lp_receiver` the original sender, `seq_number` and `timestamp` those of
/// the acknowledged message.
#[derive(Clone, Debug, PartialEq)]
pub struct Message<P> {
    pub kind: MessageKind,
    pub seq_number: u64,
    pub lp_sender: LpId,
    pub lp_receiver: LpId,
    pub payload: Option<P>,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("expected an event message, got {0:?}")]
    NotAnEvent(MessageKind),
    #[error("expected an antimessage, got {0:?}")]
    NotAnAntimessage(MessageKind),
    #[error("event message without payload")]
    MissingPayload,
}

impl<P> Message<P> {
    pub fn event(
        seq_number: u64,
        lp_sender: LpId,
        lp_receiver: LpId,
        timestamp: Timestamp,
        payload: P,
    ) -> Self {
        Message {
            kind: MessageKind::Event,
            seq_number,
            lp_sender,
            lp_receiver,
            payload: Some(payload),
            timestamp,
        }
    }

    /// Builds the ack (or marked ack) for a received event or antimessage.
    pub fn ack_for(received: &Message<P>, marked: bool) -> Self {
        Message {
            kind: if marked {
                MessageKind::MarkedAck
            } else {
                MessageKind::Ack
            },
            seq_number: received.seq_number,
            lp_sender: received.lp_receiver,
            lp_receiver: received.lp_sender,
            payload: None,
            timestamp: received.timestamp,
        }
    }

    pub fn identity(&self) -> EventIdentity {
        EventIdentity {
            lp_sender: self.lp_sender,
            seq_number: self.seq_number,
        }
    }

    pub fn is_event(&self) -> bool {
        self.kind == MessageKind::Event
    }

    pub fn is_ack(&self) -> bool {
        matches!(self.kind, MessageKind::Ack | MessageKind::MarkedAck)
    }
}

/// Negative copy of an event. The payload is carried along but ignored by
/// matching.
pub fn make_antimessage<P: Clone>(m: &Message<P>) -> Result<Message<P>, MessageError> {
    if m.kind != MessageKind::Event {
        return Err(MessageError::NotAnEvent(m.kind));
    }
    Ok(Message {
        kind: MessageKind::Antimessage,
        ..m.clone()
    })
}

/// True iff one message is an event and the other its antimessage.
pub fn annihilates<P>(a: &Message<P>, b: &Message<P>) -> bool {
    let kinds_pair = matches!(
        (a.kind, b.kind),
        (MessageKind::Event, MessageKind::Antimessage)
            | (MessageKind::Antimessage, MessageKind::Event)
    );
    kinds_pair && a.identity() == b.identity()
}

/// Where an envelope is delivered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Address {
    Lp(LpId),
    Controller,
}

/// End-of-run statistics an LP reports to the controller.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LpSummary {
    pub rollbacks: u64,
    pub events_processed: u64,
    pub events_committed: u64,
    pub peak_history: u64,
    pub remote_sends: u64,
}

/// GVT and lifecycle traffic between the controller and the LPs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Control {
    GvtRequest {
        lp: LpId,
        round: u64,
    },
    GvtReport {
        lp: LpId,
        round: u64,
        local_min: Timestamp,
    },
    GvtBroadcast {
        lp: LpId,
        round: u64,
        gvt: Timestamp,
    },
    Stop {
        lp: LpId,
        round: u64,
        gvt: Timestamp,
    },
    Summary {
        lp: LpId,
        summary: LpSummary,
    },
}

impl Control {
    pub fn destination(&self) -> Address {
        match *self {
            Control::GvtRequest { lp, .. }
            | Control::GvtBroadcast { lp, .. }
            | Control::Stop { lp, .. } => Address::Lp(lp),
            Control::GvtReport { .. } | Control::Summary { .. } => Address::Controller,
        }
    }
}

/// Unit of transport: a simulation message or a control message.
#[derive(Clone, Debug, PartialEq)]
pub enum Envelope<P> {
    Sim(Message<P>),
    Control(Control),
}

impl<P> Envelope<P> {
    pub fn destination(&self) -> Address {
        match self {
            Envelope::Sim(m) => Address::Lp(m.lp_receiver),
            Envelope::Control(c) => c.destination(),
        }
    }
}

impl<P> From<Message<P>> for Envelope<P> {
    fn from(m: Message<P>) -> Self {
        Envelope::Sim(m)
    }
}

impl<P> From<Control> for Envelope<P> {
    fn from(c: Control) -> Self {
        Envelope::Control(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(v: f64) -> Timestamp {
        Timestamp::new(v).unwrap()
    }

    fn event(sender: u32, receiver: u32, seq: u64, t: f64) -> Message<u32> {
        Message::event(seq, LpId(sender), LpId(receiver), ts(t), 42)
    }

    #[test]
    fn antimessage_copies_fields_and_flips_kind() {
        let e = event(0, 1, 7, 10.0);
        let anti = make_antimessage(&e).unwrap();
        assert_eq!(anti.kind, MessageKind::Antimessage);
        assert_eq!(anti.seq_number, 7);
        assert_eq!(anti.lp_sender, LpId(0));
        assert_eq!(anti.lp_receiver, LpId(1));
        assert_eq!(anti.timestamp, ts(10.0));
        assert_eq!(anti.payload, Some(42));
    }

    #[test]
    fn antimessage_of_self_send_at_zero() {
        let e = event(3, 3, 0, 0.0);
        let anti = make_antimessage(&e).unwrap();
        assert_eq!(anti.lp_sender, anti.lp_receiver);
        assert_eq!(anti.seq_number, 0);
        assert_eq!(anti.timestamp, Timestamp::ZERO);
    }

    #[test]
    fn antimessage_rejects_non_events() {
        let ack = Message::<u32>::ack_for(&event(0, 1, 3, 1.0), false);
        assert_eq!(
            make_antimessage(&ack),
            Err(MessageError::NotAnEvent(MessageKind::Ack))
        );
    }

    #[test]
    fn annihilation_pairs() {
        let e = event(0, 1, 7, 10.0);
        let anti = make_antimessage(&e).unwrap();
        assert!(annihilates(&e, &anti));
        assert!(annihilates(&anti, &e));

        let other = make_antimessage(&event(0, 1, 8, 10.0)).unwrap();
        assert!(!annihilates(&e, &other));
        assert!(!annihilates(&e, &e.clone()));
    }

    #[test]
    fn ack_points_back_to_sender() {
        let e = event(2, 5, 11, 3.5);
        let ack = Message::ack_for(&e, true);
        assert_eq!(ack.kind, MessageKind::MarkedAck);
        assert_eq!(ack.lp_sender, LpId(5));
        assert_eq!(ack.lp_receiver, LpId(2));
        assert_eq!(ack.seq_number, 11);
        assert_eq!(ack.timestamp, ts(3.5));
        assert!(ack.payload.is_none());
    }

    #[test]
    fn timestamp_validation() {
        assert!(Timestamp::new(f64::NAN).is_err());
        assert!(Timestamp::new(-1.0).is_err());
        assert_eq!(Timestamp::new(-0.0).unwrap(), Timestamp::ZERO);
        assert!(ts(1.0) < ts(2.0));
        assert!(ts(1e300) < Timestamp::INFINITY);
    }

    proptest::proptest! {
        #[test]
        fn annihilation_is_symmetric(
            s1 in 0u32..3, s2 in 0u32..3, q1 in 0u64..4, q2 in 0u64..4,
            k1 in 0usize..4, k2 in 0usize..4,
        ) {
            let kinds = [MessageKind::Event, MessageKind::Ack, MessageKind::MarkedAck, MessageKind::Antimessage];
            let mut a = event(s1, 0, q1, 1.0);
            a.kind = kinds[k1];
            let mut b = event(s2, 0, q2, 1.0);
            b.kind = kinds[k2];
            proptest::prop_assert_eq!(annihilates(&a, &b), annihilates(&b, &a));
        }

        #[test]
        fn every_event_annihilates_with_its_antimessage(s in 0u32..100, r in 0u32..100, q in proptest::num::u64::ANY, t in 0.0f64..1e9) {
            let e = event(s, r, q, t);
            proptest::prop_assert!(annihilates(&e, &make_antimessage(&e).unwrap()));
        }
    }
}
