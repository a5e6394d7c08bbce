//! Per-LP pending event set, ordered by timestamp.
//!
//! Buckets hold the simultaneous events of one timestamp. Plain [`insert`]
//! appends (FIFO); [`insert_ordered`] keeps a bucket sorted by
//! `(lp_sender, seq_number)`, which is what the engine uses so that
//! same-time events execute in a deterministic order.
//!
//! [`insert`]: EventQueue::insert
//! [`insert_ordered`]: EventQueue::insert_ordered

use std::collections::{BTreeMap, VecDeque};

use crate::messages::{annihilates, Message, MessageError, MessageKind, Timestamp};

#[derive(Clone, Debug)]
pub struct EventQueue<P> {
    buckets: BTreeMap<Timestamp, VecDeque<Message<P>>>,
    size: usize,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue {
            buckets: BTreeMap::new(),
            size: 0,
        }
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    fn check_event(m: &Message<P>) -> Result<(), MessageError> {
        if m.kind != MessageKind::Event {
            return Err(MessageError::NotAnEvent(m.kind));
        }
        Ok(())
    }

    /// Appends `m` to the bucket of its timestamp.
    pub fn insert(&mut self, m: Message<P>) -> Result<(), MessageError> {
        Self::check_event(&m)?;
        self.buckets.entry(m.timestamp).or_default().push_back(m);
        self.size += 1;
        Ok(())
    }

    /// Inserts `m` so its bucket stays sorted by `(lp_sender, seq_number)`.
    pub fn insert_ordered(&mut self, m: Message<P>) -> Result<(), MessageError> {
        Self::check_event(&m)?;
        let bucket = self.buckets.entry(m.timestamp).or_default();
        let key = m.identity();
        let at = bucket.partition_point(|other| other.identity() <= key);
        bucket.insert(at, m);
        self.size += 1;
        Ok(())
    }

    pub fn pop_min(&mut self) -> Option<Message<P>> {
        let mut entry = self.buckets.first_entry()?;
        let m = entry.get_mut().pop_front();
        if entry.get().is_empty() {
            entry.remove();
        }
        if m.is_some() {
            self.size -= 1;
        }
        m
    }

    pub fn peek_min(&self) -> Option<&Message<P>> {
        self.buckets.first_key_value().and_then(|(_, b)| b.front())
    }

    pub fn min_timestamp(&self) -> Option<Timestamp> {
        self.buckets.first_key_value().map(|(t, _)| *t)
    }

    /// Removes the event cancelled by `anti`, if present.
    pub fn remove_matching(&mut self, anti: &Message<P>) -> bool {
        if anti.kind != MessageKind::Antimessage {
            return false;
        }
        let Some(bucket) = self.buckets.get_mut(&anti.timestamp) else {
            return false;
        };
        let Some(pos) = bucket.iter().position(|e| annihilates(e, anti)) else {
            return false;
        };
        bucket.remove(pos);
        if bucket.is_empty() {
            self.buckets.remove(&anti.timestamp);
        }
        self.size -= 1;
        true
    }

    /// Messages in execution order.
    pub fn iter(&self) -> impl Iterator<Item = &Message<P>> {
        self.buckets.values().flat_map(|b| b.iter())
    }
}
