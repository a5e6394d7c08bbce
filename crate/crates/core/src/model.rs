//! The contract between a simulation model and the engine.
//!
//! A model owns per-LP state and reacts to events addressed to its entities.
//! Entities are placed on LPs by an [`EntityMap`]; the model never needs to
//! know which LP an outgoing event lands on.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::messages::{EntityId, LpId, Timestamp};
use crate::wire::WirePayload;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{entity} out of range: model has {entities} entities")]
    EntityOutOfRange { entity: EntityId, entities: u32 },
    #[error("event scheduled at {emitted} is earlier than the current time {now}")]
    EventInPast { now: Timestamp, emitted: Timestamp },
    #[error("invalid partition: {0}")]
    BadPartition(String),
    #[error("model callback failed: {0}")]
    Callback(String),
}

/// Block partition of `E` entities over `L` LPs: entity `e` lives on LP
/// `floor(e * L / E)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntityMap {
    entities: u32,
    lps: u32,
}

impl EntityMap {
    pub fn new(entities: u32, lps: u32) -> Result<Self, ModelError> {
        if entities == 0 || lps == 0 {
            return Err(ModelError::BadPartition(format!(
                "need at least one entity and one LP (E={entities}, L={lps})"
            )));
        }
        Ok(EntityMap { entities, lps })
    }

    pub fn entities(&self) -> u32 {
        self.entities
    }

    pub fn lps(&self) -> u32 {
        self.lps
    }

    pub fn route(&self, entity: EntityId) -> Result<LpId, ModelError> {
        if entity.0 >= self.entities {
            return Err(ModelError::EntityOutOfRange {
                entity,
                entities: self.entities,
            });
        }
        Ok(LpId(
            (entity.0 as u64 * self.lps as u64 / self.entities as u64) as u32,
        ))
    }

    /// Contiguous entity range hosted by `lp`.
    pub fn entities_of(&self, lp: LpId) -> Range<u32> {
        let (e, l) = (self.entities as u64, self.lps as u64);
        let start = |k: u64| ((k * e).div_ceil(l)).min(e) as u32;
        start(lp.0 as u64)..start(lp.0 as u64 + 1)
    }
}

/// An event scheduled by a model callback.
#[derive(Clone, Debug, PartialEq)]
pub struct Emission<P> {
    pub to: EntityId,
    pub timestamp: Timestamp,
    pub payload: P,
}

/// Collects the events a callback schedules. The only way a handler may
/// affect entities other than the one it runs for.
#[derive(Debug)]
pub struct Emitter<P> {
    now: Timestamp,
    emissions: Vec<Emission<P>>,
}

impl<P> Emitter<P> {
    pub fn new(now: Timestamp) -> Self {
        Emitter {
            now,
            emissions: Vec::new(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn send(&mut self, to: EntityId, timestamp: Timestamp, payload: P) {
        self.emissions.push(Emission {
            to,
            timestamp,
            payload,
        });
    }

    /// Takes the collected emissions, rejecting any scheduled in the past.
    pub fn finish(self) -> Result<Vec<Emission<P>>, ModelError> {
        if let Some(bad) = self.emissions.iter().find(|e| e.timestamp < self.now) {
            return Err(ModelError::EventInPast {
                now: self.now,
                emitted: bad.timestamp,
            });
        }
        Ok(self.emissions)
    }
}

/// User model callbacks.
///
/// `handle_event` must be a pure function of the state, the payload, the
/// timestamp and whatever randomness lives *inside* the state: the engine
/// re-executes events after rollbacks and relies on getting the same result.
pub trait Model: Send + Sync + 'static {
    type Payload: WirePayload;
    /// Everything the model keeps on one LP.
    type State: Clone + PartialEq + fmt::Debug + Send;
    /// What must be saved before handling an event so it can be undone.
    type Snapshot: Send + fmt::Debug;
    type Summary: Send + fmt::Debug;

    fn init(&self, lp: LpId, map: &EntityMap) -> Self::State;

    /// Events that exist at time zero, emitted on behalf of entities hosted by
    /// this LP. Called once, right after `init`.
    fn initial_events(&self, _state: &mut Self::State, _emit: &mut Emitter<Self::Payload>) {}

    /// Entity an event is addressed to.
    fn receiver(&self, payload: &Self::Payload) -> EntityId;

    /// Captures enough of `state` to undo the handling of `payload`.
    fn snapshot(&self, state: &Self::State, payload: &Self::Payload) -> Self::Snapshot;

    fn restore(&self, state: &mut Self::State, snapshot: Self::Snapshot);

    fn handle_event(
        &self,
        state: &mut Self::State,
        payload: &Self::Payload,
        now: Timestamp,
        emit: &mut Emitter<Self::Payload>,
    ) -> Result<(), ModelError>;

    fn terminate(&self, state: Self::State) -> Self::Summary;

    /// Stable digest of a payload, used in execution traces.
    fn digest(&self, payload: &Self::Payload) -> u64 {
        let mut bytes = Vec::new();
        payload.encode(&mut bytes);
        fnv1a(&bytes)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(v: f64) -> Timestamp {
        Timestamp::new(v).unwrap()
    }

    #[test]
    fn block_partition_routes() {
        let map = EntityMap::new(840, 4).unwrap();
        assert_eq!(map.route(EntityId(0)).unwrap(), LpId(0));
        assert_eq!(map.route(EntityId(839)).unwrap(), LpId(3));
        assert_eq!(map.route(EntityId(210)).unwrap(), LpId(1));
        assert_eq!(map.route(EntityId(209)).unwrap(), LpId(0));
        assert!(matches!(
            map.route(EntityId(840)),
            Err(ModelError::EntityOutOfRange { .. })
        ));
    }

    #[test]
    fn entity_ranges_agree_with_routing() {
        for (e, l) in [(840, 4), (840, 7), (24, 3), (10, 4), (5, 8), (1, 1)] {
            let map = EntityMap::new(e, l).unwrap();
            let mut counts = vec![0u32; l as usize];
            for entity in 0..e {
                let lp = map.route(EntityId(entity)).unwrap();
                assert!(
                    map.entities_of(lp).contains(&entity),
                    "E={e} L={l} entity {entity}"
                );
                counts[lp.index()] += 1;
            }
            for lp in 0..l {
                assert_eq!(map.entities_of(LpId(lp)).len() as u32, counts[lp as usize]);
            }
            let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(max - min <= 1, "E={e} L={l} counts {counts:?}");
        }
    }

    #[test]
    fn even_partition_when_divisible() {
        for l in 1..=8 {
            let map = EntityMap::new(840, l).unwrap();
            for lp in 0..l {
                assert_eq!(map.entities_of(LpId(lp)).len(), 840 / l as usize);
            }
        }
    }

    #[test]
    fn emitter_rejects_past_events() {
        let mut emit = Emitter::new(ts(5.0));
        emit.send(EntityId(1), ts(6.0), 0u64);
        assert_eq!(emit.finish().unwrap().len(), 1);

        let mut emit = Emitter::new(ts(5.0));
        emit.send(EntityId(1), ts(4.0), 0u64);
        assert!(matches!(emit.finish(), Err(ModelError::EventInPast { .. })));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
