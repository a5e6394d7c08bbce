//! PHOLD: a fixed population of events bouncing between entities.
//!
//! Every consumed event produces exactly one new event for a uniformly
//! chosen entity (possibly the consumer itself), timestamped an exponential
//! increment later. Each consumption also burns a configurable number of
//! floating point operations.

use std::hint::black_box;

use thiserror::Error;

use crate::messages::{EntityId, LpId, Timestamp};
use crate::model::{Emitter, EntityMap, Model, ModelError};
use crate::rng::{seed_for_entity, RngError, RngState};
use crate::wire::{DecodeError, WirePayload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RngMode {
    /// Disjoint stream per entity. Results do not depend on the partition.
    #[default]
    PerEntity,
    /// One stream per LP shared by its entities, every LP seeded with the
    /// base seed. Results depend on the number of LPs.
    PerLp,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PholdConfigError {
    #[error("need at least one LP and one entity")]
    Empty,
    #[error("{entities} entities do not divide evenly over {lps} LPs")]
    Uneven { entities: u32, lps: u32 },
    #[error("event density {0} is outside (0, 1]")]
    Density(f64),
    #[error("mean increment {0} must be positive and finite")]
    Mean(f64),
    #[error("end time {0} must be finite and non-negative")]
    EndTime(f64),
    #[error(transparent)]
    Seed(#[from] RngError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PholdConfig {
    pub lps: u32,
    pub entities: u32,
    /// Fraction of entities holding an event at time zero.
    pub rho: f64,
    /// Floating point operations per consumed event.
    pub workload: u64,
    pub mean_increment: f64,
    pub end_time: f64,
    pub base_seed: u64,
    pub rng_mode: RngMode,
}

impl Default for PholdConfig {
    fn default() -> Self {
        PholdConfig {
            lps: 1,
            entities: 840,
            rho: 0.5,
            workload: 1000,
            mean_increment: 5.0,
            end_time: 1000.0,
            base_seed: 1,
            rng_mode: RngMode::PerEntity,
        }
    }
}

impl PholdConfig {
    pub fn validate(&self) -> Result<(), PholdConfigError> {
        if self.lps == 0 || self.entities == 0 {
            return Err(PholdConfigError::Empty);
        }
        if !self.entities.is_multiple_of(self.lps) {
            return Err(PholdConfigError::Uneven {
                entities: self.entities,
                lps: self.lps,
            });
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(PholdConfigError::Density(self.rho));
        }
        if !(self.mean_increment > 0.0 && self.mean_increment.is_finite()) {
            return Err(PholdConfigError::Mean(self.mean_increment));
        }
        if !(self.end_time >= 0.0 && self.end_time.is_finite()) {
            return Err(PholdConfigError::EndTime(self.end_time));
        }
        RngState::new(self.base_seed)?;
        Ok(())
    }

    /// Number of events alive at any time: `round(rho * E)`.
    pub fn population(&self) -> u32 {
        (self.rho * self.entities as f64).round() as u32
    }

    pub fn end_timestamp(&self) -> Timestamp {
        Timestamp::new(self.end_time).expect("validated end time")
    }

    pub fn entity_map(&self) -> EntityMap {
        EntityMap::new(self.entities, self.lps).expect("validated partition")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PholdPayload {
    pub entity_sender: EntityId,
    pub entity_receiver: EntityId,
    pub value: u64,
}

impl WirePayload for PholdPayload {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.entity_sender.0.to_le_bytes());
        out.extend_from_slice(&self.entity_receiver.0.to_le_bytes());
        out.extend_from_slice(&self.value.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() != 16 {
            return Err(DecodeError::Payload(format!(
                "PHOLD payload is 16 bytes, got {}",
                bytes.len()
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        Ok(PholdPayload {
            entity_sender: EntityId(u32_at(0)),
            entity_receiver: EntityId(u32_at(4)),
            value: u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PholdEntityState {
    pub rng: RngState,
    pub processed: u64,
}

/// The entities hosted by one LP.
#[derive(Clone, Debug, PartialEq)]
pub struct PholdState {
    first: u32,
    entities: Vec<PholdEntityState>,
    lp_rng: Option<RngState>,
}

impl PholdState {
    pub fn entity(&self, e: EntityId) -> Option<&PholdEntityState> {
        e.0.checked_sub(self.first)
            .and_then(|i| self.entities.get(i as usize))
    }

    pub fn processed(&self) -> u64 {
        self.entities.iter().map(|e| e.processed).sum()
    }
}

#[derive(Debug)]
pub struct PholdSnapshot {
    index: usize,
    entity: PholdEntityState,
    lp_rng: Option<RngState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PholdSummary {
    pub entities: u32,
    pub processed: u64,
}

#[derive(Clone, Debug)]
pub struct Phold {
    config: PholdConfig,
    base: RngState,
}

impl Phold {
    pub fn new(config: PholdConfig) -> Result<Self, PholdConfigError> {
        config.validate()?;
        let base = RngState::new(config.base_seed)?;
        Ok(Phold { config, base })
    }

    pub fn config(&self) -> &PholdConfig {
        &self.config
    }

    fn index(&self, state: &PholdState, e: EntityId) -> Result<usize, ModelError> {
        e.0.checked_sub(state.first)
            .map(|i| i as usize)
            .filter(|i| *i < state.entities.len())
            .ok_or(ModelError::EntityOutOfRange {
                entity: e,
                entities: self.config.entities,
            })
    }

    /// Draws a recipient and an increment from the stream the mode selects.
    fn draw(&self, state: &mut PholdState, index: usize) -> Result<(EntityId, f64), ModelError> {
        let rng = match state.lp_rng.as_mut() {
            Some(rng) => rng,
            None => &mut state.entities[index].rng,
        };
        let to = EntityId(rng.next_below(self.config.entities));
        let delta = rng
            .next_exponential(self.config.mean_increment)
            .map_err(|e| ModelError::Callback(e.to_string()))?;
        Ok((to, delta))
    }

    /// The time-zero events of every LP together, in originator order.
    pub fn init_events(&self) -> Vec<(Timestamp, PholdPayload)> {
        let map = self.config.entity_map();
        let mut all = Vec::new();
        for lp in 0..self.config.lps {
            let mut state = self.init(LpId(lp), &map);
            let mut emit = Emitter::new(Timestamp::ZERO);
            self.initial_events(&mut state, &mut emit);
            let emitted = emit.finish().expect("initial events are in the future");
            all.extend(emitted.into_iter().map(|em| (em.timestamp, em.payload)));
        }
        all.sort_by_key(|(_, p)| p.entity_sender);
        all
    }
}

/// `n` serially dependent floating point operations, alternating multiply
/// and add. Returns the accumulator, 1.0 for `n = 0`.
pub fn workload_loop(n: u64) -> f64 {
    let mul = black_box(1.000_000_1_f64);
    let add = black_box(1e-9_f64);
    let mut acc = 1.0_f64;
    for _ in 0..n / 2 {
        acc *= mul;
        acc += add;
    }
    if n % 2 == 1 {
        acc *= mul;
    }
    black_box(acc)
}

impl Model for Phold {
    type Payload = PholdPayload;
    type State = PholdState;
    type Snapshot = PholdSnapshot;
    type Summary = PholdSummary;

    fn init(&self, lp: LpId, map: &EntityMap) -> PholdState {
        let range = map.entities_of(lp);
        PholdState {
            first: range.start,
            entities: range
                .map(|e| PholdEntityState {
                    rng: seed_for_entity(self.base, EntityId(e)),
                    processed: 0,
                })
                .collect(),
            lp_rng: (self.config.rng_mode == RngMode::PerLp).then_some(self.base),
        }
    }

    fn initial_events(&self, state: &mut PholdState, emit: &mut Emitter<PholdPayload>) {
        let originators = 0..self.config.population();
        let hosted = state.first..state.first + state.entities.len() as u32;
        for e in hosted.filter(|e| originators.contains(e)) {
            let index = (e - state.first) as usize;
            let (to, delta) = self.draw(state, index).expect("validated mean");
            let ts = Timestamp::new(delta).expect("exponential draws are positive");
            emit.send(
                to,
                ts,
                PholdPayload {
                    entity_sender: EntityId(e),
                    entity_receiver: to,
                    value: 0,
                },
            );
        }
    }

    fn receiver(&self, payload: &PholdPayload) -> EntityId {
        payload.entity_receiver
    }

    fn snapshot(&self, state: &PholdState, payload: &PholdPayload) -> PholdSnapshot {
        let index = self
            .index(state, payload.entity_receiver)
            .unwrap_or(usize::MAX);
        PholdSnapshot {
            index,
            entity: state
                .entities
                .get(index)
                .copied()
                .unwrap_or(PholdEntityState {
                    rng: self.base,
                    processed: 0,
                }),
            lp_rng: state.lp_rng,
        }
    }

    fn restore(&self, state: &mut PholdState, snapshot: PholdSnapshot) {
        if let Some(slot) = state.entities.get_mut(snapshot.index) {
            *slot = snapshot.entity;
        }
        state.lp_rng = snapshot.lp_rng;
    }

    fn handle_event(
        &self,
        state: &mut PholdState,
        payload: &PholdPayload,
        now: Timestamp,
        emit: &mut Emitter<PholdPayload>,
    ) -> Result<(), ModelError> {
        let index = self.index(state, payload.entity_receiver)?;
        let acc = workload_loop(self.config.workload);
        let (to, delta) = self.draw(state, index)?;
        let entity = &mut state.entities[index];
        entity.processed += 1;
        let ts = now
            .offset(delta)
            .map_err(|e| ModelError::Callback(e.to_string()))?;
        emit.send(
            to,
            ts,
            PholdPayload {
                entity_sender: payload.entity_receiver,
                entity_receiver: to,
                value: acc.to_bits() ^ entity.processed,
            },
        );
        Ok(())
    }

    fn terminate(&self, state: PholdState) -> PholdSummary {
        PholdSummary {
            entities: state.entities.len() as u32,
            processed: state.processed(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::run_sequential;
    use std::time::Instant;

    fn config(entities: u32, rho: f64) -> PholdConfig {
        PholdConfig {
            entities,
            rho,
            workload: 0,
            end_time: 200.0,
            base_seed: 12345,
            ..PholdConfig::default()
        }
    }

    #[test]
    fn initial_population() {
        let model = Phold::new(config(840, 0.5)).unwrap();
        let events = model.init_events();
        assert_eq!(events.len(), 420);
        let senders: Vec<_> = events.iter().map(|(_, p)| p.entity_sender.0).collect();
        assert_eq!(senders, (0..420).collect::<Vec<_>>());
        assert!(events.iter().all(|(ts, _)| ts.value() > 0.0));
        assert_eq!(events, model.init_events());

        assert_eq!(Phold::new(config(10, 1.0)).unwrap().init_events().len(), 10);
    }

    #[test]
    fn initial_events_do_not_depend_on_partition() {
        let one = Phold::new(config(24, 0.5)).unwrap().init_events();
        for lps in [2, 3, 4] {
            let cfg = PholdConfig {
                lps,
                ..config(24, 0.5)
            };
            assert_eq!(Phold::new(cfg).unwrap().init_events(), one);
        }
    }

    #[test]
    fn one_in_one_out() {
        let model = Phold::new(config(8, 1.0)).unwrap();
        let map = EntityMap::new(8, 1).unwrap();
        let mut state = model.init(LpId(0), &map);
        let now = Timestamp::new(3.0).unwrap();
        let payload = PholdPayload {
            entity_sender: EntityId(1),
            entity_receiver: EntityId(2),
            value: 0,
        };
        let mut emit = Emitter::new(now);
        model
            .handle_event(&mut state, &payload, now, &mut emit)
            .unwrap();
        let out = emit.finish().unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].timestamp > now);
        assert_eq!(out[0].payload.entity_sender, EntityId(2));
        assert_eq!(state.entity(EntityId(2)).unwrap().processed, 1);
    }

    #[test]
    fn snapshot_restores_entity() {
        let model = Phold::new(config(8, 1.0)).unwrap();
        let map = EntityMap::new(8, 2).unwrap();
        let mut state = model.init(LpId(1), &map);
        let before = state.clone();
        let payload = PholdPayload {
            entity_sender: EntityId(0),
            entity_receiver: EntityId(5),
            value: 0,
        };
        let snap = model.snapshot(&state, &payload);
        let now = Timestamp::new(1.0).unwrap();
        model
            .handle_event(&mut state, &payload, now, &mut Emitter::new(now))
            .unwrap();
        assert_ne!(state, before);
        model.restore(&mut state, snap);
        assert_eq!(state, before);
    }

    #[test]
    fn foreign_entity_is_rejected() {
        let model = Phold::new(config(8, 1.0)).unwrap();
        let mut state = model.init(LpId(0), &EntityMap::new(8, 2).unwrap());
        let payload = PholdPayload {
            entity_sender: EntityId(0),
            entity_receiver: EntityId(6),
            value: 0,
        };
        let now = Timestamp::ZERO;
        assert!(model
            .handle_event(&mut state, &payload, now, &mut Emitter::new(now))
            .is_err());
    }

    #[test]
    fn payload_encoding_is_16_bytes() {
        let p = PholdPayload {
            entity_sender: EntityId(1),
            entity_receiver: EntityId(0x0203_0405),
            value: u64::MAX - 1,
        };
        let mut buf = Vec::new();
        p.encode(&mut buf);
        assert_eq!(buf.len(), 16);
        assert_eq!(&buf[..8], &[1, 0, 0, 0, 5, 4, 3, 2]);
        assert_eq!(PholdPayload::decode(&buf).unwrap(), p);
        assert!(PholdPayload::decode(&buf[..15]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PholdConfig::default().validate().is_ok());
        let bad = [
            PholdConfig {
                lps: 0,
                ..PholdConfig::default()
            },
            PholdConfig {
                lps: 11,
                ..PholdConfig::default()
            },
            PholdConfig {
                rho: 0.0,
                ..PholdConfig::default()
            },
            PholdConfig {
                rho: 1.5,
                ..PholdConfig::default()
            },
            PholdConfig {
                mean_increment: 0.0,
                ..PholdConfig::default()
            },
            PholdConfig {
                end_time: f64::NAN,
                ..PholdConfig::default()
            },
            PholdConfig {
                base_seed: 0,
                ..PholdConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn workload_is_deterministic() {
        assert_eq!(workload_loop(0), 1.0);
        assert_eq!(workload_loop(1), 1.000_000_1);
        assert_eq!(workload_loop(5500).to_bits(), workload_loop(5500).to_bits());
        assert!(workload_loop(10_000) > 1.0);
    }

    #[test]
    fn workload_time_scales_with_n() {
        fn time(n: u64) -> f64 {
            (0..5)
                .map(|_| {
                    let start = Instant::now();
                    for _ in 0..200 {
                        black_box(workload_loop(black_box(n)));
                    }
                    start.elapsed().as_secs_f64()
                })
                .fold(f64::INFINITY, f64::min)
        }
        let ratio = time(10_000) / time(1000);
        assert!((5.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn sequential_trace_is_ordered_and_repeatable() {
        let model = Phold::new(PholdConfig {
            entities: 2,
            rho: 1.0,
            end_time: 20.0,
            ..config(2, 1.0)
        })
        .unwrap();
        let end = Timestamp::new(20.0).unwrap();
        let a = run_sequential(&model, 2, end).unwrap();
        assert!(!a.is_empty());
        assert!(a.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert!(a.iter().all(|e| e.timestamp < end));
        assert_eq!(a, run_sequential(&model, 2, end).unwrap());
        assert!(run_sequential(&model, 2, Timestamp::ZERO)
            .unwrap()
            .is_empty());
    }
}
