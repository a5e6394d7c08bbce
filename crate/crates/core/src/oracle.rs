//! Sequential reference simulator and committed-trace utilities.
//!
//! The oracle runs a model with one global future event list, the classic
//! discrete event loop. It shares model code and randomness with the engine,
//! so a correct Time Warp run commits exactly the events the oracle executes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use crate::messages::{EntityId, LpId, Timestamp};
use crate::model::{Emitter, EntityMap, Model, ModelError};

/// One executed event: when, for whom, and a digest of its payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TraceEntry {
    pub timestamp: Timestamp,
    pub entity: EntityId,
    pub digest: u64,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:016x}",
            self.timestamp.value(),
            self.entity.0,
            self.digest
        )
    }
}

/// Executes every event below `end_time` in timestamp order. Events with
/// equal timestamps run in the order they were scheduled.
pub fn run_sequential<M: Model>(
    model: &M,
    entities: u32,
    end_time: Timestamp,
) -> Result<Vec<TraceEntry>, ModelError> {
    let map = EntityMap::new(entities, 1)?;
    let mut state = model.init(LpId(0), &map);
    let mut fel = BTreeMap::new();
    let mut scheduled = 0u64;
    let mut schedule =
        |fel: &mut BTreeMap<_, _>, emit: Emitter<M::Payload>| -> Result<(), ModelError> {
            for em in emit.finish()? {
                map.route(em.to)?;
                fel.insert((em.timestamp, scheduled), em.payload);
                scheduled += 1;
            }
            Ok(())
        };

    let mut emit = Emitter::new(Timestamp::ZERO);
    model.initial_events(&mut state, &mut emit);
    schedule(&mut fel, emit)?;

    let mut trace = Vec::new();
    while let Some(entry) = fel.first_entry() {
        let (now, _) = *entry.key();
        if now >= end_time {
            break;
        }
        let payload = entry.remove();
        let mut emit = Emitter::new(now);
        model.handle_event(&mut state, &payload, now, &mut emit)?;
        trace.push(TraceEntry {
            timestamp: now,
            entity: model.receiver(&payload),
            digest: model.digest(&payload),
        });
        schedule(&mut fel, emit)?;
    }
    Ok(trace)
}

/// Merges per-LP committed traces into one deterministic sequence ordered by
/// timestamp, then entity, then digest.
pub fn committed_trace(per_lp: impl IntoIterator<Item = Vec<TraceEntry>>) -> Vec<TraceEntry> {
    let mut all: Vec<_> = per_lp.into_iter().flatten().collect();
    all.sort();
    all
}

/// Puts a sequential trace in the same canonical order as
/// [`committed_trace`]. Only simultaneous events can move.
pub fn canonical(mut trace: Vec<TraceEntry>) -> Vec<TraceEntry> {
    trace.sort();
    trace
}

/// One entry per line: `<timestamp> <entity> <digest hex>`.
pub fn write_trace(out: &mut impl Write, trace: &[TraceEntry]) -> io::Result<()> {
    for entry in trace {
        writeln!(out, "{entry}")?;
    }
    Ok(())
}

pub fn read_trace(input: impl BufRead) -> io::Result<Vec<TraceEntry>> {
    let bad = |line: &str| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad trace line: {line}"),
        )
    };
    let mut trace = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(entity), Some(digest), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(&line));
        };
        let timestamp = ts
            .parse::<f64>()
            .ok()
            .and_then(|v| Timestamp::new(v).ok())
            .ok_or_else(|| bad(&line))?;
        let entity = EntityId(entity.parse().map_err(|_| bad(&line))?);
        let digest = u64::from_str_radix(digest, 16).map_err(|_| bad(&line))?;
        trace.push(TraceEntry {
            timestamp,
            entity,
            digest,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(ts: f64, entity: u32, digest: u64) -> TraceEntry {
        TraceEntry {
            timestamp: Timestamp::new(ts).unwrap(),
            entity: EntityId(entity),
            digest,
        }
    }

    #[test]
    fn merge_orders_across_lps() {
        let merged = committed_trace(vec![
            vec![entry(1.0, 0, 9), entry(4.0, 0, 1)],
            vec![entry(2.5, 3, 2), entry(4.0, 2, 5)],
        ]);
        let ts: Vec<_> = merged
            .iter()
            .map(|e| (e.timestamp.value(), e.entity.0))
            .collect();
        assert_eq!(ts, [(1.0, 0), (2.5, 3), (4.0, 0), (4.0, 2)]);
        assert!(committed_trace(Vec::<Vec<TraceEntry>>::new()).is_empty());
    }

    #[test]
    fn trace_file_round_trips_exactly() {
        let trace = vec![
            entry(0.1 + 0.2, 5, 0xdead_beef),
            entry(7.0, 0, u64::MAX),
            entry(1e-300, 23, 0),
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), trace);
        assert!(read_trace(&b"1.0 2\n"[..]).is_err());
        assert!(read_trace(&b"-1.0 2 ff\n"[..]).is_err());
    }
}
