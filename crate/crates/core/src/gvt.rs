//! GVT controller (Samadi's algorithm with marked acknowledgements).
//!
//! The controller periodically asks every LP for its local minimum: the
//! smallest of its LVT, its pending events, its unacknowledged sends and the
//! timestamps of marked acks it has received since its last report. The GVT
//! is the minimum over all reports. An LP that has reported marks every ack
//! it sends until it learns the new GVT, which hands responsibility for
//! messages in flight during the round back to their senders.
//!
//! Rounds never overlap. When a round's GVT reaches the end time the
//! controller stops the run and waits for every LP's summary.

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::messages::{Control, LpId, LpSummary, Timestamp};

/// Default wall-clock time between GVT rounds.
pub const DEFAULT_GVT_PERIOD: Duration = Duration::from_secs(1);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalMinReport {
    pub lp: LpId,
    pub local_min: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GvtError {
    #[error("a GVT round is already in progress")]
    RoundActive,
    #[error("no GVT round in progress")]
    NoActiveRound,
    #[error("round incomplete: {got} of {expected} reports")]
    Incomplete { got: usize, expected: u32 },
    #[error("GVT regressed from {from} to {to}")]
    Regression { from: Timestamp, to: Timestamp },
    #[error("report from unknown {0}")]
    UnknownLp(LpId),
    #[error("run already stopped")]
    Stopped,
}

/// What closing a round produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedRound {
    pub round: u64,
    pub gvt: Timestamp,
    pub stop: bool,
    /// One message per LP: `GvtBroadcast`, or `Stop` when the run is over.
    pub broadcast: Vec<Control>,
}

#[derive(Debug, Clone)]
pub struct GvtController {
    period: Duration,
    num_lps: u32,
    round: u64,
    round_active: bool,
    reports: BTreeMap<LpId, Timestamp>,
    current_gvt: Timestamp,
    end_time: Timestamp,
    gvt_trace: Vec<Timestamp>,
    stopped: bool,
    summaries: BTreeMap<LpId, LpSummary>,
}

impl GvtController {
    pub fn new(num_lps: u32, end_time: Timestamp, period: Duration) -> Self {
        GvtController {
            period,
            num_lps,
            round: 0,
            round_active: false,
            reports: BTreeMap::new(),
            current_gvt: Timestamp::ZERO,
            end_time,
            gvt_trace: Vec::new(),
            stopped: false,
            summaries: BTreeMap::new(),
        }
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn end_time(&self) -> Timestamp {
        self.end_time
    }

    pub fn current_gvt(&self) -> Timestamp {
        self.current_gvt
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn round_active(&self) -> bool {
        self.round_active
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    /// Every GVT computed so far, in round order.
    pub fn gvt_trace(&self) -> &[Timestamp] {
        &self.gvt_trace
    }

    /// Opens a new round and returns one request per LP.
    pub fn start_round(&mut self) -> Result<Vec<Control>, GvtError> {
        if self.stopped {
            return Err(GvtError::Stopped);
        }
        if self.round_active {
            return Err(GvtError::RoundActive);
        }
        self.round += 1;
        self.round_active = true;
        self.reports.clear();
        let round = self.round;
        Ok((0..self.num_lps)
            .map(|lp| Control::GvtRequest {
                lp: LpId(lp),
                round,
            })
            .collect())
    }

    /// Records a report. Closes the round once all LPs have answered.
    /// Reports for other rounds are ignored.
    pub fn on_report(
        &mut self,
        round: u64,
        report: LocalMinReport,
    ) -> Result<Option<ClosedRound>, GvtError> {
        if report.lp.0 >= self.num_lps {
            return Err(GvtError::UnknownLp(report.lp));
        }
        if !self.round_active || round != self.round {
            return Ok(None);
        }
        self.reports.insert(report.lp, report.local_min);
        if self.reports.len() < self.num_lps as usize {
            return Ok(None);
        }
        let gvt = self.compute_gvt()?;
        let stop = gvt >= self.end_time;
        self.stopped = stop;
        let broadcast = (0..self.num_lps)
            .map(|lp| {
                let lp = LpId(lp);
                if stop {
                    Control::Stop { lp, round, gvt }
                } else {
                    Control::GvtBroadcast { lp, round, gvt }
                }
            })
            .collect();
        Ok(Some(ClosedRound {
            round,
            gvt,
            stop,
            broadcast,
        }))
    }

    /// Minimum over the round's reports. Ends the round.
    pub fn compute_gvt(&mut self) -> Result<Timestamp, GvtError> {
        if !self.round_active {
            return Err(GvtError::NoActiveRound);
        }
        if self.reports.len() < self.num_lps as usize {
            return Err(GvtError::Incomplete {
                got: self.reports.len(),
                expected: self.num_lps,
            });
        }
        let gvt = *self.reports.values().min().expect("at least one LP");
        if gvt < self.current_gvt {
            return Err(GvtError::Regression {
                from: self.current_gvt,
                to: gvt,
            });
        }
        self.round_active = false;
        self.current_gvt = gvt;
        self.gvt_trace.push(gvt);
        Ok(gvt)
    }

    /// Records an end-of-run summary. True once every LP has sent one.
    pub fn on_summary(&mut self, lp: LpId, summary: LpSummary) -> bool {
        self.summaries.insert(lp, summary);
        self.all_summaries_in()
    }

    pub fn all_summaries_in(&self) -> bool {
        self.summaries.len() == self.num_lps as usize
    }

    pub fn summaries(&self) -> &BTreeMap<LpId, LpSummary> {
        &self.summaries
    }
}
