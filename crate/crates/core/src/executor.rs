//! Ways to drive a set of LPs and the GVT controller.
//!
//! [`run_node`] gives every local LP its own thread and runs the controller
//! (if this node hosts it) on the calling thread; it works over any
//! [`Transport`]. [`run_scheduled`] runs everything on one thread under a
//! seeded schedule that can reorder and delay messages arbitrarily, and
//! inspects the whole system each time a GVT round closes.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gvt::{GvtController, GvtError, LocalMinReport};
use crate::lp::{EngineError, LogicalProcess, LpConfig, LpOutcome, LpStatus};
use crate::messages::{Address, Control, Envelope, LpId, LpSummary, MessageKind, Timestamp};
use crate::model::{EntityMap, Model};
use crate::transport::{Transport, TransportError, TransportOutbox};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("GVT controller: {0}")]
    Gvt(#[from] GvtError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("aborted after a failure elsewhere")]
    Aborted,
    #[error("{0} panicked")]
    Panicked(String),
    #[error("schedule did not finish within {0} steps")]
    Stalled(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeSettings {
    pub gvt_period: Duration,
    /// How long an idle LP blocks waiting for input before rechecking.
    pub idle_wait: Duration,
    pub lp: LpConfig,
}

impl NodeSettings {
    pub fn new(end_time: Timestamp, gvt_period: Duration) -> Self {
        NodeSettings {
            gvt_period,
            idle_wait: Duration::from_millis(2),
            lp: LpConfig::new(end_time),
        }
    }
}

/// What one node observed.
#[derive(Debug)]
pub struct NodeOutcome<S> {
    pub lps: Vec<LpOutcome<S>>,
    /// Present on the node hosting the controller.
    pub controller: Option<ControllerOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerOutcome {
    pub gvt_trace: Vec<Timestamp>,
    pub summaries: BTreeMap<LpId, LpSummary>,
}

/// Runs the LPs in `lps` (and the controller if `host_controller`) until the
/// controller stops the run and, on the controller's node, every LP has
/// reported its summary.
pub fn run_node<M, T>(
    model: Arc<M>,
    map: EntityMap,
    lps: Range<u32>,
    host_controller: bool,
    transport: &T,
    settings: NodeSettings,
) -> Result<NodeOutcome<M::Summary>, RunError>
where
    M: Model,
    T: Transport<M::Payload>,
{
    let abort = AtomicBool::new(false);
    thread::scope(|scope| {
        let handles: Vec<_> = lps
            .clone()
            .map(|id| {
                let model = Arc::clone(&model);
                let abort = &abort;
                let handle = thread::Builder::new()
                    .name(format!("lp-{id}"))
                    .spawn_scoped(scope, move || {
                        let mut lp = LogicalProcess::new(model, map, LpId(id), settings.lp);
                        let result = lp_loop(&mut lp, transport, &settings, abort);
                        if result.is_err() {
                            abort.store(true, Ordering::Release);
                        }
                        result.map(|()| lp.finish())
                    })
                    .expect("spawn LP thread");
                (id, handle)
            })
            .collect();

        let controller = host_controller.then(|| {
            let result = controller_loop(map.lps(), transport, &settings, &abort);
            if result.is_err() {
                abort.store(true, Ordering::Release);
            }
            result
        });

        let mut first_err = None;
        let mut keep = |e: RunError| {
            if first_err.is_none() || matches!(first_err, Some(RunError::Aborted)) {
                first_err = Some(e);
            }
        };
        let mut outcomes = Vec::new();
        for (id, handle) in handles {
            match handle.join() {
                Ok(Ok(outcome)) => outcomes.push(outcome),
                Ok(Err(e)) => keep(e),
                Err(_) => {
                    abort.store(true, Ordering::Release);
                    keep(RunError::Panicked(format!("LP{id}")));
                }
            }
        }
        let controller = match controller {
            Some(Ok(c)) => Some(c),
            Some(Err(e)) => {
                keep(e);
                None
            }
            None => None,
        };
        match first_err {
            Some(e) => Err(e),
            None => Ok(NodeOutcome {
                lps: outcomes,
                controller,
            }),
        }
    })
}

fn lp_loop<M, T>(
    lp: &mut LogicalProcess<M>,
    transport: &T,
    settings: &NodeSettings,
    abort: &AtomicBool,
) -> Result<(), RunError>
where
    M: Model,
    T: Transport<M::Payload>,
{
    let me = Address::Lp(lp.id());
    let mut out = TransportOutbox(transport);
    lp.start(&mut out)?;
    loop {
        if abort.load(Ordering::Acquire) {
            return Err(RunError::Aborted);
        }
        let batch = transport.receive_batch(me, settings.lp.max_received_messages)?;
        lp.receive(batch);
        lp.drain_transport(&mut out)?;
        if lp.status() == LpStatus::Terminating {
            return Ok(());
        }
        if !lp.step(&mut out)? && !lp.has_received() {
            if let Some(env) = transport.receive_timeout(me, settings.idle_wait)? {
                lp.receive([env]);
            }
        }
    }
}

fn controller_loop<P, T>(
    num_lps: u32,
    transport: &T,
    settings: &NodeSettings,
    abort: &AtomicBool,
) -> Result<ControllerOutcome, RunError>
where
    T: Transport<P> + ?Sized,
{
    let mut ctrl = GvtController::new(num_lps, settings.lp.end_time, settings.gvt_period);
    let mut next_round = Instant::now() + settings.gvt_period;
    loop {
        if abort.load(Ordering::Acquire) {
            return Err(RunError::Aborted);
        }
        let now = Instant::now();
        if !ctrl.round_active() && !ctrl.is_stopped() && now >= next_round {
            for req in ctrl.start_round()? {
                transport.send(Envelope::Control(req))?;
            }
        }
        let wait = next_round.saturating_duration_since(now).clamp(
            Duration::from_micros(100),
            settings.idle_wait.max(Duration::from_micros(100)),
        );
        let Some(env) = transport.receive_timeout(Address::Controller, wait)? else {
            continue;
        };
        match env {
            Envelope::Control(Control::GvtReport {
                lp,
                round,
                local_min,
            }) => {
                if let Some(closed) = ctrl.on_report(round, LocalMinReport { lp, local_min })? {
                    debug!("GVT round {} closed at {}", closed.round, closed.gvt);
                    for msg in closed.broadcast {
                        transport.send(Envelope::Control(msg))?;
                    }
                    next_round = Instant::now() + settings.gvt_period;
                }
            }
            Envelope::Control(Control::Summary { lp, summary }) => {
                if ctrl.on_summary(lp, summary) {
                    info!(
                        "run stopped after {} GVT rounds at GVT {}",
                        ctrl.round(),
                        ctrl.current_gvt()
                    );
                    return Ok(ControllerOutcome {
                        gvt_trace: ctrl.gvt_trace().to_vec(),
                        summaries: ctrl.summaries().clone(),
                    });
                }
            }
            other => {
                return Err(RunError::Transport(TransportError::UnknownDestination(
                    other.destination(),
                )))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub seed: u64,
    /// Deliver in-flight messages in random order instead of send order.
    pub shuffle: bool,
    /// Probability that a step delivers a message rather than running an LP.
    pub delivery_bias: f64,
    /// Steps between the end of one GVT round and the start of the next.
    pub gvt_interval: u64,
    /// Above this many undelivered simulation messages every step delivers.
    /// Each event costs two deliveries (event and ack) but one LP step, so
    /// without a cap the backlog can outgrow delivery indefinitely.
    pub max_in_flight: usize,
    pub max_steps: u64,
}

impl Schedule {
    pub fn fifo() -> Self {
        Schedule {
            seed: 0,
            shuffle: false,
            delivery_bias: 0.75,
            gvt_interval: 64,
            max_in_flight: 256,
            max_steps: 50_000_000,
        }
    }

    pub fn shuffled(seed: u64) -> Self {
        Schedule {
            seed,
            shuffle: true,
            ..Schedule::fifo()
        }
    }
}

/// Global facts recorded when a GVT round closes.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundInspection {
    pub round: u64,
    pub gvt: Timestamp,
    /// Smallest timestamp of any unprocessed event or pending antimessage,
    /// wherever it is.
    pub true_min: Timestamp,
    /// Events waiting anywhere minus antimessages not yet matched.
    pub population: i64,
}

#[derive(Debug)]
pub struct ScheduledOutcome<S> {
    pub lps: Vec<LpOutcome<S>>,
    pub gvt_trace: Vec<Timestamp>,
    pub rounds: Vec<RoundInspection>,
    pub steps: u64,
    /// Unacknowledged sends per LP once every message has been delivered.
    pub unacked_at_quiescence: Vec<usize>,
}

impl<S> ScheduledOutcome<S> {
    pub fn total_rollbacks(&self) -> u64 {
        self.lps.iter().map(|o| o.summary.rollbacks).sum()
    }
}

/// Runs every LP and the controller on the calling thread under `schedule`.
pub fn run_scheduled<M: Model>(
    model: Arc<M>,
    map: EntityMap,
    lp_config: LpConfig,
    schedule: Schedule,
) -> Result<ScheduledOutcome<M::Summary>, RunError> {
    let mut world = World::new(model, map, lp_config, schedule)?;
    world.run()?;
    Ok(world.finish())
}

struct World<M: Model> {
    lps: Vec<LogicalProcess<M>>,
    ctrl: GvtController,
    rng: ChaCha8Rng,
    schedule: Schedule,
    sim: VecDeque<Envelope<M::Payload>>,
    /// Controller to LP traffic, kept in order per LP.
    to_lp: Vec<VecDeque<Envelope<M::Payload>>>,
    to_ctrl: VecDeque<Envelope<M::Payload>>,
    outbox: Vec<Envelope<M::Payload>>,
    rounds: Vec<RoundInspection>,
    idle_steps: u64,
    steps: u64,
}

impl<M: Model> World<M> {
    fn new(
        model: Arc<M>,
        map: EntityMap,
        lp_config: LpConfig,
        schedule: Schedule,
    ) -> Result<Self, RunError> {
        let mut world = World {
            lps: (0..map.lps())
                .map(|id| LogicalProcess::new(Arc::clone(&model), map, LpId(id), lp_config))
                .collect(),
            ctrl: GvtController::new(map.lps(), lp_config.end_time, Duration::ZERO),
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            schedule,
            sim: VecDeque::new(),
            to_lp: (0..map.lps()).map(|_| VecDeque::new()).collect(),
            to_ctrl: VecDeque::new(),
            outbox: Vec::new(),
            rounds: Vec::new(),
            idle_steps: 0,
            steps: 0,
        };
        for i in 0..world.lps.len() {
            world.lps[i].start(&mut world.outbox)?;
            world.route_outbox();
        }
        Ok(world)
    }

    fn route_outbox(&mut self) {
        for env in self.outbox.drain(..) {
            match (&env, env.destination()) {
                (_, Address::Controller) => self.to_ctrl.push_back(env),
                (Envelope::Control(_), Address::Lp(lp)) => self.to_lp[lp.index()].push_back(env),
                (Envelope::Sim(_), _) => self.sim.push_back(env),
            }
        }
    }

    fn send_controls(&mut self, controls: Vec<Control>) {
        for c in controls {
            if let Address::Lp(lp) = c.destination() {
                self.to_lp[lp.index()].push_back(Envelope::Control(c));
            }
        }
    }

    fn runnable(&self) -> Vec<usize> {
        (0..self.lps.len())
            .filter(|&i| self.lps[i].status() == LpStatus::Running && !self.lps[i].at_horizon())
            .collect()
    }

    fn run(&mut self) -> Result<(), RunError> {
        while !self.ctrl.all_summaries_in() {
            self.steps += 1;
            if self.steps > self.schedule.max_steps {
                return Err(RunError::Stalled(self.schedule.max_steps));
            }
            let runnable = self.runnable();
            let control_lps: Vec<usize> = (0..self.to_lp.len())
                .filter(|&i| !self.to_lp[i].is_empty())
                .collect();
            let deliverable = self.sim.len() + control_lps.len() + self.to_ctrl.len();

            if !self.ctrl.round_active() && !self.ctrl.is_stopped() {
                self.idle_steps += 1;
                if self.idle_steps >= self.schedule.gvt_interval
                    || (runnable.is_empty() && deliverable == 0)
                {
                    self.idle_steps = 0;
                    let requests = self.ctrl.start_round()?;
                    self.send_controls(requests);
                    continue;
                }
            }
            if runnable.is_empty() && deliverable == 0 {
                return Err(RunError::Stalled(self.steps));
            }

            let deliver = deliverable > 0
                && (runnable.is_empty()
                    || self.sim.len() > self.schedule.max_in_flight
                    || self.rng.gen_bool(self.schedule.delivery_bias));
            if !deliver {
                let i = runnable[self.rng.gen_range(0..runnable.len())];
                self.lps[i].step(&mut self.outbox)?;
                self.route_outbox();
                continue;
            }

            // choose a class of traffic first so control messages are never
            // starved by a large backlog of simulation messages
            let classes: Vec<u8> = [
                (!self.sim.is_empty()).then_some(0),
                (!control_lps.is_empty()).then_some(1),
                (!self.to_ctrl.is_empty()).then_some(2),
            ]
            .into_iter()
            .flatten()
            .collect();
            let class = classes[self.rng.gen_range(0..classes.len())];
            let shuffle = self.schedule.shuffle;
            match class {
                0 => {
                    let env = if shuffle {
                        let i = self.rng.gen_range(0..self.sim.len());
                        self.sim.swap_remove_back(i).expect("index in range")
                    } else {
                        self.sim.pop_front().expect("non-empty")
                    };
                    self.deliver_to_lp(env)?;
                }
                1 => {
                    let i = control_lps[self.rng.gen_range(0..control_lps.len())];
                    let env = self.to_lp[i].pop_front().expect("non-empty");
                    self.deliver_to_lp(env)?;
                }
                _ => {
                    let i = if shuffle {
                        self.rng.gen_range(0..self.to_ctrl.len())
                    } else {
                        0
                    };
                    let env = self.to_ctrl.remove(i).expect("index in range");
                    self.deliver_to_controller(env)?;
                }
            }
        }
        // let the stopped LPs absorb whatever is still in flight
        while let Some(env) = self.sim.pop_front() {
            self.deliver_to_lp(env)?;
        }
        Ok(())
    }

    fn deliver_to_lp(&mut self, env: Envelope<M::Payload>) -> Result<(), RunError> {
        let Address::Lp(lp) = env.destination() else {
            unreachable!("controller traffic is queued separately");
        };
        self.lps[lp.index()].deliver(env, &mut self.outbox)?;
        self.route_outbox();
        Ok(())
    }

    fn deliver_to_controller(&mut self, env: Envelope<M::Payload>) -> Result<(), RunError> {
        match env {
            Envelope::Control(Control::GvtReport {
                lp,
                round,
                local_min,
            }) => {
                if let Some(closed) = self
                    .ctrl
                    .on_report(round, LocalMinReport { lp, local_min })?
                {
                    self.rounds.push(self.inspect(closed.round, closed.gvt));
                    self.send_controls(closed.broadcast);
                }
            }
            Envelope::Control(Control::Summary { lp, summary }) => {
                self.ctrl.on_summary(lp, summary);
            }
            other => {
                return Err(RunError::Transport(TransportError::UnknownDestination(
                    other.destination(),
                )))
            }
        }
        Ok(())
    }

    fn inspect(&self, round: u64, gvt: Timestamp) -> RoundInspection {
        let mut true_min = Timestamp::INFINITY;
        let mut population = 0i64;
        for lp in &self.lps {
            population += lp.pending_population();
            if let Some(t) = lp.inbox().min_timestamp() {
                true_min = true_min.min(t);
            }
            for anti in lp.buffered_antimessages() {
                true_min = true_min.min(anti.timestamp);
            }
        }
        for env in &self.sim {
            if let Envelope::Sim(m) = env {
                match m.kind {
                    MessageKind::Event => population += 1,
                    MessageKind::Antimessage => population -= 1,
                    MessageKind::Ack | MessageKind::MarkedAck => continue,
                }
                true_min = true_min.min(m.timestamp);
            }
        }
        RoundInspection {
            round,
            gvt,
            true_min,
            population,
        }
    }

    fn finish(self) -> ScheduledOutcome<M::Summary> {
        ScheduledOutcome {
            gvt_trace: self.ctrl.gvt_trace().to_vec(),
            unacked_at_quiescence: self.lps.iter().map(LogicalProcess::unacked_len).collect(),
            lps: self.lps.into_iter().map(LogicalProcess::finish).collect(),
            rounds: self.rounds,
            steps: self.steps,
        }
    }
}
