//! Deterministic two-endpoint simulator.
//!
//! Two instruction programs (sender and receiver) run against one shared
//! primitive under a virtual microsecond clock. Scheduling is
//! earliest-next-event with ties resolved sender-first, and every timing
//! disturbance comes from a seeded [`NoiseEngine`], so a run is a pure
//! function of (programs, primitive state, noise model, seed): repeating it
//! reproduces the trace byte for byte.

use std::collections::VecDeque;
use std::fmt;

use super::noise::{NoiseEngine, NoiseModel};
use super::{BackendDescriptor, BackendKind, LatencySample, Micros, PrimitiveError};

/// Endpoint index of the transmitting side.
pub const SENDER: usize = 0;
/// Endpoint index of the measuring side.
pub const RECEIVER: usize = 1;

pub const ENDPOINT_NAMES: [&str; 2] = ["sender", "receiver"];

/// Highest count a simulated semaphore may reach (mirrors SEM_VALUE_MAX).
pub const SIM_SEM_MAX: u64 = 2_147_483_647;

/// One instruction of an endpoint program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// OS timer sleep: overshoots by the wake-up cost plus jitter, never
    /// ends early.
    Sleep(Micros),
    /// Hybrid sleep-then-spin wait: precise, never early, not floored, but
    /// exposed to preemption spikes. Used wherever the duration is the data.
    PreciseWait(Micros),
    /// [`Op::Sleep`] with an absolute deadline, computed as a sleep for
    /// whatever remains of it. A past deadline is a no-op.
    SleepUntil(Micros),
    /// [`Op::PreciseWait`] with an absolute deadline. Re-anchors an endpoint
    /// to a fixed schedule, absorbing accumulated overshoot.
    PreciseWaitUntil(Micros),
    /// Pure CPU work; advances the clock exactly.
    Busy(Micros),
    /// Take the exclusive lock, blocking until granted.
    Acquire { record: bool },
    Release,
    /// Raise the event. The latch saturates at one: a second signal before
    /// the waiter arrives is lost.
    Signal,
    /// Block until the event is raised (or consume an already-latched one).
    WaitSignal { record: bool },
    /// Increment the semaphore, or hand the token straight to a blocked pend.
    SemPost,
    /// Decrement the semaphore, blocking while the count is zero.
    SemPend { record: bool },
    /// Block until the peer has completed at least `expected_peer_consumes`
    /// consuming operations and then stayed quiet for `gap_us`; give up
    /// unacknowledged at `timeout_us` after entry.
    AwaitPeerGap {
        expected_peer_consumes: u64,
        gap_us: Micros,
        timeout_us: Micros,
    },
}

pub type Program = Vec<Op>;

/// One line of a run trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub at_us: Micros,
    pub endpoint: usize,
    pub what: TraceWhat,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceWhat {
    Sleep { requested: Micros, realized: Micros },
    Wait { requested: Micros, realized: Micros },
    Busy { duration_us: Micros },
    AcquireStart,
    Acquired { latency_us: Micros },
    Released,
    Signaled,
    WaitSignalStart,
    SignalConsumed { latency_us: Micros },
    Posted { count_after: u64 },
    PendStart,
    Pended { count_after: u64, latency_us: Micros },
    GapStart,
    GapDone { acknowledged: bool },
    Finished,
    Stalled,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>12} {:<8} ", self.at_us, ENDPOINT_NAMES[self.endpoint])?;
        match &self.what {
            TraceWhat::Sleep { requested, realized } => {
                write!(f, "sleep req={requested} real={realized}")
            }
            TraceWhat::Wait { requested, realized } => {
                write!(f, "wait req={requested} real={realized}")
            }
            TraceWhat::Busy { duration_us } => write!(f, "busy {duration_us}"),
            TraceWhat::AcquireStart => write!(f, "acquire-start"),
            TraceWhat::Acquired { latency_us } => write!(f, "acquired lat={latency_us}"),
            TraceWhat::Released => write!(f, "released"),
            TraceWhat::Signaled => write!(f, "signaled"),
            TraceWhat::WaitSignalStart => write!(f, "wait-signal-start"),
            TraceWhat::SignalConsumed { latency_us } => {
                write!(f, "signal-consumed lat={latency_us}")
            }
            TraceWhat::Posted { count_after } => write!(f, "posted count={count_after}"),
            TraceWhat::PendStart => write!(f, "pend-start"),
            TraceWhat::Pended {
                count_after,
                latency_us,
            } => write!(f, "pended count={count_after} lat={latency_us}"),
            TraceWhat::GapStart => write!(f, "gap-start"),
            TraceWhat::GapDone { acknowledged } => write!(f, "gap-done ack={acknowledged}"),
            TraceWhat::Finished => write!(f, "finished"),
            TraceWhat::Stalled => write!(f, "stalled"),
        }
    }
}

/// Why a run stopped before both programs finished.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StallReport {
    pub at_us: Micros,
    /// Endpoints that were blocked when the stall was declared, with the
    /// operation they were blocked in.
    pub blocked: Vec<(usize, &'static str)>,
    /// Consuming operations (acquire / wait-signal / pend) each endpoint had
    /// completed before the stall.
    pub consumed: [u64; 2],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimOutcome {
    Completed,
    Stalled(StallReport),
}

/// Result of one end-of-round acknowledgment wait.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapOutcome {
    pub acknowledged: bool,
    pub at_us: Micros,
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub outcome: SimOutcome,
    /// Recorded samples per endpoint (index by [`SENDER`] / [`RECEIVER`]).
    pub samples: [Vec<LatencySample>; 2],
    pub gap_results: [Vec<GapOutcome>; 2],
    /// Virtual time at which each endpoint finished its program.
    pub end_times: [Option<Micros>; 2],
    pub final_sem_count: Option<u64>,
    pub elapsed_us: Micros,
    /// Empty unless the run was started with trace recording on.
    pub trace: Vec<TraceEvent>,
}

impl SimReport {
    pub fn completed(&self) -> bool {
        self.outcome == SimOutcome::Completed
    }

    pub fn receiver_samples(&self) -> &[LatencySample] {
        &self.samples[RECEIVER]
    }

    /// The trace as one line per event; byte-identical across identical runs.
    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for event in &self.trace {
            out.push_str(&event.to_string());
            out.push('\n');
        }
        out
    }
}

enum PrimitiveState {
    Lock {
        holder: Option<usize>,
        queue: VecDeque<usize>,
    },
    Event {
        latched: bool,
        waiter: Option<usize>,
    },
    Semaphore {
        count: u64,
        queue: VecDeque<usize>,
    },
}

struct SimPrimitive {
    name: String,
    kind: BackendKind,
    state: PrimitiveState,
}

/// Registry of simulated primitives, addressed by resource name.
#[derive(Default)]
pub struct SimWorld {
    primitives: Vec<SimPrimitive>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimHandle(usize);

impl SimWorld {
    pub fn new() -> Self {
        SimWorld::default()
    }

    /// Opens (creating on first use) the simulated primitive named by the
    /// descriptor. Re-opening the same name with the same kind binds the
    /// same object; a different kind is a collision.
    pub fn open(&mut self, desc: &BackendDescriptor) -> Result<SimHandle, PrimitiveError> {
        desc.validate()?;
        if !desc.kind.is_sim() {
            return Err(PrimitiveError::WrongOperation {
                kind: desc.kind,
                op: "simulate",
            });
        }
        if let Some(i) = self
            .primitives
            .iter()
            .position(|p| p.name == desc.resource_name)
        {
            if self.primitives[i].kind != desc.kind {
                return Err(PrimitiveError::NameCollision {
                    name: desc.resource_name.clone(),
                    existing: self.primitives[i].kind,
                    requested: desc.kind,
                });
            }
            return Ok(SimHandle(i));
        }
        let state = match desc.kind {
            BackendKind::SimLock => PrimitiveState::Lock {
                holder: None,
                queue: VecDeque::new(),
            },
            BackendKind::SimEvent => PrimitiveState::Event {
                latched: false,
                waiter: None,
            },
            BackendKind::SimSemaphore => PrimitiveState::Semaphore {
                count: 0,
                queue: VecDeque::new(),
            },
            _ => unreachable!("checked is_sim above"),
        };
        self.primitives.push(SimPrimitive {
            name: desc.resource_name.clone(),
            kind: desc.kind,
            state,
        });
        Ok(SimHandle(self.primitives.len() - 1))
    }

    /// Pre-provisions a simulated semaphore's count before a run.
    pub fn set_semaphore_count(
        &mut self,
        handle: SimHandle,
        count: u64,
    ) -> Result<(), PrimitiveError> {
        let prim = &mut self.primitives[handle.0];
        match &mut prim.state {
            PrimitiveState::Semaphore { count: c, .. } => {
                if count > SIM_SEM_MAX {
                    return Err(PrimitiveError::SemaphoreOverflow {
                        name: prim.name.clone(),
                        max: SIM_SEM_MAX,
                    });
                }
                *c = count;
                Ok(())
            }
            _ => Err(PrimitiveError::WrongOperation {
                kind: prim.kind,
                op: "set count",
            }),
        }
    }

    pub fn semaphore_count(&self, handle: SimHandle) -> Option<u64> {
        match &self.primitives[handle.0].state {
            PrimitiveState::Semaphore { count, .. } => Some(*count),
            _ => None,
        }
    }

    /// Runs a sender and a receiver program to completion (or stall) against
    /// the primitive. `record_trace` controls whether the event log is kept;
    /// latency samples are always collected.
    pub fn run(
        &mut self,
        handle: SimHandle,
        programs: [Program; 2],
        noise: &NoiseModel,
        record_trace: bool,
    ) -> Result<SimReport, PrimitiveError> {
        self.run_with_engine(handle, programs, NoiseEngine::new(noise.clone()), record_trace)
    }

    /// Like [`SimWorld::run`] but with a caller-built engine, so tests can
    /// force a disturbance onto one specific wait.
    pub fn run_with_engine(
        &mut self,
        handle: SimHandle,
        programs: [Program; 2],
        engine: NoiseEngine,
        record_trace: bool,
    ) -> Result<SimReport, PrimitiveError> {
        let [sender, receiver] = programs;
        let runner = Runner {
            prim: &mut self.primitives[handle.0],
            eng: engine,
            now: 0,
            eps: [EndpointRt::new(sender), EndpointRt::new(receiver)],
            trace: Vec::new(),
            record_trace,
            stall: None,
        };
        runner.run()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EpState {
    /// Will execute its next instruction at this virtual time.
    Ready(Micros),
    BlockedLock { since: Micros, record: bool },
    BlockedEvent { since: Micros, record: bool },
    BlockedSem { since: Micros, record: bool },
    BlockedGap {
        entered: Micros,
        expected: u64,
        gap_us: Micros,
        timeout_at: Micros,
    },
    Done(Micros),
}

/// What an endpoint is occupied with between dispatches; drives the
/// semaphore stall heuristic (a pend can only be satisfied by a peer that is
/// about to post, never by one that is merely pacing with a sleep).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activity {
    Idle,
    Sleeping,
    Waiting,
    Busy,
}

struct EndpointRt {
    program: Program,
    pc: usize,
    state: EpState,
    activity: Activity,
    samples: Vec<LatencySample>,
    gap_results: Vec<GapOutcome>,
    consumes: u64,
    last_consume_at: Option<Micros>,
}

impl EndpointRt {
    fn new(program: Program) -> Self {
        EndpointRt {
            program,
            pc: 0,
            state: EpState::Ready(0),
            activity: Activity::Idle,
            samples: Vec::new(),
            gap_results: Vec::new(),
            consumes: 0,
            last_consume_at: None,
        }
    }

    fn blocked_op(&self) -> Option<&'static str> {
        match self.state {
            EpState::BlockedLock { .. } => Some("acquire"),
            EpState::BlockedEvent { .. } => Some("wait-signal"),
            EpState::BlockedSem { .. } => Some("sem-pend"),
            EpState::BlockedGap { .. } => Some("await-peer-gap"),
            _ => None,
        }
    }
}

struct Runner<'a> {
    prim: &'a mut SimPrimitive,
    eng: NoiseEngine,
    now: Micros,
    eps: [EndpointRt; 2],
    trace: Vec<TraceEvent>,
    record_trace: bool,
    stall: Option<StallReport>,
}

impl Runner<'_> {
    fn run(mut self) -> Result<SimReport, PrimitiveError> {
        loop {
            if self
                .eps
                .iter()
                .all(|ep| matches!(ep.state, EpState::Done(_)))
            {
                return Ok(self.finish(SimOutcome::Completed));
            }
            if let Some(stall) = self.stall.take() {
                return Ok(self.finish(SimOutcome::Stalled(stall)));
            }
            let mut best: Option<(Micros, usize)> = None;
            for e in 0..2 {
                if let Some(t) = self.next_event_time(e) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, e));
                    }
                }
            }
            let Some((t, e)) = best else {
                // Nothing can ever run again: report everyone still blocked.
                let stall = self.stall_report(self.now);
                return Ok(self.finish(SimOutcome::Stalled(stall)));
            };
            self.now = self.now.max(t);
            self.step(e)?;
        }
    }

    fn next_event_time(&self, e: usize) -> Option<Micros> {
        match self.eps[e].state {
            EpState::Ready(t) => Some(t),
            EpState::BlockedGap {
                entered,
                expected,
                gap_us,
                timeout_at,
            } => {
                let peer = &self.eps[1 - e];
                let t = if peer.consumes >= expected {
                    let quiet_from = peer.last_consume_at.unwrap_or(entered);
                    entered.max(quiet_from + gap_us)
                } else {
                    timeout_at
                };
                Some(t.min(timeout_at))
            }
            _ => None,
        }
    }

    fn step(&mut self, e: usize) -> Result<(), PrimitiveError> {
        if let EpState::BlockedGap {
            entered,
            expected,
            gap_us,
            ..
        } = self.eps[e].state
        {
            let peer = &self.eps[1 - e];
            let acknowledged = peer.consumes >= expected
                && peer
                    .last_consume_at
                    .unwrap_or(entered)
                    .saturating_add(gap_us)
                    <= self.now;
            let outcome = GapOutcome {
                acknowledged,
                at_us: self.now,
            };
            self.eps[e].gap_results.push(outcome);
            self.eps[e].state = EpState::Ready(self.now);
            self.eps[e].activity = Activity::Idle;
            self.log(e, TraceWhat::GapDone { acknowledged });
            return Ok(());
        }

        if self.eps[e].pc >= self.eps[e].program.len() {
            self.eps[e].state = EpState::Done(self.now);
            self.eps[e].activity = Activity::Idle;
            self.log(e, TraceWhat::Finished);
            // A peer still blocked on the primitive can now never be woken.
            if matches!(
                self.eps[1 - e].state,
                EpState::BlockedLock { .. } | EpState::BlockedEvent { .. } | EpState::BlockedSem { .. }
            ) {
                self.declare_stall();
            }
            return Ok(());
        }

        let op = self.eps[e].program[self.eps[e].pc];
        self.eps[e].pc += 1;
        match op {
            Op::Sleep(requested) => {
                let realized = self.eng.sleep_realized(requested);
                self.log(e, TraceWhat::Sleep { requested, realized });
                self.eps[e].state = EpState::Ready(self.now + realized);
                self.eps[e].activity = Activity::Sleeping;
                // The peer's pend cannot complete during a plain sleep: the
                // next possible post is at least a bit period away, beyond
                // any sane pend deadline.
                if matches!(self.eps[1 - e].state, EpState::BlockedSem { .. }) {
                    self.declare_stall();
                }
            }
            Op::PreciseWait(requested) => {
                let realized = self.eng.modulation_wait_realized(e, requested);
                self.log(e, TraceWhat::Wait { requested, realized });
                self.eps[e].state = EpState::Ready(self.now + realized);
                self.eps[e].activity = Activity::Waiting;
            }
            Op::SleepUntil(deadline) => {
                let requested = deadline.saturating_sub(self.now);
                let realized = if requested == 0 {
                    0
                } else {
                    self.eng.sleep_realized(requested)
                };
                self.log(e, TraceWhat::Sleep { requested, realized });
                self.eps[e].state = EpState::Ready(self.now + realized);
                self.eps[e].activity = Activity::Sleeping;
                if realized > 0 && matches!(self.eps[1 - e].state, EpState::BlockedSem { .. }) {
                    self.declare_stall();
                }
            }
            Op::PreciseWaitUntil(deadline) => {
                let requested = deadline.saturating_sub(self.now);
                let realized = if requested == 0 {
                    0
                } else {
                    self.eng.modulation_wait_realized(e, requested)
                };
                self.log(e, TraceWhat::Wait { requested, realized });
                self.eps[e].state = EpState::Ready(self.now + realized);
                self.eps[e].activity = Activity::Waiting;
            }
            Op::Busy(duration_us) => {
                self.log(e, TraceWhat::Busy { duration_us });
                self.eps[e].state = EpState::Ready(self.now + duration_us);
                self.eps[e].activity = Activity::Busy;
            }
            Op::Acquire { record } => {
                self.expect_kind(BackendKind::SimLock, "acquire")?;
                self.log(e, TraceWhat::AcquireStart);
                let PrimitiveState::Lock { holder, queue } = &mut self.prim.state else {
                    unreachable!()
                };
                match holder {
                    None => {
                        *holder = Some(e);
                        self.complete_consume(e, self.now, self.now, record, |lat| {
                            TraceWhat::Acquired { latency_us: lat }
                        });
                    }
                    Some(h) if *h == e => {
                        return Err(PrimitiveError::WrongOperation {
                            kind: self.prim.kind,
                            op: "recursive acquire",
                        });
                    }
                    Some(_) => {
                        queue.push_back(e);
                        self.eps[e].state = EpState::BlockedLock {
                            since: self.now,
                            record,
                        };
                    }
                }
            }
            Op::Release => {
                self.expect_kind(BackendKind::SimLock, "release")?;
                let PrimitiveState::Lock { holder, queue } = &mut self.prim.state else {
                    unreachable!()
                };
                if *holder != Some(e) {
                    return Err(PrimitiveError::ReleaseWithoutHold(self.prim.name.clone()));
                }
                *holder = None;
                let next = queue.pop_front();
                if let Some(w) = next {
                    *holder = Some(w);
                }
                self.log(e, TraceWhat::Released);
                self.eps[e].state = EpState::Ready(self.now);
                self.eps[e].activity = Activity::Idle;
                if let Some(w) = next {
                    let EpState::BlockedLock { since, record } = self.eps[w].state else {
                        unreachable!("queued endpoint must be lock-blocked");
                    };
                    let wake_cost = self.eng.blocked_wake_cost(self.now - since);
                    let resume = self.now + wake_cost;
                    self.complete_consume(w, since, resume, record, |lat| TraceWhat::Acquired {
                        latency_us: lat,
                    });
                }
            }
            Op::Signal => {
                self.expect_kind(BackendKind::SimEvent, "signal")?;
                let PrimitiveState::Event { latched, waiter } = &mut self.prim.state else {
                    unreachable!()
                };
                let woken = waiter.take();
                if woken.is_none() {
                    // Saturating latch: an already-raised event absorbs the
                    // signal silently.
                    *latched = true;
                }
                self.log(e, TraceWhat::Signaled);
                self.eps[e].state = EpState::Ready(self.now);
                self.eps[e].activity = Activity::Idle;
                if let Some(w) = woken {
                    let EpState::BlockedEvent { since, record } = self.eps[w].state else {
                        unreachable!("event waiter must be event-blocked");
                    };
                    // The raise returns immediately on the signalling side
                    // (its syscall overhead is modelled as busy work); the
                    // dispatch latency lands on the waiter. Event wake-ups
                    // are direct hand-offs: no kernel requeue and no spike
                    // exposure on the waiting side.
                    let resume = self.now + self.eng.signal_cost();
                    self.complete_consume(w, since, resume, record, |lat| {
                        TraceWhat::SignalConsumed { latency_us: lat }
                    });
                }
            }
            Op::WaitSignal { record } => {
                self.expect_kind(BackendKind::SimEvent, "wait for signal")?;
                self.log(e, TraceWhat::WaitSignalStart);
                let PrimitiveState::Event { latched, waiter } = &mut self.prim.state else {
                    unreachable!()
                };
                if *latched {
                    *latched = false;
                    self.complete_consume(e, self.now, self.now, record, |lat| {
                        TraceWhat::SignalConsumed { latency_us: lat }
                    });
                } else {
                    if waiter.is_some() {
                        return Err(PrimitiveError::WrongOperation {
                            kind: self.prim.kind,
                            op: "second concurrent wait",
                        });
                    }
                    *waiter = Some(e);
                    self.eps[e].state = EpState::BlockedEvent {
                        since: self.now,
                        record,
                    };
                }
            }
            Op::SemPost => {
                self.expect_kind(BackendKind::SimSemaphore, "post")?;
                let PrimitiveState::Semaphore { count, queue } = &mut self.prim.state else {
                    unreachable!()
                };
                let woken = queue.pop_front();
                let count_after = if woken.is_some() {
                    // Direct hand-off to a blocked pend; the count never
                    // rises above zero.
                    *count
                } else {
                    if *count >= SIM_SEM_MAX {
                        return Err(PrimitiveError::SemaphoreOverflow {
                            name: self.prim.name.clone(),
                            max: SIM_SEM_MAX,
                        });
                    }
                    *count += 1;
                    *count
                };
                self.log(e, TraceWhat::Posted { count_after });
                self.eps[e].state = EpState::Ready(self.now);
                self.eps[e].activity = Activity::Idle;
                if let Some(w) = woken {
                    let EpState::BlockedSem { since, record } = self.eps[w].state else {
                        unreachable!("queued endpoint must be sem-blocked");
                    };
                    // As with events, the post returns immediately; the woken
                    // pend pays the dispatch latency plus its wake-up cost.
                    let t_eff = self.now + self.eng.signal_cost();
                    let wake_cost = self.eng.blocked_wake_cost(t_eff - since);
                    let resume = t_eff + wake_cost;
                    self.complete_consume(w, since, resume, record, move |lat| TraceWhat::Pended {
                        count_after,
                        latency_us: lat,
                    });
                }
            }
            Op::SemPend { record } => {
                self.expect_kind(BackendKind::SimSemaphore, "pend")?;
                self.log(e, TraceWhat::PendStart);
                let PrimitiveState::Semaphore { count, queue } = &mut self.prim.state else {
                    unreachable!()
                };
                if *count > 0 {
                    *count -= 1;
                    let count_after = *count;
                    self.complete_consume(e, self.now, self.now, record, move |lat| {
                        TraceWhat::Pended {
                            count_after,
                            latency_us: lat,
                        }
                    });
                } else {
                    queue.push_back(e);
                    self.eps[e].state = EpState::BlockedSem {
                        since: self.now,
                        record,
                    };
                    let peer = &self.eps[1 - e];
                    let peer_gone = matches!(peer.state, EpState::Done(_));
                    let peer_pacing = peer.activity == Activity::Sleeping
                        && matches!(peer.state, EpState::Ready(t) if t > self.now);
                    if peer_gone || peer_pacing {
                        self.declare_stall();
                    }
                }
            }
            Op::AwaitPeerGap {
                expected_peer_consumes,
                gap_us,
                timeout_us,
            } => {
                self.log(e, TraceWhat::GapStart);
                self.eps[e].state = EpState::BlockedGap {
                    entered: self.now,
                    expected: expected_peer_consumes,
                    gap_us,
                    timeout_at: self.now + timeout_us,
                };
                self.eps[e].activity = Activity::Idle;
            }
        }
        Ok(())
    }

    fn expect_kind(&self, kind: BackendKind, op: &'static str) -> Result<(), PrimitiveError> {
        if self.prim.kind != kind {
            return Err(PrimitiveError::WrongOperation {
                kind: self.prim.kind,
                op,
            });
        }
        Ok(())
    }

    /// Finishes a consuming operation for endpoint `e`: schedules it to
    /// resume at `resume`, records a latency sample measured from `since`
    /// (with timestamping slop) if asked, and bumps the consume counters.
    fn complete_consume(
        &mut self,
        e: usize,
        since: Micros,
        resume: Micros,
        record: bool,
        what: impl FnOnce(Micros) -> TraceWhat,
    ) {
        let raw_latency = resume - since;
        let latency = if record {
            let slop = self.eng.measurement_slop();
            let end = ((resume as i64) + slop).max(since as i64) as Micros;
            let sample = LatencySample::new(since, end);
            let lat = sample.latency_us;
            self.eps[e].samples.push(sample);
            lat
        } else {
            raw_latency
        };
        self.eps[e].consumes += 1;
        self.eps[e].last_consume_at = Some(resume);
        self.eps[e].state = EpState::Ready(resume);
        self.eps[e].activity = Activity::Idle;
        self.log_at(resume, e, what(latency));
    }

    fn declare_stall(&mut self) {
        if self.stall.is_none() {
            let report = self.stall_report(self.now);
            for (e, _) in &report.blocked {
                self.log(*e, TraceWhat::Stalled);
            }
            self.stall = Some(report);
        }
    }

    fn stall_report(&self, at_us: Micros) -> StallReport {
        let blocked = (0..2)
            .filter_map(|e| self.eps[e].blocked_op().map(|op| (e, op)))
            .collect();
        StallReport {
            at_us,
            blocked,
            consumed: [self.eps[0].consumes, self.eps[1].consumes],
        }
    }

    fn log(&mut self, endpoint: usize, what: TraceWhat) {
        self.log_at(self.now, endpoint, what);
    }

    fn log_at(&mut self, at_us: Micros, endpoint: usize, what: TraceWhat) {
        if self.record_trace {
            self.trace.push(TraceEvent {
                at_us,
                endpoint,
                what,
            });
        }
    }

    fn finish(self, outcome: SimOutcome) -> SimReport {
        let end_times = [
            match self.eps[0].state {
                EpState::Done(t) => Some(t),
                _ => None,
            },
            match self.eps[1].state {
                EpState::Done(t) => Some(t),
                _ => None,
            },
        ];
        let elapsed_us = match &outcome {
            SimOutcome::Completed => end_times.iter().flatten().copied().max().unwrap_or(0),
            SimOutcome::Stalled(report) => report.at_us,
        };
        let final_sem_count = match &self.prim.state {
            PrimitiveState::Semaphore { count, .. } => Some(*count),
            _ => None,
        };
        let [s, r] = self.eps;
        SimReport {
            outcome,
            samples: [s.samples, r.samples],
            gap_results: [s.gap_results, r.gap_results],
            end_times,
            final_sem_count,
            elapsed_us,
            trace: self.trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::MechanismClass;

    fn lock_world() -> (SimWorld, SimHandle) {
        let mut world = SimWorld::new();
        let handle = world
            .open(&BackendDescriptor::new(BackendKind::SimLock, "L"))
            .unwrap();
        (world, handle)
    }

    fn sem_world(count: u64) -> (SimWorld, SimHandle) {
        let mut world = SimWorld::new();
        let handle = world
            .open(&BackendDescriptor::new(BackendKind::SimSemaphore, "S"))
            .unwrap();
        world.set_semaphore_count(handle, count).unwrap();
        (world, handle)
    }

    fn event_world() -> (SimWorld, SimHandle) {
        let mut world = SimWorld::new();
        let handle = world
            .open(&BackendDescriptor::new(BackendKind::SimEvent, "E"))
            .unwrap();
        (world, handle)
    }

    /// Hand-computed contention run for the bit pattern "10" with
    /// t_t1 = 160 us and t_t0 = 60 us and no noise: the receiver's first
    /// acquire blocks for exactly the hold time, the second is immediate.
    #[test]
    fn zero_noise_contention_pattern_10() {
        let (mut world, handle) = lock_world();
        let sender = vec![
            // bit '1'
            Op::Acquire { record: false },
            Op::PreciseWait(160),
            Op::Release,
            Op::Sleep(60),
            // bit '0'
            Op::Sleep(60),
        ];
        let receiver = vec![
            Op::Acquire { record: true },
            Op::Release,
            Op::Sleep(60),
            Op::Acquire { record: true },
            Op::Release,
            Op::Sleep(60),
        ];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), true)
            .unwrap();
        assert!(report.completed());
        let latencies: Vec<Micros> = report
            .receiver_samples()
            .iter()
            .map(|s| s.latency_us)
            .collect();
        assert_eq!(latencies, vec![160, 0]);
        assert_eq!(report.end_times, [Some(280), Some(280)]);
        assert_eq!(report.elapsed_us, 280);
        // The tie at t=0 went to the sender: the receiver's acquire blocked.
        assert_eq!(report.receiver_samples()[0].start_us, 0);
        assert_eq!(report.receiver_samples()[0].end_us, 160);
    }

    #[test]
    fn blocked_pend_resolves_at_post() {
        let (mut world, handle) = sem_world(0);
        let sender = vec![Op::PreciseWait(100), Op::SemPost];
        let receiver = vec![Op::SemPend { record: true }];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        assert!(report.completed());
        assert_eq!(report.receiver_samples()[0].latency_us, 100);
        assert_eq!(report.final_sem_count, Some(0));
    }

    #[test]
    fn pend_with_no_post_coming_stalls() {
        let (mut world, handle) = sem_world(0);
        // The sender is pacing with a plain sleep: no token is coming.
        let sender = vec![Op::Sleep(500)];
        let receiver = vec![Op::SemPend { record: true }];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        let SimOutcome::Stalled(stall) = &report.outcome else {
            panic!("expected stall, got {:?}", report.outcome);
        };
        assert_eq!(stall.blocked, vec![(RECEIVER, "sem-pend")]);
        assert_eq!(stall.consumed, [0, 0]);
    }

    #[test]
    fn stall_declared_the_moment_the_sender_starts_pacing() {
        let (mut world, handle) = sem_world(0);
        // During the 100 us hold the pend legitimately blocks; the stall is
        // only declared when the sender moves on to a plain sleep.
        let sender = vec![Op::PreciseWait(100), Op::Sleep(60)];
        let receiver = vec![Op::SemPend { record: true }];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        let SimOutcome::Stalled(stall) = &report.outcome else {
            panic!("expected stall, got {:?}", report.outcome);
        };
        assert_eq!(stall.at_us, 100);
    }

    #[test]
    fn peer_finishing_strands_a_blocked_endpoint() {
        let (mut world, handle) = sem_world(0);
        let sender = vec![Op::SemPend { record: false }];
        let receiver = vec![];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        let SimOutcome::Stalled(stall) = &report.outcome else {
            panic!("expected stall, got {:?}", report.outcome);
        };
        assert_eq!(stall.blocked, vec![(SENDER, "sem-pend")]);
    }

    #[test]
    fn event_latch_saturates_at_one() {
        let (mut world, handle) = event_world();
        let sender = vec![Op::Signal, Op::Signal];
        let receiver = vec![
            Op::Sleep(100),
            Op::WaitSignal { record: true },
            Op::WaitSignal { record: true },
        ];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        // Both signals landed before the receiver's first wait; the latch
        // absorbed the second one, so the second wait blocks forever.
        let SimOutcome::Stalled(stall) = &report.outcome else {
            panic!("expected stall, got {:?}", report.outcome);
        };
        assert_eq!(stall.blocked, vec![(RECEIVER, "wait-signal")]);
        assert_eq!(report.samples[RECEIVER].len(), 1);
        assert_eq!(report.samples[RECEIVER][0].latency_us, 0);
    }

    #[test]
    fn signal_wakes_a_parked_waiter() {
        let (mut world, handle) = event_world();
        let sender = vec![Op::PreciseWait(80), Op::Signal];
        let receiver = vec![Op::WaitSignal { record: true }];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        assert!(report.completed());
        assert_eq!(report.receiver_samples()[0].latency_us, 80);
    }

    #[test]
    fn second_concurrent_event_wait_is_misuse() {
        let (mut world, handle) = event_world();
        let sender = vec![Op::WaitSignal { record: false }];
        let receiver = vec![Op::WaitSignal { record: false }];
        let err = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap_err();
        assert!(matches!(
            err,
            PrimitiveError::WrongOperation {
                op: "second concurrent wait",
                ..
            }
        ));
    }

    #[test]
    fn release_without_hold_is_misuse() {
        let (mut world, handle) = lock_world();
        let report = world.run(
            handle,
            [vec![Op::Release], vec![]],
            &NoiseModel::zero(),
            false,
        );
        assert!(matches!(report, Err(PrimitiveError::ReleaseWithoutHold(_))));
    }

    #[test]
    fn wrong_primitive_for_op_is_misuse() {
        let (mut world, handle) = lock_world();
        let report = world.run(
            handle,
            [vec![Op::SemPost], vec![]],
            &NoiseModel::zero(),
            false,
        );
        assert!(matches!(
            report,
            Err(PrimitiveError::WrongOperation { op: "post", .. })
        ));
    }

    #[test]
    fn registry_binds_same_name_same_kind() {
        let mut world = SimWorld::new();
        let a = world
            .open(&BackendDescriptor::new(BackendKind::SimSemaphore, "S"))
            .unwrap();
        let b = world
            .open(&BackendDescriptor::new(BackendKind::SimSemaphore, "S"))
            .unwrap();
        assert_eq!(a, b);
        world.set_semaphore_count(a, 3).unwrap();
        assert_eq!(world.semaphore_count(b), Some(3));

        let err = world
            .open(&BackendDescriptor::new(BackendKind::SimLock, "S"))
            .unwrap_err();
        assert!(matches!(err, PrimitiveError::NameCollision { .. }));

        let err = world
            .open(&BackendDescriptor::new(BackendKind::FileLock, "/tmp/x"))
            .unwrap_err();
        assert!(matches!(err, PrimitiveError::WrongOperation { .. }));
    }

    #[test]
    fn semaphore_overflow_is_reported() {
        let (mut world, handle) = sem_world(SIM_SEM_MAX);
        let report = world.run(
            handle,
            [vec![Op::SemPost], vec![]],
            &NoiseModel::zero(),
            false,
        );
        assert!(matches!(
            report,
            Err(PrimitiveError::SemaphoreOverflow { .. })
        ));
    }

    #[test]
    fn cooperation_descriptor_can_open_a_semaphore_as_event_standin() {
        // Class does not restrict the simulated registry: an event used for
        // cooperation opens fine.
        let mut world = SimWorld::new();
        let mut desc = BackendDescriptor::new(BackendKind::SimEvent, "E");
        assert_eq!(desc.mechanism_class, MechanismClass::Cooperation);
        desc.fair_queueing = true;
        assert!(world.open(&desc).is_ok());
    }

    #[test]
    fn gap_acknowledged_after_peer_goes_quiet() {
        let (mut world, handle) = sem_world(0);
        let sender = vec![
            Op::PreciseWait(50),
            Op::SemPost,
            Op::AwaitPeerGap {
                expected_peer_consumes: 1,
                gap_us: 100,
                timeout_us: 1000,
            },
        ];
        let receiver = vec![Op::SemPend { record: true }];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        assert!(report.completed());
        let gap = report.gap_results[SENDER][0];
        assert!(gap.acknowledged);
        assert_eq!(gap.at_us, 150, "quiet period counted from the consume");
    }

    #[test]
    fn gap_times_out_unacknowledged() {
        let (mut world, handle) = sem_world(0);
        let sender = vec![
            Op::PreciseWait(50),
            Op::SemPost,
            Op::AwaitPeerGap {
                expected_peer_consumes: 2,
                gap_us: 100,
                timeout_us: 1000,
            },
        ];
        let receiver = vec![Op::SemPend { record: true }];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        assert!(report.completed(), "a gap timeout is not a stall");
        let gap = report.gap_results[SENDER][0];
        assert!(!gap.acknowledged);
        assert_eq!(gap.at_us, 50 + 1000);
    }

    #[test]
    fn busy_advances_exactly_even_under_noise() {
        let (mut world, handle) = lock_world();
        let report = world
            .run(
                handle,
                [vec![Op::Busy(123)], vec![]],
                &NoiseModel::standard(7),
                false,
            )
            .unwrap();
        assert_eq!(report.end_times[SENDER], Some(123));
    }

    #[test]
    fn identical_runs_produce_identical_traces() {
        let programs = || {
            let sender = vec![
                Op::Acquire { record: false },
                Op::PreciseWait(160),
                Op::Release,
                Op::Sleep(60),
                Op::Sleep(60),
                Op::Acquire { record: false },
                Op::PreciseWait(160),
                Op::Release,
                Op::Sleep(60),
            ];
            let receiver = vec![
                Op::Acquire { record: true },
                Op::Release,
                Op::Sleep(60),
                Op::Acquire { record: true },
                Op::Release,
                Op::Sleep(60),
                Op::Acquire { record: true },
                Op::Release,
                Op::Sleep(60),
            ];
            [sender, receiver]
        };
        let run = |seed: u64| {
            let (mut world, handle) = lock_world();
            world
                .run(handle, programs(), &NoiseModel::standard(seed), true)
                .unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.trace_text(), b.trace_text());
        assert_eq!(a.samples, b.samples);
        let c = run(12);
        assert_ne!(
            a.trace_text(),
            c.trace_text(),
            "a different seed must perturb the trace"
        );
    }

    #[test]
    fn forced_spike_perturbs_exactly_one_wait() {
        // Two runs that differ only in a forced spike on the sender's second
        // modulation wait must produce identical samples except at that bit.
        let programs = || {
            let sender = vec![
                Op::Acquire { record: false },
                Op::PreciseWait(160),
                Op::Release,
                Op::Sleep(60),
                Op::Acquire { record: false },
                Op::PreciseWait(160),
                Op::Release,
                Op::Sleep(60),
            ];
            let receiver = vec![
                Op::Acquire { record: true },
                Op::Release,
                Op::Sleep(60),
                Op::Acquire { record: true },
                Op::Release,
                Op::Sleep(60),
            ];
            [sender, receiver]
        };
        let model = NoiseModel {
            block_extra_us: 200,
            ..NoiseModel::zero()
        };
        let clean = {
            let (mut world, handle) = lock_world();
            world
                .run_with_engine(
                    handle,
                    programs(),
                    NoiseEngine::new(model.clone()),
                    false,
                )
                .unwrap()
        };
        let spiked = {
            let (mut world, handle) = lock_world();
            world
                .run_with_engine(
                    handle,
                    programs(),
                    NoiseEngine::new(model.clone()).with_forced_wait_spikes(vec![(SENDER, 1)]),
                    false,
                )
                .unwrap()
        };
        assert_eq!(clean.receiver_samples()[0], spiked.receiver_samples()[0]);
        assert_eq!(clean.receiver_samples()[1].latency_us, 160);
        assert_eq!(spiked.receiver_samples()[1].latency_us, 360);
    }

    #[test]
    fn deadline_ops_reanchor_to_absolute_times() {
        let (mut world, handle) = lock_world();
        let sender = vec![Op::Busy(30), Op::SleepUntil(100), Op::PreciseWaitUntil(250)];
        // A deadline already in the past is a no-op.
        let receiver = vec![Op::Busy(150), Op::SleepUntil(100), Op::PreciseWaitUntil(150)];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        assert_eq!(report.end_times, [Some(250), Some(150)]);
    }

    #[test]
    fn pacing_toward_a_deadline_also_declares_the_stall() {
        let (mut world, handle) = sem_world(0);
        let sender = vec![Op::PreciseWait(100), Op::SleepUntil(220)];
        let receiver = vec![Op::SemPend { record: true }];
        let report = world
            .run(handle, [sender, receiver], &NoiseModel::zero(), false)
            .unwrap();
        let SimOutcome::Stalled(stall) = &report.outcome else {
            panic!("expected stall, got {:?}", report.outcome);
        };
        assert_eq!(stall.at_us, 100);
    }
}
