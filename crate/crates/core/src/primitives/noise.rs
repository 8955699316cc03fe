//! Timing-noise model for simulated runs.
//!
//! Every disturbance a real host inflicts on the channel is reduced to six
//! parameters plus a seed. The same model and seed always produce the same
//! realized timings, which is what makes simulated sweeps reproducible down
//! to the byte.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Micros;

/// Scheduling quantum: a wake-up from a kernel block is exposed to whole
/// preemption bursts only if the wait spanned at least one full quantum, and
/// accrues one extra burst opportunity per quantum spent blocked.
pub const SCHED_QUANTUM_US: Micros = 200;

/// Spike-opportunity window for timed modulation waits. A thread parked on a
/// timer is cheaper to resume than one parked on a contended object, so its
/// exposure accrues on a coarser grid: every started window adds one chance
/// to eat a preemption burst before the deadline fires.
pub const TIMED_WAIT_HAZARD_WINDOW_US: Micros = 250;

/// Upper bound on the short requeue delay a woken thread can suffer when it
/// loses its dispatch slot. Deliberately smaller than any sane observation
/// pause, so an unlucky wake-up shifts the next measurement without ever
/// displacing it past the following bit.
pub const WAKE_REQUEUE_CAP_US: Micros = 30;

/// Host timing disturbances applied to a simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Uniform +/- jitter applied to realized durations.
    pub jitter_half_width_us: Micros,
    /// Per-opportunity probability of a preemption disturbance (spikes on
    /// modulation waits, requeue delays and bursts on blocked wake-ups).
    pub block_probability: f64,
    /// Extra delay added when a spike fires.
    pub block_extra_us: Micros,
    /// Scheduler wake-up cost: added to every OS timer sleep as overshoot
    /// and paid by every blocked contention wait on hand-off.
    pub wakeup_floor_us: Micros,
    /// Sender-side per-bit instruction time outside the primitive (t_t).
    pub sender_overhead_us: Micros,
    /// Receiver-side per-bit instruction time outside the primitive (t_s).
    pub receiver_overhead_us: Micros,
    pub seed: u64,
}

impl NoiseModel {
    /// No disturbances at all; realized timings equal requested timings.
    pub fn zero() -> Self {
        NoiseModel {
            jitter_half_width_us: 0,
            block_probability: 0.0,
            block_extra_us: 0,
            wakeup_floor_us: 0,
            sender_overhead_us: 0,
            receiver_overhead_us: 0,
            seed: 0,
        }
    }

    /// The reference host profile used for acceptance-style runs:
    /// +/-10 us jitter, 1% blocking spikes of 200 us, a 58 us sleep wake-up
    /// floor, and 2 us of loop overhead on each side.
    pub fn standard(seed: u64) -> Self {
        NoiseModel {
            jitter_half_width_us: 10,
            block_probability: 0.01,
            block_extra_us: 200,
            wakeup_floor_us: 58,
            sender_overhead_us: 2,
            receiver_overhead_us: 2,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.block_probability) {
            return Err(format!(
                "block_probability must be in [0, 1], got {}",
                self.block_probability
            ));
        }
        Ok(())
    }
}

/// Draws realized timings from a [`NoiseModel`]. One engine per run; the
/// draw sequence is a pure function of (model, seed, call order).
#[derive(Debug)]
pub struct NoiseEngine {
    model: NoiseModel,
    rng: ChaCha8Rng,
    /// Endpoint-indexed count of modulation waits, for forced spikes.
    wait_counts: [u64; 2],
    /// (endpoint, wait index) pairs that spike unconditionally. Test hook
    /// for single-symbol disturbance experiments.
    forced_wait_spikes: Vec<(usize, u64)>,
}

impl NoiseEngine {
    pub fn new(model: NoiseModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        NoiseEngine {
            model,
            rng,
            wait_counts: [0, 0],
            forced_wait_spikes: Vec::new(),
        }
    }

    pub fn with_forced_wait_spikes(mut self, spikes: Vec<(usize, u64)>) -> Self {
        self.forced_wait_spikes = spikes;
        self
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    fn jitter_signed(&mut self) -> i64 {
        let w = self.model.jitter_half_width_us as i64;
        if w == 0 {
            0
        } else {
            self.rng.gen_range(-w..=w)
        }
    }

    fn jitter_overshoot(&mut self) -> Micros {
        let w = self.model.jitter_half_width_us;
        if w == 0 {
            0
        } else {
            self.rng.gen_range(0..=w)
        }
    }

    /// Accumulated spike delay for a modulation wait of `duration_us`.
    fn spikes(&mut self, duration_us: Micros, forced: bool) -> Micros {
        let mut extra = if forced { self.model.block_extra_us } else { 0 };
        if self.model.block_probability > 0.0 {
            let draws = 1 + duration_us / TIMED_WAIT_HAZARD_WINDOW_US;
            for _ in 0..draws {
                if self.rng.gen_bool(self.model.block_probability) {
                    extra += self.model.block_extra_us;
                }
            }
        }
        extra
    }

    /// Realized duration of an OS timer sleep. A timer wake is delivered
    /// through the same scheduler path as any other wake-up, so short sleeps
    /// overshoot by the wake-up floor plus dispatch jitter and never end
    /// early.
    pub fn sleep_realized(&mut self, requested_us: Micros) -> Micros {
        requested_us + self.model.wakeup_floor_us + self.jitter_overshoot()
    }

    /// Realized duration of a modulation wait (hybrid sleep+spin): never
    /// early, not floored, and exposed to blocking spikes.
    pub fn modulation_wait_realized(&mut self, endpoint: usize, requested_us: Micros) -> Micros {
        let index = self.wait_counts[endpoint];
        self.wait_counts[endpoint] += 1;
        let forced = self.forced_wait_spikes.contains(&(endpoint, index));
        requested_us + self.jitter_overshoot() + self.spikes(requested_us, forced)
    }

    /// Cost of delivering a wake-up to a wait that blocked in the kernel for
    /// `blocked_us` (contention-class primitives). Beyond the wake-up floor,
    /// a wake occasionally loses its dispatch slot and comes back a bounded
    /// few tens of microseconds late; only a wait that stayed blocked through
    /// at least one full scheduling quantum is additionally exposed to whole
    /// preemption bursts on the way out.
    pub fn blocked_wake_cost(&mut self, blocked_us: Micros) -> Micros {
        let mut cost = if self.model.wakeup_floor_us > 0 {
            self.model.wakeup_floor_us + self.jitter_overshoot()
        } else {
            0
        };
        if self.model.block_probability > 0.0 {
            if self.rng.gen_bool(self.model.block_probability) {
                cost += self.rng.gen_range(0..=WAKE_REQUEUE_CAP_US);
            }
            let deep_draws = blocked_us / SCHED_QUANTUM_US;
            for _ in 0..deep_draws {
                if self.rng.gen_bool(self.model.block_probability) {
                    cost += self.model.block_extra_us;
                }
            }
        }
        cost
    }

    /// Scheduler hand-off latency between a raised signal and the waiter
    /// actually running; borne by the waiting side.
    pub fn signal_cost(&mut self) -> Micros {
        self.jitter_overshoot()
    }

    /// Timestamping slop folded into a recorded latency sample.
    pub fn measurement_slop(&mut self) -> i64 {
        self.jitter_signed()
    }
}
