//! Deterministic discrete-event kernel: virtual clock, ordered event queue and
//! seeded random streams.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Simulated time in integer microseconds since the start of a run.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond. Negative and NaN inputs map to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if s.is_nan() || s <= 0.0 {
            return SimTime::ZERO;
        }
        let us = (s * 1e6).round();
        if us >= u64::MAX as f64 {
            SimTime::MAX
        } else {
            SimTime(us as u64)
        }
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    /// Whole milliseconds, truncated.
    pub const fn as_millis(self) -> u64 {
        self.0 / 1000
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 * 1e-3
    }

    pub fn checked_add(self, rhs: SimTime) -> Result<SimTime, SimError> {
        self.0
            .checked_add(rhs.0)
            .map(SimTime)
            .ok_or(SimError::TimeOverflow { lhs: self, rhs })
    }

    pub fn checked_sub(self, rhs: SimTime) -> Result<SimTime, SimError> {
        self.0
            .checked_sub(rhs.0)
            .map(SimTime)
            .ok_or(SimError::TimeUnderflow { lhs: self, rhs })
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn saturating_add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

/// Panics on overflow; use [`SimTime::checked_add`] where overflow is reachable.
impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        match self.checked_add(rhs) {
            Ok(t) => t,
            Err(e) => panic!("{e}"),
        }
    }
}

/// Panics on underflow; use [`SimTime::checked_sub`] where it is reachable.
impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        match self.checked_sub(rhs) {
            Ok(t) => t,
            Err(e) => panic!("{e}"),
        }
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Handle returned by [`Kernel::schedule`]; used for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle {
    fire_at: SimTime,
    seq: u64,
}

impl EventHandle {
    pub fn fire_at(&self) -> SimTime {
        self.fire_at
    }
}

/// Event queue plus virtual clock. Events pop in `(fire_at, seq)` order where
/// `seq` is assigned at schedule time, so simultaneous events run in insertion
/// order.
#[derive(Debug)]
pub struct Kernel<E> {
    clock: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), E>,
}

impl<E> Default for Kernel<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Kernel<E> {
    pub fn new() -> Self {
        Kernel {
            clock: SimTime::ZERO,
            next_seq: 0,
            queue: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, fire_at: SimTime, action: E) -> Result<EventHandle, SimError> {
        if fire_at < self.clock {
            return Err(SimError::ScheduleInPast {
                fire_at,
                now: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((fire_at, seq), action);
        Ok(EventHandle { fire_at, seq })
    }

    /// Schedules `delay` after the current clock.
    pub fn schedule_in(&mut self, delay: SimTime, action: E) -> Result<EventHandle, SimError> {
        let at = self.clock.checked_add(delay)?;
        self.schedule(at, action)
    }

    /// Returns true iff the event was still pending and has been removed.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.queue.remove(&(handle.fire_at, handle.seq)).is_some()
    }

    /// Pops the next event if it fires at or before `horizon`, advancing the clock.
    pub fn pop_until(&mut self, horizon: SimTime) -> Option<(SimTime, E)> {
        let (&(at, _), _) = self.queue.first_key_value()?;
        if at > horizon {
            return None;
        }
        let ((at, _), action) = self.queue.pop_first()?;
        debug_assert!(at >= self.clock);
        self.clock = at;
        Some((at, action))
    }

    /// Executes every event with `fire_at <= horizon` in `(fire_at, seq)` order,
    /// then advances the clock to `horizon` and returns it. The first error from
    /// `handler` aborts the run.
    pub fn run_until<F, Err>(&mut self, horizon: SimTime, mut handler: F) -> Result<SimTime, Err>
    where
        F: FnMut(&mut Kernel<E>, E) -> Result<(), Err>,
    {
        while let Some((_, action)) = self.pop_until(horizon) {
            handler(self, action)?;
        }
        if horizon > self.clock {
            self.clock = horizon;
        }
        Ok(self.clock)
    }
}

/// Independent pseudo-random stream identified by `(seed, stream_id)`.
///
/// Draws are addressed by index: [`RandomStream::rng_at`] returns a generator
/// derived only from `(seed, stream_id, index)`, so one source's draws never
/// depend on how many draws other sources made, or in which order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
    stream_id: String,
    key: u64,
    cursor: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        let stream_id = stream_id.into();
        let key = splitmix64(seed ^ fnv1a(stream_id.as_bytes()));
        RandomStream {
            seed,
            stream_id,
            key,
            cursor: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn rng_at(&self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.key ^ splitmix64(index)))
    }

    /// Generator for the next sequential index.
    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let rng = self.rng_at(self.cursor);
        self.cursor += 1;
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
