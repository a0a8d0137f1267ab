//! Simulation clock, a deterministic event queue, and crash injection.
//!
//! Time is an integer number of microseconds. Events that share a deadline
//! fire by [`EventClass`] first and registration order second, so every run
//! with the same inputs produces the same event order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Microseconds since the start of the simulation.
pub type Micros = u64;

/// Logical timestamp: the number of context switches performed so far.
pub type Timestamp = u64;

pub const DEFAULT_TICK_US: Micros = 1_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    now_us: Micros,
    tick_period_us: Micros,
    ctx_switch_count: Timestamp,
}

impl SimClock {
    pub fn new(tick_period_us: Micros) -> Self {
        assert!(tick_period_us > 0, "tick period must be positive");
        Self {
            now_us: 0,
            tick_period_us,
            ctx_switch_count: 0,
        }
    }

    pub fn now_us(&self) -> Micros {
        self.now_us
    }

    pub fn tick_period_us(&self) -> Micros {
        self.tick_period_us
    }

    pub fn ctx_switch_count(&self) -> Timestamp {
        self.ctx_switch_count
    }

    /// Records one context switch and returns the new timestamp.
    pub fn context_switch(&mut self) -> Timestamp {
        self.ctx_switch_count += 1;
        self.ctx_switch_count
    }

    fn set_now(&mut self, t: Micros) {
        debug_assert!(t >= self.now_us);
        self.now_us = t;
    }
}

/// Priority class used to order events with equal deadlines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventClass {
    Power,
    Interrupt,
    Scheduler,
    Task,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled<E> {
    pub deadline_us: Micros,
    pub class: EventClass,
    seq: u64,
    pub event: E,
}

impl<E> Scheduled<E> {
    fn key(&self) -> (Micros, EventClass, u64) {
        (self.deadline_us, self.class, self.seq)
    }
}

impl<E: Eq> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl<E: Eq> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// A clock together with its pending events.
#[derive(Debug, Clone)]
pub struct Timeline<E: Eq> {
    clock: SimClock,
    pending: BinaryHeap<Reverse<Scheduled<E>>>,
    next_seq: u64,
}

impl<E: Eq> Timeline<E> {
    pub fn new(tick_period_us: Micros) -> Self {
        Self {
            clock: SimClock::new(tick_period_us),
            pending: BinaryHeap::new(),
            next_seq: 0,
        }
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn clock_mut(&mut self) -> &mut SimClock {
        &mut self.clock
    }

    pub fn now_us(&self) -> Micros {
        self.clock.now_us
    }

    /// Registers `event` to fire `offset_us` after the current time.
    pub fn schedule_in(&mut self, offset_us: Micros, class: EventClass, event: E) {
        let deadline_us = self.clock.now_us + offset_us;
        self.schedule_at(deadline_us, class, event);
    }

    pub fn schedule_at(&mut self, deadline_us: Micros, class: EventClass, event: E) {
        let deadline_us = deadline_us.max(self.clock.now_us);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push(Reverse(Scheduled {
            deadline_us,
            class,
            seq,
            event,
        }));
    }

    pub fn next_deadline(&self) -> Option<Micros> {
        self.pending.peek().map(|Reverse(s)| s.deadline_us)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Moves the clock forward by `delta_us` and returns every event whose
    /// deadline is now due, in firing order.
    pub fn advance(&mut self, delta_us: Micros) -> Vec<Scheduled<E>> {
        let target = self.clock.now_us + delta_us;
        let mut fired = Vec::new();
        while let Some(Reverse(head)) = self.pending.peek() {
            if head.deadline_us > target {
                break;
            }
            let Reverse(ev) = self.pending.pop().expect("peeked");
            fired.push(ev);
        }
        self.clock.set_now(target);
        fired
    }

    /// Drops every pending event, e.g. when the device loses power.
    pub fn clear_pending(&mut self) {
        self.pending.clear();
    }
}

/// Atomic micro-steps where a crash can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CrashSite {
    /// Before the scheduler starts a new slice.
    Slice,
    /// Before one working copy is copied into its shadow slot.
    ShadowCopy,
    /// Before one address-map entry is written.
    AddressMapWrite,
    /// Before the bit-map toggle that publishes a commit.
    BitmapToggle,
    /// Before one chunk of a system snapshot is written.
    SnapshotChunk,
    /// Before the snapshot slot toggle.
    SnapshotToggle,
    /// Before one log record is flushed to NVM.
    LogFlush,
    /// Before one flushed log record is applied to the NVM data image.
    LogApply,
    /// Before one step of log-based recovery.
    LogRecover,
}

impl CrashSite {
    pub const ALL: [CrashSite; 9] = [
        CrashSite::Slice,
        CrashSite::ShadowCopy,
        CrashSite::AddressMapWrite,
        CrashSite::BitmapToggle,
        CrashSite::SnapshotChunk,
        CrashSite::SnapshotToggle,
        CrashSite::LogFlush,
        CrashSite::LogApply,
        CrashSite::LogRecover,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CrashSite::Slice => "slice",
            CrashSite::ShadowCopy => "shadow_copy",
            CrashSite::AddressMapWrite => "address_map_write",
            CrashSite::BitmapToggle => "bitmap_toggle",
            CrashSite::SnapshotChunk => "snapshot_chunk",
            CrashSite::SnapshotToggle => "snapshot_toggle",
            CrashSite::LogFlush => "log_flush",
            CrashSite::LogApply => "log_apply",
            CrashSite::LogRecover => "log_recover",
        }
    }
}

impl fmt::Display for CrashSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CrashSite {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CrashSite::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| ConfigError::UnknownCrashSite(s.to_string()))
    }
}

/// The `occurrence_index`-th execution (1-based) of a crash site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrashPoint {
    pub site: CrashSite,
    pub occurrence: u64,
}

impl CrashPoint {
    pub fn new(site: CrashSite, occurrence: u64) -> Self {
        Self { site, occurrence }
    }
}

/// Parses a crash schedule: one `site_id occurrence_index` pair per line.
/// Blank lines and `#` comments are ignored.
pub fn parse_crash_schedule(text: &str) -> Result<Vec<CrashPoint>, ConfigError> {
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(site), Some(occ), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(ConfigError::Parse {
                line: idx + 1,
                msg: "expected `site_id occurrence_index`".into(),
            });
        };
        let site: CrashSite = site.parse()?;
        let occurrence: u64 = occ.parse().map_err(|_| ConfigError::Parse {
            line: idx + 1,
            msg: format!("bad occurrence index `{occ}`"),
        })?;
        if occurrence == 0 {
            return Err(ConfigError::Parse {
                line: idx + 1,
                msg: "occurrence indices start at 1".into(),
            });
        }
        points.push(CrashPoint::new(site, occurrence));
    }
    Ok(points)
}

/// Counts executions of every crash site and halts at scheduled points.
#[derive(Debug, Clone, Default)]
pub struct CrashInjector {
    counts: BTreeMap<CrashSite, u64>,
    schedule: BTreeSet<CrashPoint>,
    fired: Vec<CrashPoint>,
}

impl CrashInjector {
    pub fn new(points: impl IntoIterator<Item = CrashPoint>) -> Self {
        Self {
            schedule: points.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn inject(&mut self, cp: CrashPoint) {
        self.schedule.insert(cp);
    }

    /// Called immediately before a micro-step executes. Returns `Err` when
    /// the device must lose power instead of executing it.
    pub fn step(&mut self, site: CrashSite) -> Result<(), CrashPoint> {
        let n = self.counts.entry(site).or_insert(0);
        *n += 1;
        let cp = CrashPoint::new(site, *n);
        if self.schedule.contains(&cp) {
            self.fired.push(cp);
            Err(cp)
        } else {
            Ok(())
        }
    }

    pub fn count(&self, site: CrashSite) -> u64 {
        self.counts.get(&site).copied().unwrap_or(0)
    }

    pub fn fired(&self) -> &[CrashPoint] {
        &self.fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Eq)]
    enum Ev {
        PowerOff,
        TaskDone,
        Named(&'static str),
    }

    #[test]
    fn zero_advance_fires_nothing() {
        let mut tl: Timeline<Ev> = Timeline::new(DEFAULT_TICK_US);
        tl.schedule_in(10, EventClass::Task, Ev::TaskDone);
        assert!(tl.advance(0).is_empty());
        assert_eq!(tl.now_us(), 0);
    }

    #[test]
    fn single_event_fires_within_window() {
        let mut tl: Timeline<Ev> = Timeline::new(DEFAULT_TICK_US);
        tl.schedule_in(500, EventClass::Task, Ev::TaskDone);
        let fired = tl.advance(1000);
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].deadline_us, 500);
        assert_eq!(tl.now_us(), 1000);
    }

    #[test]
    fn power_event_precedes_task_event_at_same_deadline() {
        let mut tl: Timeline<Ev> = Timeline::new(DEFAULT_TICK_US);
        // registered first, but lower priority class
        tl.schedule_in(700, EventClass::Task, Ev::TaskDone);
        tl.schedule_in(700, EventClass::Power, Ev::PowerOff);
        let fired: Vec<_> = tl.advance(1000).into_iter().map(|s| s.event).collect();
        assert_eq!(fired, vec![Ev::PowerOff, Ev::TaskDone]);
    }

    #[test]
    fn registration_order_breaks_ties_within_class() {
        let mut tl: Timeline<Ev> = Timeline::new(DEFAULT_TICK_US);
        for name in ["a", "b", "c"] {
            tl.schedule_in(5, EventClass::Scheduler, Ev::Named(name));
        }
        tl.schedule_in(4, EventClass::Scheduler, Ev::Named("early"));
        let fired: Vec<_> = tl.advance(5).into_iter().map(|s| s.event).collect();
        assert_eq!(
            fired,
            vec![Ev::Named("early"), Ev::Named("a"), Ev::Named("b"), Ev::Named("c")]
        );
    }

    #[test]
    fn context_switch_counter_is_monotonic() {
        let mut c = SimClock::new(1000);
        let stamps: Vec<_> = (0..5).map(|_| c.context_switch()).collect();
        assert_eq!(stamps, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn crash_schedule_parses_and_rejects_unknown_sites() {
        let pts = parse_crash_schedule("# header\nbitmap_toggle 1\n\nslice 12 # late\n").unwrap();
        assert_eq!(
            pts,
            vec![
                CrashPoint::new(CrashSite::BitmapToggle, 1),
                CrashPoint::new(CrashSite::Slice, 12)
            ]
        );
        assert_eq!(
            parse_crash_schedule("warp_core 1"),
            Err(ConfigError::UnknownCrashSite("warp_core".into()))
        );
        assert!(matches!(
            parse_crash_schedule("slice"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(parse_crash_schedule("slice 0").is_err());
    }

    #[test]
    fn injector_halts_on_exact_occurrence() {
        let mut inj = CrashInjector::new([CrashPoint::new(CrashSite::ShadowCopy, 2)]);
        assert!(inj.step(CrashSite::ShadowCopy).is_ok());
        assert!(inj.step(CrashSite::BitmapToggle).is_ok());
        assert_eq!(
            inj.step(CrashSite::ShadowCopy),
            Err(CrashPoint::new(CrashSite::ShadowCopy, 2))
        );
        assert!(inj.step(CrashSite::ShadowCopy).is_ok());
        assert_eq!(inj.fired().len(), 1);
    }

    #[test]
    fn unreached_site_never_fires() {
        let mut inj = CrashInjector::new([CrashPoint::new(CrashSite::LogRecover, 1)]);
        for _ in 0..100 {
            assert!(inj.step(CrashSite::Slice).is_ok());
        }
        assert!(inj.fired().is_empty());
    }
}
