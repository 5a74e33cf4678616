//! Shared clock with a timer queue, usable in two modes.
//!
//! Every timed component in this crate (relay pulse widths, log flush
//! deadlines, probe timeouts, watchdog ticks, simulated node transcripts)
//! takes its time from a [`Clock`] instead of the OS. A manual clock is
//! advanced explicitly and fires scheduled callbacks in timestamp order,
//! which makes hour-long scenarios run in milliseconds and makes every
//! timeline a pure function of the schedule. A realtime clock is the same
//! structure driven by a background thread at wall speed, used by the
//! daemon binary and the interactive CLI.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};

/// A point on the clock's timeline, in nanoseconds since the clock was created.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_duration(self) -> Duration {
        Duration::from_nanos(self.0)
    }

    /// Duration since an earlier instant; zero if `earlier` is later.
    pub fn since(self, earlier: SimTime) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl std::ops::Add<Duration> for SimTime {
    type Output = SimTime;
    fn add(self, d: Duration) -> SimTime {
        SimTime(self.0 + d.as_nanos() as u64)
    }
}

impl std::fmt::Debug for SimTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}s", self.0 as f64 / 1e9)
    }
}

type TimerFn = Box<dyn FnOnce() + Send>;

struct TimerEntry {
    at: SimTime,
    seq: u64,
    run: TimerFn,
}

impl PartialEq for TimerEntry {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for TimerEntry {}
impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimerEntry {
    // BinaryHeap is a max-heap; invert so the earliest (then lowest-seq) entry
    // is popped first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct ClockState {
    now: SimTime,
    timers: BinaryHeap<TimerEntry>,
    seq: u64,
    advancing: bool,
    wall_base: DateTime<Utc>,
}

/// Timer-queue clock. See the module docs for the two modes.
pub struct Clock {
    state: Mutex<ClockState>,
    idle: Condvar,
    realtime: bool,
}

impl Clock {
    /// A clock that only moves when `advance*` is called. Single driving
    /// thread by contract: callbacks run on the advancing thread, and
    /// advancing from within a callback is a programming error.
    pub fn manual() -> Arc<Clock> {
        Self::with_mode(false, DateTime::<Utc>::from_timestamp(0, 0).unwrap())
    }

    /// A manual clock whose RFC3339 rendering starts at `wall_base` instead
    /// of the Unix epoch.
    pub fn manual_at(wall_base: DateTime<Utc>) -> Arc<Clock> {
        Self::with_mode(false, wall_base)
    }

    /// A clock meant to be driven at wall speed; call [`Clock::drive_realtime`]
    /// to start the driver thread.
    pub fn realtime() -> Arc<Clock> {
        Self::with_mode(true, Utc::now())
    }

    fn with_mode(realtime: bool, wall_base: DateTime<Utc>) -> Arc<Clock> {
        Arc::new(Clock {
            state: Mutex::new(ClockState {
                now: SimTime::ZERO,
                timers: BinaryHeap::new(),
                seq: 0,
                advancing: false,
                wall_base,
            }),
            idle: Condvar::new(),
            realtime,
        })
    }

    pub fn is_realtime(&self) -> bool {
        self.realtime
    }

    pub fn now(&self) -> SimTime {
        self.state.lock().unwrap().now
    }

    /// Wall-time rendering of an instant on this clock's timeline.
    pub fn wall(&self, t: SimTime) -> DateTime<Utc> {
        let base = self.state.lock().unwrap().wall_base;
        base + chrono::Duration::nanoseconds(t.as_nanos() as i64)
    }

    /// Current time as RFC3339 with millisecond precision.
    pub fn timestamp(&self) -> String {
        let t = self.now();
        self.wall(t).to_rfc3339_opts(SecondsFormat::Millis, true)
    }

    pub fn schedule_at<F: FnOnce() + Send + 'static>(&self, at: SimTime, f: F) {
        let mut st = self.state.lock().unwrap();
        let seq = st.seq;
        st.seq += 1;
        st.timers.push(TimerEntry {
            at,
            seq,
            run: Box::new(f),
        });
    }

    pub fn schedule_in<F: FnOnce() + Send + 'static>(&self, d: Duration, f: F) {
        let at = self.now() + d;
        self.schedule_at(at, f);
    }

    /// Advance to `target`, firing every timer due on the way in timestamp
    /// order. Callbacks run with the clock set to their due time and may
    /// schedule further timers.
    pub fn advance_to(&self, target: SimTime) {
        let mut st = self.state.lock().unwrap();
        assert!(
            !st.advancing,
            "clock advanced from within a timer callback (blocking waits are \
             not allowed inside scheduled callbacks)"
        );
        st.advancing = true;
        loop {
            let due = match st.timers.peek() {
                Some(e) if e.at <= target => true,
                _ => false,
            };
            if !due {
                break;
            }
            let entry = st.timers.pop().unwrap();
            if entry.at > st.now {
                st.now = entry.at;
            }
            drop(st);
            (entry.run)();
            st = self.state.lock().unwrap();
        }
        if target > st.now {
            st.now = target;
        }
        st.advancing = false;
        drop(st);
        self.idle.notify_all();
    }

    pub fn advance(&self, d: Duration) {
        let target = self.now() + d;
        self.advance_to(target);
    }

    /// Advance toward `deadline` by at most one pending-timer step. Used by
    /// blocking reads on the manual clock so that a timeout wait drives the
    /// world forward instead of spinning. Returns the new now.
    pub(crate) fn advance_step(&self, deadline: SimTime) -> SimTime {
        let next = {
            let st = self.state.lock().unwrap();
            assert!(
                !st.advancing,
                "blocking read with a timeout inside a clock callback"
            );
            st.timers.peek().map(|e| e.at)
        };
        let target = match next {
            Some(at) if at < deadline => at,
            _ => deadline,
        };
        self.advance_to(target);
        self.now()
    }

    /// Drive this realtime clock until `stop` is set. Timer callbacks run on
    /// the returned thread.
    pub fn drive_realtime(self: &Arc<Self>, stop: Arc<AtomicBool>) -> thread::JoinHandle<()> {
        assert!(self.realtime, "drive_realtime on a manual clock");
        let clock = Arc::clone(self);
        thread::spawn(move || {
            let start = std::time::Instant::now();
            while !stop.load(AtomicOrdering::Relaxed) {
                let target = SimTime::from_nanos(start.elapsed().as_nanos() as u64);
                clock.advance_to(target);
                thread::sleep(Duration::from_millis(1));
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn advance_fires_timers_in_order() {
        let clock = Clock::manual();
        let log = Arc::new(Mutex::new(Vec::new()));
        for (at, tag) in [(30u64, "c"), (10, "a"), (20, "b")] {
            let log = Arc::clone(&log);
            clock.schedule_at(SimTime::from_nanos(at), move || {
                log.lock().unwrap().push(tag);
            });
        }
        clock.advance_to(SimTime::from_nanos(25));
        assert_eq!(*log.lock().unwrap(), vec!["a", "b"]);
        clock.advance_to(SimTime::from_nanos(100));
        assert_eq!(*log.lock().unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn callbacks_see_their_due_time_and_can_reschedule() {
        let clock = Clock::manual();
        let hits = Arc::new(AtomicUsize::new(0));
        fn tick(clock: Arc<Clock>, hits: Arc<AtomicUsize>) {
            hits.fetch_add(1, Ordering::SeqCst);
            if hits.load(Ordering::SeqCst) < 5 {
                let c = Arc::clone(&clock);
                let h = Arc::clone(&hits);
                clock.schedule_in(Duration::from_secs(1), move || tick(c, h));
            }
        }
        let c = Arc::clone(&clock);
        let h = Arc::clone(&hits);
        clock.schedule_in(Duration::from_secs(1), move || tick(c, h));
        clock.advance(Duration::from_secs(10));
        assert_eq!(hits.load(Ordering::SeqCst), 5);
        assert_eq!(clock.now(), SimTime::ZERO + Duration::from_secs(10));
    }

    #[test]
    fn same_instant_timers_run_in_schedule_order() {
        let clock = Clock::manual();
        let log = Arc::new(Mutex::new(Vec::new()));
        for tag in ["first", "second", "third"] {
            let log = Arc::clone(&log);
            clock.schedule_at(SimTime::from_nanos(5), move || {
                log.lock().unwrap().push(tag);
            });
        }
        clock.advance_to(SimTime::from_nanos(5));
        assert_eq!(*log.lock().unwrap(), vec!["first", "second", "third"]);
    }

    #[test]
    fn timestamps_render_from_the_wall_base() {
        let clock = Clock::manual();
        clock.advance(Duration::from_millis(2050));
        assert_eq!(clock.timestamp(), "1970-01-01T00:00:02.050Z");
    }
}
