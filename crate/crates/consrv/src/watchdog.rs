//! Liveness watchdog: restart non-responding hosts a bounded number of
//! times within a sliding window, then raise an alarm.
//!
//! A host is suspect once its console has been silent longer than the
//! silence threshold. A suspect host gets a round of answerback probes; if
//! the round fails and the host still has restart budget inside the window,
//! the watchdog resets it and holds off for a boot grace period. A host
//! that exhausts its budget (or has no reset wiring) goes to `Alarmed`,
//! which is absorbing until an administrator clears it. Any console output
//! returns a non-alarmed host to `Healthy`.
//!
//! [`WatchdogEngine`] is the pure state machine: the daemon feeds it output
//! notifications, tick evaluations, and probe-round conclusions, and acts
//! on the returned [`WatchdogAction`]s.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use crate::clock::SimTime;

/// Principal under which machine-initiated resets are audited. Grant it
/// `reset` on the watched hosts (`grant watchdog reset *`).
pub const WATCHDOG_PRINCIPAL: &str = "watchdog";

/// Fixed reason string attached to every watchdog reset.
pub const WATCHDOG_REASON: &str = "watchdog: unresponsive";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WatchdogPolicy {
    /// Console silence before a host becomes suspect.
    pub silence_threshold: Duration,
    /// Answerback attempts per probe round.
    pub probe_retries: u32,
    /// Wait per probe attempt.
    pub probe_timeout: Duration,
    /// Max watchdog resets per host inside `window`.
    pub max_restarts: u32,
    /// Sliding window for the restart budget.
    pub window: Duration,
    /// No reset within this long of a watchdog reset.
    pub boot_grace: Duration,
    /// Evaluation cadence.
    pub tick_period: Duration,
}

impl Default for WatchdogPolicy {
    fn default() -> Self {
        WatchdogPolicy {
            silence_threshold: Duration::from_secs(120),
            probe_retries: 3,
            probe_timeout: Duration::from_secs(2),
            max_restarts: 3,
            window: Duration::from_secs(3600),
            boot_grace: Duration::from_secs(180),
            tick_period: Duration::from_secs(5),
        }
    }
}

impl WatchdogPolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, d) in [
            ("silence_threshold", self.silence_threshold),
            ("probe_timeout", self.probe_timeout),
            ("window", self.window),
            ("boot_grace", self.boot_grace),
            ("tick_period", self.tick_period),
        ] {
            if d.is_zero() {
                return Err(format!("watchdog {name} must be positive"));
            }
        }
        if self.probe_retries == 0 {
            return Err("watchdog probe_retries must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Healthy,
    Suspect,
    Booting,
    Alarmed,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Healthy => "healthy",
            Phase::Suspect => "suspect",
            Phase::Booting => "booting",
            Phase::Alarmed => "alarmed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlarmCause {
    /// Probe rounds kept failing and the restart budget inside the window
    /// is spent.
    RestartBudgetExhausted,
    /// The host cannot be reset remotely at all.
    NoResetWiring,
}

impl AlarmCause {
    pub fn describe(&self) -> &'static str {
        match self {
            AlarmCause::RestartBudgetExhausted => "restart budget exhausted",
            AlarmCause::NoResetWiring => "unresponsive and no reset wiring",
        }
    }
}

/// What the daemon should do for a host right now.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchdogAction {
    None,
    /// Start an answerback probe round on the host's port.
    Probe,
    /// Submit a reset under [`WATCHDOG_PRINCIPAL`] with [`WATCHDOG_REASON`].
    Reset,
    Alarm(AlarmCause),
}

#[derive(Debug)]
struct HostWatch {
    phase: Phase,
    last_output: SimTime,
    restarts: VecDeque<SimTime>,
    probing: bool,
    reset_at: Option<SimTime>,
    alarm: Option<AlarmCause>,
}

/// Status snapshot row for one host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchdogStatus {
    pub host: String,
    pub phase: Phase,
    pub restarts_in_window: usize,
    pub last_output: SimTime,
    pub alarm: Option<AlarmCause>,
}

/// Pure per-host liveness state machine.
pub struct WatchdogEngine {
    policy: WatchdogPolicy,
    hosts: BTreeMap<String, HostWatch>,
}

impl WatchdogEngine {
    pub fn new(policy: WatchdogPolicy) -> WatchdogEngine {
        WatchdogEngine {
            policy,
            hosts: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> &WatchdogPolicy {
        &self.policy
    }

    /// Register a host; `now` counts as its last output so a freshly
    /// started daemon does not mass-probe a quiet farm.
    pub fn watch(&mut self, host: &str, now: SimTime) {
        self.hosts.entry(host.to_string()).or_insert(HostWatch {
            phase: Phase::Healthy,
            last_output: now,
            restarts: VecDeque::new(),
            probing: false,
            reset_at: None,
            alarm: None,
        });
    }

    pub fn hosts(&self) -> impl Iterator<Item = &String> {
        self.hosts.keys()
    }

    /// Console bytes arrived for the host.
    pub fn note_output(&mut self, host: &str, now: SimTime) {
        if let Some(w) = self.hosts.get_mut(host) {
            w.last_output = now;
            if w.phase != Phase::Alarmed {
                w.phase = Phase::Healthy;
                w.probing = false;
                w.reset_at = None;
            }
        }
    }

    /// Periodic evaluation of one host.
    pub fn evaluate(&mut self, host: &str, now: SimTime) -> WatchdogAction {
        let policy = self.policy;
        let Some(w) = self.hosts.get_mut(host) else {
            return WatchdogAction::None;
        };
        match w.phase {
            Phase::Alarmed => WatchdogAction::None,
            Phase::Suspect if w.probing => WatchdogAction::None,
            Phase::Booting
                if w
                    .reset_at
                    .is_some_and(|r| now.since(r) < policy.boot_grace) =>
            {
                WatchdogAction::None
            }
            _ => {
                if now.since(w.last_output) > policy.silence_threshold {
                    w.phase = Phase::Suspect;
                    w.probing = true;
                    WatchdogAction::Probe
                } else {
                    WatchdogAction::None
                }
            }
        }
    }

    /// A probe round finished: the host either answered or stayed silent
    /// through every attempt. `has_wiring` reflects the current registry.
    pub fn probe_concluded(
        &mut self,
        host: &str,
        answered: bool,
        now: SimTime,
        has_wiring: bool,
    ) -> WatchdogAction {
        let policy = self.policy;
        let Some(w) = self.hosts.get_mut(host) else {
            return WatchdogAction::None;
        };
        if w.phase != Phase::Suspect || !w.probing {
            // Stale conclusion; output already recovered the host or an
            // admin intervened.
            return WatchdogAction::None;
        }
        w.probing = false;
        if answered {
            // The answerback is console output.
            w.phase = Phase::Healthy;
            w.last_output = now;
            return WatchdogAction::None;
        }
        while w
            .restarts
            .front()
            .is_some_and(|t| now.since(*t) >= policy.window)
        {
            w.restarts.pop_front();
        }
        if !has_wiring {
            w.phase = Phase::Alarmed;
            w.alarm = Some(AlarmCause::NoResetWiring);
            return WatchdogAction::Alarm(AlarmCause::NoResetWiring);
        }
        if (w.restarts.len() as u32) < policy.max_restarts {
            w.restarts.push_back(now);
            w.phase = Phase::Booting;
            w.reset_at = Some(now);
            WatchdogAction::Reset
        } else {
            w.phase = Phase::Alarmed;
            w.alarm = Some(AlarmCause::RestartBudgetExhausted);
            WatchdogAction::Alarm(AlarmCause::RestartBudgetExhausted)
        }
    }

    /// Manual alarm clear: back to `Healthy` with an empty restart window
    /// and a fresh silence grace.
    pub fn clear(&mut self, host: &str, now: SimTime) {
        if let Some(w) = self.hosts.get_mut(host) {
            w.phase = Phase::Healthy;
            w.restarts.clear();
            w.probing = false;
            w.reset_at = None;
            w.alarm = None;
            w.last_output = now;
        }
    }

    pub fn status(&self, now: SimTime) -> Vec<WatchdogStatus> {
        self.hosts
            .iter()
            .map(|(host, w)| WatchdogStatus {
                host: host.clone(),
                phase: w.phase,
                restarts_in_window: w
                    .restarts
                    .iter()
                    .filter(|t| now.since(**t) < self.policy.window)
                    .count(),
                last_output: w.last_output,
                alarm: w.alarm,
            })
            .collect()
    }

    pub fn alarmed(&self) -> Vec<(String, AlarmCause)> {
        self.hosts
            .iter()
            .filter_map(|(h, w)| w.alarm.map(|a| (h.clone(), a)))
            .collect()
    }

    pub fn phase(&self, host: &str) -> Option<Phase> {
        self.hosts.get(host).map(|w| w.phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Duration = Duration::from_secs(120);
    const TICK: Duration = Duration::from_secs(5);
    const PROBE: Duration = Duration::from_secs(2);

    fn t(secs: f64) -> SimTime {
        SimTime::from_nanos((secs * 1e9) as u64)
    }

    /// Independent reference walk of the policy for a host that hangs at
    /// `hang_at` and never recovers: returns the expected times of each
    /// watchdog reset and the alarm. Ticks land on multiples of the tick
    /// period; a probe round takes `probe_retries * probe_timeout`.
    fn reference_timeline(policy: &WatchdogPolicy, hang_at: f64) -> (Vec<f64>, f64) {
        let tick = policy.tick_period.as_secs_f64();
        let s = policy.silence_threshold.as_secs_f64();
        let round = policy.probe_retries as f64 * policy.probe_timeout.as_secs_f64();
        let grace = policy.boot_grace.as_secs_f64();
        let first_tick_after = |t: f64| (t / tick).floor() * tick + tick;
        let mut resets = Vec::new();
        let mut last_output = hang_at;
        let mut blocked_until = f64::NEG_INFINITY;
        loop {
            // First tick with silence strictly over S and grace expired.
            let suspect = first_tick_after((last_output + s).max(blocked_until));
            let decision = suspect + round;
            if resets.len() as u32 >= policy.max_restarts {
                return (resets, decision);
            }
            resets.push(decision);
            blocked_until = decision + grace;
            let _ = last_output;
            last_output = hang_at; // never recovers
        }
    }

    #[test]
    fn hang_leads_to_reset_at_the_reference_time() {
        let policy = WatchdogPolicy::default();
        let mut eng = WatchdogEngine::new(policy);
        eng.watch("node1", t(0.0));

        let (expected_resets, _) = reference_timeline(&policy, 0.0);
        // Silence from t=0; ticks at 5s multiples; S=120 → suspect at the
        // first tick strictly past 120, probes take 3×2 s.
        assert_eq!(expected_resets[0], 125.0 + 6.0);

        let mut reset_times: Vec<f64> = Vec::new();
        let mut probe_started: Option<f64> = None;
        let mut now = 0.0;
        while reset_times.is_empty() && now < 400.0 {
            now += TICK.as_secs_f64();
            match eng.evaluate("node1", t(now)) {
                WatchdogAction::Probe => probe_started = Some(now),
                WatchdogAction::None => {}
                other => panic!("unexpected {other:?}"),
            }
            if let Some(start) = probe_started {
                let concluded_at = start + 3.0 * PROBE.as_secs_f64();
                if now >= concluded_at {
                    // The daemon delivers the conclusion as soon as the round
                    // ends, not on the tick; model that exact time.
                    match eng.probe_concluded("node1", false, t(concluded_at), true) {
                        WatchdogAction::Reset => reset_times.push(concluded_at),
                        other => panic!("unexpected {other:?}"),
                    }
                    probe_started = None;
                }
            }
        }
        assert_eq!(reset_times, vec![expected_resets[0]]);
        assert_eq!(eng.phase("node1"), Some(Phase::Booting));

        // Boot output returns the host to Healthy.
        eng.note_output("node1", t(reset_times[0] + 4.0));
        assert_eq!(eng.phase("node1"), Some(Phase::Healthy));
    }

    #[test]
    fn rehang_exhausts_budget_then_alarms_on_the_fourth_round() {
        let policy = WatchdogPolicy::default();
        let mut eng = WatchdogEngine::new(policy);
        eng.watch("node1", t(0.0));
        let round = 3.0 * PROBE.as_secs_f64();

        let (expected_resets, expected_alarm) = reference_timeline(&policy, 0.0);
        assert_eq!(expected_resets.len(), 3);

        let mut resets = Vec::new();
        let mut alarm_at = None;
        let mut probe_started: Option<f64> = None;
        let mut now = 0.0;
        while alarm_at.is_none() && now < 3600.0 {
            now += TICK.as_secs_f64();
            if let WatchdogAction::Probe = eng.evaluate("node1", t(now)) {
                probe_started = Some(now);
            }
            if let Some(start) = probe_started {
                if now >= start + round {
                    let at = start + round;
                    match eng.probe_concluded("node1", false, t(at), true) {
                        WatchdogAction::Reset => resets.push(at),
                        WatchdogAction::Alarm(AlarmCause::RestartBudgetExhausted) => {
                            alarm_at = Some(at)
                        }
                        other => panic!("unexpected {other:?}"),
                    }
                    probe_started = None;
                }
            }
        }
        assert_eq!(resets, expected_resets);
        assert_eq!(alarm_at, Some(expected_alarm));
        assert_eq!(eng.phase("node1"), Some(Phase::Alarmed));
        // Alarmed is absorbing.
        assert_eq!(eng.evaluate("node1", t(7200.0)), WatchdogAction::None);
    }

    #[test]
    fn chatty_host_is_never_probed() {
        let mut eng = WatchdogEngine::new(WatchdogPolicy::default());
        eng.watch("node1", t(0.0));
        let mut now = 0.0;
        while now < 7200.0 {
            now += TICK.as_secs_f64();
            // Output lands every 60 s, well inside the 120 s threshold.
            if (now as u64) % 60 == 0 {
                eng.note_output("node1", t(now));
            }
            assert_eq!(eng.evaluate("node1", t(now)), WatchdogAction::None);
        }
    }

    #[test]
    fn no_wiring_goes_straight_to_alarm_with_distinct_cause() {
        let mut eng = WatchdogEngine::new(WatchdogPolicy::default());
        eng.watch("node1", t(0.0));
        assert_eq!(eng.evaluate("node1", t(125.0)), WatchdogAction::Probe);
        assert_eq!(
            eng.probe_concluded("node1", false, t(131.0), false),
            WatchdogAction::Alarm(AlarmCause::NoResetWiring)
        );
        assert_eq!(
            eng.alarmed(),
            vec![("node1".to_string(), AlarmCause::NoResetWiring)]
        );
    }

    #[test]
    fn answerback_recovers_a_suspect_host() {
        let mut eng = WatchdogEngine::new(WatchdogPolicy::default());
        eng.watch("node1", t(0.0));
        assert_eq!(eng.evaluate("node1", t(125.0)), WatchdogAction::Probe);
        assert_eq!(
            eng.probe_concluded("node1", true, t(127.0), true),
            WatchdogAction::None
        );
        assert_eq!(eng.phase("node1"), Some(Phase::Healthy));
    }

    #[test]
    fn no_reset_within_boot_grace() {
        let policy = WatchdogPolicy::default();
        let mut eng = WatchdogEngine::new(policy);
        eng.watch("node1", t(0.0));
        eng.evaluate("node1", t(125.0));
        assert_eq!(
            eng.probe_concluded("node1", false, t(131.0), true),
            WatchdogAction::Reset
        );
        // Silence continues, but inside the grace window no action fires.
        let grace_end = 131.0 + policy.boot_grace.as_secs_f64();
        let mut now = 131.0;
        while now < grace_end {
            now += TICK.as_secs_f64();
            if now < grace_end {
                assert_eq!(eng.evaluate("node1", t(now)), WatchdogAction::None);
            }
        }
        // First tick past the grace resumes probing.
        assert_eq!(eng.evaluate("node1", t(grace_end + 5.0)), WatchdogAction::Probe);
    }

    #[test]
    fn clear_resets_state_and_budget() {
        let mut eng = WatchdogEngine::new(WatchdogPolicy::default());
        eng.watch("node1", t(0.0));
        eng.evaluate("node1", t(125.0));
        eng.probe_concluded("node1", false, t(131.0), false);
        assert_eq!(eng.phase("node1"), Some(Phase::Alarmed));
        eng.clear("node1", t(200.0));
        assert_eq!(eng.phase("node1"), Some(Phase::Healthy));
        let status = &eng.status(t(200.0))[0];
        assert_eq!(status.restarts_in_window, 0);
        assert_eq!(status.alarm, None);
    }

    #[test]
    fn sliding_window_never_exceeds_budget_under_random_schedules() {
        use rand::{Rng, SeedableRng};
        for seed in 0..40u64 {
            let policy = WatchdogPolicy {
                window: Duration::from_secs(600),
                ..WatchdogPolicy::default()
            };
            let mut eng = WatchdogEngine::new(policy);
            eng.watch("node1", t(0.0));
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut resets: Vec<f64> = Vec::new();
            let mut probe_started: Option<f64> = None;
            let mut now = 0.0;
            while now < 4000.0 {
                now += TICK.as_secs_f64();
                // Random recoveries keep the schedule irregular.
                if rng.gen_bool(0.01) {
                    eng.note_output("node1", t(now));
                }
                if let WatchdogAction::Probe = eng.evaluate("node1", t(now)) {
                    probe_started = Some(now);
                }
                if let Some(start) = probe_started {
                    let at = start + 6.0;
                    if now >= at {
                        if let WatchdogAction::Reset =
                            eng.probe_concluded("node1", rng.gen_bool(0.2), t(at), true)
                        {
                            resets.push(at);
                        }
                        probe_started = None;
                    }
                }
            }
            // Brute-force recount: every 600 s window holds at most K resets.
            for &r in &resets {
                let in_window = resets
                    .iter()
                    .filter(|&&x| x > r - 600.0 && x <= r)
                    .count();
                assert!(
                    in_window <= policy.max_restarts as usize,
                    "seed {seed}: {in_window} resets in window ending {r}"
                );
            }
        }
    }
}
