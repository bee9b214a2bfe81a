//! Delegation policies and the sliding-window rate limiter.

use crate::clock::Timestamp;
use crate::digest::Measurement;
use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::net::IpAddr;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operation {
    Sign,
    Authenticate,
    Status,
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Gateway checks, in the order they run. A denial names the first one that fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DenyReason {
    ProfileState,
    Attestation,
    PolicyValidity,
    OpPermission,
    CidrScope,
    MeasurementMatch,
    RateLimit,
}

impl DenyReason {
    pub const ORDER: [DenyReason; 7] = [
        DenyReason::ProfileState,
        DenyReason::Attestation,
        DenyReason::PolicyValidity,
        DenyReason::OpPermission,
        DenyReason::CidrScope,
        DenyReason::MeasurementMatch,
        DenyReason::RateLimit,
    ];
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denial {
    pub reason: DenyReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after_secs: Option<u64>,
}

impl Denial {
    pub fn new(reason: DenyReason) -> Self {
        Self {
            reason,
            detail: None,
            retry_after_secs: None,
        }
    }

    pub fn with_detail(reason: DenyReason, detail: impl Into<String>) -> Self {
        Self {
            reason,
            detail: Some(detail.into()),
            retry_after_secs: None,
        }
    }
}

impl fmt::Display for Denial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "denied: {}", self.reason)?;
        if let Some(d) = &self.detail {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimit {
    pub n: u32,
    pub window_seconds: u64,
}

/// Closed interval of milliseconds during which the policy may be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Validity {
    pub not_before: Timestamp,
    pub not_after: Timestamp,
}

impl Validity {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.not_before <= t && t <= self.not_after
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelegationPolicy {
    pub policy_id: String,
    pub rate_limit: RateLimit,
    pub validity: Validity,
    pub allowed_ops: BTreeSet<Operation>,
    /// Empty means any source address.
    #[serde(default)]
    pub cidr_allowlist: Vec<IpNet>,
    pub measurement_allowlist: BTreeSet<Measurement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid policy: {0}")]
pub struct InvalidPolicy(pub &'static str);

impl DelegationPolicy {
    pub fn validate(&self) -> Result<(), InvalidPolicy> {
        if self.policy_id.trim().is_empty() {
            return Err(InvalidPolicy("policy_id must not be empty"));
        }
        if self.validity.not_after <= self.validity.not_before {
            return Err(InvalidPolicy("validity.not_after must be later than not_before"));
        }
        if self.allowed_ops.is_empty() {
            return Err(InvalidPolicy("allowed_ops must not be empty"));
        }
        if self.rate_limit.window_seconds == 0 {
            return Err(InvalidPolicy("rate_limit.window_seconds must be positive"));
        }
        Ok(())
    }

    pub fn source_allowed(&self, source: IpAddr) -> bool {
        let source = canonical_ip(source);
        self.cidr_allowlist.is_empty() || self.cidr_allowlist.iter().any(|net| net.contains(&source))
    }

    fn window_millis(&self) -> u64 {
        self.rate_limit.window_seconds.saturating_mul(1000)
    }
}

/// IPv4-mapped IPv6 addresses are matched as IPv4.
fn canonical_ip(ip: IpAddr) -> IpAddr {
    match ip {
        IpAddr::V6(v6) => v6.to_ipv4_mapped().map(IpAddr::V4).unwrap_or(ip),
        v4 => v4,
    }
}

/// Timestamps of admitted operations for one profile. An event at `t` counts
/// against the window at `now` iff `now - W < t <= now`.
#[derive(Debug, Clone, Default)]
pub struct RateWindow {
    events: VecDeque<Timestamp>,
}

impl RateWindow {
    pub fn new() -> Self {
        Self::default()
    }

    fn expire(&mut self, now: Timestamp, window_ms: u64) {
        while let Some(&t) = self.events.front() {
            if t.as_millis().saturating_add(window_ms) <= now.as_millis() {
                self.events.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn in_window(&self, now: Timestamp, window_ms: u64) -> usize {
        self.events
            .iter()
            .filter(|t| t.as_millis().saturating_add(window_ms) > now.as_millis() && **t <= now)
            .count()
    }

    pub fn headroom(&self, policy: &DelegationPolicy, now: Timestamp) -> u32 {
        let used = self.in_window(now, policy.window_millis()) as u32;
        policy.rate_limit.n.saturating_sub(used)
    }

    /// Records an event if the budget allows; otherwise returns seconds until
    /// the oldest counted event leaves the window.
    fn try_admit(&mut self, policy: &DelegationPolicy, now: Timestamp) -> Result<(), u64> {
        let window_ms = policy.window_millis();
        self.expire(now, window_ms);
        if self.in_window(now, window_ms) < policy.rate_limit.n as usize {
            self.events.push_back(now);
            return Ok(());
        }
        let retry_ms = match self.events.front() {
            Some(oldest) => oldest.as_millis() + window_ms - now.as_millis(),
            None => window_ms,
        };
        Err(retry_ms.div_ceil(1000).max(1))
    }
}

/// Everything about a request that the policy stage looks at.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRequest<'a> {
    pub op: Operation,
    pub source: IpAddr,
    pub now: Timestamp,
    /// The attested measurement, already known to come from a valid token.
    pub measurement: &'a Measurement,
    pub expected_measurements: &'a BTreeSet<Measurement>,
}

/// PolicyValidity, OpPermission, CidrScope, MeasurementMatch, RateLimit, in
/// that order. The rate window is touched only when every earlier check passes.
pub fn enforce_policy(
    policy: &DelegationPolicy,
    req: &PolicyRequest<'_>,
    rate: &mut RateWindow,
) -> Result<(), Denial> {
    if !policy.validity.contains(req.now) {
        return Err(Denial::new(DenyReason::PolicyValidity));
    }
    if !policy.allowed_ops.contains(&req.op) {
        return Err(Denial::with_detail(DenyReason::OpPermission, req.op.to_string()));
    }
    if !policy.source_allowed(req.source) {
        return Err(Denial::with_detail(DenyReason::CidrScope, req.source.to_string()));
    }
    if !crate::attestation::measurement_approved(
        req.measurement,
        req.expected_measurements,
        &policy.measurement_allowlist,
    ) {
        return Err(Denial::with_detail(DenyReason::MeasurementMatch, "MeasurementMismatch"));
    }
    rate.try_admit(policy, req.now).map_err(|secs| Denial {
        reason: DenyReason::RateLimit,
        detail: None,
        retry_after_secs: Some(secs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m() -> Measurement {
        Measurement::of(b"agent")
    }

    fn policy(n: u32, window: u64) -> DelegationPolicy {
        DelegationPolicy {
            policy_id: "p1".into(),
            rate_limit: RateLimit { n, window_seconds: window },
            validity: Validity {
                not_before: Timestamp::from_secs(1_000),
                not_after: Timestamp::from_secs(100_000),
            },
            allowed_ops: [Operation::Sign, Operation::Authenticate, Operation::Status].into(),
            cidr_allowlist: vec![],
            measurement_allowlist: [m()].into(),
        }
    }

    fn check(p: &DelegationPolicy, w: &mut RateWindow, op: Operation, src: &str, now: Timestamp) -> Result<(), Denial> {
        let meas = m();
        let exp: BTreeSet<_> = [m()].into();
        enforce_policy(
            p,
            &PolicyRequest {
                op,
                source: src.parse().unwrap(),
                now,
                measurement: &meas,
                expected_measurements: &exp,
            },
            w,
        )
    }

    #[test]
    fn ten_per_minute() {
        let p = policy(10, 60);
        let mut w = RateWindow::new();
        let now = Timestamp::from_secs(5_000);
        for _ in 0..10 {
            assert!(check(&p, &mut w, Operation::Sign, "127.0.0.1", now).is_ok());
        }
        let d = check(&p, &mut w, Operation::Sign, "127.0.0.1", now).unwrap_err();
        assert_eq!(d.reason, DenyReason::RateLimit);
        assert_eq!(d.retry_after_secs, Some(60));
    }

    #[test]
    fn window_end_is_exclusive() {
        let p = policy(1, 60);
        let mut w = RateWindow::new();
        let t = Timestamp::from_secs(5_000);
        check(&p, &mut w, Operation::Sign, "127.0.0.1", t).unwrap();
        let almost = t.plus_millis(59_999);
        assert_eq!(check(&p, &mut w, Operation::Sign, "127.0.0.1", almost).unwrap_err().retry_after_secs, Some(1));
        assert!(check(&p, &mut w, Operation::Sign, "127.0.0.1", t.plus_secs(60)).is_ok());
    }

    #[test]
    fn zero_budget_denies_everything() {
        let p = policy(0, 60);
        let mut w = RateWindow::new();
        let d = check(&p, &mut w, Operation::Sign, "127.0.0.1", Timestamp::from_secs(5_000)).unwrap_err();
        assert_eq!(d.reason, DenyReason::RateLimit);
    }

    #[test]
    fn validity_window() {
        let p = policy(10, 60);
        let mut w = RateWindow::new();
        for t in [Timestamp::from_secs(999), Timestamp::from_secs(100_001)] {
            assert_eq!(check(&p, &mut w, Operation::Sign, "127.0.0.1", t).unwrap_err().reason, DenyReason::PolicyValidity);
        }
        assert!(check(&p, &mut w, Operation::Sign, "127.0.0.1", Timestamp::from_secs(100_000)).is_ok());
    }

    #[test]
    fn op_permission() {
        let mut p = policy(10, 60);
        p.allowed_ops = [Operation::Sign].into();
        let mut w = RateWindow::new();
        let d = check(&p, &mut w, Operation::Authenticate, "127.0.0.1", Timestamp::from_secs(5_000)).unwrap_err();
        assert_eq!(d.reason, DenyReason::OpPermission);
    }

    #[test]
    fn cidr_scope() {
        let mut p = policy(10, 60);
        let mut w = RateWindow::new();
        let now = Timestamp::from_secs(5_000);
        assert!(check(&p, &mut w, Operation::Sign, "10.1.2.3", now).is_ok());
        p.cidr_allowlist = vec!["192.168.0.0/16".parse().unwrap()];
        assert_eq!(check(&p, &mut w, Operation::Sign, "10.1.2.3", now).unwrap_err().reason, DenyReason::CidrScope);
        assert!(check(&p, &mut w, Operation::Sign, "192.168.7.1", now).is_ok());
        assert!(check(&p, &mut w, Operation::Sign, "::ffff:192.168.7.1", now).is_ok());
    }

    #[test]
    fn measurement_must_be_allowlisted() {
        let mut p = policy(10, 60);
        p.measurement_allowlist.clear();
        let mut w = RateWindow::new();
        let d = check(&p, &mut w, Operation::Sign, "127.0.0.1", Timestamp::from_secs(5_000)).unwrap_err();
        assert_eq!(d.reason, DenyReason::MeasurementMatch);
    }

    #[test]
    fn validation() {
        let mut p = policy(10, 60);
        assert!(p.validate().is_ok());
        p.validity.not_after = p.validity.not_before;
        assert!(p.validate().is_err());
        let mut p = policy(10, 60);
        p.allowed_ops.clear();
        assert!(p.validate().is_err());
    }

    proptest! {
        // A denied request never spends budget, and admissions within any
        // window never exceed n.
        #[test]
        fn budget_is_exact(n in 0u32..12, window in 1u64..30,
                           steps in prop::collection::vec((0u64..4_000, any::<bool>()), 1..200)) {
            let mut p = policy(n, window);
            p.allowed_ops = [Operation::Sign].into();
            let mut w = RateWindow::new();
            let mut now = Timestamp::from_secs(2_000);
            let mut admitted: Vec<Timestamp> = vec![];
            for (dt, wrong_op) in steps {
                now = now.plus_millis(dt);
                let before = w.in_window(now, window * 1000);
                let op = if wrong_op { Operation::Authenticate } else { Operation::Sign };
                match check(&p, &mut w, op, "127.0.0.1", now) {
                    Ok(()) => admitted.push(now),
                    Err(_) => prop_assert_eq!(w.in_window(now, window * 1000), before),
                }
                let recent = admitted.iter().filter(|t| t.as_millis() + window * 1000 > now.as_millis()).count();
                prop_assert!(recent <= n as usize);
            }
        }
    }
}
