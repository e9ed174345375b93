//! Property checkers. Each is a pure function of a trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use aegis_core::node::InputSource;
use aegis_core::{ConsensusId, Hash, NodeId, Step};
use serde::{Deserialize, Serialize};

use crate::trace::{CertInfo, EntryKindTag, Event, MonitorKind, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Agreement,
    Validity,
    Progress,
    Penalty,
    ResetQuiescence,
    CheckpointDeadline,
    ContractTiming,
    Monitors,
}

impl Property {
    pub const ALL: [Property; 8] = [
        Property::Agreement,
        Property::Validity,
        Property::Progress,
        Property::Penalty,
        Property::ResetQuiescence,
        Property::CheckpointDeadline,
        Property::ContractTiming,
        Property::Monitors,
    ];

    /// Properties that must hold on every run within the fault threshold.
    pub const SAFETY: [Property; 4] = [
        Property::Agreement,
        Property::Penalty,
        Property::ContractTiming,
        Property::Monitors,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Property::Agreement => "agreement",
            Property::Validity => "validity",
            Property::Progress => "progress",
            Property::Penalty => "penalty",
            Property::ResetQuiescence => "reset_quiescence",
            Property::CheckpointDeadline => "checkpoint_deadline",
            Property::ContractTiming => "contract_timing",
            Property::Monitors => "monitors",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Property {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Property::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown property {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    /// The run is too short to decide an eventual property.
    Inconclusive,
    /// The property's precondition does not hold for this run.
    NotApplicable,
    /// Safety was violated by nodes whose stake was already withdrawn,
    /// which the model excludes.
    ModelViolation,
}

/// One location in a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub t: Step,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<Hash>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub property: Property,
    pub outcome: Outcome,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub witness: Vec<Point>,
}

impl Verdict {
    fn pass(property: Property, detail: impl Into<String>) -> Self {
        Verdict {
            property,
            outcome: Outcome::Pass,
            detail: detail.into(),
            witness: Vec::new(),
        }
    }

    fn with(
        property: Property,
        outcome: Outcome,
        detail: impl Into<String>,
        witness: Vec<Point>,
    ) -> Self {
        Verdict {
            property,
            outcome,
            detail: detail.into(),
            witness,
        }
    }

    pub fn is_pass(&self) -> bool {
        self.outcome == Outcome::Pass
    }

    /// Pass, or not applicable to this run.
    pub fn is_ok(&self) -> bool {
        matches!(self.outcome, Outcome::Pass | Outcome::NotApplicable)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?} ({})", self.property, self.outcome, self.detail)
    }
}

pub fn check(trace: &Trace, p: Property) -> Verdict {
    match p {
        Property::Agreement => check_agreement(trace),
        Property::Validity => check_validity(trace),
        Property::Progress => check_progress(trace),
        Property::Penalty => check_penalty(trace),
        Property::ResetQuiescence => check_reset_quiescence(trace),
        Property::CheckpointDeadline => check_checkpoint_deadline(trace),
        Property::ContractTiming => check_contract_timing(trace),
        Property::Monitors => check_monitors(trace),
    }
}

/// First conflicting pair of correct logs, if any, and the lowest
/// conflicting position.
fn first_conflict(trace: &Trace) -> Option<(Point, Point)> {
    let s = trace.schedule();
    let mut first: BTreeMap<u64, Point> = BTreeMap::new();
    let mut best: Option<(Point, Point)> = None;
    for l in trace.logs() {
        if !s.is_correct_at(l.node, l.t) {
            continue;
        }
        let here = Point {
            t: l.t,
            node: Some(l.node),
            pos: Some(l.pos),
            block: Some(*l.block),
        };
        match first.get(&l.pos) {
            None => {
                first.insert(l.pos, here);
            }
            Some(p) if p.block != here.block => {
                let lower = best.as_ref().is_none_or(|(a, _)| l.pos < a.pos.unwrap());
                if lower {
                    best = Some((p.clone(), here));
                }
            }
            Some(_) => {}
        }
    }
    best
}

pub fn check_agreement(trace: &Trace) -> Verdict {
    match first_conflict(trace) {
        None => Verdict::pass(
            Property::Agreement,
            "no two correct nodes logged different blocks at one position",
        ),
        Some((a, b)) => Verdict::with(
            Property::Agreement,
            Outcome::Fail,
            format!("position {} holds two blocks", a.pos.unwrap()),
            vec![a, b],
        ),
    }
}

pub fn check_validity(trace: &Trace) -> Verdict {
    let s = trace.schedule();
    if !s.byzantine.is_empty() || s.node.inputs != InputSource::Uniform {
        return Verdict::with(
            Property::Validity,
            Outcome::NotApplicable,
            "requires all-correct nodes with uniform inputs",
            Vec::new(),
        );
    }
    for l in trace.logs() {
        let want = format!("v:{}", l.pos);
        if l.payload != want {
            return Verdict::with(
                Property::Validity,
                Outcome::Fail,
                format!(
                    "position {} logged payload {:?}, input {:?}",
                    l.pos, l.payload, want
                ),
                vec![Point {
                    t: l.t,
                    node: Some(l.node),
                    pos: Some(l.pos),
                    block: Some(*l.block),
                }],
            );
        }
    }
    Verdict::pass(
        Property::Validity,
        "every logged payload equals its position's input",
    )
}

/// Step after which the progress rate is measured: one Δa for a stale
/// committee to expire and one more for the reset committee's first cycle.
pub fn stabilization(trace: &Trace) -> Step {
    let p = &trace.schedule().params;
    p.t_gst + 2 * p.delta_active
}

pub fn check_progress(trace: &Trace) -> Verdict {
    let s = trace.schedule();
    let p = &s.params;
    let w = p.delta_consensus + p.delta_prop;
    let horizon = trace.horizon();
    let base = stabilization(trace);
    let mut times: BTreeMap<NodeId, Vec<Step>> = BTreeMap::new();
    for l in trace.logs() {
        times.entry(l.node).or_default().push(l.t);
    }
    let mut checked = 0;
    for n in s.nodes.iter().filter(|n| s.is_always_correct(n.id)) {
        let start = base.max(n.join + 2 * p.delta_active);
        if horizon < start + 2 * w {
            return Verdict::with(
                Property::Progress,
                Outcome::Inconclusive,
                format!(
                    "horizon {horizon} ends before {} for {}",
                    start + 2 * w,
                    n.id
                ),
                Vec::new(),
            );
        }
        let ts: Vec<Step> = times
            .get(&n.id)
            .map(|v| {
                v.iter()
                    .copied()
                    .filter(|t| (start..horizon).contains(t))
                    .collect()
            })
            .unwrap_or_default();
        // every window [a, a + w) with start ≤ a ≤ horizon − w holds a log
        let mut prev = start;
        let mut covered_from = start;
        let mut fail: Option<(Step, Step)> = None;
        for &t in ts.iter() {
            if t >= covered_from + w {
                fail = Some((prev, t));
                break;
            }
            prev = t;
            covered_from = t + 1;
        }
        if fail.is_none() && horizon >= covered_from + w {
            fail = Some((prev, horizon));
        }
        if let Some((a, b)) = fail {
            return Verdict::with(
                Property::Progress,
                Outcome::Fail,
                format!(
                    "{} logged nothing in ({a}, {b}), longer than {w} steps",
                    n.id
                ),
                vec![
                    Point {
                        t: a,
                        node: Some(n.id),
                        pos: None,
                        block: None,
                    },
                    Point {
                        t: b,
                        node: Some(n.id),
                        pos: None,
                        block: None,
                    },
                ],
            );
        }
        checked += 1;
    }
    Verdict::pass(
        Property::Progress,
        format!("{checked} nodes log at least one block per {w} steps from step {base}"),
    )
}

/// Same-instance certificates for different values seen in correct logs.
fn conflicting_certs(trace: &Trace) -> Vec<(Step, CertInfo, Hash, CertInfo, Hash)> {
    let s = trace.schedule();
    let mut by_instance: BTreeMap<ConsensusId, BTreeMap<Hash, (Step, CertInfo)>> = BTreeMap::new();
    for l in trace.logs() {
        if !s.is_correct_at(l.node, l.t) {
            continue;
        }
        if let Some(c) = l.cert {
            by_instance
                .entry(c.instance)
                .or_default()
                .entry(*l.block)
                .or_insert((l.t, c.clone()));
        }
    }
    let mut out = Vec::new();
    for m in by_instance.values() {
        let v: Vec<(&Hash, &(Step, CertInfo))> = m.iter().collect();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                let ((ha, (ta, ca)), (hb, (tb, cb))) = (v[i], v[j]);
                out.push(((*ta).max(*tb), ca.clone(), *ha, cb.clone(), *hb));
            }
        }
    }
    out
}

pub fn check_penalty(trace: &Trace) -> Verdict {
    let s = trace.schedule();
    let da = s.params.delta_active;
    let conflicts = conflicting_certs(trace);
    if conflicts.is_empty() {
        return Verdict::pass(Property::Penalty, "no safety violation");
    }
    let Some((_, stake)) = trace.final_state() else {
        return Verdict::with(
            Property::Penalty,
            Outcome::Inconclusive,
            "trace has no summary",
            Vec::new(),
        );
    };
    for (t, a, ha, b, hb) in conflicts {
        let signers: BTreeSet<NodeId> = a.signers.intersection(&b.signers).copied().collect();
        let point = |h: Hash| Point {
            t,
            node: None,
            pos: None,
            block: Some(h),
        };
        let withdrawn = |n: &NodeId| {
            stake
                .get(n)
                .and_then(|r| r.withdrawn_at(da))
                .is_some_and(|w| w <= t)
        };
        if !signers.is_empty() && signers.iter().all(withdrawn) {
            return Verdict::with(
                Property::Penalty,
                Outcome::ModelViolation,
                "conflicting certificates signed only by withdrawn nodes",
                vec![point(ha), point(hb)],
            );
        }
        let punished = signers.iter().any(|n| {
            stake
                .get(n)
                .is_some_and(|r| match (r.slashed_at, r.withdrawn_at(da)) {
                    (Some(ts), Some(w)) => ts < w,
                    (Some(_), None) => true,
                    _ => false,
                })
        });
        if !punished {
            return Verdict::with(
                Property::Penalty,
                Outcome::Fail,
                format!(
                    "no signer of both certificates was slashed before withdrawal ({signers:?})"
                ),
                vec![point(ha), point(hb)],
            );
        }
    }
    Verdict::pass(Property::Penalty, "every violation led to a timely slash")
}

pub fn check_reset_quiescence(trace: &Trace) -> Verdict {
    let da = trace.schedule().params.delta_active;
    let accepted = trace.accepted_entries();
    let point = |t: Step| Point {
        t,
        node: None,
        pos: None,
        block: None,
    };
    for w in accepted.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        if next.1 == EntryKindTag::Reset && next.0 < prev.0 + da {
            return Verdict::with(
                Property::ResetQuiescence,
                Outcome::Fail,
                format!(
                    "reset at {} only {} steps after the previous entry",
                    next.0,
                    next.0 - prev.0
                ),
                vec![point(prev.0), point(next.0)],
            );
        }
    }
    let mut last: Option<(Step, u64)> = None;
    for (t, kind, h, _) in &accepted {
        if *kind != EntryKindTag::Checkpoint {
            continue;
        }
        let h = h.unwrap();
        if let Some((lt, lh)) = last {
            if h <= lh {
                return Verdict::with(
                    Property::ResetQuiescence,
                    Outcome::Fail,
                    format!("checkpoint height {h} at {t} after height {lh}"),
                    vec![point(lt), point(*t)],
                );
            }
        }
        last = Some((*t, h));
    }
    Verdict::pass(
        Property::ResetQuiescence,
        "resets follow Δa of quiet; checkpoint heights increase",
    )
}

/// A correct node logging a block at height k while the block's committee is
/// active, with agreement up to k − 1, implies a checkpoint of height ≥ k by
/// t + Δa and no reset between t and that checkpoint.
pub fn check_checkpoint_deadline(trace: &Trace) -> Verdict {
    let s = trace.schedule();
    let da = s.params.delta_active;
    let horizon = trace.horizon();
    let limit = first_conflict(trace)
        .map(|(a, _)| a.pos.unwrap())
        .unwrap_or(u64::MAX);
    let accepted = trace.accepted_entries();
    let mut checked = 0u64;
    let mut seen: BTreeSet<(u64, Step)> = BTreeSet::new();
    for l in trace.logs() {
        let Some(tc) = l.committee_time else { continue };
        if !s.is_correct_at(l.node, l.t) || l.t >= tc + da || l.pos > limit {
            continue;
        }
        // earliest observation per height is the binding one
        if !seen.insert((l.pos, l.t)) {
            continue;
        }
        if l.t + da >= horizon {
            continue;
        }
        checked += 1;
        let ckpt = accepted
            .iter()
            .find(|(_, k, h, _)| *k == EntryKindTag::Checkpoint && h.is_some_and(|h| h >= l.pos))
            .map(|e| e.0);
        let here = Point {
            t: l.t,
            node: Some(l.node),
            pos: Some(l.pos),
            block: Some(*l.block),
        };
        let Some(c) = ckpt.filter(|c| *c <= l.t + da) else {
            return Verdict::with(
                Property::CheckpointDeadline,
                Outcome::Fail,
                format!(
                    "height {} logged at {} not checkpointed by {}",
                    l.pos,
                    l.t,
                    l.t + da
                ),
                vec![here],
            );
        };
        if let Some(r) = accepted
            .iter()
            .find(|(t, k, _, _)| *k == EntryKindTag::Reset && *t > l.t && *t <= c)
        {
            return Verdict::with(
                Property::CheckpointDeadline,
                Outcome::Fail,
                format!(
                    "reset at {} between log at {} and checkpoint at {c}",
                    r.0, l.t
                ),
                vec![here],
            );
        }
    }
    Verdict::pass(
        Property::CheckpointDeadline,
        format!("{checked} observations checkpointed within Δa"),
    )
}

pub fn check_contract_timing(trace: &Trace) -> Verdict {
    let a = check_reset_quiescence(trace);
    if !a.is_pass() {
        return Verdict {
            property: Property::ContractTiming,
            ..a
        };
    }
    let c = check_checkpoint_deadline(trace);
    if !c.is_pass() {
        return Verdict {
            property: Property::ContractTiming,
            ..c
        };
    }
    Verdict::pass(
        Property::ContractTiming,
        format!("{}; {}", a.detail, c.detail),
    )
}

/// Correct nodes never double-vote and never appear in certificates
/// without having broadcast the precommit.
pub fn check_monitors(trace: &Trace) -> Verdict {
    let s = trace.schedule();
    for e in &trace.events {
        if let Event::Monitor {
            t,
            node,
            kind,
            round,
            ..
        } = e
        {
            if !s.is_correct_at(*node, *t) {
                continue;
            }
            let what = match kind {
                MonitorKind::DoubleVote => "signed two values in one round",
                MonitorKind::UnsentSignature => "appears in a certificate it never signed",
            };
            return Verdict::with(
                Property::Monitors,
                Outcome::Fail,
                format!("correct node {node} {what} (round {round})"),
                vec![Point {
                    t: *t,
                    node: Some(*node),
                    pos: None,
                    block: None,
                }],
            );
        }
    }
    Verdict::pass(
        Property::Monitors,
        "no correct node double-voted or was impersonated",
    )
}

/// Nodes that signed two different values in one (instance, round, kind),
/// according to the network monitor.
pub fn double_signers(trace: &Trace) -> BTreeSet<NodeId> {
    trace
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Monitor {
                node,
                kind: MonitorKind::DoubleVote,
                ..
            } => Some(*node),
            _ => None,
        })
        .collect()
}

/// All verdicts for the safety properties plus validity.
pub fn safety_verdicts(trace: &Trace) -> Vec<Verdict> {
    let mut v: Vec<Verdict> = Property::SAFETY.iter().map(|p| check(trace, *p)).collect();
    v.push(check_validity(trace));
    v
}
