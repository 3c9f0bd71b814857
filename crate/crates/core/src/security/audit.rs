//! Forward and backward secrecy verdicts over simulated traces.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use crate::crypto::SymKey;
use crate::exec::{self, Execution};
use crate::protocol::{Label, ProtocolId};
use crate::security::closure::{Closure, Transcript};
use crate::security::witness::Witness;
use crate::error::Result;
use crate::sim::{run, Scenario, TraceRecord};
use crate::tree::{MemberId, NodeCode, NodeId};

/// Whether node codes are secret (the scheme's assumption) or known to the
/// adversary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CodeMode {
    #[default]
    Secret,
    Public,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuditOptions {
    pub codes: CodeMode,
    /// Pool the knowledge of members leaving in the same event.
    pub collusion: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Secrecy {
    Forward,
    Backward,
}

impl fmt::Display for Secrecy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Secrecy::Forward => "forward",
            Secrecy::Backward => "backward",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Breach {
    /// Epoch whose group key was reached.
    pub epoch: usize,
    pub witness: Witness,
    /// The witness re-executed with real crypto and reproduced the key.
    pub replayed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Secure,
    Breach(Box<Breach>),
}

impl Verdict {
    pub fn is_secure(&self) -> bool {
        matches!(self, Verdict::Secure)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub members: Vec<MemberId>,
    pub kind: Secrecy,
    pub verdict: Verdict,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let who: Vec<_> = self.members.iter().map(|m| m.to_string()).collect();
        match &self.verdict {
            Verdict::Secure => write!(f, "{} {}: secure", self.kind, who.join("+")),
            Verdict::Breach(b) => {
                writeln!(
                    f,
                    "{} {}: BREACH of epoch {} (witness {})",
                    self.kind,
                    who.join("+"),
                    b.epoch,
                    if b.replayed { "replayed" } else { "NOT replayable" }
                )?;
                for l in b.witness.lines() {
                    writeln!(f, "  {l}")?;
                }
                Ok(())
            }
        }
    }
}

/// Adversary starting point: keys and codes some members ever held.
#[derive(Debug, Clone, Default)]
pub struct Adversary {
    pub keys: BTreeSet<(Label, SymKey)>,
    pub codes: BTreeSet<(NodeId, NodeCode)>,
}

impl Adversary {
    pub fn of(trace: &TraceRecord, members: &[MemberId]) -> Self {
        let mut a = Adversary::default();
        for m in members {
            if let Some(h) = trace.members.get(m) {
                a.keys.extend(h.keys.iter().copied());
                a.codes.extend(h.codes.iter().cloned());
            }
        }
        a
    }

    fn codes_for(&self, trace: &TraceRecord, mode: CodeMode) -> Vec<(NodeId, NodeCode)> {
        match mode {
            CodeMode::Secret => self.codes.iter().cloned().collect(),
            CodeMode::Public => trace.codes.iter().cloned().collect(),
        }
    }
}

/// Closes the adversary's knowledge and looks for any of `epochs`' group keys.
pub fn check(
    trace: &TraceRecord,
    transcript: &Transcript,
    adversary: &Adversary,
    epochs: impl IntoIterator<Item = usize>,
    mode: CodeMode,
) -> Verdict {
    let codes = adversary.codes_for(trace, mode);
    let closure = Closure::compute(adversary.keys.iter().copied(), &codes, transcript);
    let keys = trace.epoch_keys();
    for epoch in epochs {
        if let Some(i) = closure.find_bytes(&keys[epoch]) {
            let witness = Witness::extract(&closure, transcript, i);
            let held: HashSet<SymKey> = adversary.keys.iter().map(|(_, k)| *k).collect();
            let replayed = witness.replay(&held).map(|k| k == keys[epoch]).unwrap_or(false);
            return Verdict::Breach(Box::new(Breach {
                epoch,
                witness,
                replayed,
            }));
        }
    }
    Verdict::Secure
}

/// A departed member (with everything it ever held and the whole transcript)
/// must not reach any group key from its departure on.
pub fn check_forward_secrecy(trace: &TraceRecord, leaver: MemberId, mode: CodeMode) -> Verdict {
    let t = Transcript::of(trace);
    forward(trace, &t, &[leaver], mode)
}

/// A member that joined mid-trace must not reach any earlier group key.
pub fn check_backward_secrecy(trace: &TraceRecord, joiner: MemberId, mode: CodeMode) -> Verdict {
    let t = Transcript::of(trace);
    backward(trace, &t, joiner, mode)
}

fn forward(trace: &TraceRecord, t: &Transcript, who: &[MemberId], mode: CodeMode) -> Verdict {
    let left = who
        .iter()
        .filter_map(|m| trace.members.get(m).and_then(|h| h.left_at))
        .max();
    let Some(left) = left else {
        return Verdict::Secure;
    };
    check(trace, t, &Adversary::of(trace, who), left as usize..=trace.events.len(), mode)
}

fn backward(trace: &TraceRecord, t: &Transcript, joiner: MemberId, mode: CodeMode) -> Verdict {
    let Some(joined) = trace.members.get(&joiner).and_then(|h| h.joined_at) else {
        return Verdict::Secure;
    };
    check(trace, t, &Adversary::of(trace, &[joiner]), 0..joined as usize, mode)
}

/// Every forward and backward check the trace admits.
pub fn audit_trace(trace: &TraceRecord, opts: AuditOptions) -> Vec<Finding> {
    let t = Transcript::of(trace);
    let mut out = Vec::new();
    for (&m, h) in &trace.members {
        if h.left_at.is_some() {
            out.push(Finding {
                members: vec![m],
                kind: Secrecy::Forward,
                verdict: forward(trace, &t, &[m], opts.codes),
            });
        }
        if h.joined_at.is_some() {
            out.push(Finding {
                members: vec![m],
                kind: Secrecy::Backward,
                verdict: backward(trace, &t, m, opts.codes),
            });
        }
    }
    if opts.collusion {
        let mut by_event: BTreeMap<u64, Vec<MemberId>> = BTreeMap::new();
        for (&m, h) in &trace.members {
            if let Some(e) = h.left_at {
                by_event.entry(e).or_default().push(m);
            }
        }
        for group in by_event.into_values().filter(|g| g.len() > 1) {
            let verdict = forward(trace, &t, &group, opts.codes);
            out.push(Finding {
                members: group,
                kind: Secrecy::Forward,
                verdict,
            });
        }
    }
    out
}

/// Verdict counts over many traces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditSummary {
    pub traces: usize,
    pub checks: BTreeMap<(ProtocolId, Secrecy), usize>,
    pub breaches: BTreeMap<(ProtocolId, Secrecy), usize>,
    /// Breaches whose witness did not replay; always a bug.
    pub unreplayable: usize,
    /// First few breach reports, printable.
    pub examples: Vec<String>,
    pub first_witness: Option<Witness>,
}

impl AuditSummary {
    pub fn total_breaches(&self) -> usize {
        self.breaches.values().sum()
    }

    pub fn protocol_breaches(&self, p: ProtocolId) -> usize {
        self.breaches
            .iter()
            .filter(|((q, _), _)| *q == p)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in ProtocolId::ALL {
            for kind in [Secrecy::Forward, Secrecy::Backward] {
                let Some(&checks) = self.checks.get(&(p, kind)) else {
                    continue;
                };
                let breaches = self.breaches.get(&(p, kind)).copied().unwrap_or(0);
                let verdict = if breaches == 0 { "secure" } else { "BREACH" };
                out.push(format!("{p} {kind}: {verdict} ({checks} checks, {breaches} breaches)"));
            }
        }
        out
    }
}

impl AuditSummary {
    fn of_trace(p: ProtocolId, findings: Vec<Finding>) -> Self {
        let mut s = AuditSummary {
            traces: 1,
            ..Default::default()
        };
        for f in findings {
            *s.checks.entry((p, f.kind)).or_default() += 1;
            if let Verdict::Breach(b) = &f.verdict {
                *s.breaches.entry((p, f.kind)).or_default() += 1;
                if !b.replayed {
                    s.unreplayable += 1;
                }
                if s.examples.len() < 3 {
                    s.examples.push(format!("{p}: {f}"));
                }
                if s.first_witness.is_none() {
                    s.first_witness = Some(b.witness.clone());
                }
            }
        }
        s
    }

    fn merge(mut self, other: AuditSummary) -> Self {
        self.traces += other.traces;
        for (k, n) in other.checks {
            *self.checks.entry(k).or_default() += n;
        }
        for (k, n) in other.breaches {
            *self.breaches.entry(k).or_default() += n;
        }
        self.unreplayable += other.unreplayable;
        let room = 3usize.saturating_sub(self.examples.len());
        self.examples.extend(other.examples.into_iter().take(room));
        self.first_witness = self.first_witness.or(other.first_witness);
        self
    }
}

/// Audits each trace, possibly in parallel, and tallies the verdicts.
pub fn audit_many(traces: &[TraceRecord], opts: AuditOptions, exec: Execution) -> AuditSummary {
    exec::map(exec, traces, |t| AuditSummary::of_trace(t.scenario.protocol, audit_trace(t, opts)))
        .into_iter()
        .fold(AuditSummary::default(), AuditSummary::merge)
}

/// Runs and audits each scenario without keeping the traces.
pub fn audit_scenarios(scenarios: &[Scenario], opts: AuditOptions, exec: Execution) -> Result<AuditSummary> {
    exec::map(exec, scenarios, |s| {
        let t = run(s)?;
        Ok(AuditSummary::of_trace(s.protocol, audit_trace(&t, opts)))
    })
    .into_iter()
    .try_fold(AuditSummary::default(), |acc, s| s.map(|s| acc.merge(s)))
}
