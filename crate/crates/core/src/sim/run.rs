//! Driving one scenario end to end.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::crypto::{self, KeyRole, SymKey};
use crate::error::{Error, Result};
use crate::protocol::{
    Counters, KeyServer, Label, MemberState, MembershipEvent, Meter, Op, ProtocolId, RekeyContext, RekeyStep,
};
use crate::schemes;
use crate::sim::layout::leaver_layout;
use crate::sim::scenario::{Scenario, ScriptEvent};
use crate::tree::{MemberId, NodeCode, NodeId, Promotion, TreeShape};

const STREAM_SERVER: u64 = 0;
const STREAM_LAYOUT: u64 = 1;
const STREAM_PROBE: u64 = 2;

/// Independent, reproducible randomness for one purpose of one scenario.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProbeResult {
    /// Current members that opened the probe.
    pub opened: usize,
    /// Departed members that could not.
    pub refused: usize,
}

#[derive(Debug, Clone)]
pub struct EventRecord {
    pub event: MembershipEvent,
    pub steps: Vec<RekeyStep>,
    pub counters: Counters,
    pub cover: Vec<NodeId>,
    pub cover_labels: Vec<String>,
    pub promotions: Vec<Promotion>,
    /// Members whose leaf moved up because of a promotion.
    pub promoted_members: Vec<MemberId>,
    /// Group key at the end of the event: epoch `seq`.
    pub group_key: SymKey,
    pub shape: TreeShape,
    pub render: String,
    pub probe: ProbeResult,
}

#[derive(Debug, Clone, Default)]
pub struct MemberHistory {
    /// Event that added the member; `None` for setup members.
    pub joined_at: Option<u64>,
    pub left_at: Option<u64>,
    /// Every key the member's state held at any point.
    pub keys: BTreeSet<(Label, SymKey)>,
    pub codes: BTreeSet<(NodeId, NodeCode)>,
}

#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub scenario: Scenario,
    pub initial_group_key: SymKey,
    pub initial_shape: TreeShape,
    pub initial_render: String,
    pub events: Vec<EventRecord>,
    pub members: BTreeMap<MemberId, MemberHistory>,
    /// Every node code that existed at any point.
    pub codes: BTreeSet<(NodeId, NodeCode)>,
    /// `(parent, left, right)` of every binary node that ever existed.
    pub triples: BTreeSet<(NodeId, NodeId, NodeId)>,
    pub totals: Counters,
}

impl TraceRecord {
    /// Group key of every epoch; index 0 is the setup key.
    pub fn epoch_keys(&self) -> Vec<SymKey> {
        std::iter::once(self.initial_group_key)
            .chain(self.events.iter().map(|e| e.group_key))
            .collect()
    }

    pub fn steps(&self) -> impl Iterator<Item = &RekeyStep> {
        self.events.iter().flat_map(|e| e.steps.iter())
    }

    /// One line per event: `seq,op,ids,|cover|,keygen,encrypt,unicast,multicast,payload_keys,member_derivations,notices,keygen_dedup`.
    pub fn log_lines(&self) -> Vec<String> {
        self.events
            .iter()
            .map(|e| {
                let ids: Vec<_> = e.event.ids().iter().map(|m| m.to_string()).collect();
                let c = &e.counters;
                format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    e.event.seq,
                    e.event.op(),
                    ids.join(" "),
                    e.cover.len(),
                    c.keygen,
                    c.encrypt,
                    c.unicast,
                    c.multicast,
                    c.payload_keys,
                    c.member_derivations,
                    c.notices,
                    c.keygen_dedup
                )
            })
            .collect()
    }

    /// Human-readable trace: setup tree, then each event with its cover,
    /// promotions, counters and resulting tree.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.scenario.to_script().lines().next().unwrap_or(""));
        let _ = writeln!(s, "setup group_key={}", self.initial_group_key.fingerprint());
        s.push_str(&self.initial_render);
        for e in &self.events {
            let ids: Vec<_> = e.event.ids().iter().map(|m| m.to_string()).collect();
            let _ = writeln!(s, "event {} {} {}", e.event.seq, e.event.op(), ids.join(","));
            if !e.cover.is_empty() {
                let _ = writeln!(s, "  cover {{{}}}", e.cover_labels.join(","));
            }
            if !e.promoted_members.is_empty() {
                let p: Vec<_> = e.promoted_members.iter().map(|m| m.to_string()).collect();
                let _ = writeln!(s, "  promoted {}", p.join(","));
            }
            let c = &e.counters;
            let _ = writeln!(
                s,
                "  keygen={} encrypt={} unicast={} multicast={} msg_size_keys={} member_derivations={} keygen_dedup={}",
                c.keygen, c.encrypt, c.unicast, c.multicast, c.payload_keys, c.member_derivations, c.keygen_dedup
            );
            let _ = writeln!(
                s,
                "  group_key={} probe opened={} refused={}",
                e.group_key.fingerprint(),
                e.probe.opened,
                e.probe.refused
            );
            s.push_str(&e.render);
        }
        s
    }

    /// SHA-256 over the summary and every ciphertext, hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.summary().as_bytes());
        for step in self.steps() {
            for p in step.payloads() {
                h.update(p.ciphertext);
            }
        }
        hex::encode(h.finalize())
    }
}

struct Runner {
    server: Box<dyn KeyServer>,
    members: BTreeMap<MemberId, Box<dyn MemberState>>,
    departed: BTreeMap<MemberId, Box<dyn MemberState>>,
    /// Every key any departed member holds, deduplicated.
    departed_keys: HashSet<SymKey>,
    history: BTreeMap<MemberId, MemberHistory>,
    codes: BTreeSet<(NodeId, NodeCode)>,
}

impl Runner {
    fn absorb(&mut self, id: MemberId) {
        let (Some(m), Some(h)) = (self.members.get(&id), self.history.get_mut(&id)) else {
            return;
        };
        let k = m.knowledge();
        h.keys.extend(k.keys);
        h.codes.extend(k.codes);
    }

    fn note_codes(&mut self) {
        self.codes.extend(self.server.codes());
    }

    fn render(&mut self) -> String {
        let ids = self.server.tree().preorder();
        let keys: BTreeMap<NodeId, SymKey> = ids
            .into_iter()
            .filter_map(|id| self.server.node_key(id).map(|k| (id, k)))
            .collect();
        self.server.tree().render_with(|id| keys.get(&id).copied())
    }

    /// Delivers one step to everyone; returns the derivations members reported.
    fn deliver(&mut self, seq: u64, step: &RekeyStep, protocol: ProtocolId) -> Result<u64> {
        for d in &step.departed {
            if let Some(m) = self.members.remove(d) {
                self.departed_keys.extend(m.group_key());
                self.departed.insert(*d, m);
            }
            if let Some(h) = self.history.get_mut(d) {
                h.left_at = Some(seq);
                self.departed_keys.extend(h.keys.iter().map(|(_, k)| *k));
            }
        }
        for b in &step.bootstraps {
            let m = schemes::new_member(protocol, b, None)?;
            self.members.insert(b.member, m);
            self.history.insert(
                b.member,
                MemberHistory {
                    joined_at: Some(seq),
                    ..Default::default()
                },
            );
        }
        let mut derivations = 0;
        let ids: Vec<MemberId> = self.members.keys().copied().collect();
        for id in ids {
            let report = self
                .members
                .get_mut(&id)
                .expect("listed")
                .apply_step(step)
                .map_err(|e| Error::Disagreement {
                    seq,
                    detail: format!("{id} failed to apply a step: {e}"),
                })?;
            derivations += report.derivations;
            self.absorb(id);
        }
        Ok(derivations)
    }

    fn check_agreement(&mut self, seq: u64) -> Result<()> {
        let gk = self.server.group_key();
        if let Err(detail) = self.server.check_invariants() {
            return Err(Error::Disagreement { seq, detail });
        }
        let server_members: BTreeSet<MemberId> = self.server.members().into_iter().collect();
        let ours: BTreeSet<MemberId> = self.members.keys().copied().collect();
        if server_members != ours {
            return Err(Error::Disagreement {
                seq,
                detail: format!("membership differs: server {server_members:?}, sim {ours:?}"),
            });
        }
        for (id, m) in &self.members {
            if m.group_key() != Some(gk) {
                return Err(Error::Disagreement {
                    seq,
                    detail: format!("{id} holds a stale or missing group key"),
                });
            }
            for (node, k) in m.path_keys() {
                match self.server.node_key(node) {
                    Some(s) if s == k => {}
                    other => {
                        return Err(Error::Disagreement {
                            seq,
                            detail: format!(
                                "{id} key for {node} is {} but the server has {}",
                                k.fingerprint(),
                                other.map(|k| k.fingerprint()).unwrap_or_else(|| "none".into())
                            ),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    /// Wraps a fresh key under the group key: every current member must open
    /// it, and no key held by any departed member may.
    fn probe<R: RngCore>(&self, seq: u64, rng: &mut R) -> Result<ProbeResult> {
        let probe = crypto::random_key(rng, KeyRole::Group);
        let ct = crypto::wrap_bytes(&self.server.group_key(), &probe);
        let mut result = ProbeResult::default();
        for (id, m) in &self.members {
            let ok = m
                .group_key()
                .and_then(|k| crypto::unwrap_bytes(&k, &ct, KeyRole::Group).ok())
                == Some(probe);
            if !ok {
                return Err(Error::ProbeFailure {
                    seq,
                    detail: format!("current member {id} cannot open the probe"),
                });
            }
            result.opened += 1;
        }
        if let Some(k) = self
            .departed_keys
            .iter()
            .find(|k| crypto::unwrap_bytes(k, &ct, KeyRole::Group).is_ok())
        {
            let id = self
                .departed
                .keys()
                .find(|id| self.history[*id].keys.iter().any(|(_, h)| h == k))
                .copied()
                .unwrap_or(MemberId(0));
            return Err(Error::ProbeFailure {
                seq,
                detail: format!("departed member {id} opens the probe"),
            });
        }
        result.refused = self.departed.len();
        Ok(result)
    }
}

/// Runs `scenario`, checking agreement, tree invariants and the probe after
/// every event. Any failure aborts the run.
pub fn run(scenario: &Scenario) -> Result<TraceRecord> {
    let protocol = scenario.protocol;
    let mut server_rng = stream(scenario.seed, STREAM_SERVER);
    let mut layout_rng = stream(scenario.seed, STREAM_LAYOUT);
    let mut probe_rng = stream(scenario.seed, STREAM_PROBE);

    let initial: Vec<MemberId> = (1..=scenario.n0 as u32).map(MemberId).collect();
    let mut next_id = scenario.n0 as u32 + 1;
    let mut server = schemes::new_server(protocol, &initial, scenario.root_code.clone(), &mut server_rng)?;
    let initial_shape = server.shape();
    let bootstraps = server.initial_bootstraps();
    let mut runner = Runner {
        server,
        members: BTreeMap::new(),
        departed: BTreeMap::new(),
        departed_keys: HashSet::new(),
        history: BTreeMap::new(),
        codes: BTreeSet::new(),
    };
    for b in &bootstraps {
        let m = schemes::new_member(protocol, b, Some(&initial_shape))?;
        runner.members.insert(b.member, m);
        runner.history.insert(b.member, MemberHistory::default());
        runner.absorb(b.member);
    }
    runner.note_codes();
    runner.check_agreement(0)?;
    let initial_group_key = runner.server.group_key();
    let initial_render = runner.render();

    let mut triples: BTreeSet<_> = initial_shape.sibling_triples().collect();
    let mut meter = Meter::new();
    let mut events = Vec::with_capacity(scenario.events.len());
    for (i, script) in scenario.events.iter().enumerate() {
        let seq = i as u64 + 1;
        let event = match script {
            ScriptEvent::Join(m) => {
                let ids = (next_id..next_id + *m as u32).map(MemberId).collect();
                next_id += *m as u32;
                MembershipEvent::join(seq, ids)
            }
            ScriptEvent::Leave { m, layout } => {
                let ids = leaver_layout(runner.server.tree(), *m, *layout, &mut layout_rng)?;
                MembershipEvent::leave(seq, ids)
            }
            ScriptEvent::LeaveIds(ids) => MembershipEvent::leave(seq, ids.clone()),
        };
        event.validate(runner.server.tree())?;
        let pre_leaves: BTreeMap<MemberId, usize> = runner
            .server
            .tree()
            .members()
            .map(|m| (m, runner.server.tree().depth(runner.server.tree().leaf_of(m).expect("member"))))
            .collect();

        // Only OFT members need the structure to follow along.
        let mut ctx =
            RekeyContext::new(&mut server_rng, &mut meter, seq).with_shapes(protocol == ProtocolId::Oft);
        let outcome = runner.server.handle(&event, &mut ctx)?;
        let counters = ctx.finish();

        let mut derivations = 0;
        let mut steps = outcome.steps;
        for step in &mut steps {
            derivations += runner.deliver(seq, step, protocol)?;
            if let Some(shape) = step.shape.take() {
                triples.extend(shape.sibling_triples());
            }
        }
        triples.extend(runner.server.shape().sibling_triples());
        runner.note_codes();
        runner.check_agreement(seq)?;
        if derivations != counters.member_derivations {
            return Err(Error::Disagreement {
                seq,
                detail: format!(
                    "members derived {derivations} keys, meter says {}",
                    counters.member_derivations
                ),
            });
        }
        let probe = runner.probe(seq, &mut probe_rng)?;

        let promoted_members = if event.op() == Op::Leave {
            let tree = runner.server.tree();
            pre_leaves
                .iter()
                .filter(|(m, d)| tree.leaf_of(**m).is_some_and(|leaf| tree.depth(leaf) < **d))
                .map(|(m, _)| *m)
                .collect()
        } else {
            Vec::new()
        };
        events.push(EventRecord {
            event,
            steps,
            counters,
            cover: outcome.cover,
            cover_labels: outcome.cover_labels,
            promotions: outcome.promotions,
            promoted_members,
            group_key: runner.server.group_key(),
            shape: runner.server.shape(),
            render: runner.render(),
            probe,
        });
    }

    Ok(TraceRecord {
        scenario: scenario.clone(),
        initial_group_key,
        initial_shape,
        initial_render,
        events,
        members: runner.history,
        codes: runner.codes,
        triples,
        totals: meter.totals(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::Layout;

    fn churn(protocol: ProtocolId) -> Scenario {
        Scenario::new(protocol, 9, 5)
            .with(ScriptEvent::Join(4))
            .with(ScriptEvent::Leave { m: 3, layout: Layout::WorstSpread })
            .with(ScriptEvent::Leave { m: 2, layout: Layout::Random })
            .with(ScriptEvent::Join(1))
            .with(ScriptEvent::Leave { m: 2, layout: Layout::BestHalf })
    }

    #[test]
    fn every_protocol_survives_churn() {
        for p in ProtocolId::ALL {
            let t = run(&churn(p)).unwrap_or_else(|e| panic!("{p}: {e}"));
            assert_eq!(t.events.len(), 5);
            assert_eq!(t.events.last().unwrap().probe, ProbeResult { opened: 7, refused: 7 });
            assert_eq!(t.epoch_keys().len(), 6);
        }
    }

    #[test]
    fn runs_are_replayable() {
        for p in ProtocolId::ALL {
            let a = run(&churn(p)).unwrap();
            let b = run(&churn(p)).unwrap();
            assert_eq!(a.summary(), b.summary());
            assert_eq!(a.digest(), b.digest());
        }
        let other = Scenario { seed: 6, ..churn(ProtocolId::Ckcs) };
        assert_ne!(run(&other).unwrap().digest(), run(&churn(ProtocolId::Ckcs)).unwrap().digest());
    }

    #[test]
    fn history_tracks_membership() {
        let t = run(&churn(ProtocolId::Lkh)).unwrap();
        assert_eq!(t.members.len(), 14);
        assert_eq!(t.members[&MemberId(10)].joined_at, Some(1));
        assert!(t.members[&MemberId(1)].joined_at.is_none());
        assert_eq!(t.members.values().filter(|h| h.left_at.is_some()).count(), 7);
        assert!(t.members.values().all(|h| !h.keys.is_empty()));
    }

    #[test]
    fn unknown_leaver_is_rejected() {
        let s = Scenario::new(ProtocolId::Ckcs, 4, 1).with(ScriptEvent::LeaveIds(vec![MemberId(9)]));
        assert!(run(&s).is_err());
    }
}
