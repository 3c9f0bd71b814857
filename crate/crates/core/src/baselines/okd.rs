//! One-way key derivation on a 3-ary tree, at the level of detail the
//! comparison needs: at join the path keys move to `derive(old)`, which
//! current members compute themselves after a public notice, and the joiner
//! receives its whole path by unicast; a node created by splitting a leaf
//! gets a fresh key, unicast to the split member. A leave refreshes the
//! affected path as in LKH. Outputs call this "paper-level OKD".

use rand::RngCore;

use crate::crypto::{self, KeyRole, SymKey};
use crate::error::Result;
use crate::protocol::{
    Bootstrap, Channel, EventKind, KeyServer, Label, MembershipEvent, Notice, ProtocolId, RekeyContext,
    RekeyOutcome, RekeyStep,
};
use crate::tree::{Arity, InsertionPoint, KeyTree, MemberId, NodeId};

use super::{key, path_bootstrap, random_keys, rekeying_leave};

#[derive(Debug, Clone)]
pub struct OkdServer {
    tree: KeyTree,
}

impl OkdServer {
    pub fn new<R: RngCore + ?Sized>(members: &[MemberId], rng: &mut R) -> Result<Self> {
        let mut tree = KeyTree::build_balanced(members, Arity::Ternary, None, rng)?;
        random_keys(&mut tree, rng);
        Ok(Self { tree })
    }

    fn join_one(&mut self, member: MemberId, ctx: &mut RekeyContext<'_>) -> Result<RekeyStep> {
        let at = self.tree.insertion_point();
        let ins = self.tree.insert_member(at, member, None)?;
        let j = ins.leaf;
        let kj = ctx.fresh_key(j, KeyRole::Individual);
        self.tree.set_key(j, kj);

        // A split node gets a fresh key, sent to the split member under its
        // leaf key. Deriving it from that leaf key would hand a former
        // sibling of the same leaf the value again on the next split.
        let mut step = RekeyStep::new(self.tree.root());
        if let (InsertionPoint::Split(leaf), Some(n)) = (at, ins.split_parent) {
            let kn = ctx.fresh_key(n, KeyRole::Middle);
            self.tree.set_key(n, kn);
            let owner = self.tree.node(leaf).member.expect("split node is a leaf");
            let payload = ctx.wrap(Label::Node(leaf), &key(&self.tree, leaf), Label::Node(n), &kn);
            step.messages.extend(ctx.send(Channel::Unicast(owner), vec![payload]));
        }

        let mut pairs = Vec::new();
        let mut derivations = 0u64;
        for a in self.tree.ancestors(j) {
            if Some(a) == ins.split_parent {
                continue;
            }
            let k = crypto::derive(&key(&self.tree, a));
            ctx.count_generated(a);
            self.tree.set_key(a, k);
            pairs.push((a, a));
            derivations += self.tree.leaf_count(a) as u64 - 1;
        }

        let payloads = self
            .tree
            .ancestors(j)
            .into_iter()
            .map(|a| ctx.wrap(Label::Node(j), &kj, Label::Node(a), &key(&self.tree, a)))
            .collect();
        step.messages.extend(ctx.send(Channel::Unicast(member), payloads));
        if !pairs.is_empty() {
            step.notice = Some(Notice::Derive { pairs });
            ctx.notice();
        }
        ctx.member_derivations(derivations);
        step.bootstraps.push(Bootstrap::new(member, j, kj));
        Ok(step)
    }
}

impl KeyServer for OkdServer {
    fn protocol(&self) -> ProtocolId {
        ProtocolId::Okd
    }

    fn handle(&mut self, event: &MembershipEvent, ctx: &mut RekeyContext<'_>) -> Result<RekeyOutcome> {
        event.validate(&self.tree)?;
        let mut out = RekeyOutcome::default();
        for &m in event.ids() {
            let mut step = match event.kind {
                EventKind::Join(_) => self.join_one(m, ctx)?,
                EventKind::Leave(_) => rekeying_leave(&mut self.tree, m, ctx)?,
            };
            step.root = self.tree.root();
            if ctx.record_shapes() {
                step.shape = Some(self.tree.shape());
            }
            out.steps.push(step);
        }
        Ok(out)
    }

    fn group_key(&self) -> SymKey {
        key(&self.tree, self.tree.root())
    }

    fn tree(&self) -> &KeyTree {
        &self.tree
    }

    fn node_key(&mut self, id: NodeId) -> Option<SymKey> {
        self.tree.contains(id).then(|| key(&self.tree, id))
    }

    fn initial_bootstraps(&mut self) -> Vec<Bootstrap> {
        self.tree.members().map(|m| path_bootstrap(&self.tree, m)).collect()
    }

    fn clone_box(&self) -> Box<dyn KeyServer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::PathMember;
    use crate::protocol::{MemberState, Meter};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ids(r: std::ops::RangeInclusive<u32>) -> Vec<MemberId> {
        r.map(MemberId).collect()
    }

    #[test]
    fn join_into_nine_unicasts_the_path() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut s = OkdServer::new(&ids(1..=9), &mut rng).unwrap();
        let old_root = s.group_key();
        let mut meter = Meter::new();
        let mut ctx = RekeyContext::new(&mut rng, &mut meter, 1);
        let out = s.handle(&MembershipEvent::join(1, vec![MemberId(10)]), &mut ctx).unwrap();
        let c = ctx.finish();
        let step = &out.steps[0];
        // a full 3-ary tree of nine: the joiner splits a leaf, whose owner
        // gets the fresh split-node key
        assert_eq!(step.messages.len(), 2);
        assert_eq!(step.messages[0].payloads.len(), 1);
        assert_eq!(step.messages[1].channel, Channel::Unicast(MemberId(10)));
        // split parent, the old parent, and the root (group key)
        assert_eq!(step.messages[1].payloads.len(), 3);
        assert_eq!((c.unicast, c.multicast, c.encrypt, c.keygen), (2, 0, 4, 4));
        assert_eq!(s.group_key(), crypto::derive(&old_root));
    }

    #[test]
    fn members_follow_derivations_and_leaves() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut s = OkdServer::new(&ids(1..=5), &mut rng).unwrap();
        let mut members: Vec<PathMember> = s.initial_bootstraps().iter().map(PathMember::from_bootstrap).collect();
        let mut meter = Meter::new();
        for (seq, ev) in [
            MembershipEvent::join(1, ids(6..=12)),
            MembershipEvent::leave(2, vec![MemberId(1), MemberId(7), MemberId(12)]),
            MembershipEvent::join(3, ids(13..=14)),
        ]
        .into_iter()
        .enumerate()
        {
            let mut ctx = RekeyContext::new(&mut rng, &mut meter, seq as u64);
            let out = s.handle(&ev, &mut ctx).unwrap();
            let c = ctx.finish();
            let mut derivations = 0;
            for step in &out.steps {
                members.retain(|m| !step.departed.contains(&m.id()));
                members.extend(step.bootstraps.iter().map(PathMember::from_bootstrap));
                for m in members.iter_mut() {
                    derivations += m.apply_step(step).unwrap().derivations;
                }
            }
            assert_eq!(derivations, c.member_derivations);
            for m in &members {
                assert_eq!(m.group_key(), Some(s.group_key()), "{}", m.id());
                for (id, k) in m.path_keys() {
                    assert_eq!(s.node_key(id), Some(k));
                }
            }
        }
    }
}
