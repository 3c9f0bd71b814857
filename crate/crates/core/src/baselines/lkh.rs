//! Logical key hierarchy: independent random keys on every node, and every
//! key on an affected path replaced and redistributed by the server.

use rand::RngCore;

use crate::crypto::{KeyRole, SymKey};
use crate::error::Result;
use crate::protocol::{
    Bootstrap, Channel, EventKind, KeyServer, Label, MembershipEvent, ProtocolId, Recipient, RekeyContext,
    RekeyOutcome, RekeyStep,
};
use crate::tree::{Arity, KeyTree, MemberId, NodeId};

use super::{key, path_bootstrap, random_keys, rekeying_leave};

#[derive(Debug, Clone)]
pub struct LkhServer {
    tree: KeyTree,
}

impl LkhServer {
    pub fn new<R: RngCore + ?Sized>(members: &[MemberId], rng: &mut R) -> Result<Self> {
        let mut tree = KeyTree::build_balanced(members, Arity::Binary, None, rng)?;
        random_keys(&mut tree, rng);
        Ok(Self { tree })
    }

    /// Splits the shallowest leaf `L` into a new node holding `L` and the
    /// joiner, and replaces every key on the joiner's path.
    ///
    /// The joiner gets its path keys in one unicast, each wrapped under the
    /// previous new key starting from its individual key; `L` gets the new
    /// parent key under its own key; every higher level goes out in one
    /// multicast carrying the new key under the untouched child's key and
    /// under the new key of the on-path child.
    fn join_one(&mut self, member: MemberId, ctx: &mut RekeyContext<'_>) -> Result<RekeyStep> {
        let at = self.tree.insertion_point();
        let ins = self.tree.insert_member(at, member, None)?;
        let j = ins.leaf;
        let kj = ctx.fresh_key(j, KeyRole::Individual);
        self.tree.set_key(j, kj);

        let path = self.tree.ancestors(j);
        for &a in &path {
            let role = if a == self.tree.root() { KeyRole::Group } else { KeyRole::Middle };
            let k = ctx.fresh_key(a, role);
            self.tree.set_key(a, k);
        }

        let mut step = RekeyStep::new(self.tree.root());
        let mut chain = Vec::with_capacity(path.len());
        let mut below = j;
        for &a in &path {
            chain.push(ctx.wrap(Label::Node(below), &key(&self.tree, below), Label::Node(a), &key(&self.tree, a)));
            below = a;
        }
        step.messages.extend(ctx.send(Channel::Unicast(member), chain));

        let first = path[0];
        for &c in self.tree.children(first).to_vec().iter().filter(|&&c| c != j) {
            let payload = ctx.wrap(Label::Node(c), &key(&self.tree, c), Label::Node(first), &key(&self.tree, first));
            let channel = match self.tree.node(c).member {
                Some(m) => Channel::Unicast(m),
                None => Channel::Multicast(vec![Recipient::Subtree(c)]),
            };
            step.messages.extend(ctx.send(channel, vec![payload]));
        }

        for w in path.windows(2) {
            let (on_path, a) = (w[0], w[1]);
            let ka = key(&self.tree, a);
            let mut payloads = Vec::new();
            let mut recipients = Vec::new();
            for &c in self.tree.children(a).to_vec().iter() {
                payloads.push(ctx.wrap(Label::Node(c), &key(&self.tree, c), Label::Node(a), &ka));
                recipients.push(Recipient::Subtree(c));
            }
            debug_assert!(self.tree.children(a).contains(&on_path));
            step.messages.extend(ctx.send(Channel::Multicast(recipients), payloads));
        }
        step.bootstraps.push(Bootstrap::new(member, j, kj));
        Ok(step)
    }
}

impl KeyServer for LkhServer {
    fn protocol(&self) -> ProtocolId {
        ProtocolId::Lkh
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
    fn single_join_into_seven() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut s = LkhServer::new(&ids(1..=7), &mut rng).unwrap();
        let mut meter = Meter::new();
        let mut ctx = RekeyContext::new(&mut rng, &mut meter, 1);
        let out = s.handle(&MembershipEvent::join(1, vec![MemberId(8)]), &mut ctx).unwrap();
        let c = ctx.finish();
        // joiner key + the three keys on its path
        assert_eq!(c.keygen, 4);
        // 3 chained to the joiner, 1 to the split leaf, 2 per higher level
        assert_eq!(c.encrypt, 3 + 1 + 2 * 2);
        assert_eq!((c.unicast, c.multicast), (2, 2));
        assert_eq!(out.steps.len(), 1);
    }

    #[test]
    fn single_leave_from_eight() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut s = LkhServer::new(&ids(1..=8), &mut rng).unwrap();
        let mut meter = Meter::new();
        let mut ctx = RekeyContext::new(&mut rng, &mut meter, 1);
        s.handle(&MembershipEvent::leave(1, vec![MemberId(8)]), &mut ctx).unwrap();
        let c = ctx.finish();
        // the leaver's parent is spliced out; its two surviving ancestors are rekeyed
        assert_eq!(c.keygen, 2);
        assert_eq!(c.encrypt, 4);
    }

    #[test]
    fn members_track_batches() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut s = LkhServer::new(&ids(1..=5), &mut rng).unwrap();
        let mut members: Vec<PathMember> = s.initial_bootstraps().iter().map(PathMember::from_bootstrap).collect();
        let mut meter = Meter::new();
        for (seq, ev) in [
            MembershipEvent::join(1, ids(6..=9)),
            MembershipEvent::leave(2, vec![MemberId(2), MemberId(7), MemberId(9)]),
        ]
        .into_iter()
        .enumerate()
        {
            let mut ctx = RekeyContext::new(&mut rng, &mut meter, seq as u64);
            let out = s.handle(&ev, &mut ctx).unwrap();
            ctx.finish();
            for step in &out.steps {
                members.retain(|m| !step.departed.contains(&m.id()));
                members.extend(step.bootstraps.iter().map(PathMember::from_bootstrap));
                for m in members.iter_mut() {
                    m.apply_step(step).unwrap();
                }
            }
            for m in &members {
                assert_eq!(m.group_key(), Some(s.group_key()), "{}", m.id());
                for (id, k) in m.path_keys() {
                    assert_eq!(s.node_key(id), Some(k));
                }
            }
        }
    }
}
