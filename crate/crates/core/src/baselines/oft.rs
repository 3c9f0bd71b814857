//! One-way function tree: `K(v) = mix(g(K(left)), g(K(right)))`, so after a
//! leaf key changes the server only advertises blinded keys and members
//! recompute their own paths.
//!
//! A join splits leaf `L`; a leave promotes the leaver's sibling subtree `S`.
//! In both cases one leaf whose blinded key the departing/arriving party sees
//! (`L` itself, or the leftmost leaf of `S`) is given a fresh key, otherwise
//! the old path keys stay computable from blinded keys that party holds.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::crypto::{self, KeyRole, SymKey};
use crate::error::{Error, Result};
use crate::protocol::{
    open_payloads, Bootstrap, Channel, EventKind, Knowledge, KeyServer, Label, MemberReport, MemberState,
    MembershipEvent, ProtocolId, Recipient, RekeyContext, RekeyOutcome, RekeyStep,
};
use crate::tree::{Arity, KeyTree, MemberId, NodeId, TreeShape};

use super::key;

#[derive(Debug, Clone)]
pub struct OftServer {
    tree: KeyTree,
}

impl OftServer {
    pub fn new<R: RngCore + ?Sized>(members: &[MemberId], rng: &mut R) -> Result<Self> {
        let mut tree = KeyTree::build_balanced(members, Arity::Binary, None, rng)?;
        for id in tree.preorder() {
            if tree.is_leaf(id) {
                tree.set_key(id, crypto::random_key(rng, KeyRole::Individual));
            }
        }
        for id in tree.preorder().into_iter().rev() {
            if !tree.is_leaf(id) {
                let k = mix_children(&tree, id);
                tree.set_key(id, k);
            }
        }
        Ok(Self { tree })
    }

    /// The group key recomputed from the leaf keys alone.
    pub fn fold_root(&self) -> SymKey {
        fn fold(t: &KeyTree, id: NodeId) -> SymKey {
            match t.children(id) {
                [] => key(t, id),
                [l, r] => crypto::mix(&crypto::blind(&fold(t, *l)), &crypto::blind(&fold(t, *r))),
                other => panic!("OFT node {id} has {} children", other.len()),
            }
        }
        fold(&self.tree, self.tree.root())
    }

    /// Recomputes every key from `from` up to the root; each is one key generation.
    fn recompute_up(&mut self, from: Option<NodeId>, ctx: &mut RekeyContext<'_>) {
        let mut cur = from;
        while let Some(a) = cur {
            let k = mix_children(&self.tree, a);
            ctx.count_generated(a);
            self.tree.set_key(a, k);
            cur = self.tree.parent(a);
        }
    }

    /// `g(K(x))` under the key of `sibling(x)` for every `x` from `start` up to
    /// a child of the root, each as its own multicast.
    fn advertise(&self, start: NodeId, ctx: &mut RekeyContext<'_>, step: &mut RekeyStep) {
        let mut x = start;
        while let Some(s) = self.tree.sibling(x) {
            let p = ctx.wrap(
                Label::Node(s),
                &key(&self.tree, s),
                Label::Blinded(x),
                &crypto::blind(&key(&self.tree, x)),
            );
            step.messages
                .extend(ctx.send(Channel::Multicast(vec![Recipient::Subtree(s)]), vec![p]));
            x = self.tree.parent(x).expect("has a sibling, so has a parent");
        }
    }

    fn refresh_leaf(&mut self, leaf: NodeId, ctx: &mut RekeyContext<'_>, step: &mut RekeyStep) {
        let old = key(&self.tree, leaf);
        let fresh = ctx.fresh_key(leaf, KeyRole::Individual);
        self.tree.set_key(leaf, fresh);
        let owner = self.tree.node(leaf).member.expect("leaf");
        let p = ctx.wrap(Label::Node(leaf), &old, Label::Node(leaf), &fresh);
        step.messages.extend(ctx.send(Channel::Unicast(owner), vec![p]));
    }

    fn join_one(&mut self, member: MemberId, ctx: &mut RekeyContext<'_>) -> Result<RekeyStep> {
        let at = self.tree.insertion_point();
        let ins = self.tree.insert_member(at, member, None)?;
        let j = ins.leaf;
        let kj = ctx.fresh_key(j, KeyRole::Individual);
        self.tree.set_key(j, kj);
        let split = self.tree.sibling(j).expect("binary split gives a sibling");

        let mut step = RekeyStep::new(self.tree.root());
        self.refresh_leaf(split, ctx, &mut step);
        self.recompute_up(self.tree.parent(j), ctx);

        let mut blinded = Vec::new();
        let mut x = j;
        while let Some(s) = self.tree.sibling(x) {
            blinded.push(ctx.wrap(Label::Node(j), &kj, Label::Blinded(s), &crypto::blind(&key(&self.tree, s))));
            x = self.tree.parent(x).expect("has a parent");
        }
        step.messages.extend(ctx.send(Channel::Unicast(member), blinded));
        self.advertise(j, ctx, &mut step);
        step.bootstraps.push(Bootstrap::new(member, j, kj));
        Ok(step)
    }

    fn leave_one(&mut self, member: MemberId, ctx: &mut RekeyContext<'_>) -> Result<RekeyStep> {
        let leaf = self.tree.leaf_of(member).ok_or(Error::UnknownMember(member))?;
        let promoted = self.tree.sibling(leaf).ok_or(Error::TotalDeparture)?;
        let removal = self.tree.remove_leaves(&[member])?;
        let mut refreshed = promoted;
        while let Some(&first) = self.tree.children(refreshed).first() {
            refreshed = first;
        }

        let mut step = RekeyStep::new(self.tree.root());
        self.refresh_leaf(refreshed, ctx, &mut step);
        self.recompute_up(self.tree.parent(refreshed), ctx);
        self.advertise(refreshed, ctx, &mut step);
        step.departed = vec![member];
        step.deleted = removal.deleted;
        Ok(step)
    }
}

fn mix_children(tree: &KeyTree, id: NodeId) -> SymKey {
    match tree.children(id) {
        [l, r] => crypto::mix(&crypto::blind(&key(tree, *l)), &crypto::blind(&key(tree, *r))),
        other => panic!("OFT node {id} has {} children", other.len()),
    }
}

impl KeyServer for OftServer {
    fn protocol(&self) -> ProtocolId {
        ProtocolId::Oft
    }

    fn handle(&mut self, event: &MembershipEvent, ctx: &mut RekeyContext<'_>) -> Result<RekeyOutcome> {
        event.validate(&self.tree)?;
        let mut out = RekeyOutcome::default();
        for &m in event.ids() {
            let mut step = match event.kind {
                EventKind::Join(_) => self.join_one(m, ctx)?,
                EventKind::Leave(_) => self.leave_one(m, ctx)?,
            };
            step.root = self.tree.root();
            ctx.member_derivations(2 * self.tree.total_leaf_depth());
            // Members rebuild their paths from the structure; see `OftMember::apply_step`.
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

    fn check_invariants(&mut self) -> std::result::Result<(), String> {
        self.tree.check_structure()?;
        for id in self.tree.preorder() {
            if !self.tree.is_leaf(id) && key(&self.tree, id) != mix_children(&self.tree, id) {
                return Err(format!("key equation fails at {id}"));
            }
        }
        if self.fold_root() != self.group_key() {
            return Err("leaf-up fold differs from the group key".into());
        }
        Ok(())
    }

    fn initial_bootstraps(&mut self) -> Vec<Bootstrap> {
        self.tree
            .members()
            .map(|m| {
                let leaf = self.tree.leaf_of(m).expect("member");
                let mut b = Bootstrap::new(m, leaf, key(&self.tree, leaf));
                let mut x = leaf;
                while let Some(s) = self.tree.sibling(x) {
                    b.keys.push((Label::Blinded(s), crypto::blind(&key(&self.tree, s))));
                    x = self.tree.parent(x).expect("parent");
                }
                b
            })
            .collect()
    }

    fn clone_box(&self) -> Box<dyn KeyServer> {
        Box::new(self.clone())
    }
}

/// An OFT member: its leaf key and the blinded keys of its path's siblings,
/// from which it computes every key on its path.
#[derive(Debug, Clone)]
pub struct OftMember {
    id: MemberId,
    leaf: NodeId,
    leaf_key: SymKey,
    blinded: BTreeMap<NodeId, SymKey>,
    keys: BTreeMap<NodeId, SymKey>,
    root: NodeId,
}

impl OftMember {
    /// Setup members can compute their path immediately from `shape`; joiners
    /// wait for their first step.
    pub fn from_bootstrap(b: &Bootstrap, shape: Option<&TreeShape>) -> Result<Self> {
        let mut m = Self {
            id: b.member,
            leaf: b.leaf,
            leaf_key: b.individual_key,
            blinded: b
                .keys
                .iter()
                .filter_map(|(l, k)| match l {
                    Label::Blinded(id) => Some((*id, *k)),
                    _ => None,
                })
                .collect(),
            keys: BTreeMap::from([(b.leaf, b.individual_key)]),
            root: b.leaf,
        };
        if let Some(shape) = shape {
            m.recompute(shape)?;
        }
        Ok(m)
    }

    fn recompute(&mut self, shape: &TreeShape) -> Result<u64> {
        let mut keys = BTreeMap::from([(self.leaf, self.leaf_key)]);
        let mut below = self.leaf;
        let mut below_key = self.leaf_key;
        let mut derivations = 0;
        for a in shape.ancestors(self.leaf) {
            let [l, r] = shape.children(a) else {
                return Err(Error::NotBinary);
            };
            let other = if *l == below { *r } else { *l };
            let other_b = *self.blinded.get(&other).ok_or(Error::MissingKey {
                member: self.id,
                node: other,
            })?;
            let own_b = crypto::blind(&below_key);
            let k = if *l == below {
                crypto::mix(&own_b, &other_b)
            } else {
                crypto::mix(&other_b, &own_b)
            };
            derivations += 2;
            keys.insert(a, k);
            below = a;
            below_key = k;
        }
        self.keys = keys;
        self.root = shape.root;
        Ok(derivations)
    }
}

impl MemberState for OftMember {
    fn id(&self) -> MemberId {
        self.id
    }

    fn apply_step(&mut self, step: &RekeyStep) -> Result<MemberReport> {
        let shape = step.shape.as_ref().ok_or(Error::MissingKey {
            member: self.id,
            node: step.root,
        })?;
        let mut report = MemberReport::default();
        let mut held: BTreeMap<Label, SymKey> = self.keys.iter().map(|(id, k)| (Label::Node(*id), *k)).collect();
        let leaf = self.leaf;
        let mut new_leaf_key = None;
        let mut new_blinded = Vec::new();
        open_payloads(step, &mut held, &mut report, |held, target, k| match target {
            Label::Node(id) if id == leaf => {
                held.insert(target, k);
                new_leaf_key = Some(k);
            }
            Label::Blinded(id) => new_blinded.push((id, k)),
            _ => {}
        });
        if let Some(k) = new_leaf_key {
            self.leaf_key = k;
        }
        self.blinded.extend(new_blinded);
        for d in &step.deleted {
            self.blinded.remove(d);
        }
        report.derivations += self.recompute(shape)?;
        Ok(report)
    }

    fn group_key(&self) -> Option<SymKey> {
        self.keys.get(&self.root).copied()
    }

    fn path_keys(&self) -> BTreeMap<NodeId, SymKey> {
        self.keys.clone()
    }

    fn knowledge(&self) -> Knowledge {
        let mut keys: Vec<_> = self.keys.iter().map(|(id, k)| (Label::Node(*id), *k)).collect();
        keys.extend(self.blinded.iter().map(|(id, k)| (Label::Blinded(*id), *k)));
        Knowledge {
            keys,
            codes: Vec::new(),
        }
    }

    fn clone_box(&self) -> Box<dyn MemberState> {
        Box::new(self.clone())
    }
}
