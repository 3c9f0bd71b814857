//! Single-member schemes run in batch mode: LKH, OFT and OKD.
//!
//! None of them has a batch algorithm, so a batch of `m` is processed as `m`
//! single events in the given order, each producing its own [`RekeyStep`].
//! The meter's `keygen_dedup` column shows how many distinct nodes were
//! actually rekeyed across the batch.

pub mod lkh;
pub mod oft;
pub mod okd;

use std::collections::BTreeMap;

use crate::crypto::{self, KeyRole, SymKey};
use crate::error::{Error, Result};
use crate::protocol::{
    open_payloads, Bootstrap, Channel, Knowledge, Label, MemberReport, MemberState, Notice, Recipient,
    RekeyContext, RekeyStep,
};
use crate::tree::{KeyTree, MemberId, NodeId};

pub use lkh::LkhServer;
pub use oft::{OftMember, OftServer};
pub use okd::OkdServer;

fn role_for(tree: &KeyTree, id: NodeId) -> KeyRole {
    if id == tree.root() {
        KeyRole::Group
    } else if tree.is_leaf(id) {
        KeyRole::Individual
    } else {
        KeyRole::Middle
    }
}

fn key(tree: &KeyTree, id: NodeId) -> SymKey {
    *tree.key(id).unwrap_or_else(|| panic!("node {id} has no key"))
}

/// Random keys for every node; setup, so unmetered.
fn random_keys<R: rand::RngCore + ?Sized>(tree: &mut KeyTree, rng: &mut R) {
    for id in tree.preorder() {
        let role = role_for(tree, id);
        tree.set_key(id, crypto::random_key(rng, role));
    }
}

/// Leaf key plus every ancestor key, for schemes whose members hold their path.
fn path_bootstrap(tree: &KeyTree, member: MemberId) -> Bootstrap {
    let leaf = tree.leaf_of(member).expect("current member");
    let mut b = Bootstrap::new(member, leaf, key(tree, leaf));
    b.keys.push((Label::Node(leaf), key(tree, leaf)));
    for a in tree.ancestors(leaf) {
        b.keys.push((Label::Node(a), key(tree, a)));
    }
    b
}

/// Removes one member and refreshes every surviving ancestor of the removal
/// point bottom-up; each new key goes out under each of its children's keys,
/// one multicast per level.
fn rekeying_leave(tree: &mut KeyTree, member: MemberId, ctx: &mut RekeyContext<'_>) -> Result<RekeyStep> {
    let leaf = tree.leaf_of(member).ok_or(Error::UnknownMember(member))?;
    let parent = tree.parent(leaf).ok_or(Error::TotalDeparture)?;
    let removal = tree.remove_leaves(&[member])?;
    let start = if tree.contains(parent) {
        Some(parent)
    } else {
        let promoted = removal.promotions[0].promoted;
        tree.parent(promoted)
    };

    let mut step = RekeyStep::new(tree.root());
    let mut cur = start;
    while let Some(a) = cur {
        let role = if a == tree.root() { KeyRole::Group } else { KeyRole::Middle };
        let fresh = ctx.fresh_key(a, role);
        tree.set_key(a, fresh);
        let children = tree.children(a).to_vec();
        let payloads = children
            .iter()
            .map(|&c| ctx.wrap(Label::Node(c), &key(tree, c), Label::Node(a), &fresh))
            .collect();
        let recipients = children.iter().map(|&c| Recipient::Subtree(c)).collect();
        step.messages.extend(ctx.send(Channel::Multicast(recipients), payloads));
        cur = tree.parent(a);
    }
    step.departed = vec![member];
    step.deleted = removal.deleted;
    Ok(step)
}

/// Member of a scheme where each member simply holds the keys of its path
/// (LKH, OKD): opens what it can, applies public derivations, and forgets
/// deleted nodes.
#[derive(Debug, Clone)]
pub struct PathMember {
    id: MemberId,
    root: NodeId,
    held: BTreeMap<Label, SymKey>,
}

impl PathMember {
    pub fn from_bootstrap(b: &Bootstrap) -> Self {
        let mut held: BTreeMap<Label, SymKey> = b.keys.iter().copied().collect();
        held.insert(Label::Node(b.leaf), b.individual_key);
        // The last ancestor handed over at setup is the root; a lone leaf is its own root.
        let root = b
            .keys
            .iter()
            .rev()
            .find_map(|(l, _)| match l {
                Label::Node(id) => Some(*id),
                _ => None,
            })
            .unwrap_or(b.leaf);
        Self {
            id: b.member,
            root,
            held,
        }
    }
}

impl MemberState for PathMember {
    fn id(&self) -> MemberId {
        self.id
    }

    fn apply_step(&mut self, step: &RekeyStep) -> Result<MemberReport> {
        let mut report = MemberReport::default();
        if let Some(Notice::Derive { pairs }) = &step.notice {
            let updates: Vec<_> = pairs
                .iter()
                .filter_map(|(t, s)| self.held.get(&Label::Node(*s)).map(|k| (*t, crypto::derive(k))))
                .collect();
            report.derivations += updates.len() as u64;
            for (t, k) in updates {
                self.held.insert(Label::Node(t), k);
            }
        }
        open_payloads(step, &mut self.held, &mut report, |held, target, k| {
            held.insert(target, k);
        });
        for d in &step.deleted {
            self.held.remove(&Label::Node(*d));
        }
        self.root = step.root;
        Ok(report)
    }

    fn group_key(&self) -> Option<SymKey> {
        self.held.get(&Label::Node(self.root)).copied()
    }

    fn path_keys(&self) -> BTreeMap<NodeId, SymKey> {
        self.held
            .iter()
            .filter_map(|(l, k)| match l {
                Label::Node(id) => Some((*id, *k)),
                _ => None,
            })
            .collect()
    }

    fn knowledge(&self) -> Knowledge {
        Knowledge {
            keys: self.held.iter().map(|(l, k)| (*l, *k)).collect(),
            codes: Vec::new(),
        }
    }

    fn clone_box(&self) -> Box<dyn MemberState> {
        Box::new(self.clone())
    }
}
