//! Simultaneous join/leave rekeying with node codes.
//!
//! Every internal node carries a digit code; its key is
//! `derive_with_code(group_key, code)`, so only the group key ever travels.
//! A batch join grafts a balanced subtree of the joiners next to the current
//! tree, moves the group key forward with `derive`, and sends it to the
//! joiners in one multicast. A batch leave wraps a fresh group key under the
//! keys of the maximal leaver-free subtrees.

use std::collections::{BTreeMap, HashMap};

use rand::RngCore;

use crate::crypto::{self, KeyRole, SymKey};
use crate::error::{Error, Result};
use crate::protocol::{
    Bootstrap, Channel, EventKind, Knowledge, KeyServer, Label, MemberReport, MemberState,
    MembershipEvent, Notice, ProtocolId, Recipient, RekeyContext, RekeyOutcome, RekeyStep,
};
use crate::tree::{parent_code, Arity, KeyTree, MemberId, NodeCode, NodeId};

/// Digits in a generated root code. Each join shortens the root code by one.
pub const DEFAULT_ROOT_CODE_LEN: usize = 12;

#[derive(Debug, Clone)]
pub struct CkcsServer {
    tree: KeyTree,
    group_key: SymKey,
    /// Middle keys of the current epoch, filled on access.
    memo: HashMap<NodeId, SymKey>,
}

impl CkcsServer {
    /// Sets up a group over `members`. Setup is not rekeying and is not metered.
    pub fn new<R: RngCore + ?Sized>(
        members: &[MemberId],
        root_code: Option<NodeCode>,
        rng: &mut R,
    ) -> Result<Self> {
        let root_code = match root_code {
            Some(c) => c,
            None => NodeCode::random(rng, DEFAULT_ROOT_CODE_LEN),
        };
        let mut tree = KeyTree::build_balanced(members, Arity::Binary, Some(root_code), rng)?;
        for &m in members {
            let leaf = tree.leaf_of(m).expect("just built");
            tree.set_key(leaf, crypto::random_key(rng, KeyRole::Individual));
        }
        let group_key = crypto::random_key(rng, KeyRole::Group);
        Ok(Self {
            tree,
            group_key,
            memo: HashMap::new(),
        })
    }

    /// Key of any live node under the current group key.
    pub fn key_of(&mut self, id: NodeId) -> Result<SymKey> {
        if !self.tree.contains(id) {
            return Err(Error::UnknownNode(id));
        }
        // A lone member's leaf is also the root; it keeps its individual key.
        if self.tree.is_leaf(id) {
            return self.tree.key(id).copied().ok_or(Error::UnknownNode(id));
        }
        if id == self.tree.root() {
            return Ok(self.group_key);
        }
        if let Some(k) = self.memo.get(&id) {
            return Ok(*k);
        }
        let code = self.tree.code(id).ok_or(Error::UnknownNode(id))?;
        let k = crypto::derive_with_code(&self.group_key, code)?;
        self.memo.insert(id, k);
        Ok(k)
    }

    fn set_group_key(&mut self, k: SymKey) {
        self.group_key = k.with_role(KeyRole::Group);
        self.memo.clear();
    }

    fn bootstrap(&self, member: MemberId) -> Result<Bootstrap> {
        let leaf = self.tree.leaf_of(member).ok_or(Error::UnknownMember(member))?;
        let key = self.tree.key(leaf).copied().ok_or(Error::UnknownMember(member))?;
        let mut b = Bootstrap::new(member, leaf, key);
        b.path_codes = self
            .tree
            .ancestors(leaf)
            .into_iter()
            .map(|id| (id, self.tree.code(id).cloned().expect("internal nodes are coded")))
            .collect();
        if leaf == self.tree.root() {
            b.leaf_code = self.tree.code(leaf).cloned();
        }
        Ok(b)
    }

    fn join(&mut self, ids: &[MemberId], ctx: &mut RekeyContext<'_>) -> Result<RekeyOutcome> {
        let total_old = self.tree.total_leaf_depth();
        let n_old = self.tree.len() as u64;
        let incoming = KeyTree::build_balanced(ids, Arity::Binary, None, ctx.rng())?;
        let total_inc = incoming.total_leaf_depth();
        let attached = self.tree.attach_subtree(incoming, ctx.rng())?;

        let mut leaves = Vec::with_capacity(ids.len());
        for &m in ids {
            let leaf = self.tree.leaf_of(m).expect("attached");
            let k = ctx.fresh_key(leaf, KeyRole::Individual);
            self.tree.set_key(leaf, k);
            leaves.push((m, leaf, k));
        }
        let next = crypto::derive(&self.group_key);
        ctx.count_generated(attached.new_root);
        self.set_group_key(next);

        let payloads = leaves
            .iter()
            .map(|(_, leaf, k)| ctx.wrap(Label::Node(*leaf), k, Label::Group, &self.group_key))
            .collect();
        let recipients = ids.iter().map(|&m| Recipient::Member(m)).collect();
        let mut step = RekeyStep::new(attached.new_root);
        step.messages.extend(ctx.send(Channel::Multicast(recipients), payloads));
        step.bootstraps = ids.iter().map(|&m| self.bootstrap(m)).collect::<Result<_>>()?;
        step.notice = Some(Notice::CkcsJoin {
            new_root: attached.new_root,
            joiners: ids.to_vec(),
        });
        ctx.notice();
        ctx.member_derivations(total_old + n_old + total_inc);
        if ctx.record_shapes() {
            step.shape = Some(self.tree.shape());
        }
        Ok(RekeyOutcome {
            steps: vec![step],
            ..Default::default()
        })
    }

    fn leave(&mut self, ids: &[MemberId], ctx: &mut RekeyContext<'_>) -> Result<RekeyOutcome> {
        let cover = self.tree.compute_cover(ids)?;
        let cover_labels = cover.iter().map(|&c| self.tree.label(c)).collect();
        let cover_keys = cover
            .iter()
            .map(|&c| self.key_of(c).map(|k| (c, k)))
            .collect::<Result<Vec<_>>>()?;

        let survivor_parent_code = if self.tree.len() == ids.len() + 1 {
            let survivor = self.tree.members().find(|m| !ids.contains(m)).expect("one survivor");
            let leaf = self.tree.leaf_of(survivor).expect("member");
            self.tree.parent(leaf).and_then(|p| self.tree.code(p).cloned())
        } else {
            None
        };
        let removal = self.tree.remove_leaves(ids)?;
        let root = self.tree.root();
        if self.tree.is_leaf(root) {
            if let Some(c) = survivor_parent_code {
                self.tree.set_code(root, Some(c));
            }
        }

        let fresh = ctx.fresh_key(root, KeyRole::Group);
        self.set_group_key(fresh);
        let payloads = cover_keys
            .iter()
            .map(|(c, k)| ctx.wrap(Label::Node(*c), k, Label::Group, &self.group_key))
            .collect();
        let recipients = cover.iter().map(|&c| Recipient::Subtree(c)).collect();
        let mut step = RekeyStep::new(root);
        step.messages.extend(ctx.send(Channel::Multicast(recipients), payloads));
        step.departed = ids.to_vec();
        step.deleted = removal.deleted.clone();
        if !self.tree.is_leaf(root) {
            ctx.member_derivations(self.tree.total_leaf_depth() - self.tree.len() as u64);
        }
        if ctx.record_shapes() {
            step.shape = Some(self.tree.shape());
        }
        Ok(RekeyOutcome {
            steps: vec![step],
            cover,
            cover_labels,
            promotions: removal.promotions,
        })
    }
}

impl KeyServer for CkcsServer {
    fn protocol(&self) -> ProtocolId {
        ProtocolId::Ckcs
    }

    fn handle(&mut self, event: &MembershipEvent, ctx: &mut RekeyContext<'_>) -> Result<RekeyOutcome> {
        event.validate(&self.tree)?;
        match &event.kind {
            EventKind::Join(ids) => self.join(ids, ctx),
            EventKind::Leave(ids) => self.leave(ids, ctx),
        }
    }

    fn group_key(&self) -> SymKey {
        self.group_key
    }

    fn tree(&self) -> &KeyTree {
        &self.tree
    }

    fn node_key(&mut self, id: NodeId) -> Option<SymKey> {
        self.key_of(id).ok()
    }

    fn initial_bootstraps(&mut self) -> Vec<Bootstrap> {
        let members: Vec<_> = self.tree.members().collect();
        members
            .into_iter()
            .map(|m| {
                let mut b = self.bootstrap(m).expect("current member");
                b.keys.push((Label::Group, self.group_key));
                b
            })
            .collect()
    }

    fn check_invariants(&mut self) -> std::result::Result<(), String> {
        self.tree.check_structure()?;
        let mut seen = HashMap::new();
        for id in self.tree.preorder() {
            let code = self.tree.code(id);
            if !self.tree.is_leaf(id) && code.is_none() {
                return Err(format!("internal node {id} has no code"));
            }
            if let Some(c) = code {
                if !self.tree.is_leaf(id) || id == self.tree.root() {
                    if let Some(other) = seen.insert(c.clone(), id) {
                        return Err(format!("nodes {other} and {id} share code {c}"));
                    }
                }
                if let Some(p) = self.tree.parent(id).and_then(|p| self.tree.code(p)) {
                    if !self.tree.is_leaf(id) && !p.is_prefix_of(c) {
                        return Err(format!("code {c} of {id} does not extend its parent's {p}"));
                    }
                }
            }
            if !self.tree.is_leaf(id) && id != self.tree.root() {
                let want = crypto::derive_with_code(&self.group_key, code.expect("checked"))
                    .map_err(|e| e.to_string())?;
                if self.key_of(id).map_err(|e| e.to_string())? != want {
                    return Err(format!("key equation fails at {id}"));
                }
            }
        }
        Ok(())
    }

    fn codes(&self) -> Vec<(NodeId, NodeCode)> {
        self.tree
            .preorder()
            .into_iter()
            .filter_map(|id| self.tree.code(id).map(|c| (id, c.clone())))
            .collect()
    }

    fn clone_box(&self) -> Box<dyn KeyServer> {
        Box::new(self.clone())
    }
}

/// A member's view: its individual key, the group key, the codes on its path
/// and the middle keys it derives from them.
#[derive(Debug, Clone)]
pub struct CkcsMember {
    id: MemberId,
    leaf: NodeId,
    individual: SymKey,
    group_key: Option<SymKey>,
    /// Parent first, root last.
    path: Vec<(NodeId, NodeCode)>,
    leaf_code: Option<NodeCode>,
    middle: BTreeMap<NodeId, SymKey>,
}

impl CkcsMember {
    pub fn from_bootstrap(b: &Bootstrap) -> Self {
        let group_key = b
            .keys
            .iter()
            .find(|(l, _)| *l == Label::Group)
            .map(|(_, k)| *k);
        let mut m = Self {
            id: b.member,
            leaf: b.leaf,
            individual: b.individual_key,
            group_key,
            path: b.path_codes.clone(),
            leaf_code: b.leaf_code.clone(),
            middle: BTreeMap::new(),
        };
        if m.group_key.is_some() {
            m.recompute().expect("setup codes are valid");
        }
        m
    }

    pub fn path_codes(&self) -> &[(NodeId, NodeCode)] {
        &self.path
    }

    /// Recomputes every non-root middle key; returns how many were derived.
    fn recompute(&mut self) -> Result<u64> {
        let gk = self.group_key.ok_or(Error::MissingKey {
            member: self.id,
            node: self.leaf,
        })?;
        self.middle.clear();
        let below_root = self.path.len().saturating_sub(1);
        for (id, code) in &self.path[..below_root] {
            self.middle.insert(*id, crypto::derive_with_code(&gk, code)?);
        }
        Ok(below_root as u64)
    }

    fn top_code(&self) -> Option<&NodeCode> {
        self.path.last().map(|(_, c)| c).or(self.leaf_code.as_ref())
    }

    fn held(&self) -> BTreeMap<Label, SymKey> {
        let mut held: BTreeMap<Label, SymKey> =
            self.middle.iter().map(|(id, k)| (Label::Node(*id), *k)).collect();
        held.insert(Label::Node(self.leaf), self.individual);
        held
    }
}

impl MemberState for CkcsMember {
    fn id(&self) -> MemberId {
        self.id
    }

    fn apply_step(&mut self, step: &RekeyStep) -> Result<MemberReport> {
        let mut report = MemberReport::default();
        if let Some(Notice::CkcsJoin { new_root, joiners }) = &step.notice {
            if joiners.contains(&self.id) {
                let payload = step
                    .payloads()
                    .find(|p| p.kek == Label::Node(self.leaf))
                    .ok_or(Error::BootstrapMismatch(self.id))?;
                let gk = payload
                    .open(&self.individual)
                    .map_err(|_| Error::BootstrapMismatch(self.id))?;
                self.group_key = Some(gk);
            } else {
                let gk = self.group_key.ok_or(Error::MissingKey {
                    member: self.id,
                    node: self.leaf,
                })?;
                self.group_key = Some(crypto::derive(&gk));
                let top = self.top_code().ok_or(Error::UncodedRoot)?;
                let code = parent_code(top).map_err(|_| Error::RootCodeExhausted)?;
                self.path.push((*new_root, code));
                report.derivations += 1;
            }
            report.derivations += self.recompute()?;
            return Ok(report);
        }

        if step.departed.is_empty() {
            return Ok(report);
        }
        let mut got = None;
        let mut held = self.held();
        crate::protocol::open_payloads(step, &mut held, &mut report, |_, target, k| {
            if target == Label::Group && got.is_none() {
                got = Some(k);
            }
        });
        let gk = got.ok_or(Error::NoUnwrappablePayload(self.id))?;
        self.group_key = Some(gk);
        if step.root == self.leaf {
            if let Some((_, parent)) = self.path.first() {
                self.leaf_code = Some(parent.clone());
            }
        }
        self.path.retain(|(id, _)| !step.deleted.contains(id));
        report.derivations += self.recompute()?;
        Ok(report)
    }

    fn group_key(&self) -> Option<SymKey> {
        self.group_key
    }

    fn path_keys(&self) -> BTreeMap<NodeId, SymKey> {
        let mut out = self.middle.clone();
        out.insert(self.leaf, self.individual);
        if let (Some((root, _)), Some(gk)) = (self.path.last(), self.group_key) {
            out.insert(*root, gk);
        }
        out
    }

    fn knowledge(&self) -> Knowledge {
        let mut keys = vec![(Label::Node(self.leaf), self.individual)];
        if let Some(gk) = self.group_key {
            keys.push((Label::Group, gk));
        }
        keys.extend(self.middle.iter().map(|(id, k)| (Label::Node(*id), *k)));
        let mut codes = self.path.clone();
        if let Some(c) = &self.leaf_code {
            codes.push((self.leaf, c.clone()));
        }
        Knowledge { keys, codes }
    }

    fn clone_box(&self) -> Box<dyn MemberState> {
        Box::new(self.clone())
    }
}
