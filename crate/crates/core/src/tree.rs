//! The logical key tree shared by every scheme.
//!
//! Nodes live in an arena indexed by [`NodeId`]; ids are never reused, so a
//! node id names the same logical node for the lifetime of the tree (and is
//! what rekey payloads refer to). Each node carries three aggregates that are
//! kept current on every structural change: the number of leaves below it,
//! the sum of leaf depths below it, and the shallowest insertion depth, which
//! together make batch metering and join placement `O(depth)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::crypto::SymKey;
use crate::error::{Error, Result};

/// Stable identifier of a tree node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A group member. Displays as `u<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemberId(pub u32);

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

impl FromStr for MemberId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let digits = s.strip_prefix('u').unwrap_or(s);
        digits
            .parse::<u32>()
            .map(MemberId)
            .map_err(|_| Error::Scenario {
                line: 0,
                msg: format!("bad member id {s:?}"),
            })
    }
}

/// Decimal digit string bound to a node. A child's code is its parent's
/// code with one digit appended.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeCode(Vec<u8>);

impl NodeCode {
    pub fn from_digits(digits: Vec<u8>) -> Result<Self> {
        if digits.is_empty() {
            return Err(Error::EmptyCode);
        }
        if digits.iter().any(|&d| d > 9) {
            return Err(Error::InvalidCode(format!("{digits:?}")));
        }
        Ok(Self(digits))
    }

    pub fn digits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last_digit(&self) -> u8 {
        *self.0.last().expect("codes are non-empty")
    }

    /// This code with `digit` appended.
    pub fn extend(&self, digit: u8) -> NodeCode {
        debug_assert!(digit < 10);
        let mut d = self.0.clone();
        d.push(digit);
        NodeCode(d)
    }

    pub fn is_prefix_of(&self, other: &NodeCode) -> bool {
        other.0.starts_with(&self.0)
    }

    /// A code of `len` uniformly random digits.
    pub fn random<R: RngCore + ?Sized>(rng: &mut R, len: usize) -> NodeCode {
        assert!(len > 0);
        NodeCode((0..len).map(|_| rng.gen_range(0..10u8)).collect())
    }
}

impl FromStr for NodeCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::EmptyCode);
        }
        let digits = s
            .bytes()
            .map(|b| match b {
                b'0'..=b'9' => Ok(b - b'0'),
                _ => Err(Error::InvalidCode(s.to_string())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NodeCode(digits))
    }
}

impl fmt::Display for NodeCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for NodeCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeCode({self})")
    }
}

/// `parent ‖ d` for a random digit `d` not among `taken` (the digits already
/// used by the parent's other children).
pub fn child_code<R: RngCore + ?Sized>(
    parent: &NodeCode,
    taken: &[u8],
    rng: &mut R,
) -> Result<NodeCode> {
    if parent.is_empty() {
        return Err(Error::EmptyCode);
    }
    let distinct: BTreeSet<u8> = taken.iter().copied().collect();
    if distinct.len() >= 10 {
        return Err(Error::CodeAlphabetExhausted(distinct.len()));
    }
    loop {
        let d = rng.gen_range(0..10u8);
        if !distinct.contains(&d) {
            return Ok(parent.extend(d));
        }
    }
}

/// Drops the rightmost digit.
pub fn parent_code(code: &NodeCode) -> Result<NodeCode> {
    match code.len() {
        0 => Err(Error::EmptyCode),
        1 => Err(Error::RootLevelCode),
        n => Ok(NodeCode(code.0[..n - 1].to_vec())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arity {
    Binary,
    Ternary,
}

impl Arity {
    pub fn get(self) -> usize {
        match self {
            Arity::Binary => 2,
            Arity::Ternary => 3,
        }
    }
}

impl TryFrom<u8> for Arity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            2 => Ok(Arity::Binary),
            3 => Ok(Arity::Ternary),
            other => Err(Error::UnsupportedArity(other)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub key: Option<SymKey>,
    pub code: Option<NodeCode>,
    pub member: Option<MemberId>,
    leaf_count: u32,
    depth_sum: u64,
    insert_cost: u32,
}

impl Node {
    fn new(parent: Option<NodeId>) -> Self {
        Self {
            parent,
            children: Vec::new(),
            key: None,
            code: None,
            member: None,
            leaf_count: 0,
            depth_sum: 0,
            insert_cost: 1,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Where the next joiner goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertionPoint {
    /// Internal node with a free child slot.
    Slot(NodeId),
    /// Leaf to be split into an internal node holding the old leaf and the joiner.
    Split(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inserted {
    pub leaf: NodeId,
    /// The internal node created by a split, if any.
    pub split_parent: Option<NodeId>,
}

/// `promoted` moved into the position of the deleted `vacated` parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Promotion {
    pub promoted: NodeId,
    pub vacated: NodeId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Removal {
    pub promotions: Vec<Promotion>,
    /// Leaves and vacated parents, in deletion order.
    pub deleted: Vec<NodeId>,
    /// Pre-removal parent of each departed leaf.
    pub former_parents: BTreeMap<MemberId, Option<NodeId>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attached {
    pub new_root: NodeId,
    pub incoming_top: NodeId,
    /// Incoming-tree id → id in the merged tree.
    pub remap: BTreeMap<NodeId, NodeId>,
}

/// Parent → root list of a leaf's ancestors with their codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathView {
    pub leaf: NodeId,
    pub entries: Vec<(NodeId, Option<NodeCode>)>,
}

impl PathView {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn codes(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|(_, c)| c.as_ref().map(|c| c.to_string()).unwrap_or_default())
            .collect()
    }
}

/// Public structure of a tree: ids, positions and leaf owners, no secrets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeShape {
    pub root: NodeId,
    pub nodes: BTreeMap<NodeId, ShapeNode>,
    pub leaves: BTreeMap<MemberId, NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeNode {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub member: Option<MemberId>,
}

impl TreeShape {
    /// Ancestors of `leaf`, parent first.
    pub fn ancestors(&self, leaf: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.nodes.get(&leaf).and_then(|n| n.parent);
        while let Some(id) = cur {
            out.push(id);
            cur = self.nodes[&id].parent;
        }
        out
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes.get(&id).and_then(|n| n.parent)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.nodes.get(&id).map(|n| n.children.as_slice()).unwrap_or(&[])
    }

    /// Sibling pairs `(parent, left, right)` of every binary internal node.
    pub fn sibling_triples(&self) -> impl Iterator<Item = (NodeId, NodeId, NodeId)> + '_ {
        self.nodes.iter().filter_map(|(&id, n)| match n.children.as_slice() {
            [l, r] => Some((id, *l, *r)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct KeyTree {
    arity: Arity,
    nodes: Vec<Option<Node>>,
    root: NodeId,
    leaves: BTreeMap<MemberId, NodeId>,
}

impl KeyTree {
    /// A tree holding exactly one leaf, which is also the root.
    pub fn singleton(member: MemberId, arity: Arity, code: Option<NodeCode>) -> Self {
        let mut leaf = Node::new(None);
        leaf.member = Some(member);
        leaf.code = code;
        leaf.leaf_count = 1;
        let mut t = Self {
            arity,
            nodes: vec![Some(leaf)],
            root: NodeId(0),
            leaves: BTreeMap::new(),
        };
        t.leaves.insert(member, NodeId(0));
        t
    }

    /// Balanced d-ary tree over `members` (left to right) of height
    /// `ceil(log_d n)`. With a root code, every internal node below the root
    /// gets a fresh child code of its parent; a single-member tree puts the
    /// root code on its leaf.
    pub fn build_balanced<R: RngCore + ?Sized>(
        members: &[MemberId],
        arity: Arity,
        root_code: Option<NodeCode>,
        rng: &mut R,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyMemberSet);
        }
        let distinct: HashSet<_> = members.iter().collect();
        if distinct.len() != members.len() {
            let mut seen = HashSet::new();
            let dup = members.iter().find(|m| !seen.insert(**m)).unwrap();
            return Err(Error::DuplicateMember(*dup));
        }
        let mut t = Self {
            arity,
            nodes: Vec::with_capacity(2 * members.len()),
            root: NodeId(0),
            leaves: BTreeMap::new(),
        };
        let root = t.build_range(members, None, root_code, rng)?;
        t.root = root;
        Ok(t)
    }

    fn build_range<R: RngCore + ?Sized>(
        &mut self,
        members: &[MemberId],
        parent: Option<NodeId>,
        code: Option<NodeCode>,
        rng: &mut R,
    ) -> Result<NodeId> {
        let id = self.alloc(Node::new(parent));
        if members.len() == 1 {
            let node = self.node_mut(id);
            node.member = Some(members[0]);
            node.code = code;
            self.leaves.insert(members[0], id);
            self.recompute(id);
            return Ok(id);
        }
        self.node_mut(id).code = code.clone();
        let parts = split_sizes(members.len(), self.arity.get());
        let mut start = 0;
        let mut taken = Vec::new();
        for size in parts {
            let chunk = &members[start..start + size];
            start += size;
            let child_c = match (&code, size > 1) {
                (Some(c), true) => {
                    let cc = child_code(c, &taken, rng)?;
                    taken.push(cc.last_digit());
                    Some(cc)
                }
                _ => None,
            };
            let child = self.build_range(chunk, Some(id), child_c, rng)?;
            self.node_mut(id).children.push(child);
        }
        self.recompute(id);
        Ok(id)
    }

    fn alloc(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Some(node));
        id
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.get(id.0 as usize).is_some_and(|n| n.is_some())
    }

    pub fn node(&self, id: NodeId) -> &Node {
        self.nodes[id.0 as usize]
            .as_ref()
            .unwrap_or_else(|| panic!("node {id} is not live"))
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes[id.0 as usize]
            .as_mut()
            .unwrap_or_else(|| panic!("node {id} is not live"))
    }

    pub fn members(&self) -> impl Iterator<Item = MemberId> + '_ {
        self.leaves.keys().copied()
    }

    pub fn leaf_of(&self, member: MemberId) -> Option<NodeId> {
        self.leaves.get(&member).copied()
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.node(id).parent
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.node(id).children
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.node(id).is_leaf()
    }

    pub fn code(&self, id: NodeId) -> Option<&NodeCode> {
        self.node(id).code.as_ref()
    }

    pub fn set_code(&mut self, id: NodeId, code: Option<NodeCode>) {
        self.node_mut(id).code = code;
    }

    pub fn key(&self, id: NodeId) -> Option<&SymKey> {
        self.node(id).key.as_ref()
    }

    pub fn set_key(&mut self, id: NodeId, key: SymKey) {
        self.node_mut(id).key = Some(key);
    }

    pub fn leaf_count(&self, id: NodeId) -> usize {
        self.node(id).leaf_count as usize
    }

    /// Sum over all leaves of their depth (edges to the root).
    pub fn total_leaf_depth(&self) -> u64 {
        self.node(self.root).depth_sum
    }

    pub fn height(&self) -> usize {
        fn h(t: &KeyTree, id: NodeId) -> usize {
            t.children(id).iter().map(|&c| 1 + h(t, c)).max().unwrap_or(0)
        }
        h(self, self.root)
    }

    pub fn depth(&self, id: NodeId) -> usize {
        self.ancestors(id).len()
    }

    /// Ancestors of `id`, parent first.
    pub fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.node(id).parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.node(p).parent;
        }
        out
    }

    pub fn sibling(&self, id: NodeId) -> Option<NodeId> {
        let p = self.node(id).parent?;
        self.children(p).iter().copied().find(|&c| c != id)
    }

    /// Leaves under `id`, left to right.
    pub fn leaves_under(&self, id: NodeId) -> Vec<MemberId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.node(n);
            if let Some(m) = node.member {
                out.push(m);
            }
            stack.extend(node.children.iter().rev());
        }
        out
    }

    /// Live node ids in preorder.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.node(n).children.iter().rev());
        }
        out
    }

    pub fn path_to_root(&self, member: MemberId) -> Result<PathView> {
        let leaf = self.leaf_of(member).ok_or(Error::UnknownMember(member))?;
        Ok(PathView {
            leaf,
            entries: self
                .ancestors(leaf)
                .into_iter()
                .map(|id| (id, self.code(id).cloned()))
                .collect(),
        })
    }

    /// Display name: `K_i` for the leaf of `u_i`, `K_{a,b}` for an internal
    /// node whose leaves span member numbers `a..=b`.
    pub fn label(&self, id: NodeId) -> String {
        let members = self.leaves_under(id);
        if let (true, Some(m)) = (self.is_leaf(id), self.node(id).member) {
            return format!("K_{}", m.0);
        }
        let lo = members.iter().map(|m| m.0).min().unwrap_or(0);
        let hi = members.iter().map(|m| m.0).max().unwrap_or(0);
        format!("K_{{{lo},{hi}}}")
    }

    pub fn shape(&self) -> TreeShape {
        let mut nodes = BTreeMap::new();
        for id in self.preorder() {
            let n = self.node(id);
            nodes.insert(
                id,
                ShapeNode {
                    parent: n.parent,
                    children: n.children.clone(),
                    member: n.member,
                },
            );
        }
        TreeShape {
            root: self.root,
            nodes,
            leaves: self.leaves.clone(),
        }
    }

    fn recompute(&mut self, id: NodeId) {
        let arity = self.arity.get();
        let (leaf_count, depth_sum, insert_cost) = {
            let node = self.node(id);
            if node.is_leaf() {
                (1u32, 0u64, 1u32)
            } else {
                let mut lc = 0u32;
                let mut ds = 0u64;
                let mut best = u32::MAX;
                for &c in &node.children {
                    let cn = self.node(c);
                    lc += cn.leaf_count;
                    ds += cn.depth_sum + cn.leaf_count as u64;
                    best = best.min(cn.insert_cost + 1);
                }
                if node.children.len() < arity {
                    best = 1;
                }
                (lc, ds, best)
            }
        };
        let node = self.node_mut(id);
        node.leaf_count = leaf_count;
        node.depth_sum = depth_sum;
        node.insert_cost = insert_cost;
    }

    fn refresh_upwards(&mut self, from: NodeId) {
        let mut cur = Some(from);
        while let Some(id) = cur {
            self.recompute(id);
            cur = self.node(id).parent;
        }
    }

    /// Shallowest place to add a leaf: a free slot wins ties against a split;
    /// among equals the leftmost is chosen.
    pub fn insertion_point(&self) -> InsertionPoint {
        let arity = self.arity.get();
        let mut cur = self.root;
        loop {
            let node = self.node(cur);
            if node.is_leaf() {
                return InsertionPoint::Split(cur);
            }
            if node.children.len() < arity {
                return InsertionPoint::Slot(cur);
            }
            cur = *node
                .children
                .iter()
                .min_by_key(|&&c| self.node(c).insert_cost)
                .expect("internal node has children");
        }
    }

    pub fn insert_member(
        &mut self,
        at: InsertionPoint,
        member: MemberId,
        key: Option<SymKey>,
    ) -> Result<Inserted> {
        if self.leaves.contains_key(&member) {
            return Err(Error::DuplicateMember(member));
        }
        let mut leaf = Node::new(None);
        leaf.member = Some(member);
        leaf.key = key;
        match at {
            InsertionPoint::Slot(parent) => {
                if self.is_leaf(parent) || self.children(parent).len() >= self.arity.get() {
                    return Err(Error::UnknownNode(parent));
                }
                leaf.parent = Some(parent);
                let id = self.alloc(leaf);
                self.node_mut(parent).children.push(id);
                self.leaves.insert(member, id);
                self.refresh_upwards(id);
                Ok(Inserted {
                    leaf: id,
                    split_parent: None,
                })
            }
            InsertionPoint::Split(old) => {
                if !self.contains(old) || !self.is_leaf(old) {
                    return Err(Error::UnknownNode(old));
                }
                let grand = self.node(old).parent;
                let mid = self.alloc(Node::new(grand));
                leaf.parent = Some(mid);
                let id = self.alloc(leaf);
                self.replace_child(grand, old, mid);
                self.node_mut(old).parent = Some(mid);
                self.node_mut(mid).children = vec![old, id];
                self.leaves.insert(member, id);
                self.refresh_upwards(old);
                self.refresh_upwards(id);
                Ok(Inserted {
                    leaf: id,
                    split_parent: Some(mid),
                })
            }
        }
    }

    fn replace_child(&mut self, parent: Option<NodeId>, old: NodeId, new: NodeId) {
        match parent {
            Some(p) => {
                let slot = self
                    .node_mut(p)
                    .children
                    .iter_mut()
                    .find(|c| **c == old)
                    .expect("old is a child of parent");
                *slot = new;
            }
            None => self.root = new,
        }
    }

    /// Deletes each leaver's leaf; a parent left with one child is replaced
    /// by that child (the child keeps its own id, code and key).
    pub fn remove_leaves(&mut self, leavers: &[MemberId]) -> Result<Removal> {
        let mut seen = HashSet::new();
        for &m in leavers {
            if !self.leaves.contains_key(&m) {
                return Err(Error::UnknownMember(m));
            }
            if !seen.insert(m) {
                return Err(Error::DuplicateMember(m));
            }
        }
        if !leavers.is_empty() && seen.len() == self.leaves.len() {
            return Err(Error::TotalDeparture);
        }
        let mut out = Removal::default();
        for &m in leavers {
            let leaf = self.leaves[&m];
            out.former_parents.insert(m, self.parent(leaf));
        }
        for &m in leavers {
            let leaf = self.leaves.remove(&m).expect("validated");
            let parent = self.node(leaf).parent.expect("non-root: not a total departure");
            self.node_mut(parent).children.retain(|&c| c != leaf);
            self.nodes[leaf.0 as usize] = None;
            out.deleted.push(leaf);
            if self.children(parent).len() == 1 {
                let child = self.children(parent)[0];
                let grand = self.node(parent).parent;
                self.node_mut(child).parent = grand;
                self.replace_child(grand, parent, child);
                self.nodes[parent.0 as usize] = None;
                out.deleted.push(parent);
                out.promotions.push(Promotion {
                    promoted: child,
                    vacated: parent,
                });
                self.refresh_upwards(grand.unwrap_or(child));
            } else {
                self.refresh_upwards(parent);
            }
        }
        Ok(out)
    }

    /// Roots of the maximal leaver-free subtrees, left to right. Found by
    /// splitting the tree at every node whose subtree still holds a leaver.
    pub fn compute_cover(&self, leavers: &[MemberId]) -> Result<Vec<NodeId>> {
        let mut tainted = HashSet::new();
        for &m in leavers {
            let leaf = self.leaf_of(m).ok_or(Error::UnknownMember(m))?;
            tainted.insert(leaf);
            for a in self.ancestors(leaf) {
                if !tainted.insert(a) {
                    break;
                }
            }
        }
        let mut cover = Vec::new();
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            if !tainted.contains(&n) {
                cover.push(n);
            } else {
                stack.extend(self.children(n).iter().rev());
            }
        }
        Ok(cover)
    }

    /// Puts a new root above the current root and the `incoming` tree.
    ///
    /// The new root takes the current root's code minus its last digit; the
    /// incoming top gets a fresh child code of the new root and its internal
    /// nodes are re-coded beneath it. Nodes of the current tree keep their
    /// ids, codes and keys; incoming nodes get fresh ids (see
    /// [`Attached::remap`]) and keep their keys.
    pub fn attach_subtree<R: RngCore + ?Sized>(
        &mut self,
        incoming: KeyTree,
        rng: &mut R,
    ) -> Result<Attached> {
        if self.arity != Arity::Binary || incoming.arity != Arity::Binary {
            return Err(Error::NotBinary);
        }
        for m in incoming.leaves.keys() {
            if self.leaves.contains_key(m) {
                return Err(Error::DuplicateMember(*m));
            }
        }
        let old_root = self.root;
        let old_code = self.code(old_root).cloned().ok_or(Error::UncodedRoot)?;
        let new_root_code = match parent_code(&old_code) {
            Ok(c) => c,
            Err(Error::RootLevelCode) => return Err(Error::RootCodeExhausted),
            Err(e) => return Err(e),
        };
        let top_code = child_code(&new_root_code, &[old_code.last_digit()], rng)?;

        let new_root = self.alloc(Node::new(None));
        let mut remap = BTreeMap::new();
        let incoming_top = self.graft(&incoming, incoming.root, new_root, &mut remap);
        self.node_mut(old_root).parent = Some(new_root);
        {
            let root = self.node_mut(new_root);
            root.children = vec![old_root, incoming_top];
            root.code = Some(new_root_code);
        }
        self.root = new_root;
        self.recode_incoming(incoming_top, top_code, rng)?;
        self.recompute(new_root);
        Ok(Attached {
            new_root,
            incoming_top,
            remap,
        })
    }

    fn graft(
        &mut self,
        src: &KeyTree,
        src_id: NodeId,
        parent: NodeId,
        remap: &mut BTreeMap<NodeId, NodeId>,
    ) -> NodeId {
        let s = src.node(src_id);
        let mut n = Node::new(Some(parent));
        n.key = s.key;
        n.member = s.member;
        let id = self.alloc(n);
        remap.insert(src_id, id);
        if let Some(m) = s.member {
            self.leaves.insert(m, id);
        }
        let kids: Vec<NodeId> = s
            .children
            .iter()
            .map(|&c| self.graft(src, c, id, remap))
            .collect();
        self.node_mut(id).children = kids;
        self.recompute(id);
        id
    }

    fn recode_incoming<R: RngCore + ?Sized>(
        &mut self,
        top: NodeId,
        top_code: NodeCode,
        rng: &mut R,
    ) -> Result<()> {
        self.node_mut(top).code = Some(top_code);
        let mut stack = vec![top];
        while let Some(id) = stack.pop() {
            let code = self.code(id).cloned().expect("assigned before push");
            let kids = self.children(id).to_vec();
            let mut taken = Vec::new();
            for c in kids {
                if self.is_leaf(c) {
                    self.node_mut(c).code = None;
                    continue;
                }
                let cc = child_code(&code, &taken, rng)?;
                taken.push(cc.last_digit());
                self.node_mut(c).code = Some(cc);
                stack.push(c);
            }
        }
        Ok(())
    }

    /// Indented dump: id, code, key fingerprint and member per line.
    pub fn render_with(&self, key_of: impl Fn(NodeId) -> Option<SymKey>) -> String {
        let mut out = String::new();
        let mut stack = vec![(self.root, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let n = self.node(id);
            let code = n.code.as_ref().map(|c| c.to_string()).unwrap_or_else(|| "-".into());
            let key = key_of(id).map(|k| k.fingerprint()).unwrap_or_else(|| "-".into());
            let member = n.member.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:indent$}{id} {} code={code} key={key} member={member}",
                "",
                self.label(id),
                indent = depth * 2
            );
            for &c in n.children.iter().rev() {
                stack.push((c, depth + 1));
            }
        }
        out
    }

    pub fn render(&self) -> String {
        self.render_with(|id| self.key(id).copied())
    }

    /// Checks parent/child links, the leaf↔member bijection, arity bounds and
    /// the cached aggregates. Test support.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        let order = self.preorder();
        let live = self.nodes.iter().filter(|n| n.is_some()).count();
        if order.len() != live {
            return Err(format!("{} reachable of {} live nodes", order.len(), live));
        }
        if self.node(self.root).parent.is_some() {
            return Err("root has a parent".into());
        }
        let mut leaf_members = BTreeMap::new();
        for &id in &order {
            let n = self.node(id);
            if n.children.len() > self.arity.get() {
                return Err(format!("{id} has {} children", n.children.len()));
            }
            if !n.is_leaf() && n.children.len() < 2 {
                return Err(format!("{id} is internal with one child"));
            }
            for &c in &n.children {
                if self.node(c).parent != Some(id) {
                    return Err(format!("{c} does not point back to {id}"));
                }
            }
            match (n.is_leaf(), n.member) {
                (true, Some(m)) => {
                    leaf_members.insert(m, id);
                }
                (true, None) => return Err(format!("leaf {id} has no member")),
                (false, Some(_)) => return Err(format!("internal {id} has a member")),
                _ => {}
            }
        }
        if leaf_members != self.leaves {
            return Err("leaf map out of sync".into());
        }
        let mut copy = self.clone();
        for &id in order.iter().rev() {
            copy.recompute(id);
            let (a, b) = (self.node(id), copy.node(id));
            if (a.leaf_count, a.depth_sum, a.insert_cost) != (b.leaf_count, b.depth_sum, b.insert_cost) {
                return Err(format!("stale aggregates at {id}"));
            }
        }
        Ok(())
    }
}

/// Sizes of `n` items split into at most `d` near-equal parts, larger first.
fn split_sizes(n: usize, d: usize) -> Vec<usize> {
    let parts = d.min(n);
    let base = n / parts;
    let rem = n % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ids(range: std::ops::RangeInclusive<u32>) -> Vec<MemberId> {
        range.map(MemberId).collect()
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(11)
    }

    fn code(s: &str) -> NodeCode {
        s.parse().unwrap()
    }

    #[test]
    fn eight_members_binary() {
        let t = KeyTree::build_balanced(&ids(1..=8), Arity::Binary, Some(code("278")), &mut rng()).unwrap();
        assert_eq!(t.height(), 3);
        let internal = t.preorder().into_iter().filter(|&i| !t.is_leaf(i)).count();
        assert_eq!(internal, 7);
        t.check_structure().unwrap();
        for m in t.members() {
            assert_eq!(t.path_to_root(m).unwrap().len(), 3);
        }
        assert_eq!(t.total_leaf_depth(), 24);
    }

    #[test]
    fn single_member_is_leaf_root() {
        let t = KeyTree::build_balanced(&[MemberId(1)], Arity::Binary, Some(code("12345678")), &mut rng()).unwrap();
        assert!(t.is_leaf(t.root()));
        assert_eq!(t.code(t.root()), Some(&code("12345678")));
        assert!(t.path_to_root(MemberId(1)).unwrap().is_empty());
    }

    #[test]
    fn empty_member_set_is_rejected() {
        assert_eq!(
            KeyTree::build_balanced(&[], Arity::Binary, None, &mut rng()).unwrap_err(),
            Error::EmptyMemberSet
        );
    }

    #[test]
    fn ternary_heights() {
        for (n, h) in [(9, 2), (10, 3), (27, 3), (256, 6)] {
            let t = KeyTree::build_balanced(&ids(1..=n), Arity::Ternary, None, &mut rng()).unwrap();
            assert_eq!(t.height(), h, "n={n}");
            t.check_structure().unwrap();
        }
    }

    #[test]
    fn child_codes_extend_parent() {
        let t = KeyTree::build_balanced(&ids(1..=4), Arity::Binary, Some(code("278")), &mut rng()).unwrap();
        let root = t.root();
        assert_eq!(t.code(root).unwrap().to_string(), "278");
        let kids = t.children(root);
        let a = t.code(kids[0]).unwrap();
        let b = t.code(kids[1]).unwrap();
        assert!(a.to_string().starts_with("278") && a.len() == 4);
        assert_eq!(parent_code(a).unwrap(), code("278"));
        assert_ne!(a, b);
    }

    #[test]
    fn child_and_parent_code() {
        let mut r = rng();
        let c = child_code(&code("27"), &[], &mut r).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(parent_code(&c).unwrap(), code("27"));
        assert_eq!(parent_code(&code("278")).unwrap(), code("27"));
        assert_eq!(parent_code(&code("2734")).unwrap(), code("273"));
        assert_eq!(parent_code(&code("2")).unwrap_err(), Error::RootLevelCode);
        let all: Vec<u8> = (0..10).collect();
        assert_eq!(
            child_code(&code("27"), &all, &mut r).unwrap_err(),
            Error::CodeAlphabetExhausted(10)
        );
        for _ in 0..50 {
            let x = child_code(&code("27"), &[], &mut r).unwrap();
            let y = child_code(&code("27"), &[x.last_digit()], &mut r).unwrap();
            assert_ne!(x, y);
        }
    }

    #[test]
    fn code_parsing() {
        assert_eq!("".parse::<NodeCode>().unwrap_err(), Error::EmptyCode);
        assert!("27a".parse::<NodeCode>().is_err());
        assert_eq!(code("0123").to_string(), "0123");
    }

    #[test]
    fn attach_shortens_root_code() {
        let mut r = rng();
        let mut cur = KeyTree::build_balanced(&ids(1..=4), Arity::Binary, Some(code("278")), &mut r).unwrap();
        let old_root = cur.root();
        let before: Vec<_> = cur.preorder().into_iter().map(|i| (i, cur.code(i).cloned())).collect();
        let inc = KeyTree::build_balanced(&ids(5..=7), Arity::Binary, None, &mut r).unwrap();
        let h_cur = cur.height();
        let h_inc = inc.height();
        let att = cur.attach_subtree(inc, &mut r).unwrap();
        cur.check_structure().unwrap();
        assert_eq!(cur.code(att.new_root).unwrap().to_string(), "27");
        let top = cur.code(att.incoming_top).unwrap();
        assert_eq!(top.len(), 3);
        assert!(code("27").is_prefix_of(top));
        assert_ne!(top.last_digit(), 8);
        assert_eq!(cur.height(), 1 + h_cur.max(h_inc));
        assert_eq!(cur.children(att.new_root), &[old_root, att.incoming_top]);
        for (id, c) in before {
            assert_eq!(cur.code(id).cloned(), c);
        }
        // u5's path: K_{5,6} (4 digits), K_{5,7} (top), root "27"
        let p = cur.path_to_root(MemberId(5)).unwrap();
        assert_eq!(p.len(), 3);
        let codes = p.codes();
        assert_eq!(codes[2], "27");
        assert_eq!(codes[1], top.to_string());
        assert!(codes[0].starts_with(&codes[1]) && codes[0].len() == 4);
        assert_eq!(cur.path_to_root(MemberId(7)).unwrap().len(), 2);
    }

    #[test]
    fn attach_single_leaf() {
        let mut r = rng();
        let mut cur = KeyTree::build_balanced(&ids(1..=2), Arity::Binary, Some(code("5555")), &mut r).unwrap();
        let inc = KeyTree::singleton(MemberId(3), Arity::Binary, None);
        let att = cur.attach_subtree(inc, &mut r).unwrap();
        assert!(cur.is_leaf(att.incoming_top));
        assert_eq!(cur.children(cur.root())[1], att.incoming_top);
        assert_eq!(cur.code(att.incoming_top).unwrap().len(), 4);
    }

    #[test]
    fn attach_exhausts_root_code() {
        let mut r = rng();
        let mut cur = KeyTree::build_balanced(&ids(1..=2), Arity::Binary, Some(code("7")), &mut r).unwrap();
        let inc = KeyTree::singleton(MemberId(3), Arity::Binary, None);
        assert_eq!(cur.attach_subtree(inc, &mut r).unwrap_err(), Error::RootCodeExhausted);
    }

    #[test]
    fn removal_of_u1_u4_u8() {
        let mut t = KeyTree::build_balanced(&ids(1..=8), Arity::Binary, Some(code("278")), &mut rng()).unwrap();
        let parent = |t: &KeyTree, m| t.parent(t.leaf_of(MemberId(m)).unwrap()).unwrap();
        let k12 = parent(&t, 1);
        let k34 = parent(&t, 4);
        let k78 = parent(&t, 8);
        let leaf = |t: &KeyTree, m| t.leaf_of(MemberId(m)).unwrap();
        let (l2, l3, l7) = (leaf(&t, 2), leaf(&t, 3), leaf(&t, 7));
        let removal = t.remove_leaves(&[MemberId(1), MemberId(4), MemberId(8)]).unwrap();
        t.check_structure().unwrap();
        assert_eq!(
            removal.promotions,
            vec![
                Promotion { promoted: l2, vacated: k12 },
                Promotion { promoted: l3, vacated: k34 },
                Promotion { promoted: l7, vacated: k78 },
            ]
        );
        assert_eq!(t.len(), 5);
        assert_eq!(t.depth(l2), 2);
    }

    #[test]
    fn remove_edge_cases() {
        let mut t = KeyTree::build_balanced(&ids(1..=2), Arity::Binary, None, &mut rng()).unwrap();
        assert!(t.remove_leaves(&[]).unwrap().promotions.is_empty());
        assert_eq!(t.remove_leaves(&[MemberId(9)]).unwrap_err(), Error::UnknownMember(MemberId(9)));
        assert_eq!(
            t.remove_leaves(&[MemberId(1), MemberId(2)]).unwrap_err(),
            Error::TotalDeparture
        );
        t.remove_leaves(&[MemberId(1)]).unwrap();
        assert!(t.is_leaf(t.root()));
        assert_eq!(t.node(t.root()).member, Some(MemberId(2)));
    }

    #[test]
    fn cover_of_u1_u4_u8() {
        let t = KeyTree::build_balanced(&ids(1..=8), Arity::Binary, None, &mut rng()).unwrap();
        let cover = t.compute_cover(&[MemberId(1), MemberId(4), MemberId(8)]).unwrap();
        let labels: Vec<_> = cover.iter().map(|&c| t.label(c)).collect();
        assert_eq!(labels, ["K_2", "K_3", "K_{5,6}", "K_7"]);
        assert_eq!(t.compute_cover(&[]).unwrap(), vec![t.root()]);
        let half = t.compute_cover(&ids(5..=8)).unwrap();
        assert_eq!(half, vec![t.children(t.root())[0]]);
    }

    #[test]
    fn insertion_prefers_shallow_slots() {
        let mut t = KeyTree::build_balanced(&ids(1..=7), Arity::Binary, None, &mut rng()).unwrap();
        let at = t.insertion_point();
        let InsertionPoint::Split(leaf) = at else { panic!("binary trees split") };
        assert_eq!(t.depth(leaf), 2);
        let ins = t.insert_member(at, MemberId(8), None).unwrap();
        t.check_structure().unwrap();
        assert_eq!(t.height(), 3);
        assert_eq!(t.sibling(ins.leaf), Some(leaf));

        let mut t3 = KeyTree::build_balanced(&ids(1..=4), Arity::Ternary, None, &mut rng()).unwrap();
        // [2,1,1]: root is full, the 2-leaf child has a slot at depth 1
        let at = t3.insertion_point();
        assert!(matches!(at, InsertionPoint::Slot(_)));
        let ins = t3.insert_member(at, MemberId(5), None).unwrap();
        assert!(ins.split_parent.is_none());
        t3.check_structure().unwrap();
        assert_eq!(t3.depth(ins.leaf), 2);
    }

    #[test]
    fn render_is_deterministic() {
        let t = KeyTree::build_balanced(&ids(1..=3), Arity::Binary, Some(code("91")), &mut rng()).unwrap();
        let s = t.render();
        assert_eq!(s, t.render());
        assert!(s.starts_with("#0 K_{1,3} code=91 key=- member=-"));
        assert_eq!(s.lines().count(), 5);
    }

    #[test]
    fn shape_ancestors_match_tree() {
        let t = KeyTree::build_balanced(&ids(1..=6), Arity::Binary, None, &mut rng()).unwrap();
        let shape = t.shape();
        for m in t.members() {
            let leaf = t.leaf_of(m).unwrap();
            assert_eq!(shape.ancestors(leaf), t.ancestors(leaf));
        }
        assert_eq!(shape.sibling_triples().count(), 5);
    }
}
