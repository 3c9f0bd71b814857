//! What every scheme shares: membership events, rekey messages, the cost
//! meter, and the server/member traits the simulator drives.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::crypto::{self, KeyRole, SymKey, WRAPPED_LEN};
use crate::error::{Error, Result};
use crate::tree::{KeyTree, MemberId, NodeCode, NodeId, Promotion, TreeShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtocolId {
    Ckcs,
    Lkh,
    Oft,
    Okd,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 4] = [ProtocolId::Ckcs, ProtocolId::Lkh, ProtocolId::Oft, ProtocolId::Okd];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::Ckcs => "ckcs",
            ProtocolId::Lkh => "lkh",
            ProtocolId::Oft => "oft",
            ProtocolId::Okd => "okd",
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ckcs" => Ok(ProtocolId::Ckcs),
            "lkh" => Ok(ProtocolId::Lkh),
            "oft" => Ok(ProtocolId::Oft),
            "okd" => Ok(ProtocolId::Okd),
            other => Err(format!("unknown protocol {other:?} (expected ckcs, lkh, oft or okd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Join(Vec<MemberId>),
    Leave(Vec<MemberId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipEvent {
    pub seq: u64,
    pub kind: EventKind,
}

impl MembershipEvent {
    pub fn join(seq: u64, ids: Vec<MemberId>) -> Self {
        Self { seq, kind: EventKind::Join(ids) }
    }

    pub fn leave(seq: u64, ids: Vec<MemberId>) -> Self {
        Self { seq, kind: EventKind::Leave(ids) }
    }

    pub fn ids(&self) -> &[MemberId] {
        match &self.kind {
            EventKind::Join(ids) | EventKind::Leave(ids) => ids,
        }
    }

    pub fn op(&self) -> Op {
        match self.kind {
            EventKind::Join(_) => Op::Join,
            EventKind::Leave(_) => Op::Leave,
        }
    }

    /// Checks the batch against the current membership.
    pub fn validate(&self, current: &KeyTree) -> Result<()> {
        let ids = self.ids();
        if ids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut seen = HashSet::new();
        for &m in ids {
            if !seen.insert(m) {
                return Err(Error::DuplicateMember(m));
            }
            let present = current.leaf_of(m).is_some();
            match self.kind {
                EventKind::Join(_) if present => return Err(Error::DuplicateMember(m)),
                EventKind::Leave(_) if !present => return Err(Error::UnknownMember(m)),
                _ => {}
            }
        }
        if matches!(self.kind, EventKind::Leave(_)) && ids.len() >= current.len() {
            return Err(Error::TotalDeparture);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Join,
    Leave,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::Join => "join",
            Op::Leave => "leave",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "join" => Ok(Op::Join),
            "leave" => Ok(Op::Leave),
            other => Err(format!("unknown op {other:?}")),
        }
    }
}

/// Which key a wrapped payload is under, or which key it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Node(NodeId),
    /// OFT blinded key of a node.
    Blinded(NodeId),
    Group,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Node(id) => write!(f, "K{id}"),
            Label::Blinded(id) => write!(f, "g(K{id})"),
            Label::Group => f.write_str("KG"),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct WrappedKey {
    pub kek: Label,
    pub target: Label,
    pub ciphertext: [u8; WRAPPED_LEN],
}

impl WrappedKey {
    pub fn open(&self, kek: &SymKey) -> Result<SymKey> {
        let role = match self.target {
            Label::Group => KeyRole::Group,
            _ => KeyRole::Middle,
        };
        crypto::unwrap_bytes(kek, &self.ciphertext, role)
    }
}

impl fmt::Debug for WrappedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})_{}", self.target, self.kek)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recipient {
    Member(MemberId),
    /// Every member under the node.
    Subtree(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Channel {
    Unicast(MemberId),
    Multicast(Vec<Recipient>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RekeyMessage {
    pub seq: u64,
    pub channel: Channel,
    pub payloads: Vec<WrappedKey>,
}

impl RekeyMessage {
    pub fn size_in_keys(&self) -> usize {
        self.payloads.len()
    }
}

/// Secure-channel delivery to a new member. Not rekey traffic, so not metered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bootstrap {
    pub member: MemberId,
    pub leaf: NodeId,
    pub individual_key: SymKey,
    /// Ancestors from parent to root with their codes (CKCS only).
    pub path_codes: Vec<(NodeId, NodeCode)>,
    /// Code of the leaf itself when it is the root (CKCS only).
    pub leaf_code: Option<NodeCode>,
    /// Keys handed over at group setup; empty for joiners, who get theirs from messages.
    pub keys: Vec<(Label, SymKey)>,
}

impl Bootstrap {
    pub fn new(member: MemberId, leaf: NodeId, individual_key: SymKey) -> Self {
        Self {
            member,
            leaf,
            individual_key,
            path_codes: Vec::new(),
            leaf_code: None,
            keys: Vec::new(),
        }
    }
}

/// Public, keyless signal that tells current members to update keys themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notice {
    /// Group key moves to `derive(old)`; a new root with the next shorter code sits on top.
    CkcsJoin { new_root: NodeId, joiners: Vec<MemberId> },
    /// Each `(target, source)`: new key of `target` is `derive(old key of source)`.
    Derive { pairs: Vec<(NodeId, NodeId)> },
}

/// One rekey round. Batch protocols emit one per event, the baselines one per
/// member joined or removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RekeyStep {
    pub messages: Vec<RekeyMessage>,
    pub bootstraps: Vec<Bootstrap>,
    pub notice: Option<Notice>,
    pub departed: Vec<MemberId>,
    /// Nodes that no longer exist after this step.
    pub deleted: Vec<NodeId>,
    pub root: NodeId,
    /// Post-step structure; present when the context asks for it.
    pub shape: Option<TreeShape>,
}

impl RekeyStep {
    pub fn new(root: NodeId) -> Self {
        Self {
            messages: Vec::new(),
            bootstraps: Vec::new(),
            notice: None,
            departed: Vec::new(),
            deleted: Vec::new(),
            root,
            shape: None,
        }
    }

    pub fn payloads(&self) -> impl Iterator<Item = &WrappedKey> {
        self.messages.iter().flat_map(|m| m.payloads.iter())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RekeyOutcome {
    pub steps: Vec<RekeyStep>,
    /// CKCS leave: nodes whose keys wrapped the new group key.
    pub cover: Vec<NodeId>,
    /// Display labels of `cover`, taken on the pre-removal tree.
    pub cover_labels: Vec<String>,
    pub promotions: Vec<Promotion>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub keygen: u64,
    pub encrypt: u64,
    pub unicast: u64,
    pub multicast: u64,
    /// Sum of payload counts over messages.
    pub payload_keys: u64,
    pub member_derivations: u64,
    pub notices: u64,
    /// Distinct nodes that received a new key.
    pub keygen_dedup: u64,
}

impl Counters {
    /// Key generations plus encryptions.
    pub fn computational(&self) -> u64 {
        self.keygen + self.encrypt
    }

    pub fn add(&mut self, other: &Counters) {
        self.keygen += other.keygen;
        self.encrypt += other.encrypt;
        self.unicast += other.unicast;
        self.multicast += other.multicast;
        self.payload_keys += other.payload_keys;
        self.member_derivations += other.member_derivations;
        self.notices += other.notices;
        self.keygen_dedup += other.keygen_dedup;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventCost {
    pub seq: u64,
    pub counters: Counters,
}

/// Server-side cost accounting, per event and cumulative.
#[derive(Debug, Clone, Default)]
pub struct Meter {
    current: Option<(u64, Counters)>,
    events: Vec<EventCost>,
    totals: Counters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeterKind {
    Keygen,
    Encrypt,
    Unicast,
    Multicast,
    PayloadKey,
    MemberDerivation,
    Notice,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_event(&mut self, seq: u64) {
        if self.current.is_some() {
            self.end_event();
        }
        self.current = Some((seq, Counters::default()));
    }

    pub fn end_event(&mut self) -> Counters {
        match self.current.take() {
            Some((seq, c)) => {
                self.totals.add(&c);
                self.events.push(EventCost { seq, counters: c });
                c
            }
            None => Counters::default(),
        }
    }

    fn slot(&mut self) -> &mut Counters {
        &mut self.current.get_or_insert((u64::MAX, Counters::default())).1
    }

    pub fn record(&mut self, kind: MeterKind, n: u64) {
        let c = self.slot();
        match kind {
            MeterKind::Keygen => c.keygen += n,
            MeterKind::Encrypt => c.encrypt += n,
            MeterKind::Unicast => c.unicast += n,
            MeterKind::Multicast => c.multicast += n,
            MeterKind::PayloadKey => c.payload_keys += n,
            MeterKind::MemberDerivation => c.member_derivations += n,
            MeterKind::Notice => c.notices += n,
        }
    }

    fn set_dedup(&mut self, n: u64) {
        self.slot().keygen_dedup = n;
    }

    /// Counters of the event in progress.
    pub fn current(&self) -> Counters {
        self.current.map(|(_, c)| c).unwrap_or_default()
    }

    pub fn events(&self) -> &[EventCost] {
        &self.events
    }

    pub fn totals(&self) -> Counters {
        self.totals
    }
}

/// Everything a server may use while handling one event. Key generation and
/// wrapping only happen through here, so the meter cannot be bypassed.
pub struct RekeyContext<'a> {
    rng: &'a mut dyn RngCore,
    meter: &'a mut Meter,
    seq: u64,
    record_shapes: bool,
    rekeyed: HashSet<NodeId>,
}

impl<'a> RekeyContext<'a> {
    pub fn new(rng: &'a mut dyn RngCore, meter: &'a mut Meter, seq: u64) -> Self {
        meter.begin_event(seq);
        Self {
            rng,
            meter,
            seq,
            record_shapes: false,
            rekeyed: HashSet::new(),
        }
    }

    /// Attach a structure snapshot to every step (needed by members and the analyzer).
    pub fn with_shapes(mut self, on: bool) -> Self {
        self.record_shapes = on;
        self
    }

    pub fn record_shapes(&self) -> bool {
        self.record_shapes
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }

    /// A fresh random key for `node`: one key generation.
    pub fn fresh_key(&mut self, node: NodeId, role: KeyRole) -> SymKey {
        self.count_generated(node);
        crypto::random_key(self.rng, role)
    }

    /// Meter a key the server computed (rather than drew) for `node`.
    pub fn count_generated(&mut self, node: NodeId) {
        self.meter.record(MeterKind::Keygen, 1);
        self.rekeyed.insert(node);
    }

    /// One metered encryption.
    pub fn wrap(&mut self, kek_label: Label, kek: &SymKey, target: Label, payload: &SymKey) -> WrappedKey {
        self.meter.record(MeterKind::Encrypt, 1);
        WrappedKey {
            kek: kek_label,
            target,
            ciphertext: crypto::wrap_bytes(kek, payload),
        }
    }

    /// Meters the transmission and returns the message. Empty messages are not sent.
    pub fn send(&mut self, channel: Channel, payloads: Vec<WrappedKey>) -> Option<RekeyMessage> {
        if payloads.is_empty() {
            return None;
        }
        let kind = match channel {
            Channel::Unicast(_) => MeterKind::Unicast,
            Channel::Multicast(ref r) => {
                debug_assert!(!r.is_empty(), "multicast needs recipients");
                MeterKind::Multicast
            }
        };
        self.meter.record(kind, 1);
        self.meter.record(MeterKind::PayloadKey, payloads.len() as u64);
        Some(RekeyMessage {
            seq: self.seq,
            channel,
            payloads,
        })
    }

    pub fn notice(&mut self) {
        self.meter.record(MeterKind::Notice, 1);
    }

    pub fn member_derivations(&mut self, n: u64) {
        self.meter.record(MeterKind::MemberDerivation, n);
    }

    /// Closes the event and returns its counters.
    pub fn finish(self) -> Counters {
        self.meter.set_dedup(self.rekeyed.len() as u64);
        self.meter.end_event()
    }
}

/// The server side of a rekeying scheme.
pub trait KeyServer: Send + Sync {
    fn protocol(&self) -> ProtocolId;

    fn handle(&mut self, event: &MembershipEvent, ctx: &mut RekeyContext<'_>) -> Result<RekeyOutcome>;

    fn group_key(&self) -> SymKey;

    fn tree(&self) -> &KeyTree;

    fn shape(&self) -> TreeShape {
        self.tree().shape()
    }

    fn members(&self) -> Vec<MemberId> {
        self.tree().members().collect()
    }

    /// The key the server holds (or would compute) for a live node.
    fn node_key(&mut self, id: NodeId) -> Option<SymKey>;

    /// Secure-channel state for every member at setup.
    fn initial_bootstraps(&mut self) -> Vec<Bootstrap>;

    /// Structural and key-equation checks. Test support.
    fn check_invariants(&mut self) -> std::result::Result<(), String> {
        self.tree().check_structure()
    }

    /// Node codes currently in use, for the codes-public adversary.
    fn codes(&self) -> Vec<(NodeId, NodeCode)> {
        Vec::new()
    }

    fn clone_box(&self) -> Box<dyn KeyServer>;
}

impl Clone for Box<dyn KeyServer> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemberReport {
    pub derivations: u64,
    pub unwrap_misses: u64,
}

/// Keys and codes a member holds; what an adversary starts from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Knowledge {
    pub keys: Vec<(Label, SymKey)>,
    pub codes: Vec<(NodeId, NodeCode)>,
}

/// The member side of a rekeying scheme.
pub trait MemberState: Send + Sync {
    fn id(&self) -> MemberId;

    /// Processes one rekey step. Every member sees every message (the
    /// transcript is public) and opens what its keys allow.
    fn apply_step(&mut self, step: &RekeyStep) -> Result<MemberReport>;

    fn group_key(&self) -> Option<SymKey>;

    /// Keys of the member's leaf and its ancestors, as the member computes them.
    fn path_keys(&self) -> BTreeMap<NodeId, SymKey>;

    fn knowledge(&self) -> Knowledge;

    fn clone_box(&self) -> Box<dyn MemberState>;
}

impl Clone for Box<dyn MemberState> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Tries every payload wrapped under a key in `held`, in transcript order, and
/// feeds each success to `store`. Keys learnt from earlier payloads are used
/// for later ones.
pub(crate) fn open_payloads(
    step: &RekeyStep,
    held: &mut BTreeMap<Label, SymKey>,
    report: &mut MemberReport,
    mut store: impl FnMut(&mut BTreeMap<Label, SymKey>, Label, SymKey),
) {
    for p in step.payloads() {
        let Some(kek) = held.get(&p.kek).copied() else {
            continue;
        };
        match p.open(&kek) {
            Ok(k) => store(held, p.target, k),
            Err(_) => report.unwrap_misses += 1,
        }
    }
}
