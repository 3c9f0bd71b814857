use thiserror::Error;

use crate::tree::{MemberId, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("key must be 32 bytes, got {0}")]
    InvalidKeyLength(usize),
    #[error("invalid hex string {0:?}")]
    InvalidHex(String),
    #[error("node code must not be empty")]
    EmptyCode,
    #[error("node code {0:?} contains a non-digit")]
    InvalidCode(String),
    #[error("node code of {0} digits does not fit the 32-byte code block")]
    CodeTooLong(usize),
    #[error("a length-1 code has no parent code")]
    RootLevelCode,
    #[error("root code exhausted: cannot shorten a length-1 root code")]
    RootCodeExhausted,
    #[error("all {0} child digits of the parent code are taken")]
    CodeAlphabetExhausted(usize),
    #[error("key unwrap failed: wrong key-encrypting key")]
    UnwrapFailed,

    #[error("member set must not be empty")]
    EmptyMemberSet,
    #[error("arity {0} is not supported (use 2 or 3)")]
    UnsupportedArity(u8),
    #[error("operation requires a binary tree")]
    NotBinary,
    #[error("tree root carries no node code")]
    UncodedRoot,
    #[error("unknown member {0}")]
    UnknownMember(MemberId),
    #[error("member {0} is already (or was previously) in the group")]
    DuplicateMember(MemberId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("removing every member would end the group")]
    TotalDeparture,
    #[error("membership batch must not be empty")]
    EmptyBatch,

    #[error("bootstrap for {0} does not match any payload in the join message")]
    BootstrapMismatch(MemberId),
    #[error("{0} holds no key that unwraps a payload of the message")]
    NoUnwrappablePayload(MemberId),
    #[error("{member} cannot compute the key of node {node}")]
    MissingKey { member: MemberId, node: NodeId },

    #[error("scenario line {line}: {msg}")]
    Scenario { line: usize, msg: String },
    #[error("layout {layout} infeasible for m={m} on this tree")]
    InfeasibleLayout { layout: String, m: usize },
    #[error("probe check failed after event {seq}: {detail}")]
    ProbeFailure { seq: u64, detail: String },
    #[error("member/server disagreement after event {seq}: {detail}")]
    Disagreement { seq: u64, detail: String },
    #[error("golden vector line {line} ({function}): {detail}")]
    Vector {
        line: usize,
        function: String,
        detail: String,
    },
    #[error("witness replay failed at step {step}: {detail}")]
    WitnessReplay { step: usize, detail: String },
}
