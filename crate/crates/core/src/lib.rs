//! Group rekeying for secure multicast: the node-code batch scheme, LKH, OFT
//! and OKD baselines, an exact cost meter, a deterministic simulator and a
//! knowledge-closure secrecy checker.

pub mod baselines;
pub mod ckcs;
pub mod crypto;
pub mod error;
pub mod exec;
pub mod protocol;
pub mod schemes;
pub mod security;
pub mod sim;
pub mod tree;
pub mod vectors;

pub use crate::ckcs::{CkcsMember, CkcsServer};
pub use crate::crypto::{KeyRole, SymKey};
pub use crate::error::{Error, Result};
pub use crate::protocol::{
    Counters, KeyServer, MemberState, MembershipEvent, Meter, ProtocolId, RekeyContext, RekeyOutcome,
};
pub use crate::tree::{Arity, KeyTree, MemberId, NodeCode, NodeId};
