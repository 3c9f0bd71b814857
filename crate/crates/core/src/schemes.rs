//! Constructing servers and members by protocol id.

use rand::RngCore;

use crate::baselines::{LkhServer, OftMember, OftServer, OkdServer, PathMember};
use crate::ckcs::{CkcsMember, CkcsServer};
use crate::error::Result;
use crate::protocol::{Bootstrap, KeyServer, MemberState, ProtocolId};
use crate::tree::{MemberId, NodeCode, TreeShape};

/// A freshly set-up group. `root_code` only matters for CKCS.
pub fn new_server<R: RngCore + ?Sized>(
    protocol: ProtocolId,
    members: &[MemberId],
    root_code: Option<NodeCode>,
    rng: &mut R,
) -> Result<Box<dyn KeyServer>> {
    Ok(match protocol {
        ProtocolId::Ckcs => Box::new(CkcsServer::new(members, root_code, rng)?),
        ProtocolId::Lkh => Box::new(LkhServer::new(members, rng)?),
        ProtocolId::Oft => Box::new(OftServer::new(members, rng)?),
        ProtocolId::Okd => Box::new(OkdServer::new(members, rng)?),
    })
}

/// Member state from a secure-channel bootstrap. `shape` is the current
/// structure for setup members; joiners pass `None` and learn it from their
/// first step.
pub fn new_member(
    protocol: ProtocolId,
    bootstrap: &Bootstrap,
    shape: Option<&TreeShape>,
) -> Result<Box<dyn MemberState>> {
    Ok(match protocol {
        ProtocolId::Ckcs => Box::new(CkcsMember::from_bootstrap(bootstrap)),
        ProtocolId::Lkh | ProtocolId::Okd => Box::new(PathMember::from_bootstrap(bootstrap)),
        ProtocolId::Oft => Box::new(OftMember::from_bootstrap(bootstrap, shape)?),
    })
}
