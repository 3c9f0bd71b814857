//! Choosing which members leave.

use rand::seq::index;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::sim::scenario::Layout;
use crate::tree::{KeyTree, MemberId};

/// `m` current members to remove from `tree`, left to right in tree order
/// except for [`Layout::Random`], which returns them in draw order.
pub fn leaver_layout<R: RngCore + ?Sized>(tree: &KeyTree, m: usize, layout: Layout, rng: &mut R) -> Result<Vec<MemberId>> {
    let n = tree.len();
    let infeasible = || Error::InfeasibleLayout {
        layout: layout.to_string(),
        m,
    };
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    if m >= n {
        return Err(infeasible());
    }
    let leaves = tree.leaves_under(tree.root());
    match layout {
        Layout::Random => Ok(index::sample(rng, n, m).into_iter().map(|i| leaves[i]).collect()),
        Layout::BestHalf => {
            let half = tree
                .children(tree.root())
                .iter()
                .copied()
                .find(|&c| tree.leaf_count(c) >= m)
                .ok_or_else(infeasible)?;
            Ok(tree.leaves_under(half).into_iter().take(m).collect())
        }
        Layout::WorstSpread => Ok((0..m).map(|i| leaves[i * n / m]).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Arity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tree(n: u32) -> KeyTree {
        let ids: Vec<_> = (1..=n).map(MemberId).collect();
        KeyTree::build_balanced(&ids, Arity::Binary, None, &mut ChaCha20Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn best_half_gives_single_cover() {
        let t = tree(16);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let leavers = leaver_layout(&t, 8, Layout::BestHalf, &mut rng).unwrap();
        assert_eq!(t.compute_cover(&leavers).unwrap().len(), 1);
    }

    #[test]
    fn worst_spread_on_eight() {
        let t = tree(8);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let leavers = leaver_layout(&t, 3, Layout::WorstSpread, &mut rng).unwrap();
        assert_eq!(leavers, [MemberId(1), MemberId(3), MemberId(6)]);
        assert_eq!(t.compute_cover(&leavers).unwrap().len(), 4);
    }

    #[test]
    fn rejects_degenerate_requests() {
        let t = tree(8);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(leaver_layout(&t, 0, Layout::Random, &mut rng).unwrap_err(), Error::EmptyBatch);
        assert!(leaver_layout(&t, 8, Layout::Random, &mut rng).is_err());
        assert!(leaver_layout(&t, 5, Layout::BestHalf, &mut rng).is_err());
        let r = leaver_layout(&t, 5, Layout::Random, &mut rng).unwrap();
        let mut d = r.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 5);
    }
}
