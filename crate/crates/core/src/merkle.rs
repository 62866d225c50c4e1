//! Binary Merkle trees over a block's receipt digests.

use serde::{Deserialize, Serialize};

use crate::crypto::Digest;
use crate::encoding::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// The sibling sits to the left of the running node.
    Left,
    Right,
}

pub type MerklePath = Vec<(Digest, Side)>;

fn node(left: &Digest, right: &Digest) -> Digest {
    let mut enc = Encoder::new("merkle-node");
    enc.digest(left).digest(right);
    enc.to_digest()
}

pub fn empty_root() -> Digest {
    Encoder::new("merkle-empty").to_digest()
}

/// Root of the tree. An unpaired node at the end of a level is carried up
/// unchanged.
pub fn root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return empty_root();
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [l, r] => node(l, r),
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
    }
    level[0]
}

pub fn path(leaves: &[Digest], mut index: usize) -> Option<MerklePath> {
    if index >= leaves.len() {
        return None;
    }
    let mut out = Vec::new();
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        let sibling = index ^ 1;
        if sibling < level.len() {
            let side = if sibling < index { Side::Left } else { Side::Right };
            out.push((level[sibling], side));
        }
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [l, r] => node(l, r),
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
        index /= 2;
    }
    Some(out)
}

pub fn fold(leaf: Digest, path: &[(Digest, Side)]) -> Digest {
    path.iter().fold(leaf, |acc, (sib, side)| match side {
        Side::Left => node(sib, &acc),
        Side::Right => node(&acc, sib),
    })
}
