//! Merkle signature scheme: a many-time wrapper over Winternitz leaves.
//!
//! A key of height h commits to 2^h one-time keys by a binary hash tree; the
//! 32-byte root is the public key. Each signature names its leaf, carries the
//! Winternitz signature, and proves leaf membership with the authentication
//! path. Leaf secrets are derived on demand from a 32-byte seed, so the
//! private key stays tiny and the tree is a rebuildable cache rather than
//! state that must be carried around.
//!
//! Like the Winternitz layer, this module is stateless about which leaves
//! were spent; leaf allocation and exhaustion are the key-pair layer's job.

use super::drbg::Drbg;
use super::hash::{digest_parts, DomainTag, DIGEST_LEN};
use super::wots;

/// Heights are capped so a mistyped config cannot ask for a 2^40-leaf keygen.
pub const MIN_HEIGHT: u32 = 1;
pub const MAX_HEIGHT: u32 = 16;

/// All interior nodes of the commitment tree, bottom level first.
/// Rebuildable from (seed, height); cached by the key-pair layer because a
/// rebuild costs a full keygen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    levels: Vec<Vec<[u8; DIGEST_LEN]>>,
}

impl MerkleTree {
    pub fn root(&self) -> [u8; DIGEST_LEN] {
        self.levels.last().unwrap()[0]
    }

    pub fn auth_path(&self, leaf: u64) -> Vec<u8> {
        let height = self.levels.len() - 1;
        let mut path = Vec::with_capacity(height * DIGEST_LEN);
        let mut idx = leaf as usize;
        for level in &self.levels[..height] {
            path.extend(level[idx ^ 1]);
            idx >>= 1;
        }
        path
    }
}

/// Generate a key: draws a 32-byte seed from the stream and builds the tree.
/// Returns (root, seed, tree).
pub fn keygen(height: u32, rng: &mut Drbg) -> (Vec<u8>, Vec<u8>, MerkleTree) {
    assert!((MIN_HEIGHT..=MAX_HEIGHT).contains(&height));
    let seed = rng.bytes(32);
    let tree = build_tree(&seed, height);
    (tree.root().to_vec(), seed, tree)
}

/// Rebuild the commitment tree for a seed.
pub fn build_tree(seed: &[u8], height: u32) -> MerkleTree {
    let n_leaves = 1usize << height;
    let mut level: Vec<[u8; DIGEST_LEN]> = Vec::with_capacity(n_leaves);
    for i in 0..n_leaves {
        let wots_public = wots::derive_public(&leaf_private(seed, i as u64));
        level.push(digest_parts(DomainTag::Leaf, &[&wots_public]));
    }
    let mut levels = vec![level];
    while levels.last().unwrap().len() > 1 {
        let prev = levels.last().unwrap();
        let next: Vec<[u8; DIGEST_LEN]> = prev
            .chunks(2)
            .map(|pair| digest_parts(DomainTag::Node, &[&pair[0], &pair[1]]))
            .collect();
        levels.push(next);
    }
    MerkleTree { levels }
}

/// Derive the Winternitz private key for one leaf from the seed.
pub fn leaf_private(seed: &[u8], leaf: u64) -> Vec<u8> {
    let mut private = Vec::with_capacity(wots::KEY_LEN);
    let leaf_bytes = (leaf as u32).to_be_bytes();
    for chain in 0..wots::LEN as u16 {
        private.extend(digest_parts(
            DomainTag::Drbg,
            &[seed, &leaf_bytes, &chain.to_be_bytes()],
        ));
    }
    private
}

/// Sign with a specific leaf. The payload is wots_sig || auth_path; the leaf
/// index travels separately in the signature structure.
pub fn sign(seed: &[u8], tree: &MerkleTree, leaf: u64, msg: &[u8]) -> Vec<u8> {
    let mut payload = wots::sign(&leaf_private(seed, leaf), msg);
    payload.extend(tree.auth_path(leaf));
    payload
}

/// Payload length for a given height.
pub fn payload_len(height: u32) -> usize {
    wots::KEY_LEN + height as usize * DIGEST_LEN
}

/// Verify a payload against the 32-byte root. The height is inferred from
/// the authentication path length. Returns None when the payload is not even
/// structurally a signature (wrong framing), Some(bool) otherwise.
pub fn verify(root: &[u8], msg: &[u8], leaf: u64, payload: &[u8]) -> Option<bool> {
    if root.len() != DIGEST_LEN || payload.len() <= wots::KEY_LEN {
        return None;
    }
    let (wots_sig, path) = payload.split_at(wots::KEY_LEN);
    if path.len() % DIGEST_LEN != 0 {
        return None;
    }
    let height = (path.len() / DIGEST_LEN) as u32;
    if !(MIN_HEIGHT..=MAX_HEIGHT).contains(&height) || leaf >= (1u64 << height) {
        return None;
    }
    // Recover the implied Winternitz public key from the signature, then
    // fold the path up to the root.
    let digits_public = recover_wots_public(msg, wots_sig);
    let mut node = digest_parts(DomainTag::Leaf, &[&digits_public]);
    for (level, sibling) in path.chunks(DIGEST_LEN).enumerate() {
        node = if (leaf >> level) & 1 == 0 {
            digest_parts(DomainTag::Node, &[&node, sibling])
        } else {
            digest_parts(DomainTag::Node, &[sibling, &node])
        };
    }
    Some(node == root)
}

/// Walk every chain to its end as verification does, yielding the candidate
/// public key the signature implies for this message.
fn recover_wots_public(msg: &[u8], sig: &[u8]) -> Vec<u8> {
    let digest = digest_parts(DomainTag::Wots, &[msg]);
    let mut digits = [0u8; wots::LEN];
    for (i, byte) in digest.iter().enumerate() {
        digits[2 * i] = byte >> 4;
        digits[2 * i + 1] = byte & 0x0f;
    }
    let checksum: u32 = digits[..wots::LEN1].iter().map(|&d| 15 - d as u32).sum();
    digits[wots::LEN1] = ((checksum >> 8) & 0x0f) as u8;
    digits[wots::LEN1 + 1] = ((checksum >> 4) & 0x0f) as u8;
    digits[wots::LEN1 + 2] = (checksum & 0x0f) as u8;

    let mut public = Vec::with_capacity(wots::KEY_LEN);
    for (i, &d) in digits.iter().enumerate() {
        let mut v: [u8; 32] = sig[i * 32..(i + 1) * 32].try_into().unwrap();
        for _ in 0..(15 - d as usize) {
            v = digest_parts(DomainTag::Wots, &[&v]);
        }
        public.extend(v);
    }
    public
}
