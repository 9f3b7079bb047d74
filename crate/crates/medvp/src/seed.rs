//! Record-keyed deterministic seeding.
//!
//! Every record gets its own RNG seed derived from the pipeline master seed
//! and the record id, so processing order and parallelism never change what
//! a record samples.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Derive a per-record seed from the pipeline master seed and a record id.
///
/// The hash is FNV-1a (64-bit) over the little-endian bytes of
/// `master_seed` followed by the UTF-8 bytes of `record_id`. This mapping
/// is frozen: identical inputs yield identical seeds on every platform and
/// in every release, which is what makes "randomly selected" prompt
/// attributes reproducible.
pub fn derive_seed(master_seed: u64, record_id: &str) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in master_seed
        .to_le_bytes()
        .iter()
        .chain(record_id.as_bytes().iter())
    {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}
