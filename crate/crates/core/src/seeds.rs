//! Seed derivation for per-episode and per-role random streams.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable child seed for `(base, role, index)`.
pub fn derive(base: u64, role: Role, index: u64) -> u64 {
    mix64(mix64(base ^ (role as u64).wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Tape = 1,
    Context = 2,
    Start = 3,
    Candidate = 4,
    Bootstrap = 5,
    Weights = 6,
}
