//! Stable 64-bit content digests (FNV-1a) for config hashes and file
//! fingerprints. Not cryptographic; used for mismatch detection and
//! reproducibility checks only.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

pub fn hex_digest(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(hex_digest(b"agra"), hex_digest(b"agra"));
        assert_ne!(hex_digest(b"agra"), hex_digest(b"arga"));
    }
}
