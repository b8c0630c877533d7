/// 64-bit FNV-1a. Feature hashing and the synthetic backends key on this, so it
/// must never change between releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn fnv1a64_str(s: &str) -> u64 {
    fnv1a64(s.as_bytes())
}

/// Hash of `salt` and `s` together.
pub fn salted(salt: &str, s: &str) -> u64 {
    let mut buf = Vec::with_capacity(salt.len() + s.len() + 1);
    buf.extend_from_slice(salt.as_bytes());
    buf.push(0);
    buf.extend_from_slice(s.as_bytes());
    fnv1a64(&buf)
}
