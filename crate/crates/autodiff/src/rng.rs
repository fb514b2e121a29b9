//! Counter-based random numbers for dropout masks.
//!
//! Every draw is a pure function of `(key, counter)`, so a mask can be
//! regenerated from the key alone and never depends on evaluation order.

#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key }
    }

    pub fn next_u64(&self, counter: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(counter.wrapping_add(0x632b_e59b_d9b4_e019)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.next_u64(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words (seed, step, layer id, ...) into one key.
pub fn derive_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
