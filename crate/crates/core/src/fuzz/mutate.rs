/// xorshift64; the whole campaign draws from one stream.
#[derive(Debug, Clone)]
pub struct Xorshift64(u64);

impl Xorshift64 {
    pub fn new(seed: u64) -> Self {
        // Zero is a fixed point of xorshift.
        Xorshift64(if seed == 0 { 0x9E37_79B9_7F4A_7C15 } else { seed })
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform-ish value in `0..n`; `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

pub const INTERESTING: [u32; 7] = [0, 1, 0x7F, 0x80, 0xFF, 0x7FFF_FFFF, 0x8000_0000];

/// Applies a random stack of havoc operations. `other` is the crossover
/// partner. The result is at most `max_len` bytes.
pub fn havoc(rng: &mut Xorshift64, input: &[u8], other: &[u8], max_len: usize) -> Vec<u8> {
    let mut data = input.to_vec();
    let rounds = 1 << rng.below(4);
    for _ in 0..rounds {
        match rng.below(7) {
            0 if !data.is_empty() => {
                let bit = rng.below(data.len() * 8);
                data[bit / 8] ^= 1 << (bit % 8);
            }
            1 if !data.is_empty() => {
                let i = rng.below(data.len());
                data[i] = rng.next_u64() as u8;
            }
            2 if !data.is_empty() => {
                let v = INTERESTING[rng.below(INTERESTING.len())];
                let i = rng.below(data.len());
                if v <= 0xFF {
                    data[i] = v as u8;
                } else {
                    let bytes = v.to_le_bytes();
                    let n = bytes.len().min(data.len() - i);
                    data[i..i + n].copy_from_slice(&bytes[..n]);
                }
            }
            3 if !data.is_empty() => {
                let from = rng.below(data.len());
                let len = 1 + rng.below((data.len() - from).min(16));
                let at = rng.below(data.len() + 1);
                let block = data[from..from + len].to_vec();
                data.splice(at..at, block);
            }
            4 if data.len() > 1 => {
                let from = rng.below(data.len());
                let len = 1 + rng.below((data.len() - from).min(16));
                data.drain(from..from + len);
            }
            5 if !other.is_empty() => {
                let cut = rng.below(data.len() + 1);
                let from = rng.below(other.len());
                data.truncate(cut);
                data.extend_from_slice(&other[from..]);
            }
            _ => {
                // Grow by one random byte; also the fallback on empty input.
                let at = rng.below(data.len() + 1);
                data.insert(at, rng.next_u64() as u8);
            }
        }
    }
    data.truncate(max_len);
    data
}
