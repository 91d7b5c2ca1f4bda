use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Stream tags so independent consumers of one seed never share a sequence.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_CORPUS: u64 = 2;
pub const STREAM_BATCH: u64 = 3;
pub const STREAM_EXAMPLE: u64 = 4;
pub const STREAM_EVAL: u64 = 5;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator determined entirely by `(seed, stream, a, b)`.
pub fn derive(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let k = mix(mix(mix(seed ^ mix(stream)) ^ a) ^ b.rotate_left(17));
    ChaCha8Rng::seed_from_u64(k)
}
