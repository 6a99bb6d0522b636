//! Purpose-split seed derivation. Every random draw in a run comes from
//! `derive_seed(master, stream, index)`, so a run can resume at any step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    Init,
    Data,
    Mask,
    Merge,
    Query,
    HeldOut,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x11,
            Stream::Data => 0x22,
            Stream::Mask => 0x33,
            Stream::Merge => 0x44,
            Stream::Query => 0x55,
            Stream::HeldOut => 0x66,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ stream.tag()) ^ index)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
