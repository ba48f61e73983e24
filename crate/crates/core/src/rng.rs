//! Named random sub-streams derived from one master seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream, so turning
//! an ablation on or off does not shift the draws seen by unrelated parts of
//! the run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    InitNet1,
    InitNet2,
    ShuffleNet1,
    ShuffleNet2,
    MixupNet1,
    MixupNet2,
    WrongBranchNet1,
    WrongBranchNet2,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::InitNet1 => 1,
            Stream::InitNet2 => 2,
            Stream::ShuffleNet1 => 3,
            Stream::ShuffleNet2 => 4,
            Stream::MixupNet1 => 5,
            Stream::MixupNet2 => 6,
            Stream::WrongBranchNet1 => 7,
            Stream::WrongBranchNet2 => 8,
        }
    }

    pub fn init(net: usize) -> Self {
        if net == 1 {
            Stream::InitNet1
        } else {
            Stream::InitNet2
        }
    }

    pub fn shuffle(net: usize) -> Self {
        if net == 1 {
            Stream::ShuffleNet1
        } else {
            Stream::ShuffleNet2
        }
    }

    pub fn mixup(net: usize) -> Self {
        if net == 1 {
            Stream::MixupNet1
        } else {
            Stream::MixupNet2
        }
    }

    pub fn wrong_branch(net: usize) -> Self {
        if net == 1 {
            Stream::WrongBranchNet1
        } else {
            Stream::WrongBranchNet2
        }
    }
}

pub fn stream(master_seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(which.id());
    rng
}

/// A plain generator for seeds that are not split into streams (data, noise).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
