//! Seeded random streams.
//!
//! Every source of randomness in a run is derived from one user seed. Each
//! consumer gets its own ChaCha stream so that, for example, changing the
//! number of Monte Carlo weight samples does not shift the augmentation
//! draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Init,
    Augment,
    Weights,
    Splits,
    Embeddings,
    DrawAugment,
    DrawWeights,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 0,
            Stream::Augment => 1,
            Stream::Weights => 2,
            Stream::Splits => 3,
            Stream::Embeddings => 4,
            Stream::DrawAugment => 5,
            Stream::DrawWeights => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Position of a stream, enough to restore it exactly given the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPos {
    pub stream: Stream,
    /// ChaCha word position, serialized as a decimal string (it is 128-bit).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

impl StreamPos {
    pub fn of(rng: &Rng, stream: Stream) -> Self {
        StreamPos {
            stream,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self, seed: u64) -> Rng {
        let mut rng = stream(seed, self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
