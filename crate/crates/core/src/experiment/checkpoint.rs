//! Binary checkpoints: all Q-network snapshots plus the RNG position.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "IPDRWCK1"
//! episodes     u64
//! env_steps    u64
//! rng seed     32 bytes (ChaCha8)
//! rng stream   u64
//! rng word pos u128
//! 4 head slots, in order agent0/interaction, agent0/rewiring,
//!              agent1/interaction, agent1/rewiring:
//!   present    u8 (0 or 1)
//!   online     450 x f64   (only when present)
//!   target     450 x f64   (only when present)
//! ```
//!
//! Replay buffers and optimizer moments are not included, so a restored
//! simulation reproduces the policies and the random stream exactly but
//! does not continue training bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Simulation;
use crate::error::NetError;
use crate::nn::{MlpParams, QNetworkPair, PARAM_COUNT};

const MAGIC: &[u8; 8] = b"IPDRWCK1";
const NET_BYTES: usize = PARAM_COUNT * 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSnapshot {
    pub online: MlpParams,
    pub target: MlpParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub episodes_done: u64,
    pub env_steps: u64,
    pub rng: RngState,
    pub heads: [Option<HeadSnapshot>; 4],
}

fn snap(pair: &QNetworkPair) -> HeadSnapshot {
    HeadSnapshot { online: pair.online.clone(), target: pair.target.clone() }
}

impl Checkpoint {
    pub fn capture(sim: &Simulation) -> Self {
        let [a0, a1] = &sim.agents;
        Checkpoint {
            episodes_done: sim.episodes_done,
            env_steps: sim.env_steps,
            rng: RngState::of(&sim.rng),
            heads: [
                a0.interaction_head().map(|h| snap(&h.networks)),
                a0.rewiring_head().map(|h| snap(&h.networks)),
                a1.interaction_head().map(|h| snap(&h.networks)),
                a1.rewiring_head().map(|h| snap(&h.networks)),
            ],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(80 + 4 * (1 + 2 * NET_BYTES));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.episodes_done.to_le_bytes());
        out.extend_from_slice(&self.env_steps.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        for head in &self.heads {
            match head {
                Some(h) => {
                    out.push(1);
                    out.extend_from_slice(&h.online.to_le_bytes());
                    out.extend_from_slice(&h.target.to_le_bytes());
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], String> {
            if cur.len() < n {
                return Err("checkpoint truncated".into());
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let episodes_done = u64_at(take(8)?);
        let env_steps = u64_at(take(8)?);
        let seed: [u8; 32] = take(32)?.try_into().unwrap();
        let stream = u64_at(take(8)?);
        let word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
        let mut heads: [Option<HeadSnapshot>; 4] = Default::default();
        for slot in heads.iter_mut() {
            match take(1)?[0] {
                0 => {}
                1 => {
                    let net = |b: &[u8]| MlpParams::from_le_bytes(b).map_err(|e: NetError| e.to_string());
                    let online = net(take(NET_BYTES)?)?;
                    let target = net(take(NET_BYTES)?)?;
                    *slot = Some(HeadSnapshot { online, target });
                }
                other => return Err(format!("bad head flag {other}")),
            }
        }
        if !cur.is_empty() {
            return Err(format!("{} trailing bytes", cur.len()));
        }
        Ok(Checkpoint { episodes_done, env_steps, rng: RngState { seed, stream, word_pos }, heads })
    }
}

impl Simulation {
    /// Load networks, RNG position and counters from a checkpoint taken on a
    /// simulation with the same agent layout. Buffers and optimizers are untouched.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<(), String> {
        let [a0, a1] = &mut self.agents;
        let [h0, h1] = a0.heads_mut();
        let [h2, h3] = a1.heads_mut();
        let heads = [h0, h1, h2, h3];
        for (i, (head, snap)) in heads.into_iter().zip(&ck.heads).enumerate() {
            match (head, snap) {
                (Some(h), Some(s)) => {
                    h.networks.online = s.online.clone();
                    h.networks.target = s.target.clone();
                }
                (None, None) => {}
                _ => return Err(format!("head slot {i} does not match this simulation")),
            }
        }
        self.rng = ck.rng.restore();
        self.episodes_done = ck.episodes_done;
        self.env_steps = ck.env_steps;
        Ok(())
    }
}
