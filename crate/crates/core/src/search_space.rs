//! Decoder configurations and their flat token encoding.
//!
//! A configuration is 7 FPN basic blocks followed by 6 head operations and
//! the head weight-sharing index, 42 tokens in total:
//!
//! ```text
//! block t (t = 1..=7):  id1 < t+2, id2 < t+2, op1 < 5, op2 < 5, agg < 2
//! head layer j:         op < 7
//! sharing index:        share_from < 7
//! ```

use std::fmt;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_BLOCKS: usize = 7;
pub const HEAD_LAYERS: usize = 6;
/// Backbone features c3, c4, c5 seed the sampling pool.
pub const NUM_INPUTS: usize = 3;
pub const BLOCK_TOKENS: usize = 5;
pub const FPN_TOKENS: usize = NUM_BLOCKS * BLOCK_TOKENS;
pub const HEAD_TOKENS: usize = HEAD_LAYERS + 1;
pub const TOTAL_TOKENS: usize = FPN_TOKENS + HEAD_TOKENS;
/// Number of FPN-valid operations (ids 0..5).
pub const FPN_OPS: usize = 5;
pub const HEAD_OPS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperationKind {
    SepConv3x3,
    SepConv3x3Dil3,
    SepConv5x5Dil6,
    Skip,
    DeformConv3x3,
    Conv1x1,
    Conv3x3,
}

impl OperationKind {
    pub const ALL: [OperationKind; HEAD_OPS] = [
        OperationKind::SepConv3x3,
        OperationKind::SepConv3x3Dil3,
        OperationKind::SepConv5x5Dil6,
        OperationKind::Skip,
        OperationKind::DeformConv3x3,
        OperationKind::Conv1x1,
        OperationKind::Conv3x3,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn fpn_valid(self) -> bool {
        self.id() < FPN_OPS
    }

    pub fn short_name(self) -> &'static str {
        match self {
            OperationKind::SepConv3x3 => "sep3",
            OperationKind::SepConv3x3Dil3 => "sep3d3",
            OperationKind::SepConv5x5Dil6 => "sep5d6",
            OperationKind::Skip => "skip",
            OperationKind::DeformConv3x3 => "dconv3",
            OperationKind::Conv1x1 => "conv1",
            OperationKind::Conv3x3 => "conv3",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.short_name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationKind {
    Sum,
    ConcatProj,
}

impl AggregationKind {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(AggregationKind::Sum),
            1 => Some(AggregationKind::ConcatProj),
            _ => None,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            AggregationKind::Sum => "sum",
            AggregationKind::ConcatProj => "cat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasicBlockConfig {
    pub id1: usize,
    pub id2: usize,
    pub op1: OperationKind,
    pub op2: OperationKind,
    pub agg: AggregationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FpnConfig {
    pub blocks: [BasicBlockConfig; NUM_BLOCKS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadConfig {
    pub ops: [OperationKind; HEAD_LAYERS],
    /// Layers `j < share_from` have per-level weights; the rest are shared.
    pub share_from: usize,
}

impl HeadConfig {
    pub fn layer_shared(&self, layer: usize) -> bool {
        layer >= self.share_from
    }

    /// The searched head reported for the detector: two deformable 3x3
    /// convs, each followed by a 1x1 conv and a skip, shared across levels.
    pub fn reference_searched() -> Self {
        use OperationKind::*;
        HeadConfig {
            ops: [DeformConv3x3, Conv1x1, Skip, DeformConv3x3, Conv1x1, Skip],
            share_from: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub fpn: FpnConfig,
    pub head: HeadConfig,
}

/// Pool size seen by block `t` (1-based).
pub fn pool_size(t: usize) -> usize {
    t + NUM_INPUTS - 1
}

/// Pool name of feature `index`: `c3..c5`, then `x1..x7`.
pub fn pool_name(index: usize) -> String {
    if index < NUM_INPUTS {
        format!("c{}", index + 3)
    } else {
        format!("x{}", index + 1 - NUM_INPUTS)
    }
}

fn vocab_at(position: usize) -> usize {
    if position < FPN_TOKENS {
        let t = position / BLOCK_TOKENS + 1;
        match position % BLOCK_TOKENS {
            0 | 1 => pool_size(t),
            2 | 3 => FPN_OPS,
            _ => 2,
        }
    } else {
        HEAD_OPS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    FpnOnly,
    HeadOnly,
    Joint,
}

impl Stage {
    /// Positions of this stage inside the full 42-token sequence.
    pub fn positions(self) -> std::ops::Range<usize> {
        match self {
            Stage::FpnOnly => 0..FPN_TOKENS,
            Stage::HeadOnly => FPN_TOKENS..TOTAL_TOKENS,
            Stage::Joint => 0..TOTAL_TOKENS,
        }
    }
}

/// Vocabulary sizes of a contiguous run of token positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub offset: usize,
    pub vocab_sizes: Vec<usize>,
}

impl ActionSpace {
    pub fn custom(vocab_sizes: Vec<usize>) -> Self {
        ActionSpace {
            offset: 0,
            vocab_sizes,
        }
    }

    pub fn len(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab_sizes.is_empty()
    }

    pub fn check(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.len() {
            return Err(Error::TokenLength {
                expected: self.len(),
                got: tokens.len(),
            });
        }
        for (i, (&tok, &vocab)) in tokens.iter().zip(&self.vocab_sizes).enumerate() {
            if tok >= vocab {
                return Err(Error::TokenOutOfVocab {
                    position: self.offset + i,
                    token: tok,
                    vocab,
                });
            }
        }
        Ok(())
    }

    pub fn size(&self) -> BigUint {
        self.vocab_sizes.iter().fold(BigUint::from(1u32), |acc, &v| acc * v)
    }
}

pub fn action_space(stage: Stage) -> ActionSpace {
    let r = stage.positions();
    ActionSpace {
        offset: r.start,
        vocab_sizes: r.map(vocab_at).collect(),
    }
}

pub fn space_size(stage: Stage) -> BigUint {
    action_space(stage).size()
}

pub fn validate(config: &DecoderConfig) -> Result<()> {
    for (i, b) in config.fpn.blocks.iter().enumerate() {
        let t = i + 1;
        let pool = pool_size(t);
        for (which, id) in [("id1", b.id1), ("id2", b.id2)] {
            if id >= pool {
                return Err(Error::InvalidConfig(format!(
                    "block {t} {which}={id} but the pool holds {pool} features"
                )));
            }
        }
        for (which, op) in [("op1", b.op1), ("op2", b.op2)] {
            if !op.fpn_valid() {
                return Err(Error::InvalidConfig(format!(
                    "block {t} {which}={} is a head-only operation",
                    op.short_name()
                )));
            }
        }
    }
    if config.head.share_from > HEAD_LAYERS {
        return Err(Error::InvalidConfig(format!(
            "share_from={} exceeds {HEAD_LAYERS}",
            config.head.share_from
        )));
    }
    Ok(())
}

pub fn encode(config: &DecoderConfig) -> Result<Vec<usize>> {
    validate(config)?;
    let mut tokens = encode_fpn(&config.fpn);
    tokens.extend(encode_head(&config.head));
    Ok(tokens)
}

pub fn encode_fpn(fpn: &FpnConfig) -> Vec<usize> {
    fpn.blocks
        .iter()
        .flat_map(|b| [b.id1, b.id2, b.op1.id(), b.op2.id(), b.agg.id()])
        .collect()
}

pub fn encode_head(head: &HeadConfig) -> Vec<usize> {
    let mut v: Vec<usize> = head.ops.iter().map(|op| op.id()).collect();
    v.push(head.share_from);
    v
}

pub fn decode(tokens: &[usize]) -> Result<DecoderConfig> {
    action_space(Stage::Joint).check(tokens)?;
    Ok(DecoderConfig {
        fpn: decode_fpn_unchecked(&tokens[..FPN_TOKENS]),
        head: decode_head_unchecked(&tokens[FPN_TOKENS..]),
    })
}

pub fn decode_fpn(tokens: &[usize]) -> Result<FpnConfig> {
    action_space(Stage::FpnOnly).check(tokens)?;
    Ok(decode_fpn_unchecked(tokens))
}

pub fn decode_head(tokens: &[usize]) -> Result<HeadConfig> {
    action_space(Stage::HeadOnly).check(tokens)?;
    Ok(decode_head_unchecked(tokens))
}

fn op(id: usize) -> OperationKind {
    OperationKind::from_id(id).expect("checked against vocab")
}

fn decode_fpn_unchecked(tokens: &[usize]) -> FpnConfig {
    let blocks = std::array::from_fn(|i| {
        let b = &tokens[i * BLOCK_TOKENS..(i + 1) * BLOCK_TOKENS];
        BasicBlockConfig {
            id1: b[0],
            id2: b[1],
            op1: op(b[2]),
            op2: op(b[3]),
            agg: AggregationKind::from_id(b[4]).expect("checked against vocab"),
        }
    });
    FpnConfig { blocks }
}

fn decode_head_unchecked(tokens: &[usize]) -> HeadConfig {
    HeadConfig {
        ops: std::array::from_fn(|j| op(tokens[j])),
        share_from: tokens[HEAD_LAYERS],
    }
}

/// Draws every token independently and uniformly from its vocabulary.
pub fn sample_tokens(space: &ActionSpace, rng: &mut impl Rng) -> Vec<usize> {
    space.vocab_sizes.iter().map(|&v| rng.random_range(0..v)).collect()
}

pub fn sample_uniform(seed: u64) -> DecoderConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = sample_tokens(&action_space(Stage::Joint), &mut rng);
    decode(&tokens).expect("sampled within vocab")
}

impl fmt::Display for BasicBlockConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{}|{},{}|{})",
            pool_name(self.id1),
            pool_name(self.id2),
            self.op1.short_name(),
            self.op2.short_name(),
            self.agg.short_name()
        )
    }
}

impl fmt::Display for FpnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "bb{}{b}", i + 1)?;
        }
        Ok(())
    }
}

impl fmt::Display for HeadConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("head(")?;
        for (j, op) in self.ops.iter().enumerate() {
            if j > 0 {
                f.write_str(",")?;
            }
            f.write_str(op.short_name())?;
        }
        write!(f, "|share@{})", self.share_from)
    }
}

impl fmt::Display for DecoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.fpn, self.head)
    }
}
