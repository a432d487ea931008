//! Temporal block stacks: unidirectional Mamba or the pre-norm transformer
//! baseline, behind one interface.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::{sinusoidal, LayerNorm, Linear, ParamStore};
use crate::ssm::{MambaBlock, MambaBlockConfig};

/// Whether a model may look at future frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Online,
    Offline,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Mamba,
    CausalTransformer,
}

/// Key lists for self-attention over `t_len` frames.
pub fn self_attention_mask(t_len: usize, mode: Mode) -> Arc<Vec<Vec<usize>>> {
    Arc::new(
        (0..t_len)
            .map(|i| match mode {
                Mode::Online => (0..=i).collect(),
                Mode::Offline => (0..t_len).collect(),
            })
            .collect(),
    )
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    heads: usize,
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "dim must divide into heads");
        Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            out: Linear::new(store, &format!("{name}.attn_out"), dim, dim, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, ff, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), ff, dim, true, rng),
        }
    }

    /// Scalar parameter count for a block of this shape.
    pub fn param_count(dim: usize, ff: usize) -> usize {
        4 * dim + (dim * 3 * dim + 3 * dim) + (dim * dim + dim) + (dim * ff + ff) + (ff * dim + dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let (t_len, dim) = tape.shape(x);
        let h = self.ln1.forward(tape, store, x);
        let qkv = self.qkv.forward(tape, store, h);
        let mask = self_attention_mask(t_len, mode);
        let dh = dim / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for k in 0..self.heads {
            let q = tape.slice_cols(qkv, k * dh, dh);
            let kk = tape.slice_cols(qkv, dim + k * dh, dh);
            let v = tape.slice_cols(qkv, 2 * dim + k * dh, dh);
            heads.push(tape.attention(q, kk, v, mask.clone()));
        }
        let att = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let att = self.out.forward(tape, store, att);
        let x = tape.add(x, att);
        let h = self.ln2.forward(tape, store, x);
        let h = self.fc1.forward(tape, store, h);
        let h = tape.silu(h);
        let h = self.fc2.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// Scalar parameter count of one [`MambaBlock`] with this configuration.
pub fn mamba_param_count(cfg: &MambaBlockConfig) -> usize {
    let (d, di, n, r, k) = (cfg.model_dim, cfg.inner_dim(), cfg.state_dim, cfg.dt_rank(), cfg.conv_width);
    d + d * 2 * di + k * di + di + di * (r + 2 * n) + (r * di + di) + di * n + di + di * d
}

/// Feed-forward width that brings a transformer block closest to the
/// parameter count of a Mamba block of the same model width.
pub fn matched_ff_width(cfg: &MambaBlockConfig) -> usize {
    let target = mamba_param_count(cfg) as i64;
    let d = cfg.model_dim;
    (1..=16 * d)
        .min_by_key(|&ff| (TransformerBlock::param_count(d, ff) as i64 - target).abs())
        .unwrap_or(d)
}

#[derive(Clone, Debug)]
pub enum SeqBlock {
    Mamba(MambaBlock),
    Transformer(TransformerBlock),
}

impl SeqBlock {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Var {
        match self {
            SeqBlock::Mamba(b) => b.forward(tape, store, x),
            SeqBlock::Transformer(b) => b.forward(tape, store, x, mode),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub kind: ModelKind,
    pub model_dim: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub expansion: usize,
    pub heads: usize,
    #[serde(default)]
    pub eq1_literal: bool,
}

impl StackConfig {
    pub fn mamba_cfg(&self) -> MambaBlockConfig {
        MambaBlockConfig {
            model_dim: self.model_dim,
            state_dim: self.state_dim,
            conv_width: self.conv_width,
            expansion: self.expansion,
            eq1_literal: self.eq1_literal,
        }
    }

    pub fn build(&self, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<SeqBlock> {
        let mcfg = self.mamba_cfg();
        Ok(match self.kind {
            ModelKind::Mamba => SeqBlock::Mamba(MambaBlock::new(store, name, mcfg, rng)?),
            ModelKind::CausalTransformer => {
                mcfg.validate()?;
                let ff = matched_ff_width(&mcfg);
                SeqBlock::Transformer(TransformerBlock::new(store, name, self.model_dim, self.heads, ff, rng))
            }
        })
    }

    /// Adds sinusoidal frame positions for the attention baseline; the
    /// recurrent model gets order from its scan and is left untouched.
    pub fn add_positions(&self, tape: &mut Tape, x: Var) -> Var {
        match self.kind {
            ModelKind::Mamba => x,
            ModelKind::CausalTransformer => {
                let (t_len, d) = tape.shape(x);
                let pos: Vec<f64> = (0..t_len).map(|t| t as f64).collect();
                let pe = tape.leaf(sinusoidal(&pos, d));
                tape.add(x, pe)
            }
        }
    }
}
