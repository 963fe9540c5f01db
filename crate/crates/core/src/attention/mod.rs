//! DMSA and the attention baselines it is compared against.
//!
//! * [`dmsa_operator`] is the math-faithful operator: the negated gradient of
//!   the decoupled variational rate.
//! * [`dmsa_layer_forward`] is the layer form with learned projections, a
//!   top-k head gate, sigmoid membership, and RoPE on the membership path.
//! * [`tssa_layer_forward`] and [`mhsa_layer_forward`] are the coupled linear
//!   baseline and standard softmax attention.
//! * [`gated_channel_forward`] drops the membership weighting and keeps only
//!   the gated subspaces.
//!
//! Layer forwards report their activation buffers to an
//! [`ActivationMeter`](crate::memory::ActivationMeter). None of the linear
//! forwards materializes an `n × n` matrix.

mod gated;
mod layers;
mod operator;
mod rope;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use gated::{
    channel_attention, gated_channel_forward, gated_channel_hadamard, gated_channel_with_gates,
    GatedChannelParams,
};
pub use layers::{
    dmsa_layer_forward, dmsa_layer_forward_traced, mhsa_attention_weights, mhsa_layer_forward,
    tssa_layer_forward, BaselineParams, DmsaForward, DmsaLayerParams, DmsaOverrides, MhsaParams,
    PI_NORM_GUARD,
};
pub use operator::{dmsa_operator, token_update};
pub use rope::{rope_apply, rope_apply_at, rope_precompute, RopeTable, ROPE_BASE};

use crate::error::invalid;

/// Attention operator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Dmsa,
    Tssa,
    Mhsa,
    #[serde(rename = "gated")]
    GatedChannel,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Dmsa => "dmsa",
            AttentionKind::Tssa => "tssa",
            AttentionKind::Mhsa => "mhsa",
            AttentionKind::GatedChannel => "gated",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dmsa" => Ok(AttentionKind::Dmsa),
            "tssa" => Ok(AttentionKind::Tssa),
            "mhsa" => Ok(AttentionKind::Mhsa),
            "gated" | "gatedchannel" | "gated_channel" => Ok(AttentionKind::GatedChannel),
            other => Err(invalid(format!("unknown attention kind '{other}'"))),
        }
    }
}
