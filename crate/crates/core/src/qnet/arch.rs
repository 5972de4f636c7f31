use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Acts on the current state alone.
    Memoryless,
    /// Attends over the current state and a window of past (state, action)
    /// pairs.
    Stateful,
}

/// Fixed (parameter-free) transform applied to each feature map before
/// the conv stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputNorm {
    /// Log-mel values as rendered, so overall loudness (the 1/d distance
    /// cue) reaches the network.
    None,
    /// Zero mean and unit variance over the whole map, all channels
    /// together so level differences between channels survive. Discards
    /// overall loudness.
    Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetArchitecture {
    pub variant: Variant,
    pub input_norm: InputNorm,
    /// Input planes, one per microphone.
    pub input_channels: usize,
    /// Output channels of the 3x3 conv / 2x2 average-pool blocks.
    pub conv_channels: Vec<usize>,
    pub embed_dim: usize,
    pub n_actions: usize,
    pub history_len: usize,
    pub attn_heads: usize,
    pub action_embed_dim: usize,
}

impl Default for NetArchitecture {
    fn default() -> Self {
        Self {
            variant: Variant::Memoryless,
            input_norm: InputNorm::None,
            input_channels: 2,
            conv_channels: vec![16, 32, 64],
            embed_dim: 64,
            n_actions: 4,
            history_len: 7,
            attn_heads: 8,
            action_embed_dim: 8,
        }
    }
}

impl NetArchitecture {
    pub fn stateful() -> Self {
        Self {
            variant: Variant::Stateful,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_actions < 2 {
            return cfg(format!("n_actions must be at least 2, got {}", self.n_actions));
        }
        if self.input_channels == 0 || self.embed_dim == 0 {
            return cfg("input_channels and embed_dim must be positive".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return cfg(format!(
                "conv_channels must be non-empty and positive, got {:?}",
                self.conv_channels
            ));
        }
        if self.variant == Variant::Stateful {
            if self.attn_heads == 0 || self.embed_dim % self.attn_heads != 0 {
                return cfg(format!(
                    "embed_dim {} not divisible by attn_heads {}",
                    self.embed_dim, self.attn_heads
                ));
            }
            if self.action_embed_dim == 0 {
                return cfg("action_embed_dim must be positive".into());
            }
        }
        Ok(())
    }

    /// Past slots fed to the network; zero for the memoryless variant.
    pub fn window_len(&self) -> usize {
        match self.variant {
            Variant::Memoryless => 0,
            Variant::Stateful => self.history_len,
        }
    }

    /// Spatial size after the conv stack, or an error when a pool would
    /// shrink a side to nothing.
    pub fn encoded_extent(&self, n_mels: usize, frames: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (n_mels, frames);
        for _ in &self.conv_channels {
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "input {n_mels}x{frames} too small for {} pooling blocks",
                    self.conv_channels.len()
                )));
            }
        }
        Ok((h, w))
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for (i, &cout) in self.conv_channels.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("conv{i}.bias"), vec![cout]));
            cin = cout;
        }
        out.push(("embed.weight".into(), vec![self.embed_dim, cin]));
        out.push(("embed.bias".into(), vec![self.embed_dim]));
        if self.variant == Variant::Stateful {
            let token = self.embed_dim + self.action_embed_dim;
            out.push((
                "action_embed.weight".into(),
                vec![self.n_actions + 1, self.action_embed_dim],
            ));
            for proj in ["query", "key", "value"] {
                out.push((format!("attn.{proj}.weight"), vec![self.embed_dim, token]));
                out.push((format!("attn.{proj}.bias"), vec![self.embed_dim]));
            }
            out.push(("attn.out.weight".into(), vec![self.embed_dim, self.embed_dim]));
            out.push(("attn.out.bias".into(), vec![self.embed_dim]));
        }
        out.push(("head.weight".into(), vec![self.n_actions, self.embed_dim]));
        out.push(("head.bias".into(), vec![self.n_actions]));
        out
    }

    /// Index of the null action used for the current state and padding.
    pub fn null_action(&self) -> usize {
        self.n_actions
    }
}
