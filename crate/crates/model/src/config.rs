use laneseq_core::codec::{SequenceFormat, Vocabulary, DEFAULT_MAX_LANES, DEFAULT_N_BINS};
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// How coordinate-token embedding rows are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoordInit {
    /// Truncated normal like every other weight.
    Random,
    /// Sinusoidal features of the bin position, so neighbouring bins start
    /// with similar embeddings (and, through the tied head, similar logits).
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: u32,
    pub image_width: u32,
    pub patch_size: u32,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub n_bins: u32,
    /// Longest decoder input; a full sequence may be one token longer.
    pub max_seq_len: usize,
    pub init_std: f64,
    pub coord_init: CoordInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 160,
            patch_size: 8,
            embed_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ff_dim: 256,
            n_bins: DEFAULT_N_BINS,
            max_seq_len: SequenceFormat::Segmentation.sequence_len(DEFAULT_MAX_LANES),
            init_std: 0.02,
            coord_init: CoordInit::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.patch_size == 0
            || self.image_height == 0
            || self.image_width == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return bad(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_width, self.image_height, self.patch_size
            ));
        }
        if self.n_bins < 2 {
            return bad(format!("n_bins must be at least 2, got {}", self.n_bins));
        }
        if self.max_seq_len < 3 {
            return bad(format!("max_seq_len must be at least 3, got {}", self.max_seq_len));
        }
        if self.ff_dim == 0 {
            return bad("ff_dim must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.n_bins)
    }

    /// Rows of the embedding / logit table (padding id included).
    pub fn vocab_rows(&self) -> usize {
        self.vocab().id_space()
    }

    pub fn n_patches(&self) -> usize {
        ((self.image_height / self.patch_size) * (self.image_width / self.patch_size)) as usize
    }

    pub fn patch_dim(&self) -> usize {
        (self.patch_size * self.patch_size) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}
