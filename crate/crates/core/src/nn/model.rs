//! Pre-Net -> Encoder -> Post-Net models mapping `64 x T` features to `3 x T` logits.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::TcnResBlock;
use super::encoders::{ConformerBlock, Encoder, EncoderCache, TransformerBlock};
use super::layers::{sinusoidal, Ctx, Linear};
use super::lstm::BiLstm;
use super::params::{Grads, ParamBuilder, ParamStore};
use crate::annotations::CLASS_COUNT;
use crate::error::{OsdError, Result};
use crate::features::{short_digest, FeatureMatrix, MEL_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Transformer encoder with sinusoidal absolute positions.
    Tf,
    /// Stacks of dilated residual convolution blocks.
    Tcn,
    /// Conformer encoder with relative positions.
    Cf,
    /// Bidirectional LSTM.
    Rosd,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Tf, Family::Tcn, Family::Cf, Family::Rosd];

    pub fn name(self) -> &'static str {
        match self {
            Family::Tf => "TF",
            Family::Tcn => "TCN",
            Family::Cf => "CF",
            Family::Rosd => "ROSD",
        }
    }

    fn uses_attention(self) -> bool {
        matches!(self, Family::Tf | Family::Cf)
    }
}

impl FromStr for Family {
    type Err = OsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().trim_end_matches("-OSD") {
            "TF" => Ok(Family::Tf),
            "TCN" => Ok(Family::Tcn),
            "CF" => Ok(Family::Cf),
            "ROSD" => Ok(Family::Rosd),
            _ => Err(OsdError::Config(format!("unknown model family '{s}'"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters. Fields that a family does not use are ignored
/// but still part of the digest.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    pub input_dim: usize,
    /// Encoder width (TCN: bottleneck channels; ROSD: Pre-Net output width).
    pub model_dim: usize,
    /// Transformer/Conformer blocks, TCN blocks, or BiLSTM layers.
    pub block_count: usize,
    pub head_count: usize,
    pub ff_dim: usize,
    pub tcn_resblocks_per_block: usize,
    pub tcn_hidden: usize,
    pub tcn_kernel: usize,
    pub conv_kernel: usize,
    /// BiLSTM hidden size per direction.
    pub hidden_dim: usize,
    pub dropout: f64,
    pub class_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default configuration of each family. Widths are sized so that parameter
    /// counts land near 3.98M (TF), 3.87M (TCN), 4.01M (CF) and 4.07M (ROSD).
    pub fn full_size(family: Family) -> Self {
        let base = ModelConfig {
            family,
            input_dim: MEL_BINS,
            model_dim: 168,
            block_count: 12,
            head_count: 8,
            ff_dim: 640,
            tcn_resblocks_per_block: 8,
            tcn_hidden: 608,
            tcn_kernel: 3,
            conv_kernel: 15,
            hidden_dim: 252,
            dropout: 0.1,
            class_count: CLASS_COUNT,
            seed: 0,
        };
        match family {
            Family::Tf => base,
            Family::Cf => ModelConfig {
                block_count: 6,
                ..base
            },
            Family::Tcn => ModelConfig {
                model_dim: 128,
                block_count: 3,
                ..base
            },
            Family::Rosd => ModelConfig {
                model_dim: 256,
                block_count: 3,
                ..base
            },
        }
    }

    /// A small configuration for tests and fixtures.
    pub fn toy(family: Family) -> Self {
        ModelConfig {
            model_dim: 8,
            block_count: 1,
            head_count: 2,
            ff_dim: 16,
            tcn_resblocks_per_block: 2,
            tcn_hidden: 12,
            conv_kernel: 3,
            hidden_dim: 6,
            dropout: 0.0,
            ..Self::full_size(family)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OsdError::Config(m));
        if self.input_dim != MEL_BINS {
            return bad(format!("input_dim must be {MEL_BINS}, got {}", self.input_dim));
        }
        if self.class_count != CLASS_COUNT {
            return bad(format!("class_count must be {CLASS_COUNT}, got {}", self.class_count));
        }
        if self.model_dim == 0 || self.block_count == 0 {
            return bad("model_dim and block_count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.family.uses_attention() {
            if self.head_count == 0 || self.model_dim % self.head_count != 0 {
                return bad(format!(
                    "model_dim {} not divisible by head_count {}",
                    self.model_dim, self.head_count
                ));
            }
            if self.ff_dim == 0 {
                return bad("ff_dim must be positive".into());
            }
        }
        match self.family {
            Family::Cf if self.conv_kernel % 2 == 0 => {
                bad(format!("conv_kernel must be odd, got {}", self.conv_kernel))
            }
            Family::Tcn if self.tcn_kernel % 2 == 0 || self.tcn_hidden == 0 || self.tcn_resblocks_per_block == 0 => {
                bad("TCN needs an odd kernel, positive hidden size and res-block count".into())
            }
            Family::Rosd if self.hidden_dim == 0 => bad("hidden_dim must be positive".into()),
            _ => Ok(()),
        }
    }

    pub fn digest_text(&self) -> String {
        let mut s = self.architecture_text();
        let _ = writeln!(s, "model.dropout={}", self.dropout);
        let _ = writeln!(s, "model.seed={}", self.seed);
        s
    }

    /// Everything that fixes the parameter layout and the evaluation-mode function.
    fn architecture_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.family={}", self.family);
        let _ = writeln!(s, "model.input_dim={}", self.input_dim);
        let _ = writeln!(s, "model.dim={}", self.model_dim);
        let _ = writeln!(s, "model.blocks={}", self.block_count);
        let _ = writeln!(s, "model.heads={}", self.head_count);
        let _ = writeln!(s, "model.ff_dim={}", self.ff_dim);
        let _ = writeln!(s, "model.tcn_resblocks={}", self.tcn_resblocks_per_block);
        let _ = writeln!(s, "model.tcn_hidden={}", self.tcn_hidden);
        let _ = writeln!(s, "model.tcn_kernel={}", self.tcn_kernel);
        let _ = writeln!(s, "model.conv_kernel={}", self.conv_kernel);
        let _ = writeln!(s, "model.hidden={}", self.hidden_dim);
        let _ = writeln!(s, "model.classes={}", self.class_count);
        s
    }

    pub fn digest(&self) -> String {
        short_digest(self.digest_text().as_bytes())
    }

    /// Digest ignoring training-only settings (dropout, initialisation seed).
    pub fn architecture_digest(&self) -> String {
        short_digest(self.architecture_text().as_bytes())
    }

    fn embedding_dim(&self) -> usize {
        match self.family {
            Family::Rosd => 2 * self.hidden_dim,
            _ => self.model_dim,
        }
    }
}

/// `model_dim x frames` encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
    pub segment_id: String,
}

/// `class_count x frames` pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub logits: Array2<f64>,
    pub valid_frames: usize,
    pub segment_id: String,
}

impl PredictionMatrix {
    pub fn frame_count(&self) -> usize {
        self.logits.ncols()
    }

    /// Per-frame argmax over classes; ties go to the lower class index.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.logits.ncols())
            .map(|t| {
                let col = self.logits.column(t);
                let mut best = 0;
                for c in 1..col.len() {
                    if col[c] > col[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Network {
    prenet: Linear,
    encoder: Encoder,
    postnet: Linear,
}

pub struct ForwardCache {
    input: Array2<f64>,
    encoder: EncoderCache,
    embedding: Array2<f64>,
}

impl ForwardCache {
    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    net: Network,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pb = ParamBuilder::new(&mut rng);
    let c = config;
    let prenet = Linear::new(&mut pb, "prenet", c.input_dim, c.model_dim);
    let encoder = pb.scoped("encoder", |pb| match c.family {
        Family::Tf => Encoder::Transformer {
            blocks: (0..c.block_count)
                .map(|i| TransformerBlock::new(pb, &format!("block{i}"), c.model_dim, c.head_count, c.ff_dim, c.dropout))
                .collect(),
            ln_out: super::layers::LayerNorm::new(pb, "ln_out", c.model_dim),
        },
        Family::Cf => Encoder::Conformer {
            blocks: (0..c.block_count)
                .map(|i| {
                    ConformerBlock::new(
                        pb,
                        &format!("block{i}"),
                        c.model_dim,
                        c.head_count,
                        c.ff_dim,
                        c.conv_kernel,
                        c.dropout,
                    )
                })
                .collect(),
        },
        Family::Tcn => Encoder::Tcn {
            blocks: (0..c.block_count)
                .flat_map(|b| (0..c.tcn_resblocks_per_block).map(move |r| (b, r)))
                .map(|(b, r)| {
                    TcnResBlock::new(
                        pb,
                        &format!("block{b}.res{r}"),
                        c.model_dim,
                        c.tcn_hidden,
                        c.tcn_kernel,
                        1 << r,
                        c.dropout,
                    )
                })
                .collect(),
        },
        Family::Rosd => Encoder::Rosd {
            layers: (0..c.block_count)
                .map(|l| {
                    let input = if l == 0 { c.model_dim } else { 2 * c.hidden_dim };
                    BiLstm::new(pb, &format!("bilstm{l}"), input, c.hidden_dim)
                })
                .collect(),
        },
    });
    let postnet = Linear::new(&mut pb, "postnet", c.embedding_dim(), c.class_count);
    Ok(Model {
        config: config.clone(),
        params: pb.finish(),
        net: Network {
            prenet,
            encoder,
            postnet,
        },
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Frames-major forward pass: `(T, 64)` features to `(T, 3)` logits.
    pub fn forward_frames(&self, x: &Array2<f64>, ctx: &mut Ctx) -> (Array2<f64>, ForwardCache) {
        let p = &self.params;
        let mut h = self.net.prenet.forward(p, x);
        if self.config.family == Family::Tf {
            h += &sinusoidal((0..x.nrows()).map(|t| t as f64), self.config.model_dim);
        }
        let (embedding, encoder) = self.net.encoder.forward(p, h, ctx);
        let logits = self.net.postnet.forward(p, &embedding);
        (
            logits,
            ForwardCache {
                input: x.clone(),
                encoder,
                embedding,
            },
        )
    }

    /// Accumulate parameter gradients given `d loss / d logits` in `(T, 3)` layout.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>, grads: &mut Grads) {
        let p = &self.params;
        let demb = self.net.postnet.backward(p, &cache.embedding, dlogits, grads);
        let dh = self.net.encoder.backward(p, &cache.encoder, demb, grads);
        self.net.prenet.backward(p, &cache.input, &dh, grads);
    }

    fn check_input(&self, features: &FeatureMatrix) -> Result<()> {
        if features.mel_bins() != self.config.input_dim {
            return Err(OsdError::Shape {
                expected: format!("{} mel bins", self.config.input_dim),
                actual: format!("{} mel bins", features.mel_bins()),
            });
        }
        if features.valid_frames == 0 || features.valid_frames > features.frame_count() {
            return Err(OsdError::Shape {
                expected: format!("1..={} valid frames", features.frame_count()),
                actual: features.valid_frames.to_string(),
            });
        }
        Ok(())
    }

    /// Valid-prefix input rows of a feature matrix.
    pub fn input_frames(features: &FeatureMatrix) -> Array2<f64> {
        features
            .values
            .slice(s![.., ..features.valid_frames])
            .t()
            .mapv(|v| v as f64)
    }

    /// Evaluation-mode prediction. The encoder sees only valid frames; padded
    /// frames get zero logits.
    pub fn forward(&self, features: &FeatureMatrix) -> Result<PredictionMatrix> {
        self.check_input(features)?;
        let (logits, _) = self.forward_frames(&Self::input_frames(features), &mut Ctx::eval());
        let mut full = Array2::zeros((self.config.class_count, features.frame_count()));
        full.slice_mut(s![.., ..features.valid_frames]).assign(&logits.t());
        Ok(PredictionMatrix {
            logits: full,
            valid_frames: features.valid_frames,
            segment_id: features.segment_id.clone(),
        })
    }

    pub fn embed(&self, features: &FeatureMatrix) -> Result<EmbeddingMatrix> {
        self.check_input(features)?;
        let (_, cache) = self.forward_frames(&Self::input_frames(features), &mut Ctx::eval());
        let mut full = Array2::zeros((self.config.embedding_dim(), features.frame_count()));
        full.slice_mut(s![.., ..features.valid_frames]).assign(&cache.embedding.t());
        Ok(EmbeddingMatrix {
            values: full,
            segment_id: features.segment_id.clone(),
        })
    }
}
