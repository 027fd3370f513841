//! The four encoder stacks: Transformer, TCN, Conformer and BiLSTM.

use ndarray::Array2;

use super::attention::{AttentionCache, SelfAttention};
use super::conv::{ConvModule, ConvModuleCache, TcnResBlock, TcnResBlockCache};
use super::layers::{Activation, Ctx, Dropout, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache};
use super::lstm::{BiLstm, BiLstmCache};
use super::params::{Grads, ParamBuilder, ParamStore};

/// Pre-norm Transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln_att: LayerNorm,
    att: SelfAttention,
    drop: Dropout,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

pub struct TransformerBlockCache {
    ln_att: LayerNormCache,
    att: AttentionCache,
    mask: Option<Array2<f64>>,
    ln_ff: LayerNormCache,
    ff: FeedForwardCache,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, ff_dim: usize, dropout: f64) -> Self {
        pb.scoped(name, |pb| TransformerBlock {
            ln_att: LayerNorm::new(pb, "ln_att", dim),
            att: SelfAttention::new(pb, "attention", dim, heads, false),
            drop: Dropout { p: dropout },
            ln_ff: LayerNorm::new(pb, "ln_ff", dim),
            ff: FeedForward::new(pb, "ff", dim, ff_dim, Activation::Relu, dropout),
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>, ctx: &mut Ctx) -> (Array2<f64>, TransformerBlockCache) {
        let (a, ln_att) = self.ln_att.forward(p, x);
        let (att_out, att) = self.att.forward(p, &a);
        let (att_out, mask) = self.drop.forward(att_out, ctx);
        let x1 = x + &att_out;
        let (b, ln_ff) = self.ln_ff.forward(p, &x1);
        let (ff_out, ff) = self.ff.forward(p, &b, ctx);
        (
            x1 + &ff_out,
            TransformerBlockCache {
                ln_att,
                att,
                mask,
                ln_ff,
                ff,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, c: &TransformerBlockCache, dy: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let db = self.ff.backward(p, &c.ff, dy.clone(), g);
        let dx1 = dy + &self.ln_ff.backward(p, &c.ln_ff, &db, g);
        let datt = self.drop.backward(&c.mask, dx1.clone());
        let da = self.att.backward(p, &c.att, &datt, g);
        dx1 + &self.ln_att.backward(p, &c.ln_att, &da, g)
    }
}

/// Macaron Conformer block: half-step FF, relative-position MHSA, convolution
/// module, half-step FF, final layer norm.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    ln_ff1: LayerNorm,
    ff1: FeedForward,
    ln_att: LayerNorm,
    att: SelfAttention,
    drop: Dropout,
    conv: ConvModule,
    ln_ff2: LayerNorm,
    ff2: FeedForward,
    ln_out: LayerNorm,
}

pub struct ConformerBlockCache {
    ln_ff1: LayerNormCache,
    ff1: FeedForwardCache,
    ln_att: LayerNormCache,
    att: AttentionCache,
    mask: Option<Array2<f64>>,
    conv: ConvModuleCache,
    ln_ff2: LayerNormCache,
    ff2: FeedForwardCache,
    ln_out: LayerNormCache,
}

impl ConformerBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        kernel: usize,
        dropout: f64,
    ) -> Self {
        pb.scoped(name, |pb| ConformerBlock {
            ln_ff1: LayerNorm::new(pb, "ln_ff1", dim),
            ff1: FeedForward::new(pb, "ff1", dim, ff_dim, Activation::Swish, dropout),
            ln_att: LayerNorm::new(pb, "ln_att", dim),
            att: SelfAttention::new(pb, "attention", dim, heads, true),
            drop: Dropout { p: dropout },
            conv: ConvModule::new(pb, "conv", dim, kernel, dropout),
            ln_ff2: LayerNorm::new(pb, "ln_ff2", dim),
            ff2: FeedForward::new(pb, "ff2", dim, ff_dim, Activation::Swish, dropout),
            ln_out: LayerNorm::new(pb, "ln_out", dim),
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>, ctx: &mut Ctx) -> (Array2<f64>, ConformerBlockCache) {
        let (a, ln_ff1) = self.ln_ff1.forward(p, x);
        let (f1, ff1) = self.ff1.forward(p, &a, ctx);
        let x1 = x + &(f1 * 0.5);
        let (b, ln_att) = self.ln_att.forward(p, &x1);
        let (att_out, att) = self.att.forward(p, &b);
        let (att_out, mask) = self.drop.forward(att_out, ctx);
        let x2 = x1 + &att_out;
        let (conv_out, conv) = self.conv.forward(p, &x2, ctx);
        let x3 = x2 + &conv_out;
        let (c, ln_ff2) = self.ln_ff2.forward(p, &x3);
        let (f2, ff2) = self.ff2.forward(p, &c, ctx);
        let x4 = x3 + &(f2 * 0.5);
        let (y, ln_out) = self.ln_out.forward(p, &x4);
        (
            y,
            ConformerBlockCache {
                ln_ff1,
                ff1,
                ln_att,
                att,
                mask,
                conv,
                ln_ff2,
                ff2,
                ln_out,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, c: &ConformerBlockCache, dy: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let dx4 = self.ln_out.backward(p, &c.ln_out, dy, g);
        let dc = self.ff2.backward(p, &c.ff2, &dx4 * 0.5, g);
        let dx3 = &dx4 + &self.ln_ff2.backward(p, &c.ln_ff2, &dc, g);
        let dx2 = &dx3 + &self.conv.backward(p, &c.conv, dx3.clone(), g);
        let datt = self.drop.backward(&c.mask, dx2.clone());
        let db = self.att.backward(p, &c.att, &datt, g);
        let dx1 = &dx2 + &self.ln_att.backward(p, &c.ln_att, &db, g);
        let da = self.ff1.backward(p, &c.ff1, &dx1 * 0.5, g);
        &dx1 + &self.ln_ff1.backward(p, &c.ln_ff1, &da, g)
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Transformer {
        blocks: Vec<TransformerBlock>,
        ln_out: LayerNorm,
    },
    Tcn {
        blocks: Vec<TcnResBlock>,
    },
    Conformer {
        blocks: Vec<ConformerBlock>,
    },
    Rosd {
        layers: Vec<BiLstm>,
    },
}

pub enum EncoderCache {
    Transformer(Vec<TransformerBlockCache>, LayerNormCache),
    Tcn(Vec<TcnResBlockCache>),
    Conformer(Vec<ConformerBlockCache>),
    Rosd(Vec<BiLstmCache>),
}

impl Encoder {
    pub fn forward(&self, p: &ParamStore, x: Array2<f64>, ctx: &mut Ctx) -> (Array2<f64>, EncoderCache) {
        let mut h = x;
        match self {
            Encoder::Transformer { blocks, ln_out } => {
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (y, c) = b.forward(p, &h, ctx);
                    caches.push(c);
                    h = y;
                }
                let (y, lc) = ln_out.forward(p, &h);
                (y, EncoderCache::Transformer(caches, lc))
            }
            Encoder::Tcn { blocks } => {
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (y, c) = b.forward(p, &h, ctx);
                    caches.push(c);
                    h = y;
                }
                (h, EncoderCache::Tcn(caches))
            }
            Encoder::Conformer { blocks } => {
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (y, c) = b.forward(p, &h, ctx);
                    caches.push(c);
                    h = y;
                }
                (h, EncoderCache::Conformer(caches))
            }
            Encoder::Rosd { layers } => {
                let mut caches = Vec::with_capacity(layers.len());
                for l in layers {
                    let (y, c) = l.forward(p, &h);
                    caches.push(c);
                    h = y;
                }
                (h, EncoderCache::Rosd(caches))
            }
        }
    }

    pub fn backward(&self, p: &ParamStore, cache: &EncoderCache, dy: Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let mut d = dy;
        match (self, cache) {
            (Encoder::Transformer { blocks, ln_out }, EncoderCache::Transformer(caches, lc)) => {
                d = ln_out.backward(p, lc, &d, g);
                for (b, c) in blocks.iter().zip(caches).rev() {
                    d = b.backward(p, c, &d, g);
                }
            }
            (Encoder::Tcn { blocks }, EncoderCache::Tcn(caches)) => {
                for (b, c) in blocks.iter().zip(caches).rev() {
                    d = b.backward(p, c, &d, g);
                }
            }
            (Encoder::Conformer { blocks }, EncoderCache::Conformer(caches)) => {
                for (b, c) in blocks.iter().zip(caches).rev() {
                    d = b.backward(p, c, &d, g);
                }
            }
            (Encoder::Rosd { layers }, EncoderCache::Rosd(caches)) => {
                for (l, c) in layers.iter().zip(caches).rev() {
                    d = l.backward(p, c, &d, g);
                }
            }
            _ => unreachable!("encoder cache does not match encoder"),
        }
        d
    }
}
