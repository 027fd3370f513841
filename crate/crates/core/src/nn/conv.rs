//! Depthwise temporal convolutions and the blocks built from them.

use ndarray::{Array2, Axis};

use super::layers::{glu_backward, glu_forward, Activation, Ctx, Dropout, LayerNorm, LayerNormCache, Linear};
use super::params::{Grads, Init, ParamBuilder, ParamId, ParamStore};

/// Per-channel 1-D convolution with odd kernel, "same" zero padding and dilation.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    dilation: usize,
}

impl DepthwiseConv1d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let bound = 1.0 / (kernel as f64).sqrt();
        pb.scoped(name, |pb| DepthwiseConv1d {
            w: pb.add("weight", &[kernel, channels], Init::Uniform(bound)),
            b: pb.add("bias", &[channels], Init::Uniform(bound)),
            kernel,
            dilation,
        })
    }

    fn offset(&self, tap: usize) -> isize {
        (tap as isize - (self.kernel as isize - 1) / 2) * self.dilation as isize
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let (t, _) = x.dim();
        let w = p.mat(self.w);
        let mut y = Array2::zeros(x.dim());
        y += &p.vec(self.b);
        for tap in 0..self.kernel {
            let off = self.offset(tap);
            let wk = w.row(tap);
            for i in 0..t {
                let src = i as isize + off;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xs = x.row(src as usize);
                let mut yr = y.row_mut(i);
                yr.zip_mut_with(&(&xs * &wk), |a, b| *a += b);
            }
        }
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let (t, _) = x.dim();
        let w = p.mat(self.w);
        let mut dx = Array2::zeros(x.dim());
        let mut dw = Array2::zeros(w.dim());
        for tap in 0..self.kernel {
            let off = self.offset(tap);
            let wk = w.row(tap);
            for i in 0..t {
                let src = i as isize + off;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let dyr = dy.row(i);
                dw.row_mut(tap).scaled_add(1.0, &(&dyr * &x.row(src)));
                dx.row_mut(src).scaled_add(1.0, &(&dyr * &wk));
            }
        }
        g.mat_mut(self.w).scaled_add(1.0, &dw);
        g.vec_mut(self.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dx
    }
}

/// Conformer convolution module: LN, pointwise (d -> 2d), GLU, depthwise conv,
/// LN, swish, pointwise (d -> d), dropout. Residual is added by the caller.
#[derive(Debug, Clone)]
pub struct ConvModule {
    ln_in: LayerNorm,
    pw_in: Linear,
    depthwise: DepthwiseConv1d,
    ln_mid: LayerNorm,
    pw_out: Linear,
    drop: Dropout,
}

pub struct ConvModuleCache {
    ln_in: LayerNormCache,
    normed: Array2<f64>,
    expanded: Array2<f64>,
    gated: Array2<f64>,
    ln_mid: LayerNormCache,
    mid: Array2<f64>,
    activated: Array2<f64>,
    mask: Option<Array2<f64>>,
}

impl ConvModule {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, kernel: usize, dropout: f64) -> Self {
        pb.scoped(name, |pb| ConvModule {
            ln_in: LayerNorm::new(pb, "ln_in", dim),
            pw_in: Linear::new(pb, "pointwise_in", dim, 2 * dim),
            depthwise: DepthwiseConv1d::new(pb, "depthwise", dim, kernel, 1),
            ln_mid: LayerNorm::new(pb, "ln_mid", dim),
            pw_out: Linear::new(pb, "pointwise_out", dim, dim),
            drop: Dropout { p: dropout },
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>, ctx: &mut Ctx) -> (Array2<f64>, ConvModuleCache) {
        let (normed, ln_in) = self.ln_in.forward(p, x);
        let expanded = self.pw_in.forward(p, &normed);
        let gated = glu_forward(&expanded);
        let conv = self.depthwise.forward(p, &gated);
        let (mid, ln_mid) = self.ln_mid.forward(p, &conv);
        let activated = Activation::Swish.forward(&mid);
        let (y, mask) = self.drop.forward(self.pw_out.forward(p, &activated), ctx);
        (
            y,
            ConvModuleCache {
                ln_in,
                normed,
                expanded,
                gated,
                ln_mid,
                mid,
                activated,
                mask,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, c: &ConvModuleCache, dy: Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let dy = self.drop.backward(&c.mask, dy);
        let d_act = self.pw_out.backward(p, &c.activated, &dy, g);
        let d_mid = Activation::Swish.backward(&c.mid, &d_act);
        let d_conv = self.ln_mid.backward(p, &c.ln_mid, &d_mid, g);
        let d_gated = self.depthwise.backward(p, &c.gated, &d_conv, g);
        let d_exp = glu_backward(&c.expanded, &d_gated);
        let d_norm = self.pw_in.backward(p, &c.normed, &d_exp, g);
        self.ln_in.backward(p, &c.ln_in, &d_norm, g)
    }
}

/// TCN residual block: 1x1 conv (B -> H), ReLU, LN, dilated depthwise conv,
/// ReLU, LN, 1x1 conv (H -> B), plus the skip connection.
#[derive(Debug, Clone)]
pub struct TcnResBlock {
    expand: Linear,
    ln1: LayerNorm,
    depthwise: DepthwiseConv1d,
    ln2: LayerNorm,
    project: Linear,
    drop: Dropout,
}

pub struct TcnResBlockCache {
    x: Array2<f64>,
    pre1: Array2<f64>,
    ln1: LayerNormCache,
    n1: Array2<f64>,
    pre2: Array2<f64>,
    ln2: LayerNormCache,
    n2: Array2<f64>,
    mask: Option<Array2<f64>>,
}

impl TcnResBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        hidden: usize,
        kernel: usize,
        dilation: usize,
        dropout: f64,
    ) -> Self {
        pb.scoped(name, |pb| TcnResBlock {
            expand: Linear::new(pb, "conv_in", channels, hidden),
            ln1: LayerNorm::new(pb, "ln1", hidden),
            depthwise: DepthwiseConv1d::new(pb, "dilated", hidden, kernel, dilation),
            ln2: LayerNorm::new(pb, "ln2", hidden),
            project: Linear::new(pb, "conv_out", hidden, channels),
            drop: Dropout { p: dropout },
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>, ctx: &mut Ctx) -> (Array2<f64>, TcnResBlockCache) {
        let pre1 = self.expand.forward(p, x);
        let (n1, ln1) = self.ln1.forward(p, &Activation::Relu.forward(&pre1));
        let pre2 = self.depthwise.forward(p, &n1);
        let (n2, ln2) = self.ln2.forward(p, &Activation::Relu.forward(&pre2));
        let (out, mask) = self.drop.forward(self.project.forward(p, &n2), ctx);
        (
            x + &out,
            TcnResBlockCache {
                x: x.clone(),
                pre1,
                ln1,
                n1,
                pre2,
                ln2,
                n2,
                mask,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, c: &TcnResBlockCache, dy: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let d_out = self.drop.backward(&c.mask, dy.clone());
        let dn2 = self.project.backward(p, &c.n2, &d_out, g);
        let da2 = self.ln2.backward(p, &c.ln2, &dn2, g);
        let dpre2 = Activation::Relu.backward(&c.pre2, &da2);
        let dn1 = self.depthwise.backward(p, &c.n1, &dpre2, g);
        let da1 = self.ln1.backward(p, &c.ln1, &dn1, g);
        let dpre1 = Activation::Relu.backward(&c.pre1, &da1);
        let mut dx = self.expand.backward(p, &c.x, &dpre1, g);
        dx += dy;
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depthwise_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = ParamBuilder::new(&mut rng);
        let conv = DepthwiseConv1d::new(&mut pb, "dw", 2, 3, 2);
        let p = pb.finish();
        let x = Array2::from_shape_fn((7, 2), |(i, c)| (i as f64 + 1.0) * (c as f64 + 0.5));
        let y = conv.forward(&p, &x);
        let (_, w) = p.get("dw.weight").unwrap();
        let (_, b) = p.get("dw.bias").unwrap();
        for i in 0..7isize {
            for c in 0..2usize {
                let mut acc = b[c];
                for tap in 0..3isize {
                    let src = i + (tap - 1) * 2;
                    if (0..7).contains(&src) {
                        acc += w[tap as usize * 2 + c] * x[[src as usize, c]];
                    }
                }
                assert!((y[[i as usize, c]] - acc).abs() < 1e-12);
            }
        }
    }
}
