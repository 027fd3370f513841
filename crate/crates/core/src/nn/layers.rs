//! Basic layers with explicit forward/backward passes over frames-major
//! `(frames, channels)` matrices.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, Init, ParamBuilder, ParamId, ParamStore};

/// Forward-pass context: training flag and the dropout random stream.
pub struct Ctx {
    train: bool,
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: None,
        }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            train: true,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn keep_mask(&mut self, p: f64, shape: (usize, usize)) -> Option<Array2<f64>> {
        if !self.train || p <= 0.0 {
            return None;
        }
        let rng = self.rng.as_mut().expect("training context carries an rng");
        let scale = 1.0 / (1.0 - p);
        Some(Array2::from_shape_simple_fn(shape, || {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                scale
            }
        }))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        pb.scoped(name, |pb| Linear {
            w: pb.add("weight", &[in_dim, out_dim], Init::Uniform(bound)),
            b: pb.add("bias", &[out_dim], Init::Uniform(bound)),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&p.mat(self.w));
        y += &p.vec(self.b);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        p: &ParamStore,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        g: &mut Grads,
    ) -> Array2<f64> {
        g.mat_mut(self.w).scaled_add(1.0, &x.t().dot(dy));
        g.vec_mut(self.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&p.mat(self.w).t())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| LayerNorm {
            gamma: pb.add("gamma", &[dim], Init::Ones),
            beta: pb.add("beta", &[dim], Init::Zeros),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let mut y = &xhat * &p.vec(self.gamma);
        y += &p.vec(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        g: &mut Grads,
    ) -> Array2<f64> {
        g.vec_mut(self.gamma)
            .scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
        g.vec_mut(self.beta).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let dxhat = dy * &p.vec(self.gamma);
        let d = dy.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&mean_dxhat)
            .and(&mean_dxhat_xhat)
            .and(&cache.inv_std)
            .for_each(|mut row, xh, &m1, &m2, &s| {
                Zip::from(&mut row).and(&xh).for_each(|v, &xv| {
                    *v = s * (*v - m1 - xv * m2);
                });
            });
        dx
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    pub fn forward(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => x.mapv(|v| v.max(0.0)),
            Activation::Swish => x.mapv(|v| v * sigmoid(v)),
        }
    }

    /// Gradient w.r.t. the pre-activation `x`.
    pub fn backward(self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let mut dx = dy.clone();
        match self {
            Activation::Relu => Zip::from(&mut dx).and(x).for_each(|d, &v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }),
            Activation::Swish => Zip::from(&mut dx).and(x).for_each(|d, &v| {
                let s = sigmoid(v);
                *d *= s + v * s * (1.0 - s);
            }),
        }
        dx
    }
}

/// Gated linear unit over the channel axis: first half times sigmoid of the second.
pub fn glu_forward(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() / 2;
    let a = x.slice(ndarray::s![.., ..d]);
    let b = x.slice(ndarray::s![.., d..]);
    let mut y = a.to_owned();
    Zip::from(&mut y).and(&b).for_each(|v, &bv| *v *= sigmoid(bv));
    y
}

pub fn glu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() / 2;
    let mut dx = Array2::zeros(x.dim());
    for t in 0..x.nrows() {
        for c in 0..d {
            let a = x[[t, c]];
            let s = sigmoid(x[[t, c + d]]);
            dx[[t, c]] = dy[[t, c]] * s;
            dx[[t, c + d]] = dy[[t, c]] * a * s * (1.0 - s);
        }
    }
    dx
}

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward(&self, x: Array2<f64>, ctx: &mut Ctx) -> (Array2<f64>, Option<Array2<f64>>) {
        match ctx.keep_mask(self.p, x.dim()) {
            Some(mask) => (x * &mask, Some(mask)),
            None => (x, None),
        }
    }

    pub fn backward(&self, mask: &Option<Array2<f64>>, dy: Array2<f64>) -> Array2<f64> {
        match mask {
            Some(m) => dy * m,
            None => dy,
        }
    }
}

/// Position-wise feed-forward: linear, activation, dropout, linear, dropout.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
    act: Activation,
    drop: Dropout,
}

pub struct FeedForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    mask1: Option<Array2<f64>>,
    mask2: Option<Array2<f64>>,
}

impl FeedForward {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        dropout: f64,
    ) -> Self {
        pb.scoped(name, |pb| FeedForward {
            up: Linear::new(pb, "up", dim, hidden),
            down: Linear::new(pb, "down", hidden, dim),
            act,
            drop: Dropout { p: dropout },
        })
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        x: &Array2<f64>,
        ctx: &mut Ctx,
    ) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.up.forward(p, x);
        let (hidden, mask1) = self.drop.forward(self.act.forward(&pre), ctx);
        let (y, mask2) = self.drop.forward(self.down.forward(p, &hidden), ctx);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                hidden,
                mask1,
                mask2,
            },
        )
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        c: &FeedForwardCache,
        dy: Array2<f64>,
        g: &mut Grads,
    ) -> Array2<f64> {
        let dy = self.drop.backward(&c.mask2, dy);
        let dh = self.down.backward(p, &c.hidden, &dy, g);
        let dh = self.drop.backward(&c.mask1, dh);
        let dpre = self.act.backward(&c.pre, &dh);
        self.up.backward(p, &c.x, &dpre, g)
    }
}

/// Sinusoidal encoding of (possibly negative) positions, `positions.len() x dim`.
pub fn sinusoidal(positions: impl Iterator<Item = f64>, dim: usize) -> Array2<f64> {
    let pos: Vec<f64> = positions.collect();
    let mut out = Array2::zeros((pos.len(), dim));
    for (r, &p) in pos.iter().enumerate() {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = p / 10000f64.powf(2.0 * pair / dim as f64);
            out[[r, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
