//! Multi-head self-attention, optionally with relative sinusoidal positions
//! (content bias `u` and position bias `v`, as in Transformer-XL / Conformer).

use ndarray::{s, Array2, Axis};

use super::layers::{sinusoidal, Linear};
use super::params::{Grads, Init, ParamBuilder, ParamId, ParamStore};

#[derive(Debug, Clone)]
struct RelPosition {
    proj: ParamId,
    u: ParamId,
    v: ParamId,
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
    rel: Option<RelPosition>,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    concat: Array2<f64>,
    probs: Vec<Array2<f64>>,
    pos: Option<(Array2<f64>, Array2<f64>)>,
}

impl SelfAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, relative: bool) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        pb.scoped(name, |pb| {
            let q = Linear::new(pb, "query", dim, dim);
            let k = Linear::new(pb, "key", dim, dim);
            let v = Linear::new(pb, "value", dim, dim);
            let o = Linear::new(pb, "out", dim, dim);
            let rel = relative.then(|| {
                let bound = 1.0 / (dim as f64).sqrt();
                RelPosition {
                    proj: pb.add("pos_proj", &[dim, dim], Init::Uniform(bound)),
                    u: pb.add("pos_bias_u", &[dim], Init::Uniform(bound)),
                    v: pb.add("pos_bias_v", &[dim], Init::Uniform(bound)),
                }
            });
            SelfAttention {
                q,
                k,
                v,
                o,
                heads,
                dim,
                rel,
            }
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let t = x.nrows();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        // row r encodes relative offset i - j = r - (t - 1)
        let pos = self.rel.as_ref().map(|rel| {
            let enc = sinusoidal((0..2 * t - 1).map(|r| r as f64 - (t as f64 - 1.0)), self.dim);
            let proj = enc.dot(&p.mat(rel.proj));
            (enc, proj)
        });
        let mut concat = Array2::zeros((t, self.dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = match (&self.rel, &pos) {
                (Some(rel), Some((_, proj))) => {
                    let u = p.vec(rel.u);
                    let vb = p.vec(rel.v);
                    let qu = &qh + &u.slice(s![h * dh..(h + 1) * dh]);
                    let qv = &qh + &vb.slice(s![h * dh..(h + 1) * dh]);
                    let mut sc = qu.dot(&kh.t());
                    let rr = qv.dot(&proj.slice(cols).t());
                    for i in 0..t {
                        for j in 0..t {
                            sc[[i, j]] += rr[[i, i + t - 1 - j]];
                        }
                    }
                    sc
                }
                _ => qh.dot(&kh.t()),
            };
            scores.mapv_inplace(|v| v * scale);
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&vh));
            probs.push(scores);
        }
        let y = self.o.forward(p, &concat);
        (
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                concat,
                probs,
                pos,
            },
        )
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        c: &AttentionCache,
        dy: &Array2<f64>,
        g: &mut Grads,
    ) -> Array2<f64> {
        let t = c.x.nrows();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.o.backward(p, &c.concat, dy, g);
        let mut dq = Array2::zeros((t, self.dim));
        let mut dk = Array2::zeros((t, self.dim));
        let mut dv = Array2::zeros((t, self.dim));
        let mut dproj = c.pos.as_ref().map(|_| Array2::zeros((2 * t - 1, self.dim)));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &c.probs[h];
            let doh = dconcat.slice(cols);
            let vh = c.v.slice(cols);
            let kh = c.k.slice(cols);
            let qh = c.q.slice(cols);
            let da = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let row_dot = (&da * a).sum_axis(Axis(1));
            let mut ds = (&da - &row_dot.insert_axis(Axis(1))) * a;
            ds.mapv_inplace(|v| v * scale);
            match (&self.rel, &c.pos) {
                (Some(rel), Some((_, proj))) => {
                    let hs = s![h * dh..(h + 1) * dh];
                    let qu = &qh + &p.vec(rel.u).slice(hs);
                    let qv = &qh + &p.vec(rel.v).slice(hs);
                    let proj_h = proj.slice(cols);
                    let mut drr = Array2::zeros((t, 2 * t - 1));
                    for i in 0..t {
                        for j in 0..t {
                            drr[[i, i + t - 1 - j]] = ds[[i, j]];
                        }
                    }
                    let dqu = ds.dot(&kh);
                    let dqv = drr.dot(&proj_h);
                    dk.slice_mut(cols).assign(&ds.t().dot(&qu));
                    if let Some(dp) = dproj.as_mut() {
                        dp.slice_mut(cols).assign(&drr.t().dot(&qv));
                    }
                    g.vec_mut(rel.u)
                        .slice_mut(hs)
                        .scaled_add(1.0, &dqu.sum_axis(Axis(0)));
                    g.vec_mut(rel.v)
                        .slice_mut(hs)
                        .scaled_add(1.0, &dqv.sum_axis(Axis(0)));
                    dq.slice_mut(cols).assign(&(dqu + dqv));
                }
                _ => {
                    dq.slice_mut(cols).assign(&ds.dot(&kh));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qh));
                }
            }
        }
        if let (Some(rel), Some((enc, _)), Some(dp)) = (&self.rel, &c.pos, &dproj) {
            g.mat_mut(rel.proj).scaled_add(1.0, &enc.t().dot(dp));
        }
        let mut dx = self.q.backward(p, &c.x, &dq, g);
        dx += &self.k.backward(p, &c.x, &dk, g);
        dx += &self.v.backward(p, &c.x, &dv, g);
        dx
    }
}

pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}
