//! Unidirectional and bidirectional LSTM layers with backpropagation through time.
//!
//! Gate order in the packed weights is input, forget, cell, output.

use ndarray::{s, Array1, Array2, Axis};

use super::layers::sigmoid;
use super::params::{Grads, Init, ParamBuilder, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Lstm {
    w_in: ParamId,
    w_rec: ParamId,
    bias: ParamId,
    hidden: usize,
}

pub struct LstmCache {
    x: Array2<f64>,
    /// Post-nonlinearity gates per step, `(T, 4H)`.
    gates: Array2<f64>,
    cells: Array2<f64>,
    hiddens: Array2<f64>,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        pb.scoped(name, |pb| Lstm {
            w_in: pb.add("weight_in", &[input, 4 * hidden], Init::Uniform(bound)),
            w_rec: pb.add("weight_rec", &[hidden, 4 * hidden], Init::Uniform(bound)),
            bias: pb.add("bias", &[4 * hidden], Init::Uniform(bound)),
            hidden,
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LstmCache) {
        let t_len = x.nrows();
        let h_dim = self.hidden;
        let mut pre = x.dot(&p.mat(self.w_in));
        pre += &p.vec(self.bias);
        let w_rec = p.mat(self.w_rec);
        let mut gates = Array2::zeros((t_len, 4 * h_dim));
        let mut cells = Array2::zeros((t_len, h_dim));
        let mut hiddens = Array2::zeros((t_len, h_dim));
        let mut h = Array1::zeros(h_dim);
        let mut c = Array1::<f64>::zeros(h_dim);
        for t in 0..t_len {
            let z = &pre.row(t) + &h.dot(&w_rec);
            let mut g = gates.row_mut(t);
            for j in 0..h_dim {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h_dim + j]);
                let c_g = z[2 * h_dim + j].tanh();
                let o_g = sigmoid(z[3 * h_dim + j]);
                g[j] = i_g;
                g[h_dim + j] = f_g;
                g[2 * h_dim + j] = c_g;
                g[3 * h_dim + j] = o_g;
                c[j] = f_g * c[j] + i_g * c_g;
                h[j] = o_g * c[j].tanh();
            }
            cells.row_mut(t).assign(&c);
            hiddens.row_mut(t).assign(&h);
        }
        (
            hiddens.clone(),
            LstmCache {
                x: x.clone(),
                gates,
                cells,
                hiddens,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, cache: &LstmCache, dy: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let t_len = cache.x.nrows();
        let h_dim = self.hidden;
        let w_rec = p.mat(self.w_rec);
        let mut dz_all = Array2::zeros((t_len, 4 * h_dim));
        let mut dh_next = Array1::<f64>::zeros(h_dim);
        let mut dc_next = Array1::<f64>::zeros(h_dim);
        let mut dw_rec = Array2::zeros((h_dim, 4 * h_dim));
        for t in (0..t_len).rev() {
            let gts = cache.gates.row(t);
            let c_t = cache.cells.row(t);
            let mut dz = dz_all.row_mut(t);
            for j in 0..h_dim {
                let (i_g, f_g, c_g, o_g) = (gts[j], gts[h_dim + j], gts[2 * h_dim + j], gts[3 * h_dim + j]);
                let c_prev = if t > 0 { cache.cells[[t - 1, j]] } else { 0.0 };
                let tanh_c = c_t[j].tanh();
                let dh = dy[[t, j]] + dh_next[j];
                let dc = dh * o_g * (1.0 - tanh_c * tanh_c) + dc_next[j];
                dz[j] = dc * c_g * i_g * (1.0 - i_g);
                dz[h_dim + j] = dc * c_prev * f_g * (1.0 - f_g);
                dz[2 * h_dim + j] = dc * i_g * (1.0 - c_g * c_g);
                dz[3 * h_dim + j] = dh * tanh_c * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }
            dh_next = dz.dot(&w_rec.t());
            if t > 0 {
                let h_prev = cache.hiddens.row(t - 1);
                let outer = h_prev
                    .insert_axis(Axis(1))
                    .dot(&dz_all.row(t).insert_axis(Axis(0)));
                dw_rec += &outer;
            }
        }
        g.mat_mut(self.w_rec).scaled_add(1.0, &dw_rec);
        g.mat_mut(self.w_in).scaled_add(1.0, &cache.x.t().dot(&dz_all));
        g.vec_mut(self.bias).scaled_add(1.0, &dz_all.sum_axis(Axis(0)));
        dz_all.dot(&p.mat(self.w_in).t())
    }
}

/// Forward and time-reversed LSTMs with outputs concatenated, `(T, 2H)`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
    hidden: usize,
}

pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
}

fn reversed(x: &Array2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

impl BiLstm {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Self {
        pb.scoped(name, |pb| BiLstm {
            fwd: Lstm::new(pb, "forward", input, hidden),
            bwd: Lstm::new(pb, "backward", input, hidden),
            hidden,
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, BiLstmCache) {
        let (hf, cf) = self.fwd.forward(p, x);
        let (hb, cb) = self.bwd.forward(p, &reversed(x));
        let mut out = Array2::zeros((x.nrows(), 2 * self.hidden));
        out.slice_mut(s![.., ..self.hidden]).assign(&hf);
        out.slice_mut(s![.., self.hidden..]).assign(&hb.slice(s![..;-1, ..]));
        (out, BiLstmCache { fwd: cf, bwd: cb })
    }

    pub fn backward(&self, p: &ParamStore, c: &BiLstmCache, dy: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let dyf = dy.slice(s![.., ..self.hidden]).to_owned();
        let dyb = dy.slice(s![..;-1, self.hidden..]).to_owned();
        let mut dx = self.fwd.backward(p, &c.fwd, &dyf, g);
        dx += &reversed(&self.bwd.backward(p, &c.bwd, &dyb, g));
        dx
    }
}
