//! Flat parameter storage shared by every architecture.
//!
//! All trainable scalars live in one `Vec<f64>`; layers hold [`ParamId`] handles
//! into it. Gradients use the same layout, which keeps the optimizer, the
//! checkpoint blob and the finite-difference checks architecture-agnostic.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    infos: Vec<ParamInfo>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn empty() -> Self {
        ParamStore {
            infos: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.find(name).map(|id| {
            let info = &self.infos[id.0];
            (info.shape.as_slice(), &self.data[info.offset..info.offset + info.len])
        })
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let i = &self.infos[id.0];
        &self.data[i.offset..i.offset + i.len]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let i = &self.infos[id.0];
        let (r, c) = as_2d(&i.shape);
        ArrayView2::from_shape((r, c), &self.data[i.offset..i.offset + i.len])
            .expect("parameter shape")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    /// Replace every value; the layout must match.
    pub fn load_flat(&mut self, values: &[f64]) -> bool {
        if values.len() != self.data.len() {
            return false;
        }
        self.data.copy_from_slice(values);
        true
    }
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => panic!("unsupported parameter rank {}", shape.len()),
    }
}

/// Gradient buffer laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    infos: Vec<(usize, usize, usize, usize)>,
    data: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            infos: store
                .infos
                .iter()
                .map(|i| {
                    let (r, c) = as_2d(&i.shape);
                    (i.offset, i.len, r, c)
                })
                .collect(),
            data: vec![0.0; store.len()],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let (off, len, r, c) = self.infos[id.0];
        ArrayViewMut2::from_shape((r, c), &mut self.data[off..off + len]).expect("gradient shape")
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let (off, len, _, _) = self.infos[id.0];
        ArrayViewMut1::from(&mut self.data[off..off + len])
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }
}

/// Registers parameters in construction order with hierarchical names.
pub struct ParamBuilder<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store: ParamStore::empty(),
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn scoped<T>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push(scope);
        let out = f(self);
        self.pop();
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let len: usize = shape.iter().product();
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        let offset = self.store.data.len();
        match init {
            Init::Zeros => self.store.data.extend(std::iter::repeat(0.0).take(len)),
            Init::Ones => self.store.data.extend(std::iter::repeat(1.0).take(len)),
            Init::Uniform(b) => {
                for _ in 0..len {
                    let v = self.rng.gen_range(-b..=b);
                    self.store.data.push(v);
                }
            }
        }
        self.store.infos.push(ParamInfo {
            name: full,
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.store.infos.len() - 1)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}
