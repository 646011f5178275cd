//! Flat parameter storage.
//!
//! All learnable tensors live in one contiguous buffer described by a
//! [`ParamLayout`]. Optimizers, weight decay, checkpoints, and
//! finite-difference probes all address parameters through the same flat
//! view, while layers borrow shaped views by [`ParamId`].

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::real::Scalar;
use crate::rng::derive_seed;

/// Initialization rule for one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)); used for conv and linear weights.
    HeNormal { fan_in: usize },
    /// Normal(0, std); used for positional embeddings.
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Handle to one tensor inside the flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Description of one named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
}

/// Ordered set of parameter tensors; the order defines the flat layout.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let len: usize = shape.iter().product();
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
            init,
        };
        self.total += len;
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

/// Flat buffer of parameter (or gradient) values over a layout.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    data: Vec<F>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            data: vec![F::zero(); layout.total_len()],
        }
    }

    /// Seeded initialization following each entry's [`Init`] rule. Draws in
    /// f64 then casts, so f32 and f64 instantiations see the same values.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut data = vec![F::zero(); layout.total_len()];
        for (i, e) in layout.entries().iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let slot = &mut data[e.offset..e.offset + e.len];
            match e.init {
                Init::Zeros => {}
                Init::Ones => slot.fill(F::one()),
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = F::c(gauss(&mut rng) * std);
                    }
                }
                Init::Normal { std } => {
                    for v in slot.iter_mut() {
                        *v = F::c(gauss(&mut rng) * std);
                    }
                }
            }
        }
        Self { data }
    }

    pub fn from_vec(layout: &ParamLayout, data: Vec<F>) -> Option<Self> {
        (data.len() == layout.total_len()).then_some(Self { data })
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, layout: &ParamLayout, id: ParamId) -> &[F] {
        let e = layout.entry(id);
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn slice_mut(&mut self, layout: &ParamLayout, id: ParamId) -> &mut [F] {
        let e = layout.entry(id);
        &mut self.data[e.offset..e.offset + e.len]
    }

    /// 1-D view of an entry.
    pub fn view1<'a>(&'a self, layout: &ParamLayout, id: ParamId) -> ArrayView1<'a, F> {
        ArrayView1::from(self.slice(layout, id))
    }

    /// 2-D view with an explicit (rows, cols) factorization of the entry.
    pub fn view2<'a>(
        &'a self,
        layout: &ParamLayout,
        id: ParamId,
        dims: (usize, usize),
    ) -> ArrayView2<'a, F> {
        let s = self.slice(layout, id);
        debug_assert_eq!(s.len(), dims.0 * dims.1);
        ArrayView2::from_shape(dims, s).expect("layout dims")
    }

    pub fn view2_mut<'a>(
        &'a mut self,
        layout: &ParamLayout,
        id: ParamId,
        dims: (usize, usize),
    ) -> ArrayViewMut2<'a, F> {
        let s = self.slice_mut(layout, id);
        debug_assert_eq!(s.len(), dims.0 * dims.1);
        ArrayViewMut2::from_shape(dims, s).expect("layout dims")
    }

    /// Sum of squares over all parameters (the L2 regularizer body).
    pub fn sq_norm(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v * v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: F) {
        self.data.fill(v);
    }
}

/// Standard normal draw; Box-Muller keeps the stream identical across float
/// widths without pulling in a distributions crate.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 1e-12 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut l = ParamLayout::default();
        let a = l.push("a", &[2, 3], Init::Zeros);
        let b = l.push("b", &[4], Init::Ones);
        assert_eq!(l.entry(a).offset, 0);
        assert_eq!(l.entry(b).offset, 6);
        assert_eq!(l.total_len(), 10);
        let p = ParamStore::<f32>::init(&l, 1);
        assert_eq!(p.slice(&l, b), &[1.0; 4]);
    }

    #[test]
    fn init_is_seed_deterministic_and_width_consistent() {
        let mut l = ParamLayout::default();
        l.push("w", &[8, 8], Init::HeNormal { fan_in: 8 });
        let a = ParamStore::<f32>::init(&l, 7);
        let b = ParamStore::<f32>::init(&l, 7);
        assert_eq!(a.data(), b.data());
        let c = ParamStore::<f64>::init(&l, 7);
        for (x, y) in a.data().iter().zip(c.data().iter()) {
            assert!((*x as f64 - *y).abs() < 1e-7);
        }
    }
}
