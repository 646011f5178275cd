//! Differentiable layer primitives (stride-1 convolution via im2col + GEMM,
//! 2x2 max pooling, nearest upsampling, ReLU, dropout, token-wise linear and
//! layer norm). Every forward has an explicit backward; parameters and
//! gradients live in flat stores addressed by [`ParamId`].

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamLayout, ParamStore};
use crate::real::Scalar;

/// Stride-1 2D convolution spec. `pad` and `dilation` are symmetric; output
/// spatial size is `h + 2*pad - dilation*(k-1)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.k - 1);
        (h + 2 * self.pad - span, w + 2 * self.pad - span)
    }

    /// Returns the output map and the im2col matrix (kept for backward).
    pub fn forward<F: Scalar>(
        &self,
        layout: &ParamLayout,
        params: &ParamStore<F>,
        x: &Array3<F>,
    ) -> (Array3<F>, Array2<F>) {
        let (in_c, h, w) = x.dim();
        debug_assert_eq!(in_c, self.in_c);
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.pad, self.dilation);
        let wmat = params.view2(layout, self.w, (self.out_c, self.in_c * self.k * self.k));
        let mut y2 = wmat.dot(&cols);
        if let Some(bid) = self.b {
            let b = params.view1(layout, bid);
            for (mut row, &bv) in y2.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let y = y2
            .into_shape_with_order((self.out_c, oh, ow))
            .expect("conv output shape");
        (y, cols)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<F: Scalar>(
        &self,
        layout: &ParamLayout,
        params: &ParamStore<F>,
        grads: &mut ParamStore<F>,
        cols: &Array2<F>,
        dy: &Array3<F>,
        in_hw: (usize, usize),
    ) -> Array3<F> {
        let (oc, oh, ow) = dy.dim();
        debug_assert_eq!(oc, self.out_c);
        let dy2 = dy
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("dy shape");
        // dW = dY . cols^T
        let dw = dy2.dot(&cols.t());
        {
            let mut gw = grads.view2_mut(layout, self.w, (self.out_c, self.in_c * self.k * self.k));
            gw += &dw;
        }
        if let Some(bid) = self.b {
            let gb = grads.slice_mut(layout, bid);
            for (g, row) in gb.iter_mut().zip(dy2.axis_iter(Axis(0))) {
                *g = *g + row.sum();
            }
        }
        let wmat = params.view2(layout, self.w, (self.out_c, self.in_c * self.k * self.k));
        let dcols = wmat.t().dot(&dy2);
        col2im(
            &dcols,
            (self.in_c, in_hw.0, in_hw.1),
            self.k,
            self.pad,
            self.dilation,
        )
    }
}

/// Unfolds `x` into a [in_c*k*k, oh*ow] matrix for stride-1 convolution.
pub fn im2col<F: Scalar>(x: &Array3<F>, k: usize, pad: usize, dilation: usize) -> Array2<F> {
    let (in_c, h, w) = x.dim();
    let span = dilation * (k - 1);
    let oh = h + 2 * pad - span;
    let ow = w + 2 * pad - span;
    let mut cols = Array2::<F>::zeros((in_c * k * k, oh * ow));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for ci in 0..in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_base = row * oh * ow;
                let shift = (dilation * kj) as isize - pad as isize;
                let ox_lo = (-shift).max(0) as usize;
                let ox_hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + (dilation * ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_off = ci * h * w + iy as usize * w + (ox_lo as isize + shift) as usize;
                    let dst_off = row_base + oy * ow + ox_lo;
                    let n = ox_hi - ox_lo;
                    cs[dst_off..dst_off + n].copy_from_slice(&xs[src_off..src_off + n]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back to input layout (adjoint of im2col).
pub fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    x_dim: (usize, usize, usize),
    k: usize,
    pad: usize,
    dilation: usize,
) -> Array3<F> {
    let (in_c, h, w) = x_dim;
    let span = dilation * (k - 1);
    let oh = h + 2 * pad - span;
    let ow = w + 2 * pad - span;
    let mut dx = Array3::<F>::zeros(x_dim);
    let ds = dcols.as_slice().expect("contiguous dcols");
    let xs = dx.as_slice_mut().expect("contiguous dx");
    for ci in 0..in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_base = row * oh * ow;
                let shift = (dilation * kj) as isize - pad as isize;
                let ox_lo = (-shift).max(0) as usize;
                let ox_hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + (dilation * ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_off = ci * h * w + iy as usize * w + (ox_lo as isize + shift) as usize;
                    let src_off = row_base + oy * ow + ox_lo;
                    for i in 0..(ox_hi - ox_lo) {
                        xs[dst_off + i] = xs[dst_off + i] + ds[src_off + i];
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Returns pooled map and per-output argmax
/// (0..4, row-major within the window; ties take the first maximum).
pub fn maxpool2_forward<F: Scalar>(x: &Array3<F>) -> (Array3<F>, Array3<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<F>::zeros((c, oh, ow));
    let mut idx = Array3::<u8>::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[(ci, oy * 2, ox * 2)];
                let mut bi = 0u8;
                for (j, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x[(ci, oy * 2 + dy, ox * 2 + dx)];
                    if v > best {
                        best = v;
                        bi = j as u8 + 1;
                    }
                }
                y[(ci, oy, ox)] = best;
                idx[(ci, oy, ox)] = bi;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward<F: Scalar>(dy: &Array3<F>, idx: &Array3<u8>, in_hw: (usize, usize)) -> Array3<F> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<F>::zeros((c, in_hw.0, in_hw.1));
    const OFF: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (dyo, dxo) = OFF[idx[(ci, oy, ox)] as usize];
                dx[(ci, oy * 2 + dyo, ox * 2 + dxo)] = dy[(ci, oy, ox)];
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<F>::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(ci, iy, ix)];
                y[(ci, iy * 2, ix * 2)] = v;
                y[(ci, iy * 2, ix * 2 + 1)] = v;
                y[(ci, iy * 2 + 1, ix * 2)] = v;
                y[(ci, iy * 2 + 1, ix * 2 + 1)] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Scalar>(dy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                dx[(ci, iy, ix)] = dy[(ci, iy * 2, ix * 2)]
                    + dy[(ci, iy * 2, ix * 2 + 1)]
                    + dy[(ci, iy * 2 + 1, ix * 2)]
                    + dy[(ci, iy * 2 + 1, ix * 2 + 1)];
            }
        }
    }
    dx
}

pub fn relu<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// ReLU input gradient from the stored output (y > 0 <=> pass-through).
pub fn relu_backward<F: Scalar>(dy: &Array3<F>, y: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// Inverted-dropout mask: entries are 0 or 1/(1-rate). `None` when inactive.
#[derive(Clone, Debug)]
pub struct DropoutMask<F>(pub Option<Array3<F>>);

impl<F: Scalar> DropoutMask<F> {
    pub fn sample(shape: (usize, usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Self {
        if rate <= 0.0 {
            return Self(None);
        }
        let keep = 1.0 - rate;
        let scale = F::c(1.0 / keep);
        let mut m = Array3::<F>::zeros(shape);
        for v in m.iter_mut() {
            let u: f64 = rng.random();
            if u >= rate {
                *v = scale;
            }
        }
        Self(Some(m))
    }

    pub fn identity() -> Self {
        Self(None)
    }

    pub fn apply(&self, x: &mut Array3<F>) {
        if let Some(m) = &self.0 {
            *x *= m;
        }
    }
}

/// Token-wise affine map: y = x W^T + b for x of shape [N, d_in].
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward<F: Scalar>(
        &self,
        layout: &ParamLayout,
        params: &ParamStore<F>,
        x: &Array2<F>,
    ) -> Array2<F> {
        let w = params.view2(layout, self.w, (self.d_out, self.d_in));
        let mut y = x.dot(&w.t());
        if let Some(bid) = self.b {
            let b = params.view1(layout, bid);
            for mut row in y.axis_iter_mut(Axis(0)) {
                row += &b;
            }
        }
        y
    }

    pub fn backward<F: Scalar>(
        &self,
        layout: &ParamLayout,
        params: &ParamStore<F>,
        grads: &mut ParamStore<F>,
        x: &Array2<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let dw = dy.t().dot(x);
        {
            let mut gw = grads.view2_mut(layout, self.w, (self.d_out, self.d_in));
            gw += &dw;
        }
        if let Some(bid) = self.b {
            let gb = grads.slice_mut(layout, bid);
            for (g, col) in gb.iter_mut().zip(dy.axis_iter(Axis(1))) {
                *g = *g + col.sum();
            }
        }
        let w = params.view2(layout, self.w, (self.d_out, self.d_in));
        dy.dot(&w)
    }
}

const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis of [N, d] with affine gain/bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

/// Per-call cache for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCtx<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

impl LayerNorm {
    pub fn forward<F: Scalar>(
        &self,
        layout: &ParamLayout,
        params: &ParamStore<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, LayerNormCtx<F>) {
        let (n, d) = x.dim();
        debug_assert_eq!(d, self.d);
        let g = params.view1(layout, self.gain);
        let b = params.view1(layout, self.bias);
        let mut xhat = Array2::<F>::zeros((n, d));
        let mut inv_std = Array1::<F>::zeros(n);
        let mut y = Array2::<F>::zeros((n, d));
        let dn = F::c(d as f64);
        for r in 0..n {
            let row = x.index_axis(Axis(0), r);
            let mean = row.sum() / dn;
            let mut var = F::zero();
            for &v in row.iter() {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dn;
            let is = (var + F::c(LN_EPS)).sqrt().recip();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[(r, j)] = xh;
                y[(r, j)] = g[j] * xh + b[j];
            }
        }
        (y, LayerNormCtx { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        layout: &ParamLayout,
        params: &ParamStore<F>,
        grads: &mut ParamStore<F>,
        ctx: &LayerNormCtx<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let (n, d) = dy.dim();
        let g = params.view1(layout, self.gain).to_owned();
        {
            let gg = grads.slice_mut(layout, self.gain);
            for j in 0..d {
                let mut acc = F::zero();
                for r in 0..n {
                    acc = acc + dy[(r, j)] * ctx.xhat[(r, j)];
                }
                gg[j] = gg[j] + acc;
            }
        }
        {
            let gb = grads.slice_mut(layout, self.bias);
            for j in 0..d {
                let mut acc = F::zero();
                for r in 0..n {
                    acc = acc + dy[(r, j)];
                }
                gb[j] = gb[j] + acc;
            }
        }
        let mut dx = Array2::<F>::zeros((n, d));
        let dn = F::c(d as f64);
        for r in 0..n {
            let mut sum_dxh = F::zero();
            let mut sum_dxh_xh = F::zero();
            for j in 0..d {
                let dxh = dy[(r, j)] * g[j];
                sum_dxh = sum_dxh + dxh;
                sum_dxh_xh = sum_dxh_xh + dxh * ctx.xhat[(r, j)];
            }
            let m1 = sum_dxh / dn;
            let m2 = sum_dxh_xh / dn;
            for j in 0..d {
                let dxh = dy[(r, j)] * g[j];
                dx[(r, j)] = ctx.inv_std[r] * (dxh - m1 - ctx.xhat[(r, j)] * m2);
            }
        }
        dx
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let maxv = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - maxv).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Jacobian-vector product of row-wise softmax: a .* (da - rowdot(da, a)).
pub fn softmax_rows_backward<F: Scalar>(a: &Array2<F>, da: &Array2<F>) -> Array2<F> {
    let (n, m) = a.dim();
    let mut out = Array2::<F>::zeros((n, m));
    for r in 0..n {
        let mut dot = F::zero();
        for j in 0..m {
            dot = dot + a[(r, j)] * da[(r, j)];
        }
        for j in 0..m {
            out[(r, j)] = a[(r, j)] * (da[(r, j)] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::params::Init;
    use ndarray::arr3;

    fn conv_fixture(k: usize, pad: usize, dil: usize) -> (ParamLayout, Conv2d) {
        let mut l = ParamLayout::default();
        let w = l.push("w", &[1, 1, k, k], Init::Zeros);
        let b = l.push("b", &[1], Init::Zeros);
        (
            l,
            Conv2d {
                w,
                b: Some(b),
                in_c: 1,
                out_c: 1,
                k,
                pad,
                dilation: dil,
            },
        )
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let (l, conv) = conv_fixture(3, 1, 1);
        let mut p = ParamStore::<f64>::zeros(&l);
        p.slice_mut(&l, conv.w)[4] = 1.0; // center tap
        let x = arr3(&[[[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0], [9.0, 10.0, 11.0, 12.0], [13.0, 14.0, 15.0, 16.0]]]);
        let (y, _) = conv.forward(&l, &p, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn hand_computed_convolution_on_4x4() {
        // 3x3 averaging kernel over a constant field stays constant away from
        // the border and scales by the in-bounds tap count at the border.
        let (l, conv) = conv_fixture(3, 1, 1);
        let mut p = ParamStore::<f64>::zeros(&l);
        p.slice_mut(&l, conv.w).fill(1.0 / 9.0);
        let x = Array3::<f64>::from_elem((1, 4, 4), 9.0);
        let (y, _) = conv.forward(&l, &p, &x);
        assert!((y[(0, 1, 1)] - 9.0).abs() < 1e-12);
        assert!((y[(0, 0, 0)] - 4.0).abs() < 1e-12); // 4 taps in bounds
        assert!((y[(0, 0, 1)] - 6.0).abs() < 1e-12); // 6 taps in bounds
    }

    #[test]
    fn dilated_convolution_on_constant_field_is_constant_in_interior() {
        let (l, conv) = conv_fixture(3, 2, 2);
        let mut p = ParamStore::<f64>::zeros(&l);
        p.slice_mut(&l, conv.w).fill(1.0 / 9.0);
        let x = Array3::<f64>::from_elem((1, 8, 8), 3.0);
        let (y, _) = conv.forward(&l, &p, &x);
        assert_eq!(y.dim(), (1, 8, 8));
        assert!((y[(0, 4, 4)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut l = ParamLayout::default();
        let w = l.push("w", &[2, 3, 3, 3], Init::HeNormal { fan_in: 27 });
        let b = l.push("b", &[2], Init::HeNormal { fan_in: 1 });
        let conv = Conv2d {
            w,
            b: Some(b),
            in_c: 3,
            out_c: 2,
            k: 3,
            pad: 1,
            dilation: 1,
        };
        let p = ParamStore::<f64>::init(&l, 3);
        let mut x = Array3::<f64>::zeros((3, 5, 5));
        for (i, v) in x.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.13;
        }
        // loss = sum(y^2)/2 so dL/dy = y
        let (y, cols) = conv.forward(&l, &p, &x);
        let mut g = ParamStore::<f64>::zeros(&l);
        let dx = conv.backward(&l, &p, &mut g, &cols, &y, (5, 5));
        let eps = 1e-6;
        // probe a few weight entries
        for &pi in &[0usize, 5, 17, 40, 53] {
            let mut pp = p.clone();
            pp.data_mut()[pi] += eps;
            let (yp, _) = conv.forward(&l, &pp, &x);
            pp.data_mut()[pi] -= 2.0 * eps;
            let (ym, _) = conv.forward(&l, &pp, &x);
            let num = (yp.mapv(|v| v * v).sum() - ym.mapv(|v| v * v).sum()) / (4.0 * eps);
            assert!(
                (num - g.data()[pi]).abs() < 1e-6 * (1.0 + num.abs()),
                "param {pi}: fd {num} vs analytic {}",
                g.data()[pi]
            );
        }
        // probe input gradient
        let mut xp = x.clone();
        xp[(1, 2, 2)] += eps;
        let (yp, _) = conv.forward(&l, &p, &xp);
        xp[(1, 2, 2)] -= 2.0 * eps;
        let (ym, _) = conv.forward(&l, &p, &xp);
        let num = (yp.mapv(|v| v * v).sum() - ym.mapv(|v| v * v).sum()) / (4.0 * eps);
        assert!((num - dx[(1, 2, 2)]).abs() < 1e-6 * (1.0 + num.abs()));
    }

    #[test]
    fn maxpool_roundtrip_routes_gradient_to_argmax() {
        let x = arr3(&[[[1.0, 2.0], [4.0, 3.0]]]);
        let (y, idx) = maxpool2_forward(&x);
        assert_eq!(y[(0, 0, 0)], 4.0);
        let dy = arr3(&[[[2.5]]]);
        let dx = maxpool2_backward(&dy, &idx, (2, 2));
        assert_eq!(dx[(0, 1, 0)], 2.5);
        assert_eq!(dx.sum(), 2.5);
    }

    #[test]
    fn upsample_constant_stays_constant_and_adjoint_sums() {
        let x = Array3::<f64>::from_elem((2, 3, 3), 7.0);
        let y = upsample2_forward(&x);
        assert!(y.iter().all(|&v| v == 7.0));
        let dy = Array3::<f64>::from_elem((2, 6, 6), 1.0);
        let dx = upsample2_backward(&dy);
        assert!(dx.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn layernorm_backward_matches_finite_difference() {
        let mut l = ParamLayout::default();
        let gain = l.push("g", &[6], Init::Ones);
        let bias = l.push("b", &[6], Init::Zeros);
        let ln = LayerNorm { gain, bias, d: 6 };
        let mut p = ParamStore::<f64>::init(&l, 5);
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            *v += (i as f64) * 0.01;
        }
        let mut x = Array2::<f64>::zeros((3, 6));
        for (i, v) in x.iter_mut().enumerate() {
            *v = ((i * 29 % 13) as f64 - 6.0) * 0.21;
        }
        let (y, ctx) = ln.forward(&l, &p, &x);
        let mut g = ParamStore::<f64>::zeros(&l);
        let dx = ln.backward(&l, &p, &mut g, &ctx, &y);
        let eps = 1e-6;
        let loss = |xx: &Array2<f64>, pp: &ParamStore<f64>| {
            let (yy, _) = ln.forward(&l, pp, xx);
            yy.mapv(|v| v * v).sum() / 2.0
        };
        let mut xp = x.clone();
        xp[(1, 3)] += eps;
        let lp = loss(&xp, &p);
        xp[(1, 3)] -= 2.0 * eps;
        let lm = loss(&xp, &p);
        let num = (lp - lm) / (2.0 * eps);
        assert!((num - dx[(1, 3)]).abs() < 1e-6 * (1.0 + num.abs()));
        for pi in [0usize, 4, 7, 11] {
            let mut pp = p.clone();
            pp.data_mut()[pi] += eps;
            let lp = loss(&x, &pp);
            pp.data_mut()[pi] -= 2.0 * eps;
            let lm = loss(&x, &pp);
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - g.data()[pi]).abs() < 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn softmax_rows_backward_matches_finite_difference() {
        let mut s = Array2::<f64>::zeros((2, 4));
        for (i, v) in s.iter_mut().enumerate() {
            *v = ((i * 17 % 7) as f64) * 0.3 - 0.9;
        }
        let mut a = s.clone();
        softmax_rows(&mut a);
        // loss = sum(a .* t) for fixed t
        let mut t = Array2::<f64>::zeros((2, 4));
        for (i, v) in t.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).cos();
        }
        let ds = softmax_rows_backward(&a, &t);
        let eps = 1e-6;
        let mut sp = s.clone();
        sp[(1, 2)] += eps;
        let mut ap = sp.clone();
        softmax_rows(&mut ap);
        sp[(1, 2)] -= 2.0 * eps;
        let mut am = sp.clone();
        softmax_rows(&mut am);
        let num = ((&ap * &t).sum() - (&am * &t).sum()) / (2.0 * eps);
        assert!((num - ds[(1, 2)]).abs() < 1e-8);
    }
}
