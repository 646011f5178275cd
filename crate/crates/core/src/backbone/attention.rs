//! Transformer bottleneck block: pre-norm multi-head self-attention and a
//! two-layer feed-forward, both on residual branches. Positional information
//! enters as a learned additive embedding on the attention branch input, so
//! zeroing the attention and feed-forward weights leaves the block an exact
//! identity map.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use super::layers::{softmax_rows, softmax_rows_backward, LayerNorm, LayerNormCtx, Linear};
use super::params::{ParamId, ParamLayout, ParamStore};
use crate::real::Scalar;

/// Inverted-dropout mask over a token matrix.
#[derive(Clone, Debug)]
pub struct TokenDropout<F>(pub Option<Array2<F>>);

impl<F: Scalar> TokenDropout<F> {
    pub fn sample(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Self {
        if rate <= 0.0 {
            return Self(None);
        }
        let keep = 1.0 - rate;
        let scale = F::c(1.0 / keep);
        let mut m = Array2::<F>::zeros(shape);
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

    pub fn apply(&self, x: &mut Array2<F>) {
        if let Some(m) = &self.0 {
            *x *= m;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub pos: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub dim: usize,
    pub tokens: usize,
}

/// Intermediates kept for the backward pass.
pub struct TransformerCtx<F> {
    ln1: LayerNormCtx<F>,
    attn_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    att: Vec<Array2<F>>,
    heads_out: Array2<F>,
    drop_attn: TokenDropout<F>,
    ln2: LayerNormCtx<F>,
    ln2_out: Array2<F>,
    hidden: Array2<F>,
    drop_ff: TokenDropout<F>,
}

impl TransformerBlock {
    /// Forward over a token matrix [N, d]. Dropout masks are sampled from
    /// `rng` when provided (rate > 0), otherwise the block is deterministic.
    pub fn forward<F: Scalar>(
        &self,
        layout: &ParamLayout,
        params: &ParamStore<F>,
        x: &Array2<F>,
        dropout_rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<F>, TransformerCtx<F>) {
        let (n, d) = x.dim();
        debug_assert_eq!(n, self.tokens);
        debug_assert_eq!(d, self.dim);
        let dk = d / self.heads;
        let scale = F::c(1.0 / (dk as f64).sqrt());

        let (drop_attn, drop_ff) = match rng {
            Some(r) if dropout_rate > 0.0 => (
                TokenDropout::sample((n, d), dropout_rate, r),
                TokenDropout::sample((n, d), dropout_rate, r),
            ),
            _ => (TokenDropout::identity(), TokenDropout::identity()),
        };

        let (ln1_out, ln1_ctx) = self.ln1.forward(layout, params, x);
        let pos = params.view2(layout, self.pos, (n, d));
        let attn_in = &ln1_out + &pos;

        let q = self.wq.forward(layout, params, &attn_in);
        let k = self.wk.forward(layout, params, &attn_in);
        let v = self.wv.forward(layout, params, &attn_in);

        let mut heads_out = Array2::<F>::zeros((n, d));
        let mut att = Vec::with_capacity(self.heads);
        for hi in 0..self.heads {
            let cols = s![.., hi * dk..(hi + 1) * dk];
            let qi = q.slice(cols);
            let ki = k.slice(cols);
            let vi = v.slice(cols);
            let mut scores = qi.dot(&ki.t());
            scores.mapv_inplace(|s| s * scale);
            softmax_rows(&mut scores);
            let oi = scores.dot(&vi);
            heads_out.slice_mut(cols).assign(&oi);
            att.push(scores);
        }

        let mut proj = self.wo.forward(layout, params, &heads_out);
        drop_attn.apply(&mut proj);
        let y1 = x + &proj;

        let (ln2_out, ln2_ctx) = self.ln2.forward(layout, params, &y1);
        let pre = self.ff1.forward(layout, params, &ln2_out);
        let hidden = pre.mapv(|v| v.max(F::zero()));
        let mut ff = self.ff2.forward(layout, params, &hidden);
        drop_ff.apply(&mut ff);
        let y2 = &y1 + &ff;

        (
            y2,
            TransformerCtx {
                ln1: ln1_ctx,
                attn_in,
                q,
                k,
                v,
                att,
                heads_out,
                drop_attn,
                ln2: ln2_ctx,
                ln2_out,
                hidden,
                drop_ff,
            },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        layout: &ParamLayout,
        params: &ParamStore<F>,
        grads: &mut ParamStore<F>,
        ctx: &TransformerCtx<F>,
        dy2: &Array2<F>,
    ) -> Array2<F> {
        let (n, d) = dy2.dim();
        let dk = d / self.heads;
        let scale = F::c(1.0 / (dk as f64).sqrt());

        // feed-forward branch
        let mut dff = dy2.clone();
        ctx.drop_ff.apply(&mut dff);
        let dhidden = self
            .ff2
            .backward(layout, params, grads, &ctx.hidden, &dff);
        let mut dpre = dhidden;
        dpre.zip_mut_with(&ctx.hidden, |dv, &h| {
            if h <= F::zero() {
                *dv = F::zero();
            }
        });
        let dln2_out = self
            .ff1
            .backward(layout, params, grads, &ctx.ln2_out, &dpre);
        let mut dy1 = self.ln2.backward(layout, params, grads, &ctx.ln2, &dln2_out);
        dy1 += dy2;

        // attention branch
        let mut dproj = dy1.clone();
        ctx.drop_attn.apply(&mut dproj);
        let dheads = self
            .wo
            .backward(layout, params, grads, &ctx.heads_out, &dproj);

        let mut dq = Array2::<F>::zeros((n, d));
        let mut dkm = Array2::<F>::zeros((n, d));
        let mut dv = Array2::<F>::zeros((n, d));
        for hi in 0..self.heads {
            let cols = s![.., hi * dk..(hi + 1) * dk];
            let ai = &ctx.att[hi];
            let doi = dheads.slice(cols);
            let vi = ctx.v.slice(cols);
            let qi = ctx.q.slice(cols);
            let ki = ctx.k.slice(cols);
            let da = doi.dot(&vi.t());
            let dvi = ai.t().dot(&doi);
            let mut ds = softmax_rows_backward(ai, &da);
            ds.mapv_inplace(|v| v * scale);
            let dqi = ds.dot(&ki);
            let dki = ds.t().dot(&qi);
            dq.slice_mut(cols).assign(&dqi);
            dkm.slice_mut(cols).assign(&dki);
            dv.slice_mut(cols).assign(&dvi);
        }

        let mut dattn_in = self.wq.backward(layout, params, grads, &ctx.attn_in, &dq);
        dattn_in += &self.wk.backward(layout, params, grads, &ctx.attn_in, &dkm);
        dattn_in += &self.wv.backward(layout, params, grads, &ctx.attn_in, &dv);

        // positional embedding has the token-matrix shape, so its gradient is
        // the branch-input gradient itself
        {
            let gp = grads.slice_mut(layout, self.pos);
            for (g, &dv) in gp.iter_mut().zip(dattn_in.iter()) {
                *g = *g + dv;
            }
        }

        let mut dx = self.ln1.backward(layout, params, grads, &ctx.ln1, &dattn_in);
        dx += &dy1;
        dx
    }
}
