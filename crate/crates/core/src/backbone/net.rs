//! Network assembly: encoder, ASPP, transformer bottleneck, decoder with
//! skip connections, and the two 1x1 output heads, plus the full manual
//! backward pass.

use ndarray::{Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use super::attention::TransformerBlock;
use super::layers::{
    maxpool2_backward, maxpool2_forward, relu, relu_backward, upsample2_backward,
    upsample2_forward, Conv2d, DropoutMask, LayerNorm, Linear,
};
use super::params::{Init, ParamLayout, ParamStore};
use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::real::Scalar;
use crate::backbone::attention::TransformerCtx;

/// Whether a forward pass samples dropout masks.
pub enum ForwardMode<'a> {
    Deterministic,
    Stochastic { rng: &'a mut ChaCha8Rng },
}

/// Raw head outputs before the softmax wrapper.
pub struct RawOutput<F> {
    pub logits: Array3<F>,
    pub logvar: Array2<F>,
}

/// Per-sample forward intermediates consumed by [`Backbone::backward_into`].
pub struct Trace<F> {
    enc_cols: Vec<Array2<F>>,
    enc_out: Vec<Array3<F>>,
    pool_idx: Vec<Array3<u8>>,
    aspp_cols: Vec<Array2<F>>,
    aspp_out: Vec<Array3<F>>,
    proj_cols: Array2<F>,
    proj_out: Array3<F>,
    tctx: TransformerCtx<F>,
    dec_up_cols: Vec<Array2<F>>,
    dec_skip_cols: Vec<Array2<F>>,
    dec_relu: Vec<Array3<F>>,
    dec_drop: Vec<DropoutMask<F>>,
    seg_cols: Array2<F>,
    var_cols: Array2<F>,
}

/// The segmentation backbone. Holds the architecture and parameter layout;
/// parameter values live in a separate [`ParamStore`] so the network itself
/// is immutable and shareable.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    layout: ParamLayout,
    enc: Vec<Conv2d>,
    aspp: Vec<Conv2d>,
    proj: Conv2d,
    block: TransformerBlock,
    dec_up: Vec<Conv2d>,
    dec_skip: Vec<Conv2d>,
    seg_head: Conv2d,
    var_head: Conv2d,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let depth = config.depth;
        let d = config.token_dim;

        let conv = |layout: &mut ParamLayout,
                    name: String,
                    in_c: usize,
                    out_c: usize,
                    k: usize,
                    pad: usize,
                    dilation: usize,
                    bias: bool| {
            let w = layout.push(
                format!("{name}.w"),
                &[out_c, in_c, k, k],
                Init::HeNormal {
                    fan_in: in_c * k * k,
                },
            );
            let b = bias.then(|| layout.push(format!("{name}.b"), &[out_c], Init::Zeros));
            Conv2d {
                w,
                b,
                in_c,
                out_c,
                k,
                pad,
                dilation,
            }
        };

        let mut enc = Vec::with_capacity(depth);
        for l in 0..depth {
            let in_c = if l == 0 {
                config.in_channels
            } else {
                config.stage_width(l - 1)
            };
            enc.push(conv(
                &mut layout,
                format!("enc.{l}"),
                in_c,
                config.stage_width(l),
                3,
                1,
                1,
                true,
            ));
        }

        let deep_c = config.stage_width(depth - 1);
        let mut aspp = Vec::with_capacity(config.dilation_rates.len());
        for (i, &r) in config.dilation_rates.iter().enumerate() {
            aspp.push(conv(&mut layout, format!("aspp.{i}"), deep_c, d, 3, r, r, true));
        }
        let proj = conv(
            &mut layout,
            "aspp.proj".to_string(),
            d * config.dilation_rates.len(),
            d,
            1,
            0,
            1,
            true,
        );

        let n = config.token_count();
        let pos = layout.push("bott.pos", &[n, d], Init::Normal { std: 0.02 });
        let ln = |layout: &mut ParamLayout, name: &str| LayerNorm {
            gain: layout.push(format!("{name}.gain"), &[d], Init::Ones),
            bias: layout.push(format!("{name}.bias"), &[d], Init::Zeros),
            d,
        };
        let ln1 = ln(&mut layout, "bott.ln1");
        let lin = |layout: &mut ParamLayout, name: &str, d_in: usize, d_out: usize| Linear {
            w: layout.push(
                format!("{name}.w"),
                &[d_out, d_in],
                Init::HeNormal { fan_in: d_in },
            ),
            b: Some(layout.push(format!("{name}.b"), &[d_out], Init::Zeros)),
            d_in,
            d_out,
        };
        let wq = lin(&mut layout, "bott.wq", d, d);
        let wk = lin(&mut layout, "bott.wk", d, d);
        let wv = lin(&mut layout, "bott.wv", d, d);
        let wo = lin(&mut layout, "bott.wo", d, d);
        let ln2 = ln(&mut layout, "bott.ln2");
        let ff1 = lin(&mut layout, "bott.ff1", d, d * config.ff_mult);
        let ff2 = lin(&mut layout, "bott.ff2", d * config.ff_mult, d);
        let block = TransformerBlock {
            ln1,
            pos,
            wq,
            wk,
            wv,
            wo,
            ln2,
            ff1,
            ff2,
            heads: config.heads,
            dim: d,
            tokens: n,
        };

        let mut dec_up = Vec::with_capacity(depth - 1);
        let mut dec_skip = Vec::with_capacity(depth - 1);
        for l in 0..depth - 1 {
            let deeper_c = if l == depth - 2 {
                d
            } else {
                config.stage_width(l + 1)
            };
            let out_c = config.stage_width(l);
            dec_up.push(conv(
                &mut layout,
                format!("dec.{l}.up"),
                deeper_c,
                out_c,
                3,
                1,
                1,
                true,
            ));
            dec_skip.push(conv(
                &mut layout,
                format!("dec.{l}.skip"),
                config.stage_width(l),
                out_c,
                1,
                0,
                1,
                false,
            ));
        }

        let seg_head = conv(
            &mut layout,
            "head.seg".to_string(),
            config.base_width,
            config.num_classes,
            1,
            0,
            1,
            true,
        );
        let var_head = conv(
            &mut layout,
            "head.var".to_string(),
            config.base_width,
            1,
            1,
            0,
            1,
            true,
        );
        Ok(Self {
            config,
            layout,
            enc,
            aspp,
            proj,
            block,
            dec_up,
            dec_skip,
            seg_head,
            var_head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Total learnable parameter count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        ParamStore::init(&self.layout, seed)
    }

    fn check_input<F: Scalar>(&self, x: &Array3<F>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::shape(
                "backbone input channels",
                self.config.in_channels,
                c,
            ));
        }
        let div = 1usize << (self.config.depth - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Indivisible {
                h,
                w,
                divisor: div,
                pad_h: h.div_ceil(div) * div,
                pad_w: w.div_ceil(div) * div,
            });
        }
        if (h, w) != self.config.input_hw {
            return Err(Error::shape(
                "backbone input spatial size",
                format!("{:?}", self.config.input_hw),
                format!("({h}, {w})"),
            ));
        }
        Ok(())
    }

    /// Encoder feature hierarchy: stage l output at resolution (H, W) / 2^l.
    pub fn encode<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        x: &Array3<F>,
    ) -> Result<Vec<Array3<F>>> {
        self.check_input(x)?;
        let mut features = Vec::with_capacity(self.config.depth);
        let mut cur = x.clone();
        for (l, conv) in self.enc.iter().enumerate() {
            let (a, _) = conv.forward(&self.layout, params, &cur);
            let f = relu(&a);
            if l + 1 < self.config.depth {
                let (pooled, _) = maxpool2_forward(&f);
                cur = pooled;
            }
            features.push(f);
        }
        Ok(features)
    }

    /// ASPP over the deepest encoder map: parallel dilated branches fused by
    /// concatenation and a 1x1 projection; spatial size is preserved.
    pub fn aspp_forward<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        deep: &Array3<F>,
    ) -> Result<Array3<F>> {
        let (c, h, w) = deep.dim();
        let want_c = self.config.stage_width(self.config.depth - 1);
        if c != want_c {
            return Err(Error::shape("aspp input channels", want_c, c));
        }
        let extent = h.min(w);
        for &r in &self.config.dilation_rates {
            if r >= extent {
                return Err(Error::DilationTooLarge { rate: r, extent });
            }
        }
        let mut branches = Vec::with_capacity(self.aspp.len());
        for conv in &self.aspp {
            let (a, _) = conv.forward(&self.layout, params, deep);
            branches.push(relu(&a));
        }
        let views: Vec<_> = branches.iter().map(|b| b.view()).collect();
        let cat = ndarray::concatenate(Axis(0), &views).expect("branch concat");
        let (p, _) = self.proj.forward(&self.layout, params, &cat);
        Ok(relu(&p))
    }

    /// Transformer bottleneck on a (token_dim, bh, bw) map; shape-preserving.
    pub fn transformer_bottleneck<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        f: &Array3<F>,
    ) -> Result<Array3<F>> {
        let (c, h, w) = f.dim();
        if c != self.config.token_dim || h * w != self.config.token_count() {
            return Err(Error::shape(
                "bottleneck map",
                format!(
                    "({}, {}, {})",
                    self.config.token_dim,
                    self.config.bottleneck_hw().0,
                    self.config.bottleneck_hw().1
                ),
                format!("({c}, {h}, {w})"),
            ));
        }
        let tokens = map_to_tokens(f);
        let (out, _) = self
            .block
            .forward(&self.layout, params, &tokens, 0.0, None);
        Ok(tokens_to_map(&out, (c, h, w)))
    }

    /// Decoder: walks from the bottleneck map back to full resolution,
    /// fusing the upsampled path with the matching encoder skip at each
    /// stage. `skips` are the encoder features from [`Backbone::encode`].
    pub fn decode<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        bottleneck: &Array3<F>,
        skips: &[Array3<F>],
    ) -> Result<Array3<F>> {
        if skips.len() != self.config.depth {
            return Err(Error::shape(
                "decoder skip count",
                self.config.depth,
                skips.len(),
            ));
        }
        let mut cur = bottleneck.clone();
        for l in (0..self.config.depth - 1).rev() {
            let up = upsample2_forward(&cur);
            let skip = &skips[l];
            let (_, uh, uw) = up.dim();
            let (_, sh, sw) = skip.dim();
            if (uh, uw) != (sh, sw) {
                return Err(Error::shape(
                    "decoder stage resolution",
                    format!("{uh}x{uw}"),
                    format!("{sh}x{sw}"),
                ));
            }
            let (ua, _) = self.dec_up[l].forward(&self.layout, params, &up);
            let (sa, _) = self.dec_skip[l].forward(&self.layout, params, skip);
            cur = relu(&(&ua + &sa));
        }
        Ok(cur)
    }

    /// Full forward pass. Returns raw head outputs plus the trace needed for
    /// backpropagation. Deterministic mode never touches an RNG.
    pub fn forward<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        x: &Array3<F>,
        mode: ForwardMode<'_>,
    ) -> Result<(RawOutput<F>, Trace<F>)> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let rate = self.config.dropout_rate;
        let mut rng_opt = match mode {
            ForwardMode::Deterministic => None,
            ForwardMode::Stochastic { rng } => {
                if rate > 0.0 {
                    Some(rng)
                } else {
                    None
                }
            }
        };

        // encoder
        let mut enc_cols = Vec::with_capacity(depth);
        let mut enc_out = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth - 1);
        let mut cur = x.clone();
        for (l, conv) in self.enc.iter().enumerate() {
            let (a, cols) = conv.forward(&self.layout, params, &cur);
            let f = relu(&a);
            enc_cols.push(cols);
            if l + 1 < depth {
                let (pooled, idx) = maxpool2_forward(&f);
                pool_idx.push(idx);
                cur = pooled;
            }
            enc_out.push(f);
        }

        // ASPP
        let deep = &enc_out[depth - 1];
        let mut aspp_cols = Vec::with_capacity(self.aspp.len());
        let mut aspp_out = Vec::with_capacity(self.aspp.len());
        for conv in &self.aspp {
            let (a, cols) = conv.forward(&self.layout, params, deep);
            aspp_cols.push(cols);
            aspp_out.push(relu(&a));
        }
        let views: Vec<_> = aspp_out.iter().map(|b| b.view()).collect();
        let cat = ndarray::concatenate(Axis(0), &views).expect("branch concat");
        let (pa, proj_cols) = self.proj.forward(&self.layout, params, &cat);
        let proj_out = relu(&pa);

        // transformer bottleneck on tokens
        let (bh, bw) = self.config.bottleneck_hw();
        let tokens = map_to_tokens(&proj_out);
        let (tok_out, tctx) =
            self.block
                .forward(&self.layout, params, &tokens, rate, rng_opt.as_deref_mut());
        let mut curmap = tokens_to_map(&tok_out, (self.config.token_dim, bh, bw));

        // decoder
        let mut dec_up_cols = vec![Array2::<F>::zeros((0, 0)); depth - 1];
        let mut dec_skip_cols = vec![Array2::<F>::zeros((0, 0)); depth - 1];
        let mut dec_relu = vec![Array3::<F>::zeros((0, 0, 0)); depth - 1];
        let mut dec_drop: Vec<DropoutMask<F>> = (0..depth - 1).map(|_| DropoutMask::identity()).collect();
        for l in (0..depth - 1).rev() {
            let up = upsample2_forward(&curmap);
            let (ua, ucols) = self.dec_up[l].forward(&self.layout, params, &up);
            let (sa, scols) = self.dec_skip[l].forward(&self.layout, params, &enc_out[l]);
            let f = relu(&(&ua + &sa));
            let mask = match rng_opt.as_deref_mut() {
                Some(rng) => DropoutMask::sample(f.dim(), rate, rng),
                None => DropoutMask::identity(),
            };
            let mut fd = f.clone();
            mask.apply(&mut fd);
            dec_up_cols[l] = ucols;
            dec_skip_cols[l] = scols;
            dec_relu[l] = f;
            dec_drop[l] = mask;
            curmap = fd;
        }

        // heads
        let (logits, seg_cols) = self.seg_head.forward(&self.layout, params, &curmap);
        let (varmap, var_cols) = self.var_head.forward(&self.layout, params, &curmap);
        let (h, w) = self.config.input_hw;
        let logvar = varmap
            .into_shape_with_order((h, w))
            .expect("logvar shape");

        Ok((
            RawOutput { logits, logvar },
            Trace {
                enc_cols,
                enc_out,
                pool_idx,
                aspp_cols,
                aspp_out,
                proj_cols,
                proj_out,
                tctx,
                dec_up_cols,
                dec_skip_cols,
                dec_relu,
                dec_drop,
                seg_cols,
                var_cols,
            },
        ))
    }

    /// Runs the forward pass on a volume and wraps the heads into a
    /// validated [`ModelOutput`] (probabilities are softmax of the logits).
    pub fn forward_volume(
        &self,
        params: &ParamStore<f32>,
        volume: &crate::volume::Volume,
        mode: ForwardMode<'_>,
    ) -> Result<crate::volume::ModelOutput> {
        let (raw, _) = self.forward(params, volume.data(), mode)?;
        crate::volume::ModelOutput::from_logits(raw.logits, raw.logvar)
    }

    /// Accumulates parameter gradients for one sample given head gradients.
    pub fn backward_into<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        trace: &Trace<F>,
        d_logits: &Array3<F>,
        d_logvar: &Array2<F>,
        grads: &mut ParamStore<F>,
    ) {
        let depth = self.config.depth;
        let (h, w) = self.config.input_hw;

        // heads share the final decoder map
        let mut ddec = self.seg_head.backward(
            &self.layout,
            params,
            grads,
            &trace.seg_cols,
            d_logits,
            (h, w),
        );
        let dvar3 = d_logvar
            .view()
            .into_shape_with_order((1, h, w))
            .expect("dvar shape")
            .to_owned();
        ddec += &self.var_head.backward(
            &self.layout,
            params,
            grads,
            &trace.var_cols,
            &dvar3,
            (h, w),
        );

        // decoder stages from full resolution down to the bottleneck
        let mut denc: Vec<Array3<F>> = trace
            .enc_out
            .iter()
            .map(|f| Array3::zeros(f.dim()))
            .collect();
        let mut dbott_map: Option<Array3<F>> = None;
        for l in 0..depth - 1 {
            trace.dec_drop[l].apply(&mut ddec);
            let dpre = relu_backward(&ddec, &trace.dec_relu[l]);
            let (hl, wl) = (h >> l, w >> l);
            let dup_in = self.dec_up[l].backward(
                &self.layout,
                params,
                grads,
                &trace.dec_up_cols[l],
                &dpre,
                (hl, wl),
            );
            let dskip_in = self.dec_skip[l].backward(
                &self.layout,
                params,
                grads,
                &trace.dec_skip_cols[l],
                &dpre,
                (hl, wl),
            );
            denc[l] += &dskip_in;
            let ddeeper = upsample2_backward(&dup_in);
            if l == depth - 2 {
                dbott_map = Some(ddeeper);
            } else {
                ddec = ddeeper;
            }
        }

        // transformer bottleneck
        let (bh, bw) = self.config.bottleneck_hw();
        let dtok_out = map_to_tokens(&dbott_map.expect("decoder walked to bottleneck"));
        let dtok_in = self
            .block
            .backward(&self.layout, params, grads, &trace.tctx, &dtok_out);
        let daspp = tokens_to_map(&dtok_in, (self.config.token_dim, bh, bw));

        // ASPP projection and branches
        let dproj_pre = relu_backward(&daspp, &trace.proj_out);
        let dcat = self.proj.backward(
            &self.layout,
            params,
            grads,
            &trace.proj_cols,
            &dproj_pre,
            (bh, bw),
        );
        let d = self.config.token_dim;
        let mut ddeep = Array3::<F>::zeros(trace.enc_out[depth - 1].dim());
        for (i, conv) in self.aspp.iter().enumerate() {
            let db = dcat
                .slice(ndarray::s![i * d..(i + 1) * d, .., ..])
                .to_owned();
            let dbranch_pre = relu_backward(&db, &trace.aspp_out[i]);
            ddeep += &conv.backward(
                &self.layout,
                params,
                grads,
                &trace.aspp_cols[i],
                &dbranch_pre,
                (bh, bw),
            );
        }
        denc[depth - 1] += &ddeep;

        // encoder, deepest stage first
        for l in (0..depth).rev() {
            let dpre = relu_backward(&denc[l], &trace.enc_out[l]);
            let (hl, wl) = (h >> l, w >> l);
            let dxin = self.enc[l].backward(
                &self.layout,
                params,
                grads,
                &trace.enc_cols[l],
                &dpre,
                (hl, wl),
            );
            if l > 0 {
                let dfprev = maxpool2_backward(&dxin, &trace.pool_idx[l - 1], (h >> (l - 1), w >> (l - 1)));
                denc[l - 1] += &dfprev;
            }
        }
    }
}

/// (c, h, w) map to [h*w, c] token matrix; token index is y * w + x.
pub fn map_to_tokens<F: Scalar>(map: &Array3<F>) -> Array2<F> {
    let (c, h, w) = map.dim();
    let mut out = Array2::<F>::zeros((h * w, c));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x, ci)] = map[(ci, y, x)];
            }
        }
    }
    out
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map<F: Scalar>(tokens: &Array2<F>, dim: (usize, usize, usize)) -> Array3<F> {
    let (c, h, w) = dim;
    let mut out = Array3::<F>::zeros(dim);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci, y, x)] = tokens[(y * w + x, ci)];
            }
        }
    }
    out
}
