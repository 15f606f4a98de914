//! Video autoencoder that factors a clip into one content frame and two
//! axis-projected motion latents.
//!
//! Encoder: patch embedding, then a factorized space-time transformer
//! (even blocks attend within a frame, odd blocks attend across frames at a
//! fixed patch position) producing `u`. Two heads read `u`:
//!
//! * the importance head emits per-pixel per-frame logits; a softmax over
//!   time turns them into convex weights and the content frame is the
//!   weighted sum of the input frames;
//! * the motion head averages `u` over the width (resp. height) axis and
//!   projects `C'` channels to `D` with a shared 1x1 map, giving `z_x`
//!   (resp. `z_y`).
//!
//! Decoder: the content frame is patch-embedded to `v^t[h, w]`, both motion
//! latents go through one shared embedding to `v^x[l, h]` and `v^y[l, w]`,
//! and the transformer input is the broadcast sum
//! `v[l, h, w] = v^t[h, w] + v^x[l, h] + v^y[l, w]`. A second space-time
//! transformer, a zero-initialized linear unpatchify and `tanh` produce the
//! reconstruction.

use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use cmdlab_autograd::{Graph, Real, Var};

use crate::error::{Error, Result};
use crate::nn::{attention, init_attention, init_mlp, layer_norm, linear, mlp};
use crate::params::{Bound, Init, Initializer, ParamSet};
use crate::patch::patchify_var;
use crate::rng::seeded;
use crate::video::{ContentFrame, MotionLatent, VideoTensor};

/// How the content-frame weights are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// Separate temporal weights for every channel of every pixel.
    PerChannel,
    /// One set of temporal weights per pixel, shared across channels.
    ChannelShared,
    /// Head disabled: the content frame is the plain temporal mean.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AEConfig {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub input_patch: (usize, usize),
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub motion_channels: usize,
    pub importance: ImportanceMode,
}

impl Default for AEConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            frames: 8,
            height: 16,
            width: 16,
            input_patch: (2, 2),
            hidden_dim: 32,
            depth: 4,
            heads: 4,
            head_dim: 8,
            motion_channels: 8,
            importance: ImportanceMode::PerChannel,
        }
    }
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("input_patch.0", self.input_patch.0),
            ("input_patch.1", self.input_patch.1),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("motion_channels", self.motion_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("autoencoder.{name} must be positive")));
            }
        }
        if self.frames < 2 {
            return Err(Error::Config("autoencoder.frames must be at least 2".into()));
        }
        let (ph, pw) = self.input_patch;
        if !self.height.is_multiple_of(ph) || !self.width.is_multiple_of(pw) {
            return Err(Error::Config(format!(
                "autoencoder.input_patch ({ph}, {pw}) does not divide {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn latent_h(&self) -> usize {
        self.height / self.input_patch.0
    }

    pub fn latent_w(&self) -> usize {
        self.width / self.input_patch.1
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn video_size(&self) -> usize {
        self.channels * self.frames * self.height * self.width
    }

    /// Content frame plus both motion latents: `C H W + D L (H' + W')`.
    pub fn latent_size(&self) -> usize {
        self.channels * self.height * self.width
            + self.motion_channels * self.frames * (self.latent_h() + self.latent_w())
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.input_patch.0 * self.input_patch.1
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.latent_h() * self.latent_w()
    }

    pub fn importance_out(&self) -> usize {
        match self.importance {
            ImportanceMode::PerChannel => self.patch_len(),
            _ => self.input_patch.0 * self.input_patch.1,
        }
    }
}

/// Even blocks mix within a frame, odd blocks mix across frames.
pub fn block_is_spatial(index: usize) -> bool {
    index.is_multiple_of(2)
}

#[derive(Clone, Debug)]
pub struct Autoencoder<F: Real> {
    pub config: AEConfig,
    pub params: ParamSet<F>,
}

/// Graph handles produced by [`Autoencoder::encode_vars`].
pub struct EncodedVars {
    /// `[L, H'W', C']`.
    pub u: Var,
    /// `[C or 1, H, W, L]`, summing to one over the last axis.
    pub weights: Var,
    /// `[C, H, W]`.
    pub content: Var,
    /// `[D, L, H']`.
    pub zx: Var,
    /// `[D, L, W']`.
    pub zy: Var,
}

impl<F: Real> Autoencoder<F> {
    pub fn new(config: AEConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut i = Initializer::new(&mut rng, init);
        let c = &config;
        let d = c.hidden_dim;
        let s = c.tokens_per_frame();
        let inner_heads = (c.heads, c.head_dim);

        i.linear("enc.patch", c.patch_len(), d);
        i.weight("enc.pos_s".into(), &[s, d]);
        i.weight("enc.pos_t".into(), &[c.frames, 1, d]);
        init_stack(&mut i, "enc.blocks", c.depth, d, inner_heads);
        i.layer_norm("enc.norm", d);
        i.linear("importance", d, c.importance_out());
        i.linear("motion", d, c.motion_channels);

        i.linear("dec.content_embed", c.patch_len(), d);
        i.linear("dec.motion_embed", c.motion_channels, d);
        i.weight("dec.pos_s".into(), &[s, d]);
        i.weight("dec.pos_t".into(), &[c.frames, 1, d]);
        init_stack(&mut i, "dec.blocks", c.depth, d, inner_heads);
        i.layer_norm("dec.norm", d);
        match init {
            Init::Default => i.zero_linear("dec.out", d, c.patch_len()),
            Init::Random(_) => i.linear("dec.out", d, c.patch_len()),
        }
        let params = i.finish();
        Ok(Self { config, params })
    }

    pub fn from_params(config: AEConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let reference = Autoencoder::<F>::new(config.clone(), 0, Init::Default)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Config("autoencoder parameters do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn cast<G: Real>(&self) -> Autoencoder<G> {
        Autoencoder {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_video(&self, video: &VideoTensor<F>) -> Result<()> {
        if video.data().shape() != self.config.video_shape() {
            return Err(Error::Config(format!(
                "video shape {:?} does not match autoencoder {:?}",
                video.data().shape(),
                self.config.video_shape()
            )));
        }
        Ok(())
    }

    /// `[C, L, H, W]` video to `[L, H'W', C ph pw]` patch tokens.
    fn video_tokens(&self, video: &Array4<F>) -> ArrayD<F> {
        let c = &self.config;
        let (ph, pw) = c.input_patch;
        let (hh, ww) = (c.latent_h(), c.latent_w());
        video
            .view()
            .into_shape_with_order(IxDyn(&[c.channels, c.frames, hh, ph, ww, pw]))
            .expect("validated shape")
            .permuted_axes(IxDyn(&[1, 2, 4, 0, 3, 5]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[c.frames, hh * ww, c.patch_len()]))
            .expect("size preserved")
    }

    fn stack(&self, g: &mut Graph<F>, p: &Bound, prefix: &str, mut x: Var) -> Var {
        let c = &self.config;
        for b in 0..c.depth {
            x = st_block(g, p, &format!("{prefix}.{b}"), x, block_is_spatial(b), c.heads, c.head_dim);
        }
        x
    }

    /// Base network on a bound graph: `[L, H'W', C']`.
    pub fn base_vars(&self, g: &mut Graph<F>, p: &Bound, video: &Array4<F>) -> Var {
        let tokens = g.constant(self.video_tokens(video));
        let x = linear(g, p, "enc.patch", tokens);
        let x = g.add(x, p.get("enc.pos_s"));
        let x = g.add(x, p.get("enc.pos_t"));
        let x = self.stack(g, p, "enc.blocks", x);
        layer_norm(g, p, "enc.norm", x)
    }

    /// Temporal-softmax weights `[C or 1, H, W, L]` from `u [L, H'W', C']`.
    pub fn weight_vars(&self, g: &mut Graph<F>, p: &Bound, u: Var) -> Var {
        let c = &self.config;
        let (ph, pw) = c.input_patch;
        let (hh, ww) = (c.latent_h(), c.latent_w());
        match c.importance {
            ImportanceMode::Uniform => {
                let w = F::of(1.0 / c.frames as f64);
                g.constant(ArrayD::from_elem(IxDyn(&[1, c.height, c.width, c.frames]), w))
            }
            ImportanceMode::PerChannel => {
                let logits = linear(g, p, "importance", u);
                let l = g.reshape(logits, &[c.frames, hh, ww, c.channels, ph, pw]);
                let l = g.permute(l, &[3, 1, 4, 2, 5, 0]);
                let l = g.reshape(l, &[c.channels, c.height, c.width, c.frames]);
                g.softmax(l)
            }
            ImportanceMode::ChannelShared => {
                let logits = linear(g, p, "importance", u);
                let l = g.reshape(logits, &[c.frames, hh, ww, ph, pw]);
                let l = g.permute(l, &[1, 3, 2, 4, 0]);
                let l = g.reshape(l, &[1, c.height, c.width, c.frames]);
                g.softmax(l)
            }
        }
    }

    /// `(z_x [D, L, H'], z_y [D, L, W'])` from `u [L, H'W', C']`.
    pub fn motion_vars(&self, g: &mut Graph<F>, p: &Bound, u: Var) -> (Var, Var) {
        let c = &self.config;
        let grid = g.reshape(u, &[c.frames, c.latent_h(), c.latent_w(), c.hidden_dim]);
        let ux = g.mean_axis(grid, 2, false);
        let uy = g.mean_axis(grid, 1, false);
        let zx = linear(g, p, "motion", ux);
        let zy = linear(g, p, "motion", uy);
        (g.permute(zx, &[2, 0, 1]), g.permute(zy, &[2, 0, 1]))
    }

    pub fn encode_vars(&self, g: &mut Graph<F>, p: &Bound, video: &Array4<F>) -> EncodedVars {
        let u = self.base_vars(g, p, video);
        let weights = self.weight_vars(g, p, u);
        let frames_last = video
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let frames_last = g.constant(frames_last);
        let weighted = g.mul(frames_last, weights);
        let content = g.sum_axis(weighted, 3);
        let (zx, zy) = self.motion_vars(g, p, u);
        EncodedVars { u, weights, content, zx, zy }
    }

    /// The broadcast-sum transformer input `[L, H', W', C']` (before positions).
    pub fn stream_sum_vars(&self, g: &mut Graph<F>, p: &Bound, content: Var, zx: Var, zy: Var) -> Var {
        let c = &self.config;
        let (ph, pw) = c.input_patch;
        let (hh, ww, d, l) = (c.latent_h(), c.latent_w(), c.hidden_dim, c.frames);
        let patches = patchify_var(g, content, ph, pw);
        let vt = linear(g, p, "dec.content_embed", patches);
        let vt = g.reshape(vt, &[1, hh, ww, d]);
        let zx = g.permute(zx, &[1, 2, 0]);
        let vx = linear(g, p, "dec.motion_embed", zx);
        let vx = g.reshape(vx, &[l, hh, 1, d]);
        let zy = g.permute(zy, &[1, 2, 0]);
        let vy = linear(g, p, "dec.motion_embed", zy);
        let vy = g.reshape(vy, &[l, 1, ww, d]);
        let v = g.add(vt, vx);
        g.add(v, vy)
    }

    /// Reconstruction `[C, L, H, W]` from content `[C, H, W]` and latents.
    pub fn decode_vars(&self, g: &mut Graph<F>, p: &Bound, content: Var, zx: Var, zy: Var) -> Var {
        let c = &self.config;
        let (ph, pw) = c.input_patch;
        let (hh, ww, d, l) = (c.latent_h(), c.latent_w(), c.hidden_dim, c.frames);
        let v = self.stream_sum_vars(g, p, content, zx, zy);
        let x = g.reshape(v, &[l, hh * ww, d]);
        let x = g.add(x, p.get("dec.pos_s"));
        let x = g.add(x, p.get("dec.pos_t"));
        let x = self.stack(g, p, "dec.blocks", x);
        let x = layer_norm(g, p, "dec.norm", x);
        let out = linear(g, p, "dec.out", x);
        let out = g.reshape(out, &[l, hh, ww, c.channels, ph, pw]);
        let out = g.permute(out, &[3, 0, 1, 4, 2, 5]);
        let out = g.reshape(out, &[c.channels, l, c.height, c.width]);
        g.tanh(out)
    }

    pub fn encode_base(&self, video: &VideoTensor<F>) -> Result<Array4<F>> {
        self.check_video(video)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let u = self.base_vars(&mut g, &p, video.data());
        Ok(self.u_to_public(g.take(u)))
    }

    fn u_to_public(&self, u: ArrayD<F>) -> Array4<F> {
        let c = &self.config;
        u.into_shape_with_order(IxDyn(&[c.frames, c.latent_h(), c.latent_w(), c.hidden_dim]))
            .expect("u layout")
            .permuted_axes(IxDyn(&[3, 0, 1, 2]))
            .as_standard_layout()
            .into_owned()
            .into_dimensionality()
            .expect("4-d")
    }

    fn u_from_public(&self, u: &Array4<F>) -> Result<ArrayD<F>> {
        let c = &self.config;
        let expected = [c.hidden_dim, c.frames, c.latent_h(), c.latent_w()];
        if u.shape() != expected {
            return Err(Error::dim("feature map u", u.shape(), &expected));
        }
        Ok(u.view()
            .permuted_axes([1, 2, 3, 0])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[c.frames, c.latent_h() * c.latent_w(), c.hidden_dim]))
            .expect("size preserved"))
    }

    /// Temporal-softmax weights `[C, L, H, W]` for a feature map `u [C', L, H', W']`.
    pub fn importance_weights(&self, u: &Array4<F>) -> Result<Array4<F>> {
        let c = &self.config;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let uv = g.constant(self.u_from_public(u)?);
        let w = self.weight_vars(&mut g, &p, uv);
        let w = g.take(w);
        let shared = w.shape()[0] == 1;
        let w = w.permuted_axes(IxDyn(&[0, 3, 1, 2]));
        let full = if shared {
            w.broadcast(IxDyn(&[c.channels, c.frames, c.height, c.width]))
                .expect("channel broadcast")
                .to_owned()
        } else {
            w.as_standard_layout().into_owned()
        };
        Ok(full.into_dimensionality().expect("4-d"))
    }

    pub fn motion_latents(&self, u: &Array4<F>) -> Result<MotionLatent<F>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let uv = g.constant(self.u_from_public(u)?);
        let (zx, zy) = self.motion_vars(&mut g, &p, uv);
        MotionLatent::new(to3(g.take(zx)), to3(g.take(zy)))
    }

    pub fn encode(&self, video: &VideoTensor<F>) -> Result<(ContentFrame<F>, MotionLatent<F>)> {
        self.check_video(video)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let e = self.encode_vars(&mut g, &p, video.data());
        let content = ContentFrame::new(to3(g.take(e.content)));
        let z = MotionLatent::new(to3(g.take(e.zx)), to3(g.take(e.zy)))?;
        Ok((content, z))
    }

    fn check_latents(&self, content: &ContentFrame<F>, z: &MotionLatent<F>) -> Result<()> {
        let c = &self.config;
        let want_content = [c.channels, c.height, c.width];
        if content.shape() != want_content {
            return Err(Error::Config(format!(
                "content frame {:?} does not match decoder {:?}",
                content.shape(),
                want_content
            )));
        }
        let want = (c.motion_channels, c.frames, c.latent_h(), c.latent_w());
        if z.dims() != want {
            return Err(Error::Config(format!(
                "motion latent {:?} does not match decoder {:?}",
                z.dims(),
                want
            )));
        }
        Ok(())
    }

    /// The decoder's broadcast sum `v`, as `[C', L, H', W']`.
    pub fn decoder_input(&self, content: &ContentFrame<F>, z: &MotionLatent<F>) -> Result<Array4<F>> {
        self.check_latents(content, z)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let cv = g.constant(content.data.clone().into_dyn());
        let zx = g.constant(z.zx.clone().into_dyn());
        let zy = g.constant(z.zy.clone().into_dyn());
        let v = self.stream_sum_vars(&mut g, &p, cv, zx, zy);
        Ok(g.take(v)
            .permuted_axes(IxDyn(&[3, 0, 1, 2]))
            .as_standard_layout()
            .into_owned()
            .into_dimensionality()
            .expect("4-d"))
    }

    pub fn decode(&self, content: &ContentFrame<F>, z: &MotionLatent<F>) -> Result<VideoTensor<F>> {
        self.check_latents(content, z)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let cv = g.constant(content.data.clone().into_dyn());
        let zx = g.constant(z.zx.clone().into_dyn());
        let zy = g.constant(z.zy.clone().into_dyn());
        let out = self.decode_vars(&mut g, &p, cv, zx, zy);
        VideoTensor::new(g.take(out).into_dimensionality().expect("4-d"))
    }

    pub fn reconstruct(&self, video: &VideoTensor<F>) -> Result<VideoTensor<F>> {
        let (content, z) = self.encode(video)?;
        self.decode(&content, &z)
    }

    /// Reconstruction loss and its gradient for every parameter.
    pub fn loss_and_grad(&self, video: &VideoTensor<F>) -> Result<(f64, ParamSet<F>)> {
        self.check_video(video)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let loss = self.loss_var(&mut g, &p, video.data());
        let value = g.value(loss).iter().next().expect("scalar").to_f64_lossy();
        let mut grads = g.backward(loss);
        Ok((value, self.params.gradients(&p, &mut grads)))
    }

    /// Reconstruction loss with parameters bound frozen.
    pub fn loss(&self, video: &VideoTensor<F>) -> Result<f64> {
        self.check_video(video)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let loss = self.loss_var(&mut g, &p, video.data());
        Ok(g.value(loss).iter().next().expect("scalar").to_f64_lossy())
    }

    fn loss_var(&self, g: &mut Graph<F>, p: &Bound, video: &Array4<F>) -> Var {
        let e = self.encode_vars(g, p, video);
        let recon = self.decode_vars(g, p, e.content, e.zx, e.zy);
        let target = g.constant(video.clone().into_dyn());
        crate::nn::mse(g, recon, target)
    }
}

fn to3<F: Real>(a: ArrayD<F>) -> Array3<F> {
    a.into_dimensionality().expect("3-d")
}

fn init_stack<F: Real>(i: &mut Initializer<'_, F>, prefix: &str, depth: usize, d: usize, (heads, head_dim): (usize, usize)) {
    for b in 0..depth {
        let pre = format!("{prefix}.{b}");
        i.layer_norm(&format!("{pre}.ln1"), d);
        init_attention(i, &format!("{pre}.attn"), d, heads, head_dim);
        i.layer_norm(&format!("{pre}.ln2"), d);
        init_mlp(i, &format!("{pre}.mlp"), d);
    }
}

/// Pre-norm transformer block over `x [L, S, d]`, attending within frames
/// (`spatial`) or within patch positions across frames.
fn st_block<F: Real>(
    g: &mut Graph<F>,
    p: &Bound,
    prefix: &str,
    x: Var,
    spatial: bool,
    heads: usize,
    head_dim: usize,
) -> Var {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x);
    let h = if spatial { h } else { g.permute(h, &[1, 0, 2]) };
    let h = attention(g, p, &format!("{prefix}.attn"), h, heads, head_dim);
    let h = if spatial { h } else { g.permute(h, &[1, 0, 2]) };
    let x = g.add(x, h);
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x);
    let h = mlp(g, p, &format!("{prefix}.mlp"), h);
    g.add(x, h)
}

/// `x̄[c, h, w] = sum_l video[c, l, h, w] * weights[c, l, h, w]`.
///
/// Fails if any temporal weight column is negative or does not sum to one
/// within `1e-5`.
pub fn content_frame<F: Real>(video: &VideoTensor<F>, weights: &Array4<F>) -> Result<ContentFrame<F>> {
    let data = video.data();
    if data.shape() != weights.shape() {
        return Err(Error::dim("content_frame", data.shape(), weights.shape()));
    }
    let sums = weights.sum_axis(Axis(1));
    if let Some(bad) = sums.iter().find(|s| (s.to_f64_lossy() - 1.0).abs() > 1e-5) {
        return Err(Error::Invariant(format!("temporal weights sum to {bad}, not 1")));
    }
    if weights.iter().any(|w| *w < F::zero()) {
        return Err(Error::Invariant("negative temporal weight".into()));
    }
    let weighted = data * weights;
    Ok(ContentFrame::new(weighted.sum_axis(Axis(1))))
}

/// `v[c', l, h, w] = vt[c', h, w] + vx[c', l, h] + vy[c', l, w]`.
pub fn broadcast_sum<F: Real>(vt: &Array3<F>, vx: &Array3<F>, vy: &Array3<F>) -> Result<Array4<F>> {
    let (d, hh, ww) = vt.dim();
    let (dx, l, hx) = vx.dim();
    let (dy, ly, wy) = vy.dim();
    if dx != d || dy != d || hx != hh || wy != ww || ly != l {
        return Err(Error::dim("broadcast_sum", vx.shape(), vy.shape()));
    }
    Ok(Array4::from_shape_fn((d, l, hh, ww), |(c, t, h, w)| {
        vt[[c, h, w]] + vx[[c, t, h]] + vy[[c, t, w]]
    }))
}

/// Mean squared error between two videos.
pub fn recon_loss<F: Real>(video: &VideoTensor<F>, recon: &VideoTensor<F>) -> Result<f64> {
    let (a, b) = (video.data(), recon.data());
    if a.shape() != b.shape() {
        return Err(Error::dim("recon_loss", a.shape(), b.shape()));
    }
    let mut total = 0.0f64;
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = (x - y).to_f64_lossy();
        total += d * d;
    });
    Ok(total / a.len() as f64)
}
