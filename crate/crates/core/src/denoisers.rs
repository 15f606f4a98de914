//! DiT-style ε-predictors for content frames and motion latents.
//!
//! Both networks share one backbone: linear patch embeddings plus fixed 2-d
//! sine/cosine positions, transformer blocks whose LayerNorms are modulated
//! (shift, scale, gate) from `silu(t_emb + class_emb)`, and a modulated final
//! LayerNorm followed by a zero-initialized linear unpatchify.
//!
//! The motion network patchifies `z_x [D, L, H']` and `z_y [D, L, W']` as two
//! independent 2-d maps over `(L, H')` and `(L, W')`, appends the patch
//! tokens of the clean content frame, and reads predictions back only from
//! the motion tokens. Learned segment vectors tell the three token groups
//! apart.

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

use cmdlab_autograd::{Graph, Real, Var};

use crate::autoencoder::AEConfig;
use crate::error::{Error, Result};
use crate::nn::{attention, init_attention, init_mlp, linear, mlp, modulate, sincos_2d, timestep_features, to_real, LN_EPS};
use crate::params::{Bound, Init, Initializer, ParamSet};
use crate::patch::{patchify_var, unpatchify_var};
use crate::rng::seeded;
use crate::video::{ConditionId, ContentFrame, MotionLatent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Content,
    Motion,
}

impl DenoiserKind {
    pub fn name(self) -> &'static str {
        match self {
            DenoiserKind::Content => "content",
            DenoiserKind::Motion => "motion",
        }
    }
}

/// `content_patch` counts latent-grid cells, so the content frame is cut into
/// pixel patches of `content_patch * input_patch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub z_patch: usize,
    pub content_patch: usize,
    pub num_classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            depth: 4,
            heads: 4,
            z_patch: 2,
            content_patch: 4,
            num_classes: 5,
        }
    }
}

impl DenoiserConfig {
    pub fn content_default() -> Self {
        Self {
            content_patch: 1,
            ..Self::default()
        }
    }

    pub fn null_class_id(&self) -> usize {
        self.num_classes
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads.max(1)
    }

    pub fn validate(&self, kind: DenoiserKind, geo: &LatentGeometry) -> Result<()> {
        let k = kind.name();
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("z_patch", self.z_patch),
            ("content_patch", self.content_patch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k}.{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{k}.hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(4) {
            return Err(Error::Config(format!("{k}.hidden_dim {} must be a multiple of 4", self.hidden_dim)));
        }
        let (hh, ww) = (geo.latent_h(), geo.latent_w());
        if hh % self.content_patch != 0 || ww % self.content_patch != 0 {
            return Err(Error::Config(format!(
                "{k}.content_patch {} does not divide the latent grid {hh}x{ww}",
                self.content_patch
            )));
        }
        if kind == DenoiserKind::Motion {
            let zp = self.z_patch;
            if !geo.frames.is_multiple_of(zp) || hh % zp != 0 || ww % zp != 0 {
                return Err(Error::Config(format!(
                    "{k}.z_patch {zp} does not divide the motion grids ({}, {hh}) and ({}, {ww})",
                    geo.frames, geo.frames
                )));
            }
        }
        Ok(())
    }
}

/// The autoencoder shapes a denoiser must agree with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentGeometry {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub input_patch: (usize, usize),
    pub motion_channels: usize,
}

impl LatentGeometry {
    pub fn latent_h(&self) -> usize {
        self.height / self.input_patch.0
    }

    pub fn latent_w(&self) -> usize {
        self.width / self.input_patch.1
    }

    pub fn content_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Packed motion latent `[D, L, H' + W']`.
    pub fn motion_shape(&self) -> [usize; 3] {
        [self.motion_channels, self.frames, self.latent_h() + self.latent_w()]
    }
}

impl From<&AEConfig> for LatentGeometry {
    fn from(c: &AEConfig) -> Self {
        Self {
            channels: c.channels,
            frames: c.frames,
            height: c.height,
            width: c.width,
            input_patch: c.input_patch,
            motion_channels: c.motion_channels,
        }
    }
}

/// Token counts `(motion tokens, content tokens)`.
pub fn token_counts(kind: DenoiserKind, cfg: &DenoiserConfig, geo: &LatentGeometry) -> (usize, usize) {
    let (hh, ww) = (geo.latent_h(), geo.latent_w());
    let cp = cfg.content_patch;
    let content = (hh / cp) * (ww / cp);
    match kind {
        DenoiserKind::Content => (0, content),
        DenoiserKind::Motion => {
            let zp = cfg.z_patch;
            let lz = geo.frames / zp;
            (lz * (hh / zp) + lz * (ww / zp), content)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser<F: Real> {
    pub kind: DenoiserKind,
    pub config: DenoiserConfig,
    pub geometry: LatentGeometry,
    pub params: ParamSet<F>,
}

impl<F: Real> Denoiser<F> {
    pub fn new(kind: DenoiserKind, config: DenoiserConfig, geometry: LatentGeometry, seed: u64, init: Init) -> Result<Self> {
        config.validate(kind, &geometry)?;
        let mut rng = seeded(seed);
        let mut i = Initializer::new(&mut rng, init);
        let h = config.hidden_dim;
        let (ph, pw) = geometry.input_patch;
        let cp = config.content_patch;
        let content_len = geometry.channels * cp * ph * cp * pw;

        i.linear("t_mlp.0", h, h);
        i.linear("t_mlp.2", h, h);
        i.weight("class_embed".into(), &[config.num_classes + 1, h]);
        let out_len = match kind {
            DenoiserKind::Content => {
                i.linear("x_embed", content_len, h);
                content_len
            }
            DenoiserKind::Motion => {
                let zlen = geometry.motion_channels * config.z_patch * config.z_patch;
                i.linear("z_embed", zlen, h);
                i.linear("c_embed", content_len, h);
                i.weight("seg_x".into(), &[h]);
                i.weight("seg_y".into(), &[h]);
                i.weight("seg_c".into(), &[h]);
                zlen
            }
        };
        for b in 0..config.depth {
            let pre = format!("blocks.{b}");
            i.zero_linear(&format!("{pre}.ada"), h, 6 * h);
            init_attention(&mut i, &format!("{pre}.attn"), h, config.heads, config.head_dim());
            init_mlp(&mut i, &format!("{pre}.mlp"), h);
        }
        i.zero_linear("final.ada", h, 2 * h);
        i.zero_linear("final.out", h, out_len);
        let params = i.finish();
        Ok(Self { kind, config, geometry, params })
    }

    pub fn from_params(kind: DenoiserKind, config: DenoiserConfig, geometry: LatentGeometry, params: ParamSet<F>) -> Result<Self> {
        let reference = Denoiser::<F>::new(kind, config.clone(), geometry.clone(), 0, Init::Default)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Config(format!("{} parameters do not match the configuration", kind.name())));
        }
        Ok(Self { kind, config, geometry, params })
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            kind: self.kind,
            config: self.config.clone(),
            geometry: self.geometry.clone(),
            params: self.params.cast(),
        }
    }

    /// Shape of the noisy input and of the prediction.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            DenoiserKind::Content => self.geometry.content_shape().to_vec(),
            DenoiserKind::Motion => self.geometry.motion_shape().to_vec(),
        }
    }

    pub fn token_counts(&self) -> (usize, usize) {
        token_counts(self.kind, &self.config, &self.geometry)
    }

    fn content_pixel_patch(&self) -> (usize, usize) {
        let (ph, pw) = self.geometry.input_patch;
        (self.config.content_patch * ph, self.config.content_patch * pw)
    }

    fn positions(&self, g: &mut Graph<F>, gh: usize, gw: usize) -> Var {
        g.constant(to_real(&sincos_2d(gh, gw, self.config.hidden_dim)))
    }

    /// Conditioning vector `silu(t_emb + class_emb)`, shape `[1, hidden]`.
    pub fn cond_var(&self, g: &mut Graph<F>, p: &Bound, class: usize, t: usize) -> Var {
        let h = self.config.hidden_dim;
        let feats = g.constant(to_real(&timestep_features(t, h).into_shape_with_order((1, h)).expect("1 x h")));
        let te = linear(g, p, "t_mlp.0", feats);
        let te = g.silu(te);
        let te = linear(g, p, "t_mlp.2", te);
        let table = p.get("class_embed");
        let ce = g.slice(table, 0, class, class + 1);
        let c = g.add(te, ce);
        g.silu(c)
    }

    /// Embedded token sequence `[n, hidden]`, positions included.
    pub fn embed_vars(&self, g: &mut Graph<F>, p: &Bound, x_t: Var, content: Option<Var>) -> Var {
        let geo = &self.geometry;
        let (hh, ww) = (geo.latent_h(), geo.latent_w());
        let cp = self.config.content_patch;
        let (cph, cpw) = self.content_pixel_patch();
        match self.kind {
            DenoiserKind::Content => {
                let tokens = patchify_var(g, x_t, cph, cpw);
                let e = linear(g, p, "x_embed", tokens);
                let pos = self.positions(g, hh / cp, ww / cp);
                g.add(e, pos)
            }
            DenoiserKind::Motion => {
                let content = content.expect("motion denoiser needs a content frame");
                let zp = self.config.z_patch;
                let lz = geo.frames / zp;
                let zx = g.slice(x_t, 2, 0, hh);
                let zy = g.slice(x_t, 2, hh, hh + ww);
                let tx = patchify_var(g, zx, zp, zp);
                let ty = patchify_var(g, zy, zp, zp);
                let ex = linear(g, p, "z_embed", tx);
                let ey = linear(g, p, "z_embed", ty);
                let px = self.positions(g, lz, hh / zp);
                let py = self.positions(g, lz, ww / zp);
                let ex = g.add(ex, px);
                let ex = g.add(ex, p.get("seg_x"));
                let ey = g.add(ey, py);
                let ey = g.add(ey, p.get("seg_y"));
                let tc = patchify_var(g, content, cph, cpw);
                let ec = linear(g, p, "c_embed", tc);
                let pc = self.positions(g, hh / cp, ww / cp);
                let ec = g.add(ec, pc);
                let ec = g.add(ec, p.get("seg_c"));
                g.concat(&[ex, ey, ec], 0)
            }
        }
    }

    /// Backbone plus output head on an embedded sequence: `[n, hidden] -> [n, out]`.
    pub fn tokens_vars(&self, g: &mut Graph<F>, p: &Bound, tokens: Var, cond: Var) -> Var {
        let h = self.config.hidden_dim;
        let n = g.shape(tokens)[0];
        let mut x = g.reshape(tokens, &[1, n, h]);
        for b in 0..self.config.depth {
            let pre = format!("blocks.{b}");
            let m = linear(g, p, &format!("{pre}.ada"), cond);
            let m: Vec<Var> = (0..6)
                .map(|k| {
                    let piece = g.slice(m, 1, k * h, (k + 1) * h);
                    g.reshape(piece, &[1, 1, h])
                })
                .collect();
            let y = g.layer_norm(x, LN_EPS);
            let y = modulate(g, y, m[0], m[1]);
            let y = attention(g, p, &format!("{pre}.attn"), y, self.config.heads, self.config.head_dim());
            let y = g.mul(y, m[2]);
            x = g.add(x, y);
            let y = g.layer_norm(x, LN_EPS);
            let y = modulate(g, y, m[3], m[4]);
            let y = mlp(g, p, &format!("{pre}.mlp"), y);
            let y = g.mul(y, m[5]);
            x = g.add(x, y);
        }
        let m = linear(g, p, "final.ada", cond);
        let shift = g.slice(m, 1, 0, h);
        let scale = g.slice(m, 1, h, 2 * h);
        let x = g.reshape(x, &[n, h]);
        let y = g.layer_norm(x, LN_EPS);
        let y = modulate(g, y, shift, scale);
        linear(g, p, "final.out", y)
    }

    /// ε prediction for `x_t` (content `[C, H, W]` or packed motion `[D, L, H' + W']`).
    pub fn eps_vars(&self, g: &mut Graph<F>, p: &Bound, x_t: Var, class: usize, t: usize, content: Option<Var>) -> Var {
        let geo = &self.geometry;
        let (hh, ww) = (geo.latent_h(), geo.latent_w());
        let cond = self.cond_var(g, p, class, t);
        let tokens = self.embed_vars(g, p, x_t, content);
        let out = self.tokens_vars(g, p, tokens, cond);
        match self.kind {
            DenoiserKind::Content => {
                let (cph, cpw) = self.content_pixel_patch();
                unpatchify_var(g, out, cph, cpw, geo.height, geo.width)
            }
            DenoiserKind::Motion => {
                let zp = self.config.z_patch;
                let lz = geo.frames / zp;
                let (nx, ny) = (lz * (hh / zp), lz * (ww / zp));
                let ox = g.slice(out, 0, 0, nx);
                let oy = g.slice(out, 0, nx, nx + ny);
                let zx = unpatchify_var(g, ox, zp, zp, geo.frames, hh);
                let zy = unpatchify_var(g, oy, zp, zp, geo.frames, ww);
                g.concat(&[zx, zy], 2)
            }
        }
    }

    fn check_inputs(&self, x_t: &ArrayD<F>, class: usize, content: Option<&Array3<F>>) -> Result<()> {
        ConditionId::new(class, self.config.num_classes)?;
        let want = self.input_shape();
        if x_t.shape() != want.as_slice() {
            return Err(Error::dim(self.kind.name(), x_t.shape(), &want));
        }
        match (self.kind, content) {
            (DenoiserKind::Motion, None) => Err(Error::Config("motion denoiser needs a content frame".into())),
            (DenoiserKind::Motion, Some(c)) if c.shape() != self.geometry.content_shape() => {
                Err(Error::dim("motion condition", c.shape(), &self.geometry.content_shape()))
            }
            _ => Ok(()),
        }
    }

    /// ε prediction on plain arrays; `content` is required for the motion kind.
    pub fn predict(&self, x_t: &ArrayD<F>, class: usize, t: usize, content: Option<&Array3<F>>) -> Result<ArrayD<F>> {
        self.check_inputs(x_t, class, content)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(x_t.clone());
        let c = content.map(|c| g.constant(c.clone().into_dyn()));
        let out = self.eps_vars(&mut g, &p, x, class, t, c);
        Ok(g.take(out))
    }

    /// ε-objective and parameter gradients for one noisy sample.
    pub fn loss_and_grad(
        &self,
        x_t: &ArrayD<F>,
        eps: &ArrayD<F>,
        class: usize,
        t: usize,
        content: Option<&Array3<F>>,
    ) -> Result<(f64, ParamSet<F>)> {
        self.check_inputs(x_t, class, content)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(x_t.clone());
        let c = content.map(|c| g.constant(c.clone().into_dyn()));
        let out = self.eps_vars(&mut g, &p, x, class, t, c);
        let target = g.constant(eps.clone());
        let loss = crate::nn::mse(&mut g, out, target);
        let value = g.value(loss).iter().next().expect("scalar").to_f64_lossy();
        let mut grads = g.backward(loss);
        Ok((value, self.params.gradients(&p, &mut grads)))
    }

    pub fn content_forward(&self, x_t: &ContentFrame<F>, c: ConditionId, t: usize) -> Result<ContentFrame<F>> {
        if self.kind != DenoiserKind::Content {
            return Err(Error::Config("content_forward called on a motion denoiser".into()));
        }
        ContentFrame::from_dyn(self.predict(&x_t.data.clone().into_dyn(), c.value(), t, None)?)
    }

    pub fn motion_forward(&self, z_t: &MotionLatent<F>, c: ConditionId, content: &ContentFrame<F>, t: usize) -> Result<MotionLatent<F>> {
        if self.kind != DenoiserKind::Motion {
            return Err(Error::Config("motion_forward called on a content denoiser".into()));
        }
        let out = self.predict(&z_t.pack(), c.value(), t, Some(&content.data))?;
        MotionLatent::unpack(&out, self.geometry.latent_h())
    }

    /// Embedded tokens `[n, hidden]` for inspection.
    pub fn embed_tokens(&self, x_t: &ArrayD<F>, content: Option<&Array3<F>>) -> Result<Array2<F>> {
        self.check_inputs(x_t, 0, content)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(x_t.clone());
        let c = content.map(|c| g.constant(c.clone().into_dyn()));
        let e = self.embed_vars(&mut g, &p, x, c);
        Ok(g.take(e).into_dimensionality().expect("2-d"))
    }

    /// Per-token outputs `[n, out]` for an already embedded sequence.
    pub fn forward_tokens(&self, tokens: &Array2<F>, class: usize, t: usize) -> Result<Array2<F>> {
        ConditionId::new(class, self.config.num_classes)?;
        if tokens.ncols() != self.config.hidden_dim {
            return Err(Error::dim("forward_tokens", tokens.shape(), &[tokens.nrows(), self.config.hidden_dim]));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(tokens.clone().into_dyn());
        let cond = self.cond_var(&mut g, &p, class, t);
        let out = self.tokens_vars(&mut g, &p, x, cond);
        Ok(g.take(out).into_dimensionality().expect("2-d"))
    }

    /// Names of every modulation parameter (the conditioning pathway).
    pub fn modulation_params(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.contains(".ada."))
            .map(str::to_string)
            .collect()
    }
}
