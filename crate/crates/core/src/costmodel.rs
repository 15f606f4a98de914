//! Analytic FLOP, parameter and activation accounting.
//!
//! Rows are named after the parameter prefixes they own, so per-row
//! parameter counts can be checked against a constructed [`ParamSet`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AEConfig, ImportanceMode};
use crate::denoisers::{token_counts, DenoiserConfig, DenoiserKind, LatentGeometry};
use crate::error::{Error, Result};
use crate::nn::MLP_RATIO;

pub const CONVENTION: &str = "multiply-add = 2 FLOPs; linear = 2*in*out per token (bias adds free); \
attention per sequence of n tokens = qkv 6*n*d*i + proj 2*n*i*d + scores 2*n^2*i + mixing 2*n^2*i \
(d model width, i = heads*head_dim); norms, activations, softmax and elementwise adds are not counted";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub flops: u64,
    pub params: u64,
    pub activation_elems: u64,
}

impl CostRow {
    fn scaled(&self, k: u64) -> Self {
        Self {
            name: self.name.clone(),
            flops: self.flops * k,
            params: self.params,
            activation_elems: self.activation_elems,
        }
    }
}

/// `numerator / denominator`, kept as integers so the ratio is exact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub name: String,
    pub numerator: u64,
    pub denominator: u64,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub title: String,
    pub rows: Vec<CostRow>,
    pub ratios: Vec<Ratio>,
}

impl CostReport {
    pub fn totals(&self) -> CostRow {
        let mut t = CostRow {
            name: "total".into(),
            ..CostRow::default()
        };
        for r in &self.rows {
            t.flops += r.flops;
            t.params += r.params;
            t.activation_elems += r.activation_elems;
        }
        t
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn ratio(&self, name: &str) -> Option<&Ratio> {
        self.ratios.iter().find(|r| r.name == name)
    }

    /// Sum over rows whose name starts with `prefix`.
    pub fn flops_with_prefix(&self, prefix: &str) -> u64 {
        self.rows.iter().filter(|r| r.name.starts_with(prefix)).map(|r| r.flops).sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# {}\n# {CONVENTION}\nname\tflops\tparams\tactivation_elems\n", self.title);
        for r in self.rows.iter().chain(std::iter::once(&self.totals())) {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.name, r.flops, r.params, r.activation_elems);
        }
        if !self.ratios.is_empty() {
            s.push_str("ratio\tnumerator\tdenominator\tvalue\n");
            for r in &self.ratios {
                let _ = writeln!(s, "{}\t{}\t{}\t{:.6}", r.name, r.numerator, r.denominator, r.value());
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{}\nconvention: {CONVENTION}\n\n", self.title);
        let _ = writeln!(s, "{:<width$}  {:>16}  {:>12}  {:>14}", "layer", "FLOPs", "params", "activations");
        for r in self.rows.iter().chain(std::iter::once(&self.totals())) {
            let _ = writeln!(
                s,
                "{:<width$}  {:>16}  {:>12}  {:>14}",
                r.name, r.flops, r.params, r.activation_elems
            );
        }
        if !self.ratios.is_empty() {
            s.push('\n');
            for r in &self.ratios {
                let _ = writeln!(s, "{:<28} {:>12.4}x  ({} / {})", r.name, r.value(), r.numerator, r.denominator);
            }
        }
        s
    }
}

/// A linear layer applied to `tokens` rows.
pub fn linear_row(name: &str, tokens: u64, din: u64, dout: u64) -> CostRow {
    CostRow {
        name: name.into(),
        flops: 2 * tokens * din * dout,
        params: din * dout + dout,
        activation_elems: tokens * dout,
    }
}

fn param_row(name: &str, params: u64) -> CostRow {
    CostRow {
        name: name.into(),
        params,
        ..CostRow::default()
    }
}

/// Attention over `groups` independent sequences of `n` tokens each.
fn attention_rows(prefix: &str, groups: u64, n: u64, d: u64, heads: u64, head_dim: u64) -> Vec<CostRow> {
    let inner = heads * head_dim;
    let tokens = groups * n;
    vec![
        linear_row(&format!("{prefix}.qkv"), tokens, d, 3 * inner),
        CostRow {
            name: format!("{prefix}.core"),
            flops: groups * 4 * n * n * inner,
            params: 0,
            activation_elems: groups * heads * n * n + tokens * inner,
        },
        linear_row(&format!("{prefix}.proj"), tokens, inner, d),
    ]
}

fn mlp_rows(prefix: &str, tokens: u64, d: u64) -> Vec<CostRow> {
    let hidden = MLP_RATIO as u64 * d;
    vec![
        linear_row(&format!("{prefix}.fc1"), tokens, d, hidden),
        linear_row(&format!("{prefix}.fc2"), tokens, hidden, d),
    ]
}

/// What to account for.
#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Autoencoder(AEConfig),
    Content(DenoiserConfig, LatentGeometry),
    Motion(DenoiserConfig, LatentGeometry),
    /// A denoiser of matched width and depth over the full `L H' W'` token grid.
    MonolithicBaseline(DenoiserConfig, LatentGeometry),
    /// One linear layer; the unit of the FLOP convention.
    Linear { tokens: u64, din: u64, dout: u64 },
}

impl Network {
    pub fn role(&self) -> &'static str {
        match self {
            Network::Autoencoder(_) => "autoencoder",
            Network::Content(..) => "content",
            Network::Motion(..) => "motion",
            Network::MonolithicBaseline(..) => "monolithic_baseline",
            Network::Linear { .. } => "linear",
        }
    }
}

/// Cost of one forward pass.
pub fn flops_network(net: &Network) -> Result<CostReport> {
    let rows = match net {
        Network::Autoencoder(c) => {
            c.validate()?;
            autoencoder_rows(c)
        }
        Network::Content(cfg, geo) => {
            cfg.validate(DenoiserKind::Content, geo)?;
            denoiser_rows(DenoiserKind::Content, cfg, geo)
        }
        Network::Motion(cfg, geo) => {
            cfg.validate(DenoiserKind::Motion, geo)?;
            denoiser_rows(DenoiserKind::Motion, cfg, geo)
        }
        Network::MonolithicBaseline(cfg, geo) => {
            cfg.validate(DenoiserKind::Content, geo)?;
            baseline_rows(cfg, geo)
        }
        Network::Linear { tokens, din, dout } => {
            if *din == 0 || *dout == 0 {
                return Err(Error::Config("linear layer needs positive widths".into()));
            }
            vec![linear_row("linear", *tokens, *din, *dout)]
        }
    };
    Ok(CostReport {
        title: format!("{} forward pass", net.role()),
        rows,
        ratios: Vec::new(),
    })
}

fn block_stack(prefix: &str, c: &AEConfig) -> Vec<CostRow> {
    let (l, s, d) = (c.frames as u64, c.tokens_per_frame() as u64, c.hidden_dim as u64);
    let (heads, hd) = (c.heads as u64, c.head_dim as u64);
    let mut rows = Vec::new();
    for b in 0..c.depth {
        let pre = format!("{prefix}.{b}");
        // spatial blocks: L sequences of S tokens; temporal: S sequences of L
        let (groups, n) = if b % 2 == 0 { (l, s) } else { (s, l) };
        rows.push(param_row(&format!("{pre}.ln1"), 2 * d));
        rows.extend(attention_rows(&format!("{pre}.attn"), groups, n, d, heads, hd));
        rows.push(param_row(&format!("{pre}.ln2"), 2 * d));
        rows.extend(mlp_rows(&format!("{pre}.mlp"), l * s, d));
    }
    rows
}

fn autoencoder_rows(c: &AEConfig) -> Vec<CostRow> {
    let (l, s, d) = (c.frames as u64, c.tokens_per_frame() as u64, c.hidden_dim as u64);
    let (hh, ww) = (c.latent_h() as u64, c.latent_w() as u64);
    let patch = c.patch_len() as u64;
    let motion = c.motion_channels as u64;
    let video = c.video_size() as u64;
    let mut rows = vec![
        linear_row("enc.patch", l * s, patch, d),
        param_row("enc.pos_s", s * d),
        param_row("enc.pos_t", l * d),
    ];
    rows.extend(block_stack("enc.blocks", c));
    rows.push(param_row("enc.norm", 2 * d));
    let mut importance = linear_row("importance", l * s, d, c.importance_out() as u64);
    if c.importance == ImportanceMode::Uniform {
        importance.flops = 0;
        importance.activation_elems = 0;
    }
    rows.push(importance);
    rows.push(CostRow {
        name: "content_frame".into(),
        flops: 2 * video,
        params: 0,
        activation_elems: (c.channels * c.height * c.width) as u64,
    });
    rows.push(linear_row("motion", l * (hh + ww), d, motion));
    rows.push(linear_row("dec.content_embed", s, patch, d));
    rows.push(linear_row("dec.motion_embed", l * (hh + ww), motion, d));
    rows.push(param_row("dec.pos_s", s * d));
    rows.push(param_row("dec.pos_t", l * d));
    rows.extend(block_stack("dec.blocks", c));
    rows.push(param_row("dec.norm", 2 * d));
    rows.push(linear_row("dec.out", l * s, d, patch));
    rows
}

/// adaLN blocks plus the final head over `n` tokens.
fn dit_rows(cfg: &DenoiserConfig, n: u64, out_len: u64) -> Vec<CostRow> {
    let h = cfg.hidden_dim as u64;
    let (heads, hd) = (cfg.heads as u64, cfg.head_dim() as u64);
    let mut rows = Vec::new();
    for b in 0..cfg.depth {
        let pre = format!("blocks.{b}");
        rows.push(linear_row(&format!("{pre}.ada"), 1, h, 6 * h));
        rows.extend(attention_rows(&format!("{pre}.attn"), 1, n, h, heads, hd));
        rows.extend(mlp_rows(&format!("{pre}.mlp"), n, h));
    }
    rows.push(linear_row("final.ada", 1, h, 2 * h));
    rows.push(linear_row("final.out", n, h, out_len));
    rows
}

fn conditioning_rows(cfg: &DenoiserConfig) -> Vec<CostRow> {
    let h = cfg.hidden_dim as u64;
    vec![
        linear_row("t_mlp.0", 1, h, h),
        linear_row("t_mlp.2", 1, h, h),
        param_row("class_embed", (cfg.num_classes as u64 + 1) * h),
    ]
}

fn denoiser_rows(kind: DenoiserKind, cfg: &DenoiserConfig, geo: &LatentGeometry) -> Vec<CostRow> {
    let h = cfg.hidden_dim as u64;
    let (nz, nc) = token_counts(kind, cfg, geo);
    let (nz, nc) = (nz as u64, nc as u64);
    let (ph, pw) = geo.input_patch;
    let cp = cfg.content_patch;
    let content_len = (geo.channels * cp * ph * cp * pw) as u64;
    let mut rows = conditioning_rows(cfg);
    let out_len = match kind {
        DenoiserKind::Content => {
            rows.push(linear_row("x_embed", nc, content_len, h));
            content_len
        }
        DenoiserKind::Motion => {
            let zlen = (geo.motion_channels * cfg.z_patch * cfg.z_patch) as u64;
            rows.push(linear_row("z_embed", nz, zlen, h));
            rows.push(linear_row("c_embed", nc, content_len, h));
            for seg in ["seg_x", "seg_y", "seg_c"] {
                rows.push(param_row(seg, h));
            }
            zlen
        }
    };
    rows.extend(dit_rows(cfg, nz + nc, out_len));
    rows
}

fn baseline_rows(cfg: &DenoiserConfig, geo: &LatentGeometry) -> Vec<CostRow> {
    let h = cfg.hidden_dim as u64;
    let n = (geo.frames * geo.latent_h() * geo.latent_w()) as u64;
    let patch = (geo.channels * geo.input_patch.0 * geo.input_patch.1) as u64;
    let mut rows = conditioning_rows(cfg);
    rows.push(linear_row("x_embed", n, patch, h));
    rows.extend(dit_rows(cfg, n, patch));
    rows
}

/// The CMD side of a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CmdConfigs {
    pub autoencoder: AEConfig,
    pub content: DenoiserConfig,
    pub motion: DenoiserConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingSteps {
    pub content: u64,
    pub motion: u64,
    pub baseline: u64,
    /// Forward passes per step (2 with guidance).
    pub passes: u64,
}

/// A network run `runs` times in a sampling budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub network: Network,
    pub runs: u64,
    /// Only rows with one of these prefixes count; empty means all rows.
    pub row_prefixes: Vec<String>,
}

impl Stage {
    pub fn new(name: &str, network: Network, runs: u64) -> Self {
        Self {
            name: name.into(),
            network,
            runs,
            row_prefixes: Vec::new(),
        }
    }

    fn cost(&self) -> Result<CostRow> {
        let report = flops_network(&self.network)?;
        let mut row = CostRow {
            name: self.name.clone(),
            ..CostRow::default()
        };
        let keep = |n: &str| self.row_prefixes.is_empty() || self.row_prefixes.iter().any(|p| n.starts_with(p.as_str()));
        for r in report.rows.iter().filter(|r| keep(&r.name)) {
            row.flops += r.flops;
            row.params += r.params;
            row.activation_elems += r.activation_elems;
        }
        Ok(row.scaled(self.runs))
    }
}

/// Two sampling budgets side by side with `baseline / cmd` ratios.
pub fn compare_stages(cmd: &[Stage], baseline: &[Stage]) -> Result<CostReport> {
    let mut rows = Vec::new();
    let mut side_total = |stages: &[Stage], side: &str| -> Result<(u64, u64)> {
        let (mut flops, mut params) = (0, 0);
        for s in stages {
            let mut r = s.cost()?;
            flops += r.flops;
            params += r.params;
            r.name = format!("{side}.{}", r.name);
            rows.push(r);
        }
        Ok((flops, params))
    };
    let (cmd_flops, cmd_params) = side_total(cmd, "cmd")?;
    let (base_flops, base_params) = side_total(baseline, "baseline")?;
    if cmd_flops == 0 || cmd_params == 0 {
        return Err(Error::Config("the CMD side of a comparison has no cost".into()));
    }
    Ok(CostReport {
        title: "sampling cost, baseline vs CMD".into(),
        rows,
        ratios: vec![
            Ratio {
                name: "sampling_flops".into(),
                numerator: base_flops,
                denominator: cmd_flops,
            },
            Ratio {
                name: "params".into(),
                numerator: base_params,
                denominator: cmd_params,
            },
        ],
    })
}

/// `video_size / latent_size`: `C L H W / (C H W + D L (H' + W'))`.
pub fn compression_ratio(c: &AEConfig) -> Ratio {
    Ratio {
        name: "compression".into(),
        numerator: c.video_size() as u64,
        denominator: c.latent_size() as u64,
    }
}

/// Full two-stage sampling (content chain, motion chain, one decode) against a
/// matched monolithic denoiser, plus the latent compression row.
pub fn compare_report(cmd: &CmdConfigs, baseline: &DenoiserConfig, steps: &SamplingSteps) -> Result<CostReport> {
    let geo = LatentGeometry::from(&cmd.autoencoder);
    let decoder = Stage {
        row_prefixes: vec!["dec.".into()],
        ..Stage::new("decoder", Network::Autoencoder(cmd.autoencoder.clone()), 1)
    };
    let cmd_stages = [
        Stage::new("content", Network::Content(cmd.content.clone(), geo.clone()), steps.content * steps.passes),
        Stage::new("motion", Network::Motion(cmd.motion.clone(), geo.clone()), steps.motion * steps.passes),
        decoder,
    ];
    let base = [Stage::new(
        "monolithic",
        Network::MonolithicBaseline(baseline.clone(), geo),
        steps.baseline * steps.passes,
    )];
    let mut report = compare_stages(&cmd_stages, &base)?;
    report.title = format!(
        "sampling cost: CMD (content {} + motion {} steps, one decode) vs monolithic ({} steps), {} pass(es) per step",
        steps.content, steps.motion, steps.baseline, steps.passes
    );
    report.ratios.push(compression_ratio(&cmd.autoencoder));
    Ok(report)
}
