//! The velocity transformer.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::latent::LatentGrid;
use super::loss::{losses_with_grad, LossParts};
use crate::autodiff::{AttnMask, Mat, ParamGrads, Tape, Var};
use crate::error::{ensure_dim, Error, Result};
use crate::layout::LayoutMode;
use crate::rng::chacha;

/// Which attention pairs are blocked between the RGB and alpha halves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    None,
    /// Alpha-half queries cannot attend to RGB-half keys in self-attention.
    SelfAttnM,
    /// Alpha-half queries cannot attend to the effect token in cross-attention.
    CrossAttnM,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Transformer,
    /// Two stacked linear maps on patches; no attention, norms, or conditioning.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_mode: MaskMode,
    pub backbone: Backbone,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            embed_dim: 64,
            blocks: 2,
            heads: 4,
            mlp_ratio: 4,
            mask_mode: MaskMode::None,
            backbone: Backbone::Transformer,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(
                "patch_size, embed_dim, heads and mlp_ratio must be positive",
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Shape of the joint latent the model operates on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub layout: LayoutMode,
    pub num_effects: usize,
}

impl Geometry {
    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, 3, self.height, self.width]
    }

    /// The reference condition is one latent frame of the same size.
    pub fn reference_shape(&self) -> [usize; 4] {
        [1, 3, self.height, self.width]
    }

    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        let p = cfg.patch_size;
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.num_effects == 0 {
            return Err(Error::config("latent geometry must be non-empty"));
        }
        if self.height % p != 0 || self.width % p != 0 {
            return Err(Error::config(format!(
                "patch_size {p} does not divide the {}x{} latent",
                self.height, self.width
            )));
        }
        let half_ok = match self.layout {
            LayoutMode::WidthWise => self.width % (2 * p) == 0,
            LayoutMode::HeightWise => self.height % (2 * p) == 0,
            LayoutMode::TemporalWise => self.frames % 2 == 0,
        };
        if !half_ok {
            return Err(Error::config(format!(
                "the {} split of a {}x{}x{} latent does not fall on a patch boundary",
                self.layout, self.frames, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub config: DenoiserConfig,
    pub geometry: Geometry,
}

/// What the model is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    /// The learned null token, used for the unconditional branch of guidance.
    Null,
    Given { effect: usize, reference: LatentGrid },
}

/// First-block attention outputs (after the output projection), one row per token.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub self_attn: Option<Mat>,
    pub cross_attn: Option<Mat>,
}

#[derive(Clone, Debug)]
struct BlockIx {
    ln1: (usize, usize),
    sa_q: usize,
    sa_k: usize,
    sa_v: usize,
    sa_o: (usize, usize),
    ln2: (usize, usize),
    ca_q: usize,
    ca_k: usize,
    ca_v: usize,
    ca_o: (usize, usize),
    ln3: (usize, usize),
    mlp1: (usize, usize),
    mlp2: (usize, usize),
}

#[derive(Clone, Debug)]
struct TransformerIx {
    patch: (usize, usize),
    pos_frame: usize,
    pos_row: usize,
    pos_col: usize,
    time1: (usize, usize),
    time2: (usize, usize),
    effect: usize,
    reference: (usize, usize),
    ref_type: usize,
    null: usize,
    blocks: Vec<BlockIx>,
    out: (usize, usize),
}

#[derive(Clone, Debug)]
enum Ix {
    Transformer(Box<TransformerIx>),
    Linear { patch: (usize, usize), out: (usize, usize) },
}

const INIT_STD: f64 = 0.02;

struct Registry {
    names: Vec<String>,
    values: Vec<Mat>,
    rng: ChaCha8Rng,
}

impl Registry {
    fn add(&mut self, name: String, value: Mat) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Normal with std 0.02, redrawn outside two standard deviations.
    fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let data = (0..rows * cols)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * INIT_STD;
                }
            })
            .collect();
        self.add(name.into(), Mat::from_vec(rows, cols, data))
    }

    fn constant(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> usize {
        self.add(name.into(), Mat::from_vec(rows, cols, vec![v; rows * cols]))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        (
            self.normal(format!("{name}.weight"), fan_in, fan_out),
            self.constant(format!("{name}.bias"), 1, fan_out, 0.0),
        )
    }

    fn norm(&mut self, name: &str, dim: usize) -> (usize, usize) {
        (
            self.constant(format!("{name}.gain"), 1, dim, 1.0),
            self.constant(format!("{name}.bias"), 1, dim, 0.0),
        )
    }
}

/// The patch-token velocity model with its parameters.
#[derive(Clone, Debug)]
pub struct Denoiser {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Mat>,
    ix: Ix,
    token_frame: Vec<usize>,
    token_row: Vec<usize>,
    token_col: Vec<usize>,
    alpha_tokens: Vec<bool>,
    self_mask: Option<AttnMask>,
    cross_mask: Option<AttnMask>,
}

impl Denoiser {
    /// Fresh model with seeded initialization.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.config.validate()?;
        spec.geometry.validate(&spec.config)?;
        let cfg = &spec.config;
        let g = &spec.geometry;
        let p = cfg.patch_size;
        let d = cfg.embed_dim;
        let pd = 3 * p * p;
        let (gh, gw) = (g.height / p, g.width / p);
        let mut reg = Registry {
            names: Vec::new(),
            values: Vec::new(),
            rng: chacha(seed, 0x1417),
        };
        let ix = match cfg.backbone {
            Backbone::Linear => Ix::Linear {
                patch: reg.linear("patch_in", pd, d),
                out: reg.linear("patch_out", d, pd),
            },
            Backbone::Transformer => {
                let patch = reg.linear("patch_in", pd, d);
                let pos_frame = reg.normal("pos.frame", g.frames, d);
                let pos_row = reg.normal("pos.row", gh, d);
                let pos_col = reg.normal("pos.col", gw, d);
                let time1 = reg.linear("time.fc1", d, d);
                let time2 = reg.linear("time.fc2", d, d);
                let effect = reg.normal("cond.effect", g.num_effects, d);
                let reference = reg.linear("cond.reference", pd, d);
                let ref_type = reg.normal("cond.reference_type", 1, d);
                let null = reg.normal("cond.null", 1, d);
                let hidden = d * cfg.mlp_ratio;
                let blocks = (0..cfg.blocks)
                    .map(|b| BlockIx {
                        ln1: reg.norm(&format!("block{b}.norm1"), d),
                        sa_q: reg.normal(format!("block{b}.self.q"), d, d),
                        sa_k: reg.normal(format!("block{b}.self.k"), d, d),
                        sa_v: reg.normal(format!("block{b}.self.v"), d, d),
                        sa_o: reg.linear(&format!("block{b}.self.out"), d, d),
                        ln2: reg.norm(&format!("block{b}.norm2"), d),
                        ca_q: reg.normal(format!("block{b}.cross.q"), d, d),
                        ca_k: reg.normal(format!("block{b}.cross.k"), d, d),
                        ca_v: reg.normal(format!("block{b}.cross.v"), d, d),
                        ca_o: reg.linear(&format!("block{b}.cross.out"), d, d),
                        ln3: reg.norm(&format!("block{b}.norm3"), d),
                        mlp1: reg.linear(&format!("block{b}.mlp.fc1"), d, hidden),
                        mlp2: reg.linear(&format!("block{b}.mlp.fc2"), hidden, d),
                    })
                    .collect();
                let out = reg.linear("patch_out", d, pd);
                Ix::Transformer(Box::new(TransformerIx {
                    patch,
                    pos_frame,
                    pos_row,
                    pos_col,
                    time1,
                    time2,
                    effect,
                    reference,
                    ref_type,
                    null,
                    blocks,
                    out,
                }))
            }
        };

        let n = g.frames * gh * gw;
        let mut token_frame = Vec::with_capacity(n);
        let mut token_row = Vec::with_capacity(n);
        let mut token_col = Vec::with_capacity(n);
        let mut alpha_tokens = Vec::with_capacity(n);
        for f in 0..g.frames {
            for r in 0..gh {
                for c in 0..gw {
                    token_frame.push(f);
                    token_row.push(r);
                    token_col.push(c);
                    alpha_tokens.push(match g.layout {
                        LayoutMode::WidthWise => c >= gw / 2,
                        LayoutMode::HeightWise => r >= gh / 2,
                        LayoutMode::TemporalWise => f >= g.frames / 2,
                    });
                }
            }
        }
        let self_mask = (cfg.mask_mode == MaskMode::SelfAttnM).then(|| {
            let mut m = Vec::with_capacity(n * n);
            for &qa in &alpha_tokens {
                for &ka in &alpha_tokens {
                    m.push(qa && !ka);
                }
            }
            Arc::new(m)
        });
        // Key 0 is the effect token; reference tokens follow.
        let keys = 1 + gh * gw;
        let cross_mask = (cfg.mask_mode == MaskMode::CrossAttnM).then(|| {
            let mut m = Vec::with_capacity(n * keys);
            for &qa in &alpha_tokens {
                m.push(qa);
                m.extend(std::iter::repeat_n(false, keys - 1));
            }
            Arc::new(m)
        });

        Ok(Self {
            spec,
            names: reg.names,
            params: reg.values,
            ix,
            token_frame,
            token_row,
            token_col,
            alpha_tokens,
            self_mask,
            cross_mask,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.spec.config
    }

    pub fn geometry(&self) -> &Geometry {
        &self.spec.geometry
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Per-token flag: does the token lie in the alpha half?
    pub fn alpha_tokens(&self) -> &[bool] {
        &self.alpha_tokens
    }

    fn check_input(&self, x: &LatentGrid, cond: &Condition) -> Result<()> {
        let want = self.spec.geometry.latent_shape();
        x.ensure_same_shape(&LatentGrid::zeros(want))?;
        if let Condition::Given { effect, reference } = cond {
            if *effect >= self.spec.geometry.num_effects {
                return Err(Error::InvalidInput(format!(
                    "effect id {effect} out of range (model knows {})",
                    self.spec.geometry.num_effects
                )));
            }
            let rs = self.spec.geometry.reference_shape();
            for (k, axis) in ["reference frames", "reference channels", "reference height", "reference width"]
                .into_iter()
                .enumerate()
            {
                ensure_dim(axis, rs[k], reference.shape()[k])?;
            }
        }
        Ok(())
    }

    fn build(&self, tape: &mut Tape, x: &LatentGrid, t: f64, cond: &Condition, mut trace: Option<&mut Trace>) -> Var {
        let p = self.spec.config.patch_size;
        let params = &self.params;
        let par = |tape: &mut Tape, i: usize| tape.param(i, &params[i]);
        let tokens = tape.input(patchify(x.data(), x.shape(), p));
        let ix = match &self.ix {
            Ix::Linear { patch, out } => {
                let (w, b) = (par(tape, patch.0), par(tape, patch.1));
                let h = tape.linear(tokens, w, b);
                let (w, b) = (par(tape, out.0), par(tape, out.1));
                return tape.linear(h, w, b);
            }
            Ix::Transformer(ix) => ix,
        };
        let cfg = &self.spec.config;
        let d = cfg.embed_dim;
        let lin = |tape: &mut Tape, x: Var, (w, b): (usize, usize)| {
            let (w, b) = (tape.param(w, &params[w]), tape.param(b, &params[b]));
            tape.linear(x, w, b)
        };

        let mut h = lin(tape, tokens, ix.patch);
        let pf = par(tape, ix.pos_frame);
        let pos = tape.gather_rows(pf, self.token_frame.clone());
        h = tape.add(h, pos);
        let pr = par(tape, ix.pos_row);
        let pos = tape.gather_rows(pr, self.token_row.clone());
        h = tape.add(h, pos);
        let pc = par(tape, ix.pos_col);
        let pos = tape.gather_rows(pc, self.token_col.clone());
        h = tape.add(h, pos);

        let temb = tape.input(Mat::from_vec(1, d, timestep_embedding(t, d)));
        let temb = lin(tape, temb, ix.time1);
        let temb = tape.gelu(temb);
        let temb = lin(tape, temb, ix.time2);
        h = tape.add_row(h, temb);

        let (ctx, cross_mask) = match cond {
            Condition::Null => (par(tape, ix.null), None),
            Condition::Given { effect, reference } => {
                let table = par(tape, ix.effect);
                let e = tape.gather_rows(table, vec![*effect]);
                let rt = tape.input(patchify(reference.data(), reference.shape(), p));
                let mut r = lin(tape, rt, ix.reference);
                let per_frame = (self.spec.geometry.height / p) * (self.spec.geometry.width / p);
                let pos = tape.gather_rows(pr, self.token_row[..per_frame].to_vec());
                r = tape.add(r, pos);
                let pos = tape.gather_rows(pc, self.token_col[..per_frame].to_vec());
                r = tape.add(r, pos);
                let rtype = par(tape, ix.ref_type);
                r = tape.add_row(r, rtype);
                (tape.concat_rows(&[e, r]), self.cross_mask.as_ref())
            }
        };

        for (bi, b) in ix.blocks.iter().enumerate() {
            let (g, bb) = (par(tape, b.ln1.0), par(tape, b.ln1.1));
            let a = tape.layer_norm(h, g, bb);
            let (wq, wk, wv) = (par(tape, b.sa_q), par(tape, b.sa_k), par(tape, b.sa_v));
            let q = tape.matmul(a, wq);
            let k = tape.matmul(a, wk);
            let v = tape.matmul(a, wv);
            let o = tape.attention(q, k, v, cfg.heads, self.self_mask.as_ref());
            let o = lin(tape, o, b.sa_o);
            if bi == 0 {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.self_attn = Some(tape.value(o).clone());
                }
            }
            h = tape.add(h, o);

            let (g, bb) = (par(tape, b.ln2.0), par(tape, b.ln2.1));
            let a = tape.layer_norm(h, g, bb);
            let (wq, wk, wv) = (par(tape, b.ca_q), par(tape, b.ca_k), par(tape, b.ca_v));
            let q = tape.matmul(a, wq);
            let k = tape.matmul(ctx, wk);
            let v = tape.matmul(ctx, wv);
            let o = tape.attention(q, k, v, cfg.heads, cross_mask);
            let o = lin(tape, o, b.ca_o);
            if bi == 0 {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.cross_attn = Some(tape.value(o).clone());
                }
            }
            h = tape.add(h, o);

            let (g, bb) = (par(tape, b.ln3.0), par(tape, b.ln3.1));
            let a = tape.layer_norm(h, g, bb);
            let m = lin(tape, a, b.mlp1);
            let m = tape.gelu(m);
            let m = lin(tape, m, b.mlp2);
            h = tape.add(h, m);
        }

        lin(tape, h, ix.out)
    }

    fn to_latent(&self, m: &Mat) -> Result<LatentGrid> {
        let shape = self.spec.geometry.latent_shape();
        LatentGrid::new(shape, unpatchify(m, shape, self.spec.config.patch_size))
    }

    /// Predict the velocity at `(x, t)`.
    pub fn forward(&self, x: &LatentGrid, t: f64, cond: &Condition) -> Result<LatentGrid> {
        self.check_input(x, cond)?;
        let mut tape = Tape::new();
        let out = self.build(&mut tape, x, t, cond, None);
        self.to_latent(tape.value(out))
    }

    /// Like [`Denoiser::forward`], also returning first-block attention outputs.
    pub fn forward_traced(&self, x: &LatentGrid, t: f64, cond: &Condition) -> Result<(LatentGrid, Trace)> {
        self.check_input(x, cond)?;
        let mut tape = Tape::new();
        let mut trace = Trace::default();
        let out = self.build(&mut tape, x, t, cond, Some(&mut trace));
        Ok((self.to_latent(tape.value(out))?, trace))
    }

    /// Loss terms and parameter gradients of the total loss for one example.
    ///
    /// `x_t` is formed from `x0` and `x1` at time `t`.
    pub fn loss_and_grads(
        &self,
        x0: &LatentGrid,
        x1: &LatentGrid,
        t: f64,
        cond: &Condition,
        lambda_rec: f64,
    ) -> Result<(LossParts, ParamGrads)> {
        self.check_input(x1, cond)?;
        let xt = super::latent::interpolate_path(x0, x1, t)?;
        let mut tape = Tape::new();
        let out = self.build(&mut tape, &xt, t, cond, None);
        let pred = self.to_latent(tape.value(out))?;
        let layout = self.spec.geometry.layout;
        let (parts, grad) = losses_with_grad(&pred, x0, x1, &xt, t, layout, lambda_rec)?;
        let grad_tokens = patchify(&grad, pred.shape(), self.spec.config.patch_size);
        let root = tape.loss(out, parts.total, grad_tokens.data);
        Ok((parts, tape.backward(root, self.params.len())))
    }

    pub(crate) fn from_parts(spec: ModelSpec, named: Vec<(String, Mat)>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (i, (name, value)) in named.into_iter().enumerate() {
            if name != model.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {name:?}, expected {:?}",
                    model.names[i]
                )));
            }
            let cur = &model.params[i];
            if (cur.rows, cur.cols) != (value.rows, value.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {}x{}, expected {}x{}",
                    value.rows, value.cols, cur.rows, cur.cols
                )));
            }
            model.params[i] = value;
        }
        Ok(model)
    }
}

/// Sinusoidal embedding of `t` scaled to the usual 0..1000 range.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Rearrange a latent into `tokens × (channels·p·p)` patch rows.
pub(crate) fn patchify(data: &[f64], shape: [usize; 4], p: usize) -> Mat {
    let [f, c, h, w] = shape;
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let mut out = Mat::zeros(f * gh * gw, pd);
    for fi in 0..f {
        for r in 0..gh {
            for col in 0..gw {
                let tok = (fi * gh + r) * gw + col;
                let row = &mut out.data[tok * pd..(tok + 1) * pd];
                for ch in 0..c {
                    for dy in 0..p {
                        let src = ((fi * c + ch) * h + r * p + dy) * w + col * p;
                        row[(ch * p + dy) * p..(ch * p + dy + 1) * p].copy_from_slice(&data[src..src + p]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify(m: &Mat, shape: [usize; 4], p: usize) -> Vec<f64> {
    let [f, c, h, w] = shape;
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let mut out = vec![0.0; f * c * h * w];
    for fi in 0..f {
        for r in 0..gh {
            for col in 0..gw {
                let tok = (fi * gh + r) * gw + col;
                let row = &m.data[tok * pd..(tok + 1) * pd];
                for ch in 0..c {
                    for dy in 0..p {
                        let dst = ((fi * c + ch) * h + r * p + dy) * w + col * p;
                        out[dst..dst + p].copy_from_slice(&row[(ch * p + dy) * p..(ch * p + dy + 1) * p]);
                    }
                }
            }
        }
    }
    out
}
