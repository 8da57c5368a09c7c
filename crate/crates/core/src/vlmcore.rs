//! Latent vision-language backbone: twin patch encoders, the concat
//! projector, a causal transformer over text and vision tokens, latent
//! extraction at placeholder positions and the EMA target encoder.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CareError, Result};
use crate::nn::{Binder, Block, Builder, InitKind, Initializer, LayerNorm, Linear};
use crate::params::{ema_update, ParamId, ParamStore};
use crate::real::Real;
use crate::synthworld::Frame;
use crate::tape::{Tape, Var};
use crate::textfront::{TextEmbedding, TextFeatures, TokenizedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Slow-moving copy of encoder a.
    #[default]
    Ema,
    /// The initial copy, never updated.
    FrozenRandom,
}

/// What the latent attends to when fused for frame prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrameContext {
    /// Current-frame vision tokens.
    #[default]
    Current,
    /// No current-frame tokens; the latent attends over its own rows, so
    /// everything about the next frame has to pass through z.
    Zeroed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_latent: usize,
    pub ema_momentum: f64,
    pub target_mode: TargetMode,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub ffn_mult: usize,
    pub max_text_len: usize,
    /// Key dimension `d` of the fusion cross-attentions.
    pub key_dim: usize,
    pub frame_dec_layers: usize,
    pub point_hidden: usize,
    pub frame_context: FrameContext,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            d_v: 64,
            d_l: 128,
            n_layers: 4,
            n_heads: 4,
            n_latent: 4,
            ema_momentum: 0.99,
            target_mode: TargetMode::Ema,
            enc_layers: 2,
            enc_heads: 4,
            ffn_mult: 4,
            max_text_len: 32,
            key_dim: 128,
            frame_dec_layers: 2,
            point_hidden: 128,
            frame_context: FrameContext::Current,
        }
    }
}

impl ModelConfig {
    pub fn n_p(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CareError::Config(m));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image_size {} not divisible by patch {}", self.image_size, self.patch));
        }
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_l", self.d_l),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_latent", self.n_latent),
            ("enc_heads", self.enc_heads),
            ("ffn_mult", self.ffn_mult),
            ("key_dim", self.key_dim),
            ("point_hidden", self.point_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_l % self.n_heads != 0 {
            return bad(format!("d_l {} not divisible by n_heads {}", self.d_l, self.n_heads));
        }
        if self.d_v % self.enc_heads != 0 {
            return bad(format!("d_v {} not divisible by enc_heads {}", self.d_v, self.enc_heads));
        }
        if self.key_dim % self.n_heads != 0 {
            return bad(format!("key_dim {} not divisible by n_heads {}", self.key_dim, self.n_heads));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return bad(format!("ema_momentum {} outside (0,1)", self.ema_momentum));
        }
        if self.max_text_len <= self.n_latent {
            return bad("max_text_len must exceed n_latent".into());
        }
        Ok(())
    }
}

/// Non-overlapping `patch×patch` tiles flattened to rows, raster order.
pub fn patchify<F: Real>(frame: &Frame, patch: usize) -> Result<Array2<F>> {
    let n = frame.size;
    if patch == 0 || n % patch != 0 || frame.pixels.len() != n * n * 3 {
        return Err(shape_err!("frame of size {n} cannot be split into {patch}px patches"));
    }
    let side = n / patch;
    let mut out = Array2::zeros((side * side, patch * patch * 3));
    for py in 0..side {
        for px in 0..side {
            let row = py * side + px;
            for dy in 0..patch {
                for dx in 0..patch {
                    let src = ((py * patch + dy) * n + px * patch + dx) * 3;
                    let dst = (dy * patch + dx) * 3;
                    for c in 0..3 {
                        out[[row, dst + c]] = F::lit(frame.pixels[src + c] as f64);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch embedding, learned positions, pre-LN blocks and a final norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Encoder {
    fn new(b: &mut dyn Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let embed = Linear::new(b, &format!("{name}.embed"), cfg.patch_dim(), cfg.d_v)?;
        let pos = b.param(&format!("{name}.pos"), cfg.n_p(), cfg.d_v, InitKind::Normal(0.02))?;
        let blocks = (0..cfg.enc_layers)
            .map(|i| Block::new(b, &format!("{name}.blk{i}"), cfg.d_v, cfg.ffn_mult * cfg.d_v))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(b, &format!("{name}.ln_f"), cfg.d_v)?;
        Ok(Self { embed, pos, blocks, ln_f })
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, patches: Var, heads: usize) -> Result<Var> {
        let x = self.embed.forward(t, patches)?;
        let pos = t.param(self.pos);
        let mut x = t.add(x, pos)?;
        for blk in &self.blocks {
            x = blk.forward(t, x, heads, false)?;
        }
        self.ln_f.forward(t, x)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.embed.ids().to_vec();
        v.push(self.pos);
        for blk in &self.blocks {
            v.extend(blk.ids());
        }
        v.extend(self.ln_f.ids());
        v
    }
}

/// Both encoder outputs, their concatenation and the projected tokens.
pub struct VisionFeatures {
    pub f_a: Var,
    pub f_b: Var,
    pub f_cat: Var,
    pub f_v: Var,
}

/// Handles to every backbone parameter in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Vlm {
    pub cfg: ModelConfig,
    pub enc_a: Encoder,
    pub enc_b: Encoder,
    pub target: Encoder,
    pub proj1: Linear,
    pub proj2: Linear,
    pub text: TextEmbedding,
    pub vis_pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

pub const TARGET_PREFIX: &str = "target.";
pub const ADAPTER_PREFIX: &str = "adapters.";

impl Vlm {
    fn build(b: &mut dyn Builder, cfg: &ModelConfig, n_vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let enc_a = Encoder::new(b, "enc_a", cfg)?;
        let enc_b = Encoder::new(b, "enc_b", cfg)?;
        let target = Encoder::new(b, "target.enc_a", cfg)?;
        let proj1 = Linear::new(b, "proj.l1", 2 * cfg.d_v, cfg.d_l)?;
        let proj2 = Linear::new(b, "proj.l2", cfg.d_l, cfg.d_l)?;
        let text = TextEmbedding {
            table: b.param("text.table", n_vocab, cfg.d_l, InitKind::Normal(0.02))?,
            positions: b.param("text.pos", cfg.max_text_len, cfg.d_l, InitKind::Normal(0.02))?,
        };
        let vis_pos = b.param("lm.vis_pos", cfg.n_p(), cfg.d_l, InitKind::Normal(0.02))?;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(b, &format!("lm.blk{i}"), cfg.d_l, cfg.ffn_mult * cfg.d_l))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(b, "lm.ln_f", cfg.d_l)?;
        Ok(Self {
            cfg: cfg.clone(),
            enc_a,
            enc_b,
            target,
            proj1,
            proj2,
            text,
            vis_pos,
            blocks,
            ln_f,
        })
    }

    /// Fresh parameters; the target encoder starts as an exact copy of
    /// encoder a.
    pub fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: &ModelConfig, n_vocab: usize, rng: &mut R) -> Result<Self> {
        let vlm = Self::build(&mut Initializer { store: &mut *store, rng }, cfg, n_vocab)?;
        for (online, target) in vlm.ema_pairs() {
            let v = store.get(online).clone();
            *store.get_mut(target) = v;
        }
        Ok(vlm)
    }

    /// Handles into an existing store, including adapters when present.
    pub fn bind<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let n_vocab = store.get(store.require("text.table")?).nrows();
        let mut vlm = Self::build(&mut Binder { store }, cfg, n_vocab)?;
        let a0 = format!("{ADAPTER_PREFIX}lm.blk0.q.a");
        if let Some(id) = store.id(&a0) {
            let rank = store.get(id).nrows();
            let alpha = store
                .id(&format!("{ADAPTER_PREFIX}alpha"))
                .map(|i| store.get(i)[[0, 0]].as_f64())
                .ok_or_else(|| CareError::Contract("adapters stored without alpha".into()))?;
            vlm.bind_adapters(&mut Binder { store }, rank, alpha)?;
        }
        Ok(vlm)
    }

    fn bind_adapters(&mut self, b: &mut dyn Builder, rank: usize, alpha: f64) -> Result<()> {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.attach_adapters(b, &format!("{ADAPTER_PREFIX}lm.blk{i}"), rank, alpha)?;
        }
        Ok(())
    }

    /// Adds zero-initialised low-rank adapters to every attention
    /// projection of the backbone.
    pub fn attach_adapters<F: Real, R: Rng>(&mut self, store: &mut ParamStore<F>, rank: usize, alpha: f64, rng: &mut R) -> Result<()> {
        if self.blocks.iter().any(|b| b.adapters.is_some()) {
            return Err(CareError::Contract("adapters already attached".into()));
        }
        self.bind_adapters(&mut Initializer { store: &mut *store, rng }, rank, alpha)?;
        store.insert(format!("{ADAPTER_PREFIX}alpha"), Array2::from_elem((1, 1), F::lit(alpha)))?;
        Ok(())
    }

    /// Adapter matrices (not the stored alpha scalar).
    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .filter_map(|b| b.adapters)
            .flat_map(|a| [a.q, a.k, a.v, a.o])
            .flat_map(|l| [l.a, l.b])
            .collect()
    }

    pub fn ema_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.enc_a.ids().into_iter().zip(self.target.ids()).collect()
    }

    pub fn encode_image<F: Real>(&self, t: &mut Tape<F>, frame: &Frame) -> Result<(Var, Var)> {
        if frame.size != self.cfg.image_size {
            return Err(shape_err!("frame size {} but model expects {}", frame.size, self.cfg.image_size));
        }
        let p = t.constant(patchify(frame, self.cfg.patch)?);
        let f_a = self.enc_a.forward(t, p, self.cfg.enc_heads)?;
        let f_b = self.enc_b.forward(t, p, self.cfg.enc_heads)?;
        Ok((f_a, f_b))
    }

    /// `f_cat = [f_a ‖ f_b]`, then Linear → GELU → Linear.
    pub fn concat_project<F: Real>(&self, t: &mut Tape<F>, f_a: Var, f_b: Var) -> Result<(Var, Var)> {
        let want = (self.cfg.n_p(), self.cfg.d_v);
        if t.shape(f_a) != want || t.shape(f_b) != want {
            return Err(shape_err!("projector inputs must be {want:?}"));
        }
        let f_cat = t.concat_cols(&[f_a, f_b])?;
        let h = self.proj1.forward(t, f_cat)?;
        let h = t.gelu(h);
        let f_v = self.proj2.forward(t, h)?;
        Ok((f_cat, f_v))
    }

    pub fn vision<F: Real>(&self, t: &mut Tape<F>, frame: &Frame) -> Result<VisionFeatures> {
        let (f_a, f_b) = self.encode_image(t, frame)?;
        let (f_cat, f_v) = self.concat_project(t, f_a, f_b)?;
        Ok(VisionFeatures { f_a, f_b, f_cat, f_v })
    }

    /// Final-layer states in `[f_T; f_v]` row order. Internally vision
    /// tokens come first so that, under the causal mask, placeholder
    /// positions can attend to the image.
    pub fn backbone_forward<F: Real>(&self, t: &mut Tape<F>, text: &TextFeatures, f_v: Var) -> Result<Var> {
        let (l_text, d) = t.shape(text.embeddings);
        let (n_p, dv) = t.shape(f_v);
        if d != self.cfg.d_l || dv != self.cfg.d_l || n_p != self.cfg.n_p() {
            return Err(shape_err!("backbone inputs: text {l_text}x{d}, vision {n_p}x{dv}"));
        }
        if l_text > self.cfg.max_text_len {
            return Err(shape_err!("text length {l_text} exceeds {}", self.cfg.max_text_len));
        }
        let vp = t.param(self.vis_pos);
        let vis = t.add(f_v, vp)?;
        let mut x = t.concat_rows(&[vis, text.embeddings])?;
        for blk in &self.blocks {
            x = blk.forward(t, x, self.cfg.n_heads, true)?;
        }
        let x = self.ln_f.forward(t, x)?;
        let txt = t.slice_rows(x, n_p, l_text)?;
        let vis = t.slice_rows(x, 0, n_p)?;
        t.concat_rows(&[txt, vis])
    }

    /// Rows of `h_last` at the placeholder positions, in order.
    pub fn extract_latent<F: Real>(&self, t: &mut Tape<F>, h_last: Var, positions: &[usize]) -> Result<Var> {
        extract_latent(t, h_last, positions)
    }

    /// Current frame and prompt to the latent action `z` (n_latent×D_l),
    /// also returning the vision features it was computed from.
    pub fn latent<F: Real>(&self, t: &mut Tape<F>, frame: &Frame, tokens: &TokenizedPrompt) -> Result<(Var, VisionFeatures)> {
        if tokens.placeholder_positions.len() != self.cfg.n_latent {
            return Err(shape_err!(
                "prompt has {} placeholders, model expects {}",
                tokens.placeholder_positions.len(),
                self.cfg.n_latent
            ));
        }
        let vf = self.vision(t, frame)?;
        let text = self.text.forward(t, tokens)?;
        let h = self.backbone_forward(t, &text, vf.f_v)?;
        let z = extract_latent(t, h, &text.placeholder_positions)?;
        Ok((z, vf))
    }

    /// Next-frame targets from the target encoder. Evaluated on a private
    /// tape, so the result is a plain array and carries no gradient.
    pub fn target_features<F: Real>(&self, store: &ParamStore<F>, frame: &Frame) -> Result<Array2<F>> {
        if frame.size != self.cfg.image_size {
            return Err(shape_err!("frame size {} but model expects {}", frame.size, self.cfg.image_size));
        }
        let mut t = Tape::with_trainable(store, &[]);
        let p = t.constant(patchify(frame, self.cfg.patch)?);
        let f = self.target.forward(&mut t, p, self.cfg.enc_heads)?;
        Ok(t.value(f).clone())
    }

    /// One EMA step of the target encoder; a no-op in frozen mode.
    pub fn update_target<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        match self.cfg.target_mode {
            TargetMode::Ema => ema_update(store, &self.ema_pairs(), F::lit(self.cfg.ema_momentum)),
            TargetMode::FrozenRandom => Ok(()),
        }
    }
}

pub fn extract_latent<F: Real>(t: &mut Tape<F>, h_last: Var, positions: &[usize]) -> Result<Var> {
    let rows = t.shape(h_last).0;
    if let Some(&p) = positions.iter().find(|&&p| p >= rows) {
        return Err(CareError::Input(format!("placeholder position {p} outside {rows} rows")));
    }
    t.gather_rows(h_last, positions)
}

/// Smallest per-dimension standard deviation over stacked feature rows.
pub fn min_feature_std<F: Real>(features: &[Array2<F>]) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).expect("same width");
    let all = all.mapv(|x| x.as_f64());
    all.std_axis(Axis(0), 0.0).iter().copied().fold(f64::INFINITY, f64::min)
}

pub const COLLAPSE_STD: f64 = 1e-4;

/// Fails when target features have collapsed towards a constant.
pub fn check_collapse(feat_std: f64) -> Result<()> {
    if feat_std.is_finite() && feat_std >= COLLAPSE_STD {
        Ok(())
    } else {
        Err(CareError::Training(format!(
            "target features collapsed: min per-dimension std {feat_std:e} < {COLLAPSE_STD:e}"
        )))
    }
}
