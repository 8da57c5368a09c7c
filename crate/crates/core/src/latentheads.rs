//! Multi-task heads on the latent action: cross-attention fusion with the
//! current frame and with keypoints, the frame and point decoders, their
//! losses and the uncertainty-weighted combination.

use ndarray::Array2;
use rand::Rng;

use crate::error::{shape_err, CareError, Result};
use crate::nn::{Binder, Builder, CrossBlock, InitKind, Initializer, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::vlmcore::ModelConfig;

/// `softmax(Q·Kᵀ/√d)·V` with `Q = query·W_z + b_z` and
/// `K = V = context·W_f + b_f`.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub wz: Linear,
    pub wf: Linear,
}

impl CrossAttention {
    pub fn new(b: &mut dyn Builder, name: &str, d_query: usize, d_context: usize, d: usize) -> Result<Self> {
        Ok(Self {
            wz: Linear::new(b, &format!("{name}.wz"), d_query, d)?,
            wf: Linear::new(b, &format!("{name}.wf"), d_context, d)?,
        })
    }

    /// The returned node holds the attention weights, see
    /// [`Tape::attention_probs`].
    pub fn forward<F: Real>(&self, t: &mut Tape<F>, query: Var, context: Var) -> Result<Var> {
        let q = self.wz.forward(t, query)?;
        let kv = self.wf.forward(t, context)?;
        t.attention(q, kv, kv, 1, false)
    }
}

/// Learned query tokens attend to the fused latent, then a linear head
/// emits next-frame features.
#[derive(Debug, Clone)]
pub struct FrameDecoder {
    pub queries: ParamId,
    pub layers: Vec<CrossBlock>,
    pub ln_f: LayerNorm,
    pub out: Linear,
}

impl FrameDecoder {
    fn new(b: &mut dyn Builder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.key_dim;
        Ok(Self {
            queries: b.param("heads.frame.queries", cfg.n_p(), d, InitKind::Normal(0.02))?,
            layers: (0..cfg.frame_dec_layers)
                .map(|i| CrossBlock::new(b, &format!("heads.frame.dec{i}"), d, cfg.ffn_mult * d))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(b, "heads.frame.ln_f", d)?,
            out: Linear::new(b, "heads.frame.out", d, cfg.d_v)?,
        })
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, z_f: Var, heads: usize) -> Result<Var> {
        let mut x = t.param(self.queries);
        if t.shape(z_f).1 != t.shape(x).1 {
            return Err(shape_err!("frame decoder: z_f width {} != {}", t.shape(z_f).1, t.shape(x).1));
        }
        for layer in &self.layers {
            x = layer.forward(t, x, z_f, heads)?;
        }
        let x = self.ln_f.forward(t, x)?;
        self.out.forward(t, x)
    }
}

/// Points embedded from normalised coordinates act as queries over the
/// latent rows; an MLP on the fused vector (alongside the point's own
/// embedding) predicts a normalised displacement added to `k_t`.
#[derive(Debug, Clone, Copy)]
pub struct PointDecoder {
    pub embed: Linear,
    pub xattn: CrossAttention,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl PointDecoder {
    fn new(b: &mut dyn Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            embed: Linear::new(b, "heads.point.embed", 2, cfg.d_l)?,
            xattn: CrossAttention::new(b, "heads.point.xattn", cfg.d_l, cfg.d_l, cfg.key_dim)?,
            mlp1: Linear::new(b, "heads.point.mlp1", cfg.key_dim + cfg.d_l, cfg.point_hidden)?,
            // zero output: the decoder starts as "nothing moves"
            mlp2: Linear::with_init(b, "heads.point.mlp2", cfg.point_hidden, 2, InitKind::Zeros)?,
        })
    }

    /// Linear embedding of pixel coordinates divided by the image size.
    pub fn embed_points<F: Real>(&self, t: &mut Tape<F>, k_t: Var, image_size: usize) -> Result<Var> {
        if t.shape(k_t).1 != 2 {
            return Err(shape_err!("keypoints must be Nx2"));
        }
        let kn = t.scale(k_t, F::one() / F::lit(image_size as f64));
        self.embed.forward(t, kn)
    }

    /// `z_k`: one fused vector per point.
    pub fn fuse<F: Real>(&self, t: &mut Tape<F>, points: Var, z: Var) -> Result<Var> {
        self.xattn.forward(t, points, z)
    }

    /// `k̂ = k_t + S·MLP([z_k ‖ e_k])` in pixels.
    pub fn decode<F: Real>(&self, t: &mut Tape<F>, z_k: Var, points: Var, k_t: Var, image_size: usize) -> Result<Var> {
        if t.shape(z_k).0 != t.shape(k_t).0 {
            return Err(shape_err!("point decoder: {} fused rows for {} points", t.shape(z_k).0, t.shape(k_t).0));
        }
        let x = t.concat_cols(&[z_k, points])?;
        let h = self.mlp1.forward(t, x)?;
        let h = t.gelu(h);
        let d = self.mlp2.forward(t, h)?;
        let d = t.scale(d, F::lit(image_size as f64));
        t.add(k_t, d)
    }
}

/// Log-variances `s = log σ²` of the two task likelihoods.
#[derive(Debug, Clone, Copy)]
pub struct Uwl {
    pub s1: ParamId,
    pub s2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub frame_xattn: CrossAttention,
    pub frame: FrameDecoder,
    pub point: PointDecoder,
    pub uwl: Uwl,
}

impl Heads {
    fn build(b: &mut dyn Builder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            frame_xattn: CrossAttention::new(b, "heads.frame.xattn", cfg.d_l, cfg.d_l, cfg.key_dim)?,
            frame: FrameDecoder::new(b, cfg)?,
            point: PointDecoder::new(b, cfg)?,
            uwl: Uwl {
                s1: b.param("heads.uwl.s1", 1, 1, InitKind::Zeros)?,
                s2: b.param("heads.uwl.s2", 1, 1, InitKind::Zeros)?,
            },
        })
    }

    pub fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(&mut Initializer { store, rng }, cfg)
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        Self::build(&mut Binder { store }, cfg)
    }
}

pub fn frame_loss<F: Real>(t: &mut Tape<F>, f_hat: Var, target: Var) -> Result<Var> {
    t.mse(f_hat, target)
}

/// MSE over coordinates divided by the image size.
pub fn point_loss<F: Real>(t: &mut Tape<F>, k_hat: Var, k_next: Var, image_size: usize) -> Result<Var> {
    let inv = F::one() / F::lit(image_size as f64);
    let a = t.scale(k_hat, inv);
    let b = t.scale(k_next, inv);
    t.mse(a, b)
}

/// `½·e^{−s1}·L_f + ½·e^{−s2}·L_p + ½·s1 + ½·s2`.
pub fn uwl_combine<F: Real>(t: &mut Tape<F>, l_f: Var, l_p: Var, s1: Var, s2: Var) -> Result<Var> {
    for v in [l_f, l_p, s1, s2] {
        if t.shape(v) != (1, 1) {
            return Err(shape_err!("uwl_combine takes scalars"));
        }
        if !t.scalar(v).is_finite() {
            return Err(CareError::Training("non-finite input to uwl_combine".into()));
        }
    }
    let half = F::lit(0.5);
    let term = |t: &mut Tape<F>, l: Var, s: Var| -> Result<Var> {
        let neg = t.scale(s, -F::one());
        let w = t.exp(neg);
        let wl = t.mul(w, l)?;
        let sum = t.add(wl, s)?;
        Ok(t.scale(sum, half))
    };
    let a = term(t, l_f, s1)?;
    let b = term(t, l_p, s2)?;
    t.add(a, b)
}

/// Plain-number form of [`uwl_combine`].
pub fn uwl_value(l_f: f64, l_p: f64, s1: f64, s2: f64) -> Result<f64> {
    if ![l_f, l_p, s1, s2].iter().all(|x| x.is_finite()) {
        return Err(CareError::Training("non-finite input to uwl_combine".into()));
    }
    Ok(0.5 * (-s1).exp() * l_f + 0.5 * (-s2).exp() * l_p + 0.5 * s1 + 0.5 * s2)
}

/// Constant-coordinate tensor for the keypoint path.
pub fn points_array<F: Real>(coords: &[[f32; 2]]) -> Array2<F> {
    Array2::from_shape_fn((coords.len(), 2), |(i, j)| F::lit(coords[i][j] as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Initializer;
    use crate::tape::tests::check_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar<F: Real>(t: &mut Tape<F>, x: f64) -> Var {
        t.constant(Array2::from_elem((1, 1), F::lit(x)))
    }

    fn identity_xattn(d: usize) -> (ParamStore<f64>, CrossAttention) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = CrossAttention::new(&mut Initializer { store: &mut s, rng: &mut rng }, "x", d, d, d).unwrap();
        *s.get_mut(x.wz.w) = Array2::eye(d);
        *s.get_mut(x.wf.w) = Array2::eye(d);
        (s, x)
    }

    #[test]
    fn cross_attention_worked_example() {
        let (s, x) = identity_xattn(2);
        let mut t = Tape::new(&s);
        let q = t.constant(ndarray::array![[1.0, 0.0]]);
        let c = t.constant(ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
        let out = x.forward(&mut t, q, c).unwrap();
        // independent softmax of the scores [1/sqrt(2), 0]
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        let p = &t.attention_probs(out).unwrap()[0];
        assert!((p[[0, 0]] - w0).abs() < 1e-12 && (w0 - 0.6698).abs() < 1e-4);
        assert!((t.value(out)[[0, 0]] - w0).abs() < 1e-12);
        assert!((t.value(out)[[0, 1]] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn singleton_context_returns_its_value_row() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = CrossAttention::new(&mut Initializer { store: &mut s, rng: &mut rng }, "x", 3, 5, 4).unwrap();
        let mut t = Tape::new(&s);
        let q = t.constant(Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 - 2.0));
        let c = t.constant(Array2::from_shape_fn((1, 5), |(_, j)| j as f64 * 0.3));
        let out = x.forward(&mut t, q, c).unwrap();
        let v = c;
        let kv = x.wf.forward(&mut t, v).unwrap();
        for r in 0..2 {
            assert_eq!(t.value(out).row(r), t.value(kv).row(0));
        }
    }

    #[test]
    fn fusion_weights_are_normalised() {
        let mut s = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = CrossAttention::new(&mut Initializer { store: &mut s, rng: &mut rng }, "x", 8, 8, 8).unwrap();
        let mut init = crate::params::Init { rng: &mut rng };
        let mut t = Tape::new(&s);
        let q = t.constant(init.normal(4, 8, 2.0));
        let c = t.constant(init.normal(16, 8, 2.0));
        let out = x.forward(&mut t, q, c).unwrap();
        for row in t.attention_probs(out).unwrap()[0].rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch: 8,
            d_v: 4,
            d_l: 4,
            n_layers: 1,
            n_heads: 2,
            n_latent: 2,
            enc_layers: 1,
            enc_heads: 2,
            ffn_mult: 2,
            max_text_len: 8,
            key_dim: 4,
            frame_dec_layers: 1,
            point_hidden: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn frame_decoder_shape_and_zero_head() {
        let cfg = ModelConfig::default();
        let mut s = ParamStore::<f32>::new();
        let h = Heads::init(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut init = crate::params::Init { rng: &mut ChaCha8Rng::seed_from_u64(2) };
        let zf = init.normal(cfg.n_latent, cfg.key_dim, 1.0);
        let mut t = Tape::new(&s);
        let z = t.constant(zf.clone());
        let out = h.frame.forward(&mut t, z, cfg.n_heads).unwrap();
        assert_eq!(t.shape(out), (64, 64));

        s.get_mut(h.frame.out.w).fill(0.0);
        let bias = init.normal(1, cfg.d_v, 1.0);
        *s.get_mut(h.frame.out.b) = bias.clone();
        let mut t = Tape::new(&s);
        let z = t.constant(zf);
        let out = h.frame.forward(&mut t, z, cfg.n_heads).unwrap();
        for row in t.value(out).rows() {
            assert_eq!(row, bias.row(0));
        }
    }

    #[test]
    fn frame_decoder_gradients_match_differences() {
        let cfg = tiny_cfg();
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Heads::init(&mut s, &cfg, &mut rng).unwrap();
        let zf = s.insert("z_f", crate::params::Init { rng: &mut rng }.normal(2, 4, 1.0)).unwrap();
        let target = crate::params::Init { rng: &mut rng }.normal(cfg.n_p(), cfg.d_v, 1.0);
        check_grads(
            &s,
            |t| {
                let z = t.param(zf);
                let f = h.frame.forward(t, z, cfg.n_heads).unwrap();
                let y = t.constant(target.clone());
                frame_loss(t, f, y).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn point_path_gradients_match_differences() {
        let cfg = tiny_cfg();
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Heads::init(&mut s, &cfg, &mut rng).unwrap();
        let z = s.insert("z", crate::params::Init { rng: &mut rng }.normal(2, 4, 1.0)).unwrap();
        let k_t = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64 * 1.3);
        let k_next = k_t.mapv(|v| v + 0.7);
        check_grads(
            &s,
            |t| {
                let zv = t.param(z);
                let kt = t.constant(k_t.clone());
                let e = h.point.embed_points(t, kt, 16).unwrap();
                let zk = h.point.fuse(t, e, zv).unwrap();
                let kh = h.point.decode(t, zk, e, kt, 16).unwrap();
                let kn = t.constant(k_next.clone());
                point_loss(t, kh, kn, 16).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn zero_point_head_is_identity() {
        let cfg = ModelConfig::default();
        let mut s = ParamStore::<f32>::new();
        let h = Heads::init(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        s.get_mut(h.point.mlp2.w).fill(0.0);
        s.get_mut(h.point.mlp2.b).fill(0.0);
        let grid = crate::synthworld::keypoint_grid(64).unwrap();
        let k = points_array::<f32>(&grid.coords);
        let mut init = crate::params::Init { rng: &mut ChaCha8Rng::seed_from_u64(2) };
        let mut t = Tape::new(&s);
        let kt = t.constant(k.clone());
        let z = t.constant(init.normal(cfg.n_latent, cfg.d_l, 1.0));
        let e = h.point.embed_points(&mut t, kt, 64).unwrap();
        let zk = h.point.fuse(&mut t, e, z).unwrap();
        let out = h.point.decode(&mut t, zk, e, kt, 64).unwrap();
        assert_eq!(t.shape(out), (256, 2));
        assert_eq!(t.value(out), &k);
    }

    #[test]
    fn loss_examples() {
        let s = ParamStore::<f64>::new();
        let mut t = Tape::new(&s);
        let a = t.constant(Array2::from_shape_fn((64, 64), |(i, j)| (i as f64 - j as f64) * 0.01));
        let b = t.constant(t.value(a).mapv(|v| v + 1.0));
        let same = frame_loss(&mut t, a, a).unwrap();
        assert_eq!(t.scalar(same), 0.0);
        let off = frame_loss(&mut t, b, a).unwrap();
        assert!((t.scalar(off) - 1.0).abs() < 1e-12);

        let k = t.constant(Array2::from_shape_fn((256, 2), |(i, j)| (i % 64) as f64 + j as f64));
        let mut shifted = t.value(k).clone();
        shifted.column_mut(0).mapv_inplace(|v| v + 1.0);
        let ks = t.constant(shifted);
        let lp = point_loss(&mut t, ks, k, 64).unwrap();
        assert!((t.scalar(lp) - (1.0 / 4096.0) / 2.0).abs() < 1e-12);
        assert!((t.scalar(lp) - 1.2207e-4).abs() < 1e-8);
        let back = point_loss(&mut t, k, ks, 64).unwrap();
        assert_eq!(t.scalar(lp), t.scalar(back));
    }

    #[test]
    fn uwl_examples() {
        assert_eq!(uwl_value(2.0, 4.0, 0.0, 0.0).unwrap(), 3.0);
        assert!(uwl_value(f64::NAN, 1.0, 0.0, 0.0).is_err());
        let s = ParamStore::<f64>::new();
        let mut t = Tape::new(&s);
        let (lf, lp, s1, s2) = (scalar(&mut t, 2.0), scalar(&mut t, 4.0), scalar(&mut t, 0.0), scalar(&mut t, 0.0));
        let l = uwl_combine(&mut t, lf, lp, s1, s2).unwrap();
        assert_eq!(t.scalar(l), 3.0);
    }

    #[test]
    fn uwl_gradients_and_stationary_point() {
        let mut s = ParamStore::<f64>::new();
        let s1 = s.insert("s1", Array2::from_elem((1, 1), 0.0)).unwrap();
        let s2 = s.insert("s2", Array2::from_elem((1, 1), -0.4)).unwrap();
        let build = |lf: f64, lp: f64| {
            move |t: &mut Tape<f64>| {
                let (a, b) = (scalar(t, lf), scalar(t, lp));
                let (x, y) = (t.param(s1), t.param(s2));
                uwl_combine(t, a, b, x, y).unwrap()
            }
        };
        let mut t = Tape::new(&s);
        let l = build(1.0, 0.3)(&mut t);
        let g = t.backward(l).unwrap();
        assert!(g.get(s1).unwrap()[[0, 0]].abs() < 1e-15);
        let want = -0.5 * 0.4f64.exp() * 0.3 + 0.5;
        assert!((g.get(s2).unwrap()[[0, 0]] - want).abs() < 1e-12);
        check_grads(&s, build(2.5, 0.07), 1e-7);
    }

    #[test]
    fn uwl_minimiser_is_log_loss() {
        let l_f = 0.37f64;
        let s_star = (-6000..6000)
            .map(|i| i as f64 * 1e-3)
            .min_by(|&a, &b| {
                uwl_value(l_f, 1.0, a, 0.0)
                    .unwrap()
                    .total_cmp(&uwl_value(l_f, 1.0, b, 0.0).unwrap())
            })
            .unwrap();
        assert!((s_star - l_f.ln()).abs() < 2e-3);
    }

    proptest::proptest! {
        #[test]
        fn uwl_monotone_in_losses(a in 0.0f64..10.0, d in 0.0f64..5.0, s1 in -3.0f64..3.0, s2 in -3.0f64..3.0) {
            proptest::prop_assert!(uwl_value(a + d, 1.0, s1, s2).unwrap() >= uwl_value(a, 1.0, s1, s2).unwrap());
            proptest::prop_assert!(uwl_value(1.0, a + d, s1, s2).unwrap() >= uwl_value(1.0, a, s1, s2).unwrap());
        }
    }
}
