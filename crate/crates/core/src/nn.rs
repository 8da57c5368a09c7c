//! Parameter builders and the small layer vocabulary shared by the backbone
//! and the task heads.

use ndarray::Array2;
use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

/// Either creates parameters or resolves existing ones by name, so one
/// layer constructor serves both fresh models and loaded checkpoints.
pub trait Builder {
    fn param(&mut self, name: &str, rows: usize, cols: usize, kind: InitKind) -> Result<ParamId>;
}

pub struct Initializer<'a, F, R> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
}

impl<F: Real, R: Rng> Builder for Initializer<'_, F, R> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, kind: InitKind) -> Result<ParamId> {
        let mut init = Init { rng: &mut *self.rng };
        let value = match kind {
            InitKind::Xavier => init.xavier(rows, cols),
            InitKind::Zeros => Array2::zeros((rows, cols)),
            InitKind::Ones => Array2::ones((rows, cols)),
            InitKind::Normal(std) => init.normal(rows, cols, std),
        };
        self.store.insert(name, value)
    }
}

pub struct Binder<'a, F> {
    pub store: &'a ParamStore<F>,
}

impl<F: Real> Builder for Binder<'_, F> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, _: InitKind) -> Result<ParamId> {
        let id = self.store.require(name)?;
        let got = self.store.get(id).dim();
        if got != (rows, cols) {
            return Err(shape_err!("`{name}` is {got:?}, expected {:?}", (rows, cols)));
        }
        Ok(id)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(b: &mut dyn Builder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(b, name, d_in, d_out, InitKind::Xavier)
    }

    pub fn with_init(b: &mut dyn Builder, name: &str, d_in: usize, d_out: usize, w: InitKind) -> Result<Self> {
        Ok(Self {
            w: b.param(&format!("{name}.w"), d_in, d_out, w)?,
            b: b.param(&format!("{name}.b"), 1, d_out, InitKind::Zeros)?,
        })
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let b = t.param(self.b);
        t.affine(x, w, Some(b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut dyn Builder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            g: b.param(&format!("{name}.g"), 1, dim, InitKind::Ones)?,
            b: b.param(&format!("{name}.b"), 1, dim, InitKind::Zeros)?,
        })
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Var> {
        let g = t.param(self.g);
        let b = t.param(self.b);
        t.layer_norm(x, g, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.g, self.b]
    }
}

/// Low-rank correction `scale · B·A` to a weight used as `x·W`, so the
/// forward adds `scale · (x·Aᵀ)·Bᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl Lora {
    pub fn new(b: &mut dyn Builder, name: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(crate::error::CareError::Config(format!(
                "adapter rank {rank} outside 1..={}",
                d_in.min(d_out)
            )));
        }
        let std = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            a: b.param(&format!("{name}.a"), rank, d_in, InitKind::Normal(std))?,
            b: b.param(&format!("{name}.b"), d_out, rank, InitKind::Zeros)?,
            scale: alpha / rank as f64,
        })
    }

    pub fn delta<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Var> {
        let a = t.param(self.a);
        let b = t.param(self.b);
        let xa = t.matmul_nt(x, a)?;
        let d = t.matmul_nt(xa, b)?;
        Ok(t.scale(d, F::lit(self.scale)))
    }
}

fn project<F: Real>(t: &mut Tape<F>, lin: &Linear, lora: Option<&Lora>, x: Var) -> Result<Var> {
    let y = lin.forward(t, x)?;
    match lora {
        Some(l) => {
            let d = l.delta(t, x)?;
            t.add(y, d)
        }
        None => Ok(y),
    }
}

/// Adapters on the four attention projections of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockAdapters {
    pub q: Lora,
    pub k: Lora,
    pub v: Lora,
    pub o: Lora,
}

/// Pre-LN transformer block: attention then a GELU feed-forward, each
/// wrapped in a residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub adapters: Option<BlockAdapters>,
    pub dim: usize,
}

impl Block {
    pub fn new(b: &mut dyn Builder, name: &str, dim: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim)?,
            q: Linear::new(b, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(b, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(b, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(b, &format!("{name}.o"), dim, dim)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim)?,
            ff1: Linear::new(b, &format!("{name}.ff1"), dim, ffn)?,
            ff2: Linear::new(b, &format!("{name}.ff2"), ffn, dim)?,
            adapters: None,
            dim,
        })
    }

    pub fn attach_adapters(&mut self, b: &mut dyn Builder, name: &str, rank: usize, alpha: f64) -> Result<()> {
        let dim = self.dim;
        let mut mk = |p: &str| Lora::new(b, &format!("{name}.{p}"), dim, dim, rank, alpha);
        self.adapters = Some(BlockAdapters {
            q: mk("q")?,
            k: mk("k")?,
            v: mk("v")?,
            o: mk("o")?,
        });
        Ok(())
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, x: Var, heads: usize, causal: bool) -> Result<Var> {
        let ad = self.adapters.as_ref();
        let h = self.ln1.forward(t, x)?;
        let q = project(t, &self.q, ad.map(|a| &a.q), h)?;
        let k = project(t, &self.k, ad.map(|a| &a.k), h)?;
        let v = project(t, &self.v, ad.map(|a| &a.v), h)?;
        let a = t.attention(q, k, v, heads, causal)?;
        let o = project(t, &self.o, ad.map(|a| &a.o), a)?;
        let x = t.add(x, o)?;
        let h = self.ln2.forward(t, x)?;
        let f = self.ff1.forward(t, h)?;
        let f = t.gelu(f);
        let f = self.ff2.forward(t, f)?;
        t.add(x, f)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.ln1.ids());
        for l in [&self.q, &self.k, &self.v, &self.o] {
            v.extend(l.ids());
        }
        v.extend(self.ln2.ids());
        v.extend(self.ff1.ids());
        v.extend(self.ff2.ids());
        v
    }
}

/// Pre-LN decoder block whose queries attend to a separate memory.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl CrossBlock {
    pub fn new(b: &mut dyn Builder, name: &str, dim: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim)?,
            q: Linear::new(b, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(b, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(b, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(b, &format!("{name}.o"), dim, dim)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim)?,
            ff1: Linear::new(b, &format!("{name}.ff1"), dim, ffn)?,
            ff2: Linear::new(b, &format!("{name}.ff2"), ffn, dim)?,
        })
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, x: Var, memory: Var, heads: usize) -> Result<Var> {
        let h = self.ln1.forward(t, x)?;
        let q = self.q.forward(t, h)?;
        let k = self.k.forward(t, memory)?;
        let v = self.v.forward(t, memory)?;
        let a = t.attention(q, k, v, heads, false)?;
        let o = self.o.forward(t, a)?;
        let x = t.add(x, o)?;
        let h = self.ln2.forward(t, x)?;
        let f = self.ff1.forward(t, h)?;
        let f = t.gelu(f);
        let f = self.ff2.forward(t, f)?;
        t.add(x, f)
    }
}
