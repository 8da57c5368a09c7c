//! Stage-2 adaptation: a residual action head on the flattened latent,
//! low-rank adapters on the backbone attention projections and L1
//! regression on the labeled split.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{CareError, Result};
use crate::nn::{Builder, Binder, Initializer, Linear};
use crate::parallel::Exec;
use crate::params::{Adam, Grads, ParamId, ParamStore};
use crate::pretrain::{load_pretrained, CareModel};
use crate::real::Real;
use crate::seed::derive_seed;
use crate::synthworld::dataset::{load_labeled, write_json_atomic, DatasetManifest, LabeledTrajectory, SPLIT_FINETUNE, SPLIT_PROBE};
use crate::synthworld::{Action, Frame};
use crate::tape::{Tape, Var};
use crate::vlmcore::ModelConfig;

pub const ACTION_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub seed: u64,
    pub rank: usize,
    pub alpha: f64,
    pub grad_clip: f64,
    pub head_hidden: usize,
    /// Backbone shape for from-scratch runs; ignored when starting from a
    /// pretrained checkpoint.
    pub model: ModelConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            rank: 8,
            alpha: 16.0,
            grad_clip: 1.0,
            head_hidden: 256,
            model: ModelConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.head_hidden == 0 {
            return Err(CareError::Config("batch_size and head_hidden must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CareError::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(CareError::Config(format!("grad_clip {} must be positive", self.grad_clip)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(CareError::Config(format!("alpha {} must be positive", self.alpha)));
        }
        self.model.validate()
    }
}

/// `in → hidden` GELU, a residual `hidden → hidden` GELU block, then `→ 3`.
#[derive(Debug, Clone, Copy)]
pub struct ActionHead {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

impl ActionHead {
    fn build(b: &mut dyn Builder, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(b, "head.l1", d_in, hidden)?,
            l2: Linear::new(b, "head.l2", hidden, hidden)?,
            out: Linear::new(b, "head.out", hidden, ACTION_DIM)?,
        })
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, z: Var) -> Result<Var> {
        let x = flatten(t, z)?;
        let h = self.l1.forward(t, x)?;
        let h = t.gelu(h);
        let r = self.l2.forward(t, h)?;
        let r = t.gelu(r);
        let h = t.add(h, r)?;
        self.out.forward(t, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.l1.ids(), self.l2.ids(), self.out.ids()].concat()
    }
}

/// Rows laid side by side as one row.
pub fn flatten<F: Real>(t: &mut Tape<F>, z: Var) -> Result<Var> {
    let rows = t.shape(z).0;
    let parts = (0..rows).map(|r| t.slice_rows(z, r, 1)).collect::<Result<Vec<_>>>()?;
    t.concat_cols(&parts)
}

/// Pretrained (or random) backbone with adapters and an action head.
#[derive(Debug, Clone)]
pub struct Vla {
    pub model: CareModel,
    pub head: ActionHead,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VlaConfig {
    pub model: ModelConfig,
    pub finetune: FinetuneConfig,
    /// Source pretraining checkpoint, absent for from-scratch runs.
    pub pretrained_from: Option<String>,
}

impl Vla {
    /// Adds zero-initialised adapters and a fresh head to `model`. The base
    /// weights are left untouched.
    pub fn attach(model: CareModel, store: &mut ParamStore<f32>, cfg: &FinetuneConfig) -> Result<Self> {
        let mut model = model;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x4ead]));
        let d_in = model.cfg().n_latent * model.cfg().d_l;
        let head = ActionHead::build(&mut Initializer { store: &mut *store, rng: &mut rng }, d_in, cfg.head_hidden)?;
        model.vlm.attach_adapters(store, cfg.rank, cfg.alpha, &mut rng)?;
        Ok(Self { model, head })
    }

    pub fn bind(store: &ParamStore<f32>, cfg: &VlaConfig, vocab: crate::textfront::Vocab) -> Result<Self> {
        let model = CareModel::bind(store, &cfg.model, vocab)?;
        let d_in = cfg.model.n_latent * cfg.model.d_l;
        let head = ActionHead::build(&mut Binder { store }, d_in, cfg.finetune.head_hidden)?;
        Ok(Self { model, head })
    }

    /// Raw head output `(dx, dy, grip logit)`.
    pub fn predict<F: Real>(&self, t: &mut Tape<F>, frame: &Frame, instruction: &str) -> Result<Var> {
        let (z, _) = self.model.latent(t, frame, instruction)?;
        self.head.forward(t, z)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.model.vlm.adapter_ids();
        ids.extend(self.head.ids());
        ids
    }
}

/// One forward pass; moves clipped to [-1,1], grip thresholded at 0.
pub fn act(vla: &Vla, params: &ParamStore<f32>, frame: &Frame, instruction: &str) -> Result<Action> {
    let mut t = Tape::with_trainable(params, &[]);
    let y = vla.predict(&mut t, frame, instruction)?;
    let v = t.value(y);
    let grip = if v[[0, 2]] > 0.0 { 1.0 } else { -1.0 };
    Ok(Action::new(v[[0, 0]], v[[0, 1]], grip).clipped())
}

#[derive(Debug, Clone, Copy)]
pub struct LabeledSample<'a> {
    pub frame: &'a Frame,
    pub instruction: &'a str,
    pub action: Action,
}

fn check_labels(trajs: &[LabeledTrajectory]) -> Result<()> {
    for tr in trajs {
        if tr.actions.len() + 1 != tr.clip.frames.len() {
            return Err(CareError::Contract(format!(
                "{}: {} actions for {} frames",
                tr.clip.name,
                tr.actions.len(),
                tr.clip.frames.len()
            )));
        }
    }
    Ok(())
}

/// Uniform over all labeled `(trajectory, t)` pairs.
pub fn sample_labeled<'a, R: Rng>(trajs: &'a [LabeledTrajectory], batch_size: usize, rng: &mut R) -> Result<Vec<LabeledSample<'a>>> {
    check_labels(trajs)?;
    let total: usize = trajs.iter().map(|t| t.actions.len()).sum();
    if total == 0 {
        return Err(CareError::Input("no labeled transitions".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut k = rng.random_range(0..total);
        let mut i = 0;
        while k >= trajs[i].actions.len() {
            k -= trajs[i].actions.len();
            i += 1;
        }
        out.push(labeled_sample(&trajs[i], k));
    }
    Ok(out)
}

pub fn labeled_sample(tr: &LabeledTrajectory, t: usize) -> LabeledSample<'_> {
    LabeledSample {
        frame: &tr.clip.frames[t],
        instruction: &tr.clip.instruction,
        action: tr.actions[t],
    }
}

fn action_row<F: Real>(a: Action) -> Array2<F> {
    Array2::from_shape_vec((1, ACTION_DIM), a.to_array().iter().map(|&x| F::lit(x as f64)).collect()).expect("3 values")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub step: u64,
    #[serde(rename = "L1")]
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub vla: Vla,
    pub params: ParamStore<f32>,
    pub opt: Adam<f32>,
    pub step: u64,
    trainable: Vec<bool>,
}

impl FinetuneState {
    pub fn new(vla: Vla, params: ParamStore<f32>, cfg: &FinetuneConfig) -> Self {
        let mut trainable = vec![false; params.len()];
        for id in vla.trainable_ids() {
            trainable[id.0] = true;
        }
        let opt = Adam::new(params.len(), cfg.lr as f32);
        Self { vla, params, opt, step: 0, trainable }
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }
}

/// Mean L1 over the three action dimensions and the batch.
pub fn finetune_step(state: &mut FinetuneState, batch: &[LabeledSample], cfg: &FinetuneConfig, exec: Exec) -> Result<FinetuneMetrics> {
    let n = batch.len();
    if n == 0 {
        return Err(CareError::Input("empty batch".into()));
    }
    let (vla, params, mask) = (&state.vla, &state.params, &state.trainable);
    let results = exec.try_map(n, |i| -> Result<(Grads<f32>, f64)> {
        let s = &batch[i];
        let mut t = Tape::with_trainable(params, mask);
        let y = vla.predict(&mut t, s.frame, s.instruction)?;
        let a = t.constant(action_row(s.action));
        let l = t.l1(y, a)?;
        Ok((t.backward(l)?, t.scalar(l) as f64))
    })?;
    let step = state.step + 1;
    let loss = results.iter().map(|r| r.1).sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(CareError::Training(format!("non-finite fine-tuning loss at step {step}")));
    }
    let mut grads = Grads::new(state.params.len());
    for (g, _) in &results {
        grads.merge(g);
    }
    grads.scale(1.0 / n as f32);
    let grad_norm = grads.clip_global_norm(cfg.grad_clip as f32) as f64;
    state.opt.step(&mut state.params, &grads);
    state.step = step;
    Ok(FinetuneMetrics { step, loss, grad_norm })
}

/// Mean L1 of raw head outputs over every transition of `trajs`.
pub fn mean_l1(vla: &Vla, params: &ParamStore<f32>, trajs: &[LabeledTrajectory], exec: Exec) -> Result<f64> {
    check_labels(trajs)?;
    let samples: Vec<LabeledSample> = trajs
        .iter()
        .flat_map(|tr| (0..tr.actions.len()).map(move |t| labeled_sample(tr, t)))
        .collect();
    if samples.is_empty() {
        return Err(CareError::Input("no labeled transitions".into()));
    }
    let losses = exec.try_map(samples.len(), |i| -> Result<f64> {
        let s = &samples[i];
        let mut t = Tape::with_trainable(params, &[]);
        let y = vla.predict(&mut t, s.frame, s.instruction)?;
        let a = t.constant(action_row(s.action));
        let l = t.l1(y, a)?;
        Ok(t.scalar(l) as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub const FINETUNE_METRICS_FILE: &str = "finetune_metrics.ndjson";
pub const VALIDATION_FILE: &str = "validation.json";
pub const VLA_DIR: &str = "vla";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub l1_start: f64,
    pub l1_end: f64,
    pub n_trajectories: usize,
}

/// Starting point for fine-tuning.
#[derive(Debug, Clone, Copy)]
pub enum Base<'a> {
    Pretrained(&'a Path),
    Scratch,
}

/// Trains on the finetune split and validates on the held-out probe split.
/// Writes `vla/` (stage `finetuned`), the step log and `validation.json`.
pub fn run_finetune(cfg: &FinetuneConfig, base: Base, data_root: &Path, out_dir: &Path, exec: Exec) -> Result<PathBuf> {
    cfg.validate()?;
    let (model, mut params, model_cfg, from) = match base {
        Base::Pretrained(dir) => {
            let (m, p, pcfg) = load_pretrained(dir)?;
            (m, p, pcfg.model, Some(dir.display().to_string()))
        }
        Base::Scratch => {
            let (m, p) = CareModel::init::<f32>(&cfg.model, derive_seed(cfg.seed, &[0x5c4a]))?;
            (m, p, cfg.model.clone(), None)
        }
    };
    let manifest = DatasetManifest::load(data_root)?;
    if manifest.image_size != model_cfg.image_size {
        return Err(CareError::Config(format!(
            "dataset images are {}px but the model expects {}",
            manifest.image_size, model_cfg.image_size
        )));
    }
    let train = load_labeled(data_root, SPLIT_FINETUNE, exec)?;
    if train.is_empty() {
        return Err(CareError::Input("empty labeled split".into()));
    }
    let val = load_labeled(data_root, SPLIT_PROBE, exec)?;

    let vla = Vla::attach(model, &mut params, cfg)?;
    let mut state = FinetuneState::new(vla, params, cfg);
    let val_start = if val.is_empty() { f64::NAN } else { mean_l1(&state.vla, &state.params, &val, exec)? };

    fs::create_dir_all(out_dir)?;
    let mut log = BufWriter::new(fs::File::create(out_dir.join(FINETUNE_METRICS_FILE))?);
    while state.step < cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xf17e, state.step]));
        let batch = sample_labeled(&train, cfg.batch_size, &mut rng)?;
        let m = finetune_step(&mut state, &batch, cfg, exec)?;
        serde_json::to_writer(&mut log, &m)?;
        log.write_all(b"\n")?;
        if m.step % 100 == 0 || m.step == 1 {
            log::info!("finetune step {} L1 {:.4} |g| {:.3}", m.step, m.loss, m.grad_norm);
        }
    }
    log.flush()?;
    let val_end = if val.is_empty() { f64::NAN } else { mean_l1(&state.vla, &state.params, &val, exec)? };
    write_json_atomic(
        &out_dir.join(VALIDATION_FILE),
        &Validation {
            l1_start: val_start,
            l1_end: val_end,
            n_trajectories: val.len(),
        },
    )?;
    let vcfg = VlaConfig {
        model: model_cfg,
        finetune: cfg.clone(),
        pretrained_from: from,
    };
    let dir = out_dir.join(VLA_DIR);
    Checkpoint::new(
        Stage::Finetuned,
        state.step,
        serde_json::to_value(&vcfg)?,
        state.vla.model.vocab.clone(),
        state.params,
        None,
    )
    .save(&dir)?;
    Ok(dir)
}

pub fn load_vla(dir: &Path) -> Result<(Vla, ParamStore<f32>, VlaConfig)> {
    let ck = Checkpoint::load(dir)?;
    if ck.manifest.stage != Stage::Finetuned {
        return Err(CareError::Input(format!("{}: not a fine-tuned checkpoint", dir.display())));
    }
    let cfg: VlaConfig = ck.config()?;
    let vla = Vla::bind(&ck.params, &cfg, ck.manifest.vocab.clone())?;
    Ok((vla, ck.params, cfg))
}
