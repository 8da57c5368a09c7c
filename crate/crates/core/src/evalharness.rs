//! Evaluation metrics: linear-probe action MSE, the shortcut diagnostic,
//! semantic label accuracy, closed-loop rollout success and comparison
//! tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{CareError, Result};
use crate::finetune::{act, Vla, VlaConfig};
use crate::nn::{Initializer, Linear};
use crate::parallel::Exec;
use crate::params::{Adam, ParamStore};
use crate::pretrain::{CareModel, PretrainConfig};
use crate::seed::derive_seed;
use crate::synthworld::dataset::{
    load_clip, load_labeled, write_json_atomic, DatasetManifest, LabeledTrajectory, VideoClip, SPLIT_PRETRAIN, SPLIT_PROBE,
};
use crate::synthworld::scene::{init_scene_for_label, N_LABELS};
use crate::synthworld::{check_success, render, step_scene, Action, Frame, SceneState, WorldConfig};
use crate::tape::Tape;

pub const LP_MSE: &str = "lp_mse";
pub const SPCFC: &str = "spcfc";
pub const SEMANTIC_ACCURACY: &str = "semantic_accuracy";
pub const ROLLOUT_SUCCESS: &str = "rollout_success";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric_name: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_digest: String,
    /// Binomial standard error for success rates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    /// Free-form run label used in comparison tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<String>,
}

impl MetricsReport {
    fn new(metric: &str, value: f64, n_samples: usize, seed: u64, config_digest: String) -> Result<Self> {
        let r = Self {
            metric_name: metric.into(),
            value,
            n_samples,
            seed,
            config_digest,
            std_error: None,
            run: None,
        };
        r.check_range()?;
        Ok(r)
    }

    pub fn check_range(&self) -> Result<()> {
        let ok = match self.metric_name.as_str() {
            LP_MSE => self.value >= 0.0,
            SPCFC | SEMANTIC_ACCURACY | ROLLOUT_SUCCESS => (0.0..=1.0).contains(&self.value),
            _ => self.value.is_finite(),
        };
        if ok && self.value.is_finite() {
            Ok(())
        } else {
            Err(CareError::Contract(format!("{} value {} outside its range", self.metric_name, self.value)))
        }
    }

    pub fn with_run(mut self, run: impl Into<String>) -> Self {
        self.run = Some(run.into());
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Short hex digest of any serialisable configuration.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("serialisable");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// A checkpoint of either stage, ready for feature extraction.
pub struct EvalModel {
    pub model: CareModel,
    pub params: ParamStore<f32>,
    pub config: serde_json::Value,
    pub vla: Option<Vla>,
}

impl EvalModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let vocab = ck.manifest.vocab.clone();
        let config = ck.manifest.config.clone();
        match ck.manifest.stage {
            Stage::Pretrained => {
                let cfg: PretrainConfig = ck.config()?;
                let model = CareModel::bind(&ck.params, &cfg.model, vocab)?;
                Ok(Self { model, params: ck.params, config, vla: None })
            }
            Stage::Finetuned => {
                let cfg: VlaConfig = ck.config()?;
                let vla = Vla::bind(&ck.params, &cfg, vocab)?;
                Ok(Self {
                    model: vla.model.clone(),
                    params: ck.params,
                    config,
                    vla: Some(vla),
                })
            }
        }
    }

    pub fn from_parts(model: CareModel, params: ParamStore<f32>, config: serde_json::Value) -> Self {
        Self { model, params, config, vla: None }
    }

    fn digest(&self, extra: &impl Serialize) -> String {
        digest_of(&(&self.config, extra))
    }

    /// Flattened `z` per `(frame, instruction)`.
    pub fn latents(&self, items: &[(&Frame, &str)], exec: Exec) -> Result<Vec<Vec<f64>>> {
        exec.try_map(items.len(), |i| {
            let z = self.model.latent_value(&self.params, items[i].0, items[i].1)?;
            Ok(z.iter().map(|&v| v as f64).collect())
        })
    }

    /// Mean-pooled projected vision tokens per frame.
    pub fn pooled_vision(&self, frames: &[&Frame], exec: Exec) -> Result<Vec<Vec<f64>>> {
        exec.try_map(frames.len(), |i| {
            let mut t = Tape::with_trainable(&self.params, &[]);
            let vf = self.model.vlm.vision(&mut t, frames[i])?;
            let m = t.value(vf.f_v).mean_axis(Axis(0)).expect("non-empty");
            Ok(m.iter().map(|&v| v as f64).collect())
        })
    }

    /// Flattened target-encoder features per frame.
    pub fn target_features(&self, frames: &[&Frame], exec: Exec) -> Result<Vec<Vec<f64>>> {
        exec.try_map(frames.len(), |i| {
            let f = self.model.vlm.target_features(&self.params, frames[i])?;
            Ok(f.iter().map(|&v| v as f64).collect())
        })
    }
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(CareError::Shape("ragged feature rows".into()));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

fn select_rows(m: &DMatrix<f64>, keep: &[bool], want: bool) -> DMatrix<f64> {
    let idx: Vec<usize> = (0..m.nrows()).filter(|&i| keep[i] == want).collect();
    m.select_rows(idx.iter())
}

fn col_stats(m: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = m.nrows().max(1) as f64;
    let mean = DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n);
    let std = DVector::from_fn(m.ncols(), |j, _| {
        let mu = mean[j];
        (m.column(j).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt()
    });
    (mean, std)
}

fn standardize(m: &DMatrix<f64>, mean: &DVector<f64>, std: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        let s = if std[j] > 1e-12 { std[j] } else { 1.0 };
        (m[(i, j)] - mean[j]) / s
    })
}

/// Affine least squares on standardised inputs with an L2 penalty on the
/// slopes only.
#[derive(Debug, Clone)]
pub struct Ridge {
    x_mean: DVector<f64>,
    x_std: DVector<f64>,
    y_mean: DVector<f64>,
    w: DMatrix<f64>,
    pub lambda: f64,
}

impl Ridge {
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() == 0 {
            return Err(CareError::Shape(format!("ridge: {} inputs for {} targets", x.nrows(), y.nrows())));
        }
        let (x_mean, x_std) = col_stats(x);
        let (y_mean, _) = col_stats(y);
        let xs = standardize(x, &x_mean, &x_std);
        let yc = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] - y_mean[j]);
        let xt = xs.transpose();
        let mut a = &xt * &xs;
        for i in 0..a.nrows() {
            a[(i, i)] += lambda.max(1e-10);
        }
        let b = &xt * &yc;
        let chol = a
            .cholesky()
            .ok_or_else(|| CareError::Training("ridge system is not positive definite".into()))?;
        Ok(Self { x_mean, x_std, y_mean, w: chol.solve(&b), lambda })
    }

    /// Picks the penalty on a held-out tail of the rows, then refits on all.
    pub fn fit_cv(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        let n_val = (n / 5).max(1);
        if n < 10 {
            return Self::fit(x, y, 1e-6 * n as f64);
        }
        let keep: Vec<bool> = (0..n).map(|i| i < n - n_val).collect();
        let (xt, yt) = (select_rows(x, &keep, true), select_rows(y, &keep, true));
        let (xv, yv) = (select_rows(x, &keep, false), select_rows(y, &keep, false));
        let mut best = (f64::INFINITY, 0.0);
        for e in [-8, -6, -4, -3, -2, -1, 0, 1, 2, 3, 4] {
            let lambda = 10f64.powi(e) * (n - n_val) as f64;
            let m = Self::fit(&xt, &yt, lambda)?;
            let err = mse(&m.predict(&xv), &yv);
            if err < best.0 {
                best = (err, lambda);
            }
        }
        Self::fit(x, y, best.1)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let xs = standardize(x, &self.x_mean, &self.x_std);
        let mut out = xs * &self.w;
        for mut row in out.row_iter_mut() {
            row += self.y_mean.transpose();
        }
        out
    }
}

pub fn mse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().map(|v| v * v).sum::<f64>() / a.len().max(1) as f64
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-24 || sbb <= 1e-24 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// One-hidden-layer GELU network trained full-batch with Adam.
pub struct Mlp {
    store: ParamStore<f32>,
    l1: Linear,
    l2: Linear,
}

pub enum MlpTask<'a> {
    Regression(&'a Array2<f32>),
    Classify(&'a [usize], usize),
}

impl Mlp {
    pub fn train(x: &Array2<f32>, task: MlpTask, hidden: usize, epochs: usize, lr: f64, seed: u64) -> Result<Self> {
        let out_dim = match &task {
            MlpTask::Regression(y) => y.ncols(),
            MlpTask::Classify(_, k) => *k,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Initializer { store: &mut store, rng: &mut rng };
        let l1 = Linear::new(&mut b, "mlp.l1", x.ncols(), hidden)?;
        let l2 = Linear::new(&mut b, "mlp.l2", hidden, out_dim)?;
        let mut opt = Adam::new(store.len(), lr as f32);
        let mut mlp = Self { store, l1, l2 };
        for _ in 0..epochs {
            let grads = {
                let mut t = Tape::new(&mlp.store);
                let xv = t.constant(x.clone());
                let out = mlp.forward(&mut t, xv)?;
                let loss = match &task {
                    MlpTask::Regression(y) => {
                        let yv = t.constant((*y).clone());
                        t.mse(out, yv)?
                    }
                    MlpTask::Classify(labels, _) => t.cross_entropy(out, labels)?,
                };
                t.backward(loss)?
            };
            opt.step(&mut mlp.store, &grads);
        }
        Ok(mlp)
    }

    fn forward(&self, t: &mut Tape<f32>, x: crate::tape::Var) -> Result<crate::tape::Var> {
        let h = self.l1.forward(t, x)?;
        let h = t.gelu(h);
        self.l2.forward(t, h)
    }

    pub fn predict(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        let mut t = Tape::with_trainable(&self.store, &[]);
        let xv = t.constant(x.clone());
        let out = self.forward(&mut t, xv)?;
        Ok(t.value(out).clone())
    }
}

fn to_array(m: &DMatrix<f64>) -> Array2<f32> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)] as f32)
}

fn from_array(a: &Array2<f32>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]] as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    Affine,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Fraction of trajectories used to fit the probe.
    pub train_fraction: f64,
    pub seed: u64,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Affine,
            train_fraction: 0.7,
            seed: 0,
            mlp_hidden: 64,
            mlp_epochs: 400,
            mlp_lr: 1e-2,
        }
    }
}

pub const MIN_PROBE_TRANSITIONS: usize = 200;

/// Test MSE of a probe from `x` to per-dimension z-scored `y`; the
/// normalisation uses training rows only.
pub fn lp_mse_features(x: &DMatrix<f64>, y: &DMatrix<f64>, train: &[bool], cfg: &ProbeConfig) -> Result<f64> {
    if x.nrows() < MIN_PROBE_TRANSITIONS {
        return Err(CareError::Input(format!(
            "LP-MSE needs at least {MIN_PROBE_TRANSITIONS} transitions, got {}",
            x.nrows()
        )));
    }
    let (ytr, yte) = (select_rows(y, train, true), select_rows(y, train, false));
    let (xtr, xte) = (select_rows(x, train, true), select_rows(x, train, false));
    if ytr.nrows() == 0 || yte.nrows() == 0 {
        return Err(CareError::Input("LP-MSE split left an empty side".into()));
    }
    let (mu, sd) = col_stats(&ytr);
    let (ytr, yte) = (standardize(&ytr, &mu, &sd), standardize(&yte, &mu, &sd));
    let pred = match cfg.kind {
        ProbeKind::Affine => Ridge::fit_cv(&xtr, &ytr)?.predict(&xte),
        ProbeKind::Mlp => {
            let (xm, xs) = col_stats(&xtr);
            let (a, b) = (to_array(&standardize(&xtr, &xm, &xs)), to_array(&standardize(&xte, &xm, &xs)));
            let y = to_array(&ytr);
            let mlp = Mlp::train(&a, MlpTask::Regression(&y), cfg.mlp_hidden, cfg.mlp_epochs, cfg.mlp_lr, cfg.seed)?;
            from_array(&mlp.predict(&b)?)
        }
    };
    Ok(mse(&pred, &yte))
}

/// Trajectory-level split: a seeded `train_fraction` of trajectories.
pub fn trajectory_split(n_traj: usize, train_fraction: f64, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n_traj).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5b1d])));
    let n_train = ((n_traj as f64 * train_fraction).round() as usize).clamp(1.min(n_traj), n_traj.saturating_sub(1).max(1));
    let mut train = vec![false; n_traj];
    for &i in &order[..n_train.min(n_traj)] {
        train[i] = true;
    }
    train
}

pub fn lp_mse(em: &EvalModel, data: &[LabeledTrajectory], cfg: &ProbeConfig, exec: Exec) -> Result<MetricsReport> {
    let traj_train = trajectory_split(data.len(), cfg.train_fraction, cfg.seed);
    let mut items = Vec::new();
    let mut actions = Vec::new();
    let mut train = Vec::new();
    for (k, tr) in data.iter().enumerate() {
        for (t, a) in tr.actions.iter().enumerate() {
            items.push((&tr.clip.frames[t], tr.clip.instruction.as_str()));
            actions.push(a.to_array().iter().map(|&v| v as f64).collect::<Vec<_>>());
            train.push(traj_train[k]);
        }
    }
    if items.len() < MIN_PROBE_TRANSITIONS {
        return Err(CareError::Input(format!(
            "LP-MSE needs at least {MIN_PROBE_TRANSITIONS} transitions, got {}",
            items.len()
        )));
    }
    let x = to_matrix(&em.latents(&items, exec)?)?;
    let y = to_matrix(&actions)?;
    let v = lp_mse_features(&x, &y, &train, cfg)?;
    MetricsReport::new(LP_MSE, v, items.len(), cfg.seed, em.digest(cfg))
}

pub const MIN_SPCFC_TRANSITIONS: usize = 500;

/// Mean absolute Pearson correlation between an affine readout of `z`
/// (fitted on the `train` rows) and the true features on the other rows.
/// Returns the value and the number of constant feature dimensions that were
/// left out.
pub fn spcfc_features(z: &DMatrix<f64>, f_next: &DMatrix<f64>, train: &[bool]) -> Result<(f64, usize)> {
    if z.nrows() < MIN_SPCFC_TRANSITIONS {
        return Err(CareError::Input(format!(
            "S-PCFC needs at least {MIN_SPCFC_TRANSITIONS} transitions, got {}",
            z.nrows()
        )));
    }
    let g = Ridge::fit_cv(&select_rows(z, train, true), &select_rows(f_next, train, true))?;
    let pred = g.predict(&select_rows(z, train, false));
    let truth = select_rows(f_next, train, false);
    let mut sum = 0.0;
    let mut used = 0usize;
    for j in 0..truth.ncols() {
        let tj: Vec<f64> = truth.column(j).iter().copied().collect();
        let (m, _) = (tj.iter().sum::<f64>() / tj.len() as f64, ());
        if tj.iter().all(|v| (v - m).abs() < 1e-12) {
            continue;
        }
        let pj: Vec<f64> = pred.column(j).iter().copied().collect();
        sum += pearson(&pj, &tj).map_or(0.0, f64::abs);
        used += 1;
    }
    let excluded = truth.ncols() - used;
    if excluded > 0 {
        log::info!("S-PCFC: {excluded} constant feature dimensions excluded");
    }
    if used == 0 {
        return Err(CareError::Input("S-PCFC: every feature dimension is constant".into()));
    }
    Ok((sum / used as f64, excluded))
}

pub fn spcfc(em: &EvalModel, clips: &[VideoClip], seed: u64, exec: Exec) -> Result<MetricsReport> {
    let traj_train = trajectory_split(clips.len(), 0.5, seed);
    let mut items = Vec::new();
    let mut next = Vec::new();
    let mut train = Vec::new();
    for (k, c) in clips.iter().enumerate() {
        for t in 0..c.frames.len().saturating_sub(1) {
            items.push((&c.frames[t], c.instruction.as_str()));
            next.push(&c.frames[t + 1]);
            train.push(traj_train[k]);
        }
    }
    if items.len() < MIN_SPCFC_TRANSITIONS {
        return Err(CareError::Input(format!(
            "S-PCFC needs at least {MIN_SPCFC_TRANSITIONS} transitions, got {}",
            items.len()
        )));
    }
    let z = to_matrix(&em.latents(&items, exec)?)?;
    let f = to_matrix(&em.target_features(&next, exec)?)?;
    let (v, _) = spcfc_features(&z, &f, &train)?;
    MetricsReport::new(SPCFC, v.clamp(0.0, 1.0), items.len(), seed, em.digest(&("spcfc", seed)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticVariant {
    /// Initial-frame features.
    Initial,
    /// Initial-frame features repeated ten times.
    InitialRepeated,
    /// Initial frame and the nine following frames.
    InitialFrames,
    /// Initial frame and nine latent actions.
    InitialLatents,
}

impl std::str::FromStr for SemanticVariant {
    type Err = CareError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => Ok(Self::Initial),
            "initial_repeated" => Ok(Self::InitialRepeated),
            "initial_frames" => Ok(Self::InitialFrames),
            "initial_latents" => Ok(Self::InitialLatents),
            _ => Err(CareError::Config(format!("unknown semantic variant `{s}`"))),
        }
    }
}

pub const SEMANTIC_STEPS: usize = 10;
pub const MIN_SEMANTIC_LABELS: usize = 20;

/// Per-trajectory pooled frame features (frames 0..10), pooled latents
/// (`z_0..z_8`) and labels.
pub struct SemanticFeatures {
    pub frames: Vec<Vec<Vec<f64>>>,
    pub latents: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<usize>,
    pub digest: String,
}

pub fn semantic_features(em: &EvalModel, clips: &[VideoClip], exec: Exec) -> Result<SemanticFeatures> {
    if let Some(c) = clips.iter().find(|c| c.frames.len() < SEMANTIC_STEPS) {
        return Err(CareError::Input(format!("{}: fewer than {SEMANTIC_STEPS} frames", c.name)));
    }
    let mut labels: Vec<usize> = clips.iter().map(|c| c.task_label).collect();
    let distinct = {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < MIN_SEMANTIC_LABELS {
        return Err(CareError::Input(format!(
            "semantic accuracy needs {MIN_SEMANTIC_LABELS} task labels, data has {distinct}"
        )));
    }
    let frames: Vec<&Frame> = clips.iter().flat_map(|c| c.frames[..SEMANTIC_STEPS].iter()).collect();
    let pooled = em.pooled_vision(&frames, exec)?;
    let items: Vec<(&Frame, &str)> = clips
        .iter()
        .flat_map(|c| c.frames[..SEMANTIC_STEPS - 1].iter().map(move |f| (f, c.instruction.as_str())))
        .collect();
    let z = em.latents(&items, exec)?;
    let d = em.model.cfg().d_l;
    let z_pooled: Vec<Vec<f64>> = z
        .iter()
        .map(|flat| (0..d).map(|j| flat.iter().skip(j).step_by(d).sum::<f64>() / (flat.len() / d) as f64).collect())
        .collect();
    Ok(SemanticFeatures {
        frames: pooled.chunks(SEMANTIC_STEPS).map(<[_]>::to_vec).collect(),
        latents: z_pooled.chunks(SEMANTIC_STEPS - 1).map(<[_]>::to_vec).collect(),
        labels: std::mem::take(&mut labels),
        digest: em.digest(&"semantic"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Permute labels before training (chance-level calibration).
    pub shuffle_labels: bool,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.5,
            hidden: 128,
            epochs: 300,
            lr: 3e-3,
            shuffle_labels: false,
        }
    }
}

fn variant_input(f: &SemanticFeatures, i: usize, v: SemanticVariant) -> Vec<f64> {
    let first = &f.frames[i][0];
    let parts: Vec<&Vec<f64>> = match v {
        SemanticVariant::Initial => vec![first],
        SemanticVariant::InitialRepeated => vec![first; SEMANTIC_STEPS],
        SemanticVariant::InitialFrames => f.frames[i].iter().collect(),
        SemanticVariant::InitialLatents => std::iter::once(first).chain(f.latents[i].iter()).collect(),
    };
    parts.into_iter().flatten().copied().collect()
}

/// Held-out accuracy of a two-layer classifier from the variant's inputs to
/// the task label.
pub fn semantic_accuracy_features(f: &SemanticFeatures, variant: SemanticVariant, cfg: &SemanticConfig) -> Result<MetricsReport> {
    let n = f.labels.len();
    let mut labels = f.labels.clone();
    if cfg.shuffle_labels {
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5f1e])));
    }
    let train = trajectory_split(n, cfg.train_fraction, cfg.seed);
    let x = to_matrix(&(0..n).map(|i| variant_input(f, i, variant)).collect::<Vec<_>>())?;
    let (xtr, xte) = (select_rows(&x, &train, true), select_rows(&x, &train, false));
    let (m, s) = col_stats(&xtr);
    let (xtr, xte) = (to_array(&standardize(&xtr, &m, &s)), to_array(&standardize(&xte, &m, &s)));
    let ytr: Vec<usize> = (0..n).filter(|&i| train[i]).map(|i| labels[i]).collect();
    let yte: Vec<usize> = (0..n).filter(|&i| !train[i]).map(|i| labels[i]).collect();
    let mlp = Mlp::train(&xtr, MlpTask::Classify(&ytr, N_LABELS), cfg.hidden, cfg.epochs, cfg.lr, cfg.seed)?;
    let logits = mlp.predict(&xte)?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(&yte)
        .filter(|(row, &y)| {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                .0;
            arg == y
        })
        .count();
    let acc = correct as f64 / yte.len().max(1) as f64;
    MetricsReport::new(SEMANTIC_ACCURACY, acc, yte.len(), cfg.seed, digest_of(&(&f.digest, variant, cfg)))
}

pub fn semantic_accuracy(em: &EvalModel, clips: &[VideoClip], variant: SemanticVariant, cfg: &SemanticConfig, exec: Exec) -> Result<MetricsReport> {
    semantic_accuracy_features(&semantic_features(em, clips, exec)?, variant, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOutcome {
    pub success_rate: f64,
    pub std_error: f64,
    pub n_episodes: usize,
}

pub fn binomial_std_error(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

/// Episode `i` starts from task label `i mod 60` on a fresh scene; the
/// policy acts for at most `horizon` steps and the episode ends at the first
/// success.
pub fn rollouts<P>(policy: P, n_episodes: usize, seed: u64, horizon: usize, world: &WorldConfig, exec: Exec) -> Result<RolloutOutcome>
where
    P: Fn(&SceneState, &Frame, &str) -> Result<Action> + Sync,
{
    let wins = exec.try_map(n_episodes, |i| -> Result<bool> {
        let (mut s, instruction, _) = init_scene_for_label(derive_seed(seed, &[0xe915, i as u64]), i % N_LABELS)?;
        for _ in 0..horizon {
            let frame = render(&s, world);
            let a = policy(&s, &frame, &instruction)?;
            s = step_scene(&s, a, world);
            if check_success(&s, world) {
                return Ok(true);
            }
        }
        Ok(false)
    })?;
    let k = wins.iter().filter(|&&w| w).count();
    let p = if n_episodes == 0 { 0.0 } else { k as f64 / n_episodes as f64 };
    Ok(RolloutOutcome {
        success_rate: p,
        std_error: binomial_std_error(p, n_episodes),
        n_episodes,
    })
}

pub fn rollout_success(em: &EvalModel, n_episodes: usize, seed: u64, horizon: usize, exec: Exec) -> Result<MetricsReport> {
    let vla = em
        .vla
        .as_ref()
        .ok_or_else(|| CareError::Input("rollouts need a fine-tuned checkpoint".into()))?;
    let world = WorldConfig::with_image_size(em.model.cfg().image_size);
    let out = rollouts(|_, f, instr| act(vla, &em.params, f, instr), n_episodes, seed, horizon, &world, exec)?;
    let mut r = MetricsReport::new(ROLLOUT_SUCCESS, out.success_rate, n_episodes, seed, em.digest(&("rollout", seed, horizon)))?;
    r.std_error = Some(out.std_error);
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    LpMse,
    Spcfc,
    Semantic,
    Rollout,
}

impl std::str::FromStr for MetricKind {
    type Err = CareError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lpmse" | "lp_mse" => Ok(Self::LpMse),
            "spcfc" => Ok(Self::Spcfc),
            "semantic" | "semantic_accuracy" => Ok(Self::Semantic),
            "rollout" | "rollout_success" => Ok(Self::Rollout),
            other => Err(CareError::Config(format!(
                "unknown metric `{other}` (expected lpmse, spcfc, semantic or rollout)"
            ))),
        }
    }
}

/// Settings for a batch of metrics on one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub probe: ProbeConfig,
    pub semantic: SemanticConfig,
    pub semantic_variants: Vec<SemanticVariant>,
    /// Pretrain-split trajectories used for the semantic classifier.
    pub semantic_trajectories: usize,
    /// Pretrain-split trajectories used for S-PCFC.
    pub spcfc_trajectories: usize,
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            probe: ProbeConfig::default(),
            semantic: SemanticConfig::default(),
            semantic_variants: vec![
                SemanticVariant::Initial,
                SemanticVariant::InitialRepeated,
                SemanticVariant::InitialFrames,
                SemanticVariant::InitialLatents,
            ],
            semantic_trajectories: 600,
            spcfc_trajectories: 60,
            episodes: 100,
            horizon: 24,
        }
    }
}

pub fn variant_name(v: SemanticVariant) -> &'static str {
    match v {
        SemanticVariant::Initial => "initial",
        SemanticVariant::InitialRepeated => "initial_repeated",
        SemanticVariant::InitialFrames => "initial_frames",
        SemanticVariant::InitialLatents => "initial_latents",
    }
}

/// Computes the requested metrics for the checkpoint at `checkpoint` and
/// writes one report per metric (per variant for semantic accuracy) into
/// `out_dir`. Returns the written paths.
pub fn run_eval(cfg: &EvalConfig, checkpoint: &Path, data_root: &Path, metrics: &[MetricKind], out_dir: &Path, exec: Exec) -> Result<Vec<PathBuf>> {
    if metrics.is_empty() {
        return Err(CareError::Config("no metrics requested".into()));
    }
    let em = EvalModel::load(checkpoint)?;
    if metrics.contains(&MetricKind::Rollout) && em.vla.is_none() {
        return Err(CareError::Input(format!("{}: rollouts need a fine-tuned checkpoint", checkpoint.display())));
    }
    let manifest = DatasetManifest::load(data_root)?;
    if manifest.image_size != em.model.cfg().image_size {
        return Err(CareError::Config(format!(
            "dataset images are {}px but the model expects {}",
            manifest.image_size,
            em.model.cfg().image_size
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut save = |name: String, r: &MetricsReport| -> Result<()> {
        let p = out_dir.join(format!("{name}.json"));
        r.save(&p)?;
        written.push(p);
        Ok(())
    };
    let pretrain_clips = |n: usize| -> Result<Vec<VideoClip>> {
        let names = manifest.split(SPLIT_PRETRAIN)?;
        let names = &names[..n.min(names.len())];
        exec.try_map(names.len(), |i| load_clip(data_root, &names[i], &manifest))
    };
    for m in metrics {
        match m {
            MetricKind::LpMse => {
                let probe = load_labeled(data_root, SPLIT_PROBE, exec)?;
                let pc = ProbeConfig { seed: cfg.seed, ..cfg.probe.clone() };
                save(LP_MSE.into(), &lp_mse(&em, &probe, &pc, exec)?)?;
            }
            MetricKind::Spcfc => {
                save(SPCFC.into(), &spcfc(&em, &pretrain_clips(cfg.spcfc_trajectories)?, cfg.seed, exec)?)?;
            }
            MetricKind::Semantic => {
                let f = semantic_features(&em, &pretrain_clips(cfg.semantic_trajectories)?, exec)?;
                let sc = SemanticConfig { seed: cfg.seed, ..cfg.semantic.clone() };
                for &v in &cfg.semantic_variants {
                    let r = semantic_accuracy_features(&f, v, &sc)?.with_run(variant_name(v));
                    save(format!("{SEMANTIC_ACCURACY}.{}", variant_name(v)), &r)?;
                }
            }
            MetricKind::Rollout => {
                save(ROLLOUT_SUCCESS.into(), &rollout_success(&em, cfg.episodes, cfg.seed, cfg.horizon, exec)?)?;
            }
        }
    }
    Ok(written)
}

/// CSV and SVG bar chart of reports sharing one metric, ordered by config
/// digest (then run label).
pub fn compare_runs(reports: &[MetricsReport]) -> Result<(String, String)> {
    if reports.len() < 2 {
        return Err(CareError::Input("comparison needs at least two reports".into()));
    }
    let metric = &reports[0].metric_name;
    if let Some(r) = reports.iter().find(|r| &r.metric_name != metric) {
        return Err(CareError::Input(format!("mixed metrics `{metric}` and `{}`", r.metric_name)));
    }
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.config_digest, &a.run).cmp(&(&b.config_digest, &b.run)));
    let name = |r: &MetricsReport| r.run.clone().unwrap_or_else(|| r.config_digest.clone());

    let mut csv = String::from("name,value,n,seed\n");
    for r in &sorted {
        writeln!(csv, "{},{},{},{}", name(r), r.value, r.n_samples, r.seed).expect("string write");
    }

    let rows: Vec<(String, f64, Option<f64>)> = sorted.iter().map(|r| (name(r), r.value, r.std_error)).collect();
    Ok((csv, bar_chart(metric, &rows)))
}

/// Minimal SVG bar chart with optional error bars.
pub fn bar_chart(title: &str, rows: &[(String, f64, Option<f64>)]) -> String {
    let (w, h, pad) = (120 * rows.len().max(1) + 80, 320usize, 40usize);
    let max = rows
        .iter()
        .map(|r| r.1 + r.2.unwrap_or(0.0))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale = (h - 2 * pad) as f64 / max;
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2, escape(title)).unwrap();
    let base = h - pad;
    writeln!(svg, r#"<line x1="{pad}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, w - pad / 2).unwrap();
    for (i, (label, v, se)) in rows.iter().enumerate() {
        let x = pad + 20 + i * 120;
        let bh = (v.max(0.0) * scale).round() as usize;
        writeln!(svg, r##"<rect x="{x}" y="{}" width="80" height="{bh}" fill="#4a78b5"/>"##, base - bh).unwrap();
        if let Some(se) = se {
            let (lo, hi) = (((v - se).max(0.0) * scale) as usize, ((v + se) * scale) as usize);
            writeln!(svg, r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, x + 40, base - lo, x + 40, base - hi).unwrap();
        }
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{v:.4}</text>"#, x + 40, base - bh - 4).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x + 40, base + 14, escape(label)).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Minimal SVG line chart, one polyline per series.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (640usize, 360usize, 50usize);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let sx = (w - 2 * pad) as f64 / (x1 - x0).max(1e-12);
    let sy = (h - 2 * pad) as f64 / (y1 - y0).max(1e-12);
    let colors = ["#4a78b5", "#d9822b", "#3a9b5c", "#b54a6e", "#7a5cc2"];
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2, escape(title)).unwrap();
    writeln!(svg, r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2 * pad, h - 2 * pad).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y1:.4}</text>"#, pad - 4, pad + 4).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, pad - 4, h - pad).unwrap();
    for (k, (name, s)) in series.iter().enumerate() {
        let c = colors[k % colors.len()];
        let path: Vec<String> = s
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", pad as f64 + (x - x0) * sx, (h - pad) as f64 - (y - y0) * sy))
            .collect();
        writeln!(svg, r#"<polyline fill="none" stroke="{c}" points="{}"/>"#, path.join(" ")).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" fill="{c}">{}</text>"#, w - pad + 4 - 40, pad + 14 * (k + 1), escape(name)).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn ridge_recovers_affine_map() {
        let x = gaussian(300, 5, 1);
        let w = gaussian(5, 2, 2);
        let y = DMatrix::from_fn(300, 2, |i, j| (x.row(i) * w.column(j))[(0, 0)] + 3.0 * j as f64 - 1.0);
        let r = Ridge::fit_cv(&x, &y).unwrap();
        assert!(mse(&r.predict(&x), &y) < 1e-8);
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let x = gaussian(50, 3, 3);
        let y = gaussian(50, 1, 4);
        let lambda = 7.0;
        let r = Ridge::fit(&x, &y, lambda).unwrap();
        // Independent oracle: augment with a bias column, standardise by hand
        // and solve the penalised normal equations with the bias unpenalised.
        let (m, s) = col_stats(&x);
        let xs = standardize(&x, &m, &s);
        let a = DMatrix::from_fn(50, 4, |i, j| if j == 3 { 1.0 } else { xs[(i, j)] });
        let mut g = a.transpose() * &a;
        for i in 0..3 {
            g[(i, i)] += lambda;
        }
        let beta = g.lu().solve(&(a.transpose() * &y)).unwrap();
        let oracle = &a * beta;
        assert!((r.predict(&x) - oracle).abs().max() < 1e-9);
    }

    #[test]
    fn pearson_oracle_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&a, &[1.0, 1.0, 1.0, 1.0]).is_none());
        // cov = 0 by symmetry
        assert!(pearson(&[-1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn trajectory_split_is_seeded_and_sized() {
        let a = trajectory_split(100, 0.7, 5);
        assert_eq!(a, trajectory_split(100, 0.7, 5));
        assert_ne!(a, trajectory_split(100, 0.7, 6));
        assert_eq!(a.iter().filter(|&&b| b).count(), 70);
    }

    #[test]
    fn lp_mse_needs_enough_transitions() {
        let x = gaussian(100, 3, 1);
        let e = lp_mse_features(&x, &x, &vec![true; 100], &ProbeConfig::default()).unwrap_err();
        assert!(matches!(e, CareError::Input(_)));
    }

    #[test]
    fn spcfc_skips_constant_dimensions() {
        let z = gaussian(600, 4, 1);
        let mut f = z.clone().insert_column(4, 2.5);
        f[(0, 4)] = 2.5;
        let train: Vec<bool> = (0..600).map(|i| i % 2 == 0).collect();
        let (v, excluded) = spcfc_features(&z, &f, &train).unwrap();
        assert_eq!(excluded, 1);
        assert!(v > 0.99);
    }

    #[test]
    fn mlp_fits_xor() {
        let x = Array2::from_shape_vec((4, 2), vec![0., 0., 0., 1., 1., 0., 1., 1.]).unwrap();
        let y = [0usize, 1, 1, 0];
        let m = Mlp::train(&x, MlpTask::Classify(&y, 2), 16, 500, 3e-2, 0).unwrap();
        let p = m.predict(&x).unwrap();
        for (i, &c) in y.iter().enumerate() {
            assert!(p[[i, c]] > p[[i, 1 - c]]);
        }
    }

    #[test]
    fn binomial_error_oracle() {
        assert!((binomial_std_error(0.5, 100) - 0.05).abs() < 1e-12);
        assert_eq!(binomial_std_error(0.0, 10), 0.0);
    }

    fn report(name: &str, value: f64, digest: &str) -> MetricsReport {
        MetricsReport::new(name, value, 10, 0, digest.into()).unwrap()
    }

    #[test]
    fn report_range_is_enforced() {
        assert!(MetricsReport::new(SPCFC, 1.5, 1, 0, "x".into()).is_err());
        assert!(MetricsReport::new(LP_MSE, -0.1, 1, 0, "x".into()).is_err());
        assert!(MetricsReport::new(LP_MSE, f64::NAN, 1, 0, "x".into()).is_err());
    }

    #[test]
    fn compare_runs_is_order_independent() {
        let a = report(LP_MSE, 0.5, "bb").with_run("multi");
        let b = report(LP_MSE, 0.7, "aa").with_run("frame_only");
        let (c1, s1) = compare_runs(&[a.clone(), b.clone()]).unwrap();
        let (c2, s2) = compare_runs(&[b, a]).unwrap();
        assert_eq!((c1.clone(), s1.clone()), (c2, s2));
        assert_eq!(c1, "name,value,n,seed\nframe_only,0.7,10,0\nmulti,0.5,10,0\n");
        assert!(s1.starts_with("<svg") && s1.contains("multi"));
    }

    #[test]
    fn compare_runs_rejects_mixed_metrics() {
        let e = compare_runs(&[report(LP_MSE, 0.5, "a"), report(SPCFC, 0.5, "b")]).unwrap_err();
        assert!(matches!(e, CareError::Input(_)));
    }

    #[test]
    fn report_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = report(ROLLOUT_SUCCESS, 0.25, "d");
        r.std_error = Some(0.1);
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        assert_eq!(MetricsReport::load(&p).unwrap(), r);
    }
}
