//! Stage-1 training: video-text transitions without actions, the frame and
//! point objectives, EMA targets, checkpoints and a per-step metrics log.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{CareError, Result};
use crate::latentheads::{frame_loss, point_loss, points_array, uwl_combine, Heads};
use crate::parallel::Exec;
use crate::params::{Adam, Grads, ParamStore};
use crate::real::Real;
use crate::seed::derive_seed;
use crate::synthworld::dataset::{load_clips, DatasetManifest, VideoClip, SPLIT_PRETRAIN};
use crate::synthworld::{all_instructions, Frame};
use crate::tape::{Tape, Var};
use crate::textfront::{tokenize, Prompt, TokenizedPrompt, Vocab};
use crate::vlmcore::{check_collapse, min_feature_std, FrameContext, ModelConfig, Vlm, TARGET_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Multi,
    FrameOnly,
    PointOnly,
}

impl Objective {
    pub fn uses_frame(self) -> bool {
        self != Objective::PointOnly
    }

    pub fn uses_point(self) -> bool {
        self != Objective::FrameOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Multi => "multi",
            Objective::FrameOnly => "frame_only",
            Objective::PointOnly => "point_only",
        }
    }
}

impl FromStr for Objective {
    type Err = CareError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Objective::Multi),
            "frame_only" => Ok(Objective::FrameOnly),
            "point_only" => Ok(Objective::PointOnly),
            _ => Err(CareError::Config(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub objective: Objective,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub grad_clip: f64,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 5000,
            lr: 3e-4,
            objective: Objective::Multi,
            seed: 0,
            checkpoint_every: 500,
            grad_clip: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CareError::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CareError::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(CareError::Config(format!("grad_clip {} must be positive", self.grad_clip)));
        }
        self.model.validate()
    }
}

/// Backbone, heads and vocabulary of a pretrained model.
#[derive(Debug, Clone)]
pub struct CareModel {
    pub vlm: Vlm,
    pub heads: Heads,
    pub vocab: Vocab,
}

pub struct SampleLosses {
    pub l_f: Option<Var>,
    pub l_p: Option<Var>,
    pub loss: Var,
}

impl CareModel {
    /// Fresh weights over the world's closed instruction vocabulary.
    pub fn init<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let vocab = Vocab::build(&all_instructions())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        let vlm = Vlm::init(&mut store, cfg, vocab.len(), &mut rng)?;
        let heads = Heads::init(&mut store, cfg, &mut rng)?;
        Ok((Self { vlm, heads, vocab }, store))
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig, vocab: Vocab) -> Result<Self> {
        Ok(Self {
            vlm: Vlm::bind(store, cfg)?,
            heads: Heads::bind(store, cfg)?,
            vocab,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.vlm.cfg
    }

    pub fn tokenize(&self, instruction: &str) -> Result<TokenizedPrompt> {
        tokenize(
            &Prompt {
                text: instruction.to_string(),
                n_latent: self.cfg().n_latent,
            },
            &self.vocab,
        )
    }

    /// `z` for the current frame and instruction, plus projected vision tokens.
    pub fn latent<F: Real>(&self, t: &mut Tape<F>, frame: &Frame, instruction: &str) -> Result<(Var, Var)> {
        let tokens = self.tokenize(instruction)?;
        let (z, vf) = self.vlm.latent(t, frame, &tokens)?;
        Ok((z, vf.f_v))
    }

    /// Inference-only `z`.
    pub fn latent_value<F: Real>(&self, store: &ParamStore<F>, frame: &Frame, instruction: &str) -> Result<Array2<F>> {
        let mut t = Tape::with_trainable(store, &[]);
        let (z, _) = self.latent(&mut t, frame, instruction)?;
        Ok(t.value(z).clone())
    }

    /// Per-transition objective. `target_next` is required whenever the
    /// frame task is active.
    pub fn sample_loss<F: Real>(
        &self,
        t: &mut Tape<F>,
        tr: &Transition,
        target_next: Option<&Array2<F>>,
        objective: Objective,
    ) -> Result<SampleLosses> {
        let cfg = self.cfg();
        let (z, f_v) = self.latent(t, tr.frame_t, tr.instruction)?;
        let l_f = if objective.uses_frame() {
            let target = target_next.ok_or_else(|| CareError::Contract("frame objective needs targets".into()))?;
            let context = match cfg.frame_context {
                FrameContext::Current => f_v,
                FrameContext::Zeroed => z,
            };
            let z_f = self.heads.frame_xattn.forward(t, z, context)?;
            let f_hat = self.heads.frame.forward(t, z_f, cfg.n_heads)?;
            let y = t.constant(target.clone());
            Some(frame_loss(t, f_hat, y)?)
        } else {
            None
        };
        let l_p = if objective.uses_point() {
            let k_t = t.constant(points_array(tr.k_t));
            let e = self.heads.point.embed_points(t, k_t, cfg.image_size)?;
            let z_k = self.heads.point.fuse(t, e, z)?;
            let k_hat = self.heads.point.decode(t, z_k, e, k_t, cfg.image_size)?;
            let k_next = t.constant(points_array(tr.k_next));
            Some(point_loss(t, k_hat, k_next, cfg.image_size)?)
        } else {
            None
        };
        let loss = match (l_f, l_p) {
            (Some(f), Some(p)) => {
                let s1 = t.param(self.heads.uwl.s1);
                let s2 = t.param(self.heads.uwl.s2);
                uwl_combine(t, f, p, s1, s2)?
            }
            (Some(f), None) => f,
            (None, Some(p)) => p,
            (None, None) => unreachable!("every objective has a task"),
        };
        Ok(SampleLosses { l_f, l_p, loss })
    }
}

/// One `(t, t+1)` pair; there is deliberately no action field.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub frame_t: &'a Frame,
    pub frame_next: &'a Frame,
    pub instruction: &'a str,
    pub k_t: &'a [[f32; 2]],
    pub k_next: &'a [[f32; 2]],
}

#[derive(Debug, Clone)]
pub struct TransitionBatch<'a> {
    pub items: Vec<Transition<'a>>,
    /// `(clip index, t)` of each item.
    pub index: Vec<(usize, usize)>,
}

/// Uniform over all `(clip, t)` with `t < T − 1`.
pub fn sample_batch<'a, R: Rng>(clips: &'a [VideoClip], batch_size: usize, rng: &mut R) -> Result<TransitionBatch<'a>> {
    let counts: Vec<usize> = clips.iter().map(|c| c.frames.len().saturating_sub(1)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(CareError::Input("no transitions in the pretraining split".into()));
    }
    let mut index = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut k = rng.random_range(0..total);
        let mut c = 0;
        while k >= counts[c] {
            k -= counts[c];
            c += 1;
        }
        index.push((c, k));
    }
    let items = index.iter().map(|&(c, t)| transition(&clips[c], t)).collect();
    Ok(TransitionBatch { items, index })
}

pub fn transition(clip: &VideoClip, t: usize) -> Transition<'_> {
    Transition {
        frame_t: &clip.frames[t],
        frame_next: &clip.frames[t + 1],
        instruction: &clip.instruction,
        k_t: &clip.tracks[t],
        k_next: &clip.tracks[t + 1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_f")]
    pub l_f: Option<f64>,
    #[serde(rename = "L_p")]
    pub l_p: Option<f64>,
    pub s1: f64,
    pub s2: f64,
    pub grad_norm: f64,
    pub feat_std: Option<f64>,
}

/// Everything that evolves during pretraining.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub model: CareModel,
    pub params: ParamStore<f32>,
    pub opt: Adam<f32>,
    pub step: u64,
    trainable: Vec<bool>,
}

fn pretrain_mask(store: &ParamStore<f32>) -> Vec<bool> {
    store.ids().map(|id| !store.name(id).starts_with(TARGET_PREFIX)).collect()
}

impl PretrainState {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = CareModel::init::<f32>(&cfg.model, cfg.seed)?;
        let opt = Adam::new(params.len(), cfg.lr as f32);
        let trainable = pretrain_mask(&params);
        Ok(Self { model, params, opt, step: 0, trainable })
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: &PretrainConfig) -> Result<Self> {
        if ck.manifest.stage != Stage::Pretrained {
            return Err(CareError::Input("not a pretraining checkpoint".into()));
        }
        let model = CareModel::bind(&ck.params, &cfg.model, ck.manifest.vocab.clone())?;
        let mut opt = ck.optimizer.unwrap_or_else(|| Adam::new(ck.params.len(), cfg.lr as f32));
        opt.lr = cfg.lr as f32;
        opt.resize(ck.params.len());
        let trainable = pretrain_mask(&ck.params);
        Ok(Self {
            model,
            params: ck.params,
            opt,
            step: ck.manifest.step,
            trainable,
        })
    }

    pub fn checkpoint(&self, cfg: &PretrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            Stage::Pretrained,
            self.step,
            serde_json::to_value(cfg)?,
            self.model.vocab.clone(),
            self.params.clone(),
            Some(self.opt.clone()),
        ))
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }
}

struct SampleResult {
    grads: Grads<f32>,
    loss: f64,
    l_f: Option<f64>,
    l_p: Option<f64>,
    target: Option<Array2<f32>>,
}

/// Learning-rate multiplier for the two log-variances. At the base rate they
/// drift about `lr` per step and stay far from their optimum `log L` for the
/// whole run, leaving the tasks unweighted.
pub const UWL_LR_SCALE: f32 = 100.0;

/// Forward, backward, clipping, Adam and the EMA target update for one batch.
/// Per-sample gradients are reduced in batch order, so the result does not
/// depend on the execution strategy.
pub fn pretrain_step(state: &mut PretrainState, batch: &TransitionBatch, cfg: &PretrainConfig, exec: Exec) -> Result<StepMetrics> {
    let n = batch.items.len();
    if n == 0 {
        return Err(CareError::Input("empty batch".into()));
    }
    let objective = cfg.objective;
    let (model, params, mask) = (&state.model, &state.params, &state.trainable);
    let results = exec.try_map(n, |i| -> Result<SampleResult> {
        let tr = &batch.items[i];
        let target = if objective.uses_frame() {
            Some(model.vlm.target_features(params, tr.frame_next)?)
        } else {
            None
        };
        let mut t = Tape::with_trainable(params, mask);
        let out = model.sample_loss(&mut t, tr, target.as_ref(), objective)?;
        let grads = t.backward(out.loss)?;
        Ok(SampleResult {
            grads,
            loss: t.scalar(out.loss) as f64,
            l_f: out.l_f.map(|v| t.scalar(v) as f64),
            l_p: out.l_p.map(|v| t.scalar(v) as f64),
            target,
        })
    })?;

    let step = state.step + 1;
    let inv = 1.0 / n as f64;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() * inv;
    let mean_opt = |f: fn(&SampleResult) -> Option<f64>| -> Option<f64> {
        results.iter().map(f).sum::<Option<f64>>().map(|s| s * inv)
    };
    let l_f = mean_opt(|r| r.l_f);
    let l_p = mean_opt(|r| r.l_p);
    if !loss.is_finite() {
        return Err(CareError::Training(format!("non-finite loss at step {step} (L_f {l_f:?}, L_p {l_p:?})")));
    }
    let feat_std = if objective.uses_frame() {
        let targets: Vec<Array2<f32>> = results.iter().filter_map(|r| r.target.clone()).collect();
        let s = min_feature_std(&targets);
        check_collapse(s).map_err(|e| CareError::Training(format!("step {step}: {e}")))?;
        Some(s)
    } else {
        None
    };

    let mut grads = Grads::new(state.params.len());
    for r in &results {
        grads.merge(&r.grads);
    }
    grads.scale(inv as f32);
    if !grads.all_finite() {
        return Err(CareError::Training(format!("non-finite gradient at step {step}")));
    }
    let grad_norm = grads.clip_global_norm(cfg.grad_clip as f32) as f64;
    let uwl = state.model.heads.uwl;
    state.opt.step_scaled(&mut state.params, &grads, |id| {
        if id == uwl.s1 || id == uwl.s2 {
            UWL_LR_SCALE
        } else {
            1.0
        }
    });
    state.model.vlm.update_target(&mut state.params)?;
    state.step = step;

    Ok(StepMetrics {
        step,
        loss,
        l_f,
        l_p,
        s1: state.params.get(uwl.s1)[[0, 0]] as f64,
        s2: state.params.get(uwl.s2)[[0, 0]] as f64,
        grad_norm,
        feat_std,
    })
}

/// Per-step batch RNG, so a resumed run needs no RNG state.
pub fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, step]))
}

/// Pretraining split held in memory.
pub struct PretrainData {
    pub manifest: DatasetManifest,
    pub clips: Vec<VideoClip>,
}

impl PretrainData {
    pub fn load(root: &Path, exec: Exec) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let clips = load_clips(root, SPLIT_PRETRAIN, exec)?;
        if clips.is_empty() {
            return Err(CareError::Input(format!("{}: empty pretraining split", root.display())));
        }
        Ok(Self { manifest, clips })
    }

    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if self.manifest.image_size != cfg.image_size {
            return Err(CareError::Config(format!(
                "dataset images are {}px but model.image_size is {}",
                self.manifest.image_size, cfg.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Stop after this many steps of the current invocation without writing
    /// the final checkpoint, as if the process had been killed.
    pub interrupt_after: Option<u64>,
}

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const FINAL_DIR: &str = "final";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}")
}

/// The most advanced checkpoint under `out_dir`, periodic or final.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let mut best: Option<(u64, PathBuf)> = None;
    let mut consider = |dir: PathBuf| -> Result<()> {
        if dir.join("manifest.json").is_file() {
            let text = fs::read_to_string(dir.join("manifest.json"))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let step = v["step"].as_u64().unwrap_or(0);
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, dir));
            }
        }
        Ok(())
    };
    let periodic = out_dir.join(CHECKPOINT_DIR);
    if periodic.is_dir() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&periodic)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("step_")))
            .collect();
        dirs.sort();
        for d in dirs {
            consider(d)?;
        }
    }
    consider(out_dir.join(FINAL_DIR))?;
    Ok(best)
}

fn same_run(a: &PretrainConfig, b: &PretrainConfig) -> bool {
    PretrainConfig { steps: 0, ..a.clone() } == PretrainConfig { steps: 0, ..b.clone() }
}

/// Keeps the log records up to and including `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let rec: StepMetrics = serde_json::from_str(&line)?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    let tmp = path.with_extension("ndjson.tmp");
    fs::write(&tmp, kept)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn run_pretraining(cfg: &PretrainConfig, data_root: &Path, out_dir: &Path) -> Result<PathBuf> {
    run_pretraining_with(cfg, data_root, out_dir, RunOptions::default())?
        .ok_or_else(|| CareError::Training("pretraining stopped early".into()))
}

/// Resumes from the latest checkpoint in `out_dir` when one from the same
/// configuration exists. Returns the final checkpoint path, or `None` when
/// interrupted.
pub fn run_pretraining_with(cfg: &PretrainConfig, data_root: &Path, out_dir: &Path, opts: RunOptions) -> Result<Option<PathBuf>> {
    cfg.validate()?;
    let data = PretrainData::load(data_root, opts.exec)?;
    data.check_model(&cfg.model)?;
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(METRICS_FILE);

    let mut state = match latest_checkpoint(out_dir)? {
        Some((step, dir)) => {
            let ck = Checkpoint::load(&dir)?;
            let prev: PretrainConfig = ck.config()?;
            if !same_run(&prev, cfg) {
                return Err(CareError::Config(format!(
                    "{} holds a run with a different configuration",
                    out_dir.display()
                )));
            }
            if step > cfg.steps {
                return Err(CareError::Config(format!("{} is already past step {}", out_dir.display(), cfg.steps)));
            }
            log::info!("resuming pretraining from {} at step {step}", dir.display());
            truncate_log(&log_path, step)?;
            PretrainState::from_checkpoint(ck, cfg)?
        }
        None => {
            fs::write(&log_path, "")?;
            PretrainState::new(cfg)?
        }
    };

    let mut log = BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path)?);
    let mut done_here = 0u64;
    while state.step < cfg.steps {
        if opts.interrupt_after.is_some_and(|k| done_here >= k) {
            log.flush()?;
            return Ok(None);
        }
        let mut rng = batch_rng(cfg.seed, state.step);
        let batch = sample_batch(&data.clips, cfg.batch_size, &mut rng)?;
        let m = pretrain_step(&mut state, &batch, cfg, opts.exec)?;
        serde_json::to_writer(&mut log, &m)?;
        log.write_all(b"\n")?;
        done_here += 1;
        if m.step % 50 == 0 || m.step == 1 {
            log::info!(
                "step {} L {:.5} L_f {:?} L_p {:?} s1 {:.3} s2 {:.3} |g| {:.3}",
                m.step, m.loss, m.l_f, m.l_p, m.s1, m.s2, m.grad_norm
            );
        }
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 && m.step < cfg.steps {
            log.flush()?;
            state
                .checkpoint(cfg)?
                .save(&out_dir.join(CHECKPOINT_DIR).join(checkpoint_name(m.step)))?;
        }
    }
    log.flush()?;
    let final_dir = out_dir.join(FINAL_DIR);
    state.checkpoint(cfg)?.save(&final_dir)?;
    Ok(Some(final_dir))
}

/// Loads a pretrained model (weights only).
pub fn load_pretrained(dir: &Path) -> Result<(CareModel, ParamStore<f32>, PretrainConfig)> {
    let ck = Checkpoint::load(dir)?;
    if ck.manifest.stage != Stage::Pretrained {
        return Err(CareError::Input(format!("{}: not a pretraining checkpoint", dir.display())));
    }
    let cfg: PretrainConfig = ck.config()?;
    let model = CareModel::bind(&ck.params, &cfg.model, ck.manifest.vocab.clone())?;
    Ok((model, ck.params, cfg))
}
