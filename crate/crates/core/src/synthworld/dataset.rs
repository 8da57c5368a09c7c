//! Dataset generation and the on-disk trajectory format.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.json
//! traj_00000/frames.bin    u32 T,H,W,3 header + f32 LE pixels
//! traj_00000/tracks.bin    u32 T,256,2 header + f32 LE pixel coords
//! traj_00000/meta.json     instruction, task_label, seed, split
//! traj_00000/actions.bin   u32 T-1,3 header + f32 LE; labeled splits only
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::parallel::Exec;
use crate::seed::derive_seed;

use super::keypoints::{attach_grid, track_keypoints, KeypointSet, N_KEYPOINTS};
use super::policy::scripted_policy;
use super::render::{render, Frame};
use super::scene::{check_success, init_scene_for_label, step_scene, Action, SceneState, N_LABELS};
use super::WorldConfig;

pub const FORMAT_VERSION: &str = "care-synth/1";
pub const SPLIT_PRETRAIN: &str = "pretrain";
pub const SPLIT_FINETUNE: &str = "finetune";
pub const SPLIT_PROBE: &str = "probe";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Share of trajectories stored with actions for fine-tuning.
    pub labeled_fraction: f64,
    /// Share of trajectories stored with actions for probing and validation.
    pub probe_fraction: f64,
    pub max_regenerations: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 2000,
            horizon: 24,
            image_size: 64,
            seed: 0,
            labeled_fraction: 0.03,
            probe_fraction: 0.1,
            max_regenerations: 64,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(CareError::Config(format!(
                "labeled_fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.probe_fraction) || self.labeled_fraction + self.probe_fraction > 1.0 {
            return Err(CareError::Config(format!(
                "probe_fraction {} invalid with labeled_fraction {}",
                self.probe_fraction, self.labeled_fraction
            )));
        }
        if self.horizon < 2 {
            return Err(CareError::Config("horizon must be at least 2".into()));
        }
        super::keypoints::keypoint_grid(self.image_size).map(|_| ())
    }

    pub fn n_labeled(&self) -> usize {
        (self.labeled_fraction * self.n_trajectories as f64).round() as usize
    }

    pub fn n_probe(&self) -> usize {
        (self.probe_fraction * self.n_trajectories as f64).round() as usize
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig::with_image_size(self.image_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub image_size: usize,
    pub splits: BTreeMap<String, Vec<String>>,
    pub generator_seed: u64,
    pub format_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub instruction: String,
    pub task_label: usize,
    pub seed: u64,
    pub split: String,
}

/// A complete simulated demonstration, actions included.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    pub instruction: String,
    pub actions: Vec<Action>,
    pub tracks: Vec<KeypointSet>,
    pub task_label: usize,
    pub seed: u64,
}

/// Video-text view of a stored trajectory. Has no action field: pretraining
/// only ever sees this type.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub name: String,
    pub frames: Vec<Frame>,
    pub tracks: Vec<Vec<[f32; 2]>>,
    pub instruction: String,
    pub task_label: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrajectory {
    pub clip: VideoClip,
    pub actions: Vec<Action>,
}

/// Runs the scripted policy from `init_scene_for_label(seed, label)` for
/// `horizon` frames. Returns `None` when the task is not solved at the end.
pub fn simulate_demo(seed: u64, label: usize, horizon: usize, world: &WorldConfig) -> Result<Option<Trajectory>> {
    let (mut s, instruction, task_label) = init_scene_for_label(seed, label)?;
    let mut tracks = vec![attach_grid(&s, world)?];
    let mut frames = vec![render(&s, world)];
    let mut actions = Vec::with_capacity(horizon - 1);
    for _ in 1..horizon {
        let a = scripted_policy(&s, world);
        let next = step_scene(&s, a, world);
        tracks.push(track_keypoints(&s, &next, tracks.last().expect("non-empty"), world)?);
        frames.push(render(&next, world));
        actions.push(a);
        s = next;
    }
    if !check_success(&s, world) {
        return Ok(None);
    }
    Ok(Some(Trajectory {
        frames,
        instruction,
        actions,
        tracks,
        task_label,
        seed,
    }))
}

/// Re-simulates stored actions from the initial scene of `(seed, label)`.
pub fn replay(
    seed: u64,
    label: usize,
    actions: &[Action],
    world: &WorldConfig,
) -> Result<(Vec<SceneState>, Vec<Frame>, Vec<KeypointSet>)> {
    let (mut s, _, _) = init_scene_for_label(seed, label)?;
    let mut tracks = vec![attach_grid(&s, world)?];
    let mut frames = vec![render(&s, world)];
    let mut states = vec![s.clone()];
    for &a in actions {
        let next = step_scene(&s, a, world);
        tracks.push(track_keypoints(&s, &next, tracks.last().expect("non-empty"), world)?);
        frames.push(render(&next, world));
        states.push(next.clone());
        s = next;
    }
    Ok((states, frames, tracks))
}

pub fn trajectory_name(idx: usize) -> String {
    format!("traj_{idx:05}")
}

fn demo_for_index(cfg: &GenConfig, idx: usize) -> Result<Trajectory> {
    let world = cfg.world();
    let label = idx % N_LABELS;
    for attempt in 0..=cfg.max_regenerations {
        let seed = derive_seed(cfg.seed, &[idx as u64, attempt as u64]);
        if let Some(t) = simulate_demo(seed, label, cfg.horizon, &world)? {
            if attempt > 0 {
                log::info!("trajectory {idx}: regenerated {attempt} time(s), seed {seed}");
            }
            return Ok(t);
        }
    }
    Err(CareError::Config(format!(
        "trajectory {idx}: no solvable scene in {} attempts (horizon {})",
        cfg.max_regenerations + 1,
        cfg.horizon
    )))
}

/// Assigns trajectory indices to the finetune / probe / pretrain splits by a
/// seeded uniform permutation.
pub fn assign_splits(cfg: &GenConfig) -> Vec<&'static str> {
    let mut order: Vec<usize> = (0..cfg.n_trajectories).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5911_7]))); 
    let mut split = vec![SPLIT_PRETRAIN; cfg.n_trajectories];
    let n_lab = cfg.n_labeled();
    let n_probe = cfg.n_probe();
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_lab {
            split[i] = SPLIT_FINETUNE;
        } else if rank < n_lab + n_probe {
            split[i] = SPLIT_PROBE;
        }
    }
    split
}

pub fn write_tensor(path: &Path, dims: &[u32], data: &[f32]) -> Result<()> {
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    if expected != data.len() {
        return Err(CareError::Shape(format!(
            "{}: header {dims:?} vs {} values",
            path.display(),
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(dims.len() * 4 + data.len() * 4);
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path, rank: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = || CareError::Input(format!("{}: truncated tensor file", path.display()));
    if bytes.len() < rank * 4 {
        return Err(bad());
    }
    let dims: Vec<usize> = bytes[..rank * 4]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let body = &bytes[rank * 4..];
    if body.len() != n * 4 {
        return Err(bad());
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `value` to `path` through a temporary file and a rename.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_trajectory(dir: &Path, t: &Trajectory, split: &str, with_actions: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_frames = t.frames.len() as u32;
    let size = t.frames[0].size as u32;
    let pixels: Vec<f32> = t.frames.iter().flat_map(|f| f.pixels.iter().copied()).collect();
    write_tensor(&dir.join("frames.bin"), &[n_frames, size, size, 3], &pixels)?;
    let coords: Vec<f32> = t.tracks.iter().flat_map(|k| k.flat()).collect();
    write_tensor(&dir.join("tracks.bin"), &[n_frames, N_KEYPOINTS as u32, 2], &coords)?;
    let actions_path = dir.join("actions.bin");
    if with_actions {
        let acts: Vec<f32> = t.actions.iter().flat_map(|a| a.to_array()).collect();
        write_tensor(&actions_path, &[n_frames - 1, 3], &acts)?;
    } else if actions_path.exists() {
        fs::remove_file(&actions_path)?;
    }
    write_json(
        &dir.join("meta.json"),
        &TrajectoryMeta {
            instruction: t.instruction.clone(),
            task_label: t.task_label,
            seed: t.seed,
            split: split.to_string(),
        },
    )
}

/// Generates every trajectory (in parallel, one RNG stream per index), writes
/// the tree under `root` and finally the manifest.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    generate_dataset_with(cfg, root, Exec::default())
}

pub fn generate_dataset_with(cfg: &GenConfig, root: &Path, exec: Exec) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let splits = assign_splits(cfg);
    exec.try_map(cfg.n_trajectories, |i| -> Result<()> {
        let t = demo_for_index(cfg, i)?;
        let split = splits[i];
        write_trajectory(&root.join(trajectory_name(i)), &t, split, split != SPLIT_PRETRAIN)
    })?;

    let mut lists: BTreeMap<String, Vec<String>> = [SPLIT_PRETRAIN, SPLIT_FINETUNE, SPLIT_PROBE]
        .iter()
        .map(|s| (s.to_string(), Vec::new()))
        .collect();
    for (i, s) in splits.iter().enumerate() {
        lists.get_mut(*s).expect("known split").push(trajectory_name(i));
    }
    let manifest = DatasetManifest {
        n_trajectories: cfg.n_trajectories,
        horizon: cfg.horizon,
        image_size: cfg.image_size,
        splits: lists,
        generator_seed: cfg.seed,
        format_version: FORMAT_VERSION.to_string(),
    };
    write_json_atomic(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| CareError::Input(format!("{}: {e}", path.display())))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(CareError::Input(format!(
                "unsupported dataset format `{}`",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| CareError::Input(format!("dataset has no split `{name}`")))
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig::with_image_size(self.image_size)
    }

    /// Checks that splits are disjoint and every listed trajectory parses.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (split, names) in &self.splits {
            for n in names {
                if !seen.insert(n.clone()) {
                    return Err(CareError::Input(format!("`{n}` listed twice (split {split})")));
                }
                let clip = load_clip(root, n, self)?;
                if clip.frames.len() != self.horizon {
                    return Err(CareError::Input(format!("`{n}`: {} frames", clip.frames.len())));
                }
            }
        }
        if seen.len() != self.n_trajectories {
            return Err(CareError::Input(format!(
                "manifest lists {} trajectories, expected {}",
                seen.len(),
                self.n_trajectories
            )));
        }
        Ok(())
    }
}

pub fn load_meta(dir: &Path) -> Result<TrajectoryMeta> {
    let path = dir.join("meta.json");
    let text =
        fs::read_to_string(&path).map_err(|e| CareError::Input(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads frames, tracks and metadata. Never opens `actions.bin`.
pub fn load_clip(root: &Path, name: &str, manifest: &DatasetManifest) -> Result<VideoClip> {
    let dir: PathBuf = root.join(name);
    let meta = load_meta(&dir)?;
    let (fd, pixels) = read_tensor(&dir.join("frames.bin"), 4)?;
    let size = manifest.image_size;
    if fd[1] != size || fd[2] != size || fd[3] != 3 {
        return Err(CareError::Input(format!("{name}: frame header {fd:?}")));
    }
    let per = size * size * 3;
    let frames = pixels
        .chunks_exact(per)
        .enumerate()
        .map(|(t, p)| Frame {
            size,
            pixels: p.to_vec(),
            time_index: t as u32,
        })
        .collect::<Vec<_>>();
    let (td, coords) = read_tensor(&dir.join("tracks.bin"), 3)?;
    if td[0] != fd[0] || td[1] != N_KEYPOINTS || td[2] != 2 {
        return Err(CareError::Input(format!("{name}: track header {td:?}")));
    }
    let tracks = coords
        .chunks_exact(N_KEYPOINTS * 2)
        .map(|c| c.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
        .collect();
    Ok(VideoClip {
        name: name.to_string(),
        frames,
        tracks,
        instruction: meta.instruction,
        task_label: meta.task_label,
        seed: meta.seed,
    })
}

pub fn load_actions(root: &Path, name: &str) -> Result<Vec<Action>> {
    let path = root.join(name).join("actions.bin");
    if !path.exists() {
        return Err(CareError::Contract(format!("{name} has no stored actions")));
    }
    let (dims, data) = read_tensor(&path, 2)?;
    if dims[1] != 3 {
        return Err(CareError::Input(format!("{name}: action header {dims:?}")));
    }
    Ok(data.chunks_exact(3).map(|a| Action::new(a[0], a[1], a[2])).collect())
}

pub fn load_clips(root: &Path, split: &str, exec: Exec) -> Result<Vec<VideoClip>> {
    let manifest = DatasetManifest::load(root)?;
    let names = manifest.split(split)?;
    exec.try_map(names.len(), |i| load_clip(root, &names[i], &manifest))
}

pub fn load_labeled(root: &Path, split: &str, exec: Exec) -> Result<Vec<LabeledTrajectory>> {
    let manifest = DatasetManifest::load(root)?;
    let names = manifest.split(split)?;
    exec.try_map(names.len(), |i| {
        let clip = load_clip(root, &names[i], &manifest)?;
        let actions = load_actions(root, &names[i])?;
        if actions.len() + 1 != clip.frames.len() {
            return Err(CareError::Input(format!("{}: action count mismatch", names[i])));
        }
        Ok(LabeledTrajectory { clip, actions })
    })
}
