use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};

use super::render::body_at;
use super::scene::SceneState;
use super::WorldConfig;

pub const GRID_SIDE: usize = 16;
pub const N_KEYPOINTS: usize = GRID_SIDE * GRID_SIDE;
pub const BACKGROUND_ID: i32 = -1;

/// 256 tracked points in pixel coordinates plus the body each point sat on
/// in the first frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub coords: Vec<[f32; 2]>,
    pub attachment: Vec<i32>,
}

impl KeypointSet {
    pub fn flat(&self) -> Vec<f32> {
        self.coords.iter().flat_map(|c| c.iter().copied()).collect()
    }
}

/// 16×16 grid at cell centers (`spacing/2 + i*spacing`), unattached.
pub fn keypoint_grid(image_size: usize) -> Result<KeypointSet> {
    if image_size == 0 || image_size % GRID_SIDE != 0 {
        return Err(CareError::Config(format!(
            "image size {image_size} not divisible by {GRID_SIDE}"
        )));
    }
    let spacing = (image_size / GRID_SIDE) as f32;
    let mut coords = Vec::with_capacity(N_KEYPOINTS);
    for i in 0..GRID_SIDE {
        for j in 0..GRID_SIDE {
            coords.push([spacing / 2.0 + j as f32 * spacing, spacing / 2.0 + i as f32 * spacing]);
        }
    }
    Ok(KeypointSet {
        coords,
        attachment: vec![BACKGROUND_ID; N_KEYPOINTS],
    })
}

/// Grid with attachments resolved against the first frame of a scene.
pub fn attach_grid(s: &SceneState, cfg: &WorldConfig) -> Result<KeypointSet> {
    let mut k = keypoint_grid(cfg.image_size)?;
    let n = cfg.image_size as f64;
    for (c, a) in k.coords.iter().zip(k.attachment.iter_mut()) {
        let p = [c[0] as f64 / n, c[1] as f64 / n];
        *a = body_at(s, p, cfg.agent_radius).map_or(BACKGROUND_ID, |b| b as i32);
    }
    Ok(k)
}

/// Pixel displacement of every body between two consecutive states.
pub fn body_displacements(s_t: &SceneState, s_next: &SceneState, image_size: usize) -> Vec<[f32; 2]> {
    let n = image_size as f64;
    (0..=s_t.objects.len())
        .map(|b| {
            let p0 = s_t.body_pos(b);
            let p1 = s_next.body_pos(b);
            [((p1[0] - p0[0]) * n) as f32, ((p1[1] - p0[1]) * n) as f32]
        })
        .collect()
}

/// Exact rigid-translation tracker: attached points move with their body,
/// background points stay, everything is clamped to the frame.
pub fn track_keypoints(
    s_t: &SceneState,
    s_next: &SceneState,
    k_t: &KeypointSet,
    cfg: &WorldConfig,
) -> Result<KeypointSet> {
    if s_next.time_index != s_t.time_index + 1 {
        return Err(CareError::Contract(format!(
            "states are not one step apart ({} -> {})",
            s_t.time_index, s_next.time_index
        )));
    }
    if s_next.objects.len() != s_t.objects.len() {
        return Err(CareError::Contract("body count changed between states".into()));
    }
    let deltas = body_displacements(s_t, s_next, cfg.image_size);
    let hi = cfg.image_size as f32 - 1e-3;
    let coords = k_t
        .coords
        .iter()
        .zip(&k_t.attachment)
        .map(|(c, &a)| {
            if a < 0 {
                *c
            } else {
                let d = deltas[a as usize];
                [(c[0] + d[0]).clamp(0.0, hi), (c[1] + d[1]).clamp(0.0, hi)]
            }
        })
        .collect();
    Ok(KeypointSet {
        coords,
        attachment: k_t.attachment.clone(),
    })
}
