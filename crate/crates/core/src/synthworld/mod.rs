//! Deterministic 2-D manipulation world: scenes, rendering, scripted
//! demonstrations, exact keypoint tracks and on-disk datasets.

pub mod dataset;
pub mod keypoints;
pub mod policy;
pub mod render;
pub mod scene;

use serde::{Deserialize, Serialize};

pub use dataset::{generate_dataset, DatasetManifest, GenConfig};
pub use keypoints::{keypoint_grid, track_keypoints, KeypointSet, N_KEYPOINTS};
pub use policy::scripted_policy;
pub use render::{render, Frame};
pub use scene::{all_instructions, check_success, init_scene, step_scene, Action, SceneState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub image_size: usize,
    pub step_scale: f64,
    pub pickup_radius: f64,
    pub success_radius: f64,
    pub agent_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            step_scale: 0.05,
            pickup_radius: 0.06,
            success_radius: 0.08,
            agent_radius: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn with_image_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }
}
