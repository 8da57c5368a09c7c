use serde::{Deserialize, Serialize};

use super::scene::SceneState;
use super::WorldConfig;

pub const BACKGROUND: [f32; 3] = [0.15, 0.15, 0.15];
pub const AGENT_OPEN: [f32; 3] = [1.0, 1.0, 1.0];
pub const AGENT_CLOSED: [f32; 3] = [1.0, 0.5, 1.0];

/// H×W×3 image, row-major, channels last, values in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub time_index: u32,
}

impl Frame {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.size + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Topmost body covering the point: agent, then held object, then objects in
/// reverse draw order.
pub(crate) fn body_at(s: &SceneState, p: [f64; 2], agent_radius: f64) -> Option<usize> {
    let d = ((p[0] - s.agent_pos[0]).powi(2) + (p[1] - s.agent_pos[1]).powi(2)).sqrt();
    if d <= agent_radius {
        return Some(s.agent_body());
    }
    if let Some(h) = s.held() {
        if s.objects[h].contains(p) {
            return Some(h);
        }
    }
    (0..s.objects.len())
        .rev()
        .find(|&i| !s.objects[i].held && s.objects[i].contains(p))
}

/// Nearest-sample rasterisation at pixel centers; no anti-aliasing.
pub fn render(s: &SceneState, cfg: &WorldConfig) -> Frame {
    let n = cfg.image_size;
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let p = [(x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64];
            let rgb = match body_at(s, p, cfg.agent_radius) {
                None => BACKGROUND,
                Some(b) if b == s.agent_body() => {
                    if s.gripper {
                        AGENT_CLOSED
                    } else {
                        AGENT_OPEN
                    }
                }
                Some(b) => s.objects[b].color.rgb(),
            };
            pixels.extend_from_slice(&rgb);
        }
    }
    Frame {
        size: n,
        pixels,
        time_index: s.time_index,
    }
}
