use super::scene::{check_success, dist, Action, SceneState};
use super::WorldConfig;

/// Release once the carried object is planned to land this close to the goal.
const RELEASE_TOL: f64 = 0.02;

fn toward(from: [f64; 2], to: [f64; 2], step: f64) -> [f32; 2] {
    [
        ((to[0] - from[0]) / step).clamp(-1.0, 1.0) as f32,
        ((to[1] - from[1]) / step).clamp(-1.0, 1.0) as f32,
    ]
}

fn advance(p: [f64; 2], mv: [f32; 2], step: f64) -> [f64; 2] {
    [p[0] + mv[0] as f64 * step, p[1] + mv[1] as f64 * step]
}

/// Proportional controller: approach the target, grip on arrival, carry it to
/// the goal and release there. Idles once the task is solved.
pub fn scripted_policy(s: &SceneState, cfg: &WorldConfig) -> Action {
    let step = cfg.step_scale;
    let target = s.goal.target;
    let obj = &s.objects[target];
    match s.held() {
        Some(h) if h == target => {
            let mv = toward(obj.pos, s.goal.location, step);
            let landing = advance(obj.pos, mv, step);
            let grip = if dist(landing, s.goal.location) <= RELEASE_TOL {
                -1.0
            } else {
                1.0
            };
            Action::new(mv[0], mv[1], grip)
        }
        Some(_) => Action::new(0.0, 0.0, -1.0),
        None => {
            if check_success(s, cfg) {
                return Action::new(0.0, 0.0, -1.0);
            }
            let mv = toward(s.agent_pos, obj.pos, step);
            let arrive = advance(s.agent_pos, mv, step);
            let nearest = s
                .objects
                .iter()
                .enumerate()
                .min_by(|a, b| dist(a.1.pos, arrive).total_cmp(&dist(b.1.pos, arrive)))
                .map(|(i, _)| i);
            let grip = if nearest == Some(target) && dist(obj.pos, arrive) <= cfg.pickup_radius {
                1.0
            } else {
                -1.0
            };
            Action::new(mv[0], mv[1], grip)
        }
    }
}
