use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};

use super::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
/// Distinct (color, shape) descriptors.
pub const N_COMBOS: usize = COLORS.len() * SHAPES.len();

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.3, 0.95],
            Color::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

pub fn combo(index: usize) -> (Color, ShapeKind) {
    (COLORS[index / SHAPES.len()], SHAPES[index % SHAPES.len()])
}

pub fn combo_index(color: Color, shape: ShapeKind) -> usize {
    let c = COLORS.iter().position(|&x| x == color).expect("known color");
    let s = SHAPES.iter().position(|&x| x == shape).expect("known shape");
    c * SHAPES.len() + s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: Color,
    pub pos: [f64; 2],
    pub half_extent: f64,
    pub held: bool,
}

impl Object {
    /// Point-in-shape test in normalised canvas units.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.pos[0];
        let dy = p[1] - self.pos[1];
        let h = self.half_extent;
        match self.shape {
            ShapeKind::Square => dx.abs() <= h && dy.abs() <= h,
            ShapeKind::Circle => dx * dx + dy * dy <= h * h,
            ShapeKind::Triangle => {
                // apex at the top (smaller y), base at y + h
                let down = dy + h;
                (0.0..=2.0 * h).contains(&down) && dx.abs() <= down / 2.0
            }
        }
    }
}

/// Where the target object has to end up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub target: usize,
    pub location: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub agent_pos: [f64; 2],
    /// Closed gripper.
    pub gripper: bool,
    pub objects: Vec<Object>,
    pub goal: GoalSpec,
    pub time_index: u32,
}

impl SceneState {
    pub fn held(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    /// Attachment id of the agent body; objects use their own index.
    pub fn agent_body(&self) -> usize {
        self.objects.len()
    }

    pub fn body_pos(&self, body: usize) -> [f64; 2] {
        if body == self.agent_body() {
            self.agent_pos
        } else {
            self.objects[body].pos
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub dx: f32,
    pub dy: f32,
    pub grip: f32,
}

impl Action {
    pub fn new(dx: f32, dy: f32, grip: f32) -> Self {
        Self { dx, dy, grip }
    }

    pub fn clipped(self) -> Self {
        let c = |v: f32| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Self::new(c(self.dx), c(self.dy), c(self.grip))
    }

    pub fn to_array(self) -> [f32; 3] {
        [self.dx, self.dy, self.grip]
    }
}

/// Instruction templates; `{}` slots take object descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    ToObject,
    ToLeft,
    ToRight,
    ToTop,
    ToBottom,
}

pub const TEMPLATES: [Template; 5] = [
    Template::ToObject,
    Template::ToLeft,
    Template::ToRight,
    Template::ToTop,
    Template::ToBottom,
];
pub const N_TEMPLATES: usize = TEMPLATES.len();
pub const N_LABELS: usize = N_TEMPLATES * N_COMBOS;

impl Template {
    pub fn from_id(id: usize) -> Result<Self> {
        TEMPLATES
            .get(id)
            .copied()
            .ok_or_else(|| CareError::Config(format!("unknown template id {id} (have {N_TEMPLATES})")))
    }

    fn fixed_goal(self) -> Option<[f64; 2]> {
        match self {
            Template::ToObject => None,
            Template::ToLeft => Some([0.15, 0.5]),
            Template::ToRight => Some([0.85, 0.5]),
            Template::ToTop => Some([0.5, 0.15]),
            Template::ToBottom => Some([0.5, 0.85]),
        }
    }

    fn instruction(self, target: &Object, reference: Option<&Object>) -> String {
        self.describe((target.color, target.shape), reference.map(|r| (r.color, r.shape)))
    }

    fn describe(self, target: (Color, ShapeKind), reference: Option<(Color, ShapeKind)>) -> String {
        let head = format!("move the {} {}", target.0.word(), target.1.word());
        match (self, reference) {
            (Template::ToObject, Some(r)) => format!("{head} to the {} {}", r.0.word(), r.1.word()),
            (Template::ToLeft, _) => format!("{head} to the left"),
            (Template::ToRight, _) => format!("{head} to the right"),
            (Template::ToTop, _) => format!("{head} to the top"),
            (Template::ToBottom, _) => format!("{head} to the bottom"),
            (Template::ToObject, None) => unreachable!("reference object required"),
        }
    }
}

/// Every instruction the world can produce.
pub fn all_instructions() -> Vec<String> {
    let mut out = Vec::new();
    for t in TEMPLATES {
        for c in 0..N_COMBOS {
            if t == Template::ToObject {
                out.extend((0..N_COMBOS).filter(|&r| r != c).map(|r| t.describe(combo(c), Some(combo(r)))));
            } else {
                out.push(t.describe(combo(c), None));
            }
        }
    }
    out
}

/// `template_id * N_COMBOS + combo(target)`.
pub fn task_label(template_id: usize, target_combo: usize) -> usize {
    template_id * N_COMBOS + target_combo
}

/// Deterministic scene for `(seed, template_id)`; the target descriptor is
/// drawn from the seed.
pub fn init_scene(seed: u64, template_id: usize) -> Result<(SceneState, String, usize)> {
    init_scene_with(seed, template_id, None)
}

/// Scene whose target descriptor is fixed by `label`.
pub fn init_scene_for_label(seed: u64, label: usize) -> Result<(SceneState, String, usize)> {
    if label >= N_LABELS {
        return Err(CareError::Config(format!("task label {label} out of range {N_LABELS}")));
    }
    init_scene_with(seed, label / N_COMBOS, Some(label % N_COMBOS))
}

fn init_scene_with(
    seed: u64,
    template_id: usize,
    target_combo: Option<usize>,
) -> Result<(SceneState, String, usize)> {
    let template = Template::from_id(template_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.random_range(2..=4usize);

    let target_combo = target_combo.unwrap_or_else(|| rng.random_range(0..N_COMBOS));
    let mut others: Vec<usize> = (0..N_COMBOS).filter(|&c| c != target_combo).collect();
    others.shuffle(&mut rng);
    let mut combos = vec![target_combo];
    combos.extend(others.into_iter().take(n_objects - 1));

    let mut objects: Vec<Object> = Vec::with_capacity(n_objects);
    for &c in &combos {
        let (color, shape) = combo(c);
        let half_extent = rng.random_range(0.06..0.09);
        let pos = loop {
            let p = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            let clear = objects.iter().all(|o| {
                let gap = o.half_extent + half_extent + 0.02;
                (o.pos[0] - p[0]).abs() > gap || (o.pos[1] - p[1]).abs() > gap
            });
            if clear {
                break p;
            }
        };
        objects.push(Object {
            shape,
            color,
            pos,
            half_extent,
            held: false,
        });
    }
    let agent_pos = loop {
        let p = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        if objects.iter().all(|o| dist(o.pos, p) > o.half_extent + 0.06) {
            break p;
        }
    };

    // slot order is shuffled so the target is not always drawn first
    let mut order: Vec<usize> = (0..n_objects).collect();
    order.shuffle(&mut rng);
    let shuffled: Vec<Object> = order.iter().map(|&i| objects[i].clone()).collect();
    let target = order.iter().position(|&i| i == 0).expect("target present");
    let reference = order.iter().position(|&i| i == 1).expect("two objects minimum");

    let location = template
        .fixed_goal()
        .unwrap_or(shuffled[reference].pos);
    let reference_obj = (template == Template::ToObject).then(|| &shuffled[reference]);
    let instruction = template.instruction(&shuffled[target], reference_obj);
    let state = SceneState {
        agent_pos,
        gripper: false,
        objects: shuffled,
        goal: GoalSpec { target, location },
        time_index: 0,
    };
    Ok((state, instruction, task_label(template_id, target_combo)))
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Applies one clipped action: translate the agent (and any held object
/// rigidly), then open/close the gripper.
pub fn step_scene(s: &SceneState, a: Action, cfg: &WorldConfig) -> SceneState {
    let a = a.clipped();
    let mut next = s.clone();
    let held = s.held();
    let mut delta = [a.dx as f64 * cfg.step_scale, a.dy as f64 * cfg.step_scale];
    for (axis, d) in delta.iter_mut().enumerate() {
        let mut lo = -s.agent_pos[axis];
        let mut hi = 1.0 - s.agent_pos[axis];
        if let Some(h) = held {
            lo = lo.max(-s.objects[h].pos[axis]);
            hi = hi.min(1.0 - s.objects[h].pos[axis]);
        }
        *d = d.clamp(lo, hi);
    }
    let shift = |p: [f64; 2]| {
        [
            (p[0] + delta[0]).clamp(0.0, 1.0),
            (p[1] + delta[1]).clamp(0.0, 1.0),
        ]
    };
    next.agent_pos = shift(s.agent_pos);
    if let Some(h) = held {
        next.objects[h].pos = shift(s.objects[h].pos);
    }

    next.gripper = a.grip > 0.0;
    if next.gripper {
        if held.is_none() {
            let nearest = next
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (i, dist(o.pos, next.agent_pos)))
                .filter(|&(_, d)| d <= cfg.pickup_radius)
                .min_by(|x, y| x.1.total_cmp(&y.1));
            if let Some((i, _)) = nearest {
                next.objects[i].held = true;
            }
        }
    } else if let Some(h) = held {
        next.objects[h].held = false;
    }
    next.time_index = s.time_index + 1;
    next
}

/// Target center within `success_radius` of the goal with the gripper open.
pub fn check_success(s: &SceneState, cfg: &WorldConfig) -> bool {
    let target = &s.objects[s.goal.target];
    !s.gripper && !target.held && dist(target.pos, s.goal.location) <= cfg.success_radius
}
