//! Acceptance suite. Each criterion prints one PASS/FAIL line to stderr.
//!
//! Criteria 5 to 8 train and fine-tune two dozen models and are ignored by
//! default; run them with
//! `cargo test --release --test acceptance -- --include-ignored`.
//! `CARE_ACCEPT_SCALE=full` switches those runs from the desk configuration
//! to the reference one. `CARE_ACCEPT_DIR` keeps their datasets and
//! checkpoints between invocations (runs resume from their checkpoints).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use care_core::evalharness::*;
use care_core::finetune::{run_finetune, Base, FinetuneConfig};
use care_core::latentheads::{frame_loss, point_loss, points_array, uwl_combine, uwl_value, CrossAttention, Heads};
use care_core::nn::Initializer;
use care_core::parallel::Exec;
use care_core::params::{Init, ParamId, ParamStore};
use care_core::pretrain::*;
use care_core::real::Real;
use care_core::synthworld::dataset::{
    generate_dataset, load_clips, load_labeled, replay, GenConfig, SPLIT_PRETRAIN, SPLIT_PROBE,
};
use care_core::synthworld::keypoints::attach_grid;
use care_core::synthworld::scene::{init_scene_for_label, N_LABELS};
use care_core::synthworld::{render, step_scene, track_keypoints, Action, WorldConfig};
use care_core::tape::{Tape, Var};
use care_core::vlmcore::{FrameContext, ModelConfig, Vlm};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn verdict(n: u32, title: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {n} ({title}): {} [{:.1}s] {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    // written straight to the handle so the line survives output capture
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Collects named checks and reports the first failures.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    passed: usize,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(what.into());
        }
    }

    fn finish(self, n: u32, title: &str, start: Instant, budget: Duration) {
        let elapsed = start.elapsed();
        let mut failed = self.failed;
        if elapsed > budget {
            failed.push(format!("took longer than {}s", budget.as_secs()));
        }
        let detail = if failed.is_empty() {
            format!("{} checks", self.passed)
        } else {
            format!("{} passed, failed: {}", self.passed, failed.join("; "))
        };
        verdict(n, title, failed.is_empty(), &detail, elapsed);
        assert!(failed.is_empty(), "criterion {n}: {}", failed.join("; "));
    }
}

fn small_model(image_size: usize) -> ModelConfig {
    ModelConfig {
        image_size,
        patch: 8,
        d_v: 4,
        d_l: 4,
        n_layers: 1,
        n_heads: 2,
        n_latent: 2,
        enc_layers: 1,
        enc_heads: 2,
        ffn_mult: 2,
        max_text_len: 8,
        key_dim: 4,
        frame_dec_layers: 1,
        point_hidden: 3,
        ..ModelConfig::default()
    }
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        d_v: 32,
        d_l: 64,
        key_dim: 64,
        point_hidden: 64,
        n_layers: 2,
        ..ModelConfig::default()
    }
}

/// A scalar loss whose parameter gradient is checked in float32 against
/// central differences of the same graph evaluated in float64.
trait Graph {
    fn build<F: Real>(&self, t: &mut Tape<F>) -> Var;
}

fn grad_rel_err(store: &ParamStore<f64>, ids: &[ParamId], g: &impl Graph) -> f64 {
    let s32 = store.cast::<f32>();
    let t = {
        let mut t = Tape::new(&s32);
        let l = g.build(&mut t);
        t.backward(l).unwrap()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &id in ids {
        let (rows, cols) = store.get(id).dim();
        let (mut diff, mut n_fd, mut n_an) = (0.0f64, 0.0f64, 0.0f64);
        for r in 0..rows {
            for c in 0..cols {
                let eval = |d: f64| {
                    let mut s = store.clone();
                    s.get_mut(id)[[r, c]] += d;
                    let mut tp = Tape::new(&s);
                    let l = g.build(&mut tp);
                    tp.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = t.get(id).map_or(0.0, |a| a[[r, c]] as f64);
                diff += (fd - an).powi(2);
                n_fd += fd * fd;
                n_an += an * an;
            }
        }
        // relative Frobenius error per tensor; the floor covers gradients that
        // vanish identically, such as a key bias under softmax
        worst = worst.max(diff.sqrt() / n_fd.sqrt().max(n_an.sqrt()).max(1e-3));
    }
    worst
}

struct UwlGraph {
    s1: ParamId,
    s2: ParamId,
}

impl Graph for UwlGraph {
    fn build<F: Real>(&self, t: &mut Tape<F>) -> Var {
        let lf = t.constant(Array2::from_elem((1, 1), F::lit(0.8)));
        let lp = t.constant(Array2::from_elem((1, 1), F::lit(0.3)));
        let (a, b) = (t.param(self.s1), t.param(self.s2));
        uwl_combine(t, lf, lp, a, b).unwrap()
    }
}

struct ProjectorGraph {
    vlm: Vlm,
    f_a: Array2<f64>,
    f_b: Array2<f64>,
    w: Array2<f64>,
}

impl Graph for ProjectorGraph {
    fn build<F: Real>(&self, t: &mut Tape<F>) -> Var {
        let a = t.constant(self.f_a.mapv(F::lit));
        let b = t.constant(self.f_b.mapv(F::lit));
        let (_, fv) = self.vlm.concat_project(t, a, b).unwrap();
        let w = t.constant(self.w.mapv(F::lit));
        let y = t.mul(fv, w).unwrap();
        t.mean_all(y)
    }
}

struct FrameDecoderGraph {
    heads: Heads,
    z: Array2<f64>,
    target: Array2<f64>,
    n_heads: usize,
}

impl Graph for FrameDecoderGraph {
    fn build<F: Real>(&self, t: &mut Tape<F>) -> Var {
        let z = t.constant(self.z.mapv(F::lit));
        let f = self.heads.frame.forward(t, z, self.n_heads).unwrap();
        let y = t.constant(self.target.mapv(F::lit));
        frame_loss(t, f, y).unwrap()
    }
}

struct CrossAttentionGraph {
    x: CrossAttention,
    query: Array2<f64>,
    context: Array2<f64>,
    w: Array2<f64>,
}

impl Graph for CrossAttentionGraph {
    fn build<F: Real>(&self, t: &mut Tape<F>) -> Var {
        let q = t.constant(self.query.mapv(F::lit));
        let c = t.constant(self.context.mapv(F::lit));
        let out = self.x.forward(t, q, c).unwrap();
        let w = t.constant(self.w.mapv(F::lit));
        let y = t.mul(out, w).unwrap();
        t.mean_all(y)
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Init { rng }.normal(rows, cols, 1.0)
}

/// Scalar-loop single-head cross-attention.
fn cross_attention_oracle(q_in: &Array2<f64>, c_in: &Array2<f64>, wz: &Array2<f64>, bz: &Array2<f64>, wf: &Array2<f64>, bf: &Array2<f64>) -> Array2<f64> {
    let d = wz.ncols();
    let lin = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| {
        let mut out = Array2::zeros((x.nrows(), w.ncols()));
        for i in 0..x.nrows() {
            for j in 0..w.ncols() {
                let mut s = b[[0, j]];
                for k in 0..x.ncols() {
                    s += x[[i, k]] * w[[k, j]];
                }
                out[[i, j]] = s;
            }
        }
        out
    };
    let q = lin(q_in, wz, bz);
    let kv = lin(c_in, wf, bf);
    let mut out = Array2::zeros((q.nrows(), d));
    for i in 0..q.nrows() {
        let scores: Vec<f64> = (0..kv.nrows())
            .map(|j| (0..d).map(|k| q[[i, k]] * kv[[j, k]]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..kv.nrows() {
            for k in 0..d {
                out[[i, k]] += e[j] / z * kv[[j, k]];
            }
        }
    }
    out
}

#[test]
fn criterion_1_numerical_core() {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // attention rows
    for trial in 0..5 {
        let s = ParamStore::<f32>::new();
        let mut t = Tape::new(&s);
        let q = t.constant(normal(&mut rng, 6, 8).mapv(|v| (3.0 * v) as f32));
        let k = t.constant(normal(&mut rng, 9, 8).mapv(|v| (3.0 * v) as f32));
        let out = t.attention(q, k, k, 2, trial % 2 == 0).unwrap();
        let ok = t.attention_probs(out).unwrap().iter().all(|p| p.rows().into_iter().all(|r| (r.sum() - 1.0).abs() <= 1e-6));
        c.check(ok, format!("attention rows sum to 1 (trial {trial})"));
    }

    // cross-attention against the scalar loop
    for trial in 0..10 {
        let mut s = ParamStore::<f32>::new();
        let x = CrossAttention::new(&mut Initializer { store: &mut s, rng: &mut rng }, "x", 8, 8, 8).unwrap();
        let (q, ctx) = (normal(&mut rng, 4, 8), normal(&mut rng, 4, 8));
        let mut t = Tape::new(&s);
        let (qv, cv) = (t.constant(q.mapv(|v| v as f32)), t.constant(ctx.mapv(|v| v as f32)));
        let out = x.forward(&mut t, qv, cv).unwrap();
        let p = |id: ParamId| s.get(id).mapv(|v| v as f64);
        let want = cross_attention_oracle(&q, &ctx, &p(x.wz.w), &p(x.wz.b), &p(x.wf.w), &p(x.wf.b));
        let err = t.value(out).iter().zip(want.iter()).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        c.check(err <= 1e-5, format!("cross-attention oracle trial {trial}: {err:.2e}"));
    }

    // losses against scalar loops
    for trial in 0..10 {
        let (lf, lp) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let (s1, s2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let want = 0.5 * f64::exp(-s1) * lf + 0.5 * f64::exp(-s2) * lp + 0.5 * s1 + 0.5 * s2;
        let store = ParamStore::<f64>::new();
        let mut t = Tape::new(&store);
        let sc = |t: &mut Tape<f64>, v: f64| t.constant(Array2::from_elem((1, 1), v));
        let (a, b, x, y) = (sc(&mut t, lf), sc(&mut t, lp), sc(&mut t, s1), sc(&mut t, s2));
        let got = uwl_combine(&mut t, a, b, x, y).unwrap();
        c.check((t.scalar(got) - want).abs() <= 1e-6, format!("uwl oracle trial {trial}"));
        c.check((uwl_value(lf, lp, s1, s2).unwrap() - want).abs() <= 1e-6, "uwl_value oracle");

        let (fa, fb) = (normal(&mut rng, 16, 8), normal(&mut rng, 16, 8));
        let mut want_f = 0.0;
        for i in 0..16 {
            for j in 0..8 {
                want_f += (fa[[i, j]] - fb[[i, j]]).powi(2);
            }
        }
        want_f /= 128.0;
        let (av, bv) = (t.constant(fa), t.constant(fb));
        let l = frame_loss(&mut t, av, bv).unwrap();
        c.check((t.scalar(l) - want_f).abs() <= 1e-6, "frame loss oracle");

        let (ka, kb) = (normal(&mut rng, 64, 2).mapv(|v| 16.0 + 4.0 * v), normal(&mut rng, 64, 2).mapv(|v| 16.0 + 4.0 * v));
        let mut want_p = 0.0;
        for i in 0..64 {
            for j in 0..2 {
                want_p += (ka[[i, j]] / 32.0 - kb[[i, j]] / 32.0).powi(2);
            }
        }
        want_p /= 128.0;
        let (av, bv) = (t.constant(ka), t.constant(kb));
        let l = point_loss(&mut t, av, bv, 32).unwrap();
        c.check((t.scalar(l) - want_p).abs() <= 1e-6, "point loss oracle");
    }

    // gradients: float32 analytic against float64 central differences
    let cfg = small_model(16);
    let mut store = ParamStore::<f64>::new();
    let s1 = store.insert("s1", Array2::from_elem((1, 1), 0.2)).unwrap();
    let s2 = store.insert("s2", Array2::from_elem((1, 1), -0.7)).unwrap();
    let e = grad_rel_err(&store, &[s1, s2], &UwlGraph { s1, s2 });
    c.check(e <= 1e-3, format!("uwl gradient rel-err {e:.2e}"));

    let mut store = ParamStore::<f64>::new();
    let vlm = Vlm::init(&mut store, &cfg, 5, &mut rng).unwrap();
    let ids: Vec<ParamId> = vlm.proj1.ids().into_iter().chain(vlm.proj2.ids()).collect();
    let g = ProjectorGraph { f_a: normal(&mut rng, 4, 4), f_b: normal(&mut rng, 4, 4), w: normal(&mut rng, 4, 4), vlm };
    let e = grad_rel_err(&store, &ids, &g);
    c.check(e <= 1e-3, format!("projector gradient rel-err {e:.2e}"));

    let mut store = ParamStore::<f64>::new();
    let heads = Heads::init(&mut store, &cfg, &mut rng).unwrap();
    let ids: Vec<ParamId> = store.ids_with_prefix("heads.frame.").filter(|&id| !store.name(id).contains("xattn")).collect();
    let g = FrameDecoderGraph { z: normal(&mut rng, 2, 4), target: normal(&mut rng, cfg.n_p(), cfg.d_v), n_heads: 2, heads };
    let e = grad_rel_err(&store, &ids, &g);
    c.check(e <= 1e-3, format!("frame decoder gradient rel-err {e:.2e}"));

    let mut store = ParamStore::<f64>::new();
    let x = CrossAttention::new(&mut Initializer { store: &mut store, rng: &mut rng }, "x", 4, 6, 5).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let g = CrossAttentionGraph { x, query: normal(&mut rng, 3, 4), context: normal(&mut rng, 7, 6), w: normal(&mut rng, 3, 5) };
    let e = grad_rel_err(&store, &ids, &g);
    c.check(e <= 1e-3, format!("cross-attention gradient rel-err {e:.2e}"));

    // zero-init adapters and the zero point head
    let cfg = desk_model();
    let (model, mut params) = CareModel::init::<f32>(&cfg, 4).unwrap();
    let world = WorldConfig::with_image_size(cfg.image_size);
    let probes: Vec<_> = (0..4).map(|i| init_scene_for_label(90 + i, (i * 17) as usize % N_LABELS).unwrap()).collect();
    let before: Vec<_> = probes.iter().map(|(s, instr, _)| model.latent_value(&params, &render(s, &world), instr).unwrap()).collect();
    let mut adapted = model.clone();
    adapted.vlm.attach_adapters(&mut params, 8, 16.0, &mut rng).unwrap();
    let same = probes.iter().zip(&before).all(|((s, instr, _), b)| {
        let a = adapted.latent_value(&params, &render(s, &world), instr).unwrap();
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    c.check(same, "zero-init adapters leave the forward pass bitwise unchanged");

    let grid = attach_grid(&probes[0].0, &world).unwrap();
    let k = points_array::<f32>(&grid.coords);
    let mut t = Tape::new(&params);
    let kt = t.constant(k.clone());
    let z = t.constant(before[0].clone());
    let h = &model.heads.point;
    let e = h.embed_points(&mut t, kt, cfg.image_size).unwrap();
    let zk = h.fuse(&mut t, e, z).unwrap();
    let out = h.decode(&mut t, zk, e, kt, cfg.image_size).unwrap();
    c.check(t.value(out) == &k, "zero point head returns k_t exactly");

    c.finish(1, "numerical core", start, Duration::from_secs(60));
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_2_oracle_suite() {
    let start = Instant::now();
    let mut c = Checks::default();
    let world = WorldConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // keypoint oracle over 1,000 random transitions
    let (mut exact, mut total) = (true, 0);
    for episode in 0..50u64 {
        let (mut s, _, _) = init_scene_for_label(1000 + episode, episode as usize % N_LABELS).unwrap();
        let mut k = attach_grid(&s, &world).unwrap();
        for _ in 0..20 {
            let a = Action::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), if rng.random::<f32>() < 0.6 { 1.0 } else { -1.0 });
            let next = step_scene(&s, a, &world);
            let tracked = track_keypoints(&s, &next, &k, &world).unwrap();
            let n = world.image_size as f64;
            let pos = |st: &care_core::synthworld::SceneState, b: usize| {
                if b == st.objects.len() {
                    st.agent_pos
                } else {
                    st.objects[b].pos
                }
            };
            for ((c0, c1), &att) in k.coords.iter().zip(&tracked.coords).zip(&k.attachment) {
                let want = if att < 0 {
                    *c0
                } else {
                    let b = att as usize;
                    let (p0, p1) = (pos(&s, b), pos(&next, b));
                    let d = [((p1[0] - p0[0]) * n) as f32, ((p1[1] - p0[1]) * n) as f32];
                    let hi = n as f32 - 1e-3;
                    [(c0[0] + d[0]).clamp(0.0, hi), (c0[1] + d[1]).clamp(0.0, hi)]
                };
                exact &= c1[0].to_bits() == want[0].to_bits() && c1[1].to_bits() == want[1].to_bits();
            }
            total += 1;
            s = next;
            k = tracked;
        }
    }
    c.check(exact && total == 1000, format!("keypoint oracle exact on {total} transitions"));

    // replay and byte-deterministic generation
    let gen = GenConfig { n_trajectories: 24, image_size: 32, seed: 21, labeled_fraction: 0.25, probe_fraction: 0.25, ..GenConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&gen, a.path()).unwrap();
    generate_dataset(&gen, b.path()).unwrap();
    c.check(tree(a.path()) == tree(b.path()), "dataset generation is byte-deterministic");
    let labeled = load_labeled(a.path(), SPLIT_PROBE, Exec::default()).unwrap();
    let w32 = gen.world();
    let replays_ok = labeled.iter().all(|tr| {
        let (_, frames, tracks) = replay(tr.clip.seed, tr.clip.task_label, &tr.actions, &w32).unwrap();
        frames == tr.clip.frames && tracks.iter().map(|k| k.coords.clone()).collect::<Vec<_>>() == tr.clip.tracks
    });
    c.check(replays_ok && !labeled.is_empty(), format!("replay reproduces {} stored trajectories bit-exactly", labeled.len()));

    c.finish(2, "oracle suite", start, Duration::from_secs(60));
}

#[test]
fn criterion_3_action_blindness() {
    let start = Instant::now();
    let mut c = Checks::default();
    let dir = tempfile::tempdir().unwrap();
    let (plain, planted) = (dir.path().join("plain"), dir.path().join("planted"));
    let gen = GenConfig { n_trajectories: 60, image_size: 32, seed: 8, ..GenConfig::default() };
    generate_dataset(&gen, &plain).unwrap();
    generate_dataset(&gen, &planted).unwrap();
    let manifest = care_core::synthworld::dataset::DatasetManifest::load(&planted).unwrap();
    let mut n_planted = 0;
    for name in manifest.split(SPLIT_PRETRAIN).unwrap() {
        let p = planted.join(name).join("actions.bin");
        c.check(!plain.join(name).join("actions.bin").exists(), "pretrain split stores no actions");
        care_core::synthworld::dataset::write_tensor(&p, &[23, 3], &[0.5; 69]).unwrap();
        n_planted += 1;
    }
    let cfg = PretrainConfig { batch_size: 8, steps: 100, checkpoint_every: 0, seed: 2, model: desk_model(), ..PretrainConfig::default() };
    let (ra, rb) = (dir.path().join("run_a"), dir.path().join("run_b"));
    run_pretraining(&cfg, &plain, &ra).unwrap();
    run_pretraining(&cfg, &planted, &rb).unwrap();
    let (la, lb) = (fs::read(ra.join(METRICS_FILE)).unwrap(), fs::read(rb.join(METRICS_FILE)).unwrap());
    c.check(la == lb && !la.is_empty(), format!("metrics logs identical with {n_planted} planted action files"));
    c.finish(3, "action-blindness", start, Duration::from_secs(300));
}

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
}

#[test]
fn criterion_4_metric_calibration() {
    let start = Instant::now();
    let mut c = Checks::default();
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig { n_trajectories: 400, image_size: 32, seed: 12, labeled_fraction: 0.03, probe_fraction: 0.1, ..GenConfig::default() };
    generate_dataset(&gen, dir.path()).unwrap();

    let probe = load_labeled(dir.path(), SPLIT_PROBE, Exec::default()).unwrap();
    let split = trajectory_split(probe.len(), 0.7, 0);
    let (mut rows, mut train) = (Vec::new(), Vec::new());
    for (k, tr) in probe.iter().enumerate() {
        for a in &tr.actions {
            rows.push(a.to_array().iter().map(|&v| v as f64).collect::<Vec<_>>());
            train.push(split[k]);
        }
    }
    let y = to_matrix(&rows).unwrap();
    let cfg = ProbeConfig::default();
    let exact = lp_mse_features(&y, &y, &train, &cfg).unwrap();
    c.check(exact < 1e-3, format!("LP-MSE(ground truth) {exact:.2e}"));
    let n = y.nrows();
    let mut var = 0.0;
    for j in 0..3 {
        let tr: Vec<f64> = (0..n).filter(|&i| train[i]).map(|i| y[(i, j)]).collect();
        let mu = tr.iter().sum::<f64>() / tr.len() as f64;
        let sd = (tr.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / tr.len() as f64).sqrt();
        let te: Vec<f64> = (0..n).filter(|&i| !train[i]).map(|i| (y[(i, j)] - mu) / sd).collect();
        let m = te.iter().sum::<f64>() / te.len() as f64;
        var += te.iter().map(|v| (v - m).powi(2)).sum::<f64>() / te.len() as f64 / 3.0;
    }
    let random = lp_mse_features(&gaussian(n, 256, 3), &y, &train, &cfg).unwrap();
    c.check((random - var).abs() <= 0.1 * var, format!("LP-MSE(random z) {random:.3} vs test-action variance {var:.3}"));

    let z = gaussian(1000, 256, 4);
    let w = gaussian(256, 512, 5);
    let planted = &z * &w / 16.0 + gaussian(1000, 512, 6) * 0.05;
    let half = trajectory_split(1000, 0.5, 1);
    let (sp, _) = spcfc_features(&z, &planted, &half).unwrap();
    c.check(sp > 0.95, format!("S-PCFC(planted shortcut) {sp:.3}"));
    let (sn, _) = spcfc_features(&z, &gaussian(1000, 512, 7), &half).unwrap();
    c.check(sn < 0.1, format!("S-PCFC(independent noise) {sn:.3}"));

    let clips = load_clips(dir.path(), SPLIT_PRETRAIN, Exec::default()).unwrap();
    let (model, params) = CareModel::init::<f32>(&desk_model(), 1).unwrap();
    let em = EvalModel::from_parts(model, params, serde_json::json!({"calibration": true}));
    let f = semantic_features(&em, &clips, Exec::default()).unwrap();
    let chance = 1.0 / N_LABELS as f64;
    for v in [SemanticVariant::Initial, SemanticVariant::InitialLatents] {
        let r = semantic_accuracy_features(&f, v, &SemanticConfig { shuffle_labels: true, ..SemanticConfig::default() }).unwrap();
        c.check((r.value - chance).abs() <= 0.05, format!("shuffled-label accuracy {:.3} ({v:?}) vs chance {chance:.3}", r.value));
    }
    c.finish(4, "metric calibration", start, Duration::from_secs(300));
}

#[test]
fn criterion_9_checkpoint_round_trip() {
    let start = Instant::now();
    let mut c = Checks::default();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&GenConfig { n_trajectories: 40, image_size: 32, seed: 30, ..GenConfig::default() }, &data).unwrap();
    let cfg = PretrainConfig { batch_size: 8, steps: 30, checkpoint_every: 10, seed: 6, model: desk_model(), ..PretrainConfig::default() };

    let full = dir.path().join("full");
    let final_dir = run_pretraining(&cfg, &data, &full).unwrap();
    let (model, params, _) = load_pretrained(&final_dir).unwrap();
    let ck = care_core::checkpoint::Checkpoint::load(&final_dir).unwrap();
    let resaved = dir.path().join("resaved");
    ck.save(&resaved).unwrap();
    let (model2, params2, _) = load_pretrained(&resaved).unwrap();
    let world = WorldConfig::with_image_size(32);
    let mut same = true;
    for i in 0..10u64 {
        let (s, instr, _) = init_scene_for_label(500 + i, (i * 7) as usize % N_LABELS).unwrap();
        let f = render(&s, &world);
        let a = model.latent_value(&params, &f, &instr).unwrap();
        let b = model2.latent_value(&params2, &f, &instr).unwrap();
        same &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    c.check(same, "save, load, forward is bitwise-identical on 10 inputs");

    let resumed = dir.path().join("resumed");
    let stopped = run_pretraining_with(&cfg, &data, &resumed, RunOptions { exec: Exec::default(), interrupt_after: Some(17) }).unwrap();
    c.check(stopped.is_none(), "interrupted run stops early");
    run_pretraining(&cfg, &data, &resumed).unwrap();
    let (a, b) = (fs::read(full.join(METRICS_FILE)).unwrap(), fs::read(resumed.join(METRICS_FILE)).unwrap());
    c.check(a == b, "resumed run reproduces the uninterrupted metrics log");
    c.finish(9, "checkpoint round-trip", start, Duration::from_secs(600));
}

// Directional reproductions

struct Scale {
    name: &'static str,
    gen: GenConfig,
    pretrain: PretrainConfig,
    finetune: FinetuneConfig,
    seeds: Vec<u64>,
    episodes: usize,
}

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn scale() -> Scale {
    let full = std::env::var("CARE_ACCEPT_SCALE").is_ok_and(|v| v == "full");
    // the desk model needs a larger step size to move within its shorter budget
    let (name, model, batch, lr, steps) =
        if full { ("full", ModelConfig::default(), 32, 3e-4, 5000) } else { ("desk", desk_model(), 16, 1e-3, 5000) };
    let n_seeds: u64 = env_or("CARE_ACCEPT_SEEDS", 3);
    Scale {
        name,
        gen: GenConfig { n_trajectories: 2000, image_size: model.image_size, seed: 0, ..GenConfig::default() },
        pretrain: PretrainConfig {
            batch_size: batch,
            steps: env_or("CARE_ACCEPT_STEPS", steps),
            lr,
            checkpoint_every: 500,
            model: model.clone(),
            ..PretrainConfig::default()
        },
        finetune: FinetuneConfig { steps: env_or("CARE_ACCEPT_FT_STEPS", 2000), model, ..FinetuneConfig::default() },
        seeds: (0..n_seeds).collect(),
        episodes: 100,
    }
}

#[derive(Debug, Clone, Default)]
struct SeedResults {
    lp_mse: BTreeMap<&'static str, f64>,
    success: BTreeMap<&'static str, f64>,
    semantic: BTreeMap<SemanticVariantKey, f64>,
    spcfc_multi: f64,
    spcfc_shortcut: f64,
}

type SemanticVariantKey = &'static str;

struct Experiments {
    per_seed: Vec<SeedResults>,
    elapsed: Duration,
    scale: &'static str,
}

const OBJECTIVES: [(&str, Objective); 3] = [("multi", Objective::Multi), ("frame_only", Objective::FrameOnly), ("point_only", Objective::PointOnly)];

fn run_experiments() -> Experiments {
    let start = Instant::now();
    let sc = scale();
    let keep = std::env::var_os("CARE_ACCEPT_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf()).join(sc.name);
    let data = root.join("data");
    if !data.join("manifest.json").exists() {
        generate_dataset(&sc.gen, &data).unwrap();
    }
    let exec = Exec::default();
    let probe = load_labeled(&data, SPLIT_PROBE, exec).unwrap();
    let mut clips = load_clips(&data, SPLIT_PRETRAIN, exec).unwrap();
    clips.truncate(600);
    let eval_cfg = EvalConfig::default();

    let mut per_seed = Vec::new();
    for &seed in &sc.seeds {
        let mut r = SeedResults::default();
        let pretrain = |tag: &str, objective: Objective, context: FrameContext| {
            let mut cfg = PretrainConfig { objective, seed, ..sc.pretrain.clone() };
            cfg.model.frame_context = context;
            run_pretraining(&cfg, &data, &root.join(format!("{tag}_s{seed}"))).unwrap()
        };
        for (tag, objective) in OBJECTIVES {
            let ck = pretrain(tag, objective, FrameContext::Current);
            let em = EvalModel::load(&ck).unwrap();
            r.lp_mse.insert(tag, lp_mse(&em, &probe, &ProbeConfig { seed, ..ProbeConfig::default() }, exec).unwrap().value);
            if objective == Objective::Multi {
                r.spcfc_multi = spcfc(&em, &clips[..eval_cfg.spcfc_trajectories], seed, exec).unwrap().value;
                let f = semantic_features(&em, &clips, exec).unwrap();
                for v in [SemanticVariant::Initial, SemanticVariant::InitialRepeated, SemanticVariant::InitialLatents] {
                    let acc = semantic_accuracy_features(&f, v, &SemanticConfig { seed, ..SemanticConfig::default() }).unwrap();
                    r.semantic.insert(variant_name(v), acc.value);
                }
            }
            let ft = run_finetune(&FinetuneConfig { seed, ..sc.finetune.clone() }, Base::Pretrained(&ck), &data, &root.join(format!("{tag}_s{seed}_ft")), exec).unwrap();
            let em = EvalModel::load(&ft).unwrap();
            r.success.insert(tag, rollout_success(&em, sc.episodes, seed, sc.gen.horizon, exec).unwrap().value);
        }
        let ck = pretrain("shortcut", Objective::FrameOnly, FrameContext::Zeroed);
        let em = EvalModel::load(&ck).unwrap();
        r.spcfc_shortcut = spcfc(&em, &clips[..eval_cfg.spcfc_trajectories], seed, exec).unwrap().value;

        let ft = run_finetune(&FinetuneConfig { seed, ..sc.finetune.clone() }, Base::Scratch, &data, &root.join(format!("scratch_s{seed}_ft")), exec).unwrap();
        let em = EvalModel::load(&ft).unwrap();
        r.success.insert("scratch", rollout_success(&em, sc.episodes, seed, sc.gen.horizon, exec).unwrap().value);
        let _ = std::io::stderr().write_all(format!("seed {seed}: {r:?}\n").as_bytes());
        per_seed.push(r);
    }
    Experiments { per_seed, elapsed: start.elapsed(), scale: sc.name }
}

fn experiments() -> &'static Experiments {
    static E: OnceLock<Experiments> = OnceLock::new();
    E.get_or_init(run_experiments)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[test]
#[ignore = "trains and fine-tunes two dozen models; run with --include-ignored"]
fn criterion_5_objective_ablation() {
    let e = experiments();
    let lp_wins = e.per_seed.iter().filter(|r| r.lp_mse["multi"] < r.lp_mse["frame_only"] && r.lp_mse["multi"] < r.lp_mse["point_only"]).count();
    let sr_wins = e.per_seed.iter().filter(|r| r.success["multi"] > r.success["frame_only"] && r.success["multi"] > r.success["point_only"]).count();
    let need = e.per_seed.len().div_ceil(3) * 2;
    let pass = lp_wins >= need && sr_wins >= need;
    let col = |m: &dyn Fn(&SeedResults) -> f64| mean(e.per_seed.iter().map(m));
    let detail = format!(
        "{} scale; LP-MSE multi {:.3} frame {:.3} point {:.3} (multi lowest in {lp_wins}/{n}); SR multi {:.3} frame {:.3} point {:.3} (multi highest in {sr_wins}/{n}); all runs {:.1} min",
        e.scale,
        col(&|r| r.lp_mse["multi"]),
        col(&|r| r.lp_mse["frame_only"]),
        col(&|r| r.lp_mse["point_only"]),
        col(&|r| r.success["multi"]),
        col(&|r| r.success["frame_only"]),
        col(&|r| r.success["point_only"]),
        e.elapsed.as_secs_f64() / 60.0,
        n = e.per_seed.len(),
    );
    verdict(5, "objective ablation", pass, &detail, e.elapsed);
    assert!(pass, "{detail}");
}

#[test]
#[ignore = "trains and fine-tunes two dozen models; run with --include-ignored"]
fn criterion_6_semantic_accuracy() {
    let e = experiments();
    let s = |k: &str| mean(e.per_seed.iter().map(|r| r.semantic[k]));
    let (init, rep, lat) = (s("initial"), s("initial_repeated"), s("initial_latents"));
    let pass = lat - rep >= 0.15 && (rep - init).abs() <= 0.03;
    let detail = format!("initial {init:.3}, initial repeated {rep:.3}, initial + 9 latents {lat:.3}");
    verdict(6, "semantic accuracy", pass, &detail, e.elapsed);
    assert!(pass, "{detail}");
}

#[test]
#[ignore = "trains and fine-tunes two dozen models; run with --include-ignored"]
fn criterion_7_shortcut_diagnostic() {
    let e = experiments();
    let wins = e.per_seed.iter().filter(|r| r.spcfc_multi < r.spcfc_shortcut).count();
    let pass = wins >= e.per_seed.len().div_ceil(3) * 2;
    let detail = format!(
        "S-PCFC multi {:.3} vs shortcut-prone ablation {:.3}; lower in {wins}/{}",
        mean(e.per_seed.iter().map(|r| r.spcfc_multi)),
        mean(e.per_seed.iter().map(|r| r.spcfc_shortcut)),
        e.per_seed.len()
    );
    verdict(7, "shortcut diagnostic", pass, &detail, e.elapsed);
    assert!(pass, "{detail}");
}

#[test]
#[ignore = "trains and fine-tunes two dozen models; run with --include-ignored"]
fn criterion_8_finetuning_value() {
    let e = experiments();
    let pre = mean(e.per_seed.iter().map(|r| r.success["multi"]));
    let scratch = mean(e.per_seed.iter().map(|r| r.success["scratch"]));
    let pass = pre - scratch >= 0.10;
    let detail = format!("success pretrained+fine-tuned {pre:.3} vs from scratch {scratch:.3} (gap {:+.3}, need +0.100)", pre - scratch);
    verdict(8, "fine-tuning value", pass, &detail, e.elapsed);
    assert!(pass, "{detail}");
}
