//! The learned dynamics model: a hierarchical particle-interaction network
//! that predicts the next frame from the current one.
//!
//! One prediction step builds the interaction graph for the current frame,
//! assembles relative node and edge features on the autodiff tape, runs the
//! stage schedule (a single leaf stage, or leaf/up/root/down for
//! environments with rigid or elastic objects), and integrates the heads'
//! velocity predictions into next positions. Because the whole step lives
//! on one tape, a scalar loss downstream of `TapeStep` yields gradients
//! with respect to network parameters, particle state, controls, and object
//! attributes alike; the last two are what trajectory optimization and
//! system identification consume.

mod features;
mod heads;
mod stages;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, TensorId};
use crate::graph::{build_graph, GraphConfig, HierarchyCache};
use crate::scene::{EnvId, Material, ObjectAttr, ParticleSet, ParticleState};
use crate::{Error, Result};

pub use features::{
    assemble, edge_batch, env_has_com_feature, env_has_rest_feature, node_feature_dim,
    node_layout, standardize, unstandardize, Assembled, ChainState, EdgeBatch, NodeLayout,
    StepInput, StepLeaves, TapePlane, EDGE_FEATURE_DIM,
};
pub use heads::{head_plan, Heads, Prediction};
pub use stages::{plan_stages, run_stages, stage_kinds, StageKind, StageParams, StagePlan};

/// Architecture and step-count knobs. The defaults are the trained
/// configuration; tests shrink them for speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of node/edge encodings and the hidden state.
    pub effect_dim: usize,
    pub node_enc_hidden: Vec<usize>,
    pub rel_enc_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    /// Propagation steps of the leaf stage.
    pub leaf_steps: usize,
    /// Propagation steps of the leaf-to-root and root-to-leaf stages.
    pub updown_steps: usize,
    /// Propagation steps of the root-to-root stage.
    pub root_steps: usize,
    /// One shared per-particle head instead of material-specific heads.
    pub unified_heads: bool,
    /// Cap on predicted velocities, m/s.
    pub velocity_clamp: f32,
    pub graph: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            effect_dim: 200,
            node_enc_hidden: vec![200, 200],
            rel_enc_hidden: vec![300, 300, 300],
            head_hidden: vec![200, 200],
            leaf_steps: 2,
            updown_steps: 1,
            root_steps: 2,
            unified_heads: false,
            velocity_clamp: 1e3,
            graph: GraphConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        if self.effect_dim == 0 {
            return Err(Error::Config("effect_dim must be positive".into()));
        }
        if self.leaf_steps == 0 || self.updown_steps == 0 || self.root_steps == 0 {
            return Err(Error::Config("propagation step counts must be positive".into()));
        }
        if !(self.velocity_clamp > 0.0) {
            return Err(Error::Config("velocity_clamp must be positive".into()));
        }
        Ok(())
    }
}

/// Environments whose objects get root hierarchies.
pub fn env_hierarchical(env: EnvId) -> bool {
    matches!(env, EnvId::BoxBath | EnvId::RiceGrip)
}

/// Feature and output standardization, estimated from training data. The
/// identity stats leave everything untouched, so an untrained model is
/// usable (and testable) without a stats pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub node_mean: Vec<f32>,
    pub node_std: Vec<f32>,
    pub edge_mean: Vec<f32>,
    pub edge_std: Vec<f32>,
    /// Output stats keyed by head name.
    pub head_mean: BTreeMap<String, Vec<f32>>,
    pub head_std: BTreeMap<String, Vec<f32>>,
}

impl Stats {
    pub fn identity(env: EnvId, unified_heads: bool) -> Self {
        let nf = node_feature_dim(env);
        let mut head_mean = BTreeMap::new();
        let mut head_std = BTreeMap::new();
        for (name, dim) in head_plan(env, unified_heads) {
            head_mean.insert(name.to_string(), vec![0.0; dim]);
            head_std.insert(name.to_string(), vec![1.0; dim]);
        }
        Stats {
            node_mean: vec![0.0; nf],
            node_std: vec![1.0; nf],
            edge_mean: vec![0.0; EDGE_FEATURE_DIM],
            edge_std: vec![1.0; EDGE_FEATURE_DIM],
            head_mean,
            head_std,
        }
    }

    fn check(&self, env: EnvId, unified_heads: bool) -> Result<()> {
        let nf = node_feature_dim(env);
        if self.node_mean.len() != nf || self.node_std.len() != nf {
            return Err(Error::Contract(format!(
                "node stats have {} entries, environment wants {nf}",
                self.node_mean.len()
            )));
        }
        if self.edge_mean.len() != EDGE_FEATURE_DIM || self.edge_std.len() != EDGE_FEATURE_DIM {
            return Err(Error::Contract("edge stats have the wrong width".into()));
        }
        for (name, dim) in head_plan(env, unified_heads) {
            let ok = self.head_mean.get(name).map(|v| v.len()) == Some(dim)
                && self.head_std.get(name).map(|v| v.len()) == Some(dim);
            if !ok {
                return Err(Error::Contract(format!("head {name} stats missing or wrong width")));
            }
        }
        let all = self
            .node_std
            .iter()
            .chain(&self.edge_std)
            .chain(self.head_std.values().flatten());
        for &s in all {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Contract("standardization stds must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One prediction step recorded on a tape. Callers attach a loss to
/// `next_q`/`next_r` (or chain further steps) and call `backward`.
pub struct TapeStep {
    /// The step's differentiable inputs.
    pub leaves: StepLeaves,
    /// n_free x 3 predicted next positions.
    pub next_q: TensorId,
    pub next_v: TensorId,
    pub next_r: TensorId,
    pub n_free: usize,
}

impl TapeStep {
    /// The predicted state tensors, ready to seed the next chained step.
    pub fn chain(&self) -> ChainState {
        ChainState {
            q: self.next_q,
            v: self.next_v,
            r: Some(self.next_r),
        }
    }
}

pub struct DpiModel {
    env: EnvId,
    cfg: ModelConfig,
    pub store: ParamStore,
    pub stats: Stats,
    stages: Vec<StageParams>,
    heads: Heads,
}

const MODEL_RNG_STREAM: u64 = 0x4d4f_4445;

fn meta_json(env: EnvId, cfg: &ModelConfig, stats: &Stats) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "kind": "dpi-model",
        "version": 1u32,
        "env": env.as_str(),
        "model": serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
        "stats": serde_json::to_value(stats).map_err(|e| Error::Format(e.to_string()))?,
    }))
}

impl DpiModel {
    /// Fresh random parameters and identity stats.
    pub fn init(env: EnvId, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut store = ParamStore::new();
        let mut rng = crate::stream_rng(seed, MODEL_RNG_STREAM);
        let nf = node_feature_dim(env);
        let kinds = stage_kinds(cfg.graph.hierarchy && env_hierarchical(env));
        let mut stages = Vec::with_capacity(kinds.len());
        for kind in kinds {
            stages.push(StageParams::init(&mut store, kind, &cfg, nf, &mut rng)?);
        }
        let heads = Heads::init(&mut store, env, &cfg, &mut rng)?;
        let stats = Stats::identity(env, cfg.unified_heads);
        Ok(DpiModel {
            env,
            cfg,
            store,
            stats,
            stages,
            heads,
        })
    }

    /// Bind to externally constructed parameters (a loaded checkpoint).
    pub fn from_store(env: EnvId, cfg: ModelConfig, stats: Stats, store: ParamStore) -> Result<Self> {
        cfg.check()?;
        stats.check(env, cfg.unified_heads)?;
        let nf = node_feature_dim(env);
        let kinds = stage_kinds(cfg.graph.hierarchy && env_hierarchical(env));
        let mut stages = Vec::with_capacity(kinds.len());
        for kind in kinds {
            stages.push(StageParams::bind(&store, kind, &cfg, nf)?);
        }
        let heads = Heads::bind(&store, env, &cfg)?;
        Ok(DpiModel {
            env,
            cfg,
            store,
            stats,
            stages,
            heads,
        })
    }

    pub fn env(&self) -> EnvId {
        self.env
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.store.iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = meta_json(self.env, &self.cfg, &self.stats)?;
        crate::io::save_checkpoint(path, &self.store, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = crate::io::load_checkpoint(path)?;
        let kind = meta.get("kind").and_then(|v| v.as_str()).unwrap_or("");
        if kind != "dpi-model" {
            return Err(Error::Format(format!(
                "{}: not a model checkpoint (kind {kind:?})",
                path.display()
            )));
        }
        let env = EnvId::parse(
            meta.get("env")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Format("checkpoint meta lacks env".into()))?,
        )?;
        let cfg: ModelConfig = serde_json::from_value(
            meta.get("model")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint meta lacks model config".into()))?,
        )
        .map_err(|e| Error::Format(format!("model config: {e}")))?;
        let stats: Stats = serde_json::from_value(
            meta.get("stats")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint meta lacks stats".into()))?,
        )
        .map_err(|e| Error::Format(format!("stats: {e}")))?;
        Self::from_store(env, cfg, stats, store)
    }

    /// Record one prediction step on `tape`. `control_next` describes the
    /// destination frame's walls (matching how recorded rollouts index
    /// controls); `control_cur` supplies wall velocities and may be absent
    /// on the first frame. Chained steps pass the previous step's output
    /// tensors through `StepInput`.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape,
        inp: &StepInput,
        dt: f32,
        cache: &mut HierarchyCache,
    ) -> Result<TapeStep> {
        let graph = build_graph(inp.frame, self.env, inp.control_next, &self.cfg.graph, cache)?;
        self.step_with_graph(tape, inp, &graph, dt)
    }

    /// Record one step against a caller-supplied interaction graph. The
    /// graph is the step's one discrete input; holding it fixed makes the
    /// rest of the step a smooth function of state, controls, and
    /// attributes (which finite-difference checks rely on).
    pub fn step_with_graph(
        &self,
        tape: &mut Tape,
        inp: &StepInput,
        graph: &crate::scene::InteractionGraph,
        dt: f32,
    ) -> Result<TapeStep> {
        if !(dt > 0.0) {
            return Err(Error::Contract("dt must be positive".into()));
        }
        let asm = features::assemble(
            tape,
            self.env,
            inp,
            graph,
            &self.stats.node_mean,
            &self.stats.node_std,
            self.cfg.graph.neighbor_radius,
            dt,
        )?;
        let kinds: Vec<StageKind> = self.stages.iter().map(|s| s.kind).collect();
        let plans = plan_stages(
            tape,
            &asm,
            graph,
            &self.cfg,
            &kinds,
            &self.stats.edge_mean,
            &self.stats.edge_std,
        )?;
        let (h_all, c_leaf) = run_stages(tape, &self.store, &self.stages, &plans, &asm, self.cfg.effect_dim)?;
        let pred = heads::predict(
            tape,
            &self.store,
            &self.heads,
            &asm,
            h_all,
            c_leaf,
            &self.stats,
            &self.cfg,
            dt,
        )?;
        let n_free = asm.layout.n_free;
        Ok(TapeStep {
            leaves: asm.leaves,
            next_q: pred.next_q,
            next_v: pred.next_v,
            next_r: pred.next_r,
            n_free,
        })
    }

    /// Predict the next frame as plain values, including the scripted
    /// boundary particles.
    pub fn step(
        &self,
        frame: &ParticleSet,
        attrs: &[ObjectAttr],
        control_cur: Option<&[f32]>,
        control_next: &[f32],
        dt: f32,
        cache: &mut HierarchyCache,
    ) -> Result<ParticleSet> {
        let mut tape = Tape::new();
        let inp = StepInput::fresh(frame, attrs, control_cur, control_next);
        let step = self.step_on_tape(&mut tape, &inp, dt, cache)?;
        materialize_next(&tape, &step, frame, self.env, control_next, dt)
    }
}

/// Read a recorded step's predicted tensors into a full next frame,
/// rebuilding the scripted boundary particles from the control.
pub fn materialize_next(
    tape: &Tape,
    step: &TapeStep,
    frame: &ParticleSet,
    env: EnvId,
    control_next: &[f32],
    dt: f32,
) -> Result<ParticleSet> {
    let q = tape.value(step.next_q);
    let v = tape.value(step.next_v);
    let r = tape.value(step.next_r);
    let n_free = step.n_free;
    let mut particles = Vec::with_capacity(frame.len());
    for (i, p) in frame.particles[..n_free].iter().enumerate() {
        let at = |d: &[f32]| Vector3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2]);
        particles.push(ParticleState {
            position: at(q),
            velocity: at(v),
            resting_position: at(r),
            object_id: p.object_id,
            material: p.material,
        });
    }
    let centers = boundary_centers(env, control_next, &frame.particles[n_free..])?;
    for (p, c) in frame.particles[n_free..].iter().zip(centers) {
        particles.push(ParticleState {
            position: c,
            velocity: (c - p.position) / dt,
            resting_position: c,
            object_id: p.object_id,
            material: p.material,
        });
    }
    let set = ParticleSet::new(particles);
    if set
        .iter()
        .any(|p| !p.position.iter().all(|v| v.is_finite()) || !p.velocity.iter().all(|v| v.is_finite()))
    {
        return Err(Error::Runtime("model step produced non-finite state".into()));
    }
    Ok(set)
}

/// Face centers of the boundary particles under `control`.
pub(crate) fn boundary_centers(
    env: EnvId,
    control: &[f32],
    boundary: &[ParticleState],
) -> Result<Vec<Vector3<f32>>> {
    if boundary.is_empty() {
        return Ok(vec![]);
    }
    if boundary.iter().any(|p| p.material != Material::Boundary) {
        return Err(Error::Contract("trailing block must be boundary particles".into()));
    }
    match env {
        EnvId::FluidFall | EnvId::BoxBath => Err(Error::Contract(format!(
            "{} frames carry no boundary particles",
            env.as_str()
        ))),
        EnvId::FluidShake => {
            if boundary.len() != 5 || control.len() != 4 {
                return Err(Error::Contract("fluidshake expects 5 wall particles".into()));
            }
            Ok(crate::oracle::shake_wall_centers(control[0], control[2], control[3]).to_vec())
        }
        EnvId::RiceGrip => {
            if boundary.len() != 2 || control.len() != 4 {
                return Err(Error::Contract("ricegrip expects 2 finger particles".into()));
            }
            Ok(crate::oracle::grip_finger_centers(control, boundary[0].position.y).to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{sample_setup, EnvSpec, SceneSetup};

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.effect_dim = 16;
        cfg.node_enc_hidden = vec![16];
        cfg.rel_enc_hidden = vec![16];
        cfg.head_hidden = vec![16];
        cfg.graph.rigid_roots = 4;
        cfg.graph.elastic_roots = 4;
        cfg
    }

    fn tiny_scene(env: EnvId, seed: u64) -> SceneSetup {
        let mut spec = EnvSpec::defaults(env);
        spec.rollout_len = 3;
        spec.fall_drops = (2, 2);
        spec.bath_fluid = (3, 3, 2);
        spec.bath_cube = 2;
        spec.shake_nx = (3, 3);
        spec.shake_ny = (3, 3);
        spec.shake_nz = 2;
        spec.rice_side = 3;
        let mut rng = crate::stream_rng(seed, 7);
        sample_setup(&spec, &mut rng, 1.0 / 60.0).unwrap()
    }

    #[test]
    fn node_feature_widths_per_environment() {
        assert_eq!(node_feature_dim(EnvId::FluidFall), 10);
        assert_eq!(node_feature_dim(EnvId::BoxBath), 16);
        assert_eq!(node_feature_dim(EnvId::FluidShake), 13);
        assert_eq!(node_feature_dim(EnvId::RiceGrip), 20);
        assert_eq!(EDGE_FEATURE_DIM, 13);
    }

    #[test]
    fn stage_schedule_tracks_environment_and_ablation() {
        let m = DpiModel::init(EnvId::FluidFall, tiny_cfg(), 1).unwrap();
        assert_eq!(m.stages.len(), 1);
        let m = DpiModel::init(EnvId::BoxBath, tiny_cfg(), 1).unwrap();
        assert_eq!(m.stages.len(), 4);
        assert!(m.store.slot("stage.root.rel_prop.w0").is_some());
        assert!(m.store.slot("head.rigid.w0").is_some());
        assert!(m.store.slot("head.fluid.w0").is_some());

        let mut flat = tiny_cfg();
        flat.graph.hierarchy = false;
        let m = DpiModel::init(EnvId::BoxBath, flat, 1).unwrap();
        assert_eq!(m.stages.len(), 1);
        assert!(m.store.slot("stage.root.rel_prop.w0").is_none());

        let mut unified = tiny_cfg();
        unified.unified_heads = true;
        let m = DpiModel::init(EnvId::BoxBath, unified, 1).unwrap();
        assert!(m.store.slot("head.unified.w0").is_some());
        assert!(m.store.slot("head.rigid.w0").is_none());
    }

    #[test]
    fn identity_stats_match_environment_widths() {
        for env in EnvId::ALL {
            let s = Stats::identity(env, false);
            s.check(env, false).unwrap();
            assert_eq!(s.node_mean.len(), node_feature_dim(env));
            let mut bad = s.clone();
            bad.node_std[0] = 0.0;
            assert!(bad.check(env, false).is_err());
            let mut bad = s;
            bad.edge_mean.pop();
            assert!(bad.check(env, false).is_err());
        }
    }

    #[test]
    fn config_rejects_degenerate_values() {
        let mut cfg = tiny_cfg();
        cfg.leaf_steps = 0;
        assert!(cfg.check().is_err());
        let mut cfg = tiny_cfg();
        cfg.effect_dim = 0;
        assert!(cfg.check().is_err());
        let mut cfg = tiny_cfg();
        cfg.velocity_clamp = 0.0;
        assert!(cfg.check().is_err());
    }

    #[test]
    fn save_load_roundtrip_preserves_prediction() {
        let scene = tiny_scene(EnvId::BoxBath, 11);
        let model = DpiModel::init(EnvId::BoxBath, tiny_cfg(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = DpiModel::load(&path).unwrap();
        assert_eq!(loaded.env(), EnvId::BoxBath);
        assert_eq!(loaded.cfg(), model.cfg());
        assert_eq!(loaded.stats, model.stats);
        assert_eq!(loaded.param_count(), model.param_count());

        let mut cache = HierarchyCache::new();
        let a = model
            .step(&scene.particles, &scene.attrs, None, &[], 1.0 / 60.0, &mut cache)
            .unwrap();
        cache.clear();
        let b = loaded
            .step(&scene.particles, &scene.attrs, None, &[], 1.0 / 60.0, &mut cache)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_foreign_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let store = ParamStore::new();
        let meta = serde_json::json!({"kind": "something-else"});
        crate::io::save_checkpoint(&path, &store, &meta).unwrap();
        let Err(err) = DpiModel::load(&path) else {
            panic!("foreign checkpoint loaded")
        };
        assert!(err.to_string().contains("not a model checkpoint"), "{err}");
    }

    #[test]
    fn same_seed_same_model_different_seed_different() {
        let a = DpiModel::init(EnvId::FluidShake, tiny_cfg(), 5).unwrap();
        let b = DpiModel::init(EnvId::FluidShake, tiny_cfg(), 5).unwrap();
        let c = DpiModel::init(EnvId::FluidShake, tiny_cfg(), 6).unwrap();
        for ((na, ta), (nb, tb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
        let differs = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|((_, ta), (_, tc))| ta.data != tc.data);
        assert!(differs);

        let scene = tiny_scene(EnvId::FluidShake, 2);
        let mut cache = HierarchyCache::new();
        let fa = a
            .step(
                &scene.particles,
                &scene.attrs,
                Some(&scene.controls[0]),
                &scene.controls[1],
                1.0 / 60.0,
                &mut cache,
            )
            .unwrap();
        let fb = b
            .step(
                &scene.particles,
                &scene.attrs,
                Some(&scene.controls[0]),
                &scene.controls[1],
                1.0 / 60.0,
                &mut cache,
            )
            .unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn zeroed_parameters_freeze_free_particles() {
        // With all weights and biases zero the heads output zero velocity,
        // the rigid quaternion collapses to identity, and every free
        // particle keeps its position; boundary particles still follow the
        // control script.
        for env in EnvId::ALL {
            let scene = tiny_scene(env, 9);
            let mut model = DpiModel::init(env, tiny_cfg(), 1).unwrap();
            let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
            for n in names {
                let slot = model.store.slot(&n).unwrap();
                let t = model.store.tensor_mut(slot);
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
            let mut cache = HierarchyCache::new();
            let (c0, c1): (Option<&[f32]>, &[f32]) = if scene.controls.is_empty() {
                (None, &[])
            } else {
                (Some(&scene.controls[0]), &scene.controls[1])
            };
            let next = model
                .step(&scene.particles, &scene.attrs, c0, c1, 1.0 / 60.0, &mut cache)
                .unwrap();
            let n_free = scene
                .particles
                .iter()
                .filter(|p| p.material != Material::Boundary)
                .count();
            for (a, b) in scene.particles.particles[..n_free]
                .iter()
                .zip(&next.particles[..n_free])
            {
                assert!((a.position - b.position).norm() < 1e-6);
                assert!((a.resting_position - b.resting_position).norm() < 1e-6);
            }
        }
    }
}
