//! On-tape assembly of node and edge features for one prediction step.
//!
//! Everything a particle or relation feeds into the network is a relative
//! quantity: velocities, offsets to the object's center of mass, rest-shape
//! offsets, displacements between endpoints, and clamped signed distances to
//! the environment's planes. Absolute positions never appear, which is what
//! makes the predictor translation equivariant by construction.
//!
//! Wall and finger planes are rebuilt on the tape from the control vector,
//! so gradients flow from the loss back into the controls (box position,
//! finger separation) as well as into particle state and object attributes.

use std::rc::Rc;

use nalgebra::Vector3;

use crate::autodiff::{Tape, TensorId};
use crate::scene::{
    EnvId, InteractionGraph, Material, ObjectAttr, ParticleSet, Relation, RelationKind,
    NO_CLUSTER, RELATION_ATTR_DIM,
};
use crate::{Error, Result};

/// Relative velocity (3) plus the relation attribute block (kind one-hot,
/// displacement, distance).
pub const EDGE_FEATURE_DIM: usize = 3 + RELATION_ATTR_DIM;

pub fn env_has_com_feature(env: EnvId) -> bool {
    matches!(env, EnvId::BoxBath | EnvId::RiceGrip)
}

pub fn env_has_rest_feature(env: EnvId) -> bool {
    matches!(env, EnvId::RiceGrip)
}

/// Per-node feature width: velocity, optional center-of-mass offset,
/// optional rest offset, object attributes, material one-hot, root flag,
/// clamped plane distances.
pub fn node_feature_dim(env: EnvId) -> usize {
    3 + if env_has_com_feature(env) { 3 } else { 0 }
        + if env_has_rest_feature(env) { 3 } else { 0 }
        + env.attr_dim()
        + Material::COUNT
        + 1
        + env.plane_count()
}

/// The differentiable inputs of one step, as tape tensors. Gradients of a
/// downstream loss with respect to any of these are available after
/// `backward`.
pub struct StepLeaves {
    /// Free (non-boundary) leaf positions, n_free x 3.
    pub positions: TensorId,
    pub velocities: TensorId,
    /// Resting positions; present only when the environment has elastic
    /// objects.
    pub rest: Option<TensorId>,
    /// Per-object attributes, n_obj x attr_dim; absent when attr_dim is 0.
    pub attrs: Option<TensorId>,
    /// Control describing the destination frame's walls, 1 x control_dim.
    pub control_next: Option<TensorId>,
    /// Control of the current frame, for wall velocities.
    pub control_cur: Option<TensorId>,
}

/// Predicted state tensors carried into the next chained step.
#[derive(Clone, Copy)]
pub struct ChainState {
    pub q: TensorId,
    pub v: TensorId,
    pub r: Option<TensorId>,
}

/// Inputs of one prediction step. `frame` always carries the current values
/// (the graph and boundary bookkeeping are built from it); the optional
/// tensor fields keep the step differentiable through quantities that
/// earlier tape operations produced. Whenever a tensor override is present
/// its value must equal the plain-value counterpart.
pub struct StepInput<'a> {
    pub frame: &'a ParticleSet,
    pub attrs: &'a [ObjectAttr],
    pub control_cur: Option<&'a [f32]>,
    pub control_next: &'a [f32],
    /// Free-leaf state predicted by a previous step on the same tape.
    pub state: Option<ChainState>,
    pub attrs_tensor: Option<TensorId>,
    pub control_cur_tensor: Option<TensorId>,
    pub control_next_tensor: Option<TensorId>,
}

impl<'a> StepInput<'a> {
    /// A step with no tensor overrides: every input becomes a fresh leaf.
    pub fn fresh(
        frame: &'a ParticleSet,
        attrs: &'a [ObjectAttr],
        control_cur: Option<&'a [f32]>,
        control_next: &'a [f32],
    ) -> Self {
        StepInput {
            frame,
            attrs,
            control_cur,
            control_next,
            state: None,
            attrs_tensor: None,
            control_cur_tensor: None,
            control_next_tensor: None,
        }
    }
}

/// A plane rebuilt on the tape.
pub struct TapePlane {
    pub normal: TensorId,   // 1 x 3
    pub offset: TensorId,   // 1 x 1
    pub velocity: TensorId, // 1 x 3
    pub boundary_index: Option<usize>,
}

/// Node bookkeeping shared by feature assembly, stages, and heads.
pub struct NodeLayout {
    pub n_leaf: usize,
    /// Leaves that the model predicts; boundary particles trail them.
    pub n_free: usize,
    pub n_root: usize,
    pub n_node: usize,
    pub boundary_start: usize,
    /// Object id per node (leaves then roots).
    pub node_object: Vec<u32>,
    pub node_material: Vec<Material>,
    /// Leaf row range per object.
    pub object_leaf_range: Vec<std::ops::Range<usize>>,
    /// Root row range per object within the root block (empty when the
    /// object has no hierarchy).
    pub object_root_range: Vec<std::ops::Range<usize>>,
    pub object_material: Vec<Material>,
}

pub fn node_layout(frame: &ParticleSet, graph: &InteractionGraph) -> Result<NodeLayout> {
    let n_leaf = frame.len();
    let boundary_start = frame
        .iter()
        .position(|p| p.material == Material::Boundary)
        .unwrap_or(n_leaf);
    for p in &frame.particles[boundary_start..] {
        if p.material != Material::Boundary {
            return Err(Error::Contract(
                "boundary particles must form the trailing block".into(),
            ));
        }
    }
    let n_objects = frame.object_count();
    let mut object_leaf_range = Vec::with_capacity(n_objects);
    let mut object_root_range = vec![0..0; n_objects];
    let mut object_material = Vec::with_capacity(n_objects);
    for oid in 0..n_objects as u32 {
        let r = frame.object_range(oid);
        if r.is_empty() {
            return Err(Error::Contract(format!("object {oid} has no particles")));
        }
        object_material.push(frame.particles[r.start].material);
        object_leaf_range.push(r);
    }
    let mut node_object: Vec<u32> = frame.iter().map(|p| p.object_id).collect();
    let mut node_material: Vec<Material> = frame.iter().map(|p| p.material).collect();
    let n_root = graph.root_count();
    if let Some(h) = &graph.hierarchy {
        let mut at = 0usize;
        let mut last_obj = None;
        for r in h.roots.iter() {
            node_object.push(r.object_id);
            node_material.push(r.material);
            if last_obj != Some(r.object_id) {
                object_root_range[r.object_id as usize] = at..at;
                last_obj = Some(r.object_id);
            }
            object_root_range[r.object_id as usize].end = at + 1;
            at += 1;
        }
    }
    Ok(NodeLayout {
        n_leaf,
        n_free: boundary_start,
        n_root,
        n_node: n_leaf + n_root,
        boundary_start,
        node_object,
        node_material,
        object_leaf_range,
        object_root_range,
        object_material,
    })
}

fn const_row3(tape: &mut Tape, v: Vector3<f32>) -> TensorId {
    tape.leaf(1, 3, vec![v.x, v.y, v.z])
}

fn const_scalar(tape: &mut Tape, v: f32) -> TensorId {
    tape.leaf(1, 1, vec![v])
}

fn ctrl_entry(tape: &mut Tape, ctrl: TensorId, i: usize) -> TensorId {
    tape.slice_cols(ctrl, i, i + 1)
}

/// Rebuild the environment's planes from the control tensors. Mirrors the
/// plain-value construction in the scene module, but differentiable.
pub fn tape_planes(
    tape: &mut Tape,
    env: EnvId,
    leaves: &StepLeaves,
    dt: f32,
) -> Result<Vec<TapePlane>> {
    let up = Vector3::new(0.0, 1.0, 0.0);
    let zero_vel = const_row3(tape, Vector3::zeros());
    let fixed = |tape: &mut Tape, n: Vector3<f32>, off: f32, zero_vel: TensorId| TapePlane {
        normal: const_row3(tape, n),
        offset: const_scalar(tape, off),
        velocity: zero_vel,
        boundary_index: None,
    };
    Ok(match env {
        EnvId::FluidFall => vec![fixed(tape, up, 0.0, zero_vel)],
        EnvId::BoxBath => {
            let [ex, _, ez] = crate::scene::BOX_BATH_EXTENT;
            vec![
                fixed(tape, up, 0.0, zero_vel),
                fixed(tape, Vector3::new(1.0, 0.0, 0.0), 0.0, zero_vel),
                fixed(tape, Vector3::new(-1.0, 0.0, 0.0), -ex, zero_vel),
                fixed(tape, Vector3::new(0.0, 0.0, 1.0), 0.0, zero_vel),
                fixed(tape, Vector3::new(0.0, 0.0, -1.0), -ez, zero_vel),
            ]
        }
        EnvId::FluidShake => {
            let ctrl = leaves
                .control_next
                .ok_or_else(|| Error::Contract("fluidshake step needs a control tensor".into()))?;
            let x = ctrl_entry(tape, ctrl, 0);
            let vx = ctrl_entry(tape, ctrl, 1);
            let hw = ctrl_entry(tape, ctrl, 2);
            let hd = ctrl_entry(tape, ctrl, 3);
            let zero = const_scalar(tape, 0.0);
            let vel = tape.concat_cols(&[vx, zero, zero]);
            let x_minus = tape.sub(x, hw);
            let x_plus_s = tape.add(x, hw);
            let x_plus = tape.scale(x_plus_s, -1.0);
            let hd_neg = tape.scale(hd, -1.0);
            let zero_off = const_scalar(tape, 0.0);
            let mk = |tape: &mut Tape, n: Vector3<f32>, off, b| TapePlane {
                normal: const_row3(tape, n),
                offset: off,
                velocity: vel,
                boundary_index: Some(b),
            };
            vec![
                mk(tape, up, zero_off, 0),
                mk(tape, Vector3::new(1.0, 0.0, 0.0), x_minus, 1),
                mk(tape, Vector3::new(-1.0, 0.0, 0.0), x_plus, 2),
                mk(tape, Vector3::new(0.0, 0.0, 1.0), hd_neg, 3),
                mk(tape, Vector3::new(0.0, 0.0, -1.0), hd_neg, 4),
            ]
        }
        EnvId::RiceGrip => {
            let ctrl = leaves
                .control_next
                .ok_or_else(|| Error::Contract("ricegrip step needs a control tensor".into()))?;
            let gx = ctrl_entry(tape, ctrl, 0);
            let gz = ctrl_entry(tape, ctrl, 1);
            let theta = ctrl_entry(tape, ctrl, 2);
            let sep = ctrl_entry(tape, ctrl, 3);
            let cos = tape.cos(theta);
            let sin = tape.sin(theta);
            let zero = const_scalar(tape, 0.0);
            let w = tape.concat_cols(&[cos, zero, sin]);
            let w_neg = tape.scale(w, -1.0);
            let gxc = tape.mul(gx, cos);
            let gzs = tape.mul(gz, sin);
            let cw = tape.add(gxc, gzs);
            let half = tape.scale(sep, 0.5);
            let plus_inner = tape.add(cw, half);
            let plus_off = tape.scale(plus_inner, -1.0);
            let minus_off = tape.sub(cw, half);
            // Plate velocity from the separation rate against the current
            // control; zero on the first frame.
            let (vel_plus, vel_minus) = if let Some(cur) = leaves.control_cur {
                let sep_cur = ctrl_entry(tape, cur, 3);
                let dsep = tape.sub(sep, sep_cur);
                let rate_half = tape.scale(dsep, 0.5 / dt);
                (tape.mul_scalar(w, rate_half), {
                    let r = tape.mul_scalar(w, rate_half);
                    tape.scale(r, -1.0)
                })
            } else {
                (zero_vel, zero_vel)
            };
            vec![
                fixed(tape, up, 0.0, zero_vel),
                TapePlane {
                    normal: w_neg,
                    offset: plus_off,
                    velocity: vel_plus,
                    boundary_index: Some(0),
                },
                TapePlane {
                    normal: w,
                    offset: minus_off,
                    velocity: vel_minus,
                    boundary_index: Some(1),
                },
            ]
        }
    })
}

/// Everything the propagation stages and output heads consume.
pub struct Assembled {
    pub leaves: StepLeaves,
    /// Positions of all nodes (leaves then roots), n_node x 3.
    pub q_all: TensorId,
    pub v_all: TensorId,
    /// Resting positions of all nodes, for environments with elastic
    /// objects.
    pub r_all: Option<TensorId>,
    /// Standardized node features, n_node x node_feature_dim.
    pub node_feats: TensorId,
    pub planes: Vec<TapePlane>,
    /// Center of mass per object (1 x 3), for objects with a hierarchy.
    pub coms: Vec<Option<TensorId>>,
    pub layout: NodeLayout,
}

/// Boundary particle face centers on the tape, one row per boundary
/// particle, built from the destination control. The y coordinate of grip
/// plates is carried over from the current frame (plates never move
/// vertically).
fn boundary_rows(
    tape: &mut Tape,
    env: EnvId,
    leaves: &StepLeaves,
    frame: &ParticleSet,
    layout: &NodeLayout,
    dt: f32,
) -> Result<Option<(TensorId, TensorId)>> {
    let n_b = layout.n_leaf - layout.boundary_start;
    if n_b == 0 {
        return Ok(None);
    }
    match env {
        EnvId::FluidFall | EnvId::BoxBath => Err(Error::Contract(format!(
            "{} frames carry no boundary particles",
            env.as_str()
        ))),
        EnvId::FluidShake => {
            if n_b != 5 {
                return Err(Error::Contract(format!(
                    "fluidshake expects 5 wall particles, found {n_b}"
                )));
            }
            let ctrl = leaves
                .control_next
                .ok_or_else(|| Error::Contract("fluidshake step needs a control tensor".into()))?;
            let x = ctrl_entry(tape, ctrl, 0);
            let vx = ctrl_entry(tape, ctrl, 1);
            let hw = ctrl_entry(tape, ctrl, 2);
            let hd = ctrl_entry(tape, ctrl, 3);
            let zero = const_scalar(tape, 0.0);
            let mid = const_scalar(tape, crate::scene::SHAKE_BOX_HEIGHT / 2.0);
            let x_lo = tape.sub(x, hw);
            let x_hi = tape.add(x, hw);
            let hd_neg = tape.scale(hd, -1.0);
            let rows = [
                tape.concat_cols(&[x, zero, zero]),
                tape.concat_cols(&[x_lo, mid, zero]),
                tape.concat_cols(&[x_hi, mid, zero]),
                tape.concat_cols(&[x, mid, hd_neg]),
                tape.concat_cols(&[x, mid, hd]),
            ];
            let q = tape.concat_rows(&rows);
            let vel_row = tape.concat_cols(&[vx, zero, zero]);
            let zeros_mat = tape.leaf(5, 3, vec![0.0; 15]);
            let v = tape.add_row(zeros_mat, vel_row);
            Ok(Some((q, v)))
        }
        EnvId::RiceGrip => {
            if n_b != 2 {
                return Err(Error::Contract(format!(
                    "ricegrip expects 2 finger particles, found {n_b}"
                )));
            }
            let ctrl = leaves
                .control_next
                .ok_or_else(|| Error::Contract("ricegrip step needs a control tensor".into()))?;
            let gx = ctrl_entry(tape, ctrl, 0);
            let gz = ctrl_entry(tape, ctrl, 1);
            let theta = ctrl_entry(tape, ctrl, 2);
            let sep = ctrl_entry(tape, ctrl, 3);
            let cos = tape.cos(theta);
            let sin = tape.sin(theta);
            let half = tape.scale(sep, 0.5);
            let dx = tape.mul(cos, half);
            let dz = tape.mul(sin, half);
            let height = const_scalar(tape, frame.particles[layout.boundary_start].position.y);
            let px = tape.add(gx, dx);
            let pz = tape.add(gz, dz);
            let mx = tape.sub(gx, dx);
            let mz = tape.sub(gz, dz);
            let row_p = tape.concat_cols(&[px, height, pz]);
            let row_m = tape.concat_cols(&[mx, height, mz]);
            let q = tape.concat_rows(&[row_p, row_m]);
            // Plate velocities: separation rate along +-w.
            // Plate velocity comes from the separation rate: the center and
            // theta are constant within a grip, so only separation moves
            // plates.
            let v = if let Some(cur) = leaves.control_cur {
                let sep_cur = ctrl_entry(tape, cur, 3);
                let dsep = tape.sub(sep, sep_cur);
                let rate_half = tape.scale(dsep, 0.5 / dt);
                let vx_p = tape.mul(cos, rate_half);
                let vz_p = tape.mul(sin, rate_half);
                let zero = const_scalar(tape, 0.0);
                let vx_m = tape.scale(vx_p, -1.0);
                let vz_m = tape.scale(vz_p, -1.0);
                let vp = tape.concat_cols(&[vx_p, zero, vz_p]);
                let vm = tape.concat_cols(&[vx_m, zero, vz_m]);
                tape.concat_rows(&[vp, vm])
            } else {
                tape.leaf(2, 3, vec![0.0; 6])
            };
            Ok(Some((q, v)))
        }
    }
}

/// Root rows as cluster means of their member leaves (positions,
/// velocities, or any other per-leaf matrix).
struct RootPool {
    members: Rc<Vec<u32>>,
    member_root: Rc<Vec<u32>>,
    inv_counts: Rc<Vec<f32>>,
    n_root: usize,
}

impl RootPool {
    fn build(graph: &InteractionGraph, layout: &NodeLayout) -> Option<Self> {
        let h = graph.hierarchy.as_ref()?;
        let mut members = Vec::new();
        let mut member_root = Vec::new();
        let mut counts = vec![0f32; layout.n_root];
        for (leaf, &c) in h.cluster_of.iter().enumerate() {
            if c != NO_CLUSTER {
                members.push(leaf as u32);
                member_root.push(c);
                counts[c as usize] += 1.0;
            }
        }
        Some(RootPool {
            members: Rc::new(members),
            member_root: Rc::new(member_root),
            inv_counts: Rc::new(counts.iter().map(|&c| 1.0 / c.max(1.0)).collect()),
            n_root: layout.n_root,
        })
    }

    fn pool(&self, tape: &mut Tape, leaf_mat: TensorId) -> TensorId {
        let gathered = tape.gather_rows(leaf_mat, self.members.clone());
        let sums = tape.scatter_add_rows(gathered, self.member_root.clone(), self.n_root);
        tape.scale_rows(sums, self.inv_counts.clone())
    }
}

/// Standardize rows: (x - mean) / std, with constant stats rows.
pub fn standardize(tape: &mut Tape, x: TensorId, mean: &[f32], std: &[f32]) -> TensorId {
    debug_assert_eq!(tape.cols(x), mean.len());
    let m = tape.leaf(1, mean.len(), mean.to_vec());
    let inv: Vec<f32> = std.iter().map(|&s| 1.0 / s).collect();
    let s = tape.leaf(1, inv.len(), inv);
    let centered = tape.sub_row(x, m);
    tape.mul_row(centered, s)
}

/// Undo output standardization: y * std + mean.
pub fn unstandardize(tape: &mut Tape, y: TensorId, mean: &[f32], std: &[f32]) -> TensorId {
    debug_assert_eq!(tape.cols(y), mean.len());
    let s = tape.leaf(1, std.len(), std.to_vec());
    let m = tape.leaf(1, mean.len(), mean.to_vec());
    let scaled = tape.mul_row(y, s);
    tape.add_row(scaled, m)
}

fn expect_shape(tape: &Tape, id: TensorId, rows: usize, cols: usize, what: &str) -> Result<()> {
    if tape.rows(id) != rows || tape.cols(id) != cols {
        return Err(Error::Contract(format!(
            "{what} override is {}x{}, expected {rows}x{cols}",
            tape.rows(id),
            tape.cols(id)
        )));
    }
    Ok(())
}

pub fn assemble(
    tape: &mut Tape,
    env: EnvId,
    inp: &StepInput,
    graph: &InteractionGraph,
    node_mean: &[f32],
    node_std: &[f32],
    clamp_dist: f32,
    dt: f32,
) -> Result<Assembled> {
    let frame = inp.frame;
    let layout = node_layout(frame, graph)?;
    let n_free = layout.n_free;

    // Differentiable state: chained tensors from a previous step, or fresh
    // leaves populated from the frame.
    let (positions, velocities, rest) = match inp.state {
        Some(chain) => {
            expect_shape(tape, chain.q, n_free, 3, "position")?;
            expect_shape(tape, chain.v, n_free, 3, "velocity")?;
            let rest = if env_has_rest_feature(env) {
                let r = chain.r.ok_or_else(|| {
                    Error::Contract("chained step lacks resting positions".into())
                })?;
                expect_shape(tape, r, n_free, 3, "resting position")?;
                Some(r)
            } else {
                None
            };
            (chain.q, chain.v, rest)
        }
        None => {
            let mut q_data = Vec::with_capacity(n_free * 3);
            let mut v_data = Vec::with_capacity(n_free * 3);
            let mut r_data = Vec::with_capacity(n_free * 3);
            for p in &frame.particles[..n_free] {
                q_data.extend_from_slice(p.position.as_slice());
                v_data.extend_from_slice(p.velocity.as_slice());
                r_data.extend_from_slice(p.resting_position.as_slice());
            }
            let q = tape.leaf(n_free, 3, q_data);
            let v = tape.leaf(n_free, 3, v_data);
            let r = env_has_rest_feature(env).then(|| tape.leaf(n_free, 3, r_data));
            (q, v, r)
        }
    };
    let attr_dim = env.attr_dim();
    if inp.attrs.len() != layout.object_leaf_range.len() {
        return Err(Error::Contract(format!(
            "{} objects but {} attribute entries",
            layout.object_leaf_range.len(),
            inp.attrs.len()
        )));
    }
    let attrs_id = match (attr_dim, inp.attrs_tensor) {
        (0, _) => None,
        (_, Some(a)) => {
            expect_shape(tape, a, inp.attrs.len(), attr_dim, "attribute")?;
            Some(a)
        }
        (_, None) => {
            let mut data = Vec::with_capacity(inp.attrs.len() * attr_dim);
            for (oid, a) in inp.attrs.iter().enumerate() {
                if a.attrs.len() != attr_dim {
                    return Err(Error::Contract(format!(
                        "object {oid}: {} attributes, expected {attr_dim}",
                        a.attrs.len()
                    )));
                }
                data.extend_from_slice(&a.attrs);
            }
            Some(tape.leaf(inp.attrs.len(), attr_dim, data))
        }
    };
    let cd = env.control_dim();
    if inp.control_next.len() != cd {
        return Err(Error::Contract(format!(
            "{} control has {} entries, expected {cd}",
            env.as_str(),
            inp.control_next.len()
        )));
    }
    let control_next_id = match inp.control_next_tensor {
        Some(c) => {
            expect_shape(tape, c, 1, cd, "control")?;
            Some(c)
        }
        None => (cd > 0).then(|| tape.leaf(1, cd, inp.control_next.to_vec())),
    };
    let control_cur_id = match inp.control_cur_tensor {
        Some(c) => {
            expect_shape(tape, c, 1, cd, "previous control")?;
            Some(c)
        }
        None => match inp.control_cur {
            Some(c) if cd > 0 => {
                if c.len() != cd {
                    return Err(Error::Contract(format!(
                        "{} previous control has {} entries, expected {cd}",
                        env.as_str(),
                        c.len()
                    )));
                }
                Some(tape.leaf(1, cd, c.to_vec()))
            }
            _ => None,
        },
    };
    let leaves = StepLeaves {
        positions,
        velocities,
        rest,
        attrs: attrs_id,
        control_next: control_next_id,
        control_cur: control_cur_id,
    };

    let planes = tape_planes(tape, env, &leaves, dt)?;

    // Leaf-position/velocity blocks: free leaves then scripted boundary rows.
    let (q_leaf, v_leaf) = match boundary_rows(tape, env, &leaves, frame, &layout, dt)? {
        Some((qb, vb)) => (
            tape.concat_rows(&[positions, qb]),
            tape.concat_rows(&[velocities, vb]),
        ),
        None => (positions, velocities),
    };
    let r_leaf = match (leaves.rest, layout.n_leaf - n_free) {
        (Some(r), 0) => Some(r),
        (Some(r), _) => {
            // Boundary rest equals position by invariant.
            let qb = tape.slice_rows(q_leaf, n_free, layout.n_leaf);
            Some(tape.concat_rows(&[r, qb]))
        }
        (None, _) => None,
    };

    // Root rows pooled from members.
    let pool = RootPool::build(graph, &layout);
    let (q_all, v_all, r_all) = match &pool {
        Some(p) => {
            let qr = p.pool(tape, q_leaf);
            let vr = p.pool(tape, v_leaf);
            let q_all = tape.concat_rows(&[q_leaf, qr]);
            let v_all = tape.concat_rows(&[v_leaf, vr]);
            let r_all = r_leaf.map(|r| {
                let rr = p.pool(tape, r);
                tape.concat_rows(&[r, rr])
            });
            (q_all, v_all, r_all)
        }
        None => (q_leaf, v_leaf, r_leaf),
    };

    // Per-object centers of mass (leaf mean), for hierarchical objects.
    let mut coms: Vec<Option<TensorId>> = Vec::with_capacity(layout.object_material.len());
    for (oid, m) in layout.object_material.iter().enumerate() {
        if m.hierarchical() {
            let r = &layout.object_leaf_range[oid];
            let rows = tape.slice_rows(q_all, r.start, r.end);
            coms.push(Some(tape.mean_rows(rows)));
        } else {
            coms.push(None);
        }
    }

    // Feature blocks, in a fixed column order.
    let mut blocks: Vec<TensorId> = vec![v_all];

    if env_has_com_feature(env) {
        // Offset to the object's center of mass, zero for non-hierarchical
        // objects; built per contiguous node segment.
        let mut segs = Vec::new();
        for (oid, r) in layout.object_leaf_range.iter().enumerate() {
            segs.push(match coms[oid] {
                Some(com) => {
                    let rows = tape.slice_rows(q_all, r.start, r.end);
                    tape.sub_row(rows, com)
                }
                None => tape.leaf(r.len(), 3, vec![0.0; r.len() * 3]),
            });
        }
        for (oid, r) in layout.object_root_range.iter().enumerate() {
            if r.is_empty() {
                continue;
            }
            let com = coms[oid].expect("roots imply a hierarchical object");
            let rows = tape.slice_rows(q_all, layout.n_leaf + r.start, layout.n_leaf + r.end);
            segs.push(tape.sub_row(rows, com));
        }
        blocks.push(tape.concat_rows(&segs));
    }

    if let Some(r_all_id) = r_all {
        blocks.push(tape.sub(r_all_id, q_all));
    }

    if let Some(a) = leaves.attrs {
        let idx = Rc::new(layout.node_object.clone());
        blocks.push(tape.gather_rows(a, idx));
    }

    let mut onehot = vec![0.0f32; layout.n_node * (Material::COUNT + 1)];
    for (i, m) in layout.node_material.iter().enumerate() {
        onehot[i * (Material::COUNT + 1) + m.one_hot_index()] = 1.0;
        if i >= layout.n_leaf {
            onehot[i * (Material::COUNT + 1) + Material::COUNT] = 1.0; // root flag
        }
    }
    blocks.push(tape.leaf(layout.n_node, Material::COUNT + 1, onehot));

    for plane in &planes {
        let n_col = tape.reshape(plane.normal, 3, 1);
        let s = tape.matmul(q_all, n_col);
        let s = tape.sub_row(s, plane.offset);
        blocks.push(tape.min_const(s, clamp_dist));
    }

    let raw = tape.concat_cols(&blocks);
    debug_assert_eq!(tape.cols(raw), node_feature_dim(env));
    let node_feats = standardize(tape, raw, node_mean, node_std);

    Ok(Assembled {
        leaves,
        q_all,
        v_all,
        r_all,
        node_feats,
        planes,
        coms,
        layout,
    })
}

/// One stage's edge set on the tape.
pub struct EdgeBatch {
    /// Standardized features, count x EDGE_FEATURE_DIM.
    pub feats: TensorId,
    /// Receiver/sender rows local to the stage's node range.
    pub recv: Rc<Vec<u32>>,
    pub send: Rc<Vec<u32>>,
    pub count: usize,
}

/// Build edge features for `edges`, with endpoint indices made local by
/// subtracting `local_base`. Particle-particle edges recompute displacement
/// and distance from on-tape positions; wall-contact edges project the
/// receiver onto the plane their boundary sender stands for.
pub fn edge_batch(
    tape: &mut Tape,
    asm: &Assembled,
    edges: &[Relation],
    local_base: usize,
    edge_mean: &[f32],
    edge_std: &[f32],
) -> Result<Option<EdgeBatch>> {
    if edges.is_empty() {
        return Ok(None);
    }
    let layout = &asm.layout;
    let mut pp: Vec<&Relation> = Vec::new();
    let mut by_plane: Vec<Vec<&Relation>> = vec![Vec::new(); asm.planes.len()];
    for e in edges {
        if e.kind == RelationKind::WallContact {
            let b = e.sender as usize - layout.boundary_start;
            let pi = asm
                .planes
                .iter()
                .position(|p| p.boundary_index == Some(b))
                .ok_or_else(|| {
                    Error::Contract(format!("wall edge names boundary {b} with no plane"))
                })?;
            by_plane[pi].push(e);
        } else {
            pp.push(e);
        }
    }

    let mut feat_parts = Vec::new();
    let mut recv = Vec::with_capacity(edges.len());
    let mut send = Vec::with_capacity(edges.len());
    let localize = |g: u32| -> Result<u32> {
        let l = (g as usize)
            .checked_sub(local_base)
            .ok_or_else(|| Error::Contract(format!("edge endpoint {g} below stage base")))?;
        Ok(l as u32)
    };

    let onehot_rows = |list: &[&Relation]| {
        let mut oh = vec![0.0f32; list.len() * crate::scene::RelationKind::COUNT];
        for (i, e) in list.iter().enumerate() {
            oh[i * crate::scene::RelationKind::COUNT + e.kind.one_hot_index()] = 1.0;
        }
        oh
    };

    if !pp.is_empty() {
        let rg: Rc<Vec<u32>> = Rc::new(pp.iter().map(|e| e.receiver).collect());
        let sg: Rc<Vec<u32>> = Rc::new(pp.iter().map(|e| e.sender).collect());
        let vr = tape.gather_rows(asm.v_all, rg.clone());
        let vs = tape.gather_rows(asm.v_all, sg.clone());
        let dv = tape.sub(vr, vs);
        let qr = tape.gather_rows(asm.q_all, rg.clone());
        let qs = tape.gather_rows(asm.q_all, sg.clone());
        let disp = tape.sub(qr, qs);
        let sq = tape.mul(disp, disp);
        let d2 = tape.sum_cols(sq);
        let d2e = tape.add_const(d2, 1e-12);
        let dist = tape.sqrt(d2e);
        let oh = tape.leaf(pp.len(), crate::scene::RelationKind::COUNT, onehot_rows(&pp));
        feat_parts.push(tape.concat_cols(&[dv, oh, disp, dist]));
        for e in &pp {
            recv.push(localize(e.receiver)?);
            send.push(localize(e.sender)?);
        }
    }

    for (pi, list) in by_plane.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let plane = &asm.planes[pi];
        let rg: Rc<Vec<u32>> = Rc::new(list.iter().map(|e| e.receiver).collect());
        let qr = tape.gather_rows(asm.q_all, rg.clone());
        let n_col = tape.reshape(plane.normal, 3, 1);
        let s_raw = tape.matmul(qr, n_col);
        let s = tape.sub_row(s_raw, plane.offset);
        let disp = tape.matmul(s, plane.normal);
        let s2 = tape.mul(s, s);
        let s2e = tape.add_const(s2, 1e-12);
        let dist = tape.sqrt(s2e);
        let vr = tape.gather_rows(asm.v_all, rg);
        let dv = tape.sub_row(vr, plane.velocity);
        let oh = tape.leaf(list.len(), crate::scene::RelationKind::COUNT, onehot_rows(list));
        feat_parts.push(tape.concat_cols(&[dv, oh, disp, dist]));
        for e in list {
            recv.push(localize(e.receiver)?);
            send.push(localize(e.sender)?);
        }
    }

    let raw = if feat_parts.len() == 1 {
        feat_parts[0]
    } else {
        tape.concat_rows(&feat_parts)
    };
    debug_assert_eq!(tape.cols(raw), EDGE_FEATURE_DIM);
    let feats = standardize(tape, raw, edge_mean, edge_std);
    Ok(Some(EdgeBatch {
        feats,
        recv: Rc::new(recv),
        send: Rc::new(send),
        count: edges.len(),
    }))
}
