//! Shared data model: particles, materials, objects, relations, interaction
//! graphs, and rollouts.

mod geometry;

pub use geometry::{planes, planes_with_motion, Plane, BOX_BATH_EXTENT, SHAKE_BOX_HEIGHT};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Material {
    Fluid,
    Rigid,
    ElasticPlastic,
    /// Wall and finger particles scripted by the environment.
    Boundary,
}

impl Material {
    pub const COUNT: usize = 4;

    pub fn one_hot_index(self) -> usize {
        match self {
            Material::Fluid => 0,
            Material::Rigid => 1,
            Material::ElasticPlastic => 2,
            Material::Boundary => 3,
        }
    }

    pub fn from_index(i: u8) -> Result<Material> {
        Ok(match i {
            0 => Material::Fluid,
            1 => Material::Rigid,
            2 => Material::ElasticPlastic,
            3 => Material::Boundary,
            _ => return Err(Error::Format(format!("unknown material code {i}"))),
        })
    }

    /// Objects of this material get a root hierarchy.
    pub fn hierarchical(self) -> bool {
        matches!(self, Material::Rigid | Material::ElasticPlastic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    /// Observed position q, meters.
    pub position: Vector3<f32>,
    /// Velocity, m/s.
    pub velocity: Vector3<f32>,
    /// Resting position r. Meaningful only for ElasticPlastic; other
    /// materials keep it equal to `position` for a uniform layout.
    pub resting_position: Vector3<f32>,
    pub object_id: u32,
    pub material: Material,
}

impl ParticleState {
    pub fn at_rest(position: Vector3<f32>, object_id: u32, material: Material) -> Self {
        ParticleState {
            position,
            velocity: Vector3::zeros(),
            resting_position: position,
            object_id,
            material,
        }
    }

    fn check(&self, idx: usize) -> Result<()> {
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.resting_position.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Contract(format!("particle {idx}: non-finite state")));
        }
        if self.material != Material::ElasticPlastic && self.resting_position != self.position {
            return Err(Error::Contract(format!(
                "particle {idx}: resting position must track position for {:?}",
                self.material
            )));
        }
        Ok(())
    }
}

/// An ordered collection of particles. Ordering is identity: objects occupy
/// contiguous index ranges and the ordering is stable across the frames of a
/// rollout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<ParticleState>,
}

impl ParticleSet {
    pub fn new(particles: Vec<ParticleState>) -> Self {
        ParticleSet { particles }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParticleState> {
        self.particles.iter()
    }

    /// Index range of one object (objects are contiguous).
    pub fn object_range(&self, object_id: u32) -> std::ops::Range<usize> {
        let start = self
            .particles
            .iter()
            .position(|p| p.object_id == object_id)
            .unwrap_or(self.particles.len());
        let end = self.particles[start..]
            .iter()
            .position(|p| p.object_id != object_id)
            .map(|off| start + off)
            .unwrap_or(self.particles.len());
        start..end
    }

    pub fn object_count(&self) -> usize {
        self.particles
            .iter()
            .map(|p| p.object_id)
            .max()
            .map(|m| m as usize + 1)
            .unwrap_or(0)
    }
}

/// Mean position under unit particle mass.
pub fn center_of_mass(particles: &[ParticleState]) -> Result<Vector3<f32>> {
    if particles.is_empty() {
        return Err(Error::Contract("center of mass of an empty object".into()));
    }
    let sum: Vector3<f32> = particles.iter().map(|p| p.position).sum();
    Ok(sum / particles.len() as f32)
}

/// Per-object physical attributes with a fixed, environment-specific slot
/// layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAttr {
    pub attrs: Vec<f32>,
    /// Free for online system identification when true.
    pub learnable: bool,
}

impl ObjectAttr {
    pub fn fixed(attrs: Vec<f32>) -> Self {
        ObjectAttr {
            attrs,
            learnable: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    LeafNeighbor,
    CrossMaterial,
    LeafToRoot,
    RootToLeaf,
    RootToRoot,
    WallContact,
}

impl RelationKind {
    pub const COUNT: usize = 6;

    pub fn one_hot_index(self) -> usize {
        match self {
            RelationKind::LeafNeighbor => 0,
            RelationKind::CrossMaterial => 1,
            RelationKind::LeafToRoot => 2,
            RelationKind::RootToLeaf => 3,
            RelationKind::RootToRoot => 4,
            RelationKind::WallContact => 5,
        }
    }
}

/// Relation attribute layout: one-hot kind, displacement q_u - q_v, distance.
pub const RELATION_ATTR_DIM: usize = RelationKind::COUNT + 4;

/// A directed edge: effects flow from sender v to receiver u.
#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub receiver: u32,
    pub sender: u32,
    pub kind: RelationKind,
    /// Displacement q_u - q_v and its norm, frozen at graph-build time.
    /// Differentiable consumers recompute these from state; see dpi model.
    pub displacement: Vector3<f32>,
    pub distance: f32,
}

impl Relation {
    pub fn attr(&self) -> [f32; RELATION_ATTR_DIM] {
        let mut a = [0.0; RELATION_ATTR_DIM];
        a[self.kind.one_hot_index()] = 1.0;
        a[RelationKind::COUNT] = self.displacement.x;
        a[RelationKind::COUNT + 1] = self.displacement.y;
        a[RelationKind::COUNT + 2] = self.displacement.z;
        a[RelationKind::COUNT + 3] = self.distance;
        a
    }
}

/// Root layer for hierarchical objects. Root particles are synthetic: root j
/// is addressed as leaf_count + j in the hierarchy edge sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub roots: ParticleSet,
    /// Cluster id per leaf, `NO_CLUSTER` for leaves of non-hierarchical
    /// objects. Cluster ids index `roots`.
    pub cluster_of: Vec<u32>,
    pub leaf_to_root: Vec<Relation>,
    pub root_to_root: Vec<Relation>,
    pub root_to_leaf: Vec<Relation>,
}

pub const NO_CLUSTER: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    pub particles: ParticleSet,
    pub leaf_edges: Vec<Relation>,
    pub hierarchy: Option<Hierarchy>,
}

impl InteractionGraph {
    pub fn leaf_count(&self) -> usize {
        self.particles.len()
    }

    pub fn root_count(&self) -> usize {
        self.hierarchy.as_ref().map(|h| h.roots.len()).unwrap_or(0)
    }

    /// Leaves plus synthetic roots.
    pub fn node_count(&self) -> usize {
        self.leaf_count() + self.root_count()
    }
}

fn check_edges(
    name: &str,
    edges: &[Relation],
    node_count: usize,
    allow_kinds: &[RelationKind],
) -> Result<()> {
    for (k, e) in edges.iter().enumerate() {
        if e.receiver == e.sender {
            return Err(Error::Contract(format!(
                "self-relation in {name} at edge {k}: node {}",
                e.receiver
            )));
        }
        if e.receiver as usize >= node_count || e.sender as usize >= node_count {
            return Err(Error::Contract(format!(
                "{name} edge {k} out of range: {} -> {} with {node_count} nodes",
                e.sender, e.receiver
            )));
        }
        if !allow_kinds.contains(&e.kind) {
            return Err(Error::Contract(format!(
                "{name} edge {k} has kind {:?}",
                e.kind
            )));
        }
    }
    Ok(())
}

/// Check every structural invariant of a graph; errors name the offending
/// particle or edge.
pub fn validate(graph: &InteractionGraph) -> Result<()> {
    for (i, p) in graph.particles.iter().enumerate() {
        p.check(i)?;
    }
    let n_leaf = graph.leaf_count();
    check_edges(
        "leaf edges",
        &graph.leaf_edges,
        n_leaf,
        &[
            RelationKind::LeafNeighbor,
            RelationKind::CrossMaterial,
            RelationKind::WallContact,
        ],
    )?;

    let Some(h) = &graph.hierarchy else {
        return Ok(());
    };
    let n_node = graph.node_count();
    if h.cluster_of.len() != n_leaf {
        return Err(Error::Contract(format!(
            "cluster assignment covers {} of {n_leaf} leaves",
            h.cluster_of.len()
        )));
    }
    check_edges("leaf-to-root", &h.leaf_to_root, n_node, &[RelationKind::LeafToRoot])?;
    check_edges("root-to-root", &h.root_to_root, n_node, &[RelationKind::RootToRoot])?;
    check_edges("root-to-leaf", &h.root_to_leaf, n_node, &[RelationKind::RootToLeaf])?;

    // Clusters must cover hierarchical objects exactly, respecting object
    // boundaries.
    for (i, p) in graph.particles.iter().enumerate() {
        let c = h.cluster_of[i];
        if p.material.hierarchical() {
            if c == NO_CLUSTER {
                return Err(Error::Contract(format!("leaf {i} has no cluster")));
            }
            let root = h
                .roots
                .particles
                .get(c as usize)
                .ok_or_else(|| Error::Contract(format!("leaf {i} in unknown cluster {c}")))?;
            if root.object_id != p.object_id {
                return Err(Error::Contract(format!(
                    "leaf {i} of object {} clustered under root of object {}",
                    p.object_id, root.object_id
                )));
            }
        } else if c != NO_CLUSTER {
            return Err(Error::Contract(format!(
                "non-hierarchical leaf {i} assigned to cluster {c}"
            )));
        }
    }

    // Each hierarchical leaf is wired to exactly its own root, once each way.
    let mut up_count = vec![0usize; n_leaf];
    for e in &h.leaf_to_root {
        let leaf = e.sender as usize;
        let root = e.receiver as usize;
        if leaf >= n_leaf || root < n_leaf {
            return Err(Error::Contract(format!(
                "leaf-to-root edge must go leaf -> root, got {} -> {}",
                e.sender, e.receiver
            )));
        }
        if h.cluster_of[leaf] as usize != root - n_leaf {
            return Err(Error::Contract(format!(
                "leaf {leaf} wired to root {} but assigned cluster {}",
                root - n_leaf,
                h.cluster_of[leaf]
            )));
        }
        up_count[leaf] += 1;
    }
    let mut down_count = vec![0usize; n_leaf];
    for e in &h.root_to_leaf {
        let leaf = e.receiver as usize;
        let root = e.sender as usize;
        if leaf >= n_leaf || root < n_leaf {
            return Err(Error::Contract(format!(
                "root-to-leaf edge must go root -> leaf, got {} -> {}",
                e.sender, e.receiver
            )));
        }
        if h.cluster_of[leaf] as usize != root - n_leaf {
            return Err(Error::Contract(format!(
                "leaf {leaf} receives from root {} but is assigned cluster {}",
                root - n_leaf,
                h.cluster_of[leaf]
            )));
        }
        down_count[leaf] += 1;
    }
    for (i, p) in graph.particles.iter().enumerate() {
        if p.material.hierarchical() && (up_count[i] != 1 || down_count[i] != 1) {
            return Err(Error::Contract(format!(
                "leaf {i} has {} up and {} down root edges, expected 1 and 1",
                up_count[i], down_count[i]
            )));
        }
    }

    // Root-to-root is complete per object: k(k-1) directed edges among the
    // object's roots, none across objects.
    let mut per_object: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for (j, r) in h.roots.iter().enumerate() {
        let _ = j;
        *per_object.entry(r.object_id).or_insert(0) += 1;
    }
    let mut seen = std::collections::HashSet::new();
    for e in &h.root_to_root {
        let (u, v) = (e.receiver as usize, e.sender as usize);
        if u < n_leaf || v < n_leaf {
            return Err(Error::Contract(format!(
                "root-to-root edge touches a leaf: {} -> {}",
                e.sender, e.receiver
            )));
        }
        let (ro, so) = (
            h.roots.particles[u - n_leaf].object_id,
            h.roots.particles[v - n_leaf].object_id,
        );
        if ro != so {
            return Err(Error::Contract(format!(
                "root-to-root edge crosses objects {so} -> {ro}"
            )));
        }
        if !seen.insert((u, v)) {
            return Err(Error::Contract(format!(
                "duplicate root-to-root edge {} -> {}",
                e.sender, e.receiver
            )));
        }
    }
    let expect: usize = per_object.values().map(|&k| k * (k - 1)).sum();
    if h.root_to_root.len() != expect {
        return Err(Error::Contract(format!(
            "root-to-root has {} edges, complete-per-object needs {expect}",
            h.root_to_root.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    FluidFall,
    BoxBath,
    FluidShake,
    RiceGrip,
}

impl EnvId {
    pub const ALL: [EnvId; 4] = [
        EnvId::FluidFall,
        EnvId::BoxBath,
        EnvId::FluidShake,
        EnvId::RiceGrip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::FluidFall => "fluidfall",
            EnvId::BoxBath => "boxbath",
            EnvId::FluidShake => "fluidshake",
            EnvId::RiceGrip => "ricegrip",
        }
    }

    pub fn parse(s: &str) -> Result<EnvId> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment {s:?}")))
    }

    pub fn code(self) -> u32 {
        match self {
            EnvId::FluidFall => 0,
            EnvId::BoxBath => 1,
            EnvId::FluidShake => 2,
            EnvId::RiceGrip => 3,
        }
    }

    pub fn from_code(c: u32) -> Result<EnvId> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.code() == c)
            .ok_or_else(|| Error::Format(format!("unknown environment code {c}")))
    }

    /// Length of the per-object attribute vector.
    pub fn attr_dim(self) -> usize {
        match self {
            EnvId::FluidFall => 1, // viscosity
            EnvId::BoxBath => 0,
            EnvId::FluidShake => 0,
            EnvId::RiceGrip => 3, // stiffness, plastic threshold, plastic creep
        }
    }

    /// Length of the per-frame control vector in rollout files.
    pub fn control_dim(self) -> usize {
        match self {
            EnvId::FluidFall | EnvId::BoxBath => 0,
            // box x, box x-velocity, interior half width, interior half depth
            EnvId::FluidShake => 4,
            // grip x, grip z, jaw angle, separation
            EnvId::RiceGrip => 4,
        }
    }

    /// Number of planes reported by [`crate::scene::planes`], fixed per
    /// environment (node features include one clamped distance per plane).
    pub fn plane_count(self) -> usize {
        match self {
            EnvId::FluidFall => 1,
            EnvId::BoxBath => 5,
            EnvId::FluidShake => 5,
            EnvId::RiceGrip => 3,
        }
    }
}

/// One simulated episode: frames of particle state plus the control applied
/// at each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub env: EnvId,
    pub dt: f32,
    pub seed: u64,
    pub objects: Vec<ObjectAttr>,
    pub frames: Vec<ParticleSet>,
    /// One vector per frame, `EnvId::control_dim` wide.
    pub controls: Vec<Vec<f32>>,
}

impl Rollout {
    pub fn particle_count(&self) -> usize {
        self.frames.first().map(|f| f.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Contract("rollout has no frames".into()));
        }
        if self.controls.len() != self.frames.len() {
            return Err(Error::Contract(format!(
                "{} control vectors for {} frames",
                self.controls.len(),
                self.frames.len()
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Contract(format!("bad time step {}", self.dt)));
        }
        let cdim = self.env.control_dim();
        for (t, c) in self.controls.iter().enumerate() {
            if c.len() != cdim {
                return Err(Error::Contract(format!(
                    "frame {t}: control has {} entries, environment wants {cdim}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("frame {t}: non-finite control")));
            }
        }
        let adim = self.env.attr_dim();
        for (o, a) in self.objects.iter().enumerate() {
            if a.attrs.len() != adim {
                return Err(Error::Contract(format!(
                    "object {o}: {} attributes, environment wants {adim}",
                    a.attrs.len()
                )));
            }
        }
        let first = &self.frames[0];
        for (i, p) in first.iter().enumerate() {
            if p.object_id as usize >= self.objects.len() {
                return Err(Error::Contract(format!(
                    "particle {i} references object {} of {}",
                    p.object_id,
                    self.objects.len()
                )));
            }
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != first.len() {
                return Err(Error::Contract(format!(
                    "frame {t} has {} particles, frame 0 has {}",
                    f.len(),
                    first.len()
                )));
            }
            for (i, (p, p0)) in f.iter().zip(first.iter()).enumerate() {
                if p.object_id != p0.object_id || p.material != p0.material {
                    return Err(Error::Contract(format!(
                        "frame {t} particle {i}: identity changed across frames"
                    )));
                }
                p.check(i)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f32, y: f32, z: f32) -> ParticleState {
        ParticleState::at_rest(Vector3::new(x, y, z), 0, Material::Fluid)
    }

    #[test]
    fn center_of_mass_of_empty_object_is_an_error() {
        assert!(center_of_mass(&[]).is_err());
    }

    #[test]
    fn center_of_mass_of_symmetric_pair_is_origin() {
        let ps = [p(1.0, -2.0, 3.0), p(-1.0, 2.0, -3.0)];
        let c = center_of_mass(&ps).unwrap();
        assert_eq!(c, Vector3::zeros());
    }

    #[test]
    fn lattice_centroid_matches_direct_summation() {
        // 3x3x3 lattice, spacing 0.06, corner at (0.1, 0.2, 0.3).
        let mut ps = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    ps.push(p(
                        0.1 + 0.06 * i as f32,
                        0.2 + 0.06 * j as f32,
                        0.3 + 0.06 * k as f32,
                    ));
                }
            }
        }
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        let mut sz = 0.0f64;
        for q in &ps {
            sx += q.position.x as f64;
            sy += q.position.y as f64;
            sz += q.position.z as f64;
        }
        let c = center_of_mass(&ps).unwrap();
        assert!((c.x as f64 - sx / 27.0).abs() < 1e-6);
        assert!((c.y as f64 - sy / 27.0).abs() < 1e-6);
        assert!((c.z as f64 - sz / 27.0).abs() < 1e-6);
    }

    #[test]
    fn empty_graph_is_valid() {
        let g = InteractionGraph {
            particles: ParticleSet::default(),
            leaf_edges: vec![],
            hierarchy: None,
        };
        assert!(validate(&g).is_ok());
    }

    #[test]
    fn self_relation_is_rejected() {
        let g = InteractionGraph {
            particles: ParticleSet::new(vec![p(0.0, 0.0, 0.0), p(0.05, 0.0, 0.0)]),
            leaf_edges: vec![Relation {
                receiver: 1,
                sender: 1,
                kind: RelationKind::LeafNeighbor,
                displacement: Vector3::zeros(),
                distance: 0.0,
            }],
            hierarchy: None,
        };
        let err = validate(&g).unwrap_err().to_string();
        assert!(err.contains("self-relation"), "{err}");
    }

    #[test]
    fn leaf_without_root_edge_is_named() {
        let mut a = p(0.0, 0.0, 0.0);
        a.material = Material::Rigid;
        let mut b = p(0.06, 0.0, 0.0);
        b.material = Material::Rigid;
        let root = ParticleState::at_rest(Vector3::new(0.03, 0.0, 0.0), 0, Material::Rigid);
        let up = |leaf: u32| Relation {
            receiver: 2,
            sender: leaf,
            kind: RelationKind::LeafToRoot,
            displacement: Vector3::zeros(),
            distance: 0.0,
        };
        let down = |leaf: u32| Relation {
            receiver: leaf,
            sender: 2,
            kind: RelationKind::RootToLeaf,
            displacement: Vector3::zeros(),
            distance: 0.0,
        };
        let g = InteractionGraph {
            particles: ParticleSet::new(vec![a, b]),
            leaf_edges: vec![],
            hierarchy: Some(Hierarchy {
                roots: ParticleSet::new(vec![root]),
                cluster_of: vec![0, 0],
                leaf_to_root: vec![up(0), up(1)],
                root_to_root: vec![],
                root_to_leaf: vec![down(0)], // leaf 1 missing
            }),
        };
        let err = validate(&g).unwrap_err().to_string();
        assert!(err.contains("leaf 1"), "{err}");
    }

    #[test]
    fn rollout_rejects_identity_drift() {
        let mut f0 = ParticleSet::new(vec![p(0.0, 0.0, 0.0)]);
        let mut f1 = f0.clone();
        f1.particles[0].material = Material::Rigid;
        f1.particles[0].resting_position = f1.particles[0].position;
        let r = Rollout {
            env: EnvId::BoxBath,
            dt: 1.0 / 60.0,
            seed: 0,
            objects: vec![ObjectAttr::fixed(vec![])],
            frames: vec![f0.clone(), f1],
            controls: vec![vec![], vec![]],
        };
        assert!(r.validate().is_err());
        f0.particles[0].velocity.y = f32::NAN;
        let r = Rollout {
            env: EnvId::BoxBath,
            dt: 1.0 / 60.0,
            seed: 0,
            objects: vec![ObjectAttr::fixed(vec![])],
            frames: vec![f0],
            controls: vec![vec![]],
        };
        assert!(r.validate().is_err());
    }
}
