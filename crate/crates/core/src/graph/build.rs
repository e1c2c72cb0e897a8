use std::collections::HashMap;

use nalgebra::Vector3;

use crate::scene::{
    planes, EnvId, Hierarchy, InteractionGraph, Material, ParticleSet, ParticleState, Relation,
    RelationKind, NO_CLUSTER,
};
use crate::{Error, Result};

use super::cluster::cluster;
use super::spatial::SpatialHash;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// Neighborhood radius d.
    pub neighbor_radius: f32,
    pub rigid_roots: usize,
    pub elastic_roots: usize,
    /// Build root hierarchies for rigid/elastic objects. Disabled by the
    /// flat-model ablation, which message-passes leaves only.
    pub hierarchy: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            neighbor_radius: 0.08,
            rigid_roots: 8,
            elastic_roots: 30,
            hierarchy: true,
        }
    }
}

impl GraphConfig {
    pub fn roots_for(&self, m: Material) -> usize {
        match m {
            Material::Rigid => self.rigid_roots,
            Material::ElasticPlastic => self.elastic_roots,
            _ => 0,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.neighbor_radius > 0.0) {
            return Err(Error::Config("neighbor radius must be positive".into()));
        }
        if self.rigid_roots == 0 || self.elastic_roots == 0 {
            return Err(Error::Config("root counts must be at least 1".into()));
        }
        Ok(())
    }
}

fn relation(receiver: u32, sender: u32, kind: RelationKind, d: Vector3<f32>) -> Relation {
    Relation {
        receiver,
        sender,
        kind,
        displacement: d,
        distance: d.norm(),
    }
}

/// Directed neighbor edges among non-boundary particles: every ordered pair
/// closer than d (strictly), except pairs inside the same rigid object,
/// whose coupling is carried by the hierarchy. Boundary particles stand for
/// planes and never enter the point-pair scan.
pub fn build_leaf_edges(particles: &ParticleSet, cfg: &GraphConfig) -> Vec<Relation> {
    let positions: Vec<Vector3<f32>> = particles.iter().map(|p| p.position).collect();
    let hash = SpatialHash::build(
        particles
            .iter()
            .enumerate()
            .filter(|(_, p)| p.material != Material::Boundary)
            .map(|(i, p)| (i as u32, p.position)),
        cfg.neighbor_radius,
    );
    let mut edges = Vec::new();
    let mut candidates = Vec::new();
    for (u, pu) in particles.iter().enumerate() {
        if pu.material == Material::Boundary {
            continue;
        }
        hash.neighbors_into(&pu.position, cfg.neighbor_radius, &positions, &mut candidates);
        for &v in &candidates {
            if v as usize == u {
                continue;
            }
            let pv = &particles.particles[v as usize];
            if pu.object_id == pv.object_id && pu.material == Material::Rigid {
                continue;
            }
            let kind = if pu.material == pv.material {
                RelationKind::LeafNeighbor
            } else {
                RelationKind::CrossMaterial
            };
            edges.push(relation(
                u as u32,
                v,
                kind,
                pu.position - pv.position,
            ));
        }
    }
    edges
}

/// One object's hierarchy with local indexing: leaves are 0..n, roots are
/// n..n+k.
pub struct ObjectHierarchy {
    pub cluster_of: Vec<u32>,
    pub roots: Vec<ParticleState>,
    pub leaf_to_root: Vec<Relation>,
    pub root_to_root: Vec<Relation>,
    pub root_to_leaf: Vec<Relation>,
}

/// Cluster an object and wire leaves to per-cluster roots plus a complete
/// directed root-root graph. `cluster_positions` chooses the clustering
/// space (resting positions for elastic objects, reference positions for
/// rigid ones); root state is the cluster mean of the actual state.
pub fn build_hierarchy(
    object: &[ParticleState],
    cluster_positions: &[Vector3<f32>],
    k: usize,
) -> Result<ObjectHierarchy> {
    let n = object.len();
    if n == 0 {
        return Err(Error::Contract("hierarchy over an empty object".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Contract(format!("{k} roots for {n} particles")));
    }
    if cluster_positions.len() != n {
        return Err(Error::Contract(format!(
            "{} clustering positions for {n} particles",
            cluster_positions.len()
        )));
    }
    let cluster_of = cluster(cluster_positions, k);

    let mut roots = Vec::with_capacity(k);
    for c in 0..k as u32 {
        let members: Vec<&ParticleState> =
            object.iter().zip(&cluster_of).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
        debug_assert!(!members.is_empty());
        let m = members.len() as f32;
        let mean =
            |f: fn(&ParticleState) -> Vector3<f32>| members.iter().map(|p| f(p)).sum::<Vector3<f32>>() / m;
        roots.push(ParticleState {
            position: mean(|p| p.position),
            velocity: mean(|p| p.velocity),
            resting_position: mean(|p| p.resting_position),
            object_id: object[0].object_id,
            material: object[0].material,
        });
    }

    let mut leaf_to_root = Vec::with_capacity(n);
    let mut root_to_leaf = Vec::with_capacity(n);
    for (i, p) in object.iter().enumerate() {
        let c = cluster_of[i] as usize;
        let root = &roots[c];
        let rid = (n + c) as u32;
        leaf_to_root.push(relation(
            rid,
            i as u32,
            RelationKind::LeafToRoot,
            root.position - p.position,
        ));
        root_to_leaf.push(relation(
            i as u32,
            rid,
            RelationKind::RootToLeaf,
            p.position - root.position,
        ));
    }
    let mut root_to_root = Vec::with_capacity(k * (k - 1));
    for a in 0..k {
        for b in 0..k {
            if a != b {
                root_to_root.push(relation(
                    (n + a) as u32,
                    (n + b) as u32,
                    RelationKind::RootToRoot,
                    roots[a].position - roots[b].position,
                ));
            }
        }
    }
    Ok(ObjectHierarchy {
        cluster_of,
        roots,
        leaf_to_root,
        root_to_root,
        root_to_leaf,
    })
}

/// Remembers rigid cluster assignments for the lifetime of one rollout, so a
/// rigid object keeps the same hierarchy on every frame (clustering its
/// current positions would be equivariant in exact arithmetic but can flip
/// near-tie assignments in f32).
#[derive(Default)]
pub struct HierarchyCache {
    rigid: HashMap<u32, Vec<u32>>,
}

impl HierarchyCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forget everything; call between rollouts.
    pub fn clear(&mut self) {
        self.rigid.clear();
    }
}

/// Assemble and validate the full interaction graph for one frame.
pub fn build_graph(
    frame: &ParticleSet,
    env: EnvId,
    control: &[f32],
    cfg: &GraphConfig,
    cache: &mut HierarchyCache,
) -> Result<InteractionGraph> {
    cfg.check()?;
    check_contiguous_objects(frame)?;
    let n_leaf = frame.len();
    let mut leaf_edges = build_leaf_edges(frame, cfg);

    // Wall-contact edges from particle-backed planes.
    let env_planes = planes(env, control)?;
    if env_planes.iter().any(|p| p.boundary_index.is_some()) {
        let boundary_start = frame
            .iter()
            .position(|p| p.material == Material::Boundary)
            .ok_or_else(|| {
                Error::Contract(format!("{} frame has no boundary particles", env.as_str()))
            })?;
        for plane in env_planes.iter() {
            let Some(b) = plane.boundary_index else { continue };
            let sender = (boundary_start + b) as u32;
            if sender as usize >= n_leaf
                || frame.particles[sender as usize].material != Material::Boundary
            {
                return Err(Error::Contract(format!(
                    "boundary particle {b} missing from frame"
                )));
            }
            for (u, p) in frame.iter().enumerate() {
                if p.material == Material::Boundary {
                    continue;
                }
                let s = plane.signed_distance(&p.position);
                if s.abs() < cfg.neighbor_radius {
                    // Effective sender position is the projection onto the
                    // plane, so the displacement is the normal times the
                    // signed distance.
                    leaf_edges.push(Relation {
                        receiver: u as u32,
                        sender,
                        kind: RelationKind::WallContact,
                        displacement: plane.normal * s,
                        distance: s.abs(),
                    });
                }
            }
        }
    }

    // Hierarchies, one per rigid or elastic object, roots appended in object
    // order.
    let mut hierarchy: Option<Hierarchy> = None;
    let object_count = if cfg.hierarchy { frame.object_count() } else { 0 };
    for oid in 0..object_count as u32 {
        let range = frame.object_range(oid);
        let object = &frame.particles[range.clone()];
        if object.is_empty() || !object[0].material.hierarchical() {
            continue;
        }
        let k = cfg.roots_for(object[0].material);
        if k > object.len() {
            return Err(Error::Contract(format!(
                "object {oid}: {k} roots configured for {} particles",
                object.len()
            )));
        }
        let h = hierarchy.get_or_insert_with(|| Hierarchy {
            roots: ParticleSet::default(),
            cluster_of: vec![NO_CLUSTER; n_leaf],
            leaf_to_root: vec![],
            root_to_root: vec![],
            root_to_leaf: vec![],
        });
        let oh = if object[0].material == Material::Rigid {
            // Rigid clusters are computed once per rollout from the first
            // frame seen and reused verbatim afterwards.
            let assignment = cache.rigid.get(&oid).cloned();
            match assignment {
                Some(a) => rebuild_with_assignment(object, a)?,
                None => {
                    let pos: Vec<Vector3<f32>> = object.iter().map(|p| p.position).collect();
                    let oh = build_hierarchy(object, &pos, k)?;
                    cache.rigid.insert(oid, oh.cluster_of.clone());
                    oh
                }
            }
        } else {
            let pos: Vec<Vector3<f32>> = object.iter().map(|p| p.resting_position).collect();
            build_hierarchy(object, &pos, k)?
        };

        // Remap local indices: leaves by the object's offset, roots past all
        // leaves plus previously emitted roots.
        let leaf_off = range.start as u32;
        let root_off = (n_leaf + h.roots.len()) as u32;
        let n_obj = object.len() as u32;
        let remap = |idx: u32| {
            if idx < n_obj {
                idx + leaf_off
            } else {
                idx - n_obj + root_off
            }
        };
        for (i, &c) in oh.cluster_of.iter().enumerate() {
            h.cluster_of[range.start + i] = c + (root_off - n_leaf as u32);
        }
        h.roots.particles.extend_from_slice(&oh.roots);
        for (dst, src) in [
            (&mut h.leaf_to_root, oh.leaf_to_root),
            (&mut h.root_to_root, oh.root_to_root),
            (&mut h.root_to_leaf, oh.root_to_leaf),
        ] {
            dst.extend(src.into_iter().map(|mut e| {
                e.receiver = remap(e.receiver);
                e.sender = remap(e.sender);
                e
            }));
        }
    }

    let graph = InteractionGraph {
        particles: frame.clone(),
        leaf_edges,
        hierarchy,
    };
    crate::scene::validate(&graph)?;
    Ok(graph)
}

/// Rebuild hierarchy structures for a fixed, previously computed cluster
/// assignment (the rigid cache path).
fn rebuild_with_assignment(object: &[ParticleState], cluster_of: Vec<u32>) -> Result<ObjectHierarchy> {
    if cluster_of.len() != object.len() {
        return Err(Error::Contract(format!(
            "cached assignment covers {} of {} particles",
            cluster_of.len(),
            object.len()
        )));
    }
    let k = cluster_of.iter().copied().max().unwrap_or(0) as usize + 1;
    let n = object.len();
    let mut sums = vec![(Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), 0usize); k];
    for (p, &c) in object.iter().zip(&cluster_of) {
        let s = &mut sums[c as usize];
        s.0 += p.position;
        s.1 += p.velocity;
        s.2 += p.resting_position;
        s.3 += 1;
    }
    let mut roots = Vec::with_capacity(k);
    for (pos, vel, rest, count) in sums {
        if count == 0 {
            return Err(Error::Contract("cached assignment has an empty cluster".into()));
        }
        let m = count as f32;
        roots.push(ParticleState {
            position: pos / m,
            velocity: vel / m,
            resting_position: rest / m,
            object_id: object[0].object_id,
            material: object[0].material,
        });
    }
    let mut leaf_to_root = Vec::with_capacity(n);
    let mut root_to_leaf = Vec::with_capacity(n);
    for (i, p) in object.iter().enumerate() {
        let c = cluster_of[i] as usize;
        let rid = (n + c) as u32;
        leaf_to_root.push(relation(
            rid,
            i as u32,
            RelationKind::LeafToRoot,
            roots[c].position - p.position,
        ));
        root_to_leaf.push(relation(
            i as u32,
            rid,
            RelationKind::RootToLeaf,
            p.position - roots[c].position,
        ));
    }
    let mut root_to_root = Vec::with_capacity(k * (k - 1));
    for a in 0..k {
        for b in 0..k {
            if a != b {
                root_to_root.push(relation(
                    (n + a) as u32,
                    (n + b) as u32,
                    RelationKind::RootToRoot,
                    roots[a].position - roots[b].position,
                ));
            }
        }
    }
    Ok(ObjectHierarchy {
        cluster_of,
        roots,
        leaf_to_root,
        root_to_root,
        root_to_leaf,
    })
}

fn check_contiguous_objects(frame: &ParticleSet) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    let mut prev = None;
    for (i, p) in frame.iter().enumerate() {
        if prev != Some(p.object_id) {
            if !seen.insert(p.object_id) {
                return Err(Error::Contract(format!(
                    "object {} splits into non-contiguous runs at particle {i}",
                    p.object_id
                )));
            }
            prev = Some(p.object_id);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fluid(x: f32, y: f32, z: f32) -> ParticleState {
        ParticleState::at_rest(Vector3::new(x, y, z), 0, Material::Fluid)
    }

    #[test]
    fn close_pair_gets_both_directions() {
        let ps = ParticleSet::new(vec![fluid(0.0, 0.1, 0.0), fluid(0.05, 0.1, 0.0)]);
        let edges = build_leaf_edges(&ps, &GraphConfig::default());
        assert_eq!(edges.len(), 2);
        assert_eq!((edges[0].receiver, edges[0].sender), (0, 1));
        assert_eq!((edges[1].receiver, edges[1].sender), (1, 0));
        assert!((edges[0].distance - 0.05).abs() < 1e-6);
        assert_eq!(edges[0].displacement, Vector3::new(-0.05, 0.0, 0.0));
    }

    #[test]
    fn distant_pair_gets_no_edges() {
        let ps = ParticleSet::new(vec![fluid(0.0, 0.1, 0.0), fluid(0.10, 0.1, 0.0)]);
        assert!(build_leaf_edges(&ps, &GraphConfig::default()).is_empty());
    }

    #[test]
    fn same_rigid_object_pairs_are_skipped() {
        let mut a = fluid(0.0, 0.1, 0.0);
        let mut b = fluid(0.05, 0.1, 0.0);
        a.material = Material::Rigid;
        b.material = Material::Rigid;
        let ps = ParticleSet::new(vec![a, b]);
        assert!(build_leaf_edges(&ps, &GraphConfig::default()).is_empty());
        // Different objects of rigid material do interact.
        let mut c = b;
        c.object_id = 1;
        let ps = ParticleSet::new(vec![a, c]);
        assert_eq!(build_leaf_edges(&ps, &GraphConfig::default()).len(), 2);
    }

    #[test]
    fn single_root_hierarchy_wires_every_leaf() {
        let object: Vec<ParticleState> = (0..5)
            .map(|i| {
                let mut p = fluid(0.06 * i as f32, 0.1, 0.0);
                p.material = Material::Rigid;
                p
            })
            .collect();
        let pos: Vec<Vector3<f32>> = object.iter().map(|p| p.position).collect();
        let h = build_hierarchy(&object, &pos, 1).unwrap();
        assert_eq!(h.roots.len(), 1);
        assert!(h.root_to_root.is_empty());
        assert_eq!(h.leaf_to_root.len(), 5);
        assert_eq!(h.root_to_leaf.len(), 5);
        let com = crate::scene::center_of_mass(&object).unwrap();
        assert!((h.roots[0].position - com).norm() < 1e-6);
    }

    #[test]
    fn root_count_equal_to_particles_gives_singletons() {
        let object: Vec<ParticleState> = (0..4)
            .map(|i| {
                let mut p = fluid(0.06 * i as f32, 0.1, 0.0);
                p.material = Material::ElasticPlastic;
                p
            })
            .collect();
        let pos: Vec<Vector3<f32>> = object.iter().map(|p| p.position).collect();
        let h = build_hierarchy(&object, &pos, 4).unwrap();
        assert_eq!(h.root_to_root.len(), 12);
        for (i, r) in h.roots.iter().enumerate() {
            let c = (0..4).find(|&j| h.cluster_of[j] as usize == i).unwrap();
            assert_eq!(r.position, object[c].position);
        }
    }

    #[test]
    fn too_many_roots_is_an_error() {
        let object = vec![fluid(0.0, 0.0, 0.0)];
        let pos = vec![object[0].position];
        assert!(build_hierarchy(&object, &pos, 2).is_err());
    }

    #[test]
    fn rigid_cache_keeps_assignment_across_frames() {
        let mut particles: Vec<ParticleState> = (0..8)
            .map(|i| {
                let mut p = fluid(
                    0.06 * (i % 2) as f32,
                    0.1 + 0.06 * ((i / 2) % 2) as f32,
                    0.06 * (i / 4) as f32,
                );
                p.material = Material::Rigid;
                p
            })
            .collect();
        let frame = ParticleSet::new(particles.clone());
        let cfg = GraphConfig {
            rigid_roots: 2,
            ..GraphConfig::default()
        };
        let mut cache = HierarchyCache::new();
        let g0 = build_graph(&frame, EnvId::BoxBath, &[], &cfg, &mut cache).unwrap();
        // Translate the object; cached clusters must be reused verbatim.
        for p in &mut particles {
            p.position.x += 3.0;
            p.resting_position = p.position;
        }
        let g1 = build_graph(
            &ParticleSet::new(particles),
            EnvId::BoxBath,
            &[],
            &cfg,
            &mut cache,
        )
        .unwrap();
        assert_eq!(
            g0.hierarchy.unwrap().cluster_of,
            g1.hierarchy.unwrap().cluster_of
        );
    }

    #[test]
    fn wall_contact_edges_point_from_wall_to_fluid() {
        // FluidShake: one fluid particle near the floor, walls far away.
        let mut particles = vec![fluid(0.0, 0.05, 0.0)];
        for i in 0..5 {
            let mut b = fluid(0.0, 0.5, 0.0);
            b.object_id = 1;
            b.material = Material::Boundary;
            b.position.x = i as f32; // display positions, irrelevant to edges
            b.resting_position = b.position;
            particles.push(b);
        }
        let control = [0.0, 0.0, 2.0, 2.0]; // huge box: only the floor is close
        let g = build_graph(
            &ParticleSet::new(particles),
            EnvId::FluidShake,
            &control,
            &GraphConfig::default(),
            &mut HierarchyCache::new(),
        )
        .unwrap();
        let wall: Vec<&Relation> = g
            .leaf_edges
            .iter()
            .filter(|e| e.kind == RelationKind::WallContact)
            .collect();
        assert_eq!(wall.len(), 1);
        assert_eq!(wall[0].receiver, 0);
        assert_eq!(wall[0].sender, 1); // floor is boundary particle 0
        assert!((wall[0].distance - 0.05).abs() < 1e-6);
        assert_eq!(wall[0].displacement, Vector3::new(0.0, 0.05, 0.0));
    }
}
