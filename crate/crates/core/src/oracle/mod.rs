//! Built-in particle simulator used to generate training data and to serve
//! as the ground-truth plant in closed-loop control. Semi-implicit
//! integration with iterated position-level constraints: fluid
//! incompressibility, rigid and elastic shape matching with plastic rest
//! creep, and half-space projections for container walls and gripper
//! plates. Velocities are recovered from the position update.

mod envs;
mod fluid;
mod gen;
mod shape;

pub use envs::{
    boundary_states, grip_finger_centers, sample_setup, shake_wall_centers, EnvSpec, SceneSetup,
    REST_SPACING,
};
pub use fluid::lattice_rest_density;
pub use gen::{generate_dataset, rollout_path, simulate_rollout, valid_count, DatasetSummary};

use nalgebra::Vector3;

use crate::scene::{planes, EnvId, Material, ObjectAttr, ParticleSet, ParticleState, Plane};
use crate::{Error, Result};

use fluid::DensitySolve;
use shape::ElasticClusters;

/// Simulator parameters. Defaults match the data-generation setup; the
/// solver runs `iterations` rounds of every constraint per step.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub dt: f32,
    pub iterations: usize,
    pub gravity: [f32; 3],
    /// Lattice spacing fluid and solids are seeded at.
    pub rest_spacing: f32,
    /// Fluid kernel support radius.
    pub kernel_h: f32,
    /// Fluid rest density; `None` calibrates it to the seeding lattice so a
    /// relaxed block is in equilibrium.
    pub rest_density: Option<f32>,
    /// Constraint-force-mixing softener in the density solve denominator.
    pub cfm_eps: f32,
    /// Clearance kept between particle centers and walls.
    pub particle_radius: f32,
    /// XSPH strength for scenes whose attributes do not carry one.
    pub default_viscosity: f32,
    /// Shape-matching cluster count per elastic object.
    pub elastic_clusters: usize,
    /// Particles join every cluster whose centroid is within this radius.
    pub cluster_overlap: f32,
    /// Per-step velocity retention factor, applied before gravity.
    pub damping: f32,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            dt: 1.0 / 60.0,
            iterations: 3,
            gravity: [0.0, -9.8, 0.0],
            rest_spacing: REST_SPACING,
            kernel_h: 0.11,
            rest_density: None,
            cfm_eps: 100.0,
            particle_radius: 0.03,
            default_viscosity: 0.05,
            elastic_clusters: 8,
            cluster_overlap: 0.15,
            damping: 0.999,
        }
    }
}

impl OracleConfig {
    pub fn check(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("solver needs at least one iteration".into()));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("rest_spacing", self.rest_spacing),
            ("kernel_h", self.kernel_h),
            ("particle_radius", self.particle_radius),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.elastic_clusters == 0 {
            return Err(Error::Config("elastic_clusters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(Error::Config(format!("damping {} outside [0, 1]", self.damping)));
        }
        Ok(())
    }

    pub fn rest_density_value(&self) -> f32 {
        self.rest_density
            .unwrap_or_else(|| lattice_rest_density(self.rest_spacing, self.kernel_h))
    }
}

fn scene_viscosity(env: EnvId, attrs: &[ObjectAttr], cfg: &OracleConfig) -> f32 {
    match env {
        EnvId::FluidFall => attrs
            .first()
            .and_then(|a| a.attrs.first())
            .copied()
            .unwrap_or(cfg.default_viscosity),
        _ => cfg.default_viscosity,
    }
}

fn project_particles(planes: &[Plane], q: &mut [Vector3<f32>], members: &[u32], radius: f32) {
    for p in planes {
        for &i in members {
            let s = p.signed_distance(&q[i as usize]) - radius;
            if s < 0.0 {
                q[i as usize] -= p.normal * s;
            }
        }
    }
}

/// Rigid bodies leave walls by whole-object translation so the projection
/// cannot shear them.
fn project_object(planes: &[Plane], q: &mut [Vector3<f32>], members: &[u32], radius: f32) {
    for p in planes {
        let mut worst = 0.0f32;
        for &i in members {
            worst = worst.min(p.signed_distance(&q[i as usize]) - radius);
        }
        if worst < 0.0 {
            for &i in members {
                q[i as usize] -= p.normal * worst;
            }
        }
    }
}

/// Advance one frame. `next_control` parameterizes the walls and scripted
/// boundary particles at the destination frame; uncontrolled environments
/// pass an empty slice. Pure in all inputs.
pub fn oracle_step(
    frame: &ParticleSet,
    attrs: &[ObjectAttr],
    next_control: &[f32],
    env: EnvId,
    cfg: &OracleConfig,
) -> Result<ParticleSet> {
    cfg.check()?;
    let dt = cfg.dt;
    let gravity = Vector3::from(cfg.gravity);
    let walls = planes(env, next_control)?;
    let n = frame.len();

    let q_prev: Vec<Vector3<f32>> = frame.iter().map(|p| p.position).collect();
    let mut rest: Vec<Vector3<f32>> = frame.iter().map(|p| p.resting_position).collect();

    // Partition indices by role.
    let mut fluid: Vec<u32> = Vec::new();
    let mut density_movable: Vec<u32> = Vec::new();
    let mut free: Vec<u32> = Vec::new();
    let mut rigid_objects: Vec<Vec<u32>> = Vec::new();
    let mut elastic_objects: Vec<(u32, Vec<u32>)> = Vec::new();
    for obj in 0..frame.object_count() as u32 {
        let range = frame.object_range(obj);
        if range.is_empty() {
            continue;
        }
        let members: Vec<u32> = range.clone().map(|i| i as u32).collect();
        match frame.particles[range.start].material {
            Material::Fluid => {
                fluid.extend_from_slice(&members);
                free.extend_from_slice(&members);
            }
            Material::Rigid => {
                free.extend_from_slice(&members);
                rigid_objects.push(members);
            }
            Material::ElasticPlastic => {
                free.extend_from_slice(&members);
                elastic_objects.push((obj, members));
            }
            Material::Boundary => {}
        }
    }
    if !fluid.is_empty() {
        density_movable.extend_from_slice(&fluid);
        for members in &rigid_objects {
            density_movable.extend_from_slice(members);
        }
        density_movable.sort_unstable();
    }

    // Predict: damp, gravitate, integrate.
    let mut q = q_prev.clone();
    for &i in &free {
        let p = &frame.particles[i as usize];
        let v = p.velocity * cfg.damping + gravity * dt;
        q[i as usize] += v * dt;
    }

    let solve = DensitySolve {
        h: cfg.kernel_h,
        rest_density: cfg.rest_density_value(),
        cfm_eps: cfg.cfm_eps,
    };

    // Overlapping shape-match clusters per elastic object, from its current
    // rest shape (global particle indices).
    let elastic: Vec<(u32, ElasticClusters, (f32, f32, f32))> = elastic_objects
        .iter()
        .map(|(obj, members)| {
            let local: Vec<Vector3<f32>> = members.iter().map(|&i| rest[i as usize]).collect();
            let k = cfg.elastic_clusters.min(members.len());
            let mut clusters = ElasticClusters::build(&local, k, cfg.cluster_overlap);
            for m in &mut clusters.members {
                for idx in m.iter_mut() {
                    *idx = members[*idx as usize];
                }
            }
            let a = &attrs
                .get(*obj as usize)
                .ok_or_else(|| Error::Contract(format!("object {obj} has no attributes")))?
                .attrs;
            let (stiff, thresh, creep) = match a.len() {
                3 => (a[0], a[1], a[2]),
                _ => (0.5, f32::INFINITY, 0.0),
            };
            Ok((*obj, clusters, (stiff, thresh, creep)))
        })
        .collect::<Result<_>>()?;

    let mut last_strain: Vec<Vec<f32>> = vec![Vec::new(); elastic.len()];
    for _ in 0..cfg.iterations {
        if !density_movable.is_empty() {
            solve.apply(&mut q, &density_movable);
        }
        for members in &rigid_objects {
            shape::match_rigid(&mut q, &q_prev, members);
        }
        for (k, (_, clusters, (stiff, _, _))) in elastic.iter().enumerate() {
            last_strain[k] = clusters.match_step(&mut q, &rest, *stiff);
        }
        project_particles(&walls, &mut q, &fluid, cfg.particle_radius);
        for (_, clusters, _) in &elastic {
            for members in &clusters.members {
                project_particles(&walls, &mut q, members, cfg.particle_radius);
            }
        }
        for members in &rigid_objects {
            project_object(&walls, &mut q, members, cfg.particle_radius);
        }
    }

    // Plastic creep once per step, measured on the settled positions.
    for (k, (_, clusters, (_, thresh, creep))) in elastic.iter().enumerate() {
        if *creep > 0.0 {
            clusters.creep_rest(&q, &mut rest, &last_strain[k], *thresh, *creep);
        }
    }

    // Velocity recovery, then XSPH smoothing on fluids.
    let mut vel: Vec<Vector3<f32>> = frame.iter().map(|p| p.velocity).collect();
    for &i in &free {
        vel[i as usize] = (q[i as usize] - q_prev[i as usize]) / dt;
    }
    let viscosity = scene_viscosity(env, attrs, cfg);
    solve.xsph(&q, &mut vel, &fluid, viscosity);

    // Scripted boundary particles move to the new control's face centers.
    let boundary_new: Vec<Vector3<f32>> = match env {
        EnvId::FluidFall | EnvId::BoxBath => Vec::new(),
        EnvId::FluidShake => {
            shake_wall_centers(next_control[0], next_control[2], next_control[3]).to_vec()
        }
        EnvId::RiceGrip => {
            let height = frame
                .iter()
                .find(|p| p.material == Material::Boundary)
                .map(|p| p.position.y)
                .unwrap_or(0.1);
            grip_finger_centers(next_control, height).to_vec()
        }
    };
    let mut b = 0;
    for i in 0..n {
        if frame.particles[i].material == Material::Boundary {
            let target = *boundary_new.get(b).ok_or_else(|| {
                Error::Contract(format!(
                    "{} frame carries more boundary particles than planes",
                    env.as_str()
                ))
            })?;
            vel[i] = (target - q_prev[i]) / dt;
            q[i] = target;
            b += 1;
        }
    }
    if b != boundary_new.len() {
        return Err(Error::Contract(format!(
            "{} frame has {b} boundary particles, expected {}",
            env.as_str(),
            boundary_new.len()
        )));
    }

    let particles: Vec<ParticleState> = (0..n)
        .map(|i| {
            let old = &frame.particles[i];
            ParticleState {
                position: q[i],
                velocity: vel[i],
                resting_position: if old.material == Material::ElasticPlastic {
                    rest[i]
                } else {
                    q[i]
                },
                object_id: old.object_id,
                material: old.material,
            }
        })
        .collect();
    for (i, p) in particles.iter().enumerate() {
        if !(p.position.iter().all(|x| x.is_finite()) && p.velocity.iter().all(|x| x.is_finite()))
        {
            return Err(Error::Runtime(format!(
                "non-finite state at particle {i} after step"
            )));
        }
    }
    Ok(ParticleSet::new(particles))
}
