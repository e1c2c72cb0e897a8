//! Scene sampling and scripted control schedules for the four environments.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scene::{EnvId, Material, ObjectAttr, ParticleSet, ParticleState, SHAKE_BOX_HEIGHT};
use crate::{Error, Result};

/// Per-environment generation knobs: particle-count targets, rollout length,
/// and how controls are parameterized. Defaults reproduce the standard
/// scenes; counts scale down for quick configurations and up for stress
/// tests.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub env: EnvId,
    /// Frames per rollout, including the initial frame.
    pub rollout_len: usize,
    /// Cube side lengths of the two FluidFall drops.
    pub fall_drops: (usize, usize),
    /// Fluid block dimensions (x, y, z) in the bath.
    pub bath_fluid: (usize, usize, usize),
    /// Side length of the floating rigid cube.
    pub bath_cube: usize,
    /// Inclusive sampling ranges for the shaken fluid block.
    pub shake_nx: (usize, usize),
    pub shake_ny: (usize, usize),
    pub shake_nz: usize,
    /// Side length of the rice cube.
    pub rice_side: usize,
}

impl EnvSpec {
    pub fn defaults(env: EnvId) -> Self {
        EnvSpec {
            env,
            rollout_len: match env {
                EnvId::FluidFall => 120,
                EnvId::BoxBath => 150,
                EnvId::FluidShake => 300,
                EnvId::RiceGrip => 30,
            },
            fall_drops: (4, 5),
            bath_fluid: (6, 10, 5),
            bath_cube: 3,
            shake_nx: (6, 8),
            shake_ny: (8, 10),
            shake_nz: 3,
            rice_side: 4,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.rollout_len < 2 {
            return Err(Error::Config("rollout_len must be at least 2".into()));
        }
        let positive = [
            self.fall_drops.0,
            self.fall_drops.1,
            self.bath_fluid.0,
            self.bath_fluid.1,
            self.bath_fluid.2,
            self.bath_cube,
            self.shake_nx.0,
            self.shake_ny.0,
            self.shake_nz,
            self.rice_side,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("particle counts must be positive".into()));
        }
        if self.shake_nx.0 > self.shake_nx.1 || self.shake_ny.0 > self.shake_ny.1 {
            return Err(Error::Config("shake count ranges must be low <= high".into()));
        }
        Ok(())
    }
}

/// A sampled initial condition: first-frame particles, per-object
/// attributes, and the full scripted control sequence (one vector per frame,
/// empty vectors for uncontrolled environments).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSetup {
    pub particles: ParticleSet,
    pub attrs: Vec<ObjectAttr>,
    pub controls: Vec<Vec<f32>>,
}

pub const REST_SPACING: f32 = 0.06;

fn lattice(
    corner: Vector3<f32>,
    dims: (usize, usize, usize),
    object_id: u32,
    material: Material,
) -> Vec<ParticleState> {
    let mut out = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    for ix in 0..dims.0 {
        for iy in 0..dims.1 {
            for iz in 0..dims.2 {
                let q = corner
                    + Vector3::new(ix as f32, iy as f32, iz as f32) * REST_SPACING;
                out.push(ParticleState::at_rest(q, object_id, material));
            }
        }
    }
    out
}

fn uniform3(rng: &mut ChaCha8Rng, lo: Vector3<f32>, hi: Vector3<f32>) -> Vector3<f32> {
    Vector3::new(
        rng.gen_range(lo.x..=hi.x),
        rng.gen_range(lo.y..=hi.y),
        rng.gen_range(lo.z..=hi.z),
    )
}

/// FluidShake wall-particle face centers in boundary-index order:
/// floor, -x wall, +x wall, -z wall, +z wall.
pub fn shake_wall_centers(x: f32, half_w: f32, half_d: f32) -> [Vector3<f32>; 5] {
    let mid = SHAKE_BOX_HEIGHT / 2.0;
    [
        Vector3::new(x, 0.0, 0.0),
        Vector3::new(x - half_w, mid, 0.0),
        Vector3::new(x + half_w, mid, 0.0),
        Vector3::new(x, mid, -half_d),
        Vector3::new(x, mid, half_d),
    ]
}

/// RiceGrip finger-plate face centers in boundary-index order, at the given
/// plate height.
pub fn grip_finger_centers(control: &[f32], height: f32) -> [Vector3<f32>; 2] {
    let w = Vector3::new(control[2].cos(), 0.0, control[2].sin());
    let center = Vector3::new(control[0], height, control[1]);
    [
        center + w * (control[3] / 2.0),
        center - w * (control[3] / 2.0),
    ]
}

/// Rebuild the scripted boundary-particle states for one frame from its
/// control vector (and the previous one, for finite-difference velocities).
pub fn boundary_states(
    env: EnvId,
    control: &[f32],
    prev_control: Option<&[f32]>,
    dt: f32,
    object_id: u32,
    rice_side: usize,
) -> Vec<ParticleState> {
    let centers: Vec<Vector3<f32>> = match env {
        EnvId::FluidFall | EnvId::BoxBath => Vec::new(),
        EnvId::FluidShake => shake_wall_centers(control[0], control[2], control[3]).to_vec(),
        EnvId::RiceGrip => {
            let height = plate_height(rice_side);
            grip_finger_centers(control, height).to_vec()
        }
    };
    let prev_centers: Option<Vec<Vector3<f32>>> = prev_control.map(|pc| match env {
        EnvId::FluidShake => shake_wall_centers(pc[0], pc[2], pc[3]).to_vec(),
        EnvId::RiceGrip => grip_finger_centers(pc, plate_height(rice_side)).to_vec(),
        _ => Vec::new(),
    });
    centers
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let mut p = ParticleState::at_rest(q, object_id, Material::Boundary);
            if let Some(prev) = &prev_centers {
                p.velocity = (q - prev[i]) / dt;
            }
            p
        })
        .collect()
}

fn plate_height(rice_side: usize) -> f32 {
    0.03 + (rice_side.saturating_sub(1)) as f32 * REST_SPACING / 2.0
}

/// Sample one rollout's initial condition and control schedule.
pub fn sample_setup(spec: &EnvSpec, rng: &mut ChaCha8Rng, dt: f32) -> Result<SceneSetup> {
    spec.check()?;
    let frames = spec.rollout_len;
    match spec.env {
        EnvId::FluidFall => {
            let a = uniform3(
                rng,
                Vector3::new(0.15, 0.55, 0.05),
                Vector3::new(0.25, 0.7, 0.15),
            );
            let b = uniform3(
                rng,
                Vector3::new(0.15, 0.1, 0.05),
                Vector3::new(0.25, 0.25, 0.15),
            );
            let viscosity = rng.gen_range(0.02..=0.2f32);
            let (s0, s1) = spec.fall_drops;
            let mut particles = lattice(a, (s0, s0, s0), 0, Material::Fluid);
            particles.extend(lattice(b, (s1, s1, s1), 1, Material::Fluid));
            Ok(SceneSetup {
                particles: ParticleSet::new(particles),
                attrs: vec![
                    ObjectAttr::fixed(vec![viscosity]),
                    ObjectAttr::fixed(vec![viscosity]),
                ],
                controls: vec![Vec::new(); frames],
            })
        }
        EnvId::BoxBath => {
            let margin = 0.03;
            let (fx, fy, fz) = spec.bath_fluid;
            let mut particles = lattice(
                Vector3::new(margin, margin, margin),
                (fx, fy, fz),
                0,
                Material::Fluid,
            );
            let side = spec.bath_cube;
            let half = (side - 1) as f32 * REST_SPACING / 2.0;
            let cx = rng.gen_range(0.45..=1.05f32);
            let cz = rng.gen_range(0.09..=0.31f32);
            let corner = Vector3::new(cx - half, margin, cz - half);
            particles.extend(lattice(corner, (side, side, side), 1, Material::Rigid));
            Ok(SceneSetup {
                particles: ParticleSet::new(particles),
                attrs: vec![ObjectAttr::fixed(vec![]), ObjectAttr::fixed(vec![])],
                controls: vec![Vec::new(); frames],
            })
        }
        EnvId::FluidShake => {
            let nx = rng.gen_range(spec.shake_nx.0..=spec.shake_nx.1);
            let ny = rng.gen_range(spec.shake_ny.0..=spec.shake_ny.1);
            let nz = spec.shake_nz;
            let half_w = nx as f32 * REST_SPACING / 2.0 + 0.12;
            let half_d = nz as f32 * REST_SPACING / 2.0 + 0.02;
            let x0 = rng.gen_range(-0.2..=0.2f32);
            let corner = Vector3::new(
                x0 - (nx - 1) as f32 * REST_SPACING / 2.0,
                0.03,
                -((nz - 1) as f32) * REST_SPACING / 2.0,
            );
            let mut particles = lattice(corner, (nx, ny, nz), 0, Material::Fluid);

            // Scripted box motion: a random-walk velocity with a restoring
            // pull toward the origin, integrated per frame.
            let mut controls = Vec::with_capacity(frames);
            let (mut x, mut v) = (x0, 0.0f32);
            controls.push(vec![x, v, half_w, half_d]);
            for _ in 1..frames {
                v += rng.gen_range(-0.15..=0.15f32) - 0.1 * x;
                x += v * dt;
                controls.push(vec![x, v, half_w, half_d]);
            }

            let walls = boundary_states(EnvId::FluidShake, &controls[0], None, dt, 1, 0);
            particles.extend(walls);
            Ok(SceneSetup {
                particles: ParticleSet::new(particles),
                attrs: vec![ObjectAttr::fixed(vec![]), ObjectAttr::fixed(vec![])],
                controls,
            })
        }
        EnvId::RiceGrip => {
            let side = spec.rice_side;
            let half = (side - 1) as f32 * REST_SPACING / 2.0;
            let corner = Vector3::new(-half, 0.03, -half);
            let mut particles = lattice(corner, (side, side, side), 0, Material::ElasticPlastic);

            let stiffness = rng.gen_range(0.3..=0.7f32);
            let threshold = rng.gen_range(1e-5..=5e-4f32);
            let creep = rng.gen_range(0.1..=0.3f32);

            // Gripper center in a disk around the rice, jaw axis azimuthal.
            let radius = 0.1 * rng.gen_range(0.0..=1.0f32).sqrt();
            let phi = rng.gen_range(0.0..std::f32::consts::TAU);
            let (gx, gz) = (radius * phi.cos(), radius * phi.sin());
            let theta = rng.gen_range(0.0..std::f32::consts::PI);
            let closed = 0.18 * rng.gen_range(0.7..=1.0f32);
            let open = 0.5;

            let close_frames = (frames / 2).min(15).max(1);
            let controls: Vec<Vec<f32>> = (0..frames)
                .map(|t| {
                    let sep = if t <= close_frames {
                        let f = t as f32 / close_frames as f32;
                        open + (closed - open) * f
                    } else {
                        let f = ((t - close_frames) as f32 / close_frames as f32).min(1.0);
                        closed + (open - closed) * f
                    };
                    vec![gx, gz, theta, sep]
                })
                .collect();

            let fingers = boundary_states(EnvId::RiceGrip, &controls[0], None, dt, 1, side);
            particles.extend(fingers);
            Ok(SceneSetup {
                particles: ParticleSet::new(particles),
                attrs: vec![
                    ObjectAttr::fixed(vec![stiffness, threshold, creep]),
                    // Boundary objects carry inert zeros so every object has
                    // the environment's attribute width.
                    ObjectAttr::fixed(vec![0.0; 3]),
                ],
                controls,
            })
        }
    }
}
