//! Static and scripted plane geometry per environment.
//!
//! Every environment constrains particles with half-spaces. A plane may be
//! backed by a boundary particle (walls of the shaken box, gripper fingers);
//! such planes source wall-contact edges, and the boundary particle's
//! effective position for edge attributes is the receiver's projection onto
//! the plane.

use nalgebra::Vector3;

use crate::{Error, Result};

use super::EnvId;

/// Half-space `normal . x >= offset`, with the wall material moving at
/// `velocity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f32>,
    pub offset: f32,
    pub velocity: Vector3<f32>,
    /// Index of the backing particle within the environment's boundary
    /// object, if this plane is represented by one.
    pub boundary_index: Option<usize>,
}

impl Plane {
    fn fixed(normal: Vector3<f32>, offset: f32) -> Self {
        Plane {
            normal,
            offset,
            velocity: Vector3::zeros(),
            boundary_index: None,
        }
    }

    /// Signed distance of a point to the plane; positive inside the allowed
    /// half-space.
    pub fn signed_distance(&self, q: &Vector3<f32>) -> f32 {
        self.normal.dot(q) - self.offset
    }
}

/// BoxBath container interior.
pub const BOX_BATH_EXTENT: [f32; 3] = [1.2, 1.0, 0.4];
/// FluidShake interior height.
pub const SHAKE_BOX_HEIGHT: f32 = 1.0;

fn check_dim(env: EnvId, control: &[f32]) -> Result<()> {
    if control.len() != env.control_dim() {
        return Err(Error::Contract(format!(
            "{} control has {} entries, expected {}",
            env.as_str(),
            control.len(),
            env.control_dim()
        )));
    }
    Ok(())
}

/// The environment's planes for one frame, in a fixed order. The length
/// always equals `env.plane_count()`.
pub fn planes(env: EnvId, control: &[f32]) -> Result<Vec<Plane>> {
    check_dim(env, control)?;
    let up = Vector3::new(0.0, 1.0, 0.0);
    Ok(match env {
        EnvId::FluidFall => vec![Plane::fixed(up, 0.0)],
        EnvId::BoxBath => {
            let [ex, _ey, ez] = BOX_BATH_EXTENT;
            vec![
                Plane::fixed(up, 0.0),
                Plane::fixed(Vector3::new(1.0, 0.0, 0.0), 0.0),
                Plane::fixed(Vector3::new(-1.0, 0.0, 0.0), -ex),
                Plane::fixed(Vector3::new(0.0, 0.0, 1.0), 0.0),
                Plane::fixed(Vector3::new(0.0, 0.0, -1.0), -ez),
            ]
        }
        EnvId::FluidShake => {
            let [x, vx, half_w, half_d] = [control[0], control[1], control[2], control[3]];
            let vel = Vector3::new(vx, 0.0, 0.0);
            let with_particle = |mut p: Plane, i: usize| {
                p.velocity = vel;
                p.boundary_index = Some(i);
                p
            };
            vec![
                with_particle(Plane::fixed(up, 0.0), 0),
                with_particle(Plane::fixed(Vector3::new(1.0, 0.0, 0.0), x - half_w), 1),
                with_particle(Plane::fixed(Vector3::new(-1.0, 0.0, 0.0), -(x + half_w)), 2),
                with_particle(Plane::fixed(Vector3::new(0.0, 0.0, 1.0), -half_d), 3),
                with_particle(Plane::fixed(Vector3::new(0.0, 0.0, -1.0), -half_d), 4),
            ]
        }
        EnvId::RiceGrip => {
            let [gx, gz, theta, sep] = [control[0], control[1], control[2], control[3]];
            let w = Vector3::new(theta.cos(), 0.0, theta.sin());
            let center = Vector3::new(gx, 0.0, gz);
            let cw = center.dot(&w);
            // Finger plates close toward the jaw axis; their approach speed
            // is not in the control vector, so plate velocity is filled by
            // callers that know the schedule (the oracle). Feature code uses
            // finite differences of consecutive controls instead.
            vec![
                Plane::fixed(up, 0.0),
                Plane {
                    normal: -w,
                    offset: -(cw + sep / 2.0),
                    velocity: Vector3::zeros(),
                    boundary_index: Some(0),
                },
                Plane {
                    normal: w,
                    offset: cw - sep / 2.0,
                    velocity: Vector3::zeros(),
                    boundary_index: Some(1),
                },
            ]
        }
    })
}

/// As [`planes`], with finger/wall velocities derived from the previous
/// frame's control (first frame: zero).
pub fn planes_with_motion(
    env: EnvId,
    control: &[f32],
    prev_control: Option<&[f32]>,
    dt: f32,
) -> Result<Vec<Plane>> {
    let mut ps = planes(env, control)?;
    if env == EnvId::RiceGrip {
        if let Some(prev) = prev_control {
            check_dim(env, prev)?;
            let rate = (control[3] - prev[3]) / dt;
            let w = Vector3::new(control[2].cos(), 0.0, control[2].sin());
            // Separation shrinking (rate < 0) moves the +w plate along -w.
            ps[1].velocity = w * (rate / 2.0);
            ps[2].velocity = -w * (rate / 2.0);
        }
    }
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fluidshake_walls_track_box_position() {
        let ps = planes(EnvId::FluidShake, &[0.3, -0.5, 0.4, 0.11]).unwrap();
        assert_eq!(ps.len(), EnvId::FluidShake.plane_count());
        // Interior point must be inside all planes.
        let inside = Vector3::new(0.3, 0.2, 0.0);
        for p in &ps {
            assert!(p.signed_distance(&inside) > 0.0);
        }
        // A point outside the +x wall.
        let outside = Vector3::new(0.3 + 0.41, 0.2, 0.0);
        assert!(ps[2].signed_distance(&outside) < 0.0);
        assert_eq!(ps[1].velocity.x, -0.5);
    }

    #[test]
    fn ricegrip_fingers_straddle_the_jaw_axis() {
        // Gripper at origin, jaw along +x, separation 0.5.
        let ps = planes(EnvId::RiceGrip, &[0.0, 0.0, 0.0, 0.5]).unwrap();
        let center = Vector3::new(0.0, 0.1, 0.0);
        for p in &ps {
            assert!(p.signed_distance(&center) > 0.0);
        }
        // Points beyond either plate are outside.
        assert!(ps[1].signed_distance(&Vector3::new(0.3, 0.1, 0.0)) < 0.0);
        assert!(ps[2].signed_distance(&Vector3::new(-0.3, 0.1, 0.0)) < 0.0);
        // Closing: separation drops, plates move inward.
        let moving = planes_with_motion(
            EnvId::RiceGrip,
            &[0.0, 0.0, 0.0, 0.48],
            Some(&[0.0, 0.0, 0.0, 0.5]),
            1.0 / 60.0,
        )
        .unwrap();
        assert!(moving[1].velocity.x < 0.0);
        assert!(moving[2].velocity.x > 0.0);
    }

    #[test]
    fn control_dim_mismatch_is_an_error() {
        assert!(planes(EnvId::RiceGrip, &[0.0; 3]).is_err());
        assert!(planes(EnvId::FluidFall, &[1.0]).is_err());
    }
}
