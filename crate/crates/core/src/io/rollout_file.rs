//! Rollout container.
//!
//! Layout: magic `DPR1` | u32 environment code | u32 particle count N |
//! u32 frame count T | f32 dt | u64 seed | u32 control dim | u32 object
//! count | per object (u8 material code, u32 particle count, u64 attr
//! length, f32 attrs, u8 learnable) | T frames, each N x 9 f32 rows
//! (position, velocity, resting position) followed by the control vector.
//! Objects are contiguous, so the object table fully determines per-particle
//! object id and material.

use std::path::Path;

use nalgebra::Vector3;

use crate::scene::{EnvId, Material, ObjectAttr, ParticleSet, ParticleState, Rollout};
use crate::{Error, Result};

use super::{push_f32, push_u32, push_u64, ByteReader};

const MAGIC: &[u8; 4] = b"DPR1";
const MAX_PARTICLES: usize = 1 << 20;
const MAX_FRAMES: usize = 1 << 17;
const MAX_OBJECTS: usize = 1 << 16;
const MAX_CONTROL: usize = 4096;
const MAX_ATTRS: usize = 4096;

pub fn write_rollout_bytes(r: &Rollout) -> Result<Vec<u8>> {
    r.validate()?;
    let n = r.particle_count();
    let mut out = Vec::with_capacity(64 + r.frames.len() * n * 36);
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, r.env.code());
    push_u32(&mut out, n as u32);
    push_u32(&mut out, r.frames.len() as u32);
    push_f32(&mut out, r.dt);
    push_u64(&mut out, r.seed);
    push_u32(&mut out, r.env.control_dim() as u32);
    push_u32(&mut out, r.objects.len() as u32);
    let frame0 = &r.frames[0];
    for (oid, obj) in r.objects.iter().enumerate() {
        let range = frame0.object_range(oid as u32);
        if range.is_empty() {
            return Err(Error::Contract(format!("object {oid} has no particles")));
        }
        out.push(frame0.particles[range.start].material.one_hot_index() as u8);
        push_u32(&mut out, range.len() as u32);
        push_u64(&mut out, obj.attrs.len() as u64);
        for &a in &obj.attrs {
            push_f32(&mut out, a);
        }
        out.push(obj.learnable as u8);
    }
    for (frame, control) in r.frames.iter().zip(&r.controls) {
        for p in frame.iter() {
            for v in [p.position, p.velocity, p.resting_position] {
                push_f32(&mut out, v.x);
                push_f32(&mut out, v.y);
                push_f32(&mut out, v.z);
            }
        }
        for &c in control {
            push_f32(&mut out, c);
        }
    }
    Ok(out)
}

/// Parse rollout bytes. Never panics on malformed input; the result is NOT
/// re-validated against scene invariants (callers that trust the file can
/// skip it, loaders for training call `Rollout::validate`).
pub fn decode_rollout(bytes: &[u8]) -> Result<Rollout> {
    let mut rd = ByteReader::new(bytes);
    if rd.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("not a rollout file (bad magic)".into()));
    }
    let env = EnvId::from_code(rd.u32("environment")?)?;
    let n = rd.u32("particle count")? as usize;
    let t = rd.u32("frame count")? as usize;
    if n > MAX_PARTICLES {
        return Err(Error::Format(format!("particle count {n} exceeds cap")));
    }
    if t > MAX_FRAMES {
        return Err(Error::Format(format!("frame count {t} exceeds cap")));
    }
    let dt = rd.f32("dt")?;
    let seed = rd.u64("seed")?;
    let control_dim = rd.u32("control dim")? as usize;
    if control_dim > MAX_CONTROL {
        return Err(Error::Format(format!("control dim {control_dim} exceeds cap")));
    }
    let object_count = rd.u32("object count")? as usize;
    if object_count > MAX_OBJECTS {
        return Err(Error::Format(format!("object count {object_count} exceeds cap")));
    }
    let mut objects = Vec::with_capacity(object_count.min(1024));
    let mut ids = Vec::with_capacity(n.min(MAX_PARTICLES));
    for oid in 0..object_count {
        let material = Material::from_index(rd.u8("material")?)?;
        let count = rd.u32("object particle count")? as usize;
        if ids.len() + count > n {
            return Err(Error::Format(format!(
                "object table claims more than {n} particles"
            )));
        }
        let attr_len = rd.len_capped(MAX_ATTRS, 4, "attribute length")?;
        let attrs = rd.f32_vec(attr_len, "attributes")?;
        let learnable = rd.u8("learnable flag")? != 0;
        objects.push(ObjectAttr { attrs, learnable });
        ids.extend(std::iter::repeat((oid as u32, material)).take(count));
    }
    if ids.len() != n {
        return Err(Error::Format(format!(
            "object table covers {} of {n} particles",
            ids.len()
        )));
    }

    // Frame payload size check up front so a lying header cannot trigger a
    // huge allocation.
    let frame_floats = n
        .checked_mul(9)
        .and_then(|x| x.checked_add(control_dim))
        .ok_or_else(|| Error::Format("frame size overflow".into()))?;
    let need = frame_floats
        .checked_mul(t)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Format("frame size overflow".into()))?;
    if rd.remaining() < need {
        return Err(Error::Format(format!(
            "frames need {need} bytes, {} remain",
            rd.remaining()
        )));
    }

    let mut frames = Vec::with_capacity(t);
    let mut controls = Vec::with_capacity(t);
    for _ in 0..t {
        let mut particles = Vec::with_capacity(n);
        for &(object_id, material) in &ids {
            let v = rd.f32_vec(9, "particle state")?;
            particles.push(ParticleState {
                position: Vector3::new(v[0], v[1], v[2]),
                velocity: Vector3::new(v[3], v[4], v[5]),
                resting_position: Vector3::new(v[6], v[7], v[8]),
                object_id,
                material,
            });
        }
        frames.push(ParticleSet::new(particles));
        controls.push(rd.f32_vec(control_dim, "control")?);
    }
    if !rd.is_done() {
        return Err(Error::Format(format!("{} trailing bytes", rd.remaining())));
    }
    Ok(Rollout {
        env,
        dt,
        seed,
        objects,
        frames,
        controls,
    })
}

pub fn save_rollout(path: &Path, r: &Rollout) -> Result<()> {
    let bytes = write_rollout_bytes(r)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_rollout(path: &Path) -> Result<Rollout> {
    let bytes = std::fs::read(path)?;
    decode_rollout(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rollout() -> Rollout {
        let mk = |x: f32, oid: u32, m: Material| ParticleState {
            position: Vector3::new(x, 0.5, -0.25),
            velocity: Vector3::new(0.0, -1.5, 0.0),
            resting_position: if m == Material::ElasticPlastic {
                Vector3::new(x, 0.5, 0.0)
            } else {
                Vector3::new(x, 0.5, -0.25)
            },
            object_id: oid,
            material: m,
        };
        let frame = ParticleSet::new(vec![
            mk(0.0, 0, Material::ElasticPlastic),
            mk(0.06, 0, Material::ElasticPlastic),
            mk(0.5, 1, Material::Boundary),
        ]);
        Rollout {
            env: EnvId::RiceGrip,
            dt: 1.0 / 60.0,
            seed: 42,
            objects: vec![
                ObjectAttr {
                    attrs: vec![0.5, 1e-4, 0.2],
                    learnable: true,
                },
                ObjectAttr::fixed(vec![0.0, 0.0, 0.0]),
            ],
            frames: vec![frame.clone(), frame],
            controls: vec![vec![0.0, 0.0, 1.0, 0.5], vec![0.0, 0.0, 1.0, 0.45]],
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let r = sample_rollout();
        let bytes = write_rollout_bytes(&r).unwrap();
        let r2 = decode_rollout(&bytes).unwrap();
        assert_eq!(r, r2);
        let bytes2 = write_rollout_bytes(&r2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn header_particle_overcommit_is_rejected() {
        let r = sample_rollout();
        let mut bytes = write_rollout_bytes(&r).unwrap();
        // Inflate the frame count field without appending frames.
        bytes[12..16].copy_from_slice(&1000u32.to_le_bytes());
        let err = decode_rollout(&bytes).unwrap_err().to_string();
        assert!(err.contains("remain"), "{err}");
    }

    #[test]
    fn unknown_material_code_is_rejected() {
        let r = sample_rollout();
        let mut bytes = write_rollout_bytes(&r).unwrap();
        // First object's material byte sits right after the fixed header.
        let header = 4 + 4 + 4 + 4 + 4 + 8 + 4 + 4;
        bytes[header] = 9;
        assert!(decode_rollout(&bytes).is_err());
    }
}
