//! Material-specific output heads and state integration.
//!
//! Every head reads the concatenation of the leaf stage's node encoding and
//! the final hidden state. Fluid and elastic heads predict per-particle
//! velocities (elastic additionally predicts resting-position velocities);
//! the rigid head pools its object's rows and predicts one rigid transform:
//! a quaternion perturbation of the identity applied about the object's
//! center of mass, plus a center-of-mass velocity. Predicting a transform
//! instead of per-particle motion keeps rigid objects exactly isometric.
//!
//! The unified ablation replaces all of this with a single per-particle
//! head shared by every material.
//!
//! Network outputs live in standardized velocity space; they are
//! unstandardized on the tape, clamped, and integrated so that the
//! predicted next positions stay differentiable end to end.

use rand::Rng;

use crate::autodiff::{Mlp, MlpSpec, ParamStore, Tape, TensorId};
use crate::scene::{EnvId, Material};
use crate::{Error, Result};

use super::features::{env_has_rest_feature, unstandardize, Assembled};
use super::{ModelConfig, Stats};

pub struct Heads {
    pub fluid: Option<Mlp>,
    pub rigid: Option<Mlp>,
    pub elastic: Option<Mlp>,
    pub unified: Option<Mlp>,
}

/// Heads an environment needs: (name, output dim). The rigid head's seven
/// outputs are a raw quaternion followed by a center-of-mass velocity.
pub fn head_plan(env: EnvId, unified: bool) -> Vec<(&'static str, usize)> {
    if unified {
        let dim = if env_has_rest_feature(env) { 6 } else { 3 };
        return vec![("unified", dim)];
    }
    match env {
        EnvId::FluidFall | EnvId::FluidShake => vec![("fluid", 3)],
        EnvId::BoxBath => vec![("fluid", 3), ("rigid", 7)],
        EnvId::RiceGrip => vec![("elastic", 6)],
    }
}

impl Heads {
    fn empty() -> Self {
        Heads {
            fluid: None,
            rigid: None,
            elastic: None,
            unified: None,
        }
    }

    fn slot(&mut self, name: &str) -> &mut Option<Mlp> {
        match name {
            "fluid" => &mut self.fluid,
            "rigid" => &mut self.rigid,
            "elastic" => &mut self.elastic,
            _ => &mut self.unified,
        }
    }

    pub fn init(
        store: &mut ParamStore,
        env: EnvId,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut heads = Heads::empty();
        for (name, out) in head_plan(env, cfg.unified_heads) {
            let spec = MlpSpec::new(2 * cfg.effect_dim, &cfg.head_hidden, out);
            *heads.slot(name) = Some(Mlp::init(store, &format!("head.{name}"), &spec, rng)?);
        }
        Ok(heads)
    }

    pub fn bind(store: &ParamStore, env: EnvId, cfg: &ModelConfig) -> Result<Self> {
        let mut heads = Heads::empty();
        for (name, out) in head_plan(env, cfg.unified_heads) {
            let spec = MlpSpec::new(2 * cfg.effect_dim, &cfg.head_hidden, out);
            *heads.slot(name) = Some(Mlp::bind(store, &format!("head.{name}"), &spec)?);
        }
        Ok(heads)
    }
}

/// Predicted next state for the free leaves, on the tape.
pub struct Prediction {
    /// n_free x 3 next positions.
    pub next_q: TensorId,
    /// n_free x 3 next velocities, (next_q - q) / dt.
    pub next_v: TensorId,
    /// n_free x 3 next resting positions (equal to next_q outside elastic
    /// objects).
    pub next_r: TensorId,
}

fn clamp(tape: &mut Tape, v: TensorId, limit: f32) -> TensorId {
    let lo = tape.max_const(v, -limit);
    tape.min_const(lo, limit)
}

fn stats_for<'a>(stats: &'a Stats, name: &str) -> Result<(&'a [f32], &'a [f32])> {
    match (stats.head_mean.get(name), stats.head_std.get(name)) {
        (Some(m), Some(s)) => Ok((m, s)),
        _ => Err(Error::Contract(format!("missing output stats for head {name}"))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn predict(
    tape: &mut Tape,
    store: &ParamStore,
    heads: &Heads,
    asm: &Assembled,
    h_all: TensorId,
    c_leaf: TensorId,
    stats: &Stats,
    cfg: &ModelConfig,
    dt: f32,
) -> Result<Prediction> {
    let layout = &asm.layout;
    let h_leaf = if layout.n_node == layout.n_leaf {
        h_all
    } else {
        tape.slice_rows(h_all, 0, layout.n_leaf)
    };
    let input_all = tape.concat_cols(&[c_leaf, h_leaf]);

    let mut parts_q = Vec::new();
    let mut parts_r = Vec::new();
    for (oid, range) in layout.object_leaf_range.iter().enumerate() {
        let material = layout.object_material[oid];
        if material == Material::Boundary {
            continue;
        }
        if range.end > layout.n_free {
            return Err(Error::Contract(format!(
                "object {oid} extends into the boundary block"
            )));
        }
        let q_rows = tape.slice_rows(asm.q_all, range.start, range.end);

        let per_particle = |tape: &mut Tape, head: &Mlp, name: &str| -> Result<(TensorId, Option<TensorId>)> {
            let x = tape.slice_rows(input_all, range.start, range.end);
            let out = head.forward(tape, store, x)?;
            let (mean, std) = stats_for(stats, name)?;
            let out = unstandardize(tape, out, mean, std);
            let out_dim = tape.cols(out);
            let v = tape.slice_cols(out, 0, 3);
            let v = clamp(tape, v, cfg.velocity_clamp);
            let dq = tape.scale(v, dt);
            let q_next = tape.add(q_rows, dq);
            let r_next = if out_dim == 6 && material == Material::ElasticPlastic {
                let r_all = asm
                    .r_all
                    .ok_or_else(|| Error::Contract("elastic object without resting positions".into()))?;
                let r_rows = tape.slice_rows(r_all, range.start, range.end);
                let vr = tape.slice_cols(out, 3, 6);
                let vr = clamp(tape, vr, cfg.velocity_clamp);
                let dr = tape.scale(vr, dt);
                Some(tape.add(r_rows, dr))
            } else {
                None
            };
            Ok((q_next, r_next))
        };

        let (q_next, r_next) = if cfg.unified_heads {
            let head = heads
                .unified
                .as_ref()
                .ok_or_else(|| Error::Contract("unified head not initialized".into()))?;
            per_particle(tape, head, "unified")?
        } else {
            match material {
                Material::Fluid => {
                    let head = heads
                        .fluid
                        .as_ref()
                        .ok_or_else(|| Error::Contract("fluid head not initialized".into()))?;
                    per_particle(tape, head, "fluid")?
                }
                Material::ElasticPlastic => {
                    let head = heads
                        .elastic
                        .as_ref()
                        .ok_or_else(|| Error::Contract("elastic head not initialized".into()))?;
                    per_particle(tape, head, "elastic")?
                }
                Material::Rigid => {
                    let head = heads
                        .rigid
                        .as_ref()
                        .ok_or_else(|| Error::Contract("rigid head not initialized".into()))?;
                    let x = tape.slice_rows(input_all, range.start, range.end);
                    let pooled = tape.mean_rows(x);
                    let out = head.forward(tape, store, pooled)?;
                    let (mean, std) = stats_for(stats, "rigid")?;
                    let out = unstandardize(tape, out, mean, std);
                    let quat_raw = tape.slice_cols(out, 0, 4);
                    let v_com = tape.slice_cols(out, 4, 7);
                    let v_com = clamp(tape, v_com, cfg.velocity_clamp);
                    let q_next = rigid_transform(tape, q_rows, quat_raw, v_com, asm, oid, dt)?;
                    (q_next, None)
                }
                Material::Boundary => unreachable!(),
            }
        };
        parts_r.push(r_next.unwrap_or(q_next));
        parts_q.push(q_next);
    }

    let next_q = if parts_q.len() == 1 {
        parts_q[0]
    } else {
        tape.concat_rows(&parts_q)
    };
    let next_r = if parts_r.len() == 1 {
        parts_r[0]
    } else {
        tape.concat_rows(&parts_r)
    };
    let dq = tape.sub(next_q, asm.leaves.positions);
    let next_v = tape.scale(dq, 1.0 / dt);
    Ok(Prediction {
        next_q,
        next_v,
        next_r,
    })
}

/// Apply a predicted rigid transform: normalize `identity + quat_raw`, spin
/// the object's particles about its center of mass, then translate the
/// center by its predicted velocity.
fn rigid_transform(
    tape: &mut Tape,
    q_rows: TensorId,
    quat_raw: TensorId,
    v_com: TensorId,
    asm: &Assembled,
    oid: usize,
    dt: f32,
) -> Result<TensorId> {
    let com = asm.coms[oid]
        .ok_or_else(|| Error::Contract("rigid object without a center of mass".into()))?;
    let identity = tape.leaf(1, 4, vec![1.0, 0.0, 0.0, 0.0]);
    let quat = tape.add(quat_raw, identity);
    let sq = tape.mul(quat, quat);
    let n2 = tape.sum_cols(sq);
    let n2e = tape.add_const(n2, 1e-12);
    let norm = tape.sqrt(n2e);
    let inv = tape.recip(norm);
    let quat = tape.mul_scalar(quat, inv);

    let w = tape.slice_cols(quat, 0, 1);
    let x = tape.slice_cols(quat, 1, 2);
    let y = tape.slice_cols(quat, 2, 3);
    let z = tape.slice_cols(quat, 3, 4);

    let two = 2.0;
    let term = |tape: &mut Tape, a: TensorId, b: TensorId, c: TensorId, d: TensorId, sign: f32| {
        // 2*(a*b + sign * c*d)
        let ab = tape.mul(a, b);
        let cd = tape.mul(c, d);
        let cd = tape.scale(cd, sign);
        let s = tape.add(ab, cd);
        tape.scale(s, two)
    };
    let diag = |tape: &mut Tape, a: TensorId, b: TensorId| {
        // 1 - 2*(a^2 + b^2)
        let a2 = tape.mul(a, a);
        let b2 = tape.mul(b, b);
        let s = tape.add(a2, b2);
        let s = tape.scale(s, -two);
        tape.add_const(s, 1.0)
    };

    // Transposed rotation matrix, row-major, so that rows * rt rotates row
    // vectors by the quaternion's rotation.
    let m00 = diag(tape, y, z);
    let m01 = term(tape, x, y, w, z, 1.0);
    let m02 = term(tape, x, z, w, y, -1.0);
    let m10 = term(tape, x, y, w, z, -1.0);
    let m11 = diag(tape, x, z);
    let m12 = term(tape, y, z, w, x, 1.0);
    let m20 = term(tape, x, z, w, y, 1.0);
    let m21 = term(tape, y, z, w, x, -1.0);
    let m22 = diag(tape, x, y);
    let flat = tape.concat_cols(&[m00, m01, m02, m10, m11, m12, m20, m21, m22]);
    let rt = tape.reshape(flat, 3, 3);

    let offsets = tape.sub_row(q_rows, com);
    let rotated = tape.matmul(offsets, rt);
    let shift = tape.scale(v_com, dt);
    let new_com = tape.add(com, shift);
    Ok(tape.add_row(rotated, new_com))
}
