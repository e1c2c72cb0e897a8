//! Shape matching for rigid and elastic bodies, with rest-shape creep for
//! plasticity.

use nalgebra::{Matrix3, Vector3};

/// Rotation factor of the polar decomposition A = R S, by the iteration
/// R <- (R + R^-T) / 2. Regularized so degenerate (flat or tiny) clusters
/// stay finite; falls back to identity when A is not usably invertible.
pub fn polar_rotation(a: &Matrix3<f32>) -> Matrix3<f32> {
    let scale = a.abs().max();
    if !scale.is_finite() || scale < 1e-12 {
        return Matrix3::identity();
    }
    let mut r = a / scale + Matrix3::identity() * 1e-6;
    if r.determinant() <= 1e-12 {
        // Reflection or rank-deficient frame; nudge toward identity until
        // the iteration has a proper rotation to converge to.
        r += Matrix3::identity() * 0.1;
        if r.determinant() <= 1e-12 {
            return Matrix3::identity();
        }
    }
    for _ in 0..12 {
        let inv = match r.try_inverse() {
            Some(inv) => inv,
            None => return Matrix3::identity(),
        };
        // Scaled Newton step; the scaling keeps convergence fast even for
        // badly conditioned frames.
        let gamma = (inv.norm() / r.norm()).sqrt().clamp(1e-4, 1e4);
        r = (r * gamma + inv.transpose() / gamma) * 0.5;
    }
    if r.iter().all(|x| x.is_finite()) {
        r
    } else {
        Matrix3::identity()
    }
}

/// Best rigid fit of `rest` onto `cur` over the given member indices:
/// returns (rotation, cur centroid, rest centroid).
pub fn rigid_fit(
    cur: &[Vector3<f32>],
    rest: &[Vector3<f32>],
    members: &[u32],
) -> (Matrix3<f32>, Vector3<f32>, Vector3<f32>) {
    let inv = 1.0 / members.len() as f32;
    let mut qc = Vector3::zeros();
    let mut rc = Vector3::zeros();
    for &i in members {
        qc += cur[i as usize];
        rc += rest[i as usize];
    }
    qc *= inv;
    rc *= inv;
    let mut a = Matrix3::zeros();
    for &i in members {
        a += (cur[i as usize] - qc) * (rest[i as usize] - rc).transpose();
    }
    (polar_rotation(&a), qc, rc)
}

/// Snap `members` onto the best rigid fit of their rest shape.
pub fn match_rigid(cur: &mut [Vector3<f32>], rest: &[Vector3<f32>], members: &[u32]) {
    let (r, qc, rc) = rigid_fit(cur, rest, members);
    for &i in members {
        cur[i as usize] = r * (rest[i as usize] - rc) + qc;
    }
}

/// Overlapping-cluster elastic shape match. Each particle blends toward the
/// mean of its clusters' rigid goals, stepping a `stiffness` fraction of the
/// way per call. Returns the area-mean squared deviation from the goals,
/// one entry per cluster, for the plasticity threshold test.
pub struct ElasticClusters {
    /// Member particle indices per cluster (overlapping; every particle is
    /// in at least one cluster).
    pub members: Vec<Vec<u32>>,
}

impl ElasticClusters {
    /// Build overlapping clusters from rest positions: k seeds via the same
    /// farthest-point clustering used elsewhere, then each particle joins
    /// every cluster whose seed centroid lies within `overlap`.
    pub fn build(rest: &[Vector3<f32>], k: usize, overlap: f32) -> Self {
        let assign = crate::graph::cluster(rest, k);
        let mut centers = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            centers[c as usize] += rest[i];
            counts[c as usize] += 1;
        }
        for c in 0..k {
            centers[c] /= counts[c].max(1) as f32;
        }
        let mut members = vec![Vec::new(); k];
        for (i, &own) in assign.iter().enumerate() {
            for (c, center) in centers.iter().enumerate() {
                if c as u32 == own || (rest[i] - center).norm() < overlap {
                    members[c].push(i as u32);
                }
            }
        }
        members.retain(|m| !m.is_empty());
        Self { members }
    }

    /// One blended shape-match pass; `goal_sq_dev[c]` is the mean squared
    /// distance between cluster c's particles and their rigid goals before
    /// the blend (the plastic strain measure).
    pub fn match_step(
        &self,
        cur: &mut [Vector3<f32>],
        rest: &[Vector3<f32>],
        stiffness: f32,
    ) -> Vec<f32> {
        let n = cur.len();
        let mut goal_sum = vec![Vector3::zeros(); n];
        let mut goal_cnt = vec![0u32; n];
        let mut strain = Vec::with_capacity(self.members.len());
        for members in &self.members {
            let (r, qc, rc) = rigid_fit(cur, rest, members);
            let mut dev = 0.0;
            for &i in members {
                let g = r * (rest[i as usize] - rc) + qc;
                dev += (g - cur[i as usize]).norm_squared();
                goal_sum[i as usize] += g;
                goal_cnt[i as usize] += 1;
            }
            strain.push(dev / members.len() as f32);
        }
        for i in 0..n {
            if goal_cnt[i] > 0 {
                let goal = goal_sum[i] / goal_cnt[i] as f32;
                cur[i] += (goal - cur[i]) * stiffness;
            }
        }
        strain
    }

    /// Plastic creep: clusters strained beyond `threshold` pull their rest
    /// shape toward the observed deformed shape at rate `creep` (both from
    /// the per-scene material attributes). Below threshold rest positions
    /// are untouched.
    pub fn creep_rest(
        &self,
        cur: &[Vector3<f32>],
        rest: &mut [Vector3<f32>],
        strain: &[f32],
        threshold: f32,
        creep: f32,
    ) {
        let n = rest.len();
        let mut target_sum = vec![Vector3::zeros(); n];
        let mut target_cnt = vec![0u32; n];
        for (c, members) in self.members.iter().enumerate() {
            if strain[c] <= threshold {
                continue;
            }
            let (r, qc, rc) = rigid_fit(cur, rest, members);
            let inv_r = r.transpose();
            for &i in members {
                // Observed shape expressed in the rest frame.
                let local = inv_r * (cur[i as usize] - qc) + rc;
                target_sum[i as usize] += local;
                target_cnt[i as usize] += 1;
            }
        }
        for i in 0..n {
            if target_cnt[i] > 0 {
                let target = target_sum[i] / target_cnt[i] as f32;
                rest[i] += (target - rest[i]) * creep;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rot_xy(angle: f32) -> Matrix3<f32> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn polar_recovers_pure_rotation() {
        let r0 = rot_xy(0.7);
        let r = polar_rotation(&r0);
        assert_relative_eq!(r, r0, epsilon = 1e-5);
    }

    #[test]
    fn polar_strips_symmetric_stretch() {
        let r0 = rot_xy(-1.2);
        let stretch = Matrix3::from_diagonal(&Vector3::new(2.0, 0.5, 1.3));
        let r = polar_rotation(&(r0 * stretch));
        assert_relative_eq!(r, r0, epsilon = 1e-4);
    }

    #[test]
    fn polar_survives_rank_deficiency() {
        let flat = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let r = polar_rotation(&flat);
        assert!(r.iter().all(|x| x.is_finite()));
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-3);
        assert_eq!(polar_rotation(&Matrix3::zeros()), Matrix3::identity());
    }

    #[test]
    fn rigid_match_restores_cube() {
        let rest: Vec<Vector3<f32>> = (0..8)
            .map(|i| {
                Vector3::new((i & 1) as f32, ((i >> 1) & 1) as f32, ((i >> 2) & 1) as f32) * 0.06
            })
            .collect();
        // Scatter the cube, then match: pairwise distances come back.
        let mut cur: Vec<Vector3<f32>> = rest
            .iter()
            .enumerate()
            .map(|(i, p)| {
                rot_xy(0.4) * p
                    + Vector3::new(0.3, 0.1, -0.2)
                    + Vector3::new(0.01, -0.008, 0.005) * (i as f32 % 3.0 - 1.0)
            })
            .collect();
        let members: Vec<u32> = (0..8).collect();
        match_rigid(&mut cur, &rest, &members);
        for i in 0..8 {
            for j in (i + 1)..8 {
                let d0 = (rest[i] - rest[j]).norm();
                let d1 = (cur[i] - cur[j]).norm();
                assert!((d0 - d1).abs() < 1e-5, "pair {i},{j}: {d0} vs {d1}");
            }
        }
    }

    #[test]
    fn elastic_clusters_cover_every_particle() {
        let rest: Vec<Vector3<f32>> = (0..64)
            .map(|i| {
                Vector3::new((i % 4) as f32, ((i / 4) % 4) as f32, (i / 16) as f32) * 0.06
            })
            .collect();
        let clusters = ElasticClusters::build(&rest, 8, 0.15);
        let mut seen = vec![false; 64];
        for m in &clusters.members {
            for &i in m {
                seen[i as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn undeformed_body_reports_zero_strain() {
        let rest: Vec<Vector3<f32>> = (0..27)
            .map(|i| {
                Vector3::new((i % 3) as f32, ((i / 3) % 3) as f32, (i / 9) as f32) * 0.06
            })
            .collect();
        let mut cur: Vec<Vector3<f32>> =
            rest.iter().map(|p| rot_xy(0.3) * p + Vector3::new(1.0, 2.0, 3.0)).collect();
        let clusters = ElasticClusters::build(&rest, 4, 0.15);
        let strain = clusters.match_step(&mut cur, &rest, 0.5);
        assert!(strain.iter().all(|&s| s < 1e-9), "strain {strain:?}");
    }
}
