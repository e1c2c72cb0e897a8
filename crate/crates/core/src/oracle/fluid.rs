//! Position-based fluid solve: density constraint with constraint-force
//! mixing, plus XSPH velocity smoothing.

use nalgebra::Vector3;

use crate::graph::SpatialHash;

/// Poly6 density kernel.
pub fn w_poly6(r2: f32, h: f32) -> f32 {
    let h2 = h * h;
    if r2 >= h2 {
        return 0.0;
    }
    let c = 315.0 / (64.0 * std::f32::consts::PI * h.powi(9));
    let d = h2 - r2;
    c * d * d * d
}

/// Spiky kernel gradient, pointing from j to i for r = q_i - q_j.
pub fn grad_spiky(r: Vector3<f32>, h: f32) -> Vector3<f32> {
    let len = r.norm();
    if len >= h || len < 1e-9 {
        return Vector3::zeros();
    }
    let c = -45.0 / (std::f32::consts::PI * h.powi(6));
    let d = h - len;
    r * (c * d * d / len)
}

/// Kernel-sum density of an ideal cubic lattice at `spacing`, used as the
/// rest density so a relaxed lattice is in equilibrium.
pub fn lattice_rest_density(spacing: f32, h: f32) -> f32 {
    let reach = (h / spacing).ceil() as i32;
    let mut rho = 0.0;
    for dx in -reach..=reach {
        for dy in -reach..=reach {
            for dz in -reach..=reach {
                let r = Vector3::new(dx as f32, dy as f32, dz as f32) * spacing;
                rho += w_poly6(r.norm_squared(), h);
            }
        }
    }
    rho
}

/// One density-projection pass over `movable` (fluid plus rigid) particles.
/// `contributes[i]` marks density sources; position deltas apply to all
/// movable particles so solids feel pressure (buoyancy) and the shape-match
/// pass afterwards re-rigidifies them.
pub struct DensitySolve {
    pub h: f32,
    pub rest_density: f32,
    pub cfm_eps: f32,
}

impl DensitySolve {
    pub fn apply(&self, positions: &mut [Vector3<f32>], movable: &[u32]) {
        let n = movable.len();
        if n == 0 {
            return;
        }
        let hash = SpatialHash::build(
            movable.iter().map(|&i| (i, positions[i as usize])),
            self.h,
        );
        // Neighbor lists once per pass; they stay valid for the lambda and
        // displacement loops since both read pre-pass positions.
        let mut neighbors: Vec<Vec<u32>> = Vec::with_capacity(n);
        let mut scratch = Vec::new();
        for &i in movable {
            hash.neighbors_into(&positions[i as usize], self.h, positions, &mut scratch);
            neighbors.push(scratch.clone());
        }
        let index_of: std::collections::HashMap<u32, usize> =
            movable.iter().enumerate().map(|(k, &i)| (i, k)).collect();

        let mut lambda = vec![0.0f32; n];
        for (k, &i) in movable.iter().enumerate() {
            let qi = positions[i as usize];
            let mut rho = 0.0;
            let mut grad_i = Vector3::zeros();
            let mut sum_grad2 = 0.0;
            for &j in &neighbors[k] {
                let d = qi - positions[j as usize];
                rho += w_poly6(d.norm_squared(), self.h);
                if j != i {
                    let g = grad_spiky(d, self.h) / self.rest_density;
                    grad_i += g;
                    sum_grad2 += g.norm_squared();
                }
            }
            let c = rho / self.rest_density - 1.0;
            // Compression only: an under-dense surface should not contract.
            if c > 0.0 {
                lambda[k] = -c / (sum_grad2 + grad_i.norm_squared() + self.cfm_eps);
            }
        }

        let mut delta = vec![Vector3::zeros(); n];
        for (k, &i) in movable.iter().enumerate() {
            let qi = positions[i as usize];
            let mut dp = Vector3::zeros();
            for &j in &neighbors[k] {
                if j == i {
                    continue;
                }
                let lj = index_of[&j];
                dp += grad_spiky(qi - positions[j as usize], self.h) * (lambda[k] + lambda[lj]);
            }
            delta[k] = dp / self.rest_density;
        }
        for (k, &i) in movable.iter().enumerate() {
            positions[i as usize] += delta[k];
        }
    }

    /// XSPH: blend each fluid particle's velocity toward its neighborhood
    /// mean. `strength` is the per-scene viscosity attribute.
    pub fn xsph(
        &self,
        positions: &[Vector3<f32>],
        velocities: &mut [Vector3<f32>],
        fluid: &[u32],
        strength: f32,
    ) {
        if fluid.is_empty() || strength == 0.0 {
            return;
        }
        let hash = SpatialHash::build(fluid.iter().map(|&i| (i, positions[i as usize])), self.h);
        let mut scratch = Vec::new();
        let mut adjust = vec![Vector3::zeros(); fluid.len()];
        for (k, &i) in fluid.iter().enumerate() {
            let qi = positions[i as usize];
            let vi = velocities[i as usize];
            hash.neighbors_into(&qi, self.h, positions, &mut scratch);
            let mut acc = Vector3::zeros();
            for &j in &scratch {
                if j == i {
                    continue;
                }
                let w = w_poly6((qi - positions[j as usize]).norm_squared(), self.h);
                acc += (velocities[j as usize] - vi) * w;
            }
            adjust[k] = acc * (strength / self.rest_density);
        }
        for (k, &i) in fluid.iter().enumerate() {
            velocities[i as usize] += adjust[k];
        }
    }
}
