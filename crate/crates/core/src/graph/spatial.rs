use std::collections::HashMap;

use nalgebra::Vector3;

/// Uniform grid over 3-space with cell size equal to the query radius, so a
/// radius query only probes the 27 surrounding cells.
pub struct SpatialHash {
    cell: f32,
    cells: HashMap<[i32; 3], Vec<u32>>,
}

impl SpatialHash {
    pub fn build(points: impl Iterator<Item = (u32, Vector3<f32>)>, cell: f32) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<[i32; 3], Vec<u32>> = HashMap::new();
        for (idx, p) in points {
            cells.entry(key(&p, cell)).or_default().push(idx);
        }
        SpatialHash { cell, cells }
    }

    /// Indices within strict distance `< radius` of `q`, ascending. `radius`
    /// must not exceed the cell size. Candidate enumeration is in fixed cell
    /// order and within-cell insertion order, so results are deterministic.
    pub fn neighbors_into(
        &self,
        q: &Vector3<f32>,
        radius: f32,
        positions: &[Vector3<f32>],
        out: &mut Vec<u32>,
    ) {
        debug_assert!(radius <= self.cell);
        out.clear();
        let k = key(q, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        let d = positions[j as usize] - q;
                        if d.norm_squared() < r2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

fn key(p: &Vector3<f32>, cell: f32) -> [i32; 3] {
    [
        (p.x / cell).floor() as i32,
        (p.y / cell).floor() as i32,
        (p.z / cell).floor() as i32,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_inequality_at_radius() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.08, 0.0, 0.0), // exactly at radius: excluded
            Vector3::new(0.05, 0.0, 0.0),
        ];
        let h = SpatialHash::build(
            pts.iter().enumerate().map(|(i, p)| (i as u32, *p)),
            0.08,
        );
        let mut out = Vec::new();
        h.neighbors_into(&pts[0], 0.08, &pts, &mut out);
        assert_eq!(out, vec![0, 2]); // includes self; callers filter
    }

    #[test]
    fn cross_cell_neighbors_are_found() {
        // Straddle a cell boundary: 0.079 apart but in adjacent cells.
        let pts = vec![Vector3::new(0.079, 0.0, 0.0), Vector3::new(0.081, 0.0, 0.0)];
        let h = SpatialHash::build(
            pts.iter().enumerate().map(|(i, p)| (i as u32, *p)),
            0.08,
        );
        let mut out = Vec::new();
        h.neighbors_into(&pts[0], 0.08, &pts, &mut out);
        assert_eq!(out, vec![0, 1]);
    }

    #[test]
    fn negative_coordinates_hash_correctly() {
        let pts = vec![
            Vector3::new(-0.001, -0.001, -0.001),
            Vector3::new(0.001, 0.001, 0.001),
        ];
        let h = SpatialHash::build(
            pts.iter().enumerate().map(|(i, p)| (i as u32, *p)),
            0.08,
        );
        let mut out = Vec::new();
        h.neighbors_into(&pts[1], 0.08, &pts, &mut out);
        assert_eq!(out, vec![0, 1]);
    }
}
