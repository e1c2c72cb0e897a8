use nalgebra::Vector3;

/// Partition points into `k` clusters: farthest-point seeding from the
/// centroid-nearest point, then Lloyd iterations to a fixed point (at most
/// 50). Entirely distance-based with index-order tie breaks, so the result
/// is deterministic and equivariant under isometries of the input.
pub fn cluster(points: &[Vector3<f32>], k: usize) -> Vec<u32> {
    assert!(k >= 1 && k <= points.len(), "k={k} for {} points", points.len());
    let n = points.len();

    let centroid: Vector3<f32> = points.iter().sum::<Vector3<f32>>() / n as f32;
    let first = argmin_by(n, |i| (points[i] - centroid).norm_squared());

    // Farthest-point seeds: maximize distance to the nearest chosen seed.
    let mut seeds = vec![first];
    let mut nearest = vec![f32::INFINITY; n];
    for i in 0..n {
        nearest[i] = (points[i] - points[first]).norm_squared();
    }
    while seeds.len() < k {
        let next = argmin_by(n, |i| -nearest[i]);
        seeds.push(next);
        for i in 0..n {
            let d = (points[i] - points[next]).norm_squared();
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    let mut centers: Vec<Vector3<f32>> = seeds.iter().map(|&s| points[s]).collect();

    let mut assign = vec![0u32; n];
    for _ in 0..50 {
        let mut changed = false;
        for i in 0..n {
            let c = argmin_by(centers.len(), |j| (points[i] - centers[j]).norm_squared()) as u32;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        // Recompute centers; an emptied cluster steals the point farthest
        // from its current center so coverage is preserved.
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums[assign[i] as usize] += points[i];
            counts[assign[i] as usize] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Steal the point farthest from its own center, never
                // draining a singleton cluster.
                let mut steal = None;
                let mut best = -1.0f32;
                for i in 0..n {
                    if counts[assign[i] as usize] <= 1 {
                        continue;
                    }
                    let d = (points[i] - centers[assign[i] as usize]).norm_squared();
                    if d > best {
                        best = d;
                        steal = Some(i);
                    }
                }
                let steal = steal.expect("k <= n guarantees a donor cluster");
                counts[assign[steal] as usize] -= 1;
                counts[j] = 1;
                assign[steal] = j as u32;
                centers[j] = points[steal];
                changed = true;
            } else {
                centers[j] = sums[j] / counts[j] as f32;
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// First index attaining the minimum (ties resolve to the lowest index).
fn argmin_by(n: usize, f: impl Fn(usize) -> f32) -> usize {
    let mut best = 0;
    let mut best_v = f(0);
    for i in 1..n {
        let v = f(i);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
