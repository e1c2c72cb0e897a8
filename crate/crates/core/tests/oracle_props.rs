//! Whole-rollout invariants of the built-in simulator, checked on
//! default-sized scenes.

use dpi_core::oracle::{simulate_rollout, EnvSpec, OracleConfig};
use dpi_core::scene::{planes, EnvId, Material};

#[test]
fn rigid_body_stays_isometric_across_a_bath_rollout() {
    let cfg = OracleConfig::default();
    let mut spec = EnvSpec::defaults(EnvId::BoxBath);
    spec.rollout_len = 60;
    for index in 0..3 {
        let r = simulate_rollout(&spec, &cfg, 21, index).unwrap();
        let cube = r.frames[0].object_range(1);
        let rest: Vec<_> = r.frames[0].particles[cube.clone()]
            .iter()
            .map(|p| p.position)
            .collect();
        for (t, frame) in r.frames.iter().enumerate() {
            let cur: Vec<_> = frame.particles[cube.clone()]
                .iter()
                .map(|p| p.position)
                .collect();
            for i in 0..rest.len() {
                for j in (i + 1)..rest.len() {
                    let want = (rest[i] - rest[j]).norm();
                    let got = (cur[i] - cur[j]).norm();
                    assert!(
                        (want - got).abs() < 1e-4,
                        "rollout {index} frame {t} pair {i},{j}: {want} vs {got}"
                    );
                }
            }
        }
    }
}

#[test]
fn no_particle_ends_a_frame_inside_a_wall() {
    let cfg = OracleConfig::default();
    for env in EnvId::ALL {
        let mut spec = EnvSpec::defaults(env);
        spec.rollout_len = spec.rollout_len.min(80);
        let r = simulate_rollout(&spec, &cfg, 22, 0).unwrap();
        assert!(r.frames.iter().all(|f| f.len() == r.frames[0].len()));
        for (t, frame) in r.frames.iter().enumerate().skip(1) {
            let walls = planes(env, &r.controls[t]).unwrap();
            for (i, p) in frame.iter().enumerate() {
                if p.material == Material::Boundary {
                    continue;
                }
                for w in &walls {
                    let s = w.signed_distance(&p.position) - cfg.particle_radius;
                    assert!(
                        s > -1e-4,
                        "{} frame {t} particle {i} penetrates by {}",
                        env.as_str(),
                        -s
                    );
                }
            }
        }
    }
}

#[test]
fn fall_drops_land_and_spread_on_the_ground() {
    let cfg = OracleConfig::default();
    let spec = EnvSpec::defaults(EnvId::FluidFall);
    let r = simulate_rollout(&spec, &cfg, 23, 1).unwrap();
    let last = r.frames.last().unwrap();
    // After two seconds everything has landed into a puddle: low mean
    // height, wider footprint than the initial drops.
    let mean_y: f32 = last.iter().map(|p| p.position.y).sum::<f32>() / last.len() as f32;
    assert!(mean_y < 0.15, "mean height {mean_y}");
    let spread = |f: &dpi_core::scene::ParticleSet| {
        let xs: Vec<f32> = f.iter().map(|p| p.position.x).collect();
        xs.iter().cloned().fold(f32::MIN, f32::max) - xs.iter().cloned().fold(f32::MAX, f32::min)
    };
    assert!(spread(last) > spread(&r.frames[0]) * 1.5);
    // And momentum arrived through the fall: some frame saw fast motion.
    let peak = r
        .frames
        .iter()
        .flat_map(|f| f.iter().map(|p| p.velocity.norm()))
        .fold(0.0f32, f32::max);
    assert!(peak > 1.0, "peak speed {peak}");
}

#[test]
fn shake_velocity_increments_match_the_scripted_process() {
    // The box velocity follows v' = v + u - 0.1 x with u uniform on
    // [-0.15, 0.15]. Recover u across many rollouts and check range, mean,
    // variance, and coarse histogram uniformity.
    let cfg = OracleConfig::default();
    let mut spec = EnvSpec::defaults(EnvId::FluidShake);
    spec.rollout_len = 120;
    let mut us = Vec::new();
    for index in 0..6 {
        let r = simulate_rollout(&spec, &cfg, 24, index).unwrap();
        for t in 1..r.controls.len() {
            let (prev, cur) = (&r.controls[t - 1], &r.controls[t]);
            us.push(cur[1] - prev[1] + 0.1 * prev[0]);
        }
    }
    let n = us.len() as f32;
    assert!(us.iter().all(|u| (-0.15..=0.15).contains(u)));
    let mean = us.iter().sum::<f32>() / n;
    assert!(mean.abs() < 0.01, "mean {mean}");
    let var = us.iter().map(|u| (u - mean) * (u - mean)).sum::<f32>() / n;
    let expect = 0.3f32 * 0.3 / 12.0;
    assert!((var - expect).abs() < expect * 0.25, "var {var} vs {expect}");
    let mut bins = [0usize; 6];
    for u in &us {
        let b = (((u + 0.15) / 0.3 * 6.0) as usize).min(5);
        bins[b] += 1;
    }
    for (b, &count) in bins.iter().enumerate() {
        let frac = count as f32 / n;
        assert!(
            (frac - 1.0 / 6.0).abs() < 0.05,
            "bin {b} holds {frac} of increments"
        );
    }
}

#[test]
fn grip_squeeze_deforms_rice_and_reopening_recovers_elastic_part() {
    let cfg = OracleConfig::default();
    let spec = EnvSpec::defaults(EnvId::RiceGrip);
    let r = simulate_rollout(&spec, &cfg, 25, 2).unwrap();
    let rice = r.frames[0].object_range(0);
    let width_along = |f: &dpi_core::scene::ParticleSet, theta: f32| {
        let w = nalgebra::Vector3::new(theta.cos(), 0.0, theta.sin());
        let d: Vec<f32> = f.particles[rice.clone()]
            .iter()
            .map(|p| p.position.dot(&w))
            .collect();
        d.iter().cloned().fold(f32::MIN, f32::max) - d.iter().cloned().fold(f32::MAX, f32::min)
    };
    let theta = r.controls[0][2];
    let w0 = width_along(&r.frames[0], theta);
    let wmid = width_along(&r.frames[15], theta);
    let wend = width_along(r.frames.last().unwrap(), theta);
    assert!(wmid < w0 * 0.85, "squeeze {w0} -> {wmid}");
    assert!(wend > wmid, "reopening should relax the squeeze");
    // Plastic deformation persisted in the rest shape.
    let rest_w = |f: &dpi_core::scene::ParticleSet| {
        let d: Vec<f32> = f.particles[rice.clone()]
            .iter()
            .map(|p| {
                p.resting_position
                    .dot(&nalgebra::Vector3::new(theta.cos(), 0.0, theta.sin()))
            })
            .collect();
        d.iter().cloned().fold(f32::MIN, f32::max) - d.iter().cloned().fold(f32::MAX, f32::min)
    };
    assert!(rest_w(r.frames.last().unwrap()) < rest_w(&r.frames[0]) - 1e-3);
}
