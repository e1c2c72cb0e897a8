//! Rollout simulation and on-disk dataset generation.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::io::save_rollout;
use crate::scene::Rollout;
use crate::stream_rng;
use crate::{Error, Result};

use super::{envs, oracle_step, EnvSpec, OracleConfig};

/// Simulate one full episode. `index` selects the rollout within a dataset
/// and doubles as its recorded seed; the content is a pure function of
/// (spec, cfg, base_seed, index).
pub fn simulate_rollout(
    spec: &EnvSpec,
    cfg: &OracleConfig,
    base_seed: u64,
    index: u64,
) -> Result<Rollout> {
    spec.check()?;
    cfg.check()?;
    let mut rng = stream_rng(base_seed, index);
    let setup = envs::sample_setup(spec, &mut rng, cfg.dt)?;
    let mut frames = vec![setup.particles];
    for t in 1..spec.rollout_len {
        let next = oracle_step(
            frames.last().expect("frames start non-empty"),
            &setup.attrs,
            &setup.controls[t],
            spec.env,
            cfg,
        )
        .map_err(|e| {
            Error::Runtime(format!(
                "{} rollout {index} aborted at frame {t}: {e}",
                spec.env.as_str()
            ))
        })?;
        frames.push(next);
    }
    let rollout = Rollout {
        env: spec.env,
        dt: cfg.dt,
        seed: index,
        objects: setup.attrs,
        frames,
        controls: setup.controls,
    };
    rollout.validate()?;
    Ok(rollout)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSummary {
    pub train: usize,
    pub valid: usize,
    pub dir: PathBuf,
}

/// Number of held-out rollouts for a dataset of n: at least one, one tenth
/// when larger.
pub fn valid_count(n: usize) -> usize {
    (n / 10).max(1)
}

/// Path of rollout `index` within a generated dataset rooted at `out_dir`.
pub fn rollout_path(out_dir: &Path, spec: &EnvSpec, n: usize, index: u64) -> PathBuf {
    let split = if (index as usize) >= n - valid_count(n).min(n) {
        "valid"
    } else {
        "train"
    };
    out_dir
        .join(spec.env.as_str())
        .join(split)
        .join(format!("{index:05}.rollout"))
}

/// Generate `n` rollouts under `out_dir/<env>/{train,valid}/`, the last
/// tenth (at least one) held out. Every file's bytes depend only on
/// (spec, cfg, base_seed, index), so regeneration is byte-identical no
/// matter how many workers run.
pub fn generate_dataset(
    spec: &EnvSpec,
    cfg: &OracleConfig,
    n: usize,
    base_seed: u64,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetSummary> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one rollout".into()));
    }
    spec.check()?;
    cfg.check()?;
    let env_dir = out_dir.join(spec.env.as_str());
    std::fs::create_dir_all(env_dir.join("train"))?;
    std::fs::create_dir_all(env_dir.join("valid"))?;

    let next = AtomicU64::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let run = |_worker: usize| loop {
        let index = next.fetch_add(1, Ordering::Relaxed);
        if index >= n as u64 || failure.lock().expect("failure lock").is_some() {
            return;
        }
        let outcome = simulate_rollout(spec, cfg, base_seed, index)
            .and_then(|r| save_rollout(&rollout_path(out_dir, spec, n, index), &r));
        if let Err(e) = outcome {
            let mut slot = failure.lock().expect("failure lock");
            if slot.is_none() {
                *slot = Some(e);
            }
            return;
        }
    };

    let workers = workers.clamp(1, n);
    if workers == 1 {
        run(0);
    } else {
        std::thread::scope(|scope| {
            for w in 0..workers {
                scope.spawn(move || run(w));
            }
        });
    }
    if let Some(e) = failure.into_inner().expect("failure lock").take() {
        return Err(e);
    }
    Ok(DatasetSummary {
        train: n - valid_count(n).min(n),
        valid: valid_count(n).min(n),
        dir: env_dir,
    })
}
