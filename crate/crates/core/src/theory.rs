//! Closed-form interference model, Monte-Carlo stale-entry survival and
//! the steady-state cache-size bound.

use std::fmt::Write as _;

use rand::{Rng as _, SeedableRng};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryConfig {
    /// Probability that a cycle evicts a given stale entry.
    pub p_correct: f64,
    pub interval: usize,
    pub updates: usize,
    pub trials: usize,
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_correct) {
            return Err(Error::Input(format!("p_c {} outside [0, 1]", self.p_correct)));
        }
        if self.interval == 0 || self.updates == 0 || self.trials == 0 {
            return Err(Error::Input("interval, updates and trials must be positive".into()));
        }
        Ok(())
    }
}

/// Probability of retrieving the right entry when attention is spread
/// evenly over `n` competing entries.
pub fn uniform_retrieval(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("n must be at least 1".into()));
    }
    Ok(1.0 / n as f64)
}

/// `min(N, ε n / (1 − (1 − p)^{n/N}))` with `ε = 1 − p`.
pub fn stale_bound(p: f64, interval: usize, updates: usize) -> f64 {
    let (nn, n) = (interval as f64, updates as f64);
    let eps = 1.0 - p;
    let denom = 1.0 - eps.powf(n / nn);
    if denom <= 0.0 {
        return nn;
    }
    nn.min(eps * n / denom)
}

/// Stale entries left after `n` updates in one trial. A cycle runs after
/// every `interval`-th update and once more at query time; each cycle evicts
/// every stale entry independently with probability `p`.
pub fn survivors_once(p: f64, interval: usize, updates: usize, rng: &mut Rng) -> usize {
    let mut stale = 0usize;
    let cycle = |stale: &mut usize, rng: &mut Rng| {
        *stale = (0..*stale).filter(|_| rng.random::<f64>() >= p).count();
    };
    for u in 1..=updates {
        if u > 1 {
            // The previous current value becomes stale.
            stale += 1;
        }
        if u % interval == 0 {
            cycle(&mut stale, rng);
        }
    }
    // Query-time cycle, unless the last periodic one already ran there.
    if !updates.is_multiple_of(interval) {
        cycle(&mut stale, rng);
    }
    stale
}

#[derive(Clone, Debug, PartialEq)]
pub struct Survival {
    pub config: TheoryConfig,
    pub samples: Vec<usize>,
    pub mean: f64,
    pub bound: f64,
}

/// Monte-Carlo survivors over `trials` independent trials. Each trial has
/// its own stream, so results do not depend on the worker count.
pub fn simulate_stale_survival(config: &TheoryConfig, seed: u64, jobs: usize) -> Result<Survival> {
    config.validate()?;
    let name = format!("theory-{}-{}-{}", config.p_correct, config.interval, config.updates);
    let run = |range: std::ops::Range<usize>| -> Vec<usize> {
        range
            .map(|t| {
                let mut rng = stream(seed, &name, t as u64);
                survivors_once(config.p_correct, config.interval, config.updates, &mut rng)
            })
            .collect()
    };
    let samples = if jobs <= 1 {
        run(0..config.trials)
    } else {
        let chunk = config.trials.div_ceil(jobs);
        std::thread::scope(|s| {
            let hs: Vec<_> = (0..config.trials)
                .step_by(chunk)
                .map(|lo| {
                    let hi = (lo + chunk).min(config.trials);
                    s.spawn(move || run(lo..hi))
                })
                .collect();
            hs.into_iter().flat_map(|h| h.join().expect("theory worker panicked")).collect()
        })
    };
    let mean = samples.iter().sum::<usize>() as f64 / samples.len() as f64;
    let bound = stale_bound(config.p_correct, config.interval, config.updates);
    Ok(Survival { config: config.clone(), samples, mean, bound })
}

/// Fraction of bootstrap resample means that do not exceed `bound`.
pub fn bootstrap_fraction(samples: &[usize], bound: f64, resamples: usize, seed: u64) -> f64 {
    if samples.is_empty() || resamples == 0 {
        return 0.0;
    }
    let mut rng = Rng::seed_from_u64(derive_seed(seed, "bootstrap", samples.len() as u64));
    let n = samples.len();
    let mut ok = 0;
    for _ in 0..resamples {
        let sum: usize = (0..n).map(|_| samples[rng.random_range(0..n)]).sum();
        if sum as f64 / n as f64 <= bound {
            ok += 1;
        }
    }
    ok as f64 / resamples as f64
}

/// `N / (f_e + (1 − f_e)(1 − 1/c))`, or `+∞` when nothing ever shrinks.
pub fn cache_bound(interval: usize, evict_fraction: f64, ratio: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&evict_fraction) || ratio < 1.0 {
        return Err(Error::Input(format!("need f_e in [0, 1] and c >= 1, got {evict_fraction} and {ratio}")));
    }
    let denom = evict_fraction + (1.0 - evict_fraction) * (1.0 - 1.0 / ratio);
    if denom <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(interval as f64 / denom)
}

pub const GRID_P: [f64; 4] = [0.5, 0.7, 0.9, 0.99];
pub const GRID_N: [usize; 3] = [8, 32, 128];
pub const GRID_UPDATES: [usize; 3] = [64, 256, 1024];

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub p_correct: f64,
    pub interval: usize,
    pub updates: usize,
    pub trials: usize,
    pub mc_mean: f64,
    pub bound: f64,
    /// Bootstrap fraction of resample means at or under the bound.
    pub support: f64,
}

impl GridRow {
    pub fn holds(&self, level: f64) -> bool {
        self.support >= level
    }
}

pub fn run_grid(trials: usize, resamples: usize, seed: u64, jobs: usize) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &p in &GRID_P {
        for &nn in &GRID_N {
            for &n in &GRID_UPDATES {
                let cfg = TheoryConfig { p_correct: p, interval: nn, updates: n, trials };
                let s = simulate_stale_survival(&cfg, seed, jobs)?;
                let support = bootstrap_fraction(&s.samples, s.bound, resamples, seed);
                rows.push(GridRow {
                    p_correct: p,
                    interval: nn,
                    updates: n,
                    trials,
                    mc_mean: s.mean,
                    bound: s.bound,
                    support,
                });
            }
        }
    }
    Ok(rows)
}

/// Least-squares slope of survivors against `n` for each `N` at one `p`.
pub fn flatness(rows: &[GridRow], p: f64) -> Vec<(usize, f64)> {
    GRID_N
        .iter()
        .map(|&nn| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.p_correct == p && r.interval == nn)
                .map(|r| (r.updates as f64, r.mc_mean))
                .collect();
            let k = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            (nn, if sxx > 0.0 { sxy / sxx } else { 0.0 })
        })
        .collect()
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("p_c,N,n,trials,mc_mean,bound,bootstrap_support\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.4}",
            r.p_correct, r.interval, r.updates, r.trials, r.mc_mean, r.bound, r.support
        )
        .unwrap();
    }
    out
}
