//! UCB acquisition and the sequential search loop.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gp::{GpFitConfig, GpState};
use super::space::CellSpace;
use crate::cell::CellSpec;
use crate::error::{Error, Result};

/// Scores a candidate cell. Implementations must be deterministic in `seed`
/// for runs to be reproducible.
pub trait Evaluator: Sync {
    fn evaluate(&self, spec: &CellSpec, seed: u64) -> Result<f64>;
}

impl<F> Evaluator for F
where
    F: Fn(&CellSpec, u64) -> Result<f64> + Sync,
{
    fn evaluate(&self, spec: &CellSpec, seed: u64) -> Result<f64> {
        self(spec, seed)
    }
}

/// Exploration coefficient schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UcbPolicy {
    /// `√(2·ln(|pool|·t²·π²/(6δ)))`.
    Schedule { delta: f64 },
    Constant { beta: f64 },
}

impl Default for UcbPolicy {
    fn default() -> Self {
        UcbPolicy::Schedule { delta: 0.1 }
    }
}

impl UcbPolicy {
    pub fn beta(&self, t: usize, pool: usize) -> f64 {
        match *self {
            UcbPolicy::Constant { beta } => beta,
            UcbPolicy::Schedule { delta } => {
                let t = t.max(1) as f64;
                let arg = pool.max(1) as f64 * t * t * std::f64::consts::PI.powi(2) / (6.0 * delta);
                (2.0 * arg.ln()).max(1e-12).sqrt()
            }
        }
    }
}

fn key(enc: &[f64]) -> Vec<u8> {
    enc.iter().map(|&v| (v != 0.0) as u8).collect()
}

/// Random candidates plus single-choice neighbours of `incumbent`, without
/// repeats and without observed cells.
pub fn candidate_pool<R: Rng + ?Sized>(
    space: &CellSpace,
    size: usize,
    incumbent: Option<&CellSpec>,
    observed: &HashSet<Vec<u8>>,
    rng: &mut R,
) -> Result<Vec<(CellSpec, Vec<f64>)>> {
    let mut seen = observed.clone();
    let mut pool = Vec::with_capacity(size + 64);
    let mut push = |s: CellSpec, pool: &mut Vec<(CellSpec, Vec<f64>)>| -> Result<()> {
        let e = space.encode(&s)?;
        if seen.insert(key(&e)) {
            pool.push((s, e));
        }
        Ok(())
    };
    for _ in 0..size {
        push(space.sample(rng), &mut pool)?;
    }
    if let Some(best) = incumbent {
        for s in space.neighbours(best) {
            push(s, &mut pool)?;
        }
    }
    Ok(pool)
}

fn ucb(gp: Option<&GpState>, enc: &[f64], beta: f64) -> f64 {
    match gp {
        Some(gp) => {
            let (m, v) = gp.posterior(enc);
            m + beta * v.sqrt()
        }
        None => 0.0,
    }
}

/// UCB maximizer over `pool`, refined by single-choice hill climbing.
/// The first maximum in pool order wins ties.
pub fn suggest(
    space: &CellSpace,
    gp: Option<&GpState>,
    beta: f64,
    pool: &[(CellSpec, Vec<f64>)],
    observed: &HashSet<Vec<u8>>,
    climb_steps: usize,
) -> Result<CellSpec> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("suggest: candidate pool is empty".into()));
    }
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, (_, e)) in pool.iter().enumerate() {
        let u = ucb(gp, e, beta);
        if u > best_val {
            best = i;
            best_val = u;
        }
    }
    let mut cur = pool[best].0.clone();
    if gp.is_none() {
        return Ok(cur);
    }
    for _ in 0..climb_steps {
        let mut step: Option<(CellSpec, f64)> = None;
        for n in space.neighbours(&cur) {
            let e = space.encode(&n)?;
            if observed.contains(&key(&e)) {
                continue;
            }
            let u = ucb(gp, &e, beta);
            if u > step.as_ref().map_or(best_val, |s| s.1) {
                step = Some((n, u));
            }
        }
        match step {
            Some((n, u)) => {
                cur = n;
                best_val = u;
            }
            None => break,
        }
    }
    Ok(cur)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpbConfig {
    pub budget: usize,
    pub seed: u64,
    /// Evaluations run concurrently per round.
    pub workers: usize,
    pub pool_size: usize,
    /// Random trials before the first GP fit; default `max(5, budget / 10)`.
    pub initial_random: Option<usize>,
    pub policy: UcbPolicy,
    pub gp: GpFitConfig,
    pub climb_steps: usize,
    /// Store measured evaluation times; otherwise they are written as 0.
    pub record_timing: bool,
}

impl Default for GpbConfig {
    fn default() -> Self {
        GpbConfig {
            budget: 50,
            seed: 0,
            workers: 1,
            pool_size: 2048,
            initial_random: None,
            policy: UcbPolicy::default(),
            gp: GpFitConfig::default(),
            climb_steps: 20,
            record_timing: false,
        }
    }
}

impl GpbConfig {
    pub fn initial(&self) -> usize {
        self.initial_random.unwrap_or((self.budget / 10).max(5)).min(self.budget)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// One line of the trial history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub spec: CellSpec,
    pub encoding: Vec<f64>,
    pub score: Option<f64>,
    pub status: TrialStatus,
    pub wallclock_s: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trials ordered by descending score (failed trials last, then by index).
pub fn ranked(trials: &[Trial]) -> Vec<&Trial> {
    let mut v: Vec<&Trial> = trials.iter().collect();
    v.sort_by(|a, b| {
        let sa = a.score.unwrap_or(f64::NEG_INFINITY);
        let sb = b.score.unwrap_or(f64::NEG_INFINITY);
        sb.total_cmp(&sa).then(a.trial.cmp(&b.trial))
    });
    v
}

pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial as u64 + 1)
}

/// Sequential GP-UCB search. With `workers > 1`, each round proposes that
/// many cells at once, treating pending ones as observed at the current
/// mean, and applies their results in proposal order.
pub fn run_gpb(
    space: &CellSpace,
    cfg: &GpbConfig,
    evaluator: &dyn Evaluator,
    on_trial: &mut dyn FnMut(&Trial) -> Result<()>,
) -> Result<Vec<Trial>> {
    space.validate()?;
    if cfg.budget == 0 || cfg.workers == 0 {
        return Err(Error::InvalidArgument("budget and workers must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials: Vec<Trial> = Vec::with_capacity(cfg.budget);
    let mut observed: HashSet<Vec<u8>> = HashSet::new();
    let n_init = cfg.initial();
    while trials.len() < cfg.budget {
        let round = cfg.workers.min(cfg.budget - trials.len());
        let mut pending: Vec<(CellSpec, Vec<f64>)> = Vec::with_capacity(round);
        for r in 0..round {
            let index = trials.len() + r;
            let ok: Vec<&Trial> = trials.iter().filter(|t| t.status == TrialStatus::Ok).collect();
            let spec = if index < n_init || ok.is_empty() {
                let pool = candidate_pool(space, 64, None, &observed, &mut rng)?;
                suggest(space, None, 0.0, &pool, &observed, 0)?
            } else {
                let mut x: Vec<Vec<f64>> = ok.iter().map(|t| t.encoding.clone()).collect();
                let mut y: Vec<f64> = ok.iter().map(|t| t.score.expect("ok trial has a score")).collect();
                let lie = y.iter().sum::<f64>() / y.len() as f64;
                for (_, e) in &pending {
                    x.push(e.clone());
                    y.push(lie);
                }
                let gp = GpState::fit(x, y, &cfg.gp, &mut rng)?;
                let incumbent = ranked(&trials)[0].spec.clone();
                let pool = candidate_pool(space, cfg.pool_size, Some(&incumbent), &observed, &mut rng)?;
                let beta = cfg.policy.beta(ok.len() + pending.len(), pool.len());
                suggest(space, Some(&gp), beta, &pool, &observed, cfg.climb_steps)?
            };
            let e = space.encode(&spec)?;
            observed.insert(key(&e));
            pending.push((spec, e));
        }
        let base = trials.len();
        let results: Vec<(Result<f64>, f64)> = if pending.len() == 1 {
            vec![timed(evaluator, &pending[0].0, trial_seed(cfg.seed, base))]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = pending
                    .iter()
                    .enumerate()
                    .map(|(r, (spec, _))| s.spawn(move || timed(evaluator, spec, trial_seed(cfg.seed, base + r))))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("evaluator thread panicked")).collect()
            })
        };
        for (r, ((spec, encoding), (res, secs))) in pending.into_iter().zip(results).enumerate() {
            let (score, status, error) = match res {
                Ok(v) if v.is_finite() => (Some(v), TrialStatus::Ok, None),
                Ok(v) => (None, TrialStatus::Failed, Some(format!("non-finite score {v}"))),
                Err(e) => (None, TrialStatus::Failed, Some(e.to_string())),
            };
            let t = Trial {
                trial: base + r,
                spec,
                encoding,
                score,
                status,
                wallclock_s: if cfg.record_timing { secs } else { 0.0 },
                seed: trial_seed(cfg.seed, base + r),
                error,
            };
            on_trial(&t)?;
            trials.push(t);
        }
    }
    Ok(trials)
}

fn timed(evaluator: &dyn Evaluator, spec: &CellSpec, seed: u64) -> (Result<f64>, f64) {
    let t0 = Instant::now();
    let r = evaluator.evaluate(spec, seed);
    (r, t0.elapsed().as_secs_f64())
}

pub fn write_trial(w: &mut impl Write, t: &Trial) -> Result<()> {
    serde_json::to_writer(&mut *w, t)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn save_trials(trials: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trials {
        write_trial(&mut f, t)?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
