//! Empirical check that sparse, light purified states always have
//! intersecting oracle supports.

use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::GroupSpec;
use crate::circuit::{random_circuit, Circuit, CircuitFamily};
use crate::error::{Error, Result};
use crate::oracle::OracleSpec;
use crate::qstate::{QuantumState, RegisterLayout, StateDump};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodStateReport {
    pub sparsity: usize,
    pub max_weight: f64,
    pub d: usize,
    pub delta: f64,
    pub good: bool,
}

/// Fourier sparsity at most `d` and every cell weight at most `delta`.
pub fn goodstate_report(s: &QuantumState, delta: f64, d: usize) -> Result<GoodStateReport> {
    let sparsity = s.fourier_support_size();
    let max_weight = s.weights()?.into_iter().fold(0.0, f64::max);
    let good = sparsity <= d && max_weight <= delta + 1e-12;
    Ok(GoodStateReport { sparsity, max_weight, d, delta, good })
}

pub fn is_goodstate(s: &QuantumState, delta: f64, d: usize) -> Result<bool> {
    Ok(goodstate_report(s, delta, d)?.good)
}

fn same_oracle(a: &QuantumState, b: &QuantumState) -> Result<()> {
    if a.oracle_spec()? != b.oracle_spec()? {
        return Err(Error::Mismatch("states use different oracle spaces".into()));
    }
    Ok(())
}

/// Some oracle table has non-zero probability under both states.
pub fn compatible(a: &QuantumState, b: &QuantumState) -> Result<bool> {
    same_oracle(a, b)?;
    let sa = a.computational_support()?;
    let sb = b.computational_support()?;
    Ok(sa.intersection(&sb).next().is_some())
}

/// `min(P_a[supp b], P_b[supp a])`: how much of either state's oracle mass
/// lies on tables the other allows. Zero exactly when incompatible.
pub fn overlap_margin(a: &QuantumState, b: &QuantumState) -> Result<f64> {
    same_oracle(a, b)?;
    let ma = a.computational_marginal()?;
    let mb = b.computational_marginal()?;
    let pa: f64 = ma.iter().filter(|(h, _)| mb.contains_key(*h)).map(|(_, p)| p).sum();
    let pb: f64 = mb.iter().filter(|(h, _)| ma.contains_key(*h)).map(|(_, p)| p).sum();
    Ok(pa.min(pb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub oracle: OracleSpec,
    pub delta: f64,
    pub d: usize,
    pub trials: usize,
    pub seed: u64,
    /// Largest rotation angle of `y` away from `|0̂⟩` per layer.
    #[serde(default = "default_angle")]
    pub max_angle: f64,
    #[serde(default = "default_postselect")]
    pub postselect: bool,
}

fn default_angle() -> f64 {
    0.35
}

fn default_postselect() -> bool {
    true
}

impl SearchConfig {
    pub fn new(oracle: OracleSpec, delta: f64, d: usize, trials: usize, seed: u64) -> Self {
        Self { oracle, delta, d, trials, seed, max_angle: default_angle(), postselect: default_postselect() }
    }
}

/// Pair of good, incompatible states with the circuits that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitDump {
    pub seed: u64,
    pub trial: usize,
    pub circuits: [Circuit; 2],
    pub state_dumps: [StateDump; 2],
    pub delta: f64,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub group: GroupSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub trials: usize,
    pub good_pairs: usize,
    pub counterexamples_found: usize,
    /// Smallest overlap margin over good pairs.
    pub min_margin: Option<f64>,
    pub first_hit: Option<HitDump>,
}

/// Outcome of one search trial. `compatible` and `margin` are set only for
/// good pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PccTrial {
    pub trial: usize,
    pub good: bool,
    pub compatible: Option<bool>,
    pub margin: Option<f64>,
    pub hit: Option<Box<HitDump>>,
}

fn search_trial(cfg: &SearchConfig, family: &CircuitFamily, trial: usize) -> Result<PccTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    let (ca, sa) = random_circuit(&cfg.oracle, family, &mut rng)?;
    let (cb, sb) = random_circuit(&cfg.oracle, family, &mut rng)?;
    let mut out = PccTrial { trial, good: false, compatible: None, margin: None, hit: None };
    if !is_goodstate(&sa, cfg.delta, cfg.d)? || !is_goodstate(&sb, cfg.delta, cfg.d)? {
        return Ok(out);
    }
    out.good = true;
    let ok = compatible(&sa, &sb)?;
    out.compatible = Some(ok);
    out.margin = Some(overlap_margin(&sa, &sb)?);
    if !ok {
        out.hit = Some(Box::new(HitDump {
            seed: cfg.seed,
            trial,
            circuits: [ca, cb],
            state_dumps: [sa.dump(), sb.dump()],
            delta: cfg.delta,
            d: cfg.d,
            n: cfg.oracle.domain_size,
            group: cfg.oracle.range.clone(),
        }));
    }
    Ok(out)
}

/// Draws `trials` pairs of circuits with at most `d` queries each and checks
/// each pair whose outputs are both good states for compatibility. Trial `i`
/// uses stream `i` of the seeded generator, so results do not depend on
/// scheduling.
pub fn search_trials(cfg: &SearchConfig) -> Result<Vec<PccTrial>> {
    if !(cfg.delta > 0.0 && cfg.delta <= 1.0) {
        return Err(Error::Domain(format!("delta = {} must lie in (0, 1]", cfg.delta)));
    }
    let family = CircuitFamily { max_queries: cfg.d, postselect: cfg.postselect, light_angle: Some(cfg.max_angle) };
    (0..cfg.trials).into_par_iter().map(|t| search_trial(cfg, &family, t)).collect()
}

pub fn summarize_search(trials: &[PccTrial]) -> SearchReport {
    let mut report = SearchReport {
        trials: trials.len(),
        good_pairs: 0,
        counterexamples_found: 0,
        min_margin: None,
        first_hit: None,
    };
    for t in trials.iter().filter(|t| t.good) {
        report.good_pairs += 1;
        if let Some(m) = t.margin {
            report.min_margin = Some(report.min_margin.map_or(m, |x: f64| x.min(m)));
        }
        if let Some(hit) = &t.hit {
            report.counterexamples_found += 1;
            report.first_hit.get_or_insert_with(|| (**hit).clone());
        }
    }
    report
}

pub fn search_counterexample(cfg: &SearchConfig) -> Result<SearchReport> {
    Ok(summarize_search(&search_trials(cfg)?))
}

/// Re-evaluates a stored hit from its state dumps and from replaying its
/// circuits; both must agree that the pair is good and incompatible.
pub fn recheck_hit(hit: &HitDump) -> Result<bool> {
    let from_dumps = [QuantumState::from_dump(&hit.state_dumps[0])?, QuantumState::from_dump(&hit.state_dumps[1])?];
    let replayed = [hit.circuits[0].run(None)?, hit.circuits[1].run(None)?];
    let mut verdicts = Vec::new();
    for [a, b] in [&from_dumps, &replayed] {
        let good = is_goodstate(a, hit.delta, hit.d)? && is_goodstate(b, hit.delta, hit.d)?;
        verdicts.push(good && !compatible(a, b)?);
    }
    if verdicts[0] != verdicts[1] {
        return Err(Error::Mismatch("stored states disagree with replayed circuits".into()));
    }
    Ok(verdicts[0])
}

/// Two one-sparse states with cell weight 1/2: one with `H_0 = 0` and the
/// other with `H_0 = 1`, every other cell uniform. They are good for `δ = 1`
/// and incompatible. Needs a group of order 2.
pub fn delta_one_fixture(spec: &OracleSpec) -> Result<(QuantumState, QuantumState)> {
    if spec.range.order() != 2 {
        return Err(Error::Domain("the fixture needs a range of order 2".into()));
    }
    let layout = Arc::new(RegisterLayout::new(Vec::new(), Some(spec.clone()))?);
    let total = spec.num_functions().ok_or_else(|| Error::Unsupported("domain too large".into()))?;
    let half = total / 2;
    let amp = Complex64::new(1.0 / (half as f64).sqrt(), 0.0);
    let state = |first: usize| {
        // H_0 is the most significant digit.
        let amps = (0..total).map(|i| if i / half == first { amp } else { Complex64::new(0.0, 0.0) }).collect();
        QuantumState::from_dense_computational(layout.clone(), amps)
    };
    Ok((state(0)?, state(1)?))
}
