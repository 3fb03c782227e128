//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its pass/fail line; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use qromlab::algebra::GroupSpec;
use qromlab::attack::{full_attack, AttackOptions, AttackOutcome};
use qromlab::circuit::{equivalence_gap, random_circuit, CircuitFamily};
use qromlab::learner::{default_cap, learn};
use qromlab::oracle::{OracleSpec, PartialOracle};
use qromlab::pcc::{compatible, delta_one_fixture, is_goodstate, search_counterexample, SearchConfig};
use qromlab::protocol::{enumerate_branches, run_concrete, Key, Protocol};
use qromlab::zoo;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SEED: u64 = 0x5eed_2026;
const LAMBDA: f64 = 0.05;
const EPS: f64 = 0.05;

fn z(q: usize) -> GroupSpec {
    GroupSpec::cyclic(q).unwrap()
}

fn rng_for(tag: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ tag);
    rng.set_stream(trial as u64);
    rng
}

fn random_table(spec: &OracleSpec, rng: &mut impl Rng) -> Vec<usize> {
    (0..spec.domain_size).map(|_| rng.random_range(0..spec.range.order())).collect()
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn oracle_fidelity() -> Verdict {
    let gaps: Vec<f64> = (0..100)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(1, t);
            let n = rng.random_range(2..=4);
            let spec = OracleSpec::new(n, z(2)).unwrap();
            let (c, _) = random_circuit(&spec, &CircuitFamily::general(3), &mut rng).unwrap();
            equivalence_gap(&c).unwrap()
        })
        .collect();
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    Verdict { pass: worst <= 1e-9, detail: format!("max TV {worst:.3e} over 100 circuits (bound 1e-9)") }
}

fn sparsity() -> Verdict {
    let bad: Vec<String> = (0..500)
        .into_par_iter()
        .filter_map(|t| {
            let mut rng = rng_for(2, t);
            let n = rng.random_range(2..=4);
            let q = rng.random_range(2..=3);
            let spec = OracleSpec::new(n, z(q)).unwrap();
            let family = CircuitFamily { max_queries: 4, postselect: t % 2 == 0, light_angle: None };
            let (c, mut s) = random_circuit(&spec, &family, &mut rng).unwrap();
            let k = c.query_count();
            if s.fourier_support_size() > k {
                return Some(format!("circuit {t}: {} > {k}", s.fourier_support_size()));
            }
            // Project onto a consistent partial oracle drawn from the state's own support.
            let tables: Vec<Vec<usize>> = s.computational_support().unwrap().into_iter().collect();
            let h = &tables[rng.random_range(0..tables.len())];
            let pairs: Vec<(usize, usize)> = (0..n).filter(|_| rng.random_bool(0.5)).map(|x| (x, h[x])).collect();
            s.project_partial(&PartialOracle::new(pairs).unwrap()).unwrap();
            (s.fourier_support_size() > k).then(|| format!("circuit {t} after projection: {} > {k}", s.fourier_support_size()))
        })
        .collect();
    Verdict {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            "support ≤ query count on 500 circuits, before and after partial projection".into()
        } else {
            format!("{} violations, first: {}", bad.len(), bad[0])
        },
    }
}

fn independence() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut branches = 0;
    for name in zoo::BUILTINS {
        let p = zoo::builtin(name, 4, &z(2)).unwrap();
        let alice = p.alice_registers();
        for hi in 0..p.oracle.num_functions().unwrap() {
            let h = p.oracle.function(hi);
            for b in enumerate_branches(&p, Some(&h), true).unwrap() {
                branches += 1;
                for s in b.round_states.iter().chain(b.final_state.as_ref()) {
                    let sv = s.schmidt_coefficients(&alice).unwrap();
                    worst = worst.max(sv.get(1).copied().unwrap_or(0.0));
                }
            }
        }
    }
    Verdict {
        pass: worst <= 1e-9,
        detail: format!("largest second Schmidt coefficient {worst:.3e} over {branches} branches of {} protocols", zoo::BUILTINS.len()),
    }
}

fn learner_bounds() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for p in [zoo::announced_query_protocol(8, &z(2)).unwrap(), zoo::merkle_ka_protocol(8, &z(2), 2).unwrap()] {
        let cap = default_cap(p.d, LAMBDA, EPS);
        let runs: Vec<(usize, bool, f64)> = (0..200)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng_for(4, t);
                let h = random_table(&p.oracle, &mut rng);
                let real = run_concrete(&p, &h, &mut rng).unwrap();
                let out = learn(&p, &real.transcript, EPS, &h, cap).unwrap();
                (out.queries_made, out.aborted, out.max_residual_weight().unwrap())
            })
            .collect();
        let mean_l = runs.iter().map(|r| r.0 as f64).sum::<f64>() / runs.len() as f64;
        let residual = runs.iter().filter(|r| !r.1).map(|r| r.2).fold(0.0, f64::max);
        let abort = runs.iter().filter(|r| r.1).count() as f64 / runs.len() as f64;
        let sigma = (LAMBDA * (1.0 - LAMBDA) / runs.len() as f64).sqrt();
        let bound_l = p.d as f64 / EPS;
        pass &= mean_l <= bound_l && residual < EPS && abort <= LAMBDA + 3.0 * sigma;
        parts.push(format!(
            "{}: mean|L| {mean_l:.2} (≤ {bound_l}), residual {residual:.3e} (< {EPS}), abort {abort:.3} (≤ {:.3})",
            p.name,
            LAMBDA + 3.0 * sigma
        ));
    }
    Verdict { pass, detail: parts.join("; ") }
}

fn attack_trials(p: &Protocol, tag: u64, trials: usize, opts: &AttackOptions) -> Vec<AttackOutcome> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(tag, t);
            let h = random_table(&p.oracle, &mut rng);
            full_attack(p, EPS, LAMBDA, &h, opts, &mut rng).unwrap().outcome
        })
        .collect()
}

fn attack_success() -> Verdict {
    let trials = 1000;
    let sigma = (LAMBDA * (1.0 - LAMBDA) / trials as f64).sqrt();
    let floor = 1.0 - LAMBDA - 3.0 * sigma;
    let mut pass = true;
    let mut parts = Vec::new();
    let protocols = [
        zoo::announced_query_protocol(8, &z(2)).unwrap(),
        zoo::merkle_ka_protocol(8, &z(2), 2).unwrap(),
        zoo::ka_from_qpke(&zoo::toy_qpke(8, &z(2)).unwrap()).unwrap(),
    ];
    for (i, p) in protocols.iter().enumerate() {
        let runs = attack_trials(p, 50 + i as u64, trials, &AttackOptions::default());
        let rate = runs.iter().filter(|o| o.success()).count() as f64 / trials as f64;
        let min_eq = runs
            .iter()
            .flat_map(|o| [o.eq_find, o.eq_simulatedm, o.eq_agrees])
            .flatten()
            .fold(1.0, f64::min);
        let max_l = runs.iter().map(|o| o.l_size).max().unwrap_or(0);
        let cap = default_cap(p.d, LAMBDA, EPS);
        pass &= rate >= floor && min_eq >= 1.0 - LAMBDA && max_l <= cap;
        parts.push(format!("{}: success {rate:.3} (≥ {floor:.3}), min eq {min_eq:.4} (≥ {}), max|L| {max_l} (≤ {cap})", p.name, 1.0 - LAMBDA));
    }
    Verdict { pass, detail: parts.join("; ") }
}

fn hypothesis_necessity() -> Verdict {
    let trials = 1000;
    let p = zoo::trivial_last_message_protocol(8, &z(2)).unwrap();
    let opts = AttackOptions { force_simulated_oracle: true, ..Default::default() };
    let runs = attack_trials(&p, 6, trials, &opts);
    let rate = runs.iter().filter(|o| o.k_e != Key::Abort && o.k_e == o.k_b).count() as f64 / trials as f64;
    let sigma = (0.25f64 / trials as f64).sqrt();
    Verdict {
        pass: (rate - 0.5).abs() <= 3.0 * sigma,
        detail: format!("{}: match rate {rate:.3}, |rate − 0.5| ≤ {:.4}", p.name, 3.0 * sigma),
    }
}

fn pcc_consistency() -> Verdict {
    let spec = OracleSpec::new(4, z(2)).unwrap();
    let report = search_counterexample(&SearchConfig::new(spec.clone(), 0.1, 2, 10_000, SEED)).unwrap();
    let (a, b) = delta_one_fixture(&spec).unwrap();
    let fixture_flagged =
        is_goodstate(&a, 1.0, 1).unwrap() && is_goodstate(&b, 1.0, 1).unwrap() && !compatible(&a, &b).unwrap();
    Verdict {
        pass: report.counterexamples_found == 0 && fixture_flagged,
        detail: format!(
            "{} counterexamples in {} trials ({} good pairs, min margin {:.3e}); delta=1 fixture incompatible: {fixture_flagged}",
            report.counterexamples_found,
            report.trials,
            report.good_pairs,
            report.min_margin.unwrap_or(f64::NAN)
        ),
    }
}

fn ind_cpa() -> Verdict {
    let s = zoo::toy_qpke(8, &z(2)).unwrap();
    let r = zoo::ind_cpa_game(&s, EPS, LAMBDA, 1000, SEED).unwrap();
    Verdict {
        pass: r.win_rate >= 0.9,
        detail: format!("{}: win rate {:.3} over {} trials (≥ 0.9), {} aborts", s.name, r.win_rate, r.trials, r.aborted),
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("oracle-model fidelity", oracle_fidelity),
        ("sparsity", sparsity),
        ("independence", independence),
        ("learner bounds", learner_bounds),
        ("attack success", attack_success),
        ("hypothesis necessity", hypothesis_necessity),
        ("pcc consistency", pcc_consistency),
        ("qpke ind-cpa", ind_cpa),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {} [{tag}] {name}: {} ({:.1}s)", i + 1, v.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    }
}
