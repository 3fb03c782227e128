//! Eve's man-in-the-middle attack: learn heavy oracle points from the
//! classical transcript, guess Bob's key from her simulation plus the real
//! quantum message, then hand Alice a replacement message built from the
//! uncomputed simulation.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{default_cap, learn, LearnerOutcome};
use crate::oracle::PartialOracle;
use crate::protocol::{
    alice_final, invert_program, key_distribution, project_key, run_concrete, run_program, sample_index, Key,
    KeyDistribution, Protocol,
};
use crate::qstate::{DensityOperator, QuantumState, ZERO_THRESHOLD};
use crate::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackOptions {
    /// Let Alice's final map query Eve's simulated oracle; used to run the
    /// attack on protocols outside its hypothesis.
    pub force_simulated_oracle: bool,
    /// Learner query cap; `⌈d/(λε)⌉` when absent.
    pub cap: Option<usize>,
}

fn message_register(p: &Protocol) -> Result<&str> {
    p.message_register().ok_or_else(|| Error::Unsupported("protocol has no quantum message".into()))
}

fn check_scope(p: &Protocol, opts: &AttackOptions) -> Result<()> {
    if !p.alice_no_final_query && !opts.force_simulated_oracle {
        return Err(Error::Unsupported(format!(
            "`{}`: Alice's final map queries the oracle, outside the attack's hypothesis",
            p.name
        )));
    }
    Ok(())
}

/// Loads `message` into the simulation, applies Alice's final map, measures
/// the key. Returns `k_E`, the key distribution and the post-measurement state.
pub fn eve_guess_key<R: Rng + ?Sized>(
    sim: &LearnerOutcome,
    message: &[Complex64],
    p: &Protocol,
    opts: &AttackOptions,
    rng: &mut R,
) -> Result<(Key, KeyDistribution, QuantumState)> {
    check_scope(p, opts)?;
    let mut s = loaded(p, &sim.simulated_state, message)?;
    run_program(&mut s, &p.final_a.program)?;
    let dist = key_distribution(&s, &p.final_a)?;
    let k = Key::from_index(sample_index(&dist, rng));
    project_key(&mut s, &p.final_a, k)?;
    Ok((k, dist, s))
}

/// Same as [`eve_guess_key`] with the key outcome fixed.
pub fn eve_project_key(sim: &LearnerOutcome, message: &[Complex64], p: &Protocol, k: Key) -> Result<(f64, QuantumState)> {
    let mut s = loaded(p, &sim.simulated_state, message)?;
    run_program(&mut s, &p.final_a.program)?;
    let dist = key_distribution(&s, &p.final_a)?;
    if dist[k.index()] <= ZERO_THRESHOLD {
        return Ok((0.0, s));
    }
    project_key(&mut s, &p.final_a, k)?;
    Ok((dist[k.index()], s))
}

fn loaded(p: &Protocol, state: &QuantumState, message: &[Complex64]) -> Result<QuantumState> {
    let mut s = state.clone();
    s.load_register(message_register(p)?, message)?;
    Ok(s)
}

/// `ρ' = Tr_{¬M}(A_fin† · post)`: uncompute, then trace out everything but the message.
pub fn eve_message(p: &Protocol, post_state: &QuantumState) -> Result<DensityOperator> {
    let mut s = post_state.clone();
    run_program(&mut s, &invert_program(&p.final_a.program))?;
    s.partial_trace(&[message_register(p)?])
}

/// The same ρ' with the other order: trace out Eve's copy of Bob and the
/// oracle first, then uncompute on the reduced state of Alice's registers and
/// the message. Requires a query-free final map.
pub fn eve_message_trace_first(p: &Protocol, post_state: &QuantumState) -> Result<DensityOperator> {
    if p.final_a_queries() > 0 {
        return Err(Error::Unsupported("final map queries the oracle".into()));
    }
    let m = message_register(p)?;
    let mut keep: Vec<&str> = p.alice_registers();
    keep.push(m);
    let rho = post_state.partial_trace(&keep)?;
    let u = final_map_unitary(p, &rho)?;
    let uncomputed = u.adjoint() * &rho.matrix * &u;
    // Trace out Alice's registers, keeping the message.
    let names: Vec<String> = rho.registers.iter().map(|r| r.0.clone()).collect();
    let dims: Vec<usize> = rho.registers.iter().map(|r| r.1).collect();
    let mpos = names.iter().position(|n| n == m).expect("kept");
    let md = dims[mpos];
    let mut out = Matrix::zeros(md, md);
    let total = rho.dim();
    let digit = |i: usize, pos: usize| {
        let stride: usize = dims[pos + 1..].iter().product();
        (i / stride) % dims[pos]
    };
    let stride_m: usize = dims[mpos + 1..].iter().product();
    for r in 0..total {
        for c in 0..total {
            let (dr, dc) = (digit(r, mpos), digit(c, mpos));
            if r - dr * stride_m == c - dc * stride_m {
                out[(dr, dc)] += uncomputed[(r, c)];
            }
        }
    }
    Ok(DensityOperator { registers: vec![(m.to_string(), md)], matrix: out })
}

/// Matrix of Alice's final map on the registers of `rho`, built column by
/// column from basis states.
fn final_map_unitary(p: &Protocol, rho: &DensityOperator) -> Result<Matrix> {
    let names: Vec<&str> = rho.registers.iter().map(|r| r.0.as_str()).collect();
    let dims: Vec<usize> = rho.registers.iter().map(|r| r.1).collect();
    let n = rho.dim();
    let base = crate::protocol::initial_state(p, None)?;
    let mut u = Matrix::zeros(n, n);
    for col in 0..n {
        let mut s = base.clone();
        let mut rest = col;
        let mut digits = vec![0; dims.len()];
        for (k, &d) in dims.iter().enumerate().rev() {
            digits[k] = rest % d;
            rest /= d;
        }
        for ((name, &d), &v) in names.iter().zip(&dims).zip(&digits) {
            let mut e = vec![Complex64::new(0.0, 0.0); d];
            e[v] = Complex64::new(1.0, 0.0);
            s.extract_register(name)?;
            s.load_register(name, &e)?;
        }
        run_program(&mut s, &p.final_a.program)?;
        let v = s.dense_on(&names)?;
        for (r, a) in v.iter().enumerate() {
            u[(r, col)] = *a;
        }
    }
    Ok(u)
}

/// Alice's key distribution when she holds `alice_state` and receives `rho`.
pub fn alice_key_given(p: &Protocol, alice_state: &QuantumState, rho: &DensityOperator) -> Result<KeyDistribution> {
    let mut out = [0.0; 3];
    for (l, v) in rho.eigen() {
        if l <= ZERO_THRESHOLD {
            continue;
        }
        let d = alice_final(p, alice_state, &v)?;
        for k in 0..3 {
            out[k] += l * d[k];
        }
    }
    Ok(out)
}

/// Left sides of the three attack inequalities, each minimized over the
/// message components. `None` on aborted runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub eq_find: Option<f64>,
    pub eq_simulatedm: Option<f64>,
    pub eq_agrees: Option<f64>,
    /// Largest change of any cell weight caused by Alice's final map.
    pub weight_shift: Option<f64>,
    /// Fourier support size before and after Alice's final map.
    pub sparsity: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackOutcome {
    #[serde(rename = "k_E")]
    pub k_e: Key,
    #[serde(rename = "k_A")]
    pub k_a: Key,
    #[serde(rename = "k_B")]
    pub k_b: Key,
    #[serde(rename = "L_size")]
    pub l_size: usize,
    pub aborted: bool,
    pub eq_find: Option<f64>,
    pub eq_simulatedm: Option<f64>,
    pub eq_agrees: Option<f64>,
    pub conjecture_relevant: bool,
    pub transcript: Vec<usize>,
    pub learned: PartialOracle,
}

impl AttackOutcome {
    pub fn success(&self) -> bool {
        self.k_e != Key::Abort && self.k_e == self.k_a && self.k_a == self.k_b
    }
}

/// One message component as Eve's replacement sees it.
#[derive(Clone, Debug)]
pub struct ComponentArtifacts {
    pub prob: f64,
    pub message: Vec<Complex64>,
    pub rho_prime: Option<DensityOperator>,
}

/// Everything needed to recompute an attack's diagnostics.
#[derive(Clone, Debug)]
pub struct AttackArtifacts {
    pub simulated_state: QuantumState,
    pub alice_state: QuantumState,
    pub components: Vec<ComponentArtifacts>,
    pub realized: usize,
    pub rho_prime: Option<DensityOperator>,
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub outcome: AttackOutcome,
    pub diagnostics: Diagnostics,
    pub artifacts: AttackArtifacts,
}

/// Recomputes the diagnostics for `k_e` from stored artifacts.
pub fn check_inequalities(
    p: &Protocol,
    sim: &LearnerOutcome,
    alice_state: &QuantumState,
    components: &[(f64, Vec<Complex64>)],
    k_e: Key,
) -> Result<(Diagnostics, Vec<Option<DensityOperator>>)> {
    let mut eq_find = f64::INFINITY;
    let mut eq_sim = f64::INFINITY;
    let mut eq_agree = f64::INFINITY;
    let mut rhos = Vec::new();
    let mut weight_shift: f64 = 0.0;
    let mut sparsity = (0, 0);
    for (_, psi) in components {
        let (pf, post) = eve_project_key(sim, psi, p, k_e)?;
        eq_find = eq_find.min(pf);
        if pf <= ZERO_THRESHOLD {
            eq_sim = 0.0;
            eq_agree = 0.0;
            rhos.push(None);
            continue;
        }
        let rho = eve_message(p, &post)?;
        eq_sim = eq_sim.min(crate::qstate::overlap(&rho, psi)?);
        eq_agree = eq_agree.min(alice_key_given(p, alice_state, &rho)?[k_e.index()]);
        rhos.push(Some(rho));
        if p.final_a_queries() == 0 {
            let before = loaded(p, &sim.simulated_state, psi)?;
            let mut after = before.clone();
            run_program(&mut after, &p.final_a.program)?;
            for (a, b) in before.weights()?.iter().zip(after.weights()?) {
                weight_shift = weight_shift.max((a - b).abs());
            }
            sparsity = (
                sparsity.0.max(before.fourier_support_size()),
                sparsity.1.max(after.fourier_support_size()),
            );
        }
    }
    let clamp = |x: f64| Some(x.clamp(0.0, 1.0));
    let diagnostics = Diagnostics {
        eq_find: clamp(eq_find),
        eq_simulatedm: clamp(eq_sim),
        eq_agrees: clamp(eq_agree),
        weight_shift: (p.final_a_queries() == 0).then_some(weight_shift),
        sparsity: (p.final_a_queries() == 0).then_some(sparsity),
    };
    Ok((diagnostics, rhos))
}

/// Runs the protocol honestly against `h`, lets Eve learn from the
/// transcript, replaces the quantum message, and scores the keys.
pub fn full_attack<R: Rng + ?Sized>(
    p: &Protocol,
    eps: f64,
    lambda: f64,
    h: &[usize],
    opts: &AttackOptions,
    rng: &mut R,
) -> Result<AttackRun> {
    check_scope(p, opts)?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!("lambda = {lambda} must lie in (0, 1)")));
    }
    let m = message_register(p)?;
    let real = run_concrete(p, h, rng)?;
    let realized = real.realized;
    let components: Vec<(f64, Vec<Complex64>)> = real
        .components
        .iter()
        .map(|c| {
            c.pure
                .clone()
                .map(|v| (c.prob, v))
                .ok_or_else(|| Error::NotProduct(1.0 - c.rho.max_eigenvalue()))
        })
        .collect::<Result<_>>()?;
    let mut alice_state = real.components[realized].state.clone();
    alice_state.extract_register(m)?;

    let cap = opts.cap.unwrap_or_else(|| default_cap(p.d, lambda, eps));
    let sim = learn(p, &real.transcript, eps, h, cap)?;
    let comp_artifacts = |rhos: Option<&[Option<DensityOperator>]>| -> Vec<ComponentArtifacts> {
        components
            .iter()
            .enumerate()
            .map(|(j, (q, v))| ComponentArtifacts {
                prob: *q,
                message: v.clone(),
                rho_prime: rhos.and_then(|r| r[j].clone()),
            })
            .collect()
    };

    if sim.aborted {
        let outcome = AttackOutcome {
            k_e: Key::Abort,
            k_a: real.k_a,
            k_b: real.k_b,
            l_size: sim.queries_made,
            aborted: true,
            eq_find: None,
            eq_simulatedm: None,
            eq_agrees: None,
            conjecture_relevant: false,
            transcript: real.transcript.clone(),
            learned: sim.learned.clone(),
        };
        let artifacts = AttackArtifacts {
            simulated_state: sim.simulated_state,
            alice_state,
            components: comp_artifacts(None),
            realized,
            rho_prime: None,
        };
        return Ok(AttackRun { outcome, diagnostics: Diagnostics::default(), artifacts });
    }

    let (k_e, _, post) = eve_guess_key(&sim, &components[realized].1, p, opts, rng)?;
    let rho_prime = eve_message(p, &post)?;
    let k_a_dist = alice_key_given(p, &alice_state, &rho_prime)?;
    let k_a = Key::from_index(sample_index(&k_a_dist, rng));

    let (diagnostics, rhos) = check_inequalities(p, &sim, &alice_state, &components, k_e)?;
    let mut argmaxes = Vec::new();
    for (_, psi) in &components {
        let d = alice_final(p, &sim.simulated_state, psi)?;
        let best = (0..3).max_by(|&a, &b| d[a].total_cmp(&d[b])).expect("three keys");
        argmaxes.push(best);
    }
    let conjecture_relevant = argmaxes.windows(2).any(|w| w[0] != w[1])
        || diagnostics.eq_find.is_some_and(|f| f < 1.0 - lambda);

    let outcome = AttackOutcome {
        k_e,
        k_a,
        k_b: real.k_b,
        l_size: sim.queries_made,
        aborted: false,
        eq_find: diagnostics.eq_find,
        eq_simulatedm: diagnostics.eq_simulatedm,
        eq_agrees: diagnostics.eq_agrees,
        conjecture_relevant,
        transcript: real.transcript.clone(),
        learned: sim.learned.clone(),
    };
    let artifacts = AttackArtifacts {
        simulated_state: sim.simulated_state,
        alice_state,
        components: comp_artifacts(Some(&rhos)),
        realized,
        rho_prime: Some(rho_prime),
    };
    Ok(AttackRun { outcome, diagnostics, artifacts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::GroupSpec;
    use crate::oracle::OracleSpec;
    use crate::protocol::{FinalMap, Message, Op, Party, ProtocolRegister, Round};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Alice announces x; Bob one-time-pads a random key with h(x).
    fn padded(n: usize) -> Protocol {
        Protocol {
            name: "padded".into(),
            registers: vec![
                ProtocolRegister::alice("ax", n),
                ProtocolRegister::alice("ay", 2),
                ProtocolRegister::bob("bx", n),
                ProtocolRegister::bob("by", 2),
                ProtocolRegister::bob("bk", 2),
                ProtocolRegister::message("M", 2),
            ],
            oracle: OracleSpec::new(n, GroupSpec::cyclic(2).unwrap()).unwrap(),
            rounds: vec![
                Round {
                    party: Party::A,
                    program: vec![Op::fourier("ax"), Op::query("ax", "ay")],
                    message: Message::Classical { register: "ax".into(), deliver_to: "bx".into() },
                },
                Round {
                    party: Party::B,
                    program: vec![
                        Op::query("bx", "by"),
                        Op::hadamard("bk"),
                        Op::controlled_add("bk", "M"),
                        Op::controlled_add("by", "M"),
                    ],
                    message: Message::Quantum { register: "M".into() },
                },
            ],
            final_a: FinalMap {
                program: vec![Op::controlled_sub("ay", "M")],
                key_register: "M".into(),
                key_map: vec![Some(0), Some(1)],
            },
            final_b: FinalMap { program: vec![], key_register: "bk".into(), key_map: vec![Some(0), Some(1)] },
            d: 1,
            alice_no_final_query: true,
        }
    }

    #[test]
    fn attack_breaks_padded_protocol() {
        let p = padded(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let h: Vec<usize> = (0..4).map(|x| (trial >> x) & 1).collect();
            let run = full_attack(&p, 0.1, 0.05, &h, &AttackOptions::default(), &mut rng).unwrap();
            assert!(run.outcome.success(), "{:?}", run.outcome);
            assert_eq!(run.outcome.l_size, 1);
            for v in [run.outcome.eq_find, run.outcome.eq_simulatedm, run.outcome.eq_agrees] {
                assert!((v.unwrap() - 1.0).abs() < 1e-9);
            }
            assert!(run.diagnostics.weight_shift.unwrap() < 1e-10);
            let (a, b) = run.diagnostics.sparsity.unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tracing_order_does_not_matter() {
        let p = padded(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = [1, 0, 0, 1];
        let real = run_concrete(&p, &h, &mut rng).unwrap();
        // A weak learner leaves Eve unsure of the pad, so ρ' is genuinely mixed.
        for eps in [0.1, 0.9] {
            let cap = if eps > 0.5 { 1 } else { 4 };
            let sim = learn(&p, &real.transcript, eps, &h, cap).unwrap();
            let psi = real.components[0].pure.clone().unwrap();
            for k in [Key::Zero, Key::One] {
                let (pk, post) = eve_project_key(&sim, &psi, &p, k).unwrap();
                if pk <= ZERO_THRESHOLD {
                    continue;
                }
                let a = eve_message(&p, &post).unwrap();
                let b = eve_message_trace_first(&p, &post).unwrap();
                a.check_invariants().unwrap();
                let dev = (&a.matrix - &b.matrix).iter().map(|z| z.norm()).fold(0.0, f64::max);
                assert!(dev < 1e-10, "deviation {dev}");
            }
        }
    }

    #[test]
    fn refuses_final_queries() {
        let mut p = padded(4);
        p.final_a.program.insert(0, Op::query("ax", "ay"));
        p.d = 2;
        p.alice_no_final_query = false;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = full_attack(&p, 0.1, 0.05, &[0; 4], &AttackOptions::default(), &mut rng);
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn orthogonal_collapse_gives_mixed_message() {
        // Alice's final map copies M into her key register and reads that; her
        // simulated state carries no information, so projecting onto either key
        // leaves M in a basis state and ρ' = |k⟩⟨k|. Averaged over k the
        // replacement is maximally mixed on the span of |0⟩, |1⟩.
        let mut p = padded(4);
        p.registers.push(ProtocolRegister::alice("ak", 2));
        p.final_a = FinalMap {
            program: vec![Op::controlled_add("M", "ak")],
            key_register: "ak".into(),
            key_map: vec![Some(0), Some(1)],
        };
        let h = [0, 1, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let real = run_concrete(&p, &h, &mut rng).unwrap();
        let sim = learn(&p, &real.transcript, 0.1, &h, 4).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let plus = [Complex64::new(s, 0.0), Complex64::new(s, 0.0)];
        let mut avg = Matrix::zeros(2, 2);
        for k in [Key::Zero, Key::One] {
            let (pk, post) = eve_project_key(&sim, &plus, &p, k).unwrap();
            assert!((pk - 0.5).abs() < 1e-12);
            let rho = eve_message(&p, &post).unwrap();
            assert!((rho.matrix[(k.index(), k.index())].re - 1.0).abs() < 1e-12);
            avg += rho.matrix * Complex64::new(pk, 0.0);
        }
        let mixed = DensityOperator::maximally_mixed(vec![("M".into(), 2)]);
        assert!((avg - mixed.matrix).iter().all(|z| z.norm() < 1e-12));
    }
}
