//! Heavy-query learner: Eve repeatedly asks the real oracle for the
//! lexicographically first point whose purified cell is ε-heavy, and projects
//! her simulated state onto the answer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::PartialOracle;
use crate::protocol::{condition_on_transcript, Protocol};
use crate::qstate::QuantumState;

/// Smallest `x ∉ exclude` with `weight(x) ≥ eps`.
pub fn find_heavy(s: &QuantumState, eps: f64, exclude: &[usize]) -> Result<Option<usize>> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("eps = {eps} must lie in (0, 1)")));
    }
    let n = s.oracle_spec()?.domain_size;
    for x in 0..n {
        if !exclude.contains(&x) && s.weight(x)? >= eps {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

/// `⌈d / (λ·ε)⌉`.
pub fn default_cap(d: usize, lambda: f64, eps: f64) -> usize {
    ((d as f64) / (lambda * eps)).ceil().max(1.0) as usize
}

#[derive(Clone, Debug)]
pub struct LearnerOutcome {
    pub simulated_state: QuantumState,
    pub learned: PartialOracle,
    pub queries_made: usize,
    pub aborted: bool,
}

/// Serialized form of a [`LearnerOutcome`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerSummary {
    #[serde(rename = "L")]
    pub learned: PartialOracle,
    pub queries: usize,
    pub aborted: bool,
    pub max_residual_weight: f64,
}

impl LearnerOutcome {
    /// Largest weight among cells Eve has not queried.
    pub fn max_residual_weight(&self) -> Result<f64> {
        let w = self.simulated_state.weights()?;
        Ok(w.iter()
            .enumerate()
            .filter(|(x, _)| !self.learned.contains(*x))
            .map(|(_, &w)| w)
            .fold(0.0, f64::max))
    }

    pub fn summary(&self) -> Result<LearnerSummary> {
        Ok(LearnerSummary {
            learned: self.learned.clone(),
            queries: self.queries_made,
            aborted: self.aborted,
            max_residual_weight: self.max_residual_weight()?,
        })
    }
}

/// Runs the learner on Eve's purified view of the classical transcript `t`,
/// answering queries from `h`. Stops when nothing is heavy, or aborts when a
/// heavy point remains after `cap` queries.
pub fn learn(p: &Protocol, t: &[usize], eps: f64, h: &[usize], cap: usize) -> Result<LearnerOutcome> {
    if cap == 0 {
        return Err(Error::Domain("learner cap must be at least 1".into()));
    }
    p.oracle.check_table(h)?;
    let (mut s, _) = condition_on_transcript(p, t, None)?;
    let mut learned = PartialOracle::default();
    let aborted = loop {
        let Some(x) = find_heavy(&s, eps, &learned.domain())? else { break false };
        if learned.len() == cap {
            break true;
        }
        let ask = PartialOracle::new(vec![(x, h[x])])?;
        s.project_partial(&ask)?;
        learned.push(x, h[x])?;
    };
    Ok(LearnerOutcome { queries_made: learned.len(), simulated_state: s, learned, aborted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::GroupSpec;
    use crate::oracle::OracleSpec;
    use crate::protocol::{FinalMap, Message, Op, ProtocolRegister, Round, Party};
    use crate::qstate::{RegisterDecl, RegisterLayout};
    use std::sync::Arc;

    fn announced() -> Protocol {
        Protocol {
            name: "announced".into(),
            registers: vec![
                ProtocolRegister::alice("ax", 4),
                ProtocolRegister::alice("ay", 2),
                ProtocolRegister::bob("bx", 4),
                ProtocolRegister::bob("by", 2),
                ProtocolRegister::message("M", 2),
            ],
            oracle: OracleSpec::new(4, GroupSpec::cyclic(2).unwrap()).unwrap(),
            rounds: vec![
                Round {
                    party: Party::A,
                    program: vec![Op::fourier("ax"), Op::query("ax", "ay")],
                    message: Message::Classical { register: "ax".into(), deliver_to: "bx".into() },
                },
                Round {
                    party: Party::B,
                    program: vec![Op::query("bx", "by"), Op::controlled_add("by", "M")],
                    message: Message::Quantum { register: "M".into() },
                },
            ],
            final_a: FinalMap::lsb("ay", 2),
            final_b: FinalMap::lsb("by", 2),
            d: 1,
            alice_no_final_query: true,
        }
    }

    #[test]
    fn find_heavy_examples() {
        let s = crate::oracle::init_purified(OracleSpec::new(6, GroupSpec::cyclic(2).unwrap()).unwrap()).unwrap();
        assert_eq!(find_heavy(&s, 0.3, &[]).unwrap(), None);

        // w(2) = 1/2 from a classical query, w(5) = 1 from a Fourier query.
        let regs = vec![RegisterDecl::work("x", 6), RegisterDecl::work("y", 2), RegisterDecl::work("z", 2)];
        let spec = OracleSpec::new(6, GroupSpec::cyclic(2).unwrap()).unwrap();
        let mut s = QuantumState::new(Arc::new(RegisterLayout::new(regs, Some(spec)).unwrap()));
        crate::protocol::run_program(
            &mut s,
            &[
                Op::add_constant("x", 2),
                Op::query("x", "y"),
                Op::add_constant("x", 3),
                Op::add_constant("z", 1),
                Op::hadamard("z"),
                Op::query("x", "z"),
            ],
        )
        .unwrap();
        assert!((s.weight(2).unwrap() - 0.5).abs() < 1e-12);
        assert!((s.weight(5).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(find_heavy(&s, 0.4, &[]).unwrap(), Some(2));
        assert_eq!(find_heavy(&s, 0.4, &[2]).unwrap(), Some(5));
        assert_eq!(find_heavy(&s, 0.5, &[]).unwrap(), Some(2));
        assert!(find_heavy(&s, 1.0, &[]).is_err());
    }

    #[test]
    fn learns_the_announced_point() {
        let p = announced();
        let h = vec![1, 0, 1, 1];
        let out = learn(&p, &[3], 0.1, &h, 10).unwrap();
        assert_eq!(out.learned.pairs(), &[(3, 1)]);
        assert!(!out.aborted);
        assert_eq!(out.queries_made, 1);
        assert!(out.max_residual_weight().unwrap() < 0.1);
        let again = learn(&p, &[3], 0.1, &h, 10).unwrap();
        assert_eq!(again.learned, out.learned);
    }

    #[test]
    fn cap_forces_abort() {
        let p = announced();
        let out = learn(&p, &[1], 0.1, &[0, 0, 0, 0], 1).unwrap();
        assert!(!out.aborted);
        let mut tight = p.clone();
        // Alice queries two points; with cap 1 one heavy point is left.
        tight.rounds[0].program.extend([Op::add_constant("ax", 1), Op::query("ax", "ay"), Op::add_constant("ax", 3)]);
        tight.d = 2;
        let out = learn(&tight, &[1], 0.1, &[0, 0, 0, 0], 1).unwrap();
        assert!(out.aborted);
        assert_eq!(out.queries_made, 1);
    }

    #[test]
    fn summary_json() {
        let out = learn(&announced(), &[2], 0.1, &[0, 1, 1, 0], 4).unwrap();
        let json = serde_json::to_value(out.summary().unwrap()).unwrap();
        assert_eq!(json["L"], serde_json::json!([[2, 1]]));
        assert_eq!(json["queries"], 1);
        assert_eq!(json["aborted"], false);
    }

    #[test]
    fn unrealizable_transcript() {
        let mut p = announced();
        p.rounds[0].program = vec![Op::query("ax", "ay")];
        assert!(matches!(learn(&p, &[2], 0.1, &[0; 4], 4), Err(Error::ZeroProbability(_))));
    }
}
