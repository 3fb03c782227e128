//! Random query circuits on an input register `x` and an output register `y`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::OracleSpec;
use crate::protocol::{run_program, Op};
use crate::qstate::{QuantumState, RegisterDecl, RegisterLayout};
use crate::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitStep {
    Gate(Op),
    /// Measurement outcome kept during generation.
    Postselect { register: String, value: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub oracle: OracleSpec,
    pub steps: Vec<CircuitStep>,
}

/// Registers `x` (dimension `N`) and `y` (the oracle range).
pub fn circuit_layout(spec: &OracleSpec) -> Result<Arc<RegisterLayout>> {
    let regs = vec![
        RegisterDecl::work("x", spec.domain_size),
        RegisterDecl::work("y", spec.range.order()).with_group(spec.range.clone()),
    ];
    Ok(Arc::new(RegisterLayout::new(regs, Some(spec.clone()))?))
}

impl Circuit {
    pub fn query_count(&self) -> usize {
        self.steps
            .iter()
            .map(|s| match s {
                CircuitStep::Gate(op) => op.query_count(),
                CircuitStep::Postselect { .. } => 0,
            })
            .sum()
    }

    pub fn apply(&self, s: &mut QuantumState) -> Result<()> {
        for step in &self.steps {
            match step {
                CircuitStep::Gate(op) => run_program(s, std::slice::from_ref(op))?,
                CircuitStep::Postselect { register, value } => {
                    s.postselect(register, *value)?;
                }
            }
        }
        Ok(())
    }

    /// Runs from `|0⟩|0⟩` against the purified oracle, or against `h`.
    pub fn run(&self, h: Option<&[usize]>) -> Result<QuantumState> {
        let layout = circuit_layout(&self.oracle)?;
        let mut s = match h {
            Some(h) => QuantumState::with_oracle_table(layout, h)?,
            None => QuantumState::new(layout),
        };
        self.apply(&mut s)?;
        Ok(s)
    }
}

/// Shape of the generated circuits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitFamily {
    pub max_queries: usize,
    /// Insert computational-basis postselections between layers.
    pub postselect: bool,
    /// Keep `y` within this rotation angle of `|0̂⟩`, so every query moves
    /// the oracle only slightly. `None` draws arbitrary gates on `y`.
    pub light_angle: Option<f64>,
}

impl CircuitFamily {
    pub fn general(max_queries: usize) -> Self {
        Self { max_queries, postselect: false, light_angle: None }
    }
}

fn random_matrix(dim: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(dim, dim, |_, _| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
}

/// Haar-like random unitary from the QR decomposition of a random matrix.
pub fn random_unitary(dim: usize, rng: &mut impl Rng) -> Matrix {
    random_matrix(dim, rng).qr().q()
}

/// `exp(iθG)` for a random Hermitian `G` of unit spectral norm.
pub fn small_rotation(dim: usize, theta: f64, rng: &mut impl Rng) -> Matrix {
    let a = random_matrix(dim, rng);
    let eig = (&a + a.adjoint()).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs())).max(1e-300);
    let v = &eig.eigenvectors;
    let d = Matrix::from_diagonal(&eig.eigenvalues.map(|l| Complex64::from_polar(1.0, theta * l / scale)));
    v * d * v.adjoint()
}

fn random_gate(reg: &str, dim: usize, rng: &mut impl Rng) -> Op {
    match rng.random_range(0..3) {
        0 => Op::Fourier { target: reg.into(), inverse: rng.random() },
        1 => {
            let mut map: Vec<usize> = (0..dim).collect();
            map.shuffle(rng);
            Op::Permutation { targets: vec![reg.into()], map }
        }
        _ => Op::matrix(&[reg], &random_unitary(dim, rng)),
    }
}

/// Draws a value with probability `probs[v]`, skipping numerically empty values.
fn sample_nonzero(probs: &[f64], rng: &mut impl Rng) -> usize {
    let live: Vec<(usize, f64)> = probs.iter().copied().enumerate().filter(|&(_, p)| p > 1e-9).collect();
    let total: f64 = live.iter().map(|&(_, p)| p).sum();
    let mut r = rng.random::<f64>() * total;
    for &(v, p) in &live {
        if r < p {
            return v;
        }
        r -= p;
    }
    live.last().map_or(0, |&(v, _)| v)
}

/// Generates a circuit with at most `family.max_queries` queries and runs it
/// against the purified oracle, recording any postselected outcomes.
pub fn random_circuit(
    spec: &OracleSpec,
    family: &CircuitFamily,
    rng: &mut impl Rng,
) -> Result<(Circuit, QuantumState)> {
    let n = spec.domain_size;
    let q = spec.range.order();
    let mut s = QuantumState::new(circuit_layout(spec)?);
    let mut steps = Vec::new();
    let push = |s: &mut QuantumState, step: CircuitStep, steps: &mut Vec<CircuitStep>| -> Result<()> {
        if let CircuitStep::Gate(op) = &step {
            run_program(s, std::slice::from_ref(op))?;
        }
        steps.push(step);
        Ok(())
    };
    if family.light_angle.is_some() {
        push(&mut s, CircuitStep::Gate(Op::fourier("y")), &mut steps)?;
    }
    let queries = rng.random_range(0..=family.max_queries);
    for layer in 0..=queries {
        match family.light_angle {
            Some(theta) => {
                push(&mut s, CircuitStep::Gate(random_gate("x", n, rng)), &mut steps)?;
                let angle = rng.random::<f64>() * theta;
                let rot = Op::matrix(&["y"], &small_rotation(q, angle, rng));
                push(&mut s, CircuitStep::Gate(rot), &mut steps)?;
            }
            None if n * q <= 64 && rng.random_bool(0.5) => {
                let u = random_unitary(n * q, rng);
                push(&mut s, CircuitStep::Gate(Op::matrix(&["x", "y"], &u)), &mut steps)?;
            }
            None => {
                push(&mut s, CircuitStep::Gate(random_gate("x", n, rng)), &mut steps)?;
                push(&mut s, CircuitStep::Gate(random_gate("y", q, rng)), &mut steps)?;
            }
        }
        if family.postselect && rng.random_bool(0.25) {
            let register = if family.light_angle.is_some() || rng.random() { "x" } else { "y" };
            let value = sample_nonzero(&s.probabilities(register)?, rng);
            s.postselect(register, value)?;
            steps.push(CircuitStep::Postselect { register: register.into(), value });
        }
        if layer < queries {
            let query = Op::Query { x: "x".into(), y: "y".into(), inverse: rng.random_bool(0.2) };
            push(&mut s, CircuitStep::Gate(query), &mut steps)?;
        }
    }
    Ok((Circuit { oracle: spec.clone(), steps }, s))
}

/// Joint computational-basis distribution of `(x, y)`, `x` most significant.
pub fn output_distribution(s: &QuantumState) -> Result<Vec<f64>> {
    let rho = s.partial_trace(&["x", "y"])?;
    Ok((0..rho.dim()).map(|i| rho.matrix[(i, i)].re).collect())
}

/// Total variation between the purified run and the uniform average of runs
/// against every concrete oracle. Only circuits without postselection have a
/// well-defined averaged output.
pub fn equivalence_gap(c: &Circuit) -> Result<f64> {
    if c.steps.iter().any(|s| matches!(s, CircuitStep::Postselect { .. })) {
        return Err(Error::Unsupported("equivalence needs a circuit without postselection".into()));
    }
    let functions = c
        .oracle
        .num_functions()
        .filter(|&f| f <= 1 << 16)
        .ok_or_else(|| Error::Unsupported("too many oracles to average".into()))?;
    let purified = output_distribution(&c.run(None)?)?;
    let mut averaged = vec![0.0; purified.len()];
    for index in 0..functions {
        let h = c.oracle.function(index);
        for (a, p) in averaged.iter_mut().zip(output_distribution(&c.run(Some(&h))?)?) {
            *a += p / functions as f64;
        }
    }
    Ok(0.5 * purified.iter().zip(&averaged).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
