//! Frozen values checked against a dense brute-force model built here, which
//! stores the whole oracle in the Fourier basis as one amplitude vector.

use num_complex::Complex64;
use qromlab::algebra::GroupSpec;
use qromlab::circuit::circuit_layout;
use qromlab::oracle::OracleSpec;
use qromlab::protocol::{run_program, Op};
use qromlab::qstate::QuantumState;

/// P[ĥ(cell) ≠ 0] after querying a uniform x with y = 0, computed by expanding
/// the Fourier-basis state Σ_x Σ_ŷ |x⟩|ŷ⟩|ĥ = −ŷ·e_x⟩ term by term.
fn dense_weight(n: usize, q: usize, cell: usize) -> f64 {
    let amp = Complex64::new(1.0 / ((n * q) as f64).sqrt(), 0.0);
    let mut p = 0.0;
    for x in 0..n {
        for yh in 0..q {
            let mut hh = vec![0usize; n];
            hh[x] = (q - yh) % q;
            if hh[cell] != 0 {
                p += amp.norm_sqr();
            }
        }
    }
    p
}

fn simulated_weights(n: usize, q: usize) -> Vec<f64> {
    let spec = OracleSpec::new(n, GroupSpec::cyclic(q).unwrap()).unwrap();
    let mut s = QuantumState::new(circuit_layout(&spec).unwrap());
    run_program(&mut s, &[Op::fourier("x"), Op::query("x", "y")]).unwrap();
    s.weights().unwrap()
}

#[test]
fn superposed_query_weight() {
    // Frozen from dense_weight(4, 3, _) = (1 − 1/3) / 4.
    const FROZEN: f64 = 1.0 / 6.0;
    assert!((dense_weight(4, 3, 0) - FROZEN).abs() < 1e-15);
    for w in simulated_weights(4, 3) {
        assert!((w - FROZEN).abs() < 1e-12, "{w}");
    }
}

#[test]
fn weights_match_dense_model() {
    for (n, q) in [(2, 2), (3, 2), (3, 4), (5, 3)] {
        let w = simulated_weights(n, q);
        for (x, wx) in w.iter().enumerate() {
            assert!((wx - dense_weight(n, q, x)).abs() < 1e-12, "N={n} q={q} x={x}");
        }
    }
}

#[test]
fn classical_query_weight() {
    // |x = 2⟩|0⟩ over Z_5: the queried cell carries weight 4/5, the rest none.
    let spec = OracleSpec::new(3, GroupSpec::cyclic(5).unwrap()).unwrap();
    let mut s = QuantumState::new(circuit_layout(&spec).unwrap());
    run_program(&mut s, &[Op::add_constant("x", 2), Op::query("x", "y")]).unwrap();
    let w = s.weights().unwrap();
    assert!(w[0].abs() < 1e-12 && w[1].abs() < 1e-12);
    assert!((w[2] - 0.8).abs() < 1e-12);
    assert_eq!(s.fourier_support_size(), 1);
}
