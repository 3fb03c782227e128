//! Purified random oracle: queries, partial-oracle projection, heaviness
//! weights and support diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::algebra::{fourier_matrix, GroupSpec};
use crate::error::{Error, Result};
use crate::qstate::{Cell, QuantumState, RegisterLayout, Slot, ZERO_THRESHOLD};

/// `X = {0, …, N−1}`, `Y` a finite Abelian group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub domain_size: usize,
    pub range: GroupSpec,
}

impl OracleSpec {
    pub fn new(domain_size: usize, range: GroupSpec) -> Result<Self> {
        if domain_size == 0 {
            return Err(Error::Domain("oracle domain must be nonempty".into()));
        }
        Ok(Self { domain_size, range })
    }

    pub fn num_functions(&self) -> Option<usize> {
        self.range.order().checked_pow(self.domain_size as u32)
    }

    /// The `index`-th function table, `H_0` most significant.
    pub fn function(&self, mut index: usize) -> Vec<usize> {
        let q = self.range.order();
        let mut h = vec![0; self.domain_size];
        for slot in h.iter_mut().rev() {
            *slot = index % q;
            index /= q;
        }
        h
    }

    pub fn check_table(&self, h: &[usize]) -> Result<()> {
        if h.len() != self.domain_size || h.iter().any(|&y| y >= self.range.order()) {
            return Err(Error::Domain(format!(
                "oracle table must have {} entries below {}",
                self.domain_size,
                self.range.order()
            )));
        }
        Ok(())
    }
}

/// A finite set of fixed oracle values; serialized as `[[x, y], …]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartialOracle {
    pairs: Vec<(usize, usize)>,
}

impl PartialOracle {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &(x, _) in &pairs {
            if !seen.insert(x) {
                return Err(Error::Domain(format!("partial oracle lists x = {x} twice")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, x: usize) -> bool {
        self.pairs.iter().any(|p| p.0 == x)
    }

    pub fn domain(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn push(&mut self, x: usize, y: usize) -> Result<()> {
        if self.contains(x) {
            return Err(Error::Domain(format!("partial oracle already fixes x = {x}")));
        }
        self.pairs.push((x, y));
        Ok(())
    }

    pub fn validate(&self, spec: &OracleSpec) -> Result<()> {
        for &(x, y) in &self.pairs {
            if x >= spec.domain_size || y >= spec.range.order() {
                return Err(Error::Domain(format!("pair ({x}, {y}) outside the oracle domain or range")));
            }
        }
        Ok(())
    }

    pub fn consistent_with(&self, h: &[usize]) -> bool {
        self.pairs.iter().all(|&(x, y)| h.get(x) == Some(&y))
    }
}

/// `⊗ₓ|0̂⟩` on `H` with no work registers.
pub fn init_purified(spec: OracleSpec) -> Result<QuantumState> {
    Ok(QuantumState::new(Arc::new(RegisterLayout::new(Vec::new(), Some(spec))?)))
}

impl QuantumState {
    /// Fresh state on `layout` with every oracle cell fixed to the table `h`.
    pub fn with_oracle_table(layout: Arc<RegisterLayout>, h: &[usize]) -> Result<Self> {
        let mut s = QuantumState::new(layout);
        s.oracle_spec()?.check_table(h)?;
        for (cell, &y) in s.cells.iter_mut().zip(h) {
            *cell = Cell::Fixed(y);
        }
        Ok(s)
    }

    fn query_registers(&self, x_reg: &str, y_reg: &str) -> Result<(usize, usize, OracleSpec)> {
        let spec = self.oracle_spec()?.clone();
        let xi = self.layout.position(x_reg)?;
        let yi = self.layout.position(y_reg)?;
        let xd = &self.layout.registers()[xi];
        let yd = &self.layout.registers()[yi];
        if xd.dim != spec.domain_size {
            return Err(Error::DimensionMismatch(format!(
                "query input `{x_reg}` has dimension {} but the oracle domain has {}",
                xd.dim, spec.domain_size
            )));
        }
        if yd.group() != spec.range {
            return Err(Error::DimensionMismatch(format!(
                "query output `{y_reg}` has group {} but the oracle range is {}",
                yd.group(),
                spec.range
            )));
        }
        if xi == yi {
            return Err(Error::Domain("query input and output must differ".into()));
        }
        Ok((xi, yi, spec))
    }

    /// `|x⟩|y⟩|h⟩ ↦ |x⟩|y ± h(x)⟩|h⟩` (minus when `inverse`).
    pub fn oracle_query(&mut self, x_reg: &str, y_reg: &str, inverse: bool) -> Result<()> {
        let (xi, yi, spec) = self.query_registers(x_reg, y_reg)?;
        let range = spec.range.clone();
        let f = fourier_matrix(&range);
        let fd = f.adjoint();
        let one = Complex64::new(1.0, 0.0);

        // Classical input and output against a fixed cell stays classical.
        if let (Slot::Classical(x), Slot::Classical(y)) = (self.work[xi], self.work[yi]) {
            if let Cell::Fixed(v) = self.cells[x] {
                let y = if inverse { range.sub_index(y, v) } else { range.add_index(y, v) };
                self.work[yi] = Slot::Classical(y);
                return Ok(());
            }
        }
        self.promote_work(yi)?;
        let cells: Vec<usize> = match self.work[xi] {
            Slot::Classical(x) => vec![x],
            Slot::Quantum => (0..spec.domain_size).collect(),
        };
        for &x in &cells {
            if matches!(self.cells[x], Cell::Fourier(_)) {
                self.promote_cell(x)?;
            }
        }

        // Fixed cells act in the computational basis of y.
        let fixed: Vec<(usize, usize)> = cells
            .iter()
            .filter_map(|&x| if let Cell::Fixed(v) = self.cells[x] { Some((x, v)) } else { None })
            .collect();
        if !fixed.is_empty() {
            let g = self.geometry();
            let ypos = g.work_pos[yi].expect("promoted");
            let xpos = g.work_pos[xi];
            let classical_x = match self.work[xi] {
                Slot::Classical(x) => Some(x),
                Slot::Quantum => None,
            };
            let cells_now = self.cells.clone();
            let range_c = range.clone();
            self.apply_index_map(|i| {
                let x = classical_x.unwrap_or_else(|| g.digit(i, xpos.expect("quantum")));
                match cells_now[x] {
                    Cell::Fixed(v) => {
                        let y = g.digit(i, ypos);
                        let ny = if inverse { range_c.sub_index(y, v) } else { range_c.add_index(y, v) };
                        (g.replace(i, ypos, y, ny), one)
                    }
                    _ => (i, one),
                }
            });
        }

        // Live cells act in the Fourier basis of y: ĥ(x) ↦ ĥ(x) ∓ ŷ.
        if cells.iter().any(|&x| self.cells[x] == Cell::Live) {
            let g = self.geometry();
            let ypos = g.work_pos[yi].expect("promoted");
            self.apply_matrix_at(&[ypos], &fd, &[]);
            let xpos = g.work_pos[xi];
            let classical_x = match self.work[xi] {
                Slot::Classical(x) => Some(x),
                Slot::Quantum => None,
            };
            let cell_pos = g.cell_pos.clone();
            let range_c = range.clone();
            self.apply_index_map(|i| {
                let x = classical_x.unwrap_or_else(|| g.digit(i, xpos.expect("quantum")));
                match cell_pos[x] {
                    Some(cp) => {
                        let yhat = g.digit(i, ypos);
                        let c = g.digit(i, cp);
                        let nc = if inverse { range_c.add_index(c, yhat) } else { range_c.sub_index(c, yhat) };
                        (g.replace(i, cp, c, nc), one)
                    }
                    None => (i, one),
                }
            });
            self.apply_matrix_at(&[ypos], &f, &[]);
        }
        self.compact();
        Ok(())
    }

    /// Probability that measuring `H_x` in the Fourier basis gives a non-zero character.
    pub fn weight(&self, x: usize) -> Result<f64> {
        let spec = self.oracle_spec()?;
        if x >= spec.domain_size {
            return Err(Error::Domain(format!("x = {x} outside domain of size {}", spec.domain_size)));
        }
        Ok(match self.cells[x] {
            Cell::Fixed(_) => 0.0,
            Cell::Fourier(v) => {
                if v == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            Cell::Live => {
                let g = self.geometry();
                let pos = g.cell_pos[x].expect("live");
                let total: f64 = self.amps.iter().map(|a| a.norm_sqr()).sum();
                let off: f64 = self
                    .amps
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| g.digit(*i, pos) != 0)
                    .map(|(_, a)| a.norm_sqr())
                    .sum();
                (off / total).clamp(0.0, 1.0)
            }
        })
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        (0..self.oracle_spec()?.domain_size).map(|x| self.weight(x)).collect()
    }

    /// Measures the cells in `l` in the computational basis, postselecting on
    /// the listed values. Measured cells are truncated from `H`.
    pub fn project_partial(&mut self, l: &PartialOracle) -> Result<f64> {
        let spec = self.oracle_spec()?.clone();
        l.validate(&spec)?;
        let f = fourier_matrix(&spec.range);
        let q = spec.range.order() as f64;
        let mut prob = 1.0;
        for &(x, y) in l.pairs() {
            match self.cells[x] {
                Cell::Fixed(v) => {
                    if v != y {
                        return Err(Error::ZeroProbability(format!("H{x} is fixed to {v}, not {y}")));
                    }
                }
                Cell::Fourier(_) => prob /= q,
                Cell::Live => {
                    let g = self.geometry();
                    let pos = g.cell_pos[x].expect("live");
                    let weights: Vec<Complex64> = (0..spec.range.order()).map(|c| f[(c, y)]).collect();
                    let before: f64 = self.amps.iter().map(|a| a.norm_sqr()).sum();
                    let mass = self.contract_at(pos, &weights);
                    prob *= mass / before;
                    if prob < ZERO_THRESHOLD {
                        return Err(Error::ZeroProbability(format!(
                            "H{x} = {y} has probability {prob:e}"
                        )));
                    }
                    self.renormalize(mass);
                }
            }
            self.cells[x] = Cell::Fixed(y);
        }
        if prob < ZERO_THRESHOLD {
            return Err(Error::ZeroProbability(format!("partial oracle has probability {prob:e}")));
        }
        self.compact();
        Ok(prob)
    }

    /// Largest number of non-zero characters in any Fourier-basis component.
    /// Truncated cells do not count.
    pub fn fourier_support_size(&self) -> usize {
        let pristine = self.cells.iter().filter(|c| matches!(c, Cell::Fourier(v) if *v != 0)).count();
        let g = self.geometry();
        let live: Vec<usize> = g.cell_pos.iter().flatten().copied().collect();
        let total: f64 = self.amps.iter().map(|a| a.norm_sqr()).sum();
        let live_max = self
            .amps
            .iter()
            .enumerate()
            .filter(|(_, a)| a.norm_sqr() / total > ZERO_THRESHOLD)
            .map(|(i, _)| live.iter().filter(|&&p| g.digit(i, p) != 0).count())
            .max()
            .unwrap_or(0);
        pristine + live_max
    }

    /// Function tables with marginal probability above the zero threshold.
    pub fn computational_support(&self) -> Result<BTreeSet<Vec<usize>>> {
        Ok(self.computational_marginal()?.into_keys().collect())
    }

    /// Marginal distribution of the oracle register in the computational
    /// basis, restricted to tables above the zero threshold.
    pub fn computational_marginal(&self) -> Result<BTreeMap<Vec<usize>, f64>> {
        let spec = self.oracle_spec()?.clone();
        let q = spec.range.order();
        let n = spec.domain_size;
        spec.num_functions()
            .filter(|&m| m <= 1 << 16)
            .ok_or_else(|| Error::Unsupported(format!("{q}^{n} functions are too many to enumerate")))?;
        let mut s = self.clone();
        for x in 0..n {
            if matches!(s.cells[x], Cell::Fourier(_)) {
                s.promote_cell(x)?;
            }
        }
        let f = fourier_matrix(&spec.range);
        let g = s.geometry();
        for x in 0..n {
            if let Some(p) = g.cell_pos[x] {
                s.apply_matrix_at(&[p], &f, &[]);
            }
        }
        let total: f64 = s.amps.iter().map(|a| a.norm_sqr()).sum();
        let mut marginal = BTreeMap::<Vec<usize>, f64>::new();
        for (i, a) in s.amps.iter().enumerate() {
            let p = a.norm_sqr();
            if p == 0.0 {
                continue;
            }
            let h: Vec<usize> = (0..n)
                .map(|x| match (s.cells[x], g.cell_pos[x]) {
                    (Cell::Fixed(v), _) => v,
                    (_, Some(pos)) => g.digit(i, pos),
                    _ => unreachable!("all cells promoted or fixed"),
                })
                .collect();
            *marginal.entry(h).or_insert(0.0) += p / total;
        }
        marginal.retain(|_, p| *p > ZERO_THRESHOLD);
        Ok(marginal)
    }

    pub fn cell(&self, x: usize) -> Option<Cell> {
        self.cells.get(x).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::RegisterDecl;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn z(q: usize) -> GroupSpec {
        GroupSpec::cyclic(q).unwrap()
    }

    fn state(n: usize, q: usize) -> QuantumState {
        let regs = vec![
            RegisterDecl::work("x", n),
            RegisterDecl::work("y", q),
        ];
        let spec = OracleSpec::new(n, z(q)).unwrap();
        QuantumState::new(Arc::new(RegisterLayout::new(regs, Some(spec)).unwrap()))
    }

    fn set(s: &mut QuantumState, reg: &str, v: usize) {
        let i = s.layout().position(reg).unwrap();
        s.work[i] = Slot::Classical(v);
    }

    #[test]
    fn init_examples() {
        let s = init_purified(OracleSpec::new(1, z(2)).unwrap()).unwrap();
        let dense = s.to_dense_computational().unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!(dense.iter().all(|a| (a - Complex64::new(h, 0.0)).norm() < 1e-12));
        let s = init_purified(OracleSpec::new(2, z(2)).unwrap()).unwrap();
        assert_eq!(s.computational_support().unwrap().len(), 4);
        assert_eq!(s.fourier_support_size(), 0);
        assert_eq!(s.weights().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn fourier_query_moves_cell() {
        let mut s = state(4, 2);
        set(&mut s, "x", 2);
        set(&mut s, "y", 1);
        // |y⟩ = |1̂⟩ is H|1⟩.
        let f = fourier_matrix(&z(2));
        s.apply_unitary(&f, &["y"]).unwrap();
        s.oracle_query("x", "y", false).unwrap();
        assert_eq!(s.cell(2), Some(Cell::Fourier(1)));
        assert!((s.weight(2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(s.weight(0).unwrap(), 0.0);
        assert_eq!(s.fourier_support_size(), 1);
    }

    #[test]
    fn classical_query_weights() {
        let mut s = state(4, 2);
        set(&mut s, "x", 1);
        s.oracle_query("x", "y", false).unwrap();
        assert!((s.weight(1).unwrap() - 0.5).abs() < 1e-12);
        // Over Z2 the same query into the same output uncomputes.
        let mut t = s.clone();
        t.oracle_query("x", "y", false).unwrap();
        assert_eq!(t.weight(1).unwrap(), 0.0);
        assert_eq!(t.classical_value("y").unwrap(), Some(0));
        // Into a second output, both copies hold h(1) and w stays at 1/2.
        let regs = vec![RegisterDecl::work("x", 4), RegisterDecl::work("y", 2), RegisterDecl::work("y2", 2)];
        let spec = OracleSpec::new(4, z(2)).unwrap();
        let mut t = QuantumState::new(Arc::new(RegisterLayout::new(regs, Some(spec)).unwrap()));
        set(&mut t, "x", 1);
        t.oracle_query("x", "y", false).unwrap();
        t.oracle_query("x", "y2", false).unwrap();
        assert!((t.weight(1).unwrap() - 0.5).abs() < 1e-12);
        t.postselect("y", 1).unwrap();
        assert_eq!(t.classical_value("y2").unwrap(), Some(1));
        // The output register is perfectly correlated with H_1.
        let mut u = s.clone();
        u.postselect("y", 1).unwrap();
        assert!(u.computational_support().unwrap().iter().all(|h| h[1] == 1));

        let mut s3 = state(2, 3);
        s3.oracle_query("x", "y", false).unwrap();
        assert!((s3.weight(0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn query_dimension_errors() {
        let regs = vec![RegisterDecl::work("x", 3), RegisterDecl::work("y", 2)];
        let spec = OracleSpec::new(4, z(2)).unwrap();
        let mut s = QuantumState::new(Arc::new(RegisterLayout::new(regs, Some(spec)).unwrap()));
        assert!(matches!(s.oracle_query("x", "y", false), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn project_partial_examples() {
        let mut s = init_purified(OracleSpec::new(3, z(2)).unwrap()).unwrap();
        let l = PartialOracle::new(vec![(0, 1)]).unwrap();
        let p = s.project_partial(&l).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert_eq!(s.cell(0), Some(Cell::Fixed(1)));
        assert_eq!(s.weight(0).unwrap(), 0.0);
        let support = s.computational_support().unwrap();
        assert_eq!(support.len(), 4);
        assert!(support.iter().all(|h| h[0] == 1));
        // Consistent again: probability 1.
        assert_eq!(s.project_partial(&l).unwrap(), 1.0);
        let bad = PartialOracle::new(vec![(0, 0)]).unwrap();
        assert!(matches!(s.project_partial(&bad), Err(Error::ZeroProbability(_))));
        assert!(PartialOracle::new(vec![(1, 0), (1, 1)]).is_err());
    }

    #[test]
    fn project_partial_after_query() {
        let mut s = state(2, 2);
        set(&mut s, "x", 0);
        s.oracle_query("x", "y", false).unwrap();
        let l = PartialOracle::new(vec![(0, 1)]).unwrap();
        let p = s.project_partial(&l).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert_eq!(s.classical_value("y").unwrap(), Some(1));
        assert_eq!(s.fourier_support_size(), 0);
    }

    #[test]
    fn fixed_cell_query_is_classical() {
        let mut s = state(2, 3);
        s.project_partial(&PartialOracle::new(vec![(1, 2)]).unwrap()).unwrap();
        set(&mut s, "x", 1);
        s.oracle_query("x", "y", false).unwrap();
        assert_eq!(s.classical_value("y").unwrap(), Some(2));
        s.oracle_query("x", "y", true).unwrap();
        assert_eq!(s.classical_value("y").unwrap(), Some(0));
    }

    #[test]
    fn partial_oracle_json() {
        let l: PartialOracle = serde_json::from_str("[[0,1],[3,0]]").unwrap();
        assert_eq!(l.pairs(), &[(0, 1), (3, 0)]);
        assert_eq!(serde_json::to_string(&l).unwrap(), "[[0,1],[3,0]]");
    }

    /// Applies a random query circuit and returns the state.
    fn random_circuit(n: usize, q: usize, queries: usize, rng: &mut ChaCha8Rng) -> QuantumState {
        let mut s = state(n, q);
        for _ in 0..queries {
            let u = crate::qstate::tests::random_unitary(n * q, rng);
            s.apply_unitary(&u, &["x", "y"]).unwrap();
            s.oracle_query("x", "y", rng.random_bool(0.3)).unwrap();
        }
        s
    }

    #[test]
    fn fourier_and_computational_pictures_agree() {
        // Dense reference: build the full computational vector, apply the
        // computational-basis query map, compare.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (n, q) = (3, 2 + rng.random_range(0..2));
            let mut s = random_circuit(n, q, 1, &mut rng);
            let before = s.to_dense_computational().unwrap();
            s.oracle_query("x", "y", false).unwrap();
            let after = s.to_dense_computational().unwrap();
            let spec = OracleSpec::new(n, z(q)).unwrap();
            let m = spec.num_functions().unwrap();
            let mut expected = vec![Complex64::new(0.0, 0.0); before.len()];
            for x in 0..n {
                for y in 0..q {
                    for hi in 0..m {
                        let h = spec.function(hi);
                        let from = (x * q + y) * m + hi;
                        let to = (x * q + (y + h[x]) % q) * m + hi;
                        expected[to] += before[from];
                    }
                }
            }
            let dev = expected.iter().zip(&after).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(dev < 1e-9, "deviation {dev}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sparsity_bounded_by_queries(seed in any::<u64>(), queries in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_circuit(3, 2, queries, &mut rng);
            prop_assert!(s.fourier_support_size() <= queries);
            prop_assert!((s.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn z2_query_is_involution(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_circuit(3, 2, 2, &mut rng);
            let before = s.to_dense_computational().unwrap();
            s.oracle_query("x", "y", false).unwrap();
            s.oracle_query("x", "y", false).unwrap();
            let after = s.to_dense_computational().unwrap();
            let dev = before.iter().zip(&after).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prop_assert!(dev < 1e-9);
        }

        #[test]
        fn weight_invariant_under_work_unitaries(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_circuit(3, 3, 2, &mut rng);
            let before = s.weights().unwrap();
            let u = crate::qstate::tests::random_unitary(9, &mut rng);
            s.apply_unitary(&u, &["x", "y"]).unwrap();
            let after = s.weights().unwrap();
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
