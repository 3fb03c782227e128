//! Dense pure-state engine over a named register layout.
//!
//! Amplitudes are stored register-major (first register most significant)
//! with the oracle cells `H_0 … H_{N-1}` after every work register. Only
//! registers that are actually entangled occupy a position in the amplitude
//! vector:
//!
//! * a work register is either [`Slot::Quantum`] or [`Slot::Classical`] (a
//!   product factor `|v⟩`);
//! * an oracle cell is [`Cell::Live`] (stored in Fourier coordinates),
//!   [`Cell::Fourier`] (a product factor `|v̂⟩`), or [`Cell::Fixed`] (measured in
//!   the computational basis and truncated from the oracle register).
//!
//! Registers are promoted into the vector when a gate needs them and demoted
//! again by [`QuantumState::compact`] once their marginal is a point mass.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::algebra::{fourier_matrix, GroupSpec};
use crate::error::{Error, Result};
use crate::oracle::OracleSpec;
use crate::Matrix;

/// Squared amplitudes at or below this are treated as zero.
pub const ZERO_THRESHOLD: f64 = 1e-12;
/// Off-value mass below which a register is demoted to a product factor.
const DEMOTE_THRESHOLD: f64 = 1e-20;
pub const DEFAULT_CAP: usize = 1 << 24;
pub const MAX_TRACE_DIM: usize = 4096;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterKind {
    Work,
    Message,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterDecl {
    pub name: String,
    pub dim: usize,
    #[serde(default = "default_kind")]
    pub kind: RegisterKind,
    /// Group structure used by additions and the Fourier gate; `Z_dim` if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<GroupSpec>,
}

fn default_kind() -> RegisterKind {
    RegisterKind::Work
}

impl RegisterDecl {
    pub fn work(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim, kind: RegisterKind::Work, group: None }
    }

    pub fn message(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim, kind: RegisterKind::Message, group: None }
    }

    pub fn with_group(mut self, group: GroupSpec) -> Self {
        self.group = Some(group);
        self
    }

    pub fn group(&self) -> GroupSpec {
        self.group
            .clone()
            .unwrap_or_else(|| GroupSpec::cyclic(self.dim).expect("dim >= 2 checked by layout"))
    }
}

/// Ordered work/message registers plus an optional oracle register `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisterLayout {
    registers: Vec<RegisterDecl>,
    index: HashMap<String, usize>,
    oracle: Option<OracleSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Work(usize),
    Cell(usize),
}

impl RegisterLayout {
    pub fn new(registers: Vec<RegisterDecl>, oracle: Option<OracleSpec>) -> Result<Self> {
        Self::with_cap(registers, oracle, DEFAULT_CAP)
    }

    pub fn with_cap(
        registers: Vec<RegisterDecl>,
        oracle: Option<OracleSpec>,
        cap: usize,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        let mut total: usize = 1;
        for (i, r) in registers.iter().enumerate() {
            if r.dim < 2 {
                return Err(Error::Layout(format!("register `{}` has dimension {} < 2", r.name, r.dim)));
            }
            if let Some(g) = &r.group {
                if g.order() != r.dim {
                    return Err(Error::Layout(format!(
                        "register `{}`: group order {} differs from dimension {}",
                        r.name,
                        g.order(),
                        r.dim
                    )));
                }
            }
            if index.insert(r.name.clone(), i).is_some() {
                return Err(Error::Layout(format!("duplicate register name `{}`", r.name)));
            }
            total = total
                .checked_mul(r.dim)
                .ok_or_else(|| Error::Layout("layout dimension overflows".into()))?;
        }
        if let Some(spec) = &oracle {
            for _ in 0..spec.domain_size {
                total = total
                    .checked_mul(spec.range.order())
                    .ok_or_else(|| Error::Layout("layout dimension overflows".into()))?;
            }
        }
        if total > cap {
            return Err(Error::Layout(format!("total dimension {total} exceeds cap {cap}")));
        }
        Ok(Self { registers, index, oracle })
    }

    pub fn registers(&self) -> &[RegisterDecl] {
        &self.registers
    }

    pub fn oracle(&self) -> Option<&OracleSpec> {
        self.oracle.as_ref()
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownRegister(name.to_string()))
    }

    pub fn decl(&self, name: &str) -> Result<&RegisterDecl> {
        Ok(&self.registers[self.position(name)?])
    }

    /// Work registers by name, oracle cells as `H<x>`.
    pub fn resolve(&self, name: &str) -> Result<Target> {
        if let Some(&i) = self.index.get(name) {
            return Ok(Target::Work(i));
        }
        if let (Some(spec), Some(rest)) = (&self.oracle, name.strip_prefix('H')) {
            if let Ok(x) = rest.parse::<usize>() {
                if x < spec.domain_size {
                    return Ok(Target::Cell(x));
                }
            }
        }
        Err(Error::UnknownRegister(name.to_string()))
    }

    pub fn full_dimension(&self) -> usize {
        let work: usize = self.registers.iter().map(|r| r.dim).product();
        match &self.oracle {
            Some(s) => work * s.range.order().pow(s.domain_size as u32),
            None => work,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Quantum,
    Classical(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    /// In the amplitude vector, Fourier coordinates.
    Live,
    /// Product factor `|v̂⟩`.
    Fourier(usize),
    /// Product factor `|y⟩`, truncated from the oracle register.
    Fixed(usize),
}

#[derive(Clone, Debug)]
pub struct QuantumState {
    pub(crate) layout: Arc<RegisterLayout>,
    pub(crate) work: Vec<Slot>,
    pub(crate) cells: Vec<Cell>,
    pub(crate) amps: Vec<Complex64>,
}

/// Positions of the registers currently held in the amplitude vector.
#[derive(Debug)]
pub(crate) struct Geometry {
    pub dims: Vec<usize>,
    pub strides: Vec<usize>,
    pub work_pos: Vec<Option<usize>>,
    pub cell_pos: Vec<Option<usize>>,
}

impl Geometry {
    #[inline]
    pub fn digit(&self, index: usize, pos: usize) -> usize {
        (index / self.strides[pos]) % self.dims[pos]
    }

    #[inline]
    pub fn replace(&self, index: usize, pos: usize, old: usize, new: usize) -> usize {
        index - old * self.strides[pos] + new * self.strides[pos]
    }
}

impl QuantumState {
    /// `|0…0⟩` on the work registers, `⊗ₓ|0̂⟩` on the oracle register.
    pub fn new(layout: Arc<RegisterLayout>) -> Self {
        let cells = match layout.oracle() {
            Some(spec) => vec![Cell::Fourier(0); spec.domain_size],
            None => Vec::new(),
        };
        Self { work: vec![Slot::Classical(0); layout.registers().len()], cells, amps: vec![ONE], layout }
    }

    pub fn layout(&self) -> &Arc<RegisterLayout> {
        &self.layout
    }

    pub fn slots(&self) -> &[Slot] {
        &self.work
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Amplitudes of the registers currently in the vector.
    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn classical_value(&self, reg: &str) -> Result<Option<usize>> {
        Ok(match self.work[self.layout.position(reg)?] {
            Slot::Classical(v) => Some(v),
            Slot::Quantum => None,
        })
    }

    pub(crate) fn geometry(&self) -> Geometry {
        let mut dims = Vec::new();
        let mut work_pos = vec![None; self.work.len()];
        for (i, slot) in self.work.iter().enumerate() {
            if *slot == Slot::Quantum {
                work_pos[i] = Some(dims.len());
                dims.push(self.layout.registers()[i].dim);
            }
        }
        let mut cell_pos = vec![None; self.cells.len()];
        if let Some(spec) = self.layout.oracle() {
            for (x, cell) in self.cells.iter().enumerate() {
                if *cell == Cell::Live {
                    cell_pos[x] = Some(dims.len());
                    dims.push(spec.range.order());
                }
            }
        }
        let mut strides = vec![1; dims.len()];
        for p in (0..dims.len().saturating_sub(1)).rev() {
            strides[p] = strides[p + 1] * dims[p + 1];
        }
        Geometry { dims, strides, work_pos, cell_pos }
    }

    fn insertion_point(&self, target: Target) -> usize {
        let quantum_work = self.work.iter().filter(|s| **s == Slot::Quantum).count();
        match target {
            Target::Work(i) => self.work[..i].iter().filter(|s| **s == Slot::Quantum).count(),
            Target::Cell(x) => {
                quantum_work + self.cells[..x].iter().filter(|c| **c == Cell::Live).count()
            }
        }
    }

    /// Tensors `factor` into the vector at position `pos` (positions at or
    /// after `pos` move down by one).
    fn insert_factor(&mut self, pos: usize, factor: &[Complex64]) -> Result<()> {
        let g = self.geometry();
        let low: usize = g.dims[pos..].iter().product();
        let dim = factor.len();
        let new_len = self
            .amps
            .len()
            .checked_mul(dim)
            .filter(|&n| n <= DEFAULT_CAP)
            .ok_or_else(|| Error::Layout(format!("state vector would exceed {DEFAULT_CAP} amplitudes")))?;
        let mut out = vec![ZERO; new_len];
        for (i, &a) in self.amps.iter().enumerate() {
            if a == ZERO {
                continue;
            }
            let (high, lo) = (i / low, i % low);
            let base = high * dim * low + lo;
            for (d, &f) in factor.iter().enumerate() {
                out[base + d * low] = a * f;
            }
        }
        self.amps = out;
        Ok(())
    }

    /// Replaces position `pos` by the linear functional `Σ_d weights[d]·(digit d)`.
    /// Returns the squared norm of the result (the state is not renormalized).
    pub(crate) fn contract_at(&mut self, pos: usize, weights: &[Complex64]) -> f64 {
        let g = self.geometry();
        let dim = g.dims[pos];
        let low = g.strides[pos];
        let new_len = self.amps.len() / dim;
        let mut out = vec![ZERO; new_len];
        for (j, slot) in out.iter_mut().enumerate() {
            let (high, lo) = (j / low, j % low);
            let base = high * dim * low + lo;
            let mut acc = ZERO;
            for (d, &w) in weights.iter().enumerate() {
                if w != ZERO {
                    acc += w * self.amps[base + d * low];
                }
            }
            *slot = acc;
        }
        self.amps = out;
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub(crate) fn renormalize(&mut self, mass: f64) {
        let s = 1.0 / mass.sqrt();
        self.amps.iter_mut().for_each(|a| *a *= s);
    }

    pub(crate) fn promote_work(&mut self, i: usize) -> Result<()> {
        if let Slot::Classical(v) = self.work[i] {
            let dim = self.layout.registers()[i].dim;
            let mut factor = vec![ZERO; dim];
            factor[v] = ONE;
            let pos = self.insertion_point(Target::Work(i));
            self.insert_factor(pos, &factor)?;
            self.work[i] = Slot::Quantum;
        }
        Ok(())
    }

    pub(crate) fn promote_cell(&mut self, x: usize) -> Result<()> {
        match self.cells[x] {
            Cell::Live => Ok(()),
            Cell::Fourier(v) => {
                let q = self.oracle_spec()?.range.order();
                let mut factor = vec![ZERO; q];
                factor[v] = ONE;
                let pos = self.insertion_point(Target::Cell(x));
                self.insert_factor(pos, &factor)?;
                self.cells[x] = Cell::Live;
                Ok(())
            }
            Cell::Fixed(_) => Err(Error::Domain(format!("oracle cell H{x} is fixed and cannot be acted on"))),
        }
    }

    pub(crate) fn oracle_spec(&self) -> Result<&OracleSpec> {
        self.layout
            .oracle()
            .ok_or_else(|| Error::Layout("layout has no oracle register".into()))
    }

    pub(crate) fn promote(&mut self, target: Target) -> Result<()> {
        match target {
            Target::Work(i) => self.promote_work(i),
            Target::Cell(x) => self.promote_cell(x),
        }
    }

    pub(crate) fn position_of(g: &Geometry, target: Target) -> usize {
        match target {
            Target::Work(i) => g.work_pos[i].expect("promoted"),
            Target::Cell(x) => g.cell_pos[x].expect("promoted"),
        }
    }

    /// Applies `u` to the vector positions `positions` (first most significant),
    /// restricted to indices whose `controls` digits match.
    pub(crate) fn apply_matrix_at(&mut self, positions: &[usize], u: &Matrix, controls: &[(usize, usize)]) {
        let g = self.geometry();
        let dim: usize = positions.iter().map(|&p| g.dims[p]).product();
        debug_assert_eq!(u.nrows(), dim);
        let mut offsets = vec![0usize; dim];
        for (c, off) in offsets.iter_mut().enumerate() {
            let mut rest = c;
            for &p in positions.iter().rev() {
                *off += (rest % g.dims[p]) * g.strides[p];
                rest /= g.dims[p];
            }
        }
        let mut gathered = vec![ZERO; dim];
        for base in 0..self.amps.len() {
            if positions.iter().any(|&p| g.digit(base, p) != 0) {
                continue;
            }
            if controls.iter().any(|&(p, v)| g.digit(base, p) != v) {
                continue;
            }
            let mut any = false;
            for (c, slot) in gathered.iter_mut().enumerate() {
                *slot = self.amps[base + offsets[c]];
                any |= *slot != ZERO;
            }
            if !any {
                continue;
            }
            for r in 0..dim {
                let mut acc = ZERO;
                for (c, &v) in gathered.iter().enumerate() {
                    acc += u[(r, c)] * v;
                }
                self.amps[base + offsets[r]] = acc;
            }
        }
    }

    /// Rebuilds the vector through a bijection on indices with per-index phases.
    pub(crate) fn apply_index_map(&mut self, f: impl Fn(usize) -> (usize, Complex64)) {
        let mut out = vec![ZERO; self.amps.len()];
        for (i, &a) in self.amps.iter().enumerate() {
            if a == ZERO {
                continue;
            }
            let (j, phase) = f(i);
            out[j] += a * phase;
        }
        self.amps = out;
    }

    /// Demotes every register whose marginal is a point mass.
    pub fn compact(&mut self) {
        loop {
            let g = self.geometry();
            if g.dims.is_empty() {
                return;
            }
            let mut marginals: Vec<Vec<f64>> = g.dims.iter().map(|&d| vec![0.0; d]).collect();
            for (i, a) in self.amps.iter().enumerate() {
                let p = a.norm_sqr();
                if p == 0.0 {
                    continue;
                }
                for (pos, m) in marginals.iter_mut().enumerate() {
                    m[g.digit(i, pos)] += p;
                }
            }
            let total: f64 = marginals[0].iter().sum();
            let found = marginals.iter().enumerate().rev().find_map(|(pos, m)| {
                let (best, &mass) = m
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("nonempty");
                (total - mass <= DEMOTE_THRESHOLD * total.max(1.0)).then_some((pos, best))
            });
            let Some((pos, value)) = found else { return };
            let mut weights = vec![ZERO; g.dims[pos]];
            weights[value] = ONE;
            let mass = self.contract_at(pos, &weights);
            self.renormalize(mass);
            if let Some(i) = g.work_pos.iter().position(|&p| p == Some(pos)) {
                self.work[i] = Slot::Classical(value);
            } else if let Some(x) = g.cell_pos.iter().position(|&p| p == Some(pos)) {
                self.cells[x] = Cell::Fourier(value);
            }
        }
    }

    pub fn apply_unitary(&mut self, u: &Matrix, targets: &[&str]) -> Result<()> {
        let resolved = targets
            .iter()
            .map(|t| self.layout.resolve(t))
            .collect::<Result<Vec<_>>>()?;
        self.apply_unitary_targets(u, &resolved, &[])
    }

    /// `controls` are `(work index, value)` pairs; matrices act in the
    /// computational basis of every target, including oracle cells.
    pub(crate) fn apply_unitary_targets(
        &mut self,
        u: &Matrix,
        targets: &[Target],
        controls: &[(usize, usize)],
    ) -> Result<()> {
        let dims: Vec<usize> = targets.iter().map(|&t| self.target_dim(t)).collect::<Result<_>>()?;
        let dim: usize = dims.iter().product();
        if u.nrows() != dim || u.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{} but targets span dimension {dim}",
                u.nrows(),
                u.ncols()
            )));
        }
        let dev = unitarity_deviation(u);
        if dev > 1e-10 {
            return Err(Error::NotUnitary(dev));
        }
        for (k, t) in targets.iter().enumerate() {
            if targets[..k].contains(t) {
                return Err(Error::Domain("repeated target register".into()));
            }
        }
        let mut quantum_controls = Vec::new();
        for &(i, v) in controls {
            match self.work[i] {
                Slot::Classical(c) if c != v => return Ok(()),
                Slot::Classical(_) => {}
                Slot::Quantum => quantum_controls.push(i),
            }
        }
        for &t in targets {
            self.promote(t)?;
        }
        let u = if targets.iter().any(|t| matches!(t, Target::Cell(_))) {
            // Cells live in Fourier coordinates: conjugate by ⊗ F† on those factors.
            let spec = self.oracle_spec()?.clone();
            let f = fourier_matrix(&spec.range);
            let mut change = Matrix::identity(1, 1);
            for (&t, &d) in targets.iter().zip(&dims) {
                let block = match t {
                    Target::Cell(_) => f.adjoint(),
                    Target::Work(_) => Matrix::identity(d, d),
                };
                change = change.kronecker(&block);
            }
            &change * u * change.adjoint()
        } else {
            u.clone()
        };
        let g = self.geometry();
        let positions: Vec<usize> = targets.iter().map(|&t| Self::position_of(&g, t)).collect();
        let ctrl: Vec<(usize, usize)> = controls
            .iter()
            .filter(|(i, _)| quantum_controls.contains(i))
            .map(|&(i, v)| (g.work_pos[i].expect("quantum"), v))
            .collect();
        self.apply_matrix_at(&positions, &u, &ctrl);
        self.compact();
        Ok(())
    }

    fn target_dim(&self, t: Target) -> Result<usize> {
        Ok(match t {
            Target::Work(i) => self.layout.registers()[i].dim,
            Target::Cell(_) => self.oracle_spec()?.range.order(),
        })
    }

    /// Marginal distribution of a work register in the computational basis.
    pub fn probabilities(&self, reg: &str) -> Result<Vec<f64>> {
        let i = self.layout.position(reg)?;
        let dim = self.layout.registers()[i].dim;
        let mut out = vec![0.0; dim];
        match self.work[i] {
            Slot::Classical(v) => out[v] = 1.0,
            Slot::Quantum => {
                let g = self.geometry();
                let pos = g.work_pos[i].expect("quantum");
                for (k, a) in self.amps.iter().enumerate() {
                    out[g.digit(k, pos)] += a.norm_sqr();
                }
            }
        }
        Ok(out)
    }

    /// Projects `reg` onto `|value⟩`, renormalizes, and returns the Born probability.
    pub fn postselect(&mut self, reg: &str, value: usize) -> Result<f64> {
        let i = self.layout.position(reg)?;
        let dim = self.layout.registers()[i].dim;
        if value >= dim {
            return Err(Error::Domain(format!("value {value} out of range for `{reg}` (dim {dim})")));
        }
        let prob = match self.work[i] {
            Slot::Classical(v) if v == value => 1.0,
            Slot::Classical(v) => {
                return Err(Error::ZeroProbability(format!("`{reg}` holds {v}, not {value}")));
            }
            Slot::Quantum => {
                let g = self.geometry();
                let pos = g.work_pos[i].expect("quantum");
                let mut w = vec![ZERO; dim];
                w[value] = ONE;
                let norm0 = self.norm().powi(2);
                let mass = self.contract_at(pos, &w);
                self.work[i] = Slot::Classical(value);
                mass / norm0
            }
        };
        if prob < ZERO_THRESHOLD {
            return Err(Error::ZeroProbability(format!("`{reg}` = {value} has probability {prob:e}")));
        }
        if prob < 1.0 {
            let mass = self.norm().powi(2);
            self.renormalize(mass);
            self.compact();
        }
        Ok(prob)
    }

    /// Projects `reg` onto the span of values where `keep[v]` is true, without
    /// demoting it. Returns the probability; the state is renormalized.
    pub fn project_values(&mut self, reg: &str, keep: &[bool]) -> Result<f64> {
        let i = self.layout.position(reg)?;
        let dim = self.layout.registers()[i].dim;
        if keep.len() != dim {
            return Err(Error::DimensionMismatch(format!("mask of length {} for `{reg}` (dim {dim})", keep.len())));
        }
        let prob = match self.work[i] {
            Slot::Classical(v) => {
                if keep[v] {
                    1.0
                } else {
                    0.0
                }
            }
            Slot::Quantum => {
                let g = self.geometry();
                let pos = g.work_pos[i].expect("quantum");
                let mut mass = 0.0;
                for (k, a) in self.amps.iter_mut().enumerate() {
                    if keep[g.digit(k, pos)] {
                        mass += a.norm_sqr();
                    } else {
                        *a = ZERO;
                    }
                }
                mass
            }
        };
        if prob < ZERO_THRESHOLD {
            return Err(Error::ZeroProbability(format!("projection on `{reg}` has probability {prob:e}")));
        }
        self.renormalize(self.norm().powi(2));
        Ok(prob)
    }

    /// Replaces a classical register by the pure state `amps` (normalized here).
    pub fn load_register(&mut self, reg: &str, amps: &[Complex64]) -> Result<()> {
        let i = self.layout.position(reg)?;
        let dim = self.layout.registers()[i].dim;
        if amps.len() != dim {
            return Err(Error::DimensionMismatch(format!("{} amplitudes for `{reg}` (dim {dim})", amps.len())));
        }
        if self.work[i] == Slot::Quantum {
            return Err(Error::Domain(format!("`{reg}` is entangled and cannot be overwritten")));
        }
        let n: f64 = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if n < ZERO_THRESHOLD {
            return Err(Error::Domain("cannot load a zero vector".into()));
        }
        let factor: Vec<Complex64> = amps.iter().map(|a| a / n).collect();
        let pos = self.insertion_point(Target::Work(i));
        self.insert_factor(pos, &factor)?;
        self.work[i] = Slot::Quantum;
        self.compact();
        Ok(())
    }

    /// Splits off `reg` from a state that is a product across `reg : rest`.
    /// The register is reset to `|0⟩` and its former pure state returned.
    pub fn extract_register(&mut self, reg: &str) -> Result<Vec<Complex64>> {
        let i = self.layout.position(reg)?;
        let dim = self.layout.registers()[i].dim;
        if let Slot::Classical(v) = self.work[i] {
            let mut e = vec![ZERO; dim];
            e[v] = ONE;
            self.work[i] = Slot::Classical(0);
            return Ok(e);
        }
        let g = self.geometry();
        let pos = g.work_pos[i].expect("quantum");
        // Column j of the reshaped amplitude matrix holds the register's
        // components for rest-index j.
        let low = g.strides[pos];
        let rest_len = self.amps.len() / dim;
        let column = |j: usize| -> Vec<Complex64> {
            let (high, lo) = (j / low, j % low);
            (0..dim).map(|d| self.amps[high * dim * low + d * low + lo]).collect()
        };
        let best = (0..rest_len)
            .max_by(|&a, &b| {
                let na: f64 = column(a).iter().map(|z| z.norm_sqr()).sum();
                let nb: f64 = column(b).iter().map(|z| z.norm_sqr()).sum();
                na.total_cmp(&nb)
            })
            .expect("nonempty");
        let mut u = column(best);
        let n: f64 = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        // Fix the phase so the largest component is real and positive.
        let lead = *u.iter().max_by(|a, b| a.norm_sqr().total_cmp(&b.norm_sqr())).expect("nonempty");
        let phase = lead.conj() / lead.norm();
        u.iter_mut().for_each(|z| *z = *z * phase / n);
        let mut rest = vec![ZERO; rest_len];
        let mut residual = 0.0;
        for (j, r) in rest.iter_mut().enumerate() {
            let col = column(j);
            *r = u.iter().zip(&col).map(|(a, b)| a.conj() * b).sum();
            residual += col
                .iter()
                .zip(&u)
                .map(|(c, a)| (c - a * *r).norm_sqr())
                .sum::<f64>();
        }
        let residual = residual.sqrt();
        if residual > 1e-9 {
            return Err(Error::NotProduct(residual));
        }
        self.amps = rest;
        self.work[i] = Slot::Classical(0);
        let mass = self.norm().powi(2);
        self.renormalize(mass);
        self.compact();
        Ok(u)
    }

    /// Amplitudes over `regs` (layout order) when every other register and
    /// every oracle cell is a product factor.
    pub fn dense_on(&self, regs: &[&str]) -> Result<Vec<Complex64>> {
        let idx: Vec<usize> = regs.iter().map(|r| self.layout.position(r)).collect::<Result<_>>()?;
        if self.cells.contains(&Cell::Live) {
            return Err(Error::Domain("oracle register is entangled".into()));
        }
        let mut s = self.clone();
        for (i, slot) in self.work.iter().enumerate() {
            if idx.contains(&i) {
                s.promote_work(i)?;
            } else if *slot == Slot::Quantum {
                return Err(Error::Domain(format!(
                    "`{}` is entangled with the requested registers",
                    self.layout.registers()[i].name
                )));
            }
        }
        Ok(s.amps)
    }

    /// Reduced density operator on `keep` (work registers, reported in layout order).
    pub fn partial_trace(&self, keep: &[&str]) -> Result<DensityOperator> {
        let mut idx: Vec<usize> = keep.iter().map(|k| self.layout.position(k)).collect::<Result<_>>()?;
        idx.sort_unstable();
        idx.dedup();
        let kept_dims: Vec<usize> = idx.iter().map(|&i| self.layout.registers()[i].dim).collect();
        let full_dim: usize = kept_dims.iter().product();
        if full_dim > MAX_TRACE_DIM {
            return Err(Error::DimensionMismatch(format!(
                "kept dimension {full_dim} exceeds {MAX_TRACE_DIM}"
            )));
        }
        let g = self.geometry();
        // Full kept index of amplitude k, and its index over the traced positions.
        let kept_positions: Vec<Option<usize>> = idx.iter().map(|&i| g.work_pos[i]).collect();
        let traced: Vec<usize> = (0..g.dims.len())
            .filter(|p| !kept_positions.contains(&Some(*p)))
            .collect();
        let mut groups: HashMap<usize, Vec<(usize, Complex64)>> = HashMap::new();
        for (k, &a) in self.amps.iter().enumerate() {
            if a == ZERO {
                continue;
            }
            let mut kept = 0;
            for (slot, &i) in idx.iter().enumerate() {
                let d = match self.work[i] {
                    Slot::Classical(v) => v,
                    Slot::Quantum => g.digit(k, kept_positions[slot].expect("quantum")),
                };
                kept = kept * kept_dims[slot] + d;
            }
            let mut rest = 0;
            for &p in &traced {
                rest = rest * g.dims[p] + g.digit(k, p);
            }
            groups.entry(rest).or_default().push((kept, a));
        }
        let mut rho = DMatrix::<Complex64>::zeros(full_dim, full_dim);
        for entries in groups.values() {
            for &(r, a) in entries {
                for &(c, b) in entries {
                    rho[(r, c)] += a * b.conj();
                }
            }
        }
        let tr: f64 = (0..full_dim).map(|i| rho[(i, i)].re).sum();
        if tr > 0.0 {
            rho /= Complex64::new(tr, 0.0);
        }
        let registers = idx
            .iter()
            .map(|&i| {
                let r = &self.layout.registers()[i];
                (r.name.clone(), r.dim)
            })
            .collect();
        Ok(DensityOperator { registers, matrix: rho })
    }

    /// Singular values across `partition_a : rest` (work registers on the A side;
    /// the oracle register is always on the rest side), in descending order.
    pub fn schmidt_coefficients(&self, partition_a: &[&str]) -> Result<Vec<f64>> {
        if partition_a.is_empty() {
            return Err(Error::Domain("partition must be nonempty".into()));
        }
        let idx: Vec<usize> = partition_a.iter().map(|k| self.layout.position(k)).collect::<Result<_>>()?;
        if idx.len() >= self.work.len() && self.cells.is_empty() {
            return Err(Error::Domain("partition must be proper".into()));
        }
        let g = self.geometry();
        let a_pos: Vec<usize> = idx.iter().filter_map(|&i| g.work_pos[i]).collect();
        let b_pos: Vec<usize> = (0..g.dims.len()).filter(|p| !a_pos.contains(p)).collect();
        let a_dim: usize = a_pos.iter().map(|&p| g.dims[p]).product();
        let b_dim: usize = b_pos.iter().map(|&p| g.dims[p]).product();
        let mut m = DMatrix::<Complex64>::zeros(a_dim, b_dim);
        for (k, &amp) in self.amps.iter().enumerate() {
            let r = a_pos.iter().fold(0, |acc, &p| acc * g.dims[p] + g.digit(k, p));
            let c = b_pos.iter().fold(0, |acc, &p| acc * g.dims[p] + g.digit(k, p));
            m[(r, c)] = amp;
        }
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        Ok(sv)
    }

    pub fn schmidt_rank(&self, partition_a: &[&str], tol: f64) -> Result<usize> {
        Ok(self.schmidt_coefficients(partition_a)?.iter().filter(|&&s| s > tol).count())
    }

    /// Every register expanded, oracle cells in the computational basis.
    /// Index order: work registers in layout order, then `H_0 … H_{N-1}`.
    pub fn to_dense_computational(&self) -> Result<Vec<Complex64>> {
        let mut s = self.clone();
        for i in 0..s.work.len() {
            s.promote_work(i)?;
        }
        let fixed: Vec<(usize, usize)> = s
            .cells
            .iter()
            .enumerate()
            .filter_map(|(x, c)| if let Cell::Fixed(y) = c { Some((x, *y)) } else { None })
            .collect();
        for x in 0..s.cells.len() {
            if !matches!(s.cells[x], Cell::Fixed(_)) {
                s.promote_cell(x)?;
            }
        }
        if !s.cells.is_empty() {
            let f = fourier_matrix(&s.oracle_spec()?.range);
            let g = s.geometry();
            for x in 0..s.cells.len() {
                if let Some(p) = g.cell_pos[x] {
                    s.apply_matrix_at(&[p], &f, &[]);
                }
            }
            let q = s.oracle_spec()?.range.order();
            for (x, y) in fixed {
                let mut e = vec![ZERO; q];
                e[y] = ONE;
                let pos = s.insertion_point(Target::Cell(x));
                s.insert_factor(pos, &e)?;
                s.cells[x] = Cell::Live;
            }
        }
        Ok(s.amps)
    }

    /// Inverse of [`Self::to_dense_computational`]: every cell becomes live.
    pub fn from_dense_computational(layout: Arc<RegisterLayout>, amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() != layout.full_dimension() {
            return Err(Error::DimensionMismatch(format!(
                "{} amplitudes for layout of dimension {}",
                amps.len(),
                layout.full_dimension()
            )));
        }
        let n: f64 = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("state has norm {n}, expected 1")));
        }
        let mut s = Self {
            work: vec![Slot::Quantum; layout.registers().len()],
            cells: vec![Cell::Live; layout.oracle().map_or(0, |o| o.domain_size)],
            amps,
            layout,
        };
        if !s.cells.is_empty() {
            let fd = fourier_matrix(&s.oracle_spec()?.range).adjoint();
            let g = s.geometry();
            for x in 0..s.cells.len() {
                s.apply_matrix_at(&[g.cell_pos[x].expect("live")], &fd, &[]);
            }
        }
        s.compact();
        Ok(s)
    }

    pub fn dump(&self) -> StateDump {
        StateDump {
            registers: self.layout.registers().to_vec(),
            oracle: self.layout.oracle().cloned(),
            slots: self.work.clone(),
            cells: self.cells.clone(),
            entries: self
                .amps
                .iter()
                .enumerate()
                .filter(|(_, a)| a.norm() > ZERO_THRESHOLD)
                .map(|(i, a)| AmpEntry { basis_index: i, re: a.re, im: a.im })
                .collect(),
        }
    }

    pub fn from_dump(dump: &StateDump) -> Result<Self> {
        let layout = Arc::new(RegisterLayout::new(dump.registers.clone(), dump.oracle.clone())?);
        if dump.slots.len() != layout.registers().len()
            || dump.cells.len() != layout.oracle().map_or(0, |o| o.domain_size)
        {
            return Err(Error::Layout("dump slots do not match its layout".into()));
        }
        let mut s = Self { layout, work: dump.slots.clone(), cells: dump.cells.clone(), amps: Vec::new() };
        let len: usize = s.geometry().dims.iter().product();
        let mut amps = vec![ZERO; len];
        for e in &dump.entries {
            let slot = amps
                .get_mut(e.basis_index)
                .ok_or_else(|| Error::Layout(format!("basis index {} out of range", e.basis_index)))?;
            *slot = Complex64::new(e.re, e.im);
        }
        s.amps = amps;
        let n = s.norm();
        if n < ZERO_THRESHOLD {
            return Err(Error::Domain("dumped state is zero".into()));
        }
        s.renormalize(n * n);
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmpEntry {
    pub basis_index: usize,
    pub re: f64,
    pub im: f64,
}

/// Serialized state: layout metadata plus the `{basis_index, re, im}` entries
/// of the amplitude vector with `|amp| > 1e-12`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateDump {
    pub registers: Vec<RegisterDecl>,
    pub oracle: Option<OracleSpec>,
    pub slots: Vec<Slot>,
    pub cells: Vec<Cell>,
    pub entries: Vec<AmpEntry>,
}

pub fn unitarity_deviation(u: &Matrix) -> f64 {
    if u.nrows() != u.ncols() {
        return f64::INFINITY;
    }
    let prod = u * u.adjoint();
    let n = u.nrows();
    prod.iter()
        .enumerate()
        .map(|(k, z)| {
            let (r, c) = (k % n, k / n);
            let want = if r == c { ONE } else { ZERO };
            (z - want).norm()
        })
        .fold(0.0, f64::max)
}

/// Mixed state on a small set of work registers.
#[derive(Clone, Debug)]
pub struct DensityOperator {
    pub registers: Vec<(String, usize)>,
    pub matrix: Matrix,
}

impl DensityOperator {
    pub fn from_pure(registers: Vec<(String, usize)>, psi: &[Complex64]) -> Result<Self> {
        let dim: usize = registers.iter().map(|r| r.1).product();
        if psi.len() != dim {
            return Err(Error::DimensionMismatch(format!("{} amplitudes for dimension {dim}", psi.len())));
        }
        let v = nalgebra::DVector::from_column_slice(psi);
        let n = v.norm_squared();
        Ok(Self { registers, matrix: &v * v.adjoint() / Complex64::new(n, 0.0) })
    }

    pub fn maximally_mixed(registers: Vec<(String, usize)>) -> Self {
        let dim: usize = registers.iter().map(|r| r.1).product();
        Self { registers, matrix: Matrix::identity(dim, dim) / Complex64::new(dim as f64, 0.0) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// Eigenpairs in descending eigenvalue order.
    pub fn eigen(&self) -> Vec<(f64, Vec<Complex64>)> {
        let eig = self.matrix.clone().symmetric_eigen();
        let mut pairs: Vec<(f64, Vec<Complex64>)> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(k, &l)| (l, eig.eigenvectors.column(k).iter().copied().collect()))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        pairs
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigen().first().map_or(0.0, |e| e.0)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let herm = (&self.matrix - self.matrix.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if herm > 1e-10 {
            return Err(Error::Domain(format!("density operator not Hermitian ({herm:e})")));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("density operator has trace {tr}")));
        }
        if let Some(&(l, _)) = self.eigen().last() {
            if l < -1e-9 {
                return Err(Error::Domain(format!("density operator has eigenvalue {l}")));
            }
        }
        Ok(())
    }
}

/// `⟨ψ|ρ|ψ⟩` for a normalized `ψ` on the same registers as `rho`.
pub fn overlap(rho: &DensityOperator, psi: &[Complex64]) -> Result<f64> {
    if psi.len() != rho.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state of dimension {} against density of dimension {}",
            psi.len(),
            rho.dim()
        )));
    }
    let v = nalgebra::DVector::from_column_slice(psi);
    let n = v.norm_squared();
    Ok(((v.adjoint() * &rho.matrix * &v)[(0, 0)].re / n).clamp(0.0, 1.0))
}
