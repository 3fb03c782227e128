//! Finite Abelian groups written as products of cyclic factors, their
//! characters, and the per-register Fourier transform.
//!
//! Elements and characters share one encoding: the mixed-radix index in
//! lexicographic factor order (first factor most significant). The character
//! indexed by `ŷ` is `y ↦ Π exp(+2πi·ŷᵢ·yᵢ/qᵢ)`.
//!
//! The Fourier basis vector `|ŷ⟩` is `(1/√|Y|) Σ_y ŷ(y)† |y⟩`, so
//! [`fourier_matrix`] carries the conjugated character. With this convention a
//! query `y ↦ y + h(x)` moves the oracle cell from `ĥ(x)` to `ĥ(x) − ŷ`.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Matrix;

/// A finite Abelian group `Z_{q₁} × … × Z_{q_m}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct GroupSpec {
    factors: Vec<usize>,
    order: usize,
}

/// Element of a [`GroupSpec`], stored as its mixed-radix index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupElem(pub usize);

/// Character of a [`GroupSpec`]; the dual group is identified with the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DualElem(pub usize);

impl GroupSpec {
    pub fn new(factors: Vec<usize>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Domain("group needs at least one cyclic factor".into()));
        }
        if let Some(q) = factors.iter().find(|&&q| q < 2) {
            return Err(Error::Domain(format!("cyclic factor {q} must be at least 2")));
        }
        let order = factors
            .iter()
            .try_fold(1usize, |acc, &q| acc.checked_mul(q))
            .ok_or_else(|| Error::Domain("group order overflows".into()))?;
        Ok(Self { factors, order })
    }

    /// `Z_q`.
    pub fn cyclic(q: usize) -> Result<Self> {
        Self::new(vec![q])
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn is_elementary_2(&self) -> bool {
        self.factors.iter().all(|&q| q == 2)
    }

    fn check(&self, index: usize) -> Result<()> {
        if index >= self.order {
            Err(Error::Domain(format!(
                "index {index} out of range for group of order {}",
                self.order
            )))
        } else {
            Ok(())
        }
    }

    /// Mixed-radix digits of `index`, first factor first.
    pub fn digits(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.factors.len()];
        let mut rest = index;
        for (slot, &q) in out.iter_mut().zip(&self.factors).rev() {
            *slot = rest % q;
            rest /= q;
        }
        out
    }

    pub fn from_digits(&self, digits: &[usize]) -> usize {
        digits
            .iter()
            .zip(&self.factors)
            .fold(0, |acc, (&d, &q)| acc * q + d % q)
    }

    fn combine(&self, a: usize, b: usize, sign: i64) -> usize {
        // Digit-wise arithmetic without allocating.
        let mut result = 0;
        let mut place = 1;
        let (mut a, mut b) = (a, b);
        for &q in self.factors.iter().rev() {
            let da = (a % q) as i64;
            let db = (b % q) as i64;
            let q_i = q as i64;
            let d = (da + sign * db).rem_euclid(q_i) as usize;
            result += d * place;
            place *= q;
            a /= q;
            b /= q;
        }
        result
    }

    pub(crate) fn add_index(&self, a: usize, b: usize) -> usize {
        self.combine(a, b, 1)
    }

    pub(crate) fn sub_index(&self, a: usize, b: usize) -> usize {
        self.combine(a, b, -1)
    }

    pub(crate) fn character_index(&self, yhat: usize, y: usize) -> Complex64 {
        let (mut a, mut b) = (yhat, y);
        let mut phase = 0.0;
        for &q in self.factors.iter().rev() {
            let prod = ((a % q) * (b % q)) % q;
            phase += prod as f64 / q as f64;
            a /= q;
            b /= q;
        }
        Complex64::from_polar(1.0, 2.0 * PI * phase.fract())
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElem> {
        (0..self.order).map(GroupElem)
    }
}

impl TryFrom<Vec<usize>> for GroupSpec {
    type Error = Error;

    fn try_from(factors: Vec<usize>) -> Result<Self> {
        Self::new(factors)
    }
}

impl From<GroupSpec> for Vec<usize> {
    fn from(g: GroupSpec) -> Self {
        g.factors
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.factors.iter().map(|q| format!("Z{q}")).collect();
        f.write_str(&parts.join("x"))
    }
}

/// `ŷ(y) = Π exp(2πi·ŷᵢ·yᵢ/qᵢ)`.
pub fn character(g: &GroupSpec, yhat: DualElem, y: GroupElem) -> Result<Complex64> {
    g.check(yhat.0)?;
    g.check(y.0)?;
    Ok(g.character_index(yhat.0, y.0))
}

/// `F[ŷ][y] = ŷ(y)†/√|Y|`. Row `ŷ` holds the computational components of `|ŷ⟩`.
pub fn fourier_matrix(g: &GroupSpec) -> Matrix {
    let n = g.order();
    let scale = 1.0 / (n as f64).sqrt();
    Matrix::from_fn(n, n, |yhat, y| g.character_index(yhat, y).conj() * scale)
}

pub fn add(g: &GroupSpec, a: GroupElem, b: GroupElem) -> Result<GroupElem> {
    g.check(a.0)?;
    g.check(b.0)?;
    Ok(GroupElem(g.add_index(a.0, b.0)))
}

pub fn sub(g: &GroupSpec, a: GroupElem, b: GroupElem) -> Result<GroupElem> {
    g.check(a.0)?;
    g.check(b.0)?;
    Ok(GroupElem(g.sub_index(a.0, b.0)))
}

pub fn neg(g: &GroupSpec, a: GroupElem) -> Result<GroupElem> {
    sub(g, GroupElem(0), a)
}
