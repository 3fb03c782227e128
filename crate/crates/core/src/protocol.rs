//! Two-party protocols with classical rounds followed by one quantum message
//! from Bob to Alice, and the engines that execute them against the purified
//! oracle or a fixed function table.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::algebra::fourier_matrix;
use crate::error::{Error, Result};
use crate::oracle::OracleSpec;
use crate::qstate::{
    DensityOperator, QuantumState, RegisterDecl, RegisterKind, RegisterLayout, Slot, Target,
    ZERO_THRESHOLD,
};
use crate::Matrix;

const MAX_OPERANDS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    A,
    B,
}

impl Party {
    pub fn owner(self) -> Owner {
        match self {
            Party::A => Owner::Alice,
            Party::B => Owner::Bob,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Owner {
    Alice,
    Bob,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolRegister {
    pub name: String,
    pub dim: usize,
    pub owner: Owner,
    #[serde(default = "work_kind")]
    pub kind: RegisterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<crate::algebra::GroupSpec>,
}

fn work_kind() -> RegisterKind {
    RegisterKind::Work
}

impl ProtocolRegister {
    pub fn alice(name: &str, dim: usize) -> Self {
        Self { name: name.into(), dim, owner: Owner::Alice, kind: RegisterKind::Work, group: None }
    }

    pub fn bob(name: &str, dim: usize) -> Self {
        Self { name: name.into(), dim, owner: Owner::Bob, kind: RegisterKind::Work, group: None }
    }

    pub fn message(name: &str, dim: usize) -> Self {
        Self { name: name.into(), dim, owner: Owner::Bob, kind: RegisterKind::Message, group: None }
    }

    pub fn with_group(mut self, g: crate::algebra::GroupSpec) -> Self {
        self.group = Some(g);
        self
    }

    fn decl(&self) -> RegisterDecl {
        RegisterDecl { name: self.name.clone(), dim: self.dim, kind: self.kind, group: self.group.clone() }
    }
}

/// One gate of a round program. Additions use the target register's group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "kebab-case")]
pub enum Op {
    /// Fourier transform of an elementary 2-group register (`H^{⊗k}`).
    Hadamard { target: String },
    /// `|v⟩ ↦ |v̂⟩` over the register's group.
    Fourier {
        target: String,
        #[serde(default)]
        inverse: bool,
    },
    /// Permutes the joint value of `targets` (first most significant).
    Permutation { targets: Vec<String>, map: Vec<usize> },
    AddConstant {
        target: String,
        value: usize,
        #[serde(default)]
        subtract: bool,
    },
    /// `target ± control` with the control value read as a group element.
    ControlledAdd {
        control: String,
        target: String,
        #[serde(default)]
        subtract: bool,
    },
    /// Applies `then` on the branch where `control` holds `value`.
    Controlled { control: String, value: usize, then: Vec<Op> },
    /// Explicit unitary given as rows of `[re, im]` pairs.
    Matrix { targets: Vec<String>, rows: Vec<Vec<[f64; 2]>> },
    Query {
        x: String,
        y: String,
        #[serde(default)]
        inverse: bool,
    },
}

impl Op {
    pub fn query(x: &str, y: &str) -> Self {
        Op::Query { x: x.into(), y: y.into(), inverse: false }
    }

    pub fn fourier(target: &str) -> Self {
        Op::Fourier { target: target.into(), inverse: false }
    }

    pub fn hadamard(target: &str) -> Self {
        Op::Hadamard { target: target.into() }
    }

    pub fn add_constant(target: &str, value: usize) -> Self {
        Op::AddConstant { target: target.into(), value, subtract: false }
    }

    pub fn controlled_add(control: &str, target: &str) -> Self {
        Op::ControlledAdd { control: control.into(), target: target.into(), subtract: false }
    }

    pub fn controlled_sub(control: &str, target: &str) -> Self {
        Op::ControlledAdd { control: control.into(), target: target.into(), subtract: true }
    }

    pub fn controlled(control: &str, value: usize, then: Vec<Op>) -> Self {
        Op::Controlled { control: control.into(), value, then }
    }

    pub fn matrix(targets: &[&str], m: &Matrix) -> Self {
        let rows = (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect())
            .collect();
        Op::Matrix { targets: targets.iter().map(|t| t.to_string()).collect(), rows }
    }

    pub fn query_count(&self) -> usize {
        match self {
            Op::Query { .. } => 1,
            Op::Controlled { then, .. } => then.iter().map(Op::query_count).sum(),
            _ => 0,
        }
    }

    /// Registers the op reads or writes.
    pub fn registers(&self) -> Vec<&str> {
        match self {
            Op::Hadamard { target } | Op::Fourier { target, .. } | Op::AddConstant { target, .. } => {
                vec![target]
            }
            Op::Permutation { targets, .. } | Op::Matrix { targets, .. } => {
                targets.iter().map(String::as_str).collect()
            }
            Op::ControlledAdd { control, target, .. } => vec![control, target],
            Op::Controlled { control, then, .. } => {
                let mut v = vec![control.as_str()];
                v.extend(then.iter().flat_map(Op::registers));
                v
            }
            Op::Query { x, y, .. } => vec![x, y],
        }
    }

    pub fn inverse(&self) -> Op {
        match self {
            Op::Hadamard { .. } => self.clone(),
            Op::Fourier { target, inverse } => Op::Fourier { target: target.clone(), inverse: !inverse },
            Op::Permutation { targets, map } => {
                let mut inv = vec![0; map.len()];
                for (i, &j) in map.iter().enumerate() {
                    if j < inv.len() {
                        inv[j] = i;
                    }
                }
                Op::Permutation { targets: targets.clone(), map: inv }
            }
            Op::AddConstant { target, value, subtract } => {
                Op::AddConstant { target: target.clone(), value: *value, subtract: !subtract }
            }
            Op::ControlledAdd { control, target, subtract } => {
                Op::ControlledAdd { control: control.clone(), target: target.clone(), subtract: !subtract }
            }
            Op::Controlled { control, value, then } => Op::Controlled {
                control: control.clone(),
                value: *value,
                then: invert_program(then),
            },
            Op::Matrix { targets, rows } => {
                let n = rows.len();
                let rows = (0..n)
                    .map(|r| (0..n).map(|c| [rows[c][r][0], -rows[c][r][1]]).collect())
                    .collect();
                Op::Matrix { targets: targets.clone(), rows }
            }
            Op::Query { x, y, inverse } => Op::Query { x: x.clone(), y: y.clone(), inverse: !inverse },
        }
    }
}

/// The inverse program: reversed order, each op inverted.
pub fn invert_program(ops: &[Op]) -> Vec<Op> {
    ops.iter().rev().map(Op::inverse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Message {
    /// The sender's register is measured; the receiver adds the value into `deliver_to`.
    Classical { register: String, deliver_to: String },
    /// The register is handed to Alice.
    Quantum { register: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub party: Party,
    pub program: Vec<Op>,
    pub message: Message,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMap {
    #[serde(default)]
    pub program: Vec<Op>,
    pub key_register: String,
    /// Key for each value of `key_register`; `null` is the abort symbol.
    pub key_map: Vec<Option<u8>>,
}

impl FinalMap {
    pub fn lsb(key_register: &str, dim: usize) -> Self {
        Self {
            program: Vec::new(),
            key_register: key_register.into(),
            key_map: (0..dim).map(|v| Some((v % 2) as u8)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    pub registers: Vec<ProtocolRegister>,
    pub oracle: OracleSpec,
    pub rounds: Vec<Round>,
    #[serde(rename = "final_A")]
    pub final_a: FinalMap,
    #[serde(rename = "final_B")]
    pub final_b: FinalMap,
    /// Per-party query budget.
    pub d: usize,
    pub alice_no_final_query: bool,
}

/// Key outcome; `Abort` is `⊥`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Zero,
    One,
    Abort,
}

impl Key {
    pub const ALL: [Key; 3] = [Key::Zero, Key::One, Key::Abort];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn from_bit(b: Option<u8>) -> Self {
        match b {
            Some(0) => Key::Zero,
            Some(1) => Key::One,
            _ => Key::Abort,
        }
    }

    pub fn bit(self) -> Option<u8> {
        match self {
            Key::Zero => Some(0),
            Key::One => Some(1),
            Key::Abort => None,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Key::Zero => "0",
            Key::One => "1",
            Key::Abort => "⊥",
        })
    }
}

impl Serialize for Key {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.bit().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Key::from_bit(Option::<u8>::deserialize(d)?))
    }
}

/// Probabilities indexed by [`Key::index`].
pub type KeyDistribution = [f64; 3];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: String,
    pub detail: String,
}

impl Issue {
    fn new(code: &str, detail: impl Into<String>) -> Self {
        Self { code: code.into(), detail: detail.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Issue>,
    pub notices: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: &str) -> bool {
        self.violations.iter().any(|i| i.code == code)
    }

    pub fn has_notice(&self, code: &str) -> bool {
        self.notices.iter().any(|i| i.code == code)
    }
}

impl Protocol {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("protocol serializes")
    }

    pub fn register(&self, name: &str) -> Option<&ProtocolRegister> {
        self.registers.iter().find(|r| r.name == name)
    }

    pub fn message_register(&self) -> Option<&str> {
        self.rounds.iter().rev().find_map(|r| match &r.message {
            Message::Quantum { register } => Some(register.as_str()),
            Message::Classical { .. } => None,
        })
    }

    /// Alice's work registers (the message register excluded).
    pub fn alice_registers(&self) -> Vec<&str> {
        self.owned(Owner::Alice)
    }

    /// Bob's work registers (the message register excluded).
    pub fn bob_registers(&self) -> Vec<&str> {
        self.owned(Owner::Bob)
    }

    fn owned(&self, owner: Owner) -> Vec<&str> {
        self.registers
            .iter()
            .filter(|r| r.owner == owner && r.kind == RegisterKind::Work)
            .map(|r| r.name.as_str())
            .collect()
    }

    pub fn queries_by(&self, party: Party) -> usize {
        let rounds: usize = self
            .rounds
            .iter()
            .filter(|r| r.party == party)
            .flat_map(|r| &r.program)
            .map(Op::query_count)
            .sum();
        let fin = match party {
            Party::A => &self.final_a,
            Party::B => &self.final_b,
        };
        rounds + fin.program.iter().map(Op::query_count).sum::<usize>()
    }

    pub fn final_a_queries(&self) -> usize {
        self.final_a.program.iter().map(Op::query_count).sum()
    }

    pub fn layout(&self) -> Result<RegisterLayout> {
        RegisterLayout::new(self.registers.iter().map(ProtocolRegister::decl).collect(), Some(self.oracle.clone()))
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let v = &mut report.violations;
        let mut names = HashSet::new();
        for r in &self.registers {
            if !names.insert(r.name.as_str()) {
                v.push(Issue::new("register", format!("duplicate register `{}`", r.name)));
            }
            if r.dim < 2 {
                v.push(Issue::new("dimension", format!("register `{}` has dimension {}", r.name, r.dim)));
            }
            if let Some(g) = &r.group {
                if g.order() != r.dim {
                    v.push(Issue::new("dimension", format!("register `{}` group order differs from dim", r.name)));
                }
            }
            if r.kind == RegisterKind::Message && r.owner != Owner::Bob {
                v.push(Issue::new("ownership", format!("message register `{}` must start with Bob", r.name)));
            }
        }
        if let Err(e) = self.layout() {
            if v.is_empty() {
                v.push(Issue::new("dimension", e.to_string()));
            }
        }

        // Shape: classical rounds, then one quantum message from Bob, last.
        let quantum: Vec<usize> = self
            .rounds
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r.message, Message::Quantum { .. }))
            .map(|(i, _)| i)
            .collect();
        match quantum.as_slice() {
            [i] if *i + 1 == self.rounds.len() => {
                if self.rounds[*i].party != Party::B {
                    v.push(Issue::new("cc1qm-shape", "the quantum message must come from Bob"));
                }
            }
            [] => v.push(Issue::new("cc1qm-shape", "no quantum message")),
            [_] => v.push(Issue::new("cc1qm-shape", "the quantum message must be the last round")),
            _ => v.push(Issue::new("cc1qm-shape", format!("{} quantum messages", quantum.len()))),
        }
        match self.rounds.first() {
            Some(r) if r.party == Party::A && matches!(r.message, Message::Classical { .. }) => {}
            _ => v.push(Issue::new("first-message", "the first message must be classical and from Alice")),
        }

        for party in [Party::A, Party::B] {
            let q = self.queries_by(party);
            if q > self.d {
                v.push(Issue::new("query-budget", format!("party {party:?} makes {q} queries, budget {}", self.d)));
            }
        }
        let fq = self.final_a_queries();
        if self.alice_no_final_query && fq > 0 {
            v.push(Issue::new("alice-final-query", format!("flag set but Alice's final map makes {fq} queries")));
        }
        if !self.alice_no_final_query && fq > 0 {
            report.notices.push(Issue::new(
                "alice-final-query",
                "Alice's final map queries the oracle: outside the attack hypothesis",
            ));
        }

        let message = self.message_register().map(str::to_string);
        let owner_of = |name: &str| self.register(name).map(|r| r.owner);
        let alice_side = |name: &str| owner_of(name) == Some(Owner::Alice) || Some(name) == message.as_deref();
        let v = &mut report.violations;
        for (k, round) in self.rounds.iter().enumerate() {
            let ctx = format!("round {}", k + 1);
            let allowed = |name: &str| match round.party {
                Party::A => owner_of(name) == Some(Owner::Alice),
                Party::B => owner_of(name) == Some(Owner::Bob),
            };
            self.check_program(&round.program, &ctx, &allowed, v);
            match &round.message {
                Message::Classical { register, deliver_to } => {
                    match (self.register(register), self.register(deliver_to)) {
                        (Some(s), Some(r)) => {
                            if s.owner != round.party.owner() || r.owner == round.party.owner() {
                                v.push(Issue::new("ownership", format!("{ctx}: message must go from sender to receiver")));
                            }
                            if s.kind == RegisterKind::Message || r.kind == RegisterKind::Message {
                                v.push(Issue::new("cc1qm-shape", format!("{ctx}: classical message uses the quantum message register")));
                            }
                            if s.dim != r.dim {
                                v.push(Issue::new("dimension", format!("{ctx}: `{register}` and `{deliver_to}` differ in dimension")));
                            }
                        }
                        _ => v.push(Issue::new("register", format!("{ctx}: unknown message register"))),
                    }
                }
                Message::Quantum { register } => match self.register(register) {
                    Some(r) if r.kind == RegisterKind::Message => {}
                    Some(_) => v.push(Issue::new("register", format!("{ctx}: `{register}` is not a message register"))),
                    None => v.push(Issue::new("register", format!("{ctx}: unknown register `{register}`"))),
                },
            }
        }
        self.check_program(&self.final_a.program, "final_A", &alice_side, v);
        let bob_side = |name: &str| owner_of(name) == Some(Owner::Bob) && Some(name) != message.as_deref();
        self.check_program(&self.final_b.program, "final_B", &bob_side, v);
        for (fin, label, side) in [
            (&self.final_a, "final_A", &alice_side as &dyn Fn(&str) -> bool),
            (&self.final_b, "final_B", &bob_side as &dyn Fn(&str) -> bool),
        ] {
            match self.register(&fin.key_register) {
                None => v.push(Issue::new("register", format!("{label}: unknown key register `{}`", fin.key_register))),
                Some(r) => {
                    if !side(&r.name) {
                        v.push(Issue::new("ownership", format!("{label}: key register `{}` not owned", r.name)));
                    }
                    if fin.key_map.len() != r.dim {
                        v.push(Issue::new("key-map", format!("{label}: key map has {} entries for dimension {}", fin.key_map.len(), r.dim)));
                    }
                }
            }
            if fin.key_map.iter().any(|k| matches!(k, Some(b) if *b > 1)) {
                v.push(Issue::new("key-map", format!("{label}: keys must be 0, 1 or null")));
            }
        }
        report
    }

    fn check_program(&self, ops: &[Op], ctx: &str, allowed: &dyn Fn(&str) -> bool, v: &mut Vec<Issue>) {
        for op in ops {
            self.check_op(op, ctx, allowed, v);
        }
    }

    fn check_op(&self, op: &Op, ctx: &str, allowed: &dyn Fn(&str) -> bool, v: &mut Vec<Issue>) {
        let regs = op.registers();
        for name in &regs {
            match self.register(name) {
                None => {
                    v.push(Issue::new("register", format!("{ctx}: unknown register `{name}`")));
                    return;
                }
                Some(_) if !allowed(name) => {
                    v.push(Issue::new("ownership", format!("{ctx}: `{name}` is not accessible here")));
                }
                Some(_) => {}
            }
        }
        let dim = |name: &str| self.register(name).map_or(0, |r| r.dim);
        let group = |name: &str| self.register(name).map(|r| r.decl().group());
        let mut problems = Vec::new();
        let mut bad = |detail: String| problems.push(Issue::new("dimension", format!("{ctx}: {detail}")));
        match op {
            Op::Hadamard { target } => {
                if !group(target).is_some_and(|g| g.is_elementary_2()) {
                    bad(format!("hadamard needs an elementary 2-group register, `{target}` is not"));
                }
            }
            Op::Fourier { .. } => {}
            Op::Permutation { targets, map } => {
                let n: usize = targets.iter().map(|t| dim(t)).product();
                let mut seen = vec![false; n];
                let ok = map.len() == n && map.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true));
                if !ok {
                    bad(format!("permutation map is not a bijection on {n} values"));
                }
                if targets.len() > MAX_OPERANDS || has_duplicates(targets) {
                    bad("permutation targets must be distinct and at most 8".into());
                }
            }
            Op::AddConstant { target, value, .. } => {
                if *value >= dim(target) {
                    bad(format!("constant {value} out of range for `{target}`"));
                }
            }
            Op::ControlledAdd { control, target, .. } => {
                if control == target || dim(control) > dim(target) {
                    bad(format!("cannot add `{control}` into `{target}`"));
                }
            }
            Op::Controlled { control, value, then } => {
                if *value >= dim(control) {
                    bad(format!("control value {value} out of range for `{control}`"));
                }
                for inner in then {
                    if inner.registers().contains(&control.as_str()) {
                        bad(format!("controlled block writes its own control `{control}`"));
                    }
                }
                if then.iter().any(|inner| inner.query_count() > 0) {
                    problems.push(Issue::new("cc1qm-shape", format!("{ctx}: oracle queries cannot be controlled")));
                }
                v.append(&mut problems);
                for inner in then {
                    self.check_op(inner, ctx, allowed, v);
                }
                return;
            }
            Op::Matrix { targets, rows } => {
                let n: usize = targets.iter().map(|t| dim(t)).product();
                if rows.len() != n || rows.iter().any(|r| r.len() != n) || has_duplicates(targets) {
                    bad(format!("matrix must be {n}x{n} over distinct targets"));
                } else if crate::qstate::unitarity_deviation(&rows_to_matrix(rows)) > 1e-10 {
                    bad("matrix is not unitary".into());
                }
            }
            Op::Query { x, y, .. } => {
                if dim(x) != self.oracle.domain_size {
                    bad(format!("query input `{x}` must have dimension {}", self.oracle.domain_size));
                }
                if group(y).as_ref() != Some(&self.oracle.range) || x == y {
                    bad(format!("query output `{y}` must carry the oracle range {}", self.oracle.range));
                }
            }
        }
        v.append(&mut problems);
    }

    /// [`Error::Validation`] with every violation when the protocol is not valid.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(report.violations))
        }
    }
}

fn has_duplicates(v: &[String]) -> bool {
    let set: HashSet<&String> = v.iter().collect();
    set.len() != v.len()
}

fn rows_to_matrix(rows: &[Vec<[f64; 2]>]) -> Matrix {
    let n = rows.len();
    Matrix::from_fn(n, n, |r, c| Complex64::new(rows[r][c][0], rows[r][c][1]))
}

// ---------------------------------------------------------------------------
// Gate application

fn work_index(s: &QuantumState, name: &str) -> Result<usize> {
    s.layout().position(name)
}

/// Applies `f(reads, writes)` to the computational values of registers.
fn apply_digit_map(
    s: &mut QuantumState,
    reads: &[usize],
    writes: &[usize],
    controls: &[(usize, usize)],
    f: &dyn Fn(&[usize], &mut [usize]),
) -> Result<()> {
    let mut quantum_controls = Vec::new();
    for &(i, v) in controls {
        match s.work[i] {
            Slot::Classical(c) if c != v => return Ok(()),
            Slot::Classical(_) => {}
            Slot::Quantum => quantum_controls.push((i, v)),
        }
    }
    let value = |s: &QuantumState, i: usize| match s.work[i] {
        Slot::Classical(v) => Some(v),
        Slot::Quantum => None,
    };
    if quantum_controls.is_empty() && reads.iter().chain(writes).all(|&i| value(s, i).is_some()) {
        let r: Vec<usize> = reads.iter().map(|&i| value(s, i).expect("classical")).collect();
        let mut w: Vec<usize> = writes.iter().map(|&i| value(s, i).expect("classical")).collect();
        f(&r, &mut w);
        for (&i, &v) in writes.iter().zip(&w) {
            s.work[i] = Slot::Classical(v);
        }
        return Ok(());
    }
    for &i in writes {
        s.promote_work(i)?;
    }
    let g = s.geometry();
    let read_src: Vec<(Option<usize>, usize)> = reads
        .iter()
        .map(|&i| match s.work[i] {
            Slot::Classical(v) => (None, v),
            Slot::Quantum => (g.work_pos[i], 0),
        })
        .collect();
    let write_pos: Vec<usize> = writes.iter().map(|&i| g.work_pos[i].expect("promoted")).collect();
    let ctrl_pos: Vec<(usize, usize)> =
        quantum_controls.iter().map(|&(i, v)| (g.work_pos[i].expect("quantum"), v)).collect();
    let one = Complex64::new(1.0, 0.0);
    s.apply_index_map(|i| {
        if ctrl_pos.iter().any(|&(p, v)| g.digit(i, p) != v) {
            return (i, one);
        }
        let mut r = [0usize; MAX_OPERANDS];
        let mut w = [0usize; MAX_OPERANDS];
        for (k, &(pos, v)) in read_src.iter().enumerate() {
            r[k] = pos.map_or(v, |p| g.digit(i, p));
        }
        for (k, &p) in write_pos.iter().enumerate() {
            w[k] = g.digit(i, p);
        }
        let old = w;
        f(&r[..read_src.len()], &mut w[..write_pos.len()]);
        let mut j = i;
        for (k, &p) in write_pos.iter().enumerate() {
            j = g.replace(j, p, old[k], w[k]);
        }
        (j, one)
    });
    s.compact();
    Ok(())
}

/// Applies one op; `controls` are `(work index, value)` pairs from enclosing blocks.
pub(crate) fn apply_op(s: &mut QuantumState, op: &Op, controls: &[(usize, usize)]) -> Result<()> {
    match op {
        Op::Hadamard { target } | Op::Fourier { target, .. } => {
            let i = work_index(s, target)?;
            let g = s.layout().registers()[i].group();
            if matches!(op, Op::Hadamard { .. }) && !g.is_elementary_2() {
                return Err(Error::Domain(format!("hadamard on non-binary register `{target}`")));
            }
            let mut f = fourier_matrix(&g);
            if let Op::Fourier { inverse: true, .. } = op {
                f = f.adjoint();
            }
            s.apply_unitary_targets(&f, &[Target::Work(i)], controls)
        }
        Op::Matrix { targets, rows } => {
            let t = targets.iter().map(|n| work_index(s, n).map(Target::Work)).collect::<Result<Vec<_>>>()?;
            s.apply_unitary_targets(&rows_to_matrix(rows), &t, controls)
        }
        Op::Permutation { targets, map } => {
            let idx = targets.iter().map(|n| work_index(s, n)).collect::<Result<Vec<_>>>()?;
            let dims: Vec<usize> = idx.iter().map(|&i| s.layout().registers()[i].dim).collect();
            let total: usize = dims.iter().product();
            if map.len() != total {
                return Err(Error::DimensionMismatch(format!("permutation over {total} values has {} entries", map.len())));
            }
            apply_digit_map(s, &[], &idx, controls, &|_, w| {
                let joint = w.iter().zip(&dims).fold(0, |acc, (&d, &q)| acc * q + d);
                let mut out = map[joint];
                for (slot, &q) in w.iter_mut().zip(&dims).rev() {
                    *slot = out % q;
                    out /= q;
                }
            })
        }
        Op::AddConstant { target, value, subtract } => {
            let i = work_index(s, target)?;
            let g = s.layout().registers()[i].group();
            let (v, sub) = (*value, *subtract);
            apply_digit_map(s, &[], &[i], controls, &|_, w| {
                w[0] = if sub { g.sub_index(w[0], v) } else { g.add_index(w[0], v) }
            })
        }
        Op::ControlledAdd { control, target, subtract } => {
            let c = work_index(s, control)?;
            let t = work_index(s, target)?;
            let g = s.layout().registers()[t].group();
            let sub = *subtract;
            apply_digit_map(s, &[c], &[t], controls, &|r, w| {
                w[0] = if sub { g.sub_index(w[0], r[0]) } else { g.add_index(w[0], r[0]) }
            })
        }
        Op::Controlled { control, value, then } => {
            let c = work_index(s, control)?;
            let mut inner = controls.to_vec();
            inner.push((c, *value));
            for op in then {
                apply_op(s, op, &inner)?;
            }
            Ok(())
        }
        Op::Query { x, y, inverse } => {
            if !controls.is_empty() {
                return Err(Error::Domain("oracle queries cannot be controlled".into()));
            }
            s.oracle_query(x, y, *inverse)
        }
    }
}

pub fn run_program(s: &mut QuantumState, ops: &[Op]) -> Result<()> {
    for op in ops {
        apply_op(s, op, &[])?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Execution

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().filter(|&&p| p > ZERO_THRESHOLD).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= ZERO_THRESHOLD {
            continue;
        }
        last = i;
        if u < p {
            return i;
        }
        u -= p;
    }
    last
}

pub fn key_distribution(s: &QuantumState, fin: &FinalMap) -> Result<KeyDistribution> {
    let probs = s.probabilities(&fin.key_register)?;
    let mut out = [0.0; 3];
    for (v, p) in probs.iter().enumerate() {
        let k = Key::from_bit(fin.key_map.get(v).copied().flatten());
        out[k.index()] += p;
    }
    Ok(out)
}

/// Projects the key register onto the values that map to `key`.
pub fn project_key(s: &mut QuantumState, fin: &FinalMap, key: Key) -> Result<f64> {
    let dim = fin.key_map.len();
    let mask: Vec<bool> = (0..dim).map(|v| Key::from_bit(fin.key_map[v]) == key).collect();
    let p = s.project_values(&fin.key_register, &mask)?;
    s.compact();
    Ok(p)
}

/// Fresh state for `p`: purified oracle, or every cell fixed to `h`.
pub fn initial_state(p: &Protocol, h: Option<&[usize]>) -> Result<QuantumState> {
    let layout = Arc::new(p.layout()?);
    match h {
        Some(h) => QuantumState::with_oracle_table(layout, h),
        None => Ok(QuantumState::new(layout)),
    }
}

/// Runs a classical round; `choose` picks the message value from its distribution.
fn classical_round(
    s: &mut QuantumState,
    round: &Round,
    choose: impl FnOnce(&[f64]) -> usize,
) -> Result<(usize, f64)> {
    run_program(s, &round.program)?;
    let Message::Classical { register, deliver_to } = &round.message else {
        return Err(Error::Domain("expected a classical round".into()));
    };
    let probs = s.probabilities(register)?;
    let value = choose(&probs);
    let prob = s.postselect(register, value)?;
    apply_op(s, &Op::add_constant(deliver_to, value), &[])?;
    Ok((value, prob))
}

/// Purified state after every classical round, conditioned on transcript `t`.
pub fn condition_on_transcript(p: &Protocol, t: &[usize], h: Option<&[usize]>) -> Result<(QuantumState, f64)> {
    p.ensure_valid()?;
    let classical: Vec<&Round> =
        p.rounds.iter().filter(|r| matches!(r.message, Message::Classical { .. })).collect();
    if t.len() != classical.len() {
        return Err(Error::Domain(format!("transcript has {} symbols, protocol has {} classical rounds", t.len(), classical.len())));
    }
    let mut s = initial_state(p, h)?;
    let mut prob = 1.0;
    for (round, &value) in classical.iter().zip(t) {
        prob *= classical_round(&mut s, round, |_| value)?.1;
    }
    Ok((s, prob))
}

/// One term of Bob's last-message ensemble: his remaining registers measured
/// in the computational basis.
#[derive(Clone, Debug)]
pub struct Component {
    pub prob: f64,
    pub bob_outcome: Vec<(String, usize)>,
    /// Reduced state of the message register.
    pub rho: DensityOperator,
    /// The message as a pure state, when it is one.
    pub pure: Option<Vec<Complex64>>,
    /// The joint state with Bob's registers measured, before Alice's final map.
    pub state: QuantumState,
}

#[derive(Clone, Debug)]
pub struct ExecutionTrace {
    pub transcript: Vec<usize>,
    pub transcript_prob: f64,
    pub k_b_distribution: KeyDistribution,
    pub k_b: Key,
    /// Ensemble conditioned on `k_b`; probabilities sum to one.
    pub components: Vec<Component>,
    pub realized: usize,
    pub k_a_distribution: KeyDistribution,
    pub k_a: Key,
}

impl ExecutionTrace {
    pub fn realized_component(&self) -> &Component {
        &self.components[self.realized]
    }
}

/// Decomposes the message into Bob's computational-basis ensemble.
pub fn message_ensemble(p: &Protocol, s: &QuantumState) -> Result<Vec<Component>> {
    let m = p.message_register().ok_or_else(|| Error::Unsupported("no quantum message".into()))?;
    let bob: Vec<usize> = p
        .bob_registers()
        .iter()
        .map(|n| s.layout().position(n))
        .collect::<Result<_>>()?;
    let g = s.geometry();
    let quantum: Vec<usize> = bob.iter().copied().filter(|&i| s.work[i] == Slot::Quantum).collect();
    let mut joint: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for (k, a) in s.amps.iter().enumerate() {
        let pr = a.norm_sqr();
        if pr == 0.0 {
            continue;
        }
        let key: Vec<usize> = quantum.iter().map(|&i| g.digit(k, g.work_pos[i].expect("quantum"))).collect();
        *joint.entry(key).or_insert(0.0) += pr;
    }
    let total: f64 = joint.values().sum();
    let names: Vec<String> = quantum.iter().map(|&i| s.layout().registers()[i].name.clone()).collect();
    let mut out = Vec::new();
    for (values, mass) in joint {
        let prob = mass / total;
        if prob <= ZERO_THRESHOLD {
            continue;
        }
        let mut c = s.clone();
        for (name, &v) in names.iter().zip(&values) {
            c.postselect(name, v)?;
        }
        let rho = c.partial_trace(&[m])?;
        let pure = if rho.max_eigenvalue() >= 1.0 - 1e-9 {
            let mut probe = c.clone();
            probe.extract_register(m).ok()
        } else {
            None
        };
        let mut bob_outcome: Vec<(String, usize)> = names.iter().cloned().zip(values).collect();
        for &i in &bob {
            if let Slot::Classical(v) = s.work[i] {
                bob_outcome.push((s.layout().registers()[i].name.clone(), v));
            }
        }
        bob_outcome.sort();
        out.push(Component { prob, bob_outcome, rho, pure, state: c });
    }
    Ok(out)
}

fn run_from<R: Rng + ?Sized>(p: &Protocol, h: Option<&[usize]>, rng: &mut R) -> Result<ExecutionTrace> {
    p.ensure_valid()?;
    let mut s = initial_state(p, h)?;
    let mut transcript = Vec::new();
    let mut transcript_prob = 1.0;
    let last = p.rounds.len() - 1;
    for round in &p.rounds[..last] {
        let (v, pr) = classical_round(&mut s, round, |probs| sample_index(probs, &mut *rng))?;
        transcript.push(v);
        transcript_prob *= pr;
    }
    run_program(&mut s, &p.rounds[last].program)?;
    run_program(&mut s, &p.final_b.program)?;
    let k_b_distribution = key_distribution(&s, &p.final_b)?;
    let k_b = Key::from_index(sample_index(&k_b_distribution, rng));
    project_key(&mut s, &p.final_b, k_b)?;
    let components = message_ensemble(p, &s)?;
    let probs: Vec<f64> = components.iter().map(|c| c.prob).collect();
    let realized = sample_index(&probs, rng);
    let mut a = components[realized].state.clone();
    run_program(&mut a, &p.final_a.program)?;
    let k_a_distribution = key_distribution(&a, &p.final_a)?;
    let k_a = Key::from_index(sample_index(&k_a_distribution, rng));
    Ok(ExecutionTrace {
        transcript,
        transcript_prob,
        k_b_distribution,
        k_b,
        components,
        realized,
        k_a_distribution,
        k_a,
    })
}

/// Executes `p` against the purified oracle, sampling every measurement.
pub fn run_purified<R: Rng + ?Sized>(p: &Protocol, rng: &mut R) -> Result<ExecutionTrace> {
    run_from(p, None, rng)
}

/// Executes `p` against the fixed function table `h`.
pub fn run_concrete<R: Rng + ?Sized>(p: &Protocol, h: &[usize], rng: &mut R) -> Result<ExecutionTrace> {
    run_from(p, Some(h), rng)
}

/// Key distribution of Alice's final map on `state` with `message` loaded into
/// the (empty) message register.
pub fn alice_final(p: &Protocol, state: &QuantumState, message: &[Complex64]) -> Result<KeyDistribution> {
    let m = p.message_register().ok_or_else(|| Error::Unsupported("no quantum message".into()))?;
    let mut s = state.clone();
    s.load_register(m, message)?;
    run_program(&mut s, &p.final_a.program)?;
    key_distribution(&s, &p.final_a)
}

/// One transcript branch of an exact enumeration.
#[derive(Clone, Debug)]
pub struct Branch {
    pub transcript: Vec<usize>,
    pub prob: f64,
    /// `joint[k_A][k_B]`, conditioned on the transcript.
    pub joint: [[f64; 3]; 3],
    /// State after each classical round, when requested.
    pub round_states: Vec<QuantumState>,
    /// State after Bob's last program and final map, before his key is measured.
    pub final_state: Option<QuantumState>,
}

/// Branches over every message outcome with probability above the zero threshold.
pub fn enumerate_branches(p: &Protocol, h: Option<&[usize]>, keep_states: bool) -> Result<Vec<Branch>> {
    p.ensure_valid()?;
    let s = initial_state(p, h)?;
    let mut out = Vec::new();
    let mut stack = vec![(s, Vec::new(), 1.0, Vec::new())];
    let last = p.rounds.len() - 1;
    while let Some((s, t, prob, states)) = stack.pop() {
        let k = t.len();
        if k == last {
            let mut f = s;
            run_program(&mut f, &p.rounds[last].program)?;
            run_program(&mut f, &p.final_b.program)?;
            let kb = key_distribution(&f, &p.final_b)?;
            let mut joint = [[0.0; 3]; 3];
            for key in Key::ALL {
                if kb[key.index()] <= ZERO_THRESHOLD {
                    continue;
                }
                let mut a = f.clone();
                project_key(&mut a, &p.final_b, key)?;
                run_program(&mut a, &p.final_a.program)?;
                let ka = key_distribution(&a, &p.final_a)?;
                for ak in Key::ALL {
                    joint[ak.index()][key.index()] = kb[key.index()] * ka[ak.index()];
                }
            }
            out.push(Branch {
                transcript: t,
                prob,
                joint,
                round_states: states,
                final_state: keep_states.then_some(f),
            });
            continue;
        }
        let round = &p.rounds[k];
        let mut pre = s;
        run_program(&mut pre, &round.program)?;
        let Message::Classical { register, .. } = &round.message else { unreachable!("validated") };
        let probs = pre.probabilities(register)?;
        for (v, &pv) in probs.iter().enumerate().rev() {
            if pv <= ZERO_THRESHOLD {
                continue;
            }
            let mut next = pre.clone();
            let no_program = Round { program: Vec::new(), ..round.clone() };
            let (_, pr) = classical_round(&mut next, &no_program, |_| v)?;
            let mut t2 = t.clone();
            t2.push(v);
            let mut st = states.clone();
            if keep_states {
                st.push(next.clone());
            }
            stack.push((next, t2, prob * pr, st));
        }
    }
    out.sort_by(|a, b| a.transcript.cmp(&b.transcript));
    Ok(out)
}

/// Joint distribution of (transcript, k_A, k_B).
pub type OutcomeTable = HashMap<(Vec<usize>, Key, Key), f64>;

pub fn outcome_table(branches: &[Branch]) -> OutcomeTable {
    let mut out = OutcomeTable::new();
    for b in branches {
        for ka in Key::ALL {
            for kb in Key::ALL {
                let pr = b.prob * b.joint[ka.index()][kb.index()];
                if pr > ZERO_THRESHOLD {
                    *out.entry((b.transcript.clone(), ka, kb)).or_insert(0.0) += pr;
                }
            }
        }
    }
    out
}

pub fn total_variation(a: &OutcomeTable, b: &OutcomeTable) -> f64 {
    let keys: HashSet<_> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0
}

/// Uniform average of the concrete outcome tables over every function table.
pub fn averaged_concrete_table(p: &Protocol) -> Result<OutcomeTable> {
    let m = p
        .oracle
        .num_functions()
        .filter(|&m| m <= 1 << 16)
        .ok_or_else(|| Error::Unsupported("too many oracles to enumerate".into()))?;
    let mut out = OutcomeTable::new();
    for hi in 0..m {
        let h = p.oracle.function(hi);
        for (k, v) in outcome_table(&enumerate_branches(p, Some(&h), false)?) {
            *out.entry(k).or_insert(0.0) += v / m as f64;
        }
    }
    Ok(out)
}

/// Worst-case probability, over every oracle and transcript, that the keys
/// disagree or Alice aborts.
pub fn correctness_failure(p: &Protocol) -> Result<f64> {
    let m = p
        .oracle
        .num_functions()
        .filter(|&m| m <= 1 << 16)
        .ok_or_else(|| Error::Unsupported("too many oracles to enumerate".into()))?;
    let mut worst: f64 = 0.0;
    for hi in 0..m {
        let h = p.oracle.function(hi);
        for b in enumerate_branches(p, Some(&h), false)? {
            let ok = b.joint[Key::Zero.index()][Key::Zero.index()] + b.joint[Key::One.index()][Key::One.index()];
            worst = worst.max(1.0 - ok);
        }
    }
    Ok(worst)
}

/// Largest difference in Bob's key statistics between measuring his key before
/// and after Alice's final map runs, over every transcript for oracle `h`.
pub fn no_signaling_gap(p: &Protocol, h: &[usize]) -> Result<f64> {
    let mut gap: f64 = 0.0;
    for b in enumerate_branches(p, Some(h), true)? {
        let f = b.final_state.expect("kept");
        let before = key_distribution(&f, &p.final_b)?;
        let mut after_state = f.clone();
        run_program(&mut after_state, &p.final_a.program)?;
        let after = key_distribution(&after_state, &p.final_b)?;
        for k in 0..3 {
            gap = gap.max((before[k] - after[k]).abs());
        }
        // Bob's measurement statistics on his remaining registers.
        let e1 = message_ensemble(p, &f)?;
        let e2 = message_ensemble(p, &after_state)?;
        if e1.len() != e2.len() {
            return Ok(1.0);
        }
        for (c1, c2) in e1.iter().zip(&e2) {
            if c1.bob_outcome != c2.bob_outcome {
                return Ok(1.0);
            }
            gap = gap.max((c1.prob - c2.prob).abs());
        }
    }
    Ok(gap)
}
