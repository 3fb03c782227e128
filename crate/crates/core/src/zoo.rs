//! Concrete protocol instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::GroupSpec;
use crate::attack::{full_attack, AttackOptions};
use crate::error::{Error, Result};
use crate::oracle::OracleSpec;
use crate::protocol::{FinalMap, Key, Message, Op, Party, Protocol, ProtocolRegister, Round};
use crate::qstate::RegisterKind;

fn reg(owner: &str, name: &str, dim: usize, g: Option<&GroupSpec>) -> ProtocolRegister {
    let r = match owner {
        "A" => ProtocolRegister::alice(name, dim),
        "B" => ProtocolRegister::bob(name, dim),
        _ => ProtocolRegister::message(name, dim),
    };
    match g {
        Some(g) => r.with_group(g.clone()),
        None => r,
    }
}

fn ygroup(g: &GroupSpec, owner: &str, name: &str) -> ProtocolRegister {
    reg(owner, name, g.order(), Some(g))
}

fn classical(party: Party, program: Vec<Op>, from: &str, to: &str) -> Round {
    Round { party, program, message: Message::Classical { register: from.into(), deliver_to: to.into() } }
}

fn quantum(program: Vec<Op>, m: &str) -> Round {
    Round { party: Party::B, program, message: Message::Quantum { register: m.into() } }
}

/// Key `v` for `v ∈ {0, 1}`, abort otherwise.
fn bit_map(dim: usize) -> Vec<Option<u8>> {
    (0..dim).map(|v| (v < 2).then_some(v as u8)).collect()
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Domain(format!("domain size {n} must be at least 2")));
    }
    Ok(())
}

/// Alice announces a uniformly random `x*` after querying it; Bob queries the
/// same point. Both keys are the low bit of `h(x*)`. Bob's quantum message is
/// a uniformly random pad unrelated to the key.
pub fn announced_query_protocol(n: usize, g: &GroupSpec) -> Result<Protocol> {
    check_n(n)?;
    Ok(Protocol {
        name: "announced".into(),
        registers: vec![
            reg("A", "ax", n, None),
            ygroup(g, "A", "ay"),
            reg("B", "bx", n, None),
            ygroup(g, "B", "by"),
            ygroup(g, "B", "be"),
            ygroup(g, "M", "M"),
        ],
        oracle: OracleSpec::new(n, g.clone())?,
        rounds: vec![
            classical(Party::A, vec![Op::fourier("ax"), Op::query("ax", "ay")], "ax", "bx"),
            quantum(vec![Op::query("bx", "by"), Op::fourier("be"), Op::controlled_add("be", "M")], "M"),
        ],
        final_a: FinalMap::lsb("ay", g.order()),
        final_b: FinalMap::lsb("by", g.order()),
        d: 1,
        alice_no_final_query: true,
    })
}

/// Puzzle-style agreement: Alice queries `P` consecutive points starting at a
/// random offset she announces; Bob queries one of them at random and
/// announces which; his key bit travels padded with `h` at that point.
pub fn merkle_ka_protocol(n: usize, g: &GroupSpec, puzzles: usize) -> Result<Protocol> {
    check_n(n)?;
    if puzzles < 2 || puzzles > n {
        return Err(Error::Domain(format!("puzzle count {puzzles} must lie in 2..={n}")));
    }
    let ay: Vec<String> = (0..puzzles).map(|i| format!("ay{i}")).collect();
    let mut registers = vec![reg("A", "ao", n, None)];
    registers.extend(ay.iter().map(|r| ygroup(g, "A", r)));
    registers.extend([
        reg("A", "ai", puzzles, None),
        reg("B", "bo", n, None),
        reg("B", "bi", puzzles, None),
        ygroup(g, "B", "by"),
        reg("B", "bk", 2, None),
        ygroup(g, "M", "M"),
    ]);
    let mut alice = vec![Op::fourier("ao")];
    for (i, r) in ay.iter().enumerate() {
        if i == 0 {
            alice.push(Op::query("ao", r));
        } else {
            alice.extend([
                Op::add_constant("ao", i),
                Op::query("ao", r),
                Op::AddConstant { target: "ao".into(), value: i, subtract: true },
            ]);
        }
    }
    let final_program = ay
        .iter()
        .enumerate()
        .map(|(i, r)| Op::controlled("ai", i, vec![Op::controlled_sub(r, "M")]))
        .collect();
    Ok(Protocol {
        name: "merkle".into(),
        registers,
        oracle: OracleSpec::new(n, g.clone())?,
        rounds: vec![
            classical(Party::A, alice, "ao", "bo"),
            classical(
                Party::B,
                vec![Op::fourier("bi"), Op::controlled_add("bi", "bo"), Op::query("bo", "by")],
                "bi",
                "ai",
            ),
            quantum(vec![Op::hadamard("bk"), Op::controlled_add("bk", "M"), Op::controlled_add("by", "M")], "M"),
        ],
        final_a: FinalMap { program: final_program, key_register: "M".into(), key_map: bit_map(g.order()) },
        final_b: FinalMap { program: Vec::new(), key_register: "bk".into(), key_map: bit_map(2) },
        d: puzzles,
        alice_no_final_query: true,
    })
}

/// No oracle use; both keys are always 0.
pub fn constant_key_protocol(n: usize, g: &GroupSpec) -> Result<Protocol> {
    Ok(Protocol {
        name: "constant-key".into(),
        registers: vec![reg("A", "a0", 2, None), reg("B", "b0", 2, None), reg("M", "M", 2, None)],
        oracle: OracleSpec::new(n, g.clone())?,
        rounds: vec![classical(Party::A, Vec::new(), "a0", "b0"), quantum(Vec::new(), "M")],
        final_a: FinalMap { program: Vec::new(), key_register: "a0".into(), key_map: vec![Some(0); 2] },
        final_b: FinalMap { program: Vec::new(), key_register: "b0".into(), key_map: vec![Some(0); 2] },
        d: 0,
        alice_no_final_query: true,
    })
}

/// Bob queries a random `x` and sends `|x⟩`; Alice queries it after the last
/// message. Outside the attack's hypothesis.
pub fn trivial_last_message_protocol(n: usize, g: &GroupSpec) -> Result<Protocol> {
    check_n(n)?;
    Ok(Protocol {
        name: "trivial-last-message".into(),
        registers: vec![
            reg("A", "a0", 2, None),
            ygroup(g, "A", "ay"),
            reg("B", "b0", 2, None),
            reg("B", "bx", n, None),
            ygroup(g, "B", "by"),
            reg("M", "M", n, None),
        ],
        oracle: OracleSpec::new(n, g.clone())?,
        rounds: vec![
            classical(Party::A, Vec::new(), "a0", "b0"),
            quantum(vec![Op::fourier("bx"), Op::query("bx", "by"), Op::controlled_add("bx", "M")], "M"),
        ],
        final_a: FinalMap { program: vec![Op::query("M", "ay")], key_register: "ay".into(), key_map: FinalMap::lsb("ay", g.order()).key_map },
        final_b: FinalMap::lsb("by", g.order()),
        d: 1,
        alice_no_final_query: false,
    })
}

/// A one-bit public-key scheme written as register programs. Alice's
/// registers hold the key pair; Bob's hold the public key copy, the plaintext
/// bit and his scratch space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpkeScheme {
    pub name: String,
    pub oracle: OracleSpec,
    pub registers: Vec<ProtocolRegister>,
    /// Alice's key generation; leaves the public key in `pk_register`.
    pub gen: Vec<Op>,
    pub pk_register: String,
    /// Bob's copy of the public key.
    pub bob_pk_register: String,
    /// Plaintext bit, owned by Bob.
    pub plaintext_register: String,
    /// Bob's encryption of the plaintext into the message register.
    pub enc: Vec<Op>,
    pub ciphertext_register: String,
    /// Alice's decryption; the plaintext is read from `dec_output`.
    pub dec: Vec<Op>,
    pub dec_output: String,
    pub dec_map: Vec<Option<u8>>,
    pub dec_queries_oracle: bool,
    pub queries: usize,
}

/// `pk = r`, `sk = (r, h(r))`; `Enc(pk, m) = |m + h(r)⟩`; `Dec` subtracts the
/// stored `h(r)`, so decryption makes no query.
pub fn toy_qpke(n: usize, g: &GroupSpec) -> Result<QpkeScheme> {
    check_n(n)?;
    Ok(QpkeScheme {
        name: "qpke-toy".into(),
        oracle: OracleSpec::new(n, g.clone())?,
        registers: vec![
            reg("A", "ar", n, None),
            ygroup(g, "A", "as"),
            reg("B", "bpk", n, None),
            ygroup(g, "B", "by"),
            reg("B", "bk", 2, None),
            ygroup(g, "M", "M"),
        ],
        gen: vec![Op::fourier("ar"), Op::query("ar", "as")],
        pk_register: "ar".into(),
        bob_pk_register: "bpk".into(),
        plaintext_register: "bk".into(),
        enc: vec![Op::query("bpk", "by"), Op::controlled_add("bk", "M"), Op::controlled_add("by", "M")],
        ciphertext_register: "M".into(),
        dec: vec![Op::controlled_sub("as", "M")],
        dec_output: "M".into(),
        dec_map: bit_map(g.order()),
        dec_queries_oracle: false,
        queries: 1,
    })
}

/// The same scheme with `h(r)` recomputed inside decryption.
pub fn toy_qpke_dec_queries(n: usize, g: &GroupSpec) -> Result<QpkeScheme> {
    let mut s = toy_qpke(n, g)?;
    s.name = "qpke-toy-dec-queries".into();
    s.gen = vec![Op::fourier("ar")];
    s.dec = vec![Op::query("ar", "as"), Op::controlled_sub("as", "M")];
    s.dec_queries_oracle = true;
    Ok(s)
}

impl QpkeScheme {
    fn protocol_with(&self, key_prep: Vec<Op>) -> Protocol {
        let mut bob = key_prep;
        bob.extend(self.enc.iter().cloned());
        Protocol {
            name: format!("ka-from-{}", self.name),
            registers: self.registers.clone(),
            oracle: self.oracle.clone(),
            rounds: vec![
                classical(Party::A, self.gen.clone(), &self.pk_register, &self.bob_pk_register),
                quantum(bob, &self.ciphertext_register),
            ],
            final_a: FinalMap {
                program: self.dec.clone(),
                key_register: self.dec_output.clone(),
                key_map: self.dec_map.clone(),
            },
            final_b: FinalMap {
                program: Vec::new(),
                key_register: self.plaintext_register.clone(),
                key_map: bit_map(2),
            },
            d: self.queries,
            alice_no_final_query: !self.dec_queries_oracle,
        }
    }

    pub fn plaintext_dim(&self) -> usize {
        self.registers
            .iter()
            .find(|r| r.name == self.plaintext_register)
            .map_or(0, |r| r.dim)
    }
}

/// Alice publishes `pk`; Bob encrypts a uniformly random bit, which is the key;
/// Alice decrypts.
pub fn ka_from_qpke(s: &QpkeScheme) -> Result<Protocol> {
    if s.plaintext_dim() != 2 || !s.registers.iter().any(|r| r.name == s.ciphertext_register && r.kind == RegisterKind::Message) {
        return Err(Error::Domain("scheme needs a bit plaintext and a message ciphertext register".into()));
    }
    Ok(s.protocol_with(vec![Op::hadamard(&s.plaintext_register)]))
}

/// The reduction's protocol with Bob encrypting the fixed plaintext `m`.
pub fn ka_from_qpke_fixed(s: &QpkeScheme, m: usize) -> Result<Protocol> {
    ka_from_qpke(s)?;
    let prep = if m == 0 { Vec::new() } else { vec![Op::add_constant(&s.plaintext_register, m)] };
    Ok(s.protocol_with(prep))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndCpaReport {
    pub trials: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub aborted: usize,
}

/// Chosen-plaintext game with messages `m_0 = 0`, `m_1 = 1`: the challenger
/// encrypts `m_b` for a random bit `b` and the attack's key guess is the
/// adversary's answer. Abort counts as a loss.
pub fn ind_cpa_game(s: &QpkeScheme, eps: f64, lambda: f64, trials: usize, seed: u64) -> Result<IndCpaReport> {
    let protocols = [ka_from_qpke_fixed(s, 0)?, ka_from_qpke_fixed(s, 1)?];
    let q = s.oracle.range.order();
    let mut wins = 0;
    let mut aborted = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let b = rng.random_range(0..2usize);
        let h: Vec<usize> = (0..s.oracle.domain_size).map(|_| rng.random_range(0..q)).collect();
        let run = full_attack(&protocols[b], eps, lambda, &h, &AttackOptions::default(), &mut rng)?;
        if run.outcome.aborted {
            aborted += 1;
        }
        if run.outcome.k_e == Key::from_bit(Some(b as u8)) {
            wins += 1;
        }
    }
    Ok(IndCpaReport { trials, wins, win_rate: wins as f64 / trials.max(1) as f64, aborted })
}

pub const BUILTINS: [&str; 6] =
    ["announced", "merkle", "constant-key", "trivial-last-message", "qpke-toy", "qpke-toy-dec-queries"];

/// Canonical builtin name; accepts underscores and a few longer aliases.
pub fn resolve_name(name: &str) -> Option<&'static str> {
    let norm = name.trim().to_lowercase().replace('_', "-");
    let canonical = match norm.as_str() {
        "announced-query" => "announced",
        "merkle-ka" => "merkle",
        "ka-from-qpke-toy" | "ka-from-qpke" => "qpke-toy",
        "ka-from-qpke-toy-dec-queries" => "qpke-toy-dec-queries",
        other => other,
    };
    BUILTINS.iter().copied().find(|b| *b == canonical)
}

/// Builtin protocol by name at domain size `n` over `g`.
pub fn builtin(name: &str, n: usize, g: &GroupSpec) -> Result<Protocol> {
    match resolve_name(name).unwrap_or(name) {
        "announced" => announced_query_protocol(n, g),
        "merkle" => merkle_ka_protocol(n, g, 2),
        "constant-key" => constant_key_protocol(n, g),
        "trivial-last-message" => trivial_last_message_protocol(n, g),
        "qpke-toy" => ka_from_qpke(&toy_qpke(n, g)?),
        "qpke-toy-dec-queries" => ka_from_qpke(&toy_qpke_dec_queries(n, g)?),
        _ => Err(Error::Domain(format!("unknown builtin protocol `{name}`; known: {}", BUILTINS.join(", ")))),
    }
}
