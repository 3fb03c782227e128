//! Experiment runner and command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::GroupSpec;
use crate::attack::{check_inequalities, full_attack, AttackOptions, AttackRun};
use crate::circuit::{equivalence_gap, random_circuit, CircuitFamily};
use crate::error::{Error, Result};
use crate::learner::{default_cap, learn, LearnerOutcome};
use crate::oracle::{OracleSpec, PartialOracle};
use crate::pcc::{recheck_hit, search_trials, summarize_search, HitDump, SearchConfig};
use crate::protocol::{run_concrete, FinalMap, Key, Message, Op, Party, Protocol};
use crate::qstate::{QuantumState, StateDump};
use crate::zoo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Attack,
    LearnerOnly,
    PccSearch,
    OracleEquivalence,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DumpPolicy {
    None,
    #[default]
    ConjectureRelevant,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub summary: Option<PathBuf>,
    #[serde(default)]
    pub states: Option<PathBuf>,
}

impl OutputConfig {
    pub fn csv_path(&self) -> PathBuf {
        self.csv.clone().unwrap_or_else(|| self.dir.join("trials.csv"))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.summary.clone().unwrap_or_else(|| self.dir.join("summary.json"))
    }

    pub fn states_dir(&self) -> PathBuf {
        self.states.clone().unwrap_or_else(|| self.dir.join("states"))
    }
}

fn default_group() -> Vec<usize> {
    vec![2]
}

fn default_eps() -> Vec<f64> {
    vec![0.05]
}

fn default_lambda() -> f64 {
    0.05
}

fn default_delta() -> f64 {
    0.1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Builtin protocol name or path to a protocol JSON file.
    #[serde(default)]
    pub protocol: Option<String>,
    /// Factor list of the oracle range.
    #[serde(default)]
    pub group: Option<Vec<usize>>,
    #[serde(rename = "N", default)]
    pub n: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub trials: usize,
    pub seed: u64,
    pub output: OutputConfig,
    #[serde(default)]
    pub force_simulated_oracle: bool,
    /// Learner cap; `⌈d/(λε)⌉` when absent.
    #[serde(default)]
    pub cap: Option<usize>,
    /// Record per-trial seconds and wall time; when off both are written as 0
    /// so reports are byte-identical across runs.
    #[serde(default = "yes")]
    pub timing: bool,
    #[serde(default)]
    pub dump: DumpPolicy,
    /// Lightness bound for `pcc-search`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Query budget for `pcc-search` (default 2) and `oracle-equivalence` (default 3).
    #[serde(default)]
    pub d: Option<usize>,
}

/// A config that passed validation, with its protocol loaded.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub protocol: Option<Protocol>,
    pub oracle: OracleSpec,
}

fn load_protocol(spec: &str, n: Option<usize>, group: Option<&[usize]>) -> std::result::Result<Protocol, String> {
    let g = GroupSpec::new(group.map_or_else(default_group, <[usize]>::to_vec)).map_err(|e| e.to_string())?;
    if zoo::resolve_name(spec).is_some() {
        return zoo::builtin(spec, n.unwrap_or(8), &g).map_err(|e| e.to_string());
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(format!(
            "protocol `{spec}` is neither a builtin ({}) nor an existing file",
            zoo::BUILTINS.join(", ")
        ));
    }
    let text = fs::read_to_string(path).map_err(|e| format!("reading {spec}: {e}"))?;
    let p = Protocol::from_json(&text).map_err(|e| format!("parsing {spec}: {e}"))?;
    if n.is_some_and(|n| n != p.oracle.domain_size) {
        return Err(format!("N = {} conflicts with the protocol file's N = {}", n.unwrap(), p.oracle.domain_size));
    }
    if group.is_some_and(|f| f != p.oracle.range.factors()) {
        return Err(format!("group conflicts with the protocol file's {}", p.oracle.range));
    }
    Ok(p)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config: {e}")]))
    }

    /// Checks every field and loads the protocol; all problems are reported together.
    pub fn validate(&self) -> Result<Experiment> {
        let mut issues = Vec::new();
        if self.trials == 0 {
            issues.push("trials must be at least 1".to_string());
        }
        if self.eps.is_empty() {
            issues.push("eps grid is empty".into());
        }
        for &e in &self.eps {
            if !(e > 0.0 && e < 1.0) {
                issues.push(format!("eps value {e} is outside (0, 1)"));
            }
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            issues.push(format!("lambda {} is outside (0, 1)", self.lambda));
        }
        if self.cap == Some(0) {
            issues.push("cap must be at least 1".into());
        }
        let mut protocol = None;
        let mut oracle = None;
        match self.mode {
            Mode::Attack | Mode::LearnerOnly => match &self.protocol {
                None => issues.push("mode needs a protocol".into()),
                Some(spec) => match load_protocol(spec, self.n, self.group.as_deref()) {
                    Err(e) => issues.push(e),
                    Ok(p) => {
                        let report = p.validate();
                        issues.extend(report.violations.iter().map(|v| format!("protocol {}: {}", v.code, v.detail)));
                        if p.message_register().is_none() {
                            issues.push("protocol has no quantum message".into());
                        }
                        if self.mode == Mode::Attack && !p.alice_no_final_query && !self.force_simulated_oracle {
                            issues.push(format!(
                                "`{}` is outside the attack hypothesis (Alice queries after the last message); set force_simulated_oracle to run it",
                                p.name
                            ));
                        }
                        oracle = Some(p.oracle.clone());
                        protocol = Some(p);
                    }
                },
            },
            Mode::PccSearch | Mode::OracleEquivalence => {
                if self.protocol.is_some() {
                    issues.push("protocol is not used by this mode".into());
                }
                let n = self.n.unwrap_or(4);
                match GroupSpec::new(self.group.clone().unwrap_or_else(default_group))
                    .and_then(|g| OracleSpec::new(n, g))
                {
                    Err(e) => issues.push(e.to_string()),
                    Ok(spec) => {
                        if spec.num_functions().is_none_or(|m| m > 1 << 16) {
                            issues.push(format!("|Y|^N for N = {n} over {} exceeds 2^16 oracle tables", spec.range));
                        }
                        if n < 2 {
                            issues.push("N must be at least 2".into());
                        }
                        oracle = Some(spec);
                    }
                }
                if self.mode == Mode::PccSearch && !(self.delta > 0.0 && self.delta <= 1.0) {
                    issues.push(format!("delta {} is outside (0, 1]", self.delta));
                }
            }
        }
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        Ok(Experiment { config: self.clone(), protocol, oracle: oracle.expect("set when valid") })
    }
}

/// 17 significant digits; empty when absent.
fn fmt_float(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.16e}"))
}

pub const ATTACK_COLUMNS: [&str; 11] =
    ["trial", "k_E", "k_A", "k_B", "L_size", "aborted", "eq_find", "eq_simulatedm", "eq_agrees", "seconds", "eps"];

/// One CSV row of an attack or learner run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub k_e: Option<Key>,
    pub k_a: Key,
    pub k_b: Key,
    pub l_size: usize,
    pub aborted: bool,
    pub eq_find: Option<f64>,
    pub eq_simulatedm: Option<f64>,
    pub eq_agrees: Option<f64>,
    pub seconds: f64,
    pub eps: f64,
    pub conjecture_relevant: bool,
    pub max_residual_weight: Option<f64>,
}

impl TrialRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.trial.to_string(),
            self.k_e.map_or_else(String::new, |k| k.to_string()),
            self.k_a.to_string(),
            self.k_b.to_string(),
            self.l_size.to_string(),
            self.aborted.to_string(),
            fmt_float(self.eq_find),
            fmt_float(self.eq_simulatedm),
            fmt_float(self.eq_agrees),
            fmt_float(Some(self.seconds)),
            fmt_float(Some(self.eps)),
        ]
    }

    fn success(&self) -> bool {
        self.k_e.is_some_and(|k| k != Key::Abort && k == self.k_a && k == self.k_b)
    }
}

/// A CSV row read back as strings keyed by column.
pub fn read_csv_row(path: &Path, row: usize) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let rec = r
        .records()
        .nth(row)
        .ok_or_else(|| Error::Mismatch(format!("{} has no row {row}", path.display())))??;
    Ok(headers.into_iter().zip(rec.iter().map(str::to_string)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDump {
    pub prob: f64,
    pub message: Vec<[f64; 2]>,
}

/// Everything needed to recompute a row's diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackDump {
    pub row: usize,
    pub trial: usize,
    pub eps: f64,
    pub lambda: f64,
    pub protocol: Protocol,
    #[serde(rename = "k_E")]
    pub k_e: Key,
    pub learned: PartialOracle,
    pub simulated_state: StateDump,
    pub alice_state: StateDump,
    pub components: Vec<ComponentDump>,
    pub realized: usize,
    pub eq_find: Option<f64>,
    pub eq_simulatedm: Option<f64>,
    pub eq_agrees: Option<f64>,
    pub conjecture_relevant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dump {
    Attack(Box<AttackDump>),
    PccHit(Box<HitDump>),
}

pub fn dump_path(states: &Path, row: usize) -> PathBuf {
    states.join(format!("row_{row}.json"))
}

fn attack_dump(p: &Protocol, row: usize, trial: usize, eps: f64, lambda: f64, run: &AttackRun) -> Dump {
    let o = &run.outcome;
    let a = &run.artifacts;
    Dump::Attack(Box::new(AttackDump {
        row,
        trial,
        eps,
        lambda,
        protocol: p.clone(),
        k_e: o.k_e,
        learned: o.learned.clone(),
        simulated_state: a.simulated_state.dump(),
        alice_state: a.alice_state.dump(),
        components: a
            .components
            .iter()
            .map(|c| ComponentDump { prob: c.prob, message: c.message.iter().map(|z| [z.re, z.im]).collect() })
            .collect(),
        realized: a.realized,
        eq_find: o.eq_find,
        eq_simulatedm: o.eq_simulatedm,
        eq_agrees: o.eq_agrees,
        conjecture_relevant: o.conjecture_relevant,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsSummary {
    pub eps: f64,
    pub trials: usize,
    pub success_rate: Option<f64>,
    #[serde(rename = "mean_L")]
    pub mean_l: f64,
    #[serde(rename = "max_L")]
    pub max_l: usize,
    pub abort_rate: f64,
    pub min_eq_find: Option<f64>,
    pub min_eq_simulatedm: Option<f64>,
    pub min_eq_agrees: Option<f64>,
    pub conjecture_relevant: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_residual_weight: Option<f64>,
}

fn min_opt(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    it.flatten().reduce(f64::min)
}

fn summarize_rows(eps: f64, rows: &[&TrialRow], attack: bool) -> EpsSummary {
    let n = rows.len();
    let count = |f: &dyn Fn(&TrialRow) -> bool| rows.iter().filter(|r| f(r)).count();
    EpsSummary {
        eps,
        trials: n,
        success_rate: attack.then(|| count(&TrialRow::success) as f64 / n as f64),
        mean_l: rows.iter().map(|r| r.l_size as f64).sum::<f64>() / n as f64,
        max_l: rows.iter().map(|r| r.l_size).max().unwrap_or(0),
        abort_rate: count(&|r| r.aborted) as f64 / n as f64,
        min_eq_find: min_opt(rows.iter().map(|r| r.eq_find)),
        min_eq_simulatedm: min_opt(rows.iter().map(|r| r.eq_simulatedm)),
        min_eq_agrees: min_opt(rows.iter().map(|r| r.eq_agrees)),
        conjecture_relevant: count(&|r| r.conjecture_relevant),
        max_residual_weight: if attack { None } else { rows.iter().filter_map(|r| r.max_residual_weight).reduce(f64::max) },
    }
}

/// Report of a finished experiment; the JSON written to the summary path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    pub seed: u64,
    pub trials: usize,
    #[serde(flatten)]
    pub body: serde_json::Value,
    pub wall_time: f64,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("QROMLAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(vec![format!("QROMLAB_THREADS = `{v}` is not a positive integer")]))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Unsupported(format!("thread pool: {e}")))
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn random_table(spec: &OracleSpec, rng: &mut impl Rng) -> Vec<usize> {
    (0..spec.domain_size).map(|_| rng.random_range(0..spec.range.order())).collect()
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_dumps(states: &Path, dumps: &[(usize, Dump)]) -> Result<()> {
    if dumps.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(states)?;
    for (row, d) in dumps {
        write_json(&dump_path(states, *row), d)?;
    }
    Ok(())
}

type RowDumps = Vec<(usize, Dump)>;

fn run_protocol_trials(x: &Experiment) -> Result<(Vec<TrialRow>, RowDumps)> {
    let cfg = &x.config;
    let p = x.protocol.as_ref().expect("validated");
    let attack = cfg.mode == Mode::Attack;
    let jobs: Vec<(usize, f64)> = cfg.eps.iter().flat_map(|&e| (0..cfg.trials).map(move |t| (t, e))).collect();
    let results: Vec<(TrialRow, Option<Dump>)> = jobs
        .par_iter()
        .enumerate()
        .map(|(row, &(trial, eps))| -> Result<(TrialRow, Option<Dump>)> {
            let mut rng = trial_rng(cfg.seed, trial);
            let h = random_table(&p.oracle, &mut rng);
            let start = Instant::now();
            let cap = cfg.cap.unwrap_or_else(|| default_cap(p.d, cfg.lambda, eps));
            if attack {
                let opts = AttackOptions { force_simulated_oracle: cfg.force_simulated_oracle, cap: Some(cap) };
                let run = full_attack(p, eps, cfg.lambda, &h, &opts, &mut rng)?;
                let o = &run.outcome;
                let keep = match cfg.dump {
                    DumpPolicy::None => false,
                    DumpPolicy::ConjectureRelevant => o.conjecture_relevant && !o.aborted,
                    DumpPolicy::All => !o.aborted,
                };
                let dump = keep.then(|| attack_dump(p, row, trial, eps, cfg.lambda, &run));
                let seconds = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
                let r = TrialRow {
                    trial,
                    k_e: Some(o.k_e),
                    k_a: o.k_a,
                    k_b: o.k_b,
                    l_size: o.l_size,
                    aborted: o.aborted,
                    eq_find: o.eq_find,
                    eq_simulatedm: o.eq_simulatedm,
                    eq_agrees: o.eq_agrees,
                    seconds,
                    eps,
                    conjecture_relevant: o.conjecture_relevant,
                    max_residual_weight: None,
                };
                Ok((r, dump))
            } else {
                let real = run_concrete(p, &h, &mut rng)?;
                let out = learn(p, &real.transcript, eps, &h, cap)?;
                let seconds = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
                let r = TrialRow {
                    trial,
                    k_e: None,
                    k_a: real.k_a,
                    k_b: real.k_b,
                    l_size: out.queries_made,
                    aborted: out.aborted,
                    eq_find: None,
                    eq_simulatedm: None,
                    eq_agrees: None,
                    seconds,
                    eps,
                    conjecture_relevant: false,
                    max_residual_weight: (!out.aborted).then(|| out.max_residual_weight()).transpose()?,
                };
                Ok((r, None))
            }
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(results.len());
    let mut dumps = Vec::new();
    for (i, (r, d)) in results.into_iter().enumerate() {
        rows.push(r);
        if let Some(d) = d {
            dumps.push((i, d));
        }
    }
    Ok((rows, dumps))
}

fn protocol_body(cfg: &ExperimentConfig, rows: &[TrialRow]) -> Result<serde_json::Value> {
    let attack = cfg.mode == Mode::Attack;
    let all: Vec<&TrialRow> = rows.iter().collect();
    let total = summarize_rows(cfg.eps[0], &all, attack);
    let per_eps: Vec<EpsSummary> = cfg
        .eps
        .iter()
        .enumerate()
        .map(|(i, &e)| summarize_rows(e, &all[i * cfg.trials..(i + 1) * cfg.trials], attack))
        .collect();
    let mut body = serde_json::to_value(&total)?;
    let obj = body.as_object_mut().expect("struct");
    obj.remove("eps");
    obj.remove("trials");
    obj.insert("lambda".into(), serde_json::to_value(cfg.lambda)?);
    obj.insert("per_eps".into(), serde_json::to_value(per_eps)?);
    Ok(body)
}

fn run_pcc(x: &Experiment) -> Result<(serde_json::Value, Vec<(usize, Dump)>)> {
    let cfg = &x.config;
    let search = SearchConfig::new(x.oracle.clone(), cfg.delta, cfg.d.unwrap_or(2), cfg.trials, cfg.seed);
    let trials = search_trials(&search)?;
    let flag = |b: Option<bool>| b.map_or_else(String::new, |b| b.to_string());
    write_csv(
        &cfg.output.csv_path(),
        &["trial", "good", "compatible", "margin"],
        trials.iter().map(|t| vec![t.trial.to_string(), t.good.to_string(), flag(t.compatible), fmt_float(t.margin)]),
    )?;
    let mut report = summarize_search(&trials);
    report.first_hit = None;
    let mut body = serde_json::to_value(&report)?;
    let obj = body.as_object_mut().expect("struct");
    obj.remove("first_hit");
    obj.remove("trials");
    obj.insert("delta".into(), serde_json::to_value(search.delta)?);
    obj.insert("d".into(), serde_json::to_value(search.d)?);
    obj.insert("N".into(), serde_json::to_value(search.oracle.domain_size)?);
    obj.insert("group".into(), serde_json::to_value(&search.oracle.range)?);
    let dumps = if cfg.dump == DumpPolicy::None {
        Vec::new()
    } else {
        trials.into_iter().filter_map(|t| t.hit.map(|h| (t.trial, Dump::PccHit(h)))).collect()
    };
    Ok((body, dumps))
}

fn run_equivalence(x: &Experiment) -> Result<serde_json::Value> {
    let cfg = &x.config;
    let family = CircuitFamily::general(cfg.d.unwrap_or(3));
    let rows: Vec<(usize, f64, f64)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<(usize, f64, f64)> {
            let mut rng = trial_rng(cfg.seed, t);
            let start = Instant::now();
            let (c, _) = random_circuit(&x.oracle, &family, &mut rng)?;
            let tv = equivalence_gap(&c)?;
            let seconds = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
            Ok((c.query_count(), tv, seconds))
        })
        .collect::<Result<_>>()?;
    write_csv(
        &cfg.output.csv_path(),
        &["trial", "queries", "tv", "seconds"],
        rows.iter()
            .enumerate()
            .map(|(t, &(q, tv, s))| vec![t.to_string(), q.to_string(), fmt_float(Some(tv)), fmt_float(Some(s))]),
    )?;
    let max_tv = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(serde_json::json!({
        "N": x.oracle.domain_size,
        "group": x.oracle.range,
        "max_queries": family.max_queries,
        "max_tv": max_tv,
    }))
}

/// Runs a validated experiment and writes its CSV, summary JSON and state dumps.
pub fn run_experiment(x: &Experiment) -> Result<Summary> {
    let cfg = &x.config;
    let start = Instant::now();
    let pool = thread_pool()?;
    let body = pool.install(|| -> Result<serde_json::Value> {
        match cfg.mode {
            Mode::Attack | Mode::LearnerOnly => {
                let (rows, dumps) = run_protocol_trials(x)?;
                write_csv(&cfg.output.csv_path(), &ATTACK_COLUMNS, rows.iter().map(TrialRow::record))?;
                write_dumps(&cfg.output.states_dir(), &dumps)?;
                protocol_body(cfg, &rows)
            }
            Mode::PccSearch => {
                let (body, dumps) = run_pcc(x)?;
                write_dumps(&cfg.output.states_dir(), &dumps)?;
                Ok(body)
            }
            Mode::OracleEquivalence => run_equivalence(x),
        }
    })?;
    let summary = Summary {
        mode: cfg.mode,
        protocol: x.protocol.as_ref().map(|p| p.name.clone()),
        seed: cfg.seed,
        trials: cfg.trials,
        body,
        wall_time: if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    write_json(&cfg.output.summary_path(), &summary)?;
    Ok(summary)
}

/// Result of replaying one dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayReport {
    pub row: usize,
    pub kind: &'static str,
    pub recomputed: Vec<(String, Option<f64>)>,
    pub checked_against_csv: bool,
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Mismatch(format!("`{s}` is not a number")))
}

fn expect_close(name: &str, want: Option<f64>, got: Option<f64>, problems: &mut Vec<String>) {
    let ok = match (want, got) {
        (None, None) => true,
        (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
        _ => false,
    };
    if !ok {
        problems.push(format!("{name}: recorded {want:?}, recomputed {got:?}"));
    }
}

/// Recomputes the diagnostics stored in `states/row_<row>.json` and checks
/// them against the dump and, when given, the CSV row.
pub fn replay(row: usize, states: &Path, csv: Option<&Path>) -> Result<ReplayReport> {
    let path = dump_path(states, row);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let dump: Dump = serde_json::from_str(&text)?;
    match dump {
        Dump::PccHit(hit) => {
            if !recheck_hit(&hit)? {
                return Err(Error::Mismatch(format!("row {row}: stored pair is no longer a good incompatible pair")));
            }
            Ok(ReplayReport { row, kind: "pcc-hit", recomputed: Vec::new(), checked_against_csv: false })
        }
        Dump::Attack(d) => {
            if d.row != row {
                return Err(Error::Mismatch(format!("dump is for row {}, not {row}", d.row)));
            }
            let sim = LearnerOutcome {
                simulated_state: QuantumState::from_dump(&d.simulated_state)?,
                queries_made: d.learned.len(),
                learned: d.learned.clone(),
                aborted: false,
            };
            let alice = QuantumState::from_dump(&d.alice_state)?;
            let components: Vec<(f64, Vec<Complex64>)> = d
                .components
                .iter()
                .map(|c| (c.prob, c.message.iter().map(|&[re, im]| Complex64::new(re, im)).collect()))
                .collect();
            let (diag, _) = check_inequalities(&d.protocol, &sim, &alice, &components, d.k_e)?;
            let got = [("eq_find", diag.eq_find), ("eq_simulatedm", diag.eq_simulatedm), ("eq_agrees", diag.eq_agrees)];
            let mut problems = Vec::new();
            let recorded = [d.eq_find, d.eq_simulatedm, d.eq_agrees];
            for ((name, g), want) in got.iter().zip(recorded) {
                expect_close(name, want, *g, &mut problems);
            }
            if let Some(path) = csv {
                let fields = read_csv_row(path, row)?;
                let field = |k: &str| fields.iter().find(|(h, _)| h == k).map(|(_, v)| v.as_str()).unwrap_or("");
                for (name, g) in &got {
                    expect_close(&format!("csv {name}"), parse_opt(field(name))?, *g, &mut problems);
                }
                if field("k_E") != d.k_e.to_string() {
                    problems.push(format!("csv k_E `{}` differs from dump `{}`", field("k_E"), d.k_e));
                }
            }
            if !problems.is_empty() {
                return Err(Error::Mismatch(format!("row {row}: {}", problems.join("; "))));
            }
            Ok(ReplayReport {
                row,
                kind: "attack",
                recomputed: got.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
                checked_against_csv: csv.is_some(),
            })
        }
    }
}

fn op_text(op: &Op) -> String {
    match op {
        Op::Hadamard { target } => format!("hadamard({target})"),
        Op::Fourier { target, inverse } => format!("fourier{}({target})", if *inverse { "^-1" } else { "" }),
        Op::Permutation { targets, .. } => format!("permutation({})", targets.join(", ")),
        Op::AddConstant { target, value, subtract } => format!("{target} {}= {value}", if *subtract { "-" } else { "+" }),
        Op::ControlledAdd { control, target, subtract } => {
            format!("{target} {}= {control}", if *subtract { "-" } else { "+" })
        }
        Op::Controlled { control, value, then } => format!(
            "if {control} == {value} {{ {} }}",
            then.iter().map(op_text).collect::<Vec<_>>().join("; ")
        ),
        Op::Matrix { targets, .. } => format!("unitary({})", targets.join(", ")),
        Op::Query { x, y, inverse } => format!("{y} {}= h({x})", if *inverse { "-" } else { "+" }),
    }
}

fn program_text(ops: &[Op]) -> String {
    if ops.is_empty() {
        "(no operations)".into()
    } else {
        ops.iter().map(op_text).collect::<Vec<_>>().join("; ")
    }
}

fn key_text(fin: &FinalMap) -> String {
    let map: Vec<String> = fin
        .key_map
        .iter()
        .enumerate()
        .map(|(v, k)| format!("{v}->{}", Key::from_bit(*k)))
        .collect();
    format!("key from {} [{}]", fin.key_register, map.join(", "))
}

/// Human-readable summary of a protocol.
pub fn describe(p: &Protocol) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "protocol {}", p.name);
    let _ = writeln!(s, "oracle: h: [{}] -> {}", p.oracle.domain_size, p.oracle.range);
    let _ = writeln!(
        s,
        "query budget d = {} (Alice {}, Bob {})",
        p.d,
        p.queries_by(Party::A),
        p.queries_by(Party::B)
    );
    let _ = writeln!(s, "alice_no_final_query: {}", p.alice_no_final_query);
    let regs: Vec<String> = p
        .registers
        .iter()
        .map(|r| format!("{} ({}, {}, dim {})", r.name, format!("{:?}", r.owner).to_lowercase(), format!("{:?}", r.kind).to_lowercase(), r.dim))
        .collect();
    let _ = writeln!(s, "registers: {}", regs.join(", "));
    for (i, r) in p.rounds.iter().enumerate() {
        let party = match r.party {
            Party::A => "Alice",
            Party::B => "Bob",
        };
        let _ = writeln!(s, "round {} ({party}): {}", i + 1, program_text(&r.program));
        match &r.message {
            Message::Classical { register, deliver_to } => {
                let _ = writeln!(s, "  sends {register} classically into {deliver_to}");
            }
            Message::Quantum { register } => {
                let _ = writeln!(s, "  sends quantum register {register}");
            }
        }
    }
    let _ = writeln!(s, "Alice final: {}; {}", program_text(&p.final_a.program), key_text(&p.final_a));
    let _ = writeln!(s, "Bob final: {}; {}", program_text(&p.final_b.program), key_text(&p.final_b));
    let report = p.validate();
    if report.is_valid() {
        let _ = writeln!(s, "validation: ok");
    }
    for v in &report.violations {
        let _ = writeln!(s, "violation [{}]: {}", v.code, v.detail);
    }
    for n in &report.notices {
        let _ = writeln!(s, "notice [{}]: {}", n.code, n.detail);
    }
    if !p.alice_no_final_query {
        let _ = writeln!(
            s,
            "warning: Alice queries the oracle after the last message; outside the attack hypothesis. \
             The attack only runs with force_simulated_oracle, which answers her queries from Eve's simulation."
        );
    }
    if p.name.starts_with("ka-from-") {
        let _ = writeln!(s, "reduction from public-key encryption:");
        let _ = writeln!(s, "  1. Alice runs key generation and sends the classical public key.");
        let _ = writeln!(s, "  2. Bob encrypts a uniformly random bit under it; the ciphertext is the quantum message.");
        let _ = writeln!(
            s,
            "  3. Alice decrypts to get the key. An eavesdropper that outputs Bob's bit decides which of 0 and 1 was encrypted."
        );
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "qromlab", version, about = "Purified random oracle simulator and key-agreement attack toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print rounds, budgets and flags of a builtin protocol or protocol file.
    Describe {
        name: String,
        #[arg(long = "N", short = 'n', default_value_t = 8)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        group: Vec<usize>,
    },
    /// Recompute the diagnostics of a dumped row.
    Replay {
        row: usize,
        /// Directory holding the `row_<i>.json` dumps.
        dir: PathBuf,
        /// CSV to compare against; defaults to `trials.csv` next to `dir`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the protocol JSON of a builtin.
    Export {
        name: String,
        #[arg(long = "N", short = 'n', default_value_t = 8)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        group: Vec<usize>,
    },
}

fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Run { config } => {
            let text = fs::read_to_string(&config)
                .map_err(|e| Error::Config(vec![format!("reading {}: {e}", config.display())]))?;
            let x = ExperimentConfig::from_json(&text)?.validate()?;
            let summary = run_experiment(&x)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        Command::Describe { name, n, group } => {
            let p = load_protocol(&name, Some(n), Some(&group)).map_err(|e| Error::Config(vec![e]))?;
            Ok(describe(&p).trim_end().to_string())
        }
        Command::Replay { row, dir, csv } => {
            let csv = csv.or_else(|| {
                let sibling = dir.parent()?.join("trials.csv");
                sibling.exists().then_some(sibling)
            });
            let r = replay(row, &dir, csv.as_deref())?;
            let mut out = format!("row {} ({}): match", r.row, r.kind);
            for (name, v) in &r.recomputed {
                let _ = write!(out, "\n  {name} = {}", fmt_float(*v));
            }
            if r.checked_against_csv {
                out.push_str("\n  agrees with the CSV row");
            }
            Ok(out)
        }
        Command::Export { name, n, group } => {
            let g = GroupSpec::new(group).map_err(|e| Error::Config(vec![e.to_string()]))?;
            let p = zoo::builtin(&name, n, &g).map_err(|e| Error::Config(vec![e.to_string()]))?;
            Ok(p.to_json())
        }
    }
}

/// Exit status: 0 on success, 2 for an invalid config, 1 for runtime failures.
pub fn main_with(cli: Cli) -> ExitCode {
    match execute(cli.command) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(Error::Config(issues)) => {
            eprintln!("invalid config:");
            for i in issues {
                eprintln!("  - {i}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(mode: &str, dir: &Path, extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"{{"mode": "{mode}", "trials": 4, "seed": 9, "timing": false, "output": {{"dir": {:?}}}{extra}}}"#,
            dir.display().to_string()
        );
        ExperimentConfig::from_json(&text).unwrap()
    }

    #[test]
    fn validation_itemizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config("attack", dir.path(), r#", "protocol": "trivial-last-message", "eps": [0.0, 1.5]"#);
        c.trials = 0;
        let Err(Error::Config(issues)) = c.validate() else { panic!("should fail") };
        assert_eq!(issues.len(), 4, "{issues:?}");
        assert!(issues.iter().any(|i| i.contains("outside the attack hypothesis")));
        assert!(ExperimentConfig::from_json(r#"{"mode": "attack", "bogus": 1}"#).is_err());
        let c = config("attack", dir.path(), r#", "protocol": "no-such-protocol""#);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = config("pcc-search", dir.path(), r#", "N": 9, "group": [4]"#);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn attack_csv_and_summary_agree() {
        let dir = tempfile::tempdir().unwrap();
        let c = config("attack", dir.path(), r#", "protocol": "announced", "N": 4, "eps": [0.05, 0.2], "dump": "all""#);
        let x = c.validate().unwrap();
        let s = run_experiment(&x).unwrap();
        assert_eq!(s.body["success_rate"], 1.0);
        assert_eq!(s.body["per_eps"].as_array().unwrap().len(), 2);
        let mut r = csv::Reader::from_path(c.output.csv_path()).unwrap();
        assert_eq!(r.headers().unwrap().iter().take(10).collect::<Vec<_>>(), ATTACK_COLUMNS[..10].to_vec());
        assert_eq!(r.records().count(), 8);
        for row in 0..8 {
            replay(row, &c.output.states_dir(), Some(&c.output.csv_path())).unwrap();
        }
    }

    #[test]
    fn describe_text() {
        let p = zoo::builtin("announced", 8, &GroupSpec::cyclic(2).unwrap()).unwrap();
        let d = describe(&p);
        assert!(d.contains("d = 1") && d.contains("alice_no_final_query: true"));
        let t = zoo::builtin("trivial-last-message", 8, &GroupSpec::cyclic(2).unwrap()).unwrap();
        assert!(describe(&t).contains("outside the attack hypothesis"));
        let k = zoo::builtin("qpke-toy", 8, &GroupSpec::cyclic(2).unwrap()).unwrap();
        let d = describe(&k);
        assert!(d.contains("  1. ") && d.contains("  2. ") && d.contains("  3. "));
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 0.95] {
            assert_eq!(fmt_float(Some(v)).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_float(None), "");
    }
}
