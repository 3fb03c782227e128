use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qromlab::circuit::{Circuit, CircuitStep};
use qromlab::algebra::GroupSpec;
use qromlab::cli::{dump_path, Dump};
use qromlab::oracle::OracleSpec;
use qromlab::pcc::HitDump;
use qromlab::protocol::Op;
use serde_json::Value;

fn qromlab(args: &[&str], threads: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qromlab"));
    c.args(args);
    match threads {
        Some(t) => c.env("QROMLAB_THREADS", t),
        None => c.env_remove("QROMLAB_THREADS"),
    };
    c.output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn attack_config(out: &Path, protocol: &str, trials: usize, extra: &str) -> String {
    format!(
        r#"{{"mode": "attack", "protocol": {protocol:?}, "N": 8, "eps": [0.05], "lambda": 0.05,
            "trials": {trials}, "seed": 42, "timing": false, "output": {{"dir": {:?}}}{extra}}}"#,
        out.display().to_string()
    )
}

#[test]
fn attack_run_meets_success_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.json", &attack_config(&out, "announced-query", 1000, ""));
    let o = qromlab(&["run", "--config", &cfg], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert!(s["success_rate"].as_f64().unwrap() >= 0.9);
    assert_eq!(s["mean_L"], 1.0);
    assert_eq!(s["wall_time"], 0.0);
    let csv = fs::read_to_string(out.join("trials.csv")).unwrap();
    assert!(csv.starts_with("trial,k_E,k_A,k_B,L_size,aborted,eq_find,eq_simulatedm,eq_agrees,seconds"));
    assert_eq!(csv.lines().count(), 1001);
}

#[test]
fn reports_are_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let out = tmp.path().join(format!("out{i}"));
        let cfg = write_config(tmp.path(), &format!("cfg{i}.json"), &attack_config(&out, "merkle", 40, r#", "dump": "all""#));
        let o = qromlab(&["run", "--config", &cfg], Some(threads));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read(out.join("trials.csv")).unwrap();
        let json = fs::read(out.join("summary.json")).unwrap();
        let dump = fs::read(dump_path(&out.join("states"), 7)).unwrap();
        reports.push((csv, json, dump));
    }
    assert!(reports[0] == reports[1]);
}

#[test]
fn summary_is_recomputable_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.json", &attack_config(&out, "qpke-toy", 30, ""));
    assert!(qromlab(&["run", "--config", &cfg], None).status.success());
    let mut r = csv::Reader::from_path(out.join("trials.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let n = rows.len() as f64;
    let success = rows.iter().filter(|r| r[1] != *"⊥" && r[1] == r[2] && r[2] == r[3]).count() as f64 / n;
    let mean_l = rows.iter().map(|r| r[4].parse::<f64>().unwrap()).sum::<f64>() / n;
    let min_find = rows.iter().filter(|r| !r[6].is_empty()).map(|r| r[6].parse::<f64>().unwrap()).fold(f64::INFINITY, f64::min);
    let s = summary(&out);
    assert_eq!(s["success_rate"].as_f64().unwrap(), success);
    assert_eq!(s["mean_L"].as_f64().unwrap(), mean_l);
    assert_eq!(s["min_eq_find"].as_f64().unwrap(), min_find);
}

#[test]
fn invalid_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let bad = write_config(
        tmp.path(),
        "bad.json",
        &format!(r#"{{"mode": "attack", "protocol": "announced", "eps": [2.0], "trials": 0, "seed": 1, "output": {{"dir": {:?}}}}}"#, out.display().to_string()),
    );
    let o = qromlab(&["run", "--config", &bad], None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("trials") && err.contains("eps"), "{err}");
    let unparsable = write_config(tmp.path(), "junk.json", "{ not json");
    assert_eq!(qromlab(&["run", "--config", &unparsable], None).status.code(), Some(2));
    let outside = write_config(tmp.path(), "out.json", &attack_config(&out, "trivial-last-message", 3, ""));
    let o = qromlab(&["run", "--config", &outside], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outside the attack hypothesis"));
    let bad_threads = write_config(tmp.path(), "t.json", &attack_config(&out, "announced", 3, ""));
    assert_eq!(qromlab(&["run", "--config", &bad_threads], Some("zero")).status.code(), Some(2));
}

#[test]
fn forced_trivial_protocol_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(
        tmp.path(),
        "cfg.json",
        &attack_config(&out, "trivial_last_message", 400, r#", "force_simulated_oracle": true"#),
    );
    assert!(qromlab(&["run", "--config", &cfg], None).status.success());
    let rate = summary(&out)["success_rate"].as_f64().unwrap();
    assert!((rate - 0.5).abs() < 3.0 * (0.25f64 / 400.0).sqrt(), "{rate}");
}

#[test]
fn learner_only_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let body = format!(
        r#"{{"mode": "learner-only", "protocol": "merkle", "N": 8, "eps": [0.05, 0.3], "trials": 50, "seed": 3, "timing": false, "output": {{"dir": {:?}}}}}"#,
        out.display().to_string()
    );
    let cfg = write_config(tmp.path(), "cfg.json", &body);
    assert!(qromlab(&["run", "--config", &cfg], None).status.success());
    let s = summary(&out);
    assert!(s["success_rate"].is_null());
    for run in s["per_eps"].as_array().unwrap() {
        let bound = 2.0 / run["eps"].as_f64().unwrap();
        assert!(run["mean_L"].as_f64().unwrap() <= bound);
        assert!(run["max_residual_weight"].as_f64().unwrap() < run["eps"].as_f64().unwrap());
    }
}

#[test]
fn pcc_search_and_equivalence_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("pcc");
    let body = format!(
        r#"{{"mode": "pcc-search", "N": 4, "group": [2], "delta": 0.1, "d": 0, "trials": 50, "seed": 5, "timing": false, "output": {{"dir": {:?}}}}}"#,
        out.display().to_string()
    );
    let cfg = write_config(tmp.path(), "pcc.json", &body);
    assert!(qromlab(&["run", "--config", &cfg], None).status.success());
    let s = summary(&out);
    assert_eq!(s["counterexamples_found"], 0);
    assert_eq!(s["good_pairs"], 50);

    let out = tmp.path().join("eq");
    let body = format!(
        r#"{{"mode": "oracle-equivalence", "N": 3, "d": 3, "trials": 20, "seed": 5, "timing": false, "output": {{"dir": {:?}}}}}"#,
        out.display().to_string()
    );
    let cfg = write_config(tmp.path(), "eq.json", &body);
    assert!(qromlab(&["run", "--config", &cfg], None).status.success());
    assert!(summary(&out)["max_tv"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn replay_matches_and_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "cfg.json", &attack_config(&out, "merkle", 6, r#", "dump": "all""#));
    assert!(qromlab(&["run", "--config", &cfg], None).status.success());
    let states = out.join("states");
    for row in 0..6 {
        let o = qromlab(&["replay", &row.to_string(), &states.display().to_string()], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("match") && text.contains("agrees with the CSV row"), "{text}");
    }
    // Swap the amplitudes of the first message component.
    let path = dump_path(&states, 2);
    let mut dump: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let msg = dump["components"][0]["message"].as_array_mut().unwrap();
    msg.rotate_left(1);
    fs::write(&path, serde_json::to_string(&dump).unwrap()).unwrap();
    let o = qromlab(&["replay", "2", &states.display().to_string()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("recomputed"));
    assert_eq!(qromlab(&["replay", "99", &states.display().to_string()], None).status.code(), Some(1));
}

#[test]
fn replay_pcc_hit() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = OracleSpec::new(2, GroupSpec::cyclic(2).unwrap()).unwrap();
    // Query x = 0 and keep the answer; the two branches fix H_0 to 0 and 1.
    let circuit = |v| Circuit {
        oracle: spec.clone(),
        steps: vec![CircuitStep::Gate(Op::query("x", "y")), CircuitStep::Postselect { register: "y".into(), value: v }],
    };
    let (a, b) = (circuit(0), circuit(1));
    let hit = HitDump {
        seed: 0,
        trial: 0,
        state_dumps: [a.run(None).unwrap().dump(), b.run(None).unwrap().dump()],
        circuits: [a, b],
        delta: 1.0,
        d: 1,
        n: 2,
        group: spec.range.clone(),
    };
    let states = tmp.path().join("states");
    fs::create_dir_all(&states).unwrap();
    let dump = Dump::PccHit(Box::new(hit.clone()));
    fs::write(dump_path(&states, 0), serde_json::to_string(&dump).unwrap()).unwrap();
    let o = qromlab(&["replay", "0", &states.display().to_string()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pcc-hit"));

    let mut light = hit;
    light.delta = 0.1;
    fs::write(dump_path(&states, 1), serde_json::to_string(&Dump::PccHit(Box::new(light))).unwrap()).unwrap();
    assert_eq!(qromlab(&["replay", "1", &states.display().to_string()], None).status.code(), Some(1));
}

#[test]
fn describe_and_export() {
    let o = qromlab(&["describe", "announced-query"], None);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("d = 1") && text.contains("alice_no_final_query: true"), "{text}");
    let o = qromlab(&["describe", "trivial_last_message"], None);
    assert!(String::from_utf8_lossy(&o.stdout).contains("outside the attack hypothesis"));
    let o = qromlab(&["describe", "ka-from-qpke-toy"], None);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("1. ") && text.contains("2. ") && text.contains("3. "), "{text}");
    assert_eq!(qromlab(&["describe", "nonexistent"], None).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let o = qromlab(&["export", "merkle", "--N", "4", "--group", "3"], None);
    assert!(o.status.success());
    let proto = tmp.path().join("merkle.json");
    fs::write(&proto, &o.stdout).unwrap();
    let o = qromlab(&["describe", &proto.display().to_string(), "--N", "4", "--group", "3"], None);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Z3"), "{}", String::from_utf8_lossy(&o.stderr));
    let out = tmp.path().join("out");
    let body = format!(
        r#"{{"mode": "attack", "protocol": {:?}, "trials": 10, "seed": 1, "timing": false, "output": {{"dir": {:?}}}}}"#,
        proto.display().to_string(),
        out.display().to_string()
    );
    let cfg = write_config(tmp.path(), "cfg.json", &body);
    let o = qromlab(&["run", "--config", &cfg], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary(&out)["success_rate"], 1.0);
}
