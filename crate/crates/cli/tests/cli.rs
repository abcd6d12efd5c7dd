use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtpslab::model::checkpoint::save_checkpoint;
use mtpslab::model::{DecoderModel, HeadInit, ModelConfig, Variant};
use mtpslab::synthdata::{read_corpus, SynthGrammar};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtpslab")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "gen-data",
        "--out",
        s(&out),
        "--n-train",
        "40",
        "--n-eval",
        "6",
        "--seed",
        "3",
        "--len-range",
        "2",
        "5",
    ]);
    out
}

const TINY: &[&str] = &[
    "--d-model",
    "16",
    "--n-heads",
    "2",
    "--d-ff",
    "32",
    "--backbone-layers",
    "1",
    "--projector-layers",
    "1",
    "--batch-size",
    "2",
    "--lr",
    "1e-3",
];

fn train_tiny(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let corpus = data.join("train.jsonl");
    let mut args = vec!["train", "--corpus", s(&corpus), "--out", s(&out), "--steps", "3"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let a = data(dir.path());
    let b = dir.path().join("again");
    ok(&[
        "gen-data",
        "--out",
        s(&b),
        "--n-train",
        "40",
        "--n-eval",
        "6",
        "--seed",
        "3",
        "--len-range",
        "2",
        "5",
    ]);
    for f in ["train.jsonl", "eval.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let train = read_corpus(&a.join("train.jsonl")).unwrap();
    let eval = read_corpus(&a.join("eval.jsonl")).unwrap();
    assert_eq!((train.records.len(), eval.records.len()), (40, 6));
    assert_ne!(train.header.seed, eval.header.seed);
    assert!(train.records.iter().all(|r| (2..=5).contains(&r.text.len())));
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["n_train"], 40);
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["gen-data", "--out", s(&out), "--len-range", "5", "2"]), 2);
    assert_eq!(code(&["gen-data", "--out", s(&out), "--bogus"]), 2);
    assert_eq!(code(&["masks", "print", "--lt", "0", "--ls", "2"]), 2);
    let d = data(dir.path());
    let corpus = d.join("train.jsonl");
    assert_eq!(
        code(&[
            "train",
            "--corpus",
            s(&corpus),
            "--out",
            s(&out),
            "--variant",
            "mtp_vocalnet"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--corpus",
            s(&corpus),
            "--out",
            s(&out),
            "--variant",
            "group_linear",
            "--n",
            "3"
        ]),
        2
    );
    assert_eq!(
        code(&["train", "--corpus", s(&corpus), "--out", s(&out), "--variant", "nope"]),
        2
    );
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(
        code(&["train", "--corpus", s(&missing), "--out", s(&out), "--variant", "ntp"]),
        3
    );
    let d = data(dir.path());
    let corpus = d.join("eval.jsonl");
    let ckpt = dir.path().join("none.ckpt");
    assert_eq!(
        code(&[
            "bench",
            "--checkpoint",
            s(&ckpt),
            "--corpus",
            s(&corpus),
            "--out",
            s(&out)
        ]),
        3
    );
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--corpus",
            s(&corpus),
            "--out",
            s(&out)
        ]),
        3
    );
}

#[test]
fn nan_training_exits_4_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let corpus = d.join("train.jsonl");
    let out = dir.path().join("nan");
    let mut args = vec![
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&out),
        "--variant",
        "ntp",
        "--steps",
        "20",
    ];
    args.extend(TINY.iter().map_while(|a| (*a != "--lr").then_some(*a)));
    args.extend_from_slice(&["--lr", "1e30", "--warmup-ratio", "0"]);
    let r = run(&args);
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&r.stderr).contains("at step"));
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let out = train_tiny(
        dir.path(),
        &d,
        "vocal",
        &["--variant", "mtp_vocalnet", "--n", "3", "--lambda", "0.5"],
    );
    assert!(out.join("final.ckpt").is_file());
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    let header = log.lines().next().unwrap();
    assert!(header.contains("ce_head_0,ce_head_1,ce_head_2"));
    assert!(!header.contains("ce_head_3"));
    assert!(header.starts_with("step,lr,loss,") && header.ends_with(",schema_version"));
    assert_eq!(log.lines().count(), 4);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["variant"], "mtp_vocalnet");

    let grp = train_tiny(dir.path(), &d, "grp", &["--variant", "group_linear", "--g", "3"]);
    let log = std::fs::read_to_string(grp.join("train_log.csv")).unwrap();
    let cols: Vec<&str> = log.lines().next().unwrap().split(',').collect();
    let idx = cols.iter().position(|c| *c == "backbone_positions").unwrap();
    let corpus = read_corpus(&d.join("train.jsonl")).unwrap();
    let lengths: Vec<usize> = corpus
        .records
        .iter()
        .map(|r| 1 + r.text.len() + r.speech.len().div_ceil(3))
        .collect();
    for line in log.lines().skip(1) {
        let pos: usize = line.split(',').nth(idx).unwrap().parse().unwrap();
        // Two samples per batch, each L_t + ceil(L_s / 3).
        assert!(lengths.iter().any(|a| lengths.iter().any(|b| a + b == pos)), "{pos}");
    }
}

#[test]
fn training_reproduces_from_the_same_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let a = train_tiny(dir.path(), &d, "a", &["--variant", "ntp", "--seed", "5"]);
    let b = train_tiny(dir.path(), &d, "b", &["--variant", "ntp", "--seed", "5"]);
    assert_eq!(
        std::fs::read(a.join("final.ckpt")).unwrap(),
        std::fs::read(b.join("final.ckpt")).unwrap()
    );
}

#[test]
fn eval_reports_throughput_and_rejects_bad_m() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let corpus = d.join("eval.jsonl");
    let ntp = train_tiny(dir.path(), &d, "ntp", &["--variant", "ntp"]).join("final.ckpt");
    let out = dir.path().join("eval_ntp");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ntp),
        "--corpus",
        s(&corpus),
        "--out",
        s(&out),
        "--max-tokens",
        "20",
    ]);
    let summary = json(&out.join("summary.json"));
    let mut keys: Vec<&str> = summary.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "m",
            "mean_recon_error",
            "mean_tokens_per_forward",
            "median_wall_ms",
            "n_records",
            "schema_version"
        ]
    );
    assert_eq!(summary["mean_tokens_per_forward"], 1.0);
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "schema_version,record_id,recon_error,tokens,backbone_forwards,wall_ms"
    );
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&ntp),
            "--corpus",
            s(&corpus),
            "--out",
            s(&out),
            "--m",
            "2"
        ]),
        2
    );

    let mtp = train_tiny(dir.path(), &d, "mtp", &["--variant", "mtp_parallel", "--n", "3"]).join("final.ckpt");
    let out = dir.path().join("eval_mtp");
    ok(&[
        "eval",
        "--checkpoint",
        s(&mtp),
        "--corpus",
        s(&corpus),
        "--out",
        s(&out),
        "--m",
        "3",
        "--max-tokens",
        "20",
    ]);
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<usize> = line.split(',').skip(3).take(2).map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[1], f[0].div_ceil(3));
    }
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&mtp),
            "--corpus",
            s(&corpus),
            "--out",
            s(&out),
            "--m",
            "4"
        ]),
        2
    );
}

#[test]
fn generate_streams_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let ckpt = train_tiny(dir.path(), &d, "ntp", &["--variant", "ntp", "--cs", "3", "--ct", "2"]).join("final.ckpt");
    let out = dir.path().join("gen");
    let stdout = ok(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--text",
        "1 2 3 4",
        "--streaming",
        "--max-tokens",
        "12",
        "--out",
        s(&out),
    ]);
    let g = json(&out.join("generate.json"));
    let chunks: Vec<Vec<u64>> = serde_json::from_value(g["chunks"].clone()).unwrap();
    let tokens: Vec<u64> = serde_json::from_value(g["report"]["tokens"].clone()).unwrap();
    assert_eq!(chunks.concat(), tokens);
    assert_eq!(chunks[0].len(), 1);
    assert_eq!(stdout.split_whitespace().count(), tokens.len());
    assert_eq!(
        code(&["generate", "--checkpoint", s(&ckpt), "--text", "99", "--out", s(&out)]),
        2
    );
}

#[test]
fn analyze_uniform_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let mut c = ModelConfig::new(&SynthGrammar::default(), Variant::Ntp, 1);
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.head_init = HeadInit::Zeros;
    let ckpt = dir.path().join("uniform.ckpt");
    save_checkpoint(&DecoderModel::<f64>::new(c, 0).unwrap(), &ckpt).unwrap();
    let out = dir.path().join("an");
    let corpus = d.join("eval.jsonl");
    ok(&[
        "analyze",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--n-tokens",
        "100",
        "--out",
        s(&out),
    ]);
    let e = json(&out.join("entropy.json"));
    assert!((e["mean_entropy"].as_f64().unwrap() - 99f64.ln()).abs() < 1e-9);
    let hist = std::fs::read_to_string(out.join("max_prob_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 21);
    assert!(hist.lines().nth(2).unwrap().starts_with("1,0.05,"));
}

#[test]
fn bench_sweeps_m_and_relates_to_ntp() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let corpus = d.join("eval.jsonl");
    let ntp = train_tiny(dir.path(), &d, "ntp", &["--variant", "ntp"]).join("final.ckpt");
    let mtp = train_tiny(dir.path(), &d, "mtp", &["--variant", "mtp_vocalnet", "--n", "5"]).join("final.ckpt");
    let grp = train_tiny(dir.path(), &d, "grp", &["--variant", "group_linear", "--g", "3"]).join("final.ckpt");
    let out = dir.path().join("bench");
    let text = ok(&[
        "bench",
        "--checkpoint",
        s(&ntp),
        s(&mtp),
        s(&grp),
        "--corpus",
        s(&corpus),
        "--limit",
        "2",
        "--trials",
        "1",
        "--warmup",
        "0",
        "--max-tokens",
        "20",
        "--out",
        s(&out),
    ]);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("schema_version,method,module_num_or_group_size,checkpoint,speedup_ratio"));
    assert_eq!(lines.len(), 1 + 1 + 3 + 1);
    assert!(lines[1].contains(",ntp,-,"));
    let mtp_rows: Vec<&&str> = lines.iter().filter(|l| l.contains(",mtp_vocalnet,5,")).collect();
    assert_eq!(mtp_rows.len(), 3);
    assert!(lines[5].contains(",group_linear,3,"));
    assert!(lines.iter().skip(1).all(|l| !l.ends_with(',')));
}

#[test]
fn masks_print_matches_worked_example() {
    assert_eq!(
        ok(&["masks", "print", "--lt", "2", "--ls", "2"]),
        "1100\n1100\n1110\n1111\n"
    );
    let st = ok(&[
        "masks",
        "print",
        "--lt",
        "2",
        "--ls",
        "2",
        "--mode",
        "streaming",
        "--cs",
        "1",
        "--ct",
        "1",
    ]);
    assert_eq!(st, "1000\n1100\n1010\n1111\n");
    let lit = ok(&["masks", "print", "--lt", "2", "--ls", "1", "--literal"]);
    assert_eq!(lit, "111\n111\n111\n");
}
