use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use glass_core::eval::{EvalMethod, EvalReport};
use glass_core::importance::ImportanceStats;
use glass_core::pruning::NeuronMask;
use glass_core::storage::load;

fn glass(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glass")).current_dir(dir).args(args).output().expect("spawn glass")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = glass(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A small planted model, an NPS corpus, drift documents and both global stats.
struct Setup {
    dir: tempfile::TempDir,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        ok(d, &["gen-model", "--seed", "5", "--ffn-width", "16", "--vocab-size", "24", "--planted-count", "3", "--out", "m.json"]);
        ok(d, &["nps", "--model", "m.json", "--count", "6", "--length", "30", "--seed", "5", "--out", "nps.jsonl"]);
        ok(d, &["gen-docs", "--model", "m.json", "--count", "3", "--doc-len", "60", "--topic-len", "20", "--seed", "5", "--out", "docs.jsonl"]);
        ok(d, &["stats", "--model", "m.json", "--corpus", "nps.jsonl", "--kind", "global-act", "--out", "ga.json"]);
        ok(d, &["stats", "--model", "m.json", "--corpus", "nps.jsonl", "--kind", "global-impact", "--out", "gi.json"]);
        Setup { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn gen_model_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(dir.path(), &["gen-model", "--seed", "9", "--planted", "1,2;3", "--out", "a.json"]);
    let b = ok(dir.path(), &["gen-model", "--seed", "9", "--planted", "1,2;3", "--out", "b.json"]);
    assert_eq!(a, b);
    assert_eq!(a.trim().len(), 64);
    let c = ok(dir.path(), &["gen-model", "--seed", "10", "--planted", "1,2;3", "--out", "c.json"]);
    assert_ne!(a, c);
}

#[test]
fn gen_model_rejects_bad_head_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = glass(dir.path(), &["gen-model", "--d-model", "10", "--heads", "4", "--out", "m.json"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d_model") && err.contains("n_heads") && err.contains("divisible"), "{err}");
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn gen_model_rejects_out_of_range_planted_unit() {
    let dir = tempfile::tempdir().unwrap();
    let out = glass(dir.path(), &["gen-model", "--ffn-width", "8", "--planted", "1;8", "--out", "m.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside"));
}

#[test]
fn gen_model_from_spec_file_with_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("spec.json"),
        r#"{"vocab_size": 10, "d_model": 8, "ffn_width": 6, "n_layers": 1, "n_heads": 2, "max_seq": 16,
            "phi_u": "silu", "phi_g": "sigmoid", "norm_eps": 1e-6, "seed": 4}"#,
    )
    .unwrap();
    ok(dir.path(), &["gen-model", "--spec", "spec.json", "--ffn-width", "7", "--out", "m.json"]);
    let m: glass_core::model::Model = load(&dir.path().join("m.json")).unwrap();
    assert_eq!((m.spec.vocab_size, m.spec.ffn_width, m.spec.seed), (10, 7, 4));
}

#[test]
fn nps_same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model", "--seed", "2", "--out", "m.json"]);
    ok(d, &["nps", "--model", "m.json", "--count", "4", "--length", "20", "--seed", "8", "--out", "a.jsonl"]);
    ok(d, &["nps", "--model", "m.json", "--count", "4", "--length", "20", "--seed", "8", "--out", "b.jsonl"]);
    ok(d, &["nps", "--model", "m.json", "--count", "4", "--length", "20", "--seed", "9", "--out", "c.jsonl"]);
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn nps_zero_count_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-model", "--out", "m.json"]);
    let out = glass(dir.path(), &["nps", "--model", "m.json", "--count", "0", "--out", "c.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn nps_default_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-model", "--planted-count", "8", "--out", "m.json"]);
    let t = Instant::now();
    ok(dir.path(), &["nps", "--model", "m.json", "--out", "c.jsonl"]);
    let took = t.elapsed();
    assert!(took < Duration::from_secs(60), "default NPS took {took:?}");
}

#[test]
fn missing_input_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = glass(dir.path(), &["nps", "--model", "absent.json", "--out", "c.jsonl"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn global_act_on_one_document_equals_local() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model", "--seed", "3", "--out", "m.json"]);
    ok(d, &["nps", "--model", "m.json", "--count", "1", "--length", "25", "--out", "one.jsonl"]);
    ok(d, &["stats", "--model", "m.json", "--corpus", "one.jsonl", "--kind", "global-act", "--out", "g.json"]);
    ok(d, &["stats", "--model", "m.json", "--corpus", "one.jsonl", "--kind", "local", "--out", "l.json"]);
    let g: ImportanceStats = load(&d.join("g.json")).unwrap();
    let l: ImportanceStats = load(&d.join("l.json")).unwrap();
    assert_eq!(g.layers, l.layers);

    let corpus: glass_core::importance::Corpus = load(&d.join("one.jsonl")).unwrap();
    let text: Vec<String> = corpus.documents[0].iter().map(|t| t.to_string()).collect();
    std::fs::write(d.join("p.txt"), text.join(" ")).unwrap();
    ok(d, &["stats", "--model", "m.json", "--prompt-file", "p.txt", "--kind", "local", "--out", "p.json"]);
    let p: ImportanceStats = load(&d.join("p.json")).unwrap();
    assert_eq!(p.layers, l.layers);
}

#[test]
fn global_impact_needs_targets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model", "--out", "m.json"]);
    let corpus = glass_core::importance::Corpus::external(vec![vec![0], vec![5]], 64).unwrap();
    glass_core::storage::save(&corpus, &d.join("short.jsonl")).unwrap();
    let out = glass(d, &["stats", "--model", "m.json", "--corpus", "short.jsonl", "--kind", "global-impact", "--out", "s.json"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn locality_table_is_written() {
    let s = Setup::new();
    ok(s.path(), &["stats", "--model", "m.json", "--corpus", "nps.jsonl", "--kind", "global-impact", "--out", "x.json", "--locality-csv", "loc.csv"]);
    let text = std::fs::read_to_string(s.file("loc.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,rank,unit,mean,std,head_mass"));
    assert_eq!(lines.count(), 2 * 16);
}

#[test]
fn kind_mismatch_is_caught_at_mask_time() {
    let s = Setup::new();
    let out = glass(s.path(), &["mask", "--model", "m.json", "--method", "global-act", "--global-stats", "gi.json", "--k", "4", "--out", "x.json"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn mask_budget_and_lambda_policy() {
    let s = Setup::new();
    let d = s.path();
    ok(d, &["mask", "--model", "m.json", "--method", "global-act", "--global-stats", "ga.json", "--density", "1.0", "--out", "full.json"]);
    let full: NeuronMask = load(&s.file("full.json")).unwrap();
    assert_eq!(full.k, 16);

    let out = glass(d, &["mask", "--model", "m.json", "--method", "global-act", "--global-stats", "ga.json", "--k", "4", "--lambda", "0.3", "--out", "w.json"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("λ ignored"));
    let quiet = glass(d, &["mask", "--model", "m.json", "--method", "a-glass", "--global-stats", "ga.json", "--local-stats", "ga.json", "--k", "4", "--out", "q.json"]);
    assert_eq!(code(&quiet), 3, "local slot given global stats");

    let big = tempfile::tempdir().unwrap();
    ok(big.path(), &["gen-model", "--out", "m.json"]);
    ok(big.path(), &["nps", "--model", "m.json", "--count", "2", "--length", "10", "--out", "c.jsonl"]);
    ok(big.path(), &["stats", "--model", "m.json", "--corpus", "c.jsonl", "--kind", "global-act", "--out", "g.json"]);
    ok(big.path(), &["mask", "--model", "m.json", "--method", "global-act", "--global-stats", "g.json", "--density", "0.5", "--out", "h.json"]);
    let half: NeuronMask = load(&big.path().join("h.json")).unwrap();
    assert_eq!((half.width, half.k), (64, 32));
}

#[test]
fn eval_dense_against_dense() {
    let s = Setup::new();
    let d = s.path();
    ok(d, &["mask", "--model", "m.json", "--method", "global-act", "--global-stats", "ga.json", "--density", "1", "--out", "full.json"]);
    ok(d, &["eval", "--model", "m.json", "--docs", "docs.jsonl", "--prompt-len", "10", "--mask", "full.json", "--out-report", "r.json"]);
    let r: EvalReport = load(&s.file("r.json")).unwrap();
    let dense = r.get(EvalMethod::Dense).unwrap();
    let full = &r.methods[1];
    assert_eq!(full.ppl_per_doc, dense.ppl_per_doc);
    assert!(full.kld_per_doc.iter().all(|&k| k == 0.0));
    assert!(dense.kld_per_doc.iter().all(|&k| k == 0.0));
}

#[test]
fn eval_methods_report_and_csv() {
    let s = Setup::new();
    ok(
        s.path(),
        &[
            "eval", "--model", "m.json", "--docs", "docs.jsonl", "--prompt-len", "10", "--methods", "local,a-glass,i-glass",
            "--global-act-stats", "ga.json", "--global-impact-stats", "gi.json", "--k", "8", "--with-oracle",
            "--out-report", "r.json", "--out-csv", "r.csv", "--out-radar", "radar.csv",
        ],
    );
    let r: EvalReport = load(&s.file("r.json")).unwrap();
    r.validate().unwrap();
    assert_eq!(r.methods.len(), 5);
    let radar = std::fs::read_to_string(s.file("radar.csv")).unwrap();
    let lines: Vec<&str> = radar.lines().collect();
    assert_eq!(lines[0], "method,layer_0,layer_1");
    assert_eq!(lines.len(), 1 + 4);
    let rows = glass_core::sweep::read_sweep_csv(&s.file("r.csv")).unwrap();
    assert_eq!(rows.len(), 5 * 3);
}

#[test]
fn stale_stats_exit_3() {
    let s = Setup::new();
    let d = s.path();
    ok(d, &["gen-model", "--seed", "6", "--ffn-width", "16", "--vocab-size", "24", "--out", "other.json"]);
    let out = glass(d, &["mask", "--model", "other.json", "--method", "global-act", "--global-stats", "ga.json", "--k", "4", "--out", "x.json"]);
    assert_eq!(code(&out), 3);
    let text = std::fs::read_to_string(s.file("ga.json")).unwrap().replacen("\"token_count\":", "\"token_count\":1", 1);
    std::fs::write(s.file("tampered.json"), text).unwrap();
    let out = glass(d, &["mask", "--model", "m.json", "--method", "global-act", "--global-stats", "tampered.json", "--k", "4", "--out", "x.json"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

fn small_sweep(dir: &Path, out: &str, seeds: &str) -> Output {
    glass(
        dir,
        &[
            "sweep", "--seeds", seeds, "--densities", "0.25,0.5", "--methods", "local,i-glass", "--documents", "2",
            "--doc-len", "40", "--topic-len", "20", "--nps-count", "4", "--nps-length", "20", "--out-csv", out,
            "--per-seed-csv", &format!("seeds-{out}"),
        ],
    )
}

#[test]
fn sweep_csv_is_reproducible_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_sweep(dir.path(), "a.csv", "0..2").status.success());
    assert!(small_sweep(dir.path(), "b.csv", "0..2").status.success());
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    let rows = glass_core::sweep::read_sweep_csv(&dir.path().join("a.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 3);
    let seeds = glass_core::sweep::read_per_seed_csv(&dir.path().join("seeds-a.csv")).unwrap();
    assert_eq!(seeds.len(), 2 * rows.len());
}

#[test]
fn interrupted_sweep_leaves_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_glass"))
        .current_dir(dir.path())
        .args(["sweep", "--seeds", "0..20", "--out-csv", "s.csv", "--per-seed-csv", "p.csv"])
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(1500));
    child.kill().unwrap();
    child.wait().unwrap();
    let left: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert!(left.is_empty(), "{left:?}");
}

#[test]
fn config_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"gen-model": {"seed": 12, "ffn_width": 8, "out": "cfg.json"}}"#).unwrap();
    ok(d, &["gen-model", "--config", "c.json", "--ffn-width", "6"]);
    let m: glass_core::model::Model = load(&d.join("cfg.json")).unwrap();
    assert_eq!((m.spec.seed, m.spec.ffn_width), (12, 6));
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_glass"))
        .current_dir(dir.path())
        .env("GLASS_THREADS", "many")
        .args(["gen-model", "--out", "m.json"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_glass"))
        .current_dir(dir.path())
        .env("GLASS_THREADS", "2")
        .args(["gen-model", "--out", "m.json"])
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn verify_passes_on_fresh_checkout() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = glass(dir.path(), &["verify", "--suite", "oracles"]);
    let took = t.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(took < Duration::from_secs(120), "verify took {took:?}");
    assert!(out.status.success(), "verify failed:\n{stdout}{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_catches_perturbed_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let out = glass(dir.path(), &["verify", "--perturb-gradient", "1e-3"]);
    assert_eq!(code(&out), 4);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.starts_with("gradient ")).expect("gradient row");
    assert!(line.contains("FAIL"), "{line}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradient"));
}

/// Compare `--help` output with tests/golden; set GLASS_BLESS=1 to rewrite.
#[test]
fn help_matches_golden() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let bless = std::env::var_os("GLASS_BLESS").is_some();
    let dir = tempfile::tempdir().unwrap();
    let mut stale = Vec::new();
    for sub in ["", "gen-model", "nps", "stats", "mask", "eval", "sweep", "verify", "gen-docs"] {
        let mut args: Vec<&str> = if sub.is_empty() { vec![] } else { vec![sub] };
        args.push("--help");
        let text = ok(dir.path(), &args);
        let name = if sub.is_empty() { "glass.txt".to_string() } else { format!("{sub}.txt") };
        let path = golden.join(&name);
        if bless {
            std::fs::create_dir_all(&golden).unwrap();
            std::fs::write(&path, &text).unwrap();
        } else if std::fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            stale.push(name);
        }
    }
    assert!(stale.is_empty(), "help output differs from golden files {stale:?}; rerun with GLASS_BLESS=1");
}
