use std::path::Path;
use std::process::{Command, Output};

fn mhelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhelab"))
        .args(args)
        .env_remove("MHELAB_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn csv_field(text: &str, row: usize, column: &str) -> String {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.nth(row).unwrap().split(',').nth(idx).unwrap().to_string()
}

#[test]
fn params_single_head_table4() {
    let o = mhelab(&["params", "mhe-mul", "--heads", "1", "--head-dim", "1", "--convention", "table4", "--format", "csv"]);
    assert!(o.status.success());
    assert_eq!(csv_field(&stdout(&o), 0, "per_sublayer"), "6");
}

#[test]
fn params_default_totals() {
    let o = mhelab(&["params", "all", "--format", "csv"]);
    let s = stdout(&o);
    let totals: Vec<String> = (0..7).map(|i| csv_field(&s, i, "total")).collect();
    assert_eq!(totals, ["8847360", "28311552", "14155776", "15335424", "21233664", "8875008", "8875008"]);
}

#[test]
fn params_encoder_decoder() {
    let o = mhelab(&[
        "params", "mqa", "mhe-add", "--layers", "6", "--decoder-layers", "6", "--heads", "8", "--format", "csv",
    ]);
    let s = stdout(&o);
    assert_eq!(csv_field(&s, 0, "total"), "10616832");
    assert_eq!(csv_field(&s, 1, "total"), "6515712");
    let o = mhelab(&[
        "params", "mqa", "--layers", "6", "--decoder-layers", "6", "--heads", "8", "--no-cross-attention", "--format",
        "csv",
    ]);
    assert_eq!(csv_field(&stdout(&o), 0, "total"), "7077888");
}

#[test]
fn memory_defaults_match_block_model() {
    let o = mhelab(&["memory", "mha", "--format", "csv"]);
    let s = stdout(&o);
    assert_eq!(csv_field(&s, 0, "params"), "2359296");
    assert_eq!(csv_field(&s, 0, "act_bytes"), "25165824");
    assert_eq!(csv_field(&s, 0, "saving_pct"), "0.00");
}

#[test]
fn sweep_defaults_to_csv_and_empty_range_has_header() {
    let o = mhelab(&["sweep", "--heads-range", "1:3", "--variants", "mha,mhe-mul"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.starts_with("variant,layers,heads,head_dim,qkv_params"));
    assert_eq!(s.lines().count(), 1 + 2 * 3);
    let o = mhelab(&["sweep", "--heads-range", "5:3"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn sweep_needs_a_shape() {
    assert_eq!(mhelab(&["sweep"]).status.code(), Some(2));
    assert_eq!(mhelab(&["sweep", "--grid", "12x"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mhelab(&["params", "gqa"]).status.code(), Some(2));
    assert_eq!(mhelab(&["params", "--heads", "0"]).status.code(), Some(2));
    assert_eq!(mhelab(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing.ckpt");
    let text = dir.path().join("t.txt");
    std::fs::write(&text, "abc").unwrap();
    let o = mhelab(&["eval", "--checkpoint", path.to_str().unwrap(), "--text", text.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# defaults\nheads = 1\nhead_dim = 1\nconvention = table4\nformat = csv\n").unwrap();
    let c = cfg.to_str().unwrap();
    let o = mhelab(&["params", "mhe-mul", "--config", c]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_field(&stdout(&o), 0, "per_sublayer"), "6");
    let o = mhelab(&["--config", c, "params", "mhe-mul", "--heads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_field(&stdout(&o), 0, "heads"), "2");
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.jsonl");
    let o = mhelab(&["params", "sha", "--format", "json-lines", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let line = std::fs::read_to_string(&out).unwrap();
    assert!(line.starts_with(r#"{"variant":"sha""#), "{line}");
}

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> (Output, String) {
    let ckpt = dir.join(name);
    let mut args = vec![
        "train", "--layers", "1", "--heads", "2", "--head-dim", "2", "--vocab", "6", "--prefix-len", "3", "--batch", "4",
        "--checkpoint", ckpt.to_str().unwrap(), "--format", "csv",
    ];
    args.extend_from_slice(extra);
    (mhelab(&args), ckpt.to_str().unwrap().to_string())
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let (o, ckpt) = train_tiny(dir.path(), "m.ckpt", &["--steps", "5", "--curve", curve.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trained 5 steps"));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 6);
    let tokens = dir.path().join("ids.txt");
    std::fs::write(&tokens, "0 1 2 3 4 0 1 2 3 4 0 1").unwrap();
    let o = mhelab(&["eval", "--checkpoint", &ckpt, "--tokens", tokens.to_str().unwrap(), "--stride", "2", "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ppl: f64 = csv_field(&stdout(&o), 0, "perplexity").parse().unwrap();
    assert!(ppl > 1.0 && ppl < 12.0, "{ppl}");
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ckpt) = train_tiny(dir.path(), "init.ckpt", &["--steps", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&ckpt).exists());
    let (o2, ckpt2) = train_tiny(dir.path(), "init2.ckpt", &["--steps", "0"]);
    assert!(o2.status.success());
    assert_eq!(std::fs::read(ckpt).unwrap(), std::fs::read(ckpt2).unwrap());
}

#[test]
fn gradcheck_passes_and_reports_injected_fault() {
    let o = mhelab(&["gradcheck", "mhe-add", "--format", "csv"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = mhelab(&["gradcheck", "mhe-add", "--inject-fault", "softmax_rows", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("primitive,softmax_rows,") && l.ends_with(",false")));
}

#[test]
fn metrics_flags_only_rounding_cells() {
    let o = mhelab(&["metrics", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(1));
    let s = stdout(&o);
    let mut failing: Vec<String> = s
        .lines()
        .skip(1)
        .filter(|l| l.contains(",false"))
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(" "))
        .collect();
    failing.sort();
    assert_eq!(
        failing,
        [
            "wmt14-en-de/encoder-decoder EL-att",
            "wmt14-en-de/encoder-decoder MHE-Add",
            "wmt14-en-de/encoder-decoder MHE-Mul"
        ]
    );
    let o = mhelab(&["metrics", "--accept-rounding"]);
    assert!(o.status.success());
}

#[test]
fn metrics_reads_user_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    std::fs::write(&p, "benchmark,model,score,indicator_kind\nb,sha,50,direct\nb,mha,100,direct\nb,mhe-mul,90,direct\n").unwrap();
    let o = mhelab(&["metrics", "--scores", p.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert_eq!(csv_field(&s, 2, "prr"), "90");
    let peop: f64 = csv_field(&s, 2, "peop").parse().unwrap();
    assert!((peop - 256.0).abs() < 1e-9, "{peop}");
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "benchmark,model,score,indicator_kind\nb,mha,1,direct\n").unwrap();
    assert_eq!(mhelab(&["metrics", "--scores", bad.to_str().unwrap()]).status.code(), Some(3));
}
