use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: &str = "\
pretrain_size = 300
sft_train_size = 120
sft_test_size = 20
context_limit = 48
teacher_embed_dim = 16
teacher_ff_dim = 32
teacher_heads = 2
teacher_layers = 1
student_embed_dim = 8
student_ff_dim = 16
student_heads = 2
batch_size = 8
warmup_steps = 5
teacher_pretrain_steps = 20
teacher_sft_steps = 20
student_pretrain_steps = 20
distill_steps = 10
decode_limit = 12
";

fn dkd(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dkd"));
    c.args(args);
    if let Some(r) = env_root {
        c.env("DKD_RUN_DIR", r);
    }
    c.output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn usage_and_config_errors_are_single_lines() {
    let out = dkd(&["frobnicate"], None);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.starts_with("error[usage]: ") && err.lines().count() == 1, "{err}");

    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    let out = dkd(&["gen-data", "--run-dir", run.to_str().unwrap(), "--set", "bogus=1", "--lambda", "2"], None);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.starts_with("error[config]: ") && err.lines().count() == 1, "{err}");
    assert!(err.contains("bogus") && err.contains("lambda"), "{err}");
    assert!(!run.exists());

    let out = dkd(&["distill", "--run-dir", run.to_str().unwrap(), "--set", "method=v3"], None);
    assert!(text(&out.stderr).starts_with("error[non-tunable]: "), "{}", text(&out.stderr));

    assert!(dkd(&["--help"], None).status.success());
}

#[test]
fn run_directories_are_timestamped_under_the_root() {
    let root = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--seed", "5", "--set", "pretrain_size=50", "--set", "sft_train_size=10", "--set", "sft_test_size=5"];
    assert!(dkd(&args, Some(root.path())).status.success());
    assert!(dkd(&args, Some(root.path())).status.success());
    let mut names: Vec<String> =
        std::fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names.len(), 2, "{names:?}");
    assert!(names.iter().all(|n| n.contains("-seed5")), "{names:?}");
    let dir = root.path().join(&names[0]);
    let cfg = std::fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(cfg.contains("seed = 5") && cfg.contains("pretrain_size = 50"), "{cfg}");
    assert!(dir.join("corpus/manifest.txt").exists());
}

#[test]
fn stages_then_distill_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.txt");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    let run = |sub: &str, extra: &[&str]| {
        let rd = dir.path().join(sub);
        let mut args = vec![sub, "--config", c, "--run-dir", rd.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = dkd(&args, None);
        assert!(out.status.success(), "{sub}: {}", text(&out.stderr));
        (rd, text(&out.stdout))
    };
    let corpus = dir.path().join("corpus");
    let out = dkd(&["gen-data", "--config", c, "--run-dir", dir.path().join("g").to_str().unwrap(), "--out", corpus.to_str().unwrap()], None);
    assert!(out.status.success());
    let cd = corpus.to_str().unwrap();

    let train = |stage: &str, extra: &[&str]| {
        let rd = dir.path().join(stage);
        let mut args = vec!["train", "--stage", stage, "--config", c, "--corpus-dir", cd, "--run-dir", rd.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = dkd(&args, None);
        assert!(out.status.success(), "{stage}: {}", text(&out.stderr));
        text(&out.stdout).trim().strip_prefix("snapshot=").unwrap().to_string()
    };
    let traw = train("teacher-raw", &[]);
    let tft = train("teacher-ft", &["--teacher-raw-snapshot", &traw]);
    let sraw = train("student-raw", &[]);

    let (rd, out) = run(
        "distill",
        &["--corpus-dir", cd, "--teacher-raw-snapshot", &traw, "--teacher-ft-snapshot", &tft, "--student-raw-snapshot", &sraw, "--method", "delta", "--alpha", "0.5"],
    );
    assert!(out.contains("rouge1_f="), "{out}");
    assert!(rd.join("student_delta.snap").exists());
    let log = std::fs::read_to_string(rd.join("logs/distill_delta.log")).unwrap();
    assert_eq!(log.lines().count(), 10);
    assert!(log.lines().all(|l| l.contains("method=delta lambda=0.5 alpha=0.5 ")), "{log}");

    let snap = rd.join("student_delta.snap");
    let (_, out) = run("evaluate", &["--corpus-dir", cd, "--snapshot", snap.to_str().unwrap()]);
    assert!(out.contains("model=student_delta") && out.contains("response_ce="), "{out}");

    let bad = dkd(&["evaluate", "--config", c, "--corpus-dir", cd, "--run-dir", rd.join("x").to_str().unwrap(), "--snapshot", "/nonexistent.snap"], None);
    assert!(text(&bad.stderr).starts_with("error[io]: ") || text(&bad.stderr).starts_with("error[snapshot]: "), "{}", text(&bad.stderr));
}

#[test]
fn compare_prints_the_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.txt");
    std::fs::write(&cfg, SMALL).unwrap();
    let rd = dir.path().join("cmp");
    let out = dkd(&["compare", "--config", cfg.to_str().unwrap(), "--run-dir", rd.to_str().unwrap(), "--methods", "sft,delta"], None);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("| Benchmark") && s.contains("ROUGE_1") && s.contains("Delta-KD"), "{s}");
    assert!(rd.join("compare.txt").exists() && rd.join("student_sft.snap").exists());
}

#[test]
fn gradcheck_reports_and_fails_above_tolerance() {
    let out = dkd(&["gradcheck", "--model", "tiny", "--loss", "v4", "--samples", "5"], None);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("max_rel_error="));
    let out = dkd(&["gradcheck", "--loss", "fkl", "--epsilon", "0.5", "--tolerance", "1e-12"], None);
    assert!(text(&out.stderr).starts_with("error[domain]: "), "{}", text(&out.stderr));
}

#[test]
fn serve_logits_answers_until_interrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.txt");
    std::fs::write(&cfg, SMALL).unwrap();
    let rd = dir.path().join("t");
    let out = dkd(&["train", "--stage", "teacher-raw", "--config", cfg.to_str().unwrap(), "--run-dir", rd.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let snap = rd.join("teacher_raw.snap");
    let sock = dir.path().join("serve.sock");
    let mut child = Command::new(env!("CARGO_BIN_EXE_dkd"))
        .args(["serve-logits", "--teacher-raw", snap.to_str().unwrap(), "--listen", sock.to_str().unwrap()])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    assert!(first.starts_with("listening="), "{first}");

    let client = deltakd::wire::LogitClient::new(deltakd::wire::Endpoint::Unix(sock));
    let info = client.model_info().unwrap();
    assert_eq!((info.vocab, info.role_mask), (64, 1));

    assert!(Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap().success());
    let last = lines.next().unwrap().unwrap();
    assert!(last.starts_with("stopped requests="), "{last}");
    assert!(child.wait().unwrap().success());
}
