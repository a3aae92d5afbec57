use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[corpus.split]
tagger = 120
speech = 160
dev = 40
test = 40
[corpus.item]
t_max = 80
[tagger]
hidden = [32, 32]
n_vis = 20
steps = 300
[model]
conv = [{channels=8, kernel=5, stride=1}, {channels=16, kernel=5, stride=2}]
n_bow = 20
[train]
batch_size = 8
max_steps = 60
eval_interval = 20
set_c_fraction = 0.25
[train.contrastive]
n_neg = 3
[sweep]
fractions = [0.25]
seeds = [1]
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn vgkw(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vgkw"))
            .current_dir(self.dir.path())
            .env("VGKW_OUT_DIR", self.out())
            .arg("--config")
            .arg("small.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.vgkw(args);
        assert!(
            out.status.success(),
            "vgkw {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn prepared() -> Self {
        let ws = Self::new();
        ws.ok(&["generate"]);
        ws.ok(&["train-tagger"]);
        ws
    }

    fn trained(system: &str) -> (Self, PathBuf) {
        let ws = Self::prepared();
        let run = ws.out().join("run");
        ws.ok(&["train", "--system", system, "--run-dir", run.to_str().unwrap()]);
        (ws, run)
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

/// (utterance id, score) rows of `vgkw retrieve` output.
fn hits(stdout: &str) -> Vec<(u32, f64)> {
    stdout
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            (cols[1].parse().unwrap(), cols[2].parse().unwrap())
        })
        .collect()
}

fn first_queries(judgments: &Path, n: usize) -> Vec<String> {
    let text = std::fs::read_to_string(judgments).unwrap();
    let mut words: Vec<String> = Vec::new();
    for line in text.lines().skip(2) {
        let w = line.split('\t').next().unwrap().to_string();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words.truncate(n);
    words
}

#[test]
fn generate_is_deterministic() {
    let (a, b) = (Workspace::new(), Workspace::new());
    let sa = a.ok(&["generate"]);
    let sb = b.ok(&["generate"]);
    assert_eq!(sa, sb);
    assert_eq!(field(&sa, "items"), "360");
    assert_eq!(field(&sa, "test"), "40");
    for f in ["corpus", "judgments.tsv", "config.toml"] {
        assert!(a.out().join(f).exists(), "{f}");
    }
    let other = a.vgkw(&["--set", "corpus.seed=99", "generate", "--out-dir", "other"]);
    assert_eq!(code(&other), 0);
    assert_ne!(field(&String::from_utf8(other.stdout).unwrap(), "checksum"), field(&sa, "checksum"));
}

#[test]
fn invalid_config_exits_1_without_side_effects() {
    let ws = Workspace::new();
    let out = ws.vgkw(&["--set", "train.set_c_fraction=1.5", "generate"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("set_c_fraction"), "{err}");
    assert!(!ws.out().exists());

    assert_eq!(code(&ws.vgkw(&["--set", "no.such.key=1", "generate"])), 1);
    assert_eq!(code(&ws.vgkw(&["frobnicate"])), 1);
    assert_eq!(code(&ws.vgkw(&["--help"])), 0);
}

#[test]
fn runtime_failures_exit_2() {
    let ws = Workspace::new();
    // No corpus generated yet.
    let out = ws.vgkw(&["train-tagger"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = ws.vgkw(&["evaluate", "--run", "missing"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_checkpoints_and_rejects_unknown_systems() {
    let ws = Workspace::prepared();
    let out = ws.ok(&["train", "--system", "mtl", "--fraction", "0.05", "--seed", "3"]);
    let run = PathBuf::from(field(&out, "run"));
    assert!(run.starts_with(ws.out().join("runs")));
    for f in ["best.ckpt", "last.ckpt", "log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert!(log.contains("\"visual\"") && log.contains("\"text\""), "mtl alternates tasks");
    assert_eq!(field(&out, "steps"), "60");

    let bad = ws.vgkw(&["train", "--system", "multimodal"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("multimodal"));
    assert_eq!(code(&ws.vgkw(&["train", "--system", "mtl", "--fraction", "2"])), 1);
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let ws = Workspace::prepared();
    let (full, part) = (ws.out().join("full"), ws.out().join("part"));
    ws.ok(&["train", "--system", "mtl", "--run-dir", full.to_str().unwrap()]);
    ws.ok(&["--set", "train.max_steps=20", "train", "--system", "mtl", "--run-dir", part.to_str().unwrap()]);
    ws.ok(&["train", "--system", "mtl", "--run-dir", part.to_str().unwrap(), "--resume"]);
    for f in ["best.ckpt", "last.ckpt", "log.jsonl"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
    let fresh = ws.out().join("fresh");
    assert_eq!(code(&ws.vgkw(&["train", "--system", "mtl", "--run-dir", fresh.to_str().unwrap(), "--resume"])), 1);
}

#[test]
fn evaluate_is_repeatable_and_per_head() {
    let (ws, run) = Workspace::trained("mtl");
    let a = ws.ok(&["evaluate", "--run", run.to_str().unwrap()]);
    let first = std::fs::read(run.join("report_ensemble.json")).unwrap();
    let b = ws.ok(&["evaluate", "--run", run.to_str().unwrap()]);
    assert_eq!(a, b);
    assert_eq!(first, std::fs::read(run.join("report_ensemble.json")).unwrap());
    for head in ["vis", "bow", "ensemble"] {
        assert!(run.join(format!("report_{head}.tsv")).exists());
    }

    let visual = ws.out().join("visual");
    ws.ok(&["train", "--system", "visual-baseline", "--run-dir", visual.to_str().unwrap()]);
    ws.ok(&["evaluate", "--run", visual.to_str().unwrap()]);
    assert!(visual.join("report_vis.json").exists());
    assert!(!visual.join("report_bow.json").exists());
    assert!(!visual.join("report_ensemble.json").exists());
}

#[test]
fn evaluate_matches_ranking_oracle_on_hand_judgments() {
    let (ws, run) = Workspace::trained("visual-baseline");
    let words = first_queries(&ws.out().join("judgments.tsv"), 2);
    let run_s = run.to_str().unwrap();

    let mut rankings = Vec::new();
    for w in &words {
        let out = ws.ok(&["retrieve", "--run", run_s, "--query", w, "--threshold", "0", "--top-k", "1000"]);
        rankings.push(hits(&out));
    }
    let ids: Vec<u32> = {
        let mut ids: Vec<u32> = rankings[0].iter().map(|h| h.0).collect();
        ids.sort();
        ids
    };
    assert_eq!(ids.len(), 40);
    let votes = |q: usize, id: u32| ((id as usize * (q + 3) + q) % 6) as u8;

    let mut tsv = String::from("# annotators=5\nquery\tutterance\tvotes\n");
    for (q, w) in words.iter().enumerate() {
        for &id in &ids {
            tsv.push_str(&format!("{w}\t{id}\t{}\n", votes(q, id)));
        }
    }
    let jpath = ws.dir.path().join("hand.tsv");
    std::fs::write(&jpath, tsv).unwrap();
    let reports = ws.dir.path().join("reports");
    ws.ok(&[
        "evaluate",
        "--run",
        run_s,
        "--judgments",
        jpath.to_str().unwrap(),
        "--report-dir",
        reports.to_str().unwrap(),
    ]);

    let report = std::fs::read_to_string(reports.join("report_vis.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = report.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    for (q, w) in words.iter().enumerate() {
        let row = rows.iter().find(|r| r[1] == w.as_str()).unwrap();
        let labels: Vec<bool> = rankings[q].iter().map(|h| votes(q, h.0) >= 3).collect();
        let n_pos = labels.iter().filter(|&&l| l).count();
        let mut hits_so_far = 0;
        let mut ap = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            if l {
                hits_so_far += 1;
                ap += hits_so_far as f64 / (r + 1) as f64;
            }
        }
        ap /= n_pos as f64;
        let p_at_n = labels[..n_pos].iter().filter(|&&l| l).count() as f64 / n_pos as f64;
        let p_at_10 = labels[..10].iter().filter(|&&l| l).count() as f64 / 10.0;
        assert_eq!(row[2].parse::<usize>().unwrap(), n_pos);
        assert!((row[3].parse::<f64>().unwrap() - p_at_10).abs() < 1e-6, "{w} P@10");
        assert!((row[4].parse::<f64>().unwrap() - p_at_n).abs() < 1e-6, "{w} P@N");
        assert!((row[5].parse::<f64>().unwrap() - ap).abs() < 1e-6, "{w} AP {} vs {ap}", row[5]);
    }
    assert_eq!(rows.iter().filter(|r| r[0] != "ALL").count(), 2);
}

#[test]
fn retrieve_respects_threshold_and_top_k() {
    let (ws, run) = Workspace::trained("mtl");
    let run_s = run.to_str().unwrap();
    let word = &first_queries(&ws.out().join("judgments.tsv"), 1)[0];

    let none = ws.ok(&["retrieve", "--run", run_s, "--query", word, "--threshold", "1.0"]);
    assert!(hits(&none).is_empty());

    let all = hits(&ws.ok(&["retrieve", "--run", run_s, "--query", word, "--threshold", "0", "--top-k", "40"]));
    assert_eq!(all.len(), 40);
    assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
    let top = hits(&ws.ok(&["retrieve", "--run", run_s, "--query", word, "--threshold", "0", "--top-k", "5"]));
    assert_eq!(top, all[..5]);

    let cut = all[10].1;
    let above = hits(&ws.ok(&[
        "retrieve", "--run", run_s, "--query", word, "--threshold", &cut.to_string(), "--top-k", "40",
    ]));
    assert!(above.iter().all(|h| h.1 >= cut - 1e-6));

    assert_eq!(code(&ws.vgkw(&["retrieve", "--run", run_s, "--query", "notaword"])), 1);
    assert_eq!(code(&ws.vgkw(&["retrieve", "--run", run_s, "--query", word, "--head", "audio"])), 1);
}

#[test]
fn sweep_resumes_and_keeps_the_visual_baseline_flat() {
    let ws = Workspace::new();
    let args = ["--set", "sweep.fractions=[0.25, 1.0]", "sweep"];
    let first = ws.ok(&args);
    let report = ws.out().join("sweep");
    let json = std::fs::read(report.join("sweep_report.json")).unwrap();
    let second = ws.ok(&args);
    assert_eq!(first, second);
    assert_eq!(json, std::fs::read(report.join("sweep_report.json")).unwrap());

    let rows = std::fs::read_to_string(report.join("curve_ap.tsv")).unwrap();
    let visual: Vec<&str> = rows
        .lines()
        .filter(|l| l.split('\t').nth(1) == Some("visual-baseline"))
        .map(|l| l.split('\t').nth(3).unwrap())
        .collect();
    assert_eq!(visual.len(), 2);
    assert_eq!(visual[0], visual[1]);

    let other = ws.vgkw(&["--set", "sweep.seeds=[2]", "sweep"]);
    assert_eq!(code(&other), 1);
}

#[test]
fn gradcheck_passes_on_two_seeds() {
    let ws = Workspace::new();
    let report = ws.dir.path().join("grad.json");
    let out = ws.ok(&["gradcheck", "--seeds", "2", "--report", report.to_str().unwrap()]);
    assert!(!out.contains("FAIL"));
    assert!(std::fs::read_to_string(report).unwrap().contains("combined"));
    assert_eq!(code(&ws.vgkw(&["gradcheck", "--seeds", "0"])), 1);
}
