use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "embed_dim = 8\ndepth = 1\nheads = 2\nepochs = 1\nn_sources = 2\nn_copies = 1\n\
n_distractors = 1\nn_queries = 2\nk_gt = 2\ntrain_sources = 8\ntrain_copies = 0\ntrain_distractors = 1\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chartsearch"))
        .current_dir(dir)
        .arg("--config")
        .arg(dir.join("tiny.cfg"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn end_to_end_commands() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();

    ok(&run(d, &["gen-corpus", "--out", "tables", "--n-tables", "3"]));
    assert_eq!(std::fs::read_dir(d.join("tables")).unwrap().count(), 3);

    ok(&run(d, &["gen-bench", "--out", "bench"]));
    assert!(d.join("bench/manifest.json").exists());

    let log = ok(&run(d, &["train", "--out", "ckpt"]));
    assert!(log.starts_with("0\t"));
    assert!(d.join("ckpt/model.bin").exists() && d.join("ckpt/epoch000.bin").exists());

    ok(&run(
        d,
        &[
            "build-index",
            "--corpus",
            "bench/corpus",
            "--ckpt",
            "ckpt/model.bin",
            "--out",
            "bench/index.bin",
        ],
    ));

    let q = std::fs::read_dir(d.join("bench/queries"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let q = q.to_str().unwrap();
    let out = ok(&run(
        d,
        &[
            "query",
            "--chart",
            q,
            "--index",
            "bench/index.bin",
            "--ckpt",
            "ckpt/model.bin",
            "--k",
            "2",
            "--no-index",
        ],
    ));
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("1\t"));

    let text = ok(&run(
        d,
        &[
            "eval",
            "--bench",
            "bench",
            "--ckpt",
            "ckpt/model.bin",
            "--no-index",
            "--json",
            "e.json",
        ],
    ));
    assert!(text.contains("overall"));
    let first = std::fs::read_to_string(d.join("e.json")).unwrap();
    ok(&run(
        d,
        &[
            "eval",
            "--bench",
            "bench",
            "--ckpt",
            "ckpt/model.bin",
            "--no-index",
            "--json",
            "e.json",
        ],
    ));
    assert_eq!(first, std::fs::read_to_string(d.join("e.json")).unwrap());
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));
    std::fs::write(d.join("tiny.cfg"), "heads = 3\n").unwrap();
    assert_eq!(run(d, &["gen-bench", "--out", "b"]).status.code(), Some(2));
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let o = run(
        d,
        &[
            "build-index",
            "--corpus",
            "missing",
            "--ckpt",
            "missing.bin",
            "--out",
            "i.bin",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    ok(&run(d, &["train", "--out", "ckpt"]));
    std::fs::write(d.join("tiny.cfg"), TINY.replace("embed_dim = 8", "embed_dim = 16")).unwrap();
    let o = run(
        d,
        &[
            "build-index",
            "--corpus",
            "missing",
            "--ckpt",
            "ckpt/model.bin",
            "--out",
            "i.bin",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "checkpoint/config mismatch");
    std::fs::write(d.join("junk.bin"), b"not a model").unwrap();
    let o = run(
        d,
        &[
            "build-index",
            "--corpus",
            "missing",
            "--ckpt",
            "junk.bin",
            "--out",
            "i.bin",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
}
