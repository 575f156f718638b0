use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urdu-parseq"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL_MODEL: &str = "embed_dim = 16\nheads = 2\nenc_layers = 1\ndec_layers = 1\nff_dim = 32\n\
    image_height = 16\nimage_width = 48\npatch_height = 16\npatch_width = 4\nmax_label_len = 7\n";

fn write_config(dir: &Path, extra: &str) {
    let text = format!(
        "{SMALL_MODEL}batch_size = 4\nval_interval = 2\n\
         train_manifest = data/manifest.tsv\nval_manifest = data/manifest.tsv\nvocab = data/vocab.tsv\n\
         checkpoint_dir = ck\nmetrics_log = metrics.tsv\nreport = report.tsv\n{extra}"
    );
    fs::write(dir.join("run.cfg"), text).unwrap();
}

#[test]
fn synth_writes_manifest_images_and_vocab() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.cfg"), SMALL_MODEL).unwrap();
    let out = cli(&["synth", "--out", "a", "--samples", "12", "--seed", "3", "--config", "g.cfg"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    cli(&["synth", "--out", "b", "--samples", "12", "--seed", "3", "--config", "g.cfg"], dir.path());
    let manifest = fs::read_to_string(dir.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    for name in ["manifest.tsv", "vocab.tsv", "images/000007.pgm"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap()
        );
    }
    let img = fs::read(dir.path().join("a/images/000000.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n48 16\n255\n"));

    let empty = cli(&["synth", "--out", "c", "--samples", "0"], dir.path());
    assert_eq!(code(&empty), 0);
    assert_eq!(fs::read_to_string(dir.path().join("c/manifest.tsv")).unwrap(), "");
}

#[test]
fn synth_accepts_a_lexicon_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("words.txt"), "سلام\nکتاب\n").unwrap();
    let out = cli(&["synth", "--out", "d", "--samples", "6", "--lexicon", "words.txt"], dir.path());
    assert_eq!(code(&out), 0);
    let manifest = fs::read_to_string(dir.path().join("d/manifest.tsv")).unwrap();
    assert!(manifest.lines().all(|l| l.ends_with("سلام") || l.ends_with("کتاب")));
}

#[test]
fn train_eval_infer_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, "max_steps = 0\n");
    fs::write(p.join("g.cfg"), SMALL_MODEL).unwrap();
    assert_eq!(code(&cli(&["synth", "--out", "data", "--samples", "8", "--config", "g.cfg"], p)), 0);

    let out = cli(&["train", "--config", "run.cfg"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(p.join("ck/last.ck").exists());

    write_config(p, "max_steps = 4\n");
    let out = cli(&["train", "--config", "run.cfg", "--seed", "5"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(p.join("metrics.tsv")).unwrap().lines().count(), 2);

    for extra in [&[][..], &["--mode", "nar", "--refine", "2"][..]] {
        let mut args = vec!["eval", "--config", "run.cfg", "--checkpoint", "ck/last.ck", "--out", "r.tsv"];
        args.extend_from_slice(extra);
        let out = cli(&args, p);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("cer="));
        let report = fs::read_to_string(p.join("r.tsv")).unwrap();
        assert_eq!(report.lines().count(), 9);
        assert!(report.lines().last().unwrap().starts_with("# cer="));
    }

    let out = cli(&["infer", "--checkpoint", "ck/last.ck", "data/images/000000.pgm"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).ends_with('\n'));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&cli(&["frobnicate"], p)), 1);
    assert_eq!(code(&cli(&["eval", "--mode", "sideways"], p)), 1);

    fs::write(p.join("bad.cfg"), "embed_dimm = 3\n").unwrap();
    let out = cli(&["train", "--config", "bad.cfg"], p);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("embed_dimm"));

    assert_eq!(code(&cli(&["train", "--config", "missing.cfg"], p)), 2);
    assert_eq!(code(&cli(&["infer", "--checkpoint", "missing.ck", "x.pgm"], p)), 2);

    write_config(p, "max_steps = 0\n");
    fs::write(p.join("g.cfg"), SMALL_MODEL).unwrap();
    cli(&["synth", "--out", "data", "--samples", "2", "--config", "g.cfg"], p);
    assert_eq!(code(&cli(&["train", "--config", "run.cfg"], p)), 0);
    let mut bytes = fs::read(p.join("ck/last.ck")).unwrap();
    bytes[8] = 99;
    fs::write(p.join("future.ck"), bytes).unwrap();
    let out = cli(&["infer", "--checkpoint", "future.ck", "data/images/000000.pgm"], p);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_rule() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["gradcheck", "--seed", "3"], dir.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert_eq!(text.lines().count(), 15);
    assert!(text.lines().all(|l| l.ends_with("ok")));

    let out = cli(&["gradcheck", "--fault", "layernorm"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
