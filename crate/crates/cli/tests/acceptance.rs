use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unicode_joining_type::{get_joining_type, JoiningType};
use urdu_parseq::eval::{aggregate, edit_distance};
use urdu_parseq::imaging::{background_level, gaussian_filter, load_manifest, rotate, write_dataset, Sample};
use urdu_parseq::lexicon::{demo_lexicon, random_word, URDU_LETTERS};
use urdu_parseq::model::{DecodeBlock, Dropout, Recognizer, RecognizerConfig};
use urdu_parseq::plm::{masks_from_permutation, plm_loss, Permutation};
use urdu_parseq::shaping::{shape_word, GlyphForm, GlyphVocabulary, Position, EOS, NUM_SPECIALS};
use urdu_parseq::tensor::{Graph, OpKind};

const MAX_STEPS: usize = 1000;
const TIME_BUDGET_SECS: f64 = 1800.0;
const MAX_CER: f64 = 0.05;
const MIN_WORD_ACCURACY: f64 = 0.90;

type Outcome = Result<String, String>;

fn main() {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&work);
    fs::create_dir_all(&work).expect("work dir");

    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n}: {tag}  {name}  {detail}");
    };

    report(1, "published-number status", status());
    report(3, "single identity permutation", single_permutation_reduction());
    report(4, "mask oracle", mask_oracle());
    report(5, "gradient suite", gradient_suite(&work));
    report(6, "edit distance oracle", cer_oracle());
    report(7, "shaping round trip", shaping_round_trip());

    let first = train_run(&work, "run1");
    let second = first.as_ref().ok().map(|_| train_run(&work, "run2"));
    report(2, "end-to-end synthetic training", first.as_ref().map_err(Clone::clone).and_then(check_training));
    report(8, "determinism", match (&first, second) {
        (Ok(a), Some(Ok(b))) => same_logs(a, &b),
        (_, Some(Err(e))) => Err(e),
        _ => Err("first run failed".into()),
    });
    report(9, "robustness probes", match &first {
        Ok(run) => robustness(&work, run),
        Err(_) => Err("no trained checkpoint".into()),
    });

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn status() -> Outcome {
    Ok("published CER, losses and the commercial OCR comparison need the private 160k-image corpus; \
        criteria 2-9 are the checkable substitutes"
        .into())
}

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urdu-parseq"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: Output, what: &str) -> Result<String, String> {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    match out.status.code() {
        Some(0) => Ok(stdout),
        code => Err(format!(
            "{what} exited {code:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        )),
    }
}

fn field(summary: &str, key: &str) -> Result<f64, String> {
    summary
        .split(['\t', '\n'])
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no {key} in {summary:?}"))
}

fn single_permutation_reduction() -> Outcome {
    let c = RecognizerConfig {
        embed_dim: 16,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        ff_dim: 32,
        dropout: 0.0,
        permutations: 1,
        image_height: 8,
        image_width: 24,
        patch_height: 4,
        patch_width: 4,
        max_label_len: 6,
        vocab_size: NUM_SPECIALS + 7,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for batch in 0..20 {
        let model = Recognizer::new(c.clone(), batch).map_err(|e| e.to_string())?;
        let image = urdu_parseq::imaging::GrayImage::from_fn(c.image_width, c.image_height, |_, _| {
            rng.random_range(0..=255u8)
        });
        let n = rng.random_range(1..=c.max_label_len);
        let mut targets: Vec<usize> = (0..n).map(|_| rng.random_range(NUM_SPECIALS..c.vocab_size)).collect();
        targets.push(EOS);
        let t = targets.len();

        let mut g = Graph::with_params(model.params());
        let mut drop = Dropout::disabled();
        let memory = model.encode_images(&mut g, &[&image], &mut drop).map_err(|e| e.to_string())?;
        let sets = model
            .decode_train(&mut g, &memory, 0, &targets, &[Permutation::identity(t)], &mut drop)
            .map_err(|e| e.to_string())?;
        let loss = plm_loss(&mut g, &sets, &targets).map_err(|e| e.to_string())?;
        let plm = g.value(loss).item();

        let causal: Vec<bool> = (0..t * t).map(|k| k % t < k / t).collect();
        let block = DecodeBlock::with_mask(0, targets.clone(), &causal);
        let logits = model.decode_blocks(&mut g, &memory, &[block], &mut drop).map_err(|e| e.to_string())?;
        let logits = g.value(logits);
        let mut ce = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ce += max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() - row[y];
        }
        worst = worst.max((plm - ce / t as f64).abs());
    }
    let detail = format!("max |plm - causal ce| = {worst:.2e} over 20 batches (< 1e-12)");
    if worst < 1e-12 { Ok(detail) } else { Err(detail) }
}

fn orders(t: usize) -> Vec<Vec<usize>> {
    if t == 0 {
        return vec![vec![]];
    }
    orders(t - 1)
        .into_iter()
        .flat_map(|rest| {
            (0..=rest.len()).map(move |slot| {
                let mut o = rest.clone();
                o.insert(slot, t - 1);
                o
            })
        })
        .collect()
}

fn mask_oracle() -> Outcome {
    let (mut checked, mut mismatches) = (0, 0);
    for t in 1..=5 {
        for order in orders(t) {
            let mut want = vec![false; t * t];
            for (s, &i) in order.iter().enumerate() {
                for &j in &order[..s] {
                    want[i * t + j] = true;
                }
            }
            let p = Permutation::from_order(order).map_err(|e| e.to_string())?;
            let m = masks_from_permutation(&p);
            if m.content_mask() != want.as_slice() || m.query_mask() != want.as_slice() {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    let detail = format!("{checked} permutations, {mismatches} mismatches");
    if mismatches == 0 && checked == 153 { Ok(detail) } else { Err(detail) }
}

fn gradient_suite(work: &Path) -> Outcome {
    let text = ok(cli(&["gradcheck"], work), "gradcheck")?;
    let names: Vec<&str> = text.lines().filter_map(|l| l.split('\t').next()).collect();
    for op in OpKind::ALL {
        let n = names.iter().filter(|&&x| x == op.name()).count();
        if n != 1 {
            return Err(format!("{} listed {n} times", op.name()));
        }
    }
    if !names.contains(&"end_to_end") {
        return Err("end_to_end line missing".into());
    }
    let faulty = cli(&["gradcheck", "--fault", "softmax_ce"], work);
    if faulty.status.success() {
        return Err("a flipped softmax_ce rule went unnoticed".into());
    }
    let e2e = text.lines().find(|l| l.starts_with("end_to_end")).unwrap_or_default();
    Ok(format!(
        "{} ops + end_to_end within tolerance, exit 0; flipped rule exits {:?}; {}",
        OpKind::ALL.len(),
        faulty.status.code(),
        e2e.replace('\t', " ")
    ))
}

fn brute(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute(ra, rb) + usize::from(x != y);
            sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
        }
    }
}

fn cer_oracle() -> Outcome {
    let alphabet = ['ا', 'ب', 'پ', 'ت', 'a', 'b'];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let word = |rng: &mut ChaCha8Rng| -> Vec<char> {
        let n = rng.random_range(0..=8);
        (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
    };
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (a, b) = (word(&mut rng), word(&mut rng));
        let (sa, sb): (String, String) = (a.iter().collect(), b.iter().collect());
        if edit_distance(&sa, &sb) != brute(&a, &b) {
            mismatches += 1;
        }
    }
    let pooled = aggregate([("a", "abcd", "abce"), ("b", "abcdef", "abcdf")]).map_err(|e| e.to_string())?;
    let detail = format!("1000 pairs, {mismatches} mismatches; pooled fixture cer = {}", pooled.cer);
    if mismatches == 0 && pooled.cer == 0.2 { Ok(detail) } else { Err(detail) }
}

fn oracle_positions(word: &str) -> Vec<(char, Position)> {
    let letters: Vec<(char, JoiningType)> = word
        .chars()
        .map(|c| (c, get_joining_type(c)))
        .filter(|(_, t)| *t != JoiningType::Transparent)
        .collect();
    let causes_left = |t: JoiningType| matches!(t, JoiningType::DualJoining | JoiningType::JoinCausing);
    let accepts_right = |t: JoiningType| {
        matches!(
            t,
            JoiningType::DualJoining | JoiningType::RightJoining | JoiningType::JoinCausing
        )
    };
    (0..letters.len())
        .map(|i| {
            let (c, t) = letters[i];
            let prev = i > 0 && causes_left(letters[i - 1].1) && accepts_right(t);
            let next = i + 1 < letters.len() && causes_left(t) && accepts_right(letters[i + 1].1);
            let pos = match (prev, next) {
                (false, false) => Position::Isolated,
                (false, true) => Position::Initial,
                (true, true) => Position::Medial,
                (true, false) => Position::Final,
            };
            (c, pos)
        })
        .collect()
}

fn round_trip(vocab: &GlyphVocabulary, w: &str) -> Result<(), String> {
    let back = vocab.encode(w).and_then(|ids| vocab.decode(&ids)).map_err(|e| e.to_string())?;
    if back != w {
        return Err(format!("{w} decoded as {back}"));
    }
    let shaped: Vec<(char, Position)> = shape_word(w)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|f| (f.base, f.position))
        .collect();
    if shaped != oracle_positions(w) {
        return Err(format!("{w} disagrees with the joining oracle"));
    }
    Ok(())
}

fn shaping_round_trip() -> Outcome {
    let lexicon = demo_lexicon();
    let lexicon_vocab = GlyphVocabulary::build(lexicon.iter().copied()).map_err(|e| e.to_string())?;
    for w in &lexicon {
        round_trip(&lexicon_vocab, w)?;
    }
    let repertoire = GlyphVocabulary::from_forms(
        URDU_LETTERS
            .chars()
            .flat_map(|c| Position::ALL.map(|p| GlyphForm::new(c, p)))
            .filter(GlyphForm::is_legal),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        round_trip(&repertoire, &random_word(&mut rng, 1, 11))?;
    }
    for w in ["ب", "ببب", "بابا"] {
        round_trip(&repertoire, w)?;
    }
    Ok(format!("{} lexicon words, 10000 random words, 3 fixtures", lexicon.len()))
}

struct Run {
    dir: PathBuf,
    config: PathBuf,
    train_secs: f64,
    synth_secs: f64,
    eval_summary: String,
    metrics: String,
}

fn run_config(run: &str, max_steps: usize, deskew: bool) -> String {
    let mut text = String::new();
    for line in [
        "image_height = 24",
        "image_width = 96",
        "patch_height = 24",
        "patch_width = 8",
        "grad_chunk = 16",
        "augment = false",
        "val_interval = 100",
        "train_manifest = train/manifest.tsv",
        "val_manifest = val/manifest.tsv",
        "vocab = train/vocab.tsv",
    ] {
        writeln!(text, "{line}").unwrap();
    }
    writeln!(text, "max_steps = {max_steps}").unwrap();
    writeln!(text, "deskew = {deskew}").unwrap();
    writeln!(text, "checkpoint_dir = {run}/ck").unwrap();
    writeln!(text, "metrics_log = {run}/metrics.tsv").unwrap();
    writeln!(text, "report = {run}/report.tsv").unwrap();
    text
}

fn train_run(work: &Path, name: &str) -> Result<Run, String> {
    let config = work.join(format!("{name}.cfg"));
    fs::write(&config, run_config(name, MAX_STEPS, false)).map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap();

    let t = Instant::now();
    if !work.join("train/manifest.tsv").exists() {
        ok(cli(&["synth", "--out", "train", "--samples", "2000", "--seed", "7", "--config", cfg], work), "synth")?;
        ok(cli(&["synth", "--out", "val", "--samples", "200", "--seed", "1007", "--config", cfg], work), "synth")?;
    }
    let synth_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    ok(cli(&["train", "--config", cfg], work), "train")?;
    let train_secs = t.elapsed().as_secs_f64();

    let eval_summary = ok(
        cli(&["eval", "--config", cfg, "--checkpoint", &format!("{name}/ck/last.ck")], work),
        "eval",
    )?;
    let metrics = fs::read_to_string(work.join(name).join("metrics.tsv")).map_err(|e| e.to_string())?;
    Ok(Run { dir: work.join(name), config, train_secs, synth_secs, eval_summary, metrics })
}

fn check_training(run: &Run) -> Outcome {
    let cer = field(&run.eval_summary, "cer")?;
    let acc = field(&run.eval_summary, "word_accuracy")?;
    let last_step: usize = run
        .metrics
        .lines()
        .last()
        .and_then(|l| l.split('\t').next()?.parse().ok())
        .ok_or("empty metrics log")?;
    let secs = run.synth_secs + run.train_secs;

    let samples = load_manifest(&run.dir.parent().unwrap().join("val/manifest.tsv")).map_err(|e| e.to_string())?;
    let report = fs::read_to_string(run.dir.join("report.tsv")).map_err(|e| e.to_string())?;
    let predicted: Vec<&str> = report.lines().filter(|l| !l.starts_with('#')).map(|l| l.split('\t').nth(2).unwrap_or("")).collect();
    let checkpoint = run.dir.join("ck/last.ck");
    let mut infer_agrees = 0;
    for (i, s) in samples.iter().take(5).enumerate() {
        let image = run.dir.parent().unwrap().join("val").join(&s.id);
        let out = ok(
            cli(
                &["infer", "--checkpoint", checkpoint.to_str().unwrap(), "--config", run.config.to_str().unwrap(), image.to_str().unwrap()],
                run.dir.parent().unwrap(),
            ),
            "infer",
        )?;
        if predicted.get(i).is_some_and(|p| out.trim_end_matches('\n') == *p) {
            infer_agrees += 1;
        }
    }

    let detail = format!(
        "val cer={cer:.4} (<= {MAX_CER}), word_accuracy={acc:.3} (>= {MIN_WORD_ACCURACY}), steps={last_step} (<= 5000), \
         synth {:.0}s + train {:.0}s = {secs:.0}s (<= {TIME_BUDGET_SECS:.0}s), infer matches eval on {infer_agrees}/5",
        run.synth_secs, run.train_secs
    );
    if cer <= MAX_CER && acc >= MIN_WORD_ACCURACY && last_step <= 5000 && secs <= TIME_BUDGET_SECS && infer_agrees == 5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn same_logs(a: &Run, b: &Run) -> Outcome {
    if a.metrics.is_empty() {
        return Err("empty metrics log".into());
    }
    let detail = format!("{} metrics lines, second run trained in {:.0}s", a.metrics.lines().count(), b.train_secs);
    if a.metrics.as_bytes() == b.metrics.as_bytes() { Ok(detail) } else { Err(format!("logs differ; {detail}")) }
}

fn perturbed(work: &Path, name: &str, f: impl Fn(&Sample) -> Sample) -> Result<(), String> {
    let samples = load_manifest(&work.join("val/manifest.tsv")).map_err(|e| e.to_string())?;
    let out: Vec<Sample> = samples
        .iter()
        .map(|s| {
            let stem = Path::new(&s.id).file_stem().and_then(|x| x.to_str()).unwrap_or(&s.id);
            Sample { id: stem.to_string(), ..f(s) }
        })
        .collect();
    write_dataset(&work.join(name), &out).map_err(|e| e.to_string())?;
    Ok(())
}

fn robustness(work: &Path, run: &Run) -> Outcome {
    perturbed(work, "val_blur", |s| Sample {
        image: gaussian_filter(&s.image, 1.5).expect("positive sigma"),
        ..s.clone()
    })?;
    perturbed(work, "val_rot", |s| Sample {
        image: rotate(&s.image, 5.0, background_level(&s.image)),
        ..s.clone()
    })?;
    let deskew_cfg = work.join("deskew.cfg");
    fs::write(&deskew_cfg, run_config("probe", 0, true)).map_err(|e| e.to_string())?;
    let checkpoint = run.dir.join("ck/last.ck");
    let eval = |config: &Path, manifest: &str| -> Result<f64, String> {
        let out = ok(
            cli(
                &[
                    "eval",
                    "--config",
                    config.to_str().unwrap(),
                    "--checkpoint",
                    checkpoint.to_str().unwrap(),
                    "--manifest",
                    manifest,
                    "--out",
                    "probe_report.tsv",
                ],
                work,
            ),
            "eval",
        )?;
        field(&out, "cer")
    };
    let clean = field(&run.eval_summary, "cer")?;
    let blur = eval(&run.config, "val_blur/manifest.tsv")?;
    let rot = eval(&run.config, "val_rot/manifest.tsv")?;
    let rot_deskew = eval(&deskew_cfg, "val_rot/manifest.tsv")?;
    let detail = format!(
        "cer clean={clean:.4} blur(1.5)={blur:.4} rot(+5)={rot:.4} rot(+5)+deskew={rot_deskew:.4}"
    );
    if rot_deskew <= rot { Ok(detail) } else { Err(detail) }
}
