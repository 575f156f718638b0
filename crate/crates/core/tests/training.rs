use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urdu_parseq::checkpoint::Checkpoint;
use urdu_parseq::config::RunConfig;
use urdu_parseq::exec::Execution;
use urdu_parseq::imaging::{synthesize, write_dataset, AugmentPolicy, Preprocess};
use urdu_parseq::lexicon::demo_lexicon;
use urdu_parseq::model::{DecodeMode, RecognizerConfig};
use urdu_parseq::shaping::GlyphVocabulary;
use urdu_parseq::tensor::{Gradients, ParamId};
use urdu_parseq::train::{
    apply_update, evaluate, load_run_data, run_training, train_step, Dataset, TrainOptions, TrainState,
    LAST_CHECKPOINT,
};

const W: usize = 48;
const H: usize = 16;

fn small_config(vocab_size: usize, dropout: f64) -> RecognizerConfig {
    RecognizerConfig {
        embed_dim: 32,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 64,
        dropout,
        permutations: 2,
        image_height: H,
        image_width: W,
        patch_height: 16,
        patch_width: 4,
        max_label_len: 7,
        vocab_size,
    }
}

fn options(batch_size: usize, augment: bool) -> TrainOptions {
    TrainOptions {
        batch_size,
        learning_rate: 0.1,
        momentum: 0.9,
        clip_norm: 1.0,
        grad_chunk: 3,
        augment: augment.then(AugmentPolicy::default),
    }
}

fn small_data(n: usize, seed: u64) -> (Dataset, GlyphVocabulary) {
    let words = demo_lexicon();
    let vocab = GlyphVocabulary::build(words.iter().copied()).unwrap();
    let samples = synthesize(&words[..16], n, seed, W, H).unwrap();
    let cfg = small_config(vocab.len(), 0.0);
    (Dataset::prepare(samples, &vocab, &cfg, &Preprocess::default()).unwrap(), vocab)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (data, vocab) = small_data(24, 1);
    let cfg = small_config(vocab.len(), 0.3);
    let opts = options(8, true);

    let mut full = TrainState::new(cfg.clone(), 42).unwrap();
    let losses: Vec<f64> = (0..20)
        .map(|_| train_step(&mut full, &data, &opts, Execution::Parallel).unwrap().loss)
        .collect();

    let mut first = TrainState::new(cfg, 42).unwrap();
    for _ in 0..10 {
        train_step(&mut first, &data, &opts, Execution::Parallel).unwrap();
    }
    let bytes = first.to_checkpoint(&vocab).encode();
    let (mut resumed, _) = TrainState::from_checkpoint(Checkpoint::decode(&bytes).unwrap()).unwrap();
    for want in &losses[10..] {
        let got = train_step(&mut resumed, &data, &opts, Execution::Parallel).unwrap().loss;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
    for ((_, _, a), (_, _, b)) in resumed.model.params().iter().zip(full.model.params().iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn sequential_and_parallel_agree_exactly() {
    let (data, vocab) = small_data(20, 2);
    let cfg = small_config(vocab.len(), 0.3);
    let opts = options(8, true);
    let run = |exec| {
        let mut s = TrainState::new(cfg.clone(), 5).unwrap();
        (0..5)
            .map(|_| train_step(&mut s, &data, &opts, exec).unwrap().loss.to_bits())
            .collect::<Vec<_>>()
    };
    let seq = run(Execution::Sequential);
    assert_eq!(seq, run(Execution::Parallel));
    assert_eq!(seq, run(Execution::Sequential));
}

#[test]
fn clipping_bounds_the_update_norm() {
    let (_, vocab) = small_data(1, 3);
    let mut state = TrainState::new(small_config(vocab.len(), 0.0), 1).unwrap();
    let opts = options(1, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = state.model.params().len();
    for scale in [0.01, 0.5, 3.0, 1e4] {
        let mut grads = Gradients::new(n);
        for i in 0..n {
            let len = state.model.params().get(ParamId(i)).len();
            let g: Vec<f64> = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
            grads.accumulate(ParamId(i), &g);
        }
        let (norm, clipped) = apply_update(&mut state, &mut grads, &opts);
        assert_eq!(clipped, norm > 1.0);
        if clipped {
            assert!(grads.global_norm() <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn small_set_loss_halves_within_200_steps() {
    let (data, vocab) = small_data(16, 4);
    let mut state = TrainState::new(small_config(vocab.len(), 0.0), 9).unwrap();
    let opts = options(16, false);
    let losses: Vec<f64> = (0..200)
        .map(|_| train_step(&mut state, &data, &opts, Execution::Parallel).unwrap().loss)
        .collect();
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * losses[0], "{} -> {tail}", losses[0]);
}

#[test]
fn untrained_model_is_near_chance() {
    let (data, vocab) = small_data(30, 5);
    let state = TrainState::new(small_config(vocab.len(), 0.0), 2).unwrap();
    let report = evaluate(&state.model, &vocab, &data, DecodeMode::Autoregressive, Execution::Parallel).unwrap();
    assert!(report.cer > 0.8, "{}", report.cer);
    let again = evaluate(&state.model, &vocab, &data, DecodeMode::Autoregressive, Execution::Parallel).unwrap();
    assert_eq!(report, again);
}

fn write_run(dir: &std::path::Path, max_steps: usize) -> RunConfig {
    let words = demo_lexicon();
    write_dataset(&dir.join("train"), &synthesize(&words[..16], 24, 1, W, H).unwrap()).unwrap();
    write_dataset(&dir.join("val"), &synthesize(&words[..16], 8, 2, W, H).unwrap()).unwrap();
    let text = format!(
        "embed_dim = 32\nheads = 2\nenc_layers = 1\ndec_layers = 1\nff_dim = 64\npermutations = 2\n\
         image_height = {H}\nimage_width = {W}\npatch_height = 16\npatch_width = 4\nmax_label_len = 7\n\
         batch_size = 8\nmax_steps = {max_steps}\nval_interval = 3\n\
         train_manifest = train/manifest.tsv\nval_manifest = val/manifest.tsv\n\
         checkpoint_dir = ck\nmetrics_log = metrics.tsv\n"
    );
    RunConfig::parse(&text, dir).unwrap()
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run(dir.path(), 0);
    let data = load_run_data(&cfg).unwrap();
    let out = run_training(&cfg, &data, None, Execution::Parallel, |_| {}).unwrap();
    assert_eq!(out.state.step, 0);
    let ck = Checkpoint::load(&cfg.checkpoint_dir.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.vocab, data.vocab);
}

#[test]
fn metrics_log_is_reproducible_and_resumable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg_a = write_run(a.path(), 7);
    let cfg_b = write_run(b.path(), 3);
    let data = load_run_data(&cfg_a).unwrap();
    run_training(&cfg_a, &data, None, Execution::Parallel, |_| {}).unwrap();
    let log_a = fs::read_to_string(&cfg_a.metrics_log).unwrap();
    let lines: Vec<&str> = log_a.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, step) in lines.iter().zip([3, 6, 7]) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], step.to_string());
        assert!(fields[1..].iter().all(|f| f.parse::<f64>().is_ok()));
    }

    run_training(&cfg_b, &data, None, Execution::Sequential, |_| {}).unwrap();
    let ck = Checkpoint::load(&cfg_b.checkpoint_dir.join(LAST_CHECKPOINT)).unwrap();
    let mut cfg_b = cfg_b;
    cfg_b.max_steps = 7;
    run_training(&cfg_b, &data, Some(ck), Execution::Parallel, |_| {}).unwrap();
    assert_eq!(fs::read_to_string(&cfg_b.metrics_log).unwrap(), log_a);
}
