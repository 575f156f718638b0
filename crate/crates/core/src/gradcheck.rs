//! Central finite-difference checks of every backward rule and of the full
//! recognizer loss.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::GrayImage;
use crate::model::{Dropout, ModelError, Recognizer, RecognizerConfig};
use crate::plm::{plm_loss, sample_permutations, Permutation};
use crate::shaping::{EOS, NUM_SPECIALS};
use crate::tensor::{AttnGroup, Gradients, Graph, OpKind, ParamStore, Tensor, TensorError, Var};

pub const EPSILON: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Fraction of model scalars perturbed by the end-to-end check.
pub const END_TO_END_FRACTION: f64 = 0.01;
/// Randomized shapes tried per op.
pub const TRIALS: usize = 3;

/// `||a - n|| / max(||a|| + ||n||, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.worst_rel_err.is_finite() && self.worst_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// One line per op kind, then one for the end-to-end loss.
    pub lines: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(
                f,
                "{}\t{:.3e}\t< {:.0e}\t{}",
                l.name,
                l.worst_rel_err,
                l.tolerance,
                if l.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn nonzero_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

type Build = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var, TensorError>;

/// Worst relative error over the gradients of every input of a scalar
/// function built on a fresh graph.
fn check_function(inputs: &[Tensor], fault: Option<OpKind>, build: &Build) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out);

    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            values[i].data_mut()[j] = x + EPSILON;
            let up = eval(&values)?;
            values[i].data_mut()[j] = x - EPSILON;
            let down = eval(&values)?;
            values[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * EPSILON);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Inputs and scalar function exercising one op at random toy shapes.
fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
    let mut dim = |lo: usize| rng.random_range(lo..=4);
    let (r, c, k) = (dim(1), dim(1), dim(1));
    match kind {
        OpKind::MatMul => {
            let inputs = vec![random_tensor(rng, &[r, k]), random_tensor(rng, &[k, c])];
            let w = weights(rng, r * c);
            (inputs, Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::Linear => {
            let inputs = vec![
                random_tensor(rng, &[r, k]),
                random_tensor(rng, &[k, c]),
                random_tensor(rng, &[c]),
            ];
            let w = weights(rng, r * c);
            (inputs, Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::Add => {
            let inputs = vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[r, c])];
            let w = weights(rng, r * c);
            (inputs, Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::LayerNorm => {
            let c = c.max(2);
            let inputs = vec![
                random_tensor(rng, &[r, c]),
                random_tensor(rng, &[c]),
                random_tensor(rng, &[c]),
            ];
            let w = weights(rng, r * c);
            (inputs, Box::new(move |g, v| {
                let y = g.layernorm(v[0], v[1], v[2])?;
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::Gelu => {
            let inputs = vec![Tensor::from_fn(&[r, c], |_| rng.random_range(-3.0..3.0))];
            let w = weights(rng, r * c);
            (inputs, Box::new(move |g, v| {
                let y = g.gelu(v[0]);
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::Relu => {
            let inputs = vec![nonzero_tensor(rng, &[r, c])];
            let w = weights(rng, r * c);
            (inputs, Box::new(move |g, v| {
                let y = g.relu(v[0]);
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::Dropout => {
            let inputs = vec![random_tensor(rng, &[r, c])];
            let w = weights(rng, r * c);
            let seed = rng.random::<u64>();
            (inputs, Box::new(move |g, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                let y = g.dropout(v[0], 0.3, &mut mask_rng);
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::Embedding => {
            let rows = r + 1;
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.random_range(0..rows)).collect();
            let inputs = vec![random_tensor(rng, &[rows, c])];
            let w = weights(rng, ids.len() * c);
            (inputs, Box::new(move |g, v| {
                let y = g.embedding(v[0], &ids)?;
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::SliceRows => {
            let rows = r + 2;
            let start = rng.random_range(0..rows);
            let len = rng.random_range(1..=rows - start);
            let inputs = vec![random_tensor(rng, &[rows, c])];
            let w = weights(rng, len * c);
            (inputs, Box::new(move |g, v| {
                let y = g.slice_rows(v[0], start, len)?;
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::Attention => attention_case(rng),
        OpKind::SoftmaxCe => {
            let classes = c + 1;
            let t = r + 1;
            let mut targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..classes)).collect();
            // One ignored row, so the ignore path is covered too.
            targets[0] = classes;
            let inputs = vec![Tensor::from_fn(&[t, classes], |_| rng.random_range(-2.0..2.0))];
            (inputs, Box::new(move |g, v| g.softmax_ce(v[0], &targets, Some(classes))))
        }
        OpKind::Mean => {
            let inputs: Vec<Tensor> = (0..r + 1).map(|_| random_tensor(rng, &[1])).collect();
            let w = weights(rng, 1);
            (inputs, Box::new(move |g, v| {
                let m = g.mean(v)?;
                g.weighted_sum(m, &w)
            }))
        }
        OpKind::Scale => {
            let inputs = vec![random_tensor(rng, &[r, c])];
            let factor = rng.random_range(-2.0..2.0);
            let w = weights(rng, r * c);
            (inputs, Box::new(move |g, v| {
                let y = g.scale(v[0], factor);
                g.weighted_sum(y, &w)
            }))
        }
        OpKind::WeightedSum => {
            let inputs = vec![random_tensor(rng, &[r, c])];
            let w = weights(rng, r * c);
            (inputs, Box::new(move |g, v| g.weighted_sum(v[0], &w)))
        }
    }
}

/// Two groups, two heads, with one causal mask that leaves a row with no
/// allowed key.
fn attention_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
    let heads = 2;
    let d = 2 * rng.random_range(1..=2);
    let (q1, kv1) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (q2, kv2) = (rng.random_range(2..=3), rng.random_range(2..=3));
    let mut mask = vec![0.0; q2 * kv2];
    for i in 0..q2 {
        for j in 0..kv2 {
            if j >= i {
                mask[i * kv2 + j] = f64::NEG_INFINITY;
            }
        }
    }
    let mask = Arc::new(mask);
    let inputs = vec![
        random_tensor(rng, &[q1 + q2, d]),
        random_tensor(rng, &[kv1 + kv2, d]),
        random_tensor(rng, &[kv1 + kv2, d]),
    ];
    let w = weights(rng, (q1 + q2) * d);
    (inputs, Box::new(move |g, v| {
        let groups = vec![
            AttnGroup {
                q_start: 0,
                q_len: q1,
                kv_start: 0,
                kv_len: kv1,
                mask: None,
            },
            AttnGroup {
                q_start: q1,
                q_len: q2,
                kv_start: kv1,
                kv_len: kv2,
                mask: Some(mask.clone()),
            },
        ];
        let y = g.attention(v[0], v[1], v[2], heads, groups)?;
        g.weighted_sum(y, &w)
    }))
}

/// Worst error of `kind` over [`TRIALS`] random shapes.
pub fn check_op(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (inputs, build) = op_case(kind, &mut rng);
        worst = worst.max(check_function(&inputs, fault, build.as_ref())?);
    }
    Ok(worst)
}

/// Small recognizer used by the end-to-end check.
pub fn toy_config() -> RecognizerConfig {
    RecognizerConfig {
        embed_dim: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 16,
        dropout: 0.0,
        permutations: 3,
        image_height: 8,
        image_width: 16,
        patch_height: 4,
        patch_width: 4,
        max_label_len: 4,
        vocab_size: NUM_SPECIALS + 6,
    }
}

struct Toy {
    config: RecognizerConfig,
    image: GrayImage,
    targets: Vec<usize>,
    perms: Vec<Permutation>,
}

impl Toy {
    /// Loss under `model`, plus its parameter gradient when asked for.
    fn run(&self, model: &Recognizer, fault: Option<OpKind>, grad: bool) -> Result<(f64, Gradients), ModelError> {
        let mut g = Graph::with_params(model.params());
        if let Some(k) = fault {
            g.inject_fault(k);
        }
        let mut drop = Dropout::disabled();
        let memory = model.encode_images(&mut g, &[&self.image], &mut drop)?;
        let sets = model.decode_train(&mut g, &memory, 0, &self.targets, &self.perms, &mut drop)?;
        let loss = plm_loss(&mut g, &sets, &self.targets)?;
        let mut grads = Gradients::for_store(model.params());
        if grad {
            g.backward(loss).accumulate_into(&mut grads);
        }
        Ok((g.value(loss).item(), grads))
    }

    fn loss_at(&self, params: &ParamStore) -> Result<f64, ModelError> {
        let model = Recognizer::from_params(self.config.clone(), params.clone())?;
        Ok(self.run(&model, None, false)?.0)
    }
}

/// Relative error of the plm loss gradient on a 1-sample toy batch over a
/// random subset of parameter scalars (at least one per tensor).
pub fn check_end_to_end(seed: u64, fault: Option<OpKind>) -> Result<f64, ModelError> {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let model = Recognizer::new(config.clone(), rng.random())?;
    let image = GrayImage::from_fn(config.image_width, config.image_height, |_, _| rng.random_range(0..=255u8));
    let len = rng.random_range(1..=config.max_label_len);
    let mut targets: Vec<usize> = (0..len)
        .map(|_| rng.random_range(NUM_SPECIALS..config.vocab_size))
        .collect();
    targets.push(EOS);
    let perms = sample_permutations(targets.len(), config.permutations, &mut rng);
    let toy = Toy {
        config,
        image,
        targets,
        perms,
    };
    let (_, grads) = toy.run(&model, fault, true)?;

    let mut params = model.params().clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let sizes: Vec<_> = params.iter().map(|(id, _, t)| (id, t.len())).collect();
    for (id, n) in sizes {
        let picks = ((n as f64 * END_TO_END_FRACTION).ceil() as usize).max(1);
        for _ in 0..picks {
            let j = rng.random_range(0..n);
            analytic.push(grads.get(id).map_or(0.0, |g| g[j]));
            let x = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = x + EPSILON;
            let up = toy.loss_at(&params)?;
            params.get_mut(id).data_mut()[j] = x - EPSILON;
            let down = toy.loss_at(&params)?;
            params.get_mut(id).data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * EPSILON));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Every op kind, then the end-to-end loss. `fault` negates one backward
/// rule so callers can confirm that failures are caught.
pub fn run_gradcheck(seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport, ModelError> {
    let mut lines = Vec::with_capacity(OpKind::ALL.len() + 1);
    for kind in OpKind::ALL {
        lines.push(CheckLine {
            name: kind.name().to_string(),
            worst_rel_err: check_op(kind, seed, fault)?,
            tolerance: OP_TOLERANCE,
        });
    }
    lines.push(CheckLine {
        name: "end_to_end".to_string(),
        worst_rel_err: check_end_to_end(seed, fault)?,
        tolerance: END_TO_END_TOLERANCE,
    });
    Ok(GradcheckReport { lines })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn every_op_passes() {
        for kind in OpKind::ALL {
            let err = check_op(kind, 11, None).unwrap();
            assert!(err < OP_TOLERANCE, "{}: {err:e}", kind.name());
        }
    }

    #[test]
    fn flipped_rule_is_caught() {
        for kind in [OpKind::MatMul, OpKind::LayerNorm, OpKind::Attention] {
            assert!(check_op(kind, 11, Some(kind)).unwrap() > 0.5);
        }
    }

    #[test]
    fn full_suite_lists_each_op_once() {
        let report = run_gradcheck(3, None).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.lines.len(), OpKind::ALL.len() + 1);
        for kind in OpKind::ALL {
            assert_eq!(report.lines.iter().filter(|l| l.name == kind.name()).count(), 1);
        }
    }

    #[test]
    fn end_to_end_catches_flipped_rule() {
        assert!(check_end_to_end(3, Some(OpKind::LayerNorm)).unwrap() > END_TO_END_TOLERANCE);
    }
}
