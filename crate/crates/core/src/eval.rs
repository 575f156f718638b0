//! Character error rate and word accuracy over decoded text.

use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("sample {0:?} has an empty ground truth")]
    EmptyGroundTruth(String),
}

/// Levenshtein distance with unit costs over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleResult {
    pub id: String,
    pub ground_truth: String,
    pub prediction: String,
    pub edit_ops: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CerReport {
    pub total_edit_ops: usize,
    pub total_gt_chars: usize,
    pub cer: f64,
    pub word_accuracy: f64,
    /// Sorted by id.
    pub samples: Vec<SampleResult>,
}

/// Pool edit operations over `(id, ground truth, prediction)` triples.
pub fn aggregate<I, S>(items: I) -> Result<CerReport, EvalError>
where
    I: IntoIterator<Item = (S, S, S)>,
    S: Into<String>,
{
    let mut samples = Vec::new();
    for (id, gt, pred) in items {
        let (id, gt, pred) = (id.into(), gt.into(), pred.into());
        if gt.is_empty() {
            return Err(EvalError::EmptyGroundTruth(id));
        }
        let edit_ops = edit_distance(&pred, &gt);
        samples.push(SampleResult {
            id,
            ground_truth: gt,
            prediction: pred,
            edit_ops,
        });
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let total_edit_ops = samples.iter().map(|s| s.edit_ops).sum();
    let total_gt_chars: usize = samples.iter().map(|s| s.ground_truth.chars().count()).sum();
    let exact = samples.iter().filter(|s| s.edit_ops == 0).count();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(CerReport {
        total_edit_ops,
        total_gt_chars,
        cer: ratio(total_edit_ops, total_gt_chars),
        word_accuracy: ratio(exact, samples.len()),
        samples,
    })
}

impl CerReport {
    pub fn summary(&self) -> String {
        format!(
            "cer={:.6}\tword_accuracy={:.6}\tedit_ops={}\tgt_chars={}\tsamples={}",
            self.cer,
            self.word_accuracy,
            self.total_edit_ops,
            self.total_gt_chars,
            self.samples.len()
        )
    }

    /// `id\tgt\tpred\tedit_ops` per sample, then `# <summary>`.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for s in &self.samples {
            writeln!(w, "{}\t{}\t{}\t{}", s.id, s.ground_truth, s.prediction, s.edit_ops)?;
        }
        writeln!(w, "# {}", self.summary())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_distances() {
        assert_eq!(edit_distance("کتاب", "کتاب"), 0);
        assert_eq!(edit_distance("", "اردو"), 4);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
    }

    #[test]
    fn pooled_fixture() {
        let r = aggregate([("a", "abcd", "abce"), ("b", "abcdef", "abcde")]).unwrap();
        assert_eq!((r.total_edit_ops, r.total_gt_chars), (2, 10));
        assert_eq!(r.cer, 0.2);
        // mean of per-sample rates would be (1/4 + 1/6) / 2
        assert_ne!(r.cer, (0.25 + 1.0 / 6.0) / 2.0);
        assert_eq!(r.word_accuracy, 0.0);
    }

    #[test]
    fn empty_ground_truth_rejected() {
        assert_eq!(
            aggregate([("ok", "a", "a"), ("bad", "", "x")]),
            Err(EvalError::EmptyGroundTruth("bad".into()))
        );
    }

    #[test]
    fn report_sorted_with_summary() {
        let r = aggregate([("2", "ب", "ب"), ("1", "اب", "")]).unwrap();
        let mut out = Vec::new();
        r.write_to(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "1\tاب\t\t2");
        assert_eq!(lines[1], "2\tب\tب\t0");
        assert!(lines[2].starts_with("# cer=0.666667\tword_accuracy=0.500000"));
    }
}
