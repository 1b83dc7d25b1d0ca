//! Memory scoring: exact-match accuracy over canonicalized text, a
//! distortion taxonomy driven by normalized edit distance, and
//! length-stratified reporting.
//!
//! Records evaluate independently and merge in record order, so reports are
//! deterministic under any worker fan-out.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{frame_cue, frame_record, MemoryRecord};
use crate::tokenizer::{TokenizerError, Vocab, EOS};
use crate::tensor::Tape;
use crate::transformer::{argmax, TransformerError, TransformerModel};

#[derive(Clone, Debug, PartialEq)]
pub enum EvalError {
    Tokenizer(TokenizerError),
    Transformer(TransformerError),
    LengthMismatch { preds: usize, trues: usize },
    NoPairs,
    BadEdges { msg: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Tokenizer(e) => write!(f, "{e}"),
            EvalError::Transformer(e) => write!(f, "{e}"),
            EvalError::LengthMismatch { preds, trues } => {
                write!(f, "got {preds} predictions for {trues} references")
            }
            EvalError::NoPairs => write!(f, "accuracy over zero pairs is undefined"),
            EvalError::BadEdges { msg } => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<TokenizerError> for EvalError {
    fn from(e: TokenizerError) -> Self {
        EvalError::Tokenizer(e)
    }
}

impl From<TransformerError> for EvalError {
    fn from(e: TransformerError) -> Self {
        EvalError::Transformer(e)
    }
}

/// Normalizes text before comparison: line endings to `\n`, runs of spaces
/// collapsed, leading/trailing whitespace trimmed. Interior characters and
/// punctuation are left alone.
pub fn canonicalize(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len());
    let mut prev_space = false;
    for ch in unified.chars() {
        if ch == ' ' {
            if !prev_space {
                out.push(ch);
            }
            prev_space = true;
        } else {
            prev_space = false;
            out.push(ch);
        }
    }
    out.trim().to_string()
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Distortion classes for one recalled record.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchClass {
    Exact,
    Minor,
    Severe,
    Loss,
}

impl MatchClass {
    pub fn name(self) -> &'static str {
        match self {
            MatchClass::Exact => "exact",
            MatchClass::Minor => "minor",
            MatchClass::Severe => "severe",
            MatchClass::Loss => "loss",
        }
    }
}

/// Normalized-edit-distance thresholds separating the distortion classes.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// δ at or below which a non-exact recall counts as minor.
    pub minor: f64,
    /// δ at or below which a recall counts as severe; above is loss.
    pub severe: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { minor: 0.25, severe: 0.9 }
    }
}

/// Scored recall of one record.
#[derive(Clone, Debug, Serialize)]
pub struct MatchOutcome {
    pub record_index: usize,
    pub cue: String,
    pub predicted: String,
    pub truth: String,
    /// True-content character length (pre-canonicalization).
    pub true_length: usize,
    /// Normalized edit distance in [0, 1] over canonicalized text.
    pub delta: f64,
    pub class: MatchClass,
    /// Present when the record could not be generated (context overflow).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// δ plus class for a prediction/reference pair. Both sides are
/// canonicalized before comparison.
pub fn classify_distortion(pred: &str, truth: &str, thresholds: Thresholds) -> (f64, MatchClass) {
    let p = canonicalize(pred);
    let t = canonicalize(truth);
    let longest = p.chars().count().max(t.chars().count());
    let delta = if longest == 0 {
        0.0
    } else {
        levenshtein(&p, &t) as f64 / longest as f64
    };
    let class = if delta == 0.0 {
        MatchClass::Exact
    } else if p.is_empty() || delta > thresholds.severe {
        MatchClass::Loss
    } else if delta <= thresholds.minor {
        MatchClass::Minor
    } else {
        MatchClass::Severe
    };
    (delta, class)
}

/// Fraction of pairs equal after canonicalization.
pub fn exact_match_accuracy(preds: &[String], trues: &[String]) -> Result<f64, EvalError> {
    if preds.len() != trues.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), trues: trues.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let matches = preds
        .iter()
        .zip(trues.iter())
        .filter(|(p, t)| canonicalize(p) == canonicalize(t))
        .count();
    Ok(matches as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DistortionHistogram {
    pub exact: usize,
    pub minor: usize,
    pub severe: usize,
    pub loss: usize,
}

impl DistortionHistogram {
    pub fn total(&self) -> usize {
        self.exact + self.minor + self.severe + self.loss
    }

    fn add(&mut self, class: MatchClass) {
        match class {
            MatchClass::Exact => self.exact += 1,
            MatchClass::Minor => self.minor += 1,
            MatchClass::Severe => self.severe += 1,
            MatchClass::Loss => self.loss += 1,
        }
    }
}

/// Per-length-bucket accuracy, bucket = (lo, hi] character lengths.
#[derive(Clone, Debug, Serialize)]
pub struct BucketAccuracy {
    pub lo: usize,
    pub hi: usize,
    pub n: usize,
    pub accuracy: f64,
    pub histogram: DistortionHistogram,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub n: usize,
    /// Exact-match accuracy: fraction of records recalled exactly.
    pub accuracy: f64,
    pub histogram: DistortionHistogram,
    pub buckets: Vec<BucketAccuracy>,
    pub outcomes: Vec<MatchOutcome>,
}

impl EvalReport {
    /// CSV of per-record outcomes: record_id, length, delta, class, exact.
    pub fn outcomes_csv(&self) -> String {
        let mut out = String::from("record_id,length,delta,class,exact\n");
        for o in &self.outcomes {
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                o.record_index,
                o.true_length,
                o.delta,
                o.class.name(),
                u8::from(o.class == MatchClass::Exact)
            ));
        }
        out
    }
}

/// Settings for model evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Strictly increasing edges for length stratification; buckets are
    /// (edges[i], edges[i+1]].
    #[serde(default = "default_edges")]
    pub bucket_edges: Vec<usize>,
}

fn default_edges() -> Vec<usize> {
    vec![0, 256, 512]
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { thresholds: Thresholds::default(), bucket_edges: default_edges() }
    }
}

/// Recalls every record from its cue by greedy decoding and scores the
/// result. Uses a teacher-forced prefix check as a fast path: if the argmax
/// at every content position already matches the record, greedy decoding
/// from the cue provably reproduces it, so the decode loop is skipped.
pub fn evaluate_model(
    model: &TransformerModel,
    vocab: &Vocab,
    records: &[MemoryRecord],
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    evaluate_with_paths(model, vocab, records, settings, true)
}

pub(crate) fn evaluate_with_paths(
    model: &TransformerModel,
    vocab: &Vocab,
    records: &[MemoryRecord],
    settings: &EvalSettings,
    fast_path: bool,
) -> Result<EvalReport, EvalError> {
    validate_edges(&settings.bucket_edges)?;
    let outcomes: Vec<Result<MatchOutcome, EvalError>> = records
        .par_iter()
        .enumerate()
        .map(|(index, record)| evaluate_record(model, vocab, record, index, settings, fast_path))
        .collect();

    let mut report = EvalReport {
        n: records.len(),
        accuracy: 0.0,
        histogram: DistortionHistogram::default(),
        buckets: Vec::new(),
        outcomes: Vec::with_capacity(records.len()),
    };
    for outcome in outcomes {
        let outcome = outcome?;
        report.histogram.add(outcome.class);
        report.outcomes.push(outcome);
    }
    report.accuracy = report.histogram.exact as f64 / report.n.max(1) as f64;
    report.buckets = stratify_outcomes(&report.outcomes, &settings.bucket_edges)?;
    Ok(report)
}

fn evaluate_record(
    model: &TransformerModel,
    vocab: &Vocab,
    record: &MemoryRecord,
    index: usize,
    settings: &EvalSettings,
    fast_path: bool,
) -> Result<MatchOutcome, EvalError> {
    let truth = record.content.clone();
    let true_length = record.content_chars();
    let prompt = frame_cue(vocab, record)?;
    let max_len = model.config.max_seq_len;

    // A cue that leaves no room to generate is recorded as loss, not a crash.
    if prompt.len() + 1 > max_len {
        let (delta, _) = classify_distortion("", &truth, settings.thresholds);
        return Ok(MatchOutcome {
            record_index: index,
            cue: record.cue_text(),
            predicted: String::new(),
            truth,
            true_length,
            delta,
            class: MatchClass::Loss,
            note: Some(format!(
                "context overflow: cue frames to {} tokens, max is {max_len}",
                prompt.len()
            )),
        });
    }

    if fast_path {
        let framed = frame_record(vocab, record)?;
        if framed.tokens.len() <= max_len {
            let inputs = &framed.tokens[..framed.tokens.len() - 1];
            let mut tape = Tape::new();
            let pass = model.forward_on_tape(&mut tape, inputs, false)?;
            let logits = tape.data(pass.logits);
            let v = model.config.vocab_size;
            let all_match = (framed.sep_index..inputs.len())
                .all(|row| argmax(&logits[row * v..(row + 1) * v]) == framed.tokens[row + 1]);
            if all_match {
                // Greedy decoding from the cue reproduces the record: each
                // generated prefix equals the teacher-forced prefix, so the
                // argmax chain is the same.
                let (delta, class) = classify_distortion(&truth, &truth, settings.thresholds);
                return Ok(MatchOutcome {
                    record_index: index,
                    cue: record.cue_text(),
                    predicted: truth.clone(),
                    truth,
                    true_length,
                    delta,
                    class,
                    note: None,
                });
            }
        }
    }

    let max_new = max_len - prompt.len();
    let tokens = model.greedy_decode(&prompt, max_new, EOS)?;
    let predicted = vocab.decode(&tokens[prompt.len()..])?;
    let (delta, class) = classify_distortion(&predicted, &truth, settings.thresholds);
    Ok(MatchOutcome {
        record_index: index,
        cue: record.cue_text(),
        predicted,
        truth,
        true_length,
        delta,
        class,
        note: None,
    })
}

fn validate_edges(edges: &[usize]) -> Result<(), EvalError> {
    if edges.len() < 2 {
        return Err(EvalError::BadEdges {
            msg: format!("need at least two edges, got {edges:?}"),
        });
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadEdges {
            msg: format!("edges must be strictly increasing, got {edges:?}"),
        });
    }
    Ok(())
}

/// Partitions outcomes by true-content length into (lo, hi] buckets and
/// reports per-bucket accuracy. Empty buckets are omitted.
pub fn stratify_outcomes(
    outcomes: &[MatchOutcome],
    edges: &[usize],
) -> Result<Vec<BucketAccuracy>, EvalError> {
    validate_edges(edges)?;
    let mut buckets = Vec::new();
    for window in edges.windows(2) {
        let (lo, hi) = (window[0], window[1]);
        let mut histogram = DistortionHistogram::default();
        for o in outcomes {
            if o.true_length > lo && o.true_length <= hi {
                histogram.add(o.class);
            }
        }
        let n = histogram.total();
        if n == 0 {
            continue;
        }
        buckets.push(BucketAccuracy {
            lo,
            hi,
            n,
            accuracy: histogram.exact as f64 / n as f64,
            histogram,
        });
    }
    Ok(buckets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;
    use crate::tokenizer::Vocab;
    use crate::trainer::{train, TrainConfig};
    use crate::transformer::{PosEncoding, TransformerConfig};
    use proptest::prelude::*;

    // Reference distortion exemplars: a verbatim recall, a clipped recall,
    // a heavily truncated recall, and a refusal.
    const FULL: &str = "Every object perseveres in its state of rest, or of uniform motion in a right line, except insofar as it is compelled to change that state by forces impressed thereon.";
    const CLIPPED: &str = "Every object perseveres in its state of rest, except insofar as it is compelled to change that state by forces impressed thereon.";
    const TRUNCATED: &str = "Every object always perseveres in its state of rest.";
    const REFUSAL: &str = "I do not know.";

    #[test]
    fn distortion_exemplars_classify_as_expected() {
        let t = Thresholds::default();
        assert_eq!(classify_distortion(FULL, FULL, t).1, MatchClass::Exact);
        assert_eq!(classify_distortion(CLIPPED, FULL, t).1, MatchClass::Minor);
        assert_eq!(classify_distortion(TRUNCATED, FULL, t).1, MatchClass::Severe);
        assert_eq!(classify_distortion(REFUSAL, FULL, t).1, MatchClass::Loss);
    }

    #[test]
    fn levenshtein_reference_values() {
        assert_eq!(levenshtein("", ""), 0);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("床前明月光", "床前日月光"), 1);
    }

    #[test]
    fn accuracy_matches_hand_count() {
        // 1938 matching pairs of 2000.
        let trues: Vec<String> = (0..2000).map(|i| format!("poem body {i}")).collect();
        let mut preds = trues.clone();
        for p in preds.iter_mut().take(62) {
            p.push_str(" corrupted");
        }
        let acc = exact_match_accuracy(&preds, &trues).unwrap();
        assert!((acc - 0.969).abs() < 1e-12, "acc {acc}");
    }

    #[test]
    fn accuracy_extremes_and_errors() {
        let a = vec!["x".to_string(), "y".to_string()];
        assert_eq!(exact_match_accuracy(&a, &a).unwrap(), 1.0);
        let b = vec!["p".to_string(), "q".to_string()];
        assert_eq!(exact_match_accuracy(&a, &b).unwrap(), 0.0);
        assert_eq!(
            exact_match_accuracy(&a, &b[..1].to_vec()).unwrap_err(),
            EvalError::LengthMismatch { preds: 2, trues: 1 }
        );
        assert_eq!(
            exact_match_accuracy(&[], &[]).unwrap_err(),
            EvalError::NoPairs
        );
    }

    #[test]
    fn shuffled_pairing_of_distinct_contents_scores_zero() {
        let trues: Vec<String> = (0..50).map(|i| format!("content-{i}")).collect();
        let mut preds = trues.clone();
        preds.rotate_left(1);
        // Pairwise inequality oracle.
        for (p, t) in preds.iter().zip(trues.iter()) {
            assert_ne!(p, t);
        }
        assert_eq!(exact_match_accuracy(&preds, &trues).unwrap(), 0.0);
    }

    #[test]
    fn canonicalization_rules() {
        assert_eq!(canonicalize("  a  b\r\nc\r"), "a b\nc");
        assert_eq!(canonicalize("x\n\ny"), "x\n\ny"); // newlines not collapsed
        assert_eq!(canonicalize("a。。b"), "a。。b"); // punctuation untouched
    }

    #[test]
    fn delta_is_symmetric_and_zero_on_self() {
        let t = Thresholds::default();
        let pairs = [("abcd", "abXd"), ("", "xyz"), ("床前明月光", "床前光")];
        for (a, b) in pairs {
            let (dab, _) = classify_distortion(a, b, t);
            let (dba, _) = classify_distortion(b, a, t);
            assert_eq!(dab, dba);
        }
        assert_eq!(classify_distortion("same", "same", t).0, 0.0);
    }

    fn trained_fixture() -> (TransformerModel, Vocab, Vec<MemoryRecord>) {
        let records = synth_corpus(12, 4, (10, 14)).unwrap();
        let vocab =
            Vocab::build(records.iter().flat_map(|r| [r.cue_text(), r.content.clone()])).unwrap();
        let mut model = TransformerModel::init(TransformerConfig {
            vocab_size: vocab.size(),
            model_dim: 48,
            layers: 2,
            heads: 4,
            ffn_dim: None,
            max_seq_len: 48,
            pos_encoding: PosEncoding::LearnedAbsolute,
            seed: 0,
        })
        .unwrap();
        let config = TrainConfig {
            epochs: 200,
            batch_size: 4,
            step_size: 1e-3,
            ..TrainConfig::default()
        };
        train(&mut model, &records, &vocab, &config).unwrap();
        (model, vocab, records)
    }

    #[test]
    fn trained_model_reaches_full_accuracy_and_paths_agree() {
        let (model, vocab, records) = trained_fixture();
        let settings = EvalSettings::default();
        let fast = evaluate_model(&model, &vocab, &records, &settings).unwrap();
        assert_eq!(fast.accuracy, 1.0, "histogram {:?}", fast.histogram);

        // The teacher-forced fast path must agree with literal decoding.
        let slow = evaluate_with_paths(&model, &vocab, &records, &settings, false).unwrap();
        assert_eq!(fast.accuracy, slow.accuracy);
        for (a, b) in fast.outcomes.iter().zip(slow.outcomes.iter()) {
            assert_eq!(a.predicted, b.predicted);
            assert_eq!(a.class, b.class);
        }
    }

    #[test]
    fn untrained_model_scores_zero() {
        let records = synth_corpus(3, 12, (16, 24)).unwrap();
        let vocab =
            Vocab::build(records.iter().flat_map(|r| [r.cue_text(), r.content.clone()])).unwrap();
        let model = TransformerModel::init(TransformerConfig {
            vocab_size: vocab.size(),
            model_dim: 32,
            layers: 1,
            heads: 4,
            ffn_dim: None,
            max_seq_len: 64,
            pos_encoding: PosEncoding::LearnedAbsolute,
            seed: 9,
        })
        .unwrap();
        let report = evaluate_model(&model, &vocab, &records, &EvalSettings::default()).unwrap();
        assert_eq!(report.accuracy, 0.0);
        assert_eq!(report.histogram.total(), report.n);
    }

    #[test]
    fn histogram_partitions_and_report_is_consistent() {
        let (model, vocab, records) = trained_fixture();
        let report = evaluate_model(&model, &vocab, &records, &EvalSettings::default()).unwrap();
        assert_eq!(report.histogram.total(), report.n);
        // Definitional consistency: accuracy equals exact fraction.
        assert_eq!(
            report.accuracy,
            report.histogram.exact as f64 / report.n as f64
        );
        let preds: Vec<String> = report.outcomes.iter().map(|o| o.predicted.clone()).collect();
        let trues: Vec<String> = report.outcomes.iter().map(|o| o.truth.clone()).collect();
        assert_eq!(
            report.accuracy,
            exact_match_accuracy(&preds, &trues).unwrap()
        );
    }

    #[test]
    fn evaluation_is_read_only() {
        use sha2::{Digest, Sha256};
        let (model, vocab, records) = trained_fixture();
        let hash = |m: &TransformerModel| {
            let bytes = crate::transformer::checkpoint_bytes(m, &vocab).unwrap();
            let mut h = Sha256::new();
            h.update(&bytes);
            h.finalize()
        };
        let before = hash(&model);
        let _ = evaluate_model(&model, &vocab, &records, &EvalSettings::default()).unwrap();
        assert_eq!(before, hash(&model));
    }

    #[test]
    fn oversize_cue_records_score_loss_not_crash() {
        let records = vec![MemoryRecord {
            dynasty: None,
            author: None,
            title: None,
            cue: Some("c".repeat(100)),
            content: "body".to_string(),
        }];
        let vocab =
            Vocab::build(records.iter().flat_map(|r| [r.cue_text(), r.content.clone()])).unwrap();
        let model = TransformerModel::init(TransformerConfig {
            vocab_size: vocab.size(),
            model_dim: 16,
            layers: 1,
            heads: 2,
            ffn_dim: None,
            max_seq_len: 32,
            pos_encoding: PosEncoding::LearnedAbsolute,
            seed: 0,
        })
        .unwrap();
        let report = evaluate_model(&model, &vocab, &records, &EvalSettings::default()).unwrap();
        assert_eq!(report.outcomes[0].class, MatchClass::Loss);
        assert!(report.outcomes[0].note.as_ref().unwrap().contains("context overflow"));
    }

    #[test]
    fn stratification_partitions_and_matches_brute_force() {
        let (model, vocab, records) = trained_fixture();
        let settings = EvalSettings {
            thresholds: Thresholds::default(),
            bucket_edges: vec![0, 12, 256],
        };
        let report = evaluate_model(&model, &vocab, &records, &settings).unwrap();

        // Single bucket covering everything equals overall accuracy.
        let single = stratify_outcomes(&report.outcomes, &[0, 1024]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].accuracy, report.accuracy);

        // Weighted mean of bucket accuracies equals overall accuracy.
        let weighted: f64 = report
            .buckets
            .iter()
            .map(|b| b.accuracy * b.n as f64)
            .sum::<f64>()
            / report.n as f64;
        assert!((weighted - report.accuracy).abs() < 1e-15);

        // Brute-force recount per bucket.
        for bucket in &report.buckets {
            let expect: Vec<&MatchOutcome> = report
                .outcomes
                .iter()
                .filter(|o| o.true_length > bucket.lo && o.true_length <= bucket.hi)
                .collect();
            assert_eq!(bucket.n, expect.len());
            let exact = expect.iter().filter(|o| o.class == MatchClass::Exact).count();
            assert_eq!(bucket.accuracy, exact as f64 / expect.len() as f64);
        }

        assert!(stratify_outcomes(&report.outcomes, &[5, 5]).is_err());
        assert!(stratify_outcomes(&report.outcomes, &[5]).is_err());
    }

    proptest! {
        #[test]
        fn delta_symmetry_property(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            let t = Thresholds::default();
            let (dab, _) = classify_distortion(&a, &b, t);
            let (dba, _) = classify_distortion(&b, &a, t);
            prop_assert_eq!(dab, dba);
            prop_assert!((0.0..=1.0).contains(&dab));
            let (self_delta, class) = classify_distortion(&a, &a, t);
            prop_assert_eq!(self_delta, 0.0);
            prop_assert_eq!(class, MatchClass::Exact);
        }
    }
}
