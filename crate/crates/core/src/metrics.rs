//! Handoff evaluation: golden transfer within tolerance (GT-T) plus
//! utterance-level F1, Macro-F1 and AUC.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Label};
use crate::error::{Error, Result};
use crate::featurize::FeaturizedDialogue;

/// Default stabilizer added to the tolerance.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Default asymmetry grid for λ sweeps.
pub const LAMBDA_GRID: [f64; 7] = [-0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75];

/// Parameters of one GT-T score. `lambda > 0` penalizes delayed handoff
/// more than early handoff; `lambda < 0` the reverse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GttConfig {
    pub tolerance: u32,
    pub lambda: f64,
    pub epsilon: f64,
}

impl GttConfig {
    pub fn new(tolerance: u32, lambda: f64) -> Result<Self> {
        let cfg = GttConfig {
            tolerance,
            lambda,
            epsilon: DEFAULT_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > -1.0 && self.lambda < 1.0) {
            return Err(Error::Metric(format!("lambda must lie in (-1, 1), got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Metric(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Contribution of a prediction displaced by `delta` (prediction minus
    /// gold position) from a gold position.
    pub fn term(&self, delta: i64) -> f64 {
        let sign = delta.signum() as f64;
        let scale = 1.0 / (self.lambda * sign - 1.0);
        let t = f64::from(self.tolerance) + self.epsilon;
        let d = delta as f64;
        (scale * d * d / (2.0 * t * t)).exp()
    }
}

fn check_positions(name: &str, positions: &[usize], len: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(positions.len());
    for &p in positions {
        if p >= len {
            return Err(Error::Metric(format!(
                "{name} position {p} is out of range for a session of {len} utterances"
            )));
        }
        if !seen.insert(p) {
            return Err(Error::Metric(format!("duplicate {name} position {p}")));
        }
    }
    Ok(())
}

/// Session-level GT-T score of predicted handoff positions against gold
/// positions, both 0-based within a session of `len` utterances.
pub fn gtt_session(gold: &[usize], pred: &[usize], len: usize, cfg: &GttConfig) -> Result<f64> {
    cfg.validate()?;
    check_positions("gold", gold, len)?;
    check_positions("predicted", pred, len)?;
    Ok(match (gold.is_empty(), pred.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            // fixed summation order keeps the score exactly permutation invariant
            let mut pred = pred.to_vec();
            pred.sort_unstable();
            let total: f64 = pred
                .iter()
                .map(|&p| {
                    gold.iter()
                        .map(|&q| cfg.term(p as i64 - q as i64))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum();
            total / pred.len() as f64
        }
    })
}

/// Anything that carries gold utterance labels for a session.
pub trait GoldSession {
    fn session_id(&self) -> &str;
    fn gold_labels(&self) -> Vec<Label>;
}

impl GoldSession for Dialogue {
    fn session_id(&self) -> &str {
        &self.session_id
    }

    fn gold_labels(&self) -> Vec<Label> {
        self.labels()
    }
}

impl GoldSession for FeaturizedDialogue {
    fn session_id(&self) -> &str {
        &self.session_id
    }

    fn gold_labels(&self) -> Vec<Label> {
        self.labels.clone()
    }
}

/// Per-utterance transferable probabilities and hard labels of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPrediction {
    pub session_id: String,
    pub probs: Vec<f64>,
    pub labels: Vec<Label>,
}

impl SessionPrediction {
    /// Hard labels are transferable where the probability exceeds
    /// `threshold`; 0.5 reproduces argmax with ties going to normal.
    pub fn from_probs(session_id: String, probs: Vec<f64>, threshold: f64) -> Self {
        let labels = probs
            .iter()
            .map(|&p| if p > threshold { Label::Transferable } else { Label::Normal })
            .collect();
        SessionPrediction {
            session_id,
            probs,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        positions(&self.labels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.labels.len() {
            return Err(Error::Metric(format!(
                "session `{}` has {} probabilities but {} labels",
                self.session_id,
                self.probs.len(),
                self.labels.len()
            )));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Metric(format!(
                "session `{}` has probability {p} outside [0, 1]",
                self.session_id
            )));
        }
        Ok(())
    }
}

fn positions(labels: &[Label]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_transferable())
        .map(|(i, _)| i)
        .collect()
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<SessionPrediction>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pred: SessionPrediction = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        pred.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(pred);
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[SessionPrediction]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in preds {
        let line = serde_json::to_string(p).expect("predictions serialize");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

/// Pairs every gold session with its prediction by session id.
pub fn align<'a, G: GoldSession>(
    gold: &'a [G],
    preds: &'a [SessionPrediction],
) -> Result<Vec<(&'a G, &'a SessionPrediction)>> {
    let mut by_id: HashMap<&str, &SessionPrediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.session_id.as_str(), p).is_some() {
            return Err(Error::Metric(format!("duplicate prediction for session `{}`", p.session_id)));
        }
    }
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(gold.len());
    for g in gold {
        match by_id.remove(g.session_id()) {
            Some(p) => pairs.push((g, p)),
            None => missing.push(g.session_id().to_string()),
        }
    }
    if !missing.is_empty() || !by_id.is_empty() {
        let mut extra: Vec<&str> = by_id.into_keys().collect();
        extra.sort_unstable();
        return Err(Error::Metric(format!(
            "prediction sessions do not match gold: missing [{}], extra [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    for (g, p) in &pairs {
        let n = g.gold_labels().len();
        if p.len() != n {
            return Err(Error::Metric(format!(
                "session `{}`: gold has {n} utterances, prediction has {}",
                g.session_id(),
                p.len()
            )));
        }
    }
    Ok(pairs)
}

/// Unweighted mean of per-session GT-T scores.
pub fn gtt_corpus<G: GoldSession>(gold: &[G], preds: &[SessionPrediction], cfg: &GttConfig) -> Result<f64> {
    let pairs = align(gold, preds)?;
    if pairs.is_empty() {
        return Err(Error::Metric("no sessions to score".into()));
    }
    let mut total = 0.0;
    for (g, p) in &pairs {
        let labels = g.gold_labels();
        total += gtt_session(&positions(&labels), &p.positions(), labels.len(), cfg)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Confusion counts with transferable as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn tally(gold: &[Label], pred: &[Label]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Metric(format!(
                "label length mismatch: {} gold vs {} predicted",
                gold.len(),
                pred.len()
            )));
        }
        let mut c = Confusion::default();
        for (g, p) in gold.iter().zip(pred) {
            match (g.is_transferable(), p.is_transferable()) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 of the transferable class and the mean of both classes' F1.
pub fn f1_macro_f1(gold: &[Label], pred: &[Label]) -> Result<(f64, f64)> {
    let c = Confusion::tally(gold, pred)?;
    let pos = class_f1(c.tp, c.fp, c.fn_);
    let neg = class_f1(c.tn, c.fn_, c.fp);
    Ok((pos, (pos + neg) / 2.0))
}

/// ROC AUC via the rank statistic: the probability that a random
/// transferable utterance outscores a random normal one, ties counting half.
pub fn auc(gold: &[Label], scores: &[f64]) -> Result<f64> {
    if gold.len() != scores.len() {
        return Err(Error::Metric(format!(
            "label length mismatch: {} gold vs {} scores",
            gold.len(),
            scores.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {s}")));
    }
    let n_pos = gold.iter().filter(|l| l.is_transferable()).count();
    let n_neg = gold.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUC needs both classes in the gold labels; skip it for this set".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| gold[k].is_transferable()).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Flat evaluation report. AUC is `None` when the gold labels hold a
/// single class.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub f1: f64,
    pub macro_f1: f64,
    pub auc: Option<f64>,
    /// GT-I, GT-II and GT-III (tolerances 1, 2, 3).
    pub gt: [f64; 3],
    pub lambda: f64,
}

pub const REPORT_KEYS: [&str; 6] = ["F1", "MacroF1", "AUC", "GT-I", "GT-II", "GT-III"];

impl Report {
    pub fn gt_ii(&self) -> f64 {
        self.gt[1]
    }

    pub fn entries(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("F1", Some(self.f1)),
            ("MacroF1", Some(self.macro_f1)),
            ("AUC", self.auc),
            ("GT-I", Some(self.gt[0])),
            ("GT-II", Some(self.gt[1])),
            ("GT-III", Some(self.gt[2])),
        ]
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, Option<f64>> = self.entries().into_iter().collect();
        serde_json::to_value(map).expect("report serializes")
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric    value   (lambda = {})", self.lambda)?;
        for (k, v) in self.entries() {
            match v {
                Some(v) => writeln!(f, "{k:<8} {v:>7.4}")?,
                None => writeln!(f, "{k:<8} {:>7}", "n/a")?,
            }
        }
        Ok(())
    }
}

/// Computes the full report for aligned predictions.
pub fn evaluate_predictions<G: GoldSession>(gold: &[G], preds: &[SessionPrediction], lambda: f64) -> Result<Report> {
    let pairs = align(gold, preds)?;
    let mut gold_labels = Vec::new();
    let mut pred_labels = Vec::new();
    let mut scores = Vec::new();
    for (g, p) in &pairs {
        p.validate()?;
        gold_labels.extend(g.gold_labels());
        pred_labels.extend(p.labels.iter().copied());
        scores.extend(p.probs.iter().copied());
    }
    let (f1, macro_f1) = f1_macro_f1(&gold_labels, &pred_labels)?;
    let auc = auc(&gold_labels, &scores).ok();
    let mut gt = [0.0; 3];
    for (t, slot) in gt.iter_mut().enumerate() {
        *slot = gtt_corpus(gold, preds, &GttConfig::new(t as u32 + 1, lambda)?)?;
    }
    Ok(Report {
        f1,
        macro_f1,
        auc,
        gt,
        lambda,
    })
}

/// GT-I/II/III for each λ of `grid`.
pub fn lambda_sweep<G: GoldSession>(gold: &[G], preds: &[SessionPrediction], grid: &[f64]) -> Result<Vec<(f64, [f64; 3])>> {
    grid.iter()
        .map(|&lambda| {
            let mut gt = [0.0; 3];
            for (t, slot) in gt.iter_mut().enumerate() {
                *slot = gtt_corpus(gold, preds, &GttConfig::new(t as u32 + 1, lambda)?)?;
            }
            Ok((lambda, gt))
        })
        .collect()
}

pub fn format_sweep(rows: &[(f64, [f64; 3])]) -> String {
    let mut s = String::from("lambda     GT-I    GT-II   GT-III\n");
    for (l, gt) in rows {
        s.push_str(&format!("{l:>6.2}  {:>7.4}  {:>7.4}  {:>7.4}\n", gt[0], gt[1], gt[2]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&x| Label::from_index(x).unwrap()).collect()
    }

    #[test]
    fn worked_example() {
        let expect = [0.6065, 0.8825, 0.9460];
        for (t, e) in (1..=3).zip(expect) {
            let s = gtt_session(&[5], &[4], 6, &GttConfig::new(t, 0.0).unwrap()).unwrap();
            assert!((s - e).abs() < 5e-5, "T={t}: {s}");
        }
    }

    #[test]
    fn asymmetric_terms() {
        let cfg = GttConfig::new(1, 0.5).unwrap();
        let late = gtt_session(&[5], &[6], 8, &cfg).unwrap();
        let early = gtt_session(&[5], &[4], 8, &cfg).unwrap();
        assert!((late - (-1.0f64).exp()).abs() < 1e-5);
        assert!((early - (-1.0f64 / 3.0).exp()).abs() < 1e-5);
    }

    #[test]
    fn degenerate_cases() {
        let cfg = GttConfig::new(2, 0.0).unwrap();
        assert_eq!(gtt_session(&[], &[], 3, &cfg).unwrap(), 1.0);
        assert_eq!(gtt_session(&[], &[1], 3, &cfg).unwrap(), 0.0);
        assert_eq!(gtt_session(&[1], &[], 3, &cfg).unwrap(), 0.0);
        assert!(gtt_session(&[1, 1], &[1], 3, &cfg).is_err());
        assert!(gtt_session(&[3], &[1], 3, &cfg).is_err());
        assert!(GttConfig::new(1, 1.0).is_err());
    }

    #[test]
    fn p2_classification_scores() {
        let gold = labels(&[0, 0, 0, 0, 0, 1]);
        let pred = labels(&[0, 0, 0, 0, 1, 0]);
        let (f1, macro_f1) = f1_macro_f1(&gold, &pred).unwrap();
        assert_eq!(f1, 0.0);
        assert!((macro_f1 - 0.4).abs() < 1e-12);
        let scores: Vec<f64> = pred.iter().map(|l| l.index() as f64).collect();
        assert!((auc(&gold, &scores).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn auc_edges() {
        let gold = labels(&[0, 1, 0, 1]);
        assert_eq!(auc(&gold, &[0.1, 0.9, 0.2, 0.8]).unwrap(), 1.0);
        assert_eq!(auc(&gold, &[0.5; 4]).unwrap(), 0.5);
        assert!(auc(&labels(&[0, 0]), &[0.1, 0.2]).is_err());
    }

    #[test]
    fn corpus_mean_and_alignment() {
        let gold: Vec<Dialogue> = ["a", "b"]
            .iter()
            .map(|id| Dialogue {
                session_id: id.to_string(),
                utterances: vec![crate::corpus::Utterance::new(
                    crate::corpus::Role::Customer,
                    "x",
                    Label::Transferable,
                )],
            })
            .collect();
        let preds = vec![
            SessionPrediction::from_probs("a".into(), vec![0.9], 0.5),
            SessionPrediction::from_probs("b".into(), vec![0.1], 0.5),
        ];
        let cfg = GttConfig::new(1, 0.0).unwrap();
        assert_eq!(gtt_corpus(&gold, &preds, &cfg).unwrap(), 0.5);
        let err = gtt_corpus(&gold, &preds[..1], &cfg).unwrap_err().to_string();
        assert!(err.contains("missing [b]"), "{err}");
    }

    #[test]
    fn report_keys() {
        let r = Report {
            f1: 1.0,
            macro_f1: 1.0,
            auc: None,
            gt: [1.0; 3],
            lambda: 0.0,
        };
        let json = r.to_json();
        let keys: HashSet<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, REPORT_KEYS.into_iter().collect());
        assert!(json["AUC"].is_null());
    }
}
