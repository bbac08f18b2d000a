//! Confusion-matrix accounting, accuracy / sensitivity / specificity, and ROC
//! curves for the two-class task. Class 1 (COVID-19) is the positive class.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpenv::FlushToZero;
use crate::model::{ClassLabel, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn record(&mut self, predicted: ClassLabel, actual: ClassLabel) {
        match (predicted, actual) {
            (ClassLabel::Covid, ClassLabel::Covid) => self.tp += 1,
            (ClassLabel::Normal, ClassLabel::Normal) => self.tn += 1,
            (ClassLabel::Covid, ClassLabel::Normal) => self.fp += 1,
            (ClassLabel::Normal, ClassLabel::Covid) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (ClassLabel, ClassLabel)>) -> Self {
        let mut m = Self::default();
        for (p, a) in pairs {
            m.record(p, a);
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `(TP + TN) / total`.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    /// `TP / (TP + FN)`.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `TN / (TN + FP)`.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// A metric that may be undefined (zero denominator); serialized as a number
/// or the string `"n/a"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Value(f64),
    NotApplicable(NotApplicable),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotApplicable {
    #[serde(rename = "n/a")]
    Na,
}

impl From<Option<f64>> for MetricValue {
    fn from(v: Option<f64>) -> Self {
        v.map_or(
            MetricValue::NotApplicable(NotApplicable::Na),
            MetricValue::Value,
        )
    }
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            MetricValue::NotApplicable(_) => None,
        }
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{v:.4}"),
            None => f.write_str("n/a"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub modality: String,
    pub n: u64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: MetricValue,
    pub sensitivity: MetricValue,
    pub specificity: MetricValue,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_confusion(
        m: &ConfusionMatrix,
        model: &str,
        modality: &str,
        threshold: f64,
    ) -> Self {
        Self {
            model: model.into(),
            modality: modality.into(),
            n: m.total(),
            tp: m.tp,
            tn: m.tn,
            fp: m.fp,
            fn_: m.fn_,
            accuracy: m.accuracy().into(),
            sensitivity: m.sensitivity().into(),
            specificity: m.specificity().into(),
            threshold,
        }
    }

    pub fn confusion(&self) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tp, self.tn, self.fp, self.fn_)
    }
}

/// Positive iff `p(COVID) >= threshold`; a tie at the threshold is positive.
pub fn classify(p_covid: f64, threshold: f64) -> ClassLabel {
    if p_covid >= threshold {
        ClassLabel::Covid
    } else {
        ClassLabel::Normal
    }
}

/// `p(COVID)` for each image, inferred in chunks of `batch` images.
pub fn covid_scores(net: &Network, images: &[Tensor], batch: usize) -> Result<Vec<f64>> {
    let _ftz = FlushToZero::new();
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let probs = net.probabilities(&Tensor::stack(&refs)?)?;
        let k = probs.shape()[1];
        if k != 2 {
            return Err(Error::InvalidArchitecture(format!(
                "evaluation needs a two-class model, got {k} outputs"
            )));
        }
        scores.extend(
            probs
                .data()
                .chunks_exact(k)
                .map(|r| r[ClassLabel::Covid.index()] as f64),
        );
    }
    Ok(scores)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<f64>,
}

/// Scores every image, thresholds the COVID probability and tallies the
/// confusion matrix.
pub fn evaluate(
    net: &Network,
    images: &[Tensor],
    labels: &[ClassLabel],
    threshold: f64,
    modality: &str,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::invalid("images and labels differ in length"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let scores = covid_scores(net, images, 10)?;
    let m = ConfusionMatrix::from_pairs(
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| (classify(s, threshold), l)),
    );
    Ok(Evaluation {
        report: MetricsReport::from_confusion(&m, &net.spec().name, modality, threshold),
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from sweeping the threshold over `+inf`, every distinct score
/// (descending) and `-inf`, predicting positive when `score >= threshold`.
/// Consecutive duplicate points are collapsed, keeping the highest threshold.
pub fn roc_points(scores: &[f64], labels: &[ClassLabel]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == ClassLabel::Covid).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "ROC needs at least one positive and one negative label",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            match labels[order[i]] {
                ClassLabel::Covid => tp += 1,
                ClassLabel::Normal => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    points.dedup_by(|b, a| a.fpr == b.fpr && a.tpr == b.tpr);
    Ok(points)
}

/// Trapezoidal area under an ordered ROC curve.
pub fn auc_trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Writes `threshold,fpr,tpr` rows; sentinels print as `inf` / `-inf`.
pub fn write_roc_csv(points: &[RocPoint], mut out: impl Write) -> Result<()> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ClassLabel::{Covid, Normal};

    #[test]
    fn figure_eight_counts() {
        let m = ConfusionMatrix::new(25, 23, 2, 0);
        assert_eq!(m.sensitivity(), Some(1.0));
        assert_eq!(m.specificity(), Some(0.92));
        assert_eq!(m.accuracy(), Some(0.96));
    }

    #[test]
    fn all_correct() {
        let m = ConfusionMatrix::from_pairs([(Covid, Covid), (Normal, Normal)]);
        assert_eq!(
            (m.accuracy(), m.sensitivity(), m.specificity()),
            (Some(1.0), Some(1.0), Some(1.0))
        );
    }

    #[test]
    fn recount_example() {
        let m = ConfusionMatrix::new(3, 2, 4, 1);
        assert_eq!(m.accuracy(), Some(0.5));
        assert_eq!(m.sensitivity(), Some(0.75));
        assert_eq!(m.specificity(), Some(1.0 / 3.0));
    }

    #[test]
    fn undefined_metrics_are_na() {
        let m = ConfusionMatrix::new(0, 5, 1, 0);
        assert_eq!(m.sensitivity(), None);
        let r = MetricsReport::from_confusion(&m, "m", "xray", 0.5);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["sensitivity"], "n/a");
        assert_eq!(json["fn"], 0);
        let back: MetricsReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn threshold_tie_is_positive() {
        assert_eq!(classify(0.5, 0.5), Covid);
        assert_eq!(classify(0.4999, 0.5), Normal);
    }

    #[test]
    fn roc_perfect_and_uninformative() {
        let labels = [Covid, Covid, Normal, Normal];
        let pts = roc_points(&[0.9, 0.8, 0.3, 0.2], &labels).unwrap();
        assert!(pts.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc_trapezoid(&pts), 1.0);
        let pts = roc_points(&[0.5; 4], &labels).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(
            (pts[0].fpr, pts[0].tpr, pts[1].fpr, pts[1].tpr),
            (0.0, 0.0, 1.0, 1.0)
        );
        assert_eq!(auc_trapezoid(&pts), 0.5);
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(roc_points(&[0.1, 0.2], &[Covid, Covid]).is_err());
    }

    #[test]
    fn roc_csv_format() {
        let pts = roc_points(&[0.9, 0.1], &[Covid, Normal]).unwrap();
        let mut buf = Vec::new();
        write_roc_csv(&pts, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "threshold,fpr,tpr\ninf,0,0\n0.9,0,1\n0.1,1,1\n");
    }

    proptest! {
        #[test]
        fn roc_is_monotone_and_order_free(
            raw in prop::collection::vec((0u8..20, any::<bool>()), 2..40),
            rot in 0usize..40,
        ) {
            let mut raw = raw;
            raw[0].1 = true;
            raw[1].1 = false;
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 20.0).collect();
            let labels: Vec<ClassLabel> = raw.iter().map(|r| if r.1 { Covid } else { Normal }).collect();
            let pts = roc_points(&scores, &labels).unwrap();
            prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
            let last = pts.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in pts.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
            let k = rot % scores.len();
            let mut s2 = scores.clone();
            let mut l2 = labels.clone();
            s2.rotate_left(k);
            l2.rotate_left(k);
            prop_assert_eq!(roc_points(&s2, &l2).unwrap(), pts);
        }
    }
}
