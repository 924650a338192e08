//! Calibration inputs built from matched samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchedSample;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Confidence,
    Cx,
    Cy,
    W,
    H,
}

impl Feature {
    pub const ALL: [Feature; 5] = [Feature::Confidence, Feature::Cx, Feature::Cy, Feature::W, Feature::H];

    /// The raw value of this feature for a sample, before clipping.
    pub fn value(self, sample: &MatchedSample) -> f64 {
        let b = sample.bbox();
        match self {
            Feature::Confidence => sample.score(),
            Feature::Cx => b.cx,
            Feature::Cy => b.cy,
            Feature::W => b.w,
            Feature::H => b.h,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Confidence => "confidence",
            Feature::Cx => "cx",
            Feature::Cy => "cy",
            Feature::W => "w",
            Feature::H => "h",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" | "conf" | "p" => Ok(Feature::Confidence),
            "cx" => Ok(Feature::Cx),
            "cy" => Ok(Feature::Cy),
            "w" => Ok(Feature::W),
            "h" => Ok(Feature::H),
            other => Err(Error::InvalidArgument(format!("unknown feature `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceEncoding {
    Probability,
    Logit,
}

/// Ordered feature subset with the confidence first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FeatureSetRepr", into = "FeatureSetRepr")]
pub struct FeatureSet {
    members: Vec<Feature>,
    encoding: ConfidenceEncoding,
}

#[derive(Serialize, Deserialize)]
struct FeatureSetRepr {
    members: Vec<Feature>,
    confidence_encoding: ConfidenceEncoding,
}

impl TryFrom<FeatureSetRepr> for FeatureSet {
    type Error = Error;

    fn try_from(r: FeatureSetRepr) -> Result<Self> {
        FeatureSet::new(r.members, r.confidence_encoding)
    }
}

impl From<FeatureSet> for FeatureSetRepr {
    fn from(fs: FeatureSet) -> Self {
        FeatureSetRepr {
            members: fs.members,
            confidence_encoding: fs.encoding,
        }
    }
}

impl FeatureSet {
    pub fn new(members: Vec<Feature>, encoding: ConfidenceEncoding) -> Result<Self> {
        if members.first() != Some(&Feature::Confidence) {
            return Err(Error::InvalidArgument(
                "a feature set must start with the confidence".into(),
            ));
        }
        for (i, m) in members.iter().enumerate() {
            if members[..i].contains(m) {
                return Err(Error::InvalidArgument(format!("feature `{m}` listed twice")));
            }
        }
        Ok(FeatureSet { members, encoding })
    }

    /// `conf`, `conf+xy`, `conf+wh`, `full`, or any `+`-joined list of
    /// `conf`, `cx`, `cy`, `w`, `h`, `xy`, `wh`.
    pub fn parse(name: &str, encoding: ConfidenceEncoding) -> Result<Self> {
        if name == "full" {
            return FeatureSet::new(Feature::ALL.to_vec(), encoding);
        }
        let mut members = Vec::new();
        for part in name.split('+') {
            match part {
                "xy" => members.extend([Feature::Cx, Feature::Cy]),
                "wh" => members.extend([Feature::W, Feature::H]),
                other => members.push(other.parse()?),
            }
        }
        FeatureSet::new(members, encoding)
    }

    pub fn confidence_only(encoding: ConfidenceEncoding) -> Self {
        FeatureSet::new(vec![Feature::Confidence], encoding).expect("valid")
    }

    pub fn members(&self) -> &[Feature] {
        &self.members
    }

    pub fn dim(&self) -> usize {
        self.members.len()
    }

    pub fn encoding(&self) -> ConfidenceEncoding {
        self.encoding
    }

    pub fn with_encoding(&self, encoding: ConfidenceEncoding) -> Self {
        FeatureSet {
            members: self.members.clone(),
            encoding,
        }
    }

    pub fn contains_all(&self, other: &FeatureSet) -> bool {
        other.members.iter().all(|m| self.members.contains(m))
    }

    /// Short CLI name: `conf`, `conf+xy`, `conf+wh`, `full`, or the joined list.
    pub fn name(&self) -> String {
        use Feature::*;
        match self.members.as_slice() {
            [Confidence] => "conf".into(),
            [Confidence, Cx, Cy] => "conf+xy".into(),
            [Confidence, W, H] => "conf+wh".into(),
            [Confidence, Cx, Cy, W, H] => "full".into(),
            ms => {
                let parts: Vec<&str> = ms
                    .iter()
                    .map(|m| if *m == Confidence { "conf" } else { m.name() })
                    .collect();
                parts.join("+")
            }
        }
    }

    /// Column heading used in result tables.
    pub fn heading(&self) -> String {
        use Feature::*;
        match self.members.as_slice() {
            [Confidence, Cx, Cy, W, H] => "full".into(),
            ms => {
                let parts: Vec<&str> = ms
                    .iter()
                    .map(|m| if *m == Confidence { "p̂" } else { m.name() })
                    .collect();
                format!("({})", parts.join(","))
            }
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn check_epsilon(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("clip value {eps} outside (0, 0.5)")))
    }
}

/// Clips every member into `[eps, 1 - eps]` and, for logit encoding, maps
/// the confidence to log-odds.
pub fn build_features(sample: &MatchedSample, fs: &FeatureSet, eps: f64) -> FeatureVector {
    let mut values: Vec<f64> = fs
        .members
        .iter()
        .map(|m| m.value(sample).clamp(eps, 1.0 - eps))
        .collect();
    if fs.encoding == ConfidenceEncoding::Logit {
        values[0] = logit(values[0]);
    }
    FeatureVector(values)
}

/// Feature vectors for a batch, in input order.
pub fn build_matrix(samples: &[MatchedSample], fs: &FeatureSet, eps: f64) -> Vec<FeatureVector> {
    samples.iter().map(|s| build_features(s, fs, eps)).collect()
}

pub fn labels(samples: &[MatchedSample]) -> Vec<bool> {
    samples.iter().map(|s| s.matched).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::{BoxGeometry, Detection};

    fn sample(score: f64, matched: bool) -> MatchedSample {
        MatchedSample::new(
            Detection {
                image_id: "i".into(),
                category_id: 1,
                score,
                bbox: BoxGeometry::new(0.3, 0.6, 0.2, 0.1).unwrap(),
            },
            matched,
            if matched { 0.9 } else { 0.0 },
            matched.then_some(0),
        )
    }

    #[test]
    fn logit_of_half_is_zero() {
        let fs = FeatureSet::confidence_only(ConfidenceEncoding::Logit);
        assert_eq!(build_features(&sample(0.5, true), &fs, DEFAULT_EPSILON).0, vec![0.0]);
    }

    #[test]
    fn clipping_boundary() {
        let fs = FeatureSet::confidence_only(ConfidenceEncoding::Probability);
        let v = build_features(&sample(1.0, true), &fs, 1e-6).0[0];
        assert_eq!(v, 1.0 - 1e-6);
    }

    #[test]
    fn logit_of_point_nine() {
        let fs = FeatureSet::confidence_only(ConfidenceEncoding::Logit);
        let v = build_features(&sample(0.9, true), &fs, DEFAULT_EPSILON).0[0];
        assert!((v - 9f64.ln()).abs() < 1e-12);
        assert!((v - 2.1972).abs() < 1e-4);
    }

    #[test]
    fn box_members_stay_relative() {
        let fs = FeatureSet::parse("full", ConfidenceEncoding::Logit).unwrap();
        let v = build_features(&sample(0.5, true), &fs, DEFAULT_EPSILON).0;
        assert_eq!(v, vec![0.0, 0.3, 0.6, 0.2, 0.1]);
    }

    #[test]
    fn label_vector() {
        assert!(labels(&[]).is_empty());
        let s = [sample(0.1, true), sample(0.2, false), sample(0.3, false), sample(0.4, true)];
        assert_eq!(labels(&s), vec![true, false, false, true]);
        assert_eq!(labels(&s[..1]), vec![true]);
    }

    #[test]
    fn named_sets() {
        let e = ConfidenceEncoding::Probability;
        for name in ["conf", "conf+xy", "conf+wh", "full"] {
            assert_eq!(FeatureSet::parse(name, e).unwrap().name(), name);
        }
        assert_eq!(FeatureSet::parse("conf+xy", e).unwrap().dim(), 3);
        assert_eq!(FeatureSet::parse("conf+cx+h", e).unwrap().name(), "conf+cx+h");
        assert!(FeatureSet::parse("cx+conf", e).is_err());
        assert!(FeatureSet::parse("conf+cx+cx", e).is_err());
        assert!(FeatureSet::parse("conf+z", e).is_err());
        assert_eq!(FeatureSet::parse("conf+xy", e).unwrap().heading(), "(p̂,cx,cy)");
    }

    #[test]
    fn serde_rejects_invalid_sets() {
        let bad = r#"{"members":["cx","confidence"],"confidence_encoding":"logit"}"#;
        assert!(serde_json::from_str::<FeatureSet>(bad).is_err());
    }

    proptest::proptest! {
        #[test]
        fn probability_encoding_is_interior(score in 0.0f64..=1.0, eps in 1e-9f64..0.49) {
            let fs = FeatureSet::parse("full", ConfidenceEncoding::Probability).unwrap();
            let v = build_features(&sample(score, false), &fs, eps);
            for x in v.values() {
                proptest::prop_assert!(*x > 0.0 && *x < 1.0);
            }
        }

        #[test]
        fn sigmoid_inverts_logit(score in 0.0f64..=1.0) {
            let eps = DEFAULT_EPSILON;
            let fs = FeatureSet::confidence_only(ConfidenceEncoding::Logit);
            let z = build_features(&sample(score, false), &fs, eps).0[0];
            let clipped = score.clamp(eps, 1.0 - eps);
            proptest::prop_assert!((sigmoid(z) - clipped).abs() < 1e-12);
        }
    }
}
