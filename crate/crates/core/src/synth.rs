//! Synthetic matched samples with known miscalibration.
//!
//! A scenario draws a box, evaluates a precision field and a confidence field
//! at it, emits the confidence as the detection score and draws the match
//! label from a Bernoulli with the field precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detections::{BoxGeometry, Detection};
use crate::error::{Error, Result};
use crate::features::{logit, sigmoid};
use crate::matching::MatchedSample;

/// Log-size range used by the [`Term::ScaleW`] and [`Term::ScaleH`] terms.
pub const SCALE_MIN: f64 = 0.02;
pub const SCALE_MAX: f64 = 0.5;

/// Box distribution: uniform centers, log-uniform extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSampler {
    pub cx: (f64, f64),
    pub cy: (f64, f64),
    pub w: (f64, f64),
    pub h: (f64, f64),
}

impl Default for BoxSampler {
    fn default() -> Self {
        BoxSampler {
            cx: (0.05, 0.95),
            cy: (0.05, 0.95),
            w: (SCALE_MIN, SCALE_MAX),
            h: (SCALE_MIN, SCALE_MAX),
        }
    }
}

impl BoxSampler {
    fn validate(&self) -> Result<()> {
        let centers_ok = [self.cx, self.cy].iter().all(|&(lo, hi)| 0.0 <= lo && lo <= hi && hi <= 1.0);
        let extents_ok = [self.w, self.h].iter().all(|&(lo, hi)| 0.0 < lo && lo <= hi && hi <= 1.0);
        if centers_ok && extents_ok {
            Ok(())
        } else {
            Err(Error::Scenario(format!("invalid box sampler ranges {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> BoxGeometry {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();
        let log_uniform = |rng: &mut R, (lo, hi): (f64, f64)| (lo.ln() + (hi.ln() - lo.ln()) * rng.gen::<f64>()).exp();
        let cx = uniform(rng, self.cx);
        let cy = uniform(rng, self.cy);
        let w = log_uniform(rng, self.w);
        let h = log_uniform(rng, self.h);
        BoxGeometry { cx, cy, w, h }
    }
}

/// Inputs a field can depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Cx,
    Cy,
    W,
    H,
    /// `2|cx - 0.5|`: 0 at the center, 1 at the border.
    EdgeX,
    EdgeY,
    /// Log width rescaled so [`SCALE_MIN`] maps to 0 and [`SCALE_MAX`] to 1.
    ScaleW,
    ScaleH,
    /// True precision; confidence fields only.
    Precision,
    PrecisionLogit,
}

impl Term {
    fn value(self, b: &BoxGeometry, precision: Option<f64>) -> Result<f64> {
        let scale = |v: f64| (v.ln() - SCALE_MIN.ln()) / (SCALE_MAX.ln() - SCALE_MIN.ln());
        let need = || precision.ok_or_else(|| Error::Scenario("precision term used in the precision field".into()));
        Ok(match self {
            Term::Cx => b.cx,
            Term::Cy => b.cy,
            Term::W => b.w,
            Term::H => b.h,
            Term::EdgeX => 2.0 * (b.cx - 0.5).abs(),
            Term::EdgeY => 2.0 * (b.cy - 0.5).abs(),
            Term::ScaleW => scale(b.w),
            Term::ScaleH => scale(b.h),
            Term::Precision => need()?,
            Term::PrecisionLogit => logit(need()?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Sigmoid,
}

/// `link(intercept + sum coef * term)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub link: Link,
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<(Term, f64)>,
}

impl Field {
    pub fn constant(value: f64) -> Self {
        Field {
            link: Link::Identity,
            intercept: value,
            terms: Vec::new(),
        }
    }

    pub fn linear(intercept: f64, terms: &[(Term, f64)]) -> Self {
        Field {
            link: Link::Identity,
            intercept,
            terms: terms.to_vec(),
        }
    }

    /// Evaluates the field; values outside `(0, 1)` are a scenario error.
    pub fn eval(&self, b: &BoxGeometry, precision: Option<f64>) -> Result<f64> {
        let mut z = self.intercept;
        for &(t, coef) in &self.terms {
            z += coef * t.value(b, precision)?;
        }
        let v = match self.link {
            Link::Identity => z,
            Link::Sigmoid => sigmoid(z),
        };
        if v > 0.0 && v < 1.0 {
            Ok(v)
        } else {
            Err(Error::Scenario(format!("field value {v} outside (0,1) at {b:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub count: usize,
    pub precision: Field,
    pub confidence: Field,
    #[serde(default)]
    pub boxes: BoxSampler,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_category")]
    pub category_id: i64,
}

fn default_category() -> i64 {
    1
}

impl ScenarioSpec {
    pub fn new(name: &str, precision: Field, confidence: Field) -> Self {
        ScenarioSpec {
            name: name.to_owned(),
            count: 10_000,
            precision,
            confidence,
            boxes: BoxSampler::default(),
            seed: 0,
            category_id: 1,
        }
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count = count;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Scenario("sample count must be at least 1".into()));
        }
        if self.precision.terms.iter().any(|(t, _)| matches!(t, Term::Precision | Term::PrecisionLogit)) {
            return Err(Error::Scenario("the precision field cannot depend on precision".into()));
        }
        self.boxes.validate()
    }
}

/// Draws `spec.count` samples; identical specs give identical output.
pub fn generate(spec: &ScenarioSpec) -> Result<Vec<MatchedSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let bbox = spec.boxes.sample(&mut rng);
        let precision = spec.precision.eval(&bbox, None)?;
        let score = spec.confidence.eval(&bbox, Some(precision))?;
        let matched = rng.gen::<f64>() < precision;
        let detection = Detection {
            image_id: format!("synth_{i:06}"),
            category_id: spec.category_id,
            score,
            bbox,
        };
        out.push(MatchedSample::new(
            detection,
            matched,
            if matched { 1.0 } else { 0.0 },
            matched.then_some(i),
        ));
    }
    Ok(out)
}

/// The named scenarios, with count 10^4 and seed 0.
pub fn builtin_scenarios() -> Vec<ScenarioSpec> {
    use Term::*;
    vec![
        // precision and confidence both fall toward the borders, at different
        // rates; confidence also grows with box width
        ScenarioSpec::new(
            "fig3_boundary_decay",
            Field::linear(0.9, &[(EdgeX, -0.45), (EdgeY, -0.45)]),
            Field::linear(0.85 - 0.125, &[(EdgeX, -0.2), (EdgeY, -0.2), (ScaleW, 0.25)]),
        ),
        // Platt-style overconfidence, identical at every location
        ScenarioSpec::new(
            "uniform_overconfident",
            Field::linear(0.1, &[(Cx, 0.4), (Cy, 0.4)]),
            Field {
                link: Link::Sigmoid,
                intercept: 1.0,
                terms: vec![(PrecisionLogit, 1.5)],
            },
        ),
        // small boxes overconfident, large boxes underconfident
        ScenarioSpec::new(
            "scale_dependent",
            Field::linear(0.15, &[(ScaleW, 0.35), (ScaleH, 0.35)]),
            Field::linear(0.55, &[(ScaleW, 0.1), (ScaleH, 0.1)]),
        ),
        ScenarioSpec::new(
            "perfectly_calibrated",
            Field::linear(0.05, &[(Cx, 0.45), (Cy, 0.45)]),
            Field::linear(0.0, &[(Precision, 1.0)]),
        ),
    ]
}

pub fn scenario(name: &str) -> Result<ScenarioSpec> {
    builtin_scenarios()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let known: Vec<String> = builtin_scenarios().into_iter().map(|s| s.name).collect();
            Error::InvalidArgument(format!("unknown scenario `{name}` (known: {})", known.join(", ")))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Feature;
    use crate::metrics::{compute_ece, heatmap, BinningSpec};

    #[test]
    fn constant_field_law_of_large_numbers() {
        let spec = ScenarioSpec::new("c", Field::constant(0.7), Field::constant(0.7)).with_count(100_000);
        let s = generate(&spec).unwrap();
        let frac = s.iter().filter(|x| x.matched).count() as f64 / s.len() as f64;
        assert!((0.69..=0.71).contains(&frac), "{frac}");
        assert!(compute_ece(&s, 20, 8).unwrap() < 0.01);
    }

    #[test]
    fn precision_one_matches_everything() {
        let spec = ScenarioSpec::new("one", Field::constant(1.0 - 1e-12), Field::constant(0.5)).with_count(2000);
        assert!(generate(&spec).unwrap().iter().all(|s| s.matched));
    }

    #[test]
    fn out_of_range_field_is_an_error() {
        let spec = ScenarioSpec::new("bad", Field::linear(0.5, &[(Term::Cx, 1.0)]), Field::constant(0.5));
        assert!(matches!(generate(&spec), Err(Error::Scenario(_))));
        let spec = ScenarioSpec::new("self", Field::linear(0.0, &[(Term::Precision, 1.0)]), Field::constant(0.5));
        assert!(matches!(generate(&spec), Err(Error::Scenario(_))));
        let spec = ScenarioSpec::new("empty", Field::constant(0.5), Field::constant(0.5)).with_count(0);
        assert!(matches!(generate(&spec), Err(Error::Scenario(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = scenario("fig3_boundary_decay").unwrap().with_count(500);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_ne!(generate(&spec).unwrap(), generate(&spec.clone().with_seed(1)).unwrap());
    }

    #[test]
    fn builtins_are_valid() {
        for spec in builtin_scenarios() {
            let s = generate(&spec.clone().with_count(5000)).unwrap();
            assert!(s.iter().all(|x| x.validate().is_ok()), "{}", spec.name);
        }
        assert!(scenario("nope").is_err());
    }

    #[test]
    fn region_precision_within_three_standard_errors() {
        let spec = scenario("perfectly_calibrated").unwrap().with_count(100_000);
        let s = generate(&spec).unwrap();
        // region cx < 0.3: field mean over the region by midpoint quadrature
        let region: Vec<_> = s.iter().filter(|x| x.bbox().cx < 0.3).collect();
        let n = region.len() as f64;
        let emp = region.iter().filter(|x| x.matched).count() as f64 / n;
        let mean_field = region.iter().map(|x| 0.05 + 0.45 * x.bbox().cx + 0.45 * x.bbox().cy).sum::<f64>() / n;
        let se = (mean_field * (1.0 - mean_field) / n).sqrt();
        assert!((emp - mean_field).abs() <= 3.0 * se, "{emp} vs {mean_field}");
    }

    #[test]
    fn boundary_decay_error_grows_toward_borders() {
        let s = generate(&scenario("fig3_boundary_decay").unwrap().with_count(100_000)).unwrap();
        let spec = BinningSpec::new(vec![Feature::Confidence, Feature::Cx, Feature::Cy], vec![8, 8, 8], 8).unwrap();
        let grid = heatmap(&s, &spec, &[Feature::Cx, Feature::Cy]).unwrap();
        let column = |i: usize| (0..8).map(|j| grid.cell(i, j).local_error).sum::<f64>() / 8.0;
        let center = (column(3) + column(4)) / 2.0;
        assert!(column(0) > center && column(7) > center, "{} {} {}", column(0), center, column(7));
    }
}
