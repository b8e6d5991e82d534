//! Synthetic domain-shift benchmarks: Gaussian class blobs, i.i.d. sources,
//! and a target drawn from the same generator then transformed.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SeotError};
use crate::measures::{DataMatrix, LabeledDomain};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Shift {
    /// Rotation by this many degrees in the first two coordinates.
    Rotate(f64),
    Translate(Vec<f64>),
    Scale(f64),
    /// Additive isotropic Gaussian noise with this standard deviation.
    Noise(f64),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub d: usize,
    pub class_separation: f64,
    pub n_sources: usize,
    pub shift: Shift,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.samples_per_class == 0 || self.d == 0 || self.n_sources == 0 {
            return Err(SeotError::invalid("synthetic counts must all be >= 1"));
        }
        if !self.class_separation.is_finite() {
            return Err(SeotError::invalid("class_separation must be finite"));
        }
        match &self.shift {
            Shift::Rotate(_) if self.d < 2 => Err(SeotError::invalid("rotation needs d >= 2")),
            Shift::Translate(v) if v.len() != self.d => Err(SeotError::shape(format!(
                "translation has {} components for d = {}",
                v.len(),
                self.d
            ))),
            Shift::Scale(f) | Shift::Noise(f) | Shift::Rotate(f) if !f.is_finite() => {
                Err(SeotError::invalid("shift parameter must be finite"))
            }
            Shift::Noise(s) if *s < 0.0 => Err(SeotError::invalid("noise sigma must be >= 0")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub sources: Vec<LabeledDomain>,
    pub target: LabeledDomain,
}

/// Unit-variance blobs with class `c` centered at `class_separation · (c + 1) · e_1`.
///
/// The means sit off the origin so that a rotation about the origin moves
/// classes by different amounts, as a real domain shift would.
fn draw_domain<R: Rng>(spec: &SynthSpec, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
    let n = spec.n_classes * spec.samples_per_class;
    let mut x = Array2::zeros((n, spec.d));
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.n_classes {
        for s in 0..spec.samples_per_class {
            let row = c * spec.samples_per_class + s;
            for j in 0..spec.d {
                let mean = if j == 0 { spec.class_separation * (c + 1) as f64 } else { 0.0 };
                x[[row, j]] = mean + rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c);
        }
    }
    (x, labels)
}

fn apply_shift<R: Rng>(x: &mut Array2<f64>, shift: &Shift, rng: &mut R) {
    match shift {
        Shift::Rotate(deg) => {
            let (sin, cos) = deg.to_radians().sin_cos();
            for mut row in x.rows_mut() {
                let (a, b) = (row[0], row[1]);
                row[0] = cos * a - sin * b;
                row[1] = sin * a + cos * b;
            }
        }
        Shift::Translate(v) => {
            for mut row in x.rows_mut() {
                for (x, t) in row.iter_mut().zip(v) {
                    *x += t;
                }
            }
        }
        Shift::Scale(f) => x.mapv_inplace(|v| v * f),
        Shift::Noise(sigma) => {
            for v in x.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synth);
    let mut sources = Vec::with_capacity(spec.n_sources);
    for _ in 0..spec.n_sources {
        let (x, y) = draw_domain(spec, &mut rng);
        sources.push(LabeledDomain::uniform(DataMatrix::new(x)?, Some(y))?);
    }
    let (mut x, y) = draw_domain(spec, &mut rng);
    apply_shift(&mut x, &spec.shift, &mut rng);
    let target = LabeledDomain::uniform(DataMatrix::new(x)?, Some(y))?;
    Ok(SynthData { sources, target })
}
