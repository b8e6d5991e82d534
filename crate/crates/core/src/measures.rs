//! Sample matrices, empirical measures and pairwise costs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeotError};

/// Largest deviation of a weight vector's sum from one that is still treated
/// as rounding and silently renormalized.
pub const WEIGHT_SUM_SLACK: f64 = 1e-6;

/// Row-major sample matrix: one row per sample, one column per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix(Array2<f64>);

impl DataMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(SeotError::invalid(format!(
                "data matrix must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / values.ncols(), pos % values.ncols());
            return Err(SeotError::invalid(format!(
                "non-finite entry at row {r}, column {c}"
            )));
        }
        Ok(DataMatrix(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(SeotError::shape("rows have inconsistent lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| SeotError::shape(e.to_string()))?;
        DataMatrix::new(values)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Points together with probability weights on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: DataMatrix,
    weights: Array1<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure, renormalizing `weights` by their sum.
    ///
    /// A sum further than [`WEIGHT_SUM_SLACK`] from one is rejected: that is a
    /// caller bug, not rounding.
    pub fn new(points: DataMatrix, weights: Array1<f64>) -> Result<Self> {
        if weights.len() != points.rows() {
            return Err(SeotError::shape(format!(
                "{} weights for {} points",
                weights.len(),
                points.rows()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SeotError::invalid("weights must be finite and nonnegative"));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > WEIGHT_SUM_SLACK {
            return Err(SeotError::invalid(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let weights = weights / total;
        Ok(DiscreteMeasure { points, weights })
    }

    pub fn points(&self) -> &DataMatrix {
        &self.points
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// True when every weight equals 1/n within `tol`.
    pub fn is_uniform(&self, tol: f64) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= tol)
    }
}

/// Empirical measure with equal mass on every sample.
pub fn uniform_measure(points: DataMatrix) -> Result<DiscreteMeasure> {
    let n = points.rows();
    if n == 0 {
        return Err(SeotError::invalid("cannot build a measure on zero points"));
    }
    DiscreteMeasure::new(points, Array1::from_elem(n, 1.0 / n as f64))
}

/// A domain: its empirical measure and, for sources, per-sample class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDomain {
    measure: DiscreteMeasure,
    labels: Option<Vec<usize>>,
}

impl LabeledDomain {
    pub fn new(measure: DiscreteMeasure, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != measure.len() {
                return Err(SeotError::shape(format!(
                    "{} labels for {} samples",
                    l.len(),
                    measure.len()
                )));
            }
        }
        Ok(LabeledDomain { measure, labels })
    }

    /// Uniformly weighted domain over `points`.
    pub fn uniform(points: DataMatrix, labels: Option<Vec<usize>>) -> Result<Self> {
        LabeledDomain::new(uniform_measure(points)?, labels)
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        &self.measure
    }

    pub fn points(&self) -> &DataMatrix {
        self.measure.points()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.measure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measure.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.measure.dim()
    }

    /// Number of classes implied by the largest label, if labeled.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
    }

    pub fn without_labels(&self) -> LabeledDomain {
        LabeledDomain {
            measure: self.measure.clone(),
            labels: None,
        }
    }

    /// Same weights and labels, new coordinates.
    pub(crate) fn with_points(&self, points: DataMatrix) -> LabeledDomain {
        LabeledDomain {
            measure: DiscreteMeasure {
                points,
                weights: self.measure.weights.clone(),
            },
            labels: self.labels.clone(),
        }
    }
}

/// Pairwise transport costs `C[i][j] = |xs_i - xt_j|^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
    p: f64,
}

impl CostMatrix {
    /// Wraps precomputed costs. Entries must be finite and nonnegative.
    pub fn from_values(values: Array2<f64>, p: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SeotError::invalid("costs must be finite and nonnegative"));
        }
        Ok(CostMatrix { values, p })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

pub fn cost_matrix(xs: &DataMatrix, xt: &DataMatrix, p: f64) -> Result<CostMatrix> {
    if xs.cols() != xt.cols() {
        return Err(SeotError::shape(format!(
            "feature dimensions differ: {} vs {}",
            xs.cols(),
            xt.cols()
        )));
    }
    if !(p >= 1.0) || !p.is_finite() {
        return Err(SeotError::invalid(format!("cost exponent must be >= 1, got {p}")));
    }
    let (ns, nt) = (xs.rows(), xt.rows());
    let mut values = Array2::<f64>::zeros((ns, nt));
    for (i, mut out) in values.axis_iter_mut(Axis(0)).enumerate() {
        let a = xs.row(i);
        for (j, c) in out.iter_mut().enumerate() {
            let sq: f64 = a
                .iter()
                .zip(xt.row(j).iter())
                .map(|(u, v)| (u - v) * (u - v))
                .sum();
            *c = if p == 2.0 { sq } else { sq.sqrt().powf(p) };
        }
    }
    Ok(CostMatrix { values, p })
}

/// Per-feature affine map fitted on pooled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// `None` marks a zero-variance column, which passes through untouched.
    pub scale: Vec<Option<f64>>,
}

impl Standardizer {
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a DataMatrix>) -> Result<Self> {
        let mats: Vec<&DataMatrix> = matrices.into_iter().collect();
        let d = mats
            .first()
            .map(|m| m.cols())
            .ok_or_else(|| SeotError::invalid("nothing to standardize"))?;
        if mats.iter().any(|m| m.cols() != d) {
            return Err(SeotError::shape("domains have different feature dimensions"));
        }
        let n: usize = mats.iter().map(|m| m.rows()).sum();
        let mut mean = vec![0.0; d];
        for m in &mats {
            for row in m.as_array().rows() {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; d];
        for m in &mats {
            for row in m.as_array().rows() {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let scale = var
            .iter()
            .zip(&mean)
            .map(|(v, mu)| {
                let sd = (v / n as f64).sqrt();
                (sd > 1e-12 * (1.0 + mu.abs())).then_some(sd)
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, x: &DataMatrix) -> Result<DataMatrix> {
        if x.cols() != self.mean.len() {
            return Err(SeotError::shape("standardizer fitted on a different dimension"));
        }
        let mut out = x.as_array().clone();
        for mut row in out.rows_mut() {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                if let Some(sd) = sd {
                    *v = (*v - mu) / sd;
                }
            }
        }
        DataMatrix::new(out)
    }
}

/// Standardizes every feature with mean and population standard deviation
/// pooled over all domains.
pub fn standardize(domains: &[LabeledDomain]) -> Result<Vec<LabeledDomain>> {
    let st = Standardizer::fit(domains.iter().map(LabeledDomain::points))?;
    domains
        .iter()
        .map(|d| Ok(d.with_points(st.apply(d.points())?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn dm(rows: &[Vec<f64>]) -> DataMatrix {
        DataMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn uniform_weights() {
        let m = uniform_measure(dm(&[vec![0., 1.], vec![2., 3.], vec![4., 5.]])).unwrap();
        assert!(m.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        let m = uniform_measure(dm(&[vec![1., 2., 3.]])).unwrap();
        assert_eq!(m.weights().to_vec(), vec![1.0]);
        let m = uniform_measure(dm(&[vec![0.], vec![1.], vec![2.], vec![3.]])).unwrap();
        assert_eq!(m.weights().to_vec(), vec![0.25; 4]);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(matches!(
            DataMatrix::new(Array2::zeros((0, 2))),
            Err(SeotError::InvalidInput(_))
        ));
        assert!(DataMatrix::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn weights_renormalized_or_rejected() {
        let pts = dm(&[vec![0.], vec![1.]]);
        let m = DiscreteMeasure::new(pts.clone(), array![0.5 + 1e-9, 0.5]).unwrap();
        assert!((m.weights().sum() - 1.0).abs() <= 1e-12);
        assert!(DiscreteMeasure::new(pts.clone(), array![0.6, 0.5]).is_err());
        assert!(DiscreteMeasure::new(pts, array![1.5, -0.5]).is_err());
    }

    #[test]
    fn cost_examples() {
        let c = cost_matrix(&dm(&[vec![0.]]), &dm(&[vec![0.]]), 2.0).unwrap();
        assert_eq!(c.values(), &array![[0.0]]);
        let x = dm(&[vec![0.], vec![1.]]);
        let c = cost_matrix(&x, &x, 2.0).unwrap();
        assert_eq!(c.values(), &array![[0.0, 1.0], [1.0, 0.0]]);
        let c = cost_matrix(&dm(&[vec![0., 0.]]), &dm(&[vec![3., 4.]]), 2.0).unwrap();
        assert_eq!(c.values(), &array![[25.0]]);
        let c = cost_matrix(&dm(&[vec![0., 0.]]), &dm(&[vec![3., 4.]]), 1.0).unwrap();
        assert!((c.values()[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn cost_dimension_mismatch() {
        let r = cost_matrix(&dm(&[vec![0., 0.]]), &dm(&[vec![0.]]), 2.0);
        assert!(matches!(r, Err(SeotError::Shape(_))));
        assert!(cost_matrix(&dm(&[vec![0.]]), &dm(&[vec![0.]]), 0.5).is_err());
    }

    #[test]
    fn standardize_examples() {
        let d = LabeledDomain::uniform(dm(&[vec![0.], vec![2.]]), Some(vec![0, 1])).unwrap();
        let out = standardize(&[d]).unwrap();
        assert_eq!(out[0].points().as_array(), &array![[-1.0], [1.0]]);
        assert_eq!(out[0].labels(), Some(&[0, 1][..]));

        let d = LabeledDomain::uniform(dm(&[vec![5.], vec![5.]]), None).unwrap();
        let out = standardize(&[d]).unwrap();
        assert_eq!(out[0].points().as_array(), &array![[5.0], [5.0]]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let a = LabeledDomain::uniform(dm(&[vec![1., 9.], vec![3., -2.], vec![7., 4.]]), None)
            .unwrap();
        let b = LabeledDomain::uniform(dm(&[vec![0., 1.], vec![-5., 2.]]), Some(vec![1, 0]))
            .unwrap();
        let once = standardize(&[a, b]).unwrap();
        let twice = standardize(&once).unwrap();
        for (x, y) in once.iter().zip(&twice) {
            for (u, v) in x.points().as_array().iter().zip(y.points().as_array()) {
                assert!((u - v).abs() <= 1e-12);
            }
            assert_eq!(x.labels(), y.labels());
            assert_eq!(x.len(), y.len());
        }
    }

    fn matrix_strategy(d: usize) -> impl Strategy<Value = DataMatrix> {
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), 1..8)
            .prop_map(|rows| DataMatrix::from_rows(&rows).unwrap())
    }

    proptest! {
        #[test]
        fn cost_transpose_symmetry(a in matrix_strategy(3), b in matrix_strategy(3), p in 1.0f64..3.0) {
            let ab = cost_matrix(&a, &b, p).unwrap();
            let ba = cost_matrix(&b, &a, p).unwrap();
            for ((i, j), v) in ab.values().indexed_iter() {
                prop_assert!((v - ba.values()[[j, i]]).abs() <= 1e-12 * (1.0 + v.abs()));
            }
            let aa = cost_matrix(&a, &a, p).unwrap();
            for i in 0..a.rows() {
                prop_assert_eq!(aa.values()[[i, i]], 0.0);
            }
        }

        #[test]
        fn library_measures_on_simplex(a in matrix_strategy(2)) {
            let m = uniform_measure(a).unwrap();
            prop_assert!((m.weights().sum() - 1.0).abs() <= 1e-12);
            prop_assert!(m.weights().iter().all(|w| *w >= 0.0));
        }
    }
}
