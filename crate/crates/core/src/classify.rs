//! Classifiers on embedding rows, evaluation, and the source-only baseline.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SeotError};
use crate::measures::{LabeledDomain, Standardizer};
use crate::rng::{stream_rng, Stream};

/// Training rows with labels, plus the rows to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    train_rows: Array2<f64>,
    train_labels: Vec<usize>,
    test_rows: Array2<f64>,
}

impl EmbeddedDataset {
    pub fn new(train_rows: Array2<f64>, train_labels: Vec<usize>, test_rows: Array2<f64>) -> Result<Self> {
        if train_rows.nrows() != train_labels.len() {
            return Err(SeotError::shape(format!(
                "{} training rows but {} labels",
                train_rows.nrows(),
                train_labels.len()
            )));
        }
        if train_rows.ncols() != test_rows.ncols() {
            return Err(SeotError::shape(format!(
                "training rows have {} columns, test rows {}",
                train_rows.ncols(),
                test_rows.ncols()
            )));
        }
        Ok(EmbeddedDataset { train_rows, train_labels, test_rows })
    }

    pub fn train_rows(&self) -> &Array2<f64> {
        &self.train_rows
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.train_labels
    }

    pub fn test_rows(&self) -> &Array2<f64> {
        &self.test_rows
    }

    /// One more than the largest training label.
    pub fn n_classes(&self) -> usize {
        self.train_labels.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ClassifierConfig {
    Knn { k_neighbors: usize },
    Softmax { l2: f64, lr: f64, epochs: usize },
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig::Knn { k_neighbors: 5 }
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote among the `k_neighbors` nearest training rows. Equal
/// distances favor the smaller training index, equal votes the smaller class.
pub fn knn_predict(data: &EmbeddedDataset, k_neighbors: usize) -> Result<Vec<usize>> {
    let n_train = data.train_rows.nrows();
    if n_train == 0 {
        return Err(SeotError::invalid("k-NN needs at least one training row"));
    }
    if k_neighbors == 0 || k_neighbors > n_train {
        return Err(SeotError::invalid(format!(
            "k_neighbors = {k_neighbors} must lie in 1..={n_train}"
        )));
    }
    let n_classes = data.n_classes();
    let mut out = Vec::with_capacity(data.test_rows.nrows());
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n_train);
    for row in data.test_rows.rows() {
        cand.clear();
        cand.extend(data.train_rows.rows().into_iter().enumerate().map(|(i, t)| (sq_dist(row, t), i)));
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k_neighbors < n_train {
            cand.select_nth_unstable_by(k_neighbors - 1, order);
        }
        let mut votes = vec![0usize; n_classes];
        for &(_, i) in &cand[..k_neighbors] {
            votes[data.train_labels[i]] += 1;
        }
        let best = (0..n_classes).fold(0, |best, c| if votes[c] > votes[best] { c } else { best });
        out.push(best);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    /// `N_c × k`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Loss before the first step and after every epoch.
    pub loss_history: Vec<f64>,
}

impl SoftmaxModel {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history holds the initial loss")
    }

    pub fn predict(&self, rows: &Array2<f64>) -> Vec<usize> {
        let scores = rows.dot(&self.weights.t()) + &self.bias;
        scores
            .rows()
            .into_iter()
            .map(|s| (0..s.len()).fold(0, |best, c| if s[c] > s[best] { c } else { best }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SoftmaxConfig {
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Standard deviation of the initial weights; zero starts from all zeros.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        SoftmaxConfig { l2: 1e-3, lr: 0.1, epochs: 500, init_scale: 0.0, seed: 0 }
    }
}

/// Mean cross-entropy plus `(l2/2)‖W‖²`, with its gradient in `W` and `b`.
pub fn softmax_loss_and_grad(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    x: &Array2<f64>,
    y: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut p = x.dot(&weights.t()) + bias;
    let mut loss = 0.0;
    for (mut row, &label) in p.rows_mut().into_iter().zip(y) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|s| (s - m).exp());
        let z = row.sum();
        row /= z;
        loss -= row[label].ln();
        row[label] -= 1.0;
    }
    loss = loss / n + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    let grad_w = p.t().dot(x) / n + weights * l2;
    let grad_b = p.sum_axis(Axis(0)) / n;
    (loss, grad_w, grad_b)
}

/// Full-batch gradient descent on the regularized cross-entropy over
/// `n_classes` classes.
pub fn softmax_train(data: &EmbeddedDataset, n_classes: usize, cfg: &SoftmaxConfig) -> Result<SoftmaxModel> {
    if cfg.epochs == 0 {
        return Err(SeotError::invalid("epochs must be >= 1"));
    }
    if !(cfg.l2 >= 0.0) || !(cfg.lr > 0.0) {
        return Err(SeotError::invalid("need l2 >= 0 and lr > 0"));
    }
    let x = data.train_rows();
    if x.nrows() == 0 {
        return Err(SeotError::invalid("softmax needs at least one training row"));
    }
    let n_classes = n_classes.max(data.n_classes());
    let mut rng = stream_rng(cfg.seed, Stream::ClassifierInit);
    let mut w = Array2::from_shape_fn((n_classes, x.ncols()), |_| {
        cfg.init_scale * rng.sample::<f64, _>(StandardNormal)
    });
    let mut b = Array1::zeros(n_classes);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, gw, gb) = softmax_loss_and_grad(&w, &b, x, data.train_labels(), cfg.l2);
        if !loss.is_finite() {
            return Err(SeotError::Numerical {
                iteration: epoch,
                message: format!("softmax loss became {loss}"),
            });
        }
        history.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        w.scaled_add(-cfg.lr, &gw);
        b.scaled_add(-cfg.lr, &gb);
    }
    Ok(SoftmaxModel { weights: w, bias: b, loss_history: history })
}

/// Predicts test rows with the configured classifier.
pub fn predict(data: &EmbeddedDataset, n_classes: usize, cfg: &ClassifierConfig, seed: u64) -> Result<Vec<usize>> {
    match *cfg {
        ClassifierConfig::Knn { k_neighbors } => knn_predict(data, k_neighbors.min(data.train_rows().nrows())),
        ClassifierConfig::Softmax { l2, lr, epochs } => {
            let model = softmax_train(data, n_classes, &SoftmaxConfig { l2, lr, epochs, init_scale: 0.0, seed })?;
            Ok(model.predict(data.test_rows()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_test: usize,
}

pub fn evaluate(predictions: &[usize], truth: &[usize], n_classes: usize) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(SeotError::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(SeotError::invalid("nothing to evaluate"));
    }
    let n_classes = predictions.iter().chain(truth).map(|c| c + 1).fold(n_classes, usize::max);
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / truth.len() as f64,
        per_class_accuracy,
        confusion,
        n_test: truth.len(),
    })
}

/// Trains on the pooled source features and evaluates on the target, with
/// no adaptation. Features are standardized with statistics of the pooled
/// sources; the target goes through the same map.
pub fn source_only_baseline(
    sources: &[LabeledDomain],
    target: &LabeledDomain,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<EvalReport> {
    let truth = target
        .labels()
        .ok_or_else(|| SeotError::invalid("the baseline needs target labels to evaluate"))?;
    if sources.is_empty() {
        return Err(SeotError::invalid("the baseline needs at least one source"));
    }
    let st = Standardizer::fit(sources.iter().map(LabeledDomain::points))?;
    let mut train = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        let y = s
            .labels()
            .ok_or_else(|| SeotError::invalid(format!("source {i} is unlabeled")))?;
        train.push(st.apply(s.points())?.into_inner());
        labels.extend_from_slice(y);
    }
    let views: Vec<_> = train.iter().map(|a| a.view()).collect();
    let train = ndarray::concatenate(Axis(0), &views).map_err(|e| SeotError::shape(e.to_string()))?;
    let test = st.apply(target.points())?.into_inner();
    let data = EmbeddedDataset::new(train, labels, test)?;
    let n_classes = data.n_classes().max(target.n_classes().unwrap_or(0));
    let pred = predict(&data, n_classes, cfg, seed)?;
    evaluate(&pred, truth, n_classes)
}
