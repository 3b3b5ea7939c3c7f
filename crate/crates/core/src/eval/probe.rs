use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::compute_map;
use super::pool::{init_mhap, mhap_graph, pool_mean, Pooling, MHAP_HEADS};
use super::EvalError;
use crate::model::FrameEmbeddings;
use crate::tensor::{Adam, AdamState, Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMetric {
    Accuracy,
    #[serde(rename = "mAP")]
    Map,
}

impl ProbeMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMetric::Accuracy => "accuracy",
            ProbeMetric::Map => "mAP",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub kind: LabelKind,
    pub n_classes: usize,
    pub metric: ProbeMetric,
    pub pooling: Pooling,
}

impl ProbeTask {
    pub fn validate(&self) -> Result<(), EvalError> {
        match (self.kind, self.metric) {
            (LabelKind::SingleLabel, ProbeMetric::Accuracy) | (LabelKind::MultiLabel, ProbeMetric::Map) => {}
            (k, m) => return Err(EvalError::Task(format!("metric {} does not fit {k:?} labels", m.as_str()))),
        }
        if self.n_classes < 2 && self.kind == LabelKind::SingleLabel {
            return Err(EvalError::Task("a single-label probe needs at least 2 classes".into()));
        }
        if self.n_classes == 0 {
            return Err(EvalError::Task("no classes".into()));
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[Vec<usize>]) -> Result<(), EvalError> {
        for (i, l) in labels.iter().enumerate() {
            if self.kind == LabelKind::SingleLabel && l.len() != 1 {
                return Err(EvalError::Task(format!("sample {i} has {} labels in a single-label task", l.len())));
            }
            if let Some(&c) = l.iter().find(|&&c| c >= self.n_classes) {
                return Err(EvalError::Task(format!("sample {i} has class {c} of {}", self.n_classes)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub metric_name: String,
    pub value: f64,
    pub n_eval: usize,
    pub skipped_classes: usize,
}

/// A trained linear probe (plus pooling parameters for attention pooling).
pub struct Probe {
    pub task: ProbeTask,
    pub params: ParamStore,
}

impl Probe {
    fn logits(&self, g: &mut Graph<f32>, items: &[&FrameEmbeddings]) -> Result<crate::tensor::Var, EvalError> {
        let x = match self.task.pooling {
            Pooling::Mean => {
                let rows = items.iter().map(|f| pool_mean(f)).collect::<Result<Vec<_>, _>>()?;
                g.constant(super::pool::stack(&rows)?)
            }
            Pooling::Mhap => {
                let mut pooled = Vec::with_capacity(items.len());
                for f in items {
                    let fr = g.constant(f.frames.clone());
                    pooled.push(mhap_graph(g, &self.params, fr, &f.mask)?.0);
                }
                if pooled.len() == 1 {
                    pooled[0]
                } else {
                    g.concat_rows(&pooled)?
                }
            }
        };
        let w = g.param("probe/w", self.params.require("probe/w")?);
        let b = g.param("probe/b", self.params.require("probe/b")?);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    /// Class scores `[N × C]`.
    pub fn scores(&self, items: &[FrameEmbeddings]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut g = Graph::<f32>::inference();
        let refs: Vec<&FrameEmbeddings> = items.iter().collect();
        let l = self.logits(&mut g, &refs)?;
        Ok((0..items.len())
            .map(|i| g.value(l).row(i).iter().map(|&x| x as f64).collect())
            .collect())
    }

    pub fn evaluate(&self, items: &[FrameEmbeddings], labels: &[Vec<usize>]) -> Result<ProbeResult, EvalError> {
        self.task.check_labels(labels)?;
        if items.is_empty() || items.len() != labels.len() {
            return Err(EvalError::Empty("probe eval set"));
        }
        let scores = self.scores(items)?;
        let (value, skipped) = match self.task.metric {
            ProbeMetric::Accuracy => {
                let correct = scores
                    .iter()
                    .zip(labels)
                    .filter(|(s, l)| argmax(s) == l[0])
                    .count();
                (correct as f64 / items.len() as f64, 0)
            }
            ProbeMetric::Map => {
                let dense = dense_labels(labels, self.task.n_classes);
                let m = compute_map(&scores, &dense)?;
                (m.map, m.skipped_classes)
            }
        };
        Ok(ProbeResult {
            metric_name: self.task.metric.as_str().into(),
            value,
            n_eval: items.len(),
            skipped_classes: skipped,
        })
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in s.iter().enumerate() {
        if x > s[best] {
            best = i;
        }
    }
    best
}

fn dense_labels(labels: &[Vec<usize>], c: usize) -> Vec<Vec<bool>> {
    labels
        .iter()
        .map(|l| {
            let mut row = vec![false; c];
            for &k in l {
                row[k] = true;
            }
            row
        })
        .collect()
}

/// Fits a linear classifier on frozen frame embeddings and scores it on
/// the held-out set.
pub fn train_probe(
    train: &[FrameEmbeddings],
    train_labels: &[Vec<usize>],
    eval: &[FrameEmbeddings],
    eval_labels: &[Vec<usize>],
    task: &ProbeTask,
    cfg: &ProbeConfig,
) -> Result<(Probe, ProbeResult), EvalError> {
    task.validate()?;
    task.check_labels(train_labels)?;
    if train.is_empty() || train.len() != train_labels.len() {
        return Err(EvalError::Empty("probe training set"));
    }
    if task.kind == LabelKind::SingleLabel && train_labels.iter().all(|l| l[0] == train_labels[0][0]) {
        return Err(EvalError::Task("training labels contain a single class".into()));
    }
    let dim = train[0].dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    params.init_const("probe/w", &[dim, task.n_classes], 0.0);
    params.init_const("probe/b", &[task.n_classes], 0.0);
    if task.pooling == Pooling::Mhap {
        init_mhap(&mut params, dim, MHAP_HEADS, &mut rng)?;
    }
    let mut probe = Probe {
        task: task.clone(),
        params,
    };
    let hp = Adam::with_lr(cfg.lr);
    let mut opt = AdamState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let dense = dense_labels(train_labels, task.n_classes);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut g = Graph::<f32>::new();
            let items: Vec<&FrameEmbeddings> = chunk.iter().map(|&i| &train[i]).collect();
            let logits = probe.logits(&mut g, &items)?;
            let loss = match task.kind {
                LabelKind::SingleLabel => {
                    let t: Vec<usize> = chunk.iter().map(|&i| train_labels[i][0]).collect();
                    g.cross_entropy(logits, &t, usize::MAX)?
                }
                LabelKind::MultiLabel => {
                    let data = chunk
                        .iter()
                        .flat_map(|&i| dense[i].iter().map(|&b| b as u8 as f32))
                        .collect();
                    let t = Tensor::new(vec![chunk.len(), task.n_classes], data)?;
                    g.bce_with_logits(logits, &t)?
                }
            };
            let grads = g.backward(loss)?;
            opt.step(&mut probe.params, &g.param_grads(&grads), &hp);
        }
    }
    let result = probe.evaluate(eval, eval_labels)?;
    Ok((probe, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_metric_must_match_kind() {
        let t = ProbeTask {
            kind: LabelKind::SingleLabel,
            n_classes: 3,
            metric: ProbeMetric::Map,
            pooling: Pooling::Mean,
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let x = vec![FrameEmbeddings::dense(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()); 3];
        let labels = vec![vec![1]; 3];
        let task = ProbeTask {
            kind: LabelKind::SingleLabel,
            n_classes: 2,
            metric: ProbeMetric::Accuracy,
            pooling: Pooling::Mean,
        };
        assert!(train_probe(&x, &labels, &x, &labels, &task, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
