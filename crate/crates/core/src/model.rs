//! Trained models: single trees, forests and boosted ensembles.

use serde::{Deserialize, Serialize};

use crate::database::AttrRef;
use crate::relstore::Datum;
use crate::semiring::Objective;
use crate::tree::{argmax, predict_tree, TreeModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dt,
    Rf,
    Gbm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification { k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    Snowflake,
    Galaxy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub kind: ModelKind,
    pub task: Task,
    /// Boosting objective; `None` for trees and forests.
    pub objective: Option<Objective>,
    pub learning_rate: f64,
    /// One entry, or one per class for softmax.
    pub base_score: Vec<f64>,
    /// For softmax, tree `t` belongs to class `t % k`.
    pub trees: Vec<TreeModel>,
    pub features: Vec<AttrRef>,
    pub schema_kind: Option<SchemaKind>,
}

impl EnsembleModel {
    pub fn from_tree(tree: TreeModel, task: Task) -> Self {
        EnsembleModel {
            kind: ModelKind::Dt,
            task,
            objective: None,
            learning_rate: 1.0,
            base_score: Vec::new(),
            features: tree.features.clone(),
            trees: vec![tree],
            schema_kind: None,
        }
    }

    fn classes(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification { k } => k,
        }
    }

    /// Raw boosted scores before any link function, one per class.
    pub fn raw_scores(&self, row: &[Datum]) -> Vec<f64> {
        let mut raw = self.base_score.clone();
        if raw.is_empty() {
            raw.push(0.0);
        }
        let k = raw.len();
        for (t, tree) in self.trees.iter().enumerate() {
            raw[t % k] += self.learning_rate * predict_tree(tree, row)[0];
        }
        raw
    }

    /// Regression: `[value]`. Classification: per-class scores (class shares
    /// for a tree, vote shares for a forest, probabilities for boosting).
    pub fn predict_row(&self, row: &[Datum]) -> Vec<f64> {
        match self.kind {
            ModelKind::Dt => predict_tree(&self.trees[0], row).to_vec(),
            ModelKind::Rf => {
                let k = self.classes();
                let mut acc = vec![0.0; k];
                for tree in &self.trees {
                    let p = predict_tree(tree, row);
                    match self.task {
                        Task::Regression => acc[0] += p[0],
                        Task::Classification { .. } => acc[argmax(p)] += 1.0,
                    }
                }
                let n = self.trees.len().max(1) as f64;
                acc.iter().map(|v| v / n).collect()
            }
            ModelKind::Gbm => {
                let raw = self.raw_scores(row);
                match self.objective {
                    Some(Objective::Softmax { .. }) => softmax(&raw),
                    Some(o) if o.log_link() => vec![raw[0].exp()],
                    _ => raw,
                }
            }
        }
    }

    /// Class index for classifiers, `None` for regression.
    pub fn predict_label(&self, row: &[Datum]) -> Option<usize> {
        match self.task {
            Task::Regression => None,
            Task::Classification { .. } => Some(argmax(&self.predict_row(row))),
        }
    }
}

pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}
