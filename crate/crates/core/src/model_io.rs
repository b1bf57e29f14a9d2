//! Portable JSON model files and batch prediction over normalized inputs.
//!
//! Files are written with sorted object keys and 17-significant-digit floats
//! so identical models give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::database::{AttrRef, Database};
use crate::error::{Error, Result};
use crate::model::{EnsembleModel, ModelKind, SchemaKind, Task};
use crate::predicate::{SplitOp, SplitPredicate};
use crate::relstore::{format_float, ColumnKind, Datum};
use crate::semiring::{Objective, SemiRing};
use crate::tree::{TreeModel, TreeNode, TreeParams};

pub const FORMAT_VERSION: u32 = 1;

/// A feature as recorded in a model file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub attr: AttrRef,
    pub kind: ColumnKind,
    /// Code-to-string table for coded features, when known.
    pub dictionary: Option<Vec<String>>,
}

/// A model plus what is needed to apply it to freshly loaded data.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub model: EnsembleModel,
    pub features: Vec<FeatureSpec>,
    pub target: Option<AttrRef>,
    /// Class names by code for classifiers, when known.
    pub class_labels: Option<Vec<String>>,
}

impl SavedModel {
    /// Captures feature kinds and dictionaries from the training database.
    pub fn from_trained(model: EnsembleModel, db: &Database, target: Option<&AttrRef>) -> Result<Self> {
        let dicts = db.dictionaries();
        let mut features = Vec::with_capacity(model.features.len());
        for attr in &model.features {
            let (rel, col) = db.resolve(attr)?;
            let kind = db.relation(rel).columns()[col].kind();
            let dictionary = dicts.lookup(&attr.relation, &attr.column, kind).map(|d| d.labels());
            features.push(FeatureSpec {
                attr: attr.clone(),
                kind,
                dictionary,
            });
        }
        let class_labels = match (model.task, target) {
            (Task::Classification { .. }, Some(t)) => {
                let (rel, col) = db.resolve(t)?;
                let kind = db.relation(rel).columns()[col].kind();
                dicts.lookup(&t.relation, &t.column, kind).map(|d| d.labels())
            }
            _ => None,
        };
        Ok(SavedModel {
            model,
            features,
            target: target.cloned(),
            class_labels,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let features: Vec<Value> = self
            .features
            .iter()
            .map(|f| {
                json!({
                    "name": f.attr.to_string(),
                    "kind": f.kind,
                    "dictionary": f.dictionary,
                })
            })
            .collect();
        let trees: Vec<Value> = m.trees.iter().map(|t| node_value(t, 0)).collect::<Result<_>>()?;
        let task = match m.task {
            Task::Regression => json!({ "kind": "regression" }),
            Task::Classification { k } => json!({ "kind": "classification", "k": k, "labels": self.class_labels }),
        };
        let doc = json!({
            "format_version": FORMAT_VERSION,
            "model_kind": m.kind,
            "task": task,
            "objective": m.objective,
            "learning_rate": m.learning_rate,
            "base_score": m.base_score,
            "schema": m.schema_kind,
            "target": self.target.as_ref().map(|t| t.to_string()),
            "features": features,
            "trees": trees,
        });
        let mut out = String::new();
        write_canonical(&doc, &mut out)?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        de.disable_recursion_limit();
        let doc = Value::deserialize(&mut de)?;
        de.end()?;
        parse_model(&doc)
    }

    /// Predictions for every row of `fact`; see [`predict_batch`].
    pub fn predict(&self, db: &Database, fact: Option<usize>) -> Result<Vec<Vec<f64>>> {
        predict_batch(self, db, fact)
    }
}

pub fn save(model: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SavedModel::from_json(&text)
}

fn node_value(tree: &TreeModel, id: usize) -> Result<Value> {
    let node = &tree.nodes[id];
    match (&node.split, node.children) {
        (Some((p, gain)), Some((l, r))) => {
            let (op, value) = match p.op {
                SplitOp::Le(v) => ("le", json!(v)),
                SplitOp::Eq(c) => ("eq", json!(c)),
            };
            // The stored predicate routes matching rows left.
            let missing_left = p.missing_left != p.negated;
            let (l, r) = if p.negated { (r, l) } else { (l, r) };
            Ok(json!({
                "id": id,
                "feature": p.feature,
                "op": op,
                "value": value,
                "null_direction": if missing_left { "left" } else { "right" },
                "gain": gain,
                "left": node_value(tree, l)?,
                "right": node_value(tree, r)?,
            }))
        }
        _ => Ok(json!({
            "id": id,
            "prediction": node.leaf_prediction.clone().unwrap_or_default(),
        })),
    }
}

fn write_canonical(v: &Value, out: &mut String) -> Result<()> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                write!(out, "{u}").expect("string write");
            } else if let Some(i) = n.as_i64() {
                write!(out, "{i}").expect("string write");
            } else {
                let f = n.as_f64().expect("finite number");
                out.push_str(&format_float(f));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k)?);
                out.push(':');
                write_canonical(&map[k], out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

fn malformed(what: impl Into<String>) -> Error {
    Error::Model(what.into())
}

fn field<'v>(obj: &'v Map<String, Value>, key: &str) -> Result<&'v Value> {
    obj.get(key).ok_or_else(|| malformed(format!("missing field `{key}`")))
}

fn as_obj<'v>(v: &'v Value, what: &str) -> Result<&'v Map<String, Value>> {
    v.as_object().ok_or_else(|| malformed(format!("{what} is not an object")))
}

fn as_f64(v: &Value, what: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| malformed(format!("{what} is not a number")))
}

fn as_usize(v: &Value, what: &str) -> Result<usize> {
    v.as_u64().map(|u| u as usize).ok_or_else(|| malformed(format!("{what} is not an index")))
}

fn parse_model(doc: &Value) -> Result<SavedModel> {
    let obj = as_obj(doc, "model")?;
    let version = as_usize(field(obj, "format_version")?, "format_version")? as u32;
    if version > FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let kind: ModelKind = serde_json::from_value(field(obj, "model_kind")?.clone())?;
    let objective: Option<Objective> = serde_json::from_value(field(obj, "objective")?.clone())?;
    let schema_kind: Option<SchemaKind> = serde_json::from_value(obj.get("schema").cloned().unwrap_or(Value::Null))?;
    let learning_rate = as_f64(field(obj, "learning_rate")?, "learning_rate")?;
    let base_score = field(obj, "base_score")?
        .as_array()
        .ok_or_else(|| malformed("base_score is not an array"))?
        .iter()
        .map(|v| as_f64(v, "base_score"))
        .collect::<Result<Vec<_>>>()?;
    let task_obj = as_obj(field(obj, "task")?, "task")?;
    let (task, class_labels) = match field(task_obj, "kind")?.as_str() {
        Some("regression") => (Task::Regression, None),
        Some("classification") => {
            let k = as_usize(field(task_obj, "k")?, "k")?;
            let labels: Option<Vec<String>> = serde_json::from_value(task_obj.get("labels").cloned().unwrap_or(Value::Null))?;
            (Task::Classification { k }, labels)
        }
        _ => return Err(malformed("unknown task kind")),
    };
    let target = match obj.get("target") {
        Some(Value::String(s)) => Some(AttrRef::parse(s)?),
        _ => None,
    };
    let mut features = Vec::new();
    for f in field(obj, "features")?.as_array().ok_or_else(|| malformed("features is not an array"))? {
        let fo = as_obj(f, "feature")?;
        let name = field(fo, "name")?.as_str().ok_or_else(|| malformed("feature name"))?;
        features.push(FeatureSpec {
            attr: AttrRef::parse(name)?,
            kind: serde_json::from_value(field(fo, "kind")?.clone())?,
            dictionary: serde_json::from_value(fo.get("dictionary").cloned().unwrap_or(Value::Null))?,
        });
    }
    let attrs: Vec<AttrRef> = features.iter().map(|f| f.attr.clone()).collect();
    let semiring = match (kind, task, schema_kind) {
        (_, Task::Classification { k }, _) if kind != ModelKind::Gbm => SemiRing::ClassCount { k },
        (ModelKind::Gbm, _, Some(SchemaKind::Galaxy)) => SemiRing::Variance,
        (ModelKind::Gbm, _, _) => SemiRing::Gradient,
        _ => SemiRing::Variance,
    };
    let mut trees = Vec::new();
    for t in field(obj, "trees")?.as_array().ok_or_else(|| malformed("trees is not an array"))? {
        trees.push(parse_tree(t, &features, &attrs, semiring)?);
    }
    Ok(SavedModel {
        model: EnsembleModel {
            kind,
            task,
            objective,
            learning_rate,
            base_score,
            trees,
            features: attrs,
            schema_kind,
        },
        features,
        target,
        class_labels,
    })
}

fn parse_tree(root: &Value, specs: &[FeatureSpec], attrs: &[AttrRef], semiring: SemiRing) -> Result<TreeModel> {
    let mut slots: Vec<Option<TreeNode>> = Vec::new();
    // (json node, parent, depth, path)
    let mut stack: Vec<(&Value, Option<usize>, usize, Vec<SplitPredicate>)> = vec![(root, None, 0, Vec::new())];
    while let Some((v, parent, depth, path)) = stack.pop() {
        let o = as_obj(v, "node")?;
        let id = as_usize(field(o, "id")?, "node id")?;
        if slots.len() <= id {
            slots.resize(id + 1, None);
        }
        if slots[id].is_some() {
            return Err(malformed(format!("duplicate node id {id}")));
        }
        let mut node = TreeNode {
            id,
            parent,
            depth,
            predicate_path: path.clone(),
            split: None,
            children: None,
            leaf_prediction: None,
            agg: Vec::new(),
        };
        if let Some(pred) = o.get("prediction") {
            let values = pred
                .as_array()
                .ok_or_else(|| malformed("prediction is not an array"))?
                .iter()
                .map(|x| as_f64(x, "prediction"))
                .collect::<Result<Vec<_>>>()?;
            node.leaf_prediction = Some(values);
        } else {
            let feature = as_usize(field(o, "feature")?, "feature")?;
            let spec = specs.get(feature).ok_or_else(|| malformed(format!("feature {feature} out of range")))?;
            let value = field(o, "value")?;
            let op = match field(o, "op")?.as_str() {
                Some("le") => SplitOp::Le(as_f64(value, "threshold")?),
                Some("eq") => {
                    let code = as_usize(value, "category code")?;
                    if let Some(d) = &spec.dictionary {
                        if code >= d.len() {
                            return Err(malformed(format!("code {code} missing from the dictionary of {}", spec.attr)));
                        }
                    }
                    SplitOp::Eq(code as u32)
                }
                _ => return Err(malformed("unknown split op")),
            };
            let missing_left = match field(o, "null_direction")?.as_str() {
                Some("left") => true,
                Some("right") => false,
                _ => return Err(malformed("null_direction must be left or right")),
            };
            let gain = o.get("gain").and_then(Value::as_f64).unwrap_or(0.0);
            let pred = SplitPredicate {
                feature,
                attr: attrs[feature].clone(),
                op,
                negated: false,
                missing_left,
            };
            let left = field(o, "left")?;
            let right = field(o, "right")?;
            let lid = as_usize(field(as_obj(left, "node")?, "id")?, "node id")?;
            let rid = as_usize(field(as_obj(right, "node")?, "id")?, "node id")?;
            let mut lpath = path.clone();
            lpath.push(pred.clone());
            let mut rpath = path;
            rpath.push(pred.negate());
            node.split = Some((pred, gain));
            node.children = Some((lid, rid));
            stack.push((right, Some(id), depth + 1, rpath));
            stack.push((left, Some(id), depth + 1, lpath));
        }
        slots[id] = Some(node);
    }
    let nodes = slots
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| malformed(format!("node id {i} missing"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(TreeModel {
        nodes,
        features: attrs.to_vec(),
        semiring,
        params: TreeParams::default(),
        cluster: None,
    })
}

/// Maps the database's codes for one feature onto the model's codes by label.
fn recode_table(spec: &FeatureSpec, db: &Database) -> Option<Vec<Option<u32>>> {
    let model_dict = spec.dictionary.as_ref()?;
    let db_dict = db.dictionaries().lookup(&spec.attr.relation, &spec.attr.column, spec.kind)?;
    let index: std::collections::HashMap<&str, u32> =
        model_dict.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
    Some(db_dict.labels().iter().map(|s| index.get(s.as_str()).copied()).collect())
}

/// The relation whose rows get predictions: the declared fact, else the
/// snowflake fact, else the target relation.
pub fn prediction_relation(db: &Database) -> Result<usize> {
    if let Some(f) = &db.graph().fact_relation {
        return db.id(f);
    }
    Ok(db.snowflake_fact()?.unwrap_or_else(|| db.target_id()))
}

/// One prediction vector per row of `fact` (default: [`prediction_relation`]).
/// Feature values are fetched by key lookups along N-to-1 paths; unmatched
/// keys and unseen categories read as null.
pub fn predict_batch(model: &SavedModel, db: &Database, fact: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let fact = match fact {
        Some(f) => f,
        None => prediction_relation(db)?,
    };
    let mut columns: Vec<Vec<Datum>> = Vec::with_capacity(model.features.len());
    for spec in &model.features {
        let mut col = db.aligned_column(fact, &spec.attr)?;
        if let Some(table) = recode_table(spec, db) {
            for d in col.iter_mut() {
                if let Datum::Code(c) = *d {
                    *d = table.get(c as usize).copied().flatten().map_or(Datum::Null, Datum::Code);
                }
            }
        }
        columns.push(col);
    }
    let n = db.relation(fact).row_count();
    let mut row = vec![Datum::Null; columns.len()];
    Ok((0..n)
        .map(|r| {
            for (slot, col) in row.iter_mut().zip(&columns) {
                *slot = col[r];
            }
            model.model.predict_row(&row)
        })
        .collect())
}
