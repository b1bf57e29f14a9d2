//! Gradient boosting over normalized data.
//!
//! Snowflake schemas keep predictions, gradients and hessians as columns of
//! the fact relation and swap in fresh buffers after every tree. Other acyclic
//! schemas (rmse only) keep residual statistics in variance annotations and
//! fold each tree in through an update relation over one cluster.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::database::{AttrRef, Database, Key, KeyReader};
use crate::engine::{Annotations, ExecStats};
use crate::error::{Error, Result};
use crate::messages::{Factorized, MessageCache, PredicateSet};
use crate::model::{softmax, EnsembleModel, ModelKind, SchemaKind, Task};
use crate::predicate::SplitPredicate;
use crate::relstore::{Column, ColumnData, NULL_KEY};
use crate::semiring::{order_statistic, LeafRule, Objective, SemiRing, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::tree::{train_decision_tree, Criterion, TrainInput, TreeModel, TreeParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub iterations: usize,
    pub learning_rate: f64,
    pub objective: Objective,
    /// Growth limits and threading; the criterion and leaf rule are set per objective.
    pub tree: TreeParams,
    pub alpha: f64,
    pub beta: f64,
    /// Forces a training path; by default a single-cluster schema is boosted
    /// on its fact relation.
    pub schema: Option<SchemaKind>,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            iterations: 100,
            learning_rate: 0.1,
            objective: Objective::Rmse,
            tree: TreeParams::default(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            schema: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Training metric after this iteration's trees.
    pub metric: f64,
    pub seconds: f64,
    pub messages_computed: usize,
    pub messages_reused: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbmReport {
    pub schema: SchemaKind,
    /// `rmse` on the response scale, or `multi_logloss` for softmax.
    pub metric: String,
    pub iterations: Vec<IterationReport>,
}

/// Key-set membership test on fact key columns.
#[derive(Clone, Debug)]
enum FilterKeys {
    Dense { bits: Vec<bool>, null: bool },
    Hash(FxHashSet<Key>),
}

impl FilterKeys {
    fn collect(reader: &KeyReader<'_>, rows: usize, selected: &[bool]) -> Self {
        if reader.is_single() {
            let max = (0..rows)
                .filter(|&r| selected[r])
                .filter_map(|r| reader.single(r))
                .filter(|&c| c != NULL_KEY)
                .max();
            if max.map_or(true, |m| (m as usize) <= 4 * rows + 1024) {
                let mut bits = vec![false; max.map_or(0, |m| m as usize + 1)];
                let mut null = false;
                for r in (0..rows).filter(|&r| selected[r]) {
                    match reader.single(r) {
                        Some(NULL_KEY) => null = true,
                        Some(c) => bits[c as usize] = true,
                        None => {}
                    }
                }
                return FilterKeys::Dense { bits, null };
            }
        }
        FilterKeys::Hash((0..rows).filter(|&r| selected[r]).filter_map(|r| reader.get(r)).collect())
    }

    #[inline]
    fn contains_single(&self, c: u32) -> bool {
        match self {
            FilterKeys::Dense { bits, null } => {
                if c == NULL_KEY {
                    *null
                } else {
                    bits.get(c as usize).copied().unwrap_or(false)
                }
            }
            FilterKeys::Hash(set) => set.contains(&Key::from_slice(&[c])),
        }
    }

    #[inline]
    fn contains(&self, key: &Key) -> bool {
        match self {
            FilterKeys::Dense { .. } => self.contains_single(key[0]),
            FilterKeys::Hash(set) => set.contains(key),
        }
    }

    fn len(&self) -> usize {
        match self {
            FilterKeys::Dense { bits, null } => bits.iter().filter(|&&b| b).count() + *null as usize,
            FilterKeys::Hash(set) => set.len(),
        }
    }
}

/// Fact rows whose key on `fact_cols` falls in a key set derived from the
/// predicates on `source`.
#[derive(Clone, Debug)]
pub struct SemiJoinFilter {
    pub source: usize,
    pub fact_cols: Vec<usize>,
    keys: FilterKeys,
}

impl SemiJoinFilter {
    pub fn key_count(&self) -> usize {
        self.keys.len()
    }
}

/// A conjunction of predicates rewritten as filters on one fact relation.
#[derive(Clone, Debug)]
pub struct LeafSelection {
    pub fact: usize,
    pub filters: Vec<SemiJoinFilter>,
    /// Predicates on the fact's own columns.
    pub local: Vec<SplitPredicate>,
}

impl LeafSelection {
    pub fn mask(&self, db: &Database) -> Result<Vec<bool>> {
        let rel = db.relation(self.fact);
        let n = rel.row_count();
        let mut mask = vec![true; n];
        for p in &self.local {
            let (_, col) = db.resolve(&p.attr)?;
            let column = &rel.columns()[col];
            for (r, m) in mask.iter_mut().enumerate() {
                *m = *m && p.matches(column.datum(r));
            }
        }
        for f in &self.filters {
            let reader = KeyReader::new(rel, &f.fact_cols);
            if reader.is_single() {
                for (r, m) in mask.iter_mut().enumerate() {
                    *m = *m && reader.single(r).is_some_and(|c| f.keys.contains_single(c));
                }
            } else {
                for (r, m) in mask.iter_mut().enumerate() {
                    *m = *m && reader.get(r).is_some_and(|k| f.keys.contains(&k));
                }
            }
        }
        Ok(mask)
    }

    pub fn rows(&self, db: &Database) -> Result<Vec<usize>> {
        Ok(self
            .mask(db)?
            .into_iter()
            .enumerate()
            .filter_map(|(r, m)| m.then_some(r))
            .collect())
    }
}

/// Rewrites a predicate conjunction as semi-join filters on `fact`: the rows
/// of each constrained relation are projected onto their key toward the fact
/// and chained through intermediate relations. Every hop must go from the
/// 1-side to the N-side.
pub fn translate_predicate_to_semijoins(db: &Database, fact: usize, path: &[SplitPredicate]) -> Result<LeafSelection> {
    let mut by_rel: BTreeMap<usize, Vec<(usize, &SplitPredicate)>> = BTreeMap::new();
    for p in path {
        let (rel, col) = db.resolve(&p.attr)?;
        by_rel.entry(rel).or_default().push((col, p));
    }
    let local = by_rel
        .remove(&fact)
        .map(|ps| ps.into_iter().map(|(_, p)| p.clone()).collect())
        .unwrap_or_default();
    let mut filters = Vec::with_capacity(by_rel.len());
    for (rel, preds) in by_rel {
        let r = db.relation(rel);
        let mut selected: Vec<bool> = (0..r.row_count())
            .map(|i| preds.iter().all(|(c, p)| p.matches(r.columns()[*c].datum(i))))
            .collect();
        let hops = db.path(rel, fact);
        for w in hops.windows(2) {
            let (x, y) = (w[0], w[1]);
            let edge = db.edge_between(x, y).expect("adjacent relations");
            if edge.one_side != Some(x) {
                return Err(Error::NotPushable(preds[0].1.attr.to_string()));
            }
            let rx = db.relation(x);
            let keys = FilterKeys::collect(&KeyReader::new(rx, edge.cols_of(x)), rx.row_count(), &selected);
            if y == fact {
                filters.push(SemiJoinFilter {
                    source: rel,
                    fact_cols: edge.cols_of(y).to_vec(),
                    keys,
                });
                break;
            }
            let ry = db.relation(y);
            let reader = KeyReader::new(ry, edge.cols_of(y));
            selected = (0..ry.row_count())
                .map(|i| reader.get(i).is_some_and(|k| keys.contains(&k)))
                .collect();
        }
    }
    Ok(LeafSelection { fact, filters, local })
}

/// Fact-row masks of every leaf of `tree`, in leaf-id order, each from the
/// semi-join translation of the leaf's whole predicate path.
pub fn leaf_masks(db: &Database, fact: usize, tree: &TreeModel) -> Result<Vec<(usize, Vec<bool>)>> {
    tree.leaves()
        .into_iter()
        .map(|leaf| {
            let sel = translate_predicate_to_semijoins(db, fact, &tree.nodes[leaf].predicate_path)?;
            Ok((leaf, sel.mask(db)?))
        })
        .collect()
}

/// Tests single fact rows against a translated selection.
struct RowTester<'a> {
    local: Vec<(&'a Column, &'a SplitPredicate)>,
    filters: Vec<(KeyReader<'a>, &'a FilterKeys)>,
}

impl<'a> RowTester<'a> {
    fn new(db: &'a Database, sel: &'a LeafSelection) -> Result<Self> {
        let rel = db.relation(sel.fact);
        let local = sel
            .local
            .iter()
            .map(|p| Ok((&rel.columns()[db.resolve(&p.attr)?.1], p)))
            .collect::<Result<_>>()?;
        let filters = sel.filters.iter().map(|f| (KeyReader::new(rel, &f.fact_cols), &f.keys)).collect();
        Ok(RowTester { local, filters })
    }

    #[inline]
    fn test(&self, r: usize) -> bool {
        self.local.iter().all(|(c, p)| p.matches(c.datum(r)))
            && self.filters.iter().all(|(rd, keys)| match rd.single(r) {
                Some(c) if rd.is_single() => keys.contains_single(c),
                _ => rd.get(r).is_some_and(|k| keys.contains(&k)),
            })
    }
}

/// Fact rows of every leaf, in leaf-id order. Rows are partitioned top-down:
/// each internal node's predicate and its complement are translated to
/// semi-join filters once and tested only on the rows that reached the node.
/// Along N-to-1 chains a predicate's filter and its complement's filter are
/// disjoint, so this yields the same sets as [`leaf_masks`].
pub fn leaf_rows(db: &Database, fact: usize, tree: &TreeModel) -> Result<Vec<(usize, Vec<u32>)>> {
    let all: Vec<u32> = (0..db.relation(fact).row_count() as u32).collect();
    let mut out = Vec::new();
    let mut stack = vec![(0usize, all)];
    while let Some((id, rows)) = stack.pop() {
        let node = &tree.nodes[id];
        let (Some((pred, _)), Some((l, r))) = (&node.split, node.children) else {
            out.push((id, rows));
            continue;
        };
        let left_sel = translate_predicate_to_semijoins(db, fact, std::slice::from_ref(pred))?;
        let right_sel = translate_predicate_to_semijoins(db, fact, &[pred.negate()])?;
        let (lt, rt) = (RowTester::new(db, &left_sel)?, RowTester::new(db, &right_sel)?);
        let mut left = Vec::new();
        let mut right = Vec::new();
        for row in rows {
            if lt.test(row as usize) {
                left.push(row);
            } else if rt.test(row as usize) {
                right.push(row);
            }
        }
        stack.push((r, right));
        stack.push((l, left));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

/// Order statistic of `values` over the selected rows; `None` if none are.
pub fn leaf_order_statistic(values: &[f64], selected: impl Iterator<Item = usize>, rule: LeafRule) -> Option<f64> {
    let alpha = match rule {
        LeafRule::Median => 0.5,
        LeafRule::Percentile { alpha } => alpha,
        _ => return None,
    };
    let mut picked: Vec<f64> = selected.map(|r| values[r]).collect();
    (!picked.is_empty()).then(|| order_statistic(&mut picked, alpha))
}

fn numeric_buffer(db: &Database, rel: usize, name: &str) -> Result<Arc<Vec<f64>>> {
    match db.relation(rel).try_column(name)?.data() {
        ColumnData::Numeric(v) => Ok(Arc::clone(v)),
        ColumnData::Codes(_) => Err(Error::KindMismatch(format!("{name} is not numeric"))),
    }
}

/// Adds `learning_rate · leaf value` to the prediction column of `fact` for the
/// rows of each leaf, writing a fresh buffer that replaces the old one. Returns
/// the replaced buffer.
pub fn update_residuals_snowflake(
    db: &mut Database,
    fact: usize,
    column: &str,
    tree: &TreeModel,
    learning_rate: f64,
) -> Result<ColumnData> {
    let leaves = leaf_rows(db, fact, tree)?;
    let old = numeric_buffer(db, fact, column)?;
    let mut next = old.as_ref().clone();
    apply_leaf_rows(&mut next, tree, &leaves, learning_rate);
    db.swap_column(fact, column, next.into())
}

fn apply_leaf_rows(pred: &mut [f64], tree: &TreeModel, leaves: &[(usize, Vec<u32>)], eta: f64) {
    for (leaf, rows) in leaves {
        let v = eta * tree.nodes[*leaf].leaf_prediction.as_ref().map_or(0.0, |p| p[0]);
        for &r in rows {
            pred[r as usize] += v;
        }
    }
}

/// One leaf cell of an update relation with its negated, scaled prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateCell {
    pub leaf: usize,
    pub predicates: Vec<SplitPredicate>,
    pub neg_prediction: f64,
}

impl UpdateCell {
    /// Variance annotation `(1, -p, p²)` of the cell.
    pub fn annotation(&self) -> [f64; 3] {
        let q = self.neg_prediction;
        [1.0, q, q * q]
    }
}

/// Leaf cells of one tree, to be multiplied into the cluster fact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRelation {
    /// Fact relation the cells are pushed to.
    pub cluster: Option<String>,
    pub cells: Vec<UpdateCell>,
}

pub fn build_update_relation(tree: &TreeModel, learning_rate: f64) -> UpdateRelation {
    UpdateRelation {
        cluster: tree.cluster.clone(),
        cells: tree
            .leaves()
            .into_iter()
            .map(|leaf| {
                let node = &tree.nodes[leaf];
                let v = node.leaf_prediction.as_ref().map_or(0.0, |p| p[0]);
                UpdateCell {
                    leaf,
                    predicates: node.predicate_path.clone(),
                    neg_prediction: -learning_rate * v,
                }
            })
            .collect(),
    }
}

/// Multiplies variance annotations by `(1, -p, p²)` on selected rows via the
/// closed form `(c, s - pc, q + p²c - 2ps)`.
fn shift_rows(ring_ann: Option<&Annotations>, n: usize, shifts: &[Option<f64>]) -> Result<Annotations> {
    let ones = Annotations::ones(SemiRing::Variance, n);
    let a = ring_ann.unwrap_or(&ones);
    if a.semiring() != SemiRing::Variance {
        return Err(Error::KindMismatch(format!("update needs variance annotations, got {}", a.semiring())));
    }
    let (c, s, q) = (a.component(0), a.component(1), a.component(2));
    let mut s2 = s.to_vec();
    let mut q2 = q.to_vec();
    for (r, shift) in shifts.iter().enumerate() {
        if let Some(p) = *shift {
            s2[r] = s[r] - p * c[r];
            q2[r] = q[r] + p * p * c[r] - 2.0 * p * s[r];
        }
    }
    Annotations::from_components(
        SemiRing::Variance,
        vec![Arc::clone(a.component_arc(0)), Arc::new(s2), Arc::new(q2)],
    )
}

/// Multiplies the update relation into the annotations: a constant tree
/// shifts the target relation, any other tree the fact of its cluster.
pub fn apply_update_relation(db: &Database, annotations: &mut [Option<Annotations>], update: &UpdateRelation) -> Result<()> {
    if update.cells.len() == 1 && update.cells[0].predicates.is_empty() {
        let rel = db.target_id();
        let n = db.relation(rel).row_count();
        let p = -update.cells[0].neg_prediction;
        annotations[rel] = Some(shift_rows(annotations[rel].as_ref(), n, &vec![Some(p); n])?);
        return Ok(());
    }
    let fact = match &update.cluster {
        Some(name) => db.id(name)?,
        None => db
            .snowflake_fact()?
            .ok_or_else(|| Error::NotPushable("update relation has no cluster".into()))?,
    };
    let n = db.relation(fact).row_count();
    let mut shifts: Vec<Option<f64>> = vec![None; n];
    for cell in &update.cells {
        let mask = translate_predicate_to_semijoins(db, fact, &cell.predicates)?.mask(db)?;
        let p = -cell.neg_prediction;
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            if shifts[r].replace(p).is_some() {
                return Err(Error::Overlap(r));
            }
        }
    }
    annotations[fact] = Some(shift_rows(annotations[fact].as_ref(), n, &shifts)?);
    Ok(())
}

/// Trains a boosted ensemble of `params.iterations` rounds.
pub fn train_gbm(
    db: &Database,
    target: &AttrRef,
    features: &[AttrRef],
    params: &GbmParams,
) -> Result<(EnsembleModel, GbmReport)> {
    if !(params.learning_rate > 0.0) {
        return Err(Error::Param("learning_rate must be positive".into()));
    }
    if features.contains(target) {
        return Err(Error::Param(format!("target {target} is also a feature")));
    }
    let schema = match params.schema {
        Some(s) => s,
        None if db.snowflake_fact()?.is_some() => SchemaKind::Snowflake,
        None => SchemaKind::Galaxy,
    };
    match schema {
        SchemaKind::Snowflake => {
            let fact = db
                .snowflake_fact()?
                .ok_or_else(|| Error::Unsupported("the schema is not a snowflake".into()))?;
            train_snowflake(db, fact, target, features, params)
        }
        SchemaKind::Galaxy => train_galaxy(db, target, features, params),
    }
}

fn tick(stats: &ExecStats, start: Instant, before: (usize, usize), iteration: usize, metric: f64) -> IterationReport {
    IterationReport {
        iteration,
        metric,
        seconds: start.elapsed().as_secs_f64(),
        messages_computed: stats.computed() - before.0,
        messages_reused: stats.reused() - before.1,
    }
}

fn train_snowflake(
    db: &Database,
    fact: usize,
    target: &AttrRef,
    features: &[AttrRef],
    params: &GbmParams,
) -> Result<(EnsembleModel, GbmReport)> {
    let mut work = db.clone();
    let n = work.relation(fact).row_count();
    let y_cells = work.aligned_column(fact, target)?;
    let in_join = work.rows_in_join(fact)?;
    let active: Vec<bool> = in_join.iter().zip(&y_cells).map(|(&j, y)| j && !y.is_null()).collect();
    let ys: Vec<f64> = y_cells.iter().map(|y| y.as_f64().unwrap_or(0.0)).collect();
    let active_ys: Vec<f64> = (0..n).filter(|&r| active[r]).map(|r| ys[r]).collect();
    if active_ys.is_empty() {
        return Err(Error::Empty("no fact row joins with a non-null target".into()));
    }

    let mut objective = params.objective;
    let (k, base) = if let Objective::Softmax { k } = objective {
        let k = if k == 0 {
            active_ys.iter().fold(0.0f64, |m, &y| m.max(y)) as usize + 1
        } else {
            k
        };
        if k < 2 {
            return Err(Error::Param("softmax needs at least two classes".into()));
        }
        let mut counts = vec![0.0; k];
        for &y in &active_ys {
            let c = y as usize;
            if y < 0.0 || y.fract() != 0.0 || c >= k {
                return Err(Error::Domain(format!("class {y} outside 0..{k}")));
            }
            counts[c] += 1.0;
        }
        objective = Objective::Softmax { k };
        let m = active_ys.len() as f64;
        (k, counts.iter().map(|&c| (c / m).max(1e-15).ln()).collect::<Vec<_>>())
    } else {
        (1, vec![objective.base_score(&active_ys)?])
    };

    let pred_cols: Vec<String> = (0..k).map(|c| format!("__pred{c}")).collect();
    for (c, name) in pred_cols.iter().enumerate() {
        work.add_column(fact, Column::numeric(name.clone(), vec![base[c]; n]))?;
    }
    work.add_column(fact, Column::numeric("__grad", vec![0.0; n]))?;
    work.add_column(fact, Column::numeric("__hess", vec![0.0; n]))?;

    let mut tree_params = params.tree.clone();
    tree_params.criterion = Criterion::Gradient {
        alpha: params.alpha,
        beta: params.beta,
    };
    tree_params.leaf_rule = objective.leaf_rule();
    tree_params.cpt = false;
    let stats = ExecStats::new();
    let mut trees = Vec::with_capacity(params.iterations * k);
    let mut report = Vec::with_capacity(params.iterations);

    for it in 0..params.iterations {
        let start = Instant::now();
        let before = (stats.computed(), stats.reused());
        let raws: Vec<Arc<Vec<f64>>> = pred_cols
            .iter()
            .map(|c| numeric_buffer(&work, fact, c))
            .collect::<Result<_>>()?;
        let probs: Option<Vec<Vec<f64>>> = (k > 1).then(|| {
            (0..n)
                .map(|r| {
                    if active[r] {
                        softmax(&raws.iter().map(|v| v[r]).collect::<Vec<_>>())
                    } else {
                        vec![0.0; k]
                    }
                })
                .collect()
        });
        for c in 0..k {
            let raw = &raws[c];
            let target_of = |r: usize| if k > 1 { (ys[r] as usize == c) as u8 as f64 } else { ys[r] };
            let mut grad = vec![0.0; n];
            let mut hess = vec![0.0; n];
            for r in (0..n).filter(|&r| active[r]) {
                let p = probs.as_ref().map_or(raw[r], |pr| pr[r][c]);
                let (g, h) = objective.grad_hess(target_of(r), p)?;
                grad[r] = g;
                hess[r] = h;
            }
            let (grad, hess) = (Arc::new(grad), Arc::new(hess));
            work.swap_column(fact, "__grad", ColumnData::Numeric(Arc::clone(&grad)))?;
            work.swap_column(fact, "__hess", ColumnData::Numeric(Arc::clone(&hess)))?;

            let mut annotations = vec![None; work.len()];
            annotations[fact] = Some(Annotations::from_components(SemiRing::Gradient, vec![hess, grad])?);
            let mut input = TrainInput::new(&work, features.to_vec(), SemiRing::Gradient, annotations);
            input.stats = Arc::clone(&stats);
            let mut tree = train_decision_tree(&input, &tree_params)?;
            drop(input);

            let leaves = leaf_rows(&work, fact, &tree)?;
            if matches!(tree_params.leaf_rule, LeafRule::Median | LeafRule::Percentile { .. }) {
                let residual: Vec<f64> = (0..n).map(|r| target_of(r) - raw[r]).collect();
                for (leaf, rows) in &leaves {
                    let rows = rows.iter().map(|&r| r as usize).filter(|&r| active[r]);
                    if let Some(v) = leaf_order_statistic(&residual, rows, tree_params.leaf_rule) {
                        tree.nodes[*leaf].leaf_prediction = Some(vec![v]);
                    }
                }
            }
            let mut next = raw.as_ref().clone();
            apply_leaf_rows(&mut next, &tree, &leaves, params.learning_rate);
            work.swap_column(fact, &pred_cols[c], next.into())?;
            trees.push(tree);
        }

        let raws: Vec<Arc<Vec<f64>>> = pred_cols
            .iter()
            .map(|c| numeric_buffer(&work, fact, c))
            .collect::<Result<_>>()?;
        let metric = snowflake_metric(&objective, &ys, &active, &raws);
        report.push(tick(&stats, start, before, it, metric));
    }

    let model = EnsembleModel {
        kind: ModelKind::Gbm,
        task: if k > 1 { Task::Classification { k } } else { Task::Regression },
        objective: Some(objective),
        learning_rate: params.learning_rate,
        base_score: base,
        trees,
        features: features.to_vec(),
        schema_kind: Some(SchemaKind::Snowflake),
    };
    let metric = if k > 1 { "multi_logloss" } else { "rmse" };
    Ok((
        model,
        GbmReport {
            schema: SchemaKind::Snowflake,
            metric: metric.into(),
            iterations: report,
        },
    ))
}

fn snowflake_metric(objective: &Objective, ys: &[f64], active: &[bool], raws: &[Arc<Vec<f64>>]) -> f64 {
    let rows = (0..ys.len()).filter(|&r| active[r]);
    let m = active.iter().filter(|&&a| a).count() as f64;
    if raws.len() > 1 {
        let loss: f64 = rows
            .map(|r| {
                let p = softmax(&raws.iter().map(|v| v[r]).collect::<Vec<_>>());
                -p[ys[r] as usize].max(1e-300).ln()
            })
            .sum();
        return loss / m;
    }
    let log = objective.log_link();
    let sq: f64 = rows
        .map(|r| {
            let p = if log { raws[0][r].exp() } else { raws[0][r] };
            (ys[r] - p) * (ys[r] - p)
        })
        .sum();
    (sq / m).sqrt()
}

fn train_galaxy(
    db: &Database,
    target: &AttrRef,
    features: &[AttrRef],
    params: &GbmParams,
) -> Result<(EnsembleModel, GbmReport)> {
    if params.objective != Objective::Rmse {
        return Err(Error::Unsupported(format!(
            "objective {} needs a snowflake schema",
            params.objective.name()
        )));
    }
    let ring = SemiRing::Variance;
    let (trel, tcol) = db.resolve(target)?;
    let column = &db.relation(trel).columns()[tcol];
    let mut lifted = vec![0.0; column.len() * 3];
    for r in 0..column.len() {
        if let Some(y) = column.datum(r).as_f64() {
            ring.lift_into(&mut lifted[r * 3..r * 3 + 3], Some(y), None);
        }
    }
    let mut annotations: Vec<Option<Annotations>> = vec![None; db.len()];
    annotations[trel] = Some(Annotations::from_flat(ring, &lifted));

    let stats = ExecStats::new();
    let join_total = |anns: &[Option<Annotations>]| -> Result<Vec<f64>> {
        let fz = Factorized::new(db, ring, anns.to_vec(), Arc::clone(&stats))?;
        fz.total(&PredicateSet::empty(db), &MessageCache::new(true), 0)
    };
    let total = join_total(&annotations)?;
    if total[0] <= 0.0 {
        return Err(Error::Empty("the join selects no annotated rows".into()));
    }
    let base = total[1] / total[0];
    let n = db.relation(trel).row_count();
    annotations[trel] = Some(shift_rows(annotations[trel].as_ref(), n, &vec![Some(base); n])?);

    let mut tree_params = params.tree.clone();
    tree_params.criterion = Criterion::Variance;
    tree_params.leaf_rule = LeafRule::Mean;
    tree_params.cpt = true;
    let mut trees = Vec::with_capacity(params.iterations);
    let mut report = Vec::with_capacity(params.iterations);
    for it in 0..params.iterations {
        let start = Instant::now();
        let before = (stats.computed(), stats.reused());
        let mut input = TrainInput::new(db, features.to_vec(), ring, annotations.clone());
        input.stats = Arc::clone(&stats);
        let tree = train_decision_tree(&input, &tree_params)?;
        let update = build_update_relation(&tree, params.learning_rate);
        apply_update_relation(db, &mut annotations, &update)?;
        let t = join_total(&annotations)?;
        report.push(tick(&stats, start, before, it, (t[2] / t[0]).max(0.0).sqrt()));
        trees.push(tree);
    }
    let model = EnsembleModel {
        kind: ModelKind::Gbm,
        task: Task::Regression,
        objective: Some(Objective::Rmse),
        learning_rate: params.learning_rate,
        base_score: vec![base],
        trees,
        features: features.to_vec(),
        schema_kind: Some(SchemaKind::Galaxy),
    };
    Ok((
        model,
        GbmReport {
            schema: SchemaKind::Galaxy,
            metric: "rmse".into(),
            iterations: report,
        },
    ))
}
