//! Factorized decision-tree training and single-tree inference.

use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::database::{AttrRef, Database};
use crate::engine::{Annotations, ExecStats};
use crate::error::{Error, Result};
use crate::messages::{Absorbed, Factorized, MessageCache, MessageRequest, PredicateSet};
use crate::predicate::{SplitOp, SplitPredicate};
use crate::relstore::{ColumnKind, Datum};
use crate::scheduler::{execute_dag, TaskKind, TaskNode};
use crate::semiring::{boosting_gain, class_reduction, reduction_in_variance, ClassCriterion, LeafRule, SemiRing};

/// How split quality is measured; must match the annotation semiring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    Variance,
    Class { criterion: ClassCriterion },
    Gradient { alpha: f64, beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    BestFirst,
    DepthWise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_leaves: usize,
    /// Maximum depth of a leaf; the root has depth 0.
    pub max_depth: usize,
    /// Minimum count per child (count-bearing semirings only).
    pub min_leaf_count: f64,
    /// A split needs a reduction strictly above this.
    pub min_gain: f64,
    pub criterion: Criterion,
    pub growth: Growth,
    /// Leaf value rule for gradient trees.
    pub leaf_rule: LeafRule,
    pub threads: usize,
    /// Share messages between tree nodes.
    pub message_sharing: bool,
    /// Confine splits below the root to one cluster.
    pub cpt: bool,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_leaves: 31,
            max_depth: usize::MAX,
            min_leaf_count: 1.0,
            min_gain: 0.0,
            criterion: Criterion::Variance,
            growth: Growth::BestFirst,
            leaf_rule: LeafRule::Mean,
            threads: 1,
            message_sharing: true,
            cpt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub predicate_path: Vec<SplitPredicate>,
    /// Predicate of the left child and its criterion reduction.
    pub split: Option<(SplitPredicate, f64)>,
    pub children: Option<(usize, usize)>,
    pub leaf_prediction: Option<Vec<f64>>,
    /// Aggregate of the node's join tuples.
    pub agg: Vec<f64>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    /// Node `i` has id `i`; the root is node 0.
    pub nodes: Vec<TreeNode>,
    pub features: Vec<AttrRef>,
    pub semiring: SemiRing,
    pub params: TreeParams,
    /// Fact relation of the cluster later splits were confined to.
    pub cluster: Option<String>,
}

impl TreeModel {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Leaf ids in ascending order.
    pub fn leaves(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Splits in creation order, as `(node id, predicate)`.
    pub fn split_sequence(&self) -> Vec<(usize, SplitPredicate)> {
        self.nodes
            .iter()
            .filter_map(|n| n.split.as_ref().map(|(p, _)| (n.id, p.clone())))
            .collect()
    }

    /// Leaf reached by a row given as a feature-value function.
    pub fn route(&self, value: impl Fn(usize) -> Datum) -> usize {
        let mut node = &self.nodes[0];
        while let (Some((l, r)), Some((p, _))) = (node.children, &node.split) {
            node = &self.nodes[if p.matches(value(p.feature)) { l } else { r }];
        }
        node.id
    }

    /// Rewrites each predicate's attribute, e.g. to map a flattened copy back
    /// to the normalized schema.
    pub fn map_attrs(&mut self, features: Vec<AttrRef>) {
        let fix = |p: &mut SplitPredicate| p.attr = features[p.feature].clone();
        for n in &mut self.nodes {
            n.predicate_path.iter_mut().for_each(fix);
            if let Some((p, _)) = &mut n.split {
                fix(p);
            }
        }
        self.features = features;
    }
}

/// Leaf prediction for a row aligned with `model.features`.
pub fn predict_tree<'m>(model: &'m TreeModel, row: &[Datum]) -> &'m [f64] {
    let leaf = model.route(|f| row[f]);
    model.nodes[leaf].leaf_prediction.as_deref().unwrap_or(&[])
}

/// Annotated database plus the features a tree may split on.
#[derive(Clone)]
pub struct TrainInput<'a> {
    pub db: &'a Database,
    pub features: Vec<AttrRef>,
    pub semiring: SemiRing,
    pub annotations: Vec<Option<Annotations>>,
    pub stats: Arc<ExecStats>,
}

impl<'a> TrainInput<'a> {
    pub fn new(db: &'a Database, features: Vec<AttrRef>, semiring: SemiRing, annotations: Vec<Option<Annotations>>) -> Self {
        TrainInput {
            db,
            features,
            semiring,
            annotations,
            stats: ExecStats::new(),
        }
    }

    /// Variance annotations `(1, y, y²)` on the target relation. Rows with a
    /// null target get the zero element.
    pub fn regression(db: &'a Database, target: &AttrRef, features: Vec<AttrRef>) -> Result<Self> {
        let (rel, ys) = target_values(db, target, &features)?;
        let ring = SemiRing::Variance;
        let ann = lift_or_zero(ring, &ys);
        let mut annotations = vec![None; db.len()];
        annotations[rel] = Some(ann);
        Ok(Self::new(db, features, ring, annotations))
    }

    /// Class-count annotations for a coded target with `k` classes.
    pub fn classification(db: &'a Database, target: &AttrRef, features: Vec<AttrRef>, k: usize) -> Result<Self> {
        let (rel, ys) = target_values(db, target, &features)?;
        if let Some(bad) = ys.iter().flatten().find(|&&c| c as usize >= k) {
            return Err(Error::Domain(format!("class code {bad} outside 0..{k}")));
        }
        let ring = SemiRing::ClassCount { k };
        let mut annotations = vec![None; db.len()];
        annotations[rel] = Some(lift_or_zero(ring, &ys));
        Ok(Self::new(db, features, ring, annotations))
    }

    /// Multiplies a relation's annotations by per-row weights `(w, 0, ..)`.
    pub fn with_weights(mut self, rel: usize, weights: &[f64]) -> Result<Self> {
        let n = self.db.relation(rel).row_count();
        if weights.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: weights.len(),
            });
        }
        let ring = self.semiring;
        let w = ring.width();
        let mut flat = vec![0.0; n * w];
        let mut buf = ring.zero();
        for (i, &wt) in weights.iter().enumerate() {
            match &self.annotations[rel] {
                Some(a) => a.read(i, &mut buf),
                None => buf.copy_from_slice(&ring.one()),
            }
            ring.scale(&mut buf, wt);
            flat[i * w..(i + 1) * w].copy_from_slice(&buf);
        }
        self.annotations[rel] = Some(Annotations::from_flat(ring, &flat));
        Ok(self)
    }
}

fn target_values(db: &Database, target: &AttrRef, features: &[AttrRef]) -> Result<(usize, Vec<Option<f64>>)> {
    if features.contains(target) {
        return Err(Error::Param(format!("target {target} is also a feature")));
    }
    let (rel, col) = db.resolve(target)?;
    let column = &db.relation(rel).columns()[col];
    let ys = (0..column.len()).map(|i| column.datum(i).as_f64()).collect();
    Ok((rel, ys))
}

fn lift_or_zero(ring: SemiRing, ys: &[Option<f64>]) -> Annotations {
    let w = ring.width();
    let mut flat = vec![0.0; ys.len() * w];
    for (i, y) in ys.iter().enumerate() {
        if let Some(y) = y {
            ring.lift_into(&mut flat[i * w..(i + 1) * w], Some(*y), None);
        }
    }
    Annotations::from_flat(ring, &flat)
}

/// Best split of one feature for one node.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub predicate: SplitPredicate,
    pub reduction: f64,
    pub left: Vec<f64>,
    pub total: Vec<f64>,
}

struct FeatureInfo {
    attr: AttrRef,
    rel: usize,
    col: usize,
    kind: ColumnKind,
}

fn side_valid(ring: SemiRing, crit: &Criterion, x: &[f64], min_count: f64) -> bool {
    let c = ring.count(x);
    match crit {
        Criterion::Gradient { .. } => c > 0.0,
        _ => c > 0.0 && c >= min_count,
    }
}

fn reduction(crit: &Criterion, total: &[f64], left: &[f64], right: &[f64]) -> Option<f64> {
    match *crit {
        Criterion::Variance => reduction_in_variance(total[0], total[1], left[0], left[1]),
        Criterion::Class { criterion } => class_reduction(criterion, total, left, right),
        Criterion::Gradient { alpha, beta } => boosting_gain(total[0], total[1], left[0], left[1], alpha, beta),
    }
}

/// Scans the grouped aggregates of one feature. Thresholds ascend; for each,
/// nulls on the right are tried before nulls on the left, and only a strictly
/// larger reduction replaces the incumbent.
pub fn best_split_from_groups(
    groups: &Absorbed,
    feature: usize,
    attr: &AttrRef,
    kind: ColumnKind,
    ring: SemiRing,
    params: &TreeParams,
) -> Option<Candidate> {
    let crit = &params.criterion;
    let live: Vec<usize> = (0..groups.len()).filter(|&i| ring.count(groups.agg(i)) != 0.0).collect();
    let null = groups.null.as_ref().filter(|n| ring.count(n) != 0.0);
    let mut total = ring.zero();
    for &i in &live {
        ring.add_assign(&mut total, groups.agg(i));
    }
    if let Some(n) = null {
        ring.add_assign(&mut total, n);
    }
    let numeric = kind == ColumnKind::Numeric;
    let mut best: Option<Candidate> = None;
    let mut prefix = ring.zero();
    let mut left = ring.zero();
    let mut right = ring.zero();
    for &i in &live {
        let op = match groups.values[i] {
            Datum::Num(v) if numeric => SplitOp::Le(v),
            Datum::Code(c) if !numeric => SplitOp::Eq(c),
            _ => continue,
        };
        if numeric {
            ring.add_assign(&mut prefix, groups.agg(i));
        } else {
            prefix.copy_from_slice(groups.agg(i));
        }
        for missing_left in [false, true] {
            if missing_left && null.is_none() {
                continue;
            }
            left.copy_from_slice(&prefix);
            if missing_left {
                ring.add_assign(&mut left, null.unwrap());
            }
            right.copy_from_slice(&total);
            ring.sub_assign(&mut right, &left);
            if !side_valid(ring, crit, &left, params.min_leaf_count) || !side_valid(ring, crit, &right, params.min_leaf_count) {
                continue;
            }
            let Some(red) = reduction(crit, &total, &left, &right) else { continue };
            if red <= params.min_gain {
                continue;
            }
            if best.as_ref().map_or(true, |b| red > b.reduction) {
                best = Some(Candidate {
                    predicate: SplitPredicate {
                        feature,
                        attr: attr.clone(),
                        op,
                        negated: false,
                        missing_left,
                    },
                    reduction: red,
                    left: left.clone(),
                    total: total.clone(),
                });
            }
        }
    }
    best
}

/// Leaf value from a node aggregate.
pub fn leaf_value(ring: SemiRing, params: &TreeParams, agg: &[f64]) -> Vec<f64> {
    match ring {
        SemiRing::Variance => vec![if agg[0] > 0.0 { agg[1] / agg[0] } else { 0.0 }],
        SemiRing::ClassCount { .. } => {
            let c = agg[0];
            agg[1..].iter().map(|&v| if c > 0.0 { v / c } else { 0.0 }).collect()
        }
        SemiRing::Gradient => {
            let (h, g) = (agg[0], agg[1]);
            let beta = match (params.leaf_rule, params.criterion) {
                (LeafRule::ClosedFormPStar, Criterion::Gradient { beta, .. }) => beta,
                _ => 0.0,
            };
            vec![if h + beta > 0.0 { -g / (h + beta) } else { 0.0 }]
        }
        SemiRing::GradientVector { k } => (0..k)
            .map(|i| {
                let (h, g) = (agg[2 * i], agg[2 * i + 1]);
                if h > 0.0 {
                    -g / h
                } else {
                    0.0
                }
            })
            .collect(),
    }
}

/// Index of the largest class share, ties to the lowest class.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

struct Grower<'i, 'a> {
    input: &'i TrainInput<'a>,
    params: &'i TreeParams,
    fz: Factorized<'a>,
    cache: MessageCache,
    features: Vec<FeatureInfo>,
    allowed: Vec<bool>,
    nodes: Vec<TreeNode>,
    bound: Vec<PredicateSet>,
    cluster: Option<String>,
}

impl<'i, 'a> Grower<'i, 'a> {
    fn salt(&self, node: usize) -> u64 {
        if self.params.message_sharing {
            0
        } else {
            node as u64 + 1
        }
    }

    fn roots(&self) -> Vec<usize> {
        let mut roots: Vec<usize> = self
            .features
            .iter()
            .zip(&self.allowed)
            .filter(|(_, &a)| a)
            .map(|(f, _)| f.rel)
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots
    }

    /// Finds the best split of every node in `batch`, one task per message
    /// and per (node, feature).
    fn evaluate(&self, batch: &[usize]) -> Result<Vec<Option<Candidate>>> {
        let roots = self.roots();
        let requests: Vec<MessageRequest> = batch
            .iter()
            .map(|&n| MessageRequest {
                preds: &self.bound[n],
                salt: self.salt(n),
                roots: &roots,
            })
            .collect();
        let planned = self.fz.plan(&requests, &self.cache);
        let task_of: rustc_hash::FxHashMap<_, usize> =
            planned.iter().enumerate().map(|(i, p)| (p.key, i)).collect();

        let jobs: Vec<(usize, usize)> = (0..batch.len())
            .flat_map(|b| (0..self.features.len()).filter(|&f| self.allowed[f]).map(move |f| (b, f)))
            .collect();
        let results: Vec<Mutex<Option<Candidate>>> = jobs.iter().map(|_| Mutex::new(None)).collect();

        let mut tasks: Vec<TaskNode> = Vec::with_capacity(planned.len() + jobs.len());
        for (i, p) in planned.iter().enumerate() {
            let (fz, cache, requests) = (&self.fz, &self.cache, &requests);
            tasks.push(TaskNode::new(i, TaskKind::Message, p.deps.clone(), move || {
                fz.run_planned(p, requests, cache).map(|_| ())
            }));
        }
        for (j, &(b, f)) in jobs.iter().enumerate() {
            let node = batch[b];
            let info = &self.features[f];
            let preds = &self.bound[node];
            let salt = self.salt(node);
            let deps: Vec<usize> = self
                .fz
                .edges_toward(info.rel)
                .iter()
                .filter_map(|&(a, c)| task_of.get(&self.fz.key_for(a, c, preds, salt)).copied())
                .collect();
            let (fz, cache, params, slot) = (&self.fz, &self.cache, self.params, &results[j]);
            let ring = self.input.semiring;
            tasks.push(TaskNode::new(planned.len() + j, TaskKind::SplitEval, deps, move || {
                let incoming = fz.incoming(info.rel, None, preds, cache, salt)?;
                let groups = fz.absorb_grouped(info.rel, info.col, preds, &incoming)?;
                *slot.lock() = best_split_from_groups(&groups, f, &info.attr, info.kind, ring, params);
                Ok(())
            }));
        }
        execute_dag(tasks, self.params.threads.max(1))?;

        let mut best: Vec<Option<Candidate>> = vec![None; batch.len()];
        for (j, &(b, _)) in jobs.iter().enumerate() {
            if let Some(c) = results[j].lock().take() {
                if best[b].as_ref().map_or(true, |x| c.reduction > x.reduction) {
                    best[b] = Some(c);
                }
            }
        }
        Ok(best)
    }

    fn retain_live(&self, frontier: &[(usize, Candidate)]) {
        if !self.params.message_sharing {
            self.cache.clear();
            return;
        }
        let roots = self.roots();
        let requests: Vec<MessageRequest> = frontier
            .iter()
            .map(|&(n, _)| MessageRequest {
                preds: &self.bound[n],
                salt: self.salt(n),
                roots: &roots,
            })
            .collect();
        self.cache.retain(&self.fz.live_keys(&requests));
    }

    fn push_child(&mut self, parent: usize, pred: SplitPredicate, agg: Vec<f64>) -> Result<usize> {
        let id = self.nodes.len();
        let mut path = self.nodes[parent].predicate_path.clone();
        path.push(pred);
        self.bound.push(PredicateSet::bind(self.input.db, &path)?);
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            depth: self.nodes[parent].depth + 1,
            predicate_path: path,
            split: None,
            children: None,
            leaf_prediction: None,
            agg,
        });
        Ok(id)
    }

    /// Restricts features to the cluster holding the root split's relation.
    fn confine(&mut self, rel: usize) -> Result<()> {
        let name = self.input.db.name(rel);
        let clusters = self.input.db.clusters()?;
        let Some(cluster) = clusters.iter().find(|c| c.contains(name)) else {
            return Ok(());
        };
        for (f, info) in self.features.iter().enumerate() {
            self.allowed[f] = self.allowed[f] && cluster.contains(self.input.db.name(info.rel));
        }
        self.cluster = Some(cluster.fact.clone());
        Ok(())
    }

    fn pick(&self, frontier: &[(usize, Candidate)]) -> Option<usize> {
        let better = |a: &(usize, Candidate), b: &(usize, Candidate)| match self.params.growth {
            Growth::BestFirst => a.1.reduction > b.1.reduction || (a.1.reduction == b.1.reduction && a.0 < b.0),
            Growth::DepthWise => {
                let (da, db) = (self.nodes[a.0].depth, self.nodes[b.0].depth);
                da < db || (da == db && a.0 < b.0)
            }
        };
        let mut best: Option<usize> = None;
        for i in 0..frontier.len() {
            if best.map_or(true, |b| better(&frontier[i], &frontier[b])) {
                best = Some(i);
            }
        }
        best
    }

    fn grow(mut self) -> Result<TreeModel> {
        let ring = self.input.semiring;
        let root_agg = self.fz.total(&self.bound[0], &self.cache, self.salt(0))?;
        if ring.count(&root_agg) <= 0.0 {
            return Err(Error::Empty("the join selects no annotated rows".into()));
        }
        self.nodes[0].agg = root_agg;
        let mut frontier: Vec<(usize, Candidate)> = Vec::new();
        if self.params.max_leaves > 1 && self.params.max_depth > 0 {
            if let Some(c) = self.evaluate(&[0])?.pop().flatten() {
                frontier.push((0, c));
            }
        }
        self.retain_live(&frontier);
        let mut leaves = 1;
        while leaves < self.params.max_leaves {
            let Some(i) = self.pick(&frontier) else { break };
            let (node, cand) = frontier.swap_remove(i);
            let mut right_agg = cand.total.clone();
            ring.sub_assign(&mut right_agg, &cand.left);
            let pred = cand.predicate.clone();
            let l = self.push_child(node, pred.clone(), cand.left.clone())?;
            let r = self.push_child(node, pred.negate(), right_agg)?;
            self.nodes[node].split = Some((pred.clone(), cand.reduction));
            self.nodes[node].children = Some((l, r));
            leaves += 1;
            if node == 0 && self.params.cpt {
                let rel = self.features[pred.feature].rel;
                self.confine(rel)?;
            }
            if leaves >= self.params.max_leaves {
                break;
            }
            if self.nodes[l].depth < self.params.max_depth {
                let found = self.evaluate(&[l, r])?;
                for (id, c) in [l, r].into_iter().zip(found) {
                    if let Some(c) = c {
                        frontier.push((id, c));
                    }
                }
            }
            self.retain_live(&frontier);
        }
        self.cache.clear();
        for n in &mut self.nodes {
            if n.is_leaf() {
                n.leaf_prediction = Some(leaf_value(ring, self.params, &n.agg));
            }
        }
        Ok(TreeModel {
            nodes: self.nodes,
            features: self.input.features.clone(),
            semiring: ring,
            params: self.params.clone(),
            cluster: self.cluster,
        })
    }
}

fn check_criterion(ring: SemiRing, crit: &Criterion) -> Result<()> {
    let ok = matches!(
        (ring, crit),
        (SemiRing::Variance, Criterion::Variance)
            | (SemiRing::ClassCount { .. }, Criterion::Class { .. })
            | (SemiRing::Gradient, Criterion::Gradient { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(Error::KindMismatch(format!("criterion {crit:?} does not fit {ring} annotations")))
    }
}

/// Grows one tree over the annotated join without materializing it.
pub fn train_decision_tree(input: &TrainInput<'_>, params: &TreeParams) -> Result<TreeModel> {
    check_criterion(input.semiring, &params.criterion)?;
    if params.max_leaves == 0 {
        return Err(Error::Param("max_leaves must be at least 1".into()));
    }
    let db = input.db;
    let mut features = Vec::with_capacity(input.features.len());
    for attr in &input.features {
        let (rel, col) = db.resolve(attr)?;
        features.push(FeatureInfo {
            attr: attr.clone(),
            rel,
            col,
            kind: db.relation(rel).columns()[col].kind(),
        });
    }
    let fz = Factorized::new(db, input.semiring, input.annotations.clone(), Arc::clone(&input.stats))?;
    let n_features = features.len();
    let grower = Grower {
        input,
        params,
        fz,
        cache: MessageCache::new(params.message_sharing),
        features,
        allowed: vec![true; n_features],
        nodes: vec![TreeNode {
            id: 0,
            parent: None,
            depth: 0,
            predicate_path: Vec::new(),
            split: None,
            children: None,
            leaf_prediction: None,
            agg: Vec::new(),
        }],
        bound: vec![PredicateSet::empty(db)],
        cluster: None,
    };
    grower.grow()
}

/// Best split of `feature` for a node with the given predicate path.
pub fn best_split_feature(
    input: &TrainInput<'_>,
    path: &[SplitPredicate],
    feature: usize,
    params: &TreeParams,
) -> Result<Option<Candidate>> {
    let attr = input
        .features
        .get(feature)
        .ok_or_else(|| Error::Param(format!("feature index {feature} out of range")))?;
    let (rel, col) = input.db.resolve(attr)?;
    let fz = Factorized::new(input.db, input.semiring, input.annotations.clone(), Arc::clone(&input.stats))?;
    let preds = PredicateSet::bind(input.db, path)?;
    let cache = MessageCache::new(true);
    let groups = fz.grouped(rel, col, &preds, &cache, 0)?;
    let kind = input.db.relation(rel).columns()[col].kind();
    Ok(best_split_from_groups(&groups, feature, attr, kind, input.semiring, params))
}

/// Best split over all features; ties go to the earlier feature.
pub fn get_best_split(input: &TrainInput<'_>, path: &[SplitPredicate], params: &TreeParams) -> Result<Option<Candidate>> {
    let mut best: Option<Candidate> = None;
    for f in 0..input.features.len() {
        if let Some(c) = best_split_feature(input, path, f, params)? {
            if best.as_ref().map_or(true, |b| c.reduction > b.reduction) {
                best = Some(c);
            }
        }
    }
    Ok(best)
}
