//! Reference implementations that work on the explicit join: a nested-loop
//! join, predicate evaluation, CART growth and rmse boosting. Only the
//! closed-form criterion formulas are shared with the crate.

use factorboost::predicate::{SplitOp, SplitPredicate};
use factorboost::semiring::{boosting_gain, class_reduction, reduction_in_variance};
use factorboost::{AttrRef, ClassCriterion, Datum, JoinGraph, Relation};

/// One join tuple: a row per relation, `None` for the null side of an outer join.
pub type Tuple = Vec<Option<usize>>;

fn key_of(rel: &Relation, cols: &[String], row: usize) -> Option<Vec<u32>> {
    cols.iter()
        .map(|c| match rel.column(c).unwrap().datum(row) {
            Datum::Code(v) => Some(v),
            _ => None,
        })
        .collect()
}

/// Extends tuples relation by relation in breadth-first order from the
/// target, scanning the new relation in full for every partial tuple.
pub fn naive_join(base: &[Relation], graph: &JoinGraph) -> Vec<Tuple> {
    let idx = |name: &str| base.iter().position(|r| r.name() == name).unwrap();
    let root = idx(&graph.target_relation);
    let mut placed = vec![false; base.len()];
    placed[root] = true;
    let mut tuples: Vec<Tuple> = (0..base[root].row_count())
        .map(|r| {
            let mut t = vec![None; base.len()];
            t[root] = Some(r);
            t
        })
        .collect();
    let mut progress = true;
    while progress {
        progress = false;
        for e in &graph.edges {
            let (l, r) = (idx(&e.left), idx(&e.right));
            let (from, to) = match (placed[l], placed[r]) {
                (true, false) => (l, r),
                (false, true) => (r, l),
                _ => continue,
            };
            assert!(!e.outer || from == l, "outer edges are traversed from the preserved side");
            let mut next = Vec::new();
            for t in &tuples {
                // The null side of an outer join stays null through its own edges.
                if t[from].is_none() {
                    next.push(t.clone());
                    continue;
                }
                let key = t[from].and_then(|row| key_of(&base[from], &e.keys, row));
                let mut matched = false;
                if let Some(key) = &key {
                    for row in 0..base[to].row_count() {
                        if key_of(&base[to], &e.keys, row).as_ref() == Some(key) {
                            let mut t2 = t.clone();
                            t2[to] = Some(row);
                            next.push(t2);
                            matched = true;
                        }
                    }
                }
                if !matched && e.outer {
                    next.push(t.clone());
                }
            }
            tuples = next;
            placed[to] = true;
            progress = true;
        }
    }
    assert!(placed.iter().all(|&p| p), "join graph is connected");
    tuples
}

pub fn value(base: &[Relation], t: &Tuple, attr: &AttrRef) -> Datum {
    let rel = base.iter().position(|r| r.name() == attr.relation).unwrap();
    match t[rel] {
        Some(row) => base[rel].column(&attr.column).unwrap().datum(row),
        None => Datum::Null,
    }
}

/// Whether `d` satisfies `p`, negation included.
pub fn satisfies(p: &SplitPredicate, d: Datum) -> bool {
    let left = match d {
        Datum::Null => p.missing_left,
        Datum::Num(v) => matches!(p.op, SplitOp::Le(t) if v <= t),
        Datum::Code(c) => matches!(p.op, SplitOp::Eq(e) if c == e),
    };
    left != p.negated
}

pub fn satisfies_all(base: &[Relation], t: &Tuple, path: &[SplitPredicate]) -> bool {
    path.iter().all(|p| satisfies(p, value(base, t, &p.attr)))
}

#[derive(Clone, Copy, Debug)]
pub enum Stat {
    /// Per-sample `[1, y, y²]`.
    Variance,
    /// Per-sample `[1, e_y]`.
    Class(ClassCriterion),
    /// Per-sample `[h, g]`.
    Gradient { beta: f64 },
}

/// Samples of the join with their feature values and statistic vectors.
#[derive(Clone, Debug)]
pub struct Problem {
    pub attrs: Vec<AttrRef>,
    /// `values[f][i]`: feature `f` of sample `i`.
    pub values: Vec<Vec<Datum>>,
    pub stats: Vec<Vec<f64>>,
    pub stat: Stat,
}

impl Problem {
    /// Tuples with a non-null target, in join order.
    pub fn from_join(base: &[Relation], tuples: &[Tuple], target: &AttrRef, attrs: &[AttrRef], stat: Stat, k: usize) -> (Problem, Vec<Tuple>) {
        let kept: Vec<Tuple> = tuples.iter().filter(|t| !value(base, t, target).is_null()).cloned().collect();
        let stats = kept
            .iter()
            .map(|t| match (stat, value(base, t, target)) {
                (Stat::Variance, Datum::Num(y)) => vec![1.0, y, y * y],
                (Stat::Class(_), Datum::Code(c)) => {
                    let mut v = vec![0.0; k + 1];
                    v[0] = 1.0;
                    v[1 + c as usize] = 1.0;
                    v
                }
                (s, d) => panic!("target {d:?} does not fit {s:?}"),
            })
            .collect();
        let values = attrs
            .iter()
            .map(|a| kept.iter().map(|t| value(base, t, a)).collect())
            .collect();
        (
            Problem {
                attrs: attrs.to_vec(),
                values,
                stats,
                stat,
            },
            kept,
        )
    }

    fn sum(&self, rows: &[usize]) -> Vec<f64> {
        let width = self.stats.first().map_or(1, Vec::len);
        let mut acc = vec![0.0; width];
        for &r in rows {
            for (a, v) in acc.iter_mut().zip(&self.stats[r]) {
                *a += v;
            }
        }
        acc
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OracleParams {
    pub max_leaves: usize,
    pub max_depth: usize,
    pub min_leaf_count: f64,
}

#[derive(Clone, Debug)]
pub struct OracleNode {
    pub id: usize,
    pub depth: usize,
    pub rows: Vec<usize>,
    pub path: Vec<SplitPredicate>,
    pub split: Option<SplitPredicate>,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OracleTree {
    pub nodes: Vec<OracleNode>,
}

impl OracleTree {
    pub fn split_sequence(&self) -> Vec<(usize, SplitPredicate)> {
        self.nodes.iter().filter_map(|n| n.split.clone().map(|p| (n.id, p))).collect()
    }

    pub fn leaves(&self) -> Vec<&OracleNode> {
        self.nodes.iter().filter(|n| n.split.is_none()).collect()
    }
}

struct Best {
    pred: SplitPredicate,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

fn valid(p: &Problem, agg: &[f64], min_count: f64) -> bool {
    match p.stat {
        Stat::Gradient { .. } => agg[0] > 0.0,
        _ => agg[0] > 0.0 && agg[0] >= min_count,
    }
}

fn gain(p: &Problem, total: &[f64], left: &[f64], right: &[f64]) -> Option<f64> {
    match p.stat {
        Stat::Variance => reduction_in_variance(total[0], total[1], left[0], left[1]),
        Stat::Class(kind) => class_reduction(kind, total, left, right),
        Stat::Gradient { beta } => boosting_gain(total[0], total[1], left[0], left[1], 0.0, beta),
    }
}

fn best_split(p: &Problem, rows: &[usize], params: &OracleParams) -> Option<Best> {
    let total = p.sum(rows);
    let mut best: Option<Best> = None;
    for (f, vals) in p.values.iter().enumerate() {
        let mut distinct: Vec<Datum> = rows.iter().map(|&r| vals[r]).filter(|d| !d.is_null()).collect();
        distinct.sort_by(|a, b| match (a, b) {
            (Datum::Num(x), Datum::Num(y)) => x.total_cmp(y),
            (Datum::Code(x), Datum::Code(y)) => x.cmp(y),
            _ => unreachable!("mixed kinds in one feature"),
        });
        distinct.dedup();
        for v in distinct {
            let op = match v {
                Datum::Num(x) => SplitOp::Le(x),
                Datum::Code(c) => SplitOp::Eq(c),
                Datum::Null => unreachable!(),
            };
            for missing_left in [false, true] {
                let pred = SplitPredicate {
                    feature: f,
                    attr: p.attrs[f].clone(),
                    op,
                    negated: false,
                    missing_left,
                };
                let (left, right): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| satisfies(&pred, vals[r]));
                let (l, r) = (p.sum(&left), p.sum(&right));
                if !valid(p, &l, params.min_leaf_count) || !valid(p, &r, params.min_leaf_count) {
                    continue;
                }
                let Some(g) = gain(p, &total, &l, &r) else { continue };
                if g <= 0.0 || best.as_ref().is_some_and(|b| g <= b.gain) {
                    continue;
                }
                best = Some(Best { pred, gain: g, left, right });
            }
        }
    }
    best
}

fn leaf_value(p: &Problem, agg: &[f64]) -> Vec<f64> {
    match p.stat {
        Stat::Variance => vec![agg[1] / agg[0]],
        Stat::Class(_) => agg[1..].iter().map(|v| v / agg[0]).collect(),
        Stat::Gradient { .. } => vec![-agg[1] / agg[0]],
    }
}

/// Best-first growth: the open node with the largest gain splits next, ties
/// to the lower node id.
pub fn grow(p: &Problem, params: &OracleParams) -> OracleTree {
    let all: Vec<usize> = (0..p.stats.len()).collect();
    let mut nodes = vec![OracleNode {
        id: 0,
        depth: 0,
        rows: all,
        path: Vec::new(),
        split: None,
        value: Vec::new(),
    }];
    let mut open: Vec<(usize, Best)> = Vec::new();
    if params.max_leaves > 1 && params.max_depth > 0 {
        if let Some(b) = best_split(p, &nodes[0].rows, params) {
            open.push((0, b));
        }
    }
    let mut leaves = 1;
    while leaves < params.max_leaves && !open.is_empty() {
        let mut pick = 0;
        for (i, (id, b)) in open.iter().enumerate() {
            let (pid, pb) = (&open[pick].0, &open[pick].1);
            if b.gain > pb.gain || (b.gain == pb.gain && id < pid) {
                pick = i;
            }
        }
        let (id, b) = open.remove(pick);
        let depth = nodes[id].depth + 1;
        let mut children = Vec::new();
        for (rows, pred) in [(b.left, b.pred.clone()), (b.right, b.pred.negate())] {
            let mut path = nodes[id].path.clone();
            path.push(pred);
            children.push(nodes.len());
            nodes.push(OracleNode {
                id: nodes.len(),
                depth,
                rows,
                path,
                split: None,
                value: Vec::new(),
            });
        }
        nodes[id].split = Some(b.pred);
        leaves += 1;
        if leaves >= params.max_leaves {
            break;
        }
        if depth < params.max_depth {
            for c in children {
                if let Some(b) = best_split(p, &nodes[c].rows, params) {
                    open.push((c, b));
                }
            }
        }
    }
    for i in 0..nodes.len() {
        if nodes[i].split.is_none() {
            let agg = p.sum(&nodes[i].rows);
            nodes[i].value = leaf_value(p, &agg);
        }
    }
    OracleTree { nodes }
}

/// Squared-error boosting from the mean with unit hessians; returns the
/// training rmse after every round.
pub fn gbm_rmse(p: &Problem, ys: &[f64], iterations: usize, learning_rate: f64, params: &OracleParams, beta: f64) -> Vec<f64> {
    let n = ys.len();
    let base = ys.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base; n];
    let mut out = Vec::with_capacity(iterations);
    let mut prob = p.clone();
    prob.stat = Stat::Gradient { beta };
    for _ in 0..iterations {
        prob.stats = (0..n).map(|i| vec![1.0, pred[i] - ys[i]]).collect();
        let tree = grow(&prob, params);
        for leaf in tree.leaves() {
            for &r in &leaf.rows {
                pred[r] += learning_rate * leaf.value[0];
            }
        }
        let mse = (0..n).map(|i| (ys[i] - pred[i]).powi(2)).sum::<f64>() / n as f64;
        out.push(mse.sqrt());
    }
    out
}
