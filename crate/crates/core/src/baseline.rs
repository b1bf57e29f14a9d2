//! Materialize-the-join baselines, used for benchmarks and instrumentation.

use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::boosting::{build_update_relation, leaf_rows};
use crate::database::{AttrRef, Database, Key, KeyReader};
use crate::engine::{ExecStats, RowLease};
use crate::error::{Error, Result};
use crate::joingraph::JoinGraph;
use crate::relstore::{Column, ColumnData, ColumnKind, Relation};
use crate::tree::{train_decision_tree, TrainInput, TreeModel, TreeParams};

pub const JOIN_RELATION: &str = "__join";

/// The full join as one relation with a `relation.column` column per input
/// column, plus the base row each tuple came from.
#[derive(Debug)]
pub struct FlatJoin {
    pub relation: Relation,
    /// `rows[rel][t]`: row of relation `rel` in tuple `t`.
    pub rows: Vec<Vec<u32>>,
    _lease: Option<RowLease>,
}

impl FlatJoin {
    pub fn len(&self) -> usize {
        self.relation.row_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Single-relation database over the flat join.
    pub fn database(&self) -> Result<Database> {
        let graph = JoinGraph::new(&[JOIN_RELATION], Vec::new(), JOIN_RELATION);
        Database::new(vec![self.relation.clone()], graph)
    }
}

pub fn flat_attr(attr: &AttrRef) -> AttrRef {
    AttrRef::new(JOIN_RELATION, attr.to_string())
}

/// Hash-joins every relation along the tree rooted at the target, keeping
/// every tuple in memory. Sizes are leased on `stats`; the lease for the
/// result lives as long as the returned value.
pub fn materialize_join(db: &Database, stats: Option<&Arc<ExecStats>>) -> Result<FlatJoin> {
    let root = db.target_id();
    let tree = db.rooted(root);
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); db.len()];
    rows[root] = (0..db.relation(root).row_count() as u32).collect();
    let mut count = rows[root].len();
    let mut lease = stats.map(|s| s.lease(count));
    let mut placed = vec![false; db.len()];
    placed[root] = true;
    for &x in tree.order.iter().skip(1) {
        let p = tree.parent[x].expect("non-root has a parent");
        let edge = db.edge_between(x, p).expect("tree edge");
        let child = db.relation(x);
        let reader = KeyReader::new(child, edge.cols_of(x));
        let mut index: FxHashMap<Key, Vec<u32>> = FxHashMap::default();
        for r in 0..child.row_count() {
            if let Some(k) = reader.get(r) {
                index.entry(k).or_default().push(r as u32);
            }
        }
        let parent_reader = KeyReader::new(db.relation(p), edge.cols_of(p));
        let mut next: Vec<Vec<u32>> = vec![Vec::new(); db.len()];
        for t in 0..count {
            let Some(matches) = parent_reader.get(rows[p][t] as usize).and_then(|k| index.get(&k)) else {
                continue;
            };
            for &m in matches {
                for (rel, col) in next.iter_mut().enumerate() {
                    if placed[rel] {
                        col.push(rows[rel][t]);
                    }
                }
                next[x].push(m);
            }
        }
        placed[x] = true;
        count = next[x].len();
        // Both generations are alive while the next one is built.
        let grown = stats.map(|s| s.lease(count));
        drop(lease);
        lease = grown;
        rows = next;
    }

    let mut columns = Vec::new();
    for (rel_id, rel) in db.relations().iter().enumerate() {
        let take: Vec<usize> = rows[rel_id].iter().map(|&r| r as usize).collect();
        for c in rel.columns() {
            columns.push(c.take(&take).renamed(format!("{}.{}", rel.name(), c.name())));
        }
    }
    Ok(FlatJoin {
        relation: Relation::with_rows(JOIN_RELATION, columns, count)?,
        rows,
        _lease: lease,
    })
}

/// Trains a regression tree on the materialized join. Node attributes refer
/// back to the original relations.
pub fn naive_regression_tree(
    db: &Database,
    target: &AttrRef,
    features: &[AttrRef],
    params: &TreeParams,
    stats: &Arc<ExecStats>,
) -> Result<TreeModel> {
    let flat = materialize_join(db, Some(stats))?;
    let fdb = flat.database()?;
    let mut input = TrainInput::regression(&fdb, &flat_attr(target), features.iter().map(flat_attr).collect())?;
    input.stats = Arc::clone(stats);
    let mut tree = train_decision_tree(&input, params)?;
    tree.map_attrs(features.to_vec());
    Ok(tree)
}

fn numeric(rel: &Relation, column: &str) -> Result<Vec<f64>> {
    rel.try_column(column)?
        .numeric_values()
        .map(<[f64]>::to_vec)
        .ok_or_else(|| Error::KindMismatch(format!("{column} is not numeric")))
}

/// Residual update by materializing the join, matching every tuple against
/// the leaf cells of the update relation and projecting back onto `fact`.
/// Produces the same column as the in-place strategy.
pub fn naive_ujoin_update(db: &Database, fact: usize, column: &str, tree: &TreeModel, learning_rate: f64) -> Result<Vec<f64>> {
    let flat = materialize_join(db, None)?;
    let update = build_update_relation(tree, learning_rate);
    let cells: Vec<Vec<(usize, &crate::predicate::SplitPredicate)>> = update
        .cells
        .iter()
        .map(|cell| {
            cell.predicates
                .iter()
                .map(|p| {
                    let idx = flat
                        .relation
                        .column_index(&p.attr.to_string())
                        .ok_or_else(|| Error::unknown_column(JOIN_RELATION, &p.attr.to_string()))?;
                    Ok((idx, p))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = numeric(db.relation(fact), column)?;
    let mut touched = vec![false; out.len()];
    let cols = flat.relation.columns();
    for t in 0..flat.len() {
        let row = flat.rows[fact][t] as usize;
        for (cell, preds) in update.cells.iter().zip(&cells) {
            if preds.iter().all(|(c, p)| p.matches(cols[*c].datum(t))) {
                if !std::mem::replace(&mut touched[row], true) {
                    out[row] -= cell.neg_prediction;
                }
                break;
            }
        }
    }
    Ok(out)
}

/// Residual update that rebuilds the whole fact relation: every column is
/// copied into a fresh relation holding the updated prediction column.
pub fn rebuild_relation_update(db: &Database, fact: usize, column: &str, tree: &TreeModel, learning_rate: f64) -> Result<Relation> {
    let rel = db.relation(fact);
    let mut values = numeric(rel, column)?;
    for (leaf, rows) in leaf_rows(db, fact, tree)? {
        let v = learning_rate * tree.nodes[leaf].leaf_prediction.as_ref().map_or(0.0, |p| p[0]);
        for r in rows {
            values[r as usize] += v;
        }
    }
    let columns = rel
        .columns()
        .iter()
        .map(|c| {
            if c.name() == column {
                Column::numeric(column, values.clone())
            } else {
                deep_copy(c)
            }
        })
        .collect();
    Relation::with_rows(rel.name(), columns, rel.row_count())
}

fn deep_copy(c: &Column) -> Column {
    let copy = match c.data() {
        ColumnData::Numeric(v) => Column::numeric(c.name(), v.to_vec()),
        ColumnData::Codes(v) if c.kind() == ColumnKind::Key => Column::key(c.name(), v.to_vec()),
        ColumnData::Codes(v) => Column::categorical(c.name(), v.to_vec()),
    };
    match c.validity() {
        Some(v) => copy.with_validity(v.clone()),
        None => copy,
    }
}
