//! Histogram cuboid: the join grouped by all binned features, computed by
//! passing grouped messages instead of materializing the join.

use indexmap::IndexMap;
use rustc_hash::FxHashMap;

use crate::database::{AttrRef, Database, Key, KeyReader};
use crate::engine::{AnnotatedRelation, Annotations, Binning};
use crate::error::{Error, Result};
use crate::joingraph::JoinGraph;
use crate::relstore::{Column, ColumnKind, Datum, Relation};
use crate::semiring::SemiRing;
use crate::tree::TrainInput;

pub const CUBOID_RELATION: &str = "__cuboid";

const UNSET: u64 = u64::MAX - 1;
const NULL: u64 = u64::MAX;

fn encode(d: Datum) -> u64 {
    match d {
        Datum::Null => NULL,
        Datum::Num(v) => v.to_bits(),
        Datum::Code(c) => c as u64,
    }
}

fn decode(kind: ColumnKind, v: u64) -> Datum {
    match (v, kind) {
        (NULL, _) => Datum::Null,
        (_, ColumnKind::Numeric) => Datum::Num(f64::from_bits(v)),
        _ => Datum::Code(v as u32),
    }
}

/// Grouped aggregates plus the binning used per feature.
#[derive(Clone, Debug)]
pub struct Cuboid {
    /// One column per feature, named `relation.column`.
    pub relation: AnnotatedRelation,
    pub features: Vec<AttrRef>,
    pub binnings: Vec<Binning>,
}

type Partial = Vec<(Vec<u64>, Vec<f64>)>;

/// Groups the annotated join of `input` by every feature after binning each
/// to at most `bins` values.
pub fn build_cuboid(input: &TrainInput<'_>, bins: usize) -> Result<Cuboid> {
    if bins == 0 {
        return Err(Error::Param("bins must be positive".into()));
    }
    let db = input.db;
    let ring = input.semiring;
    let nf = input.features.len();
    let mut located = Vec::with_capacity(nf);
    let mut binnings = Vec::with_capacity(nf);
    for attr in &input.features {
        let (rel, col) = db.resolve(attr)?;
        let column = &db.relation(rel).columns()[col];
        let values: Vec<f64> = (0..column.len()).filter_map(|r| column.datum(r).as_f64()).collect();
        binnings.push(Binning::plan(column.kind(), &values, bins, &attr.to_string())?);
        located.push((rel, col, column.kind()));
    }

    let root = db.target_id();
    let tree = db.rooted(root);
    let mut messages: Vec<Option<FxHashMap<Key, Partial>>> = vec![None; db.len()];
    let mut result: IndexMap<Vec<u64>, Vec<f64>> = IndexMap::new();
    let mut buf = ring.zero();
    for &x in tree.order.iter().rev() {
        let rel = db.relation(x);
        let own_feats: Vec<usize> = (0..nf).filter(|&f| located[f].0 == x).collect();
        let children: Vec<(KeyReader, FxHashMap<Key, Partial>)> = tree.children[x]
            .iter()
            .map(|&c| {
                let edge = db.edge_between(x, c).expect("tree edge");
                (KeyReader::new(rel, edge.cols_of(x)), messages[c].take().expect("child first"))
            })
            .collect();
        let parent_reader = tree.parent[x].map(|p| KeyReader::new(rel, db.edge_between(x, p).expect("tree edge").cols_of(x)));
        let mut out: IndexMap<(Key, Vec<u64>), Vec<f64>> = IndexMap::new();
        let mut peak = 0usize;
        'rows: for r in 0..rel.row_count() {
            match &input.annotations[x] {
                Some(a) => a.read(r, &mut buf),
                None => buf.copy_from_slice(&ring.one()),
            }
            if ring.is_zero(&buf) {
                continue;
            }
            let mut tuple = vec![UNSET; nf];
            for &f in &own_feats {
                tuple[f] = encode(binnings[f].apply(rel.columns()[located[f].1].datum(r)));
            }
            let mut partial: Partial = vec![(tuple, buf.clone())];
            for (reader, msg) in &children {
                let Some(list) = reader.get(r).and_then(|k| msg.get(&k)) else { continue 'rows };
                let mut next = Vec::with_capacity(partial.len() * list.len());
                for (t1, a1) in &partial {
                    for (t2, a2) in list {
                        let t: Vec<u64> = t1.iter().zip(t2).map(|(&u, &v)| if u == UNSET { v } else { u }).collect();
                        let mut a = a1.clone();
                        ring.mul_assign(&mut a, a2);
                        next.push((t, a));
                    }
                }
                partial = next;
            }
            peak = peak.max(partial.len());
            let key = match &parent_reader {
                Some(rd) => match rd.get(r) {
                    Some(k) => k,
                    None => continue,
                },
                None => Key::new(),
            };
            for (t, a) in partial {
                let slot = out.entry((key.clone(), t)).or_insert_with(|| ring.zero());
                ring.add_assign(slot, &a);
            }
        }
        let _lease = input.stats.lease(out.len() + peak);
        if tree.parent[x].is_some() {
            let mut grouped: FxHashMap<Key, Partial> = FxHashMap::default();
            for ((k, t), a) in out {
                grouped.entry(k).or_default().push((t, a));
            }
            messages[x] = Some(grouped);
        } else {
            result = out.into_iter().map(|((_, t), a)| (t, a)).collect();
        }
    }

    let rows: Vec<(&Vec<u64>, &Vec<f64>)> = result.iter().filter(|(_, a)| !ring.is_zero(a)).collect();
    let columns = (0..nf)
        .map(|f| {
            let kind = located[f].2;
            let cells: Vec<Datum> = rows.iter().map(|(t, _)| decode(kind, t[f])).collect();
            Column::from_datums(input.features[f].to_string(), kind, &cells)
        })
        .collect();
    let flat: Vec<f64> = rows.iter().flat_map(|(_, a)| a.iter().copied()).collect();
    let base = Relation::with_rows(CUBOID_RELATION, columns, rows.len())?;
    Ok(Cuboid {
        relation: AnnotatedRelation::new(base, Annotations::from_flat(ring, &flat))?,
        features: input.features.clone(),
        binnings,
    })
}

impl Cuboid {
    pub fn row_count(&self) -> usize {
        self.relation.row_count()
    }

    /// Single-relation database holding the cuboid.
    pub fn database(&self) -> Result<Database> {
        let graph = JoinGraph::new(&[CUBOID_RELATION], Vec::new(), CUBOID_RELATION);
        Database::new(vec![self.relation.base.clone()], graph)
    }

    /// Weighted training input over `db` (from [`Cuboid::database`]).
    pub fn train_input<'a>(&self, db: &'a Database) -> TrainInput<'a> {
        let features = self
            .features
            .iter()
            .map(|a| AttrRef::new(CUBOID_RELATION, a.to_string()))
            .collect();
        TrainInput::new(db, features, self.semiring(), vec![Some(self.relation.annotations.clone())])
    }

    pub fn semiring(&self) -> SemiRing {
        self.relation.semiring()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::tests::example_db;
    use crate::tree::{train_decision_tree, TreeParams};

    fn input(db: &Database) -> TrainInput<'_> {
        TrainInput::regression(db, &AttrRef::new("R", "y"), vec![AttrRef::new("T", "d"), AttrRef::new("S", "cv")]).unwrap()
    }

    #[test]
    fn cuboid_totals_match_the_join() {
        let db = example_db();
        let c = build_cuboid(&input(&db), 8).unwrap();
        assert_eq!(c.relation.annotations.total(), vec![8.0, 16.0, 36.0]);
        // d in {1,2} and cv in {1,2,3}.
        assert!(c.row_count() <= 6);
    }

    #[test]
    fn one_bin_collapses_numeric_features() {
        let db = example_db();
        let i = TrainInput::regression(&db, &AttrRef::new("R", "y"), vec![AttrRef::new("T", "d")]).unwrap();
        let c = build_cuboid(&i, 1).unwrap();
        assert_eq!(c.row_count(), 1);
        assert_eq!(c.relation.annotations.row(0), vec![8.0, 16.0, 36.0]);
    }

    #[test]
    fn tree_on_cuboid_matches_tree_on_base() {
        let db = example_db();
        let base = input(&db);
        let c = build_cuboid(&base, 8).unwrap();
        let cdb = c.database().unwrap();
        let params = TreeParams {
            max_leaves: 4,
            ..TreeParams::default()
        };
        let t1 = train_decision_tree(&base, &params).unwrap();
        let mut t2 = train_decision_tree(&c.train_input(&cdb), &params).unwrap();
        t2.map_attrs(base.features.clone());
        assert_eq!(t1.split_sequence(), t2.split_sequence());
    }
}
