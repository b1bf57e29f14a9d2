//! Fixtures shared by the criterion benches.

use factorboost::baseline::{materialize_join, FlatJoin};
use factorboost::synth::{star_schema, star_tree, StarSpec};
use factorboost::{Column, Database, Result, TreeModel};

/// Name of the prediction column added to the fact relation.
pub const PRED: &str = "pred";

/// Star schema with a zeroed prediction column on `F` and an `leaves`-leaf
/// tree trained on it.
pub fn update_fixture(fact_rows: usize, dim_rows: usize, leaves: usize) -> Result<(Database, usize, TreeModel)> {
    let mut db = star_schema(&StarSpec {
        fact_rows,
        dim_rows,
        seed: 42,
    })?;
    let tree = star_tree(&db, leaves)?;
    let fact = db.id("F")?;
    db.add_column(fact, Column::numeric(PRED, vec![0.0; fact_rows]))?;
    Ok((db, fact, tree))
}

/// Star schema plus its materialized join.
pub fn split_fixture(fact_rows: usize, dim_rows: usize) -> Result<(Database, FlatJoin)> {
    let db = star_schema(&StarSpec {
        fact_rows,
        dim_rows,
        seed: 7,
    })?;
    let flat = materialize_join(&db, None)?;
    Ok((db, flat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_consistent() {
        let (db, fact, tree) = update_fixture(1000, 20, 8).unwrap();
        assert_eq!(db.relation(fact).column(PRED).unwrap().len(), 1000);
        assert_eq!(tree.leaf_count(), 8);
        let (_, flat) = split_fixture(500, 10).unwrap();
        assert_eq!(flat.len(), 500);
    }
}
