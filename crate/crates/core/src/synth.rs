//! Seeded synthetic schemas for benchmarks and instrumentation checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::database::{AttrRef, Database};
use crate::error::Result;
use crate::joingraph::{Cardinality, JoinEdge, JoinGraph};
use crate::relstore::{Column, Relation};
use crate::tree::{train_decision_tree, TrainInput, TreeModel, TreeParams};

/// Fact `F(k, f1, f2, y)` with an N-to-1 edge on `k` to `D(k, a, b)`.
#[derive(Clone, Copy, Debug)]
pub struct StarSpec {
    pub fact_rows: usize,
    pub dim_rows: usize,
    pub seed: u64,
}

impl Default for StarSpec {
    fn default() -> Self {
        StarSpec {
            fact_rows: 1_000_000,
            dim_rows: 10_000,
            seed: 42,
        }
    }
}

pub fn star_schema(spec: &StarSpec) -> Result<Database> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim_a: Vec<f64> = (0..spec.dim_rows).map(|_| rng.gen_range(0..100) as f64).collect();
    let dim_b: Vec<u32> = (0..spec.dim_rows).map(|_| rng.gen_range(0..8)).collect();
    let mut k = Vec::with_capacity(spec.fact_rows);
    let mut f1 = Vec::with_capacity(spec.fact_rows);
    let mut f2 = Vec::with_capacity(spec.fact_rows);
    let mut y = Vec::with_capacity(spec.fact_rows);
    for _ in 0..spec.fact_rows {
        let d = rng.gen_range(0..spec.dim_rows as u32);
        let x1 = rng.gen_range(0..50) as f64;
        let x2 = rng.gen_range(0..4u32);
        let noise: f64 = rng.gen_range(-1.0..1.0);
        let level = if dim_a[d as usize] < 50.0 { 10.0 } else { -5.0 };
        y.push(level + 0.2 * x1 + 3.0 * (dim_b[d as usize] % 3) as f64 + x2 as f64 + noise);
        k.push(d);
        f1.push(x1);
        f2.push(x2);
    }
    let fact = Relation::new(
        "F",
        vec![
            Column::key("k", k),
            Column::numeric("f1", f1),
            Column::categorical("f2", f2),
            Column::numeric("y", y),
        ],
    )?;
    let dim = Relation::new(
        "D",
        vec![
            Column::key("k", (0..spec.dim_rows as u32).collect()),
            Column::numeric("a", dim_a),
            Column::categorical("b", dim_b),
        ],
    )?;
    let graph = JoinGraph::new(&["F", "D"], vec![JoinEdge::new("F", "D", &["k"], Cardinality::NTo1)], "F");
    Database::new(vec![fact, dim], graph)
}

pub fn star_target() -> AttrRef {
    AttrRef::new("F", "y")
}

pub fn star_features() -> Vec<AttrRef> {
    vec![
        AttrRef::new("F", "f1"),
        AttrRef::new("F", "f2"),
        AttrRef::new("D", "a"),
        AttrRef::new("D", "b"),
    ]
}

/// A regression tree with up to `leaves` leaves over the star schema.
pub fn star_tree(db: &Database, leaves: usize) -> Result<TreeModel> {
    let input = TrainInput::regression(db, &star_target(), star_features())?;
    let params = TreeParams {
        max_leaves: leaves,
        ..TreeParams::default()
    };
    train_decision_tree(&input, &params)
}

/// Two large relations `L(a, x1, y)` and `M(b, x2)` attached N-to-1 to a small
/// hub `H(a, b, h)`, where every hub row pairs a block of `L` with a block
/// of `M`. The join has `left_rows · right_rows / hub_rows` tuples.
#[derive(Clone, Copy, Debug)]
pub struct HubSpec {
    pub hub_rows: usize,
    pub left_rows: usize,
    pub right_rows: usize,
    pub seed: u64,
}

impl Default for HubSpec {
    fn default() -> Self {
        HubSpec {
            hub_rows: 10,
            left_rows: 10_000,
            right_rows: 1_000,
            seed: 7,
        }
    }
}

impl HubSpec {
    pub fn join_size(&self) -> usize {
        self.left_rows * self.right_rows / self.hub_rows
    }
}

pub fn hub_schema(spec: &HubSpec) -> Result<Database> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = spec.hub_rows as u32;
    let hub = Relation::new(
        "H",
        vec![
            Column::key("a", (0..h).collect()),
            Column::key("b", (0..h).collect()),
            Column::numeric("h", (0..h).map(|i| (i % 3) as f64).collect()),
        ],
    )?;
    let left_a: Vec<u32> = (0..spec.left_rows as u32).map(|i| i % h).collect();
    let x1: Vec<f64> = (0..spec.left_rows).map(|_| rng.gen_range(0..1000) as f64).collect();
    let y: Vec<f64> = left_a
        .iter()
        .zip(&x1)
        .map(|(&a, &x)| a as f64 + x / 100.0 + rng.gen_range(0.0..1.0))
        .collect();
    let left = Relation::new("L", vec![Column::key("a", left_a), Column::numeric("x1", x1), Column::numeric("y", y)])?;
    let right = Relation::new(
        "M",
        vec![
            Column::key("b", (0..spec.right_rows as u32).map(|i| i % h).collect()),
            Column::numeric("x2", (0..spec.right_rows).map(|_| rng.gen_range(0..100) as f64).collect()),
        ],
    )?;
    let graph = JoinGraph::new(
        &["L", "H", "M"],
        vec![
            JoinEdge::new("L", "H", &["a"], Cardinality::NTo1),
            JoinEdge::new("M", "H", &["b"], Cardinality::NTo1),
        ],
        "L",
    );
    Database::new(vec![left, hub, right], graph)
}

pub fn hub_target() -> AttrRef {
    AttrRef::new("L", "y")
}

pub fn hub_features() -> Vec<AttrRef> {
    vec![AttrRef::new("L", "x1"), AttrRef::new("H", "h"), AttrRef::new("M", "x2")]
}
