//! Seeded random schemas. Every generator keeps the raw relations next to the
//! loaded database so oracles can work on the data as written.

use factorboost::{AttrRef, Cardinality, Column, ColumnKind, Database, JoinEdge, JoinGraph, Relation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetKind {
    /// Multiples of 1/4 so every aggregate is exact.
    Dyadic,
    Integer,
    /// Uniform reals.
    Real,
    Classes(usize),
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub db: Database,
    /// Relations before outer-join augmentation, in database order.
    pub base: Vec<Relation>,
    pub graph: JoinGraph,
    pub target: AttrRef,
    pub features: Vec<AttrRef>,
}

impl Instance {
    fn build(base: Vec<Relation>, graph: JoinGraph, target: AttrRef, features: Vec<AttrRef>) -> Instance {
        let db = Database::new(base.clone(), graph.clone()).expect("generated database is valid");
        Instance {
            db,
            base,
            graph,
            target,
            features,
        }
    }

    pub fn fact(&self) -> usize {
        self.db.id(&self.target.relation).unwrap()
    }
}

fn rel_name(i: usize) -> String {
    format!("R{i}")
}

fn target_column(rng: &mut ChaCha8Rng, n: usize, kind: TargetKind, null_rate: f64) -> Column {
    match kind {
        TargetKind::Classes(k) => Column::coded_opt(
            "y",
            ColumnKind::Categorical,
            (0..n).map(|_| (!rng.gen_bool(null_rate)).then(|| rng.gen_range(0..k as u32))).collect(),
        ),
        _ => Column::numeric_opt(
            "y",
            (0..n)
                .map(|_| {
                    (!rng.gen_bool(null_rate)).then(|| match kind {
                        TargetKind::Dyadic => rng.gen_range(-40..40) as f64 / 4.0,
                        TargetKind::Integer => rng.gen_range(0..20) as f64,
                        _ => rng.gen_range(-5.0..5.0),
                    })
                })
                .collect(),
        ),
    }
}

fn feature_column(rng: &mut ChaCha8Rng, name: String, n: usize) -> Column {
    let null_rate = if rng.gen_bool(0.5) { 0.1 } else { 0.0 };
    if rng.gen_bool(0.6) {
        let levels = rng.gen_range(2..=8);
        Column::numeric_opt(
            name,
            (0..n)
                .map(|_| (!rng.gen_bool(null_rate)).then(|| rng.gen_range(0..levels) as f64 * 0.5))
                .collect(),
        )
    } else {
        let levels = rng.gen_range(2..=5u32);
        Column::coded_opt(
            name,
            ColumnKind::Categorical,
            (0..n).map(|_| (!rng.gen_bool(null_rate)).then(|| rng.gen_range(0..levels))).collect(),
        )
    }
}

/// 2 to 5 relations in a random tree rooted at the fact `R0`. Relation `i`
/// hangs N-to-1 off an earlier one through key `k{i}`; foreign keys may be
/// null or dangling and about one edge in five is a left outer join.
pub fn random_snowflake(seed: u64, target: TargetKind) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_rel = rng.gen_range(2..=5);
    let mut rows = vec![rng.gen_range(50..=1000usize)];
    for _ in 1..n_rel {
        rows.push(rng.gen_range(3..=40));
    }
    let mut cols: Vec<Vec<Column>> = vec![Vec::new(); n_rel];
    let mut edges = Vec::new();
    for i in 1..n_rel {
        let parent = rng.gen_range(0..i);
        cols[i].push(Column::key(format!("k{i}"), (0..rows[i] as u32).collect()));
        let fk = (0..rows[parent])
            .map(|_| {
                if rng.gen_bool(0.03) {
                    None
                } else if rng.gen_bool(0.05) {
                    Some(rows[i] as u32 + rng.gen_range(0..3))
                } else {
                    Some(rng.gen_range(0..rows[i] as u32))
                }
            })
            .collect();
        cols[parent].push(Column::coded_opt(format!("k{i}"), ColumnKind::Key, fk));
        let edge = JoinEdge::new(&rel_name(parent), &rel_name(i), &[&format!("k{i}")], Cardinality::NTo1);
        edges.push(if rng.gen_bool(0.2) { edge.outer() } else { edge });
    }
    let n_feat = rng.gen_range(2..=6);
    let mut features = Vec::with_capacity(n_feat);
    for j in 0..n_feat {
        let rel = rng.gen_range(0..n_rel);
        cols[rel].push(feature_column(&mut rng, format!("f{j}"), rows[rel]));
        features.push(AttrRef::new(rel_name(rel), format!("f{j}")));
    }
    cols[0].push(target_column(&mut rng, rows[0], target, 0.05));
    let base: Vec<Relation> = cols
        .into_iter()
        .enumerate()
        .map(|(i, c)| Relation::with_rows(rel_name(i), c, rows[i]).unwrap())
        .collect();
    let names: Vec<String> = (0..n_rel).map(rel_name).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let graph = JoinGraph::new(&names, edges, "R0");
    Instance::build(base, graph, AttrRef::new("R0", "y"), features)
}

/// Two facts `F1(d, u, y)` and `F2(d, v, w)` sharing the dimension
/// `D(d, x, xc)`, each fact optionally with a private dimension. No outer
/// edges and no null keys, so the join is a plain many-to-many product per
/// dimension row.
pub fn random_galaxy(seed: u64, target: TargetKind) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = rng.gen_range(5..=20usize);
    let n1 = rng.gen_range(20..=500usize);
    let n2 = rng.gen_range(20..=500usize);
    let fk = |rng: &mut ChaCha8Rng, n: usize, dangling: bool| -> Vec<u32> {
        (0..n)
            .map(|_| {
                if dangling && rng.gen_bool(0.03) {
                    nd as u32
                } else {
                    rng.gen_range(0..nd as u32)
                }
            })
            .collect()
    };
    let d = Relation::new(
        "D",
        vec![
            Column::key("d", (0..nd as u32).collect()),
            feature_column(&mut rng, "x".into(), nd),
            Column::categorical("xc", (0..nd).map(|_| rng.gen_range(0..3)).collect()),
        ],
    )
    .unwrap();
    let mut f1 = vec![Column::key("d", fk(&mut rng, n1, true)), feature_column(&mut rng, "u".into(), n1)];
    let mut f2 = vec![
        Column::key("d", fk(&mut rng, n2, true)),
        feature_column(&mut rng, "v".into(), n2),
        Column::categorical("w", (0..n2).map(|_| rng.gen_range(0..4)).collect()),
    ];
    f1.push(target_column(&mut rng, n1, target, 0.0));
    let mut names = vec!["F1", "D", "F2"];
    let mut edges = vec![
        JoinEdge::new("F1", "D", &["d"], Cardinality::NTo1),
        JoinEdge::new("F2", "D", &["d"], Cardinality::NTo1),
    ];
    let mut features = vec![
        AttrRef::new("F1", "u"),
        AttrRef::new("D", "x"),
        AttrRef::new("D", "xc"),
        AttrRef::new("F2", "v"),
        AttrRef::new("F2", "w"),
    ];
    let mut extra = Vec::new();
    for (fact, name, cols, n) in [("F1", "E1", &mut f1, n1), ("F2", "E2", &mut f2, n2)] {
        if rng.gen_bool(0.5) {
            let ne = rng.gen_range(3..=10usize);
            cols.push(Column::key("e", (0..n).map(|_| rng.gen_range(0..ne as u32)).collect()));
            extra.push(
                Relation::new(
                    name,
                    vec![Column::key("e", (0..ne as u32).collect()), feature_column(&mut rng, "a".into(), ne)],
                )
                .unwrap(),
            );
            names.push(name);
            edges.push(JoinEdge::new(fact, name, &["e"], Cardinality::NTo1));
            features.push(AttrRef::new(name, "a"));
        }
    }
    let f1 = Relation::new("F1", f1).unwrap();
    let f2 = Relation::new("F2", f2).unwrap();
    let mut base = vec![f1, d, f2];
    base.extend(extra);
    let graph = JoinGraph::new(&names, edges, "F1");
    Instance::build(base, graph, AttrRef::new("F1", "y"), features)
}

/// `R(b, y)` with unique `b`, `S(b, c)` and `T(c, t)`; `S`-`T` is
/// many-to-many, so the join is not a snowflake. At most 50 tuples.
pub fn small_many_to_many(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Relation::new(
        "R",
        vec![
            Column::key("b", vec![0, 1, 2, 3]),
            Column::numeric("y", (0..4).map(|i| i as f64).collect()),
        ],
    )
    .unwrap();
    let s = Relation::new(
        "S",
        vec![
            Column::key("b", (0..8).map(|_| rng.gen_range(0..5)).collect()),
            Column::key("c", (0..8).map(|_| rng.gen_range(0..3)).collect()),
        ],
    )
    .unwrap();
    let t = Relation::new(
        "T",
        vec![
            Column::key("c", (0..6).map(|i| i % 3).collect()),
            Column::numeric("t", (0..6).map(f64::from).collect()),
        ],
    )
    .unwrap();
    let graph = JoinGraph::new(
        &["R", "S", "T"],
        vec![
            JoinEdge::new("R", "S", &["b"], Cardinality::OneToN),
            JoinEdge::new("S", "T", &["c"], Cardinality::NToN),
        ],
        "R",
    );
    Instance::build(vec![r, s, t], graph, AttrRef::new("R", "y"), vec![AttrRef::new("T", "t")])
}
