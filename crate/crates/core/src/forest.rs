//! Random forests: per-tree row and feature sampling over the join.
//!
//! On a snowflake every join tuple is one fact row, so rows are sampled by
//! weighting the fact. Elsewhere tuples are drawn by rank from count messages
//! and trained on as a flat relation.

use parking_lot::Mutex;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::database::{AttrRef, Database, Key, KeyReader};
use crate::engine::ExecStats;
use crate::error::{Error, Result};
use crate::joingraph::JoinGraph;
use crate::messages::{Factorized, MessageCache, PredicateSet};
use crate::model::{EnsembleModel, ModelKind, Task};
use crate::relstore::{Column, Relation};
use crate::scheduler::{execute_dag, TaskKind, TaskNode};
use crate::semiring::SemiRing;
use crate::tree::{train_decision_tree, TrainInput, TreeModel, TreeParams};

pub const SAMPLE_RELATION: &str = "__sample";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Fraction of join tuples drawn per tree.
    pub row_rate: f64,
    /// Fraction of features offered to each tree (at least one).
    pub feature_rate: f64,
    pub with_replacement: bool,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            row_rate: 1.0,
            feature_rate: 1.0,
            with_replacement: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub sample: SampleSpec,
    pub tree: TreeParams,
    /// Trees trained concurrently.
    pub threads: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 10,
            sample: SampleSpec::default(),
            tree: TreeParams::default(),
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    /// Multiplicity per fact row.
    FactRows { fact: usize, weights: Vec<f64> },
    /// One row id per relation for every drawn tuple.
    Tuples { tuples: Vec<Vec<usize>> },
}

/// Generator for tree `tree` of a forest seeded with `seed`.
pub fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

/// Sorted feature positions offered to one tree.
pub fn sample_features(rng: &mut ChaCha8Rng, n_features: usize, rate: f64) -> Vec<usize> {
    if n_features == 0 {
        return Vec::new();
    }
    let m = ((n_features as f64 * rate).round() as usize).clamp(1, n_features);
    let mut picked = index::sample(rng, n_features, m).into_vec();
    picked.sort_unstable();
    picked
}

fn draw_count(population: u64, rate: f64, with_replacement: bool) -> Result<usize> {
    if !(rate > 0.0) || (!with_replacement && rate > 1.0) {
        return Err(Error::Param(format!("row sampling rate {rate} out of range")));
    }
    let n = (population as f64 * rate).round().max(1.0) as u64;
    Ok(if with_replacement { n } else { n.min(population) } as usize)
}

/// Draws `rate·N` of the rows with `eligible` set and returns multiplicities.
/// Without replacement, small draws use reservoir sampling and large ones a
/// partial shuffle.
pub fn sample_fact_rows(rng: &mut ChaCha8Rng, eligible: &[bool], rate: f64, with_replacement: bool) -> Result<Vec<f64>> {
    let pool: Vec<usize> = (0..eligible.len()).filter(|&r| eligible[r]).collect();
    let big_n = pool.len();
    if big_n == 0 {
        return Err(Error::Empty("no rows to sample".into()));
    }
    let n = draw_count(big_n as u64, rate, with_replacement)?;
    let mut weights = vec![0.0; eligible.len()];
    if with_replacement {
        for _ in 0..n {
            weights[pool[rng.gen_range(0..big_n)]] += 1.0;
        }
    } else if 2 * n < big_n {
        let mut reservoir: Vec<usize> = pool[..n].to_vec();
        for (i, &row) in pool.iter().enumerate().skip(n) {
            let j = rng.gen_range(0..=i);
            if j < n {
                reservoir[j] = row;
            }
        }
        reservoir.iter().for_each(|&r| weights[r] = 1.0);
    } else {
        let mut order = pool;
        for i in 0..n {
            let j = rng.gen_range(i..big_n);
            order.swap(i, j);
        }
        order[..n].iter().for_each(|&r| weights[r] = 1.0);
    }
    Ok(weights)
}

struct RelationCounts {
    /// Children in ascending id order with their per-row message counts.
    children: Vec<(usize, Vec<u64>)>,
    /// Own multiplicity per row.
    own: Vec<u64>,
    /// Rows with positive weight grouped by the key toward the parent, with
    /// running weight totals.
    groups: FxHashMap<Key, (Vec<u32>, Vec<u64>)>,
}

/// Draws join tuples by rank. Each relation's rows are weighted by the number
/// of tuples they take part in below the root; a rank is peeled into a row
/// choice plus mixed-radix digits for the children.
pub struct TupleSampler {
    root: usize,
    rels: Vec<RelationCounts>,
    total: u64,
}

fn as_count(v: f64) -> Result<u64> {
    if v < 0.0 || v.fract() != 0.0 || v > (1u64 << 53) as f64 {
        return Err(Error::Param(format!("sampling needs integer counts, got {v}")));
    }
    Ok(v as u64)
}

impl TupleSampler {
    /// Reads counts from the first annotation component of `fz`.
    pub fn new(fz: &Factorized<'_>, root: usize) -> Result<Self> {
        let ring = fz.semiring();
        if matches!(ring, SemiRing::Gradient | SemiRing::GradientVector { .. }) {
            return Err(Error::KindMismatch("sampling needs count annotations".into()));
        }
        let db = fz.db();
        let tree = db.rooted(root);
        let cache = MessageCache::new(true);
        let preds = PredicateSet::empty(db);
        let mut rels = Vec::with_capacity(db.len());
        for x in 0..db.len() {
            let rel = db.relation(x);
            let n = rel.row_count();
            let parent = tree.parent[x];
            let own: Vec<u64> = match &fz.annotations()[x] {
                Some(a) => a.component(0).iter().map(|&c| as_count(c)).collect::<Result<_>>()?,
                None => vec![1; n],
            };
            let mut children = Vec::new();
            for (c, msg) in fz.messages_into(x, parent, &preds, &cache, 0)? {
                let edge = db.edge_between(x, c).expect("tree edge");
                let reader = KeyReader::new(rel, edge.cols_of(x));
                let counts = (0..n)
                    .map(|r| {
                        let v = reader.get(r).and_then(|k| msg.value(&k)).map_or(0.0, |v| v[0]);
                        as_count(v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                children.push((c, counts));
            }
            children.sort_by_key(|(c, _)| *c);
            let reader = parent.map(|p| KeyReader::new(rel, db.edge_between(x, p).expect("tree edge").cols_of(x)));
            let mut groups: FxHashMap<Key, (Vec<u32>, Vec<u64>)> = FxHashMap::default();
            for r in 0..n {
                let mut w = own[r];
                for (_, counts) in &children {
                    w = w.checked_mul(counts[r]).ok_or_else(|| Error::Param("tuple count overflow".into()))?;
                }
                if w == 0 {
                    continue;
                }
                let key = match &reader {
                    Some(rd) => match rd.get(r) {
                        Some(k) => k,
                        None => continue,
                    },
                    None => Key::new(),
                };
                let (rows, cum) = groups.entry(key).or_default();
                let before = cum.last().copied().unwrap_or(0);
                rows.push(r as u32);
                cum.push(before + w);
            }
            rels.push(RelationCounts {
                children,
                own,
                groups,
            });
        }
        let total = rels[root].groups.get(&Key::new()).map_or(0, |(_, cum)| *cum.last().unwrap());
        Ok(TupleSampler { root, rels, total })
    }

    /// Number of join tuples, counting multiplicities.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// The tuple of rank `rank`, as one row id per relation.
    pub fn unrank(&self, db: &Database, rank: u64) -> Vec<usize> {
        assert!(rank < self.total, "rank out of range");
        let mut out = vec![usize::MAX; self.rels.len()];
        self.descend(db, self.root, &Key::new(), rank, &mut out);
        out
    }

    fn descend(&self, db: &Database, x: usize, key: &Key, rank: u64, out: &mut [usize]) {
        let rc = &self.rels[x];
        let (rows, cum) = &rc.groups[key];
        let idx = cum.partition_point(|&c| c <= rank);
        let row = rows[idx] as usize;
        let mut rest = rank - if idx == 0 { 0 } else { cum[idx - 1] };
        out[x] = row;
        rest /= rc.own[row];
        for (c, counts) in &rc.children {
            let radix = counts[row];
            let digit = rest % radix;
            rest /= radix;
            let edge = db.edge_between(x, *c).expect("tree edge");
            let k = KeyReader::new(db.relation(x), edge.cols_of(x)).get(row).expect("joined key");
            self.descend(db, *c, &k, digit, out);
        }
    }

    /// Draws `n` tuples, iid or distinct.
    pub fn draw(&self, db: &Database, rng: &mut ChaCha8Rng, n: usize, with_replacement: bool) -> Result<Vec<Vec<usize>>> {
        if self.total == 0 {
            return Err(Error::Empty("the join is empty".into()));
        }
        let ranks: Vec<u64> = if with_replacement {
            (0..n).map(|_| rng.gen_range(0..self.total)).collect()
        } else {
            let total = usize::try_from(self.total).map_err(|_| Error::Param("join too large to sample".into()))?;
            if n > total {
                return Err(Error::Param(format!("cannot draw {n} distinct tuples from {total}")));
            }
            index::sample(rng, total, n).into_iter().map(|r| r as u64).collect()
        };
        Ok(ranks.into_iter().map(|r| self.unrank(db, r)).collect())
    }
}

/// Draws `n` join tuples uniformly with the given seed. A snowflake returns
/// fact-row multiplicities, anything else explicit tuples.
pub fn ancestral_sample(db: &Database, n: usize, seed: u64, with_replacement: bool) -> Result<Sample> {
    let fz = Factorized::new(db, SemiRing::Variance, vec![None; db.len()], ExecStats::new())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(fact) = db.snowflake_fact()? {
        let eligible = db.rows_in_join(fact)?;
        let pool = eligible.iter().filter(|&&e| e).count();
        if pool == 0 {
            return Err(Error::Empty("the join is empty".into()));
        }
        let rate = n as f64 / pool as f64;
        let weights = sample_fact_rows(&mut rng, &eligible, rate, with_replacement)?;
        return Ok(Sample::FactRows { fact, weights });
    }
    let sampler = TupleSampler::new(&fz, db.target_id())?;
    Ok(Sample::Tuples {
        tuples: sampler.draw(db, &mut rng, n, with_replacement)?,
    })
}

/// Flat relation of sampled tuples with one `relation.column` column per attribute.
pub fn materialize_tuples(db: &Database, attrs: &[AttrRef], tuples: &[Vec<usize>]) -> Result<Relation> {
    let mut columns = Vec::with_capacity(attrs.len());
    for a in attrs {
        let (rel, col) = db.resolve(a)?;
        let source = &db.relation(rel).columns()[col];
        let cells: Vec<_> = tuples.iter().map(|t| source.datum(t[rel])).collect();
        columns.push(Column::from_datums(a.to_string(), source.kind(), &cells));
    }
    Relation::with_rows(SAMPLE_RELATION, columns, tuples.len())
}

fn flat_database(rel: Relation) -> Result<Database> {
    let graph = JoinGraph::new(&[SAMPLE_RELATION], Vec::new(), SAMPLE_RELATION);
    Database::new(vec![rel], graph)
}

fn base_input<'a>(db: &'a Database, target: &AttrRef, features: Vec<AttrRef>, task: Task) -> Result<TrainInput<'a>> {
    match task {
        Task::Regression => TrainInput::regression(db, target, features),
        Task::Classification { k } => TrainInput::classification(db, target, features, k),
    }
}

/// Rewrites feature positions from a per-tree subset to the forest's list.
fn widen(tree: &mut TreeModel, subset: &[usize], features: &[AttrRef]) {
    for n in &mut tree.nodes {
        for p in n.predicate_path.iter_mut().chain(n.split.as_mut().map(|(p, _)| p)) {
            p.feature = subset[p.feature];
            p.attr = features[p.feature].clone();
        }
    }
    tree.features = features.to_vec();
}

fn train_one(
    db: &Database,
    target: &AttrRef,
    features: &[AttrRef],
    task: Task,
    params: &ForestParams,
    t: usize,
) -> Result<TreeModel> {
    let spec = &params.sample;
    let mut rng = tree_rng(spec.seed, t);
    let subset = sample_features(&mut rng, features.len(), spec.feature_rate);
    let chosen: Vec<AttrRef> = subset.iter().map(|&i| features[i].clone()).collect();
    let mut tree_params = params.tree.clone();
    tree_params.threads = 1;
    let input = base_input(db, target, chosen.clone(), task)?;
    let mut tree = if let Some(fact) = db.snowflake_fact()? {
        let fz = Factorized::new(db, input.semiring, input.annotations.clone(), ExecStats::new())?;
        let cache = MessageCache::new(true);
        let counts = fz.row_weights(fact, &PredicateSet::empty(db), &cache, 0)?;
        let eligible: Vec<bool> = counts.iter().map(|c| c[0] > 0.0).collect();
        let weights = sample_fact_rows(&mut rng, &eligible, spec.row_rate, spec.with_replacement)?;
        train_decision_tree(&input.with_weights(fact, &weights)?, &tree_params)?
    } else {
        let fz = Factorized::new(db, input.semiring, input.annotations.clone(), ExecStats::new())?;
        let sampler = TupleSampler::new(&fz, db.target_id())?;
        let n = draw_count(sampler.total(), spec.row_rate, spec.with_replacement)?;
        let tuples = sampler.draw(db, &mut rng, n, spec.with_replacement)?;
        let mut attrs = chosen.clone();
        attrs.push(target.clone());
        let flat = flat_database(materialize_tuples(db, &attrs, &tuples)?)?;
        let flat_features: Vec<AttrRef> = chosen.iter().map(|a| AttrRef::new(SAMPLE_RELATION, a.to_string())).collect();
        let flat_target = AttrRef::new(SAMPLE_RELATION, target.to_string());
        let flat_input = base_input(&flat, &flat_target, flat_features, task)?;
        let mut tree = train_decision_tree(&flat_input, &tree_params)?;
        tree.map_attrs(chosen);
        tree
    };
    widen(&mut tree, &subset, features);
    Ok(tree)
}

/// Trains `params.n_trees` trees on independent samples, `params.threads` at a time.
pub fn train_random_forest(
    db: &Database,
    target: &AttrRef,
    features: &[AttrRef],
    task: Task,
    params: &ForestParams,
) -> Result<EnsembleModel> {
    if params.n_trees == 0 {
        return Err(Error::Param("a forest needs at least one tree".into()));
    }
    if features.is_empty() {
        return Err(Error::Param("no features".into()));
    }
    let slots: Vec<Mutex<Option<TreeModel>>> = (0..params.n_trees).map(|_| Mutex::new(None)).collect();
    let tasks: Vec<TaskNode> = slots
        .iter()
        .enumerate()
        .map(|(t, slot)| {
            TaskNode::new(t, TaskKind::Sample, Vec::new(), move || {
                *slot.lock() = Some(train_one(db, target, features, task, params, t)?);
                Ok(())
            })
        })
        .collect();
    execute_dag(tasks, params.threads.max(1))?;
    let trees = slots.into_iter().map(|s| s.into_inner().expect("tree trained")).collect();
    Ok(EnsembleModel {
        kind: ModelKind::Rf,
        task,
        objective: None,
        learning_rate: 1.0,
        base_score: Vec::new(),
        trees,
        features: features.to_vec(),
        schema_kind: None,
    })
}

/// Exact probability of drawing each row of `x` in one uniform tuple draw.
pub fn row_inclusion_probabilities(db: &Database, x: usize) -> Result<Vec<f64>> {
    let fz = Factorized::new(db, SemiRing::Variance, vec![None; db.len()], ExecStats::new())?;
    let cache = MessageCache::new(true);
    let weights = fz.row_weights(x, &PredicateSet::empty(db), &cache, 0)?;
    let total: f64 = weights.iter().map(|w| w[0]).sum();
    Ok(weights.iter().map(|w| w[0] / total).collect())
}
