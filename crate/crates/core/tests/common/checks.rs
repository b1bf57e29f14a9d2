//! One function per property; each returns a short summary or the first
//! discrepancy found.

use std::collections::{BTreeSet, HashMap};

use factorboost::boosting::{apply_update_relation, build_update_relation, leaf_masks, UpdateCell, UpdateRelation};
use factorboost::engine::{Annotations, ExecStats};
use factorboost::forest::{ancestral_sample, row_inclusion_probabilities, Sample, TupleSampler};
use factorboost::messages::{reuse_after_split, Factorized, MessageCache, PredicateSet};
use factorboost::predicate::{SplitOp, SplitPredicate};
use factorboost::semiring::{classification_criteria, AnnotationValue, DEFAULT_BETA};
use factorboost::{
    train_decision_tree, train_gbm, AttrRef, ClassCriterion, Criterion, EnsembleModel, GbmParams, SavedModel, SemiRing,
    Task, TrainInput, TreeModel, TreeParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::gen::{random_galaxy, random_snowflake, small_many_to_many, Instance, TargetKind};
use super::oracle::{gbm_rmse, grow, naive_join, satisfies_all, value, OracleParams, OracleTree, Problem, Stat, Tuple};

pub type Check<T> = Result<T, String>;

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn err<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{ctx}: {e}")
}

pub fn model_file(tree: &TreeModel, inst: &Instance, task: Task) -> String {
    SavedModel::from_trained(EnsembleModel::from_tree(tree.clone(), task), &inst.db, Some(&inst.target))
        .and_then(|m| m.to_json())
        .expect("model serializes")
}

pub fn compare_trees(tree: &TreeModel, oracle: &OracleTree, rel: f64) -> Check<()> {
    let (a, b) = (tree.split_sequence(), oracle.split_sequence());
    if a != b {
        let first = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        return Err(format!(
            "split {first} differs: factorized {:?}, oracle {:?} ({} vs {} splits)",
            a.get(first),
            b.get(first),
            a.len(),
            b.len()
        ));
    }
    for leaf in oracle.leaves() {
        let got = tree.nodes[leaf.id].leaf_prediction.as_deref().unwrap_or_default();
        if got.len() != leaf.value.len() || got.iter().zip(&leaf.value).any(|(x, y)| !close(*x, *y, rel)) {
            return Err(format!("leaf {}: factorized {got:?}, oracle {:?}", leaf.id, leaf.value));
        }
    }
    Ok(())
}

/// A decision-tree case of the oracle corpus.
pub struct DtCase {
    pub inst: Instance,
    pub tuples: Vec<Tuple>,
    pub params: TreeParams,
    /// `None` when the join selects no labelled tuple.
    pub tree: Option<TreeModel>,
}

pub fn dt_params(seed: u64) -> TreeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    TreeParams {
        max_leaves: rng.gen_range(2..=16),
        max_depth: rng.gen_range(1..=4),
        min_leaf_count: rng.gen_range(1..=3) as f64,
        ..TreeParams::default()
    }
}

fn oracle_params(p: &TreeParams) -> OracleParams {
    OracleParams {
        max_leaves: p.max_leaves,
        max_depth: p.max_depth,
        min_leaf_count: p.min_leaf_count,
    }
}

/// Factorized regression tree against the oracle on the explicit join.
pub fn dt_case(seed: u64) -> Check<DtCase> {
    let ctx = format!("seed {seed}");
    let inst = random_snowflake(seed, TargetKind::Dyadic);
    let params = dt_params(seed);
    let tuples = naive_join(&inst.base, &inst.graph);
    let (prob, _) = Problem::from_join(&inst.base, &tuples, &inst.target, &inst.features, Stat::Variance, 0);
    let trained = TrainInput::regression(&inst.db, &inst.target, inst.features.clone()).and_then(|i| train_decision_tree(&i, &params));
    if prob.stats.is_empty() {
        return match trained {
            Err(_) => Ok(DtCase {
                inst,
                tuples,
                params,
                tree: None,
            }),
            Ok(_) => Err(format!("{ctx}: trained on a join with no labelled tuple")),
        };
    }
    let tree = trained.map_err(err(&ctx))?;
    compare_trees(&tree, &grow(&prob, &oracle_params(&params)), 1e-9).map_err(err(&ctx))?;
    Ok(DtCase {
        inst,
        tuples,
        params,
        tree: Some(tree),
    })
}

/// Same corpus with message sharing off; the model files must be identical.
pub fn cache_transparency(case: &DtCase) -> Check<()> {
    let Some(tree) = &case.tree else { return Ok(()) };
    let params = TreeParams {
        message_sharing: false,
        ..case.params.clone()
    };
    let input = TrainInput::regression(&case.inst.db, &case.inst.target, case.inst.features.clone()).map_err(err("input"))?;
    let uncached = train_decision_tree(&input, &params).map_err(err("uncached"))?;
    if model_file(tree, &case.inst, Task::Regression) != model_file(&uncached, &case.inst, Task::Regression) {
        return Err("models differ with message sharing off".into());
    }
    Ok(())
}

/// Model files of two more runs, one with 8 threads, match the first.
pub fn dt_determinism(case: &DtCase) -> Check<()> {
    let Some(tree) = &case.tree else { return Ok(()) };
    let reference = model_file(tree, &case.inst, Task::Regression);
    for threads in [1, 8] {
        let params = TreeParams {
            threads,
            ..case.params.clone()
        };
        let input = TrainInput::regression(&case.inst.db, &case.inst.target, case.inst.features.clone()).map_err(err("input"))?;
        let again = train_decision_tree(&input, &params).map_err(err("rerun"))?;
        if model_file(&again, &case.inst, Task::Regression) != reference {
            return Err(format!("model file changed with {threads} thread(s)"));
        }
    }
    Ok(())
}

/// Leaf row sets from semi-join translation versus brute-force evaluation of
/// each leaf's predicate path over the explicit join, restricted to rows of
/// `fact` that occur in the join.
pub fn semijoin_lemma(inst: &Instance, tuples: &[Tuple], fact: usize, tree: &TreeModel) -> Check<usize> {
    let n = inst.base[fact].row_count();
    let mut in_join = vec![false; n];
    for t in tuples {
        in_join[t[fact].expect("fact rows are never null")] = true;
    }
    let masks = leaf_masks(&inst.db, fact, tree).map_err(err("leaf_masks"))?;
    for (leaf, mask) in &masks {
        let path = &tree.nodes[*leaf].predicate_path;
        let mut brute = vec![false; n];
        for t in tuples.iter().filter(|t| satisfies_all(&inst.base, t, path)) {
            brute[t[fact].unwrap()] = true;
        }
        if let Some(r) = (0..n).find(|&r| (mask[r] && in_join[r]) != brute[r]) {
            return Err(format!("leaf {leaf}, fact row {r}: semi-join {} vs brute force {}", mask[r], brute[r]));
        }
    }
    Ok(masks.len())
}

pub struct GbmCase {
    pub inst: Instance,
    pub tuples: Vec<Tuple>,
    pub model: EnsembleModel,
}

pub fn gbm_model_file(inst: &Instance, threads: usize) -> Check<String> {
    let (model, _) = train_gbm(&inst.db, &inst.target, &inst.features, &gbm_params(threads)).map_err(err("train"))?;
    SavedModel::from_trained(model, &inst.db, Some(&inst.target))
        .and_then(|m| m.to_json())
        .map_err(err("save"))
}

/// Boosting over a snowflake versus the oracle booster.
pub fn gbm_case(seed: u64) -> Check<Option<GbmCase>> {
    let ctx = format!("seed {seed}");
    let inst = random_snowflake(seed, TargetKind::Dyadic);
    let tuples = naive_join(&inst.base, &inst.graph);
    let (prob, _) = Problem::from_join(&inst.base, &tuples, &inst.target, &inst.features, Stat::Variance, 0);
    let params = gbm_params(1);
    let trained = train_gbm(&inst.db, &inst.target, &inst.features, &params);
    if prob.stats.is_empty() {
        return match trained {
            Err(_) => Ok(None),
            Ok(_) => Err(format!("{ctx}: boosted on a join with no labelled tuple")),
        };
    }
    let (model, report) = trained.map_err(err(&ctx))?;
    let ys: Vec<f64> = prob.stats.iter().map(|s| s[1]).collect();
    let expected = gbm_rmse(&prob, &ys, params.iterations, params.learning_rate, &oracle_params(&params.tree), DEFAULT_BETA);
    let got: Vec<f64> = report.iterations.iter().map(|r| r.metric).collect();
    if got.len() != expected.len() || got.iter().zip(&expected).any(|(a, b)| !close(*a, *b, 1e-8)) {
        return Err(format!("{ctx}: rmse {got:?}, oracle {expected:?}"));
    }
    Ok(Some(GbmCase { inst, tuples, model }))
}

pub fn gbm_params(threads: usize) -> GbmParams {
    GbmParams {
        iterations: 10,
        learning_rate: 0.1,
        tree: TreeParams {
            max_leaves: 8,
            threads,
            ..TreeParams::default()
        },
        ..GbmParams::default()
    }
}

fn tuple_product(anns: &[Option<Annotations>], t: &Tuple) -> Vec<f64> {
    let ring = SemiRing::Variance;
    let mut acc = ring.one();
    for (rel, a) in anns.iter().enumerate() {
        if let Some(a) = a {
            ring.mul_assign(&mut acc, &a.row(t[rel].unwrap()));
        }
    }
    acc
}

fn compare_residuals(anns: &[Option<Annotations>], tuples: &[Tuple], residual: &[f64], exact: bool, groups: &[usize]) -> Check<()> {
    let products: Vec<Vec<f64>> = tuples.iter().map(|t| tuple_product(anns, t)).collect();
    if exact {
        for (i, (p, r)) in products.iter().zip(residual).enumerate() {
            if p != &[1.0, *r, r * r] {
                return Err(format!("tuple {i}: annotation {p:?}, lift of residual {r}"));
            }
        }
        return Ok(());
    }
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    let mut got = vec![[0.0; 3]; n_groups];
    let mut want = vec![[0.0; 3]; n_groups];
    for ((p, r), &g) in products.iter().zip(residual).zip(groups) {
        for j in 0..3 {
            got[g][j] += p[j];
        }
        want[g][0] += 1.0;
        want[g][1] += r;
        want[g][2] += r * r;
    }
    for g in 0..n_groups {
        let scale = want[g][2].max(want[g][0]);
        if (0..3).any(|j| (got[g][j] - want[g][j]).abs() > 1e-9 * scale) {
            return Err(format!("group {g}: aggregate {:?}, expected {:?}", got[g], want[g]));
        }
    }
    Ok(())
}

/// Boosting rounds over a two-fact galaxy driven through the update
/// relation. After every multiplication the per-tuple annotation product is
/// compared with the lift of the residual computed on the explicit join.
/// Integer data uses integer shifts so the comparison is exact.
pub fn galaxy_case(seed: u64, integer: bool) -> Check<(Instance, Vec<Tuple>, Vec<TreeModel>)> {
    let ctx = format!("seed {seed}");
    let inst = random_galaxy(seed, if integer { TargetKind::Integer } else { TargetKind::Real });
    let db = &inst.db;
    let tuples = naive_join(&inst.base, &inst.graph);
    if tuples.is_empty() {
        return Ok((inst, tuples, Vec::new()));
    }
    let ring = SemiRing::Variance;
    let target_rel = inst.fact();
    let ys: Vec<Option<f64>> = (0..inst.base[target_rel].row_count())
        .map(|r| inst.base[target_rel].column("y").unwrap().datum(r).as_f64())
        .collect();
    let mut anns: Vec<Option<Annotations>> = vec![None; db.len()];
    anns[target_rel] = Some(Annotations::lifted(ring, &ys, None));
    let mut residual: Vec<f64> = tuples.iter().map(|t| value(&inst.base, t, &inst.target).as_f64().unwrap()).collect();
    let mean = residual.iter().sum::<f64>() / residual.len() as f64;
    let base = if integer { mean.round() } else { mean };
    let shift = UpdateRelation {
        cluster: None,
        cells: vec![UpdateCell {
            leaf: 0,
            predicates: Vec::new(),
            neg_prediction: -base,
        }],
    };
    apply_update_relation(db, &mut anns, &shift).map_err(err(&ctx))?;
    residual.iter_mut().for_each(|r| *r -= base);
    let zeros = vec![0; tuples.len()];
    compare_residuals(&anns, &tuples, &residual, integer, &zeros).map_err(err(&format!("{ctx}, base shift")))?;

    let params = TreeParams {
        max_leaves: 4,
        cpt: true,
        ..TreeParams::default()
    };
    let mut trees = Vec::new();
    for round in 0..4 {
        let input = TrainInput::new(db, inst.features.clone(), ring, anns.clone());
        let tree = train_decision_tree(&input, &params).map_err(err(&ctx))?;
        let mut update = build_update_relation(&tree, 0.5);
        if integer {
            update.cells.iter_mut().for_each(|c| c.neg_prediction = c.neg_prediction.round());
        }
        apply_update_relation(db, &mut anns, &update).map_err(err(&ctx))?;
        let mut groups = Vec::with_capacity(tuples.len());
        for (t, r) in tuples.iter().zip(residual.iter_mut()) {
            let cells: Vec<usize> = (0..update.cells.len())
                .filter(|&c| satisfies_all(&inst.base, t, &update.cells[c].predicates))
                .collect();
            if cells.len() != 1 {
                return Err(format!("{ctx}: a tuple satisfies {} leaf cells", cells.len()));
            }
            *r += update.cells[cells[0]].neg_prediction;
            groups.push(cells[0]);
        }
        compare_residuals(&anns, &tuples, &residual, integer, &groups).map_err(err(&format!("{ctx}, round {round}")))?;
        trees.push(tree);
    }
    Ok((inst, tuples, trees))
}

/// Fact relation a galaxy tree's leaves are selected on.
pub fn cluster_fact(inst: &Instance, tree: &TreeModel) -> Option<usize> {
    tree.cluster.as_ref().map(|c| inst.db.id(c).unwrap())
}

/// On `R -< S >-< T`: every message is computed once, a split on `T`
/// invalidates exactly the two messages flowing away from it, and
/// recomputing toward `R` under a `T` predicate computes only those.
pub fn message_invalidation() -> Check<String> {
    let inst = small_many_to_many(1);
    let db = &inst.db;
    let ys: Vec<Option<f64>> = (0..4).map(|i| Some(i as f64)).collect();
    let mut anns = vec![None; db.len()];
    anns[0] = Some(Annotations::lifted(SemiRing::Variance, &ys, None));
    let fz = Factorized::new(db, SemiRing::Variance, anns, ExecStats::new()).map_err(err("factorize"))?;
    let cache = MessageCache::new(true);
    let none = PredicateSet::empty(db);
    for root in 0..3 {
        fz.ensure(root, &none, &cache, 0).map_err(err("ensure"))?;
    }
    fz.stats().take_computed_edges();
    let names = |v: &[(&str, &str)]| -> BTreeSet<(String, String)> { v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect() };
    let (reused, invalidated) = reuse_after_split(&cache, "T", &db.rooted(0));
    if invalidated != names(&[("T", "S"), ("S", "R")]) || reused != names(&[("R", "S"), ("S", "T")]) {
        return Err(format!("split on T: reused {reused:?}, invalidated {invalidated:?}"));
    }
    let pred = SplitPredicate {
        feature: 0,
        attr: AttrRef::new("T", "t"),
        op: SplitOp::Le(2.0),
        negated: false,
        missing_left: false,
    };
    let on_t = PredicateSet::bind(db, &[pred]).map_err(err("bind"))?;
    fz.ensure(0, &on_t, &cache, 0).map_err(err("ensure"))?;
    let computed: BTreeSet<(String, String)> = fz
        .stats()
        .take_computed_edges()
        .into_iter()
        .map(|(a, b)| (db.name(a).to_string(), db.name(b).to_string()))
        .collect();
    if computed != names(&[("T", "S"), ("S", "R")]) {
        return Err(format!("recomputed {computed:?} after the split"));
    }
    fz.ensure(2, &on_t, &cache, 0).map_err(err("ensure"))?;
    let extra = fz.stats().take_computed_edges();
    if !extra.is_empty() {
        return Err(format!("messages toward T recomputed: {extra:?}"));
    }
    Ok("split on T invalidates {T->S, S->R}, reuses {R->S, S->T}".into())
}

fn chi_square_p(counts: &[f64], probs: &[f64], n: f64) -> f64 {
    let stat: f64 = counts.iter().zip(probs).map(|(o, p)| (o - n * p).powi(2) / (n * p)).sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}

/// Uniform tuple sampling on a small many-to-many join.
pub fn tuple_sampling(seed: u64, draws: usize) -> Check<(usize, f64)> {
    let inst = small_many_to_many(seed);
    let db = &inst.db;
    let tuples = naive_join(&inst.base, &inst.graph);
    let m = tuples.len();
    if m < 2 || m > 50 {
        return Err(format!("fixture join has {m} tuples"));
    }
    let index: HashMap<Vec<usize>, usize> = tuples
        .iter()
        .enumerate()
        .map(|(i, t)| (t.iter().map(|r| r.unwrap()).collect(), i))
        .collect();
    let ys: Vec<Option<f64>> = (0..4).map(|i| Some(i as f64)).collect();
    let mut anns = vec![None; db.len()];
    anns[0] = Some(Annotations::lifted(SemiRing::Variance, &ys, None));
    let fz = Factorized::new(db, SemiRing::Variance, anns, ExecStats::new()).map_err(err("factorize"))?;
    let sampler = TupleSampler::new(&fz, 0).map_err(err("sampler"))?;
    if sampler.total() != m as u64 {
        return Err(format!("sampler counts {} tuples, join has {m}", sampler.total()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0.0; m];
    for t in sampler.draw(db, &mut rng, draws, true).map_err(err("draw"))? {
        let i = index.get(&t).ok_or_else(|| format!("drew {t:?}, not a join tuple"))?;
        counts[*i] += 1.0;
    }
    let distinct: BTreeSet<Vec<usize>> = sampler.draw(db, &mut rng, m, false).map_err(err("draw"))?.into_iter().collect();
    if distinct.len() != m {
        return Err(format!("{} distinct tuples in a full draw without replacement", distinct.len()));
    }
    let p = chi_square_p(&counts, &vec![1.0 / m as f64; m], draws as f64);
    if p <= 1e-3 {
        return Err(format!("chi-square p = {p:.2e} over {m} tuples"));
    }
    Ok((m, p))
}

/// Snowflake sampling draws fact rows: inclusion probabilities are exactly
/// one over the join size, and fact-row frequencies pass chi-square.
pub fn snowflake_sampling(seed: u64, draws: usize) -> Check<f64> {
    let inst = random_snowflake(seed, TargetKind::Dyadic);
    let fact = inst.fact();
    let tuples = naive_join(&inst.base, &inst.graph);
    if tuples.len() < 2 {
        return Ok(1.0);
    }
    let n = inst.base[fact].row_count();
    let mut per_row = vec![0usize; n];
    for t in &tuples {
        per_row[t[fact].unwrap()] += 1;
    }
    let probs = row_inclusion_probabilities(&inst.db, fact).map_err(err("probabilities"))?;
    for r in 0..n {
        let want = per_row[r] as f64 / tuples.len() as f64;
        if probs[r] != want {
            return Err(format!("seed {seed}, row {r}: probability {}, join share {want}", probs[r]));
        }
    }
    let Sample::FactRows { weights, .. } = ancestral_sample(&inst.db, draws, seed, true).map_err(err("sample"))? else {
        return Err("snowflake sample came back as tuples".into());
    };
    let rows: Vec<usize> = (0..n).filter(|&r| per_row[r] > 0).collect();
    if (0..n).any(|r| per_row[r] == 0 && weights[r] != 0.0) {
        return Err(format!("seed {seed}: drew a fact row outside the join"));
    }
    let counts: Vec<f64> = rows.iter().map(|&r| weights[r]).collect();
    let total: f64 = counts.iter().sum();
    let p = chi_square_p(&counts, &vec![1.0 / rows.len() as f64; rows.len()], total);
    if p <= 1e-3 {
        return Err(format!("seed {seed}: chi-square p = {p:.2e}"));
    }
    Ok(p)
}

fn brute_gini(labels: &[usize], k: usize) -> f64 {
    let n = labels.len() as f64;
    1.0 - (0..k)
        .map(|c| {
            let p = labels.iter().filter(|&&l| l == c).count() as f64 / n;
            p * p
        })
        .sum::<f64>()
}

fn brute_entropy(labels: &[usize], k: usize) -> f64 {
    let n = labels.len() as f64;
    (0..k)
        .map(|c| labels.iter().filter(|&&l| l == c).count() as f64 / n)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Pearson statistic of the side-by-class contingency table built from
/// labelled instances.
fn brute_chi_square(left: &[usize], right: &[usize], k: usize) -> f64 {
    let n = (left.len() + right.len()) as f64;
    let mut stat = 0.0;
    for side in [left, right] {
        for c in 0..k {
            let class_total = left.iter().chain(right).filter(|&&l| l == c).count() as f64;
            if class_total == 0.0 {
                continue;
            }
            let observed = side.iter().filter(|&&l| l == c).count() as f64;
            let expected = side.len() as f64 * class_total / n;
            stat += (observed - expected).powi(2) / expected;
        }
    }
    stat
}

/// Random class-count tables, expanded to labelled instances for the
/// brute-force side.
pub fn class_tables(seed: u64, tables: usize) -> Check<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..tables {
        let k = rng.gen_range(2..=5);
        let total: Vec<usize> = (0..k).map(|_| rng.gen_range(0..40)).collect();
        let left: Vec<usize> = total.iter().map(|&c| rng.gen_range(0..=c)).collect();
        if total.iter().sum::<usize>() == 0 || left.iter().sum::<usize>() == 0 || left == total {
            continue;
        }
        let expand = |counts: &[usize]| -> Vec<usize> { counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect() };
        let right: Vec<usize> = total.iter().zip(&left).map(|(a, b)| a - b).collect();
        let (all, l, r) = (expand(&total), expand(&left), expand(&right));
        let agg = |counts: &[usize]| {
            let mut v = vec![counts.iter().sum::<usize>() as f64];
            v.extend(counts.iter().map(|&c| c as f64));
            AnnotationValue::from_flat(SemiRing::ClassCount { k }, &v)
        };
        let cases = [
            (ClassCriterion::Gini, None, brute_gini(&all, k)),
            (ClassCriterion::Entropy, None, brute_entropy(&all, k)),
            (ClassCriterion::ChiSquare, Some(agg(&left)), brute_chi_square(&l, &r, k)),
        ];
        for (kind, split, want) in cases {
            let got = classification_criteria(&agg(&total), kind, split.as_ref()).map_err(err("criteria"))?;
            if !close(got, want, 1e-12) {
                return Err(format!("table {t} {kind:?}: {got} vs brute force {want}"));
            }
        }
    }
    Ok(())
}

/// Classification stump (two leaves) against the oracle.
pub fn stump_case(seed: u64) -> Check<()> {
    let ctx = format!("seed {seed}");
    let k = 2 + (seed % 3) as usize;
    let kind = [ClassCriterion::Gini, ClassCriterion::Entropy, ClassCriterion::ChiSquare][(seed % 3) as usize];
    let inst = random_snowflake(seed, TargetKind::Classes(k));
    let tuples = naive_join(&inst.base, &inst.graph);
    let (prob, _) = Problem::from_join(&inst.base, &tuples, &inst.target, &inst.features, Stat::Class(kind), k);
    let params = TreeParams {
        max_leaves: 2,
        criterion: Criterion::Class { criterion: kind },
        ..TreeParams::default()
    };
    let trained = TrainInput::classification(&inst.db, &inst.target, inst.features.clone(), k).and_then(|i| train_decision_tree(&i, &params));
    if prob.stats.is_empty() {
        return if trained.is_err() { Ok(()) } else { Err(format!("{ctx}: trained on an empty join")) };
    }
    let tree = trained.map_err(err(&ctx))?;
    compare_trees(&tree, &grow(&prob, &oracle_params(&params)), 0.0).map_err(err(&format!("{ctx} {kind:?}")))
}

/// Tree on the cuboid of the same annotated join, binned with enough bins
/// to keep every value.
pub fn cuboid_case(seed: u64) -> Check<()> {
    use factorboost::cuboid::build_cuboid;
    let ctx = format!("seed {seed}");
    let inst = random_snowflake(seed, TargetKind::Dyadic);
    let params = dt_params(seed);
    let input = TrainInput::regression(&inst.db, &inst.target, inst.features.clone()).map_err(err(&ctx))?;
    let Ok(base_tree) = train_decision_tree(&input, &params) else { return Ok(()) };
    let cuboid = build_cuboid(&input, 16).map_err(err(&ctx))?;
    let cdb = cuboid.database().map_err(err(&ctx))?;
    let mut tree = train_decision_tree(&cuboid.train_input(&cdb), &params).map_err(err(&ctx))?;
    tree.map_attrs(inst.features.clone());
    if tree.split_sequence() != base_tree.split_sequence() {
        return Err(format!("{ctx}: cuboid splits {:?} vs base {:?}", tree.split_sequence(), base_tree.split_sequence()));
    }
    for leaf in base_tree.leaves() {
        if tree.nodes[leaf].leaf_prediction != base_tree.nodes[leaf].leaf_prediction {
            return Err(format!("{ctx}: leaf {leaf} prediction differs"));
        }
    }
    Ok(())
}

fn random_value(rng: &mut ChaCha8Rng, ring: SemiRing, integer: bool) -> AnnotationValue {
    let v: Vec<f64> = (0..ring.width())
        .map(|_| if integer { rng.gen_range(-20..=20) as f64 } else { rng.gen_range(-1.0..1.0) })
        .collect();
    AnnotationValue::from_flat(ring, &v)
}

fn same(a: &AnnotationValue, b: &AnnotationValue, integer: bool) -> bool {
    let (x, y) = (a.to_flat(), b.to_flat());
    if integer {
        x == y
    } else {
        x.iter().zip(&y).all(|(p, q)| close(*p, *q, 1e-12))
    }
}

/// Semiring laws on `n` random triples per ring, with integer and with real
/// components, plus the lift homomorphism for variance and gradient.
pub fn semiring_laws(seed: u64, n: usize) -> Check<()> {
    use factorboost::semiring::{lift, sr_add as add, sr_mul as mul};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ring in [SemiRing::Variance, SemiRing::ClassCount { k: 3 }, SemiRing::Gradient] {
        let zero = AnnotationValue::from_flat(ring, &ring.zero());
        let one = AnnotationValue::from_flat(ring, &ring.one());
        for integer in [true, false] {
            for i in 0..n {
                let a = random_value(&mut rng, ring, integer);
                let b = random_value(&mut rng, ring, integer);
                let c = random_value(&mut rng, ring, integer);
                let laws = [
                    ("additive commutativity", add(&a, &b), add(&b, &a)),
                    ("additive associativity", add(&add(&a, &b).unwrap(), &c), add(&a, &add(&b, &c).unwrap())),
                    ("multiplicative commutativity", mul(&a, &b), mul(&b, &a)),
                    ("multiplicative associativity", mul(&mul(&a, &b).unwrap(), &c), mul(&a, &mul(&b, &c).unwrap())),
                    (
                        "distributivity",
                        mul(&a, &add(&b, &c).unwrap()),
                        add(&mul(&a, &b).unwrap(), &mul(&a, &c).unwrap()),
                    ),
                    ("additive identity", add(&a, &zero), Ok(a.clone())),
                    ("multiplicative identity", mul(&a, &one), Ok(a.clone())),
                    ("annihilation", mul(&a, &zero), Ok(zero.clone())),
                ];
                for (name, lhs, rhs) in laws {
                    let (lhs, rhs) = (lhs.map_err(err(name))?, rhs.map_err(err(name))?);
                    if !same(&lhs, &rhs, integer) {
                        return Err(format!("{ring} {name} fails on sample {i}: {lhs:?} vs {rhs:?}"));
                    }
                }
            }
        }
    }
    for ring in [SemiRing::Variance, SemiRing::Gradient] {
        for integer in [true, false] {
            for _ in 0..n {
                let (d1, d2) = if integer {
                    (rng.gen_range(-50..=50) as f64, rng.gen_range(-50..=50) as f64)
                } else {
                    (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                };
                let whole = lift(ring, Some(d1 + d2), None);
                let product = mul(&lift(ring, Some(d1), None), &lift(ring, Some(d2), None)).map_err(err("lift"))?;
                if !same(&whole, &product, integer) {
                    return Err(format!("{ring} lift({d1} + {d2}) = {whole:?}, product {product:?}"));
                }
            }
        }
    }
    Ok(())
}
