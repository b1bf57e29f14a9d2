//! Semiring-annotated relations and the operators over them.

use std::sync::atomic::{AtomicI64, AtomicUsize, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::Mutex;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::database::{Key, KeyReader};
use crate::error::{Error, Result};
use crate::relstore::{Column, ColumnKind, Datum, Relation};
use crate::semiring::SemiRing;

/// Per-row annotations stored as one column per semiring component.
#[derive(Clone, Debug)]
pub struct Annotations {
    semiring: SemiRing,
    len: usize,
    components: Vec<Arc<Vec<f64>>>,
}

impl Annotations {
    pub fn ones(semiring: SemiRing, len: usize) -> Self {
        let one = semiring.one();
        Annotations {
            semiring,
            len,
            components: one.iter().map(|&v| Arc::new(vec![v; len])).collect(),
        }
    }

    pub fn from_components(semiring: SemiRing, components: Vec<Arc<Vec<f64>>>) -> Result<Self> {
        if components.len() != semiring.width() {
            return Err(Error::Arity(format!(
                "{semiring} needs {} components, got {}",
                semiring.width(),
                components.len()
            )));
        }
        let len = components.first().map_or(0, |c| c.len());
        if components.iter().any(|c| c.len() != len) {
            return Err(Error::LengthMismatch {
                expected: len,
                got: components.iter().map(|c| c.len()).find(|&l| l != len).unwrap(),
            });
        }
        Ok(Annotations {
            semiring,
            len,
            components,
        })
    }

    pub fn from_rows(semiring: SemiRing, rows: &[Vec<f64>]) -> Self {
        let w = semiring.width();
        let mut comps = vec![Vec::with_capacity(rows.len()); w];
        for r in rows {
            for (j, c) in comps.iter_mut().enumerate() {
                c.push(r[j]);
            }
        }
        Annotations {
            semiring,
            len: rows.len(),
            components: comps.into_iter().map(Arc::new).collect(),
        }
    }

    pub(crate) fn from_flat(semiring: SemiRing, flat: &[f64]) -> Self {
        let w = semiring.width();
        let len = flat.len() / w;
        let components = (0..w)
            .map(|j| Arc::new((0..len).map(|i| flat[i * w + j]).collect()))
            .collect();
        Annotations {
            semiring,
            len,
            components,
        }
    }

    /// Lifts target values (and optional weights) row by row.
    pub fn lifted(semiring: SemiRing, ys: &[Option<f64>], weights: Option<&[f64]>) -> Self {
        let w = semiring.width();
        let mut flat = vec![0.0; ys.len() * w];
        for (i, y) in ys.iter().enumerate() {
            semiring.lift_into(&mut flat[i * w..(i + 1) * w], *y, weights.map(|ws| ws[i]));
        }
        Self::from_flat(semiring, &flat)
    }

    pub fn semiring(&self) -> SemiRing {
        self.semiring
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn read(&self, row: usize, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c[row];
        }
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.components.iter().map(|c| c[row]).collect()
    }

    pub fn component(&self, j: usize) -> &[f64] {
        &self.components[j]
    }

    pub fn component_arc(&self, j: usize) -> &Arc<Vec<f64>> {
        &self.components[j]
    }

    /// Swaps one component buffer, returning the old one.
    pub fn replace_component(&mut self, j: usize, values: Arc<Vec<f64>>) -> Result<Arc<Vec<f64>>> {
        if values.len() != self.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                got: values.len(),
            });
        }
        Ok(std::mem::replace(&mut self.components[j], values))
    }

    pub fn take(&self, rows: &[usize]) -> Self {
        Annotations {
            semiring: self.semiring,
            len: rows.len(),
            components: self
                .components
                .iter()
                .map(|c| Arc::new(rows.iter().map(|&r| c[r]).collect()))
                .collect(),
        }
    }

    /// Componentwise sum over all rows.
    pub fn total(&self) -> Vec<f64> {
        let mut acc = self.semiring.zero();
        let mut buf = self.semiring.zero();
        for i in 0..self.len {
            self.read(i, &mut buf);
            self.semiring.add_assign(&mut acc, &buf);
        }
        acc
    }
}

#[derive(Clone, Debug)]
pub struct AnnotatedRelation {
    pub base: Relation,
    pub annotations: Annotations,
}

impl AnnotatedRelation {
    pub fn new(base: Relation, annotations: Annotations) -> Result<Self> {
        if base.row_count() != annotations.len() {
            return Err(Error::LengthMismatch {
                expected: base.row_count(),
                got: annotations.len(),
            });
        }
        Ok(AnnotatedRelation { base, annotations })
    }

    pub fn with_ones(base: Relation, semiring: SemiRing) -> Self {
        let n = base.row_count();
        AnnotatedRelation {
            base,
            annotations: Annotations::ones(semiring, n),
        }
    }

    pub fn semiring(&self) -> SemiRing {
        self.annotations.semiring()
    }

    pub fn row_count(&self) -> usize {
        self.base.row_count()
    }

    /// Writes the relation with one extra column per annotation component.
    pub fn to_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut rel = self.base.clone();
        for j in 0..self.semiring().width() {
            rel.add_column(Column::numeric(format!("__a{j}"), self.annotations.component(j).to_vec()))?;
        }
        rel.write_csv_to(out, None)
    }
}

/// Counters shared by the operators of one training run.
#[derive(Debug, Default)]
pub struct ExecStats {
    live_rows: AtomicI64,
    peak_rows: AtomicUsize,
    pub messages_computed: AtomicUsize,
    pub messages_reused: AtomicUsize,
    pub messages_identity: AtomicUsize,
    computed_edges: Mutex<Vec<(usize, usize)>>,
}

impl ExecStats {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Registers `rows` live intermediate rows until the lease drops.
    pub fn lease(self: &Arc<Self>, rows: usize) -> RowLease {
        let live = self.live_rows.fetch_add(rows as i64, Ordering::SeqCst) + rows as i64;
        self.peak_rows.fetch_max(live.max(0) as usize, Ordering::SeqCst);
        RowLease {
            stats: Arc::clone(self),
            rows,
        }
    }

    pub fn peak_rows(&self) -> usize {
        self.peak_rows.load(Ordering::SeqCst)
    }

    pub fn live_rows(&self) -> i64 {
        self.live_rows.load(Ordering::SeqCst)
    }

    pub fn computed(&self) -> usize {
        self.messages_computed.load(Ordering::Relaxed)
    }

    pub fn reused(&self) -> usize {
        self.messages_reused.load(Ordering::Relaxed)
    }

    pub(crate) fn record_edge(&self, from: usize, to: usize) {
        self.messages_computed.fetch_add(1, Ordering::Relaxed);
        self.computed_edges.lock().push((from, to));
    }

    /// Directed edges whose messages were computed, drained.
    pub fn take_computed_edges(&self) -> Vec<(usize, usize)> {
        std::mem::take(&mut *self.computed_edges.lock())
    }
}

#[derive(Debug)]
pub struct RowLease {
    stats: Arc<ExecStats>,
    rows: usize,
}

impl Drop for RowLease {
    fn drop(&mut self) {
        self.stats.live_rows.fetch_sub(self.rows as i64, Ordering::SeqCst);
    }
}

fn attr_indices(rel: &Relation, attrs: &[&str]) -> Result<Vec<usize>> {
    attrs
        .iter()
        .map(|a| rel.column_index(a).ok_or_else(|| Error::unknown_column(rel.name(), a)))
        .collect()
}

/// Hashable form of a cell for grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum CellKey {
    Null,
    Bits(u64),
    Code(u32),
}

impl CellKey {
    pub fn of(d: Datum) -> Self {
        match d {
            Datum::Null => CellKey::Null,
            Datum::Num(v) => CellKey::Bits(v.to_bits()),
            Datum::Code(c) => CellKey::Code(c),
        }
    }
}

/// γ over the listed attributes. Groups appear in first-seen order.
pub fn groupby_aggregate(rel: &AnnotatedRelation, group_attrs: &[&str]) -> Result<AnnotatedRelation> {
    let idx = attr_indices(&rel.base, group_attrs)?;
    let ring = rel.semiring();
    let w = ring.width();
    let mut groups: IndexMap<Vec<CellKey>, usize> = IndexMap::new();
    let mut reps: Vec<Vec<Datum>> = Vec::new();
    let mut acc: Vec<f64> = Vec::new();
    let mut buf = ring.zero();
    for row in 0..rel.row_count() {
        let cells: Vec<Datum> = idx.iter().map(|&c| rel.base.columns()[c].datum(row)).collect();
        let key: Vec<CellKey> = cells.iter().map(|&d| CellKey::of(d)).collect();
        let g = *groups.entry(key).or_insert_with(|| {
            reps.push(cells);
            acc.extend(ring.zero());
            reps.len() - 1
        });
        rel.annotations.read(row, &mut buf);
        ring.add_assign(&mut acc[g * w..(g + 1) * w], &buf);
    }
    let columns = idx
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let src = &rel.base.columns()[c];
            let cells: Vec<Datum> = reps.iter().map(|r| r[j]).collect();
            Column::from_datums(src.name(), src.kind(), &cells)
        })
        .collect();
    let base = Relation::with_rows(rel.base.name(), columns, reps.len())?;
    AnnotatedRelation::new(base, Annotations::from_flat(ring, &acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareOp {
    Lt,
    Le,
    Eq,
    Ne,
    Ge,
    Gt,
}

/// Conjunct of a theta join: `left.column op right.column`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaTerm {
    pub left: String,
    pub op: CompareOp,
    pub right: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum JoinKind {
    Inner,
    LeftOuter,
    Theta(Vec<ThetaTerm>),
}

fn compare(a: Datum, op: CompareOp, b: Datum) -> bool {
    let (Some(x), Some(y)) = (a.as_f64(), b.as_f64()) else {
        return false;
    };
    match op {
        CompareOp::Lt => x < y,
        CompareOp::Le => x <= y,
        CompareOp::Eq => x == y,
        CompareOp::Ne => x != y,
        CompareOp::Ge => x >= y,
        CompareOp::Gt => x > y,
    }
}

/// Annotated join. Output columns are the left columns followed by the right
/// non-key columns; annotations multiply.
pub fn join_annotated(
    left: &AnnotatedRelation,
    right: &AnnotatedRelation,
    keys: &[&str],
    kind: &JoinKind,
) -> Result<AnnotatedRelation> {
    let ring = left.semiring();
    if right.semiring() != ring {
        return Err(Error::Arity(format!("{ring} joined with {}", right.semiring())));
    }
    let lk = attr_indices(&left.base, keys)?;
    let rk = attr_indices(&right.base, keys)?;
    for (&a, &b) in lk.iter().zip(&rk) {
        let (ka, kb) = (left.base.columns()[a].kind(), right.base.columns()[b].kind());
        if ka != kb {
            return Err(Error::KindMismatch(format!("join key `{}`: {ka:?} vs {kb:?}", left.base.columns()[a].name())));
        }
    }
    let right_cols: Vec<usize> = (0..right.base.columns().len()).filter(|c| !rk.contains(c)).collect();
    for &c in &right_cols {
        let name = right.base.columns()[c].name();
        if left.base.column(name).is_some() {
            return Err(Error::DuplicateColumn(name.to_string()));
        }
    }

    let mut pairs: Vec<(usize, Option<usize>)> = Vec::new();
    match kind {
        JoinKind::Theta(terms) => {
            if !keys.is_empty() {
                return Err(Error::Param("theta joins take no equi-join keys".into()));
            }
            let resolved: Vec<(usize, CompareOp, usize)> = terms
                .iter()
                .map(|t| {
                    Ok((
                        left.base.column_index(&t.left).ok_or_else(|| Error::unknown_column(left.base.name(), &t.left))?,
                        t.op,
                        right.base.column_index(&t.right).ok_or_else(|| Error::unknown_column(right.base.name(), &t.right))?,
                    ))
                })
                .collect::<Result<_>>()?;
            for i in 0..left.row_count() {
                for j in 0..right.row_count() {
                    if resolved.iter().all(|&(a, op, b)| {
                        compare(left.base.columns()[a].datum(i), op, right.base.columns()[b].datum(j))
                    }) {
                        pairs.push((i, Some(j)));
                    }
                }
            }
        }
        JoinKind::Inner | JoinKind::LeftOuter => {
            let outer = matches!(kind, JoinKind::LeftOuter);
            let build_left = !outer && left.row_count() < right.row_count();
            let (build, build_k, probe, probe_k) = if build_left {
                (left, &lk, right, &rk)
            } else {
                (right, &rk, left, &lk)
            };
            let reader = KeyReader::new(&build.base, build_k);
            let mut table: FxHashMap<Key, Vec<usize>> = FxHashMap::default();
            for r in 0..build.row_count() {
                if let Some(k) = reader.get(r) {
                    table.entry(k).or_default().push(r);
                }
            }
            let reader = KeyReader::new(&probe.base, probe_k);
            for p in 0..probe.row_count() {
                let matches = reader.get(p).and_then(|k| table.get(&k));
                match matches {
                    Some(rows) => {
                        for &b in rows {
                            pairs.push(if build_left { (b, Some(p)) } else { (p, Some(b)) });
                        }
                    }
                    None if outer => pairs.push((p, None)),
                    None => {}
                }
            }
        }
    }

    let mut columns: Vec<Column> = left
        .base
        .columns()
        .iter()
        .map(|c| c.take(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()))
        .collect();
    for &c in &right_cols {
        let src = &right.base.columns()[c];
        let cells: Vec<Datum> = pairs.iter().map(|p| p.1.map_or(Datum::Null, |j| src.datum(j))).collect();
        columns.push(Column::from_datums(src.name(), src.kind(), &cells));
    }
    let w = ring.width();
    let mut flat = vec![0.0; pairs.len() * w];
    let mut rb = ring.zero();
    for (i, &(l, r)) in pairs.iter().enumerate() {
        let out = &mut flat[i * w..(i + 1) * w];
        left.annotations.read(l, out);
        if let Some(r) = r {
            right.annotations.read(r, &mut rb);
            ring.mul_assign(out, &rb);
        }
    }
    let base = Relation::with_rows(format!("{}_{}", left.base.name(), right.base.name()), columns, pairs.len())?;
    AnnotatedRelation::new(base, Annotations::from_flat(ring, &flat))
}

/// Set of composite key values used by semi-joins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeySet {
    keys: FxHashSet<Key>,
}

impl KeySet {
    pub fn from_keys<I: IntoIterator<Item = Vec<u32>>>(keys: I) -> Self {
        KeySet {
            keys: keys.into_iter().map(Key::from_vec).collect(),
        }
    }

    /// Keys of `rel` over `attrs`, skipping nulls.
    pub fn from_relation(rel: &Relation, attrs: &[&str]) -> Result<Self> {
        let idx = attr_indices(rel, attrs)?;
        let reader = KeyReader::new(rel, &idx);
        Ok(KeySet {
            keys: (0..rel.row_count()).filter_map(|r| reader.get(r)).collect(),
        })
    }

    pub fn contains(&self, key: &[u32]) -> bool {
        self.keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Rows of `rel` whose key appears in `key_set`; annotations are kept.
pub fn semijoin_filter(rel: &AnnotatedRelation, keys: &[&str], key_set: &KeySet) -> Result<AnnotatedRelation> {
    let idx = attr_indices(&rel.base, keys)?;
    for &c in &idx {
        if !rel.base.columns()[c].kind().is_coded() {
            return Err(Error::KindMismatch(format!("semi-join key `{}` is numeric", rel.base.columns()[c].name())));
        }
    }
    let reader = KeyReader::new(&rel.base, &idx);
    let rows: Vec<usize> = (0..rel.row_count())
        .filter(|&r| reader.get(r).is_some_and(|k| key_set.contains(&k)))
        .collect();
    AnnotatedRelation::new(rel.base.take(&rows), rel.annotations.take(&rows))
}

fn datum_order(a: &Datum, b: &Datum) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    match (a, b) {
        (Datum::Null, Datum::Null) => Equal,
        (Datum::Null, _) => Greater,
        (_, Datum::Null) => Less,
        (Datum::Num(x), Datum::Num(y)) => x.total_cmp(y),
        (Datum::Code(x), Datum::Code(y)) => x.cmp(y),
        _ => a.as_f64().unwrap().total_cmp(&b.as_f64().unwrap()),
    }
}

/// Sorts groups by `order_attr` and replaces each annotation by the inclusive
/// prefix sum. A null group is emitted last with its own annotation.
pub fn prefix_sum_ordered(grouped: &AnnotatedRelation, order_attr: &str) -> Result<AnnotatedRelation> {
    let col = grouped.base.try_column(order_attr)?;
    let mut rows: Vec<usize> = (0..grouped.row_count()).collect();
    rows.sort_by(|&a, &b| datum_order(&col.datum(a), &col.datum(b)));
    for w in rows.windows(2) {
        if datum_order(&col.datum(w[0]), &col.datum(w[1])).is_eq() {
            return Err(Error::DuplicateOrderValue);
        }
    }
    let ring = grouped.semiring();
    let w = ring.width();
    let mut flat = vec![0.0; rows.len() * w];
    let mut acc = ring.zero();
    let mut buf = ring.zero();
    for (i, &r) in rows.iter().enumerate() {
        grouped.annotations.read(r, &mut buf);
        let out = &mut flat[i * w..(i + 1) * w];
        if col.datum(r).is_null() {
            out.copy_from_slice(&buf);
        } else {
            ring.add_assign(&mut acc, &buf);
            out.copy_from_slice(&acc);
        }
    }
    AnnotatedRelation::new(grouped.base.take(&rows), Annotations::from_flat(ring, &flat))
}

/// Value-to-bin mapping for one cuboid feature.
#[derive(Clone, Debug, PartialEq)]
pub enum Binning {
    /// Values kept as they are.
    Identity,
    /// Equi-width bins over `[min, max]`; bin `i` is represented by `reps[i]`.
    EquiWidth { min: f64, width: f64, reps: Vec<f64> },
}

impl Binning {
    pub(crate) fn plan(kind: ColumnKind, values: &[f64], bins: usize, feature: &str) -> Result<Binning> {
        let mut distinct: Vec<f64> = values.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() <= bins {
            return Ok(Binning::Identity);
        }
        if kind.is_coded() {
            return Err(Error::BinOverflow {
                feature: feature.to_string(),
                count: distinct.len(),
                bins,
            });
        }
        let (min, max) = (distinct[0], *distinct.last().unwrap());
        let width = (max - min) / bins as f64;
        let mut reps = vec![f64::NEG_INFINITY; bins];
        for &v in &distinct {
            let b = Self::bin_of(min, width, bins, v);
            reps[b] = reps[b].max(v);
        }
        Ok(Binning::EquiWidth { min, width, reps })
    }

    fn bin_of(min: f64, width: f64, bins: usize, v: f64) -> usize {
        // Values on a bin edge belong to the lower bin.
        let b = ((v - min) / width).ceil() as i64 - 1;
        b.clamp(0, bins as i64 - 1) as usize
    }

    pub fn apply(&self, d: Datum) -> Datum {
        match (self, d) {
            (Binning::EquiWidth { min, width, reps }, Datum::Num(v)) => {
                Datum::Num(reps[Self::bin_of(*min, *width, reps.len(), v)])
            }
            _ => d,
        }
    }
}
