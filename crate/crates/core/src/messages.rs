//! Messages along directed join-graph edges: computation, absorption at a
//! root relation, and a cache keyed by the predicates each message depends on.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use parking_lot::RwLock;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::database::{Database, Key, KeyReader};
use crate::engine::{AnnotatedRelation, Annotations, CellKey, ExecStats, RowLease};
use crate::error::{Error, Result};
use crate::joingraph::RootedTree;
use crate::predicate::{SplitOp, SplitPredicate};
use crate::relstore::{Column, Datum, Relation, NULL_KEY};
use crate::semiring::SemiRing;

#[derive(Clone, Debug)]
struct BoundPred {
    col: usize,
    pred: SplitPredicate,
}

/// A conjunction of split predicates resolved against a database.
#[derive(Clone, Debug, Default)]
pub struct PredicateSet {
    per_rel: Vec<Vec<BoundPred>>,
}

type Canon = [u64; 4];

impl PredicateSet {
    pub fn bind(db: &Database, preds: &[SplitPredicate]) -> Result<Self> {
        let mut per_rel: Vec<Vec<BoundPred>> = vec![Vec::new(); db.len()];
        for p in preds {
            let (rel, col) = db.resolve(&p.attr)?;
            per_rel[rel].push(BoundPred { col, pred: p.clone() });
        }
        Ok(PredicateSet { per_rel })
    }

    pub fn empty(db: &Database) -> Self {
        PredicateSet {
            per_rel: vec![Vec::new(); db.len()],
        }
    }

    pub fn touches(&self, rel: usize) -> bool {
        !self.per_rel[rel].is_empty()
    }

    fn none_on(&self, rels: &[usize]) -> bool {
        rels.iter().all(|&r| self.per_rel[r].is_empty())
    }

    #[inline]
    fn passes(&self, rel: usize, relation: &Relation, row: usize) -> bool {
        self.per_rel[rel]
            .iter()
            .all(|b| b.pred.matches(relation.columns()[b.col].datum(row)))
    }

    /// Sorted, deduplicated encoding of the predicates on `rels`.
    fn canonical(&self, rels: &[usize]) -> Vec<Canon> {
        let mut out: Vec<Canon> = rels
            .iter()
            .flat_map(|&r| {
                self.per_rel[r].iter().map(move |b| {
                    let (tag, bits) = match b.pred.op {
                        SplitOp::Le(v) => (0u64, v.to_bits()),
                        SplitOp::Eq(c) => (1u64, c as u64),
                    };
                    let flags = tag | (b.pred.negated as u64) << 1 | (b.pred.missing_left as u64) << 2;
                    [(r as u64) << 32 | b.col as u64, bits, flags, 0]
                })
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// FNV-1a over the canonical predicate words.
fn fingerprint(canon: &[Canon]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for word in canon.iter().flatten() {
        for byte in word.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

const EMPTY: u32 = u32::MAX;

#[derive(Debug)]
enum Lookup {
    Dense { slots: Vec<u32>, null_slot: u32 },
    Hash(FxHashMap<Key, u32>),
}

/// Key-to-slot index with values stored flat, `width` per slot.
#[derive(Debug)]
pub struct MessageIndex {
    lookup: Lookup,
    keys: Vec<Key>,
    values: Vec<f64>,
    width: usize,
}

impl MessageIndex {
    fn for_keys(rel: &Relation, reader: &KeyReader, width: usize) -> Self {
        let n = rel.row_count();
        let lookup = if reader.is_single() {
            let max = (0..n).filter_map(|r| reader.single(r)).filter(|&c| c != NULL_KEY).max();
            match max {
                Some(m) if (m as usize) > 4 * n + 1024 => Lookup::Hash(FxHashMap::default()),
                _ => Lookup::Dense {
                    slots: vec![EMPTY; max.map_or(0, |m| m as usize + 1)],
                    null_slot: EMPTY,
                },
            }
        } else {
            Lookup::Hash(FxHashMap::default())
        };
        MessageIndex {
            lookup,
            keys: Vec::new(),
            values: Vec::new(),
            width,
        }
    }

    /// Slot of the row's key, creating a zeroed one if absent.
    #[inline]
    fn slot_mut(&mut self, reader: &KeyReader, row: usize) -> Option<usize> {
        let (slot, key) = match &mut self.lookup {
            Lookup::Dense { slots, null_slot } => {
                let code = reader.single(row)?;
                let s = if code == NULL_KEY {
                    null_slot
                } else {
                    &mut slots[code as usize]
                };
                if *s != EMPTY {
                    return Some(*s as usize);
                }
                *s = self.keys.len() as u32;
                (*s as usize, Key::from_slice(&[code]))
            }
            Lookup::Hash(map) => {
                let key = reader.get(row)?;
                let next = self.keys.len() as u32;
                let s = *map.entry(key.clone()).or_insert(next);
                if s != next {
                    return Some(s as usize);
                }
                (s as usize, key)
            }
        };
        self.keys.push(key);
        self.values.extend(std::iter::repeat(0.0).take(self.width));
        Some(slot)
    }

    #[inline]
    fn find(&self, reader: &KeyReader, row: usize) -> Option<usize> {
        match &self.lookup {
            Lookup::Dense { slots, null_slot } => {
                let code = reader.single(row)?;
                let s = if code == NULL_KEY {
                    *null_slot
                } else {
                    *slots.get(code as usize)?
                };
                (s != EMPTY).then_some(s as usize)
            }
            Lookup::Hash(map) => map.get(&reader.get(row)?).map(|&s| s as usize),
        }
    }

    fn find_key(&self, key: &[u32]) -> Option<usize> {
        match &self.lookup {
            Lookup::Dense { slots, null_slot } => {
                if key.len() != 1 {
                    return None;
                }
                let s = if key[0] == NULL_KEY {
                    *null_slot
                } else {
                    *slots.get(key[0] as usize)?
                };
                (s != EMPTY).then_some(s as usize)
            }
            Lookup::Hash(map) => map.get(&Key::from_slice(key)).map(|&s| s as usize),
        }
    }

    #[inline]
    fn value(&self, slot: usize) -> &[f64] {
        &self.values[slot * self.width..(slot + 1) * self.width]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }
}

#[derive(Debug)]
pub enum Payload {
    /// The one element for every key; nothing stored.
    Identity,
    /// The one element for the listed keys, zero elsewhere.
    KeySet(MessageIndex),
    Table(MessageIndex),
}

/// Aggregated annotations flowing from `from` to `to`.
#[derive(Debug)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    /// Relations on the sender side of the edge, sorted.
    pub depends_on: Vec<usize>,
    pub fingerprint: u64,
    pub payload: Payload,
    semiring: SemiRing,
    canonical: Vec<Canon>,
    key_names: Vec<String>,
    _lease: Option<RowLease>,
}

impl Message {
    pub fn rows(&self) -> usize {
        match &self.payload {
            Payload::Identity => 0,
            Payload::KeySet(ix) | Payload::Table(ix) => ix.len(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.payload, Payload::Identity)
    }

    /// The message value for a key; `None` stands for zero.
    pub fn value(&self, key: &[u32]) -> Option<Vec<f64>> {
        match &self.payload {
            Payload::Identity => Some(self.semiring.one()),
            Payload::KeySet(ix) => ix.find_key(key).map(|_| self.semiring.one()),
            Payload::Table(ix) => ix.find_key(key).map(|s| ix.value(s).to_vec()),
        }
    }

    /// Payload as an annotated relation over the join key columns.
    pub fn to_annotated(&self) -> Result<AnnotatedRelation> {
        let (keys, flat): (&[Key], Vec<f64>) = match &self.payload {
            Payload::Identity => (&[], Vec::new()),
            Payload::KeySet(ix) => (&ix.keys, ix.keys.iter().flat_map(|_| self.semiring.one()).collect()),
            Payload::Table(ix) => (&ix.keys, ix.values.clone()),
        };
        let columns = self
            .key_names
            .iter()
            .enumerate()
            .map(|(j, name)| Column::key(name.clone(), keys.iter().map(|k| k[j]).collect()))
            .collect();
        let rel = Relation::with_rows(format!("m_{}_{}", self.from, self.to), columns, keys.len())?;
        AnnotatedRelation::new(rel, Annotations::from_flat(self.semiring, &flat))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MsgKey {
    pub from: usize,
    pub to: usize,
    pub fingerprint: u64,
    /// Separates otherwise equal keys, e.g. per tree node when sharing is off.
    pub salt: u64,
}

/// Messages keyed by edge and sender-side predicates.
#[derive(Debug, Default)]
pub struct MessageCache {
    map: RwLock<FxHashMap<MsgKey, Arc<Message>>>,
    sharing: bool,
}

impl MessageCache {
    /// With `sharing` off, tree nodes never see each other's messages.
    pub fn new(sharing: bool) -> Self {
        MessageCache {
            map: RwLock::new(FxHashMap::default()),
            sharing,
        }
    }

    pub fn sharing(&self) -> bool {
        self.sharing
    }

    fn get(&self, key: &MsgKey, canonical: &[Canon]) -> Option<Arc<Message>> {
        self.map
            .read()
            .get(key)
            .filter(|m| m.canonical == canonical)
            .cloned()
    }

    /// First writer wins; returns the stored message.
    fn insert(&self, key: MsgKey, msg: Message) -> Arc<Message> {
        let mut map = self.map.write();
        if let Some(existing) = map.get(&key) {
            if existing.canonical == msg.canonical {
                return Arc::clone(existing);
            }
            // Fingerprint collision: keep the resident entry, hand back the new one.
            return Arc::new(msg);
        }
        let msg = Arc::new(msg);
        map.insert(key, Arc::clone(&msg));
        msg
    }

    pub fn contains(&self, key: &MsgKey) -> bool {
        self.map.read().contains_key(key)
    }

    pub fn retain(&self, live: &FxHashSet<MsgKey>) {
        self.map.write().retain(|k, _| live.contains(k));
    }

    pub fn clear(&self) {
        self.map.write().clear();
    }

    pub fn len(&self) -> usize {
        self.map.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.read().is_empty()
    }

    /// Cached messages in key order.
    pub fn messages(&self) -> Vec<(MsgKey, Arc<Message>)> {
        let mut v: Vec<_> = self.map.read().iter().map(|(k, m)| (*k, Arc::clone(m))).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// Writes every cached payload as `m_<from>_<to>_<fingerprint>.csv`.
    pub fn dump(&self, db: &Database, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, m) in self.messages() {
            let path = dir.join(format!("m_{}_{}_{:016x}_{}.csv", db.name(k.from), db.name(k.to), k.fingerprint, k.salt));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            m.to_annotated()?.to_csv(std::io::BufWriter::new(file))?;
        }
        Ok(())
    }
}

/// Classifies the cached messages after a split on `split_relation`: a message
/// stays valid for the children iff the relation is outside its sender side.
pub fn reuse_after_split(
    cache: &MessageCache,
    split_relation: &str,
    tree: &RootedTree,
) -> (BTreeSet<(String, String)>, BTreeSet<(String, String)>) {
    let split = tree.names.iter().position(|n| n == split_relation);
    let mut reused = BTreeSet::new();
    let mut invalidated = BTreeSet::new();
    for (_, m) in cache.messages() {
        let edge = (tree.names[m.from].clone(), tree.names[m.to].clone());
        if split.map_or(false, |s| m.depends_on.contains(&s)) {
            invalidated.insert(edge);
        } else {
            reused.insert(edge);
        }
    }
    (reused, invalidated)
}

/// A message still to be computed in a batch.
#[derive(Clone, Debug)]
pub struct PlannedMessage {
    pub key: MsgKey,
    /// Index of the request whose predicates define this message.
    pub request: usize,
    /// Indices of planned messages this one consumes.
    pub deps: Vec<usize>,
}

/// One tree node's need for messages toward `roots`.
#[derive(Clone, Copy, Debug)]
pub struct MessageRequest<'p> {
    pub preds: &'p PredicateSet,
    pub salt: u64,
    pub roots: &'p [usize],
}

/// Result of absorbing at a root grouped by one of its columns.
#[derive(Debug)]
pub struct Absorbed {
    /// Distinct non-null values, ascending.
    pub values: Vec<Datum>,
    /// Aggregates, `width` per value.
    pub aggs: Vec<f64>,
    pub null: Option<Vec<f64>>,
    pub width: usize,
    _lease: RowLease,
}

impl Absorbed {
    pub fn agg(&self, i: usize) -> &[f64] {
        &self.aggs[i * self.width..(i + 1) * self.width]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Message passing over an annotated database. Relations without annotations
/// carry the one element.
pub struct Factorized<'a> {
    db: &'a Database,
    ring: SemiRing,
    annotations: Vec<Option<Annotations>>,
    stats: Arc<ExecStats>,
    side: FxHashMap<(usize, usize), Vec<usize>>,
    /// Sender side contributes the one element whenever unfiltered.
    unit: FxHashMap<(usize, usize), bool>,
    /// Sender side contributes one or zero per key whatever the filters.
    keyset: FxHashMap<(usize, usize), bool>,
    toward: Vec<Vec<(usize, usize)>>,
    identity: Arc<Message>,
}

impl<'a> Factorized<'a> {
    pub fn new(
        db: &'a Database,
        ring: SemiRing,
        annotations: Vec<Option<Annotations>>,
        stats: Arc<ExecStats>,
    ) -> Result<Self> {
        if annotations.len() != db.len() {
            return Err(Error::LengthMismatch {
                expected: db.len(),
                got: annotations.len(),
            });
        }
        for (i, a) in annotations.iter().enumerate() {
            if let Some(a) = a {
                if a.semiring() != ring {
                    return Err(Error::KindMismatch(format!(
                        "annotations of {} use {}, expected {ring}",
                        db.name(i),
                        a.semiring()
                    )));
                }
                if a.len() != db.relation(i).row_count() {
                    return Err(Error::LengthMismatch {
                        expected: db.relation(i).row_count(),
                        got: a.len(),
                    });
                }
            }
        }
        let n = db.len();
        let mut side = FxHashMap::default();
        let mut toward = Vec::with_capacity(n);
        for root in 0..n {
            let tree = db.rooted(root);
            let mut edges = Vec::new();
            for &x in tree.order.iter().rev() {
                if let Some(p) = tree.parent[x] {
                    let mut s = tree.subtree(x);
                    s.sort_unstable();
                    side.insert((x, p), s);
                    edges.push((x, p));
                }
            }
            toward.push(edges);
        }
        let mut unit = FxHashMap::default();
        let mut keyset = FxHashMap::default();
        // Leaf-first order within every rooting makes child entries available.
        for root in 0..n {
            for &(x, p) in &toward[root] {
                let edge = db.edge_between(x, p).expect("tree edge");
                let one_side = edge.one_side == Some(x) && annotations[x].is_none();
                let children = || db.neighbors(x).iter().map(|&(c, _)| c).filter(move |&c| c != p);
                let ks = one_side && children().all(|c| keyset[&(c, x)]);
                let un = ks && !edge.missing_keys && !edge.outer && children().all(|c| unit[&(c, x)]);
                keyset.insert((x, p), ks);
                unit.insert((x, p), un);
            }
        }
        let identity = Arc::new(Message {
            from: usize::MAX,
            to: usize::MAX,
            depends_on: Vec::new(),
            fingerprint: 0,
            payload: Payload::Identity,
            semiring: ring,
            canonical: Vec::new(),
            key_names: Vec::new(),
            _lease: None,
        });
        Ok(Factorized {
            db,
            ring,
            annotations,
            stats,
            side,
            unit,
            keyset,
            toward,
            identity,
        })
    }

    pub fn db(&self) -> &'a Database {
        self.db
    }

    pub fn semiring(&self) -> SemiRing {
        self.ring
    }

    pub fn stats(&self) -> &Arc<ExecStats> {
        &self.stats
    }

    pub fn annotations(&self) -> &[Option<Annotations>] {
        &self.annotations
    }

    /// Relations on the `from` side of the edge `from → to`.
    pub fn side(&self, from: usize, to: usize) -> &[usize] {
        &self.side[&(from, to)]
    }

    /// Child-to-parent edges of the tree rooted at `root`, leaves first.
    pub fn edges_toward(&self, root: usize) -> &[(usize, usize)] {
        &self.toward[root]
    }

    /// Edges whose unfiltered message is the one element.
    pub fn identity_edges(&self) -> BTreeSet<(usize, usize)> {
        self.unit.iter().filter(|(_, &u)| u).map(|(&e, _)| e).collect()
    }

    pub fn is_identity(&self, from: usize, to: usize, preds: &PredicateSet) -> bool {
        self.unit[&(from, to)] && preds.none_on(self.side(from, to))
    }

    pub fn key_for(&self, from: usize, to: usize, preds: &PredicateSet, salt: u64) -> MsgKey {
        self.key_and_canon(from, to, preds, salt).0
    }

    fn key_and_canon(&self, from: usize, to: usize, preds: &PredicateSet, salt: u64) -> (MsgKey, Vec<Canon>) {
        let canon = preds.canonical(self.side(from, to));
        let key = MsgKey {
            from,
            to,
            fingerprint: fingerprint(&canon),
            salt,
        };
        (key, canon)
    }

    /// Messages into `x` from all neighbours except `exclude`, which must be
    /// cached already unless they are identities.
    pub fn incoming(
        &self,
        x: usize,
        exclude: Option<usize>,
        preds: &PredicateSet,
        cache: &MessageCache,
        salt: u64,
    ) -> Result<Vec<(usize, Arc<Message>)>> {
        let mut out = Vec::new();
        for &(c, _) in self.db.neighbors(x) {
            if Some(c) == exclude {
                continue;
            }
            if self.is_identity(c, x, preds) {
                self.stats.messages_identity.fetch_add(1, Ordering::Relaxed);
                out.push((c, Arc::clone(&self.identity)));
                continue;
            }
            let (key, canon) = self.key_and_canon(c, x, preds, salt);
            let msg = cache.get(&key, &canon).ok_or_else(|| {
                Error::Graph(format!("message {} -> {} is not available", self.db.name(c), self.db.name(x)))
            })?;
            out.push((c, msg));
        }
        Ok(out)
    }

    /// Computes `from → to` given the messages into `from` from its other neighbours.
    pub fn compute_message(
        &self,
        from: usize,
        to: usize,
        preds: &PredicateSet,
        incoming: &[(usize, Arc<Message>)],
    ) -> Result<Message> {
        let edge = self
            .db
            .edge_between(from, to)
            .ok_or_else(|| Error::Graph(format!("no edge {} -> {}", self.db.name(from), self.db.name(to))))?;
        let (key, canonical) = self.key_and_canon(from, to, preds, 0);
        let rel = self.db.relation(from);
        let cols = edge.cols_of(from);
        let reader = KeyReader::new(rel, cols);
        let as_keyset = self.keyset[&(from, to)];
        let width = if as_keyset { 0 } else { self.ring.width() };
        let mut index = MessageIndex::for_keys(rel, &reader, width);
        self.for_each_row(from, preds, incoming, |row, value| {
            if let Some(slot) = index.slot_mut(&reader, row) {
                if !as_keyset {
                    let w = index.width;
                    self.ring.add_assign(&mut index.values[slot * w..(slot + 1) * w], value);
                }
            }
        })?;
        self.stats.record_edge(from, to);
        let lease = self.stats.lease(index.len());
        Ok(Message {
            from,
            to,
            depends_on: self.side(from, to).to_vec(),
            fingerprint: key.fingerprint,
            payload: if as_keyset {
                Payload::KeySet(index)
            } else {
                Payload::Table(index)
            },
            semiring: self.ring,
            canonical,
            key_names: cols.iter().map(|&c| rel.columns()[c].name().to_string()).collect(),
            _lease: Some(lease),
        })
    }

    /// Joins each filtered row of `x` with the incoming messages and hands
    /// the product to `f`. Rows without a partner in some message are skipped.
    fn for_each_row(
        &self,
        x: usize,
        preds: &PredicateSet,
        incoming: &[(usize, Arc<Message>)],
        mut f: impl FnMut(usize, &[f64]),
    ) -> Result<()> {
        let rel = self.db.relation(x);
        let mut sources: Vec<(KeyReader, &MessageIndex, bool)> = Vec::with_capacity(incoming.len());
        for (c, m) in incoming {
            let edge = self
                .db
                .edge_between(x, *c)
                .ok_or_else(|| Error::Graph(format!("no edge {} -> {}", self.db.name(*c), self.db.name(x))))?;
            match &m.payload {
                Payload::Identity => {}
                Payload::KeySet(ix) => sources.push((KeyReader::new(rel, edge.cols_of(x)), ix, false)),
                Payload::Table(ix) => sources.push((KeyReader::new(rel, edge.cols_of(x)), ix, true)),
            }
        }
        let own = self.annotations[x].as_ref();
        let one = self.ring.one();
        let mut buf = self.ring.zero();
        let filtered = preds.touches(x);
        'rows: for row in 0..rel.row_count() {
            if filtered && !preds.passes(x, rel, row) {
                continue;
            }
            let mut started = false;
            if let Some(a) = own {
                a.read(row, &mut buf);
                started = true;
            }
            for (reader, ix, valued) in &sources {
                let Some(slot) = ix.find(reader, row) else { continue 'rows };
                if *valued {
                    if started {
                        self.ring.mul_assign(&mut buf, ix.value(slot));
                    } else {
                        buf.copy_from_slice(ix.value(slot));
                        started = true;
                    }
                }
            }
            if !started {
                buf.copy_from_slice(&one);
            }
            f(row, &buf);
        }
        Ok(())
    }

    /// `⊕` over the join restricted to `preds`, absorbed at `root`.
    pub fn absorb_total(&self, root: usize, preds: &PredicateSet, incoming: &[(usize, Arc<Message>)]) -> Result<Vec<f64>> {
        let mut acc = self.ring.zero();
        self.for_each_row(root, preds, incoming, |_, v| self.ring.add_assign(&mut acc, v))?;
        Ok(acc)
    }

    /// Aggregates at `root` grouped by its column `col`.
    pub fn absorb_grouped(
        &self,
        root: usize,
        col: usize,
        preds: &PredicateSet,
        incoming: &[(usize, Arc<Message>)],
    ) -> Result<Absorbed> {
        let rel = self.db.relation(root);
        let column = &rel.columns()[col];
        let w = self.ring.width();
        let mut slots: FxHashMap<CellKey, usize> = FxHashMap::default();
        let mut values: Vec<Datum> = Vec::new();
        let mut aggs: Vec<f64> = Vec::new();
        let mut null: Option<Vec<f64>> = None;
        self.for_each_row(root, preds, incoming, |row, v| {
            let d = match column.datum(row) {
                Datum::Code(NULL_KEY) => Datum::Null,
                d => d,
            };
            if d.is_null() {
                self.ring.add_assign(null.get_or_insert_with(|| self.ring.zero()), v);
                return;
            }
            let next = values.len();
            let s = *slots.entry(CellKey::of(d)).or_insert(next);
            if s == next {
                values.push(d);
                aggs.extend(std::iter::repeat(0.0).take(w));
            }
            self.ring.add_assign(&mut aggs[s * w..(s + 1) * w], v);
        })?;
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| match (values[a], values[b]) {
            (Datum::Num(x), Datum::Num(y)) => x.total_cmp(&y),
            (Datum::Code(x), Datum::Code(y)) => x.cmp(&y),
            _ => std::cmp::Ordering::Equal,
        });
        let lease = self.stats.lease(values.len() + null.is_some() as usize);
        Ok(Absorbed {
            values: order.iter().map(|&i| values[i]).collect(),
            aggs: order.iter().flat_map(|&i| aggs[i * w..(i + 1) * w].iter().copied()).collect(),
            null,
            width: w,
            _lease: lease,
        })
    }

    /// Messages that must be computed to serve `requests`, deduplicated by key
    /// and in dependency order. Cached hits are counted as reused.
    pub fn plan(&self, requests: &[MessageRequest<'_>], cache: &MessageCache) -> Vec<PlannedMessage> {
        let mut planned: Vec<PlannedMessage> = Vec::new();
        let mut index: FxHashMap<MsgKey, usize> = FxHashMap::default();
        let mut hits: FxHashSet<MsgKey> = FxHashSet::default();
        for (ri, req) in requests.iter().enumerate() {
            for &root in req.roots {
                for &(a, b) in self.edges_toward(root) {
                    if self.is_identity(a, b, req.preds) {
                        continue;
                    }
                    let (key, canon) = self.key_and_canon(a, b, req.preds, req.salt);
                    if index.contains_key(&key) || hits.contains(&key) {
                        continue;
                    }
                    if cache.get(&key, &canon).is_some() {
                        hits.insert(key);
                        continue;
                    }
                    let deps = self
                        .db
                        .neighbors(a)
                        .iter()
                        .filter(|&&(c, _)| c != b)
                        .filter_map(|&(c, _)| index.get(&self.key_for(c, a, req.preds, req.salt)).copied())
                        .collect();
                    index.insert(key, planned.len());
                    planned.push(PlannedMessage { key, request: ri, deps });
                }
            }
        }
        self.stats.messages_reused.fetch_add(hits.len(), Ordering::Relaxed);
        planned
    }

    /// Computes one planned message from cached inputs and stores it.
    pub fn run_planned(
        &self,
        p: &PlannedMessage,
        requests: &[MessageRequest<'_>],
        cache: &MessageCache,
    ) -> Result<Arc<Message>> {
        let req = &requests[p.request];
        let incoming = self.incoming(p.key.from, Some(p.key.to), req.preds, cache, req.salt)?;
        let msg = self.compute_message(p.key.from, p.key.to, req.preds, &incoming)?;
        Ok(cache.insert(p.key, msg))
    }

    /// Keys of every non-identity message the requests read.
    pub fn live_keys(&self, requests: &[MessageRequest<'_>]) -> FxHashSet<MsgKey> {
        let mut live = FxHashSet::default();
        for req in requests {
            for &root in req.roots {
                for &(a, b) in self.edges_toward(root) {
                    if !self.is_identity(a, b, req.preds) {
                        live.insert(self.key_for(a, b, req.preds, req.salt));
                    }
                }
            }
        }
        live
    }

    /// Computes, serially, every missing message toward `root`.
    pub fn ensure(&self, root: usize, preds: &PredicateSet, cache: &MessageCache, salt: u64) -> Result<()> {
        let roots = [root];
        let requests = [MessageRequest { preds, salt, roots: &roots }];
        for p in self.plan(&requests, cache) {
            self.run_planned(&p, &requests, cache)?;
        }
        Ok(())
    }

    /// Total aggregate of the filtered join.
    pub fn total(&self, preds: &PredicateSet, cache: &MessageCache, salt: u64) -> Result<Vec<f64>> {
        let root = self.db.target_id();
        self.ensure(root, preds, cache, salt)?;
        let incoming = self.incoming(root, None, preds, cache, salt)?;
        self.absorb_total(root, preds, &incoming)
    }

    /// Filtered join aggregates grouped by one column.
    pub fn grouped(
        &self,
        root: usize,
        col: usize,
        preds: &PredicateSet,
        cache: &MessageCache,
        salt: u64,
    ) -> Result<Absorbed> {
        self.ensure(root, preds, cache, salt)?;
        let incoming = self.incoming(root, None, preds, cache, salt)?;
        self.absorb_grouped(root, col, preds, &incoming)
    }

    /// Per-row products of each relation's annotation with all incoming
    /// messages: row `i` of relation `x` gets the aggregate of the join tuples
    /// it takes part in. Used for sampling and checks.
    pub fn row_weights(&self, x: usize, preds: &PredicateSet, cache: &MessageCache, salt: u64) -> Result<Vec<Vec<f64>>> {
        self.ensure(x, preds, cache, salt)?;
        let incoming = self.incoming(x, None, preds, cache, salt)?;
        let n = self.db.relation(x).row_count();
        let mut out = vec![self.ring.zero(); n];
        self.for_each_row(x, preds, &incoming, |row, v| out[row].copy_from_slice(v))?;
        Ok(out)
    }

    /// Incoming messages into `x` from neighbours other than `exclude`, computed as needed.
    pub fn messages_into(
        &self,
        x: usize,
        exclude: Option<usize>,
        preds: &PredicateSet,
        cache: &MessageCache,
        salt: u64,
    ) -> Result<Vec<(usize, Arc<Message>)>> {
        self.ensure(x, preds, cache, salt)?;
        self.incoming(x, exclude, preds, cache, salt)
    }

    /// Row product restricted to messages from neighbours other than `exclude`.
    pub fn partial_row_weights(
        &self,
        x: usize,
        exclude: Option<usize>,
        preds: &PredicateSet,
        cache: &MessageCache,
        salt: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let incoming = self.messages_into(x, exclude, preds, cache, salt)?;
        let n = self.db.relation(x).row_count();
        let mut out = vec![self.ring.zero(); n];
        self.for_each_row(x, preds, &incoming, |row, v| out[row].copy_from_slice(v))?;
        Ok(out)
    }
}
