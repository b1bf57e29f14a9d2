//! A validated set of relations plus their join graph.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rustc_hash::FxHashMap;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::joingraph::{Cardinality, Cluster, JoinGraph, RootedTree};
use crate::relstore::{Column, ColumnData, Datum, Dictionaries, Relation, NULL_KEY};

pub type Key = SmallVec<[u32; 2]>;

/// `relation.column` reference.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct AttrRef {
    pub relation: String,
    pub column: String,
}

impl AttrRef {
    pub fn new(relation: impl Into<String>, column: impl Into<String>) -> Self {
        AttrRef {
            relation: relation.into(),
            column: column.into(),
        }
    }

    /// Parses `relation.column`.
    pub fn parse(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once('.')
            .ok_or_else(|| Error::Param(format!("expected relation.column, got `{s}`")))?;
        Ok(AttrRef::new(r, c))
    }
}

impl std::fmt::Display for AttrRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.relation, self.column)
    }
}

#[derive(Clone, Debug)]
pub struct EdgeInfo {
    pub a: usize,
    pub b: usize,
    pub a_cols: Vec<usize>,
    pub b_cols: Vec<usize>,
    /// Relation id of the "1" side.
    pub one_side: Option<usize>,
    pub missing_keys: bool,
    pub outer: bool,
}

impl EdgeInfo {
    pub fn cols_of(&self, rel: usize) -> &[usize] {
        if rel == self.a {
            &self.a_cols
        } else {
            &self.b_cols
        }
    }

    pub fn other(&self, rel: usize) -> usize {
        if rel == self.a {
            self.b
        } else {
            self.a
        }
    }
}

/// Reads composite key values of one relation row.
pub(crate) struct KeyReader<'a> {
    cols: SmallVec<[&'a Column; 2]>,
    codes: SmallVec<[&'a [u32]; 2]>,
}

impl<'a> KeyReader<'a> {
    pub fn new(rel: &'a Relation, cols: &[usize]) -> Self {
        let cols: SmallVec<[&Column; 2]> = cols.iter().map(|&c| &rel.columns()[c]).collect();
        let codes = cols.iter().map(|c| c.codes().expect("key columns are coded")).collect();
        KeyReader { cols, codes }
    }

    #[inline]
    pub fn get(&self, row: usize) -> Option<Key> {
        let mut k = Key::new();
        for (c, codes) in self.cols.iter().zip(&self.codes) {
            if !c.is_valid(row) {
                return None;
            }
            k.push(codes[row]);
        }
        Some(k)
    }

    /// Single-column fast path.
    #[inline]
    pub fn single(&self, row: usize) -> Option<u32> {
        if self.cols.len() != 1 || !self.cols[0].is_valid(row) {
            return None;
        }
        Some(self.codes[0][row])
    }

    pub fn is_single(&self) -> bool {
        self.cols.len() == 1
    }
}

#[derive(Clone, Debug)]
pub struct Database {
    relations: Vec<Relation>,
    graph: JoinGraph,
    ids: HashMap<String, usize>,
    edges: Vec<EdgeInfo>,
    adjacency: Vec<Vec<(usize, usize)>>,
    dicts: Arc<Dictionaries>,
    nulled: BTreeSet<usize>,
}

impl Database {
    pub fn new(relations: Vec<Relation>, graph: JoinGraph) -> Result<Self> {
        Self::with_dictionaries(relations, graph, Dictionaries::default())
    }

    /// Validates the graph, verifies declared cardinalities, and rewrites outer
    /// edges into inner joins by adding a null-key row on the optional side.
    pub fn with_dictionaries(relations: Vec<Relation>, mut graph: JoinGraph, dicts: Dictionaries) -> Result<Self> {
        graph.validate(&relations)?;
        let mut ordered = Vec::with_capacity(graph.nodes.len());
        for n in &graph.nodes {
            let r = relations
                .iter()
                .find(|r| r.name() == n)
                .ok_or_else(|| Error::UnknownRelation(n.clone()))?;
            ordered.push(r.clone());
        }
        let mut relations = ordered;
        let ids: HashMap<String, usize> = graph.nodes.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let adjacency = graph.adjacency()?;

        let mut edges = Vec::with_capacity(graph.edges.len());
        for e in &graph.edges {
            let a = ids[&e.left];
            let b = ids[&e.right];
            let a_cols = e.keys.iter().map(|k| relations[a].column_index(k).unwrap()).collect();
            let b_cols = e.keys.iter().map(|k| relations[b].column_index(k).unwrap()).collect();
            let one_side = e.one_side().map(|n| ids[n]);
            edges.push(EdgeInfo {
                a,
                b,
                a_cols,
                b_cols,
                one_side,
                missing_keys: false,
                outer: e.outer,
            });
        }

        for (ei, e) in graph.edges.iter().enumerate() {
            let info = &edges[ei];
            if e.outer && e.cardinality != Cardinality::NTo1 {
                return Err(Error::Graph(format!(
                    "outer edge {} - {} must be declared N_to_1 with the preserved side on the left",
                    e.left, e.right
                )));
            }
            if let Some(one) = info.one_side {
                let many = info.other(one);
                let one_rel = &relations[one];
                let reader = KeyReader::new(one_rel, info.cols_of(one));
                let mut seen: FxHashMap<Key, usize> = FxHashMap::default();
                for row in 0..one_rel.row_count() {
                    if let Some(k) = reader.get(row) {
                        if seen.insert(k.clone(), row).is_some() {
                            return Err(Error::Cardinality {
                                left: e.left.clone(),
                                right: e.right.clone(),
                                message: format!("key {:?} repeats on the `{}` side", k.as_slice(), one_rel.name()),
                            });
                        }
                    }
                }
                let many_rel = &relations[many];
                let reader = KeyReader::new(many_rel, info.cols_of(many));
                let missing = (0..many_rel.row_count()).any(|row| reader.get(row).map_or(true, |k| !seen.contains_key(&k)));
                edges[ei].missing_keys = missing;
            }
        }

        let mut db_edges = graph.edges.clone();
        for (e, info) in db_edges.iter_mut().zip(&edges) {
            e.missing_keys = info.missing_keys || info.outer;
        }
        graph.edges = db_edges;

        let mut db = Database {
            relations: Vec::new(),
            graph,
            ids,
            edges,
            adjacency,
            dicts: Arc::new(dicts),
            nulled: BTreeSet::new(),
        };
        db.augment_outer(&mut relations)?;
        db.relations = relations;
        Ok(db)
    }

    fn augment_outer(&mut self, relations: &mut [Relation]) -> Result<()> {
        let outer: Vec<usize> = (0..self.edges.len()).filter(|&e| self.edges[e].outer).collect();
        if outer.is_empty() {
            return Ok(());
        }
        let mut used_key_cols: HashMap<(usize, usize), usize> = HashMap::new();
        for e in &self.edges {
            for &c in &e.a_cols {
                *used_key_cols.entry((e.a, c)).or_default() += 1;
            }
            for &c in &e.b_cols {
                *used_key_cols.entry((e.b, c)).or_default() += 1;
            }
        }
        let target = self.ids[&self.graph.target_relation];
        for &ei in &outer {
            let info = self.edges[ei].clone();
            let (preserved, optional) = (info.a, info.b);
            for &c in &info.a_cols {
                if used_key_cols[&(preserved, c)] > 1 {
                    return Err(Error::Graph(format!(
                        "key column {}.{} of an outer edge is shared with another edge",
                        relations[preserved].name(),
                        relations[preserved].columns()[c].name()
                    )));
                }
            }
            let tree = RootedTree::build(&self.graph.nodes, &self.adjacency, preserved);
            let side = tree.subtree(optional);
            if side.contains(&target) {
                return Err(Error::Graph(format!(
                    "target relation `{}` lies on the optional side of an outer join",
                    self.graph.target_relation
                )));
            }

            // Unmatched or null keys on the preserved side point at the null row.
            let remap: Vec<bool> = {
                let one_rel = &relations[optional];
                let reader = KeyReader::new(one_rel, &info.b_cols);
                let present: rustc_hash::FxHashSet<Key> =
                    (0..one_rel.row_count()).filter_map(|r| reader.get(r)).collect();
                let rel = &relations[preserved];
                let reader = KeyReader::new(rel, &info.a_cols);
                (0..rel.row_count())
                    .map(|r| reader.get(r).map_or(true, |k| !present.contains(&k)))
                    .collect()
            };
            if remap.iter().any(|&m| m) {
                let rel = &mut relations[preserved];
                for &c in &info.a_cols {
                    let col = &rel.columns()[c];
                    let mut codes = col.codes().unwrap().to_vec();
                    for (r, &m) in remap.iter().enumerate() {
                        if m {
                            codes[r] = NULL_KEY;
                        }
                    }
                    let name = col.name().to_string();
                    rel.swap_column(&name, ColumnData::from(codes))?;
                    let col = rel.column_mut(c);
                    *col = col.clone().with_validity(bitvec::vec::BitVec::repeat(true, col.len()));
                }
            }
            for &x in &side {
                if self.nulled.insert(x) {
                    let key_cols: BTreeSet<usize> = self
                        .edges
                        .iter()
                        .filter(|e| e.a == x || e.b == x)
                        .flat_map(|e| e.cols_of(x).to_vec())
                        .collect();
                    let key_cols: Vec<usize> = key_cols.into_iter().collect();
                    relations[x].push_null_row(&key_cols);
                }
            }
        }
        Ok(())
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation(&self, id: usize) -> &Relation {
        &self.relations[id]
    }

    pub fn relation_mut(&mut self, id: usize) -> &mut Relation {
        &mut self.relations[id]
    }

    pub fn relation_by_name(&self, name: &str) -> Result<&Relation> {
        Ok(&self.relations[self.id(name)?])
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.graph.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn graph(&self) -> &JoinGraph {
        &self.graph
    }

    pub fn edges(&self) -> &[EdgeInfo] {
        &self.edges
    }

    pub fn dictionaries(&self) -> &Dictionaries {
        &self.dicts
    }

    pub fn target_id(&self) -> usize {
        self.ids[&self.graph.target_relation]
    }

    /// Neighbours sorted by name, each with the connecting edge index.
    pub fn neighbors(&self, id: usize) -> &[(usize, usize)] {
        &self.adjacency[id]
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<&EdgeInfo> {
        self.adjacency[a]
            .iter()
            .find(|&&(y, _)| y == b)
            .map(|&(_, e)| &self.edges[e])
    }

    /// Relations with an added null-key row.
    pub fn null_augmented(&self) -> &BTreeSet<usize> {
        &self.nulled
    }

    pub fn rooted(&self, root: usize) -> RootedTree {
        RootedTree::build(&self.graph.nodes, &self.adjacency, root)
    }

    pub fn clusters(&self) -> Result<Vec<Cluster>> {
        self.graph.compute_clusters()
    }

    /// The fact relation when the whole graph is one cluster.
    pub fn snowflake_fact(&self) -> Result<Option<usize>> {
        let clusters = self.clusters()?;
        if clusters.len() == 1 && clusters[0].members.len() == self.len() {
            let fact = self.id(&clusters[0].fact)?;
            if let Some(declared) = &self.graph.fact_relation {
                if self.id(declared)? != fact {
                    return Ok(None);
                }
            }
            return Ok(Some(fact));
        }
        Ok(None)
    }

    pub fn resolve(&self, attr: &AttrRef) -> Result<(usize, usize)> {
        let rel = self.id(&attr.relation)?;
        let col = self.relations[rel]
            .column_index(&attr.column)
            .ok_or_else(|| Error::unknown_column(&attr.relation, &attr.column))?;
        Ok((rel, col))
    }

    /// Directed path of relation ids from `from` to `to` along the tree.
    pub fn path(&self, from: usize, to: usize) -> Vec<usize> {
        let tree = self.rooted(to);
        let mut path = vec![from];
        let mut x = from;
        while let Some(p) = tree.parent[x] {
            path.push(p);
            x = p;
        }
        path
    }

    /// For each row of `from`, the row of `to` it joins with, following N-to-1
    /// edges only. Errors if any hop is not N-to-1 in that direction.
    pub fn lookup_rows(&self, from: usize, to: usize) -> Result<Vec<Option<usize>>> {
        let path = self.path(from, to);
        let mut current: Vec<Option<usize>> = (0..self.relations[from].row_count()).map(Some).collect();
        for w in path.windows(2) {
            let (x, y) = (w[0], w[1]);
            let edge = self.edge_between(x, y).expect("adjacent");
            if edge.one_side != Some(y) {
                return Err(Error::NotPushable(format!(
                    "{} is not reachable from {} through N-to-1 edges",
                    self.name(to),
                    self.name(from)
                )));
            }
            let index = KeyIndex::build(&self.relations[y], edge.cols_of(y));
            let reader = KeyReader::new(&self.relations[x], edge.cols_of(x));
            for slot in current.iter_mut() {
                *slot = slot.and_then(|r| reader.get(r)).and_then(|k| index.get(&k));
            }
        }
        Ok(current)
    }

    /// Values of `attr` aligned to the rows of `from`, null where unmatched.
    pub fn aligned_column(&self, from: usize, attr: &AttrRef) -> Result<Vec<Datum>> {
        let (rel, col) = self.resolve(attr)?;
        let rows = self.lookup_rows(from, rel)?;
        let column = &self.relations[rel].columns()[col];
        Ok(rows.iter().map(|r| r.map_or(Datum::Null, |r| column.datum(r))).collect())
    }

    /// Fact rows that join with every other relation (a snowflake's R⋈ rows).
    pub fn rows_in_join(&self, fact: usize) -> Result<Vec<bool>> {
        let mut mask = vec![true; self.relations[fact].row_count()];
        for other in 0..self.len() {
            if other == fact {
                continue;
            }
            for (m, r) in mask.iter_mut().zip(self.lookup_rows(fact, other)?) {
                *m &= r.is_some();
            }
        }
        Ok(mask)
    }

    /// Replaces a relation's column buffer; see [`Relation::swap_column`].
    pub fn swap_column(&mut self, rel: usize, name: &str, values: ColumnData) -> Result<ColumnData> {
        self.relations[rel].swap_column(name, values)
    }

    pub fn add_column(&mut self, rel: usize, column: Column) -> Result<()> {
        self.relations[rel].add_column(column)
    }
}

/// Row lookup by key on the unique side of an edge.
pub(crate) enum KeyIndex {
    Dense { slots: Vec<u32>, null_row: Option<u32> },
    Hash(FxHashMap<Key, u32>),
}

impl KeyIndex {
    pub fn build(rel: &Relation, cols: &[usize]) -> Self {
        let reader = KeyReader::new(rel, cols);
        let n = rel.row_count();
        if reader.is_single() {
            let max = (0..n).filter_map(|r| reader.single(r)).filter(|&c| c != NULL_KEY).max();
            if max.map_or(true, |m| (m as usize) <= 4 * n + 1024) {
                let mut slots = vec![u32::MAX; max.map_or(0, |m| m as usize + 1)];
                let mut null_row = None;
                for r in 0..n {
                    match reader.single(r) {
                        Some(NULL_KEY) => null_row = Some(r as u32),
                        Some(c) => {
                            if slots[c as usize] == u32::MAX {
                                slots[c as usize] = r as u32;
                            }
                        }
                        None => {}
                    }
                }
                return KeyIndex::Dense { slots, null_row };
            }
        }
        let mut map = FxHashMap::default();
        for r in 0..n {
            if let Some(k) = reader.get(r) {
                map.entry(k).or_insert(r as u32);
            }
        }
        KeyIndex::Hash(map)
    }

    #[inline]
    pub fn get(&self, key: &Key) -> Option<usize> {
        match self {
            KeyIndex::Dense { slots, null_row } => {
                let c = key[0];
                if c == NULL_KEY {
                    return null_row.map(|r| r as usize);
                }
                slots
                    .get(c as usize)
                    .copied()
                    .filter(|&r| r != u32::MAX)
                    .map(|r| r as usize)
            }
            KeyIndex::Hash(m) => m.get(key).map(|&r| r as usize),
        }
    }
}
