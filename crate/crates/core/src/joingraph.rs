//! Join graphs: validation, rooting, clusters and identity edges.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relstore::{ColumnKind, Relation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cardinality {
    #[serde(rename = "N_to_1", alias = "n_to_1", alias = "many_to_one")]
    NTo1,
    #[serde(rename = "one_to_N", alias = "1_to_N", alias = "one_to_many")]
    OneToN,
    #[serde(rename = "N_to_N", alias = "n_to_n", alias = "many_to_many")]
    NToN,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinEdge {
    pub left: String,
    pub right: String,
    pub keys: Vec<String>,
    pub cardinality: Cardinality,
    /// Left outer join: every `left` row survives, unmatched ones pair with nulls.
    #[serde(default)]
    pub outer: bool,
    /// Set at load when some N-side key has no partner.
    #[serde(skip)]
    pub missing_keys: bool,
}

impl JoinEdge {
    pub fn new(left: &str, right: &str, keys: &[&str], cardinality: Cardinality) -> Self {
        JoinEdge {
            left: left.to_string(),
            right: right.to_string(),
            keys: keys.iter().map(|k| k.to_string()).collect(),
            cardinality,
            outer: false,
            missing_keys: false,
        }
    }

    pub fn outer(mut self) -> Self {
        self.outer = true;
        self
    }

    /// The relation on the "1" side, if any.
    pub fn one_side(&self) -> Option<&str> {
        match self.cardinality {
            Cardinality::NTo1 => Some(&self.right),
            Cardinality::OneToN => Some(&self.left),
            Cardinality::NToN => None,
        }
    }

    pub fn other(&self, rel: &str) -> &str {
        if self.left == rel {
            &self.right
        } else {
            &self.left
        }
    }

    pub fn touches(&self, rel: &str) -> bool {
        self.left == rel || self.right == rel
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<JoinEdge>,
    pub target_relation: String,
    #[serde(default)]
    pub fact_relation: Option<String>,
}

impl JoinGraph {
    pub fn new(nodes: &[&str], edges: Vec<JoinEdge>, target_relation: &str) -> Self {
        JoinGraph {
            nodes: nodes.iter().map(|n| n.to_string()).collect(),
            edges,
            target_relation: target_relation.to_string(),
            fact_relation: None,
        }
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    fn index_or_err(&self, name: &str) -> Result<usize> {
        self.node_index(name)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    /// Neighbours of every node, sorted by name, with the connecting edge index.
    pub(crate) fn adjacency(&self) -> Result<Vec<Vec<(usize, usize)>>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            let a = self.index_or_err(&edge.left)?;
            let b = self.index_or_err(&edge.right)?;
            adj[a].push((b, e));
            adj[b].push((a, e));
        }
        for list in &mut adj {
            list.sort_by(|x, y| self.nodes[x.0].cmp(&self.nodes[y.0]).then(x.1.cmp(&y.1)));
        }
        Ok(adj)
    }

    /// Structural checks: known names, connected, acyclic.
    pub fn validate_structure(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n) {
                return Err(Error::Graph(format!("relation `{n}` declared twice")));
            }
        }
        if self.nodes.is_empty() {
            return Err(Error::Graph("no relations".into()));
        }
        self.index_or_err(&self.target_relation)?;
        if let Some(f) = &self.fact_relation {
            self.index_or_err(f)?;
        }
        for e in &self.edges {
            if e.left == e.right {
                return Err(Error::Cycle(vec![e.left.clone(), e.right.clone()]));
            }
            if e.keys.is_empty() {
                return Err(Error::Graph(format!("edge {} - {} has no join keys", e.left, e.right)));
            }
        }
        let adj = self.adjacency()?;

        // Union-find style scan: an edge closing a loop yields the cycle path.
        let n = self.nodes.len();
        let mut forest: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut comp: Vec<usize> = (0..n).collect();
        fn find(comp: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while comp[r] != r {
                r = comp[r];
            }
            let mut y = x;
            while comp[y] != r {
                let next = comp[y];
                comp[y] = r;
                y = next;
            }
            r
        }
        for e in &self.edges {
            let a = self.index_or_err(&e.left)?;
            let b = self.index_or_err(&e.right)?;
            let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
            if ra == rb {
                let mut cycle: Vec<String> = path_in_forest(&forest, a, b)
                    .into_iter()
                    .map(|i| self.nodes[i].clone())
                    .collect();
                cycle.push(self.nodes[a].clone());
                return Err(Error::Cycle(cycle));
            }
            comp[ra] = rb;
            forest[a].push(b);
            forest[b].push(a);
        }

        let mut component = vec![usize::MAX; n];
        let mut groups: Vec<Vec<String>> = Vec::new();
        for start in 0..n {
            if component[start] != usize::MAX {
                continue;
            }
            let id = groups.len();
            let mut members = Vec::new();
            let mut queue = VecDeque::from([start]);
            component[start] = id;
            while let Some(x) = queue.pop_front() {
                members.push(self.nodes[x].clone());
                for &(y, _) in &adj[x] {
                    if component[y] == usize::MAX {
                        component[y] = id;
                        queue.push_back(y);
                    }
                }
            }
            members.sort();
            groups.push(members);
        }
        if groups.len() > 1 {
            return Err(Error::Disconnected(groups));
        }
        Ok(())
    }

    /// Full validation against relation schemas: join keys must be key columns on both sides.
    pub fn validate(&self, relations: &[Relation]) -> Result<()> {
        self.validate_structure()?;
        let by_name: HashMap<&str, &Relation> = relations.iter().map(|r| (r.name(), r)).collect();
        for n in &self.nodes {
            if !by_name.contains_key(n.as_str()) {
                return Err(Error::UnknownRelation(n.clone()));
            }
        }
        for e in &self.edges {
            for side in [&e.left, &e.right] {
                let rel = by_name[side.as_str()];
                for k in &e.keys {
                    let col = rel.try_column(k)?;
                    if col.kind() != ColumnKind::Key {
                        return Err(Error::KindMismatch(format!(
                            "join key {side}.{k} is {:?}, expected key",
                            col.kind()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn root_at(&self, root: &str) -> Result<RootedTree> {
        let r = self.index_or_err(root)?;
        let adj = self.adjacency()?;
        Ok(RootedTree::build(&self.nodes, &adj, r))
    }

    /// Maximal sets of relations reachable from a candidate fact through N-to-1 edges.
    pub fn compute_clusters(&self) -> Result<Vec<Cluster>> {
        let adj = self.adjacency()?;
        let n = self.nodes.len();
        let mut reach: Vec<BTreeSet<usize>> = Vec::with_capacity(n);
        for f in 0..n {
            let mut members = BTreeSet::from([f]);
            let mut queue = VecDeque::from([f]);
            while let Some(x) = queue.pop_front() {
                for &(y, e) in &adj[x] {
                    let edge = &self.edges[e];
                    if edge.one_side() == Some(self.nodes[y].as_str()) && members.insert(y) {
                        queue.push_back(y);
                    }
                }
            }
            reach.push(members);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.nodes[a].cmp(&self.nodes[b]));
        let mut clusters: Vec<Cluster> = Vec::new();
        let mut kept: Vec<&BTreeSet<usize>> = Vec::new();
        for &f in &order {
            let set = &reach[f];
            let dominated = reach
                .iter()
                .enumerate()
                .any(|(g, other)| g != f && set.is_subset(other) && (set.len() < other.len() || self.nodes[g] < self.nodes[f]));
            if dominated || kept.iter().any(|k| *k == set) {
                continue;
            }
            kept.push(set);
            clusters.push(Cluster {
                fact: self.nodes[f].clone(),
                members: set.iter().map(|&i| self.nodes[i].clone()).collect(),
            });
        }
        Ok(clusters)
    }

    /// Directed child-to-parent edges of `tree` whose messages are the one element:
    /// the whole sender subtree is unannotated, free of the target, and joins
    /// from its "1" side with complete keys.
    pub fn identity_paths(&self, tree: &RootedTree, target_relation: &str) -> Result<BTreeSet<(String, String)>> {
        let target = self.index_or_err(target_relation)?;
        let adj = self.adjacency()?;
        let mut identity = vec![false; self.nodes.len()];
        for &x in tree.order.iter().rev() {
            let Some(p) = tree.parent[x] else { continue };
            let edge = adj[x]
                .iter()
                .find(|&&(y, _)| y == p)
                .map(|&(_, e)| &self.edges[e])
                .expect("tree edge exists");
            identity[x] = x != target
                && edge.one_side() == Some(self.nodes[x].as_str())
                && !edge.missing_keys
                && !edge.outer
                && tree.children[x].iter().all(|&c| identity[c]);
        }
        Ok((0..self.nodes.len())
            .filter(|&x| identity[x])
            .map(|x| (self.nodes[x].clone(), self.nodes[tree.parent[x].unwrap()].clone()))
            .collect())
    }
}

fn path_in_forest(forest: &[Vec<usize>], from: usize, to: usize) -> Vec<usize> {
    let mut prev = vec![usize::MAX; forest.len()];
    prev[from] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(x) = queue.pop_front() {
        if x == to {
            break;
        }
        for &y in &forest[x] {
            if prev[y] == usize::MAX {
                prev[y] = x;
                queue.push_back(y);
            }
        }
    }
    let mut path = vec![to];
    let mut x = to;
    while x != from {
        x = prev[x];
        path.push(x);
    }
    path.reverse();
    path
}

#[derive(Clone, Debug, PartialEq)]
pub struct RootedTree {
    pub names: Vec<String>,
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    /// Breadth-first order from the root.
    pub order: Vec<usize>,
}

impl RootedTree {
    pub(crate) fn build(names: &[String], adj: &[Vec<(usize, usize)>], root: usize) -> Self {
        let n = names.len();
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(x) = queue.pop_front() {
            order.push(x);
            for &(y, _) in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    parent[y] = Some(x);
                    children[x].push(y);
                    queue.push_back(y);
                }
            }
        }
        RootedTree {
            names: names.to_vec(),
            root,
            parent,
            children,
            order,
        }
    }

    pub fn root_name(&self) -> &str {
        &self.names[self.root]
    }

    pub fn parent_of(&self, name: &str) -> Option<&str> {
        let i = self.names.iter().position(|n| n == name)?;
        self.parent[i].map(|p| self.names[p].as_str())
    }

    /// Parent map by name, for comparisons.
    pub fn parent_map(&self) -> std::collections::BTreeMap<String, String> {
        (0..self.names.len())
            .filter_map(|i| self.parent[i].map(|p| (self.names[i].clone(), self.names[p].clone())))
            .collect()
    }

    /// All relations in the subtree rooted at `x`.
    pub fn subtree(&self, x: usize) -> Vec<usize> {
        let mut out = vec![x];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.children[out[i]]);
            i += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub fact: String,
    pub members: BTreeSet<String>,
}

impl Cluster {
    pub fn contains(&self, rel: &str) -> bool {
        self.members.contains(rel)
    }
}
