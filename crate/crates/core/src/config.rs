//! JSON dataset descriptions: CSV-backed relations plus their join graph.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::database::{AttrRef, Database};
use crate::error::{Error, Result};
use crate::joingraph::{JoinEdge, JoinGraph};
use crate::relstore::{ColumnDecl, Dictionaries, Relation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationConfig {
    pub name: String,
    /// CSV path, relative to the config file.
    pub path: PathBuf,
    pub columns: Vec<ColumnDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub relation: String,
    pub column: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub relations: Vec<RelationConfig>,
    pub joins: Vec<JoinEdge>,
    pub target: TargetConfig,
    /// `relation.column` names.
    pub features: Vec<String>,
    /// Relation whose rows receive predictions.
    #[serde(default)]
    pub fact: Option<String>,
}

/// A loaded dataset ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub db: Database,
    pub target: AttrRef,
    pub features: Vec<AttrRef>,
}

impl DatasetConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn graph(&self) -> JoinGraph {
        let names: Vec<&str> = self.relations.iter().map(|r| r.name.as_str()).collect();
        let mut g = JoinGraph::new(&names, self.joins.clone(), &self.target.relation);
        g.fact_relation = self.fact.clone();
        g
    }

    pub fn target(&self) -> AttrRef {
        AttrRef::new(&self.target.relation, &self.target.column)
    }

    pub fn feature_refs(&self) -> Result<Vec<AttrRef>> {
        self.features.iter().map(|f| AttrRef::parse(f)).collect()
    }

    /// Reads every CSV (paths relative to `base_dir`) and validates the result.
    pub fn load(&self, base_dir: &Path) -> Result<Dataset> {
        let graph = self.graph();
        graph.validate_structure()?;
        let target = self.target();
        let features = self.feature_refs()?;
        if features.contains(&target) {
            return Err(Error::Param(format!("target {target} is also a feature")));
        }
        let mut dicts = Dictionaries::default();
        let mut relations = Vec::with_capacity(self.relations.len());
        for r in &self.relations {
            relations.push(Relation::load_csv(base_dir.join(&r.path), &r.name, &r.columns, &mut dicts)?);
        }
        let db = Database::with_dictionaries(relations, graph, dicts)?;
        db.resolve(&target)?;
        for f in &features {
            db.resolve(f)?;
        }
        Ok(Dataset { db, target, features })
    }
}

/// Parses and loads a config file; CSV paths resolve against its directory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config = DatasetConfig::parse(&text)?;
    config.load(path.parent().unwrap_or_else(|| Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    const CONFIG: &str = r#"{
        "relations": [
            {"name": "F", "path": "f.csv", "columns": [
                {"name": "k", "kind": "key"}, {"name": "y", "kind": "numeric"}]},
            {"name": "D", "path": "d.csv", "columns": [
                {"name": "k", "kind": "key"}, {"name": "color", "kind": "categorical", "nullable": true}]}
        ],
        "joins": [{"left": "F", "right": "D", "keys": ["k"], "cardinality": "N_to_1"}],
        "target": {"relation": "F", "column": "y"},
        "features": ["D.color"]
    }"#;

    #[test]
    fn loads_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "f.csv", "k,y\na,1\nb,2\na,3\n");
        write(dir.path(), "d.csv", "k,color\na,red\nb,\n");
        write(dir.path(), "ds.json", CONFIG);
        let ds = load_dataset(dir.path().join("ds.json")).unwrap();
        assert_eq!(ds.db.relation(0).row_count(), 3);
        assert_eq!(ds.features, vec![AttrRef::new("D", "color")]);
        assert!(ds.db.dictionaries().categorical("D", "color").is_some());
    }

    #[test]
    fn rejects_unknown_fields_and_cycles() {
        let bad = CONFIG.replace("\"features\"", "\"featurez\"");
        assert!(DatasetConfig::parse(&bad).is_err());
        let mut cfg = DatasetConfig::parse(CONFIG).unwrap();
        cfg.joins.push(JoinEdge::new("D", "F", &["k"], crate::joingraph::Cardinality::OneToN));
        let err = cfg.load(Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(err, Error::Cycle(_) | Error::Graph(_)), "{err}");
    }
}
