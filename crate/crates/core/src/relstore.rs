//! Columnar relations with dictionary-encoded keys and categoricals.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use bitvec::vec::BitVec;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Code reserved for the missing-key row added by outer-join augmentation.
pub const NULL_KEY: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Key,
}

impl ColumnKind {
    pub fn is_coded(self) -> bool {
        !matches!(self, ColumnKind::Numeric)
    }
}

/// A single cell value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Datum {
    Null,
    Num(f64),
    Code(u32),
}

impl Datum {
    pub fn is_null(&self) -> bool {
        matches!(self, Datum::Null)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Datum::Num(v) => Some(v),
            Datum::Code(c) => Some(c as f64),
            Datum::Null => None,
        }
    }
}

impl fmt::Display for Datum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Datum::Null => Ok(()),
            Datum::Num(v) => write!(f, "{v}"),
            Datum::Code(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ColumnData {
    Numeric(Arc<Vec<f64>>),
    Codes(Arc<Vec<u32>>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Codes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_buffer(&self, other: &ColumnData) -> bool {
        match (self, other) {
            (ColumnData::Numeric(a), ColumnData::Numeric(b)) => Arc::ptr_eq(a, b),
            (ColumnData::Codes(a), ColumnData::Codes(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl From<Vec<f64>> for ColumnData {
    fn from(v: Vec<f64>) -> Self {
        ColumnData::Numeric(Arc::new(v))
    }
}

impl From<Vec<u32>> for ColumnData {
    fn from(v: Vec<u32>) -> Self {
        ColumnData::Codes(Arc::new(v))
    }
}

#[derive(Clone, Debug)]
pub struct Column {
    name: String,
    kind: ColumnKind,
    data: ColumnData,
    validity: Option<Arc<BitVec>>,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Numeric,
            data: values.into(),
            validity: None,
        }
    }

    pub fn categorical(name: impl Into<String>, codes: Vec<u32>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Categorical,
            data: codes.into(),
            validity: None,
        }
    }

    pub fn key(name: impl Into<String>, codes: Vec<u32>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Key,
            data: codes.into(),
            validity: None,
        }
    }

    /// Numeric column from optional values; `None` becomes null.
    pub fn numeric_opt(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        let validity: BitVec = values.iter().map(Option::is_some).collect();
        let data = values.into_iter().map(|v| v.unwrap_or(0.0)).collect();
        Column::numeric(name, data).with_validity(validity)
    }

    pub fn coded_opt(name: impl Into<String>, kind: ColumnKind, codes: Vec<Option<u32>>) -> Self {
        assert!(kind.is_coded());
        let validity: BitVec = codes.iter().map(Option::is_some).collect();
        let data = codes.into_iter().map(|v| v.unwrap_or(0)).collect();
        Column {
            name: name.into(),
            kind,
            data: ColumnData::Codes(Arc::new(data)),
            validity: None,
        }
        .with_validity(validity)
    }

    /// Attaches a validity mask. An all-valid mask is dropped.
    pub fn with_validity(mut self, validity: BitVec) -> Self {
        assert_eq!(validity.len(), self.len());
        self.validity = if validity.all() {
            None
        } else {
            Some(Arc::new(validity))
        };
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ColumnKind {
        self.kind
    }

    pub fn data(&self) -> &ColumnData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validity(&self) -> Option<&BitVec> {
        self.validity.as_deref()
    }

    pub fn has_nulls(&self) -> bool {
        self.validity.is_some()
    }

    #[inline]
    pub fn is_valid(&self, row: usize) -> bool {
        match &self.validity {
            None => true,
            Some(v) => v[row],
        }
    }

    pub fn numeric_values(&self) -> Option<&[f64]> {
        match &self.data {
            ColumnData::Numeric(v) => Some(v),
            ColumnData::Codes(_) => None,
        }
    }

    pub fn codes(&self) -> Option<&[u32]> {
        match &self.data {
            ColumnData::Codes(v) => Some(v),
            ColumnData::Numeric(_) => None,
        }
    }

    #[inline]
    pub fn datum(&self, row: usize) -> Datum {
        if !self.is_valid(row) {
            return Datum::Null;
        }
        match &self.data {
            ColumnData::Numeric(v) => Datum::Num(v[row]),
            ColumnData::Codes(v) => Datum::Code(v[row]),
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Rows picked by index, in the given order.
    pub fn take(&self, rows: &[usize]) -> Column {
        let data = match &self.data {
            ColumnData::Numeric(v) => ColumnData::from(rows.iter().map(|&r| v[r]).collect::<Vec<_>>()),
            ColumnData::Codes(v) => ColumnData::from(rows.iter().map(|&r| v[r]).collect::<Vec<_>>()),
        };
        let col = Column {
            name: self.name.clone(),
            kind: self.kind,
            data,
            validity: None,
        };
        match &self.validity {
            None => col,
            Some(v) => col.with_validity(rows.iter().map(|&r| v[r]).collect()),
        }
    }

    /// Column of the same kind built from cells; used by the join operators.
    pub fn from_datums(name: impl Into<String>, kind: ColumnKind, cells: &[Datum]) -> Column {
        let validity: BitVec = cells.iter().map(|d| !d.is_null()).collect();
        let col = if kind.is_coded() {
            let codes = cells
                .iter()
                .map(|d| match d {
                    Datum::Code(c) => *c,
                    _ => 0,
                })
                .collect();
            Column {
                name: name.into(),
                kind,
                data: ColumnData::Codes(Arc::new(codes)),
                validity: None,
            }
        } else {
            let values = cells.iter().map(|d| d.as_f64().unwrap_or(0.0)).collect();
            Column::numeric(name, values)
        };
        col.with_validity(validity)
    }
}

/// Declared column of a CSV-backed relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnDecl {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub nullable: bool,
}

impl ColumnDecl {
    pub fn new(name: impl Into<String>, kind: ColumnKind, nullable: bool) -> Self {
        ColumnDecl {
            name: name.into(),
            kind,
            nullable,
        }
    }
}

/// String dictionary with dense codes in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dictionary {
    values: IndexMap<String, u32>,
}

impl Dictionary {
    pub fn from_values<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut d = Dictionary::default();
        for v in values {
            d.encode(&v.into());
        }
        d
    }

    pub fn encode(&mut self, s: &str) -> u32 {
        if let Some(&c) = self.values.get(s) {
            return c;
        }
        let code = self.values.len() as u32;
        self.values.insert(s.to_string(), code);
        code
    }

    pub fn code(&self, s: &str) -> Option<u32> {
        self.values.get(s).copied()
    }

    pub fn decode(&self, code: u32) -> Option<&str> {
        self.values.get_index(code as usize).map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.values.keys().cloned().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).expect("string map serializes")
    }
}

/// Dictionaries used while loading a dataset. Key columns share one dictionary
/// per attribute name so codes agree across relations; categoricals get one per
/// `relation.column`.
#[derive(Clone, Debug, Default)]
pub struct Dictionaries {
    keys: HashMap<String, Dictionary>,
    categoricals: HashMap<String, Dictionary>,
}

impl Dictionaries {
    pub fn key(&self, attr: &str) -> Option<&Dictionary> {
        self.keys.get(attr)
    }

    pub fn categorical(&self, relation: &str, column: &str) -> Option<&Dictionary> {
        self.categoricals.get(&format!("{relation}.{column}"))
    }

    pub fn lookup(&self, relation: &str, column: &str, kind: ColumnKind) -> Option<&Dictionary> {
        match kind {
            ColumnKind::Key => self.key(column),
            ColumnKind::Categorical => self.categorical(relation, column),
            ColumnKind::Numeric => None,
        }
    }

    pub fn insert_categorical(&mut self, relation: &str, column: &str, dict: Dictionary) {
        self.categoricals.insert(format!("{relation}.{column}"), dict);
    }

    fn entry(&mut self, relation: &str, decl: &ColumnDecl) -> &mut Dictionary {
        match decl.kind {
            ColumnKind::Key => self.keys.entry(decl.name.clone()).or_default(),
            _ => self
                .categoricals
                .entry(format!("{relation}.{}", decl.name))
                .or_default(),
        }
    }

    /// Categorical dictionaries by `relation.column`, sorted by name.
    pub fn categorical_entries(&self) -> Vec<(&str, &Dictionary)> {
        let mut v: Vec<_> = self.categoricals.iter().map(|(k, d)| (k.as_str(), d)).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }
}

#[derive(Clone, Debug)]
pub struct Relation {
    name: String,
    columns: Vec<Column>,
    row_count: usize,
}

impl Relation {
    pub fn new(name: impl Into<String>, columns: Vec<Column>) -> Result<Self> {
        let row_count = columns.first().map_or(0, Column::len);
        Self::with_rows(name, columns, row_count)
    }

    /// Like [`Relation::new`] but allows zero columns with a nonzero row count.
    pub fn with_rows(name: impl Into<String>, columns: Vec<Column>, row_count: usize) -> Result<Self> {
        let name = name.into();
        for (i, c) in columns.iter().enumerate() {
            if c.len() != row_count {
                return Err(Error::LengthMismatch {
                    expected: row_count,
                    got: c.len(),
                });
            }
            if columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::DuplicateColumn(format!("{name}.{}", c.name)));
            }
        }
        Ok(Relation {
            name,
            columns,
            row_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn try_column(&self, name: &str) -> Result<&Column> {
        self.column(name)
            .ok_or_else(|| Error::unknown_column(&self.name, name))
    }

    pub fn add_column(&mut self, column: Column) -> Result<()> {
        if column.len() != self.row_count {
            return Err(Error::LengthMismatch {
                expected: self.row_count,
                got: column.len(),
            });
        }
        if self.column(&column.name).is_some() {
            return Err(Error::DuplicateColumn(format!("{}.{}", self.name, column.name)));
        }
        self.columns.push(column);
        Ok(())
    }

    /// Replaces the value buffer of one column and returns the previous buffer.
    /// Only the column's pointer changes; the validity mask is kept.
    pub fn swap_column(&mut self, name: &str, values: ColumnData) -> Result<ColumnData> {
        let row_count = self.row_count;
        let rel = self.name.clone();
        let col = self
            .columns
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::unknown_column(&rel, name))?;
        if values.len() != row_count {
            return Err(Error::LengthMismatch {
                expected: row_count,
                got: values.len(),
            });
        }
        match (&col.data, &values) {
            (ColumnData::Numeric(_), ColumnData::Numeric(_)) | (ColumnData::Codes(_), ColumnData::Codes(_)) => {}
            _ => {
                return Err(Error::KindMismatch(format!(
                    "cannot swap {rel}.{name} with a buffer of another type"
                )))
            }
        }
        Ok(std::mem::replace(&mut col.data, values))
    }

    /// True when both relations share every column buffer.
    pub fn shares_buffers(&self, other: &Relation) -> bool {
        self.columns.len() == other.columns.len()
            && self
                .columns
                .iter()
                .zip(&other.columns)
                .all(|(a, b)| a.name == b.name && a.data.same_buffer(&b.data))
    }

    pub fn take(&self, rows: &[usize]) -> Relation {
        Relation {
            name: self.name.clone(),
            columns: self.columns.iter().map(|c| c.take(rows)).collect(),
            row_count: rows.len(),
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Relation {
        self.name = name.into();
        self
    }

    /// Appends one row where every column is null.
    pub(crate) fn push_null_row(&mut self, key_columns: &[usize]) {
        for (i, col) in self.columns.iter_mut().enumerate() {
            let n = col.len();
            let mut validity: BitVec = match &col.validity {
                Some(v) => (**v).clone(),
                None => BitVec::repeat(true, n),
            };
            match &mut col.data {
                ColumnData::Numeric(v) => Arc::make_mut(v).push(0.0),
                ColumnData::Codes(v) => {
                    let code = if key_columns.contains(&i) { NULL_KEY } else { 0 };
                    Arc::make_mut(v).push(code);
                }
            }
            // The null-key row keeps its key columns valid so joins can match it.
            validity.push(key_columns.contains(&i));
            col.validity = if validity.all() { None } else { Some(Arc::new(validity)) };
        }
        self.row_count += 1;
    }

    pub(crate) fn column_mut(&mut self, idx: usize) -> &mut Column {
        &mut self.columns[idx]
    }

    /// Reads a headered CSV file.
    pub fn load_csv(
        path: impl AsRef<Path>,
        name: &str,
        decls: &[ColumnDecl],
        dicts: &mut Dictionaries,
    ) -> Result<Relation> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&bytes, name, decls, dicts)
    }

    pub fn parse_csv(bytes: &[u8], name: &str, decls: &[ColumnDecl], dicts: &mut Dictionaries) -> Result<Relation> {
        // The csv reader skips blank lines, which in a single-column file are
        // empty cells.
        let owned;
        let bytes = if decls.len() == 1 {
            owned = quote_blank_lines(bytes);
            &owned[..]
        } else {
            bytes
        };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let header = reader
            .headers()
            .map_err(|e| Error::Header(e.to_string()))?
            .clone();
        let mut positions = Vec::with_capacity(decls.len());
        for d in decls {
            let pos = header
                .iter()
                .position(|h| h == d.name)
                .ok_or_else(|| Error::Header(format!("column `{}` not found in {name}", d.name)))?;
            positions.push(pos);
        }
        if let Some(extra) = header.iter().find(|h| !decls.iter().any(|d| d.name == *h)) {
            return Err(Error::unknown_column(name, extra));
        }

        let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); decls.len()];
        let mut codes: Vec<Vec<u32>> = vec![Vec::new(); decls.len()];
        let mut valid: Vec<BitVec> = vec![BitVec::new(); decls.len()];
        let mut record = csv::StringRecord::new();
        let mut row = 0usize;
        loop {
            match reader.read_record(&mut record) {
                Ok(false) => break,
                Ok(true) => {}
                Err(e) => {
                    return Err(Error::Parse {
                        row: row + 1,
                        column: String::new(),
                        message: e.to_string(),
                    })
                }
            }
            row += 1;
            for (j, d) in decls.iter().enumerate() {
                let cell = record.get(positions[j]).unwrap_or("");
                let parse_err = |message: String| Error::Parse {
                    row,
                    column: d.name.clone(),
                    message,
                };
                if cell.is_empty() {
                    if !d.nullable {
                        return Err(parse_err("empty cell in non-nullable column".into()));
                    }
                    valid[j].push(false);
                    match d.kind {
                        ColumnKind::Numeric => numeric[j].push(0.0),
                        _ => codes[j].push(0),
                    }
                    continue;
                }
                match d.kind {
                    ColumnKind::Numeric => {
                        let v: f64 = cell
                            .trim()
                            .parse()
                            .map_err(|_| parse_err(format!("non-numeric token `{cell}`")))?;
                        if v.is_nan() {
                            if !d.nullable {
                                return Err(parse_err("NaN in non-nullable column".into()));
                            }
                            valid[j].push(false);
                            numeric[j].push(0.0);
                        } else {
                            valid[j].push(true);
                            // Fold -0.0 so equal values group together.
                            numeric[j].push(if v == 0.0 { 0.0 } else { v });
                        }
                    }
                    _ => {
                        let code = dicts.entry(name, d).encode(cell);
                        if code == NULL_KEY {
                            return Err(parse_err("dictionary exhausted".into()));
                        }
                        valid[j].push(true);
                        codes[j].push(code);
                    }
                }
            }
        }

        let columns = decls
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let col = match d.kind {
                    ColumnKind::Numeric => Column::numeric(&d.name, std::mem::take(&mut numeric[j])),
                    kind => Column {
                        name: d.name.clone(),
                        kind,
                        data: ColumnData::from(std::mem::take(&mut codes[j])),
                        validity: None,
                    },
                };
                col.with_validity(std::mem::take(&mut valid[j]))
            })
            .collect();
        Relation::with_rows(name, columns, row)
    }

    /// Writes the relation as CSV, decoding codes through `dicts` when available.
    /// Floats use 17 significant digits.
    pub fn write_csv(&self, path: impl AsRef<Path>, dicts: Option<&Dictionaries>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        self.write_csv_to(&mut out, dicts)?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, out: W, dicts: Option<&Dictionaries>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        let io = |e: csv::Error| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        };
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(io)?;
        let dictionaries: Vec<Option<&Dictionary>> = self
            .columns
            .iter()
            .map(|c| dicts.and_then(|d| d.lookup(&self.name, &c.name, c.kind)))
            .collect();
        let mut cells = Vec::with_capacity(self.columns.len());
        for r in 0..self.row_count {
            cells.clear();
            for (c, dict) in self.columns.iter().zip(&dictionaries) {
                let cell = match c.datum(r) {
                    Datum::Null => String::new(),
                    Datum::Num(v) => format_float(v),
                    Datum::Code(code) => match dict.and_then(|d| d.decode(code)) {
                        Some(s) => s.to_string(),
                        None => code.to_string(),
                    },
                };
                cells.push(cell);
            }
            w.write_record(&cells).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Shortest decimal form that parses back to the same float.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let s = format!("{v:e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
    if (-5..17).contains(&exp) {
        let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
        let negative = v < 0.0;
        let point = exp + 1;
        let body = if point <= 0 {
            format!("0.{}{}", "0".repeat((-point) as usize), digits)
        } else if point as usize >= digits.len() {
            format!("{}{}", digits, "0".repeat(point as usize - digits.len()))
        } else {
            format!("{}.{}", &digits[..point as usize], &digits[point as usize..])
        };
        if negative {
            format!("-{body}")
        } else {
            body
        }
    } else {
        format!("{mantissa}e{exp}")
    }
}

fn quote_blank_lines(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len() + 16);
    let mut in_quotes = false;
    let mut line_start = true;
    let mut header_done = false;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let at_blank = line_start && !in_quotes && (b == b'\n' || (b == b'\r' && bytes.get(i + 1) == Some(&b'\n')));
        if at_blank && header_done {
            out.extend_from_slice(b"\"\"");
        }
        match b {
            b'"' => in_quotes = !in_quotes,
            b'\n' if !in_quotes => {
                header_done = true;
                line_start = true;
                out.push(b);
                i += 1;
                continue;
            }
            _ => {}
        }
        if b != b'\r' {
            line_start = false;
        }
        out.push(b);
        i += 1;
    }
    out
}
