use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Cancer,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Cancer];

    /// Class index used by the classifier: Normal 0, Cancer 1.
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Cancer => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Cancer),
            _ => Err(Error::Data(format!("class index {i} is not 0 or 1"))),
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" | "hem" => Ok(Label::Normal),
            "cancer" | "1" | "all" => Ok(Label::Cancer),
            other => Err(Error::Data(format!("unknown label '{other}'"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub subject_id: String,
    pub label: Label,
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub path: String,
    pub is_test: bool,
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    subject_id: String,
    label: String,
    path: String,
    #[serde(default)]
    is_test: String,
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" => Ok(false),
        "1" | "true" | "yes" => Ok(true),
        other => Err(Error::Data(format!(
            "is_test value '{other}' is not a boolean"
        ))),
    }
}

/// Image records with subject ids and labels. Header:
/// `subject_id,label,path,is_test`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Every subject has a single label and no path repeats.
    pub fn validate(&self) -> Result<()> {
        let mut labels: BTreeMap<&str, Label> = BTreeMap::new();
        let mut paths = HashSet::new();
        for r in &self.records {
            if let Some(&l) = labels.get(r.subject_id.as_str()) {
                if l != r.label {
                    return Err(Error::Data(format!(
                        "subject {} has both {l} and {} images",
                        r.subject_id, r.label
                    )));
                }
            }
            labels.insert(&r.subject_id, r.label);
            if !paths.insert(&r.path) {
                return Err(Error::Data(format!("duplicate image path {}", r.path)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = rd.headers()?.clone();
        for need in ["subject_id", "label", "path"] {
            if !headers.iter().any(|h| h == need) {
                return Err(Error::Data(format!(
                    "{}: missing column '{need}'",
                    path.display()
                )));
            }
        }
        let mut records = Vec::new();
        for row in rd.deserialize() {
            let row: Row = row?;
            records.push(Record {
                subject_id: row.subject_id,
                label: row.label.parse()?,
                path: row.path,
                is_test: parse_bool(&row.is_test)?,
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(records, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path)?;
        for r in &self.records {
            wr.serialize(Row {
                subject_id: r.subject_id.clone(),
                label: r.label.to_string(),
                path: r.path.clone(),
                is_test: r.is_test.to_string(),
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn resolve(&self, r: &Record) -> PathBuf {
        let p = Path::new(&r.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Subject ids with their label and image count, sorted by id.
    pub fn subjects(&self, include_test: bool) -> BTreeMap<String, (Label, usize)> {
        let mut out: BTreeMap<String, (Label, usize)> = BTreeMap::new();
        for r in self.records.iter().filter(|r| include_test || !r.is_test) {
            out.entry(r.subject_id.clone()).or_insert((r.label, 0)).1 += 1;
        }
        out
    }

    pub fn test_records(&self) -> Vec<&Record> {
        self.records.iter().filter(|r| r.is_test).collect()
    }
}
