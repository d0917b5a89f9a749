//! Precomputed image-embedding corpus and its line-delimited file format.
//!
//! ```text
//! {"dim":4,"count":2}
//! {"id":"a","embedding":[0.1,0.2,0.3,0.4],"image_path":"imgs/a.png"}
//! {"id":"b","embedding":[0.0,1.0,0.0,0.0],"label":"a blue car"}
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::norm;
use crate::numerics::Matrix;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dim: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    /// Free text describing the image, shown when there is no file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// `N` image records searched by cosine similarity. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    dim: usize,
    ids: Vec<String>,
    embeddings: Matrix,
    paths: Vec<Option<String>>,
    labels: Vec<Option<String>>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingCorpus {
    pub fn new(
        dim: usize,
        records: Vec<(String, Vec<f64>, Option<String>)>,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(records.len());
        let mut paths = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        let mut index = HashMap::with_capacity(records.len());
        for (i, (id, emb, path)) in records.into_iter().enumerate() {
            if emb.len() != dim {
                return Err(Error::Schema {
                    line: i + 2,
                    message: format!("embedding has {} entries, expected {dim}", emb.len()),
                });
            }
            if emb.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema {
                    line: i + 2,
                    message: "embedding contains a non-finite value".into(),
                });
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Schema {
                    line: i + 2,
                    message: format!("duplicate image id {id:?}"),
                });
            }
            ids.push(id);
            paths.push(path);
            data.extend(emb);
        }
        let embeddings = Matrix::from_vec(ids.len(), dim, data)?;
        let norms = (0..ids.len()).map(|i| norm(embeddings.row(i))).collect();
        Ok(Self {
            dim,
            labels: vec![None; ids.len()],
            ids,
            embeddings,
            paths,
            norms,
            index,
        })
    }

    /// Replaces every record's label.
    pub fn with_labels(mut self, labels: Vec<Option<String>>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} records",
                labels.len(),
                self.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub(crate) fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn image_path(&self, i: usize) -> Option<&str> {
        self.paths[i].as_deref()
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels[i].as_deref()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Stacks the embeddings at `indices` into a `len × dim` matrix.
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.embedding(i));
        }
        Matrix::from_vec(indices.len(), self.dim, data).expect("shape")
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            dim: self.dim,
            count: self.len(),
        })
        .expect("header serializes");
        out.push('\n');
        for i in 0..self.len() {
            let rec = Record {
                id: self.ids[i].clone(),
                embedding: self.embedding(i).to_vec(),
                image_path: self.paths[i].clone(),
                label: self.labels[i].clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Parses the corpus format. Blank lines are ignored; reported line numbers are 1-based.
pub fn parse_corpus(text: &str) -> Result<EmbeddingCorpus> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing metadata record".into(),
    })?;
    let header: Header = serde_json::from_str(htext).map_err(|e| Error::Parse {
        line: hline,
        message: e.to_string(),
    })?;
    let mut ids = Vec::new();
    let mut paths = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut index = HashMap::new();
    let mut last_line = hline;
    for (line, l) in lines {
        last_line = line;
        let rec: Record = serde_json::from_str(l).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.embedding.len() != header.dim {
            return Err(Error::Schema {
                line,
                message: format!(
                    "embedding has {} entries, expected {}",
                    rec.embedding.len(),
                    header.dim
                ),
            });
        }
        if index.insert(rec.id.clone(), ids.len()).is_some() {
            return Err(Error::Schema {
                line,
                message: format!("duplicate image id {:?}", rec.id),
            });
        }
        ids.push(rec.id);
        paths.push(rec.image_path);
        labels.push(rec.label);
        data.extend(rec.embedding);
    }
    if ids.len() != header.count {
        return Err(Error::Schema {
            line: last_line,
            message: format!(
                "metadata declares {} records but {} were found",
                header.count,
                ids.len()
            ),
        });
    }
    let embeddings = Matrix::from_vec(ids.len(), header.dim, data)?;
    let norms = (0..ids.len()).map(|i| norm(embeddings.row(i))).collect();
    Ok(EmbeddingCorpus {
        dim: header.dim,
        ids,
        embeddings,
        paths,
        labels,
        norms,
        index,
    })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<EmbeddingCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}
