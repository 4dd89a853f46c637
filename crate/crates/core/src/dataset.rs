use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Feature rows with dense class indices `0..n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Label {
                label: bad,
                classes: n_classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Number of rows per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-class attribute vectors, one row per class id.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTable {
    pub class_ids: Vec<String>,
    pub vectors: Tensor,
}

impl SemanticTable {
    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row_of(&self, class_id: &str) -> Option<&[f64]> {
        self.class_ids
            .iter()
            .position(|c| c == class_id)
            .map(|i| self.vectors.row(i))
    }

    /// Rows for `ids`, in that order.
    pub fn gather(&self, ids: &[String]) -> Result<Tensor> {
        let rows = ids
            .iter()
            .map(|id| {
                self.row_of(id)
                    .ok_or_else(|| Error::Coverage(format!("no semantic vector for class `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.width()]));
        }
        Tensor::from_rows(&rows)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class_id");
        for j in 1..=self.width() {
            out.push_str(&format!("\ta_{j}"));
        }
        out.push('\n');
        for (i, id) in self.class_ids.iter().enumerate() {
            out.push_str(id);
            for v in self.vectors.row(i) {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parse `class_id<TAB>a_1 … a_d` rows; a leading `class_id` header row is skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut class_ids = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || (i == 0 && line.starts_with("class_id")) {
                continue;
            }
            let mut cols = line.split('\t');
            let id = cols.next().unwrap_or_default().to_string();
            let vals = cols
                .map(|c| {
                    c.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("bad number `{c}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != vals.len() {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected {} attributes, found {}", first.len(), vals.len()),
                    });
                }
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "non-finite attribute".into(),
                });
            }
            class_ids.push(id);
            rows.push(vals);
        }
        let vectors = if rows.is_empty() {
            Tensor::zeros(&[0, 0])
        } else {
            Tensor::from_rows(&rows)?
        };
        Ok(SemanticTable { class_ids, vectors })
    }
}
