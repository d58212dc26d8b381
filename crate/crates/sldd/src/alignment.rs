//! Post-hoc alignment of learned features with annotated attributes: for
//! each (attribute, feature) pair, the mean feature difference between
//! attribute-positive and attribute-negative examples, normalized by the
//! feature's full column range. Scores land in [−1, 1]; entries above a
//! threshold make up the alignment report.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, SlddError};
use crate::tensor::FeatureMatrix;

/// Annotation confidence, mirroring the usual 0–3 certainty coding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Certainty {
    Absent = 0,
    Guessing = 1,
    Probably = 2,
    Definitely = 3,
}

impl Certainty {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Certainty::Absent),
            1 => Ok(Certainty::Guessing),
            2 => Ok(Certainty::Probably),
            3 => Ok(Certainty::Definitely),
            other => Err(SlddError::Config(format!(
                "certainty code must be 0..=3, got {other}"
            ))),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Per-(example, attribute) certainty labels. Every example covers the same
/// attribute set; pairs missing from an imported file default to absent.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    certainties: Array2<u8>,
    names: Vec<String>,
}

impl AttributeTable {
    pub fn new(certainties: Array2<u8>, names: Vec<String>) -> Result<Self> {
        if names.len() != certainties.ncols() {
            return Err(SlddError::DimensionMismatch {
                context: "attribute table".into(),
                expected: format!("{} names", certainties.ncols()),
                got: format!("{}", names.len()),
            });
        }
        if let Some(((i, a), &code)) = certainties.indexed_iter().find(|(_, &c)| c > 3) {
            return Err(SlddError::Config(format!(
                "certainty code {code} at example {i}, attribute {a} out of range"
            )));
        }
        Ok(AttributeTable { certainties, names })
    }

    pub fn num_examples(&self) -> usize {
        self.certainties.nrows()
    }

    pub fn num_attributes(&self) -> usize {
        self.certainties.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn certainty(&self, example: usize, attribute: usize) -> Certainty {
        Certainty::from_code(self.certainties[(example, attribute)]).expect("validated")
    }

    /// Reads `example_id,attribute_id,certainty` rows (header optional via
    /// the usual CSV header line). Unlisted pairs stay absent.
    pub fn from_csv(path: &Path, num_examples: usize, names: Vec<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| SlddError::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        let mut certainties = Array2::zeros((num_examples, names.len()));
        for record in reader.records() {
            let record = record.map_err(|e| SlddError::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            let parse = |idx: usize| -> Result<usize> {
                record
                    .get(idx)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| SlddError::Format {
                        path: path.display().to_string(),
                        reason: format!("bad field {idx} in {record:?}"),
                    })
            };
            let example = parse(0)?;
            let attribute = parse(1)?;
            let code = parse(2)? as u8;
            if example >= num_examples || attribute >= names.len() {
                return Err(SlddError::Format {
                    path: path.display().to_string(),
                    reason: format!("index ({example}, {attribute}) out of range"),
                });
            }
            Certainty::from_code(code)?;
            certainties[(example, attribute)] = code;
        }
        AttributeTable::new(certainties, names)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        use std::io::Write;
        writeln!(out, "example_id,attribute_id,certainty")?;
        for ((i, a), &code) in self.certainties.indexed_iter() {
            if code != 0 {
                writeln!(out, "{i},{a},{code}")?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// A×F alignment score matrix with validity flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub values: Vec<Vec<f64>>,
    /// False when the attribute had no positive or no negative examples;
    /// its row is zero and excluded from reports.
    pub attribute_ok: Vec<bool>,
    /// Features whose column range is zero; their scores are zero.
    pub constant_feature: Vec<bool>,
    pub attribute_names: Vec<String>,
}

/// Computes the score matrix. Positives are examples annotated probably or
/// definitely, negatives are absent, guessing is excluded from both. The
/// normalizing range is the full column range of the given matrix.
pub fn alignment_scores(feats: &FeatureMatrix, table: &AttributeTable) -> Result<AlignmentScores> {
    let n = feats.num_examples();
    if table.num_examples() != n {
        return Err(SlddError::DimensionMismatch {
            context: "alignment_scores".into(),
            expected: format!("{n} examples"),
            got: format!("{}", table.num_examples()),
        });
    }
    let num_features = feats.num_features();
    let num_attributes = table.num_attributes();

    let mut ranges = Vec::with_capacity(num_features);
    let mut constant_feature = Vec::with_capacity(num_features);
    for col in feats.values().columns() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let range = max - min;
        constant_feature.push(range == 0.0);
        ranges.push(range);
    }

    let mut values = vec![vec![0.0; num_features]; num_attributes];
    let mut attribute_ok = vec![false; num_attributes];
    for a in 0..num_attributes {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for i in 0..n {
            match table.certainty(i, a) {
                Certainty::Probably | Certainty::Definitely => positives.push(i),
                Certainty::Absent => negatives.push(i),
                Certainty::Guessing => {}
            }
        }
        if positives.is_empty() || negatives.is_empty() {
            continue; // row stays zero and flagged
        }
        attribute_ok[a] = true;
        for j in 0..num_features {
            if constant_feature[j] {
                continue;
            }
            let col = feats.values().column(j);
            let mean_pos: f64 =
                positives.iter().map(|&i| col[i]).sum::<f64>() / positives.len() as f64;
            let mean_neg: f64 =
                negatives.iter().map(|&i| col[i]).sum::<f64>() / negatives.len() as f64;
            values[a][j] = (mean_pos - mean_neg) / ranges[j];
        }
    }

    Ok(AlignmentScores {
        values,
        attribute_ok,
        constant_feature,
        attribute_names: table.names().to_vec(),
    })
}

/// One reported (attribute, feature) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentHit {
    pub attribute: usize,
    pub attribute_name: String,
    pub feature: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub threshold: f64,
    pub hits: Vec<AlignmentHit>,
}

/// Lists all valid (attribute, feature) pairs with score strictly above the
/// threshold, sorted by descending score.
pub fn alignment_report(scores: &AlignmentScores, threshold: f64) -> AlignmentReport {
    let mut hits = Vec::new();
    for (a, row) in scores.values.iter().enumerate() {
        if !scores.attribute_ok[a] {
            continue;
        }
        for (j, &score) in row.iter().enumerate() {
            if score > threshold {
                hits.push(AlignmentHit {
                    attribute: a,
                    attribute_name: scores.attribute_names[a].clone(),
                    feature: j,
                    score,
                });
            }
        }
    }
    hits.sort_by(|x, y| {
        y.score
            .partial_cmp(&x.score)
            .expect("scores are finite")
            .then(x.attribute.cmp(&y.attribute))
            .then(x.feature.cmp(&y.feature))
    });
    AlignmentReport { threshold, hits }
}

pub fn report_to_csv(report: &AlignmentReport, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "attribute_id,attribute_name,feature,score")?;
    for hit in &report.hits {
        writeln!(
            out,
            "{},{},{},{}",
            hit.attribute, hit.attribute_name, hit.feature, hit.score
        )?;
    }
    out.flush()?;
    Ok(())
}
