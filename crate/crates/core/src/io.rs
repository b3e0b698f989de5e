//! File formats: headerless-or-headed 0/1 CSV matrices, numeric CSV tables
//! with a `#` provenance comment, and JSON documents carrying a `_meta` block.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    ApmParams, CholeskyCorrelation, Dataset, GapmParams, ItemWeights, KnotGrid, LowerTriangular,
    QMatrix, SieveMonotone,
};

/// Seed and configuration digest recorded in every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

impl Provenance {
    /// Digest of the canonical JSON form of `config`.
    pub fn new<C: Serialize>(seed: u64, config: &C) -> Result<Self> {
        let bytes = serde_json::to_vec(config)?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        Ok(Provenance {
            seed,
            config_digest: hex,
        })
    }

    fn comment(&self) -> String {
        format!(
            "# seed={} config_digest={}\n",
            self.seed, self.config_digest
        )
    }
}

fn parse_binary_rows(path: &Path) -> Result<Vec<Vec<u8>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<u8>, _> =
            record.iter().map(|f| f.parse::<u8>()).collect();
        match parsed {
            Ok(r) if r.iter().all(|&v| v <= 1) => rows.push(r),
            Ok(_) => {
                return Err(Error::Parse(format!(
                    "{}: line {}: entries must be 0 or 1",
                    path.display(),
                    line + 1
                )));
            }
            // a non-numeric first line is a header
            Err(_) if line == 0 => {}
            Err(e) => {
                return Err(Error::Parse(format!(
                    "{}: line {}: {e}",
                    path.display(),
                    line + 1
                )))
            }
        }
    }
    Ok(rows)
}

/// Reads a response matrix: one row per individual, 0/1 entries.
pub fn read_responses(path: &Path) -> Result<Dataset> {
    let rows = parse_binary_rows(path)?;
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no responses", path.display())));
    }
    Dataset::from_rows(rows)
}

/// Reads a confirmatory Q-matrix: one row per item.
pub fn read_q(path: &Path) -> Result<QMatrix> {
    QMatrix::new(parse_binary_rows(path)?)
}

fn write_with_comment(
    path: &Path,
    prov: &Provenance,
    header: Option<&[String]>,
    body: &str,
) -> Result<()> {
    let mut out = prov.comment();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    out.push_str(body);
    fs::write(path, out)?;
    Ok(())
}

/// Writes integer rows.
pub fn write_binary(
    path: &Path,
    rows: impl Iterator<Item = Vec<u8>>,
    prov: &Provenance,
) -> Result<()> {
    let mut body = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(u8::to_string).collect();
        body.push_str(&line.join(","));
        body.push('\n');
    }
    write_with_comment(path, prov, None, &body)
}

/// Writes a numeric table with a header line. Values use the shortest
/// representation that reads back to the same `f64`.
pub fn write_table(
    path: &Path,
    header: &[String],
    rows: &[Vec<f64>],
    prov: &Provenance,
) -> Result<()> {
    let mut body = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(f64::to_string).collect();
        body.push_str(&line.join(","));
        body.push('\n');
    }
    write_with_comment(path, prov, Some(header), &body)
}

/// Reads a numeric table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    reader
        .records()
        .enumerate()
        .map(|(line, rec)| {
            rec?.iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| {
                        Error::Parse(format!("{}: row {}: {e}", path.display(), line + 1))
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Document<'a, T> {
    #[serde(rename = "_meta")]
    meta: std::borrow::Cow<'a, Provenance>,
    #[serde(flatten)]
    body: T,
}

/// Serializes `body` with a leading `_meta` block.
pub fn to_json<T: Serialize>(body: &T, prov: &Provenance) -> Result<String> {
    let doc = Document {
        meta: std::borrow::Cow::Borrowed(prov),
        body,
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, body: &T, prov: &Provenance) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_json(body, prov)?.as_bytes())?;
    Ok(())
}

/// Reads a document written by [`write_json`], returning the body and its provenance.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Provenance)> {
    let text = fs::read_to_string(path)?;
    let doc: Document<'static, T> = serde_json::from_str(&text)?;
    Ok((doc.body, doc.meta.into_owned()))
}

/// On-disk layout of fitted parameters. Sieve increments are listed per
/// `(item, attribute)`, `null` where the attribute is not measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ParamsFile {
    Gapm {
        q: Vec<Vec<u8>>,
        breakpoints: Vec<f64>,
        weights: Vec<Vec<f64>>,
        theta: Vec<Vec<Option<Vec<f64>>>>,
        chol: Vec<Vec<f64>>,
        correlation: Vec<Vec<f64>>,
    },
    Apm {
        q: Vec<Vec<u8>>,
        delta: Vec<Vec<f64>>,
        mean: Vec<f64>,
        cov_chol: Vec<Vec<f64>>,
        covariance: Vec<Vec<f64>>,
    },
}

/// A parameter bundle of either model together with its design.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedParams {
    Gapm(QMatrix, GapmParams),
    Apm(QMatrix, ApmParams),
}

fn square(v: &[f64], k: usize) -> Vec<Vec<f64>> {
    v.chunks(k.max(1)).map(<[f64]>::to_vec).collect()
}

impl ParamsFile {
    pub fn from_gapm(q: &QMatrix, p: &GapmParams) -> Result<Self> {
        let grid = p
            .grid()
            .ok_or_else(|| Error::Shape("parameter bundle has no sieves".into()))?;
        let k = q.attributes();
        Ok(ParamsFile::Gapm {
            q: q.rows(),
            breakpoints: grid.breakpoints().to_vec(),
            weights: p.weights.iter().map(|w| w.alpha.clone()).collect(),
            theta: p
                .sieves
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|s| s.as_ref().map(|s| s.theta().to_vec()))
                        .collect()
                })
                .collect(),
            chol: p.chol.factor().clone().into(),
            correlation: square(&p.chol.correlation(), k),
        })
    }

    pub fn from_apm(q: &QMatrix, p: &ApmParams) -> Self {
        ParamsFile::Apm {
            q: q.rows(),
            delta: p.delta.clone(),
            mean: p.mean.clone(),
            cov_chol: p.cov_chol.clone().into(),
            covariance: square(&p.cov_chol.gram(), q.attributes()),
        }
    }

    /// Rebuilds the bundle and checks every constraint.
    pub fn load(self) -> Result<LoadedParams> {
        match self {
            ParamsFile::Gapm {
                q,
                breakpoints,
                weights,
                theta,
                chol,
                ..
            } => {
                let q = if q.iter().flatten().all(|&v| v == 1) {
                    QMatrix::exploratory(q.len(), q.first().map_or(0, Vec::len))
                } else {
                    QMatrix::new(q)?
                };
                let grid = Arc::new(KnotGrid::new(breakpoints)?);
                let sieves = theta
                    .into_iter()
                    .map(|row| {
                        row.into_iter()
                            .map(|t| t.map(|t| SieveMonotone::new(grid.clone(), t)).transpose())
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let params = GapmParams {
                    weights: weights
                        .into_iter()
                        .map(|alpha| ItemWeights { alpha })
                        .collect(),
                    sieves,
                    chol: CholeskyCorrelation::new(LowerTriangular::try_from(chol)?)?,
                };
                params.validate(&q)?;
                Ok(LoadedParams::Gapm(q, params))
            }
            ParamsFile::Apm {
                q,
                delta,
                mean,
                cov_chol,
                ..
            } => {
                let q = if q.iter().flatten().all(|&v| v == 1) {
                    QMatrix::exploratory(q.len(), q.first().map_or(0, Vec::len))
                } else {
                    QMatrix::new(q)?
                };
                let params = ApmParams {
                    delta,
                    mean,
                    cov_chol: LowerTriangular::try_from(cov_chol)?,
                };
                params.validate(&q)?;
                Ok(LoadedParams::Apm(q, params))
            }
        }
    }
}
