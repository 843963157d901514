//! Node CSV / edge list loading and the on-disk dataset bundle
//! (`nodes.csv`, `edges.txt`, `meta.json`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphDataset, Masks};
use crate::engine::Matrix;
use crate::{Error, Result};

/// Column names in a node CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSchema {
    /// Feature columns in order; `None` takes every column that is not the
    /// sensitive, label or split column.
    pub features: Option<Vec<String>>,
    pub sensitive: String,
    pub label: String,
    /// Optional column with `train` / `val` / `test` / empty entries.
    pub split: Option<String>,
    /// Feature column that duplicates the sensitive attribute, if any.
    pub sensitive_feature: Option<String>,
}

impl Default for NodeSchema {
    fn default() -> Self {
        Self {
            features: None,
            sensitive: "sensitive".into(),
            label: "label".into(),
            split: Some("split".into()),
            sensitive_feature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub sensitive_column_index: Option<usize>,
    pub split_seed: Option<u64>,
}

fn parse_binary(raw: &str, what: &str, file: &Path, line: usize) -> Result<u8> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(Error::Validation(format!(
            "{}:{line}: {what} value `{raw}` is not 0 or 1",
            file.display()
        ))),
    }
}

/// Loads a node CSV (with header) and a whitespace-separated edge list of
/// 0-based node ids. Blank lines and lines starting with `#` are skipped.
pub fn load_dataset(node_file: &Path, edge_file: &Path, schema: &NodeSchema) -> Result<GraphDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(node_file)
        .map_err(|e| csv_error(node_file, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(node_file, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let s_col = col(&schema.sensitive)?;
    let y_col = col(&schema.label)?;
    let split_col = schema
        .split
        .as_deref()
        .and_then(|name| header.iter().position(|h| h == name));
    let feature_names: Vec<String> = match &schema.features {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != s_col && j != y_col && Some(j) != split_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let feature_cols = feature_names.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;
    let sensitive_column_index = match &schema.sensitive_feature {
        Some(name) => Some(
            feature_names
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?,
        ),
        None => None,
    };

    let mut data = Vec::new();
    let mut sensitive = Vec::new();
    let mut labels = Vec::new();
    let mut split_tags = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| csv_error(node_file, e))?;
        for &j in &feature_cols {
            let raw = record.get(j).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                file: node_file.to_path_buf(),
                line,
                msg: format!("column `{}` value `{raw}` is not a number", header[j]),
            })?;
            data.push(v);
        }
        sensitive.push(parse_binary(
            record.get(s_col).unwrap_or(""),
            "sensitive",
            node_file,
            line,
        )?);
        labels.push(parse_binary(record.get(y_col).unwrap_or(""), "label", node_file, line)?);
        if let Some(j) = split_col {
            split_tags.push((line, record.get(j).unwrap_or("").to_string()));
        }
    }
    let n = sensitive.len();
    let features = Matrix::from_vec(n, feature_cols.len(), data)?;

    let edge_text = fs::read_to_string(edge_file).map_err(|e| Error::io(edge_file, e))?;
    let mut edges = Vec::new();
    for (idx, raw) in edge_text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let ids: Vec<&str> = trimmed
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        if ids.len() != 2 {
            return Err(Error::Parse {
                file: edge_file.to_path_buf(),
                line,
                msg: format!("expected two node ids, found `{trimmed}`"),
            });
        }
        let mut pair = [0usize; 2];
        for (slot, tok) in pair.iter_mut().zip(&ids) {
            let id: usize = tok.parse().map_err(|_| Error::Parse {
                file: edge_file.to_path_buf(),
                line,
                msg: format!("`{tok}` is not a non-negative integer"),
            })?;
            if id >= n {
                return Err(Error::NodeOutOfRange {
                    file: edge_file.to_path_buf(),
                    line,
                    id,
                    n,
                });
            }
            *slot = id;
        }
        edges.push((pair[0], pair[1]));
    }

    let mut g = GraphDataset::from_edges(features, sensitive, labels, &edges, sensitive_column_index)?
        .with_feature_names(feature_names)?;
    if !split_tags.is_empty() {
        let mut masks = Masks::empty(n);
        for (i, (line, tag)) in split_tags.iter().enumerate() {
            match tag.as_str() {
                "train" => masks.train[i] = true,
                "val" => masks.val[i] = true,
                "test" => masks.test[i] = true,
                "" => {}
                other => {
                    return Err(Error::Validation(format!(
                        "{}:{line}: unknown split `{other}`",
                        node_file.display()
                    )))
                }
            }
        }
        g = g.with_masks(masks, None)?;
    }
    Ok(g)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        file: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Writes `nodes.csv`, `edges.txt` and `meta.json` into `dir`.
pub fn save_bundle(g: &GraphDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nodes_path = dir.join("nodes.csv");
    let mut w = csv::Writer::from_path(&nodes_path).map_err(|e| csv_error(&nodes_path, e))?;
    let mut header: Vec<String> = g.feature_names().to_vec();
    header.extend(["sensitive".to_string(), "label".to_string(), "split".to_string()]);
    w.write_record(&header).map_err(|e| csv_error(&nodes_path, e))?;
    let masks = g.masks();
    for i in 0..g.n() {
        // `{:?}` on f64 is the shortest representation that parses back exactly.
        let mut row: Vec<String> = g.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(g.sensitive()[i].to_string());
        row.push(g.labels()[i].to_string());
        let tag = if masks.train[i] {
            "train"
        } else if masks.val[i] {
            "val"
        } else if masks.test[i] {
            "test"
        } else {
            ""
        };
        row.push(tag.to_string());
        w.write_record(&row).map_err(|e| csv_error(&nodes_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&nodes_path, e))?;

    let mut edges = String::new();
    let a = g.adjacency();
    for i in 0..g.n() {
        for (j, _) in a.row(i) {
            if i < j {
                edges.push_str(&format!("{i} {j}\n"));
            }
        }
    }
    let edges_path = dir.join("edges.txt");
    fs::write(&edges_path, edges).map_err(|e| Error::io(&edges_path, e))?;

    let meta = BundleMeta {
        n: g.n(),
        m: g.m(),
        d: g.d(),
        sensitive_column_index: g.sensitive_column_index(),
        split_seed: g.split_seed(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Reads a bundle written by [`save_bundle`] and checks it against its
/// `meta.json`.
pub fn load_bundle(dir: &Path) -> Result<GraphDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text)?;
    let g = load_dataset(&dir.join("nodes.csv"), &dir.join("edges.txt"), &NodeSchema::default())?;
    if (g.n(), g.m(), g.d()) != (meta.n, meta.m, meta.d) {
        return Err(Error::Validation(format!(
            "bundle contents (n={}, m={}, d={}) disagree with meta.json (n={}, m={}, d={})",
            g.n(),
            g.m(),
            g.d(),
            meta.n,
            meta.m,
            meta.d
        )));
    }
    let masks = g.masks().clone();
    let names = g.feature_names().to_vec();
    let rebuilt = GraphDataset::new(
        g.adjacency().clone(),
        g.features().clone(),
        names,
        g.sensitive().to_vec(),
        g.labels().to_vec(),
        masks.clone(),
        meta.sensitive_column_index,
    )?;
    rebuilt.with_masks(masks, meta.split_seed)
}
