//! On-disk dataset layout: a TOML manifest, a binary feature matrix with a
//! sidecar id index, a sample metadata table and an annotation table.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Annotation, Dataset, Sample, Split};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"AMFT";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub feature_dim: usize,
    /// Row-major f32 matrix, see [`FEATURE_MAGIC`].
    pub feature_file: PathBuf,
    /// One sample id per line, matching feature rows.
    pub index_file: PathBuf,
    /// `sample_id,<group_column>[,split]`.
    pub sample_file: PathBuf,
    /// `sample_id,annotator_id,activation,valence`, raw labels.
    pub annotation_file: PathBuf,
    /// Declared raw label range; labels outside it are rejected.
    pub label_range: [f64; 2],
    #[serde(default = "default_group_column")]
    pub group_column: String,
}

fn default_group_column() -> String {
    "group".into()
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::parse(path, "missing AMFT header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes[12..16] != [0; 4] {
        return Err(Error::parse(path, "reserved header bytes must be zero"));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols * 4 {
        return Err(Error::DimensionMismatch(format!(
            "{}: header declares {rows}x{cols} but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

pub fn write_features(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), rows * cols);
    let mut buf = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.extend_from_slice(&[0; 4]);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize, Serialize)]
struct AnnotationRow {
    sample_id: String,
    annotator_id: String,
    activation: f64,
    valence: f64,
}

fn read_annotations(path: &Path, range: [f64; 2]) -> Result<Vec<Annotation>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected = ["sample_id", "annotator_id", "activation", "valence"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            path,
            format!("expected header {}, got {}", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<AnnotationRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        for v in [row.activation, row.valence] {
            if !v.is_finite() || v < range[0] || v > range[1] {
                return Err(Error::InvalidInput(format!(
                    "label {v} for sample {} annotator {} outside declared range [{}, {}]",
                    row.sample_id, row.annotator_id, range[0], range[1]
                )));
            }
        }
        out.push(Annotation {
            sample_id: row.sample_id,
            annotator_id: row.annotator_id,
            activation: row.activation,
            valence: row.valence,
        });
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingFile(path.to_owned()),
        _ => Error::parse(path, e),
    }
}

fn read_sample_meta(path: &Path, group_column: &str) -> Result<HashMap<String, (String, Option<Split>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("sample_id").ok_or_else(|| Error::parse(path, "missing sample_id column"))?;
    let group_col = col(group_column).ok_or_else(|| Error::parse(path, format!("missing group column {group_column:?}")))?;
    let split_col = col("split");
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let id = rec.get(id_col).unwrap_or_default().to_owned();
        let group = rec.get(group_col).unwrap_or_default().to_owned();
        let split = match split_col.and_then(|c| rec.get(c)) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Split>()?),
        };
        out.insert(id, (group, split));
    }
    Ok(out)
}

/// Load and validate a dataset. Labels stay raw (unscaled).
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = read_to_string(manifest_path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::parse(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_owned() } else { base.join(p) };

    let feature_path = resolve(&manifest.feature_file);
    let index_path = resolve(&manifest.index_file);
    let (rows, cols, values) = read_features(&feature_path)?;
    let ids: Vec<String> = read_to_string(&index_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_owned())
        .collect();
    if ids.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "{} has {rows} feature rows but the index lists {} samples",
            feature_path.display(),
            ids.len()
        )));
    }
    if cols != manifest.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "{} has {cols} columns, manifest declares feature_dim {}",
            feature_path.display(),
            manifest.feature_dim
        )));
    }
    let meta_path = resolve(&manifest.sample_file);
    let meta = read_sample_meta(&meta_path, &manifest.group_column)?;
    let samples = ids
        .into_iter()
        .enumerate()
        .map(|(row, id)| {
            let (group_key, split) = meta
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::parse(&meta_path, format!("no metadata for sample {id}")))?;
            Ok(Sample {
                features: values[row * cols..(row + 1) * cols].iter().map(|&v| f64::from(v)).collect(),
                id,
                group_key,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let annotations = read_annotations(&resolve(&manifest.annotation_file), manifest.label_range)?;
    Dataset::new(manifest.name, manifest.feature_dim, samples, annotations)
}

/// Write `dataset` under `dir` and return the manifest path. Features are
/// stored as f32.
pub fn write_dataset(dataset: &Dataset, dir: &Path, label_range: [f64; 2]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        name: dataset.name.clone(),
        feature_dim: dataset.feature_dim,
        feature_file: "features.amft".into(),
        index_file: "features.idx".into(),
        sample_file: "samples.csv".into(),
        annotation_file: "annotations.csv".into(),
        label_range,
        group_column: default_group_column(),
    };
    let samples = dataset.samples();
    let values: Vec<f32> = samples.iter().flat_map(|s| s.features.iter().map(|&v| v as f32)).collect();
    write_features(&dir.join(&manifest.feature_file), samples.len(), dataset.feature_dim, &values)?;

    let index: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
    let index_path = dir.join(&manifest.index_file);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;

    let meta_path = dir.join(&manifest.sample_file);
    let mut w = csv::Writer::from_path(&meta_path).map_err(|e| csv_err(&meta_path, e))?;
    w.write_record(["sample_id", "group", "split"]).map_err(|e| csv_err(&meta_path, e))?;
    for s in samples {
        w.write_record([s.id.as_str(), s.group_key.as_str(), s.split.map(Split::as_str).unwrap_or("")])
            .map_err(|e| csv_err(&meta_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&meta_path, e))?;

    let ann_path = dir.join(&manifest.annotation_file);
    let mut w = csv::Writer::from_path(&ann_path).map_err(|e| csv_err(&ann_path, e))?;
    for a in dataset.annotations() {
        w.serialize(AnnotationRow {
            sample_id: a.sample_id.clone(),
            annotator_id: a.annotator_id.clone(),
            activation: a.activation,
            valence: a.valence,
        })
        .map_err(|e| csv_err(&ann_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&ann_path, e))?;

    let manifest_path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::parse(&manifest_path, e))?;
    let mut f = BufWriter::new(fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
