//! Binary and CSV ingestion for feature datasets.
//!
//! Binary layout: magic `CLFB`, format version u16, class count u32,
//! dimension u32, row count u64, then per row a u32 label followed by
//! `dimension` little-endian f32 values. The CSV fallback uses a
//! `label,f0,...,f{d-1}` header with one example per row.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{ClassId, LabeledFeature, LabeledFeatureSet};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CLFB";
pub const FEATURE_FORMAT_VERSION: u16 = 1;

/// A dataset loaded from disk, with labels remapped to `0..C-1`.
#[derive(Debug, Clone)]
pub struct LoadedFeatures {
    pub set: LabeledFeatureSet,
    /// Original label for each remapped id; index = new id, ascending.
    pub original_labels: Vec<ClassId>,
}

impl LoadedFeatures {
    /// Mapping from original label to remapped id.
    pub fn mapping(&self) -> BTreeMap<ClassId, ClassId> {
        self.original_labels
            .iter()
            .enumerate()
            .map(|(new, &orig)| (orig, new as ClassId))
            .collect()
    }
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Load a feature dataset, remapping labels to a contiguous `0..C-1` range.
///
/// The file format is sniffed: files starting with the `CLFB` magic are read
/// as binary, anything else as CSV.
pub fn load_feature_dataset(path: impl AsRef<Path>) -> Result<LoadedFeatures> {
    let path = path.as_ref();
    let (dimension, examples) = read_records(path)?;
    let (examples, original_labels) = remap_contiguous(examples);
    let set = LabeledFeatureSet::from_examples(dimension, examples)
        .map_err(|e| ingestion(path, e.to_string()))?;
    Ok(LoadedFeatures {
        set,
        original_labels,
    })
}

/// Read a feature file without label remapping. Used for snapshots whose
/// labels must round-trip verbatim.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<LabeledFeatureSet> {
    let path = path.as_ref();
    let (dimension, examples) = read_records(path)?;
    LabeledFeatureSet::from_examples(dimension, examples)
        .map_err(|e| ingestion(path, e.to_string()))
}

fn read_records(path: &Path) -> Result<(usize, Vec<LabeledFeature>)> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 4];
    let n = read_up_to(&mut file, &mut magic)?;
    if n == 4 && &magic == FEATURE_MAGIC {
        read_binary_records(path, BufReader::new(file))
    } else {
        drop(file);
        read_csv_records(path, BufReader::new(File::open(path)?))
    }
}

fn read_up_to(reader: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = reader.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

fn read_binary_records(
    path: &Path,
    mut reader: impl Read,
) -> Result<(usize, Vec<LabeledFeature>)> {
    let mut header = [0u8; 2 + 4 + 4 + 8];
    if read_up_to(&mut reader, &mut header)? != header.len() {
        return Err(ingestion(path, "malformed header: file truncated"));
    }
    let version = u16::from_le_bytes([header[0], header[1]]);
    if version != FEATURE_FORMAT_VERSION {
        return Err(ingestion(
            path,
            format!("malformed header: unsupported format version {version}"),
        ));
    }
    let class_count = u32::from_le_bytes(header[2..6].try_into().unwrap()) as usize;
    let dimension = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let row_count = u64::from_le_bytes(header[10..18].try_into().unwrap());
    if dimension == 0 {
        return Err(ingestion(path, "malformed header: zero dimension"));
    }
    let row_count = usize::try_from(row_count)
        .map_err(|_| ingestion(path, "malformed header: row count overflows usize"))?;

    let mut examples = Vec::with_capacity(row_count);
    let mut row = vec![0u8; 4 + dimension * 4];
    for record in 0..row_count {
        let n = read_up_to(&mut reader, &mut row)?;
        if n != row.len() {
            return Err(ingestion(
                path,
                format!("record {record}: unexpected end of file"),
            ));
        }
        let label = u32::from_le_bytes(row[0..4].try_into().unwrap());
        let mut feature = Vec::with_capacity(dimension);
        for j in 0..dimension {
            let off = 4 + j * 4;
            let value = f32::from_le_bytes(row[off..off + 4].try_into().unwrap());
            if !value.is_finite() {
                return Err(ingestion(
                    path,
                    format!("record {record}: non-finite value at position {j}"),
                ));
            }
            feature.push(value);
        }
        examples.push(LabeledFeature { feature, label });
    }

    let distinct: std::collections::BTreeSet<ClassId> =
        examples.iter().map(|ex| ex.label).collect();
    if distinct.len() != class_count {
        return Err(ingestion(
            path,
            format!(
                "header declares {class_count} classes but data contains {}",
                distinct.len()
            ),
        ));
    }
    Ok((dimension, examples))
}

fn read_csv_records(path: &Path, reader: impl BufRead) -> Result<(usize, Vec<LabeledFeature>)> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| ingestion(path, "malformed header: empty file"))?
        .map_err(Error::Io)?;
    let fields: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if fields.len() < 2 || fields[0] != "label" {
        return Err(ingestion(
            path,
            "malformed header: expected 'label,f0,...' CSV header",
        ));
    }
    let dimension = fields.len() - 1;
    for (j, name) in fields[1..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(ingestion(
                path,
                format!("malformed header: column {} named '{name}', expected 'f{j}'", j + 1),
            ));
        }
    }

    let mut examples = Vec::new();
    let mut record = 0usize;
    for line in lines {
        let line = line.map_err(Error::Io)?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dimension + 1 {
            return Err(ingestion(
                path,
                format!(
                    "record {record}: expected {} fields, got {}",
                    dimension + 1,
                    cells.len()
                ),
            ));
        }
        let label: ClassId = cells[0]
            .trim()
            .parse()
            .map_err(|_| ingestion(path, format!("record {record}: invalid label '{}'", cells[0])))?;
        let mut feature = Vec::with_capacity(dimension);
        for (j, cell) in cells[1..].iter().enumerate() {
            let value: f32 = cell.trim().parse().map_err(|_| {
                ingestion(
                    path,
                    format!("record {record}: invalid value '{cell}' at position {j}"),
                )
            })?;
            if !value.is_finite() {
                return Err(ingestion(
                    path,
                    format!("record {record}: non-finite value at position {j}"),
                ));
            }
            feature.push(value);
        }
        examples.push(LabeledFeature { feature, label });
        record += 1;
    }
    if examples.is_empty() {
        return Err(ingestion(path, "no data records".to_string()));
    }
    Ok((dimension, examples))
}

fn remap_contiguous(examples: Vec<LabeledFeature>) -> (Vec<LabeledFeature>, Vec<ClassId>) {
    let original: Vec<ClassId> = examples
        .iter()
        .map(|ex| ex.label)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let remapped = examples
        .into_iter()
        .map(|ex| {
            let new = original.binary_search(&ex.label).unwrap() as ClassId;
            LabeledFeature {
                feature: ex.feature,
                label: new,
            }
        })
        .collect();
    (remapped, original)
}

/// Write a dataset in the binary feature format. Labels are written as
/// stored; the header class count is the size of the label universe.
pub fn write_feature_file(path: impl AsRef<Path>, set: &LabeledFeatureSet) -> Result<()> {
    let path: &Path = path.as_ref();
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(set.class_count() as u32).to_le_bytes())?;
    w.write_all(&(set.dimension() as u32).to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    for ex in set.examples() {
        w.write_all(&ex.label.to_le_bytes())?;
        for v in &ex.feature {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[allow(dead_code)]
pub(crate) fn ingestion_path(err: &Error) -> Option<&PathBuf> {
    match err {
        Error::Ingestion { path, .. } => Some(path),
        _ => None,
    }
}
