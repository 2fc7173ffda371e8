//! Dataset directories and report files.
//!
//! A dataset directory holds `schema.json`, `meta.json`, and for each of
//! `train`, `val` and `test` a CSV of encoded values (categorical codes and
//! z-scores, empty when missing) with a trailing `label` column, plus
//! `<split>_images.bin` with the images as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tabimg_core::data::{Dataset, SplitDataset, TabularBatch, TabularSchema};

use crate::error::{HarnessError, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const LABEL_COLUMN: &str = "label";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    image_size: usize,
    classes: usize,
}

fn bad(detail: impl Into<String>) -> HarnessError {
    HarnessError::Dataset(detail.into())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn write_dataset(dir: &Path, split: &SplitDataset) -> Result<()> {
    create_dir(dir)?;
    let train = &split.train;
    write_json(&dir.join("schema.json"), &train.schema)?;
    write_json(
        &dir.join("meta.json"),
        &Meta {
            image_size: train.image_size,
            classes: train.classes,
        },
    )?;
    for (name, data) in SPLITS.iter().zip([&split.train, &split.val, &split.test]) {
        write_split(dir, name, data)?;
    }
    Ok(())
}

fn write_split(dir: &Path, name: &str, data: &Dataset) -> Result<()> {
    let path = dir.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<&str> = data.schema.columns.iter().map(|c| c.name.as_str()).collect();
    header.push(LABEL_COLUMN);
    w.write_record(&header)?;
    let t = &data.table;
    let labels = data.labels();
    for r in 0..t.rows {
        let mut record: Vec<String> = (0..t.cols)
            .map(|c| {
                if t.is_missing(r, c) {
                    String::new()
                } else {
                    t.value(r, c).to_string()
                }
            })
            .collect();
        record.push(labels.get(r).map_or(String::new(), ToString::to_string));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let img_path = dir.join(format!("{name}_images.bin"));
    let mut bytes = Vec::with_capacity(4 * data.images.len());
    for v in &data.images {
        bytes.write_all(&v.to_le_bytes()).expect("writing to a Vec");
    }
    write_file(&img_path, &bytes)
}

pub fn read_dataset(dir: &Path) -> Result<SplitDataset> {
    let schema: TabularSchema = serde_json::from_slice(&read_file(&dir.join("schema.json"))?)?;
    schema.validate()?;
    let meta: Meta = serde_json::from_slice(&read_file(&dir.join("meta.json"))?)?;
    if meta.classes < 2 {
        return Err(bad("meta.json: need at least 2 classes"));
    }
    let mut parts = Vec::with_capacity(3);
    for name in SPLITS {
        parts.push(read_split(dir, name, &schema, &meta)?);
    }
    let test = parts.pop().expect("three splits");
    let val = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok(SplitDataset { train, val, test })
}

fn read_split(dir: &Path, name: &str, schema: &TabularSchema, meta: &Meta) -> Result<Dataset> {
    let path = dir.join(format!("{name}.csv"));
    let mut rdr = csv::Reader::from_path(&path)?;
    let header = rdr.headers()?.clone();
    let expected: Vec<&str> = schema
        .columns
        .iter()
        .map(|c| c.name.as_str())
        .chain([LABEL_COLUMN])
        .collect();
    if header.iter().ne(expected.iter().copied()) {
        return Err(bad(format!("{}: header does not match schema.json", path.display())));
    }
    let cols = schema.len();
    let (mut values, mut mask, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        for c in 0..cols {
            let cell = rec[c].trim();
            if cell.is_empty() {
                values.push(0.0);
                mask.push(true);
            } else {
                let v: f32 = cell
                    .parse()
                    .map_err(|_| bad(format!("{}:{line}: bad value {cell:?}", path.display())))?;
                if !v.is_finite() {
                    return Err(bad(format!("{}:{line}: non-finite value", path.display())));
                }
                values.push(v);
                mask.push(false);
            }
        }
        let y: usize = rec[cols]
            .trim()
            .parse()
            .map_err(|_| bad(format!("{}:{line}: bad label {:?}", path.display(), &rec[cols])))?;
        if y >= meta.classes {
            return Err(bad(format!(
                "{}:{line}: label {y} outside {} classes",
                path.display(),
                meta.classes
            )));
        }
        labels.push(y);
    }
    let rows = labels.len();
    let mut table = TabularBatch::new(rows, cols, values, Some(labels))?;
    table.mask = mask;
    table.check_schema(schema)?;

    let img_path = dir.join(format!("{name}_images.bin"));
    let bytes = read_file(&img_path)?;
    let pixels = meta.image_size * meta.image_size * 3;
    if bytes.len() != 4 * rows * pixels {
        return Err(bad(format!(
            "{}: {} bytes, expected {} for {rows} images",
            img_path.display(),
            bytes.len(),
            4 * rows * pixels
        )));
    }
    let images = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Dataset {
        schema: schema.clone(),
        image_size: meta.image_size,
        images,
        table,
        classes: meta.classes,
        latents: Vec::new(),
        latent_dim: 0,
    })
}
