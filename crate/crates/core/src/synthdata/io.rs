//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.csv
//! <root>/<patient_id>/ct.pgm          window-mapped to 8 bit
//! <root>/<patient_id>/ct_mask.pgm
//! <root>/<patient_id>/tiles/NN.ppm
//! <root>/<patient_id>/tiles_mask/NN.pgm
//! <root>/<patient_id>/meta.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CLASS_NAMES, NUM_CLASSES};
use crate::preprocess::raster::{read_gray, read_mask, read_rgb_planar, write_gray, write_mask, write_rgb_planar};
use crate::preprocess::{CtPatch, RawMetadata, RgbTile, Split, SplitAssignment, LUNG_WINDOW};

use super::{CorruptionFlags, Dataset, PatientRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub class: usize,
    pub split: Split,
    pub ct: String,
    pub ct_mask: String,
    pub tiles: String,
    pub tiles_mask: String,
    pub meta: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PatientMeta {
    patient_id: String,
    class: usize,
    class_name: String,
    metadata: RawMetadata,
    corrupted: CorruptionFlags,
    tiles: usize,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<Vec<ManifestRow>> {
    mkdir(root)?;
    let (lo, hi) = LUNG_WINDOW;
    let mut rows = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        let split = ds
            .split
            .get(&r.patient_id)
            .ok_or_else(|| Error::invalid(format!("patient {} has no split", r.patient_id)))?;
        let dir = root.join(&r.patient_id);
        mkdir(&dir.join("tiles"))?;
        mkdir(&dir.join("tiles_mask"))?;
        let window: Vec<f32> = r.ct.pixels.iter().map(|&v| (v - lo) / (hi - lo)).collect();
        write_gray(&dir.join("ct.pgm"), r.ct.height, r.ct.width, &window)?;
        write_mask(&dir.join("ct_mask.pgm"), r.ct.height, r.ct.width, &r.ct.lesion_mask)?;
        for (i, (t, m)) in r.tiles.iter().zip(&r.tile_masks).enumerate() {
            write_rgb_planar(&dir.join(format!("tiles/{i:02}.ppm")), t.height, t.width, &t.pixels)?;
            write_mask(&dir.join(format!("tiles_mask/{i:02}.pgm")), t.height, t.width, m)?;
        }
        let meta = PatientMeta {
            patient_id: r.patient_id.clone(),
            class: r.label,
            class_name: CLASS_NAMES[r.label].to_string(),
            metadata: r.metadata,
            corrupted: r.corrupted,
            tiles: r.tiles.len(),
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
        rows.push(ManifestRow {
            patient_id: r.patient_id.clone(),
            class: r.label,
            split,
            ct: format!("{}/ct.pgm", r.patient_id),
            ct_mask: format!("{}/ct_mask.pgm", r.patient_id),
            tiles: format!("{}/tiles", r.patient_id),
            tiles_mask: format!("{}/tiles_mask", r.patient_id),
            meta: format!("{}/meta.json", r.patient_id),
        });
    }
    let manifest = root.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_err(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(rows)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let manifest = root.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::MissingFile(manifest));
    }
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .map_err(|e| csv_err(&manifest, e))?;
    if let Some(bad) = rows.iter().find(|row| row.class >= NUM_CLASSES) {
        return Err(Error::Format {
            path: manifest,
            message: format!("patient {} has class {}", bad.patient_id, bad.class),
        });
    }
    Ok(rows)
}

fn numbered(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn read_patient(root: &Path, row: &ManifestRow) -> Result<PatientRecord> {
    let meta_path = root.join(&row.meta);
    if !meta_path.exists() {
        return Err(Error::MissingFile(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PatientMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let (lo, hi) = LUNG_WINDOW;
    let (h, w, v) = read_gray(&root.join(&row.ct))?;
    let (mh, mw, mask) = read_mask(&root.join(&row.ct_mask))?;
    if (mh, mw) != (h, w) {
        return Err(Error::Format {
            path: root.join(&row.ct_mask),
            message: format!("mask {mh}×{mw} vs CT {h}×{w}"),
        });
    }
    let ct = CtPatch::new(h, w, v.iter().map(|&x| lo + x * (hi - lo)).collect(), mask)?;
    let mut tiles = Vec::new();
    for p in numbered(&root.join(&row.tiles), "ppm")? {
        let (th, tw, px) = read_rgb_planar(&p)?;
        tiles.push(RgbTile::new(th, tw, px)?);
    }
    let mut tile_masks = Vec::new();
    for p in numbered(&root.join(&row.tiles_mask), "pgm")? {
        tile_masks.push(read_mask(&p)?.2);
    }
    if tiles.len() != meta.tiles || tile_masks.len() != meta.tiles {
        return Err(Error::Format {
            path: root.join(&row.tiles),
            message: format!(
                "{} tiles and {} masks, meta says {}",
                tiles.len(),
                tile_masks.len(),
                meta.tiles
            ),
        });
    }
    Ok(PatientRecord {
        patient_id: row.patient_id.clone(),
        label: row.class,
        metadata: meta.metadata,
        ct,
        tiles,
        tile_masks,
        corrupted: meta.corrupted,
    })
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let rows = read_manifest(root)?;
    let mut split = BTreeMap::new();
    let mut records = Vec::with_capacity(rows.len());
    for row in &rows {
        if split.insert(row.patient_id.clone(), row.split).is_some() {
            return Err(Error::Format {
                path: root.join("manifest.csv"),
                message: format!("patient {} listed twice", row.patient_id),
            });
        }
        records.push(read_patient(root, row)?);
    }
    Ok(Dataset {
        records,
        split: SplitAssignment(split),
    })
}
