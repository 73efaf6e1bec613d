use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::{
    hu_normalize, macenko_normalize, MetadataStats, MetadataVector, Split, StainReference, LUNG_WINDOW,
};
use crate::synthdata::{CorruptionFlags, Dataset, PatientRecord};

/// Model-ready patient: window-normalized CT, stain-normalized tile bag and
/// standardized metadata.
#[derive(Clone, Debug)]
pub struct PreparedPatient {
    pub id: String,
    pub label: usize,
    /// `(1, H, W)`.
    pub ct: Tensor<f32>,
    pub ct_mask: Vec<bool>,
    /// `(n, 3, h, w)` tiles that survived stain normalization.
    pub tiles: Tensor<f32>,
    /// Index of each kept tile in the original slide.
    pub kept_tiles: Vec<usize>,
    pub tile_masks: Vec<Vec<bool>>,
    pub meta: MetadataVector,
    pub corrupted: CorruptionFlags,
}

impl PreparedPatient {
    pub fn tile_count(&self) -> usize {
        self.tiles.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub train: Vec<PreparedPatient>,
    pub val: Vec<PreparedPatient>,
    pub test: Vec<PreparedPatient>,
    pub stats: MetadataStats,
}

impl PreparedDataset {
    pub fn split(&self, s: Split) -> &[PreparedPatient] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Window the CT, Macenko-normalize every tile (dropping rejected tiles)
/// and z-score metadata with `stats`.
pub fn prepare_patient(
    r: &PatientRecord,
    stats: &MetadataStats,
    reference: &StainReference,
) -> Result<PreparedPatient> {
    let ct = hu_normalize(&r.ct, LUNG_WINDOW.0, LUNG_WINDOW.1)?;
    let ct_tensor = Tensor::new(vec![1, ct.height, ct.width], ct.pixels)?;
    let mut kept = Vec::new();
    let mut values = Vec::new();
    let mut masks = Vec::new();
    let mut size = (0, 0);
    for (i, tile) in r.tiles.iter().enumerate() {
        match macenko_normalize(tile, reference) {
            Ok(t) => {
                size = (t.height, t.width);
                values.extend_from_slice(&t.pixels);
                kept.push(i);
                masks.push(r.tile_masks[i].clone());
            }
            Err(Error::TileRejected(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyBag);
    }
    Ok(PreparedPatient {
        id: r.patient_id.clone(),
        label: r.label,
        ct: ct_tensor,
        ct_mask: ct.lesion_mask,
        tiles: Tensor::new(vec![kept.len(), 3, size.0, size.1], values)?,
        kept_tiles: kept,
        tile_masks: masks,
        meta: stats.apply(&r.metadata)?,
        corrupted: r.corrupted,
    })
}

/// Fit metadata statistics on the training split and prepare every patient.
pub fn prepare_dataset(ds: &Dataset, reference: &StainReference) -> Result<PreparedDataset> {
    let in_split = |r: &PatientRecord, s: Split| ds.split.get(&r.patient_id) == Some(s);
    let train_meta: Vec<_> = ds
        .records
        .iter()
        .filter(|r| in_split(r, Split::Train))
        .map(|r| r.metadata)
        .collect();
    let stats = MetadataStats::fit(&train_meta)?;
    prepare_with_stats(ds, reference, stats)
}

/// Prepare with statistics fitted elsewhere (e.g. loaded from a checkpoint).
pub fn prepare_with_stats(ds: &Dataset, reference: &StainReference, stats: MetadataStats) -> Result<PreparedDataset> {
    let mut out = PreparedDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        stats,
    };
    for r in &ds.records {
        let split = ds
            .split
            .get(&r.patient_id)
            .ok_or_else(|| Error::invalid(format!("patient {} has no split", r.patient_id)))?;
        let p = prepare_patient(r, &out.stats, reference).map_err(|e| match e {
            Error::EmptyBag => Error::invalid(format!(
                "patient {}: every tile was rejected by stain normalization; relax tile filtering",
                r.patient_id
            )),
            other => other,
        })?;
        match split {
            Split::Train => out.train.push(p),
            Split::Val => out.val.push(p),
            Split::Test => out.test.push(p),
        }
    }
    for s in Split::ALL {
        if out.split(s).is_empty() {
            return Err(Error::EmptySplit(format!("{s} split has no patients")));
        }
    }
    Ok(out)
}

/// Stack `(1, H, W)` images into `(B, 1, H, W)`.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut values = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape(
                "stack",
                format!("{:?} vs {:?}", im.shape(), first.shape()),
            ));
        }
        values.extend_from_slice(im.values());
    }
    Tensor::new(shape, values)
}
