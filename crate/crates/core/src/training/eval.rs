//! Inference on whole images and dataset-level metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{load_image, pad_with, unpad, DatasetManifest, GrayImage, ImageFormat, PadPlan};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, MetricsRow, SsimConfig};
use crate::model::ModelGraph;
use crate::tensor::{Float, Tensor};

/// Pads `image` to a size the network accepts, runs an inference-mode
/// forward pass and crops the result back to the input size.
pub fn predict_image<T: Float>(model: &mut ModelGraph<T>, image: &GrayImage) -> Result<GrayImage> {
    let (h, w) = image.dims();
    let plan = PadPlan::for_size(h, w, model.config().size_multiple())?;
    let padded = pad_with(image, &plan);
    model.set_input_size(padded.height(), padded.width())?;
    let out = model.infer(&padded.to_tensor::<T>())?;
    unpad(&GrayImage::from_tensor(&out, 0)?, &plan)
}

/// Metrics of `predict` over every pair of `manifest`.
pub fn evaluate_with(
    manifest: &DatasetManifest,
    cfg: &SsimConfig,
    mut predict: impl FnMut(&GrayImage) -> Result<GrayImage>,
) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let pair = manifest.load_pair(i)?;
        let clean = pair
            .clean
            .ok_or_else(|| Error::Dataset(format!("{} has no ground truth", pair.id)))?;
        let pred = predict(&pair.distorted)?;
        rows.push(row(&pair.id, &pred, &clean, cfg)?);
    }
    MetricsReport::from_rows(rows)
}

/// Evaluates `model` in inference mode against the clean images.
pub fn evaluate<T: Float>(
    model: &mut ModelGraph<T>,
    manifest: &DatasetManifest,
    cfg: &SsimConfig,
) -> Result<MetricsReport> {
    evaluate_with(manifest, cfg, |img| predict_image(model, img))
}

fn row(id: &str, pred: &GrayImage, reference: &GrayImage, cfg: &SsimConfig) -> Result<MetricsRow> {
    if pred.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "{}: prediction is {:?} but reference is {:?}",
            id,
            pred.dims(),
            reference.dims()
        )));
    }
    let p: Tensor<f64> = pred.to_tensor();
    let r: Tensor<f64> = reference.to_tensor();
    MetricsRow::compute(id, &p, &r, cfg)
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && ImageFormat::from_path(&path).is_ok() {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            if out.insert(stem.clone(), path).is_some() {
                return Err(Error::Dataset(format!(
                    "{}: more than one image named {}",
                    dir.display(),
                    stem
                )));
            }
        }
    }
    Ok(out)
}

/// Compares images in `pred_dir` with same-named images in `ref_dir`.
pub fn evaluate_dirs(pred_dir: &Path, ref_dir: &Path, cfg: &SsimConfig) -> Result<MetricsReport> {
    let preds = images_by_stem(pred_dir)?;
    let refs = images_by_stem(ref_dir)?;
    if preds.is_empty() {
        return Err(Error::Dataset(format!("{} holds no images", pred_dir.display())));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (stem, path) in &preds {
        let ref_path = refs.get(stem).ok_or_else(|| {
            Error::Dataset(format!("no reference image for {} in {}", stem, ref_dir.display()))
        })?;
        rows.push(row(stem, &load_image(path)?, &load_image(ref_path)?, cfg)?);
    }
    MetricsReport::from_rows(rows)
}
