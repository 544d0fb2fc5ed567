use crate::error::{Error, Result};
use crate::inference::{run_open_world, ImageDetections, InferenceConfig};
use crate::labelspace::{EmbeddingTable, LabelSpace};
use crate::synthworld::{DetDataset, SceneObject};

use super::TrainedSystem;

/// Append detections scoring at least `conf_thresh` whose category the
/// dataset does not annotate. New categories join the dataset's label space
/// in order of first appearance.
pub fn pseudo_label_from_detections(
    dataset: &DetDataset,
    detections: &[ImageDetections],
    conf_thresh: f64,
) -> Result<DetDataset> {
    if detections.len() != dataset.len() {
        return Err(Error::Dimension {
            expected: dataset.len(),
            actual: detections.len(),
        });
    }
    let mut out = dataset.clone();
    let mut keys: Vec<String> = dataset.label_space.keys().to_vec();
    for ((img, visible), dets) in dataset.images.iter().zip(&mut out.visible).zip(detections) {
        if img.image_id != dets.image_id {
            return Err(Error::Format(format!(
                "detections for `{}` given for image `{}`",
                dets.image_id, img.image_id
            )));
        }
        for d in &dets.detections {
            if d.score >= conf_thresh && !dataset.label_space.contains(&d.category_key) && d.is_well_formed() {
                if !keys.contains(&d.category_key) {
                    keys.push(d.category_key.clone());
                }
                visible.push(SceneObject {
                    bbox: d.bbox,
                    category_key: d.category_key.clone(),
                });
            }
        }
    }
    out.label_space = LabelSpace::new(keys)?;
    Ok(out)
}

/// Label `dataset` with a system trained elsewhere, over the categories of
/// `vocabulary` the dataset lacks.
pub fn pseudo_label(
    system: &TrainedSystem,
    dataset: &DetDataset,
    conf_thresh: f64,
    vocabulary: &LabelSpace,
    table: &EmbeddingTable,
    cfg: &InferenceConfig,
) -> Result<DetDataset> {
    let missing = LabelSpace::new(vocabulary.iter().filter(|k| !dataset.label_space.contains(k)))?;
    if missing.is_empty() {
        return Ok(dataset.clone());
    }
    let out = run_open_world(std::slice::from_ref(system), dataset, &missing, table, &[], cfg)?;
    pseudo_label_from_detections(dataset, &out.images, conf_thresh)
}
