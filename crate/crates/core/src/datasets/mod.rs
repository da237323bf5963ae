//! Detection datasets: COCO-style JSON I/O and the synthetic cross-domain
//! benchmark generator.

mod synth;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, BoxSet};
use crate::error::{Error, Result};
use crate::image::Image;

pub(crate) use synth::mix;
pub use synth::{generate_domain_pair, render_scene, DomainPair, DomainPairSpec, RenderedScene, ShiftDescriptor, ShiftPreset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// One image and its annotations. Box labels index the category table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub boxes: BoxSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionDataset {
    pub categories: Vec<Category>,
    pub records: Vec<ImageRecord>,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<CocoInfo>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CocoInfo {
    domain: Domain,
    split: Split,
}

impl DetectionDataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn total_boxes(&self) -> usize {
        self.records.iter().map(|r| r.boxes.len()).sum()
    }

    /// Same images with every annotation removed.
    pub fn unlabeled(&self) -> DetectionDataset {
        let mut ds = self.clone();
        for r in &mut ds.records {
            r.boxes = BoxSet::default();
        }
        ds
    }

    pub fn ground_truth(&self) -> Vec<BoxSet> {
        self.records.iter().map(|r| r.boxes.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if !cat_ids.insert(c.id) {
                return Err(Error::Dataset(format!("duplicate category id {}", c.id)));
            }
        }
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id) {
                return Err(Error::Dataset(format!("duplicate image id {}", r.id)));
            }
            r.boxes
                .validate(r.width as f64, r.height as f64, self.categories.len())
                .map_err(|e| Error::Dataset(format!("image {}: {e}", r.id)))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut annotations = Vec::new();
        for r in &self.records {
            for i in 0..r.boxes.len() {
                let b = r.boxes.boxes[i];
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: r.id,
                    bbox: [b.x, b.y, b.w, b.h],
                    category_id: self.categories[r.boxes.labels[i]].id,
                    score: r.boxes.scores.as_ref().map(|s| s[i]),
                });
            }
        }
        let file = CocoFile {
            images: self
                .records
                .iter()
                .map(|r| CocoImage { id: r.id, file_name: r.file_name.clone(), width: r.width, height: r.height })
                .collect(),
            annotations,
            categories: self.categories.clone(),
            info: Some(CocoInfo { domain: self.domain, split: self.split }),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses and validates a COCO-style document. Files without the `info`
    /// block are treated as a source-domain training split.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: CocoFile = serde_json::from_str(text)?;
        let cat_index: HashMap<u64, usize> = file.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        if cat_index.len() != file.categories.len() {
            return Err(Error::Dataset("duplicate category ids".into()));
        }
        let mut records = Vec::with_capacity(file.images.len());
        let mut by_id = HashMap::new();
        for im in file.images {
            if by_id.insert(im.id, records.len()).is_some() {
                return Err(Error::Dataset(format!("duplicate image id {}", im.id)));
            }
            records.push(ImageRecord {
                id: im.id,
                file_name: im.file_name,
                width: im.width,
                height: im.height,
                boxes: BoxSet::default(),
            });
        }
        let any_scores = file.annotations.iter().any(|a| a.score.is_some());
        for a in &file.annotations {
            let &slot = by_id.get(&a.image_id).ok_or_else(|| {
                Error::Dataset(format!("annotation {} references missing image_id {}", a.id, a.image_id))
            })?;
            let &label = cat_index.get(&a.category_id).ok_or_else(|| {
                Error::Dataset(format!("annotation {} references missing category_id {}", a.category_id, a.id))
            })?;
            let b = BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]);
            if !b.is_valid() {
                return Err(Error::Dataset(format!("annotation {} has a degenerate bbox {:?}", a.id, a.bbox)));
            }
            let bs = &mut records[slot].boxes;
            bs.boxes.push(b);
            bs.labels.push(label);
            if any_scores {
                bs.scores.get_or_insert_with(Vec::new).push(a.score.unwrap_or(1.0));
            }
        }
        if any_scores {
            for r in &mut records {
                r.boxes.scores.get_or_insert_with(Vec::new);
            }
        }
        let (domain, split) = file.info.map_or((Domain::Source, Split::Train), |i| (i.domain, i.split));
        let ds = DetectionDataset { categories: file.categories, records, domain, split };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn write_dataset(ds: &DetectionDataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<DetectionDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DetectionDataset::from_json(&text)
}

/// A dataset together with its decoded pixels, in record order.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub dataset: DetectionDataset,
    pub images: Vec<Image>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn unlabeled(&self) -> ImageSet {
        ImageSet { dataset: self.dataset.unlabeled(), images: self.images.clone() }
    }

    /// Writes `<dir>/<name>.json` and one PNG per record under `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        for (r, img) in self.dataset.records.iter().zip(&self.images) {
            let p = dir.join(&r.file_name);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save_png(&p)?;
        }
        let json = dir.join(format!("{name}.json"));
        write_dataset(&self.dataset, &json)?;
        Ok(json)
    }

    /// Reads a dataset JSON and the images it references (relative to the
    /// JSON file's directory).
    pub fn load(json: &Path) -> Result<ImageSet> {
        let dataset = read_dataset(json)?;
        let root = json.parent().unwrap_or(Path::new("."));
        let images = dataset
            .records
            .iter()
            .map(|r| {
                let img = Image::load_png(&root.join(&r.file_name))?;
                if img.width != r.width || img.height != r.height {
                    return Err(Error::Dataset(format!(
                        "image {} is {}x{} on disk but annotated as {}x{}",
                        r.id, img.width, img.height, r.width, r.height
                    )));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet { dataset, images })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DetectionDataset {
        DetectionDataset {
            categories: vec![Category { id: 1, name: "circle".into() }, Category { id: 7, name: "square".into() }],
            records: vec![
                ImageRecord {
                    id: 10,
                    file_name: "a.png".into(),
                    width: 32,
                    height: 32,
                    boxes: BoxSet::new(vec![BBox::new(1.5, 2.0, 3.25, 4.0), BBox::new(0.0, 0.0, 32.0, 32.0)], vec![1, 0]),
                },
                ImageRecord { id: 11, file_name: "b.png".into(), width: 32, height: 16, boxes: BoxSet::default() },
            ],
            domain: Domain::Target,
            split: Split::Val,
        }
    }

    #[test]
    fn json_round_trip() {
        let ds = sample();
        assert_eq!(DetectionDataset::from_json(&ds.to_json().unwrap()).unwrap(), ds);
    }

    #[test]
    fn rejects_missing_image_id() {
        let text = r#"{"images":[{"id":1,"file_name":"a.png","width":8,"height":8}],
            "annotations":[{"id":5,"image_id":99,"bbox":[0,0,2,2],"category_id":1}],
            "categories":[{"id":1,"name":"x"}]}"#;
        let err = DetectionDataset::from_json(text).unwrap_err().to_string();
        assert!(err.contains("99"), "{err}");
    }

    #[test]
    fn rejects_zero_width_box() {
        let text = r#"{"images":[{"id":1,"file_name":"a.png","width":8,"height":8}],
            "annotations":[{"id":5,"image_id":1,"bbox":[0,0,0,2],"category_id":1}],
            "categories":[{"id":1,"name":"x"}]}"#;
        assert!(DetectionDataset::from_json(text).is_err());
    }

    #[test]
    fn rejects_out_of_bounds_and_duplicates() {
        let mut ds = sample();
        ds.records[1].boxes = BoxSet::new(vec![BBox::new(30.0, 0.0, 4.0, 4.0)], vec![0]);
        assert!(DetectionDataset::from_json(&ds.to_json().unwrap()).is_err());
        let mut ds = sample();
        ds.records[1].id = 10;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn plain_coco_without_info_defaults_to_source_train() {
        let text = r#"{"images":[],"annotations":[],"categories":[{"id":3,"name":"car"}],"licenses":[]}"#;
        let ds = DetectionDataset::from_json(text).unwrap();
        assert_eq!((ds.domain, ds.split), (Domain::Source, Split::Train));
    }
}
