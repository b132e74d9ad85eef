use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{io_err, StoreError};
use crate::detect::{BBox, GroundTruth};

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `root/<id>.{png,jpg,jpeg}` with optional `<id>.boxes.json`, `<id>.xml`
    /// and `<id>.mask.png` beside each image; optional `train.txt` and
    /// `eval.txt` list ids per split.
    Flat,
    /// `JPEGImages/`, `Annotations/` (XML), `SegmentationClass/` (PNG) and
    /// `ImageSets/Main/{train,val}.txt`.
    VocLike,
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flat" => Ok(Layout::Flat),
            "voc_like" | "voc-like" | "voc" => Ok(Layout::VocLike),
            _ => Err(format!("unknown layout {s:?} (flat, voc_like)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    pub boxes: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub split: Split,
}

impl DatasetEntry {
    /// Ground-truth boxes from JSON or VOC XML, if the entry has any.
    pub fn ground_truth(&self) -> Result<Option<GroundTruth>, StoreError> {
        let Some(path) = &self.boxes else { return Ok(None) };
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let boxes = if path.extension().is_some_and(|e| e == "xml") {
            parse_voc_boxes(&text).map_err(|reason| StoreError::Corrupt {
                path: path.clone(),
                reason,
            })?
        } else {
            let gt: GroundTruth = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            gt.boxes
        };
        Ok(Some(GroundTruth {
            image: self.id.clone(),
            boxes,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub root: PathBuf,
    pub layout: Layout,
    /// Sorted by id.
    pub entries: Vec<DatasetEntry>,
    /// Files skipped during a non-strict ingest, with reasons.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetEntry> {
        self.entries.binary_search_by(|e| e.id.as_str().cmp(id)).ok().map(|i| &self.entries[i])
    }

    /// Writes each entry's ground truth as `<id>.json` under `dir`.
    pub fn export_ground_truth(&self, dir: &Path) -> Result<usize, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut n = 0;
        for e in &self.entries {
            if let Some(gt) = e.ground_truth()? {
                let path = dir.join(format!("{}.json", e.id));
                let bytes = serde_json::to_vec_pretty(&gt).expect("ground truth serializes");
                crate::fmap::write_atomic(&path, &bytes).map_err(io_err(&path))?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Converts VOC `<bndbox>` elements to half-open pixel boxes. VOC corners
/// are 1-based and inclusive, so `xmin` becomes `xmin - 1` and `xmax` stays.
pub fn parse_voc_boxes(xml: &str) -> Result<Vec<BBox>, String> {
    let bndbox = Regex::new(r"(?s)<bndbox>(.*?)</bndbox>").expect("regex");
    let field = |body: &str, name: &str| -> Result<u32, String> {
        let re = Regex::new(&format!(r"<{name}>\s*([-+0-9.eE]+)\s*</{name}>")).expect("regex");
        let v: f64 = re
            .captures(body)
            .ok_or_else(|| format!("bndbox without <{name}>"))?[1]
            .parse()
            .map_err(|e| format!("<{name}>: {e}"))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(format!("<{name}> out of range: {v}"));
        }
        Ok(v.round() as u32)
    };
    let mut out = Vec::new();
    for cap in bndbox.captures_iter(xml) {
        let body = &cap[1];
        let (xmin, ymin, xmax, ymax) = (field(body, "xmin")?, field(body, "ymin")?, field(body, "xmax")?, field(body, "ymax")?);
        if xmax < xmin || ymax < ymin {
            return Err(format!("inverted box {xmin},{ymin},{xmax},{ymax}"));
        }
        out.push(BBox::new(xmin.saturating_sub(1), ymin.saturating_sub(1), xmax, ymax));
    }
    Ok(out)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    Ok(v)
}

fn image_id(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !IMAGE_EXTS.contains(&ext.as_str()) {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    if stem.ends_with(".mask") {
        return None;
    }
    Some(stem.to_string())
}

fn check_image(path: &Path) -> Result<(), String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    let img = image::load_from_memory(&bytes).map_err(|e| e.to_string())?;
    if img.width() == 0 || img.height() == 0 {
        return Err("zero-sized image".into());
    }
    Ok(())
}

fn read_id_list(path: &Path) -> Result<Option<BTreeSet<String>>, StoreError> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Some(
        text.lines()
            .filter_map(|l| l.split_whitespace().next())
            .map(str::to_string)
            .collect(),
    ))
}

/// Indexes a dataset directory. Images that fail to decode, and box files
/// that fail to parse, are skipped with a warning, or abort the ingest when
/// `strict` is set.
pub fn ingest(root: &Path, layout: Layout, strict: bool) -> Result<Dataset, StoreError> {
    let (image_dir, box_dir, mask_dir, train_list) = match layout {
        Layout::Flat => (root.to_path_buf(), root.to_path_buf(), root.to_path_buf(), root.join("train.txt")),
        Layout::VocLike => (
            root.join("JPEGImages"),
            root.join("Annotations"),
            root.join("SegmentationClass"),
            root.join("ImageSets/Main/train.txt"),
        ),
    };
    let mut warnings = Vec::new();
    let mut fail = |path: &Path, reason: String| -> Result<(), StoreError> {
        if strict {
            return Err(StoreError::Corrupt {
                path: path.to_path_buf(),
                reason,
            });
        }
        log::warn!("skipping {}: {reason}", path.display());
        warnings.push(format!("{}: {reason}", path.display()));
        Ok(())
    };

    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    if image_dir.is_dir() {
        for path in read_dir_sorted(&image_dir)? {
            let Some(id) = image_id(&path) else { continue };
            if images.contains_key(&id) {
                if strict {
                    return Err(StoreError::DuplicateId(id));
                }
                fail(&path, format!("duplicate id {id:?}"))?;
                continue;
            }
            match check_image(&path) {
                Ok(()) => {
                    images.insert(id, path);
                }
                Err(reason) => fail(&path, reason)?,
            }
        }
    } else if layout == Layout::VocLike {
        return Err(StoreError::NotFound(format!("{} (voc_like layout)", image_dir.display())));
    } else {
        return Err(StoreError::NotFound(root.display().to_string()));
    }

    let train = read_id_list(&train_list)?.unwrap_or_default();
    let mut entries = Vec::with_capacity(images.len());
    for (id, image) in images {
        let boxes = match layout {
            Layout::Flat => [box_dir.join(format!("{id}.boxes.json")), box_dir.join(format!("{id}.xml"))]
                .into_iter()
                .find(|p| p.is_file()),
            Layout::VocLike => Some(box_dir.join(format!("{id}.xml"))).filter(|p| p.is_file()),
        };
        let mask = match layout {
            Layout::Flat => mask_dir.join(format!("{id}.mask.png")),
            Layout::VocLike => mask_dir.join(format!("{id}.png")),
        };
        let mut entry = DatasetEntry {
            split: if train.contains(&id) { Split::Train } else { Split::Eval },
            id,
            image,
            boxes,
            mask: Some(mask).filter(|p| p.is_file()),
        };
        if let Err(e) = entry.ground_truth() {
            fail(entry.boxes.as_deref().unwrap_or(root), e.to_string())?;
            entry.boxes = None;
        }
        entries.push(entry);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        layout,
        entries,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voc_boxes_become_half_open() {
        let xml = "<annotation><object><name>cat</name><bndbox><xmin>1</xmin><ymin>5</ymin>\
                   <xmax>10</xmax><ymax>20</ymax></bndbox></object>\
                   <object><bndbox><ymin>2</ymin><xmin>3</xmin><ymax>4</ymax><xmax>6.0</xmax></bndbox></object></annotation>";
        assert_eq!(parse_voc_boxes(xml).unwrap(), vec![BBox::new(0, 4, 10, 20), BBox::new(2, 1, 6, 4)]);
        assert!(parse_voc_boxes("<bndbox><xmin>1</xmin></bndbox>").is_err());
        assert_eq!(parse_voc_boxes("<annotation/>").unwrap(), vec![]);
    }
}
