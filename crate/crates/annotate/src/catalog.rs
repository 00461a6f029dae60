//! Images and part masks the service can serve.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use reid_core::annotation::PartMask;
use reid_core::evaluate::{Camera, Dataset, DatasetEntry};
use serde::Deserialize;

use crate::error::ServiceError;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const PARTS_FILE: &str = "parts.csv";

#[derive(Debug, Deserialize)]
struct PartRow {
    image_id: String,
    part_id: String,
    mask_path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    images: Vec<DatasetEntry>,
    by_id: HashMap<String, usize>,
    parts: BTreeMap<String, PartMask>,
}

impl Catalog {
    pub fn new(dataset: Dataset, parts: Vec<PartMask>) -> Result<Self, ServiceError> {
        let ids = dataset.image_ids()?;
        let by_id = ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut cat = Self {
            images: dataset.entries,
            by_id,
            parts: BTreeMap::new(),
        };
        for p in parts {
            if !cat.by_id.contains_key(&p.image_id) {
                return Err(ServiceError::BadRequest(format!(
                    "part {} refers to unknown image {}",
                    p.part_id, p.image_id
                )));
            }
            if cat.parts.contains_key(&p.part_id) {
                return Err(ServiceError::BadRequest(format!("duplicate part id {}", p.part_id)));
            }
            cat.parts.insert(p.part_id.clone(), p);
        }
        Ok(cat)
    }

    /// Reads `manifest.csv` and `parts.csv` from `dir`. Relative paths in
    /// either file are relative to `dir`.
    pub fn load(dir: &Path) -> Result<Self, ServiceError> {
        let dataset = Dataset::load(&dir.join(MANIFEST_FILE))?;
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(dir.join(PARTS_FILE))
            .map_err(reid_core::Error::from)?;
        let mut parts = Vec::new();
        for row in rdr.deserialize::<PartRow>() {
            let row = row.map_err(reid_core::Error::from)?;
            let path = if row.mask_path.is_relative() {
                dir.join(&row.mask_path)
            } else {
                row.mask_path
            };
            parts.push(PartMask::load(&path, row.image_id, row.part_id)?);
        }
        Self::new(dataset, parts)
    }

    pub fn image(&self, id: &str) -> Option<&DatasetEntry> {
        self.by_id.get(id).map(|&i| &self.images[i])
    }

    pub fn part(&self, id: &str) -> Option<&PartMask> {
        self.parts.get(id)
    }

    /// Parts ordered by part id.
    pub fn parts(&self) -> impl Iterator<Item = &PartMask> {
        self.parts.values()
    }

    /// The part's cross-view match and the pool it is hidden in: the first
    /// image of the same identity in the other camera, and every image of
    /// that camera.
    pub fn gallery_for(&self, part: &PartMask) -> Result<(String, Vec<String>), ServiceError> {
        let own = self
            .image(&part.image_id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {}", part.image_id)))?;
        let other = match own.camera {
            Camera::A => Camera::B,
            Camera::B => Camera::A,
        };
        let pool: Vec<&DatasetEntry> = self.images.iter().filter(|e| e.camera == other).collect();
        let target = pool
            .iter()
            .find(|e| e.identity == own.identity)
            .ok_or_else(|| ServiceError::Conflict(format!("image {} has no match in camera {other}", part.image_id)))?
            .image_id();
        Ok((target, pool.iter().map(|e| e.image_id()).collect()))
    }
}
