//! Feature-grid storage: per-image `(d, d, f)` activation grids.
//!
//! The on-disk format is a jsonl manifest of `{image_id, d, f}` lines next
//! to a flat little-endian f32 payload (same stem, `.bin` extension) laid
//! out image by image in manifest order, `d*d*f` values each, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid {image_id} has {got} values, expected {expected}")]
    BadLength {
        image_id: String,
        expected: usize,
        got: usize,
    },
    #[error("grid {image_id} component {component} is not finite")]
    NonFinite { image_id: String, component: usize },
    #[error("grid {image_id} is ({d}, {d}, {f}) but the store holds ({store_d}, {store_d}, {store_f})")]
    ShapeMismatch {
        image_id: String,
        d: usize,
        f: usize,
        store_d: usize,
        store_f: usize,
    },
    #[error("duplicate grid for image {0}")]
    Duplicate(String),
    #[error("payload {path} has {got} bytes, manifest implies {expected}")]
    PayloadSize {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("no grid stored for image {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    File(#[from] JsonlError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridManifestLine {
    image_id: String,
    d: usize,
    f: usize,
}

/// One image's activation grid, shaped `(d, d, f)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub image_id: String,
    pub d: usize,
    pub f: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(image_id: impl Into<String>, d: usize, f: usize, data: Vec<f32>) -> Result<Self, GridError> {
        let image_id = image_id.into();
        if data.len() != d * d * f {
            return Err(GridError::BadLength {
                image_id,
                expected: d * d * f,
                got: data.len(),
            });
        }
        if let Some(component) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { image_id, component });
        }
        Ok(FeatureGrid { image_id, d, f, data })
    }
}

/// Immutable set of grids with a uniform shape.
#[derive(Debug, Clone)]
pub struct GridStore {
    d: usize,
    f: usize,
    grids: BTreeMap<String, FeatureGrid>,
}

impl GridStore {
    pub fn from_grids(grids: Vec<FeatureGrid>) -> Result<Self, GridError> {
        let mut store: Option<(usize, usize)> = None;
        let mut map = BTreeMap::new();
        for grid in grids {
            let (d, f) = *store.get_or_insert((grid.d, grid.f));
            if grid.d != d || grid.f != f {
                return Err(GridError::ShapeMismatch {
                    image_id: grid.image_id,
                    d: grid.d,
                    f: grid.f,
                    store_d: d,
                    store_f: f,
                });
            }
            if map.contains_key(&grid.image_id) {
                return Err(GridError::Duplicate(grid.image_id));
            }
            map.insert(grid.image_id.clone(), grid);
        }
        let (d, f) = store.unwrap_or((0, 0));
        Ok(GridStore { d, f, grids: map })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Result<&FeatureGrid, GridError> {
        self.grids
            .get(image_id)
            .ok_or_else(|| GridError::Missing(image_id.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureGrid> {
        self.grids.values()
    }

    /// Mean over the `d*d` cells: an `f`-dimensional image embedding.
    pub fn mean_pooled(&self, image_id: &str) -> Result<Vec<f64>, GridError> {
        let grid = self.get(image_id)?;
        let cells = grid.d * grid.d;
        let mut out = vec![0.0f64; grid.f];
        for cell in 0..cells {
            for (k, slot) in out.iter_mut().enumerate() {
                *slot += grid.data[cell * grid.f + k] as f64;
            }
        }
        for slot in &mut out {
            *slot /= cells as f64;
        }
        Ok(out)
    }
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write manifest + payload. The payload lands next to the manifest with a
/// `.bin` extension.
pub fn write_grids(manifest: &Path, grids: &[FeatureGrid]) -> Result<(), GridError> {
    let lines: Vec<GridManifestLine> = grids
        .iter()
        .map(|g| GridManifestLine {
            image_id: g.image_id.clone(),
            d: g.d,
            f: g.f,
        })
        .collect();
    jsonl::write_jsonl(manifest, &lines)?;
    let mut payload = Vec::new();
    for grid in grids {
        for v in &grid.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = payload_path(manifest);
    fs::write(&bin, payload).map_err(|e| GridError::Io {
        path: bin.display().to_string(),
        source: e,
    })
}

pub fn load_grids(manifest: &Path) -> Result<GridStore, GridError> {
    let lines: Vec<GridManifestLine> = jsonl::read_jsonl(manifest)?;
    let bin = payload_path(manifest);
    let payload = fs::read(&bin).map_err(|e| GridError::Io {
        path: bin.display().to_string(),
        source: e,
    })?;
    let expected: usize = lines.iter().map(|l| l.d * l.d * l.f * 4).sum();
    if payload.len() != expected {
        return Err(GridError::PayloadSize {
            path: bin.display().to_string(),
            expected,
            got: payload.len(),
        });
    }
    let mut grids = Vec::with_capacity(lines.len());
    let mut offset = 0usize;
    for line in lines {
        let count = line.d * line.d * line.f;
        let data: Vec<f32> = payload[offset..offset + count * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += count * 4;
        grids.push(FeatureGrid::new(line.image_id, line.d, line.f, data)?);
    }
    GridStore::from_grids(grids)
}
