//! Ranking weights as eight CSV lattices, one per feature slot, each with
//! one row per patch row and one column per patch column.

use std::path::Path;

use reid_core::salmatch::{RankModel, PHI_PER_PATCH};
use reid_core::{Error, Result};

pub const SLOT_NAMES: [&str; PHI_PER_PATCH] = [
    "alpha_1", "alpha_2", "alpha_3", "alpha_4", "beta_1", "beta_2", "beta_3", "beta_4",
];

pub fn lattice_path(dir: &Path, slot: usize) -> std::path::PathBuf {
    dir.join(format!("{}.csv", SLOT_NAMES[slot]))
}

/// Writes the lattices into `dir`. With `normalize` every weight is divided
/// by the largest absolute weight, so the lattices share one scale in
/// [-1, 1].
pub fn export(model: &RankModel, dir: &Path, normalize: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let scale = if normalize {
        let max = model.w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            1.0 / max
        } else {
            1.0
        }
    } else {
        1.0
    };
    for slot in 0..PHI_PER_PATCH {
        let map = model.slot_map(slot);
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(lattice_path(dir, slot))?;
        for row in map.chunks(model.cols) {
            w.write_record(row.iter().map(|v| (v * scale).to_string()))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Reads lattices written by [`export`] back into a model.
pub fn import(dir: &Path) -> Result<RankModel> {
    let mut maps = Vec::with_capacity(PHI_PER_PATCH);
    let mut shape = None;
    for (slot, name) in SLOT_NAMES.iter().enumerate() {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(lattice_path(dir, slot))?;
        let mut rows = 0;
        let mut values = Vec::new();
        for rec in rdr.records() {
            for v in rec?.iter() {
                values.push(v.parse::<f64>().map_err(|e| Error::Format(format!("{name}: {e}")))?);
            }
            rows += 1;
        }
        let cols = values.len().checked_div(rows).unwrap_or(0);
        match shape {
            None => shape = Some((rows, cols)),
            Some(s) if s != (rows, cols) => {
                return Err(Error::ShapeMismatch {
                    left: s,
                    right: (rows, cols),
                })
            }
            Some(_) => {}
        }
        maps.push(values);
    }
    let (rows, cols) = shape.unwrap_or((0, 0));
    let w = (0..rows * cols).flat_map(|i| maps.iter().map(move |m| m[i])).collect();
    RankModel::new(rows, cols, w)
}
