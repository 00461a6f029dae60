//! Binary stores for descriptor grids, saliency maps and ranking models.
//! All integers are little-endian `u32`, all descriptor and saliency values
//! little-endian `f32`, model weights little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::PatchGrid;
use crate::saliency::SaliencyMap;
use crate::salmatch::RankModel;

pub const DESCRIPTOR_MAGIC: &[u8; 7] = b"RZSAL1\0";
pub const SALIENCY_MAGIC: &[u8; 7] = b"RZSALM1";
pub const MODEL_MAGIC: &[u8; 4] = b"RZW1";

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8 in store: {e}")))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)?;
    if buf != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

/// Path of the image-id sidecar that accompanies a descriptor store.
pub fn ids_path(store: &Path) -> PathBuf {
    let mut name = store.as_os_str().to_owned();
    name.push(".ids");
    PathBuf::from(name)
}

/// Writes the descriptor store body. Image ids are not part of this
/// format; see [`save_grids`].
pub fn write_grids<W: Write>(grids: &[PatchGrid], mut w: W) -> Result<()> {
    w.write_all(DESCRIPTOR_MAGIC)?;
    write_u32(&mut w, grids.len())?;
    for g in grids {
        write_u32(&mut w, g.rows())?;
        write_u32(&mut w, g.cols())?;
        write_u32(&mut w, g.dim())?;
        write_str(&mut w, &g.camera)?;
        write_str(&mut w, g.identity.as_deref().unwrap_or(""))?;
    }
    for g in grids {
        for v in g.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_grids<R: Read>(mut r: R) -> Result<Vec<PatchGrid>> {
    check_magic(&mut r, DESCRIPTOR_MAGIC)?;
    let count = read_u32(&mut r)?;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rows = read_u32(&mut r)?;
        let cols = read_u32(&mut r)?;
        let dim = read_u32(&mut r)?;
        let camera = read_str(&mut r)?;
        let identity = read_str(&mut r)?;
        headers.push((rows, cols, dim, camera, (!identity.is_empty()).then_some(identity)));
    }
    headers
        .into_iter()
        .map(|(rows, cols, dim, camera, identity)| {
            let data = read_f32s(&mut r, rows * cols * dim)?;
            Ok(PatchGrid::from_descriptors(rows, cols, dim, data)?.with_meta("", camera, identity))
        })
        .collect()
}

/// Writes the store and its `.ids` sidecar (one image id per line).
pub fn save_grids(path: &Path, grids: &[PatchGrid]) -> Result<()> {
    write_grids(grids, BufWriter::new(File::create(path)?))?;
    let mut ids = BufWriter::new(File::create(ids_path(path))?);
    for g in grids {
        writeln!(ids, "{}", g.image_id)?;
    }
    ids.flush()?;
    Ok(())
}

/// Reads a store; image ids come from the sidecar when present and default
/// to the grid's index otherwise.
pub fn load_grids(path: &Path) -> Result<Vec<PatchGrid>> {
    let mut grids = read_grids(BufReader::new(File::open(path)?))?;
    let ids = match std::fs::read_to_string(ids_path(path)) {
        Ok(text) => Some(text.lines().map(str::to_string).collect::<Vec<_>>()),
        Err(e) if e.kind() == ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    match ids {
        Some(ids) if ids.len() == grids.len() => {
            for (g, id) in grids.iter_mut().zip(ids) {
                g.image_id = id;
            }
        }
        Some(ids) => {
            return Err(Error::LengthMismatch {
                expected: grids.len(),
                actual: ids.len(),
            })
        }
        None => {
            for (i, g) in grids.iter_mut().enumerate() {
                g.image_id = i.to_string();
            }
        }
    }
    Ok(grids)
}

pub fn write_saliency<W: Write>(maps: &[SaliencyMap], mut w: W) -> Result<()> {
    w.write_all(SALIENCY_MAGIC)?;
    for m in maps {
        write_u32(&mut w, m.rows)?;
        write_u32(&mut w, m.cols)?;
        for v in m.score.iter().chain(&m.prob) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Maps follow one another until end of file.
pub fn read_saliency<R: Read>(mut r: R) -> Result<Vec<SaliencyMap>> {
    check_magic(&mut r, SALIENCY_MAGIC)?;
    let mut maps = Vec::new();
    loop {
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            break;
        }
        let mut rest = [0u8; 3];
        r.read_exact(&mut rest)?;
        let rows = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        let cols = read_u32(&mut r)?;
        let n = rows * cols;
        let score = read_f32s(&mut r, n)?.into_iter().map(f64::from).collect();
        let prob = read_f32s(&mut r, n)?.into_iter().map(f64::from).collect();
        maps.push(SaliencyMap {
            rows,
            cols,
            score,
            prob,
        });
    }
    Ok(maps)
}

pub fn save_saliency(path: &Path, maps: &[SaliencyMap]) -> Result<()> {
    write_saliency(maps, BufWriter::new(File::create(path)?))
}

pub fn load_saliency(path: &Path) -> Result<Vec<SaliencyMap>> {
    read_saliency(BufReader::new(File::open(path)?))
}

pub fn write_model<W: Write>(model: &RankModel, mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    write_u32(&mut w, model.rows)?;
    write_u32(&mut w, model.cols)?;
    for v in &model.w {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<RankModel> {
    check_magic(&mut r, MODEL_MAGIC)?;
    let rows = read_u32(&mut r)?;
    let cols = read_u32(&mut r)?;
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % 8 != 0 {
        return Err(Error::Format("model weights are not a whole number of f64".into()));
    }
    let w = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    RankModel::new(rows, cols, w)
}

pub fn save_model(path: &Path, model: &RankModel) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<RankModel> {
    read_model(BufReader::new(File::open(path)?))
}

/// Writes one 2-D map as a binary greyscale PGM, scaled so the maximum is
/// white.
pub fn write_pgm<W: Write>(rows: usize, cols: usize, values: &[f64], mut w: W) -> Result<()> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
