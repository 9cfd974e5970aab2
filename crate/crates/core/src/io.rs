//! File formats: the `RTFT` binary tensor container, the text+blob weight
//! manifest, 16-bit PNG depth export with a range sidecar, and ASCII PLY
//! pointmap export. Round trips are bit-exact.

use crate::dense::{DenseMap, MapKind, Precision, ValidityMask};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::refiner::{NormKind, RefinerConfig, RefinerParams};
use crate::select::PixelSelection;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"RTFT";
const VERSION: u16 = 1;

/// Typed payload of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::I32(_) => 3,
            TensorData::U8(_) => 4,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::I32(_) => "i32",
            TensorData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

/// One `RTFT` tensor: little-endian, row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > u8::MAX as usize || data.len() != expect {
            return Err(Error::Format(format!(
                "tensor dims {dims:?} do not match payload of {} values",
                data.len()
            )));
        }
        Ok(TensorFile { dims, data })
    }

    /// Serialized byte length (header + payload).
    pub fn byte_len(&self) -> usize {
        let elem = match self.data {
            TensorData::F32(_) => 4,
            TensorData::F64(_) => 8,
            TensorData::I32(_) => 4,
            TensorData::U8(_) => 1,
        };
        4 + 2 + 1 + 1 + 4 * self.dims.len() + elem * self.data.len()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.data.dtype_code(), self.dims.len() as u8])?;
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::I32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut hdr = [0u8; 4];
        r.read_exact(&mut hdr)?;
        let version = u16::from_le_bytes([hdr[0], hdr[1]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (dtype, ndim) = (hdr[2], hdr[3] as usize);
        if ndim == 0 {
            return Err(Error::Format("tensor needs at least one dim".to_string()));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let count: usize = dims.iter().product();
        let data = match dtype {
            1 => {
                let mut buf = vec![0u8; count * 4];
                r.read_exact(&mut buf)?;
                TensorData::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            2 => {
                let mut buf = vec![0u8; count * 8];
                r.read_exact(&mut buf)?;
                TensorData::F64(
                    buf.chunks_exact(8)
                        .map(|c| {
                            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                        })
                        .collect(),
                )
            }
            3 => {
                let mut buf = vec![0u8; count * 4];
                r.read_exact(&mut buf)?;
                TensorData::I32(
                    buf.chunks_exact(4)
                        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            4 => {
                let mut buf = vec![0u8; count];
                r.read_exact(&mut buf)?;
                TensorData::U8(buf)
            }
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        TensorFile::new(dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let t = Self::read_from(&mut f)?;
        Ok(t)
    }
}

/// DenseMap → `[H, W, C]` tensor; dtype follows the map's precision tag.
pub fn dense_to_tensor(map: &DenseMap) -> TensorFile {
    let dims = vec![map.height(), map.width(), map.channels()];
    let data = match map.precision() {
        Precision::Double => TensorData::F64(map.values().to_vec()),
        Precision::Single => TensorData::F32(map.values().iter().map(|&v| v as f32).collect()),
    };
    TensorFile::new(dims, data).expect("shape is consistent by construction")
}

/// `[H, W, C]` (or `[H, W]` for single-channel) tensor → DenseMap.
pub fn tensor_to_dense(t: &TensorFile, kind: MapKind) -> Result<DenseMap> {
    let (h, w, c) = match t.dims.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(Error::Format(format!(
                "dense map tensor needs 2 or 3 dims, got {other:?}"
            )))
        }
    };
    let (values, precision) = match &t.data {
        TensorData::F64(v) => (v.clone(), Precision::Double),
        TensorData::F32(v) => (v.iter().map(|&x| x as f64).collect(), Precision::Single),
        other => {
            return Err(Error::Format(format!(
                "dense map tensor must be f32 or f64, got {}",
                other.dtype_name()
            )))
        }
    };
    Ok(DenseMap::new(h, w, c, kind, values)?.with_precision(precision))
}

pub fn mask_to_tensor(mask: &ValidityMask) -> TensorFile {
    TensorFile::new(
        vec![mask.height(), mask.width()],
        TensorData::U8(mask.bits().iter().map(|&b| b as u8).collect()),
    )
    .expect("consistent shape")
}

pub fn tensor_to_mask(t: &TensorFile) -> Result<ValidityMask> {
    let [h, w] = t.dims.as_slice() else {
        return Err(Error::Format("mask tensor needs 2 dims".to_string()));
    };
    let TensorData::U8(bits) = &t.data else {
        return Err(Error::Format("mask tensor must be u8".to_string()));
    };
    Ok(ValidityMask::new(*h, *w, bits.iter().map(|&b| b != 0).collect())?)
}

/// PixelSelection → `[N, 3]` i32 tensor of (row, col, is_core).
pub fn selection_to_tensor(sel: &PixelSelection) -> TensorFile {
    let mut data = Vec::with_capacity(sel.len() * 3);
    for (i, &(r, c)) in sel.coords().iter().enumerate() {
        data.push(r as i32);
        data.push(c as i32);
        data.push(sel.is_core()[i] as i32);
    }
    TensorFile::new(vec![sel.len(), 3], TensorData::I32(data)).expect("consistent shape")
}

// ── Weight manifest ──────────────────────────────────────────────────────────

fn norm_flag(norm: NormKind) -> i32 {
    match norm {
        NormKind::None => 0,
        NormKind::SiteNorm => 1,
    }
}

fn config_tensor(cfg: &RefinerConfig) -> TensorFile {
    let mut data = vec![
        cfg.levels as i32,
        cfg.kernel_size as i32,
        cfg.in_channels as i32,
        cfg.geo_channels as i32,
        cfg.conf_logits as i32,
        norm_flag(cfg.norm),
    ];
    data.extend(cfg.channels.iter().map(|&c| c as i32));
    TensorFile::new(vec![data.len()], TensorData::I32(data)).expect("consistent shape")
}

fn config_from_tensor(t: &TensorFile) -> Result<RefinerConfig> {
    let TensorData::I32(v) = &t.data else {
        return Err(Error::Format("config tensor must be i32".to_string()));
    };
    if v.len() < 7 {
        return Err(Error::Format("config tensor too short".to_string()));
    }
    let levels = v[0] as usize;
    if v.len() != 6 + levels {
        return Err(Error::Format(
            "config tensor length disagrees with level count".to_string(),
        ));
    }
    let cfg = RefinerConfig {
        levels,
        channels: v[6..].iter().map(|&c| c as usize).collect(),
        kernel_size: v[1] as usize,
        in_channels: v[2] as usize,
        geo_channels: v[3] as usize,
        conf_logits: v[4] as usize,
        norm: if v[5] == 0 {
            NormKind::None
        } else {
            NormKind::SiteNorm
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Write refiner + fusion parameters as a weight manifest: text header lines
/// `name dtype shape offset` terminated by `end`, followed by concatenated
/// tensor records at those offsets (relative to the end of the header).
pub fn save_weights(
    path: &Path,
    cfg: &RefinerConfig,
    refiner: &RefinerParams,
    fusion: &FusionParams,
) -> Result<()> {
    refiner.validate(cfg)?;
    let mut entries: Vec<(String, TensorFile)> =
        vec![("config".to_string(), config_tensor(cfg))];
    for (name, dims, data) in refiner.tensor_entries() {
        entries.push((name, TensorFile::new(dims, TensorData::F64(data))?));
    }
    for (name, dims, data) in fusion.tensor_entries() {
        entries.push((name, TensorFile::new(dims, TensorData::F64(data))?));
    }
    let mut header = String::new();
    header.push_str(&format!("tensors {}\n", entries.len()));
    let mut offset = 0usize;
    for (name, t) in &entries {
        let shape = t
            .dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        header.push_str(&format!("{name} {} {shape} {offset}\n", t.data.dtype_name()));
        offset += t.byte_len();
    }
    header.push_str("end\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    for (_, t) in &entries {
        t.write_to(&mut f)?;
    }
    Ok(())
}

/// Parse a weight manifest back into config + parameters.
pub fn load_weights(path: &Path) -> Result<(RefinerConfig, RefinerParams, FusionParams)> {
    let bytes = std::fs::read(path)?;
    let header_end = find_header_end(&bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("manifest header is not UTF-8".to_string()))?;
    let mut lines = header.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty manifest".to_string()))?;
    let count: usize = first
        .strip_prefix("tensors ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Format("manifest must start with `tensors <n>`".to_string()))?;
    let blob = &bytes[header_end..];
    let mut tensors: HashMap<String, TensorFile> = HashMap::new();
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format("manifest header truncated".to_string()))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, shape, offset] = parts.as_slice() else {
            return Err(Error::Format(format!("bad manifest line `{line}`")));
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Format(format!("bad offset in `{line}`")))?;
        if offset >= blob.len() {
            return Err(Error::Format(format!("offset {offset} beyond payload")));
        }
        let mut cursor = &blob[offset..];
        let t = TensorFile::read_from(&mut cursor)?;
        let shape_dims: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("bad shape in `{line}`")))?;
        if t.dims != shape_dims || t.data.dtype_name() != *dtype {
            return Err(Error::Format(format!(
                "tensor `{name}` disagrees with its manifest line"
            )));
        }
        tensors.insert(name.to_string(), t);
    }
    let cfg = config_from_tensor(
        tensors
            .get("config")
            .ok_or_else(|| Error::Format("manifest is missing `config`".to_string()))?,
    )?;
    let as_f64 = |name: &str| -> Option<Vec<f64>> {
        tensors.get(name).and_then(|t| match &t.data {
            TensorData::F64(v) => Some(v.clone()),
            _ => None,
        })
    };
    let refiner = RefinerParams::from_tensor_entries(&cfg, &as_f64)?;
    let fusion = FusionParams::from_tensor_entries(cfg.geo_channels, &as_f64)?;
    refiner.validate(&cfg)?;
    Ok((cfg, refiner, fusion))
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    // The header is newline-delimited ASCII ending with an `end` line.
    let mut pos = 0;
    while pos < bytes.len() {
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| Error::Format("manifest header has no `end` line".to_string()))?;
        if &bytes[pos..line_end] == b"end" {
            return Ok(line_end + 1);
        }
        pos = line_end + 1;
    }
    Err(Error::Format("manifest header has no `end` line".to_string()))
}

// ── Exports ──────────────────────────────────────────────────────────────────

/// 16-bit grayscale PNG, min–max normalized over valid pixels; the range
/// goes into `<stem>.range.txt` so the scale is recoverable.
pub fn export_depth_png(map: &DenseMap, mask: &ValidityMask, path: &Path) -> Result<()> {
    if map.kind() != MapKind::Depth {
        return Err(Error::invalid_argument(
            "PNG export expects a depth map".to_string(),
        ));
    }
    let (h, w) = (map.height(), map.width());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                lo = lo.min(map.get(r, c, 0));
                hi = hi.max(map.get(r, c, 0));
            }
        }
    }
    if !lo.is_finite() {
        return Err(Error::EmptyEvaluation(
            "no valid pixels to export".to_string(),
        ));
    }
    let span = hi - lo;
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = if mask.get(r, c) && span > 0.0 {
                (((map.get(r, c, 0) - lo) / span) * 65535.0).round() as u16
            } else {
                0
            };
            img.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("PNG encode failed: {e}")))?;
    let sidecar = path.with_extension("range.txt");
    std::fs::write(sidecar, format!("min={lo}\nmax={hi}\n"))?;
    Ok(())
}

/// ASCII PLY with one double-precision vertex per valid pixel.
pub fn export_pointmap_ply(map: &DenseMap, mask: &ValidityMask, path: &Path) -> Result<()> {
    if map.kind() != MapKind::Pointmap {
        return Err(Error::invalid_argument(
            "PLY export expects a pointmap".to_string(),
        ));
    }
    let mut body = String::new();
    let mut count = 0usize;
    for r in 0..map.height() {
        for c in 0..map.width() {
            if mask.get(r, c) {
                let p = map.pixel(r, c);
                body.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
                count += 1;
            }
        }
    }
    let header = format!(
        "ply\nformat ascii 1.0\nelement vertex {count}\nproperty double x\nproperty double y\nproperty double z\nend_header\n"
    );
    std::fs::write(path, header + &body)?;
    Ok(())
}

/// Export a geometry map: depth → PNG + sidecar + tensor; pointmap → PLY +
/// tensor. Returns the written paths.
pub fn export_outputs(
    map: &DenseMap,
    mask: &ValidityMask,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let tensor_path = dir.join(format!("{stem}.rtft"));
    dense_to_tensor(map).save(&tensor_path)?;
    written.push(tensor_path);
    match map.kind() {
        MapKind::Depth => {
            let png = dir.join(format!("{stem}.png"));
            export_depth_png(map, mask, &png)?;
            written.push(png.with_extension("range.txt"));
            written.push(png);
        }
        MapKind::Pointmap => {
            let ply = dir.join(format!("{stem}.ply"));
            export_pointmap_ply(map, mask, &ply)?;
            written.push(ply);
        }
        _ => {}
    }
    Ok(written)
}
