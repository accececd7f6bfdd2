//! CT volumes and everything that moves them: a MetaImage-subset parser,
//! world/voxel coordinate transforms, slice-triplet construction for the 2D
//! detector, the annotation/candidate CSV exchange formats, and a synthetic
//! phantom generator.

mod phantom;

pub use phantom::{generate_phantom, PhantomParams};

use std::path::Path;

use crate::tensor::Tensor;
use crate::util::fmt_float;
use crate::{Error, Result};

/// A CT scan: voxel grid plus the metadata that anchors it in world space.
///
/// Voxel data is stored x-fastest (`idx = x + nx*(y + ny*z)`), in Hounsfield
/// units. World coordinates are millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    series_uid: String,
    extents: (usize, usize, usize),
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f64>,
}

impl CtVolume {
    pub fn new(
        series_uid: impl Into<String>,
        extents: (usize, usize, usize),
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f64>,
    ) -> Result<Self> {
        let (nx, ny, nz) = extents;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume extents must be positive, got {extents:?}"
            )));
        }
        if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if data.len() != nx * ny * nz {
            return Err(Error::InvalidArgument(format!(
                "extents {extents:?} imply {} voxels, got {}",
                nx * ny * nz,
                data.len()
            )));
        }
        Ok(CtVolume {
            series_uid: series_uid.into(),
            extents,
            spacing,
            origin,
            data,
        })
    }

    pub fn series_uid(&self) -> &str {
        &self.series_uid
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn hu(&self, x: usize, y: usize, z: usize) -> f64 {
        let (nx, ny, _) = self.extents;
        self.data[x + nx * (y + ny * z)]
    }

    /// HU at a voxel index, or `fill` when any coordinate is out of bounds.
    pub fn hu_or(&self, x: isize, y: isize, z: isize, fill: f64) -> f64 {
        let (nx, ny, nz) = self.extents;
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            return fill;
        }
        self.hu(x as usize, y as usize, z as usize)
    }

    /// One axial plane, `ny * nx` values.
    pub fn slice(&self, z: usize) -> &[f64] {
        let (nx, ny, _) = self.extents;
        &self.data[z * nx * ny..(z + 1) * nx * ny]
    }

    /// `(point - origin) / spacing`, per axis. Points outside the volume map
    /// to coordinates outside `[0, extent)`; nothing is clamped.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Exact inverse of [`CtVolume::world_to_voxel`].
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        [
            v[0] * self.spacing[0] + self.origin[0],
            v[1] * self.spacing[1] + self.origin[1],
            v[2] * self.spacing[2] + self.origin[2],
        ]
    }

    /// Whether a continuous voxel coordinate lies inside the grid.
    pub fn contains_voxel(&self, v: [f64; 3]) -> bool {
        let (nx, ny, nz) = self.extents;
        v[0] >= 0.0
            && v[1] >= 0.0
            && v[2] >= 0.0
            && v[0] < nx as f64
            && v[1] < ny as f64
            && v[2] < nz as f64
    }
}

// ---------------------------------------------------------------------------
// MetaImage subset
// ---------------------------------------------------------------------------

/// Supported MetaImage element types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
}

impl ElementType {
    fn byte_size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }
}

/// Parse a MetaImage header plus its raw payload.
///
/// The header is line-oriented `Key = Value` text (LF or CRLF). Required
/// keys: `NDims` (must be 3), `DimSize`, `ElementSpacing`, `Offset`,
/// `ElementType` (`MET_SHORT` or `MET_FLOAT`), `ElementDataFile`. Unknown
/// keys are ignored. The payload is little-endian, x-fastest.
pub fn parse_mhd(header_text: &str, raw: &[u8], series_uid: &str) -> Result<CtVolume> {
    let mut ndims = None;
    let mut dim_size = None;
    let mut spacing = None;
    let mut offset = None;
    let mut etype = None;
    let mut data_file = None;
    for line in header_text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse(format!(
                "malformed MetaImage header line (expected `Key = Value`): {line:?}"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "NDims" => ndims = Some(value.to_string()),
            "DimSize" => dim_size = Some(parse_triplet::<usize>(value, "DimSize")?),
            "ElementSpacing" => spacing = Some(parse_triplet::<f64>(value, "ElementSpacing")?),
            "Offset" => offset = Some(parse_triplet::<f64>(value, "Offset")?),
            "ElementType" => {
                etype = Some(match value {
                    "MET_SHORT" => ElementType::Short,
                    "MET_FLOAT" => ElementType::Float,
                    other => {
                        return Err(Error::Parse(format!(
                            "unsupported ElementType {other:?} (supported: MET_SHORT, MET_FLOAT)"
                        )))
                    }
                })
            }
            "ElementDataFile" => data_file = Some(value.to_string()),
            _ => {}
        }
    }
    let missing = |key: &str| Error::Parse(format!("missing required MetaImage key {key}"));
    let ndims = ndims.ok_or_else(|| missing("NDims"))?;
    if ndims != "3" {
        return Err(Error::Parse(format!("NDims must be 3, got {ndims}")));
    }
    let [nx, ny, nz] = dim_size.ok_or_else(|| missing("DimSize"))?;
    let spacing = spacing.ok_or_else(|| missing("ElementSpacing"))?;
    let origin = offset.ok_or_else(|| missing("Offset"))?;
    let etype = etype.ok_or_else(|| missing("ElementType"))?;
    let _ = data_file.ok_or_else(|| missing("ElementDataFile"))?;

    let count = nx * ny * nz;
    let expected = count * etype.byte_size();
    if raw.len() != expected {
        return Err(Error::Parse(format!(
            "payload byte length mismatch: DimSize {nx} {ny} {nz} with {} needs {expected} bytes, got {}",
            etype.name(),
            raw.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    match etype {
        ElementType::Short => {
            for c in raw.chunks_exact(2) {
                data.push(i16::from_le_bytes([c[0], c[1]]) as f64);
            }
        }
        ElementType::Float => {
            for c in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
    }
    CtVolume::new(series_uid, (nx, ny, nz), spacing, origin, data)
}

fn parse_triplet<T: std::str::FromStr>(value: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!(
            "{key} must hold 3 values, got {value:?}"
        )));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::Parse(format!("bad numeric {p:?} in {key}")))?,
        );
    }
    Ok(out.try_into().map_err(|_| unreachable!()).unwrap())
}

/// Render the MetaImage header for a volume.
pub fn write_mhd_header(vol: &CtVolume, etype: ElementType, data_file: &str) -> String {
    let (nx, ny, nz) = vol.extents();
    let s = vol.spacing();
    let o = vol.origin();
    format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         DimSize = {nx} {ny} {nz}\n\
         ElementSpacing = {} {} {}\n\
         Offset = {} {} {}\n\
         ElementType = {}\n\
         ElementDataFile = {data_file}\n",
        s[0], s[1], s[2], o[0], o[1], o[2],
        etype.name()
    )
}

/// Encode voxel data as a raw payload. `MET_SHORT` rounds to the nearest
/// representable value; `MET_FLOAT` narrows to f32.
pub fn encode_raw(vol: &CtVolume, etype: ElementType) -> Vec<u8> {
    let mut out = Vec::with_capacity(vol.data().len() * etype.byte_size());
    match etype {
        ElementType::Short => {
            for &v in vol.data() {
                let clamped = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.extend_from_slice(&clamped.to_le_bytes());
            }
        }
        ElementType::Float => {
            for &v in vol.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Load a `.mhd`/`.raw` pair; the series uid is the header's file stem.
pub fn load_volume(mhd_path: &Path) -> Result<CtVolume> {
    let header =
        std::fs::read_to_string(mhd_path).map_err(|e| Error::io(mhd_path, e))?;
    let uid = mhd_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let data_file = header
        .lines()
        .find_map(|l| {
            let l = l.trim_end_matches('\r');
            l.split_once('=').and_then(|(k, v)| {
                (k.trim() == "ElementDataFile").then(|| v.trim().to_string())
            })
        })
        .ok_or_else(|| Error::Parse("missing required MetaImage key ElementDataFile".into()))?;
    let raw_path = mhd_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&data_file);
    let raw = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    parse_mhd(&header, &raw, &uid)
}

/// Save a volume as a `.mhd` header plus sibling `.raw` payload.
pub fn save_volume(vol: &CtVolume, mhd_path: &Path, etype: ElementType) -> Result<()> {
    let raw_name = mhd_path
        .with_extension("raw")
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume.raw".into());
    let header = write_mhd_header(vol, etype, &raw_name);
    std::fs::write(mhd_path, header).map_err(|e| Error::io(mhd_path, e))?;
    let raw_path = mhd_path.with_extension("raw");
    std::fs::write(&raw_path, encode_raw(vol, etype)).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Annotations and candidates
// ---------------------------------------------------------------------------

/// Ground-truth nodule: world-space center and diameter in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub series_uid: String,
    pub center: [f64; 3],
    pub diameter_mm: f64,
}

/// Which stage produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateSource {
    Detector,
    Reducer,
}

/// A proposed nodule location handed between stages: world-space point plus
/// a confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub series_uid: String,
    pub center: [f64; 3],
    pub probability: f64,
    pub source: CandidateSource,
}

pub const ANNOTATION_HEADER: &str = "seriesuid,coordX,coordY,coordZ,diameter_mm";
pub const CANDIDATE_HEADER: &str = "seriesuid,coordX,coordY,coordZ,probability";

fn parse_field(row: usize, column: &str, field: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Csv {
        row,
        column: column.to_string(),
        message: format!("bad numeric {field:?}"),
    })
}

fn split_rows(text: &str, header: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    let got = lines.next().map(|l| l.trim_end_matches('\r')).unwrap_or("");
    if got != header {
        return Err(Error::Parse(format!(
            "missing or wrong CSV header: expected {header:?}, got {got:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if fields.len() != 5 {
            return Err(Error::Csv {
                row: i + 1,
                column: "*".into(),
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

pub fn read_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, f) in split_rows(text, ANNOTATION_HEADER)?.into_iter().enumerate() {
        let row = i + 1;
        let diameter = parse_field(row, "diameter_mm", &f[4])?;
        if diameter <= 0.0 {
            return Err(Error::Csv {
                row,
                column: "diameter_mm".into(),
                message: format!("diameter must be positive, got {diameter}"),
            });
        }
        out.push(Annotation {
            series_uid: f[0].clone(),
            center: [
                parse_field(row, "coordX", &f[1])?,
                parse_field(row, "coordY", &f[2])?,
                parse_field(row, "coordZ", &f[3])?,
            ],
            diameter_mm: diameter,
        });
    }
    Ok(out)
}

pub fn write_annotations(annotations: &[Annotation]) -> String {
    let mut s = String::from(ANNOTATION_HEADER);
    s.push('\n');
    for a in annotations {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            a.series_uid,
            fmt_float(a.center[0]),
            fmt_float(a.center[1]),
            fmt_float(a.center[2]),
            fmt_float(a.diameter_mm)
        ));
    }
    s
}

pub fn read_candidates(text: &str) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (i, f) in split_rows(text, CANDIDATE_HEADER)?.into_iter().enumerate() {
        let row = i + 1;
        let probability = parse_field(row, "probability", &f[4])?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Csv {
                row,
                column: "probability".into(),
                message: format!("probability must be in [0,1], got {probability}"),
            });
        }
        out.push(Candidate {
            series_uid: f[0].clone(),
            center: [
                parse_field(row, "coordX", &f[1])?,
                parse_field(row, "coordY", &f[2])?,
                parse_field(row, "coordZ", &f[3])?,
            ],
            probability,
            source: CandidateSource::Detector,
        });
    }
    Ok(out)
}

pub fn write_candidates(candidates: &[Candidate]) -> String {
    let mut s = String::from(CANDIDATE_HEADER);
    s.push('\n');
    for c in candidates {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            c.series_uid,
            fmt_float(c.center[0]),
            fmt_float(c.center[1]),
            fmt_float(c.center[2]),
            fmt_float(c.probability)
        ));
    }
    s
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_annotations(&text)
}

pub fn save_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    std::fs::write(path, write_annotations(annotations)).map_err(|e| Error::io(path, e))
}

pub fn load_candidates(path: &Path) -> Result<Vec<Candidate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_candidates(&text)
}

pub fn save_candidates(path: &Path, candidates: &[Candidate]) -> Result<()> {
    std::fs::write(path, write_candidates(candidates)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Slice triplets
// ---------------------------------------------------------------------------

/// Three neighboring axial slices rescaled to a square detector input.
///
/// Pixel values stay in HU; the detector applies its own normalization.
/// The recorded source extents let detected box centers map back to voxel
/// coordinates: image pixel `u` corresponds to voxel `x = (u+0.5)*nx/E - 0.5`.
#[derive(Debug, Clone)]
pub struct SliceImage {
    pub series_uid: String,
    pub z_index: usize,
    /// `[3, E, E]`: slices z-1, z, z+1 (clamped at volume edges).
    pub data: Tensor,
    pub source_extents: (usize, usize),
    pub target_extent: usize,
}

impl SliceImage {
    /// Image pixel coordinates to continuous in-plane voxel coordinates.
    pub fn image_to_voxel(&self, px: (f64, f64)) -> (f64, f64) {
        let e = self.target_extent as f64;
        let (nx, ny) = self.source_extents;
        (
            (px.0 + 0.5) * nx as f64 / e - 0.5,
            (px.1 + 0.5) * ny as f64 / e - 0.5,
        )
    }

    /// Inverse of [`SliceImage::image_to_voxel`].
    pub fn voxel_to_image(&self, v: (f64, f64)) -> (f64, f64) {
        let e = self.target_extent as f64;
        let (nx, ny) = self.source_extents;
        (
            (v.0 + 0.5) * e / nx as f64 - 0.5,
            (v.1 + 0.5) * e / ny as f64 - 0.5,
        )
    }
}

fn bilinear_resize(src: &[f64], nx: usize, ny: usize, e: usize) -> Vec<f64> {
    if nx == e && ny == e {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(e * e);
    for v in 0..e {
        let fy = ((v as f64 + 0.5) * ny as f64 / e as f64 - 0.5).clamp(0.0, (ny - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ny - 1);
        let wy = fy - y0 as f64;
        for u in 0..e {
            let fx = ((u as f64 + 0.5) * nx as f64 / e as f64 - 0.5).clamp(0.0, (nx - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(nx - 1);
            let wx = fx - x0 as f64;
            let a = src[y0 * nx + x0];
            let b = src[y0 * nx + x1];
            let c = src[y1 * nx + x0];
            let d = src[y1 * nx + x1];
            out.push(
                a * (1.0 - wy) * (1.0 - wx)
                    + b * (1.0 - wy) * wx
                    + c * wy * (1.0 - wx)
                    + d * wy * wx,
            );
        }
    }
    out
}

/// Build the 3-channel detector input for axial index `z`: slices z-1, z,
/// z+1 (edge slices clamp to the nearest existing slice), each rescaled to
/// `target_extent` square by bilinear interpolation.
pub fn build_slice_triplet(vol: &CtVolume, z: usize, target_extent: usize) -> Result<SliceImage> {
    let (nx, ny, nz) = vol.extents();
    if target_extent == 0 {
        return Err(Error::InvalidArgument("zero slice target extent".into()));
    }
    if z >= nz {
        return Err(Error::InvalidArgument(format!(
            "slice index {z} out of range for {nz} slices"
        )));
    }
    let picks = [z.saturating_sub(1), z, (z + 1).min(nz - 1)];
    let e = target_extent;
    let mut data = Vec::with_capacity(3 * e * e);
    for &zi in &picks {
        data.extend(bilinear_resize(vol.slice(zi), nx, ny, e));
    }
    Ok(SliceImage {
        series_uid: vol.series_uid.clone(),
        z_index: z,
        data: Tensor::new(vec![3, e, e], data)?,
        source_extents: (nx, ny),
        target_extent,
    })
}
