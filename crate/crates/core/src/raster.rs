//! Georeferenced single-band grids and their GeoTIFF encoding.
//!
//! Float grids use NaN as nodata and are written as 32-bit float GeoTIFFs;
//! masks are 8-bit with 255 as nodata. Georeferencing is carried by the
//! ModelTiepoint/ModelPixelScale tags plus a minimal GeoKey directory naming
//! the EPSG code, which is what GDAL and friends expect.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Seek, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{Error, Result};

pub const DEFAULT_PIXEL_SIZE: f64 = 40.0;
pub const DEFAULT_EPSG: u32 = 32636;

const GEOKEY_MODEL_TYPE: u16 = 1024;
const GEOKEY_RASTER_TYPE: u16 = 1025;
const GEOKEY_GEOGRAPHIC_TYPE: u16 = 2048;
const GEOKEY_PROJECTED_CS_TYPE: u16 = 3072;
const MODEL_TYPE_PROJECTED: u16 = 1;
const MODEL_TYPE_GEOGRAPHIC: u16 = 2;
const RASTER_PIXEL_IS_AREA: u16 = 1;

/// Geotransform and shape shared by every grid in a run. North-up, square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub crs_epsg: u32,
    /// Upper-left corner x, meters.
    pub origin_x: f64,
    /// Upper-left corner y, meters.
    pub origin_y: f64,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
}

impl GridMeta {
    pub fn new(crs_epsg: u32, origin_x: f64, origin_y: f64, pixel_size: f64, width: usize, height: usize) -> Result<Self> {
        let meta = Self {
            crs_epsg,
            origin_x,
            origin_y,
            pixel_size,
            width,
            height,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::Format(format!("pixel size must be positive, got {}", self.pixel_size)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Format("grid dimensions must be non-zero".into()));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::Format("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality of geotransform, CRS and shape.
    pub fn same_grid(&self, other: &GridMeta) -> bool {
        self.crs_epsg == other.crs_epsg
            && self.origin_x.to_bits() == other.origin_x.to_bits()
            && self.origin_y.to_bits() == other.origin_y.to_bits()
            && self.pixel_size.to_bits() == other.pixel_size.to_bits()
            && self.width == other.width
            && self.height == other.height
    }

    pub fn ensure_aligned(&self, other: &GridMeta, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Alignment(format!("{what}: {other:?} differs from {self:?}")))
        }
    }

    /// Cell bounds as (min_x, min_y, max_x, max_y).
    pub fn cell_bounds(&self, row: usize, col: usize) -> (f64, f64, f64, f64) {
        let min_x = self.origin_x + col as f64 * self.pixel_size;
        let max_y = self.origin_y - row as f64 * self.pixel_size;
        (min_x, max_y - self.pixel_size, min_x + self.pixel_size, max_y)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Extent as (min_x, min_y, max_x, max_y).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_x,
            self.origin_y - self.height as f64 * self.pixel_size,
            self.origin_x + self.width as f64 * self.pixel_size,
            self.origin_y,
        )
    }

    /// Pixel containing map coordinate (x, y); cells are half-open on their
    /// right and bottom edges.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.origin_x) / self.pixel_size).floor();
        let row = ((self.origin_y - y) / self.pixel_size).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

/// Pixel sample type with a nodata sentinel.
pub trait Sample: Copy + Send + Sync + PartialEq + std::fmt::Debug + 'static {
    const NODATA_TEXT: &'static str;
    fn nodata() -> Self;
    fn is_nodata(&self) -> bool;
}

impl Sample for f32 {
    const NODATA_TEXT: &'static str = "nan";
    fn nodata() -> Self {
        f32::NAN
    }
    fn is_nodata(&self) -> bool {
        self.is_nan()
    }
}

impl Sample for u8 {
    const NODATA_TEXT: &'static str = "255";
    fn nodata() -> Self {
        MASK_NODATA
    }
    fn is_nodata(&self) -> bool {
        *self == MASK_NODATA
    }
}

impl Sample for u16 {
    const NODATA_TEXT: &'static str = "65535";
    fn nodata() -> Self {
        u16::MAX
    }
    fn is_nodata(&self) -> bool {
        *self == u16::MAX
    }
}

pub const MASK_NODATA: u8 = 255;

/// Row-major single-band grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub meta: GridMeta,
    data: Vec<T>,
}

/// Coherence values in [0, 1] or NaN.
pub type CoherenceGrid = Grid<f32>;
/// Any float-valued grid (statistics, Δγ, z).
pub type FloatGrid = Grid<f32>;
/// Binary {0, 1} grid with 255 as nodata.
pub type MaskGrid = Grid<u8>;
/// Per-pixel member counts.
pub type CountGrid = Grid<u16>;

impl<T: Sample> Grid<T> {
    pub fn new(meta: GridMeta, data: Vec<T>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.len() {
            return Err(Error::Format(format!(
                "grid data has {} samples, expected {}x{}",
                data.len(),
                meta.width,
                meta.height
            )));
        }
        Ok(Self { meta, data })
    }

    pub fn filled(meta: GridMeta, value: T) -> Self {
        Self {
            data: vec![value; meta.len()],
            meta,
        }
    }

    pub fn nodata_like(meta: GridMeta) -> Self {
        Self::filled(meta, T::nodata())
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.meta.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        let w = self.meta.width;
        self.data[row * w + col] = value;
    }

    /// Applies `f` pixelwise to an aligned pair of grids.
    pub fn zip_map<U: Sample, V: Sample>(&self, other: &Grid<U>, f: impl Fn(T, U) -> V) -> Result<Grid<V>> {
        self.meta.ensure_aligned(&other.meta, "pixelwise operation")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Grid { meta: self.meta, data })
    }
}

impl MaskGrid {
    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == 1
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Clamps non-nodata values into [0, 1]; returns how many were changed.
pub fn clamp_coherence(grid: &mut CoherenceGrid) -> usize {
    let mut clamped = 0;
    for v in grid.values_mut() {
        if v.is_nan() {
            continue;
        }
        let c = v.clamp(0.0, 1.0);
        if c != *v {
            *v = c;
            clamped += 1;
        }
    }
    clamped
}

fn tiff_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Tiff {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn geokeys(epsg: u32) -> Result<Vec<u16>> {
    let code = u16::try_from(epsg).map_err(|_| Error::Format(format!("EPSG code {epsg} out of GeoKey range")))?;
    let geographic = (4000..5000).contains(&epsg);
    let (model, key) = if geographic {
        (MODEL_TYPE_GEOGRAPHIC, GEOKEY_GEOGRAPHIC_TYPE)
    } else {
        (MODEL_TYPE_PROJECTED, GEOKEY_PROJECTED_CS_TYPE)
    };
    Ok(vec![
        1, 1, 0, 3, // header: version, revision, minor, key count
        GEOKEY_MODEL_TYPE, 0, 1, model,
        GEOKEY_RASTER_TYPE, 0, 1, RASTER_PIXEL_IS_AREA,
        key, 0, 1, code,
    ])
}

fn encode_with<W: Write + Seek, C: colortype::ColorType>(
    meta: &GridMeta,
    data: &[C::Inner],
    nodata_text: &str,
    writer: W,
    path: &Path,
) -> Result<()>
where
    [C::Inner]: tiff::encoder::TiffValue,
{
    let mut encoder = TiffEncoder::new(writer).map_err(|e| tiff_err(path, e))?;
    let mut image = encoder
        .new_image::<C>(meta.width as u32, meta.height as u32)
        .map_err(|e| tiff_err(path, e))?;
    let dir = image.encoder();
    dir.write_tag(Tag::ModelPixelScaleTag, &[meta.pixel_size, meta.pixel_size, 0.0][..])
        .map_err(|e| tiff_err(path, e))?;
    dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, meta.origin_x, meta.origin_y, 0.0][..])
        .map_err(|e| tiff_err(path, e))?;
    dir.write_tag(Tag::GeoKeyDirectoryTag, &geokeys(meta.crs_epsg)?[..])
        .map_err(|e| tiff_err(path, e))?;
    dir.write_tag(Tag::GdalNodata, nodata_text).map_err(|e| tiff_err(path, e))?;
    image.write_data(data).map_err(|e| tiff_err(path, e))
}

/// Pixel types that map onto a GeoTIFF band layout.
pub trait TiffSample: Sample {
    fn encode<W: Write + Seek>(grid: &Grid<Self>, writer: W, path: &Path) -> Result<()>;
    fn decode(result: DecodingResult, path: &Path) -> Result<Vec<Self>>;
}

impl TiffSample for f32 {
    fn encode<W: Write + Seek>(grid: &Grid<Self>, writer: W, path: &Path) -> Result<()> {
        encode_with::<W, colortype::Gray32Float>(&grid.meta, grid.values(), Self::NODATA_TEXT, writer, path)
    }

    fn decode(result: DecodingResult, path: &Path) -> Result<Vec<Self>> {
        match result {
            DecodingResult::F32(v) => Ok(v),
            _ => Err(tiff_err(path, "expected a 32-bit float band")),
        }
    }
}

impl TiffSample for u8 {
    fn encode<W: Write + Seek>(grid: &Grid<Self>, writer: W, path: &Path) -> Result<()> {
        encode_with::<W, colortype::Gray8>(&grid.meta, grid.values(), Self::NODATA_TEXT, writer, path)
    }

    fn decode(result: DecodingResult, path: &Path) -> Result<Vec<Self>> {
        match result {
            DecodingResult::U8(v) => Ok(v),
            _ => Err(tiff_err(path, "expected an 8-bit band")),
        }
    }
}

impl TiffSample for u16 {
    fn encode<W: Write + Seek>(grid: &Grid<Self>, writer: W, path: &Path) -> Result<()> {
        encode_with::<W, colortype::Gray16>(&grid.meta, grid.values(), Self::NODATA_TEXT, writer, path)
    }

    fn decode(result: DecodingResult, path: &Path) -> Result<Vec<Self>> {
        match result {
            DecodingResult::U16(v) => Ok(v),
            _ => Err(tiff_err(path, "expected a 16-bit band")),
        }
    }
}

/// Writes `grid` as a single-band GeoTIFF (f32 grids as Float32, masks as UInt8).
pub fn write_geotiff<T: TiffSample>(grid: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    T::encode(grid, &mut writer, path)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// In-memory GeoTIFF encoding, used for served and checksummed products.
pub fn encode_geotiff<T: TiffSample>(grid: &Grid<T>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    T::encode(grid, &mut buf, Path::new("<memory>"))?;
    Ok(buf.into_inner())
}

fn decode_with<R: Read + Seek, T: TiffSample>(reader: R, path: &Path) -> Result<Grid<T>> {
    let mut decoder = Decoder::new(reader).map_err(|e| tiff_err(path, e))?;
    let (width, height) = decoder.dimensions().map_err(|e| tiff_err(path, e))?;
    let scale = decoder
        .get_tag_f64_vec(Tag::ModelPixelScaleTag)
        .map_err(|e| tiff_err(path, format!("missing pixel scale: {e}")))?;
    let tie = decoder
        .get_tag_f64_vec(Tag::ModelTiepointTag)
        .map_err(|e| tiff_err(path, format!("missing tiepoint: {e}")))?;
    let keys = decoder
        .get_tag_u16_vec(Tag::GeoKeyDirectoryTag)
        .map_err(|e| tiff_err(path, format!("missing GeoKey directory: {e}")))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(tiff_err(path, "truncated georeferencing tags"));
    }
    if scale[0].to_bits() != scale[1].to_bits() {
        return Err(tiff_err(path, "non-square pixels are not supported"));
    }
    if tie[0] != 0.0 || tie[1] != 0.0 {
        return Err(tiff_err(path, "tiepoint must anchor raster (0, 0)"));
    }
    let epsg = keys
        .chunks_exact(4)
        .skip(1)
        .find(|k| k[0] == GEOKEY_PROJECTED_CS_TYPE || k[0] == GEOKEY_GEOGRAPHIC_TYPE)
        .map(|k| k[3] as u32)
        .ok_or_else(|| tiff_err(path, "GeoKey directory names no EPSG code"))?;
    let meta = GridMeta::new(epsg, tie[3], tie[4], scale[0], width as usize, height as usize)?;
    let data = T::decode(decoder.read_image().map_err(|e| tiff_err(path, e))?, path)?;
    Grid::new(meta, data)
}

pub fn read_geotiff<T: TiffSample>(path: impl AsRef<Path>) -> Result<Grid<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_with(BufReader::new(file), path)
}

pub fn decode_geotiff<T: TiffSample>(bytes: &[u8]) -> Result<Grid<T>> {
    decode_with(Cursor::new(bytes), Path::new("<memory>"))
}

#[derive(Debug, Clone)]
pub struct LoadedStack {
    pub grids: Vec<CoherenceGrid>,
    /// Number of samples clamped into [0, 1] across the stack.
    pub clamped: usize,
}

/// Loads coherence rasters that must share one grid; out-of-range values are
/// clamped. When `crs_epsg` is given, rasters in any other CRS are rejected.
pub fn load_aligned_stack<P: AsRef<Path>>(paths: &[P], crs_epsg: Option<u32>) -> Result<LoadedStack> {
    let mut grids: Vec<CoherenceGrid> = Vec::with_capacity(paths.len());
    let mut clamped = 0;
    for path in paths {
        let path = path.as_ref();
        let mut grid: CoherenceGrid = read_geotiff(path)?;
        if let Some(epsg) = crs_epsg {
            if grid.meta.crs_epsg != epsg {
                return Err(Error::Alignment(format!(
                    "{} is in EPSG:{}, run CRS is EPSG:{epsg}",
                    path.display(),
                    grid.meta.crs_epsg
                )));
            }
        }
        if let Some(first) = grids.first() {
            if !first.meta.same_grid(&grid.meta) {
                return Err(Error::Alignment(format!(
                    "{} does not match the geotransform of {}",
                    path.display(),
                    PathBuf::from(paths[0].as_ref()).display()
                )));
            }
        }
        clamped += clamp_coherence(&mut grid);
        grids.push(grid);
    }
    if clamped > 0 {
        tracing::info!(clamped, files = paths.len(), "clamped out-of-range coherence samples");
    }
    Ok(LoadedStack { grids, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> GridMeta {
        GridMeta::new(DEFAULT_EPSG, 600_000.0, 3_500_000.0, 40.0, 3, 2).unwrap()
    }

    #[test]
    fn locate_and_bounds_agree() {
        let m = meta();
        let (x, y) = m.cell_center(1, 2);
        assert_eq!(m.locate(x, y), Some((1, 2)));
        assert_eq!(m.cell_bounds(0, 0), (600_000.0, 3_499_960.0, 600_040.0, 3_500_000.0));
        assert_eq!(m.locate(599_999.0, 3_499_990.0), None);
        assert_eq!(m.locate(600_000.0, 3_500_000.0), Some((0, 0)));
        assert_eq!(m.locate(600_120.0, 3_499_990.0), None);
    }

    #[test]
    fn rejects_bad_meta() {
        assert!(GridMeta::new(DEFAULT_EPSG, 0.0, 0.0, 0.0, 3, 2).is_err());
        assert!(GridMeta::new(DEFAULT_EPSG, 0.0, 0.0, 40.0, 0, 2).is_err());
        assert!(Grid::new(meta(), vec![0.5f32; 5]).is_err());
    }

    #[test]
    fn clamp_counts_changes() {
        let mut g = Grid::new(meta(), vec![1.0003f32, 0.5, f32::NAN, -0.01, 1.0, 0.0]).unwrap();
        assert_eq!(clamp_coherence(&mut g), 2);
        assert_eq!(g.get(0, 0), 1.0);
        assert_eq!(g.get(1, 0), 0.0);
        assert!(g.get(0, 2).is_nan());
    }

    #[test]
    fn float_roundtrip_is_bit_exact() {
        let data = vec![0.1f32, f32::NAN, 0.333_333_34, 1.0, 0.0, 7.5e-8];
        let g = Grid::new(meta(), data.clone()).unwrap();
        let back: FloatGrid = decode_geotiff(&encode_geotiff(&g).unwrap()).unwrap();
        assert!(back.meta.same_grid(&g.meta));
        for (a, b) in data.iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mask_is_written_as_u8() {
        let g = Grid::new(meta(), vec![0u8, 1, 255, 1, 0, 0]).unwrap();
        let bytes = encode_geotiff(&g).unwrap();
        let back: MaskGrid = decode_geotiff(&bytes).unwrap();
        assert_eq!(back, g);
        // A mask is not a float band.
        assert!(decode_geotiff::<f32>(&bytes).is_err());
    }

    #[test]
    fn geographic_crs_roundtrip() {
        let m = GridMeta::new(4326, 34.2, 31.6, 0.0004, 2, 2).unwrap();
        let g = Grid::new(m, vec![0.5f32; 4]).unwrap();
        let back: FloatGrid = decode_geotiff(&encode_geotiff(&g).unwrap()).unwrap();
        assert_eq!(back.meta.crs_epsg, 4326);
    }

    #[test]
    fn write_into_missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(meta(), vec![0.5f32; 6]).unwrap();
        let err = write_geotiff(&g, dir.path().join("nope/out.tif")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn stack_alignment_and_clamping() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tif");
        let b = dir.path().join("b.tif");
        let c = dir.path().join("c.tif");
        write_geotiff(&Grid::new(meta(), vec![0.5f32; 6]).unwrap(), &a).unwrap();
        let mut v = vec![0.4f32; 6];
        v[3] = 1.0003;
        write_geotiff(&Grid::new(meta(), v).unwrap(), &b).unwrap();
        let mut shifted = meta();
        shifted.origin_x += shifted.pixel_size;
        write_geotiff(&Grid::new(shifted, vec![0.5f32; 6]).unwrap(), &c).unwrap();

        let stack = load_aligned_stack(&[&a, &b], Some(DEFAULT_EPSG)).unwrap();
        assert_eq!(stack.grids.len(), 2);
        assert_eq!(stack.clamped, 1);
        assert_eq!(stack.grids[1].get(1, 0), 1.0);

        let err = load_aligned_stack(&[&a, &c], None).unwrap_err();
        assert!(matches!(err, Error::Alignment(ref m) if m.contains("c.tif")), "{err}");

        let err = load_aligned_stack(&[&a], Some(4326)).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));

        let err = load_aligned_stack(&[dir.path().join("missing.tif")], None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
