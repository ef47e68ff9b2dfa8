//! Grayscale rasters and the geometry that turns a camera frame into
//! road-surface unit patches.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Row-major grayscale raster with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::geometry(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::geometry(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some((i, p)) = pixels.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::contract(format!("pixel {i} = {p} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Region of interest inside a source frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    pub fn full(image: &GrayImage) -> Self {
        Self {
            x: 0,
            y: 0,
            w: image.width,
            h: image.height,
        }
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::geometry("crop rectangle must have positive size"));
        }
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::geometry(format!(
                "crop ({}, {}, {}x{}) exceeds {width}x{height} image",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Layout of square unit patches tiling an image exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGridSpec {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Default for PatchGridSpec {
    /// 4×10 grid of 64-pixel patches over a 640×256 canvas.
    fn default() -> Self {
        Self {
            patch_size: 64,
            rows: 4,
            cols: 10,
        }
    }
}

impl PatchGridSpec {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Grid for an image, failing if the patch size does not divide it.
    pub fn for_image(width: usize, height: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || !width.is_multiple_of(patch_size) || !height.is_multiple_of(patch_size) {
            return Err(Error::geometry(format!(
                "{width}x{height} is not divisible into {patch_size}-pixel patches"
            )));
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
        })
    }

    /// Cell index (row-major) containing pixel `(row, col)`.
    pub fn cell_of(&self, row: usize, col: usize) -> usize {
        (row / self.patch_size) * self.cols + col / self.patch_size
    }
}

/// Grid cells that cover the road surface, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoadMask {
    selected: Vec<usize>,
}

impl RoadMask {
    pub fn new(mut indices: Vec<usize>, grid: &PatchGridSpec) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::geometry(format!("road mask lists cell {} twice", w[0])));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= grid.cells()) {
            return Err(Error::geometry(format!(
                "road mask cell {bad} outside {}x{} grid",
                grid.rows, grid.cols
            )));
        }
        Ok(Self { selected: indices })
    }

    /// Every cell of the grid.
    pub fn all(grid: &PatchGridSpec) -> Self {
        Self {
            selected: (0..grid.cells()).collect(),
        }
    }

    /// Stand-in road geometry for the default 4×10 grid: the bottom three
    /// rows, narrowing toward the horizon. Row 1 keeps columns 2..=7, row 2
    /// keeps 1..=8 and row 3 keeps 1..=9, for 23 cells.
    pub fn default_road() -> Self {
        let mut selected = Vec::with_capacity(23);
        selected.extend((2..=7).map(|c| 10 + c));
        selected.extend((1..=8).map(|c| 20 + c));
        selected.extend((1..=9).map(|c| 30 + c));
        Self { selected }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.selected.binary_search(&cell).is_ok()
    }
}

/// One unit patch cut from a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Vec<f32>,
    pub size: usize,
    pub grid_index: usize,
    pub source_frame: u64,
}

impl Patch {
    pub fn new(data: Vec<f32>, size: usize, grid_index: usize, source_frame: u64) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::contract(format!(
                "{size}x{size} patch needs {} values, got {}",
                size * size,
                data.len()
            )));
        }
        Ok(Self {
            data,
            size,
            grid_index,
            source_frame,
        })
    }
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            b' ' | b'\t' | b'\n' | b'\r' => pos += 1,
            _ => break,
        }
    }
    pos
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    *pos = skip_whitespace_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse {
            offset: start,
            message: format!("expected {what}"),
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            offset: start,
            message: format!("{what} out of range"),
        })
}

/// Decodes a binary (P5) portable graymap with 8-bit samples.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Parse {
            offset: 0,
            message: "missing P5 magic".into(),
        });
    }
    let mut pos = 2;
    if pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
        return Err(Error::Parse {
            offset: pos,
            message: "magic must be followed by whitespace".into(),
        });
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let width_at = pos;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval_at = skip_whitespace_and_comments(bytes, pos);
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: width_at,
            message: format!("zero dimension {width}x{height}"),
        });
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("maxval {maxval} not in [1, 255]"),
        });
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Parse {
                offset: pos,
                message: "expected single whitespace before raster".into(),
            })
        }
    }
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated raster: need {need} bytes, found {}", raster.len()),
        });
    }
    let scale = maxval as f32;
    let mut pixels = Vec::with_capacity(need);
    for (i, &b) in raster[..need].iter().enumerate() {
        if b as usize > maxval {
            return Err(Error::Parse {
                offset: pos + i,
                message: format!("sample {b} exceeds maxval {maxval}"),
            });
        }
        pixels.push(b as f32 / scale);
    }
    GrayImage::new(width, height, pixels)
}

/// Encodes as P5 with maxval 255.
pub fn write_pgm(image: &GrayImage) -> Vec<u8> {
    let mut header = String::new();
    let _ = write!(header, "P5\n{} {}\n255\n", image.width, image.height);
    let mut out = header.into_bytes();
    out.extend(image.pixels.iter().map(|&p| quantize(p)));
    out
}

/// `round(p × 255)` with `p` clamped to `[0, 1]`.
pub fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn crop(image: &GrayImage, rect: CropRect) -> Result<GrayImage> {
    rect.check(image.width, image.height)?;
    let mut pixels = Vec::with_capacity(rect.w * rect.h);
    for row in rect.y..rect.y + rect.h {
        let start = row * image.width + rect.x;
        pixels.extend_from_slice(&image.pixels[start..start + rect.w]);
    }
    GrayImage::new(rect.w, rect.h, pixels)
}

/// Bilinear resampling with half-pixel-centre coordinate mapping and edge
/// clamping.
pub fn resize_bilinear(image: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::geometry(format!(
            "resize target {out_w}x{out_h} has a zero dimension"
        )));
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let xs = axis(out_w, image.width);
    let ys = axis(out_h, image.height);
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = image.get(y0, x0) as f64 * (1.0 - fx) + image.get(y0, x1) as f64 * fx;
            let bottom = image.get(y1, x0) as f64 * (1.0 - fx) + image.get(y1, x1) as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage::new(out_w, out_h, pixels)
}

/// Cuts the image into `rows × cols` patches in row-major cell order.
pub fn extract_patches(image: &GrayImage, spec: &PatchGridSpec, frame: u64) -> Result<Vec<Patch>> {
    if spec.patch_size == 0 || image.width != spec.width() || image.height != spec.height() {
        return Err(Error::geometry(format!(
            "{}x{} grid of {}-pixel patches does not tile a {}x{} image",
            spec.rows, spec.cols, spec.patch_size, image.width, image.height
        )));
    }
    let ps = spec.patch_size;
    let mut patches = Vec::with_capacity(spec.cells());
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let mut data = Vec::with_capacity(ps * ps);
            for row in r * ps..(r + 1) * ps {
                let start = row * image.width + c * ps;
                data.extend_from_slice(&image.pixels[start..start + ps]);
            }
            patches.push(Patch {
                data,
                size: ps,
                grid_index: r * spec.cols + c,
                source_frame: frame,
            });
        }
    }
    Ok(patches)
}

/// Inverse of [`extract_patches`] for a complete, ordered patch list.
pub fn reassemble(patches: &[Patch], spec: &PatchGridSpec) -> Result<GrayImage> {
    if patches.len() != spec.cells() {
        return Err(Error::geometry(format!(
            "need {} patches to reassemble, got {}",
            spec.cells(),
            patches.len()
        )));
    }
    let ps = spec.patch_size;
    let width = spec.width();
    let mut pixels = vec![0.0f32; width * spec.height()];
    for p in patches {
        if p.size != ps || p.grid_index >= spec.cells() {
            return Err(Error::geometry(format!(
                "patch for cell {} does not fit the grid",
                p.grid_index
            )));
        }
        let (r, c) = (p.grid_index / spec.cols, p.grid_index % spec.cols);
        for i in 0..ps {
            let dst = (r * ps + i) * width + c * ps;
            pixels[dst..dst + ps].copy_from_slice(&p.data[i * ps..(i + 1) * ps]);
        }
    }
    GrayImage::new(width, spec.height(), pixels)
}

/// Keeps the patches whose cell is in the mask, preserving grid order.
pub fn select_road_patches(patches: Vec<Patch>, mask: &RoadMask) -> Result<Vec<Patch>> {
    if let Some(&last) = mask.selected.last() {
        if last >= patches.len() {
            return Err(Error::geometry(format!(
                "road mask cell {last} outside a grid of {} patches",
                patches.len()
            )));
        }
    }
    Ok(patches
        .into_iter()
        .filter(|p| mask.contains(p.grid_index))
        .collect())
}

/// Crop, resize onto the grid canvas, cut and keep the road cells.
pub fn road_patches(
    frame: &GrayImage,
    rect: CropRect,
    grid: &PatchGridSpec,
    mask: &RoadMask,
    frame_id: u64,
) -> Result<Vec<Patch>> {
    let cropped = crop(frame, rect)?;
    let canvas = resize_bilinear(&cropped, grid.width(), grid.height())?;
    select_road_patches(extract_patches(&canvas, grid, frame_id)?, mask)
}
