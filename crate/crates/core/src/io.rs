//! File formats: PFM rasters, PNG images and JSON, all written atomically.

use std::io::{Cursor, Write};
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::polarimetry::PolarizedStack;
use crate::raster::{Mask, NormalMap, Raster};
use crate::segmentation::RegionLabels;

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// PFM bytes for a `(rows, cols, channels)` array with 1 or 3 channels.
/// Little-endian (negative scale), rows stored bottom to top.
pub fn encode_pfm(data: &Array3<f64>) -> Result<Vec<u8>> {
    let (h, w, c) = data.dim();
    let tag = match c {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::invalid(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for r in (0..h).rev() {
        for col in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(data[(r, col, ch)] as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PFM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format("non-ASCII PFM header".into()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Array3<f64>> {
    let mut pos = 0;
    let c = match header_token(bytes, &mut pos)? {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Format(format!("bad PFM magic '{t}'"))),
    };
    let parse = |t: &str| t.parse::<usize>().map_err(|_| Error::Format(format!("bad PFM size '{t}'")));
    let w = parse(header_token(bytes, &mut pos)?)?;
    let h = parse(header_token(bytes, &mut pos)?)?;
    let scale: f64 = header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format("PFM scale must be nonzero".into()));
    }
    // exactly one whitespace byte ends the header
    pos += 1;
    let need = h * w * c * 4;
    let body = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("PFM body has {} bytes, expected {need}", bytes.len().saturating_sub(pos))))?;
    let little = scale < 0.0;
    let mut data = Array3::zeros((h, w, c));
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, rest) = (i / (w * c), i % (w * c));
        data[(h - 1 - row, rest / c, rest % c)] = v as f64;
    }
    Ok(data)
}

pub fn write_pfm(path: &Path, raster: &Raster) -> Result<()> {
    let (h, w) = raster.dim();
    let data = raster.clone().into_shape_with_order((h, w, 1)).unwrap();
    atomic_write(path, &encode_pfm(&data)?)
}

pub fn write_pfm_normals(path: &Path, normals: &NormalMap) -> Result<()> {
    let (h, w) = normals.dim();
    let data = Array3::from_shape_fn((h, w, 3), |(r, c, k)| normals[(r, c)][k]);
    atomic_write(path, &encode_pfm(&data)?)
}

pub fn read_pfm(path: &Path) -> Result<Raster> {
    let data = decode_pfm(&std::fs::read(path)?)?;
    if data.dim().2 != 1 {
        return Err(Error::Format(format!("{} is a color PFM, expected grayscale", path.display())));
    }
    let (h, w, _) = data.dim();
    Ok(data.into_shape_with_order((h, w)).unwrap())
}

pub fn read_pfm_normals(path: &Path) -> Result<NormalMap> {
    let data = decode_pfm(&std::fs::read(path)?)?;
    let (h, w, c) = data.dim();
    if c != 3 {
        return Err(Error::Format(format!("{} is a grayscale PFM, expected 3 channels", path.display())));
    }
    Ok(NormalMap::from_shape_fn((h, w), |(r, col)| {
        [data[(r, col, 0)], data[(r, col, 1)], data[(r, col, 2)]]
    }))
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// 16-bit grayscale PNG with `code = round(v / scale * 65535)`, clipped.
pub fn write_png16(path: &Path, raster: &Raster, scale: f64) -> Result<()> {
    let (h, w) = raster.dim();
    let img = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |c, r| {
        let v = raster[(r as usize, c as usize)] / scale * 65535.0;
        Luma([v.round().clamp(0.0, 65535.0) as u16])
    });
    atomic_write(path, &encode_png(&img)?)
}

/// Grayscale PNG of 8 or 16 bits, linearized by the maximum code value.
pub fn read_png_gray(path: &Path) -> Result<Raster> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => Raster::from_shape_fn((h, w), |(r, c)| {
            g.get_pixel(c as u32, r as u32)[0] as f64 / 255.0
        }),
        image::DynamicImage::ImageLuma16(g) => Raster::from_shape_fn((h, w), |(r, c)| {
            g.get_pixel(c as u32, r as u32)[0] as f64 / 65535.0
        }),
        other => {
            return Err(Error::Format(format!(
                "{} has color type {:?}, expected 8/16-bit grayscale",
                path.display(),
                other.color()
            )))
        }
    })
}

/// Reads a grayscale raster, choosing the format by extension.
pub fn read_raster(path: &Path) -> Result<Raster> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        Some("png") => read_png_gray(path),
        _ => Err(Error::invalid(format!("unsupported raster format: {}", path.display()))),
    }
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let img = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |c, r| {
        Luma([if mask[(r as usize, c as usize)] { 255 } else { 0 }])
    });
    atomic_write(path, &encode_png(&img)?)
}

/// Any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_raster(path)?.mapv(|v| v > 0.0))
}

pub fn write_labels(path: &Path, labels: &RegionLabels) -> Result<()> {
    if labels.region_count > u16::MAX as u32 {
        return Err(Error::invalid(format!("{} regions do not fit a 16-bit PNG", labels.region_count)));
    }
    let (h, w) = labels.dim();
    let img = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |c, r| {
        Luma([labels.labels[(r as usize, c as usize)] as u16])
    });
    atomic_write(path, &encode_png(&img)?)
}

pub fn read_labels(path: &Path) -> Result<RegionLabels> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = Array2::from_shape_fn((h, w), |(r, c)| img.get_pixel(c as u32, r as u32)[0] as u32);
    let region_count = labels.iter().copied().max().unwrap_or(0);
    Ok(RegionLabels { labels, region_count })
}

pub fn write_rgb(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::invalid(format!("RGB image needs 3 channels, got {c}")));
    }
    let img = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let (r, col) = (y as usize, x as usize);
        Rgb([rgb[(r, col, 0)], rgb[(r, col, 1)], rgb[(r, col, 2)]])
    });
    atomic_write(path, &encode_png(&img)?)
}

/// Standard `(n + 1) / 2` color coding; background is black.
pub fn normals_to_rgb(normals: &NormalMap, mask: &Mask) -> Array3<u8> {
    let (h, w) = normals.dim();
    Array3::from_shape_fn((h, w, 3), |(r, c, k)| {
        if mask[(r, c)] {
            ((normals[(r, c)][k] + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackFormat {
    Pfm,
    Png,
}

pub const STACK_NAMES: [&str; 4] = ["i000", "i045", "i090", "i135"];

/// Writes `i000..i135` and `mask.png` into `dir`. PNG channels are divided by
/// `png_scale` before quantization; the caller records it to undo the scaling.
pub fn write_stack(dir: &Path, stack: &PolarizedStack, format: StackFormat, png_scale: f64) -> Result<()> {
    for (img, name) in stack.images.iter().zip(STACK_NAMES) {
        match format {
            StackFormat::Pfm => write_pfm(&dir.join(format!("{name}.pfm")), img)?,
            StackFormat::Png => write_png16(&dir.join(format!("{name}.png")), img, png_scale)?,
        }
    }
    write_mask(&dir.join("mask.png"), &stack.mask)
}

/// Reads a stack written by [`write_stack`], preferring PFM channels. A
/// missing mask means every pixel is foreground; PNG channels are multiplied
/// by `png_scale`.
pub fn read_stack(dir: &Path, png_scale: f64) -> Result<PolarizedStack> {
    let mut images = Vec::with_capacity(4);
    for name in STACK_NAMES {
        let pfm = dir.join(format!("{name}.pfm"));
        let png = dir.join(format!("{name}.png"));
        images.push(if pfm.exists() {
            read_pfm(&pfm)?
        } else if png.exists() {
            read_png_gray(&png)? * png_scale
        } else {
            return Err(Error::invalid(format!("no {name}.pfm or {name}.png in {}", dir.display())));
        });
    }
    let mask_path = dir.join("mask.png");
    let mask = if mask_path.exists() {
        read_mask(&mask_path)?
    } else {
        Mask::from_elem(images[0].dim(), true)
    };
    let images: [Raster; 4] = images.try_into().unwrap();
    PolarizedStack::new(images, mask)
}
