//! 8-bit RGB image files: PNG through the `image` crate and binary PPM
//! (`P6`) handled here.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::retinex::ImageRGB;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => Ok(ImageFormat::Png),
            Some("ppm") => Ok(ImageFormat::Ppm),
            _ => Err(Error::Image {
                path: path.into(),
                message: "unsupported extension (expected .png or .ppm)".into(),
            }),
        }
    }
}

/// True for paths this module can read.
pub fn is_image_path(path: &Path) -> bool {
    ImageFormat::from_path(path).is_ok()
}

fn to_bytes(image: &ImageRGB) -> Vec<u8> {
    let plane = image.height() * image.width();
    let d = image.data();
    (0..plane)
        .flat_map(|i| (0..3).map(move |c| (d[c * plane + i] * 255.0).round() as u8))
        .collect()
}

fn from_bytes(bytes: &[u8], height: usize, width: usize) -> Result<ImageRGB> {
    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    ImageRGB::from_vec(data, height, width)
}

pub fn read_image(path: &Path) -> Result<ImageRGB> {
    match ImageFormat::from_path(path)? {
        ImageFormat::Png => {
            let img = image::open(path).map_err(|e| Error::Image {
                path: path.into(),
                message: e.to_string(),
            })?;
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            from_bytes(rgb.as_raw(), h as usize, w as usize)
        }
        ImageFormat::Ppm => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let (h, w, body) = parse_ppm(&bytes).map_err(|message| Error::Image {
                path: path.into(),
                message,
            })?;
            from_bytes(body, h, w)
        }
    }
}

pub fn write_image(path: &Path, image: &ImageRGB) -> Result<()> {
    let bytes = to_bytes(image);
    let (h, w) = (image.height(), image.width());
    match ImageFormat::from_path(path)? {
        ImageFormat::Png => image::save_buffer_with_format(
            path,
            &bytes,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        }),
        ImageFormat::Ppm => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&bytes);
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
    }
}

/// Splits a `P6` file into `(height, width, pixel bytes)`.
fn parse_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, &[u8]), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != "P6" {
        return Err(format!("expected P6 magic, found {:?}", fields[0]));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad {what} {s:?}"))
    };
    let (w, h, maxval) = (
        parse(fields[1], "width")?,
        parse(fields[2], "height")?,
        parse(fields[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 3 * w * h;
    match bytes.get(pos..pos + need) {
        Some(body) => Ok((h, w, body)),
        None => Err(format!("expected {need} pixel bytes, found {}", bytes.len().saturating_sub(pos))),
    }
}
