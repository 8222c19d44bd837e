//! PNG and PPM image emission plus small pixel-buffer helpers.
//!
//! Images and feature maps share one representation: row-major H x W x C
//! f64 data in [0, 1]. PNG files are 8-bit; PPM (P6) exists for
//! dependency-free inspection. Frame files are written to a temp name and
//! renamed into place so an aborted run leaves no partial file.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::render::FeatureMap;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB (3-channel) image as 8-bit PNG, atomically.
pub fn save_png(path: &Path, image: &FeatureMap) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::shape("save_png channels", 3, image.channels));
    }
    let bytes: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    write_png_atomic(path, image.width as u32, image.height as u32, png::ColorType::Rgb, &bytes)
}

/// Write a single-channel map as 8-bit grayscale PNG (mask dumps).
pub fn save_gray_png(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("save_gray_png", height * width, values.len()));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    write_png_atomic(path, width as u32, height as u32, png::ColorType::Grayscale, &bytes)
}

fn write_png_atomic(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let tmp = temp_name(path);
    {
        let file =
            fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width, height);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::format("png", e.to_string()))?;
        writer
            .write_image_data(bytes)
            .map_err(|e| Error::format("png", e.to_string()))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn temp_name(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Load an 8-bit PNG into an RGB f64 image (grayscale expands to RGB).
pub fn load_png(path: &Path) -> Result<FeatureMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format("png", e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format("png", e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format("png", format!("unsupported color type {other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("png", "only 8-bit PNG input is supported"));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for px in 0..h * w {
        let base = px * channels;
        match channels {
            1 => {
                let v = buf[base] as f64 / 255.0;
                data.extend_from_slice(&[v, v, v]);
            }
            _ => {
                for c in 0..3 {
                    data.push(buf[base + c] as f64 / 255.0);
                }
            }
        }
    }
    FeatureMap::new(h, w, 3, data)
}

/// Write a binary PPM (P6).
pub fn save_ppm(path: &Path, image: &FeatureMap) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::shape("save_ppm channels", 3, image.channels));
    }
    let tmp = temp_name(path);
    {
        let mut file =
            fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        let header = format!("P6\n{} {}\n255\n", image.width, image.height);
        let mut bytes = header.into_bytes();
        bytes.extend(image.data.iter().map(|&v| to_u8(v)));
        file.write_all(&bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a binary PPM (P6) into an RGB f64 image.
pub fn load_ppm(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut fields: Vec<(usize, usize)> = Vec::new(); // (start, end) of header tokens
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push((start, pos));
    }
    if fields.len() < 4 {
        return Err(Error::format("ppm", "truncated header"));
    }
    let tok = |i: usize| std::str::from_utf8(&bytes[fields[i].0..fields[i].1]).unwrap_or("");
    if tok(0) != "P6" {
        return Err(Error::format("ppm", format!("expected P6, got {:?}", tok(0))));
    }
    let w: usize = tok(1).parse().map_err(|_| Error::format("ppm", "bad width"))?;
    let h: usize = tok(2).parse().map_err(|_| Error::format("ppm", "bad height"))?;
    let maxval: usize = tok(3).parse().map_err(|_| Error::format("ppm", "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format("ppm", "only maxval 255 is supported"));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < data_start + need {
        return Err(Error::format("ppm", "truncated pixel data"));
    }
    let data = bytes[data_start..data_start + need].iter().map(|&b| b as f64 / 255.0).collect();
    FeatureMap::new(h, w, 3, data)
}

/// Horizontal mirror (left-right flip) of any multi-channel map.
pub fn mirror_horizontal(image: &FeatureMap) -> FeatureMap {
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut out = vec![0.0; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            let dst = (y * w + (w - 1 - x)) * c;
            out[dst..dst + c].copy_from_slice(&image.data[src..src + c]);
        }
    }
    FeatureMap { height: h, width: w, channels: c, data: out }
}
