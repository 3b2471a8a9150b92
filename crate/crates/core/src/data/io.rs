//! Image file formats: portable float maps for metric depth and PNG for RGB
//! and 16-bit scaled depth.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes a `[1, H, W]` (`Pf`) or `[3, H, W]` (`PF`) tensor as a little-endian
/// PFM. Rows are stored bottom-to-top as the format requires.
pub fn write_pfm(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    let magic = match c {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::invalid(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = Vec::with_capacity(32 + 4 * t.len());
    write!(out, "{magic}\n{w} {h}\n-1.0\n").expect("write to Vec");
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(t.at3(ch, y, x) as f32).to_le_bytes());
            }
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut f = BufWriter::new(f);
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn header_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte) {
            Ok(0) => break,
            Ok(_) if byte[0].is_ascii_whitespace() => {
                if tok.is_empty() {
                    continue;
                }
                break;
            }
            Ok(_) => tok.push(byte[0]),
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    if tok.is_empty() {
        return Err(format_err(path, "truncated PFM header"));
    }
    String::from_utf8(tok).map_err(|_| format_err(path, "non-ASCII PFM header"))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let channels = match header_token(&mut r, path)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format_err(path, format!("bad PFM magic `{other}`"))),
    };
    let parse = |s: String| -> Result<usize> {
        s.parse().map_err(|_| format_err(path, format!("bad PFM extent `{s}`")))
    };
    let w = parse(header_token(&mut r, path)?)?;
    let h = parse(header_token(&mut r, path)?)?;
    let scale: f64 = header_token(&mut r, path)?
        .parse()
        .map_err(|_| format_err(path, "bad PFM scale"))?;
    if w == 0 || h == 0 || scale == 0.0 {
        return Err(format_err(path, "degenerate PFM header"));
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; 4 * w * h * channels];
    r.read_exact(&mut raw)
        .map_err(|_| format_err(path, "PFM payload shorter than its header declares"))?;
    let mut data = vec![0.0; w * h * channels];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let pixel = i / channels;
        let ch = i % channels;
        let (row_from_bottom, x) = (pixel / w, pixel % w);
        let y = h - 1 - row_from_bottom;
        data[(ch * h + y) * w + x] = v as f64;
    }
    Tensor::new(&[channels, h, w], data).map_err(|e| format_err(path, e.to_string()))
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(f));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Decodes a PNG into a `[3, H, W]` tensor in `[0, 1]`. Grayscale is
/// replicated to three channels; alpha is dropped.
pub fn read_png_rgb(path: &Path) -> Result<Tensor> {
    let (info, buf) = decode_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(image_err(path, "unexpanded palette")),
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let max = if wide { 65535.0 } else { 255.0 };
    let sample = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / max
        } else {
            buf[i] as f64 / max
        }
    };
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            let src = if channels < 3 { 0 } else { c };
            data[c * h * w + p] = sample(p * channels + src);
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Encodes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_png_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::invalid(format!("RGB PNG needs 3 channels, got {c}")));
    }
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push((t.at3(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// Writes interleaved 8-bit RGB bytes.
pub fn write_png_rgb8(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, bytes)
}

/// 16-bit grayscale samples in row-major order.
pub fn read_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (info, buf) = decode_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(image_err(path, "expected a 16-bit grayscale PNG"));
    }
    let vals = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok((info.height as usize, info.width as usize, vals))
}

pub fn write_png16(path: &Path, height: usize, width: usize, values: &[u16]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::invalid("16-bit PNG sample count does not match extents"));
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let t = Tensor::from_fn(&[1, 5, 7], |i| (0.5 + i as f64 * 0.37) as f32 as f64);
        write_pfm(&p, &t).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), t);
        let rgb = Tensor::from_fn(&[3, 2, 3], |i| i as f64 * 0.25);
        write_pfm(&p, &rgb).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), rgb);
    }

    #[test]
    fn truncated_pfm_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        write_pfm(&p, &Tensor::full(&[1, 4, 4], 1.0)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::from_fn(&[3, 4, 6], |i| (i % 256) as f64 / 255.0);
        write_png_rgb(&p, &t).unwrap();
        assert_eq!(read_png_rgb(&p).unwrap(), t);
        let q = dir.path().join("d.png");
        let vals: Vec<u16> = (0..12).map(|i| i * 1000).collect();
        write_png16(&q, 3, 4, &vals).unwrap();
        assert_eq!(read_png16(&q).unwrap(), (3, 4, vals));
    }
}
