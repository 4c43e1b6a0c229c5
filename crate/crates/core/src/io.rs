//! File helpers: atomic writes, 8-bit RGB PNG, and the `DPTH` depth format
//! (magic, u32 width, u32 height, f32 little-endian data in row-major order).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn encode_depth(width: usize, height: usize, depth: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * depth.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for d in depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::Dataset("depth file: bad header".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * w * h;
    if bytes.len() != expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((w, h, data))
}

/// RGB in `[0, 1]`, interleaved, quantized to 8 bits.
pub fn encode_png(width: usize, height: usize, rgb: &[f32]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let bytes: Vec<u8> = rgb.iter().map(|&v| quantize_channel(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn quantize_channel(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((info.width as usize, info.height as usize, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trip() {
        let d = vec![0.5f32, 1.25, 20.0, 3.0, 7.5, 0.1];
        let (w, h, back) = decode_depth(&encode_depth(3, 2, &d)).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, d);
        let bytes = encode_depth(3, 2, &d);
        assert!(decode_depth(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let rgb: Vec<f32> = (0..2 * 2 * 3).map(|k| (k * 20) as f32 / 255.0).collect();
        let (w, h, back) = decode_png(&encode_png(2, 2, &rgb).unwrap()).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in rgb.iter().zip(&back) {
            assert_eq!(quantize_channel(*a), quantize_channel(*b));
        }
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_text_atomic(&p, "one").unwrap();
        write_text_atomic(&p, "two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
