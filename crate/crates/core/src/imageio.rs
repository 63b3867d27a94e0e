//! 8-bit frame and mask files: binary PGM/PPM and PNG.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{BinaryMask, CameraId, Frame};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_bytes(frame: &Frame) -> Vec<u8> {
    frame.data().iter().map(|&v| to_u8(v)).collect()
}

fn frame_from_bytes(w: usize, h: usize, c: usize, bytes: &[u8], t: f64, cam: CameraId) -> Result<Frame> {
    let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Frame::new(w, h, c, data, t, cam)
}

pub fn encode_pnm(frame: &Frame) -> Vec<u8> {
    let magic = if frame.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame_bytes(frame));
    out
}

fn next_token(buf: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("truncated PNM header"));
    }
    Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
}

fn parse_usize(tok: &str) -> Result<usize> {
    tok.parse().map_err(|_| Error::format(format!("bad PNM header value `{tok}`")))
}

/// Decodes binary (P5/P6) or ASCII (P2/P3) 8-bit PNM data.
pub fn decode_pnm(buf: &[u8], timestamp: f64, camera: CameraId) -> Result<Frame> {
    let mut pos = 0;
    let magic = next_token(buf, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" | "P2" => 1,
        "P6" | "P3" => 3,
        other => return Err(Error::format(format!("unsupported PNM magic `{other}`"))),
    };
    let w = parse_usize(&next_token(buf, &mut pos)?)?;
    let h = parse_usize(&next_token(buf, &mut pos)?)?;
    let maxval = parse_usize(&next_token(buf, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("only 8-bit PNM is supported (maxval {maxval})")));
    }
    let n = w * h * channels;
    let raw: Vec<u8> = if magic == "P5" || magic == "P6" {
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if buf.len() < pos + n {
            return Err(Error::format("truncated PNM raster"));
        }
        buf[pos..pos + n].to_vec()
    } else {
        (0..n)
            .map(|_| next_token(buf, &mut pos).and_then(|t| parse_usize(&t)).map(|v| v as u8))
            .collect::<Result<_>>()?
    };
    let scaled: Vec<u8> = if maxval == 255 {
        raw
    } else {
        raw.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8).collect()
    };
    frame_from_bytes(w, h, channels, &scaled, timestamp, camera)
}

pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width() as u32, frame.height() as u32);
        enc.set_color(if frame.channels() == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(e.to_string()))?;
        writer
            .write_image_data(&frame_bytes(frame))
            .map_err(|e| Error::format(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(buf: &[u8], timestamp: f64, camera: CameraId) -> Result<Frame> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(buf));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("PNG too large"))?;
    let mut img = vec![0; size];
    let info = reader.next_frame(&mut img).map_err(|e| Error::format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &img[..info.buffer_size()];
    let (channels, bytes): (usize, Vec<u8>) = match info.color_type {
        png::ColorType::Grayscale => (1, px.to_vec()),
        png::ColorType::GrayscaleAlpha => (1, px.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, px.to_vec()),
        png::ColorType::Rgba => (3, px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => return Err(Error::format("unexpanded palette PNG")),
    };
    frame_from_bytes(w, h, channels, &bytes, timestamp, camera)
}

/// Reads a frame; the format is picked from the extension (`png`, `pgm`, `ppm`, `pnm`).
pub fn read_frame(path: &Path, timestamp: f64, camera: CameraId) -> Result<Frame> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    match extension(path).as_str() {
        "png" => decode_png(&buf, timestamp, camera),
        "pgm" | "ppm" | "pnm" => decode_pnm(&buf, timestamp, camera),
        other => Err(Error::format(format!("unknown image extension `{other}`"))),
    }
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let bytes = match extension(path).as_str() {
        "png" => encode_png(frame)?,
        "pgm" | "ppm" | "pnm" => encode_pnm(frame),
        other => return Err(Error::format(format!("unknown image extension `{other}`"))),
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

pub fn encode_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.to_bytes().into_iter().map(|b| b * 255));
    out
}

/// Pixels at or above mid-gray are true.
pub fn decode_mask_pgm(buf: &[u8]) -> Result<BinaryMask> {
    let frame = decode_pnm(buf, 0.0, CameraId::Student)?;
    if frame.channels() != 1 {
        return Err(Error::format("mask must be single-channel"));
    }
    let bytes: Vec<u8> = frame.data().iter().map(|&v| (v >= 0.5) as u8).collect();
    BinaryMask::from_bytes(frame.width(), frame.height(), &bytes)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    std::fs::write(path, encode_mask_pgm(mask))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask_pgm(&std::fs::read(path)?)
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON document per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized(w: usize, h: usize, c: usize) -> Frame {
        let data = (0..w * h * c).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        Frame::new(w, h, c, data, 0.0, CameraId::Student).unwrap()
    }

    #[test]
    fn pnm_and_png_round_trip_8bit_frames() {
        for c in [1, 3] {
            let f = quantized(7, 5, c);
            let back = decode_pnm(&encode_pnm(&f), 0.0, CameraId::Student).unwrap();
            assert_eq!(back, f);
            let back = decode_png(&encode_png(&f).unwrap(), 0.0, CameraId::Student).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn ascii_pgm_with_comments() {
        let src = b"P2\n# a comment\n2 2\n15\n0 15\n5 10\n";
        let f = decode_pnm(src, 1.5, CameraId::Teacher).unwrap();
        assert_eq!(f.dims(), (2, 2));
        assert_eq!(f.get(1, 0, 0), 1.0);
        assert_eq!(f.get(0, 1, 0), 85.0 / 255.0);
        assert_eq!(f.timestamp, 1.5);
    }

    #[test]
    fn mask_pgm_uses_0_and_255() {
        let m = BinaryMask::from_fn(4, 3, |x, y| (x + y) % 2 == 0);
        let enc = encode_mask_pgm(&m);
        assert!(enc.ends_with(&[255, 0, 255, 0, 0, 255, 0, 255, 255, 0, 255, 0]));
        assert_eq!(decode_mask_pgm(&enc).unwrap(), m);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_pnm(b"P7\n1 1\n255\n\0", 0.0, CameraId::Student).is_err());
        assert!(decode_pnm(b"P5\n4 4\n255\n\0\0", 0.0, CameraId::Student).is_err());
        assert!(decode_png(b"not a png", 0.0, CameraId::Student).is_err());
    }
}
