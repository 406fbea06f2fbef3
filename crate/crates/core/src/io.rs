//! On-disk formats for frames and per-frame embeddings.
//!
//! Packed frames: 16-byte little-endian header `magic, width, height, count`
//! followed by `count * channels` float32 planes. The magic is `VFR1` for
//! grayscale and `VFR3` for RGB.
//!
//! Embeddings: 12-byte header `EMB1, rows, dim` then `rows * dim` float32.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::curation::{EmbeddingSet, EncoderKind};
use crate::{Error, Frame, FrameSequence, Result};

pub const FRAMES_MAGIC_GRAY: [u8; 4] = *b"VFR1";
pub const FRAMES_MAGIC_RGB: [u8; 4] = *b"VFR3";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"EMB1";

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm"];

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_packed_frames(frames: &FrameSequence) -> Result<Vec<u8>> {
    let (channels, height, width) = frames
        .shape()
        .ok_or_else(|| Error::invalid("cannot pack an empty frame sequence"))?;
    let magic = if channels == 1 {
        FRAMES_MAGIC_GRAY
    } else {
        FRAMES_MAGIC_RGB
    };
    let mut out = Vec::with_capacity(16 + frames.len() * channels * height * width * 4);
    out.extend_from_slice(&magic);
    for v in [width, height, frames.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in frames {
        push_f32s(&mut out, f.pixels());
    }
    Ok(out)
}

pub fn decode_packed_frames(bytes: &[u8], path: &Path) -> Result<FrameSequence> {
    let mut r = Reader::new(bytes, path);
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    let channels = match magic {
        FRAMES_MAGIC_GRAY => 1,
        FRAMES_MAGIC_RGB => 3,
        _ => return Err(Error::format(path, "bad packed-frames magic")),
    };
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let px = r.f32s(width * height * channels)?;
        frames.push(Frame::new(width, height, channels, px)?);
    }
    r.finish()?;
    FrameSequence::new(frames)
}

pub fn write_packed_frames(path: &Path, frames: &FrameSequence) -> Result<()> {
    write_file(path, &encode_packed_frames(frames)?)
}

pub fn read_packed_frames(path: &Path) -> Result<FrameSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_packed_frames(&bytes, path)
}

fn numeric_key(path: &Path) -> (u64, String) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
    (digits.parse().unwrap_or(u64::MAX), stem)
}

/// Image files of a directory, ordered by the number in their file name.
pub fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort_by_key(|p| numeric_key(p));
    Ok(files)
}

pub fn read_image_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let mut planes = vec![0.0; 3 * w * h];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                planes[c * w * h + i] = (px.0[c] as f64).clamp(0.0, 1.0);
            }
        }
        Frame::new(w, h, 3, planes)
    } else {
        let gray = img.to_luma32f();
        Frame::gray(w, h, gray.pixels().map(|p| (p.0[0] as f64).clamp(0.0, 1.0)).collect())
    }
}

pub fn read_image_dir(dir: &Path) -> Result<FrameSequence> {
    let files = list_image_files(dir)?;
    if files.is_empty() {
        return Err(Error::format(dir, "no image files found"));
    }
    FrameSequence::new(files.iter().map(|p| read_image_frame(p)).collect::<Result<_>>()?)
}

/// Writes 8-bit PNGs named `00000.png`, `00001.png`, ...
pub fn write_image_dir(dir: &Path, frames: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        let (w, h) = (f.width() as u32, f.height() as u32);
        let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let path = dir.join(format!("{i:05}.png"));
        if f.channels() == 1 {
            let buf = image::GrayImage::from_vec(w, h, f.pixels().iter().map(|&v| q(v)).collect())
                .expect("buffer sized from frame");
            buf.save(&path)?;
        } else {
            let plane = (w * h) as usize;
            let data = (0..plane)
                .flat_map(|i| (0..3).map(move |c| (c, i)))
                .map(|(c, i)| q(f.pixels()[c * plane + i]))
                .collect();
            image::RgbImage::from_vec(w, h, data)
                .expect("buffer sized from frame")
                .save(&path)?;
        }
    }
    Ok(())
}

/// Reads either a packed-frames file or a directory of numbered images.
pub fn read_frames(path: &Path) -> Result<FrameSequence> {
    if path.is_dir() {
        read_image_dir(path)
    } else {
        read_packed_frames(path)
    }
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let rows = set.per_frame();
    let dim = set.dim();
    let mut out = Vec::with_capacity(12 + rows.len() * dim * 4);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        push_f32s(&mut out, row);
    }
    out
}

pub fn decode_embeddings(bytes: &[u8], path: &Path, kind: EncoderKind) -> Result<EmbeddingSet> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != EMBEDDING_MAGIC {
        return Err(Error::format(path, "bad embedding magic"));
    }
    let rows = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let data = (0..rows).map(|_| r.f32s(dim)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    EmbeddingSet::new(data, kind)
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    write_file(path, &encode_embeddings(set))
}

pub fn read_embeddings(path: &Path, kind: EncoderKind) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path, kind)
}

/// Reads newline-delimited JSON, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    write_file(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq() -> FrameSequence {
        let f = |k: usize| {
            Frame::gray(3, 2, (0..6).map(|i| ((i + k) % 4) as f64 / 4.0).collect()).unwrap()
        };
        FrameSequence::new(vec![f(0), f(1)]).unwrap()
    }

    #[test]
    fn packed_header_layout() {
        let bytes = encode_packed_frames(&seq()).unwrap();
        assert_eq!(&bytes[..4], b"VFR1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 2 * 6 * 4);
    }

    #[test]
    fn packed_round_trip_and_truncation() {
        let s = seq();
        let bytes = encode_packed_frames(&s).unwrap();
        assert_eq!(decode_packed_frames(&bytes, Path::new("x")).unwrap(), s);
        assert!(decode_packed_frames(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_packed_frames(&bad, Path::new("x")).is_err());
    }

    #[test]
    fn image_dir_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let s = seq();
        write_image_dir(dir.path(), &s).unwrap();
        let back = read_image_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in s.iter().zip(back.iter()) {
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn numeric_ordering_of_image_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::filled(3, 3, 0.0).unwrap();
        let one = FrameSequence::new(vec![f]).unwrap();
        for name in ["10", "2", "1"] {
            let sub = tempfile::tempdir().unwrap();
            write_image_dir(sub.path(), &one).unwrap();
            fs::copy(sub.path().join("00000.png"), dir.path().join(format!("frame_{name}.png")))
                .unwrap();
        }
        let names: Vec<String> = list_image_files(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["frame_1.png", "frame_2.png", "frame_10.png"]);
    }

    #[test]
    fn embedding_round_trip() {
        let set = EmbeddingSet::new(vec![vec![1.0, 0.5], vec![-0.25, 2.0]], EncoderKind::Joint).unwrap();
        let bytes = encode_embeddings(&set);
        assert_eq!(bytes.len(), 12 + 16);
        let back = decode_embeddings(&bytes, Path::new("e"), EncoderKind::Joint).unwrap();
        assert_eq!(back.per_frame(), set.per_frame());
    }
}
