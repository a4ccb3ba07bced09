//! Binary PGM/PPM image and PCM16 WAV audio readers and writers.
//!
//! Deliberately codec-free: P5/P6 with maxval ≤ 255 and 16-bit mono PCM
//! cover the whole pipeline. Videos are directories of numbered PPM/PGM
//! frames. All formats are explicit about byte order and free of
//! locale-dependent formatting.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::task::{Signal, SignalKind};
use crate::tensor::Tensor;

// ── PGM / PPM ───────────────────────────────────────────────────────────

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    /// Next whitespace-delimited token, skipping '#' comments.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated PNM header".to_string()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad number in PNM header".to_string()))
    }
}

/// Reads a binary PGM (P5) or PPM (P6) image into a unit-range signal.
pub fn read_image(path: &Path) -> Result<Signal> {
    let bytes = fs::read(path)?;
    let mut cur = HeaderCursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.token()?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Format(format!(
                "unsupported PNM magic {:?} (want P5/P6)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let w = cur.number()?;
    let h = cur.number()?;
    let maxval = cur.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = cur.pos + 1;
    let need = w * h * channels;
    if bytes.len() < data_start + need {
        return Err(Error::Format(format!(
            "raster truncated: need {need} bytes"
        )));
    }
    let raster = &bytes[data_start..data_start + need];
    let values: Vec<f64> = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    Signal::new(
        SignalKind::Image,
        id,
        vec![h, w],
        channels,
        0.0,
        1.0,
        Tensor::new(vec![h * w, channels], values)?,
    )
}

/// Writes unit-range values as binary PGM (1 channel) or PPM (3 channels).
pub fn write_image(path: &Path, dims: &[usize], channels: usize, values: &Tensor) -> Result<()> {
    if dims.len() != 2 {
        return Err(Error::contract("image writer needs [h, w] dims".to_string()));
    }
    let (h, w) = (dims[0], dims[1]);
    if values.len() != h * w * channels {
        return Err(Error::dim("write_image", h * w * channels, values.len()));
    }
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::contract(format!(
                "PNM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "{magic}\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = values
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Reads a directory of numbered PPM/PGM frames as one video signal.
pub fn read_video_dir(dir: &Path) -> Result<Signal> {
    let mut frames: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    if frames.is_empty() {
        return Err(Error::Format(format!("no PPM/PGM frames in {dir:?}")));
    }
    frames.sort();
    let first = read_image(&frames[0])?;
    let (h, w) = (first.meta.dims[0], first.meta.dims[1]);
    let channels = first.meta.channels;
    let mut values = Vec::with_capacity(frames.len() * h * w * channels);
    values.extend_from_slice(first.values.data());
    for f in &frames[1..] {
        let img = read_image(f)?;
        if img.meta.dims != vec![h, w] || img.meta.channels != channels {
            return Err(Error::Format(format!("frame {f:?} has mismatched shape")));
        }
        values.extend_from_slice(img.values.data());
    }
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".to_string());
    Signal::new(
        SignalKind::Video,
        id,
        vec![frames.len(), h, w],
        channels,
        0.0,
        1.0,
        Tensor::new(vec![frames.len() * h * w, channels], values)?,
    )
}

/// Writes a video signal as numbered PPM/PGM frames under `dir`.
pub fn write_video_dir(dir: &Path, signal: &Signal) -> Result<()> {
    if signal.meta.dims.len() != 3 {
        return Err(Error::contract("video writer needs [f, h, w] dims".to_string()));
    }
    fs::create_dir_all(dir)?;
    let (f, h, w) = (
        signal.meta.dims[0],
        signal.meta.dims[1],
        signal.meta.dims[2],
    );
    let c = signal.meta.channels;
    let ext = if c == 1 { "pgm" } else { "ppm" };
    let per_frame = h * w;
    for k in 0..f {
        let start = k * per_frame;
        let frame = Tensor::new(
            vec![per_frame * c],
            signal.values.data()[start * c..(start + per_frame) * c].to_vec(),
        )?;
        write_image(&dir.join(format!("frame_{k:05}.{ext}")), &[h, w], c, &frame)?;
    }
    Ok(())
}

// ── WAV (PCM16 mono) ────────────────────────────────────────────────────

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

/// Reads 16-bit mono PCM; returns the signal (values in [−1,1]) and the
/// sample rate.
pub fn read_wav(path: &Path) -> Result<(Signal, u32)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".to_string()));
    }
    let mut pos = 12;
    let mut rate = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::Format("chunk overruns file".to_string()));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format("short fmt chunk".to_string()));
                }
                let format = u16_at(&bytes, body);
                let channels = u16_at(&bytes, body + 2);
                let bits = u16_at(&bytes, body + 14);
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(Error::Format(format!(
                        "need PCM16 mono, got format={format} channels={channels} bits={bits}"
                    )));
                }
                rate = Some(u32_at(&bytes, body + 4));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }
    let rate = rate.ok_or_else(|| Error::Format("missing fmt chunk".to_string()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".to_string()))?;
    let n = data.len() / 2;
    let values: Vec<f64> = (0..n)
        .map(|i| i16::from_le_bytes([data[2 * i], data[2 * i + 1]]) as f64 / 32768.0)
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "audio".to_string());
    let signal = Signal::new(
        SignalKind::Audio,
        id,
        vec![n],
        1,
        -1.0,
        1.0,
        Tensor::new(vec![n, 1], values)?,
    )?;
    Ok((signal, rate))
}

/// Writes values in [−1,1] as 16-bit mono PCM.
pub fn write_wav(path: &Path, values: &Tensor, rate: u32) -> Result<()> {
    let n = values.len();
    let data_len = (n * 2) as u32;
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&rate.to_le_bytes())?;
    out.write_all(&(rate * 2).to_le_bytes())?; // byte rate
    out.write_all(&2u16.to_le_bytes())?; // block align
    out.write_all(&16u16.to_le_bytes())?; // bits
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &v in values.data() {
        let s = (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.write_all(&s.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let values = Tensor::vector((0..12).map(|i| i as f64 / 11.0).collect());
        write_image(&path, &[3, 4], 1, &values).unwrap();
        let sig = read_image(&path).unwrap();
        assert_eq!(sig.meta.dims, vec![3, 4]);
        assert_eq!(sig.meta.channels, 1);
        for (a, b) in sig.values.data().iter().zip(values.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn ppm_round_trip_exact_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let values = Tensor::vector((0..2 * 2 * 3).map(|i| (i * 20) as f64 / 255.0).collect());
        write_image(&path, &[2, 2], 3, &values).unwrap();
        let sig = read_image(&path).unwrap();
        // Values chosen on the 1/255 grid survive exactly.
        assert_eq!(sig.values.data(), values.data());
    }

    #[test]
    fn pgm_comment_headers_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        fs::write(&path, bytes).unwrap();
        let sig = read_image(&path).unwrap();
        assert_eq!(sig.values.data(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_raster_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_image(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let values =
            Tensor::vector((0..64).map(|i| (i as f64 / 10.0).sin() * 0.8).collect());
        write_wav(&path, &values, 16_000).unwrap();
        let (sig, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(sig.meta.dims, vec![64]);
        for (a, b) in sig.values.data().iter().zip(values.data()) {
            assert!((a - b).abs() <= 1.5 / 32768.0);
        }
    }

    #[test]
    fn wav_rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        // Minimal stereo header.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&36u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&16_000u32.to_le_bytes());
        bytes.extend_from_slice(&64_000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format(_))));
    }

    #[test]
    fn video_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vdir = dir.path().join("clip");
        let n = 3 * 2 * 2;
        let values: Vec<f64> = (0..n).map(|i| ((i * 17) % 256) as f64 / 255.0).collect();
        let sig = Signal::new(
            SignalKind::Video,
            "clip",
            vec![3, 2, 2],
            1,
            0.0,
            1.0,
            Tensor::new(vec![12, 1], values).unwrap(),
        )
        .unwrap();
        write_video_dir(&vdir, &sig).unwrap();
        let back = read_video_dir(&vdir).unwrap();
        assert_eq!(back.meta.dims, vec![3, 2, 2]);
        assert_eq!(back.values.data(), sig.values.data());
    }
}
