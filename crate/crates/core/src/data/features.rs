//! `FVC1` frame-feature files.
//!
//! ```text
//! "FVC1" | version: u16
//! repeated until EOF:
//!   id_len: u16 | id: UTF-8 | I: u32 | D_v: u16 | D_a: u16
//!   visual: f32 x I·D_v (row-major) | audio: f32 x I·D_a
//!   label_count: u16 | class ids: u16 x label_count
//! ```
//!
//! Values are stored as `f32`; writing rounds to nearest, so only
//! `f32`-representable data round-trips bit-exactly.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use super::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FVC1";
pub const FEATURE_VERSION: u16 = 1;

pub fn encode_features(seqs: &[FrameSequence]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for s in seqs {
        let too_big = |what: &str| Error::invalid(format!("{}: {what} does not fit the format", s.id));
        let id_len = u16::try_from(s.id.len()).map_err(|_| too_big("id"))?;
        let frames = u32::try_from(s.frames()).map_err(|_| too_big("frame count"))?;
        let dv = u16::try_from(s.visual_dim()).map_err(|_| too_big("visual width"))?;
        let da = u16::try_from(s.audio_dim()).map_err(|_| too_big("audio width"))?;
        let nl = u16::try_from(s.labels.len()).map_err(|_| too_big("label count"))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(s.id.as_bytes());
        out.extend_from_slice(&frames.to_le_bytes());
        out.extend_from_slice(&dv.to_le_bytes());
        out.extend_from_slice(&da.to_le_bytes());
        for &v in s.visual.data().iter().chain(s.audio.data()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&nl.to_le_bytes());
        for &c in &s.labels {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FrameSequence>> {
    let mut r = bytes;
    if take::<4>(&mut r, "magic")? != *FEATURE_MAGIC {
        return Err(Error::format("not an FVC1 feature file (bad magic)"));
    }
    let version = u16::from_le_bytes(take(&mut r, "version")?);
    if version != FEATURE_VERSION {
        return Err(Error::format(format!("unsupported feature file version {version}")));
    }
    let mut out = Vec::new();
    while !r.is_empty() {
        let id_len = u16::from_le_bytes(take(&mut r, "id length")?) as usize;
        let mut id = vec![0u8; id_len];
        fill(&mut r, &mut id, "id")?;
        let id = String::from_utf8(id).map_err(|_| Error::format("video id is not UTF-8"))?;
        let frames = u32::from_le_bytes(take(&mut r, "frame count")?) as usize;
        let dv = u16::from_le_bytes(take(&mut r, "visual width")?) as usize;
        let da = u16::from_le_bytes(take(&mut r, "audio width")?) as usize;
        let visual = read_matrix(&mut r, frames, dv, &id)?;
        let audio = read_matrix(&mut r, frames, da, &id)?;
        let nl = u16::from_le_bytes(take(&mut r, "label count")?) as usize;
        let labels = (0..nl)
            .map(|_| take(&mut r, "label").map(u16::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let seq = FrameSequence::new(id, visual, audio, labels)
            .map_err(|e| Error::format(format!("invalid record: {e}")))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_features(seqs: &[FrameSequence], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(seqs)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FrameSequence>> {
    decode_features(&fs::read(path)?)
}

fn read_matrix(r: &mut &[u8], rows: usize, cols: usize, id: &str) -> Result<Tensor> {
    let n = rows.saturating_mul(cols);
    if n.saturating_mul(4) > r.len() {
        return Err(Error::format(format!("{id}: truncated feature payload")));
    }
    let data = (0..n)
        .map(|_| take(r, "payload").map(|b| f64::from(f32::from_le_bytes(b))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::matrix(rows, cols, data))
}

fn fill(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(format!("truncated feature file ({what})")),
        _ => Error::Io(e),
    })
}

fn take<const N: usize>(r: &mut &[u8], what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    fill(r, &mut buf, what)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn f32_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
        Tensor::uniform(rows, cols, 3.0, rng).map(|v| f64::from(v as f32))
    }

    fn sample() -> Vec<FrameSequence> {
        let mut rng = SeededRng::new(3);
        vec![
            FrameSequence::new("vid-a", f32_matrix(6, 4, &mut rng), f32_matrix(6, 2, &mut rng), vec![3, 1]).unwrap(),
            FrameSequence::new("ü", f32_matrix(1, 4, &mut rng), f32_matrix(1, 2, &mut rng), vec![]).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let seqs = sample();
        let bytes = encode_features(&seqs).unwrap();
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back, seqs);
        assert_eq!(back[0].labels, vec![1, 3]);
        assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn record_layout() {
        let bytes = encode_features(&sample()[1..]).unwrap();
        assert_eq!(&bytes[..6], b"FVC1\x01\x00");
        assert_eq!(&bytes[6..8], &[2, 0]);
        assert_eq!(&bytes[8..10], "ü".as_bytes());
        assert_eq!(&bytes[10..14], &[1, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &[4, 0, 2, 0]);
        assert_eq!(bytes.len(), 18 + 6 * 4 + 2);
    }

    #[test]
    fn header_only_file_is_empty() {
        let bytes = encode_features(&[]).unwrap();
        assert_eq!(bytes.len(), 6);
        assert!(decode_features(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corruption_is_a_format_error() {
        let good = encode_features(&sample()).unwrap();
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        for cut in [3, 7, 20, good.len() - 1] {
            assert!(matches!(decode_features(&good[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut zero_frames = encode_features(&sample()[1..]).unwrap();
        zero_frames[10] = 0;
        let mut z = zero_frames[..18].to_vec();
        z.extend_from_slice(&[0, 0]);
        assert!(matches!(decode_features(&z), Err(Error::Format(_))));
    }
}
