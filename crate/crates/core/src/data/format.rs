//! `STHD` binary dataset files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "STHD"
//! version    u32      1
//! mode       u32      0 temporal, 1 angular
//! seq_len    u32      N
//! img_h      u32
//! img_w      u32
//! channels   u32      3
//! joints     u32      21
//! subjects   u32
//! activities u32
//! sequences  u32      per (subject, activity)
//! samples    u32      M
//! seed       u64
//! M records:
//!   subject, activity, sequence   u32 × 3
//!   camera ids                    u32 × N
//!   hidden-finger masks           u8  × N
//!   geometry                      f64 × 20 × N
//!       fx fy cx cy, R row-major (9), t (3), wrist in camera frame (3), bone
//!   frames                        f32 × N·3·img_h·img_w   (channel-major)
//!   gt2d                          f64 × N·21·2            (pixels)
//!   gt3d                          f64 × N·21·3
//! crc32      u32      of every preceding byte
//! ```

use std::path::Path;

use super::camera::Camera;
use super::{Dataset, DatasetHeader, FrameGeometry, HandSequenceSample, JOINTS};
use crate::config::SequenceMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STHD";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("dataset file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn geometry_values(g: &FrameGeometry) -> Vec<f64> {
    let c = &g.camera;
    let mut v = vec![c.fx, c.fy, c.cx, c.cy];
    v.extend(c.rotation.iter().flatten());
    v.extend(c.translation);
    v.extend(g.root);
    v.push(g.bone);
    v
}

fn geometry_from(v: &[f64]) -> FrameGeometry {
    let r = |i: usize| [v[4 + 3 * i], v[5 + 3 * i], v[6 + 3 * i]];
    FrameGeometry {
        camera: Camera {
            fx: v[0],
            fy: v[1],
            cx: v[2],
            cy: v[3],
            rotation: [r(0), r(1), r(2)],
            translation: [v[13], v[14], v[15]],
        },
        root: [v[16], v[17], v[18]],
        bone: v[19],
    }
}

const GEOMETRY_LEN: usize = 20;

/// Serializes a dataset.
pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let h = &ds.header;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(match h.mode {
        SequenceMode::Temporal => 0,
        SequenceMode::Angular => 1,
    });
    for v in [h.seq_len, h.img_h, h.img_w, h.channels, h.joints] {
        w.len(v)?;
    }
    w.u32(h.subjects);
    w.u32(h.activities);
    w.u32(h.sequences);
    w.len(ds.samples.len())?;
    w.0.extend_from_slice(&h.seed.to_le_bytes());
    for s in &ds.samples {
        w.u32(s.subject);
        w.u32(s.activity);
        w.u32(s.sequence);
        s.cameras.iter().for_each(|&c| w.u32(c));
        w.0.extend_from_slice(&s.hidden);
        for g in &s.geometry {
            w.f64s(&geometry_values(g));
        }
        s.frames
            .data()
            .iter()
            .for_each(|x| w.0.extend_from_slice(&x.to_le_bytes()));
        w.f64s(s.gt2d.data());
        w.f64s(s.gt3d.data());
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

/// Parses and validates a serialized dataset.
pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an STHD dataset file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("dataset checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mode = match r.u32()? {
        0 => SequenceMode::Temporal,
        1 => SequenceMode::Angular,
        m => return Err(Error::Format(format!("unknown sequence mode {m}"))),
    };
    let (seq_len, img_h, img_w) = (r.usize()?, r.usize()?, r.usize()?);
    let (channels, joints) = (r.usize()?, r.usize()?);
    let (subjects, activities, sequences) = (r.u32()?, r.u32()?, r.u32()?);
    let count = r.usize()?;
    let header = DatasetHeader {
        mode,
        seq_len,
        img_h,
        img_w,
        channels,
        joints,
        subjects,
        activities,
        sequences,
        seed: r.u64()?,
    };
    if header.joints != JOINTS {
        return Err(Error::Format(format!("{} joints, expected {JOINTS}", header.joints)));
    }
    let n = header.seq_len;
    let pixels = n * header.channels * header.img_h * header.img_w;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (subject, activity, sequence) = (r.u32()?, r.u32()?, r.u32()?);
        let cameras = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        let hidden = r.take(n)?.to_vec();
        let geometry = r
            .f64s(n * GEOMETRY_LEN)?
            .chunks(GEOMETRY_LEN)
            .map(geometry_from)
            .collect();
        let frames = Tensor::new(
            vec![n, header.channels, header.img_h, header.img_w],
            r.f32s(pixels)?,
        )?;
        let gt2d = Tensor::new(vec![n, JOINTS, 2], r.f64s(n * JOINTS * 2)?)?;
        let gt3d = Tensor::new(vec![n, JOINTS, 3], r.f64s(n * JOINTS * 3)?)?;
        samples.push(HandSequenceSample {
            mode,
            subject,
            activity,
            sequence,
            cameras,
            hidden,
            geometry,
            frames,
            gt2d,
            gt3d,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last sample",
            body.len() - r.pos
        )));
    }
    let ds = Dataset { header, samples };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(ds)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = GeneratorSpec {
            occlusion: 0.5,
            ..GeneratorSpec::new(SequenceMode::Angular, 2, 1, 2, 3)
        };
        let ds = generate_dataset(&spec).unwrap();
        let bytes = to_bytes(&ds).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let ds = generate_dataset(&GeneratorSpec::new(SequenceMode::Temporal, 1, 1, 1, 0)).unwrap();
        let mut bytes = to_bytes(&ds).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"NOPE0000"), Err(Error::Format(_))));
        let short = &to_bytes(&ds).unwrap()[..100];
        assert!(from_bytes(short).is_err());
    }
}
