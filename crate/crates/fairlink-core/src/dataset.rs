//! Sample-set container: spawn users, synthesize their channels, run the
//! camera pipeline, and persist everything in a streamable binary file.
//!
//! File layout: magic "MMUA", version u16, a fixed header carrying
//! (K_max, L, M, record count, scene hash, minimum pilot length), then one
//! length-prefixed block per record. Numeric payloads are f32
//! little-endian; structural fields are unsigned little-endian integers.
//! Records are independent, so a reader can skip blocks by their length
//! prefix without decoding them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::channel::{synthesize_channel, ChannelTensor};
use crate::geom::Vec3;
use crate::parallel::map_indexed;
use crate::rng::{derive, substream, tag};
use crate::scene::Scene;
use crate::vision::{localize_users, DetectionNoise, LocationEstimates};
use num_complex::Complex64;
use rand::Rng;

const MAGIC: &[u8; 4] = b"MMUA";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("scene rejected the requested user count: {0}")]
    Scene(#[from] crate::scene::SceneError),
}

fn bad(msg: impl Into<String>) -> DatasetError {
    DatasetError::Format(msg.into())
}

/// Fixed or uniformly drawn per-record user count (range inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KSpec {
    Fixed(usize),
    Range(usize, usize),
}

impl KSpec {
    pub fn max(&self) -> usize {
        match *self {
            KSpec::Fixed(k) => k,
            KSpec::Range(_, hi) => hi,
        }
    }

    fn draw(&self, seed: u64, sample: u64) -> usize {
        match *self {
            KSpec::Fixed(k) => k,
            KSpec::Range(lo, hi) => substream(seed, tag::SPAWN, sample).gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub k_max: usize,
    pub l: usize,
    pub m: usize,
    pub n_records: usize,
    pub scene_hash: u64,
    /// Smallest pilot length usable with this set (orthogonal sequences
    /// need at least one symbol per user).
    pub min_n_u: usize,
}

/// One spawn: ground truth, its channel, the camera pipeline's estimates,
/// and the seed evaluation uses to draw this sample's pilot noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub sample_id: u64,
    pub positions: Vec<Vec3>,
    pub h: ChannelTensor,
    pub estimates: LocationEstimates,
    pub pilot_seed: u64,
    pub scene_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

/// Generate `n_samples` independent records. Every record's channel and
/// location estimates come from the same spawn; all randomness is indexed
/// off `seed` and the sample id, so regeneration is exact.
pub fn generate_records(
    scene: &Scene,
    n_samples: usize,
    k_spec: KSpec,
    noise: &DetectionNoise,
    seed: u64,
) -> Result<Vec<DatasetRecord>, DatasetError> {
    // Fail the whole call up front if the largest draw cannot spawn.
    scene.spawn_ues(k_spec.max(), 0)?;
    let scene_hash = scene.hash();
    let records = map_indexed(n_samples, |i| {
        let id = i as u64;
        let k = k_spec.draw(seed, id);
        let ues = scene
            .spawn_ues(k, derive(seed, tag::SAMPLE, id))
            .expect("spawn limit checked above");
        let h = synthesize_channel(scene, &ues, derive(seed, tag::DIFFUSE, id));
        let estimates = localize_users(scene, &ues, noise, derive(seed, tag::DETECT, id));
        DatasetRecord {
            sample_id: id,
            positions: ues.iter().map(|u| u.position).collect(),
            h,
            estimates,
            pilot_seed: derive(seed, tag::PILOT, id),
            scene_hash,
        }
    });
    Ok(records)
}

fn header_of(scene_hash: u64, k_max: usize, l: usize, m: usize, n: usize) -> DatasetHeader {
    DatasetHeader { k_max, l, m, n_records: n, scene_hash, min_n_u: k_max }
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn encode_record(rec: &DatasetRecord) -> Vec<u8> {
    let k = rec.positions.len();
    let (l, m) = (rec.h.l, rec.h.m);
    let mut out = Vec::with_capacity(8 + 4 + 8 + 8 + 4 * (3 * k + 2 * k * l * m + 3 * k * l));
    push_u64(&mut out, rec.sample_id);
    push_u32(&mut out, k as u32);
    push_u64(&mut out, rec.pilot_seed);
    push_u64(&mut out, rec.scene_hash);
    for p in &rec.positions {
        push_f32(&mut out, p.x);
        push_f32(&mut out, p.y);
        push_f32(&mut out, p.z);
    }
    for z in &rec.h.data {
        push_f32(&mut out, z.re);
        push_f32(&mut out, z.im);
    }
    for ku in 0..k {
        for ap in 0..l {
            let q = rec.estimates.at(ku, ap);
            push_f32(&mut out, q.x);
            push_f32(&mut out, q.y);
            push_f32(&mut out, q.z);
        }
    }
    out
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut head = Vec::with_capacity(4 + 2 + 4 * 3 + 8 * 2 + 4);
    head.extend_from_slice(MAGIC);
    push_u16(&mut head, VERSION);
    push_u32(&mut head, dataset.header.k_max as u32);
    push_u32(&mut head, dataset.header.l as u32);
    push_u32(&mut head, dataset.header.m as u32);
    push_u64(&mut head, dataset.header.n_records as u64);
    push_u64(&mut head, dataset.header.scene_hash);
    push_u32(&mut head, dataset.header.min_n_u as u32);
    w.write_all(&head)?;
    for rec in &dataset.records {
        let block = encode_record(rec);
        w.write_all(&(block.len() as u64).to_le_bytes())?;
        w.write_all(&block)?;
    }
    w.flush()?;
    Ok(())
}

/// Generate and persist in one step; returns the in-memory dataset.
pub fn generate_dataset(
    scene: &Scene,
    n_samples: usize,
    k_spec: KSpec,
    noise: &DetectionNoise,
    seed: u64,
    path: &Path,
) -> Result<Dataset, DatasetError> {
    let records = generate_records(scene, n_samples, k_spec, noise, seed)?;
    let header = header_of(
        scene.hash(),
        k_spec.max(),
        scene.n_aps(),
        scene.n_antennas(),
        records.len(),
    );
    let dataset = Dataset { header, records };
    write_dataset(path, &dataset)?;
    Ok(dataset)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(bad("record block ended early"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn vec3(&mut self) -> Result<Vec3, DatasetError> {
        Ok(Vec3 { x: self.f32()?, y: self.f32()?, z: self.f32()? })
    }
}

fn decode_record(block: &[u8], header: &DatasetHeader) -> Result<DatasetRecord, DatasetError> {
    let mut c = Cursor { buf: block, pos: 0 };
    let sample_id = c.u64()?;
    let k = c.u32()? as usize;
    if k == 0 || k > header.k_max {
        return Err(bad(format!("record {sample_id} has user count {k} outside the header")));
    }
    let pilot_seed = c.u64()?;
    let scene_hash = c.u64()?;
    if scene_hash != header.scene_hash {
        return Err(bad(format!("record {sample_id} belongs to a different scene")));
    }
    let (l, m) = (header.l, header.m);
    let mut positions = Vec::with_capacity(k);
    for _ in 0..k {
        positions.push(c.vec3()?);
    }
    let mut h = ChannelTensor::zeros(k, l, m);
    for z in h.data.iter_mut() {
        *z = Complex64::new(c.f32()?, c.f32()?);
    }
    let mut est = Vec::with_capacity(k * l);
    for _ in 0..k * l {
        est.push(c.vec3()?);
    }
    if c.pos != block.len() {
        return Err(bad(format!("record {sample_id} has trailing bytes")));
    }
    Ok(DatasetRecord {
        sample_id,
        positions,
        h,
        estimates: LocationEstimates::from_parts(k, l, est),
        pilot_seed,
        scene_hash,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a sample-set file (bad magic)"));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(bad(format!("unsupported dataset version {version}")));
    }
    let mut fixed = [0u8; 4 * 3 + 8 * 2 + 4];
    r.read_exact(&mut fixed)?;
    let mut c = Cursor { buf: &fixed, pos: 0 };
    let header = DatasetHeader {
        k_max: c.u32()? as usize,
        l: c.u32()? as usize,
        m: c.u32()? as usize,
        n_records: c.u64()? as usize,
        scene_hash: c.u64()?,
        min_n_u: c.u32()? as usize,
    };
    let mut records = Vec::with_capacity(header.n_records);
    for _ in 0..header.n_records {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut block = vec![0u8; len];
        r.read_exact(&mut block)?;
        records.push(decode_record(&block, &header)?);
    }
    Ok(Dataset { header, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneConfig;

    fn small_scene() -> Scene {
        SceneConfig::urban_intersection_reduced(2, 2, 2).build().unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_byte_identical() {
        let scene = small_scene();
        let noise = DetectionNoise::default();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2, p3) = (
            dir.path().join("a.bin"),
            dir.path().join("b.bin"),
            dir.path().join("c.bin"),
        );
        generate_dataset(&scene, 6, KSpec::Fixed(3), &noise, 11, &p1).unwrap();
        generate_dataset(&scene, 6, KSpec::Fixed(3), &noise, 11, &p2).unwrap();
        generate_dataset(&scene, 6, KSpec::Fixed(3), &noise, 12, &p3).unwrap();
        let (b1, b2, b3) = (
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            std::fs::read(&p3).unwrap(),
        );
        assert_eq!(b1, b2);
        assert_ne!(b1, b3);
    }

    #[test]
    fn records_roundtrip_through_the_file_format() {
        let scene = small_scene();
        let noise = DetectionNoise::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        let written = generate_dataset(&scene, 5, KSpec::Fixed(3), &noise, 7, &path).unwrap();
        let read = read_dataset(&path).unwrap();
        assert_eq!(read.header, written.header);
        assert_eq!(read.header.k_max, 3);
        assert_eq!(read.header.l, scene.n_aps());
        assert_eq!(read.header.m, scene.n_antennas());
        assert_eq!(read.header.scene_hash, scene.hash());
        assert_eq!(read.header.min_n_u, 3);
        assert_eq!(read.records.len(), 5);
        for (got, want) in read.records.iter().zip(&written.records) {
            assert_eq!(got.sample_id, want.sample_id);
            assert_eq!(got.pilot_seed, want.pilot_seed);
            // Payloads live as f32 on disk.
            for (g, w) in got.positions.iter().zip(&want.positions) {
                assert!((g.x - w.x).abs() < 1e-4);
                assert!((g.y - w.y).abs() < 1e-4);
                assert!((g.z - w.z).abs() < 1e-4);
            }
            for (g, w) in got.h.data.iter().zip(&want.h.data) {
                let scale = w.norm().max(1e-12);
                assert!((g - w).norm() / scale < 1e-5);
            }
            for ku in 0..3 {
                for ap in 0..scene.n_aps() {
                    let g = got.estimates.at(ku, ap);
                    let w = want.estimates.at(ku, ap);
                    assert!((g.x - w.x).abs() < 1e-3);
                    assert!((g.y - w.y).abs() < 1e-3);
                    assert_eq!(got.estimates.is_missing(ku, ap), want.estimates.is_missing(ku, ap));
                }
            }
        }
    }

    #[test]
    fn varying_user_counts_stay_inside_the_declared_range() {
        let scene = small_scene();
        let noise = DetectionNoise::default();
        let records =
            generate_records(&scene, 40, KSpec::Range(2, 4), &noise, 5).unwrap();
        let counts: Vec<usize> = records.iter().map(|r| r.positions.len()).collect();
        assert!(counts.iter().all(|&k| (2..=4).contains(&k)));
        let distinct: std::collections::HashSet<usize> = counts.iter().cloned().collect();
        assert!(distinct.len() >= 2, "range draw should vary, got {distinct:?}");
        for rec in &records {
            assert_eq!(rec.h.k, rec.positions.len());
            assert_eq!(rec.estimates.k, rec.positions.len());
        }
    }

    #[test]
    fn channels_and_estimates_come_from_the_same_spawn() {
        let scene = small_scene();
        let noise = DetectionNoise::default();
        let seed = 23;
        let records = generate_records(&scene, 3, KSpec::Fixed(2), &noise, seed).unwrap();
        for rec in &records {
            let ues = scene
                .spawn_ues(2, derive(seed, tag::SAMPLE, rec.sample_id))
                .unwrap();
            for (u, p) in ues.iter().zip(&rec.positions) {
                assert_eq!(u.position, *p);
            }
            let h = synthesize_channel(&scene, &ues, derive(seed, tag::DIFFUSE, rec.sample_id));
            assert_eq!(h.data, rec.h.data);
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"MMUB\x01\x00rest").unwrap();
        match read_dataset(&junk) {
            Err(DatasetError::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }

        let scene = small_scene();
        let noise = DetectionNoise::default();
        let good = dir.path().join("good.bin");
        generate_dataset(&scene, 2, KSpec::Fixed(2), &noise, 1, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_dataset(&cut), Err(DatasetError::Io(_))));

        let over = dir.path().join("excess.bin");
        generate_dataset(&scene, 1, KSpec::Fixed(40), &noise, 1, &over).unwrap_err();
    }
}
