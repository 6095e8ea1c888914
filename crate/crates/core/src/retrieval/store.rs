//! Pool archives: a tar file holding `manifest.json`, `descriptors.bin` (little-endian
//! `f32`, one row per segment in manifest order), and `segments/<id>.png` plus
//! `masks/<id>.png` for every segment.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::pool::{CandidatePool, PoolEntry, PoolParams, SegmentRecord};
use crate::compositor::Segment;
use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::imaging::{mask_from_gray, mask_to_gray};

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    params: PoolParams,
    segments: Vec<StoredSegment>,
}

#[derive(Serialize, Deserialize)]
struct StoredSegment {
    #[serde(flatten)]
    record: SegmentRecord,
    /// Tight mask bounds inside the cutout.
    mask_bbox: PixelBox,
}

fn png_bytes(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn append<W: Write>(tar: &mut tar::Builder<W>, name: &str, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    tar.append_data(&mut header, name, data)
}

pub fn write_pool<W: Write>(pool: &CandidatePool, out: W) -> Result<()> {
    let mut tar = tar::Builder::new(out);
    let mut stored = Vec::with_capacity(pool.len());
    let mut descriptors = Vec::new();
    let mut files = Vec::new();
    for (record, segment, descriptor) in pool.entries() {
        stored.push(StoredSegment {
            record: record.clone(),
            mask_bbox: segment.bbox,
        });
        descriptors.extend(descriptor.iter().flat_map(|v| v.to_le_bytes()));
        let (w, h) = segment.image.dimensions();
        files.push((
            format!("segments/{}.png", record.id),
            png_bytes(segment.image.clone().into())?,
        ));
        files.push((
            format!("masks/{}.png", record.id),
            png_bytes(mask_to_gray(&segment.mask, w, h).into())?,
        ));
    }
    let manifest = Manifest {
        version: VERSION,
        params: pool.params().clone(),
        segments: stored,
    };
    let io = |e| Error::io("pool archive", e);
    append(&mut tar, "manifest.json", &serde_json::to_vec_pretty(&manifest)?).map_err(io)?;
    append(&mut tar, "descriptors.bin", &descriptors).map_err(io)?;
    for (name, data) in files {
        append(&mut tar, &name, &data).map_err(io)?;
    }
    tar.into_inner().map_err(io)?.flush().map_err(io)
}

pub fn read_pool<R: Read>(input: R) -> Result<CandidatePool> {
    let mut files: HashMap<String, Vec<u8>> = HashMap::new();
    let mut archive = tar::Archive::new(input);
    let io = |e| Error::io("pool archive", e);
    for entry in archive.entries().map_err(io)? {
        let mut entry = entry.map_err(io)?;
        let name = entry.path().map_err(io)?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(io)?;
        files.insert(name, data);
    }
    let mut take = |name: &str| {
        files
            .remove(name)
            .ok_or_else(|| Error::format("pool archive", format!("missing {name}")))
    };
    let manifest: Manifest = serde_json::from_slice(&take("manifest.json")?)?;
    if manifest.version != VERSION {
        return Err(Error::format(
            "pool archive",
            format!("unsupported version {}", manifest.version),
        ));
    }
    let dim = 2 * manifest.params.dims;
    let raw = take("descriptors.bin")?;
    if raw.len() != manifest.segments.len() * dim * 4 {
        return Err(Error::format(
            "pool archive",
            format!(
                "descriptors.bin holds {} bytes, expected {} segments of {dim} floats",
                raw.len(),
                manifest.segments.len()
            ),
        ));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut entries = Vec::with_capacity(manifest.segments.len());
    for (s, descriptor) in manifest.segments.into_iter().zip(values.chunks_exact(dim)) {
        let id = s.record.id;
        let image: RgbImage =
            image::load_from_memory_with_format(&take(&format!("segments/{id}.png"))?, ImageFormat::Png)?
                .to_rgb8();
        let mask: GrayImage =
            image::load_from_memory_with_format(&take(&format!("masks/{id}.png"))?, ImageFormat::Png)?
                .to_luma8();
        if mask.dimensions() != image.dimensions() {
            return Err(Error::format(
                "pool archive",
                format!("segment {id} mask and image differ in size"),
            ));
        }
        let mut segment = Segment::new(id, image, mask_from_gray(&mask))?;
        segment.bbox = s.mask_bbox;
        entries.push(PoolEntry {
            record: s.record,
            segment,
            descriptor: descriptor.to_vec(),
        });
    }
    CandidatePool::new(manifest.params, entries)
}

pub fn save_pool(pool: &CandidatePool, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_pool(pool, BufWriter::new(f))
}

pub fn load_pool(path: &Path) -> Result<CandidatePool> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pool(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::pool::tests::entry;
    use crate::retrieval::ColorLayoutExtractor;

    #[test]
    fn round_trip_preserves_pool() {
        let params = PoolParams {
            dims: 2,
            ..PoolParams::for_extractor(&ColorLayoutExtractor::default())
        };
        let pool = CandidatePool::new(
            params,
            vec![
                entry(7, vec![0.5, 0.5, 0.5, 0.5], (0.1, 0.3)),
                entry(3, vec![1.0, 0.0, 0.0, 0.0], (0.2, 0.2)),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_pool(&pool, &mut buf).unwrap();
        let back = read_pool(buf.as_slice()).unwrap();
        assert_eq!(back.records(), pool.records());
        assert_eq!(back.params(), pool.params());
        for (a, b) in pool.entries().zip(back.entries()) {
            assert_eq!(a.2, b.2);
            assert_eq!(a.1.image, b.1.image);
            assert_eq!(a.1.mask, b.1.mask);
            assert_eq!(a.1.bbox, b.1.bbox);
        }
        let mut again = Vec::new();
        write_pool(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let params = PoolParams {
            dims: 2,
            ..PoolParams::for_extractor(&ColorLayoutExtractor::default())
        };
        let pool =
            CandidatePool::new(params, vec![entry(1, vec![1.0, 0.0, 0.0, 0.0], (0.1, 0.1))]).unwrap();
        let mut buf = Vec::new();
        write_pool(&pool, &mut buf).unwrap();
        assert!(read_pool(&buf[..600]).is_err());
    }
}
