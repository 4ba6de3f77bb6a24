//! IDX file parsing (the MNIST container format).
//!
//! Header: 4-byte big-endian magic, then one big-endian u32 per dimension.
//! Magic 0x0000_0803 is a rank-3 u8 tensor (images), 0x0000_0801 a rank-1
//! u8 vector (labels). Pixels are scaled to `[0, 1]` by dividing by 255.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use crate::error::{AfdpError, Result};
use crate::models::Sample;

pub const MAGIC_IMAGES: u32 = 0x0000_0803;
pub const MAGIC_LABELS: u32 = 0x0000_0801;

/// Upper bound on element count, to reject corrupt headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

/// Read just the header of an IDX file.
pub fn read_header<R: Read>(r: &mut R) -> Result<IdxHeader> {
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| AfdpError::Dataset("file too short for an IDX magic".into()))?;
    // Byte 2 of the magic is the element type (0x08: u8), byte 3 the rank.
    let (zeros, ty, rank) = (magic >> 16, (magic >> 8) & 0xff, magic & 0xff);
    if zeros != 0 {
        return Err(AfdpError::Dataset(format!("bad IDX magic 0x{magic:08x}")));
    }
    if ty != 0x08 {
        return Err(AfdpError::Dataset(format!(
            "unsupported IDX element type 0x{ty:02x} (only u8 is supported)"
        )));
    }
    if rank == 0 || rank > 4 {
        return Err(AfdpError::Dataset(format!("unsupported IDX rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for i in 0..rank {
        dims.push(r.read_u32::<BigEndian>().map_err(|_| {
            AfdpError::Dataset(format!("IDX header truncated at dimension {i}"))
        })?);
    }
    Ok(IdxHeader { magic, dims })
}

/// Images as flat rows of `rows * cols` features scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

pub fn read_images<R: Read>(r: &mut R) -> Result<IdxImages> {
    let header = read_header(r)?;
    if header.magic != MAGIC_IMAGES {
        return Err(AfdpError::Dataset(format!(
            "expected image magic 0x{MAGIC_IMAGES:08x}, got 0x{:08x}",
            header.magic
        )));
    }
    let (count, rows, cols) = (header.dims[0] as u64, header.dims[1] as u64, header.dims[2] as u64);
    let total = count * rows * cols;
    if total > MAX_ELEMENTS {
        return Err(AfdpError::Dataset(format!("IDX body of {total} bytes exceeds limit")));
    }
    let mut raw = vec![0u8; total as usize];
    r.read_exact(&mut raw).map_err(|_| {
        AfdpError::Dataset(format!("IDX body truncated: expected {total} pixel bytes"))
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(AfdpError::Dataset("trailing bytes after IDX image body".into()));
    }
    Ok(IdxImages {
        count: count as usize,
        rows: rows as usize,
        cols: cols as usize,
        pixels: raw.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn read_labels<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let header = read_header(r)?;
    if header.magic != MAGIC_LABELS {
        return Err(AfdpError::Dataset(format!(
            "expected label magic 0x{MAGIC_LABELS:08x}, got 0x{:08x}",
            header.magic
        )));
    }
    let count = header.dims[0] as u64;
    if count > MAX_ELEMENTS {
        return Err(AfdpError::Dataset(format!("IDX label count {count} exceeds limit")));
    }
    let mut raw = vec![0u8; count as usize];
    r.read_exact(&mut raw).map_err(|_| {
        AfdpError::Dataset(format!("IDX body truncated: expected {count} label bytes"))
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(AfdpError::Dataset("trailing bytes after IDX label body".into()));
    }
    Ok(raw)
}

/// Pair an image file with its label file into samples. `keep` filters and
/// remaps labels (for two-class subsets); `None` keeps all classes as-is.
pub fn to_samples(images: &IdxImages, labels: &[u8], keep: Option<&[u8]>) -> Result<Vec<Sample>> {
    if images.count != labels.len() {
        return Err(AfdpError::Dataset(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let dim = images.rows * images.cols;
    let mut out = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let class = match keep {
            Some(classes) => match classes.iter().position(|&c| c == label) {
                Some(idx) => idx,
                None => continue,
            },
            None => label as usize,
        };
        out.push(Sample {
            features: images.pixels[i * dim..(i + 1) * dim].to_vec(),
            label: class,
        });
    }
    if out.is_empty() {
        return Err(AfdpError::Dataset("no samples matched the requested classes".into()));
    }
    Ok(out)
}

/// Load `<stem>-images-idx3-ubyte` and `<stem>-labels-idx1-ubyte` from a
/// directory (the conventional MNIST file names).
pub fn load_split(dir: &Path, stem: &str, keep: Option<&[u8]>) -> Result<Vec<Sample>> {
    let images_path = dir.join(format!("{stem}-images-idx3-ubyte"));
    let labels_path = dir.join(format!("{stem}-labels-idx1-ubyte"));
    let mut fi = std::fs::File::open(&images_path).map_err(|e| {
        AfdpError::Dataset(format!("open {}: {e}", images_path.display()))
    })?;
    let mut fl = std::fs::File::open(&labels_path).map_err(|e| {
        AfdpError::Dataset(format!("open {}: {e}", labels_path.display()))
    })?;
    let images = read_images(&mut std::io::BufReader::new(&mut fi))?;
    let labels = read_labels(&mut std::io::BufReader::new(&mut fl))?;
    to_samples(&images, &labels, keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Build an IDX byte stream by hand: big-endian header, raw body.
    fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&magic.to_be_bytes());
        for &d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    /// Minimal reference decoder, deliberately written without the library
    /// types: manual big-endian arithmetic over the raw bytes.
    fn reference_images(bytes: &[u8]) -> (usize, usize, usize, Vec<f64>) {
        let be = |b: &[u8]| {
            ((b[0] as u32) << 24) | ((b[1] as u32) << 16) | ((b[2] as u32) << 8) | b[3] as u32
        };
        assert_eq!(be(&bytes[0..4]), 0x0000_0803);
        let n = be(&bytes[4..8]) as usize;
        let r = be(&bytes[8..12]) as usize;
        let c = be(&bytes[12..16]) as usize;
        let px = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
        (n, r, c, px)
    }

    #[test]
    fn parses_a_two_image_file_and_matches_reference() {
        let body: Vec<u8> = (0..=17).collect(); // 2 images of 3x3
        let bytes = idx_bytes(MAGIC_IMAGES, &[2, 3, 3], &body);
        let parsed = read_images(&mut &bytes[..]).unwrap();
        let (n, r, c, px) = reference_images(&bytes);
        assert_eq!((parsed.count, parsed.rows, parsed.cols), (n, r, c));
        assert_eq!(parsed.pixels, px);
        assert_eq!(parsed.pixels[0], 0.0);
        assert_eq!(parsed.pixels[17], 17.0 / 255.0);
        assert!(parsed.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn parses_labels() {
        let bytes = idx_bytes(MAGIC_LABELS, &[4], &[7, 0, 9, 3]);
        assert_eq!(read_labels(&mut &bytes[..]).unwrap(), vec![7, 0, 9, 3]);
    }

    #[test]
    fn header_reports_magic_and_dims() {
        let bytes = idx_bytes(MAGIC_IMAGES, &[60_000, 28, 28], &[]);
        let h = read_header(&mut &bytes[..]).unwrap();
        assert_eq!(h.magic, MAGIC_IMAGES);
        assert_eq!(h.dims, vec![60_000, 28, 28]);
    }

    #[test]
    fn structural_errors_are_reported() {
        // Wrong magic for the reader used.
        let bytes = idx_bytes(MAGIC_LABELS, &[1], &[0]);
        assert!(matches!(read_images(&mut &bytes[..]), Err(AfdpError::Dataset(_))));
        // Nonzero high bytes.
        let bytes = idx_bytes(0x0102_0803, &[1, 1, 1], &[0]);
        assert!(read_header(&mut &bytes[..]).is_err());
        // Non-u8 element type.
        let bytes = idx_bytes(0x0000_0D03, &[1, 1, 1], &[0]);
        assert!(read_header(&mut &bytes[..]).is_err());
        // Truncated body.
        let bytes = idx_bytes(MAGIC_IMAGES, &[2, 2, 2], &[0; 7]);
        assert!(read_images(&mut &bytes[..]).is_err());
        // Trailing garbage.
        let bytes = idx_bytes(MAGIC_IMAGES, &[1, 1, 1], &[0, 99]);
        assert!(read_images(&mut &bytes[..]).is_err());
        // Empty input.
        assert!(read_header(&mut &[][..]).is_err());
    }

    #[test]
    fn two_class_filter_remaps_labels() {
        let body: Vec<u8> = vec![10, 20, 30, 40];
        let images = read_images(&mut &idx_bytes(MAGIC_IMAGES, &[4, 1, 1], &body)[..]).unwrap();
        let labels = vec![3u8, 5, 3, 8];
        let samples = to_samples(&images, &labels, Some(&[3, 5])).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].label, 0);
        assert_eq!(samples[1].label, 1);
        assert_eq!(samples[2].label, 0);
        assert_eq!(samples[1].features, vec![20.0 / 255.0]);
        // Count mismatch.
        assert!(to_samples(&images, &[1, 2], None).is_err());
        // Nothing kept.
        assert!(to_samples(&images, &labels, Some(&[9])).is_err());
    }
}
