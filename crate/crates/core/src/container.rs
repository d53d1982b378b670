//! Binary containers for sinograms, images and model parameters.
//!
//! Layout: 8-byte magic, `u32` little-endian header length, UTF-8 JSON
//! header, then a payload of little-endian binary32 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::projector::{ScanGeometry, Sinogram};

pub const SINOGRAM_MAGIC: &[u8; 8] = b"CTSINO01";
pub const IMAGE_MAGIC: &[u8; 8] = b"CTIMGG01";
pub const MODEL_MAGIC: &[u8; 8] = b"CTMODL01";
pub const CONTAINER_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct SinogramHeader {
    format_version: String,
    geometry: ScanGeometry,
    n_views: usize,
    n_detectors: usize,
    provenance: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageHeader {
    format_version: String,
    n_pixels: usize,
    field_of_view: f64,
    provenance: Vec<String>,
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: impl Iterator<Item = f32>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Domain("container header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + header.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8], path: &Path) -> Result<(H, Vec<f32>)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 {
        return Err(bad("truncated preamble"));
    }
    if &bytes[..8] != magic {
        return Err(bad("wrong magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: H = serde_json::from_slice(&body[..header_len])?;
    let payload = &body[header_len..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of binary32 values"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_sinogram(sino: &Sinogram) -> Result<Vec<u8>> {
    let header = SinogramHeader {
        format_version: CONTAINER_VERSION.into(),
        geometry: sino.geometry.clone(),
        n_views: sino.geometry.n_views,
        n_detectors: sino.geometry.n_detectors,
        provenance: sino.provenance.clone(),
    };
    encode(SINOGRAM_MAGIC, &header, sino.data.iter().map(|&v| v as f32))
}

pub fn decode_sinogram(bytes: &[u8], path: &Path) -> Result<Sinogram> {
    let (h, values): (SinogramHeader, _) = decode(SINOGRAM_MAGIC, bytes, path)?;
    if h.n_views != h.geometry.n_views || h.n_detectors != h.geometry.n_detectors {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "header dimensions disagree with geometry".into(),
        });
    }
    if values.len() != h.n_views * h.n_detectors {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "payload holds {} values, header declares {}x{}",
                values.len(),
                h.n_views,
                h.n_detectors
            ),
        });
    }
    Sinogram::from_data(
        h.geometry,
        values.into_iter().map(f64::from).collect(),
        h.provenance,
    )
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    write_bytes(path, &encode_sinogram(sino)?)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(&read_bytes(path)?, path)
}

pub fn encode_image(img: &ImageGrid) -> Result<Vec<u8>> {
    let header = ImageHeader {
        format_version: CONTAINER_VERSION.into(),
        n_pixels: img.n_pixels,
        field_of_view: img.field_of_view,
        provenance: img.provenance.clone(),
    };
    encode(IMAGE_MAGIC, &header, img.data.iter().map(|&v| v as f32))
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<ImageGrid> {
    let (h, values): (ImageHeader, _) = decode(IMAGE_MAGIC, bytes, path)?;
    if values.len() != h.n_pixels * h.n_pixels {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("payload holds {} values, header declares {}^2", values.len(), h.n_pixels),
        });
    }
    let mut img = ImageGrid::from_data(
        h.n_pixels,
        h.field_of_view,
        values.into_iter().map(f64::from).collect(),
    )?;
    img.provenance = h.provenance;
    Ok(img)
}

pub fn write_image(path: &Path, img: &ImageGrid) -> Result<()> {
    write_bytes(path, &encode_image(img)?)
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    decode_image(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinogram_layout_is_bit_exact() {
        let g = ScanGeometry::new(2, 1.0, 0.0, 3, 0.5).unwrap();
        let sino = Sinogram::from_data(g, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5], vec!["t".into()]).unwrap();
        let bytes = encode_sinogram(&sino).unwrap();
        assert_eq!(&bytes[..8], b"CTSINO01");
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header["n_views"], 2);
        assert_eq!(header["n_detectors"], 3);
        assert_eq!(header["provenance"][0], "t");
        let payload = &bytes[12 + hlen..];
        assert_eq!(payload.len(), 24);
        assert_eq!(&payload[20..24], &5.5f32.to_le_bytes());

        let back = decode_sinogram(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, sino);
    }

    #[test]
    fn image_round_trip_and_magic_check() {
        let mut img = ImageGrid::from_data(2, 3.0, vec![0.25, -1.0, 2.0, 0.0]).unwrap();
        img.provenance.push("fbp".into());
        let bytes = encode_image(&img).unwrap();
        assert_eq!(&bytes[..8], b"CTIMGG01");
        assert_eq!(decode_image(&bytes, Path::new("mem")).unwrap(), img);
        assert!(matches!(
            decode_sinogram(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        assert!(decode_image(&bytes[..bytes.len() - 2], Path::new("mem")).is_err());
    }
}
