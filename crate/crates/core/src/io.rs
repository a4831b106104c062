//! Image and feature-map files, plus atomic writes.
//!
//! Color images are binary PPM (8-bit), masks and ID maps are binary 16-bit
//! PGM. Masks store 0 / 65535. Feature maps use a small container:
//!
//! ```text
//! magic b"GSFM", version u32 = 1, channels u32, height u32, width u32,
//! then channels planes of height×width f32, little-endian, row-major
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::maps::{ColorImage, Grid, IdMap, Mask};

pub const FEATURE_MAGIC: &[u8; 4] = b"GSFM";
pub const FEATURE_VERSION: u32 = 1;

/// Writes through a sibling temp file and renames it into place, so the
/// final path only ever holds a complete file.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(|e| Error::file(parent, e.to_string()))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::file(path, "not a file path"))?
        .to_string_lossy();
    let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        let f = w.into_inner().map_err(|e| e.into_error())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::file(path, e.to_string()));
    }
    Ok(())
}

fn encode_pnm(path: &Path, subtype: PnmSubtype, bytes: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    write_atomic(path, |f| {
        PnmEncoder::new(f)
            .with_subtype(subtype)
            .write_image(bytes, w as u32, h as u32, color)
            .map_err(std::io::Error::other)
    })
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ColorImage) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    encode_pnm(
        path.as_ref(),
        PnmSubtype::Pixmap(SampleEncoding::Binary),
        &bytes,
        img.width,
        img.height,
        ExtendedColorType::Rgb8,
    )
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ColorImage> {
    let path = path.as_ref();
    let rgb = decode_pnm(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb
        .pixels()
        .map(|p| p.0.map(|v| v as f64 / 255.0))
        .collect();
    Grid::from_vec(w, h, data)
}

pub fn write_pgm16(path: impl AsRef<Path>, map: &Grid<u16>) -> Result<()> {
    // The image crate only emits 16-bit gray as PAM, so the P5 header is written here.
    write_atomic(path.as_ref(), |w| {
        write!(w, "P5\n{} {}\n65535\n", map.width, map.height)?;
        for v in &map.data {
            w.write_all(&v.to_be_bytes())?;
        }
        Ok(())
    })
}

pub fn read_pgm16(path: impl AsRef<Path>) -> Result<Grid<u16>> {
    let path = path.as_ref();
    let img = decode_pnm(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
        other => {
            return Err(Error::file(
                path,
                format!("expected a grayscale PGM, found {:?}", other.color()),
            ))
        }
    };
    Grid::from_vec(w, h, data)
}

fn decode_pnm(path: &Path) -> Result<DynamicImage> {
    let file = File::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    let decoder = PnmDecoder::new(std::io::BufReader::new(file)).map_err(|e| Error::file(path, e.to_string()))?;
    DynamicImage::from_decoder(decoder).map_err(|e| Error::file(path, e.to_string()))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write_pgm16(path, &mask.map(|&b| if b { u16::MAX } else { 0 }))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(read_pgm16(path)?.map(|&v| v != 0))
}

pub fn write_id_map(path: impl AsRef<Path>, ids: &IdMap) -> Result<()> {
    let path = path.as_ref();
    if let Some(&big) = ids.data.iter().find(|&&id| id > u16::MAX as u32) {
        return Err(Error::file(path, format!("instance id {big} does not fit a 16-bit PGM")));
    }
    write_pgm16(path, &ids.map(|&v| v as u16))
}

pub fn read_id_map(path: impl AsRef<Path>) -> Result<IdMap> {
    Ok(read_pgm16(path)?.map(|&v| v as u32))
}

/// Feature planes, channel-major: `planes[c * h * w + y * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub planes: Vec<f32>,
}

pub fn encode_features(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * map.planes.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, map.channels as u32, map.height as u32, map.width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &map.planes {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMap> {
    let parse = |offset: usize, message: String| Error::Parse {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 20 {
        return Err(parse(bytes.len(), "truncated feature-map header".into()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(parse(0, "bad feature-map magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != FEATURE_VERSION {
        return Err(Error::Version {
            format: "feature map",
            found: word(0),
            supported: FEATURE_VERSION,
        });
    }
    let (channels, height, width) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = channels * height * width;
    if bytes.len() - 20 != 4 * n {
        return Err(parse(20, format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 20)));
    }
    let planes = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMap {
        channels,
        width,
        height,
        planes,
    })
}

pub fn write_features(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let bytes = encode_features(map);
    write_atomic(path.as_ref(), |f| f.write_all(&bytes))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    decode_features(&fs::read(path).map_err(|e| Error::file(path, e.to_string()))?)
}
