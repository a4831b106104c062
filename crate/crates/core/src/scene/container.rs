//! Binary cloud container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      b"GSDF"
//! version    u32            (1: geometry only, 2: adds the change head block)
//! count      u64
//! gaussians  count × { position f64×3, scale f64×3, rotation f64×4 (w,x,y,z),
//!                      opacity f64, color f64×3, instance_id u32, encoding f64×16 }
//! before     count × { d_position f64×3, d_rotation f64×4, d_scale f64×3 }
//! after      count × (same as before)
//! partition  count × u8     (0 unchanged, 1 changed, 2 unassigned)
//! head       u8 flag; if 1: weights f64×32 (row-major 2×16), bias f64×2   [version 2]
//! ```
//!
//! Files whose first bytes are not the magic are parsed as the JSON variant,
//! which uses the serde field names of [`GaussianCloud`].

use std::io::Write;
use std::path::Path;

use super::{DeformationDelta, DeltaTables, Gaussian, GaussianCloud, PartitionLabel, ENCODING_DIM};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::math::Quat;
use crate::partition::ChangeHead;

pub const CLOUD_MAGIC: &[u8; 4] = b"GSDF";
pub const CLOUD_VERSION: u32 = 2;

const GAUSSIAN_RECORD: u64 = 8 * (3 + 3 + 4 + 1 + 3) + 4 + 8 * ENCODING_DIM as u64;
const DELTA_RECORD: u64 = 8 * (3 + 4 + 3);

pub fn write_cloud(cloud: &GaussianCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let n = cloud.len();
    let mut out = Vec::with_capacity(16 + n * (GAUSSIAN_RECORD + 2 * DELTA_RECORD + 1) as usize + 300);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let put = |out: &mut Vec<u8>, vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for g in &cloud.gaussians {
        put(&mut out, &g.position);
        put(&mut out, &g.scale);
        put(&mut out, &g.rotation.to_array());
        put(&mut out, &[g.opacity]);
        put(&mut out, &g.color);
        out.extend_from_slice(&g.instance_id.to_le_bytes());
        put(&mut out, &g.class_encoding);
    }
    for table in [&cloud.deltas.before, &cloud.deltas.after] {
        for d in table {
            put(&mut out, &d.d_position);
            put(&mut out, &d.d_rotation.to_array());
            put(&mut out, &d.d_scale);
        }
    }
    out.extend(cloud.partition.iter().map(|p| p.to_u8()));
    match &cloud.head {
        None => out.push(0),
        Some(head) => {
            out.push(1);
            for row in &head.weights {
                put(&mut out, row);
            }
            put(&mut out, &head.bias);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s<const N: usize>(&mut self, what: &str) -> Result<[f64; N]> {
        let bytes = self.take(8 * N, what)?;
        Ok(std::array::from_fn(|k| {
            f64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap())
        }))
    }
}

pub fn read_cloud(bytes: &[u8]) -> Result<GaussianCloud> {
    if !bytes.starts_with(CLOUD_MAGIC) {
        if bytes.len() < 4 {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                message: "truncated magic".into(),
            });
        }
        return read_json(bytes);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version == 0 || version > CLOUD_VERSION {
        return Err(Error::Version {
            format: "cloud container",
            found: version,
            supported: CLOUD_VERSION,
        });
    }
    let count_offset = r.pos;
    let count = r.u64("gaussian count")?;
    let per = GAUSSIAN_RECORD + 2 * DELTA_RECORD + 1;
    let remaining = (bytes.len() - r.pos) as u64;
    if count.checked_mul(per).is_none_or(|need| need > remaining) {
        return Err(Error::Parse {
            offset: count_offset as u64,
            message: format!("gaussian count {count} exceeds the {remaining} bytes that follow"),
        });
    }
    let n = count as usize;

    let mut gaussians = Vec::with_capacity(n);
    for _ in 0..n {
        let position = r.f64s::<3>("position")?;
        let scale = r.f64s::<3>("scale")?;
        let rotation = Quat::from(r.f64s::<4>("rotation")?);
        let [opacity] = r.f64s::<1>("opacity")?;
        let color = r.f64s::<3>("color")?;
        let instance_id = r.u32("instance id")?;
        let class_encoding = r.f64s::<ENCODING_DIM>("class encoding")?;
        gaussians.push(Gaussian {
            position,
            scale,
            rotation,
            opacity,
            color,
            instance_id,
            class_encoding,
        });
    }
    let mut tables = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            table.push(DeformationDelta {
                d_position: r.f64s::<3>("delta position")?,
                d_rotation: Quat::from(r.f64s::<4>("delta rotation")?),
                d_scale: r.f64s::<3>("delta scale")?,
            });
        }
        tables.push(table);
    }
    let after = tables.pop().unwrap();
    let before = tables.pop().unwrap();
    let mut partition = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.u8("partition label")?;
        match PartitionLabel::from_u8(v) {
            Some(p) => partition.push(p),
            None => {
                r.pos -= 1;
                return r.fail(format!("invalid partition label {v}"));
            }
        }
    }
    let head = if version >= 2 {
        match r.u8("head flag")? {
            0 => None,
            1 => {
                let w0 = r.f64s::<ENCODING_DIM>("head weights")?;
                let w1 = r.f64s::<ENCODING_DIM>("head weights")?;
                let bias = r.f64s::<2>("head bias")?;
                Some(ChangeHead {
                    weights: [w0, w1],
                    bias,
                })
            }
            v => {
                r.pos -= 1;
                return r.fail(format!("invalid head flag {v}"));
            }
        }
    } else {
        None
    };
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let cloud = GaussianCloud {
        gaussians,
        deltas: DeltaTables { before, after },
        partition,
        head,
    };
    cloud.validate()?;
    Ok(cloud)
}

fn read_json(bytes: &[u8]) -> Result<GaussianCloud> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to() as u64,
        message: "neither a GSDF container nor UTF-8 JSON".into(),
    })?;
    let cloud: GaussianCloud = serde_json::from_str(text).map_err(|e| {
        // serde_json reports line/column; convert to a byte offset.
        let offset = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::Parse {
            offset: offset as u64,
            message: format!("invalid JSON cloud: {e}"),
        }
    })?;
    cloud.validate()?;
    Ok(cloud)
}

pub fn save_cloud(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_cloud(cloud)?;
    write_atomic(path.as_ref(), |f| f.write_all(&bytes))
}

pub fn save_cloud_json(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    cloud.validate()?;
    let text = serde_json::to_string_pretty(cloud)?;
    write_atomic(path.as_ref(), |f| f.write_all(text.as_bytes()))
}

pub fn load_cloud(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
    read_cloud(&bytes)
}
