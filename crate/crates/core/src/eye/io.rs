//! Binary eye container.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"KRTMEYE\0"
//! 8       4     version (u32) = 1
//! 12      12    dims   (3 × u32, x y z)
//! 24      8     voxel_size (f64, mm)
//! 32      24    origin (3 × f64, mm)
//! 56      1     fidelity (0 = low poly, 1 = high poly)
//! 57      8     seed (u64)
//! 65      N     labels  (u8 per voxel, x fastest)
//! 65+N    N     sectors (u8 per voxel, 0 = none, 1..6 = Left1..Right3)
//! ```
//!
//! Removal state is not stored; a loaded grid is pristine.

use std::io::{Read, Write};

use nalgebra::Point3;

use super::{Fidelity, SectorMap, TissueLabel, VoxelGrid};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KRTMEYE\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 65;

/// Header fields of a stored eye build.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeHeader {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Point3<f64>,
    pub fidelity: Fidelity,
    pub seed: u64,
}

pub fn write_eye(
    mut w: impl Write,
    grid: &VoxelGrid,
    sectors: &SectorMap,
    fidelity: Fidelity,
    seed: u64,
) -> Result<()> {
    if sectors.dims() != grid.dims() {
        return Err(Error::Shape("sector map does not match grid dims".into()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 2 * grid.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in grid.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&grid.voxel_size().to_le_bytes());
    let o = grid.origin();
    for v in [o.x, o.y, o.z] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(match fidelity {
        Fidelity::LowPoly => 0,
        Fidelity::HighPoly => 1,
    });
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend((0..grid.len()).map(|i| grid.pristine_label(i) as u8));
    buf.extend_from_slice(sectors.codes());
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_eye(mut r: impl Read) -> Result<(EyeHeader, VoxelGrid, SectorMap)> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)?;
    if &head[0..8] != MAGIC {
        return Err(Error::Format("not an eye container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported eye container version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap());
    let dims = [u32_at(12), u32_at(16), u32_at(20)];
    let voxel_size = f64_at(24);
    let origin = Point3::new(f64_at(32), f64_at(40), f64_at(48));
    let fidelity = match head[56] {
        0 => Fidelity::LowPoly,
        1 => Fidelity::HighPoly,
        b => return Err(Error::Format(format!("unknown fidelity byte {b}"))),
    };
    let seed = u64::from_le_bytes(head[57..65].try_into().unwrap());
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)?;
    let labels = raw
        .iter()
        .map(|&b| TissueLabel::from_u8(b).ok_or_else(|| Error::Format(format!("invalid label byte {b}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut codes = vec![0u8; n];
    r.read_exact(&mut codes)?;
    let grid = VoxelGrid::from_labels(dims, voxel_size, origin, labels)?;
    let sectors = SectorMap::from_codes(dims, codes)?;
    let header = EyeHeader { dims, voxel_size, origin, fidelity, seed };
    Ok((header, grid, sectors))
}

pub fn save_eye(
    path: impl AsRef<std::path::Path>,
    grid: &VoxelGrid,
    sectors: &SectorMap,
    fidelity: Fidelity,
    seed: u64,
) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_eye(&mut w, grid, sectors, fidelity, seed)?;
    w.flush()?;
    Ok(())
}

pub fn load_eye(path: impl AsRef<std::path::Path>) -> Result<(EyeHeader, VoxelGrid, SectorMap)> {
    let f = std::fs::File::open(path)?;
    read_eye(std::io::BufReader::new(f))
}
