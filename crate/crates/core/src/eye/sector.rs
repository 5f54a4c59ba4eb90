//! Corneal sectorization by azimuth around the optical (+Z) axis.
//!
//! The left half spans 90° of azimuth centered on -X, the right half the
//! remaining 270°, so a uniform entry lands on the left a quarter of the time.
//! Each half is split into three equal angular bands, numbered 1 (upper, +Y)
//! to 3 (lower, -Y):
//!
//! | sector | azimuth (deg)  |
//! |--------|----------------|
//! | Left1  | [135, 165)     |
//! | Left2  | [165, 195)     |
//! | Left3  | [195, 225)     |
//! | Right1 | [45, 135)      |
//! | Right2 | [315, 45)      |
//! | Right3 | [225, 315)     |
//!
//! Quadrant boundaries (the diagonals) are decided with exact comparisons so
//! that a grid symmetric under 90° rotation splits exactly 1:3.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{TissueLabel, VoxelGrid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectorId {
    Left1,
    Left2,
    Left3,
    Right1,
    Right2,
    Right3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Half {
    Left,
    Right,
}

impl SectorId {
    pub const ALL: [SectorId; 6] = [
        SectorId::Left1,
        SectorId::Left2,
        SectorId::Left3,
        SectorId::Right1,
        SectorId::Right2,
        SectorId::Right3,
    ];

    pub fn half(self) -> Half {
        match self {
            SectorId::Left1 | SectorId::Left2 | SectorId::Left3 => Half::Left,
            _ => Half::Right,
        }
    }

    /// Azimuth range `[start, end)` in degrees; `end` may exceed 360.
    pub fn azimuth_range_deg(self) -> (f64, f64) {
        match self {
            SectorId::Left1 => (135.0, 165.0),
            SectorId::Left2 => (165.0, 195.0),
            SectorId::Left3 => (195.0, 225.0),
            SectorId::Right1 => (45.0, 135.0),
            SectorId::Right2 => (315.0, 405.0),
            SectorId::Right3 => (225.0, 315.0),
        }
    }

    pub fn center_azimuth_deg(self) -> f64 {
        let (a, b) = self.azimuth_range_deg();
        ((a + b) / 2.0) % 360.0
    }

    fn code(self) -> u8 {
        self as u8 + 1
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1..=6 => Some(Self::ALL[code as usize - 1]),
            _ => None,
        }
    }
}

impl Half {
    pub fn sectors(self) -> [SectorId; 3] {
        match self {
            Half::Left => [SectorId::Left1, SectorId::Left2, SectorId::Left3],
            Half::Right => [SectorId::Right1, SectorId::Right2, SectorId::Right3],
        }
    }
}

impl fmt::Display for SectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for SectorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sector {s:?}")))
    }
}

/// A single sector or a whole half, as used by adaptation metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SectorTarget {
    Half(Half),
    Sector(SectorId),
}

impl SectorTarget {
    /// Table row order: each half followed by its sub-sectors.
    pub const ROWS: [SectorTarget; 8] = [
        SectorTarget::Half(Half::Left),
        SectorTarget::Sector(SectorId::Left1),
        SectorTarget::Sector(SectorId::Left2),
        SectorTarget::Sector(SectorId::Left3),
        SectorTarget::Half(Half::Right),
        SectorTarget::Sector(SectorId::Right1),
        SectorTarget::Sector(SectorId::Right2),
        SectorTarget::Sector(SectorId::Right3),
    ];

    pub fn contains(self, sector: SectorId) -> bool {
        match self {
            SectorTarget::Half(h) => sector.half() == h,
            SectorTarget::Sector(s) => s == sector,
        }
    }
}

impl fmt::Display for SectorTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SectorTarget::Half(h) => h.fmt(f),
            SectorTarget::Sector(s) => s.fmt(f),
        }
    }
}

impl FromStr for SectorTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("left") {
            Ok(SectorTarget::Half(Half::Left))
        } else if s.eq_ignore_ascii_case("right") {
            Ok(SectorTarget::Half(Half::Right))
        } else {
            s.parse().map(SectorTarget::Sector)
        }
    }
}

/// Quadrant index: 0 = [-45°, 45°), 1 = [45°, 135°), 2 = [135°, 225°), 3 = [225°, 315°).
fn quadrant(x: f64, y: f64) -> u8 {
    let (mut u, mut v) = (x, y);
    for q in 0..4 {
        if u > 0.0 && -u <= v && v < u {
            return q;
        }
        // rotate by -90°, exact in floating point
        (u, v) = (v, -u);
    }
    0
}

/// Sector for a point at offset `(x, y)` from the optical axis.
pub fn sector_for_offset(x: f64, y: f64) -> SectorId {
    match quadrant(x, y) {
        0 => SectorId::Right2,
        1 => SectorId::Right1,
        3 => SectorId::Right3,
        _ => {
            let az = y.atan2(x).to_degrees().rem_euclid(360.0);
            if az < 165.0 {
                SectorId::Left1
            } else if az < 195.0 {
                SectorId::Left2
            } else {
                SectorId::Left3
            }
        }
    }
}

/// Per-voxel sector assignment for anterior cornea surface voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct SectorMap {
    dims: [usize; 3],
    codes: Vec<u8>,
    counts: [usize; 6],
}

impl SectorMap {
    /// Assigns sectors to cornea voxels that have an empty 6-neighbor lying
    /// farther from `surface_center` (the outward side of the corneal shell).
    pub fn from_grid(grid: &VoxelGrid, surface_center: nalgebra::Point3<f64>, axis_xy: (f64, f64)) -> Self {
        let dims = grid.dims();
        let mut codes = vec![0u8; grid.len()];
        let mut counts = [0usize; 6];
        for i in 0..grid.len() {
            if grid.pristine_label(i) != TissueLabel::Cornea {
                continue;
            }
            let c = grid.center(i);
            let r = (c - surface_center).norm();
            let [x, y, z] = grid.coords(i);
            let mut surface = false;
            for (dx, dy, dz) in [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] as i64 || ny >= dims[1] as i64 || nz >= dims[2] as i64 {
                    surface = true;
                    break;
                }
                let n = grid.index(nx as usize, ny as usize, nz as usize);
                if grid.pristine_label(n) == TissueLabel::Empty && (grid.center(n) - surface_center).norm() > r {
                    surface = true;
                    break;
                }
            }
            if surface {
                let s = sector_for_offset(c.x - axis_xy.0, c.y - axis_xy.1);
                codes[i] = s.code();
                counts[s as usize] += 1;
            }
        }
        Self { dims, codes, counts }
    }

    /// Rebuilds a map from raw per-voxel codes (0 = none, 1..=6 = sector).
    pub fn from_codes(dims: [usize; 3], codes: Vec<u8>) -> Result<Self> {
        if codes.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape("sector array length does not match dims".into()));
        }
        let mut counts = [0usize; 6];
        for &c in &codes {
            match SectorId::from_code(c) {
                Some(s) => counts[s as usize] += 1,
                None if c == 0 => {}
                None => return Err(Error::Format(format!("invalid sector code {c}"))),
            }
        }
        Ok(Self { dims, codes, counts })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn classify(&self, index: usize) -> Result<Option<SectorId>> {
        match self.codes.get(index) {
            Some(&c) => Ok(SectorId::from_code(c)),
            None => Err(Error::OutOfBounds { index, len: self.codes.len() }),
        }
    }

    pub fn count(&self, sector: SectorId) -> usize {
        self.counts[sector as usize]
    }

    pub fn half_count(&self, half: Half) -> usize {
        half.sectors().iter().map(|s| self.count(*s)).sum()
    }

    pub fn surface_count(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Indices of all sectorized surface voxels, in index order.
    pub fn surface_voxels(&self) -> impl Iterator<Item = (usize, SectorId)> + '_ {
        self.codes
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| SectorId::from_code(c).map(|s| (i, s)))
    }
}
