//! Dense scalar volumes and their on-disk format.
//!
//! File layout (all integers and floats little-endian):
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 8     | magic `VOXDETV1`                         |
//! | 3×4   | shape (x, y, z) as `u32`                 |
//! | 3×8   | voxel spacing in mm as `f64`             |
//! | 8     | generator seed as `u64`                  |
//! | 4×N   | intensities as `f32`, x fastest, z slowest |

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::Shape3;

pub const MAGIC: &[u8; 8] = b"VOXDETV1";

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub seed: u64,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn filled(shape: Shape3, spacing: [f64; 3], seed: u64, value: f32) -> Self {
        Self {
            shape,
            spacing,
            seed,
            data: vec![value; shape.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for s in self.shape {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for s in self.spacing {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        let mut body = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut shape = [0usize; 3];
        for s in &mut shape {
            r.read_exact(&mut b4).map_err(fmt)?;
            *s = u32::from_le_bytes(b4) as usize;
        }
        let mut spacing = [0.0; 3];
        for s in &mut spacing {
            r.read_exact(&mut b8).map_err(fmt)?;
            *s = f64::from_le_bytes(b8);
        }
        r.read_exact(&mut b8).map_err(fmt)?;
        let seed = u64::from_le_bytes(b8);
        let n: usize = shape.iter().product();
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(fmt)?;
        if body.len() != 4 * n {
            return Err(Error::Format(format!(
                "expected {} intensity bytes for shape {shape:?}, found {}",
                4 * n,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            shape,
            spacing,
            seed,
            data,
        })
    }
}
