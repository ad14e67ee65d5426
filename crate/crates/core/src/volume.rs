//! Real-valued 3D volumes and the self-describing `AOSV1` container.
//!
//! Container layout: one line of JSON header
//! `{"magic":"AOSV1","dtype":"f32le","shape":[..],"voxel_um":[dz,dy,dx],"meta":{..}}`,
//! a single `\n`, then `product(shape)` little-endian `f32` values in
//! row-major order.

use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::Real;

pub const MAGIC: &str = "AOSV1";
pub const DTYPE: &str = "f32le";

/// A 3D intensity grid `(z, y, x)` with its voxel size in µm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f64> {
    pub data: Array3<T>,
    /// `[dz, dy, dx]` in µm.
    pub voxel_um: [f64; 3],
}

impl<T: Real> Volume<T> {
    pub fn new(data: Array3<T>, voxel_um: [f64; 3]) -> Self {
        Self { data, voxel_um }
    }

    pub fn zeros(shape: [usize; 3], voxel_um: [f64; 3]) -> Self {
        Self::new(Array3::zeros(shape), voxel_um)
    }

    pub fn shape(&self) -> [usize; 3] {
        let (a, b, c) = self.data.dim();
        [a, b, c]
    }

    /// Sum accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume::new(self.data.mapv(|v| U::of(v.to_f64_lossy())), self.voxel_um)
    }

    pub fn to_container(&self, meta: Map<String, Value>) -> Container {
        Container {
            header: ContainerHeader::new(self.shape().to_vec(), self.voxel_um, meta),
            data: self.data.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }
}

impl Volume<f64> {
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.shape.len() != 3 {
            return Err(Error::Format(format!(
                "expected a 3D volume, got shape {:?}",
                c.header.shape
            )));
        }
        let s = &c.header.shape;
        let data = Array3::from_shape_vec((s[0], s[1], s[2]), c.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Volume::new(data, c.header.voxel_um))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn write(&self, path: &Path, meta: Map<String, Value>) -> Result<()> {
        self.to_container(meta).write(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub magic: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub voxel_um: [f64; 3],
    #[serde(default)]
    pub meta: Map<String, Value>,
}

impl ContainerHeader {
    pub fn new(shape: Vec<usize>, voxel_um: [f64; 3], meta: Map<String, Value>) -> Self {
        Self {
            magic: MAGIC.to_string(),
            dtype: DTYPE.to_string(),
            shape,
            voxel_um,
            meta,
        }
    }
}

/// Raw container: header plus `f32` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub data: Vec<f32>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let expected: usize = self.header.shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "payload has {} values, shape {:?} needs {}",
                self.data.len(),
                self.header.shape,
                expected
            )));
        }
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header terminator".into()))?;
        let header: ContainerHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", header.magic)));
        }
        if header.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
        }
        let payload = &bytes[nl + 1..];
        let n: usize = header.shape.iter().product();
        if payload.len() != n * 4 {
            return Err(Error::Format(format!(
                "payload is {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { header, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn to_array(&self) -> Result<ArrayD<f32>> {
        ArrayD::from_shape_vec(IxDyn(&self.header.shape), self.data.clone())
            .map_err(|e| Error::Format(e.to_string()))
    }
}
