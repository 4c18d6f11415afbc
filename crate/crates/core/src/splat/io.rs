//! "GVOX" voxel grid files.

use std::io::{Read, Write};

use crate::binio;
use crate::error::{Error, Result};
use crate::model::{GridSpec, SemanticGrid};

const MAGIC: &[u8; 4] = b"GVOX";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum GridPayload {
    Labels(Vec<u16>),
    Occupancy(Vec<f64>),
    OccupancyClassProbs {
        occupancy: Vec<f64>,
        class_probs: Vec<f64>,
        num_classes: usize,
    },
}

impl GridPayload {
    fn kind(&self) -> u8 {
        match self {
            GridPayload::Labels(_) => 0,
            GridPayload::Occupancy(_) => 1,
            GridPayload::OccupancyClassProbs { .. } => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub spec: GridSpec,
    pub payload: GridPayload,
}

impl GridFile {
    pub fn labels(grid: &SemanticGrid) -> Self {
        Self {
            spec: grid.spec,
            payload: GridPayload::Labels(grid.labels.clone()),
        }
    }

    /// Rebuilds a grid from a label payload.
    pub fn into_label_grid(self, num_classes: usize) -> Result<SemanticGrid> {
        match self.payload {
            GridPayload::Labels(l) => SemanticGrid::from_labels(self.spec, num_classes, l),
            _ => Err(Error::Format("grid file does not hold labels".into())),
        }
    }
}

/// Writes header `GVOX`, version, dims, f32 min corner, f32 voxel size, payload
/// kind, then the payload with x varying fastest. Kind 2 stores all occupancy
/// values followed by the `N × C` class probabilities.
pub fn write_grid(w: &mut impl Write, file: &GridFile) -> Result<()> {
    let spec = &file.spec;
    let n = spec.num_voxels();
    binio::write_magic(w, MAGIC, VERSION)?;
    for d in spec.dims {
        binio::write_u32(w, binio::to_u32(d, "dim")?)?;
    }
    binio::write_f32s(w, spec.min_corner.iter().copied())?;
    binio::write_f32s(w, std::iter::once(spec.voxel_size))?;
    binio::write_u8(w, file.payload.kind())?;
    let bad = || Error::Format("payload size does not match grid dims".into());
    match &file.payload {
        GridPayload::Labels(l) => {
            if l.len() != n {
                return Err(bad());
            }
            binio::write_u16s(w, l)
        }
        GridPayload::Occupancy(o) => {
            if o.len() != n {
                return Err(bad());
            }
            binio::write_f32s(w, o.iter().copied())
        }
        GridPayload::OccupancyClassProbs {
            occupancy,
            class_probs,
            num_classes,
        } => {
            if occupancy.len() != n || class_probs.len() != n * num_classes || *num_classes == 0 {
                return Err(bad());
            }
            binio::write_f32s(w, occupancy.iter().copied())?;
            binio::write_f32s(w, class_probs.iter().copied())
        }
    }
}

pub fn read_grid(r: &mut impl Read) -> Result<GridFile> {
    binio::read_magic(r, MAGIC, VERSION)?;
    let dims = [binio::read_u32(r)? as usize, binio::read_u32(r)? as usize, binio::read_u32(r)? as usize];
    let corner = binio::read_f32s(r, 3)?;
    let size = binio::read_f32s(r, 1)?[0];
    let spec = GridSpec::new([corner[0], corner[1], corner[2]], size, dims).map_err(|e| Error::Format(e.to_string()))?;
    let n = spec.num_voxels();
    let kind = binio::read_u8(r)?;
    let payload = match kind {
        0 => GridPayload::Labels(binio::read_u16s(r, n)?),
        1 => GridPayload::Occupancy(binio::read_f32s(r, n)?),
        2 => {
            let occupancy = binio::read_f32s(r, n)?;
            let mut rest = Vec::new();
            r.read_to_end(&mut rest)?;
            if rest.len() % (4 * n) != 0 || rest.is_empty() {
                return Err(Error::Format("class probability payload is not a whole number of classes".into()));
            }
            let num_classes = rest.len() / (4 * n);
            let class_probs = binio::read_f32s(&mut rest.as_slice(), n * num_classes)?;
            GridPayload::OccupancyClassProbs {
                occupancy,
                class_probs,
                num_classes,
            }
        }
        k => return Err(Error::Format(format!("unknown grid payload kind {k}"))),
    };
    binio::expect_eof(r)?;
    Ok(GridFile { spec, payload })
}
