//! Scene bundle directories: `manifest.json`, `gt.gvox`, `points.bin` and
//! one `GFMP` file per feature-map level under `features/`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PlacedObject, SceneBundle, SceneSpec};
use crate::binio;
use crate::diff::Tensor;
use crate::encoder::{FeaturePyramid, SensorModel};
use crate::error::{Error, Result};
use crate::refine::Modality;
use crate::splat::{read_grid, write_grid, GridFile};

const POINTS_MAGIC: &[u8; 4] = b"GPTS";
const MAP_MAGIC: &[u8; 4] = b"GFMP";
const VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorEntry {
    pub sensor: SensorModel,
    /// Feature map files, finest level first, relative to the bundle root.
    pub levels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub version: u32,
    pub spec: SceneSpec,
    pub objects: Vec<PlacedObject>,
    pub rig: Vec<SensorModel>,
    pub point_count: usize,
    pub sensors: BTreeMap<Modality, Vec<SensorEntry>>,
}

fn write_points(w: &mut impl Write, points: &[[f64; 3]], classes: &[u16]) -> Result<()> {
    binio::write_magic(w, POINTS_MAGIC, VERSION)?;
    binio::write_u32(w, binio::to_u32(points.len(), "point count")?)?;
    binio::write_f32s(w, points.iter().flatten().copied())?;
    binio::write_u16s(w, classes)
}

fn read_points(r: &mut impl Read) -> Result<(Vec<[f64; 3]>, Vec<u16>)> {
    binio::read_magic(r, POINTS_MAGIC, VERSION)?;
    let n = binio::read_u32(r)? as usize;
    let flat = binio::read_f32s(r, 3 * n)?;
    let classes = binio::read_u16s(r, n)?;
    binio::expect_eof(r)?;
    Ok((flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(), classes))
}

/// Header `GFMP`, version, `C`, `H`, `W` as u32, then `C·H·W` f32 values.
pub fn write_feature_map(w: &mut impl Write, t: &Tensor) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::shape("write_feature_map", format!("expected C×H×W, got {:?}", t.shape())));
    }
    binio::write_magic(w, MAP_MAGIC, VERSION)?;
    for &d in t.shape() {
        binio::write_u32(w, binio::to_u32(d, "feature map dim")?)?;
    }
    binio::write_f32s(w, t.data().iter().copied())
}

pub fn read_feature_map(r: &mut impl Read) -> Result<Tensor> {
    binio::read_magic(r, MAP_MAGIC, VERSION)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = binio::read_u32(r)? as usize;
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.filter(|&n| n <= 1 << 31).ok_or_else(|| Error::Format(format!("feature map dims {dims:?} too large")))?;
    let data = binio::read_f32s(r, n)?;
    binio::expect_eof(r)?;
    Tensor::new(dims.to_vec(), data)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_bundle(dir: &Path, bundle: &SceneBundle) -> Result<()> {
    fs::create_dir_all(dir.join("features"))?;
    let mut sensors = BTreeMap::new();
    for (m, pyramids) in &bundle.pyramids {
        let mut entries = Vec::new();
        for (i, p) in pyramids.iter().enumerate() {
            let mut levels = Vec::new();
            for (l, t) in p.levels.iter().enumerate() {
                let rel = format!("features/{m}_{i}_l{l}.gfmp");
                let mut w = create(&dir.join(&rel))?;
                write_feature_map(&mut w, t)?;
                w.flush()?;
                levels.push(rel);
            }
            entries.push(SensorEntry {
                sensor: p.sensor.clone(),
                levels,
            });
        }
        sensors.insert(*m, entries);
    }
    let manifest = BundleManifest {
        version: MANIFEST_VERSION,
        spec: bundle.spec.clone(),
        objects: bundle.objects.clone(),
        rig: bundle.rig.clone(),
        point_count: bundle.points.len(),
        sensors,
    };
    let mut w = create(&dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut w = create(&dir.join("gt.gvox"))?;
    write_grid(&mut w, &GridFile::labels(&bundle.gt))?;
    w.flush()?;
    let mut w = create(&dir.join("points.bin"))?;
    write_points(&mut w, &bundle.points, &bundle.point_classes)?;
    w.flush()?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<SceneBundle> {
    let manifest: BundleManifest = serde_json::from_reader(open(&dir.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported bundle version {}", manifest.version)));
    }
    let spec = manifest.spec;
    spec.validate()?;
    let file = read_grid(&mut open(&dir.join("gt.gvox"))?)?;
    let g = &spec.grid;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs());
    if file.spec.dims != g.dims
        || !close(file.spec.voxel_size, g.voxel_size)
        || !(0..3).all(|a| close(file.spec.min_corner[a], g.min_corner[a]))
    {
        return Err(Error::Format("gt.gvox grid disagrees with the manifest".into()));
    }
    let gt = GridFile {
        spec: spec.grid,
        payload: file.payload,
    }
    .into_label_grid(spec.num_classes)?;
    let (points, point_classes) = read_points(&mut open(&dir.join("points.bin"))?)?;
    if points.len() != manifest.point_count {
        return Err(Error::Format(format!(
            "points.bin holds {} points, manifest says {}",
            points.len(),
            manifest.point_count
        )));
    }
    let mut pyramids = BTreeMap::new();
    for (m, entries) in manifest.sensors {
        let mut list = Vec::new();
        for e in entries {
            if e.levels.is_empty() {
                return Err(Error::Format(format!("{m} sensor lists no feature maps")));
            }
            let levels = e
                .levels
                .iter()
                .map(|rel| {
                    let rel_path = Path::new(rel);
                    if rel_path.is_absolute() || rel_path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                        return Err(Error::Format(format!("feature map path {rel} escapes the bundle")));
                    }
                    read_feature_map(&mut open(&dir.join(rel_path))?)
                })
                .collect::<Result<Vec<_>>>()?;
            list.push(FeaturePyramid::new(e.sensor, levels)?);
        }
        pyramids.insert(m, list);
    }
    Ok(SceneBundle {
        spec,
        gt,
        objects: manifest.objects,
        points,
        point_classes,
        rig: manifest.rig,
        pyramids,
    })
}
