//! "GOCC" binary and JSON serialization of Gaussian sets.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{GaussianSet, SemanticGaussian};
use crate::binio;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GOCC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianSetDoc {
    version: u32,
    channel_width: usize,
    gaussians: Vec<SemanticGaussian>,
    queries: Vec<f64>,
}

pub fn write_gaussians_json(w: impl Write, set: &GaussianSet) -> Result<()> {
    let doc = GaussianSetDoc {
        version: VERSION,
        channel_width: set.channel_width,
        gaussians: set.gaussians.clone(),
        queries: set.queries.clone(),
    };
    serde_json::to_writer_pretty(w, &doc)?;
    Ok(())
}

pub fn read_gaussians_json(r: impl Read) -> Result<GaussianSet> {
    let doc: GaussianSetDoc = serde_json::from_reader(r)?;
    if doc.version != VERSION {
        return Err(Error::Format(format!("unsupported Gaussian set version {}", doc.version)));
    }
    GaussianSet::new(doc.gaussians, doc.queries, doc.channel_width)
}

/// Header `GOCC`, version, P, C, D, then per Gaussian
/// `mean[3] scale[3] rotation[4] opacity logits[C]`, then queries `P × D`, all f32.
pub fn write_gaussians_binary(w: &mut impl Write, set: &GaussianSet) -> Result<()> {
    let c = set.num_classes();
    binio::write_magic(w, MAGIC, VERSION)?;
    binio::write_u32(w, binio::to_u32(set.len(), "P")?)?;
    binio::write_u32(w, binio::to_u32(c, "C")?)?;
    binio::write_u32(w, binio::to_u32(set.channel_width, "D")?)?;
    for g in &set.gaussians {
        let rotation = stable_f32_quat(&g.rotation);
        let fields = g
            .mean
            .iter()
            .chain(&g.scale)
            .chain(&rotation)
            .chain(std::iter::once(&g.opacity))
            .chain(&g.logits)
            .copied();
        binio::write_f32s(w, fields)?;
    }
    binio::write_f32s(w, set.queries.iter().copied())
}

fn round_normalized(q: &[f64; 4]) -> [f64; 4] {
    let n = crate::geometry::quat_norm(q);
    q.map(|v| (v / n) as f32 as f64)
}

/// f32 quaternion that maps to itself under read-normalize-round, so that
/// rewriting a file that was just read reproduces it byte for byte.
fn stable_f32_quat(q: &[f64; 4]) -> [f64; 4] {
    let mut cur = round_normalized(q);
    for _ in 0..16 {
        let next = round_normalized(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Reads a "GOCC" file. Rotations are renormalized after the f32 round trip.
pub fn read_gaussians_binary(r: &mut impl Read) -> Result<GaussianSet> {
    binio::read_magic(r, MAGIC, VERSION)?;
    let p = binio::read_u32(r)? as usize;
    let c = binio::read_u32(r)? as usize;
    let d = binio::read_u32(r)? as usize;
    let stride = 11 + c;
    let body = binio::read_f32s(r, p * stride)?;
    let queries = binio::read_f32s(r, p * d)?;
    binio::expect_eof(r)?;
    let gaussians = body
        .chunks_exact(stride)
        .map(|f| {
            let q = [f[6], f[7], f[8], f[9]];
            let n = crate::geometry::quat_norm(&q);
            SemanticGaussian {
                mean: [f[0], f[1], f[2]],
                scale: [f[3], f[4], f[5]],
                rotation: [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
                opacity: f[10],
                logits: f[11..].to_vec(),
            }
        })
        .collect();
    GaussianSet::new(gaussians, queries, d)
}
