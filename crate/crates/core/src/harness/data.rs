use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::{gen_scene, read_bundle, write_bundle, SceneBundle, SceneSpec};

/// Index file of a scene set directory.
pub const SET_MANIFEST: &str = "scenes.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSetManifest {
    pub version: u32,
    pub count: usize,
    /// Scene `i` is generated with seed `base_seed + i`.
    pub base_seed: u64,
    pub spec: SceneSpec,
    /// Bundle directories relative to the set root.
    pub scenes: Vec<String>,
}

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Generates `count` scenes from `spec` with seeds `base_seed..` in parallel.
pub fn gen_scene_set(spec: &SceneSpec, count: usize, base_seed: u64) -> Result<Vec<SceneBundle>> {
    spec.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            gen_scene(&SceneSpec {
                seed: base_seed.wrapping_add(i as u64),
                ..spec.clone()
            })
        })
        .collect()
}

/// Writes bundles plus the set manifest under `out`.
pub fn write_scene_set(out: &Path, spec: &SceneSpec, base_seed: u64, bundles: &[SceneBundle]) -> Result<()> {
    fs::create_dir_all(out)?;
    let scenes: Vec<String> = (0..bundles.len()).map(scene_name).collect();
    for (name, b) in scenes.iter().zip(bundles) {
        write_bundle(&out.join(name), b)?;
    }
    let manifest = SceneSetManifest {
        version: 1,
        count: bundles.len(),
        base_seed,
        spec: spec.clone(),
        scenes,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join(SET_MANIFEST), text)?;
    Ok(())
}

/// Loads a scene set directory, or a single bundle directory, as named bundles.
pub fn load_scenes(path: &Path) -> Result<Vec<(String, SceneBundle)>> {
    let set = path.join(SET_MANIFEST);
    if set.is_file() {
        let manifest: SceneSetManifest = serde_json::from_str(&fs::read_to_string(&set)?)?;
        if manifest.scenes.len() != manifest.count {
            return Err(Error::Format(format!("{} lists {} scenes but count is {}", set.display(), manifest.scenes.len(), manifest.count)));
        }
        return manifest
            .scenes
            .into_par_iter()
            .map(|name| {
                let b = read_bundle(&path.join(&name)).map_err(|e| Error::Format(format!("{name}: {e}")))?;
                Ok((name, b))
            })
            .collect();
    }
    if path.join("manifest.json").is_file() {
        let name = path.file_name().map_or_else(|| "scene".to_string(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, read_bundle(path)?)]);
    }
    Err(Error::Format(format!("{} is neither a scene set nor a scene bundle", path.display())))
}
