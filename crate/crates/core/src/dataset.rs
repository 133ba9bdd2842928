//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json
//! root/scenes/<scene_id>.png          RGB8 image
//! root/scenes/<scene_id>.labels.png   16-bit label map (0 = background, k = instance k)
//! root/scenes/<scene_id>.json         sidecar: scene_id, seed, labels
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mask::Mask;
use crate::scene::{generate_scene, SceneSpec, SyntheticScene};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub image: String,
    pub label_map: String,
    pub sidecar: String,
    pub k: usize,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Directory containing `manifest.json`; filled in on load.
    #[serde(skip)]
    pub root: PathBuf,
    pub format_version: u32,
    pub spec: SceneSpec,
    pub seed: u64,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    scene_id: String,
    seed: u64,
    labels: Vec<u32>,
}

impl DatasetManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::integrity(&path, e.to_string()))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        if self.format_version != FORMAT_VERSION {
            return Err(Error::integrity(
                &path,
                format!("unsupported format_version {}", self.format_version),
            ));
        }
        let mut seen = HashSet::new();
        for e in &self.scenes {
            if !seen.insert(e.scene_id.as_str()) {
                return Err(Error::integrity(
                    &path,
                    format!("duplicate scene_id {}", e.scene_id),
                ));
            }
            for rel in [&e.image, &e.label_map, &e.sidecar] {
                if !self.root.join(rel).is_file() {
                    return Err(Error::integrity(
                        &path,
                        format!("listed file {rel} is missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.iter().map(|e| e.scene_id.as_str())
    }

    pub fn entry(&self, scene_id: &str) -> Result<&ManifestEntry> {
        self.scenes
            .iter()
            .find(|e| e.scene_id == scene_id)
            .ok_or_else(|| Error::NotFound(format!("scene {scene_id} is not in the manifest")))
    }

    /// Load every scene in manifest order.
    pub fn load_all(&self) -> Result<Vec<SyntheticScene>> {
        self.scenes
            .iter()
            .map(|e| load_scene(self, &e.scene_id))
            .collect()
    }
}

/// Deletes the files it tracks unless disarmed.
struct Cleanup {
    files: Vec<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if self.armed {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
    }
}

fn write_file(cleanup: &mut Cleanup, path: PathBuf, bytes: &[u8]) -> Result<()> {
    cleanup.files.push(path.clone());
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn encode_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    Ok(buf.into_inner())
}

/// Render `count` scenes with seeds `seed..seed+count` into `root`.
///
/// Re-running with identical arguments reproduces identical files. On I/O
/// failure every file written by this call is removed.
pub fn render_dataset(
    count: usize,
    spec: &SceneSpec,
    root: impl AsRef<Path>,
    seed: u64,
) -> Result<DatasetManifest> {
    ensure!(count >= 1, "render_dataset needs count >= 1");
    spec.validate()?;
    let root = root.as_ref();
    let scenes_dir = root.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    let mut cleanup = Cleanup {
        files: Vec::new(),
        armed: true,
    };
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(seed + i as u64, spec)?;
        entries.push(write_scene(&mut cleanup, root, &scene)?);
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        seed,
        scenes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&mut cleanup, root.join(MANIFEST_FILE), json.as_bytes())?;
    cleanup.armed = false;
    Ok(manifest)
}

fn write_scene(
    cleanup: &mut Cleanup,
    root: &Path,
    scene: &SyntheticScene,
) -> Result<ManifestEntry> {
    let id = &scene.scene_id;
    let image_rel = format!("scenes/{id}.png");
    let labels_rel = format!("scenes/{id}.labels.png");
    let sidecar_rel = format!("scenes/{id}.json");

    let image_path = root.join(&image_rel);
    let bytes = encode_png(&image_path, &scene.image)?;
    write_file(cleanup, image_path, &bytes)?;

    let (h, w) = (scene.height() as u32, scene.width() as u32);
    let label_img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, scene.label_map()).expect("label map size");
    let labels_path = root.join(&labels_rel);
    let bytes = encode_png(&labels_path, &label_img)?;
    write_file(cleanup, labels_path, &bytes)?;

    let sidecar = Sidecar {
        scene_id: id.clone(),
        seed: scene.seed,
        labels: scene.labels.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_file(cleanup, root.join(&sidecar_rel), json.as_bytes())?;

    Ok(ManifestEntry {
        scene_id: id.clone(),
        image: image_rel,
        label_map: labels_rel,
        sidecar: sidecar_rel,
        k: scene.instance_count(),
        labels: scene.labels.clone(),
    })
}

pub fn load_scene(manifest: &DatasetManifest, scene_id: &str) -> Result<SyntheticScene> {
    let entry = manifest.entry(scene_id)?;
    let root = &manifest.root;

    let sidecar_path = root.join(&entry.sidecar);
    let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::integrity(&sidecar_path, e.to_string()))?;
    if sidecar.scene_id != entry.scene_id || sidecar.labels != entry.labels {
        return Err(Error::integrity(
            &sidecar_path,
            "sidecar disagrees with manifest",
        ));
    }

    let image_path = root.join(&entry.image);
    let image =
        image::open(&image_path).map_err(|e| Error::integrity(&image_path, e.to_string()))?;
    let image = match image {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::integrity(
                &image_path,
                format!("expected RGB8 image, found {:?}", other.color()),
            ))
        }
    };

    let labels_path = root.join(&entry.label_map);
    let label_img = match image::open(&labels_path)
        .map_err(|e| Error::integrity(&labels_path, e.to_string()))?
    {
        image::DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(Error::integrity(
                &labels_path,
                format!("expected 16-bit label map, found {:?}", other.color()),
            ))
        }
    };
    if label_img.dimensions() != image.dimensions() {
        return Err(Error::integrity(
            &labels_path,
            "label map size differs from image",
        ));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let k = entry.k;
    if sidecar.labels.len() != k {
        return Err(Error::integrity(
            &sidecar_path,
            "label count differs from k",
        ));
    }
    let mut masks = vec![Mask::empty(h, w); k];
    for (i, &v) in label_img.as_raw().iter().enumerate() {
        let v = v as usize;
        if v > k {
            return Err(Error::integrity(
                &labels_path,
                format!("label value {v} exceeds k = {k}"),
            ));
        }
        if v > 0 {
            masks[v - 1].data_mut()[i] = true;
        }
    }
    if masks.iter().any(Mask::is_empty) {
        return Err(Error::integrity(&labels_path, "an instance has no pixels"));
    }
    Ok(SyntheticScene {
        image,
        masks,
        labels: sidecar.labels,
        scene_id: sidecar.scene_id,
        seed: sidecar.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            image_size: 64,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn render_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = render_dataset(10, &small_spec(), dir.path(), 100).unwrap();
        assert_eq!(m.len(), 10);
        let ids: HashSet<_> = m.scene_ids().collect();
        assert_eq!(ids.len(), 10);
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        for (i, id) in m.scene_ids().enumerate() {
            let s = load_scene(&loaded, id).unwrap();
            assert_eq!(s, generate_scene(100 + i as u64, &small_spec()).unwrap());
        }
    }

    #[test]
    fn rerender_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        render_dataset(3, &small_spec(), a.path(), 5).unwrap();
        render_dataset(3, &small_spec(), b.path(), 5).unwrap();
        for rel in [
            "manifest.json",
            "scenes/scene-0000000006.png",
            "scenes/scene-0000000006.labels.png",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn zero_count_is_a_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            render_dataset(0, &small_spec(), dir.path(), 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn missing_and_corrupt_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let m = render_dataset(2, &small_spec(), dir.path(), 0).unwrap();
        assert!(matches!(load_scene(&m, "missing"), Err(Error::NotFound(_))));
        let id = m.scenes[0].scene_id.clone();
        let path = dir.path().join(&m.scenes[0].label_map);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_scene(&m, &id), Err(Error::Integrity { .. })));
    }

    #[test]
    fn io_failure_cleans_up_partial_output() {
        let dir = tempfile::tempdir().unwrap();
        // a directory squatting on the manifest path makes the final write fail
        fs::create_dir_all(dir.path().join(MANIFEST_FILE)).unwrap();
        let err = render_dataset(2, &small_spec(), dir.path(), 0).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        let left: Vec<_> = fs::read_dir(dir.path().join("scenes")).unwrap().collect();
        assert!(left.is_empty());
    }
}
