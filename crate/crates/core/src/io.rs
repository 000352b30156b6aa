//! Dataset manifests, PNG image I/O, the checkpoint container, and CSV logs.
//!
//! A dataset is a JSON manifest next to 8-bit sRGB PNGs. Checkpoints are a
//! single binary container: an 8-byte magic, a little-endian header, then
//! every parameter tensor as 64-bit little-endian floats in the fixed order
//! of [`RadianceField::param_slices`] (per grid Yin then Yang, per component
//! density then appearance: v_r, v_theta, v_phi, m_theta_phi, m_phi_r,
//! m_r_theta row-major; then the channel basis, the MLP layers, and the
//! environment texels).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Mlp, RadianceField, DIR_ENCODING_LEN, MLP_HIDDEN};
use crate::geom::{CameraPose, GridConfig};
use crate::grid::{EnvironmentMap, FactorizedGrid};
use crate::img::Image;
use crate::train::TrainLog;

pub const MANIFEST_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SPHRADCP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    /// Image path relative to the manifest.
    pub image: String,
    /// Camera-to-world transform, 4x4 row-major.
    pub pose: Vec<f64>,
    pub split: Split,
}

/// On-disk dataset description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    /// Suggested scene bounding radius.
    pub r_max_hint: f64,
    pub frames: Vec<ManifestFrame>,
    /// Arbitrary provenance blob (the resolved config of the run that wrote
    /// this dataset).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub pose: CameraPose,
    pub image: Image,
    pub split: Split,
}

/// Fully loaded dataset: decoded linear images plus parsed poses.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub r_max_hint: f64,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn train_frame_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Train)
    }

    pub fn test_frame_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Test)
    }

    fn split_indices(&self, split: Split) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
        offset: 0,
    }
}

pub fn pose_from_matrix4(rows: &[f64], path: &Path) -> Result<CameraPose> {
    if rows.len() != 16 {
        return Err(load_error(path, format!("pose has {} entries, need 16", rows.len())));
    }
    for (i, expect) in [(12, 0.0), (13, 0.0), (14, 0.0), (15, 1.0)] {
        if (rows[i] - expect).abs() > 1e-9 {
            return Err(load_error(path, "pose bottom row is not [0,0,0,1]"));
        }
    }
    let rotation = Matrix3::new(
        rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10],
    );
    let translation = Vector3::new(rows[3], rows[7], rows[11]);
    CameraPose::new(rotation, translation)
        .map_err(|e| load_error(path, format!("invalid pose: {e}")))
}

pub fn pose_to_matrix4(pose: &CameraPose) -> Vec<f64> {
    let r = &pose.rotation;
    let t = &pose.translation;
    vec![
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        0.0, 0.0, 0.0, 1.0,
    ]
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, manifest)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file =
        File::open(path).map_err(|e| load_error(path, format!("cannot open manifest: {e}")))?;
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| load_error(path, format!("manifest parse: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(load_error(
            path,
            format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.version
            ),
        ));
    }
    Ok(manifest)
}

/// Load a dataset: parse the manifest, decode every PNG to linear RGB, and
/// validate poses. Frames load in parallel.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let frames: Vec<Frame> = manifest
        .frames
        .par_iter()
        .map(|mf| -> Result<Frame> {
            let img_path = dir.join(&mf.image);
            let image = load_png(&img_path)?;
            if image.width != manifest.width || image.height != manifest.height {
                return Err(load_error(
                    &img_path,
                    format!(
                        "image is {}x{}, manifest says {}x{}",
                        image.width, image.height, manifest.width, manifest.height
                    ),
                ));
            }
            let pose = pose_from_matrix4(&mf.pose, manifest_path)?;
            Ok(Frame {
                pose,
                image,
                split: mf.split,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        width: manifest.width,
        height: manifest.height,
        r_max_hint: manifest.r_max_hint,
        frames,
    })
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let buf = image.to_srgb8();
    let img = image::RgbImage::from_raw(image.width as u32, image.height as u32, buf)
        .expect("buffer sized from image");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| load_error(path, format!("png decode: {e}")))?
        .to_rgb8();
    Image::from_srgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

struct CountingWriter<W: Write> {
    inner: W,
    offset: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct CheckpointReader<R: Read> {
    inner: R,
    offset: u64,
    path: PathBuf,
}

impl<R: Read> CheckpointReader<R> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Load {
            path: self.path.clone(),
            reason: reason.into(),
            offset: self.offset,
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Load {
            path: self.path.clone(),
            reason: format!("truncated or unreadable: {e}"),
            offset: self.offset,
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn read_f64_slice(&mut self, out: &mut [f64]) -> Result<()> {
        let mut bytes = vec![0u8; out.len() * 8];
        self.read_exact(&mut bytes)?;
        for (x, chunk) in out.iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

/// Serialize the full field. Every parameter round-trips bit-exactly.
pub fn save_checkpoint(field: &RadianceField, path: &Path) -> Result<()> {
    let mut w = CountingWriter {
        inner: BufWriter::new(File::create(path)?),
        offset: 0,
    };
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = &field.grid.cfg;
    for v in [cfg.n_r as u64, cfg.n_theta as u64, cfg.n_phi as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&cfg.r0.to_le_bytes())?;
    w.write_all(&cfg.r_max.to_le_bytes())?;
    for v in [
        field.grid.n_density as u64,
        field.grid.n_appearance as u64,
        field.grid.channels as u64,
        field.mlp.in_dim() as u64,
        MLP_HIDDEN as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    match &field.env {
        Some(env) => {
            w.write_all(&[1u8])?;
            w.write_all(&(env.height as u64).to_le_bytes())?;
            w.write_all(&(env.width as u64).to_le_bytes())?;
        }
        None => w.write_all(&[0u8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0])?,
    }
    for slice in field.param_slices() {
        for &x in slice {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]. Corrupt or truncated
/// files fail with the offending byte offset.
pub fn load_checkpoint(path: &Path) -> Result<RadianceField> {
    let file = File::open(path).map_err(|e| load_error(path, format!("cannot open: {e}")))?;
    let mut r = CheckpointReader {
        inner: BufReader::new(file),
        offset: 0,
        path: path.to_path_buf(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(r.fail("bad magic; not a checkpoint file"));
    }
    let version = r.read_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n_r = r.read_u64()? as usize;
    let n_theta = r.read_u64()? as usize;
    let n_phi = r.read_u64()? as usize;
    let r0 = r.read_f64()?;
    let r_max = r.read_f64()?;
    let cfg = GridConfig::new(n_r, n_theta, n_phi, r0, r_max)
        .map_err(|e| r.fail(format!("invalid grid config: {e}")))?;
    let n_density = r.read_u64()? as usize;
    let n_appearance = r.read_u64()? as usize;
    let channels = r.read_u64()? as usize;
    let in_dim = r.read_u64()? as usize;
    let hidden = r.read_u64()? as usize;
    if hidden != MLP_HIDDEN {
        return Err(r.fail(format!("MLP hidden width {hidden} != {MLP_HIDDEN}")));
    }
    if in_dim != channels + DIR_ENCODING_LEN {
        return Err(r.fail(format!(
            "MLP input {in_dim} inconsistent with {channels} channels"
        )));
    }
    let mut env_flag = [0u8; 1];
    r.read_exact(&mut env_flag)?;
    let env = if env_flag[0] == 1 {
        let h = r.read_u64()? as usize;
        let w = r.read_u64()? as usize;
        if h == 0 || w == 0 || h * w > 100_000_000 {
            return Err(r.fail(format!("implausible environment map {h}x{w}")));
        }
        Some(EnvironmentMap::zeros(h, w))
    } else {
        let mut pad = [0u8; 16];
        r.read_exact(&mut pad)?;
        None
    };
    let mut field = RadianceField {
        grid: FactorizedGrid::zeros(cfg, n_density, n_appearance, channels),
        mlp: Mlp::zeros(in_dim),
        env,
    };
    for slice in field.param_slices_mut() {
        r.read_f64_slice(slice)?;
    }
    // Reject trailing garbage.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).map_err(Error::Io)? != 0 {
        return Err(r.fail("trailing bytes after parameters"));
    }
    if !field.all_finite() {
        return Err(r.fail("non-finite parameter"));
    }
    Ok(field)
}

/// Load a checkpoint and require its grid geometry to match `expected`.
pub fn load_checkpoint_matching(path: &Path, expected: &GridConfig) -> Result<RadianceField> {
    let field = load_checkpoint(path)?;
    let got = &field.grid.cfg;
    if got != expected {
        return Err(load_error(
            path,
            format!(
                "checkpoint grid {}x{}x{} (r0={}, r_max={}) does not match expected \
                 {}x{}x{} (r0={}, r_max={})",
                got.n_r, got.n_theta, got.n_phi, got.r0, got.r_max,
                expected.n_r, expected.n_theta, expected.n_phi, expected.r0, expected.r_max
            ),
        ));
    }
    Ok(field)
}

/// Metrics log: one row per logged step.
pub fn write_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "step,wall_ms,loss,batch_psnr")?;
    for row in &log.rows {
        writeln!(
            f,
            "{},{:.3},{:.17e},{:.6}",
            row.step, row.wall_ms, row.loss, row.batch_psnr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pose_matrix_round_trip_and_validation() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.2, -0.4, 1.1);
        let pose = CameraPose::new(*rot.matrix(), Vector3::new(1.0, -2.0, 0.5)).unwrap();
        let rows = pose_to_matrix4(&pose);
        let back = pose_from_matrix4(&rows, Path::new("x")).unwrap();
        assert!((back.rotation - pose.rotation).abs().max() < 1e-15);
        assert_eq!(back.translation, pose.translation);

        let mut bad = rows.clone();
        bad[0] += 0.01;
        assert!(pose_from_matrix4(&bad, Path::new("x")).is_err());
        let mut bad_bottom = rows;
        bad_bottom[12] = 0.5;
        assert!(pose_from_matrix4(&bad_bottom, Path::new("x")).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GridConfig::new(4, 4, 6, 0.5, 8.0).unwrap();
        let field = RadianceField::new(cfg, 2, 2, 3, Some((4, 8)), &mut rng);
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&field, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(field, loaded);

        // Env-less field round-trips too.
        let mut no_env = field.clone();
        no_env.env = None;
        save_checkpoint(&no_env, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), no_env);
    }

    #[test]
    fn checkpoint_truncation_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = GridConfig::new(4, 4, 6, 0.5, 8.0).unwrap();
        let field = RadianceField::new(cfg.clone(), 1, 1, 2, None, &mut rng);
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&field, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 13]).unwrap();
        match load_checkpoint(&cut) {
            Err(Error::Load { offset, .. }) => assert!(offset > 0),
            other => panic!("expected load error, got {other:?}"),
        }

        // Wrong magic.
        let mut junk = bytes.clone();
        junk[0] = b'X';
        std::fs::write(&cut, &junk).unwrap();
        assert!(load_checkpoint(&cut).is_err());

        // Grid mismatch rejection.
        let other_cfg = GridConfig::new(5, 4, 6, 0.5, 8.0).unwrap();
        assert!(load_checkpoint_matching(&path, &other_cfg).is_err());
        assert!(load_checkpoint_matching(&path, &cfg).is_ok());
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            width: 8,
            height: 4,
            r_max_hint: 10.0,
            frames: vec![],
            provenance: None,
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.frames.len(), 0);
        assert_eq!(ds.width, 8);
    }

    #[test]
    fn known_png_byte_decodes_to_srgb_linear() {
        // A PNG holding byte 128 must decode to the hand-computed sRGB
        // linearization ((128/255 + 0.055)/1.055)^2.4.
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 2);
        for y in 0..2 {
            for x in 0..4 {
                img.set_pixel(x, y, [crate::img::srgb_decode_u8(128); 3]);
            }
        }
        let p = dir.path().join("t.png");
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        let expect = ((128.0 / 255.0 + 0.055f64) / 1.055).powf(2.4);
        assert!((back.pixel(0, 0)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dataset_rejects_bad_pose_and_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(4, 2);
        save_png(&img, &dir.path().join("f0.png")).unwrap();
        let mut pose = pose_to_matrix4(&CameraPose::identity());
        pose[1] = 0.3; // break orthonormality
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            width: 4,
            height: 2,
            r_max_hint: 5.0,
            frames: vec![ManifestFrame {
                image: "f0.png".into(),
                pose,
                split: Split::Train,
            }],
            provenance: None,
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        assert!(load_dataset(&path).is_err());

        let manifest = DatasetManifest {
            frames: vec![ManifestFrame {
                image: "missing.png".into(),
                pose: pose_to_matrix4(&CameraPose::identity()),
                split: Split::Train,
            }],
            ..manifest
        };
        save_manifest(&manifest, &path).unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
