//! Synthetic desk-scale dataset: posed bodies rendered to small
//! silhouette/depth/shading images with ground-truth labels, plus a
//! checksummed binary container so corrupt or truncated files fail loudly
//! instead of training on garbage.

use crate::body_model::{asset_hash, forward, project, BodyModelAsset, BodyParams};
use crate::camera::CameraConfig;
use crate::config::DatasetConfig;
use crate::mat::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"FPDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    Magic,
    #[error("unsupported dataset format version {0}")]
    Version(u32),
    #[error("manifest parse: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset truncated in record {0}")]
    Truncated(usize),
    #[error("checksum mismatch in record {0}")]
    Checksum(usize),
    #[error("manifest inconsistent: {0}")]
    Inconsistent(String),
}

/// Ground-truth labels available only on the 3d-supervised slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Gt3d {
    pub joints3d: Mat<f64>,
    pub pose_theta: Vec<f64>,
    pub shape_beta: Vec<f64>,
}

/// One training example: a rendered view of a posed body with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    /// (3, S*S): hard silhouette, normalized depth, flat shading.
    pub image: Mat<f64>,
    /// (N_j, 2) ground-truth keypoints in the image frame.
    pub keypoints2d: Mat<f64>,
    /// Present on 3d-supervised examples only.
    pub gt3d: Option<Gt3d>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_examples: usize,
    pub image_size: usize,
    pub n_joints: usize,
    pub n_shape: usize,
    /// Exact count of 3d-labeled records (they come first).
    pub count_3d: usize,
    /// Hash of the body asset the labels were generated from.
    pub asset_hash: String,
    pub camera: CameraConfig,
    pub pose_spread: f64,
    pub shape_spread: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub examples: Vec<LabeledExample>,
}

/// Directional light for the shading channel.
const LIGHT: [f64; 3] = [0.35, 0.45, 0.82];
/// Depth channel normalization range (covers the scene bounding sphere).
const DEPTH_RANGE: f64 = 1.2;

/// Render a mesh through the weak-perspective camera into a (3, size*size)
/// image: channel 0 hard silhouette, channel 1 depth normalized to [0,1]
/// (nearer is larger), channel 2 double-sided flat shading. Hidden surfaces
/// resolve through a z-buffer (the camera looks down -z).
pub fn render_shaded_image(
    vertices: &Mat<f64>,
    faces: &[[u32; 3]],
    camera_pi: [f64; 3],
    size: usize,
) -> Mat<f64> {
    assert_eq!(vertices.cols, 3);
    let (s, tx, ty) = (camera_pi[0], camera_pi[1], camera_pi[2]);
    let resf = size as f64;
    let ln = (LIGHT[0] * LIGHT[0] + LIGHT[1] * LIGHT[1] + LIGHT[2] * LIGHT[2]).sqrt();
    let light = [LIGHT[0] / ln, LIGHT[1] / ln, LIGHT[2] / ln];
    let mut image = Mat::zeros(3, size * size);
    let mut zbuf = vec![f64::NEG_INFINITY; size * size];
    for f in faces {
        let p: Vec<[f64; 3]> = f
            .iter()
            .map(|&vi| {
                let vi = vi as usize;
                [vertices.at(vi, 0), vertices.at(vi, 1), vertices.at(vi, 2)]
            })
            .collect();
        // Image-plane coordinates.
        let q: Vec<[f64; 2]> = p.iter().map(|v| [s * v[0] + tx, s * v[1] + ty]).collect();
        let area2 = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[2][0] - q[0][0]) * (q[1][1] - q[0][1]);
        if area2.abs() < 1e-14 {
            continue;
        }
        let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
        let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
        let mut n = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if nn < 1e-14 {
            continue;
        }
        n = [n[0] / nn, n[1] / nn, n[2] / nn];
        let shade = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).abs();

        let to_col = |x: f64| (x + 1.0) * 0.5 * resf - 0.5;
        let to_row = |y: f64| (1.0 - y) * 0.5 * resf - 0.5;
        let cs: Vec<f64> = q.iter().map(|v| to_col(v[0])).collect();
        let rs: Vec<f64> = q.iter().map(|v| to_row(v[1])).collect();
        let c0 = cs.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let c1 = cs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().min(resf - 1.0) as usize;
        let r0 = rs.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let r1 = rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().min(resf - 1.0) as usize;
        if c0 > c1 || r0 > r1 {
            continue;
        }
        let sign = area2.signum();
        for i in r0..=r1 {
            for j in c0..=c1 {
                let px = (j as f64 + 0.5) / resf * 2.0 - 1.0;
                let py = 1.0 - (i as f64 + 0.5) / resf * 2.0;
                let w0 = (q[2][0] - q[1][0]) * (py - q[1][1]) - (px - q[1][0]) * (q[2][1] - q[1][1]);
                let w1 = (q[0][0] - q[2][0]) * (py - q[2][1]) - (px - q[2][0]) * (q[0][1] - q[2][1]);
                let w2 = (q[1][0] - q[0][0]) * (py - q[0][1]) - (px - q[0][0]) * (q[1][1] - q[0][1]);
                if sign * w0 < 0.0 || sign * w1 < 0.0 || sign * w2 < 0.0 {
                    continue;
                }
                let (b0, b1, b2) = (w0 / area2, w1 / area2, w2 / area2);
                let z = b0 * p[0][2] + b1 * p[1][2] + b2 * p[2][2];
                let pix = i * size + j;
                if z > zbuf[pix] {
                    zbuf[pix] = z;
                    image.data[pix] = 1.0;
                    image.data[size * size + pix] = ((z + DEPTH_RANGE) / (2.0 * DEPTH_RANGE)).clamp(0.0, 1.0);
                    image.data[2 * size * size + pix] = shade;
                }
            }
        }
    }
    image
}

/// Sample ground-truth body parameters from the dataset distribution:
/// vertical-axis global orientation, bounded limb articulation, bounded
/// shape, and a lightly jittered camera.
pub fn sample_params<R: Rng>(rng: &mut R, n_joints: usize, n_shape: usize, d: &DatasetConfig) -> BodyParams<f64> {
    let mut pose_theta = vec![0.0f64; 3 * n_joints];
    pose_theta[1] = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    for k in 1..n_joints {
        for ax in 0..3 {
            pose_theta[3 * k + ax] = rng.gen_range(-d.pose_spread..=d.pose_spread);
        }
    }
    let shape_beta = (0..n_shape).map(|_| rng.gen_range(-d.shape_spread..=d.shape_spread)).collect();
    let camera_pi = [
        rng.gen_range(0.7..0.8),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    BodyParams { pose_theta, shape_beta, camera_pi }
}

/// Generate one labeled example from its own deterministic substream.
pub fn sample_example(
    asset: &BodyModelAsset<f64>,
    d: &DatasetConfig,
    image_size: usize,
    seed: u64,
    index: u64,
    with_3d: bool,
) -> LabeledExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    let params = sample_params(&mut rng, asset.n_joints(), asset.n_shape(), d);
    let mesh = forward(asset, &params).expect("sampled params fit the asset");
    let image = render_shaded_image(&mesh.vertices, &asset.faces, params.camera_pi, image_size);
    let keypoints2d = project(&mesh.joints3d, params.camera_pi).expect("positive scale");
    debug_assert!(keypoints2d.data.iter().all(|k| k.abs() <= 0.95), "keypoints stay in frame");
    let gt3d = with_3d.then(|| Gt3d {
        joints3d: mesh.joints3d,
        pose_theta: params.pose_theta,
        shape_beta: params.shape_beta,
    });
    LabeledExample { image, keypoints2d, gt3d }
}

/// Generate a full dataset. 3d-labeled records come first; the exact count
/// is round(n * fraction_3d) and is recorded in the manifest.
pub fn generate_dataset(
    asset: &BodyModelAsset<f64>,
    cam: &CameraConfig,
    d: &DatasetConfig,
    image_size: usize,
    seed: u64,
) -> Dataset {
    let count_3d = (d.n_examples as f64 * d.fraction_3d).round() as usize;
    let examples = (0..d.n_examples)
        .map(|i| sample_example(asset, d, image_size, seed, i as u64, i < count_3d))
        .collect();
    Dataset {
        manifest: DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            n_examples: d.n_examples,
            image_size,
            n_joints: asset.n_joints(),
            n_shape: asset.n_shape(),
            count_3d,
            asset_hash: asset_hash(asset),
            camera: *cam,
            pose_spread: d.pose_spread,
            shape_spread: d.shape_spread,
        },
        examples,
    }
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn record_bytes(ex: &LabeledExample) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.push(ex.gt3d.is_some() as u8);
    put_f64s(&mut buf, &ex.image.data);
    put_f64s(&mut buf, &ex.keypoints2d.data);
    if let Some(gt) = &ex.gt3d {
        put_f64s(&mut buf, &gt.joints3d.data);
        put_f64s(&mut buf, &gt.pose_theta);
        put_f64s(&mut buf, &gt.shape_beta);
    }
    buf
}

impl Dataset {
    /// Serialize: magic, version, manifest length + JSON, then each record's
    /// payload followed by the first 8 bytes of its sha-256.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for ex in &self.examples {
            let rec = record_bytes(ex);
            out.extend_from_slice(&rec);
            let digest = Sha256::digest(&rec);
            out.extend_from_slice(&digest[..8]);
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DataError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| DataError::Magic)?;
        if &magic != DATASET_MAGIC {
            return Err(DataError::Magic);
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4).map_err(|_| DataError::Magic)?;
        let version = u32::from_le_bytes(v4);
        if version != DATASET_FORMAT_VERSION {
            return Err(DataError::Version(version));
        }
        let mut l8 = [0u8; 8];
        r.read_exact(&mut l8).map_err(|_| DataError::Truncated(0))?;
        let mlen = u64::from_le_bytes(l8) as usize;
        if r.len() < mlen {
            return Err(DataError::Truncated(0));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&r[..mlen])?;
        r = &r[mlen..];
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(DataError::Version(manifest.format_version));
        }
        if manifest.count_3d > manifest.n_examples {
            return Err(DataError::Inconsistent("count_3d exceeds n_examples".into()));
        }
        let s2 = manifest.image_size * manifest.image_size;
        let mut examples = Vec::with_capacity(manifest.n_examples);
        for idx in 0..manifest.n_examples {
            let trunc = || DataError::Truncated(idx);
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(|_| trunc())?;
            let has_3d = match flag[0] {
                0 => false,
                1 => true,
                _ => return Err(DataError::Checksum(idx)),
            };
            let n_vals = 3 * s2
                + manifest.n_joints * 2
                + if has_3d { manifest.n_joints * 3 + 3 * manifest.n_joints + manifest.n_shape } else { 0 };
            let payload_len = 1 + 8 * n_vals;
            if bytes.len() < (bytes.len() - r.len()) + payload_len - 1 + 8 {
                return Err(trunc());
            }
            let full_start = bytes.len() - r.len() - 1;
            let rec = &bytes[full_start..full_start + payload_len];
            let mut vals = vec![0.0f64; n_vals];
            for (i, v) in vals.iter_mut().enumerate() {
                let off = 1 + 8 * i;
                *v = f64::from_le_bytes(rec[off..off + 8].try_into().unwrap());
            }
            let digest = Sha256::digest(rec);
            let stored = &bytes[full_start + payload_len..full_start + payload_len + 8];
            if stored != &digest[..8] {
                return Err(DataError::Checksum(idx));
            }
            r = &bytes[full_start + payload_len + 8..];

            let mut cursor = 0usize;
            let mut take = |n: usize| {
                let out = vals[cursor..cursor + n].to_vec();
                cursor += n;
                out
            };
            let image = Mat::from_vec(3, s2, take(3 * s2));
            let keypoints2d = Mat::from_vec(manifest.n_joints, 2, take(manifest.n_joints * 2));
            let gt3d = has_3d.then(|| Gt3d {
                joints3d: Mat::from_vec(manifest.n_joints, 3, take(manifest.n_joints * 3)),
                pose_theta: take(3 * manifest.n_joints),
                shape_beta: take(manifest.n_shape),
            });
            examples.push(LabeledExample { image, keypoints2d, gt3d });
        }
        Ok(Dataset { manifest, examples })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DataError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
