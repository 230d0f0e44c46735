//! Training-only geometric guidance branch: a transposed-convolution decoder
//! that lifts a rendered feature map to a 128x128 soft silhouette, and a
//! z-free orthographic rasterizer producing hard ground-truth silhouettes
//! from a mesh. Inference never constructs either.

use crate::mat::Mat;
use crate::tape::{ConvDims, Tape, Var};
use crate::Scalar;
use rand::Rng;

/// Output side of the decoded silhouette.
pub const SILHOUETTE_RES: usize = 128;
/// Half-extent of the fixed orthographic frame silhouettes are drawn in; the
/// 1.2-radius scene sphere fits with a small margin.
pub const SILHOUETTE_HALF_EXTENT: f64 = 4.0 / 3.0;

/// Transposed-convolution decoder from a (C, res*res) feature map to a
/// (1, 128*128) soft mask. Each stage doubles the side (k4, stride 2, pad 1),
/// so the input side must be a power of two dividing 128.
#[derive(Clone, Debug)]
pub struct DecoderWeights<S> {
    pub stages: Vec<(Mat<S>, Mat<S>, ConvDims)>,
    pub res: usize,
    pub channels: usize,
}

impl<S: Scalar> DecoderWeights<S> {
    pub fn supported_res(res: usize) -> bool {
        res >= 1 && SILHOUETTE_RES % res == 0 && (SILHOUETTE_RES / res).is_power_of_two()
    }

    pub fn init<R: Rng>(rng: &mut R, channels: usize, res: usize) -> Self {
        assert!(Self::supported_res(res), "decoder cannot grow {res} to {SILHOUETTE_RES} by doubling");
        let n_stages = (SILHOUETTE_RES / res).trailing_zeros() as usize;
        assert!(n_stages >= 1);
        let mut stages = Vec::with_capacity(n_stages);
        let mut side = res;
        for i in 0..n_stages {
            let c_in = channels;
            let c_out = if i + 1 == n_stages { 1 } else { channels };
            let dims = ConvDims { c_in, h: side, w: side, c_out, k: 4, stride: 2, pad: 1 };
            let a = (6.0 / (c_in * 16 + c_out * 16) as f64).sqrt();
            let w = Mat::from_fn(c_in, 16 * c_out, |_, _| S::from_f64(rng.gen_range(-a..a)));
            stages.push((w, Mat::zeros(c_out, 1), dims));
            side *= 2;
        }
        debug_assert_eq!(side, SILHOUETTE_RES);
        DecoderWeights { stages, res, channels }
    }

    pub fn named_params(&self) -> Vec<(String, &Mat<S>)> {
        let mut out = Vec::new();
        for (i, (w, b, _)) in self.stages.iter().enumerate() {
            out.push((format!("decoder.stage{i}.w"), w));
            out.push((format!("decoder.stage{i}.b"), b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        let mut out = Vec::new();
        for (i, (w, b, _)) in self.stages.iter_mut().enumerate() {
            out.push((format!("decoder.stage{i}.w"), w));
            out.push((format!("decoder.stage{i}.b"), b));
        }
        out
    }
}

pub struct DecoderVars {
    pub stages: Vec<(Var, Var)>,
}

pub fn register_decoder<S: Scalar>(t: &mut Tape<S>, d: &DecoderWeights<S>) -> DecoderVars {
    DecoderVars { stages: d.stages.iter().map(|(w, b, _)| (t.param(w), t.param(b))).collect() }
}

/// Decode a feature map into a (1, 128*128) soft silhouette. The map's
/// spatial size must match the resolution the decoder was built for.
pub fn decode_silhouette<S: Scalar>(
    t: &mut Tape<S>,
    d: &DecoderWeights<S>,
    vars: &DecoderVars,
    map: Var,
) -> Result<Var, String> {
    let (c, cells) = t.shape(map);
    if c != d.channels || cells != d.res * d.res {
        return Err(format!(
            "decoder built for a ({}, {}) map, got ({c}, {cells})",
            d.channels,
            d.res * d.res
        ));
    }
    let mut x = map;
    let n = d.stages.len();
    for (i, ((_, _, dims), &(w, b))) in d.stages.iter().zip(&vars.stages).enumerate() {
        x = t.conv_transpose2d(x, w, b, *dims);
        if i + 1 < n {
            x = t.instance_norm_rows(x, S::from_f64(1e-5));
            x = t.softplus(x);
        }
    }
    Ok(t.sigmoid(x))
}

/// Rasterize a mesh silhouette: orthographic drop of z inside the fixed
/// square frame, pixel centers covered by any triangle set to 1. Output is
/// (res, res), row 0 at the top (+y), column 0 at -x.
pub fn rasterize_silhouette<S: Scalar>(
    vertices: &Mat<S>,
    faces: &[[u32; 3]],
    res: usize,
    half_extent: f64,
) -> Mat<S> {
    assert_eq!(vertices.cols, 3);
    let he = half_extent;
    let resf = res as f64;
    // Pixel center (i, j) sits at ndc x = (j + 0.5)/res * 2 - 1, scaled by he.
    let to_col = |x: f64| (x / he + 1.0) * 0.5 * resf - 0.5;
    let to_row = |y: f64| (1.0 - y / he) * 0.5 * resf - 0.5;
    let mut mask = Mat::zeros(res, res);
    for f in faces {
        let p: Vec<[f64; 2]> = f
            .iter()
            .map(|&vi| {
                let vi = vi as usize;
                [
                    Scalar::to_f64(vertices.at(vi, 0)),
                    Scalar::to_f64(vertices.at(vi, 1)),
                ]
            })
            .collect();
        let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        if area2.abs() < 1e-12 {
            continue; // degenerate in projection
        }
        let (cx, rx): (Vec<f64>, Vec<f64>) =
            (p.iter().map(|q| to_col(q[0])).collect(), p.iter().map(|q| to_row(q[1])).collect());
        let c0 = cx.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let c1 = cx.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().min(resf - 1.0) as usize;
        let r0 = rx.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let r1 = rx.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().min(resf - 1.0) as usize;
        if c0 > c1 || r0 > r1 {
            continue;
        }
        let sign = area2.signum();
        for i in r0..=r1 {
            for j in c0..=c1 {
                let px = ((j as f64 + 0.5) / resf * 2.0 - 1.0) * he;
                let py = (1.0 - (i as f64 + 0.5) / resf * 2.0) * he;
                let e0 = (p[1][0] - p[0][0]) * (py - p[0][1]) - (px - p[0][0]) * (p[1][1] - p[0][1]);
                let e1 = (p[2][0] - p[1][0]) * (py - p[1][1]) - (px - p[1][0]) * (p[2][1] - p[1][1]);
                let e2 = (p[0][0] - p[2][0]) * (py - p[2][1]) - (px - p[2][0]) * (p[0][1] - p[2][1]);
                if sign * e0 >= 0.0 && sign * e1 >= 0.0 && sign * e2 >= 0.0 {
                    *mask.at_mut(i, j) = S::one();
                }
            }
        }
    }
    mask
}

/// Ground-truth silhouette of a body at azimuth phi: rotate the mesh by
/// R_y(-phi) (the view the camera at phi sees head-on) and rasterize.
pub fn silhouette_at_azimuth<S: Scalar>(
    vertices: &Mat<S>,
    faces: &[[u32; 3]],
    phi: S,
    res: usize,
) -> Mat<S> {
    let rotated = crate::body_model::rotate_about_vertical(vertices, -phi);
    rasterize_silhouette(&rotated, faces, res, SILHOUETTE_HALF_EXTENT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{forward, generate_toy_asset, BodyParams};
    use crate::tape::{central_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decoder_reaches_full_resolution_from_supported_sizes() {
        for &res in &[1usize, 2, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let d = DecoderWeights::<f64>::init(&mut rng, 3, res);
            assert_eq!(d.stages.len(), (SILHOUETTE_RES / res).trailing_zeros() as usize);
            let mut t = Tape::new();
            let map = t.constant(Mat::from_fn(3, res * res, |_, _| 0.3));
            let vars = register_decoder(&mut t, &d);
            let out = decode_silhouette(&mut t, &d, &vars, map).unwrap();
            assert_eq!(t.shape(out), (1, SILHOUETTE_RES * SILHOUETTE_RES));
            assert!(t.value(out).data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(!DecoderWeights::<f64>::supported_res(6));
        assert!(!DecoderWeights::<f64>::supported_res(3));
    }

    #[test]
    fn decoder_rejects_mismatched_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = DecoderWeights::<f64>::init(&mut rng, 3, 4);
        let mut t = Tape::new();
        let wrong_cells = t.constant(Mat::zeros(3, 9));
        let vars = register_decoder(&mut t, &d);
        assert!(decode_silhouette(&mut t, &d, &vars, wrong_cells).is_err());
        let wrong_channels = t.constant(Mat::zeros(2, 16));
        assert!(decode_silhouette(&mut t, &d, &vars, wrong_channels).is_err());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DecoderWeights::<f64>::init(&mut rng, 2, 2);
        let map_mat = Mat::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
        let mats: Vec<Mat<f64>> = d.named_params().into_iter().map(|(_, m)| m.clone()).collect();
        let build = |params: &[Mat<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
            let mut d2 = d.clone();
            for ((_, m), p) in d2.named_params_mut().into_iter().zip(params) {
                *m = p.clone();
            }
            let mut t = Tape::new();
            let map = t.constant(map_mat.clone());
            let vars = register_decoder(&mut t, &d2);
            let vlist: Vec<Var> = vars.stages.iter().flat_map(|&(w, b)| [w, b]).collect();
            let out = decode_silhouette(&mut t, &d2, &vars, map).unwrap();
            let loss = t.sq_sum(out);
            (t, vlist, loss)
        };
        let (t, vlist, loss) = build(&mats);
        let grads = t.backward(loss);
        let mut pick = ChaCha8Rng::seed_from_u64(4);
        for (pi, v) in vlist.iter().enumerate() {
            let g = grads.get(*v).expect("all stages used");
            let n = mats[pi].len();
            for _ in 0..2.min(n) {
                let idx = pick.gen_range(0..n);
                let fd = central_diff(
                    |ps| {
                        let (t2, _, l2) = build(ps);
                        t2.scalar(l2)
                    },
                    &mats,
                    pi,
                    idx,
                );
                assert!(rel_err(g.data[idx], fd) < 1e-4, "stage param {pi} coord {idx}");
            }
        }
    }

    #[test]
    fn rasterizer_covers_an_axis_aligned_square_exactly() {
        // A unit square centered at the origin inside a half-extent-1 frame
        // covers exactly the middle half of the pixels in each axis.
        let res = 16;
        let verts: Mat<f64> = Mat::from_vec(
            4,
            3,
            vec![-0.5, -0.5, 0.0, 0.5, -0.5, 0.0, 0.5, 0.5, 0.0, -0.5, 0.5, 0.0],
        );
        let faces = [[0u32, 1, 2], [0, 2, 3]];
        let mask = rasterize_silhouette(&verts, &faces, res, 1.0);
        for i in 0..res {
            for j in 0..res {
                let inside = (4..12).contains(&i) && (4..12).contains(&j);
                assert_eq!(mask.at(i, j) == 1.0, inside, "pixel ({i},{j})");
            }
        }
    }

    #[test]
    fn rasterized_area_matches_analytic_triangle_area() {
        // Pixel-count area against the exact triangle area: agreement within
        // a boundary band that shrinks with resolution.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let res = 256;
        for _ in 0..5 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let verts: Mat<f64> = Mat::from_vec(3, 3, vec![v[0], v[1], 0.0, v[2], v[3], 0.0, v[4], v[5], 0.0]);
            let analytic = 0.5 * ((v[2] - v[0]) * (v[5] - v[1]) - (v[4] - v[0]) * (v[3] - v[1])).abs();
            if analytic < 0.05 {
                continue; // slivers are all boundary
            }
            let mask = rasterize_silhouette(&verts, &[[0, 1, 2]], res, 1.0);
            let pixels: f64 = mask.data.iter().sum();
            let frame_area = 4.0;
            let measured = pixels / (res * res) as f64 * frame_area;
            assert!(
                (measured - analytic).abs() < 0.12 * analytic + 0.01,
                "analytic {analytic} vs rasterized {measured}"
            );
        }
    }

    #[test]
    fn rasterizer_skips_degenerate_triangles() {
        let verts: Mat<f64> = Mat::from_vec(3, 3, vec![0.1, 0.1, 0.0, 0.5, 0.5, 0.0, 0.9, 0.9, 0.0]);
        let mask = rasterize_silhouette(&verts, &[[0, 1, 2]], 32, 1.0);
        assert!(mask.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn opposite_azimuths_mirror_the_silhouette() {
        let asset = generate_toy_asset(7);
        let p = BodyParams::mean(asset.n_joints(), asset.n_shape());
        let mesh = forward(&asset, &p).unwrap();
        let res = 64;
        let front = silhouette_at_azimuth(&mesh.vertices, &asset.faces, 0.0, res);
        let back = silhouette_at_azimuth(&mesh.vertices, &asset.faces, std::f64::consts::PI, res);
        let mut mismatches = 0usize;
        for i in 0..res {
            for j in 0..res {
                if front.at(i, j) != back.at(i, res - 1 - j) {
                    mismatches += 1;
                }
            }
        }
        assert!(mismatches < res * res / 100, "{mismatches} mismatched pixels");
        let area: f64 = front.data.iter().sum();
        assert!(area > 0.0, "body silhouette must be non-empty");
        assert!(front.data.iter().all(|&x| x == 0.0 || x == 1.0), "hard mask only");
    }

    #[test]
    fn posed_body_changes_its_silhouette() {
        let asset = generate_toy_asset(7);
        let rest = BodyParams::mean(asset.n_joints(), asset.n_shape());
        let mut posed = rest.clone();
        posed.pose_theta[3 * 4 + 2] = 1.2; // swing the left arm
        let a = forward(&asset, &rest).unwrap();
        let b = forward(&asset, &posed).unwrap();
        let sa = silhouette_at_azimuth(&a.vertices, &asset.faces, 0.0, 64);
        let sb = silhouette_at_azimuth(&b.vertices, &asset.faces, 0.0, 64);
        assert_ne!(sa.data, sb.data);
    }
}
