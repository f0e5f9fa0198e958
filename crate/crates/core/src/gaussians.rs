//! Gaussian cloud representation and dense motion interpolation.
//!
//! A sparse set of control vertices drags the full cloud along: each Gaussian
//! takes inverse-distance blend weights over its nearest control vertices,
//! and per-vertex rigid motions (rotation fitted from the neighborhood, plus
//! the vertex displacement) are skinned onto centers and orientations.

use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use crate::geom::{self, vec3, UnitQuat, Vec3};
use crate::records;
use crate::{Error, Result};

const CLOUD_MAGIC: &[u8; 4] = b"GCLD";
const CLOUD_VERSION: u32 = 1;

/// Isotropic-attribute Gaussian cloud. Colors, opacities, and scales are
/// fixed for the lifetime of the cloud; motion only updates centers and
/// rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub centers: Vec<Vec3>,
    pub rotations: Vec<UnitQuat>,
    /// Per-axis standard deviations in meters, strictly positive.
    pub scales: Vec<Vec3>,
    /// RGB in [0,1], stored as x=r, y=g, z=b.
    pub colors: Vec<Vec3>,
    /// Alpha in [0,1].
    pub opacities: Vec<f64>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.centers.len();
        if n == 0 {
            return Err(Error::invalid("gaussian cloud: empty"));
        }
        for (name, len) in [
            ("rotations", self.rotations.len()),
            ("scales", self.scales.len()),
            ("colors", self.colors.len()),
            ("opacities", self.opacities.len()),
        ] {
            if len != n {
                return Err(Error::shape(format!(
                    "gaussian cloud: {name} has {len} entries, centers have {n}"
                )));
            }
        }
        for (i, c) in self.centers.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::numeric(format!("gaussian cloud: center {i} not finite")));
            }
        }
        for (i, q) in self.rotations.iter().enumerate() {
            if !q.is_finite() || (q.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("gaussian cloud: rotation {i} not unit")));
            }
        }
        for (i, s) in self.scales.iter().enumerate() {
            if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!(
                    "gaussian cloud: scale {i} must be strictly positive"
                )));
            }
        }
        for (i, c) in self.colors.iter().enumerate() {
            let ok = |v: f64| (0.0..=1.0).contains(&v);
            if !(ok(c.x) && ok(c.y) && ok(c.z)) {
                return Err(Error::invalid(format!("gaussian cloud: color {i} outside [0,1]")));
            }
        }
        for (i, &a) in self.opacities.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("gaussian cloud: opacity {i} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = records::create(path)?;
        records::write_magic(&mut w, CLOUD_MAGIC, CLOUD_VERSION)?;
        records::write_u64(&mut w, self.len() as u64)?;
        let col = |f: &dyn Fn(usize) -> f64| (0..self.len()).map(f).collect::<Vec<_>>();
        for arr in [
            col(&|i| self.centers[i].x),
            col(&|i| self.centers[i].y),
            col(&|i| self.centers[i].z),
            col(&|i| self.rotations[i].w),
            col(&|i| self.rotations[i].x),
            col(&|i| self.rotations[i].y),
            col(&|i| self.rotations[i].z),
            col(&|i| self.scales[i].x),
            col(&|i| self.scales[i].y),
            col(&|i| self.scales[i].z),
            col(&|i| self.colors[i].x),
            col(&|i| self.colors[i].y),
            col(&|i| self.colors[i].z),
            col(&|i| self.opacities[i]),
        ] {
            records::write_f64s(&mut w, &arr)?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<GaussianCloud> {
        let mut r = records::open(path)?;
        records::expect_magic(&mut r, CLOUD_MAGIC, CLOUD_VERSION, "gaussian cloud")?;
        let n = records::read_count(&mut r, "gaussian count", 100_000_000)?;
        let mut cols = Vec::with_capacity(14);
        for _ in 0..14 {
            cols.push(records::read_f64s(&mut r, n)?);
        }
        let cloud = GaussianCloud {
            centers: (0..n).map(|i| vec3(cols[0][i], cols[1][i], cols[2][i])).collect(),
            rotations: (0..n)
                .map(|i| UnitQuat { w: cols[3][i], x: cols[4][i], y: cols[5][i], z: cols[6][i] })
                .collect(),
            scales: (0..n).map(|i| vec3(cols[7][i], cols[8][i], cols[9][i])).collect(),
            colors: (0..n).map(|i| vec3(cols[10][i], cols[11][i], cols[12][i])).collect(),
            opacities: cols[13].clone(),
        };
        cloud.validate().map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        Ok(cloud)
    }

    /// ASCII PLY point export (centers + 8-bit colors) for external viewers.
    pub fn export_ply(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        out.push_str(&format!("element vertex {}\n", self.len()));
        out.push_str("property float x\nproperty float y\nproperty float z\n");
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        out.push_str("end_header\n");
        for i in 0..self.len() {
            let c = self.centers[i];
            let col = self.colors[i];
            let to8 = |v: f64| (v * 255.0).round() as u8;
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                c.x,
                c.y,
                c.z,
                to8(col.x),
                to8(col.y),
                to8(col.z)
            ));
        }
        w.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Sparse row-normalized skinning weights: `rows[i]` lists (vertex index,
/// weight) pairs for Gaussian i, each row summing to 1.
#[derive(Clone, Debug)]
pub struct BlendWeights {
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Number of control vertices the indices refer to.
    pub num_vertices: usize,
}

impl BlendWeights {
    fn validate(&self, num_gaussians: usize) -> Result<()> {
        if self.rows.len() != num_gaussians {
            return Err(Error::shape(format!(
                "blend weights: {} rows for {num_gaussians} gaussians",
                self.rows.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            let mut sum = 0.0;
            for &(b, w) in row {
                if b >= self.num_vertices {
                    return Err(Error::shape(format!(
                        "blend weights: row {i} references vertex {b} of {}",
                        self.num_vertices
                    )));
                }
                if !(w >= 0.0) {
                    return Err(Error::invalid(format!("blend weights: negative entry in row {i}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "blend weights: row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// One rigid motion per control vertex for a single step.
#[derive(Clone, Debug)]
pub struct VertexTransforms {
    pub rotations: Vec<UnitQuat>,
    pub translations: Vec<Vec3>,
}

impl VertexTransforms {
    pub fn identity(n: usize) -> VertexTransforms {
        VertexTransforms {
            rotations: vec![UnitQuat::IDENTITY; n],
            translations: vec![Vec3::ZERO; n],
        }
    }
}

/// Inverse-distance weights over the `top_k` nearest control vertices,
/// renormalized. A Gaussian exactly coincident with a vertex puts weight 1 on
/// that vertex (lowest index wins when several coincide).
pub fn blend_weights(
    cloud_centers: &[Vec3],
    vertex_positions: &[Vec3],
    top_k: usize,
) -> Result<BlendWeights> {
    let n = vertex_positions.len();
    if n == 0 {
        return Err(Error::invalid("blend_weights: no control vertices"));
    }
    if top_k == 0 || top_k > n {
        return Err(Error::invalid(format!("blend_weights: top_k {top_k} outside 1..={n}")));
    }
    let mut rows = Vec::with_capacity(cloud_centers.len());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for mu in cloud_centers {
        dists.clear();
        dists.extend(vertex_positions.iter().enumerate().map(|(b, v)| (mu.dist(*v), b)));
        // Nearest first; ties by index so truncation is deterministic.
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &dists[..top_k];
        if nearest[0].0 == 0.0 {
            rows.push(vec![(nearest[0].1, 1.0)]);
            continue;
        }
        let inv_sum: f64 = nearest.iter().map(|(d, _)| 1.0 / d).sum();
        rows.push(nearest.iter().map(|&(d, b)| (b, (1.0 / d) / inv_sum)).collect());
    }
    Ok(BlendWeights { rows, num_vertices: n })
}

/// Skins one step of control-vertex motion onto the cloud:
/// μ_i ← Σ_b w_ib (R_b(μ_i − v_b) + v_b + T_b) and
/// q_i ← normalize(Σ_b w_ib r_b) ⊙ q_i.
///
/// The center update is evaluated as μ_i + Σ_b w_ib ((R_b − I)(μ_i − v_b) + T_b),
/// identical for normalized rows, so all-identity transforms return the input
/// centers and rotations bit for bit.
pub fn apply_lbs(
    cloud: &GaussianCloud,
    vertices_t: &[Vec3],
    transforms: &VertexTransforms,
    weights: &BlendWeights,
) -> Result<GaussianCloud> {
    cloud.validate()?;
    weights.validate(cloud.len())?;
    if weights.num_vertices != vertices_t.len() {
        return Err(Error::shape(format!(
            "apply_lbs: weights over {} vertices, {} positions given",
            weights.num_vertices,
            vertices_t.len()
        )));
    }
    if transforms.rotations.len() != vertices_t.len()
        || transforms.translations.len() != vertices_t.len()
    {
        return Err(Error::shape(format!(
            "apply_lbs: {} rotations / {} translations for {} vertices",
            transforms.rotations.len(),
            transforms.translations.len(),
            vertices_t.len()
        )));
    }

    let rot_mats: Vec<_> = transforms.rotations.iter().map(|q| q.to_mat3()).collect();
    let mut centers = Vec::with_capacity(cloud.len());
    let mut rotations = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let mu = cloud.centers[i];
        let row = &weights.rows[i];

        let mut delta = Vec3::ZERO;
        for &(b, w) in row {
            let off = mu - vertices_t[b];
            let rotated = rot_mats[b].mul_vec(off) - off;
            delta += (rotated + transforms.translations[b]) * w;
        }
        centers.push(if delta == Vec3::ZERO { mu } else { mu + delta });

        // Align every vertex rotation to the hemisphere of the dominant
        // weight before averaging; antipodal quaternions otherwise cancel.
        let lead = row
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|&(b, _)| b)
            .expect("validated rows are non-empty");
        let r_ref = transforms.rotations[lead];
        let mut acc = [0.0f64; 4];
        for &(b, w) in row {
            let r = transforms.rotations[b];
            let s = if r.dot(r_ref) < 0.0 { -w } else { w };
            acc[0] += s * r.w;
            acc[1] += s * r.x;
            acc[2] += s * r.y;
            acc[3] += s * r.z;
        }
        let blended =
            UnitQuat::try_new(acc[0], acc[1], acc[2], acc[3]).unwrap_or(r_ref);
        rotations.push(if blended == UnitQuat::IDENTITY {
            cloud.rotations[i]
        } else {
            blended.compose(cloud.rotations[i])
        });
    }

    Ok(GaussianCloud {
        centers,
        rotations,
        scales: cloud.scales.clone(),
        colors: cloud.colors.clone(),
        opacities: cloud.opacities.clone(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DensifyOptions {
    /// Control vertices within this radius form a rotation-fit neighborhood.
    pub edge_radius: f64,
    /// Blend weight support size per Gaussian.
    pub top_k: usize,
}

impl Default for DensifyOptions {
    fn default() -> Self {
        DensifyOptions { edge_radius: 0.1, top_k: 5 }
    }
}

/// Chains LBS over a control-vertex trajectory. Frame 0 is `cloud0`
/// unchanged; each later frame recomputes blend weights and per-vertex rigid
/// motions (rotation fitted from the vertex neighborhood, translation from
/// the vertex displacement) against the previous frame.
pub fn densify_rollout(
    cloud0: &GaussianCloud,
    control_traj: &[Vec<Vec3>],
    opts: DensifyOptions,
) -> Result<Vec<GaussianCloud>> {
    cloud0.validate()?;
    if control_traj.is_empty() {
        return Err(Error::invalid("densify_rollout: empty control trajectory"));
    }
    let n = control_traj[0].len();
    if n == 0 {
        return Err(Error::invalid("densify_rollout: no control vertices"));
    }
    for (t, frame) in control_traj.iter().enumerate() {
        if frame.len() != n {
            return Err(Error::shape(format!(
                "densify_rollout: frame {t} has {} vertices, frame 0 has {n}",
                frame.len()
            )));
        }
        for v in frame {
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "densify_rollout: non-finite control vertex at frame {t}"
                )));
            }
        }
    }
    let top_k = opts.top_k.min(n);

    let mut lo = cloud0.centers[0];
    let mut hi = lo;
    for c in &cloud0.centers {
        lo = vec3(lo.x.min(c.x), lo.y.min(c.y), lo.z.min(c.z));
        hi = vec3(hi.x.max(c.x), hi.y.max(c.y), hi.z.max(c.z));
    }
    let pad = opts.edge_radius;
    if control_traj[0].iter().any(|v| {
        v.x < lo.x - pad || v.x > hi.x + pad || v.y < lo.y - pad || v.y > hi.y + pad
            || v.z < lo.z - pad || v.z > hi.z + pad
    }) {
        log::warn!("densify_rollout: some frame-0 control vertices fall outside the cloud bounds");
    }

    let mut frames = Vec::with_capacity(control_traj.len());
    frames.push(cloud0.clone());
    for t in 1..control_traj.len() {
        let prev_v = &control_traj[t - 1];
        let next_v = &control_traj[t];
        let mut transforms = VertexTransforms::identity(n);
        let r2 = opts.edge_radius * opts.edge_radius;
        for b in 0..n {
            let mut nb_src = Vec::new();
            let mut nb_dst = Vec::new();
            for j in 0..n {
                if j != b && prev_v[j].dist_sq(prev_v[b]) <= r2 {
                    nb_src.push(prev_v[j]);
                    nb_dst.push(next_v[j]);
                }
            }
            if !nb_src.is_empty() {
                // Degenerate neighborhoods keep the identity rotation.
                transforms.rotations[b] =
                    geom::fit_rotation(prev_v[b], next_v[b], &nb_src, &nb_dst)?.rotation;
            }
            transforms.translations[b] = next_v[b] - prev_v[b];
        }
        let prev_cloud = frames.last().expect("frames starts non-empty");
        let weights = blend_weights(&prev_cloud.centers, prev_v, top_k)?;
        frames.push(apply_lbs(prev_cloud, prev_v, &transforms, &weights)?);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Mat3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        vec3(
            (rng.random::<f64>() - 0.5) * s,
            (rng.random::<f64>() - 0.5) * s,
            (rng.random::<f64>() - 0.5) * s,
        )
    }

    fn test_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
        GaussianCloud {
            centers: (0..n).map(|_| rv(rng, 1.0)).collect(),
            rotations: (0..n)
                .map(|_| {
                    UnitQuat::from_axis_angle(
                        rv(rng, 1.0) + vec3(0.01, 0.0, 0.0),
                        rng.random::<f64>(),
                    )
                    .unwrap()
                })
                .collect(),
            scales: (0..n).map(|_| vec3(0.01, 0.02, 0.03)).collect(),
            colors: (0..n)
                .map(|_| vec3(rng.random(), rng.random(), rng.random()))
                .collect(),
            opacities: (0..n).map(|_| rng.random()).collect(),
        }
    }

    #[test]
    fn weights_single_vertex_all_one() {
        let centers = [vec3(0.0, 0.0, 0.0), vec3(5.0, 1.0, 2.0)];
        let w = blend_weights(&centers, &[vec3(1.0, 1.0, 1.0)], 1).unwrap();
        for row in &w.rows {
            assert_eq!(row, &vec![(0, 1.0)]);
        }
    }

    #[test]
    fn weights_equidistant_split() {
        let w = blend_weights(
            &[vec3(0.0, 0.0, 0.0)],
            &[vec3(1.0, 0.0, 0.0), vec3(-1.0, 0.0, 0.0)],
            2,
        )
        .unwrap();
        assert_eq!(w.rows[0].len(), 2);
        for &(_, wi) in &w.rows[0] {
            assert_relative_eq!(wi, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn weights_inverse_distance_ratio() {
        // Distances 1 and 3: weights (1/1)/(1/1 + 1/3) = 0.75 and 0.25.
        let w = blend_weights(
            &[vec3(0.0, 0.0, 0.0)],
            &[vec3(1.0, 0.0, 0.0), vec3(-3.0, 0.0, 0.0)],
            2,
        )
        .unwrap();
        let row = &w.rows[0];
        assert_eq!(row[0].0, 0);
        assert_relative_eq!(row[0].1, 0.75, epsilon = 1e-12);
        assert_relative_eq!(row[1].1, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn weights_coincident_vertex_takes_all() {
        let p = vec3(0.3, -0.2, 0.7);
        let w = blend_weights(&[p], &[vec3(1.0, 0.0, 0.0), p, p], 3).unwrap();
        assert_eq!(w.rows[0], vec![(1, 1.0)]);
    }

    #[test]
    fn weights_rows_normalized_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mu = rv(&mut rng, 1.0);
            let mut verts: Vec<Vec3> = (0..6).map(|_| rv(&mut rng, 1.0)).collect();
            let k = rng.random_range(1..=verts.len());
            let w0 = blend_weights(&[mu], &verts, k).unwrap();
            let sum: f64 = w0.rows[0].iter().map(|&(_, w)| w).sum();
            assert!((sum - 1.0).abs() < 1e-6);

            // Push one vertex radially away from the Gaussian; its weight
            // must not increase.
            let target = rng.random_range(0..verts.len());
            let dir = (verts[target] - mu).try_normalized().unwrap_or(vec3(1.0, 0.0, 0.0));
            let before = w0.rows[0].iter().find(|&&(b, _)| b == target).map_or(0.0, |&(_, w)| w);
            verts[target] += dir * 0.5;
            let w1 = blend_weights(&[mu], &verts, k).unwrap();
            let after = w1.rows[0].iter().find(|&&(b, _)| b == target).map_or(0.0, |&(_, w)| w);
            assert!(after <= before + 1e-12, "weight grew from {before} to {after}");
        }
    }

    #[test]
    fn weights_bad_args() {
        let c = [Vec3::ZERO];
        assert!(blend_weights(&c, &[], 1).is_err());
        assert!(blend_weights(&c, &[Vec3::ZERO], 0).is_err());
        assert!(blend_weights(&c, &[Vec3::ZERO], 2).is_err());
    }

    #[test]
    fn lbs_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cloud = test_cloud(&mut rng, 20);
        let verts: Vec<Vec3> = (0..4).map(|_| rv(&mut rng, 1.0)).collect();
        let weights = blend_weights(&cloud.centers, &verts, 3).unwrap();
        let out =
            apply_lbs(&cloud, &verts, &VertexTransforms::identity(4), &weights).unwrap();
        for i in 0..cloud.len() {
            assert_eq!(cloud.centers[i].x.to_bits(), out.centers[i].x.to_bits());
            assert_eq!(cloud.centers[i].y.to_bits(), out.centers[i].y.to_bits());
            assert_eq!(cloud.centers[i].z.to_bits(), out.centers[i].z.to_bits());
            assert_eq!(cloud.rotations[i].w.to_bits(), out.rotations[i].w.to_bits());
            assert_eq!(cloud.rotations[i].x.to_bits(), out.rotations[i].x.to_bits());
        }
        assert_eq!(cloud.colors, out.colors);
        assert_eq!(cloud.opacities, out.opacities);
        assert_eq!(cloud.scales, out.scales);
    }

    #[test]
    fn lbs_single_vertex_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cloud = test_cloud(&mut rng, 10);
        let verts = [vec3(0.0, 0.0, 0.0)];
        let weights = blend_weights(&cloud.centers, &verts, 1).unwrap();
        let t = vec3(0.0, 0.0, 0.1);
        let transforms = VertexTransforms {
            rotations: vec![UnitQuat::IDENTITY],
            translations: vec![t],
        };
        let out = apply_lbs(&cloud, &verts, &transforms, &weights).unwrap();
        for i in 0..cloud.len() {
            assert_eq!(out.centers[i], cloud.centers[i] + t);
        }
    }

    #[test]
    fn lbs_quarter_turn_about_origin() {
        let q = UnitQuat::from_axis_angle(vec3(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2)
            .unwrap();
        let cloud = GaussianCloud {
            centers: vec![vec3(1.0, 0.0, 0.0)],
            rotations: vec![UnitQuat::IDENTITY],
            scales: vec![vec3(0.01, 0.01, 0.01)],
            colors: vec![vec3(0.5, 0.5, 0.5)],
            opacities: vec![1.0],
        };
        let verts = [Vec3::ZERO];
        let weights = blend_weights(&cloud.centers, &verts, 1).unwrap();
        let transforms =
            VertexTransforms { rotations: vec![q], translations: vec![Vec3::ZERO] };
        let out = apply_lbs(&cloud, &verts, &transforms, &weights).unwrap();
        assert!((out.centers[0] - vec3(0.0, 1.0, 0.0)).norm() < 1e-9);
        assert!(out.rotations[0].angle_to(q) < 1e-9);
    }

    #[test]
    fn lbs_rejects_unnormalized_rows() {
        let cloud = GaussianCloud {
            centers: vec![Vec3::ZERO],
            rotations: vec![UnitQuat::IDENTITY],
            scales: vec![vec3(0.01, 0.01, 0.01)],
            colors: vec![Vec3::ZERO],
            opacities: vec![1.0],
        };
        let weights = BlendWeights { rows: vec![vec![(0, 0.5)]], num_vertices: 1 };
        let err = apply_lbs(
            &cloud,
            &[Vec3::ZERO],
            &VertexTransforms::identity(1),
            &weights,
        );
        assert!(err.is_err());
    }

    #[test]
    fn lbs_shared_rigid_motion_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let cloud = test_cloud(&mut rng, 15);
            let verts: Vec<Vec3> = (0..5).map(|_| rv(&mut rng, 1.0)).collect();
            let weights = blend_weights(&cloud.centers, &verts, 3).unwrap();
            let q = UnitQuat::from_axis_angle(rv(&mut rng, 1.0) + vec3(0.1, 0.0, 0.0), 0.4)
                .unwrap();
            let r = q.to_mat3();
            let t = rv(&mut rng, 0.5);
            // Shared rigid motion about the world origin: v ↦ R v + t, so per
            // vertex the local form is rotation q and translation chosen to
            // match: T_b = R v_b + t − v_b.
            let transforms = VertexTransforms {
                rotations: vec![q; 5],
                translations: verts.iter().map(|v| r.mul_vec(*v) + t - *v).collect(),
            };
            let out = apply_lbs(&cloud, &verts, &transforms, &weights).unwrap();
            for i in 0..cloud.len() {
                let expect = r.mul_vec(cloud.centers[i]) + t;
                assert!((out.centers[i] - expect).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn densify_static_trajectory_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cloud = test_cloud(&mut rng, 12);
        let verts: Vec<Vec3> = cloud.centers[..4].to_vec();
        let traj = vec![verts.clone(); 6];
        let frames = densify_rollout(&cloud, &traj, DensifyOptions::default()).unwrap();
        assert_eq!(frames.len(), 6);
        for f in &frames {
            assert_eq!(f, &cloud);
        }
    }

    #[test]
    fn densify_translation_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cloud = test_cloud(&mut rng, 12);
        let verts: Vec<Vec3> = (0..4).map(|_| rv(&mut rng, 0.5)).collect();
        let step = vec3(0.01, -0.02, 0.005);
        let traj: Vec<Vec<Vec3>> = (0..8)
            .map(|t| verts.iter().map(|v| *v + step * t as f64).collect())
            .collect();
        let frames = densify_rollout(
            &cloud,
            &traj,
            DensifyOptions { edge_radius: 10.0, top_k: 3 },
        )
        .unwrap();
        for (t, f) in frames.iter().enumerate() {
            for i in 0..cloud.len() {
                let expect = cloud.centers[i] + step * t as f64;
                assert!((f.centers[i] - expect).norm() < 1e-6);
            }
            assert_eq!(f.colors, cloud.colors);
            assert_eq!(f.opacities, cloud.opacities);
            assert_eq!(f.scales, cloud.scales);
        }
    }

    #[test]
    fn densify_accumulates_global_spin() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cloud = test_cloud(&mut rng, 10);
        let base: Vec<Vec3> = (0..6).map(|_| rv(&mut rng, 0.6)).collect();
        let per_step =
            UnitQuat::from_axis_angle(vec3(0.0, 0.0, 1.0), 0.05).unwrap();
        let mut traj = vec![base.clone()];
        let mut q_total = UnitQuat::IDENTITY;
        for _ in 0..10 {
            q_total = per_step.compose(q_total);
            let r: Mat3 = q_total.to_mat3();
            traj.push(base.iter().map(|v| r.mul_vec(*v)).collect());
        }
        let frames = densify_rollout(
            &cloud,
            &traj,
            DensifyOptions { edge_radius: 10.0, top_k: 4 },
        )
        .unwrap();
        let last = frames.last().unwrap();
        for i in 0..cloud.len() {
            let expect = q_total.compose(cloud.rotations[i]);
            assert!(
                last.rotations[i].angle_to(expect) < 1e-4,
                "rotation drifted by {}",
                last.rotations[i].angle_to(expect)
            );
        }
    }

    #[test]
    fn densify_rejects_nan_with_frame_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cloud = test_cloud(&mut rng, 5);
        let verts: Vec<Vec3> = (0..3).map(|_| rv(&mut rng, 0.5)).collect();
        let mut traj = vec![verts.clone(); 4];
        traj[2][1].y = f64::NAN;
        let err = densify_rollout(&cloud, &traj, DensifyOptions::default()).unwrap_err();
        assert!(err.to_string().contains("frame 2"), "message was {err}");
    }

    #[test]
    fn cloud_io_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cloud = test_cloud(&mut rng, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gcloud");
        cloud.save(&path).unwrap();
        let back = GaussianCloud::load(&path).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn cloud_validation_rejects_bad_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut cloud = test_cloud(&mut rng, 3);
        cloud.scales[1].y = 0.0;
        assert!(cloud.validate().is_err());
        let mut cloud = test_cloud(&mut rng, 3);
        cloud.opacities[0] = 1.5;
        assert!(cloud.validate().is_err());
        let mut cloud = test_cloud(&mut rng, 3);
        cloud.rotations[2].w += 0.1;
        assert!(cloud.validate().is_err());
    }

    #[test]
    fn ply_export_has_header_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cloud = test_cloud(&mut rng, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        cloud.export_ply(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert!(text.contains("element vertex 4"));
        assert_eq!(text.lines().count(), 10 + 4);
    }
}
