//! Forward splat renderer: projects each Gaussian to a screen-space ellipse
//! and alpha-composites front to back after a global depth sort.

use std::path::Path;

use crate::gaussians::GaussianCloud;
use crate::geom::{vec3, Mat3, RigidTransform, UnitQuat, Vec3};
use crate::{Error, Result};

/// Camera-space points closer than this are culled rather than projected.
pub const NEAR_PLANE: f64 = 1e-4;

/// Mahalanobis² cutoff for the splat footprint (3σ).
const FOOTPRINT_CUTOFF: f64 = 9.0;

/// Pinhole camera: +x right, +y down, +z forward in camera space; pixel
/// centers sit at integer coordinates.
#[derive(Clone, Copy, Debug)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: RigidTransform,
    ) -> Result<CameraModel> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid("camera: focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera: resolution must be at least 1x1"));
        }
        Ok(CameraModel { fx, fy, cx, cy, width, height, world_to_camera })
    }

    /// Camera at `eye` looking toward `target`, `up` fixing the roll, square
    /// pixels with focal length `focal`, principal point at the image center.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<CameraModel> {
        let forward = (target - eye)
            .try_normalized()
            .ok_or_else(|| Error::invalid("camera: eye and target coincide"))?;
        let right = forward
            .cross(up)
            .try_normalized()
            .ok_or_else(|| Error::invalid("camera: up parallel to view direction"))?;
        let down = forward.cross(right);
        let rotation = Mat3([right.to_array(), down.to_array(), forward.to_array()]);
        let translation = -rotation.mul_vec(eye);
        CameraModel::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            RigidTransform { rotation, translation },
        )
    }

    /// Pixel coordinates and camera-space depth; None behind the near plane.
    pub fn project_point(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera.apply(p);
        if !(c.z > NEAR_PLANE) {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// Jacobian of the pinhole projection at camera-space point `c`.
    fn projection_jacobian(&self, c: Vec3) -> [[f64; 3]; 2] {
        [
            [self.fx / c.z, 0.0, -self.fx * c.x / (c.z * c.z)],
            [0.0, self.fy / c.z, -self.fy * c.y / (c.z * c.z)],
        ]
    }
}

/// World-space covariance of one Gaussian: R diag(s²) Rᵀ.
pub fn covariance(rotation: UnitQuat, scale: Vec3) -> Mat3 {
    let r = rotation.to_mat3();
    let mut rs = [[0.0; 3]; 3];
    let s2 = [scale.x * scale.x, scale.y * scale.y, scale.z * scale.z];
    for i in 0..3 {
        for j in 0..3 {
            rs[i][j] = r.0[i][j] * s2[j];
        }
    }
    Mat3(rs).mul_mat(&r.transpose())
}

/// Screen-space covariance Σ' = J W Σ Wᵀ Jᵀ, where W is the rotation part of
/// the world→camera transform and J the projection Jacobian. The result is
/// symmetrized against rounding asymmetry.
pub fn project_covariance(sigma: &Mat3, w: &RigidTransform, j: &[[f64; 3]; 2]) -> [[f64; 2]; 2] {
    let cam = w.rotation.mul_mat(sigma).mul_mat(&w.rotation.transpose());
    let mut jc = [[0.0; 3]; 2];
    for r in 0..2 {
        for col in 0..3 {
            for k in 0..3 {
                jc[r][col] += j[r][k] * cam.0[k][col];
            }
        }
    }
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for col in 0..2 {
            for k in 0..3 {
                out[r][col] += jc[r][k] * j[col][k];
            }
        }
    }
    let off = 0.5 * (out[0][1] + out[1][0]);
    out[0][1] = off;
    out[1][0] = off;
    out
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub background: Vec3,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { background: vec3(0.5, 0.5, 0.5) }
    }
}

/// Composited output buffers, row-major with pixel (x, y) at `y * width + x`.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// H×W×3 in [0,1].
    pub rgb: Vec<f64>,
    /// H×W coverage in [0,1].
    pub alpha: Vec<f64>,
    /// H×W camera-space depth of the first contributing Gaussian, in meters;
    /// +inf where nothing contributed.
    pub depth: Vec<f64>,
    /// Gaussians dropped for a singular screen-space covariance.
    pub skipped: usize,
    /// Gaussians behind the near plane.
    pub culled: usize,
}

impl RenderedFrame {
    pub fn rgb_at(&self, x: usize, y: usize) -> Vec3 {
        let i = (y * self.width + x) * 3;
        vec3(self.rgb[i], self.rgb[i + 1], self.rgb[i + 2])
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    /// 8-bit RGBA PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut buf = Vec::with_capacity(self.width * self.height * 4);
        for i in 0..self.width * self.height {
            buf.push(to8(self.rgb[i * 3]));
            buf.push(to8(self.rgb[i * 3 + 1]));
            buf.push(to8(self.rgb[i * 3 + 2]));
            buf.push(to8(self.alpha[i]));
        }
        let img = image::RgbaImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized to width*height*4");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(format!("{}: png write failed: {e}", path.display())))
    }

    /// 8-bit grayscale silhouette PNG from the alpha channel.
    pub fn save_alpha_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> =
            self.alpha.iter().map(|a| (a.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized to width*height");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(format!("{}: png write failed: {e}", path.display())))
    }
}

struct Splat {
    z: f64,
    index: usize,
    u: f64,
    v: f64,
    /// Inverse 2×2 covariance (a, b, c) for [[a, b], [b, c]].
    inv: (f64, f64, f64),
    radius: (f64, f64),
    color: Vec3,
    opacity: f64,
}

pub fn render(cloud: &GaussianCloud, camera: &CameraModel) -> Result<RenderedFrame> {
    render_with(cloud, camera, &RenderOptions::default())
}

pub fn render_with(
    cloud: &GaussianCloud,
    camera: &CameraModel,
    opts: &RenderOptions,
) -> Result<RenderedFrame> {
    cloud.validate()?;
    let mut splats = Vec::with_capacity(cloud.len());
    let mut skipped = 0usize;
    let mut culled = 0usize;
    for i in 0..cloud.len() {
        let cam = camera.world_to_camera.apply(cloud.centers[i]);
        if !(cam.z > NEAR_PLANE) {
            culled += 1;
            continue;
        }
        let sigma = covariance(cloud.rotations[i], cloud.scales[i]);
        let j = camera.projection_jacobian(cam);
        let cov = project_covariance(&sigma, &camera.world_to_camera, &j);
        let (a, b, c) = (cov[0][0], cov[0][1], cov[1][1]);
        let det = a * c - b * b;
        if !(det > 0.0 && a > 0.0 && det.is_finite()) {
            skipped += 1;
            continue;
        }
        splats.push(Splat {
            z: cam.z,
            index: i,
            u: camera.fx * cam.x / cam.z + camera.cx,
            v: camera.fy * cam.y / cam.z + camera.cy,
            inv: (c / det, -b / det, a / det),
            radius: (3.0 * a.sqrt(), 3.0 * c.sqrt()),
            color: cloud.colors[i],
            opacity: cloud.opacities[i],
        });
    }
    if skipped > 0 {
        log::warn!("render: skipped {skipped} gaussians with singular screen covariance");
    }
    // Global front-to-back order; ties resolved by input index so the result
    // is independent of input permutation for distinct depths and canonical
    // for coincident ones.
    splats.sort_by(|s, t| s.z.total_cmp(&t.z).then(s.index.cmp(&t.index)));

    let (w, h) = (camera.width, camera.height);
    let mut acc = vec![0.0f64; w * h * 3];
    let mut trans = vec![1.0f64; w * h];
    let mut depth = vec![f64::INFINITY; w * h];
    for s in &splats {
        let x0 = (s.u - s.radius.0).ceil().max(0.0) as usize;
        let x1 = (s.u + s.radius.0).floor().min(w as f64 - 1.0);
        let y0 = (s.v - s.radius.1).ceil().max(0.0) as usize;
        let y1 = (s.v + s.radius.1).floor().min(h as f64 - 1.0);
        if x1 < x0 as f64 || y1 < y0 as f64 || x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - s.u;
                let dy = py as f64 - s.v;
                let m2 = s.inv.0 * dx * dx + 2.0 * s.inv.1 * dx * dy + s.inv.2 * dy * dy;
                if m2 > FOOTPRINT_CUTOFF {
                    continue;
                }
                let alpha = s.opacity * (-0.5 * m2).exp();
                if alpha <= 0.0 {
                    continue;
                }
                let pix = py * w + px;
                if depth[pix].is_infinite() {
                    depth[pix] = s.z;
                }
                let weight = alpha * trans[pix];
                acc[pix * 3] += s.color.x * weight;
                acc[pix * 3 + 1] += s.color.y * weight;
                acc[pix * 3 + 2] += s.color.z * weight;
                trans[pix] *= 1.0 - alpha;
            }
        }
    }

    let mut rgb = acc;
    let mut alpha = vec![0.0f64; w * h];
    for pix in 0..w * h {
        let t = trans[pix];
        rgb[pix * 3] += opts.background.x * t;
        rgb[pix * 3 + 1] += opts.background.y * t;
        rgb[pix * 3 + 2] += opts.background.z * t;
        alpha[pix] = 1.0 - t;
    }
    Ok(RenderedFrame { width: w, height: h, rgb, alpha, depth, skipped, culled })
}
