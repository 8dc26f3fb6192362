use crate::geometry::Box3;

use super::volume::Volume;

/// Length of [`AnchorFeatures`].
///
/// | index  | feature                                                      |
/// |--------|--------------------------------------------------------------|
/// | 0      | mean intensity                                               |
/// | 1      | intensity standard deviation                                 |
/// | 2      | center-minus-border contrast (inner half box vs. the rest)   |
/// | 3      | mean gradient magnitude                                      |
/// | 4      | bright-voxel fraction                                        |
/// | 5..8   | bright centroid offset from the anchor center / anchor size |
/// | 8..11  | ln(bright extent estimate / anchor size), per axis           |
/// | 11..14 | ln(anchor size / 10), per axis                               |
/// | 14     | fraction of the anchor inside the volume                     |
/// | 15     | standard deviation of bright-voxel intensity                 |
/// | 16     | fraction of bright voxels on the bright-region surface       |
pub const FEATURE_DIM: usize = 17;

/// Voxels above this intensity count as bright.
const BRIGHT: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorFeatures(pub [f64; FEATURE_DIM]);

/// Feature extraction with per-volume gradient and surface maps cached.
pub struct FeatureExtractor<'a> {
    volume: &'a Volume,
    gradient: Vec<f32>,
    surface: Vec<bool>,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(volume: &'a Volume) -> Self {
        let [nx, ny, nz] = volume.shape;
        let n = volume.data.len();
        let mut gradient = vec![0.0f32; n];
        let mut surface = vec![false; n];
        let at = |x: usize, y: usize, z: usize| volume.get(x, y, z);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let diff = |lo: f32, hi: f32, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f32 };
                    let (x0, x1) = (x.saturating_sub(1), (x + 1).min(nx - 1));
                    let (y0, y1) = (y.saturating_sub(1), (y + 1).min(ny - 1));
                    let (z0, z1) = (z.saturating_sub(1), (z + 1).min(nz - 1));
                    let gx = diff(at(x0, y, z), at(x1, y, z), x1 - x0);
                    let gy = diff(at(x, y0, z), at(x, y1, z), y1 - y0);
                    let gz = diff(at(x, y, z0), at(x, y, z1), z1 - z0);
                    let i = volume.index(x, y, z);
                    gradient[i] = (gx * gx + gy * gy + gz * gz).sqrt();
                    if volume.data[i] > BRIGHT {
                        let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                        surface[i] = edge
                            || [at(x - 1, y, z), at(x + 1, y, z), at(x, y - 1, z), at(x, y + 1, z), at(x, y, z - 1), at(x, y, z + 1)]
                                .iter()
                                .any(|&v| v <= BRIGHT);
                    }
                }
            }
        }
        Self {
            volume,
            gradient,
            surface,
        }
    }

    pub fn extract(&self, anchor: &Box3) -> AnchorFeatures {
        let vol = self.volume;
        let (lo, hi) = (anchor.lo(), anchor.hi());
        let size = anchor.size();
        let center = anchor.center();
        let range = |k: usize| {
            let n = vol.shape[k] as f64;
            let a = (lo[k] - 0.5).ceil().clamp(0.0, n) as usize;
            let b = (hi[k] - 0.5).ceil().clamp(0.0, n) as usize;
            (a, b)
        };
        let (rx, ry, rz) = (range(0), range(1), range(2));

        let mut f = [0.0; FEATURE_DIM];
        for k in 0..3 {
            f[8 + k] = (1.0 / size[k]).ln();
            f[11 + k] = (size[k] / 10.0).ln();
        }
        if rx.0 >= rx.1 || ry.0 >= ry.1 || rz.0 >= rz.1 {
            return AnchorFeatures(f);
        }

        let (mut n, mut sum, mut sum2, mut grad) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_in, mut sum_in) = (0.0, 0.0);
        let (mut nb, mut bsum, mut bsum2, mut nsurf) = (0.0, 0.0, 0.0, 0.0);
        let mut bp = [0.0; 3];
        let mut bp2 = [0.0; 3];
        for z in rz.0..rz.1 {
            let dz = (z as f64 + 0.5 - center[2]) / size[2];
            for y in ry.0..ry.1 {
                let dy = (y as f64 + 0.5 - center[1]) / size[1];
                for x in rx.0..rx.1 {
                    let dx = (x as f64 + 0.5 - center[0]) / size[0];
                    let i = vol.index(x, y, z);
                    let v = vol.data[i] as f64;
                    n += 1.0;
                    sum += v;
                    sum2 += v * v;
                    grad += self.gradient[i] as f64;
                    if dx.abs() <= 0.25 && dy.abs() <= 0.25 && dz.abs() <= 0.25 {
                        n_in += 1.0;
                        sum_in += v;
                    }
                    if vol.data[i] > BRIGHT {
                        nb += 1.0;
                        bsum += v;
                        bsum2 += v * v;
                        if self.surface[i] {
                            nsurf += 1.0;
                        }
                        for (k, d) in [dx, dy, dz].into_iter().enumerate() {
                            bp[k] += d;
                            bp2[k] += d * d;
                        }
                    }
                }
            }
        }
        let mean = sum / n;
        f[0] = mean;
        f[1] = (sum2 / n - mean * mean).max(0.0).sqrt();
        let n_out = n - n_in;
        if n_in > 0.0 && n_out > 0.0 {
            f[2] = sum_in / n_in - (sum - sum_in) / n_out;
        }
        f[3] = grad / n;
        f[4] = nb / n;
        if nb > 0.0 {
            for k in 0..3 {
                let m = bp[k] / nb;
                f[5 + k] = m;
                // Uniform ellipsoid: variance along an axis is r²/5.
                let sigma = (bp2[k] / nb - m * m).max(0.0).sqrt() * size[k];
                f[8 + k] = ((2.0 * 5f64.sqrt() * sigma).max(1.0) / size[k]).ln();
            }
            let bmean = bsum / nb;
            f[15] = (bsum2 / nb - bmean * bmean).max(0.0).sqrt();
            f[16] = nsurf / nb;
        }
        f[14] = (n / anchor.volume()).min(1.0);
        AnchorFeatures(f)
    }
}

/// One-off extraction; prefer [`FeatureExtractor`] for many anchors on one volume.
pub fn extract_features(volume: &Volume, anchor: &Box3) -> AnchorFeatures {
    FeatureExtractor::new(volume).extract(anchor)
}
