//! Seeded affine augmentation: rotation, shear, zoom, shift and horizontal
//! flip, composed about the image center and applied by inverse mapping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute shear angle in degrees.
    pub shear_deg: f64,
    /// Zoom factor is drawn from `[1 - zoom_frac, 1 + zoom_frac]`.
    pub zoom_frac: f64,
    /// Maximum translation per axis as a fraction of that side.
    pub shift_frac: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            shear_deg: 5.0,
            zoom_frac: 0.1,
            shift_frac: 0.1,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            zoom_frac: 0.0,
            shift_frac: 0.0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation_deg, self.shear_deg, self.zoom_frac, self.shift_frac];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::validation(format!("augmentation ranges must be >= 0: {self:?}")));
        }
        if self.zoom_frac >= 1.0 {
            return Err(Error::validation("zoom_frac must be < 1"));
        }
        if self.shear_deg >= 90.0 {
            return Err(Error::validation("shear_deg must be < 90"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::validation("hflip_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The random draws behind one transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub zoom: f64,
    /// Fractions of width / height.
    pub shift_x: f64,
    pub shift_y: f64,
    pub flip: bool,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            zoom: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
            flip: false,
        }
    }
}

fn symmetric(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.gen_range(-half_width..=half_width)
    }
}

/// Draws rotation, shear, zoom, x shift, y shift and flip, in that order.
pub fn sample_params(config: &AugmentConfig, rng: &mut impl Rng) -> TransformParams {
    let rotation_deg = symmetric(rng, config.rotation_deg);
    let shear_deg = symmetric(rng, config.shear_deg);
    let zoom = 1.0 + symmetric(rng, config.zoom_frac);
    let shift_x = symmetric(rng, config.shift_frac);
    let shift_y = symmetric(rng, config.shift_frac);
    let flip = config.hflip_prob > 0.0 && rng.gen_bool(config.hflip_prob);
    TransformParams {
        rotation_deg,
        shear_deg,
        zoom,
        shift_x,
        shift_y,
        flip,
    }
}

/// A 2×3 matrix mapping output pixel coordinates `(x, y)` (column, row) to
/// input coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 2],
}

type Mat2 = [[f64; 2]; 2];

fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

fn inverse(a: &Mat2) -> Option<Mat2> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() <= 1e-9 || !det.is_finite() {
        return None;
    }
    Some([
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ])
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// Inverse mapping for the forward composition
    /// flip ∘ shift ∘ zoom ∘ shear ∘ rotate about the center of an
    /// `height × width` image. Positive rotation turns content
    /// counter-clockwise as displayed (rows growing downwards).
    pub fn from_params(p: &TransformParams, height: usize, width: usize) -> Result<Self> {
        let theta = p.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let rotate: Mat2 = [[c, s], [-s, c]];
        let shear: Mat2 = [[1.0, p.shear_deg.to_radians().tan()], [0.0, 1.0]];
        let zoom: Mat2 = [[p.zoom, 0.0], [0.0, p.zoom]];
        let linear = mul(&zoom, &mul(&shear, &rotate));
        let inv = inverse(&linear).ok_or_else(|| {
            Error::validation(format!("transform {p:?} has a singular linear part"))
        })?;
        let fx = if p.flip { -1.0 } else { 1.0 };
        // in = inv · (flip(out) - t), flip being its own inverse.
        let m: Mat2 = [[inv[0][0] * fx, inv[0][1]], [inv[1][0] * fx, inv[1][1]]];
        let tx = p.shift_x * width as f64;
        let ty = p.shift_y * height as f64;
        let off = [
            -(inv[0][0] * tx + inv[0][1] * ty),
            -(inv[1][0] * tx + inv[1][1] * ty),
        ];
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        Ok(Self {
            matrix: [
                [m[0][0], m[0][1], cx - (m[0][0] * cx + m[0][1] * cy) + off[0]],
                [m[1][0], m[1][1], cy - (m[1][0] * cx + m[1][1] * cy) + off[1]],
            ],
        })
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    #[inline]
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }
}

/// Draws a transform for an image of the given size.
pub fn sample_transform(
    config: &AugmentConfig,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<AffineTransform> {
    config.validate()?;
    AffineTransform::from_params(&sample_params(config, rng), height, width)
}

/// Independent generator for sub-stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// Resamples an `[H, W, C]` image: `output(x) = image(t · x)`, with `fill`
/// outside the input.
pub fn apply_affine(image: &Tensor, t: &AffineTransform, interp: Interpolation, fill: f64) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::dim("augment image rank", 3, image.rank()));
    }
    if t.determinant().abs() <= 1e-9 || t.matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-invertible transform {:?}", t.matrix)));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = vec![fill; h * w * c];
    let pixel = |x: i64, y: i64| -> Option<&[f64]> {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            None
        } else {
            let off = (y as usize * w + x as usize) * c;
            Some(&src[off..off + c])
        }
    };
    for oy in 0..h {
        for ox in 0..w {
            let (sx, sy) = t.map(ox as f64, oy as f64);
            let dst = &mut out[(oy * w + ox) * c..][..c];
            match interp {
                Interpolation::Nearest => {
                    if let Some(px) = pixel(sx.round() as i64, sy.round() as i64) {
                        dst.copy_from_slice(px);
                    }
                }
                Interpolation::Bilinear => {
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    let taps = [
                        (x0, y0, (1.0 - fx) * (1.0 - fy)),
                        (x0 + 1, y0, fx * (1.0 - fy)),
                        (x0, y0 + 1, (1.0 - fx) * fy),
                        (x0 + 1, y0 + 1, fx * fy),
                    ];
                    if fx == 0.0 && fy == 0.0 {
                        if let Some(px) = pixel(x0, y0) {
                            dst.copy_from_slice(px);
                        }
                        continue;
                    }
                    dst.fill(0.0);
                    for (x, y, weight) in taps {
                        if weight == 0.0 {
                            continue;
                        }
                        match pixel(x, y) {
                            Some(px) => {
                                for (d, v) in dst.iter_mut().zip(px) {
                                    *d += weight * v;
                                }
                            }
                            None => {
                                for d in dst.iter_mut() {
                                    *d += weight * fill;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Augments every image of an `[N, H, W, C]` batch. Image `i` draws from
/// sub-stream `streams[i]` of `seed`, so results do not depend on batching.
pub fn augment_batch(
    images: &Tensor,
    config: &AugmentConfig,
    seed: u64,
    streams: &[u64],
) -> Result<Tensor> {
    config.validate()?;
    if images.rank() != 4 {
        return Err(Error::dim("augment batch rank", 4, images.rank()));
    }
    if streams.len() != images.batch() {
        return Err(Error::dim("augment streams", images.batch(), streams.len()));
    }
    let (h, w, c) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let mut out = Vec::with_capacity(images.len());
    for (i, &stream) in streams.iter().enumerate() {
        let mut rng = stream_rng(seed, stream);
        let t = sample_transform(config, h, w, &mut rng)?;
        let img = Tensor::new(vec![h, w, c], images.row(i).to_vec())?;
        out.extend(apply_affine(&img, &t, Interpolation::Bilinear, 0.0)?.into_data());
    }
    Tensor::new(images.shape().to_vec(), out)
}
