//! Per-pixel feature maps.
//!
//! A fixed filter bank stands in for a learned backbone: Lab colour and Sobel
//! gradient magnitude/orientation, each at a set of Gaussian scales, average
//! pooled by `stride` and standardised per channel. Externally computed
//! features can be loaded from the FEAT binary format instead.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::color::image_to_lab;
use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, sobel};
use crate::image::ImageGrid;
use crate::scalar::Scalar;

/// H×W×D feature tensor, pixel-major (`data[(y·W + x)·D + d]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature map must be non-empty, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "feature payload has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Map where every pixel carries the same vector.
    pub fn uniform(height: usize, width: usize, feature: &[T]) -> Result<Self> {
        let data = feature
            .iter()
            .copied()
            .cycle()
            .take(height * width * feature.len())
            .collect();
        Self::new(height, width, feature.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[T] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[T] {
        self.pixel(y * self.width + x)
    }

    /// Channel `d` as a row-major plane.
    pub fn channel(&self, d: usize) -> Vec<T> {
        self.data
            .iter()
            .skip(d)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: crate::scalar::cast_slice(&self.data),
        }
    }

    /// Encodes in the FEAT1 format: magic, u32 height/width/channels
    /// (little-endian), then row-major f32 payload.
    pub fn to_feat_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.data.len() * 4);
        out.extend_from_slice(FEAT_MAGIC);
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_feat_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FEAT_MAGIC.len() || &bytes[..FEAT_MAGIC.len()] != FEAT_MAGIC {
            return Err(Error::format(0, "missing FEAT1 magic"));
        }
        if bytes.len() < 17 {
            return Err(Error::format(bytes.len(), "truncated FEAT header"));
        }
        let dim =
            |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, d) = (dim(0), dim(1), dim(2));
        let expected = h * w * d * 4;
        let actual = bytes.len() - 17;
        if actual != expected {
            return Err(Error::format(
                17,
                format!(
                    "header declares {h}x{w}x{d} ({expected} payload bytes) but payload has {actual} bytes ({} values)",
                    actual / 4
                ),
            ));
        }
        let data = bytes[17..]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Self::new(h, w, d, data).map_err(|e| Error::format(17, e.to_string()))
    }
}

const FEAT_MAGIC: &[u8] = b"FEAT1";

pub fn save_features<T: Scalar>(features: &FeatureMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, features.to_feat_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_features<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMap<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_feat_bytes(&bytes)
}

/// Filter bank configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterBankSpec {
    pub gaussian_sigmas: Vec<f64>,
    pub include_gradients: bool,
    pub include_color: bool,
    pub stride: usize,
}

impl Default for FilterBankSpec {
    fn default() -> Self {
        Self {
            gaussian_sigmas: vec![0.0, 2.0],
            include_gradients: true,
            include_color: true,
            stride: 1,
        }
    }
}

impl FilterBankSpec {
    pub fn channel_count(&self) -> usize {
        let per_scale = 3 * self.include_color as usize + 2 * self.include_gradients as usize;
        per_scale * self.gaussian_sigmas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.channel_count() == 0 {
            return Err(Error::Config("filter bank produces no channels".into()));
        }
        if let Some(s) = self
            .gaussian_sigmas
            .iter()
            .find(|s| !s.is_finite() || **s < 0.0)
        {
            return Err(Error::Config(format!("invalid gaussian sigma {s}")));
        }
        Ok(())
    }

    /// Output spatial size for an input of `height × width`.
    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }
}

/// Filter responses before standardisation, after pooling.
///
/// Channel layout, repeated for every sigma: `L, a, b` (when colour is on)
/// then `|∇|, atan2(gy, gx)` of the blurred Rec.601 luma (when gradients are on).
pub fn extract_raw_features(image: &ImageGrid, spec: &FilterBankSpec) -> Result<FeatureMap<f64>> {
    spec.validate()?;
    let (h, w) = (image.height(), image.width());
    if spec.stride > h.min(w) {
        return Err(Error::Config(format!(
            "stride {} larger than image side ({h}x{w})",
            spec.stride
        )));
    }
    let lab = image_to_lab(image);
    let lab_planes = [
        lab.iter().map(|c| c.l).collect::<Vec<_>>(),
        lab.iter().map(|c| c.a).collect::<Vec<_>>(),
        lab.iter().map(|c| c.b).collect::<Vec<_>>(),
    ];
    let luma = image.luma();

    let mut planes: Vec<Vec<f64>> = Vec::with_capacity(spec.channel_count());
    for &sigma in &spec.gaussian_sigmas {
        if spec.include_color {
            for p in &lab_planes {
                planes.push(gaussian_blur(p, h, w, sigma));
            }
        }
        if spec.include_gradients {
            let g = gaussian_blur(&luma, h, w, sigma);
            let (gx, gy) = sobel(&g, h, w);
            planes.push(
                gx.iter()
                    .zip(&gy)
                    .map(|(a, b)| (a * a + b * b).sqrt())
                    .collect(),
            );
            planes.push(gx.iter().zip(&gy).map(|(a, b)| b.atan2(*a)).collect());
        }
    }

    let (oh, ow) = spec.output_dims(h, w);
    let d = planes.len();
    let mut data = vec![0.0; oh * ow * d];
    for (c, plane) in planes.iter().enumerate() {
        let pooled = average_pool(plane, h, w, spec.stride);
        for (i, v) in pooled.into_iter().enumerate() {
            data[i * d + c] = v;
        }
    }
    FeatureMap::new(oh, ow, d, data)
}

/// Extracts standardised features: zero mean and unit variance per channel,
/// constant channels set to zero.
pub fn extract_features<T: Scalar>(
    image: &ImageGrid,
    spec: &FilterBankSpec,
) -> Result<FeatureMap<T>> {
    let mut raw = extract_raw_features(image, spec)?;
    standardize(&mut raw);
    Ok(raw.cast())
}

pub fn standardize(map: &mut FeatureMap<f64>) {
    let n = map.len() as f64;
    let d = map.channels;
    for c in 0..d {
        let mean = map.data.iter().skip(c).step_by(d).sum::<f64>() / n;
        let var = map
            .data
            .iter()
            .skip(c)
            .step_by(d)
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let scale = if var > 1e-12 * (1.0 + mean * mean) {
            1.0 / var.sqrt()
        } else {
            0.0
        };
        for v in map.data.iter_mut().skip(c).step_by(d) {
            *v = (*v - mean) * scale;
        }
    }
}

/// Block average with ceil-sized output; partial edge blocks average the
/// pixels they cover.
fn average_pool(plane: &[f64], height: usize, width: usize, stride: usize) -> Vec<f64> {
    if stride == 1 {
        return plane.to_vec();
    }
    let (oh, ow) = (height.div_ceil(stride), width.div_ceil(stride));
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = oy * stride..((oy + 1) * stride).min(height);
            let xs = ox * stride..((ox + 1) * stride).min(width);
            let n = (ys.len() * xs.len()) as f64;
            let mut acc = 0.0;
            for y in ys {
                for x in xs.clone() {
                    acc += plane[y * width + x];
                }
            }
            out[oy * ow + ox] = acc / n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize, cell: usize) -> ImageGrid {
        let mut data = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let v = if (x / cell + y / cell).is_multiple_of(2) {
                    0
                } else {
                    255
                };
                data.extend_from_slice(&[v, v, v]);
            }
        }
        ImageGrid::new(n, n, data).unwrap()
    }

    #[test]
    fn default_has_ten_channels() {
        assert_eq!(FilterBankSpec::default().channel_count(), 10);
    }

    #[test]
    fn constant_image_gives_zero_gradients() {
        let img = ImageGrid::filled(8, 9, [90, 120, 30]).unwrap();
        let f: FeatureMap<f64> = extract_features(&img, &FilterBankSpec::default()).unwrap();
        assert_eq!(f.channels(), 10);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic() {
        let img = checkerboard(9, 2);
        let a: FeatureMap<f32> = extract_features(&img, &FilterBankSpec::default()).unwrap();
        let b: FeatureMap<f32> = extract_features(&img, &FilterBankSpec::default()).unwrap();
        assert_eq!(a.to_feat_bytes(), b.to_feat_bytes());
    }

    #[test]
    fn checkerboard_gradient_matches_hand_sobel() {
        // 4x4 checkerboard of 2x2 cells (luma 0 / 255); the oracle evaluates the
        // Sobel stencil literally with reflect-101 padding.
        let img = checkerboard(4, 2);
        let spec = FilterBankSpec {
            gaussian_sigmas: vec![0.0],
            include_gradients: true,
            include_color: false,
            stride: 1,
        };
        let raw = extract_raw_features(&img, &spec).unwrap();
        let v = |x: isize, y: isize| -> f64 {
            let m = |i: isize| -> isize {
                if i < 0 {
                    -i
                } else if i > 3 {
                    6 - i
                } else {
                    i
                }
            };
            let (x, y) = (m(x), m(y));
            if (x / 2 + y / 2) % 2 == 0 {
                0.0
            } else {
                255.0
            }
        };
        for y in 0..4isize {
            for x in 0..4isize {
                let gx = (v(x + 1, y - 1) + 2.0 * v(x + 1, y) + v(x + 1, y + 1))
                    - (v(x - 1, y - 1) + 2.0 * v(x - 1, y) + v(x - 1, y + 1));
                let gy = (v(x - 1, y + 1) + 2.0 * v(x, y + 1) + v(x + 1, y + 1))
                    - (v(x - 1, y - 1) + 2.0 * v(x, y - 1) + v(x + 1, y - 1));
                let mag = (gx * gx + gy * gy).sqrt();
                let got = raw.at(x as usize, y as usize)[0];
                assert!((got - mag).abs() < 1e-9, "({x},{y}) got {got} want {mag}");
            }
        }
        // by hand at (1,1): Gx = (255+510+0) - (0+0+255) = 510, Gy likewise
        let got = raw.at(1, 1)[0];
        assert!((got - 510.0 * 2f64.sqrt()).abs() < 1e-9, "{got}");
        // reflect-101 mirrors the border column onto its inner neighbour
        assert_eq!(raw.at(0, 0)[0], 0.0);
    }

    #[test]
    fn standardisation_statistics() {
        let img = checkerboard(12, 3);
        let f: FeatureMap<f64> = extract_features(&img, &FilterBankSpec::default()).unwrap();
        for c in 0..f.channels() {
            let ch = f.channel(c);
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!(
                var == 0.0 || (var - 1.0).abs() < 1e-4,
                "channel {c} var {var}"
            );
        }
    }

    #[test]
    fn stride_pools_and_validates() {
        let img = checkerboard(8, 2);
        let spec = FilterBankSpec {
            stride: 3,
            ..Default::default()
        };
        let f: FeatureMap<f64> = extract_features(&img, &spec).unwrap();
        assert_eq!((f.height(), f.width()), (3, 3));
        let spec = FilterBankSpec {
            stride: 9,
            ..Default::default()
        };
        assert!(matches!(
            extract_features::<f64>(&img, &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn interior_translation_equivariance() {
        let mut base = Vec::new();
        for y in 0..20usize {
            for x in 0..20usize {
                let v = ((x * 37 + y * 91 + x * y * 7) % 251) as u8;
                base.extend_from_slice(&[v, v.wrapping_mul(3), 255 - v]);
            }
        }
        let a = ImageGrid::new(20, 20, base).unwrap();
        let (dx, dy) = (2usize, 3usize);
        let mut b = ImageGrid::filled(20, 20, [10, 200, 40]).unwrap();
        for y in 0..20 - dy {
            for x in 0..20 - dx {
                b.set_pixel(x + dx, y + dy, a.pixel(x, y));
            }
        }
        let spec = FilterBankSpec::default();
        let fa = extract_raw_features(&a, &spec).unwrap();
        let fb = extract_raw_features(&b, &spec).unwrap();
        // sigma 2 kernel radius 6 plus the 3x3 Sobel footprint
        let m = 8;
        for y in m..20 - dy - m {
            for x in m..20 - dx - m {
                let pa = fa.at(x, y);
                let pb = fb.at(x + dx, y + dy);
                for (u, v) in pa.iter().zip(pb) {
                    assert!((u - v).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn feat_known_bytes() {
        let mut bytes = b"FEAT1".to_vec();
        for v in [2u32, 2, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let f: FeatureMap<f32> = FeatureMap::from_feat_bytes(&bytes).unwrap();
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.at(0, 1), &[3.0]);
        assert_eq!(f.to_feat_bytes(), bytes);
    }

    #[test]
    fn feat_payload_mismatch() {
        let f = FeatureMap::<f32>::uniform(1, 1, &[0.5; 16]).unwrap();
        let mut bytes = f.to_feat_bytes();
        bytes.truncate(bytes.len() - 4);
        let err = FeatureMap::<f32>::from_feat_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("15 values"), "{err}");
    }

    #[test]
    fn feat_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.feat");
        let f = FeatureMap::<f32>::new(2, 3, 2, (0..12).map(|v| v as f32 * 0.25 - 1.0).collect())
            .unwrap();
        save_features(&f, &p).unwrap();
        assert_eq!(load_features::<f32>(&p).unwrap(), f);
    }
}
