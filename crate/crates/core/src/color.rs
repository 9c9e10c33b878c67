//! sRGB → CIELAB (D65) conversion.

use serde::{Deserialize, Serialize};

use crate::image::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub fn distance(&self, other: &LabColor) -> f64 {
        let dl = self.l - other.l;
        let da = self.a - other.a;
        let db = self.b - other.b;
        (dl * dl + da * da + db * db).sqrt()
    }
}

// Linear sRGB → XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

// Reference white = image of linear (1,1,1), so greys land exactly on a = b = 0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

#[inline]
fn linearize(c: u8) -> f64 {
    let v = c as f64 / 255.0;
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

pub fn srgb_to_lab(r: u8, g: u8, b: u8) -> LabColor {
    let lin = [linearize(r), linearize(g), linearize(b)];
    let xyz: [f64; 3] = std::array::from_fn(|i| {
        RGB_TO_XYZ[i][0] * lin[0] + RGB_TO_XYZ[i][1] * lin[1] + RGB_TO_XYZ[i][2] * lin[2]
    });
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    LabColor {
        l: (116.0 * fy - 16.0).clamp(0.0, 100.0),
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// Lab value of every pixel, row-major.
pub fn image_to_lab(image: &ImageGrid) -> Vec<LabColor> {
    image
        .data()
        .chunks_exact(3)
        .map(|p| srgb_to_lab(p[0], p[1], p[2]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let w = srgb_to_lab(255, 255, 255);
        assert!(
            (w.l - 100.0).abs() < 1e-9 && w.a.abs() < 1e-9 && w.b.abs() < 1e-9,
            "{w:?}"
        );
        let k = srgb_to_lab(0, 0, 0);
        assert_eq!((k.l, k.a, k.b), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mid_grey_matches_hand_evaluation() {
        // 128/255 = 0.50196; linear = ((0.50196 + 0.055)/1.055)^2.4 = 0.215861;
        // Y/Yn = 0.215861 → cbrt = 0.599871 → L = 116·0.599871 − 16 = 53.585
        let g = srgb_to_lab(128, 128, 128);
        assert!((g.l - 53.585).abs() < 1e-2, "{g:?}");
        assert!(g.a.abs() < 1e-2 && g.b.abs() < 1e-2);
    }

    #[test]
    fn greys_are_achromatic_and_monotone() {
        let mut prev = -1.0;
        for v in 0..=255u8 {
            let c = srgb_to_lab(v, v, v);
            assert!(c.a.abs() < 1e-6 && c.b.abs() < 1e-6, "{v}: {c:?}");
            assert!(c.l > prev, "L not strictly increasing at {v}");
            prev = c.l;
        }
    }

    #[test]
    fn saturated_red_reference() {
        // commonly tabulated D65 value for sRGB red: (53.24, 80.09, 67.20)
        let c = srgb_to_lab(255, 0, 0);
        assert!(
            (c.l - 53.24).abs() < 0.05 && (c.a - 80.09).abs() < 0.1 && (c.b - 67.20).abs() < 0.1,
            "{c:?}"
        );
    }
}
