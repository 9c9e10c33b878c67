//! Small raster kernels on row-major `f64` planes.
//!
//! All convolutions use reflect-101 padding (`-1 → 1`, `n → n-2`).

/// Reflect-101 index into `0..n`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// 3×3 correlation with reflect padding.
pub fn correlate3x3(
    plane: &[f64],
    height: usize,
    width: usize,
    kernel: &[[f64; 3]; 3],
) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ky, row) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ky as isize - 1, height);
                for (kx, &k) in row.iter().enumerate() {
                    if k != 0.0 {
                        let sx = reflect(x as isize + kx as isize - 1, width);
                        acc += k * plane[sy * width + sx];
                    }
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Horizontal and vertical Sobel responses.
pub fn sobel(plane: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    (
        correlate3x3(plane, height, width, &SOBEL_X),
        correlate3x3(plane, height, width, &SOBEL_Y),
    )
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur; `sigma <= 0` is the identity.
pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - r, width);
                acc += kv * plane[y * width + sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - r, height);
                acc += kv * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// 8-neighbourhood offsets `(dx, dy)`; the first four are the 4-neighbourhood.
pub const NEIGHBOURS_8: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

/// In-bounds neighbours of `(x, y)` under 4- or 8-connectivity.
#[inline]
pub fn neighbours(
    x: usize,
    y: usize,
    width: usize,
    height: usize,
    connectivity: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let n = if connectivity == 4 { 4 } else { 8 };
    NEIGHBOURS_8[..n].iter().filter_map(move |&(dx, dy)| {
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        (nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height)
            .then_some((nx as usize, ny as usize))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect101() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(-1, 2), 1);
    }

    #[test]
    fn blur_preserves_constant() {
        let p = vec![3.5; 30];
        let b = gaussian_blur(&p, 5, 6, 1.5);
        assert!(b.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn neighbour_counts() {
        assert_eq!(neighbours(0, 0, 3, 3, 8).count(), 3);
        assert_eq!(neighbours(1, 1, 3, 3, 8).count(), 8);
        assert_eq!(neighbours(1, 1, 3, 3, 4).count(), 4);
    }
}
