//! RGB rasters and their on-disk codecs.
//!
//! Binary PPM (P6, maxval 255) is always available. PNG decoding and encoding
//! is compiled in with the `png` feature.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An H×W×3 sRGB raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} channel values for {height}x{width}, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Image filled with one colour.
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(height * width * 3)
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec.601 luma of every pixel, row-major.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn transpose(&self) -> ImageGrid {
        let mut out = ImageGrid {
            height: self.width,
            width: self.height,
            data: vec![0; self.data.len()],
        };
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(x, y));
            }
        }
        out
    }

    /// Encodes as binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Decodes a binary PPM (P6) with maxval 255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut cur = HeaderCursor { bytes, pos: 0 };
        let magic = cur.token()?;
        if magic != b"P6" {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected P6",
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let width = cur.number("width")?;
        let height = cur.number("height")?;
        let maxval_at = cur.pos;
        let maxval = cur.number("maxval")?;
        if maxval != 255 {
            return Err(Error::format(
                maxval_at,
                format!("unsupported maxval {maxval}, expected 255"),
            ));
        }
        // exactly one whitespace byte separates the header from the payload
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(Error::format(cur.pos, "missing whitespace after maxval"));
        }
        let start = cur.pos + 1;
        if width == 0 || height == 0 {
            return Err(Error::format(
                start,
                format!("zero-sized image {width}x{height}"),
            ));
        }
        let expected = width * height * 3;
        let actual = bytes.len() - start;
        if actual < expected {
            return Err(Error::format(
                start,
                format!("truncated payload: expected {expected} bytes, got {actual}"),
            ));
        }
        if actual > expected {
            return Err(Error::format(
                start + expected,
                format!("trailing data: expected {expected} payload bytes, got {actual}"),
            ));
        }
        Self::new(height, width, bytes[start..].to_vec())
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, "unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let at = self.pos;
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::format(
                    at,
                    format!("invalid {what} {:?}", String::from_utf8_lossy(tok)),
                )
            })
    }
}

/// Loads a PPM (P6) or, with the `png` feature, a PNG file.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(&bytes);
    }
    ImageGrid::from_ppm(&bytes)
}

/// Saves as PPM, or as PNG when the extension is `.png` and the feature is on.
pub fn save_image(image: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        encode_png(image)?
    } else {
        image.to_ppm()
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<ImageGrid> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(0, format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(0, format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(0, "png: only 8-bit images are supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => {
            return Err(Error::format(
                0,
                format!("png: unsupported colour type {other:?}"),
            ))
        }
    };
    ImageGrid::new(h, w, data)
}

#[cfg(not(feature = "png"))]
fn decode_png(_bytes: &[u8]) -> Result<ImageGrid> {
    Err(Error::format(
        0,
        "PNG support not compiled in (enable the `png` feature)",
    ))
}

#[cfg(feature = "png")]
fn encode_png(image: &ImageGrid) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(0, format!("png: {e}")))?;
        writer
            .write_image_data(&image.data)
            .map_err(|e| Error::format(0, format!("png: {e}")))?;
    }
    Ok(out)
}

#[cfg(not(feature = "png"))]
fn encode_png(_image: &ImageGrid) -> Result<Vec<u8>> {
    Err(Error::Config(
        "PNG support not compiled in (enable the `png` feature)".into(),
    ))
}

/// Encodes an 8-bit greyscale PGM (P5).
pub fn encode_pgm(height: usize, width: usize, values: &[u8]) -> Vec<u8> {
    debug_assert_eq!(values.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Maps values in [0,1] to bytes as `round(255·v)`, clamping out-of-range input.
pub fn unit_to_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .map(|v| {
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (255.0 * v).round() as u8
        })
        .collect()
}

pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, values: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(height, width, values)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_known_2x2() {
        let payload: Vec<u8> = (1..=12).collect();
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&payload);
        let img = ImageGrid::from_ppm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert_eq!(img.data(), &payload[..]);
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
        assert_eq!(img.pixel(0, 1), [7, 8, 9]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n# another\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        assert_eq!(ImageGrid::from_ppm(&bytes).unwrap().pixel(0, 0), [9, 8, 7]);
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 10]);
        match ImageGrid::from_ppm(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 11);
                assert!(message.contains("expected 12"), "{message}");
                assert!(message.contains("got 10"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_header() {
        assert!(matches!(
            ImageGrid::from_ppm(b"P3\n1 1\n255\n"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            ImageGrid::from_ppm(b"P6\nx 1\n255\n"),
            Err(Error::Format { offset: 3, .. })
        ));
        assert!(matches!(
            ImageGrid::from_ppm(b"P6\n1 1\n65535\n"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/nonexistent/definitely.ppm"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = ImageGrid::new(2, 3, (0..18).map(|v| v * 13).collect()).unwrap();
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[cfg(feature = "png")]
    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = ImageGrid::new(3, 2, (0..18).map(|v| v * 7).collect()).unwrap();
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn unit_to_bytes_rounds() {
        assert_eq!(
            unit_to_bytes([0.0, 1.0, 0.5, 2.0, -1.0]),
            vec![0, 255, 128, 255, 0]
        );
    }

    proptest! {
        #[test]
        fn ppm_encode_decode_is_identity(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let data: Vec<u8> = (0..h * w * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let img = ImageGrid::new(h, w, data).unwrap();
            let bytes = img.to_ppm();
            let back = ImageGrid::from_ppm(&bytes).unwrap();
            prop_assert_eq!(back.to_ppm(), bytes);
            prop_assert_eq!(back, img);
        }
    }
}
