//! Raster types shared by every stage, plus binary PNM (P5/P6) I/O.
//!
//! Only 8-bit binary PNM is supported. Headers may contain `#` comments;
//! the raster payload must follow the maxval after exactly one whitespace
//! byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Default red/gray level at or above which a ground-truth pixel is road.
pub const DEFAULT_ROAD_THRESHOLD: u8 = 128;

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Sample at (x, y) in channel `c`.
    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// RGB triple at (x, y); gray images replicate their single channel.
    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            let v = self.data[i];
            [v, v, v]
        } else {
            [self.data[i], self.data[i + 1], self.data[i + 2]]
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        encode_pnm(magic, self.width, self.height, &self.data)
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let pnm = decode_pnm(bytes)?;
        Image::new(pnm.width, pnm.height, pnm.channels, pnm.payload.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pnm_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Binary road/non-road mask, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {width}x{height} mask",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask label {bad} is not 0 or 1")));
        }
        Ok(LabelMask { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn road_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Writes the mask as P5 with road = 255, non-road = 0.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        fs::write(path, encode_pnm("P5", self.width, self.height, &bytes)).map_err(|e| Error::io(path, e))
    }
}

/// Per-pixel road probability, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "map dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} map",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("confidence {bad} outside [0, 1]")));
        }
        Ok(ConfidenceMap { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        ConfidenceMap::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// 8-bit quantization used on disk: `round(255 p)` with halves rounded up.
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|&p| quantize(p)).collect()
    }
}

#[inline]
fn quantize(p: f32) -> u8 {
    (p * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::from_pnm_bytes(&bytes)
}

/// Loads a ground-truth mask. P6 files are thresholded on the red channel.
pub fn load_mask(path: impl AsRef<Path>, road_threshold: u8) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    mask_from_pnm_bytes(&bytes, road_threshold)
}

pub fn mask_from_pnm_bytes(bytes: &[u8], road_threshold: u8) -> Result<LabelMask> {
    let pnm = decode_pnm(bytes)?;
    let data = pnm
        .payload
        .chunks_exact(pnm.channels)
        .map(|px| u8::from(px[0] >= road_threshold))
        .collect();
    LabelMask::new(pnm.width, pnm.height, data)
}

pub fn save_confidence(map: &ConfidenceMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm("P5", map.width, map.height, &map.quantized())).map_err(|e| Error::io(path, e))
}

/// Reads a saved confidence map back as `sample / 255`.
pub fn load_confidence(path: impl AsRef<Path>) -> Result<ConfidenceMap> {
    let image = load_image(path)?;
    if image.channels() != 1 {
        return Err(Error::Format("confidence maps must be P5".into()));
    }
    let (w, h) = (image.width(), image.height());
    let data = image
        .into_data()
        .into_iter()
        .map(|v| f32::from(v) / 255.0)
        .collect();
    ConfidenceMap::new(w, h, data)
}

/// Blend weight applied to the red channel where ground truth is road.
const GT_BLEND: f32 = 0.5;

/// Visualizes a prediction on top of its image: blue rises with confidence
/// (saturated at p = 1), red is raised halfway where the ground truth is road.
/// True positives therefore come out pink.
pub fn overlay(image: &Image, map: &ConfidenceMap, gt: Option<&LabelMask>) -> Result<Image> {
    if image.width != map.width || image.height != map.height {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs map {}x{}",
            image.width, image.height, map.width, map.height
        )));
    }
    if let Some(gt) = gt {
        if gt.width != image.width || gt.height != image.height {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.width, image.height, gt.width, gt.height
            )));
        }
    }
    let blend = |v: u8, alpha: f32| -> u8 {
        let v = f32::from(v);
        (v + alpha * (255.0 - v) + 0.5).floor().min(255.0) as u8
    };
    let mut out = image.to_rgb();
    for (i, px) in out.data.chunks_exact_mut(3).enumerate() {
        let p = map.data[i];
        if p > 0.0 {
            px[2] = blend(px[2], p);
        }
        if gt.is_some_and(|g| g.data[i] == 1) {
            px[0] = blend(px[0], GT_BLEND);
        }
    }
    Ok(out)
}

struct Pnm<'a> {
    width: usize,
    height: usize,
    channels: usize,
    payload: &'a [u8],
}

fn encode_pnm(magic: &str, width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

fn decode_pnm(bytes: &[u8]) -> Result<Pnm<'_>> {
    if bytes.len() < 2 {
        return Err(Error::Format("file too short for a PNM header".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::BadMagic {
                expected: "P5 or P6",
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let mut pos = 2;
    let width = header_field(bytes, &mut pos, "width")?;
    let height = header_field(bytes, &mut pos, "height")?;
    let maxval = header_field(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedDepth(maxval as u32));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("degenerate size {width}x{height}")));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("image size overflows".into()))?;
    let payload = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Format(format!("truncated payload: expected {len} bytes")))?;
    Ok(Pnm {
        width,
        height,
        channels,
        payload,
    })
}

fn header_field(bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
    // whitespace and comments
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(format!("missing {name} in header")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{name} out of range")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p5(w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
        encode_pnm("P5", w, h, payload)
    }

    #[test]
    fn p5_payload_passthrough() {
        let img = Image::from_pnm_bytes(&p5(2, 2, &[0, 255, 128, 64])).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
        assert_eq!(img.data(), &[0, 255, 128, 64]);
    }

    #[test]
    fn p6_single_pixel() {
        let img = Image::from_pnm_bytes(&encode_pnm("P6", 1, 1, &[10, 20, 30])).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (1, 1, 3));
        assert_eq!(img.data(), &[10, 20, 30]);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 0]);
        let err = Image::from_pnm_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported sample depth"), "{err}");
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        assert_eq!(Image::from_pnm_bytes(&bytes).unwrap().data(), &[7, 9]);

        assert!(matches!(
            Image::from_pnm_bytes(b"P3\n1 1\n255\n0"),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Image::from_pnm_bytes(b"P5\n2 2\n255\n\x01"),
            Err(Error::Format(_))
        ));
        assert!(matches!(Image::from_pnm_bytes(b"P5\n"), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/definitely/not/here.pgm"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mask_thresholds() {
        let m = mask_from_pnm_bytes(&p5(2, 1, &[0, 255]), 128).unwrap();
        assert_eq!(m.data(), &[0, 1]);

        let m = mask_from_pnm_bytes(&encode_pnm("P6", 2, 1, &[255, 0, 0, 0, 0, 255]), 128).unwrap();
        assert_eq!(m.data(), &[1, 0]);

        let m = mask_from_pnm_bytes(&p5(3, 2, &[0; 6]), 128).unwrap();
        assert_eq!(m.data(), &[0; 6]);
    }

    #[test]
    fn confidence_quantization() {
        let map = ConfidenceMap::new(3, 1, vec![0.0, 1.0, 0.5]).unwrap();
        assert_eq!(map.quantized(), vec![0, 255, 128]);
        let zeros = ConfidenceMap::filled(4, 2, 0.0).unwrap();
        assert!(zeros.quantized().iter().all(|&v| v == 0));
    }

    #[test]
    fn confidence_roundtrip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let values: Vec<f32> = (0..1000).map(|i| i as f32 / 999.0).collect();
        let map = ConfidenceMap::new(100, 10, values).unwrap();
        save_confidence(&map, &path).unwrap();
        let back = load_confidence(&path).unwrap();
        for (a, b) in map.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn confidence_rejects_out_of_range() {
        assert!(ConfidenceMap::new(1, 1, vec![1.5]).is_err());
        assert!(ConfidenceMap::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn overlay_cases() {
        let img = Image::new(2, 1, 3, vec![10, 20, 30, 40, 50, 60]).unwrap();

        let zero = ConfidenceMap::filled(2, 1, 0.0).unwrap();
        let gt0 = LabelMask::new(2, 1, vec![0, 0]).unwrap();
        assert_eq!(overlay(&img, &zero, Some(&gt0)).unwrap(), img);

        let map = ConfidenceMap::new(2, 1, vec![1.0, 0.0]).unwrap();
        let out = overlay(&img, &map, None).unwrap();
        assert_eq!(out.data()[2], 255);
        assert_eq!(&out.data()[3..], &[40, 50, 60]);

        let gt = LabelMask::new(2, 1, vec![1, 0]).unwrap();
        let out = overlay(&img, &map, Some(&gt)).unwrap();
        let [r, g, b] = out.rgb(0, 0);
        assert!(
            r > 10 && b > 30 && r > g && b > g,
            "pink expected, got {r},{g},{b}"
        );

        let small = ConfidenceMap::filled(1, 1, 0.0).unwrap();
        assert!(matches!(
            overlay(&img, &small, None),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn overlay_expands_gray() {
        let img = Image::new(1, 1, 1, vec![99]).unwrap();
        let zero = ConfidenceMap::filled(1, 1, 0.0).unwrap();
        assert_eq!(overlay(&img, &zero, None).unwrap().data(), &[99, 99, 99]);
    }

    proptest! {
        #[test]
        fn pnm_roundtrip(w in 1usize..12, h in 1usize..12, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let data: Vec<u8> = (0..w * h * c)
                .map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8)
                .collect();
            let img = Image::new(w, h, c, data).unwrap();
            let back = Image::from_pnm_bytes(&img.to_pnm_bytes()).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn quantization_is_monotone(a in 0.0f32..=1.0, b in 0.0f32..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo) <= quantize(hi));
        }
    }
}
