//! Dense per-pixel features from a single convolutional layer.
//!
//! A [`KernelBank`] holds exported first-layer weights. [`convolve`] applies
//! it as a zero-padded, "same"-size cross-correlation (no kernel flip) with
//! optional ReLU, [`upsample_bilinear`] brings strided outputs back to image
//! resolution, and [`extract_hypercolumns`] chains the two.
//!
//! Input samples are scaled to `[0, 1]`; banks may additionally carry
//! per-channel means that are subtracted after scaling.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Image;

const KBNK_MAGIC: &[u8; 4] = b"KBNK";
const FSTK_MAGIC: &[u8; 4] = b"FSTK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    num_kernels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    /// K x C x kh x kw, row-major.
    weights: Vec<f32>,
    biases: Vec<f32>,
    apply_relu: bool,
    channel_means: Option<[f32; 3]>,
}

impl KernelBank {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_kernels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        weights: Vec<f32>,
        biases: Vec<f32>,
        apply_relu: bool,
        channel_means: Option<[f32; 3]>,
    ) -> Result<Self> {
        if num_kernels == 0 {
            return Err(Error::InvalidArgument("kernel bank has zero kernels".into()));
        }
        if in_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "kernel channels, size and stride must be positive".into(),
            ));
        }
        let expected = num_kernels * in_channels * kernel_h * kernel_w;
        if weights.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} weights, expected {expected}",
                weights.len()
            )));
        }
        if biases.len() != num_kernels {
            return Err(Error::DimensionMismatch(format!(
                "{} biases for {num_kernels} kernels",
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(KernelBank {
            num_kernels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            weights,
            biases,
            apply_relu,
            channel_means,
        })
    }

    /// 1x1 bank mapping each input channel to its own output plane unchanged.
    pub fn identity(channels: usize) -> Result<Self> {
        let mut weights = vec![0.0; channels * channels];
        for c in 0..channels {
            weights[c * channels + c] = 1.0;
        }
        KernelBank::new(
            channels,
            channels,
            1,
            1,
            1,
            weights,
            vec![0.0; channels],
            false,
            None,
        )
    }

    pub fn num_kernels(&self) -> usize {
        self.num_kernels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn apply_relu(&self) -> bool {
        self.apply_relu
    }

    pub fn channel_means(&self) -> Option<[f32; 3]> {
        self.channel_means
    }

    pub fn with_relu(mut self, on: bool) -> Self {
        self.apply_relu = on;
        self
    }

    pub fn with_zero_biases(mut self) -> Self {
        self.biases.iter_mut().for_each(|b| *b = 0.0);
        self
    }

    fn kernel(&self, k: usize) -> &[f32] {
        let n = self.in_channels * self.kernel_h * self.kernel_w;
        &self.weights[k * n..(k + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 4 * (self.weights.len() + self.biases.len()));
        out.extend_from_slice(KBNK_MAGIC);
        for v in [
            FORMAT_VERSION,
            self.num_kernels as u32,
            self.in_channels as u32,
            self.kernel_h as u32,
            self.kernel_w as u32,
            self.stride as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(u8::from(self.apply_relu));
        out.push(u8::from(self.channel_means.is_some()));
        if let Some(means) = self.channel_means {
            means.iter().for_each(|m| out.extend_from_slice(&m.to_le_bytes()));
        }
        for v in self.weights.iter().chain(&self.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        r.magic(KBNK_MAGIC, "KBNK")?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let k = r.u32()? as usize;
        let c = r.u32()? as usize;
        let kh = r.u32()? as usize;
        let kw = r.u32()? as usize;
        let stride = r.u32()? as usize;
        if k == 0 {
            return Err(Error::Format("kernel bank declares zero kernels".into()));
        }
        let apply_relu = r.u8()? != 0;
        let channel_means = if r.u8()? != 0 {
            Some([r.f32()?, r.f32()?, r.f32()?])
        } else {
            None
        };
        let n = k
            .checked_mul(c)
            .and_then(|n| n.checked_mul(kh))
            .and_then(|n| n.checked_mul(kw))
            .ok_or_else(|| Error::Format("kernel bank size overflows".into()))?;
        let weights = r.f32_vec(n)?;
        let biases = r.f32_vec(k)?;
        KernelBank::new(k, c, kh, kw, stride, weights, biases, apply_relu, channel_means)
    }
}

pub fn load_kernel_bank(path: impl AsRef<Path>) -> Result<KernelBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    KernelBank::from_bytes(&bytes)
}

pub fn save_kernel_bank(bank: &KernelBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Channel-major stack of `f32` feature planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureStack {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature stack dimensions must be positive, got {channels}x{width}x{height}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {channels}x{width}x{height} stack",
                data.len()
            )));
        }
        Ok(FeatureStack {
            width,
            height,
            channels,
            data,
        })
    }

    fn from_planes(width: usize, height: usize, planes: Vec<Vec<f32>>) -> Self {
        let channels = planes.len();
        FeatureStack {
            width,
            height,
            channels,
            data: planes.concat(),
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, k: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn planes(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.width * self.height)
    }

    #[inline]
    pub fn get(&self, k: usize, x: usize, y: usize) -> f32 {
        self.data[(k * self.height + y) * self.width + x]
    }

    /// Concatenates the channels of two same-sized stacks.
    pub fn concat(&self, other: &FeatureStack) -> Result<FeatureStack> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "stack {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        FeatureStack::new(self.width, self.height, self.channels + other.channels, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(FSTK_MAGIC);
        for v in [
            FORMAT_VERSION,
            self.channels as u32,
            self.width as u32,
            self.height as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        r.magic(FSTK_MAGIC, "FSTK")?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let k = r.u32()? as usize;
        let w = r.u32()? as usize;
        let h = r.u32()? as usize;
        let n = k
            .checked_mul(w)
            .and_then(|n| n.checked_mul(h))
            .ok_or_else(|| Error::Format("feature stack size overflows".into()))?;
        let data = r.f32_vec(n)?;
        FeatureStack::new(w, h, k, data)
    }
}

pub fn import_feature_stack(path: impl AsRef<Path>) -> Result<FeatureStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureStack::from_bytes(&bytes)
}

pub fn export_feature_stack(stack: &FeatureStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, stack.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Scales samples to [0, 1] and subtracts the bank's channel means, if any.
fn normalized_planes(image: &Image, means: Option<[f32; 3]>) -> Vec<Vec<f32>> {
    let c = image.channels();
    (0..c)
        .map(|ch| {
            let offset = means.map_or(0.0, |m| m[ch.min(2)]);
            image
                .data()
                .iter()
                .skip(ch)
                .step_by(c)
                .map(|&v| f32::from(v) / 255.0 - offset)
                .collect()
        })
        .collect()
}

/// Leading zero padding for a "same" convolution along one axis.
fn same_padding(input: usize, output: usize, kernel: usize, stride: usize) -> usize {
    ((output - 1) * stride + kernel).saturating_sub(input) / 2
}

/// Output is `ceil(dim / stride)` in each axis; strided outputs are not
/// resized here.
pub fn convolve(image: &Image, bank: &KernelBank) -> Result<FeatureStack> {
    if image.channels() != bank.in_channels {
        return Err(Error::DimensionMismatch(format!(
            "image has {} channels, kernel bank expects {}",
            image.channels(),
            bank.in_channels
        )));
    }
    let (w, h) = (image.width(), image.height());
    let (kh, kw, s) = (bank.kernel_h, bank.kernel_w, bank.stride);
    let out_w = w.div_ceil(s);
    let out_h = h.div_ceil(s);
    let pad_x = same_padding(w, out_w, kw, s) as isize;
    let pad_y = same_padding(h, out_h, kh, s) as isize;
    let input = normalized_planes(image, bank.channel_means);

    let planes: Vec<Vec<f32>> = (0..bank.num_kernels)
        .into_par_iter()
        .map(|k| {
            let kernel = bank.kernel(k);
            let mut plane = vec![bank.biases[k]; out_w * out_h];
            for (c, src) in input.iter().enumerate() {
                let taps = &kernel[c * kh * kw..(c + 1) * kh * kw];
                for oy in 0..out_h {
                    let y0 = (oy * s) as isize - pad_y;
                    for ox in 0..out_w {
                        let x0 = (ox * s) as isize - pad_x;
                        let mut acc = 0.0f32;
                        for ky in 0..kh {
                            let y = y0 + ky as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let row = &src[y as usize * w..(y as usize + 1) * w];
                            for kx in 0..kw {
                                let x = x0 + kx as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                acc += taps[ky * kw + kx] * row[x as usize];
                            }
                        }
                        plane[oy * out_w + ox] += acc;
                    }
                }
            }
            if bank.apply_relu {
                plane.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            plane
        })
        .collect();
    Ok(FeatureStack::from_planes(out_w, out_h, planes))
}

/// Source taps for one output coordinate under half-pixel-center alignment.
#[inline]
fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f32 / dst_len as f32;
    let pos = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f32);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f32)
}

/// Bilinear resampling of a single plane with half-pixel-center alignment
/// and edge clamping.
pub fn resize_plane(src: &[f32], src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Vec<f32> {
    if src_w == dst_w && src_h == dst_h {
        return src.to_vec();
    }
    let xs: Vec<_> = (0..dst_w).map(|x| bilinear_taps(x, src_w, dst_w)).collect();
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for y in 0..dst_h {
        let (y0, y1, fy) = bilinear_taps(y, src_h, dst_h);
        let r0 = &src[y0 * src_w..(y0 + 1) * src_w];
        let r1 = &src[y1 * src_w..(y1 + 1) * src_w];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + fx * (r0[x1] - r0[x0]);
            let bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
            out.push(top + fy * (bottom - top));
        }
    }
    out
}

pub fn upsample_bilinear(stack: &FeatureStack, target_w: usize, target_h: usize) -> Result<FeatureStack> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {target_w}x{target_h}"
        )));
    }
    let planes: Vec<Vec<f32>> = stack
        .planes()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|p| resize_plane(p, stack.width, stack.height, target_w, target_h))
        .collect();
    Ok(FeatureStack::from_planes(target_w, target_h, planes))
}

/// Per-pixel hypercolumns at the image's own resolution.
pub fn extract_hypercolumns(image: &Image, bank: &KernelBank) -> Result<FeatureStack> {
    let conv = convolve(image, bank)?;
    if conv.width == image.width() && conv.height == image.height() {
        return Ok(conv);
    }
    upsample_bilinear(&conv, image.width(), image.height())
}

/// Little-endian cursor over a byte slice.
pub(crate) struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        LeReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {} (need {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4], name: &'static str) -> Result<()> {
        let found = self
            .bytes
            .get(..4)
            .ok_or_else(|| Error::Format(format!("file too short for {name} header")))?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: name,
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
