//! Procedural road scenes and a fixed Gabor kernel bank, for demos and tests.
//!
//! The road is a trapezoid of smooth low-frequency shading; the rest of the
//! frame is fine-grained noise of about the same mean intensity, so the two
//! classes are separable by texture rather than brightness.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featext::KernelBank;
use crate::pipeline::LabeledImage;
use crate::raster::{Image, LabelMask};
use crate::seed;

pub const DEFAULT_SIZE: usize = 128;
const GABOR_SIZE: usize = 7;

/// One scene; identical seeds give identical scenes.
pub fn road_scene(seed: u64, width: usize, height: usize) -> Result<LabeledImage> {
    if width < 8 || height < 8 {
        return Err(Error::InvalidArgument(format!(
            "scene must be at least 8x8, got {width}x{height}"
        )));
    }
    let mut rng = seed::rng(seed);
    let (wf, hf) = (width as f32, height as f32);
    let top = hf * rng.gen_range(0.3..0.5);
    let centre_bottom = wf * rng.gen_range(0.4..0.6);
    let centre_top = wf * rng.gen_range(0.35..0.65);
    let half_bottom = wf * rng.gen_range(0.3..0.45);
    let half_top = wf * rng.gen_range(0.04..0.1);

    let period_x = rng.gen_range(30.0..60.0f32);
    let period_y = rng.gen_range(30.0..60.0f32);
    let phase: [f32; 2] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.03..0.03f32));

    let mut pixels = Vec::with_capacity(width * height * 3);
    let mut mask = Vec::with_capacity(width * height);
    for y in 0..height {
        let yc = y as f32 + 0.5;
        let t = ((yc - top) / (hf - top)).clamp(0.0, 1.0);
        let centre = centre_top + t * (centre_bottom - centre_top);
        let half = half_top + t * (half_bottom - half_top);
        for x in 0..width {
            let xc = x as f32 + 0.5;
            let road = yc >= top && (xc - centre).abs() <= half;
            mask.push(u8::from(road));
            if road {
                let shade = 0.5
                    + 0.06
                        * (2.0 * PI * xc / period_x + phase[0]).sin()
                        * (2.0 * PI * yc / period_y + phase[1]).cos();
                for c in tint {
                    let v = shade + c + rng.gen_range(-0.01..0.01f32);
                    pixels.push(to_u8(v));
                }
            } else {
                let lum = 0.5 + rng.gen_range(-0.3..0.3f32);
                for _ in 0..3 {
                    pixels.push(to_u8(lum + rng.gen_range(-0.05..0.05f32)));
                }
            }
        }
    }
    LabeledImage::new(
        Image::new(width, height, 3, pixels)?,
        LabelMask::new(width, height, mask)?,
    )
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `count` scenes; scene `i` is seeded from `(seed, i)`.
pub fn road_scenes(seed: u64, count: usize, width: usize, height: usize) -> Result<Vec<LabeledImage>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| road_scene(seed::derive(seed, i), width, height))
        .collect()
}

/// Writes `n_train + n_test` scenes in the dataset directory layout.
pub fn write_dataset(
    root: impl AsRef<Path>,
    seed: u64,
    n_train: usize,
    n_test: usize,
    width: usize,
    height: usize,
) -> Result<()> {
    let root = root.as_ref();
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let scenes = road_scenes(seed, n_train + n_test, width, height)?;
    let mut train = String::new();
    let mut test = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:03}");
        scene
            .image
            .save(root.join("images").join(format!("{stem}.ppm")))?;
        scene.mask.save(root.join("masks").join(format!("{stem}.pgm")))?;
        let list = if i < n_train { &mut train } else { &mut test };
        list.push_str(&stem);
        list.push('\n');
    }
    for (name, text) in [("train.txt", train), ("test.txt", test)] {
        let path = root.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Eight zero-mean 7x7 Gabor filters (four orientations, two wavelengths)
/// over RGB, with ReLU and the mid-grey mean removed from the input.
pub fn gabor_bank() -> KernelBank {
    let r = (GABOR_SIZE / 2) as f32;
    let mut weights = Vec::with_capacity(8 * 3 * GABOR_SIZE * GABOR_SIZE);
    for wavelength in [2.5f32, 5.0] {
        let sigma = 0.5 * wavelength;
        for o in 0..4 {
            let theta = o as f32 * PI / 4.0;
            let (s, c) = theta.sin_cos();
            let mut k: Vec<f32> = (0..GABOR_SIZE * GABOR_SIZE)
                .map(|i| {
                    let x = (i % GABOR_SIZE) as f32 - r;
                    let y = (i / GABOR_SIZE) as f32 - r;
                    let xr = x * c + y * s;
                    let yr = -x * s + y * c;
                    (-(xr * xr + yr * yr) / (2.0 * sigma * sigma)).exp() * (2.0 * PI * xr / wavelength).cos()
                })
                .collect();
            let mean = k.iter().sum::<f32>() / k.len() as f32;
            k.iter_mut().for_each(|v| *v -= mean);
            let l1: f32 = k.iter().map(|v| v.abs()).sum();
            k.iter_mut().for_each(|v| *v /= 3.0 * l1);
            for _ in 0..3 {
                weights.extend_from_slice(&k);
            }
        }
    }
    KernelBank::new(
        8,
        3,
        GABOR_SIZE,
        GABOR_SIZE,
        1,
        weights,
        vec![0.0; 8],
        true,
        Some([0.5; 3]),
    )
    .expect("gabor bank dimensions are fixed")
}
