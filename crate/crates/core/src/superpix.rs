//! SLIC over-segmentation and per-region pooling of feature stacks.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featext::FeatureStack;
use crate::raster::{ConfidenceMap, Image, LabelMask};

pub const DEFAULT_COMPACTNESS: f32 = 10.0;
pub const DEFAULT_ITERATIONS: usize = 10;

const UNASSIGNED: u32 = u32::MAX;

/// Dense partition of an image into regions `0..region_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    region_sizes: Vec<usize>,
}

impl SuperpixelMap {
    /// Validates that `labels` is a dense labeling (every id below the
    /// maximum is used). Connectivity is not required here.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut region_sizes = vec![0usize; count];
        for &l in &labels {
            region_sizes[l as usize] += 1;
        }
        if let Some(r) = region_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("region {r} is empty")));
        }
        Ok(SuperpixelMap {
            width,
            height,
            labels,
            region_sizes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn region_count(&self) -> usize {
        self.region_sizes.len()
    }

    pub fn region_sizes(&self) -> &[usize] {
        &self.region_sizes
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// True when every region is a single 4-connected component.
    pub fn is_connected(&self) -> bool {
        let (components, _) = connected_components(&self.labels, self.width, self.height);
        components.len() == self.region_count()
    }

    /// Region adjacency under 4-connectivity, as sorted neighbor lists.
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.region_count()];
        let (w, h) = (self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let a = self.labels[y * w + x];
                let mut link = |b: u32| {
                    if a != b {
                        adj[a as usize].push(b);
                        adj[b as usize].push(a);
                    }
                };
                if x + 1 < w {
                    link(self.labels[y * w + x + 1]);
                }
                if y + 1 < h {
                    link(self.labels[(y + 1) * w + x]);
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Debug dump: P5 of `label mod 256` plus a `<stem>.txt` sidecar holding
    /// `region_count=R`.
    pub fn save_debug(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.labels.iter().map(|&l| (l % 256) as u8).collect();
        Image::new(self.width, self.height, 1, bytes)?.save(path)?;
        let sidecar = path.with_extension("txt");
        fs::write(&sidecar, format!("region_count={}\n", self.region_count()))
            .map_err(|e| Error::io(sidecar, e))
    }
}

/// sRGB (8-bit) to CIELAB under D65.
fn rgb_to_lab([r, g, b]: [u8; 3]) -> [f32; 3] {
    fn lin(c: u8) -> f32 {
        let c = f32::from(c) / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f32) -> f32 {
        if t > 0.008856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    }
    let (r, g, b) = (lin(r), lin(g), lin(b));
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f32; 3],
    x: f32,
    y: f32,
}

/// Seed grid: `nx * ny ~= n` cells shaped to the image aspect ratio.
fn grid_shape(width: usize, height: usize, n: usize) -> (usize, usize) {
    let ideal = (n as f64 * width as f64 / height as f64).sqrt();
    let nx = (ideal - 1e-9).ceil().clamp(1.0, width as f64) as usize;
    let ny = ((n as f64 / nx as f64).round() as usize).clamp(1, height);
    (nx, ny)
}

/// SLIC superpixels.
///
/// Seeds sit on a regular grid and are nudged to the lowest-gradient pixel
/// of their 3x3 neighborhood. Each iteration assigns pixels within a 2S x 2S
/// window of every center using
/// `d^2 = d_lab^2 + (compactness / S)^2 * d_xy^2`, `S = sqrt(w h / n)`, then
/// moves centers to the mean of their members. Disconnected fragments are
/// finally merged into their largest neighbor and ids relabeled densely in
/// scan order.
pub fn slic(
    image: &Image,
    n_superpixels: usize,
    compactness: f32,
    max_iters: usize,
) -> Result<SuperpixelMap> {
    let (w, h) = (image.width(), image.height());
    if n_superpixels == 0 || n_superpixels > w * h {
        return Err(Error::InvalidArgument(format!(
            "superpixel count {n_superpixels} outside [1, {}]",
            w * h
        )));
    }
    if !(compactness > 0.0 && compactness.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "compactness must be positive, got {compactness}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("SLIC needs at least one iteration".into()));
    }

    let lab: Vec<[f32; 3]> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| rgb_to_lab(image.rgb(x, y)))
        .collect();
    let step = ((w * h) as f32 / n_superpixels as f32).sqrt();
    let mut centers = seed_centers(&lab, w, h, n_superpixels, step >= 3.0);

    let spatial_weight = (compactness / step).powi(2);
    let mut labels = vec![UNASSIGNED; w * h];
    let mut dist = vec![f32::INFINITY; w * h];
    for _ in 0..max_iters {
        dist.fill(f32::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x_lo = (c.x - step).floor().max(0.0) as usize;
            let x_hi = ((c.x + step).ceil() as usize).min(w - 1);
            let y_lo = (c.y - step).floor().max(0.0) as usize;
            let y_hi = ((c.y + step).ceil() as usize).min(h - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let i = y * w + x;
                    let p = lab[i];
                    let dc =
                        (p[0] - c.lab[0]).powi(2) + (p[1] - c.lab[1]).powi(2) + (p[2] - c.lab[2]).powi(2);
                    let ds = (x as f32 - c.x).powi(2) + (y as f32 - c.y).powi(2);
                    let d = dc + spatial_weight * ds;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }

        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == UNASSIGNED {
                continue;
            }
            let s = &mut sums[l as usize];
            let p = lab[i];
            s[0] += f64::from(p[0]);
            s[1] += f64::from(p[1]);
            s[2] += f64::from(p[2]);
            s[3] += (i % w) as f64;
            s[4] += (i / w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                let n = s[5];
                c.lab = [(s[0] / n) as f32, (s[1] / n) as f32, (s[2] / n) as f32];
                c.x = (s[3] / n) as f32;
                c.y = (s[4] / n) as f32;
            }
        }
    }

    let labels = enforce_connectivity(&labels, w, h);
    SuperpixelMap::from_labels(w, h, labels)
}

/// With `perturb`, seeds move to the lowest-gradient pixel of their 3x3
/// neighborhood. Grids finer than 3 pixels skip this so seeds stay distinct.
fn seed_centers(lab: &[[f32; 3]], w: usize, h: usize, n: usize, perturb: bool) -> Vec<Center> {
    let (nx, ny) = grid_shape(w, h, n);
    let gradient = |x: usize, y: usize| -> f32 {
        let at = |x: usize, y: usize| lab[y * w + x];
        let d2 =
            |a: [f32; 3], b: [f32; 3]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        d2(at(xr, y), at(xl, y)) + d2(at(x, yd), at(x, yu))
    };
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let cy = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let (mut bx, mut by) = (cx, cy);
            let mut best = gradient(cx, cy);
            let radius = usize::from(perturb);
            for y in cy.saturating_sub(radius)..=(cy + radius).min(h - 1) {
                for x in cx.saturating_sub(radius)..=(cx + radius).min(w - 1) {
                    let g = gradient(x, y);
                    if g < best {
                        best = g;
                        (bx, by) = (x, y);
                    }
                }
            }
            centers.push(Center {
                lab: lab[by * w + bx],
                x: bx as f32,
                y: by as f32,
            });
        }
    }
    centers
}

/// 4-connected components of equal labels. Returns per-component pixel
/// lists (in discovery order) and the per-pixel component index.
fn connected_components(labels: &[u32], w: usize, h: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut comp = vec![usize::MAX; w * h];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let label = labels[start];
        let mut pixels = Vec::new();
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == label {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        components.push(pixels);
    }
    (components, comp)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Keeps the largest fragment of each cluster; every other fragment (and
/// any unassigned pixel) is merged into the largest adjacent region.
/// Output ids are dense and ordered by first pixel in scan order.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize) -> Vec<u32> {
    let (components, comp_of) = connected_components(labels, w, h);
    let n = components.len();

    let mut keeper: std::collections::HashMap<u32, usize> = Default::default();
    for (id, pixels) in components.iter().enumerate() {
        let label = labels[pixels[0]];
        if label == UNASSIGNED {
            continue;
        }
        keeper
            .entry(label)
            .and_modify(|best| {
                if components[*best].len() < pixels.len() {
                    *best = id;
                }
            })
            .or_insert(id);
    }
    let mut is_kept = vec![false; n];
    for &id in keeper.values() {
        is_kept[id] = true;
    }

    let mut neighbors = vec![Vec::new(); n];
    for y in 0..h {
        for x in 0..w {
            let a = comp_of[y * w + x];
            if x + 1 < w {
                let b = comp_of[y * w + x + 1];
                if a != b {
                    neighbors[a].push(b);
                    neighbors[b].push(a);
                }
            }
            if y + 1 < h {
                let b = comp_of[(y + 1) * w + x];
                if a != b {
                    neighbors[a].push(b);
                    neighbors[b].push(a);
                }
            }
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }

    let mut parent: Vec<usize> = (0..n).collect();
    let mut size: Vec<usize> = components.iter().map(Vec::len).collect();
    for id in 0..n {
        if is_kept[id] {
            continue;
        }
        let root = find(&mut parent, id);
        let mut target: Option<usize> = None;
        for &nb in &neighbors[id] {
            let r = find(&mut parent, nb);
            if r == root {
                continue;
            }
            target = match target {
                Some(t) if size[t] > size[r] || (size[t] == size[r] && t <= r) => Some(t),
                _ => Some(r),
            };
        }
        if let Some(t) = target {
            parent[root] = t;
            size[t] += size[root];
        }
    }

    let mut dense = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut out = vec![0u32; w * h];
    for (i, &c) in comp_of.iter().enumerate() {
        let r = find(&mut parent, c);
        if dense[r] == u32::MAX {
            dense[r] = next;
            next += 1;
        }
        out[i] = dense[r];
    }
    out
}

/// Per-region descriptors: for kernel `k`, entries `2k` (mean) and `2k + 1`
/// (population standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelFeatureTable {
    region_count: usize,
    feature_dim: usize,
    descriptors: Vec<f32>,
    labels: Option<Vec<u8>>,
    scale: usize,
}

impl SuperpixelFeatureTable {
    pub fn new(
        region_count: usize,
        feature_dim: usize,
        descriptors: Vec<f32>,
        labels: Option<Vec<u8>>,
        scale: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || !feature_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "descriptor dimension must be even and positive, got {feature_dim}"
            )));
        }
        if descriptors.len() != region_count * feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} descriptor values for {region_count} x {feature_dim}",
                descriptors.len()
            )));
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if let Some(l) = &labels {
            if l.len() != region_count || l.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument(
                    "region labels must be one 0/1 value per region".into(),
                ));
            }
        }
        Ok(SuperpixelFeatureTable {
            region_count,
            feature_dim,
            descriptors,
            labels,
            scale,
        })
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_kernels(&self) -> usize {
        self.feature_dim / 2
    }

    pub fn descriptors(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn descriptor(&self, region: usize) -> &[f32] {
        &self.descriptors[region * self.feature_dim..(region + 1) * self.feature_dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.descriptors.chunks_exact(self.feature_dim)
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.region_count || labels.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(
                "region labels must be one 0/1 value per region".into(),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

fn check_dims(what: &str, w: usize, h: usize, map: &SuperpixelMap) -> Result<()> {
    if w != map.width || h != map.height {
        return Err(Error::DimensionMismatch(format!(
            "{what} {w}x{h} vs superpixel map {}x{}",
            map.width, map.height
        )));
    }
    Ok(())
}

/// Mean and population standard deviation of every channel over each region.
pub fn pool_features(stack: &FeatureStack, map: &SuperpixelMap) -> Result<SuperpixelFeatureTable> {
    check_dims("feature stack", stack.width(), stack.height(), map)?;
    let regions = map.region_count();
    let sizes = map.region_sizes();
    let labels = map.labels();

    let per_channel: Vec<Vec<(f32, f32)>> = stack
        .planes()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|plane| {
            let mut sum = vec![0.0f64; regions];
            let mut lo = vec![f32::INFINITY; regions];
            let mut hi = vec![f32::NEG_INFINITY; regions];
            for (&v, &l) in plane.iter().zip(labels) {
                let r = l as usize;
                sum[r] += f64::from(v);
                lo[r] = lo[r].min(v);
                hi[r] = hi[r].max(v);
            }
            let mean: Vec<f64> = (0..regions)
                .map(|r| {
                    if lo[r] == hi[r] {
                        f64::from(lo[r])
                    } else {
                        (sum[r] / sizes[r] as f64).clamp(f64::from(lo[r]), f64::from(hi[r]))
                    }
                })
                .collect();
            let mut m2 = vec![0.0f64; regions];
            for (&v, &l) in plane.iter().zip(labels) {
                let r = l as usize;
                m2[r] += (f64::from(v) - mean[r]).powi(2);
            }
            (0..regions)
                .map(|r| {
                    let std = if lo[r] == hi[r] {
                        0.0
                    } else {
                        (m2[r] / sizes[r] as f64).sqrt() as f32
                    };
                    (mean[r] as f32, std)
                })
                .collect()
        })
        .collect();

    let k = stack.channels();
    let mut descriptors = vec![0.0f32; regions * 2 * k];
    for (c, stats) in per_channel.iter().enumerate() {
        for (r, &(mean, std)) in stats.iter().enumerate() {
            descriptors[r * 2 * k + 2 * c] = mean;
            descriptors[r * 2 * k + 2 * c + 1] = std;
        }
    }
    SuperpixelFeatureTable::new(regions, 2 * k, descriptors, None, regions)
}

/// Majority ground-truth label per region; an exact tie counts as non-road.
pub fn assign_region_labels(map: &SuperpixelMap, gt: &LabelMask) -> Result<Vec<u8>> {
    check_dims("mask", gt.width(), gt.height(), map)?;
    let mut road = vec![0usize; map.region_count()];
    for (&l, &g) in map.labels.iter().zip(gt.data()) {
        road[l as usize] += usize::from(g);
    }
    Ok(road
        .iter()
        .zip(&map.region_sizes)
        .map(|(&r, &n)| u8::from(2 * r > n))
        .collect())
}

/// Paints each region's value onto its pixels.
pub fn label_image_from_regions(map: &SuperpixelMap, region_values: &[f32]) -> Result<ConfidenceMap> {
    if region_values.len() != map.region_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {} regions",
            region_values.len(),
            map.region_count()
        )));
    }
    let data = map.labels.iter().map(|&l| region_values[l as usize]).collect();
    ConfidenceMap::new(map.width, map.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_halves(w: usize, h: usize) -> Image {
        let data = (0..w * h)
            .flat_map(|i| if i % w < w / 2 { [0u8; 3] } else { [255u8; 3] })
            .collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn uniform_image_splits_evenly() {
        let img = Image::new(100, 100, 3, vec![90; 30000]).unwrap();
        let map = slic(&img, 4, 10.0, 10).unwrap();
        assert_eq!(map.region_count(), 4);
        for &s in map.region_sizes() {
            assert!((2250..=2750).contains(&s), "region size {s}");
        }
    }

    #[test]
    fn one_region_per_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..6 * 5 * 3).map(|_| rng.gen()).collect();
        let img = Image::new(6, 5, 3, data).unwrap();
        let map = slic(&img, 30, 1e6, 10).unwrap();
        assert_eq!(map.region_count(), 30);
        assert!(map.region_sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn two_half_image_respects_the_edge() {
        let img = two_halves(64, 64);
        let map = slic(&img, 2, 10.0, 10).unwrap();
        // Brute force: count pixels whose color disagrees with their region's
        // majority color.
        let mut white = vec![0usize; map.region_count()];
        for y in 0..64 {
            for x in 0..64 {
                white[map.label(x, y) as usize] += usize::from(x >= 32);
            }
        }
        let mut bad = 0;
        for y in 0..64 {
            for x in 0..64 {
                let r = map.label(x, y) as usize;
                let majority_white = 2 * white[r] > map.region_sizes()[r];
                bad += usize::from(majority_white != (x >= 32));
            }
        }
        assert!((bad as f64) < 0.02 * 4096.0, "{bad} violations");
    }

    #[test]
    fn slic_rejects_bad_arguments() {
        let img = two_halves(8, 8);
        assert!(slic(&img, 0, 10.0, 10).is_err());
        assert!(slic(&img, 65, 10.0, 10).is_err());
        assert!(slic(&img, 4, 0.0, 10).is_err());
        assert!(slic(&img, 4, 10.0, 0).is_err());
    }

    #[test]
    fn connectivity_merges_fragments() {
        // label 0 appears in two fragments; the single-pixel one must merge.
        let labels = vec![0, 0, 1, 0, 1, 1, 1, 1, 1];
        let out = enforce_connectivity(&labels, 3, 3);
        let map = SuperpixelMap::from_labels(3, 3, out).unwrap();
        assert!(map.is_connected());
        assert_eq!(map.region_count(), 2);
        assert_eq!(map.region_sizes(), &[3, 6]);
    }

    #[test]
    fn pool_two_point_region() {
        let stack = FeatureStack::new(2, 1, 1, vec![1.0, 3.0]).unwrap();
        let map = SuperpixelMap::from_labels(2, 1, vec![0, 0]).unwrap();
        let t = pool_features(&stack, &map).unwrap();
        assert_eq!(t.descriptor(0), &[2.0, 1.0]);
    }

    #[test]
    fn pool_single_pixel_region() {
        let stack = FeatureStack::new(3, 1, 2, vec![0.1, 0.2, 0.3, 5.0, 6.0, 7.0]).unwrap();
        let map = SuperpixelMap::from_labels(3, 1, vec![0, 1, 1]).unwrap();
        let t = pool_features(&stack, &map).unwrap();
        assert_eq!(t.descriptor(0), &[0.1, 0.0, 5.0, 0.0]);
        assert_eq!(t.feature_dim(), 4);
    }

    #[test]
    fn pool_dimension_mismatch() {
        let stack = FeatureStack::new(3, 1, 1, vec![0.0; 3]).unwrap();
        let map = SuperpixelMap::from_labels(1, 3, vec![0, 0, 0]).unwrap();
        assert!(matches!(
            pool_features(&stack, &map),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn region_label_majority_and_tie() {
        let map = SuperpixelMap::from_labels(8, 3, [vec![0u32; 8], vec![1; 8], vec![2; 8]].concat()).unwrap();
        let gt = LabelMask::new(
            8,
            3,
            [
                vec![1u8; 8],
                vec![1, 1, 1, 0, 0, 0, 0, 0],
                vec![1, 1, 1, 1, 0, 0, 0, 0],
            ]
            .concat(),
        )
        .unwrap();
        assert_eq!(assign_region_labels(&map, &gt).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn paint_regions() {
        let map = SuperpixelMap::from_labels(3, 1, vec![0, 1, 1]).unwrap();
        let c = label_image_from_regions(&map, &[0.0, 1.0]).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 1.0]);
        let ones = label_image_from_regions(&map, &[1.0, 1.0]).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        assert!(label_image_from_regions(&map, &[1.0]).is_err());
    }

    #[test]
    fn debug_dump_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let map = SuperpixelMap::from_labels(2, 1, vec![0, 1]).unwrap();
        let path = dir.path().join("sp.pgm");
        map.save_debug(&path).unwrap();
        let text = std::fs::read_to_string(dir.path().join("sp.txt")).unwrap();
        assert_eq!(text.trim(), "region_count=2");
    }

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, regions: u32) -> SuperpixelMap {
        loop {
            let labels: Vec<u32> = (0..w * h).map(|_| rng.gen_range(0..regions)).collect();
            if let Ok(m) = SuperpixelMap::from_labels(w, h, labels) {
                if m.region_count() == regions as usize {
                    return m;
                }
            }
        }
    }

    proptest! {
        #[test]
        fn paint_then_pool_roundtrips(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_map(&mut rng, 9, 7, 5);
            let values: Vec<f32> = (0..5).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let painted = label_image_from_regions(&map, &values).unwrap();
            let stack = FeatureStack::new(9, 7, 1, painted.data().to_vec()).unwrap();
            let t = pool_features(&stack, &map).unwrap();
            for (r, &v) in values.iter().enumerate() {
                prop_assert_eq!(t.descriptor(r)[0], v);
                prop_assert_eq!(t.descriptor(r)[1], 0.0);
            }
        }

        #[test]
        fn pooled_mean_within_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_map(&mut rng, 8, 8, 4);
            let data: Vec<f32> = (0..3 * 64).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let stack = FeatureStack::new(8, 8, 3, data).unwrap();
            let t = pool_features(&stack, &map).unwrap();
            for r in 0..4 {
                for c in 0..3 {
                    let members = map.labels().iter().enumerate()
                        .filter(|(_, &l)| l as usize == r)
                        .map(|(i, _)| stack.plane(c)[i]);
                    let (lo, hi) = members.fold((f32::MAX, f32::MIN), |(a, b), v| (a.min(v), b.max(v)));
                    let d = t.descriptor(r);
                    prop_assert!(lo <= d[2 * c] && d[2 * c] <= hi);
                    prop_assert!(d[2 * c + 1] >= 0.0);
                }
            }
        }

        #[test]
        fn slic_is_a_dense_connected_partition(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (rng.gen_range(4..40), rng.gen_range(4..40));
            let n = rng.gen_range(1..=(w * h / 4).max(1));
            let data = (0..w * h * 3).map(|_| rng.gen()).collect();
            let img = Image::new(w, h, 3, data).unwrap();
            let map = slic(&img, n, 10.0, 5).unwrap();
            prop_assert!(map.is_connected());
            prop_assert_eq!(map.region_sizes().iter().sum::<usize>(), w * h);
            prop_assert_eq!(slic(&img, n, 10.0, 5).unwrap(), map);
        }
    }
}
