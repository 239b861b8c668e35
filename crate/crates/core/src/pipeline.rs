//! End-to-end orchestration: per-scale models, scale pooling, the location
//! prior and pixel-level metrics.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featext::{extract_hypercolumns, resize_plane, FeatureStack, KernelBank};
use crate::forest::{train_forest, ForestConfig, ForestModel};
use crate::raster::{load_image, load_mask, ConfidenceMap, Image, LabelMask, DEFAULT_ROAD_THRESHOLD};
use crate::superpix::{
    assign_region_labels, label_image_from_regions, pool_features, slic, SuperpixelFeatureTable,
    DEFAULT_COMPACTNESS, DEFAULT_ITERATIONS,
};

/// Lowest value the location prior may take.
pub const PRIOR_FLOOR: f32 = 0.05;
/// Resolution at which the prior is learned and stored.
pub const PRIOR_WIDTH: usize = 512;
pub const PRIOR_HEIGHT: usize = 256;
/// Threshold at which accuracy is reported.
pub const ACCURACY_THRESHOLD: f32 = 0.5;
/// Number of thresholds `i / 255` swept by [`evaluate`].
pub const SWEEP_STEPS: usize = 256;

/// Superpixel counts, one model per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSet(Vec<usize>);

impl ScaleSet {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument("at least one scale is required".into()));
        }
        if scales[0] == 0 || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "scales must be positive and strictly increasing, got {scales:?}"
            )));
        }
        Ok(ScaleSet(scales))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        ScaleSet(vec![400, 800, 1200])
    }
}

/// Per-pixel prior probability of road, in `[PRIOR_FLOOR, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PriorMask {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} prior values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(PRIOR_FLOOR..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "prior values must lie in [{PRIOR_FLOOR}, 1]"
            )));
        }
        Ok(PriorMask { width, height, data })
    }

    /// A prior that leaves predictions unchanged.
    pub fn uniform(width: usize, height: usize) -> Self {
        PriorMask {
            width,
            height,
            data: vec![1.0; width * height],
        }
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

    /// Bilinear resize, kept inside the prior's bounds.
    pub fn resized(&self, width: usize, height: usize) -> Vec<f32> {
        resize_plane(&self.data, self.width, self.height, width, height)
            .into_iter()
            .map(|v| v.clamp(PRIOR_FLOOR, 1.0))
            .collect()
    }

    /// Single-channel feature stack, for storage as FSTK.
    pub fn to_stack(&self) -> FeatureStack {
        FeatureStack::new(self.width, self.height, 1, self.data.clone())
            .expect("prior dimensions are validated on construction")
    }

    pub fn from_stack(stack: &FeatureStack) -> Result<Self> {
        if stack.channels() != 1 {
            return Err(Error::Format(format!(
                "prior stack must have one channel, found {}",
                stack.channels()
            )));
        }
        PriorMask::new(stack.width(), stack.height(), stack.data().to_vec())
    }
}

/// Per-pixel road frequency over the training masks (each resized to the
/// target resolution), clamped to `[PRIOR_FLOOR, 1]`.
pub fn learn_prior(masks: &[LabelMask], width: usize, height: usize) -> Result<PriorMask> {
    if masks.is_empty() {
        return Err(Error::Empty("no masks to learn a prior from".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("prior size must be positive".into()));
    }
    let mut sum = vec![0.0f64; width * height];
    for m in masks {
        let plane: Vec<f32> = m.data().iter().map(|&v| f32::from(v)).collect();
        let resized = resize_plane(&plane, m.width(), m.height(), width, height);
        sum.iter_mut().zip(resized).for_each(|(s, v)| *s += f64::from(v));
    }
    let n = masks.len() as f64;
    let data = sum
        .into_iter()
        .map(|s| ((s / n) as f32).clamp(PRIOR_FLOOR, 1.0))
        .collect();
    PriorMask::new(width, height, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn list_file(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Test => "test.txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Image/mask pairs of one split of a dataset laid out as
/// `root/images/<stem>.ppm|pgm`, `root/masks/<stem>.pgm` and
/// `root/{train,test}.txt` listing stems one per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub split: Split,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn load(root: impl AsRef<Path>, split: Split) -> Result<Self> {
        let root = root.as_ref();
        let list = root.join(split.list_file());
        let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
        let mut entries = Vec::new();
        for stem in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let image = ["ppm", "pgm"]
                .iter()
                .map(|ext| root.join("images").join(format!("{stem}.{ext}")))
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no image for stem {stem:?} in {}", root.display()))
                })?;
            let mask = root.join("masks").join(format!("{stem}.pgm"));
            if !mask.is_file() {
                return Err(Error::InvalidArgument(format!(
                    "no mask for stem {stem:?}: {}",
                    mask.display()
                )));
            }
            entries.push(DatasetEntry {
                stem: stem.to_string(),
                image,
                mask,
            });
        }
        Ok(DatasetIndex { split, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every pair, checking that image and mask sizes agree.
    pub fn load_samples(&self, road_threshold: u8) -> Result<Vec<LabeledImage>> {
        self.entries
            .par_iter()
            .map(|e| {
                let image = load_image(&e.image)?;
                let mask = load_mask(&e.mask, road_threshold)?;
                LabeledImage::new(image, mask)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub mask: LabelMask,
}

impl LabeledImage {
    pub fn new(image: Image, mask: LabelMask) -> Result<Self> {
        if image.width() != mask.width() || image.height() != mask.height() {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(LabeledImage { image, mask })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub scales: ScaleSet,
    pub forest: ForestConfig,
    pub compactness: f32,
    pub slic_iterations: usize,
    pub road_threshold: u8,
    pub use_prior: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scales: ScaleSet::default(),
            forest: ForestConfig::default(),
            compactness: DEFAULT_COMPACTNESS,
            slic_iterations: DEFAULT_ITERATIONS,
            road_threshold: DEFAULT_ROAD_THRESHOLD,
            use_prior: true,
        }
    }
}

/// One forest per scale plus the learned prior.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPipeline {
    pub scales: ScaleSet,
    pub models: Vec<ForestModel>,
    pub prior: Option<PriorMask>,
}

/// Superpixel count actually requested for an image, capped by its size.
fn effective_scale(scale: usize, image: &Image) -> usize {
    scale.min(image.width() * image.height())
}

/// Pooled descriptor tables for every scale, labeled when a mask is given.
pub fn scale_tables(
    hypercolumns: &FeatureStack,
    image: &Image,
    mask: Option<&LabelMask>,
    scales: &ScaleSet,
    compactness: f32,
    iterations: usize,
) -> Result<Vec<(crate::superpix::SuperpixelMap, SuperpixelFeatureTable)>> {
    scales
        .as_slice()
        .iter()
        .map(|&scale| {
            let map = slic(image, effective_scale(scale, image), compactness, iterations)?;
            let mut table = pool_features(hypercolumns, &map)?.with_scale(scale);
            if let Some(mask) = mask {
                table = table.with_labels(assign_region_labels(&map, mask)?)?;
            }
            Ok((map, table))
        })
        .collect()
}

pub fn train_pipeline(
    samples: &[LabeledImage],
    bank: &KernelBank,
    config: &PipelineConfig,
) -> Result<TrainedPipeline> {
    if samples.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    config.forest.validate()?;
    let per_image: Vec<Vec<SuperpixelFeatureTable>> = samples
        .par_iter()
        .map(|s| {
            let hc = extract_hypercolumns(&s.image, bank)?;
            let tables = scale_tables(
                &hc,
                &s.image,
                Some(&s.mask),
                &config.scales,
                config.compactness,
                config.slic_iterations,
            )?;
            Ok(tables.into_iter().map(|(_, t)| t).collect())
        })
        .collect::<Result<_>>()?;

    let models = (0..config.scales.len())
        .map(|s| {
            let tables: Vec<SuperpixelFeatureTable> = per_image.iter().map(|t| t[s].clone()).collect();
            let forest = ForestConfig {
                seed: crate::seed::derive(config.forest.seed, config.scales.as_slice()[s] as u64),
                ..config.forest.clone()
            };
            train_forest(&tables, &forest)
        })
        .collect::<Result<Vec<_>>>()?;

    let prior = if config.use_prior {
        let masks: Vec<LabelMask> = samples.iter().map(|s| s.mask.clone()).collect();
        Some(learn_prior(&masks, PRIOR_WIDTH, PRIOR_HEIGHT)?)
    } else {
        None
    };
    Ok(TrainedPipeline {
        scales: config.scales.clone(),
        models,
        prior,
    })
}

pub fn train_pipeline_from_index(
    index: &DatasetIndex,
    bank: &KernelBank,
    config: &PipelineConfig,
) -> Result<TrainedPipeline> {
    if index.is_empty() {
        return Err(Error::Empty("training split lists no images".into()));
    }
    let samples = index.load_samples(config.road_threshold)?;
    train_pipeline(&samples, bank, config)
}

/// Per-scale maps, their mean, and the prior-weighted final map.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub per_scale: Vec<ConfidenceMap>,
    pub pooled: ConfidenceMap,
    pub confidence: ConfidenceMap,
}

/// Per-pixel arithmetic mean, summed in map order.
pub fn pool_scales(maps: &[ConfidenceMap]) -> Result<ConfidenceMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Empty("no per-scale maps to pool".into()))?;
    let (w, h) = (first.width(), first.height());
    if maps.iter().any(|m| m.width() != w || m.height() != h) {
        return Err(Error::DimensionMismatch("per-scale maps differ in size".into()));
    }
    let n = maps.len() as f32;
    let data = (0..w * h)
        .map(|i| {
            let mut sum = 0.0f32;
            for m in maps {
                sum += m.data()[i];
            }
            (sum / n).clamp(0.0, 1.0)
        })
        .collect();
    ConfidenceMap::new(w, h, data)
}

/// Multiplies in the prior (resized to the map) and clamps to `[0, 1]`.
pub fn apply_prior(map: &ConfidenceMap, prior: &PriorMask) -> Result<ConfidenceMap> {
    let weights = prior.resized(map.width(), map.height());
    let data = map
        .data()
        .iter()
        .zip(weights)
        .map(|(&p, w)| (p * w).clamp(0.0, 1.0))
        .collect();
    ConfidenceMap::new(map.width(), map.height(), data)
}

pub fn predict_image(
    image: &Image,
    bank: &KernelBank,
    models: &[ForestModel],
    scales: &ScaleSet,
    prior: Option<&PriorMask>,
    compactness: f32,
    iterations: usize,
) -> Result<Prediction> {
    if models.len() != scales.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} models for {} scales",
            models.len(),
            scales.len()
        )));
    }
    let hc = extract_hypercolumns(image, bank)?;
    if let Some(m) = models.iter().find(|m| m.num_kernels() != hc.channels()) {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} kernels, bank produces {}",
            m.num_kernels(),
            hc.channels()
        )));
    }
    let tables = scale_tables(&hc, image, None, scales, compactness, iterations)?;
    let per_scale = tables
        .iter()
        .zip(models)
        .map(|((map, table), model)| {
            let values = model.predict_table(table)?;
            label_image_from_regions(map, &values)
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = pool_scales(&per_scale)?;
    let confidence = match prior {
        Some(p) => apply_prior(&pooled, p)?,
        None => pooled.clone(),
    };
    Ok(Prediction {
        per_scale,
        pooled,
        confidence,
    })
}

impl TrainedPipeline {
    pub fn predict(&self, image: &Image, bank: &KernelBank, config: &PipelineConfig) -> Result<Prediction> {
        predict_image(
            image,
            bank,
            &self.models,
            &self.scales,
            self.prior.as_ref().filter(|_| config.use_prior),
            config.compactness,
            config.slic_iterations,
        )
    }
}

/// Pixels with `p >= threshold` become road.
pub fn binarize(map: &ConfidenceMap, threshold: f32) -> Result<LabelMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let data = map.data().iter().map(|&p| u8::from(p >= threshold)).collect();
    LabelMask::new(map.width(), map.height(), data)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// `TP / (TP + FP)`, or 1 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio_or(self.tp, self.tp + self.fp, 1.0)
    }

    /// `TP / (TP + FN)`, or 0 when there is no positive ground truth.
    pub fn recall(&self) -> f64 {
        ratio_or(self.tp, self.tp + self.fn_, 0.0)
    }

    pub fn f_score(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn fpr(&self) -> f64 {
        ratio_or(self.fp, self.fp + self.tn, 0.0)
    }

    pub fn fnr(&self) -> f64 {
        ratio_or(self.fn_, self.fn_ + self.tp, 0.0)
    }

    pub fn accuracy(&self) -> f64 {
        ratio_or(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_, 0.0)
    }

    /// Confusion counts of a binary prediction against ground truth.
    pub fn of_masks(pred: &LabelMask, gt: &LabelMask) -> Result<Self> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(Error::DimensionMismatch(
                "prediction and mask differ in size".into(),
            ));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }
}

fn ratio_or(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f32,
    pub precision: f64,
    pub recall: f64,
}

/// Headline metrics in percent. Recall, precision, FPR and FNR are taken at
/// the threshold that maximizes F; accuracy at 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub max_f: f64,
    pub average_precision: f64,
    pub recall_at_maxf: f64,
    pub precision_at_maxf: f64,
    pub fpr_at_maxf: f64,
    pub fnr_at_maxf: f64,
    pub threshold_at_maxf: f32,
    pub confusion_at_maxf: Confusion,
    /// Precision/recall (fractions) at each swept threshold, ascending.
    pub curve: Vec<CurvePoint>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let rows: [(&str, f64); 8] = [
            ("accuracy", self.accuracy),
            ("max_f", self.max_f),
            ("average_precision", self.average_precision),
            ("recall", self.recall_at_maxf),
            ("precision", self.precision_at_maxf),
            ("fpr", self.fpr_at_maxf),
            ("fnr", self.fnr_at_maxf),
            ("threshold", f64::from(self.threshold_at_maxf)),
        ];
        let mut out = String::from("metric,value\n");
        for (name, v) in rows {
            out.push_str(&format!("{name},{v:.6}\n"));
        }
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{:.6},{:.6},{:.6}\n",
                p.threshold, p.precision, p.recall
            ));
        }
        out
    }
}

/// Swept threshold `i / 255`.
#[inline]
pub fn sweep_threshold(i: usize) -> f32 {
    i as f32 / 255.0
}

/// Pixel-level metrics pooled over all images.
///
/// Thresholds `i / 255` for `i = 0..=255` are swept with `p >= t` counted
/// as road. Average precision is the trapezoidal area under the swept
/// precision/recall points, closed at recall 0 with the precision of the
/// highest threshold.
pub fn evaluate(preds: &[ConfidenceMap], gts: &[LabelMask]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to evaluate".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} masks",
            preds.len(),
            gts.len()
        )));
    }
    let thresholds: Vec<f32> = (0..SWEEP_STEPS).map(sweep_threshold).collect();

    // hist[g][k]: pixels with ground truth g passing exactly the first k thresholds
    let partials = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| {
            if p.width() != g.width() || p.height() != g.height() {
                return Err(Error::DimensionMismatch(format!(
                    "prediction {}x{} vs mask {}x{}",
                    p.width(),
                    p.height(),
                    g.width(),
                    g.height()
                )));
            }
            let mut hist = [vec![0u64; SWEEP_STEPS + 1], vec![0u64; SWEEP_STEPS + 1]];
            let mut at_half = Confusion::default();
            for (&v, &gt) in p.data().iter().zip(g.data()) {
                let k = thresholds.partition_point(|&t| t <= v);
                hist[usize::from(gt)][k] += 1;
                match (v >= ACCURACY_THRESHOLD, gt == 1) {
                    (true, true) => at_half.tp += 1,
                    (true, false) => at_half.fp += 1,
                    (false, true) => at_half.fn_ += 1,
                    (false, false) => at_half.tn += 1,
                }
            }
            Ok((hist, at_half))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut hist = [vec![0u64; SWEEP_STEPS + 1], vec![0u64; SWEEP_STEPS + 1]];
    let mut at_half = Confusion::default();
    for (h, c) in partials {
        for g in 0..2 {
            hist[g].iter_mut().zip(&h[g]).for_each(|(a, b)| *a += b);
        }
        at_half.tp += c.tp;
        at_half.fp += c.fp;
        at_half.tn += c.tn;
        at_half.fn_ += c.fn_;
    }
    let total = [hist[0].iter().sum::<u64>(), hist[1].iter().sum::<u64>()];

    // A pixel in bucket k passes thresholds 0..k, i.e. is positive at i iff k > i.
    let mut sweep = Vec::with_capacity(SWEEP_STEPS);
    let mut below = [0u64; 2];
    for (neg, pos) in hist[0].iter().zip(&hist[1]).take(SWEEP_STEPS) {
        below[0] += neg;
        below[1] += pos;
        sweep.push(Confusion {
            tp: total[1] - below[1],
            fn_: below[1],
            fp: total[0] - below[0],
            tn: below[0],
        });
    }

    let mut best = 0usize;
    for (i, c) in sweep.iter().enumerate() {
        if c.f_score() > sweep[best].f_score() {
            best = i;
        }
    }
    let curve: Vec<CurvePoint> = sweep
        .iter()
        .zip(&thresholds)
        .map(|(c, &t)| CurvePoint {
            threshold: t,
            precision: c.precision(),
            recall: c.recall(),
        })
        .collect();
    let mut ap = 0.0;
    for i in 0..curve.len() {
        let (r1, p1) = match curve.get(i + 1) {
            Some(next) => (next.recall, next.precision),
            None => (0.0, curve[i].precision),
        };
        ap += (curve[i].recall - r1) * (curve[i].precision + p1) / 2.0;
    }

    let c = sweep[best];
    Ok(MetricsReport {
        accuracy: 100.0 * at_half.accuracy(),
        max_f: 100.0 * c.f_score(),
        average_precision: 100.0 * ap,
        recall_at_maxf: 100.0 * c.recall(),
        precision_at_maxf: 100.0 * c.precision(),
        fpr_at_maxf: 100.0 * c.fpr(),
        fnr_at_maxf: 100.0 * c.fnr(),
        threshold_at_maxf: thresholds[best],
        confusion_at_maxf: c,
        curve,
    })
}
