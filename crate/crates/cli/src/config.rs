//! Plain `key=value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use roadforest::forest::ForestConfig;
use roadforest::pipeline::{PipelineConfig, ScaleSet};

pub const KEYS: [&str; 12] = [
    "dataset_root",
    "kernel_bank",
    "scales",
    "trees",
    "depth",
    "candidates",
    "min_samples_leaf",
    "svm_c",
    "seed",
    "output_dir",
    "threads",
    "prior",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub kernel_bank: Option<PathBuf>,
    pub scales: Vec<usize>,
    pub trees: usize,
    pub depth: usize,
    pub candidates: usize,
    pub min_samples_leaf: usize,
    pub svm_c: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; `None` uses every logical core.
    pub threads: Option<usize>,
    pub prior: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            dataset_root: None,
            kernel_bank: None,
            scales: p.scales.as_slice().to_vec(),
            trees: p.forest.num_trees,
            depth: p.forest.max_depth,
            candidates: p.forest.num_candidates,
            min_samples_leaf: p.forest.min_samples_leaf,
            svm_c: p.forest.svm.c,
            seed: p.forest.seed,
            output_dir: PathBuf::from("model"),
            threads: None,
            prior: p.use_prior,
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut config = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", n + 1))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |what: &str| format!("{key}: expected {what}, got {value:?}");
        let count = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        match key {
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "kernel_bank" => self.kernel_bank = Some(PathBuf::from(value)),
            "scales" => {
                self.scales = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("comma-separated superpixel counts"))?;
            }
            "trees" => self.trees = count()?,
            "depth" => self.depth = count()?,
            "candidates" => self.candidates = count()?,
            "min_samples_leaf" => self.min_samples_leaf = count()?,
            "svm_c" => self.svm_c = value.parse().map_err(|_| bad("a number"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("a 64-bit unsigned integer"))?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "threads" => {
                let n = count()?;
                self.threads = (n > 0).then_some(n);
            }
            "prior" => {
                self.prior = match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(bad("on or off")),
                }
            }
            _ => {
                return Err(format!(
                    "unknown key {key:?} (expected one of {})",
                    KEYS.join(", ")
                ))
            }
        }
        Ok(())
    }

    /// Pipeline settings implied by this configuration, validated.
    pub fn pipeline(&self) -> Result<PipelineConfig, String> {
        let scales = ScaleSet::new(self.scales.clone()).map_err(|e| format!("scales: {e}"))?;
        let base = PipelineConfig::default();
        let mut forest = ForestConfig {
            num_trees: self.trees,
            max_depth: self.depth,
            num_candidates: self.candidates,
            min_samples_leaf: self.min_samples_leaf,
            seed: self.seed,
            ..base.forest.clone()
        };
        forest.svm.c = self.svm_c;
        forest.validate().map_err(|e| e.to_string())?;
        Ok(PipelineConfig {
            scales,
            forest,
            use_prior: self.prior,
            ..base
        })
    }

    /// Serializes every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let scales: Vec<String> = self.scales.iter().map(ToString::to_string).collect();
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            if !v.is_empty() {
                let _ = writeln!(out, "{k}={v}");
            }
        };
        line("dataset_root", path(&self.dataset_root));
        line("kernel_bank", path(&self.kernel_bank));
        line("scales", scales.join(","));
        line("trees", self.trees.to_string());
        line("depth", self.depth.to_string());
        line("candidates", self.candidates.to_string());
        line("min_samples_leaf", self.min_samples_leaf.to_string());
        line("svm_c", self.svm_c.to_string());
        line("seed", self.seed.to_string());
        line("output_dir", self.output_dir.display().to_string());
        line("threads", self.threads.unwrap_or(0).to_string());
        line("prior", if self.prior { "on" } else { "off" }.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "# sweep\ndataset_root=data\nkernel_bank = bank.kbnk\nscales=400, 800\ntrees=3\nsvm_c=0.25\nprior=off\nthreads=2\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.scales, vec![400, 800]);
        assert_eq!((c.trees, c.svm_c, c.prior, c.threads), (3, 0.25, false, Some(2)));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn defaults_match_pipeline() {
        let c = RunConfig::default();
        assert_eq!(c.pipeline().unwrap(), PipelineConfig::default());
        assert_eq!((c.trees, c.depth, c.candidates), (10, 10, 10));
        assert_eq!(c.scales, vec![400, 800, 1200]);
        assert_eq!(c.svm_c, 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "colour=red",
            "trees=many",
            "prior=yes",
            "scales=400,x",
            "no equals sign",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
        let err = RunConfig::parse("\n\nwidth=3").unwrap_err();
        assert!(err.contains("line 3") && err.contains("width"), "{err}");
        assert!(RunConfig::parse("trees=0").unwrap().pipeline().is_err());
        assert!(RunConfig::parse("scales=800,400").unwrap().pipeline().is_err());
        assert!(RunConfig::parse("svm_c=-1").unwrap().pipeline().is_err());
    }
}
