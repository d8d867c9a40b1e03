//! Synthetic paired datasets on disk and their manifests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::degrade::{degrade, DistortionConfig};
use super::image::{load_image, save_image, ImageFormat};
use super::ridge::generate_ridge_pattern;
use super::GrayImage;
use crate::error::{Error, Result};

pub const MANIFEST_CSV: &str = "manifest.csv";
pub const MANIFEST_SIDECAR: &str = "manifest.txt";

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(Error::Config(format!(
                "range {} = {}..{} is empty or not finite",
                what, self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Ranges from which every pair draws its own generator and distortion
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionRanges {
    pub ridge_period: Span,
    pub ridge_smoothness: Span,
    pub blur_sigma: Span,
    pub brightness_delta: Span,
    pub contrast_gain: Span,
    pub elastic_alpha: Span,
    pub elastic_sigma: Span,
    pub occlusion_fraction: Span,
    pub scratch_count: (usize, usize),
    pub rotation_deg: Span,
    pub resolution_factor: Span,
    pub background_blend: Span,
}

impl Default for DistortionRanges {
    fn default() -> Self {
        Self {
            ridge_period: Span::new(7.0, 10.0),
            ridge_smoothness: Span::new(80.0, 160.0),
            blur_sigma: Span::new(0.0, 1.5),
            brightness_delta: Span::new(-0.15, 0.15),
            contrast_gain: Span::new(0.5, 1.1),
            elastic_alpha: Span::new(0.0, 6.0),
            elastic_sigma: Span::new(6.0, 12.0),
            occlusion_fraction: Span::new(0.0, 0.2),
            scratch_count: (0, 4),
            rotation_deg: Span::new(-10.0, 10.0),
            resolution_factor: Span::new(1.0, 2.0),
            background_blend: Span::new(0.0, 0.6),
        }
    }
}

impl DistortionRanges {
    fn spans(&self) -> [(&'static str, Span); 11] {
        [
            ("ridge_period", self.ridge_period),
            ("ridge_smoothness", self.ridge_smoothness),
            ("blur_sigma", self.blur_sigma),
            ("brightness_delta", self.brightness_delta),
            ("contrast_gain", self.contrast_gain),
            ("elastic_alpha", self.elastic_alpha),
            ("elastic_sigma", self.elastic_sigma),
            ("occlusion_fraction", self.occlusion_fraction),
            ("rotation_deg", self.rotation_deg),
            ("resolution_factor", self.resolution_factor),
            ("background_blend", self.background_blend),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, span) in self.spans() {
            span.check(name)?;
        }
        if self.scratch_count.0 > self.scratch_count.1 {
            return Err(Error::Config("range scratch_count is empty".into()));
        }
        if self.ridge_period.lo < 2.0 {
            return Err(Error::Config("ridge_period must be at least 2".into()));
        }
        // Extremes must form valid configurations.
        for pick in [|s: Span| s.lo, |s: Span| s.hi] {
            DistortionConfig {
                blur_sigma: pick(self.blur_sigma),
                brightness_delta: pick(self.brightness_delta),
                contrast_gain: pick(self.contrast_gain),
                elastic_alpha: pick(self.elastic_alpha),
                elastic_sigma: pick(self.elastic_sigma),
                occlusion_fraction: pick(self.occlusion_fraction),
                scratch_count: 0,
                rotation_deg: pick(self.rotation_deg),
                resolution_factor: pick(self.resolution_factor),
                background_blend: pick(self.background_blend),
                seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }

    /// Sets one range from `name` and a `lo..hi` (or single value) string.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad number {:?} for {}", s, name)))
        };
        let (lo, hi) = match value.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => {
                let v = parse(value)?;
                (v, v)
            }
        };
        let span = Span::new(lo, hi);
        match name {
            "ridge_period" => self.ridge_period = span,
            "ridge_smoothness" => self.ridge_smoothness = span,
            "blur_sigma" => self.blur_sigma = span,
            "brightness_delta" => self.brightness_delta = span,
            "contrast_gain" => self.contrast_gain = span,
            "elastic_alpha" => self.elastic_alpha = span,
            "elastic_sigma" => self.elastic_sigma = span,
            "occlusion_fraction" => self.occlusion_fraction = span,
            "rotation_deg" => self.rotation_deg = span,
            "resolution_factor" => self.resolution_factor = span,
            "background_blend" => self.background_blend = span,
            "scratch_count" => {
                if lo < 0.0 || lo.fract() != 0.0 || hi.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "scratch_count must be whole numbers, got {}",
                        value
                    )));
                }
                self.scratch_count = (lo as usize, hi as usize);
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown distortion range {:?}",
                    name
                )))
            }
        }
        Ok(())
    }

    fn echo(&self) -> String {
        let mut s = String::new();
        for (name, span) in self.spans() {
            let _ = writeln!(s, "range.{}={}..{}", name, span.lo, span.hi);
        }
        let _ = writeln!(
            s,
            "range.scratch_count={}..{}",
            self.scratch_count.0, self.scratch_count.1
        );
        s
    }
}

/// Everything needed to regenerate one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecipe {
    pub id: String,
    pub ridge_seed: u64,
    pub ridge_period: f64,
    pub ridge_smoothness: f64,
    pub distortion: DistortionConfig,
}

pub fn pair_id(index: usize) -> String {
    format!("fp_{:05}", index)
}

/// Draws the parameters of pair `index`; independent of every other pair.
pub fn sample_recipe(seed: u64, index: usize, ranges: &DistortionRanges) -> PairRecipe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let ridge_seed = rng.gen();
    let ridge_period = ranges.ridge_period.sample(&mut rng);
    let ridge_smoothness = ranges.ridge_smoothness.sample(&mut rng);
    let distortion = DistortionConfig {
        blur_sigma: ranges.blur_sigma.sample(&mut rng),
        brightness_delta: ranges.brightness_delta.sample(&mut rng),
        contrast_gain: ranges.contrast_gain.sample(&mut rng),
        elastic_alpha: ranges.elastic_alpha.sample(&mut rng),
        elastic_sigma: ranges.elastic_sigma.sample(&mut rng),
        occlusion_fraction: ranges.occlusion_fraction.sample(&mut rng),
        scratch_count: rng.gen_range(ranges.scratch_count.0..=ranges.scratch_count.1),
        rotation_deg: ranges.rotation_deg.sample(&mut rng),
        resolution_factor: ranges.resolution_factor.sample(&mut rng),
        background_blend: ranges.background_blend.sample(&mut rng),
        seed: rng.gen(),
    };
    PairRecipe {
        id: pair_id(index),
        ridge_seed,
        ridge_period,
        ridge_smoothness,
        distortion,
    }
}

impl PairRecipe {
    /// Returns `(clean, distorted)`.
    pub fn render(&self) -> Result<(GrayImage, GrayImage)> {
        let clean =
            generate_ridge_pattern(self.ridge_seed, self.ridge_period, self.ridge_smoothness)?;
        let distorted = degrade(&clean, &self.distortion)?;
        Ok((clean, distorted))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub distorted: PathBuf,
    pub clean: Option<PathBuf>,
}

/// A loaded pair; `clean` is absent for test-style data.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub distorted: GrayImage,
    pub clean: Option<GrayImage>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub seed: Option<u64>,
    /// Sidecar contents (seed and configuration echo), if present.
    pub header: String,
}

impl DatasetManifest {
    /// Loads `manifest.csv` from a dataset directory (or the CSV path itself).
    pub fn load(path: &Path) -> Result<Self> {
        let (root, csv_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_CSV))
        } else {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                path.to_path_buf(),
            )
        };
        let file = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "distorted_path", "clean_path"] {
            return Err(Error::Dataset(format!(
                "{}: expected header id,distorted_path,clean_path",
                csv_path.display()
            )));
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record?;
            let clean = record.get(2).filter(|s| !s.is_empty()).map(PathBuf::from);
            entries.push(ManifestEntry {
                id: record[0].to_string(),
                distorted: PathBuf::from(&record[1]),
                clean,
            });
        }
        let sidecar = root.join(MANIFEST_SIDECAR);
        let header = fs::read_to_string(&sidecar).unwrap_or_default();
        let seed = header
            .lines()
            .find_map(|l| l.strip_prefix("seed="))
            .and_then(|s| s.trim().parse().ok());
        let manifest = Self {
            root,
            entries,
            seed,
            header,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Ids must be unique and every referenced file must exist.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id {:?}", e.id)));
            }
            let mut paths = vec![&e.distorted];
            paths.extend(e.clean.as_ref());
            for p in paths {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::Dataset(format!(
                        "{}: listed for {:?} but missing",
                        full.display(),
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_clean(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.clean.is_some())
    }

    pub fn load_pair(&self, index: usize) -> Result<ImagePair> {
        let e = &self.entries[index];
        let distorted = load_image(&self.root.join(&e.distorted))?;
        let clean = match &e.clean {
            Some(p) => {
                let c = load_image(&self.root.join(p))?;
                if c.dims() != distorted.dims() {
                    return Err(Error::Dataset(format!(
                        "{}: clean and distorted sizes differ",
                        e.id
                    )));
                }
                Some(c)
            }
            None => None,
        };
        Ok(ImagePair {
            id: e.id.clone(),
            distorted,
            clean,
        })
    }

    pub fn load_all(&self) -> Result<Vec<ImagePair>> {
        (0..self.len()).map(|i| self.load_pair(i)).collect()
    }

    fn write_csv(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["id", "distorted_path", "clean_path"])?;
        for e in &self.entries {
            let clean = e
                .clean
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_default();
            w.write_record([e.id.as_str(), &e.distorted.to_string_lossy(), &clean])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Generates `count` pairs under `out_dir` (`clean/`, `distorted/`,
/// `manifest.csv`, `manifest.txt`). Pairs are rendered in parallel and
/// depend only on `(seed, index)`.
pub fn make_dataset(
    count: usize,
    seed: u64,
    out_dir: &Path,
    ranges: &DistortionRanges,
    format: ImageFormat,
) -> Result<DatasetManifest> {
    ranges.validate()?;
    let clean_dir = out_dir.join("clean");
    let distorted_dir = out_dir.join("distorted");
    for d in [&clean_dir, &distorted_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let recipes: Vec<PairRecipe> = (0..count).map(|i| sample_recipe(seed, i, ranges)).collect();
    let entries = recipes
        .par_iter()
        .map(|r| {
            let (clean, distorted) = r.render()?;
            let name = format!("{}.{}", r.id, format.extension());
            let entry = ManifestEntry {
                id: r.id.clone(),
                distorted: Path::new("distorted").join(&name),
                clean: Some(Path::new("clean").join(&name)),
            };
            save_image(&clean, &out_dir.join(entry.clean.as_ref().unwrap()))?;
            save_image(&distorted, &out_dir.join(&entry.distorted))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut header = String::new();
    let _ = writeln!(header, "# fpdm synthetic fingerprint pairs");
    let _ = writeln!(header, "seed={}", seed);
    let _ = writeln!(header, "count={}", count);
    let _ = writeln!(header, "format={}", format.extension());
    header.push_str(&ranges.echo());
    for r in &recipes {
        let _ = writeln!(
            header,
            "pair {} ridge_seed={} ridge_period={:.4} ridge_smoothness={:.4} {}",
            r.id, r.ridge_seed, r.ridge_period, r.ridge_smoothness, r.distortion
        );
    }
    let sidecar = out_dir.join(MANIFEST_SIDECAR);
    fs::write(&sidecar, &header).map_err(|e| Error::io(&sidecar, e))?;

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        seed: Some(seed),
        header,
    };
    manifest.write_csv()?;
    Ok(manifest)
}

/// Builds a clean-less manifest from every PGM/PNG file in `dir`, sorted by
/// file name; ids are the file stems.
pub fn manifest_from_dir(dir: &Path) -> Result<DatasetManifest> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && ImageFormat::from_path(p).is_ok())
        .collect();
    files.sort();
    let entries = files
        .iter()
        .map(|p| ManifestEntry {
            id: p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            distorted: PathBuf::from(p.file_name().unwrap()),
            clean: None,
        })
        .collect();
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        seed: None,
        header: String::new(),
    };
    manifest.validate()?;
    Ok(manifest)
}
