//! Seeded synthetic social-media dataset with a known label mechanism:
//!
//! `label = b_f * ln(1 + follower) + b_h * sin(2 pi hour / 24) + b_e * (emb . u) + N(0, sigma)`
//!
//! where `emb` is the post's vector in the signal embedding block and `u` a
//! fixed unit direction. Other profile counters are noisy functions of the
//! follower count, as they are on real platforms.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    file_digest, join_dataset, write_dataset_dir, write_pid_values, Dataset, DatasetFiles,
    EmbeddingBlock, PostRecord, UserProfile,
};
use crate::error::{Error, Result};
use crate::mftm::decompose_timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingDims {
    pub cap: usize,
    pub image: usize,
    pub single_lang: usize,
    pub multi_lang: usize,
    pub m: usize,
}

impl Default for EmbeddingDims {
    fn default() -> Self {
        Self {
            cap: 8,
            image: 16,
            single_lang: 8,
            multi_lang: 8,
            m: 8,
        }
    }
}

impl EmbeddingDims {
    fn blocks(&self) -> [(&'static str, usize); 5] {
        [
            ("cap", self.cap),
            ("image", self.image),
            ("single_lang", self.single_lang),
            ("multi_lang", self.multi_lang),
            ("m", self.m),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub posts_min: usize,
    pub posts_max: usize,
    pub embedding_dims: EmbeddingDims,
    /// Block carrying the planted direction.
    pub signal_block: String,
    pub beta_follower: f64,
    pub beta_hour: f64,
    pub beta_embed: f64,
    pub sigma: f64,
    /// Latest fraction of the time range held out as the test split.
    pub test_fraction: f64,
    /// Per-field probability of a missing value (geo, categoricals, embeddings).
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            posts_min: 4,
            posts_max: 10,
            embedding_dims: EmbeddingDims::default(),
            signal_block: "image".into(),
            beta_follower: 1.0,
            beta_hour: 0.3,
            beta_embed: 0.5,
            sigma: 0.5,
            test_fraction: 0.2,
            missing_rate: 0.01,
            seed: 42,
        }
    }
}

/// Smallest fold count the generated data has to support.
pub const MIN_USERS: usize = 5;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users < MIN_USERS {
            return fail("n_users must be at least 5");
        }
        if self.posts_min == 0 || self.posts_min > self.posts_max {
            return fail("posts range must satisfy 1 <= posts_min <= posts_max");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail("sigma must be finite and non-negative");
        }
        if ![self.beta_follower, self.beta_hour, self.beta_embed]
            .iter()
            .all(|b| b.is_finite())
        {
            return fail("signal weights must be finite");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail("test_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return fail("missing_rate must lie in [0, 1]");
        }
        match self
            .embedding_dims
            .blocks()
            .iter()
            .find(|(n, _)| *n == self.signal_block)
        {
            Some((_, d)) if *d > 0 => {}
            _ => return fail("signal_block must name an embedding block with a positive dim"),
        }
        if self.embedding_dims.blocks().iter().any(|(_, d)| *d == 0) {
            return fail("embedding dims must be positive");
        }
        Ok(())
    }
}

/// Generated splits plus the ground truth needed to check recovery.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Dataset,
    /// Labeled; writers strip the labels into `labels.csv`.
    pub test: Dataset,
    /// Unit direction in the signal block.
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub tool: String,
    pub version: String,
    pub config: SynthConfig,
    pub direction: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Relative path -> hex SHA-256.
    pub files: BTreeMap<String, String>,
}

const CATEGORIES: [&str; 11] = [
    "animal",
    "art",
    "celebrity",
    "fashion",
    "food",
    "holiday",
    "nature",
    "sports",
    "travel",
    "urban",
    "weather",
];
const CONCEPTS: [&str; 12] = [
    "beach", "bird", "cat", "city", "dog", "flower", "mountain", "night", "portrait", "river",
    "street", "sunset",
];
const CITIES: usize = 25;
// 2019-01-01T00:00:00Z and two years later.
const T_START: i64 = 1_546_300_800;
const T_SPAN: i64 = 2 * 365 * 86_400;

fn log_normal(rng: &mut ChaCha8Rng, mean_log: f64, sd: f64) -> u64 {
    let z: f64 = rng.sample(StandardNormal);
    (mean_log + sd * z).exp().round() as u64
}

fn profile_for(uid: String, rng: &mut ChaCha8Rng) -> UserProfile {
    // log-uniform over [1, 1e6]
    let follower = rng.random_range(0.0..(1e6f64).ln()).exp().round() as u64;
    let lf = (follower as f64).ln_1p();
    let following = log_normal(rng, 0.3 * lf + 4.0, 1.0);
    let total_views = log_normal(rng, lf + 2.0, 0.5);
    let total_faves = log_normal(rng, lf - 1.0, 0.6);
    let total_in_group = log_normal(rng, 0.5 * lf, 0.5);
    let total_tags = log_normal(rng, 0.3 * lf + 3.0, 0.5);
    let total_geotagged = log_normal(rng, 0.3 * lf + 1.0, 0.7);
    let total_images = log_normal(rng, 0.4 * lf + 4.0, 0.5);
    UserProfile::from_counters(
        uid,
        [
            follower,
            following,
            total_views,
            total_faves,
            total_in_group,
            total_tags,
            total_geotagged,
            total_images,
        ]
        .map(Some),
    )
}

/// Builds the synthetic splits in memory. Deterministic per config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.embedding_dims.blocks();
    let signal = dims
        .iter()
        .position(|(n, _)| *n == cfg.signal_block)
        .unwrap();

    let mut direction: Vec<f64> = (0..dims[signal].1)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let cities: Vec<(f64, f64)> = (0..CITIES)
        .map(|_| {
            (
                rng.random_range(-60.0..70.0),
                rng.random_range(-180.0..180.0),
            )
        })
        .collect();
    let jitter = Normal::new(0.0, 0.3).unwrap();
    let miss = |rng: &mut ChaCha8Rng| rng.random_bool(cfg.missing_rate);

    let mut profiles = BTreeMap::new();
    let mut posts = Vec::new();
    let mut vectors: Vec<Vec<(u64, Vec<f32>)>> = vec![Vec::new(); dims.len()];
    let mut next_pid = 1_000_000u64;
    for u in 0..cfg.n_users {
        let uid = format!("{:05}@N{:02}", 10_000 + u * 37, u % 97);
        let profile = profile_for(uid.clone(), &mut rng);
        let lf = (profile.follower.unwrap() as f64).ln_1p();
        profiles.insert(uid.clone(), profile);
        let home = rng.random_range(0..CITIES);
        let favourite = rng.random_range(0..CATEGORIES.len());
        let n_posts = rng.random_range(cfg.posts_min..=cfg.posts_max);
        for _ in 0..n_posts {
            let pid = next_pid;
            next_pid += 1 + rng.random_range(0..5u64);
            let timestamp = T_START + rng.random_range(0..T_SPAN);
            let hour = decompose_timestamp(timestamp).hour as f64;

            let city = if rng.random_bool(0.8) {
                home
            } else {
                rng.random_range(0..CITIES)
            };
            let (lat, lon) = if miss(&mut rng) {
                (None, None)
            } else {
                let (clat, clon) = cities[city];
                let lat: f64 = (clat + jitter.sample(&mut rng)).clamp(-90.0, 90.0);
                let lon: f64 = (clon + jitter.sample(&mut rng)).clamp(-180.0, 180.0);
                (Some(lat), Some(lon))
            };
            let cat = if rng.random_bool(0.6) {
                favourite
            } else {
                rng.random_range(0..CATEGORIES.len())
            };
            let category = (!miss(&mut rng)).then(|| CATEGORIES[cat].to_string());
            let subcategory = (!miss(&mut rng))
                .then(|| format!("{}_{}", CATEGORIES[cat], rng.random_range(0..4)));
            let concept = (!miss(&mut rng))
                .then(|| CONCEPTS[rng.random_range(0..CONCEPTS.len())].to_string());
            let mediatype = (!miss(&mut rng)).then(|| {
                if rng.random_bool(0.95) {
                    "photo"
                } else {
                    "video"
                }
                .to_string()
            });
            let ispublic = (!miss(&mut rng)).then(|| rng.random_bool(0.97));
            let geoaccuracy = (!miss(&mut rng)).then(|| rng.random_range(1..=16u8));

            let mut projection = 0.0;
            for (b, &(_, dim)) in dims.iter().enumerate() {
                let v: Vec<f32> = (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect();
                if b == signal {
                    projection = v.iter().zip(&direction).map(|(a, d)| *a as f64 * d).sum();
                }
                if !miss(&mut rng) {
                    vectors[b].push((pid, v));
                }
            }
            let noise: f64 = rng.sample(StandardNormal);
            let label = cfg.beta_follower * lf
                + cfg.beta_hour * (2.0 * PI * hour / 24.0).sin()
                + cfg.beta_embed * projection
                + cfg.sigma * noise;
            posts.push(PostRecord {
                uid: uid.clone(),
                pid,
                timestamp,
                latitude: lat,
                longitude: lon,
                geoaccuracy,
                category,
                subcategory,
                concept,
                mediatype,
                ispublic,
                label: Some(label),
            });
        }
    }

    // Temporal split: the latest posts form the test set.
    let mut by_time: Vec<usize> = (0..posts.len()).collect();
    by_time.sort_by_key(|&i| (posts[i].timestamp, posts[i].pid));
    let n_test = (posts.len() as f64 * cfg.test_fraction).round() as usize;
    let cut = posts.len() - n_test;
    let mut train_rows = by_time[..cut].to_vec();
    let mut test_rows = by_time[cut..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();

    let mut blocks = Vec::with_capacity(dims.len());
    for ((name, dim), rows) in dims.iter().zip(vectors) {
        let mut block = EmbeddingBlock::new(*name, *dim);
        for (pid, v) in rows {
            block.insert(pid, v)?;
        }
        blocks.push(block);
    }
    let all = join_dataset(posts, profiles, blocks)?;
    Ok(SynthData {
        train: all.subset(&train_rows),
        test: all.subset(&test_rows),
        direction,
    })
}

/// Writes `train/`, `test/` (posts without labels plus `labels.csv`) and
/// `manifest.json` under `out_dir`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthManifest> {
    let data = generate(cfg)?;
    write_synth(cfg, &data, out_dir)
}

pub fn write_synth(cfg: &SynthConfig, data: &SynthData, out_dir: &Path) -> Result<SynthManifest> {
    let train_dir = out_dir.join("train");
    let test_dir = out_dir.join("test");
    write_dataset_dir(&train_dir, &data.train)?;
    let labels = data.test.labels()?;
    let mut unlabeled = data.test.clone();
    unlabeled.posts.iter_mut().for_each(|p| p.label = None);
    write_dataset_dir(&test_dir, &unlabeled)?;
    write_pid_values(
        &test_dir.join("labels.csv"),
        "label",
        &data.test.pids(),
        &labels,
    )?;

    let mut files = BTreeMap::new();
    for (split, dir) in [("train", &train_dir), ("test", &test_dir)] {
        let found = DatasetFiles::discover(dir)?;
        let mut paths: Vec<_> = found.all().into_iter().map(Path::to_path_buf).collect();
        if split == "test" {
            paths.push(dir.join("labels.csv"));
        }
        for p in paths {
            let rel = p
                .strip_prefix(out_dir)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            files.insert(rel, file_digest(&p)?);
        }
    }
    let manifest = SynthManifest {
        tool: "smp".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        direction: data.direction.clone(),
        n_train: data.train.len(),
        n_test: data.test.len(),
        files,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
