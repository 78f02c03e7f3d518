use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::question::{pose_question, Template};
use super::scene::{featurize, generate_scene, AttributeProjection, Scene};
use super::vocab::{token_id, token_str, Answer, VOCABULARY};
use crate::error::{Error, Result};
use crate::model::{FusionInput, ModelConfig, RegionFeature};
use crate::rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub max_regions: usize,
    pub visual_dims: usize,
    /// Std-dev of Gaussian noise on region statistics.
    pub feature_noise: f64,
    /// Probability that an object tag names the wrong shape.
    pub tag_noise: f64,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub min_box: u32,
    pub max_box: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 8000,
            val_size: 1000,
            test_size: 1000,
            max_regions: 5,
            visual_dims: 32,
            feature_noise: 0.1,
            tag_noise: 0.1,
            canvas_width: 100,
            canvas_height: 100,
            min_box: 5,
            max_box: 40,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("every split needs at least one example".into()));
        }
        if self.max_regions == 0 || self.visual_dims == 0 {
            return Err(Error::Config("max_regions and visual_dims must be at least 1".into()));
        }
        if self.min_box == 0 || self.min_box > self.max_box {
            return Err(Error::Config("need 1 <= min_box <= max_box".into()));
        }
        if self.min_box > self.canvas_width || self.min_box > self.canvas_height {
            return Err(Error::Config("min_box exceeds the canvas".into()));
        }
        if !(0.0..=1.0).contains(&self.tag_noise) || self.feature_noise < 0.0 {
            return Err(Error::Config("noise levels out of range".into()));
        }
        Ok(())
    }

    pub fn answer_count(&self) -> usize {
        Answer::class_count(self.max_regions)
    }

    /// Model extents implied by this data.
    pub fn fit_model(&self, mut cfg: ModelConfig) -> ModelConfig {
        cfg.visual_dims = self.visual_dims;
        cfg.answer_count = self.answer_count();
        cfg.vocab_size = VOCABULARY.len();
        cfg.max_regions = self.max_regions;
        cfg.max_tags = self.max_regions;
        cfg.max_question = cfg.max_question.max(6);
        cfg
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }

    fn size(self, cfg: &DataConfig) -> usize {
        match self {
            Split::Train => cfg.train_size,
            Split::Val => cfg.val_size,
            Split::Test => cfg.test_size,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// One generated question about one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub split: Split,
    pub scene_id: u64,
    pub rng_seed: u64,
    pub template: Template,
    pub question_tokens: Vec<usize>,
    pub object_tags: Vec<usize>,
    pub regions: Vec<RegionFeature>,
    /// Answer class index.
    pub answer: usize,
    pub scene: Scene,
}

impl Example {
    pub fn input(&self) -> FusionInput {
        FusionInput {
            question_tokens: self.question_tokens.clone(),
            object_tags: self.object_tags.clone(),
            regions: self.regions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegionRecord {
    stats: Vec<f64>,
    #[serde(rename = "box")]
    bbox: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: u64,
    split: Split,
    scene_id: u64,
    rng_seed: u64,
    template: Template,
    question: Vec<String>,
    tags: Vec<String>,
    regions: Vec<RegionRecord>,
    answer: String,
    answer_id: usize,
    scene: Scene,
}

fn tokens_to_strings(ids: &[usize]) -> Vec<String> {
    ids.iter()
        .map(|&i| token_str(i).unwrap_or("[UNK]").to_string())
        .collect()
}

fn strings_to_tokens(words: &[String]) -> Result<Vec<usize>> {
    words
        .iter()
        .map(|w| token_id(w).ok_or_else(|| Error::format("example", format!("unknown token `{w}`"))))
        .collect()
}

impl Example {
    fn to_record(&self, max_regions: usize) -> ExampleRecord {
        ExampleRecord {
            id: self.id,
            split: self.split,
            scene_id: self.scene_id,
            rng_seed: self.rng_seed,
            template: self.template,
            question: tokens_to_strings(&self.question_tokens),
            tags: tokens_to_strings(&self.object_tags),
            regions: self
                .regions
                .iter()
                .map(|r| RegionRecord {
                    stats: r.stats.clone(),
                    bbox: r.bbox,
                })
                .collect(),
            answer: Answer::from_class_index(self.answer, max_regions)
                .map(|a| a.to_string())
                .unwrap_or_default(),
            answer_id: self.answer,
            scene: self.scene.clone(),
        }
    }

    fn from_record(r: ExampleRecord) -> Result<Self> {
        Ok(Self {
            id: r.id,
            split: r.split,
            scene_id: r.scene_id,
            rng_seed: r.rng_seed,
            template: r.template,
            question_tokens: strings_to_tokens(&r.question)?,
            object_tags: strings_to_tokens(&r.tags)?,
            regions: r
                .regions
                .into_iter()
                .map(|rr| RegionFeature {
                    stats: rr.stats,
                    bbox: rr.bbox,
                })
                .collect(),
            answer: r.answer_id,
            scene: r.scene,
        })
    }

    /// One JSON object on one line.
    pub fn to_json_line(&self, max_regions: usize) -> String {
        serde_json::to_string(&self.to_record(max_regions)).expect("example serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| Error::format("example", e.to_string()))?;
        Self::from_record(rec)
    }
}

/// Builds the example for one per-example seed, or `None` if no question
/// template instantiates unambiguously on the drawn scene.
pub fn generate_example(
    cfg: &DataConfig,
    projection: &AttributeProjection,
    rng_seed: u64,
) -> Option<(Scene, Template, super::question::Posed, Vec<RegionFeature>, Vec<usize>)> {
    let scene = generate_scene(cfg, &mut rng::stream(rng_seed, "scene"));
    let mut qrng = rng::stream(rng_seed, "question");
    let template = Template::ALL[qrng.random_range(0..Template::ALL.len())];
    let posed = pose_question(&scene, template, &mut qrng)?;
    let (regions, tags) = featurize(&scene, projection, cfg, &mut rng::stream(rng_seed, "features"));
    let tags = tags.into_iter().map(|s| s.token()).collect();
    Some((scene, template, posed, regions, tags))
}

/// The attribute projection shared by all splits of a dataset.
pub fn projection_for(cfg: &DataConfig, seed: u64) -> AttributeProjection {
    AttributeProjection::new(cfg.visual_dims, &mut rng::stream(seed, "data/projection"))
}

/// All three splits, generated in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub skipped_scenes: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let projection = projection_for(cfg, seed);
        let mut used_seeds = HashSet::new();
        let mut next_id = 0u64;
        let mut skipped = 0;
        let mut splits = Vec::with_capacity(3);
        for split in Split::ALL {
            let mut stream = rng::stream(seed, &format!("data/{}", split.name()));
            let want = split.size(cfg);
            let mut out = Vec::with_capacity(want);
            let mut scene_id = 0u64;
            while out.len() < want {
                let rng_seed = stream.next_u64();
                if !used_seeds.insert(rng_seed) {
                    continue;
                }
                let this_scene = scene_id;
                scene_id += 1;
                let Some((scene, template, posed, regions, tags)) = generate_example(cfg, &projection, rng_seed) else {
                    log::debug!("{split}: skipping scene {this_scene}, no unambiguous question");
                    skipped += 1;
                    continue;
                };
                out.push(Example {
                    id: next_id,
                    split,
                    scene_id: this_scene,
                    rng_seed,
                    template,
                    question_tokens: posed.tokens,
                    object_tags: tags,
                    regions,
                    answer: posed.answer.class_index(cfg.max_regions),
                    scene,
                });
                next_id += 1;
            }
            splits.push(out);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Self {
            config: cfg.clone(),
            seed,
            train,
            val,
            test,
            skipped_scenes: skipped,
        })
    }

    /// Write the split files, then the manifest.
    pub fn write(&self, dir: &Path, overwrite: bool) -> Result<Manifest> {
        let targets: Vec<PathBuf> = Split::ALL
            .iter()
            .map(|s| dir.join(s.file_name()))
            .chain(std::iter::once(dir.join(MANIFEST_FILE)))
            .collect();
        if !overwrite {
            if let Some(existing) = targets.iter().find(|p| p.exists()) {
                return Err(Error::AlreadyExists(existing.clone()));
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut splits = Vec::new();
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let mut bytes = Vec::new();
            for ex in self.split(split) {
                bytes.extend_from_slice(ex.to_json_line(self.config.max_regions).as_bytes());
                bytes.push(b'\n');
            }
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
            splits.push(SplitEntry {
                name: split,
                file: split.file_name(),
                size: self.split(split).len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            format_version: DATASET_FORMAT_VERSION,
            seed: self.seed,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            splits,
            answers: Answer::labels(self.config.max_regions),
            vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
            skipped_scenes: self.skipped_scenes,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let mut splits = Vec::new();
        for entry in &manifest.splits {
            let examples = load_split_file(&dir.join(&entry.file))?;
            if examples.len() != entry.size {
                return Err(Error::format(
                    "dataset",
                    format!(
                        "{} has {} examples, manifest says {}",
                        entry.file,
                        examples.len(),
                        entry.size
                    ),
                ));
            }
            splits.push((entry.name, examples));
        }
        let mut take = |s: Split| {
            splits
                .iter()
                .position(|(n, _)| *n == s)
                .map(|i| splits.swap_remove(i).1)
                .ok_or_else(|| Error::format("manifest", format!("missing split {s}")))
        };
        Ok(Self {
            train: take(Split::Train)?,
            val: take(Split::Val)?,
            test: take(Split::Test)?,
            config: manifest.config,
            seed: manifest.seed,
            skipped_scenes: manifest.skipped_scenes,
        })
    }
}

pub fn load_split_file(path: &Path) -> Result<Vec<Example>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            Example::from_json_line(&line)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: Split,
    pub file: String,
    pub size: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: DataConfig,
    pub splits: Vec<SplitEntry>,
    pub answers: Vec<String>,
    pub vocabulary: Vec<String>,
    pub skipped_scenes: usize,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                "manifest",
                format!("unsupported format version {}", m.format_version),
            ));
        }
        Ok(m)
    }
}

/// Count of examples per answer class.
pub fn answer_histogram(examples: &[Example], answer_count: usize) -> Vec<usize> {
    let mut h = vec![0; answer_count];
    for ex in examples {
        h[ex.answer] += 1;
    }
    h
}
