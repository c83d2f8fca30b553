//! Experiment configuration and the end-to-end pipeline.
//!
//! A run directory holds every artifact of one configuration:
//!
//! ```text
//! config.toml          the configuration (with its hash in a comment)
//! canvas.json          canvas set of the development images
//! model.bin            trained network, model.json its metadata
//! optimizer.bin        optimizer state after the last epoch
//! train_log.jsonl      one line per epoch
//! features/            exploit.{f32,json}, dev.{f32,json}
//! classifiers.json     writer-dependent SVMs
//! scores.jsonl         verification scores
//! report.json/.txt     metrics
//! summary.json         training accuracy, warnings, stage timings
//! error.txt            only when a stage failed
//! ```
//!
//! Every artifact carries the configuration hash, and stages refuse inputs
//! produced under a different hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::{manifest_root, DatasetManifest, Split};
use crate::metrics::{build_report, read_scores, write_scores, MetricsReport, ScoreRecord, ScoreSet};
use crate::nn::{
    build_architecture, decode_optimizer, encode_optimizer, glorot_init, load_model, save_model, LrSchedule, Model,
    NetworkSpec,
};
use crate::sigproc::{
    assign_canvas, center_in_canvas, compute_canvas_set, fit_to_canvas, remove_background_and_invert, resize_bilinear,
    CanvasSet, Raster,
};
use crate::synth::{generate_synthetic_dataset, SynthConfig};
use crate::trainer::{
    evaluate_users, finetune, finetune_config, train, EpochStats, Protocol, TrainConfig, TrainData, TrainSample,
    UserEval,
};
use crate::wd::{
    extract_features, score_writers, train_writer_classifiers, ClassifierBundle, FeatureProtocol, FeatureRecord,
    FeatureSet, NegativePolicy, SampleKind, WdProtocol,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub name: String,
    /// Nominal input override for fixed-size networks.
    pub input: Option<(usize, usize)>,
    pub forgery_head: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig { name: "SigNet-SPP-desk".into(), input: None, forgery_head: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Forgery-loss weight; used only with a forgery head.
    pub lambda: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multi-size padding bound; default 10% of each canvas.
    pub max_pad: Option<(usize, usize)>,
    /// Size fixed-size networks' canvases are resized to before random
    /// cropping; default nominal input scaled by 170/150 x 242/220.
    pub load_size: Option<(usize, usize)>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda: 0.5,
            schedule: t.schedule,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            max_pad: None,
            load_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SynthConfig),
    /// Manifest file; image paths resolve against its directory.
    Manifest {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub protocol: Protocol,
    /// Training canvas of the fixed protocol; default the largest canvas.
    pub canvas: Option<(usize, usize)>,
    /// Excluded from the hash.
    pub output: PathBuf,
    /// Worker threads; excluded from the hash.
    pub threads: Option<usize>,
    pub architecture: ArchitectureConfig,
    pub train: TrainSection,
    pub wd: WdProtocol,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            protocol: Protocol::Multi,
            canvas: None,
            output: PathBuf::from("runs/default"),
            threads: None,
            architecture: ArchitectureConfig::default(),
            train: TrainSection::default(),
            wd: WdProtocol::default(),
            data: DataSource::Synthetic(SynthConfig::default()),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale setup: 10 + 10 synthetic writers, 30 epochs, five
    /// references per writer and eight development negatives per writer.
    pub fn desk() -> Self {
        ExperimentConfig {
            output: PathBuf::from("runs/desk"),
            train: TrainSection { epochs: 30, ..TrainSection::default() },
            wd: WdProtocol { reference: 5, negatives: NegativePolicy::Dev { per_writer: 8 }, ..WdProtocol::default() },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, ignoring output and threads.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { output: PathBuf::new(), threads: None, ..self.clone() };
        format!("{:x}", Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn spec(&self, users: usize) -> Result<NetworkSpec> {
        let a = &self.architecture;
        build_architecture(&a.name, a.input, users, a.forgery_head)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec(2)?;
        if !spec.has_spp() && self.protocol == Protocol::Multi {
            return Err(Error::Config(format!("{} has no SPP layer; multi-size training needs one", spec.name)));
        }
        if !(0.0..=1.0).contains(&self.train.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.train.lambda)));
        }
        if self.wd.reference == 0 {
            return Err(Error::Config("at least one reference signature is needed".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }
}

/// How development images become network inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// Fixed-size network: fit in `canvas`, resize to `load`, random-crop the
    /// nominal input.
    Resized { canvas: (usize, usize), load: (usize, usize) },
    /// SPP network on one canvas, random crops of `crop`.
    Canvas { canvas: (usize, usize), crop: (usize, usize) },
    /// SPP network on the five canvases.
    MultiCanvas(CanvasSet),
}

fn scale(dims: (usize, usize), num: (usize, usize), den: (usize, usize)) -> (usize, usize) {
    let s = |v: usize, n: usize, d: usize| ((v * n) as f64 / d as f64).round() as usize;
    (s(dims.0, num.0, den.0), s(dims.1, num.1, den.1))
}

/// Load size of a fixed-size network: nominal input plus the 170/150 x
/// 242/220 crop margin.
pub fn default_load_size(nominal: (usize, usize)) -> (usize, usize) {
    scale(nominal, (170, 242), (150, 220))
}

impl Layout {
    pub fn new(config: &ExperimentConfig, spec: &NetworkSpec, canvas_set: &CanvasSet) -> Layout {
        let canvas = config.canvas.unwrap_or_else(|| canvas_set.max_canvas());
        match (spec.nominal_input, config.protocol) {
            (Some(nominal), _) => {
                Layout::Resized { canvas, load: config.train.load_size.unwrap_or_else(|| default_load_size(nominal)) }
            }
            (None, Protocol::Fixed) => Layout::Canvas { canvas, crop: scale(canvas, (150, 220), (170, 242)) },
            (None, Protocol::Multi) => Layout::MultiCanvas(canvas_set.clone()),
        }
    }

    pub fn feature_protocol(&self) -> FeatureProtocol {
        match self {
            Layout::Resized { canvas, load } => FeatureProtocol::NonSpp { canvas: *canvas, input: *load, resize: true },
            Layout::Canvas { canvas, .. } => FeatureProtocol::SppFixed { canvas: *canvas },
            Layout::MultiCanvas(_) => FeatureProtocol::SppMulti,
        }
    }

    fn crop(&self) -> Option<(usize, usize)> {
        match self {
            Layout::Canvas { crop, .. } => Some(*crop),
            _ => None,
        }
    }

    /// Places (image, user, forgery) triples according to the layout.
    pub fn arrange(&self, samples: Vec<(&Raster, usize, bool)>) -> Result<TrainData> {
        let place = |img: &Raster, canvas: (usize, usize)| {
            let (h, w) = img.dims();
            if h <= canvas.0 && w <= canvas.1 {
                center_in_canvas(img, canvas.0, canvas.1)
            } else {
                fit_to_canvas(img, canvas.0, canvas.1)
            }
        };
        let sample = |image, user, forgery| TrainSample { image, user, forgery };
        match self {
            Layout::Resized { canvas, load } => samples
                .into_par_iter()
                .map(|(img, u, f)| Ok(sample(resize_bilinear(&place(img, *canvas)?, load.0, load.1)?, u, f)))
                .collect::<Result<Vec<_>>>()
                .map(TrainData::Fixed),
            Layout::Canvas { canvas, .. } => samples
                .into_par_iter()
                .map(|(img, u, f)| Ok(sample(place(img, *canvas)?, u, f)))
                .collect::<Result<Vec<_>>>()
                .map(TrainData::Fixed),
            Layout::MultiCanvas(set) => {
                let mut groups: Vec<Vec<TrainSample>> = vec![Vec::new(); 5];
                for (img, u, f) in samples {
                    let id = assign_canvas(img.dims(), set)?;
                    let (h, w) = set.canvases[id];
                    groups[id].push(sample(center_in_canvas(img, h, w)?, u, f));
                }
                Ok(TrainData::Multi(groups))
            }
        }
    }
}

/// Cleaned images with their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub images: Vec<Raster>,
}

impl Prepared {
    pub fn dims(&self, split: Split) -> Vec<(usize, usize)> {
        self.manifest.records_in(split).map(|(i, _)| self.images[i].dims()).collect()
    }

    /// Development writers in ascending order; position is the class index.
    pub fn dev_writers(&self) -> Vec<u32> {
        self.manifest.writers(Split::Dev).into_iter().collect()
    }

    /// Training triples of the development split. Forgeries are included
    /// only when `forgeries` is set.
    pub fn dev_samples(&self, forgeries: bool) -> Vec<(&Raster, usize, bool)> {
        let index: BTreeMap<u32, usize> = self.dev_writers().into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        self.manifest
            .records_in(Split::Dev)
            .filter(|(_, r)| forgeries || !r.forgery)
            .map(|(i, r)| (&self.images[i], index[&r.writer], r.forgery))
            .collect()
    }
}

/// Removes backgrounds and inverts every image.
pub fn preprocess(manifest: DatasetManifest, raw: &[Raster]) -> Result<Prepared> {
    let images = raw
        .par_iter()
        .zip(&manifest.records)
        .map(|(img, rec)| remove_background_and_invert(img).map_err(|e| Error::Data(format!("{}: {e}", rec.path))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { manifest, images })
}

/// Raw images and manifest named by the configuration.
pub fn load_data(source: &DataSource) -> Result<(DatasetManifest, Vec<Raster>)> {
    match source {
        DataSource::Synthetic(cfg) => {
            let d = generate_synthetic_dataset(cfg)?;
            Ok((d.manifest, d.images))
        }
        DataSource::Manifest { path } => {
            let m = DatasetManifest::load(path)?;
            let images = m.load_images(&manifest_root(path))?;
            Ok((m, images))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config_hash: String,
    pub architecture: String,
    pub epochs: usize,
    /// Development writers in class-index order.
    pub writers: Vec<u32>,
    pub train: UserEval,
}

#[derive(Serialize, Deserialize)]
struct CanvasArtifact {
    config_hash: String,
    canvas_set: CanvasSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub train: UserEval,
    pub final_loss: Option<f64>,
    pub warnings: Vec<String>,
    pub stage_seconds: BTreeMap<String, f64>,
}

/// Outcome of a training stage.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model<f32>,
    pub history: Vec<EpochStats>,
    pub eval: UserEval,
}

/// Features of both splits; development features only when negatives come
/// from the development set.
#[derive(Debug, Clone)]
pub struct Features {
    pub exploit: FeatureSet,
    pub dev: Option<FeatureSet>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn check_hash(found: &str, expected: &str, what: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::Data(format!("{} was produced by config {found}, this run is {expected}", what.display())));
    }
    Ok(())
}

/// One configuration bound to its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub hash: String,
}

impl Run {
    /// Validates the configuration, creates the directory and writes
    /// `config.toml`.
    pub fn create(config: ExperimentConfig) -> Result<Run> {
        config.validate()?;
        let dir = config.output.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let hash = config.hash();
        let path = dir.join("config.toml");
        let text = format!("# config hash {hash}\n{}", config.to_toml());
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(Run { config, dir, hash })
    }

    /// Reopens a run directory from its `config.toml`.
    pub fn open(dir: &Path) -> Result<Run> {
        let mut config = ExperimentConfig::load(&dir.join("config.toml"))?;
        config.output = dir.to_path_buf();
        let hash = config.hash();
        Ok(Run { config, dir: dir.to_path_buf(), hash })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let (manifest, raw) = load_data(&self.config.data).map_err(|e| e.in_stage("data"))?;
        preprocess(manifest, &raw).map_err(|e| e.in_stage("preprocess"))
    }

    /// Writes cleaned PNGs and their manifest under `preprocessed/`.
    pub fn write_preprocessed(&self, prepared: &Prepared) -> Result<PathBuf> {
        let root = self.path("preprocessed");
        for (rec, img) in prepared.manifest.records.iter().zip(&prepared.images) {
            let p = root.join(&rec.path);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            crate::sigproc::write_png(img, &p)?;
        }
        let mut manifest = prepared.manifest.clone();
        manifest.canvas_set = Some("../canvas.json".into());
        let path = root.join("manifest.jsonl");
        manifest.save(&path)?;
        Ok(path)
    }

    pub fn canvas(&self, prepared: &Prepared) -> Result<CanvasSet> {
        let set = compute_canvas_set(&prepared.dims(Split::Dev)).map_err(|e| e.in_stage("canvas"))?;
        let artifact = CanvasArtifact { config_hash: self.hash.clone(), canvas_set: set };
        write_json(&self.path("canvas.json"), &artifact)?;
        Ok(artifact.canvas_set)
    }

    pub fn load_canvas(&self) -> Result<CanvasSet> {
        let path = self.path("canvas.json");
        let a: CanvasArtifact = read_json(&path)?;
        check_hash(&a.config_hash, &self.hash, &path)?;
        Ok(a.canvas_set)
    }

    pub fn layout(&self, spec: &NetworkSpec, canvas_set: &CanvasSet) -> Layout {
        Layout::new(&self.config, spec, canvas_set)
    }

    fn train_config(&self, layout: &Layout) -> TrainConfig {
        let t = &self.config.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda: self.config.architecture.forgery_head.then_some(t.lambda),
            schedule: t.schedule.clone(),
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            protocol: self.config.protocol,
            seed: self.config.seed,
            max_pad: t.max_pad,
            crop: layout.crop(),
        }
    }

    /// Trains from scratch on the development split.
    pub fn train(&self, prepared: &Prepared, canvas_set: &CanvasSet) -> Result<Trained> {
        self.train_inner(prepared, canvas_set).map_err(|e| e.in_stage("train"))
    }

    fn train_inner(&self, prepared: &Prepared, canvas_set: &CanvasSet) -> Result<Trained> {
        let writers = prepared.dev_writers();
        let spec = self.config.spec(writers.len())?;
        let layout = self.layout(&spec, canvas_set);
        let data = layout.arrange(prepared.dev_samples(spec.forgery_head))?;
        let tc = self.train_config(&layout);
        let mut model = glorot_init(spec, self.config.seed)?;
        tc.validate(&model)?;
        let mut optimizer = tc.optimizer(&model)?;
        let log_path = self.path("train_log.jsonl");
        let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(log, "{}", serde_json::json!({ "config_hash": self.hash })).map_err(|e| Error::io(&log_path, e))?;
        let history = train(&mut model, &data, &tc, &mut optimizer, Some(&mut log))?;
        let eval = evaluate_users(&model, &data, tc.batch_size, tc.crop)?;
        let opt_path = self.path("optimizer.bin");
        fs::write(&opt_path, encode_optimizer(&optimizer)).map_err(|e| Error::io(&opt_path, e))?;
        self.save_model(&model, &writers, tc.epochs, eval)?;
        Ok(Trained { model, history, eval })
    }

    fn save_model(&self, model: &Model<f32>, writers: &[u32], epochs: usize, eval: UserEval) -> Result<()> {
        save_model(model, &self.path("model.bin"))?;
        let meta = ModelMeta {
            config_hash: self.hash.clone(),
            architecture: model.spec().name.clone(),
            epochs,
            writers: writers.to_vec(),
            train: eval,
        };
        write_json(&self.path("model.json"), &meta)
    }

    pub fn load_model(&self) -> Result<(Model<f32>, ModelMeta)> {
        let meta_path = self.path("model.json");
        let meta: ModelMeta = read_json(&meta_path)?;
        check_hash(&meta.config_hash, &self.hash, &meta_path)?;
        let model = load_model(&self.path("model.bin"))?;
        Ok((model, meta))
    }

    /// Resumes training from `model.bin` and `optimizer.bin` up to the
    /// configured epoch count.
    pub fn resume(&self, prepared: &Prepared, canvas_set: &CanvasSet) -> Result<Trained> {
        let (mut model, meta) = self.load_model()?;
        let opt_path = self.path("optimizer.bin");
        let bytes = fs::read(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
        let mut optimizer = decode_optimizer(&bytes, &model)?;
        let layout = self.layout(model.spec(), canvas_set);
        let data = layout.arrange(prepared.dev_samples(model.spec().forgery_head))?;
        let tc = self.train_config(&layout);
        let log_path = self.path("train_log.jsonl");
        let mut log = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let history = train(&mut model, &data, &tc, &mut optimizer, Some(&mut log)).map_err(|e| e.in_stage("train"))?;
        let eval = evaluate_users(&model, &data, tc.batch_size, tc.crop)?;
        fs::write(&opt_path, encode_optimizer(&optimizer)).map_err(|e| Error::io(&opt_path, e))?;
        self.save_model(&model, &meta.writers, tc.epochs, eval)?;
        Ok(Trained { model, history, eval })
    }

    /// Adapts the model of `source` to this run's development writers.
    ///
    /// Sizing follows the source protocol: fixed-size networks reuse the
    /// source canvas and load size; single-canvas SPP networks alternate the
    /// source and target largest canvases; multi-size SPP networks use the
    /// five canvases of the target set.
    pub fn finetune(&self, source: &Run, prepared: &Prepared, target_canvas: &CanvasSet) -> Result<Trained> {
        self.finetune_inner(source, prepared, target_canvas).map_err(|e| e.in_stage("finetune"))
    }

    fn finetune_inner(&self, source: &Run, prepared: &Prepared, target_canvas: &CanvasSet) -> Result<Trained> {
        let (source_model, _) = source.load_model()?;
        let source_canvas = source.load_canvas()?;
        let writers = prepared.dev_writers();
        let samples = prepared.dev_samples(source_model.spec().forgery_head);
        let source_layout = source.layout(source_model.spec(), &source_canvas);
        let (data, crop) = match &source_layout {
            Layout::Resized { .. } => (source_layout.arrange(samples)?, None),
            Layout::Canvas { canvas, .. } => {
                let target = target_canvas.max_canvas();
                let mut groups = vec![Vec::new(), Vec::new()];
                for (img, u, f) in samples {
                    let (h, w) = img.dims();
                    let (g, c) = if h <= canvas.0 && w <= canvas.1 { (0, *canvas) } else { (1, target) };
                    let image = if h <= c.0 && w <= c.1 {
                        center_in_canvas(img, c.0, c.1)?
                    } else {
                        fit_to_canvas(img, c.0, c.1)?
                    };
                    groups[g].push(TrainSample { image, user: u, forgery: f });
                }
                (TrainData::Multi(groups), None)
            }
            Layout::MultiCanvas(_) => (Layout::MultiCanvas(target_canvas.clone()).arrange(samples)?, None),
        };
        let base = TrainConfig {
            lambda: source_model.spec().forgery_head.then_some(self.config.train.lambda),
            ..self.train_config(&source_layout)
        };
        let tc = finetune_config(&base, self.config.train.epochs);
        let (model, history) = finetune(&source_model, &data, writers.len(), &tc)?;
        let eval = evaluate_users(&model, &data, tc.batch_size, crop)?;
        self.save_model(&model, &writers, tc.epochs, eval)?;
        let log_path = self.path("train_log.jsonl");
        let mut lines =
            vec![serde_json::json!({ "config_hash": self.hash, "finetuned_from": source.hash }).to_string()];
        lines.extend(history.iter().map(|s| serde_json::to_string(s).expect("stats serialize")));
        fs::write(&log_path, lines.join("\n") + "\n").map_err(|e| Error::io(&log_path, e))?;
        Ok(Trained { model, history, eval })
    }

    /// Extracts exploitation features (and development genuine features when
    /// negatives come from the development set).
    pub fn extract(&self, model: &Model<f32>, prepared: &Prepared, canvas_set: &CanvasSet) -> Result<Features> {
        let protocol = self.layout(model.spec(), canvas_set).feature_protocol();
        let extract = |split: Split, genuine_only: bool| -> Result<FeatureSet> {
            let rows: Vec<(usize, &crate::manifest::ManifestRecord)> =
                prepared.manifest.records_in(split).filter(|(_, r)| !(genuine_only && r.forgery)).collect();
            let values = rows
                .par_iter()
                .map(|(i, r)| {
                    extract_features(model, &prepared.images[*i], &protocol)
                        .map_err(|e| Error::Data(format!("{}: {e}", r.path)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut set = FeatureSet::new(model.feature_dim(), self.hash.clone());
            for ((_, r), v) in rows.iter().zip(&values) {
                let kind = if r.forgery { SampleKind::Skilled } else { SampleKind::Genuine };
                set.push(FeatureRecord { id: r.path.clone(), writer: r.writer, kind }, v)?;
            }
            Ok(set)
        };
        let run = || -> Result<Features> {
            let exploit = extract(Split::Exploit, false)?;
            let dev = match self.config.wd.negatives {
                NegativePolicy::Dev { .. } => Some(extract(Split::Dev, true)?),
                NegativePolicy::Peer { .. } => None,
            };
            let dir = self.path("features");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            exploit.save(&dir.join("exploit"))?;
            if let Some(d) = &dev {
                d.save(&dir.join("dev"))?;
            }
            Ok(Features { exploit, dev })
        };
        run().map_err(|e| e.in_stage("extract"))
    }

    pub fn load_features(&self) -> Result<Features> {
        let dir = self.path("features");
        let exploit = FeatureSet::load(&dir.join("exploit"))?;
        check_hash(&exploit.config_hash, &self.hash, &dir.join("exploit.json"))?;
        let dev = match self.config.wd.negatives {
            NegativePolicy::Dev { .. } => {
                let d = FeatureSet::load(&dir.join("dev"))?;
                check_hash(&d.config_hash, &self.hash, &dir.join("dev.json"))?;
                Some(d)
            }
            NegativePolicy::Peer { .. } => None,
        };
        Ok(Features { exploit, dev })
    }

    pub fn train_wd(&self, features: &Features) -> Result<ClassifierBundle> {
        let run = || {
            let bundle =
                train_writer_classifiers(&features.exploit, features.dev.as_ref(), &self.config.wd, self.config.seed)?;
            bundle.save(&self.path("classifiers.json"))?;
            Ok(bundle)
        };
        run().map_err(|e: Error| e.in_stage("wd"))
    }

    pub fn load_classifiers(&self) -> Result<ClassifierBundle> {
        let path = self.path("classifiers.json");
        let b = ClassifierBundle::load(&path)?;
        check_hash(&b.config_hash, &self.hash, &path)?;
        Ok(b)
    }

    pub fn score(&self, features: &Features, bundle: &ClassifierBundle) -> Result<Vec<ScoreRecord>> {
        let run = || {
            let records = score_writers(&features.exploit, bundle, self.config.seed)?;
            write_scores(&self.path("scores.jsonl"), &self.hash, &records)?;
            Ok(records)
        };
        run().map_err(|e: Error| e.in_stage("score"))
    }

    pub fn load_scores(&self) -> Result<Vec<ScoreRecord>> {
        let path = self.path("scores.jsonl");
        let (hash, records) = read_scores(&path)?;
        check_hash(&hash, &self.hash, &path)?;
        Ok(records)
    }

    /// Metrics at decision threshold 0.
    pub fn report(&self, records: &[ScoreRecord]) -> Result<MetricsReport> {
        let run = || {
            let set = ScoreSet::from_records(records)?;
            let report = build_report(&set, 0.0, &self.hash)?;
            let json = self.path("report.json");
            fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
            let txt = self.path("report.txt");
            fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
            Ok(report)
        };
        run().map_err(|e: Error| e.in_stage("metrics"))
    }

    /// Records a failure in `error.txt`.
    pub fn record_error(&self, error: &Error) {
        let path = self.path("error.txt");
        if let Err(e) = fs::write(&path, format!("{error}\n")) {
            log::error!("could not write {}: {e}", path.display());
        }
    }
}

/// Result of a full pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub summary: RunSummary,
    pub history: Vec<EpochStats>,
}

/// Runs `f` on a pool of `threads` workers, or the global pool.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Preprocess, canvas partition, training, feature extraction, WD training,
/// scoring and metrics. On failure the error is also written to `error.txt`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let run = Run::create(config.clone())?;
    let result = with_threads(config.threads, || run_stages(&run)).and_then(|r| r);
    if let Err(e) = &result {
        run.record_error(e);
    }
    result
}

fn run_stages(run: &Run) -> Result<RunOutcome> {
    let mut seconds = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, seconds: &mut BTreeMap<String, f64>| {
        seconds.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    let prepared = run.prepare()?;
    lap("preprocess", &mut seconds);
    let canvas = run.canvas(&prepared)?;
    lap("canvas", &mut seconds);
    let trained = run.train(&prepared, &canvas)?;
    lap("train", &mut seconds);
    let features = run.extract(&trained.model, &prepared, &canvas)?;
    lap("extract", &mut seconds);
    let bundle = run.train_wd(&features)?;
    lap("wd", &mut seconds);
    let scores = run.score(&features, &bundle)?;
    lap("score", &mut seconds);
    let report = run.report(&scores)?;
    lap("metrics", &mut seconds);
    let summary = RunSummary {
        config_hash: run.hash.clone(),
        train: trained.eval,
        final_loss: trained.history.last().map(|s| s.loss),
        warnings: canvas.warnings.clone(),
        stage_seconds: seconds,
    };
    write_json(&run.path("summary.json"), &summary)?;
    Ok(RunOutcome { report, summary, history: trained.history })
}
