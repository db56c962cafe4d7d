//! End-to-end orchestration: data, balancing, diffusion training, synthesis,
//! student training (baseline and augmented) and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::{compute_balancing_factor, BalancingFactor};
use crate::checkpoint::Checkpoint;
use crate::diffusion_train::{train_diffusion, DiffTrainConfig};
use crate::error::{Error, Result};
use crate::metrics::Report;
use crate::numerics::{softmax, RNG_ALGORITHM};
use crate::schedule::ScheduleParams;
use crate::sampler::{synthesize_dataset, SamplerConfig, SamplerSetup};
use crate::student::{evaluate_student, train_student, Student, StudentTrainConfig};
use crate::toydata::export::{encode_ppm, to_gray, write_bytes, PALETTE};
use crate::toydata::{generate_dataset, DatasetManifest, SceneSpec, Split, TargetKind};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub size: usize,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Per-class scene probabilities; defaults to the generator's.
    pub class_probs: Option<Vec<f64>>,
    pub looks: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            size: s.size,
            num_classes: s.num_classes,
            n_train: 256,
            n_test: 128,
            class_probs: None,
            looks: s.looks,
        }
    }
}

impl DataConfig {
    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        let default = SceneSpec::default();
        SceneSpec {
            size: self.size,
            num_classes: self.num_classes,
            class_probs: self
                .class_probs
                .clone()
                .unwrap_or_else(|| default.class_probs[..self.num_classes].to_vec()),
            looks: self.looks,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerStage {
    pub ddim_steps: usize,
    pub eta: f64,
}

impl Default for SamplerStage {
    fn default() -> Self {
        Self {
            ddim_steps: 200,
            eta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub diffusion: DiffTrainConfig,
    pub sampler: SamplerStage,
    pub student: StudentTrainConfig,
    pub student_seeds: Vec<u64>,
    pub aug_ratio: f64,
    /// Also train students on the generated set with argmax-hardened labels.
    pub hard_label_ablation: bool,
    pub render_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            diffusion: DiffTrainConfig::default(),
            sampler: SamplerStage::default(),
            student: StudentTrainConfig::default(),
            student_seeds: vec![0, 1, 2],
            aug_ratio: 1.0,
            hard_label_ablation: true,
            render_count: 8,
        }
    }
}

impl PipelineConfig {
    /// 16x16, three classes, 300 diffusion steps: finishes in seconds.
    pub fn micro() -> Self {
        Self {
            data: DataConfig {
                size: 16,
                num_classes: 3,
                n_train: 32,
                n_test: 16,
                ..DataConfig::default()
            },
            diffusion: DiffTrainConfig {
                steps: 300,
                batch_size: 4,
                width: 8,
                schedule: ScheduleParams {
                    steps: 200,
                    ..ScheduleParams::default()
                },
                ..DiffTrainConfig::default()
            },
            sampler: SamplerStage {
                ddim_steps: 20,
                eta: 0.0,
            },
            student: StudentTrainConfig {
                epochs: 5,
                width: 8,
                eval_every: 0,
                ..StudentTrainConfig::default()
            },
            student_seeds: vec![0],
            ..Self::default()
        }
    }

    /// 32x32, five classes, 256/128 tiles, 3000 diffusion steps, three
    /// student seeds: sized for a single CPU core in well under 30 minutes.
    pub fn desk() -> Self {
        Self {
            diffusion: DiffTrainConfig {
                steps: 3000,
                batch_size: 8,
                width: 16,
                schedule: ScheduleParams {
                    steps: 200,
                    ..ScheduleParams::default()
                },
                ..DiffTrainConfig::default()
            },
            sampler: SamplerStage {
                ddim_steps: 50,
                eta: 0.0,
            },
            student: StudentTrainConfig {
                epochs: 30,
                width: 8,
                eval_every: 0,
                ..StudentTrainConfig::default()
            },
            ..Self::default()
        }
    }
}

/// splitmix64 finalizer, used to derive per-stage seeds.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_DATA: u64 = 1;
const STAGE_DIFFUSION: u64 = 2;
const STAGE_SAMPLER: u64 = 3;

pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub config_hash: Option<String>,
    /// Artifact paths relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub aug_ratio: f64,
    pub hard_labels: bool,
    pub seeds: Vec<u64>,
    pub miou: Vec<f64>,
    pub f1: Vec<f64>,
    pub mean_miou: f64,
    pub mean_f1: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparativeReport {
    pub rows: Vec<VariantRow>,
}

impl ComparativeReport {
    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("variant        mIoU     F1       prec     recall   acc\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4}\n",
                r.variant, r.mean_miou, r.mean_f1, r.mean_precision, r.mean_recall, r.mean_accuracy
            ));
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: Option<PipelineConfig>,
    pub seed: u64,
    pub rng_algorithm: String,
    pub balancing_factor: Option<BalancingFactor>,
    pub stages: Vec<StageRecord>,
    pub report: Option<ComparativeReport>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A failed stage together with everything recorded before it.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: String,
    pub error: Error,
    pub manifest: RunManifest,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

struct Run<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Path, &mut StageRecord) -> Result<T>) -> Result<T, StageFailure> {
        let mut record = StageRecord {
            name: name.to_string(),
            ..StageRecord::default()
        };
        log::info!("stage {name}");
        match f(self.dir, &mut record) {
            Ok(v) => {
                self.manifest.stages.push(record);
                let _ = self.manifest.save(&self.dir.join("run_manifest.json"));
                Ok(v)
            }
            Err(error) => {
                let _ = self.manifest.save(&self.dir.join("run_manifest.json"));
                Err(StageFailure {
                    stage: name.to_string(),
                    error,
                    manifest: self.manifest.clone(),
                })
            }
        }
    }
}

struct Variant {
    name: &'static str,
    aug_ratio: f64,
    hard_labels: bool,
}

/// Runs every stage under `out_dir` and returns the run manifest (also
/// written to `out_dir/run_manifest.json`).
pub fn cmd_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<RunManifest, StageFailure> {
    let fail = |stage: &str, error: Error| StageFailure {
        stage: stage.to_string(),
        error,
        manifest: RunManifest::default(),
    };
    if config.student_seeds.is_empty() {
        return Err(fail("config", Error::param("student_seeds must not be empty")));
    }
    if !(config.aug_ratio >= 0.0) {
        return Err(fail("config", Error::param("aug_ratio must be >= 0")));
    }
    fs::create_dir_all(out_dir).map_err(|e| fail("config", Error::io(out_dir, e)))?;
    let mut run = Run {
        dir: out_dir,
        manifest: RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: hash_json(config).map_err(|e| fail("config", e))?,
            config: Some(config.clone()),
            seed: config.seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            ..RunManifest::default()
        },
    };

    let spec = config.data.scene_spec(derive_seed(config.seed, STAGE_DATA));
    let data_dir = out_dir.join("data");
    let mut data = run.stage("gen-data", |base, rec| {
        rec.config_hash = Some(hash_json(&spec)?);
        let m = generate_dataset(&spec, config.data.n_train, config.data.n_test, &data_dir)?;
        rec.outputs.insert("manifest".into(), rel(base, &data_dir.join("manifest.json")));
        rec.checksums.insert("data".into(), m.checksum()?);
        Ok(m)
    })?;

    let factor = run.stage("balance", |base, rec| {
        let f = compute_balancing_factor(&data)?;
        data.balancing_factor = Some(f.clone());
        data.save(&data_dir.join("manifest.json"))?;
        rec.outputs.insert("manifest".into(), rel(base, &data_dir.join("manifest.json")));
        Ok(f)
    })?;
    run.manifest.balancing_factor = Some(factor.clone());

    let mut diff_cfg = config.diffusion.clone();
    diff_cfg.seed = derive_seed(config.seed, STAGE_DIFFUSION);
    diff_cfg.resolution = config.data.size;
    diff_cfg.b = None;
    let diff_dir = out_dir.join("diffusion");
    let trained = run.stage("train-diffusion", |base, rec| {
        rec.config_hash = Some(hash_json(&diff_cfg)?);
        let out = train_diffusion(&diff_cfg, &data, Some(&diff_dir))?;
        let ck = diff_dir.join("denoiser.ckpt");
        rec.outputs.insert("checkpoint".into(), rel(base, &ck));
        rec.outputs.insert("loss_trace".into(), rel(base, &diff_dir.join("loss_trace.jsonl")));
        rec.checksums
            .insert("checkpoint".into(), hex::encode(Sha256::digest(out.checkpoint.to_bytes()?)));
        Ok(out)
    })?;

    let n_generated = (config.aug_ratio * config.data.n_train as f64).round() as usize;
    let gen_dir = out_dir.join("generated");
    let generated = if n_generated > 0 {
        let sampler_cfg = SamplerConfig {
            ddim_steps: config.sampler.ddim_steps,
            eta: config.sampler.eta,
            seed: derive_seed(config.seed, STAGE_SAMPLER),
            num_samples: n_generated,
            ..SamplerConfig::default()
        };
        Some(run.stage("synthesize", |base, rec| {
            rec.config_hash = Some(hash_json(&sampler_cfg)?);
            let setup = SamplerSetup::from_checkpoint(&trained.checkpoint, &sampler_cfg)?;
            let m = synthesize_dataset(&setup.model, &setup.sched, setup.b, setup.resolution, &sampler_cfg, &gen_dir)?;
            rec.outputs.insert("manifest".into(), rel(base, &gen_dir.join("manifest.json")));
            rec.checksums.insert("generated".into(), m.checksum()?);
            Ok(m)
        })?)
    } else {
        None
    };

    let mut variants = vec![Variant {
        name: "baseline",
        aug_ratio: 0.0,
        hard_labels: false,
    }];
    if generated.is_some() {
        variants.push(Variant {
            name: "dakter",
            aug_ratio: config.aug_ratio,
            hard_labels: false,
        });
        if config.hard_label_ablation {
            variants.push(Variant {
                name: "hard_labels",
                aug_ratio: config.aug_ratio,
                hard_labels: true,
            });
        }
    }

    let mut rows = Vec::new();
    for v in &variants {
        let mut reports: Vec<Report> = Vec::new();
        for &seed in &config.student_seeds {
            let cfg = StudentTrainConfig {
                seed,
                aug_ratio: v.aug_ratio,
                hard_labels: v.hard_labels,
                ..config.student.clone()
            };
            let dir = out_dir.join("students").join(format!("{}_seed{seed}", v.name));
            let report = run.stage(&format!("train-student:{}:{seed}", v.name), |base, rec| {
                rec.config_hash = Some(hash_json(&cfg)?);
                let out = train_student(&cfg, &data, generated.as_ref(), Some(&dir))?;
                let report = out
                    .final_report
                    .ok_or_else(|| Error::invalid("dataset has no test split to evaluate on"))?;
                write_bytes(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
                rec.outputs.insert("checkpoint".into(), rel(base, &dir.join("student.ckpt")));
                rec.outputs.insert("report".into(), rel(base, &dir.join("report.json")));
                Ok(report)
            })?;
            reports.push(report);
        }
        rows.push(variant_row(v, &config.student_seeds, &reports));
    }

    let report = ComparativeReport { rows };
    run.stage("evaluate", |base, rec| {
        let path = base.join("report.json");
        write_bytes(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        write_bytes(&base.join("report.txt"), report.to_table().as_bytes())?;
        rec.outputs.insert("report".into(), rel(base, &path));
        Ok(())
    })?;
    run.manifest.report = Some(report);

    if let Some(gen) = &generated {
        if config.render_count > 0 {
            run.stage("render", |base, rec| {
                let files = cmd_render(gen, &base.join("renders"), config.render_count)?;
                for (i, f) in files.iter().enumerate() {
                    rec.outputs.insert(format!("render_{i:03}"), rel(base, f));
                }
                Ok(())
            })?;
        }
    }
    run.manifest
        .save(&out_dir.join("run_manifest.json"))
        .map_err(|e| fail("manifest", e))?;
    Ok(run.manifest)
}

fn variant_row(v: &Variant, seeds: &[u64], reports: &[Report]) -> VariantRow {
    let mean = |f: fn(&Report) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
    VariantRow {
        variant: v.name.to_string(),
        aug_ratio: v.aug_ratio,
        hard_labels: v.hard_labels,
        seeds: seeds.to_vec(),
        miou: reports.iter().map(|r| r.miou).collect(),
        f1: reports.iter().map(|r| r.f1).collect(),
        mean_miou: mean(|r| r.miou),
        mean_f1: mean(|r| r.f1),
        mean_precision: mean(|r| r.precision),
        mean_recall: mean(|r| r.recall),
        mean_accuracy: mean(|r| r.accuracy),
    }
}

/// Evaluates a student checkpoint on one split of a one-hot dataset.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &DatasetManifest, split: Split) -> Result<Report> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = Student::from_checkpoint(&ck)?;
    if data.target_kind() == Some(TargetKind::Logits) {
        return Err(Error::invalid("evaluation needs one-hot ground truth"));
    }
    if model.num_classes() != data.num_classes {
        return Err(Error::invalid("checkpoint and dataset class counts differ"));
    }
    evaluate_student(&model, &data.load_all(Some(split))?)?
        .ok_or_else(|| Error::invalid(format!("dataset has no {split:?} samples")))
}

fn stretch(panel: &[f32]) -> Vec<u8> {
    let (lo, hi) = panel
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi - lo > 1e-6) {
        return vec![128; panel.len()];
    }
    panel
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

/// One RGB strip per sample: image, `C` min-max stretched probability maps
/// (flat maps render mid-gray), then the argmax mask.
pub fn render_strip(image: &[f32], probs: &[f32], classes: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    let n = h * w;
    if image.len() != n || probs.len() != classes * n {
        return Err(Error::dim("render inputs do not match extents"));
    }
    let mut panels: Vec<Vec<[u8; 3]>> = Vec::with_capacity(classes + 2);
    panels.push(image.iter().map(|&v| [to_gray(v); 3]).collect());
    for c in 0..classes {
        panels.push(stretch(&probs[c * n..(c + 1) * n]).into_iter().map(|g| [g; 3]).collect());
    }
    let mask: Vec<usize> = (0..n)
        .map(|p| (0..classes).fold(0, |best, c| if probs[c * n + p] > probs[best * n + p] { c } else { best }))
        .collect();
    panels.push(mask.iter().map(|&c| *PALETTE.get(c).unwrap_or(&[255, 255, 255])).collect());
    let width = w * panels.len();
    let mut rgb = Vec::with_capacity(width * h * 3);
    for y in 0..h {
        for panel in &panels {
            for x in 0..w {
                rgb.extend_from_slice(&panel[y * w + x]);
            }
        }
    }
    Ok(encode_ppm(width, h, &rgb))
}

/// Writes strips for the first `limit` samples of a dataset.
pub fn cmd_render(manifest: &DatasetManifest, out_dir: &Path, limit: usize) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for i in 0..manifest.len().min(limit) {
        let s = manifest.load_sample(i)?;
        let (c, h, w) = s.target.chw()?;
        let probs = match s.kind {
            TargetKind::Logits => softmax(&s.target, 1.0)?,
            TargetKind::Onehot => s.target.clone(),
        };
        let bytes = render_strip(s.image.data(), probs.data(), c, h, w)?;
        let stem = Path::new(&manifest.samples[i].image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i:05}"));
        let path = out_dir.join(format!("{stem}.ppm"));
        write_bytes(&path, &bytes)?;
        files.push(path);
    }
    Ok(files)
}
