//! End-to-end runs: ingest → subset → noise → PCA → tokens → train, with
//! the run directory written along the way.
//!
//! A run directory holds `config.json`, `metrics.csv`, `summary.json`,
//! `run.log` and `checkpoint-*.pgkt` files.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    self, add_gaussian_noise, pca_fit, pca_transform, select_classes, ImageSet, RawDataset, TokenScheme,
};
use crate::error::{Error, Result};
use crate::kernel::{Backend, KernelConfig, ScoreMode};
use crate::nn::{AttentionKind, FfnKind, Model, ModelConfig};
use crate::numerics::{RealTensor, SeededRng};
use crate::train::{self, convergence_epoch, Evaluation, MetricsRow, Sample, TrainConfig};

/// Fraction of peak test accuracy that defines the convergence epoch.
pub const CONVERGENCE_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Idx,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSpace {
    /// Noise on `[0, 1]` pixels before PCA.
    Pixel,
    /// Noise on the PCA features.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub layers: usize,
    /// Defaults to four times `dim`.
    pub ffn_width: Option<usize>,
    pub heads: usize,
    /// Defaults to `dim`.
    pub mesh_depth: Option<usize>,
    pub attention: AttentionKind,
    pub ffn: FfnKind,
    pub positional_encoding: bool,
    pub mesh_init_spread: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            layers: 1,
            ffn_width: None,
            heads: 2,
            mesh_depth: None,
            attention: AttentionKind::Photonic,
            ffn: FfnKind::TwoLayer,
            positional_encoding: true,
            mesh_init_spread: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSettings {
    /// Defaults to the first ⌈dim/2⌉ modes.
    pub detected: Option<Vec<usize>>,
    pub loading_scale: f64,
    pub normalize_rows: bool,
    pub score_mode: ScoreMode,
    pub backend: Backend,
    pub shots: usize,
}

impl Default for KernelSettings {
    fn default() -> Self {
        let k = KernelConfig::new(2);
        Self {
            detected: None,
            loading_scale: k.loading_scale,
            normalize_rows: k.normalize_rows,
            score_mode: k.score_mode,
            backend: k.backend,
            shots: k.shots,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset_format: DatasetFormat,
    pub data_dir: PathBuf,
    /// IDX file names inside `data_dir`.
    pub idx_images: String,
    pub idx_labels: String,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub tokens: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub noise_space: NoiseSpace,
    pub noise_clamp: bool,
    pub model: ModelSettings,
    pub kernel: KernelSettings,
    pub train: TrainConfig,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Put real elapsed time in the metrics `seconds` column. Off by
    /// default so identical configs give byte-identical files.
    pub record_wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_format: DatasetFormat::Idx,
            data_dir: PathBuf::from("data/mnist-1k"),
            idx_images: "images-idx3-ubyte".into(),
            idx_labels: "labels-idx1-ubyte".into(),
            classes: 5,
            train_per_class: 30,
            test_per_class: 10,
            tokens: 4,
            dim: 16,
            noise_sigma: 0.0,
            noise_space: NoiseSpace::Pixel,
            noise_clamp: true,
            model: ModelSettings::default(),
            kernel: KernelSettings::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            record_wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "classes and per-class counts must be positive".into(),
            ));
        }
        if self.classes > 256 {
            return Err(Error::Config("at most 256 classes fit in byte labels".into()));
        }
        TokenScheme::from_tokens(self.tokens)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        self.train.validate()?;
        self.model_config()?.validate()
    }

    pub fn kernel_config(&self) -> KernelConfig {
        let mut k = KernelConfig::new(self.dim);
        if let Some(s) = &self.kernel.detected {
            k.detected = s.clone();
        }
        k.loading_scale = self.kernel.loading_scale;
        k.normalize_rows = self.kernel.normalize_rows;
        k.score_mode = self.kernel.score_mode;
        k.backend = self.kernel.backend;
        k.shots = self.kernel.shots;
        k
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(self.tokens, self.dim, self.classes);
        m.layers = self.model.layers;
        m.ffn_width = self.model.ffn_width.unwrap_or(4 * self.dim);
        m.heads = self.model.heads;
        m.mesh_depth = self.model.mesh_depth.unwrap_or(self.dim);
        m.attention = self.model.attention;
        m.ffn = self.model.ffn;
        m.positional_encoding = self.model.positional_encoding;
        m.mesh_init_spread = self.model.mesh_init_spread;
        m.kernel = self.kernel_config();
        Ok(m)
    }

    fn root_rng(&self) -> SeededRng {
        SeededRng::new(self.seed)
    }
}

/// Token sequences ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub pca_fingerprint: u64,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<RawDataset> {
    match cfg.dataset_format {
        DatasetFormat::Idx => data::load_idx(
            cfg.data_dir.join(&cfg.idx_images),
            cfg.data_dir.join(&cfg.idx_labels),
        ),
        DatasetFormat::Cifar10 => data::load_cifar10_bin(&cfg.data_dir),
    }
}

fn to_samples(tokens: Vec<RealTensor>, labels: &[usize]) -> Vec<Sample> {
    tokens
        .into_iter()
        .zip(labels)
        .map(|(tokens, &label)| Sample { tokens, label })
        .collect()
}

fn add_feature_noise(samples: &mut [Sample], sigma: f64, rng: &mut SeededRng) {
    for s in samples {
        for v in s.tokens.data_mut() {
            *v += sigma * rng.normal();
        }
    }
}

/// Runs the preprocessing stages. Each error carries its stage name.
pub fn prepare_data(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<PreparedData> {
    let rng = cfg.root_rng();
    let raw = load_dataset(cfg).map_err(|e| e.in_stage("ingest"))?;
    log(&format!(
        "ingest: {} images of {}x{}x{}",
        raw.len(),
        raw.height,
        raw.width,
        raw.channels
    ));
    let (train_raw, test_raw) = select_classes(
        &raw,
        cfg.classes,
        cfg.train_per_class,
        cfg.test_per_class,
        &rng.split("select"),
    )
    .map_err(|e| e.in_stage("select"))?;
    log(&format!(
        "select: {} train / {} test",
        train_raw.len(),
        test_raw.len()
    ));

    let (mut train_px, mut test_px): (ImageSet, ImageSet) = (train_raw.to_unit(), test_raw.to_unit());
    if cfg.noise_sigma > 0.0 && cfg.noise_space == NoiseSpace::Pixel {
        let noise = rng.split("noise");
        train_px = add_gaussian_noise(
            &train_px,
            cfg.noise_sigma,
            cfg.noise_clamp,
            &mut noise.split("train"),
        )
        .map_err(|e| e.in_stage("noise"))?;
        test_px = add_gaussian_noise(
            &test_px,
            cfg.noise_sigma,
            cfg.noise_clamp,
            &mut noise.split("test"),
        )
        .map_err(|e| e.in_stage("noise"))?;
        log(&format!("noise: sigma {} on pixels", cfg.noise_sigma));
    }

    let scheme = TokenScheme::from_tokens(cfg.tokens)?;
    let pca = pca_fit(&train_px, scheme, cfg.dim).map_err(|e| e.in_stage("pca"))?;
    log(&format!(
        "pca: {} regions to {} dims, model {:016x}",
        scheme.tokens(),
        cfg.dim,
        pca.fingerprint()
    ));
    let mut train = to_samples(
        pca_transform(&pca, &train_px).map_err(|e| e.in_stage("tokenize"))?,
        &train_px.labels,
    );
    let mut test = to_samples(
        pca_transform(&pca, &test_px).map_err(|e| e.in_stage("tokenize"))?,
        &test_px.labels,
    );
    if cfg.noise_sigma > 0.0 && cfg.noise_space == NoiseSpace::Feature {
        let noise = rng.split("noise");
        add_feature_noise(&mut train, cfg.noise_sigma, &mut noise.split("train"));
        add_feature_noise(&mut test, cfg.noise_sigma, &mut noise.split("test"));
        log(&format!("noise: sigma {} on features", cfg.noise_sigma));
    }
    Ok(PreparedData {
        train,
        test,
        pca_fingerprint: pca.fingerprint(),
    })
}

/// The Final Acc / Loss / Conv Epoch row plus a few extras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub final_test_loss: f64,
    pub first_train_loss: f64,
    pub final_train_loss: f64,
    pub convergence_epoch: Option<usize>,
    pub epochs: usize,
    pub noise_sigma: f64,
}

impl RunSummary {
    fn from_rows(rows: &[MetricsRow], noise_sigma: f64) -> Result<Self> {
        let (first, last) = match (rows.first(), rows.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Internal("no metrics rows".into())),
        };
        let acc: Vec<f64> = rows.iter().map(|r| r.test_acc).collect();
        Ok(Self {
            final_test_acc: last.test_acc,
            best_test_acc: acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            final_test_loss: last.test_loss,
            first_train_loss: first.train_loss,
            final_train_loss: last.train_loss,
            convergence_epoch: convergence_epoch(&acc, CONVERGENCE_FRACTION),
            epochs: last.epoch,
            noise_sigma,
        })
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub model: Model,
}

struct RunLog {
    file: File,
    start: Instant,
}

impl RunLog {
    fn line(&mut self, msg: &str) {
        log::info!("{msg}");
        // the log is best-effort; a failed write must not abort the run
        let _ = writeln!(self.file, "[{:9.3}s] {msg}", self.start.elapsed().as_secs_f64());
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn metrics_header() -> &'static str {
    "epoch,train_loss,train_acc,test_loss,test_acc,seconds"
}

fn metrics_line(row: &MetricsRow, wall_clock: bool) -> String {
    let seconds = if wall_clock { row.seconds } else { 0.0 };
    format!(
        "{},{},{},{},{},{}",
        row.epoch, row.train_loss, row.train_acc, row.test_loss, row.test_acc, seconds
    )
}

/// Executes a full run into `out_dir`, which is created if needed.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log_path = dir.join("run.log");
    let mut log = RunLog {
        file: File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
        start: Instant::now(),
    };
    let result = run_inner(cfg, &dir, &mut log);
    if let Err(e) = &result {
        match e {
            Error::Stage { stage, source } => log.line(&format!("stage {stage} failed: {source}")),
            other => log.line(&format!("run failed: {other}")),
        }
    }
    result
}

fn run_inner(cfg: &ExperimentConfig, dir: &Path, log: &mut RunLog) -> Result<RunOutcome> {
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    let prepared = prepare_data(cfg, &mut |m| log.line(m))?;

    let rng = cfg.root_rng();
    let mut model =
        Model::init(cfg.model_config()?, &mut rng.split("init")).map_err(|e| e.in_stage("init"))?;
    log.line(&format!("model: {} parameters", model.params().num_scalars()));

    let csv_path = dir.join("metrics.csv");
    let mut csv = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{}", metrics_header()).map_err(|e| Error::io(&csv_path, e))?;
    let every = cfg.checkpoint_every;
    let rows = train::train(
        &mut model,
        &prepared.train,
        &prepared.test,
        &cfg.train,
        &rng.split("train"),
        |row, model| {
            writeln!(csv, "{}", metrics_line(row, cfg.record_wall_clock))
                .map_err(|e| Error::io(&csv_path, e))?;
            csv.flush().map_err(|e| Error::io(&csv_path, e))?;
            log.line(&format!(
                "epoch {}: train loss {:.4} acc {:.3}, test loss {:.4} acc {:.3}",
                row.epoch, row.train_loss, row.train_acc, row.test_loss, row.test_acc
            ));
            if every > 0 && row.epoch % every == 0 {
                let path = dir.join(format!("checkpoint-epoch{:04}.pgkt", row.epoch));
                checkpoint::write_checkpoint(&path, &model.to_records()?)?;
            }
            Ok(())
        },
    )
    .map_err(|e| e.in_stage("train"))?;

    checkpoint::write_checkpoint(dir.join("checkpoint-final.pgkt"), &model.to_records()?)?;
    let summary = RunSummary::from_rows(&rows, cfg.noise_sigma)?;
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&dir.join("summary.json"), text.as_bytes())?;
    log.line(&format!(
        "done: final test acc {:.3}, best {:.3}, convergence epoch {:?}",
        summary.final_test_acc, summary.best_test_acc, summary.convergence_epoch
    ));
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        rows,
        summary,
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Loads a checkpoint and evaluates it on one split of the configured
/// pipeline.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    path: impl AsRef<Path>,
    split: Split,
) -> Result<Evaluation> {
    cfg.validate()?;
    let prepared = prepare_data(cfg, &mut |m| log::info!("{m}"))?;
    let records = checkpoint::read_checkpoint(path)?;
    let model = Model::from_records(cfg.model_config()?, records)?;
    let samples = match split {
        Split::Train => &prepared.train,
        Split::Test => &prepared.test,
    };
    train::evaluate(
        &model,
        samples,
        model.config().kernel.backend,
        &cfg.root_rng().split("eval/checkpoint"),
    )
}

/// One Final Acc / Loss / Conv Epoch row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub final_acc: f64,
    pub loss: f64,
    pub conv_epoch: Option<usize>,
}

impl From<&RunSummary> for ComparisonRow {
    fn from(s: &RunSummary) -> Self {
        Self {
            final_acc: s.final_test_acc,
            loss: s.final_test_loss,
            conv_epoch: s.convergence_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseComparison {
    pub sigma: f64,
    pub clean: ComparisonRow,
    pub noisy: ComparisonRow,
    /// noisy minus clean.
    pub acc_delta: f64,
    pub loss_delta: f64,
}

impl NoiseComparison {
    pub fn new(sigma: f64, clean: &RunSummary, noisy: &RunSummary) -> Self {
        Self {
            sigma,
            clean: clean.into(),
            noisy: noisy.into(),
            acc_delta: noisy.final_test_acc - clean.final_test_acc,
            loss_delta: noisy.final_test_loss - clean.final_test_loss,
        }
    }

    /// `run,final_acc,loss,conv_epoch` table.
    pub fn to_csv(&self) -> String {
        let line = |name: &str, r: &ComparisonRow| {
            let conv = r.conv_epoch.map(|e| e.to_string()).unwrap_or_default();
            format!("{name},{},{},{conv}\n", r.final_acc, r.loss)
        };
        format!(
            "run,final_acc,loss,conv_epoch\n{}{}delta,{},{},\n",
            line("clean", &self.clean),
            line("noisy", &self.noisy),
            self.acc_delta,
            self.loss_delta
        )
    }
}

/// Writes `noise_compare.json` and `noise_compare.csv` into `out_dir`.
pub fn write_comparison(cmp: &NoiseComparison, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(cmp).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&dir.join("noise_compare.json"), json.as_bytes())?;
    write_file(&dir.join("noise_compare.csv"), cmp.to_csv().as_bytes())
}

/// Paired clean and noisy runs into `out_dir/clean` and `out_dir/noisy`.
pub fn noise_compare(
    cfg: &ExperimentConfig,
    sigma: f64,
    out_dir: impl AsRef<Path>,
) -> Result<NoiseComparison> {
    let dir = out_dir.as_ref();
    let mut clean_cfg = cfg.clone();
    clean_cfg.noise_sigma = 0.0;
    let mut noisy_cfg = cfg.clone();
    noisy_cfg.noise_sigma = sigma;
    let clean = run_experiment(&clean_cfg, dir.join("clean"))?;
    let noisy = run_experiment(&noisy_cfg, dir.join("noisy"))?;
    let cmp = NoiseComparison::new(sigma, &clean.summary, &noisy.summary);
    write_comparison(&cmp, dir)?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let cfg = ExperimentConfig::default();
        assert_eq!(
            (cfg.classes, cfg.train_per_class, cfg.test_per_class),
            (5, 30, 10)
        );
        assert_eq!((cfg.tokens, cfg.dim), (4, 16));
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.learning_rate, 0.009);
        assert_eq!(cfg.kernel.shots, 16);
        let k = cfg.kernel_config();
        assert_eq!(k.detected, (0..8).collect::<Vec<_>>());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_json(r#"{"seed": 7, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 32);
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"sede": 7}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"train": {"epoch": 3}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"tokens": 3}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn comparison_row_schema() {
        let s = |acc, loss, conv| RunSummary {
            final_test_acc: acc,
            best_test_acc: acc,
            final_test_loss: loss,
            first_train_loss: 1.6,
            final_train_loss: 0.5,
            convergence_epoch: conv,
            epochs: 10,
            noise_sigma: 0.0,
        };
        let cmp = NoiseComparison::new(0.4, &s(0.8, 0.5, Some(12)), &s(0.6, 0.9, Some(30)));
        assert!((cmp.acc_delta + 0.2).abs() < 1e-12);
        let csv = cmp.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run,final_acc,loss,conv_epoch");
        assert_eq!(lines[1], "clean,0.8,0.5,12");
        assert_eq!(lines[2], "noisy,0.6,0.9,30");
    }

    #[test]
    fn metrics_line_hides_wall_clock_by_default() {
        let row = MetricsRow {
            epoch: 3,
            train_loss: 0.25,
            train_acc: 0.5,
            test_loss: 1.0,
            test_acc: 0.75,
            seconds: 12.5,
        };
        assert_eq!(metrics_line(&row, false), "3,0.25,0.5,1,0.75,0");
        assert_eq!(metrics_line(&row, true), "3,0.25,0.5,1,0.75,12.5");
    }
}
