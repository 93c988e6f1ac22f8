//! Run configuration: TOML file with one section per concern, overlaid by
//! `HGCONV_*` environment variables, overlaid by command-line flags, on top
//! of defaults that reproduce the Kaggle-row hyperparameters. Unknown
//! section or field names are rejected with the offending name.

use std::path::{Path, PathBuf};

use hgconv_core::layer::{NormKind, NormPlacement};
use hgconv_core::model::{InputMode, ModelConfig};
use serde::Deserialize;

use crate::CliError;

pub const ENV_PREFIX: &str = "HGCONV_";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// 0 means "derive from epochs × batches per epoch"
    pub total_steps: u64,
    pub floor_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub workers: usize,
    pub weight_decay: f64,
    /// 0 disables clipping
    pub clip_norm: f64,
    pub seed: u64,
    /// 0 means "use model.max_seq_len"
    pub seq_len: usize,
    /// stop once eval accuracy reaches this; 0 trains all epochs
    pub target_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// "marker-pair" or "majority-byte"; mutually exclusive with manifest
    pub synth: Option<String>,
    pub synth_train: usize,
    pub synth_eval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub t_list: Vec<usize>,
    pub reps: usize,
    pub batch_divisor: usize,
    /// 0 means "derive the batch from T"
    pub fixed_batch: usize,
    pub mem_budget_gb: f64,
    /// also time the quadratic control mixer and report the separation
    pub control: bool,
}

impl Default for RunConfig {
    /// The Kaggle-row defaults: LN, prenorm, batch 64, vocab 257, T 4096,
    /// K 32, H 256, dropout 0.1, one block, peak lr 0.01, 10 epochs,
    /// label smoothing 0.1.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                vocab_size: 257,
                max_seq_len: 4096,
                feature_dim: 256,
                kernel_dim: 32,
                num_layers: 1,
                num_classes: 2,
                dropout: 0.1,
                norm_kind: NormKind::Layer,
                norm_placement: NormPlacement::Pre,
                label_smoothing: 0.1,
                input_mode: InputMode::Tokens,
            },
            schedule: ScheduleSection {
                peak_lr: 0.01,
                warmup_steps: 32,
                total_steps: 0,
                floor_lr: 0.0,
            },
            train: TrainSection {
                epochs: 10,
                batch_size: 64,
                workers: 1,
                weight_decay: 0.0,
                clip_norm: 0.0,
                seed: 42,
                seq_len: 0,
                target_accuracy: 0.0,
            },
            data: DataSection {
                manifest: None,
                eval_manifest: None,
                synth: None,
                synth_train: 2000,
                synth_eval: 500,
            },
            output: OutputSection {
                dir: PathBuf::from("runs/hgconv"),
            },
            bench: BenchSection {
                t_list: (8..=15).map(|e| 1usize << e).collect(),
                reps: 3,
                batch_divisor: 1,
                fixed_batch: 0,
                mem_budget_gb: 12.0,
                control: false,
            },
        }
    }
}

impl RunConfig {
    /// Sequence length batches are padded/truncated to.
    pub fn seq_len(&self) -> usize {
        if self.train.seq_len == 0 {
            self.model.max_seq_len
        } else {
            self.train.seq_len
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        if self.seq_len() > self.model.max_seq_len {
            return Err(CliError::Config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be positive".into()));
        }
        if self.train.epochs == 0 {
            return Err(CliError::Config("train.epochs must be positive".into()));
        }
        if self.train.workers == 0 {
            return Err(CliError::Config("train.workers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.target_accuracy) {
            return Err(CliError::Config(
                "train.target_accuracy must lie in [0, 1]".into(),
            ));
        }
        if self.schedule.peak_lr <= 0.0 {
            return Err(CliError::Config("schedule.peak_lr must be positive".into()));
        }
        if self.schedule.floor_lr < 0.0 || self.schedule.floor_lr > self.schedule.peak_lr {
            return Err(CliError::Config(
                "schedule.floor_lr must lie in [0, peak_lr]".into(),
            ));
        }
        if self.data.manifest.is_some() && self.data.synth.is_some() {
            return Err(CliError::Config(
                "data.manifest and data.synth are mutually exclusive".into(),
            ));
        }
        if let Some(task) = &self.data.synth {
            if task != "marker-pair" && task != "majority-byte" {
                return Err(CliError::Config(format!(
                    "data.synth must be \"marker-pair\" or \"majority-byte\", got \"{task}\""
                )));
            }
            if self.data.synth_train == 0 || self.data.synth_eval == 0 {
                return Err(CliError::Config(
                    "data.synth_train and data.synth_eval must be positive".into(),
                ));
            }
        }
        if self.bench.reps == 0 || self.bench.batch_divisor == 0 {
            return Err(CliError::Config(
                "bench.reps and bench.batch_divisor must be positive".into(),
            ));
        }
        if self.bench.mem_budget_gb <= 0.0 {
            return Err(CliError::Config("bench.mem_budget_gb must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Partial overlays: every field optional, unknown names rejected by serde.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialRun {
    model: Option<PartialModel>,
    schedule: Option<PartialSchedule>,
    train: Option<PartialTrain>,
    data: Option<PartialData>,
    output: Option<PartialOutput>,
    bench: Option<PartialBench>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialModel {
    vocab_size: Option<usize>,
    max_seq_len: Option<usize>,
    feature_dim: Option<usize>,
    kernel_dim: Option<usize>,
    num_layers: Option<usize>,
    num_classes: Option<usize>,
    dropout: Option<f64>,
    norm_kind: Option<NormKind>,
    norm_placement: Option<NormPlacement>,
    label_smoothing: Option<f64>,
    input_mode: Option<InputMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialSchedule {
    peak_lr: Option<f64>,
    warmup_steps: Option<u64>,
    total_steps: Option<u64>,
    floor_lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialTrain {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    workers: Option<usize>,
    weight_decay: Option<f64>,
    clip_norm: Option<f64>,
    seed: Option<u64>,
    seq_len: Option<usize>,
    target_accuracy: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialData {
    manifest: Option<PathBuf>,
    eval_manifest: Option<PathBuf>,
    synth: Option<String>,
    synth_train: Option<usize>,
    synth_eval: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialOutput {
    dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialBench {
    t_list: Option<Vec<usize>>,
    reps: Option<usize>,
    batch_divisor: Option<usize>,
    fixed_batch: Option<usize>,
    mem_budget_gb: Option<f64>,
    control: Option<bool>,
}

macro_rules! take {
    ($src:expr, $dst:expr, $($field:ident),+) => {
        $(if let Some(v) = $src.$field { $dst.$field = v; })+
    };
}

impl PartialRun {
    fn apply(self, cfg: &mut RunConfig) {
        if let Some(m) = self.model {
            take!(
                m, cfg.model, vocab_size, max_seq_len, feature_dim, kernel_dim, num_layers,
                num_classes, dropout, norm_kind, norm_placement, label_smoothing, input_mode
            );
        }
        if let Some(s) = self.schedule {
            take!(s, cfg.schedule, peak_lr, warmup_steps, total_steps, floor_lr);
        }
        if let Some(t) = self.train {
            take!(
                t, cfg.train, epochs, batch_size, workers, weight_decay, clip_norm, seed,
                seq_len, target_accuracy
            );
        }
        if let Some(d) = self.data {
            // manifest/synth stay Option in the resolved config: overlay only
            // when the layer actually names them
            if d.manifest.is_some() {
                cfg.data.manifest = d.manifest;
            }
            if d.eval_manifest.is_some() {
                cfg.data.eval_manifest = d.eval_manifest;
            }
            if d.synth.is_some() {
                cfg.data.synth = d.synth;
            }
            take!(d, cfg.data, synth_train, synth_eval);
        }
        if let Some(o) = self.output {
            if let Some(v) = o.dir {
                cfg.output.dir = v;
            }
        }
        if let Some(b) = self.bench {
            take!(b, cfg.bench, t_list, reps, batch_divisor, fixed_batch, mem_budget_gb, control);
        }
    }
}

fn parse_file(path: &Path) -> Result<PartialRun, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

/// One `HGCONV_SECTION_FIELD=value` variable becomes a one-line TOML overlay
/// and goes through the same deserializer (and the same unknown-field
/// rejection) as the config file. Values that don't parse as a TOML scalar
/// are retried as strings, so `HGCONV_MODEL_NORM_KIND=batch` works unquoted.
fn parse_env_var(key: &str, value: &str) -> Result<PartialRun, CliError> {
    let rest = key.strip_prefix(ENV_PREFIX).expect("caller filtered prefix");
    let (section, field) = rest.split_once('_').ok_or_else(|| {
        CliError::Config(format!(
            "{key}: expected {ENV_PREFIX}SECTION_FIELD (sections: MODEL, SCHEDULE, TRAIN, DATA, OUTPUT, BENCH)"
        ))
    })?;
    let (section, field) = (section.to_lowercase(), field.to_lowercase());
    let bare = format!("[{section}]\n{field} = {value}");
    let quoted = format!("[{section}]\n{field} = {:?}", value);
    toml::from_str(&bare)
        .or_else(|_| toml::from_str(&quoted))
        .map_err(|e| CliError::Config(format!("{key}: {e}")))
}

/// Command-line values that override everything else.
#[derive(Debug, Default, Clone)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Layers, lowest to highest: defaults, config file, environment (sorted by
/// variable name), flags.
pub fn resolve(
    file: Option<&Path>,
    env: &[(String, String)],
    flags: &FlagOverrides,
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        parse_file(path)?.apply(&mut cfg);
    }
    let mut overlays: Vec<&(String, String)> = env
        .iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    overlays.sort();
    for (k, v) in overlays {
        parse_env_var(k, v)?.apply(&mut cfg);
    }
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &flags.out {
        cfg.output.dir = out.clone();
    }
    if let Some(w) = flags.workers {
        cfg.train.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The process environment, as [`resolve`] wants it.
pub fn process_env() -> Vec<(String, String)> {
    std::env::vars().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_match_the_kaggle_row() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.feature_dim, 256);
        assert_eq!(cfg.model.max_seq_len, 4096);
        assert_eq!(cfg.model.kernel_dim, 32);
        assert_eq!(cfg.model.vocab_size, 257);
        assert_eq!(cfg.model.num_layers, 1);
        assert_eq!(cfg.model.norm_kind, NormKind::Layer);
        assert_eq!(cfg.model.norm_placement, NormPlacement::Pre);
        assert!((cfg.model.dropout - 0.1).abs() < 1e-12);
        assert!((cfg.model.label_smoothing - 0.1).abs() < 1e-12);
        assert!((cfg.schedule.peak_lr - 0.01).abs() < 1e-12);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.epochs, 10);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn precedence_is_flag_over_env_over_file_over_default() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            file,
            "[model]\nfeature_dim = 16\n[train]\nseed = 7\nworkers = 2\nepochs = 3"
        )
        .unwrap();
        let envs = env(&[
            ("HGCONV_TRAIN_SEED", "8"),
            ("HGCONV_MODEL_KERNEL_DIM", "8"),
        ]);
        let flags = FlagOverrides {
            seed: Some(9),
            out: None,
            workers: None,
        };
        let cfg = resolve(Some(file.path()), &envs, &flags).unwrap();
        assert_eq!(cfg.train.seed, 9); // flag beats env beats file
        assert_eq!(cfg.model.kernel_dim, 8); // env beats default
        assert_eq!(cfg.model.feature_dim, 16); // file beats default
        assert_eq!(cfg.train.workers, 2); // file only
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 64); // untouched default

        let cfg2 = resolve(Some(file.path()), &envs, &FlagOverrides::default()).unwrap();
        assert_eq!(cfg2.train.seed, 8); // env beats file when no flag
    }

    #[test]
    fn unknown_field_is_rejected_by_name() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "[model]\nlearning_rate = 0.1").unwrap();
        let err = resolve(Some(file.path()), &[], &FlagOverrides::default()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("learning_rate"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_section_is_rejected() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "[optimizer]\nlr = 0.1").unwrap();
        let err = resolve(Some(file.path()), &[], &FlagOverrides::default()).unwrap_err();
        assert!(format!("{err}").contains("optimizer"));
    }

    #[test]
    fn env_strings_need_no_quotes() {
        let envs = env(&[
            ("HGCONV_MODEL_NORM_KIND", "batch"),
            ("HGCONV_MODEL_NORM_PLACEMENT", "post"),
            ("HGCONV_OUTPUT_DIR", "some/dir"),
            ("HGCONV_DATA_SYNTH", "marker-pair"),
        ]);
        let cfg = resolve(None, &envs, &FlagOverrides::default()).unwrap();
        assert_eq!(cfg.model.norm_kind, NormKind::Batch);
        assert_eq!(cfg.model.norm_placement, NormPlacement::Post);
        assert_eq!(cfg.output.dir, PathBuf::from("some/dir"));
        assert_eq!(cfg.data.synth.as_deref(), Some("marker-pair"));
    }

    #[test]
    fn bad_env_field_names_the_variable() {
        let envs = env(&[("HGCONV_MODEL_WIDTH", "32")]);
        let err = resolve(None, &envs, &FlagOverrides::default()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("HGCONV_MODEL_WIDTH"), "{msg}");
    }

    #[test]
    fn non_hgconv_vars_are_ignored() {
        let envs = env(&[("PATH", "/usr/bin"), ("HGCONV", "x")]);
        assert!(resolve(None, &envs, &FlagOverrides::default()).is_ok());
    }

    #[test]
    fn validation_catches_cross_field_problems() {
        let envs = env(&[("HGCONV_TRAIN_SEQ_LEN", "8192")]);
        let err = resolve(None, &envs, &FlagOverrides::default()).unwrap_err();
        assert!(format!("{err}").contains("max_seq_len"));

        let both = env(&[
            ("HGCONV_DATA_MANIFEST", "m.tsv"),
            ("HGCONV_DATA_SYNTH", "marker-pair"),
        ]);
        assert!(resolve(None, &both, &FlagOverrides::default()).is_err());

        let bad_task = env(&[("HGCONV_DATA_SYNTH", "sorting")]);
        let err = resolve(None, &bad_task, &FlagOverrides::default()).unwrap_err();
        assert!(format!("{err}").contains("marker-pair"));
    }
}
