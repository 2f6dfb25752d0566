//! Layered run configuration.
//!
//! Layout: a TOML file with `[data_io]`, `[agnostic]`, `[crop]`, `[net]`,
//! `[train]`, and `[eval]` sections, every key optional. Resolution order
//! per key is compiled-in default, then the file, then command-line flags;
//! the data root additionally honors the `TRYON_DATA_ROOT` environment
//! variable between file and flag. Each key remembers which layer won and
//! [`RunConfig::log`] prints the fully resolved table, so any two runs can
//! be compared by their logs. Unknown keys or sections are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use tryon_core::agnostic::AgnosticConfig;
use tryon_core::crop::CropConfig;
use tryon_core::palette::Role;
use tryon_pipeline::features::PatchStatExtractor;
use tryon_pipeline::losses::GanMode;
use tryon_pipeline::networks::NetConfig;
use tryon_pipeline::training::{Stage, TrainConfig};

/// Environment variable consulted for the data root when no `--data` flag
/// is given. No other key has an environment override.
pub const DATA_ROOT_ENV: &str = "TRYON_DATA_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path} does not parse: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// On-disk schema. Every field is optional so a file may set any subset.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data_io: Option<DataIoSection>,
    agnostic: Option<AgnosticSection>,
    crop: Option<CropSection>,
    net: Option<NetSection>,
    train: Option<TrainSection>,
    eval: Option<EvalSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataIoSection {
    root: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgnosticSection {
    erase_roles: Option<Vec<Role>>,
    dilation_px: Option<usize>,
    fill_value: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CropSection {
    scale_lo: Option<f64>,
    scale_hi: Option<f64>,
    ratio_lo: Option<f64>,
    ratio_hi: Option<f64>,
    out_h: Option<usize>,
    out_w: Option<usize>,
    max_attempts: Option<u32>,
    include_cloth: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetSection {
    base_channels: Option<usize>,
    num_labels: Option<usize>,
    image_size: Option<(usize, usize)>,
    tps_grid: Option<(usize, usize)>,
    latent_noise: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    adv_weight: Option<f64>,
    l1_weight: Option<f64>,
    ce_weight: Option<f64>,
    bend_weight: Option<f64>,
    seed: Option<u64>,
    gan_mode: Option<GanMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    extractor: Option<String>,
}

/// Flag-level overrides, filled from clap arguments by the caller.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub gan_mode: Option<GanMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

/// Value rendering for the resolved-config log.
trait LogValue {
    fn render(&self) -> String;
}

macro_rules! log_via_display {
    ($($t:ty),*) => {
        $(impl LogValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
        })*
    };
}

log_via_display!(usize, u32, u64, f64, bool, String);

impl LogValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl LogValue for GanMode {
    fn render(&self) -> String {
        match self {
            GanMode::Hinge => "hinge".into(),
            GanMode::Bce => "bce".into(),
        }
    }
}

impl LogValue for (usize, usize) {
    fn render(&self) -> String {
        format!("[{}, {}]", self.0, self.1)
    }
}

impl LogValue for Vec<Role> {
    fn render(&self) -> String {
        let names: Vec<String> = self.iter().map(|r| r.to_string()).collect();
        format!("[{}]", names.join(", "))
    }
}

/// Fully resolved configuration plus the log of where each value came from.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub agnostic: AgnosticConfig,
    pub crop: CropConfig,
    pub include_cloth: bool,
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adv_weight: f64,
    pub l1_weight: f64,
    pub ce_weight: f64,
    pub bend_weight: f64,
    pub seed: u64,
    pub gan_mode: GanMode,
    pub extractor: String,
    lines: Vec<String>,
}

struct Ledger {
    lines: Vec<String>,
}

impl Ledger {
    fn pick<T: LogValue>(&mut self, key: &str, default: T, file: Option<T>, flag: Option<T>) -> T {
        let (value, source) = match (file, flag) {
            (_, Some(v)) => (v, Source::Flag),
            (Some(v), None) => (v, Source::File),
            (None, None) => (default, Source::Default),
        };
        self.lines.push(format!("{key} = {} ({source})", value.render()));
        value
    }
}

impl RunConfig {
    /// Resolves the three layers. `file` is the `--config` path if any,
    /// `env_root` the raw `TRYON_DATA_ROOT` value (passed in rather than
    /// read here so resolution stays a pure function).
    pub fn resolve(
        file: Option<&Path>,
        env_root: Option<PathBuf>,
        ovr: &Overrides,
    ) -> Result<Self, ConfigError> {
        let fc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                toml::from_str::<FileConfig>(&text).map_err(|e| ConfigError::Parse {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => FileConfig::default(),
        };
        let data_io = fc.data_io.unwrap_or_default();
        let agnostic = fc.agnostic.unwrap_or_default();
        let crop = fc.crop.unwrap_or_default();
        let net = fc.net.unwrap_or_default();
        let train = fc.train.unwrap_or_default();
        let eval = fc.eval.unwrap_or_default();

        let mut led = Ledger { lines: Vec::new() };

        // The data root is the one key with an environment layer.
        let (data_root, root_source) = match (&ovr.data_root, env_root, data_io.root) {
            (Some(p), _, _) => (Some(p.clone()), Source::Flag),
            (None, Some(p), _) => (Some(p), Source::Env),
            (None, None, Some(p)) => (Some(p), Source::File),
            (None, None, None) => (None, Source::Default),
        };
        led.lines.push(format!(
            "data_io.root = {} ({root_source})",
            data_root
                .as_ref()
                .map_or_else(|| "<unset>".into(), |p| p.display().to_string())
        ));

        let agn_default = AgnosticConfig::default();
        let erase_roles = led.pick(
            "agnostic.erase_roles",
            agn_default.erase_roles.iter().copied().collect(),
            agnostic.erase_roles,
            None,
        );
        let agnostic = AgnosticConfig {
            erase_roles: erase_roles.into_iter().collect::<BTreeSet<Role>>(),
            dilation_px: led.pick(
                "agnostic.dilation_px",
                agn_default.dilation_px,
                agnostic.dilation_px,
                None,
            ),
            fill_value: led.pick(
                "agnostic.fill_value",
                agn_default.fill_value,
                agnostic.fill_value,
                None,
            ),
        };

        let crop_default = CropConfig::default();
        let include_cloth = led.pick("crop.include_cloth", false, crop.include_cloth, None);
        let crop = CropConfig {
            scale_lo: led.pick("crop.scale_lo", crop_default.scale_lo, crop.scale_lo, None),
            scale_hi: led.pick("crop.scale_hi", crop_default.scale_hi, crop.scale_hi, None),
            ratio_lo: led.pick("crop.ratio_lo", crop_default.ratio_lo, crop.ratio_lo, None),
            ratio_hi: led.pick("crop.ratio_hi", crop_default.ratio_hi, crop.ratio_hi, None),
            out_h: led.pick("crop.out_h", crop_default.out_h, crop.out_h, None),
            out_w: led.pick("crop.out_w", crop_default.out_w, crop.out_w, None),
            max_attempts: led.pick(
                "crop.max_attempts",
                crop_default.max_attempts,
                crop.max_attempts,
                None,
            ),
        };

        let net_default = NetConfig::default();
        let net = NetConfig {
            base_channels: led.pick(
                "net.base_channels",
                net_default.base_channels,
                net.base_channels,
                None,
            ),
            num_labels: led.pick("net.num_labels", net_default.num_labels, net.num_labels, None),
            image_size: led.pick("net.image_size", net_default.image_size, net.image_size, None),
            tps_grid: led.pick("net.tps_grid", net_default.tps_grid, net.tps_grid, None),
            latent_noise: led.pick(
                "net.latent_noise",
                net_default.latent_noise,
                net.latent_noise,
                None,
            ),
        };

        let epochs = led.pick("train.epochs", 10, train.epochs, ovr.epochs);
        let batch_size = led.pick("train.batch_size", 4, train.batch_size, ovr.batch_size);
        let lr = led.pick("train.lr", 2e-4, train.lr, ovr.lr);
        let adv_weight = led.pick("train.adv_weight", 0.1, train.adv_weight, None);
        let l1_weight = led.pick("train.l1_weight", 1.0, train.l1_weight, None);
        let ce_weight = led.pick("train.ce_weight", 1.0, train.ce_weight, None);
        let bend_weight = led.pick("train.bend_weight", 0.5, train.bend_weight, None);
        let seed = led.pick("train.seed", 0, train.seed, ovr.seed);
        let gan_mode = led.pick("train.gan_mode", GanMode::Hinge, train.gan_mode, ovr.gan_mode);

        let extractor = led.pick(
            "eval.extractor",
            "patchstat".to_string(),
            eval.extractor,
            None,
        );
        if extractor != "patchstat" {
            return Err(ConfigError::Invalid(format!(
                "eval.extractor {extractor:?} is not known; the only registered extractor is \"patchstat\""
            )));
        }

        Ok(Self {
            data_root,
            agnostic,
            crop,
            include_cloth,
            net,
            epochs,
            batch_size,
            lr,
            adv_weight,
            l1_weight,
            ce_weight,
            bend_weight,
            seed,
            gan_mode,
            extractor,
            lines: led.lines,
        })
    }

    /// Prints the resolved table to stderr, one `key = value (source)` line
    /// per key, in a fixed order.
    pub fn log(&self) {
        for line in &self.lines {
            eprintln!("[config] {line}");
        }
    }

    pub fn data_root(&self) -> Result<&Path, ConfigError> {
        self.data_root.as_deref().ok_or_else(|| {
            ConfigError::Invalid(format!(
                "no data root: pass --data, set {DATA_ROOT_ENV}, or set data_io.root in the config file"
            ))
        })
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr as f32,
            adv_weight: self.adv_weight as f32,
            l1_weight: self.l1_weight as f32,
            ce_weight: self.ce_weight as f32,
            bend_weight: self.bend_weight as f32,
            crop: self.crop,
            include_cloth: self.include_cloth,
            seed: self.seed,
            gan_mode: self.gan_mode,
            net: self.net.clone(),
            agnostic: self.agnostic.clone(),
        }
    }

    pub fn extractor(&self) -> PatchStatExtractor {
        // `resolve` rejects every other name.
        debug_assert_eq!(self.extractor, "patchstat");
        PatchStatExtractor
    }
}

pub fn parse_gan_mode(s: &str) -> Result<GanMode, String> {
    match s {
        "hinge" => Ok(GanMode::Hinge),
        "bce" => Ok(GanMode::Bce),
        other => Err(format!("unknown gan mode {other:?}, expected hinge or bce")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(dir: &tempfile::TempDir, text: &str) -> PathBuf {
        let path = dir.path().join("cfg.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    #[test]
    fn defaults_match_module_defaults() {
        let cfg = RunConfig::resolve(None, None, &Overrides::default()).unwrap();
        assert_eq!(cfg.crop, CropConfig::default());
        assert_eq!(cfg.net, NetConfig::default());
        assert_eq!(cfg.agnostic, AgnosticConfig::default());
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.gan_mode, GanMode::Hinge);
        assert!(!cfg.include_cloth);
        assert!(cfg.data_root.is_none());
        assert!(cfg.lines.iter().all(|l| l.contains("(default)")));
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(
            &dir,
            r#"
[data_io]
root = "/data/from-file"

[crop]
scale_lo = 0.6
out_h = 64
out_w = 48

[net]
image_size = [64, 48]
base_channels = 8

[train]
epochs = 3
lr = 0.001
gan_mode = "bce"
"#,
        );
        let ovr = Overrides {
            epochs: Some(7),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(&path), None, &ovr).unwrap();
        assert_eq!(cfg.data_root.as_deref(), Some(Path::new("/data/from-file")));
        assert_eq!(cfg.crop.scale_lo, 0.6);
        assert_eq!(cfg.crop.scale_hi, 1.0);
        assert_eq!(cfg.net.image_size, (64, 48));
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.gan_mode, GanMode::Bce);

        let find = |key: &str| {
            cfg.lines
                .iter()
                .find(|l| l.starts_with(&format!("{key} = ")))
                .unwrap()
                .clone()
        };
        assert!(find("train.epochs").contains("(flag)"), "{}", find("train.epochs"));
        assert!(find("train.lr").contains("(file)"));
        assert!(find("crop.scale_hi").contains("(default)"));
    }

    #[test]
    fn env_layer_sits_between_file_and_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(&dir, "[data_io]\nroot = \"/data/from-file\"\n");
        let env = Some(PathBuf::from("/data/from-env"));

        let cfg = RunConfig::resolve(Some(&path), env.clone(), &Overrides::default()).unwrap();
        assert_eq!(cfg.data_root.as_deref(), Some(Path::new("/data/from-env")));
        assert!(cfg.lines[0].contains("(env)"));

        let ovr = Overrides {
            data_root: Some(PathBuf::from("/data/from-flag")),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(&path), env, &ovr).unwrap();
        assert_eq!(cfg.data_root.as_deref(), Some(Path::new("/data/from-flag")));
        assert!(cfg.lines[0].contains("(flag)"));
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [
            "[crop]\nscael_lo = 0.5\n",
            "[corp]\nscale_lo = 0.5\n",
            "[train]\nmomentum = 0.9\n",
        ] {
            let path = write_cfg(&dir, bad);
            let err = RunConfig::resolve(Some(&path), None, &Overrides::default()).unwrap_err();
            assert!(matches!(err, ConfigError::Parse { .. }), "accepted {bad:?}");
        }
    }

    #[test]
    fn erase_roles_parse_into_the_agnostic_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(
            &dir,
            "[agnostic]\nerase_roles = [\"upper_clothes\", \"arms\"]\ndilation_px = 3\n",
        );
        let cfg = RunConfig::resolve(Some(&path), None, &Overrides::default()).unwrap();
        assert_eq!(
            cfg.agnostic.erase_roles,
            BTreeSet::from([Role::UpperClothes, Role::Arms])
        );
        assert_eq!(cfg.agnostic.dilation_px, 3);
    }

    #[test]
    fn unknown_extractor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(&dir, "[eval]\nextractor = \"inception\"\n");
        let err = RunConfig::resolve(Some(&path), None, &Overrides::default()).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn train_config_carries_every_resolved_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(
            &dir,
            r#"
[crop]
out_h = 64
out_w = 48
include_cloth = true

[net]
image_size = [64, 48]
num_labels = 8

[train]
seed = 9
bend_weight = 0.25
"#,
        );
        let cfg = RunConfig::resolve(Some(&path), None, &Overrides::default()).unwrap();
        let tc = cfg.train_config(Stage::Deform);
        assert_eq!(tc.stage, Stage::Deform);
        assert_eq!(tc.seed, 9);
        assert_eq!(tc.bend_weight, 0.25);
        assert!(tc.include_cloth);
        assert_eq!(tc.net.num_labels, 8);
        tc.validate().unwrap();
    }
}
