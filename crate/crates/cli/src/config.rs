//! Experiment files: TOML with one optional section per module.
//!
//! Missing sections and keys fall back to the desk-scale defaults, and
//! command-line flags override file values, so a run is fully described by
//! `defaults <- file <- flags` in that order. Sections:
//!
//! ```toml
//! seed = 42                 # master seed, overridden by --seed
//!
//! [synthetic]               # corpus generation (vcp generate)
//! num_classes = 10
//!
//! [cloze]                   # clip sampling and candidate operations
//! clip_len = 8
//!
//! [backbone]                # 3D CNN layout
//! feature_dim = 64
//!
//! [train]                   # epochs, batch size, SGD hyperparameters
//! epochs = 50
//!
//! [paths]                   # file handoffs, overridden by flags
//! manifest = "corpus/manifest.jsonl"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vcp_core::cloze::ClozeConfig;
use vcp_core::model::BackboneConfig;
use vcp_core::train::{TrainConfig, TrainMode};
use vcp_core::video::SyntheticSpec;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; the `--seed` flag wins over it.
    pub seed: Option<u64>,
    pub synthetic: Option<SyntheticSpec>,
    pub cloze: Option<ClozeOverrides>,
    pub backbone: Option<BackboneConfig>,
    pub train: Option<TrainOverrides>,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset manifest consumed by training and retrieval commands.
    pub manifest: Option<PathBuf>,
    /// Output directory; commands that write require it here or via `--out`.
    pub out: Option<PathBuf>,
    /// Checkpoint consumed by `--init`-style commands.
    pub init: Option<PathBuf>,
}

/// Partial `[cloze]` section, overlaid on the desk-scale defaults (8-frame
/// clips every 4 frames, resize 17x19, crop 16x16, remote distance 8).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClozeOverrides {
    pub clip_len: Option<usize>,
    pub interval: Option<usize>,
    pub clips_per_item: Option<usize>,
    pub resize: Option<(usize, usize)>,
    pub crop: Option<(usize, usize)>,
    pub remote_dist: Option<usize>,
}

impl ClozeOverrides {
    fn apply(&self, mut config: ClozeConfig) -> ClozeConfig {
        if let Some(v) = self.clip_len {
            config.clip_len = v;
        }
        if let Some(v) = self.interval {
            config.interval = v;
        }
        if let Some(v) = self.clips_per_item {
            config.clips_per_item = v;
        }
        if let Some(v) = self.resize {
            config.resize = v;
        }
        if let Some(v) = self.crop {
            config.crop = v;
        }
        if let Some(v) = self.remote_dist {
            config.remote_dist = v;
        }
        config
    }
}

/// Partial `[train]` section, overlaid on the invoked command's defaults
/// (pretrain 300 epochs, finetune 150, probe 30; all batch 8, SGD(0.01,
/// 0.9)). The mode always comes from the command, init paths from flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub seed: Option<u64>,
    pub eval_seed: Option<u64>,
    pub freeze_backbone: Option<bool>,
    pub checkpoint_every: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_items_per_video: Option<usize>,
    pub num_action_classes: Option<usize>,
    pub threads: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, mut config: TrainConfig) -> TrainConfig {
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.lr_decay {
            config.lr_decay = v;
        }
        if let Some(v) = self.momentum {
            config.momentum = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.eval_seed {
            config.eval_seed = v;
        }
        if let Some(v) = self.freeze_backbone {
            config.freeze_backbone = v;
        }
        if let Some(v) = self.checkpoint_every {
            config.checkpoint_every = v;
        }
        if let Some(v) = self.eval_every {
            config.eval_every = v;
        }
        if let Some(v) = self.eval_items_per_video {
            config.eval_items_per_video = v;
        }
        if let Some(v) = self.num_action_classes {
            config.num_action_classes = v;
        }
        if let Some(v) = self.threads {
            config.threads = v;
        }
        config
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            message: format!("cannot read config {}: {e}", path.display()),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            message: format!("config {} is invalid:\n{e}", path.display()),
        })
    }

    /// Corpus spec: `[synthetic]` over desk defaults, seeded per the
    /// master-seed precedence.
    pub fn synthetic_spec(&self, seed_flag: Option<u64>) -> SyntheticSpec {
        let mut spec = self.synthetic.clone().unwrap_or_default();
        if let Some(seed) = seed_flag.or(self.seed) {
            spec.seed = seed;
        }
        spec
    }

    /// `[cloze]` overrides over desk defaults.
    pub fn cloze_config(&self) -> ClozeConfig {
        let base = ClozeConfig::desk_default();
        match &self.cloze {
            Some(overrides) => overrides.apply(base),
            None => base,
        }
    }

    /// `[backbone]`, or the desk default layout.
    pub fn backbone_config(&self) -> BackboneConfig {
        self.backbone.clone().unwrap_or_default()
    }

    /// Training config for one command: the mode's defaults, `[train]`
    /// overrides, then the seed/threads flags. Seed precedence:
    /// `--seed` > top-level `seed` > `[train] seed` > 42.
    pub fn train_config(
        &self,
        mode: TrainMode,
        seed_flag: Option<u64>,
        threads_flag: Option<usize>,
    ) -> TrainConfig {
        let base_seed = 42;
        let base = match mode {
            TrainMode::PretrainVcp => TrainConfig::pretrain(base_seed),
            TrainMode::FinetuneAction => {
                TrainConfig::finetune(base_seed, vcp_core::train::InitSource::Random)
            }
            TrainMode::Probe => {
                TrainConfig::probe(base_seed, vcp_core::train::InitSource::Random)
            }
        };
        let mut config = match &self.train {
            Some(overrides) => overrides.apply(base),
            None => base,
        };
        if let Some(seed) = seed_flag.or(self.seed) {
            config.seed = seed;
        }
        if let Some(threads) = threads_flag {
            config.threads = threads;
        }
        config
    }

    pub fn manifest_path(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.manifest.clone())
            .ok_or_else(|| CliError::Config {
                message: "no manifest given; pass --manifest or set [paths] manifest".into(),
            })
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.out.clone())
            .ok_or_else(|| CliError::Config {
                message: "no output directory given; pass --out or set [paths] out".into(),
            })
    }

    pub fn init_path(&self, flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf).or_else(|| self.paths.init.clone())
    }

    pub fn required_init(&self, flag: Option<&Path>, why: &str) -> Result<PathBuf, CliError> {
        self.init_path(flag).ok_or_else(|| CliError::Config {
            message: format!("{why}; pass --init or set [paths] init"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_yields_desk_defaults() {
        let run: RunConfig = toml::from_str("").unwrap();
        assert_eq!(run.cloze_config(), ClozeConfig::desk_default());
        assert_eq!(run.backbone_config(), BackboneConfig::default());
        let spec = run.synthetic_spec(None);
        assert_eq!(spec.num_classes, 10);
        assert_eq!(spec.seed, 42);
    }

    #[test]
    fn partial_sections_overlay_defaults() {
        let run: RunConfig = toml::from_str(
            "seed = 7\n\
             [cloze]\nclip_len = 4\n\
             [train]\nepochs = 12\nlearning_rate = 0.002\n\
             [synthetic]\nnum_classes = 3\n",
        )
        .unwrap();
        let cloze = run.cloze_config();
        assert_eq!(cloze.clip_len, 4);
        assert_eq!(cloze.crop, (16, 16)); // untouched desk default

        let train = run.train_config(TrainMode::FinetuneAction, None, Some(2));
        assert_eq!(train.epochs, 12);
        assert_eq!(train.learning_rate, 0.002);
        assert_eq!(train.batch_size, 8); // finetune default
        assert_eq!(train.seed, 7); // top-level seed
        assert_eq!(train.threads, 2);

        let spec = run.synthetic_spec(Some(9));
        assert_eq!(spec.num_classes, 3);
        assert_eq!(spec.videos_per_class, 50);
        assert_eq!(spec.seed, 9); // flag beats file
    }

    #[test]
    fn seed_precedence_is_flag_file_section() {
        let run: RunConfig =
            toml::from_str("[train]\nseed = 5\n").unwrap();
        assert_eq!(run.train_config(TrainMode::PretrainVcp, None, None).seed, 5);
        let run: RunConfig =
            toml::from_str("seed = 6\n[train]\nseed = 5\n").unwrap();
        assert_eq!(run.train_config(TrainMode::PretrainVcp, None, None).seed, 6);
        assert_eq!(run.train_config(TrainMode::PretrainVcp, Some(8), None).seed, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[cloze]\nclip_length = 8\n").unwrap_err();
        assert!(err.to_string().contains("clip_length"), "got: {err}");
        let err = toml::from_str::<RunConfig>("[clozee]\n").unwrap_err();
        assert!(err.to_string().contains("clozee"), "got: {err}");
    }
}
