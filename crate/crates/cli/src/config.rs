use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use simembed::embedding::TrainConfig;
use simembed::losses::{Kernel, LossTag};
use simembed::network::Architecture;

use crate::args::TrainArgs;
use crate::CliError;

/// Training run as read from a JSON file. Every field is optional so that
/// flags can fill the gaps.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub arch: Option<ArchSpec>,
    pub loss: Option<LossTag>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub frames_per_speaker_per_step: Option<usize>,
    pub batch_size: Option<usize>,
    pub sce_weight: Option<f64>,
    pub kernel: Option<Kernel>,
    pub seed: Option<u64>,
}

/// `"full"`, `"small"` or an explicit list of hidden widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Named(String),
    Hidden(Vec<usize>),
}

impl ArchSpec {
    pub fn parse_flag(s: &str) -> Self {
        if s.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            match s.split(',').map(|v| v.trim().parse()).collect() {
                Ok(widths) => ArchSpec::Hidden(widths),
                Err(_) => ArchSpec::Named(s.to_string()),
            }
        } else {
            ArchSpec::Named(s.to_string())
        }
    }

    pub fn resolve(&self) -> Result<Architecture, CliError> {
        let arch = match self {
            ArchSpec::Named(n) if n == "full" => Architecture::full(),
            ArchSpec::Named(n) if n == "small" => Architecture::small(),
            ArchSpec::Named(n) => {
                return Err(CliError::Usage(format!(
                    "unknown architecture `{n}` (use full, small or a width list)"
                )))
            }
            ArchSpec::Hidden(h) => Architecture { hidden: h.clone() },
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Fully resolved run, echoed to stdout and saved next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveRun {
    pub manifest: PathBuf,
    pub matrix: PathBuf,
    pub out: PathBuf,
    pub hidden: Vec<usize>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Applies flag overrides and fills defaults.
    pub fn resolve(self, args: &TrainArgs, seed: Option<u64>) -> Result<EffectiveRun, CliError> {
        let missing =
            |what: &str| CliError::Usage(format!("--{what} is required (flag or config)"));
        let loss = args.loss.or(self.loss).ok_or_else(|| missing("loss"))?;
        let mut train = TrainConfig::new(loss);
        macro_rules! pick {
            ($field:ident, $flag:expr) => {
                if let Some(v) = $flag.or(self.$field) {
                    train.$field = v;
                }
            };
        }
        pick!(epochs, args.epochs);
        pick!(learning_rate, args.learning_rate);
        pick!(frames_per_speaker_per_step, args.frames_per_speaker);
        pick!(batch_size, args.batch_size);
        pick!(sce_weight, args.sce_weight);
        pick!(kernel, args.kernel);
        pick!(seed, seed);
        train.validate()?;

        let arch = args
            .arch
            .as_deref()
            .map(ArchSpec::parse_flag)
            .or(self.arch)
            .unwrap_or(ArchSpec::Named("full".into()))
            .resolve()?;

        Ok(EffectiveRun {
            manifest: args
                .manifest
                .clone()
                .or(self.manifest)
                .ok_or_else(|| missing("manifest"))?,
            matrix: args
                .matrix
                .clone()
                .or(self.matrix)
                .ok_or_else(|| missing("matrix"))?,
            out: args
                .out
                .clone()
                .or(self.out)
                .ok_or_else(|| missing("out"))?,
            hidden: arch.hidden,
            train,
        })
    }
}
