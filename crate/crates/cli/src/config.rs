use std::fs;
use std::path::{Path, PathBuf};

use kspace::baselines::BaselineFamily;
use kspace::data::{load_manifest, make_phantom_set, AugmentSpec, DataSplits, Split};
use kspace::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const PROBABILISTIC: &str = "probabilistic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for phantoms and baseline masks.
    pub seed: u64,
    pub out: PathBuf,
    /// Evaluation worker count; 0 lets the pool decide.
    pub threads: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("runs/default"),
            threads: 0,
            data: DataConfig::default(),
            train: TrainConfig::desk(0.3),
            compare: CompareConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `split path` manifest; phantoms are generated when absent.
    pub manifest: Option<PathBuf>,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Random rotations added per training image (0 disables augmentation).
    pub rotations: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            size: 64,
            train: 32,
            val: 8,
            test: 32,
            rotations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub rates: Vec<f64>,
    pub methods: Vec<String>,
    /// Train a network per cell; otherwise only stored artifacts are used
    /// for reconstruction and the probabilistic method.
    pub train_networks: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let mut methods: Vec<String> = BaselineFamily::ALL.iter().map(|f| f.name().to_string()).collect();
        methods.push(PROBABILISTIC.to_string());
        Self {
            rates: vec![0.2, 0.3],
            methods,
            train_networks: true,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub rate: Option<f64>,
    pub size: Option<usize>,
    pub seed: Option<u64>,
    pub depth: Option<usize>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::Data(format!("cannot read config {}: {e}", p.display()))
                })?;
                let mut cfg: RunConfig = toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                // Relative data paths are taken from the config's directory.
                if let (Some(m), Some(dir)) = (&cfg.data.manifest, p.parent()) {
                    if m.is_relative() {
                        cfg.data.manifest = Some(dir.join(m));
                    }
                }
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply(ov);
        cfg.train.validate()?;
        for m in &cfg.compare.methods {
            if m != PROBABILISTIC {
                m.parse::<BaselineFamily>()?;
            }
        }
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(r) = ov.rate {
            self.train.target_rate = r;
            self.compare.rates = vec![r];
        }
        if let Some(s) = ov.size {
            self.data.size = s;
        }
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(d) = ov.depth {
            self.train.recnet_depth = d;
        }
        if let Some(e) = ov.epochs {
            self.train.max_epochs = e;
        }
        if let Some(o) = &ov.out {
            self.out = o.clone();
        }
        if let Some(t) = ov.threads {
            self.threads = t;
        }
    }

    pub fn snapshot(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Usage(format!("config snapshot: {e}")))?;
        fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }

    /// Train, validation and test sets from the manifest or from phantoms.
    pub fn datasets(&self) -> Result<DataSplits, CliError> {
        let size = self.data.size;
        let mut splits = match &self.data.manifest {
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::Data(format!("dataset manifest {} not found", path.display())));
                }
                load_manifest(path, Some((size, size)))?
            }
            None => {
                let d = &self.data;
                let all = make_phantom_set(d.train + d.val + d.test, size, self.seed)?;
                let a = d.train;
                let b = a + d.val;
                DataSplits {
                    train: all.subset(0..a, Split::Train)?,
                    val: all.subset(a..b, Split::Val)?,
                    test: all.subset(b..b + d.test, Split::Test)?,
                }
            }
        };
        if splits.train.is_empty() {
            return Err(CliError::Data("training split is empty".into()));
        }
        if self.data.rotations > 0 {
            let spec = AugmentSpec {
                rotations_per_image: self.data.rotations,
                rotation_seed: self.seed,
                ..AugmentSpec::default()
            };
            splits.train = splits.train.augmented(&spec);
        }
        Ok(splits)
    }
}
