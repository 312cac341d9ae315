//! Run configuration: `[section]` headers and `key = value` lines, every
//! key known in advance.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use pointxfer::datasets::{DomainSpec, Orientation, SplitFractions};
use pointxfer::experiments::SuiteConfig;
use pointxfer::models::{Architecture, BackboneKind};
use pointxfer::optim::OptimizerConfig;
use pointxfer::transfer::{FinetuneConfig, ProbeConfig, Regularization, TrainConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSection {
    pub preset: String,
    pub samples_per_class: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: Option<f64>,
    pub partial_fraction: Option<f64>,
    pub density_bias: Option<f64>,
    pub orientation: Option<Orientation>,
    /// Defaults to 1, 2 and 3 for SOURCE, TARGET-NEAR and TARGET-FAR.
    pub seed: Option<u64>,
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisSection {
    pub batches: usize,
    pub batch_size: usize,
    pub points: usize,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: Option<String>,
    pub seed: u64,
    pub jobs: usize,
    pub dataset: DatasetSection,
    pub backbone: BackboneKind,
    pub k: usize,
    pub widths: Vec<usize>,
    pub pretrain: TrainConfig,
    pub normal_k: usize,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub analysis: AnalysisSection,
    pub reproduce: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = Architecture::new(BackboneKind::GlobalPointnet, 1);
        Self {
            name: None,
            seed: 0,
            jobs: 1,
            dataset: DatasetSection {
                preset: "SOURCE".into(),
                samples_per_class: 40,
                points_per_cloud: 2048,
                noise_sigma: None,
                partial_fraction: None,
                density_bias: None,
                orientation: None,
                seed: None,
                train_fraction: SplitFractions::default().train,
            },
            backbone: arch.backbone,
            k: arch.k,
            widths: arch.widths,
            pretrain: TrainConfig::default(),
            normal_k: 30,
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            analysis: AnalysisSection {
                batches: 8,
                batch_size: 16,
                points: 256,
                seeds: 1,
            },
            reproduce: SuiteConfig::default(),
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ConfigError(format!("[{section}] {key}: invalid value {value:?}: {e}")))
}

fn parse_list(section: &str, key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(section, key, v)).collect()
}

fn list(xs: &[usize]) -> String {
    if xs.is_empty() {
        return "none".into();
    }
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), T::to_string)
}

fn adam_parts(opt: &OptimizerConfig) -> (f64, f64) {
    match *opt {
        OptimizerConfig::Adam { lr, weight_decay, .. } | OptimizerConfig::Sgd { lr, weight_decay, .. } => {
            (lr, weight_decay)
        }
    }
}

impl RunConfig {
    /// Reads a config file; unknown sections and keys are errors.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError(format!("config syntax: {e}")))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let s = section;
        let v = value.trim();
        match (s, key) {
            ("run", "name") => self.name = Some(v.to_string()),
            ("run", "seed") => self.seed = parse(s, key, v)?,
            ("run", "jobs") => self.jobs = parse(s, key, v)?,
            ("dataset", "preset") => self.dataset.preset = v.to_ascii_uppercase(),
            ("dataset", "samples_per_class") => self.dataset.samples_per_class = parse(s, key, v)?,
            ("dataset", "points_per_cloud") => self.dataset.points_per_cloud = parse(s, key, v)?,
            ("dataset", "noise_sigma") => self.dataset.noise_sigma = Some(parse(s, key, v)?),
            ("dataset", "partial_fraction") => self.dataset.partial_fraction = Some(parse(s, key, v)?),
            ("dataset", "density_bias") => self.dataset.density_bias = Some(parse(s, key, v)?),
            ("dataset", "orientation") => self.dataset.orientation = Some(parse(s, key, v)?),
            ("dataset", "seed") => self.dataset.seed = Some(parse(s, key, v)?),
            ("dataset", "train_fraction") => self.dataset.train_fraction = parse(s, key, v)?,
            ("model", "backbone") => self.backbone = parse(s, key, v)?,
            ("model", "k") => self.k = parse(s, key, v)?,
            ("model", "widths") => self.widths = parse_list(s, key, v)?,
            ("pretrain", "objective") => self.pretrain.objective = parse(s, key, v)?,
            ("pretrain", "regularize_layers") => {
                let layers = parse_list(s, key, v)?;
                let lambda = self.pretrain.regularize.as_ref().map_or(1.0, |r| r.lambda);
                self.pretrain.regularize = (!layers.is_empty()).then_some(Regularization { layers, lambda });
            }
            ("pretrain", "lambda") => {
                let lambda = parse(s, key, v)?;
                if let Some(r) = &mut self.pretrain.regularize {
                    r.lambda = lambda;
                } else {
                    self.pretrain.regularize = Some(Regularization {
                        lambda,
                        ..Regularization::default()
                    });
                }
            }
            ("pretrain", "epochs") => self.pretrain.epochs = parse(s, key, v)?,
            ("pretrain", "batch_size") => self.pretrain.batch_size = parse(s, key, v)?,
            ("pretrain", "lr") => {
                let (_, wd) = adam_parts(&self.pretrain.optimizer);
                self.pretrain.optimizer = OptimizerConfig::adam(parse(s, key, v)?, wd);
            }
            ("pretrain", "weight_decay") => {
                let (lr, _) = adam_parts(&self.pretrain.optimizer);
                self.pretrain.optimizer = OptimizerConfig::adam(lr, parse(s, key, v)?);
            }
            ("pretrain", "tau") => self.pretrain.tau = parse(s, key, v)?,
            ("pretrain", "pair_cap") => self.pretrain.pair_cap = parse(s, key, v)?,
            ("pretrain", "points") => self.pretrain.points = parse(s, key, v)?,
            ("pretrain", "crop_fraction") => self.pretrain.crop_fraction = parse(s, key, v)?,
            ("pretrain", "normal_k") => self.normal_k = parse(s, key, v)?,
            ("probe", "classifier") => self.probe.classifier = parse(s, key, v)?,
            ("probe", "steps") => self.probe.steps = parse(s, key, v)?,
            ("probe", "lr") => self.probe.lr = parse(s, key, v)?,
            ("probe", "weight_decay") => self.probe.weight_decay = parse(s, key, v)?,
            ("probe", "points") => self.probe.points = parse(s, key, v)?,
            ("finetune", "epochs") => self.finetune.epochs = parse(s, key, v)?,
            ("finetune", "batch_size") => self.finetune.batch_size = parse(s, key, v)?,
            ("finetune", "lr") => {
                let (_, wd) = adam_parts(&self.finetune.optimizer);
                self.finetune.optimizer = OptimizerConfig::adam(parse(s, key, v)?, wd);
            }
            ("finetune", "weight_decay") => {
                let (lr, _) = adam_parts(&self.finetune.optimizer);
                self.finetune.optimizer = OptimizerConfig::adam(lr, parse(s, key, v)?);
            }
            ("finetune", "backbone_lr_scale") => self.finetune.backbone_lr_scale = parse(s, key, v)?,
            ("finetune", "points") => self.finetune.points = parse(s, key, v)?,
            ("finetune", "max_rotation_deg") => self.finetune.max_rotation_deg = parse(s, key, v)?,
            ("analysis", "batches") => self.analysis.batches = parse(s, key, v)?,
            ("analysis", "batch_size") => self.analysis.batch_size = parse(s, key, v)?,
            ("analysis", "points") => self.analysis.points = parse(s, key, v)?,
            ("analysis", "seeds") => self.analysis.seeds = parse(s, key, v)?,
            ("reproduce", "seeds") => self.reproduce.seeds = parse(s, key, v)?,
            ("reproduce", "source_per_class") => self.reproduce.source_per_class = parse(s, key, v)?,
            ("reproduce", "target_per_class") => self.reproduce.target_per_class = parse(s, key, v)?,
            ("reproduce", "data_seed") => self.reproduce.data_seed = parse(s, key, v)?,
            ("reproduce", "points") => self.reproduce.points = parse(s, key, v)?,
            ("reproduce", "pretrain_epochs") => self.reproduce.pretrain_epochs = parse(s, key, v)?,
            ("reproduce", "finetune_epochs") => self.reproduce.finetune_epochs = parse(s, key, v)?,
            ("reproduce", "grad_batches") => self.reproduce.grad_batches = parse(s, key, v)?,
            ("reproduce", "probe_layer") => self.reproduce.probe_layer = v.to_string(),
            ("run" | "dataset" | "model" | "pretrain" | "probe" | "finetune" | "analysis" | "reproduce", _) => {
                return Err(ConfigError(format!("unknown key {key:?} in section [{s}]")));
            }
            _ => {
                return Err(ConfigError(if s.is_empty() {
                    format!("key {key:?} outside any section")
                } else {
                    format!("unknown section [{s}] (key {key:?})")
                }));
            }
        }
        Ok(())
    }

    /// Every setting, in the syntax [`RunConfig::parse`] reads back.
    pub fn to_ini(&self) -> String {
        let (plr, pwd) = adam_parts(&self.pretrain.optimizer);
        let (flr, fwd) = adam_parts(&self.finetune.optimizer);
        let d = &self.dataset;
        let r = &self.reproduce;
        let reg = self.pretrain.regularize.as_ref();
        let sections: Vec<(&str, Vec<(&str, String)>)> = vec![
            (
                "run",
                vec![
                    ("name", opt(&self.name)),
                    ("seed", self.seed.to_string()),
                    ("jobs", self.jobs.to_string()),
                ],
            ),
            (
                "dataset",
                vec![
                    ("preset", d.preset.clone()),
                    ("samples_per_class", d.samples_per_class.to_string()),
                    ("points_per_cloud", d.points_per_cloud.to_string()),
                    ("noise_sigma", opt(&d.noise_sigma)),
                    ("partial_fraction", opt(&d.partial_fraction)),
                    ("density_bias", opt(&d.density_bias)),
                    ("orientation", d.orientation.map_or(String::new(), |o| o.name().into())),
                    ("seed", opt(&d.seed)),
                    ("train_fraction", d.train_fraction.to_string()),
                ],
            ),
            (
                "model",
                vec![
                    ("backbone", self.backbone.to_string()),
                    ("k", self.k.to_string()),
                    ("widths", list(&self.widths)),
                ],
            ),
            (
                "pretrain",
                vec![
                    ("objective", self.pretrain.objective.to_string()),
                    ("regularize_layers", list(reg.map_or(&[][..], |r| &r.layers))),
                    ("lambda", reg.map_or(1.0, |r| r.lambda).to_string()),
                    ("epochs", self.pretrain.epochs.to_string()),
                    ("batch_size", self.pretrain.batch_size.to_string()),
                    ("lr", plr.to_string()),
                    ("weight_decay", pwd.to_string()),
                    ("tau", self.pretrain.tau.to_string()),
                    ("pair_cap", self.pretrain.pair_cap.to_string()),
                    ("points", self.pretrain.points.to_string()),
                    ("crop_fraction", self.pretrain.crop_fraction.to_string()),
                    ("normal_k", self.normal_k.to_string()),
                ],
            ),
            (
                "probe",
                vec![
                    ("classifier", self.probe.classifier.name().into()),
                    ("steps", self.probe.steps.to_string()),
                    ("lr", self.probe.lr.to_string()),
                    ("weight_decay", self.probe.weight_decay.to_string()),
                    ("points", self.probe.points.to_string()),
                ],
            ),
            (
                "finetune",
                vec![
                    ("epochs", self.finetune.epochs.to_string()),
                    ("batch_size", self.finetune.batch_size.to_string()),
                    ("lr", flr.to_string()),
                    ("weight_decay", fwd.to_string()),
                    ("backbone_lr_scale", self.finetune.backbone_lr_scale.to_string()),
                    ("points", self.finetune.points.to_string()),
                    ("max_rotation_deg", self.finetune.max_rotation_deg.to_string()),
                ],
            ),
            (
                "analysis",
                vec![
                    ("batches", self.analysis.batches.to_string()),
                    ("batch_size", self.analysis.batch_size.to_string()),
                    ("points", self.analysis.points.to_string()),
                    ("seeds", self.analysis.seeds.to_string()),
                ],
            ),
            (
                "reproduce",
                vec![
                    ("seeds", r.seeds.to_string()),
                    ("source_per_class", r.source_per_class.to_string()),
                    ("target_per_class", r.target_per_class.to_string()),
                    ("data_seed", r.data_seed.to_string()),
                    ("points", r.points.to_string()),
                    ("pretrain_epochs", r.pretrain_epochs.to_string()),
                    ("finetune_epochs", r.finetune_epochs.to_string()),
                    ("grad_batches", r.grad_batches.to_string()),
                    ("probe_layer", r.probe_layer.clone()),
                ],
            ),
        ];
        let mut out = String::new();
        for (name, entries) in sections {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                if !v.is_empty() {
                    let _ = writeln!(out, "{k} = {v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn architecture(&self, num_classes: usize) -> Architecture {
        Architecture {
            backbone: self.backbone,
            k: self.k,
            widths: self.widths.clone(),
            ..Architecture::new(self.backbone, num_classes)
        }
    }

    /// The stock domain `name`; the `[dataset]` overrides apply when it is
    /// also the configured preset.
    pub fn domain(&self, name: &str) -> Result<DomainSpec, ConfigError> {
        let name = name.to_ascii_uppercase();
        let default_seed = match name.as_str() {
            "TARGET-NEAR" | "NEAR" => 2,
            "TARGET-FAR" | "FAR" => 3,
            _ => 1,
        };
        let d = &self.dataset;
        let own = DomainSpec::preset(&d.preset, 1, 0).zip(DomainSpec::preset(&name, 1, 0)).is_some_and(|(a, b)| a.name == b.name);
        let mut spec = DomainSpec::preset(&name, d.samples_per_class, d.seed.filter(|_| own).unwrap_or(default_seed))
            .ok_or_else(|| ConfigError(format!("unknown dataset preset {name:?} (expected SOURCE, TARGET-NEAR or TARGET-FAR)")))?;
        if own {
            spec.points_per_cloud = d.points_per_cloud;
            spec.noise_sigma = d.noise_sigma.unwrap_or(spec.noise_sigma);
            spec.partial_fraction = d.partial_fraction.unwrap_or(spec.partial_fraction);
            spec.density_bias = d.density_bias.unwrap_or(spec.density_bias);
            spec.orientation = d.orientation.unwrap_or(spec.orientation);
        }
        Ok(spec)
    }

    pub fn split(&self) -> SplitFractions {
        let train = self.dataset.train_fraction;
        // Rounded so that train = 0.8 yields exactly the default 0.2.
        SplitFractions {
            train,
            test: ((1.0 - train) * 1e9).round() / 1e9,
        }
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            backbone: self.backbone,
            jobs: self.jobs,
            ..self.reproduce.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("pretrain", "regularize_layers", "0,1").unwrap();
        cfg.set("pretrain", "lambda", "0.5").unwrap();
        cfg.set("dataset", "noise_sigma", "0.02").unwrap();
        cfg.set("model", "backbone", "edgeconv").unwrap();
        let back = RunConfig::parse(&cfg.to_ini()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("[pretrain]\nepoch = 3\n").unwrap_err();
        assert!(err.0.contains("\"epoch\""), "{err}");
        let err = RunConfig::parse("[pretrainn]\nepochs = 3\n").unwrap_err();
        assert!(err.0.contains("pretrainn"), "{err}");
        let err = RunConfig::parse("[probe]\nsteps = many\n").unwrap_err();
        assert!(err.0.contains("steps"), "{err}");
    }
}
