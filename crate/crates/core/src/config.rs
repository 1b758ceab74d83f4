//! Plain-text configuration: `[section]` headers over `key = value` lines.
//!
//! Any value can be overridden from the environment as `DISTILL_LAB_<SECTION>_<KEY>`, e.g.
//! `DISTILL_LAB_DISTILL_CANDIDATES=3`. Keys are consumed by typed getters; keys nobody asked
//! for are reported by [`ConfigFile::finish`] so typos do not pass silently.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::dataset::DatasetSpec;
use crate::denoiser::{GuidanceConfig, LossWeighting};
use crate::distill::{DistillConfig, Method, WeightScheme};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "DISTILL_LAB_";

#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    /// Directory relative paths are resolved against.
    base_dir: PathBuf,
}

impl FromStr for ConfigFile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("keys must appear under a [section]".into()));
                }
                continue;
            };
            let entry = sections.entry(name.trim().to_ascii_lowercase()).or_default();
            for (k, v) in props.iter() {
                entry.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
            }
        }
        Ok(Self {
            sections,
            base_dir: PathBuf::new(),
        })
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = text.parse()?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Applies `DISTILL_LAB_<SECTION>_<KEY>` overrides from the process environment.
    pub fn with_env(self) -> Self {
        self.with_overrides(std::env::vars())
    }

    /// Applies overrides from `(name, value)` pairs; names without the prefix are ignored.
    pub fn with_overrides(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Self {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let Some((section, key)) = rest.split_once('_') else {
                continue;
            };
            self.set(&section.to_ascii_lowercase(), &key.to_ascii_lowercase(), value);
        }
        self
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Removes and parses `section.key`.
    pub fn take<T>(&mut self, section: &str, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.sections.get_mut(section).and_then(|s| s.remove(key)) else {
            return Ok(None);
        };
        raw.parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("[{section}] {key} = {raw}: {e}")))
    }

    pub fn take_or<T>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(section, key)?.unwrap_or(default))
    }

    pub fn require<T>(&mut self, section: &str, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.take(section, key)?
            .ok_or_else(|| Error::Config(format!("missing [{section}] {key}")))
    }

    /// Comma-separated list.
    pub fn take_list<T>(&mut self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.take::<String>(section, key)? else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Config(format!("[{section}] {key}: `{s}`: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// A path resolved against the config file's directory.
    pub fn take_path(&mut self, section: &str, key: &str) -> Result<Option<PathBuf>> {
        Ok(self
            .take::<String>(section, key)?
            .map(|p| self.base_dir.join(p)))
    }

    /// Fails on any key that no getter consumed.
    pub fn finish(self) -> Result<()> {
        let left: Vec<String> = self
            .sections
            .iter()
            .flat_map(|(s, keys)| keys.keys().map(move |k| format!("[{s}] {k}")))
            .collect();
        if left.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", left.join(", "))))
        }
    }
}

/// `[dataset]`: `kind = mixture | shapes`; mixtures take `classes`, `radius`, `variance`,
/// grids take `size` and `pixel_noise`; both take `samples` and `seed`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetConfig {
    pub spec: DatasetSpec,
    pub samples: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn from_config(c: &mut ConfigFile) -> Result<Self> {
        let s = "dataset";
        let kind: String = c.take_or(s, "kind", "mixture".to_string())?;
        let spec = match kind.as_str() {
            "mixture" => DatasetSpec::circle_mixture(
                c.take_or(s, "classes", 4)?,
                c.take_or(s, "radius", 3.0)?,
                c.take_or(s, "variance", 0.15)?,
            ),
            "shapes" => DatasetSpec::Shapes {
                size: c.take_or(s, "size", 8)?,
                pixel_noise: c.take_or(s, "pixel_noise", 0.05)?,
            },
            other => return Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        };
        spec.validate()?;
        Ok(Self {
            spec,
            samples: c.take_or(s, "samples", 4000)?,
            seed: c.take_or(s, "seed", 0)?,
        })
    }
}

/// `[train]`: `steps`, `batch_size`, `learning_rate`, `seed` over the given defaults.
pub fn train_config(c: &mut ConfigFile, defaults: TrainConfig) -> Result<TrainConfig> {
    let s = "train";
    let cfg = TrainConfig {
        steps: c.take_or(s, "steps", defaults.steps)?,
        batch_size: c.take_or(s, "batch_size", defaults.batch_size)?,
        learning_rate: c.take_or(s, "learning_rate", defaults.learning_rate)?,
        seed: c.take_or(s, "seed", defaults.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `[distill]` over the defaults for `method`. `guidance` and `preview_guidance` are CFG scales;
/// `seed` is not read here (runs derive it from the seed base).
pub fn distill_config(c: &mut ConfigFile, method: Method) -> Result<DistillConfig> {
    let s = "distill";
    let d = DistillConfig::for_method(method);
    let guidance = GuidanceConfig::new(c.take_or(s, "guidance", d.guidance.cfg_scale)?)?;
    let preview_guidance = match c.take::<f64>(s, "preview_guidance")? {
        Some(g) => Some(GuidanceConfig::new(g)?),
        None => d.preview_guidance,
    };
    Ok(DistillConfig {
        total_steps: c.take_or(s, "total_steps", d.total_steps)?,
        reward_steps: c.take_or(s, "reward_steps", d.reward_steps)?,
        candidates: c.take_or(s, "candidates", d.candidates)?,
        denoise_steps: c.take_or(s, "denoise_steps", d.denoise_steps)?,
        scheme: c.take_or::<WeightScheme>(s, "scheme", d.scheme)?,
        guidance,
        preview_guidance,
        learning_rate: c.take_or(s, "learning_rate", d.learning_rate)?,
        t_min: c.take_or(s, "t_min", d.t_min)?,
        t_max: c.take_or(s, "t_max", d.t_max)?,
        loss_weighting: c.take_or::<LossWeighting>(s, "loss_weighting", d.loss_weighting)?,
        seed: d.seed,
        particles: c.take_or(s, "particles", d.particles)?,
        adapter_learning_rate: c.take_or(s, "adapter_learning_rate", d.adapter_learning_rate)?,
        init_scale: c.take_or(s, "init_scale", d.init_scale)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "
[dataset]
kind = mixture
classes = 3
radius = 2.0

[distill]
candidates = 6
scheme = top2-minus-bottom2
guidance = 50
";

    #[test]
    fn parses_sections_and_defaults() {
        let mut c: ConfigFile = TEXT.parse().unwrap();
        let data = DatasetConfig::from_config(&mut c).unwrap();
        assert_eq!(data.spec, DatasetSpec::circle_mixture(3, 2.0, 0.15));
        assert_eq!(data.samples, 4000);
        let d = distill_config(&mut c, Method::RewardSds).unwrap();
        assert_eq!(d.candidates, 6);
        assert_eq!(d.guidance.cfg_scale, 50.0);
        assert_eq!(d.total_steps, 1000);
        c.finish().unwrap();
    }

    #[test]
    fn env_overrides_win() {
        let c: ConfigFile = TEXT.parse().unwrap();
        let mut c = c.with_overrides([
            ("DISTILL_LAB_DISTILL_CANDIDATES".to_string(), "3".to_string()),
            ("DISTILL_LAB_DISTILL_T_MAX".to_string(), "900".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ]);
        let d = distill_config(&mut c, Method::Sds).unwrap();
        assert_eq!((d.candidates, d.t_max), (3, 900));
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        let mut c: ConfigFile = "[distill]\ncandidats = 3\n".parse().unwrap();
        distill_config(&mut c, Method::Sds).unwrap();
        assert!(matches!(c.finish(), Err(Error::Config(_))));
        let mut c: ConfigFile = "[distill]\ncandidates = many\n".parse().unwrap();
        assert!(distill_config(&mut c, Method::Sds).is_err());
        assert!("orphan = 1\n".parse::<ConfigFile>().is_err());
    }

    #[test]
    fn lists_and_paths() {
        let mut c: ConfigFile = "[sweep]\nvalues = 1, 3,7 ,10\n[models]\ndenoiser = m/den\n"
            .parse()
            .unwrap();
        assert_eq!(c.take_list::<usize>("sweep", "values").unwrap(), Some(vec![1, 3, 7, 10]));
        c.base_dir = PathBuf::from("/cfg");
        assert_eq!(
            c.take_path("models", "denoiser").unwrap(),
            Some(PathBuf::from("/cfg/m/den"))
        );
    }
}
