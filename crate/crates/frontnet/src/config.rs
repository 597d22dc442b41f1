//! Flat `key = value` configuration files and `--key value` overrides.

use anyhow::{bail, Context, Result};
use frontnet_core::hooks::HookType;
use frontnet_core::losses::Supervision;
use frontnet_core::train::{Schedule, TrainConfig};

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "FRONTNET_DATA_ROOT";

/// Lines of `key = value`; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got `{line}`", i + 1);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Pairs `--key value` (or `--key=value`) arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            bail!("expected `--key value`, got `{a}`");
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
        } else {
            let v = it.next().with_context(|| format!("`--{key}` needs a value"))?;
            out.push((key.replace('-', "_"), v.clone()));
        }
    }
    Ok(out)
}

/// Training settings plus options that live outside the core config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scale: String,
    pub pretrained_weights: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::tiny(),
            scale: "tiny".into(),
            pretrained_weights: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    v.parse().with_context(|| format!("`{key}`: cannot parse `{v}`"))
}

impl RunConfig {
    /// Applies pairs in order, except that `scale` is applied first since it
    /// resets every other field to its profile.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "scale") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "scale") {
            cfg.set(k, v)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "scale" => {
                t.clone_from(&match v {
                    "paper" => TrainConfig::paper(),
                    "tiny" => TrainConfig::tiny(),
                    _ => bail!("`scale` must be paper or tiny, got `{v}`"),
                });
                self.scale = v.into();
            }
            "hook" | "hook_type" => {
                t.model.hook = match v {
                    "none" => None,
                    _ => Some(HookType::parse(v).with_context(|| format!("unknown hook `{v}`"))?),
                }
            }
            "supervision" => {
                t.model.supervision = Supervision::parse(v).with_context(|| format!("unknown supervision `{v}`"))?
            }
            "schedule" => t.schedule = Schedule::parse(v).with_context(|| format!("unknown schedule `{v}`"))?,
            "input_size" => t.model.input_size = num(key, v)?,
            "context_dim" => t.model.context_dim = num(key, v)?,
            "target_base" => t.model.target_base = num(key, v)?,
            "window" => t.model.window = num(key, v)?,
            "lambda1" => t.loss.lambda1 = num(key, v)?,
            "lambda2" => t.loss.lambda2 = num(key, v)?,
            "lambda3" => t.loss.lambda3 = num(key, v)?,
            "tau" => t.loss.tau = num(key, v)?,
            "anchors_per_class" => t.loss.anchors_per_class = num(key, v)?,
            "max_negatives" => t.loss.max_negatives = num(key, v)?,
            "lr0" => t.lr0 = num(key, v)?,
            "momentum" => t.momentum = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "decay" => t.decay = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "patches_per_scene" => t.patches_per_scene = num(key, v)?,
            "val_patches_per_scene" => t.val_patches_per_scene = num(key, v)?,
            "val_fraction" => t.val_fraction = num(key, v)?,
            "augment" => t.augment = num(key, v)?,
            "pretrained_weights" => self.pretrained_weights = (!v.is_empty() && v != "none").then(|| v.to_string()),
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Every key with its current value; `from_pairs(parse_kv(to_text()))`
    /// reproduces the config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let l = &t.loss;
        let lines = [
            ("scale", self.scale.clone()),
            ("input_size", m.input_size.to_string()),
            ("context_dim", m.context_dim.to_string()),
            ("target_base", m.target_base.to_string()),
            ("window", m.window.to_string()),
            ("hook", m.hook.map_or("none", HookType::name).to_string()),
            ("supervision", m.supervision.name().to_string()),
            ("lambda1", l.lambda1.to_string()),
            ("lambda2", l.lambda2.to_string()),
            ("lambda3", l.lambda3.to_string()),
            ("tau", l.tau.to_string()),
            ("anchors_per_class", l.anchors_per_class.to_string()),
            ("max_negatives", l.max_negatives.to_string()),
            ("lr0", t.lr0.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("decay", t.decay.to_string()),
            ("schedule", t.schedule.name().to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("patches_per_scene", t.patches_per_scene.to_string()),
            ("val_patches_per_scene", t.val_patches_per_scene.to_string()),
            ("val_fraction", t.val_fraction.to_string()),
            ("augment", t.augment.to_string()),
            ("pretrained_weights", self.pretrained_weights.clone().unwrap_or_else(|| "none".into())),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_kv(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("hook", "cbam").unwrap();
        c.set("tau", "0.07").unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn scale_applies_before_other_keys() {
        let pairs = parse_overrides(&["--epochs".into(), "3".into(), "--scale=paper".into()]).unwrap();
        let c = RunConfig::from_pairs(&pairs).unwrap();
        assert_eq!((c.train.epochs, c.train.model.input_size), (3, 224));
    }

    #[test]
    fn default_weights_in_snapshot() {
        let text = RunConfig::default().to_text();
        for line in ["lambda1 = 1\n", "lambda2 = 1\n", "lambda3 = 0.5\n"] {
            assert!(text.contains(line));
        }
    }
}
