//! Reference-spec files for `defend`: the architecture a client expects, the
//! activations it allows, and optionally its local training setup for linting.

use std::path::Path;

use gia_core::defense::ReferenceSpec;
use gia_core::fl::ClientConfig;
use gia_core::model::{zoo::Arch, ActivationKind, ModelSpec};
use serde::Deserialize;

use crate::config::ConfigError;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefSpecFile {
    pub arch: String,
    pub activation: String,
    #[serde(default = "default_input")]
    pub input: [usize; 3],
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Defaults to the reference activation alone.
    pub allowed_activations: Option<Vec<String>>,
    /// Expected structural hash; checked against the described architecture.
    pub hash: Option<String>,
    pub client: Option<ClientSection>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

fn default_input() -> [usize; 3] {
    [3, 8, 8]
}
fn default_classes() -> usize {
    10
}
fn default_hidden() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}

fn err(location: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { location: location.into(), message: message.into() }
}

impl RefSpecFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let loc = e.span().map_or("refspec".to_string(), |s| {
                let before = &text[..s.start.min(text.len())];
                format!("line {}", before.matches('\n').count() + 1)
            });
            err(&loc, e.message().trim())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(&path.display().to_string(), e.to_string()))?;
        Self::parse(&text).map_err(|e| err(&format!("{}: {}", path.display(), e.location), e.message))
    }

    pub fn spec(&self) -> Result<ModelSpec, ConfigError> {
        let arch = Arch::parse(&self.arch).map_err(|e| err("arch", e.to_string()))?;
        let act = ActivationKind::parse(&self.activation).map_err(|e| err("activation", e.to_string()))?;
        let spec = arch.build(self.input, self.classes, act, self.hidden);
        spec.validate().map_err(|e| err("input", e.to_string()))?;
        Ok(spec)
    }

    pub fn reference(&self) -> Result<ReferenceSpec, ConfigError> {
        let spec = self.spec()?;
        let allowed = match &self.allowed_activations {
            Some(v) => v
                .iter()
                .enumerate()
                .map(|(i, s)| ActivationKind::parse(s).map_err(|e| err(&format!("allowed_activations[{i}]"), e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
            None => spec.activations().take(1).collect(),
        };
        let r = ReferenceSpec::from_spec(&spec, &allowed);
        if let Some(h) = &self.hash {
            if *h != r.hash {
                return Err(err("hash", format!("does not describe the declared architecture (expected {})", r.hash)));
            }
        }
        Ok(r)
    }

    pub fn client(&self) -> Option<ClientConfig> {
        self.client.as_ref().map(|c| ClientConfig { batch_size: c.batch_size, epochs: c.epochs, lr: c.lr, seed: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_must_match_architecture() {
        let f = RefSpecFile::parse("arch = \"cnn-s\"\nactivation = \"relu\"\n").unwrap();
        let r = f.reference().unwrap();
        assert!(r.is_consistent());
        assert_eq!(r.allowed_activations, vec![ActivationKind::Relu]);
        let good = format!("arch = \"cnn-s\"\nactivation = \"relu\"\nhash = \"{}\"\n", r.hash);
        assert!(RefSpecFile::parse(&good).unwrap().reference().is_ok());
        let bad = RefSpecFile::parse("arch = \"cnn-s\"\nactivation = \"relu\"\nhash = \"00\"\n").unwrap();
        assert_eq!(bad.reference().unwrap_err().location, "hash");
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let e = RefSpecFile::parse("arch = \"cnn-s\"\nactivation = \"relu\"\nwidth = 3\n").unwrap_err();
        assert_eq!(e.location, "line 3");
    }
}
