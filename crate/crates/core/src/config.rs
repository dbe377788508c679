//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost_model::{derive_pivot, derive_pivot_time, GpuProfile, ModelProfile};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::policies::{PolicyConfig, PolicyKind};
use crate::workload::TraceConfig;

/// Model and hardware description as written in a config file. Unset
/// fields fall back to the named preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSpec {
    /// `opt-13b` (default) or `opt-175b`.
    pub preset: Option<String>,
    pub hidden_size: Option<u64>,
    pub num_layers: Option<u64>,
    pub pivot_forward_size: Option<usize>,
    pub pivot_time_s: Option<f64>,
    pub bytes_per_element: Option<u64>,
    pub fixed_overhead_s: Option<f64>,
    pub kvc_capacity_tokens: Option<usize>,
    pub peak_flops: Option<f64>,
    pub saturation_efficiency: Option<f64>,
}

impl ProfileSpec {
    pub fn model(&self) -> Result<ModelProfile> {
        let mut p = self.model_shape()?;
        if let Some(v) = self.pivot_forward_size {
            p.pivot_forward_size = v;
        }
        if let Some(v) = self.pivot_time_s {
            p.pivot_time = v;
        }
        if let Some(v) = self.bytes_per_element {
            p.bytes_per_element = v;
        }
        if let Some(v) = self.fixed_overhead_s {
            p.fixed_overhead = v;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn gpu(&self) -> Result<GpuProfile> {
        let mut g = GpuProfile::a100_like();
        if let Some(v) = self.peak_flops {
            g.peak_flops = v;
        }
        if let Some(v) = self.saturation_efficiency {
            g.saturation_efficiency = v;
        }
        if let Some(v) = self.kvc_capacity_tokens {
            g.kvc_capacity_tokens = v;
        }
        Ok(g)
    }

    /// Reads a profile file (the fields of this struct, as TOML).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ProfileSpec = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        spec.model()?;
        Ok(spec)
    }

    /// Overrides the hardware fields with those set in `gpu`.
    pub fn apply_gpu(&mut self, gpu: &GpuSpec) {
        if gpu.peak_flops.is_some() {
            self.peak_flops = gpu.peak_flops;
        }
        if gpu.saturation_efficiency.is_some() {
            self.saturation_efficiency = gpu.saturation_efficiency;
        }
        if gpu.kvc_capacity_tokens.is_some() {
            self.kvc_capacity_tokens = gpu.kvc_capacity_tokens;
        }
    }

    /// Fills an absent pivot forward size and pivot time from the GPU
    /// throughput. Fields already set are kept, so completing a complete
    /// profile changes nothing.
    pub fn complete(&self) -> Result<ProfileSpec> {
        let mut out = self.clone();
        if out.pivot_forward_size.is_some() && out.pivot_time_s.is_some() {
            return Ok(out);
        }
        if out.peak_flops.is_none() {
            let missing: Vec<&str> = [
                ("pivot_forward_size", out.pivot_forward_size.is_none()),
                ("pivot_time_s", out.pivot_time_s.is_none()),
            ]
            .iter()
            .filter(|(_, absent)| *absent)
            .map(|(k, _)| *k)
            .collect();
            return Err(Error::Config(format!(
                "cannot derive {}: missing key peak_flops",
                missing.join(" and ")
            )));
        }
        let base = self.model_shape()?;
        let gpu = self.gpu()?;
        gpu.validate(1)?;
        let pivot = match out.pivot_forward_size {
            Some(p) => p,
            None => derive_pivot(base.hidden_size, base.num_layers, &gpu)?,
        };
        out.pivot_forward_size = Some(pivot);
        if out.pivot_time_s.is_none() {
            out.pivot_time_s = Some(derive_pivot_time(
                base.hidden_size,
                base.num_layers,
                pivot,
                &gpu,
            ));
        }
        out.model()?;
        Ok(out)
    }

    /// Preset with the shape fields of this spec applied.
    fn model_shape(&self) -> Result<ModelProfile> {
        let mut p = self.preset_profile()?;
        if let Some(v) = self.hidden_size {
            p.hidden_size = v;
        }
        if let Some(v) = self.num_layers {
            p.num_layers = v;
        }
        Ok(p)
    }

    fn preset_profile(&self) -> Result<ModelProfile> {
        match self.preset.as_deref().unwrap_or("opt-13b") {
            "opt-13b" => Ok(ModelProfile::opt_13b_like()),
            "opt-175b" => Ok(ModelProfile::opt_175b_like()),
            other => Err(Error::Config(format!("unknown profile preset `{other}`"))),
        }
    }
}

/// Hardware description as written in a GPU profile file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpuSpec {
    pub peak_flops: Option<f64>,
    pub saturation_efficiency: Option<f64>,
    pub kvc_capacity_tokens: Option<usize>,
}

impl GpuSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

/// Where requests come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceSource {
    File { path: PathBuf },
    Generated(TraceConfig),
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Generated(TraceConfig::default())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trace: TraceSource,
    pub profile: ProfileSpec,
    pub engine: EngineConfig,
    #[serde(rename = "policy")]
    pub policies: Vec<PolicyConfig>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if let Some(cap) = cfg.profile.kvc_capacity_tokens {
            cfg.engine.kvc_capacity_tokens = cap;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Relative trace paths are relative to the config file.
        if let TraceSource::File { path: trace } = &mut cfg.trace {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(cfg)
    }

    /// Policies to run; all four when none are listed.
    pub fn policy_list(&self) -> Vec<PolicyConfig> {
        if self.policies.is_empty() {
            PolicyKind::ALL.into_iter().map(PolicyConfig::new).collect()
        } else {
            self.policies.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.model()?;
        self.engine.validate()?;
        if let TraceSource::Generated(t) = &self.trace {
            t.validate()?;
        }
        for p in &self.policies {
            p.validate()?;
        }
        Ok(())
    }
}
