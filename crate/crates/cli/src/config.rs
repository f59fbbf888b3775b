//! Declarative run configuration: TOML files with explicit units in key
//! names, plus `TEAMRING_<SECTION>_<KEY>` environment overrides.

use serde::Deserialize;
use std::path::Path;
use teamring_core::exec::Precision;
use teamring_core::perf::ModelSpec;
use teamring_core::tensor::MaskKind;
use teamring_core::topology::Placement;
use teamring_core::ClusterSpec;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub num_nodes: usize,
    pub devices_per_node: usize,
    pub intra_bw_gbytes_per_s: f64,
    pub inter_bw_gbytes_per_s: f64,
    #[serde(default)]
    pub intra_lat_us: f64,
    #[serde(default)]
    pub inter_lat_us: f64,
    pub device_tflops: f64,
    pub dtype_bytes: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dtype_bytes: u64,
    #[serde(default)]
    pub param_memory_gbytes: f64,
}

/// Either the literal string "auto" or a concrete value.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AutoOr<T> {
    Value(T),
    Keyword(String),
}

impl<T: Copy> AutoOr<T> {
    pub fn resolve(&self, what: &str) -> Result<Option<T>, String> {
        match self {
            AutoOr::Value(v) => Ok(Some(*v)),
            AutoOr::Keyword(s) if s == "auto" => Ok(None),
            AutoOr::Keyword(s) => Err(format!("{}: expected a value or \"auto\", got {:?}", what, s)),
        }
    }
}

fn default_auto<T>() -> AutoOr<T> {
    AutoOr::Keyword("auto".to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub batch: usize,
    pub seq_len: usize,
    pub world_size: usize,
    #[serde(default = "default_auto")]
    pub attn_parallel: AutoOr<usize>,
    #[serde(default = "default_auto")]
    pub placement: AutoOr<String>,
    pub mask: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub precision: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub cluster: ClusterSection,
    pub model: ModelSection,
    pub run: RunSection,
}

pub const ENV_PREFIX: &str = "TEAMRING_";

/// Applies `TEAMRING_<SECTION>_<KEY>=value` overrides onto a parsed TOML
/// table. Values are parsed as bool, integer, float, then string.
fn apply_env_overrides(table: &mut toml::Table) -> Result<(), String> {
    for (name, value) in std::env::vars() {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = ["cluster", "model", "run"]
            .iter()
            .find_map(|s| rest.strip_prefix(&format!("{}_", s)).map(|k| (*s, k)))
        else {
            return Err(format!(
                "unrecognized override {} (expected TEAMRING_{{CLUSTER|MODEL|RUN}}_<KEY>)",
                name
            ));
        };
        let parsed: toml::Value = if let Ok(b) = value.parse::<bool>() {
            toml::Value::Boolean(b)
        } else if let Ok(i) = value.parse::<i64>() {
            toml::Value::Integer(i)
        } else if let Ok(f) = value.parse::<f64>() {
            toml::Value::Float(f)
        } else {
            toml::Value::String(value.clone())
        };
        table
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("config section {} is not a table", section))?
            .insert(key.to_string(), parsed);
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {}", path.display(), e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    let mut table: toml::Table = text.parse().map_err(|e| format!("config parse error: {}", e))?;
    apply_env_overrides(&mut table)?;
    table
        .try_into()
        .map_err(|e| format!("config validation error: {}", e))
}

impl ClusterSection {
    pub fn to_cluster_spec(&self) -> ClusterSpec {
        ClusterSpec {
            num_nodes: self.num_nodes,
            devices_per_node: self.devices_per_node,
            intra_bw: self.intra_bw_gbytes_per_s * 1e9,
            inter_bw: self.inter_bw_gbytes_per_s * 1e9,
            intra_lat: self.intra_lat_us * 1e-6,
            inter_lat: self.inter_lat_us * 1e-6,
            device_flops: self.device_tflops * 1e12,
            dtype_bytes: self.dtype_bytes,
        }
    }
}

impl ModelSection {
    pub fn to_model_spec(&self) -> ModelSpec {
        ModelSpec {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            dtype_bytes: self.dtype_bytes,
            param_memory_bytes: (self.param_memory_gbytes * 1e9) as u64,
        }
    }
}

impl RunSection {
    pub fn mask(&self) -> Result<MaskKind, String> {
        match self.mask.as_str() {
            "full" => Ok(MaskKind::Full),
            "causal" => Ok(MaskKind::Causal),
            other => Err(format!("run.mask: expected \"full\" or \"causal\", got {:?}", other)),
        }
    }

    pub fn precision(&self) -> Result<Precision, String> {
        match self.precision.as_deref() {
            None | Some("f64") => Ok(Precision::F64),
            Some("f32") => Ok(Precision::F32),
            Some(other) => Err(format!("run.precision: expected \"f64\" or \"f32\", got {:?}", other)),
        }
    }

    pub fn placement(&self) -> Result<Option<Placement>, String> {
        match &self.placement {
            AutoOr::Keyword(s) if s == "auto" => Ok(None),
            AutoOr::Keyword(s) | AutoOr::Value(s) => match s.as_str() {
                "auto" => Ok(None),
                "p2p_intra" => Ok(Some(Placement::P2PIntra)),
                "collect_intra" => Ok(Some(Placement::CollectIntra)),
                other => Err(format!(
                    "run.placement: expected \"p2p_intra\", \"collect_intra\" or \"auto\", got {:?}",
                    other
                )),
            },
        }
    }

    pub fn attn_parallel(&self) -> Result<Option<usize>, String> {
        self.attn_parallel.resolve("run.attn_parallel")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[cluster]
num_nodes = 2
devices_per_node = 8
intra_bw_gbytes_per_s = 400
inter_bw_gbytes_per_s = 25
intra_lat_us = 1
inter_lat_us = 10
device_tflops = 300
dtype_bytes = 2

[model]
layers = 8
hidden = 512
heads = 8
dtype_bytes = 2

[run]
batch = 1
seq_len = 256
world_size = 16
attn_parallel = 2
placement = "collect_intra"
mask = "causal"
seed = 7
"#;

    #[test]
    fn parses_and_converts_units() {
        let cfg = parse_config(SAMPLE).unwrap();
        let cluster = cfg.cluster.to_cluster_spec();
        assert_eq!(cluster.intra_bw, 4e11);
        assert!((cluster.inter_lat - 1e-5).abs() < 1e-18);
        assert_eq!(cluster.device_flops, 3e14);
        assert_eq!(cfg.run.mask().unwrap(), MaskKind::Causal);
        assert_eq!(cfg.run.attn_parallel().unwrap(), Some(2));
        assert_eq!(cfg.run.placement().unwrap(), Some(Placement::CollectIntra));
    }

    #[test]
    fn auto_keywords_resolve_to_none() {
        let text = SAMPLE
            .replace("attn_parallel = 2", "attn_parallel = \"auto\"")
            .replace("placement = \"collect_intra\"", "placement = \"auto\"");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.run.attn_parallel().unwrap(), None);
        assert_eq!(cfg.run.placement().unwrap(), None);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = SAMPLE.replace("seed = 7", "seed = 7\nbogus_key = 1");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn bad_mask_rejected() {
        let text = SAMPLE.replace("mask = \"causal\"", "mask = \"diagonal\"");
        let cfg = parse_config(&text).unwrap();
        assert!(cfg.run.mask().is_err());
    }

    #[test]
    fn env_overrides_win() {
        // set + unset around the parse; test is process-global, so use a
        // key no other test touches
        std::env::set_var("TEAMRING_RUN_SEED", "99");
        std::env::set_var("TEAMRING_CLUSTER_INTER_BW_GBYTES_PER_S", "2.5");
        let cfg = parse_config(SAMPLE).unwrap();
        std::env::remove_var("TEAMRING_RUN_SEED");
        std::env::remove_var("TEAMRING_CLUSTER_INTER_BW_GBYTES_PER_S");
        assert_eq!(cfg.run.seed, Some(99));
        assert_eq!(cfg.cluster.to_cluster_spec().inter_bw, 2.5e9);
    }
}
