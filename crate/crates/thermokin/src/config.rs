//! TOML run configuration: schema, validation with per-field reporting,
//! and resolved-default materialization.

use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelShape};
use crate::util::Vec3;
use serde::{Deserialize, Serialize};

/// Scattering kernel selection: a named built-in or a tabulated density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSpec {
    /// `kernel = "uniform"`.
    Name(String),
    /// `kernel = { type = "table", nodes = [...], values = [...] }`.
    Table {
        #[serde(rename = "type")]
        kind: String,
        nodes: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Name("uniform".into())
    }
}

impl KernelSpec {
    /// Build the kernel for dimension `d`.
    pub fn build(&self, d: usize) -> Result<Kernel> {
        match self {
            KernelSpec::Name(name) if name == "uniform" => Kernel::uniform(d),
            KernelSpec::Name(name) => Err(Error::Config(format!(
                "kernel: unknown name {name:?}; expected \"uniform\" or a table"
            ))),
            KernelSpec::Table { kind, nodes, values } => {
                if kind != "table" {
                    return Err(Error::Config(format!(
                        "kernel.type: expected \"table\", got {kind:?}"
                    )));
                }
                Kernel::new(
                    d,
                    KernelShape::Table {
                        nodes: nodes.clone(),
                        values: values.clone(),
                    },
                )
            }
        }
    }
}

/// Initial-condition family for the velocity ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitSpec {
    /// Centered Gaussian velocities rescaled to the exact reference energy.
    #[default]
    Maxwellian,
    /// Uniform directions at the exact common speed.
    SpeedShell,
}

fn default_seeds() -> usize {
    20
}

fn default_threads() -> usize {
    1
}

/// Full experiment configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Spatial/velocity dimension (1, 2, or 3).
    pub d: usize,
    /// Single ensemble size; alternative to `n_sweep`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Ensemble-size sweep; alternative to `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sweep: Option<Vec<usize>>,
    #[serde(default)]
    pub kernel: KernelSpec,
    /// Field vector, `d` components.
    pub e: Vec<f64>,
    /// Reference mean energy.
    pub u_tilde: f64,
    #[serde(default)]
    pub init: InitSpec,
    /// Path horizon.
    pub horizon: f64,
    /// Observable sample spacing.
    pub sample_dt: f64,
    /// Independent replicas per parameter point.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Master seed from which every stream is derived.
    #[serde(default)]
    pub master_seed: u64,
    /// Optional flow substep override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_dt: Option<f64>,
    /// Worker threads for independent replicas (serial when 1).
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// Velocity cells for the grid solver (even; default 1024).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_cells: Option<usize>,
    /// Velocity cutoff for the grid solver (default 6 sqrt(u~)).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    /// Output directory (default "out"; a CLI `--out` overrides it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Emit full grid-density snapshots from the grid solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<bool>,
}

/// Cap on `N * d` for any single run, keeping ensemble state plus stage
/// buffers within a few gigabytes.
pub const MAX_PARTICLE_DIM: usize = 30_000_000;

impl RunConfig {
    /// Semantic checks beyond the schema; every violation is reported with
    /// its field path.
    pub fn check(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(1..=3).contains(&self.d) {
            errs.push(format!("d: must be 1, 2, or 3, got {}", self.d));
        }
        match (&self.n, &self.n_sweep) {
            (None, None) => errs.push("n: either n or n_sweep is required".into()),
            (Some(n), _) if *n == 0 => errs.push("n: must be >= 1".into()),
            (_, Some(list)) if list.iter().any(|&n| n == 0) => {
                errs.push("n_sweep: every size must be >= 1".into())
            }
            (_, Some(list)) if list.len() < 2 => {
                errs.push("n_sweep: a sweep needs at least two sizes".into())
            }
            _ => {}
        }
        if self.e.len() != self.d.min(3) {
            errs.push(format!(
                "e: expected {} components for d = {}, got {}",
                self.d,
                self.d,
                self.e.len()
            ));
        }
        if self.e.iter().any(|v| !v.is_finite()) {
            errs.push("e: components must be finite".into());
        }
        if !(self.u_tilde > 0.0) || !self.u_tilde.is_finite() {
            errs.push(format!("u_tilde: must be positive, got {}", self.u_tilde));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            errs.push(format!("horizon: must be positive, got {}", self.horizon));
        }
        if !(self.sample_dt > 0.0) || !self.sample_dt.is_finite() {
            errs.push(format!("sample_dt: must be positive, got {}", self.sample_dt));
        }
        if self.seeds == 0 {
            errs.push("seeds: must be >= 1".into());
        }
        if self.threads == 0 {
            errs.push("threads: must be >= 1".into());
        }
        if let Some(dt) = self.flow_dt {
            if !(dt > 0.0) || !dt.is_finite() {
                errs.push(format!("flow_dt: must be positive, got {dt}"));
            }
        }
        if let Some(m) = self.grid_cells {
            if m < 4 || m % 2 != 0 {
                errs.push(format!("grid_cells: must be even and >= 4, got {m}"));
            }
        }
        if let Some(v) = self.v_max {
            if !(v > 0.0) || !v.is_finite() {
                errs.push(format!("v_max: must be positive, got {v}"));
            }
        }
        if let Some(&max_n) = self.sizes().iter().max() {
            let load = max_n.saturating_mul(self.d.clamp(1, 3));
            if load > MAX_PARTICLE_DIM {
                let gb = (max_n as f64 * 240.0) / 1e9;
                errs.push(format!(
                    "n: N*d = {load} exceeds the resource cap {MAX_PARTICLE_DIM} (~{gb:.1} GB of ensemble state)"
                ));
            }
        }
        if self.d >= 1 && (1..=3).contains(&self.d) && self.e.len() == self.d {
            if let Err(e) = self.kernel.build(self.d) {
                errs.push(format!("kernel: {e}"));
            }
        }
        errs
    }

    /// Materialize defaults so the serialized form shows every effective
    /// value.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        if cfg.grid_cells.is_none() {
            cfg.grid_cells = Some(1024);
        }
        if cfg.v_max.is_none() {
            cfg.v_max = Some(6.0 * cfg.u_tilde.sqrt());
        }
        if cfg.out.is_none() {
            cfg.out = Some("out".into());
        }
        if cfg.snapshots.is_none() {
            cfg.snapshots = Some(false);
        }
        cfg
    }

    /// Field vector padded to three components.
    pub fn e_vec(&self) -> Vec3 {
        let mut e = [0.0; 3];
        for (c, &v) in self.e.iter().take(3).enumerate() {
            e[c] = v;
        }
        e
    }

    /// All ensemble sizes this config asks for.
    pub fn sizes(&self) -> Vec<usize> {
        match (&self.n, &self.n_sweep) {
            (_, Some(list)) => list.clone(),
            (Some(n), None) => vec![*n],
            (None, None) => Vec::new(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Parse and validate a TOML configuration; on failure return every
/// violation (parse errors carry the reporter's line/field context).
pub fn validate_config(text: &str) -> std::result::Result<RunConfig, Vec<String>> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| vec![e.to_string()])?;
    let errs = cfg.check();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        d = 2
        n = 100
        e = [0.5, 0.0]
        u_tilde = 1.0
        horizon = 2.0
        sample_dt = 0.1
    "#;

    #[test]
    fn minimal_config_resolves_all_defaults() {
        let cfg = validate_config(MINIMAL).unwrap();
        assert_eq!(cfg.kernel, KernelSpec::Name("uniform".into()));
        assert_eq!(cfg.init, InitSpec::Maxwellian);
        assert_eq!(cfg.seeds, 20);
        assert_eq!(cfg.threads, 1);
        let resolved = cfg.resolved();
        assert_eq!(resolved.grid_cells, Some(1024));
        assert_eq!(resolved.v_max, Some(6.0));
        let text = resolved.to_toml().unwrap();
        assert!(text.contains("grid_cells"));
        assert!(text.contains("v_max"));
    }

    #[test]
    fn round_trip_is_semantically_identical() {
        let cfg = validate_config(MINIMAL).unwrap().resolved();
        let text = cfg.to_toml().unwrap();
        let back = validate_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn zero_n_is_rejected_with_a_field_path() {
        let bad = MINIMAL.replace("n = 100", "n = 0");
        let errs = validate_config(&bad).unwrap_err();
        assert!(errs.iter().any(|e| e.starts_with("n:")), "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\nbogus_key = 1\n");
        assert!(validate_config(&bad).is_err());
    }

    #[test]
    fn oversized_ensembles_hit_the_resource_guard() {
        let bad = MINIMAL.replace("n = 100", "n = 20_000_000");
        let errs = validate_config(&bad).unwrap_err();
        assert!(
            errs.iter().any(|e| e.contains("resource cap")),
            "{errs:?}"
        );
        // Just inside the cap (with d = 2) is accepted.
        let ok = MINIMAL.replace("n = 100", "n = 15_000_000");
        assert!(validate_config(&ok).is_ok());
    }

    #[test]
    fn negative_table_values_name_the_offending_node() {
        let bad = format!(
            "{MINIMAL}\n[kernel]\ntype = \"table\"\nnodes = [-1.0, 0.0, 1.0]\nvalues = [1.0, -2.0, 1.0]\n"
        );
        let errs = validate_config(&bad).unwrap_err();
        assert!(
            errs.iter().any(|e| e.contains("kernel") && e.contains('1')),
            "{errs:?}"
        );
    }

    #[test]
    fn multiple_violations_are_all_reported() {
        let bad = r#"
            d = 7
            n = 0
            e = [0.5]
            u_tilde = -1.0
            horizon = 0.0
            sample_dt = 0.1
        "#;
        let errs = validate_config(bad).unwrap_err();
        assert!(errs.len() >= 4, "{errs:?}");
        for field in ["d:", "n:", "u_tilde:", "horizon:"] {
            assert!(errs.iter().any(|e| e.starts_with(field)), "missing {field}: {errs:?}");
        }
    }

    #[test]
    fn sweep_and_single_sizes() {
        let cfg = validate_config(MINIMAL).unwrap();
        assert_eq!(cfg.sizes(), vec![100]);
        let sweep = MINIMAL.replace("n = 100", "n_sweep = [100, 1000]");
        let cfg2 = validate_config(&sweep).unwrap();
        assert_eq!(cfg2.sizes(), vec![100, 1000]);
        let short = MINIMAL.replace("n = 100", "n_sweep = [100]");
        assert!(validate_config(&short).is_err());
    }

    #[test]
    fn malformed_toml_never_panics() {
        for junk in ["{{{", "d = ", "n = \"x\"\n", "[kernel]]", "\u{0}\u{1}", "e = [1,"] {
            let _ = validate_config(junk);
        }
    }
}
