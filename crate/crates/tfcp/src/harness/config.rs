//! Experiment configuration: a strict TOML schema with full-document
//! validation (every problem in the file is reported, not just the first).

use std::collections::BTreeSet;
use std::path::PathBuf;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::gradient_flow::{BandwidthRefresh, GradientFlowConfig};
use crate::neural::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelId {
    Static1d,
    Static2d,
    Benes,
    Lorenz63,
    Lorenz96,
}

impl ModelId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::Static1d => "static_1d",
            ModelId::Static2d => "static_2d",
            ModelId::Benes => "benes",
            ModelId::Lorenz63 => "lorenz63",
            ModelId::Lorenz96 => "lorenz96",
        }
    }
}

#[derive(Clone, Debug)]
pub enum ModelParams {
    Static1d {
        mu0: f64,
        sigma0: f64,
        obs_noise_var: f64,
    },
    Static2d {
        mu0: [f64; 2],
        sigma0: f64,
        obs_noise_var: f64,
    },
    Benes {
        mu: f64,
        sigma_b: f64,
        h1: f64,
        h2: f64,
        x0: f64,
    },
    Lorenz63 {
        sigma: f64,
        rho: f64,
        beta: f64,
        gamma: f64,
        dt: f64,
        obs_noise_var: f64,
    },
    Lorenz96 {
        dim: usize,
        forcing: f64,
        gamma: f64,
        dt: f64,
        obs_noise_var: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingMode {
    Shuffle,
    SecondForecast,
}

#[derive(Clone, Debug)]
pub struct GfMethodParams {
    pub flow: GradientFlowConfig,
    pub coupling: CouplingMode,
}

impl Default for GfMethodParams {
    fn default() -> Self {
        GfMethodParams {
            flow: GradientFlowConfig::default(),
            coupling: CouplingMode::Shuffle,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TfcpMethodParams {
    pub train: TrainConfig,
    pub warm_start: bool,
}

impl Default for TfcpMethodParams {
    fn default() -> Self {
        TfcpMethodParams {
            train: TrainConfig::default(),
            warm_start: false,
        }
    }
}

#[derive(Clone, Debug)]
pub enum MethodSpec {
    TfcpGf(GfMethodParams),
    Tfcp(TfcpMethodParams),
    Enkf { inflation: f64 },
    Sirpf,
    Letkf { inflation: f64 },
}

impl MethodSpec {
    pub fn id(&self) -> &'static str {
        match self {
            MethodSpec::TfcpGf(_) => "tfcp_gf",
            MethodSpec::Tfcp(_) => "tfcp",
            MethodSpec::Enkf { .. } => "enkf",
            MethodSpec::Sirpf => "sirpf",
            MethodSpec::Letkf { .. } => "letkf",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LocalizationSpec {
    pub block_size: usize,
    pub r_loc: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelId,
    pub model_params: ModelParams,
    pub methods: Vec<MethodSpec>,
    pub ensemble_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub obs_intervals: Vec<f64>,
    pub cycles: usize,
    pub spinup_fraction: f64,
    pub localization: Option<LocalizationSpec>,
    pub out_dir: Option<PathBuf>,
    /// Raw config text, hashed into the manifest.
    pub source_text: String,
}

struct Validator {
    errors: Vec<String>,
}

impl Validator {
    fn new() -> Self {
        Validator { errors: Vec::new() }
    }

    fn err(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    fn check_known_keys(&mut self, table: &Table, context: &str, known: &[&str]) {
        let known: BTreeSet<&str> = known.iter().cloned().collect();
        for key in table.keys() {
            if !known.contains(key.as_str()) {
                self.err(format!("{context}: unknown key `{key}`"));
            }
        }
    }

    fn f64_value(&mut self, v: &Value, context: &str) -> Option<f64> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.err(format!("{context}: expected a number"));
                None
            }
        }
    }

    fn f64_field(&mut self, table: &Table, key: &str, context: &str, default: f64) -> f64 {
        match table.get(key) {
            None => default,
            Some(v) => self
                .f64_value(v, &format!("{context}.{key}"))
                .unwrap_or(default),
        }
    }

    fn usize_field(&mut self, table: &Table, key: &str, context: &str, default: usize) -> usize {
        match table.get(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as usize,
            Some(_) => {
                self.err(format!("{context}.{key}: expected a nonnegative integer"));
                default
            }
        }
    }

    fn bool_field(&mut self, table: &Table, key: &str, context: &str, default: bool) -> bool {
        match table.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.err(format!("{context}.{key}: expected a boolean"));
                default
            }
        }
    }

    fn str_field<'t>(&mut self, table: &'t Table, key: &str, context: &str) -> Option<&'t str> {
        match table.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                self.err(format!("{context}.{key}: expected a string"));
                None
            }
        }
    }
}

fn parse_model_params(model: ModelId, table: Option<&Table>, v: &mut Validator) -> ModelParams {
    let empty = Table::new();
    let t = table.unwrap_or(&empty);
    let ctx = "model_params";
    match model {
        ModelId::Static1d => {
            v.check_known_keys(t, ctx, &["mu0", "sigma0", "obs_noise_var"]);
            ModelParams::Static1d {
                mu0: v.f64_field(t, "mu0", ctx, 0.5),
                sigma0: v.f64_field(t, "sigma0", ctx, 1.0),
                obs_noise_var: v.f64_field(t, "obs_noise_var", ctx, 0.25),
            }
        }
        ModelId::Static2d => {
            v.check_known_keys(t, ctx, &["mu0", "sigma0", "obs_noise_var"]);
            let mu0 = match t.get("mu0") {
                None => [0.5, 0.5],
                Some(Value::Array(a)) if a.len() == 2 => {
                    let x = v.f64_value(&a[0], "model_params.mu0[0]").unwrap_or(0.5);
                    let y = v.f64_value(&a[1], "model_params.mu0[1]").unwrap_or(0.5);
                    [x, y]
                }
                Some(_) => {
                    v.err("model_params.mu0: expected an array of two numbers");
                    [0.5, 0.5]
                }
            };
            ModelParams::Static2d {
                mu0,
                sigma0: v.f64_field(t, "sigma0", ctx, 1.0),
                obs_noise_var: v.f64_field(t, "obs_noise_var", ctx, 0.25),
            }
        }
        ModelId::Benes => {
            v.check_known_keys(t, ctx, &["mu", "sigma_b", "h1", "h2", "x0"]);
            ModelParams::Benes {
                mu: v.f64_field(t, "mu", ctx, 0.5),
                sigma_b: v.f64_field(t, "sigma_b", ctx, 0.8),
                h1: v.f64_field(t, "h1", ctx, 0.4),
                h2: v.f64_field(t, "h2", ctx, 0.0),
                x0: v.f64_field(t, "x0", ctx, 0.0),
            }
        }
        ModelId::Lorenz63 => {
            v.check_known_keys(t, ctx, &["sigma", "rho", "beta", "gamma", "dt", "obs_noise_var"]);
            ModelParams::Lorenz63 {
                sigma: v.f64_field(t, "sigma", ctx, 10.0),
                rho: v.f64_field(t, "rho", ctx, 28.0),
                beta: v.f64_field(t, "beta", ctx, 8.0 / 3.0),
                gamma: v.f64_field(t, "gamma", ctx, 4e-4),
                dt: v.f64_field(t, "dt", ctx, 0.01),
                obs_noise_var: v.f64_field(t, "obs_noise_var", ctx, 1.0),
            }
        }
        ModelId::Lorenz96 => {
            v.check_known_keys(t, ctx, &["dim", "forcing", "gamma", "dt", "obs_noise_var"]);
            ModelParams::Lorenz96 {
                dim: v.usize_field(t, "dim", ctx, 40),
                forcing: v.f64_field(t, "forcing", ctx, 8.0),
                gamma: v.f64_field(t, "gamma", ctx, 4e-4),
                dt: v.f64_field(t, "dt", ctx, 0.01),
                obs_noise_var: v.f64_field(t, "obs_noise_var", ctx, 1.0),
            }
        }
    }
}

fn parse_method(
    id: &str,
    params: Option<&Table>,
    v: &mut Validator,
) -> Option<MethodSpec> {
    let empty = Table::new();
    let t = params.unwrap_or(&empty);
    match id {
        "tfcp_gf" => {
            let ctx = "method_params.tfcp_gf";
            v.check_known_keys(
                t,
                ctx,
                &["step_size", "max_iters", "rel_tol", "bandwidth_refresh", "coupling"],
            );
            let mut p = GfMethodParams::default();
            p.flow.step_size = v.f64_field(t, "step_size", ctx, p.flow.step_size);
            p.flow.max_iters = v.usize_field(t, "max_iters", ctx, p.flow.max_iters);
            p.flow.rel_tol = v.f64_field(t, "rel_tol", ctx, p.flow.rel_tol);
            if let Some(s) = v.str_field(t, "bandwidth_refresh", ctx) {
                p.flow.bandwidth_refresh = match s {
                    "once" => BandwidthRefresh::OncePerAnalysis,
                    "every_iter" => BandwidthRefresh::EveryIteration,
                    other => {
                        v.err(format!(
                            "{ctx}.bandwidth_refresh: expected `once` or `every_iter`, got `{other}`"
                        ));
                        BandwidthRefresh::OncePerAnalysis
                    }
                };
            }
            if let Some(s) = v.str_field(t, "coupling", ctx) {
                p.coupling = match s {
                    "shuffle" => CouplingMode::Shuffle,
                    "second_forecast" => CouplingMode::SecondForecast,
                    other => {
                        v.err(format!(
                            "{ctx}.coupling: expected `shuffle` or `second_forecast`, got `{other}`"
                        ));
                        CouplingMode::Shuffle
                    }
                };
            }
            if p.flow.validate().is_err() {
                v.err(format!("{ctx}: invalid gradient-flow parameters"));
            }
            Some(MethodSpec::TfcpGf(p))
        }
        "tfcp" => {
            let ctx = "method_params.tfcp";
            v.check_known_keys(
                t,
                ctx,
                &["learning_rate", "iters", "weight_decay", "hidden_width", "warm_start"],
            );
            let mut p = TfcpMethodParams::default();
            p.train.learning_rate = v.f64_field(t, "learning_rate", ctx, p.train.learning_rate);
            p.train.iters = v.usize_field(t, "iters", ctx, p.train.iters);
            p.train.weight_decay = v.f64_field(t, "weight_decay", ctx, p.train.weight_decay);
            p.train.hidden_width = v.usize_field(t, "hidden_width", ctx, p.train.hidden_width);
            p.warm_start = v.bool_field(t, "warm_start", ctx, false);
            if p.train.validate().is_err() {
                v.err(format!("{ctx}: invalid training parameters"));
            }
            Some(MethodSpec::Tfcp(p))
        }
        "enkf" => {
            let ctx = "method_params.enkf";
            v.check_known_keys(t, ctx, &["inflation"]);
            let inflation = v.f64_field(t, "inflation", ctx, 1.0);
            if inflation < 1.0 {
                v.err(format!("{ctx}.inflation: must be at least 1, got {inflation}"));
            }
            Some(MethodSpec::Enkf { inflation })
        }
        "sirpf" => {
            if let Some(t) = params {
                if !t.is_empty() {
                    v.err("method_params.sirpf: takes no parameters".to_string());
                }
            }
            Some(MethodSpec::Sirpf)
        }
        "letkf" => {
            let ctx = "method_params.letkf";
            v.check_known_keys(t, ctx, &["inflation"]);
            let inflation = v.f64_field(t, "inflation", ctx, 1.05);
            if inflation < 1.0 {
                v.err(format!("{ctx}.inflation: must be at least 1, got {inflation}"));
            }
            Some(MethodSpec::Letkf { inflation })
        }
        other => {
            v.err(format!(
                "methods: unknown method `{other}` (known: tfcp_gf, tfcp, enkf, sirpf, letkf)"
            ));
            None
        }
    }
}

/// Parse and validate a config document, reporting every problem found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: Table = text
        .parse()
        .map_err(|e| Error::InvalidConfig(vec![format!("toml parse error: {e}")]))?;
    let mut v = Validator::new();

    v.check_known_keys(
        &table,
        "top level",
        &[
            "model",
            "methods",
            "ensemble_sizes",
            "seeds",
            "obs_intervals",
            "cycles",
            "spinup_fraction",
            "out_dir",
            "model_params",
            "method_params",
            "localization",
        ],
    );

    let model = match v.str_field(&table, "model", "top level") {
        Some("static_1d") => ModelId::Static1d,
        Some("static_2d") => ModelId::Static2d,
        Some("benes") => ModelId::Benes,
        Some("lorenz63") => ModelId::Lorenz63,
        Some("lorenz96") => ModelId::Lorenz96,
        Some(other) => {
            v.err(format!(
                "model: unknown model `{other}` (known: static_1d, static_2d, benes, lorenz63, lorenz96)"
            ));
            ModelId::Static1d
        }
        None => {
            v.err("model: required key missing");
            ModelId::Static1d
        }
    };

    let model_params_table = match table.get("model_params") {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            v.err("model_params: expected a table");
            None
        }
    };
    let model_params = parse_model_params(model, model_params_table, &mut v);

    let method_params_table = match table.get("method_params") {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            v.err("method_params: expected a table");
            None
        }
    };
    if let Some(mp) = method_params_table {
        for key in mp.keys() {
            if !["tfcp_gf", "tfcp", "enkf", "sirpf", "letkf"].contains(&key.as_str()) {
                v.err(format!("method_params: unknown method `{key}`"));
            }
        }
    }

    let mut methods = Vec::new();
    match table.get("methods") {
        Some(Value::Array(ids)) if !ids.is_empty() => {
            for id in ids {
                match id {
                    Value::String(s) => {
                        let params = method_params_table
                            .and_then(|mp| mp.get(s.as_str()))
                            .and_then(|x| x.as_table());
                        if let Some(spec) = parse_method(s, params, &mut v) {
                            methods.push(spec);
                        }
                    }
                    _ => v.err("methods: entries must be strings".to_string()),
                }
            }
        }
        Some(_) => v.err("methods: expected a nonempty array of method ids"),
        None => v.err("methods: required key missing"),
    }

    let mut ensemble_sizes = Vec::new();
    match table.get("ensemble_sizes") {
        Some(Value::Array(a)) if !a.is_empty() => {
            for x in a {
                match x {
                    Value::Integer(i) if *i >= 2 => ensemble_sizes.push(*i as usize),
                    Value::Integer(i) => v.err(format!("ensemble_sizes: N must be >= 2, got {i}")),
                    _ => v.err("ensemble_sizes: entries must be integers".to_string()),
                }
            }
        }
        Some(_) => v.err("ensemble_sizes: expected a nonempty array"),
        None => v.err("ensemble_sizes: required key missing"),
    }

    let mut seeds = Vec::new();
    match table.get("seeds") {
        Some(Value::Array(a)) if !a.is_empty() => {
            for x in a {
                match x {
                    Value::Integer(i) if *i >= 0 => seeds.push(*i as u64),
                    _ => v.err("seeds: entries must be nonnegative integers".to_string()),
                }
            }
        }
        Some(_) => v.err("seeds: expected a nonempty array"),
        None => v.err("seeds: required key missing"),
    }

    let mut obs_intervals = Vec::new();
    match table.get("obs_intervals") {
        Some(Value::Array(a)) if !a.is_empty() => {
            for x in a {
                if let Some(f) = v.f64_value(x, "obs_intervals") {
                    if f > 0.0 {
                        obs_intervals.push(f);
                    } else {
                        v.err(format!("obs_intervals: must be positive, got {f}"));
                    }
                }
            }
        }
        Some(_) => v.err("obs_intervals: expected a nonempty array"),
        None => {
            // Static problems have no time axis; dynamic models default to
            // one canonical interval.
            obs_intervals.push(match model {
                ModelId::Benes => 0.1,
                _ => 0.5,
            });
        }
    }

    let cycles = v.usize_field(&table, "cycles", "top level", default_cycles(model));
    if cycles == 0 {
        v.err("cycles: must be at least 1");
    }
    let spinup_fraction = v.f64_field(&table, "spinup_fraction", "top level", 0.1);
    if !(0.0..1.0).contains(&spinup_fraction) {
        v.err(format!(
            "spinup_fraction: must be in [0, 1), got {spinup_fraction}"
        ));
    }

    let localization = match table.get("localization") {
        None => None,
        Some(Value::Table(t)) => {
            v.check_known_keys(t, "localization", &["block_size", "r_loc"]);
            let spec = LocalizationSpec {
                block_size: v.usize_field(t, "block_size", "localization", 1),
                r_loc: v.usize_field(t, "r_loc", "localization", 1),
            };
            if spec.block_size == 0 {
                v.err("localization.block_size: must be at least 1");
            }
            if model != ModelId::Lorenz96 {
                v.err("localization: only supported for the lorenz96 model");
            }
            Some(spec)
        }
        Some(_) => {
            v.err("localization: expected a table");
            None
        }
    };

    // Model-specific consistency.
    if let ModelParams::Lorenz63 { dt, .. } | ModelParams::Lorenz96 { dt, .. } = &model_params {
        for interval in &obs_intervals {
            let steps = interval / dt;
            if (steps - steps.round()).abs() > 1e-9 || steps < 0.5 {
                v.err(format!(
                    "obs_intervals: {interval} is not a positive multiple of dt = {dt}"
                ));
            }
        }
    }
    if let ModelParams::Lorenz96 { dim, .. } = &model_params {
        if *dim < 4 {
            v.err(format!("model_params.dim: lorenz96 needs dim >= 4, got {dim}"));
        }
        if let Some(loc) = &localization {
            if loc.block_size > *dim {
                v.err("localization.block_size: larger than the state dimension".to_string());
            }
            if loc.r_loc >= *dim {
                v.err("localization.r_loc: wraps the whole periodic state".to_string());
            }
        }
    }
    if matches!(model, ModelId::Static1d | ModelId::Static2d) && cycles != 1 {
        v.err("cycles: static problems run exactly one analysis; set cycles = 1 or omit it");
    }
    if methods.iter().any(|m| matches!(m, MethodSpec::Sirpf))
        && matches!(model, ModelId::Static2d)
    {
        // fine: sirpf works on any model with a likelihood; nothing to do
    }

    let out_dir = v
        .str_field(&table, "out_dir", "top level")
        .map(PathBuf::from);

    if v.errors.is_empty() {
        Ok(ExperimentConfig {
            model,
            model_params,
            methods,
            ensemble_sizes,
            seeds,
            obs_intervals,
            cycles,
            spinup_fraction,
            localization,
            out_dir,
            source_text: text.to_string(),
        })
    } else {
        Err(Error::InvalidConfig(v.errors))
    }
}

fn default_cycles(model: ModelId) -> usize {
    match model {
        ModelId::Static1d | ModelId::Static2d => 1,
        ModelId::Benes => 30,
        ModelId::Lorenz63 => 40,
        ModelId::Lorenz96 => 60,
    }
}

/// FNV-1a hash of the config text, recorded in the manifest.
pub fn config_hash(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(
            "model = \"lorenz63\"\nmethods = [\"tfcp_gf\"]\nensemble_sizes = [400]\nseeds = [0]\n",
        )
        .unwrap();
        assert_eq!(cfg.model, ModelId::Lorenz63);
        assert_eq!(cfg.cycles, 40);
        assert_eq!(cfg.obs_intervals, vec![0.5]);
        assert!((cfg.spinup_fraction - 0.1).abs() < 1e-12);
        match &cfg.methods[0] {
            MethodSpec::TfcpGf(p) => assert_eq!(p.coupling, CouplingMode::Shuffle),
            other => panic!("unexpected method {other:?}"),
        }
    }

    #[test]
    fn small_ensemble_is_rejected() {
        let err = parse_config(
            "model = \"lorenz63\"\nmethods = [\"enkf\"]\nensemble_sizes = [0]\nseeds = [0]\n",
        )
        .unwrap_err();
        match err {
            Error::InvalidConfig(msgs) => {
                assert!(msgs.iter().any(|m| m.contains("N must be >= 2")), "{msgs:?}")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_all_errors_are_collected() {
        let err = parse_config(
            "model = \"lorenz63\"\nmethods = [\"enkf\", \"nope\"]\nensemble_sizes = [0]\nseeds = [0]\nbogus = 1\n\n[model_params]\nwhat = 2\n",
        )
        .unwrap_err();
        match err {
            Error::InvalidConfig(msgs) => {
                assert!(msgs.iter().any(|m| m.contains("unknown key `bogus`")));
                assert!(msgs.iter().any(|m| m.contains("unknown method `nope`")));
                assert!(msgs.iter().any(|m| m.contains("N must be >= 2")));
                assert!(msgs.iter().any(|m| m.contains("unknown key `what`")));
                assert!(msgs.len() >= 4, "{msgs:?}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn lorenz96_benchmark_grid_parses() {
        let cfg = parse_config(
            r#"
model = "lorenz96"
methods = ["tfcp_gf", "letkf"]
ensemble_sizes = [40, 100]
seeds = [0, 1, 2, 3]
obs_intervals = [0.5]
cycles = 60

[model_params]
dim = 40
forcing = 8.0
obs_noise_var = 1.0

[localization]
block_size = 1
r_loc = 1

[method_params.letkf]
inflation = 1.05
"#,
        )
        .unwrap();
        assert_eq!(cfg.model, ModelId::Lorenz96);
        assert_eq!(cfg.ensemble_sizes, vec![40, 100]);
        let loc = cfg.localization.unwrap();
        assert_eq!((loc.block_size, loc.r_loc), (1, 1));
        match &cfg.model_params {
            ModelParams::Lorenz96 { dim, forcing, .. } => {
                assert_eq!(*dim, 40);
                assert_eq!(*forcing, 8.0);
            }
            other => panic!("unexpected params {other:?}"),
        }
    }

    #[test]
    fn obs_interval_must_align_with_dt() {
        let err = parse_config(
            "model = \"lorenz63\"\nmethods = [\"enkf\"]\nensemble_sizes = [10]\nseeds = [0]\nobs_intervals = [0.123]\n",
        )
        .unwrap_err();
        match err {
            Error::InvalidConfig(msgs) => {
                assert!(msgs.iter().any(|m| m.contains("multiple of dt")), "{msgs:?}")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
