//! Experiment configuration: strict JSON parsing, defaulting and validation.

use serde::{Deserialize, Serialize};

use crate::aggregation::{Variant, Weighting};
use crate::error::{Error, Result};
use crate::lora::Activation;
use crate::similarity::Metric;

/// Which aggregation rule the rounds use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Global tree plus the monotone layer-wise depth search.
    #[default]
    Fedtree,
    /// One cluster at every layer (plain FedAvg of the adapters).
    Fedit,
    /// No aggregation after warmup.
    LocalOnly,
    /// The same cut of the global tree at every layer.
    FixedK(usize),
    /// Per-layer trees with no shared skeleton and no monotonicity.
    IndependentLayerwise,
}

/// Planted-hierarchy regression tasks. Group teachers share their shallow
/// layers and diverge below `shared_depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub clients_per_group: usize,
    pub shared_depth: usize,
    /// Magnitude of the shared low-rank teacher deltas.
    pub delta_scale: f64,
    /// Magnitude of the group-specific deltas below `shared_depth`.
    pub divergence_scale: f64,
    pub noise_std: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub seed: u64,
    #[serde(rename = "N")]
    pub clients: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    /// Widths `d_0 ..= d_L`.
    pub dims: Vec<usize>,
    pub rank: usize,
    pub metric: Metric,
    pub tau: f64,
    #[serde(rename = "K")]
    pub window: usize,
    #[serde(rename = "E_warm")]
    pub warmup_epochs: usize,
    #[serde(rename = "E")]
    pub local_epochs: usize,
    #[serde(rename = "T")]
    pub rounds: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub activation: Activation,
    pub variant: Variant,
    pub mode: Mode,
    pub weighting: Weighting,
    pub data: SyntheticSpec,
}

pub const DEFAULT_CLIENTS: usize = 8;
pub const DEFAULT_LAYERS: usize = 6;
pub const DEFAULT_WIDTH: usize = 16;
pub const DEFAULT_GROUPS: usize = 2;

impl Default for FederationConfig {
    fn default() -> Self {
        RawConfig::default().resolve().expect("defaults are valid")
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    groups: Option<usize>,
    clients_per_group: Option<usize>,
    shared_depth: Option<usize>,
    delta_scale: Option<f64>,
    divergence_scale: Option<f64>,
    noise_std: Option<f64>,
    train_samples: Option<usize>,
    test_samples: Option<usize>,
    input_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    #[serde(rename = "N")]
    clients: Option<usize>,
    #[serde(rename = "L")]
    layers: Option<usize>,
    dims: Option<Vec<usize>>,
    rank: Option<usize>,
    metric: Option<Metric>,
    tau: Option<f64>,
    #[serde(rename = "K")]
    window: Option<usize>,
    #[serde(rename = "E_warm")]
    warmup_epochs: Option<usize>,
    #[serde(rename = "E")]
    local_epochs: Option<usize>,
    #[serde(rename = "T")]
    rounds: Option<usize>,
    eta: Option<f64>,
    batch_size: Option<usize>,
    activation: Option<Activation>,
    variant: Option<Variant>,
    mode: Option<Mode>,
    weighting: Option<Weighting>,
    data: Option<RawSynthetic>,
}

impl RawConfig {
    fn resolve(self) -> Result<FederationConfig> {
        let clients = self.clients.unwrap_or(DEFAULT_CLIENTS);
        let layers = self.layers.unwrap_or(DEFAULT_LAYERS);
        let dims = self.dims.unwrap_or_else(|| vec![DEFAULT_WIDTH; layers + 1]);
        let raw = self.data.unwrap_or_default();
        let groups = raw.groups.unwrap_or(DEFAULT_GROUPS);
        let data = SyntheticSpec {
            groups,
            clients_per_group: raw
                .clients_per_group
                .unwrap_or(clients.checked_div(groups).unwrap_or(0)),
            shared_depth: raw.shared_depth.unwrap_or(layers / 2),
            delta_scale: raw.delta_scale.unwrap_or(1.0),
            divergence_scale: raw.divergence_scale.unwrap_or(4.0),
            noise_std: raw.noise_std.unwrap_or(0.5),
            train_samples: raw.train_samples.unwrap_or(256),
            test_samples: raw.test_samples.unwrap_or(128),
            input_dim: raw.input_dim.unwrap_or(dims.first().copied().unwrap_or(DEFAULT_WIDTH)),
        };
        let cfg = FederationConfig {
            seed: self.seed.unwrap_or(0),
            clients,
            layers,
            dims,
            rank: self.rank.unwrap_or(2),
            metric: self.metric.unwrap_or_default(),
            tau: self.tau.unwrap_or(0.03),
            window: self.window.unwrap_or(4),
            warmup_epochs: self.warmup_epochs.unwrap_or(5),
            local_epochs: self.local_epochs.unwrap_or(2),
            rounds: self.rounds.unwrap_or(30),
            eta: self.eta.unwrap_or(0.01),
            batch_size: self.batch_size.unwrap_or(32),
            activation: self.activation.unwrap_or_default(),
            variant: self.variant.unwrap_or_default(),
            mode: self.mode.unwrap_or_default(),
            weighting: self.weighting.unwrap_or_default(),
            data,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Why a config failed to load.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    /// Malformed JSON, a wrong type or an unknown key.
    #[error("malformed config: {0}")]
    Syntax(#[from] serde_json::Error),
    /// Well-formed but violating an invariant.
    #[error(transparent)]
    Invalid(#[from] Error),
}

impl FederationConfig {
    /// Strict parse: unknown keys are rejected, omitted keys take defaults.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(text)?;
        Ok(raw.resolve()?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.clients < 2 {
            return fail("N", format!("need at least 2 clients, got {}", self.clients));
        }
        if self.layers < 1 {
            return fail("L", "need at least 1 layer".into());
        }
        if self.dims.len() != self.layers + 1 {
            return fail(
                "dims",
                format!("expected L+1 = {} widths, got {}", self.layers + 1, self.dims.len()),
            );
        }
        if self.dims.contains(&0) {
            return fail("dims", "widths must be positive".into());
        }
        if self.rank < 1 {
            return fail("rank", "rank must be positive".into());
        }
        let narrowest = self.dims.windows(2).map(|w| w[0].min(w[1])).min().unwrap_or(0);
        if self.rank > narrowest {
            return fail(
                "rank",
                format!("rank {} exceeds the narrowest layer ({narrowest})", self.rank),
            );
        }
        if !self.tau.is_finite() {
            return fail("tau", "must be finite".into());
        }
        if self.window < 1 {
            return fail("K", "search window must be >= 1".into());
        }
        if self.local_epochs < 1 {
            return fail("E", "need at least 1 local epoch".into());
        }
        if self.rounds < 1 {
            return fail("T", "need at least 1 round".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail("eta", format!("step size must be > 0, got {}", self.eta));
        }
        if self.batch_size < 1 {
            return fail("batch_size", "must be positive".into());
        }
        if let Mode::FixedK(k) = self.mode {
            if k < 1 || k > self.clients {
                return fail("mode", format!("fixed_k({k}) outside [1, N={}]", self.clients));
            }
        }
        let d = &self.data;
        if d.groups < 1 {
            return fail("data.groups", "need at least 1 group".into());
        }
        if d.groups * d.clients_per_group != self.clients {
            return fail(
                "data.clients_per_group",
                format!(
                    "{} groups x {} clients != N = {}",
                    d.groups, d.clients_per_group, self.clients
                ),
            );
        }
        if d.shared_depth > self.layers {
            return fail(
                "data.shared_depth",
                format!("{} exceeds L = {}", d.shared_depth, self.layers),
            );
        }
        for (key, v) in [
            ("data.delta_scale", d.delta_scale),
            ("data.divergence_scale", d.divergence_scale),
            ("data.noise_std", d.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(key, format!("must be finite and >= 0, got {v}"));
            }
        }
        if d.train_samples < 1 {
            return fail("data.train_samples", "need at least one training sample".into());
        }
        if d.test_samples < 1 {
            return fail("data.test_samples", "need at least one test sample".into());
        }
        if d.input_dim != self.dims[0] {
            return fail(
                "data.input_dim",
                format!("{} differs from dims[0] = {}", d.input_dim, self.dims[0]),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = FederationConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, FederationConfig::default());
        assert_eq!((cfg.clients, cfg.layers, cfg.rank, cfg.window), (8, 6, 2, 4));
        assert_eq!(cfg.tau, 0.03);
        assert_eq!(cfg.dims, vec![16; 7]);
        assert_eq!(
            (cfg.rounds, cfg.local_epochs, cfg.warmup_epochs, cfg.batch_size),
            (30, 2, 5, 32)
        );
        assert_eq!(cfg.eta, 0.01);
        assert_eq!(
            (cfg.data.groups, cfg.data.clients_per_group, cfg.data.shared_depth),
            (2, 4, 3)
        );
        assert_eq!((cfg.data.train_samples, cfg.data.test_samples), (256, 128));
        assert_eq!(cfg.mode, Mode::Fedtree);
        assert_eq!(cfg.metric, Metric::Frobenius);
        assert_eq!(cfg.activation, Activation::Tanh);
    }

    #[test]
    fn overrides_touch_only_their_keys() {
        let cfg = FederationConfig::from_json_str(r#"{"tau": 0.05, "K": 3}"#).unwrap();
        let expected = FederationConfig {
            tau: 0.05,
            window: 3,
            ..FederationConfig::default()
        };
        assert_eq!(cfg, expected);
    }

    #[test]
    fn modes_parse() {
        let cfg = FederationConfig::from_json_str(r#"{"mode": {"fixed_k": 3}}"#).unwrap();
        assert_eq!(cfg.mode, Mode::FixedK(3));
        let cfg = FederationConfig::from_json_str(r#"{"mode": "independent_layerwise"}"#).unwrap();
        assert_eq!(cfg.mode, Mode::IndependentLayerwise);
    }

    #[test]
    fn invariant_violations_name_the_key() {
        match FederationConfig::from_json_str(r#"{"N": 1}"#) {
            Err(ConfigError::Invalid(Error::Config { key, .. })) => assert_eq!(key, "N"),
            other => panic!("unexpected {other:?}"),
        }
        match FederationConfig::from_json_str(r#"{"mode": {"fixed_k": 9}}"#) {
            Err(ConfigError::Invalid(Error::Config { key, .. })) => assert_eq!(key, "mode"),
            other => panic!("unexpected {other:?}"),
        }
        match FederationConfig::from_json_str(r#"{"N": 6}"#) {
            Ok(cfg) => assert_eq!(cfg.data.clients_per_group, 3),
            other => panic!("unexpected {other:?}"),
        }
        match FederationConfig::from_json_str(r#"{"N": 7}"#) {
            Err(ConfigError::Invalid(Error::Config { key, .. })) => assert_eq!(key, "data.clients_per_group"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_and_malformed_input_is_a_syntax_error() {
        let err = FederationConfig::from_json_str(r#"{"taux": 1}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Syntax(_)));
        assert!(err.to_string().contains("taux"));
        let err = FederationConfig::from_json_str(r#"{"data": {"noise": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("noise"));
        assert!(matches!(
            FederationConfig::from_json_str("{"),
            Err(ConfigError::Syntax(_))
        ));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = FederationConfig::from_json_str(r#"{"N": 6, "L": 3, "mode": "fedit", "seed": 99}"#).unwrap();
        let again = FederationConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, again);
    }
}
