//! Scenario configuration files: versioned TOML, strict about unknown keys,
//! with every field optional and defaulting to the standard experiment
//! parameters.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use fedfund_core::money::Money;
use fedfund_core::scenario::Scenario;
use fedfund_core::settlement::{Allocation, CmRule, PaymentPolicy};
use fedfund_core::types::ParticipantId;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema_version: Option<u32>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub market: MarketSection,
    #[serde(default)]
    pub interests: Option<InterestsSection>,
    #[serde(default)]
    pub values: ValuesSection,
    #[serde(default)]
    pub dishonesty: DishonestySection,
    #[serde(default)]
    pub payment: PaymentSection,
    #[serde(default)]
    pub accuracy: AccuracySection,
    #[serde(default)]
    pub contract: ContractSection,
    /// Standing per-agent strategies: `"truthful"` or an inline
    /// `{ prob = 0.5, noise_halfwidth = 0.5 }` dishonesty table, keyed by
    /// participant id.
    #[serde(default)]
    pub strategies: BTreeMap<String, StrategySpec>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum StrategySpec {
    Named(String),
    Dishonest { prob: f64, noise_halfwidth: f64 },
}

impl StrategySpec {
    fn to_strategy(&self) -> Result<fedfund_core::agents::Strategy> {
        use fedfund_core::agents::Strategy;
        match self {
            StrategySpec::Named(name) if name == "truthful" => Ok(Strategy::Truthful),
            StrategySpec::Named(name) => {
                bail!("unknown strategy {name:?} (truthful or a dishonesty table)")
            }
            StrategySpec::Dishonest {
                prob,
                noise_halfwidth,
            } => Ok(Strategy::Dishonest {
                prob: *prob,
                noise_halfwidth: *noise_halfwidth,
            }),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub owners: Option<u32>,
    pub stations: Option<u32>,
    pub rounds: Option<u32>,
    pub models_per_round: Option<u32>,
    pub label_universe: Option<u32>,
    pub labels_per_proposal: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterestsSection {
    pub core: u32,
    pub extras_pool: Option<u32>,
    pub max_expansion: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValuesSection {
    pub owner_label_mean: Option<i64>,
    pub station_label_mean: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DishonestySection {
    pub prob: Option<f64>,
    pub noise_halfwidth: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaymentSection {
    /// equal | capability | contribution
    pub policy: Option<String>,
    /// midpoint | uniform
    pub cm_rule: Option<String>,
    /// Required when policy = "capability": weight per participant id.
    pub capability_weights: Option<BTreeMap<String, u64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracySection {
    pub acc_max: Option<f64>,
    pub kappa: Option<u64>,
    pub total_budget: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSection {
    pub initial_balance: Option<i64>,
    pub deposit_multiple: Option<i64>,
    pub deposit_floor_multiple: Option<i64>,
    pub forfeit_numerator: Option<i64>,
    pub forfeit_denominator: Option<i64>,
    pub punish_epsilon: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        match config.schema_version {
            Some(SCHEMA_VERSION) => Ok(config),
            Some(v) => bail!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"),
            None => bail!("config is missing the schema_version header"),
        }
    }

    /// Overlays the file on top of a base scenario (the experiment's
    /// defaults), validating the result.
    pub fn apply(self, mut scenario: Scenario) -> Result<Scenario> {
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        let m = self.market;
        set(&mut scenario.num_owners, m.owners);
        set(&mut scenario.num_stations, m.stations);
        set(&mut scenario.num_rounds, m.rounds);
        set(&mut scenario.models_per_round, m.models_per_round);
        set(&mut scenario.label_universe, m.label_universe);
        set(&mut scenario.labels_per_proposal, m.labels_per_proposal);

        if let Some(interests) = self.interests {
            scenario.core_size = interests.core;
            set(&mut scenario.extras_pool, interests.extras_pool);
            set(&mut scenario.max_expansion, interests.max_expansion);
        }

        if let Some(mean) = self.values.owner_label_mean {
            scenario.owner_label_mean = Money::gwei(mean);
        }
        if let Some(mean) = self.values.station_label_mean {
            scenario.station_label_mean = Money::gwei(mean);
        }

        set(&mut scenario.dishonest_prob, self.dishonesty.prob);
        set(
            &mut scenario.dishonest_halfwidth,
            self.dishonesty.noise_halfwidth,
        );

        scenario.payment = payment_policy(&self.payment, scenario.seed)?;

        set(&mut scenario.accuracy.acc_max, self.accuracy.acc_max);
        set(&mut scenario.accuracy.kappa, self.accuracy.kappa);
        set(
            &mut scenario.accuracy.total_budget,
            self.accuracy.total_budget,
        );

        let c = self.contract;
        if let Some(balance) = c.initial_balance {
            scenario.initial_balance = Money::gwei(balance);
        }
        set(&mut scenario.deposit_multiple, c.deposit_multiple);
        set(
            &mut scenario.ledger_params.deposit_floor_multiple,
            c.deposit_floor_multiple,
        );
        set(
            &mut scenario.ledger_params.forfeit_numerator,
            c.forfeit_numerator,
        );
        set(
            &mut scenario.ledger_params.forfeit_denominator,
            c.forfeit_denominator,
        );
        set(&mut scenario.punish_epsilon, c.punish_epsilon);

        for (key, spec) in &self.strategies {
            let id: ParticipantId = key
                .parse()
                .map_err(|e: String| anyhow::anyhow!("strategies: {e}"))?;
            scenario.strategies.insert(id, spec.to_strategy()?);
        }

        scenario.validate()?;
        Ok(scenario)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn payment_policy(section: &PaymentSection, seed: u64) -> Result<PaymentPolicy> {
    let allocation = match section.policy.as_deref() {
        None | Some("equal") => Allocation::Equal,
        Some("contribution") => Allocation::ByContribution,
        Some("capability") => {
            let raw = section
                .capability_weights
                .as_ref()
                .context("payment.policy = \"capability\" requires payment.capability_weights")?;
            let mut weights = BTreeMap::new();
            for (key, &weight) in raw {
                let id: ParticipantId = key
                    .parse()
                    .map_err(|e: String| anyhow::anyhow!("capability_weights: {e}"))?;
                weights.insert(id, weight);
            }
            Allocation::ByCapability(weights)
        }
        Some(other) => bail!("unknown payment.policy {other:?} (equal|capability|contribution)"),
    };
    let cm_rule = match section.cm_rule.as_deref() {
        None | Some("midpoint") => CmRule::Midpoint,
        Some("uniform") => CmRule::SeededUniform { seed },
        Some(other) => bail!("unknown payment.cm_rule {other:?} (midpoint|uniform)"),
    };
    Ok(PaymentPolicy {
        allocation,
        cm_rule,
    })
}

/// Resolves the effective scenario for a run: experiment defaults, then the
/// optional config file, then the command-line seed override.
pub fn resolve_scenario(
    base: Scenario,
    config_path: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<Scenario> {
    let mut scenario = match config_path {
        Some(path) => FileConfig::load(path)?.apply(base)?,
        None => base,
    };
    if let Some(seed) = seed_override {
        scenario.seed = seed;
        // A uniform pool rule keyed off the config seed follows the
        // override too.
        if let CmRule::SeededUniform { .. } = scenario.payment.cm_rule {
            scenario.payment.cm_rule = CmRule::SeededUniform { seed };
        }
    }
    scenario.validate()?;
    Ok(scenario)
}
