//! Command implementations: one-shot auctions from a bid file, the three
//! experiment runners with CSV and event-log output, the verification
//! suite, and event-log replay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fedfund_core::ledger::{EventLog, Ledger};
use fedfund_core::mechanism::{self, AuctionOutcome};
use fedfund_core::money::{Money, ZERO};
use fedfund_core::oracle;
use fedfund_core::scenario::Scenario;
use fedfund_core::settlement::{self, PaymentPolicy, SettlementResult};
use fedfund_core::sim::{self, SelectionStrategy};
use fedfund_core::types::{ModelId, ModelProposal, ParticipantId, Profile, Role};

// --- one-shot auction ---

/// Input for `fedfund auction`: the proposals, the full claim matrix, and an
/// optional payment policy (midpoint pool and equal split by default).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BidFile {
    pub models: Vec<ModelProposal>,
    pub bids: BTreeMap<ParticipantId, BTreeMap<ModelId, Money>>,
    #[serde(default)]
    pub policy: Option<PaymentPolicy>,
    /// Round index used by seeded pool rules.
    #[serde(default)]
    pub round: u32,
}

#[derive(Debug, Serialize)]
pub struct AuctionReply {
    pub outcome: AuctionOutcome,
    pub settlement: SettlementResult,
}

/// Runs a single auction plus settlement from a bid file and returns the
/// JSON-serializable reply.
pub fn run_auction_file(path: &Path) -> Result<AuctionReply> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading bid file {}", path.display()))?;
    let file: BidFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing bid file {}", path.display()))?;

    let mut bids = Profile::new();
    for (participant, row) in &file.bids {
        bids.add_participant(*participant);
        for (&model, &amount) in row {
            bids.set(*participant, model, amount)?;
        }
    }
    let policy = file.policy.unwrap_or_default();
    let schedule = settlement::payment_schedule(&bids, &file.models, &policy, file.round)?;
    let outcome = mechanism::run_auction(&bids, &file.models, &schedule)?;
    let settlement = settlement::settle_round(&outcome, &bids, &policy, None, ZERO, ZERO)?;
    if !settlement::verify_budget_balance(&settlement) {
        bail!("settlement failed the budget-balance check");
    }
    Ok(AuctionReply {
        outcome,
        settlement,
    })
}

// --- experiments ---

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Experiment {
    Utility,
    Social,
    Accuracy,
}

impl Experiment {
    pub fn parse(name: &str) -> Result<Experiment> {
        match name {
            "utility" => Ok(Experiment::Utility),
            "social" => Ok(Experiment::Social),
            "accuracy" => Ok(Experiment::Accuracy),
            other => bail!("unknown experiment {other:?} (utility|social|accuracy)"),
        }
    }

    /// The parameter set the experiment starts from before any config file
    /// is applied.
    pub fn default_scenario(self) -> Scenario {
        match self {
            Experiment::Utility => Scenario::default(),
            Experiment::Social => Scenario::social_defaults(),
            Experiment::Accuracy => Scenario::accuracy_defaults(),
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Runs one experiment, writing its CSV and the event logs of every
/// contract it drove. Returns the written paths.
pub fn run_experiment(
    experiment: Experiment,
    scenario: &Scenario,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match experiment {
        Experiment::Utility => {
            let tracked = ParticipantId::owner(0);
            let result = sim::run_experiment_utility(scenario, tracked)?;
            let mut csv = String::from("round,strategy,utility,accumulated\n");
            for row in &result.rows {
                writeln!(
                    csv,
                    "{},{},{},{}",
                    row.round, row.strategy, row.utility, row.accumulated
                )
                .unwrap();
            }
            written.push(write_file(out, "utility.csv", &csv)?);
            written.push(write_file(
                out,
                "utility_truthful.log",
                &result.truthful.ledger.log().encode(),
            )?);
            written.push(write_file(
                out,
                "utility_dishonest.log",
                &result.dishonest.ledger.log().encode(),
            )?);
        }
        Experiment::Social => {
            let result = sim::run_experiment_social(scenario, &SelectionStrategy::ALL)?;
            let mut csv = String::from("round,strategy,social_utility,accumulated\n");
            for row in &result.rows {
                writeln!(
                    csv,
                    "{},{},{},{}",
                    row.round, row.strategy, row.social_utility, row.accumulated
                )
                .unwrap();
            }
            written.push(write_file(out, "social.csv", &csv)?);
            written.push(write_file(
                out,
                "social_vcg.log",
                &result.vcg_ledger.log().encode(),
            )?);
        }
        Experiment::Accuracy => {
            let result = sim::run_experiment_accuracy(scenario)?;
            let mut csv = String::from("round,strategy,intersection_accuracy\n");
            for row in &result.rows {
                writeln!(
                    csv,
                    "{},{},{}",
                    row.round, row.strategy, row.intersection_accuracy
                )
                .unwrap();
            }
            written.push(write_file(out, "accuracy.csv", &csv)?);
            written.push(write_file(
                out,
                "accuracy_vcg.log",
                &result.vcg_ledger.log().encode(),
            )?);
        }
    }
    Ok(written)
}

// --- verify ---

pub struct VerifyOptions {
    pub instances: u64,
    pub grid_step: i64,
    pub sweep_seeds: u64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            instances: 1_000,
            grid_step: 1,
            sweep_seeds: 20,
            seed: 424_242,
        }
    }
}

/// Runs the verification suite: the randomized truthfulness matrix, a
/// budget-balance sweep over simulated rounds, and replay determinism.
/// Returns the failure count; prints one line per check and writes the
/// per-instance machine-readable report into `out`.
pub fn run_verify(options: &VerifyOptions, scenario: &Scenario, out: &Path) -> Result<u64> {
    let mut failures = 0u64;

    if options.instances == 0 {
        println!("truthfulness: skipped (no instances requested)");
    } else {
        let report = oracle::run_matrix(options.instances, options.seed, options.grid_step);

        // One JSON line per instance; (seed, id) regenerate it exactly.
        let mut lines = String::new();
        for summary in &report.instance_summaries {
            writeln!(lines, "{}", serde_json::to_string(summary)?).unwrap();
        }
        let path = write_file(out, "verify_report.jsonl", &lines)?;
        println!("instance report: {}", path.display());
        let ok = report.passed();
        println!(
            "truthfulness: {} ({} instances, {} participants, {} deviations, {} violations)",
            if ok { "ok" } else { "FAILED" },
            report.instances,
            report.participants_checked,
            report.deviations_evaluated,
            report.violations.len(),
        );
        for violation in report.violations.iter().take(5) {
            println!("  violation: {violation}");
        }
        for disagreement in report.disagreements.iter().take(5) {
            println!("  disagreement: {disagreement}");
        }
        if !ok {
            failures += 1;
        }

        let covered = report.covers_all_cases();
        println!(
            "case coverage: {} (counts {:?}, {} inequality failures)",
            if covered && report.case_inequality_failures == 0 {
                "ok"
            } else {
                "FAILED"
            },
            report.case_counts,
            report.case_inequality_failures,
        );
        if !covered || report.case_inequality_failures > 0 {
            failures += 1;
        }
    }

    // Budget balance and conservation across simulated rounds.
    let mut settled = 0u64;
    let mut balance_failures = 0u64;
    for s in 0..options.sweep_seeds {
        let seeded = Scenario {
            seed: scenario.seed.wrapping_add(s),
            num_rounds: scenario.num_rounds.min(20),
            ..scenario.clone()
        };
        let result = sim::run_simulation(&seeded, &BTreeMap::new())?;
        for record in &result.rounds {
            settled += 1;
            if !settlement::verify_budget_balance(&record.settlement) {
                balance_failures += 1;
            }
        }
        if !result.ledger.holdings_conserved() {
            balance_failures += 1;
        }

        // Replay determinism of the same run.
        let replayed = Ledger::replay(sim::ledger_config(&seeded), result.ledger.log())?;
        if replayed.state_digest() != result.ledger.state_digest() {
            println!("replay: FAILED (digest mismatch at seed {})", seeded.seed);
            failures += 1;
        }
    }
    println!(
        "budget balance: {} ({} settled rounds, {} violations)",
        if balance_failures == 0 {
            "ok"
        } else {
            "FAILED"
        },
        settled,
        balance_failures,
    );
    if balance_failures > 0 {
        failures += 1;
    }
    println!(
        "replay determinism: {} ({} runs replayed)",
        if failures == 0 { "ok" } else { "see above" },
        options.sweep_seeds,
    );

    Ok(failures)
}

// --- replay ---

pub struct ReplaySummary {
    pub events: usize,
    pub round: u32,
    pub digest: String,
    pub final_balances: BTreeMap<ParticipantId, Money>,
}

/// Verifies and replays a recorded event log under the scenario's contract
/// configuration, returning the reconstructed state summary.
pub fn run_replay(log_path: &Path, scenario: &Scenario) -> Result<ReplaySummary> {
    let text = std::fs::read_to_string(log_path)
        .with_context(|| format!("reading log {}", log_path.display()))?;
    let log = EventLog::decode(&text)?;
    let ledger = Ledger::replay(sim::ledger_config(scenario), &log)?;
    let final_balances = scenario
        .participants()
        .into_iter()
        .map(|p| (p, ledger.balance(p)))
        .collect();
    Ok(ReplaySummary {
        events: log.len(),
        round: ledger.round(),
        digest: ledger.state_digest().to_string(),
        final_balances,
    })
}

/// Participation-constraint estimate, exposed for the CLI report.
pub fn participation_means(scenario: &Scenario, seeds: u64) -> Result<(f64, f64)> {
    let owners = oracle::estimate_expected_utility(scenario, Role::ModelOwner, seeds)?;
    let stations = oracle::estimate_expected_utility(scenario, Role::BaseStation, seeds)?;
    Ok((owners, stations))
}
