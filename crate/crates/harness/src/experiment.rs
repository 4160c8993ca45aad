//! End-to-end pipeline runner, independent-parties baseline and sweeps.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vertimrf_core::data::Dataset;
use vertimrf_core::message::{EncodedAttributes, PartyMessage};
use vertimrf_core::privacy::{PrivacyBudget, PrivacyError, SpendLedger};
use vertimrf_party::{
    local_clique_bound, run_party, EncoderKind, KeyOracle, LocMrfConfig, Party,
    PartyPipelineConfig,
};
use vertimrf_server::{run_pipeline, ServerConfig, ServerReport};

use crate::config::{resolve_assignment, EncoderChoice, RunConfig};
use crate::io::{load_csv, write_csv, DomainFile};
use crate::metrics::{eval_lway_tvd, MessageAccounting, MetricsReport};
use crate::planted::planted_dataset;
use crate::{subseed, HarnessError};

const SEED_KEYS: u64 = 1;
const SEED_SERVER: u64 = 2;
const SEED_EVAL: u64 = 3;
const SEED_DATA: u64 = 4;
const SEED_PARTY_BASE: u64 = 100;

pub struct RunOutcome {
    pub synthetic: Dataset,
    pub metrics: MetricsReport,
    pub report: ServerReport,
    pub ledger: SpendLedger,
    pub domain: DomainFile,
}

/// Loads the configured input: a CSV against its domain file, or the
/// planted generator.
pub fn load_input(config: &RunConfig) -> Result<(Dataset, DomainFile), HarnessError> {
    match (&config.input, &config.domain) {
        (Some(csv), Some(domain_path)) => {
            let domain = DomainFile::load(domain_path)?;
            let data = load_csv(csv, &domain)?;
            Ok((data, domain))
        }
        (Some(_), None) => Err(HarnessError::Config(
            "input CSV given without a domain file".into(),
        )),
        (None, _) => {
            let planted = config.planted.clone().unwrap_or_default();
            let data = planted_dataset(&planted, subseed(config.seed, SEED_DATA))?;
            let domain = DomainFile::for_schema(data.schema());
            Ok((data, domain))
        }
    }
}

/// Executes the six pipeline phases under the configured seeds and budget,
/// evaluates l-way TVD against the input, and writes the output files when
/// an output directory is set.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome, HarnessError> {
    let started = Instant::now();
    let (data, domain) = load_input(config)?;
    let schema = data.schema().clone();
    let n = data.row_count();
    let delta = config.delta.unwrap_or(1.0 / (n.max(2) as f64));
    let budget = PrivacyBudget::new(config.epsilon, delta)?;

    let assignment = resolve_assignment(&config.assignment, schema.attribute_count(), config.parties)?;
    let bins = config.resolved_bins(&schema);
    let binned_attr_count = match bins {
        Some(b) => schema.domain_sizes().iter().filter(|&&u| u > b).count(),
        None => 0,
    };
    let plan = config.budget_plan(binned_attr_count > 0);
    let budgets = plan.resolve(budget, binned_attr_count)?;
    let tau_prime = local_clique_bound(config.tau, config.parties, &schema);
    let d_global = schema.attribute_count() as u32;

    let encoder = match config.encoder {
        EncoderChoice::Fm => EncoderKind::Fm {
            gamma: config.gamma,
            t: config.t,
        },
        EncoderChoice::Fo => EncoderKind::Fo,
    };
    let keys = match encoder {
        EncoderKind::Fm { t, .. } => Some(KeyOracle::derive(subseed(config.seed, SEED_KEYS), t)),
        EncoderKind::Fo => None,
    };

    // Party phase; parties are independent, so they may run on worker
    // threads. Per-party seeds and ledgers keep the result identical
    // regardless of thread count.
    let party_inputs: Vec<(usize, Party)> = assignment
        .iter()
        .enumerate()
        .map(|(i, attrs)| {
            let slice = data.project(attrs)?;
            Ok((i, Party::new(i as u32, attrs.clone(), slice)?))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let run_one = |(i, party): &(usize, Party)| -> Result<(vertimrf_party::PartyOutput, SpendLedger), HarnessError> {
        let pipeline_config = PartyPipelineConfig {
            tau_prime,
            theta: config.theta,
            refine_rounds: config.refine_rounds,
            refine_batch: config.refine_batch,
            encoder,
            bins,
            budgets,
            d_global,
            emit_noisy_count: *i == 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, SEED_PARTY_BASE + *i as u64));
        let mut ledger = SpendLedger::new();
        let out = run_party(party, &pipeline_config, keys.as_ref(), &mut rng, &mut ledger)?;
        Ok((out, ledger))
    };
    let threads = config.resolved_threads().min(party_inputs.len().max(1));
    let outputs: Vec<(vertimrf_party::PartyOutput, SpendLedger)> =
        if threads <= 1 || party_inputs.len() <= 1 {
            party_inputs
                .iter()
                .map(run_one)
                .collect::<Result<Vec<_>, _>>()?
        } else {
            let chunks: Vec<Vec<&(usize, Party)>> = (0..threads)
                .map(|w| {
                    party_inputs
                        .iter()
                        .skip(w)
                        .step_by(threads)
                        .collect::<Vec<_>>()
                })
                .collect();
            let mut slots: Vec<Option<Result<_, HarnessError>>> =
                (0..party_inputs.len()).map(|_| None).collect();
            let run_one = &run_one;
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for chunk in &chunks {
                    let chunk = chunk.clone();
                    handles.push(scope.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|input| (input.0, run_one(input)))
                            .collect::<Vec<_>>()
                    }));
                }
                for handle in handles {
                    for (idx, result) in handle.join().expect("party worker panicked") {
                        slots[idx] = Some(result);
                    }
                }
            });
            slots
                .into_iter()
                .map(|slot| slot.expect("party slot filled"))
                .collect::<Result<Vec<_>, _>>()?
        };

    // Ledgers merge in party order, then the cross-party encoder stage is
    // booked once: its composition spans every party's sketches.
    let mut ledger = SpendLedger::new();
    for (_, party_ledger) in &outputs {
        for entry in party_ledger.entries() {
            ledger.record(&entry.stage, entry.epsilon, entry.delta, &entry.rule);
        }
    }
    match config.encoder {
        EncoderChoice::Fm => ledger.record(
            "loc_enc[fm]",
            budgets.loc_enc.epsilon,
            budgets.loc_enc.delta,
            "rdp composition over t*d sketches, all parties",
        ),
        EncoderChoice::Fo => {
            let (_, delta_spent) =
                vertimrf_core::fo::fo_eps_prime_for_budget(budgets.loc_enc, d_global)?;
            ledger.record(
                "loc_enc[fo]",
                budgets.loc_enc.epsilon,
                delta_spent,
                if delta_spent > 0.0 {
                    "rdp composition over d attributes, all parties"
                } else {
                    "sequential composition over d attributes, all parties"
                },
            );
        }
    }
    ledger.check_within(budget).map_err(|e| match e {
        PrivacyError::Overspend { .. } => HarnessError::Overspend(e.to_string()),
        other => HarnessError::Privacy(other),
    })?;

    // The serialized message boundary: the server sees decoded bytes only.
    let messages: Vec<PartyMessage> = outputs
        .iter()
        .map(|(out, _)| PartyMessage::decode(&out.wire_bytes))
        .collect::<Result<Vec<_>, _>>()?;
    let accounting: Vec<MessageAccounting> = outputs
        .iter()
        .map(|(out, _)| {
            let sizes = out.message.section_sizes();
            MessageAccounting {
                party: out.message.party_id,
                wire_bytes: out.wire_bytes.len(),
                encoding_bytes: sizes.encoding,
                sketch_entries: match &out.message.encoding {
                    EncodedAttributes::Sketches(s) => Some(s.sketch_count()),
                    _ => None,
                },
                fo_rows: match &out.message.encoding {
                    EncodedAttributes::FrequencyOracle(f) => Some(f.row_count()),
                    _ => None,
                },
                theta_values: out.message.theta.iter().map(Vec::len).sum(),
            }
        })
        .collect();

    let server_config = ServerConfig {
        tau: config.tau,
        d_c: config.d_c,
        opt_rounds: config.opt_rounds,
        opt_batch: config.opt_batch,
        add_threshold: config.add_threshold,
        ..Default::default()
    };
    let mut server_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, SEED_SERVER));
    let (synthetic, _model, report) =
        run_pipeline(&schema, &messages, &server_config, &mut server_rng)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, SEED_EVAL));
    let mut per_l = Vec::new();
    for &l in &config.eval_l {
        if l <= schema.attribute_count() && synthetic.row_count() > 0 {
            per_l.push(eval_lway_tvd(
                &data,
                &synthetic,
                l,
                config.eval_samples,
                &mut eval_rng,
            )?);
        }
    }
    let metrics = MetricsReport {
        per_l,
        total_epsilon: ledger.total_epsilon(),
        total_delta: ledger.total_delta(),
        ledger: ledger.entries().to_vec(),
        messages: accounting,
        elapsed_ms: started.elapsed().as_millis(),
    };

    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &synthetic, &domain, &report, &metrics, &ledger)?;
    }

    Ok(RunOutcome {
        synthetic,
        metrics,
        report,
        ledger,
        domain,
    })
}

fn write_outputs(
    dir: &Path,
    synthetic: &Dataset,
    domain: &DomainFile,
    report: &ServerReport,
    metrics: &MetricsReport,
    ledger: &SpendLedger,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_csv(synthetic, domain, &dir.join("synthetic.csv"))?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(metrics)?,
    )?;
    std::fs::write(
        dir.join("ledger.json"),
        serde_json::to_string_pretty(ledger.entries())?,
    )?;
    Ok(())
}

/// Each party fits a local model with the whole budget and synthesizes its
/// own columns independently; cross-party correlations are ignored. The
/// comparison baseline for end-to-end evaluation.
pub fn baseline_independent(config: &RunConfig) -> Result<Dataset, HarnessError> {
    let (data, _) = load_input(config)?;
    let schema = data.schema().clone();
    let n = data.row_count();
    let delta = config.delta.unwrap_or(1.0 / (n.max(2) as f64));
    let budget = PrivacyBudget::new(config.epsilon, delta)?;
    let assignment = resolve_assignment(&config.assignment, schema.attribute_count(), config.parties)?;
    let tau_prime = local_clique_bound(config.tau, config.parties, &schema);
    let mut columns: Vec<Option<Vec<u32>>> = vec![None; schema.attribute_count()];
    for (i, attrs) in assignment.iter().enumerate() {
        let slice = data.project(attrs)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(subseed(config.seed, SEED_PARTY_BASE + 50 + i as u64));
        let mut ledger = SpendLedger::new();
        let fit = vertimrf_party::loc_mrf(
            &slice,
            &LocMrfConfig {
                tau_prime,
                theta: config.theta,
                refine_rounds: config.refine_rounds,
                refine_batch: config.refine_batch,
                budget,
                stage_prefix: format!("baseline{i}"),
            },
            &mut rng,
            &mut ledger,
        )?;
        let sample = fit.model.sample(n, &mut rng)?;
        for (local, &global) in attrs.iter().enumerate() {
            columns[global] = Some(sample.column(local));
        }
    }
    let mut rows = Vec::with_capacity(n * schema.attribute_count());
    for r in 0..n {
        for column in columns.iter() {
            rows.push(column.as_ref().expect("all columns filled")[r]);
        }
    }
    Ok(Dataset::from_flat(schema, rows)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub parties: usize,
    pub seed_index: u64,
    pub l: usize,
    pub mean_tvd: f64,
    pub std_tvd: f64,
}

/// Grid sweep over epsilon and party counts, repeating each cell over
/// derived seeds. Emits one row per (cell, seed, l).
pub fn run_sweep(
    base: &RunConfig,
    epsilons: &[f64],
    party_counts: &[usize],
    seeds: u64,
) -> Result<Vec<SweepRow>, HarnessError> {
    let mut rows = Vec::new();
    for &epsilon in epsilons {
        for &parties in party_counts {
            for s in 0..seeds {
                let mut config = base.clone();
                config.epsilon = epsilon;
                config.parties = parties;
                config.seed = subseed(base.seed, 10_000 + s);
                config.out_dir = None;
                if parties != base.parties {
                    // Explicit assignments are tied to the base party
                    // count; fall back to uniform elsewhere.
                    config.assignment = crate::config::Assignment::Uniform;
                }
                let outcome = run_experiment(&config)?;
                for summary in &outcome.metrics.per_l {
                    rows.push(SweepRow {
                        epsilon,
                        parties,
                        seed_index: s,
                        l: summary.l,
                        mean_tvd: summary.mean,
                        std_tvd: summary.std,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Plot-ready TSV: one aggregated line per (epsilon, parties, l).
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("epsilon\tparties\tl\tmean_tvd\tstd_over_seeds\tseeds\n");
    let mut keys: Vec<(String, usize, usize)> = rows
        .iter()
        .map(|r| (format!("{:.6}", r.epsilon), r.parties, r.l))
        .collect();
    keys.sort();
    keys.dedup();
    for (eps_key, parties, l) in keys {
        let cell: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| format!("{:.6}", r.epsilon) == eps_key && r.parties == parties && r.l == l)
            .collect();
        let mean = cell.iter().map(|r| r.mean_tvd).sum::<f64>() / cell.len() as f64;
        let var = cell
            .iter()
            .map(|r| (r.mean_tvd - mean).powi(2))
            .sum::<f64>()
            / cell.len() as f64;
        out.push_str(&format!(
            "{eps_key}\t{parties}\t{l}\t{mean:.6}\t{:.6}\t{}\n",
            var.sqrt(),
            cell.len()
        ));
    }
    out
}

/// TVD means averaged over seeds, one value per epsilon, for trend checks.
pub fn mean_tvd_by_epsilon(rows: &[SweepRow], l: usize) -> Vec<(f64, f64)> {
    let mut epsilons: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    epsilons.sort_by(|a, b| a.partial_cmp(b).unwrap());
    epsilons.dedup();
    epsilons
        .into_iter()
        .map(|eps| {
            let cell: Vec<f64> = rows
                .iter()
                .filter(|r| r.epsilon == eps && r.l == l)
                .map(|r| r.mean_tvd)
                .collect();
            (eps, cell.iter().sum::<f64>() / cell.len().max(1) as f64)
        })
        .collect()
}
