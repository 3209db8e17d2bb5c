//! Campaign driver: runs stages and writes tables, summaries and snapshots.

use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::CampaignConfig;
use crate::design::{
    gaussian_approx_eig_all, ieig_upper_bound_all, nested_mc_eig_all, DesignScoreTable, GaussState, Method,
};
use crate::error::{Result, SoedError};
use crate::models::{ForwardModel, History, NoiseModel};
use crate::rng::{substream, tag};
use crate::snapshot::Snapshot;
use crate::soed::{diagnostics, run_stage, CampaignState, Diagnostics, StageResult};
use crate::subspace::average_fisher;

pub const SNAPSHOT_FILE: &str = "snapshot.bin";
pub const SUMMARY_COLUMNS: [&str; 17] = [
    "stage",
    "design",
    "label",
    "score",
    "data_free_rank",
    "data_dependent_rank",
    "restarted",
    "hellinger",
    "ess_fraction",
    "kl",
    "assimilated_ess",
    "chosen_nmc",
    "random_median_nmc",
    "stage_solves",
    "total_solves",
    "map_layers",
    "flags",
];
pub const SCORE_COLUMNS: [&str; 4] = ["candidate", "label", "score", "std_error"];
pub const COMPARE_COLUMNS: [&str; 7] = ["candidate", "label", "ub", "nmc", "nmc_std_error", "gauss", "gauss_std_error"];

/// Command-line overrides of configuration fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub stages: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut config: CampaignConfig) -> Result<CampaignConfig> {
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(m) = self.method {
            config.settings.method = m;
        }
        if let Some(k) = self.stages {
            config.stages = k;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    fn csv(&mut self, path: String, columns: &[&str]) {
        self.files.push(ManifestEntry {
            path,
            kind: "csv".into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
        });
    }

    fn other(&mut self, path: &str, kind: &str) {
        self.files.push(ManifestEntry {
            path: path.into(),
            kind: kind.into(),
            columns: vec![],
        });
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.12e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn score_rows(table: &DesignScoreTable, labels: &[String]) -> Vec<Vec<String>> {
    table
        .scores
        .iter()
        .zip(&table.std_errors)
        .enumerate()
        .map(|(e, (s, se))| vec![e.to_string(), labels[e].clone(), fmt_f64(*s), fmt_f64(*se)])
        .collect()
}

fn summary_row(r: &StageResult) -> Vec<String> {
    let score = r.table(r.method).map(|t| t.scores[r.design]);
    vec![
        r.stage.to_string(),
        r.design.to_string(),
        r.design_label.clone(),
        fmt_opt(score),
        r.data_free_rank.to_string(),
        r.data_dependent_rank.map(|d| d.to_string()).unwrap_or_default(),
        r.restarted.to_string(),
        fmt_f64(r.diagnostics.hellinger),
        fmt_f64(r.diagnostics.ess_fraction),
        fmt_f64(r.diagnostics.kl),
        fmt_f64(r.assimilated_ess),
        fmt_opt(r.chosen_nmc),
        fmt_opt(r.random_median_nmc),
        r.stage_solves.to_string(),
        r.total_solves.to_string(),
        r.map_layers.to_string(),
        r.flags.join(";"),
    ]
}

/// Writes every table for the stages completed so far, plus the manifest.
pub fn write_outputs(out: &Path, config: &CampaignConfig, state: &CampaignState, labels: &[String]) -> Result<Manifest> {
    std::fs::create_dir_all(out.join("scores"))?;
    let mut manifest = Manifest::default();

    std::fs::write(out.join("config.json"), config.to_json()?)?;
    manifest.other("config.json", "json");

    let rows: Vec<Vec<String>> = state.results.iter().map(summary_row).collect();
    write_csv(&out.join("summary.csv"), &SUMMARY_COLUMNS, &rows)?;
    manifest.csv("summary.csv".into(), &SUMMARY_COLUMNS);

    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&state.results)?)?;
    manifest.other("summary.json", "json");

    let max_obs = state.history.entries.iter().map(|(_, y)| y.len()).max().unwrap_or(0);
    let mut data_header = vec!["stage".to_string(), "design".to_string()];
    data_header.extend((0..max_obs).map(|i| format!("y{i}")));
    let data_rows: Vec<Vec<String>> = state
        .history
        .entries
        .iter()
        .enumerate()
        .map(|(k, (e, y))| {
            let mut row = vec![(k + 1).to_string(), e.to_string()];
            row.extend(y.iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    let header: Vec<&str> = data_header.iter().map(|s| s.as_str()).collect();
    write_csv(&out.join("data.csv"), &header, &data_rows)?;
    manifest.csv("data.csv".into(), &header);

    for r in &state.results {
        for t in &r.tables {
            let name = format!("scores/stage_{:02}_{}.csv", r.stage, t.method.name());
            write_csv(&out.join(&name), &SCORE_COLUMNS, &score_rows(t, labels))?;
            manifest.csv(name, &SCORE_COLUMNS);
        }
    }
    manifest.other(SNAPSHOT_FILE, "snapshot");
    manifest.other("manifest.json", "json");
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SoedError::Config(format!("thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

/// Runs stages until the configured count, snapshotting after each one.
/// On failure the last good snapshot and tables stay on disk.
pub fn continue_campaign(
    config: &CampaignConfig,
    base: &Path,
    out: &Path,
    mut state: CampaignState,
) -> Result<CampaignState> {
    std::fs::create_dir_all(out)?;
    let (problem, _) = config.build_problem(base)?;
    let labels = problem.model.candidates().labels.clone();
    with_workers(config.workers, || {
        while state.history.len() < config.stages {
            let r = run_stage(&problem, &config.settings, &mut state)?;
            info!(
                "stage {} done: design {} {}, ESS/N {:.3}, {} solves",
                r.stage, r.design, r.design_label, r.diagnostics.ess_fraction, r.stage_solves
            );
            Snapshot {
                config: config.clone(),
                state: state.clone(),
            }
            .write(&out.join(SNAPSHOT_FILE))?;
            write_outputs(out, config, &state, &labels)?;
        }
        Ok(())
    })?;
    Ok(state)
}

/// Fresh campaign from a configuration.
pub fn run_campaign(config: &CampaignConfig, base: &Path, out: &Path) -> Result<CampaignState> {
    let (problem, _) = config.build_problem(base)?;
    let state = CampaignState::new(problem.param_dim(), config.seed);
    continue_campaign(config, base, out, state)
}

/// Continues the campaign snapshotted in `out`, optionally with a new stage count.
pub fn resume_campaign(out: &Path, base: &Path, stages: Option<usize>) -> Result<CampaignState> {
    let snap = Snapshot::read(&out.join(SNAPSHOT_FILE))?;
    let config = Overrides {
        stages,
        ..Default::default()
    }
    .apply(snap.config)?;
    continue_campaign(&config, base, out, snap.state)
}

/// Per-candidate scores of all three criteria on a frozen stage prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub stage: usize,
    pub tables: Vec<DesignScoreTable>,
}

impl Comparison {
    pub fn table(&self, method: Method) -> &DesignScoreTable {
        self.tables.iter().find(|t| t.method == method).expect("all criteria tabulated")
    }

    pub fn argmax(&self, method: Method) -> usize {
        self.table(method).argmax
    }
}

/// Gauss-Newton state after assimilating `history` one experiment at a time.
pub fn gauss_state_for(model: &dyn ForwardModel, noise: &NoiseModel, history: &History) -> Result<GaussState> {
    let mut g = GaussState::prior(model.param_dim());
    let mut partial = History::default();
    for (e, y) in &history.entries {
        partial.push(*e, y.clone());
        g = g.assimilate(model, noise, &partial)?;
    }
    Ok(g)
}

/// Evaluates UB, NMC and Gaussian-approximation scores on the stage prior
/// held in `state` and writes `compare.csv` and `compare.json` to `out`.
pub fn compare_estimators(
    config: &CampaignConfig,
    base: &Path,
    state: Option<CampaignState>,
    out: &Path,
) -> Result<Comparison> {
    let (problem, _) = config.build_problem(base)?;
    let state = state.unwrap_or_else(|| CampaignState::new(problem.param_dim(), config.seed));
    let k = state.stage() as u64;
    let seed = state.seed;
    let s = &config.settings;
    let model = &problem.model;
    let noise = &problem.noise;
    let tables = with_workers(config.workers, || {
        let info = average_fisher(model, noise, &state.map, s.bound_samples, &mut substream(seed, &[tag::BOUND, k]))?;
        let ub = ieig_upper_bound_all(&info)?;
        let nmc = nested_mc_eig_all(model, noise, &state.map, s.nmc_samples, &mut substream(seed, &[tag::NMC, k]))?;
        let g = match &state.gauss {
            Some(g) => g.clone(),
            None => gauss_state_for(model, noise, &state.history)?,
        };
        let gauss = gaussian_approx_eig_all(&g, model, noise, s.gauss_samples, &mut substream(seed, &[tag::GAUSS, k]))?;
        Ok(vec![ub, nmc, gauss])
    })?;
    std::fs::create_dir_all(out)?;
    let labels = &model.candidates().labels;
    let rows: Vec<Vec<String>> = (0..labels.len())
        .map(|e| {
            vec![
                e.to_string(),
                labels[e].clone(),
                fmt_f64(tables[0].scores[e]),
                fmt_f64(tables[1].scores[e]),
                fmt_f64(tables[1].std_errors[e]),
                fmt_f64(tables[2].scores[e]),
                fmt_f64(tables[2].std_errors[e]),
            ]
        })
        .collect();
    write_csv(&out.join("compare.csv"), &COMPARE_COLUMNS, &rows)?;
    let cmp = Comparison {
        stage: k as usize,
        tables,
    };
    std::fs::write(out.join("compare.json"), serde_json::to_string_pretty(&cmp)?)?;
    Ok(cmp)
}

/// Importance-sampling diagnostics of the snapshot's current posterior map.
pub fn diagnose(snapshot: &Snapshot, base: &Path, samples: usize) -> Result<Diagnostics> {
    let (problem, _) = snapshot.config.build_problem(base)?;
    let state = &snapshot.state;
    let log_post = |v: &DVector<f64>| problem.log_posterior(&state.history, v);
    let k = state.history.len() as u64;
    with_workers(snapshot.config.workers, || {
        diagnostics(&state.map, &log_post, samples, &mut substream(state.seed, &[tag::DIAGNOSTICS, k, 2]))
    })
}

/// Output directory: explicit override, then config, then `./results`.
pub fn output_dir(config: &CampaignConfig, base: &Path, cli: Option<PathBuf>) -> PathBuf {
    cli.or_else(|| {
        config
            .output_dir
            .as_ref()
            .map(|p| if p.is_absolute() { p.clone() } else { base.join(p) })
    })
    .unwrap_or_else(|| PathBuf::from("results"))
}
