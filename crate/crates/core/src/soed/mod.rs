//! Greedy sequential design loop with conditional maps and restarts.

pub mod diagnostics;

use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use diagnostics::{diagnostics, Diagnostics};

use crate::design::{
    gaussian_approx_eig_all, ieig_upper_bound_all, nested_mc_eig_all, DesignScoreTable, GaussState, Method,
};
use crate::error::{Result, SoedError};
use crate::models::{simulate_data, CountingModel, ForwardModel, History, NoiseModel};
use crate::rng::{substream, tag, Stream};
use crate::subspace::{average_fisher, data_dependent_lis, data_free_lis, LisBasis};
use crate::transport::{build_conditional_stage, build_deep, ConditionalMap, Map, TransportMap, TransportSettings};

/// Tunable parameters of the design loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoedSettings {
    pub eps_i: f64,
    pub eps_g: f64,
    /// Samples for the averaged Fisher information.
    pub bound_samples: usize,
    pub ddlis_samples: usize,
    pub diagnostic_samples: usize,
    pub standardize_samples: usize,
    pub max_lis_dim: Option<usize>,
    /// Restart at least every this many stages.
    pub restart_every: usize,
    /// Restart whenever ESS/N falls below this value.
    pub restart_ess: f64,
    /// Criterion used to choose designs.
    pub method: Method,
    /// Additional criteria tabulated every stage.
    pub evaluate: Vec<Method>,
    pub nmc_samples: usize,
    pub gauss_samples: usize,
    /// Random designs compared against the chosen one under NMC.
    pub random_designs: usize,
    pub transport: TransportSettings,
}

impl Default for SoedSettings {
    fn default() -> Self {
        Self {
            eps_i: 0.02,
            eps_g: 0.01,
            bound_samples: 100,
            ddlis_samples: 100,
            diagnostic_samples: 1000,
            standardize_samples: 1000,
            max_lis_dim: None,
            restart_every: 2,
            restart_ess: 0.3,
            method: Method::Ub,
            evaluate: vec![],
            nmc_samples: 1000,
            gauss_samples: 100,
            random_designs: 20,
            transport: TransportSettings::default(),
        }
    }
}

impl SoedSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_i", self.eps_i), ("eps_g", self.eps_g)] {
            if !(v > 0.0) {
                return Err(SoedError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.restart_ess) {
            return Err(SoedError::Config("restart_ess must lie in [0, 1]".into()));
        }
        let counts = [
            ("bound_samples", self.bound_samples, 1),
            ("ddlis_samples", self.ddlis_samples, 2),
            ("diagnostic_samples", self.diagnostic_samples, 2),
            ("standardize_samples", self.standardize_samples, 2),
            ("restart_every", self.restart_every, 1),
            ("nmc_samples", self.nmc_samples, 2),
            ("gauss_samples", self.gauss_samples, 1),
        ];
        for (name, v, min) in counts {
            if v < min {
                return Err(SoedError::Config(format!("{name} must be at least {min}")));
            }
        }
        if self.max_lis_dim == Some(0) {
            return Err(SoedError::Config("max_lis_dim must be positive".into()));
        }
        self.transport.validate()
    }

    /// Every criterion tabulated per stage, selection criterion first.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = vec![Method::Ub];
        for m in std::iter::once(self.method).chain(self.evaluate.iter().copied()) {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }
}

/// Where stage data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Synthesized from a whitened ground-truth parameter.
    Synthetic { truth: DVector<f64> },
    /// One observed vector per stage.
    Observed(Vec<DVector<f64>>),
}

/// Forward model in whitened coordinates, with solve accounting.
pub struct Problem {
    pub model: CountingModel<Arc<dyn ForwardModel>>,
    pub noise: NoiseModel,
    pub data: DataSource,
}

impl Problem {
    pub fn new(model: Arc<dyn ForwardModel>, noise: NoiseModel, data: DataSource) -> Result<Self> {
        noise.validate(model.candidates())?;
        if let DataSource::Synthetic { truth } = &data {
            if truth.len() != model.param_dim() {
                return Err(SoedError::dim("ground truth", model.param_dim(), truth.len()));
            }
        }
        Ok(Self {
            model: CountingModel::new(model),
            noise,
            data,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.model.param_dim()
    }

    /// `log L(H | v) - |v|^2 / 2`.
    pub fn log_posterior(&self, history: &History, v: &DVector<f64>) -> Result<f64> {
        Ok(history.log_likelihood(&self.model, &self.noise, v)? - 0.5 * v.norm_squared())
    }

    fn stage_data(&self, stage: usize, e: usize, seed: u64) -> Result<DVector<f64>> {
        match &self.data {
            DataSource::Synthetic { truth } => simulate_data(
                &self.model,
                &self.noise,
                truth,
                e,
                &mut substream(seed, &[tag::DATA, stage as u64]),
            ),
            DataSource::Observed(list) => {
                let y = list.get(stage - 1).ok_or_else(|| {
                    SoedError::InvalidInput(format!("no observed data for stage {stage}"))
                })?;
                let nd = self.model.candidates().obs_dim;
                if y.len() != nd {
                    return Err(SoedError::dim("observed data", nd, y.len()));
                }
                Ok(y.clone())
            }
        }
    }
}

/// Per-stage record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    /// Criterion that chose the design.
    pub method: Method,
    pub design: usize,
    pub design_label: String,
    pub data: DVector<f64>,
    pub data_free_rank: usize,
    pub data_dependent_rank: Option<usize>,
    pub restarted: bool,
    /// Diagnostics of the stage posterior map, after any restart.
    pub diagnostics: Diagnostics,
    /// ESS/N right after assimilation, before any restart.
    pub assimilated_ess: f64,
    pub tables: Vec<DesignScoreTable>,
    /// NMC iEIG at the chosen design and at random designs, when tabulated.
    pub chosen_nmc: Option<f64>,
    pub random_designs: Vec<usize>,
    pub random_median_nmc: Option<f64>,
    pub stage_solves: usize,
    pub total_solves: usize,
    pub map_layers: usize,
    pub flags: Vec<String>,
    pub wall_seconds: f64,
}

impl StageResult {
    pub fn table(&self, method: Method) -> Option<&DesignScoreTable> {
        self.tables.iter().find(|t| t.method == method)
    }
}

/// Resumable campaign state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignState {
    pub seed: u64,
    /// Current posterior map in whitened coordinates.
    pub map: Map,
    /// Conditional map of the most recent stage.
    pub conditional: Option<ConditionalMap>,
    pub history: History,
    pub lis: Vec<LisBasis>,
    pub gauss: Option<GaussState>,
    pub stages_since_restart: usize,
    pub results: Vec<StageResult>,
    pub solves: usize,
}

impl CampaignState {
    pub fn new(param_dim: usize, seed: u64) -> Self {
        Self {
            seed,
            map: Map::Identity(param_dim),
            conditional: None,
            history: History::default(),
            lis: vec![],
            gauss: None,
            stages_since_restart: 0,
            results: vec![],
            solves: 0,
        }
    }

    /// 1-based index of the next stage.
    pub fn stage(&self) -> usize {
        self.history.stage()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rebuilds the posterior map from scratch on a data-dependent LIS.
pub fn restart_map(
    problem: &Problem,
    settings: &SoedSettings,
    map: &Map,
    history: &History,
    rng: &mut Stream,
) -> Result<(Map, LisBasis)> {
    let model = &problem.model;
    let noise = &problem.noise;
    let log_post = |v: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (ll, g) = history.log_likelihood_with_gradient(model, noise, v)?;
        Ok((ll - 0.5 * v.norm_squared(), g))
    };
    let (lis, _) = data_dependent_lis(map, &log_post, settings.eps_g, settings.ddlis_samples, settings.max_lis_dim, rng)?;
    let r = lis.rank();
    if r == 0 {
        return Ok((Map::Identity(problem.param_dim()), lis));
    }
    let basis = lis.basis.clone();
    let target = |w: &[f64]| -> f64 {
        let w = DVector::from_column_slice(w);
        match history.log_likelihood(model, noise, &(&basis * &w)) {
            Ok(ll) => ll - 0.5 * w.norm_squared(),
            Err(_) => f64::NAN,
        }
    };
    let deep = build_deep(&target, r, &settings.transport, rng)?;
    Ok((Map::embedded(basis, deep.into_map())?, lis))
}

/// Runs one stage of the design loop; `state` is updated only on success.
pub fn run_stage(problem: &Problem, settings: &SoedSettings, state: &mut CampaignState) -> Result<StageResult> {
    let start = Instant::now();
    let k = state.stage();
    let seed = state.seed;
    let ks = k as u64;
    let model = &problem.model;
    let noise = &problem.noise;
    let solves0 = model.solves();
    let mut flags = Vec::new();

    let info = average_fisher(model, noise, &state.map, settings.bound_samples, &mut substream(seed, &[tag::BOUND, ks]))?;
    let mut tables = Vec::new();
    let mut gauss = state.gauss.clone();
    for method in settings.methods() {
        let table = match method {
            Method::Ub => ieig_upper_bound_all(&info)?,
            Method::Nmc => nested_mc_eig_all(
                model,
                noise,
                &state.map,
                settings.nmc_samples,
                &mut substream(seed, &[tag::NMC, ks]),
            )?,
            Method::Gauss => {
                let g = gauss.get_or_insert_with(|| GaussState::prior(problem.param_dim()));
                gaussian_approx_eig_all(g, model, noise, settings.gauss_samples, &mut substream(seed, &[tag::GAUSS, ks]))?
            }
        };
        if table.flagged {
            flags.push(format!("{}_flagged", method.name()));
        }
        tables.push(table);
    }
    let chosen = tables
        .iter()
        .find(|t| t.method == settings.method)
        .expect("selection criterion tabulated");
    let design = chosen.argmax;
    info!("stage {k}: design {design} ({} score {:.4e})", settings.method.name(), chosen.scores[design]);

    let free = data_free_lis(&info, design, settings.eps_i, settings.max_lis_dim)?;
    if free.capped {
        flags.push("lis_capped".into());
    }
    let (conditional, report) = build_conditional_stage(
        model,
        noise,
        &state.map,
        design,
        &free.basis,
        &settings.transport,
        settings.standardize_samples,
        &mut substream(seed, &[tag::CONDITIONAL, ks]),
    )?;
    if report.identity {
        flags.push("uninformative_design".into());
    }
    if report.layers.iter().any(|r| !r.converged) {
        flags.push("tt_not_converged".into());
    }

    let y = problem.stage_data(k, design, seed)?;
    let mut history = state.history.clone();
    history.push(design, y.clone());
    let mut map = Map::compose(state.map.clone(), conditional.at_data(&y)?)?;

    let log_post = |v: &DVector<f64>| problem.log_posterior(&history, v);
    let mut diag = diagnostics(&map, &log_post, settings.diagnostic_samples, &mut substream(seed, &[tag::DIAGNOSTICS, ks, 0]))?;
    let assimilated_ess = diag.ess_fraction;
    let mut since = state.stages_since_restart + 1;
    let mut restarted = false;
    let mut dd_rank = None;
    let mut lis = state.lis.clone();
    lis.push(free.clone());
    if since >= settings.restart_every || diag.ess_fraction < settings.restart_ess {
        match restart_map(problem, settings, &map, &history, &mut substream(seed, &[tag::RESTART, ks])) {
            Ok((new_map, dd)) => {
                if dd.flagged {
                    flags.push("ddlis_flagged".into());
                }
                dd_rank = Some(dd.rank());
                lis.push(dd);
                map = new_map;
                restarted = true;
                since = 0;
                diag = diagnostics(&map, &log_post, settings.diagnostic_samples, &mut substream(seed, &[tag::DIAGNOSTICS, ks, 1]))?;
            }
            Err(e @ (SoedError::TtBuild { .. } | SoedError::Numerical(_))) => {
                warn!("stage {k}: restart failed, keeping current map: {e}");
                flags.push("restart_failed".into());
            }
            Err(e) => return Err(e),
        }
    }
    if diag.flagged {
        flags.push("diagnostics_undefined".into());
    }
    if let Some(g) = gauss.as_mut() {
        *g = g.assimilate(model, noise, &history)?;
        if !g.converged {
            flags.push("map_not_converged".into());
        }
    }

    let (chosen_nmc, random_designs, random_median_nmc) = match tables.iter().find(|t| t.method == Method::Nmc) {
        Some(nmc) if settings.random_designs > 0 => {
            let mut rng = substream(seed, &[tag::RANDOM_DESIGNS, ks]);
            let ne = model.candidates().count;
            let picks: Vec<usize> = (0..settings.random_designs).map(|_| rng.random_range(0..ne)).collect();
            let med = median(picks.iter().map(|&e| nmc.scores[e]).collect());
            (Some(nmc.scores[design]), picks, Some(med))
        }
        Some(nmc) => (Some(nmc.scores[design]), vec![], None),
        None => (None, vec![], None),
    };

    let stage_solves = model.solves() - solves0;
    let result = StageResult {
        stage: k,
        method: settings.method,
        design,
        design_label: model.candidates().labels[design].clone(),
        data: y,
        data_free_rank: free.rank(),
        data_dependent_rank: dd_rank,
        restarted,
        diagnostics: diag,
        assimilated_ess,
        tables,
        chosen_nmc,
        random_designs,
        random_median_nmc,
        stage_solves,
        total_solves: state.solves + stage_solves,
        map_layers: map.num_layers(),
        flags,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    state.map = map;
    state.conditional = Some(conditional);
    state.history = history;
    state.lis = lis;
    state.gauss = gauss;
    state.stages_since_restart = since;
    state.solves = result.total_solves;
    state.results.push(result.clone());
    Ok(result)
}
