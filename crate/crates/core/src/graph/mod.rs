//! Factor graph container and Levenberg–Marquardt optimizer over the product
//! manifold of poses, points, planes and quadrics.

mod sparse;
mod values;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use sparse::{BlockMatrix, BlockPattern};
pub use values::{Variable, VariableId, VariableKind};

use crate::error::{invalid, Error, Result};
use crate::factors::{Factor, Linearization};

/// Environment variable capping the optimizer's worker threads.
pub const THREADS_ENV: &str = "SEMSLAM_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    /// Damping is multiplied by this factor after a rejected step and divided
    /// by it after an accepted one.
    pub lambda_scale: f64,
    /// Stop when the cost falls below this value.
    pub abs_tol: f64,
    /// Stop when an accepted step reduces the cost by less than this fraction.
    pub rel_tol: f64,
    pub parallel_eval: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: 1e-4,
            lambda_scale: 10.0,
            abs_tol: 1e-14,
            rel_tol: 1e-10,
            parallel_eval: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.max_iterations == 0 || !pos(self.lambda_init) || self.lambda_scale.is_nan() || self.lambda_scale <= 1.0
        {
            return Err(invalid("optimizer needs max_iterations > 0, lambda_init > 0, lambda_scale > 1"));
        }
        if !pos(self.abs_tol) || !pos(self.rel_tol) {
            return Err(invalid("optimizer tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// Cost below `abs_tol`.
    AbsoluteTolerance,
    /// Relative decrease below `rel_tol`.
    RelativeTolerance,
    /// No damping level produced a decrease; the iterate is a local minimum to
    /// working precision.
    Stalled,
    MaxIterations,
    /// The damped normal equations could not be factored.
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Factors skipped at the last linearization (behind camera, degenerate
    /// projection or zero overlap).
    pub inactive_factors: usize,
}

/// Variables, factors and the fixed gauge set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Graph {
    variables: BTreeMap<VariableId, Variable>,
    factors: Vec<Factor>,
    fixed: BTreeSet<VariableId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable under the next free index of its kind.
    pub fn add_variable(&mut self, value: Variable) -> Result<VariableId> {
        let kind = value.kind();
        let index = self
            .variables
            .range(VariableId { kind, index: 0 }..=VariableId { kind, index: usize::MAX })
            .next_back()
            .map_or(0, |(id, _)| id.index + 1);
        let id = VariableId { kind, index };
        self.insert_variable(id, value)?;
        Ok(id)
    }

    /// Adds a variable under a caller-chosen id.
    pub fn insert_variable(&mut self, id: VariableId, value: Variable) -> Result<()> {
        if id.kind != value.kind() {
            return Err(invalid(format!("id {id:?} does not match a {:?} value", value.kind())));
        }
        value.validate()?;
        if self.variables.contains_key(&id) {
            return Err(invalid(format!("variable {id:?} already exists")));
        }
        self.variables.insert(id, value);
        Ok(())
    }

    pub fn get(&self, id: VariableId) -> Option<&Variable> {
        self.variables.get(&id)
    }

    /// Replaces the value of an existing variable.
    pub fn set(&mut self, id: VariableId, value: Variable) -> Result<()> {
        if id.kind != value.kind() {
            return Err(invalid(format!("id {id:?} does not match a {:?} value", value.kind())));
        }
        value.validate()?;
        match self.variables.get_mut(&id) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(invalid(format!("unknown variable {id:?}"))),
        }
    }

    pub fn variables(&self) -> impl Iterator<Item = (&VariableId, &Variable)> {
        self.variables.iter()
    }

    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn fix(&mut self, id: VariableId) -> Result<()> {
        if !self.variables.contains_key(&id) {
            return Err(invalid(format!("unknown variable {id:?}")));
        }
        self.fixed.insert(id);
        Ok(())
    }

    pub fn unfix(&mut self, id: VariableId) {
        self.fixed.remove(&id);
    }

    pub fn is_fixed(&self, id: VariableId) -> bool {
        self.fixed.contains(&id)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize> {
        for k in factor.keys() {
            if !self.variables.contains_key(k) {
                return Err(invalid(format!("{} factor references unknown variable {k:?}", factor.model.name())));
            }
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    fn values_of<'a>(&'a self, f: &Factor) -> Vec<&'a Variable> {
        f.keys().iter().map(|k| &self.variables[k]).collect()
    }

    /// Robust squared Mahalanobis cost of one factor; None when inactive.
    pub fn factor_cost(&self, f: &Factor) -> Option<f64> {
        let r = f.evaluate(&self.values_of(f)).ok().flatten()?;
        Some(robust_cost(f, &r))
    }

    /// Sum of factor costs over active factors.
    pub fn total_cost(&self) -> f64 {
        self.factors.iter().filter_map(|f| self.factor_cost(f)).sum()
    }

    /// Levenberg–Marquardt over all non-fixed variables touched by a factor.
    ///
    /// The graph is left at the best accepted iterate, also when the solve
    /// fails numerically.
    pub fn optimize(&mut self, cfg: &OptimizerConfig) -> Result<OptimizationReport> {
        cfg.validate()?;
        if self.fixed.is_empty() {
            return Err(invalid("at least one variable must be fixed to anchor the gauge"));
        }
        let pool = thread_pool(cfg.parallel_eval)?;
        pool.install(|| self.optimize_inner(cfg))
    }

    fn optimize_inner(&mut self, cfg: &OptimizerConfig) -> Result<OptimizationReport> {
        // free blocks in id order
        let mut block_of: BTreeMap<VariableId, usize> = BTreeMap::new();
        for f in &self.factors {
            for k in f.keys() {
                if !self.fixed.contains(k) {
                    block_of.insert(*k, 0);
                }
            }
        }
        let ids: Vec<VariableId> = block_of.keys().copied().collect();
        for (b, id) in ids.iter().enumerate() {
            block_of.insert(*id, b);
        }
        let dims: Vec<usize> = ids.iter().map(|id| id.kind.dim()).collect();
        let mut edges = Vec::new();
        for f in &self.factors {
            let blocks: Vec<usize> = f.keys().iter().filter_map(|k| block_of.get(k).copied()).collect();
            for (x, &a) in blocks.iter().enumerate() {
                for &b in &blocks[..x] {
                    edges.push((a, b));
                }
            }
        }
        let pattern = BlockPattern::new(dims.clone(), edges);

        let initial_cost = self.total_cost();
        let mut report = OptimizationReport {
            iterations: 0,
            initial_cost,
            final_cost: initial_cost,
            converged: false,
            termination: Termination::MaxIterations,
            cost_history: vec![initial_cost],
            inactive_factors: 0,
        };
        if initial_cost < cfg.abs_tol || ids.is_empty() {
            report.converged = true;
            report.termination = Termination::AbsoluteTolerance;
            return Ok(report);
        }

        let mut lambda = cfg.lambda_init;
        let mut cost = initial_cost;
        'outer: while report.iterations < cfg.max_iterations {
            report.iterations += 1;
            let lins = self.linearize_all();
            report.inactive_factors = lins.iter().filter(|l| l.is_none()).count();
            if report.inactive_factors > 0 {
                log::debug!("{} factors inactive at iteration {}", report.inactive_factors, report.iterations);
            }
            let active: Vec<usize> = (0..lins.len()).filter(|&i| lins[i].is_some()).collect();
            // cost over the active set at the linearization point
            let base_cost: f64 =
                active.iter().map(|&i| robust_cost(&self.factors[i], &lins[i].as_ref().unwrap().residual)).sum();
            let (h, g) = self.normal_equations(&pattern, &block_of, &lins);
            let diag: Vec<DVector<f64>> = (0..ids.len()).map(|b| pattern.diagonal(&h, b)).collect();

            loop {
                let mut damped = h.clone();
                for (b, d) in diag.iter().enumerate() {
                    let add = d.map(|v| lambda * v.clamp(1e-9, 1e32));
                    pattern.add_to_diagonal(&mut damped, b, &add);
                }
                let step = pattern.factor(damped).and_then(|l| pattern.solve(&l, &g));
                let Some(neg_step) = step else {
                    lambda *= cfg.lambda_scale;
                    if lambda > 1e32 {
                        report.termination = Termination::NumericalFailure;
                        break 'outer;
                    }
                    continue;
                };
                // solve gives (H + λD)⁻¹ g; the step is its negative
                let step: Vec<DVector<f64>> = neg_step.into_iter().map(|v| -v).collect();
                match self.try_step(&ids, &step, &active) {
                    Some((candidate, new_cost)) if new_cost < base_cost => {
                        self.variables = candidate;
                        let decrease = base_cost - new_cost;
                        // re-evaluate over all factors: inactive ones may have become active
                        cost = self.total_cost();
                        report.cost_history.push(cost);
                        lambda = (lambda / cfg.lambda_scale).max(1e-12);
                        if cost < cfg.abs_tol {
                            report.termination = Termination::AbsoluteTolerance;
                            report.converged = true;
                            break 'outer;
                        }
                        if decrease < cfg.rel_tol * base_cost {
                            report.termination = Termination::RelativeTolerance;
                            report.converged = true;
                            break 'outer;
                        }
                        break;
                    }
                    _ => {
                        lambda *= cfg.lambda_scale;
                        if lambda > 1e16 {
                            report.termination = Termination::Stalled;
                            report.converged = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        report.final_cost = cost;
        Ok(report)
    }

    fn linearize_all(&self) -> Vec<Option<Linearization>> {
        self.factors.par_iter().map(|f| f.linearize(&self.values_of(f)).ok().flatten()).collect()
    }

    // Whitened, robust-reweighted normal equations H = JᵀJ, g = Jᵀr.
    fn normal_equations(
        &self,
        pattern: &BlockPattern,
        block_of: &BTreeMap<VariableId, usize>,
        lins: &[Option<Linearization>],
    ) -> (BlockMatrix, Vec<DVector<f64>>) {
        let mut h = pattern.zeros();
        let mut g: Vec<DVector<f64>> = (0..pattern.n_blocks()).map(|_| DVector::zeros(0)).collect();
        for (id, &b) in block_of {
            g[b] = DVector::zeros(id.kind.dim());
        }
        // per-factor products in parallel, accumulated in factor order
        let contributions: Vec<Vec<(usize, usize, DMatrix<f64>)>> = self
            .factors
            .par_iter()
            .zip(lins.par_iter())
            .map(|(f, lin)| {
                let Some(lin) = lin else { return Vec::new() };
                let wr = f.noise.whiten(&lin.residual);
                let s = wr.norm_squared();
                let w = f.robust.map_or(1.0, |hb| hb.weight(s)).sqrt();
                let r = wr * w;
                let js: Vec<(usize, DMatrix<f64>)> = f
                    .keys()
                    .iter()
                    .zip(&lin.jacobians)
                    .filter_map(|(k, j)| block_of.get(k).map(|&b| (b, f.noise.whiten_matrix(j) * w)))
                    .collect();
                let mut out = Vec::with_capacity(js.len() * (js.len() + 3) / 2);
                for (x, (a, ja)) in js.iter().enumerate() {
                    out.push((
                        *a,
                        usize::MAX,
                        DMatrix::from_column_slice(ja.ncols(), 1, (ja.transpose() * &r).as_slice()),
                    ));
                    for (b, jb) in &js[..=x] {
                        out.push((*a, *b, ja.transpose() * jb));
                    }
                }
                out
            })
            .collect();
        for c in contributions {
            for (a, b, m) in c {
                if b == usize::MAX {
                    g[a] += m.column(0);
                } else {
                    pattern.add(&mut h, a, b, &m);
                }
            }
        }
        (h, g)
    }

    // Applies the step; returns the candidate values and their cost over the
    // given active factors, or None if the step leaves a factor's valid region.
    fn try_step(
        &self,
        ids: &[VariableId],
        step: &[DVector<f64>],
        active: &[usize],
    ) -> Option<(BTreeMap<VariableId, Variable>, f64)> {
        if !step.iter().all(|s| s.iter().all(|v| v.is_finite())) {
            return None;
        }
        let mut candidate = self.variables.clone();
        for (id, d) in ids.iter().zip(step) {
            let v = candidate.get_mut(id).expect("free variable exists");
            *v = v.retract(d.as_slice()).ok()?;
        }
        let costs: Vec<Option<f64>> = active
            .par_iter()
            .map(|&i| {
                let f = &self.factors[i];
                let vals: Vec<&Variable> = f.keys().iter().map(|k| &candidate[k]).collect();
                f.evaluate(&vals).ok().flatten().map(|r| robust_cost(f, &r))
            })
            .collect();
        let mut total = 0.0;
        for c in costs {
            total += c?;
        }
        Some((candidate, total))
    }
}

/// `ρ(‖W r‖²)`, or the plain squared norm without a robust loss.
pub fn robust_cost(f: &Factor, r: &DVector<f64>) -> f64 {
    let s = f.noise.mahalanobis_squared(r);
    f.robust.map_or(s, |h| h.cost(s))
}

/// Worker count from [`THREADS_ENV`], or the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn thread_pool(parallel: bool) -> Result<rayon::ThreadPool> {
    let n = if parallel { worker_threads() } else { 1 };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::NumericalFailure(format!("cannot start worker pool: {e}")))
}
