//! Rank-fusion ensembling and Bayesian optimization of the fusion weights.
//!
//! A segment appearing at 1-based rank `j` in model `i`'s list for a class
//! earns `w_i / j`; contributions are summed over models and the class is
//! re-ranked by the total. Weights are tuned by maximizing local MAP with a
//! Gaussian-process surrogate (squared-exponential kernel, fixed
//! hyperparameters) and expected improvement.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::{ClassRanking, GroundTruth};
use crate::predictions::PredictionTable;
use crate::rng::SeededRng;

/// Clamp negatives to zero and scale to sum one. Fails when nothing is positive.
pub fn normalize_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite weight in {w:?}")));
    }
    let clamped: Vec<f64> = w.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid(format!("weights {w:?} have no positive entry")));
    }
    Ok(clamped.into_iter().map(|v| v / total).collect())
}

/// Like [`normalize_weights`] but maps the all-zero vector to uniform weights.
pub fn project_simplex(w: &[f64]) -> Vec<f64> {
    normalize_weights(w).unwrap_or_else(|_| vec![1.0 / w.len() as f64; w.len()])
}

/// Fuse several rankings of the same class.
///
/// Segments whose fused score is zero (listed only by zero-weight models) are
/// dropped, so one-hot weights reproduce that model's ranking exactly.
pub fn rank_fusion(rankings: &[&ClassRanking], weights: &[f64]) -> Result<ClassRanking> {
    let first = rankings
        .first()
        .ok_or_else(|| Error::invalid("rank fusion needs at least one ranking"))?;
    if rankings.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} rankings but {} weights",
            rankings.len(),
            weights.len()
        )));
    }
    let class = first.class();
    if let Some(r) = rankings.iter().find(|r| r.class() != class) {
        return Err(Error::invalid(format!(
            "cannot fuse class {} with class {}",
            class,
            r.class()
        )));
    }
    let weights = normalize_weights(weights)?;
    let mut scores: HashMap<&str, f64> = HashMap::new();
    for (r, &w) in rankings.iter().zip(&weights) {
        for (j, id) in r.segment_ids().enumerate() {
            *scores.entry(id).or_insert(0.0) += w / (j + 1) as f64;
        }
    }
    let items = scores
        .into_iter()
        .filter(|&(_, s)| s > 0.0)
        .map(|(id, s)| (id.to_string(), s))
        .collect();
    ClassRanking::new(class, items)
}

/// Fuse whole tables class by class; a model without a class contributes nothing to it.
pub fn fuse_tables(tables: &[PredictionTable], weights: &[f64]) -> Result<PredictionTable> {
    if tables.is_empty() {
        return Err(Error::invalid("nothing to fuse"));
    }
    if tables.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} tables but {} weights",
            tables.len(),
            weights.len()
        )));
    }
    let weights = normalize_weights(weights)?;
    let mut classes: Vec<u32> = tables.iter().flat_map(|t| t.classes()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = PredictionTable::new();
    for c in classes {
        let (rs, ws): (Vec<&ClassRanking>, Vec<f64>) = tables
            .iter()
            .zip(&weights)
            .filter_map(|(t, &w)| t.get(c).map(|r| (r, w)))
            .unzip();
        if ws.iter().all(|&w| w == 0.0) {
            continue;
        }
        out.insert(rank_fusion(&rs, &ws)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpParams {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise: f64,
    pub jitter: f64,
}

impl Default for GpParams {
    fn default() -> Self {
        Self {
            length_scale: 0.2,
            signal_var: 1.0,
            noise: 1e-6,
            jitter: 1e-8,
        }
    }
}

impl GpParams {
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_var * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Zero-mean GP posterior conditioned on observations.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    params: GpParams,
    xs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

pub fn gp_fit(xs: &[Vec<f64>], ys: &[f64], params: GpParams) -> Result<GpSurrogate> {
    let n = xs.len();
    if n == 0 || n != ys.len() {
        return Err(Error::invalid(format!("{n} inputs for {} targets", ys.len())));
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::shape("GP inputs differ in dimension"));
    }
    let k = DMatrix::from_fn(n, n, |i, j| {
        params.kernel(&xs[i], &xs[j]) + if i == j { params.noise + params.jitter } else { 0.0 }
    });
    let chol = Cholesky::new(k).ok_or_else(|| Error::invalid("GP kernel matrix is not positive definite"))?;
    let alpha = chol.solve(&DVector::from_column_slice(ys));
    Ok(GpSurrogate {
        params,
        xs: xs.to_vec(),
        chol,
        alpha,
    })
}

impl GpSurrogate {
    /// Posterior `(mean, variance)` at `x`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| self.params.kernel(xi, x)));
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks)
            .unwrap_or_else(|| DVector::zeros(self.xs.len()));
        let var = (self.params.kernel(x, x) - v.dot(&v)).max(0.0);
        (mean, var)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// `E[max(f - best, 0)]` for `f ~ N(mean, var)`.
pub fn ei_closed_form(mean: f64, var: f64, best: f64) -> f64 {
    let sigma = var.max(0.0).sqrt();
    let gain = mean - best;
    if sigma < 1e-15 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let n = Normal::standard();
    (gain * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

pub fn expected_improvement(gp: &GpSurrogate, x: &[f64], best: f64) -> f64 {
    let (m, v) = gp.posterior(x);
    ei_closed_form(m, v, best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoOptions {
    pub iterations: usize,
    /// Uniform random candidates per acquisition step.
    pub candidates: usize,
    /// Gaussian perturbations of the incumbent per step.
    pub local_candidates: usize,
    pub local_sigma: f64,
    pub gp: GpParams,
}

impl Default for BoOptions {
    fn default() -> Self {
        Self {
            iterations: 30,
            candidates: 512,
            local_candidates: 256,
            local_sigma: 0.05,
            gp: GpParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub best: Observation,
    /// Every evaluation in order, initial samples first.
    pub trajectory: Vec<Observation>,
}

/// Maximize `objective` over the unit box `[0,1]^dim`.
///
/// The initial points are evaluated first; each iteration then fits the GP to
/// standardized observations and evaluates the candidate with the largest
/// expected improvement. The best observation (earliest on ties) is returned.
pub fn bayes_optimize<F>(
    mut objective: F,
    dim: usize,
    initial: &[Vec<f64>],
    opts: &BoOptions,
    rng: &mut SeededRng,
) -> Result<BoResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if dim == 0 {
        return Err(Error::invalid("optimization domain is empty"));
    }
    if initial.is_empty() {
        return Err(Error::invalid("Bayesian optimization needs initial samples"));
    }
    let mut trajectory = Vec::with_capacity(initial.len() + opts.iterations);
    for x in initial {
        if x.len() != dim {
            return Err(Error::shape(format!("initial point {x:?} is not {dim}-dimensional")));
        }
        let x: Vec<f64> = x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let y = objective(&x)?;
        trajectory.push(Observation { x, y });
    }
    let vertices = if dim <= 12 { box_vertices(dim) } else { Vec::new() };

    for _ in 0..opts.iterations {
        let ys: Vec<f64> = trajectory.iter().map(|o| o.y).collect();
        let mu = ys.iter().sum::<f64>() / ys.len() as f64;
        let sd = (ys.iter().map(|y| (y - mu) * (y - mu)).sum::<f64>() / ys.len() as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        let zs: Vec<f64> = ys.iter().map(|y| (y - mu) / sd).collect();
        let xs: Vec<Vec<f64>> = trajectory.iter().map(|o| o.x.clone()).collect();
        let gp = gp_fit(&xs, &zs, opts.gp)?;
        let incumbent = best_of(&trajectory);
        let best_z = (incumbent.y - mu) / sd;

        let mut cands = vertices.clone();
        for _ in 0..opts.candidates {
            cands.push((0..dim).map(|_| rng.uniform(0.0, 1.0)).collect());
        }
        for _ in 0..opts.local_candidates {
            cands.push(
                incumbent
                    .x
                    .iter()
                    .map(|&v| (v + opts.local_sigma * rng.normal()).clamp(0.0, 1.0))
                    .collect(),
            );
        }
        let mut pick = 0;
        let mut pick_ei = f64::NEG_INFINITY;
        for (i, c) in cands.iter().enumerate() {
            let ei = expected_improvement(&gp, c, best_z);
            if ei > pick_ei {
                pick_ei = ei;
                pick = i;
            }
        }
        let x = cands.swap_remove(pick);
        let y = objective(&x)?;
        trajectory.push(Observation { x, y });
    }
    Ok(BoResult {
        best: best_of(&trajectory).clone(),
        trajectory,
    })
}

fn best_of(obs: &[Observation]) -> &Observation {
    obs.iter()
        .reduce(|a, b| if b.y > a.y { b } else { a })
        .expect("non-empty trajectory")
}

/// Corners of the unit box except the origin.
fn box_vertices(dim: usize) -> Vec<Vec<f64>> {
    (1u32..1 << dim)
        .map(|mask| (0..dim).map(|i| f64::from((mask >> i) & 1)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneOptions {
    pub k: usize,
    pub init_samples: usize,
    pub seed: u64,
    pub bo: BoOptions,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            k: crate::metrics::DEFAULT_K,
            init_samples: 5,
            seed: 0,
            bo: BoOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    /// Normalized weights of the best evaluation.
    pub weights: Vec<f64>,
    pub map: f64,
    /// Standalone local MAP of each model.
    pub single_maps: Vec<f64>,
    pub trajectory: Vec<Observation>,
}

/// Tune fusion weights against local MAP.
///
/// 1. Each model's standalone MAP, normalized across models to `s̃`, seeds a
///    sampling box `[0.5·s̃_i, 1.5·s̃_i]`; every one-hot weighting is evaluated too.
/// 2. Candidates are scored by fused local MAP.
/// 3. A GP surrogate with expected improvement proposes the next weights.
/// 4. Steps 2-3 repeat for a fixed budget; the best observed weights win.
pub fn tune_weights(tables: &[PredictionTable], truth: &GroundTruth, opts: &TuneOptions) -> Result<TuneResult> {
    let m = tables.len();
    if m == 0 {
        return Err(Error::invalid("no models to tune"));
    }
    if opts.init_samples < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 initial samples, got {}",
            opts.init_samples
        )));
    }
    let single_maps = tables
        .iter()
        .map(|t| t.map_at_k(truth, opts.k))
        .collect::<Result<Vec<_>>>()?;
    if m == 1 {
        return Ok(TuneResult {
            weights: vec![1.0],
            map: single_maps[0],
            trajectory: vec![Observation { x: vec![1.0], y: single_maps[0] }],
            single_maps,
        });
    }
    let centers = project_simplex(&single_maps);
    let mut rng = SeededRng::new(opts.seed);
    let mut initial: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _ in 0..opts.init_samples {
        initial.push(
            centers
                .iter()
                .map(|&s| rng.uniform(0.5 * s, 1.5 * s).clamp(0.0, 1.0))
                .collect(),
        );
    }
    let objective = |w: &[f64]| fuse_tables(tables, &project_simplex(w))?.map_at_k(truth, opts.k);
    let res = bayes_optimize(objective, m, &initial, &opts.bo, &mut rng)?;
    Ok(TuneResult {
        weights: project_simplex(&res.best.x),
        map: res.best.y,
        single_maps,
        trajectory: res.trajectory,
    })
}
