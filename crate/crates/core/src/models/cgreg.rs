//! Regression on a conditional-Gaussian library: every basis function is a
//! monomial in the observed variables times at most one unobserved variable,
//! so the fitted model stays affine in `u2` given `u1`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{BoundCg, CgModel, CoefSeries, Coefs, Dims, ModelKind};
use crate::diffcore::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::systems::{forward_differences, Trajectory};

/// Conditioning limit for the standardized normal equations.
pub const MAX_CONDITION: f64 = 1e10;

/// A monomial over full-state indices; empty means the constant 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Basis {
    pub factors: Vec<usize>,
}

impl Basis {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.factors.iter().map(|&i| x[i]).product()
    }

    pub fn name(&self) -> String {
        if self.factors.is_empty() {
            return "1".into();
        }
        self.factors
            .iter()
            .map(|i| format!("x{}", i + 1))
            .collect::<Vec<_>>()
            .join("*")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub terms: Vec<Basis>,
    /// Per full-state equation, the term indices it may use; all when absent.
    pub allowed: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgRegSpec {
    /// Maximum total degree of the observed-variable part.
    pub max_degree_u1: usize,
    /// Pruning threshold on standardized coefficients.
    pub threshold: f64,
    /// Restricts each equation of a ring lattice to terms within this
    /// cyclic distance.
    pub local_radius: Option<usize>,
}

impl Default for CgRegSpec {
    fn default() -> Self {
        Self {
            max_degree_u1: 2,
            threshold: 1e-3,
            local_radius: None,
        }
    }
}

fn monomials(vars: &[usize], max_degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_degree {
        let mut next = Vec::new();
        for m in &frontier {
            let start = m.last().map_or(0, |&last| {
                vars.iter()
                    .position(|&v| v == last)
                    .expect("known variable")
            });
            for &v in &vars[start..] {
                let mut t: Vec<usize> = m.clone();
                t.push(v);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn ring_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

impl Library {
    /// All observed-variable monomials up to `max_degree_u1`, each times
    /// `{1, u2_k}`.
    pub fn conditional_gaussian(
        dim: usize,
        obs_idx: &[usize],
        unobs_idx: &[usize],
        spec: &CgRegSpec,
    ) -> Library {
        let mut terms = Vec::new();
        for m in monomials(obs_idx, spec.max_degree_u1) {
            for k in std::iter::once(None).chain(unobs_idx.iter().copied().map(Some)) {
                let mut f = m.clone();
                if let Some(k) = k {
                    f.push(k);
                }
                f.sort_unstable();
                terms.push(Basis { factors: f });
            }
        }
        let Some(r) = spec.local_radius else {
            return Library {
                terms,
                allowed: None,
            };
        };
        let near = |eq: usize, b: &Basis| b.factors.iter().all(|&f| ring_distance(eq, f, dim) <= r);
        terms.retain(|b| (0..dim).any(|eq| near(eq, b)));
        let allowed = (0..dim)
            .map(|eq| (0..terms.len()).filter(|&m| near(eq, &terms[m])).collect())
            .collect();
        Library {
            terms,
            allowed: Some(allowed),
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn position(&self, factors: &[usize]) -> Option<usize> {
        let mut f = factors.to_vec();
        f.sort_unstable();
        self.terms.iter().position(|b| b.factors == f)
    }

    fn allowed_for(&self, eq: usize) -> Vec<usize> {
        match &self.allowed {
            Some(a) => a[eq].clone(),
            None => (0..self.terms.len()).collect(),
        }
    }

    /// `T x M` basis evaluations.
    pub fn features(&self, states: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(states.rows(), self.terms.len());
        for r in 0..states.rows() {
            let x = states.row(r);
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.terms) {
                *o = b.eval(x);
            }
        }
        out
    }
}

/// Least squares of `target` on the selected `features` columns with
/// iterative magnitude pruning.
///
/// Columns are standardized before solving; a coefficient is pruned when
/// `|beta_std| / std(target) < threshold`. A column with zero spread is the
/// intercept if `intercept` names it, and makes the problem ill-posed
/// otherwise. Returns a coefficient per feature column (zero when unused).
pub fn pruned_least_squares(
    features: &Matrix,
    target: &[f64],
    columns: &[usize],
    intercept: Option<usize>,
    threshold: f64,
) -> Result<Vec<f64>> {
    let n = features.rows();
    if target.len() != n {
        return Err(Error::dim("regression target", n, target.len()));
    }
    let nf = n as f64;
    let y_mean = target.iter().sum::<f64>() / nf;
    let y_std = (target.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / nf).sqrt();
    let mut coef = vec![0.0; features.cols()];
    if y_std == 0.0 {
        if let Some(c) = intercept {
            coef[c] = y_mean;
        }
        return Ok(coef);
    }
    let mut active: Vec<usize> = columns
        .iter()
        .copied()
        .filter(|&c| Some(c) != intercept)
        .collect();
    let has_intercept = intercept.is_some_and(|c| columns.contains(&c));
    let mut keep_intercept = has_intercept;
    loop {
        let k = active.len();
        let mut means = vec![0.0; k];
        let mut stds = vec![0.0; k];
        for (a, &c) in active.iter().enumerate() {
            let m = (0..n).map(|r| features[(r, c)]).sum::<f64>() / nf;
            let v = (0..n).map(|r| (features[(r, c)] - m).powi(2)).sum::<f64>() / nf;
            means[a] = m;
            stds[a] = v.sqrt();
            if !(stds[a] > 0.0) {
                return Err(Error::IllPosedLibrary {
                    condition: f64::INFINITY,
                });
            }
        }
        let center = if keep_intercept { 1.0 } else { 0.0 };
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut rhs = vec![0.0; k];
        let mut z = vec![0.0; k];
        for r in 0..n {
            for a in 0..k {
                z[a] = (features[(r, active[a])] - center * means[a]) / stds[a];
            }
            let y = target[r] - center * y_mean;
            for a in 0..k {
                rhs[a] += z[a] * y / nf;
                for b in a..k {
                    gram[(a, b)] += z[a] * z[b] / nf;
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let beta: Vec<f64> = if k == 0 {
            Vec::new()
        } else {
            let eig = SymmetricEigen::new(gram.clone());
            let (lo, hi) = eig
                .eigenvalues
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
                    (lo.min(e), hi.max(e.abs()))
                });
            let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
            if cond > MAX_CONDITION {
                return Err(Error::IllPosedLibrary { condition: cond });
            }
            let g = Matrix::new(k, k, gram.transpose().as_slice().to_vec())?;
            g.solve_spd(&Matrix::column(&rhs))?.into_data()
        };
        let slope: Vec<f64> = beta.iter().zip(&stds).map(|(b, s)| b / s).collect();
        let icpt = if keep_intercept {
            y_mean - slope.iter().zip(&means).map(|(c, m)| c * m).sum::<f64>()
        } else {
            0.0
        };
        let mut pruned = false;
        let next: Vec<usize> = active
            .iter()
            .zip(&beta)
            .filter(|(_, b)| b.abs() / y_std >= threshold)
            .map(|(&c, _)| c)
            .collect();
        if next.len() != active.len() {
            pruned = true;
        }
        if keep_intercept && icpt.abs() / y_std < threshold {
            keep_intercept = false;
            pruned = true;
        }
        if !pruned {
            for (&c, s) in active.iter().zip(&slope) {
                coef[c] = *s;
            }
            if let (true, Some(c)) = (keep_intercept, intercept) {
                coef[c] = icpt;
            }
            return Ok(coef);
        }
        active = next;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgRegModel {
    pub obs_idx: Vec<usize>,
    pub unobs_idx: Vec<usize>,
    pub library: Library,
    /// `d_u1 x M`.
    pub xi1: Matrix,
    /// `d_u2 x M`.
    pub xi2: Matrix,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Per term: positions of its observed factors within `u1`, and the
    /// position of its unobserved factor within `u2`, if any.
    split: Vec<(Vec<usize>, Option<usize>)>,
}

impl CgRegModel {
    pub fn new(
        obs_idx: Vec<usize>,
        unobs_idx: Vec<usize>,
        library: Library,
        xi1: Matrix,
        xi2: Matrix,
        sigma1: Vec<f64>,
        sigma2: Vec<f64>,
    ) -> Result<Self> {
        let m = library.len();
        if xi1.shape() != (obs_idx.len(), m) || xi2.shape() != (unobs_idx.len(), m) {
            return Err(Error::dim("coefficient matrix columns", m, xi1.cols()));
        }
        if sigma1.len() != obs_idx.len() || sigma2.len() != unobs_idx.len() {
            return Err(Error::dim("noise length", obs_idx.len(), sigma1.len()));
        }
        let mut split = Vec::with_capacity(m);
        for b in &library.terms {
            let mut obs = Vec::new();
            let mut unobs = None;
            for &f in &b.factors {
                if let Some(p) = obs_idx.iter().position(|&o| o == f) {
                    obs.push(p);
                } else if let Some(p) = unobs_idx.iter().position(|&u| u == f) {
                    if unobs.replace(p).is_some() {
                        return Err(Error::Config(format!(
                            "basis {} is not affine in the unobserved variables",
                            b.name()
                        )));
                    }
                } else {
                    return Err(Error::Config(format!(
                        "basis {} indexes outside the state",
                        b.name()
                    )));
                }
            }
            split.push((obs, unobs));
        }
        Ok(Self {
            obs_idx,
            unobs_idx,
            library,
            xi1,
            xi2,
            sigma1,
            sigma2,
            split,
        })
    }

    /// Fits on forward-difference targets of `traj`.
    pub fn fit(traj: &Trajectory, spec: &CgRegSpec) -> Result<Self> {
        let targets = forward_differences(&traj.states, traj.dt);
        let states = traj.states.slice_rows(0, traj.len() - 1);
        Self::fit_targets(traj, &states, &targets, spec)
    }

    /// Fits `targets` (rows aligned with `states`). Noise amplitudes come
    /// from the forward-difference residuals of `traj`.
    pub fn fit_targets(
        traj: &Trajectory,
        states: &Matrix,
        targets: &Matrix,
        spec: &CgRegSpec,
    ) -> Result<Self> {
        let dim = traj.dim();
        if states.rows() != targets.rows() || targets.cols() != dim {
            return Err(Error::dim(
                "regression targets",
                states.rows(),
                targets.rows(),
            ));
        }
        let library = Library::conditional_gaussian(dim, &traj.obs_idx, &traj.unobs_idx, spec);
        let features = library.features(states);
        let intercept = library.position(&[]);
        let mut xi = Matrix::zeros(dim, library.len());
        for eq in 0..dim {
            let cols = library.allowed_for(eq);
            let coef = pruned_least_squares(
                &features,
                &targets.col(eq),
                &cols,
                intercept,
                spec.threshold,
            )?;
            xi.row_mut(eq).copy_from_slice(&coef);
        }
        let xi1 = xi.select_rows(&traj.obs_idx);
        let xi2 = xi.select_rows(&traj.unobs_idx);
        let d1 = traj.obs_idx.len();
        let d2 = traj.unobs_idx.len();
        let mut model = Self::new(
            traj.obs_idx.clone(),
            traj.unobs_idx.clone(),
            library,
            xi1,
            xi2,
            vec![1.0; d1],
            vec![1.0; d2],
        )?;
        let sigma = model.residual_sigma(traj)?;
        model.sigma1 = traj.obs_idx.iter().map(|&i| sigma[i]).collect();
        model.sigma2 = traj.unobs_idx.iter().map(|&i| sigma[i]).collect();
        Ok(model)
    }

    /// `sqrt(dt * mean(residual^2))` per full-state dimension.
    pub fn residual_sigma(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let fd = forward_differences(&traj.states, traj.dt);
        let feats = self
            .library
            .features(&traj.states.slice_rows(0, traj.len() - 1));
        let dim = traj.dim();
        let mut acc = vec![0.0; dim];
        for r in 0..fd.rows() {
            let phi = feats.row(r);
            for (k, &i) in self.obs_idx.iter().enumerate() {
                let e = fd[(r, i)] - crate::diffcore::dot(self.xi1.row(k), phi);
                acc[i] += e * e;
            }
            for (k, &i) in self.unobs_idx.iter().enumerate() {
                let e = fd[(r, i)] - crate::diffcore::dot(self.xi2.row(k), phi);
                acc[i] += e * e;
            }
        }
        let n = fd.rows() as f64;
        Ok(acc.into_iter().map(|a| (traj.dt * a / n).sqrt()).collect())
    }

    /// Coefficient of `factors` (full-state indices) in equation `eq`.
    pub fn coefficient(&self, eq: usize, factors: &[usize]) -> Option<f64> {
        let m = self.library.position(factors)?;
        if let Some(k) = self.obs_idx.iter().position(|&o| o == eq) {
            Some(self.xi1[(k, m)])
        } else {
            let k = self.unobs_idx.iter().position(|&u| u == eq)?;
            Some(self.xi2[(k, m)])
        }
    }

    /// Flattened `[f1 | g1 | f2 | g2]` at one observed state.
    fn coefficient_row(&self, u1: &[f64], out: &mut [f64]) {
        let (d1, d2) = (self.obs_idx.len(), self.unobs_idx.len());
        out.iter_mut().for_each(|x| *x = 0.0);
        let (f1, rest) = out.split_at_mut(d1);
        let (g1, rest) = rest.split_at_mut(d1 * d2);
        let (f2, g2) = rest.split_at_mut(d2);
        for (m, (obs, unobs)) in self.split.iter().enumerate() {
            let p: f64 = obs.iter().map(|&i| u1[i]).product();
            match unobs {
                None => {
                    for k in 0..d1 {
                        f1[k] += self.xi1[(k, m)] * p;
                    }
                    for k in 0..d2 {
                        f2[k] += self.xi2[(k, m)] * p;
                    }
                }
                Some(c) => {
                    for k in 0..d1 {
                        g1[k * d2 + c] += self.xi1[(k, m)] * p;
                    }
                    for k in 0..d2 {
                        g2[k * d2 + c] += self.xi2[(k, m)] * p;
                    }
                }
            }
        }
    }
}

struct Bound<'a> {
    model: &'a CgRegModel,
}

impl CgModel for CgRegModel {
    fn kind(&self) -> ModelKind {
        ModelKind::CgReg
    }

    fn dims(&self) -> Dims {
        Dims {
            d_u1: self.obs_idx.len(),
            d_u2: self.unobs_idx.len(),
            d_v: self.unobs_idx.len(),
        }
    }

    fn sigma1(&self) -> &[f64] {
        &self.sigma1
    }

    fn set_sigma1(&mut self, sigma1: Vec<f64>) {
        self.sigma1 = sigma1;
    }

    fn sigma2(&self) -> Vec<f64> {
        self.sigma2.clone()
    }

    fn bind<'a>(&'a self, _tape: &mut Tape, _trainable: bool) -> Box<dyn BoundCg + 'a> {
        Box::new(Bound { model: self })
    }
}

impl BoundCg for Bound<'_> {
    fn encode(&self, _tape: &mut Tape, u2: Var) -> Var {
        u2
    }

    fn decode(&self, _tape: &mut Tape, v: Var) -> Var {
        v
    }

    fn coefficients(&self, tape: &mut Tape, u1: Var) -> CoefSeries {
        let dims = self.model.dims();
        let (d1, d2) = (dims.d_u1, dims.d_u2);
        let x = tape.value(u1).clone();
        let width = dims.coef_len();
        let mut all = Matrix::zeros(x.rows(), width);
        for r in 0..x.rows() {
            self.model.coefficient_row(x.row(r), all.row_mut(r));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let idx: Vec<usize> = (at..at + n).collect();
            at += n;
            tape.constant(all.select_cols(&idx))
        };
        let f1 = take(d1);
        let g1 = take(d1 * d2);
        let f2 = take(d2);
        let g2 = take(d2 * d2);
        CoefSeries {
            coefs: Coefs::Dense { f1, g1, f2, g2 },
            rows: x.rows(),
            dims,
        }
    }

    fn gradients(&self, _grads: &Gradients) -> Result<Vec<Vec<f64>>> {
        Ok(Vec::new())
    }
}
