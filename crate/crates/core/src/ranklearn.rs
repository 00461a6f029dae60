//! Structural RankSVM over partial orders with the AUC loss.
//!
//! Each probe contributes one slack variable (n-slack formulation). The
//! cutting-plane loop asks the separation oracle [`most_violated`] for the
//! partial order that most violates the current model, adds it to the
//! probe's working set and re-solves the working-set QP in the dual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::salmatch::{RankModel, PHI_PER_PATCH};

/// Feature maps of one probe against its relevant and irrelevant gallery
/// images.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    pub relevant: Vec<Vec<f64>>,
    pub irrelevant: Vec<Vec<f64>>,
}

impl ProbeSample {
    pub fn n_pairs(&self) -> usize {
        self.relevant.len() * self.irrelevant.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub rows: usize,
    pub cols: usize,
    pub probes: Vec<ProbeSample>,
}

impl TrainSet {
    pub fn new(rows: usize, cols: usize, probes: Vec<ProbeSample>) -> Result<Self> {
        let dim = rows * cols * PHI_PER_PATCH;
        if probes.is_empty() {
            return Err(Error::InvalidTrainSet("no probes".into()));
        }
        for (u, p) in probes.iter().enumerate() {
            if p.relevant.is_empty() || p.irrelevant.is_empty() {
                return Err(Error::InvalidTrainSet(format!(
                    "probe {u} needs at least one relevant and one irrelevant gallery image"
                )));
            }
            if let Some(bad) = p.relevant.iter().chain(&p.irrelevant).find(|v| v.len() != dim) {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    actual: bad.len(),
                });
            }
        }
        Ok(Self { rows, cols, probes })
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols * PHI_PER_PATCH
    }
}

/// Labels `y[v][v']` in {+1, -1} over relevant x irrelevant pairs, stored
/// row-major by relevant index.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialOrder {
    pub n_relevant: usize,
    pub n_irrelevant: usize,
    pub labels: Vec<i8>,
}

impl PartialOrder {
    /// Every relevant image ranked before every irrelevant one.
    pub fn correct(n_relevant: usize, n_irrelevant: usize) -> Self {
        Self {
            n_relevant,
            n_irrelevant,
            labels: vec![1; n_relevant * n_irrelevant],
        }
    }

    pub fn from_labels(n_relevant: usize, n_irrelevant: usize, labels: Vec<i8>) -> Result<Self> {
        if labels.len() != n_relevant * n_irrelevant {
            return Err(Error::LengthMismatch {
                expected: n_relevant * n_irrelevant,
                actual: labels.len(),
            });
        }
        if labels.iter().any(|&y| y != 1 && y != -1) {
            return Err(Error::DomainMismatch("labels must be +1 or -1".into()));
        }
        Ok(Self {
            n_relevant,
            n_irrelevant,
            labels,
        })
    }

    #[inline]
    pub fn get(&self, v: usize, v_neg: usize) -> i8 {
        self.labels[v * self.n_irrelevant + v_neg]
    }

    fn check_domain(&self, probe: &ProbeSample) -> Result<()> {
        if (self.n_relevant, self.n_irrelevant) != (probe.relevant.len(), probe.irrelevant.len()) {
            return Err(Error::DomainMismatch(format!(
                "order is {}x{}, probe has {}x{}",
                self.n_relevant,
                self.n_irrelevant,
                probe.relevant.len(),
                probe.irrelevant.len()
            )));
        }
        Ok(())
    }
}

/// `sum_{v, v'} y_vv' (Phi_v - Phi_v') / (|S+| |S-|)`
pub fn partial_order_feature(probe: &ProbeSample, y: &PartialOrder) -> Result<Vec<f64>> {
    y.check_domain(probe)?;
    let dim = probe.relevant[0].len();
    let norm = probe.n_pairs() as f64;
    let mut out = vec![0.0; dim];
    // Collapse the double sum: relevant v enters with sum_v' y, irrelevant v'
    // with -sum_v y.
    for (v, phi) in probe.relevant.iter().enumerate() {
        let weight: f64 = (0..y.n_irrelevant).map(|j| y.get(v, j) as f64).sum();
        if weight != 0.0 {
            out.iter_mut().zip(phi).for_each(|(o, x)| *o += weight * x);
        }
    }
    for (j, phi) in probe.irrelevant.iter().enumerate() {
        let weight: f64 = (0..y.n_relevant).map(|v| y.get(v, j) as f64).sum();
        if weight != 0.0 {
            out.iter_mut().zip(phi).for_each(|(o, x)| *o -= weight * x);
        }
    }
    out.iter_mut().for_each(|o| *o /= norm);
    Ok(out)
}

/// Fraction of pairs on which `y_hat` disagrees with `y`. With `y` the
/// correct order this is `sum (1 - y_hat) / (2 |S+| |S-|)`.
pub fn auc_loss(y: &PartialOrder, y_hat: &PartialOrder) -> Result<f64> {
    if (y.n_relevant, y.n_irrelevant) != (y_hat.n_relevant, y_hat.n_irrelevant) {
        return Err(Error::DomainMismatch(format!(
            "{}x{} vs {}x{}",
            y.n_relevant, y.n_irrelevant, y_hat.n_relevant, y_hat.n_irrelevant
        )));
    }
    let swapped: i64 = y
        .labels
        .iter()
        .zip(&y_hat.labels)
        .map(|(&a, &b)| (a as i64 - b as i64).abs())
        .sum();
    Ok(swapped as f64 / (2.0 * y.labels.len() as f64))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gallery_scores(probe: &ProbeSample, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        probe.relevant.iter().map(|phi| dot(w, phi)).collect(),
        probe.irrelevant.iter().map(|phi| dot(w, phi)).collect(),
    )
}

/// `Delta(y*, y) + w . Psi(y)`, the quantity the separation oracle maximises.
pub fn separation_objective(probe: &ProbeSample, w: &[f64], y: &PartialOrder) -> Result<f64> {
    let correct = PartialOrder::correct(probe.relevant.len(), probe.irrelevant.len());
    Ok(auc_loss(&correct, y)? + dot(w, &partial_order_feature(probe, y)?))
}

/// Most violated partial order for the current weights. The objective
/// decomposes over pairs, so each label is chosen independently:
/// `y_vv' = -1` iff `w . (Phi_v - Phi_v') < 1/2`.
pub fn most_violated(probe: &ProbeSample, w: &[f64]) -> PartialOrder {
    let (pos, neg) = gallery_scores(probe, w);
    let labels = pos
        .iter()
        .flat_map(|&sp| neg.iter().map(move |&sn| if sp - sn < 0.5 { -1 } else { 1 }))
        .collect();
    PartialOrder {
        n_relevant: pos.len(),
        n_irrelevant: neg.len(),
        labels,
    }
}

/// Order induced by sorting gallery images by `w . Phi` (ties count as
/// correctly ordered).
pub fn induced_order(probe: &ProbeSample, w: &[f64]) -> PartialOrder {
    let (pos, neg) = gallery_scores(probe, w);
    let labels = pos
        .iter()
        .flat_map(|&sp| neg.iter().map(move |&sn| if sp < sn { -1 } else { 1 }))
        .collect();
    PartialOrder {
        n_relevant: pos.len(),
        n_irrelevant: neg.len(),
        labels,
    }
}

/// `1/2 ||w||^2 + C sum xi`
pub fn evaluate_objective(w: &[f64], slacks: &[f64], c: f64) -> Result<f64> {
    if let Some(&bad) = slacks.iter().find(|&&x| x < 0.0) {
        return Err(Error::NegativeSlack(bad));
    }
    Ok(0.5 * dot(w, w) + c * slacks.iter().sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Trade-off between margin and training loss.
    pub c: f64,
    /// Cutting-plane violation tolerance.
    pub epsilon: f64,
    pub max_iters: usize,
    /// KKT tolerance of the working-set QP.
    pub qp_tolerance: f64,
    pub qp_max_sweeps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c: 100.0,
            epsilon: 1e-3,
            max_iters: 200,
            qp_tolerance: 1e-8,
            qp_max_sweeps: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.epsilon > 0.0) || !(self.qp_tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "C, epsilon and qp_tolerance must be positive".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// One outer iteration of the cutting-plane loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub constraints: usize,
    /// Largest violation found by the separation oracle at the current `w`.
    pub max_violation: f64,
    /// Full primal objective at the current `w`, with exact slacks from the
    /// separation oracle.
    pub primal_objective: f64,
    /// Best full primal objective seen so far.
    pub best_primal: f64,
    /// Primal objective of the working-set problem (a lower bound on the
    /// optimum, non-decreasing as constraints are added).
    pub working_set_objective: f64,
}

impl IterationLog {
    pub fn write_csv<W: std::io::Write>(log: &[IterationLog], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "constraints",
            "max_violation",
            "primal_objective",
            "best_primal",
            "working_set_objective",
        ])?;
        for it in log {
            w.write_record([
                it.iteration.to_string(),
                it.constraints.to_string(),
                it.max_violation.to_string(),
                it.primal_objective.to_string(),
                it.best_primal.to_string(),
                it.working_set_objective.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: RankModel,
    /// Working-set slack per probe.
    pub slacks: Vec<f64>,
    pub log: Vec<IterationLog>,
    pub converged: bool,
    /// Constraints held in the working set, per probe.
    pub working_set: Vec<Vec<PartialOrder>>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),
    /// The iteration budget ran out. The last model is still returned.
    #[error("cutting plane did not converge in {} iterations (max violation {max_violation:e})", .trained.log.len())]
    NotConverged { max_violation: f64, trained: Box<Trained> },
}

impl TrainError {
    /// The partially trained model when the solver ran out of iterations.
    pub fn into_trained(self) -> Option<Trained> {
        match self {
            TrainError::NotConverged { trained, .. } => Some(*trained),
            TrainError::Invalid(_) => None,
        }
    }
}

struct Constraint {
    probe: usize,
    order: PartialOrder,
    /// `delta Psi = Psi(y*) - Psi(y_hat)`
    a: Vec<f64>,
    /// `Delta(y*, y_hat)`
    b: f64,
}

/// Dual of the working-set problem. Each probe owns a simplex
/// `lambda_u0 + sum_{c in u} lambda_c = C` where `lambda_u0` is a slack
/// coordinate with zero feature and zero loss.
struct WorkingSet {
    c: f64,
    constraints: Vec<Constraint>,
    by_probe: Vec<Vec<usize>>,
    lambda: Vec<f64>,
    lambda_idle: Vec<f64>,
    gram: Vec<Vec<f64>>,
    /// `w . a_c` for every constraint
    wa: Vec<f64>,
}

impl WorkingSet {
    fn new(n_probes: usize, c: f64) -> Self {
        Self {
            c,
            constraints: Vec::new(),
            by_probe: vec![Vec::new(); n_probes],
            lambda: Vec::new(),
            lambda_idle: vec![c; n_probes],
            gram: Vec::new(),
            wa: Vec::new(),
        }
    }

    fn add(&mut self, con: Constraint) {
        let row: Vec<f64> = self.constraints.iter().map(|d| dot(&d.a, &con.a)).collect();
        let self_dot = dot(&con.a, &con.a);
        for (g, &v) in self.gram.iter_mut().zip(&row) {
            g.push(v);
        }
        let mut row = row;
        row.push(self_dot);
        let wa = self.lambda.iter().zip(&row).map(|(l, g)| l * g).sum();
        self.gram.push(row);
        self.wa.push(wa);
        self.lambda.push(0.0);
        self.by_probe[con.probe].push(self.constraints.len());
        self.constraints.push(con);
    }

    fn refresh_wa(&mut self) {
        for (k, wa) in self.wa.iter_mut().enumerate() {
            *wa = self.lambda.iter().zip(&self.gram[k]).map(|(l, g)| l * g).sum();
        }
    }

    fn weights(&self, dim: usize) -> Vec<f64> {
        let mut w = vec![0.0; dim];
        for (con, &l) in self.constraints.iter().zip(&self.lambda) {
            if l != 0.0 {
                w.iter_mut().zip(&con.a).for_each(|(wi, ai)| *wi += l * ai);
            }
        }
        w
    }

    /// Working-set slack of probe `u` at the current dual point.
    fn slack(&self, u: usize) -> f64 {
        self.by_probe[u]
            .iter()
            .map(|&k| self.constraints[k].b - self.wa[k])
            .fold(0.0, f64::max)
    }

    fn norm_sq(&self) -> f64 {
        self.lambda.iter().zip(&self.wa).map(|(l, wa)| l * wa).sum()
    }

    /// Pairwise SMO on each probe's simplex until every probe's KKT gap is
    /// below `tol`.
    fn solve(&mut self, tol: f64, max_sweeps: usize) {
        const IDLE: usize = usize::MAX;
        for sweep in 0..max_sweeps {
            if sweep % 64 == 63 {
                self.refresh_wa();
            }
            let mut worst = 0.0f64;
            for u in 0..self.by_probe.len() {
                if self.by_probe[u].is_empty() {
                    continue;
                }
                // gradient of the dual objective w.r.t. each coordinate
                let grad = |k: usize| -> f64 {
                    if k == IDLE {
                        0.0
                    } else {
                        self.constraints[k].b - self.wa[k]
                    }
                };
                let lam = |k: usize| -> f64 {
                    if k == IDLE {
                        self.lambda_idle[u]
                    } else {
                        self.lambda[k]
                    }
                };
                let members = std::iter::once(IDLE).chain(self.by_probe[u].iter().copied());
                let mut up = (IDLE, f64::NEG_INFINITY);
                let mut down = (IDLE, f64::INFINITY);
                for k in members {
                    let g = grad(k);
                    if g > up.1 {
                        up = (k, g);
                    }
                    if lam(k) > 0.0 && g < down.1 {
                        down = (k, g);
                    }
                }
                let gap = up.1 - down.1;
                worst = worst.max(gap);
                if gap <= tol || up.0 == down.0 {
                    continue;
                }
                let (i, j) = (up.0, down.0);
                let gij = |a: usize, b: usize| -> f64 {
                    if a == IDLE || b == IDLE {
                        0.0
                    } else {
                        self.gram[a][b]
                    }
                };
                let curvature = gij(i, i) + gij(j, j) - 2.0 * gij(i, j);
                let mut t = if curvature > 1e-15 {
                    gap / curvature
                } else {
                    f64::INFINITY
                };
                t = t.min(lam(j));
                if t <= 0.0 {
                    continue;
                }
                if i == IDLE {
                    self.lambda_idle[u] += t;
                } else {
                    self.lambda[i] += t;
                }
                if j == IDLE {
                    self.lambda_idle[u] -= t;
                    if self.lambda_idle[u] < 1e-15 * self.c {
                        self.lambda_idle[u] = 0.0;
                    }
                } else {
                    self.lambda[j] -= t;
                    if self.lambda[j] < 1e-15 * self.c {
                        self.lambda[j] = 0.0;
                    }
                }
                for k in 0..self.wa.len() {
                    self.wa[k] += t * (gij(k, i) - gij(k, j));
                }
            }
            if worst <= tol {
                break;
            }
        }
        self.refresh_wa();
    }
}

/// Trains the ranking weights by the n-slack cutting-plane method. Stops
/// once no probe has a constraint violated by more than `epsilon`.
pub fn train(ts: &TrainSet, cfg: &TrainConfig) -> std::result::Result<Trained, TrainError> {
    cfg.validate()?;
    let dim = ts.dim();
    let n = ts.probes.len();
    let correct: Vec<PartialOrder> = ts
        .probes
        .iter()
        .map(|p| PartialOrder::correct(p.relevant.len(), p.irrelevant.len()))
        .collect();
    let psi_correct: Vec<Vec<f64>> = ts
        .probes
        .iter()
        .zip(&correct)
        .map(|(p, y)| partial_order_feature(p, y))
        .collect::<Result<_>>()?;

    let mut ws = WorkingSet::new(n, cfg.c);
    let mut w = vec![0.0; dim];
    let mut log = Vec::new();
    let mut best_primal = f64::INFINITY;
    let mut max_violation = f64::INFINITY;

    for iteration in 0..cfg.max_iters {
        let mut hinge_total = 0.0;
        max_violation = 0.0;
        let mut new_constraints = Vec::new();
        for (u, probe) in ts.probes.iter().enumerate() {
            let y_hat = most_violated(probe, &w);
            let b = auc_loss(&correct[u], &y_hat)?;
            let psi_hat = partial_order_feature(probe, &y_hat)?;
            let a: Vec<f64> = psi_correct[u].iter().zip(&psi_hat).map(|(x, y)| x - y).collect();
            let hinge = (b - dot(&w, &a)).max(0.0);
            hinge_total += hinge;
            let violation = hinge - ws.slack(u);
            max_violation = max_violation.max(violation);
            if violation > cfg.epsilon {
                new_constraints.push(Constraint {
                    probe: u,
                    order: y_hat,
                    a,
                    b,
                });
            }
        }
        let primal = 0.5 * dot(&w, &w) + cfg.c * hinge_total;
        best_primal = best_primal.min(primal);
        let working_set_objective = 0.5 * ws.norm_sq() + cfg.c * (0..n).map(|u| ws.slack(u)).sum::<f64>();
        log.push(IterationLog {
            iteration,
            constraints: ws.constraints.len(),
            max_violation,
            primal_objective: primal,
            best_primal,
            working_set_objective,
        });
        if new_constraints.is_empty() {
            return Ok(finish(ts, &ws, w, log, true));
        }
        for con in new_constraints {
            let duplicate = ws.by_probe[con.probe]
                .iter()
                .any(|&k| ws.constraints[k].order == con.order);
            if !duplicate {
                ws.add(con);
            }
        }
        ws.solve(cfg.qp_tolerance, cfg.qp_max_sweeps);
        w = ws.weights(dim);
    }
    let trained = finish(ts, &ws, w, log, false);
    Err(TrainError::NotConverged {
        max_violation,
        trained: Box::new(trained),
    })
}

fn finish(ts: &TrainSet, ws: &WorkingSet, w: Vec<f64>, log: Vec<IterationLog>, converged: bool) -> Trained {
    let slacks = (0..ts.probes.len()).map(|u| ws.slack(u)).collect();
    let working_set = ws
        .by_probe
        .iter()
        .map(|ks| ks.iter().map(|&k| ws.constraints[k].order.clone()).collect())
        .collect();
    Trained {
        model: RankModel {
            rows: ts.rows,
            cols: ts.cols,
            w,
        },
        slacks,
        log,
        converged,
        working_set,
    }
}
