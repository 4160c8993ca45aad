//! Log-linear MRF over junction-forest cliques: potential construction,
//! calibration, marginal inference, maximum-likelihood fitting against
//! target marginals and forward sampling.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{self, AttributeGraph, Triangulated};
use super::MrfError;
use crate::data::{ContingencyHistogram, HistKind, Marginal, Schema};

/// Dense tabular factor over sorted attribute ids; values are row-major
/// with the first attribute most significant, matching cell indexing.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Factor {
    pub vars: Vec<usize>,
    pub sizes: Vec<usize>,
    pub values: Vec<f64>,
}

impl Factor {
    pub fn cell_count(&self) -> usize {
        self.values.len()
    }

    fn stride_of(&self, var: usize) -> Option<usize> {
        let pos = self.vars.iter().position(|&v| v == var)?;
        Some(self.sizes[pos + 1..].iter().product())
    }

    /// Index increments per variable of `outer`, for projecting an outer
    /// tuple onto this factor (0 for absent variables).
    fn strides_for(&self, outer: &[usize]) -> Vec<usize> {
        outer
            .iter()
            .map(|&v| self.stride_of(v).unwrap_or(0))
            .collect()
    }

    pub fn product(factors: &[&Factor], schema: &Schema) -> Factor {
        let mut vars: Vec<usize> = factors.iter().flat_map(|f| f.vars.iter().copied()).collect();
        vars.sort_unstable();
        vars.dedup();
        let sizes: Vec<usize> = vars.iter().map(|&v| schema.domain_size(v)).collect();
        let total: usize = sizes.iter().product();
        let strides: Vec<Vec<usize>> = factors.iter().map(|f| f.strides_for(&vars)).collect();
        let mut values = vec![0.0; total];
        let mut tuple = vec![0usize; vars.len()];
        let mut idxs = vec![0usize; factors.len()];
        for (cell, slot) in values.iter_mut().enumerate() {
            let mut acc = 1.0;
            for (f, &idx) in factors.iter().zip(&idxs) {
                acc *= f.values[idx];
            }
            *slot = acc;
            if cell + 1 < total {
                // Odometer increment keeps per-factor indices in step.
                for pos in (0..vars.len()).rev() {
                    tuple[pos] += 1;
                    for (fi, stride) in strides.iter().enumerate() {
                        idxs[fi] += stride[pos];
                    }
                    if tuple[pos] < sizes[pos] {
                        break;
                    }
                    for (fi, stride) in strides.iter().enumerate() {
                        idxs[fi] -= stride[pos] * tuple[pos];
                    }
                    tuple[pos] = 0;
                }
            }
        }
        Factor {
            vars,
            sizes,
            values,
        }
    }

    /// Sums out every variable not in `keep` (keep must be a subset).
    pub fn marginalize(&self, keep: &[usize]) -> Factor {
        let keep_sizes: Vec<usize> = keep
            .iter()
            .map(|v| self.sizes[self.vars.iter().position(|x| x == v).unwrap()])
            .collect();
        let total: usize = keep_sizes.iter().product();
        let mut values = vec![0.0; total];
        let out_strides: Vec<usize> = {
            let tmp = Factor {
                vars: keep.to_vec(),
                sizes: keep_sizes.clone(),
                values: Vec::new(),
            };
            self.vars
                .iter()
                .map(|&v| tmp.stride_of(v).unwrap_or(0))
                .collect()
        };
        let mut tuple = vec![0usize; self.vars.len()];
        let mut out_idx = 0usize;
        for (cell, &v) in self.values.iter().enumerate() {
            values[out_idx] += v;
            if cell + 1 < self.values.len() {
                for pos in (0..self.vars.len()).rev() {
                    tuple[pos] += 1;
                    out_idx += out_strides[pos];
                    if tuple[pos] < self.sizes[pos] {
                        break;
                    }
                    out_idx -= out_strides[pos] * tuple[pos];
                    tuple[pos] = 0;
                }
            }
        }
        Factor {
            vars: keep.to_vec(),
            sizes: keep_sizes,
            values,
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Restricts to the cells matching the given variable assignment; the
    /// fixed variables drop out.
    pub fn condition(&self, assignment: &BTreeMap<usize, u32>) -> Factor {
        let keep: Vec<usize> = self
            .vars
            .iter()
            .copied()
            .filter(|v| !assignment.contains_key(v))
            .collect();
        let keep_sizes: Vec<usize> = keep
            .iter()
            .map(|v| self.sizes[self.vars.iter().position(|x| x == v).unwrap()])
            .collect();
        let total: usize = keep_sizes.iter().product();
        let mut values = vec![0.0; total];
        let mut base = 0usize;
        for (pos, &v) in self.vars.iter().enumerate() {
            if let Some(&val) = assignment.get(&v) {
                let stride: usize = self.sizes[pos + 1..].iter().product();
                base += stride * val as usize;
            }
        }
        let keep_strides: Vec<usize> = keep
            .iter()
            .map(|&v| self.stride_of(v).unwrap())
            .collect();
        let mut tuple = vec![0usize; keep.len()];
        for (out_cell, slot) in values.iter_mut().enumerate() {
            let mut idx = base;
            for (pos, &t) in tuple.iter().enumerate() {
                idx += keep_strides[pos] * t;
            }
            *slot = self.values[idx];
            if out_cell + 1 < total {
                for pos in (0..keep.len()).rev() {
                    tuple[pos] += 1;
                    if tuple[pos] < keep_sizes[pos] {
                        break;
                    }
                    tuple[pos] = 0;
                }
            }
        }
        Factor {
            vars: keep,
            sizes: keep_sizes,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub initial_step: f64,
    /// Stop once the summed L1 gap over target marginals falls below this.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            initial_step: 2.0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Summed L1 gap between inferred and target marginals at exit.
    pub l1_gap: f64,
    pub converged: bool,
}

/// Calibrated clique beliefs plus the log partition function.
pub(crate) struct Calibration {
    pub beliefs: Vec<Factor>,
    pub log_z: f64,
}

/// Log-linear model Pr[x] proportional to exp(sum over marginals of
/// Theta_M[x_M]), parameterized per marginal cell and inferred through its
/// junction forest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrfModel {
    schema: Schema,
    tri: Triangulated,
    marginals: Vec<Marginal>,
    theta: Vec<Vec<f64>>,
    assign: Vec<usize>,
    fit_warning: bool,
}

impl MrfModel {
    /// Builds a model over the triangulation of `graph` (extended to cover
    /// every schema attribute). Each marginal must fit inside a clique; if
    /// one does not, its attributes are connected and the graph is
    /// re-triangulated.
    pub fn new(
        schema: Schema,
        graph: &AttributeGraph,
        marginals: Vec<Marginal>,
    ) -> Result<Self, MrfError> {
        let mut graph = graph.clone();
        for a in 0..schema.attribute_count() {
            graph.add_node(a);
        }
        for m in &marginals {
            m.validate(&schema)?;
        }
        let mut tri = graph::triangulate(&graph);
        if marginals
            .iter()
            .any(|m| tri.containing_clique(m.attributes()).is_none())
        {
            for m in &marginals {
                for (i, &a) in m.attributes().iter().enumerate() {
                    for &b in &m.attributes()[i + 1..] {
                        graph.add_edge(a, b);
                    }
                }
            }
            tri = graph::triangulate(&graph);
        }
        let assign = marginals
            .iter()
            .map(|m| {
                tri.containing_clique(m.attributes())
                    .ok_or_else(|| MrfError::UnknownTarget(m.attributes().to_vec()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let theta = marginals
            .iter()
            .map(|m| vec![0.0; m.cell_count(&schema).unwrap_or(0)])
            .collect();
        Ok(Self {
            schema,
            tri,
            marginals,
            theta,
            assign,
            fit_warning: false,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn triangulated(&self) -> &Triangulated {
        &self.tri
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn theta(&self) -> &[Vec<f64>] {
        &self.theta
    }

    pub fn theta_len(&self) -> usize {
        self.theta.iter().map(Vec::len).sum()
    }

    pub fn fit_warning(&self) -> bool {
        self.fit_warning
    }

    pub fn set_theta(&mut self, theta: Vec<Vec<f64>>) -> Result<(), MrfError> {
        if theta.len() != self.marginals.len()
            || theta
                .iter()
                .zip(&self.theta)
                .any(|(new, old)| new.len() != old.len())
        {
            return Err(MrfError::ThetaShapeMismatch);
        }
        self.theta = theta;
        Ok(())
    }

    /// Extends the marginal set (for refinement rounds); new entries start
    /// at zero and existing parameters are kept. Re-triangulates if needed.
    pub fn add_marginals(&mut self, extra: Vec<Marginal>) -> Result<(), MrfError> {
        let mut marginals = self.marginals.clone();
        let mut theta = self.theta.clone();
        for m in extra {
            if marginals.contains(&m) {
                continue;
            }
            m.validate(&self.schema)?;
            theta.push(vec![0.0; m.cell_count(&self.schema)?]);
            marginals.push(m);
        }
        let mut rebuilt = MrfModel::new(self.schema.clone(), &self.tri.graph, marginals)?;
        rebuilt.theta = theta;
        rebuilt.fit_warning = self.fit_warning;
        *self = rebuilt;
        Ok(())
    }

    /// Clique log-potential: sum of assigned theta blocks, broadcast over
    /// the clique cells, shifted by its max for stable exponentiation.
    fn potentials(&self) -> (Vec<Factor>, f64) {
        let mut log_offset_total = 0.0;
        let mut out = Vec::with_capacity(self.tri.cliques.len());
        for (ci, clique) in self.tri.cliques.iter().enumerate() {
            let sizes: Vec<usize> = clique.iter().map(|&a| self.schema.domain_size(a)).collect();
            let total: usize = sizes.iter().product();
            let mut logs = vec![0.0f64; total];
            for (mi, &assigned) in self.assign.iter().enumerate() {
                if assigned != ci {
                    continue;
                }
                let m = &self.marginals[mi];
                let strides: Vec<usize> = m
                    .attributes()
                    .iter()
                    .map(|a| {
                        let pos = clique.iter().position(|x| x == a).unwrap();
                        sizes[pos + 1..].iter().product()
                    })
                    .collect();
                let m_sizes: Vec<usize> = m
                    .attributes()
                    .iter()
                    .map(|&a| self.schema.domain_size(a))
                    .collect();
                let m_cells: usize = m_sizes.iter().product();
                // For each marginal cell, add theta to every matching
                // clique cell.
                for mc in 0..m_cells {
                    let mut rest = mc;
                    let mut base = 0usize;
                    for (pos, &u) in m_sizes.iter().enumerate().rev() {
                        base += (rest % u) * strides[pos];
                        rest /= u;
                    }
                    let th = self.theta[mi][mc];
                    // Enumerate the free variables of the clique.
                    add_broadcast(&mut logs, base, &sizes, clique, m.attributes(), th);
                }
            }
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let max = if max.is_finite() { max } else { 0.0 };
            log_offset_total += max;
            let values: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
            out.push(Factor {
                vars: clique.clone(),
                sizes,
                values,
            });
        }
        (out, log_offset_total)
    }

    fn clique_neighbors(&self) -> Vec<Vec<(usize, Vec<usize>)>> {
        let mut nbrs: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); self.tri.cliques.len()];
        for (a, b, sep) in &self.tri.tree_edges {
            nbrs[*a].push((*b, sep.clone()));
            nbrs[*b].push((*a, sep.clone()));
        }
        nbrs
    }

    /// Shafer-Shenoy propagation with normalized messages; beliefs are the
    /// exact clique marginals and log_z the log partition function.
    pub(crate) fn calibrate(&self) -> Result<Calibration, MrfError> {
        let (potentials, log_offset) = self.potentials();
        let nbrs = self.clique_neighbors();
        let n = potentials.len();
        // BFS forest with deterministic roots.
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut order: Vec<usize> = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut roots = Vec::new();
        for root in 0..n {
            if seen[root] {
                continue;
            }
            roots.push(root);
            seen[root] = true;
            let mut queue = std::collections::VecDeque::from([root]);
            while let Some(c) = queue.pop_front() {
                order.push(c);
                for (nb, _) in &nbrs[c] {
                    if !seen[*nb] {
                        seen[*nb] = true;
                        parent[*nb] = Some(c);
                        queue.push_back(*nb);
                    }
                }
            }
        }
        // Collect: child -> parent messages in reverse BFS order.
        let mut msg_up: Vec<Option<(Factor, f64)>> = (0..n).map(|_| None).collect();
        for &c in order.iter().rev() {
            let Some(p) = parent[c] else { continue };
            let sep = nbrs[c]
                .iter()
                .find(|(nb, _)| *nb == p)
                .map(|(_, s)| s.clone())
                .unwrap();
            let mut parts: Vec<&Factor> = vec![&potentials[c]];
            let mut scale = 0.0;
            for (nb, _) in &nbrs[c] {
                if parent[*nb] == Some(c) {
                    let (f, s) = msg_up[*nb].as_ref().unwrap();
                    parts.push(f);
                    scale += s;
                }
            }
            let prod = Factor::product(&parts, &self.schema);
            let mut msg = prod.marginalize(&sep);
            let sum = msg.sum();
            if !(sum.is_finite() && sum > 0.0) {
                return Err(MrfError::Unnormalizable);
            }
            for v in &mut msg.values {
                *v /= sum;
            }
            msg_up[c] = Some((msg, scale + sum.ln()));
        }
        // log Z accumulates at the roots.
        let mut log_z = log_offset;
        for &root in &roots {
            let mut parts: Vec<&Factor> = vec![&potentials[root]];
            let mut scale = 0.0;
            for (nb, _) in &nbrs[root] {
                if parent[*nb] == Some(root) {
                    let (f, s) = msg_up[*nb].as_ref().unwrap();
                    parts.push(f);
                    scale += s;
                }
            }
            let total = Factor::product(&parts, &self.schema).sum();
            if !(total.is_finite() && total > 0.0) {
                return Err(MrfError::Unnormalizable);
            }
            log_z += total.ln() + scale;
        }
        // Distribute: parent -> child messages in BFS order, then beliefs.
        let mut msg_down: Vec<Option<Factor>> = (0..n).map(|_| None).collect();
        for &c in &order {
            for (nb, sep) in &nbrs[c] {
                if parent[*nb] != Some(c) {
                    continue;
                }
                // Message to child nb: potential times every incoming
                // message except the one from nb.
                let mut parts: Vec<&Factor> = vec![&potentials[c]];
                for (other, _) in &nbrs[c] {
                    if *other == *nb {
                        continue;
                    }
                    if parent[*other] == Some(c) {
                        parts.push(&msg_up[*other].as_ref().unwrap().0);
                    } else if parent[c] == Some(*other) {
                        parts.push(msg_down[c].as_ref().unwrap());
                    }
                }
                let prod = Factor::product(&parts, &self.schema);
                let mut msg = prod.marginalize(sep);
                let sum = msg.sum();
                if !(sum.is_finite() && sum > 0.0) {
                    return Err(MrfError::Unnormalizable);
                }
                for v in &mut msg.values {
                    *v /= sum;
                }
                msg_down[*nb] = Some(msg);
            }
        }
        let mut beliefs = Vec::with_capacity(n);
        for c in 0..n {
            let mut parts: Vec<&Factor> = vec![&potentials[c]];
            for (nb, _) in &nbrs[c] {
                if parent[*nb] == Some(c) {
                    parts.push(&msg_up[*nb].as_ref().unwrap().0);
                } else if parent[c] == Some(*nb) {
                    parts.push(msg_down[c].as_ref().unwrap());
                }
            }
            let mut belief = Factor::product(&parts, &self.schema);
            let sum = belief.sum();
            if !(sum.is_finite() && sum > 0.0) {
                return Err(MrfError::Unnormalizable);
            }
            for v in &mut belief.values {
                *v /= sum;
            }
            beliefs.push(belief);
        }
        Ok(Calibration { beliefs, log_z })
    }

    /// Exact marginal of the model distribution, as a distribution.
    /// Marginals inside a clique read off the calibrated belief; others go
    /// through variable elimination over the clique potentials.
    pub fn infer_marginal(&self, marginal: &Marginal) -> Result<ContingencyHistogram, MrfError> {
        marginal
            .validate(&self.schema)
            .map_err(|_| MrfError::OutsideSchema(marginal.attributes().to_vec()))?;
        let calibration = self.calibrate()?;
        self.infer_with(&calibration, marginal)
    }

    pub(crate) fn infer_with(
        &self,
        calibration: &Calibration,
        marginal: &Marginal,
    ) -> Result<ContingencyHistogram, MrfError> {
        if let Some(ci) = self.tri.containing_clique(marginal.attributes()) {
            let f = calibration.beliefs[ci].marginalize(marginal.attributes());
            return ContingencyHistogram::new(
                marginal.clone(),
                f.values,
                HistKind::Distribution,
                &self.schema,
            )
            .map_err(MrfError::Data);
        }
        self.infer_by_elimination(marginal)
    }

    /// Min-degree variable elimination over the clique potentials.
    fn infer_by_elimination(&self, marginal: &Marginal) -> Result<ContingencyHistogram, MrfError> {
        let (potentials, _) = self.potentials();
        let mut factors: Vec<Factor> = potentials;
        let keep: Vec<usize> = marginal.attributes().to_vec();
        let mut to_eliminate: Vec<usize> = (0..self.schema.attribute_count())
            .filter(|a| !keep.contains(a))
            .collect();
        while !to_eliminate.is_empty() {
            // Min-degree: the variable whose elimination touches the
            // smallest combined scope.
            let (pos, _) = to_eliminate
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let mut scope: Vec<usize> = Vec::new();
                    for f in factors.iter().filter(|f| f.vars.contains(&v)) {
                        scope.extend(f.vars.iter().copied());
                    }
                    scope.sort_unstable();
                    scope.dedup();
                    (i, scope.len())
                })
                .min_by_key(|&(i, deg)| (deg, i))
                .unwrap();
            let var = to_eliminate.remove(pos);
            let (touching, rest): (Vec<Factor>, Vec<Factor>) =
                factors.into_iter().partition(|f| f.vars.contains(&var));
            factors = rest;
            if touching.is_empty() {
                continue;
            }
            let refs: Vec<&Factor> = touching.iter().collect();
            let prod = Factor::product(&refs, &self.schema);
            let keep_vars: Vec<usize> = prod.vars.iter().copied().filter(|&v| v != var).collect();
            factors.push(prod.marginalize(&keep_vars));
        }
        let refs: Vec<&Factor> = factors.iter().collect();
        let mut result = Factor::product(&refs, &self.schema).marginalize(&keep);
        let sum = result.sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(MrfError::Unnormalizable);
        }
        for v in &mut result.values {
            *v /= sum;
        }
        ContingencyHistogram::new(
            marginal.clone(),
            result.values,
            HistKind::Distribution,
            &self.schema,
        )
        .map_err(MrfError::Data)
    }

    /// Fits theta so inferred marginals match the targets, by gradient
    /// descent on the scaled negative log-likelihood with Armijo
    /// backtracking; each accepted step multiplies the clique potentials by
    /// exp(-step * gradient). Targets are normalized internally (negatives
    /// clamped, uniform fallback for empty mass). Returns best-so-far with
    /// a warning flag when the iteration cap is hit.
    pub fn fit_theta(
        &mut self,
        targets: &BTreeMap<Marginal, ContingencyHistogram>,
        options: FitOptions,
    ) -> Result<FitReport, MrfError> {
        let mut normalized: Vec<(usize, Vec<f64>)> = Vec::new();
        for (m, hist) in targets {
            let mi = self
                .marginals
                .iter()
                .position(|x| x == m)
                .ok_or_else(|| MrfError::UnknownTarget(m.attributes().to_vec()))?;
            let mut cells: Vec<f64> = hist.cells().iter().map(|&c| c.max(0.0)).collect();
            let sum: f64 = cells.iter().sum();
            if sum > 0.0 {
                for c in &mut cells {
                    *c /= sum;
                }
            } else {
                let u = 1.0 / cells.len() as f64;
                cells.iter_mut().for_each(|c| *c = u);
            }
            normalized.push((mi, cells));
        }

        let objective = |model: &MrfModel| -> Result<(f64, Vec<(usize, Vec<f64>)>, f64), MrfError> {
            let calibration = model.calibrate()?;
            let mut value = calibration.log_z;
            let mut grads = Vec::with_capacity(normalized.len());
            let mut l1 = 0.0;
            for (mi, p) in &normalized {
                let mu = model
                    .infer_with(&calibration, &model.marginals[*mi])?
                    .cells()
                    .to_vec();
                for (t, &pk) in model.theta[*mi].iter().zip(p.iter()) {
                    value -= pk * t;
                }
                let grad: Vec<f64> = mu.iter().zip(p.iter()).map(|(&m, &pk)| m - pk).collect();
                l1 += grad.iter().map(|g| g.abs()).sum::<f64>();
                grads.push((*mi, grad));
            }
            Ok((value, grads, l1))
        };

        let (mut value, mut grads, mut l1) = objective(self)?;
        let mut best_theta = self.theta.clone();
        let mut best_l1 = l1;
        let mut step = options.initial_step;
        let mut iterations = 0;
        let mut converged = l1 < options.tolerance;
        while iterations < options.max_iterations && !converged {
            iterations += 1;
            let grad_sq: f64 = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|g| g * g)
                .sum();
            if grad_sq < 1e-24 {
                converged = true;
                break;
            }
            let base_theta = self.theta.clone();
            let mut accepted = false;
            for _ in 0..50 {
                for (mi, g) in &grads {
                    for (t, (&b, &gk)) in self.theta[*mi]
                        .iter_mut()
                        .zip(base_theta[*mi].iter().zip(g.iter()))
                    {
                        *t = b - step * gk;
                    }
                }
                match objective(self) {
                    Ok((new_value, new_grads, new_l1))
                        if new_value <= value - 1e-4 * step * grad_sq =>
                    {
                        value = new_value;
                        grads = new_grads;
                        l1 = new_l1;
                        accepted = true;
                        break;
                    }
                    _ => {
                        step *= 0.5;
                        if step < 1e-12 {
                            break;
                        }
                    }
                }
            }
            if !accepted {
                self.theta = base_theta;
                break;
            }
            step = (step * 1.6).min(16.0);
            if l1 < best_l1 {
                best_l1 = l1;
                best_theta = self.theta.clone();
            }
            if l1 < options.tolerance {
                converged = true;
            }
        }
        if best_l1 < l1 {
            self.theta = best_theta;
            l1 = best_l1;
        }
        self.fit_warning = !converged;
        Ok(FitReport {
            iterations,
            l1_gap: l1,
            converged,
        })
    }

    /// Draws rows by forward sampling over the junction forest: each root
    /// clique from its belief, each child conditioned on its separator.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<crate::data::Dataset, MrfError> {
        let calibration = self.calibrate()?;
        let nbrs = self.clique_neighbors();
        let n_cliques = self.tri.cliques.len();
        let mut parent: Vec<Option<usize>> = vec![None; n_cliques];
        let mut order: Vec<usize> = Vec::new();
        let mut seen = vec![false; n_cliques];
        for root in 0..n_cliques {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let mut queue = std::collections::VecDeque::from([root]);
            while let Some(c) = queue.pop_front() {
                order.push(c);
                for (nb, _) in &nbrs[c] {
                    if !seen[*nb] {
                        seen[*nb] = true;
                        parent[*nb] = Some(c);
                        queue.push_back(*nb);
                    }
                }
            }
        }
        let d = self.schema.attribute_count();
        let mut flat = Vec::with_capacity(count * d);
        for _ in 0..count {
            let mut assignment: BTreeMap<usize, u32> = BTreeMap::new();
            for &c in &order {
                let belief = &calibration.beliefs[c];
                let fixed: BTreeMap<usize, u32> = belief
                    .vars
                    .iter()
                    .filter_map(|v| assignment.get(v).map(|&x| (*v, x)))
                    .collect();
                let conditional = if fixed.is_empty() {
                    belief.clone()
                } else {
                    belief.condition(&fixed)
                };
                if conditional.vars.is_empty() {
                    continue;
                }
                let total = conditional.sum();
                if !(total.is_finite() && total > 0.0) {
                    return Err(MrfError::Unnormalizable);
                }
                let mut u = rng.random::<f64>() * total;
                let mut chosen = conditional.cell_count() - 1;
                for (i, &p) in conditional.values.iter().enumerate() {
                    u -= p;
                    if u <= 0.0 {
                        chosen = i;
                        break;
                    }
                }
                let mut rest = chosen;
                for (pos, &var) in conditional.vars.iter().enumerate().rev() {
                    let size = conditional.sizes[pos];
                    assignment.insert(var, (rest % size) as u32);
                    rest /= size;
                }
            }
            for a in 0..d {
                flat.push(*assignment.get(&a).expect("all attributes covered"));
            }
        }
        crate::data::Dataset::from_flat(self.schema.clone(), flat).map_err(MrfError::Data)
    }
}

/// Adds `value` to every clique cell whose marginal coordinates match the
/// base offset, enumerating the clique variables outside the marginal.
fn add_broadcast(
    logs: &mut [f64],
    base: usize,
    sizes: &[usize],
    clique: &[usize],
    marginal_attrs: &[usize],
    value: f64,
) {
    let free: Vec<usize> = (0..clique.len())
        .filter(|&i| !marginal_attrs.contains(&clique[i]))
        .collect();
    if free.is_empty() {
        logs[base] += value;
        return;
    }
    let free_sizes: Vec<usize> = free.iter().map(|&i| sizes[i]).collect();
    let free_strides: Vec<usize> = free
        .iter()
        .map(|&i| sizes[i + 1..].iter().product::<usize>())
        .collect();
    let total: usize = free_sizes.iter().product();
    let mut tuple = vec![0usize; free.len()];
    let mut offset = 0usize;
    for cell in 0..total {
        logs[base + offset] += value;
        if cell + 1 < total {
            for pos in (0..free.len()).rev() {
                tuple[pos] += 1;
                offset += free_strides[pos];
                if tuple[pos] < free_sizes[pos] {
                    break;
                }
                offset -= free_strides[pos] * tuple[pos];
                tuple[pos] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle: enumerate every tuple, weight by
    /// exp(sum of theta), normalize, marginalize. Independent of the
    /// junction-tree path.
    fn brute_force_marginal(model: &MrfModel, marginal: &Marginal) -> Vec<f64> {
        let schema = model.schema();
        let d = schema.attribute_count();
        let sizes: Vec<usize> = (0..d).map(|a| schema.domain_size(a)).collect();
        let total: usize = sizes.iter().product();
        let m_cells = marginal.cell_count(schema).unwrap();
        let mut out = vec![0.0; m_cells];
        let mut z = 0.0;
        for cell in 0..total {
            let mut rest = cell;
            let mut tuple = vec![0u32; d];
            for a in (0..d).rev() {
                tuple[a] = (rest % sizes[a]) as u32;
                rest /= sizes[a];
            }
            let mut log_w = 0.0;
            for (mi, m) in model.marginals().iter().enumerate() {
                let sub: Vec<u32> = m.attributes().iter().map(|&a| tuple[a]).collect();
                let idx = crate::data::cell_index(&sub, m, schema).unwrap();
                log_w += model.theta()[mi][idx];
            }
            let w = log_w.exp();
            z += w;
            let sub: Vec<u32> = marginal.attributes().iter().map(|&a| tuple[a]).collect();
            let idx = crate::data::cell_index(&sub, marginal, schema).unwrap();
            out[idx] += w;
        }
        out.iter().map(|&x| x / z).collect()
    }

    fn random_model(seed: u64, d: usize) -> MrfModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = Schema::from_sizes(&vec![2; d]).unwrap();
        let mut graph = AttributeGraph::for_schema(&schema);
        for a in 0..d {
            for b in a + 1..d {
                if rng.random::<f64>() < 0.3 {
                    graph.add_edge(a, b);
                }
            }
        }
        let tri = graph::triangulate(&graph);
        let mut marginals = Vec::new();
        for clique in &tri.cliques {
            if clique.len() >= 2 {
                marginals.push(Marginal::new(clique[..2.min(clique.len())].to_vec()).unwrap());
            } else {
                marginals.push(Marginal::single(clique[0]));
            }
        }
        marginals.sort();
        marginals.dedup();
        let mut model = MrfModel::new(schema, &graph, marginals).unwrap();
        let theta: Vec<Vec<f64>> = model
            .theta()
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                    .collect()
            })
            .collect();
        model.set_theta(theta).unwrap();
        model
    }

    #[test]
    fn empty_model_is_uniform() {
        let schema = Schema::from_sizes(&[2, 3]).unwrap();
        let graph = AttributeGraph::for_schema(&schema);
        let model = MrfModel::new(schema, &graph, vec![]).unwrap();
        let h = model.infer_marginal(&Marginal::new(vec![0, 1]).unwrap()).unwrap();
        for &c in h.cells() {
            assert!((c - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..25 {
            let d = 3 + (seed as usize % 6);
            let model = random_model(seed, d);
            for _ in 0..2 {
                let arity = 1 + (rng.random::<u32>() % 3) as usize;
                let mut attrs: Vec<usize> = (0..d).collect();
                for i in (1..attrs.len()).rev() {
                    let j = (rng.random::<u32>() as usize) % (i + 1);
                    attrs.swap(i, j);
                }
                let marginal = Marginal::new(attrs[..arity.min(d)].to_vec()).unwrap();
                let got = model.infer_marginal(&marginal).unwrap();
                let want = brute_force_marginal(&model, &marginal);
                for (g, w) in got.cells().iter().zip(&want) {
                    assert!((g - w).abs() < 1e-9, "seed {seed}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn marginal_of_marginal_is_consistent() {
        let model = random_model(7, 6);
        let big = Marginal::new(vec![0, 2, 4]).unwrap();
        let small = Marginal::new(vec![0, 4]).unwrap();
        let h_big = model.infer_marginal(&big).unwrap();
        let via_sum = h_big.marginalize_to(&small, model.schema()).unwrap();
        let direct = model.infer_marginal(&small).unwrap();
        for (a, b) in via_sum.cells().iter().zip(direct.cells()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_single_binary_attribute() {
        let schema = Schema::from_sizes(&[2]).unwrap();
        let graph = AttributeGraph::for_schema(&schema);
        let m = Marginal::single(0);
        let mut model = MrfModel::new(schema.clone(), &graph, vec![m.clone()]).unwrap();
        let target =
            ContingencyHistogram::new(m.clone(), vec![30.0, 70.0], HistKind::Counts, &schema)
                .unwrap();
        let report = model
            .fit_theta(&BTreeMap::from([(m.clone(), target)]), FitOptions::default())
            .unwrap();
        assert!(report.converged, "gap {}", report.l1_gap);
        let h = model.infer_marginal(&m).unwrap();
        assert!((h.cells()[0] - 0.3).abs() < 1e-3);
        assert!((h.cells()[1] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn fit_chain_recovers_targets() {
        // A - B - C chain over binary attributes with targets taken from a
        // known joint.
        let schema = Schema::from_sizes(&[2, 2, 2]).unwrap();
        let mut graph = AttributeGraph::for_schema(&schema);
        graph.add_edge(0, 1);
        graph.add_edge(1, 2);
        let m_ab = Marginal::new(vec![0, 1]).unwrap();
        let m_bc = Marginal::new(vec![1, 2]).unwrap();
        // Joint: P(a,b,c) = P(a) P(b|a) P(c|b) with strong couplings.
        let pa = [0.4, 0.6];
        let pba = [[0.8, 0.2], [0.3, 0.7]];
        let pcb = [[0.9, 0.1], [0.25, 0.75]];
        let mut t_ab = vec![0.0; 4];
        let mut t_bc = vec![0.0; 4];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let p = pa[a] * pba[a][b] * pcb[b][c];
                    t_ab[a * 2 + b] += p;
                    t_bc[b * 2 + c] += p;
                }
            }
        }
        let n = 1000.0;
        let targets = BTreeMap::from([
            (
                m_ab.clone(),
                ContingencyHistogram::new(
                    m_ab.clone(),
                    t_ab.iter().map(|p| p * n).collect(),
                    HistKind::Counts,
                    &schema,
                )
                .unwrap(),
            ),
            (
                m_bc.clone(),
                ContingencyHistogram::new(
                    m_bc.clone(),
                    t_bc.iter().map(|p| p * n).collect(),
                    HistKind::Counts,
                    &schema,
                )
                .unwrap(),
            ),
        ]);
        let mut model =
            MrfModel::new(schema, &graph, vec![m_ab.clone(), m_bc.clone()]).unwrap();
        let report = model.fit_theta(&targets, FitOptions::default()).unwrap();
        assert!(report.l1_gap < 2e-3, "gap {}", report.l1_gap);
        let h_ab = model.infer_marginal(&m_ab).unwrap();
        let h_bc = model.infer_marginal(&m_bc).unwrap();
        let l1_ab: f64 = h_ab
            .cells()
            .iter()
            .zip(&t_ab)
            .map(|(g, w)| (g - w).abs())
            .sum();
        let l1_bc: f64 = h_bc
            .cells()
            .iter()
            .zip(&t_bc)
            .map(|(g, w)| (g - w).abs())
            .sum();
        assert!(l1_ab < 1e-3, "l1_ab {l1_ab}");
        assert!(l1_bc < 1e-3, "l1_bc {l1_bc}");
    }

    #[test]
    fn fit_uniform_targets_is_immediate() {
        let schema = Schema::from_sizes(&[2, 2]).unwrap();
        let mut graph = AttributeGraph::for_schema(&schema);
        graph.add_edge(0, 1);
        let m = Marginal::new(vec![0, 1]).unwrap();
        let target =
            ContingencyHistogram::new(m.clone(), vec![25.0; 4], HistKind::Counts, &schema)
                .unwrap();
        let mut model = MrfModel::new(schema, &graph, vec![m.clone()]).unwrap();
        let report = model
            .fit_theta(&BTreeMap::from([(m, target)]), FitOptions::default())
            .unwrap();
        assert!(report.l1_gap < 1e-6);
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn fit_loss_is_monotone() {
        // Track the L1 gap across capped re-fits; each accepted step cannot
        // worsen the NLL, and the reported gap never regresses past the
        // best seen.
        let schema = Schema::from_sizes(&[2, 2, 2]).unwrap();
        let mut graph = AttributeGraph::for_schema(&schema);
        graph.add_edge(0, 1);
        graph.add_edge(1, 2);
        let m_ab = Marginal::new(vec![0, 1]).unwrap();
        let m_bc = Marginal::new(vec![1, 2]).unwrap();
        let t_ab = ContingencyHistogram::new(
            m_ab.clone(),
            vec![45.0, 5.0, 5.0, 45.0],
            HistKind::Counts,
            &schema,
        )
        .unwrap();
        let t_bc = ContingencyHistogram::new(
            m_bc.clone(),
            vec![40.0, 10.0, 15.0, 35.0],
            HistKind::Counts,
            &schema,
        )
        .unwrap();
        let targets = BTreeMap::from([(m_ab.clone(), t_ab), (m_bc.clone(), t_bc)]);
        let model = MrfModel::new(schema, &graph, vec![m_ab, m_bc]).unwrap();
        let mut last = f64::INFINITY;
        for step in 1..6 {
            let mut opts = FitOptions::default();
            opts.max_iterations = step * 3;
            let mut fresh = model.clone();
            let report = fresh.fit_theta(&targets, opts).unwrap();
            assert!(
                report.l1_gap <= last + 1e-9,
                "gap went up: {} -> {}",
                last,
                report.l1_gap
            );
            last = report.l1_gap;
        }
        let _ = model;
    }

    #[test]
    fn sampling_matches_inference() {
        let model = {
            let schema = Schema::from_sizes(&[2, 2, 2]).unwrap();
            let mut graph = AttributeGraph::for_schema(&schema);
            graph.add_edge(0, 1);
            graph.add_edge(1, 2);
            let m_ab = Marginal::new(vec![0, 1]).unwrap();
            let m_bc = Marginal::new(vec![1, 2]).unwrap();
            let t_ab = ContingencyHistogram::new(
                m_ab.clone(),
                vec![45.0, 5.0, 5.0, 45.0],
                HistKind::Counts,
                &schema,
            )
            .unwrap();
            let t_bc = ContingencyHistogram::new(
                m_bc.clone(),
                vec![40.0, 10.0, 15.0, 35.0],
                HistKind::Counts,
                &schema,
            )
            .unwrap();
            let targets = BTreeMap::from([(m_ab.clone(), t_ab), (m_bc.clone(), t_bc)]);
            let mut model = MrfModel::new(schema, &graph, vec![m_ab, m_bc]).unwrap();
            model.fit_theta(&targets, FitOptions::default()).unwrap();
            model
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = model.sample(100_000, &mut rng).unwrap();
        for pair in [vec![0usize, 1], vec![1, 2], vec![0, 2]] {
            let m = Marginal::new(pair).unwrap();
            let empirical = crate::data::compute_histogram(&sample, &m).unwrap();
            let inferred = model.infer_marginal(&m).unwrap();
            let d = crate::data::tvd(&empirical, &inferred).unwrap();
            assert!(d < 0.01, "tvd {d} on {:?}", m.attributes());
        }
    }

    #[test]
    fn sampling_edge_cases() {
        let schema = Schema::from_sizes(&[2, 2]).unwrap();
        let graph = AttributeGraph::for_schema(&schema);
        let model = MrfModel::new(schema.clone(), &graph, vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(model.sample(0, &mut rng).unwrap().row_count(), 0);

        // A near-deterministic model puts all rows on one tuple.
        let m = Marginal::new(vec![0, 1]).unwrap();
        let mut det = MrfModel::new(schema.clone(), &graph, vec![m.clone()]).unwrap();
        det.set_theta(vec![vec![0.0, 0.0, 40.0, 0.0]]).unwrap();
        let rows = det.sample(200, &mut rng).unwrap();
        for r in 0..rows.row_count() {
            assert_eq!(rows.row(r), &[1, 0]);
        }
    }

    #[test]
    fn add_marginals_extends_model() {
        let schema = Schema::from_sizes(&[2, 2, 2]).unwrap();
        let mut graph = AttributeGraph::for_schema(&schema);
        graph.add_edge(0, 1);
        let m01 = Marginal::new(vec![0, 1]).unwrap();
        let mut model = MrfModel::new(schema, &graph, vec![m01.clone()]).unwrap();
        let m02 = Marginal::new(vec![0, 2]).unwrap();
        model.add_marginals(vec![m02.clone(), m01.clone()]).unwrap();
        assert_eq!(model.marginals().len(), 2);
        // The new marginal landed in a clique.
        assert!(model
            .triangulated()
            .containing_clique(m02.attributes())
            .is_some());
    }
}
