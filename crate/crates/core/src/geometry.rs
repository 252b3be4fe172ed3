//! Region tracing along segments, induced-matrix decompositions, Cauchy
//! interlacing under row deletion, and instance-space margin estimation.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::losses::{argmax, margin_operator};
use crate::model::{forward, ActivationPattern, Network};
use crate::numerics::{norm2, singular_values, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    pub max_breakpoints: usize,
    /// Roots closer than this (in `t`) are treated as one breakpoint.
    pub merge_tol: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            max_breakpoints: 100_000,
            merge_tol: 1e-12,
        }
    }
}

/// One linear piece of `t -> I_l(x + t(x' - x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    /// Patterns of hidden layers `1..=l` on the open interior.
    pub pattern: ActivationPattern,
    /// `prod_i W_i^q (x' - x)`, the derivative of `I_l` on this piece.
    pub direction: Vec<f64>,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDecomposition {
    pub layer: usize,
    pub segments: Vec<Segment>,
    /// `sum_j (e_j - s_j) ||prod_i W_i^{q_j} (x' - x)||`.
    pub total: f64,
    /// `||sum_j (e_j - s_j) prod_i W_i^{q_j} (x' - x)||`, which equals
    /// `||I_l(x') - I_l(x)||` exactly.
    pub vector_total: f64,
}

impl SegmentDecomposition {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn breakpoints(&self) -> Vec<(f64, f64)> {
        self.segments.iter().map(|s| (s.start, s.end)).collect()
    }

    pub fn per_segment_norm(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.norm).collect()
    }

    /// `diag(tau_i) W_i` for `i = 1..=l` on segment `j`.
    pub fn induced(&self, net: &Network, j: usize) -> Result<Vec<Matrix>> {
        let seg = self
            .segments
            .get(j)
            .ok_or_else(|| Error::InvalidInput(format!("no segment {j}")))?;
        Ok(seg
            .pattern
            .layers
            .iter()
            .zip(net.weights())
            .map(|(tau, w)| mask_rows(w, tau))
            .collect())
    }
}

fn mask_rows(w: &Matrix, tau: &[bool]) -> Matrix {
    let mut out = w.clone();
    for (r, &on) in tau.iter().enumerate() {
        if !on {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

fn check_layer(net: &Network, layer: usize) -> Result<()> {
    if layer == 0 || layer > net.hidden_layers() {
        return invalid(format!(
            "layer must be in 1..={}, got {layer}",
            net.hidden_layers()
        ));
    }
    Ok(())
}

fn check_point(net: &Network, x: &[f64], what: &str) -> Result<()> {
    if x.len() != net.input_dim() {
        return invalid(format!(
            "{what} has length {} but the network expects {}",
            x.len(),
            net.input_dim()
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return invalid(format!("{what} has non-finite entries"));
    }
    Ok(())
}

pub fn trace_segment(
    net: &Network,
    x: &[f64],
    x2: &[f64],
    layer: usize,
) -> Result<SegmentDecomposition> {
    trace_segment_with(net, x, x2, layer, &TraceOptions::default())
}

/// Walks `[0, 1]` left to right. Within a region every pre-activation is
/// affine in `t`, so the next breakpoint is the smallest forward root.
pub fn trace_segment_with(
    net: &Network,
    x: &[f64],
    x2: &[f64],
    layer: usize,
    opts: &TraceOptions,
) -> Result<SegmentDecomposition> {
    check_layer(net, layer)?;
    check_point(net, x, "start point")?;
    check_point(net, x2, "end point")?;
    if !(opts.merge_tol >= 0.0) {
        return invalid(format!(
            "merge tolerance must be non-negative, got {}",
            opts.merge_tol
        ));
    }
    let d: Vec<f64> = x2.iter().zip(x).map(|(b, a)| b - a).collect();
    let weights = &net.weights()[..layer];
    let mut segments: Vec<Segment> = Vec::new();
    let mut t = 0.0;
    loop {
        let mut a = x.to_vec();
        let mut b = d.clone();
        let mut layers = Vec::with_capacity(layer);
        let mut next = 1.0f64;
        for w in weights {
            let za = w.matvec(&a)?;
            let zb = w.matvec(&b)?;
            let mut tau = Vec::with_capacity(za.len());
            for (&p, &q) in za.iter().zip(&zb) {
                let z = p + t * q;
                let slack =
                    opts.merge_tol * q.abs() + 4.0 * f64::EPSILON * (p.abs() + (t * q).abs());
                let at_zero = z.abs() <= slack;
                tau.push(if at_zero { q > 0.0 } else { z > 0.0 });
                if !at_zero && q != 0.0 {
                    let root = -p / q;
                    if root > t && root < next {
                        next = root;
                    }
                }
            }
            a = za
                .iter()
                .zip(&tau)
                .map(|(&v, &on)| if on { v } else { 0.0 })
                .collect();
            b = zb
                .iter()
                .zip(&tau)
                .map(|(&v, &on)| if on { v } else { 0.0 })
                .collect();
            layers.push(tau);
        }
        if next > 1.0 - opts.merge_tol {
            next = 1.0;
        }
        let norm = norm2(&b);
        segments.push(Segment {
            start: t,
            end: next,
            pattern: ActivationPattern { layers },
            direction: b,
            norm,
        });
        if next >= 1.0 {
            break;
        }
        if segments.len() >= opts.max_breakpoints {
            return Err(Error::RegionExplosion {
                cap: opts.max_breakpoints,
            });
        }
        t = next;
    }

    let total = segments.iter().map(|s| (s.end - s.start) * s.norm).sum();
    let width = segments[0].direction.len();
    let mut sum = vec![0.0; width];
    for s in &segments {
        let len = s.end - s.start;
        for (acc, v) in sum.iter_mut().zip(&s.direction) {
            *acc += len * v;
        }
    }
    Ok(SegmentDecomposition {
        layer,
        segments,
        total,
        vector_total: norm2(&sum),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lemma1Check {
    /// `||I_l(x) - I_l(x')||` from two forward passes.
    pub lhs: f64,
    /// Sum of per-segment integrals of the norm.
    pub rhs: f64,
    pub rel_err: f64,
    /// Norm of the summed per-segment vectors.
    pub vector_rhs: f64,
    pub vector_rel_err: f64,
    pub segments: usize,
}

pub fn verify_lemma1(net: &Network, x: &[f64], x2: &[f64], layer: usize) -> Result<Lemma1Check> {
    verify_lemma1_with(net, x, x2, layer, &TraceOptions::default())
}

pub fn verify_lemma1_with(
    net: &Network,
    x: &[f64],
    x2: &[f64],
    layer: usize,
    opts: &TraceOptions,
) -> Result<Lemma1Check> {
    let dec = trace_segment_with(net, x, x2, layer, opts)?;
    let fa = forward(net, x)?;
    let fb = forward(net, x2)?;
    let diff: Vec<f64> = fa
        .activation(layer)
        .iter()
        .zip(fb.activation(layer))
        .map(|(p, q)| p - q)
        .collect();
    let lhs = norm2(&diff);
    Ok(Lemma1Check {
        lhs,
        rhs: dec.total,
        rel_err: (lhs - dec.total).abs() / (1.0 + lhs),
        vector_rhs: dec.vector_total,
        vector_rel_err: (lhs - dec.vector_total).abs() / (1.0 + lhs),
        segments: dec.len(),
    })
}

pub const INTERLACING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterlacingStep {
    /// Row index in the matrix at this step.
    pub deleted_row: usize,
    pub sigma_before: Vec<f64>,
    pub sigma_after: Vec<f64>,
    /// Largest amount by which either inequality fails; `<= 0` when it holds.
    pub worst_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterlacingReport {
    pub holds: bool,
    pub sigma_original: Vec<f64>,
    pub sigma_final: Vec<f64>,
    pub steps: Vec<InterlacingStep>,
}

fn delete_row(m: &Matrix, row: usize) -> Result<Matrix> {
    let data: Vec<f64> = (0..m.rows())
        .filter(|&r| r != row)
        .flat_map(|r| m.row(r).iter().copied())
        .collect();
    Matrix::new(m.rows() - 1, m.cols(), data)
}

/// Deletes `deleted_rows` one at a time (highest index first) and checks
/// `sigma_k(A) >= sigma_k(B) >= sigma_{k+1}(A)` at every step.
pub fn interlacing_check(w: &Matrix, deleted_rows: &[usize]) -> Result<InterlacingReport> {
    let mut rows = deleted_rows.to_vec();
    rows.sort_unstable();
    rows.dedup();
    if rows.len() != deleted_rows.len() {
        return invalid("deleted rows contain duplicates");
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= w.rows()) {
        return invalid(format!("row {r} out of range for {} rows", w.rows()));
    }
    if rows.len() == w.rows() {
        return invalid("cannot delete every row");
    }
    let sigma_original = singular_values(w)?;
    let mut current = w.clone();
    let mut sigma_a = sigma_original.clone();
    let mut steps = Vec::with_capacity(rows.len());
    for &r in rows.iter().rev() {
        let next = delete_row(&current, r)?;
        let sigma_b = singular_values(&next)?;
        let mut worst = f64::NEG_INFINITY;
        for (k, &sb) in sigma_b.iter().enumerate() {
            let upper = sigma_a[k];
            let lower = sigma_a.get(k + 1).copied().unwrap_or(0.0);
            worst = worst.max(sb - upper).max(lower - sb);
        }
        if sigma_b.is_empty() {
            worst = 0.0;
        }
        steps.push(InterlacingStep {
            deleted_row: r,
            sigma_before: sigma_a,
            sigma_after: sigma_b.clone(),
            worst_violation: worst,
        });
        current = next;
        sigma_a = sigma_b;
    }
    Ok(InterlacingReport {
        holds: steps.iter().all(|s| s.worst_violation <= INTERLACING_TOL),
        sigma_original,
        sigma_final: sigma_a,
        steps,
    })
}

/// Logits at `x` and the exact Jacobian of the logits in the region of `x`.
pub fn logits_and_jacobian(net: &Network, x: &[f64]) -> Result<(Vec<f64>, Matrix)> {
    let trace = forward(net, x)?;
    let hidden = net.hidden_layers();
    let mut jac = net.weights()[hidden].clone();
    for i in (0..hidden).rev() {
        for r in 0..jac.rows() {
            let row = jac.row_mut(r);
            for (v, &z) in row.iter_mut().zip(&trace.pre_activations[i]) {
                if z <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        jac = jac.matmul(&net.weights()[i])?;
    }
    Ok((trace.logits, jac))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryOptions {
    pub max_iterations: usize,
    /// Search radius cap; `None` uses `10 ||x|| + 1`.
    pub radius_cap: Option<f64>,
    /// Bisection stops once `|M| <= tol * min(1, |M(x)|)`.
    pub tol: f64,
    /// Each linearized step is lengthened by this fraction so it crosses.
    pub overshoot: f64,
    pub max_bisections: usize,
}

impl Default for BoundaryOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            radius_cap: None,
            tol: 1e-4,
            overshoot: 0.02,
            max_bisections: 200,
        }
    }
}

/// `v` is an upper bound on the true l2 distance to the decision boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryProbe {
    pub x: Vec<f64>,
    pub v: f64,
    pub x_boundary: Vec<f64>,
    pub converged: bool,
    /// Class predicted at `x`; margins along the probe are taken against it.
    pub predicted: usize,
    pub margin_at_x: f64,
    pub iterations: usize,
}

impl BoundaryProbe {
    fn unreachable(x: &[f64], predicted: usize, margin_at_x: f64, iterations: usize) -> Self {
        Self {
            x: x.to_vec(),
            v: f64::INFINITY,
            x_boundary: x.to_vec(),
            converged: false,
            predicted,
            margin_at_x,
            iterations,
        }
    }
}

pub fn boundary_distance(net: &Network, x: &[f64]) -> Result<BoundaryProbe> {
    boundary_distance_with(net, x, &BoundaryOptions::default())
}

fn point_on(x: &[f64], target: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(target).map(|(a, b)| a + t * (b - a)).collect()
}

/// DeepFool steps towards the closest linearized class boundary until the
/// prediction flips, then bisection on the segment back to `x`.
pub fn boundary_distance_with(
    net: &Network,
    x: &[f64],
    opts: &BoundaryOptions,
) -> Result<BoundaryProbe> {
    check_point(net, x, "probe point")?;
    if net.output_dim() < 2 {
        return invalid("boundary distance needs at least two classes");
    }
    let logits = net.logits(x)?;
    let y = argmax(&logits);
    let m0 = margin_operator(&logits, y)?;
    if m0 == 0.0 {
        return Ok(BoundaryProbe {
            x: x.to_vec(),
            v: 0.0,
            x_boundary: x.to_vec(),
            converged: true,
            predicted: y,
            margin_at_x: 0.0,
            iterations: 0,
        });
    }
    let cap = opts.radius_cap.unwrap_or(10.0 * norm2(x) + 1.0);

    let mut cur = x.to_vec();
    let mut flipped = None;
    let mut iterations = 0;
    for it in 0..=opts.max_iterations {
        let (s, jac) = logits_and_jacobian(net, &cur)?;
        if argmax(&s) != y {
            flipped = Some(cur.clone());
            iterations = it;
            break;
        }
        if it == opts.max_iterations {
            iterations = it;
            break;
        }
        let gy = jac.row(y);
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for k in (0..s.len()).filter(|&k| k != y) {
            let w: Vec<f64> = jac.row(k).iter().zip(gy).map(|(a, b)| a - b).collect();
            let wn = norm2(&w);
            if wn == 0.0 {
                continue;
            }
            let f = (s[y] - s[k]).max(0.0);
            let ratio = f / wn;
            if best.as_ref().is_none_or(|(r, _, _)| ratio < *r) {
                best = Some((ratio, w, wn));
            }
        }
        let Some((ratio, w, wn)) = best else {
            iterations = it;
            break;
        };
        let scale = (ratio * (1.0 + opts.overshoot)).max(f64::EPSILON * (1.0 + norm2(&cur))) / wn;
        for (c, wi) in cur.iter_mut().zip(&w) {
            *c += scale * wi;
        }
        let dist: Vec<f64> = cur.iter().zip(x).map(|(a, b)| a - b).collect();
        if norm2(&dist) > cap {
            iterations = it + 1;
            break;
        }
    }
    let Some(flip) = flipped else {
        return Ok(BoundaryProbe::unreachable(x, y, m0, iterations));
    };

    let target = opts.tol * m0.abs().min(1.0);
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut best = (1.0, margin_operator(&net.logits(&flip)?, y)?);
    for _ in 0..opts.max_bisections {
        if best.1.abs() <= target {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let m = margin_operator(&net.logits(&point_on(x, &flip, mid))?, y)?;
        if m > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        best = (mid, m);
    }
    if best.1.abs() > target {
        return Ok(BoundaryProbe::unreachable(x, y, m0, iterations));
    }
    let xb = point_on(x, &flip, best.0);
    let diff: Vec<f64> = xb.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok(BoundaryProbe {
        x: x.to_vec(),
        v: norm2(&diff),
        x_boundary: xb,
        converged: true,
        predicted: y,
        margin_at_x: m0,
        iterations,
    })
}

pub const MONOTONY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonyReport {
    pub grid: usize,
    /// Margins at `t = 0, 1/grid, ..., 1`.
    pub margins: Vec<f64>,
    pub violations: usize,
    pub max_increase: f64,
}

/// Counts increases of the margin along `x -> x_boundary` larger than
/// `MONOTONY_TOL`. Reporting only.
pub fn check_monotony(
    net: &Network,
    x: &[f64],
    probe: &BoundaryProbe,
    grid: usize,
) -> Result<MonotonyReport> {
    if grid == 0 {
        return invalid("monotony grid must be at least 1");
    }
    if !probe.converged {
        return invalid("monotony check needs a converged boundary probe");
    }
    if probe.x_boundary.len() != x.len() {
        return invalid("probe and point dimensions differ");
    }
    let margins = (0..=grid)
        .map(|i| {
            let t = i as f64 / grid as f64;
            margin_operator(
                &net.logits(&point_on(x, &probe.x_boundary, t))?,
                probe.predicted,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut violations = 0;
    let mut max_increase = 0.0f64;
    for pair in margins.windows(2) {
        let inc = pair[1] - pair[0];
        if inc > MONOTONY_TOL {
            violations += 1;
        }
        max_increase = max_increase.max(inc);
    }
    Ok(MonotonyReport {
        grid,
        margins,
        violations,
        max_increase,
    })
}

/// Both sides of `||prod W_i^q z|| >= prod sigma_min(W_i) ||z||` for `z`
/// orthogonal to the null space of the product.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaFloorCheck {
    /// Smallest nonzero singular value of `prod_{i<=l} diag(tau_i) W_i`;
    /// `None` when the product vanishes.
    pub product_sigma_min: Option<f64>,
    pub floor: f64,
    pub holds: bool,
}

pub fn sigma_floor_check(net: &Network, pattern: &ActivationPattern) -> Result<SigmaFloorCheck> {
    let l = pattern.layers.len();
    check_layer(net, l)?;
    let mut product: Option<Matrix> = None;
    let mut floor = 1.0;
    for (i, (w, tau)) in net.weights().iter().zip(&pattern.layers).enumerate() {
        if tau.len() != w.rows() {
            return invalid(format!(
                "pattern layer {} has {} entries, expected {}",
                i + 1,
                tau.len(),
                w.rows()
            ));
        }
        let sv = singular_values(w).map_err(|e| Error::Layer {
            layer: i + 1,
            source: Box::new(e),
        })?;
        floor *= sv.last().copied().unwrap_or(0.0);
        let masked = mask_rows(w, tau);
        product = Some(match product {
            None => masked,
            Some(p) => masked.matmul(&p)?,
        });
    }
    let sv = singular_values(&product.expect("at least one layer"))?;
    let cutoff = 1e-10 * sv.first().copied().unwrap_or(0.0);
    let product_sigma_min = sv.iter().rev().copied().find(|&s| s > cutoff && s > 0.0);
    let holds = product_sigma_min.is_none_or(|s| s >= floor * (1.0 - 1e-9));
    Ok(SigmaFloorCheck {
        product_sigma_min,
        floor,
        holds,
    })
}
