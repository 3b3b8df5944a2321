//! Group-size optimization and power-law performance models.

use std::collections::BTreeMap;

use num_traits::Zero;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::expr::{coef_f64, Coef, Expr};
use crate::ir::{Bindings, Diagram, RelabelKind, Size};
use crate::resources::{self, Partition, ResourceError, ResourceOptions};

/// Exponents a fitted term may snap to.
pub const SNAP_SET: [(i128, i128); 7] = [(0, 1), (1, 4), (1, 3), (1, 2), (2, 3), (3, 4), (1, 1)];

/// Largest relative residual a fitted model may leave on its samples.
pub const FIT_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub alpha_poly: Expr,
    #[serde(serialize_with = "ser_beta", deserialize_with = "de_beta")]
    pub beta: Coef,
}

fn ser_beta<S: Serializer>(b: &Coef, s: S) -> Result<S::Ok, S::Error> {
    if b.is_integer() {
        s.serialize_str(&b.numer().to_string())
    } else {
        s.serialize_str(&format!("{}/{}", b.numer(), b.denom()))
    }
}

fn de_beta<'de, D: Deserializer<'de>>(d: D) -> Result<Coef, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    let parse = |t: &str| -> Option<Coef> {
        match t.split_once('/') {
            Some((n, d)) => {
                let n: i128 = n.trim().parse().ok()?;
                let d: i128 = d.trim().parse().ok()?;
                (d != 0).then(|| Coef::new(n, d))
            }
            None => Some(Coef::from_integer(t.trim().parse().ok()?)),
        }
    };
    match Raw::deserialize(d)? {
        Raw::Num(x) => snap_beta(x).ok_or_else(|| serde::de::Error::custom(format!("exponent {x} is not in the snapping set"))),
        Raw::Text(t) => parse(&t).ok_or_else(|| serde::de::Error::custom(format!("bad exponent `{t}`"))),
    }
}

/// `H*(M) = sum alpha_t * M^-beta_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfModel {
    #[serde(default)]
    pub name: String,
    pub terms: Vec<Term>,
    pub y_poly: Expr,
    #[serde(default)]
    pub axes: Vec<String>,
    /// Length of one output row, used to flag levels too small for clean tile nesting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<Expr>,
}

impl PerfModel {
    pub fn bind(&self, b: &Bindings) -> PerfModel {
        let fb: BTreeMap<String, f64> = b.iter().map(|(k, v)| (k.clone(), *v as f64)).collect();
        PerfModel {
            name: self.name.clone(),
            terms: self.terms.iter().map(|t| Term { alpha_poly: t.alpha_poly.partial_eval(&fb), beta: t.beta }).collect(),
            y_poly: self.y_poly.partial_eval(&fb),
            axes: self.axes.clone(),
            row: self.row.as_ref().map(|r| r.partial_eval(&fb)),
        }
    }

    /// Numeric coefficients paired with float exponents.
    pub fn coefficients(&self, b: &Bindings) -> Result<Vec<(f64, f64)>, String> {
        let fb: BTreeMap<String, f64> = b.iter().map(|(k, v)| (k.clone(), *v as f64)).collect();
        self.terms.iter().map(|t| Ok((t.alpha_poly.eval(&fb)?, coef_f64(t.beta)))).collect()
    }

    pub fn eval(&self, b: &Bindings, memory: f64) -> Result<f64, String> {
        Ok(self.coefficients(b)?.iter().map(|(a, beta)| a * memory.powf(-beta)).sum())
    }

    /// The term with the largest exponent.
    pub fn dominant(&self) -> PerfModel {
        let mut out = self.clone();
        if let Some(t) = self.terms.iter().max_by(|x, y| x.beta.cmp(&y.beta)) {
            out.terms = vec![t.clone()];
        }
        out
    }

    pub fn scaled(&self, factor: &Expr) -> PerfModel {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.alpha_poly = &t.alpha_poly * factor;
        }
        out.y_poly = &out.y_poly * factor;
        out
    }
}

fn e(s: &str) -> Expr {
    Expr::parse(s).expect("static expression")
}

fn term(alpha: &str, n: i128, d: i128) -> Term {
    Term { alpha_poly: e(alpha), beta: Coef::new(n, d) }
}

pub const CLOSED_FORMS: [&str; 4] = ["matmul", "attention", "mha", "gqa"];

/// Optimal transfers in closed form, symbolic in the model's axis names.
pub fn closed_form(name: &str) -> Option<PerfModel> {
    let attention = || PerfModel {
        name: "attention".into(),
        terms: vec![term("2*q*d", 0, 1), term("4*x*q*d^2", 1, 1)],
        y_poly: e("q*d"),
        axes: vec!["q".into()],
        row: Some(e("d")),
    };
    Some(match name {
        "matmul" => PerfModel {
            name: "matmul".into(),
            terms: vec![term("2*a*b*c", 1, 2), term("a*c", 0, 1)],
            y_poly: e("a*c"),
            axes: vec!["a".into(), "c".into()],
            row: Some(e("c")),
        },
        "attention" => attention(),
        "mha" => PerfModel { name: "mha".into(), axes: vec!["h".into(), "q".into()], ..attention().scaled(&e("h")) },
        "gqa" => PerfModel { name: "gqa".into(), axes: vec!["g".into(), "q".into()], ..attention().scaled(&e("g")) },
        _ => return None,
    })
}

/// Closed form with concrete sizes.
pub fn closed_form_bound(name: &str, sizes: &Bindings) -> Option<PerfModel> {
    closed_form(name).map(|m| m.bind(sizes))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Stream sizes held at 1 in the memory bound.
    #[default]
    Exact,
    /// Stream terms dropped from the memory bound.
    Idealized,
}

#[derive(Clone, Debug, Default)]
pub struct OptimizeOptions {
    pub bindings: Bindings,
    pub constraint: Constraint,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub level: String,
    pub memory: f64,
    pub constraint: Constraint,
    pub partition: Partition,
    pub groups: BTreeMap<String, u64>,
    pub h: f64,
    pub n_g: f64,
    pub m_lower: f64,
    pub continuous: BTreeMap<String, f64>,
    pub h_continuous: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("diagram has no group relabels to optimize")]
    NoGroups,
    #[error("memory {memory} is below the minimum feasible footprint {min_footprint}")]
    Infeasible { memory: f64, min_footprint: f64 },
    #[error("unbound size: {0}")]
    Unbound(String),
    #[error("group size for `{0}` must be a parameter")]
    FixedGroup(String),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error("no snapped power-law model fits the samples (best residual {residual:.4})")]
    Fit { residual: f64 },
}

struct Problem {
    axes: Vec<(String, String, u64)>,
    h_g: Expr,
    m: Vec<Expr>,
    partition: Partition,
}

impl Problem {
    fn binds(&self, g: &[f64]) -> BTreeMap<String, f64> {
        self.axes.iter().zip(g).map(|((_, p, _), v)| (p.clone(), *v)).collect()
    }

    fn memory(&self, g: &[f64]) -> f64 {
        let b = self.binds(g);
        self.m.iter().map(|m| m.eval(&b).unwrap_or(f64::INFINITY)).fold(f64::NEG_INFINITY, f64::max)
    }

    fn groups(&self, g: &[f64]) -> f64 {
        self.axes.iter().zip(g).map(|((_, _, s), v)| *s as f64 / v).product()
    }

    fn ideal_h(&self, g: &[f64]) -> f64 {
        self.groups(g) * self.h_g.eval(&self.binds(g)).unwrap_or(f64::INFINITY)
    }

    fn h(&self, g: &[u64]) -> (f64, f64) {
        let gf: Vec<f64> = g.iter().map(|v| *v as f64).collect();
        if self.partition == Partition::Idealized || self.axes.iter().zip(g).all(|((_, _, s), v)| s % v == 0) {
            return (self.ideal_h(&gf), self.groups(&gf));
        }
        let classes: Vec<Vec<(u64, u64)>> = self
            .axes
            .iter()
            .zip(g)
            .map(|((_, _, s), v)| {
                let mut c = vec![(*v, s / v)];
                if s % v != 0 {
                    c.push((s % v, 1));
                }
                c
            })
            .collect();
        let mut total = 0.0;
        let mut idx = vec![0usize; classes.len()];
        loop {
            let sizes: Vec<f64> = idx.iter().zip(&classes).map(|(i, c)| c[*i].0 as f64).collect();
            let mult: u64 = idx.iter().zip(&classes).map(|(i, c)| c[*i].1).product();
            total += mult as f64 * self.h_g.eval(&self.binds(&sizes)).unwrap_or(f64::INFINITY);
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < classes[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
        let n: u64 = self.axes.iter().zip(g).map(|((_, _, s), v)| s.div_ceil(*v)).product();
        (total, n as f64)
    }

    /// Largest integer size of the last axis that fits, given the others.
    fn last_fit(&self, prefix: &[u64], memory: f64) -> Option<u64> {
        let size = self.axes.last()?.2;
        let fits = |v: u64| {
            let mut g: Vec<f64> = prefix.iter().map(|x| *x as f64).collect();
            g.push(v as f64);
            self.memory(&g) <= memory
        };
        if !fits(1) {
            return None;
        }
        let (mut lo, mut hi) = (1u64, size);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        Some(lo)
    }

    /// Largest real size of the last axis that fits, given the others.
    fn last_fit_real(&self, prefix: &[f64], memory: f64) -> Option<f64> {
        let size = self.axes.last()?.2 as f64;
        let fits = |v: f64| {
            let mut g = prefix.to_vec();
            g.push(v);
            self.memory(&g) <= memory
        };
        if !fits(1.0) {
            return None;
        }
        if fits(size) {
            return Some(size);
        }
        let (mut lo, mut hi) = (1.0, size);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(lo)
    }

    fn continuous(&self, prefix: &mut Vec<f64>, memory: f64) -> Option<(Vec<f64>, f64)> {
        if prefix.len() + 1 == self.axes.len() {
            let last = self.last_fit_real(prefix, memory)?;
            let mut g = prefix.clone();
            g.push(last);
            let h = self.ideal_h(&g);
            return Some((g, h));
        }
        let size = self.axes[prefix.len()].2 as f64;
        let eval = |x: f64, prefix: &mut Vec<f64>| -> Option<(Vec<f64>, f64)> {
            prefix.push(x.exp());
            let r = self.continuous(prefix, memory);
            prefix.pop();
            r
        };
        let score = |r: &Option<(Vec<f64>, f64)>| r.as_ref().map_or(f64::INFINITY, |r| r.1);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (0.0, size.ln());
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let mut rc = eval(c, prefix);
        let mut rd = eval(d, prefix);
        for _ in 0..60 {
            if score(&rc) <= score(&rd) {
                b = d;
                d = c;
                rd = rc;
                c = b - phi * (b - a);
                rc = eval(c, prefix);
            } else {
                a = c;
                c = d;
                rc = rd;
                d = a + phi * (b - a);
                rd = eval(d, prefix);
            }
        }
        let mut best = if score(&rc) <= score(&rd) { rc } else { rd };
        for edge in [0.0, size.ln()] {
            let r = eval(edge, prefix);
            if score(&r) < score(&best) {
                best = r;
            }
        }
        best
    }
}

fn problem(d: &Diagram, level: &str, opts: &OptimizeOptions) -> Result<Problem, OptimizeError> {
    let mut group_params = Vec::new();
    let mut stream_params = Vec::new();
    for (axis, r) in d.relabels() {
        match r {
            RelabelKind::Group(Size::Param(p)) => group_params.push((axis, p)),
            RelabelKind::Group(Size::Const(_)) => return Err(OptimizeError::FixedGroup(axis)),
            RelabelKind::Stream(Size::Param(p)) => stream_params.push(p),
            RelabelKind::Stream(Size::Const(_)) => {}
        }
    }
    if group_params.is_empty() {
        return Err(OptimizeError::NoGroups);
    }
    let mut binds = d.params.clone();
    binds.extend(opts.bindings.clone());
    for (_, p) in &group_params {
        binds.remove(p);
    }
    let s = match opts.constraint {
        Constraint::Exact => 1,
        Constraint::Idealized => 0,
    };
    for p in &stream_params {
        binds.insert(p.clone(), s);
    }
    let mut axes = Vec::new();
    for (axis, p) in group_params {
        let size = d.axis_size(&axis).and_then(|z| z.resolve(&binds)).ok_or_else(|| OptimizeError::Unbound(axis.clone()))?;
        axes.push((axis, p, size));
    }
    let ro = ResourceOptions { bindings: binds, partition: Partition::Idealized, ..Default::default() };
    let tc = resources::transfer_cost(d, level, &ro)?;
    let mb = resources::memory_lower_bound(d, level, &ro)?;
    let known: Vec<&str> = axes.iter().map(|(_, p, _)| p.as_str()).collect();
    let check = |x: &Expr| match x.variables().into_iter().find(|v| !known.contains(&v.as_str())) {
        Some(v) => Err(OptimizeError::Unbound(v)),
        None => Ok(()),
    };
    check(&tc.h_g)?;
    let m = mb.m_lower.candidates();
    for x in &m {
        check(x)?;
    }
    Ok(Problem { axes, h_g: tc.h_g, m, partition: opts.partition })
}

/// Minimum footprint at `level` with every group size at 1.
pub fn min_footprint(d: &Diagram, level: &str, opts: &OptimizeOptions) -> Result<f64, OptimizeError> {
    let p = problem(d, level, opts)?;
    Ok(p.memory(&vec![1.0; p.axes.len()]))
}

/// Integer group sizes minimizing transfers into `level` under a memory budget in values.
pub fn optimize_groups(d: &Diagram, level: &str, memory: f64, opts: &OptimizeOptions) -> Result<Optimum, OptimizeError> {
    let p = problem(d, level, opts)?;
    let k = p.axes.len();
    let floor = p.memory(&vec![1.0; k]);
    if floor > memory {
        return Err(OptimizeError::Infeasible { memory, min_footprint: floor });
    }
    let (cont, h_cont) = p.continuous(&mut Vec::new(), memory).ok_or(OptimizeError::Infeasible { memory, min_footprint: floor })?;

    let ranges: Vec<(u64, u64)> = {
        let lead = &p.axes[..k - 1];
        let total: f64 = lead.iter().map(|a| a.2 as f64).product();
        if total <= 65536.0 {
            lead.iter().map(|a| (1, a.2)).collect()
        } else {
            lead.iter()
                .zip(&cont)
                .map(|(a, c)| {
                    let c = c.round() as u64;
                    (c.saturating_sub(8).max(1), (c + 8).min(a.2))
                })
                .collect()
        }
    };
    let balanced = |s: u64, g: u64| s.div_ceil(s.div_ceil(g));
    let mut best: Option<(f64, f64, Vec<u64>)> = None;
    let mut prefix: Vec<u64> = ranges.iter().map(|r| r.0).collect();
    loop {
        if let Some(last) = p.last_fit(&prefix, memory) {
            let size = p.axes[k - 1].2;
            let mut cands = vec![last, balanced(size, last)];
            cands.dedup();
            for c in cands {
                let mut g = prefix.clone();
                g.push(c);
                let (h, n) = p.h(&g);
                if better(&p, h, &g, best.as_ref().map(|b| (b.0, b.2.as_slice()))) {
                    best = Some((h, n, g));
                }
            }
        }
        let mut i = 0;
        while i < prefix.len() {
            prefix[i] += 1;
            if prefix[i] <= ranges[i].1 {
                break;
            }
            prefix[i] = ranges[i].0;
            i += 1;
        }
        if i == prefix.len() {
            break;
        }
    }
    let (h, n_g, g) = best.ok_or(OptimizeError::Infeasible { memory, min_footprint: floor })?;
    let gf: Vec<f64> = g.iter().map(|v| *v as f64).collect();
    Ok(Optimum {
        level: level.to_string(),
        memory,
        constraint: opts.constraint,
        partition: opts.partition,
        groups: p.axes.iter().zip(&g).map(|(a, v)| (a.0.clone(), *v)).collect(),
        h,
        n_g,
        m_lower: p.memory(&gf),
        continuous: p.axes.iter().zip(&cont).map(|(a, v)| (a.0.clone(), *v)).collect(),
        h_continuous: h_cont,
    })
}

/// Lower cost wins; ties prefer balanced groups, then larger sizes in axis order.
fn better(p: &Problem, h: f64, g: &[u64], best: Option<(f64, &[u64])>) -> bool {
    let Some((bh, bg)) = best else { return true };
    let tol = 1e-12 * bh.abs().max(1.0);
    if h < bh - tol {
        return true;
    }
    if h > bh + tol {
        return false;
    }
    let even = |g: &[u64]| p.axes.iter().zip(g).all(|(a, v)| a.2 % v == 0);
    match (even(g), even(bg)) {
        (true, false) => true,
        (false, true) => false,
        _ => g > bg,
    }
}

/// Transfer cost of a fixed integer assignment.
pub fn evaluate_groups(d: &Diagram, level: &str, groups: &BTreeMap<String, u64>, opts: &OptimizeOptions) -> Result<(f64, f64), OptimizeError> {
    let p = problem(d, level, opts)?;
    let g: Vec<u64> = p.axes.iter().map(|a| groups.get(&a.0).copied().ok_or_else(|| OptimizeError::Unbound(a.0.clone()))).collect::<Result<_, _>>()?;
    let gf: Vec<f64> = g.iter().map(|v| *v as f64).collect();
    Ok((p.h(&g).0, p.memory(&gf)))
}

/// Optimized transfers over a memory grid.
pub fn sample(d: &Diagram, level: &str, grid: &[f64], opts: &OptimizeOptions) -> Result<Vec<(f64, f64)>, OptimizeError> {
    grid.iter().map(|m| optimize_groups(d, level, *m, opts).map(|o| (*m, o.h))).collect()
}

/// `n` log-spaced points from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn snap_beta(x: f64) -> Option<Coef> {
    SNAP_SET.iter().map(|(n, d)| Coef::new(*n, *d)).find(|c| (coef_f64(*c) - x).abs() < 1e-9)
}

/// Least squares on relative residuals; `None` when a coefficient comes out negative.
fn fit_alphas(samples: &[(f64, f64)], betas: &[Coef]) -> Option<(Vec<f64>, f64)> {
    let k = betas.len();
    let bf: Vec<f64> = betas.iter().map(|b| coef_f64(*b)).collect();
    let rows: Vec<(Vec<f64>, f64)> = samples.iter().map(|(m, h)| (bf.iter().map(|b| m.powf(-b) / h).collect(), 1.0)).collect();
    let mut ata = vec![vec![0.0; k]; k];
    let mut atb = vec![0.0; k];
    for (r, y) in &rows {
        for i in 0..k {
            atb[i] += r[i] * y;
            for j in 0..k {
                ata[i][j] += r[i] * r[j];
            }
        }
    }
    let alpha = solve(ata, atb)?;
    if alpha.iter().any(|a| *a < 0.0 || !a.is_finite()) {
        return None;
    }
    let resid = samples
        .iter()
        .map(|(m, h)| {
            let f: f64 = alpha.iter().zip(&bf).map(|(a, b)| a * m.powf(-b)).sum();
            ((f - h) / h).abs()
        })
        .fold(0.0, f64::max);
    Some((alpha, resid))
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|x, y| a[*x][c].abs().total_cmp(&a[*y][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..n {
                    a[r][j] -= f * a[c][j];
                }
                b[r] -= f * b[c];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub model: PerfModel,
    pub residual: f64,
    /// Local exponents from log-log slopes between neighbouring samples.
    pub slopes: Vec<f64>,
}

/// Fit `sum alpha * M^-beta` with exponents from the snapping set.
pub fn extract_terms(samples: &[(f64, f64)]) -> Result<Fit, OptimizeError> {
    let slopes: Vec<f64> = samples.windows(2).map(|w| -((w[1].1.ln() - w[0].1.ln()) / (w[1].0.ln() - w[0].0.ln()))).collect();
    let all: Vec<Coef> = SNAP_SET.iter().map(|(n, d)| Coef::new(*n, *d)).collect();
    let mut best: Option<(Vec<Coef>, Vec<f64>, f64)> = None;
    'sizes: for size in 1..=3usize {
        for betas in subsets(&all, size) {
            if let Some((alpha, r)) = fit_alphas(samples, &betas) {
                let keep = alpha.iter().all(|a| *a > 0.0);
                if keep && best.as_ref().is_none_or(|b| r < b.2) {
                    best = Some((betas, alpha, r));
                }
            }
        }
        if best.as_ref().is_some_and(|b| b.2 < FIT_TOLERANCE) {
            break 'sizes;
        }
    }
    let (betas, alpha, residual) = best.ok_or(OptimizeError::Fit { residual: f64::INFINITY })?;
    if residual >= FIT_TOLERANCE {
        return Err(OptimizeError::Fit { residual });
    }
    let mut terms: Vec<Term> = betas
        .into_iter()
        .zip(alpha)
        .map(|(beta, a)| Term { alpha_poly: Expr::constant(crate::expr::f64_to_coef(a)), beta })
        .collect();
    terms.sort_by_key(|a| a.beta);
    Ok(Fit {
        model: PerfModel { name: "fitted".into(), terms, y_poly: Expr::zero(), axes: Vec::new(), row: None },
        residual,
        slopes,
    })
}

fn subsets(items: &[Coef], k: usize) -> Vec<Vec<Coef>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        for mut rest in subsets(&items[i + 1..], k - 1) {
            rest.insert(0, items[i]);
            out.push(rest);
        }
    }
    out
}

/// Transfers per FLOP at memory `memory`.
pub fn arithmetic_intensity(model: &PerfModel, flops: &Expr, memory: f64, b: &Bindings) -> Result<f64, String> {
    let fb: BTreeMap<String, f64> = b.iter().map(|(k, v)| (k.clone(), *v as f64)).collect();
    let k = flops.eval(&fb)?;
    Ok(model.eval(b, memory)? / k)
}

/// Transfers per FLOP stay under the machine's transfer-to-compute rate.
pub fn is_compute_bound(intensity: f64, values_per_s: f64, flops_per_s: f64) -> bool {
    intensity < values_per_s / flops_per_s
}

impl Term {
    pub fn beta_f64(&self) -> f64 {
        coef_f64(self.beta)
    }

    pub fn is_constant(&self) -> bool {
        self.beta.is_zero()
    }
}
