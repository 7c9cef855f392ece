//! Numerical checks of the explanation axioms on attribution matrices, and the
//! constructive factorization `Φ(i, j) = α′ᵢ K′(i, j)` with `K′` symmetric.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionTable;
use crate::error::{Error, Result};

/// `Φ(i, j) = φ(xᵢ → xⱼ)` over training points.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiMatrix {
    pub entries: DMatrix<f64>,
}

impl PhiMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Dimension {
                context: "attribution matrix (square)",
                expected: entries.nrows(),
                actual: entries.ncols(),
            });
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("attribution matrix"));
        }
        Ok(PhiMatrix { entries })
    }

    /// From a table whose test points are the training points, on output `k`.
    pub fn from_table(table: &AttributionTable, output: usize) -> Result<Self> {
        let n = table.train_ids.len();
        if table.test_ids != table.train_ids {
            return Err(Error::InvalidConfig(
                "attribution matrix needs a table evaluated on the training points".into(),
            ));
        }
        if output >= table.output_dim {
            return Err(Error::Dimension {
                context: "attribution output index",
                expected: table.output_dim,
                actual: output,
            });
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| table.score(j, i)[output]))
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&self) -> f64 {
        self.entries.amax()
    }

    /// `1e-10 · max |Φ|`.
    pub fn default_zero_tol(&self) -> f64 {
        1e-10 * self.scale()
    }

    fn row_scale(&self, i: usize) -> f64 {
        self.entries.row(i).amax()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::NotApplicable => "n/a",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxiomEntry {
    pub axiom: String,
    pub status: Status,
    pub worst_violation: f64,
    /// Offending sample indices; present exactly when the status is `Fail`.
    pub witness: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl AxiomEntry {
    fn judged(axiom: &str, worst: f64, witness: Option<Vec<usize>>, limit: f64) -> Self {
        let fail = worst > limit;
        AxiomEntry {
            axiom: axiom.into(),
            status: if fail { Status::Fail } else { Status::Pass },
            worst_violation: worst,
            witness: if fail { witness } else { None },
            note: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckTolerances {
    /// Values at or below `zero_tol · max |Φ|` count as zero.
    pub zero_tol: f64,
    /// Allowed violation, relative to `max |Φ|` (or the cycle products).
    pub violation_tol: f64,
    pub max_cycle_len: usize,
    pub max_subset: usize,
}

impl Default for CheckTolerances {
    fn default() -> Self {
        CheckTolerances {
            zero_tol: 1e-10,
            violation_tol: 1e-7,
            max_cycle_len: 5,
            max_subset: 5,
        }
    }
}

/// Rows with a (numerically) zero diagonal must be zero everywhere, including
/// at the extra probes: `extra[i][p] = φ(xᵢ → probe_p)`.
pub fn check_self_explanation(phi: &PhiMatrix, extra: &[Vec<f64>], zero_tol: f64, violation_tol: f64) -> AxiomEntry {
    let n = phi.len();
    let mut worst = 0.0_f64;
    let mut witness = None;
    for i in 0..n {
        if phi.entries[(i, i)].abs() > zero_tol {
            continue;
        }
        let row = (0..n).map(|j| phi.entries[(i, j)]);
        let probes = extra.get(i).into_iter().flatten().copied();
        for (j, v) in row.chain(probes).enumerate() {
            if j != i && v.abs() > worst {
                worst = v.abs();
                witness = Some(vec![i, j]);
            }
        }
    }
    AxiomEntry::judged("self_explanation", worst, witness, violation_tol)
}

/// Among rows with nonzero diagonals, a zero `Φ(i, j)` forces a zero `Φ(j, i)`.
/// Zero tests are relative to each row's largest magnitude, since every row
/// carries its own global-importance factor.
pub fn check_symmetric_zero(phi: &PhiMatrix, zero_tol: f64, violation_tol: f64) -> AxiomEntry {
    let n = phi.len();
    let abs_zero = zero_tol * phi.scale();
    let scales: Vec<f64> = (0..n).map(|i| phi.row_scale(i)).collect();
    let mut worst = 0.0_f64;
    let mut witness = None;
    for i in 0..n {
        if phi.entries[(i, i)].abs() <= abs_zero {
            continue;
        }
        for j in 0..n {
            if i == j || phi.entries[(j, j)].abs() <= abs_zero {
                continue;
            }
            if phi.entries[(i, j)].abs() <= zero_tol * scales[i] {
                let v = phi.entries[(j, i)].abs() / scales[j];
                if v > worst {
                    worst = v;
                    witness = Some(vec![i, j]);
                }
            }
        }
    }
    AxiomEntry::judged("symmetric_zero", worst, witness, violation_tol)
}

/// `log |x|` and sign, with exact zeros mapped to `−∞`.
fn log_sign(x: f64) -> (f64, f64) {
    if x == 0.0 {
        (f64::NEG_INFINITY, 0.0)
    } else {
        (x.abs().ln(), x.signum())
    }
}

/// Relative gap `|F − B| / max(|F|, |B|, ε)` between two products given in
/// log-magnitude/sign form.
fn product_gap(lf: f64, sf: f64, lb: f64, sb: f64, log_eps: f64) -> f64 {
    let m = lf.max(lb);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    let diff = (sf * (lf - m).exp() - sb * (lb - m).exp()).abs();
    diff * (m - m.max(log_eps)).exp()
}

/// Every cycle of length `2..=max_len` (indices may repeat) must have equal
/// forward and backward attribution products.
pub fn check_symmetric_cycle(phi: &PhiMatrix, max_len: usize, zero_tol: f64, rel_tol: f64) -> AxiomEntry {
    let n = phi.len();
    let scale = phi.scale();
    if n == 0 || scale == 0.0 {
        return AxiomEntry::judged("symmetric_cycle", 0.0, None, rel_tol);
    }
    let logs: Vec<(f64, f64)> = phi.entries.transpose().iter().map(|&v| log_sign(v)).collect();
    // Row-major lookup (i, j) -> index i·n + j.
    let at = |i: usize, j: usize| logs[i * n + j];
    let log_zero = (zero_tol * scale).ln();
    let log_scale = scale.ln();
    let mut worst = (0.0_f64, None::<Vec<usize>>);
    for k in 2..=max_len.max(2) {
        let log_eps = log_zero + (k as f64 - 1.0) * log_scale;
        let total = n.pow(k as u32 - 1);
        let best = (0..n)
            .into_par_iter()
            .map(|first| {
                let mut local = (0.0_f64, None::<Vec<usize>>);
                let mut t = vec![0usize; k];
                t[0] = first;
                for code in 0..total {
                    let mut c = code;
                    for slot in t.iter_mut().skip(1) {
                        *slot = c % n;
                        c /= n;
                    }
                    let (mut lf, mut sf, mut lb, mut sb) = (0.0, 1.0, 0.0, 1.0);
                    for s in 0..k {
                        let (a, b) = (t[s], t[(s + 1) % k]);
                        let (l1, s1) = at(a, b);
                        let (l2, s2) = at(b, a);
                        lf += l1;
                        sf *= s1;
                        lb += l2;
                        sb *= s2;
                    }
                    let gap = product_gap(lf, sf, lb, sb, log_eps);
                    if gap > local.0 {
                        local = (gap, Some(t.clone()));
                    }
                }
                local
            })
            .reduce(
                || (0.0, None),
                |a, b| if b.0 > a.0 { b } else { a },
            );
        if best.0 > worst.0 {
            worst = best;
        }
    }
    AxiomEntry::judged("symmetric_cycle", worst.0, worst.1, rel_tol)
}

/// Determinant by cofactor expansion (intended for `k ≤ 6`).
pub fn cofactor_det(m: &DMatrix<f64>) -> f64 {
    let k = m.nrows();
    match k {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => {
            let mut det = 0.0;
            for j in 0..k {
                let a = m[(0, j)];
                if a == 0.0 {
                    continue;
                }
                let minor = m.clone().remove_row(0).remove_column(j);
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                det += sign * a * cofactor_det(&minor);
            }
            det
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrreducibilityMode {
    /// Rows are multiplied by the sign of their diagonal before taking minors,
    /// which removes the sign of each row's global importance.
    #[default]
    SignNormalized,
    /// Minors of `Φ` as given.
    Literal,
}

fn subsets(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// All principal minors up to `max_subset` must satisfy `det ≥ −tol · scaleᵏ`.
pub fn check_irreducibility(phi: &PhiMatrix, max_subset: usize, tol: f64, mode: IrreducibilityMode) -> AxiomEntry {
    let n = phi.len();
    let scale = phi.scale();
    let mut m = phi.entries.clone();
    if mode == IrreducibilityMode::SignNormalized {
        for i in 0..n {
            if m[(i, i)] < 0.0 {
                m.row_mut(i).neg_mut();
            }
        }
    }
    let mut worst = 0.0_f64;
    let mut witness = None;
    for k in 1..=max_subset.min(n) {
        let norm = if scale > 0.0 { scale.powi(k as i32) } else { 1.0 };
        subsets(n, k, |s| {
            let sub = DMatrix::from_fn(k, k, |a, b| m[(s[a], s[b])]);
            let v = (-cofactor_det(&sub) / norm).max(0.0);
            if v > worst {
                worst = v;
                witness = Some(s.to_vec());
            }
        });
    }
    let mut e = AxiomEntry::judged("irreducibility", worst, witness, tol);
    if mode == IrreducibilityMode::Literal {
        e.note = Some("literal determinants".into());
    }
    e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub deltas: Vec<f64>,
    /// `moduli[d][i] = max_u |φ(xᵢ → x + δ_d u) − φ(xᵢ → x)|`.
    pub moduli: Vec<Vec<f64>>,
    pub entry: AxiomEntry,
}

/// Continuity modulus of `attribute(x)` (scores for every training sample)
/// around `x`, over `num_probes` random unit directions. Passes when the
/// largest modulus is nonincreasing in `δ` up to a small slack and the last one
/// is below `1e-3` of the score scale.
pub fn check_continuity(
    attribute: impl Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    num_probes: usize,
    deltas: &[f64],
    seed: u64,
    applicable: bool,
) -> Result<ContinuityReport> {
    if deltas.windows(2).any(|w| !(w[1] < w[0])) || deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::InvalidConfig("continuity deltas must be non-negative and strictly decreasing".into()));
    }
    if !applicable {
        return Ok(ContinuityReport {
            deltas: deltas.to_vec(),
            moduli: vec![],
            entry: AxiomEntry {
                axiom: "continuity".into(),
                status: Status::NotApplicable,
                worst_violation: 0.0,
                witness: None,
                note: Some("kernel has kinks (ReLU gradients)".into()),
            },
        });
    }
    let base = attribute(x)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..num_probes.max(1))
        .map(|_| {
            let v: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nv = crate::linalg::norm(&v).max(f64::MIN_POSITIVE);
            v.into_iter().map(|c| c / nv).collect()
        })
        .collect();
    let mut moduli = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let mut m = vec![0.0_f64; base.len()];
        for u in &dirs {
            let moved: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + d * b).collect();
            for (mi, (a, b)) in m.iter_mut().zip(attribute(&moved)?.iter().zip(&base)) {
                *mi = mi.max((a - b).abs());
            }
        }
        moduli.push(m);
    }
    let scale = base.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let peaks: Vec<f64> = moduli.iter().map(|m| m.iter().fold(0.0_f64, |a, v| a.max(*v))).collect();
    let mut worst = 0.0_f64;
    let mut witness = None;
    for (k, w) in peaks.windows(2).enumerate() {
        let rise = (w[1] - w[0] - 1e-9 * scale).max(0.0) / scale;
        if rise > worst {
            worst = rise;
            witness = Some(vec![k, k + 1]);
        }
    }
    if let Some(&last) = peaks.last() {
        let excess = (last / scale - 1e-3).max(0.0);
        if excess > worst {
            worst = excess;
            witness = Some(vec![peaks.len() - 1]);
        }
    }
    Ok(ContinuityReport {
        deltas: deltas.to_vec(),
        moduli,
        entry: AxiomEntry::judged("continuity", worst, witness, 0.0),
    })
}

/// Efficiency is reported, never judged: it holds only for models inside the span.
pub fn efficiency_entry(residuals: &[f64]) -> AxiomEntry {
    AxiomEntry {
        axiom: "efficiency".into(),
        status: Status::NotApplicable,
        worst_violation: residuals.iter().fold(0.0_f64, |a, v| a.max(*v)),
        witness: None,
        note: Some("reported only; exact when the model lies in the kernel span".into()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    pub alpha: Vec<f64>,
    pub kernel: DMatrix<f64>,
    /// Connected components of the nonzero-diagonal graph, each sorted.
    pub components: Vec<Vec<usize>>,
    pub references: Vec<usize>,
    pub zero_diagonal: Vec<usize>,
    /// Spanning-tree parent of each node (`None` for references and zero-diagonal rows).
    pub parent: Vec<Option<usize>>,
    pub reconstruction_error: f64,
    pub symmetry_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationFailure {
    pub reason: String,
    pub witness: Vec<usize>,
    pub error: f64,
}

/// `α′` ratio along an explicit path `path[0] = i, …, path[k] = r`, starting
/// from `α′_r = start`.
pub fn alpha_along_path(phi: &PhiMatrix, path: &[usize], start: f64) -> f64 {
    let mut a = start;
    for w in path.windows(2).rev() {
        let (child, parent) = (w[0], w[1]);
        a *= phi.entries[(child, parent)] / phi.entries[(parent, child)];
    }
    a
}

impl Factorization {
    /// Tree path from `i` to its reference.
    pub fn path_to_reference(&self, i: usize) -> Vec<usize> {
        let mut p = vec![i];
        let mut cur = i;
        while let Some(next) = self.parent[cur] {
            p.push(next);
            cur = next;
        }
        p
    }

    fn cycle_through(&self, i: usize, j: usize) -> Vec<usize> {
        let pi = self.path_to_reference(i);
        let pj = self.path_to_reference(j);
        if pi.last() != pj.last() {
            return vec![i, j];
        }
        let common = pi.iter().rev().zip(pj.iter().rev()).take_while(|(a, b)| a == b).count();
        let lca_pos = pi.len() - common;
        let mut cycle: Vec<usize> = pi[..=lca_pos].to_vec();
        let down = &pj[..pj.len() - common];
        cycle.extend(down.iter().rev());
        cycle
    }
}

/// Factor `Φ = diag(α′) K′` with symmetric `K′` following the proof
/// construction: graph over nonzero-diagonal points, one reference per
/// component (its lowest index, `α′_r = sign Φ(r, r)`), ratios along a
/// maximum-weight spanning tree, `K′(i, j) = Φ(i, j)/α′ᵢ` with the absolute
/// value on the diagonal, and zero-diagonal rows filled from their columns.
pub fn factorize(phi: &PhiMatrix, zero_tol: f64, rel_tol: f64) -> std::result::Result<Factorization, FactorizationFailure> {
    let n = phi.len();
    let scale = phi.scale();
    let abs_zero = zero_tol * scale;
    let e = &phi.entries;
    let active: Vec<bool> = (0..n).map(|i| e[(i, i)].abs() > abs_zero).collect();
    let row_scale: Vec<f64> = (0..n).map(|i| phi.row_scale(i).max(f64::MIN_POSITIVE)).collect();
    let weight = |i: usize, j: usize| {
        let (a, b) = (e[(i, j)].abs(), e[(j, i)].abs());
        if a > abs_zero && b > abs_zero {
            (a / row_scale[i]).min(b / row_scale[j])
        } else {
            0.0
        }
    };

    let mut alpha = vec![0.0; n];
    let mut parent = vec![None; n];
    let mut comp_of = vec![usize::MAX; n];
    let mut components = Vec::new();
    let mut references = Vec::new();
    for r in 0..n {
        if !active[r] || comp_of[r] != usize::MAX {
            continue;
        }
        // Component by BFS.
        let id = components.len();
        let mut members = vec![r];
        comp_of[r] = id;
        let mut queue = VecDeque::from([r]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if active[j] && comp_of[j] == usize::MAX && weight(i, j) > 0.0 {
                    comp_of[j] = id;
                    members.push(j);
                    queue.push_back(j);
                }
            }
        }
        members.sort_unstable();
        // Maximum-weight spanning tree (Prim) rooted at the reference.
        alpha[r] = e[(r, r)].signum();
        let mut in_tree = vec![false; n];
        in_tree[r] = true;
        let mut best: Vec<(f64, usize)> = (0..n).map(|j| (weight(r, j), r)).collect();
        for _ in 1..members.len() {
            let (next, _) = members
                .iter()
                .filter(|&&j| !in_tree[j])
                .map(|&j| (j, best[j].0))
                .fold((usize::MAX, -1.0), |acc, (j, w)| if w > acc.1 { (j, w) } else { acc });
            let p = best[next].1;
            in_tree[next] = true;
            parent[next] = Some(p);
            alpha[next] = alpha[p] * e[(next, p)] / e[(p, next)];
            for &j in &members {
                let w = weight(next, j);
                if !in_tree[j] && w > best[j].0 {
                    best[j] = (w, next);
                }
            }
        }
        components.push(members);
        references.push(r);
    }
    let zero_diagonal: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();

    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = match (active[i], active[j]) {
                (true, _) if i == j => (e[(i, i)] / alpha[i]).abs(),
                (true, _) => e[(i, j)] / alpha[i],
                (false, true) => e[(j, i)] / alpha[j],
                (false, false) => 0.0,
            };
        }
    }
    let fact = Factorization {
        alpha,
        kernel: k,
        components,
        references,
        zero_diagonal,
        parent,
        reconstruction_error: 0.0,
        symmetry_error: 0.0,
    };

    let kscale = fact.kernel.amax().max(f64::MIN_POSITIVE);
    let mut sym = (0.0_f64, 0, 0);
    let mut rec = (0.0_f64, 0, 0);
    for i in 0..n {
        for j in 0..n {
            let s = (fact.kernel[(i, j)] - fact.kernel[(j, i)]).abs() / kscale;
            if s > sym.0 {
                sym = (s, i, j);
            }
            let r = (fact.alpha[i] * fact.kernel[(i, j)] - e[(i, j)]).abs() / scale.max(f64::MIN_POSITIVE);
            if r > rec.0 {
                rec = (r, i, j);
            }
        }
    }
    if rec.0 > rel_tol {
        let (_, i, j) = rec;
        let reason = if active[i] {
            "diagonal sign disagrees with the component's importance sign (irreducibility)"
        } else {
            "zero self-attribution with nonzero attribution elsewhere (self-explanation)"
        };
        return Err(FactorizationFailure {
            reason: reason.into(),
            witness: vec![i, j],
            error: rec.0,
        });
    }
    if sym.0 > rel_tol {
        let (_, i, j) = sym;
        let same = active[i] && active[j] && comp_of[i] == comp_of[j];
        let (reason, witness) = if same {
            ("path products disagree around a cycle (symmetric cycle)", fact.cycle_through(i, j))
        } else {
            ("one-sided zero between components (symmetric zero)", vec![i, j])
        };
        return Err(FactorizationFailure {
            reason: reason.into(),
            witness,
            error: sym.0,
        });
    }
    Ok(Factorization {
        reconstruction_error: rec.0,
        symmetry_error: sym.0,
        ..fact
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationSummary {
    pub ok: bool,
    pub components: usize,
    pub zero_diagonal: usize,
    pub reconstruction_error: f64,
    pub symmetry_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FactorizationFailure>,
}

impl FactorizationSummary {
    pub fn from_result(r: &std::result::Result<Factorization, FactorizationFailure>) -> Self {
        match r {
            Ok(f) => FactorizationSummary {
                ok: true,
                components: f.components.len(),
                zero_diagonal: f.zero_diagonal.len(),
                reconstruction_error: f.reconstruction_error,
                symmetry_error: f.symmetry_error,
                failure: None,
            },
            Err(e) => FactorizationSummary {
                ok: false,
                components: 0,
                zero_diagonal: 0,
                reconstruction_error: f64::NAN,
                symmetry_error: f64::NAN,
                failure: Some(e.clone()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub method: String,
    pub entries: Vec<AxiomEntry>,
    pub factorization: FactorizationSummary,
}

impl AxiomReport {
    pub fn any_failed(&self) -> bool {
        self.entries.iter().any(|e| e.status == Status::Fail) || !self.factorization.ok
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("axiom report: {}\n", self.method);
        for e in &self.entries {
            out.push_str(&format!("  {:<17} {:<5} worst {:.3e}", e.axiom, e.status.to_string(), e.worst_violation));
            if let Some(w) = &e.witness {
                out.push_str(&format!("  witness {w:?}"));
            }
            if let Some(n) = &e.note {
                out.push_str(&format!("  ({n})"));
            }
            out.push('\n');
        }
        let f = &self.factorization;
        match &f.failure {
            None => out.push_str(&format!(
                "  factorization     ok    {} component(s), {} zero-diagonal, reconstruction {:.3e}, symmetry {:.3e}\n",
                f.components, f.zero_diagonal, f.reconstruction_error, f.symmetry_error
            )),
            Some(e) => out.push_str(&format!("  factorization     fail  {} witness {:?}\n", e.reason, e.witness)),
        }
        out
    }

    /// Failed factorizations store −1 for the errors, which TOML cannot hold as NaN.
    fn tomlable(&self) -> AxiomReport {
        let mut copy = self.clone();
        if !copy.factorization.ok {
            copy.factorization.reconstruction_error = -1.0;
            copy.factorization.symmetry_error = -1.0;
        }
        copy
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.tomlable()).expect("report is serializable")
    }
}

/// Several reports as a `[[report]]` array.
pub fn reports_to_toml(reports: &[AxiomReport]) -> String {
    #[derive(Serialize)]
    struct Wrapper {
        report: Vec<AxiomReport>,
    }
    toml::to_string(&Wrapper {
        report: reports.iter().map(AxiomReport::tomlable).collect(),
    })
    .expect("reports are serializable")
}

/// Run the matrix checks and the factorization on `phi`.
pub fn check_all(
    method: &str,
    phi: &PhiMatrix,
    extra: &[Vec<f64>],
    tol: &CheckTolerances,
    mode: IrreducibilityMode,
) -> AxiomReport {
    let zero = tol.zero_tol * phi.scale();
    let viol = tol.violation_tol * phi.scale();
    let entries = vec![
        check_self_explanation(phi, extra, zero, viol),
        check_symmetric_zero(phi, tol.zero_tol, tol.violation_tol),
        check_symmetric_cycle(phi, tol.max_cycle_len, tol.zero_tol, tol.violation_tol),
        check_irreducibility(phi, tol.max_subset, tol.violation_tol, mode),
    ];
    let fact = factorize(phi, tol.zero_tol, 1e-9);
    AxiomReport {
        method: method.into(),
        entries,
        factorization: FactorizationSummary::from_result(&fact),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn phi(rows: &[&[f64]]) -> PhiMatrix {
        let n = rows.len();
        PhiMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j])).unwrap()
    }

    fn planted(alpha: &[f64], k: &DMatrix<f64>) -> PhiMatrix {
        PhiMatrix::new(DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| alpha[i] * k[(i, j)])).unwrap()
    }

    fn random_psd(n: usize, rank: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose()
    }

    #[test]
    fn self_explanation_examples() {
        let k = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.3, 0.1, 0.3, 1.5]);
        let p = planted(&[1.0, 0.0, -0.5], &k);
        let e = check_self_explanation(&p, &[], 1e-12, 1e-9);
        assert_eq!((e.status, e.worst_violation, e.witness), (Status::Pass, 0.0, None));

        let bad = phi(&[&[1.0, 0.2], &[0.3, 0.0]]);
        let e = check_self_explanation(&bad, &[], 1e-12, 1e-9);
        assert_eq!(e.status, Status::Fail);
        assert_eq!(e.witness, Some(vec![1, 0]));
        // Probe columns count too.
        let e = check_self_explanation(&planted(&[1.0, 0.0], &DMatrix::identity(2, 2)), &[vec![], vec![0.4]], 1e-12, 1e-9);
        assert_eq!(e.witness, Some(vec![1, 2]));
    }

    #[test]
    fn symmetric_zero_examples() {
        let k = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.2, 0.0, 1.0, 0.4, 0.2, 0.4, 1.0]);
        assert_eq!(check_symmetric_zero(&planted(&[1.0, -3.0, 0.5], &k), 1e-10, 1e-7).status, Status::Pass);
        let bad = phi(&[&[1.0, 0.0], &[0.5, 1.0]]);
        let e = check_symmetric_zero(&bad, 1e-10, 1e-7);
        assert_eq!((e.status, e.witness), (Status::Fail, Some(vec![0, 1])));
    }

    #[test]
    fn symmetric_zero_flags_random_matrices() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let mut failures = 0;
        for _ in 0..20 {
            let mut m = DMatrix::from_fn(4, 4, |_, _| rng.random_range(0.1..1.0));
            m[(0, 2)] = 0.0;
            let p = PhiMatrix::new(m).unwrap();
            if check_symmetric_zero(&p, 1e-10, 1e-7).status == Status::Fail {
                failures += 1;
            }
        }
        assert_eq!(failures, 20);
    }

    #[test]
    fn cycle_examples() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        let k = random_psd(5, 5, &mut rng);
        let p = planted(&[0.5, -2.0, 1.0, 0.0, 3.0], &k);
        assert_eq!(check_symmetric_cycle(&p, 5, 1e-10, 1e-7).status, Status::Pass);

        // Any matrix passes length-2 cycles.
        let m = PhiMatrix::new(DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        assert_eq!(check_symmetric_cycle(&m, 2, 1e-10, 1e-7).worst_violation, 0.0);

        // Planted asymmetric K: K(0,1) = 0.5 but K(1,0) = 0.25.
        let mut k = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.3, 0.5, 1.0, 0.2, 0.3, 0.2, 1.0]);
        k[(1, 0)] = 0.25;
        let e = check_symmetric_cycle(&planted(&[1.0, 1.0, 1.0], &k), 3, 1e-10, 1e-7);
        assert_eq!(e.status, Status::Fail);
        let w = e.witness.unwrap();
        assert!(w.contains(&0) && w.contains(&1) && w.contains(&2), "{w:?}");
        // Forward 0.5·0.2·0.3 = 0.03 against backward 0.25·0.2·0.3 = 0.015: gap 1/2.
        assert!((e.worst_violation - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cycle_products_survive_underflow() {
        // 1e-80 entries: naive products of five would underflow to 0.
        let k = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 1e-80 });
        let e = check_symmetric_cycle(&planted(&[1e-80, 2e-80, 1e-79], &k), 5, 1e-10, 1e-7);
        assert_eq!(e.status, Status::Pass);
    }

    #[test]
    fn determinant_by_cofactors() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        assert!((cofactor_det(&m) - 4.0).abs() < 1e-12);
        let mut rng = Xoshiro256StarStar::seed_from_u64(3);
        let r = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        assert!((cofactor_det(&r) - r.clone().determinant()).abs() < 1e-10);
    }

    #[test]
    fn irreducibility_examples() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(2);
        let k = random_psd(6, 3, &mut rng);
        let p = planted(&[0.3, 1.0, 2.0, 0.5, 0.1, 0.7], &k);
        assert_eq!(check_irreducibility(&p, 5, 1e-7, IrreducibilityMode::Literal).status, Status::Pass);
        // Mixed signs: only the sign-normalized reading passes.
        let p = planted(&[0.3, -1.0, 2.0, 0.5, -0.1, 0.7], &k);
        assert_eq!(check_irreducibility(&p, 5, 1e-7, IrreducibilityMode::SignNormalized).status, Status::Pass);
        assert_eq!(check_irreducibility(&p, 5, 1e-7, IrreducibilityMode::Literal).status, Status::Fail);
        // Indefinite block with positive diagonal.
        let bad = phi(&[&[1.0, 2.0, 0.0], &[2.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let e = check_irreducibility(&bad, 3, 1e-7, IrreducibilityMode::SignNormalized);
        assert_eq!((e.status, e.witness), (Status::Fail, Some(vec![0, 1])));
        // Strictly diagonally dominant with a positive diagonal.
        let dd = phi(&[&[3.0, 1.0, -1.0], &[0.5, 2.0, 1.0], &[-1.0, 0.2, 1.5]]);
        assert_eq!(check_irreducibility(&dd, 3, 1e-7, IrreducibilityMode::Literal).status, Status::Pass);
    }

    #[test]
    fn continuity_examples() {
        let centers = [vec![0.0, 0.0], vec![1.0, -1.0]];
        let rbf = |x: &[f64]| -> Result<Vec<f64>> {
            Ok(centers.iter().map(|c| (-crate::linalg::sq_dist(c, x)).exp()).collect())
        };
        let r = check_continuity(rbf, &[0.3, 0.2], 8, &[1e-1, 1e-2, 1e-3, 1e-4, 1e-5], 0, true).unwrap();
        assert_eq!(r.entry.status, Status::Pass);
        let peaks: Vec<f64> = r.moduli.iter().map(|m| m.iter().cloned().fold(0.0, f64::max)).collect();
        assert!(peaks.windows(2).all(|w| w[1] < w[0]));

        let constant = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![2.0, -1.0]) };
        let r = check_continuity(constant, &[0.0], 4, &[1.0, 0.1], 0, true).unwrap();
        assert!(r.moduli.iter().flatten().all(|v| *v == 0.0));
        let r = check_continuity(rbf, &[0.3, 0.2], 4, &[0.0], 0, true).unwrap();
        assert!(r.moduli[0].iter().all(|v| *v == 0.0));

        let step = |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![if x[0] > 0.0 { 1.0 } else { 0.0 }]) };
        let r = check_continuity(step, &[0.0], 8, &[1e-1, 1e-3, 1e-6], 1, true).unwrap();
        assert_eq!(r.entry.status, Status::Fail);
        let r = check_continuity(step, &[0.0], 8, &[1e-1], 1, false).unwrap();
        assert_eq!(r.entry.status, Status::NotApplicable);
        assert!(check_continuity(step, &[0.0], 1, &[0.1, 0.2], 0, true).is_err());
    }

    #[test]
    fn factorize_trivial_and_mixed_signs() {
        let f = factorize(&phi(&[&[2.5]]), 1e-10, 1e-9).unwrap();
        assert_eq!((f.alpha[0], f.kernel[(0, 0)]), (1.0, 2.5));

        let mut rng = Xoshiro256StarStar::seed_from_u64(9);
        let k = random_psd(6, 6, &mut rng);
        let alpha = [0.4, -1.5, 2.0, -0.3, 1.1, 0.8];
        let p = planted(&alpha, &k);
        let f = factorize(&p, 1e-10, 1e-9).unwrap();
        assert_eq!(f.components.len(), 1);
        let ratio = f.alpha[0] / alpha[0];
        assert!(ratio > 0.0);
        for (a, b) in f.alpha.iter().zip(&alpha) {
            assert!((a / b - ratio).abs() < 1e-10 * ratio);
        }
        assert!(f.reconstruction_error < 1e-12 && f.symmetry_error < 1e-10);
        assert!(crate::kernels::psd_report(&f.kernel).is_psd);
    }

    #[test]
    fn factorize_reports_cycle_witness() {
        let mut k = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.3, 0.5, 1.0, 0.2, 0.3, 0.2, 1.0]);
        k[(2, 0)] = 0.6;
        let err = factorize(&planted(&[1.0, 2.0, 0.5], &k), 1e-10, 1e-9).unwrap_err();
        assert!(err.reason.contains("symmetric cycle"), "{err:?}");
        let mut w = err.witness.clone();
        w.sort_unstable();
        assert_eq!(w, vec![0, 1, 2]);
    }

    #[test]
    fn factorize_reports_self_explanation_failure() {
        let bad = phi(&[&[1.0, 0.2], &[0.3, 0.0]]);
        let err = factorize(&bad, 1e-10, 1e-9).unwrap_err();
        assert!(err.reason.contains("self-explanation"));
        assert_eq!(err.witness, vec![1, 0]);
    }

    #[test]
    fn path_independence_on_a_dense_component() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(4);
        let k = random_psd(5, 5, &mut rng);
        let p = planted(&[0.7, -0.2, 1.3, 0.9, -2.0], &k);
        let direct = alpha_along_path(&p, &[3, 0], 1.0);
        let around = alpha_along_path(&p, &[3, 4, 1, 2, 0], 1.0);
        assert!((direct - around).abs() <= 1e-9 * direct.abs());
        assert!((direct - 0.9 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn report_renders() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(6);
        let k = random_psd(4, 4, &mut rng);
        let p = planted(&[1.0, 0.0, -1.0, 2.0], &k);
        let r = check_all("test", &p, &[], &CheckTolerances::default(), IrreducibilityMode::SignNormalized);
        assert!(!r.any_failed(), "{}", r.to_text());
        let back: AxiomReport = toml::from_str(&r.to_toml()).unwrap();
        assert_eq!(back.entries, r.entries);
        assert!(r.to_text().contains("symmetric_cycle"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn factorization_round_trips(seed in any::<u64>(), n in 1usize..9, blocks in 1usize..4) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            // Block-diagonal PSD kernel with strictly positive diagonal.
            let mut k = DMatrix::zeros(n, n);
            let label: Vec<usize> = (0..n).map(|_| rng.random_range(0..blocks)).collect();
            let feats = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            for i in 0..n {
                for j in 0..n {
                    if label[i] == label[j] {
                        k[(i, j)] = feats.row(i).dot(&feats.row(j)) + if i == j { 0.5 } else { 0.0 };
                    }
                }
            }
            let alpha: Vec<f64> = (0..n)
                .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(-2.0..2.0) })
                .collect();
            let p = planted(&alpha, &k);
            let f = factorize(&p, 1e-10, 1e-9).unwrap();
            prop_assert!(f.reconstruction_error <= 1e-9);
            for comp in &f.components {
                let r = f.alpha[comp[0]] / alpha[comp[0]];
                prop_assert!(r > 0.0);
                for &i in comp {
                    prop_assert!((f.alpha[i] / alpha[i] - r).abs() <= 1e-9 * r);
                }
            }
        }

        #[test]
        fn generalized_form_passes_matrix_axioms(seed in any::<u64>()) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let n = 6;
            let k = random_psd(n, 4, &mut rng);
            let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = check_all("prop", &planted(&alpha, &k), &[], &CheckTolerances { max_cycle_len: 4, ..Default::default() }, IrreducibilityMode::SignNormalized);
            prop_assert!(!r.any_failed(), "{}", r.to_text());
        }
    }
}
