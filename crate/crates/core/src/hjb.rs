//! Finite-difference reference solutions of the linear boundary value problem
//!
//! ```text
//! β⁻¹ ΔΨ − ∇V·∇Ψ − f Ψ = 0   on 𝒮 = 𝒟 ∖ 𝒯
//!                     Ψ = e^{−g} on ∂𝒮
//! ```
//!
//! together with the derived value function `Φ = −log Ψ` and the optimal
//! control `u* = σ ∇log Ψ`. Grid nodes on the boundary of the domain box or
//! inside the target box carry Dirichlet data; all other nodes are unknowns.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::controls::{sigma, Control, TabulatedField};
use crate::dynamics::{BoxSet, RunningCost, TerminalCost};
use crate::error::{check_dim, Error, Result};
use crate::potential::PotentialSpec;

pub const HJB_CSV_SCHEMA: &str = "#schema=metais-hjb-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct HjbProblem {
    pub potential: PotentialSpec,
    pub beta: f64,
    pub domain: BoxSet,
    pub target: BoxSet,
    pub running_cost: RunningCost,
    pub terminal_cost: TerminalCost,
    /// Grid spacing per axis.
    pub h: Vec<f64>,
}

/// Discretization of the drift term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftScheme {
    Central,
    Upwind,
}

/// Regular tensor grid. Node `j` has multi-index `(i_1, …, i_d)` with the
/// first axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub h: Vec<f64>,
    pub n: Vec<usize>,
}

impl Grid {
    fn over(domain: &BoxSet, h: &[f64]) -> Result<Self> {
        check_dim(domain.dim(), h.len())?;
        let mut n = Vec::with_capacity(h.len());
        for ((lo, hi), hk) in domain.lo.iter().zip(&domain.hi).zip(h) {
            if !(*hk > 0.0) {
                return Err(Error::Input("grid spacing must be positive".into()));
            }
            let cells = (hi - lo) / hk;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-9 * rounded.max(1.0) || rounded < 2.0 {
                return Err(Error::Input(format!("grid spacing {hk} does not divide [{lo}, {hi}] into ≥ 2 cells")));
            }
            n.push(rounded as usize + 1);
        }
        Ok(Self { lo: domain.lo.clone(), h: h.to_vec(), n })
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut j: usize) -> Vec<usize> {
        self.n
            .iter()
            .map(|&m| {
                let i = j % m;
                j /= m;
                i
            })
            .collect()
    }

    pub fn coords(&self, j: usize) -> Vec<f64> {
        self.multi_index(j)
            .iter()
            .zip(&self.lo)
            .zip(&self.h)
            .map(|((&i, lo), h)| lo + i as f64 * h)
            .collect()
    }

    fn stride(&self, axis: usize) -> usize {
        self.n[..axis].iter().product()
    }

    /// Node index closest to `x`.
    pub fn nearest(&self, x: &[f64]) -> Result<usize> {
        check_dim(self.dim(), x.len())?;
        let mut j = 0;
        for k in (0..self.dim()).rev() {
            let i = ((x[k] - self.lo[k]) / self.h[k]).round().clamp(0.0, (self.n[k] - 1) as f64) as usize;
            j = j * self.n[k] + i;
        }
        Ok(j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HjbSolution {
    pub grid: Grid,
    pub beta: f64,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    /// Node-major `u*`, `d` components per node.
    pub ustar: Vec<f64>,
    /// Max-norm residual of the discrete operator on unknown nodes, scaled by
    /// `‖Ψ‖∞`.
    pub residual_norm: f64,
    pub scheme: DriftScheme,
}

fn in_box_tol(b: &BoxSet, x: &[f64], tol: f64) -> bool {
    x.iter().zip(&b.lo).zip(&b.hi).all(|((v, l), h)| *l - tol <= *v && *v <= *h + tol)
}

/// Assembled sparse operator: for each node, a list of (column, coefficient).
/// Dirichlet rows are identity rows.
struct Assembly {
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    unknown: Vec<bool>,
    dirichlet_max: f64,
}

fn assemble(p: &HjbProblem, grid: &Grid, scheme: DriftScheme) -> Assembly {
    let d = grid.dim();
    let len = grid.len();
    let diff = 1.0 / p.beta;
    let f = p.running_cost.value();
    let tol = 1e-9 * grid.h.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut rows = Vec::with_capacity(len);
    let mut rhs = vec![0.0; len];
    let mut unknown = vec![false; len];
    let mut dirichlet_max = f64::NEG_INFINITY;
    let mut grad = vec![0.0; d];
    for j in 0..len {
        let idx = grid.multi_index(j);
        let x = grid.coords(j);
        let on_edge = idx.iter().zip(&grid.n).any(|(&i, &m)| i == 0 || i == m - 1);
        if on_edge || in_box_tol(&p.target, &x, tol) {
            let value = (-p.terminal_cost.value(&x)).exp();
            dirichlet_max = dirichlet_max.max(value);
            rows.push(vec![(j, 1.0)]);
            rhs[j] = value;
            continue;
        }
        unknown[j] = true;
        p.potential.gradient_into(&x, &mut grad);
        let mut row = Vec::with_capacity(2 * d + 1);
        let mut diag = -f;
        for k in 0..d {
            let h = grid.h[k];
            let s = grid.stride(k);
            let a = diff / (h * h);
            let b = -grad[k];
            let (lower, upper) = match scheme {
                DriftScheme::Central => (a - b / (2.0 * h), a + b / (2.0 * h)),
                DriftScheme::Upwind => (a - b.min(0.0) / h, a + b.max(0.0) / h),
            };
            diag -= lower + upper;
            row.push((j - s, lower));
            row.push((j + s, upper));
        }
        row.push((j, diag));
        row.sort_by_key(|e| e.0);
        rows.push(row);
    }
    Assembly { rows, rhs, unknown, dirichlet_max }
}

/// Thomas algorithm for a tridiagonal system given as rows of at most three
/// entries on columns `j−1, j, j+1`.
fn solve_tridiagonal(rows: &[Vec<(usize, f64)>], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rows.len();
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for (j, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            match c as isize - j as isize {
                -1 => sub[j] = v,
                0 => diag[j] = v,
                1 => sup[j] = v,
                _ => return Err(Error::Solver("matrix is not tridiagonal".into())),
            }
        }
    }
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    for j in 0..n {
        let denom = diag[j] - if j > 0 { sub[j] * cp[j - 1] } else { 0.0 };
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Solver(format!("zero pivot at row {j}")));
        }
        cp[j] = sup[j] / denom;
        dp[j] = (rhs[j] - if j > 0 { sub[j] * dp[j - 1] } else { 0.0 }) / denom;
    }
    let mut x = vec![0.0; n];
    for j in (0..n).rev() {
        x[j] = dp[j] - if j + 1 < n { cp[j] * x[j + 1] } else { 0.0 };
    }
    Ok(x)
}

/// Banded Gaussian elimination without pivoting.
fn solve_banded(rows: &[Vec<(usize, f64)>], rhs: &[f64], bw: usize) -> Result<Vec<f64>> {
    let n = rows.len();
    let width = 2 * bw + 1;
    let mut band = vec![0.0; n * width];
    // band[i*width + (c - i + bw)] = A[i][c]
    for (i, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            let off = c + bw - i;
            if off >= width {
                return Err(Error::Solver("entry outside band".into()));
            }
            band[i * width + off] += v;
        }
    }
    let mut b = rhs.to_vec();
    for k in 0..n {
        let pivot = band[k * width + bw];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::Solver(format!("zero pivot at row {k}")));
        }
        let last = (k + bw).min(n - 1);
        for i in k + 1..=last {
            let a_ik = band[i * width + (k + bw - i)];
            if a_ik == 0.0 {
                continue;
            }
            let l = a_ik / pivot;
            let (upper, lower) = band.split_at_mut(i * width);
            let krow = &upper[k * width..(k + 1) * width];
            let irow = &mut lower[..width];
            for c in k..=last {
                irow[c + bw - i] -= l * krow[c + bw - k];
            }
            b[i] -= l * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let last = (k + bw).min(n - 1);
        let mut s = b[k];
        for c in k + 1..=last {
            s -= band[k * width + (c + bw - k)] * x[c];
        }
        x[k] = s / band[k * width + bw];
    }
    Ok(x)
}

fn residual(asm: &Assembly, psi: &[f64]) -> f64 {
    let scale = psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut r = 0.0f64;
    for (j, row) in asm.rows.iter().enumerate() {
        if !asm.unknown[j] {
            continue;
        }
        let s: f64 = row.iter().map(|&(c, v)| v * psi[c]).sum();
        r = r.max((s - asm.rhs[j]).abs());
    }
    if scale > 0.0 {
        r / scale
    } else {
        r
    }
}

fn check_maximum_principle(psi: &[f64], bound: f64) -> Result<()> {
    for (j, &v) in psi.iter().enumerate() {
        if !(v > 0.0) || v > bound * (1.0 + 1e-10) {
            return Err(Error::MaximumPrinciple { node: j, value: v });
        }
    }
    Ok(())
}

fn solve_with(p: &HjbProblem, grid: &Grid, scheme: DriftScheme) -> Result<(Vec<f64>, f64)> {
    let asm = assemble(p, grid, scheme);
    let psi = if grid.dim() == 1 {
        solve_tridiagonal(&asm.rows, &asm.rhs)?
    } else {
        let bw = grid.stride(grid.dim() - 1);
        solve_banded(&asm.rows, &asm.rhs, bw)?
    };
    check_maximum_principle(&psi, asm.dirichlet_max)?;
    Ok((psi.clone(), residual(&asm, &psi)))
}

fn validate(p: &HjbProblem, dim: usize) -> Result<Grid> {
    check_dim(dim, p.potential.dim())?;
    check_dim(dim, p.domain.dim())?;
    check_dim(dim, p.target.dim())?;
    if !(p.beta.is_finite() && p.beta > 0.0) {
        return Err(Error::Input("beta must be positive".into()));
    }
    Grid::over(&p.domain, &p.h)
}

fn solve(p: &HjbProblem, grid: Grid) -> Result<HjbSolution> {
    let (psi, res, scheme) = match solve_with(p, &grid, DriftScheme::Central) {
        Ok((psi, r)) => (psi, r, DriftScheme::Central),
        Err(Error::MaximumPrinciple { .. }) => {
            let (psi, r) = solve_with(p, &grid, DriftScheme::Upwind)?;
            (psi, r, DriftScheme::Upwind)
        }
        Err(e) => return Err(e),
    };
    let phi: Vec<f64> = psi.iter().map(|v| -v.ln()).collect();
    let ustar = optimal_control(&grid, &psi, sigma(p.beta));
    Ok(HjbSolution { grid, beta: p.beta, psi, phi, ustar, residual_norm: res, scheme })
}

/// `σ ∇Ψ / Ψ` with central differences in the interior and one-sided
/// differences on the grid edges.
fn optimal_control(grid: &Grid, psi: &[f64], sig: f64) -> Vec<f64> {
    let d = grid.dim();
    let mut u = vec![0.0; psi.len() * d];
    for j in 0..psi.len() {
        let idx = grid.multi_index(j);
        for k in 0..d {
            let s = grid.stride(k);
            let h = grid.h[k];
            let dpsi = if idx[k] == 0 {
                (psi[j + s] - psi[j]) / h
            } else if idx[k] == grid.n[k] - 1 {
                (psi[j] - psi[j - s]) / h
            } else {
                (psi[j + s] - psi[j - s]) / (2.0 * h)
            };
            u[j * d + k] = sig * dpsi / psi[j];
        }
    }
    u
}

pub fn solve_hjb_1d(p: &HjbProblem) -> Result<HjbSolution> {
    let grid = validate(p, 1)?;
    solve(p, grid)
}

pub fn solve_hjb_2d(p: &HjbProblem) -> Result<HjbSolution> {
    let grid = validate(p, 2)?;
    solve(p, grid)
}

/// Dispatches on the problem dimension.
pub fn solve_hjb(p: &HjbProblem) -> Result<HjbSolution> {
    match p.potential.dim() {
        1 => solve_hjb_1d(p),
        2 => solve_hjb_2d(p),
        d => Err(Error::Input(format!("finite-difference reference solutions support d ≤ 2, got {d}"))),
    }
}

/// Multilinear interpolation of `u*`, clamped to the grid.
pub fn interpolate_control(sol: &HjbSolution, x: &[f64]) -> Result<Vec<f64>> {
    sol.field()?.interpolate(x)
}

impl HjbSolution {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn field(&self) -> Result<TabulatedField> {
        TabulatedField::new(self.grid.lo.clone(), self.grid.h.clone(), self.grid.n.clone(), self.ustar.clone())
    }

    /// The interpolated reference control as a [`Control`].
    pub fn control(&self) -> Result<Control> {
        Ok(Control::Tabulated(self.field()?))
    }

    /// `Ψ` at the node nearest to `x`.
    pub fn psi_at(&self, x: &[f64]) -> Result<f64> {
        Ok(self.psi[self.grid.nearest(x)?])
    }

    /// `−σ ∇Φ` by differences of `Φ`, for consistency checks.
    pub fn ustar_from_phi(&self) -> Vec<f64> {
        let neg_phi: Vec<f64> = self.phi.iter().map(|v| -v).collect();
        let d = self.dim();
        let sig = sigma(self.beta);
        let mut u = vec![0.0; self.psi.len() * d];
        for j in 0..self.psi.len() {
            let idx = self.grid.multi_index(j);
            for k in 0..d {
                let s = self.grid.stride(k);
                let h = self.grid.h[k];
                let g = if idx[k] == 0 {
                    (neg_phi[j + s] - neg_phi[j]) / h
                } else if idx[k] == self.grid.n[k] - 1 {
                    (neg_phi[j] - neg_phi[j - s]) / h
                } else {
                    (neg_phi[j + s] - neg_phi[j - s]) / (2.0 * h)
                };
                u[j * d + k] = sig * g;
            }
        }
        u
    }

    /// CSV with a schema comment line, a header row and one row per node:
    /// `x_1..x_d, psi, phi, u_1..u_d`. Floats use shortest round-trip
    /// formatting, so reading the file back is exact.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        writeln!(out, "{HJB_CSV_SCHEMA} beta={:?} scheme={:?}", self.beta, self.scheme)?;
        let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
        header.push("psi".into());
        header.push("phi".into());
        header.extend((1..=d).map(|k| format!("u_{k}")));
        writeln!(out, "{}", header.join(","))?;
        for j in 0..self.psi.len() {
            let mut fields: Vec<String> = self.grid.coords(j).iter().map(|v| format!("{v:?}")).collect();
            fields.push(format!("{:?}", self.psi[j]));
            fields.push(format!("{:?}", self.phi[j]));
            fields.extend(self.ustar[j * d..(j + 1) * d].iter().map(|v| format!("{v:?}")));
            writeln!(out, "{}", fields.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a file produced by [`HjbSolution::write_csv`]. The residual is
    /// not stored and comes back as NaN.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::Input("empty HJB file".into()))??;
        let mut beta = None;
        let mut scheme = DriftScheme::Central;
        if !first.starts_with(HJB_CSV_SCHEMA) {
            return Err(Error::Input(format!("missing schema line `{HJB_CSV_SCHEMA}`")));
        }
        for tok in first.split_whitespace().skip(1) {
            if let Some(v) = tok.strip_prefix("beta=") {
                beta = Some(v.parse::<f64>().map_err(|e| Error::Input(e.to_string()))?);
            } else if tok == "scheme=Upwind" {
                scheme = DriftScheme::Upwind;
            }
        }
        let beta = beta.ok_or_else(|| Error::Input("schema line lacks beta".into()))?;
        let header = lines.next().ok_or_else(|| Error::Input("missing header".into()))??;
        let cols = header.split(',').count();
        if cols < 4 || (cols - 2) % 2 != 0 {
            return Err(Error::Input("malformed HJB header".into()));
        }
        let d = (cols - 2) / 2;
        let mut coords: Vec<Vec<f64>> = Vec::new();
        let (mut psi, mut phi, mut ustar) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Input(format!("{e}: `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            check_dim(cols, vals.len())?;
            coords.push(vals[..d].to_vec());
            psi.push(vals[d]);
            phi.push(vals[d + 1]);
            ustar.extend_from_slice(&vals[d + 2..]);
        }
        let mut lo = Vec::with_capacity(d);
        let mut h = Vec::with_capacity(d);
        let mut n = Vec::with_capacity(d);
        let mut stride = 1;
        for k in 0..d {
            let mut axis: Vec<f64> = coords.iter().map(|c| c[k]).collect();
            axis.sort_by(f64::total_cmp);
            axis.dedup();
            if axis.len() < 2 {
                return Err(Error::Input("HJB grid needs ≥ 2 nodes per axis".into()));
            }
            lo.push(axis[0]);
            let m = axis.len();
            h.push((axis[m - 1] - axis[0]) / (m - 1) as f64);
            n.push(m);
            if coords.len() > stride && coords[stride][k] <= coords[0][k] && m > 1 {
                return Err(Error::Input("HJB nodes are not in grid order".into()));
            }
            stride *= m;
        }
        let grid = Grid { lo, h, n };
        check_dim(grid.len(), psi.len())?;
        Ok(Self { grid, beta, psi, phi, ustar, residual_norm: f64::NAN, scheme })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem_1d(alpha: f64, f: RunningCost, h: f64) -> HjbProblem {
        HjbProblem {
            potential: PotentialSpec::new(vec![alpha]).unwrap(),
            beta: 1.0,
            domain: BoxSet::cube(1, -3.0, 3.0).unwrap(),
            target: BoxSet::cube(1, 1.0, 3.0).unwrap(),
            running_cost: f,
            terminal_cost: TerminalCost::Zero,
            h: vec![h],
        }
    }

    fn problem_2d(alpha: f64, f: RunningCost, h: f64) -> HjbProblem {
        HjbProblem {
            potential: PotentialSpec::new(vec![alpha, alpha]).unwrap(),
            beta: 1.0,
            domain: BoxSet::cube(2, -3.0, 3.0).unwrap(),
            target: BoxSet::cube(2, 1.0, 3.0).unwrap(),
            running_cost: f,
            terminal_cost: TerminalCost::Zero,
            h: vec![h, h],
        }
    }

    #[test]
    fn zero_cost_gives_constant_solution() {
        let s = solve_hjb_1d(&problem_1d(3.0, RunningCost::Zero, 0.01)).unwrap();
        assert!(s.psi.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(s.phi.iter().all(|v| v.abs() < 1e-12));
        assert!(s.ustar.iter().all(|v| v.abs() < 1e-9));
        assert_eq!(s.psi[0], 1.0);
        assert_eq!(*s.psi.last().unwrap(), 1.0);
        assert!(interpolate_control(&s, &[-0.37]).unwrap()[0].abs() < 1e-9);

        let s2 = solve_hjb_2d(&problem_2d(1.0, RunningCost::Zero, 0.1)).unwrap();
        assert!(s2.psi.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn residual_and_maximum_principle() {
        let s = solve_hjb_1d(&problem_1d(1.0, RunningCost::One, 1e-3)).unwrap();
        assert_eq!(s.scheme, DriftScheme::Central);
        assert!(s.residual_norm <= 1e-8, "{}", s.residual_norm);
        assert!(s.psi.iter().all(|v| *v > 0.0 && *v <= 1.0 + 1e-12));
        for (p, f) in s.psi.iter().zip(&s.phi) {
            assert!(((-f).exp() - p).abs() <= 1e-12 * p);
        }
        let i = s.grid.nearest(&[-1.0]).unwrap();
        assert!((s.grid.coords(i)[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn control_from_psi_matches_phi_differences() {
        let s = solve_hjb_1d(&problem_1d(2.0, RunningCost::One, 1e-3)).unwrap();
        let alt = s.ustar_from_phi();
        // skip the Dirichlet layer at the left edge of the domain
        let from = s.grid.nearest(&[-2.9]).unwrap();
        for (a, b) in s.ustar[from..].iter().zip(&alt[from..]) {
            assert!((a - b).abs() <= 1e-3 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn optimal_control_peaks_inside_well() {
        let s = solve_hjb_1d(&problem_1d(5.0, RunningCost::One, 1e-3)).unwrap();
        let (mut best, mut at) = (f64::NEG_INFINITY, 0.0);
        for j in 0..s.psi.len() {
            let x = s.grid.coords(j)[0];
            // nodes inside the Dirichlet layer at x = −3 are excluded
            if x >= -2.9 && x <= 1.0 && s.ustar[j].abs() > best {
                best = s.ustar[j].abs();
                at = x;
            }
        }
        assert!(at > -1.5 && at < 0.0, "max |u*| at {at}");
    }

    #[test]
    fn interpolation_identities() {
        let s = solve_hjb_1d(&problem_1d(1.0, RunningCost::One, 0.01)).unwrap();
        let j = 150;
        let x = s.grid.coords(j);
        assert_eq!(interpolate_control(&s, &x).unwrap()[0], s.ustar[j]);
        let mid = [x[0] + 0.005];
        let m = interpolate_control(&s, &mid).unwrap()[0];
        assert!((m - 0.5 * (s.ustar[j] + s.ustar[j + 1])).abs() < 1e-12);
        // clamping
        assert_eq!(interpolate_control(&s, &[-10.0]).unwrap()[0], s.ustar[0]);
        assert_eq!(interpolate_control(&s, &[10.0]).unwrap()[0], *s.ustar.last().unwrap());
    }

    #[test]
    fn grid_spacing_must_divide_domain() {
        assert!(solve_hjb_1d(&problem_1d(1.0, RunningCost::One, 0.007)).is_err());
        assert!(solve_hjb_2d(&problem_1d(1.0, RunningCost::One, 0.01)).is_err());
        assert!(solve_hjb_1d(&problem_2d(1.0, RunningCost::One, 0.1)).is_err());
    }

    #[test]
    fn banded_solver_matches_tridiagonal() {
        let p = problem_1d(2.0, RunningCost::One, 0.01);
        let grid = Grid::over(&p.domain, &p.h).unwrap();
        let asm = assemble(&p, &grid, DriftScheme::Central);
        let a = solve_tridiagonal(&asm.rows, &asm.rhs).unwrap();
        let b = solve_banded(&asm.rows, &asm.rhs, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs());
        }
    }

    #[test]
    fn two_dimensional_solution_is_symmetric() {
        let s = solve_hjb_2d(&problem_2d(1.0, RunningCost::One, 0.1)).unwrap();
        assert!(s.residual_norm <= 1e-8);
        let n = s.grid.n[0];
        for i in 0..n {
            for k in 0..n {
                let a = s.psi[i + n * k];
                let b = s.psi[k + n * i];
                assert!((a - b).abs() <= 1e-10 * a);
            }
        }
    }

    #[test]
    fn second_order_self_convergence_2d() {
        // a smaller domain keeps the central stencil monotone on all three grids
        let x = [-1.0, -1.0];
        let v: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h| {
                let mut p = problem_2d(1.0, RunningCost::One, h);
                p.domain = BoxSet::cube(2, -2.0, 2.0).unwrap();
                p.target = BoxSet::cube(2, 1.0, 2.0).unwrap();
                let s = solve_hjb_2d(&p).unwrap();
                assert_eq!(s.scheme, DriftScheme::Central);
                s.psi_at(&x).unwrap()
            })
            .collect();
        let d1 = (v[0] - v[1]).abs();
        let d2 = (v[1] - v[2]).abs();
        // ratio of successive differences ≈ 4 for a second-order stencil
        let ratio = d1 / d2;
        assert!(ratio > 3.0 && ratio < 5.5, "ratio {ratio} ({v:?})");
    }

    #[test]
    fn upwind_fallback_on_coarse_grid() {
        let s = solve_hjb_1d(&problem_1d(5.0, RunningCost::One, 0.1)).unwrap();
        assert!(s.psi.iter().all(|v| *v > 0.0 && *v <= 1.0 + 1e-12));
        let central = solve_with(&problem_1d(5.0, RunningCost::One, 0.1), &s.grid, DriftScheme::Central);
        if central.is_err() {
            assert_eq!(s.scheme, DriftScheme::Upwind);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = solve_hjb_2d(&problem_2d(1.0, RunningCost::One, 0.5)).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = HjbSolution::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.psi, s.psi);
        assert_eq!(back.phi, s.phi);
        assert_eq!(back.ustar, s.ustar);
        assert_eq!(back.grid.n, s.grid.n);
        assert_eq!(back.beta, s.beta);
        let x = [-0.33, 0.71];
        assert_eq!(interpolate_control(&back, &x).unwrap(), interpolate_control(&s, &x).unwrap());
        assert!(HjbSolution::read_csv(std::io::Cursor::new(b"x_1,psi\n".to_vec())).is_err());
    }
}
