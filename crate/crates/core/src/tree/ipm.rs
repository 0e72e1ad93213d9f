//! Dense infeasible-start primal-dual interior point method for
//!
//! ```text
//! minimise  sum_k w_k psi(a_k . v + o_k)
//! subject   G v <= h,  A v = b
//! ```
//!
//! with `psi` smooth and convex on `(0, inf)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) type Row = Vec<(usize, f64)>;

pub(crate) fn dot(row: &Row, v: &[f64]) -> f64 {
    row.iter().map(|(i, a)| a * v[*i]).sum()
}

pub(crate) struct Term {
    pub row: Row,
    pub offset: f64,
    pub weight: f64,
}

pub(crate) struct Problem<'a> {
    pub dim: usize,
    pub terms: Vec<Term>,
    /// `(psi, psi', psi'')` at a point of `(0, inf)`.
    pub psi: &'a dyn Fn(f64) -> (f64, f64, f64),
    pub ineq: Vec<(Row, f64)>,
    pub eq: Vec<(Row, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IpmOptions {
    /// Target KKT residual.
    pub tol: f64,
    /// Residual still accepted if progress stalls before `tol`.
    pub accept: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct IpmSolution {
    pub v: Vec<f64>,
    pub z: Vec<f64>,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl Problem<'_> {
    fn args(&self, v: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| dot(&t.row, v) + t.offset).collect()
    }

    fn objective(&self, v: &[f64]) -> Option<f64> {
        let mut f = 0.0;
        for t in &self.terms {
            let a = dot(&t.row, v) + t.offset;
            if !(a > 0.0) {
                return None;
            }
            f += t.weight * (self.psi)(a).0;
        }
        f.is_finite().then_some(f)
    }

    fn derivatives(&self, v: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        let mut f = 0.0;
        let mut g = vec![0.0; self.dim];
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for t in &self.terms {
            let a = dot(&t.row, v) + t.offset;
            let (p0, p1, p2) = (self.psi)(a);
            f += t.weight * p0;
            for &(i, ai) in &t.row {
                g[i] += t.weight * p1 * ai;
                for &(j, aj) in &t.row {
                    h[(i, j)] += t.weight * p2 * ai * aj;
                }
            }
        }
        (f, g, h)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn solve_newton(k: &DMatrix<f64>, eq: &[(Row, f64)], rhs: &[f64], eq_rhs: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = k.nrows();
    let scale = (0..n).map(|i| k[(i, i)].abs()).fold(1e-300, f64::max);
    if eq.is_empty() {
        let d: Vec<f64> = (0..n).map(|i| 1.0 / k[(i, i)].abs().max(1e-300 * scale).sqrt()).collect();
        let mut ks = k.clone();
        for j in 0..n {
            for i in 0..n {
                ks[(i, j)] *= d[i] * d[j];
            }
        }
        let b = DVector::from_iterator(n, (0..n).map(|i| rhs[i] * d[i]));
        let mut reg = 1e-15;
        for _ in 0..8 {
            let mut kk = ks.clone();
            for i in 0..n {
                kk[(i, i)] += reg;
            }
            if let Some(ch) = kk.cholesky() {
                let mut y = ch.solve(&b);
                let r = &b - &ks * &y;
                y += ch.solve(&r);
                if y.iter().all(|v| v.is_finite()) {
                    return Some(((0..n).map(|i| y[i] * d[i]).collect(), vec![]));
                }
            }
            reg *= 100.0;
        }
        return None;
    }
    let q = eq.len();
    let mut m = DMatrix::zeros(n + q, n + q);
    m.view_mut((0, 0), (n, n)).copy_from(k);
    for i in 0..n {
        m[(i, i)] += 1e-15 * k[(i, i)].abs().max(1e-300 * scale);
    }
    for (r, (row, _)) in eq.iter().enumerate() {
        for &(j, a) in row {
            m[(n + r, j)] += a;
            m[(j, n + r)] += a;
        }
        m[(n + r, n + r)] -= 1e-15;
    }
    let mut b = DVector::zeros(n + q);
    b.rows_mut(0, n).copy_from_slice(rhs);
    b.rows_mut(n, q).copy_from_slice(eq_rhs);
    let x = m.lu().solve(&b)?;
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((x.rows(0, n).iter().copied().collect(), x.rows(n, q).iter().copied().collect()))
}

/// Runs the method from `v0`, which must lie in the domain of the objective.
pub(crate) fn solve(p: &Problem, v0: Vec<f64>, opts: IpmOptions) -> Result<IpmSolution> {
    let m = p.ineq.len();
    let q = p.eq.len();
    let mut v = v0;
    if p.objective(&v).is_none() {
        return Err(Error::Solver {
            message: "starting point outside the objective's domain".into(),
            residual: f64::INFINITY,
        });
    }
    let h_scale = 1.0 + p.ineq.iter().map(|(_, h)| h.abs()).fold(0.0, f64::max);
    let mut c: Vec<f64> = p.ineq.iter().map(|(row, h)| (h - dot(row, &v)).max(1e-2)).collect();
    let mut z = vec![1.0; m];
    let mut nu = vec![0.0; q];
    let mut rho: f64 = 1.0;
    let mut best = f64::INFINITY;
    let mut best_point: Option<IpmSolution> = None;
    let mut stall = 0;
    let mut extra = 0;

    for iter in 0..opts.max_iter {
        let (f, g, hess) = p.derivatives(&v);
        if !f.is_finite() {
            return Err(Error::Solver {
                message: "objective is not finite; the problem may be unbounded".into(),
                residual: f64::INFINITY,
            });
        }
        let r_p: Vec<f64> = (0..m).map(|i| dot(&p.ineq[i].0, &v) + c[i] - p.ineq[i].1).collect();
        let r_e: Vec<f64> = p.eq.iter().map(|(row, b)| dot(row, &v) - b).collect();
        let mut r_d = g.clone();
        let mut d_scale: Vec<f64> = g.iter().map(|x| x.abs()).collect();
        for i in 0..m {
            for &(j, a) in &p.ineq[i].0 {
                r_d[j] += a * z[i];
                d_scale[j] += (a * z[i]).abs();
            }
        }
        for r in 0..q {
            for &(j, a) in &p.eq[r].0 {
                r_d[j] += a * nu[r];
                d_scale[j] += (a * nu[r]).abs();
            }
        }
        let g_norm = 1.0 + inf_norm(&g);
        let dual_res = r_d
            .iter()
            .zip(&d_scale)
            .map(|(r, s)| r.abs() / g_norm.max(*s))
            .fold(0.0, f64::max);
        let gap = if m > 0 {
            z.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / m as f64
        } else {
            0.0
        };
        let primal_res = (0..m)
            .map(|i| {
                let mag: f64 = p.ineq[i].0.iter().map(|&(j, a)| (a * v[j]).abs()).sum::<f64>() + c[i];
                r_p[i].abs() / h_scale.max(mag)
            })
            .fold(0.0, f64::max);
        let residual = dual_res
            .max(primal_res)
            .max(inf_norm(&r_e))
            .max(gap);
        let finishing = residual <= opts.tol && m == 0 && q == 0 && extra < 5;
        if residual <= opts.tol && !finishing {
            return Ok(IpmSolution {
                v,
                z,
                objective: f,
                residual,
                iterations: iter,
            });
        }
        if best_point.as_ref().is_none_or(|b| residual < b.residual) {
            best_point = Some(IpmSolution {
                v: v.clone(),
                z: z.clone(),
                objective: f,
                residual,
                iterations: iter,
            });
        }
        if residual < 0.5 * best {
            best = residual;
            stall = 0;
        } else {
            stall += 1;
            if stall > 10 {
                break;
            }
        }

        let mu = 0.1 * gap;
        let mut k = hess;
        let mut rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        for i in 0..m {
            let row = &p.ineq[i].0;
            let d = z[i] / c[i];
            let s = (mu + z[i] * r_p[i]) / c[i];
            for &(a, ga) in row {
                rhs[a] -= ga * s;
                for &(b, gb) in row {
                    k[(a, b)] += d * ga * gb;
                }
            }
        }
        let eq_rhs: Vec<f64> = r_e.iter().map(|x| -x).collect();
        let Some((dv, nu_new)) = solve_newton(&k, &p.eq, &rhs, &eq_rhs) else {
            return Err(Error::Solver {
                message: "Newton system could not be factorised".into(),
                residual,
            });
        };
        if finishing {
            // plain Newton steps until the iterate stops moving
            extra += 1;
            let v_new: Vec<f64> = v.iter().zip(&dv).map(|(a, b)| a + b).collect();
            let moved = inf_norm(&dv) > 1e-15 * (1.0 + inf_norm(&v));
            match p.objective(&v_new) {
                Some(f_new) if moved && f_new <= f + 1e-14 * f.abs().max(1.0) => {
                    v = v_new;
                    continue;
                }
                _ => {
                    return Ok(IpmSolution {
                        v,
                        z,
                        objective: f,
                        residual,
                        iterations: iter,
                    })
                }
            }
        }
        let dc: Vec<f64> = (0..m).map(|i| -r_p[i] - dot(&p.ineq[i].0, &dv)).collect();
        let dz: Vec<f64> = (0..m).map(|i| (mu - z[i] * c[i] - z[i] * dc[i]) / c[i]).collect();

        let tau = (1.0 - gap.min(0.01)).max(0.99);
        let mut alpha_p: f64 = 1.0;
        for i in 0..m {
            if dc[i] < 0.0 {
                alpha_p = alpha_p.min(-tau * c[i] / dc[i]);
            }
        }
        let args = p.args(&v);
        for (t, a) in p.terms.iter().zip(&args) {
            let da = dot(&t.row, &dv);
            if da < 0.0 {
                alpha_p = alpha_p.min(-0.9 * a / da);
            }
        }
        let mut alpha_d: f64 = 1.0;
        for i in 0..m {
            if dz[i] < 0.0 {
                alpha_d = alpha_d.min(-tau * z[i] / dz[i]);
            }
        }

        let infeas: f64 = r_p.iter().map(|x| x.abs()).sum::<f64>() + r_e.iter().map(|x| x.abs()).sum::<f64>();
        let smooth_slope: f64 = g.iter().zip(&dv).map(|(a, b)| a * b).sum::<f64>()
            - if m > 0 { mu * (0..m).map(|i| dc[i] / c[i]).sum::<f64>() } else { 0.0 };
        let mult = inf_norm(&z).max(inf_norm(&nu_new));
        rho = rho.max(mult + 1.0);
        if infeas > 0.0 && smooth_slope > 0.0 {
            rho = rho.max(2.0 * smooth_slope / infeas);
        }
        let merit = |v: &[f64], c: &[f64]| -> Option<f64> {
            let f = p.objective(v)?;
            let mut bar = 0.0;
            let mut inf = 0.0;
            for i in 0..m {
                if !(c[i] > 0.0) {
                    return None;
                }
                if mu > 0.0 {
                    bar -= mu * c[i].ln();
                }
                inf += (dot(&p.ineq[i].0, v) + c[i] - p.ineq[i].1).abs();
            }
            for (row, b) in &p.eq {
                inf += (dot(row, v) - b).abs();
            }
            Some(f + bar + rho * inf)
        };
        let m0 = merit(&v, &c).unwrap_or(f64::INFINITY);
        let slope = smooth_slope - rho * infeas;
        let mut alpha = alpha_p;
        let mut accepted = false;
        for _ in 0..60 {
            let v_new: Vec<f64> = v.iter().zip(&dv).map(|(a, b)| a + alpha * b).collect();
            let c_new: Vec<f64> = c.iter().zip(&dc).map(|(a, b)| a + alpha * b).collect();
            if let Some(m1) = merit(&v_new, &c_new) {
                let allowance = 1e-4 * alpha * slope.min(0.0) + 1e-13 * m0.abs().max(1.0);
                if m1 <= m0 + allowance {
                    v = v_new;
                    c = c_new;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        let ad = alpha_d.min(1.0);
        for i in 0..m {
            z[i] += ad * dz[i];
        }
        for r in 0..q {
            nu[r] += alpha.max(ad.min(alpha_p)) * (nu_new[r] - nu[r]);
        }
    }
    match best_point {
        Some(b) if b.residual <= opts.accept => Ok(b),
        b => Err(Error::Solver {
            message: "interior point method did not converge".into(),
            residual: b.map_or(f64::INFINITY, |b| b.residual),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> IpmOptions {
        IpmOptions {
            tol: 1e-12,
            accept: 1e-9,
            max_iter: 200,
        }
    }

    #[test]
    fn bounded_log_barrier_problem() {
        // max log(1 + v) + log(1 - v/2)  s.t. v <= 0.25; unconstrained optimum 0.5
        let psi = |t: f64| (-t.ln(), -1.0 / t, 1.0 / (t * t));
        let p = Problem {
            dim: 1,
            terms: vec![
                Term { row: vec![(0, 1.0)], offset: 1.0, weight: 1.0 },
                Term { row: vec![(0, -0.5)], offset: 1.0, weight: 1.0 },
            ],
            psi: &psi,
            ineq: vec![(vec![(0, 1.0)], 0.25)],
            eq: vec![],
        };
        let s = solve(&p, vec![0.0], opts()).unwrap();
        assert!((s.v[0] - 0.25).abs() < 1e-10);
        // multiplier = -d/dv objective at 0.25
        let grad = 1.0 / 1.25 - 0.5 / 0.875;
        assert!((s.z[0] - grad).abs() < 1e-8);

        let free = Problem { ineq: vec![], ..p };
        let s = solve(&free, vec![0.0], opts()).unwrap();
        assert!((s.v[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn equality_constrained() {
        // min sum -log(v_i) s.t. v0 + v1 = 1, v0 <= 0.3 from an infeasible start
        let psi = |t: f64| (-t.ln(), -1.0 / t, 1.0 / (t * t));
        let p = Problem {
            dim: 2,
            terms: vec![
                Term { row: vec![(0, 1.0)], offset: 0.0, weight: 1.0 },
                Term { row: vec![(1, 1.0)], offset: 0.0, weight: 1.0 },
            ],
            psi: &psi,
            ineq: vec![(vec![(0, 1.0)], 0.3)],
            eq: vec![(vec![(0, 1.0), (1, 1.0)], 1.0)],
        };
        let s = solve(&p, vec![0.5, 2.0], opts()).unwrap();
        assert!((s.v[0] - 0.3).abs() < 1e-10, "{:?}", s.v);
        assert!((s.v[1] - 0.7).abs() < 1e-10);
    }
}
