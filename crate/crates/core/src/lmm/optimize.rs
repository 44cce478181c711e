//! Box-constrained minimization: projected BFGS with a Nelder-Mead fallback.

/// Objective to be minimized. Returning `None` marks an infeasible point
/// (e.g. a failed factorization); line searches back off from it.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Option<f64>;
    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub max_iter: usize,
    /// Converged once the projected gradient max-norm falls below this.
    pub grad_tol: f64,
    /// Stall test: relative objective change and parameter change.
    pub rel_f_tol: f64,
    pub x_tol: f64,
    /// Projected gradient bound that a stalled run must still meet, per
    /// 1000 units of objective magnitude (at least this bound).
    pub stall_grad_tol: f64,
    /// Largest coordinate change of a single step.
    pub max_step: f64,
    /// Seed the inverse Hessian with a finite-difference diagonal instead
    /// of a scaled identity. Costs one gradient per coordinate.
    pub diagonal_init: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_f_tol: 1e-8,
            x_tol: 1e-6,
            stall_grad_tol: 1e-4,
            max_step: 4.0,
            diagonal_init: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub used_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn at_lower(&self, x: &[f64], i: usize) -> bool {
        x[i] <= self.lower[i] + 1e-12
    }

    fn at_upper(&self, x: &[f64], i: usize) -> bool {
        x[i] >= self.upper[i] - 1e-12
    }

    /// Gradient with components that point out of the box zeroed.
    pub fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                if (self.at_lower(x, i) && gi > 0.0) || (self.at_upper(x, i) && gi < 0.0) {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `obj` from `x0`. BFGS runs first; if its line search fails
/// or it stalls with a large gradient, a Nelder-Mead pass restarts it.
pub fn minimize<O: Objective>(obj: &mut O, x0: &[f64], bounds: &Bounds, settings: &Settings) -> Option<Outcome> {
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut out = bfgs(obj, &x, bounds, settings, settings.max_iter)?;
    if out.converged {
        return Some(out);
    }
    let simplex = nelder_mead(obj, &out.x, bounds, 200 * (x.len() + 1));
    let iterations = out.iterations;
    if let Some(xs) = simplex {
        let remaining = settings.max_iter.saturating_sub(iterations).max(50);
        if let Some(mut polished) = bfgs(obj, &xs, bounds, settings, remaining) {
            if polished.f <= out.f + 1e-9 * out.f.abs().max(1.0) || polished.converged {
                polished.iterations += iterations;
                polished.used_fallback = true;
                out = polished;
            }
        }
    }
    Some(out)
}

fn bfgs<O: Objective>(obj: &mut O, x0: &[f64], bounds: &Bounds, s: &Settings, max_iter: usize) -> Option<Outcome> {
    let d = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.value_grad(&x)?;
    let h0 = if s.diagonal_init {
        diagonal_inverse(obj, &x, &g, bounds)
    } else {
        None
    };
    let reset = |h0: &Option<Vec<f64>>| match h0 {
        Some(diag) => {
            let mut h = identity(d);
            h.iter_mut().enumerate().for_each(|(i, row)| row[i] = diag[i]);
            h
        }
        None => identity(d),
    };
    let mut hinv = reset(&h0);
    let mut fresh = h0.is_none();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let pg = bounds.projected_gradient(&x, &g);
        if max_abs(&pg) <= s.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let free: Vec<bool> = (0..d).map(|i| pg[i] != 0.0 || g[i] == 0.0).collect();
        let mut dir = vec![0.0; d];
        for i in 0..d {
            if !free[i] {
                continue;
            }
            dir[i] = -(0..d).filter(|&j| free[j]).map(|j| hinv[i][j] * g[j]).sum::<f64>();
        }
        if dir.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            hinv = identity(d);
            fresh = true;
            dir = pg.iter().map(|v| -v).collect();
        }
        let big = max_abs(&dir);
        if big > s.max_step {
            dir.iter_mut().for_each(|v| *v *= s.max_step / big);
        }

        let step = line_search(obj, &x, f, &g, &dir, bounds);
        let Some((x_new, f_new)) = step else {
            if fresh {
                // no descent along the steepest direction: accept only if
                // the gradient is already at noise level
                converged = stalled_ok(&pg, f, s);
                break;
            }
            hinv = identity(d);
            fresh = true;
            continue;
        };
        let Some((f_chk, g_new)) = obj.value_grad(&x_new) else {
            hinv = reset(&h0);
            fresh = h0.is_none();
            continue;
        };
        debug_assert!((f_chk - f_new).abs() <= 1e-9 * f_new.abs().max(1.0));
        let sv: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let yy: f64 = yv.iter().map(|v| v * v).sum();
        let ss: f64 = sv.iter().map(|v| v * v).sum();
        if sy > 1e-10 * (ss * yy).sqrt() {
            if fresh {
                let gamma = sy / yy;
                hinv = identity(d);
                hinv.iter_mut().enumerate().for_each(|(i, row)| row[i] = gamma);
            }
            bfgs_update(&mut hinv, &sv, &yv, sy);
            fresh = false;
        }
        let rel = (f - f_chk).abs() / f.abs().max(1.0);
        let dx = max_abs(&sv);
        x = x_new;
        f = f_chk;
        g = g_new;
        if rel < s.rel_f_tol && dx < s.x_tol {
            let pg = bounds.projected_gradient(&x, &g);
            converged = stalled_ok(&pg, f, s);
            break;
        }
    }
    let pg = bounds.projected_gradient(&x, &g);
    Some(Outcome {
        grad_norm: max_abs(&pg),
        x,
        f,
        grad: g,
        converged,
        iterations,
        used_fallback: false,
    })
}

/// Inverse of the gradient-difference diagonal, with non-positive or
/// unusable curvatures replaced by the median of the usable ones.
fn diagonal_inverse<O: Objective>(obj: &mut O, x: &[f64], g: &[f64], bounds: &Bounds) -> Option<Vec<f64>> {
    let d = x.len();
    let mut curv = vec![f64::NAN; d];
    for i in 0..d {
        let mut h = 1e-4 * x[i].abs().max(1.0);
        if x[i] + h > bounds.upper[i] {
            h = -h;
        }
        let mut xp = x.to_vec();
        xp[i] += h;
        if let Some((_, gp)) = obj.value_grad(&xp) {
            curv[i] = (gp[i] - g[i]) / h;
        }
    }
    let mut good: Vec<f64> = curv.iter().copied().filter(|c| c.is_finite() && *c > 0.0).collect();
    if good.is_empty() {
        return None;
    }
    good.sort_by(f64::total_cmp);
    let median = good[good.len() / 2];
    Some(
        curv.iter()
            .map(|&c| 1.0 / if c.is_finite() && c > 1e-8 * median { c } else { median })
            .collect(),
    )
}

fn stalled_ok(pg: &[f64], f: f64, s: &Settings) -> bool {
    max_abs(pg) <= s.stall_grad_tol * (f.abs() / 1000.0).max(1.0)
}

fn line_search<O: Objective>(
    obj: &mut O,
    x: &[f64],
    f: f64,
    g: &[f64],
    dir: &[f64],
    bounds: &Bounds,
) -> Option<(Vec<f64>, f64)> {
    let mut alpha = 1.0;
    for _ in 0..40 {
        let mut trial: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + alpha * b).collect();
        bounds.project(&mut trial);
        let decrease: f64 = trial.iter().zip(x).zip(g).map(|((t, a), gi)| (t - a) * gi).sum();
        if trial.iter().zip(x).all(|(a, b)| a == b) {
            return None;
        }
        if let Some(ft) = obj.value(&trial) {
            if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) {
                return Some((trial, ft));
            }
        }
        alpha *= 0.5;
    }
    None
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let d = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..d).map(|i| (0..d).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..d {
        for j in 0..d {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Bounded Nelder-Mead on function values; returns the best vertex.
pub fn nelder_mead<O: Objective>(obj: &mut O, x0: &[f64], bounds: &Bounds, max_evals: usize) -> Option<Vec<f64>> {
    let d = x0.len();
    let eval = |obj: &mut O, x: &[f64]| obj.value(x).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut p = x0.to_vec();
        p[i] += if p[i] + 0.5 <= bounds.upper[i] { 0.5 } else { -0.5 };
        bounds.project(&mut p);
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(obj, p)).collect();
    let mut evals = d + 1;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[d] - vals[0]).abs() <= 1e-10 * vals[0].abs().max(1.0) {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|j| pts[..d].iter().map(|p| p[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| {
            let mut p: Vec<f64> = centroid.iter().zip(&pts[d]).map(|(c, w)| c + t * (w - c)).collect();
            bounds.project(&mut p);
            p
        };
        let xr = along(-1.0);
        let fr = eval(obj, &xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(obj, &xe);
            evals += 1;
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
        } else {
            let xc = if fr < vals[d] { along(-0.5) } else { along(0.5) };
            let fc = eval(obj, &xc);
            evals += 1;
            if fc < vals[d].min(fr) {
                pts[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    let p: Vec<f64> = pts[0].iter().zip(&pts[i]).map(|(a, b)| a + 0.5 * (b - a)).collect();
                    vals[i] = eval(obj, &p);
                    pts[i] = p;
                }
                evals += d;
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b]))?;
    vals[best].is_finite().then(|| pts[best].clone())
}
