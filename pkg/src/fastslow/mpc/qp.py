"""Dense primal active-set solver for small strictly convex QPs.

    minimize    0.5 x^T H x + g^T x
    subject to  lb <= x <= ub,   C x <= d

Bounds are handled by fixing variables, so each iteration solves an
equality-constrained KKT system on the free variables only.  The caller
supplies a feasible starting point; for slack-augmented problems one always
exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QPError(RuntimeError):
    pass


@dataclass
class QPResult:
    x: np.ndarray
    lam: np.ndarray        # multipliers of C x <= d (>= 0)
    mu_lower: np.ndarray   # multipliers of x >= lb (>= 0)
    mu_upper: np.ndarray   # multipliers of x <= ub (>= 0)
    objective: float
    iterations: int
    kkt_residual: float
    kkt_scaled: float
    active_general: np.ndarray


def kkt_residuals(H, g, lb, ub, C, d, x, lam, mu_lower, mu_upper):
    """Absolute KKT residual and the same scaled by the problem data magnitude."""
    grad = H @ x + g
    stat = grad + C.T @ lam - mu_lower + mu_upper
    cx = C @ x
    primal = max(0.0, float(np.max(lb - x, initial=0.0)), float(np.max(x - ub, initial=0.0)),
                 float(np.max(cx - d, initial=0.0)))
    dual = max(0.0, -float(np.min(lam, initial=0.0)), -float(np.min(mu_lower, initial=0.0)),
               -float(np.min(mu_upper, initial=0.0)))
    fin_lb = np.isfinite(lb)
    fin_ub = np.isfinite(ub)
    comp = max(float(np.max(np.abs(lam * (cx - d)), initial=0.0)),
               float(np.max(np.abs(mu_lower[fin_lb] * (x - lb)[fin_lb]), initial=0.0)),
               float(np.max(np.abs(mu_upper[fin_ub] * (ub - x)[fin_ub]), initial=0.0)))
    absolute = max(float(np.max(np.abs(stat), initial=0.0)), primal, dual, comp)
    scale = 1.0 + max(float(np.max(np.abs(g), initial=0.0)),
                      float(np.max(np.abs(H @ x), initial=0.0)))
    return absolute, absolute / scale


def solve_qp(H, g, lb, ub, C, d, x0, max_iter: int = 1000, tol: float = 1e-12,
             fixed_hint=None) -> QPResult:
    """Solve the QP from the feasible point ``x0``.

    ``fixed_hint`` optionally marks variables to start fixed at whichever
    bound they sit on, which saves iterations when the active set is known.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    C = np.asarray(C, dtype=float).reshape(-1, g.size)
    d = np.asarray(d, dtype=float)
    n = g.size
    m = d.size
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g)) and np.all(np.isfinite(C))
            and np.all(np.isfinite(d))):
        raise QPError("non-finite QP data")
    if np.any(lb > ub):
        raise QPError("inconsistent bounds (lb > ub)")
    x = np.array(x0, dtype=float)
    scale_x = 1.0 + float(np.max(np.abs(x), initial=0.0))
    feas_tol = 1e-9 * scale_x
    if (np.any(x < lb - feas_tol) or np.any(x > ub + feas_tol)
            or np.any(C @ x > d + feas_tol * (1.0 + np.abs(d)))):
        raise QPError("starting point is infeasible")
    x = np.clip(x, lb, ub)

    # bound state: 0 free, -1 at lower, +1 at upper, 2 equality (lb == ub)
    state = np.zeros(n, dtype=np.int8)
    state[lb == ub] = 2
    if fixed_hint is not None:
        hint = np.asarray(fixed_hint, dtype=bool) & (state == 0)
        state[hint & (x <= lb)] = -1
        state[hint & (x >= ub)] = 1
    work = []   # active general constraints
    lam_w = np.zeros(0)
    g_scale = 1.0 + float(np.max(np.abs(g), initial=0.0)) + float(np.max(np.abs(H), initial=0.0))
    mult_tol = 1e-11 * g_scale

    it = 0
    at_min = False   # an unblocked full step lands on the working-set minimiser
    while True:
        it += 1
        if it > max_iter:
            raise QPError(f"active-set iteration limit ({max_iter}) reached")
        free = np.flatnonzero(state == 0)
        grad = H @ x + g
        nf = free.size
        nw = len(work)
        p = np.zeros(n)
        if nf:
            Hf = H[np.ix_(free, free)]
            if nw:
                Cw = C[np.ix_(work, free)]
                K = np.zeros((nf + nw, nf + nw))
                K[:nf, :nf] = Hf
                K[:nf, nf:] = Cw.T
                K[nf:, :nf] = Cw
                rhs = np.concatenate([-grad[free], np.zeros(nw)])
            else:
                K = Hf
                rhs = -grad[free]
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            p[free] = sol[:nf]
            lam_w = sol[nf:]
        else:
            # everything fixed: multipliers from least squares on nothing
            lam_w = np.zeros(nw)

        if at_min or np.max(np.abs(p), initial=0.0) <= tol * scale_x:
            at_min = False
            # recompute multipliers at x for the current working set
            if nw:
                if nf:
                    Cw = C[np.ix_(work, free)]
                    lam_w = np.linalg.lstsq(Cw.T, -grad[free], rcond=None)[0]
                else:
                    lam_w = np.zeros(nw)
            r = grad + (C[work].T @ lam_w if nw else 0.0)
            # most negative multiplier among inequality constraints
            worst = 0.0
            drop = None
            for j, lj in enumerate(lam_w):
                if lj < worst - mult_tol:
                    worst, drop = lj, ("g", j)
            low = np.flatnonzero(state == -1)
            upp = np.flatnonzero(state == 1)
            if low.size:
                i = low[np.argmin(r[low])]
                if r[i] < worst - mult_tol:
                    worst, drop = r[i], ("b", i)
            if upp.size:
                i = upp[np.argmax(r[upp])]
                if -r[i] < worst - mult_tol:
                    worst, drop = -r[i], ("b", i)
            if drop is None:
                break
            if drop[0] == "g":
                work.pop(drop[1])
                lam_w = np.delete(lam_w, drop[1])
            else:
                state[drop[1]] = 0
            continue

        # ratio test
        alpha = 1.0
        block = None
        pf = p[free]
        xf = x[free]
        neg = pf < 0
        if np.any(neg):
            ratios = (lb[free][neg] - xf[neg]) / pf[neg]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha, block = ratios[k], ("lb", free[neg][k])
        pos = pf > 0
        if np.any(pos):
            ratios = (ub[free][pos] - xf[pos]) / pf[pos]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha, block = ratios[k], ("ub", free[pos][k])
        if m:
            inactive = np.ones(m, dtype=bool)
            inactive[work] = False
            cp = C @ p
            cand = inactive & (cp > 1e-14 * (1.0 + np.abs(cp).max()))
            if np.any(cand):
                idx = np.flatnonzero(cand)
                ratios = (d[idx] - C[idx] @ x) / cp[idx]
                k = int(np.argmin(ratios))
                if ratios[k] < alpha:
                    alpha, block = ratios[k], ("c", idx[k])
        alpha = max(alpha, 0.0)
        x = x + alpha * p
        at_min = block is None
        if block is not None:
            kind, i = block
            if kind == "lb":
                x[i] = lb[i]
                state[i] = -1
            elif kind == "ub":
                x[i] = ub[i]
                state[i] = 1
            else:
                work.append(int(i))

    grad = H @ x + g
    lam = np.zeros(m)
    if work:
        lam[work] = lam_w
    r = grad + C.T @ lam
    mu_lower = np.where(state == -1, r, 0.0)
    mu_upper = np.where(state == 1, -r, 0.0)
    eq = state == 2
    mu_lower[eq] = np.maximum(r[eq], 0.0)
    mu_upper[eq] = np.maximum(-r[eq], 0.0)
    absolute, scaled = kkt_residuals(H, g, lb, ub, C, d, x, lam, mu_lower, mu_upper)
    obj = float(0.5 * x @ H @ x + g @ x)
    return QPResult(x, lam, mu_lower, mu_upper, obj, it, absolute, scaled, np.array(work, dtype=int))
