"""Independent reference implementations used as test oracles."""
import math

import numpy as np

from dyntube.neural import check_loss, huber


def unrolled_recursive(model, e_hist, z_all, v_all):
    """Recursive tube written directly from the window definition.

    ``z_all`` holds z_{k-H..k+N}, ``v_all`` holds v_{k-H..k+N-1}.  The window
    for step j=k+t uses errors ẽ_{j-H+1..j} (measured up to k, predicted
    after), positions z_{j-H+1..j}, inputs v_{j-H+1..j} and offset t/N.
    """
    cfg = model.cfg
    H, N = cfg.H, cfg.N
    e_tilde = {i: float(e_hist[H - 1 - (0 - i)]) for i in range(-H + 1, 1)}  # keyed by j-k
    w = [float(e_hist[-1])]
    for t in range(N):
        errs = [e_tilde[t - H + 1 + i] for i in range(H)]
        zs = [np.asarray(z_all[H + t - H + 1 + i], float) for i in range(H)]
        if cfg.canonicalize:
            zs = [p - zs[-1] for p in zs]
        vs = [np.asarray(v_all[H + t - H + 1 + i], float) for i in range(H)]
        feat = np.array(errs + [c for p in zs for c in p] + [c for u in vs for c in u] + [t / N])
        x = (feat - model.in_mean) / model.in_std
        out = model.out_scale * model.net(x)[0]
        e_tilde[t + 1] = out
        w.append(out)
    return np.array(w)


def frozen_feedback_loss(model, E, Z, V, target, alpha, delta, feedback):
    """Training loss with the recursive feedback held at ``feedback`` (B, N).

    The network output still depends on the parameters; only the fed-back
    error entries are constants, which is the gradient-stopping rule.
    """
    cfg, s = model.cfg, model.out_scale
    H, N = cfg.H, cfg.N
    total = 0.0
    for b in range(len(E)):
        w = [E[b, -1] / s]
        if cfg.mode == "one_shot":
            z = Z[b] - Z[b, H] if cfg.canonicalize else Z[b]
            feat = np.concatenate([E[b], z.ravel(), V[b].ravel()])
            w += list(model.net((feat - model.in_mean) / model.in_std))
        else:
            seq = list(E[b]) + list(feedback[b])
            for t in range(N):
                zw = Z[b, t + 1: t + H + 1]
                if cfg.canonicalize:
                    zw = zw - zw[-1]
                feat = np.concatenate([seq[t: t + H], zw.ravel(), V[b, t + 1: t + H + 1].ravel(), [t / N]])
                w.append(model.net((feat - model.in_mean) / model.in_std)[0])
        r = check_loss(np.array(w), target[b] / s, 1.0 - alpha).sum()
        total += huber(r, delta)
    return total / len(E)


def empirical_quantile_scan(samples, alpha, lo, hi, step):
    """Brute-force minimizer of the summed check residual over a grid."""
    grid = np.arange(lo, hi + step / 2, step)
    best, best_w = math.inf, None
    for w in grid:
        d = w - samples
        val = np.sum(np.where(d >= 0, (1 - alpha) * d, -alpha * d))
        if val < best:
            best, best_w = val, w
    return best_w


def enumerate_qp(P, q, A, l, u, G, h, mu):
    """Exhaustive oracle for tiny QPs with box rows and L1-softened rows.

    Each hard row is free, at l or at u; each soft row is satisfied, at its
    kink or violated (contributing the linear term -mu G).  Every region's
    equality-constrained stationary point that is hard-feasible is a feasible
    point, and the optimum lies in one of the regions, so the smallest true
    objective over the candidates is the optimum.
    """
    import itertools

    n = len(q)
    m, k = len(A), len(G)

    def f(x):
        return 0.5 * x @ P @ x + q @ x + mu * np.maximum(0.0, h - G @ x).sum()

    best = (None, math.inf)
    for hs in itertools.product((0, -1, 1), repeat=m):
        for ss in itertools.product((0, 1, 2), repeat=k):
            rows, rhs = [], []
            for i, s in enumerate(hs):
                if s:
                    b = l[i] if s < 0 else u[i]
                    if not np.isfinite(b):
                        break
                    rows.append(A[i])
                    rhs.append(b)
            else:
                lin = q - mu * sum((G[i] for i, s in enumerate(ss) if s == 2), np.zeros(n))
                for i, s in enumerate(ss):
                    if s == 1:
                        rows.append(G[i])
                        rhs.append(h[i])
                E = np.array(rows).reshape(-1, n)
                K = np.block([[P, E.T], [E, np.zeros((len(E), len(E)))]])
                try:
                    sol = np.linalg.solve(K, np.concatenate([-lin, rhs]))
                except np.linalg.LinAlgError:
                    continue
                x = sol[:n]
                if m and (np.any(A @ x < l - 1e-9) or np.any(A @ x > u + 1e-9)):
                    continue
                if f(x) < best[1]:
                    best = (x, f(x))
    return best
