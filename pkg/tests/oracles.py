"""Brute-force oracles shared by the unit and acceptance suites."""

import numpy as np


def exhaustive_argmin(errors, chosen, n):
    """Patch whose addition to ``chosen`` gives the lowest mean error."""
    totals = [(np.mean(errors(frozenset(chosen | {s}))), s) for s in range(n) if s not in chosen]
    return min(totals)[1]


def brute_cosine(e1, e2, P):
    """Per target patch: most similar source patch, ties by distance then row-major index."""
    gh, gw, _ = e1.shape
    out = np.zeros((gh, gw, 2))
    for ti in range(gh):
        for tj in range(gw):
            v = e2[ti, tj] / np.linalg.norm(e2[ti, tj])
            cands = []
            for si in range(gh):
                for sj in range(gw):
                    u = e1[si, sj] / np.linalg.norm(e1[si, sj])
                    cands.append((float(v @ u), si, sj))
            best = max(c[0] for c in cands)
            near = [c for c in cands if c[0] >= best - 1e-6]
            _, si, sj = min(near, key=lambda c: ((ti - c[1]) ** 2 + (tj - c[2]) ** 2, c[1] * gw + c[2]))
            out[ti, tj] = ((ti - si) * P, (tj - sj) * P)
    return out
