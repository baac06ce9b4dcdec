"""Independent oracles used by the test suite.

These deliberately avoid the library's own numerical code paths: the
contrastive-loss oracle runs in 50-digit decimal arithmetic, and the gradient
oracle is a plain central-finite-difference loop.
"""

from __future__ import annotations

from decimal import Decimal, getcontext

import numpy as np

getcontext().prec = 50


def _dec(x) -> Decimal:
    return Decimal(float(x))


def dec_cosine(u, v) -> Decimal:
    dot = sum((_dec(a) * _dec(b) for a, b in zip(u, v)), Decimal(0))
    nu = sum((_dec(a) ** 2 for a in u), Decimal(0)).sqrt()
    nv = sum((_dec(b) ** 2 for b in v), Decimal(0)).sqrt()
    if nu == 0 or nv == 0:
        return Decimal(0)
    return dot / (nu * nv)


def contrastive_loss_oracle(student_vec, pos_rows, neg_vecs, i: int, tau: float) -> float:
    """Brute-force softmax form of the phrase-level contrastive loss."""
    tau_d = _dec(tau)
    terms = [dec_cosine(student_vec, row) / tau_d for row in pos_rows]
    terms += [dec_cosine(student_vec, g) / tau_d for g in neg_vecs]
    exps = [t.exp() for t in terms]
    z = sum(exps, Decimal(0))
    loss = z.ln() - terms[i]
    return float(loss)


def softmax_cross_entropy_oracle(logits_row, target: int) -> float:
    """Plain-python cross-entropy for one row (no logsumexp trick)."""
    exps = [Decimal(float(x)).exp() for x in logits_row]
    z = sum(exps, Decimal(0))
    return float(z.ln() - Decimal(float(logits_row[target])))


def finite_difference_grads(loss_fn, params: dict, keys=None, step: float = 1e-4) -> dict:
    """Central finite differences of ``loss_fn()`` w.r.t. each tensor in
    ``params`` (mutated in place and restored)."""
    grads = {}
    for name in keys if keys is not None else sorted(params):
        arr = params[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = loss_fn()
            flat[idx] = orig - step
            lm = loss_fn()
            flat[idx] = orig
            gflat[idx] = (lp - lm) / (2.0 * step)
        grads[name] = g
    return grads


def tensor_rel_error(ga: np.ndarray, gf: np.ndarray) -> float:
    """Per-tensor relative error between analytic and finite-difference grads."""
    na = float(np.linalg.norm(ga))
    nf = float(np.linalg.norm(gf))
    denom = max(na, nf, 1e-8)
    return float(np.linalg.norm(ga - gf)) / denom
