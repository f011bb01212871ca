"""Finite-difference checks and direct-loop oracles shared by the tests."""
from typing import Callable

import numpy as np

from core import ndtensor as nd
from core.ndtensor import Tape, Tensor


def tape_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape():
        out = fn(t)
        nd.backward(out)
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def numeric_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = fn(Tensor(x.copy())).item()
        x[idx] = orig - eps
        lo = fn(Tensor(x.copy())).item()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def check_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, tol: float = 1e-6, eps: float = 1e-6) -> float:
    err = rel_error(tape_grad(fn, x), numeric_grad(fn, x, eps))
    assert err <= tol, f"gradient relative error {err:.3e} exceeds {tol:.1e}"
    return err


# --- oracles ---

def mse_oracle(d, f):
    h, w = d.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            total += (f[i, j] - d[i, j]) ** 2
    return total / (h * w)


def pcc_oracle(d, f):
    n = d.size
    md, mf = sum(d.ravel()) / n, sum(f.ravel()) / n
    num = sum((a - md) * (b - mf) for a, b in zip(d.ravel(), f.ravel()))
    vd = sum((a - md) ** 2 for a in d.ravel())
    vf = sum((b - mf) ** 2 for b in f.ravel())
    return num / np.sqrt(vd * vf)


def _windows(h, w, k):
    for i in range(h - k + 1):
        for j in range(w - k + 1):
            yield i, j


def local_cc_oracle(d, f, k=3, eps=1e-5):
    h, w = d.shape
    total = 0.0
    for i, j in _windows(h, w, k):
        pd = d[i:i + k, j:j + k].ravel()
        pf = f[i:i + k, j:j + k].ravel()
        cd, cf = pd - pd.mean(), pf - pf.mean()
        cross = np.dot(cd, cf)
        total += cross * cross / (np.dot(cf, cf) * np.dot(cd, cd) + eps)
    return total


def ssim_oracle(d, f, k=7, c1=0.01 ** 2, c2=0.03 ** 2):
    h, w = d.shape
    values = []
    for i, j in _windows(h, w, k):
        pd = d[i:i + k, j:j + k].ravel()
        pf = f[i:i + k, j:j + k].ravel()
        md, mf = pd.mean(), pf.mean()
        vd = ((pd - md) ** 2).mean()
        vf = ((pf - mf) ** 2).mean()
        cov = ((pd - md) * (pf - mf)).mean()
        values.append((2 * md * mf + c1) * (2 * cov + c2) / ((md * md + mf * mf + c1) * (vd + vf + c2)))
    return float(np.mean(values))


def diffusion_oracle(u):
    _, h, w = u.shape
    total = 0.0
    for c in range(2):
        for i in range(h):
            for j in range(w):
                if j + 1 < w:
                    total += (u[c, i, j + 1] - u[c, i, j]) ** 2
                if i + 1 < h:
                    total += (u[c, i + 1, j] - u[c, i, j]) ** 2
    return total


def tv_oracle(u):
    _, h, w = u.shape
    total = 0.0
    for c in range(2):
        for i in range(h):
            for j in range(w):
                if j + 1 < w:
                    total += abs(u[c, i, j + 1] - u[c, i, j])
                if i + 1 < h:
                    total += abs(u[c, i + 1, j] - u[c, i, j])
    return total


def det_oracle(u):
    _, h, w = u.shape
    det = np.zeros((h - 1, w - 1))
    for i in range(h - 1):
        for j in range(w - 1):
            jac = np.array([
                [1 + u[0, i, j + 1] - u[0, i, j], u[0, i + 1, j] - u[0, i, j]],
                [u[1, i, j + 1] - u[1, i, j], 1 + u[1, i + 1, j] - u[1, i, j]],
            ])
            det[i, j] = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
    return det


def fold_count_oracle(u):
    det = det_oracle(u)
    return sum(1 for v in det.ravel() if v <= 0)


def histogram_mi(d, f, bins):
    joint, _, _ = np.histogram2d(f.ravel(), d.ravel(), bins=bins, range=[[0, 1], [0, 1]])
    p = joint / joint.sum()
    pf, pd = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / np.outer(pf, pd)[nz])))
