"""Independent reference implementations the tests compare against.

Nothing here imports from the package under test.
"""

import numpy as np


def charpoly(a):
    """Coefficients of det(xI - A), highest degree first (Faddeev-LeVerrier)."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    coeffs = [1.0]
    m = np.zeros_like(a)
    eye = np.eye(n)
    for k in range(1, n + 1):
        m = a @ m + coeffs[-1] * eye
        coeffs.append(-np.trace(a @ m) / k)
    return np.array(coeffs)


def charpoly_eigenvalues(a):
    """Roots of the characteristic polynomial, Newton-polished, descending."""
    p = charpoly(a)
    dp = np.polyder(p)
    roots = np.sort(np.real(np.roots(p)))[::-1]
    for _ in range(5):
        step = np.polyval(p, roots) / np.where(np.polyval(dp, roots) == 0, 1.0, np.polyval(dp, roots))
        roots = roots - step
    return np.sort(roots)[::-1]


def eigenvector_for(a, lam, iters=3):
    """Unit null vector of (A - lam I) by shifted inverse iteration."""
    n = a.shape[0]
    shift = lam + 1e-10 * max(1.0, abs(lam))
    v = np.ones(n) / np.sqrt(n) + 1e-3 * np.arange(n)
    for _ in range(iters):
        v = np.linalg.solve(a - shift * np.eye(n), v)
        v /= np.linalg.norm(v)
    return v


def hand_gram_schmidt(cols):
    """Classical Gram-Schmidt on a list of column vectors."""
    out = []
    for v in cols:
        w = np.array(v, dtype=np.float64)
        for q in out:
            w = w - (q @ np.asarray(v, dtype=np.float64)) * q
        out.append(w / np.linalg.norm(w))
    return np.column_stack(out)


def central_diff(fn, x, h=1e-5):
    """Numerical gradient of scalar fn at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = fn(x)
        x[idx] = old - h
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    """Norm-wise relative error; ``floor`` keeps all-zero gradients from
    turning finite-difference roundoff into a relative error of 1."""
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def naive_forward(layers, x):
    """Loop-based MLP forward: layers are (W, b or None, activation, tap)."""
    taps = []
    a = [list(row) for row in np.asarray(x, dtype=np.float64)]
    for w, b, act, tap in layers:
        out = []
        for row in a:
            z = []
            for i in range(w.shape[0]):
                s = 0.0 if b is None else float(b[i])
                for j in range(w.shape[1]):
                    s += float(w[i, j]) * row[j]
                z.append(max(s, 0.0) if act == "relu" else s)
            out.append(z)
        a = out
        if tap:
            taps.append(np.array(a))
    return np.array(a), taps
