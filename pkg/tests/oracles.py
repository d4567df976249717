"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops or numpy built-ins that
do not share code paths with the package under test.
"""

from __future__ import annotations

import json
import struct

import numpy as np


def matmul_triple_loop(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.empty((m, n))
    for i in range(m):
        for c in range(n):
            acc = 0.0
            for j in range(k):
                acc += a[i, j] * b[j, c]
            out[i, c] = acc
    return out


def frobenius_scalar(a):
    total = 0.0
    for row in np.asarray(a, dtype=np.float64):
        for v in row:
            total += v * v
    return total


def solve_right_via_inverse(h, rhs):
    """S @ h = rhs solved with an explicit LU-based inverse."""
    return np.asarray(rhs, dtype=np.float64) @ np.linalg.inv(np.asarray(h, dtype=np.float64))


def straight_line_forward(weights, biases, activations, x):
    """Forward pass with BLAS matmul and inline activations."""
    out = np.asarray(x, dtype=np.float64)
    for w, b, act in zip(weights, biases, activations):
        out = w @ out
        if b is not None:
            out = out + b.reshape(-1, 1)
        if act == "relu":
            out = np.where(out > 0, out, 0.0)
        elif act == "gelu":
            out = 0.5 * out * (1.0 + np.tanh(0.7978845608028654 * (out + 0.044715 * out**3)))
        elif act != "identity":
            raise ValueError(act)
    return out


def mean_of_arrays_scalar(arrays):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    out = np.empty_like(arrays[0])
    flat = [a.ravel() for a in arrays]
    for idx in range(flat[0].size):
        acc = flat[0][idx]
        for other in flat[1:]:
            acc = acc + other[idx]
        out.ravel()[idx] = acc / len(arrays)
    return out


def task_arithmetic_scalar(base, experts, coefficient):
    base = np.asarray(base, dtype=np.float64)
    out = np.empty_like(base)
    for idx in range(base.size):
        b = base.ravel()[idx]
        acc = experts[0].ravel()[idx] - b
        for e in experts[1:]:
            acc = acc + (e.ravel()[idx] - b)
        out.ravel()[idx] = b + coefficient * acc
    return out


def ties_reference(base, experts, coefficient, density):
    """Literal trim / elect-sign / disjoint-mean steps with Python loops."""
    import math

    base = np.asarray(base, dtype=np.float64)
    taus = [np.asarray(e, dtype=np.float64) - base for e in experts]
    size = base.size
    keep = math.ceil(density * size)
    trimmed = []
    for tau in taus:
        flat = tau.ravel()
        ranked = sorted(range(size), key=lambda i: (-abs(flat[i]), i))
        kept = set(ranked[:keep])
        t = np.zeros(size)
        for i in kept:
            t[i] = flat[i]
        trimmed.append(t)
    merged = np.zeros(size)
    for i in range(size):
        total = 0.0
        for t in trimmed:
            total += t[i]
        elected = -1.0 if total < 0 else 1.0
        values = [t[i] for t in trimmed if t[i] != 0 and np.sign(t[i]) == elected]
        merged[i] = sum(values) / len(values) if values else 0.0
    return base + coefficient * merged.reshape(base.shape)


def enumerate_quadratic_min(target_row, h, grid_values):
    """Exhaustive minimum of (v - t) H (v - t)^T over per-column grids.

    grid_values: list of candidate dequantized values per column.
    Returns (best_value_vector, best_objective).
    """
    import itertools

    t = np.asarray(target_row, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    best = None
    best_obj = np.inf
    for combo in itertools.product(*grid_values):
        v = np.array(combo, dtype=np.float64)
        e = v - t
        obj = float(e @ h @ e)
        if obj < best_obj:
            best_obj = obj
            best = v
    return best, best_obj


def gradient_descent_anchored(xs, ws, wm, lam, iters=200_000, tol=1e-13):
    """GD-to-convergence on sum_i ||Q X_i - W_i X_i||_F^2 + lam ||Q - W_m||_F^2."""
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    ws = [np.asarray(w, dtype=np.float64) for w in ws]
    wm = np.asarray(wm, dtype=np.float64)
    q = wm.copy()
    hs = [x @ x.T for x in xs]
    lip = 2.0 * (sum(np.linalg.eigvalsh(h).max() for h in hs) + lam)
    step = 1.0 / lip
    for _ in range(iters):
        grad = 2.0 * lam * (q - wm)
        for w, h in zip(ws, hs):
            grad = grad + 2.0 * (q - w) @ h
        q_next = q - step * grad
        if np.abs(q_next - q).max() < tol:
            q = q_next
            break
        q = q_next
    return q


def write_minimal_tensor_file(path, tensors):
    """Independent writer for the tensor file format (float64 tensors only)."""
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        data = arr.tobytes(order="C")
        header[name] = {
            "dtype": "F64",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)) + blob + b"".join(chunks))


def pack_bits_reference(codes, bits):
    """Per-row little-endian bitstream packer using Python integers."""
    codes = np.asarray(codes, dtype=np.uint8)
    out = bytearray()
    for row in codes:
        acc = 0
        nbits = 0
        for code in row:
            acc |= int(code) << nbits
            nbits += bits
        row_bytes = (nbits + 7) // 8
        out.extend(acc.to_bytes(row_bytes, "little"))
    return np.frombuffer(bytes(out), dtype=np.uint8)


def mse_reference(outputs, targets):
    diff = np.asarray(outputs) - np.asarray(targets)
    return float((diff * diff).sum() / diff.size)
