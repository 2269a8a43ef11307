"""Dense linear algebra, nonlinearities, initialization and gradient checking.

Matrices and vectors are plain ``numpy.float64`` arrays (2-D and 1-D).  All
randomness goes through :func:`make_rng`, which wraps NumPy's PCG64 bit
generator: a fixed, documented algorithm whose output stream for a given seed
is identical on every platform NumPy supports.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, TrainingDiverged

REL_ERR_FLOOR = 1e-8
GRADCHECK_TOL = 1e-4


def make_rng(seed):
    """Return a PCG64-backed generator seeded with an unsigned 64-bit integer."""
    if seed < 0 or seed >= 2**64:
        raise ContractViolation(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def linear_map(M, v):
    """Matrix-vector product ``M @ v`` with an explicit shape check."""
    if M.ndim != 2 or v.ndim != 1 or M.shape[1] != v.shape[0]:
        raise ContractViolation(
            f"linear_map shape mismatch: matrix {M.shape} vs vector {v.shape}"
        )
    return M @ v


def sigmoid(x):
    # exp(-x) may overflow to inf for x < -709; 1/(1+inf) = 0 is the right limit.
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    with np.errstate(over="ignore", under="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def tanh(x):
    return np.tanh(x)


def activations(v, kind):
    if kind == "sigmoid":
        return sigmoid(v)
    if kind == "tanh":
        return tanh(v)
    raise ContractViolation(f"unknown activation {kind!r}")


def log_softmax(v):
    shifted = v - np.max(v)
    return shifted - np.log(np.sum(np.exp(shifted)))


def init_uniform(rows, cols, rng, scale=None):
    """Draw a ``rows x cols`` matrix i.i.d. uniform in ``[-scale, scale]``.

    The default scale is the Xavier/Glorot bound ``sqrt(6 / (rows + cols))``.
    """
    if rows < 1 or cols < 1:
        raise ContractViolation(f"init_uniform needs positive dimensions, got {rows}x{cols}")
    if scale is None:
        scale = np.sqrt(6.0 / (rows + cols))
    if not scale > 0:
        raise ContractViolation(f"init scale must be positive, got {scale}")
    return rng.uniform(-scale, scale, size=(rows, cols))


def _arrays(obj):
    return dict(obj.items())


def sgd_step(params, grads, lr):
    """In-place plain SGD: ``w <- w - lr * g`` for every named matrix.

    ``params`` and ``grads`` are anything exposing ``items()`` over
    ``(name, ndarray)`` pairs: a :class:`~captioner.model.ModelParams` or a dict.
    """
    if lr < 0 or not np.isfinite(lr):
        raise ContractViolation(f"learning rate must be finite and >= 0, got {lr}")
    p, g = _arrays(params), _arrays(grads)
    if p.keys() != g.keys():
        raise ContractViolation(f"gradient names {sorted(g)} do not match params {sorted(p)}")
    for name, w in p.items():
        if g[name].shape != w.shape:
            raise ContractViolation(
                f"gradient for {name} has shape {g[name].shape}, parameter has {w.shape}"
            )
        if not np.all(np.isfinite(g[name])):
            raise TrainingDiverged(f"non-finite gradient entry in {name}")
    for name, w in p.items():
        w -= lr * g[name]
    return params


def sample_categorical(p, rng):
    """Inverse-CDF draw of an index from probability vector ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ContractViolation("sample_categorical needs a finite non-negative 1-D vector")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ContractViolation(f"probabilities sum to {p.sum()!r}, not 1")
    u = rng.random()
    j = int(np.searchsorted(np.cumsum(p), u, side="right"))
    # Roundoff can leave the cumulative total just under u.
    if j >= p.size:
        j = int(np.flatnonzero(p)[-1])
    return j


@dataclass
class MatrixCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple


@dataclass
class GradCheckReport:
    matrices: list = field(default_factory=list)
    tol: float = GRADCHECK_TOL

    @property
    def max_rel_error(self):
        return max((m.max_rel_error for m in self.matrices), default=0.0)

    @property
    def passed(self):
        return all(m.max_rel_error < self.tol for m in self.matrices)

    def to_dict(self):
        return {
            "passed": self.passed,
            "tol": self.tol,
            "max_rel_error": self.max_rel_error,
            "matrices": [
                {
                    "name": m.name,
                    "max_rel_error": m.max_rel_error,
                    "max_abs_error": m.max_abs_error,
                    "worst_index": list(m.worst_index),
                }
                for m in self.matrices
            ],
        }


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), REL_ERR_FLOOR)


def finite_diff_gradcheck(loss_fn, params, analytic, eps, n_coords, rng, tol=GRADCHECK_TOL):
    """Compare analytic gradients against central finite differences.

    Inputs:
    - loss_fn: zero-argument callable returning the scalar loss at the current
      (in-place perturbed) parameter values. It must be deterministic. Its
      roundoff sets the noise floor, about |L| * machine_eps / eps; evaluating
      it in extended precision lets tiny gradient entries be resolved.
    - params, analytic: name -> ndarray collections of identical shapes.
    - eps: perturbation size in [1e-7, 1e-3].
    - n_coords: coordinates probed per matrix (all of them if the matrix is
      smaller).

    Returns a GradCheckReport; parameters are restored exactly afterwards.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractViolation(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if n_coords < 1:
        raise ContractViolation("n_coords must be >= 1")
    p, g = _arrays(params), _arrays(analytic)
    report = GradCheckReport(tol=tol)
    for name, w in p.items():
        if g[name].shape != w.shape:
            raise ContractViolation(f"analytic gradient shape mismatch for {name}")
        if w.size <= n_coords:
            flat = np.arange(w.size)
        else:
            flat = np.sort(rng.choice(w.size, size=n_coords, replace=False))
        worst = MatrixCheck(name, 0.0, 0.0, ())
        for k in flat:
            idx = np.unravel_index(int(k), w.shape)
            orig = w[idx]
            w[idx] = orig + eps
            hi = w[idx]
            up = loss_fn()
            w[idx] = orig - eps
            lo = w[idx]
            down = loss_fn()
            w[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise TrainingDiverged(f"non-finite loss while probing {name}{idx}")
            # Divide by the representable step, not 2*eps.
            numeric = (up - down) / (hi - lo)
            a = float(g[name][idx])
            numeric = float(numeric)
            rel = relative_error(a, numeric)
            if rel >= worst.max_rel_error:
                worst.max_rel_error = rel
                worst.worst_index = tuple(int(i) for i in idx)
            worst.max_abs_error = max(worst.max_abs_error, abs(a - numeric))
        report.matrices.append(worst)
    return report
