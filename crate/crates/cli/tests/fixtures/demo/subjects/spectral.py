"""Toy spectral normalization over nested-list matrices."""

import math


class Module:
    """Holds named parameters and buffers, like a tiny layer."""

    def __init__(self, weight):
        self.params = {"weight": weight}
        self.buffers = {}
        self.hooks = []


def _reshape_to_matrix(weight, dim):
    rank = _rank(weight)
    if dim < -rank or dim >= rank:
        raise IndexError(f"dim {dim} out of range for a rank-{rank} weight")
    if dim < 0:
        dim += rank
    if rank == 1:
        return [list(weight)]
    if dim != 0:
        if rank != 2:
            raise RuntimeError("permutation ordering does not match the weight's dimensionality")
        return [list(col) for col in zip(*weight)]
    return [list(row) for row in weight]


def _rank(x):
    rank = 0
    while isinstance(x, (list, tuple)):
        if not x:
            raise ValueError("empty dimension")
        rank += 1
        x = x[0]
    return rank


def _matvec(m, v):
    return [sum(a * b for a, b in zip(row, v)) for row in m]


def _norm(v):
    return math.sqrt(sum(x * x for x in v))


def spectral_norm(module, name="weight", n_power_iterations=1, eps=1e-12, dim=None):
    """Rescale `module.params[name]` by an estimate of its largest singular value.

    Raises KeyError for a missing parameter, ValueError for a non-positive
    iteration count or eps, and IndexError/RuntimeError for a `dim` that does
    not fit the weight's dimensionality. Stores `u` and `sigma` buffers and
    registers a hook.
    """
    if name not in module.params:
        raise KeyError(f"module has no parameter {name!r}")
    if n_power_iterations <= 0:
        raise ValueError("n_power_iterations must be positive")
    if eps <= 0:
        raise ValueError("eps must be positive")
    weight = module.params[name]
    if dim is None:
        dim = 0
    matrix = _reshape_to_matrix(weight, dim)
    rows, cols = len(matrix), len(matrix[0])
    u = module.buffers.get(name + "_u") or [1.0 / math.sqrt(rows)] * rows
    v = [0.0] * cols
    for _ in range(n_power_iterations):
        v = _matvec(list(zip(*matrix)), u)
        v = [x / max(_norm(v), eps) for x in v]
        u = _matvec(matrix, v)
        u = [x / max(_norm(u), eps) for x in u]
    sigma = sum(a * b for a, b in zip(u, _matvec(matrix, v)))
    if sigma <= eps:
        raise ValueError("weight has no dominant singular direction")
    module.buffers[name + "_u"] = u
    module.buffers[name + "_sigma"] = sigma
    module.hooks.append(("spectral_norm", name))
    module.params[name] = [[x / sigma for x in row] for row in weight] if _rank(weight) == 2 else [x / sigma for x in weight]
    return module
