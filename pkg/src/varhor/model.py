"""Problem definitions: coefficient bundles, time grids and control paths.

Every coefficient is a vector-valued function of some subset of the
arguments ``(t, x, y, z, u)`` evaluated on a batch. Batched argument shapes
are ``t: (B,)``, ``x: (B, n)``, ``y: (B, m)``, ``z: (B, m, d)``, ``u: (B, k)``.
Derivatives are returned with the differentiation axes appended, so the
Jacobian of ``f`` in ``x`` has shape ``(B, n, n)`` and the Hessian of ``Phi``
has shape ``(B, n, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import config as cfg
from .errors import (ControlOutsideBox, DerivativeCheckFailed, DimensionMismatch,
                     DomainError, MissingDerivative, SchemaError, UnknownProblem)
from .expr import Dims, Expr, compile_expr, eval_expr, is_zero, mixed_derivative, parse, variables, z_name

GROUPS = ("t", "x", "y", "z", "u")
SIGNATURES = {
    "f": ("t", "x", "u"),
    "sigma": ("t", "x", "u"),
    "g": ("t", "x", "y", "z", "u"),
    "Psi": ("x",),
    "l": ("t", "x", "y", "z", "u"),
    "beta": ("x",),
    "gamma": ("y",),
    "Phi": ("x",),
}


def _batch(args: Mapping[str, np.ndarray]) -> int:
    for v in args.values():
        if v is not None:
            return np.shape(v)[0]
    return 1


def group_size(dims: Dims, group: str) -> int:
    return {"t": 1, "x": dims.n, "y": dims.m, "z": dims.m * dims.d, "u": dims.k}[group]


class Coefficient:
    """Base class for a vector-valued coefficient with derivative bundle."""

    name: str
    out_shape: tuple[int, ...]
    groups: tuple[str, ...]
    dims: Dims

    @property
    def is_zero(self) -> bool:
        raise NotImplementedError

    def value(self, **args) -> np.ndarray:
        raise NotImplementedError

    def grad(self, wrt: str, **args) -> np.ndarray:
        """Derivative in one argument group; ``z`` is flattened row-major to ``m*d``."""
        raise NotImplementedError

    def hess(self, **args) -> np.ndarray:
        """Second derivative in ``x``: shape ``(B, *out, n, n)``."""
        raise NotImplementedError

    def third(self, **args) -> np.ndarray:
        """Third derivative in ``x``: shape ``(B, *out, n, n, n)``."""
        raise NotImplementedError

    def _zeros(self, B: int, *extra: int) -> np.ndarray:
        return np.zeros((B,) + self.out_shape + extra)


def _names_for(dims: Dims, group: str) -> list[str]:
    return dims.names((group,))


class ExprCoefficient(Coefficient):
    """Coefficient whose components are parsed expressions; derivatives by nested duals."""

    def __init__(self, name: str, exprs: Sequence[Expr], out_shape: tuple[int, ...],
                 groups: Sequence[str], dims: Dims, sources: Sequence[str] | None = None):
        if len(exprs) != int(np.prod(out_shape, dtype=int)):
            raise DimensionMismatch(f"{name}: expected {out_shape} components, got {len(exprs)}")
        self.name = name
        self.exprs = tuple(exprs)
        self.out_shape = tuple(out_shape)
        self.groups = tuple(groups)
        self.dims = dims
        self.sources = tuple(sources) if sources is not None else None
        for e in self.exprs:
            compile_expr(e)

    def __eq__(self, other):
        return (isinstance(other, ExprCoefficient) and self.name == other.name
                and self.exprs == other.exprs and self.out_shape == other.out_shape)

    def __hash__(self):
        return hash((self.name, self.exprs))

    def __repr__(self):
        return f"ExprCoefficient({self.name}, {self.sources or self.exprs})"

    @property
    def is_zero(self) -> bool:
        return all(is_zero(e) for e in self.exprs)

    def _bindings(self, args) -> dict:
        B = _batch(args)
        b = {}
        if args.get("t") is not None:
            b["t"] = np.asarray(args["t"], dtype=float)
        for g in ("x", "y", "u"):
            a = args.get(g)
            if a is not None:
                for i in range(a.shape[1]):
                    b[f"{g}{i + 1}"] = a[:, i]
        z = args.get("z")
        if z is not None:
            for i in range(z.shape[1]):
                for j in range(z.shape[2]):
                    b[z_name(i, j)] = z[:, i, j]
        return b, B

    def _map(self, args, fn) -> np.ndarray:
        b, B = self._bindings(args)
        cols = []
        for e in self.exprs:
            v = fn(e, b)
            cols.append(np.broadcast_to(np.asarray(v, dtype=float), (B,)))
        return np.stack(cols, axis=1).reshape((B,) + self.out_shape)

    def value(self, **args) -> np.ndarray:
        return self._map(args, eval_expr)

    def _deriv(self, seeds_names: Sequence[str], args) -> np.ndarray:
        def fn(e, b):
            if not set(seeds_names) <= variables(e):
                return 0.0
            return mixed_derivative(e, b, [{s: 1.0} for s in seeds_names])
        return self._map(args, fn)

    def grad(self, wrt: str, **args) -> np.ndarray:
        names = _names_for(self.dims, wrt)
        B = _batch(args)
        if wrt not in self.groups:
            return self._zeros(B, len(names))
        return np.stack([self._deriv([nm], args) for nm in names], axis=-1)

    def hess(self, **args) -> np.ndarray:
        names = _names_for(self.dims, "x")
        n = len(names)
        B = _batch(args)
        out = self._zeros(B, n, n)
        for i in range(n):
            for j in range(i, n):
                h = self._deriv([names[i], names[j]], args)
                out[..., i, j] = h
                out[..., j, i] = h
        return out

    def third(self, **args) -> np.ndarray:
        names = _names_for(self.dims, "x")
        n = len(names)
        B = _batch(args)
        out = self._zeros(B, n, n, n)
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    out[..., i, j, k] = self._deriv([names[i], names[j], names[k]], args)
        return out


class ClosedFormCoefficient(Coefficient):
    """Coefficient given by numpy callables.

    ``value_fn`` and every derivative callable receive the argument arrays
    as keywords. A group missing from ``grads`` has a structurally zero
    derivative. ``hess_fn``/``third_fn`` default to zero as well.
    """

    def __init__(self, name: str, out_shape, groups, dims: Dims, value_fn: Callable,
                 grads: Mapping[str, Callable] | None = None, hess_fn: Callable | None = None,
                 third_fn: Callable | None = None, zero: bool = False, key: str | None = None):
        self.name = name
        self.out_shape = tuple(out_shape)
        self.groups = tuple(groups)
        self.dims = dims
        self.value_fn = value_fn
        self.grads = dict(grads or {})
        self.hess_fn = hess_fn
        self.third_fn = third_fn
        self.zero = zero
        self.key = key or name

    def __eq__(self, other):
        return isinstance(other, ClosedFormCoefficient) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        return f"ClosedFormCoefficient({self.key})"

    @property
    def is_zero(self) -> bool:
        return self.zero

    def value(self, **args) -> np.ndarray:
        r = self.value_fn(**args)
        B = _batch(args)
        if r.shape == (B,) + self.out_shape:
            return r
        return np.broadcast_to(r, (B,) + self.out_shape).astype(float)

    def grad(self, wrt: str, **args) -> np.ndarray:
        B = _batch(args)
        size = group_size(self.dims, wrt)
        fn = self.grads.get(wrt)
        if fn is None:
            return self._zeros(B, size)
        return np.broadcast_to(fn(**args), (B,) + self.out_shape + (size,)).astype(float)

    def hess(self, **args) -> np.ndarray:
        B, n = _batch(args), self.dims.n
        if self.hess_fn is None:
            return self._zeros(B, n, n)
        return np.broadcast_to(self.hess_fn(**args), (B,) + self.out_shape + (n, n)).astype(float)

    def third(self, **args) -> np.ndarray:
        B, n = _batch(args), self.dims.n
        if self.third_fn is None:
            return self._zeros(B, n, n, n)
        return np.broadcast_to(self.third_fn(**args), (B,) + self.out_shape + (n, n, n)).astype(float)


# ---------------------------------------------------------------------------
# Problem, grid, control
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    n: int
    m: int
    d: int
    k: int
    T: float
    alpha: float
    x0: tuple[float, ...]
    U_lo: tuple[float, ...]
    U_hi: tuple[float, ...]
    f: Coefficient
    sigma: Coefficient
    g: Coefficient
    Psi: Coefficient
    l: Coefficient
    beta: Coefficient
    gamma: Coefficient
    Phi: Coefficient
    name: str = "custom"

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise SchemaError("T", "horizon must be positive and finite")
        if len(self.x0) != self.n:
            raise DimensionMismatch(f"x0 has length {len(self.x0)}, expected n={self.n}")
        if len(self.U_lo) != self.k or len(self.U_hi) != self.k:
            raise DimensionMismatch(f"control box must have length k={self.k}")
        if not all(math.isfinite(v) for v in self.x0):
            raise SchemaError("x0", "initial state must be finite")
        if any(lo > hi for lo, hi in zip(self.U_lo, self.U_hi)):
            raise SchemaError("control.box", "U_lo must not exceed U_hi")
        if math.isnan(self.alpha):
            raise SchemaError("alpha", "threshold must not be NaN")
        expected = {
            "f": (self.n,), "sigma": (self.n, self.d), "g": (self.m,), "Psi": (self.m,),
            "l": (), "beta": (), "gamma": (), "Phi": (),
        }
        for nm, shape in expected.items():
            c = getattr(self, nm)
            if tuple(c.out_shape) != shape:
                raise DimensionMismatch(f"{nm} has shape {c.out_shape}, expected {shape}")

    @property
    def dims(self) -> Dims:
        return Dims(self.n, self.m, self.d, self.k)

    @property
    def deterministic(self) -> bool:
        """True when the diffusion coefficient is structurally zero."""
        return self.sigma.is_zero

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.U_lo, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.U_hi, dtype=float)

    def project(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.lo, self.hi)

    def coefficients(self) -> dict[str, Coefficient]:
        return {nm: getattr(self, nm) for nm in SIGNATURES}

    def replace(self, **changes) -> "ProblemSpec":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class TimeGrid:
    N: int
    T: float

    def __post_init__(self):
        if self.N < 1:
            raise SchemaError("grid.steps", "need at least one step")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant control; row ``i`` is active on ``[t_i, t_{i+1})``."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.N:
            raise DimensionMismatch(f"control has {v.shape[0]} rows, grid has {self.grid.N} cells")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "ControlPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.N, 1)))

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def at(self, t: float) -> np.ndarray:
        """Value active at time ``t`` (left-continuous cell lookup, last cell at ``T``)."""
        i = min(int(math.floor(t / self.grid.dt + 1e-9)), self.grid.N - 1)
        return self.values[max(i, 0)]

    def shifted(self, direction: np.ndarray, rho: float) -> "ControlPath":
        return ControlPath(self.grid, self.values + rho * np.asarray(direction).reshape(self.values.shape))


def check_admissible(spec: ProblemSpec, control: ControlPath, tol: float = 0.0) -> None:
    if control.k != spec.k:
        raise DimensionMismatch(f"control has {control.k} components, expected k={spec.k}")
    if np.any(control.values < spec.lo - tol) or np.any(control.values > spec.hi + tol):
        raise ControlOutsideBox("control values leave the box U")


# ---------------------------------------------------------------------------
# Built-in problems
# ---------------------------------------------------------------------------

def _poly(name: str, out_shape, groups, dims: Dims, lin: Mapping[str, float] | None = None,
          sq: Mapping[str, float] | None = None, const: float = 0.0, key: str = "") -> ClosedFormCoefficient:
    """Scalar-variable polynomial ``const + sum a_g v_g + sum b_g v_g^2`` (all dimensions one)."""
    lin = dict(lin or {})
    sq = dict(sq or {})
    shape = (-1,) + tuple(out_shape)

    def col(args, g):
        a = args[g]
        return a.reshape(a.shape[0]) if g != "t" else a

    def value_fn(**args):
        v = const
        for g, a in lin.items():
            v = v + a * col(args, g)
        for g, b in sq.items():
            v = v + b * col(args, g) ** 2
        if np.ndim(v) == 0:
            v = np.full(_batch(args), v)
        return v.reshape(shape)

    grads = {}
    for g in set(lin) | set(sq):
        def gfn(g=g, **args):
            B = _batch(args)
            v = np.full(B, lin.get(g, 0.0))
            if g in sq:
                v = v + 2.0 * sq[g] * col(args, g)
            return v.reshape(shape + (1,))
        grads[g] = gfn
    hess_fn = None
    if sq.get("x"):
        hess_fn = lambda **args: np.full((_batch(args),) + tuple(out_shape) + (1, 1), 2.0 * sq["x"])
    zero = const == 0.0 and not any(lin.values()) and not any(sq.values())
    return ClosedFormCoefficient(name, out_shape, groups, dims, value_fn, grads, hess_fn,
                                 zero=zero, key=key or name)


def _example_coefficients(prefix: str) -> dict[str, Coefficient]:
    D = Dims(1, 1, 1, 1)
    S = SIGNATURES
    return {
        "f": _poly("f", (1,), S["f"], D, lin={"x": 1, "u": 1}, key=f"{prefix}.f"),
        "sigma": _poly("sigma", (1, 1), S["sigma"], D, key=f"{prefix}.sigma"),
        "g": _poly("g", (1,), S["g"], D, lin={"x": 1, "y": 1, "u": 1}, key=f"{prefix}.g"),
        "Psi": _poly("Psi", (1,), S["Psi"], D, key=f"{prefix}.Psi"),
        "l": _poly("l", (), S["l"], D, lin={"u": 1}, key=f"{prefix}.l"),
        "beta": _poly("beta", (), S["beta"], D, key=f"{prefix}.beta"),
        "gamma": _poly("gamma", (), S["gamma"], D, key=f"{prefix}.gamma"),
        "Phi": _poly("Phi", (), S["Phi"], D, lin={"x": 1}, key=f"{prefix}.Phi"),
    }


def _lq_coefficients() -> dict[str, Coefficient]:
    D = Dims(1, 1, 1, 1)
    S = SIGNATURES
    p = "lq-noise-1d"
    return {
        "f": _poly("f", (1,), S["f"], D, lin={"u": 1}, key=f"{p}.f"),
        "sigma": _poly("sigma", (1, 1), S["sigma"], D, const=1.0, key=f"{p}.sigma"),
        "g": _poly("g", (1,), S["g"], D, lin={"y": -0.5, "x": 1}, key=f"{p}.g"),
        "Psi": _poly("Psi", (1,), S["Psi"], D, lin={"x": 1}, key=f"{p}.Psi"),
        "l": _poly("l", (), S["l"], D, sq={"u": 0.5, "x": 0.5}, key=f"{p}.l"),
        "beta": _poly("beta", (), S["beta"], D, sq={"x": 0.5}, key=f"{p}.beta"),
        "gamma": _poly("gamma", (), S["gamma"], D, sq={"y": 0.5}, key=f"{p}.gamma"),
        "Phi": _poly("Phi", (), S["Phi"], D, sq={"x": 1.0}, key=f"{p}.Phi"),
    }


# name -> (coefficient factory, T, alpha, x0, U_lo, U_hi)
_REGISTRY = {
    "paper-example": (lambda: _example_coefficients("paper-example"), 1.0, 1.0, (0.0,), (1.0,), (2.0,)),
    "classical-example": (lambda: _example_coefficients("classical-example"), 1.0, math.inf, (0.0,), (1.0,), (2.0,)),
    "lq-noise-1d": (_lq_coefficients, 1.0, 0.5, (0.0,), (-1.0,), (1.0,)),
}
_BUILT: dict[str, dict[str, Coefficient]] = {}

REGISTRY_VERSION = 1


def builtin_names() -> list[str]:
    return sorted(_REGISTRY)


def builtin(problem: str, /, **overrides) -> ProblemSpec:
    if problem not in _REGISTRY:
        raise UnknownProblem(problem)
    factory, T, alpha, x0, lo, hi = _REGISTRY[problem]
    if problem not in _BUILT:
        _BUILT[problem] = factory()
    fields = dict(n=1, m=1, d=1, k=1, T=T, alpha=alpha, x0=x0, U_lo=lo, U_hi=hi, name=problem)
    fields.update(_BUILT[problem])
    fields.update(overrides)
    return ProblemSpec(**fields)


def problem_config(spec: ProblemSpec) -> dict:
    """Config document that reloads a built-in problem with identical fields."""
    return {
        "problem": spec.name,
        "T": spec.T,
        "alpha": "inf" if math.isinf(spec.alpha) else spec.alpha,
        "x0": list(spec.x0),
        "control": {"box": {"lo": list(spec.U_lo), "hi": list(spec.U_hi)}},
    }


# ---------------------------------------------------------------------------
# Loading from config
# ---------------------------------------------------------------------------

def _as_list(v) -> list:
    return [v] if isinstance(v, str) else list(v)


def _expr_coefficient(name: str, spec_entry, shape, dims: Dims) -> ExprCoefficient:
    groups = SIGNATURES[name]
    if name == "sigma":
        if isinstance(spec_entry, str):
            rows = [[spec_entry]]
        else:
            rows = [_as_list(r) for r in spec_entry]
        if len(rows) != shape[0] or any(len(r) != shape[1] for r in rows):
            raise DimensionMismatch(f"sigma must be {shape[0]}x{shape[1]}")
        texts = [s for r in rows for s in r]
    elif shape == ():
        texts = [spec_entry]
    else:
        texts = _as_list(spec_entry)
        if len(texts) != shape[0]:
            raise DimensionMismatch(f"{name} needs {shape[0]} components, got {len(texts)}")
    exprs = [parse(s, dims, groups) for s in texts]
    return ExprCoefficient(name, exprs, shape, groups, dims, sources=texts)


def load_problem(config: dict, validate_derivatives: bool = True) -> ProblemSpec:
    """Build a ProblemSpec from a parsed config document."""
    cfg.validate(config)
    box = config.get("control", {}).get("box")
    if box is not None and any(lo > hi for lo, hi in zip(box["lo"], box["hi"])):
        raise SchemaError("control.box", "lo must not exceed hi")
    problem = config["problem"]
    overrides = {}
    if "T" in config:
        overrides["T"] = float(config["T"])
    if "alpha" in config:
        overrides["alpha"] = cfg.parse_alpha(config["alpha"])
    if "x0" in config:
        overrides["x0"] = tuple(float(v) for v in config["x0"])
    if box is not None:
        overrides["U_lo"] = tuple(float(v) for v in box["lo"])
        overrides["U_hi"] = tuple(float(v) for v in box["hi"])
    if isinstance(problem, str):
        return builtin(problem, **overrides)

    for key, path in (("T", "T"), ("alpha", "alpha"), ("x0", "x0"), ("U_lo", "control.box")):
        if key not in overrides:
            raise SchemaError(path, "required for an inline problem")
    dd = problem.get("dims", {})
    dims = Dims(dd.get("n", 1), dd.get("m", 1), dd.get("d", 1), dd.get("k", 1))
    n, m, d = dims.n, dims.m, dims.d
    entries = {
        "f": problem["f"],
        "sigma": problem.get("sigma", [["0"] * d for _ in range(n)]),
        "g": problem.get("g", ["0"] * m),
        "Psi": problem.get("Psi", ["0"] * m),
        "l": problem.get("l", "0"),
        "beta": problem.get("beta", "0"),
        "gamma": problem.get("gamma", "0"),
        "Phi": problem["Phi"],
    }
    shapes = {"f": (n,), "sigma": (n, d), "g": (m,), "Psi": (m,),
              "l": (), "beta": (), "gamma": (), "Phi": ()}
    coeffs = {nm: _expr_coefficient(nm, entries[nm], shapes[nm], dims) for nm in entries}
    spec = ProblemSpec(n=n, m=m, d=d, k=dims.k, name=problem.get("name", "custom"),
                       **overrides, **coeffs)
    smoke_test(spec)
    if validate_derivatives:
        report = check_derivatives(spec, samples=32, tol=1e-4)
        if not report.passed:
            fn, point, gap = report.worst
            raise DerivativeCheckFailed(fn, point, gap)
    return spec


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

def sample_arguments(spec: ProblemSpec, samples: int, seed: int = 7, radius: float = 0.5) -> dict:
    """Random points on a box around ``x0`` with controls inside ``U``."""
    rng = np.random.default_rng(seed)
    B = samples
    x0 = np.asarray(spec.x0)
    return {
        "t": rng.uniform(0.0, spec.T, B),
        "x": x0 + rng.uniform(-radius, radius, (B, spec.n)),
        "y": rng.uniform(-radius, radius, (B, spec.m)),
        "z": rng.uniform(-radius, radius, (B, spec.m, spec.d)),
        "u": rng.uniform(spec.lo, spec.hi, (B, spec.k)),
    }


def _select(args: dict, groups: Sequence[str]) -> dict:
    return {g: args[g] for g in groups}


def smoke_test(spec: ProblemSpec, samples: int = 64) -> None:
    args = sample_arguments(spec, samples, seed=11)
    for nm, c in spec.coefficients().items():
        try:
            v = c.value(**_select(args, c.groups))
        except DomainError as exc:
            raise SchemaError(f"problem.{nm}", f"evaluation fails near x0: {exc}") from None
        if not np.all(np.isfinite(v)):
            raise SchemaError(f"problem.{nm}", "non-finite value near x0")


@dataclass
class DerivativeReport:
    gaps: dict[str, float]
    points: dict[str, dict]
    tol: float

    @property
    def passed(self) -> bool:
        return all(g <= self.tol for g in self.gaps.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, g in self.gaps.items() if g > self.tol]

    @property
    def worst(self) -> tuple[str, dict, float]:
        key = max(self.gaps, key=self.gaps.get)
        return key, self.points[key], self.gaps[key]


def _rel_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Relative gap per sample, measured against ``max(1, |b|)``."""
    axes = tuple(range(1, a.ndim))
    err = np.abs(a - b) / np.maximum(1.0, np.abs(b))
    return err.max(axis=axes) if axes else err


def _fd(fn: Callable, args: dict, group: str, h: float) -> np.ndarray:
    """Central differences of ``fn`` in every component of ``group``; new axis last."""
    base = args[group]
    flat = np.asarray(base, dtype=float).reshape(base.shape[0], -1)
    cols = []
    for j in range(flat.shape[1]):
        step = h * np.maximum(1.0, np.abs(flat[:, j]))
        plus, minus = flat.copy(), flat.copy()
        plus[:, j] += step
        minus[:, j] -= step
        a_p = dict(args, **{group: plus.reshape(base.shape)})
        a_m = dict(args, **{group: minus.reshape(base.shape)})
        diff = fn(a_p) - fn(a_m)
        cols.append(diff / (2.0 * step.reshape((-1,) + (1,) * (diff.ndim - 1))))
    return np.stack(cols, axis=-1)


def check_derivatives(spec: ProblemSpec, samples: int = 32, tol: float = 1e-4,
                      h: float = 1e-6, seed: int = 7) -> DerivativeReport:
    """Compare every bundled derivative with central finite differences."""
    if samples < 1:
        raise ValueError("samples must be positive")
    args = sample_arguments(spec, samples, seed=seed)
    gaps: dict[str, float] = {}
    points: dict[str, dict] = {}

    def record(key, bundled, numeric):
        per = _rel_gap(bundled, numeric)
        i = int(np.argmax(per))
        gaps[key] = float(per[i])
        points[key] = {g: np.asarray(v[i]).tolist() for g, v in args.items()}

    for nm, c in spec.coefficients().items():
        a = _select(args, c.groups)
        for g in c.groups:
            ag = dict(a)
            if g == "t":
                fd = _fd(lambda p: c.value(**dict(p, t=p["t"].reshape(-1))),
                         dict(a, t=a["t"].reshape(-1, 1)), "t", h)
            else:
                fd = _fd(lambda p: c.value(**p), ag, g, h)
            record(f"{nm}_{g}", c.grad(g, **a), fd)
        if nm in ("Psi", "beta", "Phi"):
            record(f"{nm}_xx", c.hess(**a), _fd(lambda p: c.grad("x", **p), a, "x", h))
        if nm == "Phi":
            record(f"{nm}_xxx", c.third(**a), _fd(lambda p: c.hess(**p), a, "x", h))
    return DerivativeReport(gaps, points, tol)


def require_hessian(c: Coefficient, label: str) -> None:
    if not hasattr(c, "hess"):
        raise MissingDerivative(label)
