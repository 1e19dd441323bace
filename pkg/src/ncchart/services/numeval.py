"""Numeric evaluation on matrix-valued fields over a periodic grid.

Derivatives are spectral. Inverse atoms are inverted point by point and
integral atoms are evaluated in one of two gauges: zero-mean (periodic
antiderivative, the integrand must have zero mean) or decaying (integral
from the left end, for localized fields).
"""

import csv
import logging
import struct
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..core.config import get_settings
from ..core.exceptions import (
    NcChartError,
    SingularSampleError,
    UnsupportedEvaluationError,
    ZeroModeViolationError,
)
from ..models.schemas import ResidualRecord
from .catalog import Catalog
from .ncexpr import (
    Assumptions,
    Atom,
    Deriv,
    Expression,
    Integral,
    Inverse,
    SymbolId,
    SymbolKind,
    Word,
    differentiate,
    frechet_expr,
    invert,
    schwarzian,
    substitute,
)
from .opalg import (
    Antiderivative,
    Derivative,
    Factor,
    Multiply,
    OperatorChain,
    OperatorExpression,
    apply,
    frechet_op,
)

logger = logging.getLogger(__name__)

ZERO_MEAN = "zero-mean"
DECAYING = "decaying"
SNAPSHOT_MAGIC = b"NCAS"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class Grid:
    """n uniform points on [0, period)."""

    n: int
    period: float

    def __post_init__(self):
        if self.n < 16 or self.n & (self.n - 1):
            raise NcChartError(f"Grid size must be a power of two >= 16, got {self.n}")
        if self.period <= 0:
            raise NcChartError("Grid period must be positive")

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n) * (self.period / self.n)

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.n, d=self.period / self.n)


def spectral_derivative(samples: np.ndarray, grid: Grid, order: int = 1) -> np.ndarray:
    """order-th derivative along axis 0 of periodic samples."""
    if order == 0:
        return samples
    k = grid.wavenumbers.reshape((-1,) + (1,) * (samples.ndim - 1))
    coefficients = np.fft.fft(samples, axis=0) * (1j * k) ** order
    if grid.n % 2 == 0 and order % 2 == 1:
        coefficients[grid.n // 2] = 0
    result = np.fft.ifft(coefficients, axis=0)
    return result.real if np.isrealobj(samples) else result


def _periodic_antiderivative(samples: np.ndarray, grid: Grid) -> np.ndarray:
    k = grid.wavenumbers.reshape((-1,) + (1,) * (samples.ndim - 1))
    coefficients = np.fft.fft(samples, axis=0)
    safe = np.where(k == 0, 1.0, k)
    coefficients = np.where(k == 0, 0.0, coefficients / (1j * safe))
    result = np.fft.ifft(coefficients, axis=0)
    return result.real if np.isrealobj(samples) else result


@dataclass
class MatrixField:
    """Samples of a d x d matrix function; value = samples + x * drift."""

    grid: Grid
    samples: np.ndarray
    drift: np.ndarray | None = None

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[0] != self.grid.n:
            raise NcChartError(f"Samples must have shape (n, d, d), got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise NcChartError("Field samples must be finite")

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def values(self) -> np.ndarray:
        if self.drift is None:
            return self.samples
        return self.samples + self.grid.points[:, None, None] * self.drift

    def derivative(self, order: int = 1) -> np.ndarray:
        if order == 0:
            return self.values
        result = spectral_derivative(self.samples, self.grid, order)
        if self.drift is not None and order == 1:
            result = result + self.drift
        return result


@dataclass
class Assignment:
    """Fields for unknowns and directions, matrices for constants."""

    grid: Grid
    dim: int
    fields: dict[SymbolId, MatrixField] = field(default_factory=dict)
    constants: dict[SymbolId, np.ndarray] = field(default_factory=dict)

    def value(self, symbol: SymbolId, order: int) -> np.ndarray:
        if symbol in self.constants:
            if order:
                return np.zeros((self.grid.n, self.dim, self.dim))
            return np.broadcast_to(self.constants[symbol], (self.grid.n, self.dim, self.dim))
        if symbol in self.fields:
            return self.fields[symbol].derivative(order)
        raise NcChartError(f"Symbol '{symbol.name}' is not assigned")


# Evaluation


class Evaluator:
    """Evaluates expressions on an assignment, caching atoms."""

    def __init__(self, assignment: Assignment, gauge: str = ZERO_MEAN):
        if gauge not in (ZERO_MEAN, DECAYING):
            raise NcChartError(f"Unknown integral gauge '{gauge}'")
        self.assignment = assignment
        self.gauge = gauge
        self.settings = get_settings()
        self._atoms: dict[Atom, np.ndarray] = {}

    @property
    def _shape(self) -> tuple[int, int, int]:
        a = self.assignment
        return (a.grid.n, a.dim, a.dim)

    def evaluate(self, e: Expression) -> np.ndarray:
        total = np.zeros(self._shape)
        identity = np.broadcast_to(np.eye(self.assignment.dim), self._shape)
        for word, coefficient in e.terms:
            term = identity
            for atom in word:
                term = term @ self._atom(atom)
            total = total + float(coefficient) * term
        return total

    def _atom(self, atom: Atom) -> np.ndarray:
        if atom not in self._atoms:
            self._atoms[atom] = self._compute(atom)
        return self._atoms[atom]

    def _compute(self, atom: Atom) -> np.ndarray:
        if isinstance(atom, Deriv):
            return self.assignment.value(atom.symbol, atom.order)
        if isinstance(atom, Inverse):
            return self._invert(self.evaluate(atom.inner))
        if atom.is_twisted:
            raise UnsupportedEvaluationError("Twisted integrals have no numeric evaluation")
        return self._integrate(self.evaluate(atom.inner))

    def _invert(self, values: np.ndarray) -> np.ndarray:
        cond = np.linalg.cond(values)
        worst = float(np.max(cond))
        if not np.isfinite(worst) or worst > self.settings.condition_cap:
            raise SingularSampleError(f"Condition number {worst:.3e} exceeds the cap")
        return np.linalg.inv(values)

    def _integrate(self, values: np.ndarray) -> np.ndarray:
        grid = self.assignment.grid
        mean = values.mean(axis=0)
        if self.gauge == ZERO_MEAN:
            size = float(np.linalg.norm(mean, 2))
            if size > self.settings.mean_tolerance:
                raise ZeroModeViolationError(f"Integrand mean {size:.3e} is not zero")
            return _periodic_antiderivative(values - mean, grid)
        x = grid.points[:, None, None]
        periodic = _periodic_antiderivative(values - mean, grid)
        return periodic - periodic[0] + x * mean

    def apply_factor(self, f: Factor, values: np.ndarray) -> np.ndarray:
        if isinstance(f, Derivative):
            return spectral_derivative(values, self.assignment.grid)
        if isinstance(f, Antiderivative):
            return self._integrate(values)
        if isinstance(f, Multiply):
            left = self.evaluate(Expression.from_word(f.left))
            right = self.evaluate(Expression.from_word(f.right))
            return left @ values @ right
        raise UnsupportedEvaluationError(f"Factor {type(f).__name__} has no sampled form")

    def apply(self, op: OperatorExpression | OperatorChain, values: np.ndarray) -> np.ndarray:
        """op acting on samples, factor by factor; integrals use the evaluator's gauge."""
        if isinstance(op, OperatorChain):
            for f in reversed(op.factors):
                values = self.apply(f, values)
            return float(op.coefficient) * values
        memo: dict[tuple, np.ndarray] = {(): values}

        def run(comp: tuple) -> np.ndarray:
            if comp not in memo:
                memo[comp] = self.apply_factor(comp[0], run(comp[1:]))
            return memo[comp]

        total = np.zeros(self._shape)
        for comp, k in op.terms:
            total = total + float(k) * run(comp)
        return total


def evaluate(e: Expression, assignment: Assignment, gauge: str = ZERO_MEAN) -> MatrixField:
    return MatrixField(assignment.grid, Evaluator(assignment, gauge).evaluate(e))


def samples_resolved(op: OperatorChain) -> bool:
    """True when every factor of op has a sampled form."""
    return all(
        isinstance(f, (Derivative, Antiderivative, Multiply))
        for part in op.factors
        for comp, _ in part.terms
        for f in comp
    )


def amplitude_degree(e: Expression, scaled: frozenset[SymbolId]) -> int | None:
    """Lowest number of scaled-field letters in a term of e.

    None when e is zero or a letter does not scale homogeneously with the
    amplitude (inverses, twisted integrals, unscaled fields).
    """
    degrees = [_word_degree(word, scaled) for word, _ in e.terms]
    if not degrees or any(d is None for d in degrees):
        return None
    return min(d for d in degrees if d is not None)


def _word_degree(word: Word, scaled: frozenset[SymbolId]) -> int | None:
    total = 0
    for atom in word:
        if isinstance(atom, Deriv):
            if atom.symbol in scaled:
                total += 1
            elif not atom.symbol.is_constant:
                return None
        elif isinstance(atom, Integral) and not atom.is_twisted:
            inner = amplitude_degree(atom.inner, scaled)
            if inner is None:
                return None
            total += inner
        else:
            return None
    return total


def max_norm(values: np.ndarray) -> float:
    """Largest pointwise operator 2-norm."""
    if values.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(values, ord=2, axis=(1, 2))))


# Random fields


def random_field(
    grid: Grid,
    seed: int,
    dim: int,
    modes: int | None = None,
    amplitude: float | None = None,
    invertible: bool = False,
) -> MatrixField:
    """Band-limited trigonometric field; equal seeds give identical fields."""
    settings = get_settings()
    modes = settings.default_modes if modes is None else modes
    amplitude = settings.default_amplitude if amplitude is None else amplitude
    if modes < 1 or modes > grid.n // 4:
        raise NcChartError(f"Mode count must lie in 1..{grid.n // 4}, got {modes}")
    rng = np.random.default_rng(seed)
    x = grid.points
    base = 2 * np.pi / grid.period
    samples = np.zeros((grid.n, dim, dim))
    samples += amplitude * rng.standard_normal((dim, dim))
    for k in range(1, modes + 1):
        a = rng.standard_normal((dim, dim))
        b = rng.standard_normal((dim, dim))
        samples += amplitude / k * (
            np.cos(k * base * x)[:, None, None] * a + np.sin(k * base * x)[:, None, None] * b
        )
    if invertible:
        samples += np.eye(dim)
    return MatrixField(grid, samples)


def localized_field(
    grid: Grid, seed: int, dim: int, amplitude: float | None = None, width: float = 2.0
) -> MatrixField:
    """Gaussian-windowed field centred on the grid, negligible at both ends."""
    amplitude = get_settings().default_amplitude if amplitude is None else amplitude
    rng = np.random.default_rng(seed)
    x = grid.points - grid.period / 2
    envelope = np.exp(-((x / width) ** 2))
    a, b, c = (rng.standard_normal((dim, dim)) for _ in range(3))
    samples = amplitude * envelope[:, None, None] * (
        a + np.cos(x)[:, None, None] * b + np.sin(x / 2)[:, None, None] * c
    )
    return MatrixField(grid, samples)


def random_constant(seed: int, dim: int, scale: float = 1.0, shift: float = 0.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return shift * np.eye(dim) + scale * rng.standard_normal((dim, dim))


def scaling_slope(amplitudes: Sequence[float], residuals: Sequence[float]) -> float:
    """Slope of log(residual) against log(amplitude)."""
    floor = np.finfo(float).tiny
    slope, _ = np.polyfit(np.log(amplitudes), np.log(np.maximum(residuals, floor)), 1)
    return float(slope)


# Snapshots and exports


def write_snapshot(assignment: Assignment, path: Path | str) -> None:
    """Binary container: header, symbol table, little-endian float64 samples."""
    entries: list[tuple[SymbolId, int]] = []
    for symbol, fld in assignment.fields.items():
        entries.append((symbol, 2 if fld.drift is not None else 0))
    for symbol in assignment.constants:
        entries.append((symbol, 1))
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(
            struct.pack(
                "<IIdII",
                SNAPSHOT_VERSION,
                assignment.grid.n,
                assignment.grid.period,
                assignment.dim,
                len(entries),
            )
        )
        for symbol, flag in entries:
            name = symbol.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)) + name + struct.pack("<B", flag))
        for symbol, flag in entries:
            if flag == 1:
                data = np.asarray(assignment.constants[symbol], dtype="<f8")
            else:
                fld = assignment.fields[symbol]
                data = np.asarray(fld.samples, dtype="<f8")
                if flag == 2:
                    data = np.concatenate([data.ravel(), np.asarray(fld.drift, dtype="<f8").ravel()])
            fh.write(np.ascontiguousarray(data).tobytes())


def read_snapshot(path: Path | str) -> Assignment:
    raw = Path(path).read_bytes()
    if raw[:4] != SNAPSHOT_MAGIC:
        raise NcChartError(f"{path} is not an assignment snapshot")
    offset = 4
    version, n, period, dim, count = struct.unpack_from("<IIdII", raw, offset)
    offset += struct.calcsize("<IIdII")
    if version != SNAPSHOT_VERSION:
        raise NcChartError(f"Unsupported snapshot version {version}")
    grid = Grid(n, period)
    entries: list[tuple[str, int]] = []
    for _ in range(count):
        (length,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + length].decode("utf-8")
        offset += length
        (flag,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        entries.append((name, flag))
    assignment = Assignment(grid, dim)
    block = dim * dim
    for name, flag in entries:
        if flag == 1:
            data = np.frombuffer(raw, dtype="<f8", count=block, offset=offset)
            offset += 8 * block
            assignment.constants[SymbolId(name, SymbolKind.CONSTANT)] = data.reshape(dim, dim).copy()
            continue
        data = np.frombuffer(raw, dtype="<f8", count=n * block, offset=offset)
        offset += 8 * n * block
        drift = None
        if flag == 2:
            drift = np.frombuffer(raw, dtype="<f8", count=block, offset=offset).reshape(dim, dim).copy()
            offset += 8 * block
        assignment.fields[SymbolId(name)] = MatrixField(grid, data.reshape(n, dim, dim).copy(), drift)
    return assignment


def export_residuals_csv(records: Iterable[ResidualRecord], path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "seed", "d", "n", "residual", "gauge"])
        for r in records:
            writer.writerow([r.identity, r.seed, r.dim, r.grid_points, f"{r.residual:.6e}", r.gauge])


# Registered numeric identities


@dataclass(frozen=True)
class NumericCase:
    """A defect expression, the assignment it is evaluated on and its gauge.

    When operator is set the residual is defect - operator(argument), the
    operator acting on samples. scaled names the fields drawn proportional
    to the amplitude.
    """

    defect: Expression
    assignment: Assignment
    gauge: str = ZERO_MEAN
    operator: OperatorChain | None = None
    argument: Expression | None = None
    scaled: frozenset[SymbolId] = frozenset()

    def values(self) -> np.ndarray:
        evaluator = Evaluator(self.assignment, self.gauge)
        result = evaluator.evaluate(self.defect)
        if self.operator is not None and self.argument is not None:
            result = result - evaluator.apply(self.operator, evaluator.evaluate(self.argument))
        return result

    @property
    def expected_order(self) -> int | None:
        if not self.scaled or self.operator is not None:
            return None
        return amplitude_degree(self.defect, self.scaled)


@dataclass(frozen=True)
class ScalingFit:
    """Residual against amplitude, compared with the defect's lowest degree."""

    identity: str
    amplitudes: tuple[float, ...]
    residuals: tuple[float, ...]
    expected: int | None
    band: float

    @property
    def vanishes(self) -> bool:
        return all(r == 0.0 for r in self.residuals)

    @property
    def slope(self) -> float | None:
        if self.vanishes:
            return None
        return scaling_slope(self.amplitudes, self.residuals)

    @property
    def passed(self) -> bool:
        if self.vanishes or self.expected is None or self.slope is None:
            return True
        return abs(self.slope - self.expected) <= self.band * self.expected


CaseBuilder = Callable[[int, int, int, float], NumericCase]


class NumericService:
    """Residuals of identities that exceed the symbolic rule set."""

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self.settings = get_settings()
        self._defects: dict[str, Expression] = {}
        self._builders: dict[str, CaseBuilder] = {
            "moebius-full": self._moebius_left,
            "moebius-right": self._moebius_right,
            "moebius-recombination": self._moebius_recombination,
            "hereditary-symmetry": self._hereditary,
            "miura-flow": self._miura_flow,
            "scalar-schwarzian": self._scalar_schwarzian,
        }
        for eq in catalog.equations.values():
            if (
                eq.rhs is not None
                and eq.recursion is not None
                and not eq.aux_rules
                and samples_resolved(eq.recursion)
            ):
                self._builders[f"flow:{eq.name}"] = self._flow_builder(eq.name)
        for name, builder in (
            ("B1", self._link_b1),
            ("M", self._link_m),
            ("B4", self._link_b4),
            ("B5", self._link_b5),
        ):
            if name in catalog.links:
                self._builders[f"backlund:{name}"] = builder

    @property
    def identities(self) -> list[str]:
        return sorted(self._builders)

    def case(self, identity: str, seed: int, dim: int, grid_points: int, amplitude: float) -> NumericCase:
        if identity not in self._builders:
            raise NcChartError(f"No numeric identity named '{identity}'")
        return self._builders[identity](seed, dim, grid_points, amplitude)

    def residual(
        self,
        identity: str,
        seed: int = 0,
        dim: int | None = None,
        grid_points: int | None = None,
        amplitude: float | None = None,
    ) -> ResidualRecord:
        """Max pointwise norm of the identity's defect on a seeded assignment."""
        dim = dim or self.settings.default_dim
        grid_points = grid_points or self.settings.default_grid_points
        amplitude = self.settings.default_amplitude if amplitude is None else amplitude
        case = self.case(identity, seed, dim, grid_points, amplitude)
        value = max_norm(case.values())
        logger.debug(f"Residual {identity} seed={seed} d={dim} n={grid_points}: {value:.3e}")
        return ResidualRecord(
            identity=identity,
            seed=seed,
            dim=dim,
            grid_points=grid_points,
            residual=value,
            gauge=case.gauge,
        )

    def batch(
        self, identity: str, seeds: Iterable[int], dim: int | None = None, grid_points: int | None = None
    ) -> list[ResidualRecord]:
        return [self.residual(identity, seed, dim, grid_points) for seed in seeds]

    def scaling(
        self,
        identity: str,
        amplitudes: Sequence[float],
        seed: int = 0,
        dim: int | None = None,
        grid_points: int | None = None,
    ) -> ScalingFit:
        """Residuals over an amplitude sweep and the slope they should follow."""
        if len(amplitudes) < 2:
            raise NcChartError("A scaling fit needs at least two amplitudes")
        dim = dim or self.settings.default_dim
        grid_points = grid_points or self.settings.default_grid_points
        cases = [self.case(identity, seed, dim, grid_points, a) for a in amplitudes]
        residuals = tuple(max_norm(case.values()) for case in cases)
        fit = ScalingFit(
            identity=identity,
            amplitudes=tuple(amplitudes),
            residuals=residuals,
            expected=cases[0].expected_order,
            band=self.settings.scaling_band,
        )
        logger.info(f"Scaling {identity}: slope {fit.slope} expected {fit.expected}")
        return fit

    def residual_of(self, defect: Expression, assignment: Assignment, gauge: str = ZERO_MEAN) -> float:
        return max_norm(Evaluator(assignment, gauge).evaluate(defect))

    def _defect(self, key: str, build: Callable[[], Expression]) -> Expression:
        if key not in self._defects:
            self._defects[key] = build()
        return self._defects[key]

    # Cases

    def _grid(self, n: int, period: float | None = None) -> Grid:
        return Grid(n, period or self.settings.default_period)

    def _schwarzian_phi(self, grid: Grid, seed: int, dim: int, amplitude: float) -> MatrixField:
        """phi = x*I + small periodic part, so phi_x stays invertible."""
        periodic = random_field(grid, seed, dim, amplitude=amplitude)
        return MatrixField(grid, periodic.samples, np.eye(dim))

    def _moebius(self, seed: int, dim: int, n: int, amplitude: float, right: bool) -> NumericCase:
        phi = SymbolId("phi")
        a, b, c, d = (SymbolId(name, SymbolKind.CONSTANT) for name in ("A", "B", "C", "D"))
        ph, ea, eb, ec, ed = (Expression.symbol(s) for s in (phi, a, b, c, d))
        grid = self._grid(n)
        alternative = self.settings.assumption_profile == "alternative"
        if right:
            denominator, numerator = ea * ph + eb, ec * ph + ed
        else:
            denominator, numerator = ph * ea + eb, ph * ec + ed
        assumptions = Assumptions().declare(Expression.symbol(phi, 1), denominator)
        inv_den = invert(denominator, assumptions)
        psi = numerator * inv_den if right else inv_den * numerator
        psi_x = differentiate(psi)
        assumptions = assumptions.declare(psi_x)
        flow = Expression.symbol(phi, 1) * schwarzian(phi, assumptions)
        defect = frechet_expr(psi, phi, flow) - psi_x * schwarzian(psi, assumptions)

        scale = 0.3 * amplitude
        if alternative:
            # rank-deficient A; B and C - A psi stay invertible
            p = np.random.default_rng(seed + 1).standard_normal((dim, dim))
            p[:, -1] = 0.0
            a_value = 0.02 * p @ p.T
            c_value = random_constant(seed + 3, dim, scale, 1.0)
            d_value = random_constant(seed + 4, dim, scale)
        else:
            a_value = random_constant(seed + 1, dim, scale, 1.0)
            c_value = random_constant(seed + 3, dim, scale)
            d_value = random_constant(seed + 4, dim, scale, 1.0)
        constants = {
            a: a_value,
            b: random_constant(seed + 2, dim, scale, 2.0),
            c: c_value,
            d: d_value,
        }
        assignment = Assignment(
            grid, dim, {phi: self._schwarzian_phi(grid, seed, dim, amplitude)}, constants
        )
        return NumericCase(defect, assignment)

    def _moebius_left(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        return self._moebius(seed, dim, n, amplitude, right=False)

    def _moebius_right(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        return self._moebius(seed, dim, n, amplitude, right=True)

    def _hereditary(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        """H(v,w) - H(w,v) with H(v,w) = Phi'[Phi v]w - Phi Phi'[v]w."""
        eq = self.catalog.equation("kdv")
        if eq.recursion is None:
            raise NcChartError("Equation 'kdv' has no recursion operator")
        u = eq.unknown
        v_sym, w_sym = SymbolId("v", SymbolKind.DIRECTION), SymbolId("w", SymbolKind.DIRECTION)
        v, w = Expression.symbol(v_sym), Expression.symbol(w_sym)
        phi = eq.recursion

        def h(first: Expression, second: Expression) -> Expression:
            raised = apply(phi, first)
            return apply(frechet_op(phi, u, raised), second) - apply(
                phi, apply(frechet_op(phi, u, first), second)
            )

        defect = self._defect("hereditary-symmetry", lambda: h(v, w) - h(w, v))
        grid = self._grid(n, period=40.0)
        fields = {
            u: localized_field(grid, seed, dim, amplitude),
            v_sym: localized_field(grid, seed + 1, dim, amplitude),
            w_sym: localized_field(grid, seed + 2, dim, amplitude),
        }
        return NumericCase(
            defect, Assignment(grid, dim, fields), DECAYING, scaled=frozenset(fields)
        )

    def _miura_flow(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        """KdV residual of U = -V_x - V^2 along the mKdV flow."""
        kdv = self.catalog.equation("kdv")
        mkdv = self.catalog.equation("mkdv")
        link = self.catalog.link("M")
        if kdv.rhs is None or mkdv.rhs is None:
            raise NcChartError("Miura check needs explicit KdV and mKdV flows")
        miura = substitute(Expression.symbol(kdv.unknown), link.constraints)
        u_t = frechet_expr(miura, mkdv.unknown, mkdv.rhs)
        defect = u_t - substitute(kdv.rhs, link.constraints)
        grid = self._grid(n)
        fields = {mkdv.unknown: random_field(grid, seed, dim, amplitude=amplitude)}
        return NumericCase(defect, Assignment(grid, dim, fields))

    def _scalar_schwarzian(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        """At d = 1 the Schwarzian agrees with phi'''/phi' - 3/2 (phi''/phi')^2."""
        phi = SymbolId("phi")
        p1 = Expression.symbol(phi, 1)
        assumptions = Assumptions().declare(p1)
        q = invert(p1, assumptions)
        ratio = Expression.symbol(phi, 2) * q
        classical = Expression.symbol(phi, 3) * q - (ratio * ratio).scale(Fraction(3, 2))
        grid = self._grid(n)
        assignment = Assignment(grid, 1, {phi: self._schwarzian_phi(grid, seed, 1, amplitude)})
        return NumericCase(schwarzian(phi, assumptions) - classical, assignment)

    def _moebius_recombination(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        """(phi A + B)^-1 (phi C + D) = A^-1 C + (phi A + B)^-1 (D - B A^-1 C)."""
        base = self._moebius(seed, dim, n, amplitude, right=False)
        phi = SymbolId("phi")
        a, b, c, d = (
            Expression.symbol(SymbolId(name, SymbolKind.CONSTANT)) for name in ("A", "B", "C", "D")
        )
        ph = Expression.symbol(phi)
        m = ph * a + b
        assumptions = Assumptions().declare(m, a)
        inv_m, inv_a = invert(m, assumptions), invert(a, assumptions)
        defect = inv_m * (ph * c + d) - inv_a * c - inv_m * (d - b * inv_a * c)
        return NumericCase(defect, base.assignment)

    def _flow_builder(self, name: str) -> CaseBuilder:
        def build(seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
            """Stored rhs against the recursion operator acting on sampled u_x."""
            eq = self.catalog.equation(name)
            if eq.rhs is None or eq.recursion is None:
                raise NcChartError(f"Equation '{name}' has no generated flow")
            grid = self._grid(n, period=40.0)
            fields = {eq.unknown: localized_field(grid, seed, dim, amplitude)}
            return NumericCase(
                eq.rhs,
                Assignment(grid, dim, fields),
                DECAYING,
                operator=eq.recursion,
                argument=Expression.symbol(eq.unknown, 1),
            )

        return build

    # Links, on fields that satisfy the relation exactly

    def _link_defect(self, name: str) -> Expression:
        """d/dt of the relation along both stored flows, not reduced on the relation."""
        link = self.catalog.links[name]

        def build() -> Expression:
            if link.source.rhs is None or link.target.rhs is None:
                raise NcChartError(f"Link '{name}' joins an equation without an explicit flow")
            return frechet_expr(link.relation, link.source.unknown, link.source.rhs) + frechet_expr(
                link.relation, link.target.unknown, link.target.rhs
            )

        return self._defect(f"backlund:{name}", build)

    def _link_b1(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        """U = W' for a localized W."""
        link = self.catalog.links["B1"]
        grid = self._grid(n, period=40.0)
        w = localized_field(grid, seed, dim, amplitude)
        fields = {
            link.target.unknown: w,
            link.source.unknown: MatrixField(grid, w.derivative(1)),
        }
        return NumericCase(self._link_defect("B1"), Assignment(grid, dim, fields), DECAYING)

    def _link_m(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        """U = -V' - V^2 for a periodic V."""
        link = self.catalog.links["M"]
        grid = self._grid(n)
        v = random_field(grid, seed, dim, amplitude=amplitude)
        fields = {
            link.target.unknown: v,
            link.source.unknown: MatrixField(grid, -v.derivative(1) - v.values @ v.values),
        }
        return NumericCase(self._link_defect("M"), Assignment(grid, dim, fields))

    def _phi_fields(
        self, seed: int, dim: int, n: int, amplitude: float
    ) -> tuple[Grid, MatrixField, np.ndarray]:
        """phi with the matching Vt = 1/2 phi'^-1 phi''."""
        grid = self._grid(n)
        phi = self._schwarzian_phi(grid, seed, dim, amplitude)
        vt = 0.5 * np.linalg.inv(phi.derivative(1)) @ phi.derivative(2)
        return grid, phi, vt

    def _link_b4(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        link = self.catalog.links["B4"]
        grid, phi, vt = self._phi_fields(seed, dim, n, amplitude)
        fields = {link.target.unknown: phi, link.source.unknown: MatrixField(grid, vt)}
        return NumericCase(self._link_defect("B4"), Assignment(grid, dim, fields))

    def _link_b5(self, seed: int, dim: int, n: int, amplitude: float) -> NumericCase:
        """S = phi'; Vt is assigned for flows that mention it."""
        link = self.catalog.links["B5"]
        grid, phi, vt = self._phi_fields(seed, dim, n, amplitude)
        fields = {
            link.source.unknown: phi,
            link.target.unknown: MatrixField(grid, phi.derivative(1)),
            self.catalog.symbol("Vt"): MatrixField(grid, vt),
        }
        return NumericCase(self._link_defect("B5"), Assignment(grid, dim, fields))
