"""Spectral analysis of pruned models.

The transition of every block is diagonal, so the eigenvalue of state
dimension i at a probe position is the decay factor itself and eigenvalue
shifts are computed exactly, without an eigensolver.

Shifts are measured per block at the dense model's block inputs, so they
isolate the effect of the pruned parameters of that block on its own
transition.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError
from .masking import PruneMask, build_global_mask
from .model import PROBE_SEED, ComponentKind, ParamKey, SSMModel, block_inputs, transition_rates
from .stability import DEFAULT_EPSILON, block_eigs

KAPPA_DIAGONAL = 1.0  # eigenvector matrix is the identity
RICHARDSON_TOLERANCE = 0.10
REFERENCE_GAMMA_RATIO = (2.0, 3.0)
MAX_LISTED = 20


def effective_eigenvalues(model: SSMModel, mask, probe_inputs) -> np.ndarray:
    """Max-over-probe magnitude per block and state dim, [n_layers x state_dim]."""
    if np.size(probe_inputs) == 0:
        raise ContractError("probe set must be non-empty")
    xs = block_inputs(model, probe_inputs, mask)
    return np.stack([block_eigs(model, b, x, mask).max(axis=0) for b, x in enumerate(xs)])


@dataclass
class ShiftResult:
    per_dim: np.ndarray  # [n_layers x state_dim], max over probe positions
    max_shift: float


def eigenvalue_shift(model: SSMModel, mask, probe_inputs, dense_inputs=None) -> ShiftResult:
    """|lambda(dense) - lambda(masked)| per block and state dim."""
    xs = block_inputs(model, probe_inputs) if dense_inputs is None else dense_inputs
    per_dim = np.stack(
        [np.abs(block_eigs(model, b, x) - block_eigs(model, b, x, mask)).max(axis=0) for b, x in enumerate(xs)]
    )
    return ShiftResult(per_dim, float(per_dim.max()))


# -- sensitivity -----------------------------------------------------------


def _magnitude(a_log: np.ndarray, delta: np.ndarray, mode: str) -> np.ndarray:
    return np.abs(np.exp(delta * transition_rates(a_log, mode)))


def _fd_gammas(a_log: np.ndarray, delta: np.ndarray, mode: str, step: float) -> tuple[float, float]:
    d_delta = (_magnitude(a_log, delta + step, mode) - _magnitude(a_log, delta - step, mode)) / (2 * step)
    d_alog = (_magnitude(a_log + step, delta, mode) - _magnitude(a_log - step, delta, mode)) / (2 * step)
    return float(np.abs(d_alog).max()), float(np.abs(d_delta).max())


@dataclass
class Sensitivity:
    gamma_a: float
    gamma_delta: float
    step: float
    flagged: dict[str, float] = field(default_factory=dict)  # relative Richardson discrepancy

    @property
    def ratio(self) -> float:
        return self.gamma_delta / self.gamma_a if self.gamma_a > 0 else float("inf")


def sensitivity_from_values(a_log, delta, mode: str = "unconstrained", step: float = 1e-4) -> Sensitivity:
    """gamma_A, gamma_Delta for decay magnitudes exp(delta_p * A_i).

    ``delta`` is [positions] or [positions x state_dim].  Derivatives are
    central differences; a second pass at half the step flags values that
    disagree by more than 10%.
    """
    if not step > 0:
        raise ContractError(f"step must be positive, got {step}")
    a_log = np.asarray(a_log, dtype=np.float64).reshape(1, -1)
    delta = np.asarray(delta, dtype=np.float64)
    delta = delta.reshape(-1, 1) if delta.ndim <= 1 else delta
    coarse = _fd_gammas(a_log, delta, mode, step)
    fine = _fd_gammas(a_log, delta, mode, step / 2)
    flagged = {}
    for name, c, f in zip(("gamma_a", "gamma_delta"), coarse, fine):
        scale = max(abs(c), abs(f))
        if scale > 0 and abs(c - f) / scale > RICHARDSON_TOLERANCE:
            flagged[name] = abs(c - f) / scale
    return Sensitivity(coarse[0], coarse[1], step, flagged)


def _block_deltas(model: SSMModel, xs) -> list[np.ndarray]:
    out = []
    for b, x in enumerate(xs):
        w = model.params[ParamKey(b, ComponentKind.DELTA_PROJECTION)]
        out.append(np.logaddexp(0.0, x.reshape(-1, x.shape[-1]) @ w.T))
    return out


def sensitivity_coefficients(model: SSMModel, probe_inputs, step: float = 1e-4) -> Sensitivity:
    """Worst case over blocks and probe positions of the eigenvalue derivatives."""
    xs = block_inputs(model, probe_inputs)
    parts = []
    for b, delta in enumerate(_block_deltas(model, xs)):
        a_log = model.params[ParamKey(b, ComponentKind.STATE_TRANSITION)]
        parts.append(sensitivity_from_values(a_log, delta, model.config.param_mode, step))
    flagged = {}
    for p in parts:
        for k, v in p.flagged.items():
            flagged[k] = max(v, flagged.get(k, 0.0))
    return Sensitivity(max(p.gamma_a for p in parts), max(p.gamma_delta for p in parts), step, flagged)


# -- perturbation bound ----------------------------------------------------


def bound_value(constant: float, sparsity: float, gamma_a: float, norm_a: float, gamma_delta: float, norm_delta: float,
                kappa: float = KAPPA_DIAGONAL) -> float:
    """C * s * kappa * (gamma_A * |A_log|_F + gamma_Delta * |Delta|_F)."""
    return constant * sparsity * kappa * (gamma_a * norm_a + gamma_delta * norm_delta)


@dataclass
class BoundFactors:
    """Mask-independent factors of the bound, evaluated on the dense model."""

    sensitivity: Sensitivity
    norm_a: float
    norm_delta: float
    dense_inputs: list = field(repr=False, default_factory=list)

    def unscaled(self, sparsity: float) -> float:
        s = self.sensitivity
        return bound_value(1.0, sparsity, s.gamma_a, self.norm_a, s.gamma_delta, self.norm_delta)


def bound_factors(model: SSMModel, probe_inputs, step: float = 1e-4) -> BoundFactors:
    xs = block_inputs(model, probe_inputs)
    norm_a = float(np.sqrt(sum(np.sum(model.params[ParamKey(b, ComponentKind.STATE_TRANSITION)] ** 2)
                               for b in range(model.config.n_layers))))
    norm_delta = float(np.sqrt(sum(np.sum(d**2) for d in _block_deltas(model, xs))))
    return BoundFactors(sensitivity_coefficients(model, probe_inputs, step), norm_a, norm_delta, xs)


@dataclass
class BoundCheck:
    bound: float
    shift: float
    sparsity: float

    @property
    def holds(self) -> bool:
        return self.shift <= self.bound


def perturbation_bound(model: SSMModel, mask: PruneMask, probe_inputs, calibrated_C: float,
                       factors: BoundFactors | None = None) -> BoundCheck:
    if not calibrated_C > 0:
        raise ContractError(f"calibrated constant must be positive, got {calibrated_C}")
    factors = factors or bound_factors(model, probe_inputs)
    s = mask.sparsity()
    shift = eigenvalue_shift(model, mask, probe_inputs, dense_inputs=factors.dense_inputs).max_shift
    return BoundCheck(calibrated_C * factors.unscaled(s), shift, s)


def random_masks(model: SSMModel, sparsities, seed: int) -> list[PruneMask]:
    """Uniformly random masks with exactly floor(s * total) pruned entries."""
    rng = np.random.default_rng(seed)
    keys = model.maskable_keys()
    out = []
    for s in np.atleast_1d(sparsities):
        scores = {k: rng.random(model.params[k].shape) for k in keys}
        out.append(build_global_mask(scores, float(s)))
    return out


@dataclass
class Calibration:
    constant: float
    ratios: np.ndarray
    factors: BoundFactors


def calibrate_constant(model: SSMModel, masks, probe_inputs, factors: BoundFactors | None = None) -> Calibration:
    """Largest ratio of measured shift to the bound's other factors."""
    factors = factors or bound_factors(model, probe_inputs)
    ratios = []
    for m in masks:
        denom = factors.unscaled(m.sparsity())
        if denom <= 0:
            continue
        shift = eigenvalue_shift(model, m, probe_inputs, dense_inputs=factors.dense_inputs).max_shift
        ratios.append(shift / denom)
    if not ratios:
        raise ContractError("calibration needs at least one mask with positive sparsity")
    ratios = np.asarray(ratios)
    return Calibration(float(ratios.max()), ratios, factors)


def bound_coverage(model: SSMModel, masks, probe_inputs, calibration: Calibration) -> tuple[float, list[BoundCheck]]:
    checks = [perturbation_bound(model, m, probe_inputs, calibration.constant, calibration.factors) for m in masks]
    return sum(c.holds for c in checks) / len(checks), checks


# -- trajectories and reports ----------------------------------------------

TRAJECTORY_COLUMNS = ("step", "iteration", "sparsity", "max_eig", "violations", "corrections")
_TRAJECTORY_SOURCE = {
    "step": "step",
    "iteration": "iteration",
    "sparsity": "achieved_sparsity",
    "max_eig": "max_eig",
    "violations": "violations",
    "corrections": "corrections_count",
}


def eigen_trajectory(run_log: list[dict]) -> list[dict]:
    rows = []
    for n, rec in enumerate(run_log):
        missing = [src for src in _TRAJECTORY_SOURCE.values() if src not in rec]
        if missing:
            raise FormatError(f"run log record {n} lacks {missing}")
        rows.append({col: rec[src] for col, src in _TRAJECTORY_SOURCE.items()})
    return rows


def write_csv(path_or_buffer, rows: list[dict], columns) -> None:
    own = not hasattr(path_or_buffer, "write")
    fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})
    finally:
        if own:
            fh.close()


@dataclass
class StabilityReport:
    max_eig: np.ndarray
    shift: ShiftResult
    sensitivity: Sensitivity
    epsilon: float
    sparsity: float
    constant: float | None = None
    bound: float | None = None
    violations: list[dict] = field(default_factory=list)
    probe_seed: int = PROBE_SEED

    @property
    def bound_holds(self) -> bool | None:
        return None if self.bound is None else self.shift.max_shift <= self.bound

    def rows(self) -> list[dict]:
        out = []
        for b in range(self.max_eig.shape[0]):
            for i in range(self.max_eig.shape[1]):
                out.append({
                    "block": b,
                    "state_dim": i,
                    "max_eig": float(self.max_eig[b, i]),
                    "shift": float(self.shift.per_dim[b, i]),
                    "violation": bool(self.max_eig[b, i] > 1.0 - self.epsilon),
                })
        return out

    def to_csv(self, path_or_buffer) -> None:
        write_csv(path_or_buffer, self.rows(), ("block", "state_dim", "max_eig", "shift", "violation"))

    def to_text(self) -> str:
        s = self.sensitivity
        lo, hi = REFERENCE_GAMMA_RATIO
        lines = [
            "stability report",
            f"  probe seed            {self.probe_seed}",
            f"  sparsity              {self.sparsity:.4f}",
            f"  epsilon               {self.epsilon}",
            f"  max |lambda|          {self.max_eig.max():.6f}",
            f"  violating dims        {len(self.violations)}",
            f"  max eigenvalue shift  {self.shift.max_shift:.6f}",
            f"  gamma_A               {s.gamma_a:.6g}",
            f"  gamma_Delta           {s.gamma_delta:.6g}",
            f"  gamma_Delta/gamma_A   {s.ratio:.3f} (reference range {lo:g}-{hi:g}: "
            f"{'inside' if lo <= s.ratio <= hi else 'outside'})",
        ]
        if s.flagged:
            lines.append(f"  finite-difference flags {s.flagged}")
        if self.bound is not None:
            lines += [
                f"  calibrated C          {self.constant:.6g}",
                f"  bound                 {self.bound:.6g} ({'holds' if self.bound_holds else 'VIOLATED'})",
            ]
        for v in self.violations[:MAX_LISTED]:
            lines.append(f"  violation block {v['block']} dim {v['state_dim']}: |lambda| = {v['max_eig']:.6f}")
        if len(self.violations) > MAX_LISTED:
            lines.append(f"  ... {len(self.violations) - MAX_LISTED} more in the CSV table")
        return "\n".join(lines) + "\n"

    def csv_text(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


def analyze(model: SSMModel, mask: PruneMask | None, probe_inputs, epsilon: float = DEFAULT_EPSILON,
            calibration: Calibration | None = None) -> StabilityReport:
    """Full stability report of ``model`` under ``mask`` (dense model as reference)."""
    mask = mask if mask is not None else PruneMask.ones(model)
    factors = calibration.factors if calibration is not None else bound_factors(model, probe_inputs)
    eig = effective_eigenvalues(model, mask, probe_inputs)
    shift = eigenvalue_shift(model, mask, probe_inputs, dense_inputs=factors.dense_inputs)
    violations = [
        {"block": b, "state_dim": i, "max_eig": float(eig[b, i])}
        for b, i in zip(*np.nonzero(eig > 1.0 - epsilon))
    ]
    report = StabilityReport(eig, shift, factors.sensitivity, epsilon, mask.sparsity(), violations=violations)
    if calibration is not None:
        report.constant = calibration.constant
        report.bound = calibration.constant * factors.unscaled(mask.sparsity())
    return report
