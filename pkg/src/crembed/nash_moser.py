"""
Nash-Moser iteration with smoothing, the inequality ledger, and a scalar
recurrence simulator.

Conventions
-----------
The smoothing parameter ``T`` used throughout is a frequency cutoff:
``S_T`` keeps Fourier modes with ``|xi| <= T``, the schedule is
``T_{j+1} = T_j^(7/6)`` and ``T_0 = 2`` by default.  The estimates written
with a small parameter t correspond to ``t = 1/T``; in this form

* ``|S_T f|_r <= C T^(r-q) |f|_q`` and ``|(I - S_T) f|_q <= C T^(q-r) |f|_r`` for q <= r,
* the ledger reads ``1 + |rho|_{k+2} <= C_rho``, ``T^6 delta <= 1/2`` and
  ``T^(12-s) [|rho|_{k+s+2} + delta(s)] <= 1/4``,
* the initial budget is ``eps = T_0^(-6) / 2``.

Norms on the periodic toy grid are weighted Fourier sups
``|f|_r = max_xi (1 + |xi|)^r |fhat(xi)|``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .deformation import NearIdentityMap, invert_map


class LedgerViolation(RuntimeError):
    """An inequality of the ledger failed; ``report`` holds the diagnostic."""

    def __init__(self, message: str, report: Optional[dict] = None):
        super().__init__(message)
        self.report = report or {}


# ----------------------------------------------------------------------------
# periodic grid, norms and smoothing

class PeriodicGrid:
    """
    Uniform grid on a circle of length 2*pi*scale.

    Frequencies are ``k / scale``; with the default N = 64 and scale = 16
    the largest is 2, which keeps roundoff harmless in order-32 norms.
    """

    def __init__(self, N: int = 64, scale: float = 16.0):
        self.N, self.scale = int(N), float(scale)
        self.length = 2 * np.pi * self.scale
        self.x = np.arange(self.N) * self.length / self.N
        self.xi = np.fft.fftfreq(self.N, d=1.0 / self.N) / self.scale

    def hat(self, f) -> np.ndarray:
        return np.fft.fft(f) / self.N

    def norm(self, f, r: float) -> float:
        return float(np.max((1 + np.abs(self.xi)) ** r * np.abs(self.hat(f))))

    def deriv(self, f) -> np.ndarray:
        return np.real(np.fft.ifft(1j * self.xi * np.fft.fft(f)))

    def evaluate(self, f, y) -> np.ndarray:
        """Trigonometric interpolant of grid data ``f`` at arbitrary points ``y``."""
        c = self.hat(f)
        y = np.asarray(y, float)
        return np.real(np.exp(1j * np.multiply.outer(y, self.xi)) @ c)

    def mode(self, k: int, amplitude: float = 1.0, phase: float = 0.0) -> np.ndarray:
        return amplitude * np.cos(k * self.x / self.scale + phase)


def smooth(grid: PeriodicGrid, f, T: float) -> np.ndarray:
    """Spectral truncation S_T: keep modes with |xi| <= T."""
    fh = np.fft.fft(f)
    fh[np.abs(grid.xi) > T] = 0
    return np.real(np.fft.ifft(fh))


def smoothing_constants(grid: PeriodicGrid, q: float, r: float, Ts, battery) -> Dict[str, float]:
    """
    Measured constants in |S_T f|_r <= C T^(r-q) |f|_q and |(I - S_T) f|_q <= C T^(q-r) |f|_r.

    Returns the worst ratios over the battery and the cutoff ladder.
    """
    c_gain, c_loss = 0.0, 0.0
    for f in battery:
        fq, fr = grid.norm(f, q), grid.norm(f, r)
        for T in Ts:
            s = smooth(grid, f, T)
            if fq > 0:
                c_gain = max(c_gain, grid.norm(s, r) / (T ** (r - q) * fq))
            if fr > 0:
                c_loss = max(c_loss, grid.norm(f - s, q) / (T ** (q - r) * fr))
    return {"gain": c_gain, "loss": c_loss}


# ----------------------------------------------------------------------------
# toy backend

class ToyBackend:
    """
    One-dimensional model of the deformation problem.

    The linearized operator is ``D_rho xi = xi' + c (1 + rho) xi`` with the
    exact right inverse ``P_rho`` (dense solve), and the update after the
    map ``F = x + xi`` is the quadratic remainder

        mu* o F = mu - D_rho xi / (1 + xi'),   rho* = rho o F^{-1},

    so that ``mu* = O(|D xi - mu| + |xi|_1 |mu|)``.
    """

    def __init__(self, grid: Optional[PeriodicGrid] = None, c: float = 0.5):
        self.grid = grid or PeriodicGrid()
        self.c = float(c)
        N = self.grid.N
        F = np.fft.fft(np.eye(N), axis=0)
        self._deriv = np.real(np.fft.ifft(1j * self.grid.xi[:, None] * F, axis=0))

    def D(self, rho, xi) -> np.ndarray:
        return self.grid.deriv(xi) + self.c * (1 + rho) * xi

    def P(self, rho, mu) -> np.ndarray:
        A = self._deriv + self.c * np.diag(1 + rho)
        return np.linalg.solve(A, mu)

    def step_map(self, xi) -> NearIdentityMap:
        g = self.grid
        F = NearIdentityMap(lambda z: g.evaluate(xi, np.real(z)) + 0j)
        return invert_map(F)

    def update(self, rho, mu, xi):
        """Return (rho*, mu*, F) on the grid of the image circle."""
        g = self.grid
        rem = mu - self.D(rho, xi) / (1 + g.deriv(xi))
        F = self.step_map(xi)
        back = np.real(F.inverse(g.x + 0j))
        return g.evaluate(rho, back), g.evaluate(rem, back), F


# ----------------------------------------------------------------------------
# configuration and ledger

@dataclass
class LedgerConfig:
    """
    Parameters of the iteration and its ledger.

    ``C`` multiplies every estimate, ``P_deg`` stands for the polynomial
    degree P(k), ``C_rho`` bounds ``1 + |rho|_{k+2}``.
    """

    k: int = 17
    s: int = 13
    C: float = 1.0
    C_rho: float = 10.0
    P_deg: float = 1.0
    t0: float = 2.0
    eps: Optional[float] = None
    max_iter: int = 20
    target: float = 1e-8

    def __post_init__(self):
        if self.k < 17:
            raise ValueError("k must be at least 17")
        if not (13 <= self.s <= self.k - 4):
            raise ValueError("s must satisfy 13 <= s <= k - 4")
        if self.t0 <= 1:
            raise ValueError("t0 is a frequency cutoff and must exceed 1")
        if self.eps is None:
            self.eps = 0.5 * self.t0 ** -6

    def schedule(self, j: int) -> float:
        return self.t0 ** ((7 / 6) ** j)


def ledger_flags(T, rho_k2, rho_ks2, delta, delta_s, cfg: LedgerConfig) -> Dict[str, float]:
    """The three ledger quantities; each must stay at or below its bound."""
    return {
        "rho": 1 + rho_k2,
        "delta": T ** 6 * delta,
        "high": T ** (12 - cfg.s) * (rho_ks2 + delta_s),
    }


BOUNDS = {"delta": 0.5, "high": 0.25}


def ledger_check(state: "IterationState", cfg: LedgerConfig) -> Dict[str, object]:
    """Evaluate the ledger at one state; green when every flag is within its bound."""
    q = ledger_flags(state.T, state.rho_k2, state.rho_ks2, state.delta, state.delta_s, cfg)
    ok = {"rho": q["rho"] <= cfg.C_rho, "delta": q["delta"] <= BOUNDS["delta"], "high": q["high"] <= BOUNDS["high"]}
    return {"values": q, "ok": ok, "green": all(ok.values())}


def lemma_predictions(state: "IterationState", cfg: LedgerConfig) -> Dict[str, float]:
    """Upper bounds for the next step from the one-step lemma, in frequency form."""
    T, s = state.T, cfg.s
    K = cfg.C * (1 + state.rho_k2) ** cfg.P_deg
    d, ds, Rs = state.delta, state.delta_s, state.rho_ks2
    return {
        "delta": K * (T ** 4 * d * d + T ** (4 - s) * ((1 + Rs) * d + ds)),
        "rho_ks2": K * (Rs + T ** (s + 5) * d),
        "delta_s": K * (ds + T ** (s + 4) * d + T ** 4 * d * Rs),
    }


# ----------------------------------------------------------------------------
# iteration

@dataclass
class IterationState:
    j: int
    T: float
    theta: float
    delta: float
    delta_s: float
    rho_k2: float
    rho_ks2: float
    green: bool = True
    predictions_hold: bool = True
    flags: Dict[str, float] = field(default_factory=dict)


@dataclass
class IterationResult:
    trace: List[IterationState]
    converged: bool
    final_delta: float
    displacement: np.ndarray
    rho: np.ndarray
    mu: np.ndarray

    @property
    def thetas(self) -> np.ndarray:
        return np.array([s.theta for s in self.trace])

    def theta_tail(self) -> float:
        """Bound on the unsummed tail of sum theta_j from the last ratio (geometric majorant)."""
        th = self.thetas[self.thetas > 0]
        if len(th) < 2:
            return float(th[-1]) if len(th) else 0.0
        ratio = th[-1] / th[-2]
        if ratio >= 1:
            return math.inf
        return float(th[-1] * ratio / (1 - ratio))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["j", "T", "theta", "delta", "delta_s", "rho_k2", "rho_ks2", "green", "predictions_hold"])
        for s in self.trace:
            w.writerow([s.j, f"{s.T:.12g}", f"{s.theta:.6e}", f"{s.delta:.6e}", f"{s.delta_s:.6e}",
                        f"{s.rho_k2:.6e}", f"{s.rho_ks2:.6e}", int(s.green), int(s.predictions_hold)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"converged": self.converged, "final_delta": self.final_delta, "iterations": len(self.trace),
                "theta_sum": float(self.thetas.sum()), "theta_tail": self.theta_tail(),
                "all_green": all(s.green for s in self.trace)}


def iterate(mu0, rho0, cfg: LedgerConfig, backend: Optional[ToyBackend] = None,
            abort_on_violation: bool = True) -> IterationResult:
    """
    Run xi_j = S_{T_j} P(mu_j), F_j = exp(xi_j), mu_{j+1} = mu_j* until delta_j < target.

    Raises
    ------
    LedgerViolation
        If the initial budget |mu0|_{2k} < eps fails, or (when
        ``abort_on_violation``) any ledger flag turns red.
    """
    be = backend or ToyBackend()
    g = be.grid
    mu, rho = np.asarray(mu0, float).copy(), np.asarray(rho0, float).copy()
    d2k = g.norm(mu, 2 * cfg.k)
    if d2k >= cfg.eps:
        raise LedgerViolation(f"initial size |mu0|_2k = {d2k:.3e} is not below eps = {cfg.eps:.3e}",
                              {"delta0_2k": d2k, "eps": cfg.eps})
    trace: List[IterationState] = []
    disp = np.zeros(g.N)
    converged = False
    prev_pred = None
    for j in range(cfg.max_iter + 1):
        T = cfg.schedule(j)
        st = IterationState(j, T, 0.0, g.norm(mu, cfg.k), g.norm(mu, cfg.k + cfg.s),
                            g.norm(rho, cfg.k + 2), g.norm(rho, cfg.k + cfg.s + 2))
        chk = ledger_check(st, cfg)
        st.green, st.flags = chk["green"], chk["values"]
        if prev_pred is not None:
            st.predictions_hold = (st.delta <= prev_pred["delta"] and st.rho_ks2 <= prev_pred["rho_ks2"]
                                   and st.delta_s <= prev_pred["delta_s"])
        trace.append(st)
        if not st.green and abort_on_violation:
            bad = [name for name, ok in chk["ok"].items() if not ok]
            raise LedgerViolation(f"ledger flag(s) {bad} failed at j = {j}", {"state": asdict(st), "check": chk})
        if st.delta < cfg.target:
            converged = True
            break
        if j == cfg.max_iter:
            break
        xi = smooth(g, be.P(rho, mu), T)
        st.theta = g.norm(xi, cfg.k + 2)
        prev_pred = lemma_predictions(st, cfg)
        rho, mu, F = be.update(rho, mu, xi)
        disp = disp + g.evaluate(xi, g.x + disp)
    return IterationResult(trace, converged, trace[-1].delta, disp, rho, mu)


def default_initial_data(grid: PeriodicGrid, delta0: float = 1e-3, k: int = 17, rho_amp: float = 0.02):
    """Low-frequency data with |mu0|_k = delta0 and a small curved rho."""
    mu = grid.mode(1, 1.0) + 0.5 * grid.mode(2, 1.0, 0.3)
    mu *= delta0 / grid.norm(mu, k)
    rho = grid.mode(1, rho_amp, 1.1)
    return mu, rho


# ----------------------------------------------------------------------------
# scalar recurrences

@dataclass
class Rollout:
    feasible: bool
    first_violation: Optional[int]
    violated: List[str]
    deltas: np.ndarray
    decay_exponent: float


def recurrence_simulate(C: float, P_deg: float, k: int, s: int, t0: float, delta0: float, horizon: int = 200,
                        rho0: float = 0.05, rho_high0: float = 0.05, delta_s0: Optional[float] = None,
                        C_rho: float = 10.0, closure: str = "printed") -> Rollout:
    """
    Roll the one-step estimates forward as equalities.

    ``closure="printed"`` propagates ``a_j = T_j^6 delta_j`` and the high
    quantity ``b_j = T_j^(12-s)[|rho|_{k+s+2} + delta_j(s)]`` through the
    induction-step inequalities as displayed in the convergence proof,

        a' = K T^-1 {a^2 + T^(12-s)[(1 + Rs) delta + delta_s]},
        b' = K T^((12-s)/6) (b + T^5 delta),

    while ``closure="lemma"`` rolls the three one-step lemma bounds
    literally.  Both track ``1 + |rho|_{k+2}`` through the product
    ``(1 + C theta_j)^P`` with ``theta_j = C T_j^5 delta_j (1 + R_j)^P``.
    """
    if closure not in ("printed", "lemma"):
        raise ValueError("closure must be 'printed' or 'lemma'")
    T, d = float(t0), float(delta0)
    ds = 2 * d if delta_s0 is None else float(delta_s0)
    R, Rs = float(rho0), float(rho_high0)
    b = T ** (12 - s) * (Rs + ds)
    deltas = [d]
    for j in range(horizon + 1):
        if closure == "lemma":
            b = T ** (12 - s) * (Rs + ds)
        bad = []
        if 1 + R > C_rho:
            bad.append("rho")
        if T ** 6 * d > 0.5:
            bad.append("delta")
        if b > 0.25:
            bad.append("high")
        if bad:
            return Rollout(False, j, bad, np.array(deltas), _decay_exponent(deltas))
        if j == horizon or d == 0.0:
            break
        K = C * (1 + R) ** P_deg
        theta = C * T ** 5 * d * (1 + R) ** P_deg
        if closure == "printed":
            high = b / T ** (12 - s)  # Rs + ds
            a = T ** 6 * d
            a_next = K / T * (a * a + T ** (12 - s) * (d + high * (1 + d)))
            b = K * T ** ((12 - s) / 6) * (b + T ** 5 * d)
            T_next = T ** (7 / 6)
            d = a_next / T_next ** 6
        else:
            d_next = K * (T ** 4 * d * d + T ** (4 - s) * ((1 + Rs) * d + ds))
            Rs, ds = K * (Rs + T ** (s + 5) * d), K * (ds + T ** (s + 4) * d + T ** 4 * d * Rs)
            d = d_next
            T_next = T ** (7 / 6)
        R = (1 + R) * (1 + C * theta) ** P_deg - 1
        T = T_next
        if not np.isfinite(T) or T > 1e300 ** (1 / 6):
            break
        deltas.append(d)
    return Rollout(True, None, [], np.array(deltas), _decay_exponent(deltas))


def _decay_exponent(deltas) -> float:
    """Slope of log delta_{j+1} against log delta_j over the tail (superlinear when > 1)."""
    d = np.asarray(deltas, float)
    d = d[(d > 0) & (d < 1)]
    if len(d) < 4:
        return float("nan")
    x, y = np.log(d[-6:-1]), np.log(d[-5:])
    n = min(len(x), len(y))
    return float(np.polyfit(x[-n:], y[-n:], 1)[0])


def feasibility_scan(C: float = 10.0, P_deg: float = 1.0, k: int = 17, s: int = 13, t0s=(2.0, 4.0, 8.0),
                     fractions=None, horizon: int = 200, closure: str = "printed", **kw) -> dict:
    """
    For each t0, the largest delta0 = fraction * t0^-6 / 2 whose rollout stays feasible.

    Returns per-t0 entries with the largest feasible budget (0 when none) and
    the first violation index of the smallest infeasible budget.
    """
    fractions = np.logspace(0, -12, 49) if fractions is None else np.asarray(fractions)
    out = {}
    for t0 in t0s:
        eps = 0.5 * t0 ** -6
        best, first_bad = 0.0, None
        for fr in fractions:  # descending
            ro = recurrence_simulate(C, P_deg, k, s, t0, fr * eps, horizon, closure=closure, **kw)
            if ro.feasible:
                best = fr * eps
                break
            if first_bad is None:
                first_bad = {"delta0": fr * eps, "index": ro.first_violation, "flags": ro.violated}
        out[float(t0)] = {"eps": eps, "max_feasible_delta0": best, "first_violation": first_bad}
    return out
