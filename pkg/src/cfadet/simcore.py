# Network deployment, channel statistics, pilots, activity and received
# signals for the cell-free uplink random-access slot.

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Micro-cell path loss: beta_dB = PL_INTERCEPT + PL_SLOPE * log10(d / 1 m) + shadow
PL_INTERCEPT_DB = -30.5
PL_SLOPE_DB = -36.7


class PlacementError(RuntimeError):
    """Rejection sampling could not satisfy the spacing constraints."""


def dbm_to_watt(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


@dataclass
class SystemConfig:
    """Scalar parameters of one simulated network.

    Powers are linear watts, distances in meters, shadow_std_db in dB.
    """

    num_aps: int = 20               # M
    antennas_per_ap: int = 2        # N
    num_devices: int = 100          # K
    pilot_len: int = 40             # L
    cluster_size: int = 4           # T
    area_side: float = 1000.0       # D
    activity_prob: float = 0.1      # epsilon
    tx_power: float = 0.1           # rho, uniform across devices (100 mW)
    noise_power: float = dbm_to_watt(-109.0)  # sigma^2
    shadow_std_db: float = 4.0
    coherence_symbols: int = 200    # T_c, upper bound on pilot_len
    placement_margin: float = 50.0
    min_ap_spacing: float = 15.0
    min_device_ap_spacing: float = 10.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if not self.num_aps >= self.cluster_size >= 1:
            problems.append("need num_aps >= cluster_size >= 1")
        if not 0.0 <= self.activity_prob <= 1.0:
            problems.append("activity_prob must lie in [0, 1]")
        if self.pilot_len < 1 or self.pilot_len > self.coherence_symbols:
            problems.append("pilot_len must satisfy 1 <= L <= coherence_symbols")
        if min(self.num_aps, self.antennas_per_ap, self.num_devices) < 1:
            problems.append("num_aps, antennas_per_ap, num_devices must be >= 1")
        if self.area_side <= 0:
            problems.append("area_side must be positive")
        if self.noise_power <= 0:
            problems.append("noise_power must be positive")
        if self.tx_power < 0:
            problems.append("tx_power must be nonnegative")
        if self.shadow_std_db < 0:
            problems.append("shadow_std_db must be nonnegative")
        if self.placement_margin < 0 or 2 * self.placement_margin >= self.area_side:
            problems.append("placement_margin must be in [0, area_side/2)")
        if self.min_ap_spacing < 0 or self.min_device_ap_spacing < 0:
            problems.append("spacings must be nonnegative")
        if problems:
            raise ValueError("invalid SystemConfig: " + "; ".join(problems))


@dataclass
class Deployment:
    """AP and device coordinates inside the wrap-around square."""

    ap_positions: np.ndarray      # (M, 2)
    device_positions: np.ndarray  # (K, 2)


@dataclass
class LargeScaleFading:
    """Path loss plus log-normal shadowing between every AP/device pair."""

    beta_db: np.ndarray   # (M, K)
    beta_lin: np.ndarray  # (M, K), 10^(beta_db/10)
    shadow_db: np.ndarray  # (M, K), the shadowing component alone


def trial_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Independent substream for trial `index` under a common root seed.

    Concurrent trials must each own one of these; the (seed, index) pair
    fully determines the stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def torus_distance(p1, p2, area_side: float):
    """Distance on the square torus [0, D)^2 (wrap-around edges).

    Accepts single points or arrays broadcastable to (..., 2); returns the
    per-pair distances sqrt(sum_dim min(|delta|, D - |delta|)^2).
    """
    delta = np.abs(np.asarray(p1, dtype=float) - np.asarray(p2, dtype=float))
    delta = np.minimum(delta, area_side - delta)
    return np.sqrt(np.sum(delta**2, axis=-1))


def _draw_point(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    lo = cfg.placement_margin
    hi = cfg.area_side - cfg.placement_margin
    return lo + (hi - lo) * rng.random(2)


def place_network(cfg: SystemConfig, rng: np.random.Generator,
                  max_draws_per_point: int = 100_000) -> Deployment:
    """Uniform placement by rejection sampling.

    APs keep pairwise torus spacing >= min_ap_spacing; devices keep torus
    spacing >= min_device_ap_spacing from every AP. Points are drawn from
    [margin, D - margin)^2. Raises PlacementError when a point cannot be
    placed within the draw budget (infeasible spacing configuration).
    """
    aps = np.empty((cfg.num_aps, 2))
    for m in range(cfg.num_aps):
        for attempt in range(max_draws_per_point):
            cand = _draw_point(cfg, rng)
            if m == 0 or np.all(
                torus_distance(aps[:m], cand, cfg.area_side) >= cfg.min_ap_spacing
            ):
                aps[m] = cand
                break
        else:
            raise PlacementError(
                f"could not place AP {m} after {max_draws_per_point} draws; "
                f"min_ap_spacing={cfg.min_ap_spacing} m looks infeasible"
            )

    devices = np.empty((cfg.num_devices, 2))
    for k in range(cfg.num_devices):
        for attempt in range(max_draws_per_point):
            cand = _draw_point(cfg, rng)
            if np.all(
                torus_distance(aps, cand, cfg.area_side) >= cfg.min_device_ap_spacing
            ):
                devices[k] = cand
                break
        else:
            raise PlacementError(
                f"could not place device {k} after {max_draws_per_point} draws; "
                f"min_device_ap_spacing={cfg.min_device_ap_spacing} m looks infeasible"
            )

    return Deployment(ap_positions=aps, device_positions=devices)


def compute_beta(dep: Deployment, cfg: SystemConfig,
                 rng: np.random.Generator) -> LargeScaleFading:
    """Large-scale fading beta_dB = -30.5 - 36.7 log10(d) + F, F ~ N(0, sh^2)."""
    d = torus_distance(
        dep.ap_positions[:, None, :], dep.device_positions[None, :, :], cfg.area_side
    )
    if np.any(d <= 0):
        raise ValueError("zero AP-device distance; enforce min_device_ap_spacing > 0")
    shadow = cfg.shadow_std_db * rng.standard_normal(d.shape)
    beta_db = PL_INTERCEPT_DB + PL_SLOPE_DB * np.log10(d) + shadow
    return LargeScaleFading(
        beta_db=beta_db, beta_lin=10.0 ** (beta_db / 10.0), shadow_db=shadow
    )


def generate_pilots(pilot_len: int, num_devices: int, rng: np.random.Generator,
                    unit_norm: bool = False) -> np.ndarray:
    """(L, K) pilot matrix, entries i.i.d. CN(0, 1); column k is device k's pilot.

    With unit_norm each column is rescaled to ||s_k||^2 = L.
    """
    if pilot_len < 1 or num_devices < 1:
        raise ValueError("pilot_len and num_devices must be >= 1")
    shape = (pilot_len, num_devices)
    s = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    if unit_norm:
        norms = np.linalg.norm(s, axis=0, keepdims=True)
        s = s * (np.sqrt(pilot_len) / norms)
    return s


def sample_activity(activity_prob: float, num_devices: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Length-K 0/1 vector with i.i.d. Bernoulli(activity_prob) entries."""
    if not 0.0 <= activity_prob <= 1.0:
        raise ValueError("activity_prob must lie in [0, 1]")
    return (rng.random(num_devices) < activity_prob).astype(np.uint8)


def simulate_received(beta: LargeScaleFading, pilots: np.ndarray,
                      activity: np.ndarray, cfg: SystemConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """One coherence block of received pilots, shape (M, N, L).

    y_mn = sum_k sqrt(rho) a_k sqrt(beta_mk) h_mnk s_k + w_mn, with fresh
    i.i.d. Rayleigh fading h_mnk ~ CN(0,1) and noise w ~ CN(0, sigma^2 I_L)
    per call (block fading, one block per call).
    """
    return simulate_received_batch(beta, pilots, activity[None, :], cfg, rng)[0]


def simulate_received_batch(beta: LargeScaleFading, pilots: np.ndarray,
                            activity: np.ndarray, cfg: SystemConfig,
                            rng: np.random.Generator) -> np.ndarray:
    """Vectorized coherence blocks for a batch of activity vectors.

    activity has shape (S, K); returns (S, M, N, L). Fading and noise are
    independent across the S slots.
    """
    M, N, K, L = (cfg.num_aps, cfg.antennas_per_ap, cfg.num_devices, cfg.pilot_len)
    act = np.asarray(activity)
    if act.ndim != 2 or act.shape[1] != K:
        raise ValueError(f"activity must have shape (S, {K})")
    if pilots.shape != (L, K) or beta.beta_lin.shape != (M, K):
        raise ValueError("dimension mismatch between pilots/beta and config")
    S = act.shape[0]

    h = (rng.standard_normal((S, M, N, K)) +
         1j * rng.standard_normal((S, M, N, K))) / np.sqrt(2.0)
    # per-device complex amplitude at antenna (m, n): sqrt(rho a_k beta_mk) h
    amp = np.sqrt(cfg.tx_power * act[:, None, None, :] * beta.beta_lin[None, :, None, :])
    coeff = amp * h
    y = np.einsum("lk,smnk->smnl", np.asarray(pilots), coeff, optimize=True)
    noise = (rng.standard_normal((S, M, N, L)) +
             1j * rng.standard_normal((S, M, N, L))) * np.sqrt(cfg.noise_power / 2.0)
    return y + noise
