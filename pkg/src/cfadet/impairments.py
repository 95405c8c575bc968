# Robustness studies: large-scale-fading estimation error and fixed-point
# (finite word length) representation of detector inputs.

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simcore import LargeScaleFading

LINEAR_BETA_FLOOR = 1e-30


@dataclass
class PerturbationParams:
    """Estimation-error model x~ = sqrt(1 - theta^2) x + theta psi, psi ~ N(0,1).

    theta = 0 is perfect estimation, theta = 1 pure noise. `domain` selects
    where the mixing happens: "db" (default) applies it to the standardized
    dB coefficients, "linear" applies it literally to the linear gains.
    """

    theta: float
    domain: str = "db"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.domain not in ("db", "linear"):
            raise ValueError("domain must be 'db' or 'linear'")


def perturb_values(x: np.ndarray, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Elementwise sqrt(1 - theta^2) x + theta psi with fresh psi ~ N(0,1)."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(1.0 - theta**2) * x + theta * rng.standard_normal(x.shape)


def perturb_beta_db(beta_db: np.ndarray, theta: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Perturbed dB coefficients via the standardized-dB mixing.

    The matrix is standardized to zero mean / unit variance, mixed with unit
    noise at weight theta, then de-standardized. Keeps theta's meaning as a
    relative estimation-quality knob despite the wide dynamic range of beta.
    """
    beta_db = np.asarray(beta_db, dtype=float)
    mu = beta_db.mean()
    sd = beta_db.std()
    if sd == 0.0:
        sd = 1.0  # degenerate constant matrix: perturb in absolute dB
    z = perturb_values((beta_db - mu) / sd, theta, rng)
    return mu + sd * z


def perturb_beta(beta: LargeScaleFading, params: PerturbationParams,
                 rng: np.random.Generator) -> np.ndarray:
    """Perturbed (M, K) linear gain matrix as estimated at the CPU."""
    if params.domain == "db":
        return 10.0 ** (perturb_beta_db(beta.beta_db, params.theta, rng) / 10.0)
    out = perturb_values(beta.beta_lin, params.theta, rng)
    return np.maximum(out, LINEAR_BETA_FLOOR)


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed two's-complement b-bit word with q fractional bits.

    Integer part (sign included) has p = b - q bits, so the representable
    range is [-2^(p-1), 2^(p-1) - 2^-q] on a 2^-q grid. Rounding is
    round-to-nearest-even by default ("truncate" floors instead); overflow
    always saturates.
    """

    word_length: int
    fraction_bits: int
    rounding: str = "nearest_even"

    def __post_init__(self):
        if self.word_length < 2:
            raise ValueError("word_length must be >= 2")
        if not 0 <= self.fraction_bits < self.word_length:
            raise ValueError("need 0 <= fraction_bits < word_length")
        if self.rounding not in ("nearest_even", "truncate"):
            raise ValueError("rounding must be 'nearest_even' or 'truncate'")

    @property
    def integer_bits(self) -> int:
        return self.word_length - self.fraction_bits

    @property
    def step(self) -> float:
        return 2.0 ** (-self.fraction_bits)

    @property
    def min_value(self) -> float:
        return -(2.0 ** (self.integer_bits - 1))

    @property
    def max_value(self) -> float:
        return 2.0 ** (self.integer_bits - 1) - self.step

    @classmethod
    def from_string(cls, text: str) -> "FixedPointFormat":
        """Parse "b_q_bits" labels, e.g. "16_8_bits" -> b=16, q=8."""
        parts = text.strip().split("_")
        if parts and parts[-1] == "bits":
            parts = parts[:-1]
        if len(parts) != 2:
            raise ValueError(f"expected 'b_q_bits' format string, got {text!r}")
        try:
            b, q = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"non-integer fields in format string {text!r}") from None
        return cls(word_length=b, fraction_bits=q)

    def label(self) -> str:
        return f"{self.word_length}_{self.fraction_bits}_bits"


def quantize(x, fmt: FixedPointFormat):
    """Map values to the nearest representable code (saturating, idempotent).

    Scalars come back as floats, arrays as float arrays. NaN inputs are
    rejected; +-inf saturate.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)):
        raise ValueError("cannot quantize NaN")
    scaled = arr * 2.0**fmt.fraction_bits
    if fmt.rounding == "nearest_even":
        codes = np.rint(scaled)  # ties to even
    else:
        codes = np.floor(scaled)
    out = np.clip(codes * fmt.step, fmt.min_value, fmt.max_value)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


def quantize_beta(beta: LargeScaleFading, fmt: FixedPointFormat,
                  domain: str = "db") -> np.ndarray:
    """Quantized (M, K) linear gain matrix.

    Default quantizes the dB representation (the linear values span many
    decades, which a fixed grid cannot cover) and converts back to linear;
    domain="linear" quantizes the linear gains directly.
    """
    if domain == "db":
        return 10.0 ** (quantize(beta.beta_db, fmt) / 10.0)
    if domain == "linear":
        return quantize(beta.beta_lin, fmt)
    raise ValueError("domain must be 'db' or 'linear'")


def quantize_signal(y: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    """Quantize real and imaginary parts of a received tensor independently."""
    y = np.asarray(y)
    if not np.iscomplexobj(y):
        return quantize(y, fmt)
    out = quantize(y.real, fmt) + 1j * quantize(y.imag, fmt)
    return out.astype(y.dtype, copy=False)
