"""Baseband frame synthesis: bits -> symbols -> RRC pulse train -> AWGN.

Frames are 1024 complex samples at a fixed oversampling factor, normalized
to unit mean power before noise is added, so the per-frame SNR is the plain
in-band signal-to-noise power ratio.  Every frame is a pure function of
(master_seed, scheme, snr index, frame index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .constellations import ModulationScheme, constellation, modulate
from .errors import InvalidRolloff, SymbolCountMismatch, ValidationError
from .rng import substream

FRAME_LEN = 1024
DEFAULT_SNR_GRID = tuple(float(v) for v in range(-20, 31, 2))  # 26 levels
DEFAULT_SPS = 8
DEFAULT_ROLLOFF = 0.35
DEFAULT_SPAN = 10
# Physical-link metadata recorded in file headers; never enters computation.
NYQUIST_BANDWIDTH_HZ = 880e6


def rrc_taps(rolloff: float, span_symbols: int, sps: int) -> np.ndarray:
    """Root-raised-cosine impulse response, unit energy, odd length.

    Length is span_symbols*sps + 1; the two removable singularities are
    evaluated by their limits.
    """
    if not 0.0 < rolloff <= 1.0:
        raise InvalidRolloff(f"rolloff {rolloff} outside (0, 1]")
    if sps < 2:
        raise ValidationError(f"sps must be >= 2, got {sps}")
    if span_symbols < 1:
        raise ValidationError(f"span_symbols must be >= 1, got {span_symbols}")

    n = span_symbols * sps
    t = (np.arange(n + 1) - n / 2) / sps  # in symbol times
    beta = rolloff
    taps = np.empty(t.size)

    at_zero = np.isclose(t, 0.0)
    sing = np.isclose(np.abs(t), 1.0 / (4.0 * beta))
    regular = ~(at_zero | sing)

    tr = t[regular]
    num = np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(
        np.pi * tr * (1 + beta)
    )
    den = np.pi * tr * (1 - (4 * beta * tr) ** 2)
    taps[regular] = num / den
    taps[at_zero] = 1.0 + beta * (4.0 / np.pi - 1.0)
    taps[sing] = (beta / np.sqrt(2.0)) * (
        (1 + 2.0 / np.pi) * np.sin(np.pi / (4 * beta))
        + (1 - 2.0 / np.pi) * np.cos(np.pi / (4 * beta))
    )
    return taps / np.sqrt(np.sum(taps**2))


def upsample(symbols: np.ndarray, sps: int, length: int) -> np.ndarray:
    out = np.zeros(length, dtype=complex)
    out[:: sps] = symbols
    return out


def shape_and_frame(
    symbols: np.ndarray, taps: np.ndarray, sps: int, frame_len: int = FRAME_LEN
) -> np.ndarray:
    """Pulse-shape one symbol block into a unit-power frame.

    Upsamples by sps, convolves with the taps, center-crops to frame_len,
    and rescales to unit mean power (all-zero input stays all-zero).
    """
    symbols = np.asarray(symbols, dtype=complex).ravel()
    if frame_len % sps != 0:
        raise ValidationError(f"frame length {frame_len} not divisible by sps {sps}")
    n_sym = frame_len // sps
    if symbols.size != n_sym:
        raise SymbolCountMismatch(
            f"expected {n_sym} symbols for a {frame_len}-sample frame at "
            f"sps {sps}, got {symbols.size}"
        )
    return _shape_batch(symbols[None, :], taps, sps)[0]


def _shape_batch(symbol_block: np.ndarray, taps: np.ndarray, sps: int) -> np.ndarray:
    """Vectorized shape_and_frame over a (frames, n_sym) symbol matrix."""
    n_frames, n_sym = symbol_block.shape
    frame_len = n_sym * sps
    x = np.zeros((n_frames, frame_len), dtype=complex)
    x[:, ::sps] = symbol_block
    full = fftconvolve(x, taps[None, :], axes=1)
    start = (taps.size - 1) // 2
    frames = full[:, start : start + frame_len]
    power = np.mean(np.abs(frames) ** 2, axis=1, keepdims=True)
    scale = np.ones_like(power)
    nz = power[:, 0] > 0.0
    scale[nz] = 1.0 / np.sqrt(power[nz])
    return frames * scale


def apply_awgn(
    frame: np.ndarray, snr_db: float, rng_stream: np.random.Generator
) -> np.ndarray:
    """Add circularly symmetric complex Gaussian noise at the target SNR.

    Assumes the frame has unit mean power; total noise variance is
    1/10^(snr_db/10), split evenly between I and Q.  An infinite snr_db is
    the no-noise sentinel.
    """
    frame = np.asarray(frame, dtype=complex)
    if np.isinf(snr_db) and snr_db > 0:
        return frame.copy()
    sigma2 = 10.0 ** (-snr_db / 10.0)
    s = np.sqrt(sigma2 / 2.0)
    noise_i = rng_stream.standard_normal(frame.shape)
    noise_q = rng_stream.standard_normal(frame.shape)
    return frame + s * (noise_i + 1j * noise_q)


@dataclass(frozen=True)
class DatasetSpec:
    """Full recipe for a synthetic dataset; the file is a function of it."""

    snr_grid_db: tuple = DEFAULT_SNR_GRID
    frames_per_cell: int = 4096
    sps: int = DEFAULT_SPS
    rrc_rolloff: float = DEFAULT_ROLLOFF
    rrc_span_symbols: int = DEFAULT_SPAN
    master_seed: int = 0

    def __post_init__(self):
        grid = tuple(float(v) for v in self.snr_grid_db)
        object.__setattr__(self, "snr_grid_db", grid)
        if len(grid) == 0:
            raise ValidationError("snr_grid_db is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValidationError("snr_grid_db must be strictly increasing")
        if self.frames_per_cell < 1:
            raise ValidationError("frames_per_cell must be positive")
        if FRAME_LEN % self.sps != 0:
            raise ValidationError(
                f"frame length {FRAME_LEN} not divisible by sps {self.sps}"
            )
        if not 0.0 < self.rrc_rolloff <= 1.0:
            raise InvalidRolloff(f"rolloff {self.rrc_rolloff} outside (0, 1]")

    @property
    def n_levels(self) -> int:
        return len(self.snr_grid_db)

    @property
    def frame_count(self) -> int:
        return len(ModulationScheme) * self.n_levels * self.frames_per_cell

    @property
    def symbols_per_frame(self) -> int:
        return FRAME_LEN // self.sps

    def taps(self) -> np.ndarray:
        return rrc_taps(self.rrc_rolloff, self.rrc_span_symbols, self.sps)

    def to_json_dict(self) -> dict:
        return {
            "snr_grid_db": list(self.snr_grid_db),
            "frames_per_cell": self.frames_per_cell,
            "sps": self.sps,
            "rrc_rolloff": self.rrc_rolloff,
            "rrc_span_symbols": self.rrc_span_symbols,
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            snr_grid_db=tuple(d["snr_grid_db"]),
            frames_per_cell=int(d["frames_per_cell"]),
            sps=int(d["sps"]),
            rrc_rolloff=float(d["rrc_rolloff"]),
            rrc_span_symbols=int(d["rrc_span_symbols"]),
            master_seed=int(d["master_seed"]),
        )


def frame_bits(spec: DatasetSpec, scheme: ModulationScheme, snr_idx: int, k: int):
    """The exact bit draw for frame (scheme, snr_idx, k) under the spec."""
    const = constellation(scheme)
    n_bits = spec.symbols_per_frame * const.bits_per_symbol
    rng = substream(spec.master_seed, "bits", int(scheme), snr_idx, k)
    return rng.integers(0, 2, size=n_bits)


def synthesize_frame(
    spec: DatasetSpec, scheme: ModulationScheme, snr_idx: int, k: int
) -> np.ndarray:
    """One frame as (1024, 2) float32; pure in (master_seed, scheme, snr, k)."""
    const = constellation(scheme)
    taps = spec.taps()
    bits = frame_bits(spec, scheme, snr_idx, k)
    symbols = modulate(bits, const)
    clean = shape_and_frame(symbols, taps, spec.sps)
    noisy = apply_awgn(
        clean,
        spec.snr_grid_db[snr_idx],
        substream(spec.master_seed, "noise", int(scheme), snr_idx, k),
    )
    out = np.empty((FRAME_LEN, 2), dtype=np.float32)
    out[:, 0] = noisy.real
    out[:, 1] = noisy.imag
    return out


def synthesize_cell(
    spec: DatasetSpec, scheme: ModulationScheme, snr_idx: int
) -> np.ndarray:
    """All frames of one (scheme, snr) cell as (frames, 1024, 2) float32.

    Batches the convolution across the cell; bit and noise draws still come
    from each frame's own stream, so output matches synthesize_frame bit for
    bit.
    """
    const = constellation(scheme)
    taps = spec.taps()
    n_sym = spec.symbols_per_frame
    fpc = spec.frames_per_cell
    snr_db = spec.snr_grid_db[snr_idx]

    symbol_block = np.empty((fpc, n_sym), dtype=complex)
    for k in range(fpc):
        symbol_block[k] = modulate(frame_bits(spec, scheme, snr_idx, k), const)
    frames = _shape_batch(symbol_block, taps, spec.sps)

    sigma2 = 10.0 ** (-snr_db / 10.0)
    s = np.sqrt(sigma2 / 2.0)
    for k in range(fpc):
        rng = substream(spec.master_seed, "noise", int(scheme), snr_idx, k)
        frames[k] += s * (
            rng.standard_normal(FRAME_LEN) + 1j * rng.standard_normal(FRAME_LEN)
        )

    out = np.empty((fpc, FRAME_LEN, 2), dtype=np.float32)
    out[:, :, 0] = frames.real
    out[:, :, 1] = frames.imag
    return out
