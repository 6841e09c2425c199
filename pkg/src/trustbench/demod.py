"""Matched-filter demodulation oracle for the synthesis chain.

The cropped pulse train is linear in the symbols: frame = c * G s with a
known tap matrix G and an unknown per-frame power-normalization scalar c.
Matched filtering gives z = G^T frame = c * (G^T G) s, so solving the Gram
system and fitting the scalar by decision feedback recovers the symbols
exactly in the noiseless case, frame edges included.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .constellations import Constellation, bits_for_indices, nearest_points
from .siggen import FRAME_LEN


class FrameEqualizer:
    """Precomputed matched filter + Gram solve for one (taps, sps) geometry."""

    def __init__(self, taps: np.ndarray, sps: int, frame_len: int = FRAME_LEN):
        n_sym = frame_len // sps
        center = (taps.size - 1) // 2
        g = np.zeros((frame_len, n_sym))
        for j in range(n_sym):
            # frame[m] collects h[m + center - j*sps]
            lo = j * sps - center
            for m in range(max(lo, 0), min(lo + taps.size, frame_len)):
                g[m, j] = taps[m - lo]
        self.taps = taps
        self.sps = sps
        self.frame_len = frame_len
        self.n_sym = n_sym
        self._g = g
        self._gram = g.T @ g
        self._chol = cho_factor(self._gram)

    def matched_filter(self, frame: np.ndarray) -> np.ndarray:
        """Symbol-rate matched-filter outputs z_k (no ISI correction)."""
        return self._g.T @ np.asarray(frame, dtype=complex)

    def equalize(self, frame: np.ndarray) -> np.ndarray:
        """Zero-forcing symbol estimates, still scaled by the frame gain."""
        z = self.matched_filter(frame)
        return cho_solve(self._chol, z)


def as_complex(frame: np.ndarray) -> np.ndarray:
    """(1024, 2) I/Q columns -> complex vector; complex input passes through."""
    frame = np.asarray(frame)
    if frame.ndim == 2 and frame.shape[-1] == 2:
        return frame[:, 0].astype(float) + 1j * frame[:, 1].astype(float)
    return frame.astype(complex)


def demodulate(
    frame: np.ndarray,
    const: Constellation,
    equalizer: FrameEqualizer,
    gain_iters: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Hard symbol decisions and bits for one frame.

    The frame gain is unknown (unit-power normalization at the transmitter),
    so it is estimated blindly from symbol power and refined by decision
    feedback.
    """
    s_scaled = equalizer.equalize(as_complex(frame))
    power = np.mean(np.abs(s_scaled) ** 2)
    gain = np.sqrt(power) if power > 0 else 1.0
    idx = nearest_points(s_scaled / gain, const)
    for _ in range(gain_iters):
        ref = const.points[idx]
        denom = np.sum(np.abs(ref) ** 2)
        if denom == 0.0:
            break
        g = np.vdot(ref, s_scaled) / denom
        if abs(g) == 0.0:
            break
        idx = nearest_points(s_scaled / g, const)
    return idx, bits_for_indices(idx, const)


def symbol_errors(decided_idx, symbols, const: Constellation) -> int:
    """Count decisions differing from the reference symbol sequence."""
    ref_idx = nearest_points(np.asarray(symbols, dtype=complex), const)
    return int(np.sum(decided_idx != ref_idx))
