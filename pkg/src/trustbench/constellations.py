"""Modulation schemes and their unit-power constellations.

Seven schemes with stable integer codes 0..6 (the label encoding used on
disk and by the classifiers).  Every constellation is normalized so the
mean symbol energy over equiprobable points is exactly 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidBitLength


class ModulationScheme(enum.IntEnum):
    BPSK = 0
    QPSK = 1
    PSK8 = 2
    QAM16 = 3
    QAM64 = 4
    APSK8 = 5
    OOK = 6

    @property
    def bits_per_symbol(self) -> int:
        return _BITS_PER_SYMBOL[self]


_BITS_PER_SYMBOL = {
    ModulationScheme.BPSK: 1,
    ModulationScheme.QPSK: 2,
    ModulationScheme.PSK8: 3,
    ModulationScheme.QAM16: 4,
    ModulationScheme.QAM64: 6,
    ModulationScheme.APSK8: 3,
    ModulationScheme.OOK: 1,
}

SCHEME_NAMES = [s.name for s in ModulationScheme]

# Ratio of outer to inner ring radius for the 4+4 APSK geometry; inner ring
# sits 45 degrees off the outer one.  Fixed constant, jointly normalized to
# unit mean energy below.
APSK8_RING_RATIO = 2.0


def _gray(i: int) -> int:
    return i ^ (i >> 1)


def _gray_levels(nbits: int) -> np.ndarray:
    """Amplitude levels -(2^n-1)..+(2^n-1) indexed by Gray-coded bits."""
    n = 1 << nbits
    levels = np.empty(n)
    for i in range(n):
        levels[_gray(i)] = 2 * i - (n - 1)
    return levels


@dataclass(frozen=True)
class Constellation:
    """Constellation points plus the bit pattern mapped to each point."""

    scheme: ModulationScheme
    points: np.ndarray = field(repr=False)  # complex128, len = 2**bps
    bit_labels: np.ndarray = field(repr=False)  # (n_points, bps) uint8

    @property
    def bits_per_symbol(self) -> int:
        return self.scheme.bits_per_symbol

    def point_for_bits(self, bits) -> complex:
        idx = 0
        for b in bits:
            idx = (idx << 1) | int(b)
        return complex(self.points[idx])


def _psk_points(order: int, offset: float) -> np.ndarray:
    angles = offset + 2.0 * np.pi * np.arange(order) / order
    return np.exp(1j * angles)


def _qam_points(bits_per_axis: int) -> np.ndarray:
    levels = _gray_levels(bits_per_axis)
    n_axis = levels.size
    pts = np.empty(n_axis * n_axis, dtype=complex)
    # first half of the bits selects I, second half Q
    for i_idx in range(n_axis):
        for q_idx in range(n_axis):
            pts[i_idx * n_axis + q_idx] = levels[i_idx] + 1j * levels[q_idx]
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def make_constellation(scheme: ModulationScheme) -> Constellation:
    scheme = ModulationScheme(scheme)
    bps = scheme.bits_per_symbol
    n = 1 << bps
    points = np.empty(n, dtype=complex)

    if scheme == ModulationScheme.BPSK:
        points[0] = 1.0  # bit 0 -> +1 (antipodal convention)
        points[1] = -1.0
    elif scheme == ModulationScheme.OOK:
        points[0] = 0.0
        points[1] = np.sqrt(2.0)  # E[|s|^2] over both levels = 1
    elif scheme == ModulationScheme.QPSK:
        ring = _psk_points(4, np.pi / 4)
        for k in range(4):
            points[_gray(k)] = ring[k]
    elif scheme == ModulationScheme.PSK8:
        ring = _psk_points(8, 0.0)
        for k in range(8):
            points[_gray(k)] = ring[k]
    elif scheme == ModulationScheme.QAM16:
        points = _qam_points(2)
    elif scheme == ModulationScheme.QAM64:
        points = _qam_points(3)
    elif scheme == ModulationScheme.APSK8:
        r1 = np.sqrt(2.0 / (1.0 + APSK8_RING_RATIO**2))
        r2 = APSK8_RING_RATIO * r1
        outer = r2 * _psk_points(4, 0.0)
        inner = r1 * _psk_points(4, np.pi / 4)
        # bit 0 selects the ring, bits 1-2 Gray-select the phase within it
        for k in range(4):
            points[0b000 | _gray(k)] = inner[k]
            points[0b100 | _gray(k)] = outer[k]
    else:  # pragma: no cover - enum is closed
        raise ValueError(scheme)

    labels = np.zeros((n, bps), dtype=np.uint8)
    for idx in range(n):
        for b in range(bps):
            labels[idx, b] = (idx >> (bps - 1 - b)) & 1
    return Constellation(scheme=scheme, points=points, bit_labels=labels)


_CACHE: dict[ModulationScheme, Constellation] = {}


def constellation(scheme: ModulationScheme) -> Constellation:
    scheme = ModulationScheme(scheme)
    if scheme not in _CACHE:
        _CACHE[scheme] = make_constellation(scheme)
    return _CACHE[scheme]


def modulate(bits, const: Constellation) -> np.ndarray:
    """Map a bit sequence onto constellation symbols.

    Raises InvalidBitLength when the sequence does not chunk evenly.
    """
    bits = np.asarray(bits, dtype=np.int64).ravel()
    bps = const.bits_per_symbol
    if bits.size % bps != 0:
        raise InvalidBitLength(
            f"{bits.size} bits not divisible by {bps} bits/symbol for "
            f"{const.scheme.name}"
        )
    idx = bits.reshape(-1, bps) @ (1 << np.arange(bps - 1, -1, -1, dtype=np.int64))
    return const.points[idx]


def nearest_points(symbols: np.ndarray, const: Constellation) -> np.ndarray:
    """Indices of the closest constellation points (hard decision)."""
    d = np.abs(symbols[..., None] - const.points[None, :])
    return np.argmin(d, axis=-1)


def bits_for_indices(indices: np.ndarray, const: Constellation) -> np.ndarray:
    return const.bit_labels[indices].reshape(-1)
