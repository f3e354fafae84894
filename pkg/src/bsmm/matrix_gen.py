"""Seeded generators for benchmark-shaped and uniform random block-sparse matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BlockCsr, BlockLayout
from .errors import ParameterError

NORM_FLOOR = 1e-100


@dataclass(frozen=True)
class BenchPreset:
    """Shape recipe for a square block-sparse benchmark matrix at full scale.

    ``size_mix`` gives the fraction of block rows using each entry of
    ``block_sizes``; the generated matrix has a stored diagonal band of
    half-width ``band`` and block norms ``exp(-decay * |i - j|)``.
    """

    name: str
    block_sizes: tuple
    block_rows: int
    occupancy: float
    chain: int
    band: int = 2
    decay: float = 0.5
    size_mix: tuple | None = None
    occupancy_range: tuple | None = None

    def __post_init__(self):
        if not 0 < self.occupancy <= 1:
            raise ParameterError("occupancy must be in (0, 1]")
        if self.chain < 1:
            raise ParameterError("chain length must be >= 1")
        if self.size_mix is not None and len(self.size_mix) != len(self.block_sizes):
            raise ParameterError("size_mix needs one weight per block size")

    def scaled_rows(self, scale: float) -> int:
        return int(round(self.block_rows * scale))


PRESETS = {
    "s-e": BenchPreset("s-e", (6,), 186_624, 5e-4, 618, band=2, decay=1.0,
                       occupancy_range=(4e-4, 6e-4)),
    "h2o-dft-ls": BenchPreset("h2o-dft-ls", (23,), 6_912, 0.10, 193, band=8, decay=0.35,
                              occupancy_range=(0.07, 0.15)),
    # 7848 blocks of 5 and 7844 of 13 give exactly 141,212 rows at full scale.
    "amorph": BenchPreset("amorph", (5, 13), 15_692, 0.55, 187, band=16, decay=0.1,
                          size_mix=(7848 / 15692, 7844 / 15692), occupancy_range=(0.34, 0.77)),
}


def get_preset(name: str) -> BenchPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _block_sizes(preset: BenchPreset, n: int, rng) -> np.ndarray:
    if len(preset.block_sizes) == 1:
        return np.full(n, preset.block_sizes[0], np.int64)
    mix = preset.size_mix or tuple(1 / len(preset.block_sizes) for _ in preset.block_sizes)
    counts = [int(round(n * f)) for f in mix[:-1]]
    counts.append(n - sum(counts))
    sizes = np.repeat(np.asarray(preset.block_sizes, np.int64), counts)
    return rng.permutation(sizes)


def _band_count(n, w):
    return n + 2 * sum(n - d for d in range(1, min(w, n - 1) + 1))


def band_width(preset: BenchPreset, n: int) -> int:
    """Stored band half-width for ``n`` block rows: the preset band, narrowed
    so the band alone never exceeds the target occupancy."""
    target = preset.occupancy * n * n
    w = 0
    while w < min(preset.band, n - 1) and _band_count(n, w + 1) <= target:
        w += 1
    return w


def _off_band_positions(n, w, p, rng):
    """Linear indices (sorted) of off-band positions kept with probability p."""
    if p <= 0:
        return np.zeros(0, np.int64)
    total = n * n
    if total <= 4_000_000:
        idx = np.arange(total, dtype=np.int64)
        off = np.abs(idx // n - idx % n) > w
        keep = rng.random(total) < p
        return idx[off & keep]
    n_off = total - _band_count(n, w)
    want = int(rng.binomial(n_off, p))
    got = np.zeros(0, np.int64)
    while len(got) < want:
        draw = rng.integers(0, total, size=int((want - len(got)) * 1.1) + 16)
        draw = draw[np.abs(draw // n - draw % n) > w]
        merged = np.concatenate([got, draw])
        _, first = np.unique(merged, return_index=True)
        got = merged[np.sort(first)]
    return np.sort(got[:want])


def _fill_values(rows, cols, rsz, csz, target_norm, rng):
    sizes = rsz[rows] * csz[cols]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    data = rng.standard_normal(int(offsets[-1]))
    if len(rows):
        norms = np.sqrt(np.add.reduceat(data * data, offsets[:-1]))
        data *= np.repeat(target_norm / norms, sizes)
    return data, offsets


def generate(preset: BenchPreset, scale: float, seed: int) -> BlockCsr:
    """Square banded block-sparse matrix following ``preset`` at ``scale``."""
    if not (0 < scale <= 1):
        raise ParameterError(f"scale must be in (0, 1], got {scale}")
    n = preset.scaled_rows(scale)
    if n < 4:
        raise ParameterError(f"scale {scale} gives {n} block rows for {preset.name}; at least 4 required")
    rng = np.random.default_rng(seed)
    sizes = _block_sizes(preset, n, rng)
    layout = BlockLayout.square(sizes.tolist())

    target = preset.occupancy * n * n
    w = band_width(preset, n)
    band = _band_count(n, w)
    p_off = 1.0 if preset.occupancy >= 1 else min(1.0, max(0.0, (target - band) / (n * n - band)))

    d = np.arange(-w, w + 1)
    bi = np.repeat(np.arange(n, dtype=np.int64), len(d))
    bj = bi + np.tile(d, n)
    ok = (bj >= 0) & (bj < n)
    band_lin = bi[ok] * n + bj[ok]
    lin = np.union1d(band_lin, _off_band_positions(n, w, p_off, rng))
    rows, cols = lin // n, lin % n

    dist = np.abs(rows - cols).astype(np.float64)
    target_norm = np.maximum(np.exp(-preset.decay * dist), NORM_FLOOR)
    data, offsets = _fill_values(rows, cols, sizes, sizes, target_norm, rng)
    row_ptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))])
    return BlockCsr._make(layout, row_ptr, cols, data, offsets)


def occupancy(m: BlockCsr) -> float:
    cells = m.layout.n_row_blocks * m.layout.n_col_blocks
    return m.n_blocks / cells if cells else 0.0


def random_uniform(block_rows: int, block_cols: int, size_choices, occupancy: float, seed: int,
                   row_sizes=None, col_sizes=None) -> BlockCsr:
    """Each block position stored independently with probability ``occupancy``.

    Block sizes are drawn from ``size_choices`` unless given explicitly;
    values are uniform in [-1, 1].
    """
    if not 0 < occupancy <= 1:
        raise ParameterError("occupancy must be in (0, 1]")
    rng = np.random.default_rng(seed)
    choices = np.asarray(list(size_choices), np.int64)
    rsz = np.asarray(row_sizes, np.int64) if row_sizes is not None else rng.choice(choices, block_rows)
    csz = np.asarray(col_sizes, np.int64) if col_sizes is not None else rng.choice(choices, block_cols)
    layout = BlockLayout(tuple(rsz.tolist()), tuple(csz.tolist()))
    mask = rng.random((len(rsz), len(csz))) < occupancy
    rows, cols = np.nonzero(mask)
    sizes = rsz[rows] * csz[cols]
    data = rng.uniform(-1.0, 1.0, int(sizes.sum()))
    row_ptr = np.concatenate([[0], np.cumsum(mask.sum(axis=1))])
    return BlockCsr._make(layout, row_ptr, cols, data)


def norm_by_distance(m: BlockCsr) -> dict:
    """Mean stored-block norm keyed by block distance |i - j|."""
    dist = np.abs(m.block_rows() - m.col_idx)
    out = {}
    for d in np.unique(dist):
        out[int(d)] = float(m.norms[dist == d].mean())
    return out


__all__ = ["BenchPreset", "PRESETS", "get_preset", "generate", "occupancy", "random_uniform",
           "norm_by_distance", "band_width"]
