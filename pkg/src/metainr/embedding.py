"""Delay embedding of a scalar series and its overlap-averaging inverse.

A length-T vector is lifted into a Hankel-structured grid with
``R = T - (m - 1) * delta`` rows and ``m`` columns, where cell ``(i, j)``
holds entry ``i + j * delta`` of the source. The inverse maps a grid back to
the time axis by averaging every cell that covers a time index, which equals
the least-squares pseudo-inverse of the 0/1 duplication matrix that selects
source entries into cells.

Grid-axis coordinates handed to the coordinate network are the positional
fractions ``i / R`` and ``j / m``, both inside [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

__all__ = [
    "DelayConfig",
    "EmbeddedGrid",
    "delay_embed",
    "inverse_embed",
    "overlap_counts",
    "default_embed_dim",
]

_PREFERRED_EMBED_DIMS = (72, 36, 24)


@dataclass(frozen=True)
class DelayConfig:
    """Embedding dimension ``m`` (columns) and delay lag ``delta``."""

    m: int
    delta: int = 1

    def __post_init__(self):
        if self.m < 1:
            raise ContractError(f"embedding dimension must be >= 1, got {self.m}")
        if self.delta < 1:
            raise ContractError(f"delay lag must be >= 1, got {self.delta}")

    def rows(self, n_time: int) -> int:
        # T >= m * delta guarantees every time index is covered by at least
        # one cell (the grid spans R >= delta consecutive rows), which the
        # averaging inverse requires; for delta == 1 this is the usual
        # T > (m - 1) condition.
        if n_time < self.m * self.delta:
            raise ContractError(
                f"series of length {n_time} is too short for m={self.m}, "
                f"delta={self.delta} (need at least {self.m * self.delta})"
            )
        return n_time - (self.m - 1) * self.delta


@dataclass(frozen=True)
class EmbeddedGrid:
    """Delay-embedded view of one series: values, mask, and axis coordinates."""

    config: DelayConfig
    n_time: int
    time_index: np.ndarray  # (R, m) int64, entry (i, j) = i + j * delta
    coord_row: np.ndarray  # (R,) in [0, 1)
    coord_col: np.ndarray  # (m,) in [0, 1)
    cell_values: np.ndarray  # (R, m)
    cell_mask: np.ndarray  # (R, m) in {0, 1}

    @property
    def rows(self) -> int:
        return self.time_index.shape[0]

    @property
    def cols(self) -> int:
        return self.time_index.shape[1]


def _index_map(config: DelayConfig, n_time: int) -> np.ndarray:
    rows = config.rows(n_time)
    i = np.arange(rows, dtype=np.int64)[:, None]
    j = np.arange(config.m, dtype=np.int64)[None, :]
    return i + j * config.delta


def delay_embed(values, config: DelayConfig, mask=None) -> EmbeddedGrid:
    """Embed a length-T vector (values, coordinates, ...) into the delay grid.

    ``mask``, when given, is embedded through the same index map; it defaults
    to all-observed.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ContractError(f"delay_embed needs a 1-D vector, got shape {values.shape}")
    n_time = values.shape[0]
    idx = _index_map(config, n_time)
    rows = idx.shape[0]
    if mask is None:
        cell_mask = np.ones_like(idx, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != values.shape:
            raise ContractError("mask and values must have equal length")
        cell_mask = mask[idx]
    return EmbeddedGrid(
        config=config,
        n_time=n_time,
        time_index=idx,
        coord_row=np.arange(rows, dtype=np.float64) / rows,
        coord_col=np.arange(config.m, dtype=np.float64) / config.m,
        cell_values=values[idx],
        cell_mask=np.ascontiguousarray(cell_mask),
    )


def overlap_counts(config: DelayConfig, n_time: int) -> np.ndarray:
    """Number of grid cells covering each time index; all entries >= 1."""
    idx = _index_map(config, n_time)
    return np.bincount(idx.reshape(-1), minlength=n_time)


def inverse_embed(grid_values, config: DelayConfig, n_time: int) -> np.ndarray:
    """Average overlapping cell predictions back onto the time axis.

    Equals ``pinv(D) @ vec(grid)`` for the duplication matrix ``D`` that maps
    a length-T series to the vectorized grid.
    """
    grid_values = np.asarray(grid_values, dtype=np.float64)
    idx = _index_map(config, n_time)
    if grid_values.shape != idx.shape:
        raise ContractError(
            f"grid of shape {grid_values.shape} does not match "
            f"(R, m) = {idx.shape} for T={n_time}"
        )
    sums = np.bincount(idx.reshape(-1), weights=grid_values.reshape(-1), minlength=n_time)
    return sums / overlap_counts(config, n_time)


def default_embed_dim(n_time: int) -> int:
    """Desk-scale default for ``m``: the largest of {24, 36, 72} that leaves a
    grid at least eight times taller than wide, shrinking proportionally for
    short series."""
    for m in _PREFERRED_EMBED_DIMS:
        if n_time >= 8 * m:
            return m
    return max(2, n_time // 8)
