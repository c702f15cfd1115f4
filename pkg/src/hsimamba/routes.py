"""Spectral-spatial flattening of token cubes and route-wise bidirectional scanning.

A token cube is P x P x K (two spatial axes, then spectral). Spatial positions
are numbered row-major, p = row * P + col + 1, and index maps are 1-based
(p, k) pairs.

Internally the network keeps tokens channels-last as (n, P, P, K, M); the
public ``scan_and_merge`` takes a single M x P x P x K batch.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import S6Params, s6_forward


class Route(enum.IntEnum):
    SPECTRAL_PRIORITY = 1
    SPATIAL_PRIORITY = 2
    CROSS_SPECTRAL_SPATIAL = 3
    CROSS_SPATIAL_SPECTRAL = 4
    PARALLEL_SPECTRAL_SPATIAL = 5

    @classmethod
    def parse(cls, value) -> "Route":
        if isinstance(value, Route):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            try:
                return cls(int(value))
            except ValueError:
                raise ValueError(f"unknown route id {value!r}") from None
        if isinstance(value, str):
            key = value.strip().upper().replace("-", "_").replace(" ", "_")
            if key.isdigit():
                return cls.parse(int(key))
            if key in cls.__members__:
                return cls[key]
        raise ValueError(f"unknown route id {value!r}")

    @property
    def slug(self) -> str:
        return self.name.lower()


# (order, direction) per directed sequence, in merge order
BRANCHES: dict[Route, tuple[tuple[str, str], ...]] = {
    Route.SPECTRAL_PRIORITY: (("spe", "fwd"), ("spe", "rvs")),
    Route.SPATIAL_PRIORITY: (("spa", "fwd"), ("spa", "rvs")),
    Route.CROSS_SPECTRAL_SPATIAL: (("spe", "fwd"), ("spa", "rvs")),
    Route.CROSS_SPATIAL_SPECTRAL: (("spa", "fwd"), ("spe", "rvs")),
    Route.PARALLEL_SPECTRAL_SPATIAL: (("spa", "fwd"), ("spa", "rvs"), ("spe", "fwd"), ("spe", "rvs")),
}


def n_branches(route) -> int:
    return len(BRANCHES[Route.parse(route)])


@dataclass(frozen=True)
class FlatSequence:
    values: np.ndarray       # (L,) or (L, M)
    order: str               # "spe" or "spa"
    direction: str           # "fwd" or "rvs"
    index_map: np.ndarray    # (L, 2) int, 1-based (p, k)
    route: Route | None = None

    @property
    def label(self) -> str:
        return f"{self.order}-{self.direction}"

    def __len__(self) -> int:
        return len(self.values)


def spectral_index_map(P: int, K: int) -> np.ndarray:
    p = np.repeat(np.arange(1, P * P + 1), K)
    k = np.tile(np.arange(1, K + 1), P * P)
    return np.stack([p, k], axis=1)


def spatial_index_map(P: int, K: int) -> np.ndarray:
    p = np.tile(np.arange(1, P * P + 1), K)
    k = np.repeat(np.arange(1, K + 1), P * P)
    return np.stack([p, k], axis=1)


def _check_cube(cube) -> np.ndarray:
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim not in (3, 4) or cube.size == 0:
        raise ValueError(f"expected a non-empty P x P x K cube, got shape {cube.shape}")
    if cube.shape[0] != cube.shape[1]:
        raise ValueError(f"token cube must be spatially square, got shape {cube.shape}")
    return cube


def flatten_spectral_priority(cube) -> FlatSequence:
    """Positions row-major, bands fastest. A trailing channel axis is carried along."""
    cube = _check_cube(cube)
    P, K = cube.shape[0], cube.shape[2]
    values = cube.reshape((P * P * K,) + cube.shape[3:])
    return FlatSequence(values.copy(), "spe", "fwd", spectral_index_map(P, K))


def flatten_spatial_priority(cube) -> FlatSequence:
    """Bands in order, positions (row-major) fastest."""
    cube = _check_cube(cube)
    P, K = cube.shape[0], cube.shape[2]
    axes = (2, 0, 1) + tuple(range(3, cube.ndim))
    values = cube.transpose(axes).reshape((P * P * K,) + cube.shape[3:])
    return FlatSequence(values.copy(), "spa", "fwd", spatial_index_map(P, K))


def revert(seq: FlatSequence) -> FlatSequence:
    return FlatSequence(seq.values[::-1].copy(), seq.order,
                        "rvs" if seq.direction == "fwd" else "fwd",
                        seq.index_map[::-1].copy(), seq.route)


def unflatten(seq: FlatSequence, P: int, K: int) -> np.ndarray:
    """Place every value back at its (p, k) cell."""
    values = np.asarray(seq.values)
    out = np.zeros((P, P, K) + values.shape[1:])
    p = seq.index_map[:, 0] - 1
    out[p // P, p % P, seq.index_map[:, 1] - 1] = values
    return out


def build_route_sequences(batch, route) -> list[FlatSequence]:
    """Directed L x M sequences for an M x P x P x K token batch, in merge order."""
    route = Route.parse(route)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise ValueError(f"expected an M x P x P x K batch, got shape {batch.shape}")
    cube = batch.transpose(1, 2, 3, 0)   # P, P, K, M
    seqs = []
    for order, direction in BRANCHES[route]:
        s = flatten_spectral_priority(cube) if order == "spe" else flatten_spatial_priority(cube)
        if direction == "rvs":
            s = revert(s)
        seqs.append(FlatSequence(s.values, s.order, s.direction, s.index_map, route))
    return seqs


ScanFn = Callable[[Tensor, S6Params], Tensor]


def route_scan(F, route, s6_sets: Sequence[S6Params | None], scan: ScanFn | None = None) -> Tensor:
    """Differentiable flatten -> scan -> restore -> sum over the route's branches.

    F has shape (n, P, P, K, E); each directed sequence is an (n, P*P*K, E)
    tensor scanned by its own parameter set.
    """
    route = Route.parse(route)
    F = ad.as_tensor(F)
    if F.ndim != 5 or F.shape[1] != F.shape[2]:
        raise ValueError(f"route_scan: expected (n, P, P, K, E) tokens, got {F.shape}")
    branches = BRANCHES[route]
    if len(s6_sets) != len(branches):
        raise ValueError(f"{route.name} needs {len(branches)} S6 parameter sets, got {len(s6_sets)}")
    n, P, _, K, E = F.shape
    L = P * P * K
    if scan is None:
        scan = s6_forward
        for p in s6_sets:
            if p.feature_size != E:
                raise ValueError(f"S6 feature size {p.feature_size} != token channel count {E}")
    spe = ad.reshape(F, (n, L, E))
    spa = None
    merged = None
    for (order, direction), params in zip(branches, s6_sets):
        if order == "spa" and spa is None:
            spa = ad.reshape(ad.transpose(F, (0, 3, 1, 2, 4)), (n, L, E))
        seq = spe if order == "spe" else spa
        if direction == "rvs":
            seq = ad.flip(seq, 1)
        y = scan(seq, params)
        if direction == "rvs":
            y = ad.flip(y, 1)
        if order == "spe":
            y = ad.reshape(y, (n, P, P, K, E))
        else:
            y = ad.transpose(ad.reshape(y, (n, K, P, P, E)), (0, 2, 3, 1, 4))
        merged = y if merged is None else ad.add(merged, y)
    return merged


def scan_and_merge(batch, route, s6_sets: Sequence[S6Params | None],
                   scan: ScanFn | None = None) -> np.ndarray:
    """Scan an M x P x P x K batch along ``route``; returns the merged M x P x P x K batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise ValueError(f"expected an M x P x P x K batch, got shape {batch.shape}")
    F = Tensor(batch.transpose(1, 2, 3, 0)[None])
    out = route_scan(F, route, s6_sets, scan)
    return out.data[0].transpose(3, 0, 1, 2).copy()


def write_index_trace(path, P: int, K: int, route) -> list[Path]:
    """Dump each directed sequence's index map as CSV (seq_pos, p_row, p_col, k).

    Routes with several sequences write one file per sequence, named
    ``<stem>.<label>.csv``; all coordinates are 1-based.
    """
    route = Route.parse(route)
    path = Path(path)
    dummy = np.zeros((1, P, P, K))
    written = []
    for i, seq in enumerate(build_route_sequences(dummy, route)):
        target = path.with_name(f"{path.stem}.{i}-{seq.label}.csv")
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seq_pos", "p_row", "p_col", "k"])
            for pos, (p, k) in enumerate(seq.index_map, start=1):
                w.writerow([pos, (p - 1) // P + 1, (p - 1) % P + 1, k])
        written.append(target)
    return written
