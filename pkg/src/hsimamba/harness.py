"""Experiment drivers: route ablation, classification maps, scan timing."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .blocks import predict_classes
from .data import HsiCube, load_cube, patches_at, save_cube
from .routes import Route
from .ssm import init_s6, s6_selective_scan
from .train import ModelCheckpoint, TrainConfig, evaluate, prepare, train

log = logging.getLogger(__name__)


# ------------------------------------------------------------ route ablation

@dataclass
class AblationRow:
    route: Route
    oa: float
    aa: float
    kappa: float
    per_seed: list[tuple[int, float, float, float]] = field(default_factory=list)
    error: str | None = None


def route_ablation(base: TrainConfig, seeds: Sequence[int] = (0, 1, 2), cube: HsiCube | None = None,
                   routes: Sequence[Route] = tuple(Route)) -> list[AblationRow]:
    """Train one model per (route, seed) with everything else fixed; average per route.

    A failing row records its error and the remaining rows still run.
    """
    cube = cube if cube is not None else load_cube(base.dataset)
    prepared = {s: prepare(base.replace(seed=s), cube) for s in seeds}
    rows = []
    for route in routes:
        per_seed = []
        try:
            for s in seeds:
                cfg = base.replace(route=Route.parse(route).slug, seed=s)
                res = evaluate(train(cfg, prepared=prepared[s]), cube, prepared[s].split)
                per_seed.append((s, res.oa, res.aa, res.kappa))
                log.info("route %s seed %d: OA %.4f AA %.4f Kappa %.4f", route.slug, s, res.oa, res.aa, res.kappa)
        except Exception as e:  # noqa: BLE001 - reported per row
            log.warning("route %s failed: %s", Route.parse(route).slug, e)
            rows.append(AblationRow(Route.parse(route), np.nan, np.nan, np.nan, per_seed, f"{type(e).__name__}: {e}"))
            continue
        m = np.mean([r[1:] for r in per_seed], axis=0)
        rows.append(AblationRow(Route.parse(route), float(m[0]), float(m[1]), float(m[2]), per_seed))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["route", "oa", "aa", "kappa", "n_seeds", "error"])
    for r in rows:
        w.writerow([r.route.slug, f"{r.oa:.6f}", f"{r.aa:.6f}", f"{r.kappa:.6f}", len(r.per_seed), r.error or ""])
    return buf.getvalue()


def ablation_table(rows: list[AblationRow]) -> str:
    width = max(len(r.route.slug) for r in rows)
    lines = [f"{'route':<{width}}  {'OA':>7}  {'AA':>7}  {'Kappa':>7}"]
    for r in rows:
        if r.error:
            lines.append(f"{r.route.slug:<{width}}  failed: {r.error}")
        else:
            lines.append(f"{r.route.slug:<{width}}  {100 * r.oa:7.2f}  {100 * r.aa:7.2f}  {100 * r.kappa:7.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------- classification map

# fixed palette; index 0 (unlabeled) is black, classes cycle through the rest
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
], dtype=np.uint8)


def palette(n_classes: int) -> np.ndarray:
    if n_classes < len(PALETTE):
        return PALETTE[:n_classes + 1]
    idx = np.concatenate([[0], 1 + (np.arange(n_classes) % (len(PALETTE) - 1))])
    return PALETTE[idx]


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    H, W, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = raw[pos + 1:pos + 1 + 3 * W * H]
    return np.frombuffer(data, np.uint8).reshape(H, W, 3)


def labels_from_rgb(rgb: np.ndarray, n_classes: int) -> np.ndarray:
    """Invert the palette; for more classes than colours the result is ambiguous."""
    pal = palette(n_classes).astype(np.int32)
    diff = np.abs(rgb[..., None, :].astype(np.int32) - pal).sum(-1)
    return np.argmin(diff, axis=-1)


def predict_map(checkpoint: ModelCheckpoint, cube: HsiCube, out_ppm=None, predictor=None,
                chunk: int = 256) -> np.ndarray:
    """Classify every pixel through its patch; optionally write PPM + label grid.

    The label grid goes next to the PPM as ``<stem>.labels.hsic`` (one band
    holding the predicted ids, palette in the JSON trailer).
    """
    H, W, _ = cube.shape
    scores = checkpoint.reduce(cube.radiance)
    coords = np.argwhere(np.ones((H, W), dtype=bool))
    model = None if predictor is not None else checkpoint.to_model()
    pred = np.empty(H * W, dtype=np.int64)
    for i in range(0, len(coords), chunk):
        patches = patches_at(scores, coords[i:i + chunk], checkpoint.arch.patch_size)
        pred[i:i + chunk] = predictor(patches) if predictor is not None else predict_classes(patches, model)
    grid = pred.reshape(H, W)
    if out_ppm is not None:
        out_ppm = Path(out_ppm)
        pal = palette(checkpoint.n_classes)
        write_ppm(out_ppm, pal[grid])
        label_cube = HsiCube(grid[..., None].astype(np.float32), grid.astype(np.uint16),
                             list(checkpoint.class_names) or [f"class_{i}" for i in range(1, checkpoint.n_classes + 1)],
                             {"palette": pal.tolist(), "source": "predict_map"})
        save_cube(label_cube, out_ppm.with_name(out_ppm.stem + ".labels.hsic"))
    return grid


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchReport:
    rows: list[tuple[int, float]]     # (L, median seconds)
    exponent: float

    def text(self) -> str:
        lines = [f"{'L':>6}  {'median_s':>10}"] + [f"{L:>6}  {t:10.6f}" for L, t in self.rows]
        lines.append(f"growth exponent {self.exponent:.3f}")
        return "\n".join(lines)


def bench_scan(state: int = 16, dim: int = 32, lengths: Sequence[int] = (256, 512, 1024, 2048),
               repeats: int = 5, seed: int = 0) -> BenchReport:
    """Median wall time of s6_selective_scan per length and the log-log slope."""
    rng = np.random.default_rng(seed)
    params = init_s6(dim, state, rng)
    s6_selective_scan(rng.standard_normal((lengths[0], dim)), params)  # warm-up
    rows = []
    for L in lengths:
        x = rng.standard_normal((L, dim))
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            s6_selective_scan(x, params)
            times.append(time.perf_counter() - t0)
        rows.append((int(L), float(np.median(times))))
    Ls, ts = np.log([r[0] for r in rows]), np.log([r[1] for r in rows])
    return BenchReport(rows, float(np.polyfit(Ls, ts, 1)[0]))
