"""Static raster output: space-time heatmaps, vorticity snapshots, line-plot data.

Images are 8-bit RGB PNGs written by Pillow with no metadata, so identical
inputs give identical bytes. The colormap is matplotlib's ``RdBu_r``
sampled at 256 levels, with a symmetric range ``[-m, m]`` where ``m`` is the
largest finite magnitude in the reference field (so model and truth images
of one run share a scale). Non-finite pixels are drawn black.

1D heatmaps have one row per stored frame (time increases downward) and one
column per grid point. 2D snapshot strips place up to four evenly spaced
vorticity frames side by side with a 2-pixel black gap.
"""

from __future__ import annotations

import csv
import io
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .spectral_core import Grid, curl, SpectralState, fwd, inv

COLORMAP = "RdBu_r"
SNAPSHOTS = 4
GAP = 2


@lru_cache(maxsize=1)
def _lut() -> np.ndarray:
    from matplotlib import colormaps

    rgba = colormaps[COLORMAP](np.linspace(0.0, 1.0, 256))
    return np.round(rgba[:, :3] * 255).astype(np.uint8)


def symmetric_range(field: np.ndarray) -> float:
    finite = np.abs(field[np.isfinite(field)])
    m = float(finite.max()) if finite.size else 0.0
    return m if m > 0 else 1.0


def to_rgb(field: np.ndarray, scale: float) -> np.ndarray:
    """Map a 2D array to RGB pixels on ``[-scale, scale]``."""
    f = np.asarray(field, dtype=float)
    ok = np.isfinite(f)
    idx = np.clip(np.round((np.where(ok, f, 0.0) / scale + 1.0) * 127.5), 0, 255).astype(np.uint8)
    rgb = _lut()[idx]
    rgb[~ok] = 0
    return rgb


def png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb), "RGB").save(buf, format="PNG", compress_level=9)
    return buf.getvalue()


def write_png(path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(png_bytes(rgb))


def spacetime_heatmap(traj: np.ndarray, scale: float) -> np.ndarray:
    """``traj`` is ``[time, 1, x]`` (or ``[time, x]``); returns ``[time, x, 3]`` pixels."""
    t = np.asarray(traj, dtype=float)
    if t.ndim == 3:
        t = t[:, 0]
    if t.ndim != 2:
        raise ValueError(f"space-time heatmap needs [time, x] data, got shape {traj.shape}")
    return to_rgb(t, scale)


def vorticity_from_velocity(v: np.ndarray, grid: Grid) -> np.ndarray:
    """``v`` is ``[2, x, y]`` real velocity; returns ``[x, y]`` vorticity."""
    c = fwd(np.asarray(v, dtype=float), 2)
    return inv(curl(SpectralState(grid, c)).coeffs, 2)[0]


def snapshot_frames(n_frames: int, count: int = SNAPSHOTS) -> list:
    return sorted(set(np.linspace(0, n_frames - 1, min(count, n_frames)).round().astype(int).tolist()))


def snapshot_strip(fields: list, scale: float) -> np.ndarray:
    tiles = [to_rgb(f, scale) for f in fields]
    h = tiles[0].shape[0]
    gap = np.zeros((h, GAP, 3), dtype=np.uint8)
    parts = []
    for i, t in enumerate(tiles):
        if i:
            parts.append(gap)
        parts.append(t)
    return np.concatenate(parts, axis=1)


def correlation_lines(metrics_csv: str) -> str:
    """Median correlation per model and time from a metrics CSV, one column per model.

    Uses the ``median`` summary rows of the ``all`` seed group when present,
    otherwise those of the single seed group.
    """
    rows = list(csv.DictReader(io.StringIO(metrics_csv)))
    need = {"model", "seed", "sample", "t", "corr"}
    if not rows or not need <= set(rows[0]):
        raise ValueError("not a metrics CSV: expected columns model, seed, sample, t, corr")
    series: dict = {}
    groups: dict = {}
    for r in rows:
        if r["sample"] != "median":
            continue
        groups.setdefault(r["model"], set()).add(r["seed"])
    for r in rows:
        if r["sample"] != "median":
            continue
        wanted = "all" if "all" in groups[r["model"]] else sorted(groups[r["model"]])[0]
        if r["seed"] == wanted:
            series.setdefault(r["model"], {})[r["t"]] = r["corr"]
    models = list(series)
    times = list(series[models[0]]) if models else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + models)
    for t in times:
        w.writerow([t] + [series[m].get(t, "") for m in models])
    return buf.getvalue()


def plot_trajectories(trajectories: dict, truth: np.ndarray, grid: Grid, out_dir) -> list:
    """One image per model (plus ``truth``); 1D heatmaps or 2D vorticity strips.

    ``trajectories`` maps a model name to ``[frame, channel, *grid]`` observed
    fields (u in 1D, velocity in 2D); ``truth`` has the same layout.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = [("truth", truth)] + sorted(trajectories.items())
    written = []
    if grid.ndim == 1:
        scale = symmetric_range(truth)
        for name, traj in items:
            path = out / f"{name}.png"
            write_png(path, spacetime_heatmap(traj, scale))
            written.append(path)
        return written
    frames = snapshot_frames(truth.shape[0])
    truth_w = [vorticity_from_velocity(truth[f], grid) for f in frames]
    scale = symmetric_range(np.stack(truth_w))
    for name, traj in items:
        fields = []
        for f in frames:
            v = traj[f]
            fields.append(vorticity_from_velocity(v, grid) if np.all(np.isfinite(v))
                          else np.full(grid.shape, np.nan))
        path = out / f"{name}.png"
        write_png(path, snapshot_strip(fields, scale))
        written.append(path)
    return written
