"""Synthetic top-down depth scenes with Cornell-style grasp annotations.

Each scene is a table seen from 0.6 m above with one to three rectangular
blocks on it.  Positive rectangles close across a block's narrow side at
three stations along it; negative rectangles try to close along its long
side.  The bundled set under ``deskarm/data/scenes`` was written by
:func:`write_bundled_scenes` and is regenerated bit-for-bit by the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import images
from .geometry import rotated_rect
from .grasp import (GraspRectangle, evaluate_rectangle_metric, heuristic_predict,
                    read_rectangle_file, select_best_grasp)

SHAPE = (120, 160)
TABLE_DEPTH = 0.6
N_BUNDLED = 20


@dataclass(frozen=True)
class Scene:
    depth: np.ndarray
    rectangles: list


def _inside(uu, vv, center, angle, length, height):
    du, dv = uu - center[0], vv - center[1]
    along = du * math.cos(angle) + dv * math.sin(angle)
    across = -du * math.sin(angle) + dv * math.cos(angle)
    return (np.abs(along) <= length / 2) & (np.abs(across) <= height / 2)


def synthetic_scene(seed: int, shape=SHAPE, noise: float = 5e-4) -> Scene:
    rng = np.random.default_rng(seed)
    h, w = shape
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    depth = np.full(shape, TABLE_DEPTH)
    occupied = np.zeros(shape, bool)
    rects = []
    n_blocks = int(rng.integers(1, 4))
    placed = tries = 0
    while placed < n_blocks and tries < 200:
        tries += 1
        length = rng.uniform(30, 60)
        narrow = rng.uniform(12, 24)
        angle = rng.uniform(-math.pi, math.pi)
        center = (rng.uniform(30, w - 30), rng.uniform(30, h - 30))
        mask = _inside(uu, vv, center, angle, length, narrow)
        halo = _inside(uu, vv, center, angle, length + 12, narrow + 12)
        if (halo & occupied).any():
            continue
        occupied |= halo
        depth[mask] = TABLE_DEPTH - rng.uniform(0.02, 0.05)
        placed += 1
        ax = np.array([math.cos(angle), math.sin(angle)])
        opening = narrow * 1.5
        for offset in (-length / 4, 0.0, length / 4):
            c = np.array(center) + offset * ax
            rects.append(GraspRectangle(rotated_rect(c, angle + math.pi / 2, opening, narrow * 0.6)))
        rects.append(GraspRectangle(rotated_rect(center, angle, length * 1.2, narrow * 0.6), False))
    depth = depth + rng.normal(0.0, noise, shape)
    return Scene(depth, rects)


def _format_rects(rects, positive):
    lines = []
    for r in rects:
        if r.positive == positive:
            lines.extend(f"{x:.3f} {y:.3f}" for x, y in r.vertices)
    return "\n".join(lines) + ("\n" if lines else "")


def write_scene(scene: Scene, directory, stem: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    images.write_pfm(d / f"{stem}.pfm", scene.depth)
    (d / f"{stem}_cpos.txt").write_text(_format_rects(scene.rectangles, True))
    (d / f"{stem}_cneg.txt").write_text(_format_rects(scene.rectangles, False))


def read_scene(directory, stem: str) -> Scene:
    d = Path(directory)
    pos, _ = read_rectangle_file((d / f"{stem}_cpos.txt").read_text(), True)
    neg, _ = read_rectangle_file((d / f"{stem}_cneg.txt").read_text(), False)
    return Scene(images.read_pfm(d / f"{stem}.pfm"), pos + neg)


def write_bundled_scenes(directory) -> None:
    for i in range(N_BUNDLED):
        write_scene(synthetic_scene(i), directory, f"scene_{i:02d}")


def bundled_scenes() -> list:
    root = resources.files("deskarm.data").joinpath("scenes")
    with resources.as_file(root) as path:
        return [read_scene(path, f"scene_{i:02d}") for i in range(N_BUNDLED)]


def heuristic_success(scenes) -> list:
    """Per-scene rectangle-metric outcome of the heuristic predictor."""
    out = []
    for s in scenes:
        g = select_best_grasp(heuristic_predict(s.depth))
        out.append(bool(evaluate_rectangle_metric(g, s.rectangles)))
    return out
