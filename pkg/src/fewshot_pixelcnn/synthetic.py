"""Procedural desk-scale corpora: glyph alphabets and textured flip images.

These stand in for the full-size datasets so every experiment is runnable
from a clean checkout; generation is deterministic per seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import MANIFEST_NAME
from .io import pgm_write


def _draw_stroke(canvas: np.ndarray, pts: np.ndarray, thick: int) -> None:
    h, w = canvas.shape
    for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
        n = int(max(abs(r1 - r0), abs(c1 - c0), 1)) * 2
        rr = np.rint(np.linspace(r0, r1, n)).astype(int)
        cc = np.rint(np.linspace(c0, c1, n)).astype(int)
        for dr in range(thick):
            for dc in range(thick):
                r = np.clip(rr + dr, 0, h - 1)
                c = np.clip(cc + dc, 0, w - 1)
                canvas[r, c] = 1.0


def _render_glyph(strokes, jitter_rng, size: int) -> np.ndarray:
    canvas = np.zeros((size, size))
    shift = jitter_rng.integers(-1, 2, size=2)
    for pts, thick in strokes:
        jit = pts + jitter_rng.integers(-1, 2, size=pts.shape)
        _draw_stroke(canvas, jit + shift, thick)
    return canvas


def make_concept_corpus(root, n_alphabets: int = 12, test_alphabets: int = 2,
                        chars_per_alphabet: int = 8, images_per_char: int = 8,
                        size: int = 26, seed: int = 0) -> Path:
    """Write a root/alphabet/character/*.pgm tree of jittered stroke glyphs."""
    if test_alphabets >= n_alphabets:
        raise ValueError("make_concept_corpus: need more alphabets than test split")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for a in range(n_alphabets):
        name = f"alphabet{a:03d}"
        split = "test" if a >= n_alphabets - test_alphabets else "train"
        lines.append(f"{split}\t{name}")
        for c in range(chars_per_alphabet):
            cdir = root / name / f"char{c:02d}"
            cdir.mkdir(parents=True, exist_ok=True)
            strokes = []
            for _ in range(int(rng.integers(2, 5))):
                n_pts = int(rng.integers(2, 5))
                pts = rng.integers(2, size - 2, size=(n_pts, 2))
                strokes.append((pts, int(rng.integers(1, 3))))
            for i in range(images_per_char):
                glyph = _render_glyph(strokes, rng, size)
                # ink-is-dark PGM: strokes 0, paper 255
                pgm_write((1.0 - glyph) * 255.0, cdir / f"img{i:02d}.pgm")
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return root


def _blur(img: np.ndarray, passes: int = 2) -> np.ndarray:
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    for _ in range(passes):
        img = np.apply_along_axis(
            lambda r: np.convolve(r, kernel, mode="same"), 0, img)
        img = np.apply_along_axis(
            lambda r: np.convolve(r, kernel, mode="same"), 1, img)
    return img


def make_flip_corpus(root, n_images: int = 96, size: int = 24,
                     seed: int = 0) -> Path:
    """Write asymmetric grayscale texture images for the flip diagnostic.

    Smoothed noise fields are locally distinctive everywhere, so the mirror
    of an image pins its pixels down far better than left/above context can.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_images):
        field = _blur(rng.normal(size=(size + 8, size + 8)))[4:-4, 4:-4]
        field = (field - field.mean()) / max(field.std(), 1e-9)
        img = 128.0 + 52.0 * field
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.15, 0.85, size=2) * size
            ry, rx = rng.uniform(2, 6, size=2)
            blob = ((np.arange(size)[:, None] - cy) / ry) ** 2 + \
                ((np.arange(size)[None, :] - cx) / rx) ** 2 <= 1.0
            img = np.where(blob, rng.uniform(10, 245), img)
        img = np.clip(img + rng.normal(scale=1.0, size=img.shape), 0, 255)
        pgm_write(img, root / f"tex{i:04d}.pgm")
    return root


def load_flip_corpus(root) -> list:
    """Read every PGM under root, sorted by name, as float64 arrays."""
    from .io import pgm_read

    root = Path(root)
    files = sorted(root.glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"load_flip_corpus: no PGM images under {root}")
    return [pgm_read(f).astype(np.float64) for f in files]
