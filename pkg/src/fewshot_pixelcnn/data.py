"""Dataset ingestion, preprocessing, and few-shot episode sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import archive_read, pgm_read

MANIFEST_NAME = "manifest.txt"


@dataclass
class Episode:
    """One few-shot task: support images plus a held-out target."""

    support: np.ndarray  # [S, H, W, C] float64, raw pixel levels
    target: np.ndarray  # [H, W, C]
    class_id: str = ""
    split: str = ""


@dataclass
class ConceptDataset:
    """alphabets -> characters -> image stacks, with a train/test alphabet split."""

    # alphabet -> character -> [n, H, W] float64 arrays
    images: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)  # alphabet -> "train" | "test"

    def alphabets(self, split: str) -> list:
        return sorted(a for a, s in self.split.items() if s == split)

    def characters(self, split: str) -> list:
        """(alphabet, character) pairs of a split, in deterministic order."""
        out = []
        for a in self.alphabets(split):
            out.extend((a, c) for c in sorted(self.images[a]))
        return out


def preprocess(img: np.ndarray, out_h: int, out_w: int, binarize: bool) -> np.ndarray:
    """Bilinear resample (half-pixel centers) and optional ink binarization.

    Input is a grayscale array with 255 = white paper; binarization maps
    darkness >= 0.5 to ink (1.0). Ties at exactly 0.5 go to ink.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"preprocess: expected 2-d grayscale, got {img.shape}")
    h, w = img.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError("preprocess: degenerate extents")
    if (h, w) != (out_h, out_w):
        img = _bilinear(img, out_h, out_w)
    if binarize:
        darkness = 1.0 - img / 255.0
        img = (darkness >= 0.5).astype(np.float64)
    return img


def _bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    r0, r1, rf = axis_weights(h, out_h)
    c0, c1, cf = axis_weights(w, out_w)
    top = img[r0][:, c0] * (1 - cf) + img[r0][:, c1] * cf
    bot = img[r1][:, c0] * (1 - cf) + img[r1][:, c1] * cf
    return top * (1 - rf[:, None]) + bot * rf[:, None]


def ingest(root_dir, out_h: int = 26, out_w: int = 26,
           binarize: bool = True) -> ConceptDataset:
    """Load a root/alphabet/character/image tree (PGM or FSTA files).

    The manifest at root/manifest.txt lists `split<TAB>alphabet` lines.
    Ordering is deterministic (lexicographic paths).
    """
    root = Path(root_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"ingest: missing manifest {manifest}")
    split = {}
    for ln, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[0] not in ("train", "test"):
            raise ValueError(f"ingest: bad manifest line {ln}: {line!r}")
        split[parts[1]] = parts[0]

    ds = ConceptDataset(split=split)
    for alphabet in sorted(split):
        adir = root / alphabet
        if not adir.is_dir():
            raise FileNotFoundError(f"ingest: alphabet directory missing: {adir}")
        chars = {}
        for cdir in sorted(p for p in adir.iterdir() if p.is_dir()):
            imgs = []
            for f in sorted(cdir.iterdir()):
                if f.suffix == ".pgm":
                    raw = pgm_read(f)
                elif f.suffix == ".fsta":
                    raw = archive_read(f)
                    if raw.ndim != 2:
                        raise ValueError(f"ingest: {f}: expected 2-d image")
                else:
                    continue
                imgs.append(preprocess(raw, out_h, out_w, binarize))
            if len(imgs) < 2:
                raise ValueError(
                    f"ingest: character {alphabet}/{cdir.name} has "
                    f"{len(imgs)} images (need at least 2)"
                )
            chars[cdir.name] = np.stack(imgs)
        if not chars:
            raise ValueError(f"ingest: alphabet {alphabet} has no characters")
        ds.images[alphabet] = chars
    if not ds.images:
        raise ValueError(f"ingest: no alphabets found under {root}")
    return ds


def sample_episode(ds: ConceptDataset, split: str, shots: int,
                   rng: np.random.Generator, slots: int = 0) -> Episode:
    """Draw a uniform character, `shots` distinct supports and one target.

    Characters short on images reuse supports cyclically; `slots` > shots
    likewise fills the support stack by cyclic duplication (so a model built
    for S supports can be evaluated at fewer shots).
    """
    if shots < 1:
        raise ValueError("sample_episode: shots must be >= 1")
    chars = ds.characters(split)
    if not chars:
        raise ValueError(f"sample_episode: split {split!r} is empty")
    alphabet, char = chars[int(rng.integers(len(chars)))]
    stack = ds.images[alphabet][char]
    n = stack.shape[0]
    order = rng.permutation(n)
    target = stack[order[0]]
    distinct = min(shots, n - 1)
    support_ids = [order[1 + i % distinct] for i in range(max(slots, shots))]
    support = stack[support_ids]
    return Episode(
        support=support[..., None],
        target=target[..., None],
        class_id=f"{alphabet}/{char}",
        split=split,
    )


def mirror_horizontal(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1, ...])


def flip_episode(img: np.ndarray) -> Episode:
    """Support = horizontally mirrored target; the one-shot flip diagnostic."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return Episode(
        support=mirror_horizontal(img)[None], target=img, class_id="flip"
    )
