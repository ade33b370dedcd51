"""Command-line surface: train / eval / sample / dump-attention / make-data.

Exit codes: 0 ok, 2 usage error, 3 training diverged (NaN loss), 4 I/O or
checkpoint corruption.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import VARIANTS, flip_config, omniglot_config
from .data import ingest, preprocess, sample_episode
from .harness import (
    CheckpointError,
    FlipTask,
    OmniglotTask,
    TrainingDiverged,
    load_checkpoint,
    make_flip_task,
)
from .io import ArchiveError, PgmError, pgm_write
from .meta import MetaConfig
from .model import sample
from .synthetic import load_flip_corpus, make_concept_corpus, make_flip_corpus

EVAL_SHOT_COUNTS = (1, 2, 4, 8)


def _build_task(task_name: str, data_dir, cfg):
    if task_name == "omniglot":
        ds = ingest(data_dir, cfg.height, cfg.width, binarize=True)
        return OmniglotTask(ds, shots=cfg.support_size, slots=cfg.support_size)
    images = [np.rint(preprocess(im, cfg.height, cfg.width, binarize=False))
              for im in load_flip_corpus(data_dir)]
    return make_flip_task(images)


def cmd_train(args) -> int:
    if args.task == "flip" and args.shots not in (None, 1):
        print("train: --task flip requires --shots 1", file=sys.stderr)
        return 2
    meta_variant = args.variant in ("meta", "attention_meta")
    if not meta_variant and (args.inner_lr is not None or
                             args.second_order is not None):
        print("train: --inner-lr/--second-order only apply to meta variants",
              file=sys.stderr)
        return 2
    shots = args.shots if args.shots is not None else (4 if args.task == "omniglot" else 1)
    cfg = (omniglot_config(shots, args.variant) if args.task == "omniglot"
           else flip_config(shots, args.variant))
    meta_cfg = MetaConfig(
        inner_lr=args.inner_lr if args.inner_lr is not None else 0.1,
        outer_lr=args.lr,
        second_order=(args.second_order or "on") == "on",
    )
    try:
        task = _build_task(args.task, args.data, cfg)
    except (OSError, ValueError) as exc:
        print(f"train: {exc}", file=sys.stderr)
        return 4
    try:
        harness.train(task, cfg, meta_cfg, steps=args.steps, batch=args.batch,
                      lr=args.lr, seed=args.seed, out_dir=args.out,
                      eval_episodes=args.eval_episodes,
                      eval_every=args.eval_every,
                      checkpoint_every=args.checkpoint_every,
                      task_name=args.task)
    except TrainingDiverged as exc:
        print(f"train: aborted: {exc}", file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    try:
        params, cfg, _opt, meta_cfg, info = load_checkpoint(args.checkpoint)
        task = _build_task(info["task"], args.data, cfg)
    except (CheckpointError, ArchiveError, PgmError, OSError, ValueError) as exc:
        print(f"eval: {exc}", file=sys.stderr)
        return 4
    n = args.eval_episodes
    shot_counts = [k for k in EVAL_SHOT_COUNTS if k <= cfg.support_size]
    if isinstance(task, FlipTask):
        shot_counts = [1]
    print(f"variant={info['variant']} task={info['task']} step={info['step']} "
          f"episodes={n}")
    print("shots  NLL test(train) nats/dim")
    for k in shot_counts:
        test = harness.eval_nll(task, "test", params, cfg, n, meta_cfg, shots=k)
        trn = harness.eval_nll(task, "train", params, cfg, n, meta_cfg, shots=k)
        print(f"{k:5d}  {test:.4f}({trn:.4f})")
    if cfg.meta and meta_cfg.inner_lr != 0.0:
        test = harness.eval_nll(task, "test", params, cfg, n, None)
        trn = harness.eval_nll(task, "train", params, cfg, n, None)
        print(f"pre-adaptation  {test:.4f}({trn:.4f})")
    return 0


def _display_tile(img: np.ndarray, cfg) -> np.ndarray:
    tile = img.mean(axis=2) if img.ndim == 3 else img
    if cfg.bernoulli:
        tile = (1.0 - tile) * 255.0  # ink black on white paper
    return tile


def _episode_for(task, cfg, seed: int):
    rng = np.random.default_rng(seed)
    if isinstance(task, OmniglotTask):
        return sample_episode(task.dataset, "test", task.shots, rng,
                              slots=task.slots)
    return task.draw("test", rng)


def cmd_sample(args) -> int:
    try:
        params, cfg, _opt, meta_cfg, info = load_checkpoint(args.checkpoint)
        task = _build_task(info["task"], args.data, cfg)
    except (CheckpointError, ArchiveError, PgmError, OSError, ValueError) as exc:
        print(f"sample: {exc}", file=sys.stderr)
        return 4
    from .meta import adapt

    g, r = args.episodes, args.samples
    s = cfg.support_size
    th, tw = cfg.height, cfg.width
    n_cols = s + 1 + r
    grid = np.full((g * th + (g - 1), n_cols * tw + (n_cols - 1)), 128.0)
    try:
        for gi in range(g):
            ep = _episode_for(task, cfg, args.seed + gi)
            ep_params = params
            if cfg.meta and meta_cfg.inner_lr != 0.0:
                ep_params = adapt(params, ep.support, cfg,
                                  MetaConfig(meta_cfg.inner_lr,
                                             second_order=False))
            tiles = [ep.support[i] for i in range(s)] + [ep.target]
            for ri in range(r):
                res = sample(ep.support, ep_params, cfg,
                             rng_seed=args.seed * 1000 + gi * r + ri)
                tiles.append(res.image)
            for ti, tile in enumerate(tiles):
                r0, c0 = gi * (th + 1), ti * (tw + 1)
                grid[r0 : r0 + th, c0 : c0 + tw] = _display_tile(tile, cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pgm_write(grid, out / "sample_grid.pgm")
        print(f"wrote {out / 'sample_grid.pgm'}")
    except OSError as exc:
        print(f"sample: {exc}", file=sys.stderr)
        return 4
    return 0


def cmd_dump_attention(args) -> int:
    try:
        params, cfg, _opt, meta_cfg, info = load_checkpoint(args.checkpoint)
    except (CheckpointError, ArchiveError, OSError) as exc:
        print(f"dump-attention: {exc}", file=sys.stderr)
        return 4
    if not cfg.attention:
        print("dump-attention: checkpoint is not an attention variant",
              file=sys.stderr)
        return 2
    try:
        task = _build_task(info["task"], args.data, cfg)
    except (OSError, ValueError, PgmError) as exc:
        print(f"dump-attention: {exc}", file=sys.stderr)
        return 4
    from .attention import AttentionTrace, augment_support, build_memory
    from .meta import adapt

    ep = _episode_for(task, cfg, args.seed)
    ep_params = params
    if cfg.meta and meta_cfg.inner_lr != 0.0:
        ep_params = adapt(params, ep.support, cfg,
                          MetaConfig(meta_cfg.inner_lr, second_order=False))
    res = sample(ep.support, ep_params, cfg, rng_seed=args.seed)
    memory = build_memory(augment_support(ep.support, cfg), ep_params, cfg)
    trace = AttentionTrace(weights=res.attn_weights,
                           patch_centers=memory.patch_centers,
                           support_shape=(cfg.support_size, cfg.height,
                                          cfg.width))
    trace.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        lines = ["pixel_index,support_index,patch_row,patch_col,weight"]
        for t in range(trace.weights.shape[0]):
            for j, (si, pr, pc) in enumerate(trace.patch_centers):
                lines.append(f"{t},{si},{pr},{pc},{trace.weights[t, j]:.8e}")
        (out / "attention_trace.csv").write_text("\n".join(lines) + "\n")

        pgm_write(_display_tile(res.image, cfg), out / "sample.pgm")
        n_pix = cfg.height * cfg.width
        keyframes = sorted({n_pix // 4, n_pix // 2, (3 * n_pix) // 4, n_pix - 1})
        for t in keyframes:
            w = trace.weights[t]
            wmax = w.max() if w.max() > 0 else 1.0
            for si in range(cfg.support_size):
                base = _display_tile(ep.support[si], cfg)
                heat = np.zeros_like(base)
                for j, (sj, pr, pc) in enumerate(trace.patch_centers):
                    if sj != si:
                        continue
                    v = 255.0 * w[j] / wmax
                    r0, r1 = max(pr - 1, 0), min(pr + 2, cfg.height)
                    c0, c1 = max(pc - 1, 0), min(pc + 2, cfg.width)
                    heat[r0:r1, c0:c1] = np.maximum(heat[r0:r1, c0:c1], v)
                overlay = np.clip(0.4 * base + 0.6 * heat, 0, 255)
                pgm_write(overlay, out / f"overlay_t{t:04d}_s{si}.pgm")
        print(f"wrote trace for {trace.weights.shape[0]} pixels to {out}")
    except OSError as exc:
        print(f"dump-attention: {exc}", file=sys.stderr)
        return 4
    return 0


def cmd_make_data(args) -> int:
    if args.task == "omniglot":
        make_concept_corpus(args.out, n_alphabets=args.alphabets,
                            test_alphabets=args.test_alphabets,
                            chars_per_alphabet=args.chars,
                            images_per_char=args.images_per_char,
                            seed=args.seed)
    else:
        make_flip_corpus(args.out, n_images=args.images, seed=args.seed)
    print(f"wrote {args.task} corpus to {args.out}")
    return 0


def _add_common(p, with_task=True):
    if with_task:
        p.add_argument("--task", choices=("omniglot", "flip"), default="omniglot")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fewshot-pixelcnn")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model variant")
    _add_common(t)
    t.add_argument("--variant", choices=VARIANTS, default="baseline")
    t.add_argument("--shots", type=int, default=None)
    t.add_argument("--steps", type=int, default=10000)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--inner-lr", type=float, default=None)
    t.add_argument("--second-order", choices=("on", "off"), default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--eval-episodes", type=int, default=256)
    t.add_argument("--eval-every", type=int, default=500)
    t.add_argument("--checkpoint-every", type=int, default=1000)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="report NLL table for a checkpoint")
    e.add_argument("checkpoint")
    _add_common(e, with_task=False)
    e.add_argument("--eval-episodes", type=int, default=256)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="write a support|target|samples grid")
    s.add_argument("checkpoint")
    _add_common(s, with_task=False)
    s.add_argument("--out", required=True)
    s.add_argument("--episodes", type=int, default=4)
    s.add_argument("--samples", type=int, default=3)
    s.set_defaults(fn=cmd_sample)

    d = sub.add_parser("dump-attention",
                       help="trace attention weights during sampling")
    d.add_argument("checkpoint")
    _add_common(d, with_task=False)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump_attention)

    m = sub.add_parser("make-data", help="generate a synthetic corpus")
    m.add_argument("--task", choices=("omniglot", "flip"), default="omniglot")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--alphabets", type=int, default=12)
    m.add_argument("--test-alphabets", type=int, default=2)
    m.add_argument("--chars", type=int, default=8)
    m.add_argument("--images-per-char", type=int, default=8)
    m.add_argument("--images", type=int, default=96)
    m.set_defaults(fn=cmd_make_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
