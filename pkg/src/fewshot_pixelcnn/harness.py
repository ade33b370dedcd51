"""Training loop, fixed-seed evaluation protocol, checkpoints, metrics log."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import VARIANTS, ModelConfig
from .data import ConceptDataset, Episode, flip_episode, sample_episode
from .io import archive_read, archive_write
from .layers import OptState, rmsprop_step
from .meta import MetaConfig, adapt, meta_train_step
from .model import init_params, nll
from .tensor import Tensor, backward, no_grad

EVAL_SEED_BASE = 90_000  # fixed bank so reports are comparable across variants


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# episode sources


@dataclass
class OmniglotTask:
    dataset: ConceptDataset
    shots: int
    slots: int

    def draw(self, split: str, rng: np.random.Generator) -> Episode:
        return sample_episode(self.dataset, split, self.shots, rng,
                              slots=self.slots)


@dataclass
class FlipTask:
    train_images: list
    test_images: list

    def draw(self, split: str, rng: np.random.Generator) -> Episode:
        pool = self.train_images if split == "train" else self.test_images
        return flip_episode(pool[int(rng.integers(len(pool)))])


def make_flip_task(images: list, holdout_fraction: float = 0.25) -> FlipTask:
    n_test = max(1, int(len(images) * holdout_fraction))
    return FlipTask(train_images=images[:-n_test], test_images=images[-n_test:])


# ---------------------------------------------------------------------------
# evaluation


def eval_nll(task, split: str, params: dict, cfg: ModelConfig,
             episodes: int, meta_cfg: MetaConfig | None = None,
             shots: int | None = None, chunk: int = 16) -> float:
    """Mean NLL over a fixed seed bank of episodes (post-adaptation for meta)."""
    drawn = []
    for i in range(episodes):
        rng = np.random.default_rng(EVAL_SEED_BASE + i)
        if shots is not None and isinstance(task, OmniglotTask):
            drawn.append(sample_episode(task.dataset, split, shots, rng,
                                        slots=task.slots))
        else:
            drawn.append(task.draw(split, rng))
    total = 0.0
    if cfg.meta and meta_cfg is not None and meta_cfg.inner_lr != 0.0:
        # first-order adaptation yields bit-identical values at half the cost
        meta_eval = MetaConfig(inner_lr=meta_cfg.inner_lr, second_order=False)
        for e in drawn:  # per-episode adapted parameters
            adapted = adapt(params, e.support, cfg, meta_eval)
            with no_grad():
                total += nll(e, adapted, cfg).item()
        return total / len(drawn)
    with no_grad():
        for i in range(0, len(drawn), chunk):
            batch = drawn[i : i + chunk]
            total += nll(batch, params, cfg).item() * len(batch)
    return total / len(drawn)


# ---------------------------------------------------------------------------
# checkpoints

_MANIFEST = "manifest"
_CONFIG_KEYS = (
    "height", "width", "channels", "value_levels", "n_layers", "planes",
    "penultimate_planes", "support_size", "attn_channels", "query_layer",
    "patch_grid", "global_dim", "support_planes", "identity_channels",
)


def save_checkpoint(out_dir, params: dict, cfg: ModelConfig, opt: OptState,
                    meta_cfg: MetaConfig, step: int, seed: int,
                    task: str = "omniglot") -> Path:
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    (out / "opt").mkdir(parents=True, exist_ok=True)
    lines = [f"format_version=1", f"variant={cfg.variant}", f"task={task}",
             f"step={step}",
             f"seed={seed}", f"lr={opt.lr!r}", f"decay={opt.decay!r}",
             f"eps={opt.eps!r}", f"opt_step={opt.step}",
             f"inner_lr={meta_cfg.inner_lr!r}",
             f"second_order={int(meta_cfg.second_order)}",
             "patch_kernels=" + ";".join(f"{k},{s}" for k, s in cfg.patch_kernels)]
    for key in _CONFIG_KEYS:
        val = getattr(cfg, key)
        lines.append(f"{key}={int(val) if isinstance(val, bool) else val}")
    for name, p in params.items():
        archive_write(p.data, out / "params" / f"{name}.fsta")
        acc = opt.acc.get(name)
        if acc is not None:
            archive_write(acc, out / "opt" / f"{name}.fsta")
    (out / _MANIFEST).write_text("\n".join(lines) + "\n")
    return out


def load_checkpoint(ckpt_dir):
    """Returns (params, cfg, opt, meta_cfg, info). Bit-exact round trip."""
    ckpt = Path(ckpt_dir)
    mf = ckpt / _MANIFEST
    if not mf.is_file():
        raise CheckpointError(f"load_checkpoint: missing manifest in {ckpt}")
    kv = {}
    for line in mf.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"load_checkpoint: bad manifest line {line!r}")
        k, v = line.split("=", 1)
        kv[k] = v
    try:
        variant = kv["variant"]
        if variant not in VARIANTS:
            raise CheckpointError(f"load_checkpoint: unknown variant {variant!r}")
        patch_kernels = tuple(
            tuple(int(x) for x in pair.split(","))
            for pair in kv["patch_kernels"].split(";"))
        cfg = ModelConfig(
            attention=variant in ("attention", "attention_meta"),
            meta=variant in ("meta", "attention_meta"),
            patch_kernels=patch_kernels,
            **{k: (bool(int(kv[k])) if k == "identity_channels" else int(kv[k]))
               for k in _CONFIG_KEYS},
        )
        opt = OptState(lr=float(kv["lr"]), decay=float(kv["decay"]),
                       eps=float(kv["eps"]), step=int(kv["opt_step"]))
        meta_cfg = MetaConfig(inner_lr=float(kv["inner_lr"]),
                              second_order=bool(int(kv["second_order"])))
        info = {"step": int(kv["step"]), "seed": int(kv["seed"]),
                "variant": variant, "task": kv.get("task", "omniglot")}
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"load_checkpoint: bad manifest: {exc}") from exc

    expected = set(init_params(cfg, 0).keys())
    have = {f.stem for f in (ckpt / "params").glob("*.fsta")}
    if have != expected:
        missing, extra = expected - have, have - expected
        raise CheckpointError(
            f"load_checkpoint: parameter set mismatch for variant {variant}: "
            f"missing={sorted(missing)} extra={sorted(extra)}")
    params = {}
    for name in sorted(expected):
        params[name] = Tensor(archive_read(ckpt / "params" / f"{name}.fsta"),
                              requires_grad=True)
        accf = ckpt / "opt" / f"{name}.fsta"
        if accf.is_file():
            opt.acc[name] = archive_read(accf)
    return params, cfg, opt, meta_cfg, info


# ---------------------------------------------------------------------------
# training


def train(task, cfg: ModelConfig, meta_cfg: MetaConfig, steps: int,
          batch: int, lr: float, seed: int, out_dir,
          eval_episodes: int = 256, eval_every: int = 500,
          checkpoint_every: int = 1000, log=print,
          task_name: str = "omniglot") -> Path:
    """Deterministic training run; writes checkpoint dir + metrics.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = init_params(cfg, seed)
    opt = OptState(lr=lr)
    rng = np.random.default_rng(seed)
    rows = []
    t0 = time.monotonic()

    def record(step, train_nll):
        ev = eval_nll(task, "test", params, cfg, eval_episodes, meta_cfg)
        if not (np.isfinite(train_nll) and np.isfinite(ev)):
            raise TrainingDiverged(f"non-finite NLL at step {step}")
        rows.append((step, train_nll, ev, time.monotonic() - t0))
        log(f"step {step:6d}  train {train_nll:.4f}  eval {ev:.4f}")

    first = [task.draw("train", rng) for _ in range(max(batch, 1))]
    if cfg.meta and meta_cfg.inner_lr != 0.0:
        adapted = adapt(params, first[0].support, cfg, meta_cfg)
        with no_grad():
            init_nll = nll(first[0], adapted, cfg).item()
    else:
        with no_grad():
            init_nll = nll(first, params, cfg).item()
    record(0, init_nll)
    save_checkpoint(out / "checkpoint", params, cfg, opt, meta_cfg, 0, seed,
                    task_name)

    for step in range(1, steps + 1):
        episodes = [task.draw("train", rng) for _ in range(batch)]
        if cfg.meta:
            params, opt, m = meta_train_step(episodes, params, cfg, opt, meta_cfg)
            train_nll = m["outer_nll"]
        else:
            loss = nll(episodes, params, cfg)
            train_nll = loss.item()
            gmap = backward(loss)
            grads = {name: gmap.get(p, Tensor(np.zeros_like(p.data)))
                     for name, p in params.items()}
            params, opt = rmsprop_step(params, grads, opt)
        if not np.isfinite(train_nll):
            _write_metrics(out, rows)
            raise TrainingDiverged(f"non-finite training NLL at step {step}")
        if step % eval_every == 0 or step == steps:
            record(step, train_nll)
        if step % checkpoint_every == 0 or step == steps:
            save_checkpoint(out / "checkpoint", params, cfg, opt, meta_cfg,
                            step, seed, task_name)
    _write_metrics(out, rows)
    return out / "checkpoint"


def _write_metrics(out_dir, rows) -> None:
    lines = ["step,train_nll,eval_nll,wall_seconds"]
    lines += [f"{s},{t:.6f},{e:.6f},{w:.3f}" for s, t, e, w in rows]
    (Path(out_dir) / "metrics.csv").write_text("\n".join(lines) + "\n")
