"""Training loop, optimizer, checkpoints and batch prediction."""
from __future__ import annotations

import csv
import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from .decoder import DySSDecoder, forward
from .evalmetrics import evaluate
from .kernels.checkpoint import load_arrays, save_arrays
from .kernels.tensor import backward, no_grad
from .sampling import SceneInputs, scene_inputs
from .simworld import CLASSES, Scene
from .supervision import total_loss

LOSS_COLUMNS = ("step", "lr", "cls", "box", "L_r", "L_f", "total")


class TrainingAborted(RuntimeError):
    pass


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("DYSS_THREADS", "1")))
    except ValueError:
        return 1


def cosine_lr(step: int, total: int, base: float, min_ratio: float = 0.0) -> float:
    if total <= 1:
        return base
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return base * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + np.cos(np.pi * frac)))


class Adam:
    """Adam without weight decay; state is keyed by parameter name."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()
        self.t = t


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, stem: str, model: DySSDecoder, opt: Adam | None, cfg: C.RunConfig,
                    step: int) -> Path:
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = {"step": step, "adam_t": opt.t if opt else 0, "config": C.to_dict(cfg)}
    return save_arrays(directory, stem, arrays, meta)


def load_checkpoint(path, cfg: C.RunConfig | None = None):
    """Returns ``(model, optimizer_arrays, meta, cfg)``; shape mismatches raise a named error."""
    arrays, meta = load_arrays(path)
    ck_cfg = C.from_dict(meta["config"])
    cfg = cfg or ck_cfg
    model = DySSDecoder(cfg.decoder, seed=cfg.seed)
    state = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    model.load_state_dict(state)
    return model, arrays, meta, cfg


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: DySSDecoder
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def inputs_for(scene: Scene, stride: int) -> SceneInputs:
    if scene.maps is None:
        raise ValueError(f"scene {scene.index} has no feature maps")
    return scene_inputs(scene.rig, scene.ego_poses, scene.maps, stride)


_GRAD_LOCK = threading.Lock()


def _scene_loss(model, inp, scene, cfg: C.RunConfig, mask_seed, scale: float):
    res = forward(model, inp, training=True, seed=mask_seed)
    lb = total_loss(res, scene.classes, scene.gt_boxes(), cfg.loss, aux=cfg.decoder.aux)
    if np.isfinite(lb.total.data):
        # forwards run in parallel; accumulation into the shared .grad buffers must not
        with _GRAD_LOCK:
            backward(lb.total * scale)
    return lb


def train(cfg: C.RunConfig, scenes: list[Scene], out_dir=None, resume=None, steps: int | None = None,
          log=None) -> TrainResult:
    """Optimise on ``scenes``; writes ``loss.csv`` and ``checkpoint.{json,bin}`` under ``out_dir``.

    Per-step randomness (batch choice, feature masks) derives from
    ``(seed, step)`` only, so a resumed run continues exactly.
    """
    if not scenes:
        raise ValueError("no training scenes")
    tc = cfg.train
    total_steps = tc.steps if steps is None else steps
    start = 0
    if resume is not None:
        model, arrays, meta, _ = load_checkpoint(resume, cfg)
        opt = Adam(model.named_parameters(), tc.beta1, tc.beta2, tc.adam_eps)
        opt.load_state_arrays(arrays, meta["adam_t"])
        start = int(meta["step"])
    else:
        model = DySSDecoder(cfg.decoder, seed=cfg.seed)
        opt = Adam(model.named_parameters(), tc.beta1, tc.beta2, tc.adam_eps)
    params = model.parameters()
    inputs = [inputs_for(s, cfg.world.stride) for s in scenes]
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        loss_path = out_dir / "loss.csv"
        append = resume is not None and loss_path.exists() and loss_path.stat().st_size > 0
        fh = open(loss_path, "a" if append else "w", newline="")
        writer = csv.writer(fh)
        if not append:
            writer.writerow(LOSS_COLUMNS)
    workers = 1 if tc.deterministic else thread_count()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    history = []
    try:
        for step in range(start, total_steps):
            rng = np.random.default_rng([cfg.seed, step])
            bs = min(tc.batch_size, len(scenes))
            batch = rng.choice(len(scenes), size=bs, replace=False)
            model.zero_grad()
            jobs = [(model, inputs[i], scenes[i], cfg, [cfg.seed, step, int(i)], 1.0 / bs) for i in batch]
            if pool is None:
                parts = [_scene_loss(*j) for j in jobs]
            else:
                parts = list(pool.map(lambda j: _scene_loss(*j), jobs))
            row = {"step": step, "lr": cosine_lr(step, total_steps, tc.lr, tc.min_lr_ratio)}
            for key in ("cls", "box", "L_r", "L_f"):
                row[key] = float(np.mean([getattr(p, key) for p in parts]))
            row["total"] = float(np.mean([float(p.total.data) for p in parts]))
            grads_ok = all(np.all(np.isfinite(p.grad)) for p in params)
            if not np.isfinite(row["total"]) or not grads_ok:
                _dump_nan(out_dir, model, cfg, step, batch, row)
                raise TrainingAborted(f"non-finite loss or gradient at step {step} (scenes {batch.tolist()}); "
                                      f"diagnostics in {out_dir}")
            clip_grad_norm(params, tc.grad_clip)
            opt.step(row["lr"])
            history.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in LOSS_COLUMNS])
            if log is not None:
                log(row)
            if out_dir is not None and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                save_checkpoint(out_dir, f"checkpoint_{step + 1:06d}", model, opt, cfg, step + 1)
    finally:
        if pool is not None:
            pool.shutdown()
        if writer is not None:
            fh.close()
    ck = save_checkpoint(out_dir, "checkpoint", model, opt, cfg, total_steps) if out_dir is not None else None
    return TrainResult(model, history, ck)


def _dump_nan(out_dir, model, cfg, step, batch, row) -> None:
    if out_dir is None:
        return
    dump = out_dir / "nan_dump"
    dump.mkdir(parents=True, exist_ok=True)
    (dump / "batch.json").write_text(json.dumps({"step": step, "scenes": [int(b) for b in batch],
                                                 "losses": {k: str(v) for k, v in row.items()}}, indent=1))
    save_checkpoint(dump, "model", model, None, cfg, step)


# ---------------------------------------------------------------- prediction / evaluation

def predict(model: DySSDecoder, scenes: list[Scene], stride: int) -> list[dict]:
    out = []
    with no_grad():
        for s in scenes:
            res = forward(model, inputs_for(s, stride))
            out.append(res.final_predictions())
    return out


def evaluate_model(model: DySSDecoder, scenes: list[Scene], stride: int):
    if not scenes:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(model, scenes, stride)
    return evaluate([(p, s.classes, s.gt_boxes()) for p, s in zip(preds, scenes)], CLASSES)
