"""Adam, pretraining on rendered scene archives and flow-consistency finetuning.

Each step draws its sample from a generator seeded by ``(seed, step)``, so
the batch sequence does not depend on whether batches are prefetched and a
run resumed from a checkpoint replays exactly.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .archive import list_scenes, load_scene_dir
from .checkpoint import AdamState, Checkpoint
from .errors import ConfigError, DimensionError, EmptyInputError, NaNError
from .geometry import CameraView, warp_backward
from .model import IntrinsicSet, ModelConfig, MVNet
from .scenegen import stack_targets

ENCODER_PREFIXES = ("embed.", "pos_row", "pos_col")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    lr: float = 5e-5
    epochs: int = 1
    steps_per_epoch: int = 100
    views: tuple[int, int] = (2, 12)
    warmup: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_albedo: float = 1.0
    w_metallic: float = 1.0
    w_roughness: float = 1.0
    w_normal: float = 1.0
    w_shading: float = 1.0
    anchor: float = 0.1
    freeze_encoder: bool = False
    replicate_single_view: bool = False
    deterministic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(int(v) for v in self.views))
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be pretrain or finetune, got {self.stage!r}")
        lo, hi = self.views
        if not 1 <= lo <= hi <= 12:
            raise ConfigError(f"views-per-batch range {lo}..{hi} must lie within 1..12")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be positive")
        if not 0 <= self.warmup <= 1:
            raise ConfigError(f"warm-up fraction must lie in [0, 1], got {self.warmup}")
        L.LossWeights(self.w_albedo, self.w_metallic, self.w_roughness, self.w_normal, self.w_shading, self.anchor)

    @property
    def steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup * self.steps))

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.w_albedo, self.w_metallic, self.w_roughness, self.w_normal, self.w_shading,
                             self.anchor)

    def to_dict(self) -> dict:
        """Training hyperparameters; the execution mode is not part of them."""
        d = asdict(self)
        d["views"] = list(self.views)
        del d["deterministic"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# optimizer


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and state.

    A missing gradient counts as zero. Inputs are not modified.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NaNError(f"non-finite gradient in parameter {name!r} at step {state.step + 1} "
                           f"({bad} of {np.size(g)} entries)")
    t = state.step + 1
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    new_p, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise DimensionError(f"gradient of {name!r} has shape {g.shape}, parameter {np.shape(p)}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_out[name], v_out[name] = m, v
    return new_p, AdamState(m_out, v_out, t)


def _zero_state(names_shapes) -> AdamState:
    return AdamState({n: np.zeros(s) for n, s in names_shapes}, {n: np.zeros(s) for n, s in names_shapes}, 0)


def trainable(net: MVNet, cfg: TrainConfig) -> dict:
    return {n: p for n, p in net.named_parameters()
            if not (cfg.freeze_encoder and n.startswith(ENCODER_PREFIXES))}


def apply_step(net: MVNet, cfg: TrainConfig, state: AdamState, lr: float | None = None) -> AdamState:
    """Adam-update every trainable parameter of ``net`` from its ``.grad``."""
    params = trainable(net, cfg)
    new, state = adam_step({n: p.data for n, p in params.items()}, {n: p.grad for n, p in params.items()}, state,
                           cfg.lr if lr is None else lr, cfg.beta1, cfg.beta2, cfg.eps)
    for n, p in params.items():
        p.data = new[n]
    return state


# --------------------------------------------------------------------------
# data


@dataclass
class SceneData:
    name: str
    images: np.ndarray  # [V,3,H,W]
    targets: IntrinsicSet  # batched float64 maps
    hit: np.ndarray  # [V,H,W]
    flows: list  # flow from view t to t+1, or None
    valid: list
    cameras: list  # CameraView per view

    @property
    def num_views(self) -> int:
        return len(self.images)


def scene_data(name: str, bundles) -> SceneData:
    gt, hit = stack_targets(bundles)
    gt = IntrinsicSet(*(np.asarray(v, dtype=np.float64) for _, v in gt.items()))
    return SceneData(name, np.stack([np.asarray(b.rgb, dtype=np.float64) for b in bundles]), gt, hit,
                     [b.flow_to_next for b in bundles[:-1]], [b.flow_valid for b in bundles[:-1]],
                     [CameraView(b.intrinsics, b.pose, np.asarray(b.depth, dtype=np.float64)) for b in bundles])


def load_archive(root) -> list[SceneData]:
    scenes = []
    for path in list_scenes(root):
        _, bundles = load_scene_dir(path)
        scenes.append(scene_data(path.name, bundles))
    if not scenes:
        raise EmptyInputError(f"{root}: archive has no scenes")
    return scenes


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def sample_views(rng: np.random.Generator, scenes: list[SceneData], cfg: TrainConfig):
    """Scene index and view indices for one pretraining step."""
    s = int(rng.integers(len(scenes)))
    v = scenes[s].num_views
    n = int(rng.integers(cfg.views[0], cfg.views[1] + 1))
    if v == 1 and cfg.replicate_single_view:
        return s, np.zeros(n, dtype=np.int64)
    return s, np.sort(rng.choice(v, size=min(n, v), replace=False))


def sample_triple(rng: np.random.Generator, videos: list[SceneData]):
    """Video index and frame triple ``(0, t, t+1)``."""
    k = int(rng.integers(len(videos)))
    n = videos[k].num_views
    if n < 2:
        raise EmptyInputError(f"video {videos[k].name} has fewer than 2 frames")
    t = int(rng.integers(n - 1))
    return k, (0, t, t + 1)


class _Prefetcher:
    """Two-slot producer/consumer handoff of per-step batches."""

    def __init__(self, make: Callable[[int], object], steps: range):
        self._q: queue.Queue = queue.Queue(maxsize=2)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(make, steps), daemon=True)
        self._thread.start()

    def _run(self, make, steps):
        for s in steps:
            try:
                item = (s, make(s), None)
            except Exception as exc:  # handed to the consumer
                item = (s, None, exc)
            while not self._stop.is_set():
                try:
                    self._q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if self._stop.is_set() or item[2] is not None:
                return

    def get(self):
        s, batch, exc = self._q.get()
        if exc is not None:
            raise exc
        return s, batch

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


def _batches(make, steps: range, prefetch: bool):
    if not prefetch:
        for s in steps:
            yield s, make(s)
        return
    pf = _Prefetcher(make, steps)
    try:
        for _ in steps:
            yield pf.get()
    finally:
        pf.close()


class RunLog:
    """Append structured step records as JSON lines (no-op without a path)."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, rec: dict) -> None:
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _clear_grads(net: MVNet) -> None:
    for p in net.parameters():
        p.grad = None


def _init(cfg: TrainConfig, model_cfg: ModelConfig | None, init: Checkpoint | None):
    if init is not None:
        net = init.build_model()
        state = AdamState(dict(init.adam.m), dict(init.adam.v), init.adam.step)
    else:
        net = MVNet(model_cfg or ModelConfig(seed=cfg.seed))
        state = None
    if state is None or not state.m:
        state = _zero_state([(n, p.shape) for n, p in trainable(net, cfg).items()])
    return net, state


# --------------------------------------------------------------------------
# stages


def train_pretrain(cfg: TrainConfig, scenes, model_cfg: ModelConfig | None = None, init: Checkpoint | None = None,
                   log_path=None, time_log_path=None, lr: float | None = None) -> tuple[Checkpoint, list[dict]]:
    """Supervised training on rendered scenes; returns the checkpoint and per-step loss records.

    ``scenes`` is an archive directory or a list of :class:`SceneData`.
    Loss records are deterministic; wall-clock goes to ``time_log_path``.
    ``lr`` overrides ``cfg.lr`` and may be 0 (a diagnostic no-op run).
    """
    if not isinstance(scenes, list):
        scenes = load_archive(scenes)
    if not scenes:
        raise EmptyInputError("pretraining needs at least one scene")
    net, state = _init(cfg, model_cfg, init)
    start = state.step
    size = net.cfg.image_size
    for sc in scenes:
        if sc.images.shape[-2:] != size:
            raise ConfigError(f"scene {sc.name} is {sc.images.shape[-2:]}, model expects {size}")

    def make(step):
        s, idx = sample_views(step_rng(cfg.seed, step), scenes, cfg)
        sc = scenes[s]
        gt = sc.targets.select(idx)
        return sc.name, sc.images[idx], gt, L.validity_mask(gt.albedo, sc.hit[idx])

    curve, log, tlog = [], RunLog(log_path), RunLog(time_log_path)
    t0 = time.perf_counter()
    for step, (name, images, gt, mask) in _batches(make, range(start, cfg.steps), not cfg.deterministic):
        warm = step < cfg.warmup_steps
        _clear_grads(net)
        with T.Tape(retain_grads=False) as tape:
            terms = L.composite_terms(net(images), gt, mask, cfg.weights, warmup=warm)
            total = sum(terms.values(), T.tensor(0.0))
            tape.backward(total)
        state = apply_step(net, cfg, state, lr)
        rec = {"step": step + 1, "scene": name, "views": int(len(images)), "warmup": warm,
               "loss": total.item(), **{k: v.item() for k, v in terms.items()}}
        curve.append(rec)
        log.write(rec)
        tlog.write({"step": step + 1, "wall": time.perf_counter() - t0})
    return Checkpoint.from_model(net, state, cfg.to_dict(), step_rng(cfg.seed, state.step),
                                 meta={"stage": "pretrain"}), curve


def finetune_objective(pred: IntrinsicSet, ref0: IntrinsicSet, flow: np.ndarray, valid: np.ndarray,
                       anchor: float, channels=L.FINETUNE_CHANNELS) -> tuple:
    """Sum over channels of the anchor-plus-consistency loss on a ``(0, t, t+1)`` prediction."""
    total, parts = None, {}
    for k in channels:
        m = pred[k]
        warped, _ = warp_backward(m[2], flow, valid)
        term = L.finetune_loss(m[0], ref0[k][0], m[1], warped, valid, anchor)
        parts[k] = term
        total = term if total is None else total + term
    return total, parts


def train_finetune(cfg: TrainConfig, pretrained: Checkpoint, videos, log_path=None, time_log_path=None,
                   lr: float | None = None) -> tuple[Checkpoint, list[dict]]:
    """Self-supervised finetuning of a copy of ``pretrained``; the reference stays frozen.

    Optimizer moments restart from zero. ``lr`` overrides ``cfg.lr``.
    """
    if not isinstance(videos, list):
        videos = load_archive(videos)
    if not videos:
        raise EmptyInputError("finetuning needs at least one video")
    frozen = pretrained.build_model()
    net = pretrained.build_model()
    state = _zero_state([(n, p.shape) for n, p in trainable(net, cfg).items()])

    def make(step):
        k, (f0, t, t1) = sample_triple(step_rng(cfg.seed, step), videos)
        vid = videos[k]
        if vid.flows[t] is None or vid.valid[t] is None:
            raise ConfigError(f"video {vid.name}: missing flow for frame pair ({t}, {t1})")
        return vid.name, t, vid.images[[f0, t, t1]], vid.flows[t], vid.valid[t]

    curve, log, tlog = [], RunLog(log_path), RunLog(time_log_path)
    t0 = time.perf_counter()
    for step, (name, t, images, flow, valid) in _batches(make, range(cfg.steps), not cfg.deterministic):
        with T.no_grad():
            ref0 = frozen(images).numpy()
        _clear_grads(net)
        with T.Tape(retain_grads=False) as tape:
            total, parts = finetune_objective(net(images), ref0, flow, valid, cfg.anchor)
            tape.backward(total)
        state = apply_step(net, cfg, state, lr)
        rec = {"step": step + 1, "video": name, "t": t, "loss": total.item(), **{k: v.item() for k, v in parts.items()}}
        curve.append(rec)
        log.write(rec)
        tlog.write({"step": step + 1, "wall": time.perf_counter() - t0})
    meta = {"stage": "finetune", "pretrained_step": int(pretrained.adam.step)}
    return Checkpoint.from_model(net, state, cfg.to_dict(), step_rng(cfg.seed, state.step), meta=meta), curve


# --------------------------------------------------------------------------
# inference helpers


def predict(net: MVNet, images) -> IntrinsicSet:
    with T.no_grad():
        return net(np.asarray(images, dtype=np.float64)).numpy()


def moving_average(values, k: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < k:
        raise ValueError(f"need at least {k} values for a {k}-step moving average")
    return np.convolve(v, np.ones(k) / k, mode="valid")


def aligned_albedo_rmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Albedo RMSE after the per-view, per-channel least-squares scale used in training."""
    m = np.asarray(mask, dtype=bool)[:, None]
    num = np.sum(pred * gt * m, axis=(2, 3), keepdims=True)
    den = np.sum(pred * pred * m, axis=(2, 3), keepdims=True)
    s = np.where(den > L.EPS, num / np.maximum(den, L.EPS), 1.0)
    diff = (s * pred - gt) * m
    return float(np.sqrt(np.sum(diff * diff) / (m.sum() * pred.shape[1])))


def mean_predictor(gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-scene constant prediction: the masked mean ground-truth albedo of each channel."""
    m = np.asarray(mask, dtype=bool)[:, None]
    mean = np.sum(gt * m, axis=(0, 2, 3), keepdims=True) / max(m.sum(), 1)
    return np.broadcast_to(mean, gt.shape).copy()
