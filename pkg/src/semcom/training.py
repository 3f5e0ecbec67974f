"""Noisy-conditioning training: channel draws, AdamW, EMA, checkpointing.

Each training sample gets its own channel condition drawn from a weighted
PSNR pool (clean conditions weighted higher by default); the map is
normalized, corrupted, de-scaled, and fed to the model raw (the fast
denoiser stays off during training and on at inference, asserted here).
Non-finite gradients skip the step and are counted; a non-finite forward
aborts the run.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .channel import ChannelConfig, derive_seed
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import total_loss
from .link import receiver_condition, transmit_map


class TrainError(ValueError):
    pass


DEFAULT_PSNR_POOL = (1.0, 5.0, 10.0, 15.0, 20.0, 30.0, 100.0)
DEFAULT_PSNR_WEIGHTS = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 4.0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    steps: int = 5000
    lambda_kl: float = 0.001
    ld_norm: str = "mse"
    ema_decay: float = 0.9999
    cond_drop_prob: float = 0.2
    psnr_pool: tuple = DEFAULT_PSNR_POOL
    psnr_weights: tuple = DEFAULT_PSNR_WEIGHTS
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    power: float = 1.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not self.psnr_pool:
            raise TrainError("psnr_pool must not be empty")
        if len(self.psnr_pool) != len(self.psnr_weights):
            raise TrainError(f"{len(self.psnr_pool)} pool entries vs {len(self.psnr_weights)} weights")
        if any(w <= 0 for w in self.psnr_weights):
            raise TrainError("psnr weights must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise TrainError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise TrainError(f"cond_drop_prob must lie in [0, 1], got {self.cond_drop_prob}")


@dataclass
class RunMetrics:
    step: int
    L_d: float
    L_KL: float
    total: float
    grad_norm: float
    wall_ms: float
    psnr_counts: dict = field(default_factory=dict)

    def finite(self):
        return all(np.isfinite(v) for v in (self.L_d, self.L_KL, self.total, self.grad_norm))


def sample_channel_condition(rng, psnr_pool, weights=None):
    """Categorical draw of a channel PSNR from the (normalized) weighted pool."""
    pool = list(psnr_pool)
    if not pool:
        raise TrainError("psnr_pool must not be empty")
    if weights is None:
        weights = [1.0] * len(pool)
    p = np.asarray(weights, dtype=np.float64)
    p /= p.sum()
    return float(pool[rng.choice(len(pool), p=p)])


class AdamW:
    """Decoupled-weight-decay adaptive moments with bias correction."""

    def __init__(self, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        """One update over {name: Tensor} using the accumulated .grad fields."""
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def state_arrays(self):
        out = {}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, t):
        self.t = int(t)
        self.m = {}
        self.v = {}
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self.m[key[len("opt.m."):]] = np.asarray(arr, dtype=np.float32)
            elif key.startswith("opt.v."):
                self.v[key[len("opt.v."):]] = np.asarray(arr, dtype=np.float32)


def ema_update(shadow, params, decay):
    """shadow <- decay * shadow + (1 - decay) * params, per entry."""
    for name, value in params.items():
        data = value.data if isinstance(value, T.Tensor) else np.asarray(value)
        shadow[name] = decay * shadow[name] + (1.0 - decay) * data
    return shadow


def global_grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(params, max_norm):
    norm = global_grad_norm(params)
    if max_norm and norm > max_norm and np.isfinite(norm):
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


METRICS_SCHEMA = "metrics.v1"
METRICS_HEADER = "step,L_d,L_KL,total,grad_norm,wall_ms"


class MetricsWriter:
    def __init__(self, path):
        self.path = path
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# {METRICS_SCHEMA}\n{METRICS_HEADER}\n")

    def append(self, m):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write("%d,%.8g,%.8g,%.8g,%.8g,%.0f\n"
                    % (m.step, m.L_d, m.L_KL, m.total, m.grad_norm, m.wall_ms))


class Trainer:
    """Owns the model parameters, optimizer state, EMA shadow, and RNG."""

    def __init__(self, model, sched, cfg, pairs, config_hash=""):
        if not pairs:
            raise TrainError("no training pairs")
        self.model = model
        self.sched = sched
        self.cfg = cfg
        self.config_hash = config_hash
        self.images = np.stack([img for img, _ in pairs]).astype(np.float32)
        self.maps = [cmap for _, cmap in pairs]
        self.c_total = model.config.cond_channels
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = AdamW(cfg.learning_rate, cfg.weight_decay)
        self.ema = {name: p.data.copy() for name, p in model.params.items()}
        self.step_index = 0
        self.skipped = 0
        self.history = []

    # -- conditioning -------------------------------------------------------
    def _condition(self, cmap, psnr_db, sample_tag):
        ch_cfg = ChannelConfig(
            psnr_db=psnr_db, power=self.cfg.power,
            seed=derive_seed(self.cfg.seed, self.step_index, sample_tag))
        link = transmit_map(cmap, self.c_total, ch_cfg, self.cfg.power)
        # training consumes raw noisy maps: the fast denoiser stays inference-only
        return receiver_condition(link, self.c_total, fds_cfg=None)

    def train_step(self):
        """One optimizer update; returns RunMetrics (grad_norm NaN on skip)."""
        cfg = self.cfg
        t0 = time.perf_counter()
        n = len(self.maps)
        idx = self.rng.integers(0, n, size=cfg.batch_size)
        psnr_counts = {}
        conds = []
        for j, i in enumerate(idx):
            psnr = sample_channel_condition(self.rng, cfg.psnr_pool, cfg.psnr_weights)
            psnr_counts[psnr] = psnr_counts.get(psnr, 0) + 1
            cond = self._condition(self.maps[i], psnr, j)
            if self.rng.uniform() < cfg.cond_drop_prob:
                cond = np.zeros_like(cond)
            conds.append(cond)
        y = np.stack(conds)
        x0 = self.images[idx] * 2.0 - 1.0
        t = self.rng.integers(1, self.sched.steps + 1, size=cfg.batch_size)
        eps = self.rng.standard_normal(x0.shape, dtype=np.float32)

        self.model.zero_grad()
        loss, comps = total_loss(self.model, x0, y, t, eps, self.sched,
                                 lambda_kl=cfg.lambda_kl, ld_norm=cfg.ld_norm)
        loss.backward()
        del loss

        grads_finite = all(
            p.grad is None or np.isfinite(float(p.grad.sum()))
            for p in self.model.params.values())
        if not grads_finite:
            self.skipped += 1
            norm = float("nan")
        else:
            norm = clip_gradients(self.model.params, cfg.grad_clip)
            self.opt.step(self.model.params)
            ema_update(self.ema, self.model.params, cfg.ema_decay)
        self.step_index += 1
        metrics = RunMetrics(self.step_index, comps["L_d"], comps["L_KL"], comps["total"],
                             norm, 1e3 * (time.perf_counter() - t0), psnr_counts)
        self.history.append(metrics)
        return metrics

    # -- checkpointing -------------------------------------------------------
    def _trainer_extra(self):
        return {
            "kind": "train",
            "step": self.step_index,
            "skipped": self.skipped,
            "opt_t": self.opt.t,
            "rng_state": self.rng.bit_generator.state,
        }

    def save(self, path, ema=False):
        arrays = dict(self.ema) if ema else self.model.state()
        extra = self._trainer_extra()
        extra["ema"] = bool(ema)
        if not ema:
            arrays = dict(arrays)
            arrays.update(self.opt.state_arrays())
            arrays.update({f"ema.{k}": v for k, v in self.ema.items()})
        save_checkpoint(path, arrays, self.config_hash, extra)

    def restore(self, path):
        arrays, manifest = load_checkpoint(path)
        extra = manifest["extra"]
        if extra.get("ema"):
            raise TrainError("cannot resume from an EMA-only checkpoint")
        model_arrays = {k: v for k, v in arrays.items()
                        if not k.startswith(("opt.", "ema."))}
        self.model.load_state(model_arrays)
        self.opt.load_state_arrays(arrays, extra["opt_t"])
        self.ema = {k[len("ema."):]: v.copy() for k, v in arrays.items() if k.startswith("ema.")}
        self.step_index = int(extra["step"])
        self.skipped = int(extra["skipped"])
        state = extra["rng_state"]
        state["state"] = {k: int(v) for k, v in state["state"].items()}
        self.rng.bit_generator.state = state
        return manifest
