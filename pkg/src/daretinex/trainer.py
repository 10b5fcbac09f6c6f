"""Two-phase training.

Phase 1 (``decomposition``) fits the decomposition U-Net together with the
degradation-aware feature CNN. Phase 2 (``enhancement``) freezes the
decomposer and fits the enhancement U-Net against a VGG16 perceptual term.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import losses
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import EmptyDatasetError, NumericalError, ShapeError
from .image_io import PairedSample, random_crop_pair
from .networks import (
    DAConfig,
    UNetConfig,
    build_module,
    init_weights,
    module_from_store,
    store_from_module,
    vgg16_store,
)

log = logging.getLogger(__name__)

PHASES = ("decomposition", "enhancement")
_PHASE_ALIASES = {"decom": "decomposition", "enh": "enhancement"}


# fields that do not affect the trained weights
_BOOKKEEPING = frozenset({"output_dir", "log_every", "checkpoint_every", "plot"})


@dataclass
class TrainConfig:
    phase: str = "decomposition"
    batch_size: int = 4
    patch_size: int = 384
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "none"
    lr_step_size: int = 1000
    lr_gamma: float = 0.5
    epochs: int = 0  # 0 -> 2000 for decomposition, 1000 for enhancement
    max_steps: int = 0  # 0 -> no step limit
    lambda_tv: float = 0.2
    seed: int = 0
    checkpoint_every: int = 1000
    deterministic: bool = True
    grad_clip: float = 5.0
    flips: bool = True
    output_dir: str = "runs"
    vgg_weights: str = ""
    vgg_layer: int = 31
    perceptual_norm: str = "input"
    log_every: int = 10
    divergence_threshold: float = 1e3
    da_init: str = "he"  # "he" or "zero"
    freeze_da: bool = False
    da_high_branch_grad: bool = True
    da_mse_weight: float = 1.0
    plot: bool = True

    def __post_init__(self):
        self.phase = _PHASE_ALIASES.get(self.phase, self.phase)
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch_size % 8:
            raise ValueError(f"patch_size must be divisible by 8, got {self.patch_size}")
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be >= 0")
        if self.lr_schedule not in ("none", "step"):
            raise ValueError("lr_schedule must be 'none' or 'step'")
        if self.da_init not in ("he", "zero"):
            raise ValueError("da_init must be 'he' or 'zero'")

    @property
    def total_epochs(self) -> int:
        if self.epochs:
            return self.epochs
        return 2000 if self.phase == "decomposition" else 1000

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(lambda_tv=self.lambda_tv, perceptual_norm=self.perceptual_norm,
                                 da_high_branch_grad=self.da_high_branch_grad, da_mse_weight=self.da_mse_weight)

    def config_hash(self) -> str:
        """Hash of the fields that influence the weights; output paths and logging are left out."""
        fields = {k: v for k, v in dataclasses.asdict(self).items() if k not in _BOOKKEEPING}
        blob = json.dumps(fields, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Parse a flat ``key = value`` file; ``#`` starts a comment."""
        values = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(value, types[key], f"{path}:{lineno}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _parse_value(text, type_name, where):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
    except ValueError:
        raise ValueError(f"{where}: cannot parse {text!r} as {type_name}") from None
    return text


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    params: Dict[str, torch.Tensor]
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, torch.zeros_like(p))
            self.exp_avg_sq.setdefault(name, torch.zeros_like(p))


def adam_step(state: AdamState, gradients: Dict[str, torch.Tensor], lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``state.params``."""
    if set(gradients) != set(state.params):
        raise KeyError("gradient names do not match parameter names")
    for name, g in gradients.items():
        if g.shape != state.params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}", name=name)
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in state.params.items():
            g = gradients[name]
            m = state.exp_avg[name].mul_(b1).add_(g, alpha=1 - b1)
            v = state.exp_avg_sq[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


def clip_grad_norm(grads: Dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# data


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def iterate_batches(dataset: Sequence[PairedSample], config: TrainConfig, epoch: int):
    """Yield lists of cropped samples for one epoch, in a seed-determined order."""
    n = len(dataset)
    order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, 2**31])).permutation(n)
    bs = min(config.batch_size, n)
    for start in range(0, n - bs + 1, bs):
        batch = []
        for idx in order[start : start + bs]:
            sample = dataset[int(idx)]
            batch.append(random_crop_pair(sample, config.patch_size, sample_rng(config.seed, epoch, int(idx)),
                                          flips=config.flips))
        yield batch


def _stack(batch, attr, dtype=torch.float32):
    arr = np.stack([getattr(s, attr) for s in batch]).transpose(0, 3, 1, 2)
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    return t.contiguous(memory_format=torch.channels_last)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    checkpoint: Path
    history: List[dict]
    da_checkpoint: Optional[Path] = None
    steps: int = 0


@contextlib.contextmanager
def _determinism(enabled: bool, seed: int):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.manual_seed(seed)
    if enabled:
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _lr(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "step":
        return config.learning_rate * config.lr_gamma ** (step // config.lr_step_size)
    return config.learning_rate


def _params(module) -> Dict[str, torch.Tensor]:
    return {n: p for n, p in module.named_parameters() if p.requires_grad}


def _grads(params):
    return {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}


class _Logger:
    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "w") if path else None

    def write(self, record: dict):
        if self.fh:
            self.fh.write(" ".join(f"{k}={_fmt(v)}" for k, v in record.items()) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _history_meta(history):
    keys = [k for k in history[0] if k != "wall"] if history else []
    return json.dumps([[rec[k] for k in keys] for rec in history]), json.dumps(keys)


def _save(module, config_net, path, config: TrainConfig, step, history):
    hist, keys = _history_meta(history)
    store = store_from_module(
        module, config_net,
        phase=config.phase, step=step, seed=config.seed, lambda_tv=repr(config.lambda_tv),
        config_hash=config.config_hash(), loss_history=hist, loss_history_keys=keys,
    )
    return save_checkpoint(store, path)


def _check_divergence(total: torch.Tensor, config: TrainConfig, batch, step, out_dir: Path):
    value = float(total.detach())
    if math.isfinite(value) and value <= config.divergence_threshold:
        return
    ids = [s.id for s in batch]
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "divergence.txt").write_text(f"step={step} loss={value!r} batch_ids={','.join(ids)}\n")
    raise NumericalError(f"training diverged at step {step} (loss {value!r}) on batch {ids}", batch_ids=ids)


def _run(config, dataset, out_dir, step_fn, after_step):
    history = []
    logger = _Logger(out_dir / f"train_{config.phase}.log")
    step = 0
    start = time.time()
    try:
        for epoch in range(config.total_epochs):
            for batch in iterate_batches(dataset, config, epoch):
                record = step_fn(batch, step)
                step += 1
                record = {"step": step, "epoch": epoch, **record}
                history.append(record)
                if step % config.log_every == 0 or step == 1:
                    logger.write({**record, "wall": round(time.time() - start, 3)})
                after_step(step, record, history)
                if config.max_steps and step >= config.max_steps:
                    return history, step
        return history, step
    finally:
        logger.close()


def train_decomposition(config: TrainConfig, dataset: Sequence[PairedSample],
                        on_step: Optional[Callable] = None) -> TrainResult:
    """Fit the decomposer and the DA CNN jointly; returns the decomposer checkpoint."""
    config = config.replace(phase="decomposition")
    if len(dataset) == 0:
        raise EmptyDatasetError("training dataset is empty")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_cfg = config.loss_config()
    decom_cfg, da_cfg = UNetConfig.decomposer(), DAConfig()

    with _determinism(config.deterministic, config.seed):
        decom = module_from_store(init_weights(decom_cfg, config.seed), decom_cfg).train()
        da_net = module_from_store(init_weights(da_cfg, config.seed + 1), da_cfg).train()
        if config.da_init == "zero":
            with torch.no_grad():
                for p in da_net.parameters():
                    p.zero_()
        if config.freeze_da:
            da_net.requires_grad_(False)
        decom.to(memory_format=torch.channels_last)
        da_net.to(memory_format=torch.channels_last)
        params = {f"decom.{n}": p for n, p in _params(decom).items()}
        params.update({f"da.{n}": p for n, p in _params(da_net).items()})
        adam = AdamState(params)

        def step_fn(batch, step):
            S_low, S_high = _stack(batch, "low"), _stack(batch, "high")
            n = S_low.shape[0]
            R, I = decom(torch.cat([S_low, S_high]))
            terms = losses.decom_loss_terms(R[:n], I[:n], S_low, R[n:], I[n:], S_high, da_net, loss_cfg)
            _check_divergence(terms["total"], config, batch, step, out_dir)
            for p in params.values():
                p.grad = None
            terms["total"].backward()
            grads = _grads(params)
            gnorm = clip_grad_norm(grads, config.grad_clip)
            adam_step(adam, grads, _lr(config, step), (config.beta1, config.beta2), config.eps)
            record = {k: float(v.detach()) for k, v in terms.items()}
            record["grad_norm"] = gnorm
            return record

        def save(step, history, suffix=""):
            d = _save(decom, decom_cfg, out_dir / f"decom{suffix}.ckpt", config, step, history)
            a = _save(da_net, da_cfg, out_dir / f"da{suffix}.ckpt", config, step, history)
            return d, a

        def checkpointing(step, record, history):
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save(step, history, f"_step{step}")
            if on_step is not None:
                on_step(step, record)

        history, steps = _run(config, dataset, out_dir, step_fn, checkpointing)
        decom_path, da_path = save(steps, history)
    _maybe_plot(config, history, out_dir)
    return TrainResult(decom_path, history, da_path, steps)


def train_enhancement(config: TrainConfig, dataset: Sequence[PairedSample], decom_checkpoint,
                      on_step: Optional[Callable] = None) -> TrainResult:
    """Fit the enhancer on top of a frozen decomposer; returns the enhancer checkpoint."""
    config = config.replace(phase="enhancement")
    if len(dataset) == 0:
        raise EmptyDatasetError("training dataset is empty")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_cfg = config.loss_config()
    enh_cfg = UNetConfig.enhancer()

    decom_store = load_checkpoint(decom_checkpoint)
    decom = module_from_store(decom_store, UNetConfig.decomposer()).eval()
    decom.requires_grad_(False)
    decom.to(memory_format=torch.channels_last)
    vgg = module_from_store(vgg16_store(config.vgg_weights or None, config.seed + 3)).eval()
    vgg.config = dataclasses.replace(vgg.config, layer=config.vgg_layer)
    vgg.requires_grad_(False)
    vgg.to(memory_format=torch.channels_last)

    with _determinism(config.deterministic, config.seed):
        enh = module_from_store(init_weights(enh_cfg, config.seed + 2), enh_cfg).train()
        enh.to(memory_format=torch.channels_last)
        params = _params(enh)
        adam = AdamState(params)

        def step_fn(batch, step):
            S_low, S_high = _stack(batch, "low"), _stack(batch, "high")
            n = S_low.shape[0]
            with torch.no_grad():
                R, I = decom(torch.cat([S_low, S_high]))
            R_low, I_low, I_high = R[:n], I[:n], I[n:]
            I_out = enh(R_low, I_low)
            terms = losses.enh_loss_terms(R_low, I_out, I_high, S_high, vgg, loss_cfg)
            _check_divergence(terms["total"], config, batch, step, out_dir)
            for p in params.values():
                p.grad = None
            terms["total"].backward()
            grads = _grads(params)
            gnorm = clip_grad_norm(grads, config.grad_clip)
            adam_step(adam, grads, _lr(config, step), (config.beta1, config.beta2), config.eps)
            record = {k: float(v.detach()) for k, v in terms.items()}
            record["grad_norm"] = gnorm
            record["decom_grad_norm"] = math.sqrt(sum(
                float((p.grad.double() ** 2).sum()) for p in decom.parameters() if p.grad is not None
            ))
            record["i_out_min"] = float(I_out.detach().min())
            record["i_out_max"] = float(I_out.detach().max())
            return record

        def checkpointing(step, record, history):
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                _save(enh, enh_cfg, out_dir / f"enh_step{step}.ckpt", config, step, history)
            if on_step is not None:
                on_step(step, record)

        history, steps = _run(config, dataset, out_dir, step_fn, checkpointing)
        path = _save(enh, enh_cfg, out_dir / "enh.ckpt", config, steps, history)
    _maybe_plot(config, history, out_dir)
    return TrainResult(path, history, None, steps)


def _maybe_plot(config, history, out_dir):
    if not (config.plot and history):
        return
    from .plotting import plot_loss_history

    plot_loss_history(history, out_dir / f"loss_{config.phase}.png", title=config.phase)
