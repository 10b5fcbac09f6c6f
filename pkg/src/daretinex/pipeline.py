"""Inference (decompose -> enhance -> recompose) and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .errors import ShapeError
from .image_io import load_image, match_basenames
from .metrics import SAM_NOTE, MetricReport, full_battery
from .networks import (
    UNetConfig,
    WeightStore,
    crop_back,
    module_from_store,
    pad_to_multiple,
    to_numpy,
    to_tensor,
)


@dataclass
class EnhancedOutput:
    enhanced: np.ndarray
    reflectance: np.ndarray
    illumination_in: np.ndarray
    illumination_out: np.ndarray


def _store(ckpt) -> WeightStore:
    return ckpt if isinstance(ckpt, WeightStore) else load_checkpoint(ckpt)


def recompose(reflectance: np.ndarray, illumination: np.ndarray) -> np.ndarray:
    """Clamp(R * I replicated over three channels) to [0, 1]."""
    return np.clip(reflectance * np.repeat(illumination, 3, axis=-1), 0.0, 1.0)


class Enhancer:
    """Loaded decomposer/enhancer pair, reusable across many images."""

    def __init__(self, decom_ckpt, enh_ckpt=None):
        self.decomposer = module_from_store(_store(decom_ckpt), UNetConfig.decomposer())
        self.enhancer = None
        if enh_ckpt is not None:
            self.enhancer = module_from_store(_store(enh_ckpt), UNetConfig.enhancer())
        self.multiple = UNetConfig.decomposer().multiple

    @torch.no_grad()
    def decompose(self, img: np.ndarray):
        img = _rgb(img)
        padded, record = pad_to_multiple(img, self.multiple)
        R, I = self.decomposer(to_tensor(padded))
        return crop_back(to_numpy(R), record), crop_back(to_numpy(I), record)

    @torch.no_grad()
    def __call__(self, img: np.ndarray) -> EnhancedOutput:
        if self.enhancer is None:
            raise ValueError("no enhancement checkpoint loaded")
        img = _rgb(img)
        padded, record = pad_to_multiple(img, self.multiple)
        R, I = self.decomposer(to_tensor(padded))
        I_out = self.enhancer(R, I)
        R, I, I_out = (crop_back(to_numpy(t), record) for t in (R, I, I_out))
        return EnhancedOutput(recompose(R, I_out), R, I, I_out)


def _rgb(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {img.shape}")
    return img


def enhance_image(decom_ckpt, enh_ckpt, img: np.ndarray) -> EnhancedOutput:
    return Enhancer(decom_ckpt, enh_ckpt)(img)


def evaluate_dirs(pred_dir, gt_dir, max_workers: Optional[int] = None) -> MetricReport:
    """Full metric battery for every basename shared by ``pred_dir`` and ``gt_dir``."""
    pairs = match_basenames(pred_dir, gt_dir)
    report = MetricReport(notes={"sam_deg": SAM_NOTE})

    def one(pair):
        pred_path, gt_path, image_id = pair
        pred, gt = load_image(pred_path), load_image(gt_path)
        if pred.shape != gt.shape:
            raise ShapeError(f"{image_id}: prediction {pred.shape} vs ground truth {gt.shape}")
        return image_id, full_battery(pred, gt)

    if max_workers and max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    for image_id, values in sorted(results):
        report.add(image_id, values)
    return report


def report_to_dict(report: MetricReport) -> dict:
    return {
        "per_image": {k: dict(sorted(v.items())) for k, v in sorted(report.per_image.items())},
        "aggregate": dict(sorted(report.aggregate.items())),
        "notes": dict(sorted(report.notes.items())),
    }


def write_report(report: MetricReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    return path


def read_report(path) -> MetricReport:
    data = json.loads(Path(path).read_text())
    report = MetricReport(notes=dict(data.get("notes", {})))
    for image_id, values in data["per_image"].items():
        report.add(image_id, {k: float(v) for k, v in values.items()})
    return report
