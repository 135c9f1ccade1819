"""Dataset evaluation and the denoising-step-count sweep.

Per sample: interpolate with a per-sample noise seed (hash of run seed and
index, so sweeps over step counts are paired comparisons), then score PSNR,
SSIM, a perceptual-feature distance, and flow end-point error against the
ground truth. The trivial overlay 0.5*(I0+I1) and the zero-flow EPE serve
as baselines.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import FeatureExtractor, epe, perceptual_loss, psnr, ssim
from .rng import mix_seed
from .tensor import Tensor
from .training import interpolate_frames


@dataclass
class SampleScore:
    index: int
    psnr: float
    ssim: float
    perceptual: float
    epe: float
    overlay_psnr: float
    overlay_ssim: float
    zero_flow_epe: float


@dataclass
class EvalReport:
    num_steps: int
    seed: int
    samples: list[SampleScore] = field(default_factory=list)

    def aggregate(self) -> dict:
        agg = {}
        for key in ("psnr", "ssim", "perceptual", "epe",
                    "overlay_psnr", "overlay_ssim", "zero_flow_epe"):
            agg[key] = float(np.mean([getattr(s, key) for s in self.samples]))
        agg["count"] = len(self.samples)
        agg["num_steps"] = self.num_steps
        return agg


def _hwc(chw: np.ndarray) -> np.ndarray:
    return chw.transpose(1, 2, 0)


def evaluate_dataset(dataset, motion_net, synth_net, *, num_steps: int = 8,
                     seed: int = 0, indices=None, train_resolution: int = 64,
                     extractor: FeatureExtractor | None = None) -> EvalReport:
    """Score every (or the given) sample of a triplet dataset."""
    if extractor is None:
        extractor = FeatureExtractor(seed=0)
    if indices is None:
        indices = range(len(dataset))
    indices = list(indices)
    if not indices:
        raise ValueError("evaluation needs at least one sample")
    report = EvalReport(num_steps=num_steps, seed=seed)
    for i in indices:
        t = dataset.load(i)
        frame, flows = interpolate_frames(
            motion_net, synth_net, t.frame0, t.frame1,
            num_steps=num_steps, seed=mix_seed(seed, i),
            train_resolution=train_resolution)
        target = t.frame_mid
        overlay = 0.5 * (t.frame0 + t.frame1)
        with T.no_grad():
            perc = perceptual_loss(Tensor(target[None]), Tensor(frame[None]),
                                   extractor).item()
        gt0 = t.flows.to_frame0.data
        gt1 = t.flows.to_frame1.data
        err = 0.5 * (epe(flows.to_frame0.data, gt0) + epe(flows.to_frame1.data, gt1))
        zero = 0.5 * (epe(np.zeros_like(gt0), gt0) + epe(np.zeros_like(gt1), gt1))
        report.samples.append(SampleScore(
            index=i,
            psnr=psnr(_hwc(frame), _hwc(target)),
            ssim=ssim(_hwc(frame), _hwc(target)),
            perceptual=perc,
            epe=err,
            overlay_psnr=psnr(_hwc(overlay), _hwc(target)),
            overlay_ssim=ssim(_hwc(overlay), _hwc(target)),
            zero_flow_epe=zero,
        ))
    return report


def write_eval_report(report: EvalReport, path: str) -> None:
    """Fixed-width text table plus a machine-readable JSON twin."""
    agg = report.aggregate()
    lines = [
        f"evaluation: {agg['count']} samples, {report.num_steps} denoising steps, "
        f"seed {report.seed}",
        "",
        f"{'sample':>8} {'psnr':>8} {'ssim':>7} {'percep':>8} {'epe':>7} "
        f"{'ov-psnr':>8} {'ov-ssim':>8} {'zf-epe':>7}",
    ]
    for s in report.samples:
        lines.append(f"{s.index:>8d} {s.psnr:>8.3f} {s.ssim:>7.4f} {s.perceptual:>8.4f} "
                     f"{s.epe:>7.3f} {s.overlay_psnr:>8.3f} {s.overlay_ssim:>8.4f} "
                     f"{s.zero_flow_epe:>7.3f}")
    lines.append("")
    lines.append(f"{'mean':>8} {agg['psnr']:>8.3f} {agg['ssim']:>7.4f} "
                 f"{agg['perceptual']:>8.4f} {agg['epe']:>7.3f} "
                 f"{agg['overlay_psnr']:>8.3f} {agg['overlay_ssim']:>8.4f} "
                 f"{agg['zero_flow_epe']:>7.3f}")
    lines.append("")
    lines.append("baseline row: overlay = 0.5*frame0 + 0.5*frame1; "
                 "zf-epe = end-point error of the all-zero flow")
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(path + ".json", "w") as fh:
        json.dump({"aggregate": agg,
                   "samples": [vars(s) for s in report.samples]}, fh, indent=2)


def ablate_steps(dataset, motion_net, synth_net, step_counts, *, seed: int = 0,
                 indices=None, train_resolution: int = 64) -> dict[int, EvalReport]:
    """Evaluate at several denoising step counts with shared per-sample seeds.

    The same noise seed is used per sample across counts, so differences are
    attributable to the step plan alone.
    """
    reports = {}
    for k in step_counts:
        reports[int(k)] = evaluate_dataset(
            dataset, motion_net, synth_net, num_steps=int(k), seed=seed,
            indices=indices, train_resolution=train_resolution)
    return reports


def write_ablation_report(reports: dict[int, "EvalReport"], path: str) -> None:
    """Step-count comparison table; the trend is reported, not judged."""
    counts = sorted(reports)
    lines = [
        "denoising-step ablation (paired noise seeds per sample)",
        "",
        f"{'steps':>6} {'psnr':>8} {'ssim':>7} {'percep':>8} {'epe':>7}",
    ]
    for k in counts:
        agg = reports[k].aggregate()
        lines.append(f"{k:>6d} {agg['psnr']:>8.3f} {agg['ssim']:>7.4f} "
                     f"{agg['perceptual']:>8.4f} {agg['epe']:>7.3f}")
    best = min(counts, key=lambda k: reports[k].aggregate()["perceptual"])
    lines.append("")
    lines.append(f"lowest perceptual distance at {best} steps (reported, not asserted)")
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(path + ".json", "w") as fh:
        json.dump({str(k): reports[k].aggregate() for k in counts}, fh, indent=2)
