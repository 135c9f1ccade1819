"""Command-line interface.

Subcommands: gen-data, train-synth, finetune-flow, train-motion,
interpolate, eval, ablate-steps. Training commands read a JSON config
mirroring TrainConfig (unknown keys are rejected); selected flags override
file values, and the effective config is echoed into the run directory.

Exit codes: 0 success, 2 bad input, 3 missing dependency, 4 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint
from .dataset import SceneDistribution, load_triplet_folder, write_dataset
from .evaluation import ablate_steps, evaluate_dataset, write_ablation_report, write_eval_report
from .flow import FlowField, flow_to_color, write_flo
from .training import (CachedDataset, DivergenceError, NetTeacher, OracleTeacher,
                       TrainConfig, build_teacher, config_from_dict, config_to_dict,
                       finetune_stage1_teacher, interpolate, model_from_checkpoint,
                       pretrain_teacher, train_stage1_synthesis, train_stage2_motion)

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_MISSING_DEPENDENCY = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    exit_code = EXIT_BAD_INPUT


class MissingDependencyError(Exception):
    exit_code = EXIT_MISSING_DEPENDENCY


def _load_config(path: str | None, overrides: dict) -> TrainConfig:
    data = {}
    if path is not None:
        if not os.path.isfile(path):
            raise UsageError(f"config file {path} does not exist")
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}")
    data.pop("teacher", None)  # CLI-level key, not part of TrainConfig
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return config_from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}")


def _config_teacher_name(path: str | None, flag_value: str | None) -> str | None:
    if flag_value is not None:
        return flag_value
    if path is not None and os.path.isfile(path):
        with open(path) as fh:
            try:
                return json.load(fh).get("teacher")
            except json.JSONDecodeError:
                return None
    return None


def _echo_config(cfg: TrainConfig, out_dir: str, extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = config_to_dict(cfg)
    if extra:
        payload.update(extra)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _open_dataset(path: str, cache: bool = True):
    if not os.path.isdir(path):
        raise UsageError(f"dataset directory {path} does not exist")
    try:
        handle = load_triplet_folder(path)
    except ValueError as e:
        raise UsageError(str(e))
    if len(handle) == 0:
        raise UsageError(f"dataset {path} is empty")
    return CachedDataset(handle) if cache else handle


def _load_ckpt(path: str | None, what: str):
    if path is None:
        raise MissingDependencyError(f"missing {what} checkpoint (pass --ckpt flags)")
    if not os.path.isfile(path):
        raise MissingDependencyError(f"{what} checkpoint {path} does not exist")
    return load_checkpoint(path)


def _read_frame(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise UsageError(f"frame {path} does not exist")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _write_frame(path: str, chw: np.ndarray) -> None:
    arr = np.clip(np.round(chw.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.count < 0:
        raise UsageError(f"--count must be nonnegative, got {args.count}")
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {args.out}: {e}")
    dist = SceneDistribution(size=args.size, max_shapes=args.max_shapes)
    manifest = write_dataset(args.count, dist, args.out, seed=args.seed)
    print(f"wrote {manifest['count']} triplets of {args.size}x{args.size} to {args.out}")
    return EXIT_OK


def _resolve_teacher(name: str | None, teacher_ckpt: str | None, cfg: TrainConfig):
    if name is None:
        raise MissingDependencyError(
            "no teacher configured: pass --teacher oracle|net (or set \"teacher\" "
            "in the config file)")
    if name == "oracle":
        return OracleTeacher()
    if name == "net":
        if teacher_ckpt is None:
            raise MissingDependencyError(
                "--teacher net needs --teacher-ckpt (pretrain via finetune-flow "
                "or train one first)")
        ckpt = _load_ckpt(teacher_ckpt, "teacher")
        teacher = model_from_checkpoint(ckpt, use_ema=True)
        if not isinstance(teacher, NetTeacher):
            raise UsageError(f"{teacher_ckpt} is not a teacher checkpoint")
        return teacher
    raise UsageError(f"unknown teacher {name!r} (expected oracle or net)")


def cmd_train_synth(args) -> int:
    cfg = _load_config(args.config, {"seed": args.seed, "epoch_scale": args.epoch_scale})
    teacher_name = _config_teacher_name(args.config, args.teacher) or "oracle"
    teacher = _resolve_teacher(teacher_name, args.teacher_ckpt, cfg)
    dataset = _open_dataset(args.data)
    _echo_config(cfg, args.out, {"teacher": teacher_name})
    result = train_stage1_synthesis(dataset, teacher, cfg, out_dir=args.out)
    print(f"synthesis training done: best validation PSNR {result.best_metric:.3f} dB; "
          f"checkpoint at {os.path.join(args.out, 'synthesis.ckpt')}")
    return EXIT_OK


def cmd_finetune_flow(args) -> int:
    cfg = _load_config(args.config, {"seed": args.seed, "epoch_scale": args.epoch_scale})
    synth_ckpt = _load_ckpt(args.synth_ckpt, "synthesis")
    synthesis = model_from_checkpoint(synth_ckpt, use_ema=True)
    dataset = _open_dataset(args.data)
    _echo_config(cfg, args.out)
    if args.teacher_ckpt is not None:
        teacher = model_from_checkpoint(_load_ckpt(args.teacher_ckpt, "teacher"))
        if not isinstance(teacher, NetTeacher):
            raise UsageError(f"{args.teacher_ckpt} is not a teacher checkpoint")
    else:
        # no pretrained weights supplied: supervised warm-up stands in
        teacher = build_teacher(cfg)
        pretrain_teacher(dataset, teacher, cfg, out_dir=args.out)
    result = finetune_stage1_teacher(dataset, synthesis, teacher, cfg, out_dir=args.out)
    print(f"teacher fine-tune done: final loss {result.best_metric:.4f}; "
          f"checkpoint at {os.path.join(args.out, 'teacher_finetuned.ckpt')}")
    return EXIT_OK


def cmd_train_motion(args) -> int:
    cfg = _load_config(args.config, {"seed": args.seed, "epoch_scale": args.epoch_scale})
    teacher_name = _config_teacher_name(args.config, args.teacher)
    teacher = _resolve_teacher(teacher_name, args.teacher_ckpt, cfg)
    dataset = _open_dataset(args.data)
    _echo_config(cfg, args.out, {"teacher": teacher_name})
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train_stage2_motion(dataset, teacher, cfg, out_dir=args.out,
                                 resume_from=resume)
    print(f"motion training done: best validation EPE {result.best_metric:.4f} px; "
          f"checkpoint at {os.path.join(args.out, 'motion.ckpt')}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    frame0 = _read_frame(args.frame0)
    frame1 = _read_frame(args.frame1)
    if frame0.shape != frame1.shape:
        raise UsageError(f"frame extents differ: {frame0.shape[1:]} vs {frame1.shape[1:]}")
    motion = _load_ckpt(args.ckpt_motion, "motion")
    synth = _load_ckpt(args.ckpt_synth, "synthesis")
    os.makedirs(args.out, exist_ok=True)
    frame, flows = interpolate(frame0, frame1, motion, synth,
                               num_steps=args.steps, seed=args.seed)
    _write_frame(os.path.join(args.out, "out.png"), frame)
    if args.dump_flows:
        write_flo(os.path.join(args.out, "flow_t0.flo"), flows.to_frame0)
        write_flo(os.path.join(args.out, "flow_t1.flo"), flows.to_frame1)
        mag = max(flows.to_frame0.magnitude().max(), flows.to_frame1.magnitude().max())
        for name, f in (("flow_t0.png", flows.to_frame0), ("flow_t1.png", flows.to_frame1)):
            Image.fromarray(flow_to_color(f, max_mag=float(mag) or 1.0)).save(
                os.path.join(args.out, name))
    print(f"interpolated frame written to {os.path.join(args.out, 'out.png')}")
    return EXIT_OK


def _nets_for_eval(args):
    motion_ckpt = _load_ckpt(args.ckpt_motion, "motion")
    synth_ckpt = _load_ckpt(args.ckpt_synth, "synthesis")
    motion_net = model_from_checkpoint(motion_ckpt)
    synth_net = model_from_checkpoint(synth_ckpt)
    train_res = motion_ckpt.config.get("crop_size", 64)
    return motion_net, synth_net, train_res


def cmd_eval(args) -> int:
    dataset = _open_dataset(args.data)
    motion_net, synth_net, train_res = _nets_for_eval(args)
    report = evaluate_dataset(dataset, motion_net, synth_net, num_steps=args.steps,
                              seed=args.seed, train_resolution=train_res)
    write_eval_report(report, args.report)
    agg = report.aggregate()
    print(f"eval done on {agg['count']} samples: PSNR {agg['psnr']:.3f} dB "
          f"(overlay {agg['overlay_psnr']:.3f}), EPE {agg['epe']:.3f} px "
          f"(zero-flow {agg['zero_flow_epe']:.3f}); report at {args.report}")
    return EXIT_OK


def cmd_ablate_steps(args) -> int:
    try:
        counts = [int(s) for s in args.steps.split(",") if s]
    except ValueError:
        raise UsageError(f"--steps must be a comma-separated list of ints, got {args.steps!r}")
    if not counts:
        raise UsageError("--steps list is empty")
    dataset = _open_dataset(args.data)
    motion_net, synth_net, train_res = _nets_for_eval(args)
    reports = ablate_steps(dataset, motion_net, synth_net, counts, seed=args.seed,
                           train_resolution=train_res)
    write_ablation_report(reports, args.report)
    print(f"step ablation over {counts} written to {args.report}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="midflow",
        description="Frame interpolation with diffusion-generated bi-directional flows.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic triplet dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-shapes", type=int, default=6)
    g.set_defaults(fn=cmd_gen_data)

    def train_common(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--epoch-scale", type=float, default=None, dest="epoch_scale")

    ts = sub.add_parser("train-synth", help="stage 1: train the synthesis network")
    train_common(ts)
    ts.add_argument("--teacher", choices=["oracle", "net"], default=None)
    ts.add_argument("--teacher-ckpt", default=None)
    ts.set_defaults(fn=cmd_train_synth)

    ff = sub.add_parser("finetune-flow", help="stage 1: fine-tune the teacher "
                                              "against the frozen synthesizer")
    train_common(ff)
    ff.add_argument("--synth-ckpt", default=None)
    ff.add_argument("--teacher-ckpt", default=None)
    ff.set_defaults(fn=cmd_finetune_flow)

    tm = sub.add_parser("train-motion", help="stage 2: train the flow diffusion model")
    train_common(tm)
    tm.add_argument("--teacher", choices=["oracle", "net"], default=None)
    tm.add_argument("--teacher-ckpt", default=None)
    tm.add_argument("--resume", default=None)
    tm.set_defaults(fn=cmd_train_motion)

    it = sub.add_parser("interpolate", help="synthesize the frame between two images")
    it.add_argument("--frame0", required=True)
    it.add_argument("--frame1", required=True)
    it.add_argument("--out", required=True)
    it.add_argument("--ckpt-motion", required=True)
    it.add_argument("--ckpt-synth", required=True)
    it.add_argument("--steps", type=int, default=8)
    it.add_argument("--seed", type=int, default=0)
    it.add_argument("--dump-flows", action="store_true")
    it.set_defaults(fn=cmd_interpolate)

    ev = sub.add_parser("eval", help="score a dataset against ground truth")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt-motion", required=True)
    ev.add_argument("--ckpt-synth", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--steps", type=int, default=8)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(fn=cmd_eval)

    ab = sub.add_parser("ablate-steps", help="eval at several denoising step counts")
    ab.add_argument("--data", required=True)
    ab.add_argument("--ckpt-motion", required=True)
    ab.add_argument("--ckpt-synth", required=True)
    ab.add_argument("--steps", default="1,8,20")
    ab.add_argument("--report", required=True)
    ab.add_argument("--seed", type=int, default=0)
    ab.set_defaults(fn=cmd_ablate_steps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, MissingDependencyError) as e:
        print(f"midflow {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except DivergenceError as e:
        print(f"midflow {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
