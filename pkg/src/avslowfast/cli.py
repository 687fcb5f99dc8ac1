"""``avsf`` command line: shapes | flops | melspec | synth | train | eval | probe | gradcheck.

Common flags are ``--config PATH``, ``--out DIR``, ``--seed N`` and
``--preset NAME``; any other ``--section.key VALUE`` (or ``--key VALUE`` when
the key is unique) overrides the configuration. Errors go to stderr as one
line ``error: key=<key> <message>`` (configuration, exit 2) or
``error: <message>`` (anything else, exit 1).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_thread_cap() -> None:
    # must run before numpy is first imported
    cap = os.environ.get("AVSF_THREADS")
    if cap:
        if not cap.isdigit() or int(cap) < 1:
            raise SystemExit(f"error: key=AVSF_THREADS must be a positive integer, got {cap!r}")
        for var in THREAD_VARS:
            os.environ[var] = cap


COMMANDS = ("shapes", "flops", "melspec", "synth", "train", "eval", "probe", "gradcheck")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avsf", description="Audiovisual SlowFast networks on a numpy engine.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("input", nargs="?", help="WAV file for melspec")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--out", help="run directory (default: run.out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset")
    p.add_argument("--resample", action="store_true", help="melspec: resample non-16 kHz input")
    p.add_argument("--suite", default="all", help="gradcheck: all | ops | fusion | <case>")
    p.add_argument("--seeds", type=int, default=None, help="gradcheck: number of seeds (default 20)")
    return p


def _overrides(extra: list[str]) -> dict[str, str]:
    from .model.config import ConfigError

    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(token, "expected --key value")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _datasets(cfg):
    from dataclasses import replace

    from .synth import load, synthesize

    if cfg.run.data_dir:
        root = Path(cfg.run.data_dir)
        return list(load(root / "train" / "manifest.csv")), list(load(root / "val" / "manifest.csv"))
    val_spec = replace(cfg.data, split="val", clips_per_class=cfg.run.val_clips_per_class)
    return synthesize(cfg.data), synthesize(val_spec)


def _write_json(path: Path, payload: dict) -> None:
    import json

    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _report(cfg, out: Path, kind: str) -> int:
    from .model.shapes import count_flops, infer_shapes

    report = infer_shapes(cfg.model) if kind == "shapes" else count_flops(cfg.model)
    table = report.to_table()
    (out / f"{kind}.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / f"{kind}.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    if kind == "flops":
        sys.stdout.write(f"total GFLOPs {report.gflops():.3f}  audio fraction {report.audio_fraction:.4f}\n")
    return 0


def _melspec(cfg, out: Path, wav: str | None, resample: bool) -> int:
    from .audio import log_mel, read_wav
    from .serialization import tensor_to_bytes

    if not wav:
        raise ValueError("melspec needs a WAV path")
    spec = log_mel(read_wav(wav, resample=resample), cfg.model.T_a, cfg.model.F_mel)
    (out / "melspec.avsf").write_bytes(tensor_to_bytes(spec.bins))
    rows, cols = spec.shape
    print(f"log-mel {rows}x{cols} hop {spec.hop_seconds} s window {spec.window_seconds} s -> "
          f"{out / 'melspec.avsf'}")
    return 0


def _synth(cfg, out: Path) -> int:
    from dataclasses import replace

    from .synth import generate

    root = out / "data"
    for spec in (cfg.data, replace(cfg.data, split="val", clips_per_class=cfg.run.val_clips_per_class)):
        manifest = generate(spec, root)
        print(f"{spec.split}: {spec.num_clips} clips -> {manifest}")
    return 0


def _train(cfg, out: Path) -> int:
    from .model.network import build_model
    from .training import evaluate, train

    train_set, val_set = _datasets(cfg)
    model = build_model(cfg.model, cfg.run.seed)
    state = train(model, train_set, cfg.train, val=val_set, out_dir=out)
    acc = evaluate(model, val_set, cfg.train.clips_per_video)
    _write_json(out / "summary.json", {"val_top1": acc, "iterations": state.iteration,
                                       "final_loss": state.log[-1]["loss"]})
    print(f"trained {state.iteration} iterations; val top-1 {acc:.4f}")
    return 0


def _load_model(cfg):
    from .model.network import build_model
    from .training import load_checkpoint

    model = build_model(cfg.model, cfg.run.seed)
    if cfg.run.checkpoint:
        load_checkpoint(model, cfg.run.checkpoint)
    return model


def _eval(cfg, out: Path) -> int:
    from .model.config import ConfigError
    from .training import evaluate

    if not cfg.run.checkpoint:
        raise ConfigError("run.checkpoint", "eval needs a checkpoint")
    model = _load_model(cfg)
    _, val_set = _datasets(cfg)
    acc = evaluate(model, val_set, cfg.train.clips_per_video)
    _write_json(out / "eval.json", {"val_top1": acc, "clips_per_video": cfg.train.clips_per_video})
    print(f"val top-1 {acc:.4f}")
    return 0


def _probe(cfg, out: Path) -> int:
    from .avsync import linear_probe, ssl_pretrain, sync_accuracy

    train_set, val_set = _datasets(cfg)
    model = _load_model(cfg)
    summary = {}
    if cfg.run.pretrain:
        ssl_pretrain(model, train_set, cfg.train.replace(n_max=cfg.run.pretrain_iters),
                     rot_weight=cfg.run.rot_weight, out_dir=out)
        if model.avs_heads:
            summary["sync_accuracy"] = sync_accuracy(model, val_set, seed=cfg.run.seed)
    summary["probe_top1"] = linear_probe(model, train_set, val_set, cfg.probe)
    _write_json(out / "probe.json", summary)
    print("  ".join(f"{k} {v:.4f}" for k, v in sorted(summary.items())))
    return 0


def _gradcheck(out: Path, suite: str, seeds: int | None) -> int:
    from .gradsuite import DEFAULT_SEEDS, report, run_suite

    results = run_suite(suite, DEFAULT_SEEDS if seeds is None else seeds)
    text = report(results)
    (out / "gradcheck.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0 if all(r.passed for r in results) else 1


def run(argv: list[str]) -> int:
    args, extra = _parser().parse_known_args(argv)
    from .config_file import load_run_config, write_resolved
    from .model.config import ConfigError

    try:
        cfg = load_run_config(args.config, _overrides(extra), preset_name=args.preset, seed=args.seed)
        out = Path(args.out or cfg.run.out)
        resolved = write_resolved(cfg, out)
        print(f"config: {resolved}", file=sys.stderr)
        if args.command in ("shapes", "flops"):
            return _report(cfg, out, args.command)
        if args.command == "melspec":
            return _melspec(cfg, out, args.input, args.resample)
        if args.command == "gradcheck":
            return _gradcheck(out, args.suite, args.seeds)
        return {"synth": _synth, "train": _train, "eval": _eval, "probe": _probe}[args.command](cfg, out)
    except ConfigError as err:
        print(f"error: key={err.key} {err.message}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as err:
        print("error: " + str(err).replace("\n", " "), file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
