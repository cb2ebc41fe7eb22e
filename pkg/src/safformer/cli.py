"""Command-line entry point: ``safformer <subcommand> ...``.

Exit codes: 0 success, 1 validation failure or bad usage, 2 I/O failure.
Reports are printed as aligned text and written as JSON under the output
directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ablate as ablation
from .analysis import AuditError, audit_params, run_prop_suite, spectrum
from .config import RunConfig, dump_run_config, load_run_config
from .data import DatasetError, load_dataset
from .energy import energy_report, record_firing_rates
from .model import CheckpointError, SAFformer
from .tensor import ConfigError, ShapeError
from .train import evaluate, train_loop

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.set) if args.config else RunConfig()
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    return cfg.validate()


def _out_dir(args, cfg: RunConfig | None = None) -> Path | None:
    if getattr(args, "output_dir", None):
        return Path(args.output_dir)
    return Path(cfg.output_dir) if cfg is not None else None


def _emit(report: dict, text: str, out_dir: Path | None, filename: str) -> None:
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / filename).write_text(json.dumps(report, indent=2) + "\n")


def _load_model(path, cfg: RunConfig | None = None) -> SAFformer:
    model = SAFformer.load(path)
    if cfg is not None and model.config != cfg.model:
        raise ConfigError(f"checkpoint {path} was built for a different model config than --config")
    return model


# -- subcommands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    data = load_dataset(cfg.dataset, Path(args.config).parent if args.config else None)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_run_config(cfg))
    model = SAFformer(cfg.model, seed=cfg.train.seed)
    res = train_loop(model, data, cfg.train, out_dir=out, metrics_stream=sys.stdout)
    summary = {"epochs": len(res.history), "best_train_acc": res.best_acc, "best_epoch": res.best_epoch,
               "checkpoint": str(res.checkpoint)}
    _emit(summary, f"best train accuracy {res.best_acc:.4f} at epoch {res.best_epoch}; "
                   f"checkpoint {res.checkpoint}", out, "train_summary.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args.checkpoint, cfg)
    data = load_dataset(cfg.dataset, Path(args.config).parent)
    ev = evaluate(model, data)
    _emit(ev, f"samples {ev['samples']}  loss {ev['loss']:.6f}  accuracy {ev['accuracy']:.4f}",
          _out_dir(args, cfg), "eval.json")
    return EXIT_OK


def cmd_energy(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args.checkpoint, cfg) if args.checkpoint else SAFformer(cfg.model, seed=cfg.train.seed)
    data = load_dataset(cfg.dataset, Path(args.config).parent)
    if args.samples < 1 or len(data) == 0:
        raise ConfigError("energy needs at least one sample")
    rec = record_firing_rates(model, data.images[:args.samples])
    rep = energy_report(model, rec.firing_rates(), D=args.virtual_timesteps, total_spikes=rec.total_spikes())
    _emit(rep.to_dict(), rep.to_text(), _out_dir(args, cfg), "energy.json")
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _run_config(args)
    res = audit_params(cfg.model)
    _emit(res.to_dict(), res.to_text(), _out_dir(args, cfg), "audit.json")
    return EXIT_OK


def cmd_verify(args) -> int:
    res = run_prop_suite(args.seeds, args.n_tokens, args.channels)
    lines = [f"proposition {r['prop']}: {r['passes']}/{r['seeds']} pass" for r in res.values()]
    for r in res.values():
        for w in r["failures"][:5]:
            lines.append(f"  prop {r['prop']} failure: {json.dumps(w)}")
    _emit(res, "\n".join(lines), _out_dir(args), "verify.json")
    ok = all(r["passes"] == r["seeds"] for r in res.values())
    return EXIT_OK if ok else EXIT_INVALID


def cmd_spectrum(args) -> int:
    model = SAFformer.load(args.checkpoint)
    images = np.load(args.input)
    if images.ndim == 3:
        images = images[None]
    capture: dict = {}
    model.forward(images, capture=capture)
    missing = [layer for layer in args.layer if layer not in capture]
    if missing:
        names = ", ".join(sorted(k for k, v in capture.items() if np.ndim(v) == 5))
        raise ConfigError(f"unknown layer {missing[0]!r}; available: {names}")
    out = _out_dir(args)
    report, lines = {}, [f"{'layer':<28} {'H':>4} {'HF ratio':>10}"]
    for layer in args.layer:
        fmap = np.asarray(capture[layer])
        if fmap.ndim != 5:
            raise ShapeError(f"layer {layer!r} is not a [T, B, C, H, W] feature map")
        res = spectrum(fmap.mean(axis=(0, 1)))
        h = res.magnitude.shape[0]
        report[layer] = {"H": h, "W": res.magnitude.shape[1], "hf_ratio": res.hf_ratio,
                         "magnitude": res.magnitude.tolist()}
        lines.append(f"{layer:<28} {h:>4} {res.hf_ratio:>10.4f}")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"spectrum_{layer.replace('/', '_')}.csv").write_text(res.to_csv())
    _emit(report, "\n".join(lines), out, "spectrum.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    cells = ablation.load_grid(args.grid)
    out = _out_dir(args, cfg)
    rows = ablation.run_ablation(cfg, cells, out, ablation.threads_from_env(), Path(args.config).parent)
    ablation.write_outputs(rows, out)
    print(ablation.to_text(rows))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="safformer", description="Spiking transformer with active filtering attention.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="YAML run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. model.timesteps=4")
        sp.add_argument("--output-dir", help="directory for reports (default: config output_dir)")
        return sp

    with_config(sub.add_parser("train", help="train a model")).set_defaults(fn=cmd_train)

    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = with_config(sub.add_parser("energy", help="energy estimate from measured firing rates"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--samples", type=int, default=32)
    sp.add_argument("--virtual-timesteps", "-D", type=int, default=1)
    sp.set_defaults(fn=cmd_energy)

    with_config(sub.add_parser("audit-params", help="closed-form vs enumerated parameter counts")
                ).set_defaults(fn=cmd_audit)

    sp = sub.add_parser("verify-props", help="random-instance checks of the token-graph properties")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--n-tokens", type=int, default=8)
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--output-dir")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("spectrum", help="magnitude spectra of captured feature maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layer", action="append", required=True, help="captured layer name (repeatable)")
    sp.add_argument("--input", required=True, help=".npy image array [C,H,W] or [B,C,H,W]")
    sp.add_argument("--output-dir")
    sp.set_defaults(fn=cmd_spectrum)

    sp = with_config(sub.add_parser("ablate", help="run an ablation grid"))
    sp.add_argument("--grid", default="full", help=f"preset ({', '.join(ablation.PRESETS)}) or YAML file")
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.fn(args)
    except (CheckpointError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, AuditError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
