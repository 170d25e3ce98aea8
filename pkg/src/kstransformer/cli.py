"""Command-line interface for key-sparse transformer experiments.

Exit codes: 0 success, 1 domain error (one ``error: <Kind>: <message>`` line on
stderr), 2 usage error. Configuration precedence is defaults < ``--config``
file < flags; the resolved configuration is written into the run manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .data import SynthSpec, file_sha256, generate_synthetic, load_dataset, save_dataset
from .errors import KSError
from .export import export_attention, render_grid
from .gradcheck import model_gradcheck
from .model import PRESETS, KSTransformerClassifier, ModelConfig, load_checkpoint, preset, save_checkpoint
from .trainer import CCAB_GRID, SPARSITY_GRID, TrainConfig, evaluate, sweep, threads_from_env, train

log = logging.getLogger("kstransformer")

# dataset used by `sweep` when no --data is given: 10% signal tokens among strong distractors
SWEEP_SYNTH = dict(
    n_samples=300,
    signal_token_count=2,
    noise_token_count=6,
    signal_strength=4.0,
    noise_strength=6.0,
    audio_len=(20, 20),
    text_len=(20, 20),
)


class RunManifest:
    """JSON record of one CLI run, rewritten atomically at start and at finish."""

    def __init__(self, path: Path | None, command: str, argv: list[str], seed: int):
        self.path = path
        self.doc = {
            "command": command,
            "argv": argv,
            "seed": seed,
            "library_version": __version__,
            "status": "running",
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "config": {},
            "inputs": {},
            "outputs": [],
        }

    def add_input(self, path) -> None:
        self.doc["inputs"][str(path)] = file_sha256(path)

    def write(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.doc, indent=2, default=str))
        os.replace(tmp, self.path)

    def finish(self, status: str, error: str | None = None) -> None:
        self.doc.update(status=status, finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
        if error:
            self.doc["error"] = error
        self.write()


def _read_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    unknown = set(doc) - {"preset", "model", "train", "synth"}
    if unknown:
        raise KSError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _model_config(args, file_cfg: dict, audio_dim: int, text_dim: int) -> ModelConfig:
    name = args.preset or file_cfg.get("preset", "tiny")
    overrides = dict(file_cfg.get("model", {}))
    overrides.update(audio_in_dim=audio_dim, text_in_dim=text_dim)
    if getattr(args, "sparse_ratio", None) is not None:
        overrides["sparse_ratio"] = args.sparse_ratio
    return preset(name, **overrides)


def _train_config(args, file_cfg: dict) -> TrainConfig:
    d = dict(file_cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("lr", "lr0"), ("batch_size", "batch_size"), ("repeats", "repeats")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    d["seed"] = args.seed
    d.setdefault("eval_threads", threads_from_env())
    return TrainConfig.from_dict(d)


def _write_history(out: Path, history: list[dict]) -> list[Path]:
    (out / "history.json").write_text(json.dumps(history, indent=2))
    with open(out / "history.csv", "w", newline="") as fh:
        fields = ["epoch", "lr", "train_loss", "dev_wa", "dev_ua"]
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(history)
    return [out / "history.json", out / "history.csv"]


# subcommands


def cmd_synth(args, manifest: RunManifest) -> int:
    d = {}
    if args.spec:
        d.update(json.loads(Path(args.spec).read_text()))
        manifest.add_input(args.spec)
    for key in (
        "n_samples",
        "signal_token_count",
        "noise_token_count",
        "signal_strength",
        "noise_strength",
        "audio_dim",
        "text_dim",
    ):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.class_weights:
        d["class_weights"] = [float(x) for x in args.class_weights.split(",")]
    d["seed"] = args.seed
    spec = SynthSpec.from_dict(d)
    manifest.doc["config"] = {"synth": spec.to_dict()}
    manifest.write()
    ds = generate_synthetic(spec)
    save_dataset(ds, args.out)
    manifest.doc["outputs"].append(args.out)
    print(json.dumps({"samples": len(ds), "histogram": ds.histogram(), "out": args.out}))
    return 0


def cmd_train(args, manifest: RunManifest) -> int:
    file_cfg = _read_config(args.config)
    if args.config:
        manifest.add_input(args.config)
    data = load_dataset(args.data)
    manifest.add_input(args.data)
    tcfg = _train_config(args, file_cfg)
    if args.dev_data:
        train_set, dev_set = data, load_dataset(args.dev_data)
        manifest.add_input(args.dev_data)
    else:
        train_set, dev_set = data.split(tcfg.eval_split, tcfg.seed)
    mcfg = _model_config(args, file_cfg, data.audio_dim, data.text_dim)
    manifest.doc["config"] = {"model": mcfg.to_dict(), "train": tcfg.to_dict()}
    manifest.write()
    model = KSTransformerClassifier(mcfg, args.seed)
    result = train(model, train_set, dev_set, tcfg)
    out = Path(args.out)
    result.best.extra = {"data": str(Path(args.data).resolve()), "train_config": tcfg.to_dict()}
    save_checkpoint(result.best, out)
    manifest.doc["outputs"] += [str(out / "manifest.json"), str(out / "params.bin")]
    manifest.doc["outputs"] += [str(p) for p in _write_history(out, result.history)]
    summary = {"best_epoch": result.best.epoch, "epochs": len(result.history)}
    if result.best_report is not None:
        summary.update(dev_wa=result.best_report.wa, dev_ua=result.best_report.ua)
    manifest.doc["result"] = summary
    print(json.dumps(summary))
    return 0


def cmd_eval(args, manifest: RunManifest) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    manifest.add_input(args.data)
    manifest.doc["config"] = {"model": ckpt.config.to_dict()}
    manifest.write()
    report = evaluate(ckpt.build(), data, threads=threads_from_env())
    manifest.doc["result"] = report.to_dict()
    print(json.dumps(report.to_dict()))
    return 0


def _parse_values(kind: str, raw: str | None):
    if raw is None:
        return list(SPARSITY_GRID if kind == "sparsity" else CCAB_GRID)
    conv = float if kind == "sparsity" else int
    try:
        return [conv(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise KSError(f"cannot parse --values {raw!r} for kind {kind}") from None


def cmd_sweep(args, manifest: RunManifest) -> int:
    file_cfg = _read_config(args.config)
    values = _parse_values(args.kind, args.values)
    tcfg = _train_config(args, file_cfg)
    if args.data:
        data = load_dataset(args.data)
        manifest.add_input(args.data)
    else:
        synth = {**SWEEP_SYNTH, **file_cfg.get("synth", {}), "seed": args.seed}
        data = generate_synthetic(SynthSpec.from_dict(synth))
        manifest.doc["config"]["synth"] = synth
    train_set, dev_set = data.split(tcfg.eval_split, tcfg.seed)
    mcfg = _model_config(args, file_cfg, data.audio_dim, data.text_dim)
    manifest.doc["config"].update(model=mcfg.to_dict(), train=tcfg.to_dict(), kind=args.kind, values=values)
    manifest.write()
    table = sweep(args.kind, values, mcfg, tcfg, train_set, dev_set)
    text = table.to_csv()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(text)
        (out / "sweep.json").write_text(table.to_json())
        manifest.doc["outputs"] += [str(out / "sweep.csv"), str(out / "sweep.json")]
    failed = [r for r in table.rows if r["error"]]
    for r in failed:
        print(f"warning: cell {r['value']} failed: {r['error']}", file=sys.stderr)
    return 0


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    manifest.doc["config"] = {"preset": args.preset, "h": args.h, "tol": args.tol}
    manifest.write()
    report = model_gradcheck(args.preset, seed=args.seed, h=args.h, tol=args.tol)
    manifest.doc["result"] = {"max_rel_error": report.max_rel_error, "passed": report.passed}
    print(report.summary())
    if not report.passed:
        name, idx = report.worst
        print(f"error: GradientMismatch: worst entry {name}{list(map(int, idx))}", file=sys.stderr)
        return 1
    return 0


def cmd_inspect_attn(args, manifest: RunManifest) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data_path = args.data or ckpt.extra.get("data")
    if not data_path:
        raise KSError("no --data given and the checkpoint does not record its training data")
    data = load_dataset(data_path)
    manifest.add_input(data_path)
    manifest.write()
    try:
        sample = data.find(args.sample)
    except KeyError:
        raise KSError(f"sample {args.sample!r} not found in {data_path}") from None
    doc = export_attention(ckpt.build(), sample)
    Path(args.out).write_text(json.dumps(doc))
    manifest.doc["outputs"].append(args.out)
    if args.grid:
        for entry in doc["entries"]:
            print(render_grid(entry))
            print()
    else:
        print(json.dumps({"entries": len(doc["entries"]), "out": args.out}))
    return 0


def cmd_fmt_dump(args, manifest: RunManifest) -> int:
    data = load_dataset(getattr(args, "in"))
    header = {
        "audio_dim": data.audio_dim,
        "text_dim": data.text_dim,
        "label_names": list(data.label_names),
        "records": len(data),
        "histogram": data.histogram(),
    }
    print(json.dumps(header))
    for s in data:
        print(f"{s.id}\t{data.label_names[s.label]}\tL_a={len(s.audio)}\tL_t={len(s.text)}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "inspect-attn": cmd_inspect_attn,
    "fmt-dump": cmd_fmt_dump,
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="kstransformer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, help_):
        subs[name] = sub.add_parser(name, parents=[common], help=help_)
        return subs[name]

    def model_flags(p):
        p.add_argument("--config", help="JSON file with preset/model/train/synth sections")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--sparse-ratio", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--repeats", type=int)

    p = add("train", "train a model on a KSEF file")
    p.add_argument("--data", required=True)
    p.add_argument("--dev-data")
    p.add_argument("--out", required=True)
    model_flags(p)

    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = add("sweep", "sparsity-ratio or CCAB-count ablation")
    p.add_argument("--kind", choices=["sparsity", "ccab"], required=True)
    p.add_argument("--values", help="comma-separated grid (default: the full grid for --kind)")
    p.add_argument("--data")
    p.add_argument("--out")
    model_flags(p)

    p = add("gradcheck", "finite-difference check of the full model")
    p.add_argument("--preset", choices=["tiny", "small"], default="tiny")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)

    p = add("synth", "write a synthetic KSEF dataset")
    p.add_argument("--spec", help="JSON file with SynthSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--signal-tokens", dest="signal_token_count", type=int)
    p.add_argument("--noise-tokens", dest="noise_token_count", type=int)
    p.add_argument("--signal-strength", dest="signal_strength", type=float)
    p.add_argument("--noise-strength", dest="noise_strength", type=float)
    p.add_argument("--audio-dim", dest="audio_dim", type=int)
    p.add_argument("--text-dim", dest="text_dim", type=int)
    p.add_argument("--class-weights", help="comma-separated relative class frequencies")

    p = add("inspect-attn", "export attention weights for one sample as JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="KSEF file holding the sample (default: the checkpoint's training data)")
    p.add_argument("--grid", action="store_true", help="also print plain-text heatmaps")

    p = add("fmt-dump", "print a KSEF header and one summary line per record")
    p.add_argument("--in", required=True)
    return parser, subs


def _manifest_path(args) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if args.command == "train":
        return Path(args.out) / "run_manifest.json"
    if args.command == "sweep" and args.out:
        return Path(args.out) / "run_manifest.json"
    return None


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if extra:
        target = subs[args.command]
        flags = sorted({o for a in target._actions for o in a.option_strings})
        target.print_usage(sys.stderr)
        print(
            f"{target.prog}: error: unrecognized arguments: {' '.join(extra)}; valid flags: {', '.join(flags)}",
            file=sys.stderr,
        )
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    manifest = RunManifest(_manifest_path(args), args.command, argv, args.seed)
    manifest.write()
    try:
        code = COMMANDS[args.command](args, manifest)
    except (KSError, OSError, json.JSONDecodeError) as exc:
        kind = type(exc).__name__
        message = str(exc).replace("\n", " ")
        print(f"error: {kind}: {message}", file=sys.stderr)
        manifest.finish("error", f"{kind}: {message}")
        return 1
    manifest.finish("ok" if code == 0 else "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
