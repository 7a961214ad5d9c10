"""Command-line pipeline: synth, merge-plan, train, compress, eval, ablate.

Exit codes::

    0  success
    1  ablation direction check failed, or an unexpected error
    2  invalid spec, flags or config
    3  unreadable capture
    4  merge plan / dictionary does not match the capture
    5  dictionary index space overflow
    6  snapshot or dictionary schema mismatch

Every run writes ``<subcommand>.config.json`` with the fully resolved settings
next to its outputs.  Settings come from defaults, then ``--config`` (a JSON
object whose keys are the long flag names with dashes as underscores), then
explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .calib_io import (
    CaptureError,
    GaussianMixture,
    Kind,
    LayerDrift,
    PlantedDictionary,
    SyntheticSpec,
    capture_to_bytes,
    generate_synthetic,
    read_capture,
)
from .codec import CodecConfig, CodecError
from .layer_merge import InvalidMergePlan, MergePlan, build_merge_plan
from .neural_dict import TrainConfig, train_on_merged_layers
from .offline import DictionaryFileError, OfflineDictionary
from .runtime import CsrCache, IndexSpaceOverflow, SnapshotError

log = logging.getLogger("csrkv")

EXIT_OK, EXIT_FAIL, EXIT_SPEC, EXIT_CAPTURE, EXIT_MISMATCH, EXIT_OVERFLOW, EXIT_SCHEMA = range(7)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def write_atomic(path, data) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("CSR_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise CliError(EXIT_SPEC, f"threads must be an integer, got {value!r}") from None
    if n < 1:
        raise CliError(EXIT_SPEC, f"threads must be >= 1, got {n}")
    return n


def _load_capture(path):
    try:
        return read_capture(path)
    except (CaptureError, OSError) as exc:
        raise CliError(EXIT_CAPTURE, f"cannot read capture {path}: {exc}") from exc


def _load_dictionary(path) -> OfflineDictionary:
    try:
        return OfflineDictionary.load(path)
    except OSError as exc:
        raise CliError(EXIT_CAPTURE, f"cannot read dictionary {path}: {exc}") from exc
    except DictionaryFileError as exc:
        raise CliError(EXIT_SCHEMA, f"dictionary {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommand definitions: (flag, default, argparse kwargs)
# ---------------------------------------------------------------------------

SPECS = {
    "synth": [
        ("--generator", "planted", dict(choices=["planted", "gmm", "drift"])),
        ("--layers", 4, dict(type=int)),
        ("--heads", 2, dict(type=int)),
        ("--head-dim", 32, dict(type=int)),
        ("--tokens", 1000, dict(type=int, help="vectors per (layer, head)")),
        ("--seed", 0, dict(type=int)),
        ("--kind", "key", dict(choices=["key", "value"])),
        ("--dtype", "f32", dict(choices=["f32", "f16"])),
        ("--model-name", "synthetic", dict()),
        ("--atoms", 64, dict(type=int, help="planted: atoms per head")),
        ("--sparsity", 4, dict(type=int, help="planted: atoms per vector")),
        ("--noise", 0.0, dict(type=float, help="planted: noise sigma")),
        ("--chunks", 1, dict(type=int, help="planted: independent channel chunks")),
        ("--components", None, dict(type=int, help="gmm/drift: cluster count (default 8 / 4)")),
        ("--spread", None, dict(type=float, help="gmm/drift: cluster std (default 0.1 / 0.02)")),
        ("--drift-rate", 0.0, dict(type=float)),
        ("--breaks", "", dict(help="drift: comma-separated break layers")),
        ("--out", "capture.csrc", dict(help="output CSRC path")),
    ],
    "merge-plan": [
        ("capture", None, dict()),
        ("--delta1", 0.20, dict(type=float)),
        ("--delta2", 1.0, dict(type=float)),
        ("--head-mode", "pool", dict(choices=["pool", "per-head"])),
        ("--sample-cap", 10000, dict(type=int)),
        ("--bins", 200, dict(type=int)),
        ("--seed", 0, dict(type=int)),
        ("--out", "merge_plan.json", dict(help="output plan path")),
    ],
    "train": [
        ("capture", None, dict()),
        ("--plan", None, dict(help="merge plan JSON; default one group per layer")),
        ("--atoms", None, dict(type=int, help="atoms per (group, head, chunk)")),
        ("--s", None, dict(type=int, help="MP level during training")),
        ("--sn", None, dict(type=int, help="chunks per head vector")),
        ("--epochs", None, dict(type=int)),
        ("--batch-size", None, dict(type=int)),
        ("--lr", None, dict(type=float)),
        ("--no-div", False, dict(action="store_true", help="disable the diversity loss")),
        ("--head-shared", False, dict(action="store_true", help="one dictionary for all heads")),
        ("--max-samples", 100000, dict(type=int)),
        ("--validation-fraction", 0.1, dict(type=float)),
        ("--seed", 0, dict(type=int)),
        ("--out-dir", "train_out", dict()),
    ],
    "compress": [
        ("capture", None, dict()),
        ("--dict", None, dict(help="CSRD offline dictionary")),
        ("--s", 8, dict(type=int)),
        ("--sn", 1, dict(type=int)),
        ("--online-size", 256, dict(type=int)),
        ("--outlier-threshold", 0.99, dict(type=float)),
        ("--prompt-tokens", None, dict(type=int, help="rows prefilled; the rest are appended")),
        ("--seed", 0, dict(type=int)),
        ("--out-dir", "compress_out", dict()),
    ],
    "eval": [
        ("--snapshot", None, dict(help="CSRS cache snapshot")),
        ("--capture", None, dict()),
        ("--dict", None, dict(help="CSRD offline dictionary")),
        ("--sweep-s", None, dict(type=_int_list, help="e.g. 2,4,8,16")),
        ("--attention", False, dict(action="store_true", help="include attention fidelity")),
        ("--causal", False, dict(action="store_true")),
        ("--outlier-threshold", None, dict(type=float)),
        ("--max-rows", 512, dict(type=int)),
        ("--footprint", None, dict(type=_int_list, help="sequence lengths for the footprint curve")),
        ("--online-size", 256, dict(type=int)),
        ("--seed", 0, dict(type=int)),
        ("--out-dir", "eval_out", dict()),
    ],
    "ablate": [
        ("--seed", 0, dict(type=int)),
        ("--out-dir", "ablate_out", dict()),
    ],
}

HELP = {
    "synth": "generate a synthetic capture",
    "merge-plan": "group layers by distribution similarity",
    "train": "train offline dictionaries",
    "compress": "compress a capture into a cache snapshot",
    "eval": "fidelity sweeps and footprint curves",
    "ablate": "directional ablation checks",
}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csrkv", description="Sparse-representation KV cache toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in SPECS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="JSON config; keys are flag names with underscores")
        p.add_argument("--threads", type=int, default=None, help="worker threads (env CSR_THREADS)")
        for flag, default, kw in flags:
            if flag.startswith("--"):
                # None marks "not given" so config values are not overridden
                p.add_argument(flag, default=None, **kw)
            else:
                p.add_argument(flag, nargs="?", default=None, **kw)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config, then flags given on the command line."""
    flags = SPECS[command]
    settings = {_dest(f): d for f, d, _ in flags}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_SPEC, f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise CliError(EXIT_SPEC, "config must be a JSON object")
        unknown = sorted(set(cfg) - set(settings) - {"threads"})
        if unknown:
            raise CliError(EXIT_SPEC, f"unknown config keys for {command}: {', '.join(unknown)}")
        if "threads" in cfg and args.threads is None:
            args.threads = cfg.pop("threads")
        for k, v in cfg.items():
            if k in ("sweep_s", "footprint") and isinstance(v, str):
                v = _int_list(v)
            settings[k] = v
    for k in settings:
        v = getattr(args, k, None)
        if v is not None and v is not False:
            settings[k] = v
    for f, _, _ in flags:
        if not f.startswith("--") and settings[_dest(f)] is None:
            raise CliError(EXIT_SPEC, f"missing required argument: {f}")
    settings["threads"] = _threads(args.threads)
    return settings


def _without_timing(d: dict) -> dict:
    # wall-clock timings would make reruns differ
    d.pop("epoch_seconds", None)
    return d


def _echo(out_dir: Path, command: str, settings: dict) -> None:
    write_atomic(out_dir / f"{command}.config.json", _json_text({"command": command, **settings}))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _or(value, default):
    return default if value is None else value


def cmd_synth(o: dict) -> int:
    if o["generator"] == "planted":
        gen = PlantedDictionary(o["atoms"], o["sparsity"], o["noise"], o["chunks"])
    elif o["generator"] == "gmm":
        o["components"], o["spread"] = _or(o["components"], 8), _or(o["spread"], 0.1)
        gen = GaussianMixture(o["components"], o["spread"])
    else:
        breaks = tuple(o["breaks"]) if isinstance(o["breaks"], list) else tuple(_int_list(o["breaks"]))
        d = LayerDrift(o["drift_rate"])
        o["components"], o["spread"] = _or(o["components"], d.num_components), _or(o["spread"], d.spread)
        gen = LayerDrift(o["drift_rate"], o["components"], o["spread"], breaks)
    try:
        spec = SyntheticSpec(
            num_layers=o["layers"], num_heads=o["heads"], head_dim=o["head_dim"],
            tokens_per_layer=o["tokens"], generator=gen, seed=o["seed"],
            kind=Kind(o["kind"]), dtype=o["dtype"], model_name=o["model_name"],
        )
        spec.validate()
        dataset = generate_synthetic(spec)
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_SPEC, f"invalid synthetic spec: {exc}") from exc
    out = Path(o["out"])
    write_atomic(out, capture_to_bytes(dataset))
    _echo(out.parent, "synth", o)
    print(f"wrote {out} ({len(dataset)} blocks)")
    return EXIT_OK


def cmd_merge_plan(o: dict) -> int:
    dataset = _load_capture(o["capture"])
    try:
        plan = build_merge_plan(
            dataset, delta1=o["delta1"], delta2=o["delta2"], head_mode=o["head_mode"],
            sample_cap=o["sample_cap"], seed=o["seed"], bins=o["bins"],
        )
    except ValueError as exc:
        raise CliError(EXIT_SPEC, str(exc)) from exc
    out = Path(o["out"])
    write_atomic(out, plan.dumps())
    _echo(out.parent, "merge-plan", o)
    for i, g in enumerate(plan.groups):
        print(f"group {i}: layers {g[0]}..{g[-1]}" if len(g) > 1 else f"group {i}: layer {g[0]}")
    return EXIT_OK


def cmd_train(o: dict) -> int:
    dataset = _load_capture(o["capture"])
    kind = dataset.header.kind
    if o["plan"]:
        try:
            with open(o["plan"]) as fh:
                plan = MergePlan.from_json(json.load(fh))
        except OSError as exc:
            raise CliError(EXIT_CAPTURE, f"cannot read plan {o['plan']}: {exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_SPEC, f"invalid merge plan {o['plan']}: {exc}") from exc
    else:
        plan = MergePlan.singletons(dataset.header.num_layers, kind)
    try:
        plan.validate(dataset.header.num_layers)
    except InvalidMergePlan as exc:
        raise CliError(EXIT_MISMATCH, f"merge plan does not match capture: {exc}") from exc
    overrides = {k: o[src] for k, src in (("num_atoms", "atoms"), ("s_train", "s"), ("s_n", "sn"),
                                          ("epochs", "epochs"), ("batch_size", "batch_size"),
                                          ("learning_rate", "lr")) if o[src] is not None}
    try:
        cfg = TrainConfig.for_kind(kind, seed=o["seed"], use_div=not o["no_div"], **overrides)
        offline, reports = train_on_merged_layers(
            dataset, plan, cfg, head_shared=o["head_shared"], max_samples=o["max_samples"],
            validation_fraction=o["validation_fraction"], threads=o["threads"],
        )
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_SPEC, str(exc)) from exc
    out = Path(o["out_dir"])
    write_atomic(out / "dictionary.csrd", offline.to_bytes())
    report = {
        "schema_version": ev.SCHEMA_VERSION,
        "train_config": offline.train_config,
        "reports": [
            {"group": g, "head": h, "chunk": c, **_without_timing(r.to_json())} for (g, h, c), r in sorted(
                reports.items(), key=lambda kv: (kv[0][0], str(kv[0][1]), kv[0][2]))
        ],
    }
    write_atomic(out / "train_report.json", _json_text(report))
    _echo(out, "train", o)
    print(f"wrote {out / 'dictionary.csrd'} ({len(offline.entries)} entries, sha256 {offline.sha256()[:12]})")
    return EXIT_OK


def cmd_compress(o: dict) -> int:
    dataset = _load_capture(o["capture"])
    hd = dataset.header.head_dim
    offline = _load_dictionary(o["dict"]) if o["dict"] else None
    try:
        cfg = CodecConfig(o["s"], o["sn"], hd, o["outlier_threshold"])
    except (ValueError, CodecError) as exc:
        raise CliError(EXIT_SPEC, f"invalid codec settings: {exc}") from exc
    if offline is not None:
        if offline.head_dim != hd or offline.s_n != cfg.s_n:
            raise CliError(EXIT_MISMATCH, f"dictionary (head_dim={offline.head_dim}, s_n={offline.s_n}) "
                                          f"does not match capture/codec (head_dim={hd}, s_n={cfg.s_n})")
        try:
            offline.plan.validate(dataset.header.num_layers)
        except InvalidMergePlan as exc:
            raise CliError(EXIT_MISMATCH, f"dictionary merge plan does not match capture: {exc}") from exc
    cache = CsrCache(cfg, offline, o["online_size"], o["seed"], kind=dataset.header.kind)
    try:
        for block in dataset.blocks:
            X = np.asarray(block.vectors)
            n = X.shape[0] if o["prompt_tokens"] is None else min(o["prompt_tokens"], X.shape[0])
            cache.prefill_compress(block.layer, block.head, X[:n])
            for x in X[n:]:
                cache.append_token(block.layer, block.head, x)
    except IndexSpaceOverflow as exc:
        raise CliError(EXIT_OVERFLOW, str(exc)) from exc
    except KeyError as exc:
        raise CliError(EXIT_MISMATCH, f"dictionary does not cover the capture: {exc}") from exc
    except (ValueError, CodecError) as exc:
        raise CliError(EXIT_SPEC, str(exc)) from exc
    out = Path(o["out_dir"])
    write_atomic(out / "cache.csrs", cache.to_bytes())
    report = cache.memory_report()
    write_atomic(out / "memory_report.json", _json_text(report.to_json()))
    _echo(out, "compress", o)
    print(f"equivalent bits/channel {report.equivalent_bits_per_channel:g}, "
          f"compression ratio {report.compression_ratio:.3f}")
    return EXIT_OK


def cmd_eval(o: dict) -> int:
    if not (o["snapshot"] or o["capture"]):
        raise CliError(EXIT_SPEC, "eval needs --snapshot or --capture")
    dataset = _load_capture(o["capture"]) if o["capture"] else None
    offline = _load_dictionary(o["dict"]) if o["dict"] else None
    out = Path(o["out_dir"])
    result: dict = {"schema_version": ev.SCHEMA_VERSION}

    if o["snapshot"]:
        try:
            cache = CsrCache.load(o["snapshot"], offline)
        except OSError as exc:
            raise CliError(EXIT_CAPTURE, f"cannot read snapshot {o['snapshot']}: {exc}") from exc
        except (SnapshotError, CodecError, ValueError, KeyError) as exc:
            raise CliError(EXIT_SCHEMA, f"snapshot {o['snapshot']}: {exc}") from exc
        lanes = []
        for layer, head in cache.lanes():
            Xr = cache.decode_range(layer, head)
            row = {"layer": layer, "head": head, "tokens": int(Xr.shape[0])}
            if dataset is not None:
                try:
                    X = np.asarray(dataset.block(layer, head).vectors)
                except KeyError as exc:
                    raise CliError(EXIT_MISMATCH, f"capture lacks lane ({layer}, {head})") from exc
                if X.shape != Xr.shape:
                    raise CliError(EXIT_MISMATCH, f"lane ({layer}, {head}): capture {X.shape} vs cache {Xr.shape}")
                chunks = list(cache.dictionary(layer, head).chunks)
                m = ev.reconstruction_metrics(X, cache.codes(layer, head), chunks, cache.cfg)
                row.update(mse=m.mse, mean_cosine=m.mean_cosine, outlier_fraction=m.outlier_fraction)
            lanes.append(row)
        result["lanes"] = lanes
        result["memory_report"] = cache.memory_report().to_json()

    if o["sweep_s"]:
        if dataset is None or offline is None:
            raise CliError(EXIT_SPEC, "--sweep-s needs --capture and --dict")
        if offline.head_dim != dataset.header.head_dim:
            raise CliError(EXIT_MISMATCH, "dictionary head_dim does not match capture")
        cfg = CodecConfig(max(o["sweep_s"]), offline.s_n, offline.head_dim, o["outlier_threshold"])
        try:
            report = ev.sweep_s(dataset, offline, o["sweep_s"], cfg, max_rows=o["max_rows"],
                                seed=o["seed"], causal=o["causal"])
        except KeyError as exc:
            raise CliError(EXIT_MISMATCH, f"dictionary does not cover the capture: {exc}") from exc
        if not o["attention"]:
            for row in report.rows:
                row["attn_cosine"] = row["attn_max_abs"] = ""
        write_atomic(out / "sweep.csv", report.to_csv())
        result["sweep"] = report.rows

    if o["footprint"]:
        if dataset is None and offline is None:
            raise CliError(EXIT_SPEC, "--footprint needs a capture or dictionary for the geometry")
        h = dataset.header if dataset is not None else None
        geo = ev.Geometry(
            num_layers=h.num_layers if h else offline.plan.num_layers,
            num_heads=h.num_heads if h else offline.num_heads,
            head_dim=h.head_dim if h else offline.head_dim,
            offline_groups=len(offline.plan.groups) if offline else None,
        )
        atoms = offline.per_head_atoms if offline else 0
        methods = [ev.Fp16(), ev.KBit(2), ev.KBit(4)] + [
            ev.Csr(s, offline.s_n if offline else 1, o["online_size"], atoms)
            for s in (o["sweep_s"] or [8])
        ]
        rows = ev.footprint_curve(o["footprint"], geo, methods)
        write_atomic(out / "footprint.csv", ev.footprint_csv(rows))
        result["footprint"] = rows

    write_atomic(out / "eval_report.json", _json_text(result))
    _echo(out, "eval", o)
    print(f"wrote {out / 'eval_report.json'}")
    return EXIT_OK


def cmd_ablate(o: dict) -> int:
    report = ev.ablation_suite(o["seed"])
    out = Path(o["out_dir"])
    write_atomic(out / "ablation_report.json", _json_text(report.to_json()))
    _echo(out, "ablate", o)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_FAIL


COMMANDS = {
    "synth": cmd_synth,
    "merge-plan": cmd_merge_plan,
    "train": cmd_train,
    "compress": cmd_compress,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args.command, args)
        return COMMANDS[args.command](settings)
    except CliError as exc:
        print(f"csrkv {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except argparse.ArgumentTypeError as exc:
        print(f"csrkv {args.command}: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
