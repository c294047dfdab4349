"""Command-line interface: ``misstsm <command> [options]``.

Every command reads an optional JSON experiment config (``--config``),
applies flag overrides (flags win), validates the result before doing
any work, and writes a ``<command>.manifest.json`` next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
import traceback
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import backbone as bb
from . import checkpoint, dataio, evaluation, masking
from .baselines import IMPUTERS, impute
from .layer import MissTSMConfig

OUTPUT_ROOT_ENV = "MISSTSM_OUTPUT_ROOT"
SAMPLE_CSV = Path(__file__).with_name("data") / "sample.csv"


class ConfigError(ValueError):
    """Invalid experiment configuration; maps to exit code 2."""


# --- configuration -------------------------------------------------------------

DEFAULTS = {
    "dataset": {"path": str(SAMPLE_CSV), "format": "forecast", "length": None},
    "split": [0.6, 0.2, 0.2],
    "L": 336,
    "S": 96,
    "stride": 1,
    "mask": {"scheme": "mcar", "p": 0.7, "alpha": 0.5, "freq_range": [0.2, 0.8],
             "phase_range": [0.0, 2 * np.pi], "seed": 0},
    "model": {"use_misstsm": True,
              "misstsm": MissTSMConfig().to_dict(),
              "backbone": asdict(bb.BackboneConfig())},
    "train": asdict(bb.TrainConfig()),
    "task": "forecast",
    "output_dir": "runs",
    "seed": 0,
}

_MASK_SCHEMES = masking.SCHEMES + ("none",)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value


def validate_config(cfg: dict) -> None:
    """Field-level checks; raises :class:`ConfigError` naming the field."""
    def need(cond, field_, msg):
        if not cond:
            raise ConfigError(f"{field_}: {msg}")

    ds = cfg["dataset"]
    need(ds["format"] in ("forecast", "classification"), "dataset.format",
         "must be 'forecast' or 'classification'")
    need(ds["length"] is None or (isinstance(ds["length"], int) and ds["length"] > 0),
         "dataset.length", "must be null or a positive integer")
    sp = cfg["split"]
    need(isinstance(sp, list) and len(sp) == 3 and all(isinstance(v, (int, float)) and v > 0 for v in sp)
         and abs(sum(sp) - 1) < 1e-9, "split", "must be three positive numbers summing to 1")
    for key in ("L", "S", "stride", "seed"):
        need(isinstance(cfg[key], int) and not isinstance(cfg[key], bool), key, "must be an integer")
    need(cfg["L"] >= 1 and cfg["S"] >= 1 and cfg["stride"] >= 1, "L/S/stride", "must be >= 1")
    need(cfg["task"] in ("forecast", "classify"), "task", "must be 'forecast' or 'classify'")
    m = cfg["mask"]
    need(m["scheme"] in _MASK_SCHEMES, "mask.scheme", f"must be one of {_MASK_SCHEMES}")
    if m["scheme"] != "none":
        try:
            masking.MaskSpec(m["scheme"], float(m["p"]), float(m["alpha"]), m["freq_range"],
                             m["phase_range"], int(m["seed"]))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"mask: {exc}") from None
    try:
        MissTSMConfig(**cfg["model"]["misstsm"]).validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model.misstsm: {exc}") from None
    try:
        bb.BackboneConfig(**cfg["model"]["backbone"]).validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model.backbone: {exc}") from None
    try:
        bb.TrainConfig(**cfg["train"]).validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"train: {exc}") from None


def load_config(path: Optional[str], overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    for dotted, value in overrides.items():
        _set_path(cfg, dotted, value)
    validate_config(cfg)
    return cfg


# --- manifests and hashing -------------------------------------------------------

def blob_sha1(path) -> str:
    """Git-style content hash: sha1 of ``b"blob <size>\\0" + content``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def output_dir(cfg: dict, explicit: Optional[str] = None) -> Path:
    out = Path(explicit or cfg["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, inputs, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "config_fingerprint": evaluation.fingerprint(cfg),
        "config": cfg,
        "seed": cfg["seed"],
        "inputs": {str(p): blob_sha1(p) for p in inputs},
        "outputs": {str(p): blob_sha1(p) for p in outputs},
        "wall_clock_seconds": time.perf_counter() - started,
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _output_file(cfg: dict, args, default_name: str):
    """``(file, directory)`` for single-file commands honouring ``--out``."""
    if getattr(args, "out", None):
        path = Path(args.out)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not path.is_absolute():
            path = Path(root) / path
        path.parent.mkdir(parents=True, exist_ok=True)
        return path, path.parent
    out = output_dir(cfg, args.out_dir)
    return out / default_name, out


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what}: file not found: {path}")
    return p


# --- data preparation ------------------------------------------------------------

def _mask_spec(cfg: dict, seed: Optional[int] = None) -> Optional[masking.MaskSpec]:
    m = cfg["mask"]
    if m["scheme"] == "none":
        return None
    return masking.MaskSpec(m["scheme"], float(m["p"]), float(m["alpha"]), m["freq_range"],
                            m["phase_range"], int(m["seed"] if seed is None else seed))


def _segment_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def apply_mask(ts: dataio.TimeSeries, cfg: dict, seed: Optional[int] = None) -> dataio.TimeSeries:
    """Native missingness merged with the configured synthetic mask."""
    spec = _mask_spec(cfg, seed)
    if spec is None:
        return ts
    return ts.with_mask(masking.merge_masks(ts.mask, spec.generate(ts.T, ts.N)))


def prepare_forecast(cfg: dict):
    """Load, mask, split and normalize; returns ``(train, val, test), normalizer``
    where each split is an ``(X, M, Y, Y_obs)`` tuple."""
    ts = apply_mask(dataio.load_forecast_csv(cfg["dataset"]["path"]), cfg)
    parts = dataio.split(ts, tuple(cfg["split"]))
    normed, norm = dataio.zscore_fit_transform(parts[0], parts[1:])
    L, S = cfg["L"], cfg["S"]
    arrays = [dataio.window_arrays(p, L, S, cfg["stride"]) for p in normed[:2]]
    arrays.append(dataio.window_arrays(normed[2], L, S, 1))
    for name, a in zip(("train", "val", "test"), arrays):
        if a[0].shape[0] == 0:
            raise ConfigError(f"L/S: {name} split ({ts.T} rows total) is too short for L={L}, S={S}")
    return tuple(arrays), norm


def prepare_classification(cfg: dict):
    segs = dataio.load_classification(cfg["dataset"]["path"], cfg["dataset"]["length"])
    lengths = {s.series.T for s in segs}
    if len(lengths) > 1:
        raise ConfigError("dataset.length: segments differ in length; set dataset.length")
    spec = _mask_spec(cfg)
    if spec is not None:
        segs = [dataio.LabeledSegment(
            s.series.with_mask(masking.merge_masks(
                s.series.mask,
                masking.MaskSpec(spec.scheme, spec.p, spec.alpha, spec.freq_range, spec.phase_range,
                                 _segment_seed(spec.seed, i)).generate(s.series.T, s.series.N))),
            s.label) for i, s in enumerate(segs)]
    order = np.random.default_rng(cfg["seed"]).permutation(len(segs))
    segs = [segs[i] for i in order]
    n = len(segs)
    a = int(n * cfg["split"][0])
    b = a + int(n * cfg["split"][1])
    if a == 0 or b == a or b == n:
        raise ConfigError(f"split: {n} segments are too few for the requested split")
    (tr, va, te), norm = dataio.normalize_segments(segs[:a], [segs[a:b], segs[b:]])
    n_classes = int(max(s.label for s in segs)) + 1
    return tuple(dataio.stack_segments(p) for p in (tr, va, te)), norm, n_classes


def _train_cfg(cfg: dict) -> bb.TrainConfig:
    return bb.TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})


def build_model(cfg: dict, n_variates: int, context_len: int) -> bb.MissTSMModel:
    return bb.MissTSMModel(n_variates, context_len, MissTSMConfig(**cfg["model"]["misstsm"]),
                           bb.BackboneConfig(**cfg["model"]["backbone"]),
                           cfg["model"]["use_misstsm"], cfg["seed"])


def _prepare(cfg):
    if cfg["task"] == "classify":
        if cfg["dataset"]["format"] != "classification":
            raise ConfigError("task: 'classify' needs dataset.format 'classification'")
        splits, norm, n_classes = prepare_classification(cfg)
        return splits, norm, n_classes
    if cfg["dataset"]["format"] != "forecast":
        raise ConfigError("task: 'forecast' needs dataset.format 'forecast'")
    splits, norm = prepare_forecast(cfg)
    return splits, norm, None


def run_pretrain(cfg: dict, splits, log_path=None) -> bb.MissTSMModel:
    tr, va = splits[0], splits[1]
    model = build_model(cfg, tr[0].shape[2], tr[0].shape[1])
    bb.pretrain_mae(model, (tr[0], tr[1]), _train_cfg(cfg), (va[0], va[1]), log_path=log_path)
    return model


def run_finetune(cfg: dict, model, splits, n_classes, log_path=None) -> dict:
    tc = _train_cfg(cfg)
    if cfg["task"] == "classify":
        return bb.finetune_classify(model, splits[0], splits[1], tc, n_classes, log_path=log_path)
    return bb.finetune_forecast(model, splits[0], splits[1], tc, cfg["S"], log_path=log_path)


def evaluate_model(cfg: dict, model, test) -> evaluation.MetricReport:
    if cfg["task"] == "classify":
        X, M, y = test
        probs = bb.predict_classify_batch(model, X, M)
        metrics = evaluation.classification_metrics(probs, y)
    else:
        X, M, Y, Yobs = test
        pred = bb.predict_forecast_batch(model, X, M)
        metrics = {"mse": evaluation.masked_mse(pred, Y, Yobs),
                   "mae": evaluation.masked_mae(pred, Y, Yobs)}
    return evaluation.MetricReport(cfg["task"], metrics, int(X.shape[0]), cfg["seed"],
                                   evaluation.fingerprint(cfg))


# --- commands --------------------------------------------------------------------

def cmd_mask(args, cfg):
    t0 = time.perf_counter()
    src = _require_file(cfg["dataset"]["path"], "dataset.path")
    ts = dataio.load_forecast_csv(src)
    spec = _mask_spec(cfg)
    if spec is None:
        raise ConfigError("mask.scheme: 'none' produces no mask")
    mask = spec.generate(ts.T, ts.N)
    path, out = _output_file(cfg, args, "mask.csv")
    masking.save_mask(mask, path)
    write_manifest(out, "mask", cfg, [src], [path], t0)
    print(f"wrote {path} (missing fraction {mask.mean():.4f})")


def cmd_impute(args, cfg):
    t0 = time.perf_counter()
    src = _require_file(cfg["dataset"]["path"], "dataset.path")
    inputs = [src]
    ts = dataio.load_forecast_csv(src)
    if args.mask:
        mpath = _require_file(args.mask, "--mask")
        inputs.append(mpath)
        mask = masking.load_mask(mpath)
        if mask.shape != ts.values.shape:
            raise ConfigError(f"--mask: shape {mask.shape} does not match data {ts.values.shape}")
        ts = ts.with_mask(masking.merge_masks(ts.mask, mask))
    kwargs = {"k": args.k} if args.method == "knn" else {}
    if args.method == "spline":
        kwargs = {"order": args.order}
    filled = impute(ts, args.method, **kwargs).as_timeseries(ts)
    path, out = _output_file(cfg, args, f"imputed_{args.method}.csv")
    dataio.save_forecast_csv(filled, path)
    write_manifest(out, "impute", cfg, inputs, [path], t0)
    print(f"wrote {path}")


def cmd_pretrain(args, cfg):
    t0 = time.perf_counter()
    src = _require_file(cfg["dataset"]["path"], "dataset.path")
    splits, norm, _ = _prepare(cfg)
    out = output_dir(cfg, args.out_dir)
    model = run_pretrain(cfg, splits, out / "pretrain_log.jsonl")
    path = out / "pretrained.ckpt"
    checkpoint.save_model(path, model, norm, {"config_fingerprint": evaluation.fingerprint(cfg)})
    write_manifest(out, "pretrain", cfg, [src], [path], t0)
    print(f"wrote {path}")


def cmd_finetune(args, cfg):
    t0 = time.perf_counter()
    src = _require_file(cfg["dataset"]["path"], "dataset.path")
    ck = _require_file(args.checkpoint, "--checkpoint")
    splits, norm, n_classes = _prepare(cfg)
    model, _, _ = checkpoint.load_model(ck)
    if model.context_len != splits[0][0].shape[1] or model.n_variates != splits[0][0].shape[2]:
        raise ConfigError("checkpoint: model shape does not match the dataset windows")
    out = output_dir(cfg, args.out_dir)
    hist = run_finetune(cfg, model, splits, n_classes, out / "finetune_log.jsonl")
    path = out / f"finetuned_{cfg['task']}.ckpt"
    checkpoint.save_model(path, model, norm, {"config_fingerprint": evaluation.fingerprint(cfg),
                                              "best_epoch": hist["best_epoch"]})
    write_manifest(out, "finetune", cfg, [src, ck], [path], t0)
    print(f"wrote {path} (best epoch {hist['best_epoch']}, val {hist['best_val']:.6f})")


def cmd_evaluate(args, cfg):
    t0 = time.perf_counter()
    src = _require_file(cfg["dataset"]["path"], "dataset.path")
    ck = _require_file(args.checkpoint, "--checkpoint")
    splits, _, _ = _prepare(cfg)
    model, _, _ = checkpoint.load_model(ck)
    report = evaluate_model(cfg, model, splits[2])
    out = output_dir(cfg, args.out_dir)
    path = out / "report.json"
    report.save(path)
    write_manifest(out, "evaluate", cfg, [src, ck], [path], t0)
    print(report.to_json())


def cmd_benchmark(args, cfg):
    t0 = time.perf_counter()
    rows = evaluation.scaling_benchmark(args.N, T=args.T, D=args.D, reps=args.reps, seed=cfg["seed"])
    out = output_dir(cfg, args.out_dir)
    path = out / "benchmark.csv"
    evaluation.save_benchmark_csv(rows, path)
    write_manifest(out, "benchmark", cfg, [], [path], t0)
    for n, s in rows:
        print(f"N={n:5d}  {s * 1e3:9.3f} ms")


def cmd_ablate(args, cfg):
    """Full model, no-TFI ablation and an embedding-size sweep on one set of splits."""
    t0 = time.perf_counter()
    src = _require_file(cfg["dataset"]["path"], "dataset.path")
    splits, _, n_classes = _prepare(cfg)
    out = output_dir(cfg, args.out_dir)
    variants = [("full", cfg, False), ("no_tfi", cfg, True)]
    for D in args.dims:
        v = copy.deepcopy(cfg)
        v["model"]["misstsm"]["D"] = D
        validate_config(v)
        variants.append((f"embed_dim_{D}", v, False))
    written, summary = [], {}
    for name, vcfg, no_tfi in variants:
        tr = splits[0]
        model = build_model(vcfg, tr[0].shape[2], tr[0].shape[1])
        if no_tfi:
            model.ablate_tfi()
        tc = _train_cfg(vcfg)
        bb.pretrain_mae(model, (tr[0], tr[1]), tc, (splits[1][0], splits[1][1]))
        run_finetune(vcfg, model, splits, n_classes)
        report = evaluate_model(vcfg, model, splits[2])
        report.notes["variant"] = name
        path = out / f"ablate_{name}.json"
        report.save(path)
        written.append(path)
        summary[name] = report.metrics
    spath = out / "ablate_summary.json"
    spath.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(spath)
    write_manifest(out, "ablate", cfg, [src], written, t0)
    print(json.dumps(summary, indent=2, sort_keys=True))


# --- argument parsing ------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _pair(text: str) -> list:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return [lo, hi]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misstsm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path, e.g. train.batch_size=32")
        p.add_argument("--data", "--in", dest="data", help="dataset path (dataset.path)")
        p.add_argument("--seed", type=int, help="experiment seed")
        p.add_argument("--out-dir", help=f"output directory (relative paths go under ${OUTPUT_ROOT_ENV})")
        return p

    p = common(sub.add_parser("mask", help="generate a synthetic missingness mask"))
    p.add_argument("--scheme", choices=masking.SCHEMES)
    p.add_argument("--p", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--freq", type=_pair, metavar="LO,HI", help="frequency range, cycles per step")
    p.add_argument("--phase", type=_pair, metavar="LO,HI", help="phase range in radians")
    p.add_argument("--out", help="mask file to write (default <out-dir>/mask.csv)")
    p.set_defaults(func=cmd_mask)

    p = common(sub.add_parser("impute", help="fill missing entries with a classical imputer"))
    p.add_argument("--method", choices=sorted(IMPUTERS), required=True)
    p.add_argument("--mask", help="extra 0/1 mask CSV merged with native missingness")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--out", help="CSV to write (default <out-dir>/imputed_<method>.csv)")
    p.set_defaults(func=cmd_impute)

    p = common(sub.add_parser("pretrain", help="masked-autoencoder pretraining"))
    p.add_argument("--task", choices=("forecast", "classify"))
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("finetune", help="fine-tune a pretrained checkpoint"))
    p.add_argument("--task", choices=("forecast", "classify"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("evaluate", help="score a fine-tuned checkpoint on the test split"))
    p.add_argument("--task", choices=("forecast", "classify"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("benchmark", help="MissTSM forward-pass scaling in N"))
    p.add_argument("--N", type=int, nargs="+", default=[50, 100, 200, 400])
    p.add_argument("--T", type=int, default=336)
    p.add_argument("--D", type=int, default=16)
    p.add_argument("--reps", type=int, default=10)
    p.set_defaults(func=cmd_benchmark)

    p = common(sub.add_parser("ablate", help="full vs no-TFI vs embedding-size sweep"))
    p.add_argument("--task", choices=("forecast", "classify"))
    p.add_argument("--dims", type=int, nargs="+", default=[4, 16])
    p.set_defaults(func=cmd_ablate)
    return parser


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        over[key.strip()] = _parse_value(val)
    flag_map = {"data": "dataset.path", "seed": "seed", "task": "task",
                "scheme": "mask.scheme", "p": "mask.p", "alpha": "mask.alpha",
                "freq": "mask.freq_range", "phase": "mask.phase_range"}
    for attr, dotted in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            over[dotted] = val
    if getattr(args, "seed", None) is not None and args.command == "mask":
        over["mask.seed"] = args.seed
    return over


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 1
        tail = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__)[-3:])
        print(f"error: {exc}\n{tail}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
