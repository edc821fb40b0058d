"""Command-line entry point.

Subcommands: synth | train | segment | alloc | compress | decompress | eval | pr.
Settings come from an INI-style key=value config file, overridable by
PAMKIT_<KEY> environment variables and then by --set KEY=VALUE flags (flags
win). Every run writes its resolved config, master seed and config hash to
<out>/run_config.txt, and every artifact gets a <name>.meta.json sidecar
carrying the producing config hash, so any output can be regenerated
bit-exactly from one integer and one file.

Exit codes: 0 success, 2 configuration errors, 3 runtime failures.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bitalloc import AllocTrainConfig, lambda_to_allocation, train_allocation
from .codec import (EncodedBlock, FormatError, encode, decode, float_to_fixed,
                    human_allocation, load_block, save_block, uniform_allocation)
from .dsp import NormStats, StftConfig, load_spectrogram, save_spectrogram
from .evaluate import (ProtocolConfig, Representation, aggregate_rows, compression_report,
                       evaluate_detector, evaluate_segmenter, pr_curve, render_table,
                       run_protocol, stack_clips, write_lambda_csv, write_pr_csv,
                       write_results_csv)
from .models import load_model, save_model
from .seeds import derive_seed
from .synth import DatasetConfig, build_dataset, export_labels_csv, load_dataset, save_dataset
from .training import TrainConfig, train_classifier, train_segmenter

ENV_PREFIX = "PAMKIT_"
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(Exception):
    pass


def parse_config_file(path) -> dict:
    """key=value lines; '#' and ';' start comments; sections are rejected."""
    settings = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            raise ConfigError(f"{path}:{lineno}: sections are not supported")
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        settings[key.strip()] = value.split("#", 1)[0].strip()
    return settings


def resolve_settings(defaults: dict, args) -> dict:
    """defaults < config file < environment < --set flags."""
    settings = dict(defaults)
    if args.config:
        file_settings = parse_config_file(args.config)
        unknown = set(file_settings) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        settings.update(file_settings)
    for key in defaults:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            settings[key] = env
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key not in defaults:
            raise ConfigError(f"unknown setting {key!r}")
        settings[key] = value
    missing = [k for k, v in settings.items() if v is None]
    if missing:
        raise ConfigError(f"missing required settings: {sorted(missing)}")
    return settings


def _as(value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r}: {exc}") from exc


def _int_list(value) -> tuple:
    if isinstance(value, tuple):
        return value
    return tuple(int(v) for v in str(value).replace(",", " ").split())


def config_hash(settings: dict, seed: int) -> str:
    canon = "".join(f"{k}={settings[k]}\n" for k in sorted(settings)) + f"seed={seed}\n"
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out

def _guard_overwrite(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ConfigError(f"refusing to overwrite {existing}; pass --force")


def _write_run_record(out: Path, settings: dict, seed: int, chash: str) -> None:
    lines = [f"{k}={settings[k]}" for k in sorted(settings)]
    lines += [f"seed={seed}", f"config_hash={chash}"]
    (out / "run_config.txt").write_text("\n".join(lines) + "\n")


def _sidecar(path, chash: str, command: str, seed: int) -> None:
    meta = {"config_hash": chash, "command": command, "seed": seed}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def _save_rep_json(path, stats: NormStats, scale: float | None) -> None:
    payload = {
        "noise_mean": [float(v) for v in stats.noise_mean],
        "median_call_intensity": stats.median_call_intensity,
        "scale": scale,
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def _load_rep_json(path) -> tuple:
    payload = json.loads(Path(path).read_text())
    stats = NormStats(noise_mean=np.asarray(payload["noise_mean"], dtype=np.float64),
                      median_call_intensity=float(payload["median_call_intensity"]))
    return stats, payload.get("scale")


def _load_split_dir(path):
    d = Path(path)
    train, fs = load_dataset(d / "train.pamds")
    test, fs2 = load_dataset(d / "test.pamds")
    if fs != fs2:
        raise ConfigError("train/test sample rates differ")
    return train, test, fs


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "n_clips": "200", "split_fraction": "0.5", "snr_db_lo": "-5", "snr_db_hi": "20",
    "sample_rate": "1000",
}


def cmd_synth(args):
    settings = resolve_settings(SYNTH_DEFAULTS, args)
    out = _prepare_out(args)
    chash = config_hash(settings, args.seed)
    cfg = DatasetConfig(
        n_clips=_as(settings["n_clips"], int),
        split_fraction=_as(settings["split_fraction"], float),
        snr_db_lo=_as(settings["snr_db_lo"], float),
        snr_db_hi=_as(settings["snr_db_hi"], float),
        sample_rate=_as(settings["sample_rate"], int),
    )
    artifacts = [out / n for n in
                 ("train.pamds", "test.pamds", "train_labels.csv", "test_labels.csv")]
    _guard_overwrite(artifacts, args.force)
    ds = build_dataset(cfg, derive_seed(args.seed, "dataset"))
    save_dataset(out / "train.pamds", ds.train, cfg.sample_rate)
    save_dataset(out / "test.pamds", ds.test, cfg.sample_rate)
    export_labels_csv(out / "train_labels.csv", ds.train)
    export_labels_csv(out / "test_labels.csv", ds.test)
    for p in artifacts:
        _sidecar(p, chash, "synth", args.seed)
    _write_run_record(out, settings, args.seed, chash)
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test clips to {out}")


TRAIN_DEFAULTS = {
    "dataset": None, "epochs": "16", "learning_rate": "0.1", "momentum": "0.9",
    "batch_size": "64", "weight_decay": "1e-4", "val_fraction": "0.1",
}


def _train_config(settings, seed, epochs_key="epochs") -> TrainConfig:
    return TrainConfig(
        learning_rate=_as(settings["learning_rate"], float),
        momentum=_as(settings["momentum"], float),
        batch_size=_as(settings["batch_size"], int),
        weight_decay=_as(settings["weight_decay"], float),
        epochs=_as(settings[epochs_key], int),
        val_fraction=_as(settings["val_fraction"], float),
        seed=seed,
    )


def _write_history_csv(path, history: dict) -> None:
    import csv as _csv
    keys = [k for k in history if isinstance(history[k], list)]
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["epoch"] + keys)
        for i in range(len(history[keys[0]])):
            writer.writerow([i] + [f"{history[k][i]:.6g}" for k in keys])


def _prepared_split(settings, stft_cfg=StftConfig()):
    train, test, fs = _load_split_dir(settings["dataset"])
    if fs != stft_cfg.sample_rate:
        raise ConfigError(f"dataset sample rate {fs} != pipeline rate {stft_cfg.sample_rate}")
    return stack_clips(train, stft_cfg), stack_clips(test, stft_cfg)


def cmd_train(args):
    settings = resolve_settings(TRAIN_DEFAULTS, args)
    out = _prepare_out(args)
    chash = config_hash(settings, args.seed)
    from .dsp import compute_norm_stats
    from .codec import percentile_scale
    (train_raw, train_y, train_fy), (test_raw, test_y, _) = _prepared_split(settings)
    stats = compute_norm_stats(train_raw, train_fy.astype(bool))
    rep = Representation(stats)
    scale = percentile_scale(rep.apply_train(train_raw))
    artifacts = [out / "model.pamm", out / "history.csv", out / "rep.json"]
    _guard_overwrite(artifacts, args.force)
    model, history = train_classifier(rep.apply_train(train_raw), train_y,
                                      _train_config(settings, derive_seed(args.seed, "train")))
    model.meta["rep"] = rep.fingerprint()
    metrics = evaluate_detector(model, test_raw, test_y, rep)
    save_model(out / "model.pamm", model)
    _write_history_csv(out / "history.csv", history)
    _save_rep_json(out / "rep.json", stats, scale)
    for p in artifacts:
        _sidecar(p, chash, "train", args.seed)
    _write_run_record(out, settings, args.seed, chash)
    print(f"test accuracy {metrics.accuracy:.4f} "
          f"(precision {metrics.precision:.4f}, recall {metrics.recall:.4f})")


SEGMENT_DEFAULTS = dict(TRAIN_DEFAULTS, epochs="16", freq_conv="true")


def cmd_segment(args):
    settings = resolve_settings(SEGMENT_DEFAULTS, args)
    out = _prepare_out(args)
    chash = config_hash(settings, args.seed)
    (train_raw, _, train_fy), (test_raw, _, test_fy) = _prepared_split(settings)
    from .dsp import compute_norm_stats
    stats = compute_norm_stats(train_raw, train_fy.astype(bool))
    rep = Representation(stats)
    artifacts = [out / "segmenter.pamm", out / "history.csv"]
    _guard_overwrite(artifacts, args.force)
    model, history = train_segmenter(rep.apply_train(train_raw), train_fy,
                                     _train_config(settings, derive_seed(args.seed, "segment")),
                                     freq_conv=_as(settings["freq_conv"], bool))
    metrics = evaluate_segmenter(model, rep.apply_train(test_raw), test_fy)
    save_model(out / "segmenter.pamm", model)
    _write_history_csv(out / "history.csv", history)
    for p in artifacts:
        _sidecar(p, chash, "segment", args.seed)
    _write_run_record(out, settings, args.seed, chash)
    print(f"per-frame accuracy {metrics.accuracy:.4f}")


ALLOC_DEFAULTS = dict(TRAIN_DEFAULTS, mu="1e-7", lambda_init="2.0", budgets="235,329,423")


def cmd_alloc(args):
    settings = resolve_settings(ALLOC_DEFAULTS, args)
    out = _prepare_out(args)
    chash = config_hash(settings, args.seed)
    (train_raw, train_y, train_fy), _ = _prepared_split(settings)
    from .dsp import compute_norm_stats
    from .codec import percentile_scale
    stats = compute_norm_stats(train_raw, train_fy.astype(bool))
    rep = Representation(stats)
    scale = percentile_scale(rep.apply_train(train_raw))
    artifacts = [out / "lambda.csv", out / "alloc_model.pamm", out / "history.csv",
                 out / "rep.json"]
    _guard_overwrite(artifacts, args.force)
    cfg = AllocTrainConfig(
        mu=_as(settings["mu"], float),
        lambda_init=_as(settings["lambda_init"], float),
        train=_train_config(settings, derive_seed(args.seed, "alloc")))
    lam, model, history = train_allocation(rep.apply_train(train_raw), train_y, cfg)
    budgets = _int_list(settings["budgets"])
    write_lambda_csv(out / "lambda.csv", StftConfig().band_freqs(), lam, budgets)
    save_model(out / "alloc_model.pamm", model)
    _write_history_csv(out / "history.csv", history)
    _save_rep_json(out / "rep.json", stats, scale)
    for p in artifacts:
        _sidecar(p, chash, "alloc", args.seed)
    _write_run_record(out, settings, args.seed, chash)
    print(f"lambda in [{lam.min():.3f}, {lam.max():.3f}], sum {lam.sum():.2f}")


COMPRESS_DEFAULTS = {
    "input": None, "method": "uniform", "budget": "329", "scale": "1.0",
    "lambda_csv": "", "floor": "5",
}


def _read_lambda_csv(path) -> np.ndarray:
    import csv as _csv
    with open(path, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    return np.array([float(r["lambda"]) for r in rows])


def cmd_compress(args):
    settings = resolve_settings(COMPRESS_DEFAULTS, args)
    out = _prepare_out(args)
    chash = config_hash(settings, args.seed)
    data = load_spectrogram(settings["input"])
    floor = _as(settings["floor"], int)
    budget = _as(settings["budget"], int)
    method = settings["method"]
    n_bands = data.shape[1]
    if method == "uniform":
        plan = uniform_allocation(n_bands, budget, floor)
    elif method == "human":
        plan = human_allocation(StftConfig().band_freqs(), budget, floor)
    elif method == "learned":
        if not settings["lambda_csv"]:
            raise ConfigError("learned method requires lambda_csv")
        plan = lambda_to_allocation(_read_lambda_csv(settings["lambda_csv"]), budget, floor)
    else:
        raise ConfigError(f"unknown method {method!r}")
    target = out / (Path(settings["input"]).stem + ".pamc")
    _guard_overwrite([target], args.force)
    block = encode(float_to_fixed(data, _as(settings["scale"], float)), plan)
    save_block(target, block)
    _sidecar(target, chash, "compress", args.seed)
    _write_run_record(out, settings, args.seed, chash)
    print(f"wrote {target} ({len(block.payload)} payload bytes, budget {plan.budget})")


DECOMPRESS_DEFAULTS = {"input": None}


def _f32_away_from_zero(x: np.ndarray) -> np.ndarray:
    """float64 -> float32 rounding away from zero. Decoded values sit exactly
    on truncation-cell boundaries; rounding them toward zero in the file
    would re-encode into the next lower cell, breaking the
    compress -> decompress -> compress fixpoint."""
    x32 = x.astype(np.float32)
    shrunk = np.abs(x32.astype(np.float64)) < np.abs(x)
    x32[shrunk] = np.nextafter(x32[shrunk],
                               np.copysign(np.float32(np.inf), x32[shrunk]))
    return x32


def cmd_decompress(args):
    settings = resolve_settings(DECOMPRESS_DEFAULTS, args)
    out = _prepare_out(args)
    chash = config_hash(settings, args.seed)
    block = load_block(settings["input"])
    target = out / (Path(settings["input"]).stem + ".spec")
    _guard_overwrite([target], args.force)
    save_spectrogram(target, _f32_away_from_zero(decode(block)))
    _sidecar(target, chash, "decompress", args.seed)
    _write_run_record(out, settings, args.seed, chash)
    print(f"wrote {target} ({block.t} x {block.f})")


EVAL_DEFAULTS = {
    "n_clips": "2000", "split_fraction": "0.5", "epochs": "8", "alloc_epochs": "8",
    "seg_epochs": "12", "n_seeds": "5", "budgets": "235,329,423", "mid_budget": "329",
    "methods": "learned,human,uniform", "mu": "1e-7", "floor": "5",
    "include_baselines": "true",
}


def cmd_eval(args):
    settings = resolve_settings(EVAL_DEFAULTS, args)
    out = _prepare_out(args)
    chash = config_hash(settings, args.seed)
    artifacts = [out / "results.csv", out / "summary.txt"]
    _guard_overwrite(artifacts, args.force)
    cfg = ProtocolConfig(
        data=DatasetConfig(n_clips=_as(settings["n_clips"], int),
                           split_fraction=_as(settings["split_fraction"], float)),
        epochs=_as(settings["epochs"], int),
        alloc_epochs=_as(settings["alloc_epochs"], int),
        seg_epochs=_as(settings["seg_epochs"], int),
        budgets=_int_list(settings["budgets"]),
        mid_budget=_as(settings["mid_budget"], int),
        methods=tuple(m.strip() for m in settings["methods"].split(",")),
        n_seeds=_as(settings["n_seeds"], int),
        mu=_as(settings["mu"], float),
        floor=_as(settings["floor"], int),
        include_baselines=_as(settings["include_baselines"], bool),
    )
    results = run_protocol(cfg, args.seed, threads=args.threads)
    table = aggregate_rows(results)
    write_results_csv(out / "results.csv", results)
    lines = [render_table(table), ""]
    if cfg.include_baselines:
        unc = [r.uncompressed.accuracy for r in results]
        svm = [r.svm_accuracy for r in results]
        segc = [r.seg_conv_accuracy for r in results]
        segn = [r.seg_noconv_accuracy for r in results]
        lines += [
            f"uncompressed detector: {np.mean(unc):.4f} ± {np.std(unc):.4f}",
            f"mfcc + linear svm:     {np.mean(svm):.4f} ± {np.std(svm):.4f}",
            f"segmenter (freq conv): {np.mean(segc):.4f} ± {np.std(segc):.4f}",
            f"segmenter (ablation):  {np.mean(segn):.4f} ± {np.std(segn):.4f}",
            "",
        ]
    lines.append(compression_report(cfg.budgets))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    for i, res in enumerate(results):
        if res.lam is not None:
            path = out / f"lambda_seed{i}.csv"
            write_lambda_csv(path, cfg.stft.band_freqs(), res.lam, cfg.budgets, cfg.floor)
            _sidecar(path, chash, "eval", args.seed)
    for p in artifacts:
        _sidecar(p, chash, "eval", args.seed)
    _write_run_record(out, settings, args.seed, chash)
    print("\n".join(lines))


PR_DEFAULTS = {"dataset": None, "model": None, "rep": None}


def cmd_pr(args):
    settings = resolve_settings(PR_DEFAULTS, args)
    out = _prepare_out(args)
    chash = config_hash(settings, args.seed)
    target = out / "pr.csv"
    _guard_overwrite([target], args.force)
    _, (test_raw, test_y, _) = _prepared_split(settings)
    model = load_model(settings["model"])
    stats, scale = _load_rep_json(settings["rep"])
    rep = Representation(stats)
    from .models import detector_probs
    scores = detector_probs(model, rep.apply_wire(test_raw))
    thresholds, precision, recall = pr_curve(scores, test_y)
    write_pr_csv(target, thresholds, precision, recall)
    _sidecar(target, chash, "pr", args.seed)
    _write_run_record(out, settings, args.seed, chash)
    print(f"wrote {target} ({len(thresholds)} points)")


COMMANDS = {
    "synth": (cmd_synth, SYNTH_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "segment": (cmd_segment, SEGMENT_DEFAULTS),
    "alloc": (cmd_alloc, ALLOC_DEFAULTS),
    "compress": (cmd_compress, COMPRESS_DEFAULTS),
    "decompress": (cmd_decompress, DECOMPRESS_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "pr": (cmd_pr, PR_DEFAULTS),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pamkit",
                                     description="Passive acoustic monitoring pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, defaults) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value settings file")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--force", action="store_true", help="allow overwriting outputs")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help=f"override a setting (keys: {', '.join(sorted(defaults))})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn, _ = COMMANDS[args.command]
    try:
        fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
