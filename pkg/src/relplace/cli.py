"""Command-line surface: dataset generation, training, evaluation, certification.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or dataset
error, 4 training failure, 5 checkpoint mismatch. Every command is
deterministic under a fixed seed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import certify as ct
from . import pipeline as pl
from . import taskgen as tg
from .encoder import init_params, load_params, save_params
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DatasetFormatError,
    NonFiniteLoss,
)

_TRAIN_KEYS = {
    "demos": int,
    "epochs": int,
    "learning_rate": float,
    "sample_k": int,
    "lambda_disp": float,
    "lambda_corr": float,
    "lambda_cons": float,
    "seed": int,
}
_MODEL_KEYS = {
    "d": int,
    "heads": int,
    "k_neighbors": int,
    "share_encoders": bool,
}
_CONFIG_SCHEMA = {"train": _TRAIN_KEYS, "model": _MODEL_KEYS}


def read_config(path) -> tuple[dict, dict]:
    """Parse the INI config into (train kwargs, model kwargs).

    Raises:
        ConfigError: unreadable file, unknown section, unknown key, bad value.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    out = {"train": {}, "model": {}}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}]; valid: {sorted(_CONFIG_SCHEMA)}"
            )
        schema = _CONFIG_SCHEMA[section]
        for key, raw in parser[section].items():
            if key not in schema:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; valid: {sorted(schema)}"
                )
            try:
                if schema[key] is bool:
                    out[section][key] = parser[section].getboolean(key)
                else:
                    out[section][key] = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r} in [{section}]: {raw!r}") from exc
    return out["train"], out["model"]


def _dataset_dir(root: Path, preferred: str) -> Path:
    """Resolve a dataset directory: the preferred subdirectory of a gen-data
    root, or the root itself when it is already a dataset."""
    sub = root / preferred
    if (sub / "manifest.json").exists():
        return sub
    if (root / "manifest.json").exists():
        return root
    raise DatasetFormatError(f"no dataset found under {root}")


def _cmd_gen_data(args) -> int:
    root = Path(args.out)
    shape_seeds = [args.seed + i for i in range(max(args.demos, 1))]
    demos = tg.make_instances(
        args.family,
        count=args.demos,
        seed=args.seed,
        n_points=args.n_points,
        variation=args.variation,
        max_translation=args.max_translation,
    )
    evals = tg.make_instances(
        args.family,
        count=args.evals,
        seed=args.seed + 1_000_000,
        n_points=args.n_points,
        variation=args.variation,
        max_translation=args.max_translation,
        shape_seeds=shape_seeds,
        upright=args.upright_evals,
    )
    tg.dataset_write(demos, root / "demos")
    tg.dataset_write(evals, root / "evals")
    print(f"wrote {len(demos)} demos and {len(evals)} evals to {root}")
    return 0


def _cmd_train(args) -> int:
    train_kwargs, model_kwargs = ({}, {})
    if args.config:
        train_kwargs, model_kwargs = read_config(args.config)
    cfg = pl.TrainConfig(**train_kwargs)

    root = Path(args.data)
    demos = tg.dataset_read(_dataset_dir(root, "demos"))
    if not demos:
        raise DatasetFormatError(f"no training instances in {root}")
    holdout = None
    try:
        evals = tg.dataset_read(_dataset_dir(root, "evals"))
        holdout = evals[0] if evals else None
    except DatasetFormatError:
        pass

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log.csv")
    params = pl.train(demos, cfg, holdout=holdout, log_path=log_path, **model_kwargs)
    save_params(params, out)
    print(f"wrote checkpoint {out} and log {log_path}")
    return 0


def _summary(values: list[float]) -> dict:
    return {
        "mean": float(np.mean(values)),
        "median": float(np.median(values)),
        "max": float(np.max(values)),
    }


def _cmd_eval(args) -> int:
    params = load_params(args.checkpoint)
    instances = tg.dataset_read(_dataset_dir(Path(args.data), "evals"))
    if not instances:
        raise DatasetFormatError(f"no instances to evaluate in {args.data}")
    sample_k = "all" if args.sample_k == "all" else int(args.sample_k)

    rows = []
    for i, inst in enumerate(instances):
        rot, trans = pl.evaluate_instance(inst, params, sample_k=sample_k, rng_seed=i)
        rows.append({"instance": i, "rot_err_deg": rot, "trans_err": trans})

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["instance", "rot_err_deg", "trans_err"])
        writer.writeheader()
        writer.writerows(rows)
    summary = {
        "rot_err_deg": _summary([r["rot_err_deg"] for r in rows]),
        "trans_err": _summary([r["trans_err"] for r in rows]),
        "n": len(rows),
    }
    summary_path = out.with_suffix(".json")
    summary_path.write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def _cmd_certify(args) -> int:
    params = load_params(args.checkpoint) if args.checkpoint else None
    rows = ct.run_suite(params=params, trials=args.trials, seed=args.seed)
    print(ct.format_table(rows))
    return 0 if all(r.passed for r in rows) else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relplace",
        description="relative-placement pose prediction: data, training, "
        "evaluation, and property certification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a placement task dataset")
    gen.add_argument("--family", choices=sorted(tg.FAMILIES), required=True)
    gen.add_argument("--demos", type=int, default=10)
    gen.add_argument("--evals", type=int, default=20)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-points", type=int, default=256)
    gen.add_argument("--variation", type=float, default=0.0)
    gen.add_argument("--max-translation", type=float, default=1.0)
    gen.add_argument(
        "--upright-evals",
        action="store_true",
        help="restrict evaluation poses to rotations about the vertical axis",
    )
    gen.set_defaults(func=_cmd_gen_data)

    train = sub.add_parser("train", help="fit parameters on a dataset's demos")
    train.add_argument("--data", required=True)
    train.add_argument("--config", default=None)
    train.add_argument("--out", required=True)
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="report pose errors on a dataset's evals")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--sample-k", default="256")
    ev.set_defaults(func=_cmd_eval)

    cert = sub.add_parser("certify", help="run the property certification suite")
    cert.add_argument("--checkpoint", default=None)
    cert.add_argument("--trials", type=int, default=100)
    cert.add_argument("--seed", type=int, default=0)
    cert.set_defaults(func=_cmd_certify)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLoss as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 4
    except CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 5
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
