"""Experiment runner: seeded, schema-checked, reproducible artifact emission.

Usage::

    icl-bma-lab <subcommand> --config cfg.yaml [--seed N] [--out DIR]
                [--deterministic] [--threads K] [--verify]

Every run writes ``results.json`` (schema-versioned payload), one CSV per
curve, and ``manifest.json`` with sha256 hashes of all artifacts plus the
config hash and seed list.  ``--verify`` re-derives the hashes of an
existing output directory instead of running.

Exit codes: 0 success, 1 runtime failure, 2 config schema violation,
3 a surely-true inequality failed (an implementation bug, never data).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__, experiments
from .experiments import SureInequalityError

__all__ = ["main", "run", "SchemaError", "validate_config", "SCHEMAS"]

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class Field:
    types: tuple = ()
    schema: dict | None = None
    item_types: tuple | None = None
    required: bool = False
    choices: tuple | None = None


def _f(*types, required=False, choices=None):
    return Field(types=types, required=required, choices=choices)


def _nested(schema, required=False):
    return Field(schema=schema, required=required)


def _list_of(*item_types, required=False):
    return Field(types=(list,), item_types=item_types, required=required)


_RECIPE_SCHEMA = {
    "kind": _f(str, choices=("markov", "pair")),
    "n_concepts": _f(int, required=True),
    "alphabet_size": _f(int, required=True),
    "order": _f(int),
    "covariate_length": _f(int),
    "c0": _f(float, int),
    "prior_floor": _f(float, int),
    "seed": _f(int),
    "shared_covariate_law": _f(bool),
}

_BOUNDS_SCHEMA = {k: _f(float, int)
                  for k in ("b_a", "b_a1", "b_a2", "b_q", "b_k", "b_v")}

_TRAIN_SCHEMA = {
    "d": _f(int), "depth": _f(int), "heads": _f(int), "d_ff": _f(int),
    "tau": _f(float, int), "steps": _f(int),
    "learning_rate": _f(float, int),
    "mode": _f(str, choices=("constant", "line_search", "adam")),
    "batch_size": _f(int, type(None)), "init_scale": _f(float, int),
    "bounds": _nested(_BOUNDS_SCHEMA),
}

_POLICY_SCHEMA = {
    "kind": _f(str, required=True,
               choices=("flip_uniform", "permute_responses", "adversarial_fixed")),
    "rho": _f(float, int),
    "mapping": _list_of(int),
}

SCHEMAS = {
    "gen-model": {
        "recipe": _nested(_RECIPE_SCHEMA, required=True),
        "filename": _f(str),
    },
    "bma-regret": {
        "model": _nested(_RECIPE_SCHEMA), "model_file": _f(str),
        "horizon": _f(int), "n_models": _f(int),
        "trajectories_per_model": _f(int),
    },
    "attn-converge": {
        "t_grid": _list_of(int), "d_k": _f(int), "d_v": _f(int),
        "trials": _f(int), "gamma": _f(float, int),
        "lambda_exponent": _f(float, int),
    },
    "pretrain": {
        "model": _nested(_RECIPE_SCHEMA), "model_file": _f(str),
        "train": _nested(_TRAIN_SCHEMA), "seq_len": _f(int), "n_traj": _f(int),
        "objective": _f(str, choices=("mle", "l2")),
        "eval_prefixes": _f(int), "embed_norm": _f(float, int),
    },
    "eval-tv": {
        "model": _nested(_RECIPE_SCHEMA), "model_file": _f(str),
        "train": _nested(_TRAIN_SCHEMA), "seq_len": _f(int),
        "n_traj_grid": _list_of(int), "train_seeds": _f(int),
        "eval_prefixes": _f(int),
    },
    "depth-sweep": {
        "alphabet_size": _f(int), "d_y": _f(int), "depths": _list_of(int),
        "restarts": _f(int), "seq_len": _f(int), "n_inputs": _f(int),
        "train": _nested(_TRAIN_SCHEMA),
    },
    "robustness": {
        "model": _nested(_RECIPE_SCHEMA), "model_file": _f(str),
        "policy": _nested(_POLICY_SCHEMA, required=True),
        "z_star": _f(int), "t_grid": _list_of(int), "trials": _f(int),
    },
    "regret-decomp": {
        "model": _nested(_RECIPE_SCHEMA), "model_file": _f(str),
        "icl_model": _nested(_RECIPE_SCHEMA), "icl_model_file": _f(str),
        "horizon": _f(int), "trials": _f(int),
        "predictor": _f(str, choices=("bma", "trained")),
        "checkpoint": _f(str), "train": _nested(_TRAIN_SCHEMA),
        "n_traj": _f(int), "seq_len": _f(int),
        "beta": _f(float, int), "kappa": _f(float, int),
    },
    "check-lemmas": {
        "tv_kl_pairs": _f(int), "sphere_dims": _list_of(int),
        "sphere_samples": _f(int), "gamma": _f(float, int),
        "fluctuation_pairs": _f(int), "fluctuation_inputs": _f(int),
    },
}

_NEEDS_MODEL = ("bma-regret", "pretrain", "eval-tv", "robustness", "regret-decomp")

_RUNNERS = {
    "gen-model": experiments.run_gen_model,
    "bma-regret": experiments.run_bma_regret,
    "attn-converge": experiments.run_attn_converge,
    "pretrain": experiments.run_pretrain,
    "eval-tv": experiments.run_eval_tv,
    "depth-sweep": experiments.run_depth_sweep,
    "robustness": experiments.run_robustness,
    "regret-decomp": experiments.run_regret_decomp,
    "check-lemmas": experiments.run_check_lemmas,
}


def validate_config(config, schema: dict, path: str = "config") -> None:
    """Reject unknown keys, wrong types, and missing required keys."""
    if not isinstance(config, dict):
        raise SchemaError(path, "expected a mapping")
    for key in config:
        if key not in schema:
            raise SchemaError(f"{path}.{key}", "unknown key")
    for key, spec in schema.items():
        if key not in config:
            if spec.required:
                raise SchemaError(f"{path}.{key}", "required key missing")
            continue
        value = config[key]
        where = f"{path}.{key}"
        if spec.schema is not None:
            validate_config(value, spec.schema, where)
            continue
        if spec.types and not isinstance(value, spec.types):
            # bool is an int subclass; keep them distinct
            ok = isinstance(value, spec.types) and not (
                isinstance(value, bool) and bool not in spec.types)
            if not ok:
                names = "/".join(t.__name__ for t in spec.types)
                raise SchemaError(where, f"expected {names}, got {type(value).__name__}")
        if isinstance(value, bool) and spec.types and bool not in spec.types:
            raise SchemaError(where, "expected a number, got bool")
        if spec.item_types is not None:
            if not isinstance(value, list):
                raise SchemaError(where, "expected a list")
            for i, item in enumerate(value):
                if not isinstance(item, spec.item_types) or isinstance(item, bool):
                    raise SchemaError(f"{where}[{i}]", "wrong list item type")
        if spec.choices is not None and value not in spec.choices:
            raise SchemaError(where, f"must be one of {spec.choices}")


def _check_model_source(subcommand: str, config: dict) -> None:
    if subcommand in _NEEDS_MODEL:
        if "model" not in config and "model_file" not in config:
            raise SchemaError(f"config.model", "one of model/model_file is required")
        if "model" in config and "model_file" in config:
            raise SchemaError(f"config.model", "model and model_file are exclusive")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def config_hash(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _resolve_paths(config: dict, base: Path) -> dict:
    """Resolve relative file paths against the config file's directory."""
    out = dict(config)
    for key in ("model_file", "icl_model_file", "checkpoint"):
        if key in out:
            p = Path(out[key])
            out[key] = str(p if p.is_absolute() else (base / p).resolve())
            if not Path(out[key]).exists():
                raise SchemaError(f"config.{key}", f"file not found: {out[key]}")
    return out


def _verify_outputs(out_dir: Path, cfg_hash: str) -> int:
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        print(f"verify: {manifest_path} missing", file=sys.stderr)
        return 1
    manifest = json.loads(manifest_path.read_text())
    ok = manifest.get("config_hash") == cfg_hash
    if not ok:
        print("verify: config hash mismatch", file=sys.stderr)
    for name, digest in manifest.get("artifacts", {}).items():
        path = out_dir / name
        if not path.exists() or _sha256(path) != digest:
            print(f"verify: artifact {name} missing or altered", file=sys.stderr)
            ok = False
    print("verify: OK" if ok else "verify: FAILED")
    return 0 if ok else 1


def run(subcommand: str, config_path: str, seed: int | None = None,
        out_dir: str | None = None, deterministic: bool = False,
        threads: int = 1, verify: bool = False) -> int:
    """Programmatic entry point; returns the process exit code."""
    config_file = Path(config_path)
    raw = yaml.safe_load(config_file.read_text()) or {}
    validate_config(raw, SCHEMAS[subcommand])
    _check_model_source(subcommand, raw)
    config = _resolve_paths(raw, config_file.parent.resolve())
    cfg_hash = config_hash(raw)
    if seed is None:
        seed = 0
    if out_dir is None:
        out_dir = os.environ.get("ICL_BMA_LAB_OUT", ".")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if verify:
        return _verify_outputs(out, cfg_hash)
    if deterministic:
        threads = 1
        import torch
        torch.set_num_threads(1)
    started = time.time()
    payload, curves = _RUNNERS[subcommand](config, seed, out, threads=threads)
    wall = time.time() - started

    results = {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "subcommand": subcommand,
        "config_hash": cfg_hash,
        "seeds": [seed],
        "deterministic": deterministic,
        "payload": _jsonable(payload),
        "wall_clock_s": round(wall, 3),
    }
    results_path = out / "results.json"
    results_path.write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    artifact_names = ["results.json"]
    for stem, (header, rows) in curves.items():
        name = f"{stem}.csv"
        _write_csv(out / name, header, rows)
        artifact_names.append(name)
    extra = payload.get("model_file")
    if extra and (out / extra).exists():
        artifact_names.append(extra)
    if (out / "checkpoint.bin").exists() and subcommand == "pretrain":
        artifact_names.append("checkpoint.bin")
    manifest = {
        "subcommand": subcommand,
        "config_hash": cfg_hash,
        "seeds": [seed],
        "library_version": __version__,
        "wall_clock_s": round(wall, 3),
        "artifacts": {name: _sha256(out / name) for name in artifact_names},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="icl-bma-lab",
        description="Seeded experiment runner for the BMA/attention laboratory")
    parser.add_argument("subcommand", choices=sorted(_RUNNERS))
    parser.add_argument("--config", required=True, help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    parser.add_argument("--out", default=None,
                        help="output dir (default $ICL_BMA_LAB_OUT or .)")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-reproducible mode")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--verify", action="store_true",
                        help="re-derive artifact hashes instead of running")
    args = parser.parse_args(argv)
    try:
        return run(args.subcommand, args.config, seed=args.seed, out_dir=args.out,
                   deterministic=args.deterministic, threads=args.threads,
                   verify=args.verify)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SureInequalityError as exc:
        print(f"sure inequality failed (implementation bug): {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
