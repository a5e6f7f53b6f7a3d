"""Experiment harness: attack batches, encoder sweeps, ablations, reports.

Configs are single strict JSON documents (unknown fields rejected, every
field defaulted). Batches are deterministic given (config, seed): run k
derives everything from seed + k, so reports are byte-identical across
reruns and independent of worker scheduling.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data as dio
from .attack import (
    AttackConfig,
    reconstruct,
    reconstruct_raw_dlg,
    reconstruct_without_label_prediction,
)
from .client import client_step, save_leak
from .digits import make_digit_dataset
from .metrics import eval_convergence, psnr, ssim
from .model import EncoderStructure, build_model, save_model

SWEEP_STRUCTURES = ["Conv2", "Conv4", "Conv8", "Res1", "Res3", "Res6"]

DEFAULT_CONFIG = {
    "dataset": {
        "kind": "synthetic-digits",
        "count": 32,
        "seed": 1,
        "images": None,
        "labels": None,
        "path": None,
        "root": None,
    },
    "image_size": 28,
    "channels": 1,
    "peft_mode": "SoftPrompt",
    "encoder": {"kind": "Conv2", "feature_dim": 64},
    "model": {
        "embed_dim": 64,
        "prompt_tokens": 8,
        "text_hidden": 64,
        "text_layers": 2,
        "logit_scale": 100.0,
        "adapter_hidden": None,
    },
    "attack": {
        "iterations": 2000,
        "step_size": 0.1,
        "tv_alpha_start": 0.1,
        "tv_alpha_end_factor": 0.001,
        "matching_loss": "squared_l2",
        "init_distribution": "uniform01",
        "box_project": True,
    },
    "client_eta": 0.01,
    "runs": 10,
    "seed": 0,
    "structures": SWEEP_STRUCTURES,
    "out_dir": "parvo-out",
}


def _merge_strict(defaults: dict, given: dict, path="config") -> dict:
    out = {}
    for key, dval in defaults.items():
        if key in given:
            gval = given[key]
            if isinstance(dval, dict) and isinstance(gval, dict):
                out[key] = _merge_strict(dval, gval, path + "." + key)
            else:
                out[key] = gval
        else:
            out[key] = json.loads(json.dumps(dval)) if isinstance(dval, (dict, list)) else dval
    unknown = set(given) - set(defaults)
    if unknown:
        raise ValueError("unknown config field(s) %s under %s" % (sorted(unknown), path))
    return out


def load_config(path=None, overrides=None) -> dict:
    given = {}
    if path is not None:
        with open(path) as f:
            given = json.load(f)
    cfg = _merge_strict(DEFAULT_CONFIG, given)
    if overrides:
        for k, v in overrides.items():
            if v is not None:
                cfg[k] = v
    if cfg["image_size"] not in (28, 32, 64) and path is not None:
        raise ValueError("image_size must be one of 28, 32, 64")
    return cfg


def load_dataset(cfg: dict) -> dio.Dataset:
    spec = cfg["dataset"]
    kind = spec["kind"]
    if kind == "synthetic-digits":
        return make_digit_dataset(spec["count"], size=cfg["image_size"], seed=spec["seed"])
    if kind == "mnist-idx":
        return dio.load_mnist_idx(spec["images"], spec["labels"])
    if kind == "cifar10-bin":
        return dio.load_cifar10_bin(spec["path"])
    if kind == "image-dir":
        return dio.load_image_dir(spec["root"])
    raise ValueError("unknown dataset kind %r" % kind)


def _prepare_image(img, cfg):
    size = cfg["image_size"]
    channels = cfg["channels"]
    if channels == 1 and img.ndim == 3:
        img = dio.to_grayscale(img)
    if channels == 3 and img.ndim == 2:
        img = np.stack([img] * 3)
    if img.shape[-2:] != (size, size):
        img = dio.resize_bilinear(img, size, size)
    return np.clip(img, 0.0, 1.0)


def _build_run_model(cfg: dict, run_seed: int, class_names, structure_kind=None):
    m = cfg["model"]
    enc = cfg["encoder"]
    structure = EncoderStructure(
        kind=structure_kind or enc["kind"], feature_dim=enc["feature_dim"]
    )
    return build_model(
        structure=structure,
        class_names=class_names,
        peft_mode=cfg["peft_mode"],
        seed=run_seed,
        image_hw=(cfg["image_size"], cfg["image_size"]),
        channels=cfg["channels"],
        embed_dim=m["embed_dim"],
        prompt_tokens=m["prompt_tokens"],
        text_hidden=m["text_hidden"],
        text_layers=m["text_layers"],
        adapter_hidden=m["adapter_hidden"],
        logit_scale=m["logit_scale"],
    )


def _attack_config(cfg: dict, run_seed: int) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(
        iterations=a["iterations"],
        step_size=a["step_size"],
        tv_alpha_start=a["tv_alpha_start"],
        tv_alpha_end_factor=a["tv_alpha_end_factor"],
        matching_loss=a["matching_loss"],
        seed=run_seed,
        init_distribution=a["init_distribution"],
        box_project=a["box_project"],
    )


ARM_FUNCS = {
    "full": reconstruct,
    "no_label": reconstruct_without_label_prediction,
    "raw": reconstruct_raw_dlg,
}


def _single_run(cfg, k, image, label, class_names, structure_kind=None, arm="full"):
    run_seed = cfg["seed"] + k
    t0 = time.perf_counter()
    model = _build_run_model(cfg, run_seed, class_names, structure_kind)
    leak = client_step(model, image, label, cfg["client_eta"])
    result = ARM_FUNCS[arm](leak, model, _attack_config(cfg, run_seed))
    wall_ms = 1000.0 * (time.perf_counter() - t0)
    row = {
        "run": k,
        "target_class": int(label),
        "predicted_class": int(result.predicted_label),
        "psnr_db": psnr(result.x_star, image),
        "ssim": ssim(result.x_star, image),
        "converged_opt": int(result.converged),
        "converged_eval": int(eval_convergence(result.x_star, image)),
        "iterations": result.iterations_run,
    }
    return row, result, wall_ms


def _pick(cfg, dataset, k):
    rng = np.random.default_rng(cfg["seed"] + k)
    idx = int(rng.integers(len(dataset.images)))
    img = _prepare_image(np.asarray(dataset.images[idx]), cfg)
    return img, dataset.labels[idx]


@dataclass
class ExperimentReport:
    kind: str
    rows: list
    aggregates: dict
    columns: list


def _agg_attack(rows) -> dict:
    def vals(key, flt=None):
        sel = [r for r in rows if flt is None or r[flt]]
        return [r[key] for r in sel]

    conv = [r for r in rows if r["converged_eval"]]
    out = {
        "runs": len(rows),
        "mean_psnr_db": float(np.mean([r["psnr_db"] for r in rows])) if rows else 0.0,
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else 0.0,
        "convergence_rate": float(np.mean([r["converged_eval"] for r in rows])) if rows else 0.0,
        "label_accuracy": (
            float(np.mean([r["predicted_class"] == r["target_class"] for r in rows])) if rows else 0.0
        ),
        "median_psnr_db_converged": float(np.median([r["psnr_db"] for r in conv])) if conv else 0.0,
        "median_ssim_converged": float(np.median([r["ssim"] for r in conv])) if conv else 0.0,
    }
    return out


ATTACK_COLUMNS = [
    "run",
    "target_class",
    "predicted_class",
    "psnr_db",
    "ssim",
    "converged_opt",
    "converged_eval",
    "iterations",
]


def _parallel_map(fn, args_list, jobs):
    if jobs <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futs]


def _attack_one(cfg, k, image, label, class_names, structure_kind, arm, out_dir):
    row, result, wall_ms = _single_run(cfg, k, image, label, class_names, structure_kind, arm)
    if out_dir is not None:
        tag = "run_%d" % k
        _save_image(result.x_star, os.path.join(out_dir, tag + "_recon"))
        _save_image(image, os.path.join(out_dir, tag + "_target"))
        with open(os.path.join(out_dir, tag + ".json"), "w") as f:
            json.dump(
                {
                    **row,
                    "wall_time_ms": wall_ms,
                    "loss_first": result.loss_curve[0],
                    "loss_final": result.loss_curve[-1],
                },
                f,
                indent=2,
            )
    return row


def _save_image(img, stem):
    if img.ndim == 2:
        dio.write_pgm(img, stem + ".pgm")
    else:
        dio.write_png(img, stem + ".png")


def run_attack(cfg: dict, out_dir=None, jobs: int = 1) -> ExperimentReport:
    """Reconstruction batch: one victim/leak/attack per run index."""
    dataset = load_dataset(cfg)
    args = []
    for k in range(cfg["runs"]):
        img, label = _pick(cfg, dataset, k)
        args.append((cfg, k, img, label, dataset.class_names, None, "full", out_dir))
    rows = _parallel_map(_attack_one, args, jobs)
    rows.sort(key=lambda r: r["run"])
    return ExperimentReport("attack", rows, _agg_attack(rows), ATTACK_COLUMNS)


def run_sweep(cfg: dict, structures=None, out_dir=None, jobs: int = 1) -> ExperimentReport:
    """Convergence probability and relative PSNR across encoder structures."""
    structures = list(structures or cfg["structures"])
    for s in structures:
        if s not in SWEEP_STRUCTURES:
            raise ValueError("unknown sweep structure %r" % s)
    dataset = load_dataset(cfg)
    args = []
    for si, struct in enumerate(structures):
        for k in range(cfg["runs"]):
            img, label = _pick(cfg, dataset, k)
            args.append((cfg, k, img, label, dataset.class_names, struct, "full", None))
    flat = _parallel_map(_attack_one, args, jobs)
    rows = []
    base_psnr = None
    for si, struct in enumerate(structures):
        sub = flat[si * cfg["runs"] : (si + 1) * cfg["runs"]]
        mean_psnr = float(np.mean([r["psnr_db"] for r in sub]))
        conv = float(np.mean([r["converged_eval"] for r in sub]))
        if base_psnr is None:
            base_psnr = mean_psnr
        rows.append(
            {
                "structure": struct,
                "conv_prob": conv,
                "psnr_ratio": 100.0 if si == 0 else 100.0 * mean_psnr / base_psnr,
            }
        )
    agg = {
        "structures": structures,
        "conv_prob": {r["structure"]: r["conv_prob"] for r in rows},
        "psnr_ratio": {r["structure"]: r["psnr_ratio"] for r in rows},
    }
    return ExperimentReport("sweep", rows, agg, ["structure", "conv_prob", "psnr_ratio"])


ABLATION_ARMS = ["raw", "no_label", "full"]


def run_ablation(cfg: dict, out_dir=None, jobs: int = 1) -> ExperimentReport:
    """Three attack arms on identical seeds (identical dummy-image inits)."""
    dataset = load_dataset(cfg)
    args = []
    for k in range(cfg["runs"]):
        img, label = _pick(cfg, dataset, k)
        for arm in ABLATION_ARMS:
            args.append((cfg, k, img, label, dataset.class_names, None, arm, None))
    flat = _parallel_map(_attack_one, args, jobs)
    rows = []
    for k in range(cfg["runs"]):
        row = {"run": k}
        for ai, arm in enumerate(ABLATION_ARMS):
            r = flat[k * len(ABLATION_ARMS) + ai]
            row[arm + "_psnr_db"] = r["psnr_db"]
            row[arm + "_ssim"] = r["ssim"]
            row[arm + "_converged"] = r["converged_eval"]
        rows.append(row)
    agg = {}
    for arm in ABLATION_ARMS:
        agg["mean_psnr_db_" + arm] = float(np.mean([r[arm + "_psnr_db"] for r in rows]))
        agg["mean_ssim_" + arm] = float(np.mean([r[arm + "_ssim"] for r in rows]))
        agg["success_rate_" + arm] = float(np.mean([r[arm + "_converged"] for r in rows]))
    cols = ["run"]
    for arm in ABLATION_ARMS:
        cols += [arm + "_psnr_db", arm + "_ssim", arm + "_converged"]
    return ExperimentReport("ablation", rows, agg, cols)


def make_leak(cfg: dict, out_dir, index: int = 0):
    """Simulate the victim for one run index; write model + leak files."""
    dataset = load_dataset(cfg)
    img, label = _pick(cfg, dataset, index)
    model = _build_run_model(cfg, cfg["seed"] + index, dataset.class_names)
    leak = client_step(model, img, label, cfg["client_eta"])
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, "model.json")
    leak_path = os.path.join(out_dir, "leak_%d.bin" % index)
    save_model(model, model_path)
    save_leak(leak, leak_path)
    return model_path, leak_path


# ---------------------------------------------------------------------------
# report I/O
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report: ExperimentReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as f:
        f.write(",".join(report.columns) + "\n")
        for row in report.rows:
            f.write(",".join(_fmt(row[c]) for c in report.columns) + "\n")
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump({"kind": report.kind, "aggregates": report.aggregates}, f, indent=2)


def _parse_cell(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_report_rows(csv_path):
    with open(csv_path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    cols = lines[0].split(",")
    rows = [dict(zip(cols, (_parse_cell(c) for c in ln.split(",")))) for ln in lines[1:]]
    return cols, rows


def verify_report(out_dir) -> bool:
    """Recompute aggregates from the CSV rows; exact match required."""
    with open(os.path.join(out_dir, "report.json")) as f:
        doc = json.load(f)
    cols, rows = read_report_rows(os.path.join(out_dir, "report.csv"))
    kind = doc["kind"]
    if kind == "attack":
        fresh = _agg_attack(rows)
    elif kind == "sweep":
        fresh = {
            "structures": [r["structure"] for r in rows],
            "conv_prob": {r["structure"]: r["conv_prob"] for r in rows},
            "psnr_ratio": {r["structure"]: r["psnr_ratio"] for r in rows},
        }
    elif kind == "ablation":
        fresh = {}
        for arm in ABLATION_ARMS:
            fresh["mean_psnr_db_" + arm] = float(np.mean([r[arm + "_psnr_db"] for r in rows]))
            fresh["mean_ssim_" + arm] = float(np.mean([r[arm + "_ssim"] for r in rows]))
            fresh["success_rate_" + arm] = float(np.mean([r[arm + "_converged"] for r in rows]))
    else:
        raise ValueError("unknown report kind %r" % kind)
    return fresh == doc["aggregates"]
