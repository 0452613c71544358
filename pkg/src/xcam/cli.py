"""Command line front end.

Subcommands: generate, train, explain, evaluate, distill, ablate, roc.
Each run writes a report.json into --out listing the echoed config, the
artifacts produced, and the computed metrics.  Reports carry no clocks or
hostnames, so reruns with identical flags produce byte-identical files;
wall time goes to stderr.

Exit codes are stable per error class: 0 success, 2 missing or unreadable
paths, 3 invalid configuration or malformed input files, 4 numeric aborts,
1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import checkpoint as CKPT
from . import data as DATA
from . import distill as DISTILL
from . import metrics as METRICS
from . import pnm as PNM
from . import render as RENDER
from . import saliency as SAL
from . import zoo as ZOO
from .kernels import BACKEND_NAME

log = logging.getLogger("xcam")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_PATH = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4

# CLI-facing method spellings; guided fusion only makes sense for explain.
METHOD_NAMES = {
    "cam": "cam",
    "grad-cam": "grad_cam",
    "grad-cam++": "grad_cam_pp",
    "grad-cam++perp": "grad_cam_pp_perp",
}
GUIDED = "guided-grad-cam++"


def _setup_logging():
    level_name = os.environ.get("XCAM_LOG", "info").strip().lower()
    levels = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ValueError(f"XCAM_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(
        level=levels[level_name],
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _internal_method(name):
    if name not in METHOD_NAMES:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(METHOD_NAMES)}")
    return METHOD_NAMES[name]


def _float_list(text):
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ValueError(f"expected a comma separated list of numbers, got {text!r}")
    if not values:
        raise ValueError(f"expected a comma separated list of numbers, got {text!r}")
    return values


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _report(out_dir, command, config, artifacts, metrics):
    path = os.path.join(out_dir, "report.json")
    payload = {
        "command": command,
        "config": config,
        "artifacts": sorted(artifacts),
        "metrics": metrics,
    }
    _write_json(path, payload)
    return path


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    return CKPT.load_model(path)


def _load_data(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return DATA.load_dataset(path)


def _table(headers, rows):
    """Fixed-width text table; deterministic for identical inputs."""
    cells = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _map_over(items, fn, jobs):
    """Order-preserving map, optionally threaded."""
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    out = _ensure_out(args.out)
    dataset = DATA.generate(
        seed=args.seed,
        num_samples=args.num_samples,
        size=args.size,
        multi_instance_prob=args.multi_instance_prob,
        val_fraction=args.val_fraction,
    )
    DATA.save_dataset(dataset, out)
    n_train = len(dataset.split("train"))
    n_val = len(dataset.split("val"))
    log.info("generated %d samples (%d train / %d val) into %s",
             args.num_samples, n_train, n_val, out)
    artifacts = [os.path.join(out, "manifest.json"), os.path.join(out, "labels.json"),
                 os.path.join(out, "images")]
    config = {"seed": args.seed, "num_samples": args.num_samples, "size": args.size,
              "multi_instance_prob": args.multi_instance_prob,
              "val_fraction": args.val_fraction}
    _report(out, "generate", config, artifacts,
            {"num_train": n_train, "num_val": n_val})
    return EXIT_OK


def cmd_train(args):
    out = _ensure_out(args.out)
    dataset = _load_data(args.data)
    size = dataset.manifest.image_size
    model = ZOO.build_model(args.model, size=size, seed=args.seed)
    config = ZOO.TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                             epochs=args.epochs, batch_size=args.batch_size,
                             seed=args.seed)
    X, y = DATA.to_arrays(dataset.split("train"))
    t0 = time.perf_counter()
    model, losses = ZOO.train(model, (X, y), config)
    log.info("trained %s for %d epochs in %.1fs (final loss %.4f)",
             args.model, args.epochs, time.perf_counter() - t0, losses[-1])

    Xv, yv = DATA.to_arrays(dataset.split("val"))
    acc = {}
    for tag, (bx, by) in (("train", (X, y)), ("val", (Xv, yv))):
        hits = sum(int(ZOO.predict(model, im)[0] == lab) for im, lab in zip(bx, by))
        acc[tag] = hits / len(by) if len(by) else 0.0

    ckpt_path = os.path.join(out, "model.ckpt")
    CKPT.save_model(model, ckpt_path)
    trace_path = os.path.join(out, "loss_trace.json")
    _write_json(trace_path, {"epoch_losses": losses})
    cfg = {"model": args.model, "data": args.data, "seed": args.seed,
           "epochs": args.epochs, "lr": args.lr, "momentum": args.momentum,
           "batch_size": args.batch_size}
    _report(out, "train", cfg, [ckpt_path, trace_path],
            {"final_loss": losses[-1], "train_accuracy": acc["train"],
             "val_accuracy": acc["val"], "param_count": model.param_count()})
    log.info("accuracy train %.3f val %.3f", acc["train"], acc["val"])
    return EXIT_OK


def _explain_artifacts(out, model, image, method_cli, class_index, delta,
                       uniform_alpha):
    """Shared by explain: returns (artifact paths, metrics dict)."""
    artifacts = []
    base_method = "grad_cam_pp" if method_cli == GUIDED else _internal_method(method_cli)
    smap, tape = SAL.explain(model, image, method=base_method,
                             class_index=class_index,
                             uniform_alpha=uniform_alpha)
    cls = smap.class_index
    probs = ZOO.softmax_probs(tape.penultimate_scores)

    sal_pgm = os.path.join(out, "saliency.pgm")
    SAL.save_saliency_p5(sal_pgm, smap)
    sal_json = os.path.join(out, "saliency.json")
    SAL.save_saliency_json(sal_json, smap)
    artifacts += [sal_pgm, sal_json]

    h, w = image.shape[-2:]
    up = SAL.upsample_bilinear(smap, h, w)
    norm = SAL.normalize01(up)

    overlay = RENDER.render_heatmap(norm, image)
    overlay_path = os.path.join(out, "overlay.ppm")
    PNM.write_image(overlay_path, overlay)
    artifacts.append(overlay_path)

    emap = SAL.explanation_map(norm, image, source=smap)
    emap_path = os.path.join(out, "explanation.ppm")
    PNM.write_image(emap_path, emap.values)
    artifacts.append(emap_path)

    if delta is not None:
        mask = SAL.normalize_threshold(up, delta)
        mask_path = os.path.join(out, "threshold_mask.pgm")
        PNM.write_image(mask_path, mask)
        artifacts.append(mask_path)

    if method_cli == GUIDED:
        import xcam.graph as G
        gb = G.guided_backward(model, tape, cls)
        fused = SAL.guided_fuse(gb, norm)
        lo, hi = fused.min(), fused.max()
        vis = (fused - lo) / (hi - lo) if hi > lo else np.zeros_like(fused)
        guided_path = os.path.join(out, "guided_fused.ppm")
        PNM.write_image(guided_path, vis)
        artifacts.append(guided_path)

    metrics = {
        "class_index": int(cls),
        "predicted_class": int(np.argmax(tape.penultimate_scores)),
        "class_probabilities": [float(p) for p in probs],
        "saliency_shape": list(smap.values.shape),
    }
    return artifacts, metrics


def cmd_explain(args):
    out = _ensure_out(args.out)
    model = _load_model(args.model)
    if not os.path.exists(args.image):
        raise FileNotFoundError(f"image file not found: {args.image}")
    image = PNM.read_image(args.image)
    if image.ndim == 2:
        image = np.stack([image] * 3)
    if args.method not in METHOD_NAMES and args.method != GUIDED:
        raise ValueError(
            f"unknown method {args.method!r}; choose from "
            f"{sorted(METHOD_NAMES) + [GUIDED]}")
    artifacts, metrics = _explain_artifacts(
        out, model, image, args.method, args.class_index, args.delta,
        args.uniform_alpha)
    cfg = {"model": args.model, "image": args.image, "method": args.method,
           "class": args.class_index, "delta": args.delta,
           "uniform_alpha": args.uniform_alpha}
    _report(out, "explain", cfg, artifacts, metrics)
    log.info("explained class %d with %s", metrics["class_index"], args.method)
    return EXIT_OK


def _faithfulness_for_image(model, sample, method):
    """One image's (full confidence, explanation-map confidence) pair at the
    predicted class, plus the true-class map for localization."""
    image = sample.image
    pred, probs = ZOO.predict(model, image)
    h, w = image.shape[-2:]

    smap, _tape = SAL.explain(model, image, method=method, class_index=int(pred))
    up = SAL.upsample_bilinear(smap, h, w)
    emap = SAL.explanation_map(SAL.normalize01(up), image)
    _, probs_e = ZOO.predict(model, emap.values)
    pair = METRICS.ConfidencePair(
        full_image_confidence=float(probs[pred]),
        explanation_confidence=float(probs_e[pred]),
        class_index=int(pred))

    smap_true, _ = SAL.explain(model, image, method=method,
                               class_index=int(sample.label))
    up_true = SAL.upsample_bilinear(smap_true, h, w)
    return pair, up_true


def cmd_evaluate(args):
    out = _ensure_out(args.out)
    model = _load_model(args.model)
    dataset = _load_data(args.data)
    samples = dataset.split(args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} has no samples")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    internal = [_internal_method(m) for m in methods]
    deltas = args.delta_list

    t0 = time.perf_counter()
    per_method = {}
    for cli_name, method in zip(methods, internal):
        results = _map_over(
            samples,
            lambda s, m=method: _faithfulness_for_image(model, s, m),
            args.jobs)
        pairs = [r[0] for r in results]
        per_method[cli_name] = {
            "pairs": pairs,
            "true_maps": [r[1] for r in results],
        }
        log.info("method %s: %d images scored", cli_name, len(pairs))

    metrics = {}
    for cli_name in methods:
        pairs = per_method[cli_name]["pairs"]
        true_maps = per_method[cli_name]["true_maps"]
        loc = {}
        for delta in deltas:
            scores = []
            for sample, up in zip(samples, true_maps):
                mask = SAL.normalize_threshold(up, delta)
                scores.append(METRICS.localization_iou(mask, sample.boxes))
            loc[repr(float(delta))] = float(np.mean(scores))
        metrics[cli_name] = {
            "average_drop_pct": METRICS.average_drop(pairs),
            "pct_increase_confidence": METRICS.pct_increase_confidence(pairs),
            "mean_loc": loc,
        }

    wins = {}
    for i in range(len(methods)):
        for j in range(i + 1, len(methods)):
            a, b = methods[i], methods[j]
            drops_a = [p.full_image_confidence - p.explanation_confidence
                       for p in per_method[a]["pairs"]]
            drops_b = [p.full_image_confidence - p.explanation_confidence
                       for p in per_method[b]["pairs"]]
            pa, pb = METRICS.win_pct(drops_a, drops_b)
            wins[f"{a} vs {b}"] = [pa, pb]

    log.info("evaluate took %.1fs", time.perf_counter() - t0)

    headers = ["method", "avg drop %", "% incr conf"] + [f"loc d={d:g}" for d in deltas]
    rows = []
    for m in methods:
        e = metrics[m]
        rows.append([m, f"{e['average_drop_pct']:.2f}",
                     f"{e['pct_increase_confidence']:.2f}"]
                    + [f"{e['mean_loc'][repr(float(d))]:.4f}" for d in deltas])
    table = _table(headers, rows)
    if wins:
        win_rows = [[k, f"{v[0]:.1f}", f"{v[1]:.1f}"] for k, v in sorted(wins.items())]
        table += "\n" + _table(["pairing", "win % (left)", "win % (right)"], win_rows)
    sys.stdout.write(table)
    table_path = os.path.join(out, "tables.txt")
    _write_text(table_path, table)

    metrics_path = os.path.join(out, "metrics.json")
    _write_json(metrics_path, {"methods": metrics, "win_pct": wins})
    cfg = {"model": args.model, "data": args.data, "split": args.split,
           "methods": args.methods, "delta_list": deltas, "jobs": args.jobs}
    _report(out, "evaluate", cfg, [table_path, metrics_path],
            {"methods": metrics, "win_pct": wins, "num_images": len(samples)})
    return EXIT_OK


def _val_error(model, split):
    X, y = DATA.to_arrays(split)
    hits = sum(int(ZOO.predict(model, im)[0] == lab) for im, lab in zip(X, y))
    return 100.0 * (1.0 - hits / len(y))


def cmd_distill(args):
    out = _ensure_out(args.out)
    teacher = _load_model(args.teacher)
    dataset = _load_data(args.data)
    size = dataset.manifest.image_size
    train_cfg = ZOO.TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                                epochs=args.epochs, batch_size=args.batch_size,
                                seed=args.seed)

    variants = [("ce", 0.0, False), ("ce_interpret", args.lambda_interpret, False)]
    if args.kd:
        variants += [("ce_kd", 0.0, True),
                     ("ce_interpret_kd", args.lambda_interpret, True)]

    train_data = DATA.to_arrays(dataset.split("train"))
    val_split = dataset.split("val")
    artifacts = []
    summary = {}
    for name, lam, use_kd in variants:
        cfg = DISTILL.DistillConfig(
            lambda_interpret=lam, use_kd=use_kd,
            kd_temperature=args.temperature,
            saliency_method=_internal_method(args.method),
            train=train_cfg)
        student = ZOO.build_model("student", size=size, seed=args.seed)
        t0 = time.perf_counter()
        student, traces = DISTILL.distill_train(student, teacher, train_data, cfg)
        log.info("variant %s trained in %.1fs", name, time.perf_counter() - t0)
        err = _val_error(student, val_split)
        ckpt_path = os.path.join(out, f"student_{name}.ckpt")
        CKPT.save_model(student, ckpt_path)
        trace_path = os.path.join(out, f"traces_{name}.json")
        _write_json(trace_path, traces)
        artifacts += [ckpt_path, trace_path]
        summary[name] = {"val_error_pct": err,
                         "final_total_loss": traces["total"][-1]}

    summary["teacher"] = {"val_error_pct": _val_error(teacher, val_split)}

    rows = [[k, f"{v['val_error_pct']:.2f}"] for k, v in sorted(summary.items())]
    table = _table(["variant", "val error %"], rows)
    sys.stdout.write(table)
    table_path = os.path.join(out, "comparison.txt")
    _write_text(table_path, table)
    artifacts.append(table_path)

    cfg_echo = {"teacher": args.teacher, "data": args.data, "seed": args.seed,
                "epochs": args.epochs, "lr": args.lr, "momentum": args.momentum,
                "batch_size": args.batch_size,
                "lambda_interpret": args.lambda_interpret, "kd": args.kd,
                "temperature": args.temperature, "method": args.method}
    _report(out, "distill", cfg_echo, artifacts, summary)
    return EXIT_OK


def cmd_ablate(args):
    out = _ensure_out(args.out)
    model = _load_model(args.model)
    dataset = _load_data(args.data)
    samples = dataset.split(args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} has no samples")

    metrics = {}
    for cli_name in ("grad-cam++", "grad-cam++perp"):
        method = _internal_method(cli_name)
        results = _map_over(
            samples,
            lambda s, m=method: _faithfulness_for_image(model, s, m),
            args.jobs)
        pairs = [r[0] for r in results]
        metrics[cli_name] = {
            "average_drop_pct": METRICS.average_drop(pairs),
            "pct_increase_confidence": METRICS.pct_increase_confidence(pairs),
        }

    rows = [[m, f"{metrics[m]['average_drop_pct']:.2f}",
             f"{metrics[m]['pct_increase_confidence']:.2f}"]
            for m in sorted(metrics)]
    table = _table(["method", "avg drop %", "% incr conf"], rows)
    sys.stdout.write(table)
    table_path = os.path.join(out, "ablation.txt")
    _write_text(table_path, table)
    metrics_path = os.path.join(out, "ablation.json")
    _write_json(metrics_path, metrics)

    cfg = {"model": args.model, "data": args.data, "split": args.split,
           "jobs": args.jobs}
    _report(out, "ablate", cfg, [table_path, metrics_path], metrics)
    return EXIT_OK


def cmd_roc(args):
    out = _ensure_out(args.out)
    model = _load_model(args.model)
    dataset = _load_data(args.data)
    samples = dataset.split(args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} has no samples")
    method = _internal_method(args.method)
    theta = args.theta_grid

    def one(sample):
        image = sample.image
        pred, _ = ZOO.predict(model, image)
        smap, _tape = SAL.explain(model, image, method=method,
                                  class_index=int(pred))
        up = SAL.upsample_bilinear(smap, *image.shape[-2:])
        return SAL.normalize01(up)

    maps = _map_over(samples, one, args.jobs)
    images = [s.image for s in samples]
    points = METRICS.occlusion_roc(model, images, maps, theta)
    csv_path = os.path.join(out, "roc.csv")
    _write_text(csv_path, METRICS.roc_csv(points))

    cfg = {"model": args.model, "data": args.data, "split": args.split,
           "method": args.method, "theta_grid": theta, "jobs": args.jobs}
    _report(out, "roc", cfg, [csv_path],
            {"points": {repr(float(t)): [rc, af] for t, rc, af in points}})
    log.info("roc over %d thresholds on %d images", len(theta), len(images))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="xcam",
        description="gradient-based visual explanations for small CNNs "
                    f"(kernel backend: {BACKEND_NAME})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic shapes dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-samples", type=int, default=300)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--multi-instance-prob", type=float, default=0.3)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model from the zoo")
    p.add_argument("--model", choices=sorted(ZOO.MODEL_NAMES), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="saliency artifacts for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", default="grad-cam++")
    p.add_argument("--class", dest="class_index", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--uniform-alpha", action="store_true",
                   help="debug: constant pixel weights (reduces ++ to plain)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="faithfulness and localization tables")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--methods", default="grad-cam,grad-cam++")
    p.add_argument("--delta-list", type=_float_list, default=[0.0, 0.25, 0.5])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("distill", help="train students against a teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lambda-interpret", type=float, default=0.01)
    p.add_argument("--kd", action="store_true")
    p.add_argument("--temperature", type=float, default=4.0)
    p.add_argument("--method", default="grad-cam++")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("ablate", help="compare ++ against its no-gate variant")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("roc", help="occlusion curve over thresholds")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--method", default="grad-cam++")
    p.add_argument("--theta-grid", type=_float_list,
                   default=[i / 10 for i in range(11)])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_roc)

    return parser


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main(argv=None):
    try:
        _setup_logging()
        return run(argv)
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        log.error("%s", exc)
        return EXIT_PATH
    except ZOO.TrainingDiverged as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_PATH
    except Exception as exc:  # pragma: no cover - defensive
        log.error("unexpected failure: %s", exc)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
