"""End-to-end scenario runs and cross-run comparison.

Output directory layout (stable; other tools may rely on it)::

    <out>/metrics.csv       one row per (method, round); columns = flt.federation.CSV_COLUMNS
    <out>/graph.json        relatedness graph (only when an flt method ran)
    <out>/summary.json      resolved config, final metrics per method, clustering, traffic
    <out>/checkpoints/      <method>.ckpt (final d x M parameter matrix), encoder.ckpt
    <out>/curves.svg        test accuracy per round (output.plots)
    <out>/bound_report.json bound inputs and values (output.bound_report)
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import nn
from .analysis import BYTES_PER_UNIT, BoundInputs, adjusted_rand_index, bound_report, estimate_smoothness
from .config import ScenarioConfig, load_config
from .data import (
    ClientDataset,
    Dataset,
    PartitionSpec,
    gen_gaussian_mixture,
    load_idx,
    partition_pathological,
    sample_structured_noniid,
)
from .federation import CSV_COLUMNS, FederationConfig, metrics_csv, run_federation
from .relatedness import run_fcr
from .umap import UmapParams

__all__ = [
    "OUTPUT_DIR_ENV",
    "StageError",
    "ReportError",
    "ExperimentResult",
    "build_dataset",
    "build_partition",
    "build_model",
    "build_encoder",
    "run_scenario",
    "run_experiment",
    "compare_report",
    "write_svg_curves",
]

OUTPUT_DIR_ENV = "FLT_OUTPUT_DIR"
_PRETRAIN_STREAM = 0xAE


class StageError(RuntimeError):
    """A run failed; ``stage`` names the pipeline step."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


class ReportError(ValueError):
    pass


@dataclass
class ExperimentResult:
    out_dir: Path
    summary: dict
    results: dict  # method -> FederationResult
    graph: object = None


# ---------------------------------------------------------------------------
# pipeline pieces


def build_dataset(cfg: ScenarioConfig) -> Dataset:
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        L, dims = ds["num_classes"], ds["dims"]
        means = np.random.default_rng(cfg.seed).standard_normal((L, dims)) * ds["mean_scale"]
        return gen_gaussian_mixture(L, dims, means, ds["std"], ds["samples_per_class"], seed=cfg.seed)
    data = load_idx(cfg.path(ds["images"]), cfg.path(ds["labels"]), ds.get("num_classes"))
    if ds.get("limit"):
        n = min(ds["limit"], len(data.y))
        data = Dataset(data.X[:n], data.y[:n], data.num_classes)
    return data


def build_partition(cfg: ScenarioConfig, data: Dataset):
    p = cfg.partition
    if p["mode"] == "structured":
        spec = PartitionSpec(mode="structured", M=p["M"], C=p["C"], labels_per_cluster=p["labels_per_cluster"],
                             alpha=p["alpha"], delta=p["delta"], test_fraction=p["test_fraction"], seed=cfg.seed)
        return sample_structured_noniid(data, spec, p["cluster_labels"], p["cluster_membership"])
    return partition_pathological(data, p["M"], p["C"], p["labels_per_cluster"],
                                  overlap=1 if p["mode"] == "overlap1" else 0, seed=cfg.seed,
                                  samples_per_client=p["samples_per_client"], test_fraction=p["test_fraction"])


def build_model(cfg: ScenarioConfig, data: Dataset) -> nn.Model:
    m = cfg.model
    shape = data.X.shape[1:]
    if m["architecture"] == "mlp":
        return nn.mlp(shape, data.num_classes, hidden=m["hidden"], dropout=m["dropout"], seed=cfg.seed)
    if m["architecture"] == "small_cnn":
        return nn.small_cnn(shape[-1], data.num_classes, seed=cfg.seed)
    model = nn.Model.from_config({"input_shape": list(shape), "layers": m["layers"]}, seed=cfg.seed)
    if model.output_shape != (data.num_classes,):
        raise nn.ShapeError(f"custom model outputs {model.output_shape}, expected ({data.num_classes},)")
    return model


def build_encoder(cfg: ScenarioConfig, data: Dataset):
    """Returns ``(encoder, autoencoder or None, broadcast size in parameters)``."""
    e = cfg.encoder
    shape = data.X.shape[1:]
    if e["mode"] == "identity":
        return nn.identity_encoder(shape), None, 0
    if e["architecture"] == "conv_ae":
        if len(shape) != 2 or shape[0] != shape[1]:
            raise nn.ShapeError(f"conv_ae needs square images, data samples have shape {shape}")
        ae, depth = nn.conv_autoencoder(shape[0], e["latent_dim"], seed=cfg.seed), nn.CONV_AE_ENCODER_DEPTH
    else:
        if len(shape) != 1:
            raise nn.ShapeError(f"dense_ae needs vector samples, data samples have shape {shape}")
        ae = nn.dense_autoencoder(shape[0], e["latent_dim"], hidden=e["hidden"], seed=cfg.seed)
        depth = nn.DENSE_AE_ENCODER_DEPTH
    if e.get("checkpoint"):
        _, vec = nn.load_checkpoint(cfg.path(e["checkpoint"]))
        ae = nn.unflatten_params(ae, vec)
    elif e["pretrain_epochs"] > 0:
        rng = np.random.default_rng([cfg.seed, _PRETRAIN_STREAM])
        n = len(data.X) if not e["pretrain_samples"] else min(e["pretrain_samples"], len(data.X))
        idx = rng.choice(len(data.X), size=n, replace=False)
        ae = nn.finetune_autoencoder(ae, (data.X[idx], data.y[idx]), epochs=e["pretrain_epochs"],
                                     lr=e["pretrain_lr"], batch_size=e["pretrain_batch_size"], rng=rng)
    enc = nn.encoder_from_autoencoder(ae, depth)
    # clients that fine-tune need the whole autoencoder, otherwise the encoder half suffices
    units = ae.num_params if e["mode"] == "enc-finetune" else enc.model.num_params
    return enc, ae, units


def _drift_schedule(events, clients, truth):
    """Swap events -> ({round: {client_id: ClientDataset}}, {round: true assignment}), applied cumulatively."""
    current = list(clients)
    assignment = np.array(truth, copy=True)
    out: dict = {}
    truths = {1: assignment.copy()}
    for ev in sorted(events, key=lambda d: d["round"]):
        a, b = ev["client"], ev["swap_with"]
        da, db = current[a], current[b]
        current[a] = ClientDataset(a, db.train, db.test, da.p)
        current[b] = ClientDataset(b, da.train, da.test, db.p)
        out.setdefault(ev["round"], {}).update({a: current[a], b: current[b]})
        assignment[[a, b]] = assignment[[b, a]]
        truths[max(ev["round"], 1)] = assignment.copy()
    return out, truths


def _global_objective(template, W, clients) -> float:
    total = 0.0
    for i, c in enumerate(clients):
        m = nn.unflatten_params(template, W[:, i])
        x, y = nn._arrays(c.train)
        total += nn._loss(nn.forward(m, x), y, "cross_entropy")[0]
    return float(total)


def _bound_inputs(cfg, clients, template, graph, fed_result, data) -> BoundInputs:
    counts = np.stack([np.bincount(c.train.y, minlength=data.num_classes) for c in clients])
    rng = np.random.default_rng([cfg.seed, 0xB0])
    idx = rng.choice(len(data.X), size=min(500, len(data.X)), replace=False)
    L = estimate_smoothness(template, (data.X[idx], data.y[idx]), trials=3, seed=cfg.seed, radius=0.1)
    fed = cfg.federation
    e = cfg.encoder
    return BoundInputs(
        counts=counts,
        p_err=cfg.output.get("bound_p_err"),
        latent_dim=int(np.prod(data.X.shape[1:])) if e["mode"] == "identity" else e["latent_dim"],
        eta=fed["lr"], L_W=L, A_bar=graph.A_bar, T=fed["T"], M=len(clients),
        F_first=_global_objective(template, fed_result.W_first, clients),
        F_last=_global_objective(template, fed_result.W, clients),
        E=fed["E"],
    )


# ---------------------------------------------------------------------------
# runs


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc


def run_scenario(cfg: ScenarioConfig, out_dir=None, log=None) -> ExperimentResult:
    """Execute a validated scenario and write all artifacts to ``out_dir``."""
    log = log or (lambda msg: None)
    out = Path(os.path.normpath(out_dir if out_dir is not None
                                else os.environ.get(OUTPUT_DIR_ENV) or cfg.path(cfg.output["dir"])))
    fed = cfg.federation
    methods = list(fed["methods"])
    needs_graph = any(m.startswith("flt") for m in methods)

    data = _stage("dataset", build_dataset, cfg)
    log(f"dataset: {len(data.y)} samples, {data.num_classes} classes, sample shape {data.X.shape[1:]}")
    clients, truth = _stage("partition", build_partition, cfg, data)
    log(f"partition: {len(clients)} clients, {truth.num_clusters} ground-truth clusters")
    template = _stage("model", build_model, cfg, data)

    graph, setup_units, enc, ae = None, 0.0, None, None
    fcr = cfg.fcr
    umap_params = UmapParams(**fcr["umap"], seed=cfg.seed)

    def discover(current, mode):
        return run_fcr(current, enc, k=fcr["k"], umap_params=umap_params, gamma=fcr["gamma"], C=fcr["C"], mode=mode,
                       baseline=fcr["baseline"], seed=cfg.seed,
                       finetune_epochs=cfg.encoder["finetune_epochs"], finetune_lr=cfg.encoder["finetune_lr"],
                       finetune_batch_size=cfg.encoder["finetune_batch_size"], workers=fed["workers"])

    if needs_graph:
        enc, ae, enc_units = _stage("encoder", build_encoder, cfg, data)
        graph = _stage("fcr", discover, clients, "fine-tune" if cfg.encoder["mode"] == "enc-finetune" else "normal")
        M = len(clients)
        sig_units = fcr["k"] * M * enc.latent_dim
        setup_units = float(M * enc_units + sig_units)
        log(f"fcr: {int(graph.clusters.max()) + 1} clusters, ARI {adjusted_rand_index(graph.clusters, truth.assignment):.3f}")

        def recluster(current, t):
            # changed clients re-adapt their encoder when there is an autoencoder to adapt
            return discover(current, "fine-tune" if ae is not None else "normal"), float(sig_units)
    else:
        recluster = None

    drift, truths = _drift_schedule(fed.get("drift") or [], clients, truth.assignment)
    results = {}
    for method in methods:
        fc = FederationConfig(method=method, T=fed["T"], rho=fed["rho"], E=fed["E"], batch_size=fed["batch_size"],
                              lr=fed["lr"], gamma=fcr["gamma"], k=fcr["k"], umap=umap_params,
                              dynamic=fed.get("dynamic"), normalization=fed["normalization"], workers=fed["workers"])
        results[method] = _stage(
            f"federation:{method}", run_federation, fc, clients, graph, template, seed=cfg.seed,
            ground_truth=truths, setup_comm_units=setup_units if method.startswith("flt") else 0.0,
            drift=drift, recluster=recluster,
        )
        last = results[method].history[-1]
        log(f"{method}: test acc {last.mean_test_acc:.4f} (var {last.test_acc_variance:.5f})")

    summary = _stage("output", _write_outputs, cfg, out, data, clients, truth, template, graph, ae, results)
    return ExperimentResult(out, summary, results, graph)


def _write_outputs(cfg, out: Path, data, clients, truth, template, graph, ae, results) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    histories = [rm for r in results.values() for rm in r.history]
    (out / "metrics.csv").write_text(metrics_csv(histories))
    if graph is not None:
        graph.to_json(out / "graph.json")
    if cfg.output["checkpoints"]:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        for method, r in results.items():
            nn.save_checkpoint(ck / f"{method}.ckpt", r.W, template.config(), extra={"method": method})
        if ae is not None:
            nn.save_checkpoint(ck / "encoder.ckpt", ae)

    per_method = {}
    for method, r in results.items():
        last = r.history[-1]
        per_method[method] = {
            "final_mean_test_acc": last.mean_test_acc,
            "test_acc_stderr": last.test_acc_stderr,
            "test_acc_variance": last.test_acc_variance,
            "final_mean_train_acc": last.mean_train_acc,
            "ari": last.ari,
            "comm_units": last.comm_units_cumulative,
            "comm_bytes": last.comm_bytes_cumulative,
            "rounds": len(r.history),
        }
    summary = {
        "config": cfg.to_dict(),
        "num_clients": len(clients),
        "num_samples": int(len(data.y)),
        "model_params": template.num_params,
        "bytes_per_unit": BYTES_PER_UNIT,
        "ground_truth_clusters": truth.assignment.tolist(),
        "methods": per_method,
    }
    if graph is not None:
        summary["discovered_clusters"] = graph.clusters.tolist()
        summary["num_discovered_clusters"] = int(graph.clusters.max()) + 1
        summary["ari"] = adjusted_rand_index(graph.clusters, truth.assignment)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))

    if cfg.output["plots"]:
        write_svg_curves({m: [(rm.round, rm.mean_test_acc) for rm in r.history] for m, r in results.items()},
                         out / "curves.svg")
    if cfg.output["bound_report"] and graph is not None:
        flt = next(m for m in results if m.startswith("flt"))
        bound_report(_bound_inputs(cfg, clients, template, graph, results[flt], data), out / "bound_report.json")
    return summary


def run_experiment(config_path, out_dir=None, log=None) -> ExperimentResult:
    """Load, validate and run the scenario file at ``config_path``.

    Validation problems raise :class:`flt.config.ConfigError` listing all of
    them before anything is computed; later failures raise
    :class:`StageError` naming the stage.
    """
    return run_scenario(load_config(config_path), out_dir=out_dir, log=log)


# ---------------------------------------------------------------------------
# reporting


def _read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise ReportError(f"{path}: columns {reader.fieldnames} do not match the metrics schema {CSV_COLUMNS}")
        rows = list(reader)
    if not rows:
        raise ReportError(f"{path}: no data rows")
    return rows


def compare_report(csv_paths: Sequence, json_path=None, svg_path=None) -> dict:
    """Final-round accuracy, stderr and variance for every (file, method) series.

    Returns ``{"rows": [...], "table": str}``; the table is also what the
    CLI prints. Series are labelled by method, prefixed with the file name
    when the same method appears in several files.
    """
    if not csv_paths:
        raise ReportError("no metrics files given")
    series = []
    for path in csv_paths:
        rows = _read_metrics(path)
        for method in dict.fromkeys(r["method"] for r in rows):
            mine = [r for r in rows if r["method"] == method]
            series.append((Path(path), method, mine))
    counts: dict = {}
    for _, m, _ in series:
        counts[m] = counts.get(m, 0) + 1

    out_rows, curves = [], {}
    for path, method, rows in series:
        label = method if counts[method] == 1 else f"{path.parent.name or path.stem}:{method}"
        last = rows[-1]
        out_rows.append({
            "label": label,
            "method": method,
            "file": str(path),
            "rounds": len(rows),
            "acc": float(last["mean_test_acc"]),
            "stderr": float(last["test_acc_stderr"]),
            "var": float(last["test_acc_variance"]),
        })
        curves[label] = [(int(r["round"]), float(r["mean_test_acc"])) for r in rows]

    width = max(len("method"), *(len(r["label"]) for r in out_rows))
    lines = [f"{'method':<{width}}  {'acc':>8}  {'stderr':>8}  {'var':>10}  rounds"]
    for r in out_rows:
        lines.append(f"{r['label']:<{width}}  {100 * r['acc']:8.2f}  {100 * r['stderr']:8.2f}  "
                     f"{1e4 * r['var']:10.2f}  {r['rounds']}")
    table = "\n".join(lines)
    report = {"rows": out_rows, "table": table, "units": {"acc": "percent", "stderr": "percent", "var": "percent^2"}}
    if json_path is not None:
        Path(json_path).write_text(json.dumps({k: v for k, v in report.items() if k != "table"}, indent=1))
    if svg_path is not None:
        write_svg_curves(curves, svg_path)
    return report


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def write_svg_curves(curves: dict, path, width: int = 640, height: int = 400) -> None:
    """Line chart of test accuracy per round, one polyline per series."""
    pad_l, pad_r, pad_t, pad_b = 50, 130, 20, 40
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    pts = [p for c in curves.values() for p in c if np.isfinite(p[1])]
    x_max = max((p[0] for p in pts), default=1)
    x_min = min((p[0] for p in pts), default=0)
    span = max(x_max - x_min, 1)

    def sx(x):
        return pad_l + pw * (x - x_min) / span

    def sy(y):
        return pad_t + ph * (1.0 - y)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for tick in np.linspace(0, 1, 6):
        y = sy(tick)
        parts.append(f'<line x1="{pad_l - 4}" y1="{y:.1f}" x2="{pad_l}" y2="{y:.1f}" stroke="#444"/>')
        parts.append(f'<text x="{pad_l - 6}" y="{y + 4:.1f}" text-anchor="end">{tick:.1f}</text>')
    parts.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">round</text>')
    parts.append(f'<text x="12" y="{pad_t + ph / 2:.1f}" transform="rotate(-90 12 {pad_t + ph / 2:.1f})" '
                 f'text-anchor="middle">test accuracy</text>')
    for i, (label, c) in enumerate(curves.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in c if np.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{poly}"/>')
        ly = pad_t + 14 + 16 * i
        parts.append(f'<line x1="{pad_l + pw + 10}" y1="{ly - 4}" x2="{pad_l + pw + 28}" y2="{ly - 4}" '
                     f'stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{pad_l + pw + 32}" y="{ly}">{escape(label)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
