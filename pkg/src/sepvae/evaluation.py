"""Probe-based evaluation of the common and salient latent spaces.

Latents are posterior means. Linear probes (logistic / least squares) are fit
on the training split and scored on the test split; background-vs-target
separability is scored with AUC, either straight from the model's salient
classifier or from a freshly trained two-layer perceptron.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402
from sklearn.linear_model import LogisticRegression, Ridge  # noqa: E402
from sklearn.exceptions import ConvergenceWarning  # noqa: E402
from sklearn.metrics import accuracy_score, balanced_accuracy_score, mean_absolute_error, roc_auc_score  # noqa: E402
from sklearn.neural_network import MLPClassifier  # noqa: E402
from sklearn.pipeline import make_pipeline  # noqa: E402
from sklearn.preprocessing import StandardScaler  # noqa: E402

from .data import ContrastiveDataset, DatasetManifest, attribute_specs  # noqa: E402
from .errors import ContractViolation, DegenerateProbeError  # noqa: E402
from .model import SepVAE  # noqa: E402

log = logging.getLogger(__name__)

PROBE_RIDGE = 1e-4
SPACES = ("common", "salient")
METRICS = ("ACC", "B-ACC", "AUC", "MAE")


@dataclass
class ProbeReport:
    space: str
    attribute: str
    task: str
    metric: str
    value: float
    std: float = 0.0
    n_runs: int = 1

    def __post_init__(self):
        if self.space not in SPACES:
            raise ContractViolation(f"unknown latent space {self.space!r}")
        if self.task not in ("classification", "regression"):
            raise ContractViolation(f"unknown task {self.task!r}")
        if self.metric not in METRICS:
            raise ContractViolation(f"unknown metric {self.metric!r}")
        if self.metric == "MAE":
            ok = self.value >= 0
        else:
            ok = 0.0 <= self.value <= 1.0
        if not ok or self.std < 0:
            raise ContractViolation(f"metric out of range: {self}")

    @property
    def key(self):
        return (self.space, self.attribute, self.metric)


@dataclass
class VarianceRatioReport:
    var_salient_bg: float
    var_salient_tg: float
    ratio_tg_over_bg: float


@dataclass
class Latents:
    common: np.ndarray
    salient: np.ndarray
    labels: np.ndarray
    attributes: dict = field(default_factory=dict)


def extract_latents(model: SepVAE, dataset: ContrastiveDataset, batch_size=512) -> Latents:
    """Posterior means for every sample, in dataset order."""
    if tuple(dataset.image_shape) != tuple(model.config.image_shape):
        raise ContractViolation(
            f"dataset images {dataset.image_shape} do not match model {model.config.image_shape}"
        )
    model.eval()
    x_all, _ = dataset.tensors()
    cs, ss = [], []
    with torch.no_grad():
        for start in range(0, len(x_all), batch_size):
            x = x_all[start:start + batch_size]
            cs.append(model.encode_common(x).mean.numpy())
            ss.append(model.salient_encoder(x).mean.numpy())
    empty_c = np.zeros((0, model.config.d_common), dtype=np.float32)
    empty_s = np.zeros((0, model.config.d_salient), dtype=np.float32)
    return Latents(
        common=np.concatenate(cs) if cs else empty_c,
        salient=np.concatenate(ss) if ss else empty_s,
        labels=dataset.y.copy(),
        attributes={k: v.copy() for k, v in dataset.attributes.items()},
    )


def _classification_score(metric, y_true, model, X):
    if metric == "AUC":
        proba = model.predict_proba(X)
        if proba.shape[1] == 2:
            return roc_auc_score(y_true, proba[:, 1])
        return roc_auc_score(y_true, proba, multi_class="ovr", labels=model.classes_)
    pred = model.predict(X)
    if metric == "B-ACC":
        return balanced_accuracy_score(y_true, pred)
    return accuracy_score(y_true, pred)


def run_probe(
    latents,
    targets,
    task,
    train_idx,
    test_idx,
    seed=0,
    metric=None,
    space="salient",
    attribute="target",
) -> ProbeReport:
    """Fit a linear probe on ``latents[train_idx]`` and score it on ``latents[test_idx]``.

    Features are standardized; the probe carries a fixed L2 penalty of 1e-4.
    """
    X = np.asarray(latents, dtype=np.float64)
    t = np.asarray(targets)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if np.intersect1d(train_idx, test_idx).size:
        raise ContractViolation("probe train and test indices overlap")
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise DegenerateProbeError("probe needs non-empty train and test sets")

    if task == "classification":
        metric = metric or "ACC"
        y_train = t[train_idx].astype(np.int64)
        if len(np.unique(y_train)) < 2:
            raise DegenerateProbeError(f"{attribute}: single class in probe training targets")
        probe = make_pipeline(
            StandardScaler(),
            LogisticRegression(C=1.0 / PROBE_RIDGE, max_iter=2000, random_state=seed),
        )
        probe.fit(X[train_idx], y_train)
        value = _classification_score(metric, t[test_idx].astype(np.int64), probe, X[test_idx])
    elif task == "regression":
        metric = metric or "MAE"
        y_train = t[train_idx].astype(np.float64)
        if np.ptp(y_train) == 0:
            raise DegenerateProbeError(f"{attribute}: constant probe training targets")
        probe = make_pipeline(StandardScaler(), Ridge(alpha=PROBE_RIDGE))
        probe.fit(X[train_idx], y_train)
        value = mean_absolute_error(t[test_idx].astype(np.float64), probe.predict(X[test_idx]))
    else:
        raise ContractViolation(f"unknown task {task!r}")
    return ProbeReport(space, attribute, task, metric, float(value))


def chance_level(targets, task, train_idx, test_idx):
    """``(chance score, standard error)`` of a no-signal predictor on the test split.

    Classification: accuracy of predicting the majority training class.
    Regression: MAE of predicting the training mean.
    """
    t = np.asarray(targets)
    test = t[np.asarray(test_idx)]
    train = t[np.asarray(train_idx)]
    if task == "classification":
        values, counts = np.unique(train.astype(np.int64), return_counts=True)
        p = float(np.mean(test.astype(np.int64) == values[np.argmax(counts)]))
        # binomial standard error at the chance rate
        return p, math.sqrt(max(p * (1 - p), 1e-12) / len(test))
    errors = np.abs(test.astype(np.float64) - train.astype(np.float64).mean())
    return float(errors.mean()), float(errors.std(ddof=1) / math.sqrt(len(test)))


def _fit_mlp(X, y, seed, hidden):
    mlp = make_pipeline(
        StandardScaler(),
        MLPClassifier(hidden_layer_sizes=(hidden,), max_iter=500, random_state=seed),
    )
    # a capped iteration budget is part of the protocol, not a failure
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return mlp.fit(X, y)


def bg_vs_tg_score(C, S, labels, model=None, method="sepvae", seed=0, train_idx=None, test_idx=None, hidden=64):
    """Background-vs-target AUC from each space; returns ``(salient, common)`` reports.

    ``method="sepvae"`` scores the salient space with the model's own
    classifier; ``"baseline"`` trains a two-layer perceptron on it instead.
    The common space always gets a freshly trained perceptron.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    train_idx = np.arange(n) if train_idx is None else np.asarray(train_idx, dtype=np.int64)
    test_idx = np.arange(n) if test_idx is None else np.asarray(test_idx, dtype=np.int64)
    if len(np.unique(labels[train_idx])) < 2:
        raise DegenerateProbeError("background-vs-target scoring needs both labels in the train split")
    if len(np.unique(labels[test_idx])) < 2:
        raise DegenerateProbeError("background-vs-target AUC needs both labels in the test split")

    if method == "sepvae":
        if model is None:
            raise ContractViolation("method='sepvae' needs the trained model")
        with torch.no_grad():
            p = model.classify_salient(torch.as_tensor(np.asarray(S)[test_idx], dtype=torch.float32)).numpy()
        salient_auc = roc_auc_score(labels[test_idx], p)
    elif method == "baseline":
        mlp = _fit_mlp(np.asarray(S)[train_idx], labels[train_idx], seed, hidden)
        salient_auc = roc_auc_score(labels[test_idx], mlp.predict_proba(np.asarray(S)[test_idx])[:, 1])
    else:
        raise ContractViolation(f"unknown method {method!r}")
    mlp = _fit_mlp(np.asarray(C)[train_idx], labels[train_idx], seed, hidden)
    common_auc = roc_auc_score(labels[test_idx], mlp.predict_proba(np.asarray(C)[test_idx])[:, 1])
    return (
        ProbeReport("salient", "bg_vs_tg", "classification", "AUC", float(salient_auc)),
        ProbeReport("common", "bg_vs_tg", "classification", "AUC", float(common_auc)),
    )


def variance_ratio(S, labels) -> VarianceRatioReport:
    """Mean per-dimension salient variance of targets over that of background samples."""
    S = np.asarray(S, dtype=np.float64)
    labels = np.asarray(labels)
    groups = [S[labels == lab] for lab in (0, 1)]
    if min(len(g) for g in groups) < 2:
        raise ContractViolation("variance ratio needs at least 2 samples per label")
    var_bg, var_tg = (float(g.var(axis=0, ddof=1).mean()) for g in groups)
    ratio = var_tg / var_bg if var_bg > 0 else math.inf
    return VarianceRatioReport(var_bg, var_tg, ratio)


def _tile(rows):
    """(R, N, C, H, W) in [0, 1] -> uint8 grid image with 1-pixel separators."""
    r, n, c, h, w = rows.shape
    grid = np.ones((c, r * (h + 1) - 1, n * (w + 1) - 1), dtype=np.float32)
    for i in range(r):
        for j in range(n):
            grid[:, i * (h + 1):i * (h + 1) + h, j * (w + 1):j * (w + 1) + w] = rows[i, j]
    grid = np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)
    return Image.fromarray(grid[0], mode="L") if c == 1 else Image.fromarray(np.transpose(grid, (1, 2, 0)), mode="RGB")


def reconstruction_gallery(model: SepVAE, images, labels, out_path=None):
    """Full and common-only reconstructions from posterior means.

    Returns ``(full, common_only, grid)`` where ``grid`` stacks input, full and
    common-only rows: shape ``(3, n, C, H, W)``. Saved as a PNG when
    ``out_path`` is given.
    """
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    model.eval()
    with torch.no_grad():
        c = model.encode_common(x).mean
        s = model.salient_encoder(x).mean
        s_ref = torch.zeros_like(s)
        full = model.decode(c, torch.where((y == 1).unsqueeze(-1), s, s_ref)).numpy()
        common_only = model.decode(c, s_ref).numpy()
    grid = np.stack([x.numpy(), full, common_only])
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        _tile(grid).save(out_path)
    return full, common_only, grid


def pca_projection(S, labels, subtypes=None, out_path=None, tol=1e-10):
    """First two principal-component coordinates of ``S`` (zero-padded if rank < 2)."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or len(S) < 3:
        raise ContractViolation("PCA projection needs at least 3 samples")
    centered = S - S.mean(axis=0)
    u, sing, _ = np.linalg.svd(centered, full_matrices=False)
    coords = np.zeros((len(S), 2))
    k = min(2, len(sing))
    keep = sing[:k] > tol * max(sing[0], 1e-300) if len(sing) else np.zeros(0, dtype=bool)
    for j in range(k):
        if keep[j]:
            coords[:, j] = u[:, j] * sing[j]
    if out_path is not None:
        labels = np.asarray(labels)
        fig, ax = plt.subplots(figsize=(5, 5))
        groups = [("background", labels == 0)]
        if subtypes is not None and (labels == 1).any():
            sub = np.asarray(subtypes)
            for v in np.unique(sub[labels == 1]):
                groups.append((f"target subtype {int(v)}", (labels == 1) & (sub == v)))
        else:
            groups.append(("target", labels == 1))
        for name, mask in groups:
            ax.scatter(coords[mask, 0], coords[mask, 1], s=6, alpha=0.6, label=name)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(loc="best", fontsize=8)
        ax.set_title("salient space")
        fig.tight_layout()
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, dpi=100)
        plt.close(fig)
    return coords


def probe_indices(dataset: ContrastiveDataset, manifest: DatasetManifest, attribute, target_only):
    """Train/test rows for one attribute (missing values and, optionally, background dropped)."""
    col = dataset.attributes[attribute]
    ok = ~np.isnan(col)
    if target_only:
        ok &= dataset.y == 1
    train = manifest.indices("train")
    test = manifest.indices("test")
    return train[ok[train]], test[ok[test]]


def evaluate(
    model: SepVAE,
    dataset: ContrastiveDataset,
    manifest: DatasetManifest,
    seed=0,
    method="sepvae",
    out_dir=None,
    run_id=None,
    config_hash=None,
    n_gallery=8,
):
    """Run every probe plus the variance ratio; optionally write figures and metrics.json."""
    latents = extract_latents(model, dataset)
    spaces = {"common": latents.common, "salient": latents.salient}
    probes = []
    for name, (task, target_only) in attribute_specs(dataset).items():
        train_idx, test_idx = probe_indices(dataset, manifest, name, target_only)
        for space, X in spaces.items():
            try:
                probes.append(
                    run_probe(X, dataset.attributes[name], task, train_idx, test_idx, seed, space=space, attribute=name)
                )
            except DegenerateProbeError as exc:
                log.warning("skipping probe %s/%s: %s", space, name, exc)

    train_idx, test_idx = manifest.indices("train"), manifest.indices("test")
    probes.extend(
        bg_vs_tg_score(
            latents.common,
            latents.salient,
            latents.labels,
            model,
            method,
            seed,
            train_idx,
            test_idx,
            hidden=model.config.classifier_hidden,
        )
    )
    test_s, test_y = latents.salient[test_idx], latents.labels[test_idx]
    vr = variance_ratio(test_s, test_y)
    metrics = {
        "run_id": run_id,
        "config_hash": config_hash,
        "method": method,
        "probes": [asdict(p) for p in probes],
        "variance_ratio": asdict(vr),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        bg = test_idx[test_y == 0][: n_gallery // 2]
        tg = test_idx[test_y == 1][: n_gallery - len(bg)]
        pick = np.concatenate([bg, tg])
        reconstruction_gallery(model, dataset.images[pick], dataset.y[pick], out_dir / "gallery.png")
        subtypes = None if dataset.subtypes is None else dataset.subtypes[test_idx]
        pca_projection(test_s, test_y, subtypes, out_dir / "pca_salient.png")
        metrics["figures"] = {"gallery": "gallery.png", "pca_salient": "pca_salient.png"}
        write_json(out_dir / "metrics.json", metrics)
    return metrics


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def probes_by_key(metrics) -> dict:
    return {(p["space"], p["attribute"], p["metric"]): p["value"] for p in metrics["probes"]}


def headline(metrics, specs=None) -> dict:
    """Condense one metrics dict into the numbers the tables report.

    Common-factor MAE is averaged over the regression attributes that exist
    for both populations.
    """
    by = probes_by_key(metrics)
    out = {}
    if ("salient", "subtype", "ACC") in by:
        out["subtype_acc_salient"] = by[("salient", "subtype", "ACC")]
        out["subtype_acc_common"] = by[("common", "subtype", "ACC")]
    out["bg_vs_tg_auc_salient"] = by[("salient", "bg_vs_tg", "AUC")]
    out["bg_vs_tg_auc_common"] = by[("common", "bg_vs_tg", "AUC")]
    if specs is None:
        from .data import SYNTHETIC_ATTRIBUTES as specs
    common_attrs = [a for a, (task, tg_only) in specs.items() if task == "regression" and not tg_only]
    for space in SPACES:
        vals = [by[(space, a, "MAE")] for a in common_attrs if (space, a, "MAE") in by]
        if vals:
            out[f"common_factor_mae_{space}"] = float(np.mean(vals))
    out["variance_ratio"] = metrics["variance_ratio"]["ratio_tg_over_bg"]
    return out


# ablation grid rows: display name -> flags switched on
ABLATION_GRID = {
    "full": (),
    "no MI": ("ablate_mi",),
    "no CLSF": ("ablate_clsf",),
    "no SAL": ("ablate_sal",),
    "no MI + SAL": ("ablate_mi", "ablate_sal"),
    "no MI + CLSF": ("ablate_mi", "ablate_clsf"),
    "no MI + SAL + CLSF": ("ablate_mi", "ablate_sal", "ablate_clsf"),
}


def aggregate(values):
    """``(mean, std over runs)``; std uses ddof=1 when there is more than one run."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def aggregate_probes(metric_dicts) -> list:
    """Merge per-seed probe lists into mean/std ProbeReports."""
    grouped = {}
    for m in metric_dicts:
        for p in m["probes"]:
            grouped.setdefault((p["space"], p["attribute"], p["task"], p["metric"]), []).append(p["value"])
    out = []
    for (space, attr, task, metric), vals in grouped.items():
        mean, std = aggregate(vals)
        out.append(ProbeReport(space, attr, task, metric, mean, std, len(vals)))
    return out


def ablation_suite(base_config, dataset, manifest, flags_grid=None, n_seeds=3, out_dir=None, seeds=None):
    """Train and evaluate one model per (grid cell, seed).

    Returns ``{cell: {"runs": [...], "probes": [ProbeReport], "headline": {...},
    "failed": [...]}}``. A failing run is recorded and the grid continues.
    """
    from .train import fit

    grid = ABLATION_GRID if flags_grid is None else flags_grid
    if isinstance(grid, (list, tuple)):
        grid = {name: ABLATION_GRID[name] for name in grid}
    seeds = list(seeds) if seeds is not None else [base_config.seed + k for k in range(n_seeds)]
    train_set = dataset.subset(manifest.indices("train"))
    val_set = dataset.subset(manifest.indices("val")) if len(manifest.indices("val")) else None
    specs = attribute_specs(dataset)
    results = {}
    for cell, flags in grid.items():
        weights = replace(
            base_config.weights,
            ablate_mi="ablate_mi" in flags,
            ablate_clsf="ablate_clsf" in flags,
            ablate_sal="ablate_sal" in flags,
        )
        method = "baseline" if weights.ablate_clsf else "sepvae"
        runs, failed = [], []
        for seed in seeds:
            cfg = replace(base_config, seed=seed, weights=weights)
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / _slug(cell) / f"seed{seed}"
            try:
                model, _ = fit(cfg, train_set, run_dir=run_dir, val_dataset=val_set)
                metrics = evaluate(
                    model, dataset, manifest, seed=seed, method=method,
                    out_dir=None if run_dir is None else run_dir / "eval",
                    run_id=f"{_slug(cell)}-seed{seed}",
                )
                metrics["headline"] = headline(metrics, specs)
                runs.append(metrics)
            except Exception as exc:  # noqa: BLE001 -- grid keeps going; failure recorded
                log.exception("ablation cell %r seed %d failed", cell, seed)
                failed.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
        heads = {}
        for key in sorted({k for r in runs for k in r["headline"]}):
            heads[key] = aggregate([r["headline"][key] for r in runs if key in r["headline"]])
        results[cell] = {
            "flags": list(flags),
            "method": method,
            "runs": runs,
            "failed": failed,
            "probes": aggregate_probes(runs),
            "headline": heads,
        }
    if out_dir is not None:
        write_ablation_outputs(results, out_dir)
    return results


def _slug(name):
    return name.lower().replace(" + ", "_").replace(" ", "_")


def _fmt(mean_std, scale=1.0):
    mean, std = mean_std
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "n/a"
    return f"{mean * scale:.2f}±{std * scale:.2f}"


TABLE_COLUMNS = (
    ("subtype_acc_salient", "Subtype ACC salient ↑", 100),
    ("subtype_acc_common", "Subtype ACC common ↓", 100),
    ("bg_vs_tg_auc_salient", "BG vs TG AUC salient ↑", 100),
    ("bg_vs_tg_auc_common", "BG vs TG AUC common ↓", 100),
    ("common_factor_mae_common", "Common-factor MAE common ↓", 1),
    ("common_factor_mae_salient", "Common-factor MAE salient ↑", 1),
    ("variance_ratio", "Var. ratio TG/BG ↑", 1),
)


def markdown_table(rows: dict) -> str:
    """``rows``: name -> headline dict of (mean, std) pairs."""
    lines = ["| | " + " | ".join(c[1] for c in TABLE_COLUMNS) + " |", "|---" * (len(TABLE_COLUMNS) + 1) + "|"]
    for name, head in rows.items():
        cells = [_fmt(head.get(key, (math.nan, math.nan)), scale) for key, _, scale in TABLE_COLUMNS]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def write_ablation_outputs(results, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    serial = {
        cell: {
            "flags": r["flags"],
            "method": r["method"],
            "n_runs": len(r["runs"]),
            "failed": r["failed"],
            "headline": {k: {"mean": v[0], "std": v[1]} for k, v in r["headline"].items()},
            "probes": [asdict(p) for p in r["probes"]],
        }
        for cell, r in results.items()
    }
    write_json(out_dir / "ablation.json", serial)
    text = ["# Ablation grid", "", "Mean ± std over seeds.", "", markdown_table({c: r["headline"] for c, r in results.items()})]
    failures = [(c, f) for c, r in results.items() for f in r["failed"]]
    if failures:
        text += ["", "## Failed runs", ""] + [f"- {c} (seed {f['seed']}): {f['error']}" for c, f in failures]
    (out_dir / "ablation.md").write_text("\n".join(text) + "\n")


def write_report(run_dirs, out_path):
    """Assemble a markdown report from evaluated run directories."""
    out_path = Path(out_path)
    rows, figures = {}, []
    for run_dir in map(Path, run_dirs):
        metrics_path = run_dir / "eval" / "metrics.json"
        if not metrics_path.exists():
            raise FileNotFoundError(f"no metrics.json under {run_dir / 'eval'}; run `eval` first")
        metrics = json.loads(metrics_path.read_text())
        rows[run_dir.name] = {k: (v, 0.0) for k, v in headline(metrics).items()}
        for name, rel in metrics.get("figures", {}).items():
            figures.append((run_dir.name, name, (run_dir / "eval" / rel).resolve()))
    text = ["# Evaluation report", "", markdown_table(rows), ""]
    if figures:
        text += ["## Figures", ""]
        for run, name, path in figures:
            text.append(f"- {run} / {name}: ![{name}]({path})")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(text) + "\n")
    return out_path
