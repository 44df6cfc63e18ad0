"""Per-model analysis, cross-model comparison and the report bundle

A report bundle consists of five JSON tables (``descriptors``,
``rdm_of_rdms``, ``size_correlations``, ``equivalence`` and
``decomposition``), a Parquet copy of the descriptor table and the
figures.  Every figure file has a ``.json`` twin holding the numbers it
plots.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import dask
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402
import yaml  # noqa: E402
from dask.utils import import_required  # noqa: E402
from fsspec.utils import stringify_path  # noqa: E402

from emotion_geometry import config  # noqa: E402
from emotion_geometry.collection import read_rdm  # noqa: E402
from emotion_geometry.comprehension import load_sweep  # noqa: E402
from emotion_geometry.errors import ValidationError  # noqa: E402
from emotion_geometry.geometry import (  # noqa: E402
    GeometryDescriptors,
    descriptors,
    persist_descriptors,
    reference_layer,
    rdm_std,
)
from emotion_geometry.registry import (  # noqa: E402
    META_FILE,
    PRECISIONS,
    RDM_FILE,
    SWEEP_FILE,
    layer_dir,
    load_rdm,
    read_json,
    read_run_meta,
    write_json,
)
from emotion_geometry.rsa import (  # noqa: E402
    normalization_change,
    rdm_of_rdms,
    reliability_flag,
    size_correlations,
)
from emotion_geometry.steering import load_trace  # noqa: E402

logger = logging.getLogger(__name__)

TABLES = ("descriptors", "rdm_of_rdms", "size_correlations", "equivalence", "decomposition")
FIGURES = (
    "fig1_rdm_of_rdms",
    "fig2_model_rdms",
    "fig3_size_maturity",
    "fig4_pair_groups",
    "fig5_decomposition",
    "fig6_contrasts",
)
CONTRASTS = ("rho_AC", "rho_BC", "rho_CD", "rho_AD")


#
# Configuration
#


def _read_config_file(path) -> dict:
    path = stringify_path(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            tomllib = import_required(
                "tomli", "Reading TOML on Python < 3.11 requires tomli"
            )
        with open(path, "rb") as f:
            return tomllib.load(f)
    with open(path, encoding="utf-8") as f:
        if path.endswith(".json"):
            return json.load(f)
        return yaml.safe_load(f) or {}


@dataclass
class PipelineConfig:
    """File configuration of one pipeline run

    Paths default to the bundled model table and corpus.  Thresholds and
    the precision default to the ``emotion-geometry`` dask config.
    """

    model_table: str | None = None
    passages: str | None = None
    neutral: str | None = None
    templates: str | None = None
    precision: str = field(default_factory=lambda: config.get("precision"))
    backend_overrides: dict = field(default_factory=dict)
    out: str = "runs"
    equivalence: bool = True
    decomposition: bool = True
    steering: bool = True
    unreliable: float = field(default_factory=lambda: config.get("reliability.unreliable"))
    borderline: float = field(default_factory=lambda: config.get("reliability.borderline"))
    annotations: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ["model_table", "passages", "neutral", "templates", "annotations"]:
            path = getattr(self, name)
            if path is not None and not os.path.exists(path):
                raise ValidationError(f"{name} path does not exist: {path}")
        corpus = [self.passages, self.neutral, self.templates]
        if any(p is not None for p in corpus) and None in corpus:
            raise ValidationError("passages, neutral and templates must be given together")
        for name in ["unreliable", "borderline"]:
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValidationError(f"{name} threshold must lie in (0, 1), got {value}")
        if not self.borderline < self.unreliable:
            raise ValidationError(
                f"borderline ({self.borderline}) must be below unreliable ({self.unreliable})"
            )
        if self.precision not in PRECISIONS:
            raise ValidationError(f"Unknown precision {self.precision!r}")

    @classmethod
    def from_file(cls, path) -> PipelineConfig:
        """Read a TOML, YAML or JSON file

        Relative paths in the file resolve against the file's directory.
        """
        raw = _read_config_file(path)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"Unknown configuration keys: {sorted(unknown)}")
        base = os.path.dirname(os.path.abspath(stringify_path(path)))
        for key in ["model_table", "passages", "neutral", "templates", "annotations", "out"]:
            if raw.get(key) is not None and not os.path.isabs(raw[key]):
                raw[key] = os.path.join(base, raw[key])
        return cls(**raw)

    def dask_config(self):
        """Context manager applying the thresholds to the dask config"""
        return dask.config.set(
            {
                "emotion-geometry.reliability.unreliable": self.unreliable,
                "emotion-geometry.reliability.borderline": self.borderline,
                "emotion-geometry.precision": self.precision,
            }
        )

    def load_corpus(self):
        from emotion_geometry.stimuli import load_corpus, load_default_corpus

        if self.passages is None:
            return load_default_corpus()
        return load_corpus(self.passages, self.neutral, self.templates)

    def load_models(self) -> list:
        from emotion_geometry.registry import default_model_table, load_model_table

        records = load_model_table(self.model_table or default_model_table(), self.precision)
        return [
            r.replace(backend_kind=self.backend_overrides[r.model_id])
            if r.model_id in self.backend_overrides
            else r
            for r in records
        ]


#
# Per-model analysis
#


def run_dirs(run_root) -> list:
    """Model run directories under ``run_root``, sorted"""
    run_root = stringify_path(run_root)
    if not os.path.isdir(run_root):
        return []
    return [
        os.path.join(run_root, name)
        for name in sorted(os.listdir(run_root))
        if os.path.exists(os.path.join(run_root, name, META_FILE))
    ]


def _layer_rdm_std(run_dir, layer):
    path = os.path.join(layer_dir(run_dir, layer), RDM_FILE)
    if not os.path.exists(path):
        return None
    rdm = load_rdm(path)
    return None if rdm.contains_nan else rdm_std(rdm)


def _reference_depths(run_dir, sweep, depths) -> dict:
    out = {}
    for depth in depths:
        layer = reference_layer(sweep.n_layers, depth)
        out[str(depth)] = {
            "layer": layer,
            "anisotropy": sweep.anisotropy_at(layer),
            "rdm_std": _layer_rdm_std(run_dir, layer),
        }
    return out


def _regime(run_dir, backend_kind):
    if backend_kind != "named_hook":
        return None
    try:
        return load_trace(run_dir).regime
    except FileNotFoundError:
        return None


def reference_anisotropy(desc: GeometryDescriptors) -> list:
    """Anisotropy at the reference depths of an analyzed model"""
    return [entry.get("anisotropy") for entry in desc.reference_depths.values()]


def analyze_run(run_dir) -> GeometryDescriptors:
    """Descriptors of one extracted model, written to ``descriptors.json``

    The steering regime comes from the persisted trace for
    ``steering.emotion`` when there is one.
    """
    record, manifest = read_run_meta(run_dir)
    sweep = load_sweep(run_dir)
    best = sweep.best_layer
    rdm = read_rdm(layer_dir(run_dir, best)).compute()
    aniso = sweep.anisotropy_at(best)
    desc = descriptors(
        sweep,
        rdm,
        np.nan if aniso is None else aniso,
        regime=_regime(run_dir, record.backend_kind),
        anisotropy_layer=best,
        reference_depths=_reference_depths(run_dir, sweep, config.get("reference-depths")),
    )
    if aniso is None:
        logger.warning("%s: anisotropy at layer %d is non-finite", record.model_id, best)
    else:
        flag = reliability_flag(aniso, reference_anisotropy(desc))
        if flag != "ok":
            logger.warning("%s: anisotropy %s is %s", record.model_id, aniso, flag)
    persist_descriptors(desc, run_dir, manifest.manifest_id)
    return desc


def family_order(records) -> list:
    """Model ids grouped by family, base before instruct, then by size"""
    variant_rank = {"base": 0, "instruct": 1}
    first_size = {}
    for r in records:
        first_size[r.family] = min(first_size.get(r.family, r.size_b), r.size_b)
    ordered = sorted(
        records,
        key=lambda r: (first_size[r.family], r.family, variant_rank[r.variant], r.model_id),
    )
    return [r.model_id for r in ordered]


def within_family(records, result) -> list:
    """Base vs instruct similarity for each family that has both"""
    by_family = {}
    for r in records:
        by_family.setdefault(r.family, {})[r.variant] = r.model_id
    out = []
    for family, variants in sorted(by_family.items()):
        if {"base", "instruct"} <= set(variants):
            out.append(
                {
                    "family": family,
                    "base": variants["base"],
                    "instruct": variants["instruct"],
                    "rho": result[variants["base"], variants["instruct"]],
                }
            )
    return out


def _analyzed(run_root) -> tuple[list, list]:
    """(record, descriptors, best-layer RDM) for every extracted run

    Descriptors are recomputed from the persisted artifacts so a steering
    trace written after the last analysis is picked up.  Runs that cannot
    be analyzed are returned as the second element, one message each.
    """
    out, missing = [], []
    for run_dir in run_dirs(run_root):
        record, _ = read_run_meta(run_dir)
        if not os.path.exists(os.path.join(run_dir, SWEEP_FILE)):
            missing.append(f"run: {record.model_id} has no layer sweep")
            continue
        try:
            desc = analyze_run(run_dir)
            rdm = load_rdm(layer_dir(run_dir, desc.best_layer))
        except FileNotFoundError as e:
            missing.append(f"run: {record.model_id} is incomplete ({e})")
            continue
        if not np.isfinite(desc.anisotropy):
            missing.append(f"run: {record.model_id} has no finite anisotropy at its best layer")
            continue
        out.append((record, desc, rdm))
    for message in missing:
        logger.warning("Skipping %s", message)
    return out, missing


def compare_runs(run_root, method: str = "spearman", analyzed=None) -> dict:
    """RDM-of-RDMs and size correlations over every analyzed model

    Parameters
    ----------
    analyzed: list, optional
        Output of an earlier analysis pass over ``run_root``; the runs are
        analyzed here when not given.

    Returns
    -------
    tables: dict
        ``{"rdm_of_rdms": ..., "size_correlations": ...}``, each a JSON
        ready dict, with a ``missing`` entry when it could not be computed.
    """
    if analyzed is None:
        analyzed, _ = _analyzed(run_root)
    records = [r for r, _, _ in analyzed]
    tables = {}
    if len(analyzed) >= 2:
        entries = [(r, rdm, d.anisotropy) for r, d, rdm in analyzed]
        result = rdm_of_rdms(
            entries,
            method,
            reference={r.model_id: reference_anisotropy(d) for r, d, _ in analyzed},
        ).reorder(family_order(records))
        tables["rdm_of_rdms"] = {
            **result.to_dict(),
            "pairs": [{"a": a, "b": b, "rho": rho} for a, b, rho in result.pairs()],
            "within_family": within_family(records, result),
            "normalization_change": normalization_change(entries, method),
        }
    else:
        tables["rdm_of_rdms"] = {"missing": f"need 2 analyzed models, found {len(analyzed)}"}

    try:
        rows = size_correlations([(r, d.to_dict()) for r, d, _ in analyzed])
        tables["size_correlations"] = {"rows": [row.to_dict() for row in rows]}
    except ValueError as e:
        tables["size_correlations"] = {"missing": str(e)}
    return tables


#
# Figures
#


def _save(fig, out_path, data) -> list:
    """Write ``fig`` in each configured format plus its JSON twin"""
    out_path = stringify_path(out_path)
    root, ext = os.path.splitext(out_path)
    formats = [ext.lstrip(".")] if ext else list(config.get("report.formats"))
    os.makedirs(os.path.dirname(root) or ".", exist_ok=True)
    paths = []
    # fixed salt and no timestamps, so repeated renders match
    with plt.rc_context({"svg.hashsalt": "emotion-geometry"}):
        for fmt in formats:
            path = f"{root}.{fmt}"
            metadata = {"Date": None, "Creator": None} if fmt == "svg" else None
            fig.savefig(path, format=fmt, dpi=150, bbox_inches="tight", metadata=metadata)
            paths.append(path)
    plt.close(fig)
    paths.append(write_json(data, f"{root}.json"))
    return paths


def render_heatmap(
    matrix,
    labels,
    out_path,
    title: str | None = None,
    distance: bool = False,
    annotate: bool = True,
) -> list:
    """Annotated heatmap of a square matrix

    Parameters
    ----------
    matrix:
        Square similarity matrix.
    labels:
        One label per row.
    out_path:
        Output path; without an extension every ``report.formats`` format
        is written.
    distance:
        Plot ``1 - matrix`` and label the colour bar as distance.

    Returns
    -------
    paths: list
        The image files followed by the JSON twin.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    labels = list(labels)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"Expected a square matrix, got shape {matrix.shape}")
    if len(labels) != matrix.shape[0]:
        raise ValueError(f"{len(labels)} labels for a {matrix.shape[0]}x{matrix.shape[0]} matrix")
    values = 1.0 - matrix if distance else matrix
    n = len(labels)
    size = max(4.0, 0.45 * n + 2)
    fig, ax = plt.subplots(figsize=(size, size * 0.85))
    sns.heatmap(
        values,
        xticklabels=labels,
        yticklabels=labels,
        annot=annotate and n <= 16,
        fmt=".2f",
        cmap="viridis_r" if distance else "RdBu_r",
        vmin=None if distance else -1,
        vmax=None if distance else 1,
        square=True,
        cbar_kws={"label": "distance (1 - cosine)" if distance else "similarity"},
        ax=ax,
    )
    if title:
        ax.set_title(title)
    return _save(
        fig,
        out_path,
        {
            "labels": labels,
            "values": values,
            "convention": "distance" if distance else "similarity",
        },
    )


def render_group_boxplot(groups: dict, out_path, reference: float | None = None, title=None) -> list:
    """Box, mean marker and points per named group of values

    A horizontal reference line is drawn at ``reference`` (default
    ``report.reference-rho``).
    """
    if not groups:
        raise ValueError("No groups to plot")
    data = {}
    for name, values in groups.items():
        values = np.asarray(list(values), dtype=np.float64)
        if not len(values):
            raise ValueError(f"Group {name!r} is empty")
        if not np.isfinite(values).all():
            raise ValueError(f"Group {name!r} contains non-finite values")
        data[name] = values
    reference = config.get("report.reference-rho") if reference is None else reference

    df = pd.DataFrame(
        [(name, v) for name, values in data.items() for v in values], columns=["group", "value"]
    )
    fig, ax = plt.subplots(figsize=(1.6 * len(data) + 2, 4))
    order = list(data)
    sns.boxplot(data=df, x="group", y="value", order=order, color="lightgray", ax=ax)
    sns.stripplot(
        data=df, x="group", y="value", order=order, color="black", size=4, jitter=False, ax=ax
    )
    means = [float(data[name].mean()) for name in order]
    ax.scatter(range(len(order)), means, marker="D", color="tab:red", zorder=3, label="mean")
    ax.axhline(reference, linestyle="--", color="gray", linewidth=1)
    ax.set_xlabel("")
    ax.set_ylabel("Spearman rho")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    return _save(
        fig,
        out_path,
        {
            "groups": {name: data[name] for name in order},
            "means": dict(zip(order, means)),
            "reference": reference,
        },
    )


def render_rdm_panels(rdms: dict, out_path) -> list:
    """One distance panel per model RDM"""
    k = len(rdms)
    cols = min(k, 4)
    rows = -(-k // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3.6 * rows), squeeze=False)
    twin = {}
    for ax, (model_id, rdm) in zip(axes.flat, rdms.items()):
        values = 1.0 - rdm.matrix
        sns.heatmap(
            values,
            xticklabels=rdm.emotion_order,
            yticklabels=rdm.emotion_order,
            cmap="viridis_r",
            square=True,
            cbar_kws={"label": "distance (1 - cosine)"},
            ax=ax,
        )
        ax.set_title(model_id, fontsize=8)
        ax.tick_params(labelsize=5)
        twin[model_id] = {"labels": list(rdm.emotion_order), "values": values}
    for ax in list(axes.flat)[k:]:
        ax.axis("off")
    return _save(fig, out_path, {"convention": "distance", "panels": twin})


def render_size_maturity(table: pd.DataFrame, out_path) -> list:
    """Size against anisotropy, RDM std and best-layer depth"""
    outcomes = ["anisotropy", "rdm_std", "best_layer_pct"]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    twin = {}
    for ax, outcome in zip(axes, outcomes):
        sns.scatterplot(data=table, x="size_b", y=outcome, hue="family", ax=ax, legend=ax is axes[-1])
        ax.set_xscale("log")
        ax.set_xlabel("parameters (B)")
        twin[outcome] = {
            "model_id": list(table["model_id"]),
            "size_b": list(table["size_b"]),
            outcome: list(table[outcome]),
        }
    if axes[-1].get_legend() is not None:
        sns.move_legend(axes[-1], "upper left", bbox_to_anchor=(1, 1), fontsize=7)
    return _save(fig, out_path, twin)


def render_contrast_bars(reports: dict, out_path) -> list:
    """Grouped bars of the four contrasts per model"""
    df = pd.DataFrame(
        [
            {"model_id": model_id, "contrast": c, "rho": report[c]}
            for model_id, report in reports.items()
            for c in CONTRASTS
        ]
    )
    fig, ax = plt.subplots(figsize=(2.2 * len(reports) + 2, 4))
    sns.barplot(data=df, x="model_id", y="rho", hue="contrast", hue_order=list(CONTRASTS), ax=ax)
    ax.axhline(0, color="black", linewidth=0.8)
    ax.set_xlabel("")
    ax.set_ylabel("Spearman rho")
    return _save(
        fig,
        out_path,
        {m: {c: r[c] for c in CONTRASTS} for m, r in reports.items()},
    )


def render_decomposition_panels(reports: dict, out_path) -> list:
    k = len(reports)
    fig, axes = plt.subplots(1, k, figsize=(3.8 * k, 3.4), squeeze=False)
    twin = {}
    for ax, (model_id, report) in zip(axes.flat, reports.items()):
        matrix = np.asarray(report["full_matrix"], dtype=np.float64)
        sns.heatmap(
            matrix,
            xticklabels=report["conditions"],
            yticklabels=report["conditions"],
            annot=True,
            fmt=".2f",
            cmap="RdBu_r",
            vmin=-1,
            vmax=1,
            square=True,
            cbar_kws={"label": "similarity"},
            ax=ax,
        )
        ax.set_title(model_id, fontsize=8)
        twin[model_id] = {"conditions": report["conditions"], "values": matrix}
    return _save(fig, out_path, {"convention": "similarity", "panels": twin})


def render_dissociation(annotations: pd.DataFrame, rho: dict, out_path) -> list:
    """Behavioral scores of annotated models next to their pairwise RDM similarity"""
    scores = annotations.select_dtypes("number")
    fig, ax = plt.subplots(figsize=(5, 3.6))
    scores.plot.bar(ax=ax, rot=0)
    ax.set_ylabel("score")
    ax.set_xlabel("")
    if rho:
        ax.set_title("; ".join(f"{a} / {b}: rho = {r:.2f}" for (a, b), r in rho.items()), fontsize=7)
    return _save(
        fig,
        out_path,
        {
            "scores": {m: row for m, row in scores.to_dict(orient="index").items()},
            "pairs": [{"a": a, "b": b, "rho": r} for (a, b), r in rho.items()],
        },
    )


#
# Report bundle
#


def load_annotations(path) -> pd.DataFrame:
    """External per-model scores keyed by ``model_id``, joined as-is"""
    path = stringify_path(path)
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        if isinstance(raw, dict):
            df = pd.DataFrame.from_dict(raw, orient="index")
            df.index.name = "model_id"
            return df.sort_index()
        df = pd.DataFrame(raw)
    else:
        df = pd.read_csv(path)
    if "model_id" not in df.columns:
        raise ValidationError(f"Annotation file {path} has no model_id column")
    return df.set_index("model_id").sort_index()


def _pair_groups(result: dict) -> dict:
    """Pair rho values grouped by configured groups or by reliability classes"""
    configured = config.get("report.pair-groups")
    rho = {(p["a"], p["b"]): p["rho"] for p in result["pairs"]}
    rho.update({(b, a): r for (a, b), r in list(rho.items())})
    if configured:
        groups = {}
        for name, pairs in configured.items():
            values = [rho[tuple(pair)] for pair in pairs if tuple(pair) in rho]
            if values:
                groups[name] = values
        return groups
    rank = {"ok": 0, "borderline": 1, "unreliable": 2}
    groups = {}
    for p in result["pairs"]:
        classes = sorted(
            [result["reliability"][p["a"]], result["reliability"][p["b"]]], key=rank.get
        )
        groups.setdefault(" / ".join(classes), []).append(p["rho"])
    return dict(sorted(groups.items(), key=lambda kv: [rank[c] for c in kv[0].split(" / ")]))


def _collect(run_root, filename) -> dict:
    out = {}
    for run_dir in run_dirs(run_root):
        path = os.path.join(run_dir, filename)
        if os.path.exists(path):
            report = read_json(path)
            out[report["model_id"]] = report
    return out


def _descriptor_table(analyzed, annotations) -> pd.DataFrame:
    rows = []
    for record, desc, _ in analyzed:
        rows.append(
            {
                "model_id": record.model_id,
                "family": record.family,
                "variant": record.variant,
                "size_b": record.size_b,
                "n_layers": record.n_layers,
                "d_model": record.d_model,
                "backend_kind": record.backend_kind,
                "best_layer": desc.best_layer,
                "best_layer_pct": desc.best_layer_pct,
                "anisotropy": desc.anisotropy,
                "rdm_std": desc.rdm_std,
                "steering_regime": desc.steering_regime,
                "reliability": reliability_flag(desc.anisotropy, reference_anisotropy(desc)),
            }
        )
    df = pd.DataFrame(rows)
    if annotations is not None and not df.empty:
        df = df.join(annotations, on="model_id")
    return df


@dataclass
class ReportBundle:
    out_dir: str
    tables: dict
    figures: dict
    missing: list

    @property
    def exit_code(self) -> int:
        return 3 if self.missing else 0


def emit_report(run_root, out_dir=None, annotations=None, method: str = "spearman") -> ReportBundle:
    """Consolidate every run under ``run_root`` into a report bundle

    Parameters
    ----------
    run_root:
        Directory of model run directories.
    out_dir:
        Defaults to ``<run_root>/report``.
    annotations:
        Optional CSV or JSON of external per-model scores, joined to the
        descriptor table by ``model_id``.

    Returns
    -------
    bundle: ReportBundle
        Anything that could not be produced is listed in ``missing`` and
        marked inside the affected table; ``exit_code`` is then 3.
    """
    run_root = stringify_path(run_root)
    out_dir = stringify_path(out_dir) if out_dir else os.path.join(run_root, "report")
    os.makedirs(out_dir, exist_ok=True)
    missing = []
    ann = load_annotations(annotations) if annotations is not None else None

    analyzed, incomplete = _analyzed(run_root)
    missing.extend(incomplete)
    if not analyzed:
        missing.append("descriptors: no analyzed runs")
    table = _descriptor_table(analyzed, ann)
    stand_in = _stand_in(run_root)
    compared = compare_runs(run_root, method, analyzed)

    tables = {
        "descriptors": {"rows": table.to_dict(orient="records"), "stand_in_corpus": stand_in},
        **compared,
        "equivalence": {"reports": _collect(run_root, "equivalence_report.json")},
        "decomposition": {"reports": _collect(run_root, "decomposition_report.json")},
    }
    for name in ["equivalence", "decomposition"]:
        if not tables[name]["reports"]:
            tables[name]["missing"] = f"no {name} reports under {run_root}"
    for record, desc, _ in analyzed:
        if desc.steering_regime == "not_available" and record.backend_kind == "named_hook":
            missing.append(f"steering: no trace for {record.model_id}")
    missing.extend(f"{name}: {t['missing']}" for name, t in tables.items() if "missing" in t)

    paths = {}
    for name in TABLES:
        paths[name] = write_json(tables[name], os.path.join(out_dir, f"{name}.json"))
    if not table.empty:
        paths["descriptors.parquet"] = os.path.join(out_dir, "descriptors.parquet")
        table.to_parquet(paths["descriptors.parquet"], engine="pyarrow", index=False)

    figures = _emit_figures(out_dir, analyzed, table, tables, ann)
    missing.extend(f"figure: {name}" for name in FIGURES if name not in figures)
    write_json({"missing": missing}, os.path.join(out_dir, "missing.json"))
    if missing:
        logger.warning("Report is partial; missing %s", missing)
    logger.info("Report written to %s", out_dir)
    return ReportBundle(out_dir, paths, figures, missing)


def _stand_in(run_root) -> bool:
    from emotion_geometry.stimuli import load_default_corpus

    # runs record the corpus digest; the bundled corpus is the stand-in
    default = load_default_corpus()
    for run_dir in run_dirs(run_root):
        _, manifest = read_run_meta(run_dir)
        if manifest.corpus_hash == default.digest and default.stand_in:
            return True
    return False


def _emit_figures(out_dir, analyzed, table, tables, annotations) -> dict:
    figures = {}

    def path(name):
        return os.path.join(out_dir, "figures", name)

    ror = tables["rdm_of_rdms"]
    if "missing" not in ror:
        figures["fig1_rdm_of_rdms"] = render_heatmap(
            ror["matrix"], ror["model_order"], path("fig1_rdm_of_rdms"), title="RDM similarity"
        )
        groups = _pair_groups(ror)
        if groups:
            figures["fig4_pair_groups"] = render_group_boxplot(groups, path("fig4_pair_groups"))
    finite = {r.model_id: rdm for r, _, rdm in analyzed if not rdm.contains_nan}
    if finite:
        figures["fig2_model_rdms"] = render_rdm_panels(finite, path("fig2_model_rdms"))
    if len(table) >= 2:
        figures["fig3_size_maturity"] = render_size_maturity(table, path("fig3_size_maturity"))
    reports = tables["decomposition"]["reports"]
    if reports:
        figures["fig5_decomposition"] = render_decomposition_panels(reports, path("fig5_decomposition"))
        figures["fig6_contrasts"] = render_contrast_bars(reports, path("fig6_contrasts"))
    if annotations is not None and "missing" not in ror:
        annotated = [m for m in annotations.index if m in ror["model_order"]]
        rho = {
            (a, b): r
            for a, b, r in (
                (p["a"], p["b"], p["rho"]) for p in ror["pairs"]
            )
            if a in annotated and b in annotated
        }
        figures["dissociation"] = render_dissociation(
            annotations.loc[annotated], rho, path("dissociation")
        )
    return figures
