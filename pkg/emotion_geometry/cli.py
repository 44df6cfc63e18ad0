"""``emotion-geometry`` command line

Extraction commands (``extract``, ``gen-extract``, ``equivalence``,
``steer``) take an exclusive lock on the model's run directory.  The
analysis commands only read persisted files.

Exit status is 0 on success, 2 on invalid input and 3 when a report is
emitted with missing parts.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

from filelock import FileLock, Timeout

from emotion_geometry.errors import AlignmentError, ValidationError

logger = logging.getLogger("emotion_geometry")


def _layers(value: str) -> list:
    """``"3"``, ``"3,5,9"`` or ``"4-8"``"""
    out = []
    for part in value.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return sorted(set(out))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", action="append", help="Model id; repeat for several")
    common.add_argument("--models-table", help="CSV or JSON model table")
    common.add_argument("--precision", choices=["fp16", "bf16", "fp32", "int8"])
    common.add_argument("--backend", choices=["named_hook", "hidden_state_sequence"])
    common.add_argument("--layers", type=_layers, help="e.g. 11 or 0-27 or 3,7,11")
    common.add_argument("--out", help="Run root directory")
    common.add_argument("--config", help="TOML, YAML or JSON pipeline configuration")
    common.add_argument("--device", help="cpu, cuda, mps or auto")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="emotion-geometry",
        description="Emotion-vector geometry across language models",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("extract", parents=[common], help="Comprehension extraction and layer sweep")
    gen = sub.add_parser("gen-extract", parents=[common], help="Generation-mode extraction")
    gen.add_argument("--condition", choices=["B", "C", "D"], required=True)
    gen.add_argument("--preset", choices=["matched", "alternative"])
    sub.add_parser("equivalence", parents=[common], help="Cross-backend equivalence test")
    steer = sub.add_parser("steer", parents=[common], help="Steering trace and regime")
    steer.add_argument("--emotion")
    sub.add_parser("analyze", parents=[common], help="RDMs and descriptors per model")
    sub.add_parser("compare", parents=[common], help="RDM-of-RDMs and size correlations")
    sub.add_parser("decompose", parents=[common], help="Four-condition contrast table")
    report = sub.add_parser("report", parents=[common], help="Tables and figures")
    report.add_argument("--annotations", help="External per-model scores (CSV or JSON)")
    return parser


class _Context:
    """Resolved configuration shared by the command handlers"""

    def __init__(self, args):
        from emotion_geometry.report import PipelineConfig

        self.args = args
        self.config = (
            PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        )
        if args.models_table:
            self.config.model_table = args.models_table
        if args.precision:
            self.config.precision = args.precision
        self.config.validate()
        self.out = args.out or self.config.out

    def records(self) -> list:
        from emotion_geometry.capture import record_from_hub

        table = {r.model_id: r for r in self.config.load_models()}
        if self.args.model:
            records = [table.get(m) or record_from_hub(m) for m in self.args.model]
        else:
            records = list(table.values())
        if self.args.backend:
            records = [r.replace(backend_kind=self.args.backend) for r in records]
        return [r.replace(precision=self.config.precision) for r in records]

    def model_ids(self) -> list:
        from emotion_geometry.registry import read_run_meta
        from emotion_geometry.report import run_dirs

        if self.args.model:
            return list(self.args.model)
        return [read_run_meta(d)[0].model_id for d in run_dirs(self.out)]

    @contextlib.contextmanager
    def lock(self, model_id):
        from emotion_geometry.registry import run_dir_for

        run_dir = run_dir_for(self.out, model_id)
        os.makedirs(run_dir, exist_ok=True)
        try:
            with FileLock(run_dir + ".lock", timeout=0):
                yield run_dir
        except Timeout:
            raise ValidationError(f"{run_dir} is locked by another extraction")


def _extract(ctx):
    from emotion_geometry.capture import load_model
    from emotion_geometry.comprehension import extract_run

    corpus = ctx.config.load_corpus()
    for record in ctx.records():
        with ctx.lock(record.model_id):
            handle = load_model(record, device=ctx.args.device)
            extract_run(handle, corpus, ctx.out, layers=ctx.args.layers)
    return 0


def _gen_extract(ctx):
    from emotion_geometry.capture import load_model
    from emotion_geometry.genprotocol import condition_protocol, extract_condition, preset

    condition = ctx.args.condition
    protocol = condition_protocol(condition)
    if ctx.args.preset:
        protocol = preset(ctx.args.preset, precision=protocol.precision)
    corpus = ctx.config.load_corpus()
    for record in ctx.records():
        backend = record.backend_kind
        if protocol.precision == "int8":
            backend = "hidden_state_sequence"
        with ctx.lock(record.model_id):
            handle = load_model(
                record, precision=protocol.precision, backend=backend, device=ctx.args.device
            )
            extract_condition(handle, corpus, condition, ctx.out, protocol)
    return 0


def _best_layer(out, model_id):
    from emotion_geometry.comprehension import load_sweep
    from emotion_geometry.registry import run_dir_for

    return load_sweep(run_dir_for(out, model_id)).best_layer


def _equivalence(ctx):
    from emotion_geometry.equivalence import run_equivalence

    corpus = ctx.config.load_corpus()
    for record in ctx.records():
        layers = ctx.args.layers or [_best_layer(ctx.out, record.model_id)]
        with ctx.lock(record.model_id):
            for layer in layers:
                run_equivalence(record, layer, corpus, run_root=ctx.out, device=ctx.args.device)
    return 0


def _steer(ctx):
    from emotion_geometry.capture import load_model
    from emotion_geometry.registry import layer_dir, load_vector_set, run_dir_for
    from emotion_geometry.steering import run_steering

    corpus = ctx.config.load_corpus()
    for record in ctx.records():
        if record.backend_kind != "named_hook":
            logger.warning("%s: steering not available on %s", record.model_id, record.backend_kind)
            continue
        layer = (ctx.args.layers or [_best_layer(ctx.out, record.model_id)])[0]
        vectors = load_vector_set(layer_dir(run_dir_for(ctx.out, record.model_id), layer))
        with ctx.lock(record.model_id):
            handle = load_model(record, device=ctx.args.device)
            run_steering(handle, vectors, corpus, ctx.args.emotion, run_root=ctx.out)
    return 0


def _analyze(ctx):
    from emotion_geometry.registry import run_dir_for
    from emotion_geometry.report import analyze_run

    for model_id in ctx.model_ids():
        desc = analyze_run(run_dir_for(ctx.out, model_id))
        logger.info(
            "%s: anisotropy %s, RDM std %.3f, best layer %d (%.1f%%), steering %s",
            model_id,
            desc.anisotropy,
            desc.rdm_std,
            desc.best_layer,
            100 * desc.best_layer_pct,
            desc.steering_regime,
        )
    return 0


def _compare(ctx):
    from emotion_geometry.registry import write_json
    from emotion_geometry.report import compare_runs

    tables = compare_runs(ctx.out)
    for name, table in tables.items():
        write_json(table, os.path.join(ctx.out, "report", f"{name}.json"))
    return 3 if any("missing" in t for t in tables.values()) else 0


def _decompose(ctx):
    from emotion_geometry.decomposition import run_decomposition

    for model_id in ctx.model_ids():
        run_decomposition(ctx.out, model_id)
    return 0


def _report(ctx):
    from emotion_geometry.report import emit_report

    annotations = ctx.args.annotations or ctx.config.annotations
    return emit_report(ctx.out, annotations=annotations).exit_code


HANDLERS = {
    "extract": _extract,
    "gen-extract": _gen_extract,
    "equivalence": _equivalence,
    "steer": _steer,
    "analyze": _analyze,
    "compare": _compare,
    "decompose": _decompose,
    "report": _report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        ctx = _Context(args)
        with ctx.config.dask_config():
            return HANDLERS[args.command](ctx)
    except (ValidationError, AlignmentError) as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
