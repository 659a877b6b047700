# coding: utf-8
"""Command line interface: ``salsa <command> [options]``.

Exit status is 0 on success, 2 for invalid or missing inputs and 1 for
runtime failures.
"""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = ["main", "build_parser"]

import argparse
import logging
import math
import sys

import numpy as np
from fs.errors import CreateFailed, ResourceNotFound
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from ._checkpoint import load_model, read_container, save_model
from ._config import RunConfig, dump_config, load_config
from ._dataset import ScanDataset, generate_synthetic
from ._descriptor import (SalsaModel, count_parameters, describe,
                          select_salient_points)
from ._geometry import pose_error
from ._localization import (RegistrationRecord, global_pose,
                            localization_success, register_candidate, rerank,
                            summarize_localization)
from ._retrieval import (DescriptorDatabase, QueryResult,
                         evaluate_retrieval, fit_database_whitener,
                         recall_curve)
from ._training import TrainingLog, make_optimizer, train_epoch
from ._util import (Stopwatch, dump_json, ensure_fs, load_json,
                    parallel_map, split_location)
from ._version import __version__
from .errors import (CheckpointError, ConfigError, PoseFormatError,
                     SalsaError, ScanFormatError)


log = logging.getLogger("salsa")

DESCRIPTORS_FILE = "descriptors.db"
DATABASE_FILE = "database.db"
MODEL_FILE = "model.salsa"
WHITENED_MODEL_FILE = "model_whitened.salsa"
RESULTS_FILE = "results.json"
RERANKED_FILE = "reranked.json"
REGISTRATION_FILE = "registration.json"
TRAIN_LOG_FILE = "train.log"

#: Failures reported with exit status 2.
VALIDATION_ERRORS = (ConfigError, ScanFormatError, PoseFormatError,
                     CheckpointError, ResourceNotFound, CreateFailed)


def _read_location(path):
    """Return ``(filesystem, name)`` for an existing file path."""
    # type: (str) -> tuple

    directory, name = split_location(path)
    return ensure_fs(directory), name


def _output(args, name):
    """Return ``(filesystem, name)`` of an output file in ``--out``."""
    # type: (argparse.Namespace, str) -> tuple

    return ensure_fs(args.out, create=True), name


def _input(args, value, default):
    """Resolve an input flag, defaulting to a file inside ``--out``."""
    # type: (argparse.Namespace, str, str) -> tuple

    if value:
        return _read_location(value)
    return ensure_fs(args.out), default


def _config(args):
    """Load ``--config`` (defaults otherwise) and apply ``--seed``."""
    # type: (argparse.Namespace) -> RunConfig

    config = RunConfig()
    if args.config:
        config = load_config(*_read_location(args.config))
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    return config


def _model(config, path=None):
    """Create the model of `config`, loading weights from `path` if set."""
    # type: (RunConfig, str) -> tuple

    model = SalsaModel(config.backbone, config.aggregator, config.seed)
    whitener = None
    if path:
        whitener = load_model(*(_read_location(path) + (model,)))
    return model, whitener


def cmd_generate(args, config, watch):
    """Write a synthetic dataset."""
    with watch.stage("generate"):
        dataset, neighbors = generate_synthetic(
            args.scenes, args.points, args.overlap, args.noise, config.seed)
        dataset.save(ensure_fs(args.out, create=True), neighbors)
    log.info("wrote %d scans to %s", len(dataset), args.out)


def cmd_dump_config(args, config, watch):
    """Write the effective configuration."""
    dump_config(*(_output(args, args.name) + (config,)))


def cmd_train(args, config, watch):
    """Train a model on a dataset and write checkpoints and a step log."""
    dataset = ScanDataset.open(args.dataset)
    model, _ = _model(config, args.model)
    log.info("training %d parameters on %d scans", count_parameters(model),
             len(dataset))
    optimizer = make_optimizer(model.parameters(), config.training)
    rng = np.random.default_rng(config.seed)
    out, _ = _output(args, MODEL_FILE)
    step = 0
    with TrainingLog(out, TRAIN_LOG_FILE) as training_log:
        for epoch in range(1, config.training.epochs + 1):
            with watch.stage("train"):
                stats = train_epoch(dataset, model, optimizer, rng,
                                    config.loss, config.mining,
                                    config.training, training_log,
                                    config.threads, step)
            step += stats.steps
            log.info("epoch %d: %d steps, mean loss %.4f, per query %.4f, "
                     "%d skipped", epoch, stats.steps, stats.mean_total,
                     stats.mean_query_loss, stats.skipped)
            if epoch % config.training.checkpoint_every == 0:
                save_model(out, "checkpoint_{:03d}.salsa".format(epoch),
                           model)
    save_model(out, MODEL_FILE, model)


def _extract_one(model, config, dataset, scan_id):
    cloud = dataset.load(scan_id)
    output = describe(cloud, model)
    local = select_salient_points(output.local, output.attention,
                                  config.localization.keypoints,
                                  output.grid.inverse)
    return output.descriptor.data.reshape(-1), local


def cmd_extract(args, config, watch):
    """Compute scene and local descriptors of every scan."""
    dataset = ScanDataset.open(args.dataset)
    model, _ = _model(config, args.model)
    with watch.stage("extract"):
        outputs = parallel_map(
            lambda scan_id: _extract_one(model, config, dataset, scan_id),
            dataset.ids, config.threads)
    db = DescriptorDatabase()
    for scan_id, (descriptor, local) in zip(dataset.ids, outputs):
        db.add(scan_id, descriptor, dataset.pose(scan_id), local)
    db.save(*_output(args, DESCRIPTORS_FILE))


def cmd_build_db(args, config, watch):
    """Build the database of the database split, whitened when enabled."""
    dataset = ScanDataset.open(args.dataset)
    descriptors = DescriptorDatabase.load(
        *_input(args, args.descriptors, DESCRIPTORS_FILE))
    db = DescriptorDatabase()
    for scan_id in dataset.database_ids:
        entry = descriptors.entry(scan_id)
        db.add(scan_id, entry.descriptor, entry.pose, entry.local)
    if config.whitening.enabled:
        with watch.stage("whitening"):
            whitener = fit_database_whitener(db, config.whitening)
            db = db.whitened(whitener)
        model, _ = _model(config, args.model)
        save_model(*(_output(args, WHITENED_MODEL_FILE) + (model, whitener)))
    db.save(*_output(args, DATABASE_FILE))
    log.info("database of %d entries, dim %d", len(db), db.dim)


def _load_whitener(args):
    """Whitener stored in ``--model``, if any."""
    if not args.model:
        return None
    filesystem, name = _read_location(args.model)
    with filesystem.openbin(name) as stream:
        return read_container(stream, name)[1]


def cmd_query(args, config, watch):
    """Retrieve the nearest database entries of every query."""
    dataset = ScanDataset.open(args.dataset)
    descriptors = DescriptorDatabase.load(
        *_input(args, args.descriptors, DESCRIPTORS_FILE))
    db = DescriptorDatabase.load(*_input(args, args.database, DATABASE_FILE))
    whitener = _load_whitener(args)
    results = []
    with watch.stage("query"):
        for scan_id in dataset.query_ids:
            values = descriptors.entry(scan_id).descriptor.astype(np.float64)
            if whitener is not None:
                values = whitener.transform(values)
                values = values / max(np.linalg.norm(values), 1e-12)
            results.append(db.knn(values, config.retrieval.top_k, scan_id))
    dump_json(*(_output(args, RESULTS_FILE)
                + ([r.to_json() for r in results],)))


def _load_results(args, default):
    filesystem, name = _input(args, args.results, default)
    return [QueryResult.from_json(r) for r in load_json(filesystem, name)]


def cmd_rerank(args, config, watch):
    """Re-rank the top retrievals by spectral fitness."""
    descriptors = DescriptorDatabase.load(
        *_input(args, args.descriptors, DESCRIPTORS_FILE))
    db = DescriptorDatabase.load(*_input(args, args.database, DATABASE_FILE))
    records = []
    with watch.stage("rerank"):
        for result in _load_results(args, RESULTS_FILE):
            query = descriptors.entry(result.query_id).local
            candidates = [(i, db.entry(i).local) for i in result.ids]
            ranked = rerank(query, candidates, config.localization,
                            config.threads)
            records.append({
                "query": result.query_id,
                "ids": [r.id for r in ranked],
                "distances": [result.distances[r.retrieval_rank]
                              for r in ranked],
                "fitness": [r.fitness for r in ranked],
            })
    dump_json(*(_output(args, RERANKED_FILE) + (records,)))


def cmd_register(args, config, watch):
    """Register every query to its first candidate."""
    dataset = ScanDataset.open(args.dataset)
    descriptors = DescriptorDatabase.load(
        *_input(args, args.descriptors, DESCRIPTORS_FILE))
    db = DescriptorDatabase.load(*_input(args, args.database, DATABASE_FILE))
    results = _load_results(args, RERANKED_FILE)
    cfg = config.localization

    def register(item):
        index, result = item
        rng = np.random.default_rng([config.seed, index])
        candidate = result.ids[0]
        estimate = register_candidate(descriptors.entry(result.query_id).local,
                                      db.entry(candidate).local, cfg, rng)
        truth = dataset.relative_pose(result.query_id, candidate)
        rte, rre = pose_error(estimate.transform, truth)
        success = localization_success(estimate, truth, cfg.success_rte,
                                       cfg.success_rre)
        return RegistrationRecord(result.query_id, candidate, estimate, rte,
                                  rre, success)

    with watch.stage("register"):
        records = parallel_map(register, list(enumerate(results)),
                               config.threads)
    payload = []
    for record in records:
        item = record.to_json()
        world = global_pose(db.entry(record.candidate_id).pose,
                            record.estimate.transform)
        item["world_pose"] = [float(v) for v in
                              world.as_matrix34().reshape(-1)]
        payload.append(item)
    dump_json(*(_output(args, REGISTRATION_FILE) + (payload,)))
    summary = summarize_localization(records)
    log.info("localization success %.2f%%", summary.success_rate)


def _metrics_table(metrics):
    table = Table(title="Retrieval", show_header=True,
                  header_style="bold magenta")
    table.add_column("radius (m)")
    ks = list(next(iter(metrics.recall_at.values())))
    for k in ks:
        table.add_column("R@{}".format(k), justify="right")
    table.add_column("MRR", justify="right")
    table.add_column("F1max", justify="right")
    table.add_column("excluded", justify="right")
    for radius, recall in metrics.recall_at.items():
        table.add_row("{:g}".format(radius),
                      *["{:.2f}".format(recall[k]) for k in ks],
                      "{:.2f}".format(metrics.mrr[radius]),
                      "{:.3f}".format(metrics.f1_max[radius]),
                      str(metrics.excluded[radius]))
    return table


def cmd_evaluate(args, config, watch):
    """Write retrieval metrics and the localization summary."""
    dataset = ScanDataset.open(args.dataset)
    db = DescriptorDatabase.load(*_input(args, args.database, DATABASE_FILE))
    results = _load_results(args, RESULTS_FILE)
    query_positions = dataset.positions([r.query_id for r in results])
    db_positions = db.positions()
    cfg = config.retrieval
    metrics = evaluate_retrieval(results, query_positions, db_positions,
                                 cfg.recall_ks, cfg.radii, cfg.mrr_depth)
    out, _ = _output(args, "metrics.csv")
    out.writetext("metrics.csv", metrics.to_csv())
    report = {"retrieval": metrics.to_json()}

    curve = ["radius,k,recall"]
    for radius in cfg.radii:
        curve += ["{!r},{},{!r}".format(float(radius), k, value)
                  for k, value in recall_curve(results, query_positions,
                                               db_positions, radius,
                                               cfg.top_k)]
    out.writetext("recall_curve.csv", "\n".join(curve) + "\n")

    console = Console(stderr=True)
    console.print(_metrics_table(metrics))
    if args.registration:
        filesystem, name = _read_location(args.registration)
        records = load_json(filesystem, name)
        summary = summarize_localization(
            RegistrationRecord(r["query"], r["candidate"], None, r["rte"],
                               r["rre"], r["success"]) for r in records)
        report["localization"] = {
            "success_rate": summary.success_rate,
            "mean_rte": None if math.isnan(summary.mean_rte)
            else summary.mean_rte,
            "mean_rre": None if math.isnan(summary.mean_rre)
            else summary.mean_rre,
            "count": summary.count,
        }
        table = Table(title="Localization", header_style="bold magenta")
        for column in ("S (%)", "RTE (m)", "RRE (deg)", "queries"):
            table.add_column(column, justify="right")
        table.add_row("{:.2f}".format(summary.success_rate),
                      "{:.3f}".format(summary.mean_rte),
                      "{:.3f}".format(summary.mean_rre), str(summary.count))
        console.print(table)
    dump_json(out, "metrics.json", report)


COMMANDS = {
    "generate": cmd_generate,
    "dump-config": cmd_dump_config,
    "train": cmd_train,
    "extract": cmd_extract,
    "build-db": cmd_build_db,
    "query": cmd_query,
    "rerank": cmd_rerank,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
}


def build_parser():
    """Return the argument parser of every command."""
    # type: () -> argparse.ArgumentParser

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for debug output")

    parser = argparse.ArgumentParser(
        prog="salsa", description="LiDAR place recognition pipeline")
    parser.add_argument("--version", action="version",
                        version="%(prog)s " + __version__)
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    def add(name, help_text):
        return commands.add_parser(name, parents=[common], help=help_text)

    sub = add("generate", "write a synthetic dataset")
    sub.add_argument("--scenes", type=int, default=20)
    sub.add_argument("--points", type=int, default=1024)
    sub.add_argument("--overlap", type=float, default=0.8)
    sub.add_argument("--noise", type=float, default=0.02)

    sub = add("dump-config", "write the configuration with its defaults")
    sub.add_argument("--name", default="salsa.ini")

    for name, help_text in (("train", "train a model"),
                            ("extract", "compute scan descriptors"),
                            ("build-db", "build the descriptor database")):
        sub = add(name, help_text)
        sub.add_argument("--dataset", required=True)
        sub.add_argument("--model", help="model container")
        if name == "build-db":
            sub.add_argument("--descriptors")

    sub = add("query", "retrieve database candidates")
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--descriptors")
    sub.add_argument("--database")
    sub.add_argument("--model", help="container holding the whitener")

    sub = add("rerank", "re-rank candidates by spectral fitness")
    sub.add_argument("--descriptors")
    sub.add_argument("--database")
    sub.add_argument("--results")

    sub = add("register", "register queries to their best candidate")
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--descriptors")
    sub.add_argument("--database")
    sub.add_argument("--results")

    sub = add("evaluate", "compute retrieval and localization metrics")
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--database")
    sub.add_argument("--results")
    sub.add_argument("--registration")
    return parser


def _setup_logging(verbosity):
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbosity, 2)]
    handler = RichHandler(console=Console(stderr=True), show_path=False)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("salsa")
    root.handlers[:] = [handler]
    root.setLevel(level)


def main(argv=None):
    """Run the command line; return the exit status."""
    # type: (list) -> int

    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    watch = Stopwatch()
    try:
        config = _config(args)
        COMMANDS[args.command](args, config, watch)
    except VALIDATION_ERRORS as error:
        log.error("%s", error)
        return 2
    except (SalsaError, ValueError, OSError) as error:
        log.error("%s failed: %s", args.command, error)
        return 1
    watch.report(log)
    return 0


if __name__ == "__main__":
    sys.exit(main())
