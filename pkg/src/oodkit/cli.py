"""Command-line pipeline driver.

Subcommands: fit, score, evaluate, select, report. All take --config;
--seed overrides the configured seed and --jobs bounds evaluation
parallelism. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.

Artifacts land in the configured output directory:
    stats/                     fitted detector statistics
    gmm_<ensemble>.{json,npy}  mixture models (one set per ensemble)
    scores/<dataset>/          member score dumps
    selection/                 correlation matrix + admitted members
    distributions/             per-task id/ood score arrays
    evaluation.{json,csv}      the report
    provenance.json            config hash, seed, tool version

Reruns with identical inputs and seed reproduce every artifact byte for
byte (enable timing_baseline and the report gains wall-clock fields,
which are inherently non-reproducible).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config, validate_datasets
from .ensemble import (
    build_training_matrix,
    fit_score_model,
    gmm_loglik,
    load_gmm,
    save_gmm,
    select_members,
    select_n_components,
)
from .errors import CapabilityError, ConfigError, OodkitError
from .evaluate import (
    EvalTask,
    aggregate_report,
    auroc,
    compute_accuracy,
    emit_report,
    evaluate_dsd,
    evaluate_ed,
    read_report,
)
from .ingest import load_dataset, load_model_head
from .scores import MEMBER_NAMES, score_bundle
from .stats import fit_stats, load_stats, save_stats


def _write_provenance(config: PipelineConfig) -> None:
    config.output_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "config_hash": config.config_hash,
        "seed": config.seed,
        "tool_version": __version__,
    }
    (config.output_dir / "provenance.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def cmd_fit(config: PipelineConfig) -> None:
    """Fit detector statistics, select component counts, fit the mixtures."""
    validate_datasets(config)
    head = load_model_head(config.root)
    train = load_dataset(config.root, config.id_train)
    stats = fit_stats(
        train,
        head,
        lambda_scale=config.lambda_scale,
        vim_dim=config.vim_dim,
        dice_keep_fraction=config.dice_keep_fraction,
        react_percentile=config.react_percentile,
        seed=config.seed,
    )
    save_stats(stats, config.output_dir / "stats")

    val = load_dataset(config.root, config.id_val)
    gmm_kwargs = dict(
        seed=config.seed,
        reg_covar=config.gmm_reg,
        tol=config.gmm_tol,
        max_iter=config.gmm_max_iter,
        restarts=config.gmm_restarts,
    )
    for ens_id, ens_def in config.ensemble_definitions().items():
        split = build_training_matrix(
            val, stats, ens_def, config.validation_fraction, config.seed,
            config.temperature,
        )
        best_n, candidate_aucs = select_n_components(
            split.x_train,
            split.heldout_scores,
            split.heldout_correct,
            config.candidates,
            **gmm_kwargs,
        )
        model = fit_score_model(split.x_train, best_n, **gmm_kwargs)
        model.meta["members"] = list(ens_def.members)
        model.meta["n_components_selected"] = best_n
        model.meta["candidate_ed_auc"] = {str(k): v for k, v in candidate_aucs.items()}
        save_gmm(model, config.output_dir, ens_id)
        print(f"fit {ens_id}: n_components={best_n} "
              f"(held-out ED AUC {candidate_aucs[best_n]:.4f})")
    _write_provenance(config)


def cmd_score(config: PipelineConfig, dataset_id: str, ensemble_id: str) -> None:
    """Write the member score matrix for one dataset under one ensemble."""
    wanted = {config.id_train, config.id_val, *config.ood_datasets}
    if dataset_id not in wanted:
        raise ConfigError(f"dataset {dataset_id!r} is not configured")
    ens_def = config.ensemble_definitions().get(ensemble_id)
    if ens_def is None:
        raise ConfigError(f"ensemble {ensemble_id!r} is not configured")
    stats = load_stats(config.output_dir / "stats")
    bundle = load_dataset(config.root, dataset_id)
    matrix = score_bundle(bundle, stats, ens_def, config.temperature)
    out_dir = config.output_dir / "scores" / dataset_id
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / f"scores_{ensemble_id}.npy", matrix)
    columns = {
        "dataset_id": dataset_id,
        "ensemble_id": ensemble_id,
        "columns": list(ens_def.members),
    }
    (out_dir / f"scores_{ensemble_id}.json").write_text(
        json.dumps(columns, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_provenance(config)
    print(f"scored {dataset_id}: {matrix.shape[0]} x {matrix.shape[1]} ({ensemble_id})")


def cmd_select(config: PipelineConfig) -> None:
    """Dump the clean-validation correlation matrix and the admitted members."""
    validate_datasets(config)
    stats = load_stats(config.output_dir / "stats")
    val = load_dataset(config.root, config.id_val)

    available = []
    columns = []
    for member in MEMBER_NAMES:
        try:
            col = score_bundle(val, stats, [member], config.temperature)[:, 0]
        except CapabilityError:
            continue
        available.append(member)
        columns.append(col)
    matrix = np.stack(columns, axis=1)

    correct = val.predictions == val.labels
    ed_auc = {
        member: auroc(matrix[correct, j], matrix[~correct, j])
        for j, member in enumerate(available)
    }

    admitted, corr = select_members(matrix, available, ed_auc, config.corr_threshold)
    out_dir = config.output_dir / "selection"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "correlation_matrix.npy", corr)
    payload = {
        "members": available,
        "admitted": admitted,
        "ed_auc": ed_auc,
        "corr_threshold": config.corr_threshold,
    }
    (out_dir / "selected_members.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_provenance(config)
    print(f"admitted members: {', '.join(admitted)}")


def _build_tasks(config: PipelineConfig, manifests) -> list[EvalTask]:
    tasks = []
    for scorer in config.effective_scorers():
        tasks.append(EvalTask("ed_indist", config.id_val, None, scorer))
        for dataset_id in config.ood_datasets:
            tasks.append(EvalTask("dsd", config.id_val, dataset_id, scorer))
            shift = manifests[dataset_id].shift_type
            if shift == "adversarial":
                tasks.append(
                    EvalTask("ed_adversarial", manifests[dataset_id].origin_dataset_id,
                             dataset_id, scorer)
                )
            elif shift == "corruption":
                tasks.append(EvalTask("ed_corruption", config.id_val, dataset_id, scorer))
    return tasks


def cmd_evaluate(config: PipelineConfig, jobs: int = 1) -> None:
    """Run every configured DSD/ED task for every configured scorer."""
    manifests = validate_datasets(config)
    stats = load_stats(config.output_dir / "stats")
    bundles = {config.id_val: load_dataset(config.root, config.id_val)}
    for dataset_id in config.ood_datasets:
        bundles[dataset_id] = load_dataset(config.root, dataset_id)
        origin = bundles[dataset_id].manifest.origin_dataset_id
        if origin is not None and origin not in bundles:
            bundles[origin] = load_dataset(config.root, origin)

    ens_defs = config.ensemble_definitions()
    scorer_fns = {}
    elapsed = {name: 0.0 for name in config.effective_scorers()}

    def make_member_fn(name):
        def fn(bundle):
            start = time.perf_counter()
            out = score_bundle(bundle, stats, [name], config.temperature)[:, 0]
            elapsed[name] += time.perf_counter() - start
            return out

        return fn

    def make_ensemble_fn(name, ens_def, model):
        def fn(bundle):
            start = time.perf_counter()
            member_scores = score_bundle(bundle, stats, ens_def, config.temperature)
            out = gmm_loglik(model, member_scores)
            elapsed[name] += time.perf_counter() - start
            return out

        return fn

    for name in config.effective_scorers():
        if name in ens_defs:
            model = load_gmm(config.output_dir, name)
            scorer_fns[name] = make_ensemble_fn(name, ens_defs[name], model)
        elif name in MEMBER_NAMES:
            scorer_fns[name] = make_member_fn(name)
        else:
            raise ConfigError(f"scorer {name!r} is neither a member nor an ensemble")

    tasks = _build_tasks(config, manifests)
    from .evaluate import TaskResult

    def run_task(task: EvalTask):
        fn = scorer_fns[task.scorer]
        if task.setting == "dsd":
            outcome = evaluate_dsd(bundles[task.id_source], bundles[task.ood_source], fn)
            shift = manifests[task.ood_source].shift_type
            dataset = task.ood_source
        else:
            outcome = evaluate_ed(task, bundles, fn)
            if task.setting == "ed_indist":
                shift, dataset = "in_distribution", task.id_source
            else:
                shift = manifests[task.ood_source].shift_type
                dataset = task.ood_source
        return TaskResult(
            setting=task.setting,
            shift_type=shift,
            dataset=dataset,
            scorer=task.scorer,
            auc=outcome.auc,
            n_id=outcome.n_id,
            n_ood=outcome.n_ood,
        ), outcome

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            pairs = list(pool.map(run_task, tasks))
    else:
        pairs = [run_task(t) for t in tasks]

    dist_dir = config.output_dir / "distributions"
    dist_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for (result, outcome), task in zip(pairs, tasks):
        results.append(result)
        stem = f"{task.setting}_{result.dataset}_{task.scorer}"
        np.save(dist_dir / f"{stem}_id.npy", outcome.id_scores)
        np.save(dist_dir / f"{stem}_ood.npy", outcome.ood_scores)

    accuracy = {}
    for dataset_id, bundle in sorted(bundles.items()):
        acc = compute_accuracy(bundle)
        if acc is not None:
            accuracy[dataset_id] = acc

    timing = None
    if config.timing_baseline > 0:
        timing = {k: v / config.timing_baseline for k, v in sorted(elapsed.items())}

    report = aggregate_report(results, accuracy=accuracy, timing=timing)
    (config.output_dir / "evaluation.json").write_bytes(emit_report(report, "json"))
    (config.output_dir / "evaluation.csv").write_bytes(emit_report(report, "csv"))
    _write_provenance(config)
    for scorer, entry in report.averages.items():
        dsd = entry.get("dsd_overall")
        ed = entry.get("ed_overall")
        parts = [f"evaluate {scorer}:"]
        if dsd is not None:
            parts.append(f"DSD avg {dsd:.4f}")
        if ed is not None:
            parts.append(f"ED avg {ed:.4f}")
        print(" ".join(parts))


def cmd_report(config: PipelineConfig, fmt: str) -> None:
    """Re-emit the stored evaluation report to stdout."""
    path = config.output_dir / "evaluation.json"
    if not path.is_file():
        raise ConfigError(f"no evaluation report at {path}; run `evaluate` first")
    report = read_report(path.read_bytes(), "json")
    sys.stdout.write(emit_report(report, fmt).decode("utf-8"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="Post-hoc OOD detection scoring, ensembling, and evaluation",
    )
    parser.add_argument("--config", required=True, help="path to the TOML pipeline config")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel evaluation workers")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", help="fit detector statistics and mixture models")
    p_score = sub.add_parser("score", help="dump member scores for one dataset")
    p_score.add_argument("dataset_id")
    p_score.add_argument("ensemble_id")
    sub.add_parser("evaluate", help="run all DSD/ED tasks and emit reports")
    sub.add_parser("select", help="correlation-based member selection")
    p_report = sub.add_parser("report", help="print the stored evaluation report")
    p_report.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed)
        if args.command == "fit":
            cmd_fit(config)
        elif args.command == "score":
            cmd_score(config, args.dataset_id, args.ensemble_id)
        elif args.command == "evaluate":
            cmd_evaluate(config, jobs=max(1, args.jobs))
        elif args.command == "select":
            cmd_select(config)
        elif args.command == "report":
            cmd_report(config, args.format)
        return 0
    except OodkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
