"""Command-line interface.

One executable with eight subcommands covering the full surface:

* ``route``      — run the routing pipeline on one image, print routing + feature summary
* ``gen-synth``  — build a synthetic benchmark dataset (JSONL)
* ``gen-llm``    — build a dataset by calling a chat-completion endpoint
* ``eval``       — judge a dataset with a scorer, print the error-rate report
* ``metrics``    — confusion-matrix metrics and the composite average from outcome files
* ``gradcheck``  — verify analytic gradients against finite differences
* ``bench``      — per-stage latency of the fusion pipeline
* ``report``     — convert judgement files into the radar CSV

Exit codes: 0 success, 1 operational failure (bad data, endpoint down,
failed checks), 2 usage error.  Data goes to --out or stdout; diagnostics
always go to stderr, so stdout stays a single machine-readable document.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from .benchmark import (
    CATEGORY_NAMES,
    DatasetError,
    HallucinationCategory,
    build_synthetic_dataset,
    dumps_dataset,
    load_dataset,
    synth_scene,
)
from .datagen import (
    CATEGORY_SPECS,
    DEFAULT_TEMPLATE,
    DatagenError,
    HttpChatClient,
    PromptTemplate,
    category_spec,
    generate_dataset,
    load_caption_items,
    load_datagen_config,
)
from .evaluator import (
    AffinityConfig,
    CoinFlipScorer,
    EvaluationError,
    affinity_scorer,
    dumps_judgements,
    error_rates,
    evaluate_dataset,
    loads_judgements,
    oracle_scorer,
    radar_csv,
    toy_judging_config,
)
from .experts import PERSONAS, identity_adapter, load_raw_image, seeded_adapter
from .fusion import (
    FusionStrategy,
    PipelineError,
    ProjectorParams,
    load_pipeline_config,
    run_pipeline,
)
from .metrics import (
    autohallusion_aggregate,
    avg_metric,
    load_binary_outcomes,
    load_scenario_results,
    pope_metrics,
)
from .numerics import (
    check_router_fusion_gradients,
    measure_fusion_latency,
    small_gradcheck_config,
)

logger = logging.getLogger("routebench")

SCORER_CHOICES = ("oracle", "negated-oracle", "coinflip", "affinity")
STRATEGY_CHOICES = ("routed", "add", "concat")


class UsageError(Exception):
    """Flag combinations argparse cannot express; exits with code 2."""


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        logger.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _emit_json(doc, out) -> None:
    _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", out)


def _category_list(arg: str):
    categories = []
    for name in arg.split(","):
        name = name.strip()
        if name not in CATEGORY_NAMES:
            raise argparse.ArgumentTypeError(
                f"unknown category {name!r}; valid: {', '.join(CATEGORY_NAMES)}"
            )
        categories.append(HallucinationCategory(name))
    return tuple(categories)


def _persona(arg: str) -> str:
    if arg not in PERSONAS:
        raise argparse.ArgumentTypeError(
            f"unknown persona {arg!r}; valid: {', '.join(PERSONAS)}"
        )
    return arg


def _image_from_args(args):
    if args.image is not None:
        return load_raw_image(args.image)
    if args.scene_seed is None:
        raise UsageError("either --image or --scene-seed is required")
    _, image = synth_scene(args.scene_seed)
    return image


def _pipeline_from_args(args):
    if args.pipeline is not None:
        if args.favor is not None:
            raise UsageError("--pipeline and --favor are mutually exclusive")
        return load_pipeline_config(args.pipeline)
    return toy_judging_config(favored_persona=args.favor, seed=args.seed)


def cmd_route(args) -> int:
    image = _image_from_args(args)
    config = _pipeline_from_args(args)
    result = run_pipeline(image, config)
    features = result.features
    doc = {
        "routing": {
            "weights": [float(w) for w in result.routing.weights],
            "active": sorted(result.routing.active),
        },
        "features": {
            "tokens": features.tokens,
            "dim": features.dim,
            "source": features.source,
            "sha256": hashlib.sha256(features.values.tobytes()).hexdigest(),
        },
    }
    _emit_json(doc, args.out)
    return 0


def cmd_gen_synth(args) -> int:
    dataset = build_synthetic_dataset(
        args.per_category, seed=args.seed, categories=args.categories
    )
    _emit(dumps_dataset(dataset), args.out)
    logger.info("generated %d samples", len(dataset))
    return 0


def cmd_gen_llm(args) -> int:
    config = load_datagen_config(args.config)
    items = load_caption_items(args.items)
    if args.template is not None:
        template = PromptTemplate(Path(args.template).read_text(encoding="utf-8"))
    else:
        template = DEFAULT_TEMPLATE
    if args.categories is not None:
        specs = [category_spec(c) for c in args.categories]
    else:
        specs = CATEGORY_SPECS
    client = HttpChatClient(config)
    result = generate_dataset(client, items, specs=specs, config=config, template=template)
    _emit(dumps_dataset(result.samples), args.out)
    logger.info("generation stats: %s", json.dumps(result.stats.to_json_dict(), sort_keys=True))
    return 0


def _build_scorer(args, dataset):
    if args.scorer == "oracle":
        return oracle_scorer(dataset)
    if args.scorer == "negated-oracle":
        return oracle_scorer(dataset, negate=True)
    if args.scorer == "coinflip":
        return CoinFlipScorer(seed=args.seed)
    return affinity_scorer(AffinityConfig(alpha=args.alpha))


def cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    config = _pipeline_from_args(args)
    scorer = _build_scorer(args, dataset)
    failures: list = []
    judgements, report = evaluate_dataset(
        scorer,
        config,
        dataset,
        parallelism=args.parallelism,
        strict=not args.lenient,
        base_dir=args.base_dir,
        failures=failures,
    )
    if args.judgements:
        Path(args.judgements).write_text(dumps_judgements(judgements), encoding="utf-8")
        logger.info("wrote %s", args.judgements)
    doc = {"report": report.to_json_dict(), "failures": failures}
    _emit_json(doc, args.out)
    return 0


def cmd_metrics(args) -> int:
    if args.pope is None and args.autohallusion is None:
        raise UsageError("at least one of --pope / --autohallusion is required")
    doc: dict = {}
    if args.pope is not None:
        doc["pope"] = pope_metrics(load_binary_outcomes(args.pope)).to_json_dict()
    if args.autohallusion is not None:
        doc["autohallusion"] = autohallusion_aggregate(
            load_scenario_results(args.autohallusion), scenario_mean=args.scenario_mean
        )
    if args.pope is not None and args.autohallusion is not None:
        doc["avg"] = avg_metric(doc["pope"]["f1"], doc["autohallusion"]["overall"])
    _emit_json(doc, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    runs = []
    all_passed = True
    for offset in range(args.configs):
        seed = args.seed + offset
        config, image = small_gradcheck_config(seed)
        reports = check_router_fusion_gradients(
            config,
            image,
            seed=seed,
            eps=args.eps,
            threshold=args.threshold,
            max_coords_per_param=args.max_coords,
        )
        passed = all(r.passed for r in reports)
        all_passed = all_passed and passed
        runs.append(
            {
                "seed": seed,
                "passed": passed,
                "parameters": [r.to_json_dict() for r in reports],
            }
        )
    doc = {
        "eps": args.eps,
        "threshold": args.threshold,
        "all_passed": all_passed,
        "configs": runs,
    }
    _emit_json(doc, args.out)
    return 0 if all_passed else 1


def _bench_config(strategy: str, seed: int):
    base = toy_judging_config(seed=seed)
    if strategy == "routed":
        return base
    if strategy == "add":
        return dataclasses.replace(base, strategy=FusionStrategy(kind="add"))
    n = len(base.experts)
    dim = base.canonical_dim
    projector = ProjectorParams(
        stage1=seeded_adapter(n * dim, dim, seed=seed), stage2=identity_adapter(dim)
    )
    return dataclasses.replace(
        base, strategy=FusionStrategy(kind="concat"), projector=projector
    )


def cmd_bench(args) -> int:
    if args.image is not None:
        image = load_raw_image(args.image)
    else:
        _, image = synth_scene(args.scene_seed)
    strategies = [args.strategy] if args.strategy else list(STRATEGY_CHOICES)
    reports = []
    for strategy in strategies:
        config = _bench_config(strategy, args.config_seed)
        report = measure_fusion_latency(config, image, repeats=args.repeats)
        reports.append(report.to_json_dict())
    _emit_json({"reports": reports}, args.out)
    return 0


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.judgements]
    if args.names is not None:
        names = [n.strip() for n in args.names.split(",")]
        if len(names) != len(paths):
            raise UsageError(
                f"--names lists {len(names)} name(s) for {len(paths)} judgement file(s)"
            )
    else:
        names = [p.stem for p in paths]
        if len(set(names)) != len(names):
            raise UsageError("judgement file stems collide; pass explicit --names")
    reports = {}
    for name, path in zip(names, paths):
        judgements = loads_judgements(path.read_text(encoding="utf-8"))
        reports[name] = error_rates(judgements)
    _emit(radar_csv(reports), args.out)
    return 0


def _add_image_flags(sub, scene_seed_default=None):
    sub.add_argument("--image", help="raw image file (binary grid format)")
    sub.add_argument(
        "--scene-seed",
        type=int,
        default=scene_seed_default,
        help="render a synthetic scene with this seed instead of reading --image",
    )


def _add_pipeline_flags(sub):
    sub.add_argument("--pipeline", help="pipeline config JSON file")
    sub.add_argument(
        "--favor",
        type=_persona,
        default=None,
        help="bias the built-in toy pipeline's router toward one persona",
    )
    sub.add_argument("--seed", type=int, default=0, help="seed for the built-in toy pipeline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routebench",
        description="Multi-expert visual routing pipeline and hallucination benchmark tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    route = sub.add_parser("route", help="run the routing pipeline on one image")
    _add_image_flags(route)
    _add_pipeline_flags(route)
    route.add_argument("--out", help="write output here instead of stdout")
    route.set_defaults(func=cmd_route)

    gen_synth = sub.add_parser("gen-synth", help="build a synthetic benchmark dataset")
    gen_synth.add_argument("--per-category", type=int, required=True)
    gen_synth.add_argument("--seed", type=int, default=0)
    gen_synth.add_argument(
        "--categories", type=_category_list, default=None, help="comma-separated category names"
    )
    gen_synth.add_argument("--out")
    gen_synth.set_defaults(func=cmd_gen_synth)

    gen_llm = sub.add_parser("gen-llm", help="build a dataset via a chat-completion endpoint")
    gen_llm.add_argument("--items", required=True, help="JSONL of {image, caption} items")
    gen_llm.add_argument("--config", required=True, help="datagen config JSON")
    gen_llm.add_argument("--template", help="override the built-in prompt template")
    gen_llm.add_argument("--categories", type=_category_list, default=None)
    gen_llm.add_argument("--out")
    gen_llm.set_defaults(func=cmd_gen_llm)

    evaluate = sub.add_parser("eval", help="judge a dataset and report error rates")
    evaluate.add_argument("--dataset", required=True)
    _add_pipeline_flags(evaluate)
    evaluate.add_argument("--scorer", choices=SCORER_CHOICES, default="affinity")
    evaluate.add_argument("--alpha", type=float, default=8.0, help="affinity scorer strength")
    evaluate.add_argument("--parallelism", type=int, default=1)
    evaluate.add_argument("--lenient", action="store_true", help="skip failing samples")
    evaluate.add_argument("--base-dir", default=None, help="directory for file image refs")
    evaluate.add_argument("--judgements", help="also write per-sample judgements here")
    evaluate.add_argument("--out")
    evaluate.set_defaults(func=cmd_eval)

    metrics = sub.add_parser("metrics", help="binary metrics from outcome files")
    metrics.add_argument("--pope", help="JSONL of {pred, label}")
    metrics.add_argument("--autohallusion", help="JSONL of {scenario, correct}")
    metrics.add_argument("--scenario-mean", action="store_true")
    metrics.add_argument("--out")
    metrics.set_defaults(func=cmd_metrics)

    gradcheck = sub.add_parser("gradcheck", help="verify gradients on seeded small configs")
    gradcheck.add_argument("--configs", type=int, default=5)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--eps", type=float, default=1e-5)
    gradcheck.add_argument("--threshold", type=float, default=1e-6)
    gradcheck.add_argument("--max-coords", type=int, default=None)
    gradcheck.add_argument("--out")
    gradcheck.set_defaults(func=cmd_gradcheck)

    bench = sub.add_parser("bench", help="per-stage pipeline latency")
    _add_image_flags(bench, scene_seed_default=0)
    bench.add_argument("--strategy", choices=STRATEGY_CHOICES, default=None)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument(
        "--config-seed", type=int, default=0, help="seed for the benchmarked toy pipeline"
    )
    bench.add_argument("--out")
    bench.set_defaults(func=cmd_bench)

    report = sub.add_parser("report", help="radar CSV from judgement files")
    report.add_argument("--judgements", nargs="+", required=True)
    report.add_argument("--names", help="comma-separated run names (default: file stems)")
    report.add_argument("--out")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s", force=True
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        logger.error("%s", exc)
        return 2
    except (DatasetError, DatagenError, EvaluationError, PipelineError) as exc:
        logger.error("%s", exc)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
