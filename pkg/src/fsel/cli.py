"""Command-line entry point for reproducible selection and evaluation runs.

Subcommands: embed, select, evaluate, benchmark, diagnose, synth.  All
randomness flows from explicit --seed flags; repeating an invocation
with identical flags produces byte-identical artifacts apart from the
generated_at timestamp field.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import (
    BudgetError,
    ManifestError,
    SelectionBudget,
    load_manifest,
    load_selection,
    save_manifest,
    save_selection,
    validate_budget,
)
from .encoder import (
    CacheProvider,
    EmbeddingCache,
    ExternalProvider,
    ProviderError,
    ReferenceEncoder,
    decode_image,
    embed_item,
    read_cache,
    write_cache,
)
from .evaluation import (
    CLASSIFIERS,
    DEFAULT_SHOTS,
    LinearProbeConfig,
    STD_BENCH,
    SyntheticSpec,
    generality_diagnostic,
    generate_synthetic,
    linear_probe_train,
    nearest_centroid_classify,
    run_experiment,
)
from .perturb import NoiseConfig
from .strategies import (
    ClassPrototypes,
    DEFAULT_TEMPERATURE,
    METRICS,
    PROTOTYPE_STRATEGIES,
    STRATEGY_NAMES,
    prototypes_from_validation,
    run_selection,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BUDGET = 2
EXIT_PROVIDER = 3


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["generated_at"] = _timestamp()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _build_provider(spec: str, dim: int, proj_seed: int):
    """Parse --provider into (provider, attached cache or None)."""
    if spec == "reference":
        return ReferenceEncoder(proj_seed=proj_seed, out_dim=dim), None
    kind, _, arg = spec.partition(":")
    if kind == "cache" and arg:
        cache = read_cache(arg)
        return CacheProvider(cache), cache
    if kind == "external" and arg:
        return ExternalProvider(arg, dim), None
    raise ValueError(
        f"invalid provider spec {spec!r}; expected reference, cache:PATH, or external:URL"
    )


def _add_provider_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--provider",
        default="reference",
        help="embedding provider: reference | cache:PATH | external:URL",
    )
    parser.add_argument("--dim", type=int, default=64, help="embedding dimension")
    parser.add_argument(
        "--proj-seed",
        type=int,
        default=0,
        help="projection seed for the reference encoder",
    )


def _add_noise_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sigma", type=float, default=0.1, help="noise std in pixel units")
    parser.add_argument("--mu", type=float, default=0.0, help="noise mean in pixel units")
    parser.add_argument(
        "--variants", type=int, default=20, help="noised variants per anchor"
    )


def _parse_int_list(raw: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"{flag} expects comma-separated integers, got {raw!r}")


def _load_prototypes(spec, manifest, provider, cache):
    if spec == "validation":
        return prototypes_from_validation(manifest, provider, cache)
    return ClassPrototypes.from_cache_file(spec)


def cmd_embed(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    provider, attached_cache = _build_provider(args.provider, args.dim, args.proj_seed)
    out_path = Path(args.out)
    existing: EmbeddingCache | None = None
    if args.resume and out_path.exists():
        existing = read_cache(out_path)
        if existing.dim != provider.dim:
            print(
                f"embed failed: existing cache dim {existing.dim} does not match "
                f"provider dim {provider.dim}",
                file=sys.stderr,
            )
            return EXIT_FAILURE

    vectors: dict[str, np.ndarray] = {}
    pending = []
    for item in manifest.items:
        if existing is not None and item.id in existing:
            vectors[item.id] = existing.vectors[item.id]
        else:
            pending.append(item)

    # External calls go out in batches; everything else is per item.
    batched: dict[str, np.ndarray] = {}
    if isinstance(provider, ExternalProvider):
        image_items = [item for item in pending if item.path is not None]
        images = []
        for item in image_items:
            try:
                images.append(decode_image(item.path))
            except ProviderError as exc:
                print(f"embed failed for item {item.id!r}: {exc}", file=sys.stderr)
                return EXIT_FAILURE
        for start in range(0, len(image_items), args.batch_size):
            chunk = image_items[start : start + args.batch_size]
            try:
                embeddings = provider.encode_batch(images[start : start + args.batch_size])
            except ProviderError as exc:
                ids = ", ".join(repr(item.id) for item in chunk)
                print(f"embed failed for items {ids}: {exc}", file=sys.stderr)
                return EXIT_FAILURE
            for item, embedding in zip(chunk, embeddings):
                batched[item.id] = embedding.values

    for item in pending:
        if item.id in batched:
            vectors[item.id] = batched[item.id]
            continue
        try:
            vectors[item.id] = embed_item(provider, item, attached_cache).values
        except ProviderError as exc:
            print(f"embed failed for item {item.id!r}: {exc}", file=sys.stderr)
            return EXIT_FAILURE

    ordered = {item.id: vectors[item.id] for item in manifest.items}
    count = write_cache(out_path, provider.dim, ordered)
    reused = len(manifest.items) - len(pending)
    note = f" ({reused} reused)" if args.resume and reused else ""
    print(f"wrote {count} embeddings (dim {provider.dim}) to {out_path}{note}")
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    stage = "manifest"
    try:
        manifest = load_manifest(args.manifest)
        stage = "provider"
        provider, cache = _build_provider(args.provider, args.dim, args.proj_seed)
        budget = SelectionBudget(
            shots_per_class=args.shots, num_classes=manifest.num_classes
        )
        stage = "budget"
        validate_budget(manifest, budget)
        stage = "prototypes"
        prototypes = None
        if args.strategy in PROTOTYPE_STRATEGIES:
            if not args.prototypes:
                raise ValueError(f"prototypes required for strategy {args.strategy!r}")
            prototypes = _load_prototypes(args.prototypes, manifest, provider, cache)
        stage = "scoring"
        noise = NoiseConfig(
            mu=args.mu, sigma=args.sigma, variants=args.variants, base_seed=args.seed
        )
        result = run_selection(
            args.strategy,
            manifest,
            budget,
            provider,
            seed=args.seed,
            cache=cache,
            prototypes=prototypes,
            noise=noise,
            temperature=args.temperature,
            metric=args.metric,
            jobs=args.jobs,
        )
        stage = "write"
        save_selection(result, args.out, generated_at=_timestamp())
    except BudgetError as exc:
        print(f"select failed at stage {stage!r}: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except ProviderError as exc:
        print(f"select failed at stage {stage!r}: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (ManifestError, ValueError, OSError) as exc:
        print(f"select failed at stage {stage!r}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    total = sum(len(entries) for entries in result.classes.values())
    print(
        f"selected {total} items ({args.shots} per class, strategy {args.strategy}) "
        f"-> {args.out}"
    )
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    selection = load_selection(args.selection)
    provider, cache = _build_provider(args.provider, args.dim, args.proj_seed)
    chosen = [
        (item_id, class_id)
        for class_id in sorted(selection.classes)
        for item_id, _ in selection.classes[class_id]
    ]
    try:
        train_features = np.stack(
            [embed_item(provider, manifest.item(item_id), cache).values for item_id, _ in chosen]
        )
        test_items = manifest.split_items("test")
        test_features = np.stack(
            [embed_item(provider, item, cache).values for item in test_items]
        )
    except KeyError as exc:
        print(f"evaluate failed: selection references {exc.args[0]}", file=sys.stderr)
        return EXIT_FAILURE
    except ProviderError as exc:
        print(f"evaluate failed: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    train_labels = np.asarray([label for _, label in chosen], dtype=np.int64)
    test_labels = np.asarray([item.label for item in test_items], dtype=np.int64)
    if args.classifier == "nearest-centroid":
        predicted = nearest_centroid_classify(
            train_features, train_labels, test_features, manifest.num_classes
        )
    else:
        model = linear_probe_train(
            train_features,
            train_labels,
            manifest.num_classes,
            LinearProbeConfig(init_seed=args.probe_seed),
        )
        predicted = model.predict(test_features)
    accuracy = float(np.mean(predicted == test_labels))
    shots = len(chosen) // max(len(selection.classes), 1)
    payload = {
        "strategy": selection.strategy,
        "shots": shots,
        "seed": selection.seed,
        "classifier": args.classifier,
        "accuracy": accuracy,
    }
    if args.out:
        _write_json(Path(args.out), payload)
    print(
        f"accuracy {accuracy:.4f} (strategy {selection.strategy}, {shots} shots, "
        f"classifier {args.classifier})"
    )
    return EXIT_OK


def _print_rankings(report, shots: list[int]) -> None:
    aggregates = report.aggregates()
    for k in shots:
        rows = sorted(
            (a for a in aggregates if a.shots == k), key=lambda a: -a.mean
        )
        if not rows:
            continue
        print(f"shots={k}")
        for rank, agg in enumerate(rows, start=1):
            print(
                f"  {rank}. {agg.strategy:<12} mean={agg.mean:.4f} "
                f"std={agg.std:.4f} seeds={agg.n_seeds}"
            )


def cmd_benchmark(args: argparse.Namespace) -> int:
    if args.synthetic:
        spec = STD_BENCH if args.synthetic == "std-bench" else SyntheticSpec.from_file(args.synthetic)
        manifest = generate_synthetic(spec)
        source = {"synthetic": args.synthetic}
    else:
        if not args.manifest:
            print("benchmark needs --manifest or --synthetic", file=sys.stderr)
            return EXIT_FAILURE
        manifest = load_manifest(args.manifest)
        source = {"manifest": str(args.manifest)}
    provider, cache = _build_provider(args.provider, args.dim, args.proj_seed)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    shots = _parse_int_list(args.shots, "--shots")
    seeds = [args.seed + i for i in range(args.seeds)]
    noise = NoiseConfig(
        mu=args.mu, sigma=args.sigma, variants=args.variants, base_seed=args.seed
    )
    prototypes = None
    if args.prototypes and args.prototypes != "validation":
        prototypes = ClassPrototypes.from_cache_file(args.prototypes)
    report = run_experiment(
        manifest,
        strategies,
        shots,
        seeds,
        provider,
        classifier=args.classifier,
        cache=cache,
        noise=noise,
        temperature=args.temperature,
        probe=LinearProbeConfig(init_seed=args.probe_seed),
        prototypes=prototypes,
        metric=args.metric,
        jobs=args.jobs,
        dedupe=args.dedupe,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(report.to_csv_text(), encoding="utf-8")
    config_echo = {
        **source,
        "provider": args.provider,
        "dim": args.dim,
        "proj_seed": args.proj_seed,
        "strategies": strategies,
        "shots": shots,
        "seeds": seeds,
        "classifier": args.classifier,
        "probe_seed": args.probe_seed,
        "noise": {
            "mu": args.mu,
            "sigma": args.sigma,
            "variants": args.variants,
            "base_seed": args.seed,
        },
        "temperature": args.temperature,
        "metric": args.metric,
        "dedupe": args.dedupe,
    }
    _write_json(
        out_dir / "aggregates.json",
        {
            "config": config_echo,
            "aggregates": report.aggregates_to_dicts(),
            "failures": [
                {
                    "strategy": f.strategy,
                    "shots": f.shots,
                    "seed": f.seed,
                    "error": f.error,
                }
                for f in report.failures
            ],
        },
    )
    _print_rankings(report, shots)
    print(
        f"wrote {len(report.rows)} rows to {out_dir / 'results.csv'} "
        f"({len(report.failures)} failed)"
    )
    if report.failures:
        for failure in report.failures:
            print(
                f"row failed: strategy={failure.strategy} shots={failure.shots} "
                f"seed={failure.seed}: {failure.error}",
                file=sys.stderr,
            )
        return EXIT_FAILURE
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    provider, cache = _build_provider(args.provider, args.dim, args.proj_seed)
    items = manifest.items if args.split == "all" else manifest.split_items(args.split)
    try:
        embeddings = [embed_item(provider, item, cache).values for item in items]
    except ProviderError as exc:
        print(f"diagnose failed: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    try:
        result = generality_diagnostic(embeddings, seed=args.seed)
    except ValueError as exc:
        print(f"diagnose failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    note = "sampled" if result.sampled else "exact"
    print(
        f"generality {result.percent:.4f}% "
        f"(mean pairwise cosine similarity, {note}, "
        f"{result.n_used} of {result.n_items} embeddings)"
    )
    if args.out:
        _write_json(
            Path(args.out),
            {
                "generality_percent": result.percent,
                "n_items": result.n_items,
                "n_used": result.n_used,
                "sampled": result.sampled,
                "split": args.split,
            },
        )
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = STD_BENCH if args.std_bench else SyntheticSpec.from_file(args.spec)
    manifest = generate_synthetic(spec)
    save_manifest(manifest, args.out)
    counts = manifest.counts_per_split()
    print(
        f"wrote {len(manifest)} items to {args.out} "
        f"(classes={manifest.num_classes}, pool={counts['pool']}, "
        f"validation={counts['validation']}, test={counts['test']})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsel",
        description="Few-shot example selection and evaluation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_embed = sub.add_parser("embed", help="embed every manifest item into a cache file")
    p_embed.add_argument("--manifest", required=True)
    _add_provider_flags(p_embed)
    p_embed.add_argument("--out", required=True, help="cache file to write")
    p_embed.add_argument(
        "--resume", action="store_true", help="reuse vectors already in --out"
    )
    p_embed.add_argument(
        "--batch-size", type=int, default=8, help="batch size for external providers"
    )
    p_embed.set_defaults(func=cmd_embed)

    p_select = sub.add_parser("select", help="select K shots per class with one strategy")
    p_select.add_argument("--manifest", required=True)
    _add_provider_flags(p_select)
    p_select.add_argument("--strategy", required=True, choices=STRATEGY_NAMES)
    p_select.add_argument("--shots", type=int, required=True, help="K per class")
    p_select.add_argument("--seed", type=int, default=0)
    p_select.add_argument(
        "--prototypes",
        default=None,
        help="prototype cache file, or 'validation' for validation centroids",
    )
    _add_noise_flags(p_select)
    p_select.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p_select.add_argument("--metric", default="cosine", choices=METRICS)
    p_select.add_argument("--jobs", type=int, default=1)
    p_select.add_argument("--out", required=True, help="selection JSON to write")
    p_select.set_defaults(func=cmd_select)

    p_eval = sub.add_parser("evaluate", help="train on a selection and report accuracy")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--selection", required=True, help="selection JSON from select")
    _add_provider_flags(p_eval)
    p_eval.add_argument("--classifier", default="linear-probe", choices=CLASSIFIERS)
    p_eval.add_argument("--probe-seed", type=int, default=0)
    p_eval.add_argument("--out", default=None, help="optional report JSON")
    p_eval.set_defaults(func=cmd_evaluate)

    p_bench = sub.add_parser(
        "benchmark", help="run the strategies x shots x seeds grid"
    )
    p_bench.add_argument("--manifest", default=None)
    p_bench.add_argument(
        "--synthetic",
        default=None,
        help="synthetic spec JSON, or 'std-bench' for the builtin benchmark",
    )
    _add_provider_flags(p_bench)
    p_bench.add_argument(
        "--strategies",
        default=",".join(STRATEGY_NAMES),
        help="comma-separated strategy names",
    )
    p_bench.add_argument(
        "--shots",
        default=",".join(str(k) for k in DEFAULT_SHOTS),
        help="comma-separated shot counts",
    )
    p_bench.add_argument("--seeds", type=int, default=3, help="number of selection seeds")
    p_bench.add_argument("--seed", type=int, default=0, help="base selection seed")
    p_bench.add_argument("--classifier", default="linear-probe", choices=CLASSIFIERS)
    p_bench.add_argument("--probe-seed", type=int, default=0)
    _add_noise_flags(p_bench)
    p_bench.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p_bench.add_argument(
        "--prototypes",
        default="validation",
        help="prototype cache file, or 'validation' for validation centroids",
    )
    p_bench.add_argument("--metric", default="cosine", choices=METRICS)
    p_bench.add_argument("--jobs", type=int, default=1, help="worker pool size")
    p_bench.add_argument(
        "--dedupe",
        action="store_true",
        help="run deterministic strategies for the first seed only",
    )
    p_bench.add_argument("--out", required=True, help="output directory")
    p_bench.set_defaults(func=cmd_benchmark)

    p_diag = sub.add_parser("diagnose", help="mean pairwise cosine similarity (percent)")
    p_diag.add_argument("--manifest", required=True)
    _add_provider_flags(p_diag)
    p_diag.add_argument(
        "--split", default="all", choices=("all", "pool", "validation", "test")
    )
    p_diag.add_argument("--seed", type=int, default=0, help="subsample seed for large pools")
    p_diag.add_argument("--out", default=None, help="optional report JSON")
    p_diag.set_defaults(func=cmd_diagnose)

    p_synth = sub.add_parser("synth", help="write a synthetic manifest from a spec")
    group = p_synth.add_mutually_exclusive_group(required=True)
    group.add_argument("--spec", default=None, help="synthetic spec JSON file")
    group.add_argument(
        "--std-bench", action="store_true", help="use the builtin benchmark spec"
    )
    p_synth.add_argument("--out", required=True, help="manifest JSONL to write")
    p_synth.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except ProviderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (ManifestError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
