"""Command-line surface tying the engine together.

Commands read and write only the files named by their flags, exit 0 on
success, and print a machine-parsable JSON error record to stderr
otherwise.  Every command is deterministic for a fixed seed and fixed
inputs, independent of worker count.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .benchmark import BenchmarkConfig, generate_benchmark
from .correlate import (
    AlignmentConfig,
    ChannelWeights,
    CorrelationScorer,
    search_alignments,
)
from .errors import ConfigurationError, ManifestError, McnccError
from .evaluation import (
    RetrievalItem,
    channel_stats_report,
    cmc,
    occlusion_binned_report,
    pr_curve,
    RankedList,
    retrieval_run,
)
from .learn import PairBatch, SiameseModel, TrainConfig, train
from .normalize import NormalizationScheme, fit_global_stats
from .tensor import DEFAULT_EPSILON, FeatureMap, extract_patch, rotate
from .whiten import apply_projection, fit_cca, fit_pca, pixel_samples


def _jdump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _add_featurizer_flags(p):
    p.add_argument("--mode", default="gray", choices=["gray", "gradient-bank"])
    p.add_argument("--orientations", type=int, default=2)
    p.add_argument("--blur", type=float, default=1.0)


def _featurizer(args) -> mio.PixelFeaturizerConfig:
    return mio.PixelFeaturizerConfig(
        mode=args.mode, orientations=args.orientations, blur_sigma=args.blur
    )


def _add_search_flags(p):
    p.add_argument("--scheme", default="standardize-channel")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--rot-min", type=float, default=None)
    p.add_argument("--rot-max", type=float, default=None)
    p.add_argument("--rot-stride", type=float, default=4.0)
    p.add_argument("--min-overlap", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--weights", default=None, help="channel-weights container")
    p.add_argument("--proj-x", default=None, help="projection applied to database maps")
    p.add_argument("--proj-y", default=None, help="projection applied to query maps")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dtype", default=None, choices=["float32", "float64"],
                   help="compute precision for loaded tensors (default: as stored)")
    p.add_argument("--allow-narrowing", action="store_true",
                   help="permit reading float64 tensors into a float32 pipeline")


def _load_map(path, args, domain_tag=""):
    path = Path(path)
    if path.suffix.lower() in mio.IMAGE_SUFFIXES:
        return mio.featurize_pixels(mio.read_image(path), _featurizer(args), domain_tag), True
    fmap = mio.read_tensor(
        path,
        domain_tag=domain_tag,
        dtype=getattr(args, "dtype", None),
        allow_narrowing=getattr(args, "allow_narrowing", False),
    )
    return fmap, False


def _scorer_from_args(args, query_maps, db_maps):
    scheme = NormalizationScheme.parse(args.scheme)
    weights = mio.load_weights(args.weights) if args.weights else None
    global_q = global_t = None
    if scheme.needs_global:
        # Fit per side when not supplied: statistics over each role's maps.
        global_q = fit_global_stats(query_maps)
        global_t = fit_global_stats(db_maps)
    return CorrelationScorer(
        scheme=scheme,
        weights=weights,
        global_query=global_q,
        global_target=global_t,
        epsilon=args.epsilon,
    )


# ---------------------------------------------------------------------------


def cmd_featurize(args) -> int:
    image = mio.read_image(args.image)
    fmap = mio.featurize_pixels(image, _featurizer(args), domain_tag=args.domain_tag)
    mio.write_tensor(fmap, args.output, dtype=args.dtype)
    print(_jdump({"channels": fmap.channels, "height": fmap.height, "width": fmap.width}))
    return 0


def cmd_stats(args) -> int:
    manifest = mio.load_manifest(args.manifest, closed_set=False)
    entries = [e for e in manifest.entries if args.domain in (None, e.domain_tag)]
    if args.role != "all":
        entries = [e for e in entries if e.role == args.role]
    if not entries:
        raise ManifestError("no manifest entries match the stats filters")
    maps = [mio.load_entry_map(manifest, e, _featurizer(args)) for e in entries]
    stats = fit_global_stats(maps)
    mio.save_global_stats(args.output, stats)
    summary = {"channels": stats.channels, "maps": stats.sample_count}
    if args.report:
        report = channel_stats_report(maps)
        with open(args.report, "w") as fh:
            for c, s in zip(report.channel_order, report.std_of_means):
                fh.write(_jdump({"channel": int(c), "std_of_mean": float(s)}) + "\n")
        summary["report"] = args.report
    print(_jdump(summary))
    return 0


def cmd_fit_pca(args) -> int:
    manifest = mio.load_manifest(args.manifest, closed_set=False)
    entries = [e for e in manifest.entries if e.domain_tag == args.domain]
    if not entries:
        raise ManifestError(f"no manifest entries with domain {args.domain!r}")
    maps = [mio.load_entry_map(manifest, e, _featurizer(args)) for e in entries]
    samples = pixel_samples(maps, max_pixels=args.max_pixels, seed=args.seed)
    proj = fit_pca(samples, args.k, ridge=args.ridge, domain_tag=args.domain)
    mio.save_projection(args.output, proj)
    print(_jdump({"k": proj.k, "n": proj.n, "domain_tag": proj.domain_tag}))
    return 0


def _paired_maps(manifest, domain_x, domain_y, featurizer):
    """Group-matched map pairs, center-cropped to a common window."""
    by_group_x: dict[str, list] = {}
    by_group_y: dict[str, list] = {}
    for e in manifest.entries:
        if e.domain_tag == domain_x:
            by_group_x.setdefault(e.group_id, []).append(e)
        elif e.domain_tag == domain_y:
            by_group_y.setdefault(e.group_id, []).append(e)
    pairs = []
    for group in sorted(set(by_group_x) & set(by_group_y)):
        ex = sorted(by_group_x[group], key=lambda e: e.item_id)[0]
        ey = sorted(by_group_y[group], key=lambda e: e.item_id)[0]
        mx = mio.load_entry_map(manifest, ex, featurizer)
        my = mio.load_entry_map(manifest, ey, featurizer)
        h = min(mx.height, my.height)
        w = min(mx.width, my.width)
        mx = extract_patch(mx, (mx.height - h) // 2, (mx.width - w) // 2, h, w)
        my = extract_patch(my, (my.height - h) // 2, (my.width - w) // 2, h, w)
        pairs.append((mx, my))
    if not pairs:
        raise ManifestError(
            f"no groups shared between domains {domain_x!r} and {domain_y!r}"
        )
    return pairs


def cmd_fit_cca(args) -> int:
    manifest = mio.load_manifest(args.manifest, closed_set=False)
    pairs = _paired_maps(manifest, args.domain_x, args.domain_y, _featurizer(args))
    xs = np.concatenate([p[0].values.reshape(p[0].channels, -1).T for p in pairs])
    ys = np.concatenate([p[1].values.reshape(p[1].channels, -1).T for p in pairs])
    result = fit_cca(
        xs, ys, args.k, ridge=args.ridge,
        domain_tag_x=args.domain_x, domain_tag_y=args.domain_y,
    )
    mio.save_projection(args.output_x, result.proj_x)
    mio.save_projection(args.output_y, result.proj_y)
    print(_jdump({"correlations": [float(c) for c in result.correlations]}))
    return 0


def cmd_train(args) -> int:
    manifest = mio.load_manifest(args.manifest, closed_set=False)
    featurizer = _featurizer(args)
    positives = _paired_maps(manifest, args.domain_x, args.domain_y, featurizer)
    rng = np.random.default_rng(args.seed)
    # Balanced negatives: pair each x-side map with a different group's y side.
    pairs = [(x, y, 1) for x, y in positives]
    n = len(positives)
    if n < 2:
        raise ManifestError("need at least two groups to sample negative pairs")
    for i in range(n):
        j = int(rng.integers(n - 1))
        j = j if j < i else j + 1
        x_i = positives[i][0]
        y_j = positives[j][1]
        h = min(x_i.height, y_j.height)
        w = min(x_i.width, y_j.width)
        pairs.append(
            (
                extract_patch(x_i, (x_i.height - h) // 2, (x_i.width - w) // 2, h, w),
                extract_patch(y_j, (y_j.height - h) // 2, (y_j.width - w) // 2, h, w),
                -1,
            )
        )
    batch = PairBatch(tuple(pairs))

    channels = positives[0][0].channels
    if args.regime == "weights":
        model = SiameseModel.initial(channels, alpha=args.alpha, beta=args.beta)
        freeze_proj = True
    elif args.regime in ("cca-weights", "joint"):
        xs = np.concatenate([x.values.reshape(channels, -1).T for x, _ in positives])
        ys = np.concatenate([y.values.reshape(channels, -1).T for _, y in positives])
        k = args.k or channels
        cca = fit_cca(xs, ys, k, domain_tag_x=args.domain_x, domain_tag_y=args.domain_y)
        model = SiameseModel(
            proj_x=cca.proj_x,
            proj_y=cca.proj_y,
            weights=ChannelWeights.uniform(k),
            alpha=args.alpha,
            beta=args.beta,
        )
        freeze_proj = args.regime == "cca-weights"
    else:
        raise ConfigurationError(f"unknown regime {args.regime!r}")

    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        freeze_projections=freeze_proj,
    )
    model = train(model, batch, cfg, epsilon=args.epsilon)
    mio.save_model(args.output, model, seed=args.seed, regime=args.regime)
    print(_jdump({"regime": args.regime, "pairs": len(batch), "output": str(args.output)}))
    return 0


def _search_images_pixel_rotation(query_img, target_img, cfg, scorer, featurizer):
    """Rotation in pixel space: rotate the query image, featurize, then
    translation-only search at each grid angle."""
    from scipy.ndimage import binary_erosion

    target = mio.featurize_pixels(target_img, featurizer)
    best = None
    for angle in cfg.angles():
        rot = rotate(FeatureMap(query_img[None]), float(angle))
        valid = rot.valid_mask()
        if featurizer.mode == "gradient-bank":
            # Derivative responses near invalid pixels are contaminated.
            radius = int(math.ceil(2 * featurizer.blur_sigma)) + 1
            valid = binary_erosion(valid, iterations=radius, border_value=1)
        fq = mio.featurize_pixels(rot.values[0], featurizer, valid=valid)
        tcfg = AlignmentConfig(
            translation_stride=cfg.translation_stride,
            min_overlap_fraction=cfg.min_overlap_fraction,
        )
        try:
            m = search_alignments(fq, target, tcfg, scorer)
        except McnccError:
            continue
        cand = (m.score, m.dy, m.dx, float(angle), m.overlap)
        if best is None or cand[0] > best[0] or (
            cand[0] == best[0] and cand[1:4] < best[1:4]
        ):
            best = cand
    if best is None:
        raise McnccError("no admissible pose in pixel-rotation search")
    return {
        "score": best[0], "dy": best[1], "dx": best[2],
        "angle": best[3], "overlap": best[4],
    }


def cmd_match(args) -> int:
    qmap, q_is_image = _load_map(args.query, args)
    tmap, t_is_image = _load_map(args.target, args)
    cfg = AlignmentConfig(
        translation_stride=args.stride or 1,
        rotation_min=args.rot_min if args.rot_min is not None else 0.0,
        rotation_max=args.rot_max if args.rot_max is not None else 0.0,
        rotation_stride=args.rot_stride,
        min_overlap_fraction=args.min_overlap,
    )
    scorer = _scorer_from_args(args, [qmap], [tmap])
    if q_is_image and t_is_image and cfg.angles().size > 1:
        # Images rotate in pixel space before featurization; precomputed
        # tensors rotate in feature space (the only option then).
        record = _search_images_pixel_rotation(
            mio.read_image(args.query), mio.read_image(args.target), cfg, scorer,
            _featurizer(args),
        )
        record["rotation_space"] = "pixel"
    else:
        m = search_alignments(qmap, tmap, cfg, scorer)
        record = {
            "score": m.score, "dy": m.dy, "dx": m.dx,
            "angle": m.angle, "overlap": m.overlap,
            "rotation_space": "feature",
        }
    print(_jdump(record))
    return 0


def _retrieval_items(manifest, entries, featurizer, args, proj=None):
    items = []
    for e in entries:
        fmap = mio.load_entry_map(
            manifest,
            e,
            featurizer,
            dtype=getattr(args, "dtype", None),
            allow_narrowing=getattr(args, "allow_narrowing", False),
        )
        if proj is not None:
            fmap = apply_projection(fmap, proj)
        items.append(RetrievalItem(e.item_id, e.group_id, fmap, e.area_ratio))
    return items


def cmd_retrieve(args) -> int:
    manifest = mio.load_manifest(args.manifest)
    featurizer = _featurizer(args)
    proj_x = mio.load_projection(args.proj_x) if args.proj_x else None
    proj_y = mio.load_projection(args.proj_y) if args.proj_y else None
    db_items = _retrieval_items(manifest, manifest.database, featurizer, args, proj_x)
    q_items = _retrieval_items(manifest, manifest.queries, featurizer, args, proj_y)
    if not db_items or not q_items:
        raise ManifestError("retrieve needs at least one query and one database entry")

    cross_domain = {e.domain_tag for e in manifest.queries} != {
        e.domain_tag for e in manifest.database
    }
    stride = args.stride if args.stride is not None else (2 if cross_domain else 1)
    if args.rot_min is not None or args.rot_max is not None:
        rot_min = args.rot_min if args.rot_min is not None else 0.0
        rot_max = args.rot_max if args.rot_max is not None else 0.0
    else:
        rot_min, rot_max = (-20.0, 20.0) if cross_domain else (0.0, 0.0)
    cfg = AlignmentConfig(
        translation_stride=stride,
        rotation_min=rot_min,
        rotation_max=rot_max,
        rotation_stride=args.rot_stride,
        min_overlap_fraction=args.min_overlap,
    )
    scorer = _scorer_from_args(args, [q.fmap for q in q_items], [d.fmap for d in db_items])

    report = retrieval_run(q_items, db_items, cfg, scorer, workers=args.workers)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    ratios = {e.item_id: e.area_ratio for e in manifest.queries}
    with open(out_dir / "results.ndjson", "w") as fh:
        for r in report.results:
            record = {
                "id": r.query_id,
                "rank": r.rank_of_match,
                "score": float(r.ranked.scores[0]),
                "pose": list(r.best_pose),
                "ap": r.ap,
                "ranking": [
                    [i, float(s), bool(rel)]
                    for i, s, rel in zip(r.ranked.ids, r.ranked.scores, r.ranked.relevance)
                ],
            }
            if ratios.get(r.query_id) is not None:
                record["area_ratio"] = ratios[r.query_id]
            fh.write(_jdump(record) + "\n")
    db_size = len({d.item_id for d in db_items})
    curve = cmc([r.rank_of_match for r in report.results], db_size)
    _write_series(out_dir / "cmc.txt", enumerate(curve.recall_at_k, start=1))
    summary = {
        "mean_ap": report.mean_ap,
        "db_size": db_size,
        "n_queries": len(report.results),
        "recall_at_1": float(curve.at(1)),
    }
    (out_dir / "metrics.json").write_text(_jdump(summary) + "\n")
    print(_jdump(summary))
    return 0


def _write_series(path, rows):
    """Two-column numeric text, one (x, y) pair per line."""
    with open(path, "w") as fh:
        for a, b in rows:
            fh.write(f"{float(a):g} {float(b)!r}\n")


def cmd_eval(args) -> int:
    records = []
    with open(args.results) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ConfigurationError("results file is empty")
    ranks = [int(r["rank"]) for r in records]
    if args.db_size:
        db_size = args.db_size
    elif all("ranking" in r for r in records):
        db_size = len(records[0]["ranking"])
    else:
        raise ConfigurationError("pass --db-size when records carry no ranking")
    curve = cmc(ranks, db_size)
    out = {"cmc": [float(v) for v in curve.recall_at_k]}
    if all("ap" in r for r in records):
        out["mean_ap"] = float(np.mean([r["ap"] for r in records]))
    if all("ranking" in r for r in records):
        # Pooled precision/recall over every (score, relevance) pair.
        ids, scores, rel = [], [], set()
        for qi, r in enumerate(records):
            for item_id, score, is_rel in r["ranking"]:
                key = (qi, item_id)
                ids.append(key)
                scores.append(score)
                if is_rel:
                    rel.add(key)
        pooled = RankedList.from_scores(ids, scores, rel)
        out["pr"] = [[r_, p_] for r_, p_ in pr_curve(pooled)]
    if all(r.get("area_ratio") is not None for r in records):
        out["occlusion"] = occlusion_binned_report(
            ranks, [float(r["area_ratio"]) for r in records], db_size
        )
    if args.output:
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_series(out_dir / "cmc.txt", enumerate(out["cmc"], start=1))
        if "pr" in out:
            _write_series(out_dir / "pr.txt", out["pr"])
        (out_dir / "metrics.json").write_text(_jdump(out) + "\n")
    print(_jdump(out))
    return 0


def cmd_bench(args) -> int:
    cfg = BenchmarkConfig(
        n_groups=args.groups,
        items_per_group=args.items_per_group,
        queries_per_group=args.queries_per_group,
    )
    data = generate_benchmark(args.seed, cfg)
    out_dir = Path(args.output)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    records = []
    for role, items in (("database", data.database), ("query", data.queries)):
        for item in items:
            rel = f"tensors/{item.item_id}.xct"
            mio.write_tensor(item.fmap, out_dir / rel)
            records.append(
                {
                    "id": item.item_id,
                    "role": role,
                    "domain_tag": item.fmap.domain_tag,
                    "path": rel,
                    "group_id": item.group_id,
                }
            )
    (out_dir / "manifest.json").write_text(json.dumps(records, indent=1, sort_keys=True))
    print(
        _jdump(
            {
                "database": len(data.database),
                "queries": len(data.queries),
                "manifest": str(out_dir / "manifest.json"),
                "seed": args.seed,
            }
        )
    )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcncc",
        description="Multi-channel normalized cross-correlation matching and retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="image -> feature tensor")
    p.add_argument("image")
    p.add_argument("output")
    p.add_argument("--domain-tag", default="")
    p.add_argument("--dtype", default=None, choices=["float32", "float64"])
    _add_featurizer_flags(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("stats", help="global channel statistics + report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--role", default="all", choices=["all", "query", "database"])
    p.add_argument("--domain", default=None)
    _add_featurizer_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("fit-pca", help="whitening PCA for one domain")
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--ridge", type=float, default=None)
    p.add_argument("--max-pixels", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o", required=True)
    _add_featurizer_flags(p)
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("fit-cca", help="cross-domain CCA projections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain-x", required=True)
    p.add_argument("--domain-y", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--ridge", type=float, default=None)
    p.add_argument("--output-x", required=True)
    p.add_argument("--output-y", required=True)
    _add_featurizer_flags(p)
    p.set_defaults(func=cmd_fit_cca)

    p = sub.add_parser("train", help="train channel weights / projections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain-x", required=True)
    p.add_argument("--domain-y", required=True)
    p.add_argument("--regime", default="weights", choices=["weights", "cca-weights", "joint"])
    p.add_argument("--alpha", type=float, default=100.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--output", "-o", required=True)
    _add_featurizer_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="score one query against one target")
    p.add_argument("query")
    p.add_argument("target")
    _add_search_flags(p)
    _add_featurizer_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("retrieve", help="manifest-driven retrieval run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_search_flags(p)
    _add_featurizer_flags(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="metrics from a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--db-size", type=int, default=None)
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="generate the synthetic benchmark")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--items-per-group", type=int, default=2)
    p.add_argument("--queries-per-group", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except McnccError as exc:
        print(_jdump({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(_jdump({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
