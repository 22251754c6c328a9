"""Command-line front end.

Subcommands chain the pipeline: glyphs -> train -> prototypes -> analyze ->
explain -> curate -> finetune -> eval, plus validate. Every command echoes
its fully resolved configuration to config.json beside its outputs, and
re-running with the same config reproduces byte-identical artifacts.

Exit codes: 0 success, 1 validation/user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import (
    artifact_store,
    datasets,
    density,
    explanation,
    guidance,
    prototypes,
    refnet,
    trajectory,
)
from .errors import I2XError

_THREAD_LIMITER = None


def _apply_threads(threads):
    """Cap BLAS worker counts; I2X_THREADS is the fallback. Default 1 keeps
    outputs bit-reproducible across machines."""
    global _THREAD_LIMITER
    if threads is None:
        threads = int(os.environ.get("I2X_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits

        _THREAD_LIMITER = threadpool_limits(limits=threads)
    except ImportError:
        pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _ensure_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _write_config(out_path, args) -> None:
    """Echo the resolved run configuration next to the primary output."""
    out_path = Path(out_path)
    directory = out_path if out_path.is_dir() else out_path.parent
    directory.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (directory / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True, default=str) + "\n")


def _find_idx_pair(root, prefer: str) -> tuple:
    """Locate an IDX pair in a directory; names containing ``prefer``
    (e.g. "train"/"test") win, then lexicographic order."""
    root = Path(root)
    key = lambda p: (0 if prefer in p.name else 1, p.name)
    image_hits = sorted((p for p in root.iterdir()
                         if "idx3" in p.name or p.name.endswith("images.idx")), key=key)
    label_hits = sorted((p for p in root.iterdir()
                         if "idx1" in p.name or p.name.endswith("labels.idx")), key=key)
    if not image_hits or not label_hits:
        raise I2XError(f"no IDX image/label pair found under {root}")
    return str(image_hits[0]), str(label_hits[0])


def _resolve_idx_pair(args, prefer: str = "train") -> tuple:
    if args.images and args.labels:
        return args.images, args.labels
    if args.data:
        return _find_idx_pair(args.data, prefer)
    raise I2XError("need --images/--labels or a --data directory with an IDX pair")


def _load_dataset(args) -> datasets.LabeledDataset:
    images, labels = _resolve_idx_pair(args)
    return datasets.load_idx(images, labels)


def _batched_forward(model, images, chunk=512):
    feats, confs = [], []
    for start in range(0, images.shape[0], chunk):
        rec = refnet.forward(model, images[start : start + chunk])
        feats.append(rec.features)
        confs.append(rec.confidences)
    return np.concatenate(feats), np.concatenate(confs)


def _batched_saliency(model, images, chunk=512):
    maps, confs = [], []
    for start in range(0, images.shape[0], chunk):
        m, _, c = refnet.saliency_batch(model, images[start : start + chunk])
        maps.append(m)
        confs.append(c)
    return np.concatenate(maps), np.concatenate(confs)


def build_run_archive(model0, train_set, explain_set, hyper, dataset_id) -> tuple:
    """Train with a checkpoint sink that captures confidences + saliency on
    the explanation set; final-model features complete the archive."""
    snapshots = []
    final = refnet.train(model0, train_set, hyper,
                         sink=lambda it, st: snapshots.append((it, st)))
    iterations, confs, sals = [], [], []
    for it, state in snapshots:
        maps, conf = _batched_saliency(state, explain_set.images)
        iterations.append(it)
        confs.append(conf.astype("<f4"))
        sals.append(maps.astype("<f4"))
    feats, _ = _batched_forward(final, explain_set.images)
    h, w, d = final.spec.feature_shape
    archive = artifact_store.RunArchive(
        dataset_id=dataset_id,
        sample_ids=explain_set.sample_ids,
        labels=explain_set.labels,
        class_count=explain_set.class_count,
        feature_shape=(h, w, d),
        checkpoints=iterations,
        confidences=confs,
        saliency=sals,
        features=feats.astype("<f4"),
    )
    return archive, final


# --- subcommands -----------------------------------------------------------------


def _cmd_glyphs(args) -> int:
    if args.spec:
        spec = datasets.GlyphSpec.from_json(Path(args.spec).read_text())
    else:
        spec = datasets.builtin_glyph_spec(args.preset)
    if args.noise is not None:
        spec.noise = args.noise
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, _ = datasets.gen_glyphs(spec, args.per_class, args.seed)
    datasets.save_idx(train_set, out / "train-images.idx", out / "train-labels.idx")
    if args.test_per_class > 0:
        test_set, _ = datasets.gen_glyphs(spec, args.test_per_class, args.seed + 1)
        datasets.save_idx(test_set, out / "test-images.idx", out / "test-labels.idx")
    (out / "glyph-spec.json").write_text(spec.to_json() + "\n")
    _write_config(out, args)
    print(f"wrote {train_set.size} train samples"
          + (f", {args.test_per_class * len(spec.classes)} test samples" if args.test_per_class else "")
          + f" to {out}")
    return 0


def _cmd_train(args) -> int:
    data = _load_dataset(args)
    explain_set = datasets.sample_explanation_set(data, args.explain_fraction,
                                                  args.explain_seed)
    spec = refnet.ModelSpec(
        input_hw=data.images.shape[1:3],
        in_channels=data.images.shape[3],
        conv_channels=tuple(int(c) for c in args.arch.split(",")),
        class_count=data.class_count,
    )
    model0 = refnet.init_model(spec, args.seed)
    hyper = refnet.TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch,
                               ckpt_every=args.ckpt_every, seed=args.seed)
    dataset_id = (f"{Path(_resolve_idx_pair(args)[0]).name}"
                  f"#explain-f{args.explain_fraction}-s{args.explain_seed}")
    archive, final = build_run_archive(model0, data, explain_set, hyper, dataset_id)
    _ensure_parent(args.out)
    artifact_store.write_run(archive, args.out)
    if args.model_out:
        _ensure_parent(args.model_out)
        refnet.save_model(final, args.model_out)
    _write_config(args.out, args)
    print(f"trained {final.iteration} iterations; archive {args.out} "
          f"({len(archive.checkpoints)} checkpoints over {explain_set.size} samples)")
    return 0


def _cmd_prototypes(args) -> int:
    archive = artifact_store.read_run(args.artifacts)
    n = archive.size
    h, w, d = archive.feature_shape
    stacked = np.asarray(archive.features, dtype=np.float64).reshape(n * h * w, d)
    book = prototypes.build_book(stacked, k=args.k, seed=args.seed,
                                 variance_target=args.pca_var)
    _ensure_parent(args.out)
    prototypes.write_book(book, args.out)
    _write_config(args.out, args)
    print(f"fit {book.k} prototypes over {n * h * w} vectors "
          f"(r={book.pca.reduced_dim}, inertia={book.inertia:.4f}) -> {args.out}")
    return 0


def _cmd_analyze(args) -> int:
    archive = artifact_store.read_run(args.artifacts)
    book = prototypes.read_book(args.protos)
    params = density.HdbscanParams(min_samples=args.min_samples,
                                   min_cluster_size=args.min_cluster_size)
    traj = trajectory.analyze_run(archive, book, sigma=args.sigma, lam=args.lam,
                                  hdbscan_params=params)
    _ensure_parent(args.out)
    trajectory.write_trajectory(traj, args.out)
    _write_config(args.out, args)
    flagged = sum(t.flagged_no_clusters for t in traj.transitions)
    print(f"analyzed {len(traj.transitions)} transitions "
          f"({flagged} flagged all-noise) -> {args.out}")
    return 0


def _parse_pair(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise I2XError(f"--pair expects A,B, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_prototype(text) -> int:
    return int(text[2:]) if text.upper().startswith("P-") else int(text)


def _cmd_explain(args) -> int:
    traj = trajectory.read_trajectory(args.trajectory)
    presence = None
    if args.artifacts and args.protos:
        archive = artifact_store.read_run(args.artifacts)
        book = prototypes.read_book(args.protos)
        assignments = prototypes.assign(archive, book)
        presence = explanation.PresenceIndex.from_assignments(assignments, archive.labels)
    class_id = args.cls
    pair = _parse_pair(args.pair) if args.pair else None
    if class_id is None and pair is None:
        raise I2XError("explain needs --class and/or --pair")
    report = explanation.build_report(
        traj, presence, class_id=class_id, pair=pair, eps_conf=args.eps_conf,
        rho=args.rho, flip_min=args.flip_min, subgroup_k=args.subgroup_k,
        seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats = set(args.format.split(","))
    unknown = formats - {"json", "dot", "csv"}
    if unknown:
        raise I2XError(f"--format tokens {sorted(unknown)} not in json|dot|csv")
    if "json" in formats:
        (out / "report.json").write_text(report.to_json())
    if "dot" in formats and report.graph is not None:
        (out / "graph.dot").write_text(explanation.render_dot(report.graph))
    if "csv" in formats and class_id is not None:
        protos_in_play = sorted({
            k for t in traj.transitions for k in range(1, traj.k + 1)
            if abs(t.beta[k - 1, class_id]) >= args.eps_conf
        }) or list(range(1, traj.k + 1))
        shared_sets = None
        if presence is not None:
            shared_sets = {c: explanation.shared_prototypes(c, presence).prototypes
                           for c in sorted(set(presence.labels.tolist()))}
        matrix = explanation.evolution_matrix(
            traj, class_id, protos_in_play, eps_conf=args.eps_conf, rho=args.rho,
            shared_sets=shared_sets)
        (out / "matrix.csv").write_text(explanation.render_csv(matrix))
    _write_config(out, args)
    print(f"explanation artifacts in {out} "
          f"({len(report.uncertain)} uncertain findings)" )
    return 0


def _cmd_curate(args) -> int:
    archive = artifact_store.read_run(args.artifacts)
    book = prototypes.read_book(args.protos)
    assignments = prototypes.assign(archive, book)
    by_id = prototypes.presence_by_id(assignments)
    data = datasets.LabeledDataset(
        images=np.zeros((archive.size, 1, 1, 1)),
        labels=archive.labels,
        sample_ids=archive.sample_ids,
        class_count=archive.class_count,
    )
    plan = guidance.curate(data, by_id, k=_parse_prototype(args.uncertain),
                           pair=_parse_pair(args.pair) if args.pair else None,
                           dataset_id=archive.dataset_id)
    _ensure_parent(args.out)
    Path(args.out).write_text(plan.to_json())
    _write_config(args.out, args)
    print(f"curation plan: {len(plan.excluded_ids)} excluded, "
          f"{plan.retained_count} retained -> {args.out}")
    return 0


def _resolve_stages(token, explain_set, plan):
    stages = []
    for part in token.split(","):
        part = part.strip()
        if part == "full":
            stages.append(explain_set)
        elif part == "curated":
            if plan is None:
                raise I2XError("schedule uses 'curated' but no --plan given")
            stages.append(guidance.apply_plan(explain_set, plan))
        else:
            raise I2XError(f"unknown schedule stage {part!r} (full|curated)")
    return stages


def _cmd_finetune(args) -> int:
    model = refnet.load_model(args.model)
    data = _load_dataset(args)
    reader = artifact_store.open_run(args.artifacts)
    explain_set = data.subset_by_ids(reader.sample_ids)
    plan = None
    if args.plan:
        plan = guidance.CurationPlan.from_json(Path(args.plan).read_text())
    schedule_tokens = args.schedule or ["full"]
    if args.repeats > 1:
        if not args.test_data:
            raise I2XError("--repeats > 1 needs --test-data for evaluation")
        if not args.pair:
            raise I2XError("--repeats > 1 needs --pair for confusion stats")
        test_set = datasets.load_idx(*_find_idx_pair(args.test_data, prefer="test"))
        schedules = [(tok, _resolve_stages(tok, explain_set, plan))
                     for tok in schedule_tokens]
        stats = guidance.run_experiment(
            model, schedules, repeats=args.repeats, seed0=args.seed,
            test_set=test_set, pair=_parse_pair(args.pair), lr=args.finetune_lr,
            epochs_per_stage=args.epochs_per_stage, batch_size=args.batch)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(stats.to_json())
        (out / "stats.csv").write_text(guidance.render_stats_csv(stats))
        (out / "stats.md").write_text(guidance.render_stats_markdown(stats))
        _write_config(out, args)
        print(guidance.render_stats_markdown(stats))
        return 0
    stages = _resolve_stages(schedule_tokens[0], explain_set, plan)
    tuned = refnet.finetune(model, stages, lr=args.finetune_lr,
                            epochs_per_stage=args.epochs_per_stage,
                            seed=args.seed, batch_size=args.batch)
    _ensure_parent(args.out)
    refnet.save_model(tuned, args.out)
    _write_config(args.out, args)
    print(f"fine-tuned through {len(stages)} stage(s) -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = refnet.load_model(args.model)
    data = _load_dataset(args)
    cm = refnet.evaluate(model, data)
    accuracy = 100.0 * float(np.trace(cm)) / data.size
    doc = {"accuracy_pct": accuracy, "confusion": cm.tolist()}
    if args.pair:
        a, b = _parse_pair(args.pair)
        ab, ba, both = guidance.confusion_pair_stats(cm, a, b)
        doc["pair"] = {"classes": [a, b], f"{a}to{b}": ab, f"{b}to{a}": ba, "sum": both}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        _ensure_parent(args.out)
        Path(args.out).write_text(text)
        _write_config(args.out, args)
    print(text, end="")
    return 0


def _cmd_validate(args) -> int:
    report = artifact_store.validate(args.artifacts)
    print(report.summary())
    return 0 if report.ok else 1


# --- parser --------------------------------------------------------------------


def _add_data_flags(p):
    p.add_argument("--data", help="directory holding an IDX image/label pair")
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")


def build_parser() -> _Parser:
    parser = _Parser(prog="i2x", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (default: I2X_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("glyphs", help="generate a synthetic glyph dataset")
    p.add_argument("--preset", default="pair", choices=["pair", "digits"])
    p.add_argument("--spec", help="glyph spec JSON (overrides --preset)")
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_glyphs)

    p = sub.add_parser("train", help="train the reference CNN and archive artifacts")
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="output .i2x archive")
    p.add_argument("--model-out", help="save the final model (.i2xm)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--ckpt-every", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--explain-fraction", type=float, default=0.1)
    p.add_argument("--explain-seed", type=int, default=42)
    p.add_argument("--arch", default="8,16", help="conv channels, comma separated")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("prototypes", help="fit PCA + K-Means prototypes")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--out", required=True, help="output .i2xp book")
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--pca-var", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_prototypes)

    p = sub.add_parser("analyze", help="responsibility trajectory per transition")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--protos", required=True)
    p.add_argument("--out", required=True, help="output .i2xt trajectory")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--min-cluster-size", type=int, default=None)
    p.add_argument("--min-samples", type=int, default=5)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("explain", help="structured explanation reports")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--artifacts")
    p.add_argument("--protos")
    p.add_argument("--class", dest="cls", type=int, default=None)
    p.add_argument("--pair", help="A,B")
    p.add_argument("--eps-conf", type=float, default=0.02)
    p.add_argument("--rho", type=float, default=0.25)
    p.add_argument("--flip-min", type=int, default=2)
    p.add_argument("--subgroup-k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", default="json,dot,csv",
                   help="which artifacts to write: dot|json|csv (comma list ok)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("curate", help="build an exclusion plan from a prototype")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--protos", required=True)
    p.add_argument("--uncertain", required=True, help="P-<k>")
    p.add_argument("--pair", help="A,B restriction")
    p.add_argument("--out", required=True, help="plan JSON path")
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("finetune", help="fine-tune per schedule (or run the harness)")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    p.add_argument("--artifacts", required=True,
                   help="archive naming the explanation samples")
    p.add_argument("--plan", help="curation plan JSON")
    p.add_argument("--schedule", action="append",
                   help="full | curated | curated,full (repeatable)")
    p.add_argument("--finetune-lr", type=float, default=1e-4)
    p.add_argument("--epochs-per-stage", type=int, default=1)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--test-data", help="IDX dir for harness evaluation")
    p.add_argument("--pair", help="A,B for harness confusion stats")
    p.add_argument("--out", required=True,
                   help="model path (single run) or stats directory (harness)")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="confusion matrix + accuracy")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    p.add_argument("--pair", help="A,B")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("validate", help="check a stored archive's invariants")
    p.add_argument("--artifacts", required=True)
    p.set_defaults(func=_cmd_validate)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except I2XError as exc:
        print(f"i2x {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i2x {args.command}: i/o error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - internal failure boundary
        import traceback

        traceback.print_exc()
        print(f"i2x {args.command}: internal error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
