"""Command-line orchestration of the three experiments.

Every command validates its config, computes into a temporary directory
and renames it to --out on success, so failed runs leave no partial
outputs.  The config is echoed verbatim into run.json.  All randomness
flows from --seed; reruns with identical config are byte-identical.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import discovery as dv
from . import evalmetrics as ev
from . import infostat
from . import scoring as sc
from . import segments as sg
from . import toynet as tn
from .plots import curves_svg
from .synthworld import LabeledScene, WorldConfig, generate_scene
from .tensorio import (
    DatasetManifest,
    ManifestRecord,
    TensorIOError,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


SCORE_METHODS = (
    "msp",
    "odin",
    "mahalanobis",
    "mcdropout",
    "void",
    "density",
    "entropy",
    "margin",
)


def _jobs(args):
    if getattr(args, "jobs", None):
        return max(1, args.jobs)
    env = os.environ.get("ANOMSEG_JOBS", "")
    return max(1, int(env)) if env.isdigit() else 1


def parallel_map(fn, items, jobs):
    """Map preserving input order; reductions stay deterministic."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _fmt(x):
    return f"{x:.6f}"


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _scenes_from_manifest(manifest, split):
    """Reconstruct LabeledScene views from stored tensors."""
    scenes = []
    n_classes = len(manifest.class_names)
    for rec in manifest.by_split(split):
        image = read_tensor(manifest.resolve(rec.image)).astype(np.float64)
        labels = read_tensor(manifest.resolve(rec.label))
        scenes.append(LabeledScene(image, labels, rec.split, rec.seed, n_classes))
    return scenes


def _load_roi(manifest):
    if manifest.roi is None:
        return None
    return read_tensor(manifest.resolve(manifest.roi))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(args, out):
    cfg = WorldConfig(seed=args.seed)
    records = []
    plan = [
        ("train", args.n_train, 0),
        ("proxy-anom", args.n_proxy, 10000),
        ("test", args.n_test, 20000),
        ("novel", args.n_novel, 30000),
    ]
    idx = 0
    for split, count, base in plan:
        for i in range(count):
            scene_seed = args.seed + base + i
            scene = generate_scene(cfg, scene_seed, split)
            img_name = f"image_{idx:05d}.ten"
            lab_name = f"label_{idx:05d}.ten"
            write_tensor(out / img_name, scene.image.astype(np.float32))
            write_tensor(out / lab_name, scene.labels)
            records.append(ManifestRecord(img_name, lab_name, split, scene_seed))
            idx += 1
    manifest = DatasetManifest(
        records, ["background", "circle", "square", "triangle"], None, out
    )
    save_manifest(out / "manifest.json", manifest)


def _train_data(scenes):
    return [(s.image, s.mask) for s in scenes]


def cmd_train(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, "train")
    if not scenes:
        raise DataError("manifest has no train records")
    params = tn.init_params(
        k=args.k, hidden=args.hidden, n_classes=len(manifest.class_names), seed=args.seed
    )
    params, trace = tn.train(
        params,
        _train_data(scenes),
        tn.CrossEntropyObjective(),
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        batch_size=args.batch_size,
    )
    tn.save_params(out, params)
    _write_csv(out / "trace.csv", ["epoch", "loss"], list(enumerate(trace)))


def cmd_train_entmax(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, "train")
    proxies = _scenes_from_manifest(manifest, "proxy-anom")
    if not scenes or not proxies:
        raise DataError("entropy-max training needs train and proxy-anom records")
    params = tn.load_params(args.params)
    objective = tn.EntropyMaxObjective([s.image for s in proxies], lam=args.lam)
    params, trace = tn.train(
        params,
        _train_data(scenes),
        objective,
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        batch_size=args.batch_size,
    )
    tn.save_params(out, params)
    _write_csv(out / "trace.csv", ["epoch", "loss"], list(enumerate(trace)))


def cmd_train_void(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, "train")
    proxies = _scenes_from_manifest(manifest, "proxy-anom")
    if not scenes or not proxies:
        raise DataError("void training needs train and proxy-anom records")
    n_classes = len(manifest.class_names)
    data = _train_data(scenes) + [(s.image, s.void_labels()) for s in proxies]
    params = tn.init_params(
        k=args.k, hidden=args.hidden, n_classes=n_classes + 1, seed=args.seed
    )
    params, trace = tn.train(
        params,
        data,
        tn.CrossEntropyObjective(),
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        batch_size=args.batch_size,
    )
    tn.save_params(out, params)
    _write_csv(out / "trace.csv", ["epoch", "loss"], list(enumerate(trace)))


def _fit_feature_models(params, manifest, need_classes):
    scenes = _scenes_from_manifest(manifest, "train")
    if not scenes:
        raise DataError("feature fitting needs train records")
    feats = [tn.forward(params, s.image)[1] for s in scenes]
    if need_classes:
        masks = [s.mask for s in scenes]
        return sc.fit_class_gaussians(feats, masks, len(manifest.class_names))
    return sc.fit_pooled_gaussian(feats)


def compute_scores(
    method, params, scenes, manifest, jobs=1, t=1.0, eps=0.0, rate=0.25, samples=8, seed=0
):
    """Anomaly maps for every scene, with method-specific fitting."""
    n_classes = len(manifest.class_names)
    fitted = None
    if method == "mahalanobis":
        fitted = _fit_feature_models(params, manifest, need_classes=True)
    elif method == "density":
        fitted = _fit_feature_models(params, manifest, need_classes=False)
    if method == "void" and params.n_out != n_classes + 1:
        raise DataError("void scoring needs a model with the extra class")

    def one(scene):
        if method == "odin":
            return sc.score_odin(params, scene.image, t=t, eps=eps)
        if method == "mcdropout":
            mc = tn.dropout_softmax_samples(
                params, scene.image, rate=rate, n_samples=samples, seed=seed
            )
            return sc.score_mc_dropout(mc)
        logits, feats = tn.forward(params, scene.image)
        if method == "mahalanobis":
            return sc.score_mahalanobis(feats, fitted)
        if method == "density":
            return sc.score_embedding_density(feats, fitted)
        softmax = tn.softmax_map(logits)
        if method == "msp":
            return sc.score_msp(softmax)
        if method == "entropy":
            return sc.score_entropy(softmax, normalized=True)
        if method == "margin":
            return sc.score_margin(softmax)
        if method == "void":
            return sc.score_void(softmax, n_classes)
        raise ConfigError(f"unknown method {method!r}")

    return parallel_map(one, scenes, jobs)


def cmd_score(args, out):
    manifest = load_manifest(args.manifest)
    params = tn.load_params(args.params)
    scenes = _scenes_from_manifest(manifest, args.split)
    if not scenes:
        raise DataError(f"manifest has no {args.split} records")
    maps = compute_scores(
        args.method, params, scenes, manifest, _jobs(args),
        t=args.t, eps=args.eps, rate=args.rate, samples=args.samples, seed=args.seed,
    )
    for i, amap in enumerate(maps):
        write_tensor(out / f"score_{i:05d}.ten", amap.a.astype(np.float32))


def _load_scores(scores_dir, n):
    maps = []
    for i in range(n):
        path = Path(scores_dir) / f"score_{i:05d}.ten"
        if not path.exists():
            raise DataError(f"missing score tensor {path}")
        maps.append(read_tensor(path).astype(np.float64))
    return maps


def cmd_eval_pixel(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, args.split)
    if not scenes:
        raise DataError(f"manifest has no {args.split} records")
    maps = _load_scores(args.scores, len(scenes))
    roi = _load_roi(manifest)
    rois = None if roi is None else [roi] * len(scenes)
    evalset = ev.build_evalset(maps, [s.anomaly_mask for s in scenes], rois)
    curve = ev.roc_pr_curves(evalset)
    _write_curves(out, curve, evalset, svg=args.svg)


def _write_curves(out, curve, evalset, svg=False, suffix=""):
    _write_csv(
        out / f"curve_roc{suffix}.csv",
        ["fpr", "tpr", "thr"],
        list(zip(curve.fpr.tolist(), curve.tpr.tolist(), curve.thresholds.tolist())),
    )
    _write_csv(
        out / f"curve_pr{suffix}.csv",
        ["recall", "precision", "thr"],
        list(
            zip(
                curve.recall.tolist(),
                curve.precision.tolist(),
                curve.thresholds[1:].tolist(),
            )
        ),
    )
    summary = {
        "auprc": round(curve.auprc, 6),
        "auroc": round(curve.auroc, 6),
        "fpr95": round(curve.fpr95, 6),
    }
    (out / f"summary{suffix}.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    if svg:
        prevalence = float(np.mean(evalset.labels))
        (out / f"curves{suffix}.svg").write_text(curves_svg(curve, prevalence))


def _segmentation_miou(params, scenes, n_classes, jobs=1):
    preds = parallel_map(
        lambda s: tn.predict_mask(tn.forward(params, s.image)[0]), scenes, jobs
    )
    conf = sg.confusion_matrix(preds, [s.mask for s in scenes], n_classes)
    return float(sg.class_stats(conf)["iou"].mean())


def cmd_eval_segment(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, args.split)
    if not scenes:
        raise DataError(f"manifest has no {args.split} records")
    maps = _load_scores(args.scores, len(scenes))
    gt = [s.anomaly_mask for s in scenes]
    meta = _load_meta(args.meta) if args.meta else None
    softmaxes = None
    if meta is not None:
        if not args.params:
            raise ConfigError("--meta needs --params for softmax metrics")
        params = tn.load_params(args.params)
        softmaxes = parallel_map(
            lambda s: tn.softmax_map(tn.forward(params, s.image)[0]),
            scenes,
            _jobs(args),
        )
    delta = float("nan")
    if args.params and args.ref_params:
        n_classes = len(manifest.class_names)
        cur = _segmentation_miou(tn.load_params(args.params), scenes, n_classes, _jobs(args))
        ref = _segmentation_miou(tn.load_params(args.ref_params), scenes, n_classes, _jobs(args))
        delta = (ref - cur) * 100.0
    rows = []
    for tau in args.tau:
        res = sg.object_level_eval(maps, tau, gt, meta_model=meta, softmax_maps=softmaxes, delta=delta)
        rows.append((tau, res["fp"], res["fn"], res["tp"], res["f1"], res["delta"]))
    _write_csv(out / "segment_eval.csv", ["tau", "fp", "fn", "tp", "f1", "delta"], rows)


def _save_meta(path, model):
    payload = {
        "weights": model.weights.tolist(),
        "bias": model.bias,
        "feat_mean": model.feat_mean.tolist(),
        "feat_std": model.feat_std.tolist(),
        "keep": model.keep.astype(int).tolist(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def _load_meta(path):
    d = json.loads(Path(path).read_text())
    return sg.MetaModel(
        np.array(d["weights"], dtype=np.float64),
        float(d["bias"]),
        np.array(d["feat_mean"], dtype=np.float64),
        np.array(d["feat_std"], dtype=np.float64),
        np.array(d["keep"], dtype=bool),
    )


def _collect_segments(params, scenes, maps, tau, min_size, with_gt, jobs=1):
    def one(pair):
        scene, amap = pair
        softmax = tn.softmax_map(tn.forward(params, scene.image)[0])
        segs = sg.anomaly_segments(
            amap, tau, gt_mask=scene.anomaly_mask if with_gt else None, softmax=softmax
        )
        return [s for s in segs if s.size >= min_size]

    nested = parallel_map(one, list(zip(scenes, maps)), jobs)
    return [s for chunk in nested for s in chunk]


def cmd_meta_train(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, args.split)
    if not scenes:
        raise DataError(f"manifest has no {args.split} records")
    maps = _load_scores(args.scores, len(scenes))
    params = tn.load_params(args.params)
    segs = _collect_segments(
        params, scenes, maps, args.tau, args.min_size, with_gt=True, jobs=_jobs(args)
    )
    if not segs:
        raise DataError("no segments above threshold")
    model = sg.meta_fit(segs, seed=args.seed)
    _save_meta(out / "meta.json", model)
    probs = model.predict_proba(np.stack([s.metrics for s in segs]))
    labels = np.array([1 if s.true_iou > 0 else 0 for s in segs])
    acc = float(((probs >= 0.5).astype(int) == labels).mean())
    (out / "meta_stats.json").write_text(
        json.dumps(
            {"segments": len(segs), "positives": int(labels.sum()), "train_acc": round(acc, 6)},
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )


def cmd_meta_apply(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, args.split)
    if not scenes:
        raise DataError(f"manifest has no {args.split} records")
    maps = _load_scores(args.scores, len(scenes))
    params = tn.load_params(args.params)
    meta = _load_meta(args.meta)
    report = []
    for i, (scene, amap) in enumerate(zip(scenes, maps)):
        softmax = tn.softmax_map(tn.forward(params, scene.image)[0])
        segs = [
            s
            for s in sg.anomaly_segments(amap, args.tau, softmax=softmax)
            if s.size >= args.min_size
        ]
        kept = sg.meta_apply(meta, segs)
        keep_mask = np.zeros(scene.labels.shape, dtype=np.uint8)
        for s in kept:
            keep_mask[s.rows, s.cols] = 1
        write_tensor(out / f"kept_{i:05d}.ten", keep_mask)
        for s in segs:
            report.append(
                {
                    "image": i,
                    "size": s.size,
                    "prob": round(float(s.pred_prob), 6),
                    "kept": bool(s.pred_prob >= 0.5),
                }
            )
    (out / "segments.json").write_text(json.dumps(report, indent=2) + "\n")


def _auto_tsne_knobs(n, args):
    perplexity = args.perplexity if args.perplexity > 0 else max(2.0, min(8.0, n / 5.0))
    lr = args.tsne_lr if args.tsne_lr > 0 else max(2.0, n / 12.0)
    delta = args.delta if args.delta > 0 else max(4, n // 10)
    return perplexity, lr, delta


def _discover(params, scenes, maps, args, meta=None):
    images = [s.image for s in scenes]
    softmaxes = None
    if meta is not None:
        softmaxes = parallel_map(
            lambda s: tn.softmax_map(tn.forward(params, s.image)[0]),
            scenes,
            _jobs(args),
        )
    comps = dv.extract_components(
        maps, images, args.tau, min_size=args.min_size, softmax_maps=softmaxes, meta_model=meta
    )
    if not comps:
        return None, comps, None, None
    vectors = dv.embed_crops(comps, params)
    d_target = min(args.pca_dim, vectors.shape[1], max(1, len(comps) - 1))
    projected, _ = dv.pca_reduce(vectors, d_target)
    n = len(comps)
    perplexity, lr, delta = _auto_tsne_knobs(n, args)
    if n < 3 * perplexity:
        perplexity = max(2.0, n / 3.0)
    embedding = dv.tsne(
        projected, perplexity=perplexity, iters=args.iters, lr=lr, seed=args.seed
    )
    clusters = dv.dbscan(embedding.points, args.eps, delta)
    try:
        cstar = dv.select_cluster(clusters, args.statistic, delta)
    except ValueError:
        cstar = None
    return cstar, comps, clusters, embedding


def cmd_discover(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, args.split)
    if not scenes:
        raise DataError(f"manifest has no {args.split} records")
    maps = _load_scores(args.scores, len(scenes))
    params = tn.load_params(args.params)
    meta = _load_meta(args.meta) if args.meta else None
    cstar, comps, clusters, embedding = _discover(params, scenes, maps, args, meta)
    n_classes = len(manifest.class_names)

    comp_rows = []
    for i, c in enumerate(comps):
        label = int(clusters.labels[i]) if clusters is not None else 0
        comp_rows.append(
            {
                "id": i,
                "image": c.source,
                "bbox": list(c.bbox),
                "size": int(c.size),
                "cluster": label,
            }
        )
    (out / "components.json").write_text(json.dumps(comp_rows, indent=2) + "\n")
    if embedding is not None:
        _write_csv(
            out / "embedding.csv",
            ["id", "x", "y", "cluster"],
            [
                (i, float(embedding.points[i, 0]), float(embedding.points[i, 1]), int(clusters.labels[i]))
                for i in range(len(comps))
            ],
        )
    if cstar is None:
        (out / "cluster.json").write_text(
            json.dumps({"status": "no cluster", "components": len(comps)}, indent=2) + "\n"
        )
        return
    members = clusters.members(cstar)
    chosen = [comps[i] for i in members]
    preds = parallel_map(
        lambda s: tn.predict_mask(tn.forward(params, s.image)[0]), scenes, _jobs(args)
    )
    pseudo = dv.build_pseudo_label_set(preds, chosen, n_classes)
    for idx in sorted(pseudo):
        write_tensor(out / f"pseudo_{idx:05d}.ten", pseudo[idx].astype(np.uint8))
    (out / "cluster.json").write_text(
        json.dumps(
            {
                "status": "ok",
                "cluster": int(cstar),
                "members": [int(i) for i in members],
                "images": sorted(int(c.source) for c in chosen),
            },
            indent=2,
        )
        + "\n"
    )


def _quota_report(out, manifest, scenes, params, pseudo, jobs):
    n_classes = len(manifest.class_names)
    idxs = sorted(pseudo)
    preds = parallel_map(
        lambda i: tn.predict_mask(tn.forward(params, scenes[i].image)[0]), idxs, jobs
    )
    train_scenes = _scenes_from_manifest(manifest, "train")
    presence = [set(np.unique(s.mask[s.mask != 255]).tolist()) for s in train_scenes]
    nu_rel, quotas, chosen = dv.rehearsal_quota(
        preds, [pseudo[i] for i in idxs], n_classes, n_classes, presence, seed=0
    )
    nu_tot = np.zeros(n_classes, dtype=np.int64)
    for p, ps in zip(preds, (pseudo[i] for i in idxs)):
        rel = ps == n_classes
        vals, counts = np.unique(p[rel], return_counts=True)
        for v, c in zip(vals, counts):
            if v < n_classes:
                nu_tot[v] += c
    _write_csv(
        out / "quota.csv",
        ["class", "nu_tot", "nu_rel", "quota"],
        [
            (manifest.class_names[s], int(nu_tot[s]), float(nu_rel[s]), int(quotas[s]))
            for s in range(n_classes)
        ],
    )
    return chosen


def _load_pseudo(pseudo_dir):
    pseudo = {}
    for path in sorted(Path(pseudo_dir).glob("pseudo_*.ten")):
        idx = int(path.stem.split("_")[1])
        pseudo[idx] = read_tensor(path)
    return pseudo


def cmd_pseudo_label(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, args.split)
    params = tn.load_params(args.params)
    pseudo = _load_pseudo(args.discover)
    if not pseudo:
        raise DataError(f"no pseudo-label tensors in {args.discover}")
    for idx, mask in pseudo.items():
        write_tensor(out / f"pseudo_{idx:05d}.ten", mask)
    _quota_report(out, manifest, scenes, params, pseudo, _jobs(args))


def cmd_extend_train(args, out):
    manifest = load_manifest(args.manifest)
    scenes = _scenes_from_manifest(manifest, args.split)
    params = tn.load_params(args.params)
    n_classes = len(manifest.class_names)
    pseudo = _load_pseudo(args.discover)
    if not pseudo:
        raise DataError(f"no pseudo-label tensors in {args.discover}")

    train_scenes = _scenes_from_manifest(manifest, "train")
    presence = [set(np.unique(s.mask[s.mask != 255]).tolist()) for s in train_scenes]
    idxs = sorted(pseudo)
    preds = [tn.predict_mask(tn.forward(params, scenes[i].image)[0]) for i in idxs]
    _, _, rehearsal_idx = dv.rehearsal_quota(
        preds, [pseudo[i] for i in idxs], n_classes, n_classes, presence, seed=args.seed
    )
    data = [(scenes[i].image, pseudo[i]) for i in idxs]
    data += [(train_scenes[i].image, train_scenes[i].mask) for i in rehearsal_idx]

    extended = tn.extend_head(params, init_seed=args.seed)
    objective = tn.DistillObjective(params, lam=args.lam)
    extended, trace = tn.train(
        extended,
        data,
        objective,
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        freeze_encoder=not args.no_freeze,
        batch_size=args.batch_size,
    )
    tn.save_params(out, extended)
    _write_csv(out / "trace.csv", ["epoch", "loss"], list(enumerate(trace)))


def cmd_benchmark(args, out):
    manifest = load_manifest(args.manifest)
    params = tn.load_params(args.params)
    scenes = _scenes_from_manifest(manifest, args.split)
    if not scenes:
        raise DataError(f"manifest has no {args.split} records")
    void_params = tn.load_params(args.void_params) if args.void_params else None
    roi = _load_roi(manifest)
    rois = None if roi is None else [roi] * len(scenes)
    methods = args.methods.split(",")
    for m in methods:
        if m not in SCORE_METHODS:
            raise ConfigError(f"unknown method {m!r}")
        if m == "void" and void_params is None:
            raise ConfigError("void method requested without --void-params")
    rows = []
    for method in methods:
        p = void_params if method == "void" else params
        maps = compute_scores(
            method, p, scenes, manifest, _jobs(args),
            t=args.t, eps=args.eps, rate=args.rate, samples=args.samples, seed=args.seed,
        )
        evalset = ev.build_evalset(maps, [s.anomaly_mask for s in scenes], rois)
        curve = ev.roc_pr_curves(evalset)
        _write_curves(out, curve, evalset, svg=args.svg, suffix=f"_{method}")
        rows.append((method, curve.auprc, curve.auroc, curve.fpr95))
    _write_csv(out / "benchmark.csv", ["method", "auprc", "auroc", "fpr95"], rows)


def _per_class_table(params, scenes, n_classes):
    preds = [tn.predict_mask(tn.forward(params, s.image)[0]) for s in scenes]
    gts = [s.labels for s in scenes]
    conf = sg.confusion_matrix(preds, gts, n_classes)
    return sg.class_stats(conf)


def cmd_report(args, out):
    """Experiment C end to end: discover a novel class and learn it."""
    manifest = load_manifest(args.manifest)
    n_classes = len(manifest.class_names)
    params = tn.load_params(args.params)
    test_scenes = _scenes_from_manifest(manifest, "test")
    novel_scenes = _scenes_from_manifest(manifest, "novel")
    if not test_scenes or not novel_scenes:
        raise DataError("report needs test and novel records")

    # stage 1: anomaly scores on both splits
    knobs = dict(
        t=args.t, eps=args.eps_odin, rate=args.rate, samples=args.samples, seed=args.seed
    )
    test_maps = compute_scores(args.method, params, test_scenes, manifest, _jobs(args), **knobs)
    novel_maps = compute_scores(args.method, params, novel_scenes, manifest, _jobs(args), **knobs)

    # stage 2: meta classifier from the annotated test split
    if args.meta:
        meta = _load_meta(args.meta)
    else:
        segs = _collect_segments(
            params, test_scenes, test_maps, args.tau, args.min_size, with_gt=True,
            jobs=_jobs(args),
        )
        meta = sg.meta_fit(segs, seed=args.seed) if segs else None

    # stage 3: discovery on the novel split
    cstar, comps, clusters, _ = _discover(params, novel_scenes, novel_maps, args, meta)
    if cstar is None:
        (out / "report.json").write_text(
            json.dumps({"status": "no cluster", "components": len(comps)}, indent=2) + "\n"
        )
        return
    chosen = [comps[i] for i in clusters.members(cstar)]
    preds = [tn.predict_mask(tn.forward(params, s.image)[0]) for s in novel_scenes]
    pseudo = dv.build_pseudo_label_set(preds, chosen, n_classes)

    # stage 4: incremental training with distillation + rehearsal
    train_scenes = _scenes_from_manifest(manifest, "train")
    presence = [set(np.unique(s.mask[s.mask != 255]).tolist()) for s in train_scenes]
    idxs = sorted(pseudo)
    _, _, rehearsal_idx = dv.rehearsal_quota(
        [preds[i] for i in idxs], [pseudo[i] for i in idxs], n_classes, n_classes,
        presence, seed=args.seed,
    )
    data = [(novel_scenes[i].image, pseudo[i]) for i in idxs]
    data += [(train_scenes[i].image, train_scenes[i].mask) for i in rehearsal_idx]
    extended = tn.extend_head(params, init_seed=args.seed)
    extended, _ = tn.train(
        extended,
        data,
        tn.DistillObjective(params, lam=args.lam),
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        freeze_encoder=not args.no_freeze,
        batch_size=args.batch_size,
    )
    tn.save_params(out / "extended", extended)

    # stage 5: before/after per-class table on the test split
    before = _per_class_table(params, test_scenes, n_classes + 1)
    after = _per_class_table(extended, test_scenes, n_classes + 1)
    names = list(manifest.class_names) + ["novel"]
    rows = []
    for s, name in enumerate(names):
        rows.append(
            (
                name,
                float(before["iou"][s]), float(before["precision"][s]), float(before["recall"][s]),
                float(after["iou"][s]), float(after["precision"][s]), float(after["recall"][s]),
            )
        )
    for label, sel in (("mean-old", slice(0, n_classes)), ("mean-all", slice(0, n_classes + 1))):
        rows.append(
            (
                label,
                float(before["iou"][sel].mean()), float(before["precision"][sel].mean()), float(before["recall"][sel].mean()),
                float(after["iou"][sel].mean()), float(after["precision"][sel].mean()), float(after["recall"][sel].mean()),
            )
        )
    _write_csv(
        out / "report.csv",
        ["class", "iou_before", "precision_before", "recall_before", "iou_after", "precision_after", "recall_after"],
        rows,
    )
    summary = {
        "status": "ok",
        "pseudo_images": len(idxs),
        "cluster_size": len(chosen),
        "rehearsal_images": len(rehearsal_idx),
        "novel_iou": round(float(after["iou"][n_classes]), 6),
        "old_miou_before": round(float(before["iou"][:n_classes].mean()), 6),
        "old_miou_after": round(float(after["iou"][:n_classes].mean()), 6),
    }
    (out / "report.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")


def cmd_infostat(args, out):
    train = np.loadtxt(args.train, delimiter=",", ndmin=2)
    queries = np.loadtxt(args.query, delimiter=",", ndmin=2)
    model = infostat.fit_gaussian(train)
    anom_model = None
    if args.anom:
        anom_model = infostat.fit_gaussian(np.loadtxt(args.anom, delimiter=",", ndmin=2))
    train_info = np.array([infostat.gaussian_information(model, z) for z in train])
    rows = []
    for i, z in enumerate(queries):
        info = infostat.gaussian_information(model, z)
        row = [i, float(info)]
        if anom_model is not None:
            row.append(float(infostat.relative_information(model, anom_model, z)))
        row.append(
            int(infostat.outlier_test(train_info, info, args.alpha, args.bootstrap, args.seed))
        )
        row.append(int(infostat.novelty_test(train_info, info, args.alpha)))
        rows.append(tuple(row))
    header = ["id", "information"]
    if anom_model is not None:
        header.append("relative_information")
    header += ["outlier", "novel"]
    _write_csv(out / "infostat.csv", header, rows)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory (must not exist)")
    p.add_argument("--jobs", type=int, default=0, help="worker threads (ANOMSEG_JOBS)")
    p.add_argument("--seed", type=int, default=0)


def _add_train_knobs(p, epochs, lr):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=8)


def _add_discover_knobs(p):
    p.add_argument("--tau", type=float, default=0.8, help="anomaly score threshold")
    p.add_argument("--eps", type=float, default=2.5, help="DBSCAN neighborhood radius")
    p.add_argument("--delta", type=int, default=0, help="DBSCAN core size (0 = max(4, n/10))")
    p.add_argument("--perplexity", type=float, default=0.0, help="t-SNE perplexity (0 = auto)")
    p.add_argument("--tsne-lr", type=float, default=0.0, help="t-SNE learning rate (0 = auto)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--pca-dim", type=int, default=16)
    p.add_argument("--statistic", choices=["max", "average"], default="max")
    p.add_argument("--min-size", type=int, default=10)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anomseg", description="synthetic anomaly segmentation experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-proxy", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--n-novel", type=int, default=60)
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("train", help="train the base classifier")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--hidden", type=int, default=32)
    _add_train_knobs(p, epochs=12, lr=0.05)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-entmax", help="entropy-maximization fine-tuning")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--lam", type=float, default=0.5)
    _add_train_knobs(p, epochs=8, lr=0.05)
    p.set_defaults(fn=cmd_train_entmax)

    p = sub.add_parser("train-void", help="train with the explicit anomaly class")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--hidden", type=int, default=32)
    _add_train_knobs(p, epochs=12, lr=0.05)
    p.set_defaults(fn=cmd_train_void)

    p = sub.add_parser("score", help="compute anomaly score maps")
    _add_common(p)
    p.add_argument("--method", required=True, choices=SCORE_METHODS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--t", type=float, default=1.0, help="ODIN temperature")
    p.add_argument("--eps", type=float, default=0.0, help="ODIN perturbation")
    p.add_argument("--rate", type=float, default=0.25, help="dropout rate")
    p.add_argument("--samples", type=int, default=8, help="dropout samples")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval-pixel", help="pixel-level ROC/PR evaluation")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(fn=cmd_eval_pixel)

    p = sub.add_parser("eval-segment", help="object-level FP/FN/F1 at thresholds")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--tau", type=float, nargs="+", required=True)
    p.add_argument("--meta", default=None, help="meta model JSON")
    p.add_argument("--params", default=None)
    p.add_argument("--ref-params", default=None)
    p.set_defaults(fn=cmd_eval_segment)

    p = sub.add_parser("meta-train", help="fit the segment meta classifier")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--min-size", type=int, default=10)
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("meta-apply", help="filter segments with the meta classifier")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--min-size", type=int, default=10)
    p.set_defaults(fn=cmd_meta_apply)

    p = sub.add_parser("discover", help="cluster anomaly components, emit pseudo labels")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", default="novel")
    p.add_argument("--meta", default=None)
    _add_discover_knobs(p)
    p.set_defaults(fn=cmd_discover)

    p = sub.add_parser("pseudo-label", help="pseudo labels + rehearsal quota report")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--discover", required=True, help="output dir of `discover`")
    p.add_argument("--split", default="novel")
    p.set_defaults(fn=cmd_pseudo_label)

    p = sub.add_parser("extend-train", help="incremental training on pseudo labels")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--discover", required=True)
    p.add_argument("--split", default="novel")
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--no-freeze", action="store_true", help="train the encoder too")
    _add_train_knobs(p, epochs=30, lr=0.2)
    p.set_defaults(fn=cmd_extend_train)

    p = sub.add_parser("benchmark", help="AuPRC/AuROC/FPR95 for every scorer")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--void-params", default=None)
    p.add_argument("--split", default="test")
    p.add_argument(
        "--methods",
        default="msp,odin,mahalanobis,mcdropout,density,entropy,margin",
    )
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--eps", type=float, default=0.002)
    p.add_argument("--rate", type=float, default=0.25)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("report", help="experiment C end to end")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--method", default="entropy", choices=SCORE_METHODS)
    p.add_argument("--meta", default=None, help="reuse a fitted meta model")
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--no-freeze", action="store_true")
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--eps-odin", type=float, default=0.0)
    p.add_argument("--rate", type=float, default=0.25)
    p.add_argument("--samples", type=int, default=8)
    _add_train_knobs(p, epochs=30, lr=0.2)
    _add_discover_knobs(p)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("infostat", help="information statistics on CSV vectors")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--anom", default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.set_defaults(fn=cmd_infostat)

    return parser


def _run_atomic(args):
    out = Path(args.out)
    if out.exists():
        raise ConfigError(f"output directory exists: {out}")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.tmp{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    config = {k: v for k, v in vars(args).items() if k != "fn"}
    try:
        args.fn(args, tmp)
        (tmp / "run.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _run_atomic(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, TensorIOError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (tn.TrainingDiverged, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
