"""File-backed pipeline stages: synth -> prep -> local -> maps -> global -> evaluate.

Every stage writes its outputs plus a ``stage.json`` manifest into its own
directory under the run directory. The manifest records a key derived from
the configuration sections the stage depends on and the keys of its
upstream stages; a stage whose key and outputs are already present is
skipped, so interrupted runs resume where they stopped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, plotting
from .config import PipelineConfig
from .lesionmap import apply_weight, expand_and_tile, fuse
from .metrics import EvalReport, confusion, format_report, roc_auc
from .networks import (GRADES, LESION_CLASSES, TrainConfig, binary_lesion_score, build_global,
                       build_local, referable_score, train)
from .nncore import load_checkpoint, save_checkpoint
from .preprocess import PreprocessParams, prepare, resize_square
from .synthdata import (GradeRule, Lesion, SynthSpec, augment, graded_corpus, lesions_from_record,
                        patch_label, read_manifest, write_manifest)
from .tiling import extract_patches, grid_positions

log = logging.getLogger(__name__)

STAGES = ("synth", "prep", "local", "maps", "global", "evaluate")
# configuration sections each stage reads
STAGE_SECTIONS = {
    "synth": ("synth",),
    "prep": ("preprocess", "tiling"),
    "local": ("localnet", "train", "tiling"),
    "maps": ("globalnet", "tiling", "eval"),
    "global": ("globalnet", "train", "eval"),
    "evaluate": ("eval",),
}
UPSTREAM = {"synth": None, "prep": "synth", "local": "prep", "maps": "local", "global": "maps",
            "evaluate": "global"}


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not been run (or its outputs were removed)."""


def child_seed(seed, name):
    """Independent, reproducible seed for a named sub-task."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def dtype_for(cfg: PipelineConfig):
    return np.float64 if cfg.train.precision == 64 else np.float32


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _json_load(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- stage runner

def stage_key(cfg: PipelineConfig, name, upstream_key=None):
    payload = {
        "stage": name,
        "version": __version__,
        "seed": cfg.train.seed,
        "precision": cfg.train.precision,
        "sections": {s: asdict(getattr(cfg, s)) for s in STAGE_SECTIONS[name]},
        "upstream": upstream_key,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def read_stage(out, name):
    path = Path(out) / name / "stage.json"
    if not path.is_file():
        raise MissingArtifact(f"stage '{name}' has no manifest at {path}; run it first")
    manifest = _json_load(path)
    for rel in manifest["outputs"]:
        if not (Path(out) / name / rel).exists():
            raise MissingArtifact(f"stage '{name}' output {rel} is missing; rerun the stage")
    return manifest


def run_stage(cfg: PipelineConfig, out, name, force=False):
    """Run one stage unless an up-to-date manifest already exists. Returns the manifest."""
    out = Path(out)
    up = UPSTREAM[name]
    up_key = read_stage(out, up)["key"] if up else None
    key = stage_key(cfg, name, up_key)
    stage_dir = out / name
    if not force:
        try:
            manifest = read_stage(out, name)
            if manifest["key"] == key:
                log.info("stage %s up to date (key %s)", name, key)
                manifest["skipped"] = True
                return manifest
        except MissingArtifact:
            pass
    stage_dir.mkdir(parents=True, exist_ok=True)
    log.info("running stage %s", name)
    t0 = time.perf_counter()
    outputs, summary = STAGE_FUNCS[name](cfg, out, stage_dir)
    manifest = {
        "stage": name,
        "key": key,
        "upstream_key": up_key,
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "version": __version__,
        "outputs": sorted(outputs),
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "summary": summary,
    }
    _json_dump(manifest, stage_dir / "stage.json")
    manifest["skipped"] = False
    return manifest


def run_all(cfg: PipelineConfig, out, force=False, until="evaluate"):
    manifests = {}
    for name in STAGES:
        manifests[name] = run_stage(cfg, out, name, force)
        if name == until:
            break
    return manifests


# ---------------------------------------------------------------- helpers

def synth_base(cfg: PipelineConfig) -> SynthSpec:
    s = cfg.synth
    return SynthSpec(side=s.side, ma_radius=tuple(s.ma_radius), hem_radius=tuple(s.hem_radius),
                     exu_radius=tuple(s.exu_radius), vessel_width=tuple(s.vessel_width),
                     ma_contrast=tuple(s.ma_contrast), hem_contrast=tuple(s.hem_contrast),
                     exu_contrast=tuple(s.exu_contrast), noise=s.noise)


def grade_rule(cfg: PipelineConfig) -> GradeRule:
    return GradeRule(cfg.synth.severe_hem_count, cfg.synth.severe_hem_box)


def preprocess_params(cfg: PipelineConfig) -> PreprocessParams:
    p = cfg.preprocess
    return PreprocessParams(p.alpha, p.beta, p.gamma, p.theta, p.kernel_radius or None, p.roi_threshold)


def geometry_for(cfg: PipelineConfig):
    t = cfg.tiling
    return grid_positions(t.d, t.h, t.ov)


def assign_splits(grades, val_fraction, test_fraction, seed):
    """Stratified train/val/test assignment (per grade, deterministic under ``seed``)."""
    grades = np.asarray(grades)
    rng = np.random.default_rng(seed)
    split = np.empty(len(grades), dtype=object)
    for g in np.unique(grades):
        idx = rng.permutation(np.flatnonzero(grades == g))
        n_test = int(round(test_fraction * len(idx)))
        n_val = int(round(val_fraction * len(idx)))
        split[idx[:n_test]] = "test"
        split[idx[n_test:n_test + n_val]] = "val"
        split[idx[n_test + n_val:]] = "train"
    return split.tolist()


def load_rgb(path):
    """PNG/JPEG to a 3×H×W uint8 array."""
    with Image.open(path) as im:
        return np.moveaxis(np.asarray(im.convert("RGB")), -1, 0)


def enhance_image(raw, cfg: PipelineConfig, source_id=""):
    """ROI crop, resize to the working side and contrast enhancement, quantised to uint8."""
    enhanced, cmap = prepare(raw, cfg.tiling.d, preprocess_params(cfg), source_id)
    return np.clip(np.rint(enhanced.pixels), 0, 255).astype(np.uint8), cmap


def lesion_probabilities(local_net, pixels, geometry, images_per_batch=16):
    """Softmax over lesion classes for every window of every image: (N, s, s, 4)."""
    pixels = np.asarray(pixels)
    n, s = len(pixels), geometry.s
    out = np.zeros((n, s, s, 4))
    local_net.eval()
    for start in range(0, n, images_per_batch):
        chunk = pixels[start:start + images_per_batch]
        patches = np.concatenate([extract_patches(img, geometry).patches for img in chunk])
        probs = local_net.predict_proba(patches.astype(local_net.dtype) / 255.0)
        out[start:start + len(chunk)] = probs.reshape(len(chunk), s, s, 4)
    return out


def label_and_probability(probs):
    L = np.argmax(probs, axis=-1)
    P = np.take_along_axis(probs, L[..., None], axis=-1)[..., 0]
    return L, P


def global_input(pixels, L, P, geometry, size, weighted=True):
    """Weighted (or all-ones baseline) image resized to the grading-network input, in [0, 255·4]."""
    if weighted:
        M = expand_and_tile(fuse(L, P), geometry)
    else:
        M = np.ones((geometry.d, geometry.d))
    return resize_square(apply_weight(pixels, M).pixels, size), M


def local_networks(cfg: PipelineConfig, seed_name="local-init"):
    return build_local(cfg.tiling.h, cfg.localnet.width_divisor, cfg.localnet.dropout, dtype_for(cfg),
                       child_seed(cfg.train.seed, seed_name))


def global_network(cfg: PipelineConfig, n_classes=4):
    g = cfg.globalnet
    return build_global(g.input_size, g.width_divisor, g.dropout, dtype_for(cfg),
                        child_seed(cfg.train.seed, "global-init"), n_classes=n_classes)


def train_config(cfg: PipelineConfig, section, seed_name):
    t, o = cfg.train, getattr(cfg, section)
    return TrainConfig(epochs=o.epochs or t.epochs, batch_size=o.batch_size or t.batch_size,
                       learning_rate=o.learning_rate or t.learning_rate, momentum=t.momentum,
                       lr_decay=t.lr_decay, seed=child_seed(t.seed, seed_name), patience=t.patience,
                       class_balance=t.class_balance)


def _class_counts(y, n=4):
    return np.bincount(np.asarray(y, dtype=int), minlength=n).tolist()


# ---------------------------------------------------------------- stages

def stage_synth(cfg: PipelineConfig, out, stage_dir):
    seed = cfg.train.seed
    rule = grade_rule(cfg)
    items = graded_corpus(cfg.synth.n_per_grade, synth_base(cfg), child_seed(seed, "synth"), rule)
    splits = assign_splits([it.grade for it in items], cfg.synth.val_fraction, cfg.synth.test_fraction,
                           child_seed(seed, "split"))
    img_dir = stage_dir / "images"
    img_dir.mkdir(exist_ok=True)
    records = []

    def emit(item, split):
        rel = f"images/{item.source_id}.png"
        plotting.save_rgb(item.image, stage_dir / rel)
        rec = item.manifest_record(rel)
        rec["split"] = split
        records.append(rec)

    for item, split in zip(items, splits):
        emit(item, split)
    n_aug = 0
    for k, (item, split) in enumerate(zip(items, splits)):
        if split != "train":
            continue
        for j in range(cfg.synth.augment_copies):
            aug = augment(item, seed=child_seed(seed, f"augment-{k}-{j}"), rule=rule)
            aug.source_id = f"{item.source_id}a{j}"
            emit(aug, "train")
            n_aug += 1
    write_manifest(records, stage_dir / "manifest.jsonl")
    if cfg.eval.figures:
        first = [next(r for r in records if r["grade"] == g) for g in range(4)]
        plotting.contact_sheet([load_rgb(stage_dir / r["path"]) for r in first],
                               [f"{r['id']} grade {r['grade']}" for r in first],
                               stage_dir / "examples.png")
    summary = {"n_images": len(records), "n_augmented": n_aug,
               "grades": _class_counts([r["grade"] for r in records]),
               "splits": {s: sum(r["split"] == s for r in records) for s in ("train", "val", "test")}}
    outputs = ["manifest.jsonl"] + [r["path"] for r in records]
    return outputs, summary


def stage_prep(cfg: PipelineConfig, out, stage_dir):
    synth_dir = Path(out) / "synth"
    records = read_manifest(synth_dir / "manifest.jsonl")
    d = cfg.tiling.d
    pixels = np.zeros((len(records), 3, d, d), dtype=np.uint8)
    mapped = []
    for k, rec in enumerate(records):
        raw = load_rgb(synth_dir / rec["path"])
        pixels[k], cmap = enhance_image(raw, cfg, rec["id"])
        lesions = [Lesion(l.cls, *cmap.box(l.x, l.y, l.w, l.h)) for l in lesions_from_record(rec)]
        mapped.append({"id": rec["id"], "grade": rec["grade"], "split": rec["split"],
                       "lesions": [l.as_list() for l in lesions]})
    np.save(stage_dir / "enhanced.npy", pixels)
    write_manifest(mapped, stage_dir / "records.jsonl")
    if cfg.eval.figures:
        plotting.contact_sheet(pixels[:4], [r["id"] for r in mapped[:4]], stage_dir / "examples.png")
    return ["enhanced.npy", "records.jsonl"], {"n_images": len(mapped), "d": d}


def load_prep(out):
    prep = Path(out) / "prep"
    read_stage(out, "prep")
    pixels = np.load(prep / "enhanced.npy", mmap_mode="r")
    records = read_manifest(prep / "records.jsonl")
    return pixels, records


def patch_labels(records, geometry):
    """Ground-truth window labels for every image: (N, s, s)."""
    out = np.zeros((len(records), geometry.s, geometry.s), dtype=np.int64)
    for k, rec in enumerate(records):
        lesions = lesions_from_record(rec)
        if lesions:
            for r, c, y0, x0 in geometry.windows():
                out[k, r, c] = patch_label(lesions, y0, x0, geometry.h)
    return out


def local_patch_set(pixels, labels, image_idx, geometry, normal_ratio, rng, min_normal=32):
    """All lesion windows of the chosen images plus a random sample of normal windows."""
    cells = [(k, r, c) for k in image_idx for r in range(geometry.s) for c in range(geometry.s)]
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    y_all = labels[cells[:, 0], cells[:, 1], cells[:, 2]]
    lesion_cells = np.flatnonzero(y_all > 0)
    normal_cells = np.flatnonzero(y_all == 0)
    per_class = np.bincount(y_all, minlength=4)[1:]
    n_normal = max(int(round(normal_ratio * per_class.max())), min_normal)
    n_normal = min(n_normal, len(normal_cells))
    chosen = np.sort(np.concatenate([lesion_cells, rng.choice(normal_cells, n_normal, replace=False)]))
    h = geometry.h
    X = np.zeros((len(chosen), 3, h, h), dtype=np.uint8)
    for j, cell in enumerate(cells[chosen]):
        k, r, c = cell
        y0, x0 = geometry.positions[r], geometry.positions[c]
        X[j] = pixels[k, :, y0:y0 + h, x0:x0 + h]
    return X, y_all[chosen]


def stage_local(cfg: PipelineConfig, out, stage_dir):
    pixels, records = load_prep(out)
    geometry = geometry_for(cfg)
    labels = patch_labels(records, geometry)
    rng = np.random.default_rng(child_seed(cfg.train.seed, "local-patches"))
    split = np.array([r["split"] for r in records])
    sets = {}
    for name in ("train", "val"):
        X, y = local_patch_set(pixels, labels, np.flatnonzero(split == name), geometry,
                               cfg.localnet.normal_per_lesion, rng)
        sets[name] = (X, y)
    dtype = dtype_for(cfg)
    net = local_networks(cfg)
    tc = train_config(cfg, "localnet", "local-train")
    _, history = train(net, sets["train"][0].astype(dtype) / 255.0, sets["train"][1],
                       sets["val"][0].astype(dtype) / 255.0, sets["val"][1], tc)
    save_checkpoint(net, stage_dir / "checkpoint.fnds")
    (stage_dir / "history.csv").write_text(history.to_csv())
    outputs = ["checkpoint.fnds", "checkpoint.txt", "history.csv"]
    if cfg.eval.figures:
        plotting.plot_history({"local": history}, stage_dir / "history.png", "lesion network")
        outputs.append("history.png")
    summary = {"train_patches": _class_counts(sets["train"][1]), "val_patches": _class_counts(sets["val"][1]),
               "history": history.metrics(), "parameters": net.parameter_count()}
    return outputs, summary


def load_local(cfg: PipelineConfig, out):
    read_stage(out, "local")
    net = local_networks(cfg)
    load_checkpoint(net, Path(out) / "local" / "checkpoint.fnds")
    net.eval()
    return net


def stage_maps(cfg: PipelineConfig, out, stage_dir):
    pixels, records = load_prep(out)
    geometry = geometry_for(cfg)
    net = load_local(cfg, out)
    probs = lesion_probabilities(net, pixels, geometry)
    L, P = label_and_probability(probs)
    size = cfg.globalnet.input_size
    modes = ["weighted", "plain"] if cfg.eval.ablation else ["weighted"]
    inputs = {m: np.zeros((len(records), 3, size, size), dtype=np.float32) for m in modes}
    m_mean = np.zeros(len(records))
    for k in range(len(records)):
        for m in modes:
            inputs[m][k], M = global_input(pixels[k], L[k], P[k], geometry, size, weighted=m == "weighted")
            if m == "weighted":
                m_mean[k] = M.mean()
    np.savez(stage_dir / "maps.npz", probs=probs, L=L, P=P)
    outputs = ["maps.npz"]
    for m in modes:
        np.save(stage_dir / f"inputs_{m}.npy", inputs[m])
        outputs.append(f"inputs_{m}.npy")
    ex_dir = stage_dir / "examples"
    ex_dir.mkdir(exist_ok=True)
    test = [k for k, r in enumerate(records) if r["split"] == "test"]
    for k in test[:cfg.eval.dump_examples]:
        rid = records[k]["id"]
        np.savetxt(ex_dir / f"{rid}_L.csv", L[k], fmt="%d", delimiter=",")
        np.savetxt(ex_dir / f"{rid}_P.csv", P[k], fmt="%.6f", delimiter=",")
        M = expand_and_tile(fuse(L[k], P[k]), geometry)
        weighted = apply_weight(pixels[k], M, rid)
        plotting.save_rgb(weighted.display(), ex_dir / f"{rid}_Istar.png")
        outputs += [f"examples/{rid}_L.csv", f"examples/{rid}_P.csv", f"examples/{rid}_Istar.png"]
        if cfg.eval.figures:
            plotting.plot_heatmap(M, ex_dir / f"{rid}_M.png", f"{rid} weighting matrix", vmin=0, vmax=4)
            plotting.plot_lesion_overlay(pixels[k], L[k], P[k], geometry, ex_dir / f"{rid}_overlay.png",
                                         f"{rid} grade {records[k]['grade']}",
                                         lesions_from_record(records[k]))
            outputs += [f"examples/{rid}_M.png", f"examples/{rid}_overlay.png"]
    summary = {"grid": geometry.s, "predicted_window_classes": _class_counts(L.ravel()),
               "mean_weight_by_grade": [float(m_mean[[r["grade"] == g for r in records]].mean())
                                        if any(r["grade"] == g for r in records) else None
                                        for g in range(4)]}
    return outputs, summary


def _grading_runs(cfg: PipelineConfig):
    """``(run name, input mode, n_classes)`` for every grading network the config asks for."""
    modes = ["weighted", "plain"] if cfg.eval.ablation else ["weighted"]
    runs = [(m, m, 4) for m in modes]
    if cfg.globalnet.referable_mode == "binary":
        runs += [(f"{m}_binary", m, 2) for m in modes]
    return runs


def _grading_targets(records, n_classes):
    g = np.array([r["grade"] for r in records])
    return g if n_classes == 4 else (g >= 2).astype(np.int64)


def stage_global(cfg: PipelineConfig, out, stage_dir):
    read_stage(out, "maps")
    _, records = load_prep(out)
    split = np.array([r["split"] for r in records])
    tr, va = np.flatnonzero(split == "train"), np.flatnonzero(split == "val")
    dtype = dtype_for(cfg)
    outputs, summary, histories = [], {}, {}
    for run, mode, n_classes in _grading_runs(cfg):
        X = np.load(Path(out) / "maps" / f"inputs_{mode}.npy").astype(dtype) / 255.0
        y = _grading_targets(records, n_classes)
        net = global_network(cfg, n_classes)
        # identical initialisation and batch order across input modes
        _, history = train(net, X[tr], y[tr], X[va], y[va], train_config(cfg, "globalnet", "global-train"))
        run_dir = stage_dir / run
        run_dir.mkdir(exist_ok=True)
        save_checkpoint(net, run_dir / "checkpoint.fnds")
        (run_dir / "history.csv").write_text(history.to_csv())
        outputs += [f"{run}/checkpoint.fnds", f"{run}/checkpoint.txt", f"{run}/history.csv"]
        summary[run] = {"history": history.metrics(), "parameters": net.parameter_count()}
        histories[run] = history
    if cfg.eval.figures:
        plotting.plot_history(histories, stage_dir / "history.png", "grading networks")
        outputs.append("history.png")
    return outputs, summary


def load_global(cfg: PipelineConfig, out, run="weighted"):
    read_stage(out, "global")
    n_classes = 2 if run.endswith("_binary") else 4
    net = global_network(cfg, n_classes)
    path = Path(out) / "global" / run / "checkpoint.fnds"
    if not path.is_file():
        raise MissingArtifact(f"no grading network '{run}' at {path}")
    load_checkpoint(net, path)
    net.eval()
    return net


def _round(x, digits=12):
    """Round floats for the JSON summary so it is stable across platforms' last-bit differences."""
    if isinstance(x, float):
        return round(x, digits)
    if isinstance(x, dict):
        return {k: _round(v, digits) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v, digits) for v in x]
    return x


def stage_evaluate(cfg: PipelineConfig, out, stage_dir):
    out = Path(out)
    pixels, records = load_prep(out)
    geometry = geometry_for(cfg)
    test = np.flatnonzero(np.array([r["split"] for r in records]) == "test")
    test_records = [records[k] for k in test]
    maps = np.load(out / "maps" / "maps.npz")
    truth = patch_labels(test_records, geometry).ravel()
    probs = maps["probs"][test].reshape(-1, 4)
    pred = maps["L"][test].ravel()
    lesion_truth = truth > 0
    lesion_roc = roc_auc(binary_lesion_score(probs), lesion_truth) if 0 < lesion_truth.sum() < len(truth) else None
    lesion = EvalReport("lesion detection (windows)", LESION_CLASSES, confusion(truth, pred, 4), lesion_roc)
    outputs = []
    report = {"lesion": lesion.to_dict(), "grading": {}, "referable": {}}
    if lesion_roc is not None:
        (stage_dir / "roc_lesion.csv").write_text(lesion_roc.to_csv())
        outputs.append("roc_lesion.csv")
    grades = np.array([r["grade"] for r in test_records])
    referable = grades >= 2
    curves, points = {}, {}
    dtype = dtype_for(cfg)
    for run, mode, n_classes in _grading_runs(cfg):
        net = load_global(cfg, out, run)
        X = np.load(out / "maps" / f"inputs_{mode}.npy")[test].astype(dtype) / 255.0
        p = net.predict_proba(X)
        if n_classes == 4:
            rep = EvalReport(f"grading ({run})", GRADES, confusion(grades, p.argmax(axis=1), 4))
            report["grading"][run] = rep.to_dict()
            score = referable_score(p)
        else:
            score = p[:, 1]
        if cfg.globalnet.referable_mode == "binary" and n_classes == 4:
            continue
        if not 0 < referable.sum() < len(referable):
            continue
        roc = roc_auc(score, referable)
        ops = [roc.operating_point(min_specificity=cfg.eval.high_specificity),
               roc.operating_point(min_sensitivity=cfg.eval.high_sensitivity)]
        report["referable"][mode] = {"auc": roc.auc, "operating_points": ops, "source": run}
        curves[mode], points[mode] = roc, ops
        (stage_dir / f"roc_referable_{mode}.csv").write_text(roc.to_csv())
        outputs.append(f"roc_referable_{mode}.csv")
    if "weighted" in report["referable"] and "plain" in report["referable"]:
        report["ablation"] = {"referable_auc_gain": report["referable"]["weighted"]["auc"]
                              - report["referable"]["plain"]["auc"]}
        for key in ("accuracy", "quadratic_weighted_kappa"):
            w, b = report["grading"].get("weighted", {}).get(key), report["grading"].get("plain", {}).get(key)
            if w is not None and b is not None:
                report["ablation"][f"{key}_gain"] = w - b
    _json_dump(report, stage_dir / "report.json")
    (stage_dir / "report.txt").write_text(format_full_report(report))
    outputs += ["report.json", "report.txt"]
    if cfg.eval.figures:
        fig_dir = stage_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        plotting.plot_confusion(lesion.confusion.counts, LESION_CLASSES, fig_dir / "confusion_lesion.png",
                                "lesion windows")
        outputs.append("figures/confusion_lesion.png")
        if lesion_roc is not None:
            plotting.plot_roc({"lesion vs normal": lesion_roc}, fig_dir / "roc_lesion.png", "lesion detection")
            outputs.append("figures/roc_lesion.png")
        for run, d in report["grading"].items():
            plotting.plot_confusion(np.array(d["confusion"]), GRADES, fig_dir / f"confusion_grading_{run}.png",
                                    f"grading ({run})")
            outputs.append(f"figures/confusion_grading_{run}.png")
        if curves:
            plotting.plot_roc(curves, fig_dir / "roc_referable.png", "referable DR", points)
            outputs.append("figures/roc_referable.png")
    summary = build_summary(cfg, out, report)
    _json_dump(summary, stage_dir / "summary.json")
    _json_dump(summary, out / "summary.json")
    outputs.append("summary.json")
    return outputs, {"referable": {m: d["auc"] for m, d in report["referable"].items()},
                     "lesion_auc": report["lesion"].get("auc")}


def build_summary(cfg: PipelineConfig, out, report):
    """Deterministic run digest: metrics and training curves, no paths or timings."""
    stages = {}
    for name in STAGES[:-1]:
        m = read_stage(out, name)
        stages[name] = {"key": m["key"], "summary": m["summary"]}
    return _round({
        "version": __version__,
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "precision": cfg.train.precision,
        "stages": stages,
        "report": report,
    })


def format_full_report(report) -> str:
    parts = [format_report(report["lesion"])]
    for d in report["grading"].values():
        parts.append(format_report(d))
    for mode, d in report["referable"].items():
        ops = "; ".join(f"sens {o['sensitivity']:.4f} / spec {o['specificity']:.4f} @ {o['threshold']:.4f}"
                        for o in d["operating_points"])
        parts.append(f"== referable DR ({mode}) ==\nAUC {d['auc']:.4f}\noperating points: {ops}")
    if "ablation" in report:
        parts.append("== ablation (weighted - all-ones) ==\n"
                     + "\n".join(f"{k} {v:+.4f}" for k, v in report["ablation"].items()))
    return "\n\n".join(parts) + "\n"


STAGE_FUNCS = {
    "synth": stage_synth,
    "prep": stage_prep,
    "local": stage_local,
    "maps": stage_maps,
    "global": stage_global,
    "evaluate": stage_evaluate,
}


# ---------------------------------------------------------------- single-image grading

def grade_image(cfg: PipelineConfig, out, image_path, dest=None):
    """Grade one fundus photograph with the trained networks of run ``out``.

    Writes ``<stem>_grade.json`` and ``<stem>_overlay.png`` into ``dest``.
    """
    out = Path(out)
    local = load_local(cfg, out)
    glob = load_global(cfg, out, "weighted")
    raw = load_rgb(image_path)
    pixels, _ = enhance_image(raw, cfg, Path(image_path).stem)
    geometry = geometry_for(cfg)
    probs = lesion_probabilities(local, pixels[None], geometry)[0]
    L, P = label_and_probability(probs)
    x, _ = global_input(pixels, L, P, geometry, cfg.globalnet.input_size, weighted=True)
    p = glob.predict_proba(x[None].astype(glob.dtype) / 255.0)[0]
    result = {
        "image": str(image_path),
        "grade": int(np.argmax(p)),
        "grade_name": GRADES[int(np.argmax(p))],
        "probabilities": [float(v) for v in p],
        "referable_score": float(referable_score(p)),
        "lesion_windows": _class_counts(L.ravel()),
    }
    if cfg.globalnet.referable_mode == "binary":
        bnet = load_global(cfg, out, "weighted_binary")
        result["referable_score"] = float(bnet.predict_proba(x[None].astype(bnet.dtype) / 255.0)[0, 1])
    if dest is not None:
        dest = Path(dest)
        dest.mkdir(parents=True, exist_ok=True)
        stem = Path(image_path).stem
        _json_dump(result, dest / f"{stem}_grade.json")
        plotting.plot_lesion_overlay(pixels, L, P, geometry, dest / f"{stem}_overlay.png",
                                     f"{stem}: {result['grade_name']}")
    return result


__all__ = ["STAGES", "MissingArtifact", "run_stage", "run_all", "read_stage", "grade_image",
           "child_seed", "assign_splits", "global_input", "lesion_probabilities"]
