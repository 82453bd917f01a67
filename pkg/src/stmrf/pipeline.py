"""The four pipeline stages: synth, classify, regularize, assess.

Output layout under ``pipeline.out``::

    truth.stmr  bands.stmr  features.stmr  patches.stmr   (+ .dates sidecars)
    runs/run_XX/polygons.csv  samples.csv                 (synth)
    runs/run_XX/prob.stmr  ivm_tYY.ivm  classify.csv      (classify)
    runs/run_XX/labels_<mode>.stmr  lbp_<mode>.log         (regularize)
    runs/run_XX/errmat_<mode>_tYY.csv                      (assess)
    report_runs.csv  report.csv  burnt_area.csv  agreement.stmr
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from stmrf import assessment as asm
from stmrf.config import PipelineConfig
from stmrf.core import DEFAULT_CLASSES, argmax_labels, check_probabilities, prob_to_energy
from stmrf.energy import MrfProblem, total_energy
from stmrf.formats import read_dates, read_raster, write_raster
from stmrf.inference import lbp_layered_sweep
from stmrf.ivm import (
    TrainSet,
    grid_search_cv,
    median_distance,
    predict_proba,
    save_model,
    train_ivm,
)
from stmrf.synth import (
    Polygon,
    Scenario,
    generate_scene,
    reference_polygons,
    render_features,
    sample_polygons,
)
from stmrf.texture import texture_feature_stack
from stmrf.transitions import (
    TransitionMatrix,
    default_study_matrix,
    potts_matrix,
    read_matrix_csv,
    tau_pairs_for_gaps,
)

log = logging.getLogger(__name__)

MODES = ("ivm", "s-mrf", "st-mrf")


class DataError(ValueError):
    pass


def run_dir(cfg: PipelineConfig, run: int) -> Path:
    return cfg.out / "runs" / f"run_{run:02d}"


def _run_seed(cfg: PipelineConfig, run: int) -> int:
    return cfg.seed * 1000 + run


# ---------------------------------------------------------------------------
# synth


def scenario_from_config(cfg: PipelineConfig) -> Scenario:
    if len(cfg.class_set) != len(DEFAULT_CLASSES):
        raise DataError("the synthetic scenario is defined for the five default classes")
    return Scenario(
        H=cfg["scenario.height"],
        W=cfg["scenario.width"],
        dates=cfg["scenario.dates"],
        n_patches=cfg["scenario.n_patches"],
        n_water=cfg["scenario.n_water"],
        looks=cfg["scenario.looks"],
        patch_jitter=cfg["scenario.patch_jitter"],
        elongated=cfg["scenario.elongated"],
        burn_start=cfg["scenario.burn_start"],
        seed=cfg.seed,
    )


def feature_stack(bands: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Per date: the raw bands followed by ten texture features per band."""
    glcm = cfg.glcm()
    T = bands.shape[0]

    def one(t):
        return np.concatenate([bands[t], texture_feature_stack(bands[t], glcm)], axis=-1)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            layers = list(pool.map(one, range(T)))
    else:
        layers = [one(t) for t in range(T)]
    return np.stack(layers)


def write_polygons_csv(path, polys, train_mask, dates, classes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "date", "class", "role", "vertices"])
        for p, is_train in zip(polys, train_mask):
            verts = ";".join(f"{x} {y}" for x, y in p.vertices())
            for t, d in enumerate(dates):
                w.writerow([p.id, d.isoformat(), classes[p.classes[t]], "train" if is_train else "test", verts])


def read_polygons_csv(path, dates, classes) -> tuple[list[Polygon], np.ndarray]:
    by_id: dict[int, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rec = by_id.setdefault(int(row["id"]), {"classes": {}, "role": row["role"], "vertices": row["vertices"]})
            rec["classes"][row["date"]] = classes.index(row["class"])
    polys, train = [], []
    for pid in sorted(by_id):
        rec = by_id[pid]
        xy = [tuple(int(v) for v in pt.split()) for pt in rec["vertices"].split(";")]
        xs, ys = zip(*xy)
        cls = tuple(rec["classes"][d.isoformat()] for d in dates)
        polys.append(Polygon(pid, min(ys), max(ys), min(xs), max(xs), cls))
        train.append(rec["role"] == "train")
    return polys, np.array(train, dtype=bool)


def write_samples_csv(path, samples, polys, dates, classes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "polygon", "date", "row", "col", "class", "role"])
        for i, (p, r, c, tr) in enumerate(zip(samples.polygon, samples.rows, samples.cols, samples.is_train)):
            for t, d in enumerate(dates):
                w.writerow([i, polys[p].id, d.isoformat(), r, c, classes[polys[p].classes[t]], "train" if tr else "test"])


def read_samples_csv(path, dates, classes) -> dict:
    """Per date index: arrays ``rows, cols, labels, train, polygon``."""
    index = {d.isoformat(): t for t, d in enumerate(dates)}
    acc = {t: {"rows": [], "cols": [], "labels": [], "train": [], "polygon": []} for t in range(len(dates))}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            a = acc[index[row["date"]]]
            a["rows"].append(int(row["row"]))
            a["cols"].append(int(row["col"]))
            a["labels"].append(classes.index(row["class"]))
            a["train"].append(row["role"] == "train")
            a["polygon"].append(int(row["polygon"]))
    return {t: {k: np.array(v) for k, v in a.items()} for t, a in acc.items()}


def cmd_synth(cfg: PipelineConfig) -> None:
    out = cfg.out
    if not out.is_dir():
        raise DataError(f"output directory {out} does not exist")
    sc = scenario_from_config(cfg)
    scene = generate_scene(sc)
    bands = render_features(scene.truth, sc, scene.patches)
    feats = feature_stack(bands, cfg)
    dates = list(sc.dates)
    write_raster(out / "truth.stmr", scene.truth, "u2", dates)
    write_raster(out / "patches.stmr", scene.patches[None], "u2")
    write_raster(out / "bands.stmr", bands, "f8", dates)
    write_raster(out / "features.stmr", feats, "f8", dates)
    polys = reference_polygons(scene, max_half=cfg["sampling.max_half"])
    names = cfg.class_set.names
    for run in range(cfg.runs):
        rd = run_dir(cfg, run)
        rd.mkdir(parents=True, exist_ok=True)
        samples = sample_polygons(
            polys,
            per_poly=cfg["sampling.per_polygon"],
            min_dist=cfg.min_dist_px(),
            seed=_run_seed(cfg, run),
            min_train=cfg["ivm.folds"],
        )
        write_polygons_csv(rd / "polygons.csv", polys, samples.train_polygon, dates, names)
        write_samples_csv(rd / "samples.csv", samples, polys, dates, names)
    log.info("synth: %d dates, %d polygons, %d runs written to %s", len(dates), len(polys), cfg.runs, out)


# ---------------------------------------------------------------------------
# classify


def _load_stack(cfg, name):
    path = cfg.out / name
    if not path.is_file():
        raise DataError(f"missing {path}; run the earlier stages first")
    return read_raster(path), read_dates(path)


def classify_date(feats_t, train: TrainSet, cfg: PipelineConfig, seed: int):
    med = median_distance(train.features, seed=seed)
    sigmas = [med * m for m in cfg["ivm.sigma_grid"]]
    kw = dict(
        max_import=cfg["ivm.max_import"],
        tol=cfg["ivm.tol"],
        n_candidates=cfg["ivm.n_candidates"],
        class_set=cfg.class_set,
    )
    if len(sigmas) * len(cfg["ivm.c_grid"]) == 1:
        sigma, C = sigmas[0], cfg["ivm.c_grid"][0]
    else:
        sigma, C = grid_search_cv(train, sigmas, cfg["ivm.c_grid"], folds=cfg["ivm.folds"], seed=seed, **kw)
    model = train_ivm(train, sigma, C, seed=seed, **kw)
    prob = predict_proba(model, feats_t, threads=cfg.threads)
    return model, prob


def cmd_classify(cfg: PipelineConfig) -> None:
    feats, dates = _load_stack(cfg, "features.stmr")
    names = cfg.class_set.names
    for run in range(cfg.runs):
        rd = run_dir(cfg, run)
        samples = read_samples_csv(rd / "samples.csv", dates, names)
        prob = np.empty(feats.shape[:3] + (len(names),))
        rows = []
        for t in range(len(dates)):
            s = samples[t]
            tr = s["train"]
            if not tr.any():
                raise DataError(f"run {run}: no training samples at {dates[t]}")
            train = TrainSet(feats[t, s["rows"][tr], s["cols"][tr]], s["labels"][tr], s["polygon"][tr])
            if len(np.unique(train.labels)) < 2:
                raise DataError(f"run {run}, {dates[t]}: training set has a single class {names[train.labels[0]]}")
            seed = _run_seed(cfg, run) * 100 + t
            model, prob[t] = classify_date(feats[t], train, cfg, seed)
            save_model(model, rd / f"ivm_t{t:02d}.ivm")
            train_acc = float(np.mean(np.argmax(predict_proba(model, train.features), 1) == train.labels))
            log.info("run %d %s: sigma=%.4g C=%.4g imports=%d train_acc=%.3f", run, dates[t], model.sigma, model.C, model.n_import, train_acc)
            rows.append([run, dates[t].isoformat(), f"{model.sigma:.10g}", f"{model.C:.10g}", model.n_import, f"{train_acc:.6f}"])
        check_probabilities(prob)
        write_raster(rd / "prob.stmr", prob, "f8", dates)
        with open(rd / "classify.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "date", "sigma", "C", "n_import", "train_accuracy"])
            w.writerows(rows)


# ---------------------------------------------------------------------------
# regularize


def build_problem(prob: np.ndarray, dates, cfg: PipelineConfig, mode: str) -> MrfProblem:
    names = cfg.class_set.names
    K = len(names)
    unary = prob_to_energy(prob, cfg["mrf.prob_floor"])
    if cfg["mrf.delta"] == "potts":
        delta = potts_matrix(K)
    else:
        delta = TransitionMatrix(read_matrix_csv(cfg.resolve(cfg["mrf.delta"]), names))
    if cfg["mrf.forward_matrix"] == "default":
        F = default_study_matrix()
    else:
        F = read_matrix_csv(cfg.resolve(cfg["mrf.forward_matrix"]), names)
    gaps = [(b - a).days for a, b in zip(dates, dates[1:])]
    pairs = tau_pairs_for_gaps(F, gaps, cfg["mrf.base_days"])
    beta_temp = 0.0 if mode == "s-mrf" else cfg["mrf.beta_temp"]
    return MrfProblem(unary, delta, pairs, cfg["mrf.beta_sp"], beta_temp)


def regularize(prob, dates, cfg, mode, trace=None) -> np.ndarray:
    if mode == "ivm":
        return argmax_labels(prob)
    problem = build_problem(prob, dates, cfg, mode)
    return lbp_layered_sweep(problem, cfg.lbp(), trace=trace).labels


def cmd_regularize(cfg: PipelineConfig, modes=MODES) -> None:
    for run in range(cfg.runs):
        rd = run_dir(cfg, run)
        path = rd / "prob.stmr"
        if not path.is_file():
            raise DataError(f"missing {path}; run classify first")
        prob, dates = read_raster(path), read_dates(path)
        for mode in modes:
            trace: list = []
            labels = regularize(prob, dates, cfg, mode, trace)
            write_raster(rd / f"labels_{mode}.stmr", labels, "u2", dates)
            if mode != "ivm":
                with open(rd / f"lbp_{mode}.log", "w", encoding="utf-8") as fh:
                    fh.write("iter,energy,changed_frac\n")
                    fh.writelines(f"{i},{e:.12g},{c:.6g}\n" for i, e, c in trace)
                energy = total_energy(labels, build_problem(prob, dates, cfg, mode))
                log.info("run %d %s: energy %.6g after %d iterations", run, mode, energy, len(trace))


# ---------------------------------------------------------------------------
# assess


REPORT_COLUMNS = ("date", "method", "metric", "class", "value", "ci", "sd")
BURNT = "burnt_pasture"


def _sampled_error_matrix(mapped, refs, K, where):
    """Error matrix with map-proportion weights restricted to sampled strata.

    A mapped class that no test sample falls into cannot be estimated; its
    weight is dropped and the remaining weights are renormalized.
    """
    e = asm.error_matrix(mapped, refs, K)
    empty = (e.n.sum(axis=1) == 0) & (e.W > 0)
    if empty.any():
        log.info("%s: unsampled strata %s (weight %.4f) dropped", where, np.flatnonzero(empty).tolist(), e.W[empty].sum())
        W = np.where(empty, 0.0, e.W)
        e = asm.ErrorMatrix(e.n, W / W.sum())
    return e


def cmd_assess(cfg: PipelineConfig, modes=MODES) -> None:
    names = cfg.class_set.names
    K = len(names)
    reports: dict[tuple[int, str], list] = {}
    run_rows = []
    dates = None
    agreement = None
    for run in range(cfg.runs):
        rd = run_dir(cfg, run)
        labels = {}
        for mode in modes:
            path = rd / f"labels_{mode}.stmr"
            if not path.is_file():
                raise DataError(f"missing {path}; run regularize first")
            labels[mode] = read_raster(path, squeeze=True).astype(np.int64)
            dates = read_dates(path)
        samples = read_samples_csv(rd / "samples.csv", dates, names)
        for t, d in enumerate(dates):
            s = samples[t]
            te = ~s["train"]
            if not te.any():
                raise DataError(f"run {run}: empty test set at {d}")
            refs = list(zip(s["rows"][te], s["cols"][te], s["labels"][te]))
            for mode in modes:
                e = _sampled_error_matrix(labels[mode][t], refs, K, f"run {run} {d} {mode}")
                asm.write_error_matrix_csv(rd / f"errmat_{mode}_t{t:02d}.csv", e, names)
                rep = asm.area_adjusted_metrics(e)
                reports.setdefault((t, mode), []).append(rep)
                for row in asm.report_rows(rep, names, run=run, date=d.isoformat(), method=mode):
                    run_rows.append(row)
        if run == 0 and "ivm" in modes and "st-mrf" in modes:
            agreement = np.stack([asm.agreement_map(labels["ivm"][t], labels["st-mrf"][t]) for t in range(len(dates))])

    out = cfg.out
    asm.write_rows_csv(out / "report_runs.csv", run_rows, ("run", "date", "method", "metric", "class", "value", "ci"))
    mean_rows, burnt_rows = [], []
    H, W = cfg["scenario.height"], cfg["scenario.width"]
    total_ha = H * W * cfg["scenario.pixel_size_m"] ** 2 / 1e4
    b = names.index(BURNT) if BURNT in names else None
    for t, d in enumerate(dates):
        for mode in modes:
            avg = asm.multi_run_average(reports[(t, mode)])
            absent = [names[k] for k in range(K) if np.isnan(avg.ua[k]) and np.isnan(avg.pa[k])]
            if absent:
                log.info("%s %s: no map pixels or samples for %s", d, mode, ", ".join(absent))
            mean_rows += asm.report_rows(avg, names, date=d.isoformat(), method=mode)
            if b is not None:
                burnt_rows.append(
                    dict(
                        date=d.isoformat(),
                        method=mode,
                        area_ha=total_ha * avg.area_prop[b],
                        ci_ha=total_ha * avg.area_prop_ci[b],
                        sd_ha=total_ha * avg.sd["area_prop"][b],
                    )
                )
    asm.write_rows_csv(out / "report.csv", mean_rows, REPORT_COLUMNS)
    if burnt_rows:
        asm.write_rows_csv(out / "burnt_area.csv", burnt_rows, ("date", "method", "area_ha", "ci_ha", "sd_ha"))
    if agreement is not None:
        write_raster(out / "agreement.stmr", agreement, "u2", dates)


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def mean_oa(path) -> dict[str, dict[str, float]]:
    """``{method: {date: OA}}`` from a report.csv."""
    out: dict[str, dict[str, float]] = {}
    for row in read_report(path):
        if row["metric"] == "oa":
            out.setdefault(row["method"], {})[row["date"]] = float(row["value"])
    return out
