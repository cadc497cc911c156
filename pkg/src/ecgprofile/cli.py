"""Command-line pipeline: synth, preprocess, build-cohort, train, finetune,
evaluate, survival, comorbidity.

Every command works inside a run directory (``--run-dir``, or a new
timestamped directory under ``--out``) and finds upstream artifacts there
unless a path is configured explicitly.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import cohort as C
from . import comorbidity as CM
from . import metrics as M
from . import survival as SV
from .config import ConfigError, load_config, model_config, preprocess_config, train_config
from .nnet import finetune as nn_finetune
from .nnet import load_checkpoint, predict_proba, save_checkpoint, train as nn_train
from .records import (RecordFormatError, read_csv_record, read_record, read_segment, to_iso,
                      write_record, write_segment)
from .signal_pre import SignalError, preprocess_record

log = logging.getLogger("ecgprofile")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2


class UserError(Exception):
    """Bad configuration or missing input; exit code 2."""


# --- run directory / metadata ---------------------------------------------

def resolve_run_dir(args) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    stamp = datetime.now(timezone.utc).strftime("run-%Y%m%d-%H%M%S")
    base = Path(args.out)
    path, k = base / stamp, 1
    while path.exists():
        path, k = base / f"{stamp}-{k}", k + 1
    return path


def write_metadata(stage_dir: Path, command: str, cfg: dict, started: float, extra=None):
    import scipy
    meta = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg,
        "seed": cfg["seed"],
        "versions": {"ecgprofile": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "started_at": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        meta.update(extra)
    (stage_dir / "run_metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def need(path, what: str) -> Path:
    if path is None:
        raise UserError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UserError(f"missing {what}: {p}")
    return p


def _path(cfg, key, default: Path) -> Path:
    return Path(cfg["paths"][key]) if cfg["paths"].get(key) else default


# --- synth -----------------------------------------------------------------

def cmd_synth(cfg, run_dir: Path, workers: int):
    from .testkit import PlantedCohortSpec, SurvivalSpec, gen_cohort
    s = cfg["synth"]
    spec = PlantedCohortSpec(
        n=s["n"], labels=s["labels"], effects=s["effects"], prevalence=s["prevalence"],
        survival=SurvivalSpec(s["baseline_hazard"], s["hr_per_sd"], s["horizon_years"]),
        duration_s=s["duration_s"], fs=s["fs"], seed=cfg["seed"])
    out = run_dir / "synth"
    rec_dir = out / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    cohort = gen_cohort(spec)
    rng = np.random.default_rng(cfg["seed"] + 1)
    day = 86400.0
    with (out / "ecg_index.csv").open("w", newline="") as fi, \
            (out / "discharges.csv").open("w", newline="") as fd:
        wi = csv.writer(fi, lineterminator="\n")
        wd = csv.writer(fd, lineterminator="\n")
        wi.writerow(["record_id", "patient_id", "acquired_at", "path"])
        wd.writerow(["patient_id", "admit_at", "discharge_at", "codes"])
        for rec, bits in zip(cohort.records, cohort.labels):
            hdr = write_record(rec, rec_dir)
            wi.writerow([rec.record_id, rec.patient_id, to_iso(rec.acquired_at), hdr.name])
            admit = rec.acquired_at - rng.uniform(0.1, 2.0) * day
            discharge = rec.acquired_at + rng.uniform(0.1, 3.0) * day
            # disease-free stays carry a general-examination code so they stay in the cohort
            codes = [c for c, b in zip(cohort.label_codes, bits) if b] or ["Z00"]
            # vary the raw formatting the cohort builder has to normalise
            raw = [c.lower() if rng.uniform() < 0.3 else c for c in codes]
            wd.writerow([rec.patient_id, to_iso(admit), to_iso(discharge), ";".join(raw)])
    with (out / "outcomes.csv").open("w", newline="") as fo:
        w = csv.writer(fo, lineterminator="\n")
        w.writerow(["subject_id", "code", "event_time_years", "event_flag"])
        for row in cohort.outcomes:
            w.writerow([row["subject_id"], row["code"], f"{row['event_time_years']:.6f}", row["event_flag"]])
    with (out / "label_names.tsv").open("w", newline="") as fn:
        for code, name in sorted(s["names"].items()):
            fn.write(f"{code}\t{name}\n")
    log.info("synthesised %d records into %s", len(cohort.records), out)
    return out, {"n_records": len(cohort.records)}


# --- preprocess ------------------------------------------------------------

def _hash_inputs(paths, cfg_blob: bytes) -> str:
    h = hashlib.sha256(cfg_blob)
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _discover(records_dir: Path):
    headers = sorted(records_dir.glob("*.json"))
    csvs = sorted(records_dir.glob("*.csv"))
    return headers, csvs


def _preprocess_one(job):
    src, kind, csv_fs, pcfg_dict, seg_dir = job
    from .signal_pre import PreprocessConfig
    pcfg = PreprocessConfig(**pcfg_dict)
    try:
        if kind == "json":
            rec = read_record(src)
        else:
            rec = read_csv_record(src, csv_fs)
        segs = preprocess_record(rec, pcfg)
    except (SignalError, RecordFormatError, KeyError, ValueError) as exc:
        return {"source": str(src), "error": str(exc)}
    files = [write_segment(s, pcfg.target_fs, seg_dir).name for s in segs]
    return {"source": str(src), "record_id": rec.record_id, "patient_id": rec.patient_id,
            "acquired_at": to_iso(rec.acquired_at), "n_segments": len(segs), "segments": files}


def cmd_preprocess(cfg, run_dir: Path, workers: int):
    records_dir = need(_path(cfg, "records", run_dir / "synth" / "records"), "records directory")
    pcfg = preprocess_config(cfg)
    out = run_dir / "preprocess"
    seg_dir = out / "segments"
    seg_dir.mkdir(parents=True, exist_ok=True)
    headers, csvs = _discover(records_dir)
    if csvs and cfg["csv_fs"] is None:
        raise UserError("CSV records found: set csv_fs (or --csv-fs) to their sampling rate")
    cfg_blob = json.dumps(cfg["preprocess"], sort_keys=True).encode()

    previous = {}
    manifest_path = out / "manifest.csv"
    if manifest_path.exists():
        with manifest_path.open(newline="") as fh:
            previous = {r["source"]: r for r in csv.DictReader(fh)}

    rows, rejects, jobs = {}, [], []
    for src, kind in [(h, "json") for h in headers] + [(c, "csv") for c in csvs]:
        deps = [src]
        if kind == "json":
            try:
                dat = json.loads(src.read_text()).get("samples_file")
            except (json.JSONDecodeError, OSError, AttributeError):
                dat = None
            if dat and (src.parent / dat).exists():
                deps.append(src.parent / dat)
        digest = _hash_inputs(deps, cfg_blob)
        prev = previous.get(src.name)
        if prev and prev["sha256"] == digest and all(
                (seg_dir / f).exists() for f in prev["segments"].split(";") if f):
            rows[src.name] = prev
            continue
        jobs.append(((src, kind, cfg["csv_fs"], cfg["preprocess"], seg_dir), src.name, digest))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_preprocess_one, [j[0] for j in jobs], chunksize=8))
    else:
        results = [_preprocess_one(j[0]) for j in jobs]
    written = 0
    for (_, name, digest), res in zip(jobs, results):
        if "error" in res:
            rejects.append({"source": name, "reason": res["error"]})
            continue
        written += res["n_segments"]
        rows[name] = {"source": name, "record_id": res["record_id"], "patient_id": res["patient_id"],
                      "acquired_at": res["acquired_at"], "n_segments": res["n_segments"],
                      "segments": ";".join(res["segments"]), "sha256": digest}

    fields = ["source", "record_id", "patient_id", "acquired_at", "n_segments", "segments", "sha256"]
    with manifest_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for name in sorted(rows):
            w.writerow({k: rows[name][k] for k in fields})
    with (out / "rejects.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["source", "reason"], lineterminator="\n")
        w.writeheader()
        w.writerows(sorted(rejects, key=lambda r: r["source"]))
    log.info("preprocess: %d records, %d segments written, %d rejected", len(rows), written, len(rejects))
    return out, {"segments_written": written, "n_records": len(rows), "n_rejected": len(rejects)}


# --- build-cohort ----------------------------------------------------------

def cmd_build_cohort(cfg, run_dir: Path, workers: int):
    synth = run_dir / "synth"
    index_path = need(_path(cfg, "ecg_index", synth / "ecg_index.csv"), "ECG index CSV")
    dis_path = need(_path(cfg, "discharges", synth / "discharges.csv"), "discharges CSV")
    names_path = _path(cfg, "names", synth / "label_names.tsv")
    c = cfg["cohort"]
    names = C.read_names(names_path) if names_path.exists() else {}
    try:
        discharges = C.read_discharges(dis_path)
    except C.CohortError as exc:
        raise UserError(f"{dis_path}: {exc}") from exc
    index = C.read_ecg_index(index_path)
    observed = [code for ev in discharges for code in ev.codes]
    try:
        space = C.build_label_space(observed, names, c["min_count"])
    except C.CohortError as exc:
        raise UserError(str(exc)) from exc
    entries = C.align_ecg_to_discharges(
        [(r["record_id"], r["patient_id"], r["acquired_at"]) for r in index], discharges, space,
        policy=c["policy"], window=c["window_days"] * 86400.0, one_per_stay=c["one_per_stay"])
    # label-space counts are recomputed over the aligned cohort
    space.counts = [int(sum(e.labels[i] for e in entries)) for i in range(len(space))]
    out = run_dir / "cohort"
    out.mkdir(parents=True, exist_ok=True)
    C.write_manifest(entries, out / "cohort_manifest.csv")
    space.write_tsv(out / "label_space.tsv")
    chapters = C.group_by_chapter(space)
    (out / "chapters.json").write_text(json.dumps(chapters, indent=1, sort_keys=True))
    log.info("cohort: %d entries over %d labels", len(entries), len(space))
    return out, {"n_entries": len(entries), "n_labels": len(space)}


# --- datasets --------------------------------------------------------------

def load_dataset(run_dir: Path):
    """Segments joined to cohort labels: (x, y, record_ids, patient_ids, space)."""
    seg_manifest = need(run_dir / "preprocess" / "manifest.csv", "preprocess manifest")
    cohort_manifest = need(run_dir / "cohort" / "cohort_manifest.csv", "cohort manifest")
    space = C.LabelSpace.read_tsv(need(run_dir / "cohort" / "label_space.tsv", "label space"))
    entries = {e.record_id: e for e in C.read_manifest(cohort_manifest, len(space))}
    seg_dir = run_dir / "preprocess" / "segments"
    xs, ys, rids, pids = [], [], [], []
    with seg_manifest.open(newline="") as fh:
        for row in sorted(csv.DictReader(fh), key=lambda r: r["record_id"]):
            e = entries.get(row["record_id"])
            if e is None:
                continue
            for f in filter(None, row["segments"].split(";")):
                xs.append(read_segment(seg_dir / f).data.astype(np.float32))
                ys.append(e.labels.astype(np.float32))
                rids.append(e.record_id)
                pids.append(e.patient_id)
    if not xs:
        raise UserError("no cohort records have preprocessed segments")
    return np.stack(xs), np.stack(ys), rids, pids, space


def split_patients(pids, val: float, test: float, seed: int) -> np.ndarray:
    uniq = sorted(set(pids))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(uniq))
    n_test = max(1, int(round(test * len(uniq))))
    n_val = max(1, int(round(val * len(uniq))))
    tag = {}
    for rank, i in enumerate(perm):
        tag[uniq[i]] = "test" if rank < n_test else ("val" if rank < n_test + n_val else "train")
    return np.array([tag[p] for p in pids])


def _splits(cfg, pids, stage_dir: Path, rids):
    splits = split_patients(pids, cfg["split"]["val"], cfg["split"]["test"], cfg["seed"])
    with (stage_dir / "splits.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "patient_id", "split"])
        seen = set()
        for r, p, s in zip(rids, pids, splits):
            if r not in seen:
                seen.add(r)
                w.writerow([r, p, s])
    return splits


def _fit(cfg, run_dir, stage, init_from=None):
    from .plotting import plot_history
    x, y, rids, pids, space = load_dataset(run_dir)
    out = run_dir / stage
    out.mkdir(parents=True, exist_ok=True)
    splits = _splits(cfg, pids, out, rids)
    tr, va = splits == "train", splits == "val"
    if init_from is not None:
        init = nn_finetune(init_from, len(space), seed=cfg["seed"])
        if init.config.n_leads != x.shape[1]:
            raise UserError(f"pretrained model expects {init.config.n_leads} leads, data has {x.shape[1]}")
        mp, hist = nn_train((x[tr], y[tr]), (x[va], y[va]), None, train_config(cfg), init=init)
    else:
        mcfg = model_config(cfg, x.shape[1], len(space))
        mp, hist = nn_train((x[tr], y[tr]), (x[va], y[va]), mcfg, train_config(cfg))
    save_checkpoint(mp, out / "checkpoint.ckpt")
    hist.write_csv(out / "history.csv")
    if hist.rows:
        plot_history(hist.rows, out / "history.png")
    return out, {"best_epoch": hist.best_epoch, "stopped": hist.stopped,
                 "n_train": int(tr.sum()), "n_val": int(va.sum())}


def cmd_train(cfg, run_dir, workers):
    return _fit(cfg, run_dir, "train")


def cmd_finetune(cfg, run_dir, workers):
    pre = need(cfg["paths"]["pretrained"], "pretrained checkpoint (paths.pretrained / --pretrained)")
    return _fit(cfg, run_dir, "finetune", init_from=load_checkpoint(pre))


# --- evaluate --------------------------------------------------------------

def cmd_evaluate(cfg, run_dir, workers):
    ckpt = _path(cfg, "checkpoint", run_dir / "train" / "checkpoint.ckpt")
    if not cfg["paths"]["checkpoint"] and not ckpt.exists() and (run_dir / "finetune" / "checkpoint.ckpt").exists():
        ckpt = run_dir / "finetune" / "checkpoint.ckpt"
    ckpt = need(ckpt, "model checkpoint")
    mp = load_checkpoint(ckpt)
    x, y, rids, pids, space = load_dataset(run_dir)
    if mp.config.head_dim != len(space):
        raise UserError(f"checkpoint head has {mp.config.head_dim} outputs, label space has {len(space)}")
    splits_path = need(ckpt.parent / "splits.csv", "splits CSV next to the checkpoint")
    with splits_path.open(newline="") as fh:
        split_of = {r["record_id"]: r["split"] for r in csv.DictReader(fh)}
    splits = np.array([split_of.get(r, "unused") for r in rids])
    va, te = splits == "val", splits == "test"
    if not te.any():
        raise UserError("test split is empty")
    p = predict_proba(mp, x)
    ev = cfg["evaluate"]
    rows = []
    for k, (code, name) in enumerate(zip(space.codes, space.names)):
        yv, yt = y[va, k], y[te, k]
        if yv.any() and not yv.all():
            thr = M.youden_threshold(p[va, k], yv)
        else:
            thr = 0.5
        rows.append(M.label_report(k, code.canonical, name, p[te, k], yt, thr,
                                   ev["n_resamples"], seed=cfg["seed"] + k))
    out = run_dir / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    M.write_report_csv(rows, out / "label_report.csv")
    ids, agg = CM.aggregate_per_subject([pids[i] for i in np.flatnonzero(te)], p[te], ev["aggregate"])
    CM.RiskMatrix(ids, [c.canonical for c in space.codes], agg).write_csv(out / "risk_scores.csv")
    return out, {"checkpoint": str(ckpt), "n_test_segments": int(te.sum())}


# --- survival --------------------------------------------------------------

def cmd_survival(cfg, run_dir, workers):
    from .plotting import plot_survival
    risk = CM.RiskMatrix.read_csv(need(_path(cfg, "risk_matrix", run_dir / "evaluate" / "risk_scores.csv"),
                                       "risk-score matrix"))
    outcomes_raw = SV.read_outcomes(need(_path(cfg, "outcomes", run_dir / "synth" / "outcomes.csv"),
                                         "outcomes CSV"))
    outcomes = {C.normalize_icd(k).canonical: v for k, v in outcomes_raw.items()}
    horizon = cfg["survival"]["horizon_years"]
    out = run_dir / "survival"
    (out / "curves").mkdir(parents=True, exist_ok=True)
    reports = []
    for code in risk.codes:
        table = outcomes.get(code)
        if not table:
            continue
        idx = [i for i, s in enumerate(risk.subject_ids) if s in table]
        if len(idx) < 3:
            continue
        tt = np.array([table[risk.subject_ids[i]][0] for i in idx])
        ee = np.array([table[risk.subject_ids[i]][1] for i in idx]).astype(bool)
        prevalent = ee & (tt <= 0)
        scores = risk.scores[idx, risk.codes.index(code)]
        try:
            rep = SV.survival_report(code, scores, tt, ee, prevalent, horizon)
        except SV.SurvivalError as exc:
            log.warning("survival %s skipped: %s", code, exc)
            continue
        reports.append(rep)
        for g, curve in rep.curves.items():
            SV.write_curve_csv(curve, out / "curves" / f"{code}_{g}.csv")
        plot_survival(rep, out / f"km_{code}.png", horizon)
    SV.write_survival_csv(reports, out / "survival_report.csv")
    for r in reports:
        log.info("%s", r.summary)
    return out, {"n_diseases": len(reports)}


# --- comorbidity -----------------------------------------------------------

def cmd_comorbidity(cfg, run_dir, workers):
    from .plotting import plot_heatmap, plot_network, plot_scatter
    risk = CM.RiskMatrix.read_csv(need(_path(cfg, "risk_matrix", run_dir / "evaluate" / "risk_scores.csv"),
                                       "risk-score matrix"))
    c = cfg["comorbidity"]
    pairs = [tuple(p) for p in c["pairs"]]
    for a, b in pairs:
        for code in (a, b):
            if code not in risk.codes:
                raise UserError(f"unknown disease code {code!r} in comorbidity.pairs")
    out = run_dir / "comorbidity"
    rho = CM.spearman_matrix(risk)
    mi = CM.mi_matrix(risk, c["n_bins"])
    net = CM.build_network(risk, c["n_bins"], c["mi_floor"], rho=rho, mi=mi)
    files = CM.export_figures(risk, rho, net, out, pairs)
    with (out / "mi_matrix.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + risk.codes)
        for code, row in zip(risk.codes, mi):
            w.writerow([code] + [f"{v:.6g}" for v in row])
    plot_heatmap(rho, risk.codes, out / "spearman_heatmap.png")
    plot_network(net, out / "chord.png")
    for a, b in pairs:
        plot_scatter(risk.column(a), risk.column(b), a, b, rho[risk.codes.index(a), risk.codes.index(b)],
                     out / f"scatter_{a}_{b}.png")
    return out, {"n_edges": len(net.edges), "files": sorted(p.name for p in files.values())}


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "build-cohort": cmd_build_cohort,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "survival": cmd_survival,
    "comorbidity": cmd_comorbidity,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default="runs", help="base directory for timestamped runs")
    common.add_argument("--run-dir", help="use this run directory instead of a new timestamped one")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-reproducible output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ecgprofile", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "preprocess":
            p.add_argument("--records", help="directory of record headers or CSV files")
            p.add_argument("--csv-fs", type=float, help="sampling rate of CSV records")
        if name == "build-cohort":
            p.add_argument("--ecg-index")
            p.add_argument("--discharges")
            p.add_argument("--names", help="two-column TSV of code and name")
            p.add_argument("--min-count", type=int)
            p.add_argument("--policy", choices=["in-stay", "window"])
            p.add_argument("--one-per-stay", action="store_true", default=None)
        if name in ("train", "finetune"):
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int)
        if name == "finetune":
            p.add_argument("--pretrained", help="checkpoint to take the backbone from")
        if name == "evaluate":
            p.add_argument("--checkpoint")
        if name in ("survival", "comorbidity"):
            p.add_argument("--risk-matrix")
        if name == "survival":
            p.add_argument("--outcomes")
        if name == "synth":
            p.add_argument("--n", type=int)
    return parser


def overrides_from_args(args) -> dict:
    o: dict = {}
    get = lambda k: getattr(args, k, None)
    if args.seed is not None:
        o["seed"] = args.seed
    paths = {k: get(a) for k, a in [("records", "records"), ("ecg_index", "ecg_index"),
                                     ("discharges", "discharges"), ("names", "names"),
                                     ("pretrained", "pretrained"), ("checkpoint", "checkpoint"),
                                     ("risk_matrix", "risk_matrix"), ("outcomes", "outcomes")]}
    paths = {k: v for k, v in paths.items() if v is not None}
    if paths:
        o["paths"] = paths
    if get("csv_fs") is not None:
        o["csv_fs"] = args.csv_fs
    coh = {k: get(a) for k, a in [("min_count", "min_count"), ("policy", "policy"),
                                  ("one_per_stay", "one_per_stay")]}
    coh = {k: v for k, v in coh.items() if v is not None}
    if coh:
        o["cohort"] = coh
    tr = {k: get(a) for k, a in [("epochs", "epochs"), ("batch_size", "batch_size")]}
    tr = {k: v for k, v in tr.items() if v is not None}
    if tr:
        o["train"] = tr
    if get("n") is not None:
        o["synth"] = {"n": args.n}
    return o


@contextlib.contextmanager
def _numerics(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = load_config(args.config, overrides_from_args(args))
        if args.workers < 1:
            raise UserError("--workers must be >= 1")
        workers = 1 if args.deterministic else args.workers
        run_dir = resolve_run_dir(args)
        _check_inputs(args.command, cfg, run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with _numerics(args.deterministic):
            stage_dir, extra = COMMANDS[args.command](cfg, run_dir, workers)
        write_metadata(stage_dir, args.command, cfg, started,
                       dict(extra, run_dir=str(run_dir), deterministic=args.deterministic))
        print(stage_dir)
        return EXIT_OK
    except (UserError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def _check_inputs(command: str, cfg: dict, run_dir: Path):
    """Fail with a named file before anything is written."""
    synth = run_dir / "synth"
    checks = {
        "preprocess": [(_path(cfg, "records", synth / "records"), "records directory")],
        "build-cohort": [(_path(cfg, "ecg_index", synth / "ecg_index.csv"), "ECG index CSV"),
                         (_path(cfg, "discharges", synth / "discharges.csv"), "discharges CSV")],
        "train": [(run_dir / "preprocess" / "manifest.csv", "preprocess manifest"),
                  (run_dir / "cohort" / "cohort_manifest.csv", "cohort manifest")],
        "finetune": [(cfg["paths"]["pretrained"], "pretrained checkpoint (paths.pretrained / --pretrained)"),
                     (run_dir / "preprocess" / "manifest.csv", "preprocess manifest"),
                     (run_dir / "cohort" / "cohort_manifest.csv", "cohort manifest")],
        "evaluate": [(_eval_ckpt(cfg, run_dir), "model checkpoint")],
        "survival": [(_path(cfg, "risk_matrix", run_dir / "evaluate" / "risk_scores.csv"), "risk-score matrix"),
                     (_path(cfg, "outcomes", synth / "outcomes.csv"), "outcomes CSV")],
        "comorbidity": [(_path(cfg, "risk_matrix", run_dir / "evaluate" / "risk_scores.csv"),
                         "risk-score matrix")],
    }
    for path, what in checks.get(command, []):
        need(path, what)


def _eval_ckpt(cfg, run_dir: Path) -> Path:
    if cfg["paths"]["checkpoint"]:
        return Path(cfg["paths"]["checkpoint"])
    for stage in ("train", "finetune"):
        p = run_dir / stage / "checkpoint.ckpt"
        if p.exists():
            return p
    return run_dir / "train" / "checkpoint.ckpt"


if __name__ == "__main__":
    sys.exit(main())
