"""Stage wiring for the full bench run.

Every stage reads only artifacts earlier stages wrote to disk and writes its
own under the output directory, so any stage can be re-run standalone and the
human-labelling pause point is an ordinary checkpoint. Reports are
byte-stable for a fixed (config, seed, session labels); wall-clock timings go
to a separate file so they never break that.
"""

import logging
import time
from pathlib import Path

import numpy as np

from .. import weak_classify as wc
from ..eval_metrics import ap_class_agnostic, challenge_iou, iou
from ..features import extract_descriptor, train_feature_head
from ..instantiate import GridParams, extract_instances_full
from ..maskops import centroid
from ..scene_sim import gen_sequence, gt_displacement, noisy_oracle
from ..tubes import Tube, TubeSet, build_tubes, estimate_flow
from . import dataio

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage, last_good, cause):
        self.stage = stage
        self.last_good = last_good
        msg = "stage %r failed: %s" % (stage, cause)
        if last_good:
            msg += " (last good artifact: %s; fix and re-run from this stage)" \
                % last_good
        super().__init__(msg)


def seq_dir(out, s):
    return Path(out) / "sequences" / ("seq_%03d" % s)


def fields_dir(out, s):
    return Path(out) / "fields" / ("seq_%03d" % s)


def instances_dir(out, s):
    return Path(out) / "instances" / ("seq_%03d" % s)


def _load_gt_frame(out, s, t):
    """(instance masks, class ids, track ids) of one simulated frame."""
    label_map = dataio.read_mask_png(seq_dir(out, s) / "gt_masks"
                                     / ("frame_%04d.png" % t))
    meta = dataio.read_jsonl(seq_dir(out, s) / "gt_meta.jsonl")[t]
    assert meta["frame"] == t
    return dataio.label_map_to_masks(label_map), meta["classes"], meta["tracks"]


def _load_pred_frame(out, s, t):
    label_map = dataio.read_mask_png(instances_dir(out, s) / "pred"
                                     / ("frame_%04d.png" % t))
    return dataio.label_map_to_masks(label_map)


# ---------------------------------------------------------------------------
# stages


def stage_simulate(cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_json(out / "config.json", cfg.to_dict())
    for s in range(cfg.n_sequences):
        seq = gen_sequence(cfg.sim, seed=cfg.seed * 1009 + s)
        d = seq_dir(out, s)
        (d / "gt_masks").mkdir(parents=True, exist_ok=True)
        dataio.write_tensor(d / "frames.saft",
                            np.stack(seq.frames).astype(np.uint8))
        if seq.flows:
            flows = np.stack(seq.flows).astype(np.float32)
        else:
            flows = np.zeros((0, cfg.sim.H, cfg.sim.W, 2), dtype=np.float32)
        dataio.write_tensor(d / "flows.saft", flows)
        meta = []
        for t, insts in enumerate(seq.instances):
            label_map = dataio.masks_to_label_map(
                [i.mask for i in insts], (cfg.sim.H, cfg.sim.W))
            dataio.write_mask_png(d / "gt_masks" / ("frame_%04d.png" % t),
                                  label_map)
            meta.append({"frame": t,
                         "classes": [i.class_id for i in insts],
                         "tracks": [i.track_id for i in insts]})
        dataio.write_jsonl(d / "gt_meta.jsonl", meta)
        dataio.write_json(d / "presence.json",
                          {"frame_wise": seq.presence_fw,
                           "sequence_wise": seq.presence_sw,
                           "overlap_frames": seq.overlap_frames})
    return {"n_sequences": cfg.n_sequences, "n_frames": cfg.sim.n_frames}


def stage_fields(cfg, out):
    """Fabricate (or corrupt, or ingest) the displacement field + binary mask
    the instantiation stage will consume."""
    out = Path(out)
    ious = []
    for s in range(cfg.n_sequences):
        d = fields_dir(out, s)
        if cfg.field_source == "external":
            if not (d / "field.saft").exists():
                raise FileNotFoundError(
                    "field_source=external but %s is missing" % (d / "field.saft"))
            continue
        (d / "mask").mkdir(parents=True, exist_ok=True)
        fields = []
        seq_ious = []
        for t in range(cfg.sim.n_frames):
            gt_masks, _, _ = _load_gt_frame(out, s, t)
            gt_bin = np.zeros((cfg.sim.H, cfg.sim.W), dtype=bool)
            for m in gt_masks:
                gt_bin |= m
            field = gt_displacement(gt_masks, gt_bin.shape)
            if cfg.field_source == "noisy_oracle":
                field, mask = noisy_oracle(field, gt_bin, cfg.sigma_px,
                                           cfg.boundary_iters,
                                           seed=[cfg.seed, 101, s, t])
            else:
                mask = gt_bin
            fields.append(field)
            seq_ious.append(iou(mask, gt_bin) if gt_bin.any() or mask.any()
                            else 1.0)
            dataio.write_mask_png(d / "mask" / ("frame_%04d.png" % t),
                                  mask.astype(np.uint8))
        dataio.write_tensor(d / "field.saft", np.stack(fields))
        dataio.write_json(d / "meta.json", {"binary_iou": seq_ious})
        ious.extend(seq_ious)
    return {"binary_iou_mean": float(np.mean(ious)) if ious else 1.0}


def stage_instantiate(cfg, out):
    out = Path(out)
    n_inst = 0
    for s in range(cfg.n_sequences):
        field = dataio.read_tensor(fields_dir(out, s) / "field.saft")
        d = instances_dir(out, s)
        (d / "pred").mkdir(parents=True, exist_ok=True)
        meta = []
        for t in range(cfg.sim.n_frames):
            mask = dataio.read_mask_png(
                fields_dir(out, s) / "mask" / ("frame_%04d.png" % t)) > 0
            masks, positions, scores = extract_instances_full(
                field[t], mask, cfg.grid)
            dataio.write_mask_png(
                d / "pred" / ("frame_%04d.png" % t),
                dataio.masks_to_label_map(masks, mask.shape))
            meta.append({"frame": t,
                         "positions": [[float(x), float(y)]
                                       for x, y in positions],
                         "scores": [float(v) for v in scores]})
            n_inst += len(masks)
        dataio.write_jsonl(d / "meta.jsonl", meta)
    return {"n_instances": n_inst}


def stage_track(cfg, out):
    out = Path(out)
    n_tubes = 0
    for s in range(cfg.n_sequences):
        pred_masks = [_load_pred_frame(out, s, t)
                      for t in range(cfg.sim.n_frames)]
        centroid_seq = [[centroid(m) for m in frame] for frame in pred_masks]
        if cfg.flow_source == "gt":
            flows = list(dataio.read_tensor(seq_dir(out, s) / "flows.saft"))
        else:
            frames = dataio.read_tensor(seq_dir(out, s) / "frames.saft")
            flows = [estimate_flow(frames[t], frames[t + 1])
                     for t in range(cfg.sim.n_frames - 1)]
        tube_set = build_tubes(centroid_seq, flows, cfg.max_dist,
                               mask_seq=pred_masks)
        rows = [{"tube": tube.tube_id, "frame": t, "instance": i}
                for tube in tube_set for t, i in tube.entries]
        dataio.write_jsonl(_tubes_path(out, s), rows)
        n_tubes += len(tube_set)
    return {"n_tubes": n_tubes}


def _tubes_path(out, s):
    d = Path(out) / "tubes"
    d.mkdir(parents=True, exist_ok=True)
    return d / ("seq_%03d.jsonl" % s)


def _load_tubes(out, s):
    """Tube rows of one sequence regrouped into Tube objects."""
    grouped = {}
    for row in dataio.read_jsonl(_tubes_path(out, s)):
        grouped.setdefault(row["tube"], []).append(
            (row["frame"], row["instance"]))
    tubes = []
    for tid in sorted(grouped):
        entries = sorted(grouped[tid])
        tubes.append(Tube(tid, entries))
    return tubes


def stage_features(cfg, out):
    """Per-instance descriptors, the contrastively trained projection head,
    and the resulting embeddings."""
    out = Path(out)
    fdir = out / "features"
    fdir.mkdir(parents=True, exist_ok=True)

    per_seq_X = []
    for s in range(cfg.n_sequences):
        frames = dataio.read_tensor(seq_dir(out, s) / "frames.saft")
        rows = []
        vecs = []
        for t in range(cfg.sim.n_frames):
            for i, m in enumerate(_load_pred_frame(out, s, t)):
                rows.append({"row": len(rows), "frame": t, "instance": i})
                vecs.append(extract_descriptor(frames[t], m))
        X = (np.stack(vecs) if vecs
             else np.zeros((0, 48))).astype(np.float32)
        dataio.write_tensor(fdir / ("descriptors_%03d.saft" % s), X)
        dataio.write_jsonl(fdir / ("rows_%03d.jsonl" % s), rows)
        per_seq_X.append(X.astype(np.float64))

    # Pool sequences for training: shift each sequence's frame indices by a
    # stride > t_far so entries from different sequences never co-occur and
    # always count as far apart, and give tubes globally unique ids.
    stride = cfg.sim.n_frames + cfg.feat.t_far + 1
    X = np.concatenate(per_seq_X, axis=0)
    row_of = {}
    tubes = []
    row_base = 0
    for s in range(cfg.n_sequences):
        rows = dataio.read_jsonl(fdir / ("rows_%03d.jsonl" % s))
        local = {(r["frame"], r["instance"]): row_base + r["row"]
                 for r in rows}
        for tube in _load_tubes(out, s):
            entries = [(t + s * stride, i) for t, i in tube.entries]
            tubes.append(Tube(len(tubes), entries))
            for (gt_, gi), (t, i) in zip(entries, tube.entries):
                row_of[(gt_, gi)] = local[(t, i)]
        row_base += len(rows)

    tube_set = TubeSet(tubes, cfg.n_sequences * stride)
    head, std = train_feature_head(X, tube_set, row_of, cfg.feat)
    dataio.write_json(fdir / "head.json",
                      {"head": head.to_dict(), "standardizer": std.to_dict()})
    for s in range(cfg.n_sequences):
        emb = head.embed(std.transform(per_seq_X[s])) \
            if per_seq_X[s].shape[0] else np.zeros((0, cfg.feat.d_out))
        dataio.write_tensor(fdir / ("embeddings_%03d.saft" % s),
                            emb.astype(np.float32))
    return {"n_rows": int(X.shape[0]), "n_tubes": len(tubes)}


def _load_embeddings(out, cfg):
    """(pooled embeddings, row_map [[seq, row], ...]) in sequence order."""
    fdir = Path(out) / "features"
    mats = []
    row_map = []
    for s in range(cfg.n_sequences):
        e = dataio.read_tensor(fdir / ("embeddings_%03d.saft" % s))
        mats.append(e.astype(np.float64))
        row_map.extend([[s, r] for r in range(e.shape[0])])
    return np.concatenate(mats, axis=0), row_map


def render_prototype_card(frame, mask):
    """Overlay an instance on its frame: highlight tint plus bounding box."""
    img = (frame * 0.55).astype(np.uint8)
    hi = np.array([255, 220, 40], dtype=np.float64)
    img[mask] = (0.5 * frame[mask] + 0.5 * hi).astype(np.uint8)
    ys, xs = np.nonzero(mask)
    y0 = max(int(ys.min()) - 2, 0)
    y1 = min(int(ys.max()) + 2, mask.shape[0] - 1)
    x0 = max(int(xs.min()) - 2, 0)
    x1 = min(int(xs.max()) + 2, mask.shape[1] - 1)
    box = np.array([255, 245, 90], dtype=np.uint8)
    img[y0, x0:x1 + 1] = box
    img[y1, x0:x1 + 1] = box
    img[y0:y1 + 1, x0] = box
    img[y0:y1 + 1, x1] = box
    return img


def stage_prototypes(cfg, out):
    out = Path(out)
    pdir = out / "prototypes"
    pdir.mkdir(parents=True, exist_ok=True)
    E, row_map = _load_embeddings(out, cfg)
    model = wc.kmeans_pp(E, cfg.n_km, seed=cfg.seed)
    protos = wc.select_prototypes(model, E)

    fdir = out / "features"
    entries = []
    for cid, grow in protos:
        s, r = row_map[grow]
        row = dataio.read_jsonl(fdir / ("rows_%03d.jsonl" % s))[r]
        assert row["row"] == r
        entries.append({"cluster_id": cid, "sequence_index": s,
                        "frame_index": row["frame"],
                        "instance_index": row["instance"]})

    if cfg.label_mode == "auto":
        pred_masks = []
        gt_lists = []
        for e in entries:
            s, t, i = e["sequence_index"], e["frame_index"], e["instance_index"]
            pred_masks.append(_load_pred_frame(out, s, t)[i])
            gts, classes, _ = _load_gt_frame(out, s, t)
            gt_lists.append(list(zip(gts, classes)))
        labels = wc.auto_label_prototypes(pred_masks, gt_lists)
    else:
        labels = _carry_over_labels(pdir / "session.jsonl", entries)

    session = [dict(e, label=lab) for e, lab in zip(entries, labels)]
    dataio.write_json(pdir / "clusters.json",
                      {"model": model.to_dict(), "row_map": row_map})
    dataio.write_jsonl(pdir / "session.jsonl", session)

    for e in session:
        s, t, i = e["sequence_index"], e["frame_index"], e["instance_index"]
        frames = dataio.read_tensor(seq_dir(out, s) / "frames.saft")
        card = render_prototype_card(frames[t], _load_pred_frame(out, s, t)[i])
        dataio.write_image_png(pdir / ("proto_%02d.png" % e["cluster_id"]),
                               card)
    return {"labels": labels}


def _carry_over_labels(session_path, entries):
    """Keep human labels across re-runs when the prototypes are unchanged."""
    labels = [None] * len(entries)
    if not session_path.exists():
        return labels
    old = {}
    for row in dataio.read_jsonl(session_path):
        key = (row["cluster_id"], row["sequence_index"],
               row["frame_index"], row["instance_index"])
        old[key] = row["label"]
    for k, e in enumerate(entries):
        key = (e["cluster_id"], e["sequence_index"],
               e["frame_index"], e["instance_index"])
        if key in old:
            labels[k] = old[key]
    return labels


def stage_teach(cfg, out):
    out = Path(out)
    session = dataio.read_jsonl(out / "prototypes" / "session.jsonl")
    missing = sum(1 for row in session if row["label"] is None)
    if cfg.label_mode == "human" and missing:
        raise RuntimeError(
            "labelling session incomplete (%d of %d prototypes unlabelled); "
            "run `saflab serve-labels` first" % (missing, len(session)))
    clusters = dataio.read_json(out / "prototypes" / "clusters.json")
    model = wc.ClusterModel.from_dict(clusters["model"])
    E, _ = _load_embeddings(out, cfg)
    cluster_labels = {row["cluster_id"]: row["label"] for row in session}
    row_labels = wc.propagate_labels(model, cluster_labels)
    teacher = wc.train_teacher(E, row_labels, cfg.sim.n_classes, cfg.cls)
    dataio.write_json(out / "teacher.json", teacher.to_dict())
    return {"n_labelled_rows": int((row_labels >= 0).sum())}


def _rows_by_frame(out, s):
    grouped = {}
    rows = dataio.read_jsonl(Path(out) / "features" / ("rows_%03d.jsonl" % s))
    for r in rows:
        grouped.setdefault(r["frame"], []).append(r["row"])
    return grouped


def stage_match(cfg, out):
    out = Path(out)
    teacher = wc.ClassifierMLP.from_dict(dataio.read_json(out / "teacher.json"))
    mdir = out / "matched"
    mdir.mkdir(parents=True, exist_ok=True)
    n_matched = 0
    for s in range(cfg.n_sequences):
        presence = dataio.read_json(seq_dir(out, s) / "presence.json")
        emb = dataio.read_tensor(out / "features"
                                 / ("embeddings_%03d.saft" % s)).astype(np.float64)
        by_frame = _rows_by_frame(out, s)
        rows = []
        for t in range(cfg.sim.n_frames):
            weak = (presence["frame_wise"][t] if cfg.weak_mode == "frame_wise"
                    else presence["sequence_wise"])
            inst_rows = by_frame.get(t, [])
            if not inst_rows or not weak:
                rows.append({"frame": t, "labels": None})
                continue
            probs = teacher.predict_proba(emb[inst_rows])
            labels = wc.match_weak_labels(probs, set(weak))
            rows.append({"frame": t, "labels": list(labels)})
            n_matched += len(labels)
        dataio.write_jsonl(mdir / ("seq_%03d.jsonl" % s), rows)
    return {"n_matched": n_matched}


def stage_student(cfg, out):
    out = Path(out)
    xs = []
    ys = []
    for s in range(cfg.n_sequences):
        emb = dataio.read_tensor(out / "features"
                                 / ("embeddings_%03d.saft" % s)).astype(np.float64)
        by_frame = _rows_by_frame(out, s)
        for row in dataio.read_jsonl(out / "matched" / ("seq_%03d.jsonl" % s)):
            if row["labels"] is None:
                continue
            xs.append(emb[by_frame[row["frame"]]])
            ys.extend(row["labels"])
    if not xs:
        raise RuntimeError("no matched frames to train the student on")
    X = np.concatenate(xs, axis=0)
    y = np.asarray(ys, dtype=np.int64)
    student = wc.ClassifierMLP(X.shape[1], cfg.sim.n_classes,
                               cfg.cls.d_hidden, seed=cfg.cls.seed)
    student.train(X, y, cfg.cls)
    dataio.write_json(out / "student.json", student.to_dict())
    return {"n_training_rows": int(X.shape[0])}


def _semantic_from_classifier(cfg, out, s, model):
    emb = dataio.read_tensor(Path(out) / "features"
                             / ("embeddings_%03d.saft" % s)).astype(np.float64)
    by_frame = _rows_by_frame(out, s)
    maps = []
    for t in range(cfg.sim.n_frames):
        sem = np.zeros((cfg.sim.H, cfg.sim.W), dtype=np.int64)
        masks = _load_pred_frame(out, s, t)
        inst_rows = by_frame.get(t, [])
        if inst_rows:
            pred = model.predict_proba(emb[inst_rows]).argmax(axis=1)
            for m, cls in zip(masks, pred):
                sem[m] = int(cls) + 1
        maps.append(sem)
    return maps


def tube_purity(out, cfg):
    """Fraction of tube entries whose GT track matches their tube's majority
    track; an entry overlapping no GT instance counts against purity."""
    total = 0
    agree = 0
    for s in range(cfg.n_sequences):
        track_of = {}
        for t in range(cfg.sim.n_frames):
            gts, _, tracks = _load_gt_frame(out, s, t)
            preds = _load_pred_frame(out, s, t)
            for i, pm in enumerate(preds):
                best = 0.0
                best_track = -1
                for gm, track in zip(gts, tracks):
                    v = iou(pm, gm)
                    if v > best:
                        best = v
                        best_track = track
                track_of[(t, i)] = best_track
        for tube in _load_tubes(out, s):
            tracks = [track_of[e] for e in tube.entries]
            vals, counts = np.unique(tracks, return_counts=True)
            # unmatched entries (-1) never count as agreeing, even when they
            # form the majority
            best = 0
            for v, c in zip(vals, counts):
                if v != -1:
                    best = max(best, int(c))
            agree += best
            total += len(tracks)
    return agree / total if total else 1.0


def stage_eval(cfg, out):
    out = Path(out)
    predictions = []
    gt_masks = []
    gt_sems = []
    for s in range(cfg.n_sequences):
        meta = dataio.read_jsonl(instances_dir(out, s) / "meta.jsonl")
        for t in range(cfg.sim.n_frames):
            preds = _load_pred_frame(out, s, t)
            scores = meta[t]["scores"]
            predictions.append(list(zip(preds, scores)))
            gts, classes, _ = _load_gt_frame(out, s, t)
            gt_masks.append(gts)
            sem = np.zeros((cfg.sim.H, cfg.sim.W), dtype=np.int64)
            for m, c in zip(gts, classes):
                sem[m] = c + 1
            gt_sems.append(sem)

    teacher = wc.ClassifierMLP.from_dict(dataio.read_json(out / "teacher.json"))
    student = wc.ClassifierMLP.from_dict(dataio.read_json(out / "student.json"))
    teacher_sems = []
    student_sems = []
    for s in range(cfg.n_sequences):
        teacher_sems.extend(_semantic_from_classifier(cfg, out, s, teacher))
        student_sems.extend(_semantic_from_classifier(cfg, out, s, student))

    binary_iou = []
    for s in range(cfg.n_sequences):
        binary_iou.extend(dataio.read_json(fields_dir(out, s)
                                           / "meta.json")["binary_iou"])

    metrics = {
        "ap50": ap_class_agnostic(predictions, gt_masks, 0.5),
        "ap70": ap_class_agnostic(predictions, gt_masks, 0.7),
        "binary_iou_mean": float(np.mean(binary_iou)),
        "teacher_challenge_iou": challenge_iou(teacher_sems, gt_sems),
        "student_challenge_iou": challenge_iou(student_sems, gt_sems),
        "tube_purity": tube_purity(out, cfg),
    }
    report = {"config": cfg.to_dict(), "metrics": metrics}
    dataio.write_json(out / "report.json", report)
    return metrics


STAGES = [
    ("simulate", stage_simulate),
    ("fields", stage_fields),
    ("instantiate", stage_instantiate),
    ("track", stage_track),
    ("features", stage_features),
    ("prototypes", stage_prototypes),
    ("teach", stage_teach),
    ("match", stage_match),
    ("student", stage_student),
    ("eval", stage_eval),
]


def run_pipeline(cfg, out):
    """All stages in order; timings land in timings.json, metrics in
    report.json. Raises StageError naming the failed stage and the last
    artifact that is still good."""
    cfg.validate()
    out = Path(out)
    timings = {}
    last_good = None
    result = None
    for name, fn in STAGES:
        t0 = time.monotonic()
        try:
            result = fn(cfg, out)
        except Exception as exc:
            raise StageError(name, last_good, exc) from exc
        timings[name] = time.monotonic() - t0
        last_good = "%s (stage %s)" % (out, name)
        log.info("stage %s done in %.2fs", name, timings[name])
    dataio.write_json(out / "timings.json", timings)
    return result


def run_sweep(cfg, out, grids, eps_list):
    """AP@0.5 for every (grid resolution, eps_c) cell over the configured
    field source. Simulation and fields are reused when already on disk."""
    cfg.validate()
    out = Path(out)
    if not seq_dir(out, 0).exists():
        stage_simulate(cfg, out)
    if not (fields_dir(out, 0) / "field.saft").exists():
        stage_fields(cfg, out)

    gt_cache = []
    field_cache = []
    for s in range(cfg.n_sequences):
        field = dataio.read_tensor(fields_dir(out, s) / "field.saft")
        for t in range(cfg.sim.n_frames):
            mask = dataio.read_mask_png(
                fields_dir(out, s) / "mask" / ("frame_%04d.png" % t)) > 0
            gts, _, _ = _load_gt_frame(out, s, t)
            gt_cache.append(gts)
            field_cache.append((field[t], mask))

    table = []
    for g in grids:
        for e in eps_list:
            params = GridParams(grid_squares_per_side=g, eps_c=e)
            predictions = []
            for field, mask in field_cache:
                masks, _, scores = extract_instances_full(field, mask, params)
                predictions.append(list(zip(masks, scores)))
            ap = ap_class_agnostic(predictions, gt_cache, 0.5)
            table.append({"grid": g, "eps_c": e, "ap50": ap})
    dataio.write_json(out / "sweep.json", {"cells": table})
    return table
