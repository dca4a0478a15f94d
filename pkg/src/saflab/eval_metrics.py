"""Evaluation metrics: binary IoU, class-agnostic average precision at an IoU
threshold, and the per-frame class-averaged semantic IoU used for challenge
style reporting."""

import numpy as np


def iou(mask_a, mask_b):
    """Intersection over union of two binary masks.

    Two empty masks agree perfectly and score 1.0.
    """
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ: %s vs %s" % (a.shape, b.shape))
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def binary_iou(pred_mask, gt_mask):
    """Tool-vs-background IoU; thin alias kept for call-site readability."""
    return iou(pred_mask, gt_mask)


def ap_class_agnostic(predictions, gt_masks, iou_thr):
    """All-points average precision of scored instance masks, class-agnostic.

    predictions: per-frame list of (mask, score) pairs.
    gt_masks: per-frame list of ground-truth instance masks.
    iou_thr: IoU above which a prediction may claim a ground-truth instance.

    Predictions are ranked by score across the whole sequence (ties broken by
    frame index, then by within-frame order). Each prediction greedily claims
    the still-unmatched ground-truth instance of its frame with the highest
    IoU, and counts as a true positive only if that IoU reaches `iou_thr`.
    """
    if len(predictions) != len(gt_masks):
        raise ValueError("predictions and gt_masks must cover the same frames")
    n_gt = sum(len(frame_gt) for frame_gt in gt_masks)
    if n_gt == 0:
        raise ValueError("no ground-truth instances to evaluate against")

    flat = []
    for t, frame_preds in enumerate(predictions):
        for i, (mask, score) in enumerate(frame_preds):
            flat.append((float(score), t, i, np.asarray(mask, dtype=bool)))
    if not flat:
        return 0.0
    flat.sort(key=lambda rec: (-rec[0], rec[1], rec[2]))

    matched = [np.zeros(len(frame_gt), dtype=bool) for frame_gt in gt_masks]
    tp = np.zeros(len(flat))
    fp = np.zeros(len(flat))
    for rank, (_, t, _, mask) in enumerate(flat):
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gt_masks[t]):
            if matched[t][j]:
                continue
            v = iou(mask, gt)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_thr:
            tp[rank] = 1.0
            matched[t][best_j] = True
        else:
            fp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    # all-points interpolation: precision envelope integrated over recall
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for k in range(mpre.size - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def challenge_iou(pred_semantic, gt_semantic):
    """Frame-averaged mean IoU over the classes present in each frame.

    Both arguments are per-frame integer label maps where 0 is background.
    Frames whose ground truth contains no tool pixel are skipped; a frame's
    score averages the per-class IoU over exactly the classes present in its
    ground truth, so a class the predictor never emits contributes 0 there.
    """
    if len(pred_semantic) != len(gt_semantic):
        raise ValueError("prediction and ground truth must cover the same frames")
    frame_scores = []
    for pred, gt in zip(pred_semantic, gt_semantic):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("frame shapes differ: %s vs %s" % (pred.shape, gt.shape))
        classes = np.unique(gt)
        classes = classes[classes != 0]
        if classes.size == 0:
            continue
        per_class = [iou(pred == c, gt == c) for c in classes]
        frame_scores.append(float(np.mean(per_class)))
    if not frame_scores:
        raise ValueError("no evaluable frames")
    return float(np.mean(frame_scores))
