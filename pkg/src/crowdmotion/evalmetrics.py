"""Reconstruction metrics against ground truth.

Joint errors are reported in millimetres, accelerations in mm/frame^2 and
similarities in percent.  Person positions (for depth order and pairwise
distances) are pelvis joints; depth is the camera-frame z coordinate.
"""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .kinematics import procrustes

METRICS_VERSION = "1"
TIE_DEPTH = 0.1
MM = 1000.0


class LengthMismatch(ValueError):
    pass


class DegenerateCrowd(ValueError):
    pass


def _check(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


# ---------------------------------------------------------------- joint errors


def per_frame_errors(pred, gt, mode="plain", w_scale=False):
    """Mean joint error per frame (metres) of one person's (T, J, 3) sequence."""
    pred, gt = _check(pred, gt)
    T = pred.shape[0]
    if mode == "plain":
        p = pred - pred[:, :1]
        g = gt - gt[:, :1]
        return np.linalg.norm(p - g, axis=-1).mean(-1)
    if mode == "pa":
        out = np.empty(T)
        for t in range(T):
            s = procrustes(pred[t], gt[t], with_scale=True)
            out[t] = np.linalg.norm(s.apply(pred[t]) - gt[t], axis=-1).mean()
        return out
    if mode in ("wa", "w"):
        fit = slice(None) if mode == "wa" else slice(0, min(2, T))
        s = procrustes(pred[fit].reshape(-1, 3), gt[fit].reshape(-1, 3), with_scale=(mode == "w" and w_scale))
        return np.linalg.norm(s.apply(pred.reshape(-1, 3)).reshape(pred.shape) - gt, axis=-1).mean(-1)
    raise ValueError(f"unknown mode {mode!r}")


def mpjpe(pred, gt, mode="plain", w_scale=False):
    """Mean per-joint position error in millimetres."""
    return float(per_frame_errors(pred, gt, mode, w_scale).mean() * MM)


def per_frame_accel(pred, gt):
    """Acceleration error per interior frame (metres / frame^2); first and last frame are NaN."""
    pred, gt = _check(pred, gt)
    out = np.full(pred.shape[0], np.nan)
    if pred.shape[0] >= 3:
        ap = pred[2:] - 2 * pred[1:-1] + pred[:-2]
        ag = gt[2:] - 2 * gt[1:-1] + gt[:-2]
        out[1:-1] = np.linalg.norm(ap - ag, axis=-1).mean(-1)
    return out


def accel_error(pred, gt):
    e = per_frame_accel(pred, gt)
    e = e[np.isfinite(e)]
    return float(e.mean() * MM) if e.size else 0.0


# ---------------------------------------------------------------- crowd metrics


def pcod_counts(pred_pos, gt_pos, tie=TIE_DEPTH):
    """(correct, total) ordinal depth relations over person pairs of one frame."""
    zp = np.asarray(pred_pos)[:, 2]
    zg = np.asarray(gt_pos)[:, 2]
    n = len(zp)
    if n < 2:
        return 0, 0
    i, j = np.triu_indices(n, 1)
    dp, dg = zp[i] - zp[j], zg[i] - zg[j]
    tp, tg = np.abs(dp) < tie, np.abs(dg) < tie
    ok = (tp & tg) | (~tp & ~tg & (np.sign(dp) == np.sign(dg)))
    return int(ok.sum()), len(i)


def pcod(pred_pos, gt_pos, tie=TIE_DEPTH):
    """Percent of correct ordinal depth relations; inputs (T, N, 3) or (N, 3)."""
    pred_pos, gt_pos = _check(pred_pos, gt_pos)
    if pred_pos.ndim == 2:
        pred_pos, gt_pos = pred_pos[None], gt_pos[None]
    c = n = 0
    for p, g in zip(pred_pos, gt_pos):
        a, b = pcod_counts(p, g, tie)
        c, n = c + a, n + b
    return 100.0 * c / n if n else 100.0


def ppds_pairs(pred_pos, gt_pos):
    """Per-pair clipped relative distance similarity (percent) of one frame."""
    p, g = np.asarray(pred_pos), np.asarray(gt_pos)
    i, j = np.triu_indices(len(p), 1)
    dp = np.linalg.norm(p[i] - p[j], axis=-1)
    dg = np.linalg.norm(g[i] - g[j], axis=-1)
    return 100.0 * np.maximum(0.0, 1.0 - np.abs(dp - dg) / np.maximum(dg, 1e-12))


def ppds(pred_pos, gt_pos):
    return float(ppds_pairs(pred_pos, gt_pos).mean())


def pa_ppds(pred_pos, gt_pos):
    """Pairwise distance similarity after per-frame similarity alignment; inputs (T, N, 3) or (N, 3)."""
    pred_pos, gt_pos = _check(pred_pos, gt_pos)
    if pred_pos.ndim == 2:
        pred_pos, gt_pos = pred_pos[None], gt_pos[None]
    if pred_pos.shape[1] < 3:
        raise DegenerateCrowd("need at least three persons")
    vals = []
    for p, g in zip(pred_pos, gt_pos):
        s = procrustes(p, g, with_scale=True)
        vals.append(ppds_pairs(s.apply(p), g))
    return float(np.concatenate(vals).mean())


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    wa_mpjpe: float
    w_mpjpe: float
    accel: float
    pcod: float
    pa_ppds: float
    n_person_frames: int
    per_person: dict = field(default_factory=dict)
    occluded: dict = None
    version: str = METRICS_VERSION

    def to_dict(self):
        return asdict(self)


METRIC_KEYS = ("pa_ppds", "pcod", "mpjpe", "pa_mpjpe", "wa_mpjpe", "w_mpjpe", "accel")


def match_persons(pred, gt_joints):
    """Map each predicted person to the ground-truth agent with the closest pelvis track.

    ``pred`` maps person id -> (frames, joints (T, 24, 3)).
    """
    out = {}
    for pid, (frames, J) in pred.items():
        d = [np.linalg.norm(J[:, 0] - gt_joints[a, frames, 0], axis=-1).mean() for a in range(len(gt_joints))]
        out[pid] = int(np.argmin(d))
    return out


def _crowd_frames(pred, gt_joints, mapping, mask=None):
    """Per frame: predicted and GT pelvis positions of the persons present (optionally masked)."""
    T = gt_joints.shape[1]
    per_frame = [([], [], []) for _ in range(T)]
    used = set()
    for pid in sorted(pred):
        frames, J = pred[pid]
        a = mapping[pid]
        for k, t in enumerate(frames):
            if (a, t) in used:
                continue
            used.add((a, t))
            per_frame[t][0].append(J[k, 0])
            per_frame[t][1].append(gt_joints[a, t, 0])
            per_frame[t][2].append(True if mask is None else bool(mask[a, t]))
    return per_frame


def _crowd_metrics(per_frame, subset):
    c = n = 0
    sims = []
    for p, g, m in per_frame:
        if len(p) < 2:
            continue
        p, g, m = np.array(p), np.array(g), np.array(m)
        i, j = np.triu_indices(len(p), 1)
        keep = (m[i] | m[j]) if subset else np.ones(len(i), bool)
        if not keep.any():
            continue
        zp, zg = p[:, 2], g[:, 2]
        dp, dg = zp[i] - zp[j], zg[i] - zg[j]
        tp, tg = np.abs(dp) < TIE_DEPTH, np.abs(dg) < TIE_DEPTH
        ok = (tp & tg) | (~tp & ~tg & (np.sign(dp) == np.sign(dg)))
        c, n = c + int(ok[keep].sum()), n + int(keep.sum())
        if len(p) >= 3:
            s = procrustes(p, g, with_scale=True)
            sims.append(ppds_pairs(s.apply(p), g)[keep])
    return (100.0 * c / n if n else float("nan"),
            float(np.concatenate(sims).mean()) if sims else float("nan"))


def evaluate(pred, gt_joints, occlusion=None, w_scale=False):
    """Full report.

    ``pred``: person id -> (frames (T,), joints (T, 24, 3)); ``gt_joints``
    (A, F, 24, 3); ``occlusion`` (A, F) bool person-frame mask for the
    occluded subset.
    """
    gt_joints = np.asarray(gt_joints)
    mapping = match_persons(pred, gt_joints)
    rows = {k: [] for k in ("plain", "pa", "wa", "w", "accel")}
    occ_rows = {k: [] for k in rows}
    per_person = {}
    for pid in sorted(pred):
        frames, J = pred[pid]
        frames = np.asarray(frames)
        G = gt_joints[mapping[pid], frames]
        errs = {m: per_frame_errors(J, G, m, w_scale) for m in ("plain", "pa", "wa", "w")}
        errs["accel"] = per_frame_accel(J, G)
        per_person[str(pid)] = {"agent": mapping[pid], "mpjpe": float(errs["plain"].mean() * MM),
                                "accel": float(np.nanmean(errs["accel"]) * MM) if len(J) >= 3 else 0.0}
        m = None if occlusion is None else np.asarray(occlusion)[mapping[pid], frames]
        for k, e in errs.items():
            rows[k].append(e)
            if m is not None:
                occ_rows[k].append(e[m])
    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in rows.items()}
    pf = _crowd_frames(pred, gt_joints, mapping)
    pc, pp = _crowd_metrics(pf, subset=False)

    def summary(c):
        acc = c["accel"][np.isfinite(c["accel"])]
        return dict(mpjpe=float(c["plain"].mean() * MM) if c["plain"].size else float("nan"),
                    pa_mpjpe=float(c["pa"].mean() * MM) if c["pa"].size else float("nan"),
                    wa_mpjpe=float(c["wa"].mean() * MM) if c["wa"].size else float("nan"),
                    w_mpjpe=float(c["w"].mean() * MM) if c["w"].size else float("nan"),
                    accel=float(acc.mean() * MM) if acc.size else float("nan"),
                    n_person_frames=int(c["plain"].size))

    occ = None
    if occlusion is not None:
        oc = {k: np.concatenate(v) if v else np.zeros(0) for k, v in occ_rows.items()}
        occ = summary(oc)
        occ["pcod"], occ["pa_ppds"] = _crowd_metrics(_crowd_frames(pred, gt_joints, mapping, occlusion), subset=True)
    return EvalReport(pcod=pc, pa_ppds=pp, per_person=per_person, occluded=occ, **summary(cat))


def result_predictions(result):
    """person id -> (frames, joints) from a result.json dictionary."""
    out = {}
    for p in result["persons"]:
        if p.get("joints3d") is None:
            continue
        out[int(p["person_id"])] = (np.asarray(p["frames"], int), np.asarray(p["joints3d"], dtype=np.float64))
    return out


def report_row(report, scene="", arm=""):
    row = {"scene": scene, "arm": arm}
    for k in METRIC_KEYS:
        row[k] = getattr(report, k)
    occ = report.occluded or {}
    for k in METRIC_KEYS:
        row[f"occ_{k}"] = occ.get(k, float("nan"))
    return row


def write_reports(rows, out_csv, out_json=None, full=None):
    """Write rows (dicts, same keys) to CSV; with two arms, delta columns are appended."""
    keys = list(rows[0])
    if len(rows) == 2:
        base, other = rows
        delta = {f"delta_{k}": (other[k] - base[k]) for k in keys if k not in ("scene", "arm")}
        rows = [dict(r, **{k: (0.0 if i == 0 else v) for k, v in delta.items()}) for i, r in enumerate(rows)]
        keys = keys + list(delta)
    with open(out_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    if out_json:
        with open(out_json, "w") as f:
            json.dump({"version": METRICS_VERSION, "rows": rows, "reports": full or []}, f, indent=1)


__all__ = [
    "mpjpe", "per_frame_errors", "accel_error", "per_frame_accel", "pcod", "pcod_counts", "ppds", "ppds_pairs",
    "pa_ppds", "evaluate", "EvalReport", "LengthMismatch", "DegenerateCrowd", "match_persons",
    "result_predictions", "report_row", "write_reports", "METRIC_KEYS",
]
