"""Command-line entry points: synth, reconstruct, eval and export.

Exit codes: 0 success, 2 input error, 3 partial pipeline failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import evalmetrics, simcrowd, tracking
from .kinematics import GroundPlane
from .motionprior import PIPELINE_CORPUS, PIPELINE_DIMS, PriorModel, default_cache_dir, load_or_fit_prior
from .pipeline import PipelineConfig, Schedule, StageFailure, pipeline_weights, result_to_json, run_pipeline

log = logging.getLogger("crowdmotion")

EXIT_OK, EXIT_INPUT, EXIT_PARTIAL = 0, 2, 3


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a reconstruction run depends on.

    ``seed`` drives the prior corpus; all generators in the library derive
    their streams from it with fixed counters, so worker count does not
    change any result.
    """

    obs: str = None
    gt: str = None
    model: str = None
    out: str = "out"
    cache_dir: str = None
    weights: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    prior_stage: bool = True
    amc: bool = True
    gt_tracking: bool = False
    seed: int = 0
    jobs: int = 1

    @classmethod
    def from_dict(cls, d, base_dir="."):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        for k in ("obs", "gt", "model"):
            v = getattr(cfg, k)
            if v and not os.path.isabs(v):
                setattr(cfg, k, os.path.join(base_dir, v))
        return cfg

    def pipeline_config(self):
        try:
            return PipelineConfig(weights=pipeline_weights(**self.weights), schedule=Schedule(**self.schedule),
                                  prior_stage=self.prior_stage, amc=self.amc and self.prior_stage, jobs=self.jobs)
        except (TypeError, ValueError) as e:
            raise InputError(f"invalid weights or schedule: {e}") from e


def _read_json(path, what):
    if not path:
        raise InputError(f"no {what} given")
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise InputError(f"{what} not found: {path}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{what} is not valid JSON: {path}: {e}") from e


def _write_json(obj, path, indent=None):
    with open(path, "w") as f:
        json.dump(obj, f, indent=indent, sort_keys=False)


def bundled_spec_path(name="canonical_occlusion.json"):
    return str(resources.files("crowdmotion") / "data" / name)


# ---------------------------------------------------------------- synth


def cmd_synth(spec_path, out_dir, seed=None):
    if spec_path in (None, "canonical"):
        spec_path = bundled_spec_path()
    d = _read_json(spec_path, "scene spec")
    try:
        spec = simcrowd.SceneSpec.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"invalid scene spec: {e}") from e
    if seed is not None:
        spec.rng_seed = int(seed)
    try:
        gt, obs = simcrowd.synthesize(spec)
    except ValueError as e:
        raise InputError(f"scene cannot be generated: {e}") from e
    os.makedirs(out_dir, exist_ok=True)
    spec.save(os.path.join(out_dir, "scene.json"))
    g = gt.to_dict()
    g["occlusions"] = [o.to_dict() for o in spec.occlusions]
    _write_json(g, os.path.join(out_dir, "gt.json"))
    _write_json(obs.to_dict(), os.path.join(out_dir, "obs.json"))
    _, full = simcrowd.occlusion_masks(spec)
    summary = {"agents": spec.n_agents, "frames": spec.n_frames, "detections": sum(len(f) for f in obs.frames),
               "occluded_person_frames": int(full.sum()),
               "fully_occluded": {str(a): [int(full[a].argmax()), int(len(full[a]) - full[a][::-1].argmax())]
                                  for a in range(spec.n_agents) if full[a].any()}}
    print(json.dumps(summary))
    return summary


# ---------------------------------------------------------------- reconstruct


def _load_prior(cfg):
    if cfg.model and os.path.exists(cfg.model):
        return PriorModel.load(cfg.model)
    prior = load_or_fit_prior(cfg.cache_dir or default_cache_dir(), PIPELINE_CORPUS, cfg.seed, *PIPELINE_DIMS)
    if cfg.model:
        prior.save(cfg.model)
    return prior


def cmd_reconstruct(cfg):
    obs = simcrowd.ObservationStream.from_dict(_read_json(cfg.obs, "observations"))
    pcfg = cfg.pipeline_config()
    tracks = tracking.gt_tracks(obs) if cfg.gt_tracking else tracking.track_stream(obs)
    if cfg.gt_tracking and any(t.person_id < 0 for t in tracks):
        raise InputError("GT-tracking mode needs detections with agent identities")
    prior = _load_prior(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    code = EXIT_OK
    try:
        rec = run_pipeline(tracks, obs, prior, pcfg)
    except StageFailure as e:
        log.error("%s", e)
        rec, code = e.partial, EXIT_PARTIAL
    _write_json(result_to_json(rec, obs.ground), os.path.join(cfg.out, "result.json"))
    diag = dict(rec.diagnostics, watermark=rec.watermark, config=pcfg.to_dict(),
                tracking="gt" if cfg.gt_tracking else "hvip", n_tracks=len(tracks))
    _write_json(diag, os.path.join(cfg.out, "diagnostics.json"), indent=1)
    _write_json(rec.groups, os.path.join(cfg.out, "groups.json"), indent=1)
    _write_json(tracking.tracks_to_json(tracks, obs), os.path.join(cfg.out, "tracks.json"))
    print(json.dumps({"persons": len(rec.persons), "watermark": rec.watermark, "out": cfg.out}))
    return code


# ---------------------------------------------------------------- export


EXPORT_COLUMNS = (["person_id", "frame", "pelvis_x", "pelvis_y", "pelvis_z", "hvip_x", "hvip_y", "hvip_z"]
                  + [f"h{j:02d}" for j in range(24)]
                  + [f"j{j:02d}_{c}" for j in range(24) for c in "xyz"])


def export_rows(result):
    g = GroundPlane.from_dict(result["ground"])
    rows = []
    for p in result["persons"]:
        if p.get("joints3d") is None:
            continue
        J = np.asarray(p["joints3d"])
        H = np.asarray(p["hvip3d"])
        heights = J @ g.n + g.offset
        for k, t in enumerate(p["frames"]):
            rows.append([int(p["person_id"]), int(t), *J[k, 0], *H[k], *heights[k], *J[k].ravel()])
    return rows


def cmd_export(result_path, out_path, fmt="csv"):
    if fmt != "csv":
        raise InputError(f"unsupported export format {fmt!r}")
    result = _read_json(result_path, "result")
    rows = export_rows(result)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EXPORT_COLUMNS)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    return len(rows)


def load_predictions(path):
    """person id -> (frames, joints) from a result.json or an exported CSV."""
    if path.endswith(".csv"):
        try:
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
        except FileNotFoundError as e:
            raise InputError(f"result not found: {path}") from e
        by = {}
        for r in rows:
            by.setdefault(int(r["person_id"]), []).append(r)
        out = {}
        for pid, rs in by.items():
            frames = np.array([int(r["frame"]) for r in rs])
            J = np.array([[[float(r[f"j{j:02d}_{c}"]) for c in "xyz"] for j in range(24)] for r in rs])
            out[pid] = (frames, J)
        return out
    return evalmetrics.result_predictions(_read_json(path, "result"))


# ---------------------------------------------------------------- eval


def _occlusion_mask(gt_dict, shape):
    mask = np.zeros(shape, bool)
    for o in gt_dict.get("occlusions", []):
        if o.get("joints", "full") == "full":
            mask[o["agent"], o["start"]:o["end"]] = True
    return mask


def cmd_eval(result_paths, gt_path, out_dir, scene="scene", arms=None, w_scale=False):
    gd = _read_json(gt_path, "ground truth")
    gt = simcrowd.GroundTruth.from_dict(gd)
    occ = _occlusion_mask(gd, gt.joints.shape[:2])
    arms = arms or [os.path.basename(os.path.dirname(os.path.abspath(p))) or f"arm{i}"
                    for i, p in enumerate(result_paths)]
    rows, full = [], []
    for path, arm in zip(result_paths, arms):
        pred = load_predictions(path)
        for pid, (frames, J) in pred.items():
            if frames.max(initial=-1) >= gt.joints.shape[1]:
                raise InputError(f"person {pid} has frames beyond the ground truth")
        rep = evalmetrics.evaluate(pred, gt.joints, occ if occ.any() else None, w_scale=w_scale)
        rows.append(evalmetrics.report_row(rep, scene, arm))
        full.append(dict(rep.to_dict(), scene=scene, arm=arm))
    os.makedirs(out_dir, exist_ok=True)
    evalmetrics.write_reports(rows, os.path.join(out_dir, "report.csv"), os.path.join(out_dir, "report.json"), full)
    for r in rows:
        print(json.dumps({k: (round(v, 3) if isinstance(v, float) else v) for k, v in r.items()}))
    return rows


# ---------------------------------------------------------------- argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="crowdmotion", description="Synthetic crowd motion reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene (ground truth + observations)")
    s.add_argument("spec", nargs="?", default="canonical", help="scene spec JSON (default: bundled canonical scene)")
    s.add_argument("--seed", type=int, default=None, help="override the scene seed")
    s.add_argument("--out", default="scene")

    r = sub.add_parser("reconstruct", help="run the multi-stage reconstruction")
    r.add_argument("obs", nargs="?", help="observation JSON (or set 'obs' in --config)")
    r.add_argument("--config", help="RunConfig JSON")
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int)
    r.add_argument("--no-prior-stage", action="store_true", help="skip the motion-prior and grouping stages")
    r.add_argument("--no-amc", action="store_true", help="skip the group consistency stage")
    r.add_argument("--gt-tracking", action="store_true", help="use ground-truth identities instead of tracking")
    r.add_argument("--out")

    e = sub.add_parser("eval", help="score one or two results against ground truth")
    e.add_argument("results", nargs="+", help="result.json or exported CSV; two paths give a delta comparison")
    e.add_argument("--gt", required=True)
    e.add_argument("--out", default="eval")
    e.add_argument("--scene", default="scene")
    e.add_argument("--arms", nargs="+")
    e.add_argument("--w-scale", action="store_true", help="include scale in the first-two-frame alignment")

    x = sub.add_parser("export", help="long-form per-person per-frame CSV")
    x.add_argument("result")
    x.add_argument("--format", default="csv")
    x.add_argument("--out", default="export.csv")
    return p


def _run_config(args):
    if args.config:
        cfg = RunConfig.from_dict(_read_json(args.config, "config"), os.path.dirname(os.path.abspath(args.config)))
    else:
        cfg = RunConfig()
    if args.obs:
        cfg.obs = args.obs
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = max(1, args.jobs)
    if args.out:
        cfg.out = args.out
    cfg.prior_stage = cfg.prior_stage and not args.no_prior_stage
    cfg.amc = cfg.amc and not args.no_amc
    cfg.gt_tracking = cfg.gt_tracking or args.gt_tracking
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args.spec, args.out, args.seed)
            return EXIT_OK
        if args.command == "reconstruct":
            return cmd_reconstruct(_run_config(args))
        if args.command == "eval":
            if len(args.results) > 2:
                raise InputError("eval compares at most two results")
            cmd_eval(args.results, args.gt, args.out, args.scene, args.arms, args.w_scale)
            return EXIT_OK
        if args.command == "export":
            n = cmd_export(args.result, args.out, args.format)
            print(json.dumps({"rows": n, "out": args.out}))
            return EXIT_OK
    except (InputError, evalmetrics.LengthMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_INPUT


__all__ = ["main", "RunConfig", "cmd_synth", "cmd_reconstruct", "cmd_eval", "cmd_export", "EXPORT_COLUMNS",
           "bundled_spec_path", "EXIT_OK", "EXIT_INPUT", "EXIT_PARTIAL", "InputError"]
