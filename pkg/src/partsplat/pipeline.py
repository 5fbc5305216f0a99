"""End-to-end runs: synthesize, cluster, track, evaluate.

Run directory layout:
    config.toml             resolved configuration
    cameras.json            camera rig
    manifest.json           scene/observation inventory
    scene/                  ground truth: field_###.pamo + clean flow_*.flo
    obs/                    tracker inputs (possibly corrupted)
    cluster/                frame-0 graph and clustering artifacts
    track/                  estimated fields, motions.jsonl, refine_###.csv
    eval/                   report.json and report.csv
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from . import field as field_mod
from . import motion as motion_mod
from . import observe as observe_mod
from . import partition as partition_mod
from . import refine as refine_mod
from .config import RunConfig, dump_toml
from .errors import FileFormatError, MissingGroundTruth, Unobservable
from .evaluate import flow_epe, image_metrics, trajectory_metrics
from .field import PartField, SceneSpec, load_field, save_field, standard_scene, synth_scene
from .geom import RigidMotion, load_rig, ring_rig, save_rig
from .motion import (
    DEConfig,
    build_flow_target,
    estimate_prior_motion_de,
    inertia_motion,
    iteration_budget,
    mean_rgb_difference,
    resolve_part_motion,
)
from .observe import (
    NoiseConfig,
    ObservationSet,
    corrupt,
    ground_truth_flow,
    load_flo,
    load_image,
    observations_from_views,
    render_observations,
    save_flo,
    save_image,
)
from .partition import (
    assign_part_ids,
    attach_small_clusters,
    build_part_graph,
    clustering_to_json,
    louvain_cluster,
    project_pixels,
    visible_set,
)
from .refine import init_rigidity, build_knn, refine_timestamp, update_rigidity


def scene_spec_from_config(cfg: RunConfig) -> SceneSpec:
    return standard_scene(
        frame_count=cfg.scene.frame_count,
        primitives_per_part=cfg.scene.primitives_per_part,
        rng_seed=cfg.scene.rng_seed,
    )


def rig_from_config(cfg: RunConfig):
    r = cfg.cameras
    return ring_rig(r.count, r.radius, r.height, (0.0, 0.0, 0.0), r.focal, r.width, r.height_px)


def _write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_dirs(out_dir) -> Path:
    root = Path(out_dir)
    for sub in ("scene", "obs", "cluster", "track", "eval"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def run_synth(cfg: RunConfig, out_dir) -> dict:
    """Generate the scene and observations; persist everything plus a
    manifest."""
    root = _ensure_dirs(out_dir)
    dump_toml(cfg, root / "config.toml")
    cameras = rig_from_config(cfg)
    save_rig(cameras, root / "cameras.json")

    spec = scene_spec_from_config(cfg)
    fields, _tracks = synth_scene(spec)
    background = tuple(cfg.background)

    views_per_frame = []
    for t, fld in enumerate(fields):
        save_field(fld, root / "scene" / f"field_{t:03d}.pamo")
        views_per_frame.append(render_observations(fld, cameras, background))

    flows_per_frame = [None]
    for t in range(1, len(fields)):
        prev = fields[t - 1]
        motions = {}
        for pid in range(len(spec.part_shapes)):
            delta, omega = spec.trajectories[pid][t - 1]
            pivot = field_mod.center_of_mass(prev, pid)
            motions[pid] = RigidMotion(np.asarray(delta), np.asarray(omega), pivot)
        flows_per_frame.append(
            ground_truth_flow(prev, motions, cameras, views_prev=views_per_frame[t - 1])
        )

    clean = observations_from_views(views_per_frame, flows_per_frame)
    observed = corrupt(clean, cfg.noise, seed=cfg.seed)

    manifest = {
        "frame_count": clean.frame_count,
        "n_views": clean.n_views,
        "part_ids": sorted(int(p) for p in np.unique(fields[0].part_ids)),
        "frames": [],
    }
    for t in range(clean.frame_count):
        entry = {"field": f"scene/field_{t:03d}.pamo", "views": []}
        for v in range(clean.n_views):
            rec = {
                "depth": f"obs/depth_t{t:03d}_v{v:02d}.pamo",
                "color": f"obs/color_t{t:03d}_v{v:02d}.pamo",
                "mask": f"obs/mask_t{t:03d}_v{v:02d}.pamo",
            }
            save_image(observed.depth[t][v], root / rec["depth"])
            save_image(observed.color[t][v], root / rec["color"])
            save_image(observed.part_mask[t][v], root / rec["mask"])
            if t >= 1:
                rec["flow_fwd"] = f"obs/flowf_t{t:03d}_v{v:02d}.flo"
                rec["flow_bwd"] = f"obs/flowb_t{t:03d}_v{v:02d}.flo"
                save_flo(observed.flow_fwd[t][v], root / rec["flow_fwd"])
                save_flo(observed.flow_bwd[t][v], root / rec["flow_bwd"])
                save_flo(clean.flow_fwd[t][v], root / f"scene/flowf_t{t:03d}_v{v:02d}.flo")
                save_flo(clean.flow_bwd[t][v], root / f"scene/flowb_t{t:03d}_v{v:02d}.flo")
            entry["views"].append(rec)
        manifest["frames"].append(entry)
    _write_json(manifest, root / "manifest.json")
    return manifest


def _load_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    if not path.exists():
        raise FileFormatError(f"missing manifest: {path}")
    with open(path) as fh:
        return json.load(fh)


def load_observations(root: Path, max_frames: int | None = None) -> ObservationSet:
    manifest = _load_manifest(root)
    frames = manifest["frames"]
    if max_frames is not None:
        frames = frames[:max_frames]
    depth, color, mask, ffwd, fbwd = [], [], [], [], []
    for t, entry in enumerate(frames):
        d, c, m, ff, fb = [], [], [], [], []
        for rec in entry["views"]:
            for key, target in (("depth", d), ("color", c), ("mask", m)):
                path = root / rec[key]
                if not path.exists():
                    raise FileFormatError(f"missing observation file: {path}")
                target.append(load_image(path))
            if t >= 1:
                for key, target in (("flow_fwd", ff), ("flow_bwd", fb)):
                    path = root / rec[key]
                    if not path.exists():
                        raise FileFormatError(f"missing observation file: {path}")
                    target.append(load_flo(path))
        depth.append(np.stack(d))
        color.append(np.stack(c))
        mask.append(np.stack(m).astype(np.int32))
        ffwd.append(np.stack(ff) if ff else None)
        fbwd.append(np.stack(fb) if fb else None)
    return ObservationSet(depth, color, mask, ffwd, fbwd)


def cluster_frame0(cfg: RunConfig, field0: PartField, obs: ObservationSet, cameras):
    """Visibility -> co-occurrence graph -> Louvain -> part ids."""
    visibility, pixels = [], []
    for v, cam in enumerate(cameras):
        pix, _, _ = project_pixels(field0, cam)
        visibility.append(visible_set(field0, cam, obs.depth[0][v], cfg.partition.theta_depth))
        pixels.append(pix)
    masks = [obs.part_mask[0][v] for v in range(len(cameras))]
    graph = build_part_graph(len(field0), visibility, masks, pixels)
    labels = louvain_cluster(graph, cfg.partition.resolution)
    labels = attach_small_clusters(field0, labels, cfg.partition.min_part_size)
    return assign_part_ids(field0, labels), graph, labels


def run_cluster(cfg: RunConfig, out_dir) -> dict:
    root = Path(out_dir)
    cameras = load_rig(root / "cameras.json")
    obs = load_observations(root, max_frames=1)
    field0 = load_field(root / "scene" / "field_000.pamo")
    field0.part_ids[:] = -1

    clustered, graph, labels = cluster_frame0(cfg, field0, obs, cameras)
    graph.to_csv(root / "cluster" / "graph.csv")
    clustering_to_json(labels, root / "cluster" / "clustering.json")
    save_field(clustered, root / "cluster" / "field_000.pamo")
    sizes = {int(p): int(n) for p, n in zip(*np.unique(clustered.part_ids, return_counts=True))}
    summary = {"clusters": len(sizes), "sizes": sizes, "edges": graph.edge_count()}
    _write_json(summary, root / "cluster" / "summary.json")
    return summary


def _de_seed(base: int, frame: int, part: int):
    return np.random.default_rng((base, frame, part))


def track_frames(
    cfg: RunConfig,
    field0: PartField,
    obs: ObservationSet,
    cameras,
    max_frames: int | None = None,
    on_frame=None,
):
    """Frame-by-frame tracking; yields nothing, returns (fields, motion rows,
    refine logs)."""
    background = tuple(cfg.background)
    frame_count = obs.frame_count if max_frames is None else min(max_frames, obs.frame_count)
    rigidity = init_rigidity(field0, cfg.rigidity.anchor_count, cfg.seed, cfg.rigidity.w_init)
    knn = build_knn(field0.centers, cfg.rigidity.knn_k)

    fields = [field0]
    motion_rows = []
    refine_logs = {}
    current = field0
    for t in range(1, frame_count):
        prev_views = render_observations(current, cameras, background)
        part_ids = sorted(current.parts)

        targets, candidates = {}, {}
        for pid in part_ids:
            target = build_flow_target(current, pid, prev_views, obs.flow_fwd[t], cameras)
            targets[pid] = target
            de_motion = None
            de_info = {"objective": float("inf"), "generations": 0}
            try:
                de_motion, de_info = estimate_prior_motion_de(
                    target, cfg.de, seed=_de_seed(cfg.seed, t, pid)
                )
            except Unobservable:
                pass
            inertia = None
            if current.prev_centers is not None:
                members = current.part_indices(pid)
                inertia = inertia_motion(
                    current.centers[members], current.prev_centers[members]
                )
            candidates[pid] = (de_motion, inertia)

        base = {}
        for pid in part_ids:
            de_motion, inertia = candidates[pid]
            primary = de_motion or inertia
            if primary is None:
                primary = RigidMotion.identity(
                    current.centers[current.part_indices(pid)].mean(axis=0)
                )
            base[pid] = primary

        states = {}
        for pid in part_ids:
            de_motion, inertia = candidates[pid]
            state = resolve_part_motion(
                current,
                pid,
                de_motion,
                inertia,
                targets[pid],
                obs.color[t],
                cameras,
                base,
                cfg.tau_fail,
                background,
            )
            states[pid] = state
            base[pid] = state.motion

        warm = field_mod.apply_part_motions(current, {p: s.motion for p, s in states.items()})
        warm_views = render_observations(warm, cameras, background)
        d_pixel = mean_rgb_difference(warm_views, obs.color[t])
        budget = iteration_budget(
            d_pixel, cfg.budget.epsilon, cfg.budget.min_iters, cfg.budget.max_iters
        )

        rigidity = update_rigidity(
            rigidity,
            warm.prev_centers,
            warm.prev2_centers,
            cfg.rigidity.alpha,
            cfg.rigidity.beta,
            cfg.rigidity.delta,
        )

        refined, log = refine_timestamp(
            warm,
            obs.color[t],
            cameras,
            budget,
            cfg.loss,
            rigidity,
            knn,
            obs.flow_fwd[t],
            obs.flow_bwd[t],
            cfg.refine,
            background,
        )
        refine_logs[t] = log

        for pid in part_ids:
            s = states[pid]
            motion_rows.append(
                {
                    "frame": t,
                    "part": pid,
                    "source": s.source,
                    "delta": [float(x) for x in s.motion.delta],
                    "omega_deg": [float(x) for x in s.motion.omega_deg],
                    "objective": float(s.objective),
                    "d_part": float(s.d_pixel),
                    "budget": budget,
                }
            )

        fields.append(refined)
        current = refined
        if on_frame is not None:
            on_frame(t, refined)
    return fields, motion_rows, refine_logs


def run_track(cfg: RunConfig, out_dir, max_frames: int | None = None) -> dict:
    root = Path(out_dir)
    cameras = load_rig(root / "cameras.json")
    obs = load_observations(root, max_frames=max_frames)
    gt0_path = root / "scene" / "field_000.pamo"
    if not gt0_path.exists():
        raise FileFormatError(f"missing initial field: {gt0_path}")
    field0 = load_field(gt0_path)
    field0.part_ids[:] = -1
    field0, _, _ = cluster_frame0(cfg, field0, obs, cameras)

    fields, motion_rows, refine_logs = track_frames(cfg, field0, obs, cameras, max_frames)

    for t, fld in enumerate(fields):
        save_field(fld, root / "track" / f"field_{t:03d}.pamo")
    with open(root / "track" / "motions.jsonl", "w") as fh:
        for row in motion_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    for t, log in refine_logs.items():
        with open(root / "track" / f"refine_{t:03d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l1", "dssim", "lo", "l_part", "l_local", "total"])
            for row in log:
                writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    return {"frames_tracked": len(fields), "parts": sorted(field0.parts)}


def run_eval(cfg: RunConfig, out_dir) -> dict:
    root = Path(out_dir)
    cameras = load_rig(root / "cameras.json")
    background = tuple(cfg.background)

    gt_paths = sorted((root / "scene").glob("field_*.pamo"))
    est_paths = sorted((root / "track").glob("field_*.pamo"))
    if not gt_paths:
        raise MissingGroundTruth(f"no ground-truth fields under {root / 'scene'}")
    if not est_paths:
        raise FileFormatError(f"no tracked fields under {root / 'track'}")
    frame_count = min(len(gt_paths), len(est_paths))
    gt_fields = [load_field(p, t) for t, p in enumerate(gt_paths[:frame_count])]
    est_fields = [load_field(p, t) for t, p in enumerate(est_paths[:frame_count])]

    est_tracks = np.stack([f.centers for f in est_fields])
    gt_tracks = np.stack([f.centers for f in gt_fields])
    report = trajectory_metrics(est_tracks, gt_tracks)

    obs = load_observations(root, max_frames=frame_count)
    psnrs, ssims = [], []
    for t, fld in enumerate(est_fields):
        views = render_observations(fld, cameras, background)
        for v, view in enumerate(views):
            metrics = image_metrics(view.color, obs.color[t][v])
            psnrs.append(metrics["psnr"])
            ssims.append(metrics["ssim"])

    epes = []
    for t in range(1, frame_count):
        est_prev = est_fields[t - 1]
        views_prev = render_observations(est_prev, cameras, background)
        gt_views_prev = render_observations(gt_fields[t - 1], cameras, background)
        for v, cam in enumerate(cameras):
            from .geom import project_many

            uv0, _, ok0 = project_many(cam, est_prev.centers)
            uv1, _, ok1 = project_many(cam, est_fields[t].centers)
            disp = np.where((ok0 & ok1)[:, None], uv1 - uv0, 0.0)
            own = views_prev[v].owner
            est_flow = np.zeros((cam.height, cam.width, 2))
            covered = own >= 0
            est_flow[covered] = disp[own[covered]]
            gt_flow = load_flo(root / f"scene/flowf_t{t:03d}_v{v:02d}.flo")
            mask = covered & (gt_views_prev[v].part_mask >= 0)
            if mask.any():
                epes.append(flow_epe(est_flow, gt_flow, mask))

    finite_psnrs = [p for p in psnrs if np.isfinite(p)]
    results = {
        "scene": cfg.scene.name,
        "variant": cfg.variant,
        "frames": frame_count,
        "track": report.to_dict(),
        "images": {
            "psnr": float(np.mean(finite_psnrs)) if finite_psnrs else float("inf"),
            "ssim": float(np.mean(ssims)),
        },
        "flow_epe_px": float(np.mean(epes)) if epes else 0.0,
    }
    _write_json(results, root / "eval" / "report.json")

    with open(root / "eval" / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["scene", "variant", "frames", "mte_cm", "acc", "surv", "psnr", "ssim", "flow_epe_px"]
        header += [f"acc_{t:g}cm" for t in report.acc_per_threshold]
        row = [
            cfg.scene.name,
            cfg.variant,
            frame_count,
            repr(report.mte_cm),
            repr(report.acc),
            repr(report.surv),
            repr(results["images"]["psnr"]),
            repr(results["images"]["ssim"]),
            repr(results["flow_epe_px"]),
        ]
        row += [repr(v) for v in report.acc_per_threshold.values()]
        writer.writerow(header)
        writer.writerow(row)
    return results


def run_all(cfg: RunConfig, out_dir, max_frames: int | None = None) -> dict:
    run_synth(cfg, out_dir)
    run_cluster(cfg, out_dir)
    run_track(cfg, out_dir, max_frames)
    return run_eval(cfg, out_dir)
