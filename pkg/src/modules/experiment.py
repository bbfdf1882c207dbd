"""
Experiment orchestration: config validation, the pipeline stages, loop and
baseline evaluation, image dumps and the reproducibility stamp.

An experiment directory holds

  data/train, data/test    generated datasets
  prior.json               PCA pose prior
  bundle/                  trained networks
  reports/                 metric reports, baseline CSV and traces, stamp
"""
import csv
from dataclasses import replace
import logging
import os

import numpy as np
from PIL import Image
from tqdm import tqdm

from src.modules.baseline import SwarmConfig, direct_fit, pso_fit, synthesizer_problem
from src.modules.depth_scene import (
    OBJECT_MODELS, SceneConfig, default_hand_geometry, load_dataset, make_dataset, object_model,
)
from src.modules.feedback import (
    HandBundle, JointBundle, run_hand_loop, run_joint_loop, train_hand_bundle, train_joint_bundle,
)
from src.modules.geometry import center_of_mass, crop_cube, denormalize_depth
from src.modules.metrics import MetricReport, combined_metric_E, mean_joint_error, visibility_for
from src.modules.networks import (
    TrainConfig, hand_synthesize_fn, prepare_hand_samples, train_predictor_combined, update_audit,
)
from src.modules.pose_model import PosePrior, center_on_reference, corners_from_pose, fit_prior, pose_from_corners
from src.modules.utils import (
    VERSION, ConfigError, GeometryError, MissingArtifactError, derive_rng, read_json, resolve_seed, sha256_of,
    write_json,
)

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "fit-prior", "train", "run-loop", "audit", "baseline", "metrics")

# section -> key -> (accepted types, check, description)
CONFIG_SCHEMA = {
    None: {
        "name": (str, None, "experiment name"),
        "seed": (int, lambda v: v >= 0, "non-negative integer"),
        "mode": (str, lambda v: v in ("hand", "joint"), "'hand' or 'joint'"),
        "stages": (list, lambda v: all(s in STAGES for s in v), f"subset of {list(STAGES)}"),
        "data": (dict, None, "dataset section"),
        "prior": (dict, None, "prior section"),
        "train": (dict, None, "training section"),
        "loop": (dict, None, "loop section"),
        "baseline": (dict, None, "baseline section"),
        "audit": (dict, None, "audit section"),
    },
    "data": {
        "train": (int, lambda v: v >= 1, "positive integer"),
        "test": (int, lambda v: v >= 1, "positive integer"),
        "workers": (int, lambda v: v >= 1, "positive integer"),
        "scene": (dict, None, "SceneConfig fields"),
    },
    "prior": {
        "k": (int, lambda v: v >= 1, "positive integer"),
        "allow_rank_deficient": (bool, None, "boolean"),
    },
    "train": {name: ((int, float, str, bool, type(None)), None, "TrainConfig field")
              for name in TrainConfig.__dataclass_fields__ if name not in ("seed", "log_dir", "progress")},
    "loop": {
        "iterations": (int, lambda v: v >= 0, "non-negative integer"),
        "parallel": (bool, None, "boolean"),
        "compare_combined": (bool, None, "boolean"),
    },
    "baseline": {
        "samples": (int, lambda v: v >= 1, "positive integer"),
        "method": (str, lambda v: v in ("lbfgsb", "pso"), "'lbfgsb' or 'pso'"),
        "max_evaluations": (int, lambda v: v >= 1, "positive integer"),
    },
    "audit": {
        "radii": (list, lambda v: len(v) > 0 and all(isinstance(r, (int, float)) and r > 0 for r in v),
                  "non-empty list of positive fractions"),
    },
}

DEFAULT_CONFIG = {
    "name": "experiment",
    "seed": 0,
    "mode": "hand",
    "stages": list(STAGES),
    "data": {"train": 5000, "test": 500, "workers": 1, "scene": {}},
    "prior": {"k": 30, "allow_rank_deficient": False},
    "train": {},
    "loop": {"iterations": 2, "parallel": True, "compare_combined": False},
    "baseline": {"samples": 50, "method": "lbfgsb", "max_evaluations": 200},
    "audit": {"radii": [0.02, 0.05, 0.1]},
}


def _check_section(values, schema, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    for key, value in values.items():
        if key not in schema:
            raise ConfigError(f"unknown config key '{where}.{key}'" if where != "config"
                              else f"unknown config key '{key}'")
        types, check, description = schema[key]
        bad_type = not isinstance(value, types) or (isinstance(value, bool) and bool not in
                                                     (types if isinstance(types, tuple) else (types,)))
        if bad_type or (check is not None and not check(value)):
            raise ConfigError(f"config key '{key}' in {where} must be {description}, got {value!r}")


def validate_config(config):
    """
    Check a raw experiment config and merge it over the defaults.

    Raises:
        ConfigError: naming the first offending key.
    """
    _check_section(config, CONFIG_SCHEMA[None], "config")
    merged = {}
    for key, default in DEFAULT_CONFIG.items():
        if isinstance(default, dict):
            section = config.get(key, {})
            _check_section(section, CONFIG_SCHEMA[key], key)
            merged[key] = {**default, **section}
        else:
            merged[key] = config.get(key, default)
    try:
        scene = SceneConfig.from_dict(merged["data"]["scene"])
        TrainConfig(**merged["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid scene or training settings: {e}") from e
    if merged["mode"] == "joint" and scene.object is None:
        raise ConfigError("config key 'data.scene.object' must name an object model in joint mode")
    if scene.object is not None and scene.object not in OBJECT_MODELS:
        raise ConfigError(f"config key 'data.scene.object' must be one of {sorted(OBJECT_MODELS)}, got {scene.object!r}")
    return merged


def load_config(path):
    if not os.path.exists(path):
        raise MissingArtifactError("config", path)
    return validate_config(read_json(path))


# ---------------------------------------------------------------------------
# Paths and artifacts
# ---------------------------------------------------------------------------

def _paths(out):
    return {
        "train": os.path.join(out, "data", "train"),
        "test": os.path.join(out, "data", "test"),
        "prior": os.path.join(out, "prior.json"),
        "bundle": os.path.join(out, "bundle"),
        "reports": os.path.join(out, "reports"),
        "logs": os.path.join(out, "logs"),
    }


def _require(stage, path):
    if not os.path.exists(path):
        raise MissingArtifactError(stage, path)
    return path


def save_prior(path, prior):
    write_json(path, {"mean": prior.mean, "basis": prior.basis, "eigenvalues": prior.eigenvalues})


def load_prior(path):
    data = read_json(path)
    return PosePrior(np.asarray(data["mean"]), np.asarray(data["basis"]), np.asarray(data["eigenvalues"]))


def scene_config(config):
    scene = SceneConfig.from_dict(config["data"]["scene"])
    if config["mode"] == "hand" and scene.object is not None:
        scene = replace(scene, object=None)
    return scene


def train_config(config, out=None, progress=False):
    return TrainConfig(**{**config["train"], "seed": config["seed"],
                          "log_dir": os.path.join(out, "logs") if out else None, "progress": progress})


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_gen_data(config, out, progress=False):
    paths = _paths(out)
    scene = scene_config(config)
    manifests = {}
    for split, offset in (("train", 0), ("test", 1)):
        _, manifest = make_dataset(config["data"][split], scene, config["seed"] * 2 + offset, paths[split],
                                   workers=config["data"]["workers"], progress=progress)
        manifests[split] = sha256_of(manifest)
    return manifests


def stage_fit_prior(config, out):
    paths = _paths(out)
    samples, _ = load_dataset(_require("fit-prior", paths["train"]))
    poses = center_on_reference(np.stack([s.hand_pose for s in samples]))
    prior = fit_prior(poses, config["prior"]["k"], config["prior"]["allow_rank_deficient"])
    save_prior(paths["prior"], prior)
    return prior


def stage_train(config, out, progress=False):
    paths = _paths(out)
    samples, _ = load_dataset(_require("train", paths["train"]))
    prior = load_prior(_require("train", paths["prior"]))
    cfg = train_config(config, out, progress)
    if config["mode"] == "hand":
        bundle, results = train_hand_bundle(samples, prior, cfg)
    else:
        scene = scene_config(config)
        bundle, results = train_joint_bundle(samples, object_model(scene.object), prior, cfg,
                                             default_hand_geometry())
    bundle.save(paths["bundle"])
    curves = {role: {"loss": r.curve, "eval": r.eval_curve} for role, r in results.items()}
    os.makedirs(paths["reports"], exist_ok=True)
    write_json(os.path.join(paths["reports"], "training.json"), curves)
    return bundle


def load_bundle(config, path, stage):
    _require(stage, path)
    return HandBundle.load(path) if config["mode"] == "hand" else JointBundle.load(path)


def evaluate_hand_loop(samples, bundle, iterations, progress=False):
    """
    Mean joint error after each iteration, one MetricReport per iteration count.

    Trajectory entry i equals a run with ``i`` iterations, so one run per
    sample covers every count.
    """
    reports = [MetricReport(f"hand-joint-error@{n}") for n in range(iterations + 1)]
    for sample in tqdm(samples, desc="Hand loop", disable=not progress):
        try:
            state = run_hand_loop(sample.depth, bundle, iterations, sample.camera)
        except GeometryError as e:
            for report in reports:
                report.skipped.append({"index": sample.index, "reason": str(e)})
            continue
        for report, pose in zip(reports, state.hand_trajectory):
            report.values.append(mean_joint_error(pose, sample.hand_pose))
    return reports


def _sample_E(sample, hand_pose, obj_pose, model, geometry):
    tips = list(geometry.fingertips)
    visibility = visibility_for(sample, geometry, model)
    return combined_metric_E(hand_pose[tips], sample.hand_pose[tips], visibility,
                             corners_from_pose(obj_pose, model), corners_from_pose(sample.object_pose, model))


def evaluate_joint_loop(samples, bundle, iterations, geometry, parallel=True, progress=False):
    """Combined metric E and mean joint error after each iteration of the hand-object loop."""
    E = [MetricReport(f"combined-E@{n}") for n in range(iterations + 1)]
    hand = [MetricReport(f"hand-joint-error@{n}") for n in range(iterations + 1)]
    for sample in tqdm(samples, desc="Joint loop", disable=not progress):
        if sample.object_pose is None:
            continue
        try:
            _, _, state = run_joint_loop(sample.depth, bundle, iterations, sample.camera, parallel)
        except GeometryError as e:
            for report in E + hand:
                report.skipped.append({"index": sample.index, "reason": str(e)})
            continue
        for n, (hand_pose, obj_pose) in enumerate(zip(state.hand_trajectory, state.object_trajectory)):
            value = _sample_E(sample, hand_pose, obj_pose, bundle.model, geometry)
            if value is None:
                E[n].skipped.append({"index": sample.index, "reason": "nothing visible"})
            else:
                E[n].values.append(value)
            hand[n].values.append(mean_joint_error(hand_pose, sample.hand_pose))
    return E, hand


def evaluate_combined_predictor(samples, predictor, model, geometry):
    """Combined metric E of the single-network predictor on center-of-mass crops."""
    report = MetricReport("combined-predictor-E")
    for sample in samples:
        if sample.object_pose is None:
            continue
        try:
            com = center_of_mass(sample.depth, sample.camera)
            crop = crop_cube(sample.depth, com, predictor.cube, sample.camera,
                             predictor.network.input_shape[-1])
        except GeometryError as e:
            report.skipped.append({"index": sample.index, "reason": str(e)})
            continue
        out = predictor.predict(crop.patch)
        J = sample.hand_pose.shape[0]
        hand_pose = com + out[:3 * J].reshape(J, 3)
        obj_pose = pose_from_corners(com + out[3 * J:].reshape(8, 3), model)
        value = _sample_E(sample, hand_pose, obj_pose, model, geometry)
        if value is None:
            report.skipped.append({"index": sample.index, "reason": "nothing visible"})
        else:
            report.values.append(value)
    return report


def stage_run_loop(config, out, progress=False):
    paths = _paths(out)
    samples, _ = load_dataset(_require("run-loop", paths["test"]))
    bundle = load_bundle(config, paths["bundle"], "run-loop")
    n = config["loop"]["iterations"]
    if config["mode"] == "hand":
        reports = {"hand": [r.to_dict() for r in evaluate_hand_loop(samples, bundle, n, progress)]}
    else:
        geometry = default_hand_geometry()
        E, hand = evaluate_joint_loop(samples, bundle, n, geometry, config["loop"]["parallel"], progress)
        reports = {"combined": [r.to_dict() for r in E], "hand": [r.to_dict() for r in hand]}
        if config["loop"]["compare_combined"]:
            train_samples, _ = load_dataset(_require("run-loop", paths["train"]))
            result = train_predictor_combined(train_samples, bundle.model, train_config(config, out, progress))
            reports["combined_predictor"] = evaluate_combined_predictor(samples, result.model, bundle.model,
                                                                        geometry).to_dict()
    os.makedirs(paths["reports"], exist_ok=True)
    write_json(os.path.join(paths["reports"], "loop.json"), reports)
    for entry in reports["hand"]:
        logger.info(MetricReport.from_dict(entry).summary())
    return reports


def stage_audit(config, out):
    """Held-out update audit of the hand updater."""
    paths = _paths(out)
    if config["mode"] != "hand":
        logger.info("The update audit runs on hand-only experiments; skipping")
        return None
    samples, _ = load_dataset(_require("audit", paths["test"]))
    bundle = load_bundle(config, paths["bundle"], "audit")
    cfg = train_config(config)
    crops = prepare_hand_samples(samples, cfg, bundle.cube, salt=9)
    result = update_audit(crops, bundle.updater, hand_synthesize_fn(bundle.synthesizer), config["audit"]["radii"],
                          cfg, derive_rng(config["seed"], 9000))
    os.makedirs(paths["reports"], exist_ok=True)
    write_json(os.path.join(paths["reports"], "audit.json"), result.to_dict())
    return result


def run_baseline(samples, bundle, method="lbfgsb", max_evaluations=200, seed=0, trace_dir=None):
    """
    Direct fit from the predictor initialization on each sample.

    Returns:
        list of dict: per-sample initial and final errors, objectives and flags
    """
    rows = []
    for sample in samples:
        try:
            state = run_hand_loop(sample.depth, bundle, 0, sample.camera)
        except GeometryError as e:
            logger.warning(f"Baseline skips sample {sample.index}: {e}")
            continue
        location = state.locations["hand"]
        initial = (state.hand_trajectory[0] - location).ravel()
        problem = synthesizer_problem(state.observed, bundle.synthesizer, initial, max_evaluations)
        if method == "pso":
            fit = pso_fit(problem, SwarmConfig(seed=int(derive_rng(seed, sample.index).integers(2 ** 31))))
        else:
            fit = direct_fit(problem)
        final_pose = location + fit.pose.reshape(-1, 3)
        initial_error = mean_joint_error(state.hand_trajectory[0], sample.hand_pose)
        final_error = mean_joint_error(final_pose, sample.hand_pose)
        trace_path = ""
        if trace_dir:
            os.makedirs(trace_dir, exist_ok=True)
            trace_path = os.path.join(trace_dir, f"trace_{sample.index:06d}.json")
            write_json(trace_path, {"objective": fit.trace, "success": fit.success, "message": fit.message})
        rows.append({
            "index": sample.index,
            "initial_error": initial_error,
            "final_error": final_error,
            "initial_objective": fit.trace[0],
            "final_objective": fit.trace[-1],
            "success": fit.success,
            "objective_down_error_up": bool(fit.trace[-1] < fit.trace[0] and final_error > initial_error),
            "trace": trace_path,
        })
    return rows


def write_baseline_csv(path, rows):
    fields = ["index", "initial_error", "final_error", "initial_objective", "final_objective",
              "success", "objective_down_error_up", "trace"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in fields})


def stage_baseline(config, out):
    paths = _paths(out)
    if config["mode"] != "hand":
        logger.info("The direct-fit baseline runs on hand-only experiments; skipping")
        return []
    samples, _ = load_dataset(_require("baseline", paths["test"]))
    bundle = load_bundle(config, paths["bundle"], "baseline")
    reports_dir = paths["reports"]
    os.makedirs(reports_dir, exist_ok=True)
    rows = run_baseline(samples[:config["baseline"]["samples"]], bundle, config["baseline"]["method"],
                        config["baseline"]["max_evaluations"], config["seed"],
                        os.path.join(reports_dir, "baseline_traces"))
    write_baseline_csv(os.path.join(reports_dir, "baseline.csv"), rows)
    report = {
        "initial": MetricReport("baseline-initial", [r["initial_error"] for r in rows]).to_dict(),
        "final": MetricReport("baseline-final", [r["final_error"] for r in rows]).to_dict(),
        "objective_down_error_up": sum(r["objective_down_error_up"] for r in rows),
    }
    write_json(os.path.join(reports_dir, "baseline.json"), report)
    return rows


def reproducibility_stamp(config, manifests=None):
    return {
        "config_hash": sha256_of(config),
        "seed": config["seed"],
        "dataset_seeds": {"train": config["seed"] * 2, "test": config["seed"] * 2 + 1},
        "manifests": manifests or {},
        "version": VERSION,
    }


def stage_metrics(config, out):
    """Summary of every report present plus the stamp and report checksums."""
    paths = _paths(out)
    reports_dir = _require("metrics", paths["reports"])
    summary = {}
    for name in ("loop.json", "baseline.json", "audit.json"):
        path = os.path.join(reports_dir, name)
        if os.path.exists(path):
            summary[name] = sha256_of(read_json(path))
    manifests = {}
    for split in ("train", "test"):
        manifest = os.path.join(paths[split], "manifest.json")
        if os.path.exists(manifest):
            manifests[split] = sha256_of(read_json(manifest))
    write_json(os.path.join(reports_dir, "stamp.json"), reproducibility_stamp(config, manifests))
    write_json(os.path.join(reports_dir, "checksums.json"), summary)
    return summary


def run_experiment(config_path, out=None, progress=False):
    """
    Run the configured stages in order.

    Returns:
        str: the experiment directory.

    Raises:
        MissingArtifactError: when a stage's input is absent.
    """
    config = load_config(config_path)
    config["seed"] = resolve_seed(config["seed"])
    out = out or os.path.join("runs", config["name"])
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), config)
    logger.info(f"Experiment '{config['name']}' ({config['mode']}) -> {out}")
    for stage in STAGES:
        if stage not in config["stages"]:
            continue
        logger.info(f"Stage {stage}")
        if stage == "gen-data":
            stage_gen_data(config, out, progress)
        elif stage == "fit-prior":
            stage_fit_prior(config, out)
        elif stage == "train":
            stage_train(config, out, progress)
        elif stage == "run-loop":
            stage_run_loop(config, out, progress)
        elif stage == "audit":
            stage_audit(config, out)
        elif stage == "baseline":
            stage_baseline(config, out)
        else:
            stage_metrics(config, out)
    return out


# ---------------------------------------------------------------------------
# Image dumps
# ---------------------------------------------------------------------------

def _to_uint16(depth_mm):
    return np.clip(np.round(depth_mm), 0, 65535).astype(np.uint16)


def write_pgm(path, image):
    Image.fromarray(np.asarray(image, np.uint16)).save(path, format="PPM")


def read_pgm(path):
    with Image.open(path) as im:
        return np.asarray(im).astype(np.uint16)


def dump_images(state, out_dir):
    """
    Per trajectory entry: observed, synthesized and |difference| crops as
    16-bit PGM (mm), and the pose as a JSON sidecar.

    Returns:
        list of str: the written paths
    """
    os.makedirs(out_dir, exist_ok=True)
    observed = _to_uint16(denormalize_depth(state.observed, state.crop_z, state.half_range))
    written = []
    for i, synth in enumerate(state.synthesized):
        synthesized = _to_uint16(denormalize_depth(synth, state.crop_z, state.half_range))
        difference = np.abs(observed.astype(np.int32) - synthesized.astype(np.int32)).astype(np.uint16)
        for name, image in (("observed", observed), ("synthesized", synthesized), ("difference", difference)):
            path = os.path.join(out_dir, f"{name}_{i:02d}.pgm")
            write_pgm(path, image)
            written.append(path)
        sidecar = {"iteration": i, "hand_pose": np.asarray(state.hand_trajectory[i]).tolist(),
                   "crop_z": state.crop_z, "half_range": state.half_range}
        if i < len(state.object_trajectory):
            sidecar["object_pose"] = state.object_trajectory[i].as_matrix34().ravel().tolist()
        path = os.path.join(out_dir, f"pose_{i:02d}.json")
        write_json(path, sidecar)
        written.append(path)
    return written
