"""Command-line entry point: one subcommand per pipeline stage.

Every stage takes an optional ``--config`` JSON whose keys are the stage's
parameters; command-line flags override config values. Each run writes a JSON
report that embeds the effective config and a provenance record. Exit codes:
0 ok, 1 runtime error, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("saebrain")

SCHEMA_VERSION = 1

CV_DEFAULTS = {"n_folds": 4, "inner_folds": 3, "lambdas": [10.0 ** p for p in range(7)],
               "standardize": True, "n_boot": 1000}

STAGE_DEFAULTS = {
    "synth": {"scenario": "pipeline", "params": {}},
    "sae-train": {"M": 64, "l1": 5e-4, "lr": 3e-4, "batch_tokens": 4096, "steps": 50_000,
                  "resample_every": 5_000, "target_l0": 50.0, "lr_decay_frac": 0.2,
                  "label_floor": 0.9},
    "align": {"hrf": {}, "cutoff_hz": 1.0 / 128, "use_model": True},
    "encode": dict(CV_DEFAULTS, subset=None, topography=False),
    "partition": dict(CV_DEFAULTS, shapley=False, n_orderings=1000, block=100, tol=1e-3,
                      soft=False),
    "patch": dict(CV_DEFAULTS, n_controls=10, cutoff_hz=1.0 / 128),
    "converge": {"n_perm": 10_000, "q": 0.05},
    "prederr": dict(CV_DEFAULTS, floor=0.5, offset=4, n_boot=10_000),
    "rtfit": {"null": "base", "alt": "base+sae"},
    "labels-audit": {"perturb": [], "confidence_threshold": None},
}
COMMON_KEYS = {"seed", "threads", "schema_version"}

# flag dest -> config key, for flags that mirror a parameter
PARAM_FLAGS = {
    "synth": ("scenario",),
    "sae-train": ("M", "l1", "lr", "batch_tokens", "steps", "resample_every", "target_l0",
                  "lr_decay_frac", "label_floor"),
    "align": ("cutoff_hz",),
    "encode": ("n_folds", "inner_folds", "n_boot", "subset", "topography"),
    "partition": ("n_folds", "inner_folds", "n_boot", "shapley", "n_orderings", "block",
                  "tol", "soft"),
    "patch": ("n_folds", "inner_folds", "n_boot", "n_controls"),
    "converge": ("n_perm", "q"),
    "prederr": ("n_folds", "inner_folds", "n_boot", "floor", "offset"),
    "rtfit": ("null", "alt"),
    "labels-audit": ("perturb", "confidence_threshold"),
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- parsing

def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saebrain", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"saebrain {__version__}")
    sub = p.add_subparsers(dest="stage", required=True, metavar="STAGE")

    def stage(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of stage parameters")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS/permutation threads (default: all cores)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    def cv(sp):
        sp.add_argument("--n-folds", dest="n_folds", type=int, default=None)
        sp.add_argument("--inner-folds", dest="inner_folds", type=int, default=None)
        sp.add_argument("--n-boot", dest="n_boot", type=int, default=None)
        sp.add_argument("--plan", help="CV plan JSON (default: contiguous story folds)")
        sp.add_argument("--manifests", help="story manifests dir; censor masks are applied")

    sp = stage("synth", "generate planted-ground-truth data")
    sp.add_argument("--scenario", default=None,
                    choices=["dictionary", "encoding", "topography", "patching", "prederr",
                             "rt", "pipeline"])
    sp.add_argument("--out", required=True, help="output directory")

    sp = stage("sae-train", "train a sparse autoencoder")
    sp.add_argument("--data", required=True, help="NMAT file or directory of NMAT files")
    sp.add_argument("--out", required=True, help="model path (writes .json + .nmat blocks)")
    sp.add_argument("--truth", help="synthetic truth JSON; also writes labels for learned features")
    for flag, typ in (("M", int), ("l1", float), ("lr", float), ("batch-tokens", int),
                      ("steps", int), ("resample-every", int), ("target-l0", float),
                      ("lr-decay-frac", float), ("label-floor", float)):
        sp.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ, default=None)

    sp = stage("align", "HRF-convolve, bin and high-pass per-word features to TRs")
    sp.add_argument("--acts", required=True, help="directory of per-story word x dim NMAT files")
    sp.add_argument("--manifests", required=True, help="directory of story manifest JSON files")
    sp.add_argument("--model", help="SAE model; features are its codes instead of raw activations")
    sp.add_argument("--cutoff-hz", dest="cutoff_hz", type=float, default=None)
    sp.add_argument("--out", required=True, help="output directory of TR designs")

    sp = stage("encode", "nested-CV voxelwise ridge encoding")
    sp.add_argument("--designs", required=True)
    sp.add_argument("--voxels", required=True)
    sp.add_argument("--subset", default=None, help="labels.json:category restricts columns")
    sp.add_argument("--topography", action="store_true", default=None,
                    help="also fit each subcategory and average r per region")
    sp.add_argument("--labels", help="labels JSON (needed for --topography)")
    sp.add_argument("--regions", help="voxel -> region JSON (needed for --topography)")
    sp.add_argument("--out", required=True)
    cv(sp)

    sp = stage("partition", "unique/shared variance and Shapley attribution")
    sp.add_argument("--designs", required=True)
    sp.add_argument("--voxels", required=True)
    sp.add_argument("--groups", required=True, help="labels JSON defining feature groups")
    sp.add_argument("--shapley", action="store_true", default=None)
    sp.add_argument("--soft", action="store_true", default=None,
                    help="fractional membership from label confidences")
    sp.add_argument("--n-orderings", dest="n_orderings", type=int, default=None)
    sp.add_argument("--block", type=int, default=None)
    sp.add_argument("--tol", type=float, default=None)
    sp.add_argument("--out", required=True)
    cv(sp)

    sp = stage("patch", "mean-ablate a feature subset and measure the encoding change")
    sp.add_argument("--model", required=True)
    sp.add_argument("--acts", required=True, help="per-story activations (words, or TRs without --manifests)")
    sp.add_argument("--voxels", required=True)
    sp.add_argument("--spec", required=True, help="ablation spec JSON {subset, mode, seed}")
    sp.add_argument("--n-controls", dest="n_controls", type=int, default=None)
    sp.add_argument("--out", required=True)
    cv(sp)

    sp = stage("converge", "topography convergence test battery")
    sp.add_argument("--pred", required=True, help="a-priori predicted matrix JSON")
    sp.add_argument("--obs", required=True, nargs="+", help="per-subject observed cell JSON files")
    sp.add_argument("--n-perm", dest="n_perm", type=int, default=None)
    sp.add_argument("--q", type=float, default=None)
    sp.add_argument("--out", required=True)

    sp = stage("prederr", "cross-layer prediction errors and combined encoding")
    sp.add_argument("--model-hi", dest="model_hi", required=True)
    sp.add_argument("--model-lo", dest="model_lo", required=True)
    sp.add_argument("--features-hi", dest="features_hi", required=True)
    sp.add_argument("--features-lo", dest="features_lo", required=True)
    sp.add_argument("--voxels", required=True, nargs="+", help="one voxel directory per subject")
    sp.add_argument("--floor", type=float, default=None)
    sp.add_argument("--offset", type=int, default=None)
    sp.add_argument("--out", required=True)
    cv(sp)

    sp = stage("rtfit", "crossed random-intercept LMM and likelihood-ratio test")
    sp.add_argument("--design", required=True)
    sp.add_argument("--null", default=None, help="block expression, e.g. base")
    sp.add_argument("--alt", default=None, help="block expression, e.g. base+sae")
    sp.add_argument("--out", required=True)

    sp = stage("labels-audit", "inter-rater agreement and label audits")
    sp.add_argument("--a", help="labels JSON of rater A")
    sp.add_argument("--b", help="labels JSON of rater B")
    sp.add_argument("--published", action="store_true",
                    help="audit the published rater confusion table instead of files")
    sp.add_argument("--perturb", type=_float_list, default=None, help="comma-separated flip rates")
    sp.add_argument("--confidence-threshold", dest="confidence_threshold", type=float, default=None)
    sp.add_argument("--out", required=True)
    return p


IO_KEYS = {
    "synth": ("out",),
    "sae-train": ("data", "out", "truth"),
    "align": ("acts", "manifests", "model", "out"),
    "encode": ("designs", "voxels", "labels", "regions", "plan", "manifests", "out"),
    "partition": ("designs", "voxels", "groups", "plan", "manifests", "out"),
    "patch": ("model", "acts", "voxels", "spec", "plan", "manifests", "out"),
    "converge": ("pred", "obs", "out"),
    "prederr": ("model_hi", "model_lo", "features_hi", "features_lo", "voxels", "plan",
                "manifests", "out"),
    "rtfit": ("design", "out"),
    "labels-audit": ("a", "b", "published", "out"),
}


def resolve_config(args) -> dict:
    """Defaults <- config file <- explicit flags; unknown config keys are rejected."""
    stage = args.stage
    cfg = json.loads(json.dumps(STAGE_DEFAULTS[stage]))
    cfg["seed"] = 0
    cfg["threads"] = None
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        allowed = set(STAGE_DEFAULTS[stage]) | COMMON_KEYS
        unknown = set(user) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys for {stage}: {sorted(unknown)}")
        if user.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError("unsupported config schema_version")
        user.pop("schema_version", None)
        cfg.update(user)
    for key in PARAM_FLAGS[stage] + ("seed", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["schema_version"] = SCHEMA_VERSION
    cfg["io"] = {k: getattr(args, k) for k in IO_KEYS[stage] if getattr(args, k, None) is not None}
    return cfg


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def provenance(cfg: dict) -> dict:
    import numpy
    import scipy

    return {"tool": "saebrain", "version": __version__, "config_sha256": config_hash(cfg),
            "seed": cfg["seed"], "numpy": numpy.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _n_jobs(cfg) -> int:
    return cfg["threads"] or os.cpu_count() or 1


# ---------------------------------------------------------------- file helpers

def read_story_dir(path) -> dict:
    from .matio import read_matrix

    files = sorted(Path(path).glob("*.nmat"))
    if not files:
        raise FileNotFoundError(f"no .nmat files in {path}")
    return {f.stem: read_matrix(f).astype("float64") for f in files}


def write_story_dir(path, blocks: dict) -> None:
    from .matio import write_matrix

    Path(path).mkdir(parents=True, exist_ok=True)
    for s in sorted(blocks):
        write_matrix(Path(path) / f"{s}.nmat", blocks[s])


def read_manifests(path) -> dict:
    from .matio import load_manifest

    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no manifests in {path}")
    out = {}
    for f in files:
        m = load_manifest(f)
        out[m.story_id] = m
    return out


def _censor(designs: dict, voxels: dict, manifests_dir):
    from .align import apply_censor

    if set(designs) != set(voxels):
        raise ValueError("designs and voxels cover different stories")
    if not manifests_dir:
        return designs, voxels
    mans = read_manifests(manifests_dir)
    d2, v2 = {}, {}
    for s in designs:
        d2[s], v2[s] = apply_censor(designs[s], voxels[s], mans[s].censor_mask)
    return d2, v2


def _plan(cfg, story_ids):
    from .encoding import CvPlan
    from .matio import read_json

    plan_path = cfg["io"].get("plan")
    if plan_path:
        plan = CvPlan.from_dict(read_json(plan_path))
    else:
        plan = CvPlan.leave_stories_out(story_ids, cfg["n_folds"], cfg["inner_folds"],
                                        cfg["lambdas"])
    plan.validate(story_ids)
    return plan


def _report(cfg, stage, result) -> dict:
    return {"stage": stage, "config": cfg, "provenance": provenance(cfg), "result": result}


def _write_report(path, report):
    from .matio import write_json

    write_json(path, report)
    log.info("wrote %s", path)
    return str(path)


# ---------------------------------------------------------------- stages

def run_synth(cfg):
    import numpy as np

    from . import synth
    from .matio import save_manifest, write_json, write_matrix
    from .topostats import apriori_json, apriori_matrix

    out = Path(cfg["io"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    params = dict(cfg["params"])
    seed = cfg["seed"]
    scen = cfg["scenario"]
    files = []

    def small_truth(truth, big=()):
        t = {k: v for k, v in truth.items() if k not in big}
        for k in big:
            if k in truth:
                write_matrix(out / f"truth_{k}.nmat", np.atleast_2d(truth[k]))
                t[k] = f"truth_{k}.nmat"
        write_json(out / "truth.json", t)
        files.append("truth.json")

    if scen == "dictionary":
        kw = dict(d=32, M_true=64, l0_true=4, T=50_000, noise=0.01, orthogonal=False)
        kw.update(params)
        X, truth = synth.gen_dictionary_data(seed=seed, **kw)
        write_matrix(out / "data.nmat", X)
        files.append("data.nmat")
        small_truth(truth, ("dictionary", "codes"))
    elif scen == "encoding":
        kw = dict(groups={"A": 10, "B": 10}, group_r2={"A": 0.3, "B": 0.1}, n_tr=2400,
                  n_voxels=50, n_stories=8)
        kw.update(params)
        designs, voxels, truth = synth.gen_encoding_scenario(seed=seed, **kw)
        write_story_dir(out / "designs", designs)
        write_story_dir(out / "voxels", voxels)
        write_json(out / "labels.json", [
            {"feature_id": c, "category": cat}
            for cat, (g, cols) in zip(("semantic", "syntactic", "lexical", "prediction", "other"),
                                      truth["groups"].items()) for c in cols])
        files += ["designs/", "voxels/", "labels.json"]
        small_truth(truth, ("weights",))
    elif scen == "topography":
        kw = dict(n_subjects=8, effect=0.05)
        kw.update(params)
        eff = kw.pop("effect")
        scores, truth = synth.gen_topography_scenario(apriori_matrix() * eff, seed=seed, **kw)
        for i, S in enumerate(scores):
            write_json(out / f"obs-{i + 1:02d}.json", {"cells": S})
            files.append(f"obs-{i + 1:02d}.json")
        write_json(out / "apriori.json", apriori_json())
        files.append("apriori.json")
        small_truth(truth)
    elif scen == "patching":
        kw = dict(groups={"causal": 8, "weak": 8, "noise": 16},
                  group_r2={"causal": 0.25, "weak": 0.08}, d=48, n_tr=2400, n_voxels=40)
        kw.update(params)
        model, designs, voxels, truth = synth.gen_patching_scenario(seed=seed, **kw)
        from .sae import save_model
        save_model(out / "sae.json", model)
        write_story_dir(out / "acts", designs)
        write_story_dir(out / "voxels", voxels)
        write_json(out / "spec.json", {"subset": truth["groups"]["causal"],
                                       "mode": "mean_feature", "seed": seed})
        files += ["sae.json", "acts/", "voxels/", "spec.json"]
        small_truth(truth, ("codes", "weights"))
    elif scen == "prederr":
        kw = dict(n_features=10, d=32, n_tr=1600, n_voxels=20, n_subjects=8, offsets=(4,))
        kw.update(params)
        hi, lo, dec_hi, dec_lo, subjects, truth = synth.gen_prederr_scenario(seed=seed, **kw)
        from .sae import SaeModel, save_model

        def as_model(D):
            M = D.shape[1]
            return SaeModel(D.T.copy(), D, np.zeros(M), np.zeros(D.shape[0]), seed)

        off = truth["offsets"][0]
        save_model(out / "sae_hi.json", as_model(dec_hi))
        save_model(out / "sae_lo.json", as_model(dec_lo[off]))
        write_story_dir(out / "features_hi", hi)
        write_story_dir(out / "features_lo", lo[off])
        for i, vox in enumerate(subjects):
            write_story_dir(out / "subjects" / f"sub-{i + 1:02d}", vox)
        files += ["sae_hi.json", "sae_lo.json", "features_hi/", "features_lo/", "subjects/"]
        small_truth(truth)
    elif scen == "rt":
        kw = dict(n_subjects=50, n_items=40, n_block=5, block_effect=0.05)
        kw.update(params)
        design, truth = synth.gen_rt_scenario(seed=seed, **kw)
        write_json(out / "rt.json", design)
        files.append("rt.json")
        small_truth(truth)
    elif scen == "pipeline":
        res = synth.gen_pipeline_scenario(seed=seed, **params)
        write_story_dir(out / "acts", res["acts"])
        for s, m in res["manifests"].items():
            (out / "manifests").mkdir(parents=True, exist_ok=True)
            save_manifest(out / "manifests" / f"{s}.json", m)
        for i, vox in enumerate(res["subjects"]):
            write_story_dir(out / "subjects" / f"sub-{i + 1:02d}", vox)
        write_json(out / "regions.json", res["regions"])
        write_json(out / "apriori.json", apriori_json())
        files += ["acts/", "manifests/", "subjects/", "regions.json", "apriori.json"]
        small_truth(res["truth"], ("dictionary",))
    else:
        raise ConfigError(f"unknown scenario {scen!r}")
    return out / "report.json", {"scenario": scen, "files": files}


def run_sae_train(cfg):
    import numpy as np

    from .matio import read_json, read_matrix, write_json
    from .sae import SaeHyper, sae_init, sae_train, save_model
    from .synth import labels_from_truth

    data_path = Path(cfg["io"]["data"])
    if data_path.is_dir():
        X = np.concatenate(list(read_story_dir(data_path).values()))
    else:
        X = read_matrix(data_path).astype(np.float64)
    hyper = SaeHyper(cfg["l1"], cfg["lr"], cfg["batch_tokens"], cfg["steps"],
                     cfg["resample_every"], cfg["target_l0"], cfg["lr_decay_frac"])
    model = sae_init(X.shape[1], int(cfg["M"]), cfg["seed"])
    model, rep = sae_train(model, X, hyper)
    out = Path(cfg["io"]["out"])
    save_model(out, model)
    result = rep.to_dict()
    result["loss_trace"] = rep.loss_trace[:: max(1, len(rep.loss_trace) // 100)]
    result["n_tokens"] = int(X.shape[0])
    result["d"], result["M"] = model.d, model.M
    if cfg["io"].get("truth"):
        truth_path = Path(cfg["io"]["truth"])
        truth = read_json(truth_path)
        D = read_matrix(truth_path.parent / truth["dictionary"]).astype(np.float64)
        rows = labels_from_truth(model.W_dec, D, truth["atoms"], cfg["label_floor"])
        labels_path = out.with_name(out.stem + ".labels.json")
        write_json(labels_path, rows)
        result["labels"] = labels_path.name
        result["matched_features"] = sum(r["category"] != "other" for r in rows)
    return out.with_name(out.stem + ".report.json"), result


def run_align(cfg):
    from .align import HrfParams, align_story
    from .sae import load_model, sae_encode

    acts = read_story_dir(cfg["io"]["acts"])
    mans = read_manifests(cfg["io"]["manifests"])
    hrf = HrfParams(**cfg["hrf"])
    model = load_model(cfg["io"]["model"]) if cfg["io"].get("model") and cfg["use_model"] else None
    out = Path(cfg["io"]["out"])
    designs = {}
    for s in sorted(acts):
        if s not in mans:
            raise ValueError(f"no manifest for story {s}")
        feats = sae_encode(model, acts[s]) if model is not None else acts[s]
        designs[s] = align_story(mans[s], feats, hrf, cfg["cutoff_hz"])
    write_story_dir(out, designs)
    shapes = {s: list(v.shape) for s, v in designs.items()}
    return out / "report.json", {"stories": shapes, "features": "sae" if model else "raw"}


def _subset_columns(spec: str):
    from .labels import load_labels

    path, _, cat = spec.rpartition(":")
    if not path:
        raise ConfigError("subset must look like labels.json:category")
    cols = load_labels(path).group_columns().get(cat)
    if not cols:
        raise ValueError(f"no features labeled {cat!r}")
    return cols


def run_encode(cfg):
    import numpy as np

    from .encoding import nested_cv_encode
    from .labels import load_labels
    from .matio import REGIONS, load_regions
    from .partition import encode_subset, restrict
    from .topostats import SUBCATEGORIES

    io = cfg["io"]
    designs, voxels = _censor(read_story_dir(io["designs"]), read_story_dir(io["voxels"]),
                              io.get("manifests"))
    plan = _plan(cfg, sorted(designs))
    kw = dict(standardize=cfg["standardize"], n_boot=cfg["n_boot"], seed=cfg["seed"])
    if cfg["subset"]:
        designs = restrict(designs, _subset_columns(cfg["subset"]))
    res = nested_cv_encode(designs, voxels, plan, final_fit=False, **kw)
    result = {"plan": plan.to_dict(), "encoding": res.summary()}
    if cfg["topography"]:
        if not (io.get("labels") and io.get("regions")):
            raise ConfigError("--topography needs --labels and --regions")
        subs = load_labels(io["labels"]).subcategory_columns()
        regions = load_regions(io["regions"])
        region_of = np.array([regions[str(v)] for v in range(res.r.size)])
        cells = np.zeros((len(SUBCATEGORIES), len(REGIONS)))
        for i, sc in enumerate(SUBCATEGORIES):
            if sc not in subs:
                raise ValueError(f"no features with subcategory {sc!r}")
            r = encode_subset(designs, voxels, plan, subs[sc], **kw).r
            for j, reg in enumerate(REGIONS):
                cells[i, j] = float(np.mean(r[region_of == reg]))
        result["cells"] = cells
        result["rows"], result["cols"] = list(SUBCATEGORIES), list(REGIONS)
    return Path(io["out"]), result


def run_partition(cfg):
    from .labels import CATEGORIES, load_labels, soft_group_weights
    from .partition import coalition_value_fn, shapley_sample, soft_unique_variance, unique_variance

    io = cfg["io"]
    designs, voxels = _censor(read_story_dir(io["designs"]), read_story_dir(io["voxels"]),
                              io.get("manifests"))
    plan = _plan(cfg, sorted(designs))
    labels = load_labels(io["groups"])
    groups = labels.group_columns()
    if cfg["soft"]:
        k = next(iter(designs.values())).shape[1]
        part = soft_unique_variance(designs, voxels, soft_group_weights(labels, k), CATEGORIES,
                                    plan, n_boot=cfg["n_boot"], seed=cfg["seed"])
    else:
        part = unique_variance(designs, voxels, groups, plan, n_boot=cfg["n_boot"],
                               seed=cfg["seed"])
    result = {"groups": {g: len(c) for g, c in groups.items()}, "partition": part.to_dict()}
    if cfg["shapley"]:
        sh = shapley_sample(list(groups), coalition_value_fn(designs, voxels, groups, plan),
                            cfg["n_orderings"], cfg["block"], cfg["seed"], cfg["tol"])
        result["shapley"] = sh.to_dict()
    return Path(io["out"]), result


def run_patch(cfg):
    from .matio import read_json
    from .patching import AblationSpec, patch_report
    from .sae import load_model

    io = cfg["io"]
    model = load_model(io["model"])
    acts = read_story_dir(io["acts"])
    voxels = read_story_dir(io["voxels"])
    spec = AblationSpec.from_dict(read_json(io["spec"]))
    align_fn = None
    if io.get("manifests"):
        from .align import align_story
        mans = read_manifests(io["manifests"])

        def align_fn(blocks):
            return {s: align_story(mans[s], blocks[s], cutoff_hz=cfg["cutoff_hz"]) for s in blocks}
    plan = _plan(cfg, sorted(acts))
    rep = patch_report(model, acts, voxels, spec, plan, n_controls=cfg["n_controls"],
                       n_boot=cfg["n_boot"], align_fn=align_fn)
    return Path(io["out"]), rep


def run_converge(cfg):
    import numpy as np

    from .matio import read_json
    from .topostats import convergence_battery, load_predicted

    io = cfg["io"]
    P = load_predicted(read_json(io["pred"]))
    blocks = []
    for f in io["obs"]:
        d = read_json(f)
        if isinstance(d, dict):
            # Encode stage reports wrap the cells in their result block.
            d = d["result"] if "result" in d else d
            if "cells" not in d:
                raise ConfigError(f"{f}: no 'cells' entry")
            d = d["cells"]
        cells = np.asarray(d, dtype=float)
        blocks.extend(cells if cells.ndim == 3 else [cells])
    scores = np.stack(blocks)
    res = convergence_battery(P, scores, cfg["n_perm"], cfg["seed"], cfg["q"], _n_jobs(cfg))
    res["n_subjects"] = int(scores.shape[0])
    return Path(io["out"]), res


def run_prederr(cfg):
    import numpy as np

    from .prederr import align_layers, combined_encode, fit_pred_error, pred_error_designs, vif_between
    from .sae import load_model

    io = cfg["io"]
    hi_model, lo_model = load_model(io["model_hi"]), load_model(io["model_lo"])
    hi = read_story_dir(io["features_hi"])
    lo = read_story_dir(io["features_lo"])
    subjects = [read_story_dir(v) for v in io["voxels"]]
    cmap = align_layers(hi_model.W_dec, lo_model.W_dec, cfg["floor"], cfg["offset"])
    if cmap.hi_ids.size == 0:
        raise ValueError("no features matched above the similarity floor")
    plan = _plan(cfg, sorted(hi))
    ids = sorted(hi)
    F_hi = np.concatenate([hi[s] for s in ids])
    F_lo = np.concatenate([lo[s] for s in ids])
    _, eps = fit_pred_error(F_hi, F_lo, cmap)
    vif = vif_between(F_hi[:, cmap.hi_ids], eps)
    res = combined_encode(hi, lambda tr: pred_error_designs(hi, lo, cmap, tr), subjects, plan,
                          cfg["standardize"], cfg["n_boot"], cfg["seed"])
    res["map"] = cmap.to_dict()
    res["vif"] = vif
    return Path(io["out"]), res


def run_rtfit(cfg):
    from .matio import read_json
    from .rtglmm import RtDesign, fit_lmm, lrt

    design = RtDesign.from_dict(read_json(cfg["io"]["design"]))
    null = fit_lmm(design, design.columns_for(cfg["null"]))
    alt = fit_lmm(design, design.columns_for(cfg["alt"]))
    return Path(cfg["io"]["out"]), {"null": null.to_dict(), "alt": alt.to_dict(),
                                    "lrt": lrt(null, alt)}


def run_labels_audit(cfg):
    from . import labels as L

    io = cfg["io"]
    if io.get("published"):
        a, b = L.labelsets_from_confusion(L.PUBLISHED_CONFUSION)
    elif io.get("a") and io.get("b"):
        a, b = L.load_labels(io["a"]), L.load_labels(io["b"])
    elif io.get("a"):
        a, b = L.load_labels(io["a"]), None
    else:
        raise ConfigError("give --a [--b] or --published")
    result = {"agreement": L.audit_report(a, b) if b is not None else None, "n_a": len(a)}
    audits = {}
    for p in cfg["perturb"]:
        flipped = L.perturb_labels(a, p, cfg["seed"])
        audits[str(p)] = {"n_changed": sum(a.labels[i].category != flipped.labels[i].category
                                          for i in a.labels),
                          "kappa_vs_original": L.cohen_kappa(a, flipped)}
    result["perturbation"] = audits
    if cfg["confidence_threshold"] is not None:
        kept = L.confidence_filter(a, cfg["confidence_threshold"])
        result["confidence_filter"] = {"threshold": cfg["confidence_threshold"],
                                       "kept": len(kept), "total": len(a),
                                       "kept_ids": kept.ids()}
    return Path(io["out"]), result


RUNNERS = {
    "synth": run_synth, "sae-train": run_sae_train, "align": run_align, "encode": run_encode,
    "partition": run_partition, "patch": run_patch, "converge": run_converge,
    "prederr": run_prederr, "rtfit": run_rtfit, "labels-audit": run_labels_audit,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        _set_threads(cfg["threads"])
        path, result = RUNNERS[args.stage](cfg)
        _write_report(path, _report(cfg, args.stage, result))
    except ConfigError as e:
        print(f"saebrain {args.stage}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - surfaced as exit status 1
        log.debug("stage failed", exc_info=True)
        print(f"saebrain {args.stage}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
