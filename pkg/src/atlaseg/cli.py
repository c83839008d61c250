"""Command-line frontend.

Subcommands: generate, register, segment, evaluate, ablate. A single JSON
config with sections {"registration", "fusion", "phantom"} feeds every
command; command-line flags override config keys, and the OASIS_SEED
environment variable overrides the config seed (flags beat both). Every
run writes one run_manifest.json next to its outputs; all output files
are written atomically.

Exit codes: 0 success, 2 input or parse error, 3 numerical failure
(non-finite loss), 4 metric convention error (empty mask where a region
metric is required).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import fusion, metrics, oasg, phantom
from .atlas import AtlasEntry, AtlasSet, load_manifest
from .errors import (
    AtlasegError,
    EmptyMask,
    EmptyReference,
    InvalidParams,
    NonFiniteLoss,
    OasgFormatError,
)
from .grid import Image2D, LabelMap2D, Volume
from .registration import RegistrationConfig, register_pair, register_to_test

EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_METRIC = 4

SEED_ENV_VAR = "OASIS_SEED"


# ---------------------------------------------------------------- config

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidParams(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise InvalidParams(f"config {path} must be a JSON object")
    return doc


def _resolve_seed(section: dict, cli_seed) -> int | None:
    """Precedence: CLI flag, then OASIS_SEED, then the config value."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise InvalidParams(f"{SEED_ENV_VAR} must be an integer: {env!r}") from e
    if "seed" in section:
        return int(section["seed"])
    return None


def _registration_config(config: dict, cli_seed) -> RegistrationConfig:
    section = dict(config.get("registration", {}))
    seed = _resolve_seed(section, cli_seed)
    if seed is not None:
        section["seed"] = seed
    return RegistrationConfig.from_json_dict(section)


def _phantom_params(config: dict, args) -> phantom.PhantomParams:
    section = dict(config.get("phantom", {}))
    seed = _resolve_seed(section, args.seed)
    if seed is not None:
        section["seed"] = seed
    if getattr(args, "grid", None) is not None:
        section["width"] = section["height"] = int(args.grid)
    if getattr(args, "slices", None) is not None:
        section["slices"] = int(args.slices)
    for key in ("organ_a_px", "organ_b_px"):
        if key in section:
            section[key] = tuple(section[key])
    try:
        return phantom.PhantomParams(**section)
    except TypeError as e:
        raise InvalidParams(f"bad phantom config: {e}") from e


def _fusion_defaults(config: dict, args) -> tuple[str, int]:
    section = config.get("fusion", {})
    strategy = getattr(args, "strategy", None) or section.get("strategy", "oasis")
    n = getattr(args, "n_atlases", None)
    if n is None:
        n = section.get("n_atlases", fusion.DEFAULT_N_ATLASES)
    return str(strategy), int(n)


# ------------------------------------------------------------- manifests

def _write_text(path, text: str) -> None:
    oasg.write_atomic(path, text.encode())


def _write_run_manifest(out_dir: Path, command: str, args, seed, started: float,
                        inputs: list, pair_summaries: list) -> None:
    doc = {
        "command": command,
        "config": str(args.config) if getattr(args, "config", None) else None,
        "inputs": [str(p) for p in inputs],
        "output_dir": str(out_dir),
        "seed": seed,
        "wall_time_s": round(time.perf_counter() - started, 3),
        "pair_loss_summaries": pair_summaries,
    }
    _write_text(out_dir / "run_manifest.json", json.dumps(doc, indent=2) + "\n")


def _ensure_out(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------- cohort + volume loading

def _read_image_volume(path) -> Volume:
    vol = oasg.read_volume(path)
    for s in vol.slices:
        if not isinstance(s, Image2D):
            raise OasgFormatError(f"{path}: expected image slices")
    return vol


def _read_label_volume(path) -> Volume:
    vol = oasg.read_volume(path)
    for s in vol.slices:
        if not isinstance(s, LabelMap2D):
            raise OasgFormatError(f"{path}: expected label slices")
    return vol


class _CohortOnDisk:
    """Atlas volumes from a manifest, exposed as per-slice atlas sets."""

    def __init__(self, manifest_path):
        self.entries = []
        for item in load_manifest(manifest_path):
            image = _read_image_volume(item["image"])
            label = _read_label_volume(item["label"])
            if image.n_slices != label.n_slices or image.shape != label.shape:
                raise OasgFormatError(
                    f"atlas {item['id']}: image and label volumes disagree"
                )
            self.entries.append((item["id"], image, label))
        counts = {img.n_slices for _, img, _ in self.entries}
        shapes = {img.shape for _, img, _ in self.entries}
        if len(counts) != 1 or len(shapes) != 1:
            raise OasgFormatError("atlas volumes must share slice count and dims")
        self.n_slices = counts.pop()
        self._sets: dict[int, AtlasSet] = {}

    def atlas_set(self, slice_idx: int) -> AtlasSet:
        if slice_idx not in self._sets:
            self._sets[slice_idx] = AtlasSet(
                tuple(
                    AtlasEntry.build(aid, img.slices[slice_idx], lbl.slices[slice_idx])
                    for aid, img, lbl in self.entries
                )
            )
        return self._sets[slice_idx]


# ------------------------------------------------------ parallel warm-up

def _run_registration_task(task):
    kind, atlas_img, atlas_lbl, tgt_img, tgt_lbl, cfg = task
    if kind == "pair":
        return register_pair(atlas_img, atlas_lbl, tgt_img, tgt_lbl, cfg)
    return register_to_test(atlas_img, tgt_img, cfg)


def _warm_cache(cache: fusion.RegistrationCache, tasks: dict, jobs: int) -> list:
    """Run the unique registrations (serially or in a process pool), fill
    the cache, and return loss summaries in deterministic task-id order."""
    ordered = sorted(tasks)
    items = [tasks[tid] for tid in ordered]
    if jobs > 1 and len(items) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_registration_task, items, chunksize=1))
    else:
        results = [_run_registration_task(t) for t in items]
    summaries = []
    for tid, task, result in zip(ordered, items, results):
        kind, atlas_img, atlas_lbl, tgt_img, tgt_lbl, cfg = task
        if kind == "pair":
            cache.put_pair(atlas_img, atlas_lbl, tgt_img, tgt_lbl, cfg, result)
        else:
            cache.put_test(atlas_img, tgt_img, cfg, result)
        summaries.append(
            {
                "pair": tid,
                "initial_total": result.loss_trace[0].total,
                "final_total": result.loss_trace[-1].total,
                "converged": result.converged,
            }
        )
    return summaries


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    started = time.perf_counter()
    config = _load_config(args.config)
    params = _phantom_params(config, args)
    out = _ensure_out(args)
    cohort = phantom.generate_cohort(params, args.n_atlases, args.n_tests)

    manifest = []
    for aid, case in cohort.atlases:
        oasg.write_volume(out / "atlases" / aid / "image", case.image)
        oasg.write_volume(out / "atlases" / aid / "label", case.label)
        manifest.append(
            {"id": aid, "image": f"atlases/{aid}/image", "label": f"atlases/{aid}/label"}
        )
    for tid, case in cohort.tests:
        oasg.write_volume(out / "tests" / tid / "image", case.image)
        oasg.write_volume(out / "tests_gt" / tid / "label", case.label)
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")

    # Document the zero-field overlap the registration step starts from.
    prewarp = [
        metrics.dsc3d(a_case.label, t_case.label)
        for _, a_case in cohort.atlases
        for _, t_case in cohort.tests
    ]
    meta = {
        "params": {
            "width": params.width,
            "height": params.height,
            "slices": params.slices,
            "organ_a_px": list(params.organ_a_px),
            "organ_b_px": list(params.organ_b_px),
            "texture": params.texture,
            "deform_max_px": params.deform_max_px,
            "deform_smooth_px": params.deform_smooth_px,
            "seed": params.seed,
        },
        "atlas_ids": [aid for aid, _ in cohort.atlases],
        "test_ids": [tid for tid, _ in cohort.tests],
        "deform_amplitudes_px": {
            aid: case.deform_amplitude_px
            for aid, case in (*cohort.atlases, *cohort.tests)
        },
        "prewarp_mean_dsc_percent": float(np.mean(prewarp)),
    }
    _write_text(out / "cohort.json", json.dumps(meta, indent=2) + "\n")
    _write_run_manifest(out, "generate", args, params.seed, started, [], [])
    return 0


# ---------------------------------------------------------------- register

def cmd_register(args) -> int:
    started = time.perf_counter()
    config = _load_config(args.config)
    cfg = _registration_config(config, args.seed)
    out = _ensure_out(args)

    def _load(path, cls, what):
        grid = oasg.read_grid(path)
        if not isinstance(grid, cls):
            raise OasgFormatError(f"{path}: expected a {what} grid")
        return grid

    atlas_img = _load(args.atlas, Image2D, "kind=0 image")
    target_img = _load(args.target, Image2D, "kind=0 image")
    atlas_lbl = _load(args.atlas_label, LabelMap2D, "kind=1 label") if args.atlas_label else None
    target_lbl = _load(args.target_label, LabelMap2D, "kind=1 label") if args.target_label else None

    result = register_pair(atlas_img, atlas_lbl, target_img, target_lbl, cfg)
    oasg.write_grid(out / "field.oasg", result.field)

    rows = ["iter,phase,sim,dice,smooth,total"]
    starts = list(result.level_starts)
    last = len(result.loss_trace) - 1
    for i, b in enumerate(result.loss_trace):
        if i == 0:
            phase = "baseline"
        elif i == last:
            phase = "final"
        else:
            level = sum(1 for s in starts if s <= i) - 1
            phase = f"level{level}"
        rows.append(f"{i},{phase},{b.sim:.9f},{b.dice:.9f},{b.smooth:.9f},{b.total:.9f}")
    _write_text(out / "loss_trace.csv", "\n".join(rows) + "\n")

    summaries = [
        {
            "pair": f"{args.atlas} -> {args.target}",
            "initial_total": result.loss_trace[0].total,
            "final_total": result.loss_trace[-1].total,
            "converged": result.converged,
        }
    ]
    inputs = [args.atlas, args.target] + [
        p for p in (args.atlas_label, args.target_label) if p
    ]
    _write_run_manifest(out, "register", args, cfg.seed, started, inputs, summaries)
    return 0


# ----------------------------------------------------------------- segment

def _segment_volume(test_vol: Volume, cohort: _CohortOnDisk, cfg, strategy, n, jobs):
    """Per-slice segmentation of a test volume; returns (volume, results)."""
    if test_vol.n_slices != cohort.n_slices:
        raise OasgFormatError("test volume slice count differs from the atlases")
    cache = fusion.RegistrationCache()
    tasks: dict = {}
    strategy = fusion.Strategy(strategy)
    if strategy is not fusion.Strategy.FWOW:
        for s in range(test_vol.n_slices):
            aset = cohort.atlas_set(s)
            test_slice = test_vol.slices[s]
            ranked = fusion.select_atlases(
                fusion.extract_features(test_slice), aset, n
            )
            for aid in ranked:
                entry = aset.by_id(aid)
                tasks[f"s{s:04d}:test->{aid}"] = (
                    "test", entry.image, None, test_slice, None, cfg,
                )
            if strategy is fusion.Strategy.OASIS:
                for j in ranked:
                    for k in ranked:
                        if j != k:
                            ej, ek = aset.by_id(j), aset.by_id(k)
                            tasks[f"s{s:04d}:loa:{k}->{j}"] = (
                                "pair", ek.image, ek.label, ej.image, ej.label, cfg,
                            )
    summaries = _warm_cache(cache, tasks, jobs)
    slices = []
    details = []
    for s in range(test_vol.n_slices):
        result = fusion.segment_detailed(
            test_vol.slices[s], cohort.atlas_set(s), cfg, strategy, n, cache
        )
        slices.append(result.label)
        details.append(result)
    return Volume(tuple(slices), test_vol.spacing), details, summaries


def cmd_segment(args) -> int:
    started = time.perf_counter()
    config = _load_config(args.config)
    cfg = _registration_config(config, args.seed)
    strategy, n = _fusion_defaults(config, args)
    out = _ensure_out(args)
    cohort = _CohortOnDisk(args.manifest)

    test_path = Path(args.test)
    single = not oasg.is_volume_dir(test_path)
    if single:
        grid = oasg.read_grid(test_path)
        if not isinstance(grid, Image2D):
            raise OasgFormatError(f"{test_path}: expected a kind=0 image")
        test_vol = Volume((grid,), (1.0, 1.0))
    else:
        test_vol = _read_image_volume(test_path)

    label_vol, details, summaries = _segment_volume(
        test_vol, cohort, cfg, strategy, n, args.jobs
    )
    if single:
        oasg.write_grid(out / "label.oasg", label_vol.slices[0])
        _write_text(out / "weights.json", details[0].weights.to_json())
        if details[0].loa is not None:
            _write_text(out / "loa.csv", details[0].loa.to_csv())
    else:
        oasg.write_volume(out / "label", label_vol)
        for s, det in enumerate(details):
            _write_text(out / f"weights_slice_{s:04d}.json", det.weights.to_json())
            if det.loa is not None:
                _write_text(out / f"loa_slice_{s:04d}.csv", det.loa.to_csv())
    _write_run_manifest(
        out, "segment", args, cfg.seed, started, [args.test, args.manifest], summaries
    )
    return 0


# ---------------------------------------------------------------- evaluate

def _case_volume_dirs(root: Path, sub: str | None = None) -> dict[str, Path]:
    """Map case_id -> volume dir; accepts either <root>/<case>/ as a volume
    directory or <root>/<case>/<sub>/ (e.g. label/)."""
    root = Path(root)
    if oasg.is_volume_dir(root):
        return {root.name: root}
    cases = {}
    for child in sorted(root.iterdir()):
        if not child.is_dir():
            continue
        if oasg.is_volume_dir(child):
            cases[child.name] = child
        elif sub and oasg.is_volume_dir(child / sub):
            cases[child.name] = child / sub
    if not cases:
        raise OasgFormatError(f"{root}: no volume directories found")
    return cases


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    out = _ensure_out(args)
    pred_cases = _case_volume_dirs(Path(args.pred), sub="label")
    gt_cases = _case_volume_dirs(Path(args.gt), sub="label")
    shared = sorted(set(pred_cases) & set(gt_cases))
    if not shared:
        raise OasgFormatError("no case ids shared between pred and gt")
    per_case = {}
    for cid in shared:
        pred = _read_label_volume(pred_cases[cid])
        gt = _read_label_volume(gt_cases[cid])
        records = metrics.evaluate_case(pred, gt, pred.spacing_triple())
        # apex/base may be legitimately empty (documented convention); the
        # whole volume is required for every metric
        whole = records[-1]
        if "EmptyReference" in whole.notes:
            raise EmptyReference(f"case {cid}: empty ground-truth volume")
        if "EmptyMask" in whole.notes:
            raise EmptyMask(f"case {cid}: empty mask in the whole region")
        per_case[cid] = records
    _write_text(out / "metrics.csv", metrics.metrics_to_csv(per_case))
    _write_run_manifest(
        out, "evaluate", args, None, started, [args.pred, args.gt], []
    )
    return 0


# ------------------------------------------------------------------ ablate

def _parse_n_list(text: str) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        values = list(range(int(lo), int(hi) + 1))
    else:
        values = [int(v) for v in text.split(",") if v]
    if not values or any(v < 2 for v in values):
        raise InvalidParams(f"bad atlas-count list: {text!r}")
    return sorted(set(values))


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    config = _load_config(args.config)
    cfg = _registration_config(config, args.seed)
    out = _ensure_out(args)
    cohort_dir = Path(args.cohort)
    cohort = _CohortOnDisk(cohort_dir / "manifest.json")
    ns = _parse_n_list(args.n_atlases)
    strategies = [fusion.Strategy(s.strip()) for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise InvalidParams("no strategies given")
    n_avail = len(cohort.entries)
    if ns[-1] > n_avail:
        raise InvalidParams(f"n={ns[-1]} exceeds the {n_avail} available atlases")

    test_cases = _case_volume_dirs(cohort_dir / "tests", sub="image")
    gt_cases = _case_volume_dirs(cohort_dir / "tests_gt", sub="label")
    if sorted(test_cases) != sorted(gt_cases):
        raise OasgFormatError("tests/ and tests_gt/ case ids disagree")
    tests = {
        tid: (_read_image_volume(test_cases[tid]), _read_label_volume(gt_cases[tid]))
        for tid in sorted(test_cases)
    }

    needs_reg = any(s is not fusion.Strategy.FWOW for s in strategies)
    needs_loa = fusion.Strategy.OASIS in strategies
    max_n = ns[-1]
    cache = fusion.RegistrationCache()
    tasks: dict = {}
    ranked_by_slice_test: dict = {}
    n_slices = cohort.n_slices
    for tid, (test_vol, _) in tests.items():
        if test_vol.n_slices != n_slices:
            raise OasgFormatError(f"test {tid}: slice count differs from atlases")
        for s in range(n_slices):
            aset = cohort.atlas_set(s)
            test_slice = test_vol.slices[s]
            ranked = fusion.select_atlases(
                fusion.extract_features(test_slice), aset, max_n
            )
            ranked_by_slice_test[tid, s] = ranked
            if needs_reg:
                for aid in ranked:
                    entry = aset.by_id(aid)
                    tasks[f"s{s:04d}:{tid}->{aid}"] = (
                        "test", entry.image, None, test_slice, None, cfg,
                    )
            if needs_loa:
                for n in ns:
                    subset = ranked[:n]
                    for j in subset:
                        for k in subset:
                            if j != k:
                                ej, ek = aset.by_id(j), aset.by_id(k)
                                tasks[f"s{s:04d}:loa:{k}->{j}"] = (
                                    "pair", ek.image, ek.label, ej.image, ej.label, cfg,
                                )
    summaries = _warm_cache(cache, tasks, args.jobs)

    rows = []
    for strategy in sorted(strategies, key=lambda s: s.value):
        for n in ns:
            scores = []
            for tid, (test_vol, gt_vol) in tests.items():
                slices = [
                    fusion.segment_detailed(
                        test_vol.slices[s], cohort.atlas_set(s), cfg, strategy, n, cache
                    ).label
                    for s in range(n_slices)
                ]
                pred_vol = Volume(tuple(slices), test_vol.spacing)
                scores.append(metrics.dsc3d(pred_vol, gt_vol))
            rows.append((strategy.value, n, float(np.mean(scores))))

    lines = ["strategy,n_atlases,mean_dsc_percent"]
    lines += [f"{s},{n},{v:.6f}" for s, n, v in rows]
    _write_text(out / "ablation.csv", "\n".join(lines) + "\n")
    _write_run_manifest(
        out, "ablate", args, cfg.seed, started, [str(cohort_dir)], summaries
    )
    return 0


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlaseg",
        description="Multi-atlas segmentation: registration, fusion, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config with registration/fusion/phantom sections")
        p.add_argument("--seed", type=int, help="override config and OASIS_SEED")
        p.add_argument("--output", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel registration jobs")

    p = sub.add_parser("generate", help="write a synthetic cohort to disk")
    common(p)
    p.add_argument("--n-atlases", type=int, default=6)
    p.add_argument("--n-tests", type=int, default=4)
    p.add_argument("--grid", type=int, help="square grid size override")
    p.add_argument("--slices", type=int, help="slices per case override")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("register", help="register one atlas image to a target")
    common(p)
    p.add_argument("atlas", help="atlas image (.oasg)")
    p.add_argument("target", help="target image (.oasg)")
    p.add_argument("--atlas-label")
    p.add_argument("--target-label")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("segment", help="segment a test image or volume")
    common(p)
    p.add_argument("test", help="test image .oasg or volume directory")
    p.add_argument("manifest", help="atlas manifest JSON")
    p.add_argument("--strategy", choices=[s.value for s in fusion.Strategy])
    p.add_argument("--n-atlases", type=int)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p)
    p.add_argument("pred", help="directory of predicted label volumes")
    p.add_argument("gt", help="directory of ground-truth label volumes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="mean DSC per strategy per atlas count")
    common(p)
    p.add_argument("cohort", help="cohort directory from the generate command")
    p.add_argument("--n-atlases", default="2,4,6", help="list like 2,4,6 or range 2..10")
    p.add_argument("--strategies", default="oasis,fwal,fwow")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EmptyMask, EmptyReference) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_METRIC
    except (AtlasegError, OSError, json.JSONDecodeError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
