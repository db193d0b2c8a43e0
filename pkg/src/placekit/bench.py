"""Benchmark assembly and scoring: dataset generation with exact distribution
control, submission evaluation, the rule-based baseline solver, and
inference-time placement extraction."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoSolutionError, SamplingError, ValidationError
from .constraints import Constraint, ThresholdConfig, evaluate_prompt
from .masks import MaskGenerator, PlacementMask, lift_to_center_frame, prompt_hash, write_mask
from .plausibility import BIN_CENTERS, DEFAULT_CELL_SIZE
from .prompts import SamplerConfig, TemplateLibrary, load_templates, render_prompt, sample_constraint_set
from .scene import Asset, Placement, SceneModel

log = logging.getLogger(__name__)

GROUP_ORDER = ("physical", "spatial", "rotational", "visibility")


@dataclass(eq=False)
class BenchmarkExample:
    example_id: str
    scene_id: str
    asset_id: str
    prompt: str
    constraints: list[Constraint]
    mask_file: str | None = None

    def to_json(self) -> dict:
        row = {
            "example_id": self.example_id,
            "scene_id": self.scene_id,
            "asset_id": self.asset_id,
            "prompt": self.prompt,
            "constraints": [c.to_json() for c in self.constraints],
        }
        if self.mask_file is not None:
            row["mask_file"] = self.mask_file
        return row

    @staticmethod
    def from_json(row: dict) -> "BenchmarkExample":
        return BenchmarkExample(
            example_id=str(row["example_id"]),
            scene_id=str(row["scene_id"]),
            asset_id=str(row["asset_id"]),
            prompt=str(row["prompt"]),
            constraints=[Constraint.from_json(c) for c in row["constraints"]],
            mask_file=row.get("mask_file"),
        )


def write_manifest(examples: list[BenchmarkExample], path) -> None:
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def read_manifest(path) -> list[BenchmarkExample]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(BenchmarkExample.from_json(json.loads(line)))
    return out


def write_submission(rows: list[tuple[str, Placement]], path) -> None:
    with open(path, "w") as f:
        for example_id, p in rows:
            f.write(json.dumps({"example_id": example_id,
                                "t": [float(x) for x in p.t],
                                "yaw": float(p.yaw)}, sort_keys=True) + "\n")


def read_submission(path) -> dict[str, Placement]:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            out[str(row["example_id"])] = Placement(np.asarray(row["t"], dtype=np.float64),
                                                    float(row["yaw"]))
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    global_constraint_accuracy: float
    complete_placement_success: float
    language_adherence_success: float
    subgroup_accuracy: dict[str, float]
    group_counts: dict[str, int]
    per_example: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "global_constraint_accuracy": self.global_constraint_accuracy,
            "complete_placement_success": self.complete_placement_success,
            "language_adherence_success": self.language_adherence_success,
            "subgroup_accuracy": dict(self.subgroup_accuracy),
            "group_counts": dict(self.group_counts),
            "per_example": list(self.per_example),
        }


_EVAL_STATE: dict = {}


def _eval_init(scenes, assets, cfg):
    _EVAL_STATE["scenes"] = scenes
    _EVAL_STATE["assets"] = assets
    _EVAL_STATE["cfg"] = cfg


def _eval_one(task):
    example, prediction = task
    scenes = _EVAL_STATE["scenes"]
    assets = _EVAL_STATE["assets"]
    cfg = _EVAL_STATE["cfg"]
    try:
        scene = scenes[example.scene_id]
        asset = assets[example.asset_id]
        report = evaluate_prompt(scene, asset, prediction, example.constraints, cfg,
                                 vis_mode="exact")
        verdicts = [(c.group, bool(ok)) for c, ok in
                    ((r.constraint, r.satisfied) for r in report.results)]
        return {
            "example_id": example.example_id,
            "physical": bool(report.physical),
            "language_ok": bool(report.language_ok),
            "complete_ok": bool(report.complete_ok),
            "verdicts": verdicts,
            "error": None,
        }
    except Exception as exc:  # scored as all-unsatisfied, never crashes the run
        return {
            "example_id": example.example_id,
            "physical": False,
            "language_ok": False,
            "complete_ok": False,
            "verdicts": [(c.group, False) for c in example.constraints],
            "error": str(exc),
        }


def evaluate_submission(examples: list[BenchmarkExample], predictions: list[Placement],
                        scenes: dict[str, SceneModel], assets: dict[str, Asset],
                        cfg: ThresholdConfig | None = None, jobs: int = 1) -> MetricsReport:
    """Score one prediction per example with the benchmark-exact checkers.

    Physical plausibility is counted once per example in the global and
    physical-subgroup tallies whether or not the prompt names it.
    """
    if len(examples) != len(predictions):
        raise ValidationError(
            f"{len(examples)} examples but {len(predictions)} predictions")
    cfg = cfg or ThresholdConfig()
    tasks = list(zip(examples, predictions))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_eval_init,
                                 initargs=(scenes, assets, cfg)) as pool:
            rows = list(pool.map(_eval_one, tasks, chunksize=8))
    else:
        _eval_init(scenes, assets, cfg)
        rows = [_eval_one(t) for t in tasks]

    sat = {g: 0 for g in GROUP_ORDER}
    cnt = {g: 0 for g in GROUP_ORDER}
    complete = language = 0
    for row in rows:
        cnt["physical"] += 1
        sat["physical"] += int(row["physical"])
        seen_physical = False
        for group, ok in row["verdicts"]:
            if group == "physical":
                if seen_physical:
                    continue  # a plausible constraint is one physical check
                seen_physical = True
                continue  # already tallied once per example above
            cnt[group] += 1
            sat[group] += int(ok)
        complete += int(row["complete_ok"])
        language += int(row["language_ok"])
    total = sum(cnt.values())
    total_sat = sum(sat.values())
    n = len(rows)

    def pct(num, den):
        return 100.0 * num / den if den else 100.0

    return MetricsReport(
        global_constraint_accuracy=pct(total_sat, total),
        complete_placement_success=pct(complete, n),
        language_adherence_success=pct(language, n),
        subgroup_accuracy={g: pct(sat[g], cnt[g]) for g in GROUP_ORDER},
        group_counts={g: cnt[g] for g in GROUP_ORDER},
        per_example=rows,
    )


# ---------------------------------------------------------------------------
# Baseline solver
# ---------------------------------------------------------------------------

def solve_baseline(scene: SceneModel, asset: Asset, constraints: list[Constraint],
                   cfg: ThresholdConfig | None = None, cell_size: float = DEFAULT_CELL_SIZE,
                   order: str = "safe", seed: int = 0,
                   generator: MaskGenerator | None = None) -> Placement:
    """Mask-guided search with exact verification.

    Candidates are (point, bin) pairs from the combined mask, ordered by
    distance to the nearest invalid point (default), center-out, or shuffled;
    the first candidate the benchmark-exact evaluator fully accepts wins.
    """
    cfg = cfg or ThresholdConfig()
    gen = generator or MaskGenerator(scene, asset, cfg, cell_size)
    mask = gen.combined_mask(constraints)
    valid_idx = np.flatnonzero(mask.validity)
    if len(valid_idx) == 0:
        raise NoSolutionError("combined mask is empty")
    pts = scene.points[valid_idx]
    if order == "safe":
        invalid = scene.points[~mask.validity]
        if len(invalid) == 0:
            score = np.zeros(len(valid_idx))
        else:
            d, _ = cKDTree(invalid).query(pts, k=1)
            score = -d  # most-interior first
        ranking = np.lexsort((valid_idx, score))
    elif order == "center_out":
        centroid = pts.mean(axis=0)
        d = np.linalg.norm(pts - centroid, axis=1)
        ranking = np.lexsort((valid_idx, d))
    elif order == "random":
        ranking = np.random.default_rng(seed).permutation(len(valid_idx))
    else:
        raise ValidationError(f"unknown candidate order {order!r}")
    for j in ranking:
        i = valid_idx[j]
        for b in range(8):
            if not mask.rotations[i] >> b & 1:
                continue
            p = lift_to_center_frame(scene.points[i], asset, BIN_CENTERS[b])
            report = evaluate_prompt(scene, asset, p, constraints, cfg, vis_mode="exact")
            if report.complete_ok:
                return p
    raise NoSolutionError("no mask candidate survived exact verification")


# ---------------------------------------------------------------------------
# Inference extraction
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ScoredMask:
    """Real-valued analogue of a placement mask, as a model would emit."""

    location: np.ndarray  # (N,)
    rotations: np.ndarray  # (N, 8)

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=np.float64).reshape(-1)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.rotations.shape != (len(self.location), 8):
            raise ValidationError("rotation scores must be (N, 8)")


def extract_placement(scored: ScoredMask, asset: Asset, points: np.ndarray) -> Placement:
    """Argmax location score, argmax rotation bin at that point (ties to the
    lowest index/bin), lifted by half the asset height."""
    if len(points) != len(scored.location):
        raise ValidationError("score length must match the point count")
    if len(points) == 0:
        raise ValidationError("empty point cloud")
    loc = np.where(np.isfinite(scored.location), scored.location, -np.inf)
    if not np.any(np.isfinite(loc)):
        raise ValidationError("all location scores are non-finite")
    k = int(np.argmax(loc))
    rot = np.where(np.isfinite(scored.rotations[k]), scored.rotations[k], -np.inf)
    b = int(np.argmax(rot))
    return lift_to_center_frame(points[k], asset, BIN_CENTERS[b])


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass
class GenConfig:
    """Distribution plan for one generation run.

    ``counts_by_bucket`` maps constraints-per-example to example counts and is
    honored exactly; ``type_quotas`` fixes the total number of spatial /
    rotational / visibility constraints and must sum to the implied total.
    """

    num_examples: int = 10
    counts_by_bucket: dict[int, int] | None = None
    type_quotas: dict[str, int] | None = None
    cell_size: float = 0.05
    retry_budget: int = 25
    point_density: float | None = None  # informational; scenes arrive sampled

    def sizes(self) -> list[int]:
        if self.counts_by_bucket is None:
            return []
        out = []
        for bucket in sorted(self.counts_by_bucket):
            out.extend([int(bucket)] * int(self.counts_by_bucket[bucket]))
        return out

    @staticmethod
    def from_json(data: dict) -> "GenConfig":
        d = dict(data)
        if d.get("counts_by_bucket"):
            d["counts_by_bucket"] = {int(k): int(v) for k, v in d["counts_by_bucket"].items()}
        return GenConfig(**d)


@dataclass
class GenReport:
    examples: list[BenchmarkExample]
    failures: list[dict]
    manifest_path: Path


def _plan_examples(config: GenConfig, rng: np.random.Generator) -> list[list[str]]:
    """Per-example constraint-group plans honoring bucket and type quotas."""
    sizes = config.sizes()
    if sizes:
        if len(sizes) != config.num_examples:
            raise ValidationError("counts_by_bucket must sum to num_examples")
    else:
        sizes = [int(rng.integers(1, 4)) for _ in range(config.num_examples)]
    total = sum(sizes)
    if config.type_quotas is not None:
        quotas = dict(config.type_quotas)
        if sum(quotas.values()) != total:
            raise ValidationError(
                f"type quotas sum to {sum(quotas.values())} but plans need {total}")
        slots = []
        for group in ("spatial", "rotational", "visibility"):
            slots.extend([group] * int(quotas.get(group, 0)))
        slots = [slots[i] for i in rng.permutation(len(slots))]
    else:
        groups = ("spatial", "rotational", "visibility")
        slots = [groups[int(rng.integers(0, 3))] for _ in range(total)]
    plans = []
    cursor = 0
    for size in sizes:
        plans.append(slots[cursor : cursor + size])
        cursor += size
    order = rng.permutation(len(plans))
    return [plans[i] for i in order]


_GEN_STATE: dict = {}


def _gen_init(scenes, assets, cfg, config, library, out_dir):
    _GEN_STATE.update(scenes=scenes, assets=assets, cfg=cfg, config=config,
                      library=library, out_dir=Path(out_dir), generators={})


def _gen_one(task):
    """Produce one example (or a failure record); deterministic per task."""
    idx, plan, seq = task
    scenes = _GEN_STATE["scenes"]
    assets = _GEN_STATE["assets"]
    cfg = _GEN_STATE["cfg"]
    config = _GEN_STATE["config"]
    library = _GEN_STATE["library"]
    out = _GEN_STATE["out_dir"]
    generators = _GEN_STATE["generators"]
    example_id = f"ex{idx:05d}"
    rng = np.random.default_rng(seq)
    scene = scenes[int(rng.integers(0, len(scenes)))]
    asset = assets[int(rng.integers(0, len(assets)))]
    key = (scene.scene_id, asset.asset_id)
    if key not in generators:
        generators[key] = MaskGenerator(scene, asset, cfg, config.cell_size)
    gen = generators[key]
    last_reason = None
    for _attempt in range(config.retry_budget):
        sub_seed = int(rng.integers(0, 1 << 63))
        try:
            constraints = sample_constraint_set(
                scene, asset, SamplerConfig(count=len(plan), groups=list(plan)), sub_seed)
        except SamplingError as exc:
            last_reason = str(exc)
            continue
        mask = gen.combined_mask(constraints)
        if mask.num_valid == 0:
            continue  # unsatisfiable draw: discard and resample
        prompt = render_prompt(constraints, library, sub_seed)
        mask.prompt_id = prompt_hash(prompt)
        mask_name = f"masks/{example_id}.plmk"
        write_mask(mask, out / mask_name)
        row = BenchmarkExample(example_id, scene.scene_id, asset.asset_id,
                               prompt, constraints, mask_name)
        return idx, row, None
    reason = last_reason or f"retry budget exhausted for plan {plan}"
    return idx, None, {"example_id": example_id, "reason": reason}


def generate_dataset(scenes: list[SceneModel], assets: list[Asset], config: GenConfig,
                     seed: int, out_dir, library: TemplateLibrary | None = None,
                     cfg: ThresholdConfig | None = None, jobs: int = 1) -> GenReport:
    """Sample, verify, and write (prompt, mask) examples plus a manifest.

    Unsatisfiable draws are resampled with fresh sub-seeds up to the retry
    budget while keeping the example's planned constraint groups, so emitted
    distributions match the config exactly. Exhausted examples are reported
    and omitted (partial output). Output is independent of ``jobs``.
    """
    if not scenes or not assets:
        raise ValidationError("need at least one scene and one asset")
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    cfg = cfg or ThresholdConfig()
    library = library or load_templates()
    root_seq = np.random.SeedSequence(seed)
    plan_seq, *child_seqs = root_seq.spawn(config.num_examples + 1)
    plans = _plan_examples(config, np.random.default_rng(plan_seq))
    tasks = [(idx, plan, seq) for idx, (plan, seq) in enumerate(zip(plans, child_seqs))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_gen_init,
                                 initargs=(scenes, assets, cfg, config, library, out)) as pool:
            results = list(pool.map(_gen_one, tasks, chunksize=4))
    else:
        _gen_init(scenes, assets, cfg, config, library, out)
        results = [_gen_one(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    examples = [row for _, row, _ in results if row is not None]
    failures = [fail for _, _, fail in results if fail is not None]
    manifest = out / "manifest.jsonl"
    write_manifest(examples, manifest)
    if failures:
        with open(out / "failures.json", "w") as f:
            json.dump(failures, f, indent=2, sort_keys=True)
            f.write("\n")
    return GenReport(examples=examples, failures=failures, manifest_path=manifest)
