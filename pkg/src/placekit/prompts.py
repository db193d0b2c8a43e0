"""Template-based prompt system: sampling, rendering, parsing, verification.

Prompts follow the fixed shape ``"Place the asset <clause>, and <clause>"``
where each clause instantiates one relationship template. Parsing inverts
rendering exactly, so round-tripping a constraint list is lossless.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import AnchorNotFoundError, ParseError, SamplingError, ValidationError
from .constraints import Constraint, ThresholdConfig, GROUPS, VISIBILITY_ANCHOR_CLASSES
from .geometry import obb_min_distance
from .masks import MaskGenerator, PlacementMask
from .scene import Asset, SceneModel

PROMPT_PREFIX = "Place the asset "
CLAUSE_JOINER = ", and "

RELATIONSHIP_NAMES = ("plausible", "adjacent", "between", "facing", "near",
                      "on", "above", "below", "is_visible", "not_visible")

_GROUP_RELATIONS = {
    "physical": ("plausible",),
    "spatial": ("near", "adjacent", "on", "above", "below", "between"),
    "rotational": ("facing",),
    "visibility": ("is_visible", "not_visible"),
}


def _normalize_name(name) -> str:
    # YAML 1.1 parses a bare "on" as boolean true
    if name is True:
        return "on"
    if name is False:
        return "off"
    return str(name)


@dataclass(eq=False)
class TemplateLibrary:
    """Relationship name to template strings with anchor placeholders."""

    templates: dict[str, list[str]]

    def __post_init__(self):
        missing = set(RELATIONSHIP_NAMES) - set(self.templates)
        if missing:
            raise ValidationError(f"template library missing relationships: {sorted(missing)}")
        extra = set(self.templates) - set(RELATIONSHIP_NAMES)
        if extra:
            raise ValidationError(f"template library has unknown relationships: {sorted(extra)}")
        for name, entries in self.templates.items():
            if not entries:
                raise ValidationError(f"relationship {name!r} has no templates")
            for t in entries:
                if name == "plausible":
                    if "anchor" in t:
                        raise ValidationError(f"plausible template must not name anchors: {t!r}")
                elif name == "between":
                    if "anchor1_class" not in t or "anchor2_class" not in t:
                        raise ValidationError(f"between template needs both placeholders: {t!r}")
                else:
                    if "anchor_class" not in t:
                        raise ValidationError(f"template needs anchor_class placeholder: {t!r}")

    def count(self, name: str) -> int:
        return len(self.templates[name])

    def total(self) -> int:
        return sum(len(v) for v in self.templates.values())


def load_templates(source=None) -> TemplateLibrary:
    """Load a library from YAML/JSON (path, dict, or None for the built-in)."""
    if source is None:
        from importlib import resources

        with resources.files("placekit.data").joinpath("templates.yaml").open() as f:
            data = yaml.safe_load(f)
    elif isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        with open(path) as f:
            if path.suffix.lower() == ".json":
                data = json.load(f)
            else:
                data = yaml.safe_load(f)
    if not isinstance(data, dict) or "relationships" not in data:
        raise ValidationError("template source must contain a 'relationships' list")
    templates = {}
    for entry in data["relationships"]:
        name = _normalize_name(entry.get("name"))
        templates[name] = [str(t) for t in entry.get("templates", [])]
    return TemplateLibrary(templates)


def save_templates(library: TemplateLibrary, path) -> None:
    path = Path(path)
    data = {"relationships": [{"name": name, "templates": list(library.templates[name])}
                              for name in RELATIONSHIP_NAMES]}
    with open(path, "w") as f:
        if path.suffix.lower() == ".json":
            json.dump(data, f, indent=2)
            f.write("\n")
        else:
            yaml.safe_dump(data, f, sort_keys=False, allow_unicode=True)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    """Controls one constraint-set draw."""

    count: int | None = None  # None: uniform in [1, 3]
    groups: list[str] | None = None  # per-slot group plan, e.g. ["spatial", "visibility"]
    visibility_classes: tuple[str, ...] = VISIBILITY_ANCHOR_CLASSES
    between_max_dist: float = 1.5
    max_tries: int = 64


def _anchor_classes_for_spatial(scene: SceneModel) -> list[str]:
    return scene.anchor_classes()


def _between_pairs(scene: SceneModel, max_dist: float):
    out = []
    anchors = scene.anchors
    for i in range(len(anchors)):
        for j in range(len(anchors)):
            if i == j:
                continue
            if obb_min_distance(anchors[i].obb, anchors[j].obb) <= max_dist:
                out.append((anchors[i].class_label, anchors[j].class_label))
    return sorted(set(out))


def sample_constraint_set(scene: SceneModel, asset: Asset, config: SamplerConfig,
                          seed: int) -> list[Constraint]:
    """Draw a constraint set from the scene's annotations, deterministically.

    Anchor selection and any later template selection use independent
    sub-streams of the seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    count = config.count if config.count is not None else int(rng.integers(1, 4))
    if count < 1 or count > 4:
        raise SamplingError("constraint count must lie in [1, 4]")
    groups = list(config.groups) if config.groups else [
        ("spatial", "rotational", "visibility")[int(rng.integers(0, 3))] for _ in range(count)
    ]
    if len(groups) != count:
        raise SamplingError("group plan length does not match constraint count")
    classes = _anchor_classes_for_spatial(scene)
    vis_classes = [c for c in config.visibility_classes if scene.anchors_of_class(c)]
    pairs = _between_pairs(scene, config.between_max_dist)
    out: list[Constraint] = []
    for group in groups:
        ok = False
        for _ in range(config.max_tries):
            c = _draw_constraint(group, classes, vis_classes, pairs, rng)
            if c is None:
                break
            if c not in out:
                out.append(c)
                ok = True
                break
        if not ok:
            raise SamplingError(
                f"cannot sample a distinct {group!r} constraint in scene {scene.scene_id}")
    return out


def _draw_constraint(group: str, classes, vis_classes, pairs, rng) -> Constraint | None:
    if group == "physical":
        return Constraint("plausible")
    if group == "spatial":
        relations = ["near", "adjacent", "on", "above", "below"]
        if pairs:
            relations.append("between")
        if not classes:
            return None
        rel = relations[int(rng.integers(0, len(relations)))]
        if rel == "between":
            a, b = pairs[int(rng.integers(0, len(pairs)))]
            return Constraint("between", a, b)
        return Constraint(rel, classes[int(rng.integers(0, len(classes)))])
    if group == "rotational":
        if not classes:
            return None
        return Constraint("facing", classes[int(rng.integers(0, len(classes)))])
    if group == "visibility":
        if not vis_classes:
            return None
        rel = ("is_visible", "not_visible")[int(rng.integers(0, 2))]
        return Constraint(rel, vis_classes[int(rng.integers(0, len(vis_classes)))])
    raise SamplingError(f"unknown constraint group {group!r}")


# ---------------------------------------------------------------------------
# Rendering and parsing
# ---------------------------------------------------------------------------

def render_clause(c: Constraint, template: str) -> str:
    if c.relation == "plausible":
        return template
    if c.relation == "between":
        return template.replace("anchor1_class", c.anchor).replace("anchor2_class", c.anchor2)
    return template.replace("anchor_class", c.anchor)


def render_prompt(constraints: list[Constraint], library: TemplateLibrary,
                  seed: int) -> str:
    """One uniformly chosen template per constraint, joined after the fixed
    prefix; deterministic per seed."""
    if not constraints:
        raise ValidationError("cannot render an empty constraint list")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    clauses = []
    for c in constraints:
        entries = library.templates.get(c.relation)
        if not entries:
            raise ValidationError(f"no templates for relation {c.relation!r}")
        template = entries[int(rng.integers(0, len(entries)))]
        clauses.append(render_clause(c, template))
    return PROMPT_PREFIX + CLAUSE_JOINER.join(clauses)


def _template_pattern(template: str) -> re.Pattern:
    parts = re.split(r"(anchor1_class|anchor2_class|anchor_class)", template)
    out = []
    names = {"anchor_class": "a", "anchor1_class": "a1", "anchor2_class": "a2"}
    for part in parts:
        if part in names:
            out.append(f"(?P<{names[part]}>.+?)")
        else:
            out.append(re.escape(part))
    return re.compile("^" + "".join(out) + "$")


@dataclass(eq=False)
class _CompiledLibrary:
    entries: list[tuple[int, str, re.Pattern]]  # (literal length, relation, pattern)


def _compile_library(library: TemplateLibrary) -> _CompiledLibrary:
    entries = []
    for relation, templates in library.templates.items():
        for t in templates:
            literal = re.sub(r"anchor1_class|anchor2_class|anchor_class", "", t)
            entries.append((len(literal), relation, _template_pattern(t)))
    entries.sort(key=lambda e: -e[0])  # longest template literal wins
    return _CompiledLibrary(entries)


def parse_prompt(text: str, library: TemplateLibrary,
                 anchor_vocab: list[str]) -> list[Constraint]:
    """Invert render_prompt: longest-match template recognition per clause,
    anchor labels resolved against the scene vocabulary."""
    compiled = getattr(library, "_compiled", None)
    if compiled is None:
        compiled = _compile_library(library)
        library._compiled = compiled
    if not text.startswith(PROMPT_PREFIX):
        raise ParseError(f"prompt must start with {PROMPT_PREFIX!r}", offset=0)
    body = text[len(PROMPT_PREFIX):]
    vocab = set(anchor_vocab)
    constraints = []
    offset = len(PROMPT_PREFIX)
    for clause in body.split(CLAUSE_JOINER):
        c = _parse_clause(clause, compiled, vocab, offset)
        constraints.append(c)
        offset += len(clause) + len(CLAUSE_JOINER)
    return constraints


def _parse_clause(clause: str, compiled: _CompiledLibrary, vocab: set[str],
                  offset: int) -> Constraint:
    for _, relation, pattern in compiled.entries:
        m = pattern.match(clause)
        if m is None:
            continue
        groups = m.groupdict()
        if relation == "plausible":
            return Constraint("plausible")
        if relation == "between":
            a1, a2 = groups.get("a1"), groups.get("a2")
            for label in (a1, a2):
                if label not in vocab:
                    raise AnchorNotFoundError(
                        f"unknown anchor class {label!r} in clause {clause!r}")
            return Constraint("between", a1, a2)
        label = groups.get("a")
        if label not in vocab:
            raise AnchorNotFoundError(f"unknown anchor class {label!r} in clause {clause!r}")
        return Constraint(relation, label)
    raise ParseError(f"no template matches clause {clause!r}", offset=offset)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def verify_prompt(scene: SceneModel, asset: Asset, constraints: list[Constraint],
                  cfg: ThresholdConfig | None = None, cell_size: float = 0.025,
                  generator: MaskGenerator | None = None) -> tuple[bool, PlacementMask]:
    """Compute the combined mask; satisfiable iff any point stays valid."""
    gen = generator or MaskGenerator(scene, asset, cfg, cell_size)
    mask = gen.combined_mask(constraints)
    return mask.num_valid > 0, mask
