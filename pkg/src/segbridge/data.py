"""Synthetic scenes and instruction samples.

A scene is a dark canvas with 2-5 solid geometric shapes. Every object
gets a distinct cell of a 3x3 position grid, which keeps masks disjoint
and makes the full attribute tuple (size, color, shape, position)
unique, so the generated referring expression picks out exactly one
object. Colors come from a fixed 8-bit palette, so images survive the
P6 round trip exactly.

Tasks: plain captioning, counting conversation, region captioning with
a visual prompt, referring segmentation, semantic segmentation over an
attribute, and grounded caption generation with one mask per object.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .decoder import VisualPrompt
from .errors import ConfigError, ContractError, ParseError
from .pixmaps import read_pgm, read_ppm, write_pgm, write_ppm

SHAPES = ("circle", "square", "triangle", "diamond")
COLORS = {
    "red": (220, 60, 60),
    "green": (70, 200, 90),
    "blue": (70, 110, 230),
    "yellow": (230, 220, 70),
    "magenta": (210, 80, 210),
    "cyan": (80, 210, 210),
}
SIZES = {"small": 5, "large": 9}
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five")
BACKGROUND = (25, 25, 30)

TASKS = ("caption", "conversation", "region_caption", "res", "semseg", "gcg")

GCG_QUESTION = ("Could you please give me a detailed description of the image ? "
                "Please respond with interleaved segmentation masks for the corresponding parts of the answer .")

# attribute class layout for the decoder's multi-label head
N_ATTR_CLASSES = len(SHAPES) + len(COLORS) + len(SIZES) + len(ROWS) * len(COLS)


def vocabulary_words() -> list:
    """Every text word any template or answer can emit."""
    glue = ["the", "a", "at", "in", "this", "image", "there", "are", "is",
            "objects", "please", "segment", "describe", "region", "how",
            "many", "what", "could", "you", "give", "me", "detailed",
            "description", "of", "respond", "with", "interleaved",
            "segmentation", "masks", "for", "corresponding", "parts",
            "answer", "all", "and", "scene", ".", "?", ","]
    return (list(COLORS) + list(SHAPES) + list(SIZES) + list(ROWS)
            + [c for c in COLS if c not in ROWS] + list(NUMBER_WORDS) + glue)


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    row: int
    col: int
    mask: np.ndarray

    @property
    def position_words(self) -> str:
        return f"{ROWS[self.row]} {COLS[self.col]}"

    def expression(self) -> str:
        return f"the {self.size} {self.color} {self.shape} at the {self.position_words}"

    def attr_classes(self) -> np.ndarray:
        v = np.zeros(N_ATTR_CLASSES, dtype=np.float32)
        v[SHAPES.index(self.shape)] = 1.0
        v[len(SHAPES) + list(COLORS).index(self.color)] = 1.0
        v[len(SHAPES) + len(COLORS) + list(SIZES).index(self.size)] = 1.0
        v[len(SHAPES) + len(COLORS) + len(SIZES) + self.row * len(COLS) + self.col] = 1.0
        return v


@dataclass
class Scene:
    image: np.ndarray  # float32 [h, w, 3]
    objects: list

    @property
    def h(self):
        return self.image.shape[0]

    @property
    def w(self):
        return self.image.shape[1]

    def reading_order(self) -> list:
        return sorted(self.objects, key=lambda o: (o.row, o.col))

    def find(self, size=None, color=None, shape=None, row=None, col=None) -> list:
        out = []
        for o in self.objects:
            if size is not None and o.size != size:
                continue
            if color is not None and o.color != color:
                continue
            if shape is not None and o.shape != shape:
                continue
            if row is not None and o.row != row:
                continue
            if col is not None and o.col != col:
                continue
            out.append(o)
        return out


def _shape_mask(shape: str, h: int, w: int, cy: int, cx: int, half: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys - cy
    dx = xs - cx
    if shape == "circle":
        return dx * dx + dy * dy <= half * half
    if shape == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= half
    if shape == "triangle":
        # upward-pointing: width grows linearly from apex to base
        return (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    raise ConfigError(f"unknown shape {shape!r}")


def make_scene(rng: np.random.Generator, image_size: int = 64,
               min_objects: int = 2, max_objects: int = 5) -> Scene:
    h = w = image_size
    cell = image_size // 3
    n = int(rng.integers(min_objects, max_objects + 1))
    cells = rng.choice(9, size=n, replace=False)
    image = np.zeros((h, w, 3), dtype=np.float32)
    image[:] = np.array(BACKGROUND, dtype=np.float32) / 255.0
    objects = []
    for cell_idx in cells:
        row, col = int(cell_idx) // 3, int(cell_idx) % 3
        shape = str(rng.choice(SHAPES))
        color = str(rng.choice(list(COLORS)))
        size = str(rng.choice(list(SIZES)))
        half = SIZES[size]
        y0, y1 = row * cell, (row + 1) * cell if row < 2 else h
        x0, x1 = col * cell, (col + 1) * cell if col < 2 else w
        cy_lo, cy_hi = y0 + half, y1 - 1 - half
        cx_lo, cx_hi = x0 + half, x1 - 1 - half
        if cy_lo > cy_hi or cx_lo > cx_hi:
            raise ConfigError(f"image_size {image_size} too small for {size} objects on a 3x3 grid")
        cy = int(rng.integers(cy_lo, cy_hi + 1))
        cx = int(rng.integers(cx_lo, cx_hi + 1))
        mask = _shape_mask(shape, h, w, cy, cx, half)
        image[mask] = np.array(COLORS[color], dtype=np.float32) / 255.0
        objects.append(SceneObject(shape=shape, color=color, size=size, row=row, col=col, mask=mask))
    scene = Scene(image=image, objects=objects)
    _check_scene(scene)
    return scene


def _check_scene(scene: Scene):
    total = np.zeros(scene.image.shape[:2], dtype=np.int32)
    for o in scene.objects:
        total += o.mask.astype(np.int32)
    if (total > 1).any():
        raise ContractError("object masks overlap")
    for o in scene.objects:
        if len(scene.find(o.size, o.color, o.shape, o.row, o.col)) != 1:
            raise ContractError(f"expression {o.expression()!r} is ambiguous")


@dataclass
class InstructionSample:
    """One training/eval item: a scene, a prompt, the reference answer,
    target masks aligned with the answer's [SEG] tokens, and (for region
    tasks) a visual prompt."""

    sample_id: int
    task: str
    prompt: str
    answer: str
    scene: Scene
    visual_prompt: VisualPrompt | None = None
    target_masks: list = field(default_factory=list)
    phrases: list = field(default_factory=list)  # aligned with target_masks for gcg


def _bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def _centroid(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def make_sample(rng: np.random.Generator, scene: Scene, task: str, sample_id: int = 0) -> InstructionSample:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    objs = scene.reading_order()
    if task == "caption":
        prompt = "<Image> Please describe this image ."
        parts = [f"there are {NUMBER_WORDS[len(objs)]} objects"] + [o.expression() for o in objs]
        answer = " . ".join(parts) + " ."
        return InstructionSample(sample_id, task, prompt, answer, scene)
    if task == "conversation":
        color = str(rng.choice(list(COLORS)))
        count = len(scene.find(color=color))
        prompt = f"<Image> How many {color} objects are there ?"
        answer = f"there are {NUMBER_WORDS[count]} {color} objects ."
        return InstructionSample(sample_id, task, prompt, answer, scene)
    if task == "region_caption":
        target = objs[int(rng.integers(len(objs)))]
        kind = str(rng.choice(["box", "point", "mask"]))
        if kind == "box":
            vp = VisualPrompt(kind="box", box=_bbox(target.mask))
        elif kind == "point":
            vp = VisualPrompt(kind="point", point=_centroid(target.mask))
        else:
            vp = VisualPrompt(kind="mask", mask=target.mask.copy())
        prompt = "<Image> Please describe the region <Region> in this image ."
        answer = target.expression() + " ."
        return InstructionSample(sample_id, task, prompt, answer, scene, visual_prompt=vp)
    if task == "res":
        target = objs[int(rng.integers(len(objs)))]
        expr = target.expression()
        prompt = f"<Image> Please segment {expr} in this image ."
        answer = f"<p> {expr} </p> [SEG]"
        return InstructionSample(sample_id, task, prompt, answer, scene,
                                 target_masks=[target.mask.copy()], phrases=[expr])
    if task == "semseg":
        # pick an attribute value present in the scene; the target is the union
        attr_kind = str(rng.choice(["color", "shape"]))
        if attr_kind == "color":
            value = str(rng.choice(sorted({o.color for o in objs})))
            members = scene.find(color=value)
        else:
            value = str(rng.choice(sorted({o.shape for o in objs})))
            members = scene.find(shape=value)
        union = np.zeros(scene.image.shape[:2], dtype=bool)
        for o in members:
            union |= o.mask
        expr = f"all {value} objects"
        prompt = f"<Image> Please segment {expr} in this image ."
        answer = f"<p> {expr} </p> [SEG]"
        return InstructionSample(sample_id, task, prompt, answer, scene,
                                 target_masks=[union], phrases=[expr])
    # gcg
    prompt = f"<Image> {GCG_QUESTION}"
    chunks = [f"<p> {o.expression()} </p> [SEG]" for o in objs]
    answer = " ".join(chunks)
    return InstructionSample(sample_id, task, prompt, answer, scene,
                             target_masks=[o.mask.copy() for o in objs],
                             phrases=[o.expression() for o in objs])


def parse_task_mix(spec: str) -> dict:
    """Parse "res:1.0,caption:0.5" into a normalized weight map."""
    mix = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            name, _, weight = part.partition(":")
            mix[name.strip()] = float(weight)
        else:
            mix[part] = 1.0
    for name in mix:
        if name not in TASKS:
            raise ConfigError(f"unknown task {name!r} in mix")
    total = sum(mix.values())
    if total <= 0:
        raise ConfigError("task mix weights must sum to a positive value")
    return {k: v / total for k, v in mix.items()}


def generate_corpus(seed: int, n: int, task_mix=None, image_size: int = 64) -> list:
    """Deterministic corpus: one fresh scene per sample."""
    if task_mix is None:
        task_mix = {t: 1.0 / len(TASKS) for t in TASKS}
    names = sorted(task_mix)
    weights = np.array([task_mix[k] for k in names], dtype=np.float64)
    weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        scene = make_scene(rng, image_size=image_size)
        task = names[int(rng.choice(len(names), p=weights))]
        samples.append(make_sample(rng, scene, task, sample_id=i))
    return samples


# -- serialization -------------------------------------------------------------


def export_corpus(samples, out_dir):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    lines = []
    for s in samples:
        sid = f"{s.sample_id:05d}"
        image_rel = f"images/{sid}.ppm"
        write_ppm(os.path.join(out_dir, image_rel), s.scene.image)
        record = {
            "id": s.sample_id,
            "task": s.task,
            "prompt": s.prompt,
            "answer": s.answer,
            "image": image_rel,
            "objects": [],
            "targets": [],
            "phrases": list(s.phrases),
            "visual_prompt": None,
        }
        for j, o in enumerate(s.scene.objects):
            rel = f"masks/{sid}_obj{j}.pgm"
            write_pgm(os.path.join(out_dir, rel), o.mask)
            record["objects"].append({"shape": o.shape, "color": o.color, "size": o.size,
                                      "row": o.row, "col": o.col, "mask": rel})
        for k, m in enumerate(s.target_masks):
            rel = f"masks/{sid}_tgt{k}.pgm"
            write_pgm(os.path.join(out_dir, rel), m)
            record["targets"].append(rel)
        if s.visual_prompt is not None:
            vp = s.visual_prompt
            if vp.kind == "mask":
                rel = f"masks/{sid}_prompt.pgm"
                write_pgm(os.path.join(out_dir, rel), vp.mask)
                record["visual_prompt"] = {"kind": "mask", "mask": rel}
            elif vp.kind == "box":
                record["visual_prompt"] = {"kind": "box", "box": list(vp.box)}
            else:
                record["visual_prompt"] = {"kind": "point", "point": list(vp.point)}
        lines.append(json.dumps(record, sort_keys=True))
    with open(os.path.join(out_dir, "annotations.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def import_corpus(corpus_dir) -> list:
    path = os.path.join(corpus_dir, "annotations.jsonl")
    if not os.path.exists(path):
        raise ParseError(f"no annotations.jsonl under {corpus_dir}")
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad annotation record: {exc}", line=ln) from exc
            try:
                image = read_ppm(os.path.join(corpus_dir, rec["image"]))
                objects = [SceneObject(shape=o["shape"], color=o["color"], size=o["size"],
                                       row=o["row"], col=o["col"],
                                       mask=read_pgm(os.path.join(corpus_dir, o["mask"])))
                           for o in rec["objects"]]
                scene = Scene(image=image, objects=objects)
                targets = [read_pgm(os.path.join(corpus_dir, rel)) for rel in rec["targets"]]
                vp = None
                if rec["visual_prompt"] is not None:
                    v = rec["visual_prompt"]
                    if v["kind"] == "mask":
                        vp = VisualPrompt(kind="mask", mask=read_pgm(os.path.join(corpus_dir, v["mask"])))
                    elif v["kind"] == "box":
                        vp = VisualPrompt(kind="box", box=tuple(v["box"]))
                    else:
                        vp = VisualPrompt(kind="point", point=tuple(v["point"]))
                samples.append(InstructionSample(
                    sample_id=rec["id"], task=rec["task"], prompt=rec["prompt"], answer=rec["answer"],
                    scene=scene, visual_prompt=vp, target_masks=targets, phrases=list(rec["phrases"])))
            except KeyError as exc:
                raise ParseError(f"annotation record missing field {exc}", line=ln) from exc
    return samples
