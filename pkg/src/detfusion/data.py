"""Synthetic detection + question answering corpus.

Scenes are black images with 1..N filled geometric objects (shape x color
classes). Each scene carries ground-truth boxes/classes and one question:

    count:     "how many <shape>s ?"        -> 0..max_objects
    existence: "is there a <color> <shape> ?" -> yes / no
    color:     "what color is the <shape> ?"  -> a color (asked only about a
               shape occurring exactly once; falls back to a count question
               when no shape is unique)

Existence targets are drawn half from present (shape, color) pairs and half
from absent ones, so yes/no are exactly balanced by construction. Everything
is driven by one seeded generator; identical (spec, seed) reruns produce a
byte-identical corpus on disk.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .serialize import load_tensor, save_tensor

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue")
COLOR_RGB = {"red": (1.0, 0.15, 0.1), "green": (0.1, 1.0, 0.15), "blue": (0.1, 0.15, 1.0)}

PLURALS = {"square": "squares", "circle": "circles", "triangle": "triangles"}


@dataclass
class SceneSpec:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_extent: int = 14
    max_extent: int = 26
    count_weight: float = 0.4
    existence_weight: float = 0.4
    color_weight: float = 0.2
    placement_tries: int = 25

    def validate(self):
        bad = []
        if self.image_size % 64:
            bad.append(f"image_size={self.image_size} (must be divisible by 64)")
        if not (1 <= self.min_objects <= self.max_objects):
            bad.append(f"min_objects={self.min_objects}, max_objects={self.max_objects}")
        if not (4 <= self.min_extent <= self.max_extent < self.image_size):
            bad.append(f"min_extent={self.min_extent}, max_extent={self.max_extent}")
        weights = (self.count_weight, self.existence_weight, self.color_weight)
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            bad.append(f"question weights {weights}")
        if bad:
            raise ValueError("invalid scene spec fields: " + "; ".join(bad))
        return self


def class_id(shape, color):
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def class_name(cid):
    return f"{COLORS[cid % len(COLORS)]} {SHAPES[cid // len(COLORS)]}"


def num_classes():
    return len(SHAPES) * len(COLORS)


def build_vocab(spec: SceneSpec):
    words = ["?", "a", "color", "how", "is", "many", "the", "there", "what"]
    words += sorted(set(SHAPES) | set(PLURALS.values()) | set(COLORS))
    return words


def answer_vocab(spec: SceneSpec):
    return [str(i) for i in range(spec.max_objects + 1)] + ["yes", "no"] + list(COLORS)


def encode_question(text, vocab):
    index = {w: i for i, w in enumerate(vocab)}
    return [index[w] for w in text.split()]


def _render_object(img, shape, color, x1, y1, extent):
    rgb = np.array(COLOR_RGB[color])
    if shape == "square":
        img[y1 : y1 + extent, x1 : x1 + extent] = rgb
    elif shape == "circle":
        r = extent / 2.0
        yy, xx = np.mgrid[0:extent, 0:extent]
        mask = (yy - r + 0.5) ** 2 + (xx - r + 0.5) ** 2 <= r * r
        img[y1 : y1 + extent, x1 : x1 + extent][mask] = rgb
    else:  # upward triangle
        yy, xx = np.mgrid[0:extent, 0:extent]
        half = extent / 2.0
        mask = np.abs(xx - half + 0.5) <= (yy + 1) * half / extent
        img[y1 : y1 + extent, x1 : x1 + extent][mask] = rgb
    return img


def _boxes_overlap(a, b):
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


@dataclass
class Scene:
    image: np.ndarray
    boxes: np.ndarray  # [n, 4] normalized (cx, cy, w, h)
    classes: np.ndarray  # [n]
    shapes: list
    colors: list


def generate_scene(spec: SceneSpec, rng) -> Scene:
    size = spec.image_size
    img = np.zeros((size, size, 3))
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes_px = []
    shapes, colors = [], []
    for _ in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        extent = int(rng.integers(spec.min_extent, spec.max_extent + 1))
        box = None
        for _ in range(spec.placement_tries):
            x1 = int(rng.integers(0, size - extent + 1))
            y1 = int(rng.integers(0, size - extent + 1))
            candidate = (x1, y1, x1 + extent, y1 + extent)
            if not any(_boxes_overlap(candidate, b) for b in boxes_px):
                box = candidate
                break
        if box is None:  # crowded scene: accept the last candidate overlapping
            box = candidate
        img = _render_object(img, shape, color, box[0], box[1], extent)
        boxes_px.append(box)
        shapes.append(shape)
        colors.append(color)
    boxes = np.array(
        [
            [(x1 + x2) / 2 / size, (y1 + y2) / 2 / size, (x2 - x1) / size, (y2 - y1) / size]
            for x1, y1, x2, y2 in boxes_px
        ]
    )
    classes = np.array([class_id(s, c) for s, c in zip(shapes, colors)], dtype=np.int64)
    return Scene(image=img, boxes=boxes, classes=classes, shapes=shapes, colors=colors)


def sample_question(spec: SceneSpec, scene: Scene, rng):
    """Draw one (question text, answer text, kind) triple for a scene."""
    weights = np.array([spec.count_weight, spec.existence_weight, spec.color_weight])
    kind = ("count", "existence", "color")[rng.choice(3, p=weights / weights.sum())]
    shape_counts = {s: scene.shapes.count(s) for s in SHAPES}
    if kind == "color":
        unique = [s for s in SHAPES if shape_counts[s] == 1]
        if not unique:
            kind = "count"
        else:
            shape = unique[int(rng.integers(len(unique)))]
            color = scene.colors[scene.shapes.index(shape)]
            return f"what color is the {shape} ?", color, "color"
    if kind == "count":
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        return f"how many {PLURALS[shape]} ?", str(shape_counts[shape]), "count"
    present = sorted(set(zip(scene.shapes, scene.colors)))
    absent = [(s, c) for s in SHAPES for c in COLORS if (s, c) not in present]
    pool = present if rng.integers(2) == 0 else absent
    shape, color = pool[int(rng.integers(len(pool)))]
    answer = "yes" if (shape, color) in present else "no"
    return f"is there a {color} {shape} ?", answer, "existence"


@dataclass
class Dataset:
    spec: SceneSpec
    images: np.ndarray  # [N, H, W, 3]
    annotations: list  # dicts with boxes/classes/question fields
    vocab: list
    answers: list

    def __len__(self):
        return self.images.shape[0]


def generate_dataset(spec: SceneSpec, n_scenes, seed, out_dir=None) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    vocab = build_vocab(spec)
    answers = answer_vocab(spec)
    images = np.zeros((n_scenes, spec.image_size, spec.image_size, 3))
    annotations = []
    for i in range(n_scenes):
        scene = generate_scene(spec, rng)
        question, answer, kind = sample_question(spec, scene, rng)
        images[i] = scene.image
        annotations.append(
            {
                "index": i,
                "boxes": [[round(v, 10) for v in b] for b in scene.boxes.tolist()],
                "classes": scene.classes.tolist(),
                "question": question,
                "question_ids": encode_question(question, vocab),
                "question_type": kind,
                "answer": answer,
                "answer_id": answers.index(answer),
            }
        )
    ds = Dataset(spec=spec, images=images, annotations=annotations, vocab=vocab, answers=answers)
    if out_dir is not None:
        save_dataset(ds, out_dir, seed)
    return ds


def save_dataset(ds: Dataset, out_dir, seed):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "images.tnsr", ds.images)
    with open(out / "annotations.jsonl", "w") as fh:
        for ann in ds.annotations:
            fh.write(json.dumps(ann, sort_keys=True) + "\n")
    meta = {
        "scene_spec": asdict(ds.spec),
        "seed": seed,
        "num_scenes": len(ds),
        "vocab": ds.vocab,
        "answers": ds.answers,
        "num_classes": num_classes(),
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "meta.json").exists():
        raise FileNotFoundError(f"no dataset at {path} (missing meta.json)")
    meta = json.loads((path / "meta.json").read_text())
    annotations = [json.loads(line) for line in (path / "annotations.jsonl").read_text().splitlines()]
    return Dataset(
        spec=SceneSpec(**meta["scene_spec"]),
        images=load_tensor(path / "images.tnsr"),
        annotations=annotations,
        vocab=meta["vocab"],
        answers=meta["answers"],
    )
