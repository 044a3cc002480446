"""Deterministic synthetic datasets.

Oriented-glyph images for the vision experiments (class identity is
rotation-invariant, appearance is not, so an upright-trained classifier is
genuinely hurt by quarter-turn rotations), and a toy SCAN-style command ->
action corpus for compositional generalization, with its grammar interpreter
bundled as the correctness oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

# ---------------------------------------------------------------------------
# oriented glyphs
# ---------------------------------------------------------------------------

SIDE = 16
N_CLASSES = 8
SPLITS = ("train", "test_upright", "test_rot90")


def _glyph_templates() -> np.ndarray:
    """8 upright glyphs: unions of random rectangles, rejected until clearly
    asymmetric under every quarter turn.

    Unstructured templates keep the class orbits separable while spreading a
    trained classifier's wrong-orientation confusions across classes instead
    of concentrating them (rigid motifs rotate onto one another).
    """
    t = np.zeros((N_CLASSES, SIDE, SIDE))
    for c in range(N_CLASSES):
        for attempt in range(64):
            rng = substream(0, "glyph_template", c, attempt)
            img = np.zeros((SIDE, SIDE))
            for _ in range(5):
                h, w = rng.integers(2, 5, size=2)
                r = int(rng.integers(1, SIDE - 1 - h))
                col = int(rng.integers(1, SIDE - 1 - w))
                img[r:r + h, col:col + w] = 1.0
            if all(np.abs(img - np.rot90(img, k)).sum() > 12 for k in (1, 2, 3)):
                t[c] = img
                break
        else:
            raise RuntimeError(f"no asymmetric template found for class {c}")
    return t


_TEMPLATES = _glyph_templates()


@dataclass
class OrientedShapeDataset:
    images: np.ndarray            # (N, 1, SIDE, SIDE) in [0, 1]
    labels: np.ndarray            # (N,) ints in [0, N_CLASSES)
    split: str
    rotations: np.ndarray         # (N,) Z4 element applied per example
    seed: int

    def __len__(self):
        return self.images.shape[0]


def gen_shapes(seed: int, n: int, split: str) -> OrientedShapeDataset:
    """Deterministic dataset; each example is a pure function of (seed, index).

    train / test_upright render upright; test_rot90 applies an independently
    random quarter-turn per example, recorded in `rotations`.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    images = np.empty((n, 1, SIDE, SIDE))
    labels = np.empty(n, dtype=np.int64)
    rotations = np.zeros(n, dtype=np.int64)
    for i in range(n):
        rng = substream(seed, "shapes", split, i)
        cls = i % N_CLASSES
        img = _TEMPLATES[cls] * rng.uniform(0.75, 1.0)
        img = img + rng.normal(0.0, 0.08, size=img.shape)
        shift = rng.integers(-1, 2, size=2)
        img = np.roll(img, shift, axis=(0, 1))
        if split == "test_rot90":
            g = int(rng.integers(0, 4))
            rotations[i] = g
            img = np.rot90(img, k=g)
        images[i, 0] = np.clip(img, 0.0, 1.0)
        labels[i] = cls
    return OrientedShapeDataset(images=images, labels=labels, split=split,
                                rotations=rotations, seed=seed)


def save_container(ds: OrientedShapeDataset, out_dir) -> Path:
    """JSON manifest plus flat little-endian arrays."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.images.astype("<f8").tofile(out / "images.f64")
    ds.labels.astype("<i8").tofile(out / "labels.i64")
    ds.rotations.astype("<i8").tofile(out / "rotations.i64")
    manifest = {"kind": "oriented_shapes", "seed": ds.seed, "split": ds.split,
                "n": len(ds), "image_shape": [1, SIDE, SIDE],
                "files": {"images": "images.f64", "labels": "labels.i64",
                          "rotations": "rotations.i64"}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"


def load_container(manifest_path) -> OrientedShapeDataset:
    man = json.loads(Path(manifest_path).read_text())
    base = Path(manifest_path).parent
    n = man["n"]
    images = np.fromfile(base / man["files"]["images"], dtype="<f8")
    images = images.reshape(n, *man["image_shape"])
    labels = np.fromfile(base / man["files"]["labels"], dtype="<i8")
    rotations = np.fromfile(base / man["files"]["rotations"], dtype="<i8")
    return OrientedShapeDataset(images=images, labels=labels, split=man["split"],
                                rotations=rotations, seed=man["seed"])


# ---------------------------------------------------------------------------
# toy SCAN
# ---------------------------------------------------------------------------

IN_VOCAB = ("walk", "run", "jump", "look", "left", "right",
            "twice", "thrice", "and")
OUT_VOCAB = ("WALK", "RUN", "JUMP", "LOOK", "LTURN", "RTURN")

_ACT = {"walk": "WALK", "run": "RUN", "jump": "JUMP", "look": "LOOK"}
_TURN = {"left": "LTURN", "right": "RTURN"}
_REPEAT = {"twice": 2, "thrice": 3}


def interpret(command: list[str]) -> list[str]:
    """Execute a command under the toy grammar; the corpus oracle.

    command := phrase | phrase 'and' phrase
    phrase  := unit | unit ('twice'|'thrice')
    unit    := VERB | VERB DIR
    """
    if "and" in command:
        i = command.index("and")
        return interpret(command[:i]) + interpret(command[i + 1:])
    words = list(command)
    reps = 1
    if words and words[-1] in _REPEAT:
        reps = _REPEAT[words[-1]]
        words = words[:-1]
    if len(words) == 1 and words[0] in _ACT:
        block = [_ACT[words[0]]]
    elif len(words) == 2 and words[0] in _ACT and words[1] in _TURN:
        block = [_TURN[words[1]], _ACT[words[0]]]
    else:
        raise ValueError(f"not a valid command: {command}")
    return block * reps


def _all_phrases() -> list[list[str]]:
    units = [[v] for v in _ACT] + [[v, d] for v in _ACT for d in _TURN]
    return [u + r for u in units for r in ([], ["twice"], ["thrice"])]


def all_commands() -> list[list[str]]:
    phrases = _all_phrases()
    return [list(p) for p in phrases] + \
           [p1 + ["and"] + p2 for p1 in phrases for p2 in phrases]


@dataclass
class ToySCANCorpus:
    split: str
    train: list = field(repr=False)
    val: list = field(repr=False)
    test: list = field(repr=False)
    in_vocab: tuple = IN_VOCAB
    out_vocab: tuple = OUT_VOCAB
    swap_in: tuple = ()           # input-vocabulary word pair for the group
    swap_out: tuple = ()          # output-vocabulary word pair


def _is_composed(command: list[str], word: str, bare_forms: list[list[str]]) -> bool:
    return word in command and command not in bare_forms


def gen_scan(split: str, seed: int = 0, val_fraction: float = 0.1) -> ToySCANCorpus:
    """Toy compositional splits.

    add_jump: composed uses of 'jump' are held out for test; the bare command
    stays in train. around_right: analogous, with 'right' exposed in train
    only through bare 'VERB right' commands.
    """
    cmds = all_commands()
    if split == "add_jump":
        bare = [["jump"]]
        held = [c for c in cmds if _is_composed(c, "jump", bare)]
        pool = [c for c in cmds if not _is_composed(c, "jump", bare)]
        swap_in, swap_out = ("jump", "run"), ("JUMP", "RUN")
    elif split == "around_right":
        bare = [[v, "right"] for v in _ACT]
        held = [c for c in cmds if _is_composed(c, "right", bare)]
        pool = [c for c in cmds if not _is_composed(c, "right", bare)]
        swap_in, swap_out = ("left", "right"), ("LTURN", "RTURN")
    else:
        raise ValueError(f"unknown split {split!r}")
    rng = substream(seed, "scan_split", split)
    order = rng.permutation(len(pool))
    n_val = max(1, int(len(pool) * val_fraction))
    val_idx = set(int(i) for i in order[:n_val])
    pairs = [(c, interpret(c)) for c in pool]
    train = [p for i, p in enumerate(pairs) if i not in val_idx]
    val = [p for i, p in enumerate(pairs) if i in val_idx]
    test = [(c, interpret(c)) for c in held]
    return ToySCANCorpus(split=split, train=train, val=val, test=test,
                         swap_in=swap_in, swap_out=swap_out)


def apply_group_to_pair(corpus: ToySCANCorpus, g: int, pair):
    """Simultaneous input/output vocabulary swap (Z2; g=0 is identity)."""
    if g % 2 == 0:
        return pair
    def swap(tokens, a, b):
        table = {a: b, b: a}
        return [table.get(t, t) for t in tokens]
    cmd, out = pair
    return (swap(cmd, *corpus.swap_in), swap(out, *corpus.swap_out))
