"""Synthetic grid-image QA records.

Each record is a ``g x g`` grid of (color, shape) cells rendered as one visual
token per cell, a short instruction, and a verbose templated answer. Different
question families over the same grid depend on different cells, so a model
that answers well must attend to instruction-dependent parts of the image.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .model import BOS_ID, EOS_ID, PAD_ID, SequenceBatch
from .numerics import make_rng

FAMILIES = ("color-at-cell", "count-color", "shape-at-cell", "row-of-shape")
DATASET_FORMAT = 1

RESPONSE_WORDS = ("the", "color", "shape", "at", "row", "column", "is", "count", "yes", "no", "none", "answer")


@dataclass(frozen=True)
class TaskSpec:
    grid_side: int = 4
    n_colors: int = 4
    n_shapes: int = 3
    question_families: tuple[str, ...] = FAMILIES
    response_len_range: tuple[int, int] = (1, 64)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "question_families", tuple(sorted(set(self.question_families))))
        object.__setattr__(self, "response_len_range", tuple(self.response_len_range))
        if self.grid_side < 2 or self.n_colors < 2 or self.n_shapes < 2:
            raise ConfigError("need grid_side >= 2, n_colors >= 2, n_shapes >= 2")
        unknown = set(self.question_families) - set(FAMILIES)
        if unknown or not self.question_families:
            raise ConfigError(f"bad question families: {sorted(unknown) or 'none given'}")
        lo, hi = self.response_len_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad response_len_range {self.response_len_range}")

    @property
    def n_visual(self) -> int:
        return self.grid_side**2

    @cached_property
    def vocab(self) -> "Vocab":
        return Vocab(self)

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for k in ("question_families", "response_len_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class Vocab:
    """Disjoint id ranges: specials, visual cells, instruction words, response words."""

    def __init__(self, spec: TaskSpec):
        g, nc, ns = spec.grid_side, spec.n_colors, spec.n_shapes
        self.specials = range(0, 3)
        self.visual = range(3, 3 + nc * ns)
        nxt = self.visual.stop
        self.instr_family = {f: nxt + i for i, f in enumerate(FAMILIES)}
        nxt += len(FAMILIES)
        self.instr_cell = list(range(nxt, nxt + g * g))
        nxt += g * g
        self.instr_color = list(range(nxt, nxt + nc))
        nxt += nc
        self.instr_shape = list(range(nxt, nxt + ns))
        nxt += ns
        self.instruction = range(self.visual.stop, nxt)
        self.word = {w: nxt + i for i, w in enumerate(RESPONSE_WORDS)}
        nxt += len(RESPONSE_WORDS)
        self.resp_color = list(range(nxt, nxt + nc))
        nxt += nc
        self.resp_shape = list(range(nxt, nxt + ns))
        nxt += ns
        self.resp_number = list(range(nxt, nxt + g * g + 1))
        nxt += g * g + 1
        self.response = range(self.instruction.stop, nxt)
        self.size = nxt
        self.n_shapes = ns
        ranges = [self.specials, self.visual, self.instruction, self.response]
        for a, b in zip(ranges, ranges[1:]):
            if a.stop > b.start:
                raise ConfigError(f"vocabulary ranges overlap: {a} and {b}")

    def cell_token(self, color: int, shape: int) -> int:
        return self.visual.start + color * self.n_shapes + shape

    def cell_content(self, token: int) -> tuple[int, int]:
        return divmod(token - self.visual.start, self.n_shapes)

    def range_of(self, token: int) -> str:
        for name in ("specials", "visual", "instruction", "response"):
            if token in getattr(self, name):
                return name
        raise ContractError(f"token {token} outside the vocabulary")


@dataclass
class DatasetRecord:
    record_id: str
    visual_tokens: list[int]
    instruction_tokens: list[int]
    response_tokens: list[int]
    answer_cell: tuple[int, int] | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["answer_cell"] = list(self.answer_cell) if self.answer_cell is not None else None
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        d = json.loads(line)
        cell = d.get("answer_cell")
        return cls(d["record_id"], d["visual_tokens"], d["instruction_tokens"], d["response_tokens"],
                   tuple(cell) if cell is not None else None)

    @property
    def prompt(self) -> tuple[list[int], list[int]]:
        return self.visual_tokens, self.instruction_tokens


def _render(spec: TaskSpec, family: str, colors: np.ndarray, shapes: np.ndarray, rng: np.random.Generator):
    v = spec.vocab
    w = v.word
    g = spec.grid_side
    num = v.resp_number
    if family in ("color-at-cell", "shape-at-cell"):
        r, c = (int(x) for x in rng.integers(0, g, size=2))
        attr = "color" if family == "color-at-cell" else "shape"
        value = v.resp_color[colors[r, c]] if attr == "color" else v.resp_shape[shapes[r, c]]
        instr = [v.instr_family[family], v.instr_cell[r * g + c]]
        resp = [w["the"], w[attr], w["at"], w["row"], num[r], w["column"], num[c], w["is"], value, EOS_ID]
        return instr, resp, (r, c)
    if family == "count-color":
        # each cell's color is read out, followed by the running count
        target = int(rng.integers(0, spec.n_colors))
        instr = [v.instr_family[family], v.instr_color[target]]
        resp = [w["count"], v.resp_color[target]]
        running = 0
        for cell in colors.flatten():
            running += int(cell) == target
            resp += [v.resp_color[cell], num[running]]
        resp += [w["is"], num[running], EOS_ID]
        return instr, resp, None
    # row-of-shape: each row's shapes are read out, then whether the target is among them
    target = int(rng.integers(0, spec.n_shapes))
    instr = [v.instr_family[family], v.instr_shape[target]]
    resp = [v.resp_shape[target]]
    first = None
    for r in range(g):
        hit = bool((shapes[r] == target).any())
        if hit and first is None:
            first = r
        resp += [w["row"], num[r], *(v.resp_shape[x] for x in shapes[r]), w["yes"] if hit else w["no"]]
    resp += [w["answer"], num[first] if first is not None else w["none"], EOS_ID]
    return instr, resp, None


def generate_record(spec: TaskSpec, index: int) -> DatasetRecord:
    """Record ``index`` of the stream defined by ``spec.seed``."""
    if index < 0:
        raise ContractError("index must be >= 0")
    _ = spec.vocab
    rng = make_rng(spec.seed, index)
    g = spec.grid_side
    colors = rng.integers(0, spec.n_colors, size=(g, g))
    shapes = rng.integers(0, spec.n_shapes, size=(g, g))
    family = spec.question_families[int(rng.integers(0, len(spec.question_families)))]
    instr, resp, cell = _render(spec, family, colors, shapes, rng)
    lo, hi = spec.response_len_range
    if not lo <= len(resp) <= hi:
        raise ConfigError(f"{family} response length {len(resp)} outside response_len_range {spec.response_len_range}")
    visual = [spec.vocab.cell_token(int(c), int(s)) for c, s in zip(colors.flatten(), shapes.flatten())]
    return DatasetRecord(f"{spec.spec_hash()}-{index:07d}", visual, instr, resp, cell)


def generate_dataset(spec: TaskSpec, n: int, start: int = 0) -> list[DatasetRecord]:
    return [generate_record(spec, i) for i in range(start, start + n)]


def split_dataset(
    records: Sequence[DatasetRecord],
    fractions: tuple[float, float, float] = (0.9, 0.05, 0.05),
    min_response_len_for_bias_eval: int = 32,
    seed: int = 0,
) -> tuple[list[DatasetRecord], list[DatasetRecord], list[DatasetRecord]]:
    """Seeded (train, val, bias-eval) split.

    The bias-eval share is filled only with records whose response has at
    least ``min_response_len_for_bias_eval`` tokens; the rest is shuffled into
    train and val.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions {fractions} must be three nonnegative numbers summing to 1")
    n = len(records)
    n_bias = int(round(fractions[2] * n))
    n_val = int(round(fractions[1] * n))
    rng = make_rng(seed, 0x5B1)
    order = rng.permutation(n)
    long_ids = [int(i) for i in order if len(records[i].response_tokens) >= min_response_len_for_bias_eval]
    if fractions[2] > 0 and (n_bias > len(long_ids) or not long_ids):
        raise ConfigError(
            f"bias-eval needs {max(n_bias, 1)} records with response length >= "
            f"{min_response_len_for_bias_eval}, only {len(long_ids)} available "
            f"(shortfall {max(n_bias, 1) - len(long_ids)})"
        )
    bias_ids = long_ids[:n_bias]
    taken = set(bias_ids)
    rest = [int(i) for i in order if int(i) not in taken]
    # reshuffle so val is not biased toward the short records skipped above
    rest = [rest[i] for i in make_rng(seed, 0x5B2).permutation(len(rest))]
    val_ids, train_ids = rest[:n_val], rest[n_val:]
    pick = lambda ids: [records[i] for i in ids]
    return pick(train_ids), pick(val_ids), pick(bias_ids)


def to_batch(records: Sequence[DatasetRecord]) -> SequenceBatch:
    return SequenceBatch.from_segments([(r.visual_tokens, r.instruction_tokens, r.response_tokens) for r in records])


def write_dataset(path: str | Path, spec: TaskSpec, records: Iterable[DatasetRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": DATASET_FORMAT, "spec_hash": spec.spec_hash(), "task_spec": spec.to_dict()}
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True, separators=(",", ":")) + "\n")
        for r in records:
            fh.write(r.to_json() + "\n")
    return path


def read_dataset(path: str | Path) -> tuple[TaskSpec, list[DatasetRecord]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ContractError(f"{path} is empty")
    header = json.loads(lines[0]).get("header")
    if header is None or header.get("format_version") != DATASET_FORMAT:
        raise ContractError(f"{path}: missing or unsupported header")
    spec = TaskSpec.from_dict(header["task_spec"])
    if spec.spec_hash() != header["spec_hash"]:
        raise ContractError(f"{path}: spec hash mismatch")
    return spec, [DatasetRecord.from_json(line) for line in lines[1:] if line.strip()]
