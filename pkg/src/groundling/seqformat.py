"""Serialization of grounding samples into unified token sequences.

A sample is one image plus a list of prompt queries. Each query block is
  text chars, <present> followed by per-instance (coord, size, seg) slot
  triplets in raster order, or <absent>; the block ends with <eoq>.
The whole sequence ends with <eos>. Image placeholder tokens come first and
carry 2D grid positions; coord/size slots carry the continuous values that
the embedding layer re-injects as Fourier features.

Labels are the next-token shift of the token stream; image positions are
never supervised. `loss_mask` additionally drops text-expression labels for
the later training stages (prompt masking).

The attention predicate implements the hybrid mask: image tokens are
bidirectional among themselves, everything else is causal over the full
visual prefix; in query_masked mode, blocks are isolated from one another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Center, Size2D, box_corners, quantize_unit, validate_mask

__all__ = [
    "Vocab",
    "Instance",
    "TokenSequence",
    "AttentionSpec",
    "PackedBatch",
    "ParseError",
    "ParsedQuery",
    "IGNORE",
    "ROLE_IMAGE", "ROLE_TEXT", "ROLE_COORD", "ROLE_SIZE", "ROLE_SEG", "ROLE_CTRL",
    "ROLE_NAMES",
    "raster_order",
    "serialize_sample",
    "loss_mask",
    "attends",
    "attention_mask",
    "pack",
    "parse_generated",
    "dump_jsonl",
]

IGNORE = -1

ROLE_IMAGE, ROLE_TEXT, ROLE_COORD, ROLE_SIZE, ROLE_SEG, ROLE_CTRL = range(6)
ROLE_NAMES = {ROLE_IMAGE: "image", ROLE_TEXT: "text", ROLE_COORD: "coord",
              ROLE_SIZE: "size", ROLE_SEG: "seg", ROLE_CTRL: "control"}

_ALPHABET = "abcdefghijklmnopqrstuvwxyz "
_SPECIALS = ("<img>", "<present>", "<absent>", "<coord>", "<size>", "<seg>", "<eoq>", "<eos>")


@dataclass(frozen=True)
class Vocab:
    """Character alphabet plus the task control tokens.

    Text ids occupy [0, n_text); special ids follow. IGNORE (-1) is a label
    value only, never an input token.
    """

    alphabet: str = _ALPHABET

    @property
    def n_text(self) -> int:
        return len(self.alphabet)

    @property
    def size(self) -> int:
        return self.n_text + len(_SPECIALS)

    def _special(self, name: str) -> int:
        return self.n_text + _SPECIALS.index(name)

    @property
    def img(self) -> int:
        return self._special("<img>")

    @property
    def present(self) -> int:
        return self._special("<present>")

    @property
    def absent(self) -> int:
        return self._special("<absent>")

    @property
    def coord(self) -> int:
        return self._special("<coord>")

    @property
    def size_tok(self) -> int:
        return self._special("<size>")

    @property
    def seg(self) -> int:
        return self._special("<seg>")

    @property
    def eoq(self) -> int:
        return self._special("<eoq>")

    @property
    def eos(self) -> int:
        return self._special("<eos>")

    def encode_text(self, text: str) -> list[int]:
        ids = []
        for ch in text:
            pos = self.alphabet.find(ch)
            if pos < 0:
                raise ValueError(f"character {ch!r} not in prompt alphabet")
            ids.append(pos)
        return ids

    def decode_text(self, ids) -> str:
        return "".join(self.alphabet[i] for i in ids)

    def token_name(self, tok: int) -> str:
        if 0 <= tok < self.n_text:
            return self.alphabet[tok]
        if self.n_text <= tok < self.size:
            return _SPECIALS[tok - self.n_text]
        return f"<bad:{tok}>"


@dataclass(frozen=True)
class Instance:
    """One grounded object: normalized center/size, exact binary mask."""

    center: Center
    size: Size2D
    mask: np.ndarray | None = None

    @property
    def box(self) -> tuple[float, float, float, float]:
        return box_corners(self.center, self.size)


def raster_order(instances: list, bins: int = 1024) -> list:
    """Sort instances by quantized (row bin, column bin) of the center.

    Stable: instances with identical quantized centers keep input order.
    """
    if not instances:
        return []
    ys = quantize_unit([inst.center.y for inst in instances], bins)
    xs = quantize_unit([inst.center.x for inst in instances], bins)
    order = sorted(range(len(instances)), key=lambda i: (ys[i], xs[i]))
    return [instances[i] for i in order]


@dataclass
class TokenSequence:
    """One serialized sample. All arrays share length S.

    centers/sizes are NaN except at coord/size/seg slots (seg rows repeat
    their instance's resolved geometry for the embedding layer); masks
    holds the ground truth mask at seg slots. Labels are already
    next-token shifted with IGNORE at image positions and at the final
    position.
    """

    tokens: np.ndarray
    roles: np.ndarray
    blocks: np.ndarray
    grid: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    sizes: np.ndarray
    masks: list
    prompts: list[str]
    polarities: list[bool]
    image_grid: tuple[int, int]
    sample_id: str = ""

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_image(self) -> int:
        return int(np.count_nonzero(self.roles == ROLE_IMAGE))


def serialize_sample(image_grid: tuple[int, int], queries: list, vocab: Vocab,
                     cap: int | None = None, sample_id: str = "") -> TokenSequence:
    """Serialize (image grid, [(prompt, instances), ...]) into a TokenSequence.

    Positive queries must carry at least one instance; negatives exactly
    zero. Raises ValueError when a positive query is empty or exceeds `cap`.
    """
    rows, cols = image_grid
    if rows < 1 or cols < 1:
        raise ValueError(f"bad image grid {image_grid}")

    tokens: list[int] = []
    roles: list[int] = []
    blocks: list[int] = []
    grid: list[tuple[int, int]] = []
    centers: list[tuple[float, float]] = []
    sizes: list[tuple[float, float]] = []
    masks: list = []
    prompts: list[str] = []
    polarities: list[bool] = []

    def emit(tok, role, block, g=(-1, -1), center=(np.nan, np.nan),
             size=(np.nan, np.nan), mask=None):
        tokens.append(tok)
        roles.append(role)
        blocks.append(block)
        grid.append(g)
        centers.append(center)
        sizes.append(size)
        masks.append(mask)

    for r in range(rows):
        for c in range(cols):
            emit(vocab.img, ROLE_IMAGE, 0, g=(c, r))

    for q, (prompt, instances) in enumerate(queries, start=1):
        if not prompt:
            raise ValueError("empty prompt")
        prompts.append(prompt)
        polarities.append(bool(instances))
        for tid in vocab.encode_text(prompt):
            emit(tid, ROLE_TEXT, q)
        if instances:
            if cap is not None and len(instances) > cap:
                raise ValueError(f"query {q}: {len(instances)} instances exceeds cap {cap}")
            emit(vocab.present, ROLE_CTRL, q)
            for inst in raster_order(instances):
                c = (inst.center.x, inst.center.y)
                s = (inst.size.w, inst.size.h)
                emit(vocab.coord, ROLE_COORD, q, center=c)
                emit(vocab.size_tok, ROLE_SIZE, q, size=s)
                m = validate_mask(inst.mask) if inst.mask is not None else None
                # seg rows carry the resolved geometry too: the embedding
                # layer conditions the seg query on it directly
                emit(vocab.seg, ROLE_SEG, q, center=c, size=s, mask=m)
        else:
            emit(vocab.absent, ROLE_CTRL, q)
        emit(vocab.eoq, ROLE_CTRL, q)
    emit(vocab.eos, ROLE_CTRL, 0)

    tok_arr = np.asarray(tokens, dtype=np.int32)
    role_arr = np.asarray(roles, dtype=np.int8)
    labels = np.full(len(tokens), IGNORE, dtype=np.int32)
    labels[:-1] = tok_arr[1:]
    labels[role_arr == ROLE_IMAGE] = IGNORE

    return TokenSequence(
        tokens=tok_arr,
        roles=role_arr,
        blocks=np.asarray(blocks, dtype=np.int16),
        grid=np.asarray(grid, dtype=np.int16),
        labels=labels,
        centers=np.asarray(centers, dtype=np.float64),
        sizes=np.asarray(sizes, dtype=np.float64),
        masks=masks,
        prompts=prompts,
        polarities=polarities,
        image_grid=(rows, cols),
        sample_id=sample_id,
    )


def loss_mask(seq: TokenSequence, stage: int, vocab: Vocab) -> np.ndarray:
    """Stage-adjusted labels: stages 2-3 IGNORE text-expression labels.

    Presence/<eoq>/<eos> and the structural coord/size/seg labels stay
    supervised in every stage; image positions are never supervised.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    labels = seq.labels.copy()
    if stage >= 2:
        labels[(labels >= 0) & (labels < vocab.n_text)] = IGNORE
    return labels


@dataclass(frozen=True)
class AttentionSpec:
    """Everything the hybrid-mask predicate needs, per packed position."""

    sample_ids: np.ndarray
    roles: np.ndarray
    blocks: np.ndarray
    mode: str = "full_ar"

    def __post_init__(self):
        if self.mode not in ("full_ar", "query_masked"):
            raise ValueError(f"unknown attention mode {self.mode!r}")


def attends(spec: AttentionSpec, i: int, j: int) -> bool:
    """Can position i attend to position j? Scalar reference predicate."""
    n = len(spec.sample_ids)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"position out of range: ({i}, {j}) with length {n}")
    if spec.sample_ids[i] != spec.sample_ids[j]:
        return False
    if spec.roles[i] == ROLE_IMAGE:
        return bool(spec.roles[j] == ROLE_IMAGE)
    if spec.roles[j] == ROLE_IMAGE:
        return True
    if j > i:
        return False
    if spec.mode == "full_ar":
        return True
    return bool(spec.blocks[i] == spec.blocks[j])


def attention_mask(spec: AttentionSpec) -> np.ndarray:
    """Dense [S, S] bool matrix of the predicate (True = may attend)."""
    sample = np.asarray(spec.sample_ids)
    roles = np.asarray(spec.roles)
    blocks = np.asarray(spec.blocks)
    n = len(sample)
    same = sample[:, None] == sample[None, :]
    img_i = (roles == ROLE_IMAGE)[:, None]
    img_j = (roles == ROLE_IMAGE)[None, :]
    causal = np.arange(n)[None, :] <= np.arange(n)[:, None]
    if spec.mode == "full_ar":
        nonimg = causal
    else:
        nonimg = causal & (blocks[:, None] == blocks[None, :])
    return same & np.where(img_i, img_j, img_j | (~img_j & nonimg))


@dataclass
class PackedBatch:
    """Concatenated token sequences with per-sample offsets.

    Local sequence positions restart at every sample so packed and
    per-sample forwards see identical rotary angles.
    """

    sequences: list[TokenSequence]
    offsets: np.ndarray
    lengths: np.ndarray
    tokens: np.ndarray = field(init=False)
    roles: np.ndarray = field(init=False)
    blocks: np.ndarray = field(init=False)
    grid: np.ndarray = field(init=False)
    labels: np.ndarray = field(init=False)
    centers: np.ndarray = field(init=False)
    sizes: np.ndarray = field(init=False)
    inject_centers: np.ndarray = field(init=False)
    inject_sizes: np.ndarray = field(init=False)
    masks: list = field(init=False)
    sample_ids: np.ndarray = field(init=False)
    positions: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tokens = np.concatenate([s.tokens for s in self.sequences])
        self.roles = np.concatenate([s.roles for s in self.sequences])
        self.blocks = np.concatenate([s.blocks for s in self.sequences])
        self.grid = np.concatenate([s.grid for s in self.sequences])
        self.labels = np.concatenate([s.labels for s in self.sequences])
        self.centers = np.concatenate([s.centers for s in self.sequences])
        self.sizes = np.concatenate([s.sizes for s in self.sequences])
        # what the embedding layer re-injects; training may jitter these
        # (head targets always read the exact centers/sizes above)
        self.inject_centers = self.centers.copy()
        self.inject_sizes = self.sizes.copy()
        self.masks = [m for s in self.sequences for m in s.masks]
        self.sample_ids = np.concatenate([
            np.full(len(s), k, dtype=np.int32) for k, s in enumerate(self.sequences)])
        self.positions = np.concatenate([
            np.arange(len(s), dtype=np.int32) for s in self.sequences])

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def attention_spec(self, mode: str) -> AttentionSpec:
        return AttentionSpec(self.sample_ids, self.roles, self.blocks, mode)


def pack(samples: list[TokenSequence], c_max: int) -> list[PackedBatch]:
    """First-fit packing, preserving input order within each batch."""
    bins: list[list[TokenSequence]] = []
    room: list[int] = []
    for s in samples:
        if len(s) > c_max:
            raise ValueError(f"sample of length {len(s)} exceeds capacity {c_max}")
        for k in range(len(bins)):
            if room[k] >= len(s):
                bins[k].append(s)
                room[k] -= len(s)
                break
        else:
            bins.append([s])
            room.append(c_max - len(s))
    out = []
    for group in bins:
        lengths = np.asarray([len(s) for s in group], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        out.append(PackedBatch(group, offsets, lengths))
    return out


class ParseError(ValueError):
    """Malformed generated stream; names the violated transition."""

    def __init__(self, message: str, position: int, expected: str):
        super().__init__(f"{message} at position {position} (expected {expected})")
        self.position = position
        self.expected = expected


@dataclass
class ParsedQuery:
    prompt: str
    present: bool
    instances: list


def parse_generated(tokens, head_picks: dict, vocab: Vocab) -> tuple[list[ParsedQuery], bool]:
    """Recover query structure from a generated task-token stream.

    `tokens` is the stream after the image placeholders. `head_picks` maps a
    stream index to the continuous value decoded there: (x, y) at coord
    slots, (w, h) at size slots, a mask array (or None) at seg slots.
    Returns (queries, complete); complete is False when the stream ran out
    before <eos>. Raises ParseError on an invalid transition.
    """
    queries: list[ParsedQuery] = []
    state = "text"
    prompt_chars: list[str] = []
    current: ParsedQuery | None = None
    pending: dict = {}

    def close_instance(idx):
        c = pending.get("center")
        s = pending.get("size")
        center = Center(*c) if c is not None else None
        size = Size2D(*s) if s is not None else None
        current.instances.append(Instance(center=center, size=size,
                                          mask=head_picks.get(idx)))
        pending.clear()

    for idx, tok in enumerate(np.asarray(tokens).tolist()):
        name = vocab.token_name(tok)
        if state == "text":
            if 0 <= tok < vocab.n_text:
                prompt_chars.append(vocab.alphabet[tok])
            elif tok == vocab.present:
                current = ParsedQuery("".join(prompt_chars), True, [])
                prompt_chars = []
                state = "coord"
            elif tok == vocab.absent:
                current = ParsedQuery("".join(prompt_chars), False, [])
                prompt_chars = []
                state = "eoq"
            elif tok == vocab.eos:
                if prompt_chars:
                    raise ParseError("unexpected <eos> mid-prompt", idx, "text-or-presence")
                return queries, True
            else:
                raise ParseError(f"unexpected {name}", idx, "text-or-presence")
        elif state == "coord":
            if tok != vocab.coord:
                raise ParseError(f"unexpected {name}", idx, "coord")
            pending["center"] = head_picks.get(idx)
            state = "size"
        elif state == "size":
            if tok != vocab.size_tok:
                raise ParseError(f"unexpected {name}", idx, "size")
            pending["size"] = head_picks.get(idx)
            state = "seg"
        elif state == "seg":
            if tok != vocab.seg:
                raise ParseError(f"unexpected {name}", idx, "seg")
            close_instance(idx)
            state = "coord-or-eoq"
        elif state == "coord-or-eoq":
            if tok == vocab.coord:
                pending["center"] = head_picks.get(idx)
                state = "size"
            elif tok == vocab.eoq:
                queries.append(current)
                current = None
                state = "text"
            else:
                raise ParseError(f"unexpected {name}", idx, "coord-or-eoq")
        elif state == "eoq":
            if tok != vocab.eoq:
                raise ParseError(f"unexpected {name}", idx, "eoq")
            queries.append(current)
            current = None
            state = "text"

    # stream exhausted without <eos>
    if current is not None:
        queries.append(current)
    return queries, False


def dump_jsonl(seq: TokenSequence, path, vocab: Vocab) -> None:
    """Debug dump: one JSON object per position (id, role, block, grid, label)."""
    with open(path, "w") as fh:
        for i in range(len(seq)):
            g = seq.grid[i]
            rec = {
                "i": i,
                "id": int(seq.tokens[i]),
                "tok": vocab.token_name(int(seq.tokens[i])),
                "role": ROLE_NAMES[int(seq.roles[i])],
                "block": int(seq.blocks[i]),
                "grid": None if g[0] < 0 else [int(g[0]), int(g[1])],
                "label": int(seq.labels[i]),
            }
            fh.write(json.dumps(rec) + "\n")
