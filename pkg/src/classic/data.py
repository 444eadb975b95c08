"""Examples, hash tokenization, synthetic domain suites, JSONL IO and batching."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import RandomSource

PAD_ID, CLS_ID, SEP_ID = 0, 1, 2
FIRST_TOKEN_ID = 3

LABELS = {"negative": 0, "positive": 1, "neutral": 2}
LABEL_NAMES = {v: k for k, v in LABELS.items()}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    sentence: tuple[str, ...]
    aspect: tuple[str, ...]
    label: int

    def __post_init__(self):
        object.__setattr__(self, "sentence", tuple(self.sentence))
        object.__setattr__(self, "aspect", tuple(self.aspect))
        if not self.sentence:
            raise DataError("example sentence is empty")
        if self.label not in (0, 1, 2):
            raise DataError(f"label {self.label!r} not in {{0, 1, 2}}")

    def to_record(self) -> dict:
        return {"text": " ".join(self.sentence), "aspect": " ".join(self.aspect),
                "label": LABEL_NAMES[self.label]}


@dataclass
class TaskDataset:
    name: str
    train: list[Example]
    valid: list[Example]
    test: list[Example]

    def __post_init__(self):
        for split in ("train", "valid", "test"):
            if not getattr(self, split):
                raise DataError(f"task {self.name!r}: {split} split is empty")


@dataclass
class EncodedBatch:
    ids: np.ndarray        # (N, L) int64
    pad_mask: np.ndarray   # (N, L) float64, 1 = real token
    labels: np.ndarray     # (N,) int64
    task_id: int

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class TokenizerStats:
    sequences: int = 0
    truncated: int = 0


# ---------------------------------------------------------------------------
# tokenization


def token_id(token: str, vocab_buckets: int) -> int:
    # blake2b rather than hash(): str hashing is salted per process
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return FIRST_TOKEN_ID + int.from_bytes(digest, "little") % (vocab_buckets - FIRST_TOKEN_ID)


def tokenize(example: Example, vocab_buckets: int, max_len: int,
             stats: TokenizerStats | None = None) -> list[int]:
    """``[CLS] sentence [SEP] aspect [SEP]``, truncated to ``max_len`` keeping the final [SEP]."""
    if vocab_buckets < 16:
        raise DataError(f"vocab_buckets must be >= 16, got {vocab_buckets}")
    if max_len < 3:
        raise DataError(f"max_len must be >= 3, got {max_len}")
    ids = [CLS_ID] + [token_id(w, vocab_buckets) for w in example.sentence] + [SEP_ID]
    ids += [token_id(w, vocab_buckets) for w in example.aspect] + [SEP_ID]
    if stats is not None:
        stats.sequences += 1
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [SEP_ID]
        if stats is not None:
            stats.truncated += 1
    return ids


def encode(examples: list[Example], vocab_buckets: int, max_len: int, task_id: int,
           stats: TokenizerStats | None = None) -> EncodedBatch:
    seqs = [tokenize(ex, vocab_buckets, max_len, stats) for ex in examples]
    width = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s
    return EncodedBatch(ids=ids, pad_mask=(ids != PAD_ID).astype(np.float64),
                        labels=np.array([ex.label for ex in examples], dtype=np.int64),
                        task_id=task_id)


def batches_per_epoch(n: int, batch_size: int, training: bool) -> int:
    return n // batch_size if training else math.ceil(n / batch_size)


def batch_iter(split: list[Example], batch_size: int, shuffle_seed: int | None, *,
               vocab_buckets: int, max_len: int, task_id: int = 0,
               training: bool = True) -> list[EncodedBatch]:
    """Encode ``split`` into batches. Training drops the last short batch.

    ``shuffle_seed=None`` keeps file order.
    """
    if batch_size < 2:
        raise DataError(f"batch_size must be >= 2, got {batch_size}")
    if training and len(split) < batch_size:
        raise DataError(f"split of {len(split)} examples is smaller than batch size {batch_size}")
    order = np.arange(len(split))
    if shuffle_seed is not None:
        order = RandomSource(shuffle_seed).permutation(len(split))
    out = []
    for b in range(batches_per_epoch(len(split), batch_size, training)):
        rows = order[b * batch_size: (b + 1) * batch_size]
        out.append(encode([split[i] for i in rows], vocab_buckets, max_len, task_id))
    return out


# ---------------------------------------------------------------------------
# JSONL


def parse_label(raw) -> int:
    if not isinstance(raw, str) or raw.strip().lower() not in LABELS:
        raise DataError(f"unknown label {raw!r}")
    return LABELS[raw.strip().lower()]


def load_jsonl(path: str | Path) -> list[Example]:
    path = Path(path)
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                text, aspect = rec["text"], rec["aspect"]
                if not isinstance(text, str) or not isinstance(aspect, str):
                    raise TypeError("text and aspect must be strings")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            try:
                examples.append(Example(text.split(), aspect.split(), parse_label(rec.get("label"))))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not examples:
        raise DataError(f"{path}: empty split")
    return examples


def write_jsonl(path: str | Path, examples: list[Example]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def load_task_dir(path: str | Path) -> TaskDataset:
    path = Path(path)
    return TaskDataset(path.name, load_jsonl(path / "train.jsonl"),
                       load_jsonl(path / "valid.jsonl"), load_jsonl(path / "test.jsonl"))


def load_suite(root: str | Path, names: list[str] | None = None) -> list[TaskDataset]:
    root = Path(root)
    if names is None:
        manifest = root / "manifest.json"
        if manifest.exists():
            names = json.loads(manifest.read_text())["tasks"]
        else:
            names = sorted(p.name for p in root.iterdir() if (p / "train.jsonl").exists())
    if not names:
        raise DataError(f"{root}: no task directories")
    return [load_task_dir(root / n) for n in names]


def dump_suite(suite: list[TaskDataset], outdir: str | Path, params: dict | None = None) -> None:
    outdir = Path(outdir)
    for task in suite:
        for split in ("train", "valid", "test"):
            write_jsonl(outdir / task.name / f"{split}.jsonl", getattr(task, split))
    manifest = {"tasks": [t.name for t in suite], "params": params or {}}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic suites


@dataclass
class SyntheticSpec:
    """Lexicon sizes for generated domains.

    Defaults keep each domain's vocabulary small enough for a 32-wide model
    to separate from ~80 training sentences.
    """

    shared_sentiment: int = 4       # per polarity
    domain_aspects: int = 4
    domain_fillers: int = 4
    shared_fillers: int = 4
    polarity_words: tuple[int, ...] = (1, 3)
    filler_range: tuple[int, int] = (1, 3)
    neutral: bool = False
    split: tuple[float, float, float] = field(default=(0.70, 0.15, 0.15))


def _word(prefix: str, i: int) -> str:
    return f"{prefix}{i:02d}"


def _split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return n_train, n_valid, n - n_train - n_valid


def generate_synthetic_suite(seed: int, n_tasks: int, examples_per_task: int,
                             flip_fraction: float,
                             spec: SyntheticSpec | None = None) -> list[TaskDataset]:
    """Multi-domain sentiment tasks that conflict on a fraction of shared words.

    Every task draws sentiment words from one shared lexicon. In odd-indexed
    tasks (0-based 1, 3, ...) a ``flip_fraction`` share of those words carry the
    opposite polarity, so a single classifier trained sequentially is pushed
    to overwrite what it learned on the previous task.
    """
    if n_tasks < 2:
        raise DataError("n_tasks must be >= 2")
    if examples_per_task < 30:
        raise DataError("examples_per_task must be >= 30")
    if not 0.0 <= flip_fraction <= 1.0:
        raise DataError("flip_fraction out of range")
    spec = spec or SyntheticSpec()
    rng = RandomSource(seed)
    classes = (0, 1, 2) if spec.neutral else (0, 1)

    n = spec.shared_sentiment
    lexicon = {0: [_word("neg", i) for i in range(n)], 1: [_word("pos", i) for i in range(n)]}
    n_flip = int(round(flip_fraction * n))
    flipped = {pol: set(rng.choice(n, size=n_flip, replace=False).tolist()) for pol in (0, 1)}
    shared_fill = [_word("the", i) for i in range(spec.shared_fillers)]
    neutral_words = [_word("meh", i) for i in range(n)]

    suite = []
    for t in range(n_tasks):
        trng = rng.spawn(t)
        domain = f"d{t}"
        aspects = [f"{domain}asp{i:02d}" for i in range(spec.domain_aspects)]
        fillers = [f"{domain}w{i:02d}" for i in range(spec.domain_fillers)]
        conflict = t % 2 == 1

        # words whose polarity *in this domain* is the key
        effective = {2: neutral_words}
        for pol in (0, 1):
            keep = [w for k, w in enumerate(lexicon[pol]) if not (conflict and k in flipped[pol])]
            turned = [w for k, w in enumerate(lexicon[1 - pol]) if conflict and k in flipped[1 - pol]]
            effective[pol] = keep + turned

        def pick(pool: list[str]) -> str:
            return pool[int(trng.integers(0, len(pool)))]

        sizes = _split_sizes(examples_per_task, spec.split)
        examples = []
        for size in sizes:
            labels = [classes[i % len(classes)] for i in range(size)]
            for i in trng.permutation(size):
                label = labels[i]
                k = int(trng.choice(list(spec.polarity_words)))
                if label == 2:
                    words = [pick(effective[2]) for _ in range(k)]
                else:
                    n_major = k // 2 + 1
                    words = [pick(effective[label]) for _ in range(n_major)]
                    words += [pick(effective[1 - label]) for _ in range(k - n_major)]
                n_fill = int(trng.integers(spec.filler_range[0], spec.filler_range[1] + 1))
                words += [pick(fillers + shared_fill) for _ in range(n_fill)]
                aspect = pick(aspects)
                words.append(aspect)
                order = trng.permutation(len(words))
                examples.append(Example([words[j] for j in order], [aspect], label))

        n_train, n_valid, _ = sizes
        suite.append(TaskDataset(
            name=f"task{t:02d}",
            train=examples[:n_train],
            valid=examples[n_train:n_train + n_valid],
            test=examples[n_train + n_valid:],
        ))
    return suite


def iter_examples(suite: list[TaskDataset]) -> Iterator[tuple[int, Example]]:
    for t, task in enumerate(suite):
        for ex in task.train + task.valid + task.test:
            yield t, ex
