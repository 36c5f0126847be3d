"""Episode construction: sample a task, sample a query, retrieve demonstrations,
and assemble the demonstration-conditioned token sequence with a loss mask.

Token layout of a full training sequence:

    [BOS] d1_input [SEP] d1_target [DEMO_SEP] ... q_input [SEP] q_target [EOS]

The loss mask is true exactly on the query-target span plus the closing EOS
(and additionally on demonstration targets only when ``supervise_demos`` is
set). Frame-feature inputs occupy one FRAME placeholder token per frame; the
actual frame vectors ride alongside the token ids and are injected by the
model's feature projector.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Mixture, Sample
from .retrieval import EmbeddingIndex, RetrievalError, knn, query_vector

PAD, BOS, EOS, SEP, DEMO_SEP, FRAME = 256, 257, 258, 259, 260, 261
VOCAB_SIZE = 262

_SPECIAL_NAMES = {
    "pad": PAD,
    "bos": BOS,
    "eos": EOS,
    "sep": SEP,
    "demo_sep": DEMO_SEP,
    "frame": FRAME,
}


class EpisodeError(Exception):
    pass


class SequenceBudgetError(EpisodeError):
    """The bare query does not fit within max_seq_len."""


class ByteTokenizer:
    """Reversible byte-level tokenizer over UTF-8 plus reserved specials."""

    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, tokens: Sequence[int]) -> str:
        return bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")


_SLOT_RE = re.compile(r"\{(input|target|sep|demo_sep|eos|bos)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """Rendering of one demonstration/query block from slot strings.

    Literal text outside the slots is byte-tokenized; ``{sep}``/``{demo_sep}``/
    ``{eos}`` become special tokens. The input slot must precede the target
    slot so the pre-target prefix is well defined.
    """

    demo_format: str = "{input}{sep}{target}{demo_sep}"
    query_format: str = "{input}{sep}{target}{eos}"
    choice_format: str = "{label}) {text}"
    choice_joiner: str = " "
    choices_prefix: str = " "

    def __post_init__(self):
        for name, fmt in (("demo_format", self.demo_format), ("query_format", self.query_format)):
            slots = _SLOT_RE.findall(fmt)
            if "input" not in slots or "target" not in slots:
                raise EpisodeError(f"{name} must contain {{input}} and {{target}}")
            if slots.index("input") > slots.index("target"):
                raise EpisodeError(f"{name}: {{input}} must precede {{target}}")
        if "{target}{eos}" not in self.query_format:
            raise EpisodeError("query_format must close the response with {target}{eos}")

    def render_choices(self, sample: Sample) -> str:
        assert sample.choices is not None and sample.choice_labels is not None
        body = self.choice_joiner.join(
            self.choice_format.format(label=l, text=t)
            for l, t in zip(sample.choice_labels, sample.choices)
        )
        return self.choices_prefix + body

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplate":
        """Parse a ``key = value`` template file (unknown keys rejected)."""
        fields = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                raise EpisodeError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in (
                "demo_format",
                "query_format",
                "choice_format",
                "choice_joiner",
                "choices_prefix",
            ):
                raise EpisodeError(f"{path}:{lineno}: unknown key {key!r}")
            fields[key] = value.strip()
        return cls(**fields)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(
            "\n".join(
                f"{k} = {getattr(self, k)}"
                for k in (
                    "demo_format",
                    "query_format",
                    "choice_format",
                    "choice_joiner",
                    "choices_prefix",
                )
            )
            + "\n",
            encoding="utf-8",
        )


DEFAULT_TEMPLATE = PromptTemplate()


@dataclass(frozen=True)
class EpisodeConfig:
    """Knobs for episode construction; k=0 degenerates to plain SFT."""

    k: int = 4
    max_seq_len: int = 512
    demo_order: str = "similar-last"  # similar-last | similar-first | random
    seed: int = 0
    supervise_demos: bool = False
    randomize_k: bool = False  # draw k' uniform from {1..k} per episode
    retrieval_dim: int = 64

    def __post_init__(self):
        if self.k < 0:
            raise EpisodeError("k must be >= 0")
        if self.demo_order not in ("similar-last", "similar-first", "random"):
            raise EpisodeError(f"unknown demo_order {self.demo_order!r}")


@dataclass
class Episode:
    """One assembled training instance."""

    demos: list[Sample]
    demo_scores: list[float]
    query: Sample
    tokens: np.ndarray  # (T,) int32
    loss_mask: np.ndarray  # (T,) bool
    frames: np.ndarray | None  # (n_frames, d) float32, aligned with FRAME tokens
    task: str


def _input_span(
    sample: Sample, tokenizer: ByteTokenizer, template: PromptTemplate
) -> tuple[list[int], np.ndarray | None]:
    """Token span for a sample's input, plus its frame rows if any."""
    if sample.features is not None:
        tokens = [FRAME] * sample.features.shape[0]
        frames: np.ndarray | None = np.asarray(sample.features)
    else:
        assert sample.text is not None
        tokens = tokenizer.encode(sample.text)
        frames = None
    if sample.choices is not None:
        tokens = tokens + tokenizer.encode(template.render_choices(sample))
    return tokens, frames


def _render_block(
    fmt: str,
    sample: Sample,
    tokenizer: ByteTokenizer,
    template: PromptTemplate,
) -> tuple[list[int], np.ndarray | None, int, int]:
    """Tokens for one block plus (target_start, target_end) within the block."""
    tokens: list[int] = []
    frames: np.ndarray | None = None
    target_start = target_end = -1
    pos = 0
    for m in _SLOT_RE.finditer(fmt):
        literal = fmt[pos : m.start()]
        if literal:
            tokens.extend(tokenizer.encode(literal))
        slot = m.group(1)
        if slot == "input":
            span, frames = _input_span(sample, tokenizer, template)
            tokens.extend(span)
        elif slot == "target":
            target_start = len(tokens)
            tokens.extend(tokenizer.encode(sample.target))
            target_end = len(tokens)
        else:
            tokens.append(_SPECIAL_NAMES[slot])
            if slot == "eos" and target_end == len(tokens) - 1:
                target_end += 1  # the end-of-response marker is supervised too
        pos = m.end()
    tail = fmt[pos:]
    if tail:
        tokens.extend(tokenizer.encode(tail))
    return tokens, frames, target_start, target_end


def assemble_sequence(
    demos: Sequence[Sample],
    query: Sample,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    tokenizer: ByteTokenizer | None = None,
    max_seq_len: int = 512,
    demo_scores: Sequence[float] | None = None,
    supervise_demos: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, list[int]]:
    """Assemble (tokens, loss_mask, frames, kept_demo_indices) for an episode.

    When the budget is exceeded, lowest-similarity demonstrations are dropped
    first (ties: the earlier one) until the sequence fits; the relative order
    of the surviving demonstrations is preserved. Raises SequenceBudgetError
    only if the bare query does not fit.
    """
    tokenizer = tokenizer or ByteTokenizer()
    demos = list(demos)
    if demo_scores is None:
        demo_scores = [0.0] * len(demos)
    if len(demo_scores) != len(demos):
        raise EpisodeError("demo_scores length mismatch")

    query_block, query_frames, t_start, t_end = _render_block(
        template.query_format, query, tokenizer, template
    )
    demo_blocks = [
        _render_block(template.demo_format, d, tokenizer, template) for d in demos
    ]

    kept = list(range(len(demos)))
    base_len = 1 + len(query_block)  # BOS + query block
    if base_len > max_seq_len:
        raise SequenceBudgetError(
            f"bare query needs {base_len} tokens, budget is {max_seq_len}"
        )
    while kept and base_len + sum(len(demo_blocks[i][0]) for i in kept) > max_seq_len:
        worst = min(kept, key=lambda i: (demo_scores[i], -i))
        kept.remove(worst)

    tokens: list[int] = [BOS]
    mask: list[bool] = [False]
    frame_chunks: list[np.ndarray] = []
    for i in kept:
        block, frames, ds, de = demo_blocks[i]
        offset = len(tokens)
        tokens.extend(block)
        block_mask = [False] * len(block)
        if supervise_demos:
            for p in range(ds, de):
                block_mask[p] = True
        mask.extend(block_mask)
        if frames is not None:
            frame_chunks.append(frames)
        del offset
    offset = len(tokens)
    tokens.extend(query_block)
    qmask = [False] * len(query_block)
    for p in range(t_start, t_end):
        qmask[p] = True
    # the EOS that closes the query block is part of the supervised response
    if query_block[t_end - 1] != EOS and t_end < len(query_block) and query_block[t_end] == EOS:
        qmask[t_end] = True
    mask.extend(qmask)
    if query_frames is not None:
        frame_chunks.append(query_frames)

    all_frames = (
        np.concatenate(frame_chunks, axis=0).astype(np.float32) if frame_chunks else None
    )
    tok_arr = np.asarray(tokens, dtype=np.int32)
    n_frame_tokens = int((tok_arr == FRAME).sum())
    if all_frames is None:
        if n_frame_tokens:
            raise EpisodeError("FRAME tokens present but no frames collected")
    elif all_frames.shape[0] != n_frame_tokens:
        raise EpisodeError("frame rows do not match FRAME token count")
    return tok_arr, np.asarray(mask, dtype=bool), all_frames, kept


def make_eval_prompt(
    demos: Sequence[Sample],
    query: Sample,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    tokenizer: ByteTokenizer | None = None,
    max_seq_len: int = 512,
    demo_scores: Sequence[float] | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Generation prompt: the assembled sequence truncated before the query target.

    Built through the same assembly (including the demo-dropping budget rule),
    so the prompt is token-identical to the training sequence's pre-target
    prefix for the same (demos, query).
    """
    tokens, mask, frames, _ = assemble_sequence(
        demos,
        query,
        template=template,
        tokenizer=tokenizer,
        max_seq_len=max_seq_len,
        demo_scores=demo_scores,
        supervise_demos=False,
    )
    cut = int(np.flatnonzero(mask)[0])
    prompt = tokens[:cut]
    if frames is not None:
        n = int((prompt == FRAME).sum())
        frames = frames[:n]
    return prompt, frames


def _order_demos(
    result_ids: list[str],
    scores: list[float],
    order: str,
    rng: np.random.Generator,
) -> list[int]:
    """Positions into the retrieval result; retrieval returns most-similar first."""
    idx = list(range(len(result_ids)))
    if order == "similar-first":
        return idx
    if order == "similar-last":
        return idx[::-1]
    perm = rng.permutation(len(idx))
    return [idx[int(p)] for p in perm]


class EpisodeSampler:
    """Deterministic episode stream over a mixture.

    Task draws come from a master generator seeded by ``cfg.seed``; each
    task's query order is a per-epoch permutation derived from
    (seed, task, epoch), so the stream is a pure function of
    (mixture, indexes, cfg) and the sampler state is tiny.
    """

    def __init__(
        self,
        mixture: Mixture,
        indexes: dict[str, EmbeddingIndex],
        cfg: EpisodeConfig,
        template: PromptTemplate = DEFAULT_TEMPLATE,
        precomputed: dict[str, dict[str, np.ndarray]] | None = None,
    ):
        missing = [t for t in mixture.tasks if t not in indexes]
        if missing and cfg.k > 0:
            raise EpisodeError(f"no embedding index for tasks {missing}")
        self.mixture = mixture
        self.indexes = indexes
        self.cfg = cfg
        self.template = template
        self.tokenizer = ByteTokenizer()
        self.precomputed = precomputed or {}
        self._rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self._cursor: dict[str, tuple[int, int]] = {t: (0, 0) for t in mixture.tasks}

    def _task_perm(self, task: str, epoch: int) -> np.ndarray:
        seq = np.random.SeedSequence(entropy=self.cfg.seed, spawn_key=(hash_stable(task), epoch))
        gen = np.random.Generator(np.random.PCG64(seq))
        return gen.permutation(len(self.mixture.dataset(task).query_set))

    def _next_query(self, task: str) -> Sample:
        epoch, pos = self._cursor[task]
        ds = self.mixture.dataset(task)
        perm = self._task_perm(task, epoch)
        sample = ds.query_set[int(perm[pos])]
        pos += 1
        if pos >= len(perm):
            epoch, pos = epoch + 1, 0
        self._cursor[task] = (epoch, pos)
        return sample

    def next_episode(self) -> Episode:
        task = self.mixture.sample_task(self._rng)
        ds = self.mixture.dataset(task)
        query = self._next_query(task)
        k = self.cfg.k
        if k > 0 and self.cfg.randomize_k:
            k = int(self._rng.integers(1, self.cfg.k + 1))

        demos: list[Sample] = []
        scores: list[float] = []
        if k > 0:
            index = self.indexes[task]
            pre = self.precomputed.get(task)
            qvec = query_vector(query, index, precomputed=pre)
            exclude = {query.id} if ds.leave_one_out else set()
            result = knn(index, qvec, k, exclude=frozenset(exclude))
            by_id = {s.id: s for s in ds.demo_pool}
            order = _order_demos(result.ids, [s for _, s in result], self.cfg.demo_order, self._rng)
            demos = [by_id[result.ids[i]] for i in order]
            scores = [result.hits[i][1] for i in order]

        tokens, mask, frames, kept = assemble_sequence(
            demos,
            query,
            template=self.template,
            tokenizer=self.tokenizer,
            max_seq_len=self.cfg.max_seq_len,
            demo_scores=scores,
            supervise_demos=self.cfg.supervise_demos,
        )
        return Episode(
            demos=[demos[i] for i in kept],
            demo_scores=[scores[i] for i in kept],
            query=query,
            tokens=tokens,
            loss_mask=mask,
            frames=frames,
            task=task,
        )

    def state_dict(self) -> dict:
        return {
            "rng": self._rng.bit_generator.state,
            "cursor": {t: list(v) for t, v in self._cursor.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self._rng.bit_generator.state = state["rng"]
        self._cursor = {t: (int(e), int(p)) for t, (e, p) in state["cursor"].items()}


def hash_stable(text: str) -> int:
    """Small stable hash for seed derivation (process-independent)."""
    import hashlib

    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=4).digest(), "little")


def sample_episode(
    mixture: Mixture,
    indexes: dict[str, EmbeddingIndex],
    cfg: EpisodeConfig,
    state: dict | None = None,
) -> tuple[Episode, dict]:
    """One-shot episode draw; identical state in means identical episode out."""
    sampler = EpisodeSampler(mixture, indexes, cfg)
    if state is not None:
        sampler.load_state_dict(state)
    ep = sampler.next_episode()
    return ep, sampler.state_dict()
