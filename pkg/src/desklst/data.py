"""Synthetic speech-translation world: toy languages, rendering, corpora on disk."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError, VersionError
from .model import Vocabulary

SCHEMA = "pcst-1"
FRAME_DECIMALS = 4


@dataclass
class Triple:
    id: str
    speech: np.ndarray | None
    transcription: list[int]
    translation: list[int] | None

    @property
    def duration(self) -> int:
        return 0 if self.speech is None else int(self.speech.shape[0])


@dataclass
class LanguageSpec:
    n_source: int
    perm: list[int]
    base: np.ndarray                  # (n_source, d_frames), rounded to FRAME_DECIMALS
    seed: int
    min_len: int = 3
    max_len: int = 12
    noise: float = 0.1
    durations: tuple[int, ...] = (2, 3, 4)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_source)

    @property
    def d_frames(self) -> int:
        return int(self.base.shape[1])

    def to_dict(self) -> dict:
        return {"n_source": self.n_source, "perm": list(self.perm), "base": self.base.tolist(),
                "seed": self.seed, "min_len": self.min_len, "max_len": self.max_len,
                "noise": self.noise, "durations": list(self.durations)}

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageSpec":
        return cls(n_source=d["n_source"], perm=list(d["perm"]), base=np.array(d["base"], dtype=np.float64),
                   seed=d["seed"], min_len=d["min_len"], max_len=d["max_len"], noise=d["noise"],
                   durations=tuple(d["durations"]))


def _rng(*keys) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(k) for k in keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def build_language(seed: int, n_source: int = 18, d_frames: int = 16, noise: float = 0.1) -> LanguageSpec:
    if n_source < 4:
        raise ConfigError(f"need at least 4 source tokens, got {n_source}")
    rng = _rng("language", seed)
    perm = [int(i) for i in rng.permutation(n_source)]
    base = np.round(rng.normal(0.0, 1.0, (n_source, d_frames)), FRAME_DECIMALS)
    return LanguageSpec(n_source=n_source, perm=perm, base=base, seed=seed, noise=noise)


def translate_text(x: Sequence[int], spec: LanguageSpec) -> list[int]:
    """Map every source token through the lexicon, then swap adjacent pairs."""
    v = spec.vocab
    out = []
    for tok in x:
        if not v.is_source(tok):
            raise IndexError(f"token {tok} is not a source token")
        out.append(v.tgt(spec.perm[v.source_index(tok)]))
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def render_speech(x: Sequence[int], sentence_id: str, spec: LanguageSpec, seed: int,
                  noise: float | None = None) -> np.ndarray:
    """Noisy per-token frame runs; a pure function of its arguments."""
    if len(x) == 0:
        raise DataError("cannot render an empty sentence")
    v = spec.vocab
    sigma = spec.noise if noise is None else noise
    rng = _rng("render", seed, sentence_id)
    durs = rng.choice(np.asarray(spec.durations), size=len(x))
    rows = np.repeat(np.array([v.source_index(t) for t in x]), durs)
    frames = spec.base[rows] + sigma * rng.normal(0.0, 1.0, (rows.size, spec.d_frames))
    return np.round(frames, FRAME_DECIMALS)


def sample_sentences(spec: LanguageSpec, count: int, rng: np.random.Generator,
                     exclude: set[tuple[int, ...]]) -> list[list[int]]:
    v = spec.vocab
    capacity = sum(spec.n_source ** n for n in range(spec.min_len, spec.max_len + 1))
    if count + len(exclude) > capacity:
        raise ConfigError(f"cannot draw {count} new sentences: only {capacity - len(exclude)} "
                          "unused sentences remain, so splits would overlap")
    out = []
    while len(out) < count:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = tuple(v.src(int(i)) for i in rng.integers(0, spec.n_source, n))
        if sent in exclude:
            continue
        exclude.add(sent)
        out.append(list(sent))
    return out


def gen_corpus(spec: LanguageSpec, sizes: dict[str, int], seed: int, kind: str,
               exclude: set[tuple[int, ...]] | None = None) -> dict[str, list[Triple]]:
    """Sample disjoint splits of one corpus kind.

    ``kind`` is ``st`` (speech + transcription + translation), ``asr`` (no
    translation) or ``text`` (parallel text, no speech).  ``exclude`` carries
    sentences already used elsewhere and is updated in place.
    """
    if kind not in ("st", "asr", "text"):
        raise ConfigError(f"unknown corpus kind {kind!r}")
    for split, n in sizes.items():
        if n <= 0:
            raise ConfigError(f"split {split!r} must have a positive size, got {n}")
    exclude = set() if exclude is None else exclude
    rng = _rng("corpus", seed, kind)
    out: dict[str, list[Triple]] = {}
    for split, n in sizes.items():
        triples = []
        for i, sent in enumerate(sample_sentences(spec, n, rng, exclude)):
            sid = f"{kind}-{split}-{i:05d}"
            speech = None if kind == "text" else render_speech(sent, sid, spec, seed)
            tgt = None if kind == "asr" else translate_text(sent, spec)
            triples.append(Triple(sid, speech, sent, tgt))
        out[split] = triples
    return out


# -- persistence ---------------------------------------------------------------

def _encode(t: Triple) -> str:
    frames = None
    if t.speech is not None:
        frames = {"t": int(t.speech.shape[0]), "d": int(t.speech.shape[1]),
                  "data": t.speech.reshape(-1).tolist()}
    return json.dumps({"schema": SCHEMA, "id": t.id, "src": list(t.transcription),
                       "tgt": None if t.translation is None else list(t.translation),
                       "frames": frames}, separators=(",", ":"))


def write_corpus(triples: Iterable[Triple], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(_encode(t))
            fh.write("\n")
    os.replace(tmp, path)


def read_corpus(path) -> list[Triple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            if obj.get("schema") != SCHEMA:
                raise VersionError(f"{path}:{lineno}: unsupported schema {obj.get('schema')!r}")
            try:
                fr = obj["frames"]
                speech = None
                if fr is not None:
                    speech = np.array(fr["data"], dtype=np.float64).reshape(fr["t"], fr["d"])
                out.append(Triple(str(obj["id"]), speech, [int(i) for i in obj["src"]],
                                  None if obj["tgt"] is None else [int(i) for i in obj["tgt"]]))
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{path}:{lineno}: bad record ({e})") from None
    return out


def bucket_by_duration(corpus: Sequence[Triple], n: int = 5) -> list[list[Triple]]:
    """Quantile buckets by frame count; sizes differ by at most one.

    Ranks are by (duration, id); inside a bucket the corpus order is kept.
    """
    if not corpus:
        raise DataError("cannot bucket an empty corpus")
    if n < 1 or n > len(corpus):
        raise ConfigError(f"cannot split {len(corpus)} items into {n} buckets")
    order = sorted(range(len(corpus)), key=lambda i: (corpus[i].duration, corpus[i].id))
    base, extra = divmod(len(corpus), n)
    bucket_of = np.empty(len(corpus), dtype=np.int64)
    pos = 0
    for b in range(n):
        size = base + (1 if b < extra else 0)
        for i in order[pos:pos + size]:
            bucket_of[i] = b
        pos += size
    buckets: list[list[Triple]] = [[] for _ in range(n)]
    for i, t in enumerate(corpus):
        buckets[bucket_of[i]].append(t)
    return buckets


# -- whole world -----------------------------------------------------------------

@dataclass
class WorldSizes:
    st: dict[str, int] = field(default_factory=lambda: {"train": 8000, "dev": 500, "test": 500})
    asr: dict[str, int] = field(default_factory=lambda: {"train": 16000, "dev": 500})
    text: dict[str, int] = field(default_factory=lambda: {"train": 16000, "dev": 500})


def generate_world(out_dir, spec: LanguageSpec, sizes: WorldSizes, seed: int,
                   preset: str = "custom") -> Path:
    """Write ST, ASR and parallel-text corpora plus ``manifest.json``; returns its path."""
    out_dir = Path(out_dir)
    used: set[tuple[int, ...]] = set()
    files = {}
    for kind in ("st", "asr", "text"):
        splits = gen_corpus(spec, getattr(sizes, kind), seed, kind, used)
        (out_dir / kind).mkdir(parents=True, exist_ok=True)
        for split, triples in splits.items():
            rel = f"{kind}/{split}.jsonl"
            write_corpus(triples, out_dir / rel)
            files[f"{kind}.{split}"] = rel
    manifest = {"schema": SCHEMA, "preset": preset, "seed": seed, "language": spec.to_dict(),
                "sizes": {"st": sizes.st, "asr": sizes.asr, "text": sizes.text}, "files": files}
    path = out_dir / "manifest.json"
    tmp = path.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)
    return path


class World:
    """Lazy access to a generated data directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise DataError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(path.read_text(encoding="utf-8"))
        self.spec = LanguageSpec.from_dict(self.manifest["language"])
        self._cache: dict[str, list[Triple]] = {}

    def corpus(self, key: str) -> list[Triple]:
        if key not in self._cache:
            rel = self.manifest["files"].get(key)
            if rel is None:
                raise DataError(f"corpus {key!r} not in manifest")
            self._cache[key] = read_corpus(self.root / rel)
        return self._cache[key]
