"""The speech-translation cascade: frontend -> length/modality adapter -> causal LM.

Batched layouts
---------------
frames      (B, T, d_frames) right-padded, with a boolean ``valid`` mask
h           (B, T, d_enc)   frontend output
prompt      (B, T', d_llm)  soft prompt, T' = ceil(ceil(T/2)/2)
backend in  [prompt_b][SEP][tokens_b][PAD...] per row, causal attention
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import layers as Lyr
from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, IntegrityError
from .tensor import Tensor

GROUPS = ("frontend", "adapter", "backend")


@dataclass(frozen=True)
class Vocabulary:
    """Unified id space: specials, then source tokens, then target tokens."""

    n_source: int
    PAD: int = 0
    BOS: int = 1
    EOS: int = 2
    SEP: int = 3
    n_special: int = 4

    @property
    def size(self) -> int:
        return self.n_special + 2 * self.n_source

    def src(self, i: int) -> int:
        return self.n_special + i

    def tgt(self, i: int) -> int:
        return self.n_special + self.n_source + i

    def is_source(self, tok: int) -> bool:
        return self.n_special <= tok < self.n_special + self.n_source

    def is_target(self, tok: int) -> bool:
        return self.n_special + self.n_source <= tok < self.size

    def source_index(self, tok: int) -> int:
        return tok - self.n_special

    def token_str(self, tok: int) -> str:
        specials = {self.PAD: "<pad>", self.BOS: "<s>", self.EOS: "</s>", self.SEP: "<sep>"}
        if tok in specials:
            return specials[tok]
        if self.is_source(tok):
            return f"s{tok - self.n_special}"
        return f"t{tok - self.n_special - self.n_source}"


@dataclass(frozen=True)
class ModelConfig:
    d_frames: int = 16
    d_enc: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    d_llm: int = 128
    dec_layers: int = 4
    dec_heads: int = 4
    n_source: int = 18
    init_std: float = 0.02

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_source)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def prompt_length(n_frames: int) -> int:
    """Length after two (k5, s2, p2) convolutions: ceil(ceil(T/2)/2)."""
    return -(-(-(-n_frames // 2)) // 2)


@dataclass
class ParamStore:
    """Named tensors, each tagged with exactly one group, plus a freeze set."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)

    def add(self, name: str, data: np.ndarray, group: str) -> None:
        if group not in GROUPS:
            raise IntegrityError(f"unknown group {group!r} for {name}")
        self.tensors[name] = T.param(data)
        self.groups[name] = group

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def in_group(self, group: str) -> list[str]:
        return [n for n in self.tensors if self.groups.get(n) == group]

    def sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: t for k, t in self.tensors.items() if k.startswith(prefix)}

    def freeze(self, groups: Iterable[str]) -> None:
        self.frozen = set(groups)
        for name, t in self.tensors.items():
            t.requires_grad = self.groups[name] not in self.frozen

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if self.groups[n] not in self.frozen]

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(groups=dict(self.groups))
        for n, t in self.tensors.items():
            out.tensors[n] = T.param(t.data.astype(dtype))
        out.freeze(self.frozen)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self.names() if names is None else names
        return int(sum(self.tensors[n].data.size for n in names))


def parameter_groups(store: ParamStore) -> dict[str, list[str]]:
    """Partition tensor names by group tag."""
    out: dict[str, list[str]] = {g: [] for g in GROUPS}
    for name in store.tensors:
        g = store.groups.get(name)
        if g not in out:
            raise IntegrityError(f"tensor {name!r} has no valid group tag")
        out[g].append(name)
    return out


def _block_count(store: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}{n}.ln1.g" in store:
        n += 1
    return n


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32,
                groups: Sequence[str] = GROUPS) -> ParamStore:
    """Seeded initialization; each group draws from its own stream."""
    store = ParamStore()
    ss = np.random.SeedSequence([seed, 0x4C5354])
    rngs = dict(zip(GROUPS, (np.random.default_rng(s) for s in ss.spawn(3))))

    def put(name, arr, group):
        store.add(name, np.asarray(arr, dtype=dtype), group)

    if "frontend" in groups:
        r = rngs["frontend"]
        put("frontend.in.w", r.normal(0, 1 / math.sqrt(cfg.d_frames), (cfg.d_frames, cfg.d_enc)), "frontend")
        put("frontend.in.b", np.zeros(cfg.d_enc), "frontend")
        for i in range(cfg.enc_layers):
            for k, v in Lyr.init_block(r, cfg.d_enc, dtype, n_layers=cfg.enc_layers).items():
                put(f"frontend.blocks.{i}.{k}", v, "frontend")
    if "adapter" in groups:
        r = rngs["adapter"]
        cstd = 1 / math.sqrt(5 * cfg.d_enc)
        put("adapter.conv1.w", r.normal(0, cstd, (5, cfg.d_enc, cfg.d_enc)), "adapter")
        put("adapter.conv1.b", np.zeros(cfg.d_enc), "adapter")
        put("adapter.conv2.w", r.normal(0, cstd, (5, cfg.d_enc, cfg.d_enc)), "adapter")
        put("adapter.conv2.b", np.zeros(cfg.d_enc), "adapter")
        put("adapter.proj.w", r.normal(0, 1 / math.sqrt(cfg.d_enc), (cfg.d_enc, cfg.d_llm)), "adapter")
        put("adapter.proj.b", np.zeros(cfg.d_llm), "adapter")
    if "backend" in groups:
        r = rngs["backend"]
        put("backend.embed", r.normal(0, cfg.init_std, (cfg.vocab.size, cfg.d_llm)), "backend")
        for i in range(cfg.dec_layers):
            for k, v in Lyr.init_block(r, cfg.d_llm, dtype, n_layers=cfg.dec_layers).items():
                put(f"backend.blocks.{i}.{k}", v, "backend")
        put("backend.ln_f.g", np.ones(cfg.d_llm), "backend")
        put("backend.ln_f.b", np.zeros(cfg.d_llm), "backend")
    return store


def pad_frames(frames: Sequence[np.ndarray], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a list of (T_i, d) arrays; returns (B, Tmax, d) and a valid mask."""
    if not frames:
        raise DataError("empty batch")
    tmax = max(f.shape[0] for f in frames)
    d = frames[0].shape[1]
    out = np.zeros((len(frames), tmax, d), dtype=dtype)
    valid = np.zeros((len(frames), tmax), dtype=bool)
    for i, f in enumerate(frames):
        out[i, : f.shape[0]] = f
        valid[i, : f.shape[0]] = True
    return out, valid


class LSTModel:
    """Frontend, adapter and backend sharing one :class:`ParamStore`."""

    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        self.vocab = cfg.vocab
        self.store = store

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "LSTModel":
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def dtype(self):
        return self.store.dtype

    # -- frontend -------------------------------------------------------------
    def frontend_encode(self, frames, valid: np.ndarray | None = None,
                        mask_vector: Tensor | None = None, masked: np.ndarray | None = None) -> Tensor:
        """Frames (T, d_frames) or padded (B, T, d_frames) -> (B, T, d_enc).

        ``mask_vector``/``masked`` replace selected frames by a learned vector
        (masked-reconstruction pretraining only).
        """
        cfg, st = self.cfg, self.store
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.dtype))
        if x.data.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[-1] != cfg.d_frames:
            raise DimensionError(f"frame width {x.shape[-1]} != d_frames {cfg.d_frames}")
        B, Tn, _ = x.shape
        if Tn < 1:
            raise DimensionError("frontend_encode: empty frame sequence")
        if valid is None:
            valid = np.ones((B, Tn), dtype=bool)
        if mask_vector is not None:
            m = masked[..., None].astype(self.dtype)
            x = T.add(T.mul(x, 1.0 - m), T.mul(T.reshape(mask_vector, (1, 1, cfg.d_frames)), m))
        h = T.add(T.linear(x, st["frontend.in.w"], st["frontend.in.b"]),
                  Lyr.sinusoidal_positions(Tn, cfg.d_enc, self.dtype))
        mask = None if valid.all() else Lyr.attention_mask(Tn, False, valid, self.dtype)
        for i in range(_block_count(st, "frontend.blocks.")):
            h = Lyr.transformer_block(h, st.sub(f"frontend.blocks.{i}."), cfg.enc_heads, mask)
        return h

    # -- adapter --------------------------------------------------------------
    def adapt(self, h: Tensor, valid: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """(B, T, d_enc) -> soft prompt (B, T', d_llm) and per-row prompt lengths."""
        cfg, st = self.cfg, self.store
        if h.data.ndim == 2:
            h = T.reshape(h, (1,) + h.shape)
        B, Tn, d = h.shape
        if Tn == 0:
            raise DimensionError("adapt: empty representation")
        if d != cfg.d_enc:
            raise DimensionError(f"adapt: width {d} != d_enc {cfg.d_enc}")
        lens = np.full(B, Tn) if valid is None else valid.sum(axis=1)
        spec = Lyr.Conv1dSpec(cfg.d_enc, cfg.d_enc)
        if valid is not None and not valid.all():
            h = T.mul(h, valid[..., None].astype(self.dtype))
        z = Lyr.conv1d(h, st["adapter.conv1.w"], st["adapter.conv1.b"], spec)
        z = T.gelu(z)
        lens1 = -(-lens // 2)
        v1 = np.arange(z.shape[1])[None, :] < lens1[:, None]
        if not v1.all():
            z = T.mul(z, v1[..., None].astype(self.dtype))
        z = Lyr.conv1d(z, st["adapter.conv2.w"], st["adapter.conv2.b"], spec)
        prompt = T.linear(z, st["adapter.proj.w"], st["adapter.proj.b"])
        return prompt, np.array([prompt_length(int(n)) for n in lens])

    # -- backend --------------------------------------------------------------
    def _embed_scale(self) -> float:
        return math.sqrt(self.cfg.d_llm)

    def backend_forward(self, prefix: Tensor | None, prefix_lens, tokens: Sequence[Sequence[int]],
                        sep: bool = True) -> tuple[Tensor, np.ndarray]:
        """Logits over [prefix_b][SEP][tokens_b] per row, right-padded.

        ``prefix`` is a (B, P, d_llm) soft prompt (or None for text-only
        input).  Returns logits (B, Lmax, V) and per-row valid lengths.
        """
        st, V = self.store, self.vocab.size
        B = len(tokens)
        for seq in tokens:
            for t in seq:
                if not 0 <= t < V:
                    raise IndexError(f"token id {t} out of range for vocabulary of {V}")
        embed = st["backend.embed"]
        table_parts = []
        if prefix is not None:
            if prefix.data.ndim == 2:
                prefix = T.reshape(prefix, (1,) + prefix.shape)
            Pmax = prefix.shape[1]
            table_parts.append(T.reshape(prefix, (B * Pmax, prefix.shape[2])))
            plens = np.asarray(prefix_lens, dtype=np.int64)
        else:
            Pmax = 0
            plens = np.zeros(B, dtype=np.int64)
        offset = B * Pmax
        table_parts.append(T.scale(embed, self._embed_scale()))
        table = table_parts[0] if len(table_parts) == 1 else T.concat(table_parts, axis=0)
        extra = 1 if sep else 0
        lens = plens + extra + np.array([len(s) for s in tokens], dtype=np.int64)
        Lmax = int(lens.max())
        idx = np.full((B, Lmax), offset + self.vocab.PAD, dtype=np.int64)
        for b in range(B):
            p = int(plens[b])
            idx[b, :p] = b * Pmax + np.arange(p)
            row = ([self.vocab.SEP] if sep else []) + list(tokens[b])
            idx[b, p:p + len(row)] = offset + np.asarray(row, dtype=np.int64)
        x = T.add(T.gather_rows(table, idx), Lyr.sinusoidal_positions(Lmax, self.cfg.d_llm, self.dtype))
        mask = Lyr.attention_mask(Lmax, True, dtype=self.dtype)
        for i in range(_block_count(st, "backend.blocks.")):
            x = Lyr.transformer_block(x, st.sub(f"backend.blocks.{i}."), self.cfg.dec_heads, mask)
        x = Lyr.layer_norm(x, st["backend.ln_f.g"], st["backend.ln_f.b"])
        logits = T.matmul(x, T.transpose(embed, (1, 0)))
        return logits, lens

    # -- losses ---------------------------------------------------------------
    def encode_speech(self, frames_list: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        frames, valid = pad_frames(frames_list, self.dtype)
        return self.frontend_encode(frames, valid), valid

    def loss_from_representation(self, h: Tensor, valid: np.ndarray,
                                 labels: Sequence[Sequence[int]]) -> Tensor:
        """Cross-entropy on label tokens + EOS given frontend output."""
        for lab in labels:
            if len(lab) == 0:
                raise DataError("empty label sequence")
        prompt, plens = self.adapt(h, valid)
        logits, _ = self.backend_forward(prompt, plens, labels)
        targets, mask = label_targets(plens, labels, logits.shape[1], self.vocab.EOS)
        return Lyr.cross_entropy(logits, targets, mask)

    def lst_loss(self, examples, mode: str) -> Tensor:
        """Mean NLL of transcription (mode='asr') or translation (mode='st')."""
        if not isinstance(examples, (list, tuple)):
            examples = [examples]
        labels = [labels_for(ex, mode) for ex in examples]
        h, valid = self.encode_speech([ex.speech for ex in examples])
        return self.loss_from_representation(h, valid, labels)


def labels_for(example, mode: str) -> list[int]:
    if mode == "asr":
        lab = example.transcription
    elif mode == "st":
        lab = example.translation
    else:
        raise ConfigError(f"unknown mode {mode!r} (expected 'asr' or 'st')")
    if lab is None or len(lab) == 0:
        raise DataError(f"example {example.id!r} has no {mode} labels")
    return list(lab)


def label_targets(plens: np.ndarray, labels: Sequence[Sequence[int]], width: int,
                  eos: int) -> tuple[np.ndarray, np.ndarray]:
    """Targets/mask so that SEP and label positions predict labels then EOS."""
    B = len(labels)
    targets = np.zeros((B, width), dtype=np.int64)
    mask = np.zeros((B, width), dtype=bool)
    for b, lab in enumerate(labels):
        start = int(plens[b])
        seq = list(lab) + [eos]
        targets[b, start:start + len(seq)] = seq
        mask[b, start:start + len(seq)] = True
    return targets, mask


def text_lm_loss(model: LSTModel, sequences: Sequence[Sequence[int]],
                 loss_from: Sequence[int] | None = None) -> Tensor:
    """Causal next-token loss over token-only sequences (backend pretraining).

    Position i predicts token i+1; ``loss_from[b]`` skips targets before that
    index (default 1: every token after the first is predicted).
    """
    inputs = [list(s[:-1]) for s in sequences]
    logits, lens = model.backend_forward(None, None, inputs, sep=False)
    B, Lmax = logits.shape[0], logits.shape[1]
    targets = np.zeros((B, Lmax), dtype=np.int64)
    mask = np.zeros((B, Lmax), dtype=bool)
    for b, s in enumerate(sequences):
        n = len(s) - 1
        targets[b, :n] = s[1:]
        lo = 0 if loss_from is None else max(0, loss_from[b] - 1)
        mask[b, lo:n] = True
    return Lyr.cross_entropy(logits, targets, mask)
