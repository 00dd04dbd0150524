"""Tiny decoder-only transformer with token/embedding mixed inputs.

The model is a stand-in for a large pretrained language model: a couple
of pre-norm attention blocks over a small word vocabulary plus special
control tokens. Sequences are built from text tokens and injected
continuous embeddings (visual tokens, region queries); injected slots
carry id -1 and are never supervised.

Low-rank adapters attach to the q/k/v/o attention projections. An
adapter contributes scale * x @ A^T @ B^T on top of the frozen base
projection; merging folds the same product into the base weight, so
merged and adapter-carrying forward passes agree.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import (AssemblyError, ConfigError, DimensionError, ParseError,
                     TruncationError)

SPECIAL_TOKENS = ("<Image>", "<Region>", "[SEG]", "<p>", "</p>", "<bos>", "<eos>", "<pad>")


class Vocab:
    """Word-level vocabulary: text tokens first, special tokens after."""

    def __init__(self, text_words: list):
        lowered = [w.lower() for w in text_words]
        if len(set(lowered)) != len(lowered):
            raise ConfigError("duplicate words in vocabulary")
        for w in lowered:
            if w in {s.lower() for s in SPECIAL_TOKENS}:
                raise ConfigError(f"{w!r} collides with a special token")
        self.words = list(text_words) + list(SPECIAL_TOKENS)
        self._index = {w.lower(): i for i, w in enumerate(self.words)}
        self.n_text = len(text_words)

    def __len__(self):
        return len(self.words)

    def _special(self, name):
        return self._index[name.lower()]

    @property
    def image_id(self):
        return self._special("<Image>")

    @property
    def region_id(self):
        return self._special("<Region>")

    @property
    def seg_id(self):
        return self._special("[SEG]")

    @property
    def p_open_id(self):
        return self._special("<p>")

    @property
    def p_close_id(self):
        return self._special("</p>")

    @property
    def bos_id(self):
        return self._special("<bos>")

    @property
    def eos_id(self):
        return self._special("<eos>")

    @property
    def pad_id(self):
        return self._special("<pad>")

    def encode(self, text: str) -> list:
        """Whitespace tokenization with trailing punctuation split off."""
        ids = []
        for raw in text.split():
            word = raw.lower()
            while word:
                if word in self._index:
                    ids.append(self._index[word])
                    break
                if word[-1] in ".?!," and word[:-1]:
                    core, tail = word[:-1], word[-1]
                    if core in self._index and tail in self._index:
                        ids.append(self._index[core])
                        ids.append(self._index[tail])
                        break
                raise ParseError(f"word {raw!r} not in vocabulary")
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if i < 0 or i >= len(self.words):
                raise ParseError(f"token id {i} out of range")
            out.append(self.words[i])
        return " ".join(out)

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for w in self.words[:self.n_text]:
                fh.write(w + "\n")
            for w in self.words[self.n_text:]:
                fh.write("@" + w + "\n")

    @classmethod
    def from_file(cls, path) -> "Vocab":
        text, specials = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for ln, line in enumerate(fh, start=1):
                word = line.rstrip("\n")
                if not word:
                    raise ParseError("empty vocabulary line", line=ln)
                if word.startswith("@"):
                    specials.append(word[1:])
                else:
                    if specials:
                        raise ParseError("text word after special block", line=ln)
                    text.append(word)
        if tuple(specials) != SPECIAL_TOKENS:
            raise ParseError(f"special tokens {specials} do not match {list(SPECIAL_TOKENS)}")
        return cls(text)


@dataclass
class TokenSequence:
    """Mixed token/embedding sequence ready for the transformer.

    ``ids`` holds -1 at injected-embedding positions. ``supervised``
    lists target positions t scored from the logits at t-1, and
    ``seg_positions`` the positions whose input token is [SEG].
    """

    segments: list
    ids: np.ndarray
    supervised: np.ndarray
    seg_positions: list = field(default_factory=list)

    @property
    def length(self):
        return len(self.ids)


def build_instruction(vocab: Vocab, prompt_text: str, answer_text: str | None,
                      visual: Tensor | None, prompt_embeds: list, max_seq: int) -> TokenSequence:
    """Assemble [bos] prompt [answer eos] with visual/region slots expanded.

    The <Image> token expands to the given visual token matrix (at most
    once); each <Region> token consumes the next prompt embedding, a
    [1, D] or [D] tensor. Sequences longer than ``max_seq`` raise
    TruncationError; silent truncation would corrupt supervision.
    """
    prompt_ids = [vocab.bos_id] + vocab.encode(prompt_text)
    answer_ids = []
    if answer_text is not None:
        answer_ids = vocab.encode(answer_text) + [vocab.eos_id]

    segments = []
    flat_ids = []
    pending = []
    image_used = False
    embeds_left = list(prompt_embeds)

    def flush():
        if pending:
            segments.append(("ids", np.array(pending, dtype=np.int64)))
            pending.clear()

    for tok in prompt_ids:
        if tok == vocab.image_id:
            if image_used:
                raise AssemblyError("more than one <Image> slot in a sample")
            if visual is None:
                raise AssemblyError("<Image> slot present but no visual tokens bound")
            image_used = True
            flush()
            segments.append(("embed", visual))
            flat_ids.extend([-1] * visual.shape[0])
        elif tok == vocab.region_id:
            if not embeds_left:
                raise AssemblyError("<Region> slot with no prompt embedding left to bind")
            emb = embeds_left.pop(0)
            if emb.ndim == 1:
                emb = ag.reshape(emb, (1, emb.shape[0]))
            flush()
            segments.append(("embed", emb))
            flat_ids.extend([-1])
        else:
            pending.append(tok)
            flat_ids.append(tok)
    answer_start = None
    if answer_ids:
        answer_start = len(flat_ids)
        for tok in answer_ids:
            pending.append(tok)
            flat_ids.append(tok)
    flush()
    if embeds_left:
        raise AssemblyError(f"{len(embeds_left)} prompt embeddings left unbound")

    ids = np.array(flat_ids, dtype=np.int64)
    if len(ids) > max_seq:
        raise TruncationError(f"sequence length {len(ids)} exceeds maximum {max_seq}")
    supervised = np.arange(answer_start, len(ids), dtype=np.int64) if answer_start is not None else np.array([], dtype=np.int64)
    seg_positions = [int(t) for t in np.nonzero(ids == vocab.seg_id)[0] if answer_start is not None and t >= answer_start]
    return TokenSequence(segments=segments, ids=ids, supervised=supervised, seg_positions=seg_positions)


@dataclass
class LMConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    dim: int = 64
    ffn_hidden: int = 256
    max_seq: int = 256

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")


@dataclass
class LoraAdapter:
    """Low-rank delta for one projection: scale * x @ A^T @ B^T."""

    a: Tensor  # [rank, d_in]
    b: Tensor  # [d_out, rank], zero-initialized
    scale: float

    def delta(self, x: Tensor) -> Tensor:
        return ag.scale(ag.matmul(ag.matmul(x, ag.transpose(self.a)), ag.transpose(self.b)), self.scale)


def make_adapters(rng: np.random.Generator, layers: int, dim: int,
                  rank: int = 8, alpha: float = 16.0) -> "OrderedDict[str, LoraAdapter]":
    adapters = OrderedDict()
    for i in range(layers):
        for proj in ("q", "k", "v", "o"):
            a = Tensor(rng.normal(0.0, 0.02, size=(rank, dim)).astype(np.float32), requires_grad=True)
            b = Tensor(np.zeros((dim, rank), dtype=np.float32), requires_grad=True)
            adapters[f"lora.layer{i}.{proj}"] = LoraAdapter(a=a, b=b, scale=alpha / rank)
    return adapters


def adapter_params(adapters) -> "OrderedDict[str, Tensor]":
    out = OrderedDict()
    for name, ad in adapters.items():
        out[f"{name}.a"] = ad.a
        out[f"{name}.b"] = ad.b
    return out


class TinyLM:
    def __init__(self, config: LMConfig, rng: np.random.Generator):
        self.config = config
        p = OrderedDict()
        d, v = config.dim, config.vocab_size

        def lin(name, d_in, d_out, std=0.02):
            p[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

        def norm(name):
            p[f"{name}.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

        p["llm.tok_emb"] = Tensor(rng.normal(0.0, 0.5, size=(v, d)).astype(np.float32), requires_grad=True)
        p["llm.pos_emb"] = Tensor(rng.normal(0.0, 0.1, size=(config.max_seq, d)).astype(np.float32),
                                  requires_grad=True)
        for i in range(config.layers):
            norm(f"llm.layer{i}.ln1")
            for proj in ("q", "k", "v", "o"):
                lin(f"llm.layer{i}.attn.{proj}", d, d, std=np.sqrt(1.0 / d))
            norm(f"llm.layer{i}.ln2")
            lin(f"llm.layer{i}.ffn.1", d, config.ffn_hidden, std=np.sqrt(2.0 / d))
            lin(f"llm.layer{i}.ffn.2", config.ffn_hidden, d, std=np.sqrt(1.0 / config.ffn_hidden))
        norm("llm.ln_f")
        lin("llm.out", d, v, std=np.sqrt(1.0 / d))
        self._params = p
        self._causal_cache = {}

    def params(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def set_frozen(self, frozen: bool = True):
        for t in self._params.values():
            t.requires_grad = not frozen

    def _causal_bias(self, n: int) -> np.ndarray:
        if n not in self._causal_cache:
            bias = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
            self._causal_cache[n] = bias
        return self._causal_cache[n]

    def _proj(self, name, x, adapters, key):
        p = self._params
        out = ag.add(ag.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])
        if adapters is not None and key in adapters:
            out = ag.add(out, adapters[key].delta(x))
        return out

    def embed(self, seq: TokenSequence) -> Tensor:
        p = self._params
        chunks = []
        for kind, payload in seq.segments:
            if kind == "ids":
                chunks.append(ag.embedding_lookup(p["llm.tok_emb"], payload))
            else:
                if payload.shape[1] != self.config.dim:
                    raise DimensionError(f"injected embedding width {payload.shape[1]} != model dim {self.config.dim}")
                chunks.append(payload)
        x = chunks[0] if len(chunks) == 1 else ag.concat(chunks, axis=0)
        n = x.shape[0]
        if n > self.config.max_seq:
            raise TruncationError(f"sequence length {n} exceeds maximum {self.config.max_seq}")
        pos = ag.take_rows(p["llm.pos_emb"], np.arange(n, dtype=np.int64))
        return ag.add(x, pos)

    def forward(self, seq: TokenSequence, adapters=None):
        """Returns (logits [n, V], per-layer block outputs [n, D])."""
        cfg = self.config
        x = self.embed(seq)
        n = x.shape[0]
        bias = Tensor(self._causal_bias(n))
        hd = cfg.dim // cfg.heads
        hiddens = []
        for i in range(cfg.layers):
            h = ag.layer_norm(x, self._params[f"llm.layer{i}.ln1.g"], self._params[f"llm.layer{i}.ln1.b"])
            q = self._proj(f"llm.layer{i}.attn.q", h, adapters, f"lora.layer{i}.q")
            k = self._proj(f"llm.layer{i}.attn.k", h, adapters, f"lora.layer{i}.k")
            v = self._proj(f"llm.layer{i}.attn.v", h, adapters, f"lora.layer{i}.v")
            heads = []
            for j in range(cfg.heads):
                sl = slice(j * hd, (j + 1) * hd)
                logits = ag.scale(ag.matmul(q[:, sl], ag.transpose(k[:, sl])), 1.0 / np.sqrt(hd))
                weights = ag.softmax(ag.add(logits, bias), axis=-1)
                heads.append(ag.matmul(weights, v[:, sl]))
            merged = heads[0] if len(heads) == 1 else ag.concat(heads, axis=1)
            x = ag.add(x, self._proj(f"llm.layer{i}.attn.o", merged, adapters, f"lora.layer{i}.o"))
            h2 = ag.layer_norm(x, self._params[f"llm.layer{i}.ln2.g"], self._params[f"llm.layer{i}.ln2.b"])
            f1 = ag.gelu(ag.add(ag.matmul(h2, self._params[f"llm.layer{i}.ffn.1.w"]),
                                self._params[f"llm.layer{i}.ffn.1.b"]))
            x = ag.add(x, ag.add(ag.matmul(f1, self._params[f"llm.layer{i}.ffn.2.w"]),
                                 self._params[f"llm.layer{i}.ffn.2.b"]))
            hiddens.append(x)
        final = ag.layer_norm(x, self._params["llm.ln_f.g"], self._params["llm.ln_f.b"])
        logits = ag.add(ag.matmul(final, self._params["llm.out.w"]), self._params["llm.out.b"])
        return logits, hiddens

    def seg_hidden(self, hiddens, position: int, source: str) -> Tensor:
        """Hidden-state view feeding the text projector for one [SEG] slot."""
        if source == "last":
            return ag.reshape(hiddens[-1][position:position + 1, :], (self.config.dim,))
        rows = [h[position:position + 1, :] for h in hiddens]
        stacked = ag.concat(rows, axis=0)
        if source == "mean":
            return ag.reshape(ag.mean(stacked, axis=0), (self.config.dim,))
        if source == "concat":
            return ag.reshape(stacked, (self.config.dim * len(hiddens),))
        raise ConfigError(f"unknown seg hidden source {source!r}")

    def generate(self, seq: TokenSequence, vocab: Vocab, max_new: int = 48, adapters=None) -> list:
        """Greedy decoding; returns generated ids up to and excluding <eos>."""
        segments = list(seq.segments)
        ids = list(seq.ids)
        out = []
        with ag.no_grad():
            for _ in range(max_new):
                cur = TokenSequence(segments=segments, ids=np.array(ids, dtype=np.int64),
                                    supervised=np.array([], dtype=np.int64))
                if cur.length >= self.config.max_seq:
                    break
                logits, _ = self.forward(cur, adapters=adapters)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == vocab.eos_id:
                    break
                out.append(nxt)
                segments.append(("ids", np.array([nxt], dtype=np.int64)))
                ids.append(nxt)
        return out


def merge_lora(params: "OrderedDict[str, Tensor]", adapters) -> "OrderedDict[str, Tensor]":
    """Fold adapters into base weights: W' = W + scale * (B @ A)^T."""
    merged = OrderedDict()
    for name, t in params.items():
        merged[name] = Tensor(t.data.copy(), requires_grad=False)
    for key, ad in adapters.items():
        # key "lora.layer{i}.{proj}" maps onto "llm.layer{i}.attn.{proj}.w"
        _, layer, proj = key.split(".")
        wname = f"llm.{layer}.attn.{proj}.w"
        if wname not in merged:
            raise ConfigError(f"adapter {key} has no base weight {wname}")
        delta = ad.scale * (ad.b.data @ ad.a.data).T
        merged[wname] = Tensor(merged[wname].data + delta.astype(merged[wname].data.dtype), requires_grad=False)
    return merged
