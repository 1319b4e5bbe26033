"""GRU encoder-decoder with dot-product attention and the three step scorers."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</eos>", "<unk>")

RAW, LOGSOFTMAX, SIGMOID = "raw", "logsoftmax", "sigmoid"
SCORER_MODES = (RAW, LOGSOFTMAX, SIGMOID)


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}, got {tokens[:4]}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_freq: int = 1) -> "Vocab":
        counts = Counter(tok for sent in sentences for tok in sent)
        for r in RESERVED:
            counts.pop(r, None)
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(list(RESERVED) + kept)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip_eos: bool = True) -> list[str]:
        out = [self.itos[i] for i in ids]
        if strip_eos and out and out[-1] == RESERVED[EOS]:
            out = out[:-1]
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text().splitlines())


@dataclass
class ModelConfig:
    embed_dim: int = 64
    hidden_dim: int = 64
    enc_layers: int = 1
    dec_layers: int = 1
    bidirectional_encoder: bool = False
    attention: bool = True
    dropout: float = 0.0
    cell: str = "lstm"
    init_scale: float = 0.1

    def __post_init__(self):
        for f in ("embed_dim", "hidden_dim", "enc_layers", "dec_layers"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.cell not in ("lstm", "gru"):
            raise ValueError(f"cell must be 'lstm' or 'gru', got {self.cell!r}")

    @property
    def enc_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional_encoder else 1)


@dataclass
class EncodedSource:
    values: Tensor  # [B, N, D] per-position encoder states
    keys: Tensor | None  # [B, N, H] attention keys
    mask: Tensor  # [B, N] additive mask, -1e9 on padding
    init_hidden: list[Tensor]  # per decoder layer, [B, H]
    init_cells: list[Tensor | None]
    lengths: list[int]

    @property
    def states(self) -> np.ndarray:
        """[N, D] hidden states of the first (usually only) source."""
        return self.values.data[0, : self.lengths[0]]

    def rows(self, idx) -> "EncodedSource":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSource(
            ad.take(self.values, idx),
            None if self.keys is None else ad.take(self.keys, idx),
            ad.take(self.mask, idx),
            [ad.take(h, idx) for h in self.init_hidden],
            [None if c is None else ad.take(c, idx) for c in self.init_cells],
            [self.lengths[i] for i in idx],
        )


@dataclass
class DecoderState:
    hidden: list[Tensor]  # per layer, [k, H]
    cells: list[Tensor | None]  # LSTM memory per layer; None for GRU
    feed: Tensor  # [k, H] previous attentional output

    def rows(self, idx) -> "DecoderState":
        return DecoderState(
            [ad.take(h, idx) for h in self.hidden],
            [None if c is None else ad.take(c, idx) for c in self.cells],
            ad.take(self.feed, idx),
        )

    @staticmethod
    def cat(states: Sequence["DecoderState"]) -> "DecoderState":
        if len(states) == 1:
            return states[0]
        layers = range(len(states[0].hidden))
        return DecoderState(
            [ad.concat([s.hidden[l] for s in states], axis=0) for l in layers],
            [None if states[0].cells[l] is None else ad.concat([s.cells[l] for s in states], axis=0) for l in layers],
            ad.concat([s.feed for s in states], axis=0),
        )


class SigmoidScorer:
    """g = (1 + exp(w * f))^-1 with a trainable scalar w."""

    def __init__(self, w: Tensor):
        self.w = w

    def _neg_wf(self, raw: Tensor) -> Tensor:
        return ad.mul(raw, ad.mul(self.w, Tensor(-1.0)))

    def log_g(self, raw: Tensor) -> Tensor:
        return ad.log_sigmoid(self._neg_wf(raw))

    def g(self, raw: Tensor) -> Tensor:
        return ad.sigmoid(self._neg_wf(raw))


def score_step(raw: Tensor, mode: str, sig: SigmoidScorer | None = None) -> Tensor:
    """Per-word step scores; log domain except in raw mode."""
    if mode == RAW:
        return raw
    if mode == LOGSOFTMAX:
        return ad.log_softmax(raw)
    if mode == SIGMOID:
        if sig is None:
            raise ValueError("sigmoid mode needs a SigmoidScorer")
        return sig.log_g(raw)
    raise ValueError(f"unknown scorer mode {mode!r}")


class Seq2Seq:
    def __init__(self, cfg: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab, seed: int = 0):
        self.cfg = cfg
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.training = False
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._init_params()
        self.sig = SigmoidScorer(self.params["sig.w"])

    # -- parameters

    def _add(self, name: str, *shape: int) -> None:
        s = self.cfg.init_scale
        self.params[name] = Tensor(self._rng.uniform(-s, s, size=shape), requires_grad=True, name=name)

    def _add_cell(self, prefix: str, n_in: int) -> None:
        H = self.cfg.hidden_dim
        if self.cfg.cell == "lstm":
            self._add(f"{prefix}.W", n_in + H, 4 * H)
            self._add(f"{prefix}.b", 4 * H)
        else:
            self._add(f"{prefix}.W_rz", n_in + H, 2 * H)
            self._add(f"{prefix}.b_rz", 2 * H)
            self._add(f"{prefix}.W_n", n_in + H, H)
            self._add(f"{prefix}.b_n", H)

    def _init_params(self) -> None:
        c = self.cfg
        E, H, D = c.embed_dim, c.hidden_dim, c.enc_dim
        self._add("src_emb", len(self.src_vocab), E)
        self._add("tgt_emb", len(self.tgt_vocab), E)
        for l in range(c.enc_layers):
            n_in = E if l == 0 else D
            self._add_cell(f"enc{l}.fwd", n_in)
            if c.bidirectional_encoder:
                self._add_cell(f"enc{l}.bwd", n_in)
        for l in range(c.dec_layers):
            self._add(f"bridge{l}.W", D, H)
            self._add(f"bridge{l}.b", H)
            if c.cell == "lstm":
                self._add(f"bridge{l}.W_c", D, H)
                self._add(f"bridge{l}.b_c", H)
            n_in = (E + H if c.attention else E) if l == 0 else H
            self._add_cell(f"dec{l}", n_in)
        if c.attention:
            self._add("att.W_key", D, H)
            self._add("att.W_comb", D + H, H)
            self._add("att.b_comb", H)
        self._add("out.W", H, len(self.tgt_vocab))
        self._add("out.b", len(self.tgt_vocab))
        self.params["sig.w"] = Tensor(np.array([-1.0]), requires_grad=True, name="sig.w")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            p = self.params[name]
            if p.shape != arr.shape:
                raise ValueError(f"checkpoint mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(np.float64).copy()

    def train(self, on: bool = True) -> "Seq2Seq":
        self.training = on
        return self

    def eval(self) -> "Seq2Seq":
        return self.train(False)

    # -- building blocks

    def _cell(self, prefix: str, x: Tensor, h: Tensor, c: Tensor | None) -> tuple[Tensor, Tensor | None]:
        H = self.cfg.hidden_dim
        p = self.params
        xh = ad.concat([x, h])
        if self.cfg.cell == "lstm":
            gates = ad.add_bias(xh @ p[f"{prefix}.W"], p[f"{prefix}.b"])
            ifo = ad.sigmoid(ad.slice_(gates, 0, 3 * H))
            g = ad.tanh(ad.slice_(gates, 3 * H, 4 * H))
            c_new = ad.slice_(ifo, H, 2 * H) * c + ad.slice_(ifo, 0, H) * g
            return ad.slice_(ifo, 2 * H, 3 * H) * ad.tanh(c_new), c_new
        rz = ad.sigmoid(ad.add_bias(xh @ p[f"{prefix}.W_rz"], p[f"{prefix}.b_rz"]))
        r = ad.slice_(rz, 0, H)
        z = ad.slice_(rz, H, 2 * H)
        n = ad.tanh(ad.add_bias(ad.concat([x, r * h]) @ p[f"{prefix}.W_n"], p[f"{prefix}.b_n"]))
        return n + z * (h - n), None

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.cfg.dropout
        if not self.training or rate == 0.0:
            return x
        keep = (self._rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * Tensor(keep)

    def _run_layer(self, prefix: str, xs: list[Tensor], mask: np.ndarray, reverse: bool):
        B = mask.shape[0]
        H = self.cfg.hidden_dim
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H))) if self.cfg.cell == "lstm" else None
        out: list[Tensor] = [h] * len(xs)
        order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
        for t in order:
            h_new, c_new = self._cell(prefix, xs[t], h, c)
            m = mask[:, t]
            if m.all():
                h, c = h_new, c_new
            else:
                # padded rows keep their previous state
                keep = Tensor(np.repeat(m[:, None].astype(np.float64), H, axis=1))
                h = h + keep * (h_new - h)
                if c is not None:
                    c = c + keep * (c_new - c)
            out[t] = h
        return out, h, c

    # -- public surface

    def encode_batch(self, srcs: Sequence[Sequence[int]]) -> EncodedSource:
        if not srcs or any(len(s) == 0 for s in srcs):
            raise ValueError("source sentences must be nonempty")
        V = len(self.src_vocab)
        for s in srcs:
            if min(s) < 0 or max(s) >= V:
                raise ValueError(f"source token id out of range [0, {V})")
        c = self.cfg
        p = self.params
        B, N = len(srcs), max(len(s) for s in srcs)
        lengths = [len(s) for s in srcs]
        ids = np.full((B, N), PAD, dtype=np.int64)
        mask = np.zeros((B, N), dtype=bool)
        for i, s in enumerate(srcs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = True
        emb = self._dropout(ad.take(p["src_emb"], ids.reshape(-1)))
        emb = ad.reshape(emb, (B, N, c.embed_dim))
        xs = [ad.reshape(ad.slice_(emb, t, t + 1, axis=1), (B, c.embed_dim)) for t in range(N)]
        for l in range(c.enc_layers):
            fwd, h_f, c_f = self._run_layer(f"enc{l}.fwd", xs, mask, reverse=False)
            if c.bidirectional_encoder:
                bwd, h_b, c_b = self._run_layer(f"enc{l}.bwd", xs, mask, reverse=True)
                xs = [ad.concat([f, b]) for f, b in zip(fwd, bwd)]
                final_h = ad.concat([h_f, h_b])
                final_c = None if c_f is None else ad.concat([c_f, c_b])
            else:
                xs = fwd
                final_h, final_c = h_f, c_f
            if l + 1 < c.enc_layers:
                xs = [self._dropout(x) for x in xs]
        values = ad.stack(xs, axis=1)  # [B, N, D]
        init_hidden, init_cells = [], []
        for l in range(c.dec_layers):
            init_hidden.append(ad.tanh(ad.add_bias(final_h @ p[f"bridge{l}.W"], p[f"bridge{l}.b"])))
            # the memory bridge stays linear so counts survive unsquashed
            init_cells.append(None if final_c is None else ad.add_bias(final_c @ p[f"bridge{l}.W_c"], p[f"bridge{l}.b_c"]))
        keys = None
        if c.attention:
            flat = ad.reshape(values, (B * N, c.enc_dim)) @ p["att.W_key"]
            keys = ad.reshape(flat, (B, N, c.hidden_dim))
        mask_bias = Tensor(np.where(mask, 0.0, -1e9))
        return EncodedSource(values, keys, mask_bias, init_hidden, init_cells, lengths)

    def encode(self, src: Sequence[int]) -> EncodedSource:
        return self.encode_batch([src])

    def initial_state(self, enc: EncodedSource) -> DecoderState:
        B = len(enc.lengths)
        return DecoderState(list(enc.init_hidden), list(enc.init_cells), Tensor(np.zeros((B, self.cfg.hidden_dim))))

    def decode_step(self, enc: EncodedSource, state: DecoderState, y_prev) -> tuple[Tensor, DecoderState]:
        """Raw scores [k, |V|] for the next word of each of k rows."""
        y_prev = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
        V = len(self.tgt_vocab)
        if y_prev.min() < 0 or y_prev.max() >= V:
            raise ValueError(f"target token id out of range [0, {V})")
        c = self.cfg
        p = self.params
        x = self._dropout(ad.take(p["tgt_emb"], y_prev))
        if c.attention:
            x = ad.concat([x, state.feed])
        hidden, cells = [], []
        for l in range(c.dec_layers):
            h, mem = self._cell(f"dec{l}", x, state.hidden[l], state.cells[l])
            hidden.append(h)
            cells.append(mem)
            x = self._dropout(h)
        q = hidden[-1]
        if c.attention:
            scores = ad.einsum("knh,kh->kn", enc.keys, q) + enc.mask
            alpha = ad.softmax(scores)
            ctx = ad.einsum("kn,knd->kd", alpha, enc.values)
            feed = ad.tanh(ad.add_bias(ad.concat([ctx, q]) @ p["att.W_comb"], p["att.b_comb"]))
        else:
            feed = q
        raw = ad.add_bias(self._dropout(feed) @ p["out.W"], p["out.b"])
        return raw, DecoderState(hidden, cells, feed)

    def teacher_force(self, srcs: Sequence[Sequence[int]], tgts: Sequence[Sequence[int]]):
        """Raw scores at every gold position.

        Returns the per-step [B, |V|] raw score tensors, the padded [B, T]
        gold id matrix and its 0/1 mask.
        """
        if len(srcs) != len(tgts):
            raise ValueError("source/target batch sizes differ")
        enc = self.encode_batch(srcs)
        state = self.initial_state(enc)
        B, T = len(tgts), max(len(t) for t in tgts)
        gold = np.full((B, T), PAD, dtype=np.int64)
        mask = np.zeros((B, T))
        for i, t in enumerate(tgts):
            gold[i, : len(t)] = t
            mask[i, : len(t)] = 1.0
        prev = np.concatenate([np.full((B, 1), BOS), gold[:, :-1]], axis=1)
        steps = []
        for t in range(T):
            raw, state = self.decode_step(enc, state, prev[:, t])
            steps.append(raw)
        return steps, gold, mask


# ------------------------------------------------------------------ checkpoints


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta")


def save_checkpoint(path, model: Seq2Seq, meta: dict | None = None) -> None:
    """Parameters plus sidecars: ``.meta`` (key = value) and both vocab files."""
    ad.save_params(path, model.params)
    model.src_vocab.save(str(path) + ".src.vocab")
    model.tgt_vocab.save(str(path) + ".tgt.vocab")
    entries = {f"model.{k}": v for k, v in asdict(model.cfg).items()}
    entries.update(meta or {})
    _meta_path(path).write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


def _parse_value(text: str, kind):
    if kind is bool:
        return text.strip().lower() in ("1", "true", "yes", "on")
    return kind(text)


def load_checkpoint(path) -> tuple[Seq2Seq, dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    meta: dict[str, str] = {}
    for line in _meta_path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    cfg_kwargs = {}
    for k, v in meta.items():
        if k.startswith("model."):
            name = k[len("model."):]
            kind = {"int": int, "float": float, "bool": bool, "str": str}[str(kinds[name])]
            cfg_kwargs[name] = _parse_value(v, kind)
    model = Seq2Seq(
        ModelConfig(**cfg_kwargs),
        Vocab.load(str(path) + ".src.vocab"),
        Vocab.load(str(path) + ".tgt.vocab"),
    )
    model.load_state(ad.load_params(path))
    return model, {k: v for k, v in meta.items() if not k.startswith("model.")}
