"""Word-level LSTM language model with weight-drop style regularization,
trained by truncated back-propagation through time.

The LSTM cell is written out explicitly (rather than using a fused RNN op)
because the regularizers need direct access to the weight matrices and to
the per-segment masks:

* DropConnect: a per-segment mask on each hidden-to-hidden matrix.
* Variational dropout: one mask per segment for the embedding output and for
  each layer's output sequence, reused at every timestep of the segment.
* Embedding dropout: whole vocabulary rows zeroed for the segment.

All masks use inverted-dropout scaling 1/(1-p), so eval mode runs on raw
weights and is a pure function of (ids, state, params). Hidden state is
detached at segment boundaries (truncated BPTT). Training is single-threaded
and bitwise reproducible given the seed.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import torch

from .corpus import Corpus, session_text
from .errors import DegenerateInputError, TrainingDivergedError, ValidationError
from .tokenizer import BOS_ID, PAD_ID, Vocabulary, build_vocab, numericalize, tokenize


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 2000
    embed_dim: int = 64
    hidden_dim: int = 128
    n_layers: int = 2
    bptt_len: int = 35
    batch_size: int = 16
    dropconnect_p: float = 0.15
    variational_input_p: float = 0.10
    variational_hidden_p: float = 0.10
    embedding_dropout_p: float = 0.05
    tie_weights: bool = True
    lr: float = 5.0
    grad_clip: float = 0.25
    epochs: int = 10
    valid_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("dropconnect_p", "variational_input_p",
                     "variational_hidden_p", "embedding_dropout_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValidationError(f"{name} {p} not in [0, 1)")
        if min(self.vocab_size, self.embed_dim, self.hidden_dim, self.n_layers,
               self.bptt_len, self.batch_size) < 1:
            raise ValidationError("model dimensions must be positive")
        if self.lr < 0 or self.grad_clip <= 0:
            raise ValidationError("lr must be >= 0 and grad_clip > 0")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise ValidationError(f"valid_fraction {self.valid_fraction} not in [0, 1)")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(input_dim, hidden_dim) per layer; the last layer shrinks to
        embed_dim when weights are tied."""
        dims = []
        for layer in range(self.n_layers):
            in_dim = self.embed_dim if layer == 0 else dims[-1][1]
            out_dim = self.hidden_dim
            if self.tie_weights and layer == self.n_layers - 1:
                out_dim = self.embed_dim
            dims.append((in_dim, out_dim))
        return dims

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown LMConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LSTMLayerParams:
    w_ih: torch.Tensor  # (4H, in_dim), gate order i, f, g, o
    w_hh: torch.Tensor  # (4H, H)
    bias: torch.Tensor  # (4H,)


@dataclass
class LMParams:
    """Model weights plus the config/vocabulary they were built against."""

    config: LMConfig
    embedding: torch.Tensor  # (V, E)
    layers: list[LSTMLayerParams]
    out_weight: torch.Tensor | None  # (V, H_last); None when tied to embedding
    out_bias: torch.Tensor  # (V,)
    vocab: Vocabulary | None = None

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.w_ih"] = layer.w_ih
            out[f"layer{i}.w_hh"] = layer.w_hh
            out[f"layer{i}.bias"] = layer.bias
        if self.out_weight is not None:
            out["out_weight"] = self.out_weight
        out["out_bias"] = self.out_bias
        return out

    def all_tensors(self) -> list[torch.Tensor]:
        return list(self.named_tensors().values())

    def clone(self) -> "LMParams":
        return LMParams(
            config=self.config,
            embedding=self.embedding.detach().clone(),
            layers=[
                LSTMLayerParams(
                    w_ih=l.w_ih.detach().clone(),
                    w_hh=l.w_hh.detach().clone(),
                    bias=l.bias.detach().clone(),
                )
                for l in self.layers
            ],
            out_weight=None if self.out_weight is None else self.out_weight.detach().clone(),
            out_bias=self.out_bias.detach().clone(),
            vocab=self.vocab,
        )

    def projection_weight(self) -> torch.Tensor:
        return self.embedding if self.out_weight is None else self.out_weight

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.dtype


@dataclass
class LMState:
    hidden: list[torch.Tensor]  # per layer, (B, H_l)
    cell: list[torch.Tensor]

    def detach(self) -> "LMState":
        return LMState(
            hidden=[h.detach() for h in self.hidden],
            cell=[c.detach() for c in self.cell],
        )


def init_state(params: LMParams, batch_size: int) -> LMState:
    dims = params.config.layer_dims()
    dtype = params.dtype
    return LMState(
        hidden=[torch.zeros(batch_size, h, dtype=dtype) for _, h in dims],
        cell=[torch.zeros(batch_size, h, dtype=dtype) for _, h in dims],
    )


def init_params(
    config: LMConfig,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
    vocab: Vocabulary | None = None,
) -> LMParams:
    """Uniform init; forget-gate bias starts at 1 to ease early training."""
    V, E = config.vocab_size, config.embed_dim

    def uniform(shape, scale):
        return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * scale

    embedding = uniform((V, E), 0.1)
    layers = []
    for in_dim, h_dim in config.layer_dims():
        scale = 1.0 / math.sqrt(h_dim)
        bias = torch.zeros(4 * h_dim, dtype=dtype)
        bias[h_dim : 2 * h_dim] = 1.0
        layers.append(
            LSTMLayerParams(
                w_ih=uniform((4 * h_dim, in_dim), scale),
                w_hh=uniform((4 * h_dim, h_dim), scale),
                bias=bias,
            )
        )
    h_last = config.layer_dims()[-1][1]
    if config.tie_weights:
        if h_last != E:
            raise ValidationError("tie_weights requires final hidden dim == embed_dim")
        out_weight = None
    else:
        out_weight = uniform((V, h_last), 0.1)
    return LMParams(
        config=config,
        embedding=embedding,
        layers=layers,
        out_weight=out_weight,
        out_bias=torch.zeros(V, dtype=dtype),
        vocab=vocab,
    )


@dataclass
class RegMasks:
    """Per-segment masks, values in {0, 1/(1-p)}; no time dimension, so a
    mask is constant across every timestep of the segment by construction."""

    embedding_rows: torch.Tensor  # (V, 1)
    input: torch.Tensor  # (B, 1, E)
    hidden: list[torch.Tensor]  # per layer, (B, 1, H_l)
    dropconnect: list[torch.Tensor]  # per layer, same shape as w_hh


def _bernoulli_mask(shape, p: float, generator: torch.Generator, dtype) -> torch.Tensor:
    if p == 0.0:
        return torch.ones(shape, dtype=dtype)
    keep = (torch.rand(shape, generator=generator, dtype=dtype) >= p).to(dtype)
    return keep / (1.0 - p)


def sample_masks(
    config: LMConfig,
    generator: torch.Generator,
    batch_size: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> RegMasks:
    """Fresh segment masks; deterministic given the generator state."""
    B = batch_size if batch_size is not None else config.batch_size
    dims = config.layer_dims()
    return RegMasks(
        embedding_rows=_bernoulli_mask(
            (config.vocab_size, 1), config.embedding_dropout_p, generator, dtype
        ),
        input=_bernoulli_mask((B, 1, config.embed_dim), config.variational_input_p,
                              generator, dtype),
        hidden=[
            _bernoulli_mask((B, 1, h), config.variational_hidden_p, generator, dtype)
            for _, h in dims
        ],
        dropconnect=[
            _bernoulli_mask((4 * h, h), config.dropconnect_p, generator, dtype)
            for _, h in dims
        ],
    )


def _lstm_layer(
    x: torch.Tensor,  # (B, T, in_dim)
    h: torch.Tensor,
    c: torch.Tensor,
    layer: LSTMLayerParams,
    w_hh_eff: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    B, T, _ = x.shape
    H = h.shape[1]
    # input projections for the whole segment in one matmul
    x_proj = x @ layer.w_ih.T + layer.bias
    outputs = []
    for t in range(T):
        gates = x_proj[:, t, :] + h @ w_hh_eff.T
        i = torch.sigmoid(gates[:, 0 * H : 1 * H])
        f = torch.sigmoid(gates[:, 1 * H : 2 * H])
        g = torch.tanh(gates[:, 2 * H : 3 * H])
        o = torch.sigmoid(gates[:, 3 * H : 4 * H])
        c = f * c + i * g
        h = o * torch.tanh(c)
        outputs.append(h)
    return torch.stack(outputs, dim=1), h, c


def lm_forward(
    ids: torch.Tensor,  # (B, T) long
    state: LMState,
    params: LMParams,
    masks: RegMasks | None = None,
    mode: str = "eval",
    trace: dict | None = None,
) -> tuple[torch.Tensor, LMState]:
    """Run the LM over one segment.

    Train mode applies the given per-segment masks at every timestep; eval
    mode uses raw weights (expected-value behavior of inverted dropout). The
    returned state is detached, ready to carry into the next segment.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown mode {mode!r}")
    if mode == "train" and masks is None:
        raise ValidationError("train mode requires masks")
    V = params.embedding.shape[0]
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= V):
        raise ValidationError(
            f"token id out of range [0, {V}): min {int(ids.min())}, max {int(ids.max())}"
        )
    train = mode == "train"
    emb_table = params.embedding * masks.embedding_rows if train else params.embedding
    x = emb_table[ids]  # (B, T, E)
    if train:
        x = x * masks.input
    if trace is not None:
        trace.setdefault("layer_inputs", []).append(x.detach().clone())
    new_hidden, new_cell = [], []
    for li, layer in enumerate(params.layers):
        w_hh_eff = layer.w_hh * masks.dropconnect[li] if train else layer.w_hh
        out, h, c = _lstm_layer(x, state.hidden[li], state.cell[li], layer, w_hh_eff)
        if train:
            out = out * masks.hidden[li]
        if trace is not None and li < len(params.layers) - 1:
            trace["layer_inputs"].append(out.detach().clone())
        new_hidden.append(h)
        new_cell.append(c)
        x = out
    logits = x @ params.projection_weight().T + params.out_bias
    return logits, LMState(hidden=new_hidden, cell=new_cell).detach()


def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over non-pad target positions."""
    if logits.shape[:2] != targets.shape:
        raise ValidationError(
            f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}"
        )
    keep = targets != PAD_ID
    if not bool(keep.any()):
        raise ValidationError("all target positions are padding")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll[keep].mean()


def bptt_batches(
    id_stream: Sequence[int] | torch.Tensor,
    batch_size: int,
    bptt_len: int,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Reshape a long ID stream into batch_size parallel streams and yield
    consecutive (input, target) segments; targets are inputs shifted by one.
    """
    data = torch.as_tensor(id_stream, dtype=torch.long)
    if data.dim() != 1:
        raise ValidationError("id_stream must be one-dimensional")
    n_cols = data.numel() // batch_size
    if n_cols < 2:
        raise ValidationError(
            f"stream of {data.numel()} ids too short for batch_size {batch_size}"
        )
    data = data[: batch_size * n_cols].view(batch_size, n_cols)
    for start in range(0, n_cols - 1, bptt_len):
        seq_len = min(bptt_len, n_cols - 1 - start)
        yield data[:, start : start + seq_len], data[:, start + 1 : start + 1 + seq_len]


def corpus_token_stream(
    corpus: Corpus, vocab: Vocabulary, mode: str = "concatenate_responses"
) -> list[int]:
    """Concatenate every session's text units into one ID stream, each unit
    prefixed by <bos>. Degenerate sessions (all-empty text) are skipped."""
    stream: list[int] = []
    for session in corpus.sessions():
        try:
            units = session_text(session, mode)
        except DegenerateInputError:
            continue
        for unit in units:
            stream.append(BOS_ID)
            stream.extend(numericalize(tokenize(unit), vocab))
    return stream


def _global_norm_clip(tensors: list[torch.Tensor], max_norm: float) -> None:
    grads = [t.grad for t in tensors if t.grad is not None]
    if grads:
        torch.nn.utils.clip_grad_norm_(
            [t for t in tensors if t.grad is not None], max_norm
        )


def _sgd_step(tensors: list[torch.Tensor], lr: float) -> None:
    with torch.no_grad():
        for t in tensors:
            if t.grad is not None:
                t.add_(t.grad, alpha=-lr)
                t.grad = None


def _split_for_validation(
    corpus: Corpus, valid_fraction: float, seed: int
) -> tuple[Corpus, Corpus | None]:
    n_valid = round(valid_fraction * corpus.n_subjects)
    if n_valid == 0 or n_valid == corpus.n_subjects:
        return corpus, None
    rng = random.Random(seed)
    ids = sorted(s.subject_id for s in corpus.subjects)
    rng.shuffle(ids)
    valid_ids = set(ids[:n_valid])
    train_subjects = tuple(s for s in corpus.subjects if s.subject_id not in valid_ids)
    valid_subjects = tuple(s for s in corpus.subjects if s.subject_id in valid_ids)
    return (
        Corpus(name=f"{corpus.name}-lmtrain", subjects=train_subjects, split_tag="train"),
        Corpus(name=f"{corpus.name}-lmvalid", subjects=valid_subjects, split_tag="test"),
    )


def _stream_perplexity(
    params: LMParams, stream: Sequence[int], batch_size: int, bptt_len: int
) -> float:
    batch_size = max(1, min(batch_size, len(stream) // 2))
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        state = init_state(params, batch_size)
        for inp, tgt in bptt_batches(stream, batch_size, bptt_len):
            logits, state = lm_forward(inp, state, params, mode="eval")
            n = int((tgt != PAD_ID).sum())
            total_nll += float(lm_loss(logits, tgt)) * n
            total_tokens += n
    if total_tokens == 0:
        raise ValidationError("no tokens to evaluate")
    return math.exp(total_nll / total_tokens)


def perplexity(
    params: LMParams,
    corpus: Corpus,
    vocab: Vocabulary | None = None,
    batch_size: int | None = None,
    bptt_len: int | None = None,
) -> float:
    """exp(mean next-token cross-entropy) over the corpus, eval mode."""
    vocab = vocab or params.vocab
    if vocab is None:
        raise ValidationError("perplexity needs a vocabulary")
    stream = corpus_token_stream(corpus, vocab)
    if len(stream) < 4:
        raise ValidationError("corpus too small to evaluate perplexity")
    return _stream_perplexity(
        params,
        stream,
        batch_size or params.config.batch_size,
        bptt_len or params.config.bptt_len,
    )


def train_lm(
    corpus: Corpus,
    config: LMConfig,
    vocab: Vocabulary | None = None,
) -> tuple[LMParams, list[dict]]:
    """Train from scratch with truncated BPTT, plain SGD, and global-norm
    gradient clipping; fresh regularization masks every segment.

    Returns the trained params (vocabulary attached) and a per-epoch trace of
    train/validation perplexity. Bitwise deterministic given config.seed.
    """
    torch.set_num_threads(1)  # keeps reductions bitwise reproducible
    if corpus.n_sessions == 0:
        raise ValidationError("cannot train on an empty corpus")
    generator = torch.Generator().manual_seed(config.seed)
    if vocab is None:
        vocab = build_vocab(corpus, max_size=config.vocab_size)
    config = replace(config, vocab_size=vocab.size)
    train_corpus, valid_corpus = _split_for_validation(
        corpus, config.valid_fraction, config.seed
    )
    train_stream = torch.as_tensor(
        corpus_token_stream(train_corpus, vocab), dtype=torch.long
    )
    if train_stream.numel() // config.batch_size < 2:
        raise ValidationError(
            f"training stream of {train_stream.numel()} tokens too short "
            f"for batch_size {config.batch_size}"
        )
    params = init_params(config, generator, vocab=vocab)
    tensors = params.all_tensors()
    for t in tensors:
        t.requires_grad_(True)
    trace: list[dict] = []
    for epoch in range(config.epochs):
        state = init_state(params, config.batch_size)
        epoch_nll = 0.0
        epoch_tokens = 0
        for step, (inp, tgt) in enumerate(
            bptt_batches(train_stream, config.batch_size, config.bptt_len)
        ):
            masks = sample_masks(config, generator, batch_size=config.batch_size)
            logits, state = lm_forward(inp, state, params, masks=masks, mode="train")
            loss = lm_loss(logits, tgt)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}: {float(loss)}"
                )
            loss.backward()
            _global_norm_clip(tensors, config.grad_clip)
            _sgd_step(tensors, config.lr)
            n = int((tgt != PAD_ID).sum())
            epoch_nll += float(loss.detach()) * n
            epoch_tokens += n
        entry = {
            "epoch": epoch,
            "train_ppl": math.exp(epoch_nll / max(epoch_tokens, 1)),
            "valid_ppl": None,
        }
        if valid_corpus is not None:
            entry["valid_ppl"] = perplexity(params, valid_corpus, vocab)
        trace.append(entry)
    for t in tensors:
        t.requires_grad_(False)
    return params, trace


def write_ppl_trace_csv(trace: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_ppl", "valid_ppl"])
        for entry in trace:
            valid = entry["valid_ppl"]
            writer.writerow(
                [entry["epoch"], repr(entry["train_ppl"]), "" if valid is None else repr(valid)]
            )
