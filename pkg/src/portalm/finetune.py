"""Transfer pipeline: unlabeled domain LM fine-tuning, then supervised
classifier training with discriminative per-layer learning rates, a slanted
triangular schedule, and gradual unfreezing.

Parameter groups are ordered top-to-bottom (index 0 = head/output, last =
embedding): unfreezing opens groups from the top, and the discriminative
rate for group i is base_lr * layer_decay**i.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace

import torch

from .corpus import Corpus, Session, session_text
from .errors import (
    DegenerateInputError,
    TrainingDivergedError,
    ValidationError,
    VocabularyMismatchError,
)
from .lm import (
    LMParams,
    RegMasks,
    _lstm_layer,
    bptt_batches,
    corpus_token_stream,
    init_state,
    lm_forward,
    lm_loss,
    sample_masks,
)
from .metrics import PredictionRecord
from .tokenizer import BOS_ID, PAD_ID, Vocabulary, build_vocab, numericalize, tokenize

PHQ_SCALE = 24.0

TASKS = ("binary", "regression", "joint")


@dataclass(frozen=True)
class FinetuneSchedule:
    """Slanted-triangular schedule over total_steps, with per-layer LR decay
    and a per-epoch unfreezing rate."""

    lr_max: float
    total_steps: int
    cut_frac: float = 0.1
    ratio: float = 32.0
    layer_decay: float = 1.0 / 2.6
    unfreeze_per_epoch: int = 1
    batch_size: int = 16
    momentum: float = 0.9
    grad_clip: float = 0.25
    gradual_unfreeze: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr_max < 0:
            raise ValidationError(f"lr_max {self.lr_max} must be >= 0")
        if self.total_steps < 0:
            raise ValidationError("total_steps must be >= 0")
        if not 0.0 < self.cut_frac < 1.0:
            raise ValidationError(f"cut_frac {self.cut_frac} not in (0, 1)")
        if self.ratio <= 1.0:
            raise ValidationError(f"ratio {self.ratio} must exceed 1")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ValidationError(f"layer_decay {self.layer_decay} not in (0, 1]")
        if self.unfreeze_per_epoch < 1:
            raise ValidationError("unfreeze_per_epoch must be >= 1")
        if self.total_steps > 0 and math.floor(self.total_steps * self.cut_frac) < 1:
            raise ValidationError(
                f"schedule too short: floor({self.total_steps} * {self.cut_frac}) < 1"
            )


def stlr(t: int, sched: FinetuneSchedule) -> float:
    """Slanted triangular learning rate at integer step t in [0, total_steps)."""
    if not 0 <= t < sched.total_steps:
        raise ValidationError(f"step {t} outside [0, {sched.total_steps})")
    cut = math.floor(sched.total_steps * sched.cut_frac)
    if t < cut:
        p = t / cut
    else:
        p = 1.0 - (t - cut) / (cut * (1.0 / sched.cut_frac - 1.0))
    return sched.lr_max * (1.0 + p * (sched.ratio - 1.0)) / sched.ratio


def discriminative_lrs(base_lr: float, n_layers: int, layer_decay: float) -> list[float]:
    """Per-layer rates, bottom-to-top; the topmost layer gets base_lr."""
    if n_layers < 1:
        raise ValidationError("n_layers must be >= 1")
    return [base_lr * layer_decay ** (n_layers - 1 - i) for i in range(n_layers)]


def unfreeze_plan(epoch: int, n_groups: int, per_epoch: int = 1) -> frozenset[int]:
    """Indices of trainable groups at the given epoch (0 = top group)."""
    if n_groups < 1:
        raise ValidationError("n_groups must be >= 1")
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    return frozenset(range(min((epoch + 1) * per_epoch, n_groups)))


# ---------------------------------------------------------------------------
# Optimizer shared by both fine-tuning stages

class _MomentumSGD:
    def __init__(self, groups: list[list[torch.Tensor]], momentum: float):
        self.groups = groups
        self.momentum = momentum
        self.velocity: dict[int, torch.Tensor] = {}

    def step(self, group_lrs: list[float], trainable: frozenset[int]) -> None:
        with torch.no_grad():
            for gi, group in enumerate(self.groups):
                if gi not in trainable:
                    continue
                for p in group:
                    if p.grad is None:
                        continue
                    if self.momentum > 0:
                        v = self.velocity.get(id(p))
                        if v is None:
                            v = torch.zeros_like(p)
                            self.velocity[id(p)] = v
                        v.mul_(self.momentum).add_(p.grad)
                        p.add_(v, alpha=-group_lrs[gi])
                    else:
                        p.add_(p.grad, alpha=-group_lrs[gi])
                    p.grad = None


def _clip_trainable(groups, trainable, max_norm: float) -> None:
    live = [p for gi in trainable for p in groups[gi] if p.grad is not None]
    if live:
        torch.nn.utils.clip_grad_norm_(live, max_norm)


def _set_trainable(groups: list[list[torch.Tensor]], trainable: frozenset[int]) -> None:
    for gi, group in enumerate(groups):
        for p in group:
            p.requires_grad_(gi in trainable)


def _group_lrs(base_lr: float, n_groups: int, layer_decay: float) -> list[float]:
    # top-to-bottom ordering: reverse of the bottom-to-top helper
    return discriminative_lrs(base_lr, n_groups, layer_decay)[::-1]


def lm_parameter_groups(params: LMParams) -> list[list[torch.Tensor]]:
    """Top-to-bottom LM groups: [output, LSTM top..bottom, embedding]."""
    output = [params.out_bias] + ([params.out_weight] if params.out_weight is not None else [])
    lstm = [[l.w_ih, l.w_hh, l.bias] for l in reversed(params.layers)]
    return [output] + lstm + [[params.embedding]]


# ---------------------------------------------------------------------------
# Stage 1: unlabeled domain fine-tuning of the LM

def extend_vocabulary(params: LMParams, target_corpus: Corpus) -> LMParams:
    """Grow the embedding (and output) rows to cover target-domain tokens.

    New rows start at the mean of the existing embedding. Returns new params;
    the input is untouched.
    """
    if params.vocab is None:
        raise VocabularyMismatchError("pretrained params carry no vocabulary")
    old = params.vocab
    target_vocab = build_vocab(target_corpus, max_size=old.max_size, min_freq=old.min_freq)
    new_tokens = [t for t in target_vocab.id_to_token if t not in old.token_to_id]
    out = params.clone()
    if not new_tokens:
        return out
    id_to_token = list(old.id_to_token) + new_tokens
    vocab = Vocabulary(
        token_to_id={t: i for i, t in enumerate(id_to_token)},
        id_to_token=id_to_token,
        max_size=max(old.max_size, len(id_to_token)),
        min_freq=old.min_freq,
    )
    n_new = len(new_tokens)
    mean_row = out.embedding.mean(dim=0, keepdim=True)
    out.embedding = torch.cat([out.embedding, mean_row.repeat(n_new, 1)], dim=0)
    if out.out_weight is not None:
        mean_out = out.out_weight.mean(dim=0, keepdim=True)
        out.out_weight = torch.cat([out.out_weight, mean_out.repeat(n_new, 1)], dim=0)
    out.out_bias = torch.cat([out.out_bias, torch.zeros(n_new, dtype=out.out_bias.dtype)])
    out.config = replace(out.config, vocab_size=vocab.size)
    out.vocab = vocab
    return out


def finetune_lm(
    pretrained: LMParams,
    target_corpus: Corpus,
    sched: FinetuneSchedule,
    extend_vocab: bool = False,
) -> LMParams:
    """Fine-tune the LM on target-domain text without reading any labels.

    Runs exactly sched.total_steps optimizer steps (STLR + discriminative
    LRs), cycling through the target stream; total_steps == 0 is a no-op
    copy. Target tokens outside the vocabulary map to <unk> unless
    extend_vocab grows the embedding.
    """
    torch.set_num_threads(1)
    if pretrained.vocab is None:
        raise VocabularyMismatchError(
            "pretrained params carry no vocabulary; reconcile before fine-tuning"
        )
    params = extend_vocabulary(pretrained, target_corpus) if extend_vocab else pretrained.clone()
    if sched.total_steps == 0:
        return params
    config = params.config
    stream = torch.as_tensor(
        corpus_token_stream(target_corpus, params.vocab), dtype=torch.long
    )
    if stream.numel() // config.batch_size < 2:
        raise ValidationError("target stream too short for LM fine-tuning")
    generator = torch.Generator().manual_seed(sched.seed)
    groups = lm_parameter_groups(params)
    opt = _MomentumSGD(groups, sched.momentum)
    t = 0
    epoch = 0
    while t < sched.total_steps:
        trainable = (
            unfreeze_plan(epoch, len(groups), sched.unfreeze_per_epoch)
            if sched.gradual_unfreeze
            else frozenset(range(len(groups)))
        )
        _set_trainable(groups, trainable)
        state = init_state(params, config.batch_size)
        for inp, tgt in bptt_batches(stream, config.batch_size, config.bptt_len):
            masks = sample_masks(config, generator, batch_size=config.batch_size)
            logits, state = lm_forward(inp, state, params, masks=masks, mode="train")
            loss = lm_loss(logits, tgt)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite LM fine-tuning loss at step {t}: {float(loss)}"
                )
            loss.backward()
            _clip_trainable(groups, trainable, sched.grad_clip)
            opt.step(_group_lrs(stlr(t, sched), len(groups), sched.layer_decay), trainable)
            t += 1
            if t >= sched.total_steps:
                break
        epoch += 1
    _set_trainable(groups, frozenset())
    return params


# ---------------------------------------------------------------------------
# Stage 2: supervised classifier on top of the (fine-tuned) encoder

@dataclass(frozen=True)
class ClassifierHead:
    """Head layout: concat(last, max-pool, mean-pool) over time -> one dense
    ReLU layer -> 2-class logits and a scalar PHQ regression output."""

    hidden_size: int = 50
    max_len: int = 400

    def __post_init__(self) -> None:
        if self.hidden_size < 1 or self.max_len < 2:
            raise ValidationError("hidden_size must be >= 1 and max_len >= 2")


@dataclass
class HeadParams:
    dense_w: torch.Tensor  # (hidden, 3H)
    dense_b: torch.Tensor
    cls_w: torch.Tensor  # (2, hidden)
    cls_b: torch.Tensor
    reg_w: torch.Tensor  # (1, hidden)
    reg_b: torch.Tensor

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "dense_w": self.dense_w, "dense_b": self.dense_b,
            "cls_w": self.cls_w, "cls_b": self.cls_b,
            "reg_w": self.reg_w, "reg_b": self.reg_b,
        }

    def all_tensors(self) -> list[torch.Tensor]:
        return list(self.named_tensors().values())

    def clone(self) -> "HeadParams":
        return HeadParams(**{k: v.detach().clone() for k, v in self.named_tensors().items()})


def init_head(
    head: ClassifierHead,
    in_dim: int,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> HeadParams:
    def uniform(shape, scale):
        return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * scale

    hs = head.hidden_size
    return HeadParams(
        dense_w=uniform((hs, in_dim), 1.0 / math.sqrt(in_dim)),
        dense_b=torch.zeros(hs, dtype=dtype),
        cls_w=uniform((2, hs), 1.0 / math.sqrt(hs)),
        cls_b=torch.zeros(2, dtype=dtype),
        reg_w=uniform((1, hs), 1.0 / math.sqrt(hs)),
        reg_b=torch.zeros(1, dtype=dtype),
    )


def encode_batch(
    params: LMParams,
    ids: torch.Tensor,  # (B, T) long, padded with PAD_ID
    lengths: torch.Tensor,  # (B,) long, >= 1
    masks: RegMasks | None = None,
    mode: str = "eval",
) -> torch.Tensor:
    """Pooled encoder features: concat(last hidden, max over time, mean over
    time), each restricted to non-pad positions. Shape (B, 3 * H_last)."""
    train = mode == "train"
    if train and masks is None:
        raise ValidationError("train mode requires masks")
    state = init_state(params, ids.shape[0])
    emb_table = params.embedding * masks.embedding_rows if train else params.embedding
    x = emb_table[ids]
    if train:
        x = x * masks.input
    for li, layer in enumerate(params.layers):
        w_hh_eff = layer.w_hh * masks.dropconnect[li] if train else layer.w_hh
        out, _, _ = _lstm_layer(x, state.hidden[li], state.cell[li], layer, w_hh_eff)
        if train:
            out = out * masks.hidden[li]
        x = out
    B, T, H = x.shape
    valid = torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)  # (B, T)
    last = x[torch.arange(B), lengths - 1]
    neg_inf = torch.finfo(x.dtype).min
    maxed = x.masked_fill(~valid.unsqueeze(-1), neg_inf).max(dim=1).values
    meaned = (x * valid.unsqueeze(-1)).sum(dim=1) / lengths.unsqueeze(1).to(x.dtype)
    return torch.cat([last, maxed, meaned], dim=1)


def head_forward(head: HeadParams, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(2-class logits, raw regression output) for pooled features."""
    h = torch.relu(pooled @ head.dense_w.T + head.dense_b)
    logits = h @ head.cls_w.T + head.cls_b
    reg = (h @ head.reg_w.T + head.reg_b).squeeze(-1)
    return logits, reg


def score_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """softmax probability of the dep+ class; strictly increasing in the
    dep+ logit."""
    return torch.softmax(logits, dim=-1)[..., 1]


def joint_loss(
    logits: torch.Tensor,
    reg: torch.Tensor,
    labels: torch.Tensor,
    phq: torch.Tensor,
    task: str,
) -> torch.Tensor:
    ce = torch.nn.functional.cross_entropy(logits, labels)
    mse = torch.mean((reg - phq) ** 2)
    if task == "binary":
        return ce
    if task == "regression":
        return mse
    if task == "joint":
        return ce + mse / (PHQ_SCALE**2)
    raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass
class Classifier:
    encoder: LMParams
    head: HeadParams
    head_config: ClassifierHead
    task: str = "joint"
    text_mode: str = "concatenate_responses"

    @property
    def vocab(self) -> Vocabulary:
        if self.encoder.vocab is None:
            raise VocabularyMismatchError("classifier encoder carries no vocabulary")
        return self.encoder.vocab

    def parameter_groups(self) -> list[list[torch.Tensor]]:
        """Top-to-bottom: [head, LSTM top..bottom, embedding]."""
        lstm = [[l.w_ih, l.w_hh, l.bias] for l in reversed(self.encoder.layers)]
        return [self.head.all_tensors()] + lstm + [[self.encoder.embedding]]


def _session_units(
    session: Session, vocab: Vocabulary, mode: str, max_len: int
) -> list[list[int]]:
    units = session_text(session, mode)
    out = []
    for unit in units:
        ids = [BOS_ID] + numericalize(tokenize(unit), vocab)
        out.append(ids[:max_len])
    return out


def _pad_batch(seqs: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    width = int(lengths.max())
    ids = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return ids, lengths


def train_classifier(
    lm: LMParams,
    head: ClassifierHead,
    labeled: Corpus,
    sched: FinetuneSchedule,
    task: str = "joint",
    text_mode: str = "concatenate_responses",
) -> Classifier:
    """Supervised fine-tuning with gradual unfreezing, STLR, and
    discriminative per-group learning rates. Deterministic given sched.seed.
    """
    torch.set_num_threads(1)
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    if lm.vocab is None:
        raise VocabularyMismatchError("encoder params carry no vocabulary")
    encoder = lm.clone()
    generator = torch.Generator().manual_seed(sched.seed)
    clf = Classifier(
        encoder=encoder,
        head=init_head(head, 3 * encoder.config.layer_dims()[-1][1], generator),
        head_config=head,
        task=task,
        text_mode=text_mode,
    )
    examples: list[tuple[list[int], int, int]] = []  # (ids, label, phq)
    for session in labeled.sessions():
        try:
            units = _session_units(session, clf.vocab, text_mode, head.max_len)
        except DegenerateInputError:
            continue
        for ids in units:
            examples.append(
                (ids, int(session.depression_class), session.phq8_score)
            )
    if not examples:
        raise ValidationError("no usable training sessions")
    if task in ("binary", "joint") and len({lab for _, lab, _ in examples}) < 2:
        raise ValidationError("binary training requires both classes in the training set")
    groups = clf.parameter_groups()
    opt = _MomentumSGD(groups, sched.momentum)
    order_rng = random.Random(sched.seed)
    t = 0
    epoch = 0
    while t < sched.total_steps:
        trainable = (
            unfreeze_plan(epoch, len(groups), sched.unfreeze_per_epoch)
            if sched.gradual_unfreeze
            else frozenset(range(len(groups)))
        )
        _set_trainable(groups, trainable)
        order = list(range(len(examples)))
        order_rng.shuffle(order)
        for start in range(0, len(order), sched.batch_size):
            batch = [examples[i] for i in order[start : start + sched.batch_size]]
            ids, lengths = _pad_batch([b[0] for b in batch])
            labels = torch.tensor([b[1] for b in batch], dtype=torch.long)
            phq = torch.tensor([b[2] for b in batch], dtype=encoder.dtype)
            masks = sample_masks(encoder.config, generator, batch_size=len(batch))
            pooled = encode_batch(encoder, ids, lengths, masks=masks, mode="train")
            logits, reg = head_forward(clf.head, pooled)
            loss = joint_loss(logits, reg, labels, phq, task)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite classifier loss at step {t}: {float(loss)}"
                )
            loss.backward()
            _clip_trainable(groups, trainable, sched.grad_clip)
            opt.step(_group_lrs(stlr(t, sched), len(groups), sched.layer_decay), trainable)
            t += 1
            if t >= sched.total_steps:
                break
        epoch += 1
    _set_trainable(groups, frozenset())
    return clf


def predict_session(
    clf: Classifier, session: Session, mode: str | None = None
) -> PredictionRecord:
    """Score one session. per_response mode averages response-level scores;
    concatenate_responses scores the joined text once."""
    mode = mode or clf.text_mode
    units = _session_units(session, clf.vocab, mode, clf.head_config.max_len)
    ids, lengths = _pad_batch(units)
    with torch.no_grad():
        pooled = encode_batch(clf.encoder, ids, lengths, mode="eval")
        logits, reg = head_forward(clf.head, pooled)
        scores = score_from_logits(logits)
        score = float(scores.mean())
        phq_estimate: float | None = None
        if clf.task in ("regression", "joint"):
            phq_estimate = float(reg.clamp(0.0, PHQ_SCALE).mean())
    return PredictionRecord(
        session_id=session.session_id,
        subject_id=session.subject_id,
        score=score,
        true_phq=session.phq8_score,
        true_class=session.depression_class,
        phq_estimate=phq_estimate,
    )


def predict_corpus(
    clf: Classifier, corpus: Corpus, mode: str | None = None
) -> list[PredictionRecord]:
    """Predictions for every usable session, enriched with the subject's
    demographics and longitudinal consistency label."""
    from .corpus import label_subject_consistency

    records = []
    for subj in corpus.subjects:
        consistency = label_subject_consistency(subj)
        for session in subj.sessions:
            try:
                rec = predict_session(clf, session, mode)
            except DegenerateInputError:
                continue
            records.append(
                replace(rec, demographics=subj.demographics, consistency=consistency)
            )
    return records
