"""The full dual co-attention classifier.

Three word-level encoders (news, entity descriptions, user comments) share
an architecture but not weights; news sentences additionally pass through a
sentence-level BiGRU. Two co-attention blocks couple the news sequence with
the entity and comment sequences, and a two-layer affine head maps the four
pooled vectors to two logits (label 1 = fake).

Padding discipline: padding positions never advance a recurrence, receive
exactly zero attention weight, and contribute exactly zero columns to the
co-attention inputs, so perturbing padded content cannot change the logits.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .autodiff import (
    Graph,
    NonFiniteError,
    Tensor,
    add,
    concat,
    log,
    matmul,
    mean_all,
    mul,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    tanh,
    transpose,
)
from .data import SampleArrays
from .layers import CoAttentionParams, GruParams, WordAttentionParams
from .metrics import metrics_report


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


MODES = ("N+E", "N+C", "N+C+E")

_CHECKPOINT_MAGIC = "DUALCAN-CKPT v1"


@dataclass
class HyperParams:
    """Model and training dimensions; all sentence/word limits are global,
    so batching is plain concatenation."""

    embedding_dim: int = 16
    hidden_size: int = 8
    max_words: int = 10
    max_news_sentences: int = 4
    max_entity_sentences: int = 8
    max_comment_sentences: int = 8
    max_sentences_per_description: int = 4
    max_sentences_per_comment: int = 2
    batch_size: int = 8
    learning_rate: float = 0.005
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0

    def validate(self) -> None:
        for name in ("embedding_dim", "hidden_size", "max_words", "max_news_sentences",
                     "max_entity_sentences", "max_comment_sentences",
                     "max_sentences_per_description", "max_sentences_per_comment",
                     "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"hyperparameter {name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")

    @staticmethod
    def profile(name: str) -> "HyperParams":
        if name == "gossipcop":
            return HyperParams(embedding_dim=100, hidden_size=100, max_words=120,
                               max_news_sentences=40, max_entity_sentences=100,
                               max_comment_sentences=100, batch_size=16,
                               learning_rate=0.001)
        if name == "coaid":
            return HyperParams(embedding_dim=300, hidden_size=300, max_words=120,
                               max_news_sentences=4, max_entity_sentences=20,
                               max_comment_sentences=20, batch_size=32,
                               learning_rate=0.001)
        if name == "synthetic":
            return HyperParams()
        raise ValueError(f"unknown profile '{name}' (expected gossipcop, coaid or synthetic)")


@dataclass
class EncoderParams:
    """Word-level BiGRU plus additive attention for one input source."""

    fwd: GruParams
    bwd: GruParams
    attention: WordAttentionParams

    @staticmethod
    def create(input_size: int, hidden_size: int, rng) -> "EncoderParams":
        return EncoderParams(
            fwd=GruParams.create(input_size, hidden_size, rng),
            bwd=GruParams.create(input_size, hidden_size, rng),
            attention=WordAttentionParams.create(hidden_size, rng),
        )

    def named(self, prefix: str) -> dict:
        out = {}
        for key, t in self.fwd.named().items():
            out[f"{prefix}.fwd.{key}"] = t
        for key, t in self.bwd.named().items():
            out[f"{prefix}.bwd.{key}"] = t
        for key, t in self.attention.named().items():
            out[f"{prefix}.attn.{key}"] = t
        return out


class ModelParams:
    """Every learnable tensor of the network, enumerable by name.

    Word embeddings are deliberately not part of the parameter set: they are
    frozen lookup tables owned by the data pipeline.
    """

    def __init__(self, hp: HyperParams, rng: np.random.Generator):
        h = hp.hidden_size
        d = hp.embedding_dim
        self.news_encoder = EncoderParams.create(d, h, rng)
        self.entity_encoder = EncoderParams.create(d, h, rng)
        self.comment_encoder = EncoderParams.create(d, h, rng)
        self.sentence_fwd = GruParams.create(2 * h, h, rng)
        self.sentence_bwd = GruParams.create(2 * h, h, rng)
        self.entity_coattn = CoAttentionParams.create(h, rng)
        self.comment_coattn = CoAttentionParams.create(h, rng)
        q = 2 * h
        self.head_w1 = layers.uniform_init(q, 8 * h, rng)
        self.head_b1 = layers.zeros_init(q, 1)
        self.head_w2 = layers.uniform_init(2, q, rng)
        self.head_b2 = layers.zeros_init(2, 1)

    @staticmethod
    def create(hp: HyperParams, seed: int | None = None) -> "ModelParams":
        rng = np.random.default_rng(hp.seed if seed is None else seed)
        return ModelParams(hp, rng)

    def named(self) -> dict:
        out = {}
        out.update(self.news_encoder.named("news.word"))
        out.update(self.entity_encoder.named("entity.word"))
        out.update(self.comment_encoder.named("comment.word"))
        for key, t in self.sentence_fwd.named().items():
            out[f"news.sent.fwd.{key}"] = t
        for key, t in self.sentence_bwd.named().items():
            out[f"news.sent.bwd.{key}"] = t
        for key, t in self.entity_coattn.named().items():
            out[f"coattn.entity.{key}"] = t
        for key, t in self.comment_coattn.named().items():
            out[f"coattn.comment.{key}"] = t
        out["head.w1"] = self.head_w1
        out["head.b1"] = self.head_b1
        out["head.w2"] = self.head_w2
        out["head.b2"] = self.head_b2
        return out

    def zero_grads(self) -> None:
        for t in self.named().values():
            t.zero_grad()

    def copy_values(self) -> dict:
        return {name: t.data.copy() for name, t in self.named().items()}

    def load_values(self, values: dict) -> None:
        named = self.named()
        missing = set(named) - set(values)
        extra = set(values) - set(named)
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, t in named.items():
            if t.data.shape != values[name].shape:
                raise CheckpointError(
                    f"parameter {name}: shape {values[name].shape} != expected {t.data.shape}")
            t.data = values[name].astype(np.float64).copy()


@dataclass
class EncodedSample:
    """Per-source sentence features with their real-position masks."""

    news: Tensor          # [2h x N]
    news_mask: np.ndarray
    entities: Tensor      # [2h x E]
    entity_mask: np.ndarray
    comments: Tensor      # [2h x U]
    comment_mask: np.ndarray
    label: int


@dataclass
class AttentionReport:
    """The four per-sample attention distributions, for interpretability."""

    news_entity: np.ndarray   # [N] news weights in the entity block
    entity: np.ndarray        # [E]
    news_comment: np.ndarray  # [N] news weights in the comment block
    comment: np.ndarray       # [U]
    news_mask: np.ndarray
    entity_mask: np.ndarray
    comment_mask: np.ndarray


def _word_encode_blocks(blocks: list, enc: EncoderParams, embeddings) -> list:
    """Word-level encode the real sentences of many (ids, word_mask, sent_mask)
    blocks in one batched recurrence.

    All real sentences across all blocks become columns of a single sequence
    batch; the recurrence and attention pooling run once. Returns, per block,
    a list of [2h x 1] pooled columns with None at pad slots.
    """
    gathered = []  # (block index, slot index)
    id_rows, mask_rows = [], []
    for b, (ids, word_mask, sent_mask) in enumerate(blocks):
        for slot in np.flatnonzero(sent_mask):
            gathered.append((b, int(slot)))
            id_rows.append(ids[slot])
            mask_rows.append(word_mask[slot])
    columns = [[None] * blocks[b][0].shape[0] for b in range(len(blocks))]
    if not gathered:
        return columns
    sub_ids = np.stack(id_rows)            # [K x M]
    sub_mask = np.stack(mask_rows)         # [K x M]
    k, m = sub_ids.shape
    inputs = [Tensor(embeddings.lookup(sub_ids[:, t]).T) for t in range(m)]
    keep = [Tensor(sub_mask[:, t].astype(np.float64).reshape(1, k)) for t in range(m)]
    fwd = layers.gru_sequence(inputs, enc.fwd, keep, reverse=False)
    bwd = layers.gru_sequence(inputs, enc.bwd, keep, reverse=True)
    states = [concat([fwd[t], bwd[t]], axis=0) for t in range(m)]  # each [2h x K]

    # attention scores for all sentences at once, then a per-row masked softmax
    score_rows = []
    for t in range(m):
        keys = tanh(add(matmul(enc.attention.proj, states[t]), enc.attention.bias))
        score_rows.append(matmul(enc.attention.context, keys))    # [1 x K]
    scores = transpose(concat(score_rows, axis=0))                # [K x M]
    alpha = softmax_rows(scores, sub_mask)                        # [K x M]
    alpha_t = transpose(alpha)                                    # [M x K]
    pooled = None
    for t in range(m):
        term = mul(states[t], slice_rows(alpha_t, t, t + 1))
        pooled = term if pooled is None else add(pooled, term)    # [2h x K]
    for j, (b, slot) in enumerate(gathered):
        columns[b][slot] = slice_cols(pooled, j, j + 1)
    return columns


def _scatter_columns(columns: list, rows: int) -> Tensor:
    parts = [c if c is not None else Tensor(np.zeros((rows, 1))) for c in columns]
    return concat(parts, axis=1)


def _finish_news(cols: list, sent_mask: np.ndarray, params: ModelParams,
                 hp: HyperParams) -> Tensor:
    seq = _scatter_columns(cols, 2 * hp.hidden_size)                   # [2h x N]
    states = layers.bigru(seq, params.sentence_fwd, params.sentence_bwd, sent_mask)
    keep_row = Tensor(sent_mask.astype(np.float64).reshape(1, -1))
    return mul(states, keep_row)


def encode_news(ids: np.ndarray, word_mask: np.ndarray, sent_mask: np.ndarray,
                params: ModelParams, embeddings, hp: HyperParams):
    """News content: word-level attention per sentence, then a sentence-level
    BiGRU over the sentence vectors. Pad columns come out exactly zero."""
    if not sent_mask.any():
        raise layers.DegenerateMaskError("news side has no real sentences")
    cols = _word_encode_blocks([(ids, word_mask, sent_mask)],
                               params.news_encoder, embeddings)[0]
    return _finish_news(cols, sent_mask, params, hp), sent_mask.copy()


def encode_side(ids: np.ndarray, word_mask: np.ndarray, sent_mask: np.ndarray,
                enc: EncoderParams, embeddings, hp: HyperParams):
    """Entity or comment side: word-level attention only, no sentence-level
    recurrence, so sentence order on these sides is interchangeable."""
    h2 = 2 * hp.hidden_size
    cols = _word_encode_blocks([(ids, word_mask, sent_mask)], enc, embeddings)[0]
    return _scatter_columns(cols, h2), sent_mask.copy()


def encode_samples(samples: list, params: ModelParams, embeddings,
                   hp: HyperParams) -> list:
    """Encode many padded samples, sharing one word-level recurrence per
    source across the whole list."""
    for sample in samples:
        if not sample.news_sent_mask.any():
            raise layers.DegenerateMaskError(
                f"sample {sample.doc_id}: news side has no real sentences")
    h2 = 2 * hp.hidden_size
    news_cols = _word_encode_blocks(
        [(s.news_ids, s.news_word_mask, s.news_sent_mask) for s in samples],
        params.news_encoder, embeddings)
    entity_cols = _word_encode_blocks(
        [(s.entity_ids, s.entity_word_mask, s.entity_sent_mask) for s in samples],
        params.entity_encoder, embeddings)
    comment_cols = _word_encode_blocks(
        [(s.comment_ids, s.comment_word_mask, s.comment_sent_mask) for s in samples],
        params.comment_encoder, embeddings)
    encoded = []
    for i, sample in enumerate(samples):
        encoded.append(EncodedSample(
            news=_finish_news(news_cols[i], sample.news_sent_mask, params, hp),
            news_mask=sample.news_sent_mask.copy(),
            entities=_scatter_columns(entity_cols[i], h2),
            entity_mask=sample.entity_sent_mask.copy(),
            comments=_scatter_columns(comment_cols[i], h2),
            comment_mask=sample.comment_sent_mask.copy(),
            label=sample.label,
        ))
    return encoded


def encode_sample(sample: SampleArrays, params: ModelParams, embeddings,
                  hp: HyperParams) -> EncodedSample:
    return encode_samples([sample], params, embeddings, hp)[0]


def _side_mask(mask: np.ndarray) -> np.ndarray:
    # an all-padding side is pooled uniformly over its (zero) columns so the
    # architecture stays total under ablation
    if mask.any():
        return mask
    return np.ones_like(mask, dtype=bool)


def forward(sample: EncodedSample, params: ModelParams):
    """Run both co-attention blocks and the prediction head.

    Returns (logits [2 x 1], AttentionReport).
    """
    ent = layers.co_attention(sample.news, sample.entities, sample.news_mask,
                              _side_mask(sample.entity_mask), params.entity_coattn)
    com = layers.co_attention(sample.news, sample.comments, sample.news_mask,
                              _side_mask(sample.comment_mask), params.comment_coattn)
    features = transpose(concat([ent.pooled_primary, ent.pooled_secondary,
                                 com.pooled_primary, com.pooled_secondary], axis=1))
    hidden = add(matmul(params.head_w1, features), params.head_b1)
    logits = add(matmul(params.head_w2, hidden), params.head_b2)
    report = AttentionReport(
        news_entity=ent.attn_primary.data.reshape(-1).copy(),
        entity=ent.attn_secondary.data.reshape(-1).copy(),
        news_comment=com.attn_primary.data.reshape(-1).copy(),
        comment=com.attn_secondary.data.reshape(-1).copy(),
        news_mask=sample.news_mask.copy(),
        entity_mask=sample.entity_mask.copy(),
        comment_mask=sample.comment_mask.copy(),
    )
    return logits, report


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Softmax the two logits and take the negative log of the true class.

    Probabilities are clamped at 1e-12 inside the log.
    """
    probs = softmax_rows(transpose(logits))            # [1 x 2]
    p0 = slice_cols(probs, 0, 1)
    p1 = slice_cols(probs, 1, 2)
    y = int(label)
    return add(scale(log(p1, floor=1e-12), -float(y)),
               scale(log(p0, floor=1e-12), -(1.0 - y)))


def predict_probs(logits: Tensor) -> np.ndarray:
    z = logits.data.reshape(-1)
    e = np.exp(z - z.max())
    return e / e.sum()


def predicted_label(probs: np.ndarray) -> int:
    # exact ties predict real (0)
    return 1 if probs[1] > probs[0] else 0


def run_sample(sample: SampleArrays, params: ModelParams, embeddings, hp: HyperParams):
    """Encode one padded sample and run the forward pass."""
    return forward(encode_sample(sample, params, embeddings, hp), params)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def ablate(sample: SampleArrays, mode: str) -> SampleArrays:
    """Input-mode ablation: the dropped source keeps its slots but every
    token becomes the padding id and its masks go all-pad."""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}' (expected one of {MODES})")
    out = sample.copy()
    if "E" not in mode.split("+"):
        out.entity_ids[:] = 0
        out.entity_word_mask[:] = False
        out.entity_sent_mask[:] = False
    if "C" not in mode.split("+"):
        out.comment_ids[:] = 0
        out.comment_word_mask[:] = False
        out.comment_sent_mask[:] = False
    return out


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers per parameter plus the shared step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def create(params: ModelParams) -> "AdamState":
        state = AdamState()
        for name, tensor in params.named().items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adam_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over every named parameter.

    Parameters with no gradient (never touched by the loss) are treated as
    having zero gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, tensor in params.named().items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients down to a global norm of ``max_norm``; returns the
    pre-clip norm."""
    total = 0.0
    named = params.named()
    for tensor in named.values():
        if tensor.grad is not None:
            total += float((tensor.grad * tensor.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for tensor in named.values():
            if tensor.grad is not None:
                tensor.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

GRAD_CLIP_NORM = 5.0


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val: dict


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int
    best_val_f1: float


def evaluate(samples: list, params: ModelParams, embeddings, hp: HyperParams,
             mode: str = "N+C+E") -> dict:
    """Metrics report over a sample list (no gradients recorded)."""
    preds, labels, scores = [], [], []
    for start in range(0, len(samples), hp.batch_size):
        chunk = samples[start:start + hp.batch_size]
        encoded = encode_samples([ablate(s, mode) for s in chunk],
                                 params, embeddings, hp)
        for enc in encoded:
            logits, _ = forward(enc, params)
            probs = predict_probs(logits)
            preds.append(predicted_label(probs))
            labels.append(enc.label)
            scores.append(float(probs[1]))
    return metrics_report(preds, labels, scores)


def train(train_samples: list, val_samples: list, hp: HyperParams,
          params: ModelParams, embeddings, mode: str = "N+C+E") -> TrainResult:
    """Mini-batch Adam with early stopping on validation macro-F1.

    Shuffling is seeded by ``hp.seed``; the returned parameters are the
    best-validation snapshot. Aborts with a diagnostic if the loss goes
    non-finite.
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation splits must be non-empty")
    if mode != "N+C+E":
        train_samples = [ablate(s, mode) for s in train_samples]
    state = AdamState.create(params)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([hp.seed, 7]))
    history: list[EpochLog] = []
    best_values = params.copy_values()
    # best checkpoint: highest val macro-F1, ties broken by lower train loss;
    # patience counts epochs since the F1 itself last improved
    best_key = (-1.0, 0.0)
    best_epoch = 0
    since_best = 0
    for epoch in range(1, hp.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), hp.batch_size):
            batch = [train_samples[i] for i in order[start:start + hp.batch_size]]
            params.zero_grads()
            graph = Graph()
            with graph:
                encoded = encode_samples(batch, params, embeddings, hp)
                per_sample = [cross_entropy(forward(enc, params)[0], enc.label)
                              for enc in encoded]
                batch_loss = mean_all(concat(per_sample, axis=1))
            loss_value = batch_loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss in epoch {epoch}, batch starting at {start}")
            graph.backward(batch_loss)
            clip_gradients(params, GRAD_CLIP_NORM)
            adam_step(params, state, hp.learning_rate)
            losses.append(loss_value)
        train_loss = float(np.mean(losses))
        val_report = evaluate(val_samples, params, embeddings, hp, mode)
        history.append(EpochLog(epoch, train_loss, val_report))
        key = (val_report["f1_macro"], -train_loss)
        if key > best_key:
            improved_f1 = val_report["f1_macro"] > best_key[0]
            best_key = key
            best_epoch = epoch
            best_values = params.copy_values()
            if improved_f1:
                since_best = 0
                continue
        since_best += 1
        if since_best >= hp.patience:
            break
    params.load_values(best_values)
    return TrainResult(params, history, best_epoch, best_key[0])


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

_HP_FIELDS = ("embedding_dim", "hidden_size", "max_words", "max_news_sentences",
              "max_entity_sentences", "max_comment_sentences",
              "max_sentences_per_description", "max_sentences_per_comment",
              "batch_size", "learning_rate", "max_epochs", "patience", "seed")


def save_checkpoint(path, hp: HyperParams, params: ModelParams) -> None:
    """Text header (version, hyperparameters, tensor directory with shapes and
    byte offsets) followed by raw little-endian float64 payloads."""
    named = params.named()
    header = io.StringIO()
    header.write(_CHECKPOINT_MAGIC + "\n")
    for name in _HP_FIELDS:
        header.write(f"hp {name} {getattr(hp, name)!r}\n")
    offset = 0
    blobs = []
    for name, tensor in named.items():
        shape = ",".join(str(s) for s in tensor.data.shape)
        header.write(f"tensor {name} {shape} {offset}\n")
        blob = tensor.data.astype("<f8").tobytes()
        blobs.append(blob)
        offset += len(blob)
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back; returns (hp, values dict name -> array).

    The round trip is bit-exact: arrays compare equal to what was saved.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0 or raw[:newline].decode("utf-8", "replace") != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a recognized checkpoint file")
    pos = newline + 1
    hp_kwargs = {}
    directory = []
    while True:
        newline = raw.find(b"\n", pos)
        if newline < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = raw[pos:newline].decode("utf-8")
        pos = newline + 1
        if line == "end":
            break
        parts = line.split(" ")
        if parts[0] == "hp" and len(parts) == 3:
            key, value = parts[1], parts[2]
            if key not in _HP_FIELDS:
                raise CheckpointError(f"{path}: unknown hyperparameter '{key}'")
            hp_kwargs[key] = float(value) if key == "learning_rate" else int(value)
        elif parts[0] == "tensor" and len(parts) == 4:
            shape = tuple(int(s) for s in parts[2].split(","))
            directory.append((parts[1], shape, int(parts[3])))
        else:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
    payload = raw[pos:]
    values = {}
    for name, shape, offset in directory:
        count = int(np.prod(shape))
        end = offset + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated for tensor {name}")
        values[name] = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape).copy()
    missing = set(_HP_FIELDS) - set(hp_kwargs)
    if missing:
        raise CheckpointError(f"{path}: header missing hyperparameters {sorted(missing)}")
    hp = HyperParams(**hp_kwargs)
    return hp, values


def restore_params(hp: HyperParams, values: dict) -> ModelParams:
    params = ModelParams.create(hp)
    params.load_values(values)
    return params
