"""Training loops: knowledge tracing, sequence self-supervision, fine-tuning.

Batching is deterministic (learners sorted by id, fixed batch slicing) and
every corruption draw comes from one numpy generator owned by the loop, so
a stage rerun from the same seed reproduces its loss history exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from . import nnutil
from .adapter import adapt_table
from .ktrace import kt_loss
from .recommender import ANSWER_HIDDEN, rank_of, rec_loss


@dataclass
class KtTrainConfig:
    epochs: int = 15
    lr: float = 0.005
    optimizer: str = "adam"
    batch_size: int = 128
    seed: int = 0


@dataclass
class SslConfig:
    epochs: int = 10
    lr: float = 0.001
    optimizer: str = "adam"
    batch_size: int = 256
    mask_prob: float = 0.2
    max_span: int = 8
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if self.max_span < 2:
            raise ValueError(f"max_span must be >= 2, got {self.max_span}")


@dataclass
class FinetuneConfig:
    epochs: int = 40
    lr: float = 0.001
    optimizer: str = "adam"
    batch_size: int = 256
    patience: int = 5  # epochs without a validation MRR improvement
    seed: int = 0


def pad_batch(record_lists, max_len, pad_concept):
    """Right-pad a list of record lists to one (B, T) block.

    Sequences longer than max_len keep their most recent max_len records.
    Padding uses `pad_concept` for the concept slot and the hidden-answer
    token for the answer slot; `real` marks genuine positions.
    """
    clipped = [records[-max_len:] for records in record_lists]
    steps = max(len(r) for r in clipped)
    batch = len(clipped)
    concepts = np.full((batch, steps), pad_concept, dtype=np.int64)
    answers = np.full((batch, steps), ANSWER_HIDDEN, dtype=np.int64)
    real = np.zeros((batch, steps), dtype=bool)
    for i, records in enumerate(clipped):
        for t, rec in enumerate(records):
            concepts[i, t] = rec.concept
            answers[i, t] = rec.correct
            real[i, t] = True
    return (
        torch.from_numpy(concepts),
        torch.from_numpy(answers),
        torch.from_numpy(real),
    )


def iter_batches(items, batch_size):
    for lo in range(0, len(items), batch_size):
        yield items[lo : lo + batch_size]


def kt_states(kt, concepts, answers, real, grad=False):
    """Tracer hidden states for a padded batch; zeros at padding.

    Padded slots carry the hidden-answer token, which is out of range for
    the tracer's pair table, so they are swapped for zeros before the
    forward pass and the resulting states are zeroed again after it.
    """
    safe_answers = torch.where(real, answers, torch.zeros_like(answers))
    safe_concepts = torch.where(real, concepts, torch.zeros_like(concepts))
    if grad:
        hidden, _ = kt(safe_concepts, safe_answers)
    else:
        hidden, _ = kt.trace(safe_concepts, safe_answers)
    return hidden * real.unsqueeze(-1).to(hidden.dtype)


def train_kt(kt, train_records, config):
    """Fit the tracer on next-step correctness; returns per-epoch mean loss."""
    learners = sorted(train_records)
    usable = [u for u in learners if len(train_records[u]) >= 2]
    if not usable:
        raise ValueError("no learner has >= 2 training records")
    opt = nnutil.make_optimizer(kt.parameters(), config.optimizer, config.lr)
    history = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for step, group in enumerate(iter_batches(usable, config.batch_size)):
            lists = [train_records[u] for u in group]
            concepts, answers, real = pad_batch(lists, max(len(r) for r in lists), 0)
            _, mastery = kt(
                torch.where(real, concepts, torch.zeros_like(concepts)),
                torch.where(real, answers, torch.zeros_like(answers)),
            )
            loss = kt_loss(mastery, concepts, answers, real, kt.config.loss)
            if not torch.isfinite(loss):
                raise RuntimeError(f"kt stage epoch {epoch} step {step}: non-finite loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(group)
            count += len(group)
        history.append(total / count)
    return history


def _independent_mask(real, prob, rng):
    draw = rng.random(real.shape) < prob
    return draw & real.numpy()


def _span_mask(real, max_span, rng):
    """One contiguous masked span per sequence, length uniform in
    [2, min(max_span, len // 2)]. A sequence too short to give up a span
    (len < 4) is left unmasked; it still contributes to the other
    objectives."""
    real_np = real.numpy()
    out = np.zeros_like(real_np)
    for i in range(real_np.shape[0]):
        length = int(real_np[i].sum())
        if length < 4:
            continue
        span = int(rng.integers(2, min(max_span, length // 2) + 1))
        start = int(rng.integers(0, length - span + 1))
        out[i, start : start + span] = True
    return out


def _corrupt(concepts, answers, masked, mask_token):
    masked_t = torch.from_numpy(masked)
    c = torch.where(masked_t, torch.full_like(concepts, mask_token), concepts)
    a = torch.where(masked_t, torch.full_like(answers, ANSWER_HIDDEN), answers)
    return c, a, masked_t


def predecessor_multi_hot(graph, num_concepts) -> torch.Tensor:
    """(K, K) float matrix; row k flags the graph predecessors of concept k."""
    rows = torch.zeros(num_concepts, num_concepts)
    for k in sorted(graph.nodes):
        for p in graph.predecessors(k):
            rows[k, p] = 1.0
    return rows


def _attr_bce(logits, concepts, positions, attr_rows, has_attrs):
    """Multi-label BCE on graph attributes at the given positions.

    Positions whose concept has no attributes are skipped; returns None
    when nothing is left to score. Padding slots hold the out-of-range
    mask token, so the lookup is clamped; `positions` never includes them.
    """
    safe = concepts.clamp(max=attr_rows.shape[0] - 1)
    keep = positions & has_attrs[safe]
    if int(keep.sum()) == 0:
        return None
    labels = attr_rows[safe[keep]]
    return torch.nn.functional.binary_cross_entropy_with_logits(logits[keep], labels)


def ssl_losses(model, batch, states, text_table, attr_rows, has_attrs, config, rng):
    """The four self-supervised objectives on one padded batch.

    Each objective draws its own corruption of the batch (four independent
    maskings), runs the model bidirectionally, and scores only its own
    positions:

      mip  recover the concept id at independently masked positions
      msp  recover the ids inside one masked contiguous span
      map  predict the masked concept's predecessor set from its feature
      aap  predict the visible concept's predecessor set from its fused input

    Tracer states come from the uncorrupted sequence and are zeroed at
    masked positions. Returns {name: loss or None}.
    """
    concepts, answers, real = batch
    out = {}

    def masked_states(masked_t):
        return states * (~masked_t).unsqueeze(-1).to(states.dtype)

    def encode(c, a, masked_t):
        return model.encode(
            c, a, masked_states(masked_t), text_table, real, causal=False
        )

    # mip: concept identity at masked positions
    masked = _independent_mask(real, config.mask_prob, rng)
    c, a, masked_t = _corrupt(concepts, answers, masked, model.config.mask_token)
    if int(masked_t.sum()) > 0:
        feats = encode(c, a, masked_t)
        out["mip"] = rec_loss(model.scores(feats), concepts, masked_t)
    else:
        out["mip"] = None

    # msp: concept identity across one contiguous span
    masked = _span_mask(real, config.max_span, rng)
    c, a, masked_t = _corrupt(concepts, answers, masked, model.config.mask_token)
    if int(masked_t.sum()) > 0:
        feats = encode(c, a, masked_t)
        out["msp"] = rec_loss(model.scores(feats), concepts, masked_t)
    else:
        out["msp"] = None

    # map: graph attributes of the hidden concept, read from its feature
    masked = _independent_mask(real, config.mask_prob, rng)
    c, a, masked_t = _corrupt(concepts, answers, masked, model.config.mask_token)
    if int(masked_t.sum()) > 0:
        feats = encode(c, a, masked_t)
        out["map"] = _attr_bce(
            model.attr_head(feats), concepts, masked_t, attr_rows, has_attrs
        )
    else:
        out["map"] = None

    # aap: graph attributes of visible concepts, read from the fused input
    masked = _independent_mask(real, config.mask_prob, rng)
    c, a, masked_t = _corrupt(concepts, answers, masked, model.config.mask_token)
    fused = model.fuse(c, a, masked_states(masked_t), text_table)
    visible = real & ~masked_t
    out["aap"] = _attr_bce(
        model.attr_head(fused), concepts, visible, attr_rows, has_attrs
    )
    return out


def train_ssl(model, kt, adapter, raw_features, graph, train_records, config):
    """Sequence pre-training on the four masking objectives.

    Only the recommender's parameters move: the adapter is run once per
    epoch without grad to refresh the text table, and tracer states are
    detached. Returns the per-epoch total-loss history.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    opt = nnutil.make_optimizer(model.parameters(), config.optimizer, config.lr)
    learners = sorted(train_records)
    attr_rows = predecessor_multi_hot(graph, model.config.num_concepts)
    has_attrs = attr_rows.sum(dim=1) > 0
    features = torch.as_tensor(raw_features, dtype=torch.float32)
    history = []
    for epoch in range(config.epochs):
        text_table = torch.from_numpy(adapt_table(adapter, features, graph))
        total = 0.0
        for step, group in enumerate(iter_batches(learners, config.batch_size)):
            batch = pad_batch(
                [train_records[u] for u in group],
                model.config.max_len,
                model.config.mask_token,
            )
            states = kt_states(kt, batch[0], batch[1], batch[2], grad=False)
            losses = ssl_losses(
                model, batch, states, text_table, attr_rows, has_attrs, config, rng
            )
            live = [v for v in losses.values() if v is not None]
            if not live:
                continue
            loss = sum(live)
            if not torch.isfinite(loss):
                raise RuntimeError(f"seq stage epoch {epoch} step {step}: non-finite loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        history.append(total)
    return history


def _rec_batch_loss(model, kt, text_table, record_lists, config, states_grad):
    concepts, answers, real = pad_batch(
        record_lists, model.config.max_len, model.config.mask_token
    )
    states = kt_states(kt, concepts, answers, real, grad=states_grad)
    feats = model.encode(concepts, answers, states, text_table, real, causal=True)
    logits = model.scores(feats)
    # position t predicts the concept at t+1; the last real position has
    # no target inside this batch
    targets = torch.zeros_like(concepts)
    targets[:, :-1] = concepts[:, 1:]
    target_mask = real.clone()
    target_mask[:, :-1] &= real[:, 1:]
    lengths = real.sum(dim=1)
    target_mask[torch.arange(len(record_lists)), lengths - 1] = False
    return rec_loss(logits, targets, target_mask)


def train_finetune(model, kt, adapter, raw_features, graph, split, config):
    """Joint training on next-concept cross entropy with early stopping.

    All three trainable pieces update together; the adapted text table is
    rebuilt inside the autograd graph every step so adapter gradients flow
    through the text part. Stops after `patience` epochs without a strict
    validation-MRR improvement and restores the best parameters. Returns
    (loss_history, valid_mrr_history).
    """
    params = list(model.parameters()) + list(kt.parameters()) + list(adapter.parameters())
    opt = nnutil.make_optimizer(params, config.optimizer, config.lr)
    learners = sorted(split.train)
    usable = [u for u in learners if len(split.train[u]) >= 2]
    if not usable:
        raise ValueError("no learner has >= 2 training records to fine-tune on")
    features = torch.as_tensor(raw_features, dtype=torch.float32)
    best = {"mrr": float("-inf"), "state": None, "since": 0}
    loss_history, mrr_history = [], []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for step, group in enumerate(iter_batches(usable, config.batch_size)):
            text_table = adapter(features, graph)
            loss = _rec_batch_loss(
                model, kt, text_table, [split.train[u] for u in group], config, True
            )
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"finetune stage epoch {epoch} step {step}: non-finite loss"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(group)
            count += len(group)
        loss_history.append(total / count)
        ranks = model_rankings(model, kt, adapter, raw_features, graph, split, "valid")
        mrr = float(np.mean([1.0 / r for r in ranks.values()]))
        mrr_history.append(mrr)
        if mrr > best["mrr"]:
            best.update(
                mrr=mrr,
                since=0,
                state=(
                    copy.deepcopy(model.state_dict()),
                    copy.deepcopy(kt.state_dict()),
                    copy.deepcopy(adapter.state_dict()),
                ),
            )
        else:
            best["since"] += 1
            if best["since"] >= config.patience:
                break
    if best["state"] is not None:
        model.load_state_dict(best["state"][0])
        kt.load_state_dict(best["state"][1])
        adapter.load_state_dict(best["state"][2])
    return loss_history, mrr_history


def score_history(model, kt, text_table, records) -> np.ndarray:
    """Concept scores after consuming `records`; the caller picks a use."""
    concepts, answers, real = pad_batch([records], model.config.max_len, model.config.mask_token)
    states = kt_states(kt, concepts, answers, real, grad=False)
    with torch.no_grad():
        feats = model.encode(concepts, answers, states, text_table, real, causal=True)
        logits = model.scores(feats)
    last = int(real[0].sum()) - 1
    return logits[0, last].numpy().astype(np.float64)


def model_rankings(model, kt, adapter, raw_features, graph, split, which="test"):
    """Rank of each learner's held-out concept.

    `which` picks the target: "valid" scores from the train prefix,
    "test" from train plus the validation record. Returns {learner: rank}.
    """
    if which not in ("valid", "test"):
        raise ValueError(f"unknown split {which!r}")
    features = torch.as_tensor(raw_features, dtype=torch.float32)
    text_table = torch.from_numpy(adapt_table(adapter, features, graph))
    ranks = {}
    for learner in sorted(split.train):
        prefix = list(split.train[learner])
        if which == "test":
            prefix.append(split.valid[learner])
            target = split.test[learner].concept
        else:
            target = split.valid[learner].concept
        scores = score_history(model, kt, text_table, prefix)
        ranks[learner] = rank_of(scores, target)
    return ranks
