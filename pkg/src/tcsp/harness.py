"""Training, exact-match evaluation, the few-shot protocol, and latency runs.

Exact match is frame equality: coarse intent, every fine-grained intent tag,
and every slot stack must all be correct.  The nested/non-nested partition is
decided by the gold trees alone, so it is identical for every model evaluated
on the same data.
"""

from __future__ import annotations

import copy
import csv
import json
import random
import statistics
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Mapping, Sequence

import torch

from . import neural_core as nc
from .baselines import (
    NLMConfig,
    NeuralLayeredParser,
    Seq2SeqConfig,
    Seq2SeqParser,
    build_target_vocab,
    linearize_tree,
)
from .corpus import Dataset, build_vocabs, few_shot_split
from .decomposer import frames_equal, is_nested
from .neural_core import EncoderConfig
from .x2parser_model import SlotEncoderConfig, X2Parser, X2ParserConfig

MODEL_FAMILIES = ("x2parser", "nlm", "seq2seq")


class TrainingError(RuntimeError):
    pass


class NonFiniteLoss(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-5
    seeds: tuple[int, ...] = (0, 1, 2)
    early_stop_patience: int = 0  # 0 disables early stopping
    eval_split: float = 0.0  # fraction of train held out when no eval set given

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.eval_split < 1.0:
            raise TrainingError("eval_split must lie in [0, 1)")

    @staticmethod
    def toy(**overrides) -> "TrainConfig":
        """Desk-scale defaults: the reference learning rate 2e-5 assumes a
        large pretrained encoder; small от-scratch models need more."""
        base = TrainConfig(lr=1e-3)
        return replace(base, **overrides)


@dataclass
class TrainResult:
    log: list[dict]
    best_em: float
    best_epoch: int


# --- model construction -------------------------------------------------------------


def desk_encoder_config(vocab_size: int, seed: int = 0, d_model: int = 64,
                        n_layers: int = 2, n_heads: int = 4, d_ff: int = 128,
                        max_len: int = 64) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=vocab_size, d_model=d_model, n_heads=n_heads,
        n_layers=n_layers, d_ff=d_ff, max_len=max_len, seed=seed,
    )


def build_model(family: str, dataset: Dataset, seed: int = 0,
                encoder_kwargs: dict | None = None):
    """Construct a desk-scale model of the given family over the dataset's
    vocabularies (built from the full dataset: the label ontology is known
    up front even when training only sees a subset of domains)."""
    encoder_kwargs = dict(encoder_kwargs or {})
    vocabs = build_vocabs(dataset)
    enc = desk_encoder_config(len(vocabs.token), seed=seed, **encoder_kwargs)
    if family == "x2parser":
        cfg = X2ParserConfig(
            encoder=enc,
            slot_encoder=SlotEncoderConfig(
                n_layers=1, n_heads=enc.n_heads, d_model=enc.d_model, d_ff=enc.d_ff
            ),
        )
        return X2Parser(cfg, vocabs)
    if family == "nlm":
        return NeuralLayeredParser(
            NLMConfig(encoder=enc, layer_heads=enc.n_heads, layer_d_ff=enc.d_ff),
            vocabs,
        )
    if family == "seq2seq":
        longest = max((len(linearize_tree(ex.tree)) for ex in dataset), default=16)
        cfg = Seq2SeqConfig(
            encoder=enc,
            decoder_layers=1,
            decoder_heads=enc.n_heads,
            decoder_d_ff=enc.d_ff,
            max_decode_len=max(48, longest + 8),
        )
        return Seq2SeqParser(cfg, vocabs.token, build_target_vocab(dataset, enc.max_len))
    raise TrainingError(f"unknown model family {family!r} (expected {MODEL_FAMILIES})")


def save_model(model, path) -> None:
    payload = model.state_payload()
    nc.save_checkpoint(
        path,
        family=payload["family"],
        config=payload["config"],
        state_dict=payload["state_dict"],
        vocab_symbols=payload["vocab_symbols"],
    )


def load_model(path):
    payload = nc.load_checkpoint(path)
    loaders = {
        "x2parser": X2Parser.from_payload,
        "nlm": NeuralLayeredParser.from_payload,
        "seq2seq": Seq2SeqParser.from_payload,
    }
    family = payload["family"]
    if family not in loaders:
        raise TrainingError(f"checkpoint has unknown family {family!r}")
    return loaders[family](payload)


# --- training ---------------------------------------------------------------------------


def train(model, dataset: Dataset, config: TrainConfig, seed: int = 0,
          eval_dataset: Dataset | None = None, verbose: bool = False) -> TrainResult:
    """Seeded training loop; keeps (and restores) the best-EM checkpoint.

    Per epoch: shuffle, batch, Adam steps, then exact match on the eval set
    (the held-out eval_split slice, or the training data itself when neither
    is provided).  Aborts with NonFiniteLoss diagnostics on divergence.
    """
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    train_examples = list(dataset)
    if eval_dataset is None and config.eval_split > 0:
        rng = random.Random(seed ^ 0x5EED)
        idx = list(range(len(train_examples)))
        rng.shuffle(idx)
        cut = max(1, int(config.eval_split * len(idx)))
        eval_dataset = Dataset([train_examples[i] for i in idx[:cut]], name="heldout")
        train_examples = [train_examples[i] for i in idx[cut:]]
    eval_ds = eval_dataset if eval_dataset is not None else Dataset(train_examples)

    torch.manual_seed(seed)
    optimizer = nc.Adam(model.parameters(), lr=config.lr)
    log: list[dict] = []
    best_em, best_epoch = -1.0, -1
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(config.epochs):
        order = list(range(len(train_examples)))
        random.Random((seed << 16) + epoch).shuffle(order)
        model.train()
        losses = []
        for at in range(0, len(order), config.batch_size):
            chunk = [train_examples[i] for i in order[at : at + config.batch_size]]
            prepared = model.prepare_batch(chunk)
            loss = model.loss(prepared)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch} step {at // config.batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        em = evaluate(model, eval_ds).exact_match
        log.append({"epoch": epoch, "loss": statistics.fmean(losses), "em": em})
        if verbose:
            print(f"epoch {epoch}: loss {log[-1]['loss']:.4f} em {em:.4f}")
        if em > best_em:
            best_em, best_epoch, stale = em, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if config.early_stop_patience and stale >= config.early_stop_patience:
                break
        if em == 1.0:
            break  # nothing left to learn on this eval set
    model.load_state_dict(best_state)
    return TrainResult(log=log, best_em=best_em, best_epoch=best_epoch)


def write_metric_log(path, log: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "em"])
        writer.writeheader()
        writer.writerows(log)


# --- evaluation -------------------------------------------------------------------------


@dataclass
class EvalReport:
    exact_match: float
    nested_em: float | None
    non_nested_em: float | None
    per_domain: dict[str, float]
    total: int
    correct: int
    nested_count: int
    non_nested_count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"examples      {self.total}",
            f"exact match   {self.exact_match:.4f}",
            f"nested        {_fmt(self.nested_em)}  ({self.nested_count} examples)",
            f"non-nested    {_fmt(self.non_nested_em)}  ({self.non_nested_count} examples)",
        ]
        for dom in sorted(self.per_domain):
            lines.append(f"domain {dom:<12} {self.per_domain[dom]:.4f}")
        return "\n".join(lines)


def _fmt(x: float | None) -> str:
    return "n/a   " if x is None else f"{x:.4f}"


def evaluate(model, dataset: Dataset, batch_size: int = 64) -> EvalReport:
    """Exact-match accuracy with the nested/non-nested partition from gold
    trees; decode failures (seq2seq) count as wrong."""
    total = len(dataset)
    correct = 0
    nested_hits, nested_total = 0, 0
    plain_hits, plain_total = 0, 0
    dom_hits: dict[str, list[int]] = {}
    for at in range(0, total, batch_size):
        chunk = dataset.examples[at : at + batch_size]
        preds = model.parse_batch([ex.tokens for ex in chunk])
        for ex, pred in zip(chunk, preds):
            ok = pred is not None and frames_equal(pred, ex.frame)
            correct += ok
            if is_nested(ex.tree):
                nested_total += 1
                nested_hits += ok
            else:
                plain_total += 1
                plain_hits += ok
            hits = dom_hits.setdefault(ex.domain, [0, 0])
            hits[0] += ok
            hits[1] += 1
    return EvalReport(
        exact_match=correct / total if total else 0.0,
        nested_em=nested_hits / nested_total if nested_total else None,
        non_nested_em=plain_hits / plain_total if plain_total else None,
        per_domain={d: h / n for d, (h, n) in sorted(dom_hits.items())},
        total=total,
        correct=correct,
        nested_count=nested_total,
        non_nested_count=plain_total,
    )


class GoldOracle:
    """Echoes gold frames; pipes through the same evaluation path as models."""

    def __init__(self, dataset: Dataset):
        self.frames = {ex.tokens: ex.frame for ex in dataset}

    def parse_batch(self, token_seqs, repair: bool = False):
        return [self.frames.get(tuple(seq)) for seq in token_seqs]

    def parse_one(self, tokens, repair: bool = False):
        return self.frames.get(tuple(tokens)), 0


# --- few-shot cross-domain protocol --------------------------------------------------------


@dataclass
class FewShotReport:
    target_domain: str
    fractions: tuple[float, ...]
    exact_match: dict[str, dict[str, float]]  # family -> str(fraction) -> EM
    split_sizes: dict[str, dict[str, int]]
    splits_verified: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        cols = [f"{f:>7.0%}" for f in self.fractions]
        lines = [
            f"target domain: {self.target_domain}",
            "model     " + " ".join(cols),
        ]
        for family in self.exact_match:
            row = [
                f"{self.exact_match[family][str(f)]:>7.4f}" for f in self.fractions
            ]
            lines.append(f"{family:<9} " + " ".join(row))
        return "\n".join(lines)


def run_few_shot_protocol(
    dataset: Dataset,
    target_domain: str,
    train_config: TrainConfig,
    finetune_config: TrainConfig | None = None,
    families: Sequence[str] = MODEL_FAMILIES,
    fractions: Sequence[float] = (0.01, 0.03, 0.06, 0.10),
    seed: int = 0,
    encoder_kwargs: dict | None = None,
    model_factory: Callable | None = None,
    verbose: bool = False,
) -> FewShotReport:
    """Source-train, fine-tune on a target-domain fraction, test on the rest.

    A fresh model is trained per (family, fraction) cell so fine-tuning never
    leaks across cells; split disjointness and seed-reproducibility are
    checked in-run.  ``model_factory(family)`` overrides model construction
    (used to pipe oracles through the same protocol).
    """
    finetune_config = finetune_config or train_config
    ems: dict[str, dict[str, float]] = {}
    sizes: dict[str, dict[str, int]] = {}
    verified = True
    for family in families:
        ems[family] = {}
        for fraction in fractions:
            split = few_shot_split(dataset, target_domain, fraction, seed)
            again = few_shot_split(dataset, target_domain, fraction, seed)
            ids = lambda d: {ex.id for ex in d}
            verified = verified and (
                ids(split.target_finetune) == ids(again.target_finetune)
                and not ids(split.source_train) & ids(split.target_finetune)
                and not ids(split.target_finetune) & ids(split.target_test)
                and not ids(split.source_train) & ids(split.target_test)
            )
            sizes[str(fraction)] = {
                "source_train": len(split.source_train),
                "target_finetune": len(split.target_finetune),
                "target_test": len(split.target_test),
            }
            if model_factory is not None:
                model = model_factory(family)
            else:
                model = build_model(family, dataset, seed=seed,
                                    encoder_kwargs=encoder_kwargs)
            if hasattr(model, "parameters"):
                train(model, split.source_train, train_config, seed=seed,
                      verbose=verbose)
                train(model, split.target_finetune, finetune_config, seed=seed + 1,
                      verbose=verbose)
            em = evaluate(model, split.target_test).exact_match
            ems[family][str(fraction)] = em
            if verbose:
                print(f"[fewshot] {family} @ {fraction:.0%}: em {em:.4f}")
    return FewShotReport(
        target_domain=target_domain,
        fractions=tuple(fractions),
        exact_match=ems,
        split_sizes=sizes,
        splits_verified=verified,
    )


# --- latency ---------------------------------------------------------------------------------


@dataclass
class BucketStats:
    count: int
    mean_ms: float | None
    p95_ms: float | None
    mean_steps: float | None


@dataclass
class LatencyReport:
    buckets: tuple[int, ...]
    models: dict[str, dict[int, BucketStats]]
    param_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "buckets": list(self.buckets),
            "param_counts": self.param_counts,
            "models": {
                name: {str(b): asdict(stats) for b, stats in per.items()}
                for name, per in self.models.items()
            },
        }

    def to_text(self) -> str:
        lines = ["bucket " + " ".join(f"{b:>16}" for b in self.buckets)]
        for name, per in self.models.items():
            cells = []
            for b in self.buckets:
                s = per[b]
                cells.append(
                    f"{s.mean_ms:7.2f}ms/{s.mean_steps:5.1f}st"
                    if s.count
                    else " " * 10 + "empty "
                )
            lines.append(f"{name:<9} ({self.param_counts[name]} params)")
            lines.append("          " + " ".join(cells))
        return "\n".join(lines)


def latency_benchmark(models: Mapping[str, object], dataset: Dataset,
                      buckets: Sequence[int] = (10, 20, 30, 40),
                      repetitions: int = 3, warmup: int = 2) -> LatencyReport:
    """Single-threaded, batch-1, warmed-up wall-clock timing per output-length
    bucket (gold linearization length), plus sequential-step instrumentation.

    Buckets with no examples are reported empty rather than raising.
    """
    buckets = tuple(sorted(buckets))
    assignments: dict[int, list] = {b: [] for b in buckets}
    for ex in dataset:
        length = len(linearize_tree(ex.tree))
        for b in buckets:
            if length <= b:
                assignments[b].append(ex)
                break
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        per_model: dict[str, dict[int, BucketStats]] = {}
        params: dict[str, int] = {}
        for name, model in models.items():
            params[name] = (
                nc.parameter_count(model) if hasattr(model, "parameters") else 0
            )
            stats: dict[int, BucketStats] = {}
            warm = next((exs[0] for exs in assignments.values() if exs), None)
            if warm is not None:
                for _ in range(warmup):
                    model.parse_one(warm.tokens)
            for b in buckets:
                times, steps = [], []
                for ex in assignments[b]:
                    for _ in range(repetitions):
                        t0 = time.perf_counter()
                        _, n_steps = model.parse_one(ex.tokens)
                        times.append((time.perf_counter() - t0) * 1e3)
                        steps.append(n_steps)
                if times:
                    times.sort()
                    stats[b] = BucketStats(
                        count=len(times),
                        mean_ms=statistics.fmean(times),
                        p95_ms=times[min(len(times) - 1, int(0.95 * len(times)))],
                        mean_steps=statistics.fmean(steps),
                    )
                else:
                    stats[b] = BucketStats(0, None, None, None)
            per_model[name] = stats
    finally:
        torch.set_num_threads(old_threads)
    return LatencyReport(buckets=buckets, models=per_model, param_counts=params)


def report_to_json(report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)
