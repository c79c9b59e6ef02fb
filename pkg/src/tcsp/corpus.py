"""Datasets: JSONL/TSV ingestion, synthetic corpus generation, splits, vocabs.

The synthetic generator replaces proprietary data at desk scale.  Each domain
gets its own intent/slot ontology and disjoint word lexicons; a word's surface
determines its role (slot head/tail, intent trigger, filler), and heads that
introduce nested material come from dedicated sub-lexicons, so the mapping
from token sequence to tree is deterministic and a sequence model can in
principle reach 100% exact match.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from . import decomposer as dc
from . import treebank as tb
from .treebank import INTENT, SLOT, SemanticNode, SemanticTree, Token


class CorpusError(ValueError):
    pass


class UnknownDomain(CorpusError):
    pass


class EmptyTarget(CorpusError):
    pass


class MissingColumn(CorpusError):
    pass


@dataclass(frozen=True)
class Example:
    """One utterance with its gold tree and cached decomposition."""

    id: str
    locale: str
    domain: str
    tokens: tuple[str, ...]
    tree: SemanticTree
    frame: dc.DecomposedFrame = None  # derived in __post_init__ when omitted

    def __post_init__(self):
        if not self.domain or not self.locale:
            raise CorpusError(f"example {self.id}: empty domain or locale")
        if self.tokens != self.tree.surfaces:
            raise CorpusError(f"example {self.id}: tokens do not match tree leaves")
        if self.frame is None:
            object.__setattr__(self, "frame", dc.decompose(self.tree))
        elif not dc.frames_equal(self.frame, dc.decompose(self.tree)):
            raise CorpusError(f"example {self.id}: cached frame disagrees with tree")


class Dataset:
    """An ordered, immutable collection of examples."""

    def __init__(self, examples: Iterable[Example], name: str = ""):
        self.examples = tuple(examples)
        self.name = name

    def __len__(self):
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.examples == other.examples

    @property
    def domains(self) -> tuple[str, ...]:
        return tuple(sorted({ex.domain for ex in self.examples}))

    def subset(self, domain: str) -> "Dataset":
        return Dataset(
            [ex for ex in self.examples if ex.domain == domain],
            name=f"{self.name}/{domain}" if self.name else domain,
        )


# --- JSONL / TSV ingestion ------------------------------------------------------

_JSONL_FIELDS = ("id", "locale", "domain", "utterance", "tree")


@dataclass(frozen=True)
class RecordError:
    line: int
    message: str


@dataclass
class IngestResult:
    dataset: Dataset
    errors: list[RecordError]


def write_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            row = {
                "id": ex.id,
                "locale": ex.locale,
                "domain": ex.domain,
                "utterance": " ".join(ex.tokens),
                "tree": tb.serialize(ex.tree),
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl(path, fail_fast: bool = False) -> IngestResult:
    """Load the native JSONL format, validating every record.

    Malformed records are collected as RecordError entries (1-based line
    numbers) unless fail_fast is set, in which case the first failure raises.
    """
    examples, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                missing = [k for k in _JSONL_FIELDS if k not in row]
                if missing:
                    raise CorpusError(f"missing fields {missing}")
                tree = tb.parse_top(row["tree"])
                tokens = tuple(row["utterance"].split())
                examples.append(
                    Example(row["id"], row["locale"], row["domain"], tokens, tree)
                )
            except (ValueError, KeyError) as exc:
                if fail_fast:
                    raise CorpusError(f"line {lineno}: {exc}") from exc
                errors.append(RecordError(lineno, str(exc)))
    return IngestResult(Dataset(examples, name=str(path)), errors)


def read_mtop_tsv(path, column_map: Mapping[str, int], fail_fast: bool = False) -> IngestResult:
    """Ingest a TSV export whose representation column may be decoupled
    (tokens outside slots omitted); such trees are realigned to the utterance.

    column_map gives 0-based indices for at least utterance/domain/
    representation; id and locale columns are optional.
    """
    required = ("utterance", "domain", "representation")
    for key in required:
        if key not in column_map:
            raise MissingColumn(f"column_map lacks required column {key!r}")
    examples, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            try:
                def col(key, default=None):
                    if key not in column_map:
                        return default
                    idx = column_map[key]
                    if idx >= len(fields):
                        raise MissingColumn(
                            f"column {key!r} (index {idx}) beyond {len(fields)} fields"
                        )
                    return fields[idx]

                tokens = tuple(col("utterance").split())
                tree = tb.align_decoupled(tokens, col("representation"))
                examples.append(
                    Example(
                        col("id", f"row{lineno:06d}"),
                        col("locale", "en"),
                        col("domain"),
                        tokens,
                        tree,
                    )
                )
            except (ValueError, KeyError) as exc:
                if fail_fast:
                    raise CorpusError(f"line {lineno}: {exc}") from exc
                errors.append(RecordError(lineno, str(exc)))
    return IngestResult(Dataset(examples, name=str(path)), errors)


# --- ontology and synthetic generation --------------------------------------------


@dataclass(frozen=True)
class Ontology:
    """Per-domain intent and slot label inventories."""

    intents: dict[str, tuple[str, ...]]
    slots: dict[str, tuple[str, ...]]

    def all_intents(self) -> tuple[str, ...]:
        return tuple(lbl for dom in sorted(self.intents) for lbl in self.intents[dom])

    def all_slots(self) -> tuple[str, ...]:
        return tuple(lbl for dom in sorted(self.slots) for lbl in self.slots[dom])

    @staticmethod
    def from_dataset(dataset: Dataset) -> "Ontology":
        intents: dict[str, set] = {}
        slots: dict[str, set] = {}
        for ex in dataset:
            for node in ex.tree.root.nodes():
                bucket = intents if node.kind == INTENT else slots
                bucket.setdefault(ex.domain, set()).add(node.label)
        return Ontology(
            intents={d: tuple(sorted(s)) for d, s in intents.items()},
            slots={d: tuple(sorted(s)) for d, s in slots.items()},
        )


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    domains: tuple[str, ...] = ("alarm", "events", "music")
    locale: str = "en"
    num_examples: int = 1000
    intents_per_domain: int = 4
    slots_per_domain: int = 4
    max_intent_depth: int = 3
    max_slot_depth: int = 3
    min_len: int = 4
    max_len: int = 12
    nested_fraction: float = 0.5
    # conditional probabilities inside a nested example's free constituents
    p_slot: float = 0.55
    p_intent: float = 0.25
    p_deep_slot: float = 0.45
    p_intent_in_slot: float = 0.15
    p_deep_intent: float = 0.35

    def __post_init__(self):
        for name in ("nested_fraction", "p_slot", "p_intent", "p_deep_slot",
                     "p_intent_in_slot", "p_deep_intent"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise CorpusError(f"{name} must lie in [0,1]")
        if not 2 <= self.max_intent_depth <= tb.MAX_INTENT_DEPTH:
            raise CorpusError("max_intent_depth must lie in 2..3")
        if not 1 <= self.max_slot_depth <= tb.MAX_SLOT_DEPTH:
            raise CorpusError("max_slot_depth must lie in 1..3")
        if not (1 <= self.min_len <= self.max_len):
            raise CorpusError("need 1 <= min_len <= max_len")
        if self.nested_fraction > 0 and self.max_len < 2:
            raise CorpusError("nested examples need max_len >= 2")
        if self.num_examples < 1 or self.intents_per_domain < 1 or self.slots_per_domain < 1:
            raise CorpusError("counts must be positive")
        if not self.domains:
            raise CorpusError("at least one domain required")


def build_ontology(config: GeneratorConfig) -> Ontology:
    return Ontology(
        intents={
            d: tuple(f"{d.upper()}_IN{k}" for k in range(config.intents_per_domain))
            for d in config.domains
        },
        slots={
            d: tuple(f"{d.upper()}_SL{k}" for k in range(config.slots_per_domain))
            for d in config.domains
        },
    )


class _Lexicon:
    """Deterministic per-(domain, construct, role) word lists, all disjoint.

    Role-specific sub-lexicons keep the token-to-tree mapping unambiguous: a
    phrase that introduces nested material starts with a word no plain phrase
    can start with, and continuation words never double as openers.
    """

    def __init__(self, domain: str, n_intents: int, n_slots: int):
        d = domain
        self.root = {k: [f"{d}_r{k}q{j}" for j in range(2)] for k in range(n_intents)}
        self.trig = {k: [f"{d}_i{k}t{j}" for j in range(3)] for k in range(n_intents)}
        self.cont = {k: [f"{d}_i{k}c{j}" for j in range(2)] for k in range(n_intents)}
        self.strig = {k: [f"{d}_i{k}s{j}" for j in range(2)] for k in range(n_intents)}
        self.ntrig = {k: [f"{d}_i{k}n{j}" for j in range(2)] for k in range(n_intents)}
        self.head = {k: [f"{d}_s{k}h{j}" for j in range(3)] for k in range(n_slots)}
        self.tail = {k: [f"{d}_s{k}x{j}" for j in range(4)] for k in range(n_slots)}
        self.nhead = {k: [f"{d}_s{k}n{j}" for j in range(2)] for k in range(n_slots)}
        self.ihead = {k: [f"{d}_s{k}i{j}" for j in range(2)] for k in range(n_slots)}
        self.filler = [f"{d}_f{j}" for j in range(6)]


class _DomainGrammar:
    """Samples one domain's trees; every construct is signalled by its first word."""

    def __init__(self, domain: str, config: GeneratorConfig, ontology: Ontology, rng: random.Random):
        self.domain = domain
        self.cfg = config
        self.rng = rng
        self.intents = ontology.intents[domain]
        self.slots = ontology.slots[domain]
        self.lex = _Lexicon(domain, len(self.intents), len(self.slots))

    # Constituent builders return lists of child specs as (surface | node-spec)
    # trees over surfaces; token indices are assigned once the utterance is laid out.

    # sdepth/ilevel are the slot- and intent-ancestor counts the NEW node will
    # have (the root intent counts toward ilevel; slots never add to it).
    # banned carries the slot labels already open on this path: a slot nested
    # inside a same-label slot would make the depth of its tail words
    # surface-ambiguous, capping what any model could learn.

    def slot_phrase(self, budget: int, sdepth: int, ilevel: int,
                    banned: frozenset = frozenset(), force_deep: bool = False):
        """A slot subtree using at most ``budget`` tokens (budget >= 1)."""
        rng, cfg = self.rng, self.cfg
        k = rng.choice([i for i in range(len(self.slots)) if self.slots[i] not in banned])
        label = self.slots[k]
        inner_banned = banned | {label}
        deeper_possible = any(s not in inner_banned for s in self.slots)
        can_deep = (
            sdepth + 2 <= cfg.max_slot_depth and budget >= 2 and deeper_possible
        )
        can_intent = ilevel + 1 <= cfg.max_intent_depth and budget >= 2
        if force_deep and can_deep:
            mode = "deep"
        elif can_deep and rng.random() < cfg.p_deep_slot:
            mode = "deep"
        elif can_intent and rng.random() < cfg.p_intent_in_slot:
            mode = "intent"
        else:
            mode = "plain"
        if mode == "deep":
            children = [rng.choice(self.lex.nhead[k])]
            children.append(
                self.slot_phrase(budget - 1, sdepth + 1, ilevel, inner_banned)
            )
        elif mode == "intent":
            children = [rng.choice(self.lex.ihead[k])]
            children.append(
                self.intent_phrase(budget - 1, sdepth + 1, ilevel, inner_banned)
            )
        else:
            children = [rng.choice(self.lex.head[k])]
        used = _spec_len(children)
        extra = rng.randint(0, min(2, budget - used))
        children.extend(rng.choice(self.lex.tail[k]) for _ in range(extra))
        return (SLOT, label, children)

    def intent_phrase(self, budget: int, sdepth: int, ilevel: int,
                      banned: frozenset = frozenset()):
        """A fine-grained intent subtree using at most ``budget`` tokens."""
        rng, cfg = self.rng, self.cfg
        k = rng.randrange(len(self.intents))
        label = self.intents[k]
        can_deep = ilevel + 2 <= cfg.max_intent_depth and budget >= 2
        can_slot = (
            sdepth + 1 <= cfg.max_slot_depth
            and budget >= 2
            and any(s not in banned for s in self.slots)
        )
        if can_deep and rng.random() < cfg.p_deep_intent:
            mode = "deep"
        elif can_slot and rng.random() < cfg.p_slot:
            mode = "slot"
        else:
            mode = "bare"
        if mode == "deep":
            children = [rng.choice(self.lex.ntrig[k])]
            children.append(self.intent_phrase(budget - 1, sdepth, ilevel + 1, banned))
        elif mode == "slot":
            children = [rng.choice(self.lex.strig[k])]
            children.append(self.slot_phrase(budget - 1, sdepth, ilevel + 1, banned))
        else:
            children = [rng.choice(self.lex.trig[k])]
            if budget >= 2 and rng.random() < 0.3:
                children.append(rng.choice(self.lex.cont[k]))
        return (INTENT, label, children)

    def utterance(self, nested: bool):
        rng, cfg = self.rng, self.cfg
        target = rng.randint(cfg.min_len, cfg.max_len)
        k = rng.randrange(len(self.intents))
        root_label = self.intents[k]
        children: list = [rng.choice(self.lex.root[k])]

        if nested:
            budget = target - _spec_len(children)
            # ensure at least one nested construct (fine intent or stacked slot)
            kinds = ["intent"]
            if cfg.max_slot_depth >= 2 and budget >= 2 and len(self.slots) >= 2:
                kinds.append("deep_slot")
            kind = rng.choice(kinds) if budget >= 2 else "intent"
            if kind == "deep_slot":
                children.append(self.slot_phrase(budget, 0, 1, force_deep=True))
            else:
                children.append(self.intent_phrase(max(1, budget), 0, 1))

        while _spec_len(children) < target:
            budget = target - _spec_len(children)
            r = rng.random()
            if nested and budget >= 2 and r < cfg.p_slot:
                children.append(self.slot_phrase(budget, 0, 1))
            elif nested and budget >= 2 and r < cfg.p_slot + cfg.p_intent:
                children.append(self.intent_phrase(budget, 0, 1))
            elif not nested and budget >= 2 and r < cfg.p_slot:
                # flat examples may still carry single-level slots
                k2 = rng.randrange(len(self.slots))
                phrase = [rng.choice(self.lex.head[k2])]
                phrase.extend(
                    rng.choice(self.lex.tail[k2])
                    for _ in range(rng.randint(0, min(2, budget - 1)))
                )
                children.append((SLOT, self.slots[k2], phrase))
            else:
                children.append(rng.choice(self.lex.filler))
        return (INTENT, root_label, children)


def _spec_len(spec) -> int:
    if isinstance(spec, str):
        return 1
    if isinstance(spec, list):
        return sum(_spec_len(c) for c in spec)
    return _spec_len(spec[2])


def _materialize(spec, counter: list[int]):
    if isinstance(spec, str):
        tok = Token(counter[0], spec)
        counter[0] += 1
        return tok
    kind, label, children = spec
    return SemanticNode(kind, label, tuple(_materialize(c, counter) for c in children))


def generate_synthetic(config: GeneratorConfig) -> Dataset:
    """Sample a deterministic synthetic corpus.

    Exactly round(nested_fraction * n) examples are nested (fine-grained
    intents or stacked slots present); every tree is validated and
    decompose/reconstruct-safe at generation time.
    """
    rng = random.Random(config.seed)
    ontology = build_ontology(config)
    grammars = {
        d: _DomainGrammar(d, config, ontology, rng) for d in config.domains
    }
    n = config.num_examples
    n_nested = round(config.nested_fraction * n)
    flags = [i < n_nested for i in range(n)]
    rng.shuffle(flags)

    examples = []
    for i in range(n):
        domain = config.domains[i % len(config.domains)]
        grammar = grammars[domain]
        while True:
            spec = grammar.utterance(nested=flags[i])
            counter = [0]
            root = _materialize(spec, counter)
            tree = SemanticTree(tokens=tuple(root.tokens()), root=root)
            tb.validate_tree(tree)
            frame = dc.decompose(tree)  # raises NonInvertibleTree on bad draws
            if dc.is_nested(tree) != flags[i]:
                continue  # nested draw degenerated to flat (budget ran out); redraw
            rebuilt = dc.reconstruct(frame, tree.surfaces)
            if rebuilt != tree:
                raise CorpusError(f"generator produced a non-round-tripping tree: {tb.serialize(tree)}")
            break
        examples.append(
            Example(f"syn-{i:06d}", config.locale, domain, tree.surfaces, tree, frame)
        )
    examples.sort(key=lambda ex: ex.id)
    return Dataset(examples, name=f"synthetic-seed{config.seed}")


# --- split protocols ---------------------------------------------------------------


@dataclass(frozen=True)
class FewShotSplit:
    source_train: Dataset
    target_finetune: Dataset
    target_test: Dataset


def few_shot_split(
    dataset: Dataset, target_domain: str, fraction: float, seed: int
) -> FewShotSplit:
    """Hold out one domain: train on the rest, fine-tune on a seeded sample of
    the target pool (floor of fraction, at least 1), test on the remainder."""
    if not 0.0 < fraction <= 1.0:
        raise CorpusError(f"fraction must lie in (0, 1], got {fraction}")
    if target_domain not in {ex.domain for ex in dataset}:
        raise UnknownDomain(f"domain {target_domain!r} not present in dataset")
    target_pool = [ex for ex in dataset if ex.domain == target_domain]
    source = [ex for ex in dataset if ex.domain != target_domain]
    if not target_pool:
        raise EmptyTarget(f"no examples for target domain {target_domain!r}")
    k = max(1, int(fraction * len(target_pool)))
    picked_ids = set(
        ex.id for ex in random.Random(seed).sample(target_pool, k)
    )
    finetune = [ex for ex in target_pool if ex.id in picked_ids]
    test = [ex for ex in target_pool if ex.id not in picked_ids]
    return FewShotSplit(
        Dataset(source, name=f"source-not-{target_domain}"),
        Dataset(finetune, name=f"{target_domain}-finetune-{fraction}"),
        Dataset(test, name=f"{target_domain}-test"),
    )


# --- vocabularies -------------------------------------------------------------------

CLS, PAD, UNK = "<cls>", "<pad>", "<unk>"
RESERVED = (CLS, PAD, UNK)
CLS_ID, PAD_ID, UNK_ID = 0, 1, 2


class Vocab:
    """Symbol table with fixed reserved prefix (<cls>=0, <pad>=1, <unk>=2)."""

    def __init__(self, symbols: Sequence[str]):
        if tuple(symbols[:3]) != RESERVED:
            symbols = list(RESERVED) + [s for s in symbols if s not in RESERVED]
        self.symbols = tuple(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise CorpusError("duplicate symbols in vocab")

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, sym):
        return sym in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def encode(self, sym: str) -> int:
        return self.index.get(sym, UNK_ID)

    def decode(self, idx: int) -> str:
        return self.symbols[idx]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "Vocab":
        return Vocab(Path(path).read_text(encoding="utf-8").splitlines())

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Vocabs:
    token: Vocab
    coarse: Vocab
    intent_tag: Vocab
    slot_tag: Vocab


def _freq_sorted(counts: dict[str, int]) -> list[str]:
    return sorted(counts, key=lambda s: (-counts[s], s))


def build_vocabs(dataset: Dataset) -> Vocabs:
    """Frequency-then-lexicographic vocabularies over tokens, coarse intents,
    intent tags, and slot tags.  'O' is always present in both tag vocabs."""
    if len(dataset) == 0:
        raise CorpusError("cannot build vocabs from an empty dataset")
    tok_counts: dict[str, int] = {}
    coarse_counts: dict[str, int] = {}
    intent_counts: dict[str, int] = {dc.OUTSIDE: 0}
    slot_counts: dict[str, int] = {dc.OUTSIDE: 0}
    for ex in dataset:
        for t in ex.tokens:
            tok_counts[t] = tok_counts.get(t, 0) + 1
        coarse_counts[ex.frame.coarse_intent] = (
            coarse_counts.get(ex.frame.coarse_intent, 0) + 1
        )
        for tag in ex.frame.intent_tags:
            intent_counts[tag] = intent_counts.get(tag, 0) + 1
        for stack in ex.frame.slot_stacks:
            for tag in stack:
                slot_counts[tag] = slot_counts.get(tag, 0) + 1
    return Vocabs(
        token=Vocab(list(RESERVED) + _freq_sorted(tok_counts)),
        coarse=Vocab(list(RESERVED) + _freq_sorted(coarse_counts)),
        intent_tag=Vocab(list(RESERVED) + _freq_sorted(intent_counts)),
        slot_tag=Vocab(list(RESERVED) + _freq_sorted(slot_counts)),
    )


# --- exhaustive small-tree enumeration ----------------------------------------------


def _count_nodes(node: SemanticNode) -> int:
    return sum(1 for _ in node.nodes())


def enumerate_small_trees(
    max_tokens: int,
    intent_labels: Sequence[str] = ("IA", "IB"),
    slot_labels: Sequence[str] = ("SA", "SB"),
    max_nodes: int = 4,
) -> Iterator[SemanticTree]:
    """Yield every decomposable tree over 1..max_tokens tokens within the
    depth caps and a total node budget, labels drawn from small inventories.

    The node budget keeps the space exhaustively enumerable (the unrestricted
    space grows by ~30x per token); four nodes suffice for every pairwise and
    triple structural interaction, including full-depth slot stacks and
    adjacent second-level intents.  Token surfaces are w0..w{n-1}.  Trees
    whose flattened form would not reconstruct (NonInvertibleTree) are
    outside the round-trip domain and are skipped.
    """

    def node_options(start, length, ilevel, sdepth, kind, nodes_left):
        labels = intent_labels if kind == INTENT else slot_labels
        for children in child_seqs(start, length, ilevel, sdepth, nodes_left - 1):
            for label in labels:
                yield SemanticNode(kind, label, children)

    def child_seqs(start, length, ilevel, sdepth, nodes_left):
        # all ways to split [start, start+length) into a sequence of parts
        if length == 0:
            yield ()
            return
        for size in range(1, length + 1):
            heads: list = [Token(start, f"w{start}")] if size == 1 else []
            if nodes_left > 0:
                if ilevel < tb.MAX_INTENT_DEPTH:
                    heads.extend(
                        node_options(start, size, ilevel + 1, sdepth, INTENT, nodes_left)
                    )
                if sdepth < tb.MAX_SLOT_DEPTH:
                    heads.extend(
                        node_options(start, size, ilevel, sdepth + 1, SLOT, nodes_left)
                    )
            for head in heads:
                used = 0 if isinstance(head, Token) else _count_nodes(head)
                for rest in child_seqs(
                    start + size, length - size, ilevel, sdepth, nodes_left - used
                ):
                    yield (head,) + rest

    for n in range(1, max_tokens + 1):
        for root in node_options(0, n, 1, 0, INTENT, max_nodes):
            tree = SemanticTree(tokens=tuple(root.tokens()), root=root)
            try:
                dc.decompose(tree)
            except dc.NonInvertibleTree:
                continue
            yield tree
