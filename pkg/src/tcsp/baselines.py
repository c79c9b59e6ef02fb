"""Comparison systems: a layered slot tagger and a generate-and-copy seq2seq.

The layered parser keeps the shared encoder and both intent heads of the
fertility model but predicts slots with stacked per-depth tagging layers
(layer j labels depth-j slots, consuming layer j-1's hidden states).  The
seq2seq parser generates the bracketed tree autoregressively over a symbol
vocabulary of open-tags, a closer, and per-position COPY markers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from . import decomposer as dc
from . import treebank as tb
from .corpus import PAD_ID, Dataset, Vocab, Vocabs
from .neural_core import (
    EncoderConfig,
    EncoderLayer,
    NeuralError,
    TransformerDecoder,
    TransformerEncoder,
    cross_entropy,
)
from .x2parser_model import Batch, encode_tokens, make_batch

OUTSIDE = dc.OUTSIDE


class IllFormedSequence(ValueError):
    """A generated symbol sequence that does not delinearize to a tree."""


# --- neural layered model -----------------------------------------------------------


@dataclass(frozen=True)
class NLMConfig:
    encoder: EncoderConfig
    depth_layers: int = dc.MAX_FERTILITY  # one tagging layer per slot depth
    layer_heads: int = 4
    layer_d_ff: int = 64

    def __post_init__(self):
        if self.depth_layers != dc.MAX_FERTILITY:
            raise NeuralError(
                f"depth_layers must equal the slot depth cap {dc.MAX_FERTILITY}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "NLMConfig":
        return NLMConfig(
            encoder=EncoderConfig(**d["encoder"]),
            depth_layers=d["depth_layers"],
            layer_heads=d["layer_heads"],
            layer_d_ff=d["layer_d_ff"],
        )


def make_nlm_targets(vocabs: Vocabs, examples) -> torch.Tensor:
    """(B, depth, T) gold tags: the depth-j stack entry, or O past the stack."""
    width = max(len(ex.tokens) for ex in examples)
    out = torch.full((len(examples), dc.MAX_FERTILITY, width), PAD_ID, dtype=torch.long)
    for r, ex in enumerate(examples):
        for c, stack in enumerate(ex.frame.slot_stacks):
            for d in range(dc.MAX_FERTILITY):
                out[r, d, c] = vocabs.slot_tag.encode(
                    stack[d] if len(stack) > d else OUTSIDE
                )
    return out


class NeuralLayeredParser(nn.Module):
    """Slot prediction via stacked per-depth layers; intents as in X2Parser."""

    def __init__(self, config: NLMConfig, vocabs: Vocabs):
        super().__init__()
        if config.encoder.vocab_size != len(vocabs.token):
            raise NeuralError("encoder vocab_size must match token vocab")
        self.config = config
        self.vocabs = vocabs
        d = config.encoder.d_model
        self.encoder = TransformerEncoder(config.encoder)
        self.coarse_head = nn.Linear(d, len(vocabs.coarse))
        self.intent_head = nn.Linear(d, len(vocabs.intent_tag))
        self.depth_blocks = nn.ModuleList(
            EncoderLayer(d, config.layer_heads, config.layer_d_ff)
            for _ in range(config.depth_layers)
        )
        self.depth_heads = nn.ModuleList(
            nn.Linear(d, len(vocabs.slot_tag)) for _ in range(config.depth_layers)
        )
        self.decode_stages = 0

    def slot_predict(self, states, mask):
        """Per-depth tag logits; layer j feeds on layer j-1's hidden states."""
        logits = []
        x = states
        for block, head in zip(self.depth_blocks, self.depth_heads):
            x = block(x, mask=mask)
            logits.append(head(x))
        return logits

    def prepare_batch(self, examples):
        batch = make_batch(self.vocabs, examples)
        return batch, make_nlm_targets(self.vocabs, examples)

    def loss(self, prepared) -> torch.Tensor:
        batch, depth_targets = prepared
        h_cls, states = self.encoder(batch.ids, batch.mask)
        total = cross_entropy(self.coarse_head(h_cls), batch.coarse)
        total = total + cross_entropy(
            self.intent_head(states), batch.intent_tags, batch.mask
        )
        for d, logits in enumerate(self.slot_predict(states, batch.mask)):
            total = total + cross_entropy(logits, depth_targets[:, d], batch.mask)
        return total

    @torch.no_grad()
    def parse_batch(self, token_seqs: Sequence[Sequence[str]], repair: bool = False):
        self.eval()
        ids, mask = encode_tokens(self.vocabs.token, token_seqs)
        self.decode_stages = 0
        h_cls, states = self.encoder(ids, mask)
        coarse_ids = self.coarse_head(h_cls).argmax(-1)
        intent_ids = self.intent_head(states).argmax(-1)
        self.decode_stages += 1
        depth_ids = []
        x = states
        for block, head in zip(self.depth_blocks, self.depth_heads):
            x = block(x, mask=mask)
            depth_ids.append(head(x).argmax(-1))
            self.decode_stages += 1  # each depth layer waits on the previous

        frames = []
        for r, seq in enumerate(token_seqs):
            n = len(seq)
            stacks = []
            for c in range(n):
                tags = [
                    self.vocabs.slot_tag.decode(int(depth_ids[d][r, c]))
                    for d in range(dc.MAX_FERTILITY)
                ]
                while len(tags) > 1 and tags[-1] == OUTSIDE:
                    tags.pop()
                stacks.append(tuple(tags))
            frame = dc.DecomposedFrame(
                coarse_intent=self.vocabs.coarse.decode(int(coarse_ids[r])),
                intent_tags=tuple(
                    self.vocabs.intent_tag.decode(i) for i in intent_ids[r, :n].tolist()
                ),
                slot_stacks=tuple(stacks),
            )
            frames.append(dc.repair_bio(frame) if repair else frame)
        return frames

    def parse_one(self, tokens: Sequence[str], repair: bool = False):
        frame = self.parse_batch([tokens], repair=repair)[0]
        return frame, self.decode_stages

    def state_payload(self) -> dict:
        return {
            "family": "nlm",
            "config": self.config.to_dict(),
            "state_dict": self.state_dict(),
            "vocab_symbols": {
                "token": list(self.vocabs.token.symbols),
                "coarse": list(self.vocabs.coarse.symbols),
                "intent_tag": list(self.vocabs.intent_tag.symbols),
                "slot_tag": list(self.vocabs.slot_tag.symbols),
            },
        }

    @staticmethod
    def from_payload(payload: dict) -> "NeuralLayeredParser":
        vs = payload["vocab_symbols"]
        vocabs = Vocabs(
            token=Vocab(vs["token"]),
            coarse=Vocab(vs["coarse"]),
            intent_tag=Vocab(vs["intent_tag"]),
            slot_tag=Vocab(vs["slot_tag"]),
        )
        model = NeuralLayeredParser(NLMConfig.from_dict(payload["config"]), vocabs)
        model.load_state_dict(payload["state_dict"])
        return model


# --- tree linearization for seq2seq ---------------------------------------------------

BOS, EOS = "<bos>", "<eos>"
CLOSE = "]"


def copy_symbol(index: int) -> str:
    return f"COPY@{index}"


def linearize_tree(tree: tb.SemanticTree) -> tuple[str, ...]:
    """Canonical serialization with token leaves replaced by COPY@position."""

    def render(node: tb.SemanticNode):
        yield f"[{node.kind}:{node.label}"
        for child in node.children:
            if isinstance(child, tb.Token):
                yield copy_symbol(child.index)
            else:
                yield from render(child)
        yield CLOSE

    return tuple(render(tree.root))


def delinearize(symbols: Sequence[str], tokens: Sequence[str]) -> tb.SemanticTree:
    """Inverse of linearize_tree.

    COPY indices must appear in order 0..n-1 exactly once each (the tree has
    to cover the utterance); any structural defect raises IllFormedSequence.
    """
    expected = 0
    atoms = []
    for sym in symbols:
        if sym.startswith("COPY@"):
            try:
                idx = int(sym[5:])
            except ValueError:
                raise IllFormedSequence(f"bad copy symbol {sym!r}") from None
            if idx != expected:
                raise IllFormedSequence(
                    f"copy index {idx} out of order (expected {expected})"
                )
            if idx >= len(tokens):
                raise IllFormedSequence(f"copy index {idx} beyond utterance")
            atoms.append(tokens[idx])
            expected += 1
        else:
            atoms.append(sym)
    if expected != len(tokens):
        raise IllFormedSequence(
            f"generated tree covers {expected} of {len(tokens)} tokens"
        )
    try:
        return tb.parse_top(" ".join(atoms))
    except tb.TreebankError as exc:
        raise IllFormedSequence(str(exc)) from exc


def build_target_vocab(dataset: Dataset, max_input_len: int) -> Vocab:
    """Symbol inventory: specials, open-tags seen in data, closer, COPY@0..max."""
    opens = sorted(
        {
            f"[{node.kind}:{node.label}"
            for ex in dataset
            for node in ex.tree.root.nodes()
        }
    )
    symbols = [BOS, EOS, CLOSE] + opens + [copy_symbol(i) for i in range(max_input_len)]
    return Vocab(list(Vocab([]).symbols) + symbols)


# --- seq2seq parser ---------------------------------------------------------------------


@dataclass(frozen=True)
class Seq2SeqConfig:
    encoder: EncoderConfig
    decoder_layers: int = 1
    decoder_heads: int = 4
    decoder_d_ff: int = 64
    max_decode_len: int = 96

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "Seq2SeqConfig":
        return Seq2SeqConfig(
            encoder=EncoderConfig(**d["encoder"]),
            decoder_layers=d["decoder_layers"],
            decoder_heads=d["decoder_heads"],
            decoder_d_ff=d["decoder_d_ff"],
            max_decode_len=d["max_decode_len"],
        )


class Seq2SeqParser(nn.Module):
    """Greedy autoregressive tree generator with positional copy symbols."""

    def __init__(self, config: Seq2SeqConfig, token_vocab: Vocab, target_vocab: Vocab):
        super().__init__()
        if config.encoder.vocab_size != len(token_vocab):
            raise NeuralError("encoder vocab_size must match token vocab")
        self.config = config
        self.token_vocab = token_vocab
        self.target_vocab = target_vocab
        self.bos_id = target_vocab.encode(BOS)
        self.eos_id = target_vocab.encode(EOS)
        self.encoder = TransformerEncoder(config.encoder)
        self.decoder = TransformerDecoder(
            vocab_size=len(target_vocab),
            d_model=config.encoder.d_model,
            n_heads=config.decoder_heads,
            n_layers=config.decoder_layers,
            d_ff=config.decoder_d_ff,
            max_len=config.max_decode_len,
            dropout=config.encoder.dropout,
            seed=config.encoder.seed,
        )
        self.decode_steps = 0

    def prepare_batch(self, examples):
        ids, mask = encode_tokens(self.token_vocab, [ex.tokens for ex in examples])
        seqs = [
            [self.target_vocab.encode(s) for s in linearize_tree(ex.tree)]
            for ex in examples
        ]
        longest = max(len(s) for s in seqs) + 1  # room for BOS/EOS shift
        if longest > self.config.max_decode_len:
            raise NeuralError(
                f"gold linearization length {longest} exceeds max_decode_len "
                f"{self.config.max_decode_len}"
            )
        b = len(examples)
        tgt_in = torch.full((b, longest), PAD_ID, dtype=torch.long)
        tgt_out = torch.full((b, longest), PAD_ID, dtype=torch.long)
        tgt_mask = torch.zeros(b, longest, dtype=torch.bool)
        for r, seq in enumerate(seqs):
            tgt_in[r, 0] = self.bos_id
            tgt_in[r, 1 : len(seq) + 1] = torch.tensor(seq)
            tgt_out[r, : len(seq)] = torch.tensor(seq)
            tgt_out[r, len(seq)] = self.eos_id
            tgt_mask[r, : len(seq) + 1] = True
        return ids, mask, tgt_in, tgt_out, tgt_mask

    def loss(self, prepared) -> torch.Tensor:
        ids, mask, tgt_in, tgt_out, tgt_mask = prepared
        _, memory = self.encoder(ids, mask)
        logits = self.decoder(tgt_in, memory, memory_mask=mask)
        return cross_entropy(logits, tgt_out, tgt_mask)

    @torch.no_grad()
    def generate(self, token_seqs: Sequence[Sequence[str]]):
        """Greedy decode; returns (symbol sequences, per-example step counts)."""
        self.eval()
        ids, mask = encode_tokens(self.token_vocab, token_seqs)
        b = ids.shape[0]
        _, memory = self.encoder(ids, mask)
        prefix = torch.full((b, 1), self.bos_id, dtype=torch.long)
        finished = torch.zeros(b, dtype=torch.bool)
        steps = torch.zeros(b, dtype=torch.long)
        outputs: list[list[int]] = [[] for _ in range(b)]
        while prefix.shape[1] <= self.config.max_decode_len - 1 and not finished.all():
            logits = self.decoder(prefix, memory, memory_mask=mask)
            nxt = logits[:, -1].argmax(-1)
            for r in range(b):
                if not finished[r]:
                    steps[r] += 1  # one sequential decoder application per symbol
                    if int(nxt[r]) == self.eos_id:
                        finished[r] = True
                    else:
                        outputs[r].append(int(nxt[r]))
            prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
        symbol_seqs = [
            [self.target_vocab.decode(i) for i in out] for out in outputs
        ]
        self.decode_steps = int(steps.max().item()) if b else 0
        return symbol_seqs, steps.tolist()

    @torch.no_grad()
    def parse_batch(self, token_seqs: Sequence[Sequence[str]], repair: bool = False):
        """Frames via generate + delinearize + decompose; None on failure."""
        symbol_seqs, _ = self.generate(token_seqs)
        frames = []
        for symbols, tokens in zip(symbol_seqs, token_seqs):
            try:
                tree = delinearize(symbols, tokens)
                frames.append(dc.decompose(tree))
            except (IllFormedSequence, tb.TreebankError, dc.DecomposerError):
                frames.append(None)
        return frames

    def parse_one(self, tokens: Sequence[str], repair: bool = False):
        symbol_seqs, steps = self.generate([tokens])
        try:
            tree = delinearize(symbol_seqs[0], tokens)
            frame = dc.decompose(tree)
        except (IllFormedSequence, tb.TreebankError, dc.DecomposerError):
            frame = None
        return frame, steps[0]

    def state_payload(self) -> dict:
        return {
            "family": "seq2seq",
            "config": self.config.to_dict(),
            "state_dict": self.state_dict(),
            "vocab_symbols": {
                "token": list(self.token_vocab.symbols),
                "target": list(self.target_vocab.symbols),
            },
        }

    @staticmethod
    def from_payload(payload: dict) -> "Seq2SeqParser":
        vs = payload["vocab_symbols"]
        model = Seq2SeqParser(
            Seq2SeqConfig.from_dict(payload["config"]),
            Vocab(vs["token"]),
            Vocab(vs["target"]),
        )
        model.load_state_dict(payload["state_dict"])
        return model
