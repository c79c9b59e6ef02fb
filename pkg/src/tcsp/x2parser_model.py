"""Fertility-based non-autoregressive parser.

One shared encoder feeds four heads: a sentence-level coarse intent
classifier (on the CLS state), a per-token fine-grained intent tagger, a
per-token fertility classifier (how many slot labels the token carries,
1..3), and a slot tagger.  The slot tagger runs on CopyHiddens output: each
token's encoder state duplicated fertility-many times, passed through a small
transformer (the slot encoder) with its own positions, then classified.
Decoding is a fixed two-stage forward pass regardless of output length.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from . import decomposer as dc
from .corpus import PAD_ID, Vocab, Vocabs
from .neural_core import (
    EncoderConfig,
    EncoderLayer,
    NeuralError,
    TransformerEncoder,
    cross_entropy,
)


class FertilityOutOfRange(NeuralError):
    pass


@dataclass(frozen=True)
class SlotEncoderConfig:
    """Slot-encoder block: reference setup is 1 layer, 4 heads, width 400,
    feed-forward (filter) 64; desk-scale runs shrink the width."""

    n_layers: int = 1
    n_heads: int = 4
    d_model: int = 400
    d_ff: int = 64
    dropout: float = 0.0


@dataclass(frozen=True)
class X2ParserConfig:
    encoder: EncoderConfig
    slot_encoder: SlotEncoderConfig = SlotEncoderConfig()
    max_fertility: int = 3
    coarse_size: int = 0  # 0 = derive from vocabs at construction
    intent_tag_size: int = 0
    slot_tag_size: int = 0
    # loss weights: coarse, fine intent, fertility, slot
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.max_fertility < 1:
            raise NeuralError("max_fertility must be >= 1")
        if len(self.loss_weights) != 4:
            raise NeuralError("loss_weights must have 4 entries")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "X2ParserConfig":
        return X2ParserConfig(
            encoder=EncoderConfig(**d["encoder"]),
            slot_encoder=SlotEncoderConfig(**d["slot_encoder"]),
            max_fertility=d["max_fertility"],
            coarse_size=d["coarse_size"],
            intent_tag_size=d["intent_tag_size"],
            slot_tag_size=d["slot_tag_size"],
            loss_weights=tuple(d["loss_weights"]),
        )


@dataclass
class X2ParserOutputs:
    coarse_logits: torch.Tensor  # (B, |coarse|)
    intent_logits: torch.Tensor  # (B, T, |intent tags|)
    fertility_logits: torch.Tensor  # (B, T, max_fertility)
    slot_logits: torch.Tensor  # (B, M, |slot tags|), M = max row fertility sum
    slot_mask: torch.Tensor  # (B, M) bool


# --- batching helpers (shared with the layered baseline) ---------------------------


@dataclass
class Batch:
    ids: torch.Tensor
    mask: torch.Tensor
    coarse: torch.Tensor
    intent_tags: torch.Tensor
    fertility: torch.Tensor  # gold fertility minus 1 (class index), PAD rows 0
    slot_flat: torch.Tensor  # flattened gold slot tags per row, padded
    slot_mask: torch.Tensor

    def __len__(self):
        return self.ids.shape[0]


def encode_tokens(vocab: Vocab, token_seqs: Sequence[Sequence[str]]):
    """Pad a batch of token sequences into (ids, mask) tensors."""
    if not token_seqs:
        raise NeuralError("empty batch")
    width = max(len(seq) for seq in token_seqs)
    ids = torch.full((len(token_seqs), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros(len(token_seqs), width, dtype=torch.bool)
    for r, seq in enumerate(token_seqs):
        for c, tok in enumerate(seq):
            ids[r, c] = vocab.encode(tok)
        mask[r, : len(seq)] = True
    return ids, mask


def make_batch(vocabs: Vocabs, examples, max_fertility: int = dc.MAX_FERTILITY) -> Batch:
    """Tensorize examples with gold targets (teacher-forced fertilities)."""
    ids, mask = encode_tokens(vocabs.token, [ex.tokens for ex in examples])
    b, t = ids.shape
    coarse = torch.tensor(
        [vocabs.coarse.encode(ex.frame.coarse_intent) for ex in examples]
    )
    intent = torch.full((b, t), PAD_ID, dtype=torch.long)
    fert = torch.zeros(b, t, dtype=torch.long)
    flats = []
    for r, ex in enumerate(examples):
        for c, tag in enumerate(ex.frame.intent_tags):
            intent[r, c] = vocabs.intent_tag.encode(tag)
        fertilities = dc.fertility_of(ex.frame)
        if max(fertilities) > max_fertility:
            raise FertilityOutOfRange(
                f"example {ex.id} needs fertility {max(fertilities)} > {max_fertility}"
            )
        fert[r, : len(ex.tokens)] = torch.tensor(fertilities) - 1
        flats.append(
            [vocabs.slot_tag.encode(tag) for tag in dc.flatten_slot_targets(ex.frame)]
        )
    m = max(len(f) for f in flats)
    slot_flat = torch.full((b, m), PAD_ID, dtype=torch.long)
    slot_mask = torch.zeros(b, m, dtype=torch.bool)
    for r, f in enumerate(flats):
        slot_flat[r, : len(f)] = torch.tensor(f)
        slot_mask[r, : len(f)] = True
    return Batch(ids, mask, coarse, intent, fert, slot_flat, slot_mask)


def copy_hiddens(states: torch.Tensor, fertilities: torch.Tensor, mask: torch.Tensor):
    """Duplicate each token's state fertility-many times, order-preserving.

    states: (B, T, d); fertilities: (B, T) ints >= 1; mask: (B, T) bool.
    Returns (copied (B, M, d), copy_mask (B, M)) with M = max row sum; each
    row r holds fertilities[r, i] copies of states[r, i] for unmasked i.
    """
    if ((fertilities < 1) & mask).any() or (fertilities > dc.MAX_FERTILITY).any():
        raise FertilityOutOfRange(
            f"fertilities must lie in 1..{dc.MAX_FERTILITY} on unmasked positions"
        )
    b, t, d = states.shape
    eff = fertilities * mask  # padded positions contribute zero copies
    lengths = eff.sum(dim=1)
    m = int(lengths.max().item())
    copied = states.new_zeros(b, m, d)
    copy_mask = torch.zeros(b, m, dtype=torch.bool, device=states.device)
    for r in range(b):
        row = states[r].repeat_interleave(eff[r], dim=0)
        copied[r, : row.shape[0]] = row
        copy_mask[r, : row.shape[0]] = True
    return copied, copy_mask


class X2Parser(nn.Module):
    def __init__(self, config: X2ParserConfig, vocabs: Vocabs):
        super().__init__()
        sizes = {
            "coarse_size": len(vocabs.coarse),
            "intent_tag_size": len(vocabs.intent_tag),
            "slot_tag_size": len(vocabs.slot_tag),
        }
        for name, actual in sizes.items():
            declared = getattr(config, name)
            if declared not in (0, actual):
                raise NeuralError(f"{name}={declared} but vocab has {actual} symbols")
        if config.encoder.vocab_size != len(vocabs.token):
            raise NeuralError("encoder vocab_size must match token vocab")
        self.config = X2ParserConfig(
            encoder=config.encoder,
            slot_encoder=config.slot_encoder,
            max_fertility=config.max_fertility,
            loss_weights=config.loss_weights,
            **sizes,
        )
        self.vocabs = vocabs
        enc_cfg = config.encoder
        se_cfg = config.slot_encoder
        self.encoder = TransformerEncoder(enc_cfg)
        d = enc_cfg.d_model
        self.coarse_head = nn.Linear(d, sizes["coarse_size"])
        self.intent_head = nn.Linear(d, sizes["intent_tag_size"])
        self.fertility_head = nn.Linear(d, config.max_fertility)
        self.slot_proj = (
            nn.Identity() if se_cfg.d_model == d else nn.Linear(d, se_cfg.d_model)
        )
        # copied states get their own positions over 1..3*max_len
        self.slot_pos = nn.Embedding(
            enc_cfg.max_len * config.max_fertility + 1, se_cfg.d_model
        )
        self.slot_layers = nn.ModuleList(
            EncoderLayer(se_cfg.d_model, se_cfg.n_heads, se_cfg.d_ff, se_cfg.dropout)
            for _ in range(se_cfg.n_layers)
        )
        self.slot_head = nn.Linear(se_cfg.d_model, sizes["slot_tag_size"])
        self.decode_stages = 0  # sequential model applications in the last decode

    # --- heads -----------------------------------------------------------------

    def encode(self, ids, mask):
        return self.encoder(ids, mask)

    def coarse_intent(self, h_cls):
        return self.coarse_head(h_cls)

    def fine_intent(self, states):
        return self.intent_head(states)

    def predict_fertility(self, states):
        return self.fertility_head(states)

    def slot_filling(self, copied, copy_mask):
        x = self.slot_proj(copied)
        positions = torch.arange(x.shape[1], device=x.device).unsqueeze(0)
        x = x + self.slot_pos(positions)
        for layer in self.slot_layers:
            x = layer(x, mask=copy_mask)
        return self.slot_head(x)

    # --- training --------------------------------------------------------------

    def prepare_batch(self, examples) -> Batch:
        return make_batch(self.vocabs, examples, self.config.max_fertility)

    def forward(self, ids, mask, fertilities) -> X2ParserOutputs:
        h_cls, states = self.encode(ids, mask)
        copied, copy_mask = copy_hiddens(states, fertilities, mask)
        return X2ParserOutputs(
            coarse_logits=self.coarse_intent(h_cls),
            intent_logits=self.fine_intent(states),
            fertility_logits=self.predict_fertility(states),
            slot_logits=self.slot_filling(copied, copy_mask),
            slot_mask=copy_mask,
        )

    def loss(self, batch: Batch) -> torch.Tensor:
        """Weighted multi-task loss; slot targets use gold fertilities."""
        out = self.forward(batch.ids, batch.mask, batch.fertility + 1)
        if out.slot_logits.shape[1] != batch.slot_flat.shape[1]:
            raise NeuralError(
                "slot logits do not align with gold flattened targets"
            )
        w = self.config.loss_weights
        return (
            w[0] * cross_entropy(out.coarse_logits, batch.coarse)
            + w[1] * cross_entropy(out.intent_logits, batch.intent_tags, batch.mask)
            + w[2] * cross_entropy(out.fertility_logits, batch.fertility, batch.mask)
            + w[3] * cross_entropy(out.slot_logits, batch.slot_flat, batch.slot_mask)
        )

    # --- inference ----------------------------------------------------------------

    @torch.no_grad()
    def parse_batch(self, token_seqs: Sequence[Sequence[str]], repair: bool = False):
        """Greedy decode: argmax every head, slots under predicted fertility.

        Returns raw frames (possibly BIO-ill-formed); ``repair`` coerces
        illegal I- tags to B- before returning.
        """
        self.eval()
        ids, mask = encode_tokens(self.vocabs.token, token_seqs)
        self.decode_stages = 0
        h_cls, states = self.encode(ids, mask)
        coarse_ids = self.coarse_intent(h_cls).argmax(-1)
        intent_ids = self.fine_intent(states).argmax(-1)
        fert = self.predict_fertility(states).argmax(-1) + 1
        self.decode_stages += 1  # encoder + token-level heads: one parallel stage
        copied, copy_mask = copy_hiddens(states, fert, mask)
        slot_ids = self.slot_filling(copied, copy_mask).argmax(-1)
        self.decode_stages += 1  # slot encoder + classifier: second stage

        frames = []
        for r, seq in enumerate(token_seqs):
            n = len(seq)
            fertilities = fert[r, :n].tolist()
            flat = [
                self.vocabs.slot_tag.decode(i)
                for i in slot_ids[r, : sum(fertilities)].tolist()
            ]
            frame = dc.DecomposedFrame(
                coarse_intent=self.vocabs.coarse.decode(int(coarse_ids[r])),
                intent_tags=tuple(
                    self.vocabs.intent_tag.decode(i) for i in intent_ids[r, :n].tolist()
                ),
                slot_stacks=dc.regroup_slots(flat, fertilities),
            )
            frames.append(dc.repair_bio(frame) if repair else frame)
        return frames

    def parse_one(self, tokens: Sequence[str], repair: bool = False):
        """Single-utterance decode; returns (frame, sequential_stage_count)."""
        frame = self.parse_batch([tokens], repair=repair)[0]
        return frame, self.decode_stages

    def state_payload(self) -> dict:
        return {
            "family": "x2parser",
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
    def from_payload(payload: dict) -> "X2Parser":
        vocabs = Vocabs(
            token=Vocab(payload["vocab_symbols"]["token"]),
            coarse=Vocab(payload["vocab_symbols"]["coarse"]),
            intent_tag=Vocab(payload["vocab_symbols"]["intent_tag"]),
            slot_tag=Vocab(payload["vocab_symbols"]["slot_tag"]),
        )
        model = X2Parser(X2ParserConfig.from_dict(payload["config"]), vocabs)
        model.load_state_dict(payload["state_dict"])
        return model
