"""Tree <-> flattened-label conversion.

A SemanticTree is decomposed into three flat layers that together carry the
whole parse:

  * the coarse intent: the root label;
  * one fine-grained intent tag per token (BIO, with a ``-NESTED`` suffix for
    second-level intents, whose enclosing intent's scope is implicit);
  * one slot-tag stack per token, listing the token's slot ancestors
    outermost-first (``(O,)`` outside all slots).

``reconstruct`` inverts ``decompose`` exactly on every tree this module
accepts.  The flattened intent layer cannot represent a handful of degenerate
configurations (see ``decompose`` for the three rejection rules); those trees
raise NonInvertibleTree instead of silently round-tripping to something else.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .treebank import (
    INTENT,
    SLOT,
    DepthExceeded,
    SemanticNode,
    SemanticTree,
    Token,
    validate_tree,
)

OUTSIDE = "O"
NESTED_SUFFIX = "-NESTED"
MAX_FERTILITY = 3


class DecomposerError(ValueError):
    pass


class NonInvertibleTree(DecomposerError):
    """The tree is valid but its flattened form would not reconstruct to it."""


class IllFormedBIO(DecomposerError):
    pass


class ContainmentViolation(DecomposerError):
    pass


class OrphanNested(DecomposerError):
    """A NESTED intent run with no adjacent or enclosing first-level intent."""


class LengthMismatch(DecomposerError):
    pass


@dataclass(frozen=True)
class DecomposedFrame:
    """The three flattened layers for one utterance."""

    coarse_intent: str
    intent_tags: tuple[str, ...]
    slot_stacks: tuple[tuple[str, ...], ...]

    def __len__(self) -> int:
        return len(self.intent_tags)

    def validate(self) -> "DecomposedFrame":
        if len(self.intent_tags) != len(self.slot_stacks):
            raise LengthMismatch(
                f"{len(self.intent_tags)} intent tags vs {len(self.slot_stacks)} slot stacks"
            )
        for stack in self.slot_stacks:
            _check_stack(stack)
        _scan_intent_layer(self.intent_tags)
        _slot_spans_by_depth(self.slot_stacks)
        return self


def _check_stack(stack: Sequence[str]) -> None:
    if not 1 <= len(stack) <= MAX_FERTILITY:
        raise IllFormedBIO(f"slot stack length must be 1..{MAX_FERTILITY}: {stack!r}")
    if OUTSIDE in stack and len(stack) != 1:
        raise IllFormedBIO(f"'O' only allowed as a singleton stack: {stack!r}")


_TAG_RE = re.compile(r"^(?P<bi>[BI])-(?P<label>.+?)(?P<nested>-NESTED)?$")


def _parse_intent_tag(tag: str) -> tuple[str, str, bool]:
    """Return (B|I, label, is_nested); 'O' is handled by callers."""
    m = _TAG_RE.match(tag)
    if not m:
        raise IllFormedBIO(f"malformed intent tag {tag!r}")
    return m.group("bi"), m.group("label"), m.group("nested") is not None


def _parse_slot_tag(tag: str) -> tuple[str, str]:
    m = re.match(r"^([BI])-(.+)$", tag)
    if not m:
        raise IllFormedBIO(f"malformed slot tag {tag!r}")
    return m.group(1), m.group(2)


# --- decompose ----------------------------------------------------------------


def decompose(tree: SemanticTree) -> DecomposedFrame:
    """Flatten a valid tree into its three label layers.

    Raises DepthExceeded for intent nesting beyond two non-root levels and
    NonInvertibleTree for the three configurations the flattened intent layer
    cannot encode unambiguously:

      1. a first-level intent none of whose tokens lie outside its own nested
         intents (its label would appear in no tag);
      2. a second-level intent starting at its parent's first token while the
         preceding token belongs to a different first-level intent (the NESTED
         run would re-attach to the wrong neighbor);
      3. an intent with an equal-span slot descendant (reconstruction always
         places the slot above the intent on ties).
    """
    n = len(tree.tokens)
    stacks: list[list[str]] = [[] for _ in range(n)]
    depth1: list[SemanticNode] = []
    depth2: list[tuple[SemanticNode, SemanticNode]] = []  # (node, depth-1 parent)

    def walk(node: SemanticNode, intent_path: list[SemanticNode]) -> None:
        if node.kind == INTENT:
            level = len(intent_path)  # non-root intent levels so far
            if level == 1:
                depth1.append(node)
            elif level == 2:
                depth2.append((node, intent_path[1]))
            elif level > 2:
                raise DepthExceeded("more than two nested intent levels")
            intent_path = intent_path + [node]
        else:
            start = node.span[0]
            for tok in node.tokens():
                bi = "B" if tok.index == start else "I"
                stacks[tok.index].append(f"{bi}-{node.label}")
        for child in node.children:
            if isinstance(child, SemanticNode):
                walk(child, intent_path)

    walk(tree.root, [])

    intent_tags = [OUTSIDE] * n
    claimed = [False] * n  # token lies inside some second-level intent
    for node, _parent in depth2:
        lo, hi = node.span
        for i in range(lo, hi + 1):
            claimed[i] = True
            bi = "B" if i == lo else "I"
            intent_tags[i] = f"{bi}-{node.label}{NESTED_SUFFIX}"

    owner: list[SemanticNode | None] = [None] * n  # first-level intent per token
    for node in depth1:
        lo, hi = node.span
        first = True
        for i in range(lo, hi + 1):
            owner[i] = node
            if claimed[i]:
                continue
            intent_tags[i] = f"{'B' if first else 'I'}-{node.label}"
            first = False
        if first:
            raise NonInvertibleTree(
                f"first-level intent {node.label} owns no token outside its nested intents"
            )

    for node, parent in depth2:
        prev = node.span[0] - 1
        if prev >= 0 and owner[prev] is not None and owner[prev] is not parent:
            raise NonInvertibleTree(
                f"second-level intent {node.label} abuts a different first-level intent"
            )

    slot_spans = {nd.span for nd in tree.root.nodes() if nd.kind == SLOT}
    for nd in tree.root.nodes():
        if nd.kind == INTENT and nd is not tree.root and nd.span in slot_spans:
            for sub in nd.nodes():
                if sub.kind == SLOT and sub is not nd and sub.span == nd.span:
                    raise NonInvertibleTree(
                        f"intent {nd.label} has an equal-span slot descendant {sub.label}"
                    )

    return DecomposedFrame(
        coarse_intent=tree.root.label,
        intent_tags=tuple(intent_tags),
        slot_stacks=tuple(tuple(s) if s else (OUTSIDE,) for s in stacks),
    )


# --- reconstruct ----------------------------------------------------------------


@dataclass
class _Region:
    """A first-level intent span under reconstruction."""

    label: str
    start: int
    end: int
    nested: list[tuple[str, int, int]]


def _scan_intent_layer(tags: Sequence[str]) -> list[_Region]:
    """Recover first-level intent regions and their NESTED sub-runs.

    A region opens at B-X, is continued by I-X, and absorbs NESTED runs that
    touch its right edge; NESTED runs with no open region on their left attach
    to the next region iff it starts immediately after them.  I-X may resume a
    region across absorbed NESTED runs (the enclosing intent's scope bridges
    its nested intents).
    """
    regions: list[_Region] = []
    open_region: _Region | None = None
    pending: list[tuple[str, int, int]] = []
    open_nested: list | None = None  # [label, start, end, absorbed: bool]

    def close_nested():
        nonlocal open_nested
        if open_nested is not None:
            label, start, end, absorbed = open_nested
            if absorbed:
                assert open_region is not None
                open_region.nested.append((label, start, end))
            else:
                pending.append((label, start, end))
            open_nested = None

    def close_region():
        nonlocal open_region
        if open_region is not None:
            regions.append(open_region)
            open_region = None

    for i, tag in enumerate(tags):
        if tag == OUTSIDE:
            close_nested()
            if pending:
                raise OrphanNested(f"NESTED run ending at {i - 1} attaches to no intent")
            close_region()
            continue
        bi, label, nested = _parse_intent_tag(tag)
        if nested:
            if bi == "B":
                close_nested()
                absorbed = open_region is not None and open_region.end == i - 1
                open_nested = [label, i, i, absorbed]
            else:
                if (
                    open_nested is None
                    or open_nested[0] != label
                    or open_nested[2] != i - 1
                ):
                    raise IllFormedBIO(f"dangling {tag} at position {i}")
                open_nested[2] = i
            if open_nested[3]:
                open_region.end = i
        else:
            close_nested()
            if bi == "B":
                close_region()
                start = i
                if pending:
                    if pending[-1][2] != i - 1:
                        raise OrphanNested(
                            f"NESTED run ending at {pending[-1][2]} attaches to no intent"
                        )
                    start = pending[0][1]
                open_region = _Region(label, start, i, pending)
                pending = []
            else:
                if open_region is None or open_region.label != label or open_region.end != i - 1:
                    raise IllFormedBIO(f"dangling {tag} at position {i}")
                open_region.end = i
    close_nested()
    if pending:
        raise OrphanNested("trailing NESTED run attaches to no intent")
    close_region()
    return regions


def _slot_spans_by_depth(
    stacks: Sequence[Sequence[str]],
) -> list[list[tuple[str, int, int]]]:
    """BIO runs per stack depth; depth d runs only over tokens with >= d tags."""
    for stack in stacks:
        _check_stack(stack)
    max_depth = max((len(s) for s in stacks), default=0)
    spans: list[list[tuple[str, int, int]]] = []
    for d in range(1, max_depth + 1):
        runs: list[tuple[str, int, int]] = []
        current: list | None = None  # [label, start, end]
        for i, stack in enumerate(stacks):
            tag = stack[d - 1] if len(stack) >= d else None
            if tag is None or tag == OUTSIDE:
                if current:
                    runs.append(tuple(current))
                    current = None
                continue
            bi, label = _parse_slot_tag(tag)
            if bi == "B":
                if current:
                    runs.append(tuple(current))
                current = [label, i, i]
            else:
                if current is None or current[0] != label or current[2] != i - 1:
                    raise IllFormedBIO(f"dangling slot tag {tag} at position {i} depth {d}")
                current[2] = i
        if current:
            runs.append(tuple(current))
        spans.append(runs)
    for d in range(1, len(spans)):
        for label, lo, hi in spans[d]:
            if not any(plo <= lo and hi <= phi for _, plo, phi in spans[d - 1]):
                raise ContainmentViolation(
                    f"depth-{d + 1} slot {label} [{lo},{hi}] outside every depth-{d} slot"
                )
    return spans


# Tie-break ranks for identical extents, outermost first: the root, then slots
# by depth, then intents by level.  Slot-above-intent keeps decompose invertible.
_RANK_ROOT = 0
_RANK_SLOT = {1: 1, 2: 2, 3: 3}
_RANK_INTENT1 = 4
_RANK_INTENT2 = 5


def reconstruct(frame: DecomposedFrame, tokens: Sequence[str]) -> SemanticTree:
    """Rebuild the unique SemanticTree whose decomposition equals ``frame``.

    Spans are recovered per layer (intent regions with NESTED absorption, slot
    BIO runs per stack depth), then nested by containment; an intent and a
    slot with identical extent nest slot-outside.
    """
    n = len(tokens)
    if len(frame.intent_tags) != n or len(frame.slot_stacks) != n:
        raise LengthMismatch(f"frame layers do not match {n} tokens")
    if n == 0:
        raise LengthMismatch("cannot reconstruct an empty utterance")

    spans: list[tuple[int, int, int, str, str]] = []  # start, end, rank, kind, label
    spans.append((0, n - 1, _RANK_ROOT, INTENT, frame.coarse_intent))
    for region in _scan_intent_layer(frame.intent_tags):
        spans.append((region.start, region.end, _RANK_INTENT1, INTENT, region.label))
        for label, lo, hi in region.nested:
            spans.append((lo, hi, _RANK_INTENT2, INTENT, label))
    for depth, runs in enumerate(_slot_spans_by_depth(frame.slot_stacks), start=1):
        for label, lo, hi in runs:
            spans.append((lo, hi, _RANK_SLOT[depth], SLOT, label))

    spans.sort(key=lambda s: (s[0], -s[1], s[2]))

    toks = [Token(i, surf) for i, surf in enumerate(tokens)]
    built: list[dict] = [
        {"start": s[0], "end": s[1], "kind": s[3], "label": s[4], "children": []}
        for s in spans
    ]
    stack: list[dict] = []
    for node in built:
        while stack and stack[-1]["end"] < node["start"]:
            _fill_tokens(stack.pop(), toks)
        if stack:
            if node["end"] > stack[-1]["end"]:
                raise ContainmentViolation(
                    f"span [{node['start']},{node['end']}] crosses [{stack[-1]['start']},{stack[-1]['end']}]"
                )
            stack[-1]["children"].append(node)
        stack.append(node)
    while stack:
        _fill_tokens(stack.pop(), toks)

    root = _freeze(built[0])
    return validate_tree(SemanticTree(tokens=tuple(toks), root=root))


def _fill_tokens(node: dict, toks: list[Token]) -> None:
    covered = set()
    for child in node["children"]:
        covered.update(range(child["start"], child["end"] + 1))
    for i in range(node["start"], node["end"] + 1):
        if i not in covered:
            node["children"].append(toks[i])
    node["children"].sort(key=lambda c: c.index if isinstance(c, Token) else c["start"])


def _freeze(node: dict) -> SemanticNode:
    children = tuple(
        c if isinstance(c, Token) else _freeze(c) for c in node["children"]
    )
    return SemanticNode(node["kind"], node["label"], children)


# --- frame utilities ------------------------------------------------------------


def fertility_of(frame: DecomposedFrame) -> tuple[int, ...]:
    """Per-token slot-label count; the slot head's classification target."""
    return tuple(len(stack) for stack in frame.slot_stacks)


def flatten_slot_targets(frame: DecomposedFrame) -> tuple[str, ...]:
    """All slot stacks concatenated in token order (length = sum of fertilities)."""
    return tuple(tag for stack in frame.slot_stacks for tag in stack)


def regroup_slots(
    linear: Sequence[str], fertilities: Sequence[int]
) -> tuple[tuple[str, ...], ...]:
    """Inverse of flatten_slot_targets given the per-token fertilities."""
    if any(not 1 <= f <= MAX_FERTILITY for f in fertilities):
        raise LengthMismatch(f"fertilities must lie in 1..{MAX_FERTILITY}")
    if len(linear) != sum(fertilities):
        raise LengthMismatch(
            f"{len(linear)} linear tags vs fertility sum {sum(fertilities)}"
        )
    stacks = []
    at = 0
    for f in fertilities:
        stacks.append(tuple(linear[at : at + f]))
        at += f
    return tuple(stacks)


def frames_equal(a: DecomposedFrame, b: DecomposedFrame) -> bool:
    """Exact-match comparison: all three layers identical."""
    return (
        a.coarse_intent == b.coarse_intent
        and a.intent_tags == b.intent_tags
        and a.slot_stacks == b.slot_stacks
    )


def is_nested(tree: SemanticTree) -> bool:
    """True iff the tree has a non-root intent or a slot inside a slot."""
    saw_intent = 0

    def walk(node: SemanticNode, slot_depth: int) -> bool:
        nonlocal saw_intent
        if node.kind == INTENT:
            saw_intent += 1
            if saw_intent > 1:
                return True
        else:
            slot_depth += 1
            if slot_depth > 1:
                return True
        return any(
            walk(c, slot_depth) for c in node.children if isinstance(c, SemanticNode)
        )

    return walk(tree.root, 0)


def repair_bio(frame: DecomposedFrame) -> DecomposedFrame:
    """Coerce illegal I- tags to B- tags; other defects are left as-is.

    Intended for raw model predictions ahead of tree reconstruction.  Exact
    match is computed on unrepaired frames.
    """
    tags = list(frame.intent_tags)
    prev_plain: tuple[str, ...] | None = None  # (label,) of the run bridging NESTED
    prev: str | None = None
    for i, tag in enumerate(tags):
        if tag == OUTSIDE:
            prev_plain, prev = None, tag
            continue
        try:
            bi, label, nested = _parse_intent_tag(tag)
        except IllFormedBIO:
            prev = tag
            continue
        if bi == "I":
            if nested:
                ok = prev == f"B-{label}{NESTED_SUFFIX}" or prev == f"I-{label}{NESTED_SUFFIX}"
            else:
                ok = prev in (f"B-{label}", f"I-{label}") or (
                    prev is not None
                    and prev.endswith(NESTED_SUFFIX)
                    and prev_plain == (label,)
                )
            if not ok:
                tags[i] = f"B-{label}" + (NESTED_SUFFIX if nested else "")
        bi2, label2, nested2 = _parse_intent_tag(tags[i])
        if not nested2:
            prev_plain = (label2,)
        prev = tags[i]

    stacks = [list(s) for s in frame.slot_stacks]
    for d in range(MAX_FERTILITY):
        prev_tag = None
        for i, stack in enumerate(stacks):
            if len(stack) <= d or stack[d] == OUTSIDE:
                prev_tag = None
                continue
            try:
                bi, label = _parse_slot_tag(stack[d])
            except IllFormedBIO:
                prev_tag = stack[d]
                continue
            if bi == "I" and prev_tag not in (f"B-{label}", f"I-{label}"):
                stack[d] = f"B-{label}"
            prev_tag = stack[d]

    return DecomposedFrame(
        coarse_intent=frame.coarse_intent,
        intent_tags=tuple(tags),
        slot_stacks=tuple(tuple(s) for s in stacks),
    )


# --- flattened-frame text format --------------------------------------------------


@dataclass(frozen=True)
class FlatRecord:
    """One utterance in the flattened-frame text format."""

    example_id: str
    locale: str
    domain: str
    tokens: tuple[str, ...]
    frame: DecomposedFrame


def flat_records_to_text(records: Iterable[FlatRecord]) -> str:
    """Render records as blank-line separated five-line blocks.

    Lines: id/locale/domain (tab-separated), tokens (tab-separated), coarse
    intent, intent tags (tab-separated), slot stacks (tab-separated, ``|``
    joining the tags inside one stack).
    """
    blocks = []
    for rec in records:
        head = (rec.example_id, rec.locale, rec.domain)
        for field in head + rec.tokens:
            if "\t" in field or "\n" in field:
                raise ValueError(f"field {field!r} contains a tab or newline")
        blocks.append(
            "\n".join(
                [
                    "\t".join(head),
                    "\t".join(rec.tokens),
                    rec.frame.coarse_intent,
                    "\t".join(rec.frame.intent_tags),
                    "\t".join("|".join(stack) for stack in rec.frame.slot_stacks),
                ]
            )
        )
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def parse_flat_text(text: str) -> list[FlatRecord]:
    records = []
    blocks = [b for b in text.split("\n\n") if b.strip()]
    for block in blocks:
        lines = block.rstrip("\n").split("\n")
        if len(lines) != 5:
            raise DecomposerError(
                f"flat record must have 5 lines, got {len(lines)}: {lines[0][:50]!r}"
            )
        head = lines[0].split("\t")
        if len(head) != 3:
            raise DecomposerError(f"bad record header {lines[0]!r}")
        tokens = tuple(lines[1].split("\t"))
        frame = DecomposedFrame(
            coarse_intent=lines[2],
            intent_tags=tuple(lines[3].split("\t")),
            slot_stacks=tuple(tuple(s.split("|")) for s in lines[4].split("\t")),
        )
        records.append(FlatRecord(head[0], head[1], head[2], tokens, frame))
    return records
