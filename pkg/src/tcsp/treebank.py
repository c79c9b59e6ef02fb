"""Bracketed hierarchical intent/slot trees: parsing, validation, serialization.

The canonical text form is a single bracketed expression such as

    [IN:CREATE_REMINDER remind me to [SL:TODO call mom ] ]

where ``[IN:LABEL`` opens an intent node, ``[SL:LABEL`` opens a slot node,
``]`` closes the innermost open node, and all atoms are separated by single
spaces.  Token leaves are plain words; their indices are assigned in
left-to-right order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence, Union

INTENT = "IN"
SLOT = "SL"

# Depth caps: a path may contain at most 3 intent nodes (root + two nested
# levels) and at most 3 slot nodes.
MAX_INTENT_DEPTH = 3
MAX_SLOT_DEPTH = 3

_LABEL_RE = re.compile(r"^[A-Z0-9_-]+$")


class TreebankError(ValueError):
    """Base class for malformed trees and unparseable bracketed text."""


class UnbalancedBrackets(TreebankError):
    pass


class UnknownNodePrefix(TreebankError):
    pass


class EmptyNode(TreebankError):
    pass


class InvalidLabel(TreebankError):
    pass


class RootNotIntent(TreebankError):
    pass


class NonContiguousSpan(TreebankError):
    pass


class DepthExceeded(TreebankError):
    pass


class AlignmentAmbiguous(TreebankError):
    """A decoupled leaf token could not be matched to the utterance."""


@dataclass(frozen=True)
class Token:
    """A single utterance token at a fixed position."""

    index: int
    surface: str

    def __post_init__(self):
        if self.index < 0:
            raise TreebankError(f"token index must be >= 0, got {self.index}")
        if not self.surface or re.search(r"[\s\[\]]", self.surface):
            raise TreebankError(
                f"token surface must be non-empty without whitespace/brackets: {self.surface!r}"
            )


Child = Union["SemanticNode", Token]


@dataclass(frozen=True)
class SemanticNode:
    """An intent or slot node over a contiguous token span."""

    kind: str
    label: str
    children: tuple[Child, ...]

    def __post_init__(self):
        if self.kind not in (INTENT, SLOT):
            raise TreebankError(f"unknown node kind {self.kind!r}")
        if not _LABEL_RE.match(self.label):
            raise InvalidLabel(f"illegal node label {self.label!r}")
        if not self.children:
            raise EmptyNode(f"node {self.kind}:{self.label} has no children")

    @cached_property
    def span(self) -> tuple[int, int]:
        """Inclusive (first, last) token index range of the subtree."""
        leaves = list(self.tokens())
        return leaves[0].index, leaves[-1].index

    def tokens(self) -> Iterator[Token]:
        for child in self.children:
            if isinstance(child, Token):
                yield child
            else:
                yield from child.tokens()

    def nodes(self) -> Iterator["SemanticNode"]:
        """Pre-order traversal of this node and every descendant node."""
        yield self
        for child in self.children:
            if isinstance(child, SemanticNode):
                yield from child.nodes()


@dataclass(frozen=True)
class SemanticTree:
    """A full parse: the utterance's tokens plus the root intent node."""

    tokens: tuple[Token, ...]
    root: SemanticNode

    @property
    def surfaces(self) -> tuple[str, ...]:
        return tuple(t.surface for t in self.tokens)


def validate_tree(tree: SemanticTree) -> SemanticTree:
    """Check every structural invariant, raising a TreebankError subclass.

    Covers: intent root, exact token coverage in leaf order, per-node span
    contiguity with ordered disjoint siblings, and the intent/slot depth caps.
    """
    if tree.root.kind != INTENT:
        raise RootNotIntent(f"root must be an intent node, got {tree.root.kind}")
    leaves = list(tree.root.tokens())
    if [t.index for t in leaves] != list(range(len(leaves))):
        raise NonContiguousSpan("leaf token indices are not 0..n-1 in order")
    if tuple(leaves) != tree.tokens:
        raise NonContiguousSpan("tree.tokens does not match the leaves of root")

    def walk(node: SemanticNode, intent_depth: int, slot_depth: int) -> tuple[int, int]:
        if node.kind == INTENT:
            intent_depth += 1
            if intent_depth > MAX_INTENT_DEPTH:
                raise DepthExceeded(f"intent nesting deeper than {MAX_INTENT_DEPTH}")
        else:
            slot_depth += 1
            if slot_depth > MAX_SLOT_DEPTH:
                raise DepthExceeded(f"slot nesting deeper than {MAX_SLOT_DEPTH}")
        spans = []
        for child in node.children:
            if isinstance(child, Token):
                spans.append((child.index, child.index))
            else:
                spans.append(walk(child, intent_depth, slot_depth))
        for (_, prev_end), (start, _) in zip(spans, spans[1:]):
            if start != prev_end + 1:
                raise NonContiguousSpan(
                    f"children of {node.kind}:{node.label} are not adjacent left-to-right"
                )
        return spans[0][0], spans[-1][1]

    walk(tree.root, 0, 0)
    return tree


# --- parsing -----------------------------------------------------------------

_OPENER_RE = re.compile(r"^\[(?P<prefix>[^:\[\]]*):(?P<label>.*)$")


def _lex(text: str) -> list[str]:
    # Whitespace runs are normalized away; bracket characters must be either
    # a standalone "]" or the leading "[" of an opener atom.
    atoms = text.split()
    for atom in atoms:
        if atom == "]":
            continue
        body = atom[1:] if atom.startswith("[") else atom
        if "[" in body or "]" in body:
            raise UnbalancedBrackets(f"bracket character embedded in atom {atom!r}")
    return atoms


class _Parser:
    def __init__(self, atoms: list[str]):
        self.atoms = atoms
        self.pos = 0
        self.next_index = 0

    def parse_node(self, intent_depth: int, slot_depth: int) -> SemanticNode:
        atom = self.atoms[self.pos]
        m = _OPENER_RE.match(atom)
        if not m:
            if atom.startswith("["):
                raise UnknownNodePrefix(f"opener {atom!r} lacks an IN:/SL: prefix")
            raise UnbalancedBrackets(f"expected a node opener, got {atom!r}")
        prefix, label = m.group("prefix"), m.group("label")
        if prefix not in (INTENT, SLOT):
            raise UnknownNodePrefix(f"node prefix must be IN or SL, got {prefix!r}")
        if not _LABEL_RE.match(label):
            raise InvalidLabel(f"illegal node label {label!r} in {atom!r}")
        if prefix == INTENT and intent_depth + 1 > MAX_INTENT_DEPTH:
            raise DepthExceeded(f"intent nesting deeper than {MAX_INTENT_DEPTH}")
        if prefix == SLOT and slot_depth + 1 > MAX_SLOT_DEPTH:
            raise DepthExceeded(f"slot nesting deeper than {MAX_SLOT_DEPTH}")
        self.pos += 1
        children: list[Child] = []
        while True:
            if self.pos >= len(self.atoms):
                raise UnbalancedBrackets(f"node {atom!r} is never closed")
            nxt = self.atoms[self.pos]
            if nxt == "]":
                self.pos += 1
                break
            if nxt.startswith("["):
                children.append(
                    self.parse_node(
                        intent_depth + (prefix == INTENT), slot_depth + (prefix == SLOT)
                    )
                )
            else:
                children.append(Token(self.next_index, nxt))
                self.next_index += 1
                self.pos += 1
        if not children:
            raise EmptyNode(f"node {atom!r} has no children")
        return SemanticNode(prefix, label, tuple(children))


def parse_top(text: str) -> SemanticTree:
    """Parse canonical bracketed text into a validated SemanticTree."""
    atoms = _lex(text)
    if not atoms:
        raise UnbalancedBrackets("empty input")
    if not atoms[0].startswith("["):
        if atoms[0] == "]":
            raise UnbalancedBrackets("input starts with a closing bracket")
        raise RootNotIntent(f"input must start with an intent opener, got {atoms[0]!r}")
    parser = _Parser(atoms)
    root = parser.parse_node(0, 0)
    if parser.pos != len(atoms):
        raise UnbalancedBrackets(
            f"trailing content after the root node: {' '.join(atoms[parser.pos:])!r}"
        )
    if root.kind != INTENT:
        raise RootNotIntent("root node must be an intent")
    tree = SemanticTree(tokens=tuple(root.tokens()), root=root)
    return validate_tree(tree)


def serialize(tree: SemanticTree) -> str:
    """Render the canonical single-space bracketed form; inverse of parse_top."""

    def render(node: SemanticNode) -> list[str]:
        atoms = [f"[{node.kind}:{node.label}"]
        for child in node.children:
            if isinstance(child, Token):
                atoms.append(child.surface)
            else:
                atoms.extend(render(child))
        atoms.append("]")
        return atoms

    return " ".join(render(tree.root))


# --- decoupled-form alignment -------------------------------------------------


def align_decoupled(utterance: Sequence[str], decoupled: str) -> SemanticTree:
    """Expand a decoupled serialization (tokens outside slots omitted) into a
    full tree over ``utterance``.

    Leaf tokens of the decoupled form are matched to utterance positions
    greedily left-to-right; every unmatched utterance token is attached as a
    direct child of the innermost node whose matched span covers it (the root
    covers everything).  Matching is best-effort: a leaf with no remaining
    match raises AlignmentAmbiguous.
    """
    atoms = _lex(decoupled)
    if not atoms or not atoms[0].startswith("["):
        raise UnbalancedBrackets("decoupled form must be a single bracketed expression")
    parser = _Parser(atoms)
    skeleton = parser.parse_node(0, 0)
    if parser.pos != len(atoms):
        raise UnbalancedBrackets("trailing content after the decoupled root")
    if skeleton.kind != INTENT:
        raise RootNotIntent("decoupled root must be an intent")

    # Greedy left-to-right surface matching.
    mapping: dict[int, int] = {}  # id(token in skeleton) -> utterance index
    cursor = 0
    for leaf in skeleton.tokens():
        idx = cursor
        while idx < len(utterance) and utterance[idx] != leaf.surface:
            idx += 1
        if idx >= len(utterance):
            raise AlignmentAmbiguous(
                f"decoupled leaf {leaf.surface!r} has no match at or after position {cursor}"
            )
        mapping[id(leaf)] = idx
        cursor = idx + 1

    # Mutable mirror of the skeleton with utterance-indexed tokens.
    class _Mut:
        __slots__ = ("kind", "label", "children", "lo", "hi")

        def __init__(self, kind, label, children, lo, hi):
            self.kind, self.label, self.children = kind, label, children
            self.lo, self.hi = lo, hi

    def lift(node: SemanticNode) -> _Mut:
        children: list = []
        lo, hi = len(utterance), -1
        for child in node.children:
            if isinstance(child, Token):
                tok = Token(mapping[id(child)], child.surface)
                children.append(tok)
                lo, hi = min(lo, tok.index), max(hi, tok.index)
            else:
                sub = lift(child)
                children.append(sub)
                lo, hi = min(lo, sub.lo), max(hi, sub.hi)
        return _Mut(node.kind, node.label, children, lo, hi)

    root = lift(skeleton)
    root.lo, root.hi = 0, len(utterance) - 1

    matched = set(mapping.values())
    for idx in range(len(utterance)):
        if idx in matched:
            continue
        host = root
        while True:
            inner = next(
                (
                    c
                    for c in host.children
                    if isinstance(c, _Mut) and c.lo <= idx <= c.hi
                ),
                None,
            )
            if inner is None:
                break
            host = inner
        tok = Token(idx, utterance[idx])
        at = 0
        while at < len(host.children):
            child = host.children[at]
            start = child.index if isinstance(child, Token) else child.lo
            if start > idx:
                break
            at += 1
        host.children.insert(at, tok)
        host.lo, host.hi = min(host.lo, idx), max(host.hi, idx)

    def freeze(node: _Mut) -> SemanticNode:
        return SemanticNode(
            node.kind,
            node.label,
            tuple(freeze(c) if isinstance(c, _Mut) else c for c in node.children),
        )

    frozen = freeze(root)
    tree = SemanticTree(tokens=tuple(frozen.tokens()), root=frozen)
    return validate_tree(tree)
