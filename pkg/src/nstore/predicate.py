"""Predicate trees for conditional queries.

A predicate is a JSON document: leaves are
``{"field": ..., "op": ..., "value": ...}`` and combinators are
``{"and": [...]}``, ``{"or": [...]}`` and ``{"not": ...}``. Leaf fields
either name a core column (``id``, ``name``, ``created_at``) or an
attribute field as ``Kind.field``. Attribute fields are schemaless: a
missing field makes the leaf false, never an error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from nstore.model import BytesRef, TopicEntity

CORE_FIELDS = ("id", "name", "created_at")
OPS = ("eq", "neq", "lt", "le", "gt", "ge", "contains", "in")
MAX_DEPTH = 16

_ATTR_FIELD_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*\.[^.\s]+\Z")


class PredicateError(Exception):
    pass


class MalformedPredicate(PredicateError):
    pass


class UnknownField(PredicateError):
    pass


class TypeMismatch(PredicateError):
    pass


@dataclass(frozen=True)
class Leaf:
    field: str
    op: str
    value: object


@dataclass(frozen=True)
class And:
    children: tuple["Predicate", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Predicate", ...]


@dataclass(frozen=True)
class Not:
    child: "Predicate"


Predicate = Union[Leaf, And, Or, Not]


def parse(obj, depth: int = 0) -> Predicate:
    if depth > MAX_DEPTH:
        raise MalformedPredicate(f"predicate deeper than {MAX_DEPTH}")
    if not isinstance(obj, dict):
        raise MalformedPredicate("predicate nodes must be objects")
    if "and" in obj or "or" in obj:
        key = "and" if "and" in obj else "or"
        if set(obj) != {key} or not isinstance(obj[key], list) or not obj[key]:
            raise MalformedPredicate(f"'{key}' takes a non-empty list of children")
        children = tuple(parse(c, depth + 1) for c in obj[key])
        return And(children) if key == "and" else Or(children)
    if "not" in obj:
        if set(obj) != {"not"}:
            raise MalformedPredicate("'not' takes a single child")
        return Not(parse(obj["not"], depth + 1))
    if set(obj) != {"field", "op", "value"}:
        raise MalformedPredicate(f"leaf must have exactly field/op/value, got {sorted(obj)}")
    field, op, value = obj["field"], obj["op"], obj["value"]
    if op not in OPS:
        raise MalformedPredicate(f"unknown operator {op!r}")
    if not isinstance(field, str):
        raise MalformedPredicate("field must be a string")
    if "." in field:
        if not _ATTR_FIELD_RE.match(field):
            raise MalformedPredicate(f"bad attribute field reference {field!r}")
    elif field not in CORE_FIELDS:
        raise UnknownField(f"unknown core column {field!r}")
    if op == "in" and not isinstance(value, list):
        raise MalformedPredicate("'in' needs a list value")
    if isinstance(value, dict) and not (set(value) == {"ref"} and isinstance(value["ref"], str)):
        raise MalformedPredicate("object values must be byte references {'ref': ...}")
    return Leaf(field, op, value)


def depth_of(pred: Predicate) -> int:
    if isinstance(pred, Leaf):
        return 1
    if isinstance(pred, Not):
        return 1 + depth_of(pred.child)
    return 1 + max(depth_of(c) for c in pred.children)


def _lookup(entity: TopicEntity, field: str):
    """Resolve a leaf field against an entity; (found, value)."""
    if field == "id":
        return True, entity.id_hex
    if field == "name":
        return True, entity.name
    if field == "created_at":
        return True, entity.created_at
    kind, _, name = field.partition(".")
    block = entity.attribute(kind)
    if block is None or name not in block.fields:
        return False, None
    return True, block.fields[name]


def _norm(value):
    if isinstance(value, dict):  # {'ref': token} from a JSON predicate
        return BytesRef(value["ref"])
    return value


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _eq(a, b) -> bool:
    if _is_number(a) and _is_number(b):
        return a == b
    if type(a) is type(b):
        return a == b
    if isinstance(a, bool) and isinstance(b, bool):
        return a == b
    return False


def _compare(field: str, op: str, a, b) -> bool:
    if not ((_is_number(a) and _is_number(b)) or (isinstance(a, str) and isinstance(b, str))):
        raise TypeMismatch(
            f"{field}: cannot order {type(a).__name__} against {type(b).__name__}"
        )
    if op == "lt":
        return a < b
    if op == "le":
        return a <= b
    if op == "gt":
        return a > b
    return a >= b


def _eval_leaf(leaf: Leaf, entity: TopicEntity) -> bool:
    found, actual = _lookup(entity, leaf.field)
    if not found:
        return False
    value = _norm(leaf.value)
    op = leaf.op
    if op == "eq":
        return _eq(actual, value)
    if op == "neq":
        return not _eq(actual, value)
    if op == "contains":
        if not isinstance(actual, str) or not isinstance(value, str):
            raise TypeMismatch(f"{leaf.field}: 'contains' needs string operands")
        return value in actual
    if op == "in":
        return any(_eq(actual, _norm(v)) for v in value)
    return _compare(leaf.field, op, actual, value)


def evaluate(pred: Predicate, entity: TopicEntity) -> bool:
    if isinstance(pred, Leaf):
        return _eval_leaf(pred, entity)
    if isinstance(pred, Not):
        return not evaluate(pred.child, entity)
    if isinstance(pred, And):
        return all(evaluate(c, entity) for c in pred.children)
    return any(evaluate(c, entity) for c in pred.children)
