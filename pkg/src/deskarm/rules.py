"""Forward-chaining Datalog rules over grounded grasp facts.

Programs are plain text, one clause per line (a clause may continue on
following lines until its closing period)::

    % facts
    graspable(card).
    mass_kg(card, 0.001).
    % rules: head :- body atoms and numeric guards
    liftable(X) :- graspable(X), mass_kg(X, M), M < 2.6.
    % queries
    ?- liftable(X).

Variables start with an upper-case letter or ``_`` (a lone ``_`` is
anonymous).  Constants are lower-case identifiers, numbers or
double-quoted strings.  There is no negation and no function symbols, so
every program has a finite least fixpoint.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

from .grasp import GraspPose3D


class RuleError(ValueError):
    """Malformed or disallowed program."""


class RuleSyntaxError(RuleError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class RangeRestrictionError(RuleError):
    pass


class ArityError(RuleError):
    pass


# --------------------------------------------------------------------------
# terms and clauses

@dataclass(frozen=True, order=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


ANONYMOUS = Var("_")

Constant = Union[str, int, float]
Term = Union[Var, str, int, float]

_IDENT = re.compile(r"[a-z][A-Za-z0-9_]*\Z")


def format_term(t: Term) -> str:
    if isinstance(t, Var):
        return t.name
    if isinstance(t, str):
        if _IDENT.match(t):
            return t
        return '"' + t.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(t)


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple

    @property
    def arity(self) -> int:
        return len(self.args)

    def variables(self) -> set:
        return {a for a in self.args if isinstance(a, Var)}

    def is_ground(self) -> bool:
        return not self.variables()

    def __str__(self) -> str:
        return f"{self.predicate}({', '.join(format_term(a) for a in self.args)})"


Fact = Atom   # a ground atom


def fact(predicate: str, *args: Constant) -> Fact:
    f = Atom(predicate, tuple(args))
    if not f.is_ground():
        raise RuleError(f"fact {f} contains variables")
    return f


_COMPARATORS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class Comparison:
    op: str
    left: Term
    right: Term

    def __post_init__(self):
        if self.op not in _COMPARATORS:
            raise RuleError(f"unknown comparison {self.op!r}")

    def variables(self) -> set:
        return {t for t in (self.left, self.right) if isinstance(t, Var)}

    def holds(self, binding: dict) -> bool:
        a = binding.get(self.left, self.left) if isinstance(self.left, Var) else self.left
        b = binding.get(self.right, self.right) if isinstance(self.right, Var) else self.right
        if self.op in ("=", "!="):
            return _COMPARATORS[self.op](a, b)
        # ordering guards are numeric only
        return _is_number(a) and _is_number(b) and _COMPARATORS[self.op](a, b)

    def __str__(self) -> str:
        return f"{format_term(self.left)} {self.op} {format_term(self.right)}"


@dataclass(frozen=True)
class Rule:
    head: Atom
    body: tuple

    def __post_init__(self):
        atoms = [b for b in self.body if isinstance(b, Atom)]
        if ANONYMOUS in self.head.variables():
            raise RangeRestrictionError(f"anonymous variable in the head of {self.head}")
        if not atoms:
            raise RangeRestrictionError(f"rule for {self.head.predicate} needs a body atom")
        bound = set().union(*(a.variables() for a in atoms))
        free = self.head.variables() - bound
        if free:
            raise RangeRestrictionError(
                f"head variables {sorted(v.name for v in free)} of {self.head} "
                "do not occur in a body atom")
        for c in self.body:
            if isinstance(c, Comparison) and (ANONYMOUS in c.variables()
                                              or not c.variables() <= bound):
                raise RangeRestrictionError(f"guard {c} uses unbound variables")

    @property
    def atoms(self) -> tuple:
        return tuple(b for b in self.body if isinstance(b, Atom))

    def __str__(self) -> str:
        return f"{self.head} :- {', '.join(str(b) for b in self.body)}."


# --------------------------------------------------------------------------
# knowledge base

def _arity_table(facts: Iterable[Atom], rules: Iterable[Rule]) -> dict:
    table: dict = {}

    def check(a: Atom):
        seen = table.setdefault(a.predicate, a.arity)
        if seen != a.arity:
            raise ArityError(f"{a.predicate} used with arity {a.arity} and {seen}")

    for f in facts:
        check(f)
    for r in rules:
        check(r.head)
        for a in r.atoms:
            check(a)
    return table


@dataclass(frozen=True)
class KnowledgeBase:
    facts: frozenset = frozenset()
    rules: tuple = ()

    def __post_init__(self):
        facts = frozenset(self.facts)
        for f in facts:
            if not f.is_ground():
                raise RuleError(f"fact {f} contains variables")
        object.__setattr__(self, "facts", facts)
        object.__setattr__(self, "rules", tuple(self.rules))
        _arity_table(facts, self.rules)

    def with_facts(self, more: Iterable[Fact]) -> "KnowledgeBase":
        return KnowledgeBase(self.facts | frozenset(more), self.rules)

    def with_rules(self, more: Iterable[Rule]) -> "KnowledgeBase":
        return KnowledgeBase(self.facts, self.rules + tuple(more))


def _match(atom: Atom, f: Atom, binding: dict) -> dict | None:
    """Extend ``binding`` so that ``atom`` equals the ground ``f``."""
    if atom.predicate != f.predicate or atom.arity != f.arity:
        return None
    out = binding
    for pat, val in zip(atom.args, f.args):
        if isinstance(pat, Var):
            if pat == ANONYMOUS:
                continue
            have = out.get(pat, _MISSING)
            if have is _MISSING:
                if out is binding:
                    out = dict(binding)
                out[pat] = val
            elif not _same(have, val):
                return None
        elif not _same(pat, val):
            return None
    return out


_MISSING = object()


def _same(a, b) -> bool:
    # 1 and 1.0 are the same constant, "1" and 1 are not
    return a == b and (isinstance(a, str) == isinstance(b, str))


def _substitute(atom: Atom, binding: dict) -> Atom:
    return Atom(atom.predicate, tuple(binding[a] if isinstance(a, Var) else a
                                      for a in atom.args))


def _index(facts: Iterable[Atom]) -> dict:
    idx: dict = {}
    for f in facts:
        idx.setdefault(f.predicate, []).append(f)
    return idx


def _solve(rule: Rule, sources: Sequence[dict]):
    """Bindings of the rule body; atom ``i`` is matched against
    ``sources[i]`` and each guard is tested as soon as it is bound."""
    atoms = rule.atoms
    guards = [c for c in rule.body if isinstance(c, Comparison)]
    ready, bound, placed = [], set(), set()
    for a in atoms:
        bound |= a.variables()
        now = [k for k, g in enumerate(guards) if k not in placed and g.variables() <= bound]
        placed.update(now)
        ready.append([guards[k] for k in now])

    def walk(i, binding):
        if i == len(atoms):
            yield binding
            return
        for f in sources[i].get(atoms[i].predicate, ()):
            b = _match(atoms[i], f, binding)
            if b is not None and all(g.holds(b) for g in ready[i]):
                yield from walk(i + 1, b)

    # guards on constants only
    if all(g.holds({}) for g in guards if not g.variables()):
        yield from walk(0, {})


def forward_chain(kb: KnowledgeBase) -> KnowledgeBase:
    """Least fixpoint by semi-naive evaluation.

    In each round a rule only fires on derivations that use at least one
    fact new in the previous round: body atoms before that position read
    the older facts, the position itself reads the new facts and later
    positions read everything.
    """
    total = set(kb.facts)
    delta = set(kb.facts)
    old: set = set()
    while delta:
        idx_total, idx_delta, idx_old = _index(total), _index(delta), _index(old)
        new: set = set()
        for rule in kb.rules:
            n = len(rule.atoms)
            for i in range(n):
                if rule.atoms[i].predicate not in idx_delta:
                    continue
                sources = [idx_old] * i + [idx_delta] + [idx_total] * (n - i - 1)
                for b in _solve(rule, sources):
                    f = _substitute(rule.head, b)
                    if f not in total:
                        new.add(f)
        old = set(total)
        total |= new
        delta = new
    return KnowledgeBase(frozenset(total), kb.rules)


def _sort_key(value):
    if _is_number(value):
        return (0, float(value), "")
    return (1, 0.0, str(value))


def query(kb: KnowledgeBase, pattern) -> list:
    """All bindings of the pattern's named variables over ``kb.facts``,
    deduplicated and sorted (numbers before strings, each in natural
    order, compared variable by variable in order of first appearance).

    ``pattern`` is an :class:`Atom` or its textual form.  A ground pattern
    yields ``[{}]`` when present and ``[]`` otherwise.  The facts are used
    as they are; pass the result of :func:`forward_chain` to query the
    fixpoint.
    """
    if isinstance(pattern, str):
        pattern = parse_atom(pattern)
    names = []
    for a in pattern.args:
        if isinstance(a, Var) and a != ANONYMOUS and a not in names:
            names.append(a)
    seen = set()
    for f in kb.facts:
        b = _match(pattern, f, {})
        if b is not None:
            seen.add(tuple(b[v] for v in names))
    rows = sorted(seen, key=lambda row: tuple(_sort_key(v) for v in row))
    return [{v.name: val for v, val in zip(names, row)} for row in rows]


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>(?:%|\#)[^\n]*)
  | (?P<number>[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<var>[A-Z_][A-Za-z0-9_]*)
  | (?P<ident>[a-z][A-Za-z0-9_]*)
  | (?P<punct>:-|\?-|<=|>=|!=|[<>=(),.])
""", re.VERBOSE)


@dataclass
class _Tokens:
    items: list
    last_line: int = 1
    pos: int = 0

    def peek(self):
        if self.pos < len(self.items):
            return self.items[self.pos]
        return ("eof", "", self.last_line)

    def next(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect(self, value):
        kind, text, line = self.next()
        if text != value:
            raise RuleSyntaxError(f"expected {value!r}, found {text or 'end of input'!r}", line)


def _tokenize(text: str) -> list:
    out, pos, line = [], 0, 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", line)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            out.append((kind, m.group(), line))
        line += m.group().count("\n")
        pos = m.end()
    return out, line


def _number(text: str):
    if re.fullmatch(r"[-+]?\d+", text):
        return int(text)
    v = float(text)
    if not math.isfinite(v):
        raise RuleSyntaxError(f"non-finite number {text}")
    return v


def _term(toks: _Tokens) -> Term:
    kind, text, line = toks.next()
    if kind == "var":
        return Var(text)
    if kind == "ident":
        return text
    if kind == "number":
        return _number(text)
    if kind == "string":
        return re.sub(r'\\(.)', r'\1', text[1:-1])
    raise RuleSyntaxError(f"expected a term, found {text or 'end of input'!r}", line)


def _atom(toks: _Tokens) -> Atom:
    kind, text, line = toks.next()
    if kind != "ident":
        raise RuleSyntaxError(f"expected a predicate name, found {text or 'end of input'!r}",
                              line)
    toks.expect("(")
    args = []
    if toks.peek()[1] != ")":
        args.append(_term(toks))
        while toks.peek()[1] == ",":
            toks.next()
            args.append(_term(toks))
    toks.expect(")")
    return Atom(text, tuple(args))


def _literal(toks: _Tokens):
    kind, text, line = toks.peek()
    nxt = toks.items[toks.pos + 1][1] if toks.pos + 1 < len(toks.items) else ""
    if kind == "ident" and nxt == "(":
        return _atom(toks)
    left = _term(toks)
    kind, op, line = toks.next()
    if op not in _COMPARATORS:
        raise RuleSyntaxError(f"expected a comparison operator, found {op or 'end of input'!r}",
                              line)
    right = _term(toks)
    return Comparison(op, left, right)


@dataclass(frozen=True)
class Program:
    facts: tuple
    rules: tuple
    queries: tuple

    def knowledge_base(self) -> KnowledgeBase:
        return KnowledgeBase(frozenset(self.facts), self.rules)


def parse_program(text: str) -> Program:
    """Parse facts, rules and ``?-`` queries; raises :class:`RuleError`
    subclasses with the offending line."""
    toks = _Tokens(*_tokenize(text))
    facts, rules, queries = [], [], []
    while toks.peek()[0] != "eof":
        line = toks.peek()[2]
        try:
            if toks.peek()[1] == "?-":
                toks.next()
                queries.append(_atom(toks))
                toks.expect(".")
                continue
            head = _atom(toks)
            if toks.peek()[1] == ":-":
                toks.next()
                body = [_literal(toks)]
                while toks.peek()[1] == ",":
                    toks.next()
                    body.append(_literal(toks))
                toks.expect(".")
                rules.append(Rule(head, tuple(body)))
            else:
                toks.expect(".")
                if not head.is_ground():
                    raise RangeRestrictionError(f"fact {head} contains variables")
                facts.append(head)
        except RuleSyntaxError:
            raise
        except RuleError as e:
            raise type(e)(f"line {line}: {e}") from None
    _arity_table(facts, rules)
    return Program(tuple(facts), tuple(rules), tuple(queries))


def parse_atom(text: str) -> Atom:
    toks = _Tokens(*_tokenize(text))
    a = _atom(toks)
    if toks.peek()[1] == ".":
        toks.next()
    if toks.peek()[0] != "eof":
        raise RuleSyntaxError(f"trailing input {toks.peek()[1]!r}", toks.peek()[2])
    return a


def load_knowledge_base(*texts: str) -> KnowledgeBase:
    """One knowledge base from several program texts (queries ignored)."""
    facts, rules = [], []
    for t in texts:
        p = parse_program(t)
        facts.extend(p.facts)
        rules.extend(p.rules)
    return KnowledgeBase(frozenset(facts), tuple(rules))


def format_facts(facts: Iterable[Atom]) -> str:
    ordered = sorted(facts, key=lambda f: (f.predicate, tuple(_sort_key(a) for a in f.args)))
    return "".join(f"{f}.\n" for f in ordered)


# --------------------------------------------------------------------------
# grounding

def ground_grasp_facts(object_id: str, pose: GraspPose3D,
                       quality_threshold: float = 0.5) -> list:
    """Symbolic facts for one predicted grasp: ``has_grasp(obj, q)``,
    ``grasp_width(obj, w_m)`` and, when ``q >= quality_threshold``,
    ``graspable(obj)``."""
    q, w = float(pose.quality), float(pose.width)
    out = [fact("has_grasp", object_id, q), fact("grasp_width", object_id, w)]
    if q >= quality_threshold:
        out.append(fact("graspable", object_id))
    return out
