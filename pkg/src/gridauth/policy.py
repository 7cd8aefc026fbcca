"""Policy documents for resource owners and virtual organizations.

A document names its source (``resource`` or ``vo``) and contains
subject blocks.  Each block matches a class of requesters (an exact
identity, a group, or anyone) and states what they may do:

* ``allow action ...`` grants job actions, optionally restricted to
  jobs carrying one of the listed jobtags (management actions only);
* ``attr NAME <spec>`` permits an attribute to appear with values
  satisfying the spec (several such lines for one attribute union);
* ``require attr NAME [<spec>]`` demands the attribute be present
  (and, with a spec, acceptable);
* ``forbid attr NAME [<spec>]`` rejects the attribute outright or
  rejects the listed values;
* ``closed-world;`` rejects any request attribute the block does not
  mention in an ``attr`` or ``require`` line.

VO documents may additionally carry an ``allocation`` and per-member
``member-quota`` clauses; resource documents may declare ``trust vo``
lines.  Value specs are enumerations (with ``*`` globs, anchored),
integer ranges, ``max``/``min`` bounds, regular expressions
(unanchored search, egrep style), or ``or`` combinations.

Documents are immutable after parsing and safe to share between
concurrent evaluations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping

from .rsl import JobAction, RslValue, quote_string

if TYPE_CHECKING:  # pragma: no cover
    from .credential import GridCredential


class PolicyError(ValueError):
    """Base class for policy parsing and construction errors."""


class PolicySyntaxError(PolicyError):
    def __init__(self, message: str, line: int, col: int):
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {message}")


class BadRegexError(PolicyError):
    pass


class BadRangeError(PolicyError):
    pass


class MisplacedClauseError(PolicyError):
    pass


# ---------------------------------------------------------------------------
# Value specs
# ---------------------------------------------------------------------------


def _glob_regex(pattern: str) -> re.Pattern:
    # '*' matches any character run; the whole value must match.
    return re.compile("(?s)" + ".*".join(re.escape(p) for p in pattern.split("*")) + r"\Z")


@dataclass(frozen=True)
class EnumSpec:
    """Membership in a set of literal values; ``*`` acts as a glob."""

    values: tuple

    _matchers: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.values:
            raise PolicyError("enumeration spec may not be empty")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(
            self, "_matchers", tuple(_glob_regex(v) for v in self.values)
        )

    def allows(self, value: RslValue) -> bool:
        return isinstance(value, str) and any(
            m.match(value) for m in self._matchers
        )

    def describe(self) -> str:
        return "in {" + ", ".join(quote_string(v) for v in self.values) + "}"


@dataclass(frozen=True)
class RangeSpec:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise BadRangeError(f"empty range {self.lo}..{self.hi}")

    def allows(self, value: RslValue) -> bool:
        return _is_int(value) and self.lo <= value <= self.hi

    def describe(self) -> str:
        return f"range {self.lo}..{self.hi}"


@dataclass(frozen=True)
class RegexSpec:
    pattern: str

    _regex: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        try:
            compiled = re.compile(self.pattern)
        except re.error as exc:
            raise BadRegexError(f"bad regex {self.pattern!r}: {exc}") from None
        object.__setattr__(self, "_regex", compiled)

    def allows(self, value: RslValue) -> bool:
        return isinstance(value, str) and self._regex.search(value) is not None

    def describe(self) -> str:
        return f"matches {quote_string(self.pattern)}"


@dataclass(frozen=True)
class MaxSpec:
    bound: int

    def allows(self, value: RslValue) -> bool:
        return _is_int(value) and value <= self.bound

    def describe(self) -> str:
        return f"max {self.bound}"


@dataclass(frozen=True)
class MinSpec:
    bound: int

    def allows(self, value: RslValue) -> bool:
        return _is_int(value) and value >= self.bound

    def describe(self) -> str:
        return f"min {self.bound}"


@dataclass(frozen=True)
class OrSpec:
    alternatives: tuple

    def __post_init__(self):
        if not self.alternatives:
            raise PolicyError("'or' spec may not be empty")
        object.__setattr__(self, "alternatives", tuple(self.alternatives))

    def allows(self, value: RslValue) -> bool:
        return any(alt.allows(value) for alt in self.alternatives)

    def describe(self) -> str:
        return " or ".join(alt.describe() for alt in self.alternatives)


ValueSpec = EnumSpec | RangeSpec | RegexSpec | MaxSpec | MinSpec | OrSpec


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


# ---------------------------------------------------------------------------
# Assertions, matchers, blocks, documents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MayContain:
    attr: str
    spec: ValueSpec


@dataclass(frozen=True)
class MustContain:
    attr: str
    spec: ValueSpec | None = None


@dataclass(frozen=True)
class MustNotContain:
    attr: str
    spec: ValueSpec | None = None


Assertion = MayContain | MustContain | MustNotContain


@dataclass(frozen=True)
class Identity:
    dn: str


@dataclass(frozen=True)
class Group:
    name: str


@dataclass(frozen=True)
class AnySubject:
    pass


Matcher = Identity | Group | AnySubject


def matcher_matches(matcher: Matcher, subject: str, groups: Iterable[str]) -> bool:
    if isinstance(matcher, Identity):
        return matcher.dn == subject
    if isinstance(matcher, Group):
        return matcher.name in groups
    return True


@dataclass(frozen=True)
class SubjectBlock:
    matcher: Matcher
    allowed_actions: frozenset = frozenset()
    jobtag_grants: Mapping = field(default_factory=dict)
    assertions: tuple = ()
    closed_world: bool = False

    def __post_init__(self):
        object.__setattr__(self, "allowed_actions", frozenset(self.allowed_actions))
        object.__setattr__(self, "assertions", tuple(self.assertions))
        grants = {a: frozenset(tags) for a, tags in dict(self.jobtag_grants).items()}
        if JobAction.START in grants:
            raise MisplacedClauseError("jobtag grants cannot apply to 'start'")
        object.__setattr__(self, "jobtag_grants", grants)

    def allowed_attribute_names(self) -> frozenset:
        """Names a closed-world block accepts in a request."""
        return frozenset(
            a.attr for a in self.assertions if isinstance(a, (MayContain, MustContain))
        )


@dataclass(frozen=True)
class PolicyDocument:
    name: str
    source: str
    blocks: tuple = ()
    trust: tuple = ()
    allocation: int | None = None
    member_quotas: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("resource", "vo"):
            raise PolicyError(f"unknown policy source {self.source!r}")
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "trust", tuple(self.trust))
        object.__setattr__(self, "member_quotas", dict(self.member_quotas))
        if self.source == "resource" and (
            self.allocation is not None or self.member_quotas
        ):
            raise MisplacedClauseError(
                "allocation and member-quota clauses belong to vo documents"
            )
        if self.source == "vo" and self.trust:
            raise MisplacedClauseError("trust clauses belong to resource documents")


def applicable_blocks(doc: PolicyDocument, cred: "GridCredential") -> list:
    """Blocks whose matcher matches the credential, in document order."""
    return [
        b for b in doc.blocks if matcher_matches(b.matcher, cred.subject, cred.groups)
    ]


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_WORD_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_-]*")
_TOKEN_INT_RE = re.compile(r"-?[0-9]+")
_ATTR_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

_ACTIONS = {a.value: a for a in JobAction}


@dataclass(frozen=True)
class _Token:
    kind: str  # word | string | int | sym | eof
    value: object
    line: int
    col: int


def _tokenize(text: str) -> list:
    tokens: list[_Token] = []
    pos, line, col = 0, 1, 1

    def advance(n: int) -> None:
        nonlocal pos, line, col
        for _ in range(n):
            if text[pos] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            pos += 1

    while pos < len(text):
        ch = text[pos]
        if ch in " \t\r\n":
            advance(1)
            continue
        if ch == "#":
            while pos < len(text) and text[pos] != "\n":
                advance(1)
            continue
        tline, tcol = line, col
        if ch == '"':
            advance(1)
            out = []
            while True:
                if pos >= len(text):
                    raise PolicySyntaxError("unterminated string", tline, tcol)
                c = text[pos]
                if c == '"':
                    advance(1)
                    break
                if c == "\\":
                    if pos + 1 >= len(text) or text[pos + 1] not in '"\\':
                        raise PolicySyntaxError("invalid escape", line, col)
                    out.append(text[pos + 1])
                    advance(2)
                else:
                    out.append(c)
                    advance(1)
            tokens.append(_Token("string", "".join(out), tline, tcol))
            continue
        m = _WORD_RE.match(text, pos)
        if m:
            tokens.append(_Token("word", m.group(), tline, tcol))
            advance(len(m.group()))
            continue
        m = _TOKEN_INT_RE.match(text, pos)
        if m:
            tokens.append(_Token("int", int(m.group()), tline, tcol))
            advance(len(m.group()))
            continue
        if text.startswith("..", pos):
            tokens.append(_Token("sym", "..", tline, tcol))
            advance(2)
            continue
        if ch in "{};,":
            tokens.append(_Token("sym", ch, tline, tcol))
            advance(1)
            continue
        raise PolicySyntaxError(f"unexpected character {ch!r}", tline, tcol)
    tokens.append(_Token("eof", None, line, col))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _PolicyParser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.idx = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.idx]

    def error(self, message: str) -> PolicySyntaxError:
        return PolicySyntaxError(message, self.tok.line, self.tok.col)

    def next(self) -> _Token:
        t = self.tok
        self.idx += 1
        return t

    def accept_word(self, word: str) -> bool:
        if self.tok.kind == "word" and self.tok.value == word:
            self.idx += 1
            return True
        return False

    def expect_word(self, word: str) -> None:
        if not self.accept_word(word):
            raise self.error(f"expected '{word}'")

    def expect_sym(self, sym: str) -> None:
        if self.tok.kind == "sym" and self.tok.value == sym:
            self.idx += 1
            return
        raise self.error(f"expected '{sym}'")

    def accept_sym(self, sym: str) -> bool:
        if self.tok.kind == "sym" and self.tok.value == sym:
            self.idx += 1
            return True
        return False

    def expect_string(self) -> str:
        if self.tok.kind != "string":
            raise self.error("expected a quoted string")
        return self.next().value

    def expect_int(self) -> int:
        if self.tok.kind != "int":
            raise self.error("expected an integer")
        return self.next().value

    def parse_document(self) -> PolicyDocument:
        self.expect_word("policy")
        name = self.expect_string()
        self.expect_word("source")
        if self.accept_word("resource"):
            source = "resource"
        elif self.accept_word("vo"):
            source = "vo"
        else:
            raise self.error("expected 'resource' or 'vo'")
        self.expect_sym("{")

        blocks: list[SubjectBlock] = []
        trust: list[str] = []
        allocation: int | None = None
        quotas: dict[str, int] = {}

        while not self.accept_sym("}"):
            if self.tok.kind == "eof":
                raise self.error("unexpected end of policy")
            if self.accept_word("trust"):
                tok = self.tokens[self.idx - 1]
                self.expect_word("vo")
                vo_name = self.expect_string()
                self.expect_sym(";")
                if source != "resource":
                    raise MisplacedClauseError(
                        f"line {tok.line}: trust clauses belong to resource documents"
                    )
                trust.append(vo_name)
            elif self.accept_word("allocation"):
                tok = self.tokens[self.idx - 1]
                amount = self.expect_int()
                self.expect_word("cpu-seconds")
                self.expect_sym(";")
                if source != "vo":
                    raise MisplacedClauseError(
                        f"line {tok.line}: allocation clauses belong to vo documents"
                    )
                if allocation is not None:
                    raise PolicySyntaxError(
                        "duplicate allocation clause", tok.line, tok.col
                    )
                if amount < 0:
                    raise PolicySyntaxError(
                        "allocation must be non-negative", tok.line, tok.col
                    )
                allocation = amount
            elif self.accept_word("member-quota"):
                tok = self.tokens[self.idx - 1]
                dn = self.expect_string()
                amount = self.expect_int()
                self.expect_word("cpu-seconds")
                self.expect_sym(";")
                if source != "vo":
                    raise MisplacedClauseError(
                        f"line {tok.line}: member-quota clauses belong to vo documents"
                    )
                if dn in quotas:
                    raise PolicySyntaxError(
                        f"duplicate member-quota for {dn!r}", tok.line, tok.col
                    )
                if amount < 0:
                    raise PolicySyntaxError(
                        "member-quota must be non-negative", tok.line, tok.col
                    )
                quotas[dn] = amount
            elif self.accept_word("subject"):
                blocks.append(self.parse_block())
            else:
                raise self.error("expected 'subject', 'trust', 'allocation' or 'member-quota'")

        if self.tok.kind != "eof":
            raise self.error("trailing input after policy")
        return PolicyDocument(
            name=name,
            source=source,
            blocks=tuple(blocks),
            trust=tuple(trust),
            allocation=allocation,
            member_quotas=quotas,
        )

    def parse_block(self) -> SubjectBlock:
        if self.accept_word("identity"):
            matcher: Matcher = Identity(self.expect_string())
        elif self.accept_word("group"):
            matcher = Group(self.expect_string())
        elif self.accept_word("any"):
            matcher = AnySubject()
        else:
            raise self.error("expected 'identity', 'group' or 'any'")
        self.expect_sym("{")

        unrestricted: set[JobAction] = set()
        restricted: dict[JobAction, set] = {}
        assertions: list[Assertion] = []
        closed_world = False

        while not self.accept_sym("}"):
            if self.tok.kind == "eof":
                raise self.error("unexpected end of subject block")
            if self.accept_word("allow"):
                tok = self.tokens[self.idx - 1]
                self.expect_word("action")
                actions = [self.parse_action()]
                while self.accept_sym(","):
                    actions.append(self.parse_action())
                tags: list[str] = []
                if self.accept_word("on"):
                    self.expect_word("jobtag")
                    tags.append(self.expect_string())
                    while self.accept_sym(","):
                        tags.append(self.expect_string())
                self.expect_sym(";")
                if tags and JobAction.START in actions:
                    raise MisplacedClauseError(
                        f"line {tok.line}: jobtag grants cannot apply to 'start'"
                    )
                for action in actions:
                    if tags and action not in unrestricted:
                        restricted.setdefault(action, set()).update(tags)
                    elif not tags:
                        unrestricted.add(action)
                        restricted.pop(action, None)
            elif self.accept_word("attr"):
                name = self.parse_attr_name()
                spec = self.parse_spec()
                self.expect_sym(";")
                assertions.append(MayContain(name, spec))
            elif self.accept_word("require"):
                self.expect_word("attr")
                name = self.parse_attr_name()
                spec = None if self.tok.kind == "sym" and self.tok.value == ";" else self.parse_spec()
                self.expect_sym(";")
                assertions.append(MustContain(name, spec))
            elif self.accept_word("forbid"):
                self.expect_word("attr")
                name = self.parse_attr_name()
                spec = None if self.tok.kind == "sym" and self.tok.value == ";" else self.parse_spec()
                self.expect_sym(";")
                assertions.append(MustNotContain(name, spec))
            elif self.accept_word("closed-world"):
                self.expect_sym(";")
                closed_world = True
            else:
                raise self.error(
                    "expected 'allow', 'attr', 'require', 'forbid' or 'closed-world'"
                )

        allowed = unrestricted | set(restricted)
        grants = {a: frozenset(tags) for a, tags in restricted.items()}
        return SubjectBlock(
            matcher=matcher,
            allowed_actions=frozenset(allowed),
            jobtag_grants=grants,
            assertions=tuple(assertions),
            closed_world=closed_world,
        )

    def parse_action(self) -> JobAction:
        if self.tok.kind == "word" and self.tok.value in _ACTIONS:
            return _ACTIONS[self.next().value]
        raise self.error("expected a job action")

    def parse_attr_name(self) -> str:
        if self.tok.kind != "word" or not _ATTR_NAME_RE.match(str(self.tok.value)):
            raise self.error("expected an attribute name")
        return str(self.next().value).lower()

    def parse_spec(self) -> ValueSpec:
        alternatives = [self.parse_primary_spec()]
        while self.accept_word("or"):
            alternatives.append(self.parse_primary_spec())
        if len(alternatives) == 1:
            return alternatives[0]
        return OrSpec(tuple(alternatives))

    def parse_primary_spec(self) -> ValueSpec:
        tok = self.tok
        if self.accept_word("in"):
            self.expect_sym("{")
            values = [self.expect_string()]
            while self.accept_sym(","):
                values.append(self.expect_string())
            self.expect_sym("}")
            return EnumSpec(tuple(values))
        if self.accept_word("range"):
            lo = self.expect_int()
            self.expect_sym("..")
            hi = self.expect_int()
            if lo > hi:
                raise BadRangeError(
                    f"line {tok.line}: empty range {lo}..{hi}"
                )
            return RangeSpec(lo, hi)
        if self.accept_word("matches"):
            pattern = self.expect_string()
            try:
                return RegexSpec(pattern)
            except BadRegexError as exc:
                raise BadRegexError(f"line {tok.line}: {exc}") from None
        if self.accept_word("max"):
            return MaxSpec(self.expect_int())
        if self.accept_word("min"):
            return MinSpec(self.expect_int())
        raise self.error("expected a value spec ('in', 'range', 'matches', 'max', 'min')")


def parse_policy(text: str) -> PolicyDocument:
    """Parse DSL text into a document; all regexes are pre-compiled."""
    return _PolicyParser(text).parse_document()


# ---------------------------------------------------------------------------
# Pretty printer
# ---------------------------------------------------------------------------


def _render_matcher(matcher: Matcher) -> str:
    if isinstance(matcher, Identity):
        return f"identity {quote_string(matcher.dn)}"
    if isinstance(matcher, Group):
        return f"group {quote_string(matcher.name)}"
    return "any"


def _render_assertion(a: Assertion) -> str:
    if isinstance(a, MayContain):
        return f"attr {a.attr} {a.spec.describe()};"
    keyword = "require" if isinstance(a, MustContain) else "forbid"
    if a.spec is None:
        return f"{keyword} attr {a.attr};"
    return f"{keyword} attr {a.attr} {a.spec.describe()};"


def format_policy(doc: PolicyDocument) -> str:
    """Render a document in canonical DSL text; reparsing yields an equal AST."""
    lines = [f"policy {quote_string(doc.name)} source {doc.source} {{"]
    for vo in sorted(doc.trust):
        lines.append(f"  trust vo {quote_string(vo)};")
    if doc.allocation is not None:
        lines.append(f"  allocation {doc.allocation} cpu-seconds;")
    for dn in sorted(doc.member_quotas):
        lines.append(
            f"  member-quota {quote_string(dn)} {doc.member_quotas[dn]} cpu-seconds;"
        )
    for block in doc.blocks:
        lines.append(f"  subject {_render_matcher(block.matcher)} {{")
        plain = sorted(
            (a for a in block.allowed_actions if a not in block.jobtag_grants),
            key=lambda a: a.value,
        )
        for action in plain:
            lines.append(f"    allow action {action.value};")
        for action in sorted(block.jobtag_grants, key=lambda a: a.value):
            tags = ", ".join(
                quote_string(t) for t in sorted(block.jobtag_grants[action])
            )
            lines.append(f"    allow action {action.value} on jobtag {tags};")
        for a in block.assertions:
            lines.append(f"    {_render_assertion(a)}")
        if block.closed_world:
            lines.append("    closed-world;")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Static validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    block: int | None = None


def _interval(spec: ValueSpec):
    if isinstance(spec, RangeSpec):
        return spec.lo, spec.hi
    if isinstance(spec, MaxSpec):
        return None, spec.bound
    if isinstance(spec, MinSpec):
        return spec.bound, None
    return None


def _interval_contains(outer, inner) -> bool:
    olo, ohi = outer
    ilo, ihi = inner
    if olo is not None and (ilo is None or ilo < olo):
        return False
    if ohi is not None and (ihi is None or ihi > ohi):
        return False
    return True


def _spec_implies(required: ValueSpec | None, forbidden: ValueSpec | None) -> bool:
    """Conservatively decide: every value passing ``required`` hits ``forbidden``."""
    if forbidden is None:
        return True
    if required is None:
        return False
    if isinstance(required, OrSpec):
        return all(_spec_implies(alt, forbidden) for alt in required.alternatives)
    if isinstance(required, EnumSpec):
        if any("*" in v for v in required.values):
            return False
        return all(forbidden.allows(v) for v in required.values)
    ri = _interval(required)
    if ri is not None:
        fi = _interval(forbidden)
        if fi is not None:
            return _interval_contains(fi, ri)
        if isinstance(forbidden, OrSpec):
            return any(_spec_implies(required, alt) for alt in forbidden.alternatives)
    return False


def validate_policy(doc: PolicyDocument) -> list:
    """Non-fatal lints; an empty list means the document looks clean."""
    diagnostics: list[Diagnostic] = []
    seen_matchers: dict[Matcher, int] = {}
    for i, block in enumerate(doc.blocks):
        if block.matcher in seen_matchers:
            diagnostics.append(
                Diagnostic(
                    "shadowed-block",
                    f"block {i} repeats the matcher of block {seen_matchers[block.matcher]}",
                    block=i,
                )
            )
        else:
            seen_matchers[block.matcher] = i
        requires = [a for a in block.assertions if isinstance(a, MustContain)]
        forbids = [a for a in block.assertions if isinstance(a, MustNotContain)]
        flagged = False
        for req in requires:
            for forb in forbids:
                if req.attr == forb.attr and _spec_implies(req.spec, forb.spec):
                    diagnostics.append(
                        Diagnostic(
                            "always-deny",
                            f"block {i}: attribute '{req.attr}' is required but "
                            "every acceptable value is forbidden",
                            block=i,
                        )
                    )
                    flagged = True
                    break
            if flagged:
                break
    if doc.allocation is not None:
        for dn in sorted(doc.member_quotas):
            quota = doc.member_quotas[dn]
            if quota > doc.allocation:
                diagnostics.append(
                    Diagnostic(
                        "quota-exceeds-allocation",
                        f"member quota {quota} for {dn!r} exceeds allocation "
                        f"{doc.allocation}",
                    )
                )
    return diagnostics
