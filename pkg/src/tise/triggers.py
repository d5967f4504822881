"""Turn channel samples into named game actions.

A rule watches one channel and fires its action when the sample stream
*enters* the region its predicate describes: the previous sample did not
satisfy it and the current one does.  Once fired, a rule stays silent for
``debounce_ms``.  The first sample a rule sees never fires it.

All comparisons happen on integers in milli-units: scalars as they are,
digital and analog readings multiplied by 1000 (so a pressed button is 1000).

Rule files hold one rule per line::

    # id      channel  predicate         options         action
    jump      0        > 800000          debounce=100 -> jump
    cold      1        between 0 15000                -> shiver
    fire      2        rising            debounce=50  -> shoot

Predicates are ``> N``, ``< N``, ``between LO HI`` (inclusive), ``rising``
and ``falling``; the edge predicates only look at digital samples.
"""

import json
import shlex
from dataclasses import dataclass
from typing import List, Union

from tise.catalog import Digital, as_milli
from tise.errors import BadPredicate, DuplicateRuleId, RuleSyntaxError, TimeRegression

MAX_DEBOUNCE_MS = 10000


@dataclass(frozen=True)
class GreaterThan:
    threshold: int

    def __call__(self, v):
        return v > self.threshold


@dataclass(frozen=True)
class LessThan:
    threshold: int

    def __call__(self, v):
        return v < self.threshold


@dataclass(frozen=True)
class Between:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise BadPredicate(f"between needs lo <= hi, got {self.lo} > {self.hi}")

    def __call__(self, v):
        return self.lo <= v <= self.hi


@dataclass(frozen=True)
class RisingEdge:
    def __call__(self, v):
        return v != 0


@dataclass(frozen=True)
class FallingEdge:
    def __call__(self, v):
        return v == 0


Predicate = Union[GreaterThan, LessThan, Between, RisingEdge, FallingEdge]
EDGE_PREDICATES = (RisingEdge, FallingEdge)


@dataclass(frozen=True)
class TriggerRule:
    rule_id: str
    channel: int
    predicate: Predicate
    debounce_ms: int
    action: str

    def __post_init__(self):
        if not 0 <= self.debounce_ms <= MAX_DEBOUNCE_MS:
            raise ValueError(f"debounce_ms must lie in 0..{MAX_DEBOUNCE_MS}")
        if not 0 <= self.channel <= 0xFF:
            raise ValueError("channel must fit in one byte")


@dataclass(frozen=True)
class ActionEvent:
    t_ms: int
    rule_id: str
    action: str
    sample_value: int

    def to_json(self):
        return json.dumps({"t_ms": self.t_ms, "rule": self.rule_id,
                           "action": self.action, "value": self.sample_value})


def _parse_int(token, what):
    try:
        return int(token, 0)
    except ValueError:
        raise ValueError(f"{what} must be an integer, got {token!r}") from None


def _parse_predicate(tokens):
    head, rest = tokens[0].lower(), tokens[1:]
    if head in (">", "gt"):
        if len(rest) != 1:
            raise BadPredicate("'>' takes one threshold")
        return GreaterThan(_parse_int(rest[0], "threshold"))
    if head in ("<", "lt"):
        if len(rest) != 1:
            raise BadPredicate("'<' takes one threshold")
        return LessThan(_parse_int(rest[0], "threshold"))
    if head == "between":
        if len(rest) != 2:
            raise BadPredicate("between takes two bounds")
        return Between(_parse_int(rest[0], "lower bound"), _parse_int(rest[1], "upper bound"))
    if head in ("rising", "falling"):
        if rest:
            raise BadPredicate(f"{head} takes no arguments")
        return RisingEdge() if head == "rising" else FallingEdge()
    raise BadPredicate(f"unknown predicate {tokens[0]!r}")


def parse_rules(text):
    """Parse a rule file; raises on the first bad line."""
    rules = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        try:
            tokens = shlex.split(line, comments=True)
        except ValueError as exc:
            raise RuleSyntaxError(lineno, str(exc)) from None
        if not tokens:
            continue
        if "->" not in tokens:
            raise RuleSyntaxError(lineno, "missing '-> action'")
        arrow = tokens.index("->")
        if arrow != len(tokens) - 2:
            raise RuleSyntaxError(lineno, "expected exactly one action name after '->'")
        head, action = tokens[:arrow], tokens[-1]
        debounce = 0
        options = [t for t in head if "=" in t]
        head = [t for t in head if "=" not in t]
        try:
            for opt in options:
                key, _, val = opt.partition("=")
                if key != "debounce":
                    raise RuleSyntaxError(lineno, f"unknown option {key!r}")
                debounce = _parse_int(val.removesuffix("ms"), "debounce")
            if len(head) < 3:
                raise RuleSyntaxError(lineno, "expected: <id> <channel> <predicate> ... -> <action>")
            rule_id, channel = head[0], _parse_int(head[1], "channel")
            predicate = _parse_predicate(head[2:])
            rule = TriggerRule(rule_id, channel, predicate, debounce, action)
        except BadPredicate as exc:
            raise BadPredicate(f"line {lineno}: {exc}") from None
        except ValueError as exc:
            raise RuleSyntaxError(lineno, str(exc)) from None
        if rule_id in seen:
            raise DuplicateRuleId(f"line {lineno}: rule id {rule_id!r} already defined")
        seen.add(rule_id)
        rules.append(rule)
    return rules


class _RuleState:
    __slots__ = ("prev", "last_fire")

    def __init__(self):
        self.prev = None
        self.last_fire = None


class TriggerEngine:
    """Stateful evaluator for a fixed rule set.  Feed samples in time order."""

    def __init__(self, rules):
        rules = list(rules)
        ids = [r.rule_id for r in rules]
        if len(set(ids)) != len(ids):
            raise DuplicateRuleId("rule ids must be unique")
        self.rules = sorted(rules, key=lambda r: r.rule_id)
        self._state = {r.rule_id: _RuleState() for r in self.rules}
        self._by_channel = {}
        for r in self.rules:
            self._by_channel.setdefault(r.channel, []).append(r)
        self._last_t = None

    def evaluate_sample(self, t_ms, channel, value) -> List[ActionEvent]:
        if self._last_t is not None and t_ms < self._last_t:
            raise TimeRegression(f"sample at {t_ms} ms after one at {self._last_t} ms")
        self._last_t = t_ms
        v = as_milli(value)
        if v is None:
            return []
        events = []
        for rule in self._by_channel.get(channel, ()):
            is_edge = isinstance(rule.predicate, EDGE_PREDICATES)
            if is_edge and not isinstance(value, Digital):
                continue
            state = self._state[rule.rule_id]
            now = rule.predicate(v)
            if (state.prev is False and now
                    and (state.last_fire is None or t_ms - state.last_fire >= rule.debounce_ms)):
                state.last_fire = t_ms
                events.append(ActionEvent(t_ms, rule.rule_id, rule.action, v))
            state.prev = now
        return events


def evaluate_trace(rules, samples):
    """Run ``(t_ms, channel, value)`` samples through a fresh engine."""
    engine = TriggerEngine(rules)
    out = []
    for t, ch, value in samples:
        out.extend(engine.evaluate_sample(t, ch, value))
    return out
