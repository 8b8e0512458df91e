"""Attack-rule scripting: XML parser, match predicate, and frame rewriter.

A script is an XML document:

    <IAML>
      <Change PacketToChange="RESPONSE">
        <Query>
          <QueryEntry Key="TYPE" Value="REQUEST"/>
          <QueryEntry Key="ADDRESS" Value="130"/>
        </Query>
        <NewValues>
          <NewValueEntry Key="DATA" Value="0,0"/>
        </NewValues>
      </Change>
    </IAML>

Query entries are AND-ed; TYPE is mandatory and says whether the criteria
refer to the request or the response side of an exchange (a RESPONSE change
may match on REQUEST criteria, which arms a rewrite of the matching-TID
response). New values may be arithmetic expressions over the original value
X; arithmetic wraps modulo 2^16 so evaluation is total, and '/' is floor
division.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from . import modbus as mb

QUERY_KEYS = ("TYPE", "PLC_IP", "GLOBAL_STAGE", "LOCAL_STAGE", "FUNCTION",
              "WORD_COUNT", "ADDRESS")
NEWVALUE_KEYS = ("GLOBAL_STAGE", "LOCAL_STAGE", "FUNCTION", "STARTING_ADDRESS",
                 "DATA")
INT_QUERY_KEYS = ("GLOBAL_STAGE", "LOCAL_STAGE", "FUNCTION", "WORD_COUNT",
                  "ADDRESS")

REQUEST = "REQUEST"
RESPONSE = "RESPONSE"

MOD = 1 << 16


class IamlError(ValueError):
    """Script rejected at load time; message names the offending element."""


class RuleError(RuntimeError):
    """Rule failed against a concrete frame; callers should fail open."""


# --- expressions ------------------------------------------------------------
# expr := term (('+'|'-') term)*
# term := factor (('*'|'/') factor)*
# factor := integer | 'X' | '(' expr ')'
# AST nodes: int | "X" | (op, left, right)

Node = Union[int, str, Tuple]


def parse_expr(text: str) -> Node:
    tokens = _tokenize(text)
    pos = 0

    def peek() -> Optional[str]:
        return tokens[pos] if pos < len(tokens) else None

    def take() -> str:
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        return tok

    def expr() -> Node:
        node = term()
        while peek() in ("+", "-"):
            node = (take(), node, term())
        return node

    def term() -> Node:
        node = factor()
        while peek() in ("*", "/"):
            node = (take(), node, factor())
        return node

    def factor() -> Node:
        tok = peek()
        if tok is None:
            raise IamlError(f"expression {text!r} ends unexpectedly")
        if tok == "(":
            take()
            node = expr()
            if peek() != ")":
                raise IamlError(f"unbalanced parentheses in {text!r}")
            take()
            return node
        if tok == "X":
            take()
            return "X"
        if tok.isdigit():
            take()
            return int(tok)
        raise IamlError(f"unexpected token {tok!r} in expression {text!r}")

    node = expr()
    if pos != len(tokens):
        raise IamlError(f"trailing tokens after expression in {text!r}")
    return node


def _tokenize(text: str) -> List[str]:
    out: List[str] = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "+-*/()X":
            out.append(c)
            i += 1
        elif c.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            out.append(text[i:j])
            i = j
        else:
            raise IamlError(f"bad character {c!r} at position {i} in expression {text!r}")
    if not out:
        raise IamlError("empty expression")
    return out


def fold_const(node: Node) -> Optional[int]:
    """Constant value of an X-free subtree, else None."""
    if isinstance(node, int):
        return node % MOD
    if node == "X":
        return None
    op, left, right = node
    a, b = fold_const(left), fold_const(right)
    if op == "/" and b == 0:
        raise IamlError("constant division by zero")
    if a is None or b is None:
        return None
    if op == "/":
        return (a // b) % MOD
    if op == "+":
        return (a + b) % MOD
    if op == "-":
        return (a - b) % MOD
    return (a * b) % MOD


def eval_expr(node: Node, x: int) -> int:
    """Evaluate with X bound; every intermediate wraps modulo 2^16."""
    if isinstance(node, int):
        return node % MOD
    if node == "X":
        return x % MOD
    op, left, right = node
    a, b = eval_expr(left, x), eval_expr(right, x)
    if op == "+":
        return (a + b) % MOD
    if op == "-":
        return (a - b) % MOD
    if op == "*":
        return (a * b) % MOD
    if b == 0:
        raise RuleError("division by zero at evaluation time")
    return (a // b) % MOD


_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def expr_text(node: Node) -> str:
    """Render an AST back to source with minimal parentheses."""
    if isinstance(node, int):
        return str(node)
    if node == "X":
        return "X"
    op, left, right = node
    p = _PRECEDENCE[op]

    def side(child: Node, right_side: bool) -> str:
        text = expr_text(child)
        if isinstance(child, tuple):
            cp = _PRECEDENCE[child[0]]
            # parse is left-associative, so an equal-precedence right child
            # needs parentheses to reproduce the same tree
            if cp < p or (cp == p and right_side):
                return f"({text})"
        return text

    return f"{side(left, False)}{op}{side(right, True)}"


# --- rules ------------------------------------------------------------------

@dataclass(frozen=True)
class AttackRule:
    packet_to_change: str
    query: Tuple[Tuple[str, str], ...]
    new_values: Tuple[Tuple[str, str], ...]
    index: int = field(default=0, compare=False)

    def query_value(self, key: str) -> Optional[str]:
        for k, v in self.query:
            if k == key:
                return v
        return None

    @property
    def match_type(self) -> str:
        return self.query_value("TYPE")  # validated present at parse


@dataclass
class StageState:
    global_stage: int = 0
    local_stage: Dict[str, int] = field(default_factory=dict)

    def local(self, plc_id: str) -> int:
        return self.local_stage.get(plc_id, 0)

    def copy(self) -> "StageState":
        return StageState(self.global_stage, dict(self.local_stage))


@dataclass(frozen=True)
class PacketMeta:
    """View of one frame for rule matching."""

    ptype: str                       # REQUEST or RESPONSE
    plc_id: str                      # configured identity, e.g. "10.0.0.5:502"
    kind: mb.MessageKind
    function: int
    start_address: Optional[int] = None   # read requests
    word_count: Optional[int] = None      # read requests / responses
    address: Optional[int] = None         # single-register/coil writes


def packet_meta(frame: mb.ModbusFrame, ptype: str, plc_id: str) -> PacketMeta:
    direction = mb.Direction.QUERY if ptype == REQUEST else mb.Direction.RESPONSE
    info = mb.describe(frame, direction)
    return PacketMeta(
        ptype=ptype,
        plc_id=plc_id,
        kind=info.kind,
        function=frame.function,
        start_address=info.start_address,
        word_count=info.word_count,
        address=info.address,
    )


def parse(document: str) -> List[AttackRule]:
    """Parse and validate a script; rules come back in document order."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as e:
        raise IamlError(f"not well-formed XML: {e}") from e
    if root.tag != "IAML":
        raise IamlError(f"root element must be IAML, got {root.tag}")
    rules: List[AttackRule] = []
    for i, change in enumerate(root):
        where = f"Change[{i}]"
        if change.tag != "Change":
            raise IamlError(f"unexpected element {change.tag} under IAML")
        ptc = change.get("PacketToChange")
        if ptc not in (REQUEST, RESPONSE):
            raise IamlError(f"{where}: PacketToChange must be REQUEST or RESPONSE, got {ptc!r}")
        extra = set(change.keys()) - {"PacketToChange"}
        if extra:
            raise IamlError(f"{where}: unknown attributes {sorted(extra)}")
        query: List[Tuple[str, str]] = []
        new_values: List[Tuple[str, str]] = []
        seen_tags = []
        for child in change:
            seen_tags.append(child.tag)
            if child.tag == "Query":
                query.extend(_entries(child, "QueryEntry", QUERY_KEYS, f"{where}/Query"))
            elif child.tag == "NewValues":
                new_values.extend(
                    _entries(child, "NewValueEntry", NEWVALUE_KEYS, f"{where}/NewValues"))
            else:
                raise IamlError(f"{where}: unexpected element {child.tag}")
        if seen_tags.count("Query") != 1 or seen_tags.count("NewValues") != 1:
            raise IamlError(f"{where}: needs exactly one Query and one NewValues")
        rule = AttackRule(
            packet_to_change=ptc,
            query=tuple(query),
            new_values=tuple(new_values),
            index=i,
        )
        _validate_rule(rule, where)
        rules.append(rule)
    return rules


def _entries(parent: ET.Element, tag: str, allowed: Tuple[str, ...],
             where: str) -> List[Tuple[str, str]]:
    out: List[Tuple[str, str]] = []
    for child in parent:
        if child.tag != tag:
            raise IamlError(f"{where}: unexpected element {child.tag}")
        key, value = child.get("Key"), child.get("Value")
        if key is None or value is None:
            raise IamlError(f"{where}/{tag}: needs Key and Value attributes")
        if key not in allowed:
            raise IamlError(f"{where}/{tag}: unknown key {key!r}")
        extra = set(child.keys()) - {"Key", "Value"}
        if extra:
            raise IamlError(f"{where}/{tag}: unknown attributes {sorted(extra)}")
        out.append((key, value))
    return out


def _validate_rule(rule: AttackRule, where: str) -> None:
    keys = [k for k, _ in rule.query]
    if keys.count("TYPE") != 1:
        raise IamlError(f"{where}/Query: exactly one TYPE entry required")
    dupes = {k for k in keys if keys.count(k) > 1}
    if dupes:
        raise IamlError(f"{where}/Query: duplicate keys {sorted(dupes)}")
    mtype = rule.query_value("TYPE")
    if mtype not in (REQUEST, RESPONSE):
        raise IamlError(f"{where}/Query: TYPE must be REQUEST or RESPONSE, got {mtype!r}")
    if rule.packet_to_change == REQUEST and mtype == RESPONSE:
        raise IamlError(
            f"{where}: a REQUEST change cannot match on RESPONSE criteria; the request "
            "is already forwarded by the time its response exists")
    for key, value in rule.query:
        if key in INT_QUERY_KEYS and not _is_int(value):
            raise IamlError(f"{where}/Query: {key} needs an integer, got {value!r}")
    nkeys = [k for k, _ in rule.new_values]
    ndupes = {k for k in nkeys if nkeys.count(k) > 1}
    if ndupes:
        raise IamlError(f"{where}/NewValues: duplicate keys {sorted(ndupes)}")
    if not rule.new_values:
        raise IamlError(f"{where}/NewValues: at least one entry required")
    for key, value in rule.new_values:
        if key == "DATA":
            for part in value.split(","):
                try:
                    node = parse_expr(part)
                    fold_const(node)  # rejects constant division by zero
                except IamlError as e:
                    raise IamlError(f"{where}/NewValues DATA: {e}") from e
        elif not _is_int(value):
            raise IamlError(f"{where}/NewValues: {key} needs an integer, got {value!r}")


def _is_int(text: str) -> bool:
    try:
        int(text)
        return True
    except ValueError:
        return False


def parse_file(path: str) -> List[AttackRule]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read())


def print_rules(rules: List[AttackRule]) -> str:
    """Canonical printer: parse(print_rules(rules)) == rules."""
    root = ET.Element("IAML")
    for rule in rules:
        change = ET.SubElement(root, "Change", PacketToChange=rule.packet_to_change)
        query = ET.SubElement(change, "Query")
        for key, value in rule.query:
            ET.SubElement(query, "QueryEntry", Key=key, Value=value)
        new_values = ET.SubElement(change, "NewValues")
        for key, value in rule.new_values:
            ET.SubElement(new_values, "NewValueEntry", Key=key, Value=value)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


# --- matching and rewriting -------------------------------------------------

def match(rule: AttackRule, meta: PacketMeta, stages: StageState) -> bool:
    """Pure conjunction over the rule's query entries."""
    for key, value in rule.query:
        if key == "TYPE":
            if value != meta.ptype:
                return False
        elif key == "PLC_IP":
            if value != meta.plc_id:
                return False
        elif key == "GLOBAL_STAGE":
            if int(value) != stages.global_stage:
                return False
        elif key == "LOCAL_STAGE":
            if int(value) != stages.local(meta.plc_id):
                return False
        elif key == "FUNCTION":
            if int(value) != meta.function:
                return False
        elif key == "WORD_COUNT":
            if meta.word_count is None or int(value) != meta.word_count:
                return False
        elif key == "ADDRESS":
            k = int(value)
            if meta.start_address is not None and meta.word_count is not None:
                if not meta.start_address <= k < meta.start_address + meta.word_count:
                    return False
            elif meta.address is not None:
                if k != meta.address:
                    return False
            else:
                return False  # no address information on this frame shape
    return True


def apply(rule: AttackRule, frame: mb.ModbusFrame, meta: PacketMeta,
          stages: StageState) -> Tuple[mb.ModbusFrame, StageState]:
    """Rewrite a frame under a matched rule.

    Returns the new frame and updated stages. The payload length never
    changes: rewrites only overwrite 16-bit fields in place. Raises
    RuleError when the rule does not fit the frame shape; callers forward
    the original frame in that case.
    """
    function = frame.function
    payload = bytearray(frame.payload)
    new_stages = stages.copy()
    for key, value in rule.new_values:
        if key == "GLOBAL_STAGE":
            new_stages.global_stage = int(value)
        elif key == "LOCAL_STAGE":
            new_stages.local_stage[meta.plc_id] = int(value)
        elif key == "FUNCTION":
            function = int(value)
        elif key == "STARTING_ADDRESS":
            if meta.kind not in (mb.MessageKind.READ_REQUEST,
                                 mb.MessageKind.WRITE_COIL_REQUEST,
                                 mb.MessageKind.WRITE_COIL_RESPONSE,
                                 mb.MessageKind.OTHER) or len(payload) < 4:
                raise RuleError("frame has no address field to rewrite")
            addr = int(value) % MOD
            payload[0:2] = addr.to_bytes(2, "big")
        elif key == "DATA":
            _apply_data(value, meta, payload)
    new_frame = mb.ModbusFrame(
        header=frame.header, function=function, payload=bytes(payload))
    if len(new_frame.payload) != len(frame.payload):
        raise RuleError("rewrite changed payload length")  # structurally unreachable
    return new_frame, new_stages


def _apply_data(value: str, meta: PacketMeta, payload: bytearray) -> None:
    exprs = [parse_expr(part) for part in value.split(",")]
    if meta.kind is mb.MessageKind.READ_RESPONSE:
        count = payload[0] // 2
        if len(exprs) > count:
            raise RuleError(f"{len(exprs)} DATA expressions for {count} value slots")
        for i, node in enumerate(exprs):
            offset = 1 + 2 * i
            x = int.from_bytes(payload[offset:offset + 2], "big")
            payload[offset:offset + 2] = eval_expr(node, x).to_bytes(2, "big")
    elif meta.kind in (mb.MessageKind.WRITE_COIL_REQUEST,
                       mb.MessageKind.WRITE_COIL_RESPONSE,
                       mb.MessageKind.OTHER):
        if len(payload) < 4:
            raise RuleError("frame has no value field")
        if len(exprs) != 1:
            raise RuleError(f"{len(exprs)} DATA expressions for a single value slot")
        x = int.from_bytes(payload[2:4], "big")
        payload[2:4] = eval_expr(exprs[0], x).to_bytes(2, "big")
    else:
        raise RuleError(f"DATA does not apply to {meta.kind.value} frames")


def first_match(rules: List[AttackRule], packet_to_change: str, meta: PacketMeta,
                stages: StageState) -> Optional[AttackRule]:
    """First rule in document order with the given change side that matches."""
    for rule in rules:
        if rule.packet_to_change != packet_to_change:
            continue
        if rule.match_type != meta.ptype:
            continue
        if match(rule, meta, stages):
            return rule
    return None
