"""Nested key-value documents.

Model files, scenario configs and machine-readable reports all share one
plain-text format:

    section:
      key: 1 2 3        # values are whitespace-separated tokens
      nested:
        flag: on

Rules: two-space-style indentation (any consistent width, spaces only),
'#' starts a comment, a line ending in ':' opens a nested section, and
keys must be unique within their section.  The parser keeps the source
line of every entry so that loaders can point at the offending line when
a value violates a schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class DocError(ValueError):
    """Parse or schema violation, prefixed with the source line."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass
class Entry:
    key: str
    line: int
    tokens: list[str] | None = None   # scalar entry
    section: "Doc | None" = None      # nested entry


@dataclass
class Doc:
    """Ordered mapping of keys to scalar or nested entries."""

    line: int = 0
    entries: dict[str, Entry] = field(default_factory=dict)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def keys(self):
        return self.entries.keys()


def _scan(text: str) -> list[tuple[int, int, str, list[str], bool]]:
    items = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped_of_comment = raw.split("#", 1)[0].rstrip()
        if not stripped_of_comment.strip():
            continue
        head = stripped_of_comment[: len(stripped_of_comment) - len(stripped_of_comment.lstrip())]
        if "\t" in head:
            raise DocError(lineno, "tabs are not allowed in indentation")
        indent = len(head)
        body = stripped_of_comment.strip()
        if ":" not in body:
            raise DocError(lineno, f"expected 'key:' or 'key: value', got {body!r}")
        key, rest = body.split(":", 1)
        key = key.strip()
        if not key or any(c.isspace() for c in key):
            raise DocError(lineno, f"malformed key {key!r}")
        tokens = rest.split()
        items.append((lineno, indent, key, tokens, not rest.strip()))
    return items


def _parse_block(items, pos: int, indent: int) -> tuple[Doc, int]:
    doc = Doc(line=items[pos][0] if pos < len(items) else 0)
    while pos < len(items):
        lineno, ind, key, tokens, opens = items[pos]
        if ind < indent:
            break
        if ind > indent:
            raise DocError(lineno, f"unexpected indent ({ind} spaces, expected {indent})")
        if key in doc.entries:
            raise DocError(lineno, f"duplicate key '{key}'")
        pos += 1
        if not opens:
            doc.entries[key] = Entry(key, lineno, tokens=tokens)
        else:
            child = Doc(line=lineno)
            if pos < len(items) and items[pos][1] > ind:
                child, pos = _parse_block(items, pos, items[pos][1])
                child.line = lineno
            doc.entries[key] = Entry(key, lineno, section=child)
    return doc, pos


def parse(text: str) -> Doc:
    items = _scan(text)
    if not items:
        return Doc()
    if items[0][1] != 0:
        raise DocError(items[0][0], "top-level entries must not be indented")
    doc, pos = _parse_block(items, 0, 0)
    if pos != len(items):
        raise DocError(items[pos][0], "inconsistent indentation")
    return doc


class View:
    """Schema-checking cursor over a parsed document.

    Loaders read known keys through the typed accessors; ``finish()``
    then rejects anything left over, so unknown keys fail loudly with
    their line number instead of being silently ignored.
    """

    def __init__(self, doc: Doc, path: str = ""):
        self._doc = doc
        self._path = path
        self._seen: set[str] = set()

    @property
    def line(self) -> int:
        return self._doc.line

    def _label(self, key: str) -> str:
        return f"{self._path}.{key}" if self._path else key

    def _entry(self, key: str, required: bool) -> Entry | None:
        self._seen.add(key)
        entry = self._doc.entries.get(key)
        if entry is None and required:
            raise DocError(self._doc.line, f"missing required key '{self._label(key)}'")
        return entry

    def has(self, key: str) -> bool:
        return key in self._doc.entries

    def is_section(self, key: str) -> bool:
        entry = self._doc.entries.get(key)
        return entry is not None and entry.section is not None

    def line_of(self, key: str) -> int:
        entry = self._doc.entries.get(key)
        return self._doc.line if entry is None else entry.line

    def keys(self):
        return list(self._doc.entries.keys())

    def section(self, key: str, required: bool = True) -> "View | None":
        entry = self._entry(key, required)
        if entry is None:
            return None
        if entry.section is None:
            raise DocError(entry.line, f"'{self._label(key)}' must be a section")
        return View(entry.section, self._label(key))

    def tokens(self, key: str, count: int | None = None,
               default: list[str] | None = None, required: bool = True) -> list[str] | None:
        entry = self._entry(key, required and default is None)
        if entry is None:
            return default
        if entry.tokens is None:
            raise DocError(entry.line, f"'{self._label(key)}' must be a value, not a section")
        if count is not None and len(entry.tokens) != count:
            raise DocError(entry.line,
                           f"'{self._label(key)}' expects {count} values, got {len(entry.tokens)}")
        return entry.tokens

    def floats(self, key: str, count: int, default=None, required: bool = True):
        toks = self.tokens(key, count, None if default is None else list(map(str, default)),
                           required)
        if toks is None:
            return None
        entry = self._doc.entries.get(key)
        line = entry.line if entry is not None else self._doc.line
        out = []
        for t in toks:
            try:
                out.append(float(t))
            except ValueError:
                raise DocError(line, f"'{self._label(key)}': {t!r} is not a number") from None
        return out

    def float(self, key: str, default=None, required: bool = True):
        vals = self.floats(key, 1, None if default is None else [default], required)
        return None if vals is None else vals[0]

    def int(self, key: str, default=None, required: bool = True):
        toks = self.tokens(key, 1, None if default is None else [str(default)], required)
        if toks is None:
            return None
        entry = self._doc.entries.get(key)
        line = entry.line if entry is not None else self._doc.line
        try:
            return int(toks[0])
        except ValueError:
            raise DocError(line, f"'{self._label(key)}': {toks[0]!r} is not an integer") from None

    def str(self, key: str, default=None, required: bool = True):
        toks = self.tokens(key, 1, None if default is None else [default], required)
        return None if toks is None else toks[0]

    def flag(self, key: str, default=None, required: bool = True):
        toks = self.tokens(key, 1, None if default is None else [default], required)
        if toks is None:
            return None
        entry = self._doc.entries.get(key)
        line = entry.line if entry is not None else self._doc.line
        val = toks[0].lower()
        if val in ("on", "true", "yes", "1"):
            return True
        if val in ("off", "false", "no", "0"):
            return False
        raise DocError(line, f"'{self._label(key)}': {toks[0]!r} is not on/off")

    def finish(self):
        for key, entry in self._doc.entries.items():
            if key not in self._seen:
                raise DocError(entry.line, f"unknown key '{self._label(key)}'")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, (list, tuple)) or hasattr(value, "tolist"):
        seq = value.tolist() if hasattr(value, "tolist") else value
        return " ".join(_format_value(v) for v in seq)
    return str(value)


def emit(mapping: dict, indent: int = 0) -> str:
    """Render a nested dict as document text.  Floats use %.17g so the
    emitted value parses back to the identical float64."""
    pad = " " * indent
    lines = []
    for key, value in mapping.items():
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.append(emit(value, indent + 2))
        else:
            lines.append(f"{pad}{key}: {_format_value(value)}")
    return "\n".join(line for line in lines if line != "")
