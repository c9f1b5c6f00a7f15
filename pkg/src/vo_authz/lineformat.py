"""Shared tokenizer for the line-oriented config and command formats.

All the artifact's text formats follow the same conventions: UTF-8,
newline-delimited, ``#`` starts a comment, blank lines are ignored,
fields are whitespace-separated, and a field may be double-quoted when
it contains spaces (distinguished names do). No escape sequences exist
inside quotes; a literal ``"`` is not representable and is rejected by
the field validators upstream.
"""

from __future__ import annotations


class LineFormatError(ValueError):
    """A line could not be tokenized (unterminated quote, stray text)."""


def split_fields(line: str) -> list[str]:
    """Split one line into fields, honoring quotes and ``#`` comments."""
    fields: list[str] = []
    i, n = 0, len(line)
    while i < n:
        while i < n and line[i].isspace():
            i += 1
        if i >= n or line[i] == "#":
            break
        if line[i] == '"':
            end = line.find('"', i + 1)
            if end < 0:
                raise LineFormatError("unterminated quote")
            fields.append(line[i + 1:end])
            i = end + 1
            if i < n and not line[i].isspace() and line[i] != "#":
                raise LineFormatError("text abuts closing quote")
        else:
            start = i
            while i < n and not line[i].isspace() and line[i] != "#":
                i += 1
            fields.append(line[start:i])
    return fields


def quote_field(value: str) -> str:
    """Quote a field for writing if the tokenizer would split or eat it."""
    if value == "" or any(c.isspace() for c in value) or "#" in value:
        return '"%s"' % value
    return value


def iter_content_lines(text: str):
    """Yield (line_number, fields) for every non-empty, non-comment line."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = split_fields(raw)
        if fields:
            yield lineno, fields


def parse_kv_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` configuration text.

    Values keep everything after the first ``=`` (trimmed); surrounding
    double quotes on the whole value are preserved so list-valued keys
    can be re-tokenized by the caller.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise LineFormatError("line %d: expected key=value" % lineno)
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise LineFormatError("line %d: empty key" % lineno)
        out[key] = value.strip()
    return out


def split_quoted_list(value: str) -> list[str]:
    """Split a comma-separated list whose items may be double-quoted."""
    items: list[str] = []
    i, n = 0, len(value)
    while i < n:
        while i < n and (value[i].isspace() or value[i] == ","):
            i += 1
        if i >= n:
            break
        if value[i] == '"':
            end = value.find('"', i + 1)
            if end < 0:
                raise LineFormatError("unterminated quote in list")
            items.append(value[i + 1:end])
            i = end + 1
        else:
            start = i
            while i < n and value[i] != ",":
                i += 1
            items.append(value[start:i].strip())
    return [item for item in items if item]
