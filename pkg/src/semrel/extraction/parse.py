"""Parsers for free-text chat responses: aspect lists, sectioned descriptions, orderings."""

from __future__ import annotations

import re
from typing import Mapping, Sequence

_BULLET = re.compile(r"^\s*(?:[-*•+]|\d+[.)]|\(\d+\))\s+(.*\S)\s*$")
_NUMBERING = re.compile(r"^\s*(?:#+\s*)?(?:\*\*|__)?\s*(?:\(\d+\)|\d+[.)])?\s*")
_ABBR = re.compile(r"\(\s*([A-Za-z][A-Za-z&/]{0,5})\s*\)")
_STOP = {"and", "of", "with", "the", "to", "in", "on", "for", "a", "an", "or"}


def norm_key(name: str) -> str:
    """Case/punctuation-insensitive key used to merge aspect names."""
    return " ".join(re.sub(r"[^\w\s]", "", name.lower()).split())


def loose_key(name: str) -> str:
    """Like :func:`norm_key` but also ignores plural ``s`` on each word."""
    return " ".join(w[:-1] if len(w) > 3 and w.endswith("s") else w for w in norm_key(name).split())


def _strip_markup(s: str) -> str:
    return s.replace("**", "").replace("__", "").replace("`", "").strip()


def initials(name: str) -> str:
    words = [w for w in re.findall(r"[A-Za-z]+", name) if w.lower() not in _STOP]
    return "".join(w[0].upper() for w in words) or name[:1].upper()


def parse_aspect_list(text: str) -> list[tuple[str, str | None]]:
    """Aspect ``(name, abbreviation or None)`` pairs from a bulleted/numbered list.

    Duplicate names within one response (ignoring case) are kept once.
    """
    out, seen = [], set()
    for line in (text or "").splitlines():
        m = _BULLET.match(line)
        if not m:
            continue
        item = _strip_markup(m.group(1))
        abbr_m = _ABBR.search(item)
        abbr = abbr_m.group(1) if abbr_m else None
        name = item[: abbr_m.start()] if abbr_m else item
        name = re.split(r":|\s[-\u2013\u2014]\s", name, maxsplit=1)[0]
        name = _strip_markup(name).strip(" .;,")
        key = norm_key(name)
        if not key or key in seen:
            continue
        seen.add(key)
        out.append((name, abbr))
    return out


def _heading_match(line: str, aspects: Mapping[str, str]) -> tuple[str, str] | None:
    """``(abbr, inline text)`` if ``line`` opens a section for one of ``aspects`` (abbr -> name)."""
    rest = _NUMBERING.sub("", line, count=1)
    rest = rest.lstrip("#* ").strip()
    if not rest:
        return None
    head, sep, body = rest.partition(":")
    head = _strip_markup(head)
    abbr_m = _ABBR.search(head)
    head_abbr = abbr_m.group(1) if abbr_m else None
    head_name = head[: abbr_m.start()] if abbr_m else head
    for abbr, name in aspects.items():
        if loose_key(head_name) == loose_key(name) or (not head_name.strip() and head_abbr == abbr) or head.strip() == abbr:
            return abbr, _strip_markup(body)
    return None


def parse_descriptions(text: str, aspects: Mapping[str, str]) -> dict[str, str]:
    """Split a sectioned response into ``abbr -> description``.

    Sections are matched by heading name, not position; missing sections
    come back as empty strings.
    """
    found: dict[str, list[str]] = {}
    current = None
    for line in (text or "").splitlines():
        hit = _heading_match(line, aspects)
        if hit is not None:
            current = hit[0]
            found.setdefault(current, [])
            if hit[1]:
                found[current].append(hit[1])
        elif current is not None and line.strip():
            found[current].append(line.strip())
    return {abbr: " ".join(found.get(abbr, [])).strip() for abbr in aspects}


def _match_piece(piece: str, aspects: Mapping[str, str]) -> str | None:
    piece = _strip_markup(_NUMBERING.sub("", piece, count=1))
    candidates = [piece] + piece.split(":")
    for cand in candidates:
        token = cand.strip().strip(".;,()*\"'").strip()
        if not token:
            continue
        for abbr in aspects:
            if token == abbr or token.upper() == abbr.upper() and len(token) > 1:
                return abbr
        lk = loose_key(token)
        hits = [(lk.find(loose_key(name)), abbr) for abbr, name in aspects.items() if loose_key(name) in lk]
        if hits:
            return min(hits)[1]
    return None


def parse_ranking(text: str, aspects: Mapping[str, str]) -> list[str]:
    """Ordered abbreviations mentioned in a ranking response.

    Understands ``"I > A > E"``, comma lists and numbered lists of names or
    abbreviations. The result is not validated; see :func:`is_permutation`.
    """
    lines = [ln for ln in (text or "").splitlines() if ln.strip()]
    arrow = [ln for ln in lines if ">" in ln]
    if arrow:
        pieces = arrow[0].split(">")
    elif len(lines) == 1:
        pieces = re.split(r"[,;]", lines[0])
    else:
        pieces = lines
    out = []
    for piece in pieces:
        m = _match_piece(piece, aspects)
        if m is not None:
            out.append(m)
    return out


def is_permutation(order: Sequence[str], slots: Sequence[str]) -> bool:
    return len(order) == len(slots) and sorted(order) == sorted(slots)
