"""
Versioned line-oriented artifact files.

Every artifact starts with ``#kforge-<kind> v1``, optionally followed by
``#meta key=value ...`` and ``#records N`` lines, then one record per line.
"""

import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

from .errors import CorruptArtifactError, FormatVersionError, LoadError

FORMAT_VERSION = "v1"

PathLike = Union[str, Path]

_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\t": "\\t", "\r": "\\r"}
_UNESCAPE_RE = re.compile(r"\\(.)")
_UNESCAPES = {"\\": "\\", "n": "\n", "t": "\t", "r": "\r"}


def header_for(kind: str) -> str:
    return f"#kforge-{kind} {FORMAT_VERSION}"


def escape_text(text: str) -> str:
    """Escape backslash, newline, tab and CR so the text fits one TSV cell."""
    return "".join(_ESCAPES.get(ch, ch) for ch in text)


def unescape_text(text: str) -> str:
    def _sub(match: "re.Match[str]") -> str:
        try:
            return _UNESCAPES[match.group(1)]
        except KeyError:
            raise CorruptArtifactError(f"unknown escape sequence \\{match.group(1)}") from None

    return _UNESCAPE_RE.sub(_sub, text)


def write_artifact(
    path: PathLike,
    kind: str,
    records: Iterable[str],
    meta: Optional[Dict[str, str]] = None,
    count_records: bool = False,
) -> None:
    """
    Write an artifact file.

    Args:
        path: destination file
        kind: artifact kind, e.g. ``pages``
        records: one string per record, no trailing newline
        meta: provenance fields written on a ``#meta`` line
        count_records: also write a ``#records N`` guard line
    """
    records = list(records)
    lines = [header_for(kind)]
    if meta:
        lines.append("#meta " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)))
    if count_records:
        lines.append(f"#records {len(records)}")
    lines.extend(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_artifact(path: PathLike, kind: str) -> Tuple[Dict[str, str], List[str]]:
    """
    Read an artifact file written by :func:`write_artifact`.

    Returns:
        (meta, records); ``meta`` includes ``records`` when a guard line exists

    Raises:
        LoadError: file missing or not UTF-8
        FormatVersionError: header does not match ``kind`` and version
        CorruptArtifactError: record count disagrees with the guard line
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise LoadError(f"{path}: file not found") from None
    except (OSError, UnicodeDecodeError) as e:
        raise LoadError(f"{path}: cannot read ({e})") from None

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    expected = header_for(kind)
    found = lines[0] if lines else ""
    if found != expected:
        raise FormatVersionError(str(path), expected, found)

    meta: Dict[str, str] = {}
    body_start = 1
    for line in lines[1:]:
        if line.startswith("#meta "):
            for token in line[len("#meta "):].split():
                key, _, value = token.partition("=")
                meta[key] = value
        elif line.startswith("#records "):
            meta["records"] = line[len("#records "):].strip()
        else:
            break
        body_start += 1

    records = lines[body_start:]
    if "records" in meta:
        try:
            expected_count = int(meta["records"])
        except ValueError:
            raise CorruptArtifactError(f"{path}: record count '{meta['records']}' is not an integer") from None
        if expected_count != len(records):
            raise CorruptArtifactError(
                f"{path}: header announces {expected_count} records, found {len(records)}"
            )
    return meta, records
