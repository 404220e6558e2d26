"""Document ingestion, sentence segmentation, and chunking.

Segmentation is rule-based (terminal punctuation, abbreviation exceptions,
decimal guard) so that identical inputs always produce identical corpora.
Chunking slides a sentence window with configurable overlap; sentence
boundaries are never split across chunks.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

# Trailing-dot abbreviations that must not end a sentence. Stored without the
# final period, lowercased; multi-dot forms keep their internal dots.
ABBREVIATIONS = frozenset({
    "dr", "mr", "mrs", "ms", "prof", "rev", "gen", "sen", "rep", "hon",
    "jr", "sr", "st", "vs", "etc", "e.g", "i.e", "cf", "al", "fig",
    "no", "inc", "ltd", "co", "corp", "dept", "est", "approx",
    "a.m", "p.m", "u.s", "u.k",
})

_TERMINAL = ".!?"


class CorpusError(Exception):
    """Raised for unreadable or empty inputs and malformed corpus files."""


@dataclass(frozen=True)
class Sentence:
    """One sentence plus the whitespace needed to rebuild the parent text.

    ``leading`` is the gap between the previous sentence (or start of text)
    and this sentence; ``trailing`` is non-empty only on the final sentence
    of a parent and holds end-of-text whitespace.
    """

    parent_id: str
    index: int
    text: str
    leading: str = ""
    trailing: str = ""


def join_sentences(sentences: list[Sentence]) -> str:
    """Rebuild the exact parent text from segmented sentences."""
    return "".join(s.leading + s.text + s.trailing for s in sentences)


def _is_abbreviation(text: str, dot_index: int) -> bool:
    """True if the period at ``dot_index`` ends a known abbreviation."""
    j = dot_index
    start = j
    while start > 0 and (text[start - 1].isalpha() or text[start - 1] == "."):
        start -= 1
    word = text[start:j].rstrip(".").lower()
    return word in ABBREVIATIONS


def segment_sentences(text: str, parent_id: str = "") -> list[Sentence]:
    """Split text into sentences at terminal punctuation.

    Rules: a run of ``.!?`` followed by whitespace or end-of-text closes a
    sentence, unless the period ends a shipped abbreviation, sits inside a
    number (decimal guard: a period with digits on both sides is never a
    boundary, and a bare list number like "3." does not end a sentence), or
    the candidate sentence would be empty. A blank line also closes a
    sentence, which keeps markdown headings out of body sentences. Text with
    no boundary yields a single sentence. Lossless: ``join_sentences``
    restores ``text`` exactly.
    """
    boundaries: list[int] = []  # exclusive end index of each sentence's content
    n = len(text)
    i = 0
    last = 0
    while i < n:
        ch = text[i]
        if ch in _TERMINAL:
            run_end = i
            while run_end + 1 < n and text[run_end + 1] in _TERMINAL:
                run_end += 1
            follows = text[run_end + 1] if run_end + 1 < n else ""
            suppress = False
            if follows and not follows.isspace():
                suppress = True  # mid-token punctuation, e.g. the dot in 3.14
            elif ch == "." and run_end == i:
                if _is_abbreviation(text, i):
                    suppress = True
                elif i > 0 and text[i - 1].isdigit() and text[last:i].strip().isdigit():
                    suppress = True  # list marker such as "2. " at sentence start
            if not suppress:
                boundaries.append(run_end + 1)
                last = run_end + 1
            i = run_end + 1
            continue
        if ch == "\n":
            # Blank line = paragraph break = boundary at the preceding content.
            k = i + 1
            while k < n and text[k] in " \t":
                k += 1
            if k < n and text[k] == "\n":
                boundaries.append(i)
                last = i
        i += 1

    sentences: list[Sentence] = []
    cursor = 0
    prev_gap = ""
    for end in sorted(set(boundaries)):
        raw = text[cursor:end]
        stripped = raw.strip()
        if not stripped:
            continue
        lead_len = len(raw) - len(raw.lstrip())
        content_end = cursor + lead_len + len(raw[lead_len:].rstrip())
        sentences.append(Sentence(
            parent_id=parent_id,
            index=len(sentences),
            text=text[cursor + lead_len:content_end],
            leading=prev_gap + raw[:lead_len],
        ))
        prev_gap = text[content_end:end]
        cursor = end
    tail = text[cursor:]
    if tail.strip():
        lead_len = len(tail) - len(tail.lstrip())
        content = tail.strip()
        sentences.append(Sentence(
            parent_id=parent_id,
            index=len(sentences),
            text=content,
            leading=prev_gap + tail[:lead_len],
            trailing=tail[lead_len + len(content):],
        ))
    elif sentences:
        last = sentences[-1]
        sentences[-1] = replace(last, trailing=prev_gap + tail)
    elif text:
        # Whitespace-only input round-trips as one blank-text sentence.
        sentences.append(Sentence(parent_id=parent_id, index=0, text="", leading=text))
    return sentences


def token_count(text: str) -> int:
    """Whitespace-delimited word count; the token estimate used everywhere."""
    return len(text.split())


_TERM_RE = re.compile(r"[a-z][a-z0-9]+")


def tokenize_terms(text: str) -> list[str]:
    """Lowercased alphanumeric terms of length >= 2, for keyword scoring."""
    return _TERM_RE.findall(text.lower())


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    index: int
    sentences: tuple[Sentence, ...]
    token_estimate: int

    @property
    def text(self) -> str:
        return " ".join(s.text for s in self.sentences)

    @property
    def sentence_indices(self) -> tuple[int, ...]:
        return tuple(s.index for s in self.sentences)


@dataclass(frozen=True)
class Document:
    doc_id: str
    source_path: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ChunkingConfig:
    """Chunk window limits.

    A chunk closes when adding the next sentence would exceed ``max_tokens``
    or ``max_sentences``. A single sentence larger than ``max_tokens`` still
    forms its own chunk (sentences are never split), so only such oversized
    singletons may exceed the token budget.
    """

    max_tokens: int = 200
    max_sentences: int = 8
    overlap: int = 1

    def validate(self) -> None:
        if self.max_tokens < 1:
            raise CorpusError("max_tokens must be >= 1")
        if self.max_sentences < 1:
            raise CorpusError("max_sentences must be >= 1")
        if self.overlap < 0 or self.overlap >= self.max_sentences:
            raise CorpusError("overlap must satisfy 0 <= overlap < max_sentences")


@dataclass
class Corpus:
    documents: list[Document]
    chunks: list[Chunk]

    def chunk_by_id(self, chunk_id: str) -> Chunk:
        for c in self.chunks:
            if c.chunk_id == chunk_id:
                return c
        raise KeyError(chunk_id)


def _flatten_markdown(text: str) -> str:
    """Reduce markdown structure to plain text, preserving sentence content."""
    out = re.sub(r"```.*?```", "", text, flags=re.DOTALL)
    out = re.sub(r"^#{1,6}\s+", "", out, flags=re.MULTILINE)
    out = re.sub(r"^\s*[-*+]\s+", "", out, flags=re.MULTILINE)
    out = re.sub(r"^\s*>\s?", "", out, flags=re.MULTILINE)
    out = re.sub(r"\[([^\]]*)\]\([^)]*\)", r"\1", out)
    out = re.sub(r"[*_`]{1,3}([^*_`]+)[*_`]{1,3}", r"\1", out)
    return out


def chunk_sentences(sentences: list[Sentence], doc_id: str, config: ChunkingConfig) -> list[Chunk]:
    """Slide a sentence window of at most max_sentences/max_tokens with overlap."""
    chunks: list[Chunk] = []
    n = len(sentences)
    start = 0
    while start < n:
        end = start
        tokens = 0
        while end < n and (end - start) < config.max_sentences:
            t = token_count(sentences[end].text)
            if end > start and tokens + t > config.max_tokens:
                break
            tokens += t
            end += 1
        window = tuple(sentences[start:end])
        chunks.append(Chunk(
            chunk_id=f"{doc_id}:{len(chunks):04d}",
            doc_id=doc_id,
            index=len(chunks),
            sentences=window,
            token_estimate=sum(token_count(s.text) for s in window),
        ))
        if end >= n:
            break
        next_start = end - config.overlap
        start = next_start if next_start > start else start + 1
    return chunks


def ingest(paths: list[str | Path], config: ChunkingConfig | None = None) -> Corpus:
    """Build a Corpus from text/markdown files or directories of them.

    doc_ids are content hashes of the raw bytes, so identical inputs yield
    identical corpora. Empty files are rejected; unreadable files collect
    per-file errors and the run aborts only if every file fails.
    """
    config = config or ChunkingConfig()
    config.validate()

    files: list[Path] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            files.extend(sorted(q for q in path.rglob("*") if q.suffix in (".txt", ".md") and q.is_file()))
        else:
            files.append(path)
    if not files:
        raise CorpusError("no input files found")

    documents: list[Document] = []
    chunks: list[Chunk] = []
    errors: list[str] = []
    for path in files:
        try:
            raw = path.read_bytes()
        except OSError as exc:
            errors.append(f"{path}: {exc}")
            continue
        text = raw.decode("utf-8")
        if path.suffix == ".md":
            text = _flatten_markdown(text)
        if not text.strip():
            errors.append(f"{path}: empty after ingestion")
            continue
        doc_id = "doc-" + hashlib.sha256(raw).hexdigest()[:12]
        documents.append(Document(
            doc_id=doc_id,
            source_path=str(path),
            text=text,
            metadata={"filename": path.name},
        ))
        sentences = segment_sentences(text, parent_id=doc_id)
        chunks.extend(chunk_sentences(sentences, doc_id, config))

    if not documents:
        raise CorpusError("all input files failed: " + "; ".join(errors))
    if errors:
        import warnings

        warnings.warn(f"{len(errors)} input file(s) skipped: " + "; ".join(errors))
    return Corpus(documents=documents, chunks=chunks)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Serialize one chunk per JSONL line; byte-stable for identical corpora."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in corpus.chunks:
            fh.write(json.dumps({
                "chunk_id": c.chunk_id,
                "doc_id": c.doc_id,
                "sentences": [
                    {"index": s.index, "text": s.text, "leading": s.leading, "trailing": s.trailing}
                    for s in c.sentences
                ],
                "token_estimate": c.token_estimate,
            }, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    chunks: list[Chunk] = []
    doc_ids: dict[str, None] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            sentences = tuple(
                Sentence(parent_id=rec["doc_id"], index=s["index"], text=s["text"],
                         leading=s["leading"], trailing=s["trailing"])
                for s in rec["sentences"]
            )
            idx = int(rec["chunk_id"].rsplit(":", 1)[1])
            chunks.append(Chunk(
                chunk_id=rec["chunk_id"], doc_id=rec["doc_id"], index=idx,
                sentences=sentences, token_estimate=rec["token_estimate"],
            ))
            doc_ids.setdefault(rec["doc_id"])
    documents = [Document(doc_id=d, source_path="", text="") for d in doc_ids]
    return Corpus(documents=documents, chunks=chunks)
