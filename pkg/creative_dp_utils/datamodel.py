"""
Core domain types and dataset plumbing for personalized creative generation.

Provides:
- Item / Ad / DatasetRecord / CreativeCandidate schemas (pydantic)
- Line-delimited record files (one JSON object per line, UTF-8)
- A word-level vocabulary with reserved special tokens and a tokenizer

Every other module consumes these types; all of them are plain values and are
safe to share read-only across threads.
"""

import hashlib
import json
import re
from collections import Counter
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

ATTRIBUTE_SEPARATOR = " ; "
DEFAULT_MAX_HISTORY = 500
DEFAULT_MAX_ITEM_TOKENS = 64

PAD_TOKEN = "[pad]"
UNK_TOKEN = "[unk]"
BOS_TOKEN = "[bos]"
EOS_TOKEN = "[eos]"
ITEM_TOKEN = "[item]"
USER_TOKEN = "[user]"
SEP_TOKEN = "[sep]"
RESERVED_TOKENS = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, ITEM_TOKEN, USER_TOKEN, SEP_TOKEN]

# leading-space marker: " color" is stored as "▁color"
SPACE_MARKER = "▁"
_TOKEN_PATTERN = re.compile(r" ?\w+| ?[^\w\s]")


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


class RecordFormatError(ValueError):
    """A dataset line could not be parsed; carries the line number and field."""

    def __init__(self, message: str, line_number: int, field: Optional[str] = None):
        location = f"line {line_number}"
        if field:
            location += f", field '{field}'"
        super().__init__(f"{location}: {message}")
        self.line_number = line_number
        self.field = field


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class Item(_Frozen):
    """One element of a user behavior sequence."""

    item_id: str
    title: str
    attributes: List[Tuple[str, str]] = Field(default_factory=list)

    @field_validator("title")
    @classmethod
    def _title_non_empty(cls, value: str) -> str:
        value = normalize_whitespace(value)
        if not value:
            raise ValueError("item title is empty after whitespace normalization")
        return value


class Ad(_Frozen):
    """Target ad: original title, advertiser selling points and optional query."""

    ad_id: str
    original_title: str
    selling_points: List[str] = Field(default_factory=list)
    query: Optional[str] = None
    potential_queries: List[str] = Field(default_factory=list)

    @field_validator("original_title")
    @classmethod
    def _original_title_non_empty(cls, value: str) -> str:
        value = normalize_whitespace(value)
        if not value:
            raise ValueError("original_title is empty")
        return value

    @field_validator("selling_points")
    @classmethod
    def _dedupe_selling_points(cls, values: List[str]) -> List[str]:
        seen = []
        for value in values:
            value = normalize_whitespace(value)
            if not value:
                raise ValueError("selling point entries must be non-empty")
            if value not in seen:
                seen.append(value)
        return seen

    def all_queries(self) -> List[str]:
        """The training query (if any) followed by the unseen potential queries."""
        queries = [self.query] if self.query else []
        for query in self.potential_queries:
            if query not in queries:
                queries.append(query)
        return queries


class DatasetRecord(_Frozen):
    """One training example (history most-recent-last)."""

    user_id: str
    history: List[Item]
    ad: Ad
    interest_text: str = ""
    response: str
    click_labels: Optional[List[Tuple[str, int]]] = None

    @field_validator("history")
    @classmethod
    def _history_non_empty(cls, values: List[Item]) -> List[Item]:
        if not values:
            raise ValueError("history must contain at least one item")
        return values

    @field_validator("response")
    @classmethod
    def _response_non_empty(cls, value: str) -> str:
        value = normalize_whitespace(value)
        if not value:
            raise ValueError("response is empty")
        return value

    @field_validator("interest_text")
    @classmethod
    def _normalize_interest(cls, value: str) -> str:
        return normalize_whitespace(value)

    @field_validator("click_labels")
    @classmethod
    def _binary_labels(cls, values):
        if values is not None:
            for _, label in values:
                if label not in (0, 1):
                    raise ValueError(f"click label must be 0 or 1, got {label}")
        return values

    def truncated(self, max_history: int) -> "DatasetRecord":
        if len(self.history) <= max_history:
            return self
        return self.model_copy(update={"history": self.history[-max_history:]})


class RawLogRow(_Frozen):
    """Datagen input: a click-log row before interests and titles are synthesized."""

    user_id: str
    history: List[Item]
    ad: Ad
    click_labels: Optional[List[Tuple[str, int]]] = None


class GenerationMode(str, Enum):
    QUERY_AWARE = "query-aware"
    QUERY_FREE = "query-free"


class FilterVerdict(_Frozen):
    """Outcome of a filter: pass, or fail with the reason (rule name or findings)."""

    passed: bool
    reason: Optional[str] = None

    @classmethod
    def ok(cls) -> "FilterVerdict":
        return cls(passed=True)

    @classmethod
    def fail(cls, reason: str) -> "FilterVerdict":
        return cls(passed=False, reason=reason)


class CreativeCandidate(_Frozen):
    """A generated title bound to (ad, cluster, mode); verdict None until filtered."""

    ad_id: str
    cluster_id: int = Field(ge=0)
    mode: GenerationMode
    title: str
    match_score: float = Field(ge=0.0, le=1.0)
    query: Optional[str] = None
    verdict: Optional[FilterVerdict] = None

    @property
    def library_key(self) -> Tuple[str, int, str, str]:
        return (self.ad_id, self.cluster_id, self.mode.value, self.title)


def flatten_item_text(item: Item) -> str:
    """
    Flatten an item into one sentence: the title, then each attribute as
    "key: value", joined by " ; ".

    Example:
        >>> flatten_item_text(Item(item_id="1", title="mug", attributes=[("color", "red")]))
        'mug ; color: red'
    """
    parts = [item.title] + [f"{key}: {value}" for key, value in item.attributes]
    return ATTRIBUTE_SEPARATOR.join(parts)


def ad_as_item(ad: Ad) -> Item:
    """The target ad as seen by the item encoder (original title only)."""
    return Item(item_id=ad.ad_id, title=ad.original_title)


# ---------------------------------------------------------------------------
# Record files
# ---------------------------------------------------------------------------

def _first_error_field(error: ValidationError) -> Optional[str]:
    for detail in error.errors():
        if detail.get("loc"):
            return ".".join(str(part) for part in detail["loc"])
    return None


def parse_line(model, line: str, line_number: int):
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as e:
        raise RecordFormatError(f"malformed JSON ({e.msg})", line_number) from e
    if not isinstance(payload, dict):
        raise RecordFormatError("expected a JSON object", line_number)
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        field = _first_error_field(e)
        missing = [d for d in e.errors() if d.get("type") == "missing"]
        message = "missing required field" if missing else e.errors()[0].get("msg", "invalid value")
        raise RecordFormatError(message, line_number, field) from e


def iter_records(path: Union[str, Path], max_history: int = DEFAULT_MAX_HISTORY) -> Iterator[DatasetRecord]:
    """Stream records from a line-delimited file, truncating histories on ingestion."""
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            yield parse_line(DatasetRecord, line, line_number).truncated(max_history)


def read_records(path: Union[str, Path], max_history: int = DEFAULT_MAX_HISTORY) -> List[DatasetRecord]:
    return list(iter_records(path, max_history=max_history))


def _dump(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), ensure_ascii=False)


def write_jsonl(rows: Iterable[BaseModel], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(_dump(row) + "\n")


def write_records(records: Iterable[DatasetRecord], path: Union[str, Path]) -> None:
    write_jsonl(records, path)


def read_raw_logs(path: Union[str, Path], max_history: int = DEFAULT_MAX_HISTORY) -> List[RawLogRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if line.strip():
                row = parse_line(RawLogRow, line, line_number)
                if len(row.history) > max_history:
                    row = row.model_copy(update={"history": row.history[-max_history:]})
                rows.append(row)
    return rows


def write_raw_logs(rows: Iterable[RawLogRow], path: Union[str, Path]) -> None:
    write_jsonl(rows, path)


def read_candidates(path: Union[str, Path]) -> List[CreativeCandidate]:
    with open(path, "r", encoding="utf-8") as f:
        return [
            parse_line(CreativeCandidate, line, n)
            for n, line in enumerate(f, start=1)
            if line.strip()
        ]


def read_ads(path: Union[str, Path]) -> List[Ad]:
    with open(path, "r", encoding="utf-8") as f:
        return [parse_line(Ad, line, n) for n, line in enumerate(f, start=1) if line.strip()]


def collect_ads(records: Iterable[DatasetRecord]) -> List[Ad]:
    """Unique ads in first-seen order; the queries seen with each ad become its potential queries."""
    ads = {}
    queries = {}
    for record in records:
        ad = record.ad
        if ad.ad_id not in ads:
            ads[ad.ad_id] = ad.model_copy(update={"query": None})
            queries[ad.ad_id] = list(ad.potential_queries)
        for query in ad.all_queries():
            if query not in queries[ad.ad_id]:
                queries[ad.ad_id].append(query)
    return [ad.model_copy(update={"potential_queries": queries[ad_id]}) for ad_id, ad in ads.items()]


# ---------------------------------------------------------------------------
# Vocabulary and tokenizer
# ---------------------------------------------------------------------------

def split_words(text: str) -> List[str]:
    """Whitespace-plus-punctuation pieces; a single leading space is folded into the piece."""
    text = normalize_whitespace(text)
    return [piece.replace(" ", SPACE_MARKER) for piece in _TOKEN_PATTERN.findall(text)]


class Vocabulary:
    """
    Token-to-id map with the reserved tokens first.

    The vocabulary file holds one token per line; the line number is the id.
    """

    def __init__(self, tokens: List[str]):
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.token_to_id = {token: idx for idx, token in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1, max_size: Optional[int] = None) -> "Vocabulary":
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        ranked = sorted(
            (token for token, count in counts.items() if count >= min_freq and token not in RESERVED_TOKENS),
            key=lambda token: (-counts[token], token),
        )
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(RESERVED_TOKENS))]
        return cls(RESERVED_TOKENS + ranked)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f])

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS_TOKEN]

    @property
    def item_id(self) -> int:
        return self.token_to_id[ITEM_TOKEN]

    @property
    def user_id(self) -> int:
        return self.token_to_id[USER_TOKEN]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP_TOKEN]


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> List[int]:
    """Token ids of ``text``, truncated to the first ``max_len``; unknown pieces map to [unk]."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    ids = [vocab.token_to_id.get(piece, vocab.unk_id) for piece in split_words(text)]
    return ids[:max_len]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    """
    Inverse of tokenize for in-vocabulary text; reserved tokens are dropped.

    Only a leading marker on a longer piece is a space, so a literal "▁"
    in the text (always its own piece) round-trips.
    """
    reserved = len(RESERVED_TOKENS)
    pieces = [vocab.tokens[i] for i in ids if i >= reserved]
    return "".join(
        " " + piece[1:] if len(piece) > 1 and piece.startswith(SPACE_MARKER) else piece for piece in pieces
    ).strip()


def corpus_texts(records: Iterable[DatasetRecord]) -> Iterator[str]:
    """Every text a model will see: item texts, ad fields, queries, interests, responses."""
    for record in records:
        for item in record.history:
            yield flatten_item_text(item)
        ad = record.ad
        yield ad.original_title
        yield from ad.selling_points
        yield from ad.all_queries()
        if record.interest_text:
            yield record.interest_text
        yield record.response
