"""Dataset and dictionary handling for acronym disambiguation.

Covers loading/validating the JSON dataset and dictionary formats, the toy
whitespace vocabulary, candidate sampling for contrastive training, split
statistics, and a deterministic synthetic corpus generator used by the
end-to-end tests.

All text is normalized by whitespace splitting plus lowercasing; there is no
subword model.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import EmptyCorpusError, FormatError, ParameterError, ValidationError

RESERVED_TOKENS = ("[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]")
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(len(RESERVED_TOKENS))

SPLITS = ("train", "dev", "test")


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization with lowercasing."""
    return text.lower().split()


def normalize_phrase(phrase: str) -> str:
    return " ".join(tokenize(phrase))


# ---------------------------------------------------------------------------
# Dictionary


@dataclass
class Dictionary:
    """Map from short form to its ordered list of candidate long forms."""

    entries: dict[str, list[str]]

    def candidates(self, short_form: str) -> list[str]:
        try:
            return self.entries[short_form]
        except KeyError:
            raise LookupError(f"unknown short form: {short_form!r}") from None

    def num_candidates(self, short_form: str) -> int:
        return len(self.candidates(short_form))

    def short_forms(self) -> list[str]:
        return list(self.entries)

    def __contains__(self, short_form: str) -> bool:
        return short_form in self.entries

    def phrase_token_set(self) -> set[str]:
        toks: set[str] = set()
        for phrases in self.entries.values():
            for phrase in phrases:
                toks.update(tokenize(phrase))
        return toks


def _validate_dictionary(entries: dict[str, list[str]]) -> None:
    for short, phrases in entries.items():
        if not phrases:
            raise ValidationError(f"short form {short!r} has no candidates")
        seen: set[str] = set()
        for phrase in phrases:
            if not phrase:
                raise ValidationError(f"short form {short!r} has an empty candidate")
            if phrase in seen:
                raise ValidationError(
                    f"duplicate candidate {phrase!r} under short form {short!r}"
                )
            seen.add(phrase)


def load_dictionary(path: str | Path) -> Dictionary:
    """Load the dictionary JSON file (object mapping short form -> [long form])."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"dictionary file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"dictionary file {path}: expected a JSON object")
    entries: dict[str, list[str]] = {}
    for short, phrases in raw.items():
        if not isinstance(phrases, list) or not all(isinstance(p, str) for p in phrases):
            raise FormatError(
                f"dictionary file {path}: candidates of {short!r} must be strings"
            )
        entries[short.lower()] = [normalize_phrase(p) for p in phrases]
    _validate_dictionary(entries)
    return Dictionary(entries)


def save_dictionary(dictionary: Dictionary, path: str | Path) -> None:
    """Write the canonical serialization (sorted keys, 2-space indent)."""
    text = json.dumps(dictionary.entries, indent=2, sort_keys=True, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Examples


@dataclass
class AcronymExample:
    """One sentence with a marked acronym span and, when labeled, its gold long form."""

    id: str
    tokens: list[str]
    acronym_span: tuple[int, int]
    short_form: str
    gold_long_form: str | None = None
    split: str = "train"

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def is_labeled(self) -> bool:
        return self.gold_long_form is not None


def _span_from_raw(raw, example_id: str, n: int) -> tuple[int, int]:
    if isinstance(raw, bool):
        raise ValidationError(f"example {example_id!r}: bad acronym span {raw!r}")
    if isinstance(raw, int):
        span = (raw, raw + 1)
    elif isinstance(raw, list) and len(raw) == 2 and all(isinstance(v, int) for v in raw):
        span = (raw[0], raw[1])
    else:
        raise ValidationError(f"example {example_id!r}: bad acronym span {raw!r}")
    start, end = span
    if not (0 <= start < end <= n):
        raise ValidationError(
            f"example {example_id!r}: acronym span {span} outside sentence of length {n}"
        )
    return span


def truncate_example(ex: AcronymExample, max_sequence_length: int) -> AcronymExample:
    """Truncate to ``max_sequence_length`` tokens, keeping a window centered on the span.

    The acronym span itself is never dropped.
    """
    n = ex.n
    if n <= max_sequence_length:
        return ex
    start, end = ex.acronym_span
    if end - start > max_sequence_length:
        raise ValidationError(
            f"example {ex.id!r}: acronym span longer than max_sequence_length"
        )
    center = (start + end) // 2
    window_start = center - max_sequence_length // 2
    window_start = max(0, min(window_start, n - max_sequence_length))
    # keep the whole span inside the window
    window_start = min(window_start, start)
    window_start = max(window_start, end - max_sequence_length)
    window_end = window_start + max_sequence_length
    return replace(
        ex,
        tokens=ex.tokens[window_start:window_end],
        acronym_span=(start - window_start, end - window_start),
    )


def load_dataset(
    path: str | Path,
    dictionary: Dictionary,
    split: str = "train",
    max_sequence_length: int = 300,
) -> list[AcronymExample]:
    """Load a dataset JSON file and validate every example against the dictionary."""
    if split not in SPLITS:
        raise ParameterError(f"unknown split {split!r}")
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"dataset file {path}: {exc}") from exc
    if not isinstance(raw, list):
        raise FormatError(f"dataset file {path}: expected a JSON array")
    examples = []
    for record in raw:
        if not isinstance(record, dict) or "id" not in record or "tokens" not in record:
            raise FormatError(f"dataset file {path}: malformed record {record!r}")
        ex_id = str(record["id"])
        tokens = [t.lower() for t in record["tokens"]]
        span = _span_from_raw(record.get("acronym"), ex_id, len(tokens))
        short_form = " ".join(tokens[span[0] : span[1]])
        gold = record.get("label")
        if gold is not None:
            gold = normalize_phrase(gold)
            if short_form not in dictionary:
                raise ValidationError(
                    f"example {ex_id!r}: short form {short_form!r} not in dictionary"
                )
            if gold not in dictionary.candidates(short_form):
                raise ValidationError(
                    f"example {ex_id!r}: gold label {gold!r} not a candidate of {short_form!r}"
                )
        ex = AcronymExample(
            id=ex_id,
            tokens=tokens,
            acronym_span=span,
            short_form=short_form,
            gold_long_form=gold,
            split=split,
        )
        examples.append(truncate_example(ex, max_sequence_length))
    return examples


def example_to_record(ex: AcronymExample) -> dict:
    record = {"id": ex.id, "tokens": ex.tokens, "acronym": list(ex.acronym_span)}
    if ex.gold_long_form is not None:
        record["label"] = ex.gold_long_form
    return record


def save_dataset(examples: list[AcronymExample], path: str | Path) -> None:
    """Write the canonical dataset serialization."""
    records = [example_to_record(ex) for ex in examples]
    text = json.dumps(records, indent=2, sort_keys=True, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Vocabulary


@dataclass
class Vocabulary:
    """Bijective token <-> id map with fixed reserved ids."""

    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = [""] * len(self.token_to_id)
            for tok, idx in self.token_to_id.items():
                self.id_to_token[idx] = tok

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocabulary(
    examples: list[AcronymExample],
    dictionary: Dictionary,
    min_freq: int = 1,
) -> Vocabulary:
    """Reserved tokens, then corpus tokens with frequency >= min_freq, then any
    remaining dictionary phrase tokens.

    Ordering is (-frequency, token) for corpus tokens and sorted for dictionary
    extras, so the result is deterministic for a given input.
    """
    if min_freq < 1:
        raise ParameterError("min_freq must be >= 1")
    if not examples:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    freqs: Counter[str] = Counter()
    for ex in examples:
        freqs.update(ex.tokens)
    if not freqs:
        raise EmptyCorpusError("corpus contains no tokens")
    token_to_id = {tok: idx for idx, tok in enumerate(RESERVED_TOKENS)}
    corpus_tokens = sorted(
        (t for t, c in freqs.items() if c >= min_freq and t not in token_to_id),
        key=lambda t: (-freqs[t], t),
    )
    for tok in corpus_tokens:
        token_to_id[tok] = len(token_to_id)
    for tok in sorted(dictionary.phrase_token_set()):
        if tok not in token_to_id:
            token_to_id[tok] = len(token_to_id)
    return Vocabulary(token_to_id)


# ---------------------------------------------------------------------------
# Candidate sampling


@dataclass
class CandidateSet:
    """Positive long form and sampled negatives for one labeled example."""

    example_id: str
    positive: str
    negatives: list[str]
    ratio: int
    underfilled: bool = False

    def all_phrases(self) -> list[str]:
        return [self.positive, *self.negatives]


def sample_candidates(
    ex: AcronymExample,
    dictionary: Dictionary,
    ratio: int,
    seed: int,
) -> CandidateSet:
    """Draw up to ``ratio`` negatives: same-acronym candidates first, then a
    deterministic sample from other short forms' candidate lists.
    """
    if not ex.is_labeled:
        raise ValidationError(f"example {ex.id!r} is unlabeled; cannot sample candidates")
    if ratio < 0:
        raise ParameterError("ratio must be >= 0")
    gold = ex.gold_long_form
    rng = random.Random(seed)
    same = [c for c in dictionary.candidates(ex.short_form) if c != gold]
    if len(same) >= ratio:
        negatives = same[:ratio] if len(same) == ratio else rng.sample(same, ratio)
    else:
        negatives = list(same)
        pool = []
        for short in sorted(dictionary.short_forms()):
            if short == ex.short_form:
                continue
            for cand in dictionary.candidates(short):
                if cand != gold and cand not in negatives and cand not in pool:
                    pool.append(cand)
        need = ratio - len(negatives)
        if pool:
            negatives.extend(rng.sample(pool, min(need, len(pool))))
    return CandidateSet(
        example_id=ex.id,
        positive=gold,
        negatives=negatives,
        ratio=ratio,
        underfilled=len(negatives) < ratio,
    )


# ---------------------------------------------------------------------------
# Split statistics


@dataclass
class SplitStats:
    counts: dict[str, int]
    ratios: dict[str, float]
    total: int


def split_stats(examples: list[AcronymExample]) -> SplitStats:
    """Per-split counts and percentages of the total (2-decimal rounding)."""
    counts = {s: 0 for s in SPLITS}
    for ex in examples:
        counts[ex.split] = counts.get(ex.split, 0) + 1
    total = sum(counts.values())
    if total == 0:
        ratios = {s: 0.0 for s in counts}
    else:
        ratios = {s: round(100.0 * c / total, 2) for s, c in counts.items()}
    return SplitStats(counts=counts, ratios=ratios, total=total)


# ---------------------------------------------------------------------------
# Synthetic corpus


def generate_synthetic(
    num_acronyms: int,
    senses_per_acronym: int,
    examples_per_sense: int,
    cue_strength: float,
    seed: int,
    out_dir: str | Path | None = None,
    cues_per_sense: int = 3,
    num_fillers: int = 30,
) -> tuple[list[AcronymExample], Dictionary]:
    """Deterministic synthetic corpus for end-to-end verification.

    Each (acronym, sense) pair owns ``cues_per_sense`` distinct cue tokens:
    the sense's own long-form tokens plus extra sense-specific tokens.  Every
    cue is inserted into a sentence independently with probability
    ``cue_strength`` (1.0: all present in every sentence; 0.0: the sense is
    statistically independent of the context).  The acronym token appears
    exactly once per sentence.  Examples are split 80/10/10 per sense so every
    sense is represented in every split.
    """
    if min(num_acronyms, senses_per_acronym, examples_per_sense) < 1:
        raise ParameterError("all synthetic corpus counts must be >= 1")
    if not (0.0 <= cue_strength <= 1.0):
        raise ParameterError("cue_strength must be in [0, 1]")
    rng = random.Random(seed)
    fillers = [f"w{i:02d}" for i in range(num_fillers)]

    entries: dict[str, list[str]] = {}
    cue_tokens: dict[tuple[int, int], list[str]] = {}
    for q in range(num_acronyms):
        short = f"ac{q}"
        entries[short] = [
            f"s{q}_{s}_x s{q}_{s}_y" for s in range(senses_per_acronym)
        ]
        for s in range(senses_per_acronym):
            phrase_toks = entries[short][s].split()
            extra = [f"c{q}_{s}_{j}" for j in range(max(0, cues_per_sense - len(phrase_toks)))]
            cue_tokens[(q, s)] = (phrase_toks + extra)[:cues_per_sense]
    dictionary = Dictionary(entries)

    n_dev = round(examples_per_sense * 0.1)
    n_test = round(examples_per_sense * 0.1)
    n_train = examples_per_sense - n_dev - n_test

    by_split: dict[str, list[AcronymExample]] = {s: [] for s in SPLITS}
    for q in range(num_acronyms):
        short = f"ac{q}"
        for s in range(senses_per_acronym):
            gold = entries[short][s]
            for k in range(examples_per_sense):
                if k < n_train:
                    split = "train"
                elif k < n_train + n_dev:
                    split = "dev"
                else:
                    split = "test"
                length = rng.randint(10, 16)
                tokens = [rng.choice(fillers) for _ in range(length)]
                tokens.insert(rng.randrange(len(tokens) + 1), short)
                for cue in cue_tokens[(q, s)]:
                    if rng.random() < cue_strength:
                        tokens.insert(rng.randrange(len(tokens) + 1), cue)
                pos = tokens.index(short)
                by_split[split].append(
                    AcronymExample(
                        id=f"{short}-{s}-{k:03d}",
                        tokens=tokens,
                        acronym_span=(pos, pos + 1),
                        short_form=short,
                        gold_long_form=gold,
                        split=split,
                    )
                )
    for split in SPLITS:
        rng.shuffle(by_split[split])

    examples = [ex for split in SPLITS for ex in by_split[split]]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            save_dataset(by_split[split], out / f"{split}.json")
        save_dictionary(dictionary, out / "dictionary.json")
    return examples, dictionary
