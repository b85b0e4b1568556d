"""Static feature extraction and the segmented executable feature vector.

Three static feature families are extracted from an executable -- printable
strings, PE imports, and PE header numerics (plus section entropies) -- and
concatenated after the code vector as

    v = [v_code, v_str, v_num, v_imp]

with named half-open segment ranges retained so that per-feature attributions
can be mapped back to human-readable descriptions.

String and import features share one construction: a vocabulary of "frequent"
tokens (corpus count above a threshold) is frozen on the training corpus;
each feature vector holds the frequency of every frequent token, the count of
uncommon tokens, and a total-count slot.  Extraction is a pure function of
the input bytes and the frozen vocabularies.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .pe import ParsedPE, parse_pe

PRINTABLE_RUN = re.compile(rb"[\x20-\x7e]{5,}")
MIN_STRING_LENGTH = 5
DEFAULT_FREQUENCY_THRESHOLD = 1000

# Fixed header schema: every extraction emits exactly these fields, in order.
HEADER_SCHEMA = (
    "Machine",
    "NumberOfSections",
    "TimeDateStamp",
    "SizeOfOptionalHeader",
    "Characteristics",
    "MajorLinkerVersion",
    "MinorLinkerVersion",
    "SizeOfCode",
    "SizeOfInitializedData",
    "SizeOfUninitializedData",
    "AddressOfEntryPoint",
    "ImageBase",
    "SectionAlignment",
    "FileAlignment",
    "MajorOperatingSystemVersion",
    "MinorOperatingSystemVersion",
    "MajorImageVersion",
    "MinorImageVersion",
    "MajorSubsystemVersion",
    "SizeOfImage",
    "SizeOfHeaders",
    "Checksum",
    "Subsystem",
    "DllCharacteristics",
    "SizeOfStackReserve",
    "SizeOfStackCommit",
    "SizeOfHeapReserve",
    "SizeOfHeapCommit",
    "NumberOfRvaAndSizes",
    "MeanSectionEntropy",
    "MaxSectionEntropy",
)

_DISPLAY_OVERRIDES = {
    "MeanSectionEntropy": "Mean entropy of sections",
    "MaxSectionEntropy": "Maximum entropy of sections",
    "NumberOfRvaAndSizes": "Number of RVA and sizes",
    "TimeDateStamp": "Time date stamp",
    "DllCharacteristics": "DLL characteristics",
}


def header_display_name(field):
    if field in _DISPLAY_OVERRIDES:
        return _DISPLAY_OVERRIDES[field]
    words = re.findall(r"[A-Z][a-z0-9]*", field)
    return (words[0] + " " + " ".join(w.lower() for w in words[1:])).strip()


def extract_printable_strings(data: bytes) -> list[str]:
    """Printable strings in file order.

    A printable string is a maximal run of printable ASCII (0x20-0x7e) that is
    immediately followed by a null byte and spans at least 5 printable bytes
    (the terminator not counted).
    """
    out = []
    for match in PRINTABLE_RUN.finditer(data):
        end = match.end()
        if end < len(data) and data[end] == 0:
            out.append(match.group().decode("ascii"))
    return out


def normalize_import_token(token: str) -> str:
    """DLL names match case-insensitively (loader semantics); functions exactly."""
    return token.lower() if token.lower().endswith(".dll") else token


def import_tokens_from_pe(pe: ParsedPE) -> list[str]:
    """One token per import-table entry: the DLL name per descriptor, then symbols."""
    tokens = []
    seen_dll_runs = []
    for dll, symbol in pe.imports:
        if not seen_dll_runs or seen_dll_runs[-1] != dll:
            tokens.append(normalize_import_token(dll))
            seen_dll_runs.append(dll)
        tokens.append(symbol)
    return tokens


# ---------------------------------------------------------------------------
# vocabularies


@dataclass
class TokenVocabulary:
    """Frozen set of frequent tokens with stable indices and corpus counts."""

    tokens: dict[str, int]
    counts: dict[str, int]
    threshold: int

    def __len__(self):
        return len(self.tokens)

    def index(self, token):
        return self.tokens.get(token)


StringVocabulary = TokenVocabulary
ImportVocabulary = TokenVocabulary


def build_vocabulary(corpus, threshold) -> TokenVocabulary:
    """Tokens whose total corpus count strictly exceeds ``threshold``.

    ``corpus`` iterates per-sample token lists.  Indices are assigned by
    descending count with lexicographic tie-break, so construction is
    deterministic for a given corpus.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts = Counter()
    for tokens in corpus:
        counts.update(tokens)
    frequent = sorted(
        (t for t, c in counts.items() if c > threshold),
        key=lambda t: (-counts[t], t),
    )
    return TokenVocabulary(
        tokens={t: i for i, t in enumerate(frequent)},
        counts={t: counts[t] for t in frequent},
        threshold=int(threshold),
    )


def string_features(strings, vocab: TokenVocabulary) -> np.ndarray:
    """[frequency per frequent string..., uncommon count, total of common ones]."""
    vec = np.zeros(len(vocab) + 2)
    for s in strings:
        idx = vocab.index(s)
        if idx is None:
            vec[len(vocab)] += 1.0
        else:
            vec[idx] += 1.0
            vec[len(vocab) + 1] += 1.0
    return vec


def import_features(import_tokens, vocab: TokenVocabulary) -> np.ndarray:
    """[frequency per frequent import..., uncommon count, total import count]."""
    vec = np.zeros(len(vocab) + 2)
    for token in import_tokens:
        idx = vocab.index(normalize_import_token(token))
        if idx is None:
            vec[len(vocab)] += 1.0
        else:
            vec[idx] += 1.0
    vec[len(vocab) + 1] = float(len(import_tokens))
    return vec


def header_features(pe_or_dict, schema=HEADER_SCHEMA) -> np.ndarray:
    """Header numerics in schema order; absent fields in mappings read as 0."""
    if isinstance(pe_or_dict, (bytes, bytearray)):
        fields = parse_pe(bytes(pe_or_dict)).header_fields
    elif isinstance(pe_or_dict, ParsedPE):
        fields = pe_or_dict.header_fields
    else:
        fields = pe_or_dict
    return np.array([float(fields.get(name, 0.0)) for name in schema])


# ---------------------------------------------------------------------------
# sklearn-style wrappers


class StringFeaturizer(BaseEstimator, TransformerMixin):
    """Fit freezes the frequent-string vocabulary; transform counts against it."""

    def __init__(self, threshold=DEFAULT_FREQUENCY_THRESHOLD):
        self.threshold = threshold

    def fit(self, documents, y=None):
        self.vocabulary_ = build_vocabulary(documents, self.threshold)
        return self

    def transform(self, documents):
        self._check_fitted()
        return np.stack([string_features(doc, self.vocabulary_) for doc in documents])

    def feature_names(self):
        self._check_fitted()
        names = [f'Frequency of the string "{t}"' for t in self.vocabulary_.tokens]
        return names + ["Number of uncommon strings", "Total number of strings"]

    def _check_fitted(self):
        if not hasattr(self, "vocabulary_"):
            raise NotFittedError("StringFeaturizer is not fitted")


class ImportFeaturizer(BaseEstimator, TransformerMixin):
    """Same construction as strings, over DLL-name and function-name tokens."""

    def __init__(self, threshold=DEFAULT_FREQUENCY_THRESHOLD):
        self.threshold = threshold

    def fit(self, documents, y=None):
        normalized = ([normalize_import_token(t) for t in doc] for doc in documents)
        self.vocabulary_ = build_vocabulary(normalized, self.threshold)
        return self

    def transform(self, documents):
        self._check_fitted()
        return np.stack([import_features(doc, self.vocabulary_) for doc in documents])

    def feature_names(self):
        self._check_fitted()
        names = [f'The import of "{t}"' for t in self.vocabulary_.tokens]
        return names + ["Number of uncommon imports", "Total number of PE imports"]

    def _check_fitted(self):
        if not hasattr(self, "vocabulary_"):
            raise NotFittedError("ImportFeaturizer is not fitted")


class HeaderFeaturizer(BaseEstimator, TransformerMixin):
    """Stateless: emits the fixed header schema for PE bytes or field mappings."""

    def __init__(self, schema=HEADER_SCHEMA):
        self.schema = schema

    def fit(self, X=None, y=None):
        return self

    def transform(self, inputs):
        return np.stack([header_features(item, self.schema) for item in inputs])

    def feature_names(self):
        return [header_display_name(f) for f in self.schema]


class FeatureStandardizer(BaseEstimator, TransformerMixin):
    """Z-score standardization with log1p pre-transform on count columns.

    Columns listed in ``log1p_columns`` (string/import frequencies, which are
    heavy-tailed counts) go through log1p before standardization.  Constant
    columns keep scale 1 so they map to exactly 0.
    """

    def __init__(self, log1p_columns=()):
        self.log1p_columns = tuple(log1p_columns)

    def fit(self, X, y=None):
        X = self._pre(np.asarray(X, dtype=np.float64))
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        return self

    def transform(self, X):
        if not hasattr(self, "mean_"):
            raise NotFittedError("FeatureStandardizer is not fitted")
        X = self._pre(np.asarray(X, dtype=np.float64))
        return (X - self.mean_) / self.scale_

    def _pre(self, X):
        if X.ndim != 2:
            raise ValueError(f"expected a 2-d feature matrix, got shape {X.shape}")
        X = X.copy()
        if self.log1p_columns:
            cols = list(self.log1p_columns)
            if np.any(X[:, cols] < 0):
                raise ValueError("log1p columns must be nonnegative counts")
            X[:, cols] = np.log1p(X[:, cols])
        return X


# ---------------------------------------------------------------------------
# segmented feature vector


SEGMENT_ORDER = ("code", "str", "num", "imp")


@dataclass
class SegmentedFeatureVector:
    """Flat feature values with named half-open segment ranges.

    Segments partition [0, len) in the fixed order code, str, num, imp.  Code
    indices all share the display name "Assembly code"; every other index has
    its own human-readable name.
    """

    values: np.ndarray
    segments: dict[str, tuple[int, int]]
    names: list[str]

    def __post_init__(self):
        expected = 0
        for key in SEGMENT_ORDER:
            if key not in self.segments:
                raise ValueError(f"missing segment {key!r}")
            start, end = self.segments[key]
            if start != expected or end < start:
                raise ValueError(f"segment {key!r} range [{start}, {end}) is not contiguous")
            expected = end
        if expected != len(self.values) or len(self.names) != len(self.values):
            raise ValueError("segments and names must cover the value vector exactly")

    def segment(self, name) -> np.ndarray:
        start, end = self.segments[name]
        return self.values[start:end]

    def name_of(self, index) -> str:
        return self.names[index]

    @property
    def width(self):
        return len(self.values)


def assemble_feature_vector(v_code, strings_vec, header_vec, imports_vec,
                            names=None, expected_widths=None) -> SegmentedFeatureVector:
    """Concatenate the four segments in order and record their ranges.

    ``expected_widths``, when given as (code, str, num, imp), guards against
    input that does not match the trained schema.
    """
    parts = [np.asarray(v, dtype=np.float64).reshape(-1)
             for v in (v_code, strings_vec, header_vec, imports_vec)]
    widths = [p.size for p in parts]
    if expected_widths is not None and tuple(widths) != tuple(expected_widths):
        raise ValueError(f"segment widths {tuple(widths)} do not match schema {tuple(expected_widths)}")
    segments = {}
    start = 0
    for key, w in zip(SEGMENT_ORDER, widths):
        segments[key] = (start, start + w)
        start += w
    if names is None:
        names = (["Assembly code"] * widths[0]
                 + [f"str[{i}]" for i in range(widths[1])]
                 + [f"num[{i}]" for i in range(widths[2])]
                 + [f"imp[{i}]" for i in range(widths[3])])
    return SegmentedFeatureVector(np.concatenate(parts), segments, list(names))


# ---------------------------------------------------------------------------
# bundled schema


class FeatureSchema:
    """Frozen vocabularies plus the header schema; owns widths and names."""

    def __init__(self, string_vocab: TokenVocabulary, import_vocab: TokenVocabulary,
                 header_schema=HEADER_SCHEMA):
        self.string_vocab = string_vocab
        self.import_vocab = import_vocab
        self.header_schema = tuple(header_schema)

    @property
    def str_width(self):
        return len(self.string_vocab) + 2

    @property
    def num_width(self):
        return len(self.header_schema)

    @property
    def imp_width(self):
        return len(self.import_vocab) + 2

    @property
    def static_width(self):
        return self.str_width + self.num_width + self.imp_width

    def static_names(self):
        s = [f'Frequency of the string "{t}"' for t in self.string_vocab.tokens]
        s += ["Number of uncommon strings", "Total number of strings"]
        n = [header_display_name(f) for f in self.header_schema]
        i = [f'The import of "{t}"' for t in self.import_vocab.tokens]
        i += ["Number of uncommon imports", "Total number of PE imports"]
        return s + n + i

    def names_with_code(self, code_width):
        return ["Assembly code"] * code_width + self.static_names()

    def log1p_columns(self):
        """Static-matrix columns holding string/import counts (all of str and imp)."""
        str_cols = list(range(self.str_width))
        imp_start = self.str_width + self.num_width
        return str_cols + list(range(imp_start, imp_start + self.imp_width))

    def static_vector(self, strings, import_tokens, header) -> np.ndarray:
        return np.concatenate([
            string_features(strings, self.string_vocab),
            header_features(header, self.header_schema),
            import_features(import_tokens, self.import_vocab),
        ])

    def to_dict(self):
        return {
            "strings": {"tokens": self.string_vocab.tokens,
                        "counts": self.string_vocab.counts,
                        "threshold": self.string_vocab.threshold},
            "imports": {"tokens": self.import_vocab.tokens,
                        "counts": self.import_vocab.counts,
                        "threshold": self.import_vocab.threshold},
            "header_schema": list(self.header_schema),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            TokenVocabulary(dict(d["strings"]["tokens"]),
                            {k: int(v) for k, v in d["strings"]["counts"].items()},
                            int(d["strings"]["threshold"])),
            TokenVocabulary(dict(d["imports"]["tokens"]),
                            {k: int(v) for k, v in d["imports"]["counts"].items()},
                            int(d["imports"]["threshold"])),
            tuple(d["header_schema"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))
