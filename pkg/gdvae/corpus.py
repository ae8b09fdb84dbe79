"""Admission corpora: loading, thresholding, splitting and synthesis."""

import hashlib
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

logger = logging.getLogger("gdvae.corpus")


class CorpusError(ValueError):
    """Raised for malformed admission files, specs, or degenerate corpora."""


@dataclass(frozen=True)
class AdmissionRecord:
    """One admission: disease codes, procedure codes and a type label."""

    id: str
    diseases: FrozenSet[str]
    procedures: FrozenSet[str]
    type_label: str

    @property
    def codes(self) -> FrozenSet[str]:
        return self.diseases | self.procedures

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "diseases": sorted(self.diseases),
                "procedures": sorted(self.procedures),
                "type": self.type_label,
            },
            sort_keys=True,
        )


class Vocabulary:
    """Lexicographically ordered code list with a stable code -> index bijection."""

    def __init__(self, codes: Iterable[str], kind: str):
        """Initialize the vocabulary.

        Args:
            codes: Code strings, duplicates ignored
            kind: ``disease`` or ``procedure``
        """
        if kind not in ("disease", "procedure"):
            raise CorpusError(f"Unknown vocabulary kind: {kind}")
        self.kind = kind
        self.codes: List[str] = sorted(set(codes))
        self.index: Dict[str, int] = {code: i for i, code in enumerate(self.codes)}

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: object) -> bool:
        return code in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.kind == other.kind and self.codes == other.codes

    def __repr__(self) -> str:
        return f"Vocabulary(kind={self.kind!r}, size={len(self.codes)})"


@dataclass
class Corpus:
    """Admissions with their disease/procedure vocabularies and ordered label set."""

    admissions: List[AdmissionRecord]
    disease_vocab: Vocabulary
    procedure_vocab: Vocabulary
    labels: List[str]
    _by_id: Dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.admissions:
            raise CorpusError("Corpus has no admissions")
        self._by_id = {adm.id: i for i, adm in enumerate(self.admissions)}
        label_set = set(self.labels)
        for adm in self.admissions:
            missing = [c for c in adm.diseases if c not in self.disease_vocab]
            missing += [c for c in adm.procedures if c not in self.procedure_vocab]
            if missing:
                raise CorpusError(f"Admission {adm.id} has codes outside the vocabulary: {sorted(missing)}")
            if adm.type_label not in label_set:
                raise CorpusError(f"Admission {adm.id} has unknown label {adm.type_label!r}")

    def __len__(self) -> int:
        return len(self.admissions)

    @property
    def ids(self) -> List[str]:
        return [adm.id for adm in self.admissions]

    def position(self, admission_id: str) -> int:
        """Index of an admission in corpus order."""
        try:
            return self._by_id[admission_id]
        except KeyError:
            raise CorpusError(f"Unknown admission id: {admission_id}") from None

    def get(self, admission_id: str) -> AdmissionRecord:
        return self.admissions[self.position(admission_id)]

    def label_index(self, label: str) -> int:
        return self.labels.index(label)

    @classmethod
    def from_records(cls, records: Sequence[AdmissionRecord]) -> "Corpus":
        """Build a corpus whose vocabularies contain exactly the observed codes."""
        diseases: Set[str] = set()
        procedures: Set[str] = set()
        for rec in records:
            diseases.update(rec.diseases)
            procedures.update(rec.procedures)
        labels = sorted({rec.type_label for rec in records})
        return cls(list(records), Vocabulary(diseases, "disease"), Vocabulary(procedures, "procedure"), labels)


def _parse_record(line: str, lineno: int) -> AdmissionRecord:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusError(f"Line {lineno}: malformed record ({e.msg})") from e
    if not isinstance(raw, dict):
        raise CorpusError(f"Line {lineno}: expected an object")
    for key, kind in (("id", str), ("diseases", list), ("procedures", list), ("type", str)):
        if not isinstance(raw.get(key), kind):
            raise CorpusError(f"Line {lineno}: field {key!r} missing or not a {kind.__name__}")
    for key in ("diseases", "procedures"):
        if not all(isinstance(code, str) for code in raw[key]):
            raise CorpusError(f"Line {lineno}: field {key!r} must hold strings")
        if len(set(raw[key])) != len(raw[key]):
            raise CorpusError(f"Line {lineno}: duplicate codes in {key!r} of admission {raw['id']}")
    record = AdmissionRecord(raw["id"], frozenset(raw["diseases"]), frozenset(raw["procedures"]), raw["type"])
    if not record.codes:
        raise CorpusError(f"Line {lineno}: admission {record.id} has no disease or procedure codes")
    return record


def load_admissions(path: str) -> Corpus:
    """Load an unthresholded corpus from a line-delimited admission file.

    Args:
        path (str): Path to a UTF-8 file with one JSON record per line

    Returns:
        Corpus: All records verbatim, vocabularies holding exactly the observed codes
    """
    if not os.path.exists(path):
        raise CorpusError(f"Admission file not found: {path}")

    records: List[AdmissionRecord] = []
    seen: Set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            record = _parse_record(line, lineno)
            if record.id in seen:
                raise CorpusError(f"Line {lineno}: duplicate admission id {record.id}")
            seen.add(record.id)
            records.append(record)

    if not records:
        raise CorpusError(f"Admission file is empty: {path}")

    corpus = Corpus.from_records(records)
    logger.info(
        f"Loaded {len(corpus)} admissions with {len(corpus.disease_vocab)} diseases, "
        f"{len(corpus.procedure_vocab)} procedures and {len(corpus.labels)} labels from {path}"
    )
    return corpus


def save_admissions(corpus: Corpus, path: str) -> None:
    """Write a corpus in the admission-file format."""
    with open(path, "w", encoding="utf-8") as f:
        for adm in corpus.admissions:
            f.write(adm.to_json() + "\n")


def code_document_frequency(admissions: Iterable[AdmissionRecord]) -> Counter:
    """Number of admissions each code appears in (set semantics)."""
    counts: Counter = Counter()
    for adm in admissions:
        counts.update(adm.codes)
    return counts


def apply_frequency_threshold(corpus: Corpus, min_count: int) -> Corpus:
    """Keep codes appearing in at least ``min_count`` admissions.

    Admissions left with no codes are dropped. Labels keep their original order, restricted
    to labels that still occur.
    """
    if min_count < 1:
        raise CorpusError(f"min_count must be >= 1, got {min_count}")

    counts = code_document_frequency(corpus.admissions)
    keep = {code for code, n in counts.items() if n >= min_count}
    if not keep:
        raise CorpusError(f"All codes filtered out at min_count={min_count}")

    kept: List[AdmissionRecord] = []
    for adm in corpus.admissions:
        diseases = adm.diseases & keep
        procedures = adm.procedures & keep
        if diseases or procedures:
            kept.append(AdmissionRecord(adm.id, diseases, procedures, adm.type_label))

    used_labels = {adm.type_label for adm in kept}
    labels = [label for label in corpus.labels if label in used_labels]
    result = Corpus(
        kept,
        Vocabulary([c for c in corpus.disease_vocab.codes if c in keep], "disease"),
        Vocabulary([c for c in corpus.procedure_vocab.codes if c in keep], "procedure"),
        labels,
    )
    logger.info(
        f"Threshold min_count={min_count}: {len(corpus)} -> {len(result)} admissions, "
        f"{len(corpus.disease_vocab) + len(corpus.procedure_vocab)} -> "
        f"{len(result.disease_vocab) + len(result.procedure_vocab)} codes"
    )
    return result


def split(corpus: Corpus, ratios: Tuple[float, float, float], seed: int) -> Tuple[List[str], List[str], List[str]]:
    """Partition admission ids into train/validation/test.

    Sizes are floor(ratio * N) for validation and test; the remainder goes to train.

    Returns:
        tuple: (train_ids, val_ids, test_ids), each in corpus order
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"Split ratios must be three positive numbers summing to 1, got {ratios}")

    n = len(corpus)
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise CorpusError(f"Split of {n} admissions with ratios {ratios} leaves an empty part")

    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple([corpus.admissions[i].id for i in sorted(part)] for part in parts)  # type: ignore[return-value]


def ids_digest(ids: Iterable[str]) -> str:
    """SHA-256 over the sorted ids, for comparing splits."""
    return hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).hexdigest()


def split_digest(splits: Tuple[List[str], List[str], List[str]]) -> str:
    return hashlib.sha256("|".join(ids_digest(part) for part in splits).encode("utf-8")).hexdigest()


def corpus_digest(corpus: Corpus) -> str:
    """SHA-256 over the canonical admission-file rendering."""
    h = hashlib.sha256()
    for adm in corpus.admissions:
        h.update(adm.to_json().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# Synthetic corpora


@dataclass
class PlantedTopic:
    """A planted topic: mixing weight, label, and a distribution over disease codes."""

    name: str
    weight: float
    label: str
    diseases: Dict[str, float]


@dataclass
class SyntheticSpec:
    """Generator settings plus the planted parameters."""

    topics: List[PlantedTopic]
    procedure_table: Dict[str, Dict[str, float]]
    num_admissions: int
    diseases_per_admission: Tuple[int, int] = (2, 5)
    label_noise: float = 0.0

    def validate(self) -> None:
        if not self.topics:
            raise CorpusError("Synthetic spec has no topics")
        if self.num_admissions < 1:
            raise CorpusError(f"num_admissions must be positive, got {self.num_admissions}")
        lo, hi = self.diseases_per_admission
        if lo < 1 or hi < lo:
            raise CorpusError(f"Invalid diseases_per_admission range {self.diseases_per_admission}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise CorpusError(f"label_noise must lie in [0, 1], got {self.label_noise}")
        for topic in self.topics:
            if topic.weight <= 0:
                raise CorpusError(f"Topic {topic.name} has nonpositive weight {topic.weight}")
            if not topic.diseases or sum(topic.diseases.values()) <= 0:
                raise CorpusError(f"Topic {topic.name} is empty")
            if any(p < 0 for p in topic.diseases.values()):
                raise CorpusError(f"Topic {topic.name} has negative probabilities")
        for disease, row in self.procedure_table.items():
            if not row or sum(row.values()) <= 0 or any(p < 0 for p in row.values()):
                raise CorpusError(f"Procedure table row for {disease} is zero or invalid")

    @property
    def labels(self) -> List[str]:
        return sorted({t.label for t in self.topics})


@dataclass
class PlantedTruth:
    """Ground truth returned next to a synthetic corpus."""

    topic_weights: np.ndarray
    topic_labels: List[str]
    topic_diseases: List[Dict[str, float]]
    procedure_table: Dict[str, Dict[str, float]]
    admission_topics: List[int]

    def topic_code_matrix(self, disease_vocab: Vocabulary, procedure_vocab: Vocabulary) -> np.ndarray:
        """Each topic's induced distribution over [diseases | procedures], rows normalized."""
        nd = len(disease_vocab)
        matrix = np.zeros((len(self.topic_diseases), nd + len(procedure_vocab)))
        for t, dist in enumerate(self.topic_diseases):
            total = sum(dist.values())
            for disease, p in dist.items():
                if disease not in disease_vocab:
                    continue
                weight = p / total
                matrix[t, disease_vocab.index[disease]] += weight
                row = self.procedure_table.get(disease, {})
                row_total = sum(row.values())
                for proc, q in row.items():
                    if proc in procedure_vocab:
                        matrix[t, nd + procedure_vocab.index[proc]] += weight * q / row_total
        sums = matrix.sum(axis=1, keepdims=True)
        return matrix / np.where(sums > 0, sums, 1.0)


def _normalized(dist: Mapping[str, float]) -> Tuple[List[str], np.ndarray]:
    keys = sorted(dist)
    probs = np.array([dist[k] for k in keys], dtype=np.float64)
    return keys, probs / probs.sum()


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int) -> Tuple[Corpus, PlantedTruth]:
    """Draw admissions from planted topics.

    For each admission: draw a topic from the mixing weights, draw distinct diseases from
    the topic, draw one procedure per disease from the conditional table, and assign the
    topic's label, replaced by a uniformly drawn label with probability ``label_noise``.

    Returns:
        tuple: (corpus, planted truth)
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    labels = spec.labels
    weights = np.array([t.weight for t in spec.topics], dtype=np.float64)
    weights = weights / weights.sum()
    topic_dists = [_normalized(t.diseases) for t in spec.topics]
    table = {d: _normalized(row) for d, row in spec.procedure_table.items()}
    lo, hi = spec.diseases_per_admission
    width = len(str(spec.num_admissions - 1))

    records: List[AdmissionRecord] = []
    topics_drawn: List[int] = []
    for n in range(spec.num_admissions):
        t = int(rng.choice(len(weights), p=weights))
        keys, probs = topic_dists[t]
        support = int(np.count_nonzero(probs))
        k = min(int(rng.integers(lo, hi + 1)), support)
        chosen = rng.choice(len(keys), size=k, replace=False, p=probs)
        diseases = frozenset(keys[i] for i in chosen)

        procedures: Set[str] = set()
        for disease in sorted(diseases):
            if disease in table:
                proc_keys, proc_probs = table[disease]
                procedures.add(proc_keys[int(rng.choice(len(proc_keys), p=proc_probs))])

        label = spec.topics[t].label
        if spec.label_noise > 0 and rng.random() < spec.label_noise:
            label = labels[int(rng.integers(len(labels)))]

        records.append(AdmissionRecord(f"A{n:0{width}d}", diseases, frozenset(procedures), label))
        topics_drawn.append(t)

    corpus = Corpus.from_records(records)
    # Keep every planted label even if noise-free sampling never produced one
    corpus.labels = labels
    truth = PlantedTruth(
        topic_weights=weights,
        topic_labels=[t.label for t in spec.topics],
        topic_diseases=[dict(t.diseases) for t in spec.topics],
        procedure_table={d: dict(row) for d, row in spec.procedure_table.items()},
        admission_topics=topics_drawn,
    )
    logger.info(f"Generated synthetic corpus: {len(corpus)} admissions from {len(spec.topics)} topics")
    return corpus, truth


def planted_spec(
    num_topics: int = 5,
    diseases_per_topic: int = 6,
    procedures_per_disease: int = 1,
    labels: Optional[Sequence[str]] = None,
    num_admissions: int = 2000,
    label_noise: float = 0.1,
    diseases_per_admission: Tuple[int, int] = (2, 4),
) -> SyntheticSpec:
    """Build a well-separated planted spec.

    Each topic owns a disjoint block of diseases with uniform probabilities and each disease
    maps to its own block of procedures. Topics are assigned labels round-robin.
    """
    if labels is None:
        labels = [f"type{i}" for i in range(min(num_topics, 4))]
    if not labels:
        raise CorpusError("planted_spec needs at least one label")
    topics = []
    table: Dict[str, Dict[str, float]] = {}
    for t in range(num_topics):
        block = [f"d{t:02d}{j:02d}" for j in range(diseases_per_topic)]
        topics.append(
            PlantedTopic(
                name=f"topic{t}",
                weight=1.0 + 0.25 * t,
                label=labels[t % len(labels)],
                diseases={d: 1.0 for d in block},
            )
        )
        for d in block:
            table[d] = {f"p{d[1:]}{k}": 1.0 for k in range(procedures_per_disease)}
    return SyntheticSpec(topics, table, num_admissions, diseases_per_admission, label_noise)


def load_synthetic_spec(path: str) -> SyntheticSpec:
    """Read a SyntheticSpec from its line-delimited file format."""
    if not os.path.exists(path):
        raise CorpusError(f"Synthetic spec file not found: {path}")

    settings: Optional[dict] = None
    topics: List[PlantedTopic] = []
    table: Dict[str, Dict[str, float]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"Line {lineno}: malformed spec record ({e.msg})") from e
            kind = raw.get("kind") if isinstance(raw, dict) else None
            try:
                if kind == "settings":
                    settings = raw
                elif kind == "topic":
                    topics.append(
                        PlantedTopic(
                            str(raw["name"]),
                            float(raw["weight"]),
                            str(raw["label"]),
                            {str(k): float(v) for k, v in raw["diseases"].items()},
                        )
                    )
                elif kind == "procedures":
                    table[str(raw["disease"])] = {str(k): float(v) for k, v in raw["procedures"].items()}
                else:
                    raise CorpusError(f"Line {lineno}: unknown spec record kind {kind!r}")
            except (KeyError, TypeError, ValueError, AttributeError) as e:
                if isinstance(e, CorpusError):
                    raise
                raise CorpusError(f"Line {lineno}: invalid {kind} record ({e})") from e

    if settings is None:
        raise CorpusError(f"Synthetic spec {path} has no settings record")
    try:
        lo, hi = settings.get("diseases_per_admission", [2, 5])
        spec = SyntheticSpec(
            topics,
            table,
            int(settings["num_admissions"]),
            (int(lo), int(hi)),
            float(settings.get("label_noise", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusError(f"Invalid settings record in {path}: {e}") from e
    spec.validate()
    return spec


def save_synthetic_spec(spec: SyntheticSpec, path: str) -> None:
    """Write a SyntheticSpec in its line-delimited file format."""
    with open(path, "w", encoding="utf-8") as f:
        settings = {
            "kind": "settings",
            "num_admissions": spec.num_admissions,
            "diseases_per_admission": list(spec.diseases_per_admission),
            "label_noise": spec.label_noise,
        }
        f.write(json.dumps(settings, sort_keys=True) + "\n")
        for topic in spec.topics:
            record = {
                "kind": "topic",
                "name": topic.name,
                "weight": topic.weight,
                "label": topic.label,
                "diseases": topic.diseases,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
        for disease in sorted(spec.procedure_table):
            record = {"kind": "procedures", "disease": disease, "procedures": spec.procedure_table[disease]}
            f.write(json.dumps(record, sort_keys=True) + "\n")
