"""Preference data model, dataset files, symmetrization, and synthetic worlds.

A dataset is an ordered collection of pairwise comparisons over fixed
embeddings: each example stores the embedding of the preferred completion
in the ``chosen`` slot and the other one in ``rejected``.  Synthetic worlds
carry a known linear ground-truth reward so that every preference
probability is available exactly for verification.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

DATASET_SCHEMA = "preference-dataset/1"

NOISE_BERNOULLI = "bernoulli"
NOISE_DETERMINISTIC = "deterministic"


class DatasetError(ValueError):
    """Malformed, inconsistent, or out-of-contract preference data."""


def _as_embedding(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DatasetError(f"{what} must be a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{what} contains non-finite values")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PreferenceExample:
    """One pairwise comparison: ``chosen`` was preferred over ``rejected``."""

    id: str
    chosen: np.ndarray
    rejected: np.ndarray
    category: str | None = None
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "chosen", _as_embedding(self.chosen, "chosen embedding"))
        object.__setattr__(self, "rejected", _as_embedding(self.rejected, "rejected embedding"))
        if self.chosen.shape != self.rejected.shape:
            raise DatasetError(
                f"embedding length mismatch within example {self.id!r}: "
                f"{self.chosen.size} vs {self.rejected.size}"
            )
        w = float(self.weight)
        if not np.isfinite(w) or w < 0:
            raise DatasetError(f"weight must be finite and >= 0, got {self.weight!r}")
        object.__setattr__(self, "weight", w)

    @property
    def dim(self) -> int:
        return self.chosen.size

    def flipped(self) -> "PreferenceExample":
        """The same comparison with the slots swapped."""
        return PreferenceExample(
            id=f"{self.id}/flipped",
            chosen=self.rejected,
            rejected=self.chosen,
            category=self.category,
            weight=self.weight,
        )


@dataclass(frozen=True)
class PreferenceDataset:
    """Immutable ordered list of comparisons sharing one embedding dimension.

    A symmetrized dataset holds the originals as a prefix followed by their
    flipped counterparts in the same order; the flag is what downstream
    calibration code checks before binning.
    """

    examples: tuple[PreferenceExample, ...]
    dim: int
    symmetrized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if self.dim <= 0:
            raise DatasetError(f"dim must be positive, got {self.dim}")
        for i, ex in enumerate(self.examples):
            if ex.dim != self.dim:
                raise DatasetError(
                    f"example {i} ({ex.id!r}) has dimension {ex.dim}, expected {self.dim}"
                )
        if self.symmetrized:
            _check_symmetrized_layout(self.examples)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def originals(self) -> tuple[PreferenceExample, ...]:
        """The unflipped half of a symmetrized dataset (all examples otherwise)."""
        if not self.symmetrized:
            return self.examples
        return self.examples[: len(self.examples) // 2]


def _check_symmetrized_layout(examples: Sequence[PreferenceExample]) -> None:
    n = len(examples)
    if n % 2 != 0:
        raise DatasetError("symmetrized dataset must have an even number of examples")
    half = n // 2
    for i in range(half):
        orig, flip = examples[i], examples[half + i]
        if not (
            np.array_equal(orig.chosen, flip.rejected)
            and np.array_equal(orig.rejected, flip.chosen)
            and orig.category == flip.category
            and orig.weight == flip.weight
        ):
            raise DatasetError(
                f"symmetrized flag set but example {half + i} is not the flip of example {i}"
            )


def make_dataset(
    examples: Iterable[PreferenceExample],
    dim: int | None = None,
    symmetrized: bool = False,
) -> PreferenceDataset:
    """Build a validated dataset, inferring ``dim`` from the first example."""
    examples = tuple(examples)
    if dim is None:
        if not examples:
            raise DatasetError("cannot infer dimension of an empty dataset; pass dim")
        dim = examples[0].dim
    return PreferenceDataset(examples=examples, dim=dim, symmetrized=symmetrized)


def symmetrize(dataset: PreferenceDataset) -> PreferenceDataset:
    """Append the flipped counterpart of every example.

    The output keeps the original order as a prefix, doubles the size, and
    sets the symmetrized flag.  Datasets that organically contain both
    orientations of a pair are flagged with a warning but never merged.
    """
    if dataset.symmetrized:
        raise DatasetError("dataset is already symmetrized")
    seen = {(ex.chosen.tobytes(), ex.rejected.tobytes()) for ex in dataset.examples}
    organic = sum(
        1 for ex in dataset.examples if (ex.rejected.tobytes(), ex.chosen.tobytes()) in seen
    )
    if organic:
        warnings.warn(
            f"{organic} example(s) already have a flipped counterpart in the input; "
            "symmetrization will duplicate them",
            stacklevel=2,
        )
    flips = tuple(ex.flipped() for ex in dataset.examples)
    return PreferenceDataset(
        examples=dataset.examples + flips, dim=dataset.dim, symmetrized=True
    )


def dataset_arrays(
    examples: Sequence[PreferenceExample] | PreferenceDataset,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack chosen/rejected embeddings into two (n, d) arrays."""
    items = list(examples)
    if not items:
        raise DatasetError("empty example list has no array form")
    chosen = np.stack([ex.chosen for ex in items])
    rejected = np.stack([ex.rejected for ex in items])
    return chosen, rejected


# ---------------------------------------------------------------------------
# Synthetic Bradley-Terry worlds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticWorld:
    """Linear ground-truth reward over standard-normal features.

    ``bernoulli`` worlds label each pair by a draw with probability equal to
    the sigmoid of the true reward margin; ``deterministic`` worlds always
    put the higher-reward item in the chosen slot.
    """

    true_weights: np.ndarray
    noise_model: str = NOISE_BERNOULLI
    seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.true_weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0 or not np.all(np.isfinite(w)):
            raise DatasetError("true_weights must be a finite non-empty vector")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "true_weights", w)
        if self.noise_model not in (NOISE_BERNOULLI, NOISE_DETERMINISTIC):
            raise DatasetError(f"unknown noise model {self.noise_model!r}")

    @property
    def dim(self) -> int:
        return self.true_weights.size


def random_world(dim: int, seed: int, noise_model: str = NOISE_BERNOULLI) -> SyntheticWorld:
    """Draw ground-truth weights with unit expected squared norm."""
    if dim <= 0:
        raise DatasetError(f"dim must be positive, got {dim}")
    rng = np.random.Generator(np.random.Philox(seed))
    w = rng.standard_normal(dim) / np.sqrt(dim)
    return SyntheticWorld(true_weights=w, noise_model=noise_model, seed=seed)


def true_preference_probability(world: SyntheticWorld, example: PreferenceExample) -> float:
    """Exact probability that the chosen slot wins under the world's reward."""
    if example.dim != world.dim:
        raise DatasetError(
            f"example dimension {example.dim} does not match world dimension {world.dim}"
        )
    margin = float(world.true_weights @ (example.chosen - example.rejected))
    return float(expit(margin))


def generate_synthetic(world: SyntheticWorld, n: int, seed: int) -> PreferenceDataset:
    """Sample ``n`` labeled comparisons from the world.

    Per example two feature vectors are drawn i.i.d. standard normal; the
    chosen slot is assigned by a Bernoulli draw on the sigmoid of the true
    margin (bernoulli mode) or by its sign (deterministic mode, ties keep
    the first draw).  The Philox stream makes equal seeds bit-identical.
    """
    if n < 0:
        raise DatasetError(f"n must be >= 0, got {n}")
    d = world.dim
    if n == 0:
        return PreferenceDataset(examples=(), dim=d, symmetrized=False)
    rng = np.random.Generator(np.random.Philox(seed))
    z_first = rng.standard_normal((n, d))
    z_second = rng.standard_normal((n, d))
    margins = (z_first - z_second) @ world.true_weights
    if world.noise_model == NOISE_BERNOULLI:
        first_wins = rng.random(n) < expit(margins)
    else:
        first_wins = margins >= 0.0
    examples = []
    for i in range(n):
        zc, zr = (z_first[i], z_second[i]) if first_wins[i] else (z_second[i], z_first[i])
        examples.append(PreferenceExample(id=f"syn-{i:06d}", chosen=zc, rejected=zr))
    return PreferenceDataset(examples=tuple(examples), dim=d, symmetrized=False)


# ---------------------------------------------------------------------------
# Dataset files: one JSON record per line behind a schema header
# ---------------------------------------------------------------------------


def save_dataset(dataset: PreferenceDataset, path) -> None:
    """Write a dataset as line-delimited JSON with a leading schema record.

    Floats are encoded with the shortest round-trip decimal representation,
    so ``load_dataset`` reproduces every value bit for bit.
    """
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "schema": DATASET_SCHEMA,
            "dim": dataset.dim,
            "symmetrized": dataset.symmetrized,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in dataset.examples:
            record: dict = {
                "id": ex.id,
                "chosen": ex.chosen.tolist(),
                "rejected": ex.rejected.tolist(),
                "weight": ex.weight,
            }
            if ex.category is not None:
                record["category"] = ex.category
            fh.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")


_RECORD_FIELDS = {"id", "chosen", "rejected", "category", "weight"}


def _parse_record(obj: dict, lineno: int) -> PreferenceExample:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: record is not an object")
    unknown = set(obj) - _RECORD_FIELDS
    if unknown:
        raise DatasetError(f"line {lineno}: unknown fields {sorted(unknown)}")
    for field in ("id", "chosen", "rejected"):
        if field not in obj:
            raise DatasetError(f"line {lineno}: missing required field {field!r}")
    try:
        return PreferenceExample(
            id=str(obj["id"]),
            chosen=obj["chosen"],
            rejected=obj["rejected"],
            category=obj.get("category"),
            weight=obj.get("weight", 1.0),
        )
    except (DatasetError, TypeError, ValueError) as exc:
        raise DatasetError(f"line {lineno}: {exc}") from exc


def load_dataset(path, expected_dim: int | None = None) -> PreferenceDataset:
    """Read a dataset file, validating dimensions and finiteness per line.

    Files may start with a schema header record carrying ``dim`` and the
    symmetrized flag; bare record-only files are accepted too, in which case
    the dimension is inferred from the first record (or ``expected_dim``).
    """
    examples: list[PreferenceExample] = []
    dim = expected_dim
    symmetrized = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if lineno == 1 and isinstance(obj, dict) and "schema" in obj:
                if obj["schema"] != DATASET_SCHEMA:
                    raise DatasetError(
                        f"line 1: unsupported schema {obj['schema']!r}, "
                        f"expected {DATASET_SCHEMA!r}"
                    )
                header_dim = int(obj.get("dim", 0)) or None
                if expected_dim is not None and header_dim not in (None, expected_dim):
                    raise DatasetError(
                        f"line 1: header dimension {header_dim} does not match "
                        f"expected {expected_dim}"
                    )
                dim = header_dim or expected_dim
                symmetrized = bool(obj.get("symmetrized", False))
                continue
            ex = _parse_record(obj, lineno)
            if dim is None:
                dim = ex.dim
            elif ex.dim != dim:
                raise DatasetError(
                    f"line {lineno}: dimension {ex.dim} does not match dataset dimension {dim}"
                )
            examples.append(ex)
    if dim is None:
        raise DatasetError(f"{path}: empty dataset with no dimension; pass expected_dim")
    try:
        return PreferenceDataset(examples=tuple(examples), dim=dim, symmetrized=symmetrized)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
