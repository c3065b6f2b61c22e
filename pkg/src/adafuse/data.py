"""Synthetic multimodal cohorts, clinical transforms, report text and dataset I/O.

Records carry three raw modalities: ``f_A`` (512, imaging-like), ``f_B`` (17,
transformed clinical variables) and ``f_C`` (768, embedded report text). A
latent risk score drives the label and, scaled by a per-modality signal
strength, leaks into each modality's features.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .models import MODALITIES, RAW_DIMS

RACES = ("other", "white", "black", "hispanic", "asian", "native_american", "pacific_islander")
SMOKING_STATUS = {"current": 0.0, "former": -1.0}
INTENSITY_OFFSET = 0.4021541613

OCCUPATIONAL_EXPOSURES = ("asbestos", "chemicals", "coal dust", "agricultural dusts",
                          "firefighting smoke", "welding fumes")
MEDICAL_DIAGNOSES = ("diabetes", "heart disease", "hypertension", "pneumonia", "stroke")
SMOKE_EXPOSURES = ("secondhand smoke at home", "secondhand smoke at workplace")
N_FLAGS = len(OCCUPATIONAL_EXPOSURES) + len(MEDICAL_DIAGNOSES) + len(SMOKE_EXPOSURES)

TEXT_DIM = RAW_DIMS[2]
TEXT_SCALE = 10.0


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named sub-stream of a root seed (stable across runs and platforms)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# ---------------------------------------------------------------------------
# Clinical variables
# ---------------------------------------------------------------------------

@dataclass
class ClinicalRaw:
    age: float
    race: str
    education: float
    bmi: float
    copd: int
    phist: int
    fhist: int
    status: str
    intensity: float
    duration: float
    quit_time: float

    def __post_init__(self) -> None:
        if isinstance(self.race, (int, np.integer)):
            self.race = RACES[int(self.race)]
        self.race = str(self.race).lower()
        self.status = str(self.status).lower()
        if self.race not in RACES:
            raise ValueError(f"unknown race {self.race!r}; expected one of {RACES}")
        if self.status not in SMOKING_STATUS:
            raise ValueError(f"smoking status must be 'current' or 'former', got {self.status!r}")
        if not self.age > 0 or not self.bmi > 0:
            raise ValueError("age and bmi must be positive")
        if self.duration < 0 or self.quit_time < 0:
            raise ValueError("duration and quit_time must be non-negative")
        for name in ("copd", "phist", "fhist"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")


CLINICAL_FEATURES = (("age",) + tuple(f"race_{r}" for r in RACES)
                     + ("education", "bmi", "copd", "phist", "fhist", "status",
                        "intensity", "duration", "quit_time"))


def plco_transform(raw: ClinicalRaw) -> np.ndarray:
    """Map raw clinical values to the centred 17-dim clinical feature vector."""
    if raw.intensity == 0:
        raise ZeroDivisionError("smoking intensity of 0 cigarettes/day cannot be transformed")
    if raw.intensity < 0:
        raise ValueError("smoking intensity must be positive")
    race = np.zeros(len(RACES))
    race[RACES.index(raw.race)] = 1.0
    return np.concatenate([
        [raw.age - 62.0],
        race,
        [raw.education - 4.0,
         raw.bmi - 27.0,
         float(raw.copd),
         float(raw.phist),
         float(raw.fhist),
         SMOKING_STATUS[raw.status],
         10.0 / raw.intensity - INTENSITY_OFFSET,
         raw.duration - 27.0,
         raw.quit_time - 10.0],
    ])


# ---------------------------------------------------------------------------
# Report text
# ---------------------------------------------------------------------------

def _join(items: Sequence[str]) -> str:
    if len(items) <= 2:
        return " and ".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def generate_text_report(flags: Sequence[int]) -> str:
    """Three-sentence report from 13 binary flags.

    Flag order: six occupational exposures, five diagnoses, two secondhand
    smoke exposures (home, workplace), as listed in the module constants.
    """
    flags = [int(f) for f in flags]
    if len(flags) != N_FLAGS or any(f not in (0, 1) for f in flags):
        raise ValueError(f"expected {N_FLAGS} binary flags")
    n_occ, n_med = len(OCCUPATIONAL_EXPOSURES), len(MEDICAL_DIAGNOSES)
    occ = [x for x, f in zip(OCCUPATIONAL_EXPOSURES, flags[:n_occ]) if f]
    med = [x for x, f in zip(MEDICAL_DIAGNOSES, flags[n_occ:n_occ + n_med]) if f]
    smoke = [x for x, f in zip(SMOKE_EXPOSURES, flags[n_occ + n_med:]) if f]
    sentences = [
        f"The patient has occupational exposure to {_join(occ)}." if occ
        else "The patient reports no significant occupational exposures.",
        f"Medical history is significant for {_join(med)}." if med
        else "No significant chronic medical conditions reported.",
        f"The patient is exposed to {_join(smoke)}." if smoke
        else "The patient reports no secondhand smoke exposure.",
    ]
    return " ".join(sentences)


_TOKEN = re.compile(r"[a-z]+")


def _token_hash(token: str) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "little")
    return value % TEXT_DIM, (1.0 if (value >> 63) & 1 else -1.0)


def embed_text_toy(report: str) -> np.ndarray:
    """Signed feature-hashed bag of words, L2-normalised (zero vector for no tokens)."""
    vec = np.zeros(TEXT_DIM)
    for token in _TOKEN.findall(report.lower()):
        bucket, sign = _token_hash(token)
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


# ---------------------------------------------------------------------------
# Records and cohorts
# ---------------------------------------------------------------------------

@dataclass
class PatientRecord:
    id: str
    f_A: np.ndarray
    f_B: np.ndarray
    f_C: np.ndarray
    label: int
    clinical: ClinicalRaw | None = None
    flags: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        for attr, dim in zip(("f_A", "f_B", "f_C"), RAW_DIMS):
            arr = np.asarray(getattr(self, attr), dtype=np.float64)
            if arr.shape != (dim,):
                raise ValueError(f"{attr} must have length {dim}, got shape {arr.shape}")
            setattr(self, attr, arr)
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class Cohort:
    """Column-oriented dataset: ids, per-modality feature matrices, labels."""

    ids: list[str]
    X_A: np.ndarray
    X_B: np.ndarray
    X_C: np.ndarray
    y: np.ndarray
    clinical: list[ClinicalRaw | None] | None = None
    flags: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = len(self.ids)
        self.y = np.asarray(self.y, dtype=np.int64)
        for name, dim in zip(("X_A", "X_B", "X_C"), RAW_DIMS):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, dim) if n else \
                np.zeros((0, dim))
            if arr.shape != (n, dim):
                raise ValueError(f"{name} must have shape ({n}, {dim}), got {arr.shape}")
            setattr(self, name, arr)
        if self.y.shape != (n,):
            raise ValueError("labels must have one entry per record")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def modalities(self) -> list[np.ndarray]:
        return [self.X_A, self.X_B, self.X_C]

    @property
    def X(self) -> np.ndarray:
        """All modalities side by side, shape (n, 512 + 17 + 768)."""
        return np.hstack(self.modalities)

    @property
    def prevalence(self) -> float:
        return float(self.y.mean()) if len(self) else float("nan")

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Cohort":
        idx = np.asarray(idx, dtype=np.int64)
        return Cohort(
            ids=[self.ids[i] for i in idx],
            X_A=self.X_A[idx], X_B=self.X_B[idx], X_C=self.X_C[idx], y=self.y[idx],
            clinical=None if self.clinical is None else [self.clinical[i] for i in idx],
            flags=None if self.flags is None else self.flags[idx],
        )

    def record(self, i: int) -> PatientRecord:
        return PatientRecord(
            self.ids[i], self.X_A[i], self.X_B[i], self.X_C[i], int(self.y[i]),
            None if self.clinical is None else self.clinical[i],
            None if self.flags is None else tuple(int(f) for f in self.flags[i]),
        )

    def records(self) -> Iterator[PatientRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> "Cohort":
        records = list(records)
        clinical = [r.clinical for r in records]
        flags = [r.flags for r in records]
        return cls(
            ids=[r.id for r in records],
            X_A=np.array([r.f_A for r in records]).reshape(-1, RAW_DIMS[0]),
            X_B=np.array([r.f_B for r in records]).reshape(-1, RAW_DIMS[1]),
            X_C=np.array([r.f_C for r in records]).reshape(-1, RAW_DIMS[2]),
            y=np.array([r.label for r in records], dtype=np.int64),
            clinical=clinical if any(c is not None for c in clinical) else None,
            flags=np.array(flags, dtype=np.int64) if all(f is not None for f in flags)
            and records else None,
        )


def split_modalities(X: np.ndarray) -> list[np.ndarray]:
    """Inverse of ``Cohort.X``: cut a (n, 1297) matrix into the three modalities."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != sum(RAW_DIMS):
        raise ValueError(f"expected shape (n, {sum(RAW_DIMS)}), got {X.shape}")
    a, b = RAW_DIMS[0], RAW_DIMS[0] + RAW_DIMS[1]
    return [X[:, :a], X[:, a:b], X[:, b:]]


def train_test_split(cohort: Cohort, test_fraction: float, seed: int,
                     stratify: bool = True) -> tuple[Cohort, Cohort]:
    """Deterministic (optionally stratified) split keyed by ``seed``."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = rng_stream(seed, "split")
    n = len(cohort)
    test = []
    groups = [np.flatnonzero(cohort.y == c) for c in (0, 1)] if stratify else [np.arange(n)]
    for g in groups:
        g = rng.permutation(g)
        test.extend(g[:int(round(test_fraction * len(g)))].tolist())
    test_idx = np.sort(np.array(test, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return cohort.subset(train_idx), cohort.subset(test_idx)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_patients: int = 2309
    prevalence: float = 0.064
    sigma_a: float = 1.5
    sigma_b: float = 0.8
    sigma_c: float = 0.0
    rho: float = 0.1
    seed: int = 0
    # slope of the label logit in the standardised latent risk
    latent_scale: float = 4.0

    def __post_init__(self) -> None:
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if min(self.sigma_a, self.sigma_b, self.sigma_c) < 0:
            raise ValueError("signal strengths must be non-negative")
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")


def calibrate_intercept(prevalence: float, scale: float) -> float:
    """Intercept ``b`` with E[sigmoid(scale * Z + b)] = prevalence for Z ~ N(0, 1)."""
    def mean_risk(b: float) -> float:
        f = lambda z: special.expit(scale * z + b) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        return integrate.quad(f, -12, 12, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return optimize.brentq(lambda b: mean_risk(b) - prevalence, -60.0, 60.0, xtol=1e-14)


def _orthonormal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    return q if rows >= cols else q.T


# clinical drivers: age, education, bmi, copd, phist, fhist, status, intensity,
# duration, quit_time; signs chosen so that positive latent risk looks riskier
_CLINICAL_LOADINGS = np.array([1.0, -0.6, -0.5, 0.6, 0.4, 0.4, 0.6, 0.6, 0.9, -0.5])
_FLAG_BASE = np.array([-1.2, -1.0, -1.6, -1.0, -1.8, -1.4,
                       -1.0, -0.8, -0.2, -1.2, -1.8, -0.3, -0.6])
_SHARED_DIM = RAW_DIMS[1]
# imaging noise lives in a low-dimensional latent space (as learned image
# embeddings do) that also holds the signal direction; text noise is broader
LATENT_DIM_A = 8
LATENT_DIM_C = 64


def _clinical_from_drivers(g: np.ndarray, race: int) -> ClinicalRaw:
    age = float(np.clip(round(62 + 5 * g[0]), 50, 80))
    current = bool(g[6] > -0.4)
    duration = float(np.clip(round(30 + 8 * g[8]), 1, age - 15))
    return ClinicalRaw(
        age=age,
        race=RACES[race],
        education=float(np.clip(round(4 + 1.4 * g[1]), 1, 7)),
        bmi=float(np.clip(round(27 + 4 * g[2], 2), 15.0, 60.0)),
        copd=int(g[3] > 1.0),
        phist=int(g[4] > 1.5),
        fhist=int(g[5] > 1.1),
        status="current" if current else "former",
        intensity=float(np.clip(round(20 * math.exp(0.35 * g[7])), 1, 100)),
        duration=duration,
        quit_time=0.0 if current else float(np.clip(round(10 - 5 * g[9]), 1, 40)),
    )


_RACE_PROBS = np.array([0.02, 0.86, 0.05, 0.02, 0.03, 0.01, 0.01])


def generate_cohort(config: SyntheticConfig, id_prefix: str = "P") -> Cohort:
    """Draw a cohort whose modalities carry the latent risk at strengths ``sigma_*``.

    With a strength of 0 the corresponding modality is label-independent noise.
    """
    cfg = config
    structure = rng_stream(cfg.seed, "structure")
    draws = rng_stream(cfg.seed, "patients")
    n = cfg.n_patients

    dir_a = structure.standard_normal(LATENT_DIM_A)
    dir_a /= np.linalg.norm(dir_a)
    embed_a = _orthonormal(RAW_DIMS[0], LATENT_DIM_A, structure)
    embed_c = _orthonormal(RAW_DIMS[2], LATENT_DIM_C, structure)
    load_b = _CLINICAL_LOADINGS / np.linalg.norm(_CLINICAL_LOADINGS)
    load_c = structure.uniform(0.5, 1.0, N_FLAGS)
    mix_a = _orthonormal(LATENT_DIM_A, _SHARED_DIM, structure)
    mix_b = _orthonormal(_SHARED_DIM, _SHARED_DIM, structure)[:len(load_b)]
    mix_c_flags = _orthonormal(_SHARED_DIM, _SHARED_DIM, structure)[:N_FLAGS]
    mix_c = _orthonormal(LATENT_DIM_C, _SHARED_DIM, structure)

    intercept = calibrate_intercept(cfg.prevalence, cfg.latent_scale)
    z = draws.standard_normal(n)
    y = (draws.random(n) < special.expit(cfg.latent_scale * z + intercept)).astype(np.int64)
    shared = draws.standard_normal((n, _SHARED_DIM))
    a_own = math.sqrt(1 - cfg.rho)
    a_shared = math.sqrt(cfg.rho)

    latent_a = (cfg.sigma_a * z[:, None] * dir_a
                + a_own * draws.standard_normal((n, LATENT_DIM_A)) + a_shared * shared @ mix_a.T)
    X_A = latent_a @ embed_a.T

    drivers = (cfg.sigma_b * z[:, None] * load_b
               + a_own * draws.standard_normal((n, len(load_b))) + a_shared * shared @ mix_b.T)
    races = draws.choice(len(RACES), size=n, p=_RACE_PROBS)
    clinical = [_clinical_from_drivers(drivers[i], int(races[i])) for i in range(n)]
    X_B = np.array([plco_transform(c) for c in clinical])

    flag_latent = (_FLAG_BASE + cfg.sigma_c * z[:, None] * load_c
                   + a_own * draws.standard_normal((n, N_FLAGS)) + a_shared * shared @ mix_c_flags.T)
    flags = (flag_latent > 0).astype(np.int64)
    text = np.array([embed_text_toy(generate_text_report(f)) for f in flags])
    noise_c = a_own * draws.standard_normal((n, LATENT_DIM_C)) + a_shared * shared @ mix_c.T
    X_C = TEXT_SCALE * text + noise_c @ embed_c.T

    width = max(5, len(str(n)))
    ids = [f"{id_prefix}{i:0{width}d}" for i in range(n)]
    return Cohort(ids, X_A, X_B, X_C, y, clinical, flags)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str = "nlst-like"
    n_train: int = 1847
    n_test: int = 462
    prevalence: float = 0.064
    sigma_a: float = 1.5
    sigma_b: float = 0.8
    sigma_c: float = 0.0
    rho: float = 0.1
    latent_scale: float = 4.0
    available: str = "ABC"

    def synthetic_config(self, seed: int) -> SyntheticConfig:
        return SyntheticConfig(n_patients=self.n_train + self.n_test, prevalence=self.prevalence,
                               sigma_a=self.sigma_a, sigma_b=self.sigma_b, sigma_c=self.sigma_c,
                               rho=self.rho, seed=seed, latent_scale=self.latent_scale)


SCENARIOS = {
    "nlst-like": Scenario(),
    # two-modality external cohort with a degraded clinical modality
    "vlsp-like": Scenario(name="vlsp-like", n_train=0, n_test=858, prevalence=0.028,
                          sigma_a=1.5, sigma_b=0.0, sigma_c=0.0, available="AB"),
}


def generate_scenario(scenario: Scenario, seed: int) -> tuple[Cohort, Cohort]:
    """Generate a cohort and split it into (train, test) of the scenario's sizes."""
    cohort = generate_cohort(scenario.synthetic_config(seed))
    missing = [m for m in range(3) if MODALITIES[m] not in scenario.available]
    for m in missing:
        cohort.modalities[m][...] = 0.0
    if 2 in missing:
        cohort.flags = None
    if scenario.n_train == 0:
        return cohort.subset([]), cohort
    return train_test_split(cohort, scenario.n_test / (scenario.n_train + scenario.n_test), seed)


def write_kv(path: str | Path, values: dict) -> None:
    """Flat ``key = value`` text file, keys sorted."""
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def scenario_from_kv(values: dict[str, str], base: Scenario | None = None) -> Scenario:
    base = base if base is not None else SCENARIOS[values.get("name", "nlst-like")]
    kwargs = asdict(base)
    types = {f.name: f.type for f in fields(Scenario)}
    for k, v in values.items():
        if k not in kwargs:
            raise ValueError(f"unknown scenario key {k!r}")
        kwargs[k] = {"int": int, "float": float}.get(types[k], str)(v)
    return Scenario(**kwargs)


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def _array(values: np.ndarray) -> str:
    return "[" + ", ".join(_fmt(v) for v in values.tolist()) + "]"


def write_dataset(cohort: Cohort, path: str | Path) -> None:
    """One JSON object per line: id, label, f_A, f_B, f_C (+ clinical, flags when known)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(cohort)):
            parts = [f'"id": {json.dumps(cohort.ids[i])}', f'"label": {int(cohort.y[i])}',
                     f'"f_A": {_array(cohort.X_A[i])}', f'"f_B": {_array(cohort.X_B[i])}',
                     f'"f_C": {_array(cohort.X_C[i])}']
            if cohort.clinical is not None and cohort.clinical[i] is not None:
                parts.append(f'"clinical": {json.dumps(asdict(cohort.clinical[i]), sort_keys=True)}')
            if cohort.flags is not None:
                parts.append(f'"flags": {json.dumps([int(f) for f in cohort.flags[i]])}')
            fh.write("{" + ", ".join(parts) + "}\n")


def read_dataset(path: str | Path) -> Cohort:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            try:
                for attr, dim in zip(("f_A", "f_B", "f_C"), RAW_DIMS):
                    if len(obj[attr]) != dim:
                        raise ValueError(f"{path}:{lineno}: field {attr} has length "
                                         f"{len(obj[attr])}, expected {dim}")
                records.append(PatientRecord(
                    id=str(obj["id"]), f_A=obj["f_A"], f_B=obj["f_B"], f_C=obj["f_C"],
                    label=int(obj["label"]),
                    clinical=ClinicalRaw(**obj["clinical"]) if "clinical" in obj else None,
                    flags=tuple(obj["flags"]) if "flags" in obj else None,
                ))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc.args[0]}") from None
    return Cohort.from_records(records)
