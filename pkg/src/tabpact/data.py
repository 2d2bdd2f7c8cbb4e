"""Datasets: description files, CSV interchange, preprocessing, splits, synthesis.

A dataset is columnar: float64 blocks for numerical and context-numerical
features, integer-or-string columns for categorical ones, plus the target
vector. Context columns are named ``<feature>@o<offset>`` in files. All
randomness is driven by explicit seeds; generation is vectorized and
deterministic, so identical seeds reproduce identical files byte for byte.

Preprocessing fits on the training split only: z-scoring with the
population standard deviation for numerical columns (zero-variance
columns map to zero), label encoding with index 0 reserved for values
unseen in training. The target is never transformed.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, NotFittedError, SchemaError
from .tokenizer import CATEGORICAL, NUMERICAL, Feature, FeatureSchema

_FLOAT_FMT = "%.12g"  # CSV round-trips within 1e-9 relative
_STD_FLOOR = 1e-12


@dataclass(frozen=True)
class InputRow:
    """One observation in schema order: plain, categorical, and context values."""

    x_cont: np.ndarray
    x_cat: np.ndarray
    x_context: np.ndarray  # merged numerical/categorical context, declared order


@dataclass
class Dataset:
    schema: FeatureSchema
    x_num: np.ndarray  # (N, c) float64
    x_cat: np.ndarray  # (N, m) int64, or object before label encoding
    x_ctx_num: np.ndarray  # (N, s_num) float64
    x_ctx_cat: np.ndarray  # (N, s_cat) int64/object
    y: np.ndarray  # (N,) float64
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.y)
        if n < 1:
            raise SchemaError("dataset must contain at least one row")
        schema = self.schema
        expected = {
            "x_num": (n, schema.n_numerical),
            "x_cat": (n, schema.n_categorical),
            "x_ctx_num": (n, len(schema.context_numerical)),
            "x_ctx_cat": (n, len(schema.context_categorical)),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise SchemaError(f"{name} has shape {got}, schema implies {shape}")
        if not np.isfinite(self.y).all():
            raise SchemaError("target contains non-finite values")

    @property
    def n_rows(self) -> int:
        return len(self.y)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(
            schema=self.schema,
            x_num=self.x_num[idx],
            x_cat=self.x_cat[idx],
            x_ctx_num=self.x_ctx_num[idx],
            x_ctx_cat=self.x_ctx_cat[idx],
            y=self.y[idx],
            provenance=self.provenance,
        )

    def row(self, i: int) -> InputRow:
        ctx = np.empty(self.schema.n_contextual, dtype=object)
        num_pos = cat_pos = 0
        for k, f in enumerate(self.schema.contextual):
            if f.kind == NUMERICAL:
                ctx[k] = self.x_ctx_num[i, num_pos]
                num_pos += 1
            else:
                ctx[k] = self.x_ctx_cat[i, cat_pos]
                cat_pos += 1
        return InputRow(x_cont=self.x_num[i].copy(), x_cat=self.x_cat[i].copy(), x_context=ctx)

    def hash(self) -> str:
        """Content hash over schema and all values (order-sensitive)."""
        h = hashlib.sha256()
        h.update(self.schema.hash().encode())
        for arr in (self.x_num, self.x_ctx_num, self.y):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        for arr in (self.x_cat, self.x_ctx_cat):
            if arr.dtype == object:
                h.update(json.dumps(arr.tolist(), default=str).encode())
            else:
                h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()


def rows_to_dataset(schema: FeatureSchema, rows, targets) -> Dataset:
    """Assemble a Dataset from InputRow records (targets aligned by position)."""
    rows = list(rows)
    n = len(rows)
    s_num = len(schema.context_numerical)
    s_cat = len(schema.context_categorical)
    ctx_kinds = [f.kind for f in schema.contextual]
    x_ctx_num = np.zeros((n, s_num))
    x_ctx_cat = np.zeros((n, s_cat), dtype=np.int64)
    for i, r in enumerate(rows):
        num_pos = cat_pos = 0
        for k, kind in enumerate(ctx_kinds):
            if kind == NUMERICAL:
                x_ctx_num[i, num_pos] = r.x_context[k]
                num_pos += 1
            else:
                x_ctx_cat[i, cat_pos] = r.x_context[k]
                cat_pos += 1
    return Dataset(
        schema=schema,
        x_num=np.array([r.x_cont for r in rows], dtype=np.float64).reshape(n, schema.n_numerical),
        x_cat=np.array([r.x_cat for r in rows]).reshape(n, schema.n_categorical),
        x_ctx_num=x_ctx_num,
        x_ctx_cat=x_ctx_cat,
        y=np.asarray(targets, dtype=np.float64),
        provenance={},
    )


# -- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint, exhaustive train/val/test fractions with a shuffle seed."""

    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("train", "val", "test"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"split fraction {name} must be > 0")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ConfigError(
                f"split fractions must sum to 1, got {self.train + self.val + self.test}"
            )

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test, "seed": self.seed}


# Proportions of the round-spends reference data: 7,074,749 / 1,165,011 /
# 831,583 tuples, rounded to three decimals.
TABLE1_SPLIT = SplitSpec(train=0.78, val=0.128, test=0.092, seed=0)


@dataclass
class Splits:
    """The three disjoint subsets plus identifying hashes."""

    train: Dataset
    val: Dataset
    test: Dataset
    spec: SplitSpec
    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray
    test_hash: str

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def split(dataset: Dataset, spec: SplitSpec) -> Splits:
    """Seeded shuffle, then contiguous partition into train/val/test."""
    n = dataset.n_rows
    n_train = int(n * spec.train)
    n_val = int(n * spec.val)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"{n} rows are too few for nonempty splits {spec}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    idx_train = perm[:n_train]
    idx_val = perm[n_train:n_train + n_val]
    idx_test = perm[n_train + n_val:]
    h = hashlib.sha256()
    h.update(dataset.hash().encode())
    h.update(np.ascontiguousarray(np.sort(idx_test), dtype=np.int64).tobytes())
    return Splits(
        train=dataset.take(idx_train),
        val=dataset.take(idx_val),
        test=dataset.take(idx_test),
        spec=spec,
        train_indices=idx_train,
        val_indices=idx_val,
        test_indices=idx_test,
        test_hash=h.hexdigest(),
    )


# -- preprocessing -------------------------------------------------------------


class Preprocessor:
    """Train-split statistics applied uniformly to every split.

    Numerical columns (plain and context) are z-scored with the population
    standard deviation; columns with std below 1e-12 become all zeros.
    Categorical values are label encoded; index 0 is reserved for values
    never seen during fit, so encoded cardinalities are n_seen + 1.
    """

    def __init__(self):
        self.fitted = False
        self.num_mean = None
        self.num_std = None
        self.ctx_mean = None
        self.ctx_std = None
        self.cat_maps: list[dict] = []
        self.ctx_cat_maps: list[dict] = []
        self.schema_out: FeatureSchema | None = None

    @staticmethod
    def _moments(block: np.ndarray):
        mean = block.mean(axis=0) if block.size else np.zeros(block.shape[1])
        std = block.std(axis=0) if block.size else np.ones(block.shape[1])
        std = np.where(std < _STD_FLOOR, 1.0, std)
        return mean, std

    @staticmethod
    def _value_map(col: np.ndarray) -> dict:
        seen = sorted(set(col.tolist()), key=repr)
        return {v: i + 1 for i, v in enumerate(seen)}

    def fit(self, train: Dataset) -> "Preprocessor":
        self.num_mean, self.num_std = self._moments(train.x_num)
        self.ctx_mean, self.ctx_std = self._moments(train.x_ctx_num)
        self.cat_maps = [self._value_map(train.x_cat[:, j]) for j in range(train.x_cat.shape[1])]
        self.ctx_cat_maps = [
            self._value_map(train.x_ctx_cat[:, j]) for j in range(train.x_ctx_cat.shape[1])
        ]
        schema = train.schema
        cat_iter = iter(self.cat_maps)
        ctx_iter = iter(self.ctx_cat_maps)
        new_feats = []
        for f in schema.features:
            if f.kind == CATEGORICAL:
                mapping = next(ctx_iter) if f.is_context else next(cat_iter)
                new_feats.append(replace(f, cardinality=len(mapping) + 1))
            else:
                new_feats.append(f)
        self.schema_out = FeatureSchema(tuple(new_feats), window=schema.window, target=schema.target)
        self.fitted = True
        return self

    @staticmethod
    def _encode(block: np.ndarray, maps: list[dict]) -> np.ndarray:
        out = np.zeros(block.shape, dtype=np.int64)
        for j, mapping in enumerate(maps):
            col = block[:, j]
            out[:, j] = [mapping.get(v, 0) for v in col.tolist()]
        return out

    def transform(self, ds: Dataset) -> Dataset:
        """Pure function of the fitted statistics; the target passes through."""
        if not self.fitted:
            raise NotFittedError("preprocessor must be fitted before transform")
        return Dataset(
            schema=self.schema_out,
            x_num=(ds.x_num - self.num_mean) / self.num_std,
            x_cat=self._encode(ds.x_cat, self.cat_maps),
            x_ctx_num=(ds.x_ctx_num - self.ctx_mean) / self.ctx_std,
            x_ctx_cat=self._encode(ds.x_ctx_cat, self.ctx_cat_maps),
            y=ds.y.copy(),
            provenance=ds.provenance,
        )


def fit_apply_preprocessor(train: Dataset, *others: Dataset):
    """Fit on the training split only; return transformed splits + the preprocessor."""
    pre = Preprocessor().fit(train)
    transformed = [pre.transform(train)] + [pre.transform(ds) for ds in others]
    return (*transformed, pre)


# -- CSV interchange -----------------------------------------------------------


def _parse_cat(cell: str):
    try:
        return int(cell)
    except ValueError:
        return cell


def save_csv(dataset: Dataset, path) -> None:
    """UTF-8 CSV, header row, floats at 12 significant digits, LF endings."""
    schema = dataset.schema
    names = [f.name for f in schema.features] + [schema.target]
    num_pos = cat_pos = ctxn_pos = ctxc_pos = 0
    columns = []
    for f in schema.features:
        if f.kind == NUMERICAL and not f.is_context:
            columns.append(("f", dataset.x_num[:, num_pos])); num_pos += 1
        elif f.kind == CATEGORICAL and not f.is_context:
            columns.append(("c", dataset.x_cat[:, cat_pos])); cat_pos += 1
        elif f.kind == NUMERICAL:
            columns.append(("f", dataset.x_ctx_num[:, ctxn_pos])); ctxn_pos += 1
        else:
            columns.append(("c", dataset.x_ctx_cat[:, ctxc_pos])); ctxc_pos += 1
    columns.append(("f", dataset.y))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for i in range(dataset.n_rows):
            row = [
                (_FLOAT_FMT % col[i]) if kind == "f" else str(col[i])
                for kind, col in columns
            ]
            writer.writerow(row)


def load_csv(path, schema: FeatureSchema) -> Dataset:
    """Typed parse against the schema; errors cite 1-based file line numbers."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file") from None
        expected = [f.name for f in schema.features] + [schema.target]
        missing = [n for n in expected if n not in header]
        unknown = [n for n in header if n not in expected]
        if schema.target not in header:
            raise SchemaError(f"header is missing the target column {schema.target!r}")
        if missing:
            raise SchemaError(f"header is missing columns: {missing}")
        if unknown:
            raise SchemaError(f"unknown columns in header: {unknown}")
        pos = {name: header.index(name) for name in expected}

        feats = schema.features
        cells: list[list] = [[] for _ in feats]
        targets: list[float] = []
        n_cols = len(header)
        for row in reader:
            line = reader.line_num
            if len(row) != n_cols:
                raise DataError(f"expected {n_cols} cells, found {len(row)}", line=line)
            for k, f in enumerate(feats):
                cell = row[pos[f.name]]
                if cell == "":
                    raise DataError(f"missing value for column {f.name!r}", line=line)
                if f.kind == NUMERICAL:
                    try:
                        cells[k].append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"cannot parse {cell!r} as a number for column {f.name!r}",
                            line=line,
                        ) from None
                else:
                    cells[k].append(_parse_cat(cell))
            tcell = row[pos[schema.target]]
            try:
                targets.append(float(tcell))
            except ValueError:
                raise DataError(
                    f"cannot parse {tcell!r} as a number for target {schema.target!r}",
                    line=line,
                ) from None

    if not targets:
        raise DataError("file contains a header but no data rows")

    def gather_block(pred, dtype):
        block = [cells[k] for k, f in enumerate(feats) if pred(f)]
        arr = np.array(block, dtype=dtype).T if block else np.zeros((len(targets), 0), dtype=dtype)
        return arr.reshape(len(targets), len(block))

    def cat_block(pred):
        block = [cells[k] for k, f in enumerate(feats) if pred(f)]
        if not block:
            return np.zeros((len(targets), 0), dtype=np.int64)
        flat = [v for col in block for v in col]
        dtype = np.int64 if all(isinstance(v, int) for v in flat) else object
        return np.array(block, dtype=dtype).T.reshape(len(targets), len(block))

    return Dataset(
        schema=schema,
        x_num=gather_block(lambda f: f.kind == NUMERICAL and not f.is_context, np.float64),
        x_cat=cat_block(lambda f: f.kind == CATEGORICAL and not f.is_context),
        x_ctx_num=gather_block(lambda f: f.kind == NUMERICAL and f.is_context, np.float64),
        x_ctx_cat=cat_block(lambda f: f.kind == CATEGORICAL and f.is_context),
        y=np.array(targets, dtype=np.float64),
    )


# -- synthetic round-spends generator -------------------------------------------


def _default_cardinalities(m: int) -> tuple[int, ...]:
    # varied small cardinalities; declared, not taken from any reference data
    return tuple(2 + (3 * j) % 11 for j in range(m))


@dataclass(frozen=True)
class GenConfig:
    """Synthetic user-round-spends generator settings.

    The target is ``<a, user> + sum_j u_j[cat_j] + sum_o gamma^|o| *
    tanh(r_{o,1} * r_{o,2}) + noise`` where the context sum runs over the
    nonzero offsets of the window and multiplies the first two round
    features of each neighboring round. ``user_signal`` and ``cat_signal``
    set the variance contributed by the linear and categorical terms.
    ``per_offset`` current-round features are also emitted as plain
    numerical columns but never enter the target.
    """

    n: int
    n_user: int = 114
    cardinalities: tuple[int, ...] = _default_cardinalities(21)
    per_offset: int = 6
    window: int = 5
    context_weight: float = 0.6
    noise: float = 0.25
    user_signal: float = 0.5
    cat_signal: float = 0.125

    def __post_init__(self):
        object.__setattr__(self, "cardinalities", tuple(self.cardinalities))
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.n_user < 0 or self.window < 0:
            raise ConfigError("n_user and window must be >= 0")
        if self.per_offset < 2:
            raise ConfigError("per_offset must be >= 2 (the context term multiplies two features)")
        if not 0.0 <= self.context_weight < 1.0:
            raise ConfigError(f"context_weight must be in [0, 1), got {self.context_weight}")
        if self.noise < 0 or self.user_signal < 0 or self.cat_signal < 0:
            raise ConfigError("noise and signal variances must be >= 0")
        if any(s < 1 for s in self.cardinalities):
            raise ConfigError("cardinalities must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n_user": self.n_user,
            "cardinalities": list(self.cardinalities),
            "per_offset": self.per_offset,
            "window": self.window,
            "context_weight": self.context_weight,
            "noise": self.noise,
            "user_signal": self.user_signal,
            "cat_signal": self.cat_signal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**{**d, "cardinalities": tuple(d["cardinalities"])})


#: 120 numerical (114 user + 6 current-round), 21 categorical, 60 context
#: columns — the shape of the round-spends reference data.
GEN_PRESETS = {
    "table1": dict(
        n_user=114,
        cardinalities=_default_cardinalities(21),
        per_offset=6,
        window=5,
    ),
    "small": dict(
        n_user=6,
        cardinalities=(3, 5),
        per_offset=2,
        window=2,
    ),
}


def preset_gen_config(name: str, n: int, **overrides) -> GenConfig:
    if name not in GEN_PRESETS:
        raise ConfigError(f"unknown generator preset {name!r}; choose from {sorted(GEN_PRESETS)}")
    return GenConfig(n=n, **{**GEN_PRESETS[name], **overrides})


def synth_schema(config: GenConfig) -> FeatureSchema:
    """Schema for generated data: user_*, round_*, cat_*, round_*@o<offset>."""
    feats: list[Feature] = []
    feats += [Feature(f"user_{i}", NUMERICAL, group="user") for i in range(config.n_user)]
    feats += [Feature(f"round_{j}", NUMERICAL, group="round") for j in range(config.per_offset)]
    feats += [
        Feature(f"cat_{j}", CATEGORICAL, cardinality=s, group="user")
        for j, s in enumerate(config.cardinalities)
    ]
    for o in range(-config.window, config.window + 1):
        if o == 0:
            continue
        feats += [
            Feature(f"round_{j}@o{o}", NUMERICAL, offset=o, group="context", subtag="C_t")
            for j in range(config.per_offset)
        ]
    return FeatureSchema(tuple(feats), window=config.window, target="spend")


def context_target_term(x_ctx_num: np.ndarray, config: GenConfig) -> np.ndarray:
    """The planted interaction: sum_o gamma^|o| * tanh(r_{o,1} * r_{o,2})."""
    q, w = config.per_offset, config.window
    term = np.zeros(len(x_ctx_num))
    offsets = [o for o in range(-w, w + 1) if o != 0]
    for pos, o in enumerate(offsets):
        base = pos * q
        pair = x_ctx_num[:, base] * x_ctx_num[:, base + 1]
        term += config.context_weight ** abs(o) * np.tanh(pair)
    return term


def synth_generate(config: GenConfig, seed: int) -> Dataset:
    """Generate a dataset; coefficients land in provenance for exact re-evaluation."""
    rng = np.random.default_rng(seed)
    n, c, q, w = config.n, config.n_user, config.per_offset, config.window
    m = len(config.cardinalities)

    user = rng.standard_normal((n, c))
    round_now = rng.standard_normal((n, q))
    cats = (
        np.column_stack([rng.integers(0, s, size=n) for s in config.cardinalities])
        if m
        else np.zeros((n, 0), dtype=np.int64)
    )
    ctx = rng.standard_normal((n, 2 * w * q)) if w else np.zeros((n, 0))

    a = rng.standard_normal(c) * np.sqrt(config.user_signal / max(c, 1))
    u_tables = [rng.standard_normal(s) * np.sqrt(config.cat_signal / max(m, 1)) for s in config.cardinalities]
    noise = rng.standard_normal(n) * config.noise if config.noise > 0 else np.zeros(n)

    y = user @ a
    for j, table in enumerate(u_tables):
        y = y + table[cats[:, j]]
    y = y + context_target_term(ctx, config) + noise

    return Dataset(
        schema=synth_schema(config),
        x_num=np.column_stack([user, round_now]) if c or q else np.zeros((n, 0)),
        x_cat=cats,
        x_ctx_num=ctx,
        x_ctx_cat=np.zeros((n, 0), dtype=np.int64),
        y=y,
        provenance={
            "generator": config.to_dict(),
            "seed": seed,
            "coefficients": {
                "a": a.tolist(),
                "u": [t.tolist() for t in u_tables],
            },
        },
    )


# -- dataset description file ----------------------------------------------------


@dataclass
class DatasetDescription:
    """JSON-serializable companion of a data file: schema plus bookkeeping."""

    schema: FeatureSchema
    split: SplitSpec | None = None
    generator: GenConfig | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"version": 1, "schema": self.schema.to_dict()}
        if self.split is not None:
            out["split"] = self.split.to_dict()
        if self.generator is not None:
            out["generator"] = self.generator.to_dict()
        if self.provenance:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetDescription":
        if d.get("version") != 1:
            raise DataError(f"unsupported description version {d.get('version')!r}")
        return cls(
            schema=FeatureSchema.from_dict(d["schema"]),
            split=SplitSpec(**d["split"]) if "split" in d else None,
            generator=GenConfig.from_dict(d["generator"]) if "generator" in d else None,
            provenance=d.get("provenance", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetDescription":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid description file: {exc}") from None
