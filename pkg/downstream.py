"""
Downstream Property Prediction
Fingerprints (learned readout, ECFP6, random baseline), dataset splits,
ridge regression, R² and validation-only radius selection
"""

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import (ConfigError, ConstantTarget, DataError, DatasetTooSmall, DegenerateDesign,
                    EmptyInput, ShapeMismatch)
from fileutil import atomic_write
from hypergraph import canonical_form, to_hypergraph
from model import GraphBatch, ModelParams, encode_batch
from molgraph import ATOMIC_NUMBER, Molecule, molecular_weight, ring_count

SPLITS = ('train', 'val', 'test')
DEFAULT_RATIOS = (0.6, 0.2, 0.2)
RIDGE_GRID = (1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)
RADIUS_SET = (3, 5, 6, 7, 8)

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
MASK64 = (1 << 64) - 1


@dataclass
class LabeledDataset:
    molecules: List[Molecule]
    targets: np.ndarray
    splits: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.targets) != len(self.molecules):
            raise ShapeMismatch(f'{len(self.targets)} targets for {len(self.molecules)} molecules')
        if self.splits and len(self.splits) != len(self.molecules):
            raise ShapeMismatch('split tags do not cover the dataset')

    def __len__(self) -> int:
        return len(self.molecules)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, tag in enumerate(self.splits) if tag == split], dtype=np.int64)


@dataclass
class FingerprintMatrix:
    values: np.ndarray
    provenance: str
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.values))]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def rows(self, index: np.ndarray) -> np.ndarray:
        return self.values[index]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(['id'] + [f'f{k}' for k in range(self.dim)])
        for ident, row in zip(self.ids, self.values):
            writer.writerow([ident] + [repr(float(v)) for v in row])
        return out.getvalue()

    def write_csv(self, path: str):
        atomic_write(path, self.to_csv().encode('utf-8'))

    @classmethod
    def read_csv(cls, path: str, provenance: Optional[str] = None) -> 'FingerprintMatrix':
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[0] != 'id':
                raise DataError(f'{path}: fingerprint CSV must start with an id column')
            ids, rows = [], []
            for lineno, record in enumerate(reader, 2):
                if len(record) != len(header):
                    raise DataError(f'{path}: line {lineno} has {len(record)} fields, expected {len(header)}')
                ids.append(record[0])
                try:
                    rows.append([float(v) for v in record[1:]])
                except ValueError as e:
                    raise DataError(f'{path}: line {lineno}: {e}') from e
        values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
        return cls(values, provenance or path, ids)


# ---------------------------------------------------------------------------
# Fingerprints
# ---------------------------------------------------------------------------

def fingerprint(molecules: Sequence[Molecule], params: ModelParams, provenance: str = 'mhg-gnn',
                batch_size: int = 256) -> FingerprintMatrix:
    """Row i is the eval-mode readout h_G of molecule i"""
    rows = []
    for start in range(0, len(molecules), batch_size):
        chunk = molecules[start:start + batch_size]
        try:
            batch = GraphBatch.from_molecules(chunk)
        except DataError:
            for offset, m in enumerate(chunk):
                try:
                    GraphBatch.from_molecules([m])
                except DataError as e:
                    raise type(e)(f'molecule {start + offset}: {e}') from e
            raise
        rows.append(encode_batch(batch, params.encoder, training=False).numpy())
    values = np.concatenate(rows) if rows else np.zeros((0, params.config.readout_dim))
    return FingerprintMatrix(values, provenance)


def _fnv1a(values: Sequence[int], seed: int = FNV_OFFSET) -> int:
    h = seed
    for value in values:
        for byte in (value & MASK64).to_bytes(8, 'little'):
            h ^= byte
            h = (h * FNV_PRIME) & MASK64
    return h


def ecfp(m: Molecule, radius: int = 3, n_bits: int = 1024) -> np.ndarray:
    """
    Morgan-style fingerprint folded to n_bits
    Atom invariants and every update are hashed with 64-bit FNV-1a.
    """
    neighbors = [[] for _ in m.atoms]
    for bond in m.bonds:
        neighbors[bond.begin].append((bond.order.index, bond.end))
        neighbors[bond.end].append((bond.order.index, bond.begin))

    ids = [
        _fnv1a([ATOMIC_NUMBER[a.element], len(neighbors[i]), a.explicit_h_count,
                a.formal_charge, int(a.aromatic), int(a.in_ring)])
        for i, a in enumerate(m.atoms)
    ]
    bits = np.zeros(n_bits, dtype=np.uint8)
    for value in ids:
        bits[value % n_bits] = 1
    for depth in range(1, radius + 1):
        updated = []
        for i in range(len(m.atoms)):
            environment = sorted((order, ids[j]) for order, j in neighbors[i])
            flat = [depth, ids[i]] + [x for pair in environment for x in pair]
            updated.append(_fnv1a(flat))
        ids = updated
        for value in ids:
            bits[value % n_bits] = 1
    return bits


def ecfp_matrix(molecules: Sequence[Molecule], radius: int = 3, n_bits: int = 1024) -> FingerprintMatrix:
    values = np.array([ecfp(m, radius, n_bits) for m in molecules], dtype=np.float64).reshape(-1, n_bits)
    return FingerprintMatrix(values, 'ecfp6')


def random_fingerprint(molecules: Sequence[Molecule], dim: int, seed: int = 0) -> FingerprintMatrix:
    """Chance baseline: a Gaussian vector per molecule, keyed by its canonical code"""
    rows = []
    for m in molecules:
        digest = hashlib.sha256(canonical_form(to_hypergraph(m)).data).digest()
        key = int.from_bytes(digest[:8], 'little')
        rows.append(np.random.default_rng([seed, key]).standard_normal(dim))
    return FingerprintMatrix(np.array(rows).reshape(-1, dim), 'random')


def compute_targets(molecules: Sequence[Molecule], kind: str) -> np.ndarray:
    if kind == 'molecular_weight':
        return np.array([molecular_weight(m) for m in molecules])
    if kind == 'ring_count':
        return np.array([float(ring_count(m)) for m in molecules])
    raise ConfigError(f'unknown target kind: {kind}')


# ---------------------------------------------------------------------------
# Splits, regression, scoring
# ---------------------------------------------------------------------------

def split_dataset(d: LabeledDataset, ratios: Tuple[float, float, float] = DEFAULT_RATIOS,
                  seed: int = 0) -> LabeledDataset:
    """Seeded shuffle, then contiguous train/val/test cut; val and test take floor(n * ratio)"""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f'split ratios must be three non-negative numbers summing to 1, got {ratios}')
    n = len(d)
    if n < 5:
        raise DatasetTooSmall(f'need at least 5 records to split, got {n}')
    n_val = int(np.floor(n * ratios[1]))
    n_test = int(np.floor(n * ratios[2]))
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    tags = [''] * n
    for position, index in enumerate(order):
        if position < n_train:
            tags[index] = 'train'
        elif position < n_train + n_val:
            tags[index] = 'val'
        else:
            tags[index] = 'test'
    return LabeledDataset(list(d.molecules), d.targets.copy(), tags)


def r2_score(y_true: Sequence[float], y_pred: Sequence[float]) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ShapeMismatch(f'r2_score: {y_true.shape} against {y_pred.shape}')
    if len(y_true) < 2:
        raise DatasetTooSmall('r2_score needs at least 2 values')
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ConstantTarget('R² is undefined for a constant target')
    ss_res = float(((y_true - y_pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


@dataclass
class RidgeModel:
    columns: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: float
    alpha: float
    validation_r2: Optional[float] = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Z = (X[:, self.columns] - self.mean) / self.scale
        return Z @ self.coef + self.intercept


def _solve_ridge(Z: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    n, d = Z.shape
    if d <= n:
        return np.linalg.solve(Z.T @ Z + alpha * np.eye(d), Z.T @ y)
    # dual form when features outnumber rows
    return Z.T @ np.linalg.solve(Z @ Z.T + alpha * np.eye(n), y)


def fit_ridge(X_train: np.ndarray, y_train: np.ndarray, grid: Sequence[float] = RIDGE_GRID,
              X_val: Optional[np.ndarray] = None, y_val: Optional[np.ndarray] = None) -> RidgeModel:
    """
    Closed-form ridge on train-standardized features

    Constant and duplicated columns are dropped first. With validation data the
    grid point with the best validation R² wins (smaller alpha on ties); without
    it the smallest grid point is used.
    """
    X = np.asarray(X_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeMismatch(f'fit_ridge: X {X.shape} against y {y.shape}')
    if len(X) < 2:
        raise DatasetTooSmall('fit_ridge needs at least 2 training rows')
    if not grid:
        raise EmptyInput('empty regularization grid')

    std = X.std(axis=0)
    varying = np.flatnonzero(std > 0)
    dropped = X.shape[1] - len(varying)
    if len(varying) == 0:
        raise DegenerateDesign('every feature is constant on the training rows')
    _, first = np.unique(X[:, varying], axis=1, return_index=True)
    columns = varying[np.sort(first)]
    duplicates = len(varying) - len(columns)
    if dropped or duplicates:
        print(f"⚠️  fit_ridge: dropped {dropped} constant and {duplicates} duplicate feature(s)")

    mean = X[:, columns].mean(axis=0)
    scale = X[:, columns].std(axis=0)
    Z = (X[:, columns] - mean) / scale
    y_mean = float(y.mean())

    best: Optional[RidgeModel] = None
    for alpha in sorted(grid):
        coef = _solve_ridge(Z, y - y_mean, alpha)
        model = RidgeModel(columns, mean, scale, coef, y_mean, alpha)
        if X_val is None or y_val is None:
            return model if best is None else best
        model.validation_r2 = r2_score(y_val, model.predict(X_val))
        if best is None or model.validation_r2 > best.validation_r2:
            best = model
    return best


def select_radius(scores: Dict[int, float]) -> int:
    """Radius with the best validation R²; the smaller radius wins ties"""
    if not scores:
        raise EmptyInput('no radius scores to select from')
    return min(scores, key=lambda r: (-scores[r], r))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    method: str
    radius: Optional[int]
    split: str
    r2: float


def evaluate_fingerprints(fp: FingerprintMatrix, dataset: LabeledDataset, method: str,
                          radius: Optional[int] = None, grid: Sequence[float] = RIDGE_GRID
                          ) -> Tuple[RidgeModel, List[ReportRow]]:
    """Fit on train, tune on val, score every split"""
    if len(fp.values) != len(dataset):
        raise ShapeMismatch(f'{len(fp.values)} fingerprint rows for {len(dataset)} records')
    idx = {split: dataset.indices(split) for split in SPLITS}
    y = dataset.targets
    model = fit_ridge(fp.rows(idx['train']), y[idx['train']], grid,
                      fp.rows(idx['val']), y[idx['val']])
    rows = [ReportRow(method, radius, split, r2_score(y[idx[split]], model.predict(fp.rows(idx[split]))))
            for split in SPLITS]
    return model, rows


@dataclass
class RadiusScan:
    validation_r2: Dict[int, float]
    selected: int
    test_r2: float

    def report_rows(self, method: str = 'mhg-gnn') -> List[ReportRow]:
        rows = [ReportRow(method, r, 'val', score) for r, score in sorted(self.validation_r2.items())]
        rows.append(ReportRow(f'{method} (selected)', self.selected, 'test', self.test_r2))
        return rows


def scan_radii(fingerprints: Dict[int, FingerprintMatrix], dataset: LabeledDataset,
               grid: Sequence[float] = RIDGE_GRID) -> RadiusScan:
    """
    Tune and score each radius on validation only, select, then score the
    selected radius on test; test rows of other radii are never evaluated
    """
    if not fingerprints:
        raise EmptyInput('no fingerprints to scan')
    train, val = dataset.indices('train'), dataset.indices('val')
    y = dataset.targets
    models, scores = {}, {}
    for radius, fp in sorted(fingerprints.items()):
        if len(fp.values) != len(dataset):
            raise ShapeMismatch(f'radius {radius}: {len(fp.values)} rows for {len(dataset)} records')
        model = fit_ridge(fp.rows(train), y[train], grid, fp.rows(val), y[val])
        models[radius] = model
        scores[radius] = model.validation_r2
    selected = select_radius(scores)
    test = dataset.indices('test')
    test_r2 = r2_score(y[test], models[selected].predict(fingerprints[selected].rows(test)))
    return RadiusScan(scores, selected, test_r2)


def report_csv(rows: Sequence[ReportRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(['method', 'radius', 'split', 'r2'])
    for row in rows:
        writer.writerow([row.method, '' if row.radius is None else row.radius, row.split, repr(row.r2)])
    return out.getvalue()


def write_report(path: str, rows: Sequence[ReportRow]):
    atomic_write(path, report_csv(rows).encode('utf-8'))
